//! Dataset ingestion: the CIFAR-10 binary record format and a synthetic
//! mixed-difficulty generator.
//!
//! Synthetic images are tiled into patches that are either a flat colour
//! ("easy") or a class-specific texture ("hard"). Only hard patches carry
//! label information. Every texture is mirror-symmetric within its patch, so
//! horizontal flips preserve the label.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{MorError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_CLASSES: usize = 10;

/// One `H×W×C` image with pixels in `[0, 1]` and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Per-record, per-patch hardness (synthetic data only).
    pub difficulty: Option<Vec<Vec<bool>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.records.iter().map(|r| r.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Fails unless every record matches the model's geometry and classes.
    pub fn check_geometry(&self, cfg: &ModelConfig) -> Result<()> {
        let want = [cfg.image_h, cfg.image_w, cfg.channels];
        for (i, r) in self.records.iter().enumerate() {
            if r.image.shape() != want {
                return Err(MorError::Invalid(format!(
                    "record {i}: image shape {:?} does not match model geometry {:?}",
                    r.image.shape(),
                    want
                )));
            }
            if r.label >= cfg.num_classes {
                return Err(MorError::Label {
                    label: r.label,
                    classes: cfg.num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Parses CIFAR-10 binary records: one label byte, then 1024 red, 1024
/// green and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Vec<DatasetRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(MorError::format(
            path,
            format!(
                "truncated CIFAR-10 file: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(MorError::format(path, format!("record {i}: label byte {label} > 9")));
            }
            let px = &rec[1..];
            let mut data = Vec::with_capacity(plane * CIFAR_CHANNELS);
            for p in 0..plane {
                for c in 0..CIFAR_CHANNELS {
                    data.push(px[c * plane + p] as f64 / 255.0);
                }
            }
            Ok(DatasetRecord {
                image: Tensor::new(&[CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS], data)?,
                label,
            })
        })
        .collect()
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MorError::io(path, e))?;
    parse_cifar10(&bytes, path)
}

/// Inverse of [`parse_cifar10`]; pixels are quantized with `round(255·p)`.
pub fn encode_cifar10(records: &[DatasetRecord]) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for r in records {
        if r.image.shape() != [CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS] || r.label >= CIFAR_CLASSES {
            return Err(MorError::Invalid("record is not CIFAR-10 shaped".into()));
        }
        out.push(r.label as u8);
        for c in 0..CIFAR_CHANNELS {
            for p in 0..plane {
                let v = r.image.data()[p * CIFAR_CHANNELS + c];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Texture bit for class `class` at `(y, x)` inside a `p×p` patch.
fn texture(class: usize, y: usize, x: usize, p: usize) -> bool {
    // distance from the vertical mid-line keeps every pattern mirror-symmetric
    let dx = (2 * x).abs_diff(p.saturating_sub(1));
    let dy = (2 * y).abs_diff(p.saturating_sub(1));
    let quarter = p.max(2) / 2;
    let base = match class % 4 {
        0 => y.is_multiple_of(2),
        1 => dx < quarter,
        2 => dx < quarter && dy < quarter,
        _ => x == 0 || y == 0 || x + 1 == p || y + 1 == p,
    };
    match y.checked_div(class / 4) {
        Some(stripe) => base ^ (stripe % 2 == 1),
        None => base,
    }
}

/// Synthetic images in the model's geometry. Each image has exactly
/// `round(hard_fraction · N)` hard patches at random positions; the label is
/// uniform over classes, except that images without hard patches are class 0.
pub fn synth_mixed_difficulty(n: usize, seed: u64, cfg: &ModelConfig, hard_fraction: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(MorError::Invalid("synthetic dataset needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&hard_fraction) {
        return Err(MorError::Invalid(format!("hard fraction {hard_fraction} outside [0, 1]")));
    }
    let (gh, gw) = cfg.grid();
    let (p, c) = (cfg.patch_size, cfg.channels);
    let patches = gh * gw;
    let hard_count = (hard_fraction * patches as f64).round() as usize;
    let mut rng = Rng::seed_from(seed);
    let mut records = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);

    for _ in 0..n {
        let label = if hard_count == 0 { 0 } else { rng.below(cfg.num_classes) };
        let mut order: Vec<usize> = (0..patches).collect();
        rng.shuffle(&mut order);
        let mut hard = vec![false; patches];
        for &i in &order[..hard_count] {
            hard[i] = true;
        }

        let mut img = vec![0.0; cfg.image_h * cfg.image_w * c];
        for (pi, &is_hard) in hard.iter().enumerate() {
            let (gy, gx) = (pi / gw, pi % gw);
            let colour: Vec<f64> = (0..c).map(|_| 0.15 + 0.7 * rng.uniform()).collect();
            let amp = 0.3 + 0.1 * rng.uniform();
            for y in 0..p {
                for x in 0..p {
                    let on = is_hard && texture(label, y, x, p);
                    for (ch, &base) in colour.iter().enumerate() {
                        let v = if is_hard {
                            let noise = 0.05 * (rng.uniform() - 0.5);
                            base + if on { amp } else { -amp } + noise
                        } else {
                            base
                        };
                        let idx = ((gy * p + y) * cfg.image_w + gx * p + x) * c + ch;
                        img[idx] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        records.push(DatasetRecord {
            image: Tensor::new(&[cfg.image_h, cfg.image_w, c], img)?,
            label,
        });
        difficulty.push(hard);
    }
    Ok(Dataset {
        records,
        difficulty: Some(difficulty),
    })
}

/// Mirror an `H×W×C` image left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let [h, w, c] = *image.shape() else {
        return image.clone();
    };
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let s = (y * w + x) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

/// Where to get a dataset: a CIFAR-10 binary file, or
/// `synth:N:SEED[:HARD_FRACTION]`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cifar(std::path::PathBuf),
    Synth { n: usize, seed: u64, hard_fraction: f64 },
}

pub const DEFAULT_HARD_FRACTION: f64 = 0.5;

impl DataSource {
    pub fn parse(spec: &str) -> Result<Self> {
        let Some(rest) = spec.strip_prefix("synth:") else {
            return Ok(DataSource::Cifar(spec.into()));
        };
        let bad = || MorError::Invalid(format!("bad synthetic data spec `{spec}` (expected synth:N:SEED[:FRACTION])"));
        let parts: Vec<&str> = rest.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let n = parts[0].parse().map_err(|_| bad())?;
        let seed = parts[1].parse().map_err(|_| bad())?;
        let hard_fraction = match parts.get(2) {
            Some(f) => f.parse().map_err(|_| bad())?,
            None => DEFAULT_HARD_FRACTION,
        };
        Ok(DataSource::Synth { n, seed, hard_fraction })
    }

    pub fn load(&self, cfg: &ModelConfig) -> Result<Dataset> {
        match self {
            DataSource::Cifar(path) => Ok(Dataset {
                records: load_cifar10_binary(path)?,
                difficulty: None,
            }),
            DataSource::Synth { n, seed, hard_fraction } => synth_mixed_difficulty(*n, *seed, cfg, *hard_fraction),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn crafted_bytes() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, salt) in [(3u8, 7u32), (9, 101)] {
            bytes.push(label);
            for i in 0..3072u32 {
                bytes.push(((i * salt + label as u32) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn cifar_round_trip_is_byte_exact() {
        let bytes = crafted_bytes();
        let recs = parse_cifar10(&bytes, Path::new("crafted.bin")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label, 3);
        assert_eq!(recs[1].label, 9);
        // green plane, pixel (row 1, col 2) of record 1
        let p = 32 + 2;
        let byte = bytes[CIFAR_RECORD_BYTES + 1 + 1024 + p];
        assert_eq!(recs[1].image.data()[p * 3 + 1], byte as f64 / 255.0);
        assert_eq!(encode_cifar10(&recs).unwrap(), bytes);
    }

    #[test]
    fn cifar_edge_cases() {
        assert!(parse_cifar10(&[], Path::new("e")).unwrap().is_empty());
        let err = parse_cifar10(&[0u8; 3072], Path::new("short.bin")).unwrap_err();
        assert!(err.to_string().contains("short.bin"), "{err}");
        let mut bad = crafted_bytes();
        bad[0] = 10;
        assert!(parse_cifar10(&bad, Path::new("b")).is_err());
        assert!(matches!(load_cifar10_binary("/nonexistent/x.bin"), Err(MorError::Io { .. })));
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let cfg = preset("desk").unwrap().model;
        let a = synth_mixed_difficulty(4, 9, &cfg, 0.25).unwrap();
        let b = synth_mixed_difficulty(4, 9, &cfg, 0.25).unwrap();
        assert_eq!(a, b);
        for r in &a.records {
            assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r.label < cfg.num_classes);
        }
    }

    #[test]
    fn synth_hard_fraction_is_exact() {
        let cfg = preset("desk").unwrap().model;
        for (frac, expect) in [(0.0, 0), (0.25, 4), (0.5, 8), (1.0, 16)] {
            let d = synth_mixed_difficulty(6, 1, &cfg, frac).unwrap();
            for hard in d.difficulty.unwrap() {
                assert_eq!(hard.iter().filter(|&&h| h).count(), expect);
            }
        }
    }

    #[test]
    fn synth_easy_only_images_are_class_zero() {
        let cfg = preset("desk").unwrap().model;
        let d = synth_mixed_difficulty(8, 2, &cfg, 0.0).unwrap();
        assert!(d.records.iter().all(|r| r.label == 0));
    }

    #[test]
    fn easy_patches_are_flat() {
        let cfg = preset("desk").unwrap().model;
        let d = synth_mixed_difficulty(2, 5, &cfg, 0.25).unwrap();
        let hard = &d.difficulty.as_ref().unwrap()[0];
        let patches = crate::vit::patchify(&d.records[0].image, cfg.patch_size).unwrap();
        for (i, &h) in hard.iter().enumerate() {
            let row = patches.row(i);
            let flat = row.chunks(3).all(|px| px == &row[..3]);
            assert_eq!(flat, !h, "patch {i}");
        }
    }

    #[test]
    fn textures_are_mirror_symmetric() {
        for p in [2, 3, 4, 8] {
            for class in 0..10 {
                for y in 0..p {
                    for x in 0..p {
                        assert_eq!(texture(class, y, x, p), texture(class, y, p - 1 - x, p));
                    }
                }
            }
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let img = Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let f = hflip(&img);
        assert_eq!(&f.data()[..2], &[4.0, 5.0]);
        assert_eq!(hflip(&f), img);
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            DataSource::parse("synth:512:0").unwrap(),
            DataSource::Synth { n: 512, seed: 0, hard_fraction: DEFAULT_HARD_FRACTION }
        );
        assert_eq!(
            DataSource::parse("synth:8:3:0.5").unwrap(),
            DataSource::Synth { n: 8, seed: 3, hard_fraction: 0.5 }
        );
        assert!(DataSource::parse("synth:8").is_err());
        assert_eq!(DataSource::parse("data_batch_1.bin").unwrap(), DataSource::Cifar("data_batch_1.bin".into()));
    }
}
