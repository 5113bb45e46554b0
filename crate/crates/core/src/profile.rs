//! FLOPs accounting, depth-map export, degenerate-routing detection and
//! throughput measurement.
//!
//! One multiply-accumulate counts as 2 FLOPs. Only matrix products are
//! counted; softmax, normalization and activation evaluations are reported
//! separately as `nonlinear` element counts.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::{ModelConfig, RoutingMode};
use crate::error::{MorError, Result};
use crate::model::MorVit;
use crate::routing::{depth_histogram, RoutingTrace};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StepFlops {
    /// Tokens passed through the block, class token included.
    pub processed: u64,
    /// Candidates scored by the router.
    pub scored: u64,
    pub attention: u64,
    pub mlp: u64,
    pub router: u64,
}

impl StepFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp + self.router
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct FlopsReport {
    pub steps: Vec<StepFlops>,
    pub embed: u64,
    pub head: u64,
    /// Depth predictor (token choice only).
    pub depth_predictor: u64,
    pub attention: u64,
    pub mlp: u64,
    pub router: u64,
    pub total: u64,
    /// Softmax, layer-norm, GELU and sigmoid element evaluations.
    pub nonlinear: u64,
}

/// FLOPs for one image given its routing trace.
pub fn count_flops(cfg: &ModelConfig, trace: &RoutingTrace) -> Result<FlopsReport> {
    let n = cfg.num_patches();
    if trace.num_patches != n || trace.max_recursion != cfg.max_recursion || trace.mode != cfg.routing_mode {
        return Err(MorError::Invalid(format!(
            "trace ({} patches, R={}, {}) does not match config ({n} patches, R={}, {})",
            trace.num_patches,
            trace.max_recursion,
            trace.mode.name(),
            cfg.max_recursion,
            cfg.routing_mode.name()
        )));
    }
    if trace.steps.len() > cfg.max_recursion {
        return Err(MorError::Invalid(format!("trace has {} steps, R={}", trace.steps.len(), cfg.max_recursion)));
    }
    let d = cfg.hidden as u64;
    let mlp = cfg.mlp_size as u64;
    let heads = cfg.heads as u64;
    let mut rep = FlopsReport {
        embed: 2 * n as u64 * cfg.patch_dim() as u64 * d,
        head: 2 * d * cfg.num_classes as u64,
        ..Default::default()
    };
    if cfg.routing_mode == RoutingMode::TokenChoice {
        let r = cfg.max_recursion as u64;
        rep.depth_predictor = 2 * n as u64 * d * r;
        // softmax over depth logits
        rep.nonlinear += n as u64 * r;
    }
    for s in &trace.steps {
        if s.kept.iter().any(|&t| t == 0 || t > n) || s.scores.len() > n {
            return Err(MorError::Invalid(format!("step {} references tokens outside 1..={n}", s.step)));
        }
        let a = s.kept.len() as u64 + 1;
        let scored = s.scores.len() as u64;
        let step = StepFlops {
            processed: a,
            scored,
            // Q, K, V, O projections, then QKᵀ and attention·V
            attention: 2 * (4 * a * d * d + 2 * a * a * d),
            mlp: 2 * 2 * a * d * mlp,
            router: 2 * scored * d,
        };
        rep.nonlinear += heads * a * a + 2 * a * d + a * mlp + scored;
        rep.attention += step.attention;
        rep.mlp += step.mlp;
        rep.router += step.router;
        rep.steps.push(step);
    }
    rep.total = rep.embed + rep.head + rep.depth_predictor + rep.attention + rep.mlp + rep.router;
    Ok(rep)
}

/// FLOPs of a dense (all tokens, all steps) pass at the same geometry.
pub fn dense_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let a = cfg.num_patches() as u64 + 1;
    let per_step = 2 * (4 * a * d * d + 2 * a * a * d) + 4 * a * d * cfg.mlp_size as u64;
    2 * (a - 1) * cfg.patch_dim() as u64 * d + cfg.max_recursion as u64 * per_step + 2 * d * cfg.num_classes as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMapFormat {
    Csv,
    Json,
}

impl std::str::FromStr for DepthMapFormat {
    type Err = MorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(MorError::Invalid(format!("unknown depth map format `{other}` (expected csv|json)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthMap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub max_recursion: usize,
    pub depths: Vec<Vec<usize>>,
    /// Counts for depth 1..=R.
    pub histogram: Vec<usize>,
}

impl DepthMap {
    pub fn from_trace(trace: &RoutingTrace, rows: usize, cols: usize) -> Result<Self> {
        let d = trace.patch_depths();
        if rows * cols != d.len() {
            return Err(MorError::Invalid(format!("{rows}x{cols} grid does not hold {} patches", d.len())));
        }
        Ok(Self {
            grid_rows: rows,
            grid_cols: cols,
            max_recursion: trace.max_recursion,
            depths: d.chunks(cols).map(<[usize]>::to_vec).collect(),
            histogram: depth_histogram(d, trace.max_recursion),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.depths {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// JSON object with the grid, histogram and (optionally) the model
    /// configuration that produced it.
    pub fn to_json(&self, config: Option<&ModelConfig>) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            map: &'a DepthMap,
            #[serde(skip_serializing_if = "Option::is_none")]
            config: Option<serde_json::Value>,
        }
        let config = config.map(|c| {
            serde_json::json!({
                "image_h": c.image_h,
                "image_w": c.image_w,
                "channels": c.channels,
                "patch_size": c.patch_size,
                "hidden": c.hidden,
                "max_recursion": c.max_recursion,
                "beta": c.beta,
                "routing_mode": c.routing_mode.name(),
                "share_params": c.share_params,
            })
        });
        let mut s = serde_json::to_string_pretty(&Doc { map: self, config }).expect("serializable");
        s.push('\n');
        s
    }
}

pub fn export_depth_map(
    trace: &RoutingTrace,
    rows: usize,
    cols: usize,
    config: Option<&ModelConfig>,
    path: impl AsRef<Path>,
    format: DepthMapFormat,
) -> Result<DepthMap> {
    let map = DepthMap::from_trace(trace, rows, cols)?;
    let text = match format {
        DepthMapFormat::Csv => map.to_csv(),
        DepthMapFormat::Json => map.to_json(config),
    };
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| MorError::io(path, e))?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegeneracyReport {
    pub degenerate: bool,
    /// Fraction of patch tokens whose effective depth is 1.
    pub shallow_fraction: f64,
    pub tokens: usize,
    /// Effective-depth counts for depth 1..=R.
    pub histogram: Vec<usize>,
}

pub const DEGENERATE_THRESHOLD: f64 = 0.95;

/// Flags routing collapse: at least `threshold` of all patch tokens across
/// `traces` have effective depth 1. Updates with gates below
/// [`NEGLIGIBLE_GATE`](crate::routing::NEGLIGIBLE_GATE) do not count toward
/// effective depth.
pub fn detect_degenerate(traces: &[RoutingTrace], threshold: f64) -> Result<DegeneracyReport> {
    let r = traces
        .first()
        .ok_or_else(|| MorError::Invalid("no traces to inspect".into()))?
        .max_recursion;
    let mut histogram = vec![0; r];
    for t in traces {
        if t.max_recursion != r {
            return Err(MorError::Invalid("traces disagree on max recursion".into()));
        }
        for (h, c) in histogram.iter_mut().zip(depth_histogram(t.effective_patch_depths(), r)) {
            *h += c;
        }
    }
    let tokens: usize = histogram.iter().sum();
    if tokens == 0 {
        return Err(MorError::Invalid("traces contain no patch tokens".into()));
    }
    let shallow_fraction = histogram[0] as f64 / tokens as f64;
    Ok(DegeneracyReport {
        degenerate: shallow_fraction >= threshold,
        shallow_fraction,
        tokens,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub images_per_sec: f64,
    /// Seconds per timed repeat.
    pub samples: Vec<f64>,
    pub median_secs: f64,
    pub variance: f64,
    pub threads: usize,
    pub precision: &'static str,
}

/// Times `repeats` inference passes over `batch` after one warmup pass.
pub fn bench_throughput<T: Real>(
    model: &MorVit<T>,
    batch: &[Tensor<T>],
    repeats: usize,
    threads: usize,
) -> Result<ThroughputReport> {
    if repeats < 3 {
        return Err(MorError::Invalid(format!("need at least 3 repeats, got {repeats}")));
    }
    if batch.is_empty() {
        return Err(MorError::Invalid("empty benchmark batch".into()));
    }
    model.predict_parallel(batch, threads)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        std::hint::black_box(model.predict_parallel(batch, threads)?);
        samples.push(t0.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_secs = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(ThroughputReport {
        images_per_sec: batch.len() as f64 / median_secs.max(f64::MIN_POSITIVE),
        samples,
        median_secs,
        variance,
        threads: threads.max(1),
        precision: T::DTYPE.name(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::routing::Hooks;

    #[test]
    fn static_flops_match_hand_count() {
        let cfg = preset("tiny-desk").unwrap().model;
        let cfg = ModelConfig {
            routing_mode: RoutingMode::Static,
            ..cfg
        };
        let model = MorVit::<f64>::new(cfg.clone()).unwrap();
        let img = Tensor::full(&[8, 8, 3], 0.5);
        let pred = model.predict(&[img], &Hooks::default()).unwrap();
        let rep = count_flops(&cfg, &pred[0].trace).unwrap();
        // N=4, A=5, D=8, mlp=16, P²C=48, C=4, R=2
        let per_step = 2 * (4 * 5 * 64 + 2 * 25 * 8) + 4 * 5 * 8 * 16;
        assert_eq!(rep.total, 2 * 4 * 48 * 8 + 2 * per_step + 2 * 8 * 4);
        assert_eq!(rep.total, dense_flops(&cfg));
        assert_eq!(rep.router, 0);
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let cfg = preset("tiny-desk").unwrap().model;
        let model = MorVit::<f64>::new(cfg.clone()).unwrap();
        let pred = model.predict(&[Tensor::full(&[8, 8, 3], 0.1)], &Hooks::default()).unwrap();
        let other = preset("desk").unwrap().model;
        assert!(count_flops(&other, &pred[0].trace).is_err());
    }

    #[test]
    fn depth_map_csv_and_json() {
        let cfg = preset("tiny-desk").unwrap().model;
        let model = MorVit::<f64>::new(cfg.clone()).unwrap();
        let pred = model.predict(&[Tensor::full(&[8, 8, 3], 0.3)], &Hooks::default()).unwrap();
        let map = DepthMap::from_trace(&pred[0].trace, 2, 2).unwrap();
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().all(|l| l.split(',').count() == 2));
        let json: serde_json::Value = serde_json::from_str(&map.to_json(Some(&cfg))).unwrap();
        assert_eq!(json["grid_rows"], 2);
        assert_eq!(json["histogram"].as_array().unwrap().len(), 2);
        assert_eq!(json["config"]["routing_mode"], "expert_choice");
        assert!(DepthMap::from_trace(&pred[0].trace, 3, 2).is_err());
    }

    #[test]
    fn throughput_needs_three_repeats() {
        let cfg = preset("tiny-desk").unwrap().model;
        let model = MorVit::<f64>::new(cfg).unwrap();
        let batch = vec![Tensor::full(&[8, 8, 3], 0.2); 2];
        assert!(bench_throughput(&model, &batch, 2, 1).is_err());
        let rep = bench_throughput(&model, &batch, 3, 1).unwrap();
        assert_eq!(rep.samples.len(), 3);
        assert!(rep.images_per_sec > 0.0);
        assert_eq!(rep.precision, "f64");
    }
}
