//! Full model: embed → recursion → classify, plus the training objective
//! `L = L_task + λ·L_routing`.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, RoutingMode};
use crate::error::{MorError, Result};
use crate::params::{init_params, ModelParams};
use crate::rng::Rng;
use crate::routing::{run_recursion, Hooks, RecursionOutput, RoutingTrace};
use crate::tensor::{Real, Tensor};
use crate::vit::{classify, embed, patchify};

/// Configuration plus owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MorVit<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

/// Per-sample forward result on a tape.
#[derive(Debug, Clone)]
pub struct SampleForward {
    /// `1×classes` logits.
    pub logits: Var,
    pub recursion: RecursionOutput,
}

/// Routing regularizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub lambda: f64,
    /// Target keep fraction κ = 1 − β.
    pub keep_fraction: f64,
}

impl LossSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            lambda: cfg.lambda,
            keep_fraction: 1.0 - cfg.beta,
        }
    }
}

/// Logits and routing trace for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub trace: RoutingTrace,
}

impl Prediction {
    /// Argmax with ties going to the smallest class index.
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> MorVit<T> {
    /// Freshly initialized model seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(config.seed);
        let params = init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let template: ModelParams<Tensor<T>> = init_params(&config, &mut Rng::seed_from(0));
        let mut expected = Vec::new();
        template.visit(|n, t| expected.push((n.to_string(), t.shape().to_vec())));
        let mut got = Vec::new();
        params.visit(|n, t| got.push((n.to_string(), t.shape().to_vec())));
        if expected != got {
            return Err(MorError::Config("parameter layout does not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> MorVit<U> {
        MorVit {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Forward pass for a batch on a fresh tape (no gradients).
    pub fn predict(&self, images: &[Tensor<T>], hooks: &Hooks) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        images
            .iter()
            .map(|img| {
                let out = forward_sample(&mut tape, &bound, &self.config, img, hooks)?;
                tape.check_finite(out.logits, "logits")?;
                Ok(Prediction {
                    logits: tape.value(out.logits).data().iter().map(|v| v.as_f64()).collect(),
                    trace: out.recursion.trace,
                })
            })
            .collect()
    }

    /// [`predict`](Self::predict) fanned out over `threads` workers in
    /// contiguous chunks; results keep input order.
    pub fn predict_parallel(&self, images: &[Tensor<T>], threads: usize) -> Result<Vec<Prediction>> {
        let threads = threads.max(1);
        if threads == 1 || images.len() < 2 {
            return self.predict(images, &Hooks::default());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| MorError::Invalid(format!("thread pool: {e}")))?;
        let chunk = images.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Prediction>>> = pool.install(|| {
            images
                .par_chunks(chunk)
                .map(|c| self.predict(c, &Hooks::default()))
                .collect()
        });
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Full forward for one `H×W×C` image on `tape`.
pub fn forward_sample<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    hooks: &Hooks,
) -> Result<SampleForward> {
    if image.shape() != [cfg.image_h, cfg.image_w, cfg.channels] {
        return Err(MorError::Shape {
            op: "forward",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.image_h, cfg.image_w, cfg.channels],
        });
    }
    let patches = tape.constant(patchify(image, cfg.patch_size)?);
    let z0 = embed(tape, patches, &params.embed)?;
    let recursion = run_recursion(tape, z0, params, cfg, hooks)?;
    let cls = tape.gather_rows(recursion.hidden, &[0])?;
    let logits = classify(tape, cls, &params.head)?;
    Ok(SampleForward { logits, recursion })
}

/// Softmax cross-entropy over per-sample `1×C` logits, batch mean.
pub fn task_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let stacked = tape.concat_rows(logits)?;
    tape.cross_entropy(stacked, labels)
}

/// Mean over samples of the mean over steps of `(mean_t g_t − κ)²`.
/// Returns a constant zero when no sample carries gate signals.
pub fn routing_loss<T: Real>(tape: &mut Tape<T>, signals: &[&[Var]], keep_fraction: f64) -> Result<Var> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(MorError::Config(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let mut per_sample = Vec::new();
    for steps in signals {
        if steps.is_empty() {
            continue;
        }
        let mut devs = Vec::with_capacity(steps.len());
        for &g in *steps {
            let m = tape.mean(g);
            let d = tape.add_scalar(m, T::from_f64(-keep_fraction));
            devs.push(tape.mul(d, d)?);
        }
        let stacked = stack_scalars(tape, &devs)?;
        per_sample.push(tape.mean(stacked));
    }
    if per_sample.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let stacked = stack_scalars(tape, &per_sample)?;
    Ok(tape.mean(stacked))
}

fn stack_scalars<T: Real>(tape: &mut Tape<T>, vals: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(vals.len());
    for &v in vals {
        rows.push(tape.reshape(v, &[1, 1])?);
    }
    tape.concat_rows(&rows)
}

/// `task + λ·routing`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, task: Var, routing: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(routing, T::from_f64(lambda));
    tape.add(task, weighted)
}

/// Parameters in one encoder block:
/// `4D² + 4D` (attention) `+ 2·D·mlp + D + mlp` (MLP) `+ 4D` (norms).
pub fn block_param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let m = cfg.mlp_size as u64;
    4 * d * d + 4 * d + 2 * d * m + d + m + 4 * d
}

/// Exact parameter total from closed forms.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let n = cfg.num_patches() as u64;
    let r = cfg.max_recursion as u64;
    let embed = cfg.patch_dim() as u64 * d + d + d + (n + 1) * d;
    let blocks = cfg.stored_blocks() as u64 * block_param_count(cfg);
    let routers = match cfg.routing_mode {
        RoutingMode::Static => 0,
        _ => r * (d + 1),
    };
    let depth = match cfg.routing_mode {
        RoutingMode::TokenChoice => d * r + r,
        _ => 0,
    };
    let head = d * cfg.num_classes as u64 + cfg.num_classes as u64;
    embed + blocks + routers + depth + head
}
