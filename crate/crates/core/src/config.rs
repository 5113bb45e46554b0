//! Model and training configuration, named presets, and the flat
//! `key = value` run-config text format.
//!
//! The text format is one pair per line, `#` starts a comment, unknown keys
//! are rejected. An optional `preset = NAME` line may appear first and seeds
//! every key from that preset before the remaining lines override it.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{MorError, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Per-step top-K selection among still-active tokens.
    ExpertChoice,
    /// Each token's depth fixed up front by a depth predictor.
    TokenChoice,
    /// Every token runs every step with unit gates.
    Static,
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::ExpertChoice => "expert_choice",
            RoutingMode::TokenChoice => "token_choice",
            RoutingMode::Static => "static",
        }
    }
}

impl FromStr for RoutingMode {
    type Err = MorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert_choice" => Ok(RoutingMode::ExpertChoice),
            "token_choice" => Ok(RoutingMode::TokenChoice),
            "static" => Ok(RoutingMode::Static),
            other => Err(MorError::Config(format!(
                "unknown routing_mode `{other}` (expected expert_choice|token_choice|static)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = MorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(MorError::Config(format!(
                "unknown lr_schedule `{other}` (expected constant|cosine)"
            ))),
        }
    }
}

/// Every architectural hyperparameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Maximum recursion steps R.
    pub max_recursion: usize,
    /// Fraction of active tokens dropped per step.
    pub beta: f64,
    /// Weight of the routing regularizer.
    pub lambda: f64,
    pub routing_mode: RoutingMode,
    pub share_params: bool,
    pub seed: u64,
    pub precision: DType,
    pub ln_eps: f64,
    /// Initial value of every router bias.
    pub router_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        preset("tiny-desk").expect("built-in preset").model
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// Patch tokens N (excluding the class token).
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Number of independent encoder blocks that are stored.
    pub fn stored_blocks(&self) -> usize {
        if self.share_params {
            1
        } else {
            self.max_recursion
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MorError::Config(m));
        if self.patch_size == 0 || self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return fail("image dims, channels and patch_size must be positive".into());
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image {}x{} is not divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.mlp_size == 0 || self.num_classes == 0 {
            return fail("mlp_size and num_classes must be positive".into());
        }
        if self.max_recursion == 0 {
            return fail("max_recursion must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1)", self.beta));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda {} must be finite and nonnegative", self.lambda));
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps {} must be positive", self.ln_eps));
        }
        if !self.router_bias_init.is_finite() {
            return fail("router_bias_init must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    /// Probability of a horizontal flip per training sample.
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            flip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MorError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(MorError::Config("lr must be positive and adam betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(MorError::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Model plus training settings; the unit stored in config files and
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: &[&str] = &["vit-b16", "mor-b16", "tiny-desk", "desk"];

/// Built-in configurations. `vit-b16` and `mor-b16` follow the Base/16
/// geometry; `tiny-desk` is the gradient-check model; `desk` is the
/// synthetic-data training model.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base16 = ModelConfig {
        image_h: 224,
        image_w: 224,
        channels: 3,
        patch_size: 16,
        hidden: 768,
        mlp_size: 3072,
        heads: 12,
        num_classes: 1000,
        max_recursion: 12,
        beta: 0.0,
        lambda: 0.0,
        routing_mode: RoutingMode::Static,
        share_params: false,
        seed: 0,
        precision: DType::F64,
        ln_eps: 1e-5,
        router_bias_init: 0.0,
    };
    let model = match name {
        "vit-b16" => base16,
        "mor-b16" => ModelConfig {
            max_recursion: 4,
            beta: 0.5,
            lambda: 0.01,
            routing_mode: RoutingMode::ExpertChoice,
            share_params: true,
            ..base16
        },
        "tiny-desk" => ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 3,
            patch_size: 4,
            hidden: 8,
            mlp_size: 16,
            heads: 2,
            num_classes: 4,
            max_recursion: 2,
            beta: 0.5,
            lambda: 0.01,
            routing_mode: RoutingMode::ExpertChoice,
            share_params: true,
            ..base16
        },
        "desk" => ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch_size: 4,
            hidden: 32,
            mlp_size: 64,
            heads: 4,
            num_classes: 4,
            max_recursion: 4,
            beta: 0.5,
            lambda: 0.01,
            routing_mode: RoutingMode::ExpertChoice,
            share_params: true,
            ..base16
        },
        other => {
            return Err(MorError::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    let train = match name {
        "desk" => TrainConfig {
            lr: 4e-3,
            ..TrainConfig::default()
        },
        _ => TrainConfig::default(),
    };
    Ok(RunConfig { model, train })
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| MorError::Config(format!("bad value `{raw}` for key `{key}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MorError::Config(format!("bad value `{raw}` for key `{key}` (expected true|false)"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_h" => m.image_h = parse_value(key, raw)?,
            "image_w" => m.image_w = parse_value(key, raw)?,
            "channels" => m.channels = parse_value(key, raw)?,
            "patch_size" => m.patch_size = parse_value(key, raw)?,
            "hidden" => m.hidden = parse_value(key, raw)?,
            "mlp_size" => m.mlp_size = parse_value(key, raw)?,
            "heads" => m.heads = parse_value(key, raw)?,
            "num_classes" => m.num_classes = parse_value(key, raw)?,
            "max_recursion" => m.max_recursion = parse_value(key, raw)?,
            "beta" => m.beta = parse_value(key, raw)?,
            "lambda" => m.lambda = parse_value(key, raw)?,
            "routing_mode" => m.routing_mode = raw.parse()?,
            "share_params" => m.share_params = parse_bool(key, raw)?,
            "seed" => m.seed = parse_value(key, raw)?,
            "precision" => m.precision = raw.parse()?,
            "ln_eps" => m.ln_eps = parse_value(key, raw)?,
            "router_bias_init" => m.router_bias_init = parse_value(key, raw)?,
            "epochs" => t.epochs = parse_value(key, raw)?,
            "batch_size" => t.batch_size = parse_value(key, raw)?,
            "lr" => t.lr = parse_value(key, raw)?,
            "adam_beta1" => t.adam_beta1 = parse_value(key, raw)?,
            "adam_beta2" => t.adam_beta2 = parse_value(key, raw)?,
            "adam_eps" => t.adam_eps = parse_value(key, raw)?,
            "lr_schedule" => t.lr_schedule = raw.parse()?,
            "flip_prob" => t.flip_prob = parse_value(key, raw)?,
            other => return Err(MorError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen_assignment = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| MorError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if key == "preset" {
                if seen_assignment {
                    return Err(MorError::Config(format!(
                        "line {}: `preset` must precede all other keys",
                        lineno + 1
                    )));
                }
                cfg = preset(value)?;
            } else {
                cfg.set(key, value)
                    .map_err(|e| MorError::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
            }
            seen_assignment = true;
        }
        Ok(cfg)
    }

    /// Every key in a fixed order; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_h", m.image_h.to_string());
        kv("image_w", m.image_w.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("hidden", m.hidden.to_string());
        kv("mlp_size", m.mlp_size.to_string());
        kv("heads", m.heads.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("max_recursion", m.max_recursion.to_string());
        kv("beta", m.beta.to_string());
        kv("lambda", m.lambda.to_string());
        kv("routing_mode", m.routing_mode.name().to_string());
        kv("share_params", m.share_params.to_string());
        kv("seed", m.seed.to_string());
        kv("precision", m.precision.name().to_string());
        kv("ln_eps", m.ln_eps.to_string());
        kv("router_bias_init", m.router_bias_init.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("lr_schedule", t.lr_schedule.name().to_string());
        kv("flip_prob", t.flip_prob.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn strip_prefix(e: &MorError) -> String {
    match e {
        MorError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("vit-l32").is_err());
    }

    #[test]
    fn token_count_follows_geometry() {
        let b16 = preset("vit-b16").unwrap().model;
        assert_eq!(b16.num_patches(), 196);
        assert_eq!(b16.patch_dim(), 768);
        let tiny = preset("tiny-desk").unwrap().model;
        assert_eq!(tiny.num_patches(), 4);
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        let c = ModelConfig { image_h: 9, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { beta: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn parse_with_preset_comments_and_overrides() {
        let text = "preset = desk # base\n\n# comment line\nbeta = 0.25\nrouting_mode=static\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.model.beta, 0.25);
        assert_eq!(c.model.routing_mode, RoutingMode::Static);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        let e = RunConfig::parse("depth = 3").unwrap_err().to_string();
        assert!(e.contains("unknown key `depth`"), "{e}");
        let e = RunConfig::parse("hidden = wide").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("hidden"), "{e}");
        assert!(RunConfig::parse("beta = 0.5\npreset = desk").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    proptest! {
        #[test]
        fn serialize_round_trips(
            hidden in 1usize..512,
            beta in 0.0f64..1.0,
            lambda in 0.0f64..10.0,
            seed in any::<u64>(),
            share in any::<bool>(),
            mode in 0usize..3,
            lr in 1e-6f64..1.0,
            bias in -100.0f64..100.0,
        ) {
            let mut c = RunConfig::default();
            c.model.hidden = hidden;
            c.model.beta = beta;
            c.model.lambda = lambda;
            c.model.seed = seed;
            c.model.share_params = share;
            c.model.router_bias_init = bias;
            c.model.routing_mode = [RoutingMode::ExpertChoice, RoutingMode::TokenChoice, RoutingMode::Static][mode];
            c.train.lr = lr;
            let back = RunConfig::parse(&c.serialize()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
