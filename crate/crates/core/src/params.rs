//! Named parameter groups.
//!
//! Each group is generic over its leaf type so the same layout can hold
//! owned tensors (`P = Tensor<T>`) or tape handles (`P = Var`). Names are
//! stable and double as checkpoint keys.

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, RoutingMode};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> $name<Q> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)+
                }
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &P)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }

            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
                $(out.push(&mut self.$field);)+
            }
        }
    };
}

param_group!(
    /// One pre-norm transformer encoder block.
    BlockParams {
        ln1_gain, ln1_bias,
        q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b,
        ln2_gain, ln2_bias,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
);

param_group!(
    /// Patch projection, class token and positional table.
    EmbedParams { patch_w, patch_b, cls, pos }
);

param_group!(
    /// Per-step router: `w` is `D×1`, `b` a scalar.
    RouterParams { w, b }
);

param_group!(
    /// Token-choice depth predictor: `D×R` weights and `R` biases.
    DepthParams { w, b }
);

param_group!(HeadParams { w, b });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub embed: EmbedParams<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub routers: Vec<RouterParams<P>>,
    pub depth: Option<DepthParams<P>>,
    pub head: HeadParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embed: self.embed.map("embed.", &mut f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}."), &mut f))
                .collect(),
            routers: self
                .routers
                .iter()
                .enumerate()
                .map(|(i, r)| r.map(&format!("routers.{i}."), &mut f))
                .collect(),
            depth: self.depth.as_ref().map(|d| d.map("depth.", &mut f)),
            head: self.head.map("head.", &mut f),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &P)) {
        self.embed.visit("embed.", &mut f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), &mut f);
        }
        for (i, r) in self.routers.iter().enumerate() {
            r.visit(&format!("routers.{i}."), &mut f);
        }
        if let Some(d) = &self.depth {
            d.visit("depth.", &mut f);
        }
        self.head.visit("head.", &mut f);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        self.embed.visit_mut("embed.", &mut f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), &mut f);
        }
        for (i, r) in self.routers.iter_mut().enumerate() {
            r.visit_mut(&format!("routers.{i}."), &mut f);
        }
        if let Some(d) = &mut self.depth {
            d.visit_mut("depth.", &mut f);
        }
        self.head.visit_mut("head.", &mut f);
    }

    /// Mutable leaves in visit order.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.embed.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.collect_mut(&mut out);
        }
        for r in &mut self.routers {
            r.collect_mut(&mut out);
        }
        if let Some(d) = &mut self.depth {
            d.collect_mut(&mut out);
        }
        self.head.collect_mut(&mut out);
        out
    }

    /// Block used at recursion step `step` (0-based).
    pub fn block(&self, step: usize) -> &BlockParams<P> {
        if self.blocks.len() == 1 {
            &self.blocks[0]
        } else {
            &self.blocks[step]
        }
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    pub fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|name, _| names.push(name.to_string()));
        names
    }

    /// Registers every tensor on `tape`, as trainable leaves when
    /// `trainable` is set.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}

fn weight<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::from_f64(rng.trunc_normal(0.02))).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

fn block_init<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> BlockParams<Tensor<T>> {
    let d = cfg.hidden;
    let m = cfg.mlp_size;
    BlockParams {
        ln1_gain: Tensor::ones(&[d]),
        ln1_bias: Tensor::zeros(&[d]),
        q_w: weight(rng, d, d),
        q_b: Tensor::zeros(&[d]),
        k_w: weight(rng, d, d),
        k_b: Tensor::zeros(&[d]),
        v_w: weight(rng, d, d),
        v_b: Tensor::zeros(&[d]),
        o_w: weight(rng, d, d),
        o_b: Tensor::zeros(&[d]),
        ln2_gain: Tensor::ones(&[d]),
        ln2_bias: Tensor::zeros(&[d]),
        mlp_w1: weight(rng, d, m),
        mlp_b1: Tensor::zeros(&[m]),
        mlp_w2: weight(rng, m, d),
        mlp_b2: Tensor::zeros(&[d]),
    }
}

/// Fresh parameters: truncated normal (std 0.02) weights and positional
/// table, zero biases and class token, unit layernorm gains, router biases
/// at `router_bias_init`.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> ModelParams<Tensor<T>> {
    let d = cfg.hidden;
    let n = cfg.num_patches();
    let embed = EmbedParams {
        patch_w: weight(rng, cfg.patch_dim(), d),
        patch_b: Tensor::zeros(&[d]),
        cls: Tensor::zeros(&[1, d]),
        pos: weight(rng, n + 1, d),
    };
    let blocks = (0..cfg.stored_blocks()).map(|_| block_init(cfg, rng)).collect();
    let routers = match cfg.routing_mode {
        RoutingMode::Static => Vec::new(),
        _ => (0..cfg.max_recursion)
            .map(|_| RouterParams {
                w: weight(rng, d, 1),
                b: Tensor::full(&[1], T::from_f64(cfg.router_bias_init)),
            })
            .collect(),
    };
    let depth = (cfg.routing_mode == RoutingMode::TokenChoice).then(|| DepthParams {
        w: weight(rng, d, cfg.max_recursion),
        b: Tensor::zeros(&[cfg.max_recursion]),
    });
    let head = HeadParams {
        w: weight(rng, d, cfg.num_classes),
        b: Tensor::zeros(&[cfg.num_classes]),
    };
    ModelParams {
        embed,
        blocks,
        routers,
        depth,
        head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn names_are_unique_and_stable() {
        let cfg = preset("tiny-desk").unwrap().model;
        let p: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(0));
        let names = p.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "embed.patch_w");
        assert!(names.contains(&"routers.1.b".to_string()));
        assert!(names.contains(&"blocks.0.mlp_w2".to_string()));
    }

    #[test]
    fn layout_follows_mode_and_sharing() {
        let mut cfg = preset("tiny-desk").unwrap().model;
        cfg.share_params = false;
        cfg.routing_mode = RoutingMode::Static;
        let p: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(0));
        assert_eq!(p.blocks.len(), cfg.max_recursion);
        assert!(p.routers.is_empty() && p.depth.is_none());

        cfg.routing_mode = RoutingMode::TokenChoice;
        let p: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(0));
        assert_eq!(p.routers.len(), cfg.max_recursion);
        assert_eq!(p.depth.as_ref().unwrap().w.shape(), &[cfg.hidden, cfg.max_recursion]);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = preset("tiny-desk").unwrap().model;
        let a: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(3));
        let b: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(3));
        let c: ModelParams<Tensor> = init_params(&cfg, &mut Rng::seed_from(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.embed.cls.data().iter().all(|&v| v == 0.0));
    }
}
