//! Routing behaviour on hand-built and limiting cases.

mod common;

use morvit_core::config::{preset, RoutingMode};
use morvit_core::model::{forward_sample, routing_loss, task_loss, total_loss};
use morvit_core::params::init_params;
use morvit_core::rng::Rng;
use morvit_core::routing::{run_recursion, Hooks};
use morvit_core::vit::encoder_block;
use morvit_core::{ModelConfig, MorVit, Tape, Tensor};

fn tiny() -> ModelConfig {
    preset("tiny-desk").unwrap().model
}

fn z0_for(cfg: &ModelConfig, seed: u64) -> Tensor {
    common::random_tensor(&mut Rng::seed_from(seed), &[cfg.num_patches() + 1, cfg.hidden], 1.0)
}

#[test]
fn hand_scores_pick_top_half_then_top_one() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, &mut Rng::seed_from(1));
    let hooks = Hooks::forced_scores(vec![vec![0.0, 0.9, 0.1, 0.8, 0.3], vec![0.0, 0.2, 0.0, 0.7, 0.0]]);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z0 = tape.constant(z0_for(&cfg, 2));
    let out = run_recursion(&mut tape, z0, &bound, &cfg, &hooks).unwrap();
    let t = &out.trace;
    assert_eq!(t.steps[0].kept, vec![1, 3]);
    assert_eq!(t.steps[0].threshold, Some(0.8));
    assert_eq!(t.steps[1].candidates, vec![1, 3]);
    assert_eq!(t.steps[1].kept, vec![3]);
    assert_eq!(t.exit_depth, vec![2, 2, 1, 2, 1]);
    assert_eq!(t.steps[0].kept_gates, vec![0.9, 0.8]);
}

#[test]
fn strongly_negative_router_bias_leaves_patches_untouched() {
    let cfg = ModelConfig {
        router_bias_init: -50.0,
        ..preset("desk").unwrap().model
    };
    let params = init_params::<f64>(&cfg, &mut Rng::seed_from(3));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z = z0_for(&cfg, 4);
    let z0 = tape.constant(z.clone());
    let out = run_recursion(&mut tape, z0, &bound, &cfg, &Hooks::default()).unwrap();
    let h = tape.value(out.hidden);
    for t in 1..=cfg.num_patches() {
        for (a, b) in h.row(t).iter().zip(z.row(t)) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
    assert!(out.trace.effective_patch_depths().iter().all(|&d| d == 1));
}

#[test]
fn zero_gate_is_the_identity() {
    let cfg = preset("desk").unwrap().model;
    let params = init_params::<f64>(&cfg, &mut Rng::seed_from(5));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z = z0_for(&cfg, 6);
    let z0 = tape.constant(z.clone());
    let out = run_recursion(&mut tape, z0, &bound, &cfg, &Hooks::force_gate(0.0)).unwrap();
    assert_eq!(tape.value(out.hidden).data(), z.data());
}

#[test]
fn unit_gates_without_dropping_match_a_plain_stack() {
    for share in [true, false] {
        let cfg = ModelConfig {
            beta: 0.0,
            max_recursion: 3,
            share_params: share,
            ..tiny()
        };
        let params = init_params::<f64>(&cfg, &mut Rng::seed_from(7));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let z0 = tape.constant(z0_for(&cfg, 8));
        let out = run_recursion(&mut tape, z0, &bound, &cfg, &Hooks::force_gate(1.0)).unwrap();

        let mut h = z0;
        for r in 0..3 {
            let f = encoder_block(&mut tape, h, bound.block(r), cfg.heads, cfg.ln_eps).unwrap();
            h = tape.add(h, f).unwrap();
        }
        let got = tape.value(out.hidden).clone();
        assert!(got.max_abs_diff(tape.value(h)) < 1e-12, "share={share}");
    }
}

#[test]
fn router_parameters_receive_gradient() {
    for mode in [RoutingMode::ExpertChoice, RoutingMode::TokenChoice] {
        let cfg = ModelConfig {
            routing_mode: mode,
            ..tiny()
        };
        let model = MorVit::<f64>::new(cfg.clone()).unwrap();
        let img = common::random_tensor(&mut Rng::seed_from(9), &[8, 8, 3], 0.5);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let out = forward_sample(&mut tape, &bound, &cfg, &img, &Hooks::default()).unwrap();
        let task = task_loss(&mut tape, &[out.logits], &[1]).unwrap();
        let signals = [out.recursion.gate_signals.as_slice()];
        let routing = routing_loss(&mut tape, &signals, 0.5).unwrap();
        let total = total_loss(&mut tape, task, routing, cfg.lambda).unwrap();
        tape.backward(total).unwrap();
        // Routers of steps with no candidates are idle. Under token choice
        // the last step's gates only touch patch rows nobody reads, and the
        // regularizer acts on the depth predictor instead.
        let mut used = out.recursion.trace.steps.iter().filter(|s| !s.candidates.is_empty()).count();
        if mode == RoutingMode::TokenChoice && used == cfg.max_recursion {
            used -= 1;
        }
        assert!(used >= 1);
        for r in &bound.routers[..used] {
            let g = tape.grad(r.w).unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "{mode:?}: router weight gradient is zero");
        }
        if let Some(d) = &bound.depth {
            assert!(tape.grad(d.w).unwrap().iter().any(|&x| x != 0.0));
        }
    }
}

#[test]
fn token_choice_depths_follow_argmax() {
    let cfg = ModelConfig {
        routing_mode: RoutingMode::TokenChoice,
        max_recursion: 3,
        ..tiny()
    };
    let mut params = init_params::<f64>(&cfg, &mut Rng::seed_from(10));
    // zero weights: depth follows the bias alone
    let depth = params.depth.as_mut().unwrap();
    depth.w = Tensor::zeros(depth.w.shape());
    depth.b = Tensor::new(&[3], vec![0.0, 2.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z0 = tape.constant(z0_for(&cfg, 11));
    let out = run_recursion(&mut tape, z0, &bound, &cfg, &Hooks::default()).unwrap();
    assert_eq!(out.trace.patch_depths(), &[2, 2, 2, 2]);
    assert_eq!(out.trace.active_counts(), vec![4, 4]);
    assert_eq!(out.trace.steps.len(), 2);
}

#[test]
fn static_mode_updates_every_token_every_step() {
    let cfg = ModelConfig {
        routing_mode: RoutingMode::Static,
        ..preset("desk").unwrap().model
    };
    let model = MorVit::<f64>::new(cfg.clone()).unwrap();
    assert!(model.params.routers.is_empty());
    let img = common::random_tensor(&mut Rng::seed_from(12), &[16, 16, 3], 0.5);
    let pred = model.predict(&[img], &Hooks::default()).unwrap();
    assert_eq!(pred[0].trace.active_counts(), vec![16; 4]);
    assert!(pred[0].trace.patch_depths().iter().all(|&d| d == 4));
}
