//! Token-wise recursive routing through a shared encoder block.
//!
//! At every step a router scores the still-active patch tokens, the top
//! `K = max(1, round((1-β)·A))` of them (ties broken by lower index) are
//! updated with `h ← g·f(h) + h`, and the rest exit with their hidden row
//! frozen. The block attends only over the class token and the selected
//! tokens. The class token is never routed: it is updated at every step with
//! `g = 1`.

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, RoutingMode};
use crate::error::{MorError, Result};
use crate::params::{DepthParams, ModelParams, RouterParams};
use crate::tensor::{Real, Tensor};
use crate::vit::encoder_block;

/// Gates below this are numerically a no-op on the residual update; such
/// steps do not count towards a token's effective depth.
pub const NEGLIGIBLE_GATE: f64 = 1e-6;

/// Overrides used by limit and equivalence tests. Without the `test-hooks`
/// feature only the inert default can be constructed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    pub(crate) force_gate: Option<f64>,
    pub(crate) forced_scores: Option<Vec<Vec<f64>>>,
}

#[cfg(feature = "test-hooks")]
impl Hooks {
    /// Every gate, the class token's included, is replaced by `g`.
    pub fn force_gate(g: f64) -> Self {
        Self {
            force_gate: Some(g),
            ..Self::default()
        }
    }

    /// Router scores replaced by `scores[step][token]` (token 0 is the class
    /// token and is ignored). Scores double as gates.
    pub fn forced_scores(scores: Vec<Vec<f64>>) -> Self {
        Self {
            forced_scores: Some(scores),
            ..Self::default()
        }
    }
}

impl Hooks {
    pub fn is_inert(&self) -> bool {
        self.force_gate.is_none() && self.forced_scores.is_none()
    }
}

/// Number of tokens kept from `active` candidates: `max(1, round((1-β)·A))`
/// with halves rounded up.
pub fn keep_count(active: usize, beta: f64) -> usize {
    if active == 0 {
        return 0;
    }
    // round-half-up of (1-β)A == A - round-half-down(βA); the slack absorbs
    // representation error in β (0.9·15 must count as exactly 13.5).
    let dropped = (beta * active as f64 - 0.5 - 1e-9).ceil().max(0.0) as usize;
    active.saturating_sub(dropped).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// K-th largest score.
    pub threshold: f64,
    /// Kept positions into the score slice, ascending.
    pub keep: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Top-K selection by (score descending, position ascending).
pub fn select_active(scores: &[f64], beta: f64) -> Result<Selection> {
    if scores.is_empty() {
        return Err(MorError::Invalid("select_active: no active tokens".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(MorError::Config(format!("beta {beta} outside [0, 1)")));
    }
    let k = keep_count(scores.len(), beta);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let threshold = scores[order[k - 1]];
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    let mut mask = vec![false; scores.len()];
    for &i in &keep {
        mask[i] = true;
    }
    Ok(Selection { threshold, keep, mask })
}

/// `sigmoid(rows·w + b)` for each row of `rows` (`A×D` → `A×1`).
pub fn routing_score<T: Real>(tape: &mut Tape<T>, rows: Var, router: &RouterParams<Var>) -> Result<Var> {
    let logits = tape.matmul(rows, router.w)?;
    let logits = tape.add(logits, router.b)?;
    Ok(tape.sigmoid(logits))
}

/// Depth logits `Z0[1..]·W + b` (`N×R`).
pub fn depth_logits<T: Real>(tape: &mut Tape<T>, patch_rows: Var, depth: &DepthParams<Var>) -> Result<Var> {
    let l = tape.matmul(patch_rows, depth.w)?;
    tape.add(l, depth.b)
}

/// 1-based depth per row: argmax of the logits, ties to the smaller depth.
pub fn token_choice_assign<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, r) = logits.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * r..(i + 1) * r];
            let mut best = 0;
            for j in 1..r {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best + 1
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// 1-based step index.
    pub step: usize,
    /// Patch tokens that were active entering the step, ascending.
    pub candidates: Vec<usize>,
    /// Router scores aligned with `candidates`; empty in static mode.
    pub scores: Vec<f64>,
    /// Score of the K-th kept token (expert choice only).
    pub threshold: Option<f64>,
    /// Patch tokens updated at this step, ascending.
    pub kept: Vec<usize>,
    /// Gates applied to `kept`.
    pub kept_gates: Vec<f64>,
    /// Gate applied to the class token.
    pub cls_gate: f64,
    /// `mask[t]`: token `t` (0 = class) was updated at this step.
    pub mask: Vec<bool>,
}

/// Everything routing decided during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub mode: RoutingMode,
    pub num_patches: usize,
    pub max_recursion: usize,
    pub steps: Vec<StepTrace>,
    /// Exit depth per token (index 0 is the class token, always `R`).
    pub exit_depth: Vec<usize>,
    /// Exit depth after discounting updates whose gate was below
    /// [`NEGLIGIBLE_GATE`].
    pub effective_depth: Vec<usize>,
}

impl RoutingTrace {
    pub fn patch_depths(&self) -> &[usize] {
        &self.exit_depth[1..]
    }

    pub fn effective_patch_depths(&self) -> &[usize] {
        &self.effective_depth[1..]
    }

    /// Patch tokens updated at each executed step.
    pub fn active_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.kept.len()).collect()
    }

    /// Counts of patch tokens at depth `1..=R` (index 0 is depth 1).
    pub fn histogram(&self) -> Vec<usize> {
        depth_histogram(self.patch_depths(), self.max_recursion)
    }

    pub fn mean_depth(&self) -> f64 {
        let d = self.patch_depths();
        d.iter().sum::<usize>() as f64 / d.len().max(1) as f64
    }
}

pub fn depth_histogram(depths: &[usize], max_depth: usize) -> Vec<usize> {
    let mut h = vec![0; max_depth];
    for &d in depths {
        if (1..=max_depth).contains(&d) {
            h[d - 1] += 1;
        }
    }
    h
}

/// Per-token routing state between steps.
#[derive(Debug, Clone)]
pub struct TokenState {
    pub hidden: Var,
    pub active: Vec<bool>,
    /// Gate applied at the most recent step, if the token was updated.
    pub gate: Vec<Option<f64>>,
    pub exit_depth: Vec<usize>,
    /// Fixed depths in token-choice mode (index 0 unused).
    pub assigned_depth: Option<Vec<usize>>,
}

impl TokenState {
    pub fn new(hidden: Var, tokens: usize, max_recursion: usize) -> Self {
        Self {
            hidden,
            active: vec![true; tokens],
            gate: vec![None; tokens],
            exit_depth: vec![max_recursion; tokens],
            assigned_depth: None,
        }
    }
}

/// Result of one recursion step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: TokenState,
    pub trace: StepTrace,
    /// Differentiable candidate scores (`A×1`), absent in static mode.
    pub scores: Option<Var>,
}

fn forced_row(hooks: &Hooks, step: usize, tokens: &[usize]) -> Result<Option<Vec<f64>>> {
    let Some(all) = &hooks.forced_scores else { return Ok(None) };
    let row = all
        .get(step - 1)
        .ok_or_else(|| MorError::Invalid(format!("forced scores missing step {step}")))?;
    tokens
        .iter()
        .map(|&t| {
            row.get(t)
                .copied()
                .ok_or_else(|| MorError::Invalid(format!("forced scores missing token {t}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// One step `r` (1-based) of recursion.
pub fn recursion_step<T: Real>(
    tape: &mut Tape<T>,
    mut state: TokenState,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    step: usize,
    hooks: &Hooks,
) -> Result<StepOutput> {
    if step == 0 || step > cfg.max_recursion {
        return Err(MorError::Invalid(format!("step {step} outside 1..={}", cfg.max_recursion)));
    }
    if !state.active[0] {
        return Err(MorError::Invalid("class token must stay active".into()));
    }
    let tokens = state.active.len();
    let candidates: Vec<usize> = (1..tokens).filter(|&t| state.active[t]).collect();

    // Scores for the candidates, as values and (when differentiable) a Var.
    let (score_var, score_vals) = if cfg.routing_mode == RoutingMode::Static || candidates.is_empty() {
        (None, Vec::new())
    } else if let Some(forced) = forced_row(hooks, step, &candidates)? {
        let col = Tensor::new(&[candidates.len(), 1], forced.iter().map(|&v| T::from_f64(v)).collect())?;
        (Some(tape.constant(col)), forced)
    } else {
        let router = params
            .routers
            .get(step - 1)
            .ok_or_else(|| MorError::Invalid(format!("no router for step {step}")))?;
        let rows = tape.gather_rows(state.hidden, &candidates)?;
        let s = routing_score(tape, rows, router)?;
        let vals = tape.value(s).data().iter().map(|v| v.as_f64()).collect();
        (Some(s), vals)
    };

    // Which candidates are updated, and at which positions in `score_vals`.
    let (kept_pos, threshold): (Vec<usize>, Option<f64>) = match cfg.routing_mode {
        RoutingMode::ExpertChoice if !candidates.is_empty() => {
            let sel = select_active(&score_vals, cfg.beta)?;
            (sel.keep, Some(sel.threshold))
        }
        _ => ((0..candidates.len()).collect(), None),
    };
    let kept: Vec<usize> = kept_pos.iter().map(|&i| candidates[i]).collect();

    let mut rows = Vec::with_capacity(kept.len() + 1);
    rows.push(0);
    rows.extend_from_slice(&kept);

    let x = tape.gather_rows(state.hidden, &rows)?;
    let f = encoder_block(tape, x, params.block(step - 1), cfg.heads, T::from_f64(cfg.ln_eps))?;

    let (update, cls_gate, kept_gates) = if let Some(g) = hooks.force_gate {
        let col = tape.constant(Tensor::full(&[rows.len(), 1], T::from_f64(g)));
        (tape.mul(f, col)?, g, vec![g; kept.len()])
    } else if let Some(s) = score_var {
        let one = tape.constant(Tensor::ones(&[1, 1]));
        let picked = tape.gather_rows(s, &kept_pos)?;
        let col = tape.concat_rows(&[one, picked])?;
        let gates = kept_pos.iter().map(|&i| score_vals[i]).collect();
        (tape.mul(f, col)?, 1.0, gates)
    } else {
        (f, 1.0, vec![1.0; kept.len()])
    };
    state.hidden = tape.index_add_rows(state.hidden, update, &rows)?;

    let mut mask = vec![false; tokens];
    state.gate = vec![None; tokens];
    for (&t, &g) in rows.iter().zip(std::iter::once(&cls_gate).chain(&kept_gates)) {
        mask[t] = true;
        state.gate[t] = Some(g);
    }
    match cfg.routing_mode {
        RoutingMode::ExpertChoice => {
            for &t in &candidates {
                if !mask[t] {
                    state.active[t] = false;
                    state.exit_depth[t] = step;
                }
            }
        }
        RoutingMode::TokenChoice => {
            if let Some(assigned) = &state.assigned_depth {
                for &t in &kept {
                    if assigned[t] <= step {
                        state.active[t] = false;
                        state.exit_depth[t] = assigned[t];
                    }
                }
            }
        }
        RoutingMode::Static => {}
    }

    Ok(StepOutput {
        state,
        trace: StepTrace {
            step,
            candidates,
            scores: score_vals,
            threshold,
            kept,
            kept_gates,
            cls_gate,
            mask,
        },
        scores: score_var,
    })
}

/// Output of [`run_recursion`].
#[derive(Debug, Clone)]
pub struct RecursionOutput {
    pub hidden: Var,
    pub trace: RoutingTrace,
    /// Per-step gate signals feeding the routing regularizer: candidate
    /// scores (expert choice) or soft survival probabilities over all patch
    /// tokens (token choice). Empty in static mode.
    pub gate_signals: Vec<Var>,
    /// Hidden state entering step 1 (`[0]`) and after each executed step.
    pub step_hidden: Vec<Var>,
}

/// Applies steps `1..=R`, stopping early once only the class token remains.
pub fn run_recursion<T: Real>(
    tape: &mut Tape<T>,
    z0: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    hooks: &Hooks,
) -> Result<RecursionOutput> {
    let tokens = tape.shape(z0)[0];
    let r_max = cfg.max_recursion;
    let mut state = TokenState::new(z0, tokens, r_max);
    let mut gate_signals = Vec::new();

    if cfg.routing_mode == RoutingMode::TokenChoice {
        let depth = params
            .depth
            .as_ref()
            .ok_or_else(|| MorError::Invalid("token_choice requires a depth predictor".into()))?;
        let patch_ids: Vec<usize> = (1..tokens).collect();
        let patches = tape.gather_rows(z0, &patch_ids)?;
        let logits = depth_logits(tape, patches, depth)?;
        let mut assigned = vec![r_max];
        assigned.extend(token_choice_assign(tape.value(logits))?);
        state.exit_depth[1..tokens].copy_from_slice(&assigned[1..tokens]);
        state.assigned_depth = Some(assigned);

        // survival[t][r] = P(depth_t ≥ r+1) under softmax(logits_t)
        let probs = tape.softmax_rows(logits)?;
        let upper = Tensor::new(
            &[r_max, r_max],
            (0..r_max * r_max)
                .map(|i| if i / r_max >= i % r_max { T::one() } else { T::zero() })
                .collect(),
        )?;
        let upper = tape.constant(upper);
        let survival = tape.matmul(probs, upper)?;
        for r in 0..r_max {
            gate_signals.push(tape.slice_cols(survival, r, 1)?);
        }
    }

    let mut steps = Vec::with_capacity(r_max);
    let mut step_hidden = vec![z0];
    for step in 1..=r_max {
        if !state.active[1..].iter().any(|&a| a) {
            break;
        }
        let out = recursion_step(tape, state, params, cfg, step, hooks)?;
        state = out.state;
        step_hidden.push(state.hidden);
        if cfg.routing_mode == RoutingMode::ExpertChoice {
            if let Some(s) = out.scores {
                gate_signals.push(s);
            }
        }
        steps.push(out.trace);
    }

    let effective_depth = effective_depths(&state.exit_depth, &steps);
    Ok(RecursionOutput {
        hidden: state.hidden,
        trace: RoutingTrace {
            mode: cfg.routing_mode,
            num_patches: tokens - 1,
            max_recursion: r_max,
            steps,
            exit_depth: state.exit_depth,
            effective_depth,
        },
        gate_signals,
        step_hidden,
    })
}

fn effective_depths(exit_depth: &[usize], steps: &[StepTrace]) -> Vec<usize> {
    let mut negligible = vec![0usize; exit_depth.len()];
    for s in steps {
        if s.cls_gate < NEGLIGIBLE_GATE {
            negligible[0] += 1;
        }
        for (&t, &g) in s.kept.iter().zip(&s.kept_gates) {
            if g < NEGLIGIBLE_GATE {
                negligible[t] += 1;
            }
        }
    }
    exit_depth
        .iter()
        .zip(&negligible)
        .map(|(&d, &n)| d.saturating_sub(n).max(1))
        .collect()
}
