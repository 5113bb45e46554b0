//! Patch embedding and the standard pre-norm encoder block that recursion
//! reuses.

use crate::autodiff::{Tape, Var};
use crate::error::{MorError, Result};
use crate::params::{BlockParams, EmbedParams, HeadParams};
use crate::tensor::{Real, Tensor};

/// Splits an `H×W×C` image into non-overlapping `P×P` patches.
///
/// Patches are ordered left to right, top to bottom; each row holds one
/// patch flattened in `(y, x, channel)` order.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *image.shape() else {
        return Err(MorError::Rank {
            op: "patchify",
            expected: 3,
            shape: image.shape().to_vec(),
        });
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(MorError::Config(format!("image {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, pd], out)
}

/// `Z0 = [cls; patches·W_e + b_e] + E_pos`.
pub fn embed<T: Real>(tape: &mut Tape<T>, patches: Var, p: &EmbedParams<Var>) -> Result<Var> {
    let proj = tape.matmul(patches, p.patch_w)?;
    let proj = tape.add(proj, p.patch_b)?;
    let tokens = tape.concat_rows(&[p.cls, proj])?;
    if tape.shape(tokens) != tape.shape(p.pos) {
        return Err(MorError::Shape {
            op: "embed",
            lhs: tape.shape(tokens).to_vec(),
            rhs: tape.shape(p.pos).to_vec(),
        });
    }
    tape.add(tokens, p.pos)
}

fn affine<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Multi-head self-attention over exactly the rows of `x` (already
/// normalized), including the output projection.
pub fn self_attention<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockParams<Var>, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(MorError::Config(format!("hidden {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = affine(tape, x, p.q_w, p.q_b)?;
    let k = affine(tape, x, p.k_w, p.k_b)?;
    let v = affine(tape, x, p.v_w, p.v_b)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    affine(tape, merged, p.o_w, p.o_b)
}

/// Pre-norm block: `h1 = h + MHSA(LN(h))`, `out = h1 + MLP(LN(h1))`.
pub fn encoder_block<T: Real>(tape: &mut Tape<T>, h: Var, p: &BlockParams<Var>, heads: usize, eps: T) -> Result<Var> {
    if tape.shape(h).first() == Some(&0) {
        return Err(MorError::Invalid("encoder_block: no tokens".into()));
    }
    let x = tape.layernorm(h, p.ln1_gain, p.ln1_bias, eps)?;
    let attn = self_attention(tape, x, p, heads)?;
    let h1 = tape.add(h, attn)?;
    let y = tape.layernorm(h1, p.ln2_gain, p.ln2_bias, eps)?;
    let hidden = affine(tape, y, p.mlp_w1, p.mlp_b1)?;
    let hidden = tape.gelu(hidden);
    let mlp = affine(tape, hidden, p.mlp_w2, p.mlp_b2)?;
    tape.add(h1, mlp)
}

/// Linear classifier on the class-token row; returns `1×classes` logits.
pub fn classify<T: Real>(tape: &mut Tape<T>, h_cls: Var, head: &HeadParams<Var>) -> Result<Var> {
    affine(tape, h_cls, head.w, head.b)
}
