//! Reverse-mode gradients of every tape op against central differences,
//! 20 seeds each.

mod common;

use common::{fd_check, random_tensor, weighted_sum};
use morvit_core::rng::Rng;
use morvit_core::{Result, Tape, Tensor, Var};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = Rng::seed_from(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.5)).collect();
        let err = fd_check(&inputs, |t, v| f(t, v, seed));
        assert!(err < TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[3, 4], &[4, 2]], |t, v, s| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, s)
    });
}

#[test]
fn broadcast_add_mul_sub() {
    check("add", &[&[3, 4], &[4]], |t, v, s| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, s)
    });
    check("mul", &[&[3, 4], &[3, 1]], |t, v, s| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, s)
    });
    check("sub", &[&[2, 3], &[2, 3]], |t, v, s| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, s)
    });
}

#[test]
fn scalar_ops() {
    check("add_scalar/scale", &[&[2, 5]], |t, v, s| {
        let a = t.add_scalar(v[0], 0.7);
        let b = t.scale(a, -1.3);
        let c = t.mul(b, v[0])?;
        weighted_sum(t, c, s)
    });
}

#[test]
fn shape_ops() {
    check("transpose/reshape", &[&[3, 4]], |t, v, s| {
        let a = t.transpose(v[0])?;
        let b = t.reshape(a, &[2, 6])?;
        let c = t.mul(b, b)?;
        weighted_sum(t, c, s)
    });
    check("slice/concat cols", &[&[3, 5], &[3, 2]], |t, v, s| {
        let a = t.slice_cols(v[0], 1, 3)?;
        let b = t.concat_cols(&[v[1], a, v[1]])?;
        let c = t.mul(b, b)?;
        weighted_sum(t, c, s)
    });
    check("concat rows", &[&[2, 3], &[1, 3]], |t, v, s| {
        let a = t.concat_rows(&[v[0], v[1], v[0]])?;
        let c = t.mul(a, a)?;
        weighted_sum(t, c, s)
    });
}

#[test]
fn row_ops() {
    check("gather_rows", &[&[4, 3]], |t, v, s| {
        let a = t.gather_rows(v[0], &[2, 0, 2, 3])?;
        let c = t.mul(a, a)?;
        weighted_sum(t, c, s)
    });
    check("index_add_rows", &[&[5, 3], &[2, 3]], |t, v, s| {
        let a = t.index_add_rows(v[0], v[1], &[4, 1])?;
        let c = t.mul(a, a)?;
        weighted_sum(t, c, s)
    });
}

#[test]
fn softmax_and_layernorm() {
    check("softmax_rows", &[&[3, 4]], |t, v, s| {
        let a = t.softmax_rows(v[0])?;
        weighted_sum(t, a, s)
    });
    check("layernorm", &[&[3, 6], &[6], &[6]], |t, v, s| {
        let a = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, a, s)
    });
}

#[test]
fn activations() {
    check("gelu", &[&[3, 4]], |t, v, s| {
        let a = t.gelu(v[0]);
        weighted_sum(t, a, s)
    });
    check("sigmoid", &[&[3, 4]], |t, v, s| {
        let a = t.sigmoid(v[0]);
        weighted_sum(t, a, s)
    });
    // keep inputs away from the kink at zero
    check("relu", &[&[3, 4]], |t, v, s| {
        let sq = t.mul(v[0], v[0])?;
        let shifted = t.add_scalar(sq, 0.05);
        let signed = t.mul(shifted, v[0])?;
        let a = t.relu(signed);
        weighted_sum(t, a, s)
    });
}

#[test]
fn reductions_and_cross_entropy() {
    check("sum/mean", &[&[2, 3]], |t, v, _| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.sum(sq);
        let b = t.mean(v[0]);
        let ab = t.mul(a, b)?;
        Ok(ab)
    });
    check("cross_entropy", &[&[3, 5]], |t, v, s| {
        let labels = [(s % 5) as usize, 0, 4];
        let scaled = t.scale(v[0], 3.0);
        t.cross_entropy(scaled, &labels)
    });
}
