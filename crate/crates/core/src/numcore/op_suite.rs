//! Finite-difference sweep over every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Graph, Tensor, TensorError, Var};

type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>>;

fn readout(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(2..=8)
}

/// Builds one random case for `op`: the input tensor and a scalar function of it.
fn case(op: &str, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Case) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul_lhs" => {
            let b = randn(&[k, n], rng);
            let w = randn(&[m, n], rng);
            (randn(&[m, k], rng), Box::new(move |g, x| {
                let bb = g.constant(b.clone());
                let y = g.matmul(x, bb)?;
                readout(g, y, &w)
            }))
        }
        "matmul_rhs" => {
            let a = randn(&[m, k], rng);
            let w = randn(&[m, n], rng);
            (randn(&[k, n], rng), Box::new(move |g, x| {
                let aa = g.constant(a.clone());
                let y = g.matmul(aa, x)?;
                readout(g, y, &w)
            }))
        }
        "bmm" => {
            let b = randn(&[2, k, n], rng);
            let w = randn(&[2, m, n], rng);
            (randn(&[2, m, k], rng), Box::new(move |g, x| {
                let bb = g.param(b.clone());
                let y = g.bmm(x, bb, false)?;
                let s1 = readout(g, y, &w)?;
                // also route through the rhs
                let y2 = g.bmm(bb, bb, true)?;
                let s2 = g.sum(y2)?;
                let s3 = g.mul(s1, s2)?;
                g.add(s1, s3)
            }))
        }
        "bmm_nt" => {
            let w = randn(&[2, m, m], rng);
            (randn(&[2, m, k], rng), Box::new(move |g, x| {
                let y = g.bmm(x, x, true)?;
                readout(g, y, &w)
            }))
        }
        "add_sub_mul" => {
            let c = randn(&[m, n], rng);
            let w = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let a = g.add(x, cc)?;
                let s = g.sub(a, x)?;
                let p = g.mul(s, x)?;
                let p = g.mul(p, x)?;
                let p = g.sub(p, x)?;
                readout(g, p, &w)
            }))
        }
        "add_bias" => {
            let x0 = randn(&[m, n], rng);
            let w = randn(&[m, n], rng);
            (randn(&[n], rng), Box::new(move |g, b| {
                let xx = g.param(x0.clone());
                let y = g.add_bias(xx, b)?;
                let e = b_expand(g, b, m)?;
                let y = g.mul(y, e)?;
                readout(g, y, &w)
            }))
        }
        "scale_add_scalar" => {
            let w = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.scale(x, -1.7)?;
                let y = g.add_scalar(y, 0.3)?;
                let y = g.mul(y, x)?;
                readout(g, y, &w)
            }))
        }
        "softmax" => {
            let axis = rng.gen_range(0..3);
            let w = randn(&[m, k, n], rng);
            (randn(&[m, k, n], rng), Box::new(move |g, x| {
                let y = g.softmax(x, axis)?;
                readout(g, y, &w)
            }))
        }
        "masked_softmax" => {
            let mask: Vec<bool> = (0..2 * n).map(|j| j % n == 0 || rng.gen_bool(0.6)).collect();
            let w = randn(&[2, 2, m, n], rng);
            (randn(&[2, 2, m, n], rng), Box::new(move |g, x| {
                let y = g.masked_softmax(x, &mask)?;
                readout(g, y, &w)
            }))
        }
        "layer_norm" => {
            let w = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.layer_norm(x, 1e-5)?;
                readout(g, y, &w)
            }))
        }
        "gelu" => {
            let w = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.gelu(x)?;
                readout(g, y, &w)
            }))
        }
        "silu" => {
            let w = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.silu(x)?;
                readout(g, y, &w)
            }))
        }
        "reshape_permute" => {
            let w = randn(&[n, m, k], rng);
            (randn(&[m, k, n], rng), Box::new(move |g, x| {
                let y = g.permute(x, &[2, 0, 1])?;
                let y = g.reshape(y, &[n, m * k])?;
                let y = g.reshape(y, &[n, m, k])?;
                let y = g.mul(y, y)?;
                readout(g, y, &w)
            }))
        }
        "expand_mid" => {
            let w = randn(&[m, k, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.expand_mid(x, k)?;
                let y = g.mul(y, y)?;
                readout(g, y, &w)
            }))
        }
        "concat_narrow" => {
            let c = randn(&[m, k], rng);
            let w = randn(&[m, 2], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let y = g.concat(&[x, cc, x], 1)?;
                let y = g.mul(y, y)?;
                let y = g.narrow(y, 1, n - 1, 2)?;
                readout(g, y, &w)
            }))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m)).collect();
            let w = randn(&[k, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let y = g.gather_rows(x, &idx)?;
                let y = g.mul(y, y)?;
                readout(g, y, &w)
            }))
        }
        "sum_mean_sse" => {
            let c = randn(&[m, n], rng);
            (randn(&[m, n], rng), Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let e = g.sse(x, cc)?;
                let y = g.mul(x, cc)?;
                let mu = g.mean(y)?;
                let s = g.sum(x)?;
                let a = g.mul(mu, s)?;
                g.add(a, e)
            }))
        }
        other => unreachable!("unknown op case {other}"),
    }
}

fn b_expand(g: &mut Graph<f64>, b: Var, rows: usize) -> Result<Var, TensorError> {
    let n = g.shape(b)[0];
    let b2 = g.reshape(b, &[1, n])?;
    let e = g.expand_mid(b2, rows)?;
    g.reshape(e, &[rows, n])
}

pub const OPS: &[&str] = &[
    "matmul_lhs",
    "matmul_rhs",
    "bmm",
    "bmm_nt",
    "add_sub_mul",
    "add_bias",
    "scale_add_scalar",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "silu",
    "reshape_permute",
    "expand_mid",
    "concat_narrow",
    "gather_rows",
    "sum_mean_sse",
];

/// Runs `cases` random grad checks per primitive; returns the worst relative
/// error seen for each.
pub fn run(cases: usize, seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len());
    for &op in OPS {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let (x, f) = case(op, &mut rng);
            worst = worst.max(grad_check(f, &x, 1e-4)?);
        }
        out.push((op, worst));
    }
    Ok(out)
}
