use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Random weighted readout so no gradient is degenerate.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::<f64>::eye(2));
    let i2 = g.constant(Tensor::eye(2));
    let p = g.matmul(i, i2).unwrap();
    assert_eq!(g.value(p), &Tensor::eye(2));

    let a = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.param(t(&[2, 1], &[1., 1.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    // d sum(AB) / dA = ones . B^T
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[1., 1., 1., 1.]);
    assert_eq!(g.grad(b).unwrap().data(), &[4., 6.]);

    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.matmul(a, bad), Err(TensorError::Shape(_))));
}

#[test]
fn matmul_grad_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_t(&[3, 5], &mut rng);
    let a = rand_t(&[4, 3], &mut rng);
    let err = grad_check(
        |g, x| {
            let bb = g.constant(b.clone());
            let y = g.matmul(x, bb)?;
            g.sum(y)
        },
        &a,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0., 0., 0.]));
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000., 0.]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300);
    let x = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let want = [1. / 6., 2. / 6., 3. / 6.];
    for (v, w) in g.value(y).data().iter().zip(want) {
        assert!((v - w).abs() < 1e-14);
    }
    assert!(matches!(g.softmax(x, 1), Err(TensorError::Axis { .. })));
}

#[test]
fn softmax_over_middle_axis_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[2, 4, 3], &mut rng));
    let y = g.softmax(x, 1).unwrap();
    let d = g.value(y).data();
    for o in 0..2 {
        for i in 0..3 {
            let s: f64 = (0..4).map(|j| d[o * 12 + j * 3 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[2., 2., 2., 2.]));
    let y = g.layer_norm(x, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let x = g.constant(t(&[2], &[1., 3.]));
    let y = g.layer_norm(x, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    let x = g.constant(t(&[2, 1], &[1., 3.]));
    assert!(g.layer_norm(x, 1e-5).is_err());
}

#[test]
fn activation_values() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert_eq!(silu_scalar(0.0f64), 0.0);
    // 0.5 * (1 + tanh(sqrt(2/pi) * (1 + 0.044715)))
    let want = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
    assert!((gelu_scalar(1.0f64) - want).abs() < 1e-15);
    assert!((gelu_scalar(1.0f64) - 0.8412).abs() < 1e-4);
    assert!((silu_scalar(1.0f64) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(5.0).unwrap());
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0).unwrap());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
    // a second call accumulates
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 12.0);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.5).unwrap());
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 2.0);

    let v = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn constants_get_no_grad() {
    let mut g = Graph::new();
    let c = g.constant(t(&[2], &[1., 2.]));
    let p = g.param(t(&[2], &[3., 4.]));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().data(), &[1., 2.]);
}

#[test]
fn grad_check_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[3, 4], &mut rng);
    let err = grad_check(|g, x| g.sum(x), &x, 1e-4).unwrap();
    assert!(err < 1e-9, "{err}");

    // quadratic form x^T Q x
    let q = rand_t(&[4, 4], &mut rng);
    let x = rand_t(&[1, 4], &mut rng);
    let err = grad_check(
        |g, x| {
            let qq = g.constant(q.clone());
            let qx = g.matmul(x, qq)?;
            let p = g.mul(qx, x)?;
            g.sum(p)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

/// Every primitive, 20 random small inputs, at double precision.
#[test]
fn primitive_ops_pass_grad_check() {
    let worst = super::op_suite::run(20, 0xC0FFEE).unwrap();
    for (name, err) in &worst {
        assert!(*err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = rand_t(&[3, 4], &mut rng);
    let w = rand_t(&[4, 2], &mut rng);
    let (a, b) = (0.7, -1.3);
    let grads = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let ww = g.constant(w.clone());
        let h = g.matmul(x, ww).unwrap();
        let h = g.gelu(h).unwrap();
        let l1 = g.sum(h).unwrap();
        let sq = g.mul(x, x).unwrap();
        let sq = g.layer_norm(sq, 1e-5).unwrap();
        let l2 = readout(&mut g, sq, 9).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let s1 = g.scale(l1, a).unwrap();
                let s2 = g.scale(l2, b).unwrap();
                g.add(s1, s2).unwrap()
            }
        };
        g.backward(loss).unwrap();
        g.grad(x).unwrap().data().to_vec()
    };
    let g1 = grads(1);
    let g2 = grads(2);
    let gc = grads(0);
    for i in 0..gc.len() {
        assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-6);
    }
}

#[test]
fn deterministic_outputs_and_grads() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let w = g.param(Tensor::randn(&[8, 8], 0.3, &mut rng));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, 2).unwrap();
        let s = g.sum(y).unwrap();
        let y2 = g.silu(x).unwrap();
        let s2 = g.mean(y2).unwrap();
        let l = g.add(s, s2).unwrap();
        g.backward(l).unwrap();
        (
            g.value(l).data().to_vec(),
            g.grad(x).unwrap().data().to_vec(),
            g.grad(w).unwrap().data().to_vec(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn masked_softmax_zeroes_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.param(rand_t(&[2, 1, 3, 4], &mut rng));
    let mask = [true, false, true, true, true, true, false, false];
    let y = g.masked_softmax(x, &mask).unwrap();
    let d = g.value(y).data().to_vec();
    for b in 0..2 {
        for r in 0..3 {
            let row = &d[(b * 3 + r) * 4..(b * 3 + r + 1) * 4];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if !mask[b * 4 + j] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
    let l = readout(&mut g, y, 4).unwrap();
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap().data();
    for b in 0..2 {
        for r in 0..3 {
            for j in 0..4 {
                if !mask[b * 4 + j] {
                    assert_eq!(gx[(b * 3 + r) * 4 + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn permute_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = rand_t(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let p = g.permute(x, &[0, 2, 1, 3]).unwrap();
    assert_eq!(g.shape(p), &[2, 4, 3, 5]);
    assert_eq!(g.value(p).data()[5], x0.data()[20]);
    let back = g.permute(p, &[0, 2, 1, 3]).unwrap();
    assert_eq!(g.value(back), &x0);
    assert!(g.permute(x, &[0, 0, 1, 2]).is_err());
}

#[test]
fn random_shapes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let m = rng.gen_range(1..6);
        let k = rng.gen_range(1..6);
        let n = rng.gen_range(1..6);
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::randn(&[m, k], 1.0, &mut rng));
        let b = g.param(Tensor::randn(&[k, n], 1.0, &mut rng));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().shape(), &[m, k]);
    }
}
