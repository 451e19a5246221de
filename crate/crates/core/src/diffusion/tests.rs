use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check, Graph, Tensor};
use crate::padnet::PerModality;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

/// Single-step schedule with a chosen alpha_bar(1).
fn one_step(abar: f64) -> NoiseSchedule {
    NoiseSchedule::linear(1, 1.0 - abar, 1.0 - abar).unwrap()
}

fn s(v: f64) -> Tensor<f64> {
    Tensor::from_f64(&[1], &[v]).unwrap()
}

#[test]
fn schedule_examples() {
    let one = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
    assert_eq!(one.alpha_bar(1), 0.5);
    assert_eq!(one.alpha_bar(0), 1.0);

    let sc = sched();
    assert!((sc.alpha_bar(1) - 0.9999).abs() < 1e-15);
    assert!((sc.beta(1000) - 0.02).abs() < 1e-15);

    let tiny = NoiseSchedule::linear(100, 1e-12, 1e-12).unwrap();
    for t in 1..=100 {
        assert!((tiny.alpha_bar(t) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn schedule_invariants() {
    let sc = sched();
    for t in 1..=sc.steps() {
        assert!(sc.alpha_bar(t) < sc.alpha_bar(t - 1));
        assert_eq!(sc.alpha_bar(t), sc.alpha_bar(t - 1) * sc.alpha(t));
        assert_eq!(sc.alpha(t), 1.0 - sc.beta(t));
    }
    assert!(sc.alpha_bar(1000) > 0.0 && sc.alpha_bar(1) < 1.0);
}

#[test]
fn schedule_bounds_rejected() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
}

#[test]
fn q_sample_examples() {
    let tiny = NoiseSchedule::linear(1, 1e-15, 1e-15).unwrap();
    let z0 = s(0.7);
    let z = q_sample(&z0, 1, &s(1.3), &tiny).unwrap();
    assert!((z.item() - 0.7).abs() < 1e-7);

    let sc = one_step(0.25);
    let z = q_sample(&s(0.0), 1, &s(2.0), &sc).unwrap();
    assert!((z.item() - 0.75f64.sqrt() * 2.0).abs() < 1e-15);

    // 0.5 * 1 + sqrt(0.75) * 1
    let z = q_sample(&s(1.0), 1, &s(1.0), &sc).unwrap();
    assert!((z.item() - 1.366025).abs() < 1e-6);

    assert!(matches!(
        q_sample(&s(1.0), 2, &s(1.0), &sc),
        Err(DiffusionError::Timestep { .. })
    ));
    assert!(q_sample(&s(1.0), 0, &s(1.0), &sc).is_err());
}

#[test]
fn posterior_mean_examples() {
    let sc = one_step(0.25);
    let mu = posterior_mean(&s(1.366025), 1, &s(1.0), &sc).unwrap();
    assert!((mu.item() - 1.0).abs() < 1e-6);
    let mu = posterior_mean(&s(0.9), 1, &s(0.0), &sc).unwrap();
    assert!((mu.item() - 0.9 / 0.5).abs() < 1e-15);
}

#[test]
fn posterior_mean_inverts_q_sample_for_all_t() {
    let sc = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z0 = Tensor::<f32>::randn(&[64], 1.0, &mut rng);
    let eps = Tensor::<f32>::randn(&[64], 1.0, &mut rng);
    for t in 1..=1000 {
        let zt = q_sample(&z0, t, &eps, &sc).unwrap();
        let back = posterior_mean(&zt, t, &eps, &sc).unwrap();
        // f32 rounding of z_t is amplified by 1/sqrt(abar_t) at the noisy end
        let tol = 1e-5f64.max(4.0 * f32::EPSILON as f64 * 4.0 / sc.alpha_bar(t).sqrt());
        assert!(back.max_abs_diff(&z0) <= tol, "t={t}");
    }
    // in double precision the round trip is tight everywhere
    let z0 = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
    for t in 1..=1000 {
        let zt = q_sample(&z0, t, &eps, &sc).unwrap();
        let back = posterior_mean(&zt, t, &eps, &sc).unwrap();
        assert!(back.max_abs_diff(&z0) <= 1e-10);
    }
}

#[test]
fn ddim_examples() {
    let sc = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
    let zt = q_sample(&z0, 500, &eps, &sc).unwrap();
    let out = ddim_step(&zt, 500, 0, &eps, &sc).unwrap();
    assert!(out.max_abs_diff(&z0) < 1e-12);

    let zero = Tensor::zeros(&[16]);
    let out = ddim_step(&zt, 500, 200, &zero, &sc).unwrap();
    let ratio = (sc.alpha_bar(200) / sc.alpha_bar(500)).sqrt();
    for (o, z) in out.data().iter().zip(zt.data()) {
        assert!((o - ratio * z).abs() < 1e-12);
    }
    assert!(matches!(
        ddim_step(&zt, 200, 200, &eps, &sc),
        Err(DiffusionError::Order { .. })
    ));
}

#[test]
fn ddim_with_true_noise_reconstructs_over_any_ladder() {
    let sc = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [1, 2, 7, 75, 1000] {
        let z0 = Tensor::<f64>::randn(&[128], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[128], 1.0, &mut rng);
        let ladder = make_ddim_ladder(1000, n).unwrap();
        let mut z = q_sample(&z0, ladder[0].0, &eps, &sc).unwrap();
        for (t, tp) in ladder {
            z = ddim_step(&z, t, tp, &eps, &sc).unwrap();
        }
        assert!(z.max_abs_diff(&z0) <= 1e-10, "n={n}: {}", z.max_abs_diff(&z0));
    }
}

#[test]
fn ddim_reconstruction_in_single_precision() {
    // Storing z_T in f32 costs about one ulp, amplified by 1/sqrt(abar_T)
    // when the first step strips the noise.
    let sc = sched();
    let tol = (16.0 * f32::EPSILON as f64 / sc.alpha_bar(1000).sqrt()).max(1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [1, 2, 7, 75, 1000] {
        let z0 = Tensor::<f32>::randn(&[128], 1.0, &mut rng);
        let eps = Tensor::<f32>::randn(&[128], 1.0, &mut rng);
        let ladder = make_ddim_ladder(1000, n).unwrap();
        let mut z = q_sample(&z0, ladder[0].0, &eps, &sc).unwrap();
        for (t, tp) in ladder {
            z = ddim_step(&z, t, tp, &eps, &sc).unwrap();
        }
        assert!(z.max_abs_diff(&z0) <= tol, "n={n}: {}", z.max_abs_diff(&z0));
    }
}

#[test]
fn ladder_examples() {
    assert_eq!(make_ddim_ladder(1000, 1).unwrap(), vec![(1000, 0)]);
    assert_eq!(
        make_ddim_ladder(4, 4).unwrap(),
        vec![(4, 3), (3, 2), (2, 1), (1, 0)]
    );
    let l = make_ddim_ladder(1000, 75).unwrap();
    assert_eq!(l.len(), 75);
    assert_eq!(l[0].0, 1000);
    assert_eq!(l.last().unwrap().1, 0);
    for w in l.windows(2) {
        assert_eq!(w[0].1, w[1].0);
        assert!(w[0].0 > w[0].1);
        let gap = w[0].0 - w[0].1;
        assert!(gap == 13 || gap == 14, "{gap}");
    }
    assert!(make_ddim_ladder(10, 11).is_err());
    assert!(make_ddim_ladder(10, 0).is_err());
}

#[test]
fn ddpm_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.constant(eps.clone());
    let b = g.constant(eps.clone());
    let l = ddpm_loss(&mut g, a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let shifted = Tensor::new(&[4, 5], eps.data().iter().map(|v| v + 0.3).collect()).unwrap();
    let a = g.param(shifted.clone());
    let l = ddpm_loss(&mut g, a, b).unwrap();
    assert!((g.value(l).item() - 0.09).abs() < 1e-12);
    g.backward(l).unwrap();
    for v in g.grad(a).unwrap().data() {
        assert!((v - 2.0 * 0.3 / 20.0).abs() < 1e-12);
    }

    let err = grad_check(
        |g, x| {
            let e = g.constant(eps.clone());
            ddpm_loss(g, x, e)
        },
        &shifted,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn combined_loss_examples() {
    let w = LossWeights::new(0.5, 0.25, 0.1);
    let mut g = Graph::<f64>::new();
    let li = g.constant(Tensor::scalar(1.0).unwrap());
    let la = g.constant(Tensor::scalar(2.0).unwrap());
    let le = g.constant(Tensor::scalar(2.0).unwrap());
    let all = PerModality {
        image: Some(li),
        action: Some(la),
        depth: Some(le),
    };
    let l = combined_loss(&mut g, &all, &w).unwrap();
    assert!((g.value(l).item() - 1.2).abs() < 1e-12);

    let half = g.constant(Tensor::scalar(0.5).unwrap());
    let video = PerModality {
        image: Some(half),
        action: None,
        depth: None,
    };
    let l = combined_loss(&mut g, &video, &LossWeights::new(1.0, 2.0, 2.0)).unwrap();
    assert_eq!(g.value(l).item(), 0.5);

    let l = combined_loss(&mut g, &all, &LossWeights::new(0.0, 0.0, 0.0)).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let vals = PerModality {
        image: Some(1.0),
        action: Some(2.0),
        depth: None,
    };
    assert!((combined_loss_value(&vals, &w) - 1.0).abs() < 1e-12);
}

#[test]
fn combined_loss_leaves_absent_paths_untouched() {
    let mut g = Graph::<f64>::new();
    let pi = g.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let pa = g.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let z = g.constant(Tensor::zeros(&[3]));
    let li = ddpm_loss(&mut g, pi, z).unwrap();
    // the action branch exists on the graph but its loss is absent
    let _la = ddpm_loss(&mut g, pa, z).unwrap();
    let losses = PerModality {
        image: Some(li),
        action: None,
        depth: None,
    };
    let l = combined_loss(&mut g, &losses, &LossWeights::new(1.0, 2.0, 2.0)).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(pa).is_none());
    assert!(g.grad(pi).is_some());
}

#[test]
fn lambda_ramp_examples() {
    let r = LambdaRamp::default();
    assert_eq!(lambda_schedule(0, 100, &r).unwrap(), LossWeights::new(1.0, 0.0, 0.0));
    assert_eq!(lambda_schedule(100, 100, &r).unwrap(), LossWeights::new(1.0, 2.0, 2.0));
    assert_eq!(lambda_schedule(50, 100, &r).unwrap(), LossWeights::new(1.0, 1.0, 1.0));
    assert_eq!(lambda_schedule(500, 100, &r).unwrap(), LossWeights::new(1.0, 2.0, 2.0));
    assert!(matches!(lambda_schedule(0, 0, &r), Err(DiffusionError::Ramp)));
}

#[test]
fn q_sample_moments() {
    use rand_distr::{Distribution, StandardNormal};
    let sc = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    for &(t, z0v) in &[(1usize, 0.8f64), (250, -1.2), (600, 0.4), (1000, 2.0)] {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z0 = Tensor::<f64>::full(&[n], z0v);
        let eps = Tensor::new(&[n], eps).unwrap();
        let zt = q_sample(&z0, t, &eps, &sc).unwrap();
        let mean = zt.data().iter().sum::<f64>() / n as f64;
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = sc.alpha_bar(t);
        assert!((mean - ab.sqrt() * z0v).abs() <= 4.0 * ((1.0 - ab) / n as f64).sqrt());
        assert!((var - (1.0 - ab)).abs() <= 0.05 * (1.0 - ab));
    }
}
