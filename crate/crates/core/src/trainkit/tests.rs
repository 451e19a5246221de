use super::*;
use crate::blockworld::{reset, Color, TaskFamily, TaskSpec, EXPERT_MAX_STEPS};
use crate::datastore::{record_expert_episode, window_at, Episode};
use crate::padnet::{ParamGroup, ParamStore};

fn episodes(n: usize, seed0: u64) -> Vec<Episode> {
    (0..n as u64)
        .filter_map(|s| {
            let c = if s % 2 == 0 { Color::Red } else { Color::Blue };
            let st = reset(seed0 + s, &TaskSpec::new(TaskFamily::Reach, c), 1).unwrap();
            record_expert_episode(st, false, EXPERT_MAX_STEPS).unwrap()
        })
        .collect()
}

fn tiny_run(pre: u64, adapt: u64, batch: usize) -> TrainRun {
    let mut run = TrainRun::default();
    run.pretrain.total_steps = pre;
    run.adapt.total_steps = adapt;
    run.adapt.ramp_steps = adapt.max(1);
    run.pretrain.batch = batch;
    run.adapt.batch = batch;
    run.pretrain.checkpoint_every = 2;
    run.adapt.checkpoint_every = 2;
    run
}

#[test]
fn lambda_endpoints_per_phase() {
    let run = TrainRun::default();
    assert_eq!(run.pretrain.weights(0).unwrap(), LossWeights::new(1.0, 0.0, 0.0));
    assert_eq!(run.pretrain.weights(2999).unwrap(), LossWeights::new(1.0, 0.0, 0.0));
    assert_eq!(run.adapt.weights(0).unwrap(), LossWeights::new(1.0, 0.0, 0.0));
    assert_eq!(run.adapt.weights(5000).unwrap(), LossWeights::new(1.0, 2.0, 2.0));
    assert_eq!(run.adapt.weights(2500).unwrap(), LossWeights::new(1.0, 1.0, 1.0));
    assert_eq!(run.adapt.video_fraction, 0.25);
    assert_eq!(run.adapt.optim.lr, 1e-4);
    assert_eq!(run.adapt.optim.weight_decay, 0.0);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::adapt_default();
    c.batch = 0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::adapt_default();
    c.video_fraction = 1.5;
    assert!(c.validate().is_err());
    let mut r = TrainRun::default();
    r.pretrain.total_steps = 0;
    r.adapt.total_steps = 0;
    assert!(r.validate().is_err());
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut ps = ParamStore::new();
    ps.push("w", ParamGroup::Shared, Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap());
    ps.push("u", ParamGroup::Action, Tensor::new(&[1], vec![4.0f32]).unwrap());
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&ps);
    let g = Tensor::new(&[3], vec![0.3f32, -4.0, 0.0]).unwrap();
    opt.update(&cfg, &mut ps, &[Some(g), None]).unwrap();
    // bias-corrected moments equal g and g^2 on the first step
    let want = |w: f64, g: f64| w * (1.0 - 0.1 * 0.5) - 0.1 * g / (g.abs() + 1e-8);
    let got = ps.tensor(0).data();
    for (i, (w, g)) in [(1.0, 0.3), (-2.0, -4.0), (0.5, 0.0)].into_iter().enumerate() {
        assert!((got[i] as f64 - want(w, g)).abs() < 1e-6, "{i}: {} vs {}", got[i], want(w, g));
    }
    assert_eq!(ps.tensor(1).data(), &[4.0]);
    assert_eq!(opt.m[1], vec![0.0]);
    assert_eq!(OptimizerState::from_bytes(&opt.to_bytes()).unwrap(), opt);
    assert!(OptimizerState::from_bytes(&opt.to_bytes()[..20]).is_err());
}

#[test]
fn zero_init_loss_is_expected_noise_energy() {
    let cfg = PadConfig::mini();
    let net = PadNet::<f32>::init(&cfg, 0).unwrap();
    let sched = schedule_for(&cfg).unwrap();
    let eps = episodes(4, 100);
    let bundles: Vec<_> = (0..8)
        .map(|i| window_at(&eps[i % eps.len()], i, cfg.k, cfg.frame_interval).unwrap().to_bundle(&cfg).unwrap())
        .collect();
    let w = LossWeights::new(1.0, 2.0, 0.0);
    let mut rng = step_rng(3, Phase::Adapt, 0);
    let (per, total, _) = batch_gradients(&net, &bundles, &w, &sched, &mut rng).unwrap();
    // replay the same stream to get the noise the step drew
    let mut rng = step_rng(3, Phase::Adapt, 0);
    let (mut si, mut ni, mut sa, mut na) = (0.0, 0, 0.0, 0);
    for b in &bundles {
        let (_, e, _) = noise_example(b, &sched, &mut rng).unwrap();
        let img = e.image.unwrap();
        si += img.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        ni += img.numel();
        let a = e.action.unwrap();
        sa += a.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        na += a.numel();
    }
    let (li, la) = (si / ni as f64, sa / na as f64);
    assert!((per.image.unwrap() - li).abs() < 1e-5);
    assert!((per.action.unwrap() - la).abs() < 1e-5);
    assert!((total - (li + 2.0 * la)).abs() < 1e-4);
    // and those energies sit near their expectation of one
    assert!((li - 1.0).abs() < 0.05 && (la - 1.0).abs() < 0.5);
}

#[test]
fn video_only_batch_leaves_action_path_untouched() {
    let mut cfg = PadConfig::mini();
    cfg.hidden = 32;
    cfg.n_layers = 2;
    let mut net = PadNet::<f32>::init(&cfg, 1).unwrap();
    crate::padnet::probe::perturb(&mut net, 0.05, 9);
    let sched = schedule_for(&cfg).unwrap();
    let eps = episodes(2, 10);
    let bundles: Vec<_> = (0..4)
        .map(|i| {
            window_at(&eps[i % 2].video_only(), i, cfg.k, cfg.frame_interval)
                .unwrap()
                .to_bundle(&cfg)
                .unwrap()
        })
        .collect();
    let mut rng = step_rng(0, Phase::Adapt, 0);
    let (_, _, grads) = batch_gradients(&net, &bundles, &LossWeights::new(1.0, 2.0, 2.0), &sched, &mut rng).unwrap();
    let mut shared_nonzero = 0;
    for (i, g) in grads.iter().enumerate() {
        match net.params().group(i) {
            ParamGroup::Shared => {
                shared_nonzero += usize::from(g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
            }
            _ => assert!(g.as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{}", net.params().name(i)),
        }
    }
    assert!(shared_nonzero > 0);
}

#[test]
fn train_steps_are_deterministic() {
    let mut cfg = PadConfig::mini();
    cfg.hidden = 32;
    cfg.n_layers = 1;
    let robot = episodes(3, 0);
    let video: Vec<_> = episodes(2, 50).iter().map(Episode::video_only).collect();
    let sched = schedule_for(&cfg).unwrap();
    let tc = TrainConfig::adapt_default();
    let run = || {
        let mut net = PadNet::<f32>::init(&cfg, 0).unwrap();
        let mut opt = OptimizerState::new(net.params());
        let mut out = Vec::new();
        for step in 0..3 {
            let mut rng = step_rng(5, Phase::Adapt, step);
            let batch = mixed_batch(&robot, &video, 4, 0.25, cfg.k, cfg.frame_interval, &mut rng).unwrap();
            let w = LossWeights::new(1.0, 1.0, 0.0);
            let m = train_step(&mut net, &mut opt, &tc.optim, &batch, &sched, &w, &mut rng, step).unwrap();
            out.push((m.loss, m.total));
        }
        (out, net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    assert!(na.params().bit_equal(nb.params()));
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut cfg = PadConfig::mini();
    cfg.hidden = 32;
    cfg.n_layers = 1;
    let net = PadNet::<f32>::init(&cfg, 2).unwrap();
    let mut opt = OptimizerState::new(net.params());
    opt.step = 7;
    opt.m[3][0] = 0.25;
    opt.v[5][1] = 1e-3;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.padc"), dir.path().join("b.padc"));
    let progress = TrainProgress {
        phase: Phase::Adapt,
        step: 4,
    };
    save_checkpoint(&a, &net, Some(&opt), Some(progress), None).unwrap();
    let l = load_checkpoint(&a).unwrap();
    assert_eq!(l.optimizer.as_ref(), Some(&opt));
    assert_eq!(l.progress, Some(progress));
    save_checkpoint(&b, &l.net, l.optimizer.as_ref(), l.progress, None).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mut bytes = fs::read(&a).unwrap();
    bytes[4] = 99;
    fs::write(&b, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&b),
        Err(TrainError::Model(PadnetError::Checkpoint(_)))
    ));
}

fn rows_without_wall(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn resume_continues_bit_identically() {
    let mut cfg = PadConfig::mini();
    cfg.hidden = 32;
    cfg.n_layers = 1;
    let robot = episodes(3, 0);
    let video: Vec<_> = episodes(2, 50).iter().map(Episode::video_only).collect();
    let data = Dataset {
        dir: PathBuf::new(),
        robot,
        video,
    };
    let run = tiny_run(3, 4, 2);
    let full = tempfile::tempdir().unwrap();
    let out = train(&run, &cfg, &data, full.path(), None).unwrap();
    let rows = rows_without_wall(&out.metrics);
    assert_eq!(rows[0], METRICS_HEADER.rsplit_once(',').unwrap().0);
    assert_eq!(rows.len(), 1 + 7);
    assert!(full.path().join(checkpoint_name(2)).exists());
    assert!(full.path().join(checkpoint_name(5)).exists());

    // logged lambdas follow the schedule; pretrain rows carry no action loss
    for (i, r) in rows[1..].iter().enumerate() {
        let f: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, i);
        let w = if i < 3 {
            run.pretrain.weights(i as u64).unwrap()
        } else {
            run.adapt.weights(i as u64 - 3).unwrap()
        };
        assert_eq!((f[5], f[6]), (w.lambda_a, w.lambda_e));
        if i < 3 {
            assert_eq!(f[2], 0.0);
        }
    }

    // interrupt after global step 5 and resume into a copy of the outputs
    let part = tempfile::tempdir().unwrap();
    for e in fs::read_dir(full.path()).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), part.path().join(e.file_name())).unwrap();
    }
    fs::remove_file(part.path().join("final.padc")).unwrap();
    let resumed = train(&run, &cfg, &data, part.path(), Some(&part.path().join(checkpoint_name(5)))).unwrap();
    assert_eq!(rows_without_wall(&resumed.metrics), rows);
    assert_eq!(
        fs::read(&out.final_checkpoint).unwrap(),
        fs::read(&resumed.final_checkpoint).unwrap()
    );
}
