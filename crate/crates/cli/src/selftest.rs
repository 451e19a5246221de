use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pad_core::blockworld::{expert_episode, reset, TaskSpec, EXPERT_MAX_STEPS};
use pad_core::datastore::{generate, mixed_batch, GenSpec};
use pad_core::diffusion::{ddim_step, lambda_schedule, make_ddim_ladder, q_sample, LambdaRamp, NoiseSchedule};
use pad_core::numcore::{op_suite, Tensor};
use pad_core::padnet::probe::{network_grad_check, perturb, random_bundle, random_items};
use pad_core::padnet::{PadConfig, PadNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Check {
    name: &'static str,
    value: f64,
    limit: f64,
}

fn ddim_roundtrip(seed: u64) -> anyhow::Result<f64> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
    let mut z = q_sample(&z0, 1000, &eps, &sched)?;
    for (t, tp) in make_ddim_ladder(1000, 75)? {
        z = ddim_step(&z, t, tp, &eps, &sched)?;
    }
    Ok(z.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn worst_mask_gap(seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (action, depth) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = PadConfig::tiny().with_depth(depth);
        let mut net = PadNet::<f32>::init(&cfg, seed)?;
        perturb(&mut net, 0.1, seed + 1);
        let bundles = vec![random_bundle::<f32, _>(&cfg, action, depth, &mut rng)];
        let items = random_items(&bundles, &mut rng);
        worst = worst.max(net.mask_gap(&items[0])?);
    }
    Ok(worst)
}

fn lambda_endpoints() -> anyhow::Result<f64> {
    let ramp = LambdaRamp::default();
    let a = lambda_schedule(0, 100, &ramp)?;
    let b = lambda_schedule(100, 100, &ramp)?;
    Ok((a.lambda_a - 0.0).abs().max((b.lambda_a - 2.0).abs()).max((a.lambda_i - 1.0).abs()))
}

fn batch_composition(seed: u64) -> anyhow::Result<f64> {
    let spec = GenSpec {
        robot_episodes: 4,
        video_episodes: 4,
        with_depth: false,
        seed,
        ..GenSpec::default()
    };
    let (robot, video) = generate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = mixed_batch(&robot, &video, 16, 0.25, 3, 3, &mut rng)?;
    let unlabeled = batch.iter().filter(|e| !e.has_action()).count();
    Ok((unlabeled as f64 - 4.0).abs())
}

fn expert_failures() -> anyhow::Result<f64> {
    let mut fails = 0;
    for seed in 0..50 {
        let task = TaskSpec::from_instruction(seed as usize % 4)?;
        let (_, ok) = expert_episode(reset(seed, &task, 1)?, EXPERT_MAX_STEPS)?;
        fails += usize::from(!ok);
    }
    Ok(fails as f64)
}

/// Runs the quick invariant suite, printing one line per check and writing
/// `selftest.txt` under `out`.
pub fn run(out: &Path, seed: u64) -> anyhow::Result<()> {
    let ops = op_suite::run(5, seed)?.into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    let xl2 = PadConfig::xl2();
    let checks = [
        Check {
            name: "primitive gradients (rel err)",
            value: ops,
            limit: 1e-4,
        },
        Check {
            name: "network gradients (rel err)",
            value: network_grad_check(&PadConfig::tiny(), 2, seed)?,
            limit: 1e-3,
        },
        Check {
            name: "ddim reconstruction with true noise",
            value: ddim_roundtrip(seed)?,
            limit: 1e-5,
        },
        Check {
            name: "masked vs compact attention",
            value: worst_mask_gap(seed)?,
            limit: 1e-5,
        },
        Check {
            name: "XL/2 token count minus 257",
            value: (xl2.count_tokens().total as f64 - 257.0).abs(),
            limit: 0.0,
        },
        Check {
            name: "XL/2 GFLOPs relative to 119.1",
            value: (xl2.estimate_flops() / 119.1 - 1.0).abs(),
            limit: 0.2,
        },
        Check {
            name: "loss weight endpoints",
            value: lambda_endpoints()?,
            limit: 1e-12,
        },
        Check {
            name: "video examples in a 16/0.25 batch minus 4",
            value: batch_composition(seed)?,
            limit: 0.0,
        },
        Check {
            name: "expert reach failures in 50 seeds",
            value: expert_failures()?,
            limit: 0.0,
        },
    ];
    let mut report = String::new();
    let mut failed = 0;
    for c in &checks {
        let ok = c.value <= c.limit;
        failed += usize::from(!ok);
        writeln!(
            report,
            "{} {}: {:.3e} (limit {:.1e})",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        )?;
    }
    print!("{report}");
    fs::create_dir_all(out)?;
    fs::write(out.join("selftest.txt"), &report)?;
    if failed > 0 {
        anyhow::bail!("{failed} self-test checks failed");
    }
    Ok(())
}
