use std::fs;
use std::path::Path;

use anyhow::Context;
use pad_core::blockworld::{render_rgb, TaskFamily, TaskSpec, VOCAB_SIZE};
use pad_core::datastore::{generate, Dataset};
use pad_core::padnet::PadConfig;
use pad_core::runtime::{
    self, config_hash, evaluate, plan_strip, scaling_sweep, write_png, AblationSetup, PadPolicy, Rollout, Variant,
};
use pad_core::trainkit::{self, load_checkpoint};
use serde::Serialize;

use crate::{RunConfig, UsageError};

const STRIP_SCALE: usize = 3;

/// `all`, or a comma list of family names and instruction ids.
pub fn parse_tasks(s: &str) -> Result<Vec<usize>, UsageError> {
    if s == "all" {
        return Ok((0..VOCAB_SIZE).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Ok(id) = part.parse::<usize>() {
            if id >= VOCAB_SIZE {
                return Err(UsageError(format!("instruction id {id} out of range (0..{VOCAB_SIZE})")));
            }
            out.push(id);
        } else {
            let fam = TaskFamily::parse(part).map_err(|e| UsageError(e.to_string()))?;
            out.extend(TaskSpec::family_tasks(fam).iter().map(|t| t.instruction));
        }
    }
    if out.is_empty() {
        return Err(UsageError("--tasks selects nothing".into()));
    }
    Ok(out)
}

pub fn parse_variants(s: &str) -> Result<Vec<Variant>, UsageError> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',')
        .map(|v| Variant::parse(v.trim()).map_err(|e| UsageError(e.to_string())))
        .collect()
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (robot, video) = generate(&cfg.data)?;
    let dir = out.join("data");
    Dataset::write(&dir, &robot, &video)?;
    println!(
        "wrote {} robot and {} video episodes to {}",
        robot.len(),
        video.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, data: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let data = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let dir = out.join("train");
    let res = trainkit::train(&cfg.train, &cfg.model, &data, &dir, resume)?;
    println!("final checkpoint {}", res.final_checkpoint.display());
    println!("metrics {}", res.metrics.display());
    Ok(())
}

#[derive(Serialize)]
struct PlanJson {
    state_index: usize,
    target: [f64; 4],
}

#[derive(Serialize)]
struct RolloutJson {
    instruction: usize,
    text: String,
    env_seed: u64,
    success: bool,
    length: u32,
    poses: Vec<[f64; 4]>,
    plans: Vec<PlanJson>,
}

fn save_strips(r: &Rollout, interval: usize, dir: &Path, stem: &str, first_only: bool) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let last = r.trajectory.len() - 1;
    for (n, p) in r.plans.iter().enumerate() {
        let Some(f) = &p.forecast else { continue };
        let cond = render_rgb(&r.trajectory[p.state_index]);
        let realized: Vec<Vec<f32>> = (1..=f.frames.len())
            .map(|j| render_rgb(&r.trajectory[(p.state_index + j * interval).min(last)]))
            .collect();
        let (w, h, px) = plan_strip(&cond, &f.frames, &realized, STRIP_SCALE);
        write_png(&dir.join(format!("{stem}_plan{n:03}.png")), w, h, &px)?;
        if first_only {
            break;
        }
    }
    Ok(())
}

pub fn rollout(cfg: &RunConfig, out: &Path, ckpt: &Path, instruction: usize, env_seed: u64, strip: bool) -> anyhow::Result<()> {
    let task = TaskSpec::from_instruction(instruction).map_err(|e| UsageError(e.to_string()))?;
    let net = load_checkpoint(ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?
        .net;
    let policy = PadPolicy {
        net: &net,
        noise_base: cfg.eval.noise_base(env_seed),
    };
    let r = runtime::rollout(env_seed, &task, cfg.eval.n_distractors, &policy, cfg.eval.max_steps)?;
    let dir = out.join("rollout");
    fs::create_dir_all(&dir)?;
    let json = RolloutJson {
        instruction,
        text: task.text(),
        env_seed,
        success: r.success,
        length: r.length,
        poses: r.trajectory.iter().map(|s| s.pose).collect(),
        plans: r
            .plans
            .iter()
            .map(|p| PlanJson {
                state_index: p.state_index,
                target: p.target,
            })
            .collect(),
    };
    fs::write(dir.join("rollout.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    if strip {
        save_strips(&r, net.config().frame_interval, &dir.join("strips"), &format!("seed{env_seed}"), false)?;
    }
    println!(
        "{:?}: {} after {} steps ({} plans)",
        task.text(),
        if r.success { "success" } else { "failure" },
        r.length,
        r.plans.len()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, ckpt: &Path, strip: bool) -> anyhow::Result<()> {
    let net = load_checkpoint(ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?
        .net;
    let dir = out.join("eval");
    let hash = config_hash(&(net.config(), &cfg.eval));
    let interval = net.config().frame_interval;
    let report = evaluate(
        |seed| PadPolicy {
            net: &net,
            noise_base: cfg.eval.noise_base(seed),
        },
        &cfg.eval,
        &hash,
        |task, seed, r| {
            if strip {
                save_strips(r, interval, &dir.join("strips"), &format!("i{}_seed{seed}", task.instruction), true)
                    .map_err(|e| runtime::RuntimeError::Io(std::io::Error::other(e.to_string())))?;
            }
            Ok(())
        },
    )?;
    report.write(&dir)?;
    print!("{}", report.to_csv());
    println!(
        "overall {}/{} = {:.3}",
        report.total_successes(),
        report.total_trials(),
        report.success_rate()
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path, data: &Path, variants: &[Variant], scaling: bool) -> anyhow::Result<()> {
    let data = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let setup = AblationSetup {
        cfg: cfg.model.clone(),
        run: cfg.train.clone(),
        data,
        eval: cfg.eval.clone(),
        out: out.join("ablate"),
    };
    let mut summary = String::from("variant,trials,successes,rate\n");
    for &v in variants {
        let r = runtime::ablate(v, &setup)?;
        println!("{}: {}/{} = {:.3}", v.name(), r.total_successes(), r.total_trials(), r.success_rate());
        summary += &format!("{},{},{},{}\n", v.name(), r.total_trials(), r.total_successes(), r.success_rate());
    }
    fs::create_dir_all(&setup.out)?;
    fs::write(setup.out.join("summary.csv"), summary)?;
    if scaling {
        let presets: Vec<(String, PadConfig)> = ["mini-64", "mini", "mini-256"]
            .iter()
            .map(|&n| Ok((n.to_string(), PadConfig::preset(n)?.with_depth(cfg.model.depth_enabled))))
            .collect::<Result<_, pad_core::padnet::PadnetError>>()?;
        for row in scaling_sweep(&presets, &setup)? {
            println!(
                "{}: {} params, {:.4} GFLOPs, success {:.3}",
                row.preset, row.params, row.gflops, row.success_rate
            );
        }
    }
    Ok(())
}

pub fn flops(out: &Path, preset: Option<&str>) -> anyhow::Result<()> {
    let names: Vec<&str> = match preset {
        Some(p) => vec![p],
        None => PadConfig::PRESETS.to_vec(),
    };
    let mut csv = String::from("preset,layers,hidden,heads,patch,tokens,gflops\n");
    for name in names {
        let c = PadConfig::preset(name).map_err(|e| UsageError(e.to_string()))?;
        let t = c.count_tokens();
        let gf = c.estimate_flops();
        println!("{name}: {} layers, hidden {}, patch {}, {} tokens, {gf:.2} GFLOPs", c.n_layers, c.hidden, c.patch_i, t.total);
        csv += &format!("{name},{},{},{},{},{},{gf}\n", c.n_layers, c.hidden, c.n_heads, c.patch_i, t.total);
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("flops.csv"), csv)?;
    Ok(())
}
