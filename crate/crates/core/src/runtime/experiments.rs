use std::fmt;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::eval::config_hash;
use super::{evaluate, EvalReport, EvalSettings, PadPolicy, RuntimeError};
use crate::datastore::Dataset;
use crate::padnet::PadConfig;
use crate::trainkit::{load_checkpoint, train, TrainRun};

pub const SWEEP_HEADER: &str = "preset,params,gflops,success_rate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No image loss; image targets drop out of the objective.
    NoImg,
    /// No video pretraining and no video in the adapt mix.
    NoCotrain,
    /// Depth enabled end to end.
    WithDepth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoImg, Variant::NoCotrain, Variant::WithDepth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoImg => "no_img",
            Variant::NoCotrain => "no_cotrain",
            Variant::WithDepth => "with_depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self, RuntimeError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RuntimeError::Settings(format!("unknown variant {s:?}")))
    }

    /// Model and training settings for this variant.
    pub fn apply(self, cfg: &PadConfig, run: &TrainRun) -> (PadConfig, TrainRun) {
        let mut cfg = cfg.clone();
        let mut run = run.clone();
        match self {
            Variant::Full => {}
            Variant::NoImg => {
                run.pretrain.ramp.lambda_i = 0.0;
                run.adapt.ramp.lambda_i = 0.0;
                // pretraining optimizes only the image loss, so nothing is left
                run.pretrain.total_steps = 0;
            }
            Variant::NoCotrain => {
                run.pretrain.total_steps = 0;
                run.adapt.video_fraction = 0.0;
            }
            Variant::WithDepth => cfg.depth_enabled = true,
        }
        (cfg, run)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared inputs of the training-plus-evaluation runners.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub cfg: PadConfig,
    pub run: TrainRun,
    pub data: Dataset,
    pub eval: EvalSettings,
    pub out: PathBuf,
}

/// Trains `variant` into `out/<variant>` and evaluates the final weights.
pub fn ablate(variant: Variant, setup: &AblationSetup) -> Result<EvalReport, RuntimeError> {
    let (cfg, run) = variant.apply(&setup.cfg, &setup.run);
    let dir = setup.out.join(variant.name());
    train_and_eval(&cfg, &run, setup, &dir)
}

fn train_and_eval(cfg: &PadConfig, run: &TrainRun, setup: &AblationSetup, dir: &std::path::Path) -> Result<EvalReport, RuntimeError> {
    let trained = train(run, cfg, &setup.data, dir, None)?;
    let net = load_checkpoint(&trained.final_checkpoint)?.net;
    let hash = config_hash(&(cfg, run, &setup.eval));
    let eval = &setup.eval;
    let report = evaluate(
        |seed| PadPolicy {
            net: &net,
            noise_base: eval.noise_base(seed),
        },
        eval,
        &hash,
        |_, _, _| Ok(()),
    )?;
    report.write(dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: String,
    pub params: usize,
    pub gflops: f64,
    pub success_rate: f64,
}

/// Trains and evaluates each named config, writing `scaling.csv` under
/// `setup.out`.
pub fn scaling_sweep(presets: &[(String, PadConfig)], setup: &AblationSetup) -> Result<Vec<SweepRow>, RuntimeError> {
    let mut rows = Vec::with_capacity(presets.len());
    for (name, cfg) in presets {
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        let dir = setup.out.join("scaling").join(safe);
        let report = train_and_eval(cfg, &setup.run, setup, &dir)?;
        let params = crate::padnet::PadNet::<f32>::init(cfg, setup.run.init_seed)?.params().numel();
        rows.push(SweepRow {
            preset: name.clone(),
            params,
            gflops: cfg.estimate_flops(),
            success_rate: report.success_rate(),
        });
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv += &format!("{},{},{},{}\n", r.preset, r.params, r.gflops, r.success_rate);
    }
    fs::create_dir_all(&setup.out)?;
    fs::write(setup.out.join("scaling.csv"), csv)?;
    Ok(rows)
}
