//! Training loop: noise sampling, weighted multi-modal loss, AdamW,
//! two-phase schedule, metrics and resumable checkpoints.

mod optim;
mod optimum;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamWConfig, OptimizerState};
pub use optimum::{gaussian_optimum_gap, OptimumCheck};

use crate::datastore::{mixed_batch, DataError, Dataset, TrainingExample};
use crate::diffusion::{q_sample, lambda_schedule, DiffusionError, LambdaRamp, LossWeights, NoiseSchedule};
use crate::numcore::{Graph, Tensor, TensorError};
use crate::padnet::{
    read_checkpoint, write_checkpoint, Checkpoint, DenoiseItem, ModalityBundle, PadConfig, PadNet, PadnetError,
    PerModality,
};

pub const METRICS_HEADER: &str = "step,loss_I,loss_A,loss_E,loss_total,lambda_A,lambda_E,wall_ms";
const OPTIMIZER_TAG: &[u8; 4] = b"OPTM";
const PROGRESS_TAG: &[u8; 4] = b"TRST";
const EMA_TAG: &[u8; 4] = b"EMAW";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: image {image:?} action {action:?} depth {depth:?}")]
    NonFinite {
        step: u64,
        image: Option<f64>,
        action: Option<f64>,
        depth: Option<f64>,
    },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] PadnetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Adapt => 2,
        }
    }
}

/// One training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub total_steps: u64,
    pub batch: usize,
    pub optim: AdamWConfig,
    /// Share of each batch drawn from video-only episodes.
    pub video_fraction: f64,
    /// Steps over which the action/depth weights ramp; the adapt phase
    /// length by default.
    pub ramp_steps: u64,
    pub ramp: LambdaRamp,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Exponential moving average of the weights; off when `None`.
    pub ema_decay: Option<f64>,
}

impl TrainConfig {
    /// 3k video-only steps with only the image loss active.
    pub fn pretrain_default() -> Self {
        Self {
            phase: Phase::Pretrain,
            total_steps: 3000,
            batch: 16,
            optim: AdamWConfig::default(),
            video_fraction: 1.0,
            ramp_steps: 1,
            ramp: LambdaRamp::default(),
            seed: 0,
            checkpoint_every: 1000,
            ema_decay: None,
        }
    }

    /// 5k mixed steps with a quarter video and the action/depth ramp.
    pub fn adapt_default() -> Self {
        Self {
            phase: Phase::Adapt,
            total_steps: 5000,
            video_fraction: 0.25,
            ramp_steps: 5000,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optim;
        let bad = if self.batch == 0 {
            Some("batch must be positive".to_string())
        } else if !(0.0..=1.0).contains(&self.video_fraction) {
            Some(format!("video_fraction {} outside [0, 1]", self.video_fraction))
        } else if self.ramp_steps == 0 {
            Some("ramp_steps must be positive".into())
        } else if !(o.lr > 0.0 && o.lr.is_finite())
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.weight_decay < 0.0
            || o.eps <= 0.0
        {
            Some(format!("optimizer settings {o:?}"))
        } else if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            Some("ema_decay must lie in [0, 1)".into())
        } else if self.ramp.lambda_i < 0.0 || self.ramp.start < 0.0 || self.ramp.end < 0.0 {
            Some("loss weights must be non-negative".into())
        } else {
            None
        };
        match bad {
            Some(m) => Err(TrainError::Config(format!("{:?}: {m}", self.phase))),
            None => Ok(()),
        }
    }

    /// Loss weights at a step of this phase. Pretraining keeps the
    /// action/depth weights at zero.
    pub fn weights(&self, step: u64) -> Result<LossWeights, TrainError> {
        Ok(match self.phase {
            Phase::Pretrain => LossWeights::new(self.ramp.lambda_i, 0.0, 0.0),
            Phase::Adapt => lambda_schedule(step, self.ramp_steps, &self.ramp)?,
        })
    }
}

/// Both phases of a training run. A phase with zero steps is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub init_seed: u64,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            init_seed: 0,
            pretrain: TrainConfig::pretrain_default(),
            adapt: TrainConfig::adapt_default(),
        }
    }
}

impl TrainRun {
    pub fn phase(&self, p: Phase) -> &TrainConfig {
        match p {
            Phase::Pretrain => &self.pretrain,
            Phase::Adapt => &self.adapt,
        }
    }

    /// Global step of the first step of `p`.
    pub fn offset(&self, p: Phase) -> u64 {
        match p {
            Phase::Pretrain => 0,
            Phase::Adapt => self.pretrain.total_steps,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.pretrain.total_steps + self.adapt.total_steps
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.pretrain.phase != Phase::Pretrain || self.adapt.phase != Phase::Adapt {
            return Err(TrainError::Config("phase tags out of order".into()));
        }
        if self.total_steps() == 0 {
            return Err(TrainError::Config("no training steps".into()));
        }
        self.pretrain.validate()?;
        self.adapt.validate()
    }
}

/// Where a run stands; stored in every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub phase: Phase,
    /// Steps completed within `phase`.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: PerModality<Option<f64>>,
    pub total: f64,
    pub weights: LossWeights,
    pub wall_ms: f64,
}

impl StepMetrics {
    /// CSV row; absent modalities log as 0.
    pub fn csv_row(&self) -> String {
        let l = |v: Option<f64>| v.unwrap_or(0.0);
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.step,
            l(self.loss.image),
            l(self.loss.action),
            l(self.loss.depth),
            self.total,
            self.weights.lambda_a,
            self.weights.lambda_e,
            self.wall_ms
        )
    }
}

/// Independent, reproducible stream per `(seed, phase, step)`.
pub fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase.stream() << 48) ^ step);
    rng
}

/// Forward noising of one example: a timestep uniform in `[1, T]` and unit
/// normal noise for every present modality.
pub fn noise_example<R: Rng + ?Sized>(
    bundle: &ModalityBundle<f32>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(usize, PerModality<Option<Tensor<f32>>>, PerModality<Option<Tensor<f32>>>), TrainError> {
    let t = rng.gen_range(1..=sched.steps());
    let mut draw = |x: Option<&Tensor<f32>>| -> Result<_, TrainError> {
        match x {
            Some(x0) => {
                let e = Tensor::randn(x0.shape(), 1.0, rng);
                let z = q_sample(x0, t, &e, sched)?;
                Ok((Some(e), Some(z)))
            }
            None => Ok((None, None)),
        }
    };
    let (ei, zi) = draw(Some(&bundle.image_target))?;
    let (ea, za) = draw(bundle.pose_target.as_ref())?;
    let (ee, ze) = draw(bundle.depth_target.as_ref())?;
    Ok((
        t,
        PerModality {
            image: ei,
            action: ea,
            depth: ee,
        },
        PerModality {
            image: zi,
            action: za,
            depth: ze,
        },
    ))
}

/// Loss and gradients of one batch, without touching the parameters.
pub fn batch_gradients(
    net: &PadNet<f32>,
    bundles: &[ModalityBundle<f32>],
    w: &LossWeights,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(PerModality<Option<f64>>, f64, Vec<Option<Tensor<f32>>>), TrainError> {
    if bundles.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut ts = Vec::with_capacity(bundles.len());
    let mut eps = Vec::with_capacity(bundles.len());
    let mut noised = Vec::with_capacity(bundles.len());
    for b in bundles {
        let (t, e, z) = noise_example(b, sched, rng)?;
        ts.push(t);
        eps.push(e);
        noised.push(z);
    }
    let items: Vec<DenoiseItem<'_, f32>> = bundles
        .iter()
        .zip(ts)
        .zip(noised)
        .map(|((bundle, t), noised)| DenoiseItem { bundle, t, noised })
        .collect();
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let loss = net.batch_loss(&mut g, &p, &items, &eps, w)?;
    let total = g.value(loss.total).item() as f64;
    let grads = if g.requires_grad(loss.total) {
        g.backward(loss.total)?;
        p.vars.iter().map(|&v| g.take_grad(v)).collect()
    } else {
        vec![None; p.vars.len()]
    };
    Ok((loss.per_modality, total, grads))
}

/// One optimizer step on `batch`. Returns the losses measured before the
/// update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut PadNet<f32>,
    opt: &mut OptimizerState,
    adam: &AdamWConfig,
    batch: &[TrainingExample],
    sched: &NoiseSchedule,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepMetrics, TrainError> {
    let t0 = Instant::now();
    let cfg = net.config().clone();
    let bundles = batch
        .iter()
        .map(|ex| ex.to_bundle::<f32>(&cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let (loss, total, grads) = match batch_gradients(net, &bundles, w, sched, rng) {
        Err(TrainError::Model(PadnetError::Tensor(TensorError::NonFinite(_)))) => {
            return Err(TrainError::NonFinite {
                step,
                image: None,
                action: None,
                depth: None,
            })
        }
        r => r?,
    };
    if !total.is_finite() || loss.iter().any(|l| l.is_some_and(|v| !v.is_finite())) {
        return Err(TrainError::NonFinite {
            step,
            image: loss.image,
            action: loss.action,
            depth: loss.depth,
        });
    }
    opt.update(adam, net.params_mut(), &grads)?;
    Ok(StepMetrics {
        step,
        loss,
        total,
        weights: *w,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn schedule_for(cfg: &PadConfig) -> Result<NoiseSchedule, TrainError> {
    Ok(NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?)
}

/// Writes parameters, optimizer moments and run progress.
pub fn save_checkpoint(
    path: &Path,
    net: &PadNet<f32>,
    opt: Option<&OptimizerState>,
    progress: Option<TrainProgress>,
    ema: Option<&PadNet<f32>>,
) -> Result<(), TrainError> {
    let mut chunks = Vec::new();
    if let Some(o) = opt {
        chunks.push((*OPTIMIZER_TAG, o.to_bytes()));
    }
    if let Some(p) = progress {
        let json = serde_json::to_vec(&p).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        chunks.push((*PROGRESS_TAG, json));
    }
    if let Some(e) = ema {
        let inner = Checkpoint {
            config: e.config().clone(),
            params: e.params().clone(),
            chunks: Vec::new(),
        };
        chunks.push((*EMA_TAG, inner.to_bytes()?));
    }
    let ckpt = Checkpoint {
        config: net.config().clone(),
        params: net.params().clone(),
        chunks,
    };
    write_checkpoint(path, &ckpt)?;
    Ok(())
}

/// Everything a checkpoint can hold.
pub struct LoadedCheckpoint {
    pub net: PadNet<f32>,
    pub optimizer: Option<OptimizerState>,
    pub progress: Option<TrainProgress>,
    pub ema: Option<PadNet<f32>>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let ckpt: Checkpoint<f32> = read_checkpoint(path)?;
    let optimizer = ckpt.chunk(OPTIMIZER_TAG).map(OptimizerState::from_bytes).transpose()?;
    let progress = ckpt
        .chunk(PROGRESS_TAG)
        .map(|b| serde_json::from_slice(b).map_err(|e| TrainError::Checkpoint(e.to_string())))
        .transpose()?;
    let ema = match ckpt.chunk(EMA_TAG) {
        Some(b) => {
            let inner: Checkpoint<f32> = Checkpoint::from_bytes(b)?;
            Some(PadNet::from_params(&inner.config, inner.params)?)
        }
        None => None,
    };
    let net = PadNet::from_params(&ckpt.config, ckpt.params)?;
    if let Some(o) = &optimizer {
        let fits = o.m.len() == net.params().len()
            && o.m.iter().zip(net.params().iter()).all(|(m, (_, _, t))| m.len() == t.numel());
        if !fits {
            return Err(TrainError::Checkpoint("optimizer state does not match the parameters".into()));
        }
    }
    Ok(LoadedCheckpoint {
        net,
        optimizer,
        progress,
        ema,
    })
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_name(global_step: u64) -> String {
    format!("ckpt_{global_step:06}.padc")
}

fn ema_update(ema: &mut PadNet<f32>, net: &PadNet<f32>, decay: f64) {
    let d = decay as f32;
    for i in 0..net.params().len() {
        let src = net.params().tensor(i).data();
        for (e, &w) in ema.params_mut().tensor_mut(i).data_mut().iter_mut().zip(src) {
            *e = d * *e + (1.0 - d) * w;
        }
    }
}

/// Runs pretraining then adaptation, writing `metrics.csv`, periodic
/// checkpoints and `final.padc` under `out`. With `resume`, training picks
/// up from the checkpoint's progress and metrics rows past it are dropped.
pub fn train(
    run: &TrainRun,
    cfg: &PadConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    run.validate()?;
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let sched = schedule_for(cfg)?;
    let metrics_path = out.join("metrics.csv");

    let (mut net, mut opt, start, mut ema) = match resume {
        Some(p) => {
            let l = load_checkpoint(p)?;
            if l.net.config() != cfg {
                return Err(TrainError::Checkpoint("checkpoint config differs from the run config".into()));
            }
            let opt = l.optimizer.ok_or_else(|| TrainError::Checkpoint("no optimizer state".into()))?;
            let progress = l.progress.ok_or_else(|| TrainError::Checkpoint("no training progress".into()))?;
            (l.net, opt, progress, l.ema)
        }
        None => {
            let net = PadNet::<f32>::init(cfg, run.init_seed)?;
            let opt = OptimizerState::new(net.params());
            (
                net,
                opt,
                TrainProgress {
                    phase: Phase::Pretrain,
                    step: 0,
                },
                None,
            )
        }
    };
    let start_global = run.offset(start.phase) + start.step;

    let mut rows = vec![METRICS_HEADER.to_string()];
    if resume.is_some() && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)?;
        rows.extend(
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < start_global))
                .map(str::to_string),
        );
    }
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    for r in &rows {
        writeln!(metrics, "{r}")?;
    }

    for phase in [Phase::Pretrain, Phase::Adapt] {
        if phase < start.phase {
            continue;
        }
        let tc = run.phase(phase);
        let first = if phase == start.phase { start.step } else { 0 };
        if tc.ema_decay.is_some() && ema.is_none() {
            ema = Some(PadNet::from_params(cfg, net.params().clone())?);
        }
        for step in first..tc.total_steps {
            let global = run.offset(phase) + step;
            let mut rng = step_rng(tc.seed, phase, step);
            let batch = mixed_batch(
                &data.robot,
                &data.video,
                tc.batch,
                tc.video_fraction,
                cfg.k,
                cfg.frame_interval,
                &mut rng,
            )?;
            let w = tc.weights(step)?;
            let m = train_step(&mut net, &mut opt, &tc.optim, &batch, &sched, &w, &mut rng, global)?;
            if let (Some(d), Some(e)) = (tc.ema_decay, ema.as_mut()) {
                ema_update(e, &net, d);
            }
            writeln!(metrics, "{}", m.csv_row())?;
            let done = step + 1;
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.total_steps {
                metrics.flush()?;
                let progress = TrainProgress { phase, step: done };
                save_checkpoint(&out.join(checkpoint_name(global + 1)), &net, Some(&opt), Some(progress), ema.as_ref())?;
            }
        }
    }
    metrics.flush()?;
    let final_path = out.join("final.padc");
    let progress = TrainProgress {
        phase: Phase::Adapt,
        step: run.adapt.total_steps,
    };
    // with EMA on, the exported weights are the averaged ones
    match &ema {
        Some(e) => save_checkpoint(&final_path, e, Some(&opt), Some(progress), Some(&net))?,
        None => save_checkpoint(&final_path, &net, Some(&opt), Some(progress), None)?,
    }
    Ok(TrainOutput {
        final_checkpoint: final_path,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests;
