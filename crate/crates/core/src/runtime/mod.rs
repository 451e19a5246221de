//! Closed-loop execution: joint DDIM planning, receding-horizon rollouts,
//! evaluation reports and the ablation / scaling runners.

mod eval;
mod experiments;
mod strip;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use eval::{config_hash, evaluate, EpisodeLog, EvalReport, EvalSettings, TaskRow, EVAL_HEADER};
pub use experiments::{ablate, scaling_sweep, AblationSetup, SweepRow, Variant, SWEEP_HEADER};
pub use strip::{plan_strip, write_png};

use crate::blockworld::{self, check_success, render_depth, render_rgb, EnvState, TaskSpec, WorldError, V_MAX};
use crate::datastore::DataError;
use crate::diffusion::{ddim_step, make_ddim_ladder, DiffusionError, NoiseSchedule};
use crate::numcore::Tensor;
use crate::padnet::{
    decode_depth, decode_image, denormalize_pose, encode_depth, encode_image, normalize_pose, DenoiseItem,
    ModalityBundle, PadNet, PadnetError, PerModality,
};
use crate::trainkit::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("policy/config mismatch: {0}")]
    Mismatch(String),
    #[error("invalid runtime settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Model(#[from] PadnetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the policy sees: always rendered from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub instruction: usize,
    /// HWC pixels in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub pose: Vec<f32>,
    pub depth: Option<Vec<f32>>,
}

impl Observation {
    pub fn from_state(s: &EnvState, with_depth: bool) -> Self {
        Self {
            instruction: s.task.instruction,
            rgb: render_rgb(s),
            pose: s.pose.iter().map(|&v| v as f32).collect(),
            depth: with_depth.then(|| render_depth(s)),
        }
    }
}

/// Decoded forecast of the next `k` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// `k` HWC frames.
    pub frames: Vec<Vec<f32>>,
    /// `k` poses, clamped to the workspace.
    pub poses: Vec<Vec<f32>>,
    pub depths: Option<Vec<Vec<f32>>>,
    pub denoise_steps: usize,
}

/// Runs the DDIM ladder jointly over every target modality, starting from
/// unit-normal latents drawn with `noise_seed`.
pub fn plan(net: &PadNet<f32>, obs: &Observation, noise_seed: u64) -> Result<PlanResult, RuntimeError> {
    let cfg = net.config();
    if obs.pose.len() != cfg.pose_dim {
        return Err(RuntimeError::Mismatch(format!(
            "observation pose has {} values, model wants {}",
            obs.pose.len(),
            cfg.pose_dim
        )));
    }
    if cfg.depth_enabled && obs.depth.is_none() {
        return Err(RuntimeError::Mismatch("model uses depth but the observation has none".into()));
    }
    let sched = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let ladder = make_ddim_ladder(cfg.diffusion_steps, cfg.n_ddim)?;
    let (g, c, d) = (cfg.latent_size, cfg.latent_channels, cfg.depth_size);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let img_shape = [cfg.k * c, g, g];
    let act_shape = [cfg.k * cfg.pose_dim];
    let dep_shape = [cfg.k, d, d];
    let pose_cond = Tensor::new(&[cfg.pose_dim], normalize_pose(&obs.pose)).map_err(PadnetError::from)?;
    let depth_cond = match (&obs.depth, cfg.depth_enabled) {
        (Some(dm), true) => Some(encode_depth::<f32>(dm, blockworld::IMG_SIZE, cfg)?),
        _ => None,
    };
    let bundle = ModalityBundle {
        instruction: obs.instruction,
        image_cond: encode_image::<f32>(&obs.rgb, cfg)?,
        image_target: Tensor::zeros(&img_shape),
        pose_cond: Some(pose_cond),
        pose_target: Some(Tensor::zeros(&act_shape)),
        depth_target: depth_cond.as_ref().map(|_| Tensor::zeros(&dep_shape)),
        depth_cond,
    };
    bundle.validate(cfg)?;
    let mut z = PerModality {
        image: Some(Tensor::<f32>::randn(&img_shape, 1.0, &mut rng)),
        action: Some(Tensor::<f32>::randn(&act_shape, 1.0, &mut rng)),
        depth: bundle.depth_cond.as_ref().map(|_| Tensor::<f32>::randn(&dep_shape, 1.0, &mut rng)),
    };
    for &(t, t_prev) in &ladder {
        let item = DenoiseItem {
            bundle: &bundle,
            t,
            noised: z.clone(),
        };
        let pred = net.predict(std::slice::from_ref(&item))?.remove(0);
        let step = |zm: &Option<Tensor<f32>>, e: Option<&Tensor<f32>>| -> Result<Option<Tensor<f32>>, RuntimeError> {
            match (zm, e) {
                (Some(zm), Some(e)) => Ok(Some(ddim_step(zm, t, t_prev, e, &sched)?)),
                (None, None) => Ok(None),
                _ => Err(RuntimeError::Mismatch("prediction is missing a modality".into())),
            }
        };
        z = PerModality {
            image: step(&z.image, Some(&pred.image))?,
            action: step(&z.action, pred.action.as_ref())?,
            depth: step(&z.depth, pred.depth.as_ref())?,
        };
    }

    let img = z.image.expect("image always present");
    let frame_len = c * g * g;
    let mut frames = Vec::with_capacity(cfg.k);
    for j in 0..cfg.k {
        let lat = Tensor::new(&[c, g, g], img.data()[j * frame_len..(j + 1) * frame_len].to_vec())
            .map_err(PadnetError::from)?;
        frames.push(decode_image(&lat, cfg)?);
    }
    let act = z.action.expect("action always planned");
    let poses = act.data().chunks(cfg.pose_dim).map(denormalize_pose).collect();
    let depths = match z.depth {
        Some(dz) => {
            let mut v = Vec::with_capacity(cfg.k);
            for j in 0..cfg.k {
                let lat = Tensor::new(&[1, d, d], dz.data()[j * d * d..(j + 1) * d * d].to_vec())
                    .map_err(PadnetError::from)?;
                v.push(decode_depth(&lat, blockworld::IMG_SIZE, cfg)?);
            }
            Some(v)
        }
        None => None,
    };
    Ok(PlanResult {
        frames,
        poses,
        depths,
        denoise_steps: ladder.len(),
    })
}

/// Something that picks the next target pose from the current state.
pub trait Policy {
    /// Target pose for plan cycle `plan_index`, plus the forecast if the
    /// policy makes one.
    fn act(&self, state: &EnvState, plan_index: u64) -> Result<([f64; 4], Option<PlanResult>), RuntimeError>;
}

/// The diffusion policy: executes the first forecast pose.
pub struct PadPolicy<'a> {
    pub net: &'a PadNet<f32>,
    pub noise_base: u64,
}

impl Policy for PadPolicy<'_> {
    fn act(&self, state: &EnvState, plan_index: u64) -> Result<([f64; 4], Option<PlanResult>), RuntimeError> {
        let cfg = self.net.config();
        if cfg.pose_dim != blockworld::POSE_DIM {
            return Err(RuntimeError::Mismatch(format!(
                "model pose_dim {} but the simulator uses {}",
                cfg.pose_dim,
                blockworld::POSE_DIM
            )));
        }
        let obs = Observation::from_state(state, cfg.depth_enabled);
        let p = plan(self.net, &obs, self.noise_base ^ plan_index)?;
        let first = &p.poses[0];
        Ok(([first[0] as f64, first[1] as f64, first[2] as f64, first[3] as f64], Some(p)))
    }
}

/// Oracle that returns the scripted expert's next waypoint.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&self, state: &EnvState, _: u64) -> Result<([f64; 4], Option<PlanResult>), RuntimeError> {
        Ok((blockworld::expert_action(state)?, None))
    }
}

/// Emits the current pose forever.
pub struct HoldPolicy;

impl Policy for HoldPolicy {
    fn act(&self, state: &EnvState, _: u64) -> Result<([f64; 4], Option<PlanResult>), RuntimeError> {
        Ok((state.pose, None))
    }
}

/// One plan cycle of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    /// Index into the trajectory of the state the plan was made from.
    pub state_index: usize,
    pub target: [f64; 4],
    pub forecast: Option<PlanResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub success: bool,
    /// Environment steps taken.
    pub length: u32,
    /// Every visited state, starting with the reset state.
    pub trajectory: Vec<EnvState>,
    pub plans: Vec<PlanRecord>,
}

fn xyz_dist(a: [f64; 4], b: [f64; 4]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Receding-horizon loop: plan, step toward the first forecast pose for at
/// most `ceil(dist / v_max) + 2` steps or until it is reached or motion
/// stalls, then plan again. Ends on success or after `max_steps`.
pub fn rollout(
    env_seed: u64,
    task: &TaskSpec,
    n_distractors: usize,
    policy: &dyn Policy,
    max_steps: u32,
) -> Result<Rollout, RuntimeError> {
    if max_steps == 0 {
        return Err(RuntimeError::Settings("max_steps must be at least 1".into()));
    }
    let mut state = blockworld::reset(env_seed, task, n_distractors)?;
    let mut trajectory = vec![state.clone()];
    let mut plans = Vec::new();
    let mut success = check_success(&state);
    while !success && state.step < max_steps {
        let (target, forecast) = policy.act(&state, plans.len() as u64)?;
        plans.push(PlanRecord {
            state_index: trajectory.len() - 1,
            target,
            forecast,
        });
        let budget = (xyz_dist(state.pose, target) / V_MAX).ceil() as u32 + 2;
        for _ in 0..budget {
            let before = state.pose;
            state.step(target);
            trajectory.push(state.clone());
            success = check_success(&state);
            let reached = xyz_dist(state.pose, target) < 1e-9 && (state.pose[3] - target[3].clamp(0.0, 1.0)).abs() < 1e-9;
            if success || state.step >= max_steps || reached || state.pose == before {
                break;
            }
        }
    }
    Ok(Rollout {
        success,
        length: state.step,
        trajectory,
        plans,
    })
}
