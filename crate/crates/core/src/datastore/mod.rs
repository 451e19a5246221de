//! Episode files, windowed example extraction and the mixed robot/video
//! batch sampler.
//!
//! `PADE` layout (little endian): magic, `u32` version, `u32` instruction
//! id, `u32` length `T`, `u8` flags (bit 0 poses, bit 1 depth), RGB as `u8`
//! (`T * 32 * 32 * 3`), then depth as `f32` (`T * 32 * 32`) and poses as
//! `f32` (`T * pose_dim`) when flagged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{self, EnvState, TaskSpec, EXPERT_MAX_STEPS, IMG_CHANNELS, IMG_SIZE};
use crate::numcore::{Scalar, Tensor};
use crate::padnet::{encode_depth, encode_image, normalize_pose, ModalityBundle, PadConfig, PadnetError};

pub const EPISODE_MAGIC: &[u8; 4] = b"PADE";
pub const EPISODE_VERSION: u32 = 1;
pub const FRAME_LEN: usize = IMG_SIZE * IMG_SIZE * IMG_CHANNELS;
pub const DEPTH_LEN: usize = IMG_SIZE * IMG_SIZE;
const HEADER_LEN: usize = 17;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("not an episode file (bad magic)")]
    Magic,
    #[error("unsupported episode version {0}")]
    Version(u32),
    #[error("episode payload has {got} bytes, expected {want}")]
    Length { got: usize, want: usize },
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error("dataset index: {0}")]
    Index(String),
    #[error("{0} source is empty but has a nonzero share of the batch")]
    EmptySource(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] PadnetError),
    #[error(transparent)]
    World(#[from] blockworld::WorldError),
}

/// One recorded trajectory. Video-only episodes carry neither poses nor
/// depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub instruction: u32,
    /// `T` frames of `32 x 32 x 3` bytes.
    pub rgb: Vec<u8>,
    /// `T` maps of `32 x 32` heights.
    pub depth: Option<Vec<f32>>,
    /// `T` poses of `pose_dim` values.
    pub poses: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Robot,
    Video,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rgb.len() / FRAME_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn kind(&self) -> EpisodeKind {
        if self.poses.is_some() {
            EpisodeKind::Robot
        } else {
            EpisodeKind::Video
        }
    }

    pub fn pose_dim(&self) -> Option<usize> {
        self.poses.as_ref().map(|p| p.len() / self.len().max(1))
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.rgb[t * FRAME_LEN..(t + 1) * FRAME_LEN]
    }

    /// Frame `t` as floats in `[0, 1]`.
    pub fn frame_f32(&self, t: usize) -> Vec<f32> {
        self.frame(t).iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn pose(&self, t: usize) -> Option<&[f32]> {
        let d = self.pose_dim()?;
        self.poses.as_ref().map(|p| &p[t * d..(t + 1) * d])
    }

    pub fn depth_map(&self, t: usize) -> Option<&[f32]> {
        self.depth.as_ref().map(|d| &d[t * DEPTH_LEN..(t + 1) * DEPTH_LEN])
    }

    /// The same frames without poses or depth.
    pub fn video_only(&self) -> Self {
        Self {
            instruction: self.instruction,
            rgb: self.rgb.clone(),
            depth: None,
            poses: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let t = self.len();
        if t < 2 || self.rgb.len() != t * FRAME_LEN {
            return Err(DataError::Invalid(format!("need at least 2 whole frames, got {} bytes", self.rgb.len())));
        }
        if let Some(d) = &self.depth {
            if d.len() != t * DEPTH_LEN {
                return Err(DataError::Invalid("depth length differs from frame count".into()));
            }
            if self.poses.is_none() {
                return Err(DataError::Invalid("depth without poses".into()));
            }
        }
        if let Some(p) = &self.poses {
            if p.is_empty() || p.len() % t != 0 {
                return Err(DataError::Invalid("pose length is not a multiple of the frame count".into()));
            }
        }
        let finite = |v: &Option<Vec<f32>>| v.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()));
        if !finite(&self.depth) || !finite(&self.poses) {
            return Err(DataError::Invalid("non-finite value".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        self.validate()?;
        let t = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + self.rgb.len());
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.instruction.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.push(u8::from(self.poses.is_some()) | (u8::from(self.depth.is_some()) << 1));
        out.extend_from_slice(&self.rgb);
        for v in self.depth.iter().chain(self.poses.iter()).flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DataError> {
        if b.len() < 4 || &b[..4] != EPISODE_MAGIC {
            return Err(DataError::Magic);
        }
        if b.len() < HEADER_LEN {
            return Err(DataError::Length {
                got: b.len(),
                want: HEADER_LEN,
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != EPISODE_VERSION {
            return Err(DataError::Version(version));
        }
        let instruction = u32_at(8);
        let t = u32_at(12) as usize;
        let flags = b[16];
        let (has_pose, has_depth) = (flags & 1 != 0, flags & 2 != 0);
        let body = &b[HEADER_LEN..];
        let rgb_len = t * FRAME_LEN;
        let depth_len = if has_depth { t * DEPTH_LEN * 4 } else { 0 };
        let fixed = rgb_len + depth_len;
        let pose_bytes = body.len().saturating_sub(fixed);
        let bad_len = body.len() < fixed
            || (has_pose && (pose_bytes == 0 || t == 0 || !pose_bytes.is_multiple_of(4 * t)))
            || (!has_pose && pose_bytes != 0);
        if bad_len {
            let want = if has_pose { fixed + 4 * t } else { fixed };
            return Err(DataError::Length { got: body.len(), want });
        }
        let floats = |s: &[u8]| -> Vec<f32> {
            s.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let ep = Self {
            instruction,
            rgb: body[..rgb_len].to_vec(),
            depth: has_depth.then(|| floats(&body[rgb_len..fixed])),
            poses: has_pose.then(|| floats(&body[fixed..])),
        };
        ep.validate()?;
        Ok(ep)
    }
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<(), DataError> {
    fs::write(path, ep.to_bytes()?)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, DataError> {
    Episode::from_bytes(&fs::read(path)?)
}

/// Records a scripted-expert episode from `state`, rendering every visited
/// state. Returns `None` when the expert fails within the step budget.
pub fn record_expert_episode(state: EnvState, with_depth: bool, max_steps: usize) -> Result<Option<Episode>, DataError> {
    let (states, ok) = blockworld::expert_episode(state, max_steps)?;
    if !ok {
        return Ok(None);
    }
    let mut rgb = Vec::with_capacity(states.len() * FRAME_LEN);
    let mut poses = Vec::with_capacity(states.len() * blockworld::POSE_DIM);
    let mut depth = with_depth.then(|| Vec::with_capacity(states.len() * DEPTH_LEN));
    for s in &states {
        rgb.extend(blockworld::render_rgb(s).iter().map(|&v| quantize(v)));
        poses.extend(s.pose.iter().map(|&v| v as f32));
        if let Some(d) = depth.as_mut() {
            d.extend(blockworld::render_depth(s));
        }
    }
    Ok(Some(Episode {
        instruction: states[0].task.instruction as u32,
        rgb,
        depth,
        poses: Some(poses),
    }))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Condition index and clamped target indices `s + j i`, `j = 1..=k`.
pub fn window_indices(s: usize, k: usize, i: usize, len: usize) -> Vec<usize> {
    (1..=k).map(|j| (s + j * i).min(len - 1)).collect()
}

/// A condition step and its `k` targets, already in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub instruction: usize,
    pub start: usize,
    pub targets: Vec<usize>,
    /// Condition frame, HWC in `[0, 1]`.
    pub cond_rgb: Vec<f32>,
    pub target_rgb: Vec<Vec<f32>>,
    pub cond_pose: Option<Vec<f32>>,
    pub target_pose: Option<Vec<Vec<f32>>>,
    pub cond_depth: Option<Vec<f32>>,
    pub target_depth: Option<Vec<Vec<f32>>>,
}

impl TrainingExample {
    pub fn has_action(&self) -> bool {
        self.cond_pose.is_some()
    }

    pub fn has_depth(&self) -> bool {
        self.cond_depth.is_some()
    }

    /// Encodes into network latents. Depth is dropped when the config has no
    /// depth segment; poses are normalized to `[-1, 1]`.
    pub fn to_bundle<S: Scalar>(&self, cfg: &PadConfig) -> Result<ModalityBundle<S>, DataError> {
        let g = cfg.latent_size;
        let c = cfg.latent_channels;
        let image_cond = encode_image::<S>(&self.cond_rgb, cfg)?;
        let mut tgt = Vec::with_capacity(cfg.k * c * g * g);
        for f in &self.target_rgb {
            tgt.extend_from_slice(encode_image::<S>(f, cfg)?.data());
        }
        let image_target = Tensor::new(&[cfg.k * c, g, g], tgt).map_err(PadnetError::from)?;
        let pose = |p: &[f32]| -> Result<Tensor<S>, DataError> {
            if p.len() != cfg.pose_dim {
                return Err(DataError::Invalid(format!("pose of {} values, config wants {}", p.len(), cfg.pose_dim)));
            }
            let v: Vec<S> = normalize_pose(p).into_iter().map(|x| S::lit(x as f64)).collect();
            Ok(Tensor::new(&[cfg.pose_dim], v).map_err(PadnetError::from)?)
        };
        let (pose_cond, pose_target) = match (&self.cond_pose, &self.target_pose) {
            (Some(pc), Some(pt)) => {
                let mut v = Vec::with_capacity(cfg.k * cfg.pose_dim);
                for p in pt {
                    v.extend_from_slice(pose(p)?.data());
                }
                (
                    Some(pose(pc)?),
                    Some(Tensor::new(&[cfg.k * cfg.pose_dim], v).map_err(PadnetError::from)?),
                )
            }
            _ => (None, None),
        };
        let (depth_cond, depth_target) = match (&self.cond_depth, &self.target_depth, cfg.depth_enabled) {
            (Some(dc), Some(dt), true) => {
                let d = cfg.depth_size;
                let mut v = Vec::with_capacity(cfg.k * d * d);
                for m in dt {
                    v.extend_from_slice(encode_depth::<S>(m, IMG_SIZE, cfg)?.data());
                }
                (
                    Some(encode_depth::<S>(dc, IMG_SIZE, cfg)?),
                    Some(Tensor::new(&[cfg.k, d, d], v).map_err(PadnetError::from)?),
                )
            }
            _ => (None, None),
        };
        Ok(ModalityBundle {
            instruction: self.instruction,
            image_cond,
            image_target,
            pose_cond,
            pose_target,
            depth_cond,
            depth_target,
        })
    }
}

/// Example with condition at `s`.
pub fn window_at(ep: &Episode, s: usize, k: usize, i: usize) -> Result<TrainingExample, DataError> {
    let len = ep.len();
    if len == 0 {
        return Err(DataError::Invalid("empty episode".into()));
    }
    if k == 0 || i == 0 || s >= len {
        return Err(DataError::Invalid(format!("window s={s} k={k} i={i} over {len} frames")));
    }
    let targets = window_indices(s, k, i, len);
    let poses = |idx: usize| ep.pose(idx).map(|p| p.to_vec());
    let depth = |idx: usize| ep.depth_map(idx).map(|d| d.to_vec());
    Ok(TrainingExample {
        instruction: ep.instruction as usize,
        start: s,
        cond_rgb: ep.frame_f32(s),
        target_rgb: targets.iter().map(|&t| ep.frame_f32(t)).collect(),
        cond_pose: poses(s),
        target_pose: ep.poses.as_ref().map(|_| targets.iter().filter_map(|&t| poses(t)).collect()),
        cond_depth: depth(s),
        target_depth: ep.depth.as_ref().map(|_| targets.iter().filter_map(|&t| depth(t)).collect()),
        targets,
    })
}

/// Example with a uniformly drawn condition step.
pub fn sample_window<R: Rng + ?Sized>(ep: &Episode, k: usize, i: usize, rng: &mut R) -> Result<TrainingExample, DataError> {
    if ep.is_empty() {
        return Err(DataError::Invalid("empty episode".into()));
    }
    let s = rng.gen_range(0..ep.len());
    window_at(ep, s, k, i)
}

/// `floor(batch * video_fraction)` video-only examples and robot examples
/// for the rest, in shuffled order.
pub fn mixed_batch<R: Rng + ?Sized>(
    robot: &[Episode],
    video: &[Episode],
    batch: usize,
    video_fraction: f64,
    k: usize,
    i: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>, DataError> {
    if !(0.0..=1.0).contains(&video_fraction) {
        return Err(DataError::Invalid(format!("video fraction {video_fraction}")));
    }
    let n_video = (batch as f64 * video_fraction).floor() as usize;
    let n_robot = batch - n_video;
    if n_video > 0 && video.is_empty() {
        return Err(DataError::EmptySource("video"));
    }
    if n_robot > 0 && robot.is_empty() {
        return Err(DataError::EmptySource("robot"));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..n_robot {
        let ep = &robot[rng.gen_range(0..robot.len())];
        out.push(sample_window(ep, k, i, rng)?);
    }
    for _ in 0..n_video {
        let ep = &video[rng.gen_range(0..video.len())];
        let mut ex = sample_window(ep, k, i, rng)?;
        ex.cond_pose = None;
        ex.target_pose = None;
        ex.cond_depth = None;
        ex.target_depth = None;
        out.push(ex);
    }
    out.shuffle(rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub kind: EpisodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub episodes: Vec<IndexEntry>,
}

/// A folder of episode files with an `index.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub robot: Vec<Episode>,
    pub video: Vec<Episode>,
}

impl Dataset {
    /// Writes `episode_NNNNN.pade` files and the index.
    pub fn write(dir: &Path, robot: &[Episode], video: &[Episode]) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (n, ep) in robot.iter().chain(video).enumerate() {
            let file = format!("episode_{n:05}.pade");
            write_episode(ep, &dir.join(&file))?;
            entries.push(IndexEntry { file, kind: ep.kind() });
        }
        let idx = DatasetIndex { episodes: entries };
        let json = serde_json::to_string_pretty(&idx).map_err(|e| DataError::Index(e.to_string()))?;
        fs::write(dir.join("index.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(dir.join("index.json"))?;
        let idx: DatasetIndex = serde_json::from_str(&text).map_err(|e| DataError::Index(e.to_string()))?;
        let mut robot = Vec::new();
        let mut video = Vec::new();
        for e in &idx.episodes {
            if e.file.contains('/') || e.file.contains('\\') {
                return Err(DataError::Index(format!("file name {:?} leaves the dataset folder", e.file)));
            }
            let ep = read_episode(&dir.join(&e.file))?;
            if ep.kind() != e.kind {
                return Err(DataError::Index(format!("{} is listed as {:?}", e.file, e.kind)));
            }
            match e.kind {
                EpisodeKind::Robot => robot.push(ep),
                EpisodeKind::Video => video.push(ep),
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            robot,
            video,
        })
    }
}

/// Scripted-data recipe: robot episodes with poses, plus a video-only split
/// drawn from disjoint reset seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    /// Instruction ids; episodes cycle through them.
    pub instructions: Vec<usize>,
    pub robot_episodes: usize,
    pub video_episodes: usize,
    pub seed: u64,
    pub n_distractors: usize,
    /// Record depth maps with robot episodes.
    pub with_depth: bool,
    /// Recolor the video split (swap red/green channels) to mimic a visual
    /// domain gap.
    pub video_domain_shift: bool,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            instructions: vec![0, 1, 2, 3],
            robot_episodes: 200,
            video_episodes: 200,
            seed: 0,
            n_distractors: 1,
            with_depth: true,
            video_domain_shift: false,
        }
    }
}

const VIDEO_SEED_OFFSET: u64 = 1 << 32;

fn collect(spec: &GenSpec, n: usize, offset: u64, depth: bool) -> Result<Vec<Episode>, DataError> {
    let tasks = spec
        .instructions
        .iter()
        .map(|&i| TaskSpec::from_instruction(i))
        .collect::<Result<Vec<_>, _>>()?;
    if tasks.is_empty() && n > 0 {
        return Err(DataError::Invalid("no instructions to record".into()));
    }
    let base = spec.seed.wrapping_mul(1_000_003).wrapping_add(offset);
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        if attempt > 10 * n as u64 + 100 {
            return Err(DataError::Invalid("scripted expert keeps failing".into()));
        }
        let task = &tasks[out.len() % tasks.len()];
        let state = blockworld::reset(base.wrapping_add(attempt), task, spec.n_distractors)?;
        attempt += 1;
        if let Some(ep) = record_expert_episode(state, depth, EXPERT_MAX_STEPS)? {
            out.push(ep);
        }
    }
    Ok(out)
}

/// Records `(robot, video)` episodes. Failed expert runs are skipped, so the
/// counts are exact.
pub fn generate(spec: &GenSpec) -> Result<(Vec<Episode>, Vec<Episode>), DataError> {
    let robot = collect(spec, spec.robot_episodes, 0, spec.with_depth)?;
    let mut video: Vec<Episode> = collect(spec, spec.video_episodes, VIDEO_SEED_OFFSET, false)?
        .iter()
        .map(Episode::video_only)
        .collect();
    if spec.video_domain_shift {
        for ep in &mut video {
            for px in ep.rgb.chunks_exact_mut(3) {
                px.swap(0, 1);
            }
        }
    }
    Ok((robot, video))
}

#[cfg(test)]
mod tests;
