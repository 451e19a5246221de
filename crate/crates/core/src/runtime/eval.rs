use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{rollout, Policy, Rollout, RuntimeError};
use crate::blockworld::{check_success, TaskSpec, EXPERT_MAX_STEPS};

pub const EVAL_HEADER: &str = "task,trials,successes,rate,mean_len,config_hash";

/// Which tasks to run and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Instruction ids, one row each.
    pub instructions: Vec<usize>,
    pub trials: usize,
    /// Trial `j` resets with seed `seed_base + j`.
    pub seed_base: u64,
    pub n_distractors: usize,
    pub max_steps: u32,
    pub noise_seed: u64,
    /// Parallel rollouts; results do not depend on it.
    pub jobs: usize,
}

impl Default for EvalSettings {
    /// Reach red and reach blue, 25 seeds each, one distractor.
    fn default() -> Self {
        Self {
            instructions: vec![0, 2],
            trials: 25,
            seed_base: 100_000,
            n_distractors: 1,
            max_steps: EXPERT_MAX_STEPS as u32,
            noise_seed: 0,
            jobs: 1,
        }
    }
}

impl EvalSettings {
    /// Sampling noise base for a rollout.
    pub fn noise_base(&self, env_seed: u64) -> u64 {
        self.noise_seed ^ env_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub length: u32,
    /// `check_success` re-evaluated on the logged final state.
    pub final_state_success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TaskRow>,
    pub episodes: Vec<EpisodeLog>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.task, r.trials, r.successes, r.rate, r.mean_len, self.config_hash
            );
        }
        s
    }

    pub fn episodes_csv(&self) -> String {
        let mut s = String::from("task,seed,success,length\n");
        for e in &self.episodes {
            s += &format!("{},{},{},{}\n", e.task, e.seed, u8::from(e.success), e.length);
        }
        s
    }

    /// Writes `eval_report.csv` and `episodes.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), RuntimeError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_report.csv"), self.to_csv())?;
        fs::write(dir.join("episodes.csv"), self.episodes_csv())?;
        Ok(())
    }

    pub fn total_successes(&self) -> usize {
        self.rows.iter().map(|r| r.successes).sum()
    }

    pub fn total_trials(&self) -> usize {
        self.rows.iter().map(|r| r.trials).sum()
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.total_trials();
        if n == 0 {
            0.0
        } else {
            self.total_successes() as f64 / n as f64
        }
    }
}

/// Hex SHA-256 prefix of a value's JSON form.
pub fn config_hash<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_vec(v).unwrap_or_default();
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Runs `trials` rollouts per instruction. `policy_for(env_seed)` builds the
/// policy for one rollout. `on_rollout` sees every rollout in order.
pub fn evaluate<P, F>(
    policy_for: F,
    settings: &EvalSettings,
    config_hash: &str,
    mut on_rollout: impl FnMut(&TaskSpec, u64, &Rollout) -> Result<(), RuntimeError>,
) -> Result<EvalReport, RuntimeError>
where
    P: Policy,
    F: Fn(u64) -> P + Sync,
{
    let tasks = settings
        .instructions
        .iter()
        .map(|&i| TaskSpec::from_instruction(i))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64)> = (0..tasks.len())
        .flat_map(|t| (0..settings.trials as u64).map(move |j| (t, j)))
        .collect();
    let run = |&(t, j): &(usize, u64)| {
        let seed = settings.seed_base + j;
        let policy = policy_for(seed);
        rollout(seed, &tasks[t], settings.n_distractors, &policy, settings.max_steps)
    };
    let results: Vec<Result<Rollout, RuntimeError>> = if settings.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
            .map_err(|e| RuntimeError::Settings(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut rows: Vec<TaskRow> = tasks
        .iter()
        .map(|t| TaskRow {
            task: t.text(),
            trials: 0,
            successes: 0,
            rate: 0.0,
            mean_len: 0.0,
        })
        .collect();
    let mut episodes = Vec::with_capacity(jobs.len());
    for (&(t, j), r) in jobs.iter().zip(results) {
        let r = r?;
        let seed = settings.seed_base + j;
        on_rollout(&tasks[t], seed, &r)?;
        let last = r.trajectory.last().expect("trajectory holds the reset state");
        let row = &mut rows[t];
        row.trials += 1;
        row.successes += usize::from(r.success);
        row.mean_len += r.length as f64;
        episodes.push(EpisodeLog {
            task: row.task.clone(),
            seed,
            success: r.success,
            length: r.length,
            final_state_success: check_success(last),
        });
    }
    for row in &mut rows {
        if row.trials > 0 {
            row.rate = row.successes as f64 / row.trials as f64;
            row.mean_len /= row.trials as f64;
        }
    }
    Ok(EvalReport {
        rows,
        episodes,
        config_hash: config_hash.to_string(),
    })
}
