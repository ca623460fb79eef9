//! Agents and reference selection shared by the command line and the
//! evaluation suites.

use std::collections::BTreeMap;

use rand::Rng;

use crate::env::{scripted_policy, Action, EnvConfig, FrameTensor, Skill, Trajectory};
use crate::error::{Error, Result};
use crate::evaluation::{EpisodePool, TaskSpec};
use crate::inference::{self, EpisodeLog, Guidance, RolloutOptions, Sampling};
use crate::seeds;
use crate::train::Checkpoint;

/// `t` frames starting `t` ticks before the first occurrence of `skill`'s
/// defining event (clamped to the episode start), or `None` if the event
/// never happens or the episode is too short.
pub fn reference_clip(traj: &Trajectory, skill: Skill, t: usize) -> Option<Vec<FrameTensor>> {
    let tick = traj.first_event(skill.defining_event())? as usize;
    let start = tick.saturating_sub(t);
    (start + t <= traj.len()).then(|| traj.frames[start..start + t].to_vec())
}

/// One reference clip per skill from the first suitable trajectory
/// labelled with that skill.
pub fn skill_references(refs: &[Trajectory], t: usize) -> Result<BTreeMap<Skill, Vec<FrameTensor>>> {
    let mut out = BTreeMap::new();
    for skill in Skill::ALL {
        let clip = refs
            .iter()
            .filter(|r| r.skill_label.as_deref() == Some(skill.name()))
            .find_map(|r| reference_clip(r, skill, t))
            .ok_or_else(|| Error::Invalid(format!("no reference clip for {skill}")))?;
        out.insert(skill, clip);
    }
    Ok(out)
}

/// Anything that can be asked to perform a skill.
#[derive(Clone, Debug)]
pub enum Agent {
    Expert,
    /// Uniformly random factored actions.
    Random,
    Model {
        checkpoint: Box<Checkpoint>,
        references: BTreeMap<Skill, Vec<FrameTensor>>,
        guidance: Option<Guidance>,
        sampling: Sampling,
    },
}

impl Agent {
    /// One episode on `env_seed` attempting `skill`.
    pub fn episode(&self, skill: Skill, env_seed: u64, env: &EnvConfig, steps: usize, noise_seed: u64) -> Result<EpisodeLog> {
        match self {
            Agent::Expert => inference::run_controller(env_seed, env, steps, |s| Ok(scripted_policy(skill, s))),
            Agent::Random => {
                let mut rng = seeds::rng(noise_seed, &[0x7261_6e64]);
                let mut log = inference::run_controller(env_seed, env, steps, |_| {
                    Action::from_indices(rng.random_range(0..6), rng.random_range(0..3))
                })?;
                log.noise_seed = noise_seed;
                Ok(log)
            }
            Agent::Model {
                checkpoint,
                references,
                guidance,
                sampling,
            } => {
                let clip = references
                    .get(&skill)
                    .ok_or_else(|| Error::Invalid(format!("no reference for {skill}")))?;
                let goal = inference::encode_reference(clip, checkpoint)?;
                inference::rollout(
                    env_seed,
                    env,
                    &goal,
                    checkpoint,
                    steps,
                    guidance.as_ref(),
                    RolloutOptions {
                        sampling: *sampling,
                        noise_seed,
                    },
                )
            }
        }
    }
}

/// Evaluation world seeds, disjoint from the data-generation seeds.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seeds::derive(base, &[0x6576_616c, i])).collect()
}

/// Episodes of every agent on every skill task.
pub fn episode_pool(agents: &[(String, Agent)], env: &EnvConfig, world_seeds: &[u64], steps: usize) -> Result<EpisodePool> {
    let mut pool = EpisodePool::new();
    for (name, agent) in agents {
        let mut per_task = BTreeMap::new();
        for skill in Skill::ALL {
            let logs = world_seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| agent.episode(skill, s, env, steps, i as u64))
                .collect::<Result<Vec<_>>>()?;
            per_task.insert(TaskSpec::for_skill(skill).name, logs);
        }
        pool.insert(name.clone(), per_task);
    }
    Ok(pool)
}
