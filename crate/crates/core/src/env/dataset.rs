use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expert::{free_roam_action, scripted_policy, Skill};
use super::render::{render, FrameTensor};
use super::world::generate_world;
use super::{Action, EnvConfig, Move, Turn};
use crate::error::Result;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tag: String,
    pub tick: u32,
}

/// One recorded episode. `frames[t]` is the observation on which `actions[t]` was taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<FrameTensor>,
    pub actions: Option<Vec<Action>>,
    pub events: Vec<Event>,
    pub skill_label: Option<String>,
    pub seed: u64,
    pub pseudo_labeled: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_event(&self, tag: &str) -> Option<u32> {
        self.events.iter().find(|e| e.tag == tag).map(|e| e.tick)
    }

    pub fn count_event(&self, tag: &str) -> usize {
        self.events.iter().filter(|e| e.tag == tag).count()
    }
}

/// Rolls out any controller from a fresh world and records everything.
pub fn run_episode(
    world_seed: u64,
    config: &EnvConfig,
    len: usize,
    label: Option<String>,
    mut act: impl FnMut(&super::WorldState) -> Action,
) -> Result<Trajectory> {
    let mut state = generate_world(world_seed, config)?;
    let mut frames = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut events = Vec::new();
    for _ in 0..len {
        frames.push(render(&state));
        let a = act(&state);
        events.extend(state.apply(a));
        actions.push(a);
    }
    Ok(Trajectory {
        frames,
        actions: Some(actions),
        events,
        skill_label: label,
        seed: world_seed,
        pseudo_labeled: false,
    })
}

/// Expert demonstrations: `episodes_per_skill` episodes for each skill, in
/// skill-major order. With probability `config.expert_noise` a step's
/// action is replaced by a random turn.
pub fn generate_dataset(
    skills: &[Skill],
    episodes_per_skill: usize,
    episode_len: usize,
    seed: u64,
    config: &EnvConfig,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(skills.len() * episodes_per_skill);
    for &skill in skills {
        for e in 0..episodes_per_skill {
            let world_seed = seeds::derive(seed, &[skill.index() as u64, e as u64]);
            let mut noise = seeds::rng(world_seed, &[0x6e6f_6973_65]);
            let traj = run_episode(world_seed, config, episode_len, Some(skill.name().into()), |s| {
                let a = scripted_policy(skill, s);
                if noise.random::<f64>() < config.expert_noise {
                    let turn = if noise.random::<bool>() { Turn::Left } else { Turn::Right };
                    Action::new(Move::Noop, turn)
                } else {
                    a
                }
            })?;
            out.push(traj);
        }
    }
    Ok(out)
}

/// Free-play episodes: the expert pursues a random skill until its defining
/// event fires (or `max_segment` steps pass), then picks another. The skill
/// sequence is not visible in the inventory, so only the future reveals it.
pub fn generate_play_dataset(
    skills: &[Skill],
    episodes: usize,
    episode_len: usize,
    max_segment: usize,
    seed: u64,
    config: &EnvConfig,
) -> Result<Vec<Trajectory>> {
    if skills.is_empty() || max_segment == 0 {
        return Err(crate::error::Error::Config("play data needs skills and a positive segment cap".into()));
    }
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let world_seed = seeds::derive(seed, &[0x706c_6179, e as u64]);
        let mut rng = seeds::rng(world_seed, &[0x706c_6179]);
        let mut skill = skills[rng.random_range(0..skills.len())];
        let mut since = 0;
        let traj = run_episode(world_seed, config, episode_len, Some("play".into()), |s| {
            let a = scripted_policy(skill, s);
            let a = if rng.random::<f64>() < config.expert_noise {
                let turn = if rng.random::<bool>() { Turn::Left } else { Turn::Right };
                Action::new(Move::Noop, turn)
            } else {
                a
            };
            since += 1;
            // Decide the next segment from the outcome of this action.
            let done = s.clone().apply(a).iter().any(|ev| ev.tag == skill.defining_event());
            if done || since >= max_segment {
                skill = skills[rng.random_range(0..skills.len())];
                since = 0;
            }
            a
        })?;
        out.push(traj);
    }
    Ok(out)
}

/// Free-roam clip used as the guidance bias reference.
pub fn random_walk_episode(seed: u64, len: usize, config: &EnvConfig) -> Result<Trajectory> {
    let mut rng = seeds::rng(seed, &[0x7761_6c6b]);
    run_episode(seed, config, len, Some("free_roam".into()), |_| free_roam_action(&mut rng))
}

/// Copies with the action field removed, as if only video were available.
pub fn strip_actions(trajs: &[Trajectory]) -> Vec<Trajectory> {
    trajs
        .iter()
        .map(|t| Trajectory {
            actions: None,
            pseudo_labeled: false,
            ..t.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Resource;

    #[test]
    fn counts_and_lengths() {
        let cfg = EnvConfig::default();
        let d = generate_dataset(&Skill::ALL, 2, 40, 7, &cfg).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.iter().all(|t| t.len() == 40 && t.actions.as_ref().unwrap().len() == 40));
        assert!(d.iter().all(|t| t.events.iter().all(|e| (e.tick as usize) < 40)));
        let stripped = strip_actions(&d);
        assert!(stripped.iter().all(|t| t.actions.is_none()));
        assert!(stripped.iter().zip(&d).all(|(a, b)| a.frames == b.frames));
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = EnvConfig::default();
        let a = generate_dataset(&[Skill::HuntAnimal], 2, 30, 3, &cfg).unwrap();
        let b = generate_dataset(&[Skill::HuntAnimal], 2, 30, 3, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chop_episodes_fell_trees() {
        let cfg = EnvConfig::default();
        let d = generate_dataset(&[Skill::ChopTrees], 20, cfg.episode_len, 7, &cfg).unwrap();
        for t in &d {
            assert!(t.first_event("mine_block:tree").is_some(), "seed {}", t.seed);
        }
    }

    #[test]
    fn inventory_matches_events() {
        let cfg = EnvConfig::default();
        for skill in Skill::ALL {
            let seed = seeds::derive(1, &[skill.index() as u64]);
            let mut state = generate_world(seed, &cfg).unwrap();
            let mut events = Vec::new();
            for _ in 0..200 {
                let a = scripted_policy(skill, &state);
                events.extend(state.apply(a));
            }
            let count = |tag: &str| events.iter().filter(|e: &&Event| e.tag == tag).count() as u32;
            assert_eq!(state.inventory.count(Resource::Wood), count("pickup:wood"));
            assert_eq!(state.inventory.count(Resource::Stone), count("pickup:stone"));
            assert_eq!(state.inventory.count(Resource::Meat), count("pickup:meat"));
            assert_eq!(state.inventory.count(Resource::Water), count("use:water"));
            assert_eq!(
                state.inventory.count(Resource::Dirt),
                count("pickup:dirt") - count("place:dirt")
            );
        }
    }
}

#[cfg(test)]
mod expert_success {
    use super::*;

    #[test]
    fn every_skill_succeeds_on_most_seeds() {
        let cfg = EnvConfig::default();
        for skill in Skill::ALL {
            let hits = (0..100u64)
                .filter(|&seed| {
                    let t = run_episode(seed, &cfg, cfg.episode_len, None, |s| scripted_policy(skill, s))
                        .unwrap();
                    t.first_event(skill.defining_event()).is_some()
                })
                .count();
            assert!(hits >= 95, "{skill}: {hits}/100");
        }
    }
}
