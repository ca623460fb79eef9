use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Facing, WorldState};
use super::{Action, CellKind, Move, Resource, Turn};
use crate::error::Error;

/// Scripted expert skills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    ChopTrees,
    MineStone,
    HuntAnimal,
    CollectWater,
    BuildDirt,
}

impl Skill {
    pub const ALL: [Skill; 5] = [
        Skill::ChopTrees,
        Skill::MineStone,
        Skill::HuntAnimal,
        Skill::CollectWater,
        Skill::BuildDirt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Skill::ChopTrees => "chop_trees",
            Skill::MineStone => "mine_stone",
            Skill::HuntAnimal => "hunt_animal",
            Skill::CollectWater => "collect_water",
            Skill::BuildDirt => "build_dirt",
        }
    }

    /// Event whose occurrence counts as completing the skill.
    pub fn defining_event(self) -> &'static str {
        match self {
            Skill::ChopTrees => "mine_block:tree",
            Skill::MineStone => "mine_block:stone",
            Skill::HuntAnimal => "kill:animal",
            Skill::CollectWater => "use:water",
            Skill::BuildDirt => "place:dirt",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Skill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown skill {s}")))
    }
}

fn is_target(skill: Skill, state: &WorldState, kind: CellKind) -> bool {
    match skill {
        Skill::ChopTrees => kind == CellKind::Tree,
        Skill::MineStone => kind == CellKind::Stone,
        Skill::HuntAnimal => kind == CellKind::Animal,
        Skill::CollectWater => kind == CellKind::Water,
        Skill::BuildDirt => {
            if state.inventory.count(Resource::Dirt) > 0 {
                kind == CellKind::Empty
            } else {
                kind == CellKind::Dirt
            }
        }
    }
}

fn turn_toward(facing: Facing, dir: Facing) -> Turn {
    if dir == facing.left() {
        Turn::Left
    } else {
        Turn::Right
    }
}

/// Greedy expert: breadth-first search (expansion order N, E, S, W) to the
/// nearest cell adjacent to a target, then face it and interact.
pub fn scripted_policy(skill: Skill, state: &WorldState) -> Action {
    if let Some(p) = state.faced() {
        if is_target(skill, state, state.cell(p)) {
            return Action::new(Move::AttackOrUse, Turn::None);
        }
    }
    let n = state.size;
    let start = state.agent_pos;
    let mut parent: Vec<Option<((usize, usize), Facing)>> = vec![None; n * n];
    let mut seen = vec![false; n * n];
    seen[start.0 * n + start.1] = true;
    let mut queue = VecDeque::from([start]);
    let mut found = None;
    'search: while let Some(u) = queue.pop_front() {
        for dir in Facing::ORDER {
            if let Some(nb) = state.neighbor(u, dir) {
                if is_target(skill, state, state.cell(nb)) {
                    found = Some((u, dir));
                    break 'search;
                }
            }
        }
        for dir in Facing::ORDER {
            if let Some(nb) = state.neighbor(u, dir) {
                let i = nb.0 * n + nb.1;
                if !seen[i] && state.passable(nb) {
                    seen[i] = true;
                    parent[i] = Some((u, dir));
                    queue.push_back(nb);
                }
            }
        }
    }
    let Some((stand, target_dir)) = found else {
        return Action::NOOP;
    };
    let facing = state.agent_facing;
    if stand == start {
        return Action::new(Move::Noop, turn_toward(facing, target_dir));
    }
    let mut cur = stand;
    let mut first = target_dir;
    while cur != start {
        let (prev, dir) = parent[cur.0 * n + cur.1].expect("path to start");
        first = dir;
        cur = prev;
    }
    if first == facing {
        Action::new(Move::Forward, Turn::None)
    } else {
        Action::new(Move::Noop, turn_toward(facing, first))
    }
}

/// Undirected wandering used for the free-roam bias reference.
pub fn free_roam_action(rng: &mut impl Rng) -> Action {
    let u: f64 = rng.random();
    if u < 0.7 {
        Action::new(Move::Forward, Turn::None)
    } else if u < 0.85 {
        Action::new(Move::Noop, Turn::Left)
    } else {
        Action::new(Move::Noop, Turn::Right)
    }
}
