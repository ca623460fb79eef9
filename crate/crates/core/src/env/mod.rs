//! Deterministic 2-D gridworld with scripted expert skills.

mod dataset;
mod expert;
mod render;
mod world;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_play_dataset, random_walk_episode, run_episode, strip_actions, Event, Trajectory,
};
pub use expert::{free_roam_action, scripted_policy, Skill};
pub use render::{render, FrameTensor, FRAME_CHANNELS, FRAME_SIDE, INVENTORY_CHANNELS};
pub use world::{generate_world, Animal, Facing, Inventory, WorldState};

/// Kinds of grid cell; the discriminant is the one-hot channel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellKind {
    Empty = 0,
    Tree = 1,
    Stone = 2,
    Dirt = 3,
    Water = 4,
    Crop = 5,
    Animal = 6,
    Wall = 7,
}

impl CellKind {
    pub const COUNT: usize = 8;
}

/// Inventory resources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Wood,
    Stone,
    Meat,
    Water,
    Dirt,
}

impl Resource {
    pub const ALL: [Resource; 5] = [
        Resource::Wood,
        Resource::Stone,
        Resource::Meat,
        Resource::Water,
        Resource::Dirt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Resource::Wood => "wood",
            Resource::Stone => "stone",
            Resource::Meat => "meat",
            Resource::Water => "water",
            Resource::Dirt => "dirt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Movement head: `noop, forward, back, strafe_left, strafe_right, attack_or_use`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Noop = 0,
    Forward = 1,
    Back = 2,
    StrafeLeft = 3,
    StrafeRight = 4,
    AttackOrUse = 5,
}

/// Camera head: `none, left, right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    None = 0,
    Left = 1,
    Right = 2,
}

impl Move {
    pub const COUNT: usize = 6;
    const ALL: [Move; 6] = [
        Move::Noop,
        Move::Forward,
        Move::Back,
        Move::StrafeLeft,
        Move::StrafeRight,
        Move::AttackOrUse,
    ];
}

impl Turn {
    pub const COUNT: usize = 3;
    const ALL: [Turn; 3] = [Turn::None, Turn::Left, Turn::Right];
}

/// One factored action: a move index and a turn index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub mv: Move,
    pub turn: Turn,
}

impl Action {
    /// Action fed to the policy before the first step of an episode or chunk.
    pub const START: Action = Action {
        mv: Move::Noop,
        turn: Turn::None,
    };
    pub const NOOP: Action = Action::START;

    pub fn new(mv: Move, turn: Turn) -> Self {
        Self { mv, turn }
    }

    pub fn from_indices(mv: usize, turn: usize) -> Result<Self> {
        match (Move::ALL.get(mv), Turn::ALL.get(turn)) {
            (Some(&mv), Some(&turn)) => Ok(Self { mv, turn }),
            _ => Err(Error::Domain(format!("action indices ({mv}, {turn}) out of range"))),
        }
    }

    pub fn move_index(self) -> usize {
        self.mv as usize
    }

    pub fn turn_index(self) -> usize {
        self.turn as usize
    }

    /// Joint index in `0..18`, move-major.
    pub fn joint_index(self) -> usize {
        self.move_index() * Turn::COUNT + self.turn_index()
    }
}

/// Fixed set of event tags the world can emit.
pub const EVENT_TAGS: [&str; 11] = [
    "mine_block:tree",
    "pickup:wood",
    "mine_block:stone",
    "pickup:stone",
    "kill:animal",
    "pickup:meat",
    "use:water",
    "mine_block:dirt",
    "pickup:dirt",
    "place:dirt",
    "mine_block:crop",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Densities {
    pub tree: f64,
    pub stone: f64,
    pub dirt: f64,
    pub water: f64,
    pub crop: f64,
    pub animal: f64,
}

impl Default for Densities {
    fn default() -> Self {
        Self {
            tree: 0.07,
            stone: 0.06,
            dirt: 0.06,
            water: 0.05,
            crop: 0.03,
            animal: 0.03,
        }
    }
}

impl Densities {
    fn entries(&self) -> [(CellKind, f64); 6] {
        [
            (CellKind::Tree, self.tree),
            (CellKind::Stone, self.stone),
            (CellKind::Dirt, self.dirt),
            (CellKind::Water, self.water),
            (CellKind::Crop, self.crop),
            (CellKind::Animal, self.animal),
        ]
    }
}

/// Hits needed before a block breaks or an animal dies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HitCounts {
    pub tree: u8,
    pub stone: u8,
    pub animal: u8,
    pub crop: u8,
    pub dirt: u8,
}

impl Default for HitCounts {
    fn default() -> Self {
        Self {
            tree: 3,
            stone: 5,
            animal: 2,
            crop: 1,
            dirt: 1,
        }
    }
}

/// `env` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub densities: Densities,
    pub hits: HitCounts,
    pub animal_move_prob: f64,
    pub episode_len: usize,
    /// Probability that a dataset step replaces the expert action by a random turn.
    pub expert_noise: f64,
    pub event_tags: Vec<String>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 16,
            densities: Densities::default(),
            hits: HitCounts::default(),
            animal_move_prob: 0.2,
            episode_len: 256,
            expert_noise: 0.1,
            event_tags: EVENT_TAGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 5 {
            return Err(Error::Config(format!("grid_size {} too small", self.grid_size)));
        }
        let mut sum = 0.0;
        for (kind, d) in self.densities.entries() {
            if !(0.0..=1.0).contains(&d) || !d.is_finite() {
                return Err(Error::Config(format!("density for {kind:?} must lie in [0, 1]")));
            }
            if d == 0.0 {
                return Err(Error::Config(format!("resource kind absent: {kind:?}")));
            }
            sum += d;
        }
        if sum > 1.0 {
            return Err(Error::Config(format!("densities sum to {sum} > 1")));
        }
        if !(0.0..=1.0).contains(&self.animal_move_prob) || !(0.0..=1.0).contains(&self.expert_noise) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let h = &self.hits;
        if [h.tree, h.stone, h.animal, h.crop, h.dirt].contains(&0) {
            return Err(Error::Config("hit counts must be positive".into()));
        }
        for tag in &self.event_tags {
            if !EVENT_TAGS.contains(&tag.as_str()) {
                return Err(Error::Config(format!("unknown event tag {tag}")));
            }
        }
        Ok(())
    }
}
