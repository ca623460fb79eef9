use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, CellKind, EnvConfig, HitCounts, Move, Resource, Turn};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Facing {
    N,
    E,
    S,
    W,
}

impl Facing {
    /// Breadth-first expansion order.
    pub const ORDER: [Facing; 4] = [Facing::N, Facing::E, Facing::S, Facing::W];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Facing::N => (-1, 0),
            Facing::E => (0, 1),
            Facing::S => (1, 0),
            Facing::W => (0, -1),
        }
    }

    pub fn left(self) -> Facing {
        match self {
            Facing::N => Facing::W,
            Facing::W => Facing::S,
            Facing::S => Facing::E,
            Facing::E => Facing::N,
        }
    }

    pub fn right(self) -> Facing {
        self.left().left().left()
    }

    pub fn opposite(self) -> Facing {
        self.left().left()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory(BTreeMap<Resource, u32>);

impl Inventory {
    pub fn count(&self, r: Resource) -> u32 {
        self.0.get(&r).copied().unwrap_or(0)
    }

    pub fn add(&mut self, r: Resource, n: u32) {
        *self.0.entry(r).or_insert(0) += n;
    }

    /// Removes one unit if available.
    pub fn take(&mut self, r: Resource) -> bool {
        match self.0.get_mut(&r) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Resource, u32)> + '_ {
        Resource::ALL.into_iter().map(|r| (r, self.count(r)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Animal {
    pub pos: (usize, usize),
    pub hits: u8,
}

/// Full simulator state. Identical seeds and action lists give identical states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub size: usize,
    pub grid: Vec<CellKind>,
    pub damage: Vec<u8>,
    pub agent_pos: (usize, usize),
    pub agent_facing: Facing,
    pub inventory: Inventory,
    pub animals: Vec<Animal>,
    pub tick: u64,
    pub hits: HitCounts,
    pub animal_move_prob: f64,
    pub rng_state: ChaCha8Rng,
}

/// Builds a bordered world from per-kind densities.
pub fn generate_world(seed: u64, config: &EnvConfig) -> Result<WorldState> {
    config.validate()?;
    let n = config.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![CellKind::Wall; n * n];
    let entries = config.densities.entries();
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut kind = CellKind::Empty;
            for (k, d) in entries {
                acc += d;
                if u < acc {
                    kind = k;
                    break;
                }
            }
            grid[r * n + c] = kind;
        }
    }
    for (kind, _) in entries {
        if !grid.contains(&kind) {
            let empties: Vec<usize> = (0..n * n).filter(|&i| grid[i] == CellKind::Empty).collect();
            if !empties.is_empty() {
                grid[empties[rng.random_range(0..empties.len())]] = kind;
            }
        }
    }
    let mut empties: Vec<usize> = (0..n * n).filter(|&i| grid[i] == CellKind::Empty).collect();
    if empties.is_empty() {
        // Carve a cell; every kind is already present elsewhere or the grid is tiny.
        let i = n + 1;
        grid[i] = CellKind::Empty;
        empties.push(i);
    }
    let a = empties[rng.random_range(0..empties.len())];
    let facing = Facing::ORDER[rng.random_range(0..4)];
    let animals = (0..n * n)
        .filter(|&i| grid[i] == CellKind::Animal)
        .map(|i| Animal {
            pos: (i / n, i % n),
            hits: 0,
        })
        .collect();
    Ok(WorldState {
        size: n,
        damage: vec![0; n * n],
        grid,
        agent_pos: (a / n, a % n),
        agent_facing: facing,
        inventory: Inventory::default(),
        animals,
        tick: 0,
        hits: config.hits.clone(),
        animal_move_prob: config.animal_move_prob,
        rng_state: rng,
    })
}

impl WorldState {
    pub fn cell(&self, pos: (usize, usize)) -> CellKind {
        self.grid[pos.0 * self.size + pos.1]
    }

    /// Cell kind at a signed coordinate; outside the grid reads as wall.
    pub fn cell_at(&self, r: isize, c: isize) -> CellKind {
        if r < 0 || c < 0 || r >= self.size as isize || c >= self.size as isize {
            CellKind::Wall
        } else {
            self.grid[r as usize * self.size + c as usize]
        }
    }

    pub fn neighbor(&self, pos: (usize, usize), dir: Facing) -> Option<(usize, usize)> {
        let (dr, dc) = dir.delta();
        let (r, c) = (pos.0 as isize + dr, pos.1 as isize + dc);
        if r < 0 || c < 0 || r >= self.size as isize || c >= self.size as isize {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn faced(&self) -> Option<(usize, usize)> {
        self.neighbor(self.agent_pos, self.agent_facing)
    }

    /// Walls, trees, stone and animals block movement; the agent may
    /// stand on dirt, crop and water.
    pub fn passable(&self, pos: (usize, usize)) -> bool {
        !matches!(
            self.cell(pos),
            CellKind::Wall | CellKind::Tree | CellKind::Stone | CellKind::Animal
        )
    }

    fn set(&mut self, pos: (usize, usize), kind: CellKind) {
        let i = pos.0 * self.size + pos.1;
        self.grid[i] = kind;
        self.damage[i] = 0;
    }

    pub fn count_kind(&self, kind: CellKind) -> usize {
        self.grid.iter().filter(|&&k| k == kind).count()
    }

    /// Pure transition: returns the successor state, its frame, and emitted events.
    pub fn step(&self, action: Action) -> (WorldState, super::FrameTensor, Vec<super::Event>) {
        let mut next = self.clone();
        let events = next.apply(action);
        let frame = super::render(&next);
        (next, frame, events)
    }

    /// In-place transition. Events carry the tick at which the action was taken.
    pub fn apply(&mut self, action: Action) -> Vec<super::Event> {
        let tick = self.tick as u32;
        let mut tags: Vec<&'static str> = Vec::new();
        let dir = match action.mv {
            Move::Forward => Some(self.agent_facing),
            Move::Back => Some(self.agent_facing.opposite()),
            Move::StrafeLeft => Some(self.agent_facing.left()),
            Move::StrafeRight => Some(self.agent_facing.right()),
            Move::Noop | Move::AttackOrUse => None,
        };
        if let Some(dir) = dir {
            if let Some(p) = self.neighbor(self.agent_pos, dir) {
                if self.passable(p) {
                    self.agent_pos = p;
                }
            }
        }
        if action.mv == Move::AttackOrUse {
            self.interact(&mut tags);
        }
        self.agent_facing = match action.turn {
            Turn::None => self.agent_facing,
            Turn::Left => self.agent_facing.left(),
            Turn::Right => self.agent_facing.right(),
        };
        self.walk_animals();
        self.tick += 1;
        tags.into_iter()
            .map(|t| super::Event {
                tag: t.to_string(),
                tick,
            })
            .collect()
    }

    fn hit_block(&mut self, pos: (usize, usize), needed: u8) -> bool {
        let i = pos.0 * self.size + pos.1;
        self.damage[i] += 1;
        if self.damage[i] >= needed {
            self.set(pos, CellKind::Empty);
            true
        } else {
            false
        }
    }

    fn interact(&mut self, tags: &mut Vec<&'static str>) {
        let Some(pos) = self.faced() else { return };
        match self.cell(pos) {
            CellKind::Tree => {
                if self.hit_block(pos, self.hits.tree) {
                    self.inventory.add(Resource::Wood, 1);
                    tags.extend(["mine_block:tree", "pickup:wood"]);
                }
            }
            CellKind::Stone => {
                if self.hit_block(pos, self.hits.stone) {
                    self.inventory.add(Resource::Stone, 1);
                    tags.extend(["mine_block:stone", "pickup:stone"]);
                }
            }
            CellKind::Dirt => {
                if self.hit_block(pos, self.hits.dirt) {
                    self.inventory.add(Resource::Dirt, 1);
                    tags.extend(["mine_block:dirt", "pickup:dirt"]);
                }
            }
            CellKind::Crop => {
                if self.hit_block(pos, self.hits.crop) {
                    tags.push("mine_block:crop");
                }
            }
            CellKind::Animal => {
                if let Some(k) = self.animals.iter().position(|a| a.pos == pos) {
                    self.animals[k].hits += 1;
                    if self.animals[k].hits >= self.hits.animal {
                        self.animals.remove(k);
                        self.set(pos, CellKind::Empty);
                        self.inventory.add(Resource::Meat, 1);
                        tags.extend(["kill:animal", "pickup:meat"]);
                    }
                }
            }
            CellKind::Water => {
                // Filling the bucket drains the cell.
                self.set(pos, CellKind::Empty);
                self.inventory.add(Resource::Water, 1);
                tags.push("use:water");
            }
            CellKind::Empty => {
                if self.inventory.take(Resource::Dirt) {
                    self.set(pos, CellKind::Dirt);
                    tags.push("place:dirt");
                }
            }
            CellKind::Wall => {}
        }
    }

    fn walk_animals(&mut self) {
        for k in 0..self.animals.len() {
            let u: f64 = self.rng_state.random();
            let d = self.rng_state.random_range(0..4usize);
            if u >= self.animal_move_prob {
                continue;
            }
            let pos = self.animals[k].pos;
            if let Some(to) = self.neighbor(pos, Facing::ORDER[d]) {
                if self.cell(to) == CellKind::Empty && to != self.agent_pos {
                    self.grid[pos.0 * self.size + pos.1] = CellKind::Empty;
                    self.grid[to.0 * self.size + to.1] = CellKind::Animal;
                    self.animals[k].pos = to;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Event;

    fn world(seed: u64) -> WorldState {
        generate_world(seed, &EnvConfig::default()).unwrap()
    }

    fn tags(events: &[Event]) -> Vec<&str> {
        events.iter().map(|e| e.tag.as_str()).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world(0), world(0));
        let (a, b) = (world(0), world(1));
        assert!(a.grid.iter().zip(&b.grid).any(|(x, y)| x != y));
    }

    #[test]
    fn border_and_resources() {
        for seed in 0..20 {
            let w = world(seed);
            let n = w.size;
            for i in 0..n {
                for p in [(0, i), (n - 1, i), (i, 0), (i, n - 1)] {
                    assert_eq!(w.cell(p), CellKind::Wall);
                }
            }
            for k in [
                CellKind::Tree,
                CellKind::Stone,
                CellKind::Dirt,
                CellKind::Water,
                CellKind::Crop,
                CellKind::Animal,
            ] {
                assert!(w.count_kind(k) >= 1, "seed {seed} lacks {k:?}");
            }
            assert_eq!(w.cell(w.agent_pos), CellKind::Empty);
        }
    }

    #[test]
    fn zero_tree_density_is_rejected() {
        let mut cfg = EnvConfig::default();
        cfg.densities.tree = 0.0;
        let err = generate_world(0, &cfg).unwrap_err().to_string();
        assert!(err.contains("resource kind absent"), "{err}");
    }

    fn place_agent(w: &mut WorldState, pos: (usize, usize), facing: Facing) {
        let n = w.size;
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                w.grid[r * n + c] = CellKind::Empty;
            }
        }
        w.animals.clear();
        w.agent_pos = pos;
        w.agent_facing = facing;
    }

    #[test]
    fn three_hits_fell_a_tree() {
        let mut w = world(3);
        place_agent(&mut w, (5, 5), Facing::N);
        w.grid[4 * w.size + 5] = CellKind::Tree;
        let hit = Action::new(Move::AttackOrUse, Turn::None);
        assert!(w.apply(hit).is_empty());
        assert!(w.apply(hit).is_empty());
        let ev = w.apply(hit);
        assert_eq!(tags(&ev), ["mine_block:tree", "pickup:wood"]);
        assert_eq!(w.cell((4, 5)), CellKind::Empty);
        assert_eq!(w.inventory.count(Resource::Wood), 1);
        assert_eq!(ev[0].tick, 2);
    }

    #[test]
    fn walls_block_movement() {
        let mut w = world(3);
        place_agent(&mut w, (1, 5), Facing::N);
        let tick = w.tick;
        w.apply(Action::new(Move::Forward, Turn::None));
        assert_eq!(w.agent_pos, (1, 5));
        assert_eq!(w.tick, tick + 1);
    }

    #[test]
    fn stone_animal_water_dirt_rules() {
        let mut w = world(4);
        place_agent(&mut w, (5, 5), Facing::N);
        let n = w.size;
        let hit = Action::new(Move::AttackOrUse, Turn::None);
        w.grid[4 * n + 5] = CellKind::Stone;
        let mut all = Vec::new();
        for _ in 0..5 {
            all.extend(w.apply(hit));
        }
        assert_eq!(tags(&all), ["mine_block:stone", "pickup:stone"]);

        w.grid[4 * n + 5] = CellKind::Water;
        assert_eq!(tags(&w.apply(hit)), ["use:water"]);
        assert_eq!(w.inventory.count(Resource::Water), 1);
        assert_eq!(w.grid[4 * n + 5], CellKind::Empty);

        // Facing empty without dirt does nothing; with dirt it places.
        w.grid[4 * n + 5] = CellKind::Empty;
        assert!(w.apply(hit).is_empty());
        w.inventory.add(Resource::Dirt, 1);
        assert_eq!(tags(&w.apply(hit)), ["place:dirt"]);
        assert_eq!(w.cell((4, 5)), CellKind::Dirt);
        assert_eq!(tags(&w.apply(hit)), ["mine_block:dirt", "pickup:dirt"]);

        w.animal_move_prob = 0.0;
        w.grid[4 * n + 5] = CellKind::Animal;
        w.animals.push(Animal { pos: (4, 5), hits: 0 });
        assert!(w.apply(hit).is_empty());
        assert_eq!(tags(&w.apply(hit)), ["kill:animal", "pickup:meat"]);
        assert!(w.animals.is_empty());

        w.grid[4 * n + 5] = CellKind::Crop;
        assert_eq!(tags(&w.apply(hit)), ["mine_block:crop"]);
    }

    #[test]
    fn turning_and_relative_moves() {
        let mut w = world(5);
        place_agent(&mut w, (5, 5), Facing::N);
        w.apply(Action::new(Move::Noop, Turn::Right));
        assert_eq!(w.agent_facing, Facing::E);
        w.apply(Action::new(Move::Forward, Turn::None));
        assert_eq!(w.agent_pos, (5, 6));
        w.apply(Action::new(Move::StrafeLeft, Turn::None));
        assert_eq!(w.agent_pos, (4, 6));
        w.apply(Action::new(Move::Back, Turn::Left));
        assert_eq!((w.agent_pos, w.agent_facing), ((4, 5), Facing::N));
    }

    #[test]
    fn replay_is_bit_identical() {
        let acts = [
            Action::new(Move::Forward, Turn::None),
            Action::new(Move::AttackOrUse, Turn::Left),
            Action::new(Move::StrafeRight, Turn::Right),
        ];
        let run = || {
            let mut w = world(9);
            let mut out = Vec::new();
            for i in 0..60 {
                let (next, frame, ev) = w.step(acts[i % 3]);
                out.push((serde_json::to_string(&next).unwrap(), frame, ev));
                w = next;
            }
            out
        };
        assert_eq!(run(), run());
    }
}
