use serde::{Deserialize, Serialize};

use super::{CellKind, Resource, WorldState};

pub const FRAME_SIDE: usize = 7;
pub const INVENTORY_CHANNELS: [Resource; 4] =
    [Resource::Wood, Resource::Stone, Resource::Meat, Resource::Dirt];
pub const FRAME_CHANNELS: usize = CellKind::COUNT + INVENTORY_CHANNELS.len();

/// Egocentric `7 x 7 x 12` observation, row-major `(row, col, channel)`.
///
/// Channels `0..8` one-hot the cell kind, `8..12` hold inventory levels
/// `min(count / 8, 1)` for wood, stone, meat and dirt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTensor {
    pub values: Vec<f32>,
}

impl FrameTensor {
    pub const LEN: usize = FRAME_SIDE * FRAME_SIDE * FRAME_CHANNELS;

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; Self::LEN],
        }
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[(row * FRAME_SIDE + col) * FRAME_CHANNELS + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.values[(row * FRAME_SIDE + col) * FRAME_CHANNELS + ch] = v;
    }

    /// The same crop seen after `quarter` right turns in place:
    /// one turn maps position `(i, j)` to `(j, 6 - i)` of the original.
    pub fn rotated(&self, quarter: usize) -> FrameTensor {
        let last = FRAME_SIDE - 1;
        let mut cur = self.clone();
        for _ in 0..quarter % 4 {
            let mut next = FrameTensor::zeros();
            for i in 0..FRAME_SIDE {
                for j in 0..FRAME_SIDE {
                    let src = (j * FRAME_SIDE + last - i) * FRAME_CHANNELS;
                    let dst = (i * FRAME_SIDE + j) * FRAME_CHANNELS;
                    next.values[dst..dst + FRAME_CHANNELS].copy_from_slice(&cur.values[src..src + FRAME_CHANNELS]);
                }
            }
            cur = next;
        }
        cur
    }

    /// Cell kind shown at a crop position.
    pub fn kind_at(&self, row: usize, col: usize) -> Option<CellKind> {
        use CellKind::*;
        [Empty, Tree, Stone, Dirt, Water, Crop, Animal, Wall]
            .into_iter()
            .find(|k| self.at(row, col, *k as usize) == 1.0)
    }
}

/// Renders the crop centred on the agent and rotated so its facing points up.
pub fn render(state: &WorldState) -> FrameTensor {
    let half = (FRAME_SIDE / 2) as isize;
    let (fr, fc) = state.agent_facing.delta();
    let (rr, rc) = state.agent_facing.right().delta();
    let (ar, ac) = (state.agent_pos.0 as isize, state.agent_pos.1 as isize);
    let mut frame = FrameTensor::zeros();
    let inv: Vec<f32> = INVENTORY_CHANNELS
        .iter()
        .map(|&r| (state.inventory.count(r) as f32 / 8.0).min(1.0))
        .collect();
    for i in 0..FRAME_SIDE {
        for j in 0..FRAME_SIDE {
            let ahead = half - i as isize;
            let right = j as isize - half;
            let kind = state.cell_at(ar + ahead * fr + right * rr, ac + ahead * fc + right * rc);
            frame.set(i, j, kind as usize, 1.0);
            for (k, &v) in inv.iter().enumerate() {
                frame.set(i, j, CellKind::COUNT + k, v);
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_world, EnvConfig, Facing};

    fn world() -> WorldState {
        generate_world(11, &EnvConfig::default()).unwrap()
    }

    #[test]
    fn north_crop_is_plain_window() {
        let mut w = world();
        w.agent_facing = Facing::N;
        let f = render(&w);
        let (r, c) = (w.agent_pos.0 as isize, w.agent_pos.1 as isize);
        for i in 0..7 {
            for j in 0..7 {
                let want = w.cell_at(r - 3 + i as isize, c - 3 + j as isize);
                assert_eq!(f.kind_at(i, j), Some(want));
            }
        }
    }

    #[test]
    fn east_crop_is_rotated_north_crop() {
        let mut w = world();
        w.agent_facing = Facing::N;
        let north = render(&w);
        w.agent_facing = Facing::E;
        let east = render(&w);
        // Turning right by 90 degrees rotates the view counter-clockwise.
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(east.kind_at(i, j), north.kind_at(j, 6 - i));
            }
        }
    }

    #[test]
    fn rotated_matches_turning_in_place() {
        let mut w = world();
        for facing in Facing::ORDER {
            w.agent_facing = facing;
            let base = render(&w);
            w.agent_facing = facing.right();
            assert_eq!(render(&w), base.rotated(1));
            w.agent_facing = facing.left();
            assert_eq!(render(&w), base.rotated(3));
            w.agent_facing = facing;
            assert_eq!(base.rotated(4), base);
        }
    }

    #[test]
    fn values_are_one_hot_and_bounded() {
        let mut w = world();
        w.inventory.add(Resource::Wood, 20);
        w.inventory.add(Resource::Meat, 2);
        let f = render(&w);
        assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..7 {
            for j in 0..7 {
                let s: f32 = (0..CellKind::COUNT).map(|c| f.at(i, j, c)).sum();
                assert_eq!(s, 1.0);
                assert_eq!(f.at(i, j, 8), 1.0);
                assert_eq!(f.at(i, j, 9), 0.0);
                assert_eq!(f.at(i, j, 10), 0.25);
            }
        }
    }

    #[test]
    fn empty_inventory_channels_are_zero() {
        let f = render(&world());
        for i in 0..7 {
            for j in 0..7 {
                for c in 8..12 {
                    assert_eq!(f.at(i, j, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn cells_outside_window_do_not_matter() {
        let w = world();
        let base = render(&w);
        let n = w.size;
        for r in 0..n {
            for c in 0..n {
                let dr = r as isize - w.agent_pos.0 as isize;
                let dc = c as isize - w.agent_pos.1 as isize;
                if dr.abs() <= 3 && dc.abs() <= 3 {
                    continue;
                }
                let mut w2 = w.clone();
                w2.grid[r * n + c] = CellKind::Water;
                assert_eq!(render(&w2), base);
            }
        }
    }
}
