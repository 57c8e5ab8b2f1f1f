//! The sub-task grammar: `"<d> meters <direction> of object <k>"`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::sim::{Vec3, OBJECT_NAMES};

pub const GRAMMAR_VERSION: &str = "grammar-v1";

/// Step of the distance grid, meters.
pub const DISTANCE_STEP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Right,
    Left,
    Front,
    Behind,
    Above,
    Below,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Right,
        Direction::Left,
        Direction::Front,
        Direction::Behind,
        Direction::Above,
        Direction::Below,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Front => "front",
            Direction::Behind => "behind",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|d| d.word() == w)
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|d| d == self).unwrap()
    }

    pub fn unit(&self) -> Vec3 {
        match self {
            Direction::Right => Vec3::x(),
            Direction::Left => -Vec3::x(),
            Direction::Front => Vec3::y(),
            Direction::Behind => -Vec3::y(),
            Direction::Above => Vec3::z(),
            Direction::Below => -Vec3::z(),
        }
    }

    pub fn is_vertical(&self) -> bool {
        matches!(self, Direction::Above | Direction::Below)
    }
}

pub fn object_word(k: usize) -> Option<&'static str> {
    OBJECT_NAMES.get(k).copied()
}

pub fn object_from_word(w: &str) -> Option<usize> {
    OBJECT_NAMES.iter().position(|n| *n == w)
}

/// A parsed motion sub-task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub distance: f64,
    pub direction: Direction,
    /// Zero-based object index (`"one"` is 0).
    pub object: usize,
}

impl SubTask {
    pub fn new(distance: f64, direction: Direction, object: usize) -> Self {
        Self {
            distance,
            direction,
            object,
        }
    }

    /// End-effector target for this sub-task. Horizontal offsets are measured
    /// at grasp height, i.e. with the fingertip level with the object centre.
    pub fn target(&self, objects: &[Vec3], tool_offset: f64) -> Result<Vec3> {
        let o = objects.get(self.object).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "object {} not present in a scene with {} objects",
                self.object + 1,
                objects.len()
            ))
        })?;
        let lift = if self.direction.is_vertical() {
            0.0
        } else {
            tool_offset
        };
        Ok(o + self.direction.unit() * self.distance + Vec3::z() * lift)
    }

    /// Offset of the target from the object centre.
    pub fn offset(&self, tool_offset: f64) -> Vec3 {
        let lift = if self.direction.is_vertical() {
            0.0
        } else {
            tool_offset
        };
        self.direction.unit() * self.distance + Vec3::z() * lift
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2} meters {} of object {}",
            self.distance,
            self.direction.word(),
            object_word(self.object).unwrap_or("unknown")
        )
    }
}

/// Strict parser for the grammar; any deviation is an error.
pub fn parse(text: &str) -> Result<SubTask> {
    let err = |reason: &str| Error::Parse {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(err("expected 6 tokens"));
    }
    let distance: f64 = toks[0].parse().map_err(|_| err("distance is not a number"))?;
    if !distance.is_finite() || distance < 0.0 {
        return Err(err("distance must be finite and nonnegative"));
    }
    if toks[1] != "meters" || toks[3] != "of" || toks[4] != "object" {
        return Err(err("does not match '<d> meters <direction> of object <k>'"));
    }
    let direction = Direction::from_word(toks[2]).ok_or_else(|| err("unknown direction"))?;
    let object = object_from_word(toks[5]).ok_or_else(|| err("unknown object"))?;
    Ok(SubTask {
        distance,
        direction,
        object,
    })
}

/// Distance grid over `[lo, hi]` with the fixed step.
pub fn distance_grid(lo: f64, hi: f64) -> Vec<f64> {
    let a = (lo / DISTANCE_STEP).round() as i64;
    let b = (hi / DISTANCE_STEP).round() as i64;
    (a..=b).map(|k| k as f64 * DISTANCE_STEP).collect()
}

fn key(t: &SubTask) -> (i64, Direction, usize) {
    ((t.distance / DISTANCE_STEP).round() as i64, t.direction, t.object)
}

/// Deterministic, duplicate-free selection of `count` sub-tasks.
///
/// Every (direction, object) pair is used once before any pair repeats, and
/// each direction draws its distances from its own shuffled copy of the grid
/// with the two range endpoints first, so every direction spans the full
/// range as soon as it has two examples.
pub fn grammar_subtasks(
    count: usize,
    offset_range: [f64; 2],
    directions: &[Direction],
    objects: &[usize],
    seed: u64,
) -> Result<Vec<SubTask>> {
    if offset_range[0] > offset_range[1] || offset_range[0] < 0.0 {
        return Err(Error::InvalidArgument(format!("bad offset range {offset_range:?}")));
    }
    let grid = distance_grid(offset_range[0], offset_range[1]);
    let total = grid.len() * directions.len() * objects.len();
    if count > total {
        return Err(Error::InvalidArgument(format!(
            "requested {count} sub-tasks but only {total} distinct combinations exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Direction, usize)> = directions
        .iter()
        .flat_map(|d| objects.iter().map(move |o| (*d, *o)))
        .collect();

    let mut queues: HashMap<Direction, Vec<f64>> = HashMap::new();
    let refill = |rng: &mut ChaCha8Rng| {
        let mut inner: Vec<f64> = if grid.len() > 2 {
            grid[1..grid.len() - 1].to_vec()
        } else {
            Vec::new()
        };
        inner.shuffle(rng);
        let mut q = vec![grid[0]];
        if grid.len() > 1 {
            q.push(*grid.last().unwrap());
        }
        q.extend(inner);
        q.reverse(); // popped from the back
        q
    };

    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut round = 0usize;
    while out.len() < count {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        for (dir, obj) in order {
            if out.len() == count {
                break;
            }
            // try queued distances until an unused combination appears
            let mut chosen = None;
            for _ in 0..(2 * grid.len() + 2) {
                let q = queues.entry(dir).or_default();
                if q.is_empty() {
                    *q = refill(&mut rng);
                }
                let d = q.pop().unwrap();
                let t = SubTask::new(d, dir, obj);
                if !used.contains(&key(&t)) {
                    chosen = Some(t);
                    break;
                }
            }
            if let Some(t) = chosen {
                used.insert(key(&t));
                out.push(t);
            }
        }
        round += 1;
        if round > total + 1 {
            break;
        }
    }
    debug_assert_eq!(out.len(), count);
    Ok(out)
}
