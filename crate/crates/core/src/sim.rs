//! Tabletop world: a 3-D double-integrator end-effector, a gripper and a
//! handful of axis-aligned boxes.
//!
//! The continuous part of the state (`ContState`) is what the optimal-control
//! problem sees; `SceneState` adds the discrete bookkeeping (gripper, held
//! object, object poses) that the executor needs.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used when checking a control against `u_max`.
const BOUND_SLACK: f64 = 1e-9;

/// Position and velocity of the end-effector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContState {
    pub pos: Vec3,
    pub vel: Vec3,
}

impl ContState {
    pub fn new(pos: Vec3, vel: Vec3) -> Self {
        Self { pos, vel }
    }

    pub fn at_rest(pos: Vec3) -> Self {
        Self {
            pos,
            vel: Vec3::zeros(),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.pos.x, self.pos.y, self.pos.z, self.vel.x, self.vel.y, self.vel.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::Dimension {
                what: "state",
                expected: 6,
                got: v.len(),
            });
        }
        Ok(Self {
            pos: Vec3::new(v[0], v[1], v[2]),
            vel: Vec3::new(v[3], v[4], v[5]),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DoubleIntegrator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsModel {
    pub dt: f64,
    pub horizon: usize,
    pub u_max: f64,
    pub kind: ModelKind,
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 20,
            u_max: 2.0,
            kind: ModelKind::DoubleIntegrator,
        }
    }
}

impl DynamicsModel {
    pub fn new(dt: f64, horizon: usize, u_max: f64) -> Result<Self> {
        let d = Self {
            dt,
            horizon,
            u_max,
            kind: ModelKind::DoubleIntegrator,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.horizon < 2 {
            return Err(Error::InvalidArgument(format!(
                "horizon must be >= 2, got {}",
                self.horizon
            )));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::InvalidArgument(format!("u_max must be > 0, got {}", self.u_max)));
        }
        Ok(())
    }

    /// Same model with a different horizon (used by shrinking-horizon replanning).
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..*self }
    }

    /// Number of stacked control variables, `3 N`.
    pub fn n_controls(&self) -> usize {
        3 * self.horizon
    }

    /// Sensitivity of the terminal position to control `j` (same on every axis).
    pub fn terminal_pos_row(&self) -> Vec<f64> {
        let n = self.horizon as f64;
        (0..self.horizon)
            .map(|j| self.dt * self.dt * (n - j as f64 - 0.5))
            .collect()
    }

    /// Sensitivity of the terminal velocity to control `j`.
    pub fn terminal_vel_row(&self) -> Vec<f64> {
        vec![self.dt; self.horizon]
    }

    pub fn check_control(&self, u: &Vec3) -> Result<()> {
        for (i, v) in u.iter().enumerate() {
            if !v.is_finite() || v.abs() > self.u_max + BOUND_SLACK {
                return Err(Error::BoundViolation {
                    index: i,
                    value: *v,
                    bound: self.u_max,
                });
            }
        }
        Ok(())
    }
}

/// One step of the zero-order-hold double integrator.
pub fn step(x: &ContState, accel: &Vec3, dynamics: &DynamicsModel) -> Result<ContState> {
    dynamics.check_control(accel)?;
    Ok(step_unchecked(x, accel, dynamics.dt))
}

pub(crate) fn step_unchecked(x: &ContState, accel: &Vec3, dt: f64) -> ContState {
    ContState {
        pos: x.pos + x.vel * dt + accel * (0.5 * dt * dt),
        vel: x.vel + accel * dt,
    }
}

/// State/control sequences over a horizon: `states.len() == controls.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<ContState>,
    pub controls: Vec<Vec3>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &ContState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Controls stacked as `u[3 j + axis]`.
    pub fn stacked_controls(&self) -> Vec<f64> {
        stack_controls(&self.controls)
    }
}

pub fn stack_controls(controls: &[Vec3]) -> Vec<f64> {
    controls.iter().flat_map(|u| [u.x, u.y, u.z]).collect()
}

pub fn unstack_controls(u: &[f64]) -> Vec<Vec3> {
    u.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Roll the dynamics forward over exactly `dynamics.horizon` controls.
pub fn rollout(x0: &ContState, controls: &[Vec3], dynamics: &DynamicsModel) -> Result<Trajectory> {
    if controls.len() != dynamics.horizon {
        return Err(Error::Dimension {
            what: "control sequence",
            expected: dynamics.horizon,
            got: controls.len(),
        });
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    for u in controls {
        let next = step(states.last().unwrap(), u, dynamics)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    None,
    Open,
    Close,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Cubes,
    Sponge,
    Drawer,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubes" => Ok(Layout::Cubes),
            "sponge" => Ok(Layout::Sponge),
            "drawer" => Ok(Layout::Drawer),
            other => Err(Error::InvalidArgument(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub name: String,
    pub position: Vec3,
    pub half_extent: Vec3,
    /// Direction along which the object may slide (drawer handle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide_axis: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ee_pos: Vec3,
    pub ee_vel: Vec3,
    pub gripper: Gripper,
    pub held_object: Option<usize>,
    /// Object position minus end-effector position, fixed at grasp time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_offset: Option<Vec3>,
    pub objects: Vec<SceneObject>,
}

impl SceneState {
    pub fn cont(&self) -> ContState {
        ContState::new(self.ee_pos, self.ee_vel)
    }

    pub fn object_positions(&self) -> Vec<Vec3> {
        self.objects.iter().map(|o| o.position).collect()
    }
}

/// Geometry and layout parameters of the simulated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub table_min: [f64; 3],
    pub table_max: [f64; 3],
    pub grasp_radius: f64,
    /// Fingertip sits this far below the end-effector point.
    pub tool_offset: f64,
    pub ee_inflation: f64,
    /// Penetration depth below which touching boxes do not count as a collision.
    pub collision_tolerance: f64,
    pub cube_half_extent: f64,
    pub cube_spawn_extent: f64,
    pub cube_min_separation: f64,
    pub home: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            table_min: [-0.5, -0.5, 0.0],
            table_max: [0.5, 0.5, 0.6],
            grasp_radius: 0.02,
            tool_offset: 0.04,
            ee_inflation: 0.005,
            collision_tolerance: 0.003,
            cube_half_extent: 0.0225,
            cube_spawn_extent: 0.3,
            cube_min_separation: 0.15,
            home: [0.0, 0.0, 0.3],
        }
    }
}

impl SimConfig {
    pub fn clamp_to_table(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.table_min[0], self.table_max[0]),
            p.y.clamp(self.table_min[1], self.table_max[1]),
            p.z.clamp(self.table_min[2], self.table_max[2]),
        )
    }

    pub fn home(&self) -> Vec3 {
        Vec3::from(self.home)
    }
}

pub const OBJECT_NAMES: [&str; 8] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight",
];

/// Deterministic scene generation; cubes are rejection-sampled until pairwise
/// separated by `cube_min_separation`.
pub fn spawn_scene(layout: Layout, seed: u64, cfg: &SimConfig) -> SceneState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.cube_half_extent;
    let cube = |id: usize, position: Vec3| SceneObject {
        id,
        name: OBJECT_NAMES[id].to_string(),
        position,
        half_extent: Vec3::repeat(h),
        slide_axis: None,
    };
    let objects = match layout {
        Layout::Cubes => {
            let mut placed: Vec<Vec3> = Vec::with_capacity(4);
            let ext = cfg.cube_spawn_extent;
            while placed.len() < 4 {
                let p = Vec3::new(rng.gen_range(-ext..ext), rng.gen_range(-ext..ext), h);
                let ok = placed
                    .iter()
                    .all(|q| (p - q).xy().norm() > cfg.cube_min_separation);
                // Keep cubes away from the home point directly below the arm.
                if ok && p.xy().norm() > 0.05 {
                    placed.push(p);
                }
            }
            placed.into_iter().enumerate().map(|(i, p)| cube(i, p)).collect()
        }
        Layout::Sponge => {
            let pan = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.0), 0.02);
            let sponge = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(0.12..0.25), h);
            vec![
                SceneObject {
                    id: 0,
                    name: "one".into(),
                    position: pan,
                    half_extent: Vec3::new(0.08, 0.08, 0.02),
                    slide_axis: None,
                },
                cube(1, sponge),
            ]
        }
        Layout::Drawer => {
            let handle = Vec3::new(rng.gen_range(-0.2..0.0), rng.gen_range(-0.2..0.2), 0.15);
            vec![SceneObject {
                id: 0,
                name: "one".into(),
                position: handle,
                half_extent: Vec3::new(0.01, 0.04, 0.01),
                slide_axis: Some(Vec3::x()),
            }]
        }
    };
    SceneState {
        ee_pos: cfg.home(),
        ee_vel: Vec3::zeros(),
        gripper: Gripper::Open,
        held_object: None,
        held_offset: None,
        objects,
    }
}

/// Fingertip (grasp point) of the end-effector.
pub fn fingertip(ee: &Vec3, cfg: &SimConfig) -> Vec3 {
    ee - Vec3::z() * cfg.tool_offset
}

pub fn apply_gripper(state: &SceneState, action: GripperAction, cfg: &SimConfig) -> SceneState {
    let mut s = state.clone();
    match action {
        GripperAction::None => {}
        GripperAction::Open => {
            s.gripper = Gripper::Open;
            s.held_object = None;
            s.held_offset = None;
        }
        GripperAction::Close => {
            s.gripper = Gripper::Closed;
            if s.held_object.is_none() {
                let tip = fingertip(&s.ee_pos, cfg);
                let nearest = s
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, (o.position - tip).norm()))
                    .filter(|(_, d)| *d <= cfg.grasp_radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = nearest {
                    s.held_object = Some(i);
                    s.held_offset = Some(s.objects[i].position - s.ee_pos);
                }
            }
        }
    }
    s
}

/// Advance the scene by one control step; a held object follows the end-effector.
pub fn advance(
    state: &SceneState,
    accel: &Vec3,
    dynamics: &DynamicsModel,
    cfg: &SimConfig,
) -> Result<SceneState> {
    let next = step(&state.cont(), accel, dynamics)?;
    let mut s = state.clone();
    s.ee_pos = next.pos;
    s.ee_vel = next.vel;
    if let (Some(i), Some(off)) = (s.held_object, s.held_offset) {
        s.objects[i].position = cfg.clamp_to_table(&(s.ee_pos + off));
    }
    Ok(s)
}

/// Penetration depth of two axis-aligned boxes (negative when separated).
pub fn box_penetration(c1: &Vec3, h1: &Vec3, c2: &Vec3, h2: &Vec3) -> f64 {
    (0..3)
        .map(|a| h1[a] + h2[a] - (c1[a] - c2[a]).abs())
        .fold(f64::INFINITY, f64::min)
}

/// A collision between the end-effector or the held object and another body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    /// `None` when the colliding body is the end-effector itself.
    pub moving: Option<usize>,
    pub other: usize,
    pub depth: f64,
}

pub fn detect_collisions(state: &SceneState, cfg: &SimConfig) -> Vec<CollisionEvent> {
    let mut out = Vec::new();
    let ee_half = Vec3::repeat(cfg.ee_inflation);
    for (i, o) in state.objects.iter().enumerate() {
        if Some(i) == state.held_object {
            continue;
        }
        let d = box_penetration(&state.ee_pos, &ee_half, &o.position, &o.half_extent);
        if d > cfg.collision_tolerance {
            out.push(CollisionEvent {
                moving: None,
                other: i,
                depth: d,
            });
        }
        if let Some(h) = state.held_object {
            let held = &state.objects[h];
            let d = box_penetration(&held.position, &held.half_extent, &o.position, &o.half_extent);
            if d > cfg.collision_tolerance {
                out.push(CollisionEvent {
                    moving: Some(h),
                    other: i,
                    depth: d,
                });
            }
        }
    }
    out
}
