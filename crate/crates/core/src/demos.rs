//! Synthetic demonstrations: an oracle that solves the known-cost problem for
//! a sub-task, then perturbs its controls to mimic a near-optimal demonstrator.
//!
//! The perturbation is drawn as `ε ~ N(0, 2σ² H*⁻¹)` with `H*` the Hessian of
//! the demonstrator's cost in the stacked controls. That is exactly the
//! maximum-entropy demonstrator at temperature `1 / (2σ²)`, so the Laplace
//! likelihood used for learning is the true likelihood of the data. Directions
//! the cost does not care about get per-control noise of standard deviation σ.

use nalgebra::{Cholesky, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::constraint::ConstraintParams;
use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::features::{oracle_theta, rollout_stacked, FeatureLibrary, OracleWeights, SharedParams};
use crate::grammar::{self, Direction, SubTask, GRAMMAR_VERSION};
use crate::ocp::{solve_ocp, solve_ocp_from, straight_line_controls, OcpSpec, SolverConfig};
use crate::sim::{spawn_scene, ContState, DynamicsModel, Layout, SceneState, SimConfig, Trajectory, Vec3};

/// A demonstration together with the object positions of its scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub trajectory: Trajectory,
    pub objects: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTaskExample {
    pub id: usize,
    pub description: String,
    pub embedding: Option<EmbeddingVector>,
    pub demos_free: Vec<Demo>,
    pub demos_safe: Vec<Demo>,
    pub obstacle_truth: Option<ConstraintParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub examples: Vec<SubTaskExample>,
    pub grammar_version: String,
    pub dynamics: DynamicsModel,
    pub noise_scale: f64,
}

impl DemoSet {
    pub fn descriptions(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.description.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::InvalidArgument("demo set has no examples".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.examples {
            if !seen.insert(&e.description) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate description {:?}",
                    e.description
                )));
            }
            if e.demos_free.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "example {} has no demonstrations",
                    e.id
                )));
            }
            for d in e.demos_free.iter().chain(&e.demos_safe) {
                if d.trajectory.horizon() != self.dynamics.horizon {
                    return Err(Error::InvalidArgument(format!(
                        "example {} has a demonstration with horizon {} (expected {})",
                        e.id,
                        d.trajectory.horizon(),
                        self.dynamics.horizon
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The known-cost demonstrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub library: FeatureLibrary,
    pub weights: OracleWeights,
    pub dynamics: DynamicsModel,
    pub sim: SimConfig,
    pub solver: SolverConfig,
    /// The constrained oracle keeps this clearance (m) from the true obstacle.
    pub obstacle_clearance: f64,
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            library: FeatureLibrary::default(),
            weights: OracleWeights::default(),
            dynamics: DynamicsModel::default(),
            sim: SimConfig::default(),
            solver: SolverConfig::default(),
            obstacle_clearance: 0.01,
        }
    }
}

impl Oracle {
    pub fn theta(&self, subtask: &SubTask) -> Vec<f64> {
        oracle_theta(
            &self.library,
            subtask.object,
            &subtask.offset(self.sim.tool_offset),
            &self.weights,
        )
    }

    pub fn target(&self, subtask: &SubTask, objects: &[Vec3]) -> Result<Vec3> {
        subtask.target(objects, self.sim.tool_offset)
    }

    pub fn spec(&self, subtask: &SubTask, objects: &[Vec3], x0: ContState) -> OcpSpec {
        OcpSpec {
            theta: self.theta(subtask),
            m: SharedParams::default(),
            rho: None,
            library: self.library,
            objects: objects.to_vec(),
            x0,
            dynamics: self.dynamics,
        }
    }

    /// Noiseless optimum of the demonstrator's problem.
    pub fn optimum(
        &self,
        subtask: &SubTask,
        objects: &[Vec3],
        x0: ContState,
        obstacle: Option<&ConstraintParams>,
    ) -> Result<Trajectory> {
        let mut spec = self.spec(subtask, objects, x0);
        let Some(ob) = obstacle else {
            return Ok(solve_ocp(&spec, &self.solver)?.trajectory);
        };
        let keep_out = ob.inflated(self.obstacle_clearance);
        spec.rho = Some(keep_out);
        // Box avoidance is non-convex: start from the straight warm start and
        // from detours past every face and edge, keep the cheapest feasible.
        let target = self.target(subtask, objects)?;
        let mut inits: Vec<Option<Vec<f64>>> = vec![None];
        inits.extend(detour_waypoints(&keep_out, &x0.pos, &target).iter().map(|w| {
            Some(via_waypoint_controls(&x0, w, &target, &self.dynamics))
        }));
        let mut best: Option<crate::ocp::SolveResult> = None;
        let mut worst_violation: f64 = 0.0;
        for init in &inits {
            let r = match solve_ocp_from(&spec, &self.solver, init.as_deref()) {
                Ok(r) => r,
                Err(_) => continue,
            };
            if r.max_violation > self.obstacle_clearance {
                worst_violation = worst_violation.max(r.max_violation);
                continue;
            }
            if best.as_ref().map_or(true, |b| r.cost < b.cost) {
                best = Some(r);
            }
        }
        best.map(|r| r.trajectory).ok_or_else(|| {
            Error::Solver(format!(
                "constrained oracle left violation {worst_violation:.3e}"
            ))
        })
    }

    /// Add demonstrator noise `N(0, 2σ² H*⁻¹)` to a control sequence.
    pub fn perturb(
        &self,
        subtask: &SubTask,
        objects: &[Vec3],
        traj: &Trajectory,
        noise_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        if noise_scale == 0.0 {
            return Ok(traj.clone());
        }
        let x0 = traj.states[0];
        let u = traj.stacked_controls();
        let (_, h) = self.library.grad_hess_u(
            &x0,
            &u,
            &self.theta(subtask),
            &SharedParams::default(),
            objects,
            &self.dynamics,
        )?;
        let chol = Cholesky::new(h).ok_or_else(|| Error::Solver("oracle Hessian not PD".into()))?;
        let xi = DVector::from_fn(u.len(), |_, _| StandardNormal.sample(rng));
        // L⁻ᵀ ξ has covariance H⁻¹
        let lt = chol.l().transpose();
        let eps = lt
            .solve_upper_triangular(&xi)
            .ok_or_else(|| Error::Solver("triangular solve failed".into()))?
            * (noise_scale * 2f64.sqrt());
        let noisy: Vec<f64> = u
            .iter()
            .zip(eps.iter())
            .map(|(a, b)| (a + b).clamp(-self.dynamics.u_max, self.dynamics.u_max))
            .collect();
        rollout_stacked(&x0, &noisy, &self.dynamics)
    }

    /// Near-optimal demonstration of `description` from the scene's end-effector state.
    pub fn demo(&self, description: &str, scene: &SceneState, noise_scale: f64, seed: u64) -> Result<Trajectory> {
        let st = grammar::parse(description)?;
        let objects = scene.object_positions();
        let opt = self.optimum(&st, &objects, scene.cont(), None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.perturb(&st, &objects, &opt, noise_scale, &mut rng)
    }

    /// Demonstration shaped by an obstacle on the straight path to the target;
    /// noisy samples are redrawn until they stay outside the obstacle.
    pub fn demo_constrained(
        &self,
        description: &str,
        scene: &SceneState,
        obstacle: &ConstraintParams,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Trajectory> {
        let st = grammar::parse(description)?;
        let objects = scene.object_positions();
        let target = self.target(&st, &objects)?;
        if !segment_hits(obstacle, &scene.ee_pos, &target) {
            return Err(Error::Precondition(
                "obstacle does not intersect the straight path to the target".into(),
            ));
        }
        let opt = self.optimum(&st, &objects, scene.cont(), Some(obstacle))?;
        if !obstacle.trajectory_is_safe(&opt) {
            return Err(Error::Solver("constrained optimum enters the obstacle".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the demonstrator keeps its clearance; noisy samples must respect it too
        let keep_out = obstacle.inflated(self.obstacle_clearance);
        for _ in 0..1000 {
            let t = self.perturb(&st, &objects, &opt, noise_scale, &mut rng)?;
            if keep_out.trajectory_is_safe(&t) {
                return Ok(t);
            }
        }
        Err(Error::Solver(
            "could not draw a noisy demonstration outside the obstacle".into(),
        ))
    }
}

/// Points just outside each face and each edge of a box, placed at the
/// midpoint of the straight path along the remaining axes.
fn detour_waypoints(keep_out: &ConstraintParams, a: &Vec3, b: &Vec3) -> Vec<Vec3> {
    let mid = (a + b) / 2.0;
    let c = keep_out.center;
    let out = |axis: usize, sign: f64| c[axis] + sign * (keep_out.shape[axis] + 0.02);
    let mut pts = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut w = mid;
            w[axis] = out(axis, sign);
            pts.push(w);
        }
    }
    for a1 in 0..3 {
        for a2 in a1 + 1..3 {
            for s1 in [-1.0, 1.0] {
                for s2 in [-1.0, 1.0] {
                    let mut w = mid;
                    w[a1] = out(a1, s1);
                    w[a2] = out(a2, s2);
                    pts.push(w);
                }
            }
        }
    }
    pts
}

/// Straight-line controls to `w` over the first half of the horizon, then
/// to `target` over the rest.
fn via_waypoint_controls(x0: &ContState, w: &Vec3, target: &Vec3, dynamics: &DynamicsModel) -> Vec<f64> {
    let n1 = dynamics.horizon / 2;
    let d1 = dynamics.with_horizon(n1);
    let mut u = straight_line_controls(x0, w, &d1);
    let mid = match rollout_stacked(x0, &u, &d1) {
        Ok(t) => *t.states.last().expect("rollouts hold the initial state"),
        Err(_) => return straight_line_controls(x0, target, dynamics),
    };
    u.extend(straight_line_controls(&mid, target, &dynamics.with_horizon(dynamics.horizon - n1)));
    u
}

/// Box obstacle of the synthetic constraint-learning scene: 5 cm half-widths,
/// hovering above the middle of the table.
pub fn synthetic_obstacle() -> ConstraintParams {
    ConstraintParams::axis_box(Vec3::new(0.0, 0.0, 0.2), Vec3::repeat(0.05))
}

/// Does the segment `a → b` pass through the unsafe region?
pub fn segment_hits(obstacle: &ConstraintParams, a: &Vec3, b: &Vec3) -> bool {
    (0..=200).any(|i| {
        let s = i as f64 / 200.0;
        obstacle.g_eval(&(a + (b - a) * s)) > 0.0
    })
}

/// Distance from a point to the surface of an axis box (0 inside).
pub fn distance_to_box(obstacle: &ConstraintParams, p: &Vec3) -> f64 {
    let r = p - obstacle.center;
    let outside = Vec3::new(
        (r.x.abs() - obstacle.shape.x).max(0.0),
        (r.y.abs() - obstacle.shape.y).max(0.0),
        (r.z.abs() - obstacle.shape.z).max(0.0),
    );
    outside.norm()
}

/// Settings of a demo-generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub layout: Layout,
    pub tasks: usize,
    pub per_task: usize,
    pub offset_range: [f64; 2],
    pub directions: Vec<Direction>,
    pub objects: Vec<usize>,
    /// Demonstrator noise as a fraction of `u_max`.
    pub noise_frac: f64,
    /// Shared obstacle for the obstacle-influenced demonstrations.
    pub obstacle: Option<ConstraintParams>,
    /// Start positions are drawn uniformly from this box.
    pub start_min: [f64; 3],
    pub start_max: [f64; 3],
    /// Each object of a free-motion demonstration scene is raised by an
    /// independent uniform amount from this range (m). Without it every
    /// object shares the table height and the per-object vertical features
    /// are not identifiable.
    pub object_lift: [f64; 2],
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Cubes,
            tasks: 90,
            per_task: 20,
            offset_range: [0.04, 0.12],
            directions: Direction::ALL[..5].to_vec(),
            objects: vec![0, 1, 2, 3],
            noise_frac: 0.02,
            obstacle: None,
            start_min: [-0.25, -0.25, 0.15],
            start_max: [0.25, 0.25, 0.35],
            object_lift: [0.0, 0.15],
        }
    }
}

fn demo_seed(seed: u64, task: usize, demo: usize, attempt: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((task as u64) << 40)
        ^ ((demo as u64) << 20)
        ^ ((attempt as u64) << 8)
        ^ salt
}

fn random_start(cfg: &DemoConfig, rng: &mut ChaCha8Rng) -> Vec3 {
    use rand::Rng;
    Vec3::new(
        rng.gen_range(cfg.start_min[0]..cfg.start_max[0]),
        rng.gen_range(cfg.start_min[1]..cfg.start_max[1]),
        rng.gen_range(cfg.start_min[2]..cfg.start_max[2]),
    )
}

fn lift_objects(scene: &mut SceneState, cfg: &DemoConfig, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    let [lo, hi] = cfg.object_lift;
    if hi > lo {
        for o in &mut scene.objects {
            o.position.z += rng.gen_range(lo..hi);
        }
    }
}

fn free_demo(
    oracle: &Oracle,
    cfg: &DemoConfig,
    st: &SubTask,
    task: usize,
    d: usize,
    seed: u64,
) -> Result<Demo> {
    let noise = cfg.noise_frac * oracle.dynamics.u_max;
    for attempt in 0..100 {
        let s = demo_seed(seed, task, d, attempt, 0xF);
        let mut scene = spawn_scene(cfg.layout, s, &oracle.sim);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xABCD);
        scene.ee_pos = random_start(cfg, &mut rng);
        lift_objects(&mut scene, cfg, &mut rng);
        let t = oracle.demo(&st.to_string(), &scene, noise, s)?;
        if let Some(ob) = &cfg.obstacle {
            // free demonstrations stay clear of the same shell as the
            // obstacle-shaped ones, so neither family grazes the obstacle
            if !ob.inflated(oracle.obstacle_clearance).trajectory_is_safe(&t) {
                continue;
            }
        }
        return Ok(Demo {
            trajectory: t,
            objects: scene.object_positions(),
        });
    }
    Err(Error::Solver(format!(
        "no obstacle-free demonstration found for task {task}"
    )))
}

fn safe_demo(
    oracle: &Oracle,
    cfg: &DemoConfig,
    obstacle: &ConstraintParams,
    st: &SubTask,
    task: usize,
    d: usize,
    seed: u64,
) -> Result<Demo> {
    use rand::Rng;
    let noise = cfg.noise_frac * oracle.dynamics.u_max;
    let keep_out = obstacle.inflated(0.02);
    let mut last = None;
    for attempt in 0..200 {
        let s = demo_seed(seed, task, d, attempt, 0x5AFE);
        let mut scene = spawn_scene(cfg.layout, s, &oracle.sim);
        let objects = scene.object_positions();
        let target = oracle.target(st, &objects)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x1234);
        // mirror the target through the obstacle so the straight path crosses it
        let jitter = Vec3::new(
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
        );
        let start = obstacle.center * 2.0 - target + jitter;
        let inside_table = (0..3).all(|a| {
            start[a] >= oracle.sim.table_min[a] + 0.02 && start[a] <= oracle.sim.table_max[a] - 0.02
        });
        if !inside_table || keep_out.g_eval(&target) > 0.0 || keep_out.g_eval(&start) > 0.0 {
            continue;
        }
        scene.ee_pos = start;
        match oracle.demo_constrained(&st.to_string(), &scene, obstacle, noise, s) {
            Ok(t) => {
                return Ok(Demo {
                    trajectory: t,
                    objects,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| {
        Error::Precondition(format!(
            "no start state found whose path to task {task} crosses the obstacle"
        ))
    }))
}

/// Generate a full demonstration set; parallel over sub-tasks, deterministic per seed.
pub fn generate_demoset(oracle: &Oracle, cfg: &DemoConfig, seed: u64) -> Result<DemoSet> {
    let subtasks = grammar::grammar_subtasks(
        cfg.tasks,
        cfg.offset_range,
        &cfg.directions,
        &cfg.objects,
        seed,
    )?;
    generate_for_subtasks(oracle, cfg, &subtasks, seed)
}

pub fn generate_for_subtasks(
    oracle: &Oracle,
    cfg: &DemoConfig,
    subtasks: &[SubTask],
    seed: u64,
) -> Result<DemoSet> {
    if cfg.per_task == 0 {
        return Err(Error::InvalidArgument("per_task must be >= 1".into()));
    }
    let examples: Result<Vec<SubTaskExample>> = subtasks
        .par_iter()
        .enumerate()
        .map(|(i, st)| {
            let demos_free = (0..cfg.per_task)
                .map(|d| free_demo(oracle, cfg, st, i, d, seed))
                .collect::<Result<Vec<_>>>()?;
            let demos_safe = match &cfg.obstacle {
                None => Vec::new(),
                Some(ob) => (0..cfg.per_task)
                    .map(|d| safe_demo(oracle, cfg, ob, st, i, d, seed))
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok(SubTaskExample {
                id: i,
                description: st.to_string(),
                embedding: None,
                demos_free,
                demos_safe,
                obstacle_truth: cfg.obstacle,
            })
        })
        .collect();
    Ok(DemoSet {
        examples: examples?,
        grammar_version: GRAMMAR_VERSION.to_string(),
        dynamics: oracle.dynamics,
        noise_scale: cfg.noise_frac * oracle.dynamics.u_max,
    })
}

/// Embed every example description with `provider` (in one batch).
pub fn attach_embeddings(set: &mut DemoSet, provider: &dyn EmbeddingProvider) -> Result<()> {
    let texts = set.descriptions();
    let vecs = provider.embed(&texts)?;
    if vecs.len() != texts.len() {
        return Err(Error::Embedding(format!(
            "provider returned {} embeddings for {} texts",
            vecs.len(),
            texts.len()
        )));
    }
    for (ex, v) in set.examples.iter_mut().zip(vecs) {
        ex.embedding = Some(v);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSONL persistence

#[derive(Serialize, Deserialize)]
struct Header {
    grammar_version: String,
    dynamics: DynamicsModel,
    noise_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Free,
    Safe,
    Embedding,
}

#[derive(Deserialize)]
struct Record {
    subtask_id: usize,
    description: String,
    kind: Kind,
    #[serde(default)]
    states: Vec<[f64; 6]>,
    #[serde(default)]
    controls: Vec<[f64; 3]>,
    #[serde(default)]
    objects: Vec<[f64; 3]>,
    #[serde(default)]
    obstacle: Option<ConstraintParams>,
    #[serde(default)]
    embedding: Option<EmbeddingVector>,
}

fn fmt_f(out: &mut String, v: f64) {
    // 17 significant digits round-trip every f64 exactly
    let _ = write!(out, "{v:.16e}");
}

fn fmt_rows<const K: usize>(out: &mut String, rows: impl Iterator<Item = [f64; K]>) {
    out.push('[');
    for (i, r) in rows.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (k, v) in r.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            fmt_f(out, *v);
        }
        out.push(']');
    }
    out.push(']');
}

fn demo_line(id: usize, description: &str, kind: &str, demo: &Demo, obstacle: &Option<ConstraintParams>) -> Result<String> {
    let mut s = String::new();
    s.push_str("{\"subtask_id\":");
    let _ = write!(s, "{id}");
    s.push_str(",\"description\":");
    s.push_str(&serde_json::to_string(description)?);
    let _ = write!(s, ",\"kind\":\"{kind}\",\"states\":");
    fmt_rows(&mut s, demo.trajectory.states.iter().map(|x| x.to_array()));
    s.push_str(",\"controls\":");
    fmt_rows(&mut s, demo.trajectory.controls.iter().map(|u| [u.x, u.y, u.z]));
    s.push_str(",\"objects\":");
    fmt_rows(&mut s, demo.objects.iter().map(|o| [o.x, o.y, o.z]));
    if let Some(ob) = obstacle {
        s.push_str(",\"obstacle\":");
        s.push_str(&serde_json::to_string(ob)?);
    }
    s.push('}');
    Ok(s)
}

pub fn save_demoset(set: &DemoSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        grammar_version: set.grammar_version.clone(),
        dynamics: set.dynamics,
        noise_scale: set.noise_scale,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for e in &set.examples {
        if let Some(emb) = &e.embedding {
            let rec = serde_json::json!({
                "subtask_id": e.id,
                "description": e.description,
                "kind": "embedding",
                "embedding": emb,
            });
            writeln!(w, "{rec}")?;
        }
        for d in &e.demos_free {
            writeln!(w, "{}", demo_line(e.id, &e.description, "free", d, &e.obstacle_truth)?)?;
        }
        for d in &e.demos_safe {
            writeln!(w, "{}", demo_line(e.id, &e.description, "safe", d, &e.obstacle_truth)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_demoset(path: &Path) -> Result<DemoSet> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or(Error::Format {
            line: 1,
            reason: "empty file".into(),
        })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if header.grammar_version != GRAMMAR_VERSION {
        return Err(Error::Version {
            expected: GRAMMAR_VERSION.into(),
            found: header.grammar_version,
        });
    }
    let mut by_id: BTreeMap<usize, SubTaskExample> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: lineno,
            reason: e.to_string(),
        })?;
        let ex = by_id.entry(rec.subtask_id).or_insert_with(|| SubTaskExample {
            id: rec.subtask_id,
            description: rec.description.clone(),
            embedding: None,
            demos_free: Vec::new(),
            demos_safe: Vec::new(),
            obstacle_truth: None,
        });
        if ex.description != rec.description {
            return Err(Error::Format {
                line: lineno,
                reason: format!("subtask {} has conflicting descriptions", rec.subtask_id),
            });
        }
        if rec.obstacle.is_some() {
            ex.obstacle_truth = rec.obstacle;
        }
        let demo = |rec: &Record| -> Result<Demo> {
            if rec.states.len() != rec.controls.len() + 1 {
                return Err(Error::Format {
                    line: lineno,
                    reason: "states must be one longer than controls".into(),
                });
            }
            Ok(Demo {
                trajectory: Trajectory {
                    states: rec
                        .states
                        .iter()
                        .map(|s| ContState::from_slice(s))
                        .collect::<Result<_>>()?,
                    controls: rec.controls.iter().map(|u| Vec3::from(*u)).collect(),
                },
                objects: rec.objects.iter().map(|o| Vec3::from(*o)).collect(),
            })
        };
        match rec.kind {
            Kind::Free => ex.demos_free.push(demo(&rec)?),
            Kind::Safe => ex.demos_safe.push(demo(&rec)?),
            Kind::Embedding => {
                ex.embedding = Some(rec.embedding.ok_or(Error::Format {
                    line: lineno,
                    reason: "embedding record without embedding".into(),
                })?)
            }
        }
    }
    Ok(DemoSet {
        examples: by_id.into_values().collect(),
        grammar_version: header.grammar_version,
        dynamics: header.dynamics,
        noise_scale: header.noise_scale,
    })
}
