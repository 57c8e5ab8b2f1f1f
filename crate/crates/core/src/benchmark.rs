//! Benchmark tasks, success predicates and failure attribution.
//!
//! Every run is classified into exactly one of SR (success), TP (task
//! planner), OD (optimisation designer) or CO (collision), with priority
//! CO > TP > OD > SR. A plan counts as a planner failure when replaying its
//! steps with the demonstrator's true cost does not satisfy the task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::demos::Oracle;
use crate::error::{Error, Result};
use crate::execute::{execute_plan, EpisodeResult, EpisodeStatus, Pipeline};
use crate::language::TaskPlan;
use crate::sim::{spawn_scene, Layout, SceneState, Vec3};

/// xy tolerance of placements.
pub const XY_TOL: f64 = 0.015;
/// Height tolerance of placements.
pub const Z_TOL: f64 = 0.01;
/// Extra centre spacing beyond touching allowed for side-by-side cubes.
pub const GAP_TOL: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTask {
    Stack,
    Pyramid,
    LShape,
}

impl std::str::FromStr for BenchTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stack" => Ok(Self::Stack),
            "pyramid" => Ok(Self::Pyramid),
            "l_shape" | "l-shape" => Ok(Self::LShape),
            other => Err(Error::InvalidArgument(format!("unknown benchmark task {other:?}"))),
        }
    }
}

impl std::fmt::Display for BenchTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchTask::Stack => "stack",
            BenchTask::Pyramid => "pyramid",
            BenchTask::LShape => "l_shape",
        })
    }
}

fn cube_height(scene: &SceneState) -> f64 {
    scene.objects.first().map(|o| 2.0 * o.half_extent.z).unwrap_or(0.0)
}

fn xy(p: &Vec3) -> nalgebra::Vector2<f64> {
    nalgebra::Vector2::new(p.x, p.y)
}

fn on_table(scene: &SceneState, p: &Vec3) -> bool {
    (p.z - cube_height(scene) / 2.0).abs() <= Z_TOL
}

fn beside(h: f64, d: f64) -> bool {
    (h..=h + GAP_TOL).contains(&d)
}

impl BenchTask {
    pub const ALL: [BenchTask; 3] = [BenchTask::Stack, BenchTask::Pyramid, BenchTask::LShape];

    pub fn command(&self) -> &'static str {
        match self {
            BenchTask::Stack => "stack all cubes",
            BenchTask::Pyramid => "build a pyramid",
            BenchTask::LShape => "arrange the cubes in an l shape",
        }
    }

    /// Geometric success predicate on the final scene.
    pub fn success(&self, scene: &SceneState) -> bool {
        let h = cube_height(scene);
        let p: Vec<Vec3> = scene.object_positions();
        match self {
            BenchTask::Stack => {
                let mut sorted = p.clone();
                sorted.sort_by(|a, b| a.z.total_cmp(&b.z));
                let base = sorted[0];
                on_table(scene, &base)
                    && sorted.iter().all(|c| (xy(c) - xy(&base)).norm() <= XY_TOL)
                    && sorted.windows(2).all(|w| ((w[1].z - w[0].z) - h).abs() <= Z_TOL)
            }
            BenchTask::Pyramid => {
                let n = p.len();
                (0..n).any(|a| {
                    (0..n).any(|b| {
                        (0..n).any(|t| {
                            if a >= b || t == a || t == b {
                                return false;
                            }
                            let (pa, pb, pt) = (p[a], p[b], p[t]);
                            let ab = xy(&pb) - xy(&pa);
                            if !on_table(scene, &pa) || !on_table(scene, &pb) || !beside(h, ab.norm()) {
                                return false;
                            }
                            let s = (xy(&pt) - xy(&pa)).dot(&ab) / ab.norm_squared();
                            let foot = xy(&pa) + ab * s;
                            s > 0.0
                                && s < 1.0
                                && (xy(&pt) - foot).norm() <= XY_TOL
                                && ((pt.z - pa.z) - h).abs() <= Z_TOL
                        })
                    })
                })
            }
            BenchTask::LShape => {
                let n = p.len();
                (0..n).any(|c| {
                    (0..n).any(|a| {
                        (0..n).any(|b| {
                            if a >= b || a == c || b == c {
                                return false;
                            }
                            let va = xy(&p[a]) - xy(&p[c]);
                            let vb = xy(&p[b]) - xy(&p[c]);
                            [c, a, b].iter().all(|k| on_table(scene, &p[*k]))
                                && beside(h, va.norm())
                                && beside(h, vb.norm())
                                && (va.dot(&vb) / (va.norm() * vb.norm())).abs() <= 0.25
                        })
                    })
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    SR,
    TP,
    OD,
    CO,
}

/// Attribute an episode. `plan_is_correct` replays a plan with the true cost.
pub fn classify_episode(
    result: &EpisodeResult,
    success: &dyn Fn(&SceneState) -> bool,
    plan_is_correct: &dyn Fn(&TaskPlan) -> bool,
) -> Category {
    if !result.collisions.is_empty() {
        return Category::CO;
    }
    let plan = match result.plan() {
        Some(p) if result.status != EpisodeStatus::Refused => p,
        _ => return Category::TP,
    };
    if !plan_is_correct(plan) {
        return Category::TP;
    }
    if result.status == EpisodeStatus::Failed || !success(result.final_scene()) {
        return Category::OD;
    }
    Category::SR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub category: Category,
    pub status: EpisodeStatus,
    pub collisions: usize,
    /// Line of this run's episode in the episode log.
    pub episode_ref: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub task: BenchTask,
    pub runs: usize,
    pub sr: f64,
    pub tp: f64,
    pub od: f64,
    pub co: f64,
    pub records: Vec<RunRecord>,
}

impl BenchmarkReport {
    pub fn from_records(task: BenchTask, records: Vec<RunRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("benchmark needs at least one run".into()));
        }
        let n = records.len() as f64;
        let pct = |c: Category| 100.0 * records.iter().filter(|r| r.category == c).count() as f64 / n;
        Ok(Self {
            task,
            runs: records.len(),
            sr: pct(Category::SR),
            tp: pct(Category::TP),
            od: pct(Category::OD),
            co: pct(Category::CO),
            records,
        })
    }
}

/// Initial scene of benchmark run `seed`.
pub fn benchmark_scene(seed: u64, cfg: &Config) -> SceneState {
    spawn_scene(Layout::Cubes, seed, &cfg.sim)
}

/// Run `runs` seeded episodes (seeds `seed, seed + 1, …`) in parallel.
pub fn run_benchmark(
    task: BenchTask,
    runs: usize,
    seed: u64,
    pipeline: &Pipeline<'_>,
    oracle: &Oracle,
    cfg: &Config,
) -> Result<(BenchmarkReport, Vec<EpisodeResult>)> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let results: Vec<(RunRecord, EpisodeResult)> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let s = seed + run as u64;
            let scene = benchmark_scene(s, cfg);
            let ep = pipeline.run(task.command(), &scene)?;
            let replay = |plan: &TaskPlan| {
                let r = execute_plan(plan, oracle, &scene, &cfg.sim, &cfg.solver, &cfg.execution);
                r.status == EpisodeStatus::Completed && task.success(r.final_scene())
            };
            let category = classify_episode(&ep, &|sc| task.success(sc), &replay);
            Ok((
                RunRecord {
                    run,
                    seed: s,
                    category,
                    status: ep.status,
                    collisions: ep.collisions.len(),
                    episode_ref: run,
                },
                ep,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, episodes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((BenchmarkReport::from_records(task, records)?, episodes))
}
