//! Plan execution on the simulator.
//!
//! Each move step is designed once, with the object positions at that moment
//! (so a move relative to the held cube has a fixed target), and then solved
//! with a shrinking horizon: after every `replan_period` applied controls the
//! problem is re-solved from the current state over the remaining steps.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::config::{ExecutionConfig, ValidationConfig};
use crate::embedding::{CoverageGate, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::language::{plan_with_replanning, OcpDesigner, PlanOutcome, PlanStep, Planner, TaskPlan};
use crate::ocp::{solve_ocp_from, SolverConfig};
use crate::sim::{advance, apply_gripper, detect_collisions, CollisionEvent, SceneState, SimConfig, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub plan_step: usize,
    /// Simulator step at which the solve started.
    pub sim_step: usize,
    pub horizon: usize,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub max_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub sim_step: usize,
    pub plan_step: usize,
    pub event: CollisionEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Completed,
    Refused,
    /// Design or solve failure mid-episode.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub plan_step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub command: String,
    pub planning: Option<PlanOutcome>,
    pub status: EpisodeStatus,
    pub failure: Option<EpisodeFailure>,
    /// Nothing to execute (empty plan).
    pub degenerate: bool,
    /// Scene after every simulator step; `frames[0]` is the initial scene.
    pub frames: Vec<SceneState>,
    pub collisions: Vec<CollisionRecord>,
    pub solves: Vec<SolveDiagnostics>,
}

impl EpisodeResult {
    pub fn refused(command: &str, planning: PlanOutcome, scene: &SceneState) -> Self {
        Self {
            command: command.to_string(),
            planning: Some(planning),
            status: EpisodeStatus::Refused,
            failure: None,
            degenerate: false,
            frames: vec![scene.clone()],
            collisions: Vec::new(),
            solves: Vec::new(),
        }
    }

    pub fn plan(&self) -> Option<&TaskPlan> {
        self.planning.as_ref().and_then(|p| p.plan())
    }

    pub fn final_scene(&self) -> &SceneState {
        self.frames.last().expect("episodes always hold the initial frame")
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn write_jsonl(episodes: &[EpisodeResult], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        writeln!(w, "{}", e.to_json_line()?)?;
    }
    w.flush()?;
    Ok(())
}

struct Recorder<'a> {
    sim: &'a SimConfig,
    scene: SceneState,
    frames: Vec<SceneState>,
    collisions: Vec<CollisionRecord>,
}

impl Recorder<'_> {
    fn push(&mut self, plan_step: usize, next: SceneState) {
        let sim_step = self.frames.len();
        for event in detect_collisions(&next, self.sim) {
            self.collisions.push(CollisionRecord {
                sim_step,
                plan_step,
                event,
            });
        }
        self.frames.push(next.clone());
        self.scene = next;
    }
}

/// Execute an accepted plan. Design and solver failures end the episode with
/// status `Failed`; collisions are recorded and execution continues.
pub fn execute_plan(
    plan: &TaskPlan,
    designer: &dyn OcpDesigner,
    scene: &SceneState,
    sim: &SimConfig,
    solver: &SolverConfig,
    exec: &ExecutionConfig,
) -> EpisodeResult {
    let mut rec = Recorder {
        sim,
        scene: scene.clone(),
        frames: vec![scene.clone()],
        collisions: Vec::new(),
    };
    let mut solves = Vec::new();
    let mut failure = None;
    let period = exec.replan_period.max(1);

    'steps: for (i, step) in plan.steps.iter().enumerate() {
        match step {
            PlanStep::Gripper { action } => {
                let next = apply_gripper(&rec.scene, action.action(), sim);
                rec.push(i, next);
            }
            PlanStep::Move { description } => {
                let objects = rec.scene.object_positions();
                let spec0 = match designer.design(description, &objects, rec.scene.cont()) {
                    Ok(s) => s,
                    Err(e) => {
                        failure = Some(EpisodeFailure {
                            plan_step: i,
                            reason: format!("design failed for {description:?}: {e}"),
                        });
                        break 'steps;
                    }
                };
                let n = spec0.dynamics.horizon;
                let mut done = 0;
                let mut planned: Vec<Vec3> = Vec::new();
                while done < n {
                    let remaining = n - done;
                    if remaining >= 2 {
                        let mut spec = spec0.clone();
                        spec.x0 = rec.scene.cont();
                        spec.dynamics = spec0.dynamics.with_horizon(remaining);
                        let init: Option<Vec<f64>> = (planned.len() == remaining)
                            .then(|| planned.iter().flat_map(|u| [u.x, u.y, u.z]).collect());
                        match solve_ocp_from(&spec, solver, init.as_deref()) {
                            Ok(r) => {
                                solves.push(SolveDiagnostics {
                                    plan_step: i,
                                    sim_step: rec.frames.len() - 1,
                                    horizon: remaining,
                                    converged: r.converged,
                                    iterations: r.iterations,
                                    cost: r.cost,
                                    max_violation: r.max_violation,
                                });
                                if !r.converged {
                                    failure = Some(EpisodeFailure {
                                        plan_step: i,
                                        reason: format!(
                                            "solver did not converge for {description:?} after {} iterations",
                                            r.iterations
                                        ),
                                    });
                                    break 'steps;
                                }
                                planned = r.trajectory.controls.clone();
                            }
                            Err(e) => {
                                failure = Some(EpisodeFailure {
                                    plan_step: i,
                                    reason: format!("solve failed for {description:?}: {e}"),
                                });
                                break 'steps;
                            }
                        }
                    }
                    let apply = period.min(remaining).min(planned.len());
                    for u in planned.drain(..apply) {
                        match advance(&rec.scene, &u, &spec0.dynamics, sim) {
                            Ok(next) => rec.push(i, next),
                            Err(e) => {
                                failure = Some(EpisodeFailure {
                                    plan_step: i,
                                    reason: e.to_string(),
                                });
                                break 'steps;
                            }
                        }
                    }
                    done += apply.max(1);
                }
            }
        }
    }

    EpisodeResult {
        command: plan.command.clone(),
        planning: None,
        status: if failure.is_some() {
            EpisodeStatus::Failed
        } else {
            EpisodeStatus::Completed
        },
        failure,
        degenerate: plan.steps.is_empty(),
        frames: rec.frames,
        collisions: rec.collisions,
        solves,
    }
}

/// Everything needed to turn a command into an episode.
pub struct Pipeline<'a> {
    pub planner: &'a dyn Planner,
    pub designer: &'a dyn OcpDesigner,
    pub embedder: &'a dyn EmbeddingProvider,
    pub gate: &'a CoverageGate,
    pub sim: &'a SimConfig,
    pub solver: &'a SolverConfig,
    pub validation: &'a ValidationConfig,
    pub execution: &'a ExecutionConfig,
}

impl Pipeline<'_> {
    /// Plan with replanning, then execute if accepted. Planner errors other
    /// than unparsable output propagate.
    pub fn run(&self, command: &str, scene: &SceneState) -> Result<EpisodeResult> {
        if command.trim().is_empty() {
            return Err(Error::InvalidArgument("empty command".into()));
        }
        let outcome = plan_with_replanning(
            command,
            scene,
            self.planner,
            self.gate,
            self.embedder,
            self.validation,
        )?;
        match outcome.plan().cloned() {
            None => Ok(EpisodeResult::refused(command, outcome, scene)),
            Some(plan) => {
                let mut ep = execute_plan(&plan, self.designer, scene, self.sim, self.solver, self.execution);
                ep.command = command.to_string();
                ep.planning = Some(outcome);
                Ok(ep)
            }
        }
    }
}
