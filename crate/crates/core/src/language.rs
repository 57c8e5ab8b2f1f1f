//! Online language stage: task planning, the sub-task validation gate with
//! replanning, and the optimisation designer (description → θ → OCP).
//!
//! Plans travel as plain text, one step per line:
//!
//! ```text
//! move: 0.12 meters above object two
//! gripper: close
//! ```
//!
//! The parser is strict; any other line shape rejects the whole plan.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use crate::config::{PlannerConfig, PlannerKind, ValidationConfig};
use crate::embedding::{CoverageGate, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::grammar::{self, object_word, Direction, SubTask};
use crate::model::LearnedModel;
use crate::ocp::OcpSpec;
use crate::sim::{ContState, GripperAction, SceneState, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grip {
    Open,
    Close,
}

impl Grip {
    pub fn action(&self) -> GripperAction {
        match self {
            Grip::Open => GripperAction::Open,
            Grip::Close => GripperAction::Close,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanStep {
    Move { description: String },
    Gripper { action: Grip },
}

impl PlanStep {
    pub fn move_to(description: impl Into<String>) -> Self {
        PlanStep::Move {
            description: description.into(),
        }
    }

    fn subtask(st: SubTask) -> Self {
        Self::move_to(st.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub command: String,
    pub steps: Vec<PlanStep>,
    /// 1-based planner invocation that produced this plan.
    pub attempt: usize,
}

impl TaskPlan {
    pub fn move_descriptions(&self) -> Vec<String> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                PlanStep::Move { description } => Some(description.clone()),
                PlanStep::Gripper { .. } => None,
            })
            .collect()
    }
}

pub fn parse_plan_text(text: &str) -> Result<Vec<PlanStep>> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::PlanParse(format!("line {}: {line:?}", i + 1));
        let (head, body) = line.split_once(':').ok_or_else(bad)?;
        let body = body.trim();
        match head.trim() {
            "move" if !body.is_empty() => steps.push(PlanStep::move_to(body)),
            "gripper" => match body {
                "open" => steps.push(PlanStep::Gripper { action: Grip::Open }),
                "close" => steps.push(PlanStep::Gripper { action: Grip::Close }),
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        }
    }
    if steps.is_empty() {
        return Err(Error::PlanParse("no steps".into()));
    }
    Ok(steps)
}

pub fn render_plan_text(steps: &[PlanStep]) -> String {
    steps
        .iter()
        .map(|s| match s {
            PlanStep::Move { description } => format!("move: {description}\n"),
            PlanStep::Gripper { action: Grip::Open } => "gripper: open\n".to_string(),
            PlanStep::Gripper { action: Grip::Close } => "gripper: close\n".to_string(),
        })
        .collect()
}

/// Validation verdict of one move step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    /// Index of the step within the plan.
    pub index: usize,
    pub description: String,
    pub coverage: f64,
    pub residual: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Refused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub steps: Vec<StepVerdict>,
    pub threshold: f64,
    pub residual_threshold: f64,
    pub overall: Verdict,
    /// No move steps: accepted vacuously.
    pub degenerate: bool,
}

impl ValidationReport {
    pub fn failed(&self) -> impl Iterator<Item = &StepVerdict> {
        self.steps.iter().filter(|s| !s.passed)
    }
}

/// What the planner sees on each invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub command: String,
    /// `(name, position)` of every object in the scene.
    pub objects: Vec<(String, Vec3)>,
    /// 1-based attempt number.
    pub attempt: usize,
    /// Steps that failed validation on earlier attempts.
    pub feedback: Vec<StepVerdict>,
}

impl PlanRequest {
    pub fn new(command: &str, scene: &SceneState) -> Self {
        Self {
            command: command.to_string(),
            objects: scene
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (object_word(i).unwrap_or("unknown").to_string(), o.position))
                .collect(),
            attempt: 1,
            feedback: Vec::new(),
        }
    }
}

pub trait Planner: Send + Sync {
    fn id(&self) -> &str;
    fn plan(&self, request: &PlanRequest) -> Result<Vec<PlanStep>>;
}

/// Deterministic rule table for the benchmark tasks.
///
/// Every pick-and-place cycle hovers 0.12 m above the source, descends to
/// grasp height (fingertip at the cube centre), closes, lifts, crosses at
/// hover height and only then descends to the placement pose. Moves relative
/// to the held cube use its position when the move is designed.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPlanner;

const HOVER: f64 = 0.12;
const GRASP: f64 = 0.04;
/// End-effector height above the supporting cube when releasing onto it.
const PLACE_ON_TOP: f64 = 0.09;
/// Centre spacing of side-by-side cubes.
const SIDE_BY_SIDE: f64 = 0.06;
/// Sideways shift of the pyramid's top cube from the first base cube.
const PYRAMID_SHIFT: f64 = 0.04;

fn st(d: f64, dir: Direction, k: usize) -> PlanStep {
    PlanStep::subtask(SubTask::new(d, dir, k))
}

fn pick(src: usize) -> Vec<PlanStep> {
    vec![
        st(HOVER, Direction::Above, src),
        st(GRASP, Direction::Above, src),
        PlanStep::Gripper { action: Grip::Close },
        st(HOVER, Direction::Above, src),
    ]
}

fn release() -> PlanStep {
    PlanStep::Gripper { action: Grip::Open }
}

/// Carry the held cube `src` and set it down beside `anchor` along `dir`.
fn place_beside(src: usize, anchor: usize, dir: Direction) -> Vec<PlanStep> {
    vec![
        st(HOVER, Direction::Above, anchor),
        st(SIDE_BY_SIDE, dir, src),
        st(SIDE_BY_SIDE, dir, anchor),
        release(),
    ]
}

fn place_on(top: usize) -> Vec<PlanStep> {
    vec![
        st(HOVER, Direction::Above, top),
        st(PLACE_ON_TOP, Direction::Above, top),
    ]
}

pub fn normalize_command(command: &str) -> String {
    command
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '.' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl ScriptedPlanner {
    fn need(n: usize, have: usize, what: &str) -> Result<()> {
        if have < n {
            return Err(Error::Planner(format!("{what} needs {n} objects, scene has {have}")));
        }
        Ok(())
    }

    pub fn stack(n_objects: usize) -> Result<Vec<PlanStep>> {
        Self::need(2, n_objects, "stack")?;
        let mut steps = Vec::new();
        let mut top = 0;
        for src in 1..n_objects {
            steps.extend(pick(src));
            steps.extend(place_on(top));
            steps.push(release());
            top = src;
        }
        Ok(steps)
    }

    pub fn pyramid(n_objects: usize) -> Result<Vec<PlanStep>> {
        Self::need(3, n_objects, "pyramid")?;
        let mut steps = pick(1);
        steps.extend(place_beside(1, 0, Direction::Right));
        steps.extend(pick(2));
        steps.extend(place_on(0));
        steps.push(st(PYRAMID_SHIFT, Direction::Right, 2));
        steps.push(release());
        Ok(steps)
    }

    pub fn l_shape(n_objects: usize) -> Result<Vec<PlanStep>> {
        Self::need(3, n_objects, "l_shape")?;
        let mut steps = pick(1);
        steps.extend(place_beside(1, 0, Direction::Right));
        steps.extend(pick(2));
        steps.extend(place_beside(2, 0, Direction::Front));
        Ok(steps)
    }
}

impl Planner for ScriptedPlanner {
    fn id(&self) -> &str {
        "scripted"
    }

    fn plan(&self, request: &PlanRequest) -> Result<Vec<PlanStep>> {
        let cmd = normalize_command(&request.command);
        let n = request.objects.len();
        if let Some(rest) = cmd.strip_prefix("move ").or_else(|| cmd.strip_prefix("go ")) {
            let sub = grammar::parse(rest).map_err(|_| Error::NoRule(request.command.clone()))?;
            if sub.object >= n {
                return Err(Error::Planner(format!("object {} not in scene", sub.object + 1)));
            }
            // keep the user's distance literal so out-of-range requests stay out of range
            return Ok(vec![PlanStep::move_to(rest)]);
        }
        if cmd.contains("stack") {
            Self::stack(n)
        } else if cmd.contains("pyramid") {
            Self::pyramid(n)
        } else if cmd.contains("l shape") || cmd.contains("l_shape") || cmd.contains("l-shape") {
            Self::l_shape(n)
        } else {
            Err(Error::NoRule(request.command.clone()))
        }
    }
}

/// Replays canned plans: attempt `k` gets entry `k − 1`, the last entry repeats.
#[derive(Clone, Debug)]
pub struct FixturePlanner {
    id: String,
    attempts: Vec<Vec<PlanStep>>,
}

impl FixturePlanner {
    pub fn new(id: &str, attempts: Vec<Vec<PlanStep>>) -> Result<Self> {
        if attempts.is_empty() {
            return Err(Error::InvalidArgument("fixture planner needs at least one plan".into()));
        }
        Ok(Self {
            id: id.to_string(),
            attempts,
        })
    }

    /// Always asks for `description` — used to exercise refusal.
    pub fn repeating(description: &str) -> Self {
        Self {
            id: "fixture:repeating".into(),
            attempts: vec![vec![PlanStep::move_to(description)]],
        }
    }

    /// First attempt emits an uncovered description, later attempts `good`.
    pub fn two_phase(good: Vec<PlanStep>) -> Self {
        Self {
            id: "fixture:two_phase".into(),
            attempts: vec![vec![PlanStep::move_to("purple quickly banana seven sideways")], good],
        }
    }
}

impl Planner for FixturePlanner {
    fn id(&self) -> &str {
        &self.id
    }

    fn plan(&self, request: &PlanRequest) -> Result<Vec<PlanStep>> {
        let k = request.attempt.max(1) - 1;
        Ok(self.attempts[k.min(self.attempts.len() - 1)].clone())
    }
}

pub const SYSTEM_PROMPT: &str = "\
You are the task planner of a tabletop manipulator. Decompose the user's \
command into a sequence of steps, one per line, using only these forms:
move: <d> meters <direction> of object <k>
gripper: open
gripper: close
<d> is a distance in meters with two decimals, <direction> is one of right, \
left, front, behind, above, below, and <k> is an object name from the scene \
list. The end-effector reaches an object for grasping at \"0.04 meters above \
object <k>\". Output the steps only, with no other text.";

/// Planner backed by an OpenAI-compatible chat completions endpoint.
#[derive(Clone, Debug)]
pub struct LlmHttpPlanner {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl LlmHttpPlanner {
    pub fn from_config(cfg: &PlannerConfig) -> Self {
        let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            endpoint: env(&cfg.endpoint_env).unwrap_or_else(|| cfg.endpoint.clone()),
            model: env(&cfg.model_env).unwrap_or_else(|| cfg.model.clone()),
            temperature: cfg.temperature,
            api_key: env(&cfg.api_key_env),
            timeout: Duration::from_secs_f64(cfg.timeout_secs),
        }
    }

    pub fn user_prompt(request: &PlanRequest) -> String {
        let mut s = String::from("Objects in the scene:\n");
        for (name, p) in &request.objects {
            s.push_str(&format!("- object {name} at ({:.3}, {:.3}, {:.3})\n", p.x, p.y, p.z));
        }
        s.push_str(&format!("Command: {}\n", request.command));
        if !request.feedback.is_empty() {
            s.push_str(
                "These steps of earlier plans were rejected as outside the demonstrated \
                 skills (coverage above the threshold); avoid them:\n",
            );
            for f in &request.feedback {
                s.push_str(&format!(
                    "- {} (coverage {:.3}, residual {:.3})\n",
                    f.description, f.coverage, f.residual
                ));
            }
        }
        s
    }

    pub fn request_body(&self, request: &PlanRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": Self::user_prompt(request)},
            ],
        })
    }
}

impl Planner for LlmHttpPlanner {
    fn id(&self) -> &str {
        "llm_http"
    }

    fn plan(&self, request: &PlanRequest) -> Result<Vec<PlanStep>> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Planner(e.to_string()))?;
        let mut req = client
            .post(format!("{}/v1/chat/completions", self.endpoint.trim_end_matches('/')))
            .json(&self.request_body(request));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Planner(format!("attempt {}: {e}", request.attempt)))?;
        if !resp.status().is_success() {
            return Err(Error::Planner(format!(
                "attempt {}: HTTP status {}",
                request.attempt,
                resp.status()
            )));
        }
        let body: ChatResponse = resp
            .json()
            .map_err(|e| Error::PlanParse(format!("malformed completion: {e}")))?;
        let text = body
            .choices
            .first()
            .map(|c| c.message.content.as_str())
            .ok_or_else(|| Error::PlanParse("completion has no choices".into()))?;
        parse_plan_text(text)
    }
}

pub fn make_planner(cfg: &PlannerConfig) -> Box<dyn Planner> {
    match cfg.kind {
        PlannerKind::Scripted => Box::new(ScriptedPlanner),
        PlannerKind::LlmHttp => Box::new(LlmHttpPlanner::from_config(cfg)),
    }
}

/// The sub-task validation gate: every move description must have coverage
/// `≤ threshold` and relative residual `≤ residual`.
pub fn validate(
    plan: &TaskPlan,
    gate: &CoverageGate,
    threshold: f64,
    residual: f64,
    embedder: &dyn EmbeddingProvider,
) -> Result<ValidationReport> {
    let moves: Vec<(usize, String)> = plan
        .steps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            PlanStep::Move { description } => Some((i, description.clone())),
            PlanStep::Gripper { .. } => None,
        })
        .collect();
    let texts: Vec<String> = moves.iter().map(|m| m.1.clone()).collect();
    let embeddings = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed(&texts)?
    };
    let mut steps = Vec::with_capacity(moves.len());
    for ((index, description), e) in moves.into_iter().zip(embeddings) {
        let c = gate.evaluate(&e.values)?;
        steps.push(StepVerdict {
            index,
            description,
            coverage: c.coverage,
            residual: c.residual,
            passed: c.coverage <= threshold && c.residual <= residual,
        });
    }
    let overall = if steps.iter().all(|s| s.passed) {
        Verdict::Accepted
    } else {
        Verdict::Refused
    };
    Ok(ValidationReport {
        degenerate: steps.is_empty(),
        steps,
        threshold,
        residual_threshold: residual,
        overall,
    })
}

/// One planner invocation and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: usize,
    pub steps: Vec<PlanStep>,
    pub report: Option<ValidationReport>,
    /// Plan-parse failure, if the planner output was unusable.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlanOutcome {
    Accepted { plan: TaskPlan, attempts: Vec<Attempt> },
    Refused { attempts: Vec<Attempt> },
}

impl PlanOutcome {
    pub fn attempts(&self) -> &[Attempt] {
        match self {
            PlanOutcome::Accepted { attempts, .. } | PlanOutcome::Refused { attempts } => attempts,
        }
    }

    pub fn plan(&self) -> Option<&TaskPlan> {
        match self {
            PlanOutcome::Accepted { plan, .. } => Some(plan),
            PlanOutcome::Refused { .. } => None,
        }
    }

    pub fn reports(&self) -> Vec<&ValidationReport> {
        self.attempts().iter().filter_map(|a| a.report.as_ref()).collect()
    }
}

/// Plan → validate, feeding failed steps back to the planner, for at most
/// `max_replans` planner invocations.
pub fn plan_with_replanning(
    command: &str,
    scene: &SceneState,
    planner: &dyn Planner,
    gate: &CoverageGate,
    embedder: &dyn EmbeddingProvider,
    cfg: &ValidationConfig,
) -> Result<PlanOutcome> {
    if cfg.max_replans == 0 {
        return Err(Error::InvalidArgument("max_replans must be >= 1".into()));
    }
    let mut request = PlanRequest::new(command, scene);
    let mut attempts = Vec::new();
    for attempt in 1..=cfg.max_replans {
        request.attempt = attempt;
        let steps = match planner.plan(&request) {
            Ok(s) => s,
            Err(Error::PlanParse(reason)) => {
                log::info!("attempt {attempt}: unparsable plan: {reason}");
                attempts.push(Attempt {
                    attempt,
                    steps: Vec::new(),
                    report: None,
                    error: Some(reason),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let plan = TaskPlan {
            command: command.to_string(),
            steps,
            attempt,
        };
        let report = validate(&plan, gate, cfg.threshold, cfg.residual, embedder)?;
        let accepted = report.overall == Verdict::Accepted;
        request.feedback.extend(report.failed().cloned());
        attempts.push(Attempt {
            attempt,
            steps: plan.steps.clone(),
            report: Some(report),
            error: None,
        });
        if accepted {
            return Ok(PlanOutcome::Accepted { plan, attempts });
        }
    }
    Ok(PlanOutcome::Refused { attempts })
}

/// Something that turns a move description into an instantiated OCP.
pub trait OcpDesigner: Send + Sync {
    fn design(&self, description: &str, objects: &[Vec3], x0: ContState) -> Result<OcpSpec>;
}

/// The learned designer: embed → PCA → mapping → θ.
pub struct LearnedDesigner<'a> {
    pub model: &'a LearnedModel,
    pub embedder: &'a dyn EmbeddingProvider,
}

impl OcpDesigner for LearnedDesigner<'_> {
    fn design(&self, description: &str, objects: &[Vec3], x0: ContState) -> Result<OcpSpec> {
        design_ocp(description, self.model, self.embedder, objects, x0)
    }
}

/// The ground-truth designer: parses the grammar and uses the demonstrator's cost.
impl OcpDesigner for crate::demos::Oracle {
    fn design(&self, description: &str, objects: &[Vec3], x0: ContState) -> Result<OcpSpec> {
        let st = grammar::parse(description)?;
        Ok(self.spec(&st, objects, x0))
    }
}

pub fn design_ocp(
    description: &str,
    model: &LearnedModel,
    embedder: &dyn EmbeddingProvider,
    objects: &[Vec3],
    x0: ContState,
) -> Result<OcpSpec> {
    let e = embedder.embed_one(description)?;
    if e.dim() != model.s() {
        return Err(Error::Dimension {
            what: "embedding",
            expected: model.s(),
            got: e.dim(),
        });
    }
    let z = model.pca.project(&e.values)?;
    let theta = model.mapping.forward(&z)?;
    Ok(OcpSpec {
        theta: theta.iter().copied().collect(),
        m: model.m,
        rho: model.rho,
        library: model.library,
        objects: objects.to_vec(),
        x0,
        dynamics: model.dynamics,
    })
}
