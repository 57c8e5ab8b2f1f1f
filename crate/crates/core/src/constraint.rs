//! Constraint learning from obstacle-shaped demonstrations.
//!
//! Safe demonstrations must satisfy `g(x, ρ) ≤ 0` at every state. Sampled
//! trajectories that are *cheaper* than a safe demonstration can only have
//! been avoided because they are unsafe, so each must have `g > 0` at one or
//! more states. `solve_feasibility` searches for a shared ρ meeting both
//! conditions exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{rollout_stacked, FeatureLibrary, SharedParams};
use crate::sim::{DynamicsModel, Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    Ellipsoid,
    AxisBox,
}

impl std::fmt::Display for ConstraintFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConstraintFamily::Ellipsoid => "ellipsoid",
            ConstraintFamily::AxisBox => "axis_box",
        })
    }
}

impl std::str::FromStr for ConstraintFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid" => Ok(Self::Ellipsoid),
            "axis_box" => Ok(Self::AxisBox),
            other => Err(Error::InvalidArgument(format!("unknown constraint family {other:?}"))),
        }
    }
}

/// Ellipsoid: `shape` holds the diagonal `d` (1/m²).
/// Axis box: `shape` holds the half-widths (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub family: ConstraintFamily,
    pub center: Vec3,
    pub shape: Vec3,
}

impl ConstraintParams {
    pub fn axis_box(center: Vec3, half_widths: Vec3) -> Self {
        Self {
            family: ConstraintFamily::AxisBox,
            center,
            shape: half_widths,
        }
    }

    pub fn ellipsoid(center: Vec3, d: Vec3) -> Self {
        Self {
            family: ConstraintFamily::Ellipsoid,
            center,
            shape: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "constraint shape entries must be positive, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let c = &self.center;
        let s = &self.shape;
        vec![c.x, c.y, c.z, s.x, s.y, s.z]
    }

    pub fn from_slice(family: ConstraintFamily, v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::Dimension {
                what: "constraint parameters",
                expected: 6,
                got: v.len(),
            });
        }
        let p = Self {
            family,
            center: Vec3::new(v[0], v[1], v[2]),
            shape: Vec3::new(v[3], v[4], v[5]),
        };
        p.validate()?;
        Ok(p)
    }

    /// Positive inside the unsafe region.
    pub fn g_eval(&self, x: &Vec3) -> f64 {
        let r = x - self.center;
        match self.family {
            ConstraintFamily::Ellipsoid => {
                1.0 - (0..3).map(|a| self.shape[a] * r[a] * r[a]).sum::<f64>()
            }
            ConstraintFamily::AxisBox => (0..3)
                .map(|a| self.shape[a] - r[a].abs())
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// (Sub)gradient of `g_eval` with respect to the position.
    pub fn g_grad(&self, x: &Vec3) -> Vec3 {
        let r = x - self.center;
        match self.family {
            ConstraintFamily::Ellipsoid => Vec3::new(
                -2.0 * self.shape[0] * r[0],
                -2.0 * self.shape[1] * r[1],
                -2.0 * self.shape[2] * r[2],
            ),
            ConstraintFamily::AxisBox => {
                let a = active_axis(&self.shape, &r);
                let mut g = Vec3::zeros();
                g[a] = -r[a].signum();
                g
            }
        }
    }

    /// Same region grown by `margin` meters (boxes) or scaled out (ellipsoids).
    pub fn inflated(&self, margin: f64) -> Self {
        match self.family {
            ConstraintFamily::AxisBox => Self {
                shape: self.shape.add_scalar(margin),
                ..*self
            },
            ConstraintFamily::Ellipsoid => Self {
                shape: self.shape.map(|d| {
                    let r = 1.0 / d.sqrt() + margin;
                    1.0 / (r * r)
                }),
                ..*self
            },
        }
    }

    pub fn max_g(&self, traj: &Trajectory) -> f64 {
        traj.states
            .iter()
            .map(|s| self.g_eval(&s.pos))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn trajectory_is_safe(&self, traj: &Trajectory) -> bool {
        self.max_g(traj) <= 0.0
    }
}

fn active_axis(shape: &Vec3, r: &Vec3) -> usize {
    let mut best = 0;
    let mut val = f64::INFINITY;
    for a in 0..3 {
        let v = shape[a] - r[a].abs();
        if v < val {
            val = v;
            best = a;
        }
    }
    best
}

/// Remove from `v` its component in the span of `rows` (Gram–Schmidt).
fn project_out(v: &mut [f64], rows: &[Vec<f64>]) {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut q = r.clone();
        for o in &ortho {
            let d: f64 = q.iter().zip(o).map(|(a, b)| a * b).sum();
            for (qi, oi) in q.iter_mut().zip(o) {
                *qi -= d * oi;
            }
        }
        let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nq > 1e-12 {
            q.iter_mut().for_each(|x| *x /= nq);
            ortho.push(q);
        }
    }
    for o in &ortho {
        let d: f64 = v.iter().zip(o).map(|(a, b)| a * b).sum();
        for (vi, oi) in v.iter_mut().zip(o) {
            *vi -= d * oi;
        }
    }
}

/// Unsafe sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Perturbation scale as a fraction of `u_max`.
    pub scale_frac: f64,
    /// Number of kept samples per demonstration (`A`).
    pub keep: usize,
    /// Proposal budget per demonstration.
    pub attempts: usize,
    /// Smooth temporal modes per axis used to shape the perturbation.
    pub modes: usize,
    /// Project perturbations so they leave the terminal state unchanged.
    pub preserve_terminal: bool,
    /// Required cost decrease, in units of the demonstrator's expected
    /// suboptimality `3N/2` (cost in likelihood units, i.e. θ including the
    /// inverse temperature). Noisy demonstrations are not exact optima; a
    /// rollout that is cheaper only by noise-level amounts is no evidence of
    /// a constraint.
    pub suboptimality_margin: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scale_frac: 0.3,
            keep: 50,
            attempts: 20_000,
            modes: 4,
            preserve_terminal: true,
            suboptimality_margin: 2.0,
        }
    }
}

/// Cost context of the task a safe demonstration belongs to.
#[derive(Clone, Copy, Debug)]
pub struct TaskCost<'a> {
    pub library: &'a FeatureLibrary,
    pub theta: &'a [f64],
    pub m: &'a SharedParams,
    pub objects: &'a [Vec3],
}

impl TaskCost<'_> {
    pub fn cost(&self, traj: &Trajectory) -> Result<f64> {
        self.library.traj_cost(traj, self.theta, self.m, self.objects)
    }
}

/// A kept counterexample with its cost under the task's cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsafeSample {
    pub trajectory: Trajectory,
    pub cost: f64,
}

/// Perturb the safe demonstration's controls and keep strictly cheaper rollouts.
///
/// Each proposal adds `s · Σ_k ξ_k b_k` where the `b_k` are smooth cosine
/// modes over the horizon (per axis), `ξ_k ~ N(0, 1)` and the magnitude `s`
/// is log-uniform in `[scale / 100, scale]`. With `scale = 0` every proposal
/// equals the demonstration, so nothing strictly cheaper is ever found.
pub fn sample_unsafe(
    safe_demo: &Trajectory,
    cost: &TaskCost<'_>,
    dynamics: &DynamicsModel,
    cfg: &SamplerConfig,
    demo_index: usize,
    seed: u64,
) -> Result<Vec<UnsafeSample>> {
    let n = safe_demo.horizon();
    let dynamics = dynamics.with_horizon(n);
    let x0 = safe_demo.states[0];
    let u0 = safe_demo.stacked_controls();
    let c0 = cost.cost(safe_demo)?;
    let scale = cfg.scale_frac * dynamics.u_max;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut basis: Vec<Vec<f64>> = (0..cfg.modes.max(1))
        .map(|k| {
            (0..n)
                .map(|j| (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n as f64).cos())
                .collect()
        })
        .collect();
    if cfg.preserve_terminal {
        // use higher modes and remove their terminal position/velocity effect
        basis = (0..cfg.modes.max(1))
            .map(|k| {
                (0..n)
                    .map(|j| (std::f64::consts::PI * (k + 1) as f64 * (j as f64 + 0.5) / n as f64).sin())
                    .collect()
            })
            .collect();
        let rows = [
            (0..n).map(|j| n as f64 - j as f64 - 0.5).collect::<Vec<f64>>(),
            vec![1.0; n],
        ];
        for b in basis.iter_mut() {
            project_out(b, &rows);
        }
    }

    let threshold = (cfg.suboptimality_margin * 1.5 * n as f64).max(1e-12);
    let mut kept = Vec::new();
    let mut u = vec![0.0; 3 * n];
    for _ in 0..cfg.attempts {
        if kept.len() >= cfg.keep {
            break;
        }
        let s = if scale > 0.0 {
            scale * 10f64.powf(rng.gen_range(-2.0..0.0))
        } else {
            0.0
        };
        u.copy_from_slice(&u0);
        for a in 0..3 {
            for b in &basis {
                let xi: f64 = StandardNormal.sample(&mut rng);
                for j in 0..n {
                    u[3 * j + a] += s * xi * b[j];
                }
            }
        }
        for v in u.iter_mut() {
            *v = v.clamp(-dynamics.u_max, dynamics.u_max);
        }
        let traj = rollout_stacked(&x0, &u, &dynamics)?;
        let c = cost.cost(&traj)?;
        if c < c0 - threshold {
            kept.push(UnsafeSample {
                trajectory: traj,
                cost: c,
            });
        }
    }
    if kept.is_empty() {
        return Err(Error::InsufficientCounterexamples {
            demo: demo_index,
            attempts: cfg.attempts,
        });
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeasibilityConfig {
    pub restarts: usize,
    pub margin: f64,
    pub max_rounds: usize,
    /// Number of times the surrogate margin is quartered when a fixpoint
    /// fails the exact check.
    pub margin_levels: usize,
    pub inner_iters: usize,
    /// Face search of the box family: candidate offsets per side and spacing (m).
    pub polish_steps: usize,
    pub polish_step: f64,
    /// Weight of the size regulariser that prefers the tightest consistent region.
    pub size_weight: f64,
    pub seed: u64,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        Self {
            restarts: 16,
            margin: 1e-3,
            max_rounds: 30,
            margin_levels: 4,
            inner_iters: 300,
            polish_steps: 40,
            polish_step: 5e-4,
            size_weight: 1e-4,
            seed: 0,
        }
    }
}

/// Outcome of the exact boolean post-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostCheck {
    /// Safe states with `g > 0`.
    pub safe_violations: usize,
    /// Unsafe trajectories with `g ≤ 0` everywhere.
    pub unsafe_misses: usize,
}

impl PostCheck {
    pub fn passed(&self) -> bool {
        self.safe_violations == 0 && self.unsafe_misses == 0
    }
}

pub fn post_check(rho: &ConstraintParams, safe: &[Trajectory], unsafe_: &[Trajectory]) -> PostCheck {
    let safe_violations = safe
        .iter()
        .flat_map(|t| t.states.iter())
        .filter(|s| rho.g_eval(&s.pos) > 0.0)
        .count();
    let unsafe_misses = unsafe_.iter().filter(|t| rho.max_g(t) <= 0.0).count();
    PostCheck {
        safe_violations,
        unsafe_misses,
    }
}

#[derive(Clone, Copy)]
struct Surrogate<'a> {
    family: ConstraintFamily,
    safe: &'a [Vec3],
    margin: f64,
    size_weight: f64,
}

impl Surrogate<'_> {
    fn params(&self, z: &[f64; 6]) -> ConstraintParams {
        ConstraintParams {
            family: self.family,
            center: Vec3::new(z[0], z[1], z[2]),
            shape: Vec3::new(z[3].exp(), z[4].exp(), z[5].exp()),
        }
    }

    fn size(&self, rho: &ConstraintParams) -> (f64, Vec3) {
        // Box: Σ half-widths. Ellipsoid: Σ radii = Σ d^{-1/2}.
        // Returns the value and its derivative with respect to log-shape.
        match self.family {
            ConstraintFamily::AxisBox => (rho.shape.sum(), rho.shape),
            ConstraintFamily::Ellipsoid => {
                let r = rho.shape.map(|d| 1.0 / d.sqrt());
                (r.sum(), -r * 0.5)
            }
        }
    }

    /// Gradient of g with respect to (center, log-shape).
    fn g_param_grad(&self, rho: &ConstraintParams, x: &Vec3) -> [f64; 6] {
        let r = x - rho.center;
        let mut out = [0.0; 6];
        match self.family {
            ConstraintFamily::Ellipsoid => {
                for a in 0..3 {
                    out[a] = 2.0 * rho.shape[a] * r[a];
                    out[3 + a] = -rho.shape[a] * r[a] * r[a];
                }
            }
            ConstraintFamily::AxisBox => {
                let a = active_axis(&rho.shape, &r);
                out[a] = r[a].signum();
                out[3 + a] = rho.shape[a];
            }
        }
        out
    }

    fn value_grad(&self, z: &[f64; 6], witnesses: &[Vec3]) -> (f64, [f64; 6]) {
        let rho = self.params(z);
        let mut v = 0.0;
        let mut g = [0.0; 6];
        for x in self.safe {
            let h = rho.g_eval(x) + self.margin;
            if h > 0.0 {
                v += h * h;
                let d = self.g_param_grad(&rho, x);
                for i in 0..6 {
                    g[i] += 2.0 * h * d[i];
                }
            }
        }
        for x in witnesses {
            let h = self.margin - rho.g_eval(x);
            if h > 0.0 {
                v += h * h;
                let d = self.g_param_grad(&rho, x);
                for i in 0..6 {
                    g[i] -= 2.0 * h * d[i];
                }
            }
        }
        let (s, ds) = self.size(&rho);
        v += self.size_weight * s;
        for a in 0..3 {
            g[3 + a] += self.size_weight * ds[a];
        }
        (v, g)
    }

    fn minimise(&self, z: &mut [f64; 6], witnesses: &[Vec3], iters: usize) -> f64 {
        let (mut f, mut g) = self.value_grad(z, witnesses);
        let mut step = 1e-2;
        for _ in 0..iters {
            let gn2: f64 = g.iter().map(|x| x * x).sum();
            if gn2 < 1e-30 {
                break;
            }
            let mut accepted = false;
            for _ in 0..50 {
                let mut cand = *z;
                for i in 0..6 {
                    cand[i] -= step * g[i];
                }
                let (fc, gc) = self.value_grad(&cand, witnesses);
                if fc <= f - 1e-4 * step * gn2 {
                    *z = cand;
                    f = fc;
                    g = gc;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        f
    }
}

/// Number of exact post-check failures (safe states inside plus unsafe
/// trajectories missed).
fn box_errors(rho: &ConstraintParams, safe: &[Vec3], unsafe_trajs: &[Trajectory]) -> usize {
    safe.iter().filter(|p| rho.g_eval(p) > 0.0).count()
        + unsafe_trajs.iter().filter(|t| rho.max_g(t) <= 0.0).count()
}

/// Coordinate search on the six faces of a box, minimising the exact error
/// count. The smooth surrogate tends to stall where a few hinge terms
/// balance; moving one face at a time resolves those ties.
fn polish_box(
    rho: ConstraintParams,
    safe: &[Vec3],
    unsafe_trajs: &[Trajectory],
    cfg: &FeasibilityConfig,
) -> ConstraintParams {
    let mut lo = rho.center - rho.shape;
    let mut hi = rho.center + rho.shape;
    let make = |lo: &Vec3, hi: &Vec3| ConstraintParams::axis_box((lo + hi) / 2.0, (hi - lo) / 2.0);
    let mut best = box_errors(&rho, safe, unsafe_trajs);
    let steps = cfg.polish_steps as i64;
    for _ in 0..cfg.max_rounds {
        if best == 0 {
            break;
        }
        let before = best;
        for a in 0..3 {
            // move the lower face, the upper face, or both (a translation)
            for (dl, dh) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                let mut choice = 0.0;
                for k in -steps..=steps {
                    let d = k as f64 * cfg.polish_step;
                    let (mut l, mut h) = (lo, hi);
                    l[a] += dl * d;
                    h[a] += dh * d;
                    if h[a] - l[a] <= 1e-6 {
                        continue;
                    }
                    let e = box_errors(&make(&l, &h), safe, unsafe_trajs);
                    if e < best {
                        best = e;
                        choice = d;
                    }
                }
                lo[a] += dl * choice;
                hi[a] += dh * choice;
            }
        }
        if best == before {
            break;
        }
    }
    make(&lo, &hi)
}

/// Grow a box from `center` face by face until every face touches a safe
/// state, then shrink faces while every counterexample stays covered. Returns
/// `None` when `center` itself is not clear of the safe states.
fn grow_shrink_box(
    center: Vec3,
    safe: &[Vec3],
    unsafe_trajs: &[Trajectory],
    cfg: &FeasibilityConfig,
) -> Option<ConstraintParams> {
    let step = cfg.polish_step;
    let make = |lo: &Vec3, hi: &Vec3| ConstraintParams::axis_box((lo + hi) / 2.0, (hi - lo) / 2.0);
    let clear = |lo: &Vec3, hi: &Vec3| !safe.iter().any(|p| make(lo, hi).g_eval(p) > 0.0);
    let mut lo = center - Vec3::repeat(step);
    let mut hi = center + Vec3::repeat(step);
    if !clear(&lo, &hi) {
        return None;
    }
    let limit = 2.0; // metres; nothing on the table is this large
    let mut grown = true;
    while grown {
        grown = false;
        for a in 0..3 {
            for upper in [false, true] {
                let (mut l, mut h) = (lo, hi);
                if upper { h[a] += step } else { l[a] -= step }
                if h[a] - l[a] < limit && clear(&l, &h) {
                    lo = l;
                    hi = h;
                    grown = true;
                }
            }
        }
    }
    let covers = |lo: &Vec3, hi: &Vec3| unsafe_trajs.iter().all(|t| make(lo, hi).max_g(t) > 0.0);
    if !covers(&lo, &hi) {
        return Some(make(&lo, &hi));
    }
    let mut shrunk = true;
    while shrunk {
        shrunk = false;
        for a in 0..3 {
            for upper in [false, true] {
                let (mut l, mut h) = (lo, hi);
                if upper { h[a] -= step } else { l[a] += step }
                if h[a] - l[a] > step && covers(&l, &h) {
                    lo = l;
                    hi = h;
                    shrunk = true;
                }
            }
        }
    }
    Some(make(&lo, &hi))
}

/// Find ρ consistent with the safe demonstrations and the counterexamples.
pub fn solve_feasibility(
    safe_demos: &[Trajectory],
    unsafe_trajs: &[Trajectory],
    family: ConstraintFamily,
    cfg: &FeasibilityConfig,
) -> Result<ConstraintParams> {
    if unsafe_trajs.is_empty() {
        return Err(Error::Precondition(
            "at least one unsafe trajectory is required".into(),
        ));
    }
    let safe: Vec<Vec3> = safe_demos
        .iter()
        .flat_map(|t| t.states.iter().map(|s| s.pos))
        .collect();
    let sur = Surrogate {
        family,
        safe: &safe,
        margin: cfg.margin,
        size_weight: cfg.size_weight,
    };

    // Candidate seeds: per unsafe trajectory, the state farthest from every safe state.
    let deep: Vec<(Vec3, f64)> = unsafe_trajs
        .iter()
        .map(|t| {
            t.states
                .iter()
                .map(|s| {
                    let d = safe
                        .iter()
                        .map(|p| (p - s.pos).norm())
                        .fold(f64::INFINITY, f64::min);
                    (s.pos, d)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
        })
        .collect();

    let runs: Vec<Option<(f64, ConstraintParams)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(r as u64));
            let (c0, w) = if r == 0 {
                // centroid of the deepest counterexample states
                let c = deep.iter().map(|(p, _)| p).sum::<Vec3>() / deep.len() as f64;
                let mut dist: Vec<f64> = deep.iter().map(|(p, _)| (p - c).abs().max()).collect();
                dist.sort_by(f64::total_cmp);
                (c, dist[dist.len() / 2].max(1e-3))
            } else {
                let (c0, d0) = deep[rng.gen_range(0..deep.len())];
                (c0, (d0 * rng.gen_range(0.5..1.0)).max(1e-3))
            };
            let shape0 = match family {
                ConstraintFamily::AxisBox => w,
                ConstraintFamily::Ellipsoid => 1.0 / (w * w),
            };
            let mut z = [c0.x, c0.y, c0.z, shape0.ln(), shape0.ln(), shape0.ln()];
            let mut f = f64::INFINITY;
            // The data may only separate with a gap smaller than the default
            // margin; shrink it whenever a fixpoint fails the exact check.
            for level in 0..cfg.margin_levels.max(1) {
                let sur = Surrogate {
                    margin: cfg.margin * 0.25f64.powi(level as i32),
                    ..sur
                };
                let mut assign: Vec<usize> = vec![usize::MAX; unsafe_trajs.len()];
                for _ in 0..cfg.max_rounds {
                    let rho = sur.params(&z);
                    let new_assign: Vec<usize> = unsafe_trajs
                        .iter()
                        .map(|t| {
                            t.states
                                .iter()
                                .enumerate()
                                .map(|(k, s)| (k, rho.g_eval(&s.pos)))
                                .max_by(|a, b| a.1.total_cmp(&b.1))
                                .unwrap()
                                .0
                        })
                        .collect();
                    if new_assign == assign {
                        break;
                    }
                    assign = new_assign;
                    let witnesses: Vec<Vec3> = unsafe_trajs
                        .iter()
                        .zip(&assign)
                        .map(|(t, k)| t.states[*k].pos)
                        .collect();
                    f = sur.minimise(&mut z, &witnesses, cfg.inner_iters);
                }
                if post_check(&sur.params(&z), safe_demos, unsafe_trajs).passed() {
                    break;
                }
            }
            let rho = sur.params(&z);
            let rho = if family == ConstraintFamily::AxisBox && !post_check(&rho, safe_demos, unsafe_trajs).passed() {
                let polished = polish_box(rho, &safe, unsafe_trajs, cfg);
                if post_check(&polished, safe_demos, unsafe_trajs).passed() {
                    polished
                } else {
                    grow_shrink_box(polished.center, &safe, unsafe_trajs, cfg).unwrap_or(polished)
                }
            } else {
                rho
            };
            if post_check(&rho, safe_demos, unsafe_trajs).passed() {
                Some((f, rho))
            } else {
                None
            }
        })
        .collect();

    runs.into_iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, rho)| rho)
        .ok_or_else(|| Error::InfeasibleFamily {
            family: family.to_string(),
            restarts: cfg.restarts,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ContState;

    fn point_traj(points: &[Vec3]) -> Trajectory {
        Trajectory {
            states: points.iter().map(|p| ContState::at_rest(*p)).collect(),
            controls: vec![Vec3::zeros(); points.len().saturating_sub(1)],
        }
    }

    #[test]
    fn g_eval_examples() {
        let e = ConstraintParams::ellipsoid(Vec3::zeros(), Vec3::repeat(1.0));
        assert_eq!(e.g_eval(&Vec3::zeros()), 1.0);
        assert!(e.g_eval(&Vec3::new(0.0, 1.0, 0.0)).abs() < 1e-15);
        assert_eq!(e.g_eval(&Vec3::new(2.0, 0.0, 0.0)), -3.0);
        let b = ConstraintParams::axis_box(Vec3::zeros(), Vec3::new(0.1, 0.2, 0.3));
        assert!((b.g_eval(&Vec3::zeros()) - 0.1).abs() < 1e-15);
        assert!(b.g_eval(&Vec3::new(0.0, 0.0, 0.5)) < 0.0);
    }

    #[test]
    fn g_grad_matches_finite_differences() {
        let e = ConstraintParams::ellipsoid(Vec3::new(0.1, -0.1, 0.2), Vec3::new(3.0, 5.0, 7.0));
        let b = ConstraintParams::axis_box(Vec3::new(0.1, -0.1, 0.2), Vec3::new(0.05, 0.1, 0.2));
        let x = Vec3::new(0.12, -0.02, 0.25);
        for rho in [e, b] {
            let g = rho.g_grad(&x);
            for a in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[a] += 1e-7;
                xm[a] -= 1e-7;
                let fd = (rho.g_eval(&xp) - rho.g_eval(&xm)) / 2e-7;
                assert!((fd - g[a]).abs() < 1e-6, "{:?} axis {a}: {fd} vs {}", rho.family, g[a]);
            }
        }
    }

    #[test]
    fn no_unsafe_is_precondition_error() {
        let r = solve_feasibility(
            &[point_traj(&[Vec3::zeros()])],
            &[],
            ConstraintFamily::AxisBox,
            &FeasibilityConfig::default(),
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn one_dimensional_analog() {
        let safe = vec![
            point_traj(&[Vec3::new(-1.0, 0.0, 0.0)]),
            point_traj(&[Vec3::new(1.0, 0.0, 0.0)]),
        ];
        let unsafe_ = vec![point_traj(&[Vec3::zeros()])];
        let rho = solve_feasibility(&safe, &unsafe_, ConstraintFamily::AxisBox, &FeasibilityConfig::default())
            .unwrap();
        assert!(post_check(&rho, &safe, &unsafe_).passed());
        assert!(rho.shape.x > 0.0 && rho.shape.x < 1.0 + rho.center.x.abs());
        assert!(rho.g_eval(&Vec3::zeros()) > 0.0);
    }
}
