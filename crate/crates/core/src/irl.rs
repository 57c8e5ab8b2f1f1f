//! Laplace-approximated maximum-entropy IRL over many tasks at once.
//!
//! For a demonstration with control gradient `g` and Hessian `H` of the task
//! cost, the negative log-likelihood contribution is
//! `½ gᵀ Ĥ⁻¹ g − ½ log det Ĥ`, with `Ĥ = H + λ' I` floored so that its
//! smallest eigenvalue is at least `λ`.
//!
//! The per-axis Hessian blocks are `2θ_u I + B D Bᵀ` with `B = [b_p b_v]`
//! and `D = diag(h_a, 2θ_v)`, so every inverse, trace and determinant
//! reduces to 2×2 algebra (Woodbury) — no `N×N` factorisation is needed.

use nalgebra::{DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::{Demo, DemoSet};
use crate::embedding::PcaBasis;
use crate::error::{Error, Result};
use crate::features::{FeatureLibrary, SharedParams};
use crate::mapping::{fit_regression, MappingParams};
use crate::sim::{DynamicsModel, Vec3};

/// What the loss needs from one demonstration.
#[derive(Clone, Debug)]
pub struct DemoSummary {
    /// Controls per axis, `u[a][j]`.
    pub u: [Vec<f64>; 3],
    pub terminal_pos: Vec3,
    pub terminal_vel: Vec3,
    pub objects: Vec<Vec3>,
}

impl DemoSummary {
    pub fn from_demo(demo: &Demo) -> Self {
        let t = &demo.trajectory;
        let u = [0, 1, 2].map(|a| t.controls.iter().map(|c| c[a]).collect());
        Self {
            u,
            terminal_pos: t.terminal().pos,
            terminal_vel: t.terminal().vel,
            objects: demo.objects.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IrlTask {
    /// Compressed embedding ẽ_t.
    pub embedding: DVector<f64>,
    pub demos: Vec<DemoSummary>,
}

/// Training data in the form the loss consumes.
#[derive(Clone, Debug)]
pub struct IrlData {
    pub library: FeatureLibrary,
    pub dynamics: DynamicsModel,
    pub tasks: Vec<IrlTask>,
}

impl IrlData {
    /// Compress each example's embedding with `pca` and keep its free demos.
    pub fn from_demoset(set: &DemoSet, pca: &PcaBasis, library: FeatureLibrary) -> Result<Self> {
        let mut tasks = Vec::with_capacity(set.examples.len());
        for ex in &set.examples {
            let e = ex.embedding.as_ref().ok_or_else(|| {
                Error::Precondition(format!("sub-task {} has no embedding", ex.id))
            })?;
            tasks.push(IrlTask {
                embedding: pca.project(&e.values)?,
                demos: ex.demos_free.iter().map(DemoSummary::from_demo).collect(),
            });
        }
        let data = Self {
            library,
            dynamics: set.dynamics,
            tasks,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Precondition("no tasks to learn from".into()));
        }
        if self.dynamics.horizon < 3 {
            return Err(Error::Precondition("IRL needs a horizon of at least 3".into()));
        }
        let z = self.tasks[0].embedding.len();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.embedding.len() != z {
                return Err(Error::Dimension {
                    what: "compressed embedding",
                    expected: z,
                    got: task.embedding.len(),
                });
            }
            for d in &task.demos {
                if d.u.iter().any(|v| v.len() != self.dynamics.horizon) {
                    return Err(Error::Numerical {
                        task: t,
                        demo: 0,
                        reason: "demonstration horizon differs from the dynamics".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_demos(&self) -> usize {
        self.tasks.iter().map(|t| t.demos.len()).sum()
    }
}

/// Loss of one demonstration and, optionally, its gradient in θ and m.
pub struct DemoLoss {
    pub loss: f64,
    /// `½ gᵀĤ⁻¹g` part of the loss.
    pub g_term: f64,
    pub d_theta: Vec<f64>,
    pub d_m: [f64; 4],
}

struct Rows {
    bp: Vec<f64>,
    bv: Vec<f64>,
    s: Matrix2<f64>,
}

impl Rows {
    fn new(dynamics: &DynamicsModel) -> Self {
        let bp = dynamics.terminal_pos_row();
        let bv = dynamics.terminal_vel_row();
        let s = Matrix2::new(dot(&bp, &bp), dot(&bp, &bv), dot(&bp, &bv), dot(&bv, &bv));
        Self { bp, bv, s }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest eigenvalue of `B D Bᵀ` restricted to span(B), with its
/// eigenvector's projections `(b_p·w, b_v·w)`.
fn low_rank_min_eig(d: &Matrix2<f64>, s: &Matrix2<f64>) -> (f64, Vector2<f64>) {
    let m = d * s;
    let tr = m.trace();
    let det = m.determinant();
    let disc = (0.25 * tr * tr - det).max(0.0);
    let mu = 0.5 * tr - disc.sqrt();
    let c1 = Vector2::new(m[(0, 1)], mu - m[(0, 0)]);
    let c2 = Vector2::new(mu - m[(1, 1)], m[(1, 0)]);
    let c = if c1.norm_squared() >= c2.norm_squared() { c1 } else { c2 };
    let c = if c.norm_squared() == 0.0 {
        // m is a multiple of the identity: any direction is an eigenvector
        Vector2::new(1.0, 0.0)
    } else {
        c
    };
    let sc = s * c;
    let norm = c.dot(&sc).sqrt();
    (mu, sc / norm)
}

/// Laplace loss of one demo under `θ, m`.
pub fn demo_loss(
    lib: &FeatureLibrary,
    dynamics: &DynamicsModel,
    theta: &[f64],
    m: &SharedParams,
    demo: &DemoSummary,
    lambda: f64,
    want_grad: bool,
) -> Result<DemoLoss> {
    let rows = Rows::new(dynamics);
    demo_loss_rows(lib, &rows, theta, m, demo, lambda, want_grad)
}

fn demo_loss_rows(
    lib: &FeatureLibrary,
    rows: &Rows,
    theta: &[f64],
    m: &SharedParams,
    demo: &DemoSummary,
    lambda: f64,
    want_grad: bool,
) -> Result<DemoLoss> {
    let n = rows.bp.len();
    let terms = lib.axis_terms(theta, m, &demo.objects, &demo.terminal_pos)?;
    let th_u = terms.effort;
    let th_v = terms.velocity;
    let c0 = 2.0 * th_u;

    // global floor on the smallest eigenvalue over the three blocks
    let mut lam_min = f64::INFINITY;
    let mut active: (usize, Option<Vector2<f64>>) = (0, None);
    for a in 0..3 {
        let d = Matrix2::new(terms.h[a], 0.0, 0.0, 2.0 * th_v);
        let (mu, w) = low_rank_min_eig(&d, &rows.s);
        let (cand, eig) = if mu < 0.0 { (c0 + mu, Some(w)) } else { (c0, None) };
        if cand < lam_min {
            lam_min = cand;
            active = (a, eig);
        }
    }
    let shift = (lambda - lam_min).max(0.0);
    let c = c0 + shift;

    let mut loss = 0.0;
    let mut g_term = 0.0;
    let mut d_thu = 0.0;
    let mut d_thv = 0.0;
    let mut d_h = [0.0; 3];
    let mut d_g = [0.0; 3];
    let mut d_shift = 0.0;
    for a in 0..3 {
        let d = Matrix2::new(terms.h[a], 0.0, 0.0, 2.0 * th_v);
        let u = &demo.u[a];
        let va = demo.terminal_vel[a];
        let g: Vec<f64> = (0..n)
            .map(|j| c0 * u[j] + terms.g[a] * rows.bp[j] + 2.0 * th_v * va * rows.bv[j])
            .collect();
        let inner = Matrix2::identity() * c + d * rows.s;
        let inv = inner.try_inverse().ok_or_else(|| Error::Numerical {
            task: 0,
            demo: 0,
            reason: "singular low-rank system".into(),
        })?;
        let k = inv * d;
        let btg = Vector2::new(dot(&rows.bp, &g), dot(&rows.bv, &g));
        let kb = k * btg;
        let r: Vec<f64> = (0..n)
            .map(|j| (g[j] - rows.bp[j] * kb[0] - rows.bv[j] * kb[1]) / c)
            .collect();
        let det_small = (Matrix2::identity() + d * rows.s / c).determinant();
        if !(det_small > 0.0) || !(c > 0.0) {
            return Err(Error::Numerical {
                task: 0,
                demo: 0,
                reason: "regularised Hessian is not positive definite".into(),
            });
        }
        let logdet = n as f64 * c.ln() + det_small.ln();
        let quad = dot(&g, &r);
        loss += 0.5 * quad - 0.5 * logdet;
        g_term += 0.5 * quad;
        if want_grad {
            let rr = dot(&r, &r);
            let trinv = (n as f64 - (k * rows.s).trace()) / c;
            let q = (rows.s - rows.s * k * rows.s) / c;
            let bpr = dot(&rows.bp, &r);
            let bvr = dot(&rows.bv, &r);
            d_thu += 2.0 * dot(&r, u) - rr - trinv;
            d_h[a] = -0.5 * bpr * bpr - 0.5 * q[(0, 0)];
            d_thv += 2.0 * va * bvr - bvr * bvr - q[(1, 1)];
            d_g[a] = bpr;
            d_shift += -0.5 * rr - 0.5 * trinv;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical {
            task: 0,
            demo: 0,
            reason: "non-finite loss".into(),
        });
    }
    let mut d_theta = vec![0.0; lib.p()];
    let mut d_m = [0.0; 4];
    if want_grad {
        if shift > 0.0 {
            // shift = λ − λ_min, so dshift = −dλ_min
            d_thu -= 2.0 * d_shift;
            if let Some(w) = active.1 {
                d_h[active.0] -= d_shift * w[0] * w[0];
                d_thv -= d_shift * 2.0 * w[1] * w[1];
            }
        }
        d_theta[lib.effort()] = d_thu;
        d_theta[lib.velocity()] = d_thv;
        let objs = lib.padded_objects(&demo.objects)?;
        let mt = m.terminal_weight;
        for a in 0..3 {
            let s = m.scales[a];
            let p = demo.terminal_pos[a];
            let mut h_raw = 0.0;
            let mut g_raw = 0.0;
            let mut dg_ds = 0.0;
            for (j, o) in objs.iter().enumerate() {
                let tq = theta[lib.quad(j, a)];
                let tl = theta[lib.lin(j, a)];
                let e = p - o[a];
                d_theta[lib.quad(j, a)] += d_h[a] * 2.0 * mt / (s * s) + d_g[a] * 2.0 * mt * e / (s * s);
                d_theta[lib.lin(j, a)] += d_g[a] * mt / s;
                h_raw += 2.0 * tq / (s * s);
                g_raw += 2.0 * tq * e / (s * s) + tl / s;
                dg_ds += -4.0 * tq * e / (s * s * s) - tl / (s * s);
            }
            d_m[3] += d_h[a] * h_raw + d_g[a] * g_raw;
            d_m[a] += d_h[a] * (-2.0 * mt * h_raw / s) + d_g[a] * mt * dg_ds;
        }
    }
    Ok(DemoLoss {
        loss,
        g_term,
        d_theta,
        d_m,
    })
}

/// Loss and gradient over the whole dataset.
pub struct LossEval {
    pub loss: f64,
    pub g_term: f64,
    /// Gradient in `mapping.flatten()` layout followed by the four entries of m.
    pub grad: Vec<f64>,
}

fn tag(e: Error, task: usize, demo: usize) -> Error {
    match e {
        Error::Numerical { reason, .. } => Error::Numerical { task, demo, reason },
        other => other,
    }
}

/// Laplace loss summed over all tasks and demonstrations.
pub fn irl_loss(mapping: &MappingParams, m: &SharedParams, data: &IrlData, lambda: f64) -> Result<f64> {
    Ok(evaluate(mapping, m, data, lambda, false)?.loss)
}

/// Loss together with its exact gradient in `(q, m)`.
pub fn irl_loss_grad(
    mapping: &MappingParams,
    m: &SharedParams,
    data: &IrlData,
    lambda: f64,
) -> Result<LossEval> {
    evaluate(mapping, m, data, lambda, true)
}

fn evaluate(
    mapping: &MappingParams,
    m: &SharedParams,
    data: &IrlData,
    lambda: f64,
    want_grad: bool,
) -> Result<LossEval> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("hessian floor must be positive".into()));
    }
    m.validate()?;
    if mapping.p() != data.library.p() {
        return Err(Error::Dimension {
            what: "mapping output",
            expected: data.library.p(),
            got: mapping.p(),
        });
    }
    let rows = Rows::new(&data.dynamics);
    let nq = mapping.n_params();
    let parts: Vec<Result<LossEval>> = data
        .tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| {
            let (raw, tape) = mapping.forward_raw(&task.embedding)?;
            let theta = raw.component_mul(&mapping.output_scale);
            let th = theta.as_slice();
            let mut loss = 0.0;
            let mut g_term = 0.0;
            let mut d_theta = DVector::zeros(theta.len());
            let mut grad = vec![0.0; nq + 4];
            for (d, demo) in task.demos.iter().enumerate() {
                let r = demo_loss_rows(&data.library, &rows, th, m, demo, lambda, want_grad)
                    .map_err(|e| tag(e, t, d))?;
                loss += r.loss;
                g_term += r.g_term;
                if want_grad {
                    for (acc, v) in d_theta.iter_mut().zip(&r.d_theta) {
                        *acc += v;
                    }
                    for i in 0..4 {
                        grad[nq + i] += r.d_m[i];
                    }
                }
            }
            if want_grad && !task.demos.is_empty() {
                grad[..nq].copy_from_slice(&mapping.backward(&tape, &d_theta));
            }
            Ok(LossEval { loss, g_term, grad })
        })
        .collect();
    let mut total = LossEval {
        loss: 0.0,
        g_term: 0.0,
        grad: vec![0.0; if want_grad { nq + 4 } else { 0 }],
    };
    for p in parts {
        let p = p?;
        total.loss += p.loss;
        total.g_term += p.g_term;
        if want_grad {
            for (a, b) in total.grad.iter_mut().zip(&p.grad) {
                *a += b;
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlConfig {
    /// Minimum eigenvalue of the regularised Hessian.
    pub hessian_floor: f64,
    /// Hidden layer widths of the mapping.
    pub hidden: Vec<usize>,
    pub weight_decay: f64,
    /// L-BFGS iterations for the regression warm start (0 disables it).
    pub pretrain_iters: usize,
    /// Damped Newton iterations for the per-task cost fits.
    pub fit_iters: usize,
    /// Joint fine-tuning steps on the IRL loss.
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Independently seeded regressions averaged into the warm start.
    pub ensemble: usize,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            hessian_floor: 1e-6,
            hidden: vec![16],
            weight_decay: 1e-4,
            pretrain_iters: 5000,
            fit_iters: 60,
            steps: 50,
            step_size: 1e-3,
            momentum: 0.9,
            seed: 0,
            ensemble: 5,
        }
    }
}

impl IrlConfig {
    /// Architecture with four hidden layers of 512 units.
    pub fn wide_preset() -> Self {
        Self {
            hidden: vec![512; 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hessian_floor > 0.0) {
            return Err(Error::Config("hessian_floor must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("step_size must be > 0 and momentum in [0, 1)".into()));
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub mapping: MappingParams,
    pub m: SharedParams,
    /// Loss before training and after every fine-tuning step.
    pub loss_curve: Vec<f64>,
    /// Per-task maximum-likelihood θ used for the warm start.
    pub task_thetas: Vec<Vec<f64>>,
}

/// Maximum-likelihood θ for one task's demonstrations (unit m), by damped
/// Newton with a finite-difference Hessian of the exact gradient.
pub fn fit_task_theta(
    lib: &FeatureLibrary,
    dynamics: &DynamicsModel,
    demos: &[DemoSummary],
    lambda: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    if demos.is_empty() {
        return Err(Error::Precondition("no demonstrations to fit".into()));
    }
    let m = SharedParams::default();
    let rows = Rows::new(dynamics);
    let p = lib.p();
    let eval = |th: &[f64], grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut l = 0.0;
        let mut g = vec![0.0; p];
        for (d, demo) in demos.iter().enumerate() {
            let r = demo_loss_rows(lib, &rows, th, &m, demo, lambda, grad).map_err(|e| tag(e, 0, d))?;
            l += r.loss;
            for (a, b) in g.iter_mut().zip(&r.d_theta) {
                *a += b;
            }
        }
        Ok((l, g))
    };
    let mut th = vec![0.0; p];
    for j in 0..lib.n_objects {
        for a in 0..3 {
            th[lib.quad(j, a)] = 1.0;
        }
    }
    th[lib.effort()] = 1.0;
    th[lib.velocity()] = 1.0;
    let (mut f, mut g) = eval(&th, true)?;
    for _ in 0..iters {
        let mut h = nalgebra::DMatrix::zeros(p, p);
        for j in 0..p {
            let eps = 1e-6 * th[j].abs().max(1.0);
            let mut tp = th.clone();
            tp[j] += eps;
            let mut tm = th.clone();
            tm[j] -= eps;
            let gp = eval(&tp, true)?.1;
            let gm = eval(&tm, true)?.1;
            for i in 0..p {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        // Jacobi scaling, then a small relative ridge for the directions the
        // data cannot see (only per-axis sums of the linear weights matter).
        let dsc: Vec<f64> = (0..p).map(|i| h[(i, i)].abs().sqrt().max(1e-12)).collect();
        let mut hs = h.clone();
        for i in 0..p {
            for j in 0..p {
                hs[(i, j)] /= dsc[i] * dsc[j];
            }
            hs[(i, i)] += 1e-6;
        }
        let gs = DVector::from_fn(p, |i, _| -g[i] / dsc[i]);
        let step = match hs.clone().cholesky() {
            Some(ch) => ch.solve(&gs),
            None => {
                // indefinite curvature estimate: fall back to scaled gradient
                gs.clone()
            }
        };
        let dir: Vec<f64> = (0..p).map(|i| step[i] / dsc[i]).collect();
        let slope = dot(&g, &dir);
        if slope >= 0.0 || (-slope) < 1e-12 * f.abs().max(1.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = th.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            if let Ok((fc, _)) = eval(&cand, false) {
                if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                    th = cand;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let (nf, ng) = eval(&th, true)?;
        let done = (f - nf).abs() <= 1e-12 * f.abs().max(1.0);
        f = nf;
        g = ng;
        if done {
            break;
        }
    }
    Ok(th)
}

/// Rescale each task's per-axis terminal block (quadratic and linear weights
/// together) so that its total curvature equals the median over all tasks and
/// axes. This leaves every task's minimiser unchanged but removes the
/// per-axis precision estimates, which are the noisiest part of a fit from a
/// handful of demonstrations and would otherwise dominate the regression.
/// The effort and velocity weights are likewise shrunk to their median over
/// tasks; their per-task scatter is estimation noise, and their effect on the
/// minimiser is negligible next to the terminal terms.
pub fn canonicalize_thetas(lib: &FeatureLibrary, mut thetas: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let curv = |th: &[f64], a: usize| (0..lib.n_objects).map(|j| th[lib.quad(j, a)]).sum::<f64>();
    let mut all: Vec<f64> = thetas
        .iter()
        .flat_map(|th| (0..3).map(move |a| (th, a)))
        .map(|(th, a)| curv(th, a))
        .filter(|h| *h > 0.0)
        .collect();
    if all.is_empty() {
        return thetas;
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let reference = all[all.len() / 2];
    for idx in [lib.effort(), lib.velocity()] {
        let mut v: Vec<f64> = thetas.iter().map(|t| t[idx]).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = v[v.len() / 2];
        for t in thetas.iter_mut() {
            t[idx] = med;
        }
    }
    for th in &mut thetas {
        for a in 0..3 {
            let h = curv(th, a);
            if h > 0.0 {
                let k = reference / h;
                for j in 0..lib.n_objects {
                    th[lib.quad(j, a)] *= k;
                    th[lib.lin(j, a)] *= k;
                }
            }
        }
    }
    thetas
}

/// Seeded mapping initialisation: data-derived input/output scales and, when
/// enabled, a regression warm start onto per-task maximum-likelihood fits.
pub fn init_mapping(data: &IrlData, cfg: &IrlConfig) -> Result<(MappingParams, Vec<Vec<f64>>)> {
    cfg.validate()?;
    data.validate()?;
    let z = data.tasks[0].embedding.len();
    let p = data.library.p();
    let mut sizes = vec![z];
    sizes.extend(&cfg.hidden);
    sizes.push(p);
    let mut mapping = MappingParams::init(&sizes, cfg.seed)?;

    let t = data.tasks.len() as f64;
    let mut in_scale = DVector::zeros(z);
    for i in 0..z {
        let mean = data.tasks.iter().map(|k| k.embedding[i]).sum::<f64>() / t;
        let var = data.tasks.iter().map(|k| (k.embedding[i] - mean).powi(2)).sum::<f64>() / t;
        in_scale[i] = var.sqrt();
    }
    let floor = in_scale.max().max(1e-12) * 1e-6;
    mapping.input_scale = in_scale.map(|s| s.max(floor));

    if cfg.pretrain_iters == 0 {
        return Ok((mapping, Vec::new()));
    }
    let thetas: Vec<Vec<f64>> = data
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            fit_task_theta(&data.library, &data.dynamics, &task.demos, cfg.hessian_floor, cfg.fit_iters)
                .map_err(|e| tag(e, i, 0))
        })
        .collect::<Result<_>>()?;
    let thetas = canonicalize_thetas(&data.library, thetas);
    let mut out_scale = DVector::zeros(p);
    for i in 0..p {
        out_scale[i] = (thetas.iter().map(|th| th[i] * th[i]).sum::<f64>() / t).sqrt();
    }
    let floor = out_scale.max().max(1e-12) * 1e-6;
    mapping.output_scale = out_scale.map(|s| s.max(floor));
    let inputs: Vec<DVector<f64>> = data.tasks.iter().map(|k| k.embedding.clone()).collect();
    let targets: Vec<DVector<f64>> = thetas
        .iter()
        .map(|th| DVector::from_column_slice(th).component_div(&mapping.output_scale))
        .collect();
    let members: Vec<MappingParams> = (0..cfg.ensemble.max(1) as u64)
        .into_par_iter()
        .map(|k| {
            let mut net = MappingParams::init(&sizes, cfg.seed.wrapping_add(k))?;
            net.input_scale = mapping.input_scale.clone();
            net.output_scale = mapping.output_scale.clone();
            fit_regression(&mut net, &inputs, &targets, cfg.weight_decay, cfg.pretrain_iters)?;
            Ok(net)
        })
        .collect::<Result<_>>()?;
    let mapping = MappingParams::average(&members)?;
    Ok((mapping, thetas))
}

/// Learn `(q, m)`: warm start, then joint gradient descent with momentum on
/// the IRL loss. Rejected steps halve the step size and reset the momentum,
/// so the recorded loss curve is non-increasing.
pub fn train(data: &IrlData, cfg: &IrlConfig) -> Result<TrainOutput> {
    let (mut mapping, task_thetas) = init_mapping(data, cfg)?;
    let mut m = SharedParams::default();
    let lambda = cfg.hessian_floor;
    let cur = irl_loss_grad(&mapping, &m, data, lambda)
        .map_err(|e| Error::Training { iteration: 0, reason: e.to_string() })?;
    let mut loss = cur.loss;
    let mut grad = cur.grad;
    let mut curve = vec![loss];
    let nq = mapping.n_params();
    let scale = 1.0 / data.n_demos().max(1) as f64;
    let mut eta = cfg.step_size;
    let mut vel = vec![0.0; nq + 4];
    let mut x: Vec<f64> = mapping.flatten();
    x.extend(m.to_vec());
    let mut trial = mapping.clone();
    for it in 1..=cfg.steps {
        let cand_v: Vec<f64> = vel
            .iter()
            .zip(&grad)
            .map(|(v, g)| cfg.momentum * v - eta * scale * g)
            .collect();
        let cand: Vec<f64> = x.iter().zip(&cand_v).map(|(a, b)| a + b).collect();
        trial.set_flat(&cand[..nq])?;
        let accepted = match SharedParams::from_slice(&cand[nq..]) {
            Ok(cm) => match irl_loss_grad(&trial, &cm, data, lambda) {
                Ok(ev) if ev.loss.is_finite() && ev.loss <= loss => Some((cm, ev)),
                _ => None,
            },
            Err(_) => None,
        };
        match accepted {
            Some((cm, ev)) => {
                x = cand;
                vel = cand_v;
                mapping.set_flat(&x[..nq])?;
                m = cm;
                loss = ev.loss;
                grad = ev.grad;
                eta *= 1.2;
            }
            None => {
                eta *= 0.5;
                vel.iter_mut().for_each(|v| *v = 0.0);
                if eta < 1e-30 {
                    return Err(Error::Training {
                        iteration: it,
                        reason: "step size underflow".into(),
                    });
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                reason: "non-finite loss".into(),
            });
        }
        curve.push(loss);
    }
    Ok(TrainOutput {
        mapping,
        m,
        loss_curve: curve,
        task_thetas,
    })
}

/// θ predicted for a compressed embedding.
pub fn map_forward(mapping: &MappingParams, e: &DVector<f64>) -> Result<DVector<f64>> {
    mapping.forward(e)
}

/// Random unit-variance perturbation of a flat parameter vector.
pub fn perturb_flat(x: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    x.iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Seeded generator for tests and probes.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
