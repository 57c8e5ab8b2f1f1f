//! Direct-shooting solver for the instantiated optimal-control problem.
//!
//! The decision variables are the stacked controls; states follow from the
//! dynamics, so every returned trajectory is dynamically feasible by
//! construction. Constraints enter through a quadratic penalty
//! `μ Σ_k max(0, g(x_k))²` whose weight is raised ×10 until the violation
//! drops below `viol_tol` or `μ_max` is reached.
//!
//! Each iteration takes a damped Newton step (exact cost Hessian plus the
//! Gauss–Newton Hessian of the penalty), projected onto the control box and
//! globalised by Armijo backtracking.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintParams;
use crate::error::{Error, Result};
use crate::features::{rollout_stacked, FeatureLibrary, SharedParams};
use crate::sim::{ContState, DynamicsModel, Trajectory, Vec3};

/// A fully instantiated problem for one sub-task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub theta: Vec<f64>,
    pub m: SharedParams,
    pub rho: Option<ConstraintParams>,
    pub library: FeatureLibrary,
    /// Object positions the features are relative to (snapshot at design time).
    pub objects: Vec<Vec3>,
    pub x0: ContState,
    pub dynamics: DynamicsModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub viol_tol: f64,
    pub mu0: f64,
    pub mu_max: f64,
    pub mu_factor: f64,
    pub max_iter: usize,
    /// Stationarity tolerance on the projected step, relative to control scale.
    pub step_tol: f64,
    pub armijo: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            viol_tol: 1e-6,
            mu0: 10.0,
            mu_max: 1e6,
            mu_factor: 10.0,
            max_iter: 500,
            step_tol: 1e-12,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem<'a> {
    spec: &'a OcpSpec,
    hess: DMatrix<f64>,
    /// Cost curvature scale; the penalty is weighed against `cost / scale`.
    scale: f64,
}

impl<'a> Problem<'a> {
    fn new(spec: &'a OcpSpec) -> Result<Self> {
        if spec.theta.iter().all(|t| *t == 0.0) {
            return Err(Error::DegenerateCost("θ is identically zero".into()));
        }
        if spec.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::DegenerateCost("θ has non-finite entries".into()));
        }
        spec.dynamics.validate()?;
        let n = spec.dynamics.horizon;
        let zeros = vec![0.0; 3 * n];
        let (_, hess) = spec.library.grad_hess_u(
            &spec.x0,
            &zeros,
            &spec.theta,
            &spec.m,
            &spec.objects,
            &spec.dynamics,
        )?;
        if Cholesky::new(hess.clone()).is_none() {
            return Err(Error::DegenerateCost(
                "cost Hessian is not positive definite; no unique minimiser".into(),
            ));
        }
        let scale = hess.diagonal().mean() / 2.0;
        Ok(Self { spec, hess, scale })
    }

    fn cost(&self, u: &[f64]) -> f64 {
        let s = self.spec;
        s.library
            .cost_of_controls(&s.x0, u, &s.theta, &s.m, &s.objects, &s.dynamics)
            .expect("dimensions checked at construction")
    }

    fn cost_grad(&self, u: &[f64]) -> DVector<f64> {
        let s = self.spec;
        s.library
            .grad_hess_u(&s.x0, u, &s.theta, &s.m, &s.objects, &s.dynamics)
            .expect("dimensions checked at construction")
            .0
    }

    fn positions(&self, u: &[f64]) -> Vec<Vec3> {
        let dt = self.spec.dynamics.dt;
        let n = self.spec.dynamics.horizon;
        let mut pos = Vec::with_capacity(n + 1);
        pos.push(self.spec.x0.pos);
        let mut p = self.spec.x0.pos;
        let mut v = self.spec.x0.vel;
        for j in 0..n {
            let a = Vec3::new(u[3 * j], u[3 * j + 1], u[3 * j + 2]);
            p += v * dt + a * (0.5 * dt * dt);
            v += a * dt;
            pos.push(p);
        }
        pos
    }

    fn violation(&self, u: &[f64]) -> f64 {
        match &self.spec.rho {
            None => 0.0,
            Some(rho) => self
                .positions(u)
                .iter()
                .skip(1)
                .map(|p| rho.g_eval(p).max(0.0))
                .fold(0.0, f64::max),
        }
    }

    fn penalty(&self, u: &[f64]) -> f64 {
        match &self.spec.rho {
            None => 0.0,
            Some(rho) => self
                .positions(u)
                .iter()
                .skip(1)
                .map(|p| rho.g_eval(p).max(0.0).powi(2))
                .sum(),
        }
    }

    fn merit(&self, u: &[f64], mu: f64) -> f64 {
        self.cost(u) / self.scale + mu * self.penalty(u)
    }

    /// Gradient of the merit and its Gauss–Newton Hessian.
    fn merit_derivatives(&self, u: &[f64], mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = self.cost_grad(u) / self.scale;
        let mut h = &self.hess / self.scale;
        if let Some(rho) = &self.spec.rho {
            let n = self.spec.dynamics.horizon;
            let dt = self.spec.dynamics.dt;
            let pos = self.positions(u);
            for (k, p) in pos.iter().enumerate().skip(1) {
                let gv = rho.g_eval(p);
                if gv <= 0.0 {
                    continue;
                }
                let dg = rho.g_grad(p);
                // Jacobian row of g_k: ∂pos_k/∂u_j = dt² (k - j - ½) for j < k
                let mut jrow = DVector::zeros(3 * n);
                for j in 0..k {
                    let w = dt * dt * (k as f64 - j as f64 - 0.5);
                    for a in 0..3 {
                        jrow[3 * j + a] = w * dg[a];
                    }
                }
                g += &jrow * (2.0 * mu * gv);
                h.ger(2.0 * mu, &jrow, &jrow, 1.0);
            }
        }
        (g, h)
    }
}

fn project(u: &mut [f64], bound: f64) {
    for v in u.iter_mut() {
        *v = v.clamp(-bound, bound);
    }
}

/// Constant-acceleration controls driving the state straight to `target` at
/// the end of the horizon, clipped to the control bounds.
pub fn straight_line_controls(x0: &ContState, target: &Vec3, dynamics: &DynamicsModel) -> Vec<f64> {
    let n = dynamics.horizon as f64;
    let dt = dynamics.dt;
    let reach = dt * dt * n * n / 2.0;
    let a = (target - x0.pos - x0.vel * (n * dt)) / reach;
    let mut u: Vec<f64> = (0..dynamics.horizon).flat_map(|_| [a.x, a.y, a.z]).collect();
    project(&mut u, dynamics.u_max);
    u
}

/// Warm start aimed at the minimiser of the quadratic part of θᵀφ.
pub fn warm_start(spec: &OcpSpec) -> Result<Vec<f64>> {
    let mins = spec
        .library
        .quadratic_minimizer(&spec.theta, &spec.m, &spec.objects)?;
    let mut target = spec.x0.pos;
    for a in 0..3 {
        if let Some(v) = mins[a] {
            target[a] = v;
        }
    }
    Ok(straight_line_controls(&spec.x0, &target, &spec.dynamics))
}

pub fn solve_ocp(spec: &OcpSpec, cfg: &SolverConfig) -> Result<SolveResult> {
    solve_ocp_from(spec, cfg, None)
}

/// Solve starting from `init` (stacked controls) or from the warm start.
pub fn solve_ocp_from(spec: &OcpSpec, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<SolveResult> {
    let prob = Problem::new(spec)?;
    let n = spec.dynamics.horizon;
    let u_max = spec.dynamics.u_max;
    let mut u = match init {
        Some(v) => {
            if v.len() != 3 * n {
                return Err(Error::Dimension {
                    what: "initial controls",
                    expected: 3 * n,
                    got: v.len(),
                });
            }
            v.to_vec()
        }
        None => warm_start(spec)?,
    };
    project(&mut u, u_max);

    let mut mu = if spec.rho.is_some() { cfg.mu0 } else { 0.0 };
    let mut iterations = 0usize;
    let mut converged = false;
    'outer: loop {
        // inner loop: minimise the merit at fixed μ
        let mut f = prob.merit(&u, mu);
        let mut inner_done = false;
        while iterations < cfg.max_iter {
            iterations += 1;
            let (g, mut h) = prob.merit_derivatives(&u, mu);
            // small damping keeps the system solvable when the penalty dominates
            for i in 0..3 * n {
                h[(i, i)] += 1e-12 * (1.0 + h[(i, i)].abs());
            }
            let dir = match Cholesky::new(h) {
                Some(c) => -c.solve(&g),
                None => -g.clone(),
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            let mut cand = u.clone();
            for _ in 0..60 {
                for i in 0..3 * n {
                    cand[i] = u[i] + alpha * dir[i];
                }
                project(&mut cand, u_max);
                let fc = prob.merit(&cand, mu);
                let decrease: f64 = (0..3 * n).map(|i| g[i] * (cand[i] - u[i])).sum();
                if fc <= f + cfg.armijo * decrease && fc.is_finite() {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no descent available along the projected Newton arc
                inner_done = true;
                break;
            }
            let step: f64 = (0..3 * n).map(|i| (cand[i] - u[i]).powi(2)).sum::<f64>().sqrt();
            let f_new = prob.merit(&cand, mu);
            let rel_change = (f - f_new).abs() / (1.0 + f.abs());
            u.copy_from_slice(&cand);
            f = f_new;
            if step <= cfg.step_tol * (1.0 + u_max) || rel_change <= 1e-15 {
                inner_done = true;
                break;
            }
        }
        let viol = prob.violation(&u);
        if spec.rho.is_none() || viol <= cfg.viol_tol {
            converged = inner_done;
            break 'outer;
        }
        if mu >= cfg.mu_max || iterations >= cfg.max_iter {
            break 'outer;
        }
        mu = (mu * cfg.mu_factor).min(cfg.mu_max);
    }

    let trajectory = rollout_stacked(&spec.x0, &u, &spec.dynamics)?;
    Ok(SolveResult {
        cost: prob.cost(&u),
        max_violation: prob.violation(&u),
        trajectory,
        iterations,
        converged,
    })
}
