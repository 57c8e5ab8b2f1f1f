//! Object-relative polynomial feature library and the trajectory cost
//! `θᵀφ(x, u, m)` with its exact derivatives in the stacked controls.
//!
//! Feature layout for `n` objects (`p = 6 n + 2`):
//!
//! * `2 (3 j + a)`     — terminal quadratic `m_term ((ee_a - o_ja) / s_a)²`
//! * `2 (3 j + a) + 1` — terminal linear `m_term (ee_a - o_ja) / s_a`
//! * `p - 2`           — running control effort `‖u‖²`
//! * `p - 1`           — terminal velocity `‖v‖²`
//!
//! Because the dynamics are linear and every feature is at most quadratic,
//! the Hessian in the controls is block-diagonal per axis:
//! `H_a = 2 θ_u I + h_a b_p b_pᵀ + 2 θ_v b_v b_vᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{rollout, unstack_controls, ContState, DynamicsModel, Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDescriptor {
    PolyObjectRelative,
}

impl std::str::FromStr for FeatureDescriptor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly_object_relative" => Ok(Self::PolyObjectRelative),
            other => Err(Error::InvalidArgument(format!("unknown feature descriptor {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Running,
    Terminal,
}

/// Shared feature parameters `m`: per-axis length scales and the terminal weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub scales: [f64; 3],
    pub terminal_weight: f64,
}

impl Default for SharedParams {
    fn default() -> Self {
        Self {
            scales: [1.0; 3],
            terminal_weight: 1.0,
        }
    }
}

impl SharedParams {
    pub const LEN: usize = 4;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.scales[0], self.scales[1], self.scales[2], self.terminal_weight]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Dimension {
                what: "shared parameters m",
                expected: Self::LEN,
                got: v.len(),
            });
        }
        let m = Self {
            scales: [v[0], v[1], v[2]],
            terminal_weight: v[3],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "length scales must be positive, got {:?}",
                self.scales
            )));
        }
        if !self.terminal_weight.is_finite() {
            return Err(Error::InvalidArgument("terminal weight must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLibrary {
    pub descriptor: FeatureDescriptor,
    pub n_objects: usize,
}

impl Default for FeatureLibrary {
    fn default() -> Self {
        Self {
            descriptor: FeatureDescriptor::PolyObjectRelative,
            n_objects: 4,
        }
    }
}

impl FeatureLibrary {
    pub fn new(n_objects: usize) -> Self {
        Self {
            descriptor: FeatureDescriptor::PolyObjectRelative,
            n_objects,
        }
    }

    pub fn p(&self) -> usize {
        6 * self.n_objects + 2
    }

    pub fn quad(&self, j: usize, a: usize) -> usize {
        2 * (3 * j + a)
    }

    pub fn lin(&self, j: usize, a: usize) -> usize {
        2 * (3 * j + a) + 1
    }

    pub fn effort(&self) -> usize {
        self.p() - 2
    }

    pub fn velocity(&self) -> usize {
        self.p() - 1
    }

    /// Object positions padded with the origin up to `n_objects`.
    pub fn padded_objects(&self, objects: &[Vec3]) -> Result<Vec<Vec3>> {
        if objects.len() > self.n_objects {
            return Err(Error::Dimension {
                what: "scene objects",
                expected: self.n_objects,
                got: objects.len(),
            });
        }
        let mut v = objects.to_vec();
        v.resize(self.n_objects, Vec3::zeros());
        Ok(v)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.p() {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.p(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn features(
        &self,
        x: &ContState,
        u: &Vec3,
        stage: Stage,
        m: &SharedParams,
        objects: &[Vec3],
    ) -> Result<DVector<f64>> {
        let objs = self.padded_objects(objects)?;
        let mut phi = DVector::zeros(self.p());
        match stage {
            Stage::Running => phi[self.effort()] = u.norm_squared(),
            Stage::Terminal => {
                for (j, o) in objs.iter().enumerate() {
                    for a in 0..3 {
                        let r = (x.pos[a] - o[a]) / m.scales[a];
                        phi[self.quad(j, a)] = m.terminal_weight * r * r;
                        phi[self.lin(j, a)] = m.terminal_weight * r;
                    }
                }
                phi[self.velocity()] = x.vel.norm_squared();
            }
        }
        Ok(phi)
    }

    pub fn traj_cost(
        &self,
        traj: &Trajectory,
        theta: &[f64],
        m: &SharedParams,
        objects: &[Vec3],
    ) -> Result<f64> {
        self.check_theta(theta)?;
        let th = DVector::from_column_slice(theta);
        let mut c = 0.0;
        for (x, u) in traj.states.iter().zip(&traj.controls) {
            c += th.dot(&self.features(x, u, Stage::Running, m, objects)?);
        }
        c += th.dot(&self.features(traj.terminal(), &Vec3::zeros(), Stage::Terminal, m, objects)?);
        Ok(c)
    }

    /// Per-axis curvature `h_a` and slope `G_a` of the terminal position cost.
    pub fn axis_terms(
        &self,
        theta: &[f64],
        m: &SharedParams,
        objects: &[Vec3],
        terminal_pos: &Vec3,
    ) -> Result<AxisTerms> {
        self.check_theta(theta)?;
        let objs = self.padded_objects(objects)?;
        let mut h = [0.0; 3];
        let mut g = [0.0; 3];
        for a in 0..3 {
            let s = m.scales[a];
            for (j, o) in objs.iter().enumerate() {
                let tq = theta[self.quad(j, a)];
                let tl = theta[self.lin(j, a)];
                h[a] += 2.0 * tq / (s * s);
                g[a] += 2.0 * tq * (terminal_pos[a] - o[a]) / (s * s) + tl / s;
            }
            h[a] *= m.terminal_weight;
            g[a] *= m.terminal_weight;
        }
        Ok(AxisTerms {
            h,
            g,
            effort: theta[self.effort()],
            velocity: theta[self.velocity()],
        })
    }

    /// Minimiser of the terminal position polynomial, per axis; `None` on axes
    /// without positive curvature.
    pub fn quadratic_minimizer(
        &self,
        theta: &[f64],
        m: &SharedParams,
        objects: &[Vec3],
    ) -> Result<[Option<f64>; 3]> {
        let t = self.axis_terms(theta, m, objects, &Vec3::zeros())?;
        let mut out = [None; 3];
        for a in 0..3 {
            if t.h[a] > 0.0 {
                // gradient at 0 is g[a]; minimiser is -g/h
                out[a] = Some(-t.g[a] / t.h[a]);
            }
        }
        Ok(out)
    }

    /// Exact gradient and Hessian of the trajectory cost with respect to the
    /// stacked controls `u[3 j + a]`.
    pub fn grad_hess_u(
        &self,
        x0: &ContState,
        controls: &[f64],
        theta: &[f64],
        m: &SharedParams,
        objects: &[Vec3],
        dynamics: &DynamicsModel,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = dynamics.horizon;
        if controls.len() != 3 * n {
            return Err(Error::Dimension {
                what: "stacked controls",
                expected: 3 * n,
                got: controls.len(),
            });
        }
        let xn = terminal_state(x0, controls, dynamics);
        let t = self.axis_terms(theta, m, objects, &xn.pos)?;
        let bp = dynamics.terminal_pos_row();
        let bv = dynamics.terminal_vel_row();
        let mut g = DVector::zeros(3 * n);
        let mut hm = DMatrix::zeros(3 * n, 3 * n);
        for a in 0..3 {
            for j in 0..n {
                let r = 3 * j + a;
                g[r] = 2.0 * t.effort * controls[r]
                    + bp[j] * t.g[a]
                    + bv[j] * 2.0 * t.velocity * xn.vel[a];
                for k in 0..n {
                    let c = 3 * k + a;
                    hm[(r, c)] = t.h[a] * bp[j] * bp[k] + 2.0 * t.velocity * bv[j] * bv[k];
                }
                hm[(r, r)] += 2.0 * t.effort;
            }
        }
        Ok((g, hm))
    }

    /// Cost of a stacked control sequence (convenience for solvers).
    pub fn cost_of_controls(
        &self,
        x0: &ContState,
        controls: &[f64],
        theta: &[f64],
        m: &SharedParams,
        objects: &[Vec3],
        dynamics: &DynamicsModel,
    ) -> Result<f64> {
        let xn = terminal_state(x0, controls, dynamics);
        let t = self.axis_terms(theta, m, objects, &Vec3::zeros())?;
        let objs = self.padded_objects(objects)?;
        let mut c = t.effort * controls.iter().map(|v| v * v).sum::<f64>();
        c += t.velocity * xn.vel.norm_squared();
        for (j, o) in objs.iter().enumerate() {
            for a in 0..3 {
                let r = (xn.pos[a] - o[a]) / m.scales[a];
                c += m.terminal_weight
                    * (theta[self.quad(j, a)] * r * r + theta[self.lin(j, a)] * r);
            }
        }
        Ok(c)
    }
}

/// Axis-wise summary of a cost at a given terminal position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisTerms {
    pub h: [f64; 3],
    pub g: [f64; 3],
    pub effort: f64,
    pub velocity: f64,
}

/// Terminal state of a stacked control sequence without building the rollout.
pub fn terminal_state(x0: &ContState, controls: &[f64], dynamics: &DynamicsModel) -> ContState {
    let n = controls.len() / 3;
    let dt = dynamics.dt;
    let mut pos = x0.pos + x0.vel * (n as f64 * dt);
    let mut vel = x0.vel;
    for j in 0..n {
        let w = dt * dt * (n as f64 - j as f64 - 0.5);
        for a in 0..3 {
            pos[a] += w * controls[3 * j + a];
            vel[a] += dt * controls[3 * j + a];
        }
    }
    ContState::new(pos, vel)
}

/// Roll out a stacked control sequence.
pub fn rollout_stacked(
    x0: &ContState,
    controls: &[f64],
    dynamics: &DynamicsModel,
) -> Result<Trajectory> {
    rollout(x0, &unstack_controls(controls), dynamics)
}

/// Weights of the demonstrator's cost `θ_u‖u‖² + w_T‖ee_N − target‖² + w_v‖v_N‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleWeights {
    pub effort: f64,
    pub terminal: f64,
    pub velocity: f64,
}

impl Default for OracleWeights {
    fn default() -> Self {
        Self {
            effort: 1.0,
            terminal: 1e5,
            velocity: 1e3,
        }
    }
}

/// θ realising the demonstrator cost for an object-relative target
/// `o_k + offset` (with unit scales and terminal weight). The linear
/// coefficients are spread evenly over all objects: only their per-axis sum
/// enters the cost, and the even spread is the minimum-norm representative.
pub fn oracle_theta(
    lib: &FeatureLibrary,
    object: usize,
    offset: &Vec3,
    w: &OracleWeights,
) -> Vec<f64> {
    let mut th = vec![0.0; lib.p()];
    let n = lib.n_objects as f64;
    for a in 0..3 {
        th[lib.quad(object, a)] = w.terminal;
        for j in 0..lib.n_objects {
            th[lib.lin(j, a)] = -2.0 * w.terminal * offset[a] / n;
        }
    }
    th[lib.effort()] = w.effort;
    th[lib.velocity()] = w.velocity;
    th
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objs() -> Vec<Vec3> {
        vec![
            Vec3::new(0.1, 0.2, 0.02),
            Vec3::new(-0.2, 0.1, 0.02),
            Vec3::new(0.25, -0.2, 0.02),
            Vec3::new(-0.1, -0.25, 0.02),
        ]
    }

    #[test]
    fn feature_count() {
        assert_eq!(FeatureLibrary::new(4).p(), 26);
    }

    #[test]
    fn features_vanish_at_object() {
        let lib = FeatureLibrary::new(4);
        let o = objs();
        let x = ContState::at_rest(o[0]);
        let m = SharedParams::default();
        let f = lib.features(&x, &Vec3::zeros(), Stage::Terminal, &m, &o).unwrap();
        for a in 0..3 {
            assert_eq!(f[lib.quad(0, a)], 0.0);
            assert_eq!(f[lib.lin(0, a)], 0.0);
        }
        let f = lib.features(&x, &Vec3::zeros(), Stage::Running, &m, &o).unwrap();
        assert_eq!(f[lib.effort()], 0.0);
    }

    #[test]
    fn doubling_scale() {
        let lib = FeatureLibrary::new(4);
        let o = objs();
        let x = ContState::at_rest(Vec3::new(0.3, 0.1, 0.2));
        let m1 = SharedParams::default();
        let m2 = SharedParams {
            scales: [2.0; 3],
            terminal_weight: 1.0,
        };
        let f1 = lib.features(&x, &Vec3::zeros(), Stage::Terminal, &m1, &o).unwrap();
        let f2 = lib.features(&x, &Vec3::zeros(), Stage::Terminal, &m2, &o).unwrap();
        for j in 0..4 {
            for a in 0..3 {
                assert_abs_diff_eq!(f2[lib.quad(j, a)], f1[lib.quad(j, a)] / 4.0, epsilon = 1e-15);
                assert_abs_diff_eq!(f2[lib.lin(j, a)], f1[lib.lin(j, a)] / 2.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn effort_only_cost_and_derivatives() {
        let lib = FeatureLibrary::new(4);
        let d = DynamicsModel::new(0.1, 2, 2.0).unwrap();
        let mut th = vec![0.0; 26];
        th[lib.effort()] = 1.0;
        let u = [0.5, -1.0, 0.25, 1.5, 0.0, -0.5];
        let x0 = ContState::at_rest(Vec3::zeros());
        let t = rollout_stacked(&x0, &u, &d).unwrap();
        let c = lib.traj_cost(&t, &th, &SharedParams::default(), &objs()).unwrap();
        assert_abs_diff_eq!(c, u.iter().map(|v| v * v).sum::<f64>(), epsilon = 1e-15);
        let (g, h) = lib
            .grad_hess_u(&x0, &u, &th, &SharedParams::default(), &objs(), &d)
            .unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(g[i], 2.0 * u[i], epsilon = 1e-15);
            for k in 0..6 {
                assert_abs_diff_eq!(h[(i, k)], if i == k { 2.0 } else { 0.0 }, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn cost_paths_agree() {
        let lib = FeatureLibrary::new(4);
        let d = DynamicsModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let th: Vec<f64> = (0..26).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = SharedParams {
            scales: [0.7, 1.3, 0.9],
            terminal_weight: 1.7,
        };
        let x0 = ContState::new(Vec3::new(0.1, 0.0, 0.3), Vec3::new(0.1, -0.2, 0.05));
        let t = rollout_stacked(&x0, &u, &d).unwrap();
        let a = lib.traj_cost(&t, &th, &m, &objs()).unwrap();
        let b = lib.cost_of_controls(&x0, &u, &th, &m, &objs(), &d).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn oracle_theta_minimiser_is_target() {
        let lib = FeatureLibrary::new(4);
        let o = objs();
        let off = Vec3::new(0.05, 0.0, 0.04);
        let th = oracle_theta(&lib, 2, &off, &OracleWeights::default());
        let mn = lib.quadratic_minimizer(&th, &SharedParams::default(), &o).unwrap();
        for a in 0..3 {
            assert_abs_diff_eq!(mn[a].unwrap(), o[2][a] + off[a], epsilon = 1e-12);
        }
    }
}
