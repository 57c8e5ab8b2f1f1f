//! Parametric mapping `M(q, ẽ) → θ`: a rectified-linear perceptron with a
//! fixed input whitening and a fixed per-feature output scale.
//!
//! The scales are not trained; they put inputs at unit spread and outputs at
//! unit magnitude so the raw network weights are well conditioned even though
//! the cost weights themselves span many orders of magnitude.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub layer_sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l+1] × sizes[l]`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// Inputs are divided by this before the first layer.
    pub input_scale: DVector<f64>,
    /// Network outputs are multiplied by this to give θ.
    pub output_scale: DVector<f64>,
}

/// Activations recorded by a forward pass, for backpropagation.
pub struct Tape {
    /// Layer inputs (post-activation), `acts[0]` is the scaled input.
    acts: Vec<DVector<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DVector<f64>>,
}

impl MappingParams {
    /// He-normal initialisation, zero biases, unit scales.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|s| *s == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have >= 2 positive entries, got {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let n = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).unwrap();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| n.sample(&mut rng)));
            biases.push(DVector::zeros(w[1]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            input_scale: DVector::from_element(layer_sizes[0], 1.0),
            output_scale: DVector::from_element(*layer_sizes.last().unwrap(), 1.0),
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let mut m = Self::init(layer_sizes, 0)?;
        for w in &mut m.weights {
            w.fill(0.0);
        }
        Ok(m)
    }

    pub fn z(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn p(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layer_sizes.len();
        if self.weights.len() != l - 1 || self.biases.len() != l - 1 {
            return Err(Error::Model("layer count mismatch".into()));
        }
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[i].shape() != (w[1], w[0]) || self.biases[i].len() != w[1] {
                return Err(Error::Model(format!("layer {i} has inconsistent shape")));
            }
        }
        if self.input_scale.len() != self.z() || self.output_scale.len() != self.p() {
            return Err(Error::Model("scale vectors have the wrong length".into()));
        }
        if self.flatten().iter().any(|x| !x.is_finite()) {
            return Err(Error::Model("non-finite mapping parameter".into()));
        }
        Ok(())
    }

    /// Raw network output (before the output scale), with the tape.
    pub fn forward_raw(&self, e: &DVector<f64>) -> Result<(DVector<f64>, Tape)> {
        if e.len() != self.z() {
            return Err(Error::Dimension {
                what: "compressed embedding",
                expected: self.z(),
                got: e.len(),
            });
        }
        let mut h = e.component_div(&self.input_scale);
        let mut acts = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            acts.push(h.clone());
            let a = &self.weights[l] * &h + &self.biases[l];
            h = if l + 1 < self.n_layers() {
                a.map(|x| x.max(0.0))
            } else {
                a.clone()
            };
            pre.push(a);
        }
        Ok((h, Tape { acts, pre }))
    }

    pub fn forward(&self, e: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_raw(e)?.0.component_mul(&self.output_scale))
    }

    /// Gradient of a scalar with respect to all weights and biases, given its
    /// gradient with respect to the raw output. Layout matches `flatten`.
    pub fn backward_raw(&self, tape: &Tape, d_out: &DVector<f64>) -> Vec<f64> {
        let mut grads_w: Vec<DMatrix<f64>> = Vec::with_capacity(self.n_layers());
        let mut grads_b: Vec<DVector<f64>> = Vec::with_capacity(self.n_layers());
        let mut delta = d_out.clone();
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                delta = delta.zip_map(&tape.pre[l], |d, a| if a > 0.0 { d } else { 0.0 });
            }
            grads_w.push(&delta * tape.acts[l].transpose());
            grads_b.push(delta.clone());
            delta = self.weights[l].tr_mul(&delta);
        }
        grads_w.reverse();
        grads_b.reverse();
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in grads_w.iter().zip(&grads_b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    /// Gradient with respect to the parameters given `dθ`.
    pub fn backward(&self, tape: &Tape, d_theta: &DVector<f64>) -> Vec<f64> {
        self.backward_raw(tape, &d_theta.component_mul(&self.output_scale))
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Weights (column-major) then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::Dimension {
                what: "mapping parameters",
                expected: self.n_params(),
                got: v.len(),
            });
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.copy_from_slice(&v[i..i + n]);
            i += n;
            let n = b.len();
            b.copy_from_slice(&v[i..i + n]);
            i += n;
        }
        Ok(())
    }

    /// A single network computing the mean of `nets` exactly: hidden layers
    /// are stacked block-diagonally and the output layer is averaged. All
    /// members must share layer sizes and scales.
    pub fn average(nets: &[MappingParams]) -> Result<Self> {
        let first = nets
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero networks".into()))?;
        if nets.iter().any(|n| {
            n.layer_sizes != first.layer_sizes
                || n.input_scale != first.input_scale
                || n.output_scale != first.output_scale
        }) {
            return Err(Error::InvalidArgument("networks differ in shape or scaling".into()));
        }
        let k = nets.len();
        let l = first.n_layers();
        let mut sizes = first.layer_sizes.clone();
        for s in sizes.iter_mut().take(l).skip(1) {
            *s *= k;
        }
        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        for layer in 0..l {
            let (r, c) = first.weights[layer].shape();
            let last = layer + 1 == l;
            let rows = if last { r } else { r * k };
            let cols = if layer == 0 { c } else { c * k };
            let mut w = DMatrix::zeros(rows, cols);
            let mut b = DVector::zeros(rows);
            for (i, n) in nets.iter().enumerate() {
                let r0 = if last { 0 } else { i * r };
                let c0 = if layer == 0 { 0 } else { i * c };
                let scale = if last { 1.0 / k as f64 } else { 1.0 };
                let mut view = w.view_mut((r0, c0), (r, c));
                view += &n.weights[layer] * scale;
                let mut bv = b.rows_mut(r0, r);
                bv += &n.biases[layer] * scale;
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            input_scale: first.input_scale.clone(),
            output_scale: first.output_scale.clone(),
        })
    }

    /// Upper bound on the Lipschitz constant of `ẽ ↦ θ` in the Euclidean norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let inv_in = self.input_scale.iter().map(|s| 1.0 / s.abs()).fold(0.0, f64::max);
        let out = self.output_scale.iter().map(|s| s.abs()).fold(0.0, f64::max);
        let prod: f64 = self
            .weights
            .iter()
            .map(|w| w.clone().svd(false, false).singular_values.max())
            .product();
        inv_in * prod * out
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm2(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum()
    }

    /// Gradient of `weight_norm2` in `flatten` layout.
    pub fn weight_norm2_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().map(|x| 2.0 * x));
            out.extend(std::iter::repeat(0.0).take(b.len()));
        }
        out
    }
}

/// Limited-memory BFGS with Armijo backtracking; returns the final value.
pub fn lbfgs<F>(x: &mut [f64], mut f: F, max_iter: usize, tol: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x.len();
    let mem = 10;
    let (mut fx, mut g) = f(x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= tol {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / gnorm.max(1.0)
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for j in 0..n {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // not a descent direction: reset memory and use steepest descent
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (fc, gc) = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let s: Vec<f64> = cand.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let improvement = fx - fc;
        x.copy_from_slice(&cand);
        fx = fc;
        g = gc;
        if dot(&s, &y) > 1e-12 * dot(&y, &y).max(1e-300) {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > mem {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        if improvement.abs() <= 1e-16 * fx.abs().max(1e-300) {
            break;
        }
    }
    fx
}

/// Least-squares fit of the raw network output to `targets` (already divided
/// by the output scale), with weight decay `wd`.
pub fn fit_regression(
    mapping: &mut MappingParams,
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    wd: f64,
    max_iter: usize,
) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument("regression needs matching, nonempty data".into()));
    }
    let n = inputs.len() as f64;
    let mut x = mapping.flatten();
    let mut work = mapping.clone();
    let fx = lbfgs(
        &mut x,
        |v| {
            work.set_flat(v).expect("length fixed");
            let mut loss = 0.5 * wd * work.weight_norm2();
            let mut grad: Vec<f64> = work.weight_norm2_grad().iter().map(|g| 0.5 * wd * g).collect();
            for (e, t) in inputs.iter().zip(targets) {
                let (out, tape) = work.forward_raw(e).expect("dimension checked");
                let r = (out - t) / n;
                loss += 0.5 * n * r.norm_squared();
                for (g, d) in grad.iter_mut().zip(work.backward_raw(&tape, &r)) {
                    *g += d;
                }
            }
            (loss, grad)
        },
        max_iter,
        1e-10,
    );
    mapping.set_flat(&x)?;
    Ok(fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_weights_give_zero_theta() {
        let m = MappingParams::zeros(&[3, 8, 5]).unwrap();
        let th = m.forward(&DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        assert!(th.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = MappingParams::zeros(&[4, 4]).unwrap();
        m.weights[0] = DMatrix::identity(4, 4);
        let e = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
        assert_eq!(m.forward(&e).unwrap(), e);
    }

    #[test]
    fn flatten_round_trip() {
        let m = MappingParams::init(&[3, 5, 2], 7).unwrap();
        let mut m2 = MappingParams::zeros(&[3, 5, 2]).unwrap();
        m2.set_flat(&m.flatten()).unwrap();
        assert_eq!(m.weights, m2.weights);
        assert_eq!(m.biases, m2.biases);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = MappingParams::init(&[3, 8, 8, 4], 1).unwrap();
        m.output_scale = DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0]);
        m.input_scale = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        let e = DVector::from_vec(vec![0.4, -0.7, 1.1]);
        let w = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.7]);
        let (_, tape) = m.forward_raw(&e).unwrap();
        let g = m.backward(&tape, &w);
        let base = m.flatten();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-6;
            let mut mp = m.clone();
            mp.set_flat(&p).unwrap();
            let mut q = base.clone();
            q[i] -= 1e-6;
            let mut mq = m.clone();
            mq.set_flat(&q).unwrap();
            let fd = (mp.forward(&e).unwrap().dot(&w) - mq.forward(&e).unwrap().dot(&w)) / 2e-6;
            assert_abs_diff_eq!(fd, g[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn average_is_mean_of_members() {
        let nets: Vec<_> = (0..3).map(|s| MappingParams::init(&[3, 5, 4, 2], s).unwrap()).collect();
        let avg = MappingParams::average(&nets).unwrap();
        assert_eq!(avg.layer_sizes, vec![3, 15, 12, 2]);
        let e = DVector::from_vec(vec![0.2, -0.4, 1.3]);
        let mean = nets.iter().map(|n| n.forward(&e).unwrap()).fold(DVector::zeros(2), |a, b| a + b) / 3.0;
        assert!((avg.forward(&e).unwrap() - mean).amax() < 1e-12);
    }

    #[test]
    fn lbfgs_quadratic() {
        let mut x = vec![3.0, -2.0];
        let f = lbfgs(
            &mut x,
            |v| {
                let f = (v[0] - 1.0).powi(2) + 10.0 * (v[1] + 0.5).powi(2);
                (f, vec![2.0 * (v[0] - 1.0), 20.0 * (v[1] + 0.5)])
            },
            100,
            1e-12,
        );
        assert!(f < 1e-16);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(x[1], -0.5, epsilon = 1e-7);
    }
}
