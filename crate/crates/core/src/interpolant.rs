//! Interpolants between paired endpoints and the non-intersection objective.
//!
//! The learnable interpolant is
//!
//! ```text
//! I(x, y, t) = (1 - t) x + t y + t (1 - t) gamma(x, y, t)
//! ```
//!
//! with `gamma` an MLP, so `I(., ., 0) = x` and `I(., ., 1) = y` hold for any
//! weights. Its time derivative
//!
//! ```text
//! dI/dt = y - x + (1 - 2t) gamma + t (1 - t) dgamma/dt
//! ```
//!
//! is assembled with `dgamma/dt` replaced by a central difference of two
//! extra network evaluations, so the derivative stays a plain graph
//! expression in the network weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::error::{invalid, Error, Result};
use crate::nn::{BoundMlp, MlpParams};

/// Default finite-difference step for `dgamma/dt`.
pub const DEFAULT_FD_STEP: f64 = 1e-3;
/// Default kernel floor.
pub const DEFAULT_ETA: f64 = 1e-4;

/// Bandwidths and floor of the space-time repulsion kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Spatial bandwidth, in data units.
    pub sigma_space: f64,
    /// Temporal bandwidth.
    pub sigma_time: f64,
    pub eta: f64,
}

impl KernelParams {
    pub fn new(sigma_space: f64, sigma_time: f64, eta: f64) -> Result<Self> {
        let k = Self {
            sigma_space,
            sigma_time,
            eta,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_space > 0.0 && self.sigma_time > 0.0) {
            return Err(invalid(format!(
                "kernel bandwidths must be positive, got {} and {}",
                self.sigma_space, self.sigma_time
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid(format!("kernel floor must be in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

/// `max(exp(-a^2 / 2 sigma^2), eta)`.
pub fn kernel_gamma(a: f64, sigma: f64, eta: f64) -> f64 {
    (-a * a / (2.0 * sigma * sigma)).exp().max(eta)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

fn check_times(t: &[f64]) -> Result<()> {
    t.iter().try_for_each(|&t| check_time(t))
}

/// `(1 - t) x + t y`.
pub fn linear_interp(x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            context: "linear interpolant endpoints".into(),
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Time derivative of the linear interpolant, `y - x`.
pub fn linear_interp_dt(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| b - a).collect()
}

/// `n x d` tensor whose row `i` is `f(t[i])` repeated.
fn row_scalars(t: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t
        .iter()
        .flat_map(|&ti| std::iter::repeat_n(f(ti), d))
        .collect();
    Tensor::matrix(t.len(), d, data).expect("finite row scalars")
}

/// Lower and upper finite-difference points clipped into `[0, 1]`.
fn fd_points(t: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = t.iter().map(|&t| (t - h).max(0.0)).collect();
    let hi = t.iter().map(|&t| (t + h).min(1.0)).collect();
    (lo, hi)
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("finite-difference step must be positive, got {h}")))
    }
}

fn check_endpoints(x: &Tensor, y: &Tensor, t: &[f64], dim: usize) -> Result<()> {
    for (m, what) in [(x, "interpolant source"), (y, "interpolant target")] {
        if m.cols() != dim {
            return Err(Error::DimMismatch {
                context: what.into(),
                expected: dim,
                got: m.cols(),
            });
        }
    }
    if x.rows() != y.rows() || x.rows() != t.len() {
        return Err(invalid(format!(
            "interpolant batch sizes differ: {} sources, {} targets, {} times",
            x.rows(),
            y.rows(),
            t.len()
        )));
    }
    check_times(t)
}

/// The residual network and the path it defines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnableInterpolant {
    net: MlpParams,
    dim: usize,
    time_input: bool,
}

impl LearnableInterpolant {
    /// A fresh interpolant for `dim`-dimensional data. With `time_input` the
    /// residual network sees `(x, y, t)`, otherwise only `(x, y)`.
    /// `output_gain` scales the initial output layer; small values start the
    /// path near the straight line.
    pub fn new(
        dim: usize,
        hidden: &[usize],
        seed: u64,
        time_input: bool,
        output_gain: f64,
    ) -> Result<Self> {
        let mut dims = vec![2 * dim + usize::from(time_input)];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let net = MlpParams::init_with_output_gain(&dims, seed, output_gain)?;
        Ok(Self {
            net,
            dim,
            time_input,
        })
    }

    pub fn from_net(net: MlpParams, dim: usize, time_input: bool) -> Result<Self> {
        let expected_in = 2 * dim + usize::from(time_input);
        if net.input_dim() != expected_in || net.output_dim() != dim {
            return Err(invalid(format!(
                "residual network {:?} does not fit dimension {dim} (time input: {time_input})",
                net.dims()
            )));
        }
        Ok(Self {
            net,
            dim,
            time_input,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    fn gamma_input(&self, x: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(if self.time_input {
            let tc = Tensor::column(t)?;
            Tensor::hcat(&[x, y, &tc])?
        } else {
            Tensor::hcat(&[x, y])?
        })
    }

    /// Residual network output, graph-free.
    pub fn gamma(&self, x: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.net.eval(&self.gamma_input(x, y, t)?)?)
    }

    fn compose(&self, x: &Tensor, y: &Tensor, t: &[f64], gamma: &Tensor) -> Tensor {
        let d = self.dim;
        let mut z = Tensor::zeros(&[t.len(), d]);
        for (i, &ti) in t.iter().enumerate() {
            let (xr, yr, gr) = (x.row(i), y.row(i), gamma.row(i));
            for (k, zk) in z.row_mut(i).iter_mut().enumerate() {
                *zk = (1.0 - ti) * xr[k] + ti * yr[k] + ti * (1.0 - ti) * gr[k];
            }
        }
        z
    }

    /// `I(x, y, t)` row by row, graph-free.
    pub fn eval(&self, x: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        check_endpoints(x, y, t, self.dim)?;
        let gamma = self.gamma(x, y, t)?;
        Ok(self.compose(x, y, t, &gamma))
    }

    /// `I` and its time derivative, graph-free.
    pub fn eval_with_dt(
        &self,
        x: &Tensor,
        y: &Tensor,
        t: &[f64],
        h: f64,
    ) -> Result<(Tensor, Tensor)> {
        check_step(h)?;
        check_endpoints(x, y, t, self.dim)?;
        let gamma = self.gamma(x, y, t)?;
        let z = self.compose(x, y, t, &gamma);
        let d = self.dim;
        let mut dz = Tensor::zeros(&[t.len(), d]);
        let slope = if self.time_input {
            let (lo, hi) = fd_points(t, h);
            let g_lo = self.gamma(x, y, &lo)?;
            let g_hi = self.gamma(x, y, &hi)?;
            Some((lo, hi, g_lo, g_hi))
        } else {
            None
        };
        for (i, &ti) in t.iter().enumerate() {
            let (xr, yr, gr) = (x.row(i), y.row(i), gamma.row(i));
            let out = dz.row_mut(i);
            for k in 0..d {
                out[k] = yr[k] - xr[k] + (1.0 - 2.0 * ti) * gr[k];
            }
            if let Some((lo, hi, g_lo, g_hi)) = &slope {
                let inv = 1.0 / (hi[i] - lo[i]);
                let (a, b) = (g_lo.row(i), g_hi.row(i));
                for k in 0..d {
                    out[k] += ti * (1.0 - ti) * (b[k] - a[k]) * inv;
                }
            }
        }
        Ok((z, dz))
    }

    /// Time derivative only.
    pub fn dt(&self, x: &Tensor, y: &Tensor, t: &[f64], h: f64) -> Result<Tensor> {
        Ok(self.eval_with_dt(x, y, t, h)?.1)
    }

    fn gamma_node(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        x: Node,
        y: Node,
        t: &[f64],
    ) -> Result<Node> {
        let input = if self.time_input {
            let tc = g.constant(Tensor::column(t)?);
            g.concat(&[x, y, tc])?
        } else {
            g.concat(&[x, y])?
        };
        Ok(bound.forward(g, input)?)
    }

    fn check_nodes(&self, g: &Graph, x: Node, y: Node, t: &[f64]) -> Result<()> {
        check_endpoints(g.value(x), g.value(y), t, self.dim)
    }

    fn compose_node(&self, g: &mut Graph, x: Node, y: Node, t: &[f64], gamma: Node) -> Result<Node> {
        let d = self.dim;
        let a = g.constant(row_scalars(t, d, |t| 1.0 - t));
        let b = g.constant(row_scalars(t, d, |t| t));
        let c = g.constant(row_scalars(t, d, |t| t * (1.0 - t)));
        let xa = g.mul(x, a)?;
        let yb = g.mul(y, b)?;
        let gc = g.mul(gamma, c)?;
        let s = g.add(xa, yb)?;
        Ok(g.add(s, gc)?)
    }

    /// `I(x, y, t)` as a graph node, differentiable in the network weights
    /// (through `bound`) and in `x`, `y`.
    pub fn eval_node(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        x: Node,
        y: Node,
        t: &[f64],
    ) -> Result<Node> {
        self.check_nodes(g, x, y, t)?;
        let gamma = self.gamma_node(g, bound, x, y, t)?;
        self.compose_node(g, x, y, t, gamma)
    }

    /// `(I, dI/dt)` as graph nodes sharing the centre evaluation of gamma.
    pub fn eval_with_dt_node(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        x: Node,
        y: Node,
        t: &[f64],
        h: f64,
    ) -> Result<(Node, Node)> {
        check_step(h)?;
        self.check_nodes(g, x, y, t)?;
        let d = self.dim;
        let gamma = self.gamma_node(g, bound, x, y, t)?;
        let z = self.compose_node(g, x, y, t, gamma)?;

        let diff = g.sub(y, x)?;
        let w = g.constant(row_scalars(t, d, |t| 1.0 - 2.0 * t));
        let gw = g.mul(gamma, w)?;
        let mut dz = g.add(diff, gw)?;
        if self.time_input {
            let (lo, hi) = fd_points(t, h);
            let g_lo = self.gamma_node(g, bound, x, y, &lo)?;
            let g_hi = self.gamma_node(g, bound, x, y, &hi)?;
            let delta = g.sub(g_hi, g_lo)?;
            let coef: Vec<f64> = t
                .iter()
                .zip(lo.iter().zip(&hi))
                .map(|(&t, (l, u))| t * (1.0 - t) / (u - l))
                .collect();
            let c = g.constant(row_scalars(&coef, d, |c| c));
            let slope = g.mul(delta, c)?;
            dz = g.add(dz, slope)?;
        }
        Ok((z, dz))
    }
}

/// The path used to build flow-matching targets.
#[derive(Clone, Copy, Debug)]
pub enum Interpolant<'a> {
    Linear,
    Learned(&'a LearnableInterpolant),
}

impl Interpolant<'_> {
    /// Path points and velocities for a batch, graph-free.
    pub fn eval_with_dt(
        &self,
        x: &Tensor,
        y: &Tensor,
        t: &[f64],
        h: f64,
    ) -> Result<(Tensor, Tensor)> {
        match self {
            Interpolant::Learned(li) => li.eval_with_dt(x, y, t, h),
            Interpolant::Linear => {
                check_endpoints(x, y, t, x.cols())?;
                let d = x.cols();
                let mut z = Tensor::zeros(&[t.len(), d]);
                let mut dz = Tensor::zeros(&[t.len(), d]);
                for (i, &ti) in t.iter().enumerate() {
                    let (xr, yr) = (x.row(i), y.row(i));
                    for k in 0..d {
                        z.row_mut(i)[k] = (1.0 - ti) * xr[k] + ti * yr[k];
                        dz.row_mut(i)[k] = yr[k] - xr[k];
                    }
                }
                Ok((z, dz))
            }
        }
    }
}

/// One condition's endpoints and per-sample times.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub t: Vec<f64>,
}

/// Space-time repulsion between the paths of different conditions.
///
/// `paths[q]` holds condition `q`'s interpolated points (a node) and times.
/// Rows are paired elementwise across conditions; the result is
/// `sum_{i<j} mean_n k_time(|t_i - t_j|) k_space(|z_i - z_j|)`.
pub fn repulsion_from_paths(
    g: &mut Graph,
    paths: &[(Node, &[f64])],
    kernel: &KernelParams,
) -> Result<Node> {
    kernel.validate()?;
    if paths.len() < 2 {
        return Err(Error::TooFewConditions {
            needed: 2,
            got: paths.len(),
        });
    }
    let n = paths[0].1.len();
    if paths.iter().any(|(z, t)| t.len() != n || g.value(*z).rows() != n) {
        return Err(invalid("repulsion batches must have equal sizes"));
    }
    let scale = -1.0 / (2.0 * kernel.sigma_space * kernel.sigma_space);
    let mut total: Option<Node> = None;
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            let (zi, ti) = paths[i];
            let (zj, tj) = paths[j];
            let diff = g.sub(zi, zj)?;
            let sq = g.square(diff)?;
            let d2 = g.sum_rows(sq)?;
            let e = g.scale(d2, scale)?;
            let e = g.exp(e)?;
            let k_space = g.max_const(e, kernel.eta)?;
            let k_time: Vec<f64> = ti
                .iter()
                .zip(tj.iter())
                .map(|(a, b)| kernel_gamma((a - b).abs(), kernel.sigma_time, kernel.eta))
                .collect();
            let k_time = g.constant(Tensor::column(&k_time)?);
            let w = g.mul(k_space, k_time)?;
            let m = g.mean(w)?;
            total = Some(match total {
                Some(acc) => g.add(acc, m)?,
                None => m,
            });
        }
    }
    Ok(total.expect("at least one pair"))
}

/// Repulsion objective for a learnable interpolant over per-condition batches.
pub fn repulsion_loss(
    g: &mut Graph,
    interp: &LearnableInterpolant,
    bound: &BoundMlp,
    batches: &[PathBatch],
    kernel: &KernelParams,
) -> Result<Node> {
    if batches.len() < 2 {
        return Err(Error::TooFewConditions {
            needed: 2,
            got: batches.len(),
        });
    }
    let mut zs = Vec::with_capacity(batches.len());
    for b in batches {
        let x = g.constant(b.x.clone());
        let y = g.constant(b.y.clone());
        zs.push(interp.eval_node(g, bound, x, y, &b.t)?);
    }
    let paths: Vec<(Node, &[f64])> = zs
        .iter()
        .zip(batches)
        .map(|(&z, b)| (z, b.t.as_slice()))
        .collect();
    repulsion_from_paths(g, &paths, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    /// A single linear layer whose output is `c * t` in every coordinate,
    /// i.e. gamma is linear in t and ignores x, y.
    fn gamma_linear_in_t(dim: usize, c: f64) -> LearnableInterpolant {
        let mut w = vec![0.0; dim * (2 * dim + 1)];
        for k in 0..dim {
            w[k * (2 * dim + 1) + 2 * dim] = c;
        }
        let net = MlpParams::from_layers(
            vec![Tensor::matrix(dim, 2 * dim + 1, w).unwrap()],
            vec![Tensor::zeros(&[1, dim])],
        )
        .unwrap();
        LearnableInterpolant::from_net(net, dim, true).unwrap()
    }

    fn zeroed(dim: usize) -> LearnableInterpolant {
        let mut li = LearnableInterpolant::new(dim, &[8], 0, true, 1.0).unwrap();
        let n = li.net.param_count();
        li.net.set_flat(&vec![0.0; n]).unwrap();
        li
    }

    #[test]
    fn linear_examples() {
        assert_eq!(linear_interp(&[0.0, 0.0], &[2.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(linear_interp(&[0.3, 1.0], &[2.0, 5.0], 0.0).unwrap(), vec![0.3, 1.0]);
        assert_eq!(linear_interp(&[0.3, 1.0], &[2.0, 5.0], 1.0).unwrap(), vec![2.0, 5.0]);
        assert_eq!(linear_interp_dt(&[0.5, 1.0], &[2.0, -1.0]), vec![1.5, -2.0]);
        assert!(matches!(
            linear_interp(&[0.0], &[1.0], 1.5),
            Err(Error::TimeOutOfRange(_))
        ));
        assert!(linear_interp(&[0.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_gamma(0.0, 0.3, 1e-4), 1.0);
        // exp(-1/2) computed independently.
        let at_sigma = kernel_gamma(0.3, 0.3, 1e-4);
        assert!((at_sigma - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert_eq!(kernel_gamma(1e3, 0.3, 1e-4), 1e-4);
    }

    #[test]
    fn kernel_params_validation() {
        assert!(KernelParams::new(0.1, 1.5, 1e-4).is_ok());
        assert!(KernelParams::new(0.0, 1.5, 1e-4).is_err());
        assert!(KernelParams::new(0.1, 1.5, 1.0).is_err());
    }

    #[test]
    fn boundary_conditions_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let li = LearnableInterpolant::new(3, &[16, 16], seed, true, 1.0).unwrap();
            let x = rand_matrix(50, 3, &mut rng);
            let y = rand_matrix(50, 3, &mut rng);
            assert_eq!(li.eval(&x, &y, &[0.0; 50]).unwrap(), x);
            assert_eq!(li.eval(&x, &y, &[1.0; 50]).unwrap(), y);
        }
    }

    #[test]
    fn zero_residual_is_linear() {
        let li = zeroed(2);
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, -1.0]]).unwrap();
        let y = Tensor::from_rows(&[[2.0, 2.0], [3.0, 0.5]]).unwrap();
        let t = [0.5, 0.25];
        let (z, dz) = li.eval_with_dt(&x, &y, &t, DEFAULT_FD_STEP).unwrap();
        for i in 0..2 {
            assert_eq!(z.row(i), linear_interp(x.row(i), y.row(i), t[i]).unwrap());
            assert_eq!(dz.row(i), linear_interp_dt(x.row(i), y.row(i)));
        }
    }

    #[test]
    fn gamma_linear_in_time_has_exact_derivative() {
        let c = 1.7;
        let li = gamma_linear_in_t(2, c);
        let x = Tensor::from_rows(&[[0.5, -1.0], [2.0, 1.0], [0.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[[1.0, 1.0], [-2.0, 0.5], [3.0, -3.0]]).unwrap();
        // Includes both clipped boundaries.
        let t = [0.3, 0.0, 1.0];
        let dz = li.dt(&x, &y, &t, DEFAULT_FD_STEP).unwrap();
        for i in 0..3 {
            let ti = t[i];
            for k in 0..2 {
                let expected = y.row(i)[k] - x.row(i)[k] + (1.0 - 2.0 * ti) * c * ti + ti * (1.0 - ti) * c;
                assert!((dz.row(i)[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_free_residual_has_no_slope_term() {
        let li = LearnableInterpolant::new(2, &[8], 4, false, 1.0).unwrap();
        let x = Tensor::from_rows(&[[0.5, -1.0]]).unwrap();
        let y = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let gamma = li.gamma(&x, &y, &[0.3]).unwrap();
        let dz = li.dt(&x, &y, &[0.3], 1e-3).unwrap();
        for k in 0..2 {
            let expected = y.row(0)[k] - x.row(0)[k] + 0.4 * gamma.row(0)[k];
            assert!((dz.row(0)[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_matches_finite_difference_of_path() {
        let li = LearnableInterpolant::new(2, &[16, 16], 9, true, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(8, 2, &mut rng);
        let y = rand_matrix(8, 2, &mut rng);
        let t: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..0.9)).collect();
        // Error against a tight reference difference of the path itself.
        let reference = |h: f64| {
            let up: Vec<f64> = t.iter().map(|t| t + h).collect();
            let dn: Vec<f64> = t.iter().map(|t| t - h).collect();
            let zu = li.eval(&x, &y, &up).unwrap();
            let zd = li.eval(&x, &y, &dn).unwrap();
            zu.data()
                .iter()
                .zip(zd.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>()
        };
        let exact = reference(1e-5);
        let err = |h: f64| -> Vec<f64> {
            let dz = li.dt(&x, &y, &t, h).unwrap();
            dz.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1.iter().all(|&e| e < 1e-2));
        // SeLU has a curvature jump at 0, so a path crossing it only gets
        // first-order accuracy; the bulk of entries must show second order.
        let mut ratios: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a / b.max(1e-300)).collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!(median > 3.0, "median ratio {median}");
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let li = LearnableInterpolant::new(2, &[16], 3, true, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(6, 2, &mut rng);
        let y = rand_matrix(6, 2, &mut rng);
        let t = [0.0, 0.1, 0.5, 0.7, 0.9995, 1.0];
        let (z, dz) = li.eval_with_dt(&x, &y, &t, 1e-3).unwrap();
        let mut g = Graph::new();
        let bound = li.net().bind(&mut g);
        let xn = g.constant(x);
        let yn = g.constant(y);
        let (zn, dzn) = li.eval_with_dt_node(&mut g, &bound, xn, yn, &t, 1e-3).unwrap();
        for (a, b) in g.value(zn).data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(dzn).data().iter().zip(dz.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_step_and_dims() {
        let li = LearnableInterpolant::new(2, &[4], 0, true, 1.0).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(li.dt(&x, &x, &[0.5], 0.0).is_err());
        assert!(li.eval(&Tensor::zeros(&[1, 3]), &x, &[0.5]).is_err());
        assert!(li.eval(&x, &x, &[1.5]).is_err());
    }

    fn batch(x: &[[f64; 2]], y: &[[f64; 2]], t: &[f64]) -> PathBatch {
        PathBatch {
            x: Tensor::from_rows(x).unwrap(),
            y: Tensor::from_rows(y).unwrap(),
            t: t.to_vec(),
        }
    }

    fn repulsion_value(li: &LearnableInterpolant, batches: &[PathBatch], k: &KernelParams) -> f64 {
        let mut g = Graph::new();
        let bound = li.net().bind(&mut g);
        let r = repulsion_loss(&mut g, li, &bound, batches, k).unwrap();
        g.value(r).item()
    }

    #[test]
    fn repulsion_examples() {
        let li = zeroed(2);
        let k = KernelParams::new(0.5, 0.2, 1e-4).unwrap();
        // Identical endpoints and times: both kernels at zero distance.
        let b = batch(&[[1.0, 2.0]], &[[3.0, 1.0]], &[0.4]);
        assert_eq!(repulsion_value(&li, &[b.clone(), b.clone()], &k), 1.0);
        // Far apart everywhere: floor of the space kernel.
        let a = batch(&[[0.0, 0.0]], &[[1.0, 0.0]], &[0.4]);
        let far = batch(&[[0.0, 100.0]], &[[1.0, 100.0]], &[0.4]);
        assert!((repulsion_value(&li, &[a.clone(), far.clone()], &k) - 1e-4).abs() < 1e-15);
        // Three conditions contribute three pairs.
        assert_eq!(repulsion_value(&li, &[b.clone(), b.clone(), b.clone()], &k), 3.0);
        // Swapping condition order leaves the value unchanged.
        let c = batch(&[[0.2, 0.1]], &[[0.5, 0.3]], &[0.6]);
        let v1 = repulsion_value(&li, &[a.clone(), c.clone()], &k);
        let v2 = repulsion_value(&li, &[c, a.clone()], &k);
        assert_eq!(v1, v2);
        assert!(matches!(
            {
                let mut g = Graph::new();
                let bound = li.net().bind(&mut g);
                repulsion_loss(&mut g, &li, &bound, &[a], &k)
            },
            Err(Error::TooFewConditions { .. })
        ));
    }

    #[test]
    fn repulsion_far_field_has_no_gradient() {
        let li = LearnableInterpolant::new(2, &[8], 1, true, 0.01).unwrap();
        let k = KernelParams::new(0.1, 0.5, 1e-4).unwrap();
        let a = batch(&[[0.0, 0.0]], &[[1.0, 0.0]], &[0.4]);
        let far = batch(&[[0.0, 100.0]], &[[1.0, 100.0]], &[0.4]);
        let mut g = Graph::new();
        let bound = li.net().bind(&mut g);
        let r = repulsion_loss(&mut g, &li, &bound, &[a, far], &k).unwrap();
        let grads = g.backward(r).unwrap();
        for t in bound.grads(&grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn repulsion_gradient_matches_finite_differences() {
        let li = LearnableInterpolant::new(2, &[6], 2, true, 1.0).unwrap();
        let k = KernelParams::new(1.5, 0.5, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| PathBatch {
            x: rand_matrix(5, 2, rng),
            y: rand_matrix(5, 2, rng),
            t: (0..5).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let batches = vec![mk(&mut rng), mk(&mut rng)];
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut li = li.clone();
            li.net_mut().set_flat(p)?;
            let mut g = Graph::new();
            let bound = li.net().bind(&mut g);
            let r = repulsion_loss(&mut g, &li, &bound, &batches, &k)?;
            let grads = g.backward(r)?;
            let flat = bound.grads(&grads).into_iter().flat_map(Tensor::into_data).collect();
            Ok((g.value(r).item(), flat))
        };
        let err = finite_diff_check(f, &li.net().flat(), 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
