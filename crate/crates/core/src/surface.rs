//! Point-cloud surfaces: horizontal nearest neighbours, the LAND metric, the
//! surface-following path penalty and the adherence score of trajectories.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, CustomOp, Graph, Node, Tensor};
use crate::coupling::ConditionalDataset;
use crate::error::{invalid, Error, Result};
use crate::interpolant::{LearnableInterpolant, PathBatch};
use crate::nn::BoundMlp;

/// Kernel weights beyond this many bandwidths are dropped.
const LAND_CUTOFF: f64 = 6.0;

#[derive(Debug)]
struct Grid {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    /// Point indices per cell, ascending within each cell.
    buckets: Vec<Vec<u32>>,
}

impl Grid {
    fn build(points: &[[f64; 3]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        // About two points per cell on average.
        let side = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let cell = if span > 0.0 { span / side as f64 } else { 1.0 };
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1);
        let mut grid = Self {
            origin: lo,
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = grid.cell_of(p[0], p[1]);
            grid.buckets[cy * nx + cx].push(i as u32);
        }
        grid
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let f = |v: f64, o: f64, n: usize| (((v - o) / self.cell).floor().max(0.0) as usize).min(n - 1);
        (f(x, self.origin[0], self.nx), f(y, self.origin[1], self.ny))
    }

    /// Cells at Chebyshev distance exactly `r` from `(cx, cy)`.
    fn ring(&self, cx: usize, cy: usize, r: usize, mut visit: impl FnMut(usize)) {
        let (cx, cy, r) = (cx as isize, cy as isize, r as isize);
        for dy in -r..=r {
            let y = cy + dy;
            if y < 0 || y >= self.ny as isize {
                continue;
            }
            let step = if dy.abs() == r { 1 } else { (2 * r).max(1) };
            let mut dx = -r;
            while dx <= r {
                let x = cx + dx;
                if x >= 0 && x < self.nx as isize {
                    visit(y as usize * self.nx + x as usize);
                }
                dx += step;
            }
        }
    }
}

#[derive(Debug)]
struct Inner {
    points: Vec<[f64; 3]>,
    grid: Grid,
}

/// Surface samples `(x, y, height)` with a horizontal grid index.
/// Cloning is cheap.
#[derive(Clone, Debug)]
pub struct PointCloud(Arc<Inner>);

impl PartialEq for PointCloud {
    fn eq(&self, other: &Self) -> bool {
        self.0.points == other.0.points
    }
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud is empty"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("point cloud entry {i}")));
        }
        let grid = Grid::build(&points);
        Ok(Self(Arc::new(Inner { points, grid })))
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.0.points
    }

    pub fn len(&self) -> usize {
        self.0.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the point closest to `(x, y)` horizontally; ties go to the
    /// lowest index.
    pub fn nearest_xy_index(&self, x: f64, y: f64) -> usize {
        let Inner { points, grid } = &*self.0;
        // Distances from the query to a cell are bounded below by distances
        // from its projection onto the grid box.
        let px = x.clamp(grid.origin[0], grid.origin[0] + grid.nx as f64 * grid.cell);
        let py = y.clamp(grid.origin[1], grid.origin[1] + grid.ny as f64 * grid.cell);
        let (cx, cy) = grid.cell_of(px, py);
        let max_r = grid.nx.max(grid.ny);
        let mut best = (f64::INFINITY, usize::MAX);
        for r in 0..=max_r {
            if r >= 1 {
                let bound = (r - 1) as f64 * grid.cell;
                if bound * bound > best.0 {
                    break;
                }
            }
            grid.ring(cx, cy, r, |b| {
                for &i in &grid.buckets[b] {
                    let p = &points[i as usize];
                    let d = (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y);
                    if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                        best = (d, i as usize);
                    }
                }
            });
        }
        best.1
    }

    /// Visits every point whose horizontal distance to `(x, y)` is at most
    /// `radius`.
    fn for_each_within(&self, x: f64, y: f64, radius: f64, mut visit: impl FnMut(&[f64; 3])) {
        let Inner { points, grid } = &*self.0;
        let lo = grid.cell_of(x - radius, y - radius);
        let hi = grid.cell_of(x + radius, y + radius);
        let r2 = radius * radius;
        for cy in lo.1..=hi.1 {
            for cx in lo.0..=hi.0 {
                for &i in &grid.buckets[cy * grid.nx + cx] {
                    let p = &points[i as usize];
                    if (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y) <= r2 {
                        visit(p);
                    }
                }
            }
        }
    }

    /// Shifted copy; used to check horizontal translation invariance.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.points().iter().map(|p| [p[0] + dx, p[1] + dy, p[2]]).collect())
    }
}

/// Horizontal nearest neighbour by the grid index.
pub fn nearest_neighbor_xy(query: &[f64], cloud: &PointCloud) -> Result<[f64; 3]> {
    if query.len() < 2 {
        return Err(invalid("query needs at least two coordinates"));
    }
    Ok(cloud.points()[cloud.nearest_xy_index(query[0], query[1])])
}

/// Linear-scan reference for [`nearest_neighbor_xy`].
pub fn nearest_neighbor_xy_scan(query: &[f64], points: &[[f64; 3]]) -> Result<[f64; 3]> {
    let mut best = (f64::INFINITY, None);
    for p in points {
        let d = (p[0] - query[0]) * (p[0] - query[0]) + (p[1] - query[1]) * (p[1] - query[1]);
        if d < best.0 {
            best = (d, Some(*p));
        }
    }
    best.1.ok_or_else(|| invalid("point cloud is empty"))
}

/// Bandwidth and regulariser of the LAND metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandParams {
    pub sigma: f64,
    pub eps: f64,
}

impl Default for LandParams {
    fn default() -> Self {
        Self {
            sigma: 0.125,
            eps: 1e-2,
        }
    }
}

impl LandParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.eps > 0.0 && self.sigma.is_finite() && self.eps.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("LAND parameters must be positive, got {self:?}")))
        }
    }
}

/// Kernel-weighted residual sums `S_d` and, optionally, their Jacobian
/// `dS_d / dz_k` (row-major 3x3).
fn land_sums(z: &[f64], cloud: &PointCloud, p: &LandParams, jac: Option<&mut [f64; 9]>) -> [f64; 3] {
    let inv2s2 = 1.0 / (2.0 * p.sigma * p.sigma);
    let inv_s2 = 1.0 / (p.sigma * p.sigma);
    let mut s = [p.eps; 3];
    let mut j = [0.0; 9];
    let want_jac = jac.is_some();
    cloud.for_each_within(z[0], z[1], LAND_CUTOFF * p.sigma, |m| {
        let r = [z[0] - m[0], z[1] - m[1], z[2] - m[2]];
        let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        let w = (-d2 * inv2s2).exp();
        for d in 0..3 {
            s[d] += w * r[d] * r[d];
        }
        if want_jac {
            for d in 0..3 {
                for k in 0..3 {
                    let mut v = -w * r[k] * inv_s2 * r[d] * r[d];
                    if d == k {
                        v += 2.0 * w * r[d];
                    }
                    j[d * 3 + k] += v;
                }
            }
        }
    });
    if let Some(out) = jac {
        *out = j;
    }
    s
}

/// Diagonal of the LAND metric at `z`.
pub fn land_metric(z: &[f64], cloud: &PointCloud, params: &LandParams) -> Result<[f64; 3]> {
    params.validate()?;
    if z.len() != 3 {
        return Err(Error::DimMismatch {
            context: "LAND metric query".into(),
            expected: 3,
            got: z.len(),
        });
    }
    let s = land_sums(z, cloud, params, None);
    Ok([1.0 / s[0], 1.0 / s[1], 1.0 / s[2]])
}

/// `mean_n dz_n^T G(z_n) dz_n` over rows of `(z, dz)`.
struct LandQuadratic {
    cloud: PointCloud,
    params: LandParams,
}

impl CustomOp for LandQuadratic {
    fn name(&self) -> &str {
        "land-quadratic-form"
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, AutodiffError> {
        let (z, dz) = (inputs[0], inputs[1]);
        let mut total = 0.0;
        for (zr, vr) in z.rows_iter().zip(dz.rows_iter()) {
            let s = land_sums(zr, &self.cloud, &self.params, None);
            total += (0..3).map(|d| vr[d] * vr[d] / s[d]).sum::<f64>();
        }
        Ok(Tensor::scalar(total / z.rows() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (z, dz) = (inputs[0], inputs[1]);
        let scale = grad_out.item() / z.rows() as f64;
        let mut gz = Tensor::zeros(z.shape());
        let mut gv = Tensor::zeros(dz.shape());
        let mut jac = [0.0; 9];
        for i in 0..z.rows() {
            let (zr, vr) = (z.row(i), dz.row(i));
            let s = land_sums(zr, &self.cloud, &self.params, Some(&mut jac));
            let gvr = gv.row_mut(i);
            for d in 0..3 {
                gvr[d] = scale * 2.0 * vr[d] / s[d];
            }
            let gzr = gz.row_mut(i);
            for k in 0..3 {
                gzr[k] = -scale * (0..3).map(|d| vr[d] * vr[d] / (s[d] * s[d]) * jac[d * 3 + k]).sum::<f64>();
            }
        }
        vec![gz, gv]
    }
}

/// LAND quadratic form of path velocities `dz` at path points `z` (both
/// `n x 3` nodes), averaged over rows.
pub fn land_quadratic(g: &mut Graph, z: Node, dz: Node, cloud: &PointCloud, params: &LandParams) -> Result<Node> {
    params.validate()?;
    for n in [z, dz] {
        if g.value(n).shape().len() != 2 || g.value(n).cols() != 3 {
            return Err(Error::DimMismatch {
                context: "surface penalty states".into(),
                expected: 3,
                got: g.value(n).cols(),
            });
        }
    }
    if g.value(z).rows() != g.value(dz).rows() {
        return Err(invalid("path points and velocities differ in row count"));
    }
    Ok(g.custom(
        &[z, dz],
        Box::new(LandQuadratic {
            cloud: cloud.clone(),
            params: *params,
        }),
    )?)
}

/// Surface-following penalty of a learnable interpolant: the LAND quadratic
/// form of path velocities, averaged over all conditions' batches.
pub fn mfm_loss(
    g: &mut Graph,
    interp: &LearnableInterpolant,
    bound: &BoundMlp,
    batches: &[PathBatch],
    cloud: &PointCloud,
    params: &LandParams,
    fd_step: f64,
) -> Result<Node> {
    if interp.dim() != 3 {
        return Err(Error::DimMismatch {
            context: "surface penalty interpolant".into(),
            expected: 3,
            got: interp.dim(),
        });
    }
    if batches.is_empty() {
        return Err(invalid("surface penalty needs at least one batch"));
    }
    let mut total: Option<Node> = None;
    for b in batches {
        let x = g.constant(b.x.clone());
        let y = g.constant(b.y.clone());
        let (z, dz) = interp.eval_with_dt_node(g, bound, x, y, &b.t, fd_step)?;
        let q = land_quadratic(g, z, dz, cloud, params)?;
        total = Some(match total {
            Some(acc) => g.add(acc, q)?,
            None => q,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / batches.len() as f64)?)
}

/// Mean over trajectories of the summed absolute height deviation from the
/// horizontally nearest cloud point. Each trajectory is a list of states;
/// the initial state is excluded from the sum.
pub fn surface_adherence(trajectories: &[Vec<Vec<f64>>], cloud: &PointCloud) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(invalid("no trajectories"));
    }
    let mut total = 0.0;
    for (n, traj) in trajectories.iter().enumerate() {
        if traj.len() < 2 {
            return Err(invalid(format!("trajectory {n} has no steps")));
        }
        for s in &traj[1..] {
            if s.len() != 3 {
                return Err(Error::DimMismatch {
                    context: format!("trajectory {n} state"),
                    expected: 3,
                    got: s.len(),
                });
            }
            let nn = nearest_neighbor_xy(s, cloud)?;
            total += (s[2] - nn[2]).abs();
        }
    }
    Ok(total / trajectories.len() as f64)
}

/// Heightfield `height * exp(-(x^2 + y^2) / (2 width^2))` sampled on a
/// square grid of the given half-extent and spacing.
pub fn bump_surface(half_extent: f64, spacing: f64, height: f64, width: f64) -> Result<PointCloud> {
    if !(half_extent > 0.0 && spacing > 0.0 && width > 0.0) {
        return Err(invalid("bump surface extent, spacing and width must be positive"));
    }
    let n = (2.0 * half_extent / spacing).round() as usize + 1;
    let mut pts = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let x = -half_extent + ix as f64 * spacing;
            let y = -half_extent + iy as f64 * spacing;
            pts.push([x, y, height * (-(x * x + y * y) / (2.0 * width * width)).exp()]);
        }
    }
    PointCloud::new(pts)
}

/// The default synthetic test surface.
pub fn default_bump() -> PointCloud {
    bump_surface(1.2, 0.05, 0.8, 0.35).expect("valid bump parameters")
}

/// Gaussian swarms per condition with heights snapped onto the surface.
pub struct SwarmSpec {
    pub sources: Vec<[f64; 2]>,
    pub destinations: Vec<[f64; 2]>,
    pub source_var: f64,
    pub dest_var: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SwarmSpec {
    /// Two swarms crossing the bump diagonally.
    pub fn crossing(seed: u64) -> Self {
        Self {
            sources: vec![[-0.7, 0.7], [0.7, 0.7]],
            destinations: vec![[0.7, -0.7], [-0.7, -0.7]],
            source_var: 0.02,
            dest_var: 0.03,
            samples: 4000,
            seed,
        }
    }
}

fn swarm_samples(center: [f64; 2], var: f64, n: usize, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let sd = var.sqrt();
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let x = center[0] + sd * Distribution::<f64>::sample(&StandardNormal, rng);
        let y = center[1] + sd * Distribution::<f64>::sample(&StandardNormal, rng);
        let h = cloud.points()[cloud.nearest_xy_index(x, y)][2];
        data.extend_from_slice(&[x, y, h]);
    }
    Ok(Tensor::matrix(n, 3, data)?)
}

pub fn swarm_scenario(cloud: &PointCloud, spec: &SwarmSpec) -> Result<ConditionalDataset> {
    if spec.sources.len() != spec.destinations.len() {
        return Err(invalid("each swarm needs one source and one destination"));
    }
    if !(spec.source_var >= 0.0 && spec.dest_var >= 0.0) || spec.samples == 0 {
        return Err(invalid("swarm variances must be non-negative and sample count positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for (s, d) in spec.sources.iter().zip(&spec.destinations) {
        sources.push(swarm_samples(*s, spec.source_var, spec.samples, cloud, &mut rng)?);
        targets.push(swarm_samples(*d, spec.dest_var, spec.samples, cloud, &mut rng)?);
    }
    ConditionalDataset::new(sources, targets)
}

/// Parses `x y z` rows separated by whitespace or commas; `#` starts a
/// comment line.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if vals.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 values, found {}", vals.len()),
            });
        }
        let mut p = [0.0; 3];
        for (k, v) in vals.iter().enumerate() {
            p[k] = v.parse().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{v:?}: {e}"),
            })?;
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// One `x y z` row per point; [`parse_xyz`] reads it back exactly.
pub fn write_xyz<W: std::io::Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.0..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_neighbor_examples() {
        let c = PointCloud::new(vec![[0.0, 0.0, 5.0], [10.0, 0.0, 1.0]]).unwrap();
        assert_eq!(nearest_neighbor_xy(&[1.0, 0.0, 99.0], &c).unwrap(), [0.0, 0.0, 5.0]);
        assert_eq!(nearest_neighbor_xy(&[10.0, 0.0, 1.0], &c).unwrap(), [10.0, 0.0, 1.0]);
        // Equidistant: lowest index wins.
        assert_eq!(nearest_neighbor_xy(&[5.0, 3.0], &c).unwrap(), [0.0, 0.0, 5.0]);
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn grid_matches_scan() {
        let c = random_cloud(1000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let q = [rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0)];
            assert_eq!(
                nearest_neighbor_xy(&q, &c).unwrap(),
                nearest_neighbor_xy_scan(&q, c.points()).unwrap()
            );
        }
    }

    #[test]
    fn duplicate_points_resolve_to_first() {
        let c = PointCloud::new(vec![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(c.nearest_xy_index(0.1, 0.0), 1);
    }

    #[test]
    fn land_metric_examples() {
        let p = LandParams::default();
        let single = PointCloud::new(vec![[0.3, -0.2, 1.0]]).unwrap();
        let g = land_metric(&[0.3, -0.2, 1.0], &single, &p).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0 / p.eps).abs() < 1e-9));
        let far = land_metric(&[10.0, 0.0, 0.0], &single, &p).unwrap();
        assert!(far.iter().all(|&v| (v - 1.0 / p.eps).abs() < 1e-6));
        let c = random_cloud(300, 4);
        let z = [0.2, 0.1, 0.3];
        let mirrored = PointCloud::new(c.points().iter().map(|m| [-m[0], m[1], m[2]]).collect()).unwrap();
        let a = land_metric(&z, &c, &p).unwrap();
        let b = land_metric(&[-0.2, 0.1, 0.3], &mirrored, &p).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-12 * a[k]);
            assert!(a[k] > 0.0);
        }
    }

    fn quad_value(z: &Tensor, dz: &Tensor, c: &PointCloud, p: &LandParams) -> f64 {
        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let vn = g.constant(dz.clone());
        let q = land_quadratic(&mut g, zn, vn, c, p).unwrap();
        g.value(q).item()
    }

    #[test]
    fn quadratic_form_examples() {
        let c = random_cloud(200, 5);
        let p = LandParams::default();
        let z = Tensor::from_rows(&[[0.0, 0.0, 0.2], [0.5, 0.3, 0.1]]).unwrap();
        let v = Tensor::from_rows(&[[1.0, -0.5, 0.2], [0.3, 0.3, -1.0]]).unwrap();
        assert_eq!(quad_value(&z, &Tensor::zeros(&[2, 3]), &c, &p), 0.0);
        let base = quad_value(&z, &v, &c, &p);
        let mut v2 = v.clone();
        v2.data_mut().iter_mut().for_each(|x| *x *= 2.0);
        assert!((quad_value(&z, &v2, &c, &p) - 4.0 * base).abs() < 1e-9 * base);
        // A huge regulariser swamps the data term: G ~ I / eps.
        let big = LandParams { sigma: 0.125, eps: 1e12 };
        let euclid = v.data().iter().map(|x| x * x).sum::<f64>() / 2.0;
        assert!((quad_value(&z, &v, &c, &big) * 1e12 - euclid).abs() < 1e-6 * euclid);
    }

    #[test]
    fn quadratic_form_gradient() {
        let c = random_cloud(400, 6);
        let p = LandParams { sigma: 0.3, eps: 1e-2 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let point: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
        let f = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let z = g.param(Tensor::matrix(2, 3, w[..6].to_vec())?);
            let v = g.param(Tensor::matrix(2, 3, w[6..].to_vec())?);
            let q = land_quadratic(&mut g, z, v, &c, &p)?;
            let grads = g.backward(q)?;
            let mut flat = grads.get(z).into_data();
            flat.extend(grads.get(v).into_data());
            Ok((g.value(q).item(), flat))
        };
        let err = finite_diff_check(f, &point, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adherence_examples() {
        let flat = bump_surface(1.0, 0.1, 0.0, 1.0).unwrap();
        let t = 5;
        let traj: Vec<Vec<f64>> = (0..=t).map(|k| vec![-0.5 + 0.1 * k as f64, 0.2, 1.0]).collect();
        assert!((surface_adherence(&[traj.clone(), traj], &flat).unwrap() - t as f64).abs() < 1e-12);
        let c = PointCloud::new(vec![[0.0, 0.0, 2.0], [1.0, 0.0, 3.0]]).unwrap();
        let on = vec![vec![0.0, 0.0, 2.0], vec![1.0, 0.0, 3.0]];
        assert_eq!(surface_adherence(&[on], &c).unwrap(), 0.0);
        let one = vec![vec![0.0, 0.0, 0.0], vec![0.9, 0.1, 1.0]];
        assert_eq!(surface_adherence(&[one], &c).unwrap(), 2.0);
        assert!(surface_adherence(&[vec![vec![0.0, 0.0, 0.0]]], &c).is_err());
        assert!(surface_adherence(&[], &c).is_err());
    }

    #[test]
    fn swarm_zero_variance_sits_on_centers() {
        let cloud = default_bump();
        let spec = SwarmSpec {
            source_var: 0.0,
            dest_var: 0.0,
            samples: 10,
            ..SwarmSpec::crossing(0)
        };
        let ds = swarm_scenario(&cloud, &spec).unwrap();
        let h = nearest_neighbor_xy(&[-0.7, 0.7], &cloud).unwrap()[2];
        assert!(ds.source(0).rows_iter().all(|r| r == [-0.7, 0.7, h]));
        assert_eq!(SwarmSpec::crossing(0).samples, 4000);
    }

    #[test]
    fn xyz_parsing() {
        let c = parse_xyz("# header\n0 0 1\n1.5,2,3\n\n  -1\t2 0.5\n").unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 1.0], [1.5, 2.0, 3.0], [-1.0, 2.0, 0.5]]);
        assert!(matches!(parse_xyz("0 0 1\n1 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("0 0 x\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn xyz_round_trip() {
        let c = random_cloud(30, 2);
        let mut buf = Vec::new();
        write_xyz(&c, &mut buf).unwrap();
        let back = parse_xyz(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.points(), c.points());
    }
}
