//! Evaluation: EMD, translation error, wrong-cluster rate and surface
//! adherence, plus the closed-form midpoint field of straight-line
//! conditional flow matching.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::coupling::{euclidean_cost, hungarian, ConditionalDataset};
use crate::data::EvalSplit;
use crate::error::{invalid, Error, Result};
use crate::flow::{integrate_batch, split_trajectories, OdeMethod, VectorField};
use crate::rng::derive_seed;
use crate::surface::{surface_adherence, PointCloud};

/// `n` rows of `m` chosen without replacement (all rows, in order, when
/// `m` has at most `n`).
pub fn subsample(m: &Tensor, n: usize, seed: u64) -> Tensor {
    if m.rows() <= n {
        return m.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, m.rows(), n).into_vec();
    idx.sort_unstable();
    m.select_rows(&idx)
}

/// Minimum over bijections of the mean Euclidean distance between paired
/// rows. The larger set is subsampled to the size of the smaller.
pub fn emd(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(invalid("EMD needs two non-empty point sets"));
    }
    let n = a.rows().min(b.rows());
    let a = subsample(a, n, seed);
    let b = subsample(b, n, seed);
    let cost = euclidean_cost(&a, &b)?;
    let perm = hungarian(&cost)?;
    // Summing in sorted order keeps emd(a, b) and emd(b, a) bit-identical.
    let mut matched: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| cost.data()[i * n + j]).collect();
    matched.sort_by(f64::total_cmp);
    Ok(matched.iter().sum::<f64>() / n as f64)
}

/// `(1/N) sum_n ||yhat_n - y_n||`.
pub fn translation_error(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    if yhat.shape() != y.shape() {
        return Err(invalid(format!(
            "translation error needs equal shapes, got {:?} and {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    let total: f64 = yhat
        .rows_iter()
        .zip(y.rows_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / y.rows() as f64)
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (q, c) in centers.iter().enumerate() {
        let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, q);
        }
    }
    best.1
}

/// Fraction of translated points whose nearest target centre belongs to a
/// condition other than their own. `translated[q]` holds condition `q`'s
/// translations.
pub fn cross_cluster_rate(translated: &[Tensor], centers: &[Vec<f64>]) -> Result<f64> {
    if translated.len() != centers.len() {
        return Err(invalid(format!(
            "{} translated sets for {} centres",
            translated.len(),
            centers.len()
        )));
    }
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (q, m) in translated.iter().enumerate() {
        for r in m.rows_iter() {
            if nearest_center(r, centers) != q {
                wrong += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("no translated points"));
    }
    Ok(wrong as f64 / total as f64)
}

/// `2 (z - mean)`: the midpoint velocity of straight-line conditional flow
/// matching predicted from the source mean.
pub fn reflection_velocity_oracle(mean: &[f64], z: &[f64]) -> Vec<f64> {
    z.iter().zip(mean).map(|(z, m)| 2.0 * (z - m)).collect()
}

/// Mean over points of `||a - b|| / ||b||`.
pub fn mean_relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(invalid("relative error needs equal non-empty shapes"));
    }
    let mut total = 0.0;
    for (p, q) in a.rows_iter().zip(b.rows_iter()) {
        let num: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = q.iter().map(|y| y * y).sum::<f64>().sqrt();
        total += num / den.max(1e-12);
    }
    Ok(total / a.rows() as f64)
}

/// How to run an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub steps: usize,
    pub method: OdeMethod,
    /// Samples per condition.
    pub size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            method: OdeMethod::Euler,
            size: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// EMD between translated sources and targets, per condition.
    pub emd: Vec<f64>,
    pub emd_mean: f64,
    /// Translation error on the paired split, when one is given.
    pub te: Option<f64>,
    pub cross_cluster_rate: Option<f64>,
    /// Surface adherence, when a surface is given.
    pub sa: Option<f64>,
    /// Evaluated sources per condition.
    pub samples: Vec<usize>,
    pub options: EvalOptions,
    /// Caller-supplied description of the run.
    pub config: serde_json::Value,
}

/// Inputs besides the field itself.
pub struct EvalInputs<'a> {
    pub dataset: &'a ConditionalDataset,
    pub eval: Option<&'a EvalSplit>,
    pub target_centers: Option<&'a [Vec<f64>]>,
    pub surface: Option<&'a PointCloud>,
}

/// Translates each condition's sources (the paired split when present,
/// otherwise training sources) and scores the result.
pub fn evaluate<F: VectorField + ?Sized>(
    field: &F,
    inputs: &EvalInputs<'_>,
    options: &EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let ds = inputs.dataset;
    if field.dim() != ds.dim() {
        return Err(Error::DimMismatch {
            context: "evaluated field".into(),
            expected: ds.dim(),
            got: field.dim(),
        });
    }
    if let Some(e) = inputs.eval {
        if e.num_conditions() != ds.num_conditions() || e.dim() != ds.dim() {
            return Err(invalid("evaluation split does not match the dataset"));
        }
    }
    let mut emds = Vec::new();
    let mut translated = Vec::new();
    let mut truths = Vec::new();
    let mut samples = Vec::new();
    let mut trajectories = Vec::new();
    for q in 0..ds.num_conditions() {
        let tag = |s: &str| derive_seed(options.seed, &format!("{s}-{q}"));
        let (x, y_true) = match inputs.eval {
            Some(e) => {
                let n = e.x[q].rows().min(options.size);
                let s = tag("eval");
                (subsample(&e.x[q], n, s), Some(subsample(&e.y[q], n, s)))
            }
            None => (subsample(ds.source(q), options.size, tag("source")), None),
        };
        let states = integrate_batch(field, &x, options.steps, options.method)?;
        let yhat = states.last().expect("at least one state").clone();
        if inputs.surface.is_some() {
            trajectories.extend(split_trajectories(&states));
        }
        let targets = subsample(ds.target(q), options.size, tag("target"));
        emds.push(emd(&yhat, &targets, tag("emd"))?);
        samples.push(x.rows());
        translated.push(yhat);
        truths.push(y_true);
    }
    let te = match inputs.eval {
        Some(_) => {
            let yhat = Tensor::vcat(&translated.iter().collect::<Vec<_>>())?;
            let truth: Vec<&Tensor> = truths.iter().map(|t| t.as_ref().expect("paired")).collect();
            Some(translation_error(&yhat, &Tensor::vcat(&truth)?)?)
        }
        None => None,
    };
    let cross = inputs
        .target_centers
        .map(|c| cross_cluster_rate(&translated, c))
        .transpose()?;
    let sa = inputs
        .surface
        .map(|cloud| surface_adherence(&trajectories, cloud))
        .transpose()?;
    let emd_mean = emds.iter().sum::<f64>() / emds.len() as f64;
    Ok(EvalReport {
        emd: emds,
        emd_mean,
        te,
        cross_cluster_rate: cross,
        sa,
        samples,
        options: options.clone(),
        config,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "emd_mean,te,cross_cluster_rate,sa";

    /// One CSV row matching [`EvalReport::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.emd_mean,
            opt(self.te),
            opt(self.cross_cluster_rate),
            opt(self.sa)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn emd_examples() {
        let a = m(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(emd(&a, &a, 0).unwrap(), 0.0);
        assert_eq!(emd(&m(&[&[0.0, 0.0]]), &m(&[&[3.0, 4.0]]), 0).unwrap(), 5.0);
        let shuffled = m(&[&[3.0, -1.0], &[0.0, 0.0], &[1.0, 2.0]]);
        assert_eq!(emd(&a, &shuffled, 0).unwrap(), 0.0);
        assert!(emd(&Tensor::zeros(&[0, 2]), &a, 0).is_err());
    }

    #[test]
    fn emd_subsamples_larger_set() {
        let big = Tensor::matrix(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let small = m(&[&[100.0], &[100.0]]);
        let v = emd(&big, &small, 1).unwrap();
        assert_eq!(v, emd(&big, &small, 1).unwrap());
        assert!(v > 90.0 && v <= 100.0);
    }

    #[test]
    fn translation_error_examples() {
        let y = m(&[&[1.0, 1.0], &[-2.0, 0.0]]);
        assert_eq!(translation_error(&y, &y).unwrap(), 0.0);
        let shifted = m(&[&[2.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(translation_error(&shifted, &y).unwrap(), 1.0);
        assert!(translation_error(&m(&[&[1.0, 1.0]]), &y).is_err());
    }

    #[test]
    fn cross_cluster_examples() {
        let centers = vec![vec![-1.0, -1.0], vec![-1.0, 1.0]];
        let good = vec![m(&[&[-1.1, -0.9]]), m(&[&[-0.8, 1.2], &[-1.0, 0.5]])];
        assert_eq!(cross_cluster_rate(&good, &centers).unwrap(), 0.0);
        let swapped = vec![good[1].clone(), good[0].clone()];
        assert_eq!(cross_cluster_rate(&swapped, &centers).unwrap(), 1.0);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(reflection_velocity_oracle(&[1.0, 0.0], &[0.0, 0.0]), vec![-2.0, 0.0]);
        assert_eq!(reflection_velocity_oracle(&[1.0, 0.0], &[1.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(reflection_velocity_oracle(&[1.0, 0.0], &[2.0, 0.0]), vec![2.0, 0.0]);
    }
}
