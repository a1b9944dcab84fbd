//! Synthetic presets, the ground-truth map and dataset files.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::coupling::ConditionalDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::derive_seed;
use crate::surface::{default_bump, swarm_scenario, PointCloud, SwarmSpec};

/// Distance scale of the blob presets: condition means sit at
/// `BLOB_SCALE * (1, +-1[, 0])` with unit variance.
pub const BLOB_SCALE: f64 = 5.0;
/// Training samples per condition and domain for the blob presets.
pub const BLOB_SAMPLES: usize = 2000;
/// Paired evaluation samples per condition.
pub const EVAL_SAMPLES: usize = 500;

/// Isotropic Gaussian blobs, one per condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub variance: f64,
    pub samples: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Two blobs at `scale * (1, 1, 0, ..)` and `scale * (1, -1, 0, ..)`.
    pub fn antipodal(dim: usize, scale: f64, samples: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(invalid(format!("antipodal blobs need dimension >= 2, got {dim}")));
        }
        let mean = |s: f64| {
            let mut m = vec![0.0; dim];
            m[0] = scale;
            m[1] = s * scale;
            m
        };
        Ok(Self {
            dim,
            means: vec![mean(1.0), mean(-1.0)],
            variance: 1.0,
            samples,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.samples == 0 || self.means.is_empty() {
            return Err(invalid("blob spec needs a positive dimension, sample count and at least one mean"));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(invalid(format!("blob variance must be positive, got {}", self.variance)));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != self.dim) {
            return Err(Error::DimMismatch {
                context: "blob mean".into(),
                expected: self.dim,
                got: m.len(),
            });
        }
        Ok(())
    }

    /// Mean of the condition means, i.e. of the equally weighted mixture.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let q = self.means.len() as f64;
        (0..self.dim)
            .map(|k| self.means.iter().map(|m| m[k]).sum::<f64>() / q)
            .collect()
    }
}

/// Samples for every condition of `spec`.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sd = spec.variance.sqrt();
    spec.means
        .iter()
        .map(|m| {
            let mut data = Vec::with_capacity(spec.samples * spec.dim);
            for _ in 0..spec.samples {
                for &mu in m {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + sd * e);
                }
            }
            Ok(Tensor::matrix(spec.samples, spec.dim, data)?)
        })
        .collect()
}

/// The ground-truth translation `y = -x`.
pub fn apply_gstar(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = -*v);
    y
}

/// Source samples with their true translations, per condition.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit {
    pub x: Vec<Tensor>,
    pub y: Vec<Tensor>,
}

impl EvalSplit {
    pub fn num_conditions(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Tensor::cols)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let xs: Vec<String> = (0..d).map(|k| format!("x_{k}")).collect();
        let ys: Vec<String> = (0..d).map(|k| format!("y_{k}")).collect();
        writeln!(w, "cond,{},{}", xs.join(","), ys.join(","))?;
        for (q, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            for (a, b) in x.rows_iter().zip(y.rows_iter()) {
                let vals: Vec<String> = a.iter().chain(b).map(|v| v.to_string()).collect();
                writeln!(w, "{q},{}", vals.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Schema("empty evaluation file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"cond") || cols.len() < 3 || (cols.len() - 1) % 2 != 0 {
            return Err(Error::Schema(format!("bad evaluation header {header:?}")));
        }
        let d = (cols.len() - 1) / 2;
        for k in 0..d {
            if cols[1 + k] != format!("x_{k}") || cols[1 + d + k] != format!("y_{k}") {
                return Err(Error::Schema(format!("bad evaluation header {header:?}")));
            }
        }
        let mut rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (q, vals) = parse_row(&line, i + 2, 1 + 2 * d)?;
            let entry = rows.entry(q).or_default();
            entry.0.extend_from_slice(&vals[..d]);
            entry.1.extend_from_slice(&vals[d..]);
        }
        let q_count = rows.keys().next_back().map_or(0, |q| q + 1);
        let mut split = EvalSplit { x: Vec::new(), y: Vec::new() };
        for q in 0..q_count {
            let (x, y) = rows.remove(&q).ok_or(Error::EmptyCondition { cond: q, domain: "evaluation" })?;
            split.x.push(Tensor::matrix(x.len() / d, d, x)?);
            split.y.push(Tensor::matrix(y.len() / d, d, y)?);
        }
        Ok(split)
    }
}

/// Parses `cond,<fields - 1 numbers>`.
fn parse_row(line: &str, line_no: usize, fields: usize) -> Result<(usize, Vec<f64>)> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != fields {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected {fields} fields, found {}", parts.len()),
        });
    }
    let q = parts[0].trim().parse::<usize>().map_err(|e| Error::Parse {
        line: line_no,
        msg: format!("condition {:?}: {e}", parts[0]),
    })?;
    let vals = parts[1..]
        .iter()
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("{s:?}: {e}"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse {
            line: line_no,
            msg: "non-finite value".into(),
        });
    }
    Ok((q, vals))
}

/// Named synthetic setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Blobs2d,
    Blobs3d,
    Swarm,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Blobs2d => "blobs2d",
            Preset::Blobs3d => "blobs3d",
            Preset::Swarm => "swarm",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs2d" => Ok(Preset::Blobs2d),
            "blobs3d" => Ok(Preset::Blobs3d),
            "swarm" => Ok(Preset::Swarm),
            _ => Err(invalid(format!("unknown preset {s:?}; expected blobs2d, blobs3d or swarm"))),
        }
    }
}

/// A generated setup: training data, optional paired evaluation split,
/// optional surface, and the centres used for cluster diagnostics.
#[derive(Clone, Debug)]
pub struct PresetData {
    pub dataset: ConditionalDataset,
    pub eval: Option<EvalSplit>,
    pub surface: Option<PointCloud>,
    pub source_centers: Vec<Vec<f64>>,
    pub target_centers: Vec<Vec<f64>>,
}

/// Antipodal blobs: sources from the spec, targets pushed through `g*` from
/// an independent draw, and a separate paired evaluation draw.
pub fn blob_setup(spec: &BlobSpec, eval_samples: usize) -> Result<PresetData> {
    let sources = gen_blobs(&BlobSpec {
        seed: derive_seed(spec.seed, "source"),
        ..spec.clone()
    })?;
    let targets = gen_blobs(&BlobSpec {
        seed: derive_seed(spec.seed, "target"),
        ..spec.clone()
    })?
    .iter()
    .map(apply_gstar)
    .collect();
    let eval_x = gen_blobs(&BlobSpec {
        seed: derive_seed(spec.seed, "eval"),
        samples: eval_samples,
        ..spec.clone()
    })?;
    let eval_y = eval_x.iter().map(apply_gstar).collect();
    Ok(PresetData {
        dataset: ConditionalDataset::new(sources, targets)?,
        eval: Some(EvalSplit { x: eval_x, y: eval_y }),
        surface: None,
        source_centers: spec.means.clone(),
        target_centers: spec.means.iter().map(|m| m.iter().map(|v| -v).collect()).collect(),
    })
}

pub fn preset(p: Preset, seed: u64) -> Result<PresetData> {
    match p {
        Preset::Blobs2d => blob_setup(&BlobSpec::antipodal(2, BLOB_SCALE, BLOB_SAMPLES, seed)?, EVAL_SAMPLES),
        Preset::Blobs3d => blob_setup(&BlobSpec::antipodal(3, BLOB_SCALE, BLOB_SAMPLES, seed)?, EVAL_SAMPLES),
        Preset::Swarm => {
            let cloud = default_bump();
            let spec = SwarmSpec::crossing(seed);
            let dataset = swarm_scenario(&cloud, &spec)?;
            let lift = |c: &[f64; 2]| {
                let h = cloud.points()[cloud.nearest_xy_index(c[0], c[1])][2];
                vec![c[0], c[1], h]
            };
            Ok(PresetData {
                source_centers: spec.sources.iter().map(lift).collect(),
                target_centers: spec.destinations.iter().map(lift).collect(),
                dataset,
                eval: None,
                surface: Some(cloud),
            })
        }
    }
}

/// Which pairs of grid boxes [`sdc_check`] compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxPairs {
    /// Every unordered pair of distinct boxes.
    All,
    /// Each box with its point reflection through the grid centre.
    Mirror,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdcReport {
    /// Pairs where some condition puts more than `tol` mass on either box.
    pub pairs_checked: usize,
    /// Checked pairs where some condition's masses differ by more than `tol`.
    pub diverse_pairs: usize,
    pub fraction: f64,
}

/// Per-condition empirical mass of each cell of a `resolution^d` grid over
/// the joint bounding box of all samples.
fn cell_masses(sources: &[Tensor], resolution: usize) -> Vec<Vec<f64>> {
    let d = sources[0].cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in sources {
        for r in s.rows_iter() {
            for k in 0..d {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
    }
    let cells = resolution.pow(d as u32);
    sources
        .iter()
        .map(|s| {
            let mut m = vec![0.0; cells];
            for r in s.rows_iter() {
                let mut idx = 0;
                for k in 0..d {
                    let w = (hi[k] - lo[k]).max(f64::MIN_POSITIVE);
                    let c = (((r[k] - lo[k]) / w * resolution as f64) as usize).min(resolution - 1);
                    idx = idx * resolution + c;
                }
                m[idx] += 1.0 / s.rows() as f64;
            }
            m
        })
        .collect()
}

/// Advisory finite check of the diversity condition on axis-aligned grid
/// boxes: for how many box pairs does some condition give visibly different
/// masses?
pub fn sdc_check(sources: &[Tensor], resolution: usize, tol: f64, pairs: BoxPairs) -> Result<SdcReport> {
    if sources.len() < 2 {
        return Err(Error::TooFewConditions {
            needed: 2,
            got: sources.len(),
        });
    }
    if resolution == 0 || !(tol >= 0.0) {
        return Err(invalid("sdc check needs a positive resolution and non-negative tolerance"));
    }
    let d = sources[0].cols();
    if sources.iter().any(|s| s.cols() != d || s.rows() == 0) {
        return Err(invalid("sdc check needs non-empty sources of equal dimension"));
    }
    let masses = cell_masses(sources, resolution);
    let cells = masses[0].len();
    let mirror = |mut i: usize| {
        let mut digits = vec![0; d];
        for k in (0..d).rev() {
            digits[k] = resolution - 1 - i % resolution;
            i /= resolution;
        }
        digits.iter().fold(0, |acc, &c| acc * resolution + c)
    };
    let mut checked = 0;
    let mut diverse = 0;
    let mut visit = |a: usize, b: usize| {
        if !masses.iter().any(|m| m[a] > tol || m[b] > tol) {
            return;
        }
        checked += 1;
        if masses.iter().any(|m| (m[a] - m[b]).abs() > tol) {
            diverse += 1;
        }
    };
    match pairs {
        BoxPairs::All => {
            for a in 0..cells {
                for b in a + 1..cells {
                    visit(a, b);
                }
            }
        }
        BoxPairs::Mirror => {
            for a in 0..cells {
                let b = mirror(a);
                if a < b {
                    visit(a, b);
                }
            }
        }
    }
    Ok(SdcReport {
        pairs_checked: checked,
        diverse_pairs: diverse,
        fraction: if checked == 0 { 0.0 } else { diverse as f64 / checked as f64 },
    })
}

/// CSV `dim_0..dim_{d-1}`, one row per point.
pub fn write_points<W: Write>(m: &Tensor, mut w: W) -> Result<()> {
    let dims: Vec<String> = (0..m.cols()).map(|k| format!("dim_{k}")).collect();
    writeln!(w, "{}", dims.join(","))?;
    for r in m.rows_iter() {
        let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", vals.join(","))?;
    }
    Ok(())
}

/// Reads the `dim_*` columns of a CSV in order, ignoring any others.
pub fn read_points<R: BufRead>(r: R) -> Result<Tensor> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Schema("empty points file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let mut idx = Vec::new();
    for k in 0.. {
        match cols.iter().position(|c| *c == format!("dim_{k}")) {
            Some(i) => idx.push(i),
            None => break,
        }
    }
    if idx.is_empty() {
        return Err(Error::Schema(format!("no `dim_0` column in header {header:?}")));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        for &c in &idx {
            let v: f64 = fields[c].parse().map_err(|e| Error::Parse {
                line: i + 2,
                msg: format!("{:?}: {e}", fields[c]),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Tensor::matrix(rows, idx.len(), data)?)
}

const DOMAINS: [&str; 2] = ["source", "target"];

/// CSV `cond,domain,dim_0..dim_{d-1}` with sources before targets.
pub fn write_dataset<W: Write>(ds: &ConditionalDataset, mut w: W) -> Result<()> {
    let dims: Vec<String> = (0..ds.dim()).map(|k| format!("dim_{k}")).collect();
    writeln!(w, "cond,domain,{}", dims.join(","))?;
    for q in 0..ds.num_conditions() {
        for (domain, m) in DOMAINS.iter().zip([ds.source(q), ds.target(q)]) {
            for r in m.rows_iter() {
                let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{q},{domain},{}", vals.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<ConditionalDataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Schema("empty dataset file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols.first() != Some(&"cond") {
        return Err(Error::Schema(format!("first column must be `cond`, header is {header:?}")));
    }
    if cols.get(1) != Some(&"domain") {
        return Err(Error::Schema(format!("second column must be `domain`, header is {header:?}")));
    }
    let d = cols.len() - 2;
    if d == 0 {
        return Err(Error::Schema("no `dim_*` columns".into()));
    }
    for (k, c) in cols[2..].iter().enumerate() {
        if *c != format!("dim_{k}") {
            return Err(Error::Schema(format!("column {} should be dim_{k}, found {c:?}", k + 2)));
        }
    }
    let mut data: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (head, rest) = line.split_once(',').ok_or(Error::Parse {
            line: line_no,
            msg: "missing fields".into(),
        })?;
        let (domain, values) = rest.split_once(',').ok_or(Error::Parse {
            line: line_no,
            msg: "missing fields".into(),
        })?;
        let dom = DOMAINS.iter().position(|&s| s == domain.trim()).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("domain must be source or target, found {domain:?}"),
        })?;
        let (q, vals) = parse_row(&format!("{head},{values}"), line_no, 1 + d)?;
        data.entry((q, dom)).or_default().extend(vals);
    }
    let q_count = data.keys().map(|(q, _)| q + 1).max().unwrap_or(0);
    if q_count == 0 {
        return Err(Error::Schema("dataset has no rows".into()));
    }
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for q in 0..q_count {
        for (dom, out) in [(0, &mut sources), (1, &mut targets)] {
            let v = data.remove(&(q, dom)).ok_or(Error::EmptyCondition {
                cond: q,
                domain: DOMAINS[dom],
            })?;
            out.push(Tensor::matrix(v.len() / d, d, v)?);
        }
    }
    ConditionalDataset::new(sources, targets)
}
