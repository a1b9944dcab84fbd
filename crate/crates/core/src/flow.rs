//! Velocity fields, flow-matching objectives, the trainers built on them and
//! fixed-step ODE integration.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::coupling::{ot_coupling, ConditionalDataset, OtScope, PairBatch, Sampler};
use crate::error::{invalid, Error, Result};
use crate::data::Preset;
use crate::interpolant::{repulsion_loss, Interpolant, KernelParams, LearnableInterpolant, PathBatch};
use crate::nn::{AdamConfig, AdamState, BoundMlp, EmaState, MlpParams};
use crate::rng::derive_seed;
use crate::surface::{mfm_loss, LandParams, PointCloud};

/// Training procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DfmTwoPhase,
    DfmInterleaved,
    Fm,
    FmCond,
    FmOt,
    FmCondOt,
    Split,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::DfmTwoPhase,
        Mode::DfmInterleaved,
        Mode::Fm,
        Mode::FmCond,
        Mode::FmOt,
        Mode::FmCondOt,
        Mode::Split,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DfmTwoPhase => "dfm-two-phase",
            Mode::DfmInterleaved => "dfm-interleaved",
            Mode::Fm => "fm",
            Mode::FmCond => "fm-cond",
            Mode::FmOt => "fm-ot",
            Mode::FmCondOt => "fm-cond-ot",
            Mode::Split => "split",
        }
    }

    /// Whether the mode trains a learnable interpolant.
    pub fn learns_interpolant(self) -> bool {
        matches!(self, Mode::DfmTwoPhase | Mode::DfmInterleaved | Mode::Split)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                invalid(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl fmt::Display for OdeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Rk4 => "rk4",
        })
    }
}

impl FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "rk4" => Ok(OdeMethod::Rk4),
            _ => Err(invalid(format!("unknown ODE method {s:?}; expected euler or rk4"))),
        }
    }
}

/// Consensus weight of the split trainer on the blob presets.
pub const SPLIT_LAMBDA: f64 = 0.3;

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Interpolant iterations (first phase of the two-phase trainer).
    pub interp_iters: usize,
    /// Velocity iterations; also the iteration count of the interleaved and
    /// split trainers.
    pub fm_iters: usize,
    pub batch_size: usize,
    pub lr_velocity: f64,
    pub lr_interp: f64,
    pub kernel: KernelParams,
    pub fd_step: f64,
    pub ode_steps: usize,
    pub ode_method: OdeMethod,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub interp_hidden: Vec<usize>,
    /// Feed `t` to the interpolant residual network.
    pub time_input: bool,
    /// Scale of the residual network's initial output layer.
    pub interp_init_gain: f64,
    /// Consensus weight of the split trainer.
    pub lambda: f64,
    /// Weight of the repulsion term.
    pub lambda1: f64,
    /// Weight of the surface term (used only when a surface is supplied).
    pub lambda2: f64,
    pub land: LandParams,
    pub weight_decay: f64,
    /// EMA decay of the velocity weights; 0 disables.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DfmTwoPhase,
            interp_iters: 2000,
            fm_iters: 2000,
            batch_size: 512,
            lr_velocity: 1e-3,
            lr_interp: 1e-4,
            kernel: KernelParams {
                sigma_space: 1.0,
                sigma_time: 0.25,
                eta: crate::interpolant::DEFAULT_ETA,
            },
            fd_step: crate::interpolant::DEFAULT_FD_STEP,
            ode_steps: 100,
            ode_method: OdeMethod::Euler,
            seed: 0,
            hidden: vec![64, 64],
            interp_hidden: vec![64, 64],
            time_input: true,
            interp_init_gain: 0.1,
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 0.0,
            land: LandParams::default(),
            weight_decay: 0.0,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned per preset; fields not listed keep [`TrainConfig::default`].
    ///
    /// Blobs: EMA 0.99 on the velocity weights. Swarm: σ1 = 0.1, σ2 = 1.5,
    /// λ1 = 5000, λ2 = 1, weight decay 1e-5 and three hidden layers.
    pub fn for_preset(preset: Preset) -> Self {
        let base = Self::default();
        match preset {
            Preset::Blobs2d | Preset::Blobs3d => Self {
                ema_decay: 0.99,
                lambda: SPLIT_LAMBDA,
                ..base
            },
            Preset::Swarm => Self {
                kernel: KernelParams {
                    sigma_space: 0.1,
                    sigma_time: 1.5,
                    ..base.kernel
                },
                lambda1: 5000.0,
                lambda2: 1.0,
                weight_decay: 1e-5,
                hidden: vec![64, 64, 64],
                interp_hidden: vec![64, 64, 64],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr_velocity", self.lr_velocity),
            ("lr_interp", self.lr_interp),
            ("fd_step", self.fd_step),
            ("ode_steps", self.ode_steps as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fm_iters == 0 {
            return Err(invalid("fm_iters must be positive"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.mode == Mode::Split && !(self.lambda > 0.0) {
            return Err(invalid(format!("split mode needs lambda > 0, got {}", self.lambda)));
        }
        self.kernel.validate()?;
        self.land.validate()?;
        if self.hidden.contains(&0) || self.interp_hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::with_lr(lr)
        }
    }
}

/// Something that assigns a velocity to states at a time.
pub trait VectorField {
    fn dim(&self) -> usize;
    /// Velocities for every row of `z` at time `t`.
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

/// Closure-backed field acting row by row.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(z.len());
        for row in z.rows_iter() {
            let v = (self.f)(row, t);
            if v.len() != self.dim {
                return Err(Error::DimMismatch {
                    context: "closure field output".into(),
                    expected: self.dim,
                    got: v.len(),
                });
            }
            data.extend(v);
        }
        // Non-finite output is left for the integrator to report by step.
        Ok(Tensor::raw(vec![z.rows(), self.dim], data))
    }
}

/// MLP velocity `v(z, t)` with input `(z, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    net: MlpParams,
    dim: usize,
}

impl VelocityField {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        Ok(Self {
            net: MlpParams::init(&dims, seed)?,
            dim,
        })
    }

    pub fn from_net(net: MlpParams) -> Result<Self> {
        let dim = net.output_dim();
        if net.input_dim() != dim + 1 {
            return Err(invalid(format!(
                "velocity network {:?} must map dimension d + 1 to d",
                net.dims()
            )));
        }
        Ok(Self { net, dim })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    fn check_rows(&self, z: &Tensor, t: &[f64]) -> Result<()> {
        if z.cols() != self.dim {
            return Err(Error::DimMismatch {
                context: "velocity field state".into(),
                expected: self.dim,
                got: z.cols(),
            });
        }
        if z.rows() != t.len() {
            return Err(invalid(format!("{} states but {} times", z.rows(), t.len())));
        }
        Ok(())
    }

    /// Velocities with a separate time per row.
    pub fn eval_at(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.check_rows(z, t)?;
        let input = Tensor::hcat(&[z, &Tensor::column(t)?])?;
        Ok(self.net.eval(&input)?)
    }

    /// Graph version of [`VelocityField::eval_at`] using bound weights.
    pub fn forward_node(&self, g: &mut Graph, bound: &BoundMlp, z: Node, t: &[f64]) -> Result<Node> {
        self.check_rows(g.value(z), t)?;
        let tc = g.constant(Tensor::column(t)?);
        let input = g.concat(&[z, tc])?;
        Ok(bound.forward(g, input)?)
    }
}

impl VectorField for VelocityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.eval_at(z, &vec![t; z.rows()])
    }
}

/// Detached path points and velocities, with the first non-finite entry
/// reported by sample index.
pub fn fm_targets(interp: Interpolant<'_>, batch: &PairBatch, t: &[f64], h: f64) -> Result<(Tensor, Tensor)> {
    let (z, dz) = interp.eval_with_dt(&batch.x, &batch.y, t, h)?;
    for (m, what) in [(&z, "interpolant point"), (&dz, "interpolant velocity")] {
        if let Some(i) = m.first_non_finite() {
            return Err(Error::NonFinite(format!("{what} of sample {}", i / m.cols())));
        }
    }
    Ok((z, dz))
}

/// `mean_n ||v(z_n, t_n) - target_n||^2` with `z` and `target` given as nodes.
pub fn fm_regression(
    g: &mut Graph,
    v: &VelocityField,
    bound: &BoundMlp,
    z: Node,
    target: Node,
    t: &[f64],
) -> Result<Node> {
    let out = v.forward_node(g, bound, z, t)?;
    let diff = g.sub(out, target)?;
    let sq = g.square(diff)?;
    let per_row = g.sum_rows(sq)?;
    Ok(g.mean(per_row)?)
}

/// Flow-matching loss on a pair batch. The interpolant is evaluated outside
/// the graph, so only the velocity weights receive gradient.
pub fn fm_loss(
    g: &mut Graph,
    v: &VelocityField,
    bound: &BoundMlp,
    interp: Interpolant<'_>,
    batch: &PairBatch,
    t: &[f64],
    h: f64,
) -> Result<Node> {
    let (z, dz) = fm_targets(interp, batch, t, h)?;
    let zn = g.constant(z);
    let target = g.constant(dz);
    fm_regression(g, v, bound, zn, target, t)
}

/// One row of the training log; a phase that did not run leaves its loss
/// empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss_interp: Option<f64>,
    pub loss_fm: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, loss_interp: Option<f64>, loss_fm: Option<f64>) {
        let iter = self.rows.len();
        self.rows.push(LogRow {
            iter,
            loss_interp,
            loss_fm,
        });
    }

    pub fn fm_losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss_fm).collect()
    }

    pub fn interp_losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss_interp).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,loss_interp,loss_fm")?;
        let cell = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.iter, cell(r.loss_interp), cell(r.loss_fm))?;
        }
        Ok(())
    }
}

/// Private networks of the split trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModels {
    pub velocities: Vec<VelocityField>,
    pub interpolants: Vec<LearnableInterpolant>,
}

/// Result of any trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub velocity: VelocityField,
    pub interp: Option<LearnableInterpolant>,
    pub split: Option<SplitModels>,
    pub log: TrainLog,
    /// Velocity optimizer state at the end of training.
    pub optimizer: AdamState,
    pub iterations: usize,
}

fn uniform_times(sampler: &mut Sampler, n: usize) -> Vec<f64> {
    (0..n).map(|_| sampler.rng().random::<f64>()).collect()
}

fn check_dataset(config: &TrainConfig, ds: &ConditionalDataset, min_q: usize) -> Result<()> {
    config.validate()?;
    if ds.num_conditions() < min_q {
        return Err(Error::TooFewConditions {
            needed: min_q,
            got: ds.num_conditions(),
        });
    }
    Ok(())
}

/// Velocity network, its optimizer and optional EMA.
struct VelocityTrainer {
    v: VelocityField,
    adam: AdamState,
    ema: Option<EmaState>,
}

impl VelocityTrainer {
    fn new(config: &TrainConfig, dim: usize) -> Result<Self> {
        let v = VelocityField::new(dim, &config.hidden, derive_seed(config.seed, "velocity"))?;
        let adam = AdamState::new(v.net(), config.adam(config.lr_velocity));
        let ema = (config.ema_decay > 0.0).then(|| EmaState::new(v.net(), config.ema_decay));
        Ok(Self { v, adam, ema })
    }

    /// One Adam step on detached targets.
    fn step(&mut self, z: Tensor, dz: Tensor, t: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.v.net().bind(&mut g);
        let zn = g.constant(z);
        let target = g.constant(dz);
        let loss = fm_regression(&mut g, &self.v, &bound, zn, target, t)?;
        let grads = g.backward(loss)?;
        self.adam.step(self.v.net_mut(), &bound.grads(&grads), "flow matching")?;
        if let Some(ema) = &mut self.ema {
            ema.update(self.v.net())?;
        }
        Ok(g.value(loss).item())
    }

    fn finish(self) -> (VelocityField, AdamState) {
        let v = match self.ema {
            Some(ema) => VelocityField::from_net(ema.shadow).expect("shadow keeps the layout"),
            None => self.v,
        };
        (v, self.adam)
    }
}

/// Baseline flow matching with the straight-line interpolant.
pub fn train_fm(config: &TrainConfig, ds: &ConditionalDataset) -> Result<Trained> {
    check_dataset(config, ds, 1)?;
    if !matches!(config.mode, Mode::Fm | Mode::FmCond | Mode::FmOt | Mode::FmCondOt) {
        return Err(invalid(format!("train_fm does not handle mode {}", config.mode)));
    }
    let mut vt = VelocityTrainer::new(config, ds.dim())?;
    let mut sampler = Sampler::new(derive_seed(config.seed, "fm"));
    let mut log = TrainLog::default();
    let n = config.batch_size;
    for _ in 0..config.fm_iters {
        let batch = match config.mode {
            Mode::Fm => sampler.marginal(ds, n)?,
            Mode::FmOt => ot_coupling(&sampler.marginal(ds, n)?, OtScope::Batch)?,
            Mode::FmCond => {
                let q = sampler.condition(ds);
                sampler.independent(ds, q, n)?
            }
            _ => {
                let q = sampler.condition(ds);
                ot_coupling(&sampler.independent(ds, q, n)?, OtScope::PerCondition)?
            }
        };
        let t = uniform_times(&mut sampler, n);
        let (z, dz) = fm_targets(Interpolant::Linear, &batch, &t, config.fd_step)?;
        let loss = vt.step(z, dz, &t)?;
        log.push(None, Some(loss));
    }
    let (velocity, optimizer) = vt.finish();
    Ok(Trained {
        velocity,
        interp: None,
        split: None,
        log,
        optimizer,
        iterations: config.fm_iters,
    })
}

/// Interpolant network, its optimizer and the sampler feeding it.
struct InterpTrainer<'a> {
    interp: LearnableInterpolant,
    adam: AdamState,
    sampler: Sampler,
    config: &'a TrainConfig,
    surface: Option<&'a PointCloud>,
}

impl<'a> InterpTrainer<'a> {
    fn new(config: &'a TrainConfig, dim: usize, surface: Option<&'a PointCloud>) -> Result<Self> {
        let interp = LearnableInterpolant::new(
            dim,
            &config.interp_hidden,
            derive_seed(config.seed, "interp"),
            config.time_input,
            config.interp_init_gain,
        )?;
        let adam = AdamState::new(interp.net(), config.adam(config.lr_interp));
        Ok(Self {
            interp,
            adam,
            sampler: Sampler::new(derive_seed(config.seed, "interp-batches")),
            config,
            surface,
        })
    }

    fn step(&mut self, ds: &ConditionalDataset) -> Result<f64> {
        let n = self.config.batch_size;
        let mut batches = Vec::with_capacity(ds.num_conditions());
        for q in 0..ds.num_conditions() {
            let b = self.sampler.independent(ds, q, n)?;
            let t = uniform_times(&mut self.sampler, n);
            batches.push(PathBatch { x: b.x, y: b.y, t });
        }
        let mut g = Graph::new();
        let bound = self.interp.net().bind(&mut g);
        let rep = repulsion_loss(&mut g, &self.interp, &bound, &batches, &self.config.kernel)?;
        let mut loss = g.scale(rep, self.config.lambda1)?;
        if let Some(cloud) = self.surface {
            if self.config.lambda2 > 0.0 {
                let m = mfm_loss(
                    &mut g,
                    &self.interp,
                    &bound,
                    &batches,
                    cloud,
                    &self.config.land,
                    self.config.fd_step,
                )?;
                let m = g.scale(m, self.config.lambda2)?;
                loss = g.add(loss, m)?;
            }
        }
        let grads = g.backward(loss)?;
        self.adam.step(self.interp.net_mut(), &bound.grads(&grads), "interpolant repulsion")?;
        Ok(g.value(loss).item())
    }
}

/// Two-phase training: the interpolant alone, then the velocity field on
/// the frozen interpolant.
pub fn train_dfm_two_phase(config: &TrainConfig, ds: &ConditionalDataset, surface: Option<&PointCloud>) -> Result<Trained> {
    check_dataset(config, ds, 2)?;
    let mut it = InterpTrainer::new(config, ds.dim(), surface)?;
    let mut log = TrainLog::default();
    for _ in 0..config.interp_iters {
        let l = it.step(ds)?;
        log.push(Some(l), None);
    }
    let interp = it.interp;
    let mut vt = VelocityTrainer::new(config, ds.dim())?;
    let mut sampler = Sampler::new(derive_seed(config.seed, "fm"));
    let n = config.batch_size;
    for _ in 0..config.fm_iters {
        let q = sampler.condition(ds);
        let batch = sampler.independent(ds, q, n)?;
        let t = uniform_times(&mut sampler, n);
        let (z, dz) = fm_targets(Interpolant::Learned(&interp), &batch, &t, config.fd_step)?;
        let l = vt.step(z, dz, &t)?;
        log.push(None, Some(l));
    }
    let (velocity, optimizer) = vt.finish();
    Ok(Trained {
        velocity,
        interp: Some(interp),
        split: None,
        log,
        optimizer,
        iterations: config.interp_iters + config.fm_iters,
    })
}

/// Interleaved training: each iteration takes one interpolant step and then
/// one velocity step against the updated interpolant, averaged over all
/// conditions.
pub fn train_dfm_interleaved(config: &TrainConfig, ds: &ConditionalDataset, surface: Option<&PointCloud>) -> Result<Trained> {
    check_dataset(config, ds, 2)?;
    let mut it = InterpTrainer::new(config, ds.dim(), surface)?;
    let mut vt = VelocityTrainer::new(config, ds.dim())?;
    let mut sampler = Sampler::new(derive_seed(config.seed, "fm"));
    let mut log = TrainLog::default();
    let n = config.batch_size;
    for _ in 0..config.fm_iters {
        let li = it.step(ds)?;
        let mut zs = Vec::new();
        let mut dzs = Vec::new();
        let mut ts = Vec::new();
        for q in 0..ds.num_conditions() {
            let batch = sampler.independent(ds, q, n)?;
            let t = uniform_times(&mut sampler, n);
            let (z, dz) = fm_targets(Interpolant::Learned(&it.interp), &batch, &t, config.fd_step)?;
            zs.push(z);
            dzs.push(dz);
            ts.extend(t);
        }
        // Equal batch sizes make the mean over the stacked batch equal the
        // average of per-condition means.
        let z = Tensor::vcat(&zs.iter().collect::<Vec<_>>())?;
        let dz = Tensor::vcat(&dzs.iter().collect::<Vec<_>>())?;
        let lf = vt.step(z, dz, &ts)?;
        log.push(Some(li), Some(lf));
    }
    let (velocity, optimizer) = vt.finish();
    Ok(Trained {
        velocity,
        interp: Some(it.interp),
        split: None,
        log,
        optimizer,
        iterations: config.fm_iters,
    })
}

/// Variable splitting: private velocity fields and interpolants per
/// condition, tied to one unified field by a consensus penalty, all updated
/// simultaneously.
pub fn train_split(config: &TrainConfig, ds: &ConditionalDataset) -> Result<Trained> {
    check_dataset(config, ds, 1)?;
    let q_count = ds.num_conditions();
    let dim = ds.dim();
    let mut unified = VelocityTrainer::new(config, dim)?;
    let mut private_v = Vec::with_capacity(q_count);
    let mut private_i = Vec::with_capacity(q_count);
    for q in 0..q_count {
        let v = VelocityField::new(dim, &config.hidden, derive_seed(config.seed, &format!("velocity-{q}")))?;
        let adam_v = AdamState::new(v.net(), config.adam(config.lr_velocity));
        let li = LearnableInterpolant::new(
            dim,
            &config.interp_hidden,
            derive_seed(config.seed, &format!("interp-{q}")),
            config.time_input,
            config.interp_init_gain,
        )?;
        let adam_i = AdamState::new(li.net(), config.adam(config.lr_interp));
        private_v.push((v, adam_v));
        private_i.push((li, adam_i));
    }
    let mut sampler = Sampler::new(derive_seed(config.seed, "split"));
    let mut log = TrainLog::default();
    let n = config.batch_size;
    for _ in 0..config.fm_iters {
        let mut g = Graph::new();
        let bound_u = unified.v.net().bind(&mut g);
        let mut bound_v = Vec::with_capacity(q_count);
        let mut bound_i = Vec::with_capacity(q_count);
        let mut total: Option<Node> = None;
        let mut fm_sum = 0.0;
        for q in 0..q_count {
            let (vq, _) = &private_v[q];
            let (iq, _) = &private_i[q];
            let bv = vq.net().bind(&mut g);
            let bi = iq.net().bind(&mut g);
            let batch = sampler.independent(ds, q, n)?;
            let t = uniform_times(&mut sampler, n);
            let x = g.constant(batch.x);
            let y = g.constant(batch.y);
            let (z, dz) = iq.eval_with_dt_node(&mut g, &bi, x, y, &t, config.fd_step)?;
            let out_q = vq.forward_node(&mut g, &bv, z, &t)?;
            let out_u = unified.v.forward_node(&mut g, &bound_u, z, &t)?;
            let fit = {
                let d = g.sub(out_q, dz)?;
                let s = g.square(d)?;
                let r = g.sum_rows(s)?;
                g.mean(r)?
            };
            let consensus = {
                let d = g.sub(out_u, out_q)?;
                let s = g.square(d)?;
                let r = g.sum_rows(s)?;
                g.mean(r)?
            };
            fm_sum += g.value(fit).item();
            let c = g.scale(consensus, config.lambda)?;
            let term = g.add(fit, c)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
            bound_v.push(bv);
            bound_i.push(bi);
        }
        let total = total.expect("at least one condition");
        let grads = g.backward(total)?;
        unified
            .adam
            .step(unified.v.net_mut(), &bound_u.grads(&grads), "split consensus")?;
        if let Some(ema) = &mut unified.ema {
            ema.update(unified.v.net())?;
        }
        for q in 0..q_count {
            let (vq, aq) = &mut private_v[q];
            aq.step(vq.net_mut(), &bound_v[q].grads(&grads), "split private velocity")?;
            let (iq, ai) = &mut private_i[q];
            ai.step(iq.net_mut(), &bound_i[q].grads(&grads), "split private interpolant")?;
        }
        log.push(Some(g.value(total).item()), Some(fm_sum / q_count as f64));
    }
    let (velocity, optimizer) = unified.finish();
    Ok(Trained {
        velocity,
        interp: None,
        split: Some(SplitModels {
            velocities: private_v.into_iter().map(|(v, _)| v).collect(),
            interpolants: private_i.into_iter().map(|(i, _)| i).collect(),
        }),
        log,
        optimizer,
        iterations: config.fm_iters,
    })
}

/// Dispatches on `config.mode`.
pub fn train(config: &TrainConfig, ds: &ConditionalDataset, surface: Option<&PointCloud>) -> Result<Trained> {
    match config.mode {
        Mode::DfmTwoPhase => train_dfm_two_phase(config, ds, surface),
        Mode::DfmInterleaved => train_dfm_interleaved(config, ds, surface),
        Mode::Split => train_split(config, ds),
        _ => train_fm(config, ds),
    }
}

/// States of one sample on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn end(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }
}

/// `steps + 1` equally spaced times from 0 to 1.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

fn axpy(z: &Tensor, a: f64, v: &Tensor) -> Tensor {
    let data = z.data().iter().zip(v.data()).map(|(z, v)| z + a * v).collect();
    Tensor::raw(z.shape().to_vec(), data)
}

/// Integrates every row of `x` from `t = 0` to `t = 1`. Returns the state
/// batch at each of the `steps + 1` grid times.
pub fn integrate_batch<F: VectorField + ?Sized>(field: &F, x: &Tensor, steps: usize, method: OdeMethod) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(invalid("integration needs at least one step"));
    }
    if x.cols() != field.dim() {
        return Err(Error::DimMismatch {
            context: "integration start states".into(),
            expected: field.dim(),
            got: x.cols(),
        });
    }
    let h = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    let mut z = x.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        z = match method {
            OdeMethod::Euler => axpy(&z, h, &field.velocity(&z, t)?),
            OdeMethod::Rk4 => {
                let k1 = field.velocity(&z, t)?;
                let k2 = field.velocity(&axpy(&z, h / 2.0, &k1), t + h / 2.0)?;
                let k3 = field.velocity(&axpy(&z, h / 2.0, &k2), t + h / 2.0)?;
                let k4 = field.velocity(&axpy(&z, h, &k3), t + h)?;
                let data = z
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, z)| {
                        z + h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i])
                    })
                    .collect();
                Tensor::raw(z.shape().to_vec(), data)
            }
        };
        if let Some(i) = z.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "state of sample {} at integration step {}",
                i / z.cols(),
                k + 1
            )));
        }
        states.push(z.clone());
    }
    Ok(states)
}

/// Trajectory of a single start point.
pub fn integrate<F: VectorField + ?Sized>(field: &F, x: &[f64], steps: usize, method: OdeMethod) -> Result<Trajectory> {
    let start = Tensor::matrix(1, x.len(), x.to_vec())?;
    let states = integrate_batch(field, &start, steps, method)?;
    Ok(Trajectory {
        times: time_grid(steps),
        states: states.into_iter().map(Tensor::into_data).collect(),
    })
}

/// Endpoints of the flow from each row of `x`.
pub fn translate<F: VectorField + ?Sized>(field: &F, x: &Tensor, steps: usize, method: OdeMethod) -> Result<Tensor> {
    Ok(integrate_batch(field, x, steps, method)?.pop().expect("at least one state"))
}

/// Per-sample trajectories from batched states.
pub fn split_trajectories(states: &[Tensor]) -> Vec<Vec<Vec<f64>>> {
    let n = states.first().map_or(0, Tensor::rows);
    (0..n)
        .map(|i| states.iter().map(|s| s.row(i).to_vec()).collect())
        .collect()
}

/// CSV with columns `sample_id,t,dim_0..` and one row per sample per time.
pub fn write_trajectories_csv<W: Write>(mut w: W, states: &[Tensor]) -> Result<()> {
    let Some(first) = states.first() else {
        return Err(invalid("no states to write"));
    };
    let d = first.cols();
    let header: Vec<String> = (0..d).map(|k| format!("dim_{k}")).collect();
    writeln!(w, "sample_id,t,{}", header.join(","))?;
    let steps = states.len() - 1;
    let times = time_grid(steps.max(1));
    for i in 0..first.rows() {
        for (k, s) in states.iter().enumerate() {
            let vals: Vec<String> = s.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{i},{},{}", times[k], vals.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::coupling::independent_coupling;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("dfm".parse::<Mode>().is_err());
        assert_eq!("rk4".parse::<OdeMethod>().unwrap(), OdeMethod::Rk4);
    }

    #[test]
    fn fm_loss_examples() {
        let mut v = VelocityField::new(2, &[4], 0).unwrap();
        let n = v.net().param_count();
        v.net_mut().set_flat(&vec![0.0; n]).unwrap();
        let batch = PairBatch {
            x: Tensor::from_rows(&[[0.0, 0.0]]).unwrap(),
            y: Tensor::from_rows(&[[2.0, 0.0]]).unwrap(),
            cond: vec![0],
            seed: 0,
        };
        let mut g = Graph::new();
        let bound = v.net().bind(&mut g);
        let l = fm_loss(&mut g, &v, &bound, Interpolant::Linear, &batch, &[0.3], 1e-3).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn fm_loss_is_zero_for_matching_field() {
        // A single linear layer reproducing the constant velocity y - x.
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::from_rows(&[[1.5, -0.5]]).unwrap();
        let v = VelocityField::from_net(MlpParams::from_layers(vec![w], vec![b]).unwrap()).unwrap();
        let batch = PairBatch {
            x: Tensor::from_rows(&[[0.0, 1.0], [2.0, 2.0]]).unwrap(),
            y: Tensor::from_rows(&[[1.5, 0.5], [3.5, 1.5]]).unwrap(),
            cond: vec![0, 0],
            seed: 0,
        };
        let mut g = Graph::new();
        let bound = v.net().bind(&mut g);
        let l = fm_loss(&mut g, &v, &bound, Interpolant::Linear, &batch, &[0.1, 0.9], 1e-3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let v = VelocityField::new(2, &[8], 3).unwrap();
        let li = LearnableInterpolant::new(2, &[8], 4, true, 1.0).unwrap();
        let batch = PairBatch {
            x: Tensor::from_rows(&[[0.5, -1.0], [1.0, 2.0], [-0.3, 0.2]]).unwrap(),
            y: Tensor::from_rows(&[[-1.0, 1.0], [0.0, -2.0], [1.3, 0.7]]).unwrap(),
            cond: vec![0; 3],
            seed: 0,
        };
        let t = [0.2, 0.5, 0.8];
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut v = v.clone();
            v.net_mut().set_flat(p)?;
            let mut g = Graph::new();
            let bound = v.net().bind(&mut g);
            let l = fm_loss(&mut g, &v, &bound, Interpolant::Learned(&li), &batch, &t, 1e-3)?;
            let grads = g.backward(l)?;
            let flat = bound.grads(&grads).into_iter().flat_map(Tensor::into_data).collect();
            Ok((g.value(l).item(), flat))
        };
        assert!(finite_diff_check(f, &v.net().flat(), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn fm_loss_gives_interpolant_no_gradient() {
        let v = VelocityField::new(2, &[8], 3).unwrap();
        let li = LearnableInterpolant::new(2, &[8], 4, true, 1.0).unwrap();
        let batch = PairBatch {
            x: Tensor::from_rows(&[[0.5, -1.0]]).unwrap(),
            y: Tensor::from_rows(&[[-1.0, 1.0]]).unwrap(),
            cond: vec![0],
            seed: 0,
        };
        let mut g = Graph::new();
        let theta = li.net().bind(&mut g);
        let bound = v.net().bind(&mut g);
        let l = fm_loss(&mut g, &v, &bound, Interpolant::Learned(&li), &batch, &[0.4], 1e-3).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(theta.grads(&grads).iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(bound.grads(&grads).iter().any(|t| t.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let c = [0.7, -1.3];
        let field = FnField::new(2, |_: &[f64], _| c.to_vec());
        for method in [OdeMethod::Euler, OdeMethod::Rk4] {
            for steps in [1, 7, 100] {
                let tr = integrate(&field, &[1.0, 2.0], steps, method).unwrap();
                assert!((tr.end()[0] - 1.7).abs() < 1e-12);
                assert!((tr.end()[1] - 0.7).abs() < 1e-12);
                assert_eq!(tr.states.len(), steps + 1);
                assert_eq!(tr.times[0], 0.0);
                assert_eq!(*tr.times.last().unwrap(), 1.0);
                assert_eq!(tr.start(), &[1.0, 2.0]);
            }
        }
    }

    #[test]
    fn exponential_growth() {
        let field = FnField::new(1, |z: &[f64], _| z.to_vec());
        let e = std::f64::consts::E;
        let rk = integrate(&field, &[1.0], 100, OdeMethod::Rk4).unwrap();
        assert!((rk.end()[0] - e).abs() < 1e-6);
        let e100 = (integrate(&field, &[1.0], 100, OdeMethod::Euler).unwrap().end()[0] - e).abs();
        let e200 = (integrate(&field, &[1.0], 200, OdeMethod::Euler).unwrap().end()[0] - e).abs();
        let ratio = e100 / e200;
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn blow_up_is_reported_with_step() {
        let field = FnField::new(1, |z: &[f64], _| vec![z[0] * z[0] * 1e300]);
        let err = integrate(&field, &[10.0], 10, OdeMethod::Euler).unwrap_err();
        assert!(err.to_string().contains("integration step 2"), "{err}");
    }

    #[test]
    fn zero_field_translates_to_identity() {
        let mut v = VelocityField::new(2, &[8], 1).unwrap();
        let n = v.net().param_count();
        v.net_mut().set_flat(&vec![0.0; n]).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]]).unwrap();
        assert_eq!(translate(&v, &x, 50, OdeMethod::Rk4).unwrap(), x);
    }

    fn tiny_dataset() -> ConditionalDataset {
        let s0 = Tensor::from_rows(&[[2.0, 2.0], [2.5, 1.5], [1.5, 2.5]]).unwrap();
        let s1 = Tensor::from_rows(&[[2.0, -2.0], [2.5, -1.5], [1.5, -2.5]]).unwrap();
        let neg = |m: &Tensor| Tensor::raw(m.shape().to_vec(), m.data().iter().map(|v| -v).collect());
        ConditionalDataset::new(vec![s0.clone(), s1.clone()], vec![neg(&s0), neg(&s1)]).unwrap()
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            interp_iters: 20,
            fm_iters: 100,
            batch_size: 32,
            hidden: vec![16],
            interp_hidden: vec![16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn phase_two_loss_trends_down() {
        let out = train_dfm_two_phase(&tiny_config(Mode::DfmTwoPhase), &tiny_dataset(), None).unwrap();
        let fm = out.log.fm_losses();
        let head: f64 = fm[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = fm[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(out.log.interp_losses().len(), 20);
    }

    #[test]
    fn trainers_are_deterministic() {
        let ds = tiny_dataset();
        for mode in Mode::ALL {
            let mut cfg = tiny_config(mode);
            cfg.fm_iters = 5;
            cfg.interp_iters = 3;
            let a = train(&cfg, &ds, None).unwrap();
            let b = train(&cfg, &ds, None).unwrap();
            assert_eq!(a, b, "{mode}");
            assert_eq!(a.velocity.net().dims(), &[3, 16, 2]);
        }
    }

    #[test]
    fn dfm_needs_two_conditions() {
        let ds = tiny_dataset();
        let one = ConditionalDataset::new(vec![ds.source(0).clone()], vec![ds.target(0).clone()]).unwrap();
        assert!(matches!(
            train(&tiny_config(Mode::DfmTwoPhase), &one, None),
            Err(Error::TooFewConditions { .. })
        ));
        assert!(train(&tiny_config(Mode::Split), &one, None).is_ok());
        let mut cfg = tiny_config(Mode::Split);
        cfg.lambda = 0.0;
        assert!(train(&cfg, &ds, None).is_err());
    }

    #[test]
    fn zero_interpolant_iterations_leave_init() {
        let mut cfg = tiny_config(Mode::DfmTwoPhase);
        cfg.interp_iters = 0;
        cfg.fm_iters = 1;
        let out = train(&cfg, &tiny_dataset(), None).unwrap();
        let fresh = LearnableInterpolant::new(2, &[16], derive_seed(cfg.seed, "interp"), true, cfg.interp_init_gain).unwrap();
        assert_eq!(out.interp.unwrap(), fresh);
    }

    #[test]
    fn conditional_batches_stay_in_condition() {
        let ds = tiny_dataset();
        for q in 0..2 {
            let b = independent_coupling(&ds, q, 64, 9).unwrap();
            for (x, y) in b.x.rows_iter().zip(b.y.rows_iter()) {
                assert!(ds.source(q).rows_iter().any(|r| r == x));
                assert!(ds.target(q).rows_iter().any(|r| r == y));
            }
        }
    }

    #[test]
    fn trajectory_csv_shape() {
        let field = FnField::new(2, |_: &[f64], _| vec![1.0, 0.0]);
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let states = integrate_batch(&field, &x, 4, OdeMethod::Euler).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &states).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,t,dim_0,dim_1");
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert_eq!(lines[5], "0,1,1,0");
    }
}
