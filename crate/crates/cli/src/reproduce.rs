//! Multi-seed experiment runs: results tables, per-run directories and
//! trajectory figures.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfm::autodiff::Tensor;
use dfm::data::{preset, Preset, PresetData};
use dfm::flow::{integrate_batch, time_grid, write_trajectories_csv, VectorField};
use dfm::metrics::{EvalOptions, EvalReport};
use serde::Serialize;

use crate::commands::{evaluate_field, train_into, write_file, write_json, write_text};
use crate::config::{output_dir, RunConfig};
use crate::svg::{self, Panel, PALETTE};
use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Table1_2d,
    Table1_3d,
    FigReflection,
    Swarm,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Table1_2d,
        Experiment::Table1_3d,
        Experiment::FigReflection,
        Experiment::Swarm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Table1_2d => "table1-2d",
            Experiment::Table1_3d => "table1-3d",
            Experiment::FigReflection => "fig-reflection",
            Experiment::Swarm => "swarm",
        }
    }

    pub fn preset(self) -> Preset {
        match self {
            Experiment::Table1_2d | Experiment::FigReflection => Preset::Blobs2d,
            Experiment::Table1_3d => Preset::Blobs3d,
            Experiment::Swarm => Preset::Swarm,
        }
    }

    /// Method label and the config pairs that select it.
    pub fn methods(self) -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
        match self {
            Experiment::Table1_2d | Experiment::Table1_3d => vec![
                ("fm-cond", vec![("mode", "fm-cond")]),
                ("fm-cond-ot", vec![("mode", "fm-cond-ot")]),
                ("dfm", vec![("mode", "dfm-two-phase")]),
            ],
            Experiment::FigReflection => vec![
                ("fm-cond", vec![("mode", "fm-cond")]),
                ("dfm", vec![("mode", "dfm-two-phase")]),
            ],
            Experiment::Swarm => vec![
                ("dfm", vec![("mode", "dfm-two-phase")]),
                ("dfm-no-surface", vec![("mode", "dfm-two-phase"), ("lambda2", "0")]),
                ("fm-cond-ot", vec![("mode", "fm-cond-ot")]),
            ],
        }
    }

    /// Metrics reported in the results table, in column order.
    pub fn metrics(self) -> &'static [Metric] {
        match self {
            Experiment::Table1_2d | Experiment::Table1_3d => &[Metric::Emd, Metric::Te],
            Experiment::FigReflection => &[Metric::CrossClusterRate, Metric::Emd, Metric::Te],
            Experiment::Swarm => &[Metric::Sa, Metric::Emd],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}; expected table1-2d, table1-3d, fig-reflection or swarm"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Emd,
    Te,
    CrossClusterRate,
    Sa,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Emd => "emd",
            Metric::Te => "te",
            Metric::CrossClusterRate => "cross_cluster_rate",
            Metric::Sa => "sa",
        }
    }

    pub fn of(self, r: &EvalReport) -> Option<f64> {
        match self {
            Metric::Emd => Some(r.emd_mean),
            Metric::Te => r.te,
            Metric::CrossClusterRate => r.cross_cluster_rate,
            Metric::Sa => r.sa,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReproduceArgs {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Config pairs applied to every run, after the method's own.
    pub overrides: Vec<(String, String)>,
    /// Trajectories drawn per condition in the figure data.
    pub trajectories: usize,
}

impl ReproduceArgs {
    pub fn new(experiment: Experiment, out: impl Into<PathBuf>) -> Self {
        Self {
            experiment,
            seeds: (0..10).collect(),
            out: out.into(),
            overrides: Vec::new(),
            trajectories: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Per-seed reports, in seed order.
    pub reports: Vec<EvalReport>,
    /// `(metric, mean, std)` over seeds.
    pub stats: Vec<(Metric, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    /// `method,<metric>_mean,<metric>_std,...`
    pub fn table_csv(&self, metrics: &[Metric]) -> String {
        let mut s = String::from("method");
        for m in metrics {
            s += &format!(",{0}_mean,{0}_std", m.name());
        }
        s.push('\n');
        for row in &self.methods {
            s += &row.method;
            for m in metrics {
                match row.stats.iter().find(|(k, ..)| k == m) {
                    Some((_, mean, std)) => s += &format!(",{mean},{std}"),
                    None => s += ",,",
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width `mean ± std` table for the terminal.
    pub fn pretty(&self, metrics: &[Metric]) -> String {
        let mut s = format!("{:<16}", "method");
        for m in metrics {
            s += &format!("{:>24}", m.name());
        }
        s.push('\n');
        for row in &self.methods {
            s += &format!("{:<16}", row.method);
            for m in metrics {
                let cell = match row.stats.iter().find(|(k, ..)| k == m) {
                    Some((_, mean, std)) => format!("{mean:.4} ± {std:.4}"),
                    None => "-".into(),
                };
                s += &format!("{cell:>24}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Serialize)]
struct ExperimentManifest<'a> {
    experiment: Experiment,
    preset: String,
    seeds: &'a [u64],
    methods: Vec<&'static str>,
    overrides: &'a [(String, String)],
    trajectories: usize,
}

fn run_config(args: &ReproduceArgs, method: &[(&str, &str)], seed: u64, dir: &Path) -> Result<RunConfig> {
    let mut pairs = vec![
        ("preset".to_string(), args.experiment.preset().to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    pairs.extend(method.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    pairs.extend(args.overrides.iter().cloned());
    pairs.push(("out".to_string(), dir.display().to_string()));
    RunConfig::from_pairs(&pairs)
}

/// Start points drawn in the figures: the first rows of each condition's
/// evaluation sources.
fn figure_starts(data: &PresetData, n: usize) -> Vec<Tensor> {
    (0..data.dataset.num_conditions())
        .map(|q| {
            let x = match &data.eval {
                Some(e) => &e.x[q],
                None => data.dataset.source(q),
            };
            let rows: Vec<&[f64]> = x.rows_iter().take(n).collect();
            Tensor::from_rows(&rows).expect("non-empty condition")
        })
        .collect()
}

fn trajectory_panels(title: &str, data: &PresetData, per_condition: &[Vec<Tensor>]) -> Vec<Panel> {
    let dim = data.dataset.dim();
    svg::projections(title, dim)
        .into_iter()
        .map(|(name, a, b)| {
            let mut panel = Panel::new(name);
            for q in 0..data.dataset.num_conditions() {
                let src: Vec<Vec<f64>> = data.dataset.source(q).rows_iter().take(300).map(<[f64]>::to_vec).collect();
                let tgt: Vec<Vec<f64>> = data.dataset.target(q).rows_iter().take(300).map(<[f64]>::to_vec).collect();
                panel.points.push((svg::project(&src, a, b), PALETTE[(2 * q) % PALETTE.len()].into()));
                panel.points.push((svg::project(&tgt, a, b), PALETTE[(2 * q + 1) % PALETTE.len()].into()));
            }
            for states in per_condition {
                for traj in dfm::flow::split_trajectories(states) {
                    panel.paths.push(svg::project(&traj, a, b));
                }
            }
            panel
        })
        .collect()
}

/// Writes `trajectories-q{q}.csv` per condition plus `trajectories.svg`.
fn write_figure(dir: &Path, title: &str, data: &PresetData, per_condition: &[Vec<Tensor>]) -> Result<()> {
    for (q, states) in per_condition.iter().enumerate() {
        write_file(&dir.join(format!("trajectories-q{q}.csv")), |w| Ok(write_trajectories_csv(w, states)?))?;
    }
    write_text(&dir.join("trajectories.svg"), &svg::render(&trajectory_panels(title, data, per_condition)))
}

fn flow_trajectories<F: VectorField + ?Sized>(field: &F, starts: &[Tensor], cfg: &RunConfig) -> Result<Vec<Vec<Tensor>>> {
    starts
        .iter()
        .map(|x| Ok(integrate_batch(field, x, cfg.train.ode_steps, cfg.train.ode_method)?))
        .collect()
}

/// Straight lines from each start to its reflected partner.
fn linear_trajectories(starts: &[Tensor], data: &PresetData, steps: usize) -> Vec<Vec<Tensor>> {
    starts
        .iter()
        .enumerate()
        .map(|(q, x)| {
            let y = match &data.eval {
                Some(e) => {
                    let rows: Vec<&[f64]> = e.y[q].rows_iter().take(x.rows()).collect();
                    Tensor::from_rows(&rows).expect("paired rows")
                }
                None => dfm::data::apply_gstar(x),
            };
            time_grid(steps)
                .into_iter()
                .map(|t| {
                    let data = x.data().iter().zip(y.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                    Tensor::new(x.shape().to_vec(), data).expect("same shape")
                })
                .collect()
        })
        .collect()
}

/// Runs every method of the experiment over every seed.
///
/// Layout: `<out>/<method>/seed-<s>/` holds each run (config echo,
/// checkpoints, loss log, `report.json`); `<out>/<method>/` also holds the
/// first seed's trajectory CSVs and SVG; `<out>/table.csv` and
/// `<out>/runs.csv` summarise.
pub fn reproduce(args: &ReproduceArgs) -> Result<Summary> {
    if args.seeds.is_empty() {
        return Err(CliError::Usage("reproduce needs at least one seed".into()));
    }
    let exp = args.experiment;
    let dir = output_dir(&args.out);
    let methods = exp.methods();
    write_json(
        &dir.join("experiment.json"),
        &ExperimentManifest {
            experiment: exp,
            preset: exp.preset().to_string(),
            seeds: &args.seeds,
            methods: methods.iter().map(|(m, _)| *m).collect(),
            overrides: &args.overrides,
            trajectories: args.trajectories,
        },
    )?;

    let mut summaries = Vec::new();
    let mut runs = format!("method,seed,{}\n", EvalReport::CSV_HEADER);
    for (label, pairs) in &methods {
        let method_dir = dir.join(label);
        let mut reports = Vec::new();
        for (k, &seed) in args.seeds.iter().enumerate() {
            let run_dir = method_dir.join(format!("seed-{seed}"));
            let cfg = run_config(args, pairs, seed, &run_dir)?;
            let data = preset(exp.preset(), seed)?;
            let trained = train_into(&cfg, &data, None, &run_dir)?;
            let options = EvalOptions {
                steps: cfg.train.ode_steps,
                method: cfg.train.ode_method,
                size: cfg.eval_size,
                seed,
            };
            let config = serde_json::json!({ "experiment": exp, "method": label, "seed": seed });
            let report = evaluate_field(&trained.velocity, &data, &options, config)?;
            write_json(&run_dir.join("report.json"), &report)?;
            runs += &format!("{label},{seed},{}\n", report.csv_row());
            if k == 0 && args.trajectories > 0 {
                let starts = figure_starts(&data, args.trajectories);
                let states = flow_trajectories(&trained.velocity, &starts, &cfg)?;
                write_figure(&method_dir, &format!("{exp}: {label}, seed {seed}"), &data, &states)?;
                if exp == Experiment::FigReflection && *label == "fm-cond" {
                    let lines = linear_trajectories(&starts, &data, cfg.train.ode_steps);
                    write_figure(&dir.join("linear"), &format!("{exp}: linear pairing"), &data, &lines)?;
                }
            }
            reports.push(report);
        }
        let stats = exp
            .metrics()
            .iter()
            .filter_map(|&m| {
                let v: Option<Vec<f64>> = reports.iter().map(|r| m.of(r)).collect();
                v.map(|v| {
                    let (mean, std) = mean_std(&v);
                    (m, mean, std)
                })
            })
            .collect();
        summaries.push(MethodSummary {
            method: label.to_string(),
            reports,
            stats,
        });
    }
    let summary = Summary {
        dir: dir.clone(),
        seeds: args.seeds.clone(),
        methods: summaries,
    };
    write_text(&dir.join("table.csv"), &summary.table_csv(exp.metrics()))?;
    write_text(&dir.join("runs.csv"), &runs)?;
    write_text(&dir.join("table.txt"), &summary.pretty(exp.metrics()))?;
    Ok(summary)
}
