//! The `gen`, `train`, `translate` and `eval` subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dfm::autodiff::Tensor;
use dfm::checkpoint::Checkpoint;
use dfm::coupling::ConditionalDataset;
use dfm::data::{blob_setup, preset, read_dataset, read_points, write_dataset, write_points, BlobSpec, EvalSplit, Preset, PresetData, EVAL_SAMPLES};
use dfm::flow::{integrate_batch, train as train_model, write_trajectories_csv, OdeMethod, Trained, VectorField};
use dfm::metrics::{evaluate, EvalInputs, EvalOptions, EvalReport};
use dfm::surface::{load_xyz, write_xyz};
use serde::Serialize;

use crate::config::{output_dir, RunConfig};
use crate::{CliError, Result};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes through `f` into `path`, flushing before returning.
pub(crate) fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w).map_err(|e| CliError::io(path, e))
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e)))
}

#[derive(Clone, Debug)]
pub struct GenArgs {
    pub preset: Option<Preset>,
    /// JSON blob specification, used instead of a preset.
    pub spec: Option<PathBuf>,
    /// Overrides the preset default (0) or the spec file's seed.
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct GenManifest<'a> {
    source: String,
    seed: u64,
    dim: usize,
    conditions: usize,
    sources_per_condition: Vec<usize>,
    targets_per_condition: Vec<usize>,
    spec: Option<&'a BlobSpec>,
    source_centers: &'a [Vec<f64>],
    target_centers: &'a [Vec<f64>],
    files: Vec<&'static str>,
}

/// Writes `dataset.csv`, `eval.csv` (blobs), `surface.xyz` (swarm) and
/// `manifest.json` into the output directory, which is returned.
pub fn gen(args: &GenArgs) -> Result<PathBuf> {
    let (data, seed, spec, source) = match (&args.preset, &args.spec) {
        (Some(p), None) => {
            let seed = args.seed.unwrap_or(0);
            (preset(*p, seed)?, seed, None, p.to_string())
        }
        (None, Some(path)) => {
            let mut spec: BlobSpec = serde_json::from_reader(open(path)?)?;
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            (blob_setup(&spec, EVAL_SAMPLES)?, spec.seed, Some(spec), path.display().to_string())
        }
        _ => return Err(CliError::Usage("give exactly one of --preset or --spec".into())),
    };
    let dir = output_dir(&args.out);
    let mut files = vec!["dataset.csv"];
    write_file(&dir.join("dataset.csv"), |w| Ok(write_dataset(&data.dataset, w)?))?;
    if let Some(e) = &data.eval {
        write_file(&dir.join("eval.csv"), |w| Ok(e.write_csv(w)?))?;
        files.push("eval.csv");
    }
    if let Some(s) = &data.surface {
        write_file(&dir.join("surface.xyz"), |w| Ok(write_xyz(s, w)?))?;
        files.push("surface.xyz");
    }
    files.push("manifest.json");
    let ds = &data.dataset;
    let manifest = GenManifest {
        source,
        seed,
        dim: ds.dim(),
        conditions: ds.num_conditions(),
        sources_per_condition: ds.sources().iter().map(Tensor::rows).collect(),
        targets_per_condition: ds.targets().iter().map(Tensor::rows).collect(),
        spec: spec.as_ref(),
        source_centers: &data.source_centers,
        target_centers: &data.target_centers,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

fn condition_means(ms: &[Tensor]) -> Vec<Vec<f64>> {
    ms.iter()
        .map(|m| {
            let mut c = vec![0.0; m.cols()];
            for r in m.rows_iter() {
                for (a, b) in c.iter_mut().zip(r) {
                    *a += b;
                }
            }
            c.iter().map(|v| v / m.rows() as f64).collect()
        })
        .collect()
}

/// A preset, or dataset/eval/surface files with per-condition means as
/// centres.
pub fn load_data(
    preset_name: Option<Preset>,
    seed: u64,
    data: Option<&Path>,
    eval_data: Option<&Path>,
    surface: Option<&Path>,
) -> Result<PresetData> {
    let mut out = match (data, preset_name) {
        (Some(path), _) => {
            let dataset: ConditionalDataset = read_dataset(open(path)?)?;
            PresetData {
                source_centers: condition_means(dataset.sources()),
                target_centers: condition_means(dataset.targets()),
                dataset,
                eval: None,
                surface: None,
            }
        }
        (None, Some(p)) => preset(p, seed)?,
        (None, None) => return Err(CliError::Usage("give a preset or a dataset file".into())),
    };
    if let Some(path) = eval_data {
        out.eval = Some(EvalSplit::read_csv(open(path)?)?);
    }
    if let Some(path) = surface {
        out.surface = Some(load_xyz(path)?);
    }
    Ok(out)
}

/// Trains per `cfg` and writes checkpoints, `log.csv` and the config echo
/// (`config.txt`, plus `config.input.txt` holding `input` verbatim).
pub fn train(cfg: &RunConfig, input: Option<&str>) -> Result<(PathBuf, Trained)> {
    cfg.check_paths()?;
    let data = load_data(
        cfg.preset,
        cfg.train.seed,
        cfg.data.as_deref(),
        cfg.eval_data.as_deref(),
        cfg.surface.as_deref(),
    )?;
    let dir = output_dir(&cfg.out);
    let trained = train_into(cfg, &data, input, &dir)?;
    Ok((dir, trained))
}

/// [`train`] on already-loaded data, writing into `dir` as given.
pub fn train_into(cfg: &RunConfig, data: &PresetData, input: Option<&str>, dir: &Path) -> Result<Trained> {
    let trained = train_model(&cfg.train, &data.dataset, data.surface.as_ref())?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    if let Some(text) = input {
        write_text(&dir.join("config.input.txt"), text)?;
    }
    save_checkpoints(&dir, cfg.train.seed, &trained)?;
    write_file(&dir.join("log.csv"), |w| Ok(trained.log.write_csv(w)?))?;
    Ok(trained)
}

pub fn save_checkpoints(dir: &Path, seed: u64, trained: &Trained) -> Result<()> {
    let it = trained.iterations;
    Checkpoint::velocity(&trained.velocity, Some(&trained.optimizer), seed, it).save(&dir.join("velocity.json"))?;
    if let Some(interp) = &trained.interp {
        Checkpoint::interpolant(interp, None, seed, it).save(&dir.join("interpolant.json"))?;
    }
    if let Some(split) = &trained.split {
        for (q, v) in split.velocities.iter().enumerate() {
            Checkpoint::velocity(v, None, seed, it)
                .with_condition(q)
                .save(&dir.join(format!("velocity-{q}.json")))?;
        }
        for (q, i) in split.interpolants.iter().enumerate() {
            Checkpoint::interpolant(i, None, seed, it)
                .with_condition(q)
                .save(&dir.join(format!("interpolant-{q}.json")))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TranslateArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub steps: usize,
    pub method: OdeMethod,
    pub trajectory: Option<PathBuf>,
}

/// Pushes every input row through the checkpointed flow; returns the output
/// path.
pub fn translate(args: &TranslateArgs) -> Result<PathBuf> {
    let field = Checkpoint::load(&args.checkpoint)?.into_velocity()?;
    let x = read_points(open(&args.input)?)?;
    if x.cols() != field.dim() {
        return Err(dfm::Error::DimMismatch {
            context: format!("input {}", args.input.display()),
            expected: field.dim(),
            got: x.cols(),
        }
        .into());
    }
    let states = integrate_batch(&field, &x, args.steps, args.method)?;
    let out = output_dir(&args.out);
    write_file(&out, |w| Ok(write_points(states.last().expect("initial state"), w)?))?;
    if let Some(t) = &args.trajectory {
        write_file(&output_dir(t), |w| Ok(write_trajectories_csv(w, &states)?))?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub preset: Option<Preset>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub surface: Option<PathBuf>,
    /// Fail instead of skipping TE when no paired split is available.
    pub require_te: bool,
    pub options: EvalOptions,
    pub out: PathBuf,
}

pub fn eval(args: &EvalArgs) -> Result<(PathBuf, EvalReport)> {
    let field = Checkpoint::load(&args.checkpoint)?.into_velocity()?;
    let data = load_data(
        args.preset,
        args.seed,
        args.data.as_deref(),
        args.eval_data.as_deref(),
        args.surface.as_deref(),
    )?;
    if args.require_te && data.eval.is_none() {
        return Err(CliError::Usage(
            "translation error needs a paired split (--eval-data or a blob preset)".into(),
        ));
    }
    let config = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "preset": args.preset.map(|p| p.to_string()),
        "seed": args.seed,
        "data": args.data.as_ref().map(|p| p.display().to_string()),
        "eval_data": args.eval_data.as_ref().map(|p| p.display().to_string()),
        "surface": args.surface.as_ref().map(|p| p.display().to_string()),
    });
    let report = evaluate_field(&field, &data, &args.options, config)?;
    let out = output_dir(&args.out);
    write_json(&out, &report)?;
    Ok((out, report))
}

pub fn evaluate_field<F: VectorField + ?Sized>(
    field: &F,
    data: &PresetData,
    options: &EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let inputs = EvalInputs {
        dataset: &data.dataset,
        eval: data.eval.as_ref(),
        target_centers: Some(&data.target_centers),
        surface: data.surface.as_ref(),
    };
    Ok(evaluate(field, &inputs, options, config)?)
}
