use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfm::autodiff::Tensor;
use dfm::checkpoint::Checkpoint;
use dfm::data::{read_dataset, read_points, write_points, Preset};
use dfm::flow::{OdeMethod, VelocityField};
use dfm::metrics::{EvalOptions, EvalReport};
use dfm::nn::MlpParams;
use dfm_cli::commands::{self, EvalArgs, TranslateArgs};
use dfm_cli::reproduce::{reproduce, Experiment, ReproduceArgs};

fn dfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfm"))
        .args(args)
        .env_remove("DFM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(mode: &str) -> Vec<String> {
    [
        format!("mode={mode}"),
        "fm_iters=4".into(),
        "interp_iters=4".into(),
        "batch_size=16".into(),
        "hidden=8,8".into(),
        "interp_hidden=8,8".into(),
    ]
    .to_vec()
}

fn save_field(path: &Path, net: MlpParams) {
    let field = VelocityField::from_net(net).unwrap();
    Checkpoint::velocity(&field, None, 0, 0).save(path).unwrap();
}

fn zero_field(dim: usize) -> MlpParams {
    let mut net = MlpParams::init(&[dim + 1, 8, dim], 1).unwrap();
    let n = net.param_count();
    net.set_flat(&vec![0.0; n]).unwrap();
    net
}

/// `v(z, t) = πJz`: a half turn over unit time, which carries every `x` to
/// `-x` exactly.
fn half_turn() -> MlpParams {
    let w = Tensor::matrix(2, 3, vec![0.0, -PI, 0.0, PI, 0.0, 0.0]).unwrap();
    MlpParams::from_layers(vec![w], vec![Tensor::zeros(&[1, 2])]).unwrap()
}

#[test]
fn gen_writes_a_reproducible_preset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dfm(&["gen", "--preset", "blobs2d", "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ds = read_dataset(fs::read_to_string(a.join("dataset.csv")).unwrap().as_bytes()).unwrap();
    assert_eq!(ds.num_conditions(), 2);
    assert_eq!((ds.sources().len(), ds.targets().len()), (2, 2));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    for f in ["dataset.csv", "eval.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_from_a_spec_file_and_swarm_surface() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"dim": 3, "means": [[0, 0, 0], [4, 0, 0], [0, 4, 0]], "variance": 0.5, "samples": 50, "seed": 1}"#,
    )
    .unwrap();
    let out = dir.path().join("spec-out");
    assert!(dfm(&["gen", "--spec", s(&spec), "--seed", "9", "--out", s(&out)]).status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["conditions"], 3);

    let swarm = dir.path().join("swarm");
    assert!(dfm(&["gen", "--preset", "swarm", "--out", s(&swarm)]).status.success());
    assert!(swarm.join("surface.xyz").exists());
}

#[test]
fn gen_into_an_unwritable_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    let o = dfm(&["gen", "--preset", "blobs2d", "--out", s(&file.join("below"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn output_root_relocates_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dfm"))
        .args(["gen", "--preset", "blobs2d", "--out", "rel"])
        .env("DFM_OUTPUT_ROOT", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("rel/dataset.csv").exists());
}

#[test]
fn fm_cond_training_writes_velocity_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let text = "# tiny\npreset = blobs2d\nseed = 2\n";
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train".to_string(), "--config".into(), s(&cfg).into()];
    for kv in tiny("fm-cond").into_iter().chain([format!("out={}", s(&out))]) {
        args.push("--set".into());
        args.push(kv);
    }
    let o = dfm(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("velocity.json").exists());
    assert!(!out.join("interpolant.json").exists());
    assert_eq!(fs::read_to_string(out.join("config.input.txt")).unwrap(), text);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("mode = fm-cond") && echo.contains("seed = 2"));
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn dfm_training_writes_both_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train".to_string()];
    for kv in tiny("dfm-two-phase").into_iter().chain(["preset=blobs3d".into(), format!("out={}", s(&out))]) {
        args.push("--set".into());
        args.push(kv);
    }
    let o = dfm(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let interp = Checkpoint::load(&out.join("interpolant.json")).unwrap().into_interpolant().unwrap();
    assert_eq!(interp.dim(), 3);
}

#[test]
fn bad_configs_are_usage_errors() {
    let o = dfm(&["train", "--set", "preset=blobs2d", "--set", "mode=gan"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
    assert!(!dfm(&["train", "--set", "preset=blobs2d", "--set", "colour=red"]).status.success());
    assert!(!dfm(&["train", "--set", "nonsense"]).status.success());
    assert!(!dfm(&["train", "--set", "data=/does/not/exist.csv"]).status.success());
}

#[test]
fn zero_velocity_translation_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero.json");
    save_field(&ckpt, zero_field(2));
    let x = Tensor::from_rows(&[[1.5, -2.0], [0.0, 3.25], [-7.0, 0.5]]).unwrap();
    let input = dir.path().join("in.csv");
    let mut buf = Vec::new();
    write_points(&x, &mut buf).unwrap();
    fs::write(&input, buf).unwrap();
    let args = TranslateArgs {
        checkpoint: ckpt,
        input,
        out: dir.path().join("out.csv"),
        steps: 7,
        method: OdeMethod::Rk4,
        trajectory: Some(dir.path().join("traj.csv")),
    };
    let out = commands::translate(&args).unwrap();
    let y = read_points(fs::read_to_string(out).unwrap().as_bytes()).unwrap();
    assert_eq!(y, x);
    let traj = fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 3 * (7 + 1));
}

#[test]
fn translation_rejects_a_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero3.json");
    save_field(&ckpt, zero_field(3));
    let input = dir.path().join("in.csv");
    fs::write(&input, "dim_0,dim_1\n1,2\n").unwrap();
    let o = dfm(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&dir.path().join("o.csv"))]);
    assert!(!o.status.success());
}

fn oracle_eval(dir: &Path, out: &str) -> (PathBuf, EvalReport) {
    let ckpt = dir.join("half-turn.json");
    save_field(&ckpt, half_turn());
    commands::eval(&EvalArgs {
        checkpoint: ckpt,
        preset: Some(Preset::Blobs2d),
        seed: 0,
        data: None,
        eval_data: None,
        surface: None,
        require_te: true,
        options: EvalOptions {
            steps: 200,
            method: OdeMethod::Rk4,
            size: 200,
            seed: 5,
        },
        out: dir.join(out),
    })
    .unwrap()
}

#[test]
fn the_exact_reflection_flow_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (path, report) = oracle_eval(dir.path(), "a.json");
    let te = report.te.unwrap();
    assert!(te < 0.05, "te {te}");
    // Independent target draws keep EMD at sampling-noise level.
    assert!(report.emd_mean < 1.0, "emd {}", report.emd_mean);
    assert_eq!(report.cross_cluster_rate, Some(0.0));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    for key in ["emd", "emd_mean", "te", "cross_cluster_rate", "sa", "samples", "options", "config"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let (again, _) = oracle_eval(dir.path(), "b.json");
    assert_eq!(fs::read(path).unwrap(), fs::read(again).unwrap());
}

#[test]
fn requiring_te_without_a_paired_split_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dfm(&["gen", "--preset", "blobs2d", "--out", s(&dir.path().join("d"))]).status.success());
    let ckpt = dir.path().join("zero.json");
    save_field(&ckpt, zero_field(2));
    let data = dir.path().join("d/dataset.csv");
    let base = ["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--size", "20"];
    let report = dir.path().join("r.json");
    let mut strict = base.to_vec();
    strict.extend(["--require-te", "--out", s(&report)]);
    assert!(!dfm(&strict).status.success());
    assert!(!report.exists());
    let mut paired = strict.clone();
    let split = dir.path().join("d/eval.csv");
    paired.extend(["--eval-data", s(&split)]);
    let o = dfm(&paired);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: EvalReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(r.te.is_some());
}

fn tiny_reproduce(exp: Experiment, out: &Path) -> ReproduceArgs {
    let mut overrides: Vec<(String, String)> =
        tiny("fm-cond").into_iter().skip(1).map(|kv| dfm_cli::config::parse_override(&kv).unwrap()).collect();
    overrides.extend([("eval_size".into(), "30".into()), ("ode_steps".into(), "5".into())]);
    ReproduceArgs {
        seeds: vec![0, 1],
        overrides,
        trajectories: 3,
        ..ReproduceArgs::new(exp, out)
    }
}

#[test]
fn table_reproduction_emits_three_methods_by_two_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let summary = reproduce(&tiny_reproduce(Experiment::Table1_2d, dir.path())).unwrap();
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,emd_mean,emd_std,te_mean,te_std");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["fm-cond", "fm-cond-ot", "dfm"]);
    assert_eq!(fs::read_to_string(dir.path().join("runs.csv")).unwrap().lines().count(), 1 + 3 * 2);
    for m in &summary.methods {
        assert_eq!(m.reports.len(), 2);
        let run = dir.path().join(&m.method).join("seed-1");
        assert!(run.join("config.txt").exists() && run.join("report.json").exists());
        assert!(dir.path().join(&m.method).join("trajectories.svg").exists());
    }
    let traj = fs::read_to_string(dir.path().join("dfm/trajectories-q0.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 3 * (5 + 1));
}

#[test]
fn reflection_figure_includes_linear_crossings() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = tiny_reproduce(Experiment::FigReflection, dir.path());
    args.seeds = vec![4];
    reproduce(&args).unwrap();
    let linear = fs::read_to_string(dir.path().join("linear/trajectories-q0.csv")).unwrap();
    let rows: Vec<Vec<f64>> = linear
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    // Each straight path ends at the reflection of its start.
    for path in rows.chunks(6) {
        let (a, b) = (&path[0], &path[5]);
        assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
    }
    assert!(fs::read_to_string(dir.path().join("table.csv")).unwrap().starts_with("method,cross_cluster_rate_mean"));
}

#[test]
fn swarm_reproduction_reports_sa_and_projects_three_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = tiny_reproduce(Experiment::Swarm, dir.path());
    args.seeds = vec![0];
    let summary = reproduce(&args).unwrap();
    let labels: Vec<&str> = summary.methods.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(labels, ["dfm", "dfm-no-surface", "fm-cond-ot"]);
    assert!(summary.methods.iter().all(|m| m.reports[0].sa.is_some()));
    for q in 0..2 {
        assert!(dir.path().join(format!("dfm/trajectories-q{q}.csv")).exists());
    }
    let svg = fs::read_to_string(dir.path().join("dfm/trajectories.svg")).unwrap();
    assert!(svg.contains("(x-y)") && svg.contains("(x-z)"));
    let echo = fs::read_to_string(dir.path().join("dfm-no-surface/seed-0/config.txt")).unwrap();
    assert!(echo.contains("lambda2 = 0"));
}
