use dfm::autodiff::Tensor;
use dfm::checkpoint::Checkpoint;
use dfm::data::{preset, Preset};
use dfm::flow::{integrate, translate, train, FnField, Mode, OdeMethod, TrainConfig};
use dfm::interpolant::LearnableInterpolant;
use dfm::metrics::{evaluate, EvalInputs, EvalOptions};

fn path_error(interp: &LearnableInterpolant, x: &Tensor, y: &Tensor, steps: usize, method: OdeMethod) -> f64 {
    let field = FnField::new(2, |_z: &[f64], t: f64| interp.dt(x, y, &[t], 1e-5).unwrap().into_data());
    let traj = integrate(&field, x.data(), steps, method).unwrap();
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(&t, s)| {
            let want = interp.eval(x, y, &[t]).unwrap();
            s.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn integrating_the_path_velocity_recovers_the_path() {
    let interp = LearnableInterpolant::new(2, &[16, 16], 4, true, 2.0).unwrap();
    let x = Tensor::from_rows(&[[1.5, -0.5]]).unwrap();
    let y = Tensor::from_rows(&[[-2.0, 1.0]]).unwrap();
    let coarse = path_error(&interp, &x, &y, 20, OdeMethod::Euler);
    let fine = path_error(&interp, &x, &y, 200, OdeMethod::Euler);
    assert!(fine < coarse / 5.0, "euler {coarse} -> {fine}");
    let rk4 = path_error(&interp, &x, &y, 100, OdeMethod::Rk4);
    // SeLU's kink leaves the path piecewise smooth in t, which caps the
    // observed rk4 order well below four.
    assert!(rk4 < fine / 20.0, "rk4 {rk4} vs euler {fine}");
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        interp_iters: 15,
        fm_iters: 15,
        batch_size: 32,
        hidden: vec![8],
        interp_hidden: vec![8],
        ema_decay: 0.9,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpointed_field_translates_identically() {
    let data = preset(Preset::Blobs2d, 3).unwrap();
    let trained = train(&tiny_config(Mode::DfmTwoPhase), &data.dataset, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("velocity.json");
    Checkpoint::velocity(&trained.velocity, Some(&trained.optimizer), 11, trained.iterations)
        .save(&path)
        .unwrap();
    let restored = Checkpoint::load(&path).unwrap().into_velocity().unwrap();
    let x = data.eval.as_ref().unwrap().x[0].clone();
    let a = translate(&trained.velocity, &x, 20, OdeMethod::Euler).unwrap();
    let b = translate(&restored, &x, 20, OdeMethod::Euler).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn evaluation_reports_every_requested_metric() {
    let data = preset(Preset::Blobs2d, 0).unwrap();
    let trained = train(&tiny_config(Mode::FmCond), &data.dataset, None).unwrap();
    let inputs = EvalInputs {
        dataset: &data.dataset,
        eval: data.eval.as_ref(),
        target_centers: Some(&data.target_centers),
        surface: None,
    };
    let opts = EvalOptions {
        steps: 10,
        size: 40,
        ..EvalOptions::default()
    };
    let report = evaluate(&trained.velocity, &inputs, &opts, serde_json::json!({"mode": "fm-cond"})).unwrap();
    assert_eq!(report.emd.len(), 2);
    assert_eq!(report.samples, vec![40, 40]);
    assert!(report.emd.iter().all(|&e| e >= 0.0));
    assert!(report.te.unwrap() >= 0.0);
    assert!((0.0..=1.0).contains(&report.cross_cluster_rate.unwrap()));
    assert!(report.sa.is_none());
    let again = evaluate(&trained.velocity, &inputs, &opts, serde_json::json!({"mode": "fm-cond"})).unwrap();
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn evaluation_on_the_swarm_reports_adherence() {
    let data = preset(Preset::Swarm, 0).unwrap();
    let field = FnField::new(3, |_z: &[f64], _t: f64| vec![0.0; 3]);
    let inputs = EvalInputs {
        dataset: &data.dataset,
        eval: None,
        target_centers: None,
        surface: data.surface.as_ref(),
    };
    let opts = EvalOptions {
        steps: 5,
        size: 20,
        ..EvalOptions::default()
    };
    let report = evaluate(&field, &inputs, &opts, serde_json::Value::Null).unwrap();
    assert!(report.te.is_none());
    assert!(report.sa.unwrap() >= 0.0);
}
