//! In-browser playground: two antipodal blobs, a small flow trained on
//! demand, and trajectories of clicked points.
//!
//! [`Playground`] holds the logic and runs natively; [`Demo`] is its
//! wasm-bindgen face.

use dfm::autodiff::Tensor;
use dfm::data::{blob_setup, BlobSpec, PresetData, BLOB_SCALE};
use dfm::flow::{integrate, integrate_batch, train, Mode, OdeMethod, TrainConfig, VelocityField};
use dfm::metrics::{evaluate, EvalInputs, EvalOptions};
use wasm_bindgen::prelude::*;

/// Integration steps used for every drawn path.
pub const STEPS: usize = 60;

pub struct Playground {
    data: PresetData,
    seed: u64,
    field: Option<VelocityField>,
}

/// A few seconds of training. Learning rates are raised over the preset's
/// to make up for the short schedule.
pub fn demo_config(mode: Mode, iters: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        interp_iters: iters,
        fm_iters: iters,
        batch_size: 256,
        hidden: vec![48, 48],
        interp_hidden: vec![48, 48],
        lr_interp: 4e-4,
        lr_velocity: 3e-3,
        ..TrainConfig::for_preset(dfm::data::Preset::Blobs2d)
    }
}

fn flat(m: &Tensor, limit: usize) -> Vec<f64> {
    m.rows_iter().take(limit).flatten().copied().collect()
}

impl Playground {
    pub fn new(seed: u64, samples: usize) -> Result<Self, String> {
        let spec = BlobSpec::antipodal(2, BLOB_SCALE, samples.max(8), seed).map_err(|e| e.to_string())?;
        let data = blob_setup(&spec, 200).map_err(|e| e.to_string())?;
        Ok(Self { data, seed, field: None })
    }

    pub fn is_trained(&self) -> bool {
        self.field.is_some()
    }

    /// `[x0, y0, x1, y1, ..]` of up to `limit` sources of condition `q`.
    pub fn sources(&self, q: usize, limit: usize) -> Vec<f64> {
        flat(self.data.dataset.source(q), limit)
    }

    pub fn targets(&self, q: usize, limit: usize) -> Vec<f64> {
        flat(self.data.dataset.target(q), limit)
    }

    pub fn train(&mut self, mode: &str, iters: usize) -> Result<(), String> {
        let mode: Mode = mode.parse().map_err(|e: dfm::Error| e.to_string())?;
        let cfg = demo_config(mode, iters.max(1), self.seed);
        let trained = train(&cfg, &self.data.dataset, None).map_err(|e| e.to_string())?;
        self.field = Some(trained.velocity);
        Ok(())
    }

    fn field(&self) -> Result<&VelocityField, String> {
        self.field.as_ref().ok_or_else(|| "train a model first".to_string())
    }

    /// Path of one point: `STEPS + 1` states, flattened.
    pub fn path(&self, x: f64, y: f64) -> Result<Vec<f64>, String> {
        let traj = integrate(self.field()?, &[x, y], STEPS, OdeMethod::Euler).map_err(|e| e.to_string())?;
        Ok(traj.states.concat())
    }

    /// Paths of the first `n` evaluation sources of condition `q`, laid out
    /// sample-major: `n * (STEPS + 1)` states.
    pub fn paths(&self, q: usize, n: usize) -> Result<Vec<f64>, String> {
        let split = self.data.eval.as_ref().expect("blob setup has a split");
        let x = &split.x[q];
        let n = n.min(x.rows()).max(1);
        let start = x.select_rows(&(0..n).collect::<Vec<_>>());
        let states = integrate_batch(self.field()?, &start, STEPS, OdeMethod::Euler).map_err(|e| e.to_string())?;
        let mut out = Vec::with_capacity(n * (STEPS + 1) * 2);
        for i in 0..n {
            for s in &states {
                out.extend_from_slice(s.row(i));
            }
        }
        Ok(out)
    }

    /// `[emd, translation error, cross-cluster rate]` on the paired split.
    pub fn scores(&self) -> Result<Vec<f64>, String> {
        let inputs = EvalInputs {
            dataset: &self.data.dataset,
            eval: self.data.eval.as_ref(),
            target_centers: Some(&self.data.target_centers),
            surface: None,
        };
        let options = EvalOptions {
            steps: STEPS,
            size: 200,
            seed: self.seed,
            ..EvalOptions::default()
        };
        let r = evaluate(self.field()?, &inputs, &options, serde_json::Value::Null).map_err(|e| e.to_string())?;
        Ok(vec![r.emd_mean, r.te.unwrap_or(f64::NAN), r.cross_cluster_rate.unwrap_or(f64::NAN)])
    }
}

#[wasm_bindgen]
pub struct Demo(Playground);

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, samples: u32) -> Result<Demo, JsValue> {
        Playground::new(u64::from(seed), samples as usize).map(Demo).map_err(js)
    }

    pub fn steps() -> u32 {
        STEPS as u32
    }

    pub fn sources(&self, q: u32, limit: u32) -> Vec<f64> {
        self.0.sources(q as usize, limit as usize)
    }

    pub fn targets(&self, q: u32, limit: u32) -> Vec<f64> {
        self.0.targets(q as usize, limit as usize)
    }

    /// `mode` is `fm-cond`, `fm-cond-ot` or `dfm-two-phase`.
    pub fn train(&mut self, mode: &str, iters: u32) -> Result<(), JsValue> {
        self.0.train(mode, iters as usize).map_err(js)
    }

    pub fn path(&self, x: f64, y: f64) -> Result<Vec<f64>, JsValue> {
        self.0.path(x, y).map_err(js)
    }

    pub fn paths(&self, q: u32, n: u32) -> Result<Vec<f64>, JsValue> {
        self.0.paths(q as usize, n as usize).map_err(js)
    }

    pub fn scores(&self) -> Result<Vec<f64>, JsValue> {
        self.0.scores().map_err(js)
    }
}
