//! Super-resolution by latent optimisation over a fixed bank: search for
//! latents whose generated image, bicubically downsampled, matches the LR
//! input.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use glean_autograd::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{Bank, LatentMatrix};
use crate::error::{invalid, shape, GleanError, Result};
use crate::imaging::{resize_var, ImageTensor};
use crate::losses::mse_loss;
use crate::model::GleanModel;
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::params::{Binder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// One d-vector shared by all k levels.
    Single,
    /// An independent d-vector per level.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub opt_lr: f64,
    /// Step size reached at the last step under cosine annealing; equal to
    /// `opt_lr` for a constant step.
    pub opt_lr_min: f64,
    pub mode: LatentMode,
    /// Weight of a `mean(z²)` penalty added to the objective; 0 disables it.
    pub latent_prior: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 200, opt_lr: 0.1, opt_lr_min: 0.05, mode: LatentMode::Multi, latent_prior: 0.0, seed: 0, adam: AdamConfig::default() }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("inversion needs at least one step"));
        }
        if !(self.opt_lr > 0.0) || !(self.opt_lr_min >= 0.0) || self.opt_lr_min > self.opt_lr || !(self.latent_prior >= 0.0) {
            return Err(invalid(format!(
                "bad inversion rates: opt_lr {} opt_lr_min {} latent_prior {}",
                self.opt_lr, self.opt_lr_min, self.latent_prior
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub image: ImageTensor,
    pub latents: LatentMatrix,
    /// Objective before each update, one entry per step.
    pub trace: Vec<TracePoint>,
    /// Objective at the returned latents.
    pub final_objective: f64,
}

/// Trailing moving average with the given window.
pub fn smoothed(trace: &[TracePoint], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (i, p) in trace.iter().enumerate() {
        sum += p.objective;
        if i >= w {
            sum -= trace[i - w].objective;
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn expand<'t>(free: Var<'t>, mode: LatentMode, k: usize) -> Result<Var<'t>> {
    match mode {
        LatentMode::Multi => Ok(free),
        LatentMode::Single => Ok(Var::concat(&vec![free; k], 1)?),
    }
}

fn objective<'t>(bank: &Bank, b: &Binder<'t>, free: Var<'t>, lr: &ImageTensor, cfg: &InversionConfig) -> Result<(Var<'t>, Var<'t>)> {
    let latents = expand(free, cfg.mode, bank.levels())?;
    let hr = bank.generate(b, latents)?;
    let down = resize_var(hr, lr.height(), lr.width())?;
    let mut obj = mse_loss(down, b.tape().constant(lr.tensor().clone()))?;
    if cfg.latent_prior > 0.0 {
        obj = obj.add(free.square().mean().scale(cfg.latent_prior as f32))?;
    }
    Ok((obj, hr))
}

/// Optimise latents for `lr` with Adam. Bank parameters are bound as
/// constants and never written.
pub fn invert(lr: &ImageTensor, bank: &Bank, store: &ParamStore, cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    let (k, d, n) = (bank.levels(), bank.cfg.latent_dim, lr.batch());
    let out_res = bank.cfg.out_res;
    if lr.height() > out_res || lr.width() > out_res {
        return Err(shape(format!("LR input {}x{} exceeds bank output {out_res}", lr.height(), lr.width())));
    }
    let rows = match cfg.mode {
        LatentMode::Single => 1,
        LatentMode::Multi => k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = LatentMatrix::standard_normal(n, rows, d, &mut rng).into_tensor();
    let mut adam = AdamState::new(z.numel());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let b = Binder::new(&tape, store, false);
        let free = tape.var(z.clone());
        let (obj, _) = objective(bank, &b, free, lr, cfg)?;
        let value = obj.value().item() as f64;
        trace.push(TracePoint { step, objective: value });
        if !value.is_finite() {
            return Err(GleanError::NonFinite { step, detail: format!("inversion objective {value}; last objectives {:?}", &trace[trace.len().saturating_sub(5)..]) });
        }
        let mut grads = tape.backward(obj);
        let g = grads.take(free).ok_or_else(|| invalid("latents received no gradient"))?;
        let lr_step = cosine_lr(step, cfg.steps, cfg.opt_lr, cfg.opt_lr_min)?;
        adam.update(&cfg.adam, z.data_mut(), g.data(), lr_step as f32, step as u64 + 1);
    }
    let tape = Tape::new();
    let b = Binder::new(&tape, store, false);
    let (obj, hr) = objective(bank, &b, tape.constant(z.clone()), lr, cfg)?;
    let final_objective = obj.value().item() as f64;
    let latents = expand(tape.constant(z), cfg.mode, k)?.value().as_ref().clone();
    Ok(Inversion {
        image: ImageTensor::new(hr.value().as_ref().clone())?,
        latents: LatentMatrix::new(latents)?,
        trace,
        final_objective,
    })
}

pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    for p in trace {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    /// Mean wall-clock milliseconds per image.
    pub glean_ms: f64,
    pub invert_ms: f64,
    pub ratio: f64,
    pub steps: usize,
}

/// Per-image wall clock of one GLEAN forward pass against one inversion,
/// both on the calling thread.
pub fn compare_speed(lr_batch: &ImageTensor, model: &GleanModel, cfg: &InversionConfig) -> Result<SpeedReport> {
    let n = lr_batch.batch();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let items: Vec<ImageTensor> = (0..n).map(|i| lr_batch.item(i)).collect::<Result<_>>()?;
    // One untimed pass so allocation warm-up is not charged to either side.
    model.infer(&items[0])?;
    let t = Instant::now();
    for it in &items {
        model.infer(it)?;
    }
    let glean_ms = t.elapsed().as_secs_f64() * 1e3 / n as f64;
    let t = Instant::now();
    for it in &items {
        invert(it, &model.bank, &model.store, cfg)?;
    }
    let invert_ms = t.elapsed().as_secs_f64() * 1e3 / n as f64;
    Ok(SpeedReport { glean_ms, invert_ms, ratio: invert_ms / glean_ms, steps: cfg.steps })
}

/// Separates planted draws from inversion starts that share a seed.
const PLANT_STREAM: u64 = 0x504C_414E;

/// Plant latents, render and downsample them, and return `(lr, z₀)`.
pub fn planted_problem(bank: &Bank, store: &ParamStore, lr_res: usize, seed: u64) -> Result<(ImageTensor, LatentMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PLANT_STREAM);
    let z = LatentMatrix::standard_normal(1, bank.levels(), bank.cfg.latent_dim, &mut rng);
    let tape = Tape::new();
    let b = Binder::new(&tape, store, false);
    let hr = bank.generate(&b, tape.constant(z.tensor().clone()))?;
    let lr = resize_var(hr, lr_res, lr_res)?;
    Ok((ImageTensor::new(lr.value().as_ref().clone())?, z))
}
