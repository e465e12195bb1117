//! Bank pretraining and GLEAN training: batch sampling, the two GAN loops,
//! JSON-lines logs and periodic checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use glean_autograd::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{is_frozen, BankConfig, BankModel, LatentMatrix, BANK_PREFIX, DISC_PREFIX};
use crate::blocks::Discriminator;
use crate::error::{invalid, GleanError, Result};
use crate::imaging::{make_pair, save_image, tile_grid, ImageSet, ImageTensor};
use crate::losses::{discriminator_loss, generator_adv_loss, total_generator_loss, FeatureNet, LossWeights, FEATURE_NET_SEED};
use crate::metrics::{psnr, PSNR_PEAK};
use crate::model::{GleanConfig, GleanModel};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::{Binder, ParamStore};

/// Number of fixed latents rendered into each pretraining sample grid.
pub const SAMPLE_GRID: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Build batches on the training thread instead of a prefetch thread.
    pub deterministic: bool,
    pub checkpoint_every: usize,
    /// Pretraining only: interval between sample grids (0 disables them).
    pub sample_every: usize,
    /// GLEAN only: start from the pretraining discriminator instead of a
    /// fresh one.
    pub reuse_disc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            lr_init: 1e-4,
            lr_min: 1e-7,
            adam: AdamConfig::default(),
            seed: 0,
            deterministic: false,
            checkpoint_every: 1000,
            sample_every: 1000,
            reuse_disc: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for bank pretraining, which runs longer.
    pub fn bank_default() -> Self {
        Self { iterations: 20000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return Err(invalid(format!("need 0 <= lr_min <= lr_init and lr_init > 0, got {} / {}", self.lr_min, self.lr_init)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        cosine_lr(step, self.iterations, self.lr_init, self.lr_min)
    }
}

/// Everything `pretrain-bank` reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default = "TrainConfig::bank_default")]
    pub train: TrainConfig,
    /// Generator loss `-log σ(D(G(z)))` instead of `log(1 - σ(D(G(z))))`.
    #[serde(default)]
    pub non_saturating: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { bank: BankConfig::default(), train: TrainConfig::bank_default(), non_saturating: false }
    }
}

/// Everything `train` reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GleanTrainConfig {
    #[serde(default)]
    pub model: GleanConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// One line of the training log. Pretraining has no pixel losses and
/// writes `null` for them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_mse: Option<f64>,
    pub l_percep: Option<f64>,
    pub l_gen: f64,
    pub l_total: f64,
    pub l_disc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Validation result written next to each periodic checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub path: PathBuf,
    #[serde(with = "crate::metrics::psnr_json")]
    pub val_psnr: f64,
}

/// Where a run writes its files. `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub stem: Option<PathBuf>,
}

impl RunOutput {
    pub fn at(stem: impl Into<PathBuf>) -> Self {
        Self { stem: Some(stem.into()) }
    }

    fn with_suffix(&self, suffix: &str) -> Option<PathBuf> {
        self.stem.as_ref().map(|s| PathBuf::from(format!("{}{suffix}", s.display())))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.with_suffix(".log.jsonl")
    }

    pub fn checkpoints_path(&self) -> Option<PathBuf> {
        self.with_suffix(".checkpoints.jsonl")
    }

    pub fn step_checkpoint(&self, step: usize) -> Option<PathBuf> {
        self.with_suffix(&format!(".step{step:06}"))
    }

    pub fn samples_dir(&self) -> Option<PathBuf> {
        self.with_suffix(".samples")
    }
}

/// JSON-lines writer that also keeps the records.
struct Jsonl<T> {
    file: Option<BufWriter<File>>,
    records: Vec<T>,
}

impl<T: Serialize> Jsonl<T> {
    fn create(path: Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Self { file, records: Vec::new() })
    }

    fn push(&mut self, rec: T) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Seeded epoch-wise shuffling: every image appears once per epoch, and the
/// sequence depends only on the seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || n < batch {
            return Err(invalid(format!("cannot draw batches of {batch} from {n} images")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { rng, order, pos: 0, batch })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// One training batch; `lr` is present when a scale was requested.
pub struct Batch {
    pub hr: Tensor,
    pub lr: Option<Tensor>,
}

fn build_batch(set: &ImageSet, idx: &[usize], scale: Option<usize>) -> Result<Batch> {
    let items: Vec<&ImageTensor> = idx.iter().map(|&i| &set.images[i]).collect();
    let hr = ImageTensor::stack(&items)?;
    let lr = match scale {
        Some(s) => Some(make_pair(&hr, s)?.lr.into_tensor()),
        None => None,
    };
    Ok(Batch { hr: hr.into_tensor(), lr })
}

/// Hand `body` a batch source. Without `deterministic`, batches are built on
/// a prefetch thread; the index sequence is the same either way.
fn with_batches<R>(
    set: &ImageSet,
    cfg: &TrainConfig,
    scale: Option<usize>,
    body: impl FnOnce(&mut dyn FnMut() -> Result<Batch>) -> Result<R>,
) -> Result<R> {
    let mut sampler = BatchSampler::new(set.len(), cfg.batch_size, cfg.seed)?;
    if cfg.deterministic {
        let mut next = || build_batch(set, &sampler.next_indices(), scale);
        return body(&mut next);
    }
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
        let total = cfg.iterations;
        s.spawn(move || {
            for _ in 0..total {
                if tx.send(build_batch(set, &sampler.next_indices(), scale)).is_err() {
                    break;
                }
            }
        });
        let mut next = || rx.recv().map_err(|_| GleanError::InvalidArgument("batch prefetch thread stopped".into()))?;
        body(&mut next)
    })
}

fn ensure_finite(step: usize, values: &[(&str, f64)]) -> Result<()> {
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        let all: Vec<String> = values.iter().map(|(n, v)| format!("{n}={v}")).collect();
        return Err(GleanError::NonFinite { step, detail: format!("{name} is {v} ({})", all.join(", ")) });
    }
    Ok(())
}

fn require_resolution(set: &ImageSet, res: usize, what: &str) -> Result<()> {
    if let Some((id, img)) = set.ids.iter().zip(&set.images).find(|(_, i)| i.height() != res || i.width() != res) {
        return Err(invalid(format!("{what} expects {res}x{res} images, {id} is {}x{}", img.height(), img.width())));
    }
    Ok(())
}

/// Result of [`pretrain_bank`].
pub struct BankRun {
    pub model: BankModel,
    pub log: Vec<LogRecord>,
}

/// GAN pretraining of the bank on `train` (images at the bank resolution).
pub fn pretrain_bank(train: &ImageSet, cfg: &PretrainConfig, out: &RunOutput) -> Result<BankRun> {
    cfg.train.validate()?;
    cfg.bank.validate()?;
    let tc = &cfg.train;
    if train.len() < 2 * tc.batch_size {
        return Err(invalid(format!("corpus has {} images, pretraining needs at least {}", train.len(), 2 * tc.batch_size)));
    }
    require_resolution(train, cfg.bank.out_res, "bank pretraining")?;
    let mut model = BankModel::new(&cfg.bank)?;
    let (k, d) = (cfg.bank.levels(), cfg.bank.latent_dim);
    let mut zrng = ChaCha8Rng::seed_from_u64(tc.seed);
    zrng.set_stream(1);
    let mut grid_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    grid_rng.set_stream(2);
    let grid_z = LatentMatrix::standard_normal(SAMPLE_GRID, k, d, &mut grid_rng);
    let mut gopt = Adam::new(tc.adam);
    let mut dopt = Adam::new(tc.adam);
    let mut log = Jsonl::create(out.log_path())?;
    let start = Instant::now();

    with_batches(train, tc, None, |next| {
        for step in 0..tc.iterations {
            let lr = tc.lr_at(step)?;
            let batch = next()?;
            let z = LatentMatrix::standard_normal(tc.batch_size, k, d, &mut zrng);

            let gtape = Tape::new();
            let gb = Binder::tracking_prefix(&gtape, &model.store, BANK_PREFIX);
            let fake = model.bank.generate(&gb, gtape.constant(z.into_tensor()))?;

            let dtape = Tape::new();
            let db = Binder::tracking_prefix(&dtape, &model.store, DISC_PREFIX);
            let fake_logits = model.disc.forward(&db, dtape.constant(fake.value().as_ref().clone()))?;
            let real_logits = model.disc.forward(&db, dtape.constant(batch.hr))?;
            let l_disc = discriminator_loss(fake_logits, real_logits)?;
            let l_disc_v = l_disc.value().item() as f64;
            ensure_finite(step, &[("l_disc", l_disc_v)])?;
            let grads = db.gradients(&mut dtape.backward(l_disc));
            dopt.step(&mut model.store, grads, lr as f32)?;

            let critic = Binder::new(&gtape, &model.store, false);
            let l_gen = generator_adv_loss(model.disc.forward(&critic, fake)?, cfg.non_saturating);
            let l_gen_v = l_gen.value().item() as f64;
            ensure_finite(step, &[("l_gen", l_gen_v), ("l_disc", l_disc_v)])?;
            let grads = gb.gradients(&mut gtape.backward(l_gen));
            gopt.step(&mut model.store, grads, lr as f32)?;

            log.push(LogRecord {
                step,
                l_mse: None,
                l_percep: None,
                l_gen: l_gen_v,
                l_total: l_gen_v,
                l_disc: l_disc_v,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            let done = step + 1;
            if tc.sample_every > 0 && (done % tc.sample_every == 0 || done == tc.iterations) {
                if let Some(dir) = out.samples_dir() {
                    let imgs = model.bank.generate_images(&model.store, &grid_z)?;
                    save_image(&tile_grid(&imgs, 4)?, &dir.join(format!("step{done:06}.png")))?;
                }
            }
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.iterations {
                if let Some(p) = out.step_checkpoint(done) {
                    model.save(&p)?;
                }
            }
        }
        Ok(())
    })?;
    if let Some(stem) = &out.stem {
        model.save(stem)?;
    }
    Ok(BankRun { model, log: log.records })
}

/// Result of [`train_glean`].
pub struct GleanRun {
    pub model: GleanModel,
    pub disc: Discriminator,
    pub disc_store: ParamStore,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Mean PSNR of `model` over `val`, or `None` for an empty split.
pub fn validation_psnr(model: &GleanModel, val: &ImageSet) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for hr in &val.images {
        let pair = make_pair(hr, model.cfg.scale)?;
        total += psnr(&model.infer(&pair.lr)?, &pair.hr, PSNR_PEAK)?;
    }
    Ok(Some(total / val.len() as f64))
}

/// Train encoder, decoder and fusion convs around a pretrained bank.
pub fn train_glean(
    train: &ImageSet,
    val: &ImageSet,
    bank: &BankModel,
    cfg: &TrainConfig,
    glean_cfg: &GleanConfig,
    out: &RunOutput,
) -> Result<GleanRun> {
    let model = GleanModel::with_bank(glean_cfg, bank)?;
    train_glean_model(train, val, model, bank, cfg, out)
}

/// Training loop proper. `model` must carry a frozen copy of `bank`.
pub fn train_glean_model(
    train: &ImageSet,
    val: &ImageSet,
    mut model: GleanModel,
    bank: &BankModel,
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<GleanRun> {
    cfg.validate()?;
    if !is_frozen(&model.store) {
        return Err(GleanError::ContractViolation("the latent bank is not frozen".into()));
    }
    check_bank_unchanged(&model, bank)?;
    let hr_res = model.cfg.hr_res;
    require_resolution(train, hr_res, "GLEAN training")?;
    require_resolution(val, hr_res, "GLEAN validation")?;

    let mut disc_store = ParamStore::new();
    let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD15C);
    let disc = Discriminator::new(&mut disc_store, &mut drng, "disc", hr_res, &bank.bank.cfg.disc_widths)?;
    if cfg.reuse_disc {
        disc_store.load_matching(&bank.store, DISC_PREFIX)?;
    }
    let net = FeatureNet::new(FEATURE_NET_SEED);
    let weights = LossWeights {
        alpha_percep: model.cfg.alpha_percep,
        alpha_gen: model.cfg.alpha_gen,
        non_saturating: model.cfg.non_saturating,
    };
    let mut gopt = Adam::new(cfg.adam);
    let mut dopt = Adam::new(cfg.adam);
    let mut log = Jsonl::create(out.log_path())?;
    let mut ckpts = Jsonl::create(out.checkpoints_path())?;
    let start = Instant::now();
    let scale = model.cfg.scale;

    with_batches(train, cfg, Some(scale), |next| {
        for step in 0..cfg.iterations {
            let lr = cfg.lr_at(step)?;
            let batch = next()?;
            let lr_img = batch.lr.expect("scale was requested");

            let tape = Tape::new();
            let b = Binder::new(&tape, &model.store, true);
            let sr = model.forward(&b, tape.constant(lr_img))?;
            let critic = Binder::new(&tape, &disc_store, false);
            let logits = disc.forward(&critic, sr)?;
            let (loss, report) = total_generator_loss(sr, tape.constant(batch.hr.clone()), Some(logits), &weights, &net)?;
            ensure_finite(
                step,
                &[("l_mse", report.l_mse), ("l_percep", report.l_percep), ("l_gen", report.l_gen), ("l_total", report.l_total)],
            )?;
            let grads = b.gradients(&mut tape.backward(loss));
            gopt.step(&mut model.store, grads, lr as f32)?;

            let dtape = Tape::new();
            let db = Binder::new(&dtape, &disc_store, true);
            let fake_logits = disc.forward(&db, dtape.constant(sr.value().as_ref().clone()))?;
            let real_logits = disc.forward(&db, dtape.constant(batch.hr))?;
            let l_disc = discriminator_loss(fake_logits, real_logits)?;
            let l_disc_v = l_disc.value().item() as f64;
            ensure_finite(step, &[("l_disc", l_disc_v)])?;
            let grads = db.gradients(&mut dtape.backward(l_disc));
            dopt.step(&mut disc_store, grads, lr as f32)?;

            log.push(LogRecord {
                step,
                l_mse: Some(report.l_mse),
                l_percep: Some(report.l_percep),
                l_gen: report.l_gen,
                l_total: report.l_total,
                l_disc: l_disc_v,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;

            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
                check_bank_unchanged(&model, bank)?;
                if let Some(p) = out.step_checkpoint(done) {
                    model.save(&p)?;
                    let val_psnr = validation_psnr(&model, val)?.unwrap_or(f64::NAN);
                    ckpts.push(CheckpointRecord { step: done, path: p, val_psnr })?;
                }
            }
        }
        Ok(())
    })?;
    check_bank_unchanged(&model, bank)?;
    if let Some(stem) = &out.stem {
        model.save(stem)?;
        let val_psnr = validation_psnr(&model, val)?.unwrap_or(f64::NAN);
        ckpts.push(CheckpointRecord { step: cfg.iterations, path: stem.clone(), val_psnr })?;
    }
    Ok(GleanRun { model, disc, disc_store, log: log.records, checkpoints: ckpts.records })
}

/// Bitwise comparison of the model's bank tensors with the pretrained ones.
pub fn check_bank_unchanged(model: &GleanModel, bank: &BankModel) -> Result<()> {
    if !model.store.bitwise_eq(&bank.store, BANK_PREFIX) {
        return Err(GleanError::ContractViolation("latent bank parameters differ from the pretrained bank".into()));
    }
    Ok(())
}

/// Parse a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
