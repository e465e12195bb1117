//! The latent bank: a small style-based generator with one latent vector per
//! resolution level. It runs either unconditioned (pretraining, inversion)
//! or with encoder features fused into its levels.
//!
//! Generator tensors live under `bank.`; the fusion convs added for
//! conditioning live under `fusion.` because they are trained with the
//! encoder while everything under `bank.` stays frozen.

use std::path::Path;

use glean_autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{AugmentedStyleBlock, Conv, Discriminator, StyleBlock};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape, GleanError, Result};
use crate::imaging::ImageTensor;
use crate::params::{Binder, ParamId, ParamStore};

pub const BANK_PREFIX: &str = "bank.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const DISC_PREFIX: &str = "disc.";
pub const BANK_KIND: &str = "bank";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Output resolution; a power of two ≥ 8.
    pub out_res: usize,
    pub latent_dim: usize,
    /// Channel width per level, coarse (4×4) first; one entry per level.
    pub widths: Vec<usize>,
    /// Discriminator widths per stride-2 stage.
    pub disc_widths: Vec<usize>,
    /// Seed of the weight initialiser.
    pub init_seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            out_res: 64,
            latent_dim: 128,
            widths: vec![256, 128, 64, 32, 16],
            disc_widths: vec![32, 64, 128, 256],
            init_seed: 0,
        }
    }
}

/// Number of bank levels for an output resolution: `log2(res/4) + 1`.
pub fn levels_for(out_res: usize) -> Result<usize> {
    if out_res < 4 || !out_res.is_power_of_two() {
        return Err(invalid(format!("bank resolution {out_res} must be a power of two >= 4")));
    }
    Ok((out_res / 4).trailing_zeros() as usize + 1)
}

impl BankConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = levels_for(self.out_res)?;
        if self.out_res < 8 {
            return Err(invalid("bank resolution must be at least 8"));
        }
        if self.widths.len() != k {
            return Err(invalid(format!("{} levels need {k} widths, got {}", self.out_res, self.widths.len())));
        }
        if self.latent_dim == 0 || self.widths.contains(&0) || self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(invalid("bank widths and latent dim must be positive"));
        }
        Ok(())
    }

    /// Resolution of level `i`.
    pub fn level_res(&self, i: usize) -> usize {
        4 << i
    }
}

/// Per-image latent vectors, `[N, k, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix(Tensor);

impl LatentMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.numel() == 0 {
            return Err(shape(format!("latent matrix must be [N, k, d], got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(invalid("latent matrix has non-finite entries"));
        }
        Ok(Self(t))
    }

    pub fn standard_normal(n: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self(Tensor::from_fn(&[n, k, d], |_| StandardNormal.sample(rng)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn k(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.0.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct BankLevel {
    pub first: StyleBlock,
    pub second: AugmentedStyleBlock,
}

#[derive(Clone, Debug)]
pub struct Bank {
    pub cfg: BankConfig,
    pub constant: ParamId,
    pub levels: Vec<BankLevel>,
    pub to_rgb: Conv,
}

impl Bank {
    pub fn new(store: &mut ParamStore, cfg: &BankConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let c0 = cfg.widths[0];
        let constant = store.add("bank.const", Tensor::from_fn(&[1, c0, 4, 4], |_| StandardNormal.sample(&mut rng)));
        let mut levels = Vec::with_capacity(cfg.levels());
        let mut in_ch = c0;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let p = format!("bank.level{i}");
            let first = StyleBlock::new(store, &mut rng, &format!("{p}.style0"), in_ch, w, cfg.latent_dim, i > 0);
            let second = StyleBlock::new(store, &mut rng, &format!("{p}.style1"), w, w, cfg.latent_dim, false);
            levels.push(BankLevel { first, second: AugmentedStyleBlock { style: second, fusion: None } });
            in_ch = w;
        }
        let to_rgb = Conv::new(store, &mut rng, "bank.to_rgb", in_ch, 3, 1, 1, 1.0);
        Ok(Self { cfg: cfg.clone(), constant, levels, to_rgb })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Add pass-through fusion convs to the first `count` levels, each taking
    /// an encoder feature of `enc_ch` channels.
    pub fn attach_fusion(&mut self, store: &mut ParamStore, count: usize, enc_ch: usize) -> Result<()> {
        if count > self.levels() {
            return Err(invalid(format!("{count} fusion levels requested for a {}-level bank", self.levels())));
        }
        for (i, level) in self.levels.iter_mut().enumerate().take(count) {
            let w = level.second.style.conv.out_ch;
            level.second.fusion = Some(AugmentedStyleBlock::fusion_conv(store, &format!("fusion.level{i}"), w, enc_ch));
        }
        Ok(())
    }

    fn check_latents(&self, latents: &[usize]) -> Result<usize> {
        if latents.len() != 3 || latents[1] != self.levels() || latents[2] != self.cfg.latent_dim {
            return Err(shape(format!(
                "latents {latents:?}, bank expects [N, {}, {}]",
                self.levels(),
                self.cfg.latent_dim
            )));
        }
        Ok(latents[0])
    }

    /// All level features `g_0..g_{k-1}`. `feats[i]`, when present, is fused
    /// into level `i`; a shorter slice leaves the remaining levels
    /// unconditioned.
    pub fn forward<'t>(&self, b: &Binder<'t>, latents: Var<'t>, feats: &[Option<Var<'t>>]) -> Result<Vec<Var<'t>>> {
        let n = self.check_latents(&latents.shape())?;
        if feats.len() > self.levels() {
            return Err(invalid(format!("{} encoder features for {} levels", feats.len(), self.levels())));
        }
        let d = self.cfg.latent_dim;
        let mut h = b.param(self.constant).repeat_batch(n)?;
        let mut out = Vec::with_capacity(self.levels());
        for (i, level) in self.levels.iter().enumerate() {
            let c = latents.narrow(1, i, 1)?.reshape(&[n, d])?;
            let enc = feats.get(i).copied().flatten();
            if let Some(e) = enc {
                let r = self.cfg.level_res(i);
                let s = e.shape();
                if s.len() != 4 || s[0] != n || s[2] != r || s[3] != r {
                    return Err(shape(format!("encoder feature {s:?} for level {i} at {r}x{r}")));
                }
            }
            h = level.first.forward(b, h, c)?;
            h = level.second.forward(b, h, c, enc)?;
            out.push(h);
        }
        Ok(out)
    }

    /// RGB head on the last level feature.
    pub fn to_rgb<'t>(&self, b: &Binder<'t>, last: Var<'t>) -> Result<Var<'t>> {
        Ok(self.to_rgb.forward(b, last)?.tanh())
    }

    /// Unconditioned generation: `tanh(to_rgb(g_{k-1}))`.
    pub fn generate<'t>(&self, b: &Binder<'t>, latents: Var<'t>) -> Result<Var<'t>> {
        let feats = self.forward(b, latents, &[])?;
        self.to_rgb(b, *feats.last().expect("bank has at least one level"))
    }

    /// Convenience inference wrapper over [`Bank::generate`].
    pub fn generate_images(&self, store: &ParamStore, latents: &LatentMatrix) -> Result<ImageTensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store, false);
        let img = self.generate(&b, tape.constant(latents.tensor().clone()))?;
        ImageTensor::new(img.value().as_ref().clone())
    }
}

/// Mark every generator tensor as frozen. Fusion convs are left alone.
pub fn freeze(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(BANK_PREFIX)).collect();
    for id in ids {
        store.set_trainable(id, false);
    }
}

pub fn is_frozen(store: &ParamStore) -> bool {
    store.ids().filter(|&id| store.name(id).starts_with(BANK_PREFIX)).all(|id| !store.is_trainable(id))
}

/// A pretrained bank with its discriminator.
#[derive(Clone, Debug)]
pub struct BankModel {
    pub bank: Bank,
    pub disc: Discriminator,
    pub store: ParamStore,
}

impl BankModel {
    pub fn new(cfg: &BankConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let bank = Bank::new(&mut store, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0xD15C);
        let disc = Discriminator::new(&mut store, &mut rng, "disc", cfg.out_res, &cfg.disc_widths)?;
        Ok(Self { bank, disc, store })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(BANK_KIND, serde_json::to_value(&self.bank.cfg)?, self.store.clone()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != BANK_KIND {
            return Err(GleanError::Checkpoint(format!("expected a bank checkpoint, got kind {:?}", ck.kind)));
        }
        let cfg: BankConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| GleanError::Checkpoint(format!("bank config: {e}")))?;
        let mut model = Self::new(&cfg)?;
        if model.store.len() != ck.params.len() {
            return Err(GleanError::Checkpoint(format!(
                "bank checkpoint has {} tensors, config implies {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        model.store.load_matching(&ck.params, "")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
