//! Encoder, bank and decoder composed into one super-resolution network.

use std::path::Path;

use glean_autograd::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{freeze, Bank, BankConfig, BankModel, BANK_PREFIX};
use crate::blocks::{Conv, Linear, Rrdb};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape, GleanError, Result};
use crate::imaging::ImageTensor;
use crate::params::{Binder, ParamStore, LRELU_GAIN};

pub const GLEAN_KIND: &str = "glean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GleanConfig {
    pub scale: usize,
    /// Output resolution; must equal the bank's.
    pub hr_res: usize,
    pub bank: BankConfig,
    pub enc_channels: usize,
    pub rrdb_blocks: usize,
    pub rrdb_growth: usize,
    pub dec_channels: usize,
    /// Encoder features fed into the bank, coarse first. `None` means all.
    pub enc_inject_depth: Option<usize>,
    /// Bank features fed into the decoder, coarse first over the levels from
    /// the LR to the HR resolution. `None` means all.
    pub bank_feature_depth: Option<usize>,
    pub use_decoder: bool,
    pub alpha_percep: f32,
    pub alpha_gen: f32,
    /// Use `softplus(-logit)` instead of `-softplus(logit)` for the
    /// generator's adversarial term.
    pub non_saturating: bool,
    pub init_seed: u64,
}

impl Default for GleanConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            hr_res: 64,
            bank: BankConfig::default(),
            enc_channels: 32,
            rrdb_blocks: 4,
            rrdb_growth: 16,
            dec_channels: 32,
            enc_inject_depth: None,
            bank_feature_depth: None,
            use_decoder: true,
            alpha_percep: 0.01,
            alpha_gen: 0.01,
            non_saturating: false,
            init_seed: 0,
        }
    }
}

impl GleanConfig {
    pub fn lr_res(&self) -> usize {
        self.hr_res / self.scale.max(1)
    }

    /// `N`: number of halvings from the LR resolution down to 4×4.
    pub fn enc_depth(&self) -> usize {
        (self.lr_res() / 4).trailing_zeros() as usize
    }

    /// `k`: number of bank levels.
    pub fn bank_levels(&self) -> usize {
        self.bank.levels()
    }

    /// Number of ×2 steps between LR and HR.
    pub fn up_steps(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn inject_depth(&self) -> usize {
        self.enc_inject_depth.unwrap_or(self.enc_depth() + 1)
    }

    pub fn feature_depth(&self) -> usize {
        self.bank_feature_depth.unwrap_or(self.up_steps() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(invalid(format!("scale {} must be a power of two >= 2", self.scale)));
        }
        if self.hr_res != self.bank.out_res {
            return Err(invalid(format!("hr_res {} differs from bank resolution {}", self.hr_res, self.bank.out_res)));
        }
        if !self.hr_res.is_multiple_of(self.scale) || self.lr_res() < 4 {
            return Err(invalid(format!("hr_res {} / scale {} leaves an LR side below 4", self.hr_res, self.scale)));
        }
        if self.inject_depth() > self.enc_depth() + 1 {
            return Err(invalid(format!("enc_inject_depth {} exceeds {}", self.inject_depth(), self.enc_depth() + 1)));
        }
        if self.feature_depth() > self.up_steps() + 1 {
            return Err(invalid(format!("bank_feature_depth {} exceeds {}", self.feature_depth(), self.up_steps() + 1)));
        }
        if self.enc_channels == 0 || self.dec_channels == 0 || self.rrdb_growth == 0 {
            return Err(invalid("channel widths must be positive"));
        }
        if !(self.alpha_percep >= 0.0 && self.alpha_gen >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stem, RRDB trunk, stride-2 pyramid and the latent head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv,
    pub rrdb: Rrdb,
    pub downs: Vec<[Conv; 2]>,
    pub head_conv: Conv,
    pub head_fc: Linear,
    pub lr_res: usize,
    pub levels: usize,
    pub latent_dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &GleanConfig) -> Self {
        let c = cfg.enc_channels;
        let stem = Conv::new(store, rng, "enc.stem", 3, c, 3, 1, LRELU_GAIN);
        let rrdb = Rrdb::new(store, rng, "enc.rrdb", c, cfg.rrdb_growth, cfg.rrdb_blocks);
        let downs = (1..=cfg.enc_depth())
            .map(|i| {
                [
                    Conv::new(store, rng, &format!("enc.down{i}.conv0"), c, c, 3, 2, LRELU_GAIN),
                    Conv::new(store, rng, &format!("enc.down{i}.conv1"), c, c, 3, 1, LRELU_GAIN),
                ]
            })
            .collect();
        let head_conv = Conv::new(store, rng, "enc.latent.conv", c, c, 3, 1, LRELU_GAIN);
        let (k, d) = (cfg.bank_levels(), cfg.bank.latent_dim);
        let head_fc = Linear::new(store, rng, "enc.latent.fc", c * 16, k * d, 1.0);
        Self { stem, rrdb, downs, head_conv, head_fc, lr_res: cfg.lr_res(), levels: k, latent_dim: d }
    }

    /// Feature pyramid `f_0..f_N` (finest first) and latents `[N, k, d]`.
    pub fn forward<'t>(&self, b: &Binder<'t>, lr: Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let s = lr.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.lr_res || s[3] != self.lr_res {
            return Err(shape(format!("encoder expects [N, 3, {r}, {r}], got {s:?}", r = self.lr_res)));
        }
        let n = s[0];
        let mut f = self.rrdb.forward(b, self.stem.forward(b, lr)?)?;
        let mut pyramid = vec![f];
        for [c0, c1] in &self.downs {
            f = c1.forward_lrelu(b, c0.forward_lrelu(b, f)?)?;
            pyramid.push(f);
        }
        let h = self.head_conv.forward_lrelu(b, f)?;
        let flat = h.reshape(&[n, self.head_fc.in_features])?;
        let latents = self.head_fc.forward(b, flat)?.reshape(&[n, self.levels, self.latent_dim])?;
        Ok((pyramid, latents))
    }
}

/// Progressive fusion decoder: conv + pixel shuffle per ×2 step.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub d0: Conv,
    pub stages: Vec<Conv>,
    pub output: Conv,
    /// Bank level consumed at each decoder resolution (stages, then the
    /// output layer); `None` where the feature is ablated away.
    pub bank_levels: Vec<Option<usize>>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &GleanConfig) -> Self {
        let c = cfg.dec_channels;
        let first_level = (cfg.lr_res() / 4).trailing_zeros() as usize;
        let bank_levels: Vec<Option<usize>> =
            (0..=cfg.up_steps()).map(|j| (j < cfg.feature_depth()).then_some(first_level + j)).collect();
        let bank_ch = |j: usize| bank_levels[j].map_or(0, |l| cfg.bank.widths[l]);
        let d0 = Conv::new(store, rng, "dec.d0", cfg.enc_channels, c, 3, 1, LRELU_GAIN);
        let stages = (0..cfg.up_steps())
            .map(|j| Conv::new(store, rng, &format!("dec.up{j}"), c + bank_ch(j), 4 * c, 3, 1, LRELU_GAIN))
            .collect();
        let output = Conv::new(store, rng, "dec.out", c + bank_ch(cfg.up_steps()), 3, 3, 1, 1.0);
        Self { d0, stages, output, bank_levels }
    }

    fn fuse<'t>(&self, d: Var<'t>, j: usize, bank: &[Var<'t>]) -> Result<Var<'t>> {
        match self.bank_levels[j] {
            None => Ok(d),
            Some(level) => {
                let g = *bank
                    .get(level)
                    .ok_or_else(|| invalid(format!("decoder needs bank level {level}, got {} levels", bank.len())))?;
                let (ds, gs) = (d.shape(), g.shape());
                if ds[0] != gs[0] || ds[2..] != gs[2..] {
                    return Err(shape(format!("bank feature {gs:?} does not match decoder state {ds:?}")));
                }
                Ok(Var::concat(&[d, g], 1)?)
            }
        }
    }

    /// `f0` at the LR resolution; `bank` is the full bank pyramid.
    pub fn forward<'t>(&self, b: &Binder<'t>, f0: Var<'t>, bank: &[Var<'t>]) -> Result<Var<'t>> {
        let mut d = self.d0.forward_lrelu(b, f0)?;
        for (j, conv) in self.stages.iter().enumerate() {
            d = conv.forward(b, self.fuse(d, j, bank)?)?.pixel_shuffle(2)?.leaky_relu(crate::blocks::LRELU_SLOPE);
        }
        Ok(self.output.forward(b, self.fuse(d, self.stages.len(), bank)?)?.tanh())
    }
}

#[derive(Clone, Debug)]
pub struct GleanModel {
    pub cfg: GleanConfig,
    pub encoder: Encoder,
    pub bank: Bank,
    pub decoder: Decoder,
    pub store: ParamStore,
}

impl GleanModel {
    /// Fresh model with a randomly initialised (but frozen) bank.
    pub fn new(cfg: &GleanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut bank = Bank::new(&mut store, &cfg.bank)?;
        bank.attach_fusion(&mut store, cfg.inject_depth(), cfg.enc_channels)?;
        freeze(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let encoder = Encoder::new(&mut store, &mut rng, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed.wrapping_add(1));
        let decoder = Decoder::new(&mut store, &mut rng, cfg);
        Ok(Self { cfg: cfg.clone(), encoder, bank, decoder, store })
    }

    /// Fresh encoder/decoder around a pretrained bank. The bank's config
    /// replaces `cfg.bank`.
    pub fn with_bank(cfg: &GleanConfig, pretrained: &BankModel) -> Result<Self> {
        let cfg = GleanConfig { bank: pretrained.bank.cfg.clone(), hr_res: pretrained.bank.cfg.out_res, ..cfg.clone() };
        let mut model = Self::new(&cfg)?;
        model.store.load_matching(&pretrained.store, BANK_PREFIX)?;
        freeze(&mut model.store);
        Ok(model)
    }

    /// Super-resolve inside a tape.
    pub fn forward<'t>(&self, b: &Binder<'t>, lr: Var<'t>) -> Result<Var<'t>> {
        let (pyramid, latents) = self.encoder.forward(b, lr)?;
        let n_enc = pyramid.len() - 1;
        let needs_bank = !self.cfg.use_decoder || self.decoder.bank_levels.iter().any(Option::is_some);
        if !needs_bank {
            return self.decoder.forward(b, pyramid[0], &[]);
        }
        let feats: Vec<Option<Var<'t>>> = (0..self.cfg.inject_depth()).map(|j| Some(pyramid[n_enc - j])).collect();
        let g = self.bank.forward(b, latents, &feats)?;
        if self.cfg.use_decoder {
            self.decoder.forward(b, pyramid[0], &g)
        } else {
            self.bank.to_rgb(b, *g.last().expect("bank has levels"))
        }
    }

    /// Inference on a batch, without gradient tracking.
    pub fn infer(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let out = self.forward(&b, tape.constant(lr.tensor().clone()))?;
        ImageTensor::new(out.value().as_ref().clone())
    }

    /// Scalar count of parameters; frozen bank tensors only with
    /// `include_frozen`.
    pub fn count_parameters(&self, include_frozen: bool) -> usize {
        self.store.count(|_, trainable| include_frozen || trainable)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(GLEAN_KIND, serde_json::to_value(&self.cfg)?, self.store.clone()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != GLEAN_KIND {
            return Err(GleanError::Checkpoint(format!("expected a model checkpoint, got kind {:?}", ck.kind)));
        }
        let cfg: GleanConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| GleanError::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(&cfg)?;
        if model.store.len() != ck.params.len() {
            return Err(GleanError::Checkpoint(format!(
                "checkpoint has {} tensors, config implies {}",
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::FUSION_PREFIX;
    use crate::blocks::conv_param_count;
    use crate::gradcheck::check_gradient;
    use glean_autograd::Tensor;
    use rand::Rng;

    fn tiny(scale: usize, hr: usize) -> GleanConfig {
        let k = crate::bank::levels_for(hr).unwrap();
        let widths: Vec<usize> = (0..k).map(|i| (16usize >> i).max(4)).collect();
        GleanConfig {
            scale,
            hr_res: hr,
            bank: BankConfig { out_res: hr, latent_dim: 8, widths, disc_widths: vec![8], init_seed: 3 },
            enc_channels: 8,
            rrdb_blocks: 1,
            rrdb_growth: 4,
            dec_channels: 8,
            ..GleanConfig::default()
        }
    }

    fn image(n: usize, res: usize, seed: u64) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(&[n, 3, res, res], |_| r.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn encoder_pyramid_shapes() {
        for (scale, hr, lr, n) in [(4, 32, 8, 1), (4, 128, 32, 3)] {
            let model = GleanModel::new(&tiny(scale, hr)).unwrap();
            let tape = Tape::new();
            let b = Binder::new(&tape, &model.store, false);
            let (pyr, c) = model.encoder.forward(&b, tape.constant(image(1, lr, 0).into_tensor())).unwrap();
            assert_eq!(pyr.len(), n + 1);
            let res: Vec<_> = pyr.iter().map(|f| f.shape()[2]).collect();
            let expect: Vec<_> = (0..=n).map(|i| lr >> i).collect();
            assert_eq!(res, expect);
            assert_eq!(c.shape(), [1, model.cfg.bank_levels(), 8]);
        }
    }

    #[test]
    fn end_to_end_shapes_and_determinism() {
        for (scale, hr) in [(4, 32), (8, 64)] {
            let model = GleanModel::new(&tiny(scale, hr)).unwrap();
            let lr = image(1, 8, 1);
            let out = model.infer(&lr).unwrap();
            assert_eq!(out.tensor().shape(), &[1, 3, hr, hr]);
            assert!(out.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(out, model.infer(&lr).unwrap());
        }
        let model = GleanModel::new(&tiny(4, 32)).unwrap();
        assert!(matches!(model.infer(&image(1, 16, 0)), Err(GleanError::Shape(_))));
    }

    #[test]
    fn decoder_fusion_points() {
        let model = GleanModel::new(&tiny(4, 32)).unwrap();
        // LR 8 → fuse at 8 and 16, output conv at 32 (bank levels 1, 2, 3)
        assert_eq!(model.decoder.bank_levels, [Some(1), Some(2), Some(3)]);
        let nobank = GleanModel::new(&GleanConfig { bank_feature_depth: Some(0), ..tiny(4, 32) }).unwrap();
        assert_eq!(nobank.decoder.bank_levels, [None, None, None]);
        assert_eq!(nobank.infer(&image(1, 8, 2)).unwrap().tensor().shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn latent_only_variant_sees_lr_only_through_latents() {
        let cfg = GleanConfig { enc_inject_depth: Some(0), bank_feature_depth: Some(0), use_decoder: false, ..tiny(4, 32) };
        let model = GleanModel::new(&cfg).unwrap();
        let lr = image(1, 8, 3);
        let tape = Tape::new();
        let b = Binder::new(&tape, &model.store, false);
        let (_, c) = model.encoder.forward(&b, tape.constant(lr.tensor().clone())).unwrap();
        let via_latents = model.bank.generate(&b, c).unwrap().value();
        assert_eq!(model.infer(&lr).unwrap().tensor().data(), via_latents.data());

        let a = model.infer(&ImageTensor::new(Tensor::full(&[1, 3, 8, 8], 0.5)).unwrap()).unwrap();
        let bb = model.infer(&ImageTensor::new(Tensor::full(&[1, 3, 8, 8], -0.5)).unwrap()).unwrap();
        assert_ne!(a, bb);
    }

    #[test]
    fn deeper_injection_with_zeroed_extra_features_matches_shallower() {
        let shallow = GleanModel::new(&GleanConfig { enc_inject_depth: Some(1), ..tiny(4, 32) }).unwrap();
        let deep = GleanModel::new(&GleanConfig { enc_inject_depth: Some(2), ..tiny(4, 32) }).unwrap();
        assert!(deep.store.bitwise_eq(&shallow.store, "enc."));
        let lr = image(1, 8, 4);
        let run = |m: &GleanModel, zero_extra: bool| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &m.store, false);
            let (pyr, c) = m.encoder.forward(&b, tape.constant(lr.tensor().clone())).unwrap();
            let mut feats = vec![Some(pyr[1])];
            if m.cfg.inject_depth() > 1 {
                let f = if zero_extra { tape.constant(Tensor::zeros(&pyr[0].shape())) } else { pyr[0] };
                feats.push(Some(f));
            }
            let g = m.bank.forward(&b, c, &feats).unwrap();
            m.decoder.forward(&b, pyr[0], &g).unwrap().value().data().to_vec()
        };
        assert_eq!(run(&deep, true), run(&shallow, false));
    }

    #[test]
    fn decoder_gradient_wrt_bank_feature() {
        let model = GleanModel::new(&tiny(4, 32)).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &model.store, false);
        let (pyr, c) = model.encoder.forward(&b, tape.constant(image(1, 8, 5).into_tensor())).unwrap();
        let g: Vec<Tensor> = model.bank.forward(&b, c, &[]).unwrap().iter().map(|v| v.value().as_ref().clone()).collect();
        let f0 = pyr[0].value().as_ref().clone();
        let report = check_gradient(&g[1], 1e-3, 2, |g1| {
            let tape = g1.tape();
            let b = Binder::new(tape, &model.store, false);
            let bank: Vec<Var> =
                g.iter().enumerate().map(|(i, t)| if i == 1 { g1 } else { tape.constant(t.clone()) }).collect();
            model.decoder.forward(&b, tape.constant(f0.clone()), &bank)
        })
        .unwrap();
        assert!(report.passes(1e-2), "{report:?}");
    }

    #[test]
    fn parameter_counts() {
        let cfg = tiny(4, 32);
        let model = GleanModel::new(&cfg).unwrap();
        let enc = model.store.count(|n, _| n.starts_with("enc."));
        let dec = model.store.count(|n, _| n.starts_with("dec."));
        let fusion = model.store.count(|n, _| n.starts_with(FUSION_PREFIX));
        assert_eq!(model.count_parameters(false), enc + dec + fusion);
        assert_eq!(model.count_parameters(true), model.store.count(|_, _| true));

        // closed form for the decoder of this config: c = 8, bank widths at
        // 8, 16, 32 are 8, 4, 4
        let c = 8;
        let expected = conv_param_count(8, c, 3)
            + conv_param_count(c + 8, 4 * c, 3)
            + conv_param_count(c + 4, 4 * c, 3)
            + conv_param_count(c + 4, 3, 3);
        assert_eq!(dec, expected);
        // fusion convs at levels 0 and 1 (LR 8 → N = 1)
        assert_eq!(fusion, conv_param_count(16 + 8, 16, 3) + conv_param_count(8 + 8, 8, 3));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = GleanModel::new(&tiny(4, 32)).unwrap();
        model.save(&dir.path().join("m")).unwrap();
        let back = GleanModel::load(&dir.path().join("m")).unwrap();
        assert!(back.store.bitwise_eq(&model.store, ""));
        assert_eq!(back.count_parameters(false), model.count_parameters(false));
        assert_eq!(back.cfg, model.cfg);
    }

    #[test]
    fn config_json_is_strict_and_explicit() {
        let cfg = GleanConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(GleanConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.alpha_percep, 0.01);
        assert_eq!(cfg.alpha_gen, 0.01);
        assert!(GleanConfig::from_json(r#"{"scale": 4, "bogus": 1}"#).is_err());
        assert!(GleanConfig::from_json(r#"{"scale": 3}"#).is_err());
        assert_eq!(GleanConfig::from_json("{}").unwrap(), cfg);
    }
}
