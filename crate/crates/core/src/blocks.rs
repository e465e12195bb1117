//! Layers shared by the bank, encoder, decoder and discriminator.
//!
//! Every layer registers its tensors in a [`ParamStore`] under a dotted
//! prefix and reads them back through a [`Binder`] at forward time.

use glean_autograd::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Result};
use crate::params::{he_uniform, scoped, Binder, ParamId, ParamStore, LRELU_GAIN};

pub const LRELU_SLOPE: f32 = 0.2;
pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Parameter count of a biased `k×k` convolution.
pub const fn conv_param_count(in_ch: usize, out_ch: usize, k: usize) -> usize {
    in_ch * out_ch * k * k + out_ch
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// He-uniform weights, zero bias. Padding keeps resolution at stride 1.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let w = he_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, gain, rng);
        Self::from_weight(store, name, w, stride)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self::from_weight(store, name, Tensor::zeros(&[out_ch, in_ch, kernel, kernel]), stride)
    }

    fn from_weight(store: &mut ParamStore, name: &str, w: Tensor, stride: usize) -> Self {
        let s = w.shape().to_vec();
        let weight = store.add(scoped(name, "weight"), w);
        let bias = store.add(scoped(name, "bias"), Tensor::zeros(&[s[0]]));
        Self { weight, bias, in_ch: s[1], out_ch: s[0], kernel: s[2], stride }
    }

    pub fn param_count(&self) -> usize {
        conv_param_count(self.in_ch, self.out_ch, self.kernel)
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let ch = x.shape().get(1).copied().unwrap_or(0);
        if ch != self.in_ch {
            return Err(shape(format!("conv expects {} input channels, got {ch}", self.in_ch)));
        }
        Ok(x.conv2d(b.param(self.weight), Some(b.param(self.bias)), self.stride, self.kernel / 2)?)
    }

    pub fn forward_lrelu<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(b, x)?.leaky_relu(LRELU_SLOPE))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize, gain: f32) -> Self {
        let weight = store.add(scoped(name, "weight"), he_uniform(&[fout, fin], fin, gain, rng));
        let bias = store.add(scoped(name, "bias"), Tensor::zeros(&[fout]));
        Self { weight, bias, in_features: fin, out_features: fout }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(b.param(self.weight), Some(b.param(self.bias)))?)
    }
}

/// Three densely connected 3×3 convs. The last one maps back to the base
/// width and is zero-initialised, so a fresh unit contributes nothing.
#[derive(Clone, Debug)]
pub struct DenseUnit {
    pub convs: [Conv; 3],
}

/// Residual-in-residual dense blocks at constant resolution.
#[derive(Clone, Debug)]
pub struct Rrdb {
    pub units: Vec<DenseUnit>,
    pub channels: usize,
}

pub const RESIDUAL_SCALE: f32 = 0.2;

impl Rrdb {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, growth: usize, blocks: usize) -> Self {
        let units = (0..blocks)
            .map(|i| {
                let p = scoped(name, &format!("block{i}"));
                DenseUnit {
                    convs: [
                        Conv::new(store, rng, &scoped(&p, "conv1"), channels, growth, 3, 1, LRELU_GAIN),
                        Conv::new(store, rng, &scoped(&p, "conv2"), channels + growth, growth, 3, 1, LRELU_GAIN),
                        Conv::zeros(store, &scoped(&p, "conv3"), channels + 2 * growth, channels, 3, 1),
                    ],
                }
            })
            .collect();
        Self { units, channels }
    }

    /// Closed-form parameter count of `blocks` blocks.
    pub fn expected_params(channels: usize, growth: usize, blocks: usize) -> usize {
        blocks
            * (conv_param_count(channels, growth, 3)
                + conv_param_count(channels + growth, growth, 3)
                + conv_param_count(channels + 2 * growth, channels, 3))
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for unit in &self.units {
            let [c1, c2, c3] = &unit.convs;
            let a = c1.forward_lrelu(b, x)?;
            let bb = c2.forward_lrelu(b, Var::concat(&[x, a], 1)?)?;
            let dense = c3.forward(b, Var::concat(&[x, a, bb], 1)?)?;
            // inner residual scaling, then the outer residual around it
            x = x.add(dense.scale(RESIDUAL_SCALE * RESIDUAL_SCALE))?;
        }
        Ok(x)
    }
}

/// Styled convolution: optional ×2 nearest upsample, 3×3 conv, instance
/// norm, per-channel modulation from the latent, LeakyReLU.
#[derive(Clone, Debug)]
pub struct StyleBlock {
    pub conv: Conv,
    pub affine: Linear,
    pub upsample: bool,
}

/// Affine init gain; keeps `γ, β` modest for unit-normal latents.
const AFFINE_GAIN: f32 = 0.5;

impl StyleBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        latent_dim: usize,
        upsample: bool,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &scoped(name, "conv"), in_ch, out_ch, 3, 1, 1.0),
            affine: Linear::new(store, rng, &scoped(name, "affine"), latent_dim, 2 * out_ch, AFFINE_GAIN),
            upsample,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let ls = latent.shape();
        let n = x.shape()[0];
        if ls != [n, self.affine.in_features] {
            return Err(shape(format!("latent {ls:?}, style block expects [{n}, {}]", self.affine.in_features)));
        }
        let x = if self.upsample { x.upsample2x()? } else { x };
        let h = self.conv.forward(b, x)?.instance_norm(INSTANCE_NORM_EPS)?;
        let style = self.affine.forward(b, latent)?;
        let c = self.conv.out_ch;
        let (gamma, beta) = (style.narrow(1, 0, c)?, style.narrow(1, c, c)?);
        Ok(h.modulate(gamma, beta)?.leaky_relu(LRELU_SLOPE))
    }
}

/// Style block with an optional fusion conv over `[style_out, enc_feature]`.
#[derive(Clone, Debug)]
pub struct AugmentedStyleBlock {
    pub style: StyleBlock,
    pub fusion: Option<Conv>,
}

impl AugmentedStyleBlock {
    /// Fusion conv initialised to pass the style half through: identity
    /// taps on the style channels, zeros on the encoder channels.
    pub fn fusion_conv(store: &mut ParamStore, name: &str, out_ch: usize, enc_ch: usize) -> Conv {
        let conv = Conv::zeros(store, name, out_ch + enc_ch, out_ch, 3, 1);
        let w = store.get_mut(conv.weight);
        let in_ch = out_ch + enc_ch;
        for o in 0..out_ch {
            w.data_mut()[((o * in_ch + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        conv
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>, latent: Var<'t>, enc: Option<Var<'t>>) -> Result<Var<'t>> {
        let h = self.style.forward(b, x, latent)?;
        match (enc, &self.fusion) {
            (None, _) => Ok(h),
            (Some(e), Some(fusion)) => {
                let (hs, es) = (h.shape(), e.shape());
                if hs[0] != es[0] || hs[2..] != es[2..] {
                    return Err(shape(format!("encoder feature {es:?} does not match style output {hs:?}")));
                }
                fusion.forward(b, Var::concat(&[h, e], 1)?)
            }
            (Some(_), None) => Err(shape("encoder feature given to a block without a fusion conv".to_string())),
        }
    }
}

/// Small head init so a fresh discriminator is uninformative (logits near 0).
const DISC_HEAD_GAIN: f32 = 0.1;

/// Stride-2 conv stack down to 4×4, then a single logit per item.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv>,
    pub head: Linear,
    pub resolution: usize,
}

impl Discriminator {
    /// `widths[i]` is the output width of the `i`-th stride-2 conv; the last
    /// width repeats if the resolution needs more stages.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, resolution: usize, widths: &[usize]) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() || widths.is_empty() {
            return Err(crate::error::invalid(format!("discriminator resolution {resolution} must be a power of two >= 8")));
        }
        let stages = (resolution / 4).trailing_zeros() as usize;
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(stages);
        for i in 0..stages {
            let out = widths[i.min(widths.len() - 1)];
            convs.push(Conv::new(store, rng, &scoped(name, &format!("conv{i}")), in_ch, out, 3, 2, LRELU_GAIN));
            in_ch = out;
        }
        let head = Linear::new(store, rng, &scoped(name, "head"), in_ch * 16, 1, DISC_HEAD_GAIN);
        Ok(Self { convs, head, resolution })
    }

    /// Logits shaped `[N, 1]`.
    pub fn forward<'t>(&self, b: &Binder<'t>, img: Var<'t>) -> Result<Var<'t>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(shape(format!("discriminator expects [N, 3, {r}, {r}], got {s:?}", r = self.resolution)));
        }
        let mut h = img;
        for c in &self.convs {
            h = c.forward_lrelu(b, h)?;
        }
        let n = s[0];
        let flat = h.reshape(&[n, self.head.in_features])?;
        self.head.forward(b, flat)
    }
}
