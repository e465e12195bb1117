//! Training objective: pixel MSE, feature-space MSE under a fixed random
//! network, and the minimax adversarial terms in log-sigmoid form.

use std::path::Path;

use glean_autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::Conv;
use crate::checkpoint::Checkpoint;
use crate::error::{shape, GleanError, Result};
use crate::imaging::{resize_var, ImageTensor};
use crate::params::{Binder, ParamStore, LRELU_GAIN};

pub const FEATURE_NET_SEED: u64 = 2021;
pub const FEATURE_NET_WIDTHS: [usize; 5] = [16, 32, 64, 64, 64];
/// Inputs smaller than this are bicubically enlarged first.
pub const FEATURE_NET_MIN_RES: usize = 32;
pub const FEATURE_NET_KIND: &str = "featnet";

/// Five stride-2 convs with LeakyReLU, drawn once from a fixed seed and
/// never trained.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    convs: Vec<Conv>,
    store: ParamStore,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let convs = FEATURE_NET_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(&mut store, &mut rng, &format!("feat.conv{i}"), in_ch, w, 3, 2, LRELU_GAIN);
                in_ch = w;
                c
            })
            .collect();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        Self { convs, store }
    }

    /// Replace the random weights with an external checkpoint of the same
    /// architecture.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut net = Self::new(FEATURE_NET_SEED);
        if ck.params.len() != net.store.len() {
            return Err(GleanError::Checkpoint(format!("feature net checkpoint has {} tensors", ck.params.len())));
        }
        net.store.load_matching(&ck.params, "")?;
        for id in net.store.ids().collect::<Vec<_>>() {
            net.store.set_trainable(id, false);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(FEATURE_NET_KIND, serde_json::Value::Null, self.store.clone()).save(path)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Final feature map. Weights are bound as constants; gradients flow to
    /// the input only.
    pub fn features<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape(format!("feature net expects [N, 3, H, W], got {s:?}")));
        }
        let mut h = if s[2] < FEATURE_NET_MIN_RES || s[3] < FEATURE_NET_MIN_RES {
            resize_var(x, s[2].max(FEATURE_NET_MIN_RES), s[3].max(FEATURE_NET_MIN_RES))?
        } else {
            x
        };
        let b = Binder::new(x.tape(), &self.store, false);
        for c in &self.convs {
            h = c.forward_lrelu(&b, h)?;
        }
        Ok(h)
    }

    /// Global-average-pooled final features, one 64-vector per image.
    pub fn embed(&self, img: &ImageTensor) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let f = self.features(tape.constant(img.tensor().clone()))?.value();
        let [n, c, h, w] = f.dims4()?;
        let hw = h * w;
        Ok((0..n)
            .map(|i| {
                (0..c)
                    .map(|ch| {
                        let plane = &f.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                    })
                    .collect()
            })
            .collect())
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean of squared differences over every element.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    same_shape(&pred, &target, "mse")?;
    Ok(pred.sub(target)?.square().mean())
}

/// MSE between final feature maps. The target side is detached.
pub fn perceptual_loss<'t>(net: &FeatureNet, pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    same_shape(&pred, &target, "perceptual")?;
    let fp = net.features(pred)?;
    let ft = net.features(target.detach())?;
    mse_loss(fp, ft)
}

/// `mean log(1 − σ(l)) = mean(−softplus(l))`; with `non_saturating`,
/// `mean(−log σ(l)) = mean softplus(−l)` instead.
pub fn generator_adv_loss<'t>(logits: Var<'t>, non_saturating: bool) -> Var<'t> {
    if non_saturating {
        logits.neg().softplus().mean()
    } else {
        logits.softplus().neg().mean()
    }
}

/// `−[mean log(1 − σ(fake)) + mean log σ(real)]`.
pub fn discriminator_loss<'t>(fake: Var<'t>, real: Var<'t>) -> Result<Var<'t>> {
    Ok(fake.softplus().mean().add(real.neg().softplus().mean())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_percep: f64,
    pub l_gen: f64,
    pub l_total: f64,
    pub alpha_percep: f64,
    pub alpha_gen: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_percep: f32,
    pub alpha_gen: f32,
    pub non_saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_percep: 0.01, alpha_gen: 0.01, non_saturating: false }
    }
}

/// `L_mse + α_percep·L_percep + α_gen·L_gen`. Zero-weighted terms are still
/// reported but not added to the graph. `logits = None` skips the
/// adversarial term entirely.
pub fn total_generator_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    logits: Option<Var<'t>>,
    weights: &LossWeights,
    net: &FeatureNet,
) -> Result<(Var<'t>, LossReport)> {
    let l_mse = mse_loss(pred, target)?;
    let l_percep = perceptual_loss(net, pred, target)?;
    let mut total = l_mse.add(l_percep.scale(weights.alpha_percep))?;
    let mut l_gen_value = 0.0;
    if let Some(logits) = logits {
        let l_gen = generator_adv_loss(logits, weights.non_saturating);
        l_gen_value = l_gen.value().item() as f64;
        total = total.add(l_gen.scale(weights.alpha_gen))?;
    }
    let report = LossReport {
        l_mse: l_mse.value().item() as f64,
        l_percep: l_percep.value().item() as f64,
        l_gen: l_gen_value,
        l_total: total.value().item() as f64,
        alpha_percep: weights.alpha_percep as f64,
        alpha_gen: weights.alpha_gen as f64,
    };
    Ok((total, report))
}

/// Perceptual distance between two image batches, outside any training
/// graph.
pub fn perceptual_distance(net: &FeatureNet, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let tape = Tape::new();
    let l = perceptual_loss(net, tape.constant(a.tensor().clone()), tape.constant(b.tensor().clone()))?;
    Ok(l.value().item() as f64)
}

/// Scalar of a one-element loss var, evaluated for plain logits.
pub fn eval_logits(f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>, fake: &[f32], real: &[f32]) -> Result<f64> {
    let tape = Tape::new();
    let fv = tape.constant(Tensor::new(&[fake.len(), 1], fake.to_vec())?);
    let rv = tape.constant(Tensor::new(&[real.len(), 1], real.to_vec())?);
    Ok(f(fv, rv)?.value().item() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::imaging::{generate_synthetic_scene, SceneSpec};
    use rand::Rng;
    use std::f64::consts::LN_2;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn gen(l: f32, ns: bool) -> f64 {
        eval_logits(|f, _| Ok(generator_adv_loss(f, ns)), &[l], &[0.0]).unwrap()
    }

    fn disc(f: f32, r: f32) -> f64 {
        eval_logits(discriminator_loss, &[f], &[r]).unwrap()
    }

    #[test]
    fn mse_values() {
        let tape = Tape::new();
        let a = tape.constant(random(&[1, 3, 4, 4], 1));
        assert_eq!(mse_loss(a, a).unwrap().value().item(), 0.0);
        let b = tape.constant(a.value().map(|v| v + 0.5));
        assert!((mse_loss(b, a).unwrap().value().item() - 0.25).abs() < 1e-6);
        let c = tape.constant(random(&[1, 3, 4, 4], 2));
        assert_eq!(mse_loss(a, c).unwrap().value().item(), mse_loss(c, a).unwrap().value().item());
        assert!(mse_loss(a, tape.constant(Tensor::zeros(&[1, 3, 4, 2]))).is_err());
    }

    #[test]
    fn adversarial_values() {
        assert!((gen(0.0, false) + LN_2).abs() < 1e-6);
        assert!(gen(2.0, false) < gen(0.0, false));
        let big = gen(80.0, false);
        assert!(big.is_finite() && (big + 80.0).abs() < 1e-3, "{big}");
        assert!((disc(0.0, 0.0) - 2.0 * LN_2).abs() < 1e-6);
        assert!(disc(-10.0, 10.0) < 1e-4);
        assert!(disc(0.0, 0.0) > disc(-2.0, 2.0));
        assert!((gen(0.0, true) - LN_2).abs() < 1e-6);
    }

    #[test]
    fn feature_net_is_reproducible_and_frozen() {
        let a = FeatureNet::new(FEATURE_NET_SEED);
        let b = FeatureNet::new(FEATURE_NET_SEED);
        assert!(a.store.bitwise_eq(&b.store, ""));
        assert!(a.store.ids().all(|id| !a.store.is_trainable(id)));
        assert_eq!(a.store.count(|_, _| true), 3 * 16 * 9 + 16 + 16 * 32 * 9 + 32 + 32 * 64 * 9 + 64 + 2 * (64 * 64 * 9 + 64));
    }

    #[test]
    fn perceptual_properties() {
        let net = FeatureNet::new(FEATURE_NET_SEED);
        let x = generate_synthetic_scene(&SceneSpec::new(0, 32)).unwrap();
        let y = generate_synthetic_scene(&SceneSpec::new(1, 32)).unwrap();
        assert_eq!(perceptual_distance(&net, &x, &x).unwrap(), 0.0);
        let d = perceptual_distance(&net, &x, &y).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, perceptual_distance(&net, &y, &x).unwrap());

        // independent re-evaluation: plain per-layer forward on raw tensors
        let feats = |img: &ImageTensor| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &net.store, false);
            let mut h = tape.constant(img.tensor().clone());
            for c in &net.convs {
                h = h.conv2d(b.param(c.weight), Some(b.param(c.bias)), 2, 1).unwrap().leaky_relu(0.2);
            }
            h.value().as_ref().clone()
        };
        let (fx, fy) = (feats(&x), feats(&y));
        let oracle = fx.data().iter().zip(fy.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / fx.numel() as f64;
        assert!((d - oracle).abs() <= 1e-6 * oracle.max(1e-12) + 1e-9, "{d} vs {oracle}");

        // batch order does not matter
        let xy = ImageTensor::stack(&[&x, &y]).unwrap();
        let yx = ImageTensor::stack(&[&y, &x]).unwrap();
        let p = perceptual_distance(&net, &xy, &yx).unwrap();
        let q = perceptual_distance(&net, &yx, &xy).unwrap();
        assert!((p - q).abs() <= 1e-7 * p);
    }

    #[test]
    fn small_inputs_are_enlarged() {
        let net = FeatureNet::new(FEATURE_NET_SEED);
        let tape = Tape::new();
        let f = net.features(tape.constant(random(&[2, 3, 8, 8], 3))).unwrap();
        assert_eq!(f.shape(), [2, 64, 1, 1]);
    }

    #[test]
    fn report_identity_and_defaults() {
        let net = FeatureNet::new(FEATURE_NET_SEED);
        let w = LossWeights::default();
        assert_eq!((w.alpha_percep, w.alpha_gen), (0.01, 0.01));
        let tape = Tape::new();
        let p = tape.constant(random(&[2, 3, 32, 32], 4));
        let t = tape.constant(random(&[2, 3, 32, 32], 5));
        let logits = tape.constant(Tensor::new(&[2, 1], vec![0.3, -1.2]).unwrap());
        let (_, r) = total_generator_loss(p, t, Some(logits), &w, &net).unwrap();
        let expect = r.l_mse + 0.01 * r.l_percep + 0.01 * r.l_gen;
        assert!((r.l_total - expect).abs() <= 1e-6 * expect.abs(), "{r:?}");
        let zero = LossWeights { alpha_percep: 0.0, alpha_gen: 0.0, non_saturating: false };
        let (_, r) = total_generator_loss(p, t, Some(logits), &zero, &net).unwrap();
        assert_eq!(r.l_total, r.l_mse);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let net = FeatureNet::new(FEATURE_NET_SEED);
        let y = random(&[1, 3, 8, 8], 7);
        let pred = random(&[1, 3, 8, 8], 8);
        let mse = check_gradient(&pred, 1e-3, 1, |p| mse_loss(p, p.tape().constant(y.clone()))).unwrap();
        assert!(mse.passes(1e-2), "{mse:?}");
        let percep =
            check_gradient(&pred, 1e-3, 1, |p| perceptual_loss(&net, p, p.tape().constant(y.clone()))).unwrap();
        assert!(percep.passes(1e-2), "{percep:?}");
        let logits = Tensor::new(&[4, 1], vec![-2.0, -0.3, 0.4, 3.0]).unwrap();
        for ns in [false, true] {
            let g = check_gradient(&logits, 1e-3, 1, |l| Ok(generator_adv_loss(l, ns))).unwrap();
            assert!(g.passes(1e-2), "{g:?}");
        }
        let real = Tensor::new(&[4, 1], vec![1.0, -0.5, 2.0, 0.1]).unwrap();
        let d = check_gradient(&logits, 1e-3, 1, |f| discriminator_loss(f, f.tape().constant(real.clone()))).unwrap();
        assert!(d.passes(1e-2), "{d:?}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn loss_signs_hold_for_any_inputs(seed in 0u64..10_000, logits in proptest::collection::vec(-20.0f32..20.0, 1..6)) {
            let net = FeatureNet::new(FEATURE_NET_SEED);
            let tape = Tape::new();
            let p = tape.constant(random(&[1, 3, 8, 8], seed));
            let t = tape.constant(random(&[1, 3, 8, 8], seed + 1));
            proptest::prop_assert!(mse_loss(p, t).unwrap().value().item() >= 0.0);
            proptest::prop_assert!(perceptual_loss(&net, p, t).unwrap().value().item() >= 0.0);
            let gen = eval_logits(|f, _| Ok(generator_adv_loss(f, false)), &logits, &[0.0]).unwrap();
            proptest::prop_assert!(gen <= 0.0);
        }

        #[test]
        fn discriminator_loss_vanishes_as_discrimination_sharpens(margin in 1.0f32..5.0) {
            let at = |m: f32| eval_logits(discriminator_loss, &[-m, -m], &[m, m]).unwrap();
            let (near, far) = (at(margin), at(8.0 * margin));
            proptest::prop_assert!(far < near);
            proptest::prop_assert!(at(40.0) < 1e-12);
        }
    }
}
