//! Image quality metrics and split-level evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, shape, Result};
use crate::imaging::{make_pair, quantize, ImageSet, ImageTensor};
use crate::losses::FeatureNet;

pub use crate::losses::perceptual_distance;

/// Peak value of the 8-bit domain PSNR is measured in.
pub const PSNR_PEAK: f64 = 255.0;

/// `10·log10(peak²/MSE)` after mapping `[-1, 1]` to `[0, 255]` without
/// rounding. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    let (ta, tb) = (a.tensor(), b.tensor());
    if ta.shape() != tb.shape() {
        return Err(shape(format!("psnr: {:?} vs {:?}", ta.shape(), tb.shape())));
    }
    let sum: f64 = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 127.5;
            d * d
        })
        .sum();
    let mse = sum / ta.numel() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Cosine of two vectors; 0 when either is the zero vector.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine between pooled feature-net embeddings, averaged over the batch.
pub fn embedding_cosine(net: &FeatureNet, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(shape(format!("embedding_cosine: {:?} vs {:?}", a.tensor().shape(), b.tensor().shape())));
    }
    let (ea, eb) = (net.embed(a)?, net.embed(b)?);
    Ok(ea.iter().zip(&eb).map(|(u, v)| cosine(u, v)).sum::<f64>() / ea.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Glean,
    Inversion,
    Bicubic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Glean => "glean",
            Method::Inversion => "inversion",
            Method::Bicubic => "bicubic",
        }
    }
}

/// JSON cannot carry infinities, so PSNR is written as the string `"inf"`.
pub mod psnr_json {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(with = "psnr_json")]
    pub psnr: f64,
    pub lpips_proxy: f64,
    pub embcos_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    #[serde(with = "psnr_json")]
    pub psnr: f64,
    pub lpips_proxy: f64,
    pub embcos_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub split: String,
    pub per_image: Vec<ImageMetrics>,
    pub means: MeanMetrics,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Round outputs and targets to 8 bits first, as if read back from PNG.
    pub quantize: bool,
}

/// Score `upscale(lr)` against every HR image of `set`, in index order.
pub fn evaluate_split(
    method: Method,
    split: &str,
    set: &ImageSet,
    scale: usize,
    net: &FeatureNet,
    opts: EvalOptions,
    mut upscale: impl FnMut(&ImageTensor) -> Result<ImageTensor>,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(invalid(format!("split {split:?} is empty")));
    }
    let mut per_image = Vec::with_capacity(set.len());
    for (id, hr) in set.ids.iter().zip(&set.images) {
        let pair = make_pair(hr, scale)?;
        let mut sr = upscale(&pair.lr)?;
        let mut target = pair.hr;
        if opts.quantize {
            sr = quantize(&sr);
            target = quantize(&target);
        }
        if sr.tensor().shape() != target.tensor().shape() {
            return Err(shape(format!("{} produced {:?} for a {:?} target", method.name(), sr.tensor().shape(), target.tensor().shape())));
        }
        per_image.push(ImageMetrics {
            id: id.clone(),
            psnr: psnr(&sr, &target, PSNR_PEAK)?,
            lpips_proxy: perceptual_distance(net, &sr, &target)?,
            embcos_proxy: embedding_cosine(net, &target, &sr)?,
        });
    }
    let n = per_image.len() as f64;
    let means = MeanMetrics {
        psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
        lpips_proxy: per_image.iter().map(|m| m.lpips_proxy).sum::<f64>() / n,
        embcos_proxy: per_image.iter().map(|m| m.embcos_proxy).sum::<f64>() / n,
    };
    Ok(EvalReport { method, split: split.to_string(), per_image, means })
}

impl EvalReport {
    /// Aligned text table: one row per image plus a final mean row.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![["id".into(), "PSNR(dB)".into(), "LPIPS-proxy".into(), "EmbCos-proxy".into()]];
        let fmt = |id: &str, p: f64, l: f64, e: f64| [id.to_string(), format_psnr(p), format!("{l:.6}"), format!("{e:.6}")];
        for m in &self.per_image {
            rows.push(fmt(&m.id, m.psnr, m.lpips_proxy, m.embcos_proxy));
        }
        rows.push(fmt("mean", self.means.psnr, self.means.lpips_proxy, self.means.embcos_proxy));
        let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("method: {}  split: {}\n", self.method.name(), self.split);
        for r in &rows {
            let _ = writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}", r[0], r[1], r[2], r[3], w0 = widths[0], w1 = widths[1], w2 = widths[2], w3 = widths[3]);
        }
        out
    }
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glean_autograd::Tensor;
    use crate::imaging::{bicubic_resize, generate_synthetic_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(&[1, 3, h, h], |_| r.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn psnr_oracles() {
        let a = ImageTensor::new(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        // One grey level in the 8-bit domain is 1/127.5 here.
        let b = ImageTensor::new(Tensor::full(&[1, 3, 4, 4], 1.0 / 127.5)).unwrap();
        assert!((psnr(&a, &b, PSNR_PEAK).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, PSNR_PEAK).unwrap(), f64::INFINITY);
        let lo = ImageTensor::new(Tensor::full(&[1, 3, 4, 4], -1.0)).unwrap();
        let hi = ImageTensor::new(Tensor::full(&[1, 3, 4, 4], 1.0)).unwrap();
        assert!(psnr(&lo, &hi, PSNR_PEAK).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &img(0, 8), PSNR_PEAK).is_err());
    }

    #[test]
    fn psnr_sentinel_round_trips_through_json() {
        let m = MeanMetrics { psnr: f64::INFINITY, lpips_proxy: 0.0, embcos_proxy: 1.0 };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MeanMetrics>(&text).unwrap(), m);
    }

    #[test]
    fn embedding_cosine_identities() {
        let net = FeatureNet::new(crate::losses::FEATURE_NET_SEED);
        let a = generate_synthetic_scene(&SceneSpec::new(3, 32)).unwrap();
        assert!((embedding_cosine(&net, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v, &[0.0; 3]), 0.0);
    }

    #[test]
    fn perceptual_distance_is_shared_and_symmetric() {
        let net = FeatureNet::new(crate::losses::FEATURE_NET_SEED);
        let (a, b) = (img(1, 32), img(2, 32));
        assert_eq!(perceptual_distance(&net, &a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&net, &a, &b).unwrap();
        let ba = perceptual_distance(&net, &b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0));
        let tape = crate::glean_autograd::Tape::new();
        let direct = crate::losses::perceptual_loss(&net, tape.constant(a.tensor().clone()), tape.constant(b.tensor().clone())).unwrap();
        assert_eq!(ab, direct.value().item() as f64);
    }

    fn set(n: usize) -> ImageSet {
        let mut s = ImageSet::default();
        for i in 0..n {
            s.push(format!("img{i}"), generate_synthetic_scene(&SceneSpec::new(i as u64, 32)).unwrap());
        }
        s
    }

    #[test]
    fn bicubic_at_unit_scale_is_exact() {
        let net = FeatureNet::new(crate::losses::FEATURE_NET_SEED);
        let r = evaluate_split(Method::Bicubic, "val", &set(2), 1, &net, EvalOptions::default(), |lr| {
            bicubic_resize(lr, lr.height(), lr.width())
        })
        .unwrap();
        assert_eq!(r.means.psnr, f64::INFINITY);
    }

    #[test]
    fn report_means_and_table_rows() {
        let net = FeatureNet::new(crate::losses::FEATURE_NET_SEED);
        let up = |lr: &ImageTensor| bicubic_resize(lr, lr.height() * 4, lr.width() * 4);
        let r = evaluate_split(Method::Bicubic, "val", &set(2), 4, &net, EvalOptions::default(), up).unwrap();
        let p = &r.per_image;
        assert_eq!((p[0].psnr + p[1].psnr) / 2.0, r.means.psnr);
        assert_eq!((p[0].lpips_proxy + p[1].lpips_proxy) / 2.0, r.means.lpips_proxy);
        let table = r.table();
        assert_eq!(table.lines().count(), 1 + 1 + 2 + 1);
        assert!(table.lines().last().unwrap().starts_with("mean"));
        let q = evaluate_split(Method::Bicubic, "val", &set(2), 4, &net, EvalOptions { quantize: true }, up).unwrap();
        assert_ne!(q.means.psnr, r.means.psnr);
        let empty = ImageSet::default();
        assert!(evaluate_split(Method::Bicubic, "val", &empty, 4, &net, EvalOptions::default(), up).is_err());
    }

    #[test]
    fn means_are_permutation_invariant() {
        let net = FeatureNet::new(crate::losses::FEATURE_NET_SEED);
        let up = |lr: &ImageTensor| bicubic_resize(lr, lr.height() * 4, lr.width() * 4);
        let s = set(3);
        let mut rev = ImageSet::default();
        for i in (0..3).rev() {
            rev.push(s.ids[i].clone(), s.images[i].clone());
        }
        let a = evaluate_split(Method::Bicubic, "val", &s, 4, &net, EvalOptions::default(), up).unwrap();
        let b = evaluate_split(Method::Bicubic, "val", &rev, 4, &net, EvalOptions::default(), up).unwrap();
        assert!((a.means.psnr - b.means.psnr).abs() < 1e-9);
        assert!((a.means.lpips_proxy - b.means.lpips_proxy).abs() < 1e-9);
        assert!((a.means.embcos_proxy - b.means.embcos_proxy).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_monotone(seed in any::<u64>(), e1 in 0.001f32..0.2, e2 in 0.001f32..0.2) {
            let a = img(seed, 4);
            let shift = |e: f32| ImageTensor::new(a.tensor().map(|v| v + e)).unwrap();
            let (b1, b2) = (shift(e1), shift(e2));
            prop_assert_eq!(psnr(&a, &b1, PSNR_PEAK).unwrap(), psnr(&b1, &a, PSNR_PEAK).unwrap());
            let (p1, p2) = (psnr(&a, &b1, PSNR_PEAK).unwrap(), psnr(&a, &b2, PSNR_PEAK).unwrap());
            if e1 + 1e-3 < e2 {
                prop_assert!(p1 >= p2);
            }
        }

        #[test]
        fn cosine_is_bounded(u in proptest::collection::vec(-1e3f64..1e3, 1..16), seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = u.iter().map(|_| r.gen_range(-1e3..1e3)).collect();
            let c = cosine(&u, &v);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
