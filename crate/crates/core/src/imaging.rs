//! Images as tensors: the synthetic scene corpus, bicubic resampling for
//! LR/HR pairs, and 8-bit PNG I/O.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use glean_autograd::{Tape, Tensor, Var};
use image::{DynamicImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, GleanError, Result};

/// Batch of RGB images, `N×3×H×W`, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, c, h, w] = t.dims4()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(shape(format!("image tensors are N×3×H×W, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(invalid("image contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn item(&self, i: usize) -> Result<ImageTensor> {
        Ok(Self(self.0.narrow_batch(i, 1)?))
    }

    pub fn stack(items: &[&ImageTensor]) -> Result<ImageTensor> {
        let parts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Ok(Self(Tensor::cat_batch(&parts)?))
    }
}

/// Parameters of one synthetic scene. `n_shapes = None` draws 3–6 ellipses
/// from the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    #[serde(default)]
    pub n_shapes: Option<usize>,
}

impl SceneSpec {
    pub fn new(seed: u64, size: usize) -> Self {
        Self { seed, size, n_shapes: None }
    }

    /// The same spec with the ellipse count pinned to what the seed draws.
    pub fn resolved(&self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let drawn = rng.gen_range(3..=6);
        Self { n_shapes: Some(self.n_shapes.unwrap_or(drawn)), ..*self }
    }
}

/// Per-scene seed for item `index` of a corpus generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
    color: [f32; 3],
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

const SUPERSAMPLE: usize = 4;

/// Two-colour linear gradient with anti-aliased filled ellipses on top.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<ImageTensor> {
    let size = spec.size;
    if size < 8 || !size.is_power_of_two() {
        return Err(invalid(format!("scene size must be a power of two >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let drawn: usize = rng.gen_range(3..=6);
    let n_shapes = spec.n_shapes.unwrap_or(drawn);
    let color = |rng: &mut ChaCha8Rng, lim: f32| -> [f32; 3] {
        [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim), rng.gen_range(-lim..lim)]
    };
    let c0 = color(&mut rng, 0.9);
    let c1 = color(&mut rng, 0.9);
    let angle: f32 = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());
    let shapes: Vec<Ellipse> = (0..n_shapes)
        .map(|_| {
            let rot: f32 = rng.gen_range(0.0..PI);
            Ellipse {
                cx: rng.gen_range(0.15..0.85),
                cy: rng.gen_range(0.15..0.85),
                rx: rng.gen_range(0.08..0.3),
                ry: rng.gen_range(0.08..0.3),
                cos: rot.cos(),
                sin: rot.sin(),
                color: color(&mut rng, 1.0),
            }
        })
        .collect();

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let inv = 1.0 / size as f32;
    let sub = 1.0 / (SUPERSAMPLE as f32 * size as f32);
    for py in 0..size {
        for px in 0..size {
            let (u, v) = ((px as f32 + 0.5) * inv, (py as f32 + 0.5) * inv);
            let t = (0.5 + 0.7 * ((u - 0.5) * gx + (v - 0.5) * gy)).clamp(0.0, 1.0);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                rgb[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for e in &shapes {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f32 * inv + (sx as f32 + 0.5) * sub;
                        let y = py as f32 * inv + (sy as f32 + 0.5) * sub;
                        hits += usize::from(e.contains(x, y));
                    }
                }
                let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cov) + e.color[c] * cov;
                }
            }
            for c in 0..3 {
                data[c * plane + py * size + px] = rgb[c].clamp(-1.0, 1.0);
            }
        }
    }
    ImageTensor::new(Tensor::new(&[1, 3, size, size], data)?)
}

const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Mirror an out-of-range index back inside `0..n` without repeating the
/// edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// `[out_len, in_len]` resampling matrix of the bicubic kernel under the
/// area-aligned mapping `src = (dst + 0.5)·in/out − 0.5`.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Tensor {
    let mut m = vec![0.0f64; out_len * in_len];
    let ratio = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * ratio - 0.5;
        let base = src.floor();
        for tap in -1..=2 {
            let pos = base + tap as f64;
            let w = cubic_kernel(src - pos);
            if w != 0.0 {
                m[o * in_len + reflect_index(pos as isize, in_len)] += w;
            }
        }
    }
    Tensor::new(&[out_len, in_len], m.into_iter().map(|v| v as f32).collect()).expect("sized above")
}

/// Differentiable bicubic resize of an `N×C×H×W` var, clamped to `[-1, 1]`.
pub fn resize_var<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid(format!("resize target {out_h}x{out_w} must be positive")));
    }
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(GleanError::Shape(format!("resize expects N×C×H×W, got {shape:?}")));
    }
    let rows = Rc::new(bicubic_matrix(shape[2], out_h));
    let cols = Rc::new(bicubic_matrix(shape[3], out_w));
    Ok(x.separable(rows, cols)?.clamp(-1.0, 1.0))
}

pub fn bicubic_resize(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let tape = Tape::new();
    let y = resize_var(tape.constant(img.tensor().clone()), out_h, out_w)?;
    ImageTensor::new(y.value().as_ref().clone())
}

/// An HR image with the LR image derived from it.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub scale: usize,
}

pub fn make_pair(hr: &ImageTensor, scale: usize) -> Result<PairedSample> {
    if scale == 0 || !hr.height().is_multiple_of(scale) || !hr.width().is_multiple_of(scale) {
        return Err(invalid(format!(
            "{}x{} image is not divisible by scale {scale}",
            hr.height(),
            hr.width()
        )));
    }
    let lr = bicubic_resize(hr, hr.height() / scale, hr.width() / scale)?;
    Ok(PairedSample { lr, hr: hr.clone(), scale })
}

fn image_err(e: image::ImageError) -> GleanError {
    match e {
        image::ImageError::IoError(io) => GleanError::Io(io),
        other => GleanError::UnsupportedFormat(other.to_string()),
    }
}

pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Round every value through the 8-bit encoding used for PNG files.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    ImageTensor(img.tensor().map(|v| from_byte(to_byte(v))))
}

/// Lay a batch out as one image, `cols` tiles per row, unused cells black.
pub fn tile_grid(batch: &ImageTensor, cols: usize) -> Result<ImageTensor> {
    if cols == 0 || batch.batch() == 0 {
        return Err(invalid("grid needs at least one image and one column"));
    }
    let (n, h, w) = (batch.batch(), batch.height(), batch.width());
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(&[1, 3, gh, gw], -1.0);
    let src = batch.tensor().data();
    let dst = out.data_mut();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let s = ((i * 3 + c) * h + y) * w;
                let d = (c * gh + oy + y) * gw + ox;
                dst[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(ImageTensor(out))
}

/// Write a single image (batch 1) as 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if img.batch() != 1 {
        return Err(invalid(format!("save_image takes one image, got a batch of {}", img.batch())));
    }
    let (h, w) = (img.height(), img.width());
    let d = img.tensor().data();
    let plane = h * w;
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    buf.save_with_format(path, ImageFormat::Png).map_err(image_err)
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode().map_err(image_err)?;
    let DynamicImage::ImageRgb8(buf) = img else {
        return Err(GleanError::UnsupportedFormat(format!("{} is not 8-bit RGB", path.display())));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in buf.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = from_byte(p.0[c]);
        }
    }
    ImageTensor::new(Tensor::new(&[1, 3, h, w], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One manifest line: a resolved [`SceneSpec`] plus where it was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub file: String,
    pub split: Split,
    #[serde(flatten)]
    pub scene: SceneSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Scene records for a corpus of `train` + `val` scenes derived from `seed`.
pub fn corpus_records(train: usize, val: usize, size: usize, seed: u64) -> Vec<CorpusRecord> {
    (0..train + val)
        .map(|i| {
            let split = if i < train { Split::Train } else { Split::Val };
            let id = format!("{:05}", i);
            CorpusRecord {
                file: format!("{id}.png"),
                id,
                split,
                scene: SceneSpec::new(scene_seed(seed, i as u64), size).resolved(),
            }
        })
        .collect()
}

/// Render a corpus as PNG files plus a JSON manifest array in `dir`.
pub fn write_corpus(dir: &Path, train: usize, val: usize, size: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    fs::create_dir_all(dir)?;
    let records = corpus_records(train, val, size, seed);
    for r in &records {
        save_image(&generate_synthetic_scene(&r.scene)?, &dir.join(&r.file))?;
    }
    let mut json = serde_json::to_vec_pretty(&records)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(records)
}

/// Named images of one split.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: String, img: ImageTensor) {
        self.ids.push(id);
        self.images.push(img);
    }

    pub fn take(&self, n: usize) -> ImageSet {
        ImageSet { ids: self.ids.iter().take(n).cloned().collect(), images: self.images.iter().take(n).cloned().collect() }
    }

    /// Bicubically resample every image whose size differs from `res`.
    pub fn at_resolution(&self, res: usize) -> Result<ImageSet> {
        let images = self
            .images
            .iter()
            .map(|img| if img.height() == res && img.width() == res { Ok(img.clone()) } else { bicubic_resize(img, res, res) })
            .collect::<Result<_>>()?;
        Ok(ImageSet { ids: self.ids.clone(), images })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: ImageSet,
    pub val: ImageSet,
}

impl Corpus {
    /// Render scenes straight into memory, skipping PNG quantisation.
    pub fn synthetic(train: usize, val: usize, size: usize, seed: u64) -> Result<Self> {
        let mut corpus = Corpus::default();
        for r in corpus_records(train, val, size, seed) {
            let img = generate_synthetic_scene(&r.scene)?;
            match r.split {
                Split::Train => corpus.train.push(r.id, img),
                Split::Val => corpus.val.push(r.id, img),
            }
        }
        Ok(corpus)
    }

    /// Load a corpus directory written by [`write_corpus`]. A directory
    /// without a manifest is read as a flat train split of its PNG files.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            let records: Vec<CorpusRecord> = serde_json::from_slice(&fs::read(&manifest)?)?;
            for r in records {
                let img = load_image(&dir.join(&r.file))?;
                match r.split {
                    Split::Train => corpus.train.push(r.id, img),
                    Split::Val => corpus.val.push(r.id, img),
                }
            }
        } else {
            let mut files: Vec<_> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                corpus.train.push(id, load_image(&f)?);
            }
        }
        Ok(corpus)
    }
}
