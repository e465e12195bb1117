use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glean::ablation::{run_ablation, AblationGrid};
use glean::bank::{BankModel, BANK_KIND};
use glean::checkpoint::Checkpoint;
use glean::imaging::{bicubic_resize, load_image, make_pair, save_image, write_corpus, Corpus, ImageSet};
use glean::inversion::{invert, write_trace, InversionConfig, LatentMode};
use glean::losses::{FeatureNet, FEATURE_NET_SEED};
use glean::metrics::{evaluate_split, EvalOptions, Method};
use glean::model::{GleanModel, GLEAN_KIND};
use glean::training::{pretrain_bank, train_glean, GleanTrainConfig, PretrainConfig, RunOutput, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Cli, Command, Global, MethodArg, ModeArg, SplitArg};

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::GenData { out, count, val_count, size } => gen_data(&out, count, val_count, size, g),
        Command::PretrainBank { data, config, out, iterations } => pretrain(&data, config.as_deref(), &out, iterations, g),
        Command::Train { data, bank, config, out, iterations } => train(&data, &bank, config.as_deref(), &out, iterations, g),
        Command::Infer { model, input, out, scale } => infer(&model, &input, &out, scale),
        Command::Invert { bank, input, steps, mode, lr, out } => invert_cmd(&bank, &input, steps, mode, lr, &out, g),
        Command::Eval { model, bank, data, method, report, scale, split, count, steps, quantize } => {
            let args = EvalArgs { model, bank, method, scale, split, count, steps, quantize };
            eval(&data, &report, &args, g)
        }
        Command::Ablate { data, bank, grid, report, out, iterations } => {
            ablate(&data, &bank, grid.as_deref(), &report, out.as_deref(), iterations, g)
        }
        Command::Retouch { model, input, out } => retouch(&model, &input, &out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn apply_global(train: &mut TrainConfig, g: Global, iterations: Option<usize>) {
    if let Some(seed) = g.seed {
        train.seed = seed;
    }
    train.deterministic |= g.deterministic;
    if let Some(n) = iterations {
        train.iterations = n;
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn gen_data(out: &Path, count: usize, val_count: usize, size: usize, g: Global) -> Result<()> {
    let records = write_corpus(out, count, val_count, size, g.seed.unwrap_or(0))?;
    println!("wrote {} scenes to {}", records.len(), out.display());
    Ok(())
}

fn pretrain(data: &Path, config: Option<&Path>, out: &Path, iterations: Option<usize>, g: Global) -> Result<()> {
    let mut cfg: PretrainConfig = match config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    apply_global(&mut cfg.train, g, iterations);
    let corpus = load_corpus(data)?;
    let train = corpus.train.at_resolution(cfg.bank.out_res)?;
    let run = pretrain_bank(&train, &cfg, &RunOutput::at(out))?;
    let last = run.log.last().context("empty training log")?;
    println!("bank saved to {} (step {}: l_gen {:.4}, l_disc {:.4})", out.display(), last.step, last.l_gen, last.l_disc);
    Ok(())
}

fn train(data: &Path, bank: &Path, config: Option<&Path>, out: &Path, iterations: Option<usize>, g: Global) -> Result<()> {
    let mut cfg: GleanTrainConfig = match config {
        Some(p) => read_json(p)?,
        None => GleanTrainConfig::default(),
    };
    apply_global(&mut cfg.train, g, iterations);
    let bank = BankModel::load(bank).with_context(|| format!("loading bank {}", bank.display()))?;
    let corpus = load_corpus(data)?;
    let res = bank.bank.cfg.out_res;
    let run = train_glean(&corpus.train.at_resolution(res)?, &corpus.val.at_resolution(res)?, &bank, &cfg.train, &cfg.model, &RunOutput::at(out))?;
    let last = run.log.last().context("empty training log")?;
    print!("model saved to {} (step {}: l_total {:.5})", out.display(), last.step, last.l_total);
    match run.checkpoints.last() {
        Some(c) if c.val_psnr.is_finite() => println!(", val PSNR {:.3} dB", c.val_psnr),
        _ => println!(),
    }
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn load_model(path: &Path) -> Result<GleanModel> {
    GleanModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn infer(model: &Path, input: &Path, out: &Path, scale: Option<usize>) -> Result<()> {
    let model = load_model(model)?;
    if let Some(s) = scale.filter(|&s| s != model.cfg.scale) {
        bail!("model is trained for scale {}, not {s}", model.cfg.scale);
    }
    let files = png_inputs(input)?;
    for f in &files {
        let lr = load_image(f).with_context(|| format!("reading {}", f.display()))?;
        let sr = model.infer(&lr).with_context(|| format!("super-resolving {}", f.display()))?;
        save_image(&sr, &out.join(format!("{}.png", stem(f))))?;
    }
    println!("wrote {} image(s) to {}", files.len(), out.display());
    Ok(())
}

/// A bank from either a bank checkpoint or a model checkpoint.
fn load_bank(path: &Path) -> Result<BankModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    match ck.kind.as_str() {
        BANK_KIND => Ok(BankModel::from_checkpoint(&ck)?),
        GLEAN_KIND => {
            let model = GleanModel::from_checkpoint(&ck)?;
            let mut bank = BankModel::new(&model.cfg.bank)?;
            bank.store.load_matching(&model.store, glean::bank::BANK_PREFIX)?;
            Ok(bank)
        }
        other => bail!("{} holds a {other:?} checkpoint, expected a bank or model", path.display()),
    }
}

fn inversion_config(steps: usize, mode: ModeArg, lr: Option<f64>, g: Global) -> InversionConfig {
    let defaults = InversionConfig::default();
    let lr = lr.unwrap_or(defaults.opt_lr);
    InversionConfig {
        steps,
        opt_lr: lr,
        opt_lr_min: defaults.opt_lr_min.min(lr),
        mode: match mode {
            ModeArg::Single => LatentMode::Single,
            ModeArg::Multi => LatentMode::Multi,
        },
        seed: g.seed.unwrap_or(0),
        ..defaults
    }
}

fn invert_cmd(bank: &Path, input: &Path, steps: usize, mode: ModeArg, lr: Option<f64>, out: &Path, g: Global) -> Result<()> {
    let bank = load_bank(bank)?;
    let img = load_image(input).with_context(|| format!("reading {}", input.display()))?;
    let cfg = inversion_config(steps, mode, lr, g);
    let res = invert(&img, &bank.bank, &bank.store, &cfg)?;
    let name = stem(input);
    save_image(&res.image, &out.join(format!("{name}.png")))?;
    write_trace(&out.join(format!("{name}.trace.jsonl")), &res.trace)?;
    let latents = res.latents.tensor();
    write_json(&out.join(format!("{name}.latents.json")), &serde_json::json!({ "shape": latents.shape(), "data": latents.data() }))?;
    println!("inverted {} in {steps} steps, final objective {:.6e}", input.display(), res.final_objective);
    Ok(())
}

struct EvalArgs {
    model: Option<PathBuf>,
    bank: Option<PathBuf>,
    method: MethodArg,
    scale: Option<usize>,
    split: SplitArg,
    count: Option<usize>,
    steps: usize,
    quantize: bool,
}

fn eval(data: &Path, report: &Path, a: &EvalArgs, g: Global) -> Result<()> {
    let corpus = load_corpus(data)?;
    let (split_name, mut set): (&str, ImageSet) = match a.split {
        SplitArg::Train => ("train", corpus.train),
        SplitArg::Val => ("val", corpus.val),
    };
    if let Some(n) = a.count {
        set = set.take(n);
    }
    let net = FeatureNet::new(FEATURE_NET_SEED);
    let opts = EvalOptions { quantize: a.quantize };
    let model = a.model.as_deref().map(load_model).transpose()?;
    let result = match a.method {
        MethodArg::Bicubic => {
            let s = a.scale.or(model.as_ref().map(|m| m.cfg.scale)).unwrap_or(4);
            evaluate_split(Method::Bicubic, split_name, &set, s, &net, opts, |lr| {
                bicubic_resize(lr, lr.height() * s, lr.width() * s)
            })?
        }
        MethodArg::Glean => {
            let model = model.context("--method glean needs --model")?;
            if let Some(s) = a.scale.filter(|&s| s != model.cfg.scale) {
                bail!("model is trained for scale {}, not {s}", model.cfg.scale);
            }
            let set = set.at_resolution(model.cfg.hr_res)?;
            evaluate_split(Method::Glean, split_name, &set, model.cfg.scale, &net, opts, |lr| model.infer(lr))?
        }
        MethodArg::Inversion => {
            let bank = match (&a.bank, &a.model) {
                (Some(b), _) => load_bank(b)?,
                (None, Some(m)) => load_bank(m)?,
                (None, None) => bail!("--method inversion needs --bank or --model"),
            };
            let s = a
                .scale
                .or(model.as_ref().map(|m| m.cfg.scale))
                .context("--method inversion with a bank checkpoint needs --scale")?;
            let cfg = inversion_config(a.steps, ModeArg::Multi, None, g);
            let set = set.at_resolution(bank.bank.cfg.out_res)?;
            evaluate_split(Method::Inversion, split_name, &set, s, &net, opts, |lr| {
                Ok(invert(lr, &bank.bank, &bank.store, &cfg)?.image)
            })?
        }
    };
    write_json(report, &result)?;
    let table = result.table();
    fs::write(report.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate(data: &Path, bank: &Path, grid: Option<&Path>, report: &Path, out: Option<&Path>, iterations: Option<usize>, g: Global) -> Result<()> {
    let mut grid: AblationGrid = match grid {
        Some(p) => read_json(p)?,
        None => AblationGrid::standard(),
    };
    apply_global(&mut grid.base.train, g, iterations);
    let bank = BankModel::load(bank).with_context(|| format!("loading bank {}", bank.display()))?;
    let corpus = load_corpus(data)?;
    let result = run_ablation(&corpus, &bank, &grid, out)?;
    write_json(report, &result)?;
    let summary = result.summary();
    fs::write(report.with_extension("txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn retouch(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let img = load_image(input).with_context(|| format!("reading {}", input.display()))?;
    let res = model.cfg.hr_res;
    if img.height() != res || img.width() != res {
        bail!("retouch expects a {res}x{res} image for this model, got {}x{}", img.height(), img.width());
    }
    let pair = make_pair(&img, model.cfg.scale)?;
    save_image(&model.infer(&pair.lr)?, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
