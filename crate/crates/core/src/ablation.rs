//! Controlled comparisons: several GLEAN variants trained around one shared
//! frozen bank under the same budget and seeds, then scored on the
//! validation split next to the bicubic baseline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bank::BankModel;
use crate::error::{invalid, Result};
use crate::imaging::{bicubic_resize, Corpus};
use crate::losses::{FeatureNet, FEATURE_NET_SEED};
use crate::metrics::{evaluate_split, EvalOptions, EvalReport, Method};
use crate::model::GleanConfig;
use crate::training::{train_glean, GleanTrainConfig, RunOutput};

/// One variant: the three structural switches of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub enc_inject_depth: Option<usize>,
    #[serde(default)]
    pub bank_feature_depth: Option<usize>,
    #[serde(default = "yes")]
    pub use_decoder: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Shared model and training settings; each cell overrides only its
    /// switches.
    #[serde(default)]
    pub base: GleanTrainConfig,
    pub cells: Vec<AblationCell>,
    /// Score only the first `val_count` validation images.
    #[serde(default)]
    pub val_count: Option<usize>,
}

impl AblationGrid {
    /// Full model, no bank features in the decoder, and latent-only
    /// generation, at 8× on 64×64 outputs with 2000 iterations each. The
    /// short budget uses a step size ten times the long-run default.
    pub fn standard() -> Self {
        let mut base = GleanTrainConfig::default();
        base.model.scale = 8;
        base.model.hr_res = 64;
        base.train.iterations = 2000;
        base.train.lr_init = 1e-3;
        base.train.lr_min = 1e-6;
        base.train.checkpoint_every = 500;
        let cell = |name: &str, inject, feats, dec| AblationCell {
            name: name.into(),
            enc_inject_depth: inject,
            bank_feature_depth: feats,
            use_decoder: dec,
        };
        Self {
            base,
            cells: vec![
                cell("full", None, None, true),
                cell("no_bank_features", None, Some(0), true),
                cell("latent_only", Some(0), Some(0), false),
            ],
            val_count: None,
        }
    }

    pub fn cell_config(&self, cell: &AblationCell) -> GleanConfig {
        GleanConfig {
            enc_inject_depth: cell.enc_inject_depth,
            bank_feature_depth: cell.bank_feature_depth,
            use_decoder: cell.use_decoder,
            ..self.base.model.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub config: GleanConfig,
    pub trainable_params: usize,
    pub train_ms: u64,
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub iterations: usize,
    pub cells: Vec<CellResult>,
    pub bicubic: EvalReport,
    /// Training plus evaluation time over all cells.
    pub total_ms: u64,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// One line per method with mean metrics.
    pub fn summary(&self) -> String {
        let mut rows = vec![("bicubic".to_string(), &self.bicubic)];
        rows.extend(self.cells.iter().map(|c| (c.name.clone(), &c.eval)));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<w$}  {:>10}  {:>12}  {:>12}\n", "method", "PSNR(dB)", "LPIPS-proxy", "EmbCos-proxy");
        for (name, r) in rows {
            out.push_str(&format!(
                "{:<w$}  {:>10}  {:>12.6}  {:>12.6}\n",
                name,
                crate::metrics::format_psnr(r.means.psnr),
                r.means.lpips_proxy,
                r.means.embcos_proxy
            ));
        }
        out
    }
}

/// Train and score every cell. With `out_dir`, each cell's checkpoint and
/// log are written under `<out_dir>/<cell name>`.
pub fn run_ablation(corpus: &Corpus, bank: &BankModel, grid: &AblationGrid, out_dir: Option<&Path>) -> Result<AblationReport> {
    if grid.cells.is_empty() {
        return Err(invalid("ablation grid has no cells"));
    }
    let mut names: Vec<&str> = grid.cells.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("ablation cell names must be unique"));
    }
    let res = bank.bank.cfg.out_res;
    let train = corpus.train.at_resolution(res)?;
    let mut val = corpus.val.at_resolution(res)?;
    if let Some(n) = grid.val_count {
        val = val.take(n);
    }
    let net = FeatureNet::new(FEATURE_NET_SEED);
    let scale = grid.base.model.scale;
    let bicubic = evaluate_split(Method::Bicubic, "val", &val, scale, &net, EvalOptions::default(), |lr| {
        bicubic_resize(lr, lr.height() * scale, lr.width() * scale)
    })?;
    let start = Instant::now();
    let mut cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let cfg = grid.cell_config(cell);
        let out = match out_dir {
            Some(d) => RunOutput::at(d.join(&cell.name)),
            None => RunOutput::default(),
        };
        let t = Instant::now();
        let run = train_glean(&train, &val, bank, &grid.base.train, &cfg, &out)?;
        let train_ms = t.elapsed().as_millis() as u64;
        let eval = evaluate_split(Method::Glean, "val", &val, scale, &net, EvalOptions::default(), |lr| run.model.infer(lr))?;
        cells.push(CellResult {
            name: cell.name.clone(),
            config: run.model.cfg.clone(),
            trainable_params: run.model.count_parameters(false),
            train_ms,
            checkpoint: out.stem.clone(),
            eval,
        });
    }
    Ok(AblationReport { iterations: grid.base.train.iterations, cells, bicubic, total_ms: start.elapsed().as_millis() as u64 })
}
