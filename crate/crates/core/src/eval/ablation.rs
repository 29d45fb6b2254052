//! Cartesian ablation grid over score variant, P, pixel selection and
//! encoder design. Each variant is trained (or loaded), run through a
//! downstream adapter, and evaluated into one report row.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assets::FeatureNet;
use crate::candidates::{CandidateSet, ScoreVariant};
use crate::data::MaskedScene;
use crate::error::{CsfError, Result};
use crate::eval::adapters::{adapter_by_name, run_downstream};
use crate::eval::report::{self, evaluate, EvalSample, MetricNets, MetricReport};
use crate::fusion::EncoderDesign;
use crate::model::CsfModel;
use crate::trainer::{self, Checkpoint, TrainConfig, TrainItem, LATEST};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub score_variant: Vec<ScoreVariant>,
    pub p: Vec<usize>,
    pub pixel_selection: Vec<bool>,
    pub encoder_design: Vec<EncoderDesign>,
}

impl Default for Axes {
    /// Every axis pinned to the reference setting.
    fn default() -> Self {
        Axes {
            score_variant: vec![ScoreVariant::MseLpips],
            p: vec![3],
            pixel_selection: vec![true],
            encoder_design: vec![EncoderDesign::Dual],
        }
    }
}

/// Grid file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub axes: Axes,
    /// Holds `<variant_id>/latest.safetensors` per variant.
    pub checkpoint_dir: Option<PathBuf>,
    /// Train variants lacking a checkpoint for this many steps.
    pub train_steps: Option<usize>,
    pub adapter: String,
    /// Data and output locations used by the command-line runner; relative
    /// paths resolve against the grid file.
    pub scenes: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            axes: Axes::default(),
            checkpoint_dir: None,
            train_steps: None,
            adapter: "identity".into(),
            scenes: None,
            candidates: None,
            out: None,
        }
    }
}

impl AblationGrid {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CsfError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut grid = Self::from_toml_str(&fs::read_to_string(path).map_err(|e| CsfError::io(path, e))?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut grid.checkpoint_dir, &mut grid.scenes, &mut grid.candidates, &mut grid.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(grid)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let a = &self.axes;
        let mut out = Vec::new();
        for &score_variant in &a.score_variant {
            for &p in &a.p {
                for &pixel_selection in &a.pixel_selection {
                    for &encoder_design in &a.encoder_design {
                        out.push(Variant {
                            score_variant,
                            p,
                            pixel_selection,
                            encoder_design,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub score_variant: ScoreVariant,
    pub p: usize,
    pub pixel_selection: bool,
    pub encoder_design: EncoderDesign,
}

impl Variant {
    /// Filesystem-safe, e.g. `mse-lpips_p3_sel_dual`.
    pub fn id(&self) -> String {
        let sv = self.score_variant.as_str().replace('+', "-");
        let sel = if self.pixel_selection { "sel" } else { "nosel" };
        let enc = match self.encoder_design {
            EncoderDesign::Single => "single",
            EncoderDesign::Dual => "dual",
        };
        format!("{sv}_p{}_{sel}_{enc}", self.p)
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            score_variant: self.score_variant,
            p: self.p,
            pixel_selection: self.pixel_selection,
            encoder_design: self.encoder_design,
            ..base.clone()
        }
    }

    fn matches(&self, cfg: &TrainConfig) -> bool {
        cfg.score_variant == self.score_variant
            && cfg.p == self.p
            && cfg.pixel_selection == self.pixel_selection
            && cfg.encoder_design == self.encoder_design
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant_id: String,
    pub variant: Variant,
    pub complete: bool,
    pub reason: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
    pub report: Option<MetricReport>,
}

/// One scene with its full candidate pool; each variant picks its own top P.
#[derive(Clone, Debug)]
pub struct AblationItem {
    pub scene: MaskedScene,
    pub candidates: CandidateSet,
}

pub struct AblationContext<'a> {
    pub base: &'a TrainConfig,
    pub items: &'a [AblationItem],
    pub extractor: Arc<FeatureNet>,
    pub nets: &'a MetricNets,
    /// Trained checkpoints and reports land here when set.
    pub out_dir: Option<&'a Path>,
}

/// Scenes under `scenes/<id>/` joined with their full candidate pools.
pub fn load_items(scenes: &Path, candidates: &Path) -> Result<Vec<AblationItem>> {
    let mut items = Vec::new();
    for (id, dir) in crate::candidates::list_candidate_dirs(candidates)? {
        let scene_dir = scenes.join(&id);
        if !scene_dir.join("meta.json").is_file() {
            log::warn!("candidates for `{id}` have no scene in {}; skipped", scenes.display());
            continue;
        }
        items.push(AblationItem {
            scene: crate::data::load_scene(&scene_dir)?,
            candidates: crate::candidates::load_candidate_set(&dir)?,
        });
    }
    if items.is_empty() {
        return Err(CsfError::EmptyDirectory(candidates.to_path_buf()));
    }
    Ok(items)
}

fn items_for(variant: &Variant, items: &[AblationItem]) -> Result<Vec<TrainItem>> {
    items
        .iter()
        .map(|it| TrainItem::from_set(it.scene.clone(), &it.candidates, variant.p, variant.score_variant))
        .collect()
}

fn obtain_model(
    variant: &Variant,
    grid: &AblationGrid,
    ctx: &AblationContext,
    config: &TrainConfig,
    train_items: &[TrainItem],
) -> std::result::Result<(CsfModel, Option<PathBuf>), String> {
    if variant.p == 1 {
        let model = CsfModel::new(config.model_config(), ctx.extractor.clone()).map_err(|e| e.to_string())?;
        return Ok((model, None));
    }
    let id = variant.id();
    if let Some(dir) = &grid.checkpoint_dir {
        let path = dir.join(&id).join(LATEST);
        if path.exists() {
            let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
            if !variant.matches(&ckpt.config) {
                return Err(format!("checkpoint {} was trained for a different variant", path.display()));
            }
            let model = ckpt.model(ctx.extractor.clone()).map_err(|e| e.to_string())?;
            return Ok((model, Some(path)));
        }
    }
    let Some(steps) = grid.train_steps else {
        return Err(format!("no checkpoint for `{id}` and no training budget"));
    };
    let cfg = TrainConfig {
        max_steps: Some(steps),
        ..config.clone()
    };
    let out = ctx.out_dir.map(|d| d.join(&id));
    let outcome = trainer::train(&cfg, train_items, ctx.extractor.clone(), out.as_deref()).map_err(|e| e.to_string())?;
    let ckpt = out.map(|d| d.join(LATEST)).filter(|p| p.exists());
    Ok((outcome.model, ckpt))
}

fn run_variant(variant: &Variant, grid: &AblationGrid, ctx: &AblationContext) -> AblationRow {
    let config = variant.apply(ctx.base);
    let mut row = AblationRow {
        variant_id: variant.id(),
        variant: *variant,
        complete: false,
        reason: None,
        checkpoint: None,
        config: config.clone(),
        report: None,
    };
    let result = (|| -> std::result::Result<(MetricReport, Option<PathBuf>), String> {
        config.validate().map_err(|e| e.to_string())?;
        let train_items = items_for(variant, ctx.items).map_err(|e| e.to_string())?;
        let (model, ckpt) = obtain_model(variant, grid, ctx, &config, &train_items)?;
        let adapter = adapter_by_name(&grid.adapter).map_err(|e| e.to_string())?;
        let samples = train_items
            .iter()
            .map(|it| {
                let (guide, _) = model.infer(&it.scene, &it.candidates)?;
                Ok(EvalSample {
                    restored: run_downstream(Some(&guide), &it.scene, adapter.as_ref())?,
                    gt: it.scene.image.clone(),
                    mask: it.scene.mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let rep = evaluate(&variant.id(), &samples, ctx.nets).map_err(|e| e.to_string())?;
        Ok((rep, ckpt))
    })();
    match result {
        Ok((rep, ckpt)) => {
            row.complete = true;
            row.report = Some(rep);
            row.checkpoint = ckpt;
        }
        Err(reason) => {
            log::warn!("ablation variant `{}` incomplete: {reason}", row.variant_id);
            row.reason = Some(reason);
        }
    }
    row
}

/// Run every Cartesian variant; failures mark the row incomplete and the
/// run continues. With `out_dir` set, writes `ablation.jsonl`,
/// `ablation.txt` and metric charts there.
pub fn ablation_run(grid: &AblationGrid, ctx: &AblationContext) -> Result<Vec<AblationRow>> {
    if ctx.items.is_empty() {
        return Err(CsfError::InvalidArgument("ablation needs at least one scene".into()));
    }
    let rows: Vec<AblationRow> = grid.variants().iter().map(|v| run_variant(v, grid, ctx)).collect();
    let done: Vec<&MetricReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    report::check_comparable(&done)?;
    if let Some(dir) = ctx.out_dir {
        fs::create_dir_all(dir).map_err(|e| CsfError::io(dir, e))?;
        report::write_jsonl(&dir.join("ablation.jsonl"), &rows)?;
        fs::write(dir.join("ablation.txt"), format_rows(&rows)).map_err(|e| CsfError::io(dir, e))?;
        let reports: Vec<MetricReport> = done.into_iter().cloned().collect();
        report::write_charts(dir, "ablation", &reports)?;
    }
    Ok(rows)
}

pub fn format_rows(rows: &[AblationRow]) -> String {
    let reports: Vec<MetricReport> = rows.iter().filter_map(|r| r.report.clone()).collect();
    let mut s = report::format_table(&reports);
    for r in rows.iter().filter(|r| !r.complete) {
        s.push_str(&format!(
            "{}  incomplete: {}\n",
            r.variant_id,
            r.reason.as_deref().unwrap_or("unknown")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_cartesian_product() {
        let g = AblationGrid::from_toml_str(
            r#"
            [axes]
            score_variant = ["mse", "lpips", "mse+lpips"]
            p = [1, 3, 5]
            pixel_selection = [true, false]
            encoder_design = ["single", "dual"]
            "#,
        )
        .unwrap();
        let v = g.variants();
        assert_eq!(v.len(), 36);
        let ids: std::collections::BTreeSet<String> = v.iter().map(Variant::id).collect();
        assert_eq!(ids.len(), 36);
        assert!(ids.contains("mse-lpips_p3_sel_dual"));
    }

    #[test]
    fn single_axis_uses_reference_elsewhere() {
        let g = AblationGrid::from_toml_str("[axes]\np = [1, 3, 5]\n").unwrap();
        let v = g.variants();
        assert_eq!(v.iter().map(|v| v.p).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(v.iter().all(|v| v.encoder_design == EncoderDesign::Dual && v.pixel_selection));
        assert!(AblationGrid::from_toml_str("[axes]\nq = [1]\n").is_err());
    }
}
