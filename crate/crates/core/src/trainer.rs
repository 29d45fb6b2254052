//! End-to-end optimization of the fusion decoder and score heads in soft
//! compositing mode, with checkpoints, a per-step loss log and guidance
//! inference from a checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use csf_autograd::{par, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::assets::FeatureNet;
use crate::candidates::{self, CandidateCompletion, CandidateSet, ScoreVariant};
use crate::data::{self, MaskedScene};
use crate::error::{CsfError, Result};
use crate::fusion::{EncoderDesign, FuseOptions, FusionConfig};
use crate::model::{CsfModel, ModelConfig, Prepared};
use crate::objectives::{self, LossBreakdown, LossInputs};
use crate::select::GuidanceImage;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEVICE_ENV: &str = "CSF_DEVICE";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const LATEST: &str = "latest.safetensors";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const OPT_M: &str = "opt.m/";
const OPT_V: &str = "opt.v/";

/// Flat key-value training configuration (TOML on disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub p: usize,
    pub n: usize,
    pub seed: u64,
    pub resolution: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub device: String,
    pub score_variant: ScoreVariant,
    pub threshold: f64,
    pub encoder_design: EncoderDesign,
    pub pixel_selection: bool,
    pub patch: usize,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub ssn_hidden: usize,
    pub psn_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            lr: 2e-4,
            batch_size: 12,
            epochs: 200,
            lambda: objectives::DEFAULT_LAMBDA,
            tau_start: 1.0,
            tau_end: 0.1,
            p: m.fusion.candidates,
            n: candidates::DEFAULT_N,
            seed: 0,
            resolution: m.fusion.resolution,
            weight_decay: 0.01,
            grad_clip: 1.0,
            max_steps: None,
            device: "cpu".into(),
            score_variant: ScoreVariant::MseLpips,
            threshold: m.threshold,
            encoder_design: m.encoder_design,
            pixel_selection: m.pixel_selection,
            patch: m.fusion.patch,
            channels: m.fusion.channels,
            heads: m.fusion.heads,
            depths: m.fusion.depths,
            window: m.fusion.window,
            mlp_ratio: m.fusion.mlp_ratio,
            ssn_hidden: m.ssn_hidden,
            psn_hidden: m.psn_hidden,
        }
    }
}

impl TrainConfig {
    /// 32×32 geometry with a short, fast schedule.
    pub fn toy() -> Self {
        let m = ModelConfig::toy();
        TrainConfig {
            lr: 2e-3,
            batch_size: 4,
            epochs: 16,
            n: 4,
            resolution: m.fusion.resolution,
            patch: m.fusion.patch,
            channels: m.fusion.channels,
            heads: m.fusion.heads,
            depths: m.fusion.depths,
            window: m.fusion.window,
            mlp_ratio: m.fusion.mlp_ratio,
            ssn_hidden: m.ssn_hidden,
            psn_hidden: m.psn_hidden,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| CsfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| CsfError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CsfError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fusion: FusionConfig {
                resolution: self.resolution,
                patch: self.patch,
                channels: self.channels.clone(),
                heads: self.heads.clone(),
                depths: self.depths.clone(),
                window: self.window,
                mlp_ratio: self.mlp_ratio,
                candidates: self.p,
            },
            ssn_hidden: self.ssn_hidden,
            psn_hidden: self.psn_hidden,
            threshold: self.threshold,
            encoder_design: self.encoder_design,
            pixel_selection: self.pixel_selection,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsfError::Config(m));
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.p == 0 || self.n == 0 {
            return bad("lr, batch_size, epochs, p and n must be positive".into());
        }
        if self.n < self.p {
            return bad(format!("n = {} is smaller than p = {}", self.n, self.p));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be ≥ 0 and grad_clip > 0".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        self.model_config().validate()
    }

    /// Device from the config, overridden by `CSF_DEVICE`. Only `cpu` exists.
    pub fn resolve_device(&self) -> Result<String> {
        let device = std::env::var(DEVICE_ENV).unwrap_or_else(|_| self.device.clone());
        if device != "cpu" {
            return Err(CsfError::Config(format!("device `{device}` is not available; only `cpu` is supported")));
        }
        Ok(device)
    }

    pub fn steps_per_epoch(&self, items: usize) -> usize {
        items.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, items: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(items);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Linear anneal from `tau_start` at step 0 to `tau_end` at the last step.
    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tau_start;
        }
        let t = (step as f64 / (total - 1) as f64).min(1.0);
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// One scene with its top-`p` candidates.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub scene: MaskedScene,
    pub candidates: Vec<CandidateCompletion>,
}

impl TrainItem {
    pub fn from_set(scene: MaskedScene, set: &CandidateSet, p: usize, variant: ScoreVariant) -> Result<Self> {
        let picked = candidates::select_top_p_by(set.initial.clone(), set.scores.clone(), p, variant)?;
        if picked.selected.len() < p {
            return Err(CsfError::Config(format!(
                "scene `{}` has {} candidates, p = {p}",
                scene.image.id,
                picked.selected.len()
            )));
        }
        Ok(TrainItem {
            scene,
            candidates: picked.selected_candidates(),
        })
    }

    pub fn id(&self) -> &str {
        &self.scene.image.id
    }
}

/// Scenes under `scenes/<id>/` joined with `candidates/<id>/`; scenes
/// without candidates are skipped with a warning.
pub fn load_dataset(scenes: &Path, candidate_root: &Path, p: usize, variant: ScoreVariant) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (id, dir) in candidates::list_candidate_dirs(candidate_root)? {
        let scene_dir = scenes.join(&id);
        if !scene_dir.join("meta.json").is_file() {
            log::warn!("candidates for `{id}` have no scene in {}; skipped", scenes.display());
            continue;
        }
        let scene = data::load_scene(&scene_dir)?;
        let set = candidates::load_candidate_set(&dir)?;
        items.push(TrainItem::from_set(scene, &set, p, variant)?);
    }
    if items.is_empty() {
        return Err(CsfError::EmptyDirectory(candidate_root.to_path_buf()));
    }
    Ok(items)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            ..AdamW::default()
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| p.zeros_like());
            let v = self.v.entry(name.clone()).or_insert_with(|| p.zeros_like());
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + ADAM_EPS);
                pd[i] -= self.lr * (update + self.weight_decay * pd[i]);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Moving average of `values` over a trailing window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub epoch: usize,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub betas: Vec<f64>,
    pub optimizer: Option<AdamW>,
    pub loss_log: Option<String>,
    pub extractor_checksum: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        if let Some(opt) = &self.optimizer {
            for (k, t) in &opt.m {
                store.insert(format!("{OPT_M}{k}"), t.clone());
            }
            for (k, t) in &opt.v {
                store.insert(format!("{OPT_V}{k}"), t.clone());
            }
        }
        let mut meta = HashMap::new();
        meta.insert("version".into(), self.version.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("betas".into(), serde_json::to_string(&self.betas)?);
        meta.insert("extractor_checksum".into(), self.extractor_checksum.to_string());
        if let Some(opt) = &self.optimizer {
            meta.insert("optimizer_t".into(), opt.t.to_string());
        }
        if let Some(log) = &self.loss_log {
            meta.insert("loss_log".into(), log.clone());
        }
        archive::save(path, &store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = archive::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| CsfError::Checkpoint(format!("{} lacks `{k}`", path.display())))
        };
        let parse_err = |k: &str| CsfError::Checkpoint(format!("{} has a malformed `{k}`", path.display()));
        let version: u32 = field("version")?.parse().map_err(|_| parse_err("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(CsfError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config: TrainConfig = serde_json::from_str(field("config")?)?;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in store.iter() {
            if let Some(k) = name.strip_prefix(OPT_M) {
                m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix(OPT_V) {
                v.insert(k.to_string(), t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let optimizer = match meta.get("optimizer_t") {
            Some(t) => Some(AdamW {
                lr: config.lr,
                weight_decay: config.weight_decay,
                t: t.parse().map_err(|_| parse_err("optimizer_t"))?,
                m,
                v,
            }),
            None => None,
        };
        Ok(Checkpoint {
            version,
            step: field("step")?.parse().map_err(|_| parse_err("step"))?,
            epoch: field("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
            betas: serde_json::from_str(field("betas")?)?,
            extractor_checksum: field("extractor_checksum")?
                .parse()
                .map_err(|_| parse_err("extractor_checksum"))?,
            loss_log: meta.get("loss_log").cloned(),
            config,
            params,
            optimizer,
        })
    }

    /// Rebuild the model, refusing a mismatched extractor.
    pub fn model(&self, extractor: Arc<FeatureNet>) -> Result<CsfModel> {
        if extractor.checksum() != self.extractor_checksum {
            return Err(CsfError::Config(format!(
                "checkpoint was trained with a different `{}` extractor",
                extractor.name
            )));
        }
        CsfModel::from_params(self.config.model_config(), self.params.clone(), extractor)
    }
}

/// Result of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CsfModel,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CsfModel,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
}

struct ItemResult {
    loss: LossBreakdown,
    grads: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(config: TrainConfig, extractor: Arc<FeatureNet>) -> Result<Self> {
        config.validate()?;
        config.resolve_device()?;
        let model = CsfModel::new(config.model_config(), extractor)?;
        Ok(Trainer {
            optimizer: AdamW::new(config.lr, config.weight_decay),
            config,
            model,
            step: 0,
            epoch: 0,
        })
    }

    pub fn resume(ckpt: &Checkpoint, extractor: Arc<FeatureNet>) -> Result<Self> {
        ckpt.config.resolve_device()?;
        let model = ckpt.model(extractor)?;
        Ok(Trainer {
            config: ckpt.config.clone(),
            optimizer: ckpt
                .optimizer
                .clone()
                .unwrap_or_else(|| AdamW::new(ckpt.config.lr, ckpt.config.weight_decay)),
            model,
            step: ckpt.step,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self, loss_log: Option<String>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            params: self.model.params.clone(),
            betas: self.model.betas(),
            optimizer: Some(self.optimizer.clone()),
            loss_log,
            extractor_checksum: self.model.extractor.checksum(),
        }
    }

    pub fn prepare(&self, items: &[TrainItem]) -> Result<Vec<Prepared>> {
        par::map_slice(items, |it| self.model.prepare(&it.scene, &it.candidates))
            .into_iter()
            .collect()
    }

    fn item_loss(&self, prepared: &Prepared, tau: f64) -> Result<ItemResult> {
        let g = Graph::new();
        let s = self.model.scope(&g, true);
        let fwd = self.model.forward(&s, prepared, tau, FuseOptions::default())?;
        let level_guides: Vec<_> = fwd.level_guides.iter().map(|l| l.pixels).collect();
        let vars = objectives::loss_vars(LossInputs {
            guide: fwd.guide.pixels,
            gt: &prepared.gt,
            filled: &fwd.guide.fill,
            weights: fwd.guide.weights,
            level_guides: &level_guides,
            extractor: &self.model.extractor,
            lambda: self.config.lambda,
        })?;
        let loss = vars.breakdown();
        let grads = g.backward(vars.total).into_param_map();
        Ok(ItemResult { loss, grads })
    }

    /// Mean loss and gradients over a batch, reduced in item order.
    pub fn batch_gradients(
        &self,
        batch: &[&Prepared],
        tau: f64,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let results = par::map_slice(batch, |p| self.item_loss(p, tau))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in &results {
            for (k, g) in &r.grads {
                match grads.get_mut(k) {
                    Some(acc) => acc.accumulate(g),
                    None => {
                        grads.insert(k.clone(), g.clone());
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(scale);
        }
        let losses: Vec<LossBreakdown> = results.iter().map(|r| r.loss).collect();
        Ok((LossBreakdown::mean(&losses), grads))
    }

    /// One optimizer update. Non-finite losses abort with a diagnostic dump
    /// written to `dump_dir`.
    pub fn train_step(
        &mut self,
        batch: &[&Prepared],
        ids: &[&str],
        tau: f64,
        dump_dir: &Path,
    ) -> Result<StepRecord> {
        let (loss, mut grads) = self.batch_gradients(batch, tau)?;
        let grads_finite = grads.values().all(Tensor::all_finite);
        if !loss.is_finite() || !grads_finite {
            let dump = dump_dir.join(format!("nonfinite_step{:06}.json", self.step));
            let body = serde_json::json!({
                "step": self.step,
                "epoch": self.epoch,
                "tau": tau,
                "items": ids,
                "loss": loss,
                "finite_gradients": grads_finite,
            });
            archive::write_atomic(&dump, serde_json::to_string_pretty(&body)?.as_bytes())?;
            return Err(CsfError::NonFiniteLoss { step: self.step, dump });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        self.optimizer.step(&mut self.model.params, &grads);
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            tau,
            grad_norm,
            loss,
        };
        self.step += 1;
        Ok(record)
    }

    /// Run the configured schedule. With `out`, a checkpoint is written
    /// after every epoch (plus `latest.safetensors`) and every step is
    /// appended to `loss_log.jsonl`.
    pub fn fit(&mut self, items: &[TrainItem], out: Option<&Path>) -> Result<(Vec<StepRecord>, Vec<PathBuf>)> {
        if items.is_empty() {
            return Err(CsfError::InvalidArgument("empty training set".into()));
        }
        let prepared = self.prepare(items)?;
        let total = self.config.total_steps(items.len());
        let dump_dir = out.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| CsfError::io(dir, e))?;
                let path = dir.join(LOSS_LOG);
                Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| CsfError::io(&path, e))?,
                )
            }
            None => None,
        };
        if self.model.config.bypass() {
            log::warn!("p = 1 has no trainable parameters; writing an untrained checkpoint");
        }
        let mut history = Vec::new();
        let mut checkpoints = Vec::new();
        let spe = self.config.steps_per_epoch(items.len());
        while self.step < total && !self.model.config.bypass() {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9)));
            let skip = self.step - self.epoch * spe;
            for chunk in order.chunks(self.config.batch_size).skip(skip) {
                if self.step >= total {
                    break;
                }
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
                let ids: Vec<&str> = chunk.iter().map(|&i| items[i].id()).collect();
                let tau = self.config.tau_at(self.step, total);
                let rec = self.train_step(&batch, &ids, tau, &dump_dir)?;
                log::info!(
                    "step {} epoch {} total {:.5} (l1 {:.4}, perc {:.4}, smooth {:.4}, hier {:.4})",
                    rec.step,
                    rec.epoch,
                    rec.loss.total,
                    rec.loss.l1,
                    rec.loss.perceptual,
                    rec.loss.smooth,
                    rec.loss.hier
                );
                if let Some(f) = log.as_mut() {
                    let line = serde_json::to_string(&rec)?;
                    writeln!(f, "{line}").map_err(|e| CsfError::io(dump_dir.join(LOSS_LOG), e))?;
                }
                history.push(rec);
            }
            if self.step == (self.epoch + 1) * spe {
                self.epoch += 1;
            }
            if let Some(dir) = out {
                checkpoints.push(self.write_checkpoint(dir)?);
            }
        }
        if self.model.config.bypass() {
            if let Some(dir) = out {
                checkpoints.push(self.write_checkpoint(dir)?);
            }
        }
        Ok((history, checkpoints))
    }

    fn write_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let ckpt = self.checkpoint(Some(LOSS_LOG.to_string()));
        let path = dir.join(format!("ckpt_epoch{:04}_step{:06}.safetensors", self.epoch, self.step));
        ckpt.save(&path)?;
        ckpt.save(&dir.join(LATEST))?;
        Ok(path)
    }
}

/// Train from scratch.
pub fn train(
    config: &TrainConfig,
    items: &[TrainItem],
    extractor: Arc<FeatureNet>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), extractor)?;
    let (history, checkpoints) = trainer.fit(items, out)?;
    Ok(TrainOutcome {
        model: trainer.model,
        history,
        checkpoints,
    })
}

/// Hard-mode guidance from a checkpoint, using the checkpoint's `p` and
/// score variant to pick candidates from `set`.
pub fn infer_guidance(
    scene: &MaskedScene,
    set: &CandidateSet,
    ckpt: &Checkpoint,
    extractor: Arc<FeatureNet>,
) -> Result<GuidanceImage> {
    let model = ckpt.model(extractor)?;
    let item = TrainItem::from_set(scene.clone(), set, ckpt.config.p, ckpt.config.score_variant)?;
    Ok(model.infer(&item.scene, &item.candidates)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_optimizer_and_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.epochs), (2e-4, 12, 200));
        assert_eq!((c.tau_start, c.tau_end, c.lambda), (1.0, 0.1, 0.8));
        c.validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = TrainConfig::toy();
        let s = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&s).unwrap(), c);
        let partial = TrainConfig::from_toml_str("lr = 0.001\nbatch_size = 2\n").unwrap();
        assert_eq!(partial.lr, 0.001);
        assert_eq!(partial.epochs, 200);
        assert!(TrainConfig::from_toml_str("learning_rate = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("lambda = 1.5").is_err());
    }

    #[test]
    fn tau_anneals_linearly() {
        let c = TrainConfig::default();
        assert_eq!(c.tau_at(0, 11), 1.0);
        assert!((c.tau_at(5, 11) - 0.55).abs() < 1e-12);
        assert!((c.tau_at(10, 11) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new([2], vec![0.5, -3.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &grads);
        let w = store.get("w").unwrap().data().to_vec();
        // bias-corrected first step is lr · sign(g)
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        let mut decay = ParamStore::new();
        decay.insert("w", Tensor::new([1], vec![2.0]));
        let mut zero = BTreeMap::new();
        zero.insert("w".to_string(), Tensor::new([1], vec![0.0]));
        AdamW::new(0.1, 0.5).step(&mut decay, &zero);
        assert!((decay.get("w").unwrap().item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new([2], vec![3.0, 0.0]));
        grads.insert("b".to_string(), Tensor::new([1], vec![4.0]));
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        let after: f64 = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn device_override_rejects_gpu() {
        let c = TrainConfig {
            device: "cuda".into(),
            ..TrainConfig::toy()
        };
        if std::env::var(DEVICE_ENV).is_err() {
            assert!(c.resolve_device().is_err());
            assert_eq!(TrainConfig::toy().resolve_device().unwrap(), "cpu");
        }
    }
}
