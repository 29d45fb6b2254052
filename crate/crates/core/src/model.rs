//! The guidance generator: encoders, fusion decoder and score heads wired
//! into soft (training) and hard (inference) compositing.

use std::sync::Arc;

use csf_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::assets::FeatureNet;
use crate::candidates::CandidateCompletion;
use crate::data::MaskedScene;
use crate::error::{CsfError, Result};
use crate::fusion::{self, EncoderDesign, FeaturePyramid, FuseOptions, FusionConfig, PyramidSource};
use crate::nn::{self, Init, Scope};
use crate::select::{self, GuidanceImage, LevelInputs, ScoreVolume, SoftGuide};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub ssn_hidden: usize,
    pub psn_hidden: usize,
    pub threshold: f64,
    pub encoder_design: EncoderDesign,
    /// Per-pixel selection; when off, one candidate is chosen per image.
    pub pixel_selection: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion: FusionConfig::default(),
            ssn_hidden: 64,
            psn_hidden: 64,
            threshold: select::DEFAULT_THRESHOLD,
            encoder_design: EncoderDesign::Dual,
            pixel_selection: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            fusion: FusionConfig::toy(),
            ssn_hidden: 32,
            psn_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn p(&self) -> usize {
        self.fusion.candidates
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.p() == 0 {
            return Err(CsfError::Config("candidate count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CsfError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.ssn_hidden == 0 || self.psn_hidden == 0 {
            return Err(CsfError::Config("score head widths must be positive".into()));
        }
        Ok(())
    }

    /// `p = 1` skips fusion and scoring entirely.
    pub fn bypass(&self) -> bool {
        self.p() == 1
    }
}

/// Constant per-item inputs, computed once and reused across steps.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene_input: Tensor,
    pub candidate_inputs: Vec<Tensor>,
    /// Per fusion level, finest first.
    pub levels: Vec<LevelInputs>,
    pub full: LevelInputs,
    pub gt: Tensor,
}

/// Score maps on the graph.
#[derive(Clone, Debug)]
pub struct ScoreVars<'g> {
    pub raw: Vec<Var<'g>>,
    pub refined: Vec<Var<'g>>,
    pub betas: Vec<Var<'g>>,
    pub final_maps: Var<'g>,
}

impl ScoreVars<'_> {
    pub fn volume(&self) -> ScoreVolume {
        ScoreVolume {
            raw: self.raw.iter().map(|v| v.value()).collect(),
            refined: self.refined.iter().map(|v| v.value()).collect(),
            betas: self.betas.iter().map(|v| v.item()).collect(),
            final_maps: self.final_maps.value(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Forward<'g> {
    pub scores: ScoreVars<'g>,
    /// Guides composed at each fusion level, finest first.
    pub level_guides: Vec<SoftGuide<'g>>,
    pub guide: SoftGuide<'g>,
}

#[derive(Clone, Debug)]
pub struct CsfModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub extractor: Arc<FeatureNet>,
}

impl CsfModel {
    pub fn new(config: ModelConfig, extractor: Arc<FeatureNet>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        if !config.bypass() {
            let init = Init::new(config.seed);
            let f = &config.fusion;
            match config.encoder_design {
                EncoderDesign::Dual => {
                    fusion::init_encoder(&mut params, &init, "ctx.", 4, f);
                    fusion::init_encoder(&mut params, &init, "sem.", 4, f);
                }
                EncoderDesign::Single => {
                    fusion::init_encoder(&mut params, &init, "enc.", 4 + 4 * config.p(), f);
                }
            }
            fusion::init_fusion(&mut params, &init, f);
            select::init_score_heads(
                &mut params,
                &init,
                &f.channels,
                config.ssn_hidden,
                config.psn_hidden,
                select::psn_feature_channels(&extractor),
            );
        }
        Ok(CsfModel {
            config,
            params,
            extractor,
        })
    }

    /// Rebuild from stored parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore, extractor: Arc<FeatureNet>) -> Result<Self> {
        let fresh = CsfModel::new(config, extractor)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(CsfError::Config(format!(
                        "parameter `{name}` has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(CsfError::Config(format!("parameter `{name}` missing for this config"))),
            }
        }
        if let Some(extra) = params.names().find(|n| !fresh.params.contains(n)) {
            return Err(CsfError::Config(format!("unexpected parameter `{extra}` for this config")));
        }
        Ok(CsfModel { params, ..fresh })
    }

    pub fn betas(&self) -> Vec<f64> {
        (1..self.config.fusion.levels())
            .filter_map(|l| self.params.get(&format!("beta.{l}")))
            .map(|t| 1.0 / (1.0 + (-t.item()).exp()))
            .collect()
    }

    fn check_inputs(&self, scene: &MaskedScene, candidates: &[CandidateCompletion]) -> Result<()> {
        let r = self.config.fusion.resolution;
        if scene.dims() != (r, r) {
            return Err(CsfError::ShapeMismatch(format!("scene is {:?}, model expects {r}×{r}", scene.dims())));
        }
        if candidates.len() != self.config.p() {
            return Err(CsfError::Config(format!(
                "model expects {} candidates, got {}",
                self.config.p(),
                candidates.len()
            )));
        }
        if let Some(c) = candidates.iter().find(|c| c.dims() != (r, r)) {
            return Err(CsfError::ShapeMismatch(format!("candidate is {:?}, model expects {r}×{r}", c.dims())));
        }
        Ok(())
    }

    pub fn prepare(&self, scene: &MaskedScene, candidates: &[CandidateCompletion]) -> Result<Prepared> {
        self.check_inputs(scene, candidates)?;
        let levels = self
            .config
            .fusion
            .sides()
            .into_iter()
            .map(|side| select::level_inputs(scene, candidates, side, Some(&self.extractor)))
            .collect();
        Ok(Prepared {
            scene_input: scene.masked_pixels.clone(),
            candidate_inputs: candidates.iter().map(|c| c.encoder_input()).collect(),
            levels,
            full: select::level_inputs(scene, candidates, self.config.fusion.resolution, None),
            gt: scene.image.pixels.clone(),
        })
    }

    pub fn scope<'g>(&'g self, graph: &'g Graph, trainable: bool) -> Scope<'g> {
        if trainable {
            Scope::trainable(graph, &self.params)
        } else {
            Scope::frozen(graph, &self.params)
        }
    }

    fn require_fusion(&self) -> Result<()> {
        if self.config.bypass() {
            return Err(CsfError::InvalidArgument(
                "p = 1 bypasses fusion and scoring; use infer".into(),
            ));
        }
        Ok(())
    }

    pub fn encode_context<'g>(&'g self, s: &Scope<'g>, scene_input: &Tensor) -> Result<FeaturePyramid<'g>> {
        self.require_fusion()?;
        fusion::encode(s, "ctx.", &self.config.fusion, s.constant(scene_input.clone()), PyramidSource::Context)
    }

    /// Same weights for every candidate.
    pub fn encode_semantic<'g>(&'g self, s: &Scope<'g>, candidate_input: &Tensor) -> Result<FeaturePyramid<'g>> {
        self.require_fusion()?;
        fusion::encode(s, "sem.", &self.config.fusion, s.constant(candidate_input.clone()), PyramidSource::Semantic)
    }

    pub fn fused<'g>(&'g self, s: &Scope<'g>, prepared: &Prepared, opts: FuseOptions) -> Result<FeaturePyramid<'g>> {
        self.require_fusion()?;
        let cfg = &self.config.fusion;
        match self.config.encoder_design {
            EncoderDesign::Dual => {
                let ctx = self.encode_context(s, &prepared.scene_input)?;
                let sems = prepared
                    .candidate_inputs
                    .iter()
                    .map(|c| self.encode_semantic(s, c))
                    .collect::<Result<Vec<_>>>()?;
                fusion::fuse(s, cfg, &ctx, &sems, opts)
            }
            EncoderDesign::Single => {
                let mut parts = vec![s.constant(prepared.scene_input.clone())];
                parts.extend(prepared.candidate_inputs.iter().map(|c| s.constant(c.clone())));
                let joint = fusion::encode(s, "enc.", cfg, Var::concat(&parts, 0), PyramidSource::Context)?;
                fusion::fuse(s, cfg, &joint, std::slice::from_ref(&joint), opts)
            }
        }
    }

    fn fused_map<'g>(fused: &FeaturePyramid<'g>, level: usize) -> Var<'g> {
        let side = fused.sides[level];
        nn::tokens_to_map(fused.levels[level], side, side)
    }

    /// Structure confidences for all candidates at `level` (0-based), `P × s × s`.
    pub fn structure_scores<'g>(
        &self,
        s: &Scope<'g>,
        fused: &FeaturePyramid<'g>,
        prepared: &Prepared,
        level: usize,
    ) -> Var<'g> {
        let map = Self::fused_map(fused, level);
        let per: Vec<Var<'g>> = (0..self.config.p())
            .map(|k| select::structure_score(s, level, map, &prepared.levels[level], k))
            .collect();
        Var::concat(&per, 0)
    }

    /// Perceptual confidences for all candidates at `level`, `P × s × s`.
    pub fn perceptual_scores<'g>(
        &self,
        s: &Scope<'g>,
        fused: &FeaturePyramid<'g>,
        prepared: &Prepared,
        level: usize,
    ) -> Var<'g> {
        let map = Self::fused_map(fused, level);
        let per: Vec<Var<'g>> = (0..self.config.p())
            .map(|k| select::perceptual_score(s, level, map, &prepared.levels[level], k))
            .collect();
        Var::concat(&per, 0)
    }

    /// Raw, refined and full-resolution score maps.
    pub fn scores<'g>(&'g self, s: &Scope<'g>, prepared: &Prepared, opts: FuseOptions) -> Result<ScoreVars<'g>> {
        let fused = self.fused(s, prepared, opts)?;
        let levels = self.config.fusion.levels();
        let raw: Vec<Var<'g>> = (0..levels)
            .map(|l| {
                let st = self.structure_scores(s, &fused, prepared, l);
                let pe = self.perceptual_scores(s, &fused, prepared, l);
                (st + pe).scale(0.5)
            })
            .collect();
        let betas: Vec<Var<'g>> = (0..levels - 1).map(|l| select::beta_var(s, l)).collect();
        let mut refined = raw.clone();
        for l in (0..levels - 1).rev() {
            refined[l] = select::blend_var(raw[l], refined[l + 1], betas[l]);
        }
        let r = self.config.fusion.resolution;
        let final_maps = refined[0].resize_bilinear(r, r);
        Ok(ScoreVars {
            raw,
            refined,
            betas,
            final_maps,
        })
    }

    /// Soft-mode forward pass at temperature `tau`.
    pub fn forward<'g>(&'g self, s: &Scope<'g>, prepared: &Prepared, tau: f64, opts: FuseOptions) -> Result<Forward<'g>> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CsfError::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        let scores = self.scores(s, prepared, opts)?;
        let compose = |maps: Var<'g>, inputs: &LevelInputs| {
            if self.config.pixel_selection {
                select::compose_soft(maps, inputs, tau, None)
            } else {
                select::compose_soft_per_image(maps, inputs, tau)
            }
        };
        let level_guides = scores
            .refined
            .iter()
            .zip(&prepared.levels)
            .map(|(&m, inputs)| compose(m, inputs))
            .collect();
        let guide = compose(scores.final_maps, &prepared.full);
        Ok(Forward {
            scores,
            level_guides,
            guide,
        })
    }

    /// Score maps as plain tensors.
    pub fn score_volume(&self, prepared: &Prepared) -> Result<ScoreVolume> {
        let g = Graph::new();
        let s = self.scope(&g, false);
        Ok(self.scores(&s, prepared, FuseOptions::default())?.volume())
    }

    /// Hard-mode guidance. With `p = 1` the single candidate is copied onto
    /// its valid hole pixels and no score volume exists.
    pub fn infer(
        &self,
        scene: &MaskedScene,
        candidates: &[CandidateCompletion],
    ) -> Result<(GuidanceImage, Option<ScoreVolume>)> {
        self.check_inputs(scene, candidates)?;
        if self.config.bypass() {
            return Ok((select::compose_single(&candidates[0], scene)?, None));
        }
        let prepared = self.prepare(scene, candidates)?;
        let volume = self.score_volume(&prepared)?;
        let guide = if self.config.pixel_selection {
            select::compose_hard(&volume.final_maps, candidates, scene, self.config.threshold)?
        } else {
            select::compose_per_image(&volume.final_maps, candidates, scene)?
        };
        Ok((guide, Some(volume)))
    }
}

/// Per-candidate mean of the final maps over the hole.
pub fn mean_hole_scores(volume: &ScoreVolume, scene: &MaskedScene) -> Vec<f64> {
    let (p, h, w) = volume.final_maps.dims3();
    let n = h * w;
    let hole = scene.mask.bits.bits();
    let area = scene.mask.bits.count().max(1) as f64;
    (0..p)
        .map(|k| {
            (0..n)
                .filter(|&i| hole[i])
                .map(|i| volume.final_maps.data()[k * n + i])
                .sum::<f64>()
                / area
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::AssetStore;
    use crate::toy::{make_toy_set, ToySpec};

    fn toy_item() -> crate::toy::ToyItem {
        let lp = AssetStore::builtin().lpips().unwrap();
        let spec = ToySpec {
            count: 1,
            ..ToySpec::default()
        };
        make_toy_set(&spec, &lp).unwrap().remove(0)
    }

    fn model(cfg: ModelConfig) -> CsfModel {
        CsfModel::new(cfg, AssetStore::builtin().perceptual().unwrap()).unwrap()
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let item = toy_item();
        let m = model(ModelConfig::toy());
        let cands = item.candidates.selected_candidates();
        let prep = m.prepare(&item.scene, &cands).unwrap();
        let g = Graph::new();
        let s = m.scope(&g, true);
        let f = m.forward(&s, &prep, 1.0, FuseOptions::default()).unwrap();
        assert_eq!(f.scores.final_maps.shape(), vec![3, 32, 32]);
        assert_eq!(f.level_guides.len(), 3);
        assert_eq!(f.guide.pixels.shape(), vec![3, 32, 32]);
        let vol = f.scores.volume();
        for t in vol.raw.iter().chain(&vol.refined) {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(vol.betas.iter().all(|&b| (b - 0.5).abs() < 1e-12));
    }

    #[test]
    fn infer_preserves_visible_pixels_and_is_deterministic() {
        let item = toy_item();
        let m = model(ModelConfig::toy());
        let cands = item.candidates.selected_candidates();
        let (a, _) = m.infer(&item.scene, &cands).unwrap();
        let (b, _) = m.infer(&item.scene, &cands).unwrap();
        assert_eq!(a, b);
        let n = 32 * 32;
        for i in 0..n {
            if !item.scene.mask.bits.bits()[i] {
                for c in 0..3 {
                    assert_eq!(a.pixels.data()[c * n + i], item.scene.image.pixels.data()[c * n + i]);
                }
            }
        }
    }

    #[test]
    fn single_candidate_bypasses_scoring() {
        let item = toy_item();
        let cfg = ModelConfig {
            fusion: FusionConfig {
                candidates: 1,
                ..FusionConfig::toy()
            },
            ..ModelConfig::toy()
        };
        let m = model(cfg);
        assert_eq!(m.params.len(), 0);
        let cands = item.candidates.truncated(1).selected_candidates();
        let (guide, vol) = m.infer(&item.scene, &cands).unwrap();
        assert!(vol.is_none());
        assert_eq!(guide.filled, item.scene.mask.bits.and(&cands[0].validity));
    }

    #[test]
    fn wrong_candidate_count_is_a_config_error() {
        let item = toy_item();
        let m = model(ModelConfig::toy());
        let cands = item.candidates.truncated(2).selected_candidates();
        assert!(matches!(m.infer(&item.scene, &cands), Err(CsfError::Config(_))));
    }

    #[test]
    fn single_encoder_runs() {
        let item = toy_item();
        let m = model(ModelConfig {
            encoder_design: EncoderDesign::Single,
            ..ModelConfig::toy()
        });
        assert!(m.params.contains("enc.embed.weight") && !m.params.contains("ctx.embed.weight"));
        let cands = item.candidates.selected_candidates();
        let (guide, _) = m.infer(&item.scene, &cands).unwrap();
        assert!(guide.pixels.all_finite());
    }

    #[test]
    fn from_params_rejects_foreign_parameters() {
        let extractor = AssetStore::builtin().perceptual().unwrap();
        let dual = model(ModelConfig::toy());
        let single_cfg = ModelConfig {
            encoder_design: EncoderDesign::Single,
            ..ModelConfig::toy()
        };
        assert!(CsfModel::from_params(single_cfg, dual.params.clone(), extractor.clone()).is_err());
        assert!(CsfModel::from_params(ModelConfig::toy(), dual.params.clone(), extractor).is_ok());
    }
}
