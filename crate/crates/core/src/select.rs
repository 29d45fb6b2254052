//! Per-pixel candidate confidence, hierarchical refinement and guidance
//! compositing.
//!
//! Score maps for `P` candidates at one level are `P × h × w` tensors.

use csf_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::assets::FeatureNet;
use crate::candidates::CandidateCompletion;
use crate::data::{BinaryMap, MaskedScene};
use crate::error::{CsfError, Result};
use crate::nn::{self, Init, Scope};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Additive logit for candidates that do not cover a pixel.
const INVALID_LOGIT: f64 = -1e9;

/// Perceptual extractor taps fed to the perceptual score head.
const PSN_TAPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComposeMode {
    Hard,
    Soft { tau: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume {
    /// Averaged structure/perceptual maps per level, finest first.
    pub raw: Vec<Tensor>,
    pub refined: Vec<Tensor>,
    /// Blend weight between each level and the next coarser one.
    pub betas: Vec<f64>,
    /// Refined finest level resized to the image, `P × H × W`.
    pub final_maps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceImage {
    pub pixels: Tensor,
    pub filled: BinaryMap,
    /// Source candidate per pixel (row-major), `None` where not filled.
    pub chosen: Vec<Option<u16>>,
}

impl GuidanceImage {
    pub fn dims(&self) -> (usize, usize) {
        self.filled.dims()
    }

    pub fn chosen_at(&self, y: usize, x: usize) -> Option<u16> {
        self.chosen[y * self.filled.width() + x]
    }

    /// Pixels still missing after guidance: hole minus filled.
    pub fn residual_mask(&self, scene: &MaskedScene) -> BinaryMap {
        scene.mask.bits.and_not(&self.filled)
    }
}

/// `C = (S + Pm) / 2`.
pub fn aggregate_scores(s: &Tensor, pm: &Tensor) -> Result<Tensor> {
    if s.shape() != pm.shape() {
        return Err(CsfError::ShapeMismatch(format!("{:?} vs {:?}", s.shape(), pm.shape())));
    }
    Ok(s.zip_map(pm, |a, b| 0.5 * (a + b)))
}

/// `(1 − β)·C_l + β·U(C_coarse)` with bilinear `U`.
pub fn blend_hierarchical(c_l: &Tensor, c_coarse: &Tensor, beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CsfError::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    let (p, h, w) = c_l.dims3();
    let (pc, hc, wc) = c_coarse.dims3();
    if p != pc || h != 2 * hc || w != 2 * wc {
        return Err(CsfError::ShapeMismatch(format!(
            "coarse map {:?} is not half of {:?}",
            c_coarse.shape(),
            c_l.shape()
        )));
    }
    let up = nn::resize_tensor(c_coarse, h, w);
    Ok(c_l.zip_map(&up, |a, b| (1.0 - beta) * a + beta * b))
}

/// Apply [`blend_hierarchical`] from the coarsest level down. `betas[l]`
/// blends level `l` with level `l + 1`.
pub fn refine_pyramid(raw: &[Tensor], betas: &[f64]) -> Result<Vec<Tensor>> {
    if raw.is_empty() || betas.len() + 1 != raw.len() {
        return Err(CsfError::ShapeMismatch(format!(
            "{} levels need {} betas, got {}",
            raw.len(),
            raw.len().saturating_sub(1),
            betas.len()
        )));
    }
    let mut refined = raw.to_vec();
    for l in (0..raw.len() - 1).rev() {
        refined[l] = blend_hierarchical(&raw[l], &refined[l + 1], betas[l])?;
    }
    Ok(refined)
}

fn check_candidates(final_maps: &Tensor, candidates: &[CandidateCompletion], scene: &MaskedScene) -> Result<()> {
    if candidates.is_empty() {
        return Err(CsfError::InvalidArgument("no candidates to compose".into()));
    }
    let (p, h, w) = final_maps.dims3();
    if p != candidates.len() || (h, w) != scene.dims() {
        return Err(CsfError::ShapeMismatch(format!(
            "score maps {:?} for {} candidates on a {:?} scene",
            final_maps.shape(),
            candidates.len(),
            scene.dims()
        )));
    }
    if let Some(c) = candidates.iter().find(|c| c.dims() != scene.dims()) {
        return Err(CsfError::ShapeMismatch(format!("candidate is {:?}", c.dims())));
    }
    Ok(())
}

/// Thresholded per-pixel argmax over valid candidates. Visible pixels are
/// copied from the scene; hole pixels without a winner stay zero.
pub fn compose_hard(
    final_maps: &Tensor,
    candidates: &[CandidateCompletion],
    scene: &MaskedScene,
    threshold: f64,
) -> Result<GuidanceImage> {
    check_candidates(final_maps, candidates, scene)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CsfError::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let (h, w) = scene.dims();
    let n = h * w;
    let mut pixels = scene.masked_rgb();
    let mut filled = BinaryMap::new(h, w, false);
    let mut chosen = vec![None; n];
    let scores = final_maps.data();
    for i in 0..n {
        if !scene.mask.bits.bits()[i] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in candidates.iter().enumerate() {
            if !c.validity.bits()[i] {
                continue;
            }
            let s = scores[k * n + i];
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        if let Some((k, s)) = best {
            if s >= threshold {
                filled.set(i / w, i % w, true);
                chosen[i] = Some(k as u16);
                for ch in 0..3 {
                    pixels.data_mut()[ch * n + i] = candidates[k].values.data()[ch * n + i];
                }
            }
        }
    }
    Ok(GuidanceImage { pixels, filled, chosen })
}

/// Whole-image selection: the candidate with the highest mean confidence
/// over the hole fills every hole pixel it covers.
pub fn compose_per_image(
    final_maps: &Tensor,
    candidates: &[CandidateCompletion],
    scene: &MaskedScene,
) -> Result<GuidanceImage> {
    check_candidates(final_maps, candidates, scene)?;
    let (h, w) = scene.dims();
    let n = h * w;
    let hole = &scene.mask.bits;
    let area = hole.count().max(1) as f64;
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for k in 0..candidates.len() {
        let m = (0..n)
            .filter(|&i| hole.bits()[i])
            .map(|i| final_maps.data()[k * n + i])
            .sum::<f64>()
            / area;
        if m > best_mean {
            best = k;
            best_mean = m;
        }
    }
    let mut pixels = scene.masked_rgb();
    let filled = hole.and(&candidates[best].validity);
    let mut chosen = vec![None; n];
    for i in 0..n {
        if filled.bits()[i] {
            chosen[i] = Some(best as u16);
            for ch in 0..3 {
                pixels.data_mut()[ch * n + i] = candidates[best].values.data()[ch * n + i];
            }
        }
    }
    Ok(GuidanceImage { pixels, filled, chosen })
}

/// Top-ranked candidate copied onto `hole ∩ validity`, no scoring.
pub fn compose_single(candidate: &CandidateCompletion, scene: &MaskedScene) -> Result<GuidanceImage> {
    let maps = Tensor::ones([1, scene.dims().0, scene.dims().1]);
    compose_hard(&maps, std::slice::from_ref(candidate), scene, 0.0)
}

/// Constant inputs of the score heads and the compositor at one level.
#[derive(Clone, Debug)]
pub struct LevelInputs {
    pub side: usize,
    /// Per candidate: normalized RGB plus validity, `4 × s × s`.
    pub candidates: Vec<Tensor>,
    pub validity: Vec<BinaryMap>,
    /// Hole-zeroed RGB (visible pixels renormalized) plus hole channel.
    pub scene: Tensor,
    pub mask: BinaryMap,
    /// Perceptual features of each candidate and of the scene RGB.
    pub cand_features: Vec<Tensor>,
    pub scene_features: Tensor,
}

impl LevelInputs {
    pub fn visible_rgb(&self) -> Tensor {
        let n = self.side * self.side;
        Tensor::new([3, self.side, self.side], self.scene.data()[..3 * n].to_vec())
    }

    /// Candidate RGB values (zero where invalid), `3 × s × s`.
    pub fn candidate_rgb(&self, k: usize) -> Tensor {
        let n = self.side * self.side;
        Tensor::new([3, self.side, self.side], self.candidates[k].data()[..3 * n].to_vec())
    }

    /// Hole pixels covered by at least one candidate.
    pub fn fill_region(&self) -> BinaryMap {
        let any = self
            .validity
            .iter()
            .skip(1)
            .fold(self.validity[0].clone(), |acc, v| acc.or(v));
        self.mask.and(&any)
    }
}

/// Downsample `rgb` on `support`, renormalizing by the support weight.
/// Returns values (zero where the level support is off) and level support.
fn downsample_supported(rgb: &Tensor, support: &BinaryMap, side: usize) -> (Tensor, BinaryMap) {
    let (_, h, w) = rgb.dims3();
    if (h, w) == (side, side) {
        let n = h * w;
        let mut v = rgb.clone();
        for ch in 0..3 {
            for i in 0..n {
                if !support.bits()[i] {
                    v.data_mut()[ch * n + i] = 0.0;
                }
            }
        }
        return (v, support.clone());
    }
    let weight = nn::downsample_tensor(&support.to_tensor(), side, side);
    let n = h * w;
    let mut masked = rgb.clone();
    for ch in 0..3 {
        for i in 0..n {
            if !support.bits()[i] {
                masked.data_mut()[ch * n + i] = 0.0;
            }
        }
    }
    let mut down = nn::downsample_tensor(&masked, side, side);
    let m = side * side;
    let level_support = BinaryMap::from_plane(side, side, weight.data());
    for ch in 0..3 {
        for i in 0..m {
            let wv = weight.data()[i];
            let v = &mut down.data_mut()[ch * m + i];
            *v = if level_support.bits()[i] { (*v / wv).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    (down, level_support)
}

fn psn_features(extractor: &FeatureNet, rgb: &Tensor, side: usize) -> Tensor {
    let g = Graph::new();
    let taps = extractor.forward_taps(&g, g.constant(rgb.clone()), PSN_TAPS);
    let maps: Vec<Tensor> = taps
        .iter()
        .map(|t| nn::resize_tensor(&t.value(), side, side))
        .collect();
    let mut data = Vec::new();
    let mut c = 0;
    for m in &maps {
        c += m.shape()[0];
        data.extend_from_slice(m.data());
    }
    Tensor::new([c, side, side], data)
}

pub fn level_inputs(
    scene: &MaskedScene,
    candidates: &[CandidateCompletion],
    side: usize,
    extractor: Option<&FeatureNet>,
) -> LevelInputs {
    let mut cand_t = Vec::with_capacity(candidates.len());
    let mut validity = Vec::with_capacity(candidates.len());
    let mut cand_features = Vec::new();
    for c in candidates {
        let (rgb, valid) = downsample_supported(&c.values, &c.validity, side);
        if let Some(net) = extractor {
            cand_features.push(psn_features(net, &rgb, side));
        }
        let mut data = rgb.into_vec();
        data.extend(valid.to_plane());
        cand_t.push(Tensor::new([4, side, side], data));
        validity.push(valid);
    }
    let visible = scene.visible();
    let (rgb, vis_l) = downsample_supported(&scene.image.pixels, &visible, side);
    let mask = vis_l.not();
    let scene_features = match extractor {
        Some(net) => psn_features(net, &rgb, side),
        None => Tensor::zeros([0]),
    };
    let mut data = rgb.into_vec();
    data.extend(mask.to_plane());
    LevelInputs {
        side,
        candidates: cand_t,
        validity,
        scene: Tensor::new([4, side, side], data),
        mask,
        cand_features,
        scene_features,
    }
}

/// Channel count of the perceptual features for a given extractor.
pub fn psn_feature_channels(extractor: &FeatureNet) -> usize {
    let probe = Tensor::zeros([3, 4, 4]);
    psn_features(extractor, &probe, 4).shape()[0]
}

/// Register score-head parameters. `fused_channels[l]` is the decoder width
/// at level `l`.
pub fn init_score_heads(
    store: &mut csf_autograd::ParamStore,
    init: &Init,
    fused_channels: &[usize],
    ssn_hidden: usize,
    psn_hidden: usize,
    psn_feature_channels: usize,
) {
    for (l, &c) in fused_channels.iter().enumerate() {
        init.add_conv(store, &format!("ssn.in{}", l + 1), ssn_hidden, c + 8, 3);
        init.add_conv(store, &format!("psn.in{}", l + 1), psn_hidden, c + 2 * psn_feature_channels, 1);
    }
    init.add_conv(store, "ssn.mid", ssn_hidden, ssn_hidden, 3);
    init.add_conv(store, "ssn.out", 1, ssn_hidden, 3);
    init.add_conv(store, "psn.out", 1, psn_hidden, 3);
    for l in 1..fused_channels.len() {
        store.insert(format!("beta.{l}"), Tensor::zeros([1]));
    }
}

/// Structure head at level `l` (0-based) for candidate `k`: `1 × s × s`.
pub fn structure_score<'g>(s: &Scope<'g>, l: usize, fused_map: Var<'g>, inputs: &LevelInputs, k: usize) -> Var<'g> {
    let x = Var::concat(
        &[fused_map, s.constant(inputs.candidates[k].clone()), s.constant(inputs.scene.clone())],
        0,
    );
    let h = s.conv(&format!("ssn.in{}", l + 1), x, 1).gelu();
    let h = s.conv("ssn.mid", h, 1).gelu();
    s.conv("ssn.out", h, 1).sigmoid()
}

/// Perceptual head at level `l` for candidate `k`: `1 × s × s`.
pub fn perceptual_score<'g>(s: &Scope<'g>, l: usize, fused_map: Var<'g>, inputs: &LevelInputs, k: usize) -> Var<'g> {
    let x = Var::concat(
        &[
            fused_map,
            s.constant(inputs.cand_features[k].clone()),
            s.constant(inputs.scene_features.clone()),
        ],
        0,
    );
    let h = s.conv(&format!("psn.in{}", l + 1), x, 0).gelu();
    s.conv("psn.out", h, 1).sigmoid()
}

/// `sigmoid(beta.l)` for `l` in `1..L`.
pub fn beta_var<'g>(s: &Scope<'g>, l: usize) -> Var<'g> {
    s.get(&format!("beta.{}", l + 1)).sigmoid()
}

/// Graph counterpart of [`blend_hierarchical`].
pub fn blend_var<'g>(c_l: Var<'g>, coarse: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let s = c_l.shape();
    let up = coarse.resize_bilinear(s[1], s[2]);
    let keep = beta.neg().add_scalar(1.0);
    c_l.mul_scalar(&keep) + up.mul_scalar(&beta)
}

/// Differentiable compositing result at one resolution.
#[derive(Clone, Debug)]
pub struct SoftGuide<'g> {
    /// `3 × s × s`.
    pub pixels: Var<'g>,
    /// Selection weights, `s² × P`.
    pub weights: Var<'g>,
    /// Hole pixels with at least one valid candidate.
    pub fill: BinaryMap,
}

fn penalty(inputs: &LevelInputs) -> Tensor {
    let n = inputs.side * inputs.side;
    let p = inputs.validity.len();
    let mut data = vec![0.0; n * p];
    for (k, v) in inputs.validity.iter().enumerate() {
        for i in 0..n {
            if !v.bits()[i] {
                data[i * p + k] = INVALID_LOGIT;
            }
        }
    }
    Tensor::new([n, p], data)
}

fn blend_candidates<'g>(g: &'g Graph, weights: Var<'g>, inputs: &LevelInputs) -> Var<'g> {
    let n = inputs.side * inputs.side;
    let p = inputs.validity.len();
    let mut stack = Vec::with_capacity(p * 3 * n);
    for k in 0..p {
        stack.extend_from_slice(&inputs.candidates[k].data()[..3 * n]);
    }
    let wt = weights.t();
    Var::concat(&[wt, wt, wt], 1)
        .mul(&g.constant(Tensor::new([p, 3 * n], stack)))
        .sum_leading()
}

fn fill_and_visible<'g>(g: &'g Graph, fill: &BinaryMap, inputs: &LevelInputs, side: usize) -> (Var<'g>, Var<'g>) {
    let f = fill.to_plane();
    let mut f3 = Vec::with_capacity(3 * f.len());
    for _ in 0..3 {
        f3.extend_from_slice(&f);
    }
    let vis = inputs.visible_rgb().reshape([3 * side * side]);
    (g.constant(Tensor::new([3 * side * side], f3)), g.constant(vis))
}

/// Temperature-softmax compositing over valid candidates. With a
/// threshold, the blend is scaled by the soft gate
/// `sigmoid((τ·logsumexp(C/τ) − threshold)/τ)`, which tends to the hard
/// threshold rule as `τ → 0`; without one every fill pixel is blended.
pub fn compose_soft<'g>(scores: Var<'g>, inputs: &LevelInputs, tau: f64, threshold: Option<f64>) -> SoftGuide<'g> {
    let g = scores.graph();
    let side = inputs.side;
    let n = side * side;
    let p = inputs.validity.len();
    let logits = scores.reshape([p, n]).t().scale(1.0 / tau) + g.constant(penalty(inputs));
    let weights = logits.softmax_last();
    let mut blended = blend_candidates(g, weights, inputs);
    if let Some(thr) = threshold {
        let gate = logits.logsumexp_last().add_scalar(-thr / tau).sigmoid();
        blended = blended.mul(&Var::concat(&[gate, gate, gate], 0));
    }
    let fill = inputs.fill_region();
    let (f3, vis) = fill_and_visible(g, &fill, inputs, side);
    let pixels = (blended.mul(&f3) + vis).reshape([3, side, side]);
    SoftGuide { pixels, weights, fill }
}

/// Soft counterpart of [`compose_per_image`]: one selection distribution
/// per image from the hole-averaged scores.
pub fn compose_soft_per_image<'g>(scores: Var<'g>, inputs: &LevelInputs, tau: f64) -> SoftGuide<'g> {
    let g = scores.graph();
    let side = inputs.side;
    let n = side * side;
    let p = inputs.validity.len();
    let hole = inputs.mask.to_plane();
    let area = inputs.mask.count().max(1) as f64;
    let hole_w: Vec<f64> = hole.iter().map(|v| v / area).collect();
    let mean = scores
        .reshape([p, n])
        .matmul(&g.constant(Tensor::new([n, 1], hole_w)))
        .reshape([1, p]);
    let logits = g
        .constant(Tensor::ones([n, 1]))
        .matmul(&mean)
        .scale(1.0 / tau)
        + g.constant(penalty(inputs));
    let weights = logits.softmax_last();
    let blended = blend_candidates(g, weights, inputs);
    let fill = inputs.fill_region();
    let (f3, vis) = fill_and_visible(g, &fill, inputs, side);
    let pixels = (blended.mul(&f3) + vis).reshape([3, side, side]);
    SoftGuide { pixels, weights, fill }
}

/// Summary of one composed guide, written next to `guide.png`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideManifest {
    pub scene_id: String,
    pub threshold: f64,
    pub filled_fraction_of_hole: f64,
    pub mean_scores: Vec<f64>,
    pub betas: Vec<f64>,
}

/// Write `guide.png`, `filled.png`, `chosen.png` (8-bit, candidate index
/// + 1, 0 where not filled) and `manifest.json` into `dir`.
pub fn save_guide(dir: &std::path::Path, guide: &GuidanceImage, manifest: &GuideManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CsfError::io(dir, e))?;
    crate::data::save_rgb_png(&dir.join("guide.png"), &guide.pixels)?;
    crate::data::save_mask_png(&dir.join("filled.png"), &guide.filled)?;
    let (h, w) = guide.dims();
    let chosen = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = guide.chosen_at(y as usize, x as usize).map_or(0, |k| (k + 1).min(255) as u8);
        image::Luma([v])
    });
    let path = dir.join("chosen.png");
    chosen.save(&path).map_err(|e| CsfError::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| CsfError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_mask, make_center_box_mask, ImageRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(res: usize, rng: &mut ChaCha8Rng) -> MaskedScene {
        let img = Tensor::new([3, res, res], (0..3 * res * res).map(|_| rng.random::<f64>()).collect());
        let img = ImageRecord::new("r", img, "").unwrap();
        apply_mask(&img, &make_center_box_mask(res, 0.5).unwrap()).unwrap()
    }

    fn random_candidates(scene: &MaskedScene, p: usize, rng: &mut ChaCha8Rng) -> Vec<CandidateCompletion> {
        let (h, w) = scene.dims();
        (0..p)
            .map(|_| {
                let v = Tensor::new([3, h, w], (0..3 * h * w).map(|_| rng.random::<f64>()).collect());
                let valid = BinaryMap::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(0.8)).collect()).unwrap();
                CandidateCompletion::new(v, valid, "t").unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_winner_fills_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(8, &mut rng);
        let cands: Vec<_> = random_candidates(&scene, 3, &mut rng)
            .into_iter()
            .map(|c| CandidateCompletion::new(c.values, BinaryMap::new(8, 8, true), "t").unwrap())
            .collect();
        let mut maps = Tensor::full([3, 8, 8], 0.6);
        maps.data_mut()[128..].iter_mut().for_each(|v| *v = 0.9);
        let g = compose_hard(&maps, &cands, &scene, 0.5).unwrap();
        for i in 0..64 {
            if scene.mask.bits.bits()[i] {
                assert_eq!(g.chosen[i], Some(2));
            } else {
                assert_eq!(g.chosen[i], None);
            }
        }
        assert_eq!(g.filled, scene.mask.bits);
    }

    #[test]
    fn below_threshold_leaves_hole() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(8, &mut rng);
        let cands = random_candidates(&scene, 3, &mut rng);
        let maps = Tensor::full([3, 8, 8], 0.2);
        let g = compose_hard(&maps, &cands, &scene, 0.5).unwrap();
        assert!(!g.filled.any());
        assert_eq!(g.pixels, scene.masked_rgb());
    }

    #[test]
    fn blend_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = Tensor::new([2, 4, 4], (0..32).map(|_| rng.random::<f64>()).collect());
        let coarse = Tensor::new([2, 2, 2], (0..8).map(|_| rng.random::<f64>()).collect());
        assert_eq!(blend_hierarchical(&fine, &coarse, 0.0).unwrap(), fine);
        assert_eq!(
            blend_hierarchical(&fine, &coarse, 1.0).unwrap(),
            nn::resize_tensor(&coarse, 4, 4)
        );
        assert!(blend_hierarchical(&fine, &fine, 0.5).is_err());
        assert!(blend_hierarchical(&fine, &coarse, 1.5).is_err());
    }

    #[test]
    fn aggregate_is_average() {
        let s = Tensor::zeros([1, 2, 2]);
        let p = Tensor::ones([1, 2, 2]);
        assert_eq!(aggregate_scores(&s, &p).unwrap(), Tensor::full([1, 2, 2], 0.5));
        assert_eq!(aggregate_scores(&p, &p).unwrap(), p);
        assert!(aggregate_scores(&s, &Tensor::zeros([2, 2, 2])).is_err());
    }

    #[test]
    fn blend_var_matches_tensor_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fine = Tensor::new([3, 8, 8], (0..192).map(|_| rng.random::<f64>()).collect());
        let coarse = Tensor::new([3, 4, 4], (0..48).map(|_| rng.random::<f64>()).collect());
        let g = Graph::new();
        let beta = g.constant(Tensor::scalar(0.3));
        let v = blend_var(g.constant(fine.clone()), g.constant(coarse.clone()), beta);
        let t = blend_hierarchical(&fine, &coarse, 0.3).unwrap();
        assert!(v.value().max_abs_diff(&t) < 1e-15);
    }

    #[test]
    fn soft_matches_hard_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(8, &mut rng);
        let cands = random_candidates(&scene, 3, &mut rng);
        // well separated scores away from the threshold
        let levels = [0.2, 0.7, 0.9];
        let mut data = vec![0.0; 3 * 64];
        for i in 0..64 {
            let mut order = [0, 1, 2];
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            for k in 0..3 {
                data[k * 64 + i] = levels[order[k]] + rng.random_range(-0.01..0.01);
            }
        }
        let maps = Tensor::new([3, 8, 8], data);
        let hard = compose_hard(&maps, &cands, &scene, 0.5).unwrap();
        let inputs = level_inputs(&scene, &cands, 8, None);
        let g = Graph::new();
        let soft = compose_soft(g.constant(maps), &inputs, 1e-3, Some(0.5));
        let diff = soft.pixels.value().max_abs_diff(&hard.pixels);
        assert!(diff < 1e-3, "soft/hard gap {diff}");
    }

    #[test]
    fn level_inputs_downsample_validity_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = random_scene(16, &mut rng);
        let cands = random_candidates(&scene, 2, &mut rng);
        let li = level_inputs(&scene, &cands, 8, None);
        assert_eq!(li.candidates[0].shape(), &[4, 8, 8]);
        assert_eq!(li.mask.dims(), (8, 8));
        assert!(li.candidates.iter().all(|c| c.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let coverage = nn::downsample_tensor(&scene.mask.bits.to_tensor(), 8, 8);
        for (i, &hole) in li.mask.bits().iter().enumerate() {
            assert_eq!(hole, coverage.data()[i] > 0.5);
        }
    }
}
