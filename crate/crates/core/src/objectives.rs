//! Training objectives: masked L1, masked perceptual distance, selection
//! smoothness, cross-level consistency and their convex combination.

use std::sync::Arc;

use csf_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::assets::FeatureNet;
use crate::data::BinaryMap;
use crate::error::{CsfError, Result};
use crate::nn;

pub const DEFAULT_LAMBDA: f64 = 0.8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perceptual: f64,
    pub smooth: f64,
    pub recon: f64,
    pub hier: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.perceptual, self.smooth, self.recon, self.hier, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l1 += b.l1 / n;
            m.perceptual += b.perceptual / n;
            m.smooth += b.smooth / n;
            m.recon += b.recon / n;
            m.hier += b.hier / n;
            m.total += b.total / n;
            m.lambda = b.lambda;
        }
        m
    }
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars<'g> {
    pub l1: Var<'g>,
    pub perceptual: Var<'g>,
    pub smooth: Var<'g>,
    pub recon: Var<'g>,
    pub hier: Var<'g>,
    pub total: Var<'g>,
    pub lambda: f64,
}

impl LossVars<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1.item(),
            perceptual: self.perceptual.item(),
            smooth: self.smooth.item(),
            recon: self.recon.item(),
            hier: self.hier.item(),
            total: self.total.item(),
            lambda: self.lambda,
        }
    }
}

fn zero(g: &Graph) -> Var<'_> {
    g.constant(Tensor::scalar(0.0))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CsfError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn plane3(map: &BinaryMap) -> Tensor {
    let p = map.to_plane();
    let mut d = Vec::with_capacity(3 * p.len());
    for _ in 0..3 {
        d.extend_from_slice(&p);
    }
    let (h, w) = map.dims();
    Tensor::new([3, h, w], d)
}

/// Mean absolute error over filled pixels and channels.
pub fn l1_var<'g>(guide: Var<'g>, gt: &Tensor, filled: &BinaryMap) -> Var<'g> {
    let g = guide.graph();
    let count = filled.count();
    if count == 0 {
        return zero(g);
    }
    (guide - g.constant(gt.clone()))
        .mul(&g.constant(plane3(filled)))
        .abs()
        .sum()
        .scale(1.0 / (3 * count) as f64)
}

/// Squared feature differences at each extractor tap, weighted by the
/// filled region pooled to that tap's resolution, averaged over taps.
pub fn perceptual_var<'g>(guide: Var<'g>, gt: &Tensor, filled: &BinaryMap, extractor: &'g FeatureNet) -> Var<'g> {
    let g = guide.graph();
    if !filled.any() {
        return zero(g);
    }
    let fa = extractor.forward(g, guide);
    let fb = extractor.features(gt);
    let region = filled.to_tensor();
    let mut terms = Vec::new();
    for (a, b) in fa.iter().zip(&fb) {
        let (c, h, w) = b.dims3();
        let weight = nn::downsample_tensor(&region, h, w);
        let total: f64 = weight.data().iter().sum();
        if total <= 0.0 {
            continue;
        }
        let mut wc = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            wc.extend_from_slice(weight.data());
        }
        let scale = 1.0 / (c as f64 * total);
        terms.push(
            (*a - g.constant(b.clone()))
                .square()
                .mul(&g.constant(Tensor::new([c, h, w], wc)))
                .sum()
                .scale(scale),
        );
    }
    if terms.is_empty() {
        return zero(g);
    }
    let k = terms.len() as f64;
    Var::concat(&terms, 0).sum().scale(1.0 / k)
}

/// Neighbor pairs (right and down) with both pixels in `region`.
fn neighbor_pairs(region: &BinaryMap) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = region.dims();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            if !region.get(y, x) {
                continue;
            }
            if x + 1 < w && region.get(y, x + 1) {
                a.push(y * w + x);
                b.push(y * w + x + 1);
            }
            if y + 1 < h && region.get(y + 1, x) {
                a.push(y * w + x);
                b.push((y + 1) * w + x);
            }
        }
    }
    (a, b)
}

/// Squared-difference total variation of the selection weights over
/// adjacent filled pixels, `½·Σ_i (w_i(p) − w_i(q))²` averaged over pairs.
/// A full switch between two candidates costs 1 per pair. `weights` is
/// `pixels × P`.
pub fn smooth_var<'g>(weights: Var<'g>, region: &BinaryMap) -> Var<'g> {
    let g = weights.graph();
    let (a, b) = neighbor_pairs(region);
    if a.is_empty() {
        return zero(g);
    }
    let pairs = a.len() as f64;
    (weights.gather_rows(Arc::new(a)) - weights.gather_rows(Arc::new(b)))
        .square()
        .sum()
        .scale(0.5 / pairs)
}

/// Mean over adjacent level pairs of the per-pixel L1 gap between the
/// downsampled finer guide and the coarser guide. `levels` is finest first.
pub fn hier_var<'g>(g: &'g Graph, levels: &[Var<'g>]) -> Var<'g> {
    if levels.len() < 2 {
        log::warn!("hierarchical loss needs at least two levels; returning 0");
        return zero(g);
    }
    let mut terms = Vec::with_capacity(levels.len() - 1);
    for pair in levels.windows(2) {
        let coarse = pair[1].shape();
        let down = nn::downsample(pair[0], coarse[1], coarse[2]);
        let n = (coarse[0] * coarse[1] * coarse[2]) as f64;
        terms.push((down - pair[1]).abs().sum().scale(1.0 / n));
    }
    let k = terms.len() as f64;
    Var::concat(&terms, 0).sum().scale(1.0 / k)
}

/// Inputs to [`loss_vars`] for one training item.
pub struct LossInputs<'a, 'g> {
    pub guide: Var<'g>,
    pub gt: &'a Tensor,
    pub filled: &'a BinaryMap,
    pub weights: Var<'g>,
    pub level_guides: &'a [Var<'g>],
    pub extractor: &'g FeatureNet,
    pub lambda: f64,
}

pub fn loss_vars<'g>(inputs: LossInputs<'_, 'g>) -> Result<LossVars<'g>> {
    check_lambda(inputs.lambda)?;
    let g = inputs.guide.graph();
    if !inputs.filled.any() {
        log::warn!("no filled pixels; reconstruction terms are 0");
    }
    let l1 = l1_var(inputs.guide, inputs.gt, inputs.filled);
    let perceptual = perceptual_var(inputs.guide, inputs.gt, inputs.filled, inputs.extractor);
    let smooth = smooth_var(inputs.weights, inputs.filled);
    let recon = l1 + perceptual + smooth;
    let hier = hier_var(g, inputs.level_guides);
    let total = recon.scale(inputs.lambda) + hier.scale(1.0 - inputs.lambda);
    Ok(LossVars {
        l1,
        perceptual,
        smooth,
        recon,
        hier,
        total,
        lambda: inputs.lambda,
    })
}

/// `(l1, perceptual, smooth)` for fixed tensors. `weights` (pixels × P) may
/// be omitted, in which case the smoothness term is 0.
pub fn recon_loss(
    guide: &Tensor,
    gt: &Tensor,
    filled: &BinaryMap,
    weights: Option<&Tensor>,
    extractor: &FeatureNet,
) -> Result<(f64, f64, f64)> {
    if guide.shape() != gt.shape() || guide.rank() != 3 || (guide.shape()[1], guide.shape()[2]) != filled.dims() {
        return Err(CsfError::ShapeMismatch(format!(
            "guide {:?}, ground truth {:?}, filled {:?}",
            guide.shape(),
            gt.shape(),
            filled.dims()
        )));
    }
    if !filled.any() {
        log::warn!("no filled pixels; reconstruction terms are 0");
        return Ok((0.0, 0.0, 0.0));
    }
    let g = Graph::new();
    let gv = g.constant(guide.clone());
    let l1 = l1_var(gv, gt, filled).item();
    let perc = perceptual_var(gv, gt, filled, extractor).item();
    let smooth = match weights {
        Some(w) => smooth_var(g.constant(w.clone()), filled).item(),
        None => 0.0,
    };
    Ok((l1, perc, smooth))
}

/// Tensor counterpart of [`hier_var`].
pub fn hier_loss(levels: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = levels.iter().map(|t| g.constant(t.clone())).collect();
    hier_var(&g, &vars).item()
}

/// `λ·recon + (1 − λ)·hier`.
pub fn total_loss(recon: f64, hier: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * recon + (1.0 - lambda) * hier)
}
