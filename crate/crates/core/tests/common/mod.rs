//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use csf_autograd::Tensor;
use csf_core::candidates::CandidateCompletion;
use csf_core::data::{apply_mask, BinaryMap, ImageRecord, Mask, MaskedScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect())
}

pub fn random_scene(res: usize, rng: &mut ChaCha8Rng) -> MaskedScene {
    let img = ImageRecord::new("r", random_tensor([3, res, res], rng), "").unwrap();
    let bits = BinaryMap::from_bits(res, res, (0..res * res).map(|_| rng.random_bool(0.6)).collect()).unwrap();
    apply_mask(&img, &Mask::custom(bits)).unwrap()
}

pub fn random_candidates(res: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<CandidateCompletion> {
    (0..p)
        .map(|_| {
            let valid = BinaryMap::from_bits(res, res, (0..res * res).map(|_| rng.random_bool(0.7)).collect()).unwrap();
            CandidateCompletion::new(random_tensor([3, res, res], rng), valid, "t").unwrap()
        })
        .collect()
}

/// Scores on a coarse grid so that ties and exact-threshold hits occur.
pub fn quantized_scores(p: usize, res: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new([p, res, res], (0..p * res * res).map(|_| rng.random_range(0..=4) as f64 / 4.0).collect())
}

/// Independent per-pixel compositor: rank valid candidates by (score desc,
/// index asc) and keep the head if it clears the threshold.
pub fn brute_force(
    scores: &Tensor,
    cands: &[CandidateCompletion],
    scene: &MaskedScene,
    thr: f64,
) -> (Vec<f64>, Vec<bool>, Vec<Option<u16>>) {
    let (h, w) = scene.dims();
    let n = h * w;
    let mut px = vec![0.0; 3 * n];
    let mut filled = vec![false; n];
    let mut chosen = vec![None; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !scene.mask.bits.get(y, x) {
                for c in 0..3 {
                    px[c * n + i] = scene.image.at(c, y, x);
                }
                continue;
            }
            let mut ranked: Vec<(f64, usize)> = (0..cands.len())
                .filter(|&k| cands[k].validity.get(y, x))
                .map(|k| (scores.data()[k * n + i], k))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if let Some(&(s, k)) = ranked.first() {
                if s >= thr {
                    filled[i] = true;
                    chosen[i] = Some(k as u16);
                    for c in 0..3 {
                        px[c * n + i] = cands[k].values.data()[c * n + i];
                    }
                }
            }
        }
    }
    (px, filled, chosen)
}

/// Mean absolute RGB error over `region`.
pub fn region_l1(a: &Tensor, b: &Tensor, region: &BinaryMap) -> f64 {
    let n = region.len();
    let mut s = 0.0;
    for i in (0..n).filter(|&i| region.bits()[i]) {
        for c in 0..3 {
            s += (a.data()[c * n + i] - b.data()[c * n + i]).abs();
        }
    }
    s / (3 * region.count().max(1)) as f64
}

/// 2×2 block means.
pub fn halve(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| t.data()[(k * h + yy) * w + xx];
                out[(k * oh + y) * ow + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Guidance equals the scene outside the hole bit-exactly and every filled
/// pixel copies a candidate that is valid there.
pub fn check_guidance(
    g: &csf_core::select::GuidanceImage,
    scene: &MaskedScene,
    cands: &[CandidateCompletion],
) -> Result<(), String> {
    let (h, w) = scene.dims();
    let n = h * w;
    for i in 0..n {
        let (y, x) = (i / w, i % w);
        if !scene.mask.bits.get(y, x) {
            if g.filled.get(y, x) {
                return Err(format!("visible pixel ({y}, {x}) marked filled"));
            }
            for c in 0..3 {
                if g.pixels.data()[c * n + i].to_bits() != scene.image.at(c, y, x).to_bits() {
                    return Err(format!("visible pixel ({y}, {x}) changed"));
                }
            }
        } else if g.filled.get(y, x) {
            let Some(k) = g.chosen[i].map(usize::from) else {
                return Err(format!("filled pixel ({y}, {x}) has no source"));
            };
            if k >= cands.len() || !cands[k].validity.get(y, x) {
                return Err(format!("pixel ({y}, {x}) taken from invalid candidate {k}"));
            }
            for c in 0..3 {
                if g.pixels.data()[c * n + i] != cands[k].values.data()[c * n + i] {
                    return Err(format!("pixel ({y}, {x}) differs from candidate {k}"));
                }
            }
        } else if g.chosen[i].is_some() {
            return Err(format!("unfilled pixel ({y}, {x}) has a source"));
        }
    }
    Ok(())
}
