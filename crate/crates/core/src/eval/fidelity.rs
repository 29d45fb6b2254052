//! Top-1 candidate selection accuracy per score variant on the synthetic
//! oracle: one candidate equals the ground truth, the rest are corrupted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::Lpips;
use crate::candidates::{score_all, select_top_p_by, synth_candidates, ScoreVariant};
use crate::data::{apply_mask, make_center_box_mask, make_random_brush_mask};
use crate::error::Result;
use crate::toy::procedural_image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySpec {
    pub seeds: u64,
    pub n: usize,
    pub resolution: usize,
    /// Corrupted candidates draw their noise level from this range.
    pub corruption: (f64, f64),
}

impl Default for FidelitySpec {
    fn default() -> Self {
        FidelitySpec {
            seeds: 200,
            n: 4,
            resolution: 32,
            corruption: (0.05, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub trials: usize,
    /// `(variant, top-1 accuracy)` in [`ScoreVariant::ALL`] order.
    pub accuracy: Vec<(ScoreVariant, f64)>,
}

impl FidelityReport {
    pub fn accuracy_of(&self, v: ScoreVariant) -> f64 {
        self.accuracy.iter().find(|(k, _)| *k == v).map_or(0.0, |a| a.1)
    }
}

/// Index of the clean candidate and the per-trial hits for each variant.
fn trial(spec: &FidelitySpec, seed: u64, lpips: &Lpips) -> Result<[bool; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
    let gt = procedural_image(spec.resolution, seed);
    let mask = if seed % 2 == 0 {
        make_center_box_mask(spec.resolution, 0.5)?
    } else {
        make_random_brush_mask(spec.resolution, 0.5, 0.8, seed)?
    };
    let scene = apply_mask(&gt, &mask)?;
    let mut levels: Vec<f64> = (0..spec.n)
        .map(|i| if i == 0 { 0.0 } else { rng.random_range(spec.corruption.0..spec.corruption.1) })
        .collect();
    levels.shuffle(&mut rng);
    let clean = levels.iter().position(|&l| l == 0.0).expect("one clean candidate");
    let cands = synth_candidates(&gt, &scene, spec.n, &levels, seed)?;
    let scores = score_all(&cands, &scene, lpips)?;
    let mut hits = [false; 3];
    for (h, v) in hits.iter_mut().zip(ScoreVariant::ALL) {
        let set = select_top_p_by(cands.clone(), scores.clone(), 1, v)?;
        *h = set.selected[0] == clean;
    }
    Ok(hits)
}

pub fn selection_fidelity(spec: &FidelitySpec, lpips: &Lpips) -> Result<FidelityReport> {
    let seeds: Vec<u64> = (0..spec.seeds).collect();
    let trials = csf_autograd::par::map_slice(&seeds, |&s| trial(spec, s, lpips))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = trials.len().max(1) as f64;
    let accuracy = ScoreVariant::ALL
        .iter()
        .enumerate()
        .map(|(k, &v)| (v, trials.iter().filter(|t| t[k]).count() as f64 / n))
        .collect();
    Ok(FidelityReport {
        trials: trials.len(),
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::AssetStore;

    #[test]
    fn combined_score_finds_clean_candidate() {
        let spec = FidelitySpec {
            seeds: 12,
            ..FidelitySpec::default()
        };
        let r = selection_fidelity(&spec, &AssetStore::builtin().lpips().unwrap()).unwrap();
        assert_eq!(r.trials, 12);
        let comb = r.accuracy_of(ScoreVariant::MseLpips);
        assert!(comb >= 0.95, "{r:?}");
        assert!(comb >= r.accuracy_of(ScoreVariant::Mse) && comb >= r.accuracy_of(ScoreVariant::Lpips));
    }
}
