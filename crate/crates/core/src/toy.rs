//! Procedural toy dataset: synthetic scenes with oracle candidates, used for
//! smoke training, tests and demos.

use std::path::Path;

use csf_autograd::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assets::Lpips;
use crate::candidates::{self, CandidateSet, OracleBackend};
use crate::data::{self, apply_mask, make_center_box_mask, make_random_brush_mask, ImageRecord, MaskedScene};
use crate::error::Result;

/// Smooth background with a few flat-colored rectangles, discs and stripes.
pub fn procedural_image(res: usize, seed: u64) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = res * res;
    let mut px = vec![0.0; 3 * n];
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    for y in 0..res {
        for x in 0..res {
            let t = (((y as f64 / res as f64 - 0.5) * dy + (x as f64 / res as f64 - 0.5) * dx) + 0.75) / 1.5;
            for c in 0..3 {
                px[c * n + y * res + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.0..res as f64);
        let cx = rng.random_range(0.0..res as f64);
        let size = rng.random_range(res as f64 / 8.0..res as f64 / 2.5);
        let period = rng.random_range(2.0..6.0_f64).max(2.0);
        for y in 0..res {
            for x in 0..res {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = match kind {
                    0 => (fy - cy).abs() < size / 2.0 && (fx - cx).abs() < size,
                    1 => (fy - cy).powi(2) + (fx - cx).powi(2) < size * size / 2.0,
                    _ => (fy - cy).abs() < size && ((fx / period) as usize) % 2 == 0,
                };
                if inside {
                    for c in 0..3 {
                        px[c * n + y * res + x] = color[c];
                    }
                }
            }
        }
    }
    ImageRecord::new(format!("toy{seed:04}"), Tensor::new([3, res, res], px), "")
        .expect("procedural pixels lie in [0, 1]")
}

#[derive(Clone, Debug)]
pub struct ToyItem {
    pub scene: MaskedScene,
    pub candidates: CandidateSet,
}

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub count: usize,
    pub resolution: usize,
    pub n: usize,
    pub p: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            count: 50,
            resolution: 32,
            n: 4,
            p: 3,
            noise: 0.6,
            seed: 0,
        }
    }
}

/// Alternating center-box (50%) and brush (50–80%) scenes, each with
/// segment-wise oracle candidates scored and ranked.
pub fn make_toy_set(spec: &ToySpec, lpips: &Lpips) -> Result<Vec<ToyItem>> {
    let backend = OracleBackend::segmentwise(spec.noise);
    let seeds: Vec<u64> = (0..spec.count as u64).map(|i| spec.seed * 10_000 + i).collect();
    par::map_slice(&seeds, |&s| {
        let img = procedural_image(spec.resolution, s);
        let mask = if s % 2 == 0 {
            make_center_box_mask(spec.resolution, 0.5)?
        } else {
            make_random_brush_mask(spec.resolution, 0.5, 0.8, s)?
        };
        let scene = apply_mask(&img, &mask)?;
        let candidates = candidates::build_candidate_set(&scene, &backend, lpips, spec.n, spec.p, s)?;
        Ok(ToyItem { scene, candidates })
    })
    .into_iter()
    .collect()
}

/// Write `scenes/<id>/` and `candidates/<id>/` under `root`.
pub fn save_toy_set(root: &Path, items: &[ToyItem]) -> Result<()> {
    for item in items {
        let id = &item.scene.image.id;
        data::save_scene(&root.join("scenes").join(id), &item.scene)?;
        candidates::save_candidate_set(&root.join("candidates").join(id), id, &item.candidates)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::AssetStore;

    #[test]
    fn procedural_images_are_deterministic_and_varied() {
        assert_eq!(procedural_image(32, 1), procedural_image(32, 1));
        assert_ne!(procedural_image(32, 1).pixels, procedural_image(32, 2).pixels);
    }

    #[test]
    fn toy_set_has_requested_shape() {
        let lp = AssetStore::builtin().lpips().unwrap();
        let spec = ToySpec {
            count: 4,
            ..ToySpec::default()
        };
        let items = make_toy_set(&spec, &lp).unwrap();
        assert_eq!(items.len(), 4);
        for it in &items {
            assert_eq!(it.candidates.initial.len(), 4);
            assert_eq!(it.candidates.selected.len(), 3);
            assert_eq!(it.scene.dims(), (32, 32));
        }
    }
}
