use csf_autograd::Tensor;
use csf_core::candidates::{select_top_p_by, ConsistencyScore, ScoreVariant};
use csf_core::data::{make_center_box_mask, make_random_brush_mask};
use csf_core::nn::resize_tensor;
use csf_core::select::{aggregate_scores, blend_hierarchical, compose_hard, compose_per_image, refine_pyramid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_force, quantized_scores, random_candidates, random_scene, random_tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn blend_endpoints_and_fixed_point(seed in any::<u64>(), p in 1usize..4, half in 1usize..6, beta in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = random_tensor([p, half, half], &mut rng);
        let fine = random_tensor([p, 2 * half, 2 * half], &mut rng);
        let up = resize_tensor(&coarse, 2 * half, 2 * half);
        prop_assert_eq!(blend_hierarchical(&fine, &coarse, 0.0).unwrap(), fine.clone());
        prop_assert_eq!(blend_hierarchical(&fine, &coarse, 1.0).unwrap(), up.clone());
        let fixed = blend_hierarchical(&up, &coarse, beta).unwrap();
        prop_assert!(fixed.max_abs_diff(&up) <= 1e-7);
        let mid = blend_hierarchical(&fine, &coarse, beta).unwrap();
        for ((m, f), u) in mid.data().iter().zip(fine.data()).zip(up.data()) {
            prop_assert!(*m >= f.min(*u) - 1e-12 && *m <= f.max(*u) + 1e-12);
        }
    }

    #[test]
    fn pyramid_with_zero_betas_is_identity(seed in any::<u64>(), levels in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Tensor> = (0..levels).map(|l| random_tensor([2, 16 >> l, 16 >> l], &mut rng)).collect();
        let refined = refine_pyramid(&raw, &vec![0.0; levels - 1]).unwrap();
        prop_assert_eq!(refined, raw);
    }

    #[test]
    fn aggregate_is_the_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_tensor([3, 4, 4], &mut rng);
        let pm = random_tensor([3, 4, 4], &mut rng);
        let c = aggregate_scores(&s, &pm).unwrap();
        prop_assert_eq!(&c, &aggregate_scores(&pm, &s).unwrap());
        for ((v, a), b) in c.data().iter().zip(s.data()).zip(pm.data()) {
            prop_assert!((v - (a + b) / 2.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn hard_compose_matches_brute_force(seed in any::<u64>(), thr_q in 0usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(8, &mut rng);
        let cands = random_candidates(8, 3, &mut rng);
        let scores = quantized_scores(3, 8, &mut rng);
        let thr = thr_q as f64 / 4.0;
        let g = compose_hard(&scores, &cands, &scene, thr).unwrap();
        let (px, filled, chosen) = brute_force(&scores, &cands, &scene, thr);
        prop_assert_eq!(g.pixels.data(), &px[..]);
        prop_assert_eq!(g.filled.bits(), &filled[..]);
        prop_assert_eq!(g.chosen, chosen);
    }

    #[test]
    fn guidance_preserves_visible_and_traces_provenance(seed in any::<u64>(), per_image in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(8, &mut rng);
        let cands = random_candidates(8, 3, &mut rng);
        let scores = random_tensor([3, 8, 8], &mut rng);
        let g = if per_image {
            compose_per_image(&scores, &cands, &scene).unwrap()
        } else {
            compose_hard(&scores, &cands, &scene, 0.5).unwrap()
        };
        let n = 64;
        for i in 0..n {
            let (y, x) = (i / 8, i % 8);
            if !scene.mask.bits.get(y, x) {
                prop_assert!(!g.filled.get(y, x));
                for c in 0..3 {
                    prop_assert_eq!(g.pixels.data()[c * n + i].to_bits(), scene.image.at(c, y, x).to_bits());
                }
            } else if let Some(k) = g.chosen[i] {
                let k = k as usize;
                prop_assert!(g.filled.get(y, x) && cands[k].validity.get(y, x));
                for c in 0..3 {
                    prop_assert_eq!(g.pixels.data()[c * n + i], cands[k].values.data()[c * n + i]);
                }
            } else {
                prop_assert!(!g.filled.get(y, x));
            }
        }
    }

    #[test]
    fn top_p_matches_sorted_order(seed in any::<u64>(), n in 1usize..8, p in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<ConsistencyScore> = (0..n)
            .map(|_| {
                let (a, b) = (rng.random_range(0..4) as f64 / 4.0, rng.random_range(0..4) as f64 / 4.0);
                ConsistencyScore { s_mse: a, s_lpips: b, s_valid: a + b }
            })
            .collect();
        let cands = random_candidates(4, n, &mut rng);
        for v in ScoreVariant::ALL {
            let set = select_top_p_by(cands.clone(), scores.clone(), p, v).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| v.value(&scores[b]).partial_cmp(&v.value(&scores[a])).unwrap().then(a.cmp(&b)));
            idx.truncate(p.min(n));
            prop_assert_eq!(&set.selected, &idx);
        }
    }

    #[test]
    fn brush_coverage_in_band(seed in any::<u64>()) {
        let m = make_random_brush_mask(64, 0.5, 0.8, seed).unwrap();
        prop_assert!((0.5..=0.8).contains(&m.coverage()));
        prop_assert_eq!(m, make_random_brush_mask(64, 0.5, 0.8, seed).unwrap());
    }

    #[test]
    fn center_box_coverage(res in 16usize..128, frac in 0.1f64..0.9) {
        let m = make_center_box_mask(res, frac).unwrap();
        let tol = (2.0 * res as f64 + 1.0) / (res * res) as f64;
        prop_assert!((m.coverage() - frac).abs() <= tol.max(0.02));
    }
}
