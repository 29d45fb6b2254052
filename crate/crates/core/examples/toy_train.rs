//! Train on the procedural toy set, print the loss curve, then compare
//! hard-mode guidance against copying the top-ranked candidate.

use std::time::Instant;

use csf_autograd::Tensor;
use csf_core::assets::AssetStore;
use csf_core::data::BinaryMap;
use csf_core::select::compose_single;
use csf_core::toy::{make_toy_set, ToySpec};
use csf_core::trainer::{self, smoothed, TrainConfig, TrainItem};

fn filled_l1(a: &Tensor, b: &Tensor, filled: &BinaryMap) -> f64 {
    let n = filled.len();
    let mut s = 0.0;
    for i in (0..n).filter(|&i| filled.bits()[i]) {
        for c in 0..3 {
            s += (a.data()[c * n + i] - b.data()[c * n + i]).abs();
        }
    }
    s / (3.0 * filled.count().max(1) as f64)
}

fn main() -> csf_core::Result<()> {
    let assets = AssetStore::builtin();
    let toy = make_toy_set(&ToySpec::default(), &assets.lpips()?)?;
    let cfg = TrainConfig {
        max_steps: Some(200),
        ..TrainConfig::toy()
    };
    let items = toy
        .into_iter()
        .map(|t| TrainItem::from_set(t.scene, &t.candidates, cfg.p, cfg.score_variant))
        .collect::<csf_core::Result<Vec<_>>>()?;

    let start = Instant::now();
    let out = trainer::train(&cfg, &items, assets.perceptual()?, None)?;
    let totals: Vec<f64> = out.history.iter().map(|r| r.loss.total).collect();
    let smooth = smoothed(&totals, 10);
    for (r, s) in out.history.iter().zip(&smooth).step_by(20) {
        println!(
            "step {:4}  tau {:.3}  total {:.4}  smoothed {:.4}  l1 {:.4}  perc {:.4}  smooth {:.4}  hier {:.4}",
            r.step, r.tau, r.loss.total, s, r.loss.l1, r.loss.perceptual, r.loss.smooth, r.loss.hier
        );
    }
    let first = smooth[9.min(smooth.len() - 1)];
    let last = smooth[smooth.len() - 1];
    println!(
        "smoothed loss {first:.4} -> {last:.4} (ratio {:.3}) in {:.1}s",
        last / first,
        start.elapsed().as_secs_f64()
    );

    let (mut guided, mut single) = (0.0, 0.0);
    for it in &items {
        let (g, _) = out.model.infer(&it.scene, &it.candidates)?;
        let s = compose_single(&it.candidates[0], &it.scene)?;
        guided += filled_l1(&g.pixels, &it.scene.image.pixels, &g.filled);
        single += filled_l1(&s.pixels, &it.scene.image.pixels, &s.filled);
    }
    let k = items.len() as f64;
    println!("filled-region L1: p = {} {:.4}, p = 1 {:.4}", cfg.p, guided / k, single / k);
    Ok(())
}
