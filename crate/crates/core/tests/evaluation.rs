use std::sync::OnceLock;

use csf_core::assets::AssetStore;
use csf_core::candidates::{build_candidate_set, OracleBackend};
use csf_core::eval::ablation::{load_items, AblationItem};
use csf_core::eval::{
    ablation_run, adapter_by_name, evaluate, lpips_metric, run_downstream, AblationContext, AblationGrid, EvalSample,
    MetricNets,
};
use csf_core::select::compose_single;
use csf_core::toy::{make_toy_set, save_toy_set, ToySpec};
use csf_core::trainer::TrainConfig;

fn toy() -> &'static [AblationItem] {
    static ITEMS: OnceLock<Vec<AblationItem>> = OnceLock::new();
    ITEMS.get_or_init(|| {
        let spec = ToySpec {
            count: 12,
            ..ToySpec::default()
        };
        make_toy_set(&spec, &AssetStore::builtin().lpips().unwrap())
            .unwrap()
            .into_iter()
            .map(|t| AblationItem {
                scene: t.scene,
                candidates: t.candidates,
            })
            .collect()
    })
}

#[test]
fn guided_downstream_beats_baseline_with_graded_oracle() {
    let lp = AssetStore::builtin().lpips().unwrap();
    let backend = OracleBackend::graded(4);
    let adapter = adapter_by_name("diffusion").unwrap();
    let (mut guided, mut baseline) = (0.0, 0.0);
    for it in toy() {
        let set = build_candidate_set(&it.scene, &backend, &lp, 4, 1, 7).unwrap();
        let guide = compose_single(&set.selected_candidates()[0], &it.scene).unwrap();
        let g = run_downstream(Some(&guide), &it.scene, adapter.as_ref()).unwrap();
        let b = run_downstream(None, &it.scene, adapter.as_ref()).unwrap();
        guided += lpips_metric(&g, &it.scene.image, &lp).unwrap();
        baseline += lpips_metric(&b, &it.scene.image, &lp).unwrap();
    }
    assert!(guided <= baseline, "guided {guided} vs baseline {baseline}");
}

#[test]
fn reports_over_same_scenes_share_manifest_hash() {
    let nets = MetricNets::from_store(&AssetStore::builtin()).unwrap();
    let adapter = adapter_by_name("identity").unwrap();
    let arm = |guided: bool| {
        let samples: Vec<EvalSample> = toy()
            .iter()
            .map(|it| {
                let guide = compose_single(&it.candidates.selected_candidates()[0], &it.scene).unwrap();
                EvalSample {
                    restored: run_downstream(guided.then_some(&guide), &it.scene, adapter.as_ref()).unwrap(),
                    gt: it.scene.image.clone(),
                    mask: it.scene.mask.clone(),
                }
            })
            .collect();
        evaluate(if guided { "guided" } else { "baseline" }, &samples, &nets).unwrap()
    };
    let (g, b) = (arm(true), arm(false));
    assert_eq!(g.manifest_hash, b.manifest_hash);
    assert_eq!(g.n_images, 12);
    assert!(g.fid >= 0.0 && (-1.0..=1.0).contains(&g.c_at_m_mean));
    assert!(g.c_at_m_mean > b.c_at_m_mean);
}

#[test]
fn p_axis_gives_three_rows_and_missing_checkpoints_do_not_stop_the_run() {
    let store = AssetStore::builtin();
    let nets = MetricNets::from_store(&store).unwrap();
    let base = TrainConfig::toy();
    let items = &toy()[..4];
    let dir = tempfile::tempdir().unwrap();
    let grid = AblationGrid::from_toml_str("[axes]\np = [1, 3, 4]\n").unwrap();
    let ctx = AblationContext {
        base: &base,
        items,
        extractor: store.perceptual().unwrap(),
        nets: &nets,
        out_dir: Some(dir.path()),
    };
    let rows = ablation_run(&grid, &ctx).unwrap();
    assert_eq!(rows.len(), 3);
    // p = 1 needs no checkpoint and bypasses fusion
    assert!(rows[0].complete && rows[0].checkpoint.is_none());
    assert!(!rows[1].complete && rows[1].reason.as_deref().unwrap().contains("no checkpoint"));
    assert!(!rows[2].complete);
    assert!(rows.iter().all(|r| r.config.p == r.variant.p));
    assert!(dir.path().join("ablation.jsonl").exists());
    assert!(dir.path().join("ablation_fid.png").exists());
}

#[test]
fn encoder_axis_trains_both_designs_with_budget() {
    let store = AssetStore::builtin();
    let nets = MetricNets::from_store(&store).unwrap();
    let base = TrainConfig {
        batch_size: 2,
        ssn_hidden: 8,
        psn_hidden: 8,
        ..TrainConfig::toy()
    };
    let dir = tempfile::tempdir().unwrap();
    let grid = AblationGrid::from_toml_str("train_steps = 1\n[axes]\nencoder_design = [\"single\", \"dual\"]\n").unwrap();
    let ctx = AblationContext {
        base: &base,
        items: &toy()[..4],
        extractor: store.perceptual().unwrap(),
        nets: &nets,
        out_dir: Some(dir.path()),
    };
    let rows = ablation_run(&grid, &ctx).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.complete, "{:?}", r.reason);
        assert!(r.checkpoint.as_ref().unwrap().exists());
    }
    // a second run picks up the checkpoints instead of training
    let reuse = AblationGrid {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        train_steps: None,
        ..grid
    };
    let again = ablation_run(&reuse, &AblationContext { out_dir: None, ..ctx }).unwrap();
    assert!(again.iter().all(|r| r.complete));
    assert_eq!(again[0].report, rows[0].report);
}

#[test]
fn toy_set_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        count: 2,
        ..ToySpec::default()
    };
    let set = make_toy_set(&spec, &AssetStore::builtin().lpips().unwrap()).unwrap();
    save_toy_set(dir.path(), &set).unwrap();
    let items = load_items(&dir.path().join("scenes"), &dir.path().join("candidates")).unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0].scene.mask, set[0].scene.mask);
    assert_eq!(items[0].candidates.selected, set[0].candidates.selected);
}
