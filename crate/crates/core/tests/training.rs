use std::sync::{Arc, OnceLock};

use csf_autograd::{par, Graph, Tensor};
use csf_core::assets::{AssetStore, FeatureNet};
use csf_core::data::BinaryMap;
use csf_core::objectives::{loss_vars, LossInputs};
use csf_core::toy::{make_toy_set, ToySpec};
use csf_core::trainer::{self, Checkpoint, TrainConfig, TrainItem, Trainer};
use csf_core::CsfError;

fn extractor() -> Arc<FeatureNet> {
    AssetStore::builtin().perceptual().unwrap()
}

fn items() -> &'static [TrainItem] {
    static ITEMS: OnceLock<Vec<TrainItem>> = OnceLock::new();
    ITEMS.get_or_init(|| {
        let spec = ToySpec {
            count: 8,
            ..ToySpec::default()
        };
        make_toy_set(&spec, &AssetStore::builtin().lpips().unwrap())
            .unwrap()
            .into_iter()
            .map(|t| TrainItem::from_set(t.scene, &t.candidates, 3, Default::default()).unwrap())
            .collect()
    })
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        ssn_hidden: 8,
        psn_hidden: 8,
        max_steps: Some(steps),
        ..TrainConfig::toy()
    }
}

#[test]
fn seeded_runs_are_reproducible_at_step_ten() {
    let cfg = small_config(10);
    let a = trainer::train(&cfg, items(), extractor(), None).unwrap();
    let b = trainer::train(&cfg, items(), extractor(), None).unwrap();
    assert_eq!(a.history.len(), 10);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params.checksum(), b.model.params.checksum());
}

#[test]
fn sequential_and_parallel_training_agree_exactly() {
    let cfg = small_config(3);
    let par_run = trainer::train(&cfg, items(), extractor(), None).unwrap();
    let seq_run = par::with_single_thread(|| trainer::train(&cfg, items(), extractor(), None).unwrap());
    assert_eq!(par_run.history, seq_run.history);
    assert_eq!(par_run.model.params.checksum(), seq_run.model.params.checksum());
}

#[test]
fn resume_continues_bit_exactly() {
    let cfg = small_config(6);
    let dir = tempfile::tempdir().unwrap();
    let run = |t: &mut Trainer, prepared: &[csf_core::model::Prepared], from: usize, to: usize| {
        for s in from..to {
            let batch = [&prepared[(2 * s) % 8], &prepared[(2 * s + 1) % 8]];
            t.train_step(&batch, &["a", "b"], cfg.tau_at(s, 6), dir.path()).unwrap();
        }
    };
    let mut straight = Trainer::new(cfg.clone(), extractor()).unwrap();
    let prepared = straight.prepare(items()).unwrap();
    run(&mut straight, &prepared, 0, 6);

    let mut first = Trainer::new(cfg.clone(), extractor()).unwrap();
    run(&mut first, &prepared, 0, 3);
    let path = dir.path().join("mid.safetensors");
    first.checkpoint(None).save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), extractor()).unwrap();
    assert_eq!(resumed.step, 3);
    run(&mut resumed, &prepared, 3, 6);

    for (name, p) in straight.model.params.iter() {
        assert_eq!(p, resumed.model.params.get(name).unwrap(), "{name}");
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_probe_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&small_config(2), items(), extractor(), Some(dir.path())).unwrap();
    assert!(dir.path().join(trainer::LOSS_LOG).exists());
    assert_eq!(out.checkpoints.len(), 1);
    let ckpt = Checkpoint::load(&dir.path().join(trainer::LATEST)).unwrap();
    assert_eq!(ckpt.version, trainer::CHECKPOINT_VERSION);
    let model = ckpt.model(extractor()).unwrap();
    for it in &items()[..3] {
        let (g1, v1) = out.model.infer(&it.scene, &it.candidates).unwrap();
        let (g2, v2) = model.infer(&it.scene, &it.candidates).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(v1, v2);
    }
    let other = Arc::new(csf_core::assets::builtin(csf_core::assets::VGG, 99, 0).unwrap());
    assert!(ckpt.model(other).is_err());
}

#[test]
fn extractor_stays_frozen() {
    let ex = extractor();
    let before = ex.checksum();
    let t = Trainer::new(small_config(1), ex.clone()).unwrap();
    let prepared = t.prepare(&items()[..2]).unwrap();
    let (_, grads) = t.batch_gradients(&prepared.iter().collect::<Vec<_>>(), 1.0).unwrap();
    assert!(!grads.is_empty());
    assert!(grads.keys().all(|k| t.model.params.contains(k)));
    assert!(grads.keys().all(|k| !ex.weights.contains(k)));
    assert_eq!(ex.checksum(), before);
}

#[test]
fn lambda_one_cuts_hierarchical_gradient() {
    let ex = extractor();
    let g = Graph::new();
    let gt = Tensor::full([3, 8, 8], 0.4);
    let guide = g.leaf(Tensor::full([3, 8, 8], 0.6));
    let coarse = g.leaf(Tensor::full([3, 4, 4], 0.1));
    let weights = g.leaf(Tensor::full([64, 2], 0.5));
    let filled = BinaryMap::new(8, 8, true);
    let levels = [guide, coarse];
    let vars = loss_vars(LossInputs {
        guide,
        gt: &gt,
        filled: &filled,
        weights,
        level_guides: &levels,
        extractor: &ex,
        lambda: 1.0,
    })
    .unwrap();
    assert!(vars.breakdown().hier > 0.0);
    let grads = g.backward(vars.total);
    if let Some(d) = grads.wrt(coarse) {
        assert!(d.data().iter().all(|v| *v == 0.0));
    }
    assert!(grads.wrt(guide).unwrap().data().iter().any(|v| *v != 0.0));
}

#[test]
fn nonfinite_loss_writes_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small_config(1), extractor()).unwrap();
    let mut prepared = t.prepare(&items()[..1]).unwrap();
    prepared[0].gt.data_mut()[0] = f64::NAN;
    let err = t.train_step(&[&prepared[0]], &["bad"], 1.0, dir.path()).unwrap_err();
    match err {
        CsfError::NonFiniteLoss { step, dump } => {
            assert_eq!(step, 0);
            assert!(dump.exists());
        }
        other => panic!("unexpected {other}"),
    }
}
