use std::collections::BTreeMap;
use std::path::Path;

use tbn_core::io::{load_model, read_dataset, save_model, write_dataset, write_loss_log};
use tbn_core::losses::LossWeights;
use tbn_core::net::Arch;
use tbn_core::scenes::{make_dataset, DatasetConfig, PoseSampling, ShapeFamily};
use tbn_core::train::{adam_step, heldout_l1, sample_objective, train, AdamState, TrainConfig};
use tbn_core::{FeatureVolume64, TbnModel32, TbnModel64};

fn tiny_data() -> DatasetConfig {
    DatasetConfig {
        seed: 5,
        n_scenes: 6,
        n_views: 4,
        sampling: PoseSampling::Ring { step: 90.0 },
        families: vec![ShapeFamily::Chairoid, ShapeFamily::Box],
        image_size: 16,
        side: 6,
        n_test: 2,
    }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn short_run(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let ds = make_dataset::<f32>(&tiny_data()).unwrap();
    let mut model = TbnModel32::new(Arch::tiny(), seed).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(6),
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, ds.train(), None, &cfg, |_| {}).unwrap();
    let (mut log, mut ckpt) = (Vec::new(), Vec::new());
    write_loss_log(&mut log, &out.log).unwrap();
    tbn_core::io::write_model(&mut ckpt, &model).unwrap();
    (log, ckpt)
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &make_dataset::<f32>(&tiny_data()).unwrap()).unwrap();
    write_dataset(b.path(), &make_dataset::<f32>(&tiny_data()).unwrap()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);

    let (log1, ckpt1) = short_run(3);
    let (log2, ckpt2) = short_run(3);
    assert_eq!(log1, log2);
    assert_eq!(ckpt1, ckpt2);
    let (log3, _) = short_run(4);
    assert_ne!(log1, log3);
}

#[test]
fn dataset_reload_preserves_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset::<f64>(&tiny_data()).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(back.config, ds.config);
    assert_eq!(back.test().len(), 2);
    for (a, b) in back.scenes.iter().zip(&ds.scenes) {
        assert_eq!(a.shape, b.shape);
        assert_eq!(a.views[1].image, b.views[1].image);
        assert_eq!(a.views[1].pose, b.views[1].pose);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset::<f32>(&tiny_data()).unwrap();
    let model = TbnModel32::new(Arch::tiny(), 12).unwrap();
    let path = dir.path().join("m.vbm");
    save_model(&path, &model).unwrap();
    let back: TbnModel32 = load_model(&path).unwrap();
    assert_eq!(back.arch(), model.arch());
    let scene = &ds.scenes[0];
    let inputs = [(scene.views[0].image.clone(), scene.views[0].pose)];
    let (a, va) = model.synthesize(&inputs, &scene.views[2].pose).unwrap();
    let (b, vb) = back.synthesize(&inputs, &scene.views[2].pose).unwrap();
    assert_eq!(a, b);
    assert_eq!(va, vb);
}

#[test]
fn double_checkpoints_store_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let model = TbnModel64::new(Arch::tiny(), 12).unwrap();
    let path = dir.path().join("m.vbm");
    save_model(&path, &model).unwrap();
    let back: TbnModel64 = load_model(&path).unwrap();
    let rounded: TbnModel64 = model.cast::<f32>().cast();
    let image = tbn_core::ImagePlane64::filled(16, 16, 3, 0.25);
    let (x, y): (FeatureVolume64, FeatureVolume64) = (back.encode(&image).unwrap(), rounded.encode(&image).unwrap());
    assert_eq!(x, y);
}

#[test]
fn overfitting_one_view_reduces_the_loss() {
    let ds = make_dataset::<f64>(&tiny_data()).unwrap();
    let scene = &ds.scenes[0];
    let mut model = TbnModel64::new(Arch::tiny(), 1).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        weights: LossWeights::reconstruction_only(),
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(model.params());
    let mut losses = Vec::new();
    for _ in 0..50 {
        let r = sample_objective(&model, scene, &[0], 0, &cfg, true).unwrap();
        losses.push(r.total);
        adam_step(model.params_mut(), &r.grads.unwrap(), &mut adam, &cfg).unwrap();
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn early_stop_keeps_the_best_parameters() {
    let ds = make_dataset::<f32>(&tiny_data()).unwrap();
    let mut model = TbnModel32::new(Arch::tiny(), 2).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(12),
        batch_size: 2,
        eval_every: 2,
        patience: 2,
        ..TrainConfig::default()
    };
    let out = train(&mut model, ds.train(), Some(ds.test()), &cfg, |_| {}).unwrap();
    let best = out.best_eval.unwrap();
    assert!((heldout_l1(&model, ds.test()).unwrap() - best).abs() < 1e-6);
    assert_eq!(out.log.len(), out.steps);
}
