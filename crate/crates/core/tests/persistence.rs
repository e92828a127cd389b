//! Training determinism, checkpoint round-trips, and resume equivalence.

use std::path::PathBuf;

use moe_adapter::adapter::AdapterConfig;
use moe_adapter::dataset::{load_dataset, make_dataset, save_dataset, ConflictDatasetConfig};
use moe_adapter::objectives::LossConfig;
use moe_adapter::optim::OptimConfig;
use moe_adapter::trainer::{load_checkpoint, resume, save_checkpoint, train, RunManifest};

fn desk_data() -> ConflictDatasetConfig {
    ConflictDatasetConfig {
        n_per_category: 200,
        ..Default::default()
    }
}

fn short_optim(total_steps: usize) -> OptimConfig {
    OptimConfig {
        total_steps,
        warmup_steps: 4,
        stable_steps: 16,
        decay_steps: 10,
        batch_size: 16,
        seed: 77,
        ..Default::default()
    }
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("moe-adapter-test-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn identical_runs_are_bit_identical() {
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("moe-8c4").unwrap();
    let loss = LossConfig::default();
    let optim = short_optim(30);
    let a = train(&ds, &adapter_cfg, &loss, &optim, None).unwrap();
    let b = train(&ds, &adapter_cfg, &loss, &optim, None).unwrap();
    assert_eq!(a.log.steps, b.log.steps);
    assert_eq!(a.adapter, b.adapter);
    assert_eq!(a.log.to_csv(), b.log.to_csv());

    // a different seed diverges
    let optim2 = OptimConfig {
        seed: 78,
        ..short_optim(30)
    };
    let c = train(&ds, &adapter_cfg, &loss, &optim2, None).unwrap();
    assert_ne!(a.log.steps, c.log.steps);
}

#[test]
fn zero_steps_returns_initialization() {
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("dense-base").unwrap();
    let out = train(&ds, &adapter_cfg, &LossConfig::default(), &short_optim(0), None).unwrap();
    assert!(out.log.steps.is_empty());
    let init = moe_adapter::adapter::AnyAdapter::<f64>::init(
        &adapter_cfg,
        moe_adapter::seeds::derive(77, moe_adapter::seeds::STREAM_INIT, 0),
    )
    .unwrap();
    assert_eq!(out.adapter, init);
}

#[test]
fn frozen_dataset_is_bitwise_unchanged_by_training() {
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let before = ds.clone();
    let adapter_cfg = AdapterConfig::preset("moe-8c4").unwrap();
    train(&ds, &adapter_cfg, &LossConfig::default(), &short_optim(10), None).unwrap();
    assert_eq!(ds, before);
    assert!(ds.readout.bits_eq(&before.readout));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tmpdir("ckpt-bytes");
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("moe-8c4").unwrap();
    let loss = LossConfig::default();
    let optim = short_optim(12);
    let out = train(&ds, &adapter_cfg, &loss, &optim, None).unwrap();

    let manifest = RunManifest::new(adapter_cfg, loss, optim, ds.config.clone(), None);
    let p1 = dir.join("a.ckpt");
    let p2 = dir.join("b.ckpt");
    save_checkpoint(&p1, &out.adapter, &out.state, &manifest, 12).unwrap();
    let loaded = load_checkpoint::<f64>(&p1).unwrap();
    save_checkpoint(&p2, &loaded.adapter, &loaded.state, &loaded.manifest, loaded.step).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.adapter, out.adapter);
    assert_eq!(loaded.state, out.state);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tmpdir("resume");
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("moe-8c4").unwrap();
    let loss = LossConfig::default();

    // uninterrupted 30 steps
    let full = train(&ds, &adapter_cfg, &loss, &short_optim(30), None).unwrap();

    // 20 steps, checkpoint, resume for the remaining 10
    let part = train(&ds, &adapter_cfg, &loss, &short_optim(20), None).unwrap();
    let mut manifest =
        RunManifest::new(adapter_cfg, loss, short_optim(20), ds.config.clone(), None);
    manifest.optim.total_steps = 30;
    let p = dir.join("mid.ckpt");
    save_checkpoint(&p, &part.adapter, &part.state, &manifest, 20).unwrap();
    let loaded = load_checkpoint::<f64>(&p).unwrap();
    let resumed = resume(&ds, loaded, None).unwrap();

    assert_eq!(resumed.log.steps.len(), 10);
    assert_eq!(&full.log.steps[20..], &resumed.log.steps[..]);
    assert_eq!(full.adapter, resumed.adapter);
    assert_eq!(full.state, resumed.state);

    // the warmup/stable/decay boundaries line up too
    for (a, b) in full.log.steps[20..].iter().zip(&resumed.log.steps) {
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
}

#[test]
fn dataset_container_round_trip() {
    let dir = tmpdir("dataset");
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let p1 = dir.join("a.data");
    let p2 = dir.join("b.data");
    save_dataset(&ds, &p1).unwrap();
    let back = load_dataset::<f64>(&p1).unwrap();
    assert_eq!(back, ds);
    save_dataset(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn run_manifest_hash_ignores_created() {
    let ds_cfg = desk_data();
    let manifest = RunManifest::new(
        AdapterConfig::preset("moe-8c4").unwrap(),
        LossConfig::default(),
        short_optim(5),
        ds_cfg,
        Some("deadbeef".into()),
    );
    let mut stamped = manifest.clone();
    stamped.created = Some("2026-01-01T00:00:00Z".into());
    assert_eq!(
        manifest.canonical_hash().unwrap(),
        stamped.canonical_hash().unwrap()
    );
}

#[test]
fn divergent_loss_reports_step() {
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("dense-base").unwrap();
    // absurd learning rate with clipping disabled blows the loss up fast
    let optim = OptimConfig {
        lr_peak: 1e12,
        lr_min: 1e12,
        warmup_steps: 0,
        stable_steps: 1000,
        decay_steps: 0,
        clip_norm: None,
        ..short_optim(50)
    };
    match train(&ds, &adapter_cfg, &LossConfig::default(), &optim, None) {
        Err(moe_adapter::Error::Divergence { step, .. }) => assert!(step > 0),
        Err(other) => panic!("expected divergence, got {other}"),
        Ok(_) => panic!("expected divergence, run finished"),
    }
}

#[test]
fn analysis_leaves_adapter_bitwise_unchanged() {
    let ds = make_dataset::<f64>(&desk_data()).unwrap();
    let adapter_cfg = AdapterConfig::preset("moe-8c4").unwrap();
    let out = train(&ds, &adapter_cfg, &LossConfig::default(), &short_optim(10), None).unwrap();
    let before = out.adapter.clone();
    let opts = moe_adapter::analysis::AnalysisOptions {
        eval_batches: 2,
        batch_size: 16,
        ..Default::default()
    };
    let report =
        moe_adapter::analysis::analyze_checkpoint(&out.adapter, &ds, &opts, None, None).unwrap();
    assert_eq!(out.adapter, before);
    for (i, row) in report.influence.iter().enumerate() {
        assert_eq!(row[i], Some(1.0), "influence diagonal");
    }
    for (i, row) in report.cosine.iter().enumerate() {
        assert_eq!(row[i], Some(1.0), "cosine diagonal");
    }
}
