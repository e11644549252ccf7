use std::fs;
use std::path::Path;

use csl_core::model::{ModelConfig, TemporalMode};
use csl_core::seqdata::{generate_dataset, PhaseGrammar, Split};
use csl_core::trainer::{load_store, train, train_in_memory, TrainConfig};
use sha2::{Digest, Sha256};

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(fs::read(&p).unwrap())))
        })
        .collect();
    out.sort();
    out
}

fn setup() -> (csl_core::seqdata::Dataset, ModelConfig, TrainConfig) {
    let g = PhaseGrammar::axis_aligned(4, 6, 3.0, 0.5, (5, 9), 1).unwrap();
    let ds = generate_dataset(&g, 6, Split::Train, 11).unwrap();
    let mut cfg = ModelConfig::new(6, 4, TemporalMode::Attention);
    cfg.init_seed = 4;
    let tc = TrainConfig {
        epochs: 4,
        learning_rate: 1e-3,
        shuffle_seed: 9,
        ..Default::default()
    };
    (ds, cfg, tc)
}

#[test]
fn two_runs_write_identical_bytes() {
    let (ds, cfg, tc) = setup();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&ds, &cfg, &tc, a.path()).unwrap();
    train(&ds, &cfg, &tc, b.path()).unwrap();
    let ha = hash_dir(a.path());
    assert_eq!(ha.len(), 5);
    assert_eq!(ha, hash_dir(b.path()));
}

#[test]
fn loaded_store_matches_returned_store() {
    let (ds, cfg, tc) = setup();
    let dir = tempfile::tempdir().unwrap();
    let returned = train(&ds, &cfg, &tc, dir.path()).unwrap();
    let loaded = load_store(dir.path()).unwrap();
    assert_eq!(loaded, returned);
    assert_eq!(returned, train_in_memory(&ds, &cfg, &tc).unwrap());
    assert_eq!(loaded.epochs(), vec![1, 2, 3, 4]);
}

#[test]
fn failed_run_keeps_written_snapshots() {
    let (ds, cfg, tc) = setup();
    let dir = tempfile::tempdir().unwrap();
    train(&ds, &cfg, &TrainConfig { epochs: 2, ..tc.clone() }, dir.path()).unwrap();
    let before = hash_dir(dir.path());
    // a file in place of the directory makes the writer fail up front
    let blocked = dir.path().join("ckpt_0001.bin").join("nested");
    assert!(train(&ds, &cfg, &tc, &blocked).is_err());
    assert_eq!(hash_dir(dir.path()), before);
    assert_eq!(load_store(dir.path()).unwrap().len(), 2);
}
