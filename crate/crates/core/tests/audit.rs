use csl_core::csl::{
    audit_dataset, audit_sequence, calibrate_tau, compute_csl, eval_loss_trajectory, AuditLoss, CslError,
    DetectionConfig, FlagMode,
};
use csl_core::model::{forward_eval, weighted_ce, ModelConfig, TemporalMode};
use csl_core::seqdata::{generate_dataset, Dataset, PhaseGrammar, Split};
use csl_core::trainer::{train_in_memory, CheckpointStore, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grammar() -> PhaseGrammar {
    PhaseGrammar::axis_aligned(3, 5, 4.0, 0.5, (6, 10), 1).unwrap()
}

fn trained(epochs: usize) -> (Dataset, CheckpointStore) {
    let g = grammar();
    let ds = generate_dataset(&g, 6, Split::Train, 21).unwrap();
    let mut cfg = ModelConfig::new(5, 3, TemporalMode::Attention);
    cfg.hidden_dim = 12;
    cfg.head_dims = (8, 6);
    cfg.attention_dim = 6;
    let tc = TrainConfig {
        epochs,
        learning_rate: 3e-3,
        shuffle_seed: 2,
        ..Default::default()
    };
    let store = train_in_memory(&ds, &cfg, &tc).unwrap();
    (ds, store)
}

#[test]
fn single_epoch_trajectory_is_one_eval_row() {
    let (ds, store) = trained(1);
    let s = &ds.samples[0];
    let tr = eval_loss_trajectory(&store, s, &DetectionConfig::default()).unwrap();
    assert_eq!(tr.losses.dim(), (1, s.len()));
    let trace = forward_eval(&store.snapshots[0].params, store.model_config(), &s.frames).unwrap();
    let expected = trace.frame_losses(&s.labels, &[1.0; 3]).unwrap();
    assert_eq!(tr.losses.row(0).to_vec(), expected);
    assert_eq!(compute_csl(&tr), expected);
}

#[test]
fn spot_entries_match_independent_recomputation() {
    let (ds, store) = trained(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for audit_loss in [AuditLoss::Unweighted, AuditLoss::TrainWeighted] {
        let cfg = DetectionConfig { audit_loss, ..Default::default() };
        let alpha = match audit_loss {
            AuditLoss::Unweighted => vec![1.0; 3],
            AuditLoss::TrainWeighted => store.manifest.class_weights.alpha.clone(),
        };
        let s = &ds.samples[3];
        let tr = eval_loss_trajectory(&store, s, &cfg).unwrap();
        assert_eq!(tr.epochs, store.epochs());
        for _ in 0..5 {
            let e = rng.gen_range(0..store.len());
            let t = rng.gen_range(0..s.len());
            let probs = forward_eval(&store.snapshots[e].params, store.model_config(), &s.frames).unwrap().probs;
            let want = weighted_ce(probs.row(t).as_slice().unwrap(), s.labels[t], &alpha).unwrap();
            assert_eq!(tr.losses[[e, t]], want);
        }
    }
}

#[test]
fn weighted_and_unweighted_agree_when_alpha_is_one() {
    let (ds, mut store) = trained(3);
    store.manifest.class_weights.alpha = vec![1.0; 3];
    let s = &ds.samples[1];
    let a = eval_loss_trajectory(&store, s, &DetectionConfig::default()).unwrap();
    let b = eval_loss_trajectory(
        &store,
        s,
        &DetectionConfig { audit_loss: AuditLoss::TrainWeighted, ..Default::default() },
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn profile_decomposes_into_stages() {
    let (ds, store) = trained(4);
    let cfg = DetectionConfig::default();
    for s in &ds.samples {
        let p = audit_sequence(&store, s, &cfg).unwrap();
        assert_eq!(p.csl, compute_csl(&eval_loss_trajectory(&store, s, &cfg).unwrap()));
        assert_eq!(p.flags.len(), s.len());
    }
}

#[test]
fn degenerate_composition_flags_everything() {
    let (ds, store) = trained(1);
    let cfg = DetectionConfig {
        mode: FlagMode::Threshold { tau: -1.0 },
        window: 0,
        ..Default::default()
    };
    let p = audit_sequence(&store, &ds.samples[2], &cfg).unwrap();
    assert!(p.flags.iter().all(|&f| f));
    assert_eq!(p.segments, vec![(0, ds.samples[2].len())]);
}

#[test]
fn calibrated_tau_bounds_pool_exceedances() {
    let (_, store) = trained(8);
    let val = generate_dataset(&grammar(), 8, Split::Val, 5).unwrap();
    let cfg = DetectionConfig::default();
    let profiles: Vec<_> = val.samples.iter().map(|s| audit_sequence(&store, s, &cfg).unwrap()).collect();
    let tau = calibrate_tau(&profiles, 0.95).unwrap();
    let above: usize = profiles.iter().map(|p| p.smoothed.iter().filter(|&&v| v > tau).count()).sum();
    let n: usize = profiles.iter().map(|p| p.len()).sum();
    // the interpolated quantile sits between order statistics floor(h) and floor(h)+1
    let h = (n - 1) as f64 * 0.95;
    assert!(above <= n - 1 - h.floor() as usize, "{above} of {n}");
}

#[test]
fn noiseless_clean_sample_stays_under_calibrated_tau() {
    let g = PhaseGrammar::axis_aligned(3, 5, 4.0, 0.0, (8, 8), 0).unwrap();
    let train = generate_dataset(&g, 6, Split::Train, 1).unwrap();
    let mut cfg = ModelConfig::new(5, 3, TemporalMode::ContextFree);
    cfg.hidden_dim = 12;
    cfg.head_dims = (8, 6);
    let tc = TrainConfig { epochs: 8, learning_rate: 3e-3, ..Default::default() };
    let store = train_in_memory(&train, &cfg, &tc).unwrap();
    let det = DetectionConfig::default();
    let val = generate_dataset(&g, 6, Split::Val, 2).unwrap();
    let profiles: Vec<_> = val.samples.iter().map(|s| audit_sequence(&store, s, &det).unwrap()).collect();
    let tau = calibrate_tau(&profiles, 0.95).unwrap();
    let test = generate_dataset(&g, 1, Split::Test, 3).unwrap();
    let p = audit_sequence(&store, &test.samples[0], &DetectionConfig { mode: FlagMode::Threshold { tau }, ..det }).unwrap();
    assert!(p.flagged_count() as f64 <= 0.05 * p.len() as f64, "{} of {}", p.flagged_count(), p.len());
}

#[test]
fn parallel_audit_matches_sequential() {
    let (ds, store) = trained(5);
    let cfg = DetectionConfig::default();
    let seq = audit_dataset(&store, &ds, &cfg, 1).unwrap();
    for workers in [2, 4] {
        assert_eq!(audit_dataset(&store, &ds, &cfg, workers).unwrap(), seq);
    }
    let ids: Vec<_> = seq.iter().map(|r| r.profile.video_id.clone()).collect();
    let expected: Vec<_> = ds.samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn incompatible_inputs_cite_fingerprint() {
    let (ds, store) = trained(1);
    let mut s = ds.samples[0].clone();
    s.labels[0] = 7;
    match eval_loss_trajectory(&store, &s, &DetectionConfig::default()) {
        Err(CslError::Compatibility { fingerprint, .. }) => assert_eq!(fingerprint, store.manifest.dataset_fingerprint),
        other => panic!("expected compatibility error, got {other:?}"),
    }
    let other = PhaseGrammar::axis_aligned(3, 5, 5.0, 0.5, (6, 10), 1).unwrap();
    let foreign = generate_dataset(&other, 2, Split::Test, 1).unwrap();
    assert!(matches!(
        audit_dataset(&store, &foreign, &DetectionConfig::default(), 1),
        Err(CslError::Compatibility { .. })
    ));
}
