use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use csl_core::csl::{audit_dataset, calibrate_tau, trajectory_curvature, CslProfile, DetectionConfig, LossTrajectory};
use csl_core::metrics::{build_report, MetricsReport, ReportSettings};
use csl_core::seqdata::io::{dataset_fingerprint, grammar_fingerprint};
use csl_core::seqdata::{corrupt_dataset, generate_dataset, read_dataset, write_dataset, Dataset, Split};
use csl_core::trainer::{load_store, train_with_progress, CheckpointStore, MANIFEST_FILE};
use serde::{Deserialize, Serialize};

use crate::config::{FlagKind, RunConfig};
use crate::{CliError, CorruptArgs, HeatmapArgs};

pub const PROFILES_FORMAT: &str = "csl-profiles/1";
pub const AUDIT_CSV: &str = "audit.csv";
pub const PROFILES_JSON: &str = "profiles.json";
pub const REPORT_JSON: &str = "report.json";

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.resolve(&cfg.paths.out)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let grammar = cfg.grammar()?;
    let counts = [
        (Split::Train, cfg.generate.train),
        (Split::Val, cfg.generate.val),
        (Split::Test, cfg.generate.test),
    ];
    for (split, n) in counts {
        let ds = generate_dataset(&grammar, n, split, cfg.split_seed(split))?;
        let path = cfg.paths.split_file(split);
        ensure_parent(&path)?;
        write_dataset(&ds, &path)?;
        println!("{}: {} samples, {} frames -> {}", split.as_str(), n, ds.total_frames(), path.display());
    }
    Ok(())
}

pub fn cmd_corrupt(cfg: &RunConfig, args: &CorruptArgs) -> Result<(), CliError> {
    let spec = cfg.corruption_spec(args.kind, args.fraction);
    spec.validate()?;
    let split = args.split.unwrap_or(cfg.corruption.split);
    let input = match &args.input {
        Some(p) => cfg.paths.resolve(p),
        None => cfg.paths.split_file(split),
    };
    let output = match &args.output {
        Some(p) => cfg.paths.resolve(p),
        None => {
            let kind = serde_json::to_value(spec.kind).expect("kind serialises");
            let name = format!("{}.{}.jsonl", split.as_str(), kind.as_str().unwrap_or("corrupt"));
            cfg.paths.resolve(&cfg.paths.data.join(name))
        }
    };
    let ds = load_dataset(&input)?;
    let corrupted = corrupt_dataset(&ds, &spec)?;
    ensure_parent(&output)?;
    write_dataset(&corrupted, &output)?;
    let n = corrupted.samples.iter().filter(|s| s.corruption.is_some()).count();
    let frames: usize = corrupted.samples.iter().map(|s| s.error_count()).sum();
    println!(
        "corrupted {n} of {} samples ({frames} frames) -> {}",
        ds.samples.len(),
        output.display()
    );
    Ok(())
}

/// Removes snapshot files from an earlier run so reruns leave identical
/// directories.
fn clear_store(dir: &Path) -> Result<(), CliError> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let stale = name == MANIFEST_FILE || (name.starts_with("ckpt_") && (name.ends_with(".bin") || name.ends_with(".tmp")));
        if stale {
            fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.paths.resolve(&cfg.paths.train))?;
    let store_dir = cfg.paths.resolve(&cfg.paths.store);
    clear_store(&store_dir)?;
    let stdout = std::io::stdout();
    let store = train_with_progress(&ds, &cfg.model_config(), &cfg.train_config(), Some(&store_dir), |e, loss| {
        let _ = writeln!(stdout.lock(), "epoch {e:4} loss {loss:.6}");
    })?;
    println!("{} checkpoints -> {}", store.len(), store_dir.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub quantile: f64,
    pub tau: f64,
    pub validation_fingerprint: String,
    pub validation_frames: usize,
    pub assumption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub trajectory: LossTrajectory,
    pub profile: CslProfile,
    pub curvature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilesFile {
    pub format: String,
    pub store_dataset_fingerprint: String,
    pub store_grammar_fingerprint: String,
    pub audit_dataset_fingerprint: String,
    pub detection: DetectionConfig,
    pub calibration: Option<Calibration>,
    pub records: Vec<ProfileEntry>,
}

impl ProfilesFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        if file.format != PROFILES_FORMAT {
            return Err(CliError::Data(format!("{}: unsupported format {:?}", path.display(), file.format)));
        }
        Ok(file)
    }
}

fn check_fingerprints(store: &CheckpointStore, ds: &Dataset) -> Result<(), CliError> {
    let audit_grammar = grammar_fingerprint(&ds.grammar);
    if audit_grammar != store.manifest.grammar_fingerprint {
        return Err(CliError::Data(format!(
            "audit dataset does not come from the training grammar\n  store:  dataset {} grammar {}\n  audit:  dataset {} grammar {}",
            store.manifest.dataset_fingerprint,
            store.manifest.grammar_fingerprint,
            dataset_fingerprint(ds),
            audit_grammar
        )));
    }
    Ok(())
}

fn calibrate(cfg: &RunConfig, store: &CheckpointStore) -> Result<Calibration, CliError> {
    let val = load_dataset(&cfg.paths.resolve(&cfg.paths.val))?;
    check_fingerprints(store, &val)?;
    let probe = cfg.detection_config(0.0);
    let records = audit_dataset(store, &val, &probe, cfg.workers)?;
    let profiles: Vec<CslProfile> = records.into_iter().map(|r| r.profile).collect();
    let q = cfg.detection.calibration_quantile;
    let tau = calibrate_tau(&profiles, q)?;
    Ok(Calibration {
        quantile: q,
        tau,
        validation_fingerprint: dataset_fingerprint(&val),
        validation_frames: val.total_frames(),
        assumption: "validation split assumed free of annotation errors".into(),
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_audit(cfg: &RunConfig) -> Result<(), CliError> {
    let store = load_store(&cfg.paths.resolve(&cfg.paths.store))?;
    let ds = load_dataset(&cfg.paths.resolve(&cfg.paths.audit))?;
    check_fingerprints(&store, &ds)?;

    let (det, calibration) = match (cfg.detection.mode, cfg.detection.tau) {
        (FlagKind::Threshold, None) => {
            let c = calibrate(cfg, &store)?;
            println!("tau = {} (q = {} over {} validation frames)", c.tau, c.quantile, c.validation_frames);
            (cfg.detection_config(c.tau), Some(c))
        }
        (_, tau) => (cfg.detection_config(tau.unwrap_or(0.0)), None),
    };
    let records = audit_dataset(&store, &ds, &det, cfg.workers)?;

    let out = out_dir(cfg);
    let csv_path = out.join(AUDIT_CSV);
    ensure_parent(&csv_path)?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let csv_err = |e: csv::Error| CliError::io(&csv_path, e);
    w.write_record(["video_id", "frame", "label", "csl", "csl_smoothed", "curvature", "flag", "gt_error"])
        .map_err(csv_err)?;
    let mut entries = Vec::with_capacity(records.len());
    for (rec, sample) in records.into_iter().zip(&ds.samples) {
        let curvature = trajectory_curvature(&rec.trajectory).ok();
        let p = &rec.profile;
        for t in 0..sample.len() {
            w.write_record([
                sample.id.clone(),
                t.to_string(),
                sample.labels[t].to_string(),
                fmt_f64(p.csl[t]),
                fmt_f64(p.smoothed[t]),
                curvature.as_ref().map(|c| fmt_f64(c[t])).unwrap_or_default(),
                u8::from(p.flags[t]).to_string(),
                u8::from(sample.error_mask[t]).to_string(),
            ])
            .map_err(csv_err)?;
        }
        entries.push(ProfileEntry {
            trajectory: rec.trajectory,
            profile: rec.profile,
            curvature,
        });
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;

    let flagged: usize = entries.iter().map(|e| e.profile.flagged_count()).sum();
    let file = ProfilesFile {
        format: PROFILES_FORMAT.into(),
        store_dataset_fingerprint: store.manifest.dataset_fingerprint.clone(),
        store_grammar_fingerprint: store.manifest.grammar_fingerprint.clone(),
        audit_dataset_fingerprint: dataset_fingerprint(&ds),
        detection: det,
        calibration,
        records: entries,
    };
    let json_path = out.join(PROFILES_JSON);
    let mut bytes = serde_json::to_vec(&file).map_err(|e| CliError::io(&json_path, e))?;
    bytes.push(b'\n');
    write_file(&json_path, &bytes)?;
    println!(
        "audited {} videos, {} frames, {} flagged, {} checkpoints -> {}",
        ds.samples.len(),
        ds.total_frames(),
        flagged,
        store.len(),
        csv_path.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let profiles = ProfilesFile::read(&out.join(PROFILES_JSON))?;
    let ds = load_dataset(&cfg.paths.resolve(&cfg.paths.audit))?;
    let audit_fp = dataset_fingerprint(&ds);
    if audit_fp != profiles.audit_dataset_fingerprint {
        return Err(CliError::Data(format!(
            "profiles were computed on dataset {}, configured audit dataset is {}",
            profiles.audit_dataset_fingerprint, audit_fp
        )));
    }
    let echo = serde_json::json!({
        "run": cfg,
        "detection": profiles.detection,
        "calibration": profiles.calibration,
        "store_dataset_fingerprint": profiles.store_dataset_fingerprint,
        "store_grammar_fingerprint": profiles.store_grammar_fingerprint,
        "audit_dataset_fingerprint": profiles.audit_dataset_fingerprint,
        "audit_corruption": ds.corruption,
    });
    let list: Vec<CslProfile> = profiles.records.into_iter().map(|r| r.profile).collect();
    let report = build_report(
        &list,
        &ds,
        &ReportSettings {
            k_percent: cfg.detection.eda_k_percent,
            eda_pool: cfg.detection.eda_pool,
            config: echo,
        },
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_file(&out.join(REPORT_JSON), report.to_json().as_bytes())?;
    println!("{}", summary_line(&report));
    Ok(())
}

pub fn summary_line(r: &MetricsReport) -> String {
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    format!(
        "micro_auc {} eda@{}% {} ({} videos, {} frames, {} corrupted)",
        show(r.micro_auc),
        r.k_percent,
        show(r.eda),
        r.counts.videos,
        r.counts.frames,
        r.counts.corrupted_frames
    )
}

/// Binary PGM, one row per epoch, one column per frame, scaled by the
/// matrix maximum.
pub fn heatmap_pgm(traj: &LossTrajectory) -> Vec<u8> {
    let (e, t) = (traj.num_epochs(), traj.num_frames());
    let max = traj.losses.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{t} {e}\n255\n").into_bytes();
    out.extend(traj.losses.iter().map(|&v| {
        if max > 0.0 {
            (255.0 * v / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn cmd_heatmap(cfg: &RunConfig, args: &HeatmapArgs) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let profiles = ProfilesFile::read(&out.join(PROFILES_JSON))?;
    let chosen: Vec<&ProfileEntry> = match &args.video {
        Some(id) => vec![profiles
            .records
            .iter()
            .find(|r| &r.trajectory.video_id == id)
            .ok_or_else(|| CliError::Data(format!("unknown video id {id}")))?],
        None => profiles.records.iter().collect(),
    };
    for r in chosen {
        let path = out.join("heatmaps").join(format!("{}.pgm", safe_name(&r.trajectory.video_id)));
        write_file(&path, &heatmap_pgm(&r.trajectory))?;
        println!("{} ({} x {}) -> {}", r.trajectory.video_id, r.trajectory.num_frames(), r.trajectory.num_epochs(), path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use csl_core::csl::LossTrajectory;

    fn traj(e: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> LossTrajectory {
        let mut data = Vec::new();
        for i in 0..e {
            for j in 0..t {
                data.push(f(i, j));
            }
        }
        serde_json::from_value(serde_json::json!({
            "video_id": "v",
            "epochs": (1..=e).collect::<Vec<_>>(),
            "losses": data.chunks(t).map(|c| c.to_vec()).collect::<Vec<_>>(),
        }))
        .unwrap()
    }

    fn split_pgm(bytes: &[u8]) -> (String, &[u8]) {
        let mut newlines = 0;
        let cut = bytes
            .iter()
            .position(|&b| {
                newlines += (b == b'\n') as usize;
                newlines == 3
            })
            .unwrap();
        (String::from_utf8(bytes[..cut].to_vec()).unwrap(), &bytes[cut + 1..])
    }

    #[test]
    fn constant_trajectory_is_white() {
        let pgm = heatmap_pgm(&traj(4, 7, |_, _| 0.8));
        let (header, pixels) = split_pgm(&pgm);
        assert_eq!(header, "P5\n7 4\n255");
        assert_eq!(pixels, &[255u8; 28][..]);
    }

    #[test]
    fn zero_trajectory_is_black() {
        let pgm = heatmap_pgm(&traj(3, 5, |_, _| 0.0));
        let (_, pixels) = split_pgm(&pgm);
        assert_eq!(pixels, &[0u8; 15][..]);
    }

    #[test]
    fn pixels_scale_by_matrix_max() {
        let pgm = heatmap_pgm(&traj(2, 2, |e, t| (e * 2 + t) as f64));
        let (_, pixels) = split_pgm(&pgm);
        assert_eq!(pixels, &[0, 85, 170, 255]);
    }
}
