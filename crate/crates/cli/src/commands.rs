use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use eegenv::checks::{
    bound_input_gradcheck, mi_bench as run_mi_bench, network_gradchecks, op_gradchecks,
};
use eegenv::classifier::{ClassifierConfig, CtaMtdnn};
use eegenv::codec::{CodecConfig, MlaCodec};
use eegenv::eval::{
    self, probe_reconstructions, report_emit, subject_probe, MetricsReport, ProbeConfig,
};
use eegenv::signal::cache::{load_recordings, save_recordings};
use eegenv::signal::{synth_generate, Pair, WindowedDataset};
use eegenv::train::{
    classifier_scores, preprocess, pretrain_classifier, reconstruct_all, save_params, split_pairs,
    train_joint, Archive, Datasets, JointOptions, MetricsLog, MetricsRow, RunConfig, JOINT_LAST,
};
use serde::{Deserialize, Serialize};

use crate::{CheckFailed, CliResult};

const GRAD_TOL: f64 = 1e-4;

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_config(cfg: &RunConfig) -> CliResult {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(out(cfg, "config.txt"), cfg.to_text())?;
    Ok(())
}

/// Cached recordings when `<out>/data` exists, otherwise a fresh draw.
fn raw_pairs(cfg: &RunConfig) -> Result<Vec<Pair>, Box<dyn std::error::Error>> {
    let dir = out(cfg, "data");
    if !dir.exists() {
        return Ok(synth_generate(&cfg.synth)?);
    }
    let (pairs, provenance) = load_recordings(&dir)?;
    if provenance != cfg.data_provenance() {
        return Err(format!(
            "{} was generated with a different configuration; rerun `synth` or pick another --out",
            dir.display()
        )
        .into());
    }
    Ok(pairs)
}

fn datasets(cfg: &RunConfig) -> Result<Datasets, Box<dyn std::error::Error>> {
    Ok(split_pairs(&preprocess(raw_pairs(cfg)?, cfg)?, cfg)?)
}

/// Keys that fix which windows land in which split.
fn split_provenance(cfg: &RunConfig) -> Vec<String> {
    let mut lines = cfg.data_provenance();
    for k in [
        "highpass_hz",
        "highpass_order",
        "window_s",
        "hop_s",
        "mode",
        "train_ratio",
        "val_ratio",
        "test_ratio",
    ] {
        lines.push(format!("{k} = {}", cfg.get(k).expect("known key")));
    }
    lines
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config_hash: String,
    split: Vec<String>,
    config: ClassifierConfig,
    best_epoch: usize,
    best_val_acc: f64,
    held_out_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    config_hash: String,
    split: Vec<String>,
    config: CodecConfig,
    lambda: f64,
    best_epoch: usize,
    best_val_pcc: f64,
    train_subjects: BTreeSet<usize>,
}

pub fn synth(cfg: &RunConfig) -> CliResult {
    write_config(cfg)?;
    let pairs = synth_generate(&cfg.synth)?;
    let dir = out(cfg, "data");
    save_recordings(&dir, &pairs, &cfg.data_provenance())?;
    let (back, _) = load_recordings(&dir)?;
    if back != pairs {
        return Err(
            CheckFailed(format!("{} does not read back identically", dir.display())).into(),
        );
    }
    let subjects: BTreeSet<usize> = pairs.iter().map(|(e, _)| e.subject_id).collect();
    println!(
        "wrote {} recordings from {} subjects ({} channels, {} s at {} Hz) to {}",
        pairs.len(),
        subjects.len(),
        cfg.synth.channels,
        cfg.synth.duration_s,
        cfg.synth.sample_rate_hz,
        dir.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> CliResult {
    write_config(cfg)?;
    let (train, val, test) = datasets(cfg)?;
    let mut log = MetricsLog::to_file(&out(cfg, "metrics.csv"))?;
    let outcome = pretrain_classifier(&train, &val, cfg, &mut log)?;
    // Cross mode holds whole subjects out; their labels are unseen classes.
    let held_out = if test.subjects().is_subset(&train.subjects()) {
        &test
    } else {
        &val
    };
    let (acc, _) = classifier_scores(&outcome.model, held_out)?;
    let meta = ClassifierMeta {
        config_hash: cfg.hash(),
        split: split_provenance(cfg),
        config: outcome.model.config().clone(),
        best_epoch: outcome.best_epoch,
        best_val_acc: outcome.best_val_acc,
        held_out_acc: acc,
    };
    save_params(
        &out(cfg, "classifier"),
        "classifier",
        outcome.model.params(),
        serde_json::to_value(&meta)?,
    )?;
    println!(
        "classifier: best validation accuracy {:.4} at epoch {}, held-out ({}) accuracy {acc:.4}",
        outcome.best_val_acc,
        outcome.best_epoch,
        held_out.split.name()
    );
    if !(0.0..=1.0).contains(&acc) || !outcome.model.params().all_finite() {
        return Err(
            CheckFailed("classifier produced invalid accuracy or parameters".into()).into(),
        );
    }
    Ok(())
}

fn load_classifier(cfg: &RunConfig) -> Result<CtaMtdnn<f64>, Box<dyn std::error::Error>> {
    let dir = out(cfg, "classifier");
    let archive = Archive::load(&dir)?;
    let meta: ClassifierMeta = serde_json::from_value(archive.meta.clone())?;
    if meta.split != split_provenance(cfg) {
        return Err(format!("{} was trained on a different data split", dir.display()).into());
    }
    let mut model = CtaMtdnn::<f64>::new(meta.config, cfg.seed)?;
    archive.restore("", model.params_mut())?;
    Ok(model)
}

pub fn train_codec(cfg: &RunConfig, codec_only: bool, resume: bool) -> CliResult {
    if codec_only && cfg.lambda != 0.0 {
        return Err("--codec-only trains without the MI penalty; set --lambda 0".into());
    }
    write_config(cfg)?;
    let (train, val, _) = datasets(cfg)?;
    let classifier = if codec_only {
        None
    } else {
        Some(load_classifier(cfg)?)
    };
    let before = classifier.as_ref().map(|c| c.params().checksum());
    let mut log = MetricsLog::to_file(&out(cfg, "metrics.csv"))?;
    let ckpt = out(cfg, "checkpoints");
    let resume_dir = ckpt.join(JOINT_LAST);
    let opts = JointOptions {
        checkpoint_dir: Some(&ckpt),
        resume_from: resume.then_some(resume_dir.as_path()),
        halt_after: None,
    };
    let outcome = train_joint(&train, &val, classifier.as_ref(), cfg, &mut log, &opts)?;
    let after = classifier.as_ref().map(|c| c.params().checksum());

    let meta = CodecMeta {
        config_hash: cfg.hash(),
        split: split_provenance(cfg),
        config: outcome.codec.config().clone(),
        lambda: cfg.lambda,
        best_epoch: outcome.counters.best_epoch,
        best_val_pcc: outcome.counters.best_val_pcc,
        train_subjects: train.subjects(),
    };
    save_params(
        &out(cfg, "codec"),
        "codec",
        outcome.codec.params(),
        serde_json::to_value(&meta)?,
    )?;
    if let Some(est) = &outcome.estimator {
        save_params(
            &out(cfg, "estimator"),
            "estimator",
            est.params(),
            serde_json::json!({ "config_hash": cfg.hash() }),
        )?;
    }
    println!(
        "codec: best validation PCC {:.4} at epoch {} ({} codec steps, {} estimator steps)",
        outcome.counters.best_val_pcc,
        outcome.counters.best_epoch,
        outcome.counters.codec_steps,
        outcome.counters.estimator_steps
    );
    if before != after {
        return Err(
            CheckFailed("classifier parameters changed during the joint phase".into()).into(),
        );
    }
    if let Some(_) = classifier {
        let expected = outcome.counters.codec_steps.div_ceil(cfg.k as u64) * cfg.m as u64;
        if outcome.counters.estimator_steps.abs_diff(expected) > cfg.m as u64 {
            return Err(CheckFailed(format!(
                "{} estimator steps after {} codec steps, expected {expected}",
                outcome.counters.estimator_steps, outcome.counters.codec_steps
            ))
            .into());
        }
    }
    Ok(())
}

fn probe(
    codec: &MlaCodec<f64>,
    ds: &WindowedDataset,
) -> Result<Option<f64>, Box<dyn std::error::Error>> {
    let rec = reconstruct_all(codec, ds)?;
    let feats = probe_reconstructions(rec.data(), ds.window_len, ds.sample_rate_hz);
    match subject_probe(&feats, &ds.labels(), &ProbeConfig::default()) {
        Ok(acc) => Ok(Some(acc)),
        Err(eegenv::Error::InsufficientData(msg)) => {
            eprintln!("probe skipped: {msg}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn evaluate(cfg: &RunConfig, model: Option<String>) -> CliResult {
    let (train, _, test) = datasets(cfg)?;
    let dir = out(cfg, "codec");
    let archive = Archive::load(&dir)?;
    let meta: CodecMeta = serde_json::from_value(archive.meta.clone())?;
    if meta.split != split_provenance(cfg) {
        return Err(format!("{} was trained on a different data split", dir.display()).into());
    }
    let mut codec = MlaCodec::<f64>::new(meta.config.clone(), cfg.seed)?;
    archive.restore("", codec.params_mut())?;

    let name = model.unwrap_or_else(|| format!("mla-codec-lambda{}", meta.lambda));
    let mut report = eval::evaluate(
        &codec,
        &test,
        cfg.mode,
        &meta.train_subjects,
        &name,
        &meta.config_hash,
    )?;
    report.probe_acc = probe(&codec, &train)?;
    report.validate()?;

    let reports = out(cfg, "reports");
    std::fs::create_dir_all(&reports)?;
    let path = reports.join(format!("{name}-{}.json", cfg.mode.name()));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    let mut log = MetricsLog::to_file(&out(cfg, "metrics.csv"))?;
    log.push(MetricsRow {
        epoch: meta.best_epoch,
        phase: "probe".into(),
        l_corr: None,
        l_var: None,
        val_pcc: None,
        probe_acc: report.probe_acc,
    })?;
    println!(
        "{name} ({}): mean test PCC {:.4} over {} subjects, probe accuracy {}, {} degenerate windows -> {}",
        cfg.mode.name(),
        report.mean_pcc(),
        report.subjects.len(),
        report.probe_acc.map(|p| format!("{p:.4}")).unwrap_or_else(|| "n/a".into()),
        report.degenerate_windows,
        path.display()
    );
    Ok(())
}

fn read_reports(dir: &Path) -> Result<Vec<MetricsReport>, Box<dyn std::error::Error>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            let r: MetricsReport = serde_json::from_str(&text)?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

pub fn report(cfg: &RunConfig) -> CliResult {
    let reports = read_reports(&out(cfg, "reports"))?;
    report_emit(&reports, &cfg.out_dir)?;
    println!(
        "{} reports -> {} and {}",
        reports.len(),
        out(cfg, eval::report::CSV_NAME).display(),
        out(cfg, eval::report::SVG_NAME).display()
    );
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> CliResult {
    let mut checks = op_gradchecks(cfg.seed)?;
    checks.extend(network_gradchecks(20, cfg.seed)?);
    checks.push((
        "bound-wrt-envelope".into(),
        bound_input_gradcheck(cfg.seed)?,
    ));
    let mut failed = Vec::new();
    for (name, c) in &checks {
        let ok = c.max_relative_error < GRAD_TOL;
        println!(
            "{:<24} max rel err {:.3e}  probes {:>3}  kink-excluded {}  {}",
            name,
            c.max_relative_error,
            c.probes,
            c.excluded,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient mismatch in {}", failed.join(", "))).into())
    }
}

pub fn mi_bench(cfg: &RunConfig, n: usize) -> CliResult {
    let b = run_mi_bench(n, 0.9, cfg.mi_variance, cfg.seed)?;
    println!("independent pairs: {:.4} nats", b.independent);
    println!(
        "rho = {}: {:.4} nats (closed form {:.4})",
        b.rho, b.correlated, b.closed_form
    );
    if b.independent.abs() < 0.05 && (0.6..=1.1).contains(&b.correlated) {
        Ok(())
    } else {
        Err(CheckFailed("estimator outside its calibration band".into()).into())
    }
}
