use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--n-subjects",
    "3",
    "--duration-s",
    "80",
    "--channels",
    "8",
    "--noise-sources",
    "4",
    "--epochs-classifier",
    "2",
    "--epochs-joint",
    "2",
    "--batch-size",
    "16",
    "--mi-batch",
    "32",
    "--mi-hidden",
    "16",
];

fn run(sub: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegenv"))
        .arg(sub)
        .args(TINY)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(
        o.status.success(),
        "stdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run("synth", out, &[]));
    assert!(out.join("data").is_dir());
    ok(&run("pretrain-classifier", out, &[]));
    assert!(out.join("classifier/manifest.json").is_file());
    ok(&run("train-codec", out, &["--lambda", "0.1"]));
    assert!(out.join("codec/manifest.json").is_file());
    assert!(out.join("checkpoints/joint-last/manifest.json").is_file());
    let text = ok(&run(
        "evaluate",
        out,
        &["--lambda", "0.1", "--model", "joint"],
    ));
    assert!(text.contains("mean test PCC"), "{text}");
    ok(&run("report", out, &[]));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(metrics.as_bytes());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["epoch", "phase", "l_corr", "l_var", "val_pcc", "probe_acc"]
    );
    let phases: Vec<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(phases, ["pretrain", "pretrain", "joint", "joint", "probe"]);

    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(report.as_bytes());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "subject_id",
            "model",
            "split",
            "mean_pcc",
            "std_pcc",
            "n_windows",
            "probe_acc"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(&r[1], "joint");
        assert_eq!(&r[2], "inner");
        let pcc: f64 = r[3].parse().unwrap();
        assert!((-1.0..=1.0).contains(&pcc));
        let probe: f64 = r[6].parse().unwrap();
        assert!((0.0..=1.0).contains(&probe));
    }
    assert!(out.join("pcc_by_subject.svg").is_file());

    // Same config resumes from the finished checkpoint without error.
    ok(&run("train-codec", out, &["--lambda", "0.1", "--resume"]));
}

#[test]
fn codec_only_requires_zero_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("train-codec", dir.path(), &["--codec-only"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
    ok(&run(
        "train-codec",
        dir.path(),
        &["--codec-only", "--lambda", "0"],
    ));
    assert!(dir.path().join("codec/manifest.json").is_file());
}

#[test]
fn mismatched_data_cache_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run("synth", dir.path(), &[]));
    let o = run("pretrain-classifier", dir.path(), &["--synth-seed", "9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny\nn_subjects = 3\nduration_s = 80\nchannels = 8\nnoise_sources = 4\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eegenv"))
        .args(["synth", "--config"])
        .arg(&cfg)
        .args(["--channels", "6", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let text = ok(&o);
    assert!(text.contains("3 subjects (6 channels"), "{text}");
    let written = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(written.lines().any(|l| l == "channels = 6"), "{written}");
}

#[test]
fn bad_values_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--lambda=-1"][..],
        &["--mode", "sideways"],
        &["--seed", "x"],
    ] {
        let o = run("synth", dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(
            String::from_utf8_lossy(&o.stderr).starts_with("error:"),
            "{args:?}"
        );
    }
    // Usage errors come from the argument parser.
    let o = run("synth", dir.path(), &["--no-such", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run("evaluate", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_and_mi_bench_pass() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&run("gradcheck", dir.path(), &[]));
    assert!(text.contains("codec") && text.contains("classifier"));
    assert!(!text.contains("FAIL"));
    let text = ok(&run("mi-bench", dir.path(), &[]));
    assert!(text.contains("closed form 0.8304"), "{text}");
}
