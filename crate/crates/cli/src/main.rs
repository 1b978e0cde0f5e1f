//! `eegenv` command-line driver.
//!
//! Every run-config key is accepted as `--key-name VALUE`; `--config PATH`
//! loads a `key = value` file first and flags override it. Artifacts live
//! under `--out` (default `out/`).

mod commands;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use eegenv::train::config::KEYS;
use eegenv::train::RunConfig;

/// Raised when a run completes but one of its invariant checks fails.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub type CliResult = Result<(), Box<dyn std::error::Error>>;

fn flag_name(key: &str) -> String {
    match key {
        "out_dir" => "out".to_string(),
        _ => key.replace('_', "-"),
    }
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value config file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(*help),
        )
    })
}

fn cli() -> Command {
    let sub =
        |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("eegenv")
        .about("EEG speech-envelope reconstruction with a subject-identity penalty")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub(
            "synth",
            "generate the synthetic recordings into <out>/data",
        ))
        .subcommand(sub(
            "pretrain-classifier",
            "train the subject classifier into <out>/classifier",
        ))
        .subcommand(
            sub(
                "train-codec",
                "train the codec against the frozen classifier into <out>/codec",
            )
            .arg(
                Arg::new("codec-only")
                    .long("codec-only")
                    .action(ArgAction::SetTrue)
                    .help("train without classifier or estimator (lambda must be 0)"),
            )
            .arg(
                Arg::new("resume")
                    .long("resume")
                    .action(ArgAction::SetTrue)
                    .help("continue from <out>/checkpoints/joint-last"),
            ),
        )
        .subcommand(
            sub(
                "evaluate",
                "score <out>/codec on the test split into <out>/reports",
            )
            .arg(
                Arg::new("model")
                    .long("model")
                    .value_name("NAME")
                    .help("model identifier in the report (default from the checkpoint)"),
            ),
        )
        .subcommand(sub(
            "report",
            "write report.csv and pcc_by_subject.svg from <out>/reports",
        ))
        .subcommand(sub(
            "gradcheck",
            "finite-difference checks of every op and network",
        ))
        .subcommand(
            sub(
                "mi-bench",
                "estimator calibration on synthetic Gaussian pairs",
            )
            .arg(
                Arg::new("n")
                    .long("n")
                    .value_name("N")
                    .value_parser(clap::value_parser!(usize))
                    .default_value("10000")
                    .help("sample pairs"),
            ),
        )
}

fn run_config(m: &ArgMatches) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            let mut c = RunConfig::default();
            c.apply_text(&text)?;
            c
        }
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand required");
    let result = run_config(m).and_then(|cfg| match name {
        "synth" => commands::synth(&cfg),
        "pretrain-classifier" => commands::pretrain(&cfg),
        "train-codec" => {
            commands::train_codec(&cfg, m.get_flag("codec-only"), m.get_flag("resume"))
        }
        "evaluate" => commands::evaluate(&cfg, m.get_one::<String>("model").cloned()),
        "report" => commands::report(&cfg),
        "gradcheck" => commands::gradcheck(&cfg),
        "mi-bench" => commands::mi_bench(&cfg, *m.get_one::<usize>("n").expect("default")),
        _ => unreachable!("clap rejects unknown subcommands"),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.is::<CheckFailed>() {
                eprintln!("check failed: {e}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_has_a_flag() {
        cli().debug_assert();
        let m = cli()
            .try_get_matches_from([
                "eegenv", "synth", "--seed", "7", "--lambda", "0.5", "--mode", "cross", "--out",
                "x",
            ])
            .unwrap();
        let cfg = run_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.out_dir, std::path::PathBuf::from("x"));
    }
}
