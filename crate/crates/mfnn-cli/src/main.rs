//! `mfnn`: runs one study from a JSON config and prints its verdicts.
//!
//! Exit code 0 means every verdict passed, 1 means the study ran but at
//! least one verdict failed, and 2 means the run could not be completed
//! (unreadable config, invalid arguments, or a numerical failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfnn::config_io::ExperimentConfig;
use mfnn::experiments::{
    study_audit, study_converge, study_degeneracy, study_eps1, study_gram, study_refine, Family,
    StudyError, StudyReport,
};

#[derive(Parser)]
#[command(name = "mfnn", version, about = "Width-scaling studies for discrete network training")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory that receives {study}.json and {study}_points.csv.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[command(subcommand)]
    study: StudyCmd,
}

#[derive(Subcommand)]
enum StudyCmd {
    /// Width sweep of feature collapse under fixed-variance initialization,
    /// contrasted with the regression initialization.
    Degeneracy,
    /// Empirical versus analytic kernel deviation across widths.
    Gram,
    /// Deviation between trained-family nets and their ideal doubles.
    Eps1 {
        /// Network family to audit.
        #[arg(long, value_parser = ["dnn", "resnet"])]
        family: String,
    },
    /// Step-size ladder and width ladder against finer references.
    Refine,
    /// Residual-net training to the configured horizon.
    Converge,
    /// Regularity audit of the activation and loss catalog.
    Audit,
}

fn run(cli: Cli) -> Result<StudyReport, StudyError> {
    let config = cli
        .config
        .ok_or_else(|| StudyError::Invalid("--config is required".into()))?;
    let mut cfg = ExperimentConfig::from_json_file(&config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let report = match &cli.study {
        StudyCmd::Degeneracy => study_degeneracy(&cfg)?,
        StudyCmd::Gram => study_gram(&cfg)?,
        StudyCmd::Eps1 { family } => study_eps1(&cfg, family.parse::<Family>()?)?,
        StudyCmd::Refine => study_refine(&cfg)?,
        StudyCmd::Converge => study_converge(&cfg)?,
        StudyCmd::Audit => study_audit(&cfg)?,
    };
    if let Some(dir) = &cli.out {
        report.write_files(dir)?;
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            println!(
                "study {}: {} points, {} ms",
                report.study,
                report.points.len(),
                report.wall_ms
            );
            if let (Some(slope), Some(intercept)) = (report.slope, report.intercept) {
                println!("fit: slope {slope:.6}, intercept {intercept:.6}");
            }
            for v in &report.verdicts {
                let tag = if v.pass { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", v.name, v.detail);
            }
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
