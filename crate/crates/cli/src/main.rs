use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use survagent::backend::BackendKind;
use survagent::config::CohortConfig;
use survagent::experiment::{Experiment, FoldSel, Overrides, VERSION};
use survagent::synth::{generate, SynthSpec};

mod plot;

#[derive(Parser, Debug)]
#[command(name = "survagent", version, about = "Multimodal survival prediction agent")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[backend] kind` from the config.
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Bound on cases processed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the WSI and gene case banks from a fold's training cases.
    BuildBank {
        #[command(flatten)]
        run: RunArgs,
        /// 1-based cross-validation fold; without it the bank covers the whole cohort table.
        #[arg(long)]
        fold: Option<usize>,
        /// Restrict to one cohort of the config.
        #[arg(long)]
        cohort: Option<String>,
    },
    /// Predict the fold's test cases (or the holdout table) against its bank.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        cohort: Option<String>,
        /// Expert predictions CSV replacing the cohort's configured one.
        #[arg(long)]
        experts: Option<PathBuf>,
    },
    /// Cross-validate every cohort and write the C-index table, KM curves and log-rank tests.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a KM CSV as an SVG step plot.
    Plot {
        #[arg(long)]
        km_csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic cohort for the oracle mock backend.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 5)]
        holdout: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        cohort: String,
    },
}

fn open(run: &RunArgs, experts: Option<PathBuf>) -> Result<Experiment> {
    let overrides = Overrides {
        backend: run.backend.map(|b| match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Http => BackendKind::Http,
        }),
        jobs: run.jobs,
        experts,
    };
    Experiment::open(&run.config, &overrides).with_context(|| format!("loading {}", run.config.display()))
}

fn selected<'a>(exp: &'a Experiment, name: Option<&str>) -> Result<Vec<&'a CohortConfig>> {
    Ok(match name {
        Some(n) => vec![exp.cfg.cohort(Some(n))?],
        None => exp.cfg.cohorts.iter().collect(),
    })
}

fn fold_sel(fold: Option<usize>) -> FoldSel {
    fold.map_or(FoldSel::Full, FoldSel::Fold)
}

fn write_side_manifest(path: &Path, value: serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildBank { run, fold, cohort } => {
            let exp = open(&run, None)?;
            for c in selected(&exp, cohort.as_deref())? {
                let s = exp.build_bank(c, fold_sel(fold))?;
                println!(
                    "{}: {} WSI + {} gene entries in {} ({} accepted at the refinement cap)",
                    c.name,
                    s.wsi_entries,
                    s.gene_entries,
                    s.dir.display(),
                    s.force_accepted
                );
            }
        }
        Command::Infer {
            run,
            fold,
            cohort,
            experts,
        } => {
            let exp = open(&run, experts)?;
            for c in selected(&exp, cohort.as_deref())? {
                for r in exp.infer(c, fold_sel(fold))? {
                    println!(
                        "{}\t{}\t{:.2} months\tretrieved {}",
                        r.case_id,
                        r.final_interval,
                        r.predicted_months,
                        r.retrieved_case_ids.join(",")
                    );
                }
            }
        }
        Command::Evaluate { run } => {
            let exp = open(&run, None)?;
            print!("{}", exp.evaluate()?);
        }
        Command::Plot { km_csv, out } => {
            let text = std::fs::read_to_string(&km_csv).with_context(|| format!("reading {}", km_csv.display()))?;
            let svg = plot::render(&text)?;
            std::fs::write(&out, &svg).with_context(|| format!("writing {}", out.display()))?;
            write_side_manifest(
                &out.with_extension("manifest.json"),
                serde_json::json!({
                    "command": "plot",
                    "input": km_csv.display().to_string(),
                    "input_sha256": survagent::sidecar::sha256_hex(text.as_bytes()),
                    "versions": {"survagent": VERSION},
                }),
            )?;
        }
        Command::Synth {
            out,
            cases,
            holdout,
            seed,
            cohort,
        } => {
            let spec = SynthSpec {
                cohort,
                n_cases: cases,
                n_holdout: holdout,
                seed,
                ..SynthSpec::default()
            };
            let c = generate(&out, &spec)?;
            write_side_manifest(
                &out.join("manifest.json"),
                serde_json::json!({
                    "command": "synth",
                    "seed": seed,
                    "cases": cases,
                    "holdout": holdout,
                    "versions": {"survagent": VERSION},
                }),
            )?;
            println!("{}", c.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
