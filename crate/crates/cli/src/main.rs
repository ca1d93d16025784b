//! `lmleak` — membership-leakage auditing for small clinical-style language
//! models: synthetic corpora, (DP-)SGD training, membership-inference
//! attacks, RDP accounting, and reporting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use lmleak_cli::{
    compute_account, format_corpus_summary, parse_attack_names, parse_comma_list, run_bench,
    run_dir, stages, AttackOpts, CliError, ExperimentConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "lmleak",
    version,
    about = "Audit membership leakage of small clinical-style language models"
)]
struct Cli {
    /// Experiment config (TOML); defaults to the built-in benchmark config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every derived random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output root directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Reduced benchmark grid (one repetition, no trend assertions).
    #[arg(long, global = true)]
    quick: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) a corpus and its patient-disjoint split.
    GenCorpus,
    /// Train the full (model variant × {non-DP, σ sweep}) grid.
    Train {
        /// Corpus directory (default: <out>/corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Run membership-inference attacks against a run's checkpoints.
    Attack {
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Comma-separated attack names (default: the config's list).
        #[arg(long)]
        attacks: Option<String>,
        /// Comma-separated attack split seeds (default: the config's list).
        #[arg(long)]
        attack_seeds: Option<String>,
    },
    /// Convert (q, sigma, steps, delta) into an (epsilon, delta) budget.
    Account {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        /// Also report the group-DP budget for groups of this size.
        #[arg(long)]
        group_k: Option<u64>,
    },
    /// Assemble report.csv / rarity.csv / budget.json from a finished run.
    Report {
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Self-contained seeded benchmark with PASS/FAIL trend summary.
    Bench,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus => {
            let dir = cli.out.join("corpus");
            let summary = stages::stage_gen_corpus(&cfg, cli.seed, &dir)?;
            println!("corpus written to {}", dir.display());
            println!("{}", format_corpus_summary(&summary));
        }
        Command::Train { corpus, run_id } => {
            let corpus_dir = corpus.unwrap_or_else(|| cli.out.join("corpus"));
            let dir = run_dir(&cli.out, &run_id);
            let grid = stages::stage_train(&cfg, &corpus_dir, &dir, &run_id, cli.seed)?;
            println!("trained {} cells under {}", grid.cells.len(), dir.display());
            for c in &grid.cells {
                let status = match &c.diverged {
                    Some(msg) => format!("DIVERGED ({msg})"),
                    None => "ok".to_string(),
                };
                println!(
                    "  {}: {} epoch(s), {} train samples, {status}",
                    c.cell_id, c.epochs_completed, c.n_train_samples
                );
            }
        }
        Command::Attack {
            run_id,
            attacks,
            attack_seeds,
        } => {
            let adversaries = match &attacks {
                Some(raw) => {
                    let names: Vec<String> = raw
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                    parse_attack_names(&names)?
                }
                None => cfg.adversaries()?,
            };
            let seeds = match &attack_seeds {
                Some(raw) => parse_comma_list::<u64>(raw, "attack seed")?,
                None => cfg.attack.seeds.clone(),
            };
            let dir = run_dir(&cli.out, &run_id);
            let index =
                stages::stage_attack(&cfg, &dir, &adversaries, &seeds, AttackOpts::default())?;
            println!(
                "wrote {} attack outcome(s) under {}",
                index.entries.len(),
                dir.join("attacks").display()
            );
        }
        Command::Account {
            q,
            sigma,
            steps,
            delta,
            group_k,
        } => {
            let out = compute_account(q, sigma, steps, delta, group_k)?;
            let text =
                serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{text}");
        }
        Command::Report { run_id } => {
            let dir = run_dir(&cli.out, &run_id);
            let report_dir = cli.out.join("report");
            let bundle = stages::stage_report(&cfg, &dir, &report_dir)?;
            println!(
                "report written to {} ({} leakage rows, {} budget rows, {} rarity analyses)",
                report_dir.display(),
                bundle.report.rows.len(),
                bundle.report.budgets.len(),
                bundle.rarity.len()
            );
        }
        Command::Bench => {
            run_bench(&cfg, &cli.out, cli.seed, cli.quick)?;
        }
    }
    Ok(())
}
