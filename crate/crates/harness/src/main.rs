//! `tfnas`: training-free scoring of RNN and BERT-style architectures.
//!
//! Exit codes: 0 success, 1 usage, 2 input error, 3 partial failure (some
//! cells flagged).

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use tfnas_core::genome::{
    count_search_space, sample_rnn, sample_transformer, serialize, BenchmarkRecord, BuildDims,
    Genome,
};
use tfnas_harness::config::load_config;
use tfnas_harness::{fnv64, runner, Result};

#[derive(Parser)]
#[command(
    name = "tfnas",
    version,
    about = "Training-free NAS metrics for RNN and BERT-style architectures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Rnn,
    Transformer,
}

#[derive(Subcommand)]
enum Command {
    /// Print the exact number of architectures in the transformer grid.
    CountSpace,
    /// Sample genomes, one serialized genome per line.
    Sample {
        #[arg(long, value_enum)]
        space: Space,
        /// How many genomes to draw.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Node budget for RNN cells.
        #[arg(long, default_value_t = 10)]
        max_nodes: usize,
        /// Emit benchmark records with synthetic trained scores instead of
        /// bare genomes (clearly labeled synthetic=true).
        #[arg(long)]
        benchmark_synthetic: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score architectures: every (genome, metric, seed, minibatch) cell.
    Score {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank scored metrics against trained performance.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-architecture spread over the seed and minibatch grids.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::CountSpace => {
            println!("{}", count_search_space());
            Ok(0)
        }
        Command::Sample { space, n, seed, max_nodes, benchmark_synthetic, out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lines = Vec::with_capacity(n);
            for _ in 0..n {
                let genome = match space {
                    Space::Rnn => Genome::Rnn(sample_rnn(&mut rng, max_nodes)?),
                    Space::Transformer => Genome::Transformer(sample_transformer(&mut rng)),
                };
                if benchmark_synthetic {
                    let record = BenchmarkRecord {
                        trained_score: synthetic_score(&genome)?,
                        genome,
                        metadata: vec![("synthetic".into(), "true".into())],
                    };
                    lines.push(record.to_line());
                } else {
                    lines.push(serialize(&genome));
                }
            }
            let text = lines.join("\n") + "\n";
            match out {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| tfnas_harness::HarnessError::io(path, e))?,
                None => {
                    std::io::stdout()
                        .write_all(text.as_bytes())
                        .map_err(|e| tfnas_harness::HarnessError::io("stdout", e))?;
                }
            }
            Ok(0)
        }
        Command::Score { config } => {
            let cfg = load_config(&config)?;
            let summary = runner::score_architectures(&cfg)?;
            println!(
                "scored {} cells ({} computed, {} reused, {} flagged) -> {}",
                summary.total_cells,
                summary.computed,
                summary.reused,
                summary.flagged,
                summary.scores_path.display()
            );
            Ok(if summary.flagged > 0 { 3 } else { 0 })
        }
        Command::Evaluate { config } => {
            let cfg = load_config(&config)?;
            let report = runner::evaluate(&cfg)?;
            for r in &report.reports {
                let fmt = |v: Option<f64>| match v {
                    Some(v) => format!("{v:.4}"),
                    None => "undefined".to_string(),
                };
                println!(
                    "{} normalized={} tau={} rho={} evaluated={} discarded={}",
                    r.metric,
                    r.normalized,
                    fmt(r.kendall_tau),
                    fmt(r.spearman_rho),
                    r.n_evaluated,
                    r.n_discarded
                );
            }
            println!("report -> {}", cfg.output.join("report.json").display());
            Ok(0)
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let summary = runner::ablate(&cfg)?;
            println!(
                "ablation over {} rows ({} flagged cells) -> {}",
                summary.rows.len(),
                summary.flagged,
                summary.path.display()
            );
            Ok(if summary.flagged > 0 { 3 } else { 0 })
        }
    }
}

/// Synthetic trained scores for fixture tables. Transformer scores mimic a
/// GLUE-like average that grows with model size; RNN scores mimic a test
/// loss with no parameter correlation. Both are deterministic functions of
/// the genome text.
fn synthetic_score(genome: &Genome) -> Result<f64> {
    let text = serialize(genome);
    let mut rng = ChaCha8Rng::seed_from_u64(fnv64(text.as_bytes()));
    Ok(match genome {
        Genome::Rnn(_) => 4.2 + rng.gen_range(-0.8..0.8),
        Genome::Transformer(g) => {
            let dims = BuildDims {
                vocab: 2000,
                embed_dim: g.hidden_dim,
                hidden_dim: g.hidden_dim,
                max_positions: 64,
            };
            let params = genome.param_count(&dims)? as f64;
            62.0 + 6.0 * (params.ln() - 14.0) + rng.gen_range(-1.5..1.5)
        }
    })
}
