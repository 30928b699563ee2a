//! Sweep execution: batch scoring over (genome, metric, seed, minibatch)
//! cells with per-cell isolation and a resumable journal, correlation
//! evaluation against benchmark tables, and decile ablation runs.

use crate::config::{RunConfig, SearchSpace};
use crate::corpus::{self, BatchMode, Corpus};
use crate::journal::{
    read_scores_table, write_scores_table, CellKey, CellResult, CellStatus, Journal, MetricKey,
};
use crate::report::{
    pairs_file_name, spread_stats, write_ablation, write_pairs, write_report, AblationRow,
    EvaluationReport, MetricReport,
};
use crate::{fnv64, HarnessError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use tfnas_core::genome::{parse_benchmark_line, deserialize, BenchmarkRecord, Genome};
use tfnas_core::metrics::{
    evaluate_many, DegenerateReason, MetricId, MetricOpts, MetricScore, Network, ScoreValue,
};
use tfnas_core::netbuild::{build_rnn, build_transformer, Minibatch, RnnNetwork, TransformerNetwork};

/// An owned network of either family.
pub enum BuiltNetwork {
    Rnn(RnnNetwork),
    Transformer(TransformerNetwork),
}

impl BuiltNetwork {
    pub fn as_net(&self) -> Network<'_> {
        match self {
            BuiltNetwork::Rnn(n) => Network::Rnn(n),
            BuiltNetwork::Transformer(n) => Network::Transformer(n),
        }
    }
}

/// Instantiate a genome under the run configuration. Deterministic in
/// `seed`.
pub fn build_network(
    genome: &Genome,
    config: &RunConfig,
    vocab: usize,
    seed: u64,
) -> tfnas_core::Result<BuiltNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match genome {
        Genome::Rnn(g) => Ok(BuiltNetwork::Rnn(build_rnn(
            g,
            vocab,
            config.embed_dim,
            config.hidden_dim,
            &mut rng,
        )?)),
        Genome::Transformer(g) => {
            Ok(BuiltNetwork::Transformer(build_transformer(g, vocab, config.seq_len, &mut rng)?))
        }
    }
}

fn batch_mode(space: SearchSpace) -> BatchMode {
    match space {
        SearchSpace::Rnn => BatchMode::NextToken,
        SearchSpace::Transformer => BatchMode::Masked,
    }
}

/// Load a benchmark table with line-accurate errors and its fingerprint.
pub fn load_benchmark(path: &Path) -> Result<(Vec<BenchmarkRecord>, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let hash = fnv64(text.as_bytes());
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let record = parse_benchmark_line(line)
            .map_err(|e| HarnessError::file_parse(path, lineno + 1, e.to_string()))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(HarnessError::file_parse(path, 0, "no benchmark records"));
    }
    Ok((records, hash))
}

/// Load a plain genome list (one serialized genome per line).
pub fn load_genome_lines(path: &Path) -> Result<(Vec<Genome>, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let hash = fnv64(text.as_bytes());
    let mut genomes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let genome = deserialize(line)
            .map_err(|e| HarnessError::file_parse(path, lineno + 1, e.to_string()))?;
        genomes.push(genome);
    }
    if genomes.is_empty() {
        return Err(HarnessError::file_parse(path, 0, "no genomes"));
    }
    Ok((genomes, hash))
}

fn check_space(genomes: &[Genome], space: SearchSpace) -> Result<()> {
    for (i, g) in genomes.iter().enumerate() {
        let ok = matches!(
            (g, space),
            (Genome::Rnn(_), SearchSpace::Rnn) | (Genome::Transformer(_), SearchSpace::Transformer)
        );
        if !ok {
            return Err(HarnessError::Config(format!(
                "genome {i} is a {} genome but search_space={}",
                g.kind(),
                space.as_str()
            )));
        }
    }
    Ok(())
}

/// The genomes a run scores, either from the benchmark table or a plain
/// genome list, plus the source fingerprint.
pub fn load_genome_source(config: &RunConfig) -> Result<(Vec<Genome>, u64)> {
    let path = config.genome_source()?;
    let (genomes, hash) = if Some(path) == config.benchmark.as_ref() {
        let (records, hash) = load_benchmark(path)?;
        (records.into_iter().map(|r| r.genome).collect(), hash)
    } else {
        load_genome_lines(path)?
    };
    check_space(&genomes, config.search_space)?;
    Ok((genomes, hash))
}

fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(job))
}

pub struct ScoreSummary {
    pub total_cells: usize,
    pub computed: usize,
    pub reused: usize,
    pub flagged: usize,
    pub scores_path: PathBuf,
}

/// One (genome, seed) work unit: all the cells that share a network build.
struct Group {
    genome_idx: usize,
    seed: u64,
    /// (minibatch id, normalized) -> metrics still missing.
    wanted: Vec<(u32, bool, Vec<MetricId>)>,
}

/// Score every configured (genome, metric, seed, minibatch, normalization)
/// cell, resuming from the journal. Cell failures are recorded and never
/// abort the sweep.
pub fn score_architectures(config: &RunConfig) -> Result<ScoreSummary> {
    let corpus = corpus::load_corpus(&config.corpus, &config.vocab, config.vocab_size)?;
    eprintln!(
        "corpus: {} tokens, vocab {} (oov rate {:.4})",
        corpus.len(),
        corpus.vocab_size(),
        corpus.oov_rate()
    );
    let (genomes, table_hash) = load_genome_source(config)?;
    std::fs::create_dir_all(&config.output).map_err(|e| HarnessError::io(&config.output, e))?;
    let journal_path = config.output.join("journal.tsv");
    let scores_path = config.output.join("scores.tsv");
    let (journal, existing) = Journal::open(&journal_path, table_hash)?;
    let existing_keys: HashSet<CellKey> = existing.iter().map(|r| r.key).collect();

    let mode = batch_mode(config.search_space);
    let batches: Vec<(u32, Minibatch)> = config
        .minibatches
        .iter()
        .map(|&id| {
            Ok((id, corpus::minibatch_for(&corpus, id, config.batch_size, config.seq_len, mode)?))
        })
        .collect::<Result<_>>()?;

    // Group missing cells by (genome, seed) so each network is built once.
    let mut groups = Vec::new();
    let mut total_cells = 0usize;
    for genome_idx in 0..genomes.len() {
        for &seed in &config.seeds {
            let mut wanted = Vec::new();
            for &(mb, _) in &batches {
                for &normalized in config.normalization.settings() {
                    let missing: Vec<MetricId> = config
                        .metrics
                        .iter()
                        .copied()
                        .filter(|&m| {
                            !existing_keys.contains(&CellKey {
                                genome_idx,
                                metric: MetricKey(m),
                                seed,
                                minibatch: mb,
                                normalized,
                            })
                        })
                        .collect();
                    total_cells += config.metrics.len();
                    if !missing.is_empty() {
                        wanted.push((mb, normalized, missing));
                    }
                }
            }
            if !wanted.is_empty() {
                groups.push(Group { genome_idx, seed, wanted });
            }
        }
    }

    let done = AtomicUsize::new(0);
    let group_count = groups.len();
    let (tx, rx) = mpsc::channel::<CellResult>();
    let writer = std::thread::spawn(move || -> Result<(Journal, Vec<CellResult>)> {
        let mut journal = journal;
        let mut rows = Vec::new();
        for cell in rx {
            journal.append(&cell)?;
            rows.push(cell);
        }
        Ok((journal, rows))
    });

    run_pool(config.workers, || {
        groups.par_iter().for_each_with(tx, |tx, group| {
            let rows = score_group(config, &genomes[group.genome_idx], &batches, group, &corpus);
            let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
            eprintln!(
                "scored genome {} seed {} ({finished}/{group_count} groups)",
                group.genome_idx, group.seed
            );
            for row in rows {
                tx.send(row).expect("writer alive");
            }
        });
    })?;

    let (_journal, new_rows) = writer.join().expect("writer thread")?;
    let computed = new_rows.len();
    let mut all_rows = existing;
    all_rows.extend(new_rows);
    write_scores_table(&scores_path, table_hash, &mut all_rows)?;
    let flagged = all_rows.iter().filter(|r| r.status.is_flagged()).count();
    Ok(ScoreSummary {
        total_cells,
        computed,
        reused: total_cells.saturating_sub(computed),
        flagged,
        scores_path,
    })
}

/// Evaluate one group, never panicking outward: build failures and metric
/// errors turn into failed cells.
fn score_group(
    config: &RunConfig,
    genome: &Genome,
    batches: &[(u32, Minibatch)],
    group: &Group,
    corpus: &Corpus,
) -> Vec<CellResult> {
    let key = |metric: MetricId, mb: u32, normalized: bool| CellKey {
        genome_idx: group.genome_idx,
        metric: MetricKey(metric),
        seed: group.seed,
        minibatch: mb,
        normalized,
    };
    let all_failed = |group: &Group| -> Vec<CellResult> {
        group
            .wanted
            .iter()
            .flat_map(|(mb, norm, metrics)| {
                metrics
                    .iter()
                    .map(|&m| CellResult { key: key(m, *mb, *norm), status: CellStatus::Failed })
                    .collect::<Vec<_>>()
            })
            .collect()
    };

    let built = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        build_network(genome, config, corpus.vocab_size(), group.seed)
    }));
    let net = match built {
        Ok(Ok(net)) => net,
        Ok(Err(e)) => {
            eprintln!("genome {} seed {}: build failed: {e}", group.genome_idx, group.seed);
            return all_failed(group);
        }
        Err(_) => {
            eprintln!("genome {} seed {}: build panicked", group.genome_idx, group.seed);
            return all_failed(group);
        }
    };

    let mut rows = Vec::new();
    for (mb, normalized, metrics) in &group.wanted {
        let batch = &batches.iter().find(|(id, _)| id == mb).expect("batch prepared").1;
        let opts = MetricOpts {
            normalized: *normalized,
            seed: group.seed,
            minibatch_id: *mb,
            noise_level: config.noise_level,
        };
        let bundle = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            evaluate_many(&net.as_net(), batch, metrics, &opts)
        }));
        match bundle {
            Ok(Ok(scores)) => {
                for score in scores {
                    rows.push(CellResult {
                        key: key(score.metric, *mb, *normalized),
                        status: CellStatus::from_score(score.value),
                    });
                }
            }
            // Shared evaluation failed; isolate per metric so one bad
            // metric cannot take down the others.
            _ => {
                for &metric in metrics {
                    let one = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        evaluate_many(&net.as_net(), batch, &[metric], &opts)
                    }));
                    let status = match one {
                        Ok(Ok(mut scores)) => CellStatus::from_score(scores.remove(0).value),
                        Ok(Err(e)) => {
                            eprintln!(
                                "genome {} seed {} batch {mb} {metric}: {e}",
                                group.genome_idx, group.seed
                            );
                            CellStatus::Failed
                        }
                        Err(_) => {
                            eprintln!(
                                "genome {} seed {} batch {mb} {metric}: panicked",
                                group.genome_idx, group.seed
                            );
                            CellStatus::Failed
                        }
                    };
                    rows.push(CellResult { key: key(metric, *mb, *normalized), status });
                }
            }
        }
    }
    rows
}

/// Aggregate journal rows per genome: mean of finite cells, or the first
/// flag when nothing was finite.
fn aggregate(status_rows: &[CellStatus]) -> ScoreValue {
    let finite: Vec<f64> = status_rows.iter().filter_map(|s| s.finite()).collect();
    if finite.is_empty() {
        let reason = status_rows
            .iter()
            .find_map(|s| match s {
                CellStatus::Degenerate(r) => Some(*r),
                CellStatus::Failed => Some(DegenerateReason::NonFinite),
                CellStatus::Ok(_) => None,
            })
            .unwrap_or(DegenerateReason::NonFinite);
        ScoreValue::Degenerate(reason)
    } else {
        ScoreValue::Finite(finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

/// Join scored cells against the benchmark table and rank every requested
/// (metric, normalization) pair.
pub fn evaluate(config: &RunConfig) -> Result<EvaluationReport> {
    let benchmark_path = config
        .benchmark
        .as_ref()
        .ok_or_else(|| HarnessError::Config("evaluate requires benchmark=".into()))?;
    let (records, table_hash) = load_benchmark(benchmark_path)?;
    check_space(&records.iter().map(|r| r.genome.clone()).collect::<Vec<_>>(), config.search_space)?;
    let scores_path = config.output.join("scores.tsv");
    if !scores_path.exists() {
        return Err(HarnessError::Config(format!(
            "{} not found; run `tfnas score` first",
            scores_path.display()
        )));
    }
    let rows = read_scores_table(&scores_path, Some(table_hash))?;

    // (metric, normalized) -> genome -> cell statuses.
    let mut grouped: BTreeMap<(MetricKey, bool), BTreeMap<usize, Vec<CellStatus>>> = BTreeMap::new();
    for row in &rows {
        grouped
            .entry((row.key.metric, row.key.normalized))
            .or_default()
            .entry(row.key.genome_idx)
            .or_default()
            .push(row.status);
    }

    let record_pairs: Vec<(usize, f64)> =
        records.iter().enumerate().map(|(i, r)| (i, r.trained_score)).collect();
    let sign = config.performance_sign();

    let mut reports = Vec::new();
    for &normalized in config.normalization.settings() {
        for &metric in &config.metrics {
            let Some(per_genome) = grouped.get(&(MetricKey(metric), normalized)) else {
                return Err(HarnessError::Config(format!(
                    "no scored cells for {metric} (normalized={normalized}); rescore with this config"
                )));
            };
            let scores: Vec<(usize, ScoreValue)> =
                per_genome.iter().map(|(idx, rows)| (*idx, aggregate(rows))).collect();
            let report = tfnas_core::stats::build_report(
                &metric.as_str(),
                &scores,
                &record_pairs,
                sign,
            )?;
            let pairs_file = pairs_file_name(&metric.as_str(), normalized);
            write_pairs(&config.output, &pairs_file, &report)?;
            reports.push(MetricReport {
                metric: metric.as_str(),
                normalized,
                n_evaluated: report.n_evaluated,
                n_discarded: report.n_discarded,
                kendall_tau: report.kendall_tau,
                spearman_rho: report.spearman_rho,
                pairs_file,
            });
        }
    }

    let report = EvaluationReport {
        version: 1,
        search_space: config.search_space.as_str().to_string(),
        performance_sign: sign,
        reports,
    };
    write_report(&config.output, &report)?;
    Ok(report)
}

pub struct AblateSummary {
    pub rows: Vec<AblationRow>,
    pub path: PathBuf,
    pub flagged: usize,
}

/// Decile ablation: one architecture per decile of trained score, each
/// metric evaluated over the seed grid and the minibatch grid separately.
pub fn ablate(config: &RunConfig) -> Result<AblateSummary> {
    let benchmark_path = config
        .benchmark
        .as_ref()
        .ok_or_else(|| HarnessError::Config("ablate requires benchmark=".into()))?;
    let (records, _) = load_benchmark(benchmark_path)?;
    if records.len() < 10 {
        return Err(HarnessError::Config(format!(
            "ablation needs at least 10 architectures, got {}",
            records.len()
        )));
    }
    let genomes: Vec<Genome> = records.iter().map(|r| r.genome.clone()).collect();
    check_space(&genomes, config.search_space)?;
    let corpus = corpus::load_corpus(&config.corpus, &config.vocab, config.vocab_size)?;
    std::fs::create_dir_all(&config.output).map_err(|e| HarnessError::io(&config.output, e))?;

    // One architecture per decile of the trained-score ordering.
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .trained_score
            .total_cmp(&records[b].trained_score)
            .then(a.cmp(&b))
    });
    let picks: Vec<(usize, usize)> = (0..10)
        .map(|decile| (decile, order[decile * records.len() / 10]))
        .collect();

    let normalized = config.normalization.settings()[0];
    let mode = batch_mode(config.search_space);
    let seed_axis_batch = config.minibatches[0];
    let batch_axis_seed = config.seeds[0];

    // Distinct (genome, seed, minibatch) triples across both axes.
    let mut triples: HashSet<(usize, u64, u32)> = HashSet::new();
    for &(_, genome_idx) in &picks {
        for &seed in &config.seeds {
            triples.insert((genome_idx, seed, seed_axis_batch));
        }
        for &mb in &config.minibatches {
            triples.insert((genome_idx, batch_axis_seed, mb));
        }
    }
    let mut batch_ids: Vec<u32> = triples.iter().map(|t| t.2).collect();
    batch_ids.sort_unstable();
    batch_ids.dedup();
    let batches: Vec<(u32, Minibatch)> = batch_ids
        .iter()
        .map(|&id| {
            Ok((id, corpus::minibatch_for(&corpus, id, config.batch_size, config.seq_len, mode)?))
        })
        .collect::<Result<_>>()?;

    // Group by (genome, seed) to share network builds.
    let mut by_net: BTreeMap<(usize, u64), Vec<u32>> = BTreeMap::new();
    for &(genome_idx, seed, mb) in &triples {
        by_net.entry((genome_idx, seed)).or_default().push(mb);
    }
    let work: Vec<((usize, u64), Vec<u32>)> = by_net.into_iter().collect();

    let cell_scores: Vec<((usize, u64, u32), Vec<MetricScore>)> = run_pool(config.workers, || {
        work.par_iter()
            .flat_map(|((genome_idx, seed), mbs)| {
                let net = match build_network(
                    &genomes[*genome_idx],
                    config,
                    corpus.vocab_size(),
                    *seed,
                ) {
                    Ok(net) => net,
                    Err(e) => {
                        eprintln!("ablate: genome {genome_idx} seed {seed}: build failed: {e}");
                        return Vec::new();
                    }
                };
                mbs.iter()
                    .filter_map(|mb| {
                        let batch = &batches.iter().find(|(id, _)| id == mb).expect("prepared").1;
                        let opts = MetricOpts {
                            normalized,
                            seed: *seed,
                            minibatch_id: *mb,
                            noise_level: config.noise_level,
                        };
                        match evaluate_many(&net.as_net(), batch, &config.metrics, &opts) {
                            Ok(scores) => Some(((*genome_idx, *seed, *mb), scores)),
                            Err(e) => {
                                eprintln!(
                                    "ablate: genome {genome_idx} seed {seed} batch {mb}: {e}"
                                );
                                None
                            }
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    })?;

    let lookup = |genome_idx: usize, seed: u64, mb: u32, metric: MetricId| -> Option<ScoreValue> {
        cell_scores
            .iter()
            .find(|((g, s, m), _)| *g == genome_idx && *s == seed && *m == mb)
            .and_then(|(_, scores)| scores.iter().find(|sc| sc.metric == metric))
            .map(|sc| sc.value)
    };

    let mut rows = Vec::new();
    let mut flagged = 0usize;
    for &metric in &config.metrics {
        for &(decile, genome_idx) in &picks {
            for (axis, grid) in [
                ("seed", config.seeds.iter().map(|&s| (s, seed_axis_batch)).collect::<Vec<_>>()),
                (
                    "minibatch",
                    config.minibatches.iter().map(|&m| (batch_axis_seed, m)).collect::<Vec<_>>(),
                ),
            ] {
                let mut values = Vec::new();
                let mut n_flagged = 0usize;
                for (seed, mb) in grid {
                    match lookup(genome_idx, seed, mb, metric) {
                        Some(ScoreValue::Finite(v)) => values.push(v),
                        _ => n_flagged += 1,
                    }
                }
                flagged += n_flagged;
                let (mean, min, max, cv) = if values.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                } else {
                    spread_stats(&values)
                };
                rows.push(AblationRow {
                    metric: metric.as_str(),
                    axis,
                    decile,
                    genome_idx,
                    n_finite: values.len(),
                    n_flagged,
                    mean,
                    min,
                    max,
                    cv,
                    values,
                });
            }
        }
    }

    let path = config.output.join("ablation.tsv");
    write_ablation(&path, &rows)?;
    Ok(AblateSummary { rows, path, flagged })
}
