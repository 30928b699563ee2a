//! Versioned key-value run configuration.
//!
//! ```text
//! version=1
//! search_space=rnn
//! metrics=hidden_covariance_l0,parameter_count   # or "all"
//! seeds=0,1,2
//! minibatches=0,1
//! batch_size=8
//! seq_len=16
//! corpus=corpus.txt
//! vocab=vocab.txt
//! benchmark=bench.tsv
//! output=out/
//! ```
//!
//! Relative paths are resolved against the config file's directory. Lines
//! starting with `#` are comments.

use crate::{HarnessError, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tfnas_core::metrics::{registry, Applicability, MetricId};

pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_SEQ: usize = 32;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchSpace {
    Rnn,
    Transformer,
}

impl SearchSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchSpace::Rnn => "rnn",
            SearchSpace::Transformer => "transformer",
        }
    }

    /// Sign that makes "better" larger: loss for RNNs, GLUE-like for
    /// transformers.
    pub fn default_performance_sign(&self) -> i8 {
        match self {
            SearchSpace::Rnn => -1,
            SearchSpace::Transformer => 1,
        }
    }
}

/// Which normalization settings a run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Normalized,
    Raw,
    Both,
}

impl Normalization {
    pub fn settings(&self) -> &'static [bool] {
        match self {
            Normalization::Normalized => &[true],
            Normalization::Raw => &[false],
            Normalization::Both => &[true, false],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub search_space: SearchSpace,
    pub metrics: Vec<MetricId>,
    pub seeds: Vec<u64>,
    pub minibatches: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Optional cap on corpus vocabulary ids.
    pub vocab_size: Option<usize>,
    pub normalization: Normalization,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    /// Benchmark table (genome + trained score per line).
    pub benchmark: Option<PathBuf>,
    /// Plain genome list; alternative input for `score`.
    pub genomes: Option<PathBuf>,
    pub output: PathBuf,
    /// RNN build dims.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub noise_level: f64,
    pub performance_sign: Option<i8>,
    pub workers: usize,
}

impl RunConfig {
    pub fn performance_sign(&self) -> i8 {
        self.performance_sign.unwrap_or_else(|| self.search_space.default_performance_sign())
    }

    pub fn genome_source(&self) -> Result<&PathBuf> {
        self.benchmark.as_ref().or(self.genomes.as_ref()).ok_or_else(|| {
            HarnessError::Config("config needs benchmark= or genomes= to know what to score".into())
        })
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| HarnessError::Config(format!("{key}: bad entry '{s}'")))
        })
        .collect()
}

/// All metrics applicable to one search space.
pub fn metrics_for(space: SearchSpace) -> Vec<MetricId> {
    registry()
        .into_iter()
        .filter(|d| match space {
            SearchSpace::Rnn => d.applicable_to.accepts_rnn(),
            SearchSpace::Transformer => d.applicable_to.accepts_transformer(),
        })
        .map(|d| d.id)
        .collect()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base, path)
}

fn parse_config(text: &str, base: &Path, path: &Path) -> Result<RunConfig> {
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::file_parse(path, lineno + 1, format!("'{line}' is not key=value")));
        };
        // Allow trailing comments after values.
        let value = value.split('#').next().unwrap_or("").trim();
        if pairs.insert(key.trim().to_string(), value.to_string()).is_some() {
            return Err(HarnessError::file_parse(path, lineno + 1, format!("duplicate key '{}'", key.trim())));
        }
    }

    let get = |key: &str| pairs.get(key).map(|s| s.as_str());
    let require = |key: &str| {
        get(key).ok_or_else(|| HarnessError::Config(format!("missing required key '{key}'")))
    };
    let resolve = |value: &str| -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    match require("version")? {
        "1" => {}
        other => return Err(HarnessError::Config(format!("unsupported config version '{other}'"))),
    }
    let search_space = match require("search_space")? {
        "rnn" => SearchSpace::Rnn,
        "transformer" => SearchSpace::Transformer,
        other => return Err(HarnessError::Config(format!("unknown search_space '{other}'"))),
    };

    let metrics = match get("metrics").unwrap_or("all") {
        "all" => metrics_for(search_space),
        list => {
            let mut ids = Vec::new();
            for token in list.split(',').filter(|s| !s.is_empty()) {
                let id = MetricId::parse(token.trim()).ok_or_else(|| {
                    HarnessError::Config(format!("metrics: unknown metric '{}'", token.trim()))
                })?;
                ids.push(id);
            }
            ids
        }
    };
    if metrics.is_empty() {
        return Err(HarnessError::Config("at least one metric is required".into()));
    }
    for id in &metrics {
        let d = tfnas_core::metrics::descriptor(*id);
        let ok = match search_space {
            SearchSpace::Rnn => d.applicable_to.accepts_rnn(),
            SearchSpace::Transformer => d.applicable_to.accepts_transformer(),
        };
        if !ok {
            return Err(HarnessError::Config(format!(
                "metric {id} does not apply to search_space={}",
                search_space.as_str()
            )));
        }
        let _: Applicability = d.applicable_to; // descriptor always resolves
    }

    let seeds: Vec<u64> = match get("seeds") {
        Some(v) => parse_list(v, "seeds")?,
        None => vec![0],
    };
    if seeds.is_empty() {
        return Err(HarnessError::Config("seeds must be non-empty".into()));
    }
    let minibatches: Vec<u32> = match get("minibatches") {
        Some(v) => parse_list(v, "minibatches")?,
        None => vec![0],
    };
    if minibatches.is_empty() {
        return Err(HarnessError::Config("minibatches must be non-empty".into()));
    }

    let parse_num = |key: &str, default: usize| -> Result<usize> {
        match get(key) {
            Some(v) => v.parse().map_err(|_| HarnessError::Config(format!("{key}: bad number '{v}'"))),
            None => Ok(default),
        }
    };
    let batch_size = parse_num("batch_size", DEFAULT_BATCH)?;
    if batch_size < 2 {
        return Err(HarnessError::Config("batch_size must be at least 2".into()));
    }
    let seq_len = parse_num("seq_len", DEFAULT_SEQ)?;
    if seq_len == 0 {
        return Err(HarnessError::Config("seq_len must be positive".into()));
    }
    let hidden_dim = parse_num("hidden_dim", DEFAULT_HIDDEN)?;
    let embed_dim = parse_num("embed_dim", hidden_dim)?;
    let workers = parse_num("workers", 0)?;
    let vocab_size = match get("vocab_size") {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| HarnessError::Config(format!("vocab_size: bad number '{v}'")))?,
        ),
        None => None,
    };

    let normalization = match get("normalization").unwrap_or("normalized") {
        "normalized" => Normalization::Normalized,
        "raw" => Normalization::Raw,
        "both" => Normalization::Both,
        other => return Err(HarnessError::Config(format!("unknown normalization '{other}'"))),
    };

    let noise_level = match get("noise_level") {
        Some(v) => v
            .parse::<f64>()
            .map_err(|_| HarnessError::Config(format!("noise_level: bad number '{v}'")))?,
        None => 1.0,
    };
    if noise_level <= 0.0 || noise_level.is_nan() {
        return Err(HarnessError::Config("noise_level must be positive".into()));
    }

    let performance_sign = match get("performance_sign") {
        None | Some("auto") => None,
        Some("+1") | Some("1") => Some(1),
        Some("-1") => Some(-1),
        Some(other) => {
            return Err(HarnessError::Config(format!("performance_sign: expected auto/+1/-1, got '{other}'")))
        }
    };

    Ok(RunConfig {
        search_space,
        metrics,
        seeds,
        minibatches,
        batch_size,
        seq_len,
        vocab_size,
        normalization,
        corpus: resolve(require("corpus")?),
        vocab: resolve(require("vocab")?),
        benchmark: get("benchmark").map(resolve),
        genomes: get("genomes").map(resolve),
        output: resolve(require("output")?),
        embed_dim,
        hidden_dim,
        noise_level,
        performance_sign,
        workers,
    })
}
