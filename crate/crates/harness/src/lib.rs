//! Sweep orchestration around `tfnas-core`: run configs, corpus loading,
//! minibatch sampling, a resumable scoring journal, correlation evaluation,
//! and ablation runs over seed/minibatch grids.

pub mod config;
pub mod corpus;
pub mod journal;
pub mod report;
pub mod runner;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Core(#[from] tfnas_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    FileParse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn file_parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        HarnessError::FileParse { path: path.into(), line, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// FNV-1a over bytes; used for table fingerprints and synthetic-score seeds.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
