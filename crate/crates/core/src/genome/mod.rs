//! Architecture genomes for both search spaces: sampling, validation,
//! closed-form parameter counts, and a stable line-oriented text format.

mod rnn;
mod text;
mod transformer;

pub use rnn::{sample_rnn, CellNode, CellNodeOp, CellSource, RnnCellGenome};
pub use text::{deserialize, parse_benchmark_line, serialize, BenchmarkRecord};
pub use transformer::{
    count_search_space, count_search_space_with_layers, enumerate_layer_configs, sample_transformer,
    AttentionOp, LayerConfig, TransformerGenome, FF_DIMS, FF_STACKS, HEAD_COUNTS, HIDDEN_DIMS,
    LAYER_COUNTS,
};

use crate::Result;

/// An architecture description from either search space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Genome {
    Rnn(RnnCellGenome),
    Transformer(TransformerGenome),
}

impl Genome {
    pub fn validate(&self) -> Result<()> {
        match self {
            Genome::Rnn(g) => g.validate(),
            Genome::Transformer(g) => g.validate(),
        }
    }

    /// Exact number of trainable scalars in the network `netbuild` would
    /// instantiate for this genome under the given dimensions.
    pub fn param_count(&self, dims: &BuildDims) -> Result<u64> {
        match self {
            Genome::Rnn(g) => g.param_count(dims),
            Genome::Transformer(g) => g.param_count(dims),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Genome::Rnn(_) => "rnn",
            Genome::Transformer(_) => "transformer",
        }
    }
}

/// Embedding/vocabulary configuration needed to turn a genome into a
/// concrete network (and therefore into an exact parameter count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildDims {
    /// Vocabulary size, including any reserved ids.
    pub vocab: usize,
    /// RNN embedding width.
    pub embed_dim: usize,
    /// RNN hidden width (transformer width comes from the genome).
    pub hidden_dim: usize,
    /// Maximum sequence length; sizes the transformer's learned positional
    /// embedding table.
    pub max_positions: usize,
}

impl BuildDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_positions == 0 {
            return Err(crate::Error::Contract(format!("degenerate build dims: {self:?}")));
        }
        Ok(())
    }
}
