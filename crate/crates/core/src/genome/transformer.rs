//! BERT-style encoder genomes over a fixed hyperparameter grid. Hidden
//! width and depth are global; every other choice is per-layer.

use crate::{Error, Result};
use rand::Rng;

use super::BuildDims;

pub const HIDDEN_DIMS: [usize; 2] = [128, 256];
pub const LAYER_COUNTS: [usize; 2] = [2, 4];
pub const HEAD_COUNTS: [usize; 2] = [2, 4];
pub const FF_DIMS: [usize; 2] = [512, 1024];
pub const FF_STACKS: [usize; 2] = [1, 3];

/// The six attention-operator variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionOp {
    /// softmax(Q K^T / sqrt(d_h)) V
    ScaledDotProduct,
    /// softmax(Q W K^T) V with a per-head bilinear form W.
    Multiplicative,
    /// Fixed discrete Fourier basis along the sequence axis, real part.
    FourierTransform,
    /// Fixed discrete cosine (DCT-II) basis along the sequence axis.
    CosineTransform,
    /// Span-based dynamic convolution along the sequence axis.
    DynamicConv { kernel: usize },
}

impl AttentionOp {
    pub const ALL: [AttentionOp; 6] = [
        AttentionOp::ScaledDotProduct,
        AttentionOp::Multiplicative,
        AttentionOp::FourierTransform,
        AttentionOp::CosineTransform,
        AttentionOp::DynamicConv { kernel: 5 },
        AttentionOp::DynamicConv { kernel: 9 },
    ];

    pub fn token(&self) -> &'static str {
        match self {
            AttentionOp::ScaledDotProduct => "sdp",
            AttentionOp::Multiplicative => "mult",
            AttentionOp::FourierTransform => "dft",
            AttentionOp::CosineTransform => "dct",
            AttentionOp::DynamicConv { kernel: 5 } => "conv5",
            AttentionOp::DynamicConv { kernel: 9 } => "conv9",
            AttentionOp::DynamicConv { .. } => unreachable!("kernel sizes are 5 or 9"),
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "sdp" => AttentionOp::ScaledDotProduct,
            "mult" => AttentionOp::Multiplicative,
            "dft" => AttentionOp::FourierTransform,
            "dct" => AttentionOp::CosineTransform,
            "conv5" => AttentionOp::DynamicConv { kernel: 5 },
            "conv9" => AttentionOp::DynamicConv { kernel: 9 },
            _ => return None,
        })
    }

    /// Whether the operator produces softmax attention maps.
    pub fn has_softmax_map(&self) -> bool {
        matches!(self, AttentionOp::ScaledDotProduct | AttentionOp::Multiplicative)
    }
}

/// Per-layer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerConfig {
    pub attn_op: AttentionOp,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub ff_stacks: usize,
}

/// One point of the encoder grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerGenome {
    pub hidden_dim: usize,
    pub layers: Vec<LayerConfig>,
}

impl TransformerGenome {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !HIDDEN_DIMS.contains(&self.hidden_dim) {
            return Err(Error::Validation(format!(
                "hidden_dim {} outside grid {HIDDEN_DIMS:?}",
                self.hidden_dim
            )));
        }
        if !LAYER_COUNTS.contains(&self.layers.len()) {
            return Err(Error::Validation(format!(
                "layer count {} outside grid {LAYER_COUNTS:?}",
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !HEAD_COUNTS.contains(&layer.num_heads) {
                return Err(Error::Validation(format!(
                    "layer {i}: num_heads {} outside grid {HEAD_COUNTS:?}",
                    layer.num_heads
                )));
            }
            if !FF_DIMS.contains(&layer.ff_dim) {
                return Err(Error::Validation(format!(
                    "layer {i}: ff_dim {} outside grid {FF_DIMS:?}",
                    layer.ff_dim
                )));
            }
            if !FF_STACKS.contains(&layer.ff_stacks) {
                return Err(Error::Validation(format!(
                    "layer {i}: ff_stacks {} outside grid {FF_STACKS:?}",
                    layer.ff_stacks
                )));
            }
            if let AttentionOp::DynamicConv { kernel } = layer.attn_op {
                if kernel != 5 && kernel != 9 {
                    return Err(Error::Validation(format!(
                        "layer {i}: convolution kernel {kernel} outside grid [5, 9]"
                    )));
                }
            }
            if !self.hidden_dim.is_multiple_of(layer.num_heads) {
                return Err(Error::Validation(format!(
                    "layer {i}: hidden_dim {} not divisible by {} heads",
                    self.hidden_dim, layer.num_heads
                )));
            }
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.layers.iter().map(|l| l.num_heads).sum()
    }

    /// Trainable scalars of the instantiated network, including embeddings,
    /// positional encodings, layer norms, and the token-prediction head.
    pub fn param_count(&self, dims: &BuildDims) -> Result<u64> {
        self.validate()?;
        dims.validate()?;
        let v = dims.vocab as u64;
        let p = dims.max_positions as u64;
        let h = self.hidden_dim as u64;
        // Embeddings + embedding layer norm.
        let mut total = v * h + p * h + 2 * h;
        for layer in &self.layers {
            let heads = layer.num_heads as u64;
            let d_head = h / heads;
            let ff = layer.ff_dim as u64;
            let stacks = layer.ff_stacks as u64;
            let attn = match layer.attn_op {
                // W_Q, W_K, W_V, W_O with biases.
                AttentionOp::ScaledDotProduct => 4 * (h * h + h),
                // Plus one bilinear form per head.
                AttentionOp::Multiplicative => 4 * (h * h + h) + heads * d_head * d_head,
                // Fixed bases carry no trainable parameters.
                AttentionOp::FourierTransform | AttentionOp::CosineTransform => 0,
                // Value/output projections plus per-head kernel generators.
                AttentionOp::DynamicConv { kernel } => {
                    2 * (h * h + h) + heads * (d_head * kernel as u64 + kernel as u64)
                }
            };
            // Attention sublayer norm, then per-stack FF + its norm.
            total += attn + 2 * h + stacks * (h * ff + ff + ff * h + h + 2 * h);
        }
        // Masked-token prediction head.
        total += h * v + v;
        Ok(total)
    }
}

/// All 48 per-layer configurations of the grid.
pub fn enumerate_layer_configs() -> Vec<LayerConfig> {
    let mut out = Vec::with_capacity(48);
    for attn_op in AttentionOp::ALL {
        for num_heads in HEAD_COUNTS {
            for ff_dim in FF_DIMS {
                for ff_stacks in FF_STACKS {
                    out.push(LayerConfig { attn_op, num_heads, ff_dim, ff_stacks });
                }
            }
        }
    }
    out
}

/// Exact size of the search space in closed form.
pub fn count_search_space() -> u64 {
    count_search_space_with_layers(&LAYER_COUNTS)
}

/// Closed-form count with a restricted set of layer-count options.
pub fn count_search_space_with_layers(layer_counts: &[usize]) -> u64 {
    let per_layer = enumerate_layer_configs().len() as u64;
    let per_depth: u64 = layer_counts.iter().map(|&l| per_layer.pow(l as u32)).sum();
    HIDDEN_DIMS.len() as u64 * per_depth
}

/// Draw uniformly from the grid.
pub fn sample_transformer(rng: &mut impl Rng) -> TransformerGenome {
    let hidden_dim = HIDDEN_DIMS[rng.gen_range(0..HIDDEN_DIMS.len())];
    let num_layers = LAYER_COUNTS[rng.gen_range(0..LAYER_COUNTS.len())];
    let layers = (0..num_layers)
        .map(|_| {
            let attn_op = AttentionOp::ALL[rng.gen_range(0..AttentionOp::ALL.len())];
            LayerConfig {
                attn_op,
                num_heads: HEAD_COUNTS[rng.gen_range(0..HEAD_COUNTS.len())],
                ff_dim: FF_DIMS[rng.gen_range(0..FF_DIMS.len())],
                ff_stacks: FF_STACKS[rng.gen_range(0..FF_STACKS.len())],
            }
        })
        .collect();
    TransformerGenome { hidden_dim, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn per_layer_grid_has_48_configs() {
        // Exhaustive enumeration of one layer's options.
        let configs = enumerate_layer_configs();
        assert_eq!(configs.len(), 48);
        let unique: std::collections::HashSet<_> = configs.iter().collect();
        assert_eq!(unique.len(), 48);
    }

    #[test]
    fn search_space_count_matches_enumeration() {
        // Count depth-2 and depth-4 tuples by explicit iteration.
        let per_layer = enumerate_layer_configs().len() as u64;
        let mut two = 0u64;
        for _ in 0..per_layer {
            for _ in 0..per_layer {
                two += 1;
            }
        }
        let mut four = 0u64;
        for _ in 0..per_layer.pow(2) {
            for _ in 0..per_layer.pow(2) {
                four += 1;
            }
        }
        assert_eq!(count_search_space(), 2 * (two + four));
        assert_eq!(count_search_space(), 10_621_440);
    }

    #[test]
    fn reduced_space_count() {
        assert_eq!(count_search_space_with_layers(&[2]), 4_608);
    }

    #[test]
    fn sampled_genomes_lie_in_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = sample_transformer(&mut rng);
            g.validate().unwrap();
        }
    }

    #[test]
    fn sampling_is_uniform_over_hidden_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut small = 0usize;
        const DRAWS: usize = 10_000;
        for _ in 0..DRAWS {
            if sample_transformer(&mut rng).hidden_dim == 128 {
                small += 1;
            }
        }
        let freq = small as f64 / DRAWS as f64;
        assert!((freq - 0.5).abs() <= 0.02, "hidden_dim=128 frequency {freq}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_transformer(&mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_transformer(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn validation_rejects_off_grid() {
        let mut g = sample_transformer(&mut ChaCha8Rng::seed_from_u64(3));
        g.hidden_dim = 64;
        assert!(g.validate().is_err());

        let mut g2 = sample_transformer(&mut ChaCha8Rng::seed_from_u64(3));
        g2.layers.truncate(1);
        assert!(g2.validate().is_err());

        let mut g3 = sample_transformer(&mut ChaCha8Rng::seed_from_u64(3));
        g3.layers[0].ff_dim = 700;
        assert!(g3.validate().is_err());
    }

    #[test]
    fn ff_dim_increase_raises_param_count() {
        let dims = BuildDims { vocab: 100, embed_dim: 1, hidden_dim: 1, max_positions: 16 };
        let mut g = sample_transformer(&mut ChaCha8Rng::seed_from_u64(4));
        g.layers[0].ff_dim = 512;
        let small = g.param_count(&dims).unwrap();
        g.layers[0].ff_dim = 1024;
        let large = g.param_count(&dims).unwrap();
        assert!(large > small);
    }
}
