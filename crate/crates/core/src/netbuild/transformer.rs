//! BERT-style encoder instantiation with capture slots for everything the
//! transformer metrics read: per-head attention outputs, softmax maps,
//! per-layer hidden states, GELU activation codes, and the per-head mixing
//! matrices whose nuclear norms feed synaptic diversity.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::genome::{AttentionOp, BuildDims, TransformerGenome};
use crate::{Error, Result};
use rand::Rng;

use super::{
    bound_param, ActivationCapture, ForwardOpts, Minibatch, NamedParam, ParamSet, IGNORE_TARGET,
};

const LAYER_NORM_EPS: f64 = 1e-12;

/// A FlexiBERT-grid encoder at random initialization.
pub struct TransformerNetwork {
    genome: TransformerGenome,
    vocab: usize,
    max_positions: usize,
    params: ParamSet,
}

/// One attention head's captured tensors.
pub struct HeadCapture {
    pub layer: usize,
    pub head: usize,
    /// Att_h: [N, T, hidden/heads].
    pub attn_output: TensorId,
    /// Softmax map [N, T, T]; present only for softmax operators.
    pub softmax_map: Option<TensorId>,
}

/// Where a head's mixing matrix lives.
pub enum MixingSource {
    /// Column slice `[.., start..start+len]` of a bound parameter.
    ParamCols { id: TensorId, start: usize, len: usize },
    /// A whole bound parameter.
    Param { id: TensorId },
    /// A fixed (non-trainable) basis: zero gradient, zero contribution.
    FixedBasis,
}

/// A per-head mixing matrix reference for the synaptic-diversity metric.
pub struct MixingMatrix {
    pub layer: usize,
    pub head: usize,
    pub label: &'static str,
    pub source: MixingSource,
}

/// One forward pass of the encoder with every capture slot populated.
pub struct TransformerEval {
    pub tape: Tape,
    pub loss: TensorId,
    /// Token-embedding lookup [N*T, hidden]; the Jacobian surface.
    pub token_embedding: TensorId,
    /// Output of each encoder layer, [N, T, hidden].
    pub layer_hidden: Vec<TensorId>,
    pub heads: Vec<HeadCapture>,
    pub mixing: Vec<MixingMatrix>,
    pub activation_captures: Vec<ActivationCapture>,
    pub params: Vec<(String, TensorId)>,
    pub batch_n: usize,
    pub batch_t: usize,
}

/// Build a transformer from a genome with fan-in uniform initialization.
pub fn build_transformer(
    genome: &TransformerGenome,
    vocab: usize,
    max_positions: usize,
    rng: &mut impl Rng,
) -> Result<TransformerNetwork> {
    genome.validate()?;
    let h = genome.hidden_dim;
    let dims = BuildDims { vocab, embed_dim: h, hidden_dim: h, max_positions };
    dims.validate()?;

    let root = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut params = ParamSet::default();
    params.add_uniform("embed.token", vec![vocab, h], root(h), rng);
    params.add_uniform("embed.pos", vec![max_positions, h], root(h), rng);
    params.add_constant("embed.ln.gamma", vec![h], 1.0);
    params.add_constant("embed.ln.beta", vec![h], 0.0);

    for (l, layer) in genome.layers.iter().enumerate() {
        let d_head = h / layer.num_heads;
        match layer.attn_op {
            AttentionOp::ScaledDotProduct | AttentionOp::Multiplicative => {
                for name in ["wq", "wk", "wv", "wo"] {
                    params.add_uniform(format!("layer{l}.attn.{name}"), vec![h, h], root(h), rng);
                    params.add_constant(format!("layer{l}.attn.{name}b"), vec![h], 0.0);
                }
                if layer.attn_op == AttentionOp::Multiplicative {
                    for head in 0..layer.num_heads {
                        params.add_uniform(
                            format!("layer{l}.attn.wmult.h{head}"),
                            vec![d_head, d_head],
                            root(d_head),
                            rng,
                        );
                    }
                }
            }
            AttentionOp::FourierTransform | AttentionOp::CosineTransform => {}
            AttentionOp::DynamicConv { kernel } => {
                for name in ["wv", "wo"] {
                    params.add_uniform(format!("layer{l}.conv.{name}"), vec![h, h], root(h), rng);
                    params.add_constant(format!("layer{l}.conv.{name}b"), vec![h], 0.0);
                }
                for head in 0..layer.num_heads {
                    params.add_uniform(
                        format!("layer{l}.conv.gen.h{head}"),
                        vec![d_head, kernel],
                        root(d_head),
                        rng,
                    );
                    params.add_constant(format!("layer{l}.conv.genb.h{head}"), vec![kernel], 0.0);
                }
            }
        }
        params.add_constant(format!("layer{l}.attn_ln.gamma"), vec![h], 1.0);
        params.add_constant(format!("layer{l}.attn_ln.beta"), vec![h], 0.0);
        for s in 0..layer.ff_stacks {
            params.add_uniform(format!("layer{l}.ff{s}.w1"), vec![h, layer.ff_dim], root(h), rng);
            params.add_constant(format!("layer{l}.ff{s}.b1"), vec![layer.ff_dim], 0.0);
            params.add_uniform(
                format!("layer{l}.ff{s}.w2"),
                vec![layer.ff_dim, h],
                root(layer.ff_dim),
                rng,
            );
            params.add_constant(format!("layer{l}.ff{s}.b2"), vec![h], 0.0);
            params.add_constant(format!("layer{l}.ff{s}.ln.gamma"), vec![h], 1.0);
            params.add_constant(format!("layer{l}.ff{s}.ln.beta"), vec![h], 0.0);
        }
    }
    params.add_uniform("head.w", vec![h, vocab], root(h), rng);
    params.add_constant("head.b", vec![vocab], 0.0);

    Ok(TransformerNetwork { genome: genome.clone(), vocab, max_positions, params })
}

/// Real part of the DFT applied to a real signal: `F[k][t] = cos(2*pi*k*t/T)`.
fn dft_basis(t: usize) -> Vec<f64> {
    let mut basis = vec![0.0; t * t];
    for k in 0..t {
        for j in 0..t {
            basis[k * t + j] = (std::f64::consts::TAU * k as f64 * j as f64 / t as f64).cos();
        }
    }
    basis
}

/// DCT-II basis: `C[k][t] = cos(pi*(t+0.5)*k/T)`.
fn dct_basis(t: usize) -> Vec<f64> {
    let mut basis = vec![0.0; t * t];
    for k in 0..t {
        for j in 0..t {
            basis[k * t + j] = (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / t as f64).cos();
        }
    }
    basis
}

impl TransformerNetwork {
    pub fn genome(&self) -> &TransformerGenome {
        &self.genome
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.genome.hidden_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn params(&self) -> &[NamedParam] {
        self.params.items()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    pub fn embed_std(&self, batch: &Minibatch) -> f64 {
        let table = self.params.get("embed.token").expect("embedding present").values();
        let h = self.genome.hidden_dim;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let count = (batch.n() * batch.seq_len() * h) as f64;
        for &id in batch.tokens() {
            for &v in &table[id as usize * h..(id as usize + 1) * h] {
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / count;
        (sum_sq / count - mean * mean).max(0.0).sqrt()
    }

    pub fn forward(&self, batch: &Minibatch) -> Result<TransformerEval> {
        self.forward_with(batch, &ForwardOpts::default())
    }

    /// Masked-token cross-entropy forward pass. Every sequence must carry at
    /// least one masked (scored) position.
    pub fn forward_with(&self, batch: &Minibatch, opts: &ForwardOpts) -> Result<TransformerEval> {
        batch.validate_ids(self.vocab)?;
        let (n, t_len) = (batch.n(), batch.seq_len());
        let h = self.genome.hidden_dim;
        if t_len > self.max_positions {
            return Err(Error::Contract(format!(
                "sequence length {t_len} exceeds positional table {}",
                self.max_positions
            )));
        }
        for i in 0..n {
            if (0..t_len).all(|t| batch.target(i, t) == IGNORE_TARGET) {
                return Err(Error::Contract(format!("sequence {i} has no masked target position")));
            }
        }
        if let Some(noise) = opts.embed_noise {
            if noise.len() != n * t_len * h {
                return Err(Error::Contract(format!(
                    "embedding noise has {} entries, expected {}",
                    noise.len(),
                    n * t_len * h
                )));
            }
        }

        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let p = |name: &str| bound_param(&params, name).expect("parameter bound");

        // Token + position embeddings, layer norm, [N, T, hidden].
        let token_ids: Vec<usize> = batch.tokens().iter().map(|&id| id as usize).collect();
        let token_embedding = tape.gather_rows(p("embed.token"), &token_ids)?;
        let pos_ids: Vec<usize> = (0..n * t_len).map(|i| i % t_len).collect();
        let pos_embedding = tape.gather_rows(p("embed.pos"), &pos_ids)?;
        let mut x = tape.add(token_embedding, pos_embedding)?;
        if let Some(noise) = opts.embed_noise {
            let noise_leaf = tape.constant(vec![n * t_len, h], noise.to_vec())?;
            x = tape.add(x, noise_leaf)?;
        }
        let x = tape.layer_norm(x, p("embed.ln.gamma"), p("embed.ln.beta"), LAYER_NORM_EPS)?;
        let mut x = tape.reshape(x, vec![n, t_len, h])?;

        let mut layer_hidden = Vec::with_capacity(self.genome.layers.len());
        let mut heads = Vec::new();
        let mut mixing = Vec::new();
        let mut activation_captures = Vec::new();

        for (l, layer) in self.genome.layers.iter().enumerate() {
            let num_heads = layer.num_heads;
            let d_head = h / num_heads;

            // Attention sublayer: per-head outputs, concatenated.
            let mut head_outputs = Vec::with_capacity(num_heads);
            match layer.attn_op {
                AttentionOp::ScaledDotProduct | AttentionOp::Multiplicative => {
                    let wq = p(&format!("layer{l}.attn.wq"));
                    let wk = p(&format!("layer{l}.attn.wk"));
                    let wv = p(&format!("layer{l}.attn.wv"));
                    let q_all = tape.matmul_shared_right(x, wq)?;
                    let q_all = tape.add_bias(q_all, p(&format!("layer{l}.attn.wqb")))?;
                    let k_all = tape.matmul_shared_right(x, wk)?;
                    let k_all = tape.add_bias(k_all, p(&format!("layer{l}.attn.wkb")))?;
                    let v_all = tape.matmul_shared_right(x, wv)?;
                    let v_all = tape.add_bias(v_all, p(&format!("layer{l}.attn.wvb")))?;
                    for head in 0..num_heads {
                        let start = head * d_head;
                        let q = tape.slice_last(q_all, start, d_head)?;
                        let k = tape.slice_last(k_all, start, d_head)?;
                        let v = tape.slice_last(v_all, start, d_head)?;
                        let k_t = tape.transpose_last2(k)?;
                        let scores = match layer.attn_op {
                            AttentionOp::ScaledDotProduct => {
                                let raw = tape.bmm(q, k_t)?;
                                tape.scale(raw, 1.0 / (d_head as f64).sqrt())
                            }
                            _ => {
                                let w = p(&format!("layer{l}.attn.wmult.h{head}"));
                                let qw = tape.matmul_shared_right(q, w)?;
                                tape.bmm(qw, k_t)?
                            }
                        };
                        let softmax_map = tape.softmax(scores, 2)?;
                        let att = tape.bmm(softmax_map, v)?;
                        let downstream = self.apply_head_opts(&mut tape, att, l, head, opts)?;
                        heads.push(HeadCapture {
                            layer: l,
                            head,
                            attn_output: att,
                            softmax_map: Some(softmax_map),
                        });
                        for (label, matrix) in [("wq", wq), ("wk", wk), ("wv", wv)] {
                            mixing.push(MixingMatrix {
                                layer: l,
                                head,
                                label,
                                source: MixingSource::ParamCols { id: matrix, start, len: d_head },
                            });
                        }
                        if layer.attn_op == AttentionOp::Multiplicative {
                            mixing.push(MixingMatrix {
                                layer: l,
                                head,
                                label: "wmult",
                                source: MixingSource::Param {
                                    id: p(&format!("layer{l}.attn.wmult.h{head}")),
                                },
                            });
                        }
                        head_outputs.push(downstream);
                    }
                    let concat = tape.concat_last(&head_outputs)?;
                    let wo = p(&format!("layer{l}.attn.wo"));
                    let projected = tape.matmul_shared_right(concat, wo)?;
                    let projected = tape.add_bias(projected, p(&format!("layer{l}.attn.wob")))?;
                    x = self.residual_norm(&mut tape, x, projected, l, "attn_ln", &params)?;
                }
                AttentionOp::FourierTransform | AttentionOp::CosineTransform => {
                    let basis_values = match layer.attn_op {
                        AttentionOp::FourierTransform => dft_basis(t_len),
                        _ => dct_basis(t_len),
                    };
                    let basis = tape.constant(vec![t_len, t_len], basis_values)?;
                    for head in 0..num_heads {
                        let xh = tape.slice_last(x, head * d_head, d_head)?;
                        let att = tape.matmul_shared_left(basis, xh)?;
                        let downstream = self.apply_head_opts(&mut tape, att, l, head, opts)?;
                        heads.push(HeadCapture { layer: l, head, attn_output: att, softmax_map: None });
                        mixing.push(MixingMatrix {
                            layer: l,
                            head,
                            label: "basis",
                            source: MixingSource::FixedBasis,
                        });
                        head_outputs.push(downstream);
                    }
                    let mixed = tape.concat_last(&head_outputs)?;
                    x = self.residual_norm(&mut tape, x, mixed, l, "attn_ln", &params)?;
                }
                AttentionOp::DynamicConv { kernel } => {
                    let wv = p(&format!("layer{l}.conv.wv"));
                    let v_all = tape.matmul_shared_right(x, wv)?;
                    let v_all = tape.add_bias(v_all, p(&format!("layer{l}.conv.wvb")))?;
                    let half = (kernel / 2) as isize;
                    for head in 0..num_heads {
                        let start = head * d_head;
                        let xh = tape.slice_last(x, start, d_head)?;
                        let gen = p(&format!("layer{l}.conv.gen.h{head}"));
                        let logits = tape.matmul_shared_right(xh, gen)?;
                        let logits =
                            tape.add_bias(logits, p(&format!("layer{l}.conv.genb.h{head}")))?;
                        let taps = tape.softmax(logits, 2)?;
                        let vh = tape.slice_last(v_all, start, d_head)?;
                        let mut acc: Option<TensorId> = None;
                        for tap in 0..kernel {
                            let shifted = tape.shift_seq(vh, tap as isize - half)?;
                            let weight = tape.slice_last(taps, tap, 1)?;
                            let term = tape.mul_broadcast_last(shifted, weight)?;
                            acc = Some(match acc {
                                Some(a) => tape.add(a, term)?,
                                None => term,
                            });
                        }
                        let att = acc.expect("kernel has taps");
                        let downstream = self.apply_head_opts(&mut tape, att, l, head, opts)?;
                        heads.push(HeadCapture { layer: l, head, attn_output: att, softmax_map: None });
                        mixing.push(MixingMatrix {
                            layer: l,
                            head,
                            label: "wv",
                            source: MixingSource::ParamCols { id: wv, start, len: d_head },
                        });
                        mixing.push(MixingMatrix {
                            layer: l,
                            head,
                            label: "gen",
                            source: MixingSource::Param { id: gen },
                        });
                        head_outputs.push(downstream);
                    }
                    let concat = tape.concat_last(&head_outputs)?;
                    let wo = p(&format!("layer{l}.conv.wo"));
                    let projected = tape.matmul_shared_right(concat, wo)?;
                    let projected = tape.add_bias(projected, p(&format!("layer{l}.conv.wob")))?;
                    x = self.residual_norm(&mut tape, x, projected, l, "attn_ln", &params)?;
                }
            }
            tape.check_finite(x, &format!("layer {l} attention output"))?;

            // Feed-forward stacks, each its own residual + norm sub-block.
            for s in 0..layer.ff_stacks {
                let w1 = p(&format!("layer{l}.ff{s}.w1"));
                let inner = tape.matmul_shared_right(x, w1)?;
                let inner = tape.add_bias(inner, p(&format!("layer{l}.ff{s}.b1")))?;
                let activated = tape.gelu(inner);
                activation_captures.push(ActivationCapture { id: activated, threshold: 0.0 });
                let w2 = p(&format!("layer{l}.ff{s}.w2"));
                let outer = tape.matmul_shared_right(activated, w2)?;
                let outer = tape.add_bias(outer, p(&format!("layer{l}.ff{s}.b2")))?;
                let gamma = p(&format!("layer{l}.ff{s}.ln.gamma"));
                let beta = p(&format!("layer{l}.ff{s}.ln.beta"));
                let summed = tape.add(x, outer)?;
                x = tape.layer_norm(summed, gamma, beta, LAYER_NORM_EPS)?;
            }
            tape.check_finite(x, &format!("layer {l} output"))?;
            layer_hidden.push(x);
        }

        // Masked-token prediction head over the scored positions.
        let flat = tape.reshape(x, vec![n * t_len, h])?;
        let mut masked_rows = Vec::new();
        let mut masked_targets = Vec::new();
        for i in 0..n {
            for t in 0..t_len {
                let target = batch.target(i, t);
                if target != IGNORE_TARGET {
                    masked_rows.push(i * t_len + t);
                    masked_targets.push(target as usize);
                }
            }
        }
        let picked = tape.gather_rows(flat, &masked_rows)?;
        let logits = tape.matmul(picked, p("head.w"))?;
        let logits = tape.add_bias(logits, p("head.b"))?;
        let loss = tape.cross_entropy(logits, &masked_targets)?;
        tape.check_finite(loss, "transformer loss")?;

        Ok(TransformerEval {
            loss,
            token_embedding,
            layer_hidden,
            heads,
            mixing,
            activation_captures,
            params,
            batch_n: n,
            batch_t: t_len,
            tape,
        })
    }

    fn residual_norm(
        &self,
        tape: &mut Tape,
        x: TensorId,
        sublayer: TensorId,
        l: usize,
        ln: &str,
        params: &[(String, TensorId)],
    ) -> Result<TensorId> {
        let gamma = bound_param(params, &format!("layer{l}.{ln}.gamma")).expect("ln gamma");
        let beta = bound_param(params, &format!("layer{l}.{ln}.beta")).expect("ln beta");
        let summed = tape.add(x, sublayer)?;
        tape.layer_norm(summed, gamma, beta, LAYER_NORM_EPS)
    }

    fn apply_head_opts(
        &self,
        tape: &mut Tape,
        att: TensorId,
        layer: usize,
        head: usize,
        opts: &ForwardOpts,
    ) -> Result<TensorId> {
        let mut current = att;
        if let Some(scale) = opts.head_scale {
            if scale.layer == layer && scale.head == head {
                current = tape.scale(current, scale.factor);
            }
        }
        if let Some(nudge) = opts.head_nudge {
            if nudge.layer == layer && nudge.head == head {
                let numel = tape.tensor(current).numel();
                if nudge.entry >= numel {
                    return Err(Error::Index(format!(
                        "head nudge entry {} out of range for {numel}",
                        nudge.entry
                    )));
                }
                let mut delta = vec![0.0; numel];
                delta[nudge.entry] = nudge.delta;
                let shape = tape.shape(current).to_vec();
                let leaf = tape.constant(shape, delta)?;
                current = tape.add(current, leaf)?;
            }
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{sample_transformer, LayerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn masked_batch(n: usize, t: usize, vocab: u32, mask_id: u32) -> Minibatch {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            for j in 0..t {
                let original = (i as u32 * 13 + j as u32 * 5) % (vocab - 1);
                if j % 4 == 1 {
                    tokens.push(mask_id);
                    targets.push(original);
                } else {
                    tokens.push(original);
                    targets.push(IGNORE_TARGET);
                }
            }
        }
        Minibatch::new(tokens, targets, n, t).unwrap()
    }

    fn small_genome(attn_op: AttentionOp) -> TransformerGenome {
        TransformerGenome {
            hidden_dim: 128,
            layers: vec![
                LayerConfig { attn_op, num_heads: 2, ff_dim: 512, ff_stacks: 1 },
                LayerConfig {
                    attn_op: AttentionOp::ScaledDotProduct,
                    num_heads: 4,
                    ff_dim: 512,
                    ff_stacks: 1,
                },
            ],
        }
    }

    #[test]
    fn param_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let genome = sample_transformer(&mut rng);
            let net = build_transformer(&genome, 60, 8, &mut rng).unwrap();
            let dims = BuildDims {
                vocab: 60,
                embed_dim: genome.hidden_dim,
                hidden_dim: genome.hidden_dim,
                max_positions: 8,
            };
            assert_eq!(net.param_count(), genome.param_count(&dims).unwrap());
        }
    }

    #[test]
    fn hidden_state_shape_contract() {
        let genome = small_genome(AttentionOp::ScaledDotProduct);
        let net = build_transformer(&genome, 40, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = masked_batch(3, 8, 40, 39);
        let eval = net.forward(&batch).unwrap();
        assert_eq!(eval.layer_hidden.len(), 2);
        for hs in &eval.layer_hidden {
            assert_eq!(eval.tape.shape(*hs), &[3, 8, 128]);
        }
        // Att_h shape: [N, T, hidden/heads].
        assert_eq!(eval.tape.shape(eval.heads[0].attn_output), &[3, 8, 64]);
        // Capture completeness: one capture per head.
        assert_eq!(eval.heads.len(), genome.total_heads());
    }

    #[test]
    fn softmax_maps_row_normalized() {
        let genome = small_genome(AttentionOp::Multiplicative);
        let net = build_transformer(&genome, 40, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let eval = net.forward(&masked_batch(2, 8, 40, 39)).unwrap();
        let mut saw_map = false;
        for head in &eval.heads {
            let Some(map) = head.softmax_map else { continue };
            saw_map = true;
            for row in eval.tape.values(map).chunks(8) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        assert!(saw_map);
    }

    #[test]
    fn every_operator_builds_and_differentiates() {
        // Stratified: all six operator variants under both head counts.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for attn_op in AttentionOp::ALL {
            for num_heads in [2, 4] {
                let genome = TransformerGenome {
                    hidden_dim: 128,
                    layers: vec![
                        LayerConfig { attn_op, num_heads, ff_dim: 512, ff_stacks: 1 },
                        LayerConfig { attn_op, num_heads, ff_dim: 512, ff_stacks: 1 },
                    ],
                };
                let net = build_transformer(&genome, 30, 8, &mut rng).unwrap();
                let batch = masked_batch(2, 8, 30, 29);
                let eval = net.forward(&batch).unwrap();
                let mut tape = eval.tape;
                tape.backward(eval.loss).unwrap();
                let grad = tape.grad(eval.token_embedding).unwrap();
                assert!(grad.iter().all(|g| g.is_finite()), "op {attn_op:?}");
            }
        }
    }

    #[test]
    fn dft_on_constant_sequence_concentrates_at_zero_frequency() {
        // F applied to a time-constant signal is T*x at frequency 0 and ~0
        // elsewhere (closed-form DFT of a constant).
        let t = 8;
        let basis = dft_basis(t);
        let signal = 0.37;
        for k in 0..t {
            let out: f64 = (0..t).map(|j| basis[k * t + j] * signal).sum();
            if k == 0 {
                assert!((out - t as f64 * signal).abs() < 1e-9);
            } else {
                assert!(out.abs() < 1e-9, "frequency {k} leaked {out}");
            }
        }
    }

    #[test]
    fn requires_masked_position_per_sequence() {
        let genome = small_genome(AttentionOp::ScaledDotProduct);
        let net = build_transformer(&genome, 40, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tokens = vec![0u32; 2 * 8];
        let mut targets = vec![IGNORE_TARGET; 2 * 8];
        targets[1] = 3; // only sequence 0 has a target
        let batch = Minibatch::new(tokens, targets, 2, 8).unwrap();
        assert!(matches!(net.forward(&batch), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let genome = small_genome(AttentionOp::DynamicConv { kernel: 5 });
        let net = build_transformer(&genome, 40, 8, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let batch = masked_batch(2, 8, 40, 39);
        let a = net.forward(&batch).unwrap();
        let b = net.forward(&batch).unwrap();
        assert_eq!(a.tape.values(a.loss), b.tape.values(b.loss));
    }

    #[test]
    fn attention_weight_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck;
        let genome = small_genome(AttentionOp::ScaledDotProduct);
        let mut net = build_transformer(&genome, 24, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let batch = masked_batch(2, 8, 24, 23);
        let eval = net.forward(&batch).unwrap();
        let mut tape = eval.tape;
        tape.backward(eval.loss).unwrap();

        let name = "layer0.attn.wq";
        let id = bound_param(&eval.params, name).unwrap();
        let analytic = tape.grad(id).unwrap().to_vec();
        let point = net.params.get(name).unwrap().values().to_vec();
        // Sample a handful of coordinates; the full tensor is large.
        let coords = [0usize, 7, 129, 1000, 9000];
        let mut worst = 0.0f64;
        for &c in &coords {
            let fd = gradcheck::central_diff(
                |v| {
                    net.param_mut(name).unwrap().values_mut()[c] = v;
                    let e = net.forward(&batch).unwrap();
                    e.tape.values(e.loss)[0]
                },
                point[c],
                1e-5,
            );
            net.param_mut(name).unwrap().values_mut()[c] = point[c];
            if fd.abs().max(analytic[c].abs()) > 1e-7 {
                worst = worst.max(gradcheck::rel_err(analytic[c], fd, 1e-7));
            }
        }
        assert!(worst < 1e-4, "gradient mismatch {worst}");
    }
}
