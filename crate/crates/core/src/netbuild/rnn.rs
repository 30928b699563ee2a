//! RNN instantiation: an input embedding, three stacked copies of the
//! genome's cell (independent parameters), and a next-token projection.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::genome::{BuildDims, CellNodeOp, CellSource, RnnCellGenome};
use crate::{Error, Result};
use rand::Rng;

use super::{bound_param, ActivationCapture, ForwardOpts, Minibatch, NamedParam, ParamSet};

const STACKED_CELLS: usize = 3;

/// A cell-DAG RNN at random initialization.
pub struct RnnNetwork {
    genome: RnnCellGenome,
    vocab: usize,
    embed_dim: usize,
    hidden_dim: usize,
    topo: Vec<usize>,
    params: ParamSet,
}

/// Everything one forward pass produces, still attached to its tape so
/// gradients can be pulled afterwards.
pub struct RnnEval {
    pub tape: Tape,
    pub loss: TensorId,
    /// Embedded inputs per timestep, each [N, embed_dim].
    pub embedded_steps: Vec<TensorId>,
    /// Final-timestep hidden state of each stacked layer, [N, hidden].
    pub hidden_states: [TensorId; STACKED_CELLS],
    /// Bound parameter leaves, registry order.
    pub params: Vec<(String, TensorId)>,
    /// Activation node outputs across all layers and timesteps.
    pub activation_captures: Vec<ActivationCapture>,
    pub batch_n: usize,
    pub batch_t: usize,
}

/// Build an RNN from a genome. All parameters are initialized uniformly in
/// [-1/sqrt(hidden), +1/sqrt(hidden)]; deterministic given the rng state.
pub fn build_rnn(
    genome: &RnnCellGenome,
    vocab: usize,
    embed_dim: usize,
    hidden_dim: usize,
    rng: &mut impl Rng,
) -> Result<RnnNetwork> {
    genome.validate()?;
    let dims = BuildDims { vocab, embed_dim, hidden_dim, max_positions: 1 };
    dims.validate()?;
    if embed_dim != hidden_dim {
        // Only linear nodes can consume the embedding directly when widths
        // differ; everything else is hidden-width math.
        for (i, node) in genome.nodes.iter().enumerate() {
            if node.op != CellNodeOp::Linear && node.inputs.contains(&CellSource::X) {
                return Err(Error::Dimension(format!(
                    "node {i} ({}) reads x_t directly but embed_dim {embed_dim} != hidden_dim {hidden_dim}",
                    node.op.token()
                )));
            }
        }
    }

    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let mut params = ParamSet::default();
    params.add_uniform("embedding", vec![vocab, embed_dim], bound, rng);
    for layer in 0..STACKED_CELLS {
        let x_dim = if layer == 0 { embed_dim } else { hidden_dim };
        for (k, node) in genome.nodes.iter().enumerate() {
            if node.op != CellNodeOp::Linear {
                continue;
            }
            for (j, src) in node.inputs.iter().enumerate() {
                let in_dim = match src {
                    CellSource::X => x_dim,
                    _ => hidden_dim,
                };
                params.add_uniform(
                    format!("layer{layer}.node{k}.w{j}"),
                    vec![in_dim, hidden_dim],
                    bound,
                    rng,
                );
            }
            params.add_uniform(format!("layer{layer}.node{k}.b"), vec![hidden_dim], bound, rng);
        }
    }
    params.add_uniform("output.w", vec![hidden_dim, vocab], bound, rng);
    params.add_uniform("output.b", vec![vocab], bound, rng);

    Ok(RnnNetwork {
        topo: topo_order(genome),
        genome: genome.clone(),
        vocab,
        embed_dim,
        hidden_dim,
        params,
    })
}

/// Node indices in dependency order (inputs before consumers).
fn topo_order(genome: &RnnCellGenome) -> Vec<usize> {
    let n = genome.nodes.len();
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    // Repeated passes; the genome is acyclic and small.
    while order.len() < n {
        for i in 0..n {
            if done[i] {
                continue;
            }
            let ready = genome.nodes[i].inputs.iter().all(|src| match src {
                CellSource::Node(j) => done[*j],
                _ => true,
            });
            if ready {
                done[i] = true;
                order.push(i);
            }
        }
    }
    order
}

impl RnnNetwork {
    pub fn genome(&self) -> &RnnCellGenome {
        &self.genome
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &[NamedParam] {
        self.params.items()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Total trainable scalars (registry sum).
    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    /// Standard deviation of the embedded batch, for scaling input noise.
    pub fn embed_std(&self, batch: &Minibatch) -> f64 {
        let table = self.params.get("embedding").expect("embedding present").values();
        let e = self.embed_dim;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let count = (batch.n() * batch.seq_len() * e) as f64;
        for &id in batch.tokens() {
            for &v in &table[id as usize * e..(id as usize + 1) * e] {
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / count;
        (sum_sq / count - mean * mean).max(0.0).sqrt()
    }

    pub fn forward(&self, batch: &Minibatch) -> Result<RnnEval> {
        self.forward_with(batch, &ForwardOpts::default())
    }

    /// Run the unrolled network: next-token cross-entropy averaged over batch
    /// and time, with hidden states captured at the final timestep of each of
    /// the stacked layers.
    pub fn forward_with(&self, batch: &Minibatch, opts: &ForwardOpts) -> Result<RnnEval> {
        batch.validate_ids(self.vocab)?;
        if batch.targets().contains(&super::IGNORE_TARGET) {
            return Err(Error::Contract(
                "RNN forward expects next-token targets at every position".into(),
            ));
        }
        let (n, t_len, e, h) = (batch.n(), batch.seq_len(), self.embed_dim, self.hidden_dim);
        if let Some(noise) = opts.embed_noise {
            if noise.len() != n * t_len * e {
                return Err(Error::Contract(format!(
                    "embedding noise has {} entries, expected {}",
                    noise.len(),
                    n * t_len * e
                )));
            }
        }

        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let embedding = bound_param(&params, "embedding").expect("embedding bound");

        // Per-layer recurrent state, zero-initialized constants.
        let zeros = Tensor::zeros(vec![n, h])?;
        let mut hidden: Vec<TensorId> = (0..STACKED_CELLS).map(|_| tape.leaf(zeros.clone())).collect();
        let mut cell: Vec<Option<TensorId>> = if self.genome.uses_cell_state() {
            (0..STACKED_CELLS).map(|_| Some(tape.leaf(zeros.clone()))).collect()
        } else {
            vec![None; STACKED_CELLS]
        };

        let mut embedded_steps = Vec::with_capacity(t_len);
        let mut activation_captures = Vec::new();
        let mut top_states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ids: Vec<usize> = (0..n).map(|i| batch.token(i, t) as usize).collect();
            let mut x = tape.gather_rows(embedding, &ids)?;
            if let Some(noise) = opts.embed_noise {
                let mut slice = vec![0.0; n * e];
                for i in 0..n {
                    let src = (i * t_len + t) * e;
                    slice[i * e..(i + 1) * e].copy_from_slice(&noise[src..src + e]);
                }
                let noise_leaf = tape.constant(vec![n, e], slice)?;
                x = tape.add(x, noise_leaf)?;
            }
            embedded_steps.push(x);

            let mut layer_input = x;
            for layer in 0..STACKED_CELLS {
                let (h_new, c_new) = self.eval_cell(
                    &mut tape,
                    &params,
                    layer,
                    layer_input,
                    hidden[layer],
                    cell[layer],
                    t,
                    &mut activation_captures,
                )?;
                hidden[layer] = h_new;
                cell[layer] = c_new;
                layer_input = h_new;
            }
            top_states.push(hidden[STACKED_CELLS - 1]);
        }

        // Next-token loss over all (input, timestep) rows, t-major to match
        // the stacked logits.
        let stacked = tape.concat_rows(&top_states)?;
        let w_out = bound_param(&params, "output.w").expect("output.w bound");
        let b_out = bound_param(&params, "output.b").expect("output.b bound");
        let logits = tape.matmul(stacked, w_out)?;
        let logits = tape.add_bias(logits, b_out)?;
        let mut targets = Vec::with_capacity(n * t_len);
        for t in 0..t_len {
            for i in 0..n {
                targets.push(batch.target(i, t) as usize);
            }
        }
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.check_finite(loss, "rnn loss")?;

        Ok(RnnEval {
            loss,
            embedded_steps,
            hidden_states: [hidden[0], hidden[1], hidden[2]],
            params,
            activation_captures,
            batch_n: n,
            batch_t: t_len,
            tape,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_cell(
        &self,
        tape: &mut Tape,
        params: &[(String, TensorId)],
        layer: usize,
        x: TensorId,
        h_prev: TensorId,
        c_prev: Option<TensorId>,
        t: usize,
        captures: &mut Vec<ActivationCapture>,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let mut computed: Vec<Option<TensorId>> = vec![None; self.genome.nodes.len()];
        for &k in &self.topo {
            let node = &self.genome.nodes[k];
            let resolve = |src: &CellSource| -> TensorId {
                match src {
                    CellSource::X => x,
                    CellSource::HPrev => h_prev,
                    CellSource::CPrev => c_prev.expect("validated cell-state usage"),
                    CellSource::Node(j) => computed[*j].expect("topological order"),
                }
            };
            let out = match node.op {
                CellNodeOp::Linear => {
                    let mut acc: Option<TensorId> = None;
                    for (j, src) in node.inputs.iter().enumerate() {
                        let w = bound_param(params, &format!("layer{layer}.node{k}.w{j}"))
                            .expect("linear weight bound");
                        let term = tape.matmul(resolve(src), w)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, term)?,
                            None => term,
                        });
                    }
                    let b = bound_param(params, &format!("layer{layer}.node{k}.b"))
                        .expect("linear bias bound");
                    tape.add_bias(acc.expect("linear has inputs"), b)?
                }
                CellNodeOp::Sum => {
                    let mut acc = resolve(&node.inputs[0]);
                    for src in &node.inputs[1..] {
                        acc = tape.add(acc, resolve(src))?;
                    }
                    acc
                }
                CellNodeOp::Product => {
                    let mut acc = resolve(&node.inputs[0]);
                    for src in &node.inputs[1..] {
                        acc = tape.mul(acc, resolve(src))?;
                    }
                    acc
                }
                CellNodeOp::Tanh => {
                    let y = tape.tanh(resolve(&node.inputs[0]));
                    captures.push(ActivationCapture { id: y, threshold: 0.0 });
                    y
                }
                CellNodeOp::Sigmoid => {
                    let y = tape.sigmoid(resolve(&node.inputs[0]));
                    captures.push(ActivationCapture { id: y, threshold: 0.5 });
                    y
                }
            };
            tape.check_finite(out, &format!("layer {layer} node {k} at t={t}"))?;
            computed[k] = Some(out);
        }
        let h_out = computed[self.genome.output].expect("output computed");
        let c_out = self.genome.c_output.map(|c| computed[c].expect("cell output computed"));
        Ok((h_out, c_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::sample_rnn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(n: usize, t: usize, vocab: u32) -> Minibatch {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            for j in 0..t {
                tokens.push((i as u32 * 7 + j as u32) % vocab);
                targets.push((i as u32 * 7 + j as u32 + 1) % vocab);
            }
        }
        Minibatch::new(tokens, targets, n, t).unwrap()
    }

    #[test]
    fn vanilla_param_count_matches_genome() {
        let genome = RnnCellGenome::vanilla();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_rnn(&genome, 50, 16, 16, &mut rng).unwrap();
        let dims = BuildDims { vocab: 50, embed_dim: 16, hidden_dim: 16, max_positions: 1 };
        assert_eq!(net.param_count(), genome.param_count(&dims).unwrap());
    }

    #[test]
    fn sampled_genomes_param_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let genome = sample_rnn(&mut rng, 10).unwrap();
            let net = build_rnn(&genome, 30, 8, 12, &mut rng).unwrap();
            let dims = BuildDims { vocab: 30, embed_dim: 8, hidden_dim: 12, max_positions: 1 };
            assert_eq!(net.param_count(), genome.param_count(&dims).unwrap());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let genome = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample_rnn(&mut rng, 8).unwrap()
        };
        let a = build_rnn(&genome, 20, 8, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build_rnn(&genome, 20, 8, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.values(), pb.tensor.values());
        }
    }

    #[test]
    fn invalid_genome_rejected() {
        let mut genome = RnnCellGenome::vanilla();
        genome.nodes[0].inputs.push(CellSource::Node(1)); // cycle
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(build_rnn(&genome, 20, 8, 8, &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn untrained_loss_near_log_vocab() {
        let genome = RnnCellGenome::vanilla();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = build_rnn(&genome, 50, 16, 16, &mut rng).unwrap();
        let batch = toy_batch(8, 6, 50);
        let eval = net.forward(&batch).unwrap();
        let loss = eval.tape.values(eval.loss)[0];
        let expected = (50.0f64).ln();
        assert!(
            (loss - expected).abs() / expected < 0.15,
            "loss {loss} too far from ln(vocab) {expected}"
        );
    }

    #[test]
    fn hidden_state_shapes() {
        let genome = RnnCellGenome::vanilla();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = build_rnn(&genome, 20, 8, 8, &mut rng).unwrap();
        let batch = toy_batch(4, 5, 20);
        let eval = net.forward(&batch).unwrap();
        for state in eval.hidden_states {
            assert_eq!(eval.tape.shape(state), &[4, 8]);
        }
        assert_eq!(eval.embedded_steps.len(), 5);
    }

    #[test]
    fn forward_is_deterministic() {
        let genome = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            sample_rnn(&mut rng, 9).unwrap()
        };
        let net = build_rnn(&genome, 25, 8, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let batch = toy_batch(3, 4, 25);
        let a = net.forward(&batch).unwrap();
        let b = net.forward(&batch).unwrap();
        assert_eq!(a.tape.values(a.loss), b.tape.values(b.loss));
        for (x, y) in a.hidden_states.iter().zip(b.hidden_states.iter()) {
            assert_eq!(a.tape.values(*x), b.tape.values(*y));
        }
    }

    #[test]
    fn cell_state_genomes_run() {
        // Find a sampled genome that uses c and check it evaluates.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let genome = loop {
            let g = sample_rnn(&mut rng, 10).unwrap();
            if g.uses_cell_state() {
                break g;
            }
        };
        let net = build_rnn(&genome, 20, 8, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let eval = net.forward(&toy_batch(3, 4, 20)).unwrap();
        assert!(eval.tape.values(eval.loss)[0].is_finite());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck;
        let genome = {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            sample_rnn(&mut rng, 7).unwrap()
        };
        let mut net = build_rnn(&genome, 12, 6, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let batch = toy_batch(2, 3, 12);

        let eval = net.forward(&batch).unwrap();
        let mut tape = eval.tape;
        tape.backward(eval.loss).unwrap();

        // Check one full parameter tensor per kind.
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        for name in names.iter().take(4).chain(names.iter().rev().take(1)) {
            let id = bound_param(&eval.params, name).unwrap();
            let analytic = tape.grad(id).unwrap().to_vec();
            let point = net.params.get(name).unwrap().values().to_vec();
            let worst = gradcheck::max_grad_rel_err(
                |vals| {
                    net.param_mut(name).unwrap().values_mut().copy_from_slice(vals);
                    let e = net.forward(&batch).unwrap();
                    e.tape.values(e.loss)[0]
                },
                &point,
                &analytic,
                1e-5,
                // Entries below this are dominated by FD cancellation noise.
                1e-5,
            );
            net.param_mut(name).unwrap().values_mut().copy_from_slice(&point);
            assert!(worst < 1e-4, "gradient mismatch {worst} on {name}");
        }
    }
}
