//! Training-free metrics. Each metric is a pure function of an untrained
//! network, a minibatch, and the options (seed, normalization); degenerate
//! inputs yield flagged scores rather than errors so sweeps can proceed and
//! report discard counts.
//!
//! Normalization contract: every mean-aggregated metric computes its
//! normalized (mean) form canonically; the non-normalized variant is that
//! value times the feature count, so `non_normalized == normalized * count`
//! holds exactly.

pub mod kernels;

pub use kernels::{DegenerateReason, KERNEL_OFFSET};

use crate::autodiff::{linalg, Tensor};
use crate::genome::Genome;
use crate::netbuild::{
    ActivationCodes, ForwardOpts, Minibatch, MixingSource, RnnEval, RnnNetwork, TransformerEval,
    TransformerNetwork,
};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

/// Identifier of one training-free metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricId {
    JacobianCovariance,
    JacobianCosine,
    JacobianLargeNoise,
    JacobianMoreNoised,
    SynapticSaliency,
    ActivationDistance,
    SynapticDiversity,
    HiddenCovariance { layer: usize },
    AttentionConfidence,
    SoftmaxConfidence,
    AttentionImportance,
    ParameterCount,
}

impl MetricId {
    pub fn as_str(&self) -> String {
        match self {
            MetricId::JacobianCovariance => "jacobian_covariance".into(),
            MetricId::JacobianCosine => "jacobian_cosine".into(),
            MetricId::JacobianLargeNoise => "jacobian_large_noise".into(),
            MetricId::JacobianMoreNoised => "jacobian_more_noised".into(),
            MetricId::SynapticSaliency => "synaptic_saliency".into(),
            MetricId::ActivationDistance => "activation_distance".into(),
            MetricId::SynapticDiversity => "synaptic_diversity".into(),
            MetricId::HiddenCovariance { layer } => format!("hidden_covariance_l{layer}"),
            MetricId::AttentionConfidence => "attention_confidence".into(),
            MetricId::SoftmaxConfidence => "softmax_confidence".into(),
            MetricId::AttentionImportance => "attention_importance".into(),
            MetricId::ParameterCount => "parameter_count".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "jacobian_covariance" => MetricId::JacobianCovariance,
            "jacobian_cosine" => MetricId::JacobianCosine,
            "jacobian_large_noise" => MetricId::JacobianLargeNoise,
            "jacobian_more_noised" => MetricId::JacobianMoreNoised,
            "synaptic_saliency" => MetricId::SynapticSaliency,
            "activation_distance" => MetricId::ActivationDistance,
            "synaptic_diversity" => MetricId::SynapticDiversity,
            "hidden_covariance_l0" => MetricId::HiddenCovariance { layer: 0 },
            "hidden_covariance_l1" => MetricId::HiddenCovariance { layer: 1 },
            "hidden_covariance_l2" => MetricId::HiddenCovariance { layer: 2 },
            "attention_confidence" => MetricId::AttentionConfidence,
            "softmax_confidence" => MetricId::SoftmaxConfidence,
            "attention_importance" => MetricId::AttentionImportance,
            "parameter_count" => MetricId::ParameterCount,
            _ => return None,
        })
    }
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_str())
    }
}

/// Which search space a metric applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applicability {
    Rnn,
    Transformer,
    Both,
}

impl Applicability {
    pub fn accepts_rnn(&self) -> bool {
        matches!(self, Applicability::Rnn | Applicability::Both)
    }

    pub fn accepts_transformer(&self) -> bool {
        matches!(self, Applicability::Transformer | Applicability::Both)
    }
}

/// Static description of a metric.
#[derive(Debug, Clone)]
pub struct MetricDescriptor {
    pub id: MetricId,
    pub applicable_to: Applicability,
    pub needs_gradients: bool,
    /// What the feature-count normalizer divides by.
    pub normalizer: &'static str,
}

/// All metrics, one descriptor each.
pub fn registry() -> Vec<MetricDescriptor> {
    use Applicability::*;
    use MetricId::*;
    vec![
        MetricDescriptor { id: JacobianCovariance, applicable_to: Both, needs_gradients: true, normalizer: "batch size" },
        MetricDescriptor { id: JacobianCosine, applicable_to: Both, needs_gradients: true, normalizer: "batch size" },
        MetricDescriptor { id: JacobianLargeNoise, applicable_to: Both, needs_gradients: true, normalizer: "batch size" },
        MetricDescriptor { id: JacobianMoreNoised, applicable_to: Both, needs_gradients: true, normalizer: "batch size" },
        MetricDescriptor { id: SynapticSaliency, applicable_to: Both, needs_gradients: true, normalizer: "parameter count" },
        MetricDescriptor { id: ActivationDistance, applicable_to: Both, needs_gradients: false, normalizer: "activation units" },
        MetricDescriptor { id: SynapticDiversity, applicable_to: Transformer, needs_gradients: true, normalizer: "head count" },
        MetricDescriptor { id: HiddenCovariance { layer: 0 }, applicable_to: Rnn, needs_gradients: false, normalizer: "batch size" },
        MetricDescriptor { id: HiddenCovariance { layer: 1 }, applicable_to: Rnn, needs_gradients: false, normalizer: "batch size" },
        MetricDescriptor { id: HiddenCovariance { layer: 2 }, applicable_to: Rnn, needs_gradients: false, normalizer: "batch size" },
        MetricDescriptor { id: AttentionConfidence, applicable_to: Transformer, needs_gradients: false, normalizer: "head count" },
        MetricDescriptor { id: SoftmaxConfidence, applicable_to: Transformer, needs_gradients: false, normalizer: "softmax head count" },
        MetricDescriptor { id: AttentionImportance, applicable_to: Transformer, needs_gradients: true, normalizer: "head count" },
        MetricDescriptor { id: ParameterCount, applicable_to: Both, needs_gradients: false, normalizer: "none" },
    ]
}

pub fn descriptor(id: MetricId) -> MetricDescriptor {
    registry().into_iter().find(|d| d.id == id).expect("every metric is registered")
}

/// A metric value: finite, or flagged with a reason code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreValue {
    Finite(f64),
    Degenerate(DegenerateReason),
}

impl ScoreValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            ScoreValue::Finite(v) => Some(*v),
            ScoreValue::Degenerate(_) => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, ScoreValue::Degenerate(_))
    }
}

/// A named metric's output for one architecture evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScore {
    pub metric: MetricId,
    pub value: ScoreValue,
    pub normalized: bool,
    pub seed: u64,
    pub minibatch_id: u32,
    pub layer_index: Option<usize>,
}

/// Evaluation options: normalization plus provenance stamped into scores.
/// `seed` and `minibatch_id` also salt the noise draws of the noised
/// Jacobian metrics.
#[derive(Debug, Clone, Copy)]
pub struct MetricOpts {
    pub normalized: bool,
    pub seed: u64,
    pub minibatch_id: u32,
    pub noise_level: f64,
}

impl Default for MetricOpts {
    fn default() -> Self {
        MetricOpts { normalized: true, seed: 0, minibatch_id: 0, noise_level: 1.0 }
    }
}

/// Noise regime of the noised Jacobian metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseVariant {
    /// One high-noise draw.
    Large,
    /// Average over three independent draws.
    More,
}

/// A borrowed network from either search space.
#[derive(Clone, Copy)]
pub enum Network<'a> {
    Rnn(&'a RnnNetwork),
    Transformer(&'a TransformerNetwork),
}

impl<'a> Network<'a> {
    pub fn genome(&self) -> Genome {
        match self {
            Network::Rnn(n) => Genome::Rnn(n.genome().clone()),
            Network::Transformer(n) => Genome::Transformer(n.genome().clone()),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Network::Rnn(n) => n.param_count(),
            Network::Transformer(n) => n.param_count(),
        }
    }

    pub fn is_rnn(&self) -> bool {
        matches!(self, Network::Rnn(_))
    }

    fn embed_std(&self, batch: &Minibatch) -> f64 {
        match self {
            Network::Rnn(n) => n.embed_std(batch),
            Network::Transformer(n) => n.embed_std(batch),
        }
    }

    fn embed_width(&self) -> usize {
        match self {
            Network::Rnn(n) => n.embed_dim(),
            Network::Transformer(n) => n.hidden_dim(),
        }
    }
}

impl<'a> From<&'a RnnNetwork> for Network<'a> {
    fn from(n: &'a RnnNetwork) -> Self {
        Network::Rnn(n)
    }
}

impl<'a> From<&'a TransformerNetwork> for Network<'a> {
    fn from(n: &'a TransformerNetwork) -> Self {
        Network::Transformer(n)
    }
}

/// One forward pass (either family) plus whether backward has run.
enum EvalKind {
    Rnn(RnnEval),
    Transformer(TransformerEval),
}

struct SharedEval {
    kind: EvalKind,
    grads_done: bool,
}

impl SharedEval {
    fn run(net: &Network, batch: &Minibatch, opts: &ForwardOpts, grads: bool) -> Result<Self> {
        let mut eval = match net {
            Network::Rnn(n) => {
                SharedEval { kind: EvalKind::Rnn(n.forward_with(batch, opts)?), grads_done: false }
            }
            Network::Transformer(n) => SharedEval {
                kind: EvalKind::Transformer(n.forward_with(batch, opts)?),
                grads_done: false,
            },
        };
        if grads {
            eval.ensure_grads()?;
        }
        Ok(eval)
    }

    fn ensure_grads(&mut self) -> Result<()> {
        if self.grads_done {
            return Ok(());
        }
        match &mut self.kind {
            EvalKind::Rnn(e) => e.tape.backward(e.loss)?,
            EvalKind::Transformer(e) => e.tape.backward(e.loss)?,
        }
        self.grads_done = true;
        Ok(())
    }

    /// Per-input loss Jacobian w.r.t. the input embeddings: N rows of
    /// T*width entries. An embedding the loss never touches (an
    /// architecture that ignores its input) contributes zero gradient; the
    /// correlation step then flags the zero-variance rows.
    fn jacobian_rows(&self) -> (Vec<f64>, usize, usize) {
        match &self.kind {
            EvalKind::Rnn(e) => {
                let n = e.batch_n;
                let width = e.tape.shape(e.embedded_steps[0])[1];
                let d = e.batch_t * width;
                let mut rows = vec![0.0; n * d];
                for (t, &step) in e.embedded_steps.iter().enumerate() {
                    let Some(grad) = e.tape.grad(step) else { continue };
                    for i in 0..n {
                        let dst = i * d + t * width;
                        rows[dst..dst + width].copy_from_slice(&grad[i * width..(i + 1) * width]);
                    }
                }
                (rows, n, d)
            }
            EvalKind::Transformer(e) => {
                let n = e.batch_n;
                match e.tape.grad(e.token_embedding) {
                    Some(grad) => {
                        let d = grad.len() / n;
                        (grad.to_vec(), n, d)
                    }
                    None => {
                        let d = e.tape.tensor(e.token_embedding).numel() / n;
                        (vec![0.0; n * d], n, d)
                    }
                }
            }
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn noise_rng_seed(opts: &MetricOpts, draw: u64) -> u64 {
    splitmix(opts.seed ^ splitmix(opts.minibatch_id as u64 ^ splitmix(draw)))
}

/// Evaluate several metrics on one (network, minibatch) pair, sharing
/// forward and backward passes where possible.
pub fn evaluate_many(
    net: &Network,
    batch: &Minibatch,
    ids: &[MetricId],
    opts: &MetricOpts,
) -> Result<Vec<MetricScore>> {
    if ids.is_empty() {
        return Err(Error::Contract("no metrics requested".into()));
    }
    for id in ids {
        let d = descriptor(*id);
        let ok = match net {
            Network::Rnn(_) => d.applicable_to.accepts_rnn(),
            Network::Transformer(_) => d.applicable_to.accepts_transformer(),
        };
        if !ok {
            return Err(Error::Contract(format!(
                "metric {id} does not apply to the {} search space",
                if net.is_rnn() { "rnn" } else { "transformer" }
            )));
        }
    }

    let needs_clean = ids.iter().any(|id| {
        !matches!(
            id,
            MetricId::ParameterCount | MetricId::JacobianLargeNoise | MetricId::JacobianMoreNoised
        )
    });
    let needs_clean_grads = ids.iter().any(|id| {
        descriptor(*id).needs_gradients
            && !matches!(id, MetricId::JacobianLargeNoise | MetricId::JacobianMoreNoised)
    });

    let clean = if needs_clean {
        Some(SharedEval::run(net, batch, &ForwardOpts::default(), needs_clean_grads)?)
    } else {
        None
    };

    // The noised variants share draw 0.
    let draws_needed = if ids.contains(&MetricId::JacobianMoreNoised) {
        3
    } else if ids.contains(&MetricId::JacobianLargeNoise) {
        1
    } else {
        0
    };
    let mut noise_scores: Vec<ScoreValue> = Vec::with_capacity(draws_needed);
    for draw in 0..draws_needed {
        noise_scores.push(noised_cosine_once(net, batch, opts, draw as u64)?);
    }

    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let value = match id {
            MetricId::ParameterCount => ScoreValue::Finite(net.param_count() as f64),
            MetricId::JacobianLargeNoise => finalize(noise_scores[0], batch.n() as f64, opts),
            MetricId::JacobianMoreNoised => {
                let mut total = 0.0;
                let mut flagged = None;
                for s in &noise_scores[..3] {
                    match s {
                        ScoreValue::Finite(v) => total += v,
                        ScoreValue::Degenerate(r) => flagged = Some(*r),
                    }
                }
                let combined = match flagged {
                    Some(r) => ScoreValue::Degenerate(r),
                    None => ScoreValue::Finite(total / 3.0),
                };
                finalize(combined, batch.n() as f64, opts)
            }
            _ => {
                let eval = clean.as_ref().expect("clean eval prepared");
                clean_metric(*id, net, batch, eval, opts)?
            }
        };
        out.push(MetricScore {
            metric: *id,
            value,
            normalized: opts.normalized,
            seed: opts.seed,
            minibatch_id: opts.minibatch_id,
            layer_index: match id {
                MetricId::HiddenCovariance { layer } => Some(*layer),
                _ => None,
            },
        });
    }
    Ok(out)
}

/// Canonical mean-form value -> emitted value under the normalization flag.
/// The non-normalized variant is exactly `mean_form * feature_count`.
fn finalize(mean_form: ScoreValue, feature_count: f64, opts: &MetricOpts) -> ScoreValue {
    match mean_form {
        ScoreValue::Finite(v) if !opts.normalized => ScoreValue::Finite(v * feature_count),
        other => other,
    }
}

fn clean_metric(
    id: MetricId,
    net: &Network,
    batch: &Minibatch,
    eval: &SharedEval,
    opts: &MetricOpts,
) -> Result<ScoreValue> {
    let n = batch.n() as f64;
    match id {
        MetricId::JacobianCovariance => {
            let (rows, rn, d) = eval.jacobian_rows();
            Ok(finalize(correlation_kernel_score(&rows, rn, d)?, n, opts))
        }
        MetricId::JacobianCosine => {
            let (rows, rn, d) = eval.jacobian_rows();
            let score = match kernels::cosine_score(&rows, rn, d) {
                Ok(v) => ScoreValue::Finite(v / n),
                Err(r) => ScoreValue::Degenerate(r),
            };
            Ok(finalize(score, n, opts))
        }
        MetricId::SynapticSaliency => {
            let (tape, params) = match &eval.kind {
                EvalKind::Rnn(e) => (&e.tape, &e.params),
                EvalKind::Transformer(e) => (&e.tape, &e.params),
            };
            let total = kernels::abs_grad_weight_sum(tape, params);
            let count = net.param_count() as f64;
            let score = if total.is_finite() {
                ScoreValue::Finite(total / count)
            } else {
                ScoreValue::Degenerate(DegenerateReason::NonFinite)
            };
            Ok(finalize(score, count, opts))
        }
        MetricId::ActivationDistance => {
            let (tape, captures, batch_n) = match &eval.kind {
                EvalKind::Rnn(e) => (&e.tape, &e.activation_captures, e.batch_n),
                EvalKind::Transformer(e) => (&e.tape, &e.activation_captures, e.batch_n),
            };
            let codes = ActivationCodes::from_captures(tape, captures, batch_n);
            if codes.is_empty() {
                return Ok(ScoreValue::Degenerate(DegenerateReason::Inapplicable));
            }
            let count = codes.bits_per_input() as f64;
            let kernel = codes.kernel();
            let score = match linalg::log_abs_det(&kernel, batch_n)? {
                Some(log_det) => ScoreValue::Finite(log_det / count),
                None => ScoreValue::Degenerate(DegenerateReason::SingularKernel),
            };
            Ok(finalize(score, count, opts))
        }
        MetricId::HiddenCovariance { layer } => {
            let EvalKind::Rnn(e) = &eval.kind else {
                return Err(Error::Contract("hidden covariance needs an RNN".into()));
            };
            if layer >= e.hidden_states.len() {
                return Err(Error::Contract(format!("layer index {layer} out of range")));
            }
            let state = e.hidden_states[layer];
            let shape = e.tape.shape(state);
            let (rn, d) = (shape[0], shape[1]);
            Ok(finalize(correlation_kernel_score(e.tape.values(state), rn, d)?, n, opts))
        }
        MetricId::SynapticDiversity => {
            let EvalKind::Transformer(e) = &eval.kind else {
                return Err(Error::Contract("synaptic diversity needs a transformer".into()));
            };
            let mut total = 0.0;
            for m in &e.mixing {
                let pair = match &m.source {
                    MixingSource::FixedBasis => None, // zero gradient, zero term
                    MixingSource::Param { id } => {
                        let shape = e.tape.shape(*id).to_vec();
                        e.tape.grad(*id).map(|g| {
                            (
                                Tensor::from_values(shape.clone(), e.tape.values(*id).to_vec()),
                                Tensor::from_values(shape, g.to_vec()),
                            )
                        })
                    }
                    MixingSource::ParamCols { id, start, len } => {
                        let shape = e.tape.shape(*id);
                        let (rows, cols) = (shape[0], shape[1]);
                        let slice = |data: &[f64]| -> Vec<f64> {
                            let mut out = Vec::with_capacity(rows * len);
                            for r in 0..rows {
                                out.extend_from_slice(
                                    &data[r * cols + start..r * cols + start + len],
                                );
                            }
                            out
                        };
                        e.tape.grad(*id).map(|g| {
                            (
                                Tensor::from_values(vec![rows, *len], slice(e.tape.values(*id))),
                                Tensor::from_values(vec![rows, *len], slice(g)),
                            )
                        })
                    }
                };
                // A parameter unreached by the loss has zero gradient and
                // contributes nothing.
                let Some((value, grad)) = pair else { continue };
                total += linalg::nuclear_norm(&grad?)? * linalg::nuclear_norm(&value?)?;
            }
            let heads = e.heads.len() as f64;
            let score = if total.is_finite() {
                ScoreValue::Finite(total / heads)
            } else {
                ScoreValue::Degenerate(DegenerateReason::NonFinite)
            };
            Ok(finalize(score, heads, opts))
        }
        MetricId::AttentionConfidence => {
            let EvalKind::Transformer(e) = &eval.kind else {
                return Err(Error::Contract("attention confidence needs a transformer".into()));
            };
            let mut total = 0.0;
            for head in &e.heads {
                total +=
                    kernels::mean_abs_max_per_input(e.tape.values(head.attn_output), e.batch_n);
            }
            let heads = e.heads.len() as f64;
            Ok(finalize(ScoreValue::Finite(total / heads), heads, opts))
        }
        MetricId::SoftmaxConfidence => {
            let EvalKind::Transformer(e) = &eval.kind else {
                return Err(Error::Contract("softmax confidence needs a transformer".into()));
            };
            let maps: Vec<_> = e.heads.iter().filter_map(|h| h.softmax_map).collect();
            if maps.is_empty() {
                return Ok(ScoreValue::Degenerate(DegenerateReason::Inapplicable));
            }
            let mut total = 0.0;
            for map in &maps {
                total += kernels::mean_abs_max_per_input(e.tape.values(*map), e.batch_n);
            }
            let heads = maps.len() as f64;
            Ok(finalize(ScoreValue::Finite(total / heads), heads, opts))
        }
        MetricId::AttentionImportance => {
            let EvalKind::Transformer(e) = &eval.kind else {
                return Err(Error::Contract("attention importance needs a transformer".into()));
            };
            let mut total = 0.0;
            for head in &e.heads {
                let values = e.tape.values(head.attn_output);
                if let Some(grads) = e.tape.grad(head.attn_output) {
                    total += kernels::abs_inner_product(values, grads);
                }
            }
            if !total.is_finite() {
                return Ok(ScoreValue::Degenerate(DegenerateReason::NonFinite));
            }
            let heads = e.heads.len() as f64;
            Ok(finalize(ScoreValue::Finite(total / heads), heads, opts))
        }
        MetricId::ParameterCount | MetricId::JacobianLargeNoise | MetricId::JacobianMoreNoised => {
            unreachable!("handled by evaluate_many")
        }
    }
}

/// Row-Pearson correlation -> eigenvalues -> kernel divergence, in mean form
/// (divided by N).
fn correlation_kernel_score(rows: &[f64], n: usize, d: usize) -> Result<ScoreValue> {
    let r = match kernels::pearson_rows(rows, n, d) {
        Ok(r) => r,
        Err(reason) => return Ok(ScoreValue::Degenerate(reason)),
    };
    let tensor = Tensor::from_values(vec![n, n], r)?;
    let eigenvalues = linalg::spectrum(&tensor)?;
    Ok(match kernels::kernel_divergence(&eigenvalues) {
        Ok(v) => ScoreValue::Finite(v / n as f64),
        Err(reason) => ScoreValue::Degenerate(reason),
    })
}

/// One noised forward pass -> cosine score in mean form.
fn noised_cosine_once(
    net: &Network,
    batch: &Minibatch,
    opts: &MetricOpts,
    draw: u64,
) -> Result<ScoreValue> {
    if opts.noise_level <= 0.0 {
        return Err(Error::Contract(format!(
            "noise level must be positive, got {}",
            opts.noise_level
        )));
    }
    let std = opts.noise_level * net.embed_std(batch);
    let len = batch.n() * batch.seq_len() * net.embed_width();
    let noise = if std > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_rng_seed(opts, draw));
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..len).map(|_| dist.sample(&mut rng)).collect()
    } else {
        vec![0.0; len]
    };
    let fwd = ForwardOpts { embed_noise: Some(&noise), ..ForwardOpts::default() };
    let eval = SharedEval::run(net, batch, &fwd, true)?;
    let (rows, n, d) = eval.jacobian_rows();
    Ok(match kernels::cosine_score(&rows, n, d) {
        Ok(v) => ScoreValue::Finite(v / n as f64),
        Err(reason) => ScoreValue::Degenerate(reason),
    })
}

fn evaluate_one(
    net: &Network,
    batch: &Minibatch,
    id: MetricId,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    Ok(evaluate_many(net, batch, &[id], opts)?.remove(0))
}

// ── Per-metric entry points ──────────────────────────────────────────

pub fn jacobian_covariance(
    net: &Network,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(net, batch, MetricId::JacobianCovariance, opts)
}

pub fn jacobian_cosine(net: &Network, batch: &Minibatch, opts: &MetricOpts) -> Result<MetricScore> {
    evaluate_one(net, batch, MetricId::JacobianCosine, opts)
}

/// Noised Jacobian cosine. `Large` takes one draw at `noise_level`; `More`
/// averages three independent draws.
pub fn jacobian_noised(
    net: &Network,
    batch: &Minibatch,
    noise_level: f64,
    variant: NoiseVariant,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    let opts = MetricOpts { noise_level, ..*opts };
    let id = match variant {
        NoiseVariant::Large => MetricId::JacobianLargeNoise,
        NoiseVariant::More => MetricId::JacobianMoreNoised,
    };
    evaluate_one(net, batch, id, &opts)
}

pub fn synaptic_saliency(
    net: &Network,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(net, batch, MetricId::SynapticSaliency, opts)
}

pub fn activation_distance(
    net: &Network,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(net, batch, MetricId::ActivationDistance, opts)
}

pub fn synaptic_diversity(
    net: &TransformerNetwork,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(&Network::Transformer(net), batch, MetricId::SynapticDiversity, opts)
}

pub fn hidden_covariance(
    net: &RnnNetwork,
    batch: &Minibatch,
    layer_index: usize,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    if layer_index > 2 {
        return Err(Error::Contract(format!("layer index {layer_index} out of range 0..=2")));
    }
    evaluate_one(&Network::Rnn(net), batch, MetricId::HiddenCovariance { layer: layer_index }, opts)
}

pub fn attention_confidence(
    net: &TransformerNetwork,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(&Network::Transformer(net), batch, MetricId::AttentionConfidence, opts)
}

pub fn softmax_confidence(
    net: &TransformerNetwork,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(&Network::Transformer(net), batch, MetricId::SoftmaxConfidence, opts)
}

pub fn attention_importance(
    net: &TransformerNetwork,
    batch: &Minibatch,
    opts: &MetricOpts,
) -> Result<MetricScore> {
    evaluate_one(&Network::Transformer(net), batch, MetricId::AttentionImportance, opts)
}

/// The parameter-count baseline; never normalized.
pub fn parameter_count_metric(net: &Network, opts: &MetricOpts) -> MetricScore {
    MetricScore {
        metric: MetricId::ParameterCount,
        value: ScoreValue::Finite(net.param_count() as f64),
        normalized: opts.normalized,
        seed: opts.seed,
        minibatch_id: opts.minibatch_id,
        layer_index: None,
    }
}

#[cfg(test)]
mod tests;
