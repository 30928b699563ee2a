use super::*;
use crate::genome::{sample_rnn, AttentionOp, LayerConfig, RnnCellGenome, TransformerGenome};
use crate::netbuild::{build_rnn, build_transformer, HeadScale, IGNORE_TARGET};
use rand_chacha::ChaCha8Rng;

fn next_token_batch(n: usize, t: usize, vocab: u32) -> Minibatch {
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for i in 0..n {
        for j in 0..t {
            tokens.push((i as u32 * 11 + j as u32 * 3 + 1) % vocab);
            targets.push((i as u32 * 11 + j as u32 * 3 + 2) % vocab);
        }
    }
    Minibatch::new(tokens, targets, n, t).unwrap()
}

fn masked_batch(n: usize, t: usize, vocab: u32) -> Minibatch {
    let mask_id = vocab - 1;
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

fn rnn_net(seed: u64) -> RnnNetwork {
    let genome = sample_rnn(&mut ChaCha8Rng::seed_from_u64(seed), 8).unwrap();
    build_rnn(&genome, 24, 8, 8, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD)).unwrap()
}

fn tf_genome(attn_op: AttentionOp, heads: usize) -> TransformerGenome {
    TransformerGenome {
        hidden_dim: 128,
        layers: vec![
            LayerConfig { attn_op, num_heads: heads, ff_dim: 512, ff_stacks: 1 },
            LayerConfig {
                attn_op: AttentionOp::ScaledDotProduct,
                num_heads: 2,
                ff_dim: 512,
                ff_stacks: 1,
            },
        ],
    }
}

fn tf_net(genome: &TransformerGenome, seed: u64) -> TransformerNetwork {
    build_transformer(genome, 24, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn registry_ids_unique_and_parse() {
    let reg = registry();
    let mut seen = std::collections::HashSet::new();
    for d in &reg {
        assert!(seen.insert(d.id.as_str()), "duplicate id {}", d.id);
        assert_eq!(MetricId::parse(&d.id.as_str()), Some(d.id));
    }
    // Every metric family is present.
    for required in [
        "jacobian_covariance",
        "jacobian_cosine",
        "jacobian_large_noise",
        "jacobian_more_noised",
        "synaptic_saliency",
        "activation_distance",
        "synaptic_diversity",
        "hidden_covariance_l0",
        "attention_confidence",
        "softmax_confidence",
        "attention_importance",
        "parameter_count",
    ] {
        assert!(seen.contains(required), "missing {required}");
    }
}

#[test]
fn batch_of_one_is_rejected() {
    assert!(matches!(Minibatch::new(vec![0], vec![0], 1, 1), Err(Error::Contract(_))));
}

#[test]
fn duplicated_inputs_reproduce_hand_eigendecomposition() {
    // Two identical sequences give identical Jacobian rows: R is all-ones,
    // eigenvalues {2, 0}, and the non-normalized score matches the direct
    // kernel-divergence formula.
    let net = rnn_net(3);
    let t = 5;
    let row: Vec<u32> = (0..t as u32).map(|j| (j * 7 + 1) % 24).collect();
    let tokens: Vec<u32> = row.iter().chain(row.iter()).cloned().collect();
    let targets: Vec<u32> = tokens.iter().map(|&x| (x + 1) % 24).collect();
    let batch = Minibatch::new(tokens, targets, 2, t).unwrap();

    let opts = MetricOpts { normalized: false, ..Default::default() };
    let score = jacobian_covariance(&Network::Rnn(&net), &batch, &opts).unwrap();
    let k = KERNEL_OFFSET;
    let oracle = -((2.0 + k).ln() + 1.0 / (2.0 + k) + k.ln() + 1.0 / k);
    let got = score.value.finite().expect("finite");
    assert!(
        (got - oracle).abs() <= 1e-6 * oracle.abs(),
        "score {got} vs hand formula {oracle}"
    );
}

#[test]
fn duplicated_inputs_make_activation_kernel_singular() {
    let net = rnn_net(4);
    let t = 4;
    let row: Vec<u32> = (0..t as u32).map(|j| (j * 5 + 2) % 24).collect();
    let tokens: Vec<u32> = row.iter().chain(row.iter()).cloned().collect();
    let targets: Vec<u32> = tokens.iter().map(|&x| (x + 1) % 24).collect();
    let batch = Minibatch::new(tokens, targets, 2, t).unwrap();

    let score = activation_distance(&Network::Rnn(&net), &batch, &MetricOpts::default()).unwrap();
    assert_eq!(score.value, ScoreValue::Degenerate(DegenerateReason::SingularKernel));
}

#[test]
fn activation_distance_finite_on_distinct_inputs() {
    let net = rnn_net(5);
    let batch = next_token_batch(4, 5, 24);
    let score = activation_distance(&Network::Rnn(&net), &batch, &MetricOpts::default()).unwrap();
    assert!(score.value.finite().is_some());
}

#[test]
fn activation_distance_permutation_invariant() {
    let net = rnn_net(6);
    let t = 5;
    let batch = next_token_batch(4, t, 24);
    let permuted = {
        // Swap inputs 0 and 3, 1 and 2.
        let order = [3usize, 2, 1, 0];
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for &i in &order {
            for j in 0..t {
                tokens.push(batch.token(i, j));
                targets.push(batch.target(i, j));
            }
        }
        Minibatch::new(tokens, targets, 4, t).unwrap()
    };
    let opts = MetricOpts { normalized: false, ..Default::default() };
    let a = activation_distance(&Network::Rnn(&net), &batch, &opts).unwrap();
    let b = activation_distance(&Network::Rnn(&net), &permuted, &opts).unwrap();
    let (a, b) = (a.value.finite().unwrap(), b.value.finite().unwrap());
    assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn collapsed_cell_flags_instead_of_failing() {
    // h_t = tanh(h_prev * linear(x, h)) pins the state at the zero init, so
    // every state- and input-sensitive metric degenerates; none may error.
    use crate::genome::{CellNode, CellNodeOp, CellSource};
    let genome = RnnCellGenome {
        nodes: vec![
            CellNode { op: CellNodeOp::Linear, inputs: vec![CellSource::X, CellSource::HPrev] },
            CellNode {
                op: CellNodeOp::Product,
                inputs: vec![CellSource::HPrev, CellSource::Node(0)],
            },
            CellNode { op: CellNodeOp::Tanh, inputs: vec![CellSource::Node(1)] },
        ],
        output: 2,
        c_output: None,
    };
    let net = build_rnn(&genome, 24, 8, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = next_token_batch(3, 4, 24);
    let ids = [
        MetricId::JacobianCovariance,
        MetricId::JacobianCosine,
        MetricId::HiddenCovariance { layer: 0 },
        MetricId::ActivationDistance,
        MetricId::SynapticSaliency,
    ];
    let scores = evaluate_many(&Network::Rnn(&net), &batch, &ids, &MetricOpts::default()).unwrap();
    for score in &scores[..4] {
        assert!(score.value.is_degenerate(), "{} should flag", score.metric);
    }
    // Saliency still works: output-projection parameters get gradients.
    assert!(scores[4].value.finite().is_some());
}

#[test]
fn hidden_covariance_layer_bounds() {
    let net = rnn_net(7);
    let batch = next_token_batch(3, 4, 24);
    assert!(hidden_covariance(&net, &batch, 3, &MetricOpts::default()).is_err());
    for layer in 0..3 {
        let score = hidden_covariance(&net, &batch, layer, &MetricOpts::default()).unwrap();
        assert_eq!(score.layer_index, Some(layer));
        assert!(score.value.finite().is_some());
    }
}

#[test]
fn hidden_covariance_batch_permutation_invariant() {
    let net = rnn_net(8);
    let t = 4;
    let batch = next_token_batch(4, t, 24);
    let order = [2usize, 0, 3, 1];
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for &i in &order {
        for j in 0..t {
            tokens.push(batch.token(i, j));
            targets.push(batch.target(i, j));
        }
    }
    let permuted = Minibatch::new(tokens, targets, 4, t).unwrap();
    let a = hidden_covariance(&net, &batch, 1, &MetricOpts::default()).unwrap();
    let b = hidden_covariance(&net, &permuted, 1, &MetricOpts::default()).unwrap();
    let (a, b) = (a.value.finite().unwrap(), b.value.finite().unwrap());
    assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn noised_jacobian_deterministic_and_continuous() {
    let net = rnn_net(9);
    let batch = next_token_batch(3, 4, 24);
    let network = Network::Rnn(&net);
    let opts = MetricOpts::default();

    let a = jacobian_noised(&network, &batch, 1.0, NoiseVariant::Large, &opts).unwrap();
    let b = jacobian_noised(&network, &batch, 1.0, NoiseVariant::Large, &opts).unwrap();
    assert_eq!(a.value, b.value, "same seed must give the same noise");

    // Vanishing noise recovers the clean cosine score.
    let clean = jacobian_cosine(&network, &batch, &opts).unwrap().value.finite().unwrap();
    let tiny = jacobian_noised(&network, &batch, 1e-9, NoiseVariant::Large, &opts)
        .unwrap()
        .value
        .finite()
        .unwrap();
    assert!((tiny - clean).abs() < 1e-6, "tiny-noise {tiny} vs clean {clean}");

    // Real noise moves the score.
    let noisy = jacobian_noised(&network, &batch, 1.0, NoiseVariant::Large, &opts)
        .unwrap()
        .value
        .finite()
        .unwrap();
    assert!((noisy - clean).abs() > 0.0, "noise had no effect");

    // The averaged variant differs from the single draw in general but is
    // also deterministic.
    let more = jacobian_noised(&network, &batch, 1.0, NoiseVariant::More, &opts).unwrap();
    let more2 = jacobian_noised(&network, &batch, 1.0, NoiseVariant::More, &opts).unwrap();
    assert_eq!(more.value, more2.value);
}

#[test]
fn noise_level_must_be_positive() {
    let net = rnn_net(10);
    let batch = next_token_batch(2, 3, 24);
    assert!(jacobian_noised(&Network::Rnn(&net), &batch, 0.0, NoiseVariant::Large, &MetricOpts::default())
        .is_err());
}

#[test]
fn normalization_identity_is_exact() {
    // non-normalized == normalized * feature count, bit-exact.
    let net = rnn_net(11);
    let batch = next_token_batch(4, 4, 24);
    let network = Network::Rnn(&net);
    let norm_opts = MetricOpts { normalized: true, ..Default::default() };
    let raw_opts = MetricOpts { normalized: false, ..Default::default() };

    let cases: Vec<(MetricId, f64)> = vec![
        (MetricId::JacobianCovariance, 4.0),
        (MetricId::JacobianCosine, 4.0),
        (MetricId::SynapticSaliency, net.param_count() as f64),
        (MetricId::HiddenCovariance { layer: 0 }, 4.0),
    ];
    for (id, count) in cases {
        let a = evaluate_many(&network, &batch, &[id], &norm_opts).unwrap()[0]
            .value
            .finite()
            .unwrap();
        let b = evaluate_many(&network, &batch, &[id], &raw_opts).unwrap()[0]
            .value
            .finite()
            .unwrap();
        assert_eq!(b, a * count, "identity broken for {id}");
    }
}

#[test]
fn transformer_confidence_bounds_and_identity() {
    let genome = tf_genome(AttentionOp::ScaledDotProduct, 4);
    let net = tf_net(&genome, 21);
    let batch = masked_batch(3, 8, 24);
    let heads = genome.total_heads() as f64;

    let norm = attention_confidence(&net, &batch, &MetricOpts::default()).unwrap();
    let raw = attention_confidence(
        &net,
        &batch,
        &MetricOpts { normalized: false, ..Default::default() },
    )
    .unwrap();
    let (norm_v, raw_v) = (norm.value.finite().unwrap(), raw.value.finite().unwrap());
    assert_eq!(raw_v, norm_v * heads);
    // Aggregates of non-negative head scores.
    assert!(norm_v >= 0.0);

    let softmax = softmax_confidence(&net, &batch, &MetricOpts::default()).unwrap();
    let v = softmax.value.finite().unwrap();
    let t = 8.0;
    assert!((1.0 / t..=1.0 + 1e-12).contains(&v), "softmax confidence {v} outside [1/T, 1]");
}

#[test]
fn softmax_confidence_inapplicable_without_softmax_heads() {
    let genome = TransformerGenome {
        hidden_dim: 128,
        layers: vec![
            LayerConfig { attn_op: AttentionOp::FourierTransform, num_heads: 2, ff_dim: 512, ff_stacks: 1 },
            LayerConfig { attn_op: AttentionOp::DynamicConv { kernel: 5 }, num_heads: 2, ff_dim: 512, ff_stacks: 1 },
        ],
    };
    let net = tf_net(&genome, 22);
    let batch = masked_batch(2, 8, 24);
    let score = softmax_confidence(&net, &batch, &MetricOpts::default()).unwrap();
    assert_eq!(score.value, ScoreValue::Degenerate(DegenerateReason::Inapplicable));
}

#[test]
fn synaptic_diversity_zero_for_fixed_bases() {
    let genome = TransformerGenome {
        hidden_dim: 128,
        layers: vec![
            LayerConfig { attn_op: AttentionOp::FourierTransform, num_heads: 2, ff_dim: 512, ff_stacks: 1 },
            LayerConfig { attn_op: AttentionOp::CosineTransform, num_heads: 4, ff_dim: 512, ff_stacks: 1 },
        ],
    };
    let net = tf_net(&genome, 23);
    let batch = masked_batch(2, 8, 24);
    let score = synaptic_diversity(&net, &batch, &MetricOpts::default()).unwrap();
    assert_eq!(score.value.finite(), Some(0.0));
}

#[test]
fn synaptic_diversity_positive_for_attention() {
    let genome = tf_genome(AttentionOp::Multiplicative, 2);
    let net = tf_net(&genome, 24);
    let batch = masked_batch(2, 8, 24);
    let score = synaptic_diversity(&net, &batch, &MetricOpts::default()).unwrap();
    assert!(score.value.finite().unwrap() > 0.0);
}

#[test]
fn attention_importance_matches_head_scaling_sensitivity() {
    // d/de L(att * (1+e)) at e=0 equals the inner product of the head
    // output with its gradient; the head score is its absolute value.
    let genome = tf_genome(AttentionOp::ScaledDotProduct, 2);
    let net = tf_net(&genome, 25);
    let batch = masked_batch(2, 8, 24);

    let eval = net.forward(&batch).unwrap();
    let mut tape = eval.tape;
    tape.backward(eval.loss).unwrap();
    let head = &eval.heads[0];
    let analytic: f64 = tape
        .values(head.attn_output)
        .iter()
        .zip(tape.grad(head.attn_output).unwrap())
        .map(|(v, g)| v * g)
        .sum();

    let eps = 1e-4;
    let loss_at = |factor: f64| {
        let opts = ForwardOpts {
            head_scale: Some(HeadScale { layer: head.layer, head: head.head, factor }),
            ..ForwardOpts::default()
        };
        let e = net.forward_with(&batch, &opts).unwrap();
        e.tape.values(e.loss)[0]
    };
    let fd = (loss_at(1.0 + eps) - loss_at(1.0 - eps)) / (2.0 * eps);
    assert!(
        (analytic - fd).abs() <= 1e-3 * fd.abs().max(analytic.abs()).max(1e-9),
        "analytic {analytic} vs finite difference {fd}"
    );
}

#[test]
fn evaluate_many_matches_individual_calls() {
    let genome = tf_genome(AttentionOp::DynamicConv { kernel: 5 }, 2);
    let net = tf_net(&genome, 26);
    let batch = masked_batch(2, 8, 24);
    let network = Network::Transformer(&net);
    let opts = MetricOpts::default();

    let ids = [
        MetricId::JacobianCovariance,
        MetricId::JacobianCosine,
        MetricId::SynapticSaliency,
        MetricId::ActivationDistance,
        MetricId::SynapticDiversity,
        MetricId::AttentionConfidence,
        MetricId::SoftmaxConfidence,
        MetricId::AttentionImportance,
        MetricId::ParameterCount,
    ];
    let bundled = evaluate_many(&network, &batch, &ids, &opts).unwrap();
    for (i, id) in ids.iter().enumerate() {
        let single = evaluate_many(&network, &batch, &[*id], &opts).unwrap();
        assert_eq!(bundled[i].value, single[0].value, "bundled vs single for {id}");
    }
}

#[test]
fn wrong_family_is_a_contract_error() {
    let net = rnn_net(12);
    let batch = next_token_batch(2, 3, 24);
    let err = evaluate_many(
        &Network::Rnn(&net),
        &batch,
        &[MetricId::AttentionConfidence],
        &MetricOpts::default(),
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn parameter_count_delegates_to_genome() {
    let net = rnn_net(13);
    let network = Network::Rnn(&net);
    let score = parameter_count_metric(&network, &MetricOpts::default());
    assert_eq!(score.value.finite(), Some(net.param_count() as f64));

    // Normalized flag never changes the value.
    let raw = parameter_count_metric(&network, &MetricOpts { normalized: false, ..Default::default() });
    assert_eq!(raw.value, score.value);
}

#[test]
fn vanilla_cell_metrics_all_finite() {
    let genome = RnnCellGenome::vanilla();
    let net = build_rnn(&genome, 24, 8, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batch = next_token_batch(4, 5, 24);
    let network = Network::Rnn(&net);
    let ids = [
        MetricId::JacobianCovariance,
        MetricId::JacobianCosine,
        MetricId::JacobianLargeNoise,
        MetricId::JacobianMoreNoised,
        MetricId::SynapticSaliency,
        MetricId::ActivationDistance,
        MetricId::HiddenCovariance { layer: 0 },
        MetricId::HiddenCovariance { layer: 1 },
        MetricId::HiddenCovariance { layer: 2 },
        MetricId::ParameterCount,
    ];
    for score in evaluate_many(&network, &batch, &ids, &MetricOpts::default()).unwrap() {
        assert!(
            score.value.finite().is_some(),
            "unexpected degenerate {:?} for {}",
            score.value,
            score.metric
        );
    }
}
