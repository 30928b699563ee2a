//! Cell-DAG RNN genomes: a recurrent cell described as an acyclic digraph of
//! operations over the timestep input, the previous hidden state, and an
//! optional previous cell state. The op vocabulary {linear, sum, product,
//! tanh, sigmoid} reproduces LSTM/GRU-like cells.

use crate::{Error, Result};
use rand::Rng;

use super::BuildDims;

/// Operation performed by a cell node.
///
/// A linear node applies one weight matrix per incoming edge and adds a
/// shared bias, so `linear{x, h}` is the classic `W_x x + W_h h + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellNodeOp {
    Linear,
    Sum,
    Product,
    Tanh,
    Sigmoid,
}

impl CellNodeOp {
    pub fn token(&self) -> &'static str {
        match self {
            CellNodeOp::Linear => "linear",
            CellNodeOp::Sum => "sum",
            CellNodeOp::Product => "prod",
            CellNodeOp::Tanh => "tanh",
            CellNodeOp::Sigmoid => "sigmoid",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => CellNodeOp::Linear,
            "sum" => CellNodeOp::Sum,
            "prod" => CellNodeOp::Product,
            "tanh" => CellNodeOp::Tanh,
            "sigmoid" => CellNodeOp::Sigmoid,
            _ => return None,
        })
    }

    fn is_activation(&self) -> bool {
        matches!(self, CellNodeOp::Tanh | CellNodeOp::Sigmoid)
    }

    fn is_elementwise(&self) -> bool {
        matches!(self, CellNodeOp::Sum | CellNodeOp::Product)
    }
}

/// Where an incoming edge originates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellSource {
    /// Timestep input `x_t` (the embedding, or the layer below).
    X,
    /// Previous hidden state `h_{t-1}`.
    HPrev,
    /// Previous cell state `c_{t-1}`.
    CPrev,
    /// Output of op node `i`.
    Node(usize),
}

impl CellSource {
    pub fn token(&self) -> String {
        match self {
            CellSource::X => "x".into(),
            CellSource::HPrev => "h".into(),
            CellSource::CPrev => "c".into(),
            CellSource::Node(i) => i.to_string(),
        }
    }
}

/// One operation node with its ordered incoming edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellNode {
    pub op: CellNodeOp,
    pub inputs: Vec<CellSource>,
}

/// An RNN cell genome. Node ids are indices into `nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RnnCellGenome {
    pub nodes: Vec<CellNode>,
    /// Node producing `h_t`.
    pub output: usize,
    /// Node producing `c_t`; present exactly when some edge reads `c_{t-1}`.
    pub c_output: Option<usize>,
}

impl RnnCellGenome {
    /// The smallest well-formed cell: `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`.
    pub fn vanilla() -> Self {
        RnnCellGenome {
            nodes: vec![
                CellNode { op: CellNodeOp::Linear, inputs: vec![CellSource::X, CellSource::HPrev] },
                CellNode { op: CellNodeOp::Tanh, inputs: vec![CellSource::Node(0)] },
            ],
            output: 1,
            c_output: None,
        }
    }

    pub fn uses_cell_state(&self) -> bool {
        self.c_output.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Validation("cell has no nodes".into()));
        }
        let n = self.nodes.len();
        if self.output >= n {
            return Err(Error::Validation(format!("output node {} out of range", self.output)));
        }
        if let Some(c) = self.c_output {
            if c >= n {
                return Err(Error::Validation(format!("cell-state output node {c} out of range")));
            }
        }
        let mut reads_c = false;
        for (i, node) in self.nodes.iter().enumerate() {
            let degree = node.inputs.len();
            let ok = match node.op {
                CellNodeOp::Linear => degree >= 1,
                op if op.is_elementwise() => degree >= 2,
                _ => degree == 1,
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "node {i} ({}) has in-degree {degree}",
                    node.op.token()
                )));
            }
            for src in &node.inputs {
                match src {
                    CellSource::Node(j) if *j >= n => {
                        return Err(Error::Validation(format!("node {i} reads missing node {j}")))
                    }
                    CellSource::CPrev => reads_c = true,
                    _ => {}
                }
            }
        }
        if reads_c != self.c_output.is_some() {
            return Err(Error::Validation(
                "cell state must be both produced and consumed, or neither".into(),
            ));
        }
        self.check_acyclic()?;
        self.check_reachable()?;
        Ok(())
    }

    fn check_acyclic(&self) -> Result<()> {
        // DFS coloring over node->node edges.
        const WHITE: u8 = 0;
        const GRAY: u8 = 1;
        const BLACK: u8 = 2;
        let n = self.nodes.len();
        let mut color = vec![WHITE; n];
        // Iterative DFS with an explicit stack of (node, next input index).
        for root in 0..n {
            if color[root] != WHITE {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            color[root] = GRAY;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let mut advanced = false;
                while *next < self.nodes[node].inputs.len() {
                    let idx = *next;
                    *next += 1;
                    if let CellSource::Node(j) = self.nodes[node].inputs[idx] {
                        match color[j] {
                            WHITE => {
                                color[j] = GRAY;
                                stack.push((j, 0));
                                advanced = true;
                                break;
                            }
                            GRAY => {
                                return Err(Error::Validation(format!(
                                    "cycle through nodes {node} and {j}"
                                )))
                            }
                            _ => {}
                        }
                    }
                }
                if !advanced {
                    color[node] = BLACK;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    fn check_reachable(&self) -> Result<()> {
        // A node is reachable when all references bottom out in inputs; since
        // the graph is acyclic, propagate until fixpoint.
        let n = self.nodes.len();
        let mut reachable = vec![false; n];
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                if reachable[i] {
                    continue;
                }
                let ok = self.nodes[i].inputs.iter().any(|src| match src {
                    CellSource::Node(j) => reachable[*j],
                    _ => true,
                });
                if ok {
                    reachable[i] = true;
                    changed = true;
                }
            }
        }
        if let Some(i) = (0..n).find(|&i| !reachable[i]) {
            return Err(Error::Validation(format!("node {i} unreachable from any input")));
        }
        Ok(())
    }

    /// Trainable scalars of the full network: embedding, three stacked cells
    /// with independent parameters, and the output projection.
    pub fn param_count(&self, dims: &BuildDims) -> Result<u64> {
        self.validate()?;
        dims.validate()?;
        let (v, e, h) = (dims.vocab as u64, dims.embed_dim as u64, dims.hidden_dim as u64);
        let mut total = v * e; // embedding table
        for layer in 0..3u64 {
            let x_dim = if layer == 0 { e } else { h };
            for node in &self.nodes {
                if node.op != CellNodeOp::Linear {
                    continue;
                }
                for src in &node.inputs {
                    let in_dim = match src {
                        CellSource::X => x_dim,
                        _ => h,
                    };
                    total += in_dim * h;
                }
                total += h; // bias
            }
        }
        total += h * v + v; // output projection
        Ok(total)
    }

    /// Number of activation nodes (tanh/sigmoid) in the cell.
    pub fn activation_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_activation()).count()
    }
}

/// Sample a valid cell genome with at most `max_nodes` op nodes.
///
/// The first node is always `linear{x, h}` so dimensions work out for any
/// embedding width, and the designated output is always an activation, which
/// keeps hidden states bounded across timesteps. The output's ancestry must
/// include that first node, so sampled cells always read both the input and
/// the recurrent state. With `max_nodes == 3` this degenerates to the
/// vanilla cell for every seed.
pub fn sample_rnn(rng: &mut impl Rng, max_nodes: usize) -> Result<RnnCellGenome> {
    if max_nodes < 3 {
        return Err(Error::Contract(format!("max_nodes must be >= 3, got {max_nodes}")));
    }
    for _ in 0..100 {
        let genome = sample_rnn_once(rng, max_nodes);
        if genome.validate().is_ok() && output_reads_input(&genome) {
            return Ok(genome);
        }
    }
    Err(Error::Generation(format!(
        "no valid genome within retry budget (max_nodes = {max_nodes})"
    )))
}

/// Whether node 0 (the input-reading linear) is an ancestor of the output.
fn output_reads_input(genome: &RnnCellGenome) -> bool {
    let mut stack = vec![genome.output];
    let mut seen = vec![false; genome.nodes.len()];
    while let Some(node) = stack.pop() {
        if node == 0 {
            return true;
        }
        if seen[node] {
            continue;
        }
        seen[node] = true;
        for src in &genome.nodes[node].inputs {
            if let CellSource::Node(j) = src {
                stack.push(*j);
            }
        }
    }
    false
}

fn sample_rnn_once(rng: &mut impl Rng, max_nodes: usize) -> RnnCellGenome {
    let with_c = max_nodes >= 6 && rng.gen_bool(0.3);
    let count = rng.gen_range(2..=max_nodes - 1).max(if with_c { 4 } else { 2 });

    let mut nodes = Vec::with_capacity(count);
    nodes.push(CellNode { op: CellNodeOp::Linear, inputs: vec![CellSource::X, CellSource::HPrev] });
    // Sources usable by non-linear nodes (everything hidden-width).
    let mut hidden_pool = vec![CellSource::HPrev, CellSource::Node(0)];
    if with_c {
        // The cell state always flows through an additive merge; a purely
        // multiplicative carry would pin c (zero-initialized) at zero for
        // every timestep.
        nodes.push(CellNode {
            op: CellNodeOp::Sum,
            inputs: vec![CellSource::CPrev, CellSource::Node(0)],
        });
        hidden_pool.push(CellSource::CPrev);
        hidden_pool.push(CellSource::Node(1));
    }

    // Products draw only from computed nodes: a product with the raw
    // (zero-initialized) recurrent state pins the cell at zero for every
    // timestep. Gate-style products still arise through linear nodes.
    let mut node_pool = vec![CellSource::Node(0)];
    if with_c {
        node_pool.push(CellSource::Node(1));
    }
    while nodes.len() < count - 1 {
        let idx = nodes.len();
        let mut op = match rng.gen_range(0..5) {
            0 => CellNodeOp::Linear,
            1 => CellNodeOp::Sum,
            2 => CellNodeOp::Product,
            3 => CellNodeOp::Tanh,
            _ => CellNodeOp::Sigmoid,
        };
        if op == CellNodeOp::Product && node_pool.len() < 2 {
            op = CellNodeOp::Sum;
        }
        let pick = |rng: &mut dyn rand::RngCore, pool: &[CellSource]| -> CellSource {
            pool[rng.gen_range(0..pool.len())]
        };
        let draw_distinct = |rng: &mut dyn rand::RngCore, pool: &[CellSource], degree: usize| {
            let mut pool = pool.to_vec();
            let mut chosen = Vec::with_capacity(degree);
            for _ in 0..degree {
                let k = rng.gen_range(0..pool.len());
                chosen.push(pool.swap_remove(k));
            }
            chosen
        };
        let inputs = match op {
            CellNodeOp::Linear => {
                let degree = rng.gen_range(1..=2);
                // Linear nodes may also read x directly.
                let mut opts = hidden_pool.clone();
                opts.push(CellSource::X);
                (0..degree).map(|_| pick(rng, &opts)).collect()
            }
            CellNodeOp::Sum => {
                let degree = rng.gen_range(2..=3.min(hidden_pool.len()));
                draw_distinct(rng, &hidden_pool, degree)
            }
            CellNodeOp::Product => {
                let degree = rng.gen_range(2..=3.min(node_pool.len()));
                draw_distinct(rng, &node_pool, degree)
            }
            _ => vec![pick(rng, &hidden_pool)],
        };
        nodes.push(CellNode { op, inputs });
        hidden_pool.push(CellSource::Node(idx));
        node_pool.push(CellSource::Node(idx));
    }

    // Final node: an activation over the most recent node, designated h_t.
    let last_src = CellSource::Node(nodes.len() - 1);
    let op = if rng.gen_bool(0.8) { CellNodeOp::Tanh } else { CellNodeOp::Sigmoid };
    nodes.push(CellNode { op, inputs: vec![last_src] });
    let output = nodes.len() - 1;
    // c_t is the additive merge node, LSTM-style.
    let c_output = with_c.then_some(1);

    RnnCellGenome { nodes, output, c_output }
}
