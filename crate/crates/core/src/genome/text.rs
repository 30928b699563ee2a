//! Line-oriented genome text format, versioned so benchmark tables stay
//! stable across releases.
//!
//! One genome per line, space-separated `key=value` fields after a version
//! tag. Equal genomes serialize identically (fields and nodes in canonical
//! order), so the serialized form doubles as a join key.
//!
//! ```text
//! v1 kind=rnn nodes=linear:x,h;tanh:0 out=1
//! v1 kind=rnn nodes=linear:x,h;sum:c,0;tanh:1 out=2 cout=1
//! v1 kind=transformer hidden=128 layers=sdp:h2:f512:s1;dft:h4:f1024:s3
//! ```
//!
//! A benchmark record is a serialized genome, a tab, the trained score, and
//! optional tab-separated `key=value` metadata.

use crate::{Error, Result};

use super::rnn::{CellNode, CellNodeOp, CellSource, RnnCellGenome};
use super::transformer::{AttentionOp, LayerConfig, TransformerGenome};
use super::Genome;

const VERSION_TAG: &str = "v1";

/// Canonical single-line form of a genome.
pub fn serialize(genome: &Genome) -> String {
    match genome {
        Genome::Rnn(g) => serialize_rnn(g),
        Genome::Transformer(g) => serialize_transformer(g),
    }
}

fn serialize_rnn(g: &RnnCellGenome) -> String {
    let nodes = g
        .nodes
        .iter()
        .map(|n| {
            let srcs: Vec<String> = n.inputs.iter().map(|s| s.token()).collect();
            format!("{}:{}", n.op.token(), srcs.join(","))
        })
        .collect::<Vec<_>>()
        .join(";");
    let mut line = format!("{VERSION_TAG} kind=rnn nodes={nodes} out={}", g.output);
    if let Some(c) = g.c_output {
        line.push_str(&format!(" cout={c}"));
    }
    line
}

fn serialize_transformer(g: &TransformerGenome) -> String {
    let layers = g
        .layers
        .iter()
        .map(|l| format!("{}:h{}:f{}:s{}", l.attn_op.token(), l.num_heads, l.ff_dim, l.ff_stacks))
        .collect::<Vec<_>>()
        .join(";");
    format!("{VERSION_TAG} kind=transformer hidden={} layers={layers}", g.hidden_dim)
}

/// Parse a serialized genome and validate it.
pub fn deserialize(line: &str) -> Result<Genome> {
    let line = line.trim();
    let mut fields = line.split_whitespace();
    match fields.next() {
        Some(VERSION_TAG) => {}
        Some(other) => {
            return Err(Error::parse("version tag", format!("expected '{VERSION_TAG}', got '{other}'")))
        }
        None => return Err(Error::parse("genome line", "empty line")),
    }
    let mut kind = None;
    let mut pairs = Vec::new();
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::parse("genome line", format!("field '{field}' is not key=value")))?;
        if key == "kind" {
            kind = Some(value.to_string());
        } else {
            pairs.push((key.to_string(), value.to_string()));
        }
    }
    let genome = match kind.as_deref() {
        Some("rnn") => Genome::Rnn(parse_rnn(&pairs)?),
        Some("transformer") => Genome::Transformer(parse_transformer(&pairs)?),
        Some(other) => return Err(Error::parse("field kind", format!("unknown kind '{other}'"))),
        None => return Err(Error::parse("genome line", "missing kind field")),
    };
    genome.validate()?;
    Ok(genome)
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::parse("genome line", format!("missing field '{key}'")))
}

fn parse_rnn(pairs: &[(String, String)]) -> Result<RnnCellGenome> {
    let nodes_text = lookup(pairs, "nodes")?;
    let mut nodes = Vec::new();
    for (i, node_text) in nodes_text.split(';').enumerate() {
        let loc = format!("field nodes, node {i}");
        let (op_text, inputs_text) = node_text
            .split_once(':')
            .ok_or_else(|| Error::parse(&loc, format!("'{node_text}' is not op:inputs")))?;
        let op = CellNodeOp::from_token(op_text)
            .ok_or_else(|| Error::parse(&loc, format!("unknown op '{op_text}'")))?;
        let mut inputs = Vec::new();
        for src_text in inputs_text.split(',') {
            inputs.push(match src_text {
                "x" => CellSource::X,
                "h" => CellSource::HPrev,
                "c" => CellSource::CPrev,
                id => CellSource::Node(
                    id.parse()
                        .map_err(|_| Error::parse(&loc, format!("bad source token '{id}'")))?,
                ),
            });
        }
        nodes.push(CellNode { op, inputs });
    }
    let output = lookup(pairs, "out")?
        .parse()
        .map_err(|_| Error::parse("field out", "not an integer"))?;
    let c_output = match pairs.iter().find(|(k, _)| k == "cout") {
        Some((_, v)) => {
            Some(v.parse().map_err(|_| Error::parse("field cout", "not an integer"))?)
        }
        None => None,
    };
    Ok(RnnCellGenome { nodes, output, c_output })
}

fn parse_transformer(pairs: &[(String, String)]) -> Result<TransformerGenome> {
    let hidden_dim = lookup(pairs, "hidden")?
        .parse()
        .map_err(|_| Error::parse("field hidden", "not an integer"))?;
    let layers_text = lookup(pairs, "layers")?;
    let mut layers = Vec::new();
    for (i, layer_text) in layers_text.split(';').filter(|s| !s.is_empty()).enumerate() {
        let loc = format!("field layers, layer {i}");
        let parts: Vec<&str> = layer_text.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::parse(&loc, format!("'{layer_text}' is not op:hN:fN:sN")));
        }
        let attn_op = AttentionOp::from_token(parts[0])
            .ok_or_else(|| Error::parse(&loc, format!("unknown attention op '{}'", parts[0])))?;
        let num_heads = parse_tagged(parts[1], 'h', &loc)?;
        let ff_dim = parse_tagged(parts[2], 'f', &loc)?;
        let ff_stacks = parse_tagged(parts[3], 's', &loc)?;
        layers.push(LayerConfig { attn_op, num_heads, ff_dim, ff_stacks });
    }
    Ok(TransformerGenome { hidden_dim, layers })
}

fn parse_tagged(text: &str, tag: char, loc: &str) -> Result<usize> {
    text.strip_prefix(tag)
        .and_then(|rest| rest.parse().ok())
        .ok_or_else(|| Error::parse(loc, format!("expected {tag}<int>, got '{text}'")))
}

/// A genome paired with its trained performance.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub genome: Genome,
    /// Test loss for the RNN space, GLUE average for the transformer space.
    pub trained_score: f64,
    pub metadata: Vec<(String, String)>,
}

impl BenchmarkRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!("{}\t{}", serialize(&self.genome), self.trained_score);
        for (k, v) in &self.metadata {
            line.push_str(&format!("\t{k}={v}"));
        }
        line
    }
}

/// Parse one benchmark-table line: genome, tab, trained score, optional
/// tab-separated metadata.
pub fn parse_benchmark_line(line: &str) -> Result<BenchmarkRecord> {
    let mut columns = line.trim_end_matches(['\r', '\n']).split('\t');
    let genome_text = columns
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::parse("benchmark record", "empty line"))?;
    let genome = deserialize(genome_text)?;
    let score_text = columns
        .next()
        .ok_or_else(|| Error::parse("benchmark record", "missing trained score column"))?;
    let trained_score: f64 = score_text
        .parse()
        .map_err(|_| Error::parse("benchmark record", format!("bad trained score '{score_text}'")))?;
    if !trained_score.is_finite() {
        return Err(Error::parse("benchmark record", "trained score must be finite"));
    }
    let mut metadata = Vec::new();
    for column in columns {
        match column.split_once('=') {
            Some((k, v)) => metadata.push((k.to_string(), v.to_string())),
            None => {
                return Err(Error::parse(
                    "benchmark record",
                    format!("metadata column '{column}' is not key=value"),
                ))
            }
        }
    }
    Ok(BenchmarkRecord { genome, trained_score, metadata })
}
