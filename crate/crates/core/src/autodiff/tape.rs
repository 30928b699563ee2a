use crate::{Error, Result};

/// Dense n-dimensional tensor of 64-bit reals with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, checking that the shape matches the value count and
    /// every extent is positive.
    pub fn from_values(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::from_values(shape, vec![0.0; numel])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], values: vec![x], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Extent of the last axis.
    fn last_extent(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    /// `a` is [B,M,K], `b` a shared [K,N] right factor.
    MatmulSharedRight { a: TensorId, b: TensorId },
    /// `a` is a shared [M,K] left factor, `b` is [B,K,N].
    MatmulSharedLeft { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    TransposeLast2 { x: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Power { x: TensorId, exponent: f64 },
    Softmax { x: TensorId, axis: usize },
    GatherRows { src: TensorId, indices: Vec<usize> },
    SliceLast { x: TensorId, start: usize, len: usize },
    ConcatLast { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    /// Shift a [B,T,C] tensor along the T axis with zero padding:
    /// `y[b,t,c] = x[b,t+offset,c]`.
    ShiftSeq { x: TensorId, offset: isize },
    /// `a` is [...,C], `s` is [...,1] with matching leading axes;
    /// `y[r,c] = a[r,c] * s[r]`.
    MulBroadcastLast { a: TensorId, s: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Reshape { x: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Wengert tape: records primitive operations in topological order during a
/// forward pass and accumulates gradients by visiting them once in reverse.
///
/// Gradients are never reset implicitly. Repeated [`Tape::backward`] calls
/// accumulate additively; call [`Tape::zero_grads`] between evaluations that
/// need fresh gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Raw row-major matrix product: `c[m,n] += a[m,k] * b[k,n]`.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            if apv == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += apv * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Stable softmax of one contiguous line, written into `out`.
fn softmax_line(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Record a constant leaf from raw values.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::from_values(shape, values)?))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    /// Error if the tensor contains NaN or Inf, naming `context`.
    pub fn check_finite(&self, id: TensorId, context: &str) -> Result<()> {
        if self.values(id).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {context}")))
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn push_raw(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Tensor { shape, values, grad: None, requires_grad: false }, op)
    }

    /// Whether backward should accumulate a gradient into this node.
    /// Frozen leaves (constants, fixed bases) never receive gradients.
    fn wants_grad(&self, id: TensorId) -> bool {
        let node = &self.nodes[id.0];
        !(matches!(node.op, Op::Leaf) && !node.tensor.requires_grad)
    }

    fn accum(&self, work: &mut [Option<Vec<f64>>], id: TensorId, contribution: &[f64]) {
        if !self.wants_grad(id) {
            return;
        }
        let slot = work[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].tensor.numel()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    // ── Forward operations ───────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!("matmul expects 2-D operands, got {sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.values(a), self.values(b), m, k, n, &mut out);
        Ok(self.push_raw(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// Batched product with a shared right factor: [B,M,K] x [K,N] -> [B,M,N].
    pub fn matmul_shared_right(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 2 || sa[2] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul_shared_right expects [B,M,K] x [K,N], got {sa:?} x {sb:?}"
            )));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_acc(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                self.values(b),
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_raw(vec![bsz, m, n], out, Op::MatmulSharedRight { a, b }))
    }

    /// Batched product with a shared left factor: [M,K] x [B,K,N] -> [B,M,N].
    pub fn matmul_shared_left(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 3 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_shared_left expects [M,K] x [B,K,N], got {sa:?} x {sb:?}"
            )));
        }
        let (bsz, m, k, n) = (sb[0], sa[0], sa[1], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_acc(
                self.values(a),
                &self.values(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_raw(vec![bsz, m, n], out, Op::MatmulSharedLeft { a, b }))
    }

    /// Batched matrix product: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!("bmm expects [B,M,K] x [B,K,N], got {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_acc(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                &self.values(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_raw(vec![bsz, m, n], out, Op::Bmm { a, b }))
    }

    /// Transpose the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (bsz, m, n) = match shape.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => return Err(Error::Dimension(format!("transpose_last2 expects rank 2 or 3, got {shape:?}"))),
        };
        let values = self.values(x);
        let mut out = vec![0.0; values.len()];
        for i in 0..bsz {
            let src = &values[i * m * n..(i + 1) * m * n];
            let dst = &mut out[i * m * n..(i + 1) * m * n];
            for r in 0..m {
                for c in 0..n {
                    dst[c * m + r] = src[r * n + c];
                }
            }
        }
        let mut new_shape = shape;
        let rank = new_shape.len();
        new_shape.swap(rank - 2, rank - 1);
        Ok(self.push_raw(new_shape, out, Op::TransposeLast2 { x }))
    }

    /// Add a bias vector along the last axis: [...,C] + [C].
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let c = self.tensor(x).last_extent();
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match last extent {c}",
                self.shape(bias)
            )));
        }
        let bvals = self.values(bias).to_vec();
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bvals) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_raw(shape, out, Op::AddBias { x, bias }))
    }

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.tensor(a).numel(), self.tensor(b).numel());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{what}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
            )))
        }
    }

    fn binary_values(&self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.values(a), self.values(b));
        if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        }
    }

    /// Elementwise sum; one operand may be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "add")?;
        let out = self.binary_values(a, b, |x, y| x + y);
        Ok(self.push_raw(shape, out, Op::Add { a, b }))
    }

    /// Elementwise difference; one operand may be a scalar.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "sub")?;
        let out = self.binary_values(a, b, |x, y| x - y);
        Ok(self.push_raw(shape, out, Op::Sub { a, b }))
    }

    /// Elementwise product; one operand may be a scalar.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let out = self.binary_values(a, b, |x, y| x * y);
        Ok(self.push_raw(shape, out, Op::Mul { a, b }))
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_raw(shape, out, Op::Scale { x, factor })
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_raw(shape, out, op)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, gelu, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.values(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log { x }))
    }

    /// Elementwise power with a fixed real exponent.
    pub fn power(&mut self, x: TensorId, exponent: f64) -> Result<TensorId> {
        let integral = exponent.fract() == 0.0;
        for &v in self.values(x) {
            if v < 0.0 && !integral {
                return Err(Error::Domain(format!("power({exponent}) of negative value {v}")));
            }
            if v == 0.0 && exponent < 0.0 {
                return Err(Error::Domain("power with negative exponent at zero".into()));
            }
        }
        Ok(self.unary(x, |v| v.powf(exponent), Op::Power { x, exponent }))
    }

    /// Numerically stabilized softmax along `axis`. Each line along the axis
    /// sums to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let values = self.values(x);
        let mut out = vec![0.0; values.len()];
        for_each_line(&shape, axis, |line_start, stride, len| {
            let xs: Vec<f64> = (0..len).map(|i| values[line_start + i * stride]).collect();
            let mut line = vec![0.0; len];
            softmax_line(&xs, &mut line);
            for (i, v) in line.into_iter().enumerate() {
                out[line_start + i * stride] = v;
            }
        });
        Ok(self.push_raw(shape, out, Op::Softmax { x, axis }))
    }

    /// Select rows of a 2-D tensor. Gradients scatter-add back, so repeated
    /// indices accumulate.
    pub fn gather_rows(&mut self, src: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.shape(src).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows expects a 2-D source, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row index {bad} out of range for {rows} rows")));
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with empty index list".into()));
        }
        let values = self.values(src);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&values[i * cols..(i + 1) * cols]);
        }
        Ok(self.push_raw(
            vec![indices.len(), cols],
            out,
            Op::GatherRows { src, indices: indices.to_vec() },
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = self.tensor(x).last_extent();
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for last extent {c}",
                start + len
            )));
        }
        let values = self.values(x);
        let rows = values.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&values[r * c + start..r * c + start + len]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        Ok(self.push_raw(new_shape, out, Op::SliceLast { x, start, len }))
    }

    /// Concatenate along the last axis; leading axes must match.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last with no parts".into()));
        }
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat_last leading axes differ: {:?} vs {:?}",
                    self.shape(parts[0]),
                    s
                )));
            }
            total_c += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut out = vec![0.0; rows * total_c];
        let mut offset = 0;
        for &p in parts {
            let c = self.tensor(p).last_extent();
            let values = self.values(p);
            for r in 0..rows {
                out[r * total_c + offset..r * total_c + offset + c]
                    .copy_from_slice(&values[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut new_shape = lead;
        new_shape.push(total_c);
        Ok(self.push_raw(new_shape, out, Op::ConcatLast { parts: parts.to_vec() }))
    }

    /// Stack 2-D tensors along the first axis; column counts must match.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows with no parts".into()));
        }
        let cols = match self.shape(parts[0]) {
            [_, c] => *c,
            s => return Err(Error::Dimension(format!("concat_rows expects 2-D parts, got {s:?}"))),
        };
        let mut total_rows = 0;
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => total_rows += r,
                s => {
                    return Err(Error::Dimension(format!(
                        "concat_rows part shape {s:?} incompatible with {cols} columns"
                    )))
                }
            }
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        Ok(self.push_raw(vec![total_rows, cols], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Shift a [B,T,C] tensor along the sequence axis with zero padding.
    pub fn shift_seq(&mut self, x: TensorId, offset: isize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let [bsz, t, c] = match shape.as_slice() {
            [b, t, c] => [*b, *t, *c],
            s => return Err(Error::Dimension(format!("shift_seq expects [B,T,C], got {s:?}"))),
        };
        let values = self.values(x);
        let mut out = vec![0.0; values.len()];
        for b in 0..bsz {
            for ti in 0..t {
                let src_t = ti as isize + offset;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let dst = (b * t + ti) * c;
                let src = (b * t + src_t as usize) * c;
                out[dst..dst + c].copy_from_slice(&values[src..src + c]);
            }
        }
        Ok(self.push_raw(shape, out, Op::ShiftSeq { x, offset }))
    }

    /// Scale each last-axis row of `a` by the matching entry of `s`
    /// (`s` has the same leading axes and a final extent of 1).
    pub fn mul_broadcast_last(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(s).to_vec();
        let ok = ss.last() == Some(&1) && ss[..ss.len() - 1] == sa[..sa.len() - 1];
        if !ok {
            return Err(Error::Dimension(format!(
                "mul_broadcast_last expects s = [...,1] matching a's leading axes, got {sa:?} x {ss:?}"
            )));
        }
        let c = *sa.last().unwrap();
        let (va, vs) = (self.values(a), self.values(s));
        let mut out = vec![0.0; va.len()];
        for (r, srow) in vs.iter().enumerate() {
            for col in 0..c {
                out[r * c + col] = va[r * c + col] * srow;
            }
        }
        Ok(self.push_raw(sa, out, Op::MulBroadcastLast { a, s }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.values(x).iter().sum();
        self.push_raw(vec![1], vec![total], Op::Sum { x })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let values = self.values(x);
        let m = values.iter().sum::<f64>() / values.len() as f64;
        self.push_raw(vec![1], vec![m], Op::Mean { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` [batch, classes].
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes) = match shape.as_slice() {
            [b, c] => (*b, *c),
            s => return Err(Error::Dimension(format!("cross_entropy expects [batch, classes], got {s:?}"))),
        };
        if targets.len() != batch {
            return Err(Error::Dimension(format!(
                "{} targets for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target {bad} out of range for {classes} classes")));
        }
        let values = self.values(logits);
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &values[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - log_sum;
        }
        let loss = total / batch as f64;
        Ok(self.push_raw(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Row-wise layer normalization over the last axis with learnable gain
    /// and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = self.tensor(x).last_extent();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have shape [{c}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (gvals, bvals) = (self.values(gamma).to_vec(), self.values(beta).to_vec());
        let values = self.values(x);
        let mut out = vec![0.0; values.len()];
        for (r, row) in values.chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[r * c + j] = gvals[j] * (v - mean) / denom + bvals[j];
            }
        }
        Ok(self.push_raw(shape, out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Reinterpret the flat data with a new shape of the same size.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let values = self.values(x).to_vec();
        Ok(self.push_raw(shape, values, Op::Reshape { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every reachable node that wants
    /// them. `loss` must be a scalar recorded on this tape.
    ///
    /// Each call contributes exactly one unit of upstream gradient; gradients
    /// from earlier calls persist, so two backward passes double the grads.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = work[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_one(TensorId(i), &grad, op, &mut work);
            // Persist this pass's contribution.
            let tensor = &mut self.nodes[i].tensor;
            let slot = tensor.grad.get_or_insert_with(|| vec![0.0; tensor.values.len()]);
            for (s, g) in slot.iter_mut().zip(&grad) {
                *s += g;
            }
        }
        Ok(())
    }

    fn backprop_one(&mut self, out: TensorId, g: &[f64], op: Op, work: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(b)[1];
                if self.wants_grad(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(g, self.values(b), m, n, k, &mut da);
                    self.accum(work, a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(self.values(a), g, m, k, n, &mut db);
                    self.accum(work, b, &db);
                }
            }
            Op::MatmulSharedRight { a, b } => {
                let sa = self.shape(a).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(b)[1];
                if self.wants_grad(a) {
                    let mut da = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            self.values(b),
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accum(work, a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..bsz {
                        matmul_at_acc(
                            &self.values(a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db,
                        );
                    }
                    self.accum(work, b, &db);
                }
            }
            Op::MatmulSharedLeft { a, b } => {
                let sb = self.shape(b).to_vec();
                let (bsz, k, n) = (sb[0], sb[1], sb[2]);
                let m = self.shape(a)[0];
                if self.wants_grad(a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..bsz {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.values(b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da,
                        );
                    }
                    self.accum(work, a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        matmul_at_acc(
                            self.values(a),
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accum(work, b, &db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(a).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(b)[2];
                if self.wants_grad(a) {
                    let mut da = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.values(b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accum(work, a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        matmul_at_acc(
                            &self.values(a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accum(work, b, &db);
                }
            }
            Op::TransposeLast2 { x } => {
                if !self.wants_grad(x) {
                    return;
                }
                // Output shape is [.., n, m] where x is [.., m, n].
                let so = self.shape(out).to_vec();
                let (bsz, n, m) = match so.as_slice() {
                    [n, m] => (1, *n, *m),
                    [b, n, m] => (*b, *n, *m),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; g.len()];
                for i in 0..bsz {
                    let src = &g[i * m * n..(i + 1) * m * n];
                    let dst = &mut dx[i * m * n..(i + 1) * m * n];
                    for r in 0..n {
                        for c in 0..m {
                            dst[c * n + r] = src[r * m + c];
                        }
                    }
                }
                self.accum(work, x, &dx);
            }
            Op::AddBias { x, bias } => {
                self.accum(work, x, g);
                if self.wants_grad(bias) {
                    let c = self.tensor(bias).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accum(work, bias, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum_broadcast(work, a, g, 1.0, None);
                self.accum_broadcast(work, b, g, 1.0, None);
            }
            Op::Sub { a, b } => {
                self.accum_broadcast(work, a, g, 1.0, None);
                self.accum_broadcast(work, b, g, -1.0, None);
            }
            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    let other = self.values(b).to_vec();
                    self.accum_broadcast(work, a, g, 1.0, Some(&other));
                }
                if self.wants_grad(b) {
                    let other = self.values(a).to_vec();
                    self.accum_broadcast(work, b, g, 1.0, Some(&other));
                }
            }
            Op::Scale { x, factor } => {
                if self.wants_grad(x) {
                    let dx: Vec<f64> = g.iter().map(|&v| v * factor).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.wants_grad(x) {
                    let y = self.values(out);
                    let dx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants_grad(x) {
                    let y = self.values(out);
                    let dx: Vec<f64> =
                        g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.wants_grad(x) {
                    let xv = self.values(x);
                    let dx: Vec<f64> =
                        g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.wants_grad(x) {
                    let xv = self.values(x);
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| gv * gelu_deriv(v)).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Exp { x } => {
                if self.wants_grad(x) {
                    let y = self.values(out);
                    let dx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Log { x } => {
                if self.wants_grad(x) {
                    let xv = self.values(x);
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Power { x, exponent } => {
                if self.wants_grad(x) {
                    let xv = self.values(x);
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| gv * exponent * v.powf(exponent - 1.0))
                        .collect();
                    self.accum(work, x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                if !self.wants_grad(x) {
                    return;
                }
                let shape = self.shape(out).to_vec();
                let y = self.values(out).to_vec();
                let mut dx = vec![0.0; g.len()];
                for_each_line(&shape, axis, |line_start, stride, len| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let idx = line_start + i * stride;
                        dot += g[idx] * y[idx];
                    }
                    for i in 0..len {
                        let idx = line_start + i * stride;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                });
                self.accum(work, x, &dx);
            }
            Op::GatherRows { src, indices } => {
                if !self.wants_grad(src) {
                    return;
                }
                let cols = self.shape(src)[1];
                let mut dsrc = vec![0.0; self.tensor(src).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dsrc[i * cols + c] += g[r * cols + c];
                    }
                }
                self.accum(work, src, &dsrc);
            }
            Op::SliceLast { x, start, len } => {
                if !self.wants_grad(x) {
                    return;
                }
                let c = self.tensor(x).last_extent();
                let mut dx = vec![0.0; self.tensor(x).numel()];
                let rows = dx.len() / c;
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(work, x, &dx);
            }
            Op::ConcatLast { parts } => {
                let total_c = self.tensor(out).last_extent();
                let rows = g.len() / total_c;
                let mut offset = 0;
                for &p in &parts {
                    let c = self.tensor(p).last_extent();
                    if self.wants_grad(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total_c + offset..r * total_c + offset + c]);
                        }
                        self.accum(work, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in &parts {
                    let numel = self.tensor(p).numel();
                    if self.wants_grad(p) {
                        self.accum(work, p, &g[offset..offset + numel]);
                    }
                    offset += numel;
                }
            }
            Op::ShiftSeq { x, offset } => {
                if !self.wants_grad(x) {
                    return;
                }
                let shape = self.shape(x).to_vec();
                let (bsz, t, c) = (shape[0], shape[1], shape[2]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..bsz {
                    for ti in 0..t {
                        let src_t = ti as isize + offset;
                        if src_t < 0 || src_t >= t as isize {
                            continue;
                        }
                        let dst = (b * t + src_t as usize) * c;
                        let src = (b * t + ti) * c;
                        for j in 0..c {
                            dx[dst + j] += g[src + j];
                        }
                    }
                }
                self.accum(work, x, &dx);
            }
            Op::MulBroadcastLast { a, s } => {
                let c = self.tensor(a).last_extent();
                if self.wants_grad(a) {
                    let vs = self.values(s);
                    let mut da = vec![0.0; g.len()];
                    for (r, &srow) in vs.iter().enumerate() {
                        for col in 0..c {
                            da[r * c + col] = g[r * c + col] * srow;
                        }
                    }
                    self.accum(work, a, &da);
                }
                if self.wants_grad(s) {
                    let va = self.values(a);
                    let rows = va.len() / c;
                    let mut ds = vec![0.0; rows];
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for col in 0..c {
                            dot += g[r * c + col] * va[r * c + col];
                        }
                        ds[r] = dot;
                    }
                    self.accum(work, s, &ds);
                }
            }
            Op::Sum { x } => {
                if self.wants_grad(x) {
                    let dx = vec![g[0]; self.tensor(x).numel()];
                    self.accum(work, x, &dx);
                }
            }
            Op::Mean { x } => {
                if self.wants_grad(x) {
                    let n = self.tensor(x).numel();
                    let dx = vec![g[0] / n as f64; n];
                    self.accum(work, x, &dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if !self.wants_grad(logits) {
                    return;
                }
                let classes = self.shape(logits)[1];
                let batch = targets.len();
                let values = self.values(logits);
                let mut dlogits = vec![0.0; values.len()];
                let scale = g[0] / batch as f64;
                for (b, &t) in targets.iter().enumerate() {
                    let row = &values[b * classes..(b + 1) * classes];
                    let drow = &mut dlogits[b * classes..(b + 1) * classes];
                    softmax_line(row, drow);
                    drow[t] -= 1.0;
                    for d in drow.iter_mut() {
                        *d *= scale;
                    }
                }
                self.accum(work, logits, &dlogits);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = self.tensor(gamma).numel();
                let xv = self.values(x).to_vec();
                let gv = self.values(gamma).to_vec();
                let rows = xv.len() / c;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let denom = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / denom).collect();
                    let h: Vec<f64> = grow.iter().zip(&gv).map(|(&gg, &ga)| gg * ga).collect();
                    let h_mean = h.iter().sum::<f64>() / c as f64;
                    let hx_mean = h.iter().zip(&xhat).map(|(&hv, &xh)| hv * xh).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = (h[j] - h_mean - xhat[j] * hx_mean) / denom;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.accum(work, x, &dx);
                self.accum(work, gamma, &dgamma);
                self.accum(work, beta, &dbeta);
            }
            Op::Reshape { x } => {
                self.accum(work, x, g);
            }
        }
    }

    /// Accumulate `sign * g (* other)` into `id`, reducing to a scalar when
    /// the operand was broadcast.
    fn accum_broadcast(
        &self,
        work: &mut [Option<Vec<f64>>],
        id: TensorId,
        g: &[f64],
        sign: f64,
        other: Option<&[f64]>,
    ) {
        if !self.wants_grad(id) {
            return;
        }
        let numel = self.nodes[id.0].tensor.numel();
        let term = |i: usize| -> f64 {
            let o = match other {
                Some(vals) if vals.len() == 1 => vals[0],
                Some(vals) => vals[i],
                None => 1.0,
            };
            sign * g[i] * o
        };
        if numel == g.len() {
            let dx: Vec<f64> = (0..g.len()).map(term).collect();
            self.accum(work, id, &dx);
        } else {
            debug_assert_eq!(numel, 1);
            // This operand was the broadcast scalar; `other` (if any) is the
            // full-size one.
            let o_full = other;
            let mut total = 0.0;
            for i in 0..g.len() {
                let o = match o_full {
                    Some(vals) => vals[i],
                    None => 1.0,
                };
                total += sign * g[i] * o;
            }
            self.accum(work, id, &[total]);
        }
    }
}

/// Visit every line along `axis` of a row-major tensor of the given shape.
/// The callback receives (start offset, stride, length).
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let block = stride * len;
    for o in 0..outer {
        for s in 0..stride {
            f(o * block + s, stride, len);
        }
    }
}
