use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Scale(Var, f64),
    Mean(Var),
    SumRows(Var),
    SelectRow(Var, usize),
    Dropout(Var, Vec<f64>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax(Var, f64),
    Mse(Var, Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<Segment>),
    BlockDiagMatMul(Vec<(usize, &'a Tensor)>, Var),
    Attention(Box<AttentionRecord>),
}

/// Contiguous row range `[start, start + len)` of a stacked matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
struct AttentionRecord {
    qkv: Var,
    heads: usize,
    head_dim: usize,
    scale: f64,
    segments: Vec<Segment>,
    /// Softmax output per (segment, head), packed `len × len` blocks.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers aligned with `probs`, when training.
    keep: Option<Vec<f64>>,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    needs_grad: bool,
}

/// Records primitive applications in execution order and replays their
/// adjoints in reverse.
///
/// Leaves may borrow their values for the lifetime of the tape, so model
/// parameters do not need to be copied for each forward pass. Gradients of
/// leaves persist across [`Tape::backward`] calls and accumulate until
/// [`Tape::zero_grads`].
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)` with arbitrary strides on `a` and
/// `b`; `c` is contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, sa, b, sb, beta, c, n);
}

/// Like [`gemm`], but `c` has row stride `rsc` (unit column stride).
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0, "gemm: a out of bounds");
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0, "gemm: b out of bounds");
    assert!(c.len() > (m - 1) * rsc + (n - 1), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            c[i * rsc..i * rsc + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the asserts above keep every access of the three views in
    // bounds; `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Runs `f` on the adjoint buffer of `v`, allocating it on first use.
/// Inputs that do not need a gradient are skipped.
fn send(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: &dyn Fn(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn matrix_shape(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, needs_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor, op: Op<'a>, inputs: &[Var], name: &'static str) -> Result<Var, TensorError> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad, name)
    }

    /// Trainable leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(Cow::Owned(value), Op::Leaf, true, "leaf")
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Result<Var, TensorError> {
        self.push(Cow::Borrowed(value), Op::Leaf, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(Cow::Owned(value), Op::Constant, false, "constant")
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Result<Var, TensorError> {
        self.push(Cow::Borrowed(value), Op::Constant, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape_err<T>(&self, op: &str, a: Var, b: Var) -> Result<T, TensorError> {
        Err(TensorError::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        )))
    }

    fn require_matrix(&self, op: &str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("{op} needs a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return self.shape_err("matmul", a, b);
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out);
        let t = Tensor::new(&matrix_shape(m, n), out)?;
        self.derived(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return self.shape_err(name, a, b);
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.derived(t, Op::Add(a, b), &[a, b], "add")
    }

    /// `a + bias` with `bias` (one row, `a.cols()` wide) broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return self.shape_err("add_row", a, bias);
        }
        let bv = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        data.chunks_exact_mut(c).for_each(|r| add_into(r, bv));
        let t = Tensor::new(self.value(a).shape(), data)?;
        self.derived(t, Op::AddRow(a, bias), &[a, bias], "add_row")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same(a, b, "hadamard", |x, y| x * y)?;
        self.derived(t, Op::Hadamard(a, b), &[a, b], "hadamard")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.derived(t, Op::Relu(a), &[a], "relu")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.concat_cols_many(&[a, b])
    }

    /// Concatenates matrices along the column axis.
    pub fn concat_cols_many(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::ShapeMismatch("concat of nothing".into()))?;
        let (rows, _) = self.require_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_matrix("concat_cols", p)?;
            if r != rows {
                return self.shape_err("concat_cols", first, p);
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&matrix_shape(rows, total), out)?;
        self.derived(t, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Stacks matrices along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::ShapeMismatch("concat of nothing".into()))?;
        let (_, cols) = self.require_matrix("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.require_matrix("concat_rows", p)?;
            if c != cols {
                return self.shape_err("concat_rows", first, p);
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&matrix_shape(rows, cols), out)?;
        self.derived(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.require_matrix("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = Tensor::new(&matrix_shape(c, r), out)?;
        self.derived(t, Op::Transpose(a), &[a], "transpose")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v * c).collect())?;
        self.derived(t, Op::Scale(a, c), &[a], "scale")
    }

    /// Mean over every entry; a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::ShapeMismatch("mean of an empty tensor".into()));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.derived(Tensor::scalar(m), Op::Mean(a), &[a], "mean")
    }

    /// Column sums as a single row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = vec![0.0; c];
        for r in x.data().chunks_exact(c) {
            add_into(&mut out, r);
        }
        let t = Tensor::new(&matrix_shape(1, c), out)?;
        self.derived(t, Op::SumRows(a), &[a], "sum_rows")
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if i >= x.rows() {
            return Err(TensorError::ShapeMismatch(format!("row {i} of {:?}", x.shape())));
        }
        let t = Tensor::new(&matrix_shape(1, x.cols()), x.row(i).to_vec())?;
        self.derived(t, Op::SelectRow(a, i), &[a], "select_row")
    }

    /// Inverted dropout. At train time each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; otherwise the identity.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let t = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(v, m)| v * m).collect())?;
        self.derived(t, Op::Dropout(a, mask), &[a], "dropout")
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`
    /// (each one row, `cols` wide).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps {eps} must be > 0")));
        }
        let c = self.value(a).cols();
        if self.value(gamma).len() != c {
            return self.shape_err("layer_norm gamma", a, gamma);
        }
        if self.value(beta).len() != c {
            return self.shape_err("layer_norm beta", a, beta);
        }
        let x = self.value(a);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        self.derived(t, Op::LayerNorm { x: a, gamma, beta, xhat, inv_std }, &[a, gamma, beta], "layer_norm")
    }

    /// Row softmax of `logits / scale` restricted to the `true` entries of
    /// `mask` (row-major, same shape). Disallowed entries come out exactly 0.
    pub fn softmax_rows_masked(&mut self, logits: Var, mask: &crate::dag::BoolMatrix, scale: f64) -> Result<Var, TensorError> {
        let (r, c) = self.require_matrix("softmax_rows_masked", logits)?;
        if mask.size() != r || r != c {
            return Err(TensorError::ShapeMismatch(format!("mask {0}x{0} for logits {r}x{c}", mask.size())));
        }
        if !(scale > 0.0) {
            return Err(TensorError::InvalidArgument(format!("softmax scale {scale} must be > 0")));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in mask.row_indices(i) {
                max = max.max(row[j] / scale);
            }
            if !max.is_finite() {
                return Err(match mask.row_indices(i).next() {
                    None => TensorError::EmptyRowMask(i),
                    Some(_) => TensorError::NonFinite("masked_softmax"),
                });
            }
            let mut sum = 0.0;
            for j in mask.row_indices(i) {
                let e = (row[j] / scale - max).exp();
                dst[j] = e;
                sum += e;
            }
            for j in mask.row_indices(i) {
                dst[j] /= sum;
            }
        }
        let t = Tensor::new(&matrix_shape(r, c), out)?;
        self.derived(t, Op::MaskedSoftmax(logits, scale), &[logits], "softmax_rows_masked")
    }

    /// Mean squared difference; a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() || p.is_empty() {
            return self.shape_err("mse_loss", pred, target);
        }
        let m = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.derived(Tensor::scalar(m), Op::Mse(pred, target), &[pred, target], "mse_loss")
    }

    /// Output row `r` is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let (rows, cols) = self.require_matrix("gather_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::ShapeMismatch(format!("gather_rows: row {bad} of {rows}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::new(&matrix_shape(index.len(), cols), out)?;
        self.derived(t, Op::GatherRows(a, index), &[a], "gather_rows")
    }

    fn check_segments(&self, op: &str, rows: usize, segments: &[Segment]) -> Result<(), TensorError> {
        if segments.iter().any(|s| s.start + s.len > rows) {
            return Err(TensorError::ShapeMismatch(format!("{op}: segment past row {rows}")));
        }
        Ok(())
    }

    /// One output row per segment: the column sums of that segment's rows.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<Segment>) -> Result<Var, TensorError> {
        let (rows, cols) = self.require_matrix("segment_sum", a)?;
        self.check_segments("segment_sum", rows, &segments)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; segments.len() * cols];
        for (dst, seg) in out.chunks_exact_mut(cols).zip(&segments) {
            for r in seg.start..seg.start + seg.len {
                add_into(dst, &x[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(&matrix_shape(segments.len(), cols), out)?;
        self.derived(t, Op::SegmentSum(a, segments), &[a], "segment_sum")
    }

    /// Multiplies each row block of `h` by its own constant square operator:
    /// rows `[o, o + n)` of the output are `op · h[o..o + n]` for every
    /// `(o, op)` in `blocks`. Rows not covered by a block come out zero.
    pub fn block_diag_matmul(&mut self, blocks: Vec<(usize, &'a Tensor)>, h: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.require_matrix("block_diag_matmul", h)?;
        for (o, op) in &blocks {
            let n = op.rows();
            if op.shape() != [n, n] || o + n > rows {
                return Err(TensorError::ShapeMismatch(format!(
                    "block_diag_matmul: operator {:?} at row {o} of {rows}",
                    op.shape()
                )));
            }
        }
        let x = self.value(h).data();
        let mut out = vec![0.0; rows * cols];
        for (o, op) in &blocks {
            let n = op.rows();
            let span = o * cols..(o + n) * cols;
            gemm(n, n, cols, op.data(), (n, 1), &x[span.clone()], (cols, 1), 0.0, &mut out[span]);
        }
        let t = Tensor::new(&matrix_shape(rows, cols), out)?;
        self.derived(t, Op::BlockDiagMatMul(blocks, h), &[h], "block_diag_matmul")
    }

    /// Multi-head attention restricted to row segments, with one boolean
    /// mask per head and segment.
    ///
    /// `qkv` is `N × 3d`: queries, keys and values side by side, each split
    /// into `heads` column groups of `d / heads`. Within segment `s`, head
    /// `i` computes `softmax_masked(Q Kᵀ / scale, masks[s][i]) · V`; rows
    /// never attend outside their own segment. Attention weights go through
    /// inverted dropout when `train` is set. The output is `N × d` with the
    /// heads concatenated along columns.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: Vec<Segment>,
        masks: &[&[crate::dag::BoolMatrix]],
        scale: f64,
        dropout: f64,
        train: bool,
        seed: u64,
    ) -> Result<Var, TensorError> {
        let (rows, cols3) = self.require_matrix("segment_attention", qkv)?;
        if heads == 0 || cols3 % (3 * heads) != 0 {
            return Err(TensorError::ShapeMismatch(format!("segment_attention: {cols3} columns for {heads} heads")));
        }
        self.check_segments("segment_attention", rows, &segments)?;
        if masks.len() != segments.len() {
            return Err(TensorError::ShapeMismatch(format!("{} mask sets for {} segments", masks.len(), segments.len())));
        }
        for (m, s) in masks.iter().zip(&segments) {
            if m.len() != heads || m.iter().any(|mm| mm.size() != s.len) {
                return Err(TensorError::ShapeMismatch("segment_attention: mask does not fit its segment".into()));
            }
        }
        if !(scale > 0.0) {
            return Err(TensorError::InvalidArgument(format!("attention scale {scale} must be > 0")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {dropout} not in [0, 1)")));
        }
        let d = cols3 / 3;
        let hd = d / heads;
        let x = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * heads).sum());
        let use_drop = train && dropout > 0.0;
        let mut keep = use_drop.then(|| Vec::with_capacity(probs.capacity()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = Vec::new();
        let mut weights = Vec::new();
        for (seg, seg_masks) in segments.iter().zip(masks) {
            let (o, n) = (seg.start, seg.len);
            for (i, mask) in seg_masks.iter().enumerate() {
                let q = &x[o * cols3 + i * hd..];
                let k = &x[o * cols3 + d + i * hd..];
                let v = &x[o * cols3 + 2 * d + i * hd..];
                scores.clear();
                scores.resize(n * n, 0.0);
                gemm(n, hd, n, q, (cols3, 1), k, (1, cols3), 0.0, &mut scores);
                for r in 0..n {
                    let row = &mut scores[r * n..(r + 1) * n];
                    let max = mask.row_indices(r).map(|j| row[j] / scale).fold(f64::NEG_INFINITY, f64::max);
                    if !max.is_finite() {
                        return Err(match mask.row_indices(r).next() {
                            None => TensorError::EmptyRowMask(r),
                            Some(_) => TensorError::NonFinite("segment_attention"),
                        });
                    }
                    let mut sum = 0.0;
                    weights.clear();
                    weights.resize(n, 0.0);
                    for j in mask.row_indices(r) {
                        weights[j] = (row[j] / scale - max).exp();
                        sum += weights[j];
                    }
                    for (dst, w) in row.iter_mut().zip(&weights) {
                        *dst = w / sum;
                    }
                }
                probs.extend_from_slice(&scores);
                if let Some(keep) = &mut keep {
                    let mult = 1.0 / (1.0 - dropout);
                    for s in scores.iter_mut() {
                        let m = if rng.gen::<f64>() < dropout { 0.0 } else { mult };
                        keep.push(m);
                        *s *= m;
                    }
                }
                gemm_strided(n, n, hd, &scores, (n, 1), v, (cols3, 1), 0.0, &mut out[o * d + i * hd..], d);
            }
        }
        let t = Tensor::new(&matrix_shape(rows, d), out)?;
        let rec = AttentionRecord { qkv, heads, head_dim: hd, scale, segments, probs, keep };
        self.derived(t, Op::Attention(Box::new(rec)), &[qkv], "segment_attention")
    }

    /// Propagates `d loss / d v` to every tracked leaf and adds it to the
    /// leaf's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::DetachedGraph);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape();
                    match &mut self.leaf_grads[idx] {
                        Some(acc) => add_into(acc.data_mut(), &g),
                        slot @ None => *slot = Some(Tensor::new(shape, g)?),
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.cols();
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    send(&mut adj, nodes, *a, &|s| gemm(m, n, k, &g, (n, 1), bv, (1, n), 1.0, s));
                    send(&mut adj, nodes, *b, &|s| gemm(k, m, n, av, (1, k), &g, (n, 1), 1.0, s));
                }
                Op::Add(a, b) => {
                    send(&mut adj, nodes, *a, &|s| add_into(s, &g));
                    send(&mut adj, nodes, *b, &|s| add_into(s, &g));
                }
                Op::AddRow(a, bias) => {
                    send(&mut adj, nodes, *a, &|s| add_into(s, &g));
                    let c = nodes[bias.0].value.len();
                    send(&mut adj, nodes, *bias, &|s| g.chunks_exact(c).for_each(|r| add_into(s, r)));
                }
                Op::Hadamard(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    send(&mut adj, nodes, *a, &|s| s.iter_mut().zip(&g).zip(bv).for_each(|((d, g), y)| *d += g * y));
                    send(&mut adj, nodes, *b, &|s| s.iter_mut().zip(&g).zip(av).for_each(|((d, g), x)| *d += g * x));
                }
                Op::Relu(a) => {
                    let y = node.value.data();
                    send(&mut adj, nodes, *a, &|s| {
                        s.iter_mut().zip(&g).zip(y).for_each(|((d, g), y)| {
                            if *y > 0.0 {
                                *d += g
                            }
                        })
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        send(&mut adj, nodes, p, &|s| {
                            for (dst, src) in s.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                add_into(dst, &src[off..off + w]);
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        send(&mut adj, nodes, p, &|s| add_into(s, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    send(&mut adj, nodes, *a, &|s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Scale(a, c) => {
                    send(&mut adj, nodes, *a, &|s| s.iter_mut().zip(&g).for_each(|(d, g)| *d += g * c));
                }
                Op::Mean(a) => {
                    let share = g[0] / nodes[a.0].value.len() as f64;
                    send(&mut adj, nodes, *a, &|s| s.iter_mut().for_each(|d| *d += share));
                }
                Op::SumRows(a) => {
                    let c = g.len();
                    send(&mut adj, nodes, *a, &|s| s.chunks_exact_mut(c).for_each(|r| add_into(r, &g)));
                }
                Op::SelectRow(a, i) => {
                    let c = g.len();
                    send(&mut adj, nodes, *a, &|s| add_into(&mut s[i * c..(i + 1) * c], &g));
                }
                Op::Dropout(a, mask) => {
                    send(&mut adj, nodes, *a, &|s| s.iter_mut().zip(&g).zip(mask).for_each(|((d, g), m)| *d += g * m));
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = nodes[gamma.0].value.len();
                    let gm = nodes[gamma.0].value.data();
                    send(&mut adj, nodes, *beta, &|s| g.chunks_exact(c).for_each(|r| add_into(s, r)));
                    send(&mut adj, nodes, *gamma, &|s| {
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            s.iter_mut().zip(gr).zip(hr).for_each(|((d, g), h)| *d += g * h);
                        }
                    });
                    send(&mut adj, nodes, *x, &|s| {
                        let cf = c as f64;
                        for (r, ((sr, gr), hr)) in
                            s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)).enumerate()
                        {
                            // dxhat = g·γ; dx = inv_std·(dxhat - mean(dxhat) - xhat·mean(dxhat·xhat))
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let d = gr[j] * gm[j];
                                m1 += d;
                                m2 += d * hr[j];
                            }
                            m1 /= cf;
                            m2 /= cf;
                            for j in 0..c {
                                sr[j] += inv_std[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                Op::MaskedSoftmax(a, scale) => {
                    let c = node.value.cols();
                    let y = node.value.data();
                    send(&mut adj, nodes, *a, &|s| {
                        for ((sr, gr), yr) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for j in 0..c {
                                if yr[j] != 0.0 {
                                    sr[j] += yr[j] * (gr[j] - dot) / scale;
                                }
                            }
                        }
                    });
                }
                Op::GatherRows(a, index) => {
                    let c = node.value.cols();
                    send(&mut adj, nodes, *a, &|s| {
                        for (r, &i) in index.iter().enumerate() {
                            add_into(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    });
                }
                Op::SegmentSum(a, segments) => {
                    let c = node.value.cols();
                    send(&mut adj, nodes, *a, &|s| {
                        for (gr, seg) in g.chunks_exact(c).zip(segments) {
                            for r in seg.start..seg.start + seg.len {
                                add_into(&mut s[r * c..(r + 1) * c], gr);
                            }
                        }
                    });
                }
                Op::BlockDiagMatMul(blocks, h) => {
                    let c = node.value.cols();
                    send(&mut adj, nodes, *h, &|s| {
                        for (o, op) in blocks {
                            let n = op.rows();
                            let span = o * c..(o + n) * c;
                            // dH = opᵀ · dOut
                            gemm(n, n, c, op.data(), (1, n), &g[span.clone()], (c, 1), 1.0, &mut s[span]);
                        }
                    });
                }
                Op::Attention(rec) => {
                    let x = nodes[rec.qkv.0].value.data();
                    send(&mut adj, nodes, rec.qkv, &|s| attention_backward(rec, x, &g, s));
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (nodes[p.0].value.data(), nodes[t.0].value.data());
                    let k = 2.0 * g[0] / pv.len() as f64;
                    send(&mut adj, nodes, *p, &|s| {
                        s.iter_mut().zip(pv).zip(tv).for_each(|((d, p), t)| *d += k * (p - t))
                    });
                    send(&mut adj, nodes, *t, &|s| {
                        s.iter_mut().zip(pv).zip(tv).for_each(|((d, p), t)| *d -= k * (p - t))
                    });
                }
            }
        }
        Ok(())
    }
}

fn attention_backward(rec: &AttentionRecord, x: &[f64], g: &[f64], s: &mut [f64]) {
    let hd = rec.head_dim;
    let d = hd * rec.heads;
    let cols3 = 3 * d;
    let mut off = 0;
    let mut dp = Vec::new();
    let mut dropped = Vec::new();
    for seg in &rec.segments {
        let (o, n) = (seg.start, seg.len);
        for i in 0..rec.heads {
            let p = &rec.probs[off..off + n * n];
            let pd: &[f64] = match &rec.keep {
                Some(keep) => {
                    dropped.clear();
                    dropped.extend(p.iter().zip(&keep[off..off + n * n]).map(|(a, b)| a * b));
                    &dropped
                }
                None => p,
            };
            let go = &g[o * d + i * hd..];
            let (qc, kc, vc) = (i * hd, d + i * hd, 2 * d + i * hd);
            // dP' = dOut · Vᵀ
            dp.clear();
            dp.resize(n * n, 0.0);
            gemm(n, hd, n, go, (d, 1), &x[o * cols3 + vc..], (1, cols3), 0.0, &mut dp);
            // dV += P'ᵀ · dOut
            gemm_strided(n, n, hd, pd, (1, n), go, (d, 1), 1.0, &mut s[o * cols3 + vc..], cols3);
            if let Some(keep) = &rec.keep {
                dp.iter_mut().zip(&keep[off..off + n * n]).for_each(|(a, k)| *a *= k);
            }
            // dS = P ⊙ (dP - rowdot(dP, P)) / scale
            for r in 0..n {
                let pr = &p[r * n..(r + 1) * n];
                let dr = &mut dp[r * n..(r + 1) * n];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = if *pv != 0.0 { pv * (*dv - dot) / rec.scale } else { 0.0 };
                }
            }
            // dQ += dS · K, dK += dSᵀ · Q
            gemm_strided(n, n, hd, &dp, (n, 1), &x[o * cols3 + kc..], (cols3, 1), 1.0, &mut s[o * cols3 + qc..], cols3);
            gemm_strided(n, n, hd, &dp, (1, n), &x[o * cols3 + qc..], (cols3, 1), 1.0, &mut s[o * cols3 + kc..], cols3);
            off += n * n;
        }
    }
}
