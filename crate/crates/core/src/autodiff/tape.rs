use std::cell::{Cell, Ref, RefCell};

use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Attention band geometry shared by the score and aggregation kernels.
#[derive(Clone, Copy, Debug)]
struct Band {
    heads: usize,
    n: usize,
    m: usize,
    /// Half-width of the local window; `None` means every key is visible.
    half: Option<usize>,
    width: usize,
}

impl Band {
    fn new(heads: usize, n: usize, m: usize, window: Option<usize>) -> Self {
        match window {
            Some(w) => {
                let half = w.min(m.saturating_sub(1));
                Band {
                    heads,
                    n,
                    m,
                    half: Some(half),
                    width: 2 * half + 1,
                }
            }
            None => Band {
                heads,
                n,
                m,
                half: None,
                width: m,
            },
        }
    }

    /// Range of band columns that map to valid keys for query row `i`.
    #[inline]
    fn cols(&self, i: usize) -> std::ops::Range<usize> {
        match self.half {
            None => 0..self.m,
            Some(h) => {
                let lo = h.saturating_sub(i);
                let hi = (self.m + h - i).min(self.width);
                lo..hi
            }
        }
    }

    /// Key index addressed by band column `c` of query row `i`.
    #[inline]
    fn key(&self, i: usize, c: usize) -> usize {
        match self.half {
            None => c,
            Some(h) => i + c - h,
        }
    }

    fn pairs(&self) -> u64 {
        (0..self.n).map(|i| self.cols(i).len() as u64).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows { x: Var, norms: Vec<f64> },
    AttnProbs { q: Var, k: Var, band: Band },
    AttnApply { p: Var, v: Var, band: Band },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the recording is already a
/// topological order and `backward` replays it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    macs: Cell<u64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Multiply-accumulates performed by forward ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn count(&self, macs: u64) {
        self.macs.set(self.macs.get() + macs);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm_acc(m, k, n, nodes[a.0].value.data(), false, nodes[b.0].value.data(), false, &mut out);
        }
        self.count((m * k * n) as u64);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = {
            let v = self.value(a);
            let d = v.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            out
        };
        let rg = self.requires_grad(a);
        self.push("transpose", Tensor::new(&[n, m], out)?, Op::Transpose(a), rg)
    }

    /// `x + b` with the vector `b` added to every row of `x`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", format!("bias {:?} for {n} columns", self.shape(b))));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (xd, bd) = (nodes[x.0].value.data(), nodes[b.0].value.data());
            let mut out = xd.to_vec();
            for r in 0..m {
                for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
            out
        };
        let rg = self.requires_grad(x) || self.requires_grad(b);
        self.push("add_row", Tensor::new(&[m, n], out)?, Op::AddRow(x, b), rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, value, op, rg)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = {
            let v = self.value(a);
            Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect())?
        };
        let rg = self.requires_grad(a);
        self.push(name, value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- reductions and indexing ----------------------------------------

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let v = self.value(a);
            if axis >= v.rank() {
                return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", v.shape())));
            }
            let (outer, len, inner) = axis_split(v.shape(), axis);
            let mut out = v.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (out[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            Tensor::new(v.shape(), out)?
        };
        let rg = self.requires_grad(a);
        self.push("softmax", value, Op::Softmax { x: a, axis }, rg)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", "gain and bias must match the last axis"));
        }
        let (out, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let (g, b) = (nodes[gain.0].value.data(), nodes[bias.0].value.data());
            let mut out = vec![0.0; m * n];
            let mut normalized = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            for r in 0..m {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for c in 0..n {
                    let xh = (row[c] - mean) * inv;
                    normalized[r * n + c] = xh;
                    out[r * n + c] = g[c] * xh + b[c];
                }
            }
            (out, normalized, inv_std)
        };
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push("layer_norm", Tensor::new(&[m, n], out)?, op, rg)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum over the last axis of a matrix: `[m×n] -> [m]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_rows", a)?;
        let out = {
            let v = self.value(a);
            (0..m).map(|r| v.data()[r * n..(r + 1) * n].iter().sum()).collect()
        };
        let rg = self.requires_grad(a);
        self.push("sum_rows", Tensor::vector(out), Op::SumRows(a), rg)
    }

    /// Picks elements by flat index into a vector.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let d = v.data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
                return Err(Error::shape("gather", format!("index {bad} out of {}", d.len())));
            }
            indices.iter().map(|&i| d[i]).collect()
        };
        let rg = self.requires_grad(a);
        self.push("gather", Tensor::vector(out), Op::Gather(a, indices.to_vec()), rg)
    }

    /// Column `col` of a matrix as a vector.
    pub fn column(&self, a: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims2("column", a)?;
        if col >= n {
            return Err(Error::shape("column", format!("column {col} of {n}")));
        }
        let idx: Vec<usize> = (0..m).map(|r| r * n + col).collect();
        self.gather(a, &idx)
    }

    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let out = {
            let v = self.value(a);
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                out.extend_from_slice(v.row(r));
            }
            out
        };
        let rg = self.requires_grad(a);
        self.push(
            "gather_rows",
            Tensor::new(&[rows.len(), n], out)?,
            Op::GatherRows(a, rows.to_vec()),
            rg,
        )
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("normalize_rows", a)?;
        let (out, norms) = {
            let v = self.value(a);
            let mut out = v.data().to_vec();
            let mut norms = vec![0.0; m];
            for r in 0..m {
                let row = &mut out[r * n..(r + 1) * n];
                let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                norms[r] = norm;
                row.iter_mut().for_each(|x| *x /= norm);
            }
            (out, norms)
        };
        let rg = self.requires_grad(a);
        self.push(
            "normalize_rows",
            Tensor::new(&[m, n], out)?,
            Op::NormalizeRows { x: a, norms },
            rg,
        )
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention weights.
    ///
    /// `q: [n×C]`, `k: [m×C]`, split into `heads` column blocks. With
    /// `window = Some(w)` (requires `n == m`) query `i` sees keys `i-w..=i+w`;
    /// the result is stored banded as `[heads, n, 2w+1]`, zero outside the
    /// sequence. With `None` every key is visible and the shape is `[heads, n, m]`.
    pub fn attention_probs(&self, q: Var, k: Var, heads: usize, window: Option<usize>) -> Result<Var> {
        let (n, c) = self.dims2("attention_probs", q)?;
        let (m, c2) = self.dims2("attention_probs", k)?;
        if c != c2 || heads == 0 || c % heads != 0 {
            return Err(Error::shape(
                "attention_probs",
                format!("q width {c}, k width {c2}, heads {heads}"),
            ));
        }
        if window.is_some() && n != m {
            return Err(Error::shape("attention_probs", "windowed attention needs n == m"));
        }
        let band = Band::new(heads, n, m, window);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; heads * n * band.width];
        {
            let nodes = self.nodes.borrow();
            let (qd, kd) = (nodes[q.0].value.data(), nodes[k.0].value.data());
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qd[i * c + h * dh..i * c + (h + 1) * dh];
                    let base = (h * n + i) * band.width;
                    let cols = band.cols(i);
                    let mut max = f64::NEG_INFINITY;
                    for col in cols.clone() {
                        let j = band.key(i, col);
                        let kj = &kd[j * c + h * dh..j * c + (h + 1) * dh];
                        let s = dot(qi, kj) * scale;
                        out[base + col] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for col in cols.clone() {
                        let e = (out[base + col] - max).exp();
                        out[base + col] = e;
                        total += e;
                    }
                    for col in cols {
                        out[base + col] /= total;
                    }
                }
            }
        }
        self.count(band.pairs() * c as u64);
        let rg = self.requires_grad(q) || self.requires_grad(k);
        self.push(
            "attention_probs",
            Tensor::new(&[heads, n, band.width], out)?,
            Op::AttnProbs { q, k, band },
            rg,
        )
    }

    /// Weighted sum of value rows under attention weights from [`Tape::attention_probs`].
    pub fn attention_apply(&self, p: Var, v: Var, window: Option<usize>) -> Result<Var> {
        let pshape = self.shape(p);
        let (m, c) = self.dims2("attention_apply", v)?;
        let [heads, n, width] = pshape[..] else {
            return Err(Error::shape("attention_apply", format!("weights {pshape:?}")));
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("attention_apply", format!("{heads} heads for width {c}")));
        }
        let band = Band::new(heads, n, m, window);
        if band.width != width {
            return Err(Error::shape(
                "attention_apply",
                format!("weights width {width}, expected {}", band.width),
            ));
        }
        let dh = c / heads;
        let mut out = vec![0.0; n * c];
        {
            let nodes = self.nodes.borrow();
            let (pd, vd) = (nodes[p.0].value.data(), nodes[v.0].value.data());
            for h in 0..heads {
                for i in 0..n {
                    let base = (h * n + i) * width;
                    let oi = &mut out[i * c + h * dh..i * c + (h + 1) * dh];
                    for col in band.cols(i) {
                        let w = pd[base + col];
                        let j = band.key(i, col);
                        let vj = &vd[j * c + h * dh..j * c + (h + 1) * dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.count(band.pairs() * c as u64);
        let rg = self.requires_grad(p) || self.requires_grad(v);
        self.push(
            "attention_apply",
            Tensor::new(&[n, c], out)?,
            Op::AttnApply { p, v, band },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::Contract(format!("unknown node {}", loss.0)));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        for (idx, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                match &mut grads[idx] {
                    Some(g) => g.add_assign(&a),
                    slot @ None => *slot = Some(a),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut adj[target.0] {
        Some(t) => t.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn map_grad(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                gemm_acc(m, n, k, g.data(), false, val(*b).data(), true, &mut da);
                accumulate(nodes, adj, *a, Tensor::new(&[m, k], da).unwrap());
            }
            if rg(*b) {
                let mut db = vec![0.0; k * n];
                gemm_acc(k, m, n, val(*a).data(), true, g.data(), false, &mut db);
                accumulate(nodes, adj, *b, Tensor::new(&[k, n], db).unwrap());
            }
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2().unwrap();
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = g.data()[j * m + i];
                }
            }
            accumulate(nodes, adj, *a, Tensor::new(&[m, n], da).unwrap());
        }
        Op::Add(a, b) => {
            accumulate(nodes, adj, *a, g.clone());
            accumulate(nodes, adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, adj, *a, g.clone());
            if rg(*b) {
                accumulate(nodes, adj, *b, map_grad(g, val(*b), |gv, _| -gv));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(nodes, adj, *a, map_grad(g, val(*b), |gv, bv| gv * bv));
            }
            if rg(*b) {
                accumulate(nodes, adj, *b, map_grad(g, val(*a), |gv, av| gv * av));
            }
        }
        Op::Div(a, b) => {
            if rg(*a) {
                accumulate(nodes, adj, *a, map_grad(g, val(*b), |gv, bv| gv / bv));
            }
            if rg(*b) {
                // d(a/b)/db = -(a/b)/b
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(val(*b).data())
                    .map(|((gv, q), bv)| -gv * q / bv)
                    .collect();
                accumulate(nodes, adj, *b, Tensor::new(out.shape(), gb).unwrap());
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(node.op, Op::Minimum(..));
            let (av, bv) = (val(*a).data(), val(*b).data());
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; av.len()];
            for i in 0..av.len() {
                // ties route to the first operand
                let pick_a = if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                if pick_a {
                    ga[i] = g.data()[i];
                } else {
                    gb[i] = g.data()[i];
                }
            }
            accumulate(nodes, adj, *a, Tensor::new(out.shape(), ga).unwrap());
            accumulate(nodes, adj, *b, Tensor::new(out.shape(), gb).unwrap());
        }
        Op::Scale(a, c) => accumulate(nodes, adj, *a, map_grad(g, out, |gv, _| gv * c)),
        Op::AddScalar(a) => accumulate(nodes, adj, *a, g.clone()),
        Op::AddRow(x, b) => {
            accumulate(nodes, adj, *x, g.clone());
            if rg(*b) {
                let (m, n) = out.dims2().unwrap();
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for (d, gv) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *d += gv;
                    }
                }
                accumulate(nodes, adj, *b, Tensor::vector(db));
            }
        }
        Op::Gelu(a) => accumulate(nodes, adj, *a, map_grad(g, val(*a), |gv, x| gv * gelu_grad(x))),
        Op::Relu(a) => accumulate(
            nodes,
            adj,
            *a,
            map_grad(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
        ),
        Op::Exp(a) => accumulate(nodes, adj, *a, map_grad(g, out, |gv, y| gv * y)),
        Op::Log(a) => accumulate(nodes, adj, *a, map_grad(g, val(*a), |gv, x| gv / x)),
        Op::Sigmoid(a) => accumulate(nodes, adj, *a, map_grad(g, out, |gv, y| gv * y * (1.0 - y))),
        Op::Abs(a) => accumulate(
            nodes,
            adj,
            *a,
            map_grad(g, val(*a), |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        ),
        Op::Clamp(a, lo, hi) => accumulate(
            nodes,
            adj,
            *a,
            map_grad(g, val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
        ),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dotp: f64 = (0..len).map(|j| y[idx(j)] * gd[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dotp);
                    }
                }
            }
            accumulate(nodes, adj, *x, Tensor::new(out.shape(), dx).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let (m, n) = out.dims2().unwrap();
            let gd = g.data();
            let gain_v = val(*gain).data();
            if rg(*gain) || rg(*bias) {
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dgain[c] += gd[r * n + c] * normalized[r * n + c];
                        dbias[c] += gd[r * n + c];
                    }
                }
                accumulate(nodes, adj, *gain, Tensor::vector(dgain));
                accumulate(nodes, adj, *bias, Tensor::vector(dbias));
            }
            if rg(*x) {
                let mut dx = vec![0.0; m * n];
                let nf = n as f64;
                for r in 0..m {
                    let xh = &normalized[r * n..(r + 1) * n];
                    let dxh: Vec<f64> = (0..n).map(|c| gd[r * n + c] * gain_v[c]).collect();
                    let sum_d: f64 = dxh.iter().sum();
                    let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = inv_std[r] / nf * (nf * dxh[c] - sum_d - xh[c] * sum_dx);
                    }
                }
                accumulate(nodes, adj, *x, Tensor::new(&[m, n], dx).unwrap());
            }
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, adj, *a, Tensor::filled(val(*a).shape(), gv));
        }
        Op::SumRows(a) => {
            let (m, n) = val(*a).dims2().unwrap();
            let mut da = vec![0.0; m * n];
            for r in 0..m {
                da[r * n..(r + 1) * n].fill(g.data()[r]);
            }
            accumulate(nodes, adj, *a, Tensor::new(&[m, n], da).unwrap());
        }
        Op::Gather(a, indices) => {
            let mut da = Tensor::zeros(val(*a).shape());
            for (&i, gv) in indices.iter().zip(g.data()) {
                da.data_mut()[i] += gv;
            }
            accumulate(nodes, adj, *a, da);
        }
        Op::GatherRows(a, rows) => {
            let mut da = Tensor::zeros(val(*a).shape());
            let n = out.dims2().unwrap().1;
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..n {
                    da.data_mut()[r * n + c] += g.data()[k * n + c];
                }
            }
            accumulate(nodes, adj, *a, da);
        }
        Op::NormalizeRows { x, norms } => {
            let (m, n) = out.dims2().unwrap();
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &gd[r * n..(r + 1) * n];
                let proj = dot(yr, gr);
                for c in 0..n {
                    dx[r * n + c] = (gr[c] - yr[c] * proj) / norms[r];
                }
            }
            accumulate(nodes, adj, *x, Tensor::new(&[m, n], dx).unwrap());
        }
        Op::AttnProbs { q, k, band } => {
            let (n, c) = val(*q).dims2().unwrap();
            let dh = c / band.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, pd, gd) = (val(*q).data(), val(*k).data(), out.data(), g.data());
            let mut dq = vec![0.0; n * c];
            let mut dk = vec![0.0; band.m * c];
            for h in 0..band.heads {
                for i in 0..n {
                    let base = (h * n + i) * band.width;
                    let cols = band.cols(i);
                    let dotp: f64 = cols.clone().map(|col| pd[base + col] * gd[base + col]).sum();
                    for col in cols {
                        let ds = pd[base + col] * (gd[base + col] - dotp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let j = band.key(i, col);
                        for t in h * dh..(h + 1) * dh {
                            dq[i * c + t] += ds * kd[j * c + t];
                            dk[j * c + t] += ds * qd[i * c + t];
                        }
                    }
                }
            }
            accumulate(nodes, adj, *q, Tensor::new(&[n, c], dq).unwrap());
            accumulate(nodes, adj, *k, Tensor::new(&[band.m, c], dk).unwrap());
        }
        Op::AttnApply { p, v, band } => {
            let (m, c) = val(*v).dims2().unwrap();
            let n = band.n;
            let dh = c / band.heads;
            let (pd, vd, gd) = (val(*p).data(), val(*v).data(), g.data());
            let mut dp = vec![0.0; pd.len()];
            let mut dv = vec![0.0; m * c];
            for h in 0..band.heads {
                for i in 0..n {
                    let base = (h * n + i) * band.width;
                    let gi = &gd[i * c + h * dh..i * c + (h + 1) * dh];
                    for col in band.cols(i) {
                        let j = band.key(i, col);
                        let vj = &vd[j * c + h * dh..j * c + (h + 1) * dh];
                        dp[base + col] = dot(gi, vj);
                        let w = pd[base + col];
                        for (d, gv) in dv[j * c + h * dh..j * c + (h + 1) * dh].iter_mut().zip(gi) {
                            *d += w * gv;
                        }
                    }
                }
            }
            accumulate(nodes, adj, *p, Tensor::new(val(*p).shape(), dp).unwrap());
            accumulate(nodes, adj, *v, Tensor::new(&[m, c], dv).unwrap());
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of the Gaussian error linear unit.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Number of query/key pairs a banded self-attention over `t` tokens scores.
pub fn window_pairs(t: usize, half_window: usize) -> u64 {
    Band::new(1, t, t, Some(half_window)).pairs()
}
