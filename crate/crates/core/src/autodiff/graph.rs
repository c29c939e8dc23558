//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order. Parameter leaves borrow their values from a
//! [`ParamRegistry`] instead of copying them.

use std::collections::HashMap;

use super::optim::{ParamId, ParamRegistry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm threshold below which cosine similarity is undefined.
pub const NORM_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    AddN(Vec<Var>),
    Sum(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Element(Var, usize),
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    StopGradient,
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn leaf(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Gradient of a registry parameter, summed over every leaf that read it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

pub struct Graph<'r> {
    registry: Option<&'r ParamRegistry>,
    nodes: Vec<Node>,
}

impl Graph<'static> {
    /// A graph with no parameter registry; only explicit leaves.
    pub fn standalone() -> Self {
        Graph {
            registry: None,
            nodes: Vec::new(),
        }
    }
}

fn dims(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the caller passes buffers that cover the strided m×k, k×n and
    // m×n extents; every call site below derives strides from checked shapes.
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
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<'r> Graph<'r> {
    pub fn new(registry: &'r ParamRegistry) -> Self {
        Graph {
            registry: Some(registry),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .registry
                .expect("parameter node without registry")
                .get(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node holds finite values")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::DivScalar(a, b)
            | Op::Cosine { a, b, .. } => self.needs_grad(*a) || self.needs_grad(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::CausalSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::Element(a, _)
            | Op::SliceCols { x: a, .. }
            | Op::SoftmaxCe { logits: a, .. } => self.needs_grad(*a),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs_grad(*x) || self.needs_grad(*gain) || self.needs_grad(*bias)
            }
            Op::AddN(vs) | Op::ConcatRows(vs) | Op::ConcatCols(vs) => {
                vs.iter().any(|v| self.needs_grad(*v))
            }
        };
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf. Gradients are tracked when the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Owned(t.data().to_vec()),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn constant_data(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(dims(
                "constant",
                format!("{rows}x{cols} from {} values", data.len()),
            ));
        }
        self.push(rows, cols, data, Op::Leaf, "constant")
    }

    /// Reads a registry parameter. Trainable parameters receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        let reg = self.registry.expect("Graph::param requires a registry");
        let t = reg.get(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: reg.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dims("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            0.0,
            &mut out,
        );
        self.push(m, n, out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dims("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (1, k),
            0.0,
            &mut out,
        );
        self.push(m, n, out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(dims(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(r, c, out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, "mul", |x, y| x * y)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(dims("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        self.push(r, c, out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(r, c, out, Op::Scale(a, factor), "scale")
    }

    fn scalar_operand(&self, op: &'static str, s: Var) -> Result<f64> {
        if self.shape(s) != (1, 1) {
            return Err(dims(
                op,
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        Ok(self.value(s)[0])
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_operand("mul_scalar", s)?;
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(r, c, out, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_operand("div_scalar", s)?;
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x / k).collect();
        self.push(r, c, out, Op::DivScalar(a, s), "div_scalar")
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| dims("add_n", "no operands".into()))?;
        let (r, c) = self.shape(first);
        let mut out = vec![0.0; r * c];
        for &v in vars {
            if self.shape(v) != (r, c) {
                return Err(dims(
                    "add_n",
                    format!("{:?} vs {:?}", (r, c), self.shape(v)),
                ));
            }
            out.iter_mut().zip(self.value(v)).for_each(|(o, x)| *o += x);
        }
        self.push(r, c, out, Op::AddN(vars.to_vec()), "add_n")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        self.push(r, c, out, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(r, c, out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(r, c, out, Op::Exp(a), "exp")
    }

    /// Row-wise layer normalisation with a learnable `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(dims(
                "layer_norm",
                format!("input {r}x{c}, gain {:?}", self.shape(gain)),
            ));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let (r, c) = self.shape(scores);
        if r != c {
            return Err(dims(
                "causal_softmax",
                format!("scores must be square, got {r}x{c}"),
            ));
        }
        let src = self.value(scores);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * c + j] /= z;
            }
        }
        self.push(r, c, out, Op::CausalSoftmax(scores), "causal_softmax")
    }

    /// Stacks the listed rows of `table` (embedding lookup / row selection).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row table")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            rows.len(),
            c,
            out,
            Op::GatherRows(table, rows.to_vec()),
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&v| self.shape(v).1)
            .ok_or_else(|| dims("concat_rows", "no parts".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(dims("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&v| self.shape(v).0)
            .ok_or_else(|| dims("concat_cols", "no parts".into()))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return Err(dims(
                "concat_cols",
                format!("row counts {r} vs {}", self.shape(p).0),
            ));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(dims(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { x, start }, "slice_cols")
    }

    /// The flat element `index` of `a` as a `1×1` node.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).len();
        if index >= n {
            return Err(Error::Index(format!("element {index} of {n}")));
        }
        let v = self.value(a)[index];
        self.push(1, 1, vec![v], Op::Element(a, index), "element")
    }

    /// Cosine similarity of two equally sized nodes (flattened), as `1×1`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.len() != vb.len() {
            return Err(dims(
                "cosine_sim",
                format!("lengths {} vs {}", va.len(), vb.len()),
            ));
        }
        let norm_a = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_b = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_a <= NORM_EPS || norm_b <= NORM_EPS {
            return Err(Error::DegenerateInput(format!(
                "cosine similarity of vectors with norms {norm_a:e} and {norm_b:e}"
            )));
        }
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        self.push(
            1,
            1,
            vec![cos],
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            "cosine_sim",
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n {
            return Err(dims(
                "softmax_cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Data("cross entropy over zero positions".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} with {v} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[targets[i]];
        }
        loss /= n as f64;
        self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Identity in the forward pass; contributes no gradient backwards.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let data = self.value(a).to_vec();
        self.push(r, c, data, Op::StopGradient, "stop_gradient")
    }

    /// Back-propagates from a scalar node. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad
            && !matches!(self.nodes[loss.0].op, Op::Leaf | Op::Param(_))
        {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        out.leaves.insert(Var(i), g);
                    }
                }
                Op::Param(id) => {
                    if node.needs_grad {
                        match out.params.get_mut(id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                            None => {
                                out.params.insert(*id, g);
                            }
                        }
                    }
                }
                op => self.backprop_op(op, i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]))
    }

    fn backprop_op(&self, op: &Op, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(da) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), 1.0, da);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), 1.0, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(da) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, (n, 1), self.value(*b), (k, 1), 1.0, da);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    gemm(n, m, k, g, (1, n), self.value(*a), (k, 1), 1.0, db);
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    // output is rows×cols, input cols×rows
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs_grad(a) {
                    let other = self.value(b).to_vec();
                    let d = self.grad_buf(grads, a).unwrap();
                    d.iter_mut()
                        .zip(g)
                        .zip(&other)
                        .for_each(|((d, g), o)| *d += g * o);
                }
                if self.needs_grad(b) {
                    let other = self.value(a).to_vec();
                    let d = self.grad_buf(grads, b).unwrap();
                    d.iter_mut()
                        .zip(g)
                        .zip(&other)
                        .for_each(|((d, g), o)| *d += g * o);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_buf(grads, *row) {
                    for chunk in g.chunks(cols) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s)[0];
                if self.needs_grad(*s) {
                    let ds: f64 = self.value(*a).iter().zip(g).map(|(x, g)| x * g).sum();
                    self.grad_buf(grads, *s).unwrap()[0] += ds;
                }
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k);
                }
            }
            Op::DivScalar(a, s) => {
                let k = self.value(*s)[0];
                if self.needs_grad(*s) {
                    let ds: f64 = self.value(*a).iter().zip(g).map(|(x, g)| x * g).sum();
                    self.grad_buf(grads, *s).unwrap()[0] -= ds / (k * k);
                }
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g / k);
                }
            }
            Op::AddN(vs) => {
                for &v in vs {
                    if let Some(d) = self.grad_buf(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu(a) => {
                if self.needs_grad(*a) {
                    let x = self.value(*a).to_vec();
                    let d = self.grad_buf(grads, *a).unwrap();
                    d.iter_mut()
                        .zip(g)
                        .zip(&x)
                        .for_each(|((d, g), &x)| *d += g * gelu(x).1);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    let y = match &self.nodes[idx].value {
                        Value::Owned(y) => y,
                        Value::Param(_) => unreachable!(),
                    };
                    d.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * y * (1.0 - y));
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    let y = match &self.nodes[idx].value {
                        Value::Owned(y) => y,
                        Value::Param(_) => unreachable!(),
                    };
                    d.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * y);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = cols;
                if self.needs_grad(*gain) {
                    let d = self.grad_buf(grads, *gain).unwrap();
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        d.iter_mut()
                            .zip(gr)
                            .zip(hr)
                            .for_each(|((d, g), h)| *d += g * h);
                    }
                }
                if let Some(d) = self.grad_buf(grads, *bias) {
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if self.needs_grad(*x) {
                    let gain_v = self.value(*gain).to_vec();
                    let d = self.grad_buf(grads, *x).unwrap();
                    let mut dh = vec![0.0; c];
                    for i in 0..rows {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gain_v[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    let y = match &self.nodes[idx].value {
                        Value::Owned(y) => y,
                        Value::Param(_) => unreachable!(),
                    };
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr[..=i].iter().zip(&gr[..=i]).map(|(y, g)| y * g).sum();
                        for j in 0..=i {
                            d[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows(table, idxs) => {
                if let Some(d) = self.grad_buf(grads, *table) {
                    for (r, &src) in idxs.iter().enumerate() {
                        let row = &g[r * cols..(r + 1) * cols];
                        d[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].rows * cols;
                    if let Some(d) = self.grad_buf(grads, p) {
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].cols;
                    if let Some(d) = self.grad_buf(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * cols + offset..i * cols + offset + w];
                            d[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let full = self.nodes[x.0].cols;
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..rows {
                        let dst = &mut d[i * full + start..i * full + start + cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Element(a, index) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d[*index] += g[0];
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let cos = match &self.nodes[idx].value {
                    Value::Owned(y) => y[0],
                    Value::Param(_) => unreachable!(),
                };
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                let inv = 1.0 / (norm_a * norm_b);
                if let Some(d) = self.grad_buf(grads, *a) {
                    let s = cos / (norm_a * norm_a);
                    d.iter_mut()
                        .zip(&va)
                        .zip(&vb)
                        .for_each(|((d, x), y)| *d += g[0] * (y * inv - s * x));
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    let s = cos / (norm_b * norm_b);
                    d.iter_mut()
                        .zip(&va)
                        .zip(&vb)
                        .for_each(|((d, x), y)| *d += g[0] * (x * inv - s * y));
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if let Some(d) = self.grad_buf(grads, *logits) {
                    let (n, v) = self.shape(*logits);
                    let scale = g[0] / n as f64;
                    for i in 0..n {
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            d[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
