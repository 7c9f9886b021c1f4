use super::{matmul_into, matrix_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var, Vec<usize>),
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in creation order; inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradients produced by [`Tape::backward`], populated for exactly the leaves
/// created with `requires_grad`.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub(crate) fn take_raw(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.flops += value.len() as u64;
        self.push(name, value, &[x], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        self.flops += 2 * (m * k * value.cols()) as u64;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        self.flops += value.len() as u64;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    /// `x[m×n] + row[1×n]`, the row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        if rv.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape.clone(),
                rhs: rv.shape.clone(),
            });
        }
        let data = xv
            .data
            .chunks(n)
            .flat_map(|r| r.iter().zip(&rv.data).map(|(a, b)| a + b))
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.flops += value.len() as u64;
        self.push("add_row", value, &[x, row], Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        self.flops += value.len() as u64;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    /// Element-wise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: xv.shape.clone(),
                rhs: vec![factor.len()],
            });
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&factor).map(|(a, b)| a * b).collect(),
        };
        self.flops += value.len() as u64;
        self.push("mul_const", value, &[x], Op::MulConst(x, factor))
    }

    /// Zero every row whose flag in `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if keep.len() != xv.rows() {
            return Err(Error::Shape {
                op: "mask_rows",
                lhs: xv.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let factor = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, n))
            .collect();
        self.mul_const(x, factor)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Softmax over the last axis. `mask` is either one flag per column
    /// (broadcast over rows) or one flag per element; masked entries come out
    /// as exactly zero.
    pub fn softmax_last(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(m) = mask {
            if m.len() != n && m.len() != xv.len() {
                return Err(Error::Shape {
                    op: "softmax_last",
                    lhs: xv.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let allowed = |r: usize, j: usize| match mask {
            None => true,
            Some(m) if m.len() == n => m[j],
            Some(m) => m[r * n + j],
        };
        let mut data = vec![0.0; xv.len()];
        for (r, (row, out)) in xv.data.chunks(n).zip(data.chunks_mut(n)).enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(r, j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            let mut sum = 0.0;
            for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                if allowed(r, j) {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.flops += 3 * value.len() as u64;
        self.push("softmax_last", value, &[x], Op::Softmax(x))
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape.clone(),
                rhs: gv.shape.clone(),
            });
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut data = vec![0.0; xv.len()];
        for ((row, xh), out) in xv.data.chunks(d).zip(xhat.chunks_mut(d)).zip(data.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                xh[j] = (row[j] - mean) * inv;
                out[j] = gv.data[j] * xh[j] + bv.data[j];
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.flops += 8 * value.len() as u64;
        self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape.len() > 2 || pv.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: pv.shape.clone(),
                });
            }
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / n;
        let value = Tensor::matrix(rows, n, data)?;
        self.push("concat_rows", value, parts, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape.len() > 2 || pv.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: pv.shape.clone(),
                });
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if len == 0 || start + len > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: xv.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let value = Tensor::matrix(len, n, xv.data[start * n..(start + len) * n].to_vec())?;
        self.push("slice_rows", value, &[x], Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let data = xv
            .data
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Tensor::matrix(xv.rows(), len, data)?;
        self.push("slice_cols", value, &[x], Op::SliceCols(x, start))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.flops += self.value(x).len() as u64;
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Arithmetic mean of the selected rows, as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::contract(format!(
                "mean_rows selection {rows:?} invalid for shape {:?}",
                xv.shape
            )));
        }
        let mut data = vec![0.0; n];
        for &r in rows {
            for (o, v) in data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.flops += (rows.len() * n) as u64;
        let value = Tensor::matrix(1, n, data)?;
        self.push("mean_rows", value, &[x], Op::MeanRows(x, rows.to_vec()))
    }

    /// Rotate each `(2j, 2j+1)` column pair of row `r` by `angles[r][j]`,
    /// supplied as precomputed cosines and sines of shape `[rows × cols/2]`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if !d.is_multiple_of(2) || cos.len() != xv.rows() * d / 2 || sin.len() != cos.len() {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: xv.shape.clone(),
                rhs: vec![cos.len()],
            });
        }
        let half = d / 2;
        let mut data = vec![0.0; xv.len()];
        for (r, (row, out)) in xv.data.chunks(d).zip(data.chunks_mut(d)).enumerate() {
            for j in 0..half {
                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                out[2 * j] = a * c - b * s;
                out[2 * j + 1] = a * s + b * c;
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.flops += 3 * value.len() as u64;
        self.push("rotate_pairs", value, &[x], Op::Rope { x, cos, sin })
    }

    /// Mean binary cross-entropy with logits, in the stable
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})` form. `pos_weight` scales the
    /// positive term.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, pos_weight: f64) -> Result<Var> {
        let zv = self.value(logits);
        if zv.shape != targets.shape {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: zv.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        if targets.data.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::contract("bce targets must be 0 or 1"));
        }
        let n = zv.len() as f64;
        let total: f64 = zv
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&z, &y)| {
                let softplus_neg = (-z.abs()).exp().ln_1p() + (-z).max(0.0);
                (1.0 - y) * z + (1.0 + (pos_weight - 1.0) * y) * softplus_neg
            })
            .sum();
        self.flops += 6 * zv.len() as u64;
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / n),
            &[logits],
            Op::Bce {
                logits,
                targets: targets.data.clone(),
                pos_weight,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        // keep only requires_grad leaves
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(av, "matmul").expect("recorded");
                let n = out.cols();
                self.accumulate(grads, *a, |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = Aᵀ · dC
                    let at = av.transpose().expect("matrix");
                    matmul_into(&at.data, g, gb, k, m, n);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let n = out.cols();
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&av.data) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MulConst(x, factor) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), f) in gx.iter_mut().zip(g).zip(factor) {
                        *o += gi * f;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * s;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(&xv.data) {
                        // subgradient +1 at the kink
                        *o += if *v >= 0.0 { *gi } else { -gi };
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(&xv.data) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((y, gy), o) in out.data.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.value(*gamma);
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (((gr, xh), o), inv) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(inv_std)
                    {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv.data[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            o[j] += inv / d as f64 * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |gp| {
                        for (r, o) in gp.chunks_mut(w).enumerate() {
                            add_into(o, &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let n = out.cols();
                self.accumulate(grads, *x, |gx| {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                });
            }
            Op::SliceCols(x, start) => {
                let w = out.cols();
                let n = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanRows(x, rows) => {
                let n = out.cols();
                let inv = 1.0 / rows.len() as f64;
                self.accumulate(grads, *x, |gx| {
                    for &r in rows {
                        for (o, gi) in gx[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let d = out.cols();
                let half = d / 2;
                self.accumulate(grads, *x, |gx| {
                    for (r, (gr, o)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..half {
                            let (c, s) = (cos[r * half + j], sin[r * half + j]);
                            let (ga, gb) = (gr[2 * j], gr[2 * j + 1]);
                            o[2 * j] += ga * c + gb * s;
                            o[2 * j + 1] += -ga * s + gb * c;
                        }
                    }
                });
            }
            Op::Bce {
                logits,
                targets,
                pos_weight,
            } => {
                let zv = self.value(*logits);
                let n = zv.len() as f64;
                self.accumulate(grads, *logits, |gz| {
                    for ((o, &z), &y) in gz.iter_mut().zip(&zv.data).zip(targets) {
                        let d = (1.0 - y) - (1.0 + (pos_weight - 1.0) * y) * sigmoid(-z);
                        *o += g[0] * d / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_last(x, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[&[0.0, 2f64.ln()]]));
        let y = tape.softmax_last(x, None).unwrap();
        assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[&[5.0, 5.0, 5.0]]));
        let y = tape.softmax_last(x, Some(&[true, true, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let err = tape
            .softmax_last(x, Some(&[true, true, false, false]))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[&[4.0, 4.0, 4.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[&[1.0, -1.0]]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(&t(&[&[1.0, -1.0]])) < 1e-11);
    }

    #[test]
    fn backward_square_and_softmax_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[0.3, -1.2, 2.0]]), true);
        let s = tape.softmax_last(x, None).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap().get(x).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = sigmoid(x) + x*x ; dy/dx = s(1-s) + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.7), true);
        let a = tape.sigmoid(x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let y = tape.add(a, b).unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap().item();
        let s = sigmoid(0.7);
        assert!((g - (s * (1.0 - s) + 1.4)).abs() < 1e-15);
    }

    #[test]
    fn grads_only_for_requires_grad_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(c).is_none());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let y = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = tape.bce_with_logits(z, &y, 1.0).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let z = tape.constant(Tensor::full(&[1, 2], 20.0));
        let y = Tensor::full(&[1, 2], 1.0);
        let l = tape.bce_with_logits(z, &y, 1.0).unwrap();
        assert!(tape.value(l).item() < 1e-8);

        let bad = Tensor::full(&[1, 2], 0.5);
        assert!(tape.bce_with_logits(z, &bad, 1.0).is_err());
    }
}
