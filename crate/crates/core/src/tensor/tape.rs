//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append a node holding the output value, the input handles and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in strictly
//! decreasing append order, so the append order is the topological order.

use super::dense::{axis_split, matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::error::{Result, SspError};
use crate::ssm::scan;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Silu,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// The elementwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Silu,
    Softplus,
    Exp,
    Log,
    Neg,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Option<Broadcast>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    ClampMin {
        x: Var,
        min: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Conv2dDepthwise {
        x: Var,
        kernel: Var,
        grid: (usize, usize),
    },
    CausalConv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Concat { parts } => parts.clone(),
            Op::Conv2dDepthwise { x, kernel, .. } => vec![*x, *kernel],
            Op::CausalConv1d { x, kernel, bias } => vec![*x, *kernel, *bias],
            Op::RmsNorm { x, weight, .. } => vec![*x, *weight],
            Op::SelectiveScan { x, delta, a, b, c, .. } => vec![*x, *delta, *a, *b, *c],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Index maps for a broadcast binary op: output element `i` reads
/// `a[a_idx[i]]` and `b[b_idx[i]]`.
#[derive(Debug)]
pub(crate) struct Broadcast {
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |v| -v,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Silu => |v| v * sigmoid(v),
            UnaryKind::Softplus => softplus,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary { kind, x })
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let out: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            let shape = sa.to_vec();
            return Ok(self.push(
                Tensor::from_parts(shape, out),
                Op::Binary {
                    kind,
                    a,
                    b,
                    bcast: None,
                },
            ));
        }
        let (shape, bc) = broadcast_maps(sa, sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = bc.a_idx.iter().zip(&bc.b_idx).map(|(&i, &j)| f(va[i], vb[j])).collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Binary {
                kind,
                a,
                b,
                bcast: Some(bc),
            },
        ))
    }

    /// Elementwise operation by kind; binary kinds require `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| b.ok_or_else(|| SspError::contract(format!("{op:?} needs a second operand")));
        match op {
            Elementwise::Add => self.binary(BinaryKind::Add, a, need_b(b)?),
            Elementwise::Mul => self.binary(BinaryKind::Mul, a, need_b(b)?),
            Elementwise::Silu => Ok(self.unary(UnaryKind::Silu, a)),
            Elementwise::Softplus => Ok(self.unary(UnaryKind::Softplus, a)),
            Elementwise::Exp => Ok(self.unary(UnaryKind::Exp, a)),
            Elementwise::Log => Ok(self.unary(UnaryKind::Log, a)),
            Elementwise::Neg => Ok(self.unary(UnaryKind::Neg, a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// `x + c` for a constant scalar.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(SspError::dim(format!(
                "matmul inner extents differ: {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        Ok(self.push(out, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Sum along `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let len = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    let slot = o * inner + i;
                    if a == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis { x, argmax }))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let out = self.value(x).map(|v| v.max(min));
        self.push(out, Op::ClampMin { x, min })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let out = softmax_raw(t.data(), t.shape(), axis);
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    // ---- structural --------------------------------------------------------

    /// Select rows (axis-0 slices) in the given order; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if rows.is_empty() {
            return Err(SspError::dim("gather of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(SspError::dim(format!(
                "row {bad} out of range for shape {:?}",
                t.shape()
            )));
        }
        let width = t.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, rows: rows.to_vec() }))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| SspError::dim("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(SspError::dim(format!(
                    "concat trailing extents differ: {:?} vs {:?}",
                    t.shape(),
                    self.shape(*first)
                )));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec() }))
    }

    // ---- fused kernels -----------------------------------------------------

    /// Depthwise 3×3 same-padded convolution over patch grids.
    ///
    /// `x` is `[rows×cols×c]` or `[B×rows×cols×c]`; `kernel` is `[3×3×c]`.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (rows, cols, ch) = match tx.shape() {
            &[r, c, ch] | &[_, r, c, ch] => (r, c, ch),
            s => return Err(SspError::dim(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        match tk.shape() {
            &[3, 3, kc] if kc == ch => {}
            &[3, 3, kc] => {
                return Err(SspError::dim(format!(
                    "conv2d kernel has {kc} channels, input has {ch}"
                )))
            }
            s => return Err(SspError::config(format!("conv2d kernel must be 3×3×c, got {s:?}"))),
        }
        let out = conv2d_forward(tx.data(), tk.data(), rows, cols, ch);
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2dDepthwise {
                x,
                kernel,
                grid: (rows, cols),
            },
        ))
    }

    /// Per-channel causal convolution along the sequence axis.
    ///
    /// `x` is `[S×c]`, `kernel` is `[k×c]`, `bias` is `[c]`;
    /// `y[t] = bias + Σ_j kernel[j] ⊙ x[t − (k−1) + j]` with zeros before the start.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (s, c) = tx.dims2()?;
        let (k, kc) = tk.dims2()?;
        if kc != c || tb.shape() != [c] {
            return Err(SspError::dim(format!(
                "causal conv shapes disagree: x {:?}, kernel {:?}, bias {:?}",
                tx.shape(),
                tk.shape(),
                tb.shape()
            )));
        }
        let (xd, kd, bd) = (tx.data(), tk.data(), tb.data());
        let mut out = vec![0.0; s * c];
        for t in 0..s {
            let orow = &mut out[t * c..(t + 1) * c];
            orow.copy_from_slice(bd);
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let krow = &kd[j * c..(j + 1) * c];
                for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                    *o += kv * xv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![s, c], out),
            Op::CausalConv1d { x, kernel, bias },
        ))
    }

    /// Row-wise RMS normalization with a learned gain: `x / rms(x) ⊙ weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (s, c) = tx.dims2()?;
        if tw.shape() != [c] {
            return Err(SspError::dim(format!(
                "rms_norm weight {:?} does not match width {c}",
                tw.shape()
            )));
        }
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; s * c];
        let mut inv_rms = vec![0.0; s];
        for t in 0..s {
            let row = &xd[t * c..(t + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms[t] = r;
            for i in 0..c {
                out[t * c + i] = row[i] * r * wd[i];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![s, c], out), Op::RmsNorm { x, weight, inv_rms }))
    }

    /// Selective scan with exact zero-order-hold discretization.
    ///
    /// `x`, `delta`: `[S×d]`; `a`: `[d×D]` (negative); `b`, `c`: `[S×D]`.
    /// See [`crate::ssm::scan`] for the recurrence.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let dims = scan::ScanDims::check(
            self.shape(x),
            self.shape(delta),
            self.shape(a),
            self.shape(b),
            self.shape(c),
        )?;
        let (y, states) = scan::forward(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        Ok(self.push(
            Tensor::from_parts(vec![dims.len, dims.channels], y),
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            },
        ))
    }

    /// `−log softmax(logits)[label]` in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let k = t.numel();
        if label >= k {
            return Err(SspError::contract(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let probs = softmax_raw(t.data(), &[k], 0);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(SspError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let dx: Vec<f64> = match kind {
                    UnaryKind::Neg => gd.iter().map(|g| -g).collect(),
                    UnaryKind::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Log => gd.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    UnaryKind::Silu => gd
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                    UnaryKind::Softplus => gd.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect(),
                };
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (av.len(), bv.len());
                let mut da = vec![0.0; na];
                let mut db = vec![0.0; nb];
                let ident: Vec<usize>;
                let (ai, bi): (&[usize], &[usize]) = match bcast {
                    Some(bc) => (&bc.a_idx, &bc.b_idx),
                    None => {
                        ident = (0..gd.len()).collect();
                        (&ident, &ident)
                    }
                };
                for (o, &gv) in gd.iter().enumerate() {
                    let (i, j) = (ai[o], bi[o]);
                    match kind {
                        BinaryKind::Add => {
                            da[i] += gv;
                            db[j] += gv;
                        }
                        BinaryKind::Sub => {
                            da[i] += gv;
                            db[j] -= gv;
                        }
                        BinaryKind::Mul => {
                            da[i] += gv * bv[j];
                            db[j] += gv * av[i];
                        }
                        BinaryKind::Div => {
                            da[i] += gv / bv[j];
                            db[j] -= gv * av[i] / (bv[j] * bv[j]);
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), da);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*b).shape(), db);
                }
            }
            Op::Scale { x, factor } => {
                let dx = gd.iter().map(|g| g * factor).collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let da = matmul_a_bt(gd, tb.data(), m, n, k);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let db = matmul_at_b(ta.data(), gd, m, k, n);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Transpose { x } => {
                let dx = g.transpose2().expect("transpose grad is a matrix").into_data();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
            Op::SumAll { x } => {
                let t = self.value(*x);
                accumulate(grads, *x, t.shape(), vec![gd[0]; t.numel()]);
            }
            Op::SumAxis { x, axis } => {
                let t = self.value(*x);
                let (outer, len, inner) = axis_split(t.shape(), *axis);
                let mut dx = vec![0.0; t.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *x, t.shape(), dx);
            }
            Op::MaxAxis { x, argmax } => {
                let t = self.value(*x);
                let mut dx = vec![0.0; t.numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, t.shape(), dx);
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v >= *min { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = y[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::Gather { x, rows } => {
                let t = self.value(*x);
                let width = t.numel() / t.shape()[0];
                let mut dx = vec![0.0; t.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for i in 0..width {
                        dx[r * width + i] += gd[k * width + i];
                    }
                }
                accumulate(grads, *x, t.shape(), dx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.numel();
                    if self.wants(p) {
                        accumulate(grads, p, t.shape(), gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Conv2dDepthwise { x, kernel, grid } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let ch = tk.shape()[2];
                let (dx, dk) = conv2d_backward(gd, tx.data(), tk.data(), grid.0, grid.1, ch);
                if self.wants(*x) {
                    accumulate(grads, *x, tx.shape(), dx);
                }
                if self.wants(*kernel) {
                    accumulate(grads, *kernel, tk.shape(), dk);
                }
            }
            Op::CausalConv1d { x, kernel, bias } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (s, c) = (tx.shape()[0], tx.shape()[1]);
                let k = tk.shape()[0];
                let (xd, kd) = (tx.data(), tk.data());
                let mut dx = vec![0.0; s * c];
                let mut dk = vec![0.0; k * c];
                let mut db = vec![0.0; c];
                for t in 0..s {
                    let grow = &gd[t * c..(t + 1) * c];
                    for (d, &gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        for i in 0..c {
                            dx[src * c + i] += kd[j * c + i] * grow[i];
                            dk[j * c + i] += xd[src * c + i] * grow[i];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, tx.shape(), dx);
                }
                if self.wants(*kernel) {
                    accumulate(grads, *kernel, tk.shape(), dk);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, &[c], db);
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*weight));
                let (s, c) = (tx.shape()[0], tx.shape()[1]);
                let (xd, wd) = (tx.data(), tw.data());
                let mut dx = vec![0.0; s * c];
                let mut dw = vec![0.0; c];
                for t in 0..s {
                    let r = inv_rms[t];
                    let row = &xd[t * c..(t + 1) * c];
                    let grow = &gd[t * c..(t + 1) * c];
                    let dot: f64 = (0..c).map(|i| grow[i] * wd[i] * row[i]).sum();
                    let coef = r * r * r * dot / c as f64;
                    for i in 0..c {
                        dx[t * c + i] = grow[i] * wd[i] * r - row[i] * coef;
                        dw[i] += grow[i] * row[i] * r;
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, tx.shape(), dx);
                }
                if self.wants(*weight) {
                    accumulate(grads, *weight, &[c], dw);
                }
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            } => {
                let dims = scan::ScanDims {
                    len: self.shape(*x)[0],
                    channels: self.shape(*x)[1],
                    state: self.shape(*a)[1],
                };
                let sg = scan::backward(
                    dims,
                    gd,
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    states,
                );
                for (v, d) in [(*x, sg.x), (*delta, sg.delta), (*a, sg.a), (*b, sg.b), (*c, sg.c)] {
                    if self.wants(v) {
                        accumulate(grads, v, self.value(v).shape(), d);
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut dx: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                dx[*label] -= gd[0];
                accumulate(grads, *logits, self.value(*logits).shape(), dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (data[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    out
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(SspError::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// Right-aligned broadcasting where only extent-1 axes stretch.
fn broadcast_maps(sa: &[usize], sb: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(SspError::dim(format!("shapes {sa:?} and {sb:?} are not broadcastable")));
        }
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for ax in (0..rank).rev() {
            st[ax] = if p[ax] == 1 { 0 } else { acc };
            acc *= p[ax];
        }
        st
    };
    let (st_a, st_b) = (strides(&pa), strides(&pb));
    let numel: usize = out.iter().product();
    let mut a_idx = Vec::with_capacity(numel);
    let mut b_idx = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        a_idx.push(counter.iter().zip(&st_a).map(|(c, s)| c * s).sum());
        b_idx.push(counter.iter().zip(&st_b).map(|(c, s)| c * s).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((out, Broadcast { a_idx, b_idx }))
}

fn conv2d_forward(x: &[f64], k: &[f64], rows: usize, cols: usize, ch: usize) -> Vec<f64> {
    let plane = rows * cols * ch;
    let batches = x.len() / plane;
    let mut out = vec![0.0; x.len()];
    for bt in 0..batches {
        let xb = &x[bt * plane..(bt + 1) * plane];
        let ob = &mut out[bt * plane..(bt + 1) * plane];
        for r in 0..rows {
            for c in 0..cols {
                let o = (r * cols + c) * ch;
                for kr in 0..3 {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= rows as isize {
                        continue;
                    }
                    for kc in 0..3 {
                        let sc = c as isize + kc as isize - 1;
                        if sc < 0 || sc >= cols as isize {
                            continue;
                        }
                        let s = (sr as usize * cols + sc as usize) * ch;
                        let kk = (kr * 3 + kc) * ch;
                        for i in 0..ch {
                            ob[o + i] += k[kk + i] * xb[s + i];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(g: &[f64], x: &[f64], k: &[f64], rows: usize, cols: usize, ch: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = rows * cols * ch;
    let batches = x.len() / plane;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; 9 * ch];
    for bt in 0..batches {
        let off = bt * plane;
        for r in 0..rows {
            for c in 0..cols {
                let o = off + (r * cols + c) * ch;
                for kr in 0..3 {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= rows as isize {
                        continue;
                    }
                    for kc in 0..3 {
                        let sc = c as isize + kc as isize - 1;
                        if sc < 0 || sc >= cols as isize {
                            continue;
                        }
                        let s = off + (sr as usize * cols + sc as usize) * ch;
                        let kk = (kr * 3 + kc) * ch;
                        for i in 0..ch {
                            dx[s + i] += k[kk + i] * g[o + i];
                            dk[kk + i] += x[s + i] * g[o + i];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
