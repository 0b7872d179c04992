//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the [`Graph`]. Node ids
//! are assigned in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::kernels::{self, col2im, gemm, im2col};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of forward values.
///
/// `F32` rounds every op output to single precision; gradients are always
/// accumulated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        din: usize,
        dout: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        time: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Concat(Vec<(Var, usize)>),
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Reshape(Var),
    TopKMean {
        x: Var,
        selected: Vec<Vec<usize>>,
        width: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    NormLast(Var),
    Scatter {
        x: Var,
        theta: Vec<usize>,
        width: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    WeightedRowSum {
        x: Var,
        rows: Vec<usize>,
        weights: Vec<f64>,
    },
    StopGradient,
    FaultyIdentity(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on (or that sit behind a stop-gradient) get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn leading(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = leading(shape);
    s.push(last);
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        let node = match op {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    /// Adds a `[D]` vector to every row of a `[..., D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", &[d], self.shape(bias)));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("mul_const", self.shape(x), c.shape()));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= m;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Natural log. Callers keep the input positive (clamp first).
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::invalid("ln", format!("non-positive input {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Ln(x)))
    }

    /// Clamp into `[lo, hi]`; gradient passes where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Identity whose backward pass doubles the gradient. Exists only as a
    /// negative control for gradient checking.
    pub fn faulty_identity(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(out, Op::FaultyIdentity(x), rg)
    }

    // ---- linear algebra -----------------------------------------------

    /// `x·w (+ b)` over the last axis: `[..., din] x [din, dout] -> [..., dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("linear", &ws, &xs));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear.bias", &[dout], self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, v)| *o += v);
            }
        }
        let out = Tensor::new(with_last(&xs, dout), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Linear { x, w, b, din, dout }, rg))
    }

    /// Same-padded, stride-1 dilated 1D convolution over time.
    ///
    /// `x: [B, T, Cin]`, `w: [kernel, Cin, Cout]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] {
            return Err(shape_err("conv1d", &ws, &xs));
        }
        let (batch, time, cin) = (xs[0], xs[1], xs[2]);
        let (kernel, cout) = (ws[0], ws[2]);
        if kernel % 2 == 0 || dilation == 0 {
            return Err(Error::invalid(
                "conv1d",
                format!("kernel must be odd and dilation positive (kernel {kernel}, dilation {dilation})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d.bias", &[cout], self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), batch, time, cin, kernel, dilation);
        let mut out = vec![0.0; batch * time * cout];
        gemm(
            batch * time,
            kernel * cin,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(o, v)| *o += v);
            }
        }
        let out = Tensor::new(vec![batch, time, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                time,
                cin,
                cout,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Batched matmul: `[B, M, K] x [B, K, N] -> [B, M, N]`; with `trans_b`,
    /// `b` is `[B, N, K]` and is used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let mut out = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `[B, T, D] -> [B*heads, T, D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::invalid("split_heads", format!("{heads} heads for shape {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    let from = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::invalid("merge_heads", format!("{heads} heads for shape {s:?}")));
        }
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let from = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MergeHeads { x, heads }, rg))
    }

    /// Softmax over the last axis. Entries with `allowed[i] == false` get
    /// probability exactly zero; each row must allow at least one entry.
    pub fn softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = allowed {
            if m.len() != xv.numel() {
                return Err(shape_err("softmax.mask", xv.shape(), &[m.len()]));
            }
        }
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[r * d + j]);
            if !(0..d).any(ok) {
                return Err(Error::invalid("softmax", format!("row {r} fully masked")));
            }
            let mx = (0..d)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if ok(j) { (*v - mx).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &[d], self.shape(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- structural ---------------------------------------------------

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_last"))?;
        let lead = leading(self.shape(*first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if leading(s) != lead {
                return Err(shape_err("concat_last", &lead, &leading(s)));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        let rec = parts.iter().copied().zip(widths).collect();
        Ok(self.push(out, Op::Concat(rec), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        if start >= end || end > d {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{end} of width {d}"),
            ));
        }
        let w = end - start;
        let src = self.value(x).data();
        let out: Vec<f64> = src.chunks(d).flat_map(|row| row[start..end].iter().copied()).collect();
        let out = Tensor::new(with_last(&s, w), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, start, width: d }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sum over the last axis: `[..., D] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let data: Vec<f64> = v.data().chunks(d).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(leading(v.shape()), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SumLast(x), rg))
    }

    /// Euclidean norm over the last axis: `[..., D] -> [...]`. The gradient
    /// at a zero vector is taken to be zero.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let data: Vec<f64> = v
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(leading(v.shape()), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormLast(x), rg))
    }

    /// Rows divided by their L2 norm. Zero rows map to zero rows with zero
    /// gradient.
    pub fn l2_normalize_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|a| *a /= n);
            } else {
                row.iter_mut().for_each(|a| *a = 0.0);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Per-row mean of the `ks[r]` largest entries among the first
    /// `valid[r]` columns of a `[R, T]` tensor. Ties go to the lower index;
    /// the ranking itself carries no gradient.
    pub fn topk_mean_rows(&mut self, x: Var, ks: &[usize], valid: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || ks.len() != s[0] || valid.len() != s[0] {
            return Err(shape_err("topk_mean_rows", &s, &[ks.len(), valid.len()]));
        }
        let (rows, width) = (s[0], s[1]);
        let mut selected = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (k, len) = (ks[r], valid[r]);
            if len == 0 || len > width || k == 0 || k > len {
                return Err(Error::invalid(
                    "topk_mean_rows",
                    format!("row {r}: k={k} with {len} valid of {width}"),
                ));
            }
            let row = &self.value(x).data()[r * width..r * width + len];
            let idx = kernels::top_k_indices(row, k);
            out.push(idx.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            selected.push(idx);
        }
        let out = Tensor::new(vec![rows], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::TopKMean { x, selected, width }, rg))
    }

    /// Places input column `i` at output column `theta[i]` of a width-`width`
    /// last axis; all other columns are zero.
    pub fn scatter_last(&mut self, x: Var, theta: &[usize], width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ds = *s.last().unwrap_or(&1);
        if theta.len() != ds {
            return Err(shape_err("scatter_last", &[ds], &[theta.len()]));
        }
        if let Some(bad) = theta.iter().find(|&&c| c >= width) {
            return Err(Error::invalid(
                "scatter_last",
                format!("index {bad} out of range {width}"),
            ));
        }
        let src = self.value(x).data();
        let rows = src.len() / ds;
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (i, &c) in theta.iter().enumerate() {
                out[r * width + c] = src[r * ds + i];
            }
        }
        let out = Tensor::new(with_last(&s, width), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Scatter {
                x,
                theta: theta.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Output column `j` is input column `idx[j]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap_or(&1);
        if idx.is_empty() {
            return Err(Error::Empty("gather_last"));
        }
        if let Some(bad) = idx.iter().find(|&&c| c >= width) {
            return Err(Error::invalid(
                "gather_last",
                format!("index {bad} out of range {width}"),
            ));
        }
        let src = self.value(x).data();
        let n = idx.len();
        let out: Vec<f64> = src
            .chunks(width)
            .flat_map(|row| idx.iter().map(move |&c| row[c]))
            .collect();
        let out = Tensor::new(with_last(&s, n), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// `Σ_j weights[j] · row(rows[j])` with `x` viewed as `[R, D]`; returns `[D]`.
    pub fn weighted_row_sum(&mut self, x: Var, rows: &[usize], weights: &[f64]) -> Result<Var> {
        if rows.len() != weights.len() || rows.is_empty() {
            return Err(Error::invalid(
                "weighted_row_sum",
                "rows/weights must be non-empty and equal length",
            ));
        }
        let v = self.value(x);
        let d = v.last_dim();
        let nrows = v.rows();
        if let Some(bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::invalid(
                "weighted_row_sum",
                format!("row {bad} out of range {nrows}"),
            ));
        }
        let mut out = vec![0.0; d];
        for (&r, &w) in rows.iter().zip(weights) {
            for (o, a) in out.iter_mut().zip(&v.data()[r * d..(r + 1) * d]) {
                *o += w * a;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::WeightedRowSum {
                x,
                rows: rows.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::BackwardBeforeForward(loss.0))?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if node.requires_grad {
            grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches node")
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(vb).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(va).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Affine { x, scale } => {
                let d = gd.iter().map(|v| v * scale).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::MulConst { x, c } => {
                let d = gd.iter().zip(c).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Linear { x, w, b, din, dout } => {
                let (din, dout) = (*din, *dout);
                let xv = self.value(*x);
                let rows = xv.rows();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, gd, false, self.value(*w).data(), true, &mut dx, false);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, xv.data(), true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                time,
                cin,
                cout,
                kernel,
                dilation,
            } => {
                let (bt, width, cout) = (batch * time, kernel * cin, *cout);
                if self.requires_grad(*w) {
                    let cols = im2col(self.value(*x).data(), *batch, *time, *cin, *kernel, *dilation);
                    let mut dw = vec![0.0; width * cout];
                    gemm(width, bt, cout, &cols, true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; bt * width];
                    gemm(
                        bt,
                        cout,
                        width,
                        gd,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0; bt * cin];
                    col2im(&dcols, *batch, *time, *cin, *kernel, *dilation, &mut dx);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; cout];
                        for row in gd.chunks(cout) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        // dA = dY·Bᵀ (or dY·B when B was used transposed)
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, ga, true, aa, false, out, false);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, out, false);
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let src = ((bi * heads + h) * t + ti) * dh;
                            let dst = (bi * t + ti) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let d = dh * heads;
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..bh / heads {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let dst = ((bi * heads + h) * t + ti) * dh;
                            let src = (bi * t + ti) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; gd.len()];
                for r in 0..node.value.rows() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let nf = d as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let o = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[o + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[o + j];
                        }
                        for j in 0..d {
                            let dh = gd[o + j] * gv[j];
                            dx[o + j] = inv / nf * (nf * dh - s1 - xhat[o + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * hrow[j];
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(dg));
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| g * kernels::gelu_grad(*v)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Concat(parts) => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = gd.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, self.like(p, dp));
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, width } => {
                let w = g.last_dim();
                let mut dx = vec![0.0; g.rows() * width];
                for (r, row) in gd.chunks(w).enumerate() {
                    dx[r * width + start..r * width + start + w].copy_from_slice(row);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0] / n as f64; n]));
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                let dx = gd.iter().flat_map(|v| std::iter::repeat_n(*v, d)).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::TopKMean { x, selected, width } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, idx) in selected.iter().enumerate() {
                    let share = gd[r] / idx.len() as f64;
                    for &c in idx {
                        dx[r * width + c] += share;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; gd.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let o = r * d;
                    let dot: f64 = (0..d).map(|j| y[o + j] * gd[o + j]).sum();
                    for j in 0..d {
                        dx[o + j] = (gd[o + j] - y[o + j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::NormLast(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                for (r, (&n, &gr)) in y.iter().zip(gd).enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        dx[r * d + j] = gr * xv.data()[r * d + j] / n;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Scatter { x, theta, width } => {
                let ds = theta.len();
                let rows = gd.len() / width;
                let mut dx = vec![0.0; rows * ds];
                for r in 0..rows {
                    for (i, &c) in theta.iter().enumerate() {
                        dx[r * ds + i] = gd[r * width + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Gather { x, idx, width } => {
                let n = idx.len();
                let rows = gd.len() / n;
                let mut dx = vec![0.0; rows * width];
                for r in 0..rows {
                    for (j, &c) in idx.iter().enumerate() {
                        dx[r * width + c] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::WeightedRowSum { x, rows, weights } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                for (&r, &w) in rows.iter().zip(weights) {
                    for j in 0..d {
                        dx[r * d + j] += w * gd[j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::FaultyIdentity(x) => {
                let d = gd.iter().map(|v| 2.0 * v).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
        }
        Ok(())
    }
}
