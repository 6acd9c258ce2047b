//! Tape of primitive applications with reverse-mode gradients.
//!
//! Shape rules (no implicit broadcasting except a one-element operand in
//! `add`/`sub`/`mul`):
//!
//! | op              | inputs                                   | output                       |
//! |-----------------|------------------------------------------|------------------------------|
//! | `matmul`        | `[n,k]`, `[k,m]`                         | `[n,m]`                      |
//! | `add/sub/mul`   | equal shapes, or one side has 1 element | shape of the larger operand  |
//! | `add_bias`      | `[..., c]`, `[c]`                        | `[..., c]`                   |
//! | `conv1d`        | `[b,t,cin]`, `[k,cin,cout]`, `[cout]?`   | `[b,t',cout]`                |
//! | `concat`        | `[..., c_i]` with equal leading dims     | `[..., Σc_i]`                |
//! | `slice_last`    | `[..., c]`                               | `[..., end-start]`           |
//! | `mean`, `sum_squares` | any                                | scalar `[]`                  |
//! | `mean_last`     | `[..., c]`                               | `[...]`                      |
//! | `softmax_cross_entropy` | `[n,c]`, `n` integer targets     | scalar (mean over rows)      |
//! | `embedding`     | `[v,d]`, `n` ids                         | `[n,d]`                      |
//! | `repeat_time`   | `[b,t,c]`                                | `[b,t·f,c]`                  |
//! | `add_upsampled` | `[b,t·f,c]`, `[b,t,c]`                   | `[b,t·f,c]`                  |
//! | `gated`         | `[..., 2c]`                              | `[..., c]`                   |
//! | unary ops       | any                                      | same                         |
//!
//! `t' = floor((t + pad_left + pad_right - dilation·(k-1) - 1) / stride) + 1`.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1dAttrs {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dAttrs {
    pub fn valid() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }

    /// Symmetric padding keeping the length for odd filters at stride 1.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Self {
            stride: 1,
            dilation: 1,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    /// Left padding only, so output `t` never reads input beyond `t`.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            pad_left: dilation * (kernel - 1),
            pad_right: 0,
        }
    }

    pub fn output_len(&self, input_len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input_len + self.pad_left + self.pad_right;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    AddBias(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        attrs: Conv1dAttrs,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, T, T),
    MaxScalar(Var, T),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    Mean(Var),
    MeanLast(Var),
    SumSquares(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatTime(Var, usize),
    AddUpsampled(Var, Var, usize),
    Gated(Var),
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; exact zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{:?}", s)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; also serves as stop-gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Detached copy of `v`'s current value.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (m, 1),
            T::zero(),
            &mut out,
            (m, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Matmul(a, b), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.len() == 1 {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(ta.shape()), shape_str(tb.shape())),
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Offset(x), rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rank() != 1 || tx.last_dim() != tb.len() || tx.rank() == 0 {
            return Err(Error::shape(
                "add_bias",
                format!("{} + {}", shape_str(tx.shape()), shape_str(tb.shape())),
            ));
        }
        let mut out = tx.clone();
        let bias = tb.data();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv1dAttrs) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || attrs.dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {} with filter {}", shape_str(sx), shape_str(sw)),
            ));
        }
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb.len() != 1 || sb[0] != sw[2] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {} for filter {}", shape_str(sb), shape_str(sw)),
                ));
            }
        }
        let (batch, t_in, cin) = (sx[0], sx[1], sx[2]);
        let (kernel, cout) = (sw[0], sw[2]);
        let t_out = attrs.output_len(t_in, kernel).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!(
                    "input {} shorter than filter {} span (dilation {})",
                    shape_str(sx),
                    shape_str(sw),
                    attrs.dilation
                ),
            )
        })?;
        let mut out = vec![T::zero(); batch * t_out * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        let xd = tx.data();
        let wd = tw.data();
        for bi in 0..batch {
            for k in 0..kernel {
                let Some((lo, n, first_in)) = tap_range(attrs, t_in, t_out, k) else {
                    continue;
                };
                let a_off = (bi * t_in + first_in) * cin;
                let c_off = (bi * t_out + lo) * cout;
                T::gemm(
                    n,
                    cin,
                    cout,
                    &xd[a_off..],
                    (attrs.stride * cin, 1),
                    &wd[k * cin * cout..(k + 1) * cin * cout],
                    (cout, 1),
                    T::one(),
                    &mut out[c_off..],
                    (cout, 1),
                );
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new([batch, t_out, cout], out)?,
            Op::Conv1d { x, w, b, attrs },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// `max(floor, x)` elementwise; the gradient is 0 at the tie.
    pub fn max_scalar(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| v.max(floor), Op::MaxScalar(x, floor))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {}", shape_str(self.shape(*first)), shape_str(s)),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.rank() == 0 || start >= end || end > d {
            return Err(Error::shape(
                "slice_last",
                format!("[{start}..{end}) of {}", shape_str(tx.shape())),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(tx.rows() * w);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..end]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast(x, start), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = tx.sum() / T::from_usize(tx.len()).unwrap();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.rank() == 0 || d == 0 {
            return Err(Error::shape("mean_last", shape_str(tx.shape())));
        }
        let inv = T::one() / T::from_usize(d).unwrap();
        let out: Vec<T> = (0..tx.rows())
            .map(|r| tx.row(r).iter().copied().sum::<T>() * inv)
            .collect();
        let shape = tx.shape()[..tx.rank() - 1].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanLast(x), rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {} with {} targets", shape_str(tl.shape()), targets.len()),
            ));
        }
        let classes = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target {bad} out of range for logits {}", shape_str(tl.shape())),
            ));
        }
        let mut probs = Vec::with_capacity(tl.len());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp_fast()));
        }
        let loss = total / T::from_usize(targets.len()).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", shape_str(tt.shape())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::shape(
                    "embedding",
                    format!("id {i} out of range for table {}", shape_str(tt.shape())),
                ));
            }
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling along the time axis of `[b,t,c]`.
    pub fn repeat_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || factor == 0 {
            return Err(Error::shape(
                "repeat_time",
                format!("{} by {factor}", shape_str(tx.shape())),
            ));
        }
        let (b, t, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = Vec::with_capacity(tx.len() * factor);
        for r in 0..b * t {
            let row = tx.row(r);
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new([b, t * factor, c], out)?,
            Op::RepeatTime(x, factor),
            rg,
        ))
    }

    /// `x + repeat_time(c, factor)` without materializing the repeat.
    pub fn add_upsampled(&mut self, x: Var, c: Var, factor: usize) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        let (sx, sc) = (tx.shape(), tc.shape());
        if sx.len() != 3
            || sc.len() != 3
            || sx[0] != sc[0]
            || sx[2] != sc[2]
            || factor == 0
            || sx[1] != sc[1] * factor
        {
            return Err(Error::shape(
                "add_upsampled",
                format!("{} + {} x{factor}", shape_str(sx), shape_str(sc)),
            ));
        }
        let ch = sx[2];
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_mut(ch).enumerate() {
            let b = r / sx[1];
            let i = (r % sx[1]) / factor;
            for (o, &v) in row.iter_mut().zip(tc.row(b * sc[1] + i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x, c]);
        Ok(self.push(out, Op::AddUpsampled(x, c, factor), rg))
    }

    /// Gated activation `tanh(a) * sigmoid(b)` where `[a, b]` are the two
    /// halves of the last axis.
    pub fn gated(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c2 = tx.last_dim();
        if tx.rank() == 0 || !c2.is_multiple_of(2) {
            return Err(Error::shape("gated", shape_str(tx.shape())));
        }
        let c = c2 / 2;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let mut out = vec![T::zero(); tx.len() / 2];
        for (row, o) in tx.data().chunks_exact(c2).zip(out.chunks_exact_mut(c)) {
            let (a, b) = row.split_at(c);
            for ((o, &a), &b) in o.iter_mut().zip(a).zip(b) {
                *o = a.tanh_fast() * sigmoid(b);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gated(x), rg))
    }

    /// Forward value `value`, backward identity into `source`.
    pub fn straight_through(&mut self, source: Var, value: Tensor<T>) -> Result<Var> {
        if self.shape(source) != value.shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{} vs {}", shape_str(self.shape(source)), shape_str(value.shape())),
            ));
        }
        let rg = self.rg(&[source]);
        Ok(self.push(value, Op::StraightThrough(source), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, true)
    }

    /// Like [`Graph::backward`] but frees interior gradients as soon as they
    /// are consumed; only leaf gradients survive.
    pub fn backward_leaves(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, false)
    }

    fn sweep(&self, loss: Var, keep_interior: bool) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            if keep_interior {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Gradient of an operand of a possibly scalar-broadcast binary op.
    fn reduce_broadcast(&self, v: Var, g: Tensor<T>) -> Tensor<T> {
        if self.value(v).len() == 1 && g.len() != 1 {
            Tensor::full(self.shape(v).to_vec(), g.sum())
        } else {
            g
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accumulate_with(grads, *a, |da| {
                    T::gemm(n, m, k, gd, (m, 1), bd, (1, m), T::one(), da, (k, 1));
                });
                self.accumulate_with(grads, *b, |db| {
                    T::gemm(k, n, m, ad, (1, k), gd, (m, 1), T::one(), db, (m, 1));
                });
            }
            Op::Add(a, b) => {
                let ga = self.reduce_broadcast(*a, g.clone());
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_broadcast(*b, g.clone());
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_broadcast(*a, g.clone());
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_broadcast(*b, g.map(|v| -v));
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let times = |other: &Tensor<T>| -> Tensor<T> {
                    if other.len() == 1 {
                        let o = other.item();
                        g.map(|v| v * o)
                    } else {
                        let data = gd.iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(other.shape().to_vec(), data).unwrap()
                    }
                };
                if self.nodes[a.0].requires_grad {
                    let ga = self.reduce_broadcast(*a, times(tb).reshape(g.shape().to_vec()).unwrap());
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.reduce_broadcast(*b, times(ta).reshape(g.shape().to_vec()).unwrap());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Offset(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape).unwrap());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.value(*b).len();
                self.accumulate_with(grads, *b, |db| {
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, attrs } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, t_in, cin) = (sx[0], sx[1], sx[2]);
                let (kernel, cout) = (sw[0], sw[2]);
                let t_out = g.shape()[1];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let s = attrs.stride;
                self.accumulate_with(grads, *x, |dx| {
                    for bi in 0..batch {
                        for k in 0..kernel {
                            let Some((lo, n, first_in)) = tap_range(*attrs, t_in, t_out, k) else {
                                continue;
                            };
                            let wk = &wd[k * cin * cout..(k + 1) * cin * cout];
                            T::gemm(
                                n,
                                cout,
                                cin,
                                &gd[(bi * t_out + lo) * cout..],
                                (cout, 1),
                                wk,
                                (1, cout),
                                T::one(),
                                &mut dx[(bi * t_in + first_in) * cin..],
                                (s * cin, 1),
                            );
                        }
                    }
                });
                self.accumulate_with(grads, *w, |dw| {
                    for bi in 0..batch {
                        for k in 0..kernel {
                            let Some((lo, n, first_in)) = tap_range(*attrs, t_in, t_out, k) else {
                                continue;
                            };
                            T::gemm(
                                cin,
                                n,
                                cout,
                                &xd[(bi * t_in + first_in) * cin..],
                                (1, s * cin),
                                &gd[(bi * t_out + lo) * cout..],
                                (cout, 1),
                                T::one(),
                                &mut dw[k * cin * cout..(k + 1) * cin * cout],
                                (cout, 1),
                            );
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for row in gd.chunks(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yd = node.value.data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(yd).zip(gd) {
                        *d += gv * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(yd).zip(gd) {
                        *d += gv * y * (T::one() - y);
                    }
                });
            }
            Op::Exp(x) => {
                let yd = node.value.data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(yd).zip(gd) {
                        *d += gv * y;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        if xv > lo && xv < hi {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxScalar(x, floor) => {
                let xd = self.value(*x).data();
                let floor = *floor;
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        if xv > floor {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let start = col;
                    self.accumulate_with(grads, p, |dp| {
                        for r in 0..rows {
                            let src = &gd[r * total + start..r * total + start + w];
                            for (d, &v) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceLast(x, start) => {
                let d = self.value(*x).last_dim();
                let w = g.last_dim();
                let start = *start;
                self.accumulate_with(grads, *x, |dx| {
                    for (r, grow) in gd.chunks(w).enumerate() {
                        for (dv, &v) in dx[r * d + start..r * d + start + w].iter_mut().zip(grow) {
                            *dv += v;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                let gv = g.item() / n;
                self.accumulate_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::MeanLast(x) => {
                let d = self.value(*x).last_dim();
                let inv = T::one() / T::from_usize(d).unwrap();
                self.accumulate_with(grads, *x, |dx| {
                    for (row, &gv) in dx.chunks_mut(d).zip(gd) {
                        row.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::SumSquares(x) => {
                let xd = self.value(*x).data();
                let two_g = g.item() + g.item();
                self.accumulate_with(grads, *x, |dx| {
                    for (d, &xv) in dx.iter_mut().zip(xd) {
                        *d += two_g * xv;
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let classes = self.value(*logits).last_dim();
                let scale = g.item() / T::from_usize(targets.len()).unwrap();
                self.accumulate_with(grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        let p = &probs[r * classes..(r + 1) * classes];
                        for (d, &pv) in row.iter_mut().zip(p) {
                            *d += pv * scale;
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.accumulate_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *dv += v;
                        }
                    }
                });
            }
            Op::AddUpsampled(x, c, factor) => {
                self.accumulate_with(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(gd) {
                        *d += gv;
                    }
                });
                let sx = self.shape(*x);
                let (t, ch) = (sx[1], sx[2]);
                let factor = *factor;
                self.accumulate_with(grads, *c, |dc| {
                    for (r, src) in gd.chunks(ch).enumerate() {
                        let row = (r / t) * (t / factor) + (r % t) / factor;
                        for (d, &v) in dc[row * ch..(row + 1) * ch].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Gated(x) => {
                let tx = self.value(*x);
                let c = tx.last_dim() / 2;
                self.accumulate_with(grads, *x, |dx| {
                    let rows = tx.data().chunks_exact(2 * c).zip(dx.chunks_exact_mut(2 * c));
                    for ((row, dr), gr) in rows.zip(gd.chunks_exact(c)) {
                        let (a, b) = row.split_at(c);
                        let (da, db) = dr.split_at_mut(c);
                        let lanes = a.iter().zip(b).zip(da.iter_mut().zip(db.iter_mut()));
                        for (((&a, &b), (da, db)), &g) in lanes.zip(gr) {
                            let th = a.tanh_fast();
                            let sg = sigmoid(b);
                            *da += g * sg * (T::one() - th * th);
                            *db += g * th * sg * (T::one() - sg);
                        }
                    }
                });
            }
            Op::RepeatTime(x, factor) => {
                let c = self.value(*x).last_dim();
                let factor = *factor;
                self.accumulate_with(grads, *x, |dx| {
                    for (r, row) in dx.chunks_mut(c).enumerate() {
                        for f in 0..factor {
                            let src = &gd[(r * factor + f) * c..(r * factor + f + 1) * c];
                            for (d, &v) in row.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// For filter tap `k`, the contiguous run of output steps reading a valid
/// input: `(first output, count, first input index)`.
fn tap_range(attrs: Conv1dAttrs, t_in: usize, t_out: usize, k: usize) -> Option<(usize, usize, usize)> {
    let s = attrs.stride as isize;
    let off = (k * attrs.dilation) as isize - attrs.pad_left as isize;
    // t_in_idx = to * s + off, need 0 <= t_in_idx <= t_in - 1
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_num = t_in as isize - 1 - off;
    if hi_num < 0 {
        return None;
    }
    let hi = (hi_num / s + 1).min(t_out as isize);
    if hi <= lo {
        return None;
    }
    Some((lo as usize, (hi - lo) as usize, (lo * s + off) as usize))
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let e = (-v.abs()).exp_fast();
    let s = T::one() / (T::one() + e);
    if v >= T::zero() {
        s
    } else {
        e * s
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp_fast()).sum();
    m + s.ln()
}
