//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order, so node inputs always
//! precede the node itself and [`Graph::backward`] is a single reverse sweep.
//! Leaves keep their accumulated gradient across repeated backward calls
//! until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, La3Head};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary ops; the second operand may broadcast over trailing
/// singleton dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binary<T> {
    Add,
    Sub,
    Mul,
    /// `a / (b + eps)`
    Div(T),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Elu,
    Sigmoid,
    Square,
    Clamp(T, T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind<T> {
    /// Kernelized linear attention with `φ = elu + 1`.
    La3 { eps: T, bound: T },
    /// Scaled dot-product softmax attention.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub groups: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

enum Saved<T> {
    La3(Vec<La3Head<T>>),
    Softmax(Vec<Vec<T>>),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary<T>, Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Shift(Var, T),
    Unary(Unary<T>, Var),
    Reduce {
        x: Var,
        op: Reduce,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    GroupScale {
        x: Var,
        s: Var,
        groups: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ChannelConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        bound: T,
        saved: Saved<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(..) => "elementwise",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Unary(..) => "unary",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupMean { .. } => "group_mean",
            Op::GroupScale { .. } => "group_scale",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelConv1d { .. } => "channel_conv1d",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    label: Option<String>,
}

/// Op recorder for one forward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn binary_block(a: &[usize], b: &[usize]) -> Option<usize> {
    if a.len() != b.len() {
        return None;
    }
    let k = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    if b[k..].iter().all(|&d| d == 1) {
        Some(a[k..].iter().product())
    } else {
        None
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let i = store
            .position(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))?;
        let v = self.leaf(store.entry(i).value.clone(), !store.is_frozen(i));
        self.nodes[v.0].label = Some(name.to_string());
        if !store.is_frozen(i) {
            self.bindings.push((v, i));
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `(parameter index in the store, gradient)` for every bound parameter
    /// that received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.bindings
            .iter()
            .filter_map(|&(v, i)| self.nodes[v.0].grad.as_ref().map(|g| (i, g)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Describes the first node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                return None;
            }
            Some(match &n.label {
                Some(l) => format!("node {i} ({} `{l}`)", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn binary(&mut self, op: Binary<T>, a: Var, b: Var) -> Result<Var> {
        let block = binary_block(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::dim("elementwise", self.shape(a), self.shape(b)))?;
        if let Binary::Div(eps) = op {
            if eps < T::zero() {
                return Err(Error::Parameter("division guard must be >= 0".into()));
            }
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i / block];
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div(eps) => x / (y + eps),
                }
            })
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.binary(Binary::Div(eps), a, b)
    }

    fn row_op(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let c = *sa.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != c || c == 0 {
            return Err(Error::dim(if mul { "mul_row" } else { "add_row" }, sa, sb));
        }
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * bv[i % c] } else { x + bv[i % c] })
            .collect();
        let t = Tensor::new(sa, out)?;
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        Ok(self.push(t, op, &[a, b]))
    }

    /// Adds a `[C]` vector to every row of `a[.. × C]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(a, b, false)
    }

    /// Multiplies every row of `a[.. × C]` by a `[C]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(a, b, true)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn shift(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::Shift(a, s), &[a])
    }

    pub fn unary(&mut self, op: Unary<T>, a: Var) -> Result<Var> {
        if let Unary::Clamp(lo, hi) = op {
            if lo > hi {
                return Err(Error::Parameter(format!(
                    "clamp bounds inverted: {:?} > {:?}",
                    lo, hi
                )));
            }
        }
        let t = self.value(a).map(|x| match op {
            Unary::Elu => kernels::elu(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        });
        Ok(self.push(t, Op::Unary(op, a), &[a]))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a).expect("elu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn reduce(&mut self, op: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, data.len(), 1, vec![1]),
            Some(ax) if ax < shape.len() => {
                let mut s = shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    s,
                )
            }
            Some(ax) => {
                return Err(Error::Parameter(format!(
                    "axis {ax} out of range for rank {}",
                    shape.len()
                )))
            }
        };
        if len == 0 {
            return Err(Error::Parameter("reduction over an empty axis".into()));
        }
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if op == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| data[(o * len + j) * inner + i];
                let slot = o * inner + i;
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = T::zero();
                        for j in 0..len {
                            s += at(j);
                        }
                        out[slot] = if op == Reduce::Mean { s / T::of(len as f64) } else { s };
                    }
                    Reduce::Max => {
                        // strict comparison keeps the lowest index among ties
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = (o * len + best) * inner + i;
                    }
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Reduce {
                x: a,
                op,
                axis,
                argmax,
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// `out[i] = x[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", src.len())));
        }
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { x, index }, &[x]))
    }

    /// Rows `[start, start+len)` of `x` viewed as `[rows × rest]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Shape(format!(
                "rows {start}..{} out of {shape:?}",
                start + len
            )));
        }
        let rest: usize = shape[1..].iter().product();
        let index = (start * rest..(start + len) * rest).collect();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.gather(x, index, &out_shape)
    }

    /// Layer normalization over the last dimension with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.value(gain).len() != c || self.value(bias).len() != c || c == 0 {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let data = self.value(x).data();
        let rows = data.len() / c;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); data.len()];
        let cn = T::of(c as f64);
        for r in 0..rows {
            let row = &data[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean over the token rows of each group: `[G·N × C] → [G × C]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || groups == 0 || shape[0] % groups != 0 {
            return Err(Error::Shape(format!("group_mean: {shape:?} into {groups} groups")));
        }
        let (rows, c) = (shape[0], shape[1]);
        let n = rows / groups;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); groups * c];
        for r in 0..rows {
            kernels::axpy(T::one(), &data[r * c..(r + 1) * c], &mut out[(r / n) * c..(r / n + 1) * c]);
        }
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&[groups, c], out)?;
        Ok(self.push(t, Op::GroupMean { x, groups }, &[x]))
    }

    /// Scales each group's rows of `x[G·N × C]` by that group's row of `s[G × C]`.
    pub fn group_scale(&mut self, x: Var, s: Var, groups: usize) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() != 2 || ss != [groups, sx[1]] || groups == 0 || sx[0] % groups != 0 {
            return Err(Error::dim("group_scale", &sx, &ss));
        }
        let (rows, c) = (sx[0], sx[1]);
        let n = rows / groups;
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let out: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[(i / c / n) * c + i % c])
            .collect();
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(t, Op::GroupScale { x, s, groups }, &[x, s]))
    }

    /// Same-size 2-D convolution with mirror padding on channel-last input
    /// `x[B × H × W × Cin]`, weight `[Cout × Cin × k × k]`, bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[3] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if self.value(b).len() != sw[0] {
            return Err(Error::dim("conv2d bias", &sw, self.shape(b)));
        }
        let geom = ConvGeom {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            c_in: sx[3],
            c_out: sw[0],
            k: sw[2],
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.pixels() * geom.c_out];
        let bias = self.value(b).data();
        for p in 0..geom.pixels() {
            out[p * geom.c_out..(p + 1) * geom.c_out].copy_from_slice(bias);
        }
        kernels::matmul_nt_acc(
            &cols,
            self.value(w).data(),
            &mut out,
            geom.pixels(),
            geom.patch_len(),
            geom.c_out,
        );
        let t = Tensor::new(&[geom.batch, geom.h, geom.w, geom.c_out], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// 1-D convolution across the channel axis of each row of `x[R × C]`,
    /// zero padded, odd kernel `w[k]`, scalar bias `b[1]`.
    pub fn channel_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let k = self.value(w).len();
        if sx.len() != 2 || k % 2 == 0 || self.value(b).len() != 1 {
            return Err(Error::dim("channel_conv1d", &sx, self.shape(w)));
        }
        if sx[1] < k {
            return Err(Error::Parameter(format!(
                "channel count {} smaller than kernel {k}",
                sx[1]
            )));
        }
        let (rows, c) = (sx[0], sx[1]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data()[0],
        );
        let r = (k / 2) as isize;
        let mut out = vec![bd; rows * c];
        for row in 0..rows {
            for j in 0..c {
                let mut s = T::zero();
                for t in 0..k {
                    let src = j as isize + t as isize - r;
                    if src >= 0 && (src as usize) < c {
                        s += wd[t] * xd[row * c + src as usize];
                    }
                }
                out[row * c + j] += s;
            }
        }
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(t, Op::ChannelConv1d { x, w, b }, &[x, w, b]))
    }

    /// Multi-head attention over `[G·N × C]` projections; heads split the
    /// channel axis into contiguous groups of `C / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        kind: AttentionKind<T>,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::dim("attention", &s, self.shape(k)));
        }
        if groups == 0 || heads == 0 || s[0] % groups != 0 || s[1] % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {s:?} with {groups} groups / {heads} heads"
            )));
        }
        let geom = AttnGeom {
            groups,
            tokens: s[0] / groups,
            heads,
            head_dim: s[1] / heads,
        };
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); qd.len()];
        let (mut la3, mut soft) = (Vec::new(), Vec::new());
        for gi in 0..groups {
            for h in 0..heads {
                let (hq, hk, hv) = (
                    head_slice(qd, &geom, gi, h),
                    head_slice(kd, &geom, gi, h),
                    head_slice(vd, &geom, gi, h),
                );
                let (n, d) = (geom.tokens, geom.head_dim);
                let ho = match kind {
                    AttentionKind::La3 { eps, bound } => {
                        let saved = kernels::la3_head(&hq, &hk, &hv, n, d, eps, bound);
                        let o = saved.out.clone();
                        la3.push(saved);
                        o
                    }
                    AttentionKind::Softmax => {
                        let (o, a) = kernels::softmax_head(&hq, &hk, &hv, n, d);
                        soft.push(a);
                        o
                    }
                };
                head_scatter(&ho, &mut out, &geom, gi, h);
            }
        }
        let (bound, saved) = match kind {
            AttentionKind::La3 { bound, .. } => (bound, Saved::La3(la3)),
            AttentionKind::Softmax => (T::infinity(), Saved::Softmax(soft)),
        };
        let t = Tensor::new(&s, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                geom,
                bound,
                saved,
            },
            &[q, k, v],
        ))
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => kernels::axpy(T::one(), &g, acc.data_mut()),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape(), g)?);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // zero-initialized gradient slot for an input
        fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    kernels::matmul_nt_acc(g, val(*b), slot(grads, nodes, *a), m, n, k);
                }
                if wants(*b) {
                    kernels::matmul_tn_acc(val(*a), g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let block = av.len() / bv.len();
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match op {
                            Binary::Add | Binary::Sub => *gj,
                            Binary::Mul => *gj * bv[j / block],
                            Binary::Div(eps) => *gj / (bv[j / block] + *eps),
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (j, gj) in g.iter().enumerate() {
                        let y = bv[j / block];
                        gb[j / block] += match op {
                            Binary::Add => *gj,
                            Binary::Sub => -*gj,
                            Binary::Mul => *gj * av[j],
                            Binary::Div(eps) => -*gj * av[j] / ((y + *eps) * (y + *eps)),
                        };
                    }
                }
            }
            Op::AddRow(a, b) | Op::MulRow(a, b) => {
                let mul = matches!(nodes[i].op, Op::MulRow(..));
                let (av, bv) = (val(*a), val(*b));
                let c = bv.len();
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += if mul { *gj * bv[j % c] } else { *gj };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (j, gj) in g.iter().enumerate() {
                        gb[j % c] += if mul { *gj * av[j] } else { *gj };
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    kernels::axpy(*s, g, slot(grads, nodes, *a));
                }
            }
            Op::Shift(a, _) | Op::Reshape(a) => {
                if wants(*a) {
                    kernels::axpy(T::one(), g, slot(grads, nodes, *a));
                }
            }
            Op::Unary(op, a) => {
                if wants(*a) {
                    let (xv, yv) = (val(*a), nodes[i].value.data());
                    let ga = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        let x = xv[j];
                        ga[j] += g[j]
                            * match op {
                                Unary::Elu => kernels::elu_grad(x),
                                Unary::Sigmoid => yv[j] * (T::one() - yv[j]),
                                Unary::Square => x + x,
                                Unary::Clamp(lo, hi) => {
                                    if x >= *lo && x <= *hi {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                    }
                }
            }
            Op::Reduce { x, op, axis, argmax } => {
                if !wants(*x) {
                    return;
                }
                let shape = nodes[x.0].value.shape().to_vec();
                let gx = slot(grads, nodes, *x);
                match op {
                    Reduce::Max => {
                        for (slot_i, &src) in argmax.iter().enumerate() {
                            gx[src] += g[slot_i];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let (len, inner) = match axis {
                            None => (gx.len(), 1),
                            Some(ax) => (shape[*ax], shape[ax + 1..].iter().product()),
                        };
                        let f = if *op == Reduce::Mean {
                            T::one() / T::of(len as f64)
                        } else {
                            T::one()
                        };
                        for (j, gj) in gx.iter_mut().enumerate() {
                            let o = j / (len * inner);
                            let ii = j % inner;
                            *gj += g[o * inner + ii] * f;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (j, &src) in index.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = val(*gain).len();
                let rows = g.len() / c;
                let gn = val(*gain);
                if wants(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for j in 0..g.len() {
                        gg[j % c] += g[j] * xhat[j];
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for j in 0..g.len() {
                        gb[j % c] += g[j];
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    let cn = T::of(c as f64);
                    for r in 0..rows {
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..c {
                            let gh = g[r * c + j] * gn[j];
                            s1 += gh;
                            s2 += gh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let gh = g[r * c + j] * gn[j];
                            gx[r * c + j] += rstd[r] * (gh - s1 / cn - xhat[r * c + j] * s2 / cn);
                        }
                    }
                }
            }
            Op::GroupMean { x, groups } => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    let c = g.len() / groups;
                    let n = gx.len() / c / groups;
                    let inv = T::one() / T::of(n as f64);
                    for (j, gj) in gx.iter_mut().enumerate() {
                        *gj += g[(j / c / n) * c + j % c] * inv;
                    }
                }
            }
            Op::GroupScale { x, s, groups } => {
                let (xv, sv) = (val(*x), val(*s));
                let c = sv.len() / groups;
                let n = xv.len() / c / groups;
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * sv[(j / c / n) * c + j % c];
                    }
                }
                if wants(*s) {
                    let gs = slot(grads, nodes, *s);
                    for j in 0..g.len() {
                        gs[(j / c / n) * c + j % c] += g[j] * xv[j];
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (p, plen, co) = (geom.pixels(), geom.patch_len(), geom.c_out);
                if wants(*w) {
                    kernels::matmul_tn_acc(g, cols, slot(grads, nodes, *w), p, co, plen);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for j in 0..g.len() {
                        gb[j % co] += g[j];
                    }
                }
                if wants(*x) {
                    let gcols = kernels::matmul(g, val(*w), p, co, plen);
                    kernels::col2im_acc(&gcols, geom, slot(grads, nodes, *x));
                }
            }
            Op::ChannelConv1d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let c = nodes[x.0].value.shape()[1];
                let rows = xv.len() / c;
                let k = wv.len();
                let r = (k / 2) as isize;
                if wants(*b) {
                    slot(grads, nodes, *b)[0] += g.iter().copied().sum::<T>();
                }
                let want_w = wants(*w);
                let want_x = wants(*x);
                let mut gw = vec![T::zero(); k];
                let mut gx = vec![T::zero(); xv.len()];
                for row in 0..rows {
                    for j in 0..c {
                        let gj = g[row * c + j];
                        for t in 0..k {
                            let src = j as isize + t as isize - r;
                            if src >= 0 && (src as usize) < c {
                                let si = row * c + src as usize;
                                gw[t] += gj * xv[si];
                                gx[si] += gj * wv[t];
                            }
                        }
                    }
                }
                if want_w {
                    kernels::axpy(T::one(), &gw, slot(grads, nodes, *w));
                }
                if want_x {
                    kernels::axpy(T::one(), &gx, slot(grads, nodes, *x));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                bound,
                saved,
            } => {
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let (n, d) = (geom.tokens, geom.head_dim);
                let len = qd.len();
                let (mut gq, mut gk, mut gv) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
                for gi in 0..geom.groups {
                    for h in 0..geom.heads {
                        let idx = gi * geom.heads + h;
                        let (hq, hk, hv, hg) = (
                            head_slice(qd, geom, gi, h),
                            head_slice(kd, geom, gi, h),
                            head_slice(vd, geom, gi, h),
                            head_slice(g, geom, gi, h),
                        );
                        let (a, b, c) = match saved {
                            Saved::La3(s) => kernels::la3_head_backward(&s[idx], &hq, &hk, &hv, &hg, n, d, *bound),
                            Saved::Softmax(s) => kernels::softmax_head_backward(&s[idx], &hq, &hk, &hv, &hg, n, d),
                        };
                        head_scatter(&a, &mut gq, geom, gi, h);
                        head_scatter(&b, &mut gk, geom, gi, h);
                        head_scatter(&c, &mut gv, geom, gi, h);
                    }
                }
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        kernels::axpy(T::one(), &gr, slot(grads, nodes, var));
                    }
                }
            }
        }
    }
}

fn head_slice<T: Real>(data: &[T], g: &AttnGeom, group: usize, head: usize) -> Vec<T> {
    let c = g.heads * g.head_dim;
    let mut out = Vec::with_capacity(g.tokens * g.head_dim);
    for t in 0..g.tokens {
        let base = (group * g.tokens + t) * c + head * g.head_dim;
        out.extend_from_slice(&data[base..base + g.head_dim]);
    }
    out
}

fn head_scatter<T: Real>(src: &[T], dst: &mut [T], g: &AttnGeom, group: usize, head: usize) {
    let c = g.heads * g.head_dim;
    for t in 0..g.tokens {
        let base = (group * g.tokens + t) * c + head * g.head_dim;
        dst[base..base + g.head_dim].copy_from_slice(&src[t * g.head_dim..(t + 1) * g.head_dim]);
    }
}
