use super::kernels::{adaptive_bins, col2im_add, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    ChannelMax {
        x: Var,
        // channel index of the max at every (n, y, x)
        argmax: Vec<usize>,
    },
    AdaptiveMeanPool {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    AdaptiveMaxPool {
        x: Var,
        // flat input index feeding every output cell
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    PowScalar(Var, f64),
    Log(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    GradReverse(Var),
    Bce {
        p: Var,
        t: Var,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// How `gradient_reversal` behaves in the forward pass. Only the gradient
/// checker uses anything but `Identity`.
#[derive(Debug, Default)]
pub(crate) enum ReversalMode {
    #[default]
    Identity,
    /// Identity, remembering every reversal input in call order.
    Record(Vec<Tensor>),
    /// Returns `2·anchor − x`, mirroring perturbations on the reversed path.
    Reflect { anchors: Vec<Tensor>, cursor: usize },
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the vector is already a
/// topological order and `backward` visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    validate: bool,
    pub(crate) reversal: ReversalMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects NaN/Inf in every forward result.
    pub fn with_validation() -> Self {
        Self {
            validate: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.validate && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`, or `None` if no gradient
    /// reached this value.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled when nothing reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .ok_or_else(|| Error::shape(op, self.shape(v), &[0, 0, 0, 0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    /// 2-D convolution. `x`: (N,C,H,W), `w`: (O,C,k,k), `b`: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4("conv2d", x)?;
        let (o, wc, kh, kw) = self.dims4("conv2d", w)?;
        if wc != c || kh != kw {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", self.shape(x), self.shape(w)))?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
                let dst = &mut out[i * o * cols..(i + 1) * o * cols];
                gemm(o, rows, cols, wv, (rows as isize, 1), &col, (cols as isize, 1), 0.0, dst);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[oc]);
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom }, needs, "conv2d")
    }

    /// Fully connected layer. `x`: (N,D), `w`: (O,D), `b`: (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("linear", s, self.shape(w))),
        };
        let o = match self.shape(w) {
            [o, wd] if *wd == d => *o,
            s => return Err(Error::shape("linear", self.shape(x), s)),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            d,
            o,
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (1, d as isize),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, needs, "linear")
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.ng(x);
        self.push(value, op, needs, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), "scale", |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), "add_scalar", |v| v + s)
    }

    /// `s − x`
    pub fn rsub_scalar(&mut self, s: f64, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, s)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    /// `x^p` for non-negative `x`.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, Op::PowScalar(x, p), "pow_scalar", |v| v.powf(p))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), "log", f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn gradient_reversal(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x).clone();
        let value = match &mut self.reversal {
            ReversalMode::Identity => src,
            ReversalMode::Record(anchors) => {
                anchors.push(src.clone());
                src
            }
            ReversalMode::Reflect { anchors, cursor } => {
                let anchor = &anchors[*cursor];
                *cursor += 1;
                let data = anchor
                    .data()
                    .iter()
                    .zip(src.data())
                    .map(|(a, v)| 2.0 * a - v)
                    .collect();
                Tensor::new(src.shape(), data)?
            }
        };
        let needs = self.ng(x);
        self.push(value, Op::GradReverse(x), needs, "gradient_reversal")
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise binary cross-entropy `−[t·ln p + (1−t)·ln(1−p)]` with `p`
    /// clamped to `[eps, 1−eps]`.
    pub fn bce(&mut self, p: Var, t: Var, eps: f64) -> Result<Var> {
        self.binary(p, t, Op::Bce { p, t, eps }, "bce", |p, t| {
            let pc = p.clamp(eps, 1.0 - eps);
            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs, "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        self.push(value, Op::Reshape(x), needs, "reshape")
    }

    /// Max over the channel axis: (N,C,H,W) → (N,1,H,W). Ties go to the
    /// lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("channel_max", x)?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        let mut argmax = vec![0; n * plane];
        for i in 0..n {
            for p in 0..plane {
                let mut best = src[i * c * plane + p];
                let mut arg = 0;
                for ch in 1..c {
                    let v = src[(i * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out[i * plane + p] = best;
                argmax[i * plane + p] = arg;
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, 1, h, w], out)?, Op::ChannelMax { x, argmax }, needs, "channel_max")
    }

    fn check_pool(&self, op: &'static str, x: Var, out_h: usize, out_w: usize) -> Result<(usize, usize, usize, usize)> {
        let dims @ (_, _, h, w) = self.dims4(op, x)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(op, self.shape(x), &[out_h, out_w]));
        }
        Ok(dims)
    }

    /// Partitions each H×W plane into `out_h×out_w` near-equal bins and
    /// averages each bin.
    pub fn adaptive_mean_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.check_pool("adaptive_mean_pool", x, out_h, out_w)?;
        let (rows, cols) = (adaptive_bins(h, out_h), adaptive_bins(w, out_w));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in src.chunks(h * w) {
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push(value, Op::AdaptiveMeanPool { x, out_h, out_w }, needs, "adaptive_mean_pool")
    }

    /// Adaptive max pooling; gradient flows to the first maximal cell of each
    /// bin in row-major order.
    pub fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.check_pool("adaptive_max_pool", x, out_h, out_w)?;
        let (rows, cols) = (adaptive_bins(h, out_h), adaptive_bins(w, out_w));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        let mut argmax = Vec::with_capacity(out.capacity());
        for (pi, plane) in src.chunks(h * w).enumerate() {
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = y0 * w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let v = plane[y * w + xx];
                            if v > best {
                                best = v;
                                arg = y * w + xx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(pi * h * w + arg);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push(value, Op::AdaptiveMaxPool { x, argmax }, needs, "adaptive_max_pool")
    }

    /// Concatenates (N,Ci,H,W) tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.dims4("concat_channels", first)?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.dims4("concat_channels", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", self.shape(first), self.shape(p)));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[i * pc * plane..(i + 1) * pc * plane]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        self.push(value, Op::ConcatChannels(parts.to_vec()), needs, "concat_channels")
    }

    /// Channels `[start, start+len)` of an (N,C,H,W) tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("slice_channels", x)?;
        if len == 0 || start + len > c {
            return Err(Error::OutOfRange {
                what: "channel slice",
                index: (start + len) as i64,
                valid: format!("1..={c}"),
            });
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * plane..(i * c + start + len) * plane]);
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, len, h, w], out)?, Op::SliceChannels { x, start }, needs, "slice_channels")
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// node that needs a gradient. Gradients from a previous sweep are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.needs_grad {
                continue;
            }
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &'a mut [Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn propagate(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => conv2d_backward(nodes, *x, *w, *b, geom, g),
        Op::Linear { x, w, b } => {
            let (n, d) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let o = nodes[w.0].value.shape()[0];
            if nodes[x.0].needs_grad {
                let wv = nodes[w.0].value.data().to_vec();
                let gx = acc(nodes, *x).unwrap();
                gemm(n, o, d, g, (o as isize, 1), &wv, (d as isize, 1), 1.0, gx);
            }
            if nodes[w.0].needs_grad {
                let xv = nodes[x.0].value.data().to_vec();
                let gw = acc(nodes, *w).unwrap();
                gemm(o, n, d, g, (1, o as isize), &xv, (d as isize, 1), 1.0, gw);
            }
            if let Some(gb) = b.and_then(|b| acc(nodes, b)) {
                for row in g.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = acc(nodes, *x) {
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(&xv) {
                    if xi > 0.0 {
                        *a += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(nodes, *x) {
                for ((a, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a += gi * y * (1.0 - y);
                }
            }
        }
        Op::ChannelMax { x, argmax } => {
            let (_, c, h, w) = nodes[x.0].value.dims4().unwrap();
            let plane = h * w;
            if let Some(gx) = acc(nodes, *x) {
                for (idx, (&gi, &ch)) in g.iter().zip(argmax).enumerate() {
                    let (i, p) = (idx / plane, idx % plane);
                    gx[(i * c + ch) * plane + p] += gi;
                }
            }
        }
        Op::AdaptiveMeanPool { x, out_h, out_w } => {
            let (_, _, h, w) = nodes[x.0].value.dims4().unwrap();
            let (rows, cols) = (adaptive_bins(h, *out_h), adaptive_bins(w, *out_w));
            if let Some(gx) = acc(nodes, *x) {
                let cells = out_h * out_w;
                for (pi, plane) in gx.chunks_mut(h * w).enumerate() {
                    for (r, &(y0, y1)) in rows.iter().enumerate() {
                        for (q, &(x0, x1)) in cols.iter().enumerate() {
                            let gi = g[pi * cells + r * out_w + q] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                plane[y * w + x0..y * w + x1].iter_mut().for_each(|a| *a += gi);
                            }
                        }
                    }
                }
            }
        }
        Op::AdaptiveMaxPool { x, argmax } => {
            if let Some(gx) = acc(nodes, *x) {
                for (&gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
            }
        }
        Op::ConcatChannels(parts) => {
            let (n, total_c, h, w) = out.dims4().unwrap();
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p.0].value.shape()[1];
                if let Some(gp) = acc(nodes, p) {
                    for i in 0..n {
                        let src = &g[(i * total_c + offset) * plane..(i * total_c + offset + pc) * plane];
                        gp[i * pc * plane..(i + 1) * pc * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += pc;
            }
        }
        Op::SliceChannels { x, start } => {
            let (n, len, h, w) = out.dims4().unwrap();
            let c = nodes[x.0].value.shape()[1];
            let plane = h * w;
            if let Some(gx) = acc(nodes, *x) {
                for i in 0..n {
                    let dst = &mut gx[(i * c + start) * plane..(i * c + start + len) * plane];
                    dst.iter_mut()
                        .zip(&g[i * len * plane..(i + 1) * len * plane])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Reshape(x) | Op::AddScalar(x) => {
            if let Some(gx) = acc(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::GradReverse(x) => {
            if let Some(gx) = acc(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = acc(nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            if let Some(ga) = acc(nodes, *a) {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = acc(nodes, *b) {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                    *x += gi * ai;
                }
            }
        }
        Op::Square(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = acc(nodes, *x) {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                    *a += 2.0 * xi * gi;
                }
            }
        }
        Op::PowScalar(x, p) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = acc(nodes, *x) {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                    if *p != 0.0 {
                        *a += gi * p * xi.powf(p - 1.0);
                    }
                }
            }
        }
        Op::Log(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = acc(nodes, *x) {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                    *a += gi / xi;
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = acc(nodes, *x) {
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                    if *xi >= *lo && *xi <= *hi {
                        *a += gi;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::Bce { p, t, eps } => {
            let pv = nodes[p.0].value.data().to_vec();
            let tv = nodes[t.0].value.data().to_vec();
            if let Some(gp) = acc(nodes, *p) {
                for (i, a) in gp.iter_mut().enumerate() {
                    let (pi, ti) = (pv[i], tv[i]);
                    if pi > *eps && pi < 1.0 - eps {
                        *a += g[i] * (pi - ti) / (pi * (1.0 - pi));
                    }
                }
            }
            if let Some(gt) = acc(nodes, *t) {
                for (i, a) in gt.iter_mut().enumerate() {
                    let pc = pv[i].clamp(*eps, 1.0 - eps);
                    *a += g[i] * ((1.0 - pc).ln() - pc.ln());
                }
            }
        }
    }
}

fn conv2d_backward(nodes: &mut [Node], x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[f64]) {
    let n = nodes[x.0].value.shape()[0];
    let o = nodes[w.0].value.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let img = geom.channels * geom.height * geom.width;

    if let Some(gb) = b.and_then(|b| acc(nodes, b)) {
        for gi in g.chunks(o * cols) {
            for (oc, chunk) in gi.chunks(cols).enumerate() {
                gb[oc] += chunk.iter().sum::<f64>();
            }
        }
    }

    let xv = nodes[x.0].value.data().to_vec();
    let wv = nodes[w.0].value.data().to_vec();
    let mut col = vec![0.0; rows * cols];
    if nodes[w.0].needs_grad {
        let gw = acc(nodes, w).unwrap();
        for i in 0..n {
            im2col(&xv[i * img..(i + 1) * img], geom, &mut col);
            let gi = &g[i * o * cols..(i + 1) * o * cols];
            // dW += dOut · colᵀ
            gemm(o, cols, rows, gi, (cols as isize, 1), &col, (1, cols as isize), 1.0, gw);
        }
    }
    if nodes[x.0].needs_grad {
        let gx = acc(nodes, x).unwrap();
        for i in 0..n {
            let gi = &g[i * o * cols..(i + 1) * o * cols];
            // dCol = Wᵀ · dOut
            gemm(rows, o, cols, &wv, (1, rows as isize), gi, (cols as isize, 1), 0.0, &mut col);
            col2im_add(&col, geom, &mut gx[i * img..(i + 1) * img]);
        }
    }
}
