//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and accumulates gradients only along nodes that
//! (transitively) depend on a node created with [`Graph::variable`].

use super::tensor::{reflect_index, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    PadReflect {
        x: Var,
        top: usize,
        left: usize,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    ChannelStats {
        x: Var,
    },
    SqDist {
        x: Var,
        target: Tensor<T>,
        scale: T,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<u8>,
        probs: Tensor<T>,
    },
    LinComb(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Deviation floor of channel statistics: `std = sqrt(var + STATS_EPS^2)`,
/// so a constant channel reports a deviation of exactly `STATS_EPS`.
pub const STATS_EPS: f64 = 1e-5;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stride-1 convolution with an odd square kernel and reflect padding so
    /// the output keeps the input's spatial size. `w` is `[co, ci, k, k]`,
    /// `b` is `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = upsample2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel-wise concatenation of two maps with equal spatial size.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, ha, wa) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((ha, wa), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[ca + cb, ha, wa], data), Op::Concat(a, b), rg)
    }

    pub fn pad_reflect(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let out = self.value(x).pad_reflect(top, bottom, left, right);
        let rg = self.rg(x);
        self.push(out, Op::PadReflect { x, top, left }, rg)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let out = self.value(x).crop(top, left, height, width);
        let rg = self.rg(x);
        self.push(out, Op::Crop { x, top, left }, rg)
    }

    /// Per-channel mean and stabilised standard deviation, output `[2, C]`
    /// with means in row 0 and deviations in row 1.
    pub fn channel_stats(&mut self, x: Var) -> Var {
        let out = channel_stats(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::ChannelStats { x }, rg)
    }

    /// `scale * sum((x - target)^2)` as a scalar.
    pub fn sq_dist(&mut self, x: Var, target: Tensor<T>, scale: T) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dims(), target.dims(), "sq_dist shape mismatch");
        let s: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s * scale), Op::SqDist { x, target, scale }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Var {
        let n = T::from_usize(target.len().max(1)).unwrap();
        self.sq_dist(x, target, T::one() / n)
    }

    /// Mean per-pixel softmax cross-entropy of `[K, H, W]` logits against
    /// class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Var {
        let lv = self.value(logits);
        let (k, h, w) = lv.chw();
        assert_eq!(targets.len(), h * w, "target size mismatch");
        let probs = softmax_channels(lv);
        let n = h * w;
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            assert!((t as usize) < k, "target class out of range");
            // log-softmax computed from logits for stability
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(lv.data()[c * n + i]);
            }
            let mut z = T::zero();
            for c in 0..k {
                z += (lv.data()[c * n + i] - m).exp();
            }
            let logp = lv.data()[t as usize * n + i] - m - z.ln();
            total -= logp.to_f64c();
        }
        let loss = T::from_f64c(total / n.max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum_i coef_i * x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).dims());
        for &(v, c) in terms {
            let val = self.value(v);
            assert_eq!(val.dims(), out.dims(), "lincomb shape mismatch");
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::LinComb(terms.to_vec()), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let co = dims4(wv).0;
                let (_, h, wd) = xv.chw();
                let n = h * wd;
                if self.rg(*b) {
                    let mut db = vec![T::zero(); co];
                    for (o, d) in db.iter_mut().enumerate() {
                        *d = g.data()[o * n..(o + 1) * n].iter().copied().sum();
                    }
                    acc(*b, Tensor::from_vec(&[co], db));
                }
                let (gw, gx) = (self.rg(*w), self.rg(*x));
                if gw || gx {
                    let (dw, dx) = conv_backward(xv, wv, g, gw, gx);
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                acc(*x, Tensor::from_vec(xv.dims(), data));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                acc(*x, Tensor::from_vec(y.dims(), data));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64c(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + y) * w + xx] = g.data()[(ch * oh + y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx));
            }
            Op::Concat(a, b) => {
                let (ca, h, w) = self.value(*a).chw();
                let split = ca * h * w;
                if self.rg(*a) {
                    acc(*a, Tensor::from_vec(self.value(*a).dims(), g.data()[..split].to_vec()));
                }
                if self.rg(*b) {
                    acc(*b, Tensor::from_vec(self.value(*b).dims(), g.data()[split..].to_vec()));
                }
            }
            Op::PadReflect { x, top, left } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ph, pw) = g.chw();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for py in 0..ph {
                        let sy = reflect_index(py as isize - *top as isize, h);
                        for px in 0..pw {
                            let sx = reflect_index(px as isize - *left as isize, w);
                            dx[(ch * h + sy) * w + sx] += g.data()[(ch * ph + py) * pw + px];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx));
            }
            Op::Crop { x, top, left } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ch_, cw) = g.chw();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ch_ {
                        let src = &g.data()[(ch * ch_ + y) * cw..(ch * ch_ + y + 1) * cw];
                        let dst = (ch * h + y + top) * w + left;
                        dx[dst..dst + cw].copy_from_slice(src);
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx));
            }
            Op::ChannelStats { x } => {
                let xv = self.value(*x);
                let (c, h, w) = xv.chw();
                let n = h * w;
                let nt = T::from_usize(n).unwrap();
                let stats = &node.value;
                let mut dx = vec![T::zero(); c * n];
                for ch in 0..c {
                    let mean = stats.data()[ch];
                    let std = stats.data()[c + ch];
                    let gm = g.data()[ch] / nt;
                    let gs = g.data()[c + ch] / (nt * std);
                    let plane = xv.channel(ch);
                    for (i, &v) in plane.iter().enumerate() {
                        dx[ch * n + i] = gm + gs * (v - mean);
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx));
            }
            Op::SqDist { x, target, scale } => {
                let xv = self.value(*x);
                let two = T::from_f64c(2.0) * *scale * g.item();
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| two * (a - b))
                    .collect();
                acc(*x, Tensor::from_vec(xv.dims(), data));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let (k, h, w) = probs.chw();
                let n = h * w;
                let s = g.item() / T::from_usize(n.max(1)).unwrap();
                let mut d = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    d[t as usize * n + i] -= T::one();
                }
                for v in &mut d {
                    *v *= s;
                }
                acc(*logits, Tensor::from_vec(&[k, h, w], d));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    let mut t = g.clone();
                    t.scale(c);
                    acc(v, t);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4<T: Real>(w: &Tensor<T>) -> (usize, usize, usize, usize) {
    let d = w.dims();
    assert_eq!(d.len(), 4, "conv kernel must be [co, ci, k, k]");
    assert_eq!(d[2], d[3], "conv kernel must be square");
    assert!(d[2] % 2 == 1, "conv kernel size must be odd");
    (d[0], d[1], d[2], d[3])
}

/// Output rows per im2col tile. Tiles are kept small enough to stay in cache,
/// which matters far more than gemm shape for wide images.
fn tile_rows(kk: usize, w: usize) -> usize {
    const TILE_ELEMS: usize = 1 << 15;
    (TILE_ELEMS / (kk * w).max(1)).max(1)
}

fn pad_for_conv<T: Real>(x: &Tensor<T>, k: usize) -> std::borrow::Cow<'_, Tensor<T>> {
    let p = k / 2;
    if p == 0 {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.pad_reflect(p, p, p, p))
    }
}

/// im2col for output rows `y0..y0 + rows` into `cols` laid out `[kk, rows * w]`.
fn im2col_rows<T: Real>(padded: &Tensor<T>, k: usize, w: usize, y0: usize, rows: usize, cols: &mut [T]) {
    let (ci, _, pw) = padded.chw();
    let n = rows * w;
    for c in 0..ci {
        let plane = padded.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for y in 0..rows {
                    let sy = (y0 + y + ky) * pw + kx;
                    dst[y * w..(y + 1) * w].copy_from_slice(&plane[sy..sy + w]);
                }
            }
        }
    }
}

/// Scatter-adds a column tile back into the padded gradient buffer.
fn col2im_rows<T: Real>(dcols: &[T], dpad: &mut [T], ph: usize, pw: usize, k: usize, w: usize, y0: usize, rows: usize) {
    let n = rows * w;
    let ci = dpad.len() / (ph * pw);
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcols[row * n..(row + 1) * n];
                for y in 0..rows {
                    let base = (c * ph + y0 + y + ky) * pw + kx;
                    for (d, &s) in dpad[base..base + w].iter_mut().zip(&src[y * w..(y + 1) * w]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Folds a reflect-padded gradient back onto the unpadded input.
fn fold_reflect<T: Real>(dpad: Vec<T>, ci: usize, h: usize, w: usize, p: usize) -> Tensor<T> {
    if p == 0 {
        return Tensor::from_vec(&[ci, h, w], dpad);
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut dx = vec![T::zero(); ci * h * w];
    for c in 0..ci {
        for py in 0..ph {
            let sy = reflect_index(py as isize - p as isize, h);
            for px in 0..pw {
                let sx = reflect_index(px as isize - p as isize, w);
                dx[(c * h + sy) * w + sx] += dpad[(c * ph + py) * pw + px];
            }
        }
    }
    Tensor::from_vec(&[ci, h, w], dx)
}

pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (co, ci, k, _) = dims4(w);
    let (xc, h, wd) = x.chw();
    assert_eq!(xc, ci, "conv input has {xc} channels, kernel expects {ci}");
    assert_eq!(b.dims(), [co], "conv bias shape mismatch");
    let src = pad_for_conv(x, k);
    let n = h * wd;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); co * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(b.data()[o]);
    }
    let step = tile_rows(kk, wd);
    let mut cols = vec![T::zero(); kk * step * wd];
    let mut y0 = 0;
    while y0 < h {
        let rows = step.min(h - y0);
        let tn = rows * wd;
        im2col_rows(&src, k, wd, y0, rows, &mut cols[..kk * tn]);
        T::gemm(
            co, kk, tn, T::one(), w.data(), kk as isize, 1, &cols[..kk * tn], tn as isize, 1,
            T::one(), &mut out[y0 * wd..], n as isize, 1,
        );
        y0 += rows;
    }
    Tensor::from_vec(&[co, h, wd], out)
}

/// Kernel and input gradients of [`conv_forward`], recomputing column tiles
/// instead of keeping the full im2col matrix alive on the tape.
fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    want_w: bool,
    want_x: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (co, ci, k, _) = dims4(w);
    let (_, h, wd) = x.chw();
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, wd + 2 * p);
    let n = h * wd;
    let kk = ci * k * k;
    let src = pad_for_conv(x, k);
    let mut dw = want_w.then(|| vec![T::zero(); co * kk]);
    let mut dpad = want_x.then(|| vec![T::zero(); ci * ph * pw]);
    let step = tile_rows(kk, wd);
    let mut cols = vec![T::zero(); kk * step * wd];
    let mut y0 = 0;
    while y0 < h {
        let rows = step.min(h - y0);
        let tn = rows * wd;
        let gt = &g.data()[y0 * wd..];
        if let Some(dw) = dw.as_mut() {
            im2col_rows(&src, k, wd, y0, rows, &mut cols[..kk * tn]);
            // dW[co, kk] += dY[co, tn] * cols[kk, tn]^T
            T::gemm(
                co, tn, kk, T::one(), gt, n as isize, 1, &cols[..kk * tn], 1, tn as isize,
                T::one(), dw, kk as isize, 1,
            );
        }
        if let Some(dpad) = dpad.as_mut() {
            // dcols[kk, tn] = W[co, kk]^T * dY[co, tn]
            T::gemm(
                kk, co, tn, T::one(), w.data(), 1, kk as isize, gt, n as isize, 1, T::zero(),
                &mut cols[..kk * tn], tn as isize, 1,
            );
            col2im_rows(&cols[..kk * tn], dpad, ph, pw, k, wd, y0, rows);
        }
        y0 += rows;
    }
    (
        dw.map(|d| Tensor::from_vec(w.dims(), d)),
        dpad.map(|d| fold_reflect(d, ci, h, wd, p)),
    )
}

pub(crate) fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64c(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let s = (plane[2 * y * w + 2 * xx] + plane[(2 * y + 1) * w + 2 * xx + 1])
                    + (plane[2 * y * w + 2 * xx + 1] + plane[(2 * y + 1) * w + 2 * xx]);
                out[(ch * oh + y) * ow + xx] = s * quarter;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub(crate) fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub(crate) fn channel_stats<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let mut out = vec![T::zero(); 2 * c];
    for ch in 0..c {
        let plane = x.channel(ch);
        let mean = plane.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
        let var = plane.iter().map(|v| (v.to_f64c() - mean).powi(2)).sum::<f64>() / n;
        out[ch] = T::from_f64c(mean);
        out[c + ch] = T::from_f64c((var + STATS_EPS * STATS_EPS).sqrt());
    }
    Tensor::from_vec(&[2, c], out)
}

pub(crate) fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (k, h, w) = logits.chw();
    let n = h * w;
    let mut out = vec![T::zero(); k * n];
    for i in 0..n {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data()[c * n + i]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (logits.data()[c * n + i] - m).exp();
            out[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + i] = out[c * n + i] / z;
        }
    }
    Tensor::from_vec(&[k, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(dims: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(f).collect())
    }

    /// Central finite difference of a scalar function built on a fresh graph.
    fn check_grad(x0: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("gradient").clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "grad mismatch at {i}: analytic {a}, numeric {fd}"
            );
        }
    }

    #[test]
    fn conv_of_delta_kernel_is_identity() {
        let x = seq(&[1, 3, 3], |i| i as f64);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let out = conv_forward(&x, &w, &Tensor::zeros(&[1]));
        assert_eq!(out, x);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let w = seq(&[2, 2, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let b = seq(&[2], |i| i as f64 * 0.3);
        let x0 = seq(&[2, 4, 5], |i| ((i * 13 % 17) as f64) * 0.05 - 0.3);
        let (w2, b2) = (w.clone(), b.clone());
        check_grad(x0.clone(), move |g, x| {
            let wv = g.constant(w2.clone());
            let bv = g.constant(b2.clone());
            let y = g.conv2d(x, wv, bv);
            let r = g.relu(y);
            g.mse(r, Tensor::full(&[2, 4, 5], 0.1))
        });
        check_grad(w.clone(), move |g, wv| {
            let xv = g.constant(x0.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, wv, bv);
            g.sq_dist(y, Tensor::zeros(&[2, 4, 5]), 0.5)
        });
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (co, ci, k, _) = dims4(w);
        let (_, h, wd) = x.chw();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[co, h, wd]);
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = reflect_index(y as isize + ky as isize - p, h);
                                let sx = reflect_index(xx as isize + kx as isize - p, wd);
                                s += w.data()[((o * ci + c) * k + ky) * k + kx] * x.data()[(c * h + sy) * wd + sx];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * wd + xx] = s;
                }
            }
        }
        out
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn tiled_conv_matches_direct_convolution_across_tiles() {
        // 36 * 300 columns per row gives several tiles with a ragged last one.
        let (ci, co, h, wd) = (4, 3, 20, 300);
        assert!(tile_rows(ci * 9, wd) < h && h % tile_rows(ci * 9, wd) != 0);
        let x = seq(&[ci, h, wd], |i| ((i * 31 % 97) as f64) * 0.01 - 0.4);
        let w = seq(&[co, ci, 3, 3], |i| ((i * 7 % 13) as f64 - 6.0) * 0.05);
        let out = conv_forward(&x, &w, &Tensor::zeros(&[co]));
        let expect = naive_conv(&x, &w);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Convolution is bilinear, so the adjoint identities pin both gradients.
        let g = seq(&[co, h, wd], |i| ((i * 11 % 23) as f64) * 0.03 - 0.3);
        let (dw, dx) = conv_backward(&x, &w, &g, true, true);
        let (dw, dx) = (dw.unwrap(), dx.unwrap());
        let v = seq(&[ci, h, wd], |i| ((i * 5 % 19) as f64) * 0.02 - 0.2);
        assert!((dot(&dx, &v) - dot(&g, &naive_conv(&v, &w))).abs() < 1e-8);
        let u = seq(&[co, ci, 3, 3], |i| ((i * 3 % 5) as f64) * 0.1 - 0.2);
        assert!((dot(&dw, &u) - dot(&g, &naive_conv(&x, &u))).abs() < 1e-8);
    }

    #[test]
    fn pooling_upsampling_and_concat_gradients() {
        let x0 = seq(&[2, 4, 4], |i| (i as f64 * 0.37).sin());
        check_grad(x0, |g, x| {
            let p = g.avg_pool2(x);
            let u = g.upsample2(p);
            let c = g.concat(u, x);
            let s = g.sigmoid(c);
            let padded = g.pad_reflect(s, 1, 2, 2, 1);
            let cr = g.crop(padded, 1, 0, 5, 6);
            g.mse(cr, Tensor::full(&[4, 5, 6], 0.3))
        });
    }

    #[test]
    fn channel_stats_gradient() {
        let x0 = seq(&[3, 3, 4], |i| ((i * 5 % 7) as f64) * 0.2);
        let target = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        check_grad(x0, move |g, x| {
            let s = g.channel_stats(x);
            g.sq_dist(s, target.clone(), 1.0 / 3.0)
        });
    }

    #[test]
    fn softmax_ce_gradient_and_uniform_value() {
        let x0 = seq(&[3, 2, 3], |i| (i as f64 * 0.9).cos());
        let targets = vec![0u8, 1, 2, 2, 1, 0];
        let t2 = targets.clone();
        check_grad(x0, move |g, x| g.softmax_cross_entropy(x, &t2));

        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 3]));
        let l = g.softmax_cross_entropy(x, &targets);
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lincomb_weights_terms() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let s = g.lincomb(&[(a, 5.0), (b, 2.0)]);
        assert_eq!(g.value(s).item(), 16.0);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().item(), 5.0);
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let s = g.lincomb(&[(a, 1.0), (b, 1.0)]);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
