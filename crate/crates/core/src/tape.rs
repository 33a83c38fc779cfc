//! Reverse-mode differentiation over [`Grid`] values.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the records in
//! reverse and accumulates gradients for every node that depends on a
//! parameter.

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Down2Max,
    Up2Nearest,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        ksize: usize,
    },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Down2Max {
        input: Var,
        argmax: Vec<usize>,
    },
    Up2Nearest(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        target: Grid,
    },
    BernoulliKl {
        logits: Var,
        teacher_logits: Grid,
        temperature: f64,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside logarithms of the BCE loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Grid>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Grid> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Grid> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
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

    pub fn value(&self, var: Var) -> &Grid {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> Var {
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Grid) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; backward never touches it.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 2-D convolution, stride 1, zero padding `ksize / 2`.
    ///
    /// `kernel` is `ksize×ksize×(cin·cout)` laid out `[ky][kx][ci][co]`;
    /// `bias` is `1×1×cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ks = self.value(kernel).shape();
        let cout = self.value(bias).len();
        let ksize = ks.height;
        if ks.height != ks.width || ksize.is_multiple_of(2) {
            return Err(Error::Dims {
                op: "conv2d",
                reason: format!("kernel must be square with odd size, got {ks}"),
            });
        }
        if ks.channels != xs.channels * cout {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ksize}x{ksize}x({}*{cout})", xs.channels),
                ks,
            ));
        }
        let out = conv_forward(self.value(input), self.value(kernel), self.value(bias), ksize, cout);
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                ksize,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let v = self.value(x);
        let out = match kind {
            Unary::Relu => v.map(|a| a.max(0.0)),
            Unary::Sigmoid => v.map(sigmoid),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        };
        let out = match kind {
            Binary::Add => self.value(a).zip_map(self.value(b), |x, y| x + y),
            Binary::Mul => self.value(a).zip_map(self.value(b), |x, y| x * y),
        }
        .map_err(|_| Error::shape(op, self.value(a).shape(), self.value(b).shape()))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|a| a * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn resample(&mut self, kind: Resample, x: Var) -> Result<Var> {
        match kind {
            Resample::Down2Max => self.down2_max(x),
            Resample::Up2Nearest => Ok(self.up2_nearest(x)),
        }
    }

    /// 2×2 max pooling with stride 2. Ties go to the first maximum in
    /// row-major window order.
    pub fn down2_max(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let Shape {
            height: h,
            width: w,
            channels: c,
        } = v.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dims {
                op: "down2_max",
                reason: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = v.as_slice();
        let mut out = Vec::with_capacity(oh * ow * c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((2 * y) * w + 2 * x) * c + ch;
                    let mut best = src[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let rg = self.rg(&[x]);
        let out = Grid::new(oh, ow, c, out)?;
        Ok(self.push(out, Op::Down2Max { input: x, argmax }, rg))
    }

    pub fn up2_nearest(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let out = Grid::from_fn(2 * s.height, 2 * s.width, s.channels, |y, xx, c| {
            v.get(y / 2, xx / 2, c)
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Up2Nearest(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Grid::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Grid::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Grid::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// with log arguments clamped to at least [`LOG_CLAMP`].
    pub fn bce_with_logits(&mut self, logits: Var, target: &Grid) -> Result<Var> {
        let z = self.value(logits);
        z.same_shape(target, "bce_with_logits")?;
        let n = z.len().max(1) as f64;
        let mut total = 0.0;
        for (&zi, &g) in z.as_slice().iter().zip(target.as_slice()) {
            let p = sigmoid(zi);
            total -= g * p.max(LOG_CLAMP).ln() + (1.0 - g) * (1.0 - p).max(LOG_CLAMP).ln();
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Grid::scalar(total / n),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean per-pixel KL(teacher ‖ student) between two-class Bernoulli
    /// distributions `sigmoid(z / T)`, multiplied by `factor`.
    ///
    /// The teacher logits are constants.
    pub fn bernoulli_kl(
        &mut self,
        student_logits: Var,
        teacher_logits: &Grid,
        temperature: f64,
        factor: f64,
    ) -> Result<Var> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Range {
                op: "bernoulli_kl",
                reason: format!("temperature must be > 0, got {temperature}"),
            });
        }
        let zs = self.value(student_logits);
        zs.same_shape(teacher_logits, "bernoulli_kl")?;
        let n = zs.len().max(1) as f64;
        let total: f64 = zs
            .as_slice()
            .iter()
            .zip(teacher_logits.as_slice())
            .map(|(&s, &t)| bernoulli_kl_pixel(t / temperature, s / temperature))
            .sum();
        let rg = self.rg(&[student_logits]);
        Ok(self.push(
            Grid::scalar(factor * total / n),
            Op::BernoulliKl {
                logits: student_logits,
                teacher_logits: teacher_logits.clone(),
                temperature,
                factor,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        let mut grads: Vec<Option<Grid>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Grid::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Grid, grads: &mut [Option<Grid>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                ksize,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let cout = self.value(*bias).len();
                if self.requires_grad(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias));
                    let gbs = gb.as_mut_slice();
                    for px in g.as_slice().chunks_exact(cout) {
                        for (a, &b) in gbs.iter_mut().zip(px) {
                            *a += b;
                        }
                    }
                }
                if self.requires_grad(*kernel) {
                    let gk = slot(grads, *kernel, k);
                    conv_backward_kernel(x, g, gk, *ksize, cout);
                }
                if self.requires_grad(*input) {
                    let gx = slot(grads, *input, x);
                    conv_backward_input(k, g, gx, *ksize, cout);
                }
            }
            Op::Unary(kind, x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let out = node.value.as_slice();
                let xin = self.value(*x).as_slice();
                let gx = slot(grads, *x, self.value(*x)).as_mut_slice();
                match kind {
                    Unary::Relu => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g.as_slice()).zip(xin) {
                            if xi > 0.0 {
                                *a += gi;
                            }
                        }
                    }
                    Unary::Sigmoid => {
                        for ((a, &gi), &o) in gx.iter_mut().zip(g.as_slice()).zip(out) {
                            *a += gi * o * (1.0 - o);
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for (target, other) in [(*a, vb), (*b, va)] {
                    if !self.requires_grad(target) {
                        continue;
                    }
                    let gt = slot(grads, target, self.value(target)).as_mut_slice();
                    match kind {
                        Binary::Add => {
                            for (t, &gi) in gt.iter_mut().zip(g.as_slice()) {
                                *t += gi;
                            }
                        }
                        Binary::Mul => {
                            for ((t, &gi), &o) in gt.iter_mut().zip(g.as_slice()).zip(other.as_slice()) {
                                *t += gi * o;
                            }
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, self.value(*x)).as_mut_slice();
                    for (t, &gi) in gx.iter_mut().zip(g.as_slice()) {
                        *t += factor * gi;
                    }
                }
            }
            Op::Down2Max { input, argmax } => {
                if self.requires_grad(*input) {
                    let gx = slot(grads, *input, self.value(*input)).as_mut_slice();
                    for (&src, &gi) in argmax.iter().zip(g.as_slice()) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Up2Nearest(x) => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, self.value(*x));
                    let w2 = g.width();
                    let c = g.channels();
                    let w = gx.width();
                    let gxs = gx.as_mut_slice();
                    for y in 0..g.height() {
                        for xx in 0..w2 {
                            let src = (y * w2 + xx) * c;
                            let dst = ((y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                gxs[dst + ch] += g.as_slice()[src + ch];
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                let cc = ca + cb;
                for (target, offset, width) in [(*a, 0, ca), (*b, ca, cb)] {
                    if !self.requires_grad(target) || width == 0 {
                        continue;
                    }
                    let gt = slot(grads, target, self.value(target)).as_mut_slice();
                    for (p, px) in g.as_slice().chunks_exact(cc).enumerate() {
                        for ch in 0..width {
                            gt[p * width + ch] += px[offset + ch];
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len().max(1) as f64;
                    let scale = match node.op {
                        Op::Mean(_) => g.as_slice()[0] / n,
                        _ => g.as_slice()[0],
                    };
                    for t in slot(grads, *x, self.value(*x)).as_mut_slice() {
                        *t += scale;
                    }
                }
            }
            Op::Bce { logits, target } => {
                if self.requires_grad(*logits) {
                    let z = self.value(*logits);
                    let scale = g.as_slice()[0] / z.len().max(1) as f64;
                    let gz = slot(grads, *logits, z).as_mut_slice();
                    for ((t, &zi), &gi) in gz.iter_mut().zip(z.as_slice()).zip(target.as_slice()) {
                        let p = sigmoid(zi);
                        // derivative of the clamped form; a clamped log term is flat
                        let mut d = 0.0;
                        if p > LOG_CLAMP {
                            d -= gi * (1.0 - p);
                        }
                        if 1.0 - p > LOG_CLAMP {
                            d += (1.0 - gi) * p;
                        }
                        *t += scale * d;
                    }
                }
            }
            Op::BernoulliKl {
                logits,
                teacher_logits,
                temperature,
                factor,
            } => {
                if self.requires_grad(*logits) {
                    let z = self.value(*logits);
                    let scale = g.as_slice()[0] * factor / (z.len().max(1) as f64 * temperature);
                    let gz = slot(grads, *logits, z).as_mut_slice();
                    for ((t, &zs), &zt) in gz.iter_mut().zip(z.as_slice()).zip(teacher_logits.as_slice()) {
                        *t += scale * (sigmoid(zs / temperature) - sigmoid(zt / temperature));
                    }
                }
            }
        }
    }
}

/// KL between Bernoulli(sigmoid(a)) and Bernoulli(sigmoid(b)), evaluated in
/// log space.
#[inline]
pub fn bernoulli_kl_pixel(a: f64, b: f64) -> f64 {
    let q = sigmoid(a);
    // ln sigmoid(z) = -softplus(-z); ln(1 - sigmoid(z)) = -softplus(z)
    let (lq, lq1) = (-softplus(-a), -softplus(a));
    let (ls, ls1) = (-softplus(-b), -softplus(b));
    q * (lq - ls) + (1.0 - q) * (lq1 - ls1)
}

fn slot<'a>(grads: &'a mut [Option<Grid>], var: Var, like: &Grid) -> &'a mut Grid {
    grads[var.0].get_or_insert_with(|| Grid::zeros_like(like))
}

/// `c ← beta·c + a·b` for row-major `c` (`m×n`); `a` (`m×k`) and `b` (`k×n`)
/// are addressed through (row, column) element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every addressed element in bounds.
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

/// Patch matrix with one row per pixel and columns ordered `(ky, kx, ci)`,
/// matching the kernel layout. Out-of-bounds taps stay zero.
fn im2col(x: &Grid, ksize: usize) -> Vec<f64> {
    let Shape {
        height: h,
        width: w,
        channels: cin,
    } = x.shape();
    let pad = ksize / 2;
    let row = ksize * ksize * cin;
    let xs = x.as_slice();
    let mut cols = vec![0.0; h * w * row];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut cols[(y * w + xx) * row..][..row];
            for ky in 0..ksize {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..ksize {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    dst[(ky * ksize + kx) * cin..][..cin].copy_from_slice(&xs[(iy * w + ix) * cin..][..cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], gx: &mut Grid, ksize: usize) {
    let Shape {
        height: h,
        width: w,
        channels: cin,
    } = gx.shape();
    let pad = ksize / 2;
    let row = ksize * ksize * cin;
    let gxs = gx.as_mut_slice();
    for y in 0..h {
        for xx in 0..w {
            let src = &cols[(y * w + xx) * row..][..row];
            for ky in 0..ksize {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..ksize {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let dst = &mut gxs[(iy * w + ix) * cin..][..cin];
                    for (d, s) in dst.iter_mut().zip(&src[(ky * ksize + kx) * cin..][..cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Grid, k: &Grid, b: &Grid, ksize: usize, cout: usize) -> Grid {
    let (h, w) = (x.height(), x.width());
    let rows = ksize * ksize * x.channels();
    let mut out: Vec<f64> = b.as_slice().iter().copied().cycle().take(h * w * cout).collect();
    let cols;
    let a = if ksize == 1 {
        x.as_slice()
    } else {
        cols = im2col(x, ksize);
        &cols
    };
    gemm((h * w, rows, cout), a, (rows, 1), k.as_slice(), (cout, 1), 1.0, &mut out);
    Grid::new(h, w, cout, out).expect("conv output shape")
}

fn conv_backward_kernel(x: &Grid, g: &Grid, gk: &mut Grid, ksize: usize, cout: usize) {
    let pixels = x.height() * x.width();
    let rows = ksize * ksize * x.channels();
    let cols;
    let a = if ksize == 1 {
        x.as_slice()
    } else {
        cols = im2col(x, ksize);
        &cols
    };
    gemm((rows, pixels, cout), a, (1, rows), g.as_slice(), (cout, 1), 1.0, gk.as_mut_slice());
}

fn conv_backward_input(k: &Grid, g: &Grid, gx: &mut Grid, ksize: usize, cout: usize) {
    let pixels = gx.height() * gx.width();
    let rows = ksize * ksize * gx.channels();
    if ksize == 1 {
        gemm((pixels, cout, rows), g.as_slice(), (cout, 1), k.as_slice(), (1, cout), 1.0, gx.as_mut_slice());
        return;
    }
    let mut cols = vec![0.0; pixels * rows];
    gemm((pixels, cout, rows), g.as_slice(), (cout, 1), k.as_slice(), (1, cout), 0.0, &mut cols);
    col2im_add(&cols, gx, ksize);
}
