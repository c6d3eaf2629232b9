//! Reverse-mode differentiation over a flat tape.
//!
//! Every op appends a node holding its forward value; handles ([`Var`]) are
//! indices into the tape, so recording order is a topological order and the
//! backward sweep simply walks the tape in reverse. Nodes that do not depend
//! on any gradient-requiring leaf are skipped during the sweep.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SvdBackwardVariant, SvdFactors, SvdGradContext};
use crate::tensor::{self, conv_out_dim, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ChannelProject {
        x: Var,
        p: Var,
    },
    FoldIn {
        w: Var,
        p: Var,
    },
    FrobeniusSq(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    Flatten(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Phi {
        x: Var,
        factors: Box<SvdFactors>,
        ctx: Box<SvdGradContext>,
        variant: SvdBackwardVariant,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    svd_variant: SvdBackwardVariant,
    svd_guard: Option<f64>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Selects the SVD backward formula used by subsequent `phi` nodes.
    pub fn with_svd_variant(mut self, variant: SvdBackwardVariant) -> Self {
        self.svd_variant = variant;
        self
    }

    /// Overrides the relative singular-gap guard for subsequent `phi` nodes.
    pub fn with_svd_guard(mut self, guard: f64) -> Self {
        self.svd_guard = Some(guard);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let out = Tensor::new(self.shape(x), data).expect("same length");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Mixes channels with a `[c, r]` matrix: `out[:, j] = Σ_m p[m, j]·x[:, m]`.
    pub fn channel_project(&mut self, x: Var, p: Var) -> Result<Var> {
        let out = channel_project_forward(self.value(x), self.value(p))?;
        let needs = self.needs(x) || self.needs(p);
        Ok(self.push(out, Op::ChannelProject { x, p }, needs))
    }

    /// Compresses a kernel's input channels: `[o, c, k, k] × [c, r] → [o, r, k, k]`.
    pub fn fold_in(&mut self, w: Var, p: Var) -> Result<Var> {
        let out = fold_in_forward(self.value(w), self.value(p))?;
        let needs = self.needs(w) || self.needs(p);
        Ok(self.push(out, Op::FoldIn { w, p }, needs))
    }

    /// Squared Frobenius norm, as a scalar.
    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).frobenius_sq();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean cross-entropy of row-wise softmax over `[n, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &[n, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss += -(row[labels[i]] - mx - denom.ln());
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Non-overlapping `k×k` average pooling; trailing rows/cols that do not
    /// fill a window are dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::arg("avg_pool window must be positive"));
        }
        let [n, c, h, w] = self.value(x).dims4()?;
        let (oh, ow) = (h / k, w / k);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("avg_pool", &[n, c, h, w], &[k, k]));
        }
        let src = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += s[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, k }, needs))
    }

    /// `[n, c, h, w] → [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let src = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    /// `[n, ...] → [n, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::arg("flatten of a scalar"));
        }
        let rest: usize = shape[1..].iter().product();
        let out = self.value(x).clone().reshape(&[shape[0], rest])?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Flatten(x), needs))
    }

    /// `y = x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, d_in] = self.value(x).dims2()?;
        let [d_out, w_in] = self.value(w).dims2()?;
        if w_in != d_in {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [d_out] {
            return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
        }
        let mut out = vec![0.0; n * d_out];
        tensor::gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            n,
            d_in,
            d_out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(d_out) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let out = Tensor::new(&[n, d_out], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Nearest orthonormal-column matrix `U·Vᵀ` of a tall proxy matrix.
    ///
    /// Fails with [`Error::DegenerateSpectrum`] when the backward pass would
    /// divide by a vanishing singular-value gap; the caller is expected to
    /// perturb the proxy and retry.
    pub fn phi(&mut self, x: Var) -> Result<Var> {
        let xm = Mat::from_tensor(self.value(x))?;
        let factors = linalg::thin_svd(&xm)?;
        let ctx = SvdGradContext::new(&factors, self.svd_guard.unwrap_or(linalg::DEFAULT_GUARD))?;
        let out = factors.polar().to_tensor();
        let needs = self.needs(x);
        let variant = self.svd_variant;
        Ok(self.push(
            out,
            Op::Phi {
                x,
                factors: Box::new(factors),
                ctx: Box::new(ctx),
                variant,
            },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w) || b.is_some_and(|b| self.needs(b)),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some((dw, db)) = dw.zip(db) {
                    self.accumulate(grads, *w, dw);
                    if let Some(b) = b {
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = gout
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gout.shape(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                let neg = gout.data().iter().map(|v| -v).collect();
                self.accumulate(grads, *b, Tensor::new(gout.shape(), neg)?);
            }
            Op::Scale(x, s) => {
                let data = gout.data().iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, Tensor::new(gout.shape(), data)?);
            }
            Op::ChannelProject { x, p } => {
                let (dx, dp) = channel_project_backward(
                    self.value(*x),
                    self.value(*p),
                    gout,
                    self.needs(*x),
                    self.needs(*p),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dp) = dp {
                    self.accumulate(grads, *p, dp);
                }
            }
            Op::FoldIn { w, p } => {
                let (dw, dp) = fold_in_backward(self.value(*w), self.value(*p), gout)?;
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *p, dp);
            }
            Op::FrobeniusSq(x) => {
                let g = gout.item();
                let xv = self.value(*x);
                let data = xv.data().iter().map(|v| 2.0 * g * v).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?);
            }
            Op::Sum(x) => {
                let g = gout.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let g = gout.item();
                let [n, k] = self.value(*logits).dims2()?;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                let scale = g / n as f64;
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[n, k], d)?);
            }
            Op::AvgPool { x, k } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let [_, _, oh, ow] = gout.dims4()?;
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                let go = gout.data();
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = go[plane * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..*k {
                                for dxx in 0..*k {
                                    dx[plane * h * w + (oy * k + dy) * w + ox * k + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; n * c * hw];
                for (p, g) in gout.data().iter().enumerate() {
                    for v in &mut dx[p * hw..(p + 1) * hw] {
                        *v = g * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Flatten(x) => {
                let dx = gout.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let [n, d_in] = self.value(*x).dims2()?;
                let [d_out, _] = self.value(*w).dims2()?;
                let go = gout.data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    tensor::gemm_nn(go, self.value(*w).data(), &mut dx, n, d_out, d_in);
                    self.accumulate(grads, *x, Tensor::new(&[n, d_in], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    tensor::gemm_tn(go, self.value(*x).data(), &mut dw, d_out, n, d_in);
                    self.accumulate(grads, *w, Tensor::new(&[d_out, d_in], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; d_out];
                    for row in go.chunks(d_out) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[d_out], db)?);
                }
            }
            Op::Phi {
                x,
                factors,
                ctx,
                variant,
            } => {
                let dp = Mat::from_tensor(gout)?;
                let (du, dv) = linalg::polar_upstream(factors, &dp);
                let dx = linalg::svd_backward(factors, ctx, &du, &dv, *variant)?;
                self.accumulate(grads, *x, dx.to_tensor());
            }
        }
        Ok(())
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::arg("conv2d stride must be positive"));
    }
    let [n, c_in, h, wd] = x.dims4()?;
    let [c_out, wc, kh, kw] = w.dims4()?;
    if wc != c_in {
        return Err(Error::shape("conv2d (input vs weight)", x.shape(), w.shape()));
    }
    if kh != kw {
        return Err(Error::arg(format!("conv2d needs square kernels, got {kh}x{kw}")));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape("conv2d (kernel larger than padded input)", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d bias", w.shape(), b.shape()));
        }
    }
    let g = ConvGeom {
        c_in,
        h,
        w: wd,
        k: kh,
        stride,
        pad,
        oh: conv_out_dim(h, kh, stride, pad),
        ow: conv_out_dim(wd, kw, stride, pad),
    };
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; n * c_out * cols_n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols_n]
    };
    let img_len = c_in * h * wd;
    for s in 0..n {
        let img = &x.data()[s * img_len..(s + 1) * img_len];
        let o = &mut out[s * c_out * cols_n..(s + 1) * c_out * cols_n];
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                o[co * cols_n..(co + 1) * cols_n].fill(*bv);
            }
        }
        let colm: &[f64] = if g.is_pointwise() {
            img
        } else {
            tensor::im2col(img, &g, &mut cols);
            &cols
        };
        tensor::gemm_nn(w.data(), colm, o, c_out, rows, cols_n);
    }
    Tensor::new(&[n, c_out, g.oh, g.ow], out)
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<ConvGrads> {
    let [n, c_in, h, wd] = x.dims4()?;
    let [c_out, _, k, _] = w.dims4()?;
    let [_, _, oh, ow] = gout.dims4()?;
    let g = ConvGeom {
        c_in,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let img_len = c_in * h * wd;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut db = need_w.then(|| vec![0.0; c_out]);
    let mut cols = vec![0.0; rows * cols_n];
    let mut dcols = vec![0.0; rows * cols_n];
    for s in 0..n {
        let go = &gout.data()[s * c_out * cols_n..(s + 1) * c_out * cols_n];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let img = &x.data()[s * img_len..(s + 1) * img_len];
            let colm: &[f64] = if g.is_pointwise() {
                img
            } else {
                tensor::im2col(img, &g, &mut cols);
                &cols
            };
            tensor::gemm_nt(go, colm, dw, c_out, cols_n, rows);
            for (co, d) in db.iter_mut().enumerate() {
                *d += go[co * cols_n..(co + 1) * cols_n].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[s * img_len..(s + 1) * img_len];
            if g.is_pointwise() {
                tensor::gemm_tn(w.data(), go, dimg, rows, c_out, cols_n);
            } else {
                dcols.fill(0.0);
                tensor::gemm_tn(w.data(), go, &mut dcols, rows, c_out, cols_n);
                tensor::col2im_acc(&dcols, &g, dimg);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[c_out], d)).transpose()?,
    ))
}

pub fn channel_project_forward(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [pc, r] = p.dims2()?;
    if pc != c {
        return Err(Error::shape("channel_project", x.shape(), p.shape()));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * r * hw];
    for s in 0..n {
        // out_s [r×hw] = Pᵀ [r×c] · x_s [c×hw]
        tensor::gemm_tn(
            p.data(),
            &x.data()[s * c * hw..(s + 1) * c * hw],
            &mut out[s * r * hw..(s + 1) * r * hw],
            r,
            c,
            hw,
        );
    }
    Tensor::new(&[n, r, h, w], out)
}

fn channel_project_backward(
    x: &Tensor,
    p: &Tensor,
    gout: &Tensor,
    need_x: bool,
    need_p: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let [n, c, h, w] = x.dims4()?;
    let [_, r] = p.dims2()?;
    let hw = h * w;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dp = need_p.then(|| vec![0.0; c * r]);
    for s in 0..n {
        let go = &gout.data()[s * r * hw..(s + 1) * r * hw];
        if let Some(dx) = dx.as_mut() {
            tensor::gemm_nn(p.data(), go, &mut dx[s * c * hw..(s + 1) * c * hw], c, r, hw);
        }
        if let Some(dp) = dp.as_mut() {
            tensor::gemm_nt(&x.data()[s * c * hw..(s + 1) * c * hw], go, dp, c, hw, r);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dp.map(|d| Tensor::new(p.shape(), d)).transpose()?,
    ))
}

pub fn fold_in_forward(w: &Tensor, p: &Tensor) -> Result<Tensor> {
    let [o, c, kh, kw] = w.dims4()?;
    let [pc, r] = p.dims2()?;
    if pc != c {
        return Err(Error::shape("fold_in", w.shape(), p.shape()));
    }
    let kk = kh * kw;
    let mut out = vec![0.0; o * r * kk];
    for oi in 0..o {
        // out_o [r×kk] = Pᵀ · w_o [c×kk]
        tensor::gemm_tn(
            p.data(),
            &w.data()[oi * c * kk..(oi + 1) * c * kk],
            &mut out[oi * r * kk..(oi + 1) * r * kk],
            r,
            c,
            kk,
        );
    }
    Tensor::new(&[o, r, kh, kw], out)
}

fn fold_in_backward(w: &Tensor, p: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let [o, c, kh, kw] = w.dims4()?;
    let [_, r] = p.dims2()?;
    let kk = kh * kw;
    let mut dw = vec![0.0; w.len()];
    let mut dp = vec![0.0; c * r];
    for oi in 0..o {
        let go = &gout.data()[oi * r * kk..(oi + 1) * r * kk];
        tensor::gemm_nn(p.data(), go, &mut dw[oi * c * kk..(oi + 1) * c * kk], c, r, kk);
        tensor::gemm_nt(&w.data()[oi * c * kk..(oi + 1) * c * kk], go, &mut dp, c, kk, r);
    }
    Ok((Tensor::new(w.shape(), dw)?, Tensor::new(p.shape(), dp)?))
}
