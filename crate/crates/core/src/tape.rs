//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A `Tape` records every executed operation together with its inputs and
//! saved intermediates; `backward` replays the adjoints in reverse order,
//! visiting each node exactly once and accumulating gradients additively.
//! One tape serves one forward/backward pass and is confined to a single
//! thread; ops themselves are pure with respect to their inputs.

use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Broadcast layout of a perturbation field relative to an `[B,C,H,W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldLayout {
    /// One value per (sample, channel): length `B*C`.
    PerChannel,
    /// One value per element: length `B*C*H*W`.
    PerActivation,
    /// One value per (sample, position), shared across channels: length `B*H*W`.
    PerPosition,
}

/// Constant coefficient field for [`Tape::mean_perturb`]:
/// `y = scale ⊙ x + coeff ⊙ mean_hw(x)` with per-(sample, channel) spatial
/// means broadcast back over H×W. Both fields are treated as constants by
/// differentiation.
#[derive(Debug, Clone)]
pub struct PerturbField<E: Element> {
    pub layout: FieldLayout,
    pub scale: Vec<E>,
    pub coeff: Vec<E>,
}

impl<E: Element> PerturbField<E> {
    fn expected_len(layout: FieldLayout, b: usize, c: usize, h: usize, w: usize) -> usize {
        match layout {
            FieldLayout::PerChannel => b * c,
            FieldLayout::PerActivation => b * c * h * w,
            FieldLayout::PerPosition => b * h * w,
        }
    }

    fn validate(&self, b: usize, c: usize, h: usize, w: usize) -> Result<()> {
        let want = Self::expected_len(self.layout, b, c, h, w);
        if self.scale.len() != want || self.coeff.len() != want {
            return Err(CoreError::ShapeMismatch(format!(
                "perturbation field for {:?} on [{b},{c},{h},{w}] needs {want} values, \
                 got scale {} / coeff {}",
                self.layout,
                self.scale.len(),
                self.coeff.len()
            )));
        }
        Ok(())
    }

    /// Flat field index for element (b, c, h*w position).
    #[inline]
    fn index(&self, b: usize, c: usize, hw: usize, channels: usize, plane: usize) -> usize {
        match self.layout {
            FieldLayout::PerChannel => b * channels + c,
            FieldLayout::PerActivation => (b * channels + c) * plane + hw,
            FieldLayout::PerPosition => b * plane + hw,
        }
    }
}

enum Op<E: Element> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: E,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<E>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    MeanPerturb {
        x: Var,
        field: PerturbField<E>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// `out += a(m×k) · b(k×n)`, row-major.
fn matmul_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input tensor. Leaves with `requires_grad` collect gradients
    /// during `backward`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<E>> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches value shape")
        })
    }

    /// Error if any node value or gradient holds a NaN/Inf.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            node.value.check_finite(&format!("{context}: node {i} value"))?;
            if let Some(g) = &node.grad {
                for &v in g {
                    if !v.is_finite() {
                        return Err(CoreError::NonFinite(format!(
                            "{context}: node {i} gradient holds {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "{what} expects a 4-d [B,C,H,W] tensor, got {s:?}"
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ── elementwise and reduction ops ───────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: E) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * k);
        let req = self.requires(x);
        self.push(value, req, Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(acc), req, Op::Sum { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max_of(E::zero()));
        let req = self.requires(x);
        self.push(value, req, Op::Relu { x })
    }

    // ── network primitives ──────────────────────────────────────────

    /// 2-d cross-correlation of `x[B,C,H,W]` with `w[K,C,kh,kw]` plus bias
    /// `b[K]`; output `[B,K,H',W']` with `H' = (H + 2·pad − kh)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, wd) = self.dims4(x, "conv2d input")?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != c_in {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d kernel {ws:?} does not match input channels {c_in}"
            )));
        }
        let (k_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.shape(b) != [k_out] {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d bias {:?} does not match {k_out} output channels",
                self.shape(b)
            )));
        }
        if stride < 1 {
            return Err(CoreError::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;

        let rows = batch * h_out * w_out;
        let patch = c_in * kh * kw;
        let mut cols = vec![E::zero(); rows * patch];
        {
            let xd = self.data(x);
            for bi in 0..batch {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let row = ((bi * h_out + oy) * w_out + ox) * patch;
                        for ci in 0..c_in {
                            let x_plane = (bi * c_in + ci) * h * wd;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = x_plane + iy as usize * wd;
                                let col = row + (ci * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    cols[col + kx] = xd[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }

        // out_mat[rows × k_out] = cols · wᵀ
        let mut w_t = vec![E::zero(); patch * k_out];
        {
            let wd_ = self.data(w);
            for ko in 0..k_out {
                for q in 0..patch {
                    w_t[q * k_out + ko] = wd_[ko * patch + q];
                }
            }
        }
        let mut out_mat = vec![E::zero(); rows * k_out];
        matmul_acc(&cols, &w_t, rows, patch, k_out, &mut out_mat);

        let mut out = vec![E::zero(); batch * k_out * h_out * w_out];
        {
            let bias = self.data(b);
            for bi in 0..batch {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let row = (bi * h_out + oy) * w_out + ox;
                        for ko in 0..k_out {
                            out[((bi * k_out + ko) * h_out + oy) * w_out + ox] =
                                out_mat[row * k_out + ko] + bias[ko];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, k_out, h_out, w_out], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            value,
            req,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// 2×2 max pooling with stride 2; spatial extents must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, h, w) = self.dims4(x, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![E::zero(); batch * channels * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..batch * channels {
            let plane = bc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    // first maximum wins on ties
                    let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (bc * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, ho, wo], out)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::MaxPool2 { x, argmax }))
    }

    /// Spatial mean per (sample, channel): `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, h, w) = self.dims4(x, "global_avg_pool")?;
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let xd = self.data(x);
        let mut out = vec![E::zero(); batch * channels];
        for (bc, o) in out.iter_mut().enumerate() {
            let mut acc = E::zero();
            for &v in &xd[bc * plane..(bc + 1) * plane] {
                acc += v;
            }
            *o = acc * inv;
        }
        let value = Tensor::new(vec![batch, channels], out)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::GlobalAvgPool { x }))
    }

    /// `y[B,K] = x[B,D] · w[K,D]ᵀ + b[K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(CoreError::ShapeMismatch(format!(
                "linear: input {xs:?} vs weight {ws:?}"
            )));
        }
        let (batch, d, k) = (xs[0], xs[1], ws[0]);
        if self.shape(b) != [k] {
            return Err(CoreError::ShapeMismatch(format!(
                "linear bias {:?} does not match {k} outputs",
                self.shape(b)
            )));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![E::zero(); batch * k];
        for bi in 0..batch {
            let x_row = &xd[bi * d..(bi + 1) * d];
            for ko in 0..k {
                let w_row = &wd[ko * d..(ko + 1) * d];
                let mut acc = bd[ko];
                for (&xv, &wv) in x_row.iter().zip(w_row) {
                    acc += xv * wv;
                }
                out[bi * k + ko] = acc;
            }
        }
        let value = Tensor::new(vec![batch, k], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, req, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, stabilized by
    /// max subtraction. Labels must lie in `[0, K)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "softmax_cross_entropy expects [B,K] logits, got {s:?}"
            )));
        }
        let (batch, k) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(CoreError::ShapeMismatch(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![E::zero(); batch * k];
        let mut loss = E::zero();
        for bi in 0..batch {
            let row = &ld[bi * k..(bi + 1) * k];
            let mut m = row[0];
            for &v in row {
                m = m.max_of(v);
            }
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[bi * k + j] = e;
                denom += e;
            }
            for p in &mut probs[bi * k..(bi + 1) * k] {
                *p /= denom;
            }
            // loss_i = logsumexp(row) − row[label]
            loss += m + denom.ln() - row[labels[bi]];
        }
        loss *= E::from_f64(1.0 / batch as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `y = scale ⊙ x + coeff ⊙ μ` where `μ[b,c]` is the spatial mean of
    /// `x[b,c,:,:]` broadcast over H×W. The fields are constants; the
    /// gradient flows through both `x` and `μ`:
    /// `dL/dx = scale ⊙ g + mean_hw(coeff ⊙ g)` per (sample, channel).
    pub fn mean_perturb(&mut self, x: Var, field: PerturbField<E>) -> Result<Var> {
        let (batch, channels, h, w) = self.dims4(x, "mean_perturb")?;
        field.validate(batch, channels, h, w)?;
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let xd = self.data(x);
        let mut out = vec![E::zero(); xd.len()];
        for bi in 0..batch {
            for ci in 0..channels {
                let base = (bi * channels + ci) * plane;
                let mut mu = E::zero();
                for &v in &xd[base..base + plane] {
                    mu += v;
                }
                mu *= inv;
                for hw in 0..plane {
                    let fi = field.index(bi, ci, hw, channels, plane);
                    out[base + hw] = field.scale[fi] * xd[base + hw] + field.coeff[fi] * mu;
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, h, w], out)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::MeanPerturb { x, field }))
    }

    // ── backward ────────────────────────────────────────────────────

    fn acc_grad(&mut self, v: Var, delta: &[E]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![E::zero(); node.value.numel()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Existing gradients are cleared first; within the pass,
    /// accumulation is additive and each node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(CoreError::InvalidArgument(
                "loss var does not belong to this tape".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.dispatch_adjoint(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn dispatch_adjoint(&mut self, i: usize, g: &[E]) -> Result<()> {
        // Ops only read upstream nodes, so borrowing values while
        // accumulating into (strictly earlier) input grads is done through
        // short-lived scopes below.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.acc_grad(a, g);
                }
                if self.requires(b) {
                    self.acc_grad(b, g);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<E> = g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.acc_grad(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<E> = g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                    self.acc_grad(b, &db);
                }
            }
            Op::Scale { x, k } => {
                let (x, k) = (*x, *k);
                if self.requires(x) {
                    let dx: Vec<E> = g.iter().map(|&gv| gv * k).collect();
                    self.acc_grad(x, &dx);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.requires(x) {
                    let dx = vec![g[0]; self.nodes[x.0].value.numel()];
                    self.acc_grad(x, &dx);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.requires(x) {
                    let dx: Vec<E> = self
                        .data(x)
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > E::zero() { gv } else { E::zero() })
                        .collect();
                    self.acc_grad(x, &dx);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                ..
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (batch, c_in, h, wd) = self.dims4(x, "conv2d")?;
                let ws = self.shape(w).to_vec();
                let (k_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.nodes[i].value.shape().to_vec();
                let (h_out, w_out) = (os[2], os[3]);
                let rows = batch * h_out * w_out;
                let patch = c_in * kh * kw;

                // gather upstream gradient into [rows × k_out]
                let mut g_mat = vec![E::zero(); rows * k_out];
                for bi in 0..batch {
                    for ko in 0..k_out {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                g_mat[((bi * h_out + oy) * w_out + ox) * k_out + ko] =
                                    g[((bi * k_out + ko) * h_out + oy) * w_out + ox];
                            }
                        }
                    }
                }

                if self.requires(b) {
                    let mut db = vec![E::zero(); k_out];
                    for row in g_mat.chunks_exact(k_out) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc_grad(b, &db);
                }

                if self.requires(w) {
                    // dW[k, q] = Σ_rows G[row, k] · cols[row, q]
                    let mut dw = vec![E::zero(); k_out * patch];
                    {
                        let cols_ref = match &self.nodes[i].op {
                            Op::Conv2d { cols, .. } => cols,
                            _ => unreachable!(),
                        };
                        for (row_g, row_c) in
                            g_mat.chunks_exact(k_out).zip(cols_ref.chunks_exact(patch))
                        {
                            for (ko, &gv) in row_g.iter().enumerate() {
                                let d_row = &mut dw[ko * patch..(ko + 1) * patch];
                                for (d, &cv) in d_row.iter_mut().zip(row_c) {
                                    *d += gv * cv;
                                }
                            }
                        }
                    }
                    self.acc_grad(w, &dw);
                }

                if self.requires(x) {
                    // dCols[rows × patch] = G · W[k_out × patch], then col2im.
                    let mut d_cols = vec![E::zero(); rows * patch];
                    {
                        let w_data = self.data(w);
                        matmul_acc(&g_mat, w_data, rows, k_out, patch, &mut d_cols);
                    }
                    let mut dx = vec![E::zero(); batch * c_in * h * wd];
                    for bi in 0..batch {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let row = ((bi * h_out + oy) * w_out + ox) * patch;
                                for ci in 0..c_in {
                                    let x_plane = (bi * c_in + ci) * h * wd;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let x_row = x_plane + iy as usize * wd;
                                        let col = row + (ci * kh + ky) * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dx[x_row + ix as usize] += d_cols[col + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
            Op::MaxPool2 { x, .. } => {
                let x = *x;
                if self.requires(x) {
                    let mut dx = vec![E::zero(); self.nodes[x.0].value.numel()];
                    {
                        let argmax = match &self.nodes[i].op {
                            Op::MaxPool2 { argmax, .. } => argmax,
                            _ => unreachable!(),
                        };
                        for (&src, &gv) in argmax.iter().zip(g) {
                            dx[src as usize] += gv;
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if self.requires(x) {
                    let (_, _, h, w) = self.dims4(x, "global_avg_pool")?;
                    let plane = h * w;
                    let inv = E::from_f64(1.0 / plane as f64);
                    let mut dx = vec![E::zero(); self.nodes[x.0].value.numel()];
                    for (bc, &gv) in g.iter().enumerate() {
                        let scaled = gv * inv;
                        for d in &mut dx[bc * plane..(bc + 1) * plane] {
                            *d += scaled;
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.shape(x).to_vec();
                let (batch, d) = (xs[0], xs[1]);
                let k = self.shape(w)[0];
                if self.requires(b) {
                    let mut db = vec![E::zero(); k];
                    for row in g.chunks_exact(k) {
                        for (dv, &gv) in db.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    self.acc_grad(b, &db);
                }
                if self.requires(w) {
                    let mut dw = vec![E::zero(); k * d];
                    {
                        let xd = self.data(x);
                        for bi in 0..batch {
                            let x_row = &xd[bi * d..(bi + 1) * d];
                            for ko in 0..k {
                                let gv = g[bi * k + ko];
                                let d_row = &mut dw[ko * d..(ko + 1) * d];
                                for (dv, &xv) in d_row.iter_mut().zip(x_row) {
                                    *dv += gv * xv;
                                }
                            }
                        }
                    }
                    self.acc_grad(w, &dw);
                }
                if self.requires(x) {
                    let mut dx = vec![E::zero(); batch * d];
                    {
                        let wd = self.data(w);
                        matmul_acc(g, wd, batch, k, d, &mut dx);
                    }
                    self.acc_grad(x, &dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, .. } => {
                let logits = *logits;
                if self.requires(logits) {
                    let (labels, probs) = match &self.nodes[i].op {
                        Op::SoftmaxCrossEntropy { labels, probs, .. } => {
                            (labels.clone(), probs.clone())
                        }
                        _ => unreachable!(),
                    };
                    let batch = labels.len();
                    let k = probs.len() / batch;
                    let scale = g[0] * E::from_f64(1.0 / batch as f64);
                    let mut dl = probs;
                    for (bi, &label) in labels.iter().enumerate() {
                        dl[bi * k + label] -= E::one();
                    }
                    for d in &mut dl {
                        *d *= scale;
                    }
                    self.acc_grad(logits, &dl);
                }
            }
            Op::MeanPerturb { x, .. } => {
                let x = *x;
                if self.requires(x) {
                    let (batch, channels, h, w) = self.dims4(x, "mean_perturb")?;
                    let plane = h * w;
                    let inv = E::from_f64(1.0 / plane as f64);
                    let mut dx = vec![E::zero(); batch * channels * plane];
                    {
                        let field = match &self.nodes[i].op {
                            Op::MeanPerturb { field, .. } => field,
                            _ => unreachable!(),
                        };
                        for bi in 0..batch {
                            for ci in 0..channels {
                                let base = (bi * channels + ci) * plane;
                                let mut acc = E::zero();
                                for hw in 0..plane {
                                    let fi = field.index(bi, ci, hw, channels, plane);
                                    acc += field.coeff[fi] * g[base + hw];
                                }
                                acc *= inv;
                                for hw in 0..plane {
                                    let fi = field.index(bi, ci, hw, channels, plane);
                                    dx[base + hw] = field.scale[fi] * g[base + hw] + acc;
                                }
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]).unwrap(), false);
        let w = tape.leaf(t(&[1, 1, 2, 2], &[0.3, -1.0, 2.0, 0.7]), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_1x1_kernel_is_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
        let b = tape.leaf(t(&[1], &[1.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_window() {
        // Oracle: a 3×3 ones kernel over 1..9 sums every entry.
        let mut tape = Tape::new();
        let x = tape.leaf(
            t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]),
            false,
        );
        let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap(), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[45.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 3, 3]).unwrap(), false);
        let w = tape.leaf(Tensor::zeros(vec![1, 3, 2, 2]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(vec![1]).unwrap(), false);
        assert!(matches!(
            tape.conv2d(x, w, b, 1, 0),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool2_takes_window_max_and_rejects_odd_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let odd = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]).unwrap(), false);
        assert!(matches!(
            tape.maxpool2(odd),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn global_avg_pool_of_constant_channel_is_that_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 3, 4, 4], 2.5).unwrap(), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::full(vec![1, 4], 0.7).unwrap(), false);
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - 4.0f64.ln()).abs() < 1e-12, "loss {got}");
    }

    #[test]
    fn cross_entropy_matches_closed_form_for_confident_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 2], &[10.0, -10.0]), false);
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((got - expected).abs() / expected < 1e-6, "loss {got}");
    }

    #[test]
    fn cross_entropy_mean_reduces_over_batch() {
        let rows = [[0.3, -1.2, 0.8], [2.0, 0.1, -0.4]];
        let labels = [2usize, 0usize];
        let mut per_sample = Vec::new();
        for (row, &label) in rows.iter().zip(&labels) {
            let mut tape = Tape::new();
            let l = tape.leaf(t(&[1, 3], row), false);
            let loss = tape.softmax_cross_entropy(l, &[label]).unwrap();
            per_sample.push(tape.value(loss).scalar_value().unwrap());
        }
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[2, 3], &rows.concat()), false);
        let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        let mean = (per_sample[0] + per_sample[1]) / 2.0;
        assert!((got - mean).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 3]).unwrap(), false);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_slice(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_slice(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_is_linear_over_losses() {
        // grad(a·f + b·g) == a·grad(f) + b·grad(g) on the shared leaf
        let x0 = t(&[3], &[0.5, -1.5, 2.0]);
        let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let loss = build(&mut tape, x);
            tape.backward(loss).unwrap();
            tape.grad_slice(x).unwrap().to_vec()
        };
        let f = |tape: &mut Tape<f64>, x: Var| tape.sum(x);
        let g = |tape: &mut Tape<f64>, x: Var| {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq)
        };
        let (a, b) = (2.5, -0.75);
        let combined = grad_of(&|tape, x| {
            let lf = f(tape, x);
            let lg = g(tape, x);
            let sa = tape.scale(lf, a);
            let sb = tape.scale(lg, b);
            tape.add(sa, sb).unwrap()
        });
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        for i in 0..3 {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_perturb_identity_field_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let field = PerturbField {
            layout: FieldLayout::PerChannel,
            scale: vec![1.0, 1.0],
            coeff: vec![0.0, 0.0],
        };
        let y = tape.mean_perturb(x, field).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 1, 4, 4], &[0.1; 16]), true);
            let w = tape.leaf(t(&[2, 1, 3, 3], &[0.01; 18]), true);
            let b = tape.leaf(t(&[2], &[0.0, 0.1]), true);
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let p = tape.maxpool2(r).unwrap();
            let gap = tape.global_avg_pool(p).unwrap();
            let loss = tape.sum(gap);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value().unwrap().to_bits(),
                tape.grad_slice(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
