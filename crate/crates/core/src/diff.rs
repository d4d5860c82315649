//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! walks the record in reverse and accumulates exact gradients. All
//! arithmetic is `f64` — gradient checks at 1e-4 relative tolerance are
//! not reliable in `f32`.
//!
//! The op set is exactly what the style-projection pipeline composes:
//! elementwise arithmetic, a fused conv2d, per-channel reductions over
//! feature maps, row softmax / log-sum-exp, and a guarded cosine-similarity
//! matrix. Gradients accumulate additively, so a value feeding several
//! consumers receives the sum of their contributions.

use crate::EPS;
use thiserror::Error;

/// Dense row-major tensor. Scalars are shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not cover {} values",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds { op: &'static str, index: usize, extent: usize },
    #[error("backward: output has {numel} elements; a scalar (or an explicit cotangent) is required")]
    NonScalarOutput { numel: usize },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
}

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Tanh(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ChannelMean(Var),
    BcastSpatial(Var),
    ChannelRoughness(Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogsumexpRows(Var),
    CosineMatrix(Var, Var),
    TakeDiag(Var),
    AddRowvec(Var, Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Records a computation; replayable in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

/// Output-index range `[lo, hi)` for which `o·stride + k − pad` lands inside `[0, n)`.
#[inline]
fn conv_span(n: usize, len_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let hi = if n + pad > k { ((n - 1 + pad - k) / stride + 1).min(len_out) } else { 0 };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvDims {
    m: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

/// Accumulate conv2d input cotangents: `gx += g` convolved with the flipped kernel.
fn conv2d_grad_x(g: &[f64], vw: &[f64], gx: &mut [f64], d: ConvDims) {
    for im in 0..d.m {
        for oc in 0..d.co {
            let gp = &g[(im * d.co + oc) * d.ho * d.wo..(im * d.co + oc + 1) * d.ho * d.wo];
            for icc in 0..d.ci {
                let wk = &vw[(oc * d.ci + icc) * d.kh * d.kw..(oc * d.ci + icc + 1) * d.kh * d.kw];
                let gxp =
                    &mut gx[(im * d.ci + icc) * d.h * d.w..(im * d.ci + icc + 1) * d.h * d.w];
                for ikh in 0..d.kh {
                    let (oh_lo, oh_hi) = conv_span(d.h, d.ho, d.stride, ikh, d.pad);
                    for ikw in 0..d.kw {
                        let wv = wk[ikh * d.kw + ikw];
                        let (ow_lo, ow_hi) = conv_span(d.w, d.wo, d.stride, ikw, d.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + ikh - d.pad;
                            let grow = &gp[oh * d.wo + ow_lo..oh * d.wo + ow_hi];
                            let xrow = &mut gxp[ih * d.w..(ih + 1) * d.w];
                            if d.stride == 1 {
                                let base = ow_lo + ikw - d.pad;
                                for (xv, &gy) in xrow[base..base + len].iter_mut().zip(grow) {
                                    *xv += gy * wv;
                                }
                            } else {
                                let base = ow_lo * d.stride + ikw - d.pad;
                                let xs = xrow[base..].iter_mut().step_by(d.stride);
                                for (xv, &gy) in xs.zip(grow) {
                                    *xv += gy * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate conv2d kernel cotangents: per kernel tap, a dot of the output
/// cotangent rows against the strided input rows.
fn conv2d_grad_w(g: &[f64], vx: &[f64], gw: &mut [f64], d: ConvDims) {
    for im in 0..d.m {
        for oc in 0..d.co {
            let gp = &g[(im * d.co + oc) * d.ho * d.wo..(im * d.co + oc + 1) * d.ho * d.wo];
            for icc in 0..d.ci {
                let xp = &vx[(im * d.ci + icc) * d.h * d.w..(im * d.ci + icc + 1) * d.h * d.w];
                let gwp =
                    &mut gw[(oc * d.ci + icc) * d.kh * d.kw..(oc * d.ci + icc + 1) * d.kh * d.kw];
                for ikh in 0..d.kh {
                    let (oh_lo, oh_hi) = conv_span(d.h, d.ho, d.stride, ikh, d.pad);
                    for ikw in 0..d.kw {
                        let (ow_lo, ow_hi) = conv_span(d.w, d.wo, d.stride, ikw, d.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + ikh - d.pad;
                            let grow = &gp[oh * d.wo + ow_lo..oh * d.wo + ow_hi];
                            let xrow = &xp[ih * d.w..(ih + 1) * d.w];
                            if d.stride == 1 {
                                let base = ow_lo + ikw - d.pad;
                                acc += dot4(grow, &xrow[base..base + len]);
                            } else {
                                let base = ow_lo * d.stride + ikw - d.pad;
                                let xs = xrow[base..].iter().step_by(d.stride);
                                for (&gy, &xv) in grow.iter().zip(xs) {
                                    acc += gy * xv;
                                }
                            }
                        }
                        gwp[ikh * d.kw + ikw] += acc;
                    }
                }
            }
        }
    }
}

/// Dot product over equal-length slices with four independent accumulators.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let ac = a.chunks_exact(4);
    let bc = b.chunks_exact(4);
    let ar = ac.remainder();
    let br = bc.remainder();
    let (mut c0, mut c1, mut c2, mut c3) = (0.0, 0.0, 0.0, 0.0);
    for (aq, bq) in ac.zip(bc) {
        c0 += aq[0] * bq[0];
        c1 += aq[1] * bq[1];
        c2 += aq[2] * bq[2];
        c3 += aq[3] * bq[3];
    }
    let mut acc = (c0 + c1) + (c2 + c3);
    for (&u, &v) in ar.iter().zip(br) {
        acc += u * v;
    }
    acc
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].value.clone() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients accumulate for every leaf; callers read
    /// back only the ones they intend to update.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(Op::Div(a, b), self.nodes[a.0].shape.clone(), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), self.nodes[a.0].shape.clone(), v)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + k).collect();
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), v)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(op, self.nodes[a.0].shape.clone(), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs(a), a, f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                let out = &mut v[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * row[j];
                }
            }
        }
        Ok(self.push(Op::Matmul(a, b), vec![m, n], v))
    }

    /// Fused 2-D convolution with bias: `x [M,Ci,H,W]`, `w [Co,Ci,kh,kw]`,
    /// `b [Co]`, zero padding. Output `[M,Co,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if sb != [sw[0]] {
            return Err(shape_err("conv2d", format!("bias {sb:?} for {} filters", sw[0])));
        }
        let (m, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{wd}+{pad}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        let mut v = vec![0.0; m * co * ho * wo];
        for im in 0..m {
            for oc in 0..co {
                let out = &mut v[(im * co + oc) * ho * wo..(im * co + oc + 1) * ho * wo];
                out.fill(vb[oc]);
                for icc in 0..ci {
                    let xp = &vx[(im * ci + icc) * h * wd..(im * ci + icc + 1) * h * wd];
                    let wk = &vw[(oc * ci + icc) * kh * kw..(oc * ci + icc + 1) * kh * kw];
                    for ikh in 0..kh {
                        let (oh_lo, oh_hi) = conv_span(h, ho, stride, ikh, pad);
                        for ikw in 0..kw {
                            let wv = wk[ikh * kw + ikw];
                            let (ow_lo, ow_hi) = conv_span(wd, wo, stride, ikw, pad);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ikh - pad;
                                let xrow = &xp[ih * wd..(ih + 1) * wd];
                                let orow = &mut out[oh * wo + ow_lo..oh * wo + ow_hi];
                                if stride == 1 {
                                    let base = ow_lo + ikw - pad;
                                    for (o, &xv) in orow.iter_mut().zip(&xrow[base..base + len]) {
                                        *o += xv * wv;
                                    }
                                } else {
                                    let base = ow_lo * stride + ikw - pad;
                                    let xs = xrow[base..].iter().step_by(stride);
                                    for (o, &xv) in orow.iter_mut().zip(xs) {
                                        *o += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, vec![m, co, ho, wo], v))
    }

    /// Per-channel spatial mean: `[M,C,H,W] → [M,C]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 {
            return Err(shape_err("channel_mean", format!("{s:?}, want rank 4")));
        }
        let (m, c, hw) = (s[0], s[1], s[2] * s[3]);
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * c];
        for i in 0..m * c {
            v[i] = va[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        Ok(self.push(Op::ChannelMean(a), vec![m, c], v))
    }

    /// Broadcast `[M,C]` spatially to `[M,C,h,w]`.
    pub fn bcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(shape_err("bcast_spatial", format!("{s:?}, want rank 2")));
        }
        let (m, c) = (s[0], s[1]);
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * c * h * w];
        for i in 0..m * c {
            v[i * h * w..(i + 1) * h * w].fill(va[i]);
        }
        Ok(self.push(Op::BcastSpatial(a), vec![m, c, h, w], v))
    }

    /// Per-channel texture roughness: mean |horizontal difference| plus
    /// mean |vertical difference|. `[M,C,H,W] → [M,C]`.
    pub fn channel_roughness(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("channel_roughness", format!("{s:?}, want rank 4 with H,W ≥ 2")));
        }
        let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * c];
        for i in 0..m * c {
            let plane = &va[i * h * w..(i + 1) * h * w];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for r in 0..h {
                for q in 0..w - 1 {
                    gx += (plane[r * w + q + 1] - plane[r * w + q]).abs();
                }
            }
            for r in 0..h - 1 {
                for q in 0..w {
                    gy += (plane[(r + 1) * w + q] - plane[r * w + q]).abs();
                }
            }
            v[i] = gx / (h * (w - 1)) as f64 + gy / ((h - 1) * w) as f64;
        }
        Ok(self.push(Op::ChannelRoughness(a), vec![m, c], v))
    }

    /// Select rows of a `[N,C]` matrix: output `[idx.len(), C]`. Gradients
    /// scatter-add into the selected rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("{s:?}, want rank 2")));
        }
        let (n, c) = (s[0], s[1]);
        for &i in idx {
            if i >= n {
                return Err(DiffError::IndexOutOfBounds { op: "gather_rows", index: i, extent: n });
            }
        }
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; idx.len() * c];
        for (row, &i) in idx.iter().enumerate() {
            v[row * c..(row + 1) * c].copy_from_slice(&va[i * c..(i + 1) * c]);
        }
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), vec![idx.len(), c], v))
    }

    /// Pick one column per row of a `[M,K]` matrix: output `[M]`.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err("select_cols", format!("{s:?} with {} indices", idx.len())));
        }
        let k = s[1];
        for &j in idx {
            if j >= k {
                return Err(DiffError::IndexOutOfBounds { op: "select_cols", index: j, extent: k });
            }
        }
        let va = &self.nodes[a.0].value;
        let v: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| va[i * k + j]).collect();
        Ok(self.push(Op::SelectCols(a, idx.to_vec()), vec![idx.len()], v))
    }

    /// Concatenate rank-2 values along columns: `[M,C1] ++ [M,C2] ++ …`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let m = self.nodes[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != m {
                return Err(shape_err("concat_cols", format!("{s:?}, want [{m}, _]")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut v = vec![0.0; m * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let vp = &self.nodes[p.0].value;
            for r in 0..m {
                v[r * total + off..r * total + off + w].copy_from_slice(&vp[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} → {:?}", self.nodes[a.0].shape, shape),
            ));
        }
        let v = self.nodes[a.0].value.clone();
        Ok(self.push(Op::Reshape(a), shape.to_vec(), v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Mean(a), vec![1], vec![s / n as f64])
    }

    /// Numerically stable row-wise softmax of a `[M,N]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", format!("{s:?}, want rank 2")));
        }
        let (m, n) = (s[0], s[1]);
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * n];
        for r in 0..m {
            let row = &va[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                v[r * n + j] = e;
                z += e;
            }
            for j in 0..n {
                v[r * n + j] /= z;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), vec![m, n], v))
    }

    /// Row-wise log-sum-exp of a `[M,N]` matrix → `[M]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(shape_err("logsumexp_rows", format!("{s:?}, want rank 2")));
        }
        let (m, n) = (s[0], s[1]);
        let va = &self.nodes[a.0].value;
        let mut v = vec![0.0; m];
        for r in 0..m {
            let row = &va[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            v[r] = mx + z.ln();
        }
        Ok(self.push(Op::LogsumexpRows(a), vec![m], v))
    }

    /// All-pairs guarded cosine similarity between the rows of `a [M,D]`
    /// and the rows of `b [N,D]` → `[M,N]`. Each norm in the denominator
    /// is floored at ε, so zero rows yield 0, and any row with norm ≥ ε
    /// has exact self-similarity 1.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("cosine_matrix", format!("{sa:?} vs {sb:?}")));
        }
        let (m, d, n) = (sa[0], sa[1], sb[0]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let na: Vec<f64> = (0..m)
            .map(|i| va[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS))
            .collect();
        let nb: Vec<f64> = (0..n)
            .map(|j| vb[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS))
            .collect();
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let dot: f64 = va[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vb[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
                v[i * n + j] = dot / (na[i] * nb[j]);
            }
        }
        Ok(self.push(Op::CosineMatrix(a, b), vec![m, n], v))
    }

    /// Diagonal of a square matrix: `[N,N] → [N]`.
    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("take_diag", format!("{s:?}, want square")));
        }
        let n = s[0];
        let va = &self.nodes[a.0].value;
        let v: Vec<f64> = (0..n).map(|i| va[i * n + i]).collect();
        Ok(self.push(Op::TakeDiag(a), vec![n], v))
    }

    /// Add a `[K]` vector to every row of a `[M,K]` matrix.
    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (&self.nodes[a.0].shape, &self.nodes[v.0].shape);
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(shape_err("add_rowvec", format!("{sa:?} + {sv:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (va, vv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let mut out = vec![0.0; m * k];
        for r in 0..m {
            for j in 0..k {
                out[r * k + j] = va[r * k + j] + vv[j];
            }
        }
        Ok(self.push(Op::AddRowvec(a, v), vec![m, k], out))
    }

    /// Reverse pass from a scalar output: seeds its cotangent with 1 and
    /// returns per-node gradients (indexed like the tape).
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let numel = self.nodes[output.0].value.len();
        if numel != 1 {
            return Err(DiffError::NonScalarOutput { numel });
        }
        self.backward_with(output, &[1.0])
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&mut self, output: Var, cotangent: &[f64]) -> Result<Gradients> {
        if cotangent.len() != self.nodes[output.0].value.len() {
            return Err(shape_err(
                "backward",
                format!(
                    "cotangent has {} values, output has {}",
                    cotangent.len(),
                    self.nodes[output.0].value.len()
                ),
            ));
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[output.0].copy_from_slice(cotangent);

        for id in (0..=output.0).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&x| x == 0.0) {
                grads[id] = g;
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients { per_node: grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in grads[b.0].iter_mut().zip(g) {
                    *gb += gi;
                }
            }
            Op::Sub(a, b) => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in grads[b.0].iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * vb[i];
                }
                for i in 0..g.len() {
                    grads[b.0][i] += g[i] * va[i];
                }
            }
            Op::Div(a, b) => {
                let vb = &self.nodes[b.0].value;
                let vy = &self.nodes[id].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] / vb[i];
                }
                for i in 0..g.len() {
                    grads[b.0][i] -= g[i] * vy[i] / vb[i];
                }
            }
            Op::Scale(a, k) => {
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * k;
                }
            }
            Op::AddScalar(a) => {
                for i in 0..g.len() {
                    grads[a.0][i] += g[i];
                }
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                // subgradient 0 at exactly 0
                for i in 0..g.len() {
                    grads[a.0][i] += g[i]
                        * if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                }
            }
            Op::Sqrt(a) => {
                let vy = &self.nodes[id].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * 0.5 / vy[i];
                }
            }
            Op::Exp(a) => {
                let vy = &self.nodes[id].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * vy[i];
                }
            }
            Op::Ln(a) => {
                let va = &self.nodes[a.0].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] / va[i];
                }
            }
            Op::Softplus(a) => {
                let va = &self.nodes[a.0].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * sigmoid(va[i]);
                }
            }
            Op::Tanh(a) => {
                let vy = &self.nodes[id].value;
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * (1.0 - vy[i] * vy[i]);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // dA = G · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * vb[p * n + j];
                        }
                        grads[a.0][i * k + p] += acc;
                    }
                }
                // dB = Aᵀ · G
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += va[i * k + p] * g[i * n + j];
                        }
                        grads[b.0][p * n + j] += acc;
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = &self.nodes[x.0].shape;
                let sw = &self.nodes[w.0].shape;
                let (m, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let sy = &self.nodes[id].shape;
                let (ho, wo) = (sy[2], sy[3]);
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let d = ConvDims {
                    m,
                    ci,
                    co,
                    h,
                    w: wd,
                    ho,
                    wo,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                };
                {
                    let gb = &mut grads[b.0];
                    for im in 0..m {
                        for oc in 0..co {
                            let gp = &g[(im * co + oc) * ho * wo..(im * co + oc + 1) * ho * wo];
                            gb[oc] += gp.iter().sum::<f64>();
                        }
                    }
                }
                let mut gx = std::mem::take(&mut grads[x.0]);
                conv2d_grad_x(g, vw, &mut gx, d);
                if w.0 == x.0 {
                    conv2d_grad_w(g, vx, &mut gx, d);
                    grads[x.0] = gx;
                } else {
                    let mut gw = std::mem::take(&mut grads[w.0]);
                    conv2d_grad_w(g, vx, &mut gw, d);
                    grads[x.0] = gx;
                    grads[w.0] = gw;
                }
            }
            Op::ChannelMean(a) => {
                let s = &self.nodes[a.0].shape;
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                for i in 0..g.len() {
                    let gi = g[i] * inv;
                    for p in &mut grads[a.0][i * hw..(i + 1) * hw] {
                        *p += gi;
                    }
                }
            }
            Op::BcastSpatial(a) => {
                let hw = {
                    let s = &self.nodes[id].shape;
                    s[2] * s[3]
                };
                for i in 0..grads[a.0].len() {
                    grads[a.0][i] += g[i * hw..(i + 1) * hw].iter().sum::<f64>();
                }
            }
            Op::ChannelRoughness(a) => {
                let s = &self.nodes[a.0].shape;
                let (h, w) = (s[2], s[3]);
                let va = &self.nodes[a.0].value;
                let ix = 1.0 / (h * (w - 1)) as f64;
                let iy = 1.0 / ((h - 1) * w) as f64;
                for i in 0..g.len() {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let base = i * h * w;
                    let plane = &va[base..base + h * w];
                    let gp = &mut grads[a.0][base..base + h * w];
                    for r in 0..h {
                        for q in 0..w - 1 {
                            let d = plane[r * w + q + 1] - plane[r * w + q];
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gp[r * w + q + 1] += gi * ix * s;
                            gp[r * w + q] -= gi * ix * s;
                        }
                    }
                    for r in 0..h - 1 {
                        for q in 0..w {
                            let d = plane[(r + 1) * w + q] - plane[r * w + q];
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gp[(r + 1) * w + q] += gi * iy * s;
                            gp[r * w + q] -= gi * iy * s;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = self.nodes[a.0].shape[1];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        grads[a.0][i * c + j] += g[row * c + j];
                    }
                }
            }
            Op::SelectCols(a, idx) => {
                let k = self.nodes[a.0].shape[1];
                for (i, &j) in idx.iter().enumerate() {
                    grads[a.0][i * k + j] += g[i];
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    for r in 0..m {
                        for j in 0..w {
                            grads[p.0][r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(a) => {
                for i in 0..g.len() {
                    grads[a.0][i] += g[i];
                }
            }
            Op::Sum(a) => {
                for p in &mut grads[a.0] {
                    *p += g[0];
                }
            }
            Op::Mean(a) => {
                let inv = 1.0 / self.nodes[a.0].value.len() as f64;
                for p in &mut grads[a.0] {
                    *p += g[0] * inv;
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = {
                    let s = &self.nodes[id].shape;
                    (s[0], s[1])
                };
                let vy = &self.nodes[id].value;
                for r in 0..m {
                    let y = &vy[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        grads[a.0][r * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogsumexpRows(a) => {
                let (m, n) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let va = &self.nodes[a.0].value;
                let vy = &self.nodes[id].value;
                for r in 0..m {
                    for j in 0..n {
                        grads[a.0][r * n + j] += g[r] * (va[r * n + j] - vy[r]).exp();
                    }
                }
            }
            Op::CosineMatrix(a, b) => {
                let (m, d) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].shape[0];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let vy = &self.nodes[id].value;
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let na_raw: Vec<f64> = (0..m).map(|i| norm(&va[i * d..(i + 1) * d])).collect();
                let nb_raw: Vec<f64> = (0..n).map(|j| norm(&vb[j * d..(j + 1) * d])).collect();
                for i in 0..m {
                    let alpha = na_raw[i].max(EPS);
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let beta = nb_raw[j].max(EPS);
                        let c = vy[i * n + j];
                        for t in 0..d {
                            // d c / d a_t = b_t/(αβ) − c·(dα/da_t)/α, and
                            // dα/da_t = a_t/α only while the norm clears
                            // the ε floor (the floor is locally constant)
                            let mut da = vb[j * d + t] / (alpha * beta);
                            if na_raw[i] > EPS {
                                da -= c * va[i * d + t] / (alpha * alpha);
                            }
                            grads[a.0][i * d + t] += gij * da;
                            let mut db = va[i * d + t] / (alpha * beta);
                            if nb_raw[j] > EPS {
                                db -= c * vb[j * d + t] / (beta * beta);
                            }
                            grads[b.0][j * d + t] += gij * db;
                        }
                    }
                }
            }
            Op::TakeDiag(a) => {
                let n = self.nodes[a.0].shape[0];
                for i in 0..n {
                    grads[a.0][i * n + i] += g[i];
                }
            }
            Op::AddRowvec(a, v) => {
                let (m, k) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                for i in 0..g.len() {
                    grads[a.0][i] += g[i];
                }
                for r in 0..m {
                    for j in 0..k {
                        grads[v.0][j] += g[r * k + j];
                    }
                }
            }
        }
    }
}

/// Per-node gradient buffers produced by a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.per_node[v.0]
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

/// Central finite-difference gradient check.
///
/// `build` must construct the same scalar-valued graph every time it is
/// called; the analytic gradients of `inputs` are compared elementwise
/// against `(f(x+h) − f(x−h)) / 2h` at step `h`, with relative error
/// measured as `|analytic − fd| / max(1, |fd|)`.
pub fn finite_diff_check<F>(
    build: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> std::result::Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t)).collect();
        let out = build(&mut tape, &vars).map_err(|e| e.to_string())?;
        if tape.value(out).len() != 1 {
            return Err("finite_diff_check requires a scalar output".into());
        }
        Ok(tape.value(out)[0])
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = build(&mut tape, &vars).map_err(|e| e.to_string())?;
    let grads = tape.backward(out).map_err(|e| e.to_string())?;

    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let rel = (analytic[ei] - fd).abs() / fd.abs().max(1.0);
            if rel > tol {
                return Err(format!(
                    "input {ti} element {ei}: analytic {:.9e} vs finite-difference {:.9e} (rel {rel:.3e} > {tol:.1e})",
                    analytic[ei], fd
                ));
            }
        }
    }
    Ok(())
}
