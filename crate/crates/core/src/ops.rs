//! Forward and backward kernels for every differentiable operation.
//!
//! The functions here work on plain [`Tensor`]s. [`crate::graph::Graph`]
//! records them on a tape and calls the matching `*_backward` kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Scalar, Tensor};

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidArgument(format!(
            "{op}: expected rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

// ---------------------------------------------------------------------------
// Lowered (im2col) convolution shared by the 2-D and causal 1-D variants.
//
// `cols` is `[k, n * p]` where `k` is the receptive-patch size and `p` the
// number of output positions per sample; weights are `[o, k]`.
// ---------------------------------------------------------------------------

fn lowered_forward<T: Scalar>(cols: &[T], w: &[T], b: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let k = w.len() / o;
    let np = n * p;
    let mut tmp = vec![T::zero(); o * np];
    matmul(MatRef::new(w, o, k), MatRef::new(cols, k, np), T::zero(), &mut tmp);
    let mut out = vec![T::zero(); n * o * p];
    for oc in 0..o {
        let bias = b[oc];
        let row = &tmp[oc * np..(oc + 1) * np];
        for s in 0..n {
            let dst = &mut out[(s * o + oc) * p..(s * o + oc + 1) * p];
            for (d, &v) in dst.iter_mut().zip(&row[s * p..(s + 1) * p]) {
                *d = v + bias;
            }
        }
    }
    out
}

struct LoweredGrads<T> {
    dw: Vec<T>,
    db: Vec<T>,
    dcols: Option<Vec<T>>,
}

fn lowered_backward<T: Scalar>(
    cols: &[T],
    w: &[T],
    dout: &[T],
    o: usize,
    n: usize,
    p: usize,
    need_dcols: bool,
) -> LoweredGrads<T> {
    let k = w.len() / o;
    let np = n * p;
    let mut dy = vec![T::zero(); o * np];
    for s in 0..n {
        for oc in 0..o {
            dy[oc * np + s * p..oc * np + (s + 1) * p]
                .copy_from_slice(&dout[(s * o + oc) * p..(s * o + oc + 1) * p]);
        }
    }
    let mut dw = vec![T::zero(); o * k];
    matmul(MatRef::new(&dy, o, np), MatRef::new(cols, k, np).t(), T::zero(), &mut dw);
    let db = (0..o).map(|oc| dy[oc * np..(oc + 1) * np].iter().fold(T::zero(), |a, &v| a + v)).collect();
    let dcols = need_dcols.then(|| {
        let mut dc = vec![T::zero(); k * np];
        matmul(MatRef::new(w, o, k).t(), MatRef::new(&dy, o, np), T::zero(), &mut dc);
        dc
    });
    LoweredGrads { dw, db, dcols }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Geometry of a zero-padded strided 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        expect_rank("conv2d", input, 4)?;
        expect_rank("conv2d", weight, 4)?;
        let (is, ws) = (input.shape(), weight.shape());
        if is[1] != ws[1] {
            return Err(mismatch("conv2d", is, ws));
        }
        if bias.shape() != [ws[0]] {
            return Err(mismatch("conv2d bias", bias.shape(), &ws[..1]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let (hp, wp) = (is[2] + 2 * pad.0, is[3] + 2 * pad.1);
        if hp < ws[2] || wp < ws[3] {
            return Err(mismatch("conv2d kernel larger than padded input", is, ws));
        }
        Ok(Self {
            n: is[0],
            c: is[1],
            h: is[2],
            w: is[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (hp - ws[2]) / stride.0 + 1,
            wo: (wp - ws[3]) / stride.1 + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `ow * stride + kj - pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, pad) = (self.stride.1, self.pad.1);
        let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
        let hi = if self.w + pad > kj { ((self.w + pad - kj - 1) / s + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Writes the patch matrix `[k, p]` of one sample `x` (`[C, H, W]`) into
    /// `cols`, whose rows are `ld` apart.
    fn im2col_sample<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize) {
        let (p, hw) = (self.p(), self.h * self.w);
        for c in 0..self.c {
            let plane = &x[c * hw..][..hw];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ld..][..p];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    let (lo, hi) = self.valid_cols(kj);
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        if ih < 0 || ih >= self.h as isize || lo == hi {
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..][..self.w];
                        let first = lo * self.stride.1 + kj - self.pad.1;
                        let out = &mut dst[oh * self.wo + lo..oh * self.wo + hi];
                        if self.stride.1 == 1 {
                            out.copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (d, v) in out.iter_mut().zip(src[first..].iter().step_by(self.stride.1)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col_sample`], accumulated into `dx` (`[C, H, W]`).
    fn col2im_sample<T: Scalar>(&self, cols: &[T], ld: usize, dx: &mut [T]) {
        let (p, hw) = (self.p(), self.h * self.w);
        for c in 0..self.c {
            let plane = &mut dx[c * hw..][..hw];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ld..][..p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        if ih < 0 || ih >= self.h as isize || lo == hi {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..][..self.w];
                        let first = lo * self.stride.1 + kj - self.pad.1;
                        let vals = &src[oh * self.wo + lo..oh * self.wo + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride.1).zip(vals) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples lowered together: enough that each GEMM spans a few hundred
/// output positions, few enough that the patch matrix stays cache-sized.
fn group_size(n: usize, p: usize) -> usize {
    256usize.div_ceil(p).clamp(1, n)
}

/// Zero-padded strided 2-D convolution (cross-correlation) over `[N, C, H, W]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let g = Conv2dGeom::new(input, weight, bias, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_len = g.c * g.h * g.w;
    let group = group_size(g.n, p);
    let mut cols = vec![T::zero(); k * group * p];
    let mut tmp = vec![T::zero(); g.o * group * p];
    let mut out = vec![T::zero(); g.n * g.o * p];
    let w = MatRef::new(weight.data(), g.o, k);
    for first in (0..g.n).step_by(group) {
        let m = group.min(g.n - first);
        let ld = m * p;
        for j in 0..m {
            g.im2col_sample(&input.data()[(first + j) * in_len..][..in_len], &mut cols[j * p..], ld);
        }
        let tmp = &mut tmp[..g.o * ld];
        matmul(w, MatRef { data: &cols, rows: k, cols: ld, rs: ld, cs: 1 }, T::zero(), tmp);
        for j in 0..m {
            let dst = &mut out[(first + j) * g.o * p..][..g.o * p];
            for (oc, (row, &bias)) in dst.chunks_exact_mut(p).zip(bias.data()).enumerate() {
                for (d, &v) in row.iter_mut().zip(&tmp[oc * ld + j * p..][..p]) {
                    *d = v + bias;
                }
            }
        }
    }
    Tensor::new([g.n, g.o, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] as `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &Conv2dGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.c * g.h * g.w;
    let group = group_size(g.n, p);
    let mut cols = vec![T::zero(); k * group * p];
    let mut dy = vec![T::zero(); g.o * group * p];
    let mut dcols = vec![T::zero(); if need_dx { k * group * p } else { 0 }];
    let mut dx = vec![T::zero(); if need_dx { g.n * in_len } else { 0 }];
    let mut dw = vec![T::zero(); g.o * k];
    let mut db = vec![T::zero(); g.o];
    let w = MatRef::new(weight, g.o, k);
    for first in (0..g.n).step_by(group) {
        let m = group.min(g.n - first);
        let ld = m * p;
        for j in 0..m {
            let src = &dout[(first + j) * g.o * p..][..g.o * p];
            for (oc, row) in src.chunks_exact(p).enumerate() {
                dy[oc * ld + j * p..][..p].copy_from_slice(row);
                db[oc] += row.iter().fold(T::zero(), |a, &v| a + v);
            }
            g.im2col_sample(&input[(first + j) * in_len..][..in_len], &mut cols[j * p..], ld);
        }
        let dyv = MatRef { data: &dy, rows: g.o, cols: ld, rs: ld, cs: 1 };
        matmul(dyv, MatRef { data: &cols, rows: k, cols: ld, rs: ld, cs: 1 }.t(), T::one(), &mut dw);
        if need_dx {
            let dcols = &mut dcols[..k * ld];
            matmul(w.t(), dyv, T::zero(), dcols);
            for j in 0..m {
                g.col2im_sample(&dcols[j * p..], ld, &mut dx[(first + j) * in_len..][..in_len]);
            }
        }
    }
    (need_dx.then_some(dx), dw, db)
}

// ---------------------------------------------------------------------------
// Causal dilated 1-D convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub o: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        dilation: usize,
    ) -> Result<Self> {
        expect_rank("conv1d_causal", input, 3)?;
        expect_rank("conv1d_causal", weight, 3)?;
        let (is, ws) = (input.shape(), weight.shape());
        if is[1] != ws[1] {
            return Err(mismatch("conv1d_causal", is, ws));
        }
        if bias.shape() != [ws[0]] {
            return Err(mismatch("conv1d_causal bias", bias.shape(), &ws[..1]));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("conv1d_causal: dilation must be >= 1".into()));
        }
        Ok(Self { n: is[0], c: is[1], t: is[2], o: ws[0], taps: ws[2], dilation })
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let nt = self.n * self.t;
        let mut cols = vec![T::zero(); self.c * self.taps * nt];
        for c in 0..self.c {
            for i in 0..self.taps {
                let shift = self.dilation * i;
                if shift >= self.t {
                    continue;
                }
                let row = c * self.taps + i;
                for s in 0..self.n {
                    let src = &x[(s * self.c + c) * self.t..][..self.t];
                    let dst = &mut cols[row * nt + s * self.t..][..self.t];
                    dst[shift..].copy_from_slice(&src[..self.t - shift]);
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let nt = self.n * self.t;
        let mut dx = vec![T::zero(); self.n * self.c * self.t];
        for c in 0..self.c {
            for i in 0..self.taps {
                let shift = self.dilation * i;
                if shift >= self.t {
                    continue;
                }
                let row = c * self.taps + i;
                for s in 0..self.n {
                    let src = &cols[row * nt + s * self.t..][..self.t];
                    let dst = &mut dx[(s * self.c + c) * self.t..][..self.t];
                    for (d, &v) in dst[..self.t - shift].iter_mut().zip(&src[shift..]) {
                        *d += v;
                    }
                }
            }
        }
        dx
    }
}

/// Causal dilated convolution over `[N, C, T]`:
/// `out[t] = sum_i K_i * x[t - d*i]`, with `x[tau] = 0` for `tau < 0`.
/// Output length equals input length.
pub fn conv1d_causal<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = Conv1dGeom::new(input, weight, bias, dilation)?;
    let cols = g.im2col(input.data());
    let out = lowered_forward(&cols, weight.data(), bias.data(), g.o, g.n, g.t);
    Tensor::new([g.n, g.o, g.t], out)
}

pub(crate) fn conv1d_causal_backward<T: Scalar>(
    g: &Conv1dGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let cols = g.im2col(input);
    let grads = lowered_backward(&cols, weight, dout, g.o, g.n, g.t, need_dx);
    (grads.dcols.map(|dc| g.col2im(&dc)), grads.dw, grads.db)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Mean over H and W: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avgpool_spatial<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avgpool_spatial", input, 4)?;
    let s = input.shape();
    let hw = s[2] * s[3];
    let scale = T::from_f64(1.0 / hw as f64);
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * scale)
        .collect();
    Tensor::new([s[0], s[1], 1, 1], out)
}

/// Max over H and W, plus the flat index of the first maximum of each plane.
pub fn global_maxpool_spatial<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("global_maxpool_spatial", input, 4)?;
    let s = input.shape();
    let hw = s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * s[1]);
    let mut argmax = Vec::with_capacity(s[0] * s[1]);
    for (plane_idx, plane) in input.data().chunks_exact(hw).enumerate() {
        let (best, val) = first_max(plane.iter().copied());
        out.push(val);
        argmax.push(plane_idx * hw + best);
    }
    Ok((Tensor::new([s[0], s[1], 1, 1], out)?, argmax))
}

fn first_max<T: Scalar>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Per-pixel mean across channels: `[N, C, H, W] -> [N, 1, H, W]`.
pub fn channel_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("channel_pool", input, 4)?;
    let s = input.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let scale = T::from_f64(1.0 / c as f64);
    let mut out = vec![T::zero(); s[0] * hw];
    for n in 0..s[0] {
        let dst = &mut out[n * hw..(n + 1) * hw];
        for ch in 0..c {
            for (d, &v) in dst.iter_mut().zip(&input.data()[(n * c + ch) * hw..][..hw]) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= scale);
    }
    Tensor::new([s[0], 1, s[2], s[3]], out)
}

/// Per-pixel max across channels, plus the flat input index of each first maximum.
pub fn channel_max<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("channel_pool", input, 4)?;
    let s = input.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(s[0] * hw);
    let mut argmax = Vec::with_capacity(s[0] * hw);
    for n in 0..s[0] {
        for pix in 0..hw {
            let (best, val) = first_max((0..c).map(|ch| input.data()[(n * c + ch) * hw + pix]));
            out.push(val);
            argmax.push((n * c + best) * hw + pix);
        }
    }
    Ok((Tensor::new([s[0], 1, s[2], s[3]], out)?, argmax))
}

/// Channel-wise mean and max pooling, in that order (`F_avg^s`, `F_max^s`).
pub fn channel_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((channel_mean(input)?, channel_max(input)?.0))
}

/// Mean over the height axis: `[N, C, H, W] -> [N, C, W]`.
pub fn height_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("height_mean", input, 4)?;
    let s = input.shape();
    let (h, w) = (s[2], s[3]);
    let scale = T::from_f64(1.0 / h as f64);
    let mut out = vec![T::zero(); s[0] * s[1] * w];
    for (plane, dst) in input.data().chunks_exact(h * w).zip(out.chunks_exact_mut(w)) {
        for row in plane.chunks_exact(w) {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= scale);
    }
    Tensor::new([s[0], s[1], w], out)
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// Affine map `[N, in] -> [N, out]` with weight `[out, in]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("linear", input, 2)?;
    expect_rank("linear", weight, 2)?;
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let (fout, win) = (weight.shape()[0], weight.shape()[1]);
    if fin != win {
        return Err(mismatch("linear", input.shape(), weight.shape()));
    }
    if bias.shape() != [fout] {
        return Err(mismatch("linear bias", bias.shape(), &[fout]));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    matmul(MatRef::new(input.data(), n, fin), MatRef::new(weight.data(), fout, fin).t(), T::one(), &mut out);
    Tensor::new([n, fout], out)
}

pub(crate) fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let dy = MatRef::new(dout, n, fout);
    let mut dw = vec![T::zero(); fout * fin];
    matmul(dy.t(), MatRef::new(input.data(), n, fin), T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in dout.chunks_exact(fout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * fin];
        matmul(dy, MatRef::new(weight.data(), fout, fin), T::zero(), &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Per-timestep projection `[N, C, T] -> [N, T, L]` with weight `[L, C]`.
pub fn project_time<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("project_logits", input, 3)?;
    expect_rank("project_logits", weight, 2)?;
    let (n, c, t) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let l = weight.shape()[0];
    if weight.shape()[1] != c {
        return Err(mismatch("project_logits", input.shape(), weight.shape()));
    }
    if bias.shape() != [l] {
        return Err(mismatch("project_logits bias", bias.shape(), &[l]));
    }
    let mut out: Vec<T> = (0..n * t).flat_map(|_| bias.data().iter().copied()).collect();
    for s in 0..n {
        let x = MatRef::new(&input.data()[s * c * t..(s + 1) * c * t], c, t);
        matmul(x.t(), MatRef::new(weight.data(), l, c).t(), T::one(), &mut out[s * t * l..(s + 1) * t * l]);
    }
    Tensor::new([n, t, l], out)
}

pub(crate) fn project_time_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n, c, t) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let l = weight.shape()[0];
    let mut dw = vec![T::zero(); l * c];
    let mut db = vec![T::zero(); l];
    let mut dx = need_dx.then(|| vec![T::zero(); n * c * t]);
    for s in 0..n {
        let dy = MatRef::new(&dout[s * t * l..(s + 1) * t * l], t, l);
        let x = MatRef::new(&input.data()[s * c * t..(s + 1) * c * t], c, t);
        // dW[l, c] += dy^T[l, t] * x^T[t, c]
        matmul(dy.t(), x.t(), T::one(), &mut dw);
        for row in dy.data.chunks_exact(l) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dx[c, t] = W^T[c, l] * dy^T[l, t]
            matmul(MatRef::new(weight.data(), l, c).t(), dy.t(), T::zero(), &mut dx[s * c * t..(s + 1) * c * t]);
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Element-wise and broadcasting
// ---------------------------------------------------------------------------

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Maps each flat index of `full` to the flat index of the broadcast operand.
/// Calls `f(i, j)` for every flat index `i` of `full` with the matching flat
/// index `j` of the broadcast `small` (same rank, extents equal or 1).
pub(crate) fn for_each_broadcast(full: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = full.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if small[ax] == 1 { 0 } else { acc };
        acc *= small[ax];
    }
    let inner = full[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = full[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0;
    for o in 0..outer {
        let start = o * inner;
        for k in 0..inner {
            f(start + k, base + k * inner_stride);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < full[ax] {
                break;
            }
            base -= strides[ax] * full[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn check_broadcast(op: &'static str, full: &[usize], small: &[usize]) -> Result<()> {
    if full.len() != small.len() || full.iter().zip(small).any(|(&f, &s)| s != f && s != 1) {
        return Err(mismatch(op, full, small));
    }
    Ok(())
}

/// Element-wise product where `gate` is broadcast over `input`: the gate may
/// match `input` exactly or have extent 1 on any axis, e.g. `(N, C, 1, 1)` or
/// `(N, 1, H, W)` against `(N, C, H, W)`.
pub fn mul_broadcast<T: Scalar>(input: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    check_broadcast("mul_broadcast", input.shape(), gate.shape())?;
    let (x, gv) = (input.data(), gate.data());
    let mut data = vec![T::zero(); x.len()];
    for_each_broadcast(input.shape(), gate.shape(), |i, j| data[i] = x[i] * gv[j]);
    Tensor::new(input.shape(), data)
}

/// Softmax over the last axis.
pub fn softmax_lastaxis<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let last = *input.shape().last().expect("rank >= 1");
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(last) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// Inverted-dropout keep mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

/// Inverted dropout; identity when `training` is false.
pub fn dropout<T: Scalar>(input: &Tensor<T>, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T>(input.len(), rate, seed)?;
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape(), data)
}

/// Concatenation along axis 1.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let s0 = first.shape();
    if s0.len() < 2 {
        return Err(Error::InvalidArgument("concat needs rank >= 2".into()));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
            return Err(mismatch("concat", s0, s));
        }
    }
    let inner: usize = s0[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(s0[0] * total_c * inner);
    for n in 0..s0[0] {
        for p in parts {
            let block = p.shape()[1] * inner;
            out.extend_from_slice(&p.data()[n * block..(n + 1) * block]);
        }
    }
    let mut shape = s0.to_vec();
    shape[1] = total_c;
    Tensor::new(shape, out)
}
