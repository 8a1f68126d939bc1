//! Dense rank-4 tensor operations in NCHW layout.
//!
//! Every feature map in the engine is a [`Tensor4`]: batch, channels, rows,
//! cols, stored row-major as `f32`. The operation set is deliberately small
//! (convolution, nearest-neighbor upsampling, channel concatenation,
//! elementwise sum, ReLU/sigmoid, global average pooling, dense layers) and
//! every operation is a pure function of its inputs.
//!
//! Determinism contract: `conv2d` and `global_avg_pool` accumulate in `f64`
//! with a fixed per-output-element summation order, so results are
//! bit-identical regardless of the internal parallel schedule.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense rank-4 feature map: `(n, c, h, w)`, row-major `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Builds a tensor from raw data. The data length must equal `n*c*h*w`
    /// and all dimensions must be at least 1.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dimensions must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        let expect = n * c * h * w;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({n}, {c}, {h}, {w}) = {expect}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_vec(n, c, h, w, vec![0.0; n * c * h * w])
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f32) -> Result<Self> {
        Self::from_vec(n, c, h, w, vec![value; n * c * h * w])
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    /// Shape as `(n, c, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    /// Shape as an array, convenient for traces and error messages.
    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat index of element `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// The `(h, w)` plane of one channel of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies a contiguous channel range into a new tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor4> {
        if from >= to || to > self.c {
            return Err(Error::Shape(format!(
                "channel slice [{from}, {to}) out of range for {} channels",
                self.c
            )));
        }
        let cs = to - from;
        let hw = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * cs * hw);
        for n in 0..self.n {
            let start = (n * self.c + from) * hw;
            data.extend_from_slice(&self.data[start..start + cs * hw]);
        }
        Tensor4::from_vec(self.n, cs, self.h, self.w, data)
    }
}

/// Convolution weights and geometry: weights `(out_ch, in_ch, kh, kw)`,
/// per-output-channel bias, stride, and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weights: Tensor4,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor4, bias: Vec<f32>, stride: usize, pad: usize) -> Result<Self> {
        let (out_ch, _, kh, kw) = weights.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if bias.len() != out_ch {
            return Err(Error::Config(format!(
                "bias length {} does not match {out_ch} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.c()
    }

    /// Weight plus bias element count.
    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }
}

/// Output extent of a strided convolution along one axis:
/// `floor((size + 2*pad - k) / stride) + 1`, or an error when non-positive.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size as i64 + 2 * pad as i64 - k as i64;
    if padded < 0 {
        return Err(Error::Shape(format!(
            "kernel {k} does not fit input extent {size} with pad {pad}"
        )));
    }
    Ok((padded / stride as i64) as usize + 1)
}

/// 2-D cross-correlation with zero padding and per-channel bias.
///
/// Accumulates in `f64` and visits contributions of each output element in
/// `(in_channel, kh, kw)` order; the parallel split over `(batch, out_channel)`
/// never reorders a single element's summation, so results are independent of
/// the thread schedule. Strides 1 and 2 take vector-friendly paths (stride 2
/// via an even/odd phase split of the input) that preserve that exact
/// per-element order, so all three paths produce bit-identical output.
pub fn conv2d(input: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    let (out_ch, in_ch, kh, kw) = p.weights.shape();
    if c != in_ch {
        return Err(Error::Config(format!(
            "input has {c} channels but kernel expects {in_ch}"
        )));
    }
    let oh = conv_out_extent(h, kh, p.stride, p.pad)?;
    let ow = conv_out_extent(w, kw, p.stride, p.pad)?;

    let pad = p.pad as i64;
    let mut out = vec![0.0f32; n * out_ch * oh * ow];

    // stride 2 reads the input through a phase split computed once up front
    let phases = if p.stride == 2 {
        Some(PhaseSplit::build(input))
    } else {
        None
    };

    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(chunk, out_plane)| {
            let ni = chunk / out_ch;
            let oc = chunk % out_ch;
            let mut acc = vec![f64::from(p.bias[oc]); oh * ow];
            for ic in 0..in_ch {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = f64::from(p.weights.at(oc, ic, ky, kx));
                        // Valid output range for this kernel tap: keeps
                        // ih = oy*stride + ky - pad inside [0, h).
                        let (oy0, oy1) = tap_range(oh, h, ky as i64, p.stride as i64, pad);
                        let (ox0, ox1) = tap_range(ow, w, kx as i64, p.stride as i64, pad);
                        if oy0 >= oy1 || ox0 >= ox1 {
                            continue;
                        }
                        let len = ox1 - ox0;
                        match (p.stride, &phases) {
                            (1, _) => {
                                let plane = input.plane(ni, ic);
                                let dx = kx as i64 - pad;
                                for oy in oy0..oy1 {
                                    let ih = (oy as i64 + ky as i64 - pad) as usize;
                                    let src_start = (ih * w) as i64 + ox0 as i64 + dx;
                                    let src = &plane[src_start as usize..][..len];
                                    let dst = &mut acc[oy * ow + ox0..][..len];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d += wgt * f64::from(s);
                                    }
                                }
                            }
                            (2, Some(ph)) => {
                                // ih = 2*oy + (ky - pad): split the offset
                                // into parity a and row shift q, so the tap
                                // reads phase plane (a, b) at unit stride
                                let t = ky as i64 - pad;
                                let a = t.rem_euclid(2);
                                let q = (t - a) / 2;
                                let u = kx as i64 - pad;
                                let b = u.rem_euclid(2);
                                let r = (u - b) / 2;
                                let pidx = (a * 2 + b) as usize;
                                let cols = ph.dims[pidx].1;
                                let block = ph.plane(ni, c, ic, pidx);
                                for oy in oy0..oy1 {
                                    let prow = (oy as i64 + q) as usize;
                                    let src_start = prow as i64 * cols as i64 + ox0 as i64 + r;
                                    let src = &block[src_start as usize..][..len];
                                    let dst = &mut acc[oy * ow + ox0..][..len];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d += wgt * f64::from(s);
                                    }
                                }
                            }
                            _ => {
                                let plane = input.plane(ni, ic);
                                let stride = p.stride as i64;
                                for oy in oy0..oy1 {
                                    let ih = (oy as i64 * stride + ky as i64 - pad) as usize;
                                    let row = &plane[ih * w..(ih + 1) * w];
                                    let dst = &mut acc[oy * ow + ox0..][..len];
                                    for (i, d) in dst.iter_mut().enumerate() {
                                        let iw =
                                            ((ox0 + i) as i64 * stride + kx as i64 - pad) as usize;
                                        *d += wgt * f64::from(row[iw]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (dst, &a) in out_plane.iter_mut().zip(acc.iter()) {
                *dst = a as f32;
            }
        });

    Tensor4::from_vec(n, out_ch, oh, ow, out)
}

/// Input planes re-laid by row/column parity: `plane(a, b)[i][j]`
/// holds `input[2i + a][2j + b]`. Turns stride-2 kernel taps into
/// unit-stride reads.
struct PhaseSplit {
    data: Vec<f32>,
    /// (rows, cols) of each phase plane, index `a * 2 + b`.
    dims: [(usize, usize); 4],
    offsets: [usize; 4],
    /// Total floats per (batch, channel) block.
    block: usize,
}

impl PhaseSplit {
    fn build(input: &Tensor4) -> Self {
        let (n, c, h, w) = input.shape();
        let dims = [
            (h.div_ceil(2), w.div_ceil(2)),
            (h.div_ceil(2), w / 2),
            (h / 2, w.div_ceil(2)),
            (h / 2, w / 2),
        ];
        let mut offsets = [0usize; 4];
        let mut block = 0;
        for (i, (rows, cols)) in dims.iter().enumerate() {
            offsets[i] = block;
            block += rows * cols;
        }
        let mut data = vec![0.0f32; n * c * block];
        for ni in 0..n {
            for ci in 0..c {
                let plane = input.plane(ni, ci);
                let base = (ni * c + ci) * block;
                for a in 0..2 {
                    for b in 0..2 {
                        let p = a * 2 + b;
                        let (rows, cols) = dims[p];
                        let dst = &mut data[base + offsets[p]..][..rows * cols];
                        for i in 0..rows {
                            let src = &plane[(2 * i + a) * w..];
                            let drow = &mut dst[i * cols..(i + 1) * cols];
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d = src[2 * j + b];
                            }
                        }
                    }
                }
            }
        }
        Self {
            data,
            dims,
            offsets,
            block,
        }
    }

    fn plane(&self, ni: usize, c: usize, ci: usize, phase: usize) -> &[f32] {
        let base = (ni * c + ci) * self.block + self.offsets[phase];
        let (rows, cols) = self.dims[phase];
        &self.data[base..base + rows * cols]
    }
}

/// Output index range `[lo, hi)` for which a kernel tap stays in bounds.
#[inline]
fn tap_range(out_extent: usize, in_extent: usize, k: i64, stride: i64, pad: i64) -> (usize, usize) {
    // oy*stride + k - pad >= 0  and  oy*stride + k - pad < in_extent
    let lo = (pad - k + stride - 1).div_euclid(stride).max(0);
    let hi = (in_extent as i64 - k + pad + stride - 1).div_euclid(stride);
    let lo = lo.min(out_extent as i64) as usize;
    let hi = hi.clamp(0, out_extent as i64) as usize;
    (lo, hi.max(lo))
}

/// Nearest-neighbor resize to an explicit target size. Only enlargement (or
/// identity) is allowed: source index is `floor(i * in_extent / out_extent)`.
pub fn upsample_to(input: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if out_h < h || out_w < w {
        return Err(Error::Shape(format!(
            "upsample target {out_h}x{out_w} is smaller than input {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    let col_src: Vec<usize> = (0..out_w).map(|j| j * w / out_w).collect();
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            for i in 0..out_h {
                let src_row = &plane[(i * h / out_h) * w..];
                data.extend(col_src.iter().map(|&j| src_row[j]));
            }
        }
    }
    Tensor4::from_vec(n, c, out_h, out_w, data)
}

/// Concatenates tensors along the channel axis; part `k` occupies the
/// contiguous channel block after parts `0..k`.
pub fn concat_channels(parts: &[Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
    let (n, _, h, w) = first.shape();
    if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
        let shapes: Vec<String> = parts.iter().map(|p| format!("{:?}", p.dims())).collect();
        return Err(Error::Shape(format!(
            "concat parts disagree on batch or spatial dims: [{}]",
            shapes.join(", ")
        )));
    }
    let c_total: usize = parts.iter().map(Tensor4::c).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c_total * hw);
    for ni in 0..n {
        for part in parts {
            let start = ni * part.c() * hw;
            data.extend_from_slice(&part.data()[start..start + part.c() * hw]);
        }
    }
    Tensor4::from_vec(n, c_total, h, w, data)
}

/// Elementwise sum of two identically shaped tensors.
pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_vec(a.n(), a.c(), a.h(), a.w(), data)
}

/// Elementwise `max(0, x)`.
pub fn relu(t: &Tensor4) -> Tensor4 {
    let data = t.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor4::from_vec(t.n(), t.c(), t.h(), t.w(), data).expect("shape unchanged")
}

/// Elementwise logistic function, evaluated in f64 so extreme negative
/// inputs still round to a strictly positive subnormal instead of 0.
pub fn sigmoid(t: &Tensor4) -> Tensor4 {
    let data = t.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor4::from_vec(t.n(), t.c(), t.h(), t.w(), data).expect("shape unchanged")
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

/// Per-channel spatial mean, one vector of length `c` per batch item,
/// returned flat as `n * c` values. Accumulates in f64.
pub fn global_avg_pool(t: &Tensor4) -> Vec<f32> {
    let (n, c, h, w) = t.shape();
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let sum: f64 = t.plane(ni, ci).iter().map(|&v| f64::from(v)).sum();
            out.push((sum / area) as f32);
        }
    }
    out
}

/// Row-major dense matrix for the excitation layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// `weight · v + bias`, accumulated in f64.
pub fn dense(v: &[f32], weight: &Matrix, bias: &[f32]) -> Result<Vec<f32>> {
    if v.len() != weight.cols {
        return Err(Error::Config(format!(
            "dense input length {} does not match matrix cols {}",
            v.len(),
            weight.cols
        )));
    }
    if bias.len() != weight.rows {
        return Err(Error::Config(format!(
            "dense bias length {} does not match matrix rows {}",
            bias.len(),
            weight.rows
        )));
    }
    Ok((0..weight.rows)
        .map(|r| {
            let row = &weight.data[r * weight.cols..(r + 1) * weight.cols];
            let sum: f64 = row
                .iter()
                .zip(v)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            (sum + f64::from(bias[r])) as f32
        })
        .collect())
}
