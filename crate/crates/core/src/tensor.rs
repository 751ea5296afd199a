//! Dense matrices, sample planes and multi-channel convolution kernels.
//!
//! Convolution here is cross-correlation: the kernel is never flipped, so a
//! tap at `(ky, kx)` multiplies the input sample at `(y + ky, x + kx)`.
//! Codec interpolation filters are written the same way.

use crate::error::{Error, Result};

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        check_finite(&values, "matrix construction")?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.values[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self · x` for a column vector given as a slice.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let values: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        check_finite(&values, "matrix addition")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_nn(&a.values, &b.values, a.rows, a.cols, b.cols, &mut out);
    check_finite(&out, "matmul")?;
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        values: out,
    })
}

/// Column vector of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    values: Vec<f64>,
}

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::dim("vector must be non-empty"));
        }
        check_finite(&values, "vector construction")?;
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector must be non-empty");
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Multi-channel 2-D convolution kernel, taps laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    taps: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        taps: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::dim(format!(
                "kernel dimensions must be positive, got {out_channels}x{in_channels}x{kh}x{kw}"
            )));
        }
        let expected = out_channels * in_channels * kh * kw;
        if taps.len() != expected {
            return Err(Error::dim(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} needs {expected} taps, got {}",
                taps.len()
            )));
        }
        check_finite(&taps, "kernel construction")?;
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::dim(format!(
                    "kernel bias needs {out_channels} values, got {}",
                    b.len()
                )));
            }
            check_finite(b, "kernel construction")?;
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            taps,
            bias,
        })
    }

    /// 1x1 kernel passing each channel straight through.
    pub fn identity(channels: usize) -> Self {
        let mut taps = vec![0.0; channels * channels];
        for c in 0..channels {
            taps[c * channels + c] = 1.0;
        }
        Self {
            out_channels: channels,
            in_channels: channels,
            kh: 1,
            kw: 1,
            taps,
            bias: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    pub fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.taps[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }

    /// The `kh x kw` spatial filter connecting input `i` to output `o`.
    pub fn filter(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kh * self.kw;
        let start = (o * self.in_channels + i) * n;
        &self.taps[start..start + n]
    }

    pub fn with_bias(mut self, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_channels {
                return Err(Error::dim(format!(
                    "kernel bias needs {} values, got {}",
                    self.out_channels,
                    b.len()
                )));
            }
            check_finite(b, "kernel bias")?;
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn without_bias(&self) -> Kernel {
        Kernel {
            bias: None,
            ..self.clone()
        }
    }

    pub(crate) fn from_parts_unchecked(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        taps: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Self {
        debug_assert_eq!(taps.len(), out_channels * in_channels * kh * kw);
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            taps,
            bias,
        }
    }
}

/// A single plane of samples. Samples are kept as unclipped `f64`; use
/// [`Plane::clipped`] to bring them back to the integer sample range.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    bit_depth: u8,
    samples: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, bit_depth: u8, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("plane must be non-empty, got {width}x{height}")));
        }
        if bit_depth != 8 && bit_depth != 10 {
            return Err(Error::Param(format!("bit depth must be 8 or 10, got {bit_depth}")));
        }
        if samples.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} plane needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, bit_depth: u8, value: f64) -> Result<Self> {
        Self::new(width, height, bit_depth, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        bit_depth: u8,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y));
            }
        }
        Self::new(width, height, bit_depth, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn max_value(&self) -> f64 {
        f64::from((1u32 << self.bit_depth) - 1)
    }

    pub fn mid_value(&self) -> f64 {
        f64::from(1u32 << (self.bit_depth - 1))
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.samples[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.samples[y * self.width..(y + 1) * self.width]
    }

    /// Rounded and clamped to `[0, 2^bit_depth - 1]`.
    pub fn clipped(&self) -> Plane {
        let max = self.max_value();
        Plane {
            samples: self.samples.iter().map(|v| v.round().clamp(0.0, max)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Plane> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::Bounds(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{} plane",
                self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(width * height);
        for row in y..y + height {
            samples.extend_from_slice(&self.row(row)[x..x + width]);
        }
        Plane::new(width, height, self.bit_depth, samples)
    }

    /// Surround with `pad` zero samples on every side.
    pub fn zero_padded(&self, pad_y: usize, pad_x: usize) -> Plane {
        let w = self.width + 2 * pad_x;
        let h = self.height + 2 * pad_y;
        let mut samples = vec![0.0; w * h];
        for y in 0..self.height {
            let dst = (y + pad_y) * w + pad_x;
            samples[dst..dst + self.width].copy_from_slice(self.row(y));
        }
        Plane {
            width: w,
            height: h,
            bit_depth: self.bit_depth,
            samples,
        }
    }
}

/// Output geometry of [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Only positions where the kernel fits entirely inside the input.
    Valid,
    /// Output has the input's size; samples outside the input read as zero.
    SameZero,
}

/// Multi-channel cross-correlation. `input` holds one plane per input
/// channel; the result holds one plane per output channel.
pub fn conv2d(input: &[Plane], k: &Kernel, mode: Padding) -> Result<Vec<Plane>> {
    if input.len() != k.in_channels {
        return Err(Error::dim(format!(
            "kernel expects {} input channels, got {}",
            k.in_channels,
            input.len()
        )));
    }
    let (w, h, bd) = (input[0].width, input[0].height, input[0].bit_depth);
    if input.iter().any(|p| p.width != w || p.height != h) {
        return Err(Error::dim("input channels differ in size"));
    }
    match mode {
        Padding::Valid => conv_valid(input, k),
        Padding::SameZero => {
            let (py, px) = ((k.kh - 1) / 2, (k.kw - 1) / 2);
            // Even kernels put the extra padding on the bottom/right.
            let padded: Vec<Plane> = input
                .iter()
                .map(|p| {
                    let mut out = Plane::filled(w + k.kw - 1, h + k.kh - 1, bd, 0.0)
                        .expect("non-empty padded plane");
                    for y in 0..h {
                        let dst = (y + py) * out.width + px;
                        out.samples[dst..dst + w].copy_from_slice(p.row(y));
                    }
                    out
                })
                .collect();
            conv_valid(&padded, k)
        }
    }
}

fn conv_valid(input: &[Plane], k: &Kernel) -> Result<Vec<Plane>> {
    let (w, h, bd) = (input[0].width, input[0].height, input[0].bit_depth);
    if w < k.kw || h < k.kh {
        return Err(Error::dim(format!(
            "{w}x{h} input is smaller than {}x{} kernel",
            k.kw, k.kh
        )));
    }
    let (ow, oh) = (w - k.kw + 1, h - k.kh + 1);
    let mut out = Vec::with_capacity(k.out_channels);
    for o in 0..k.out_channels {
        let mut acc = vec![0.0; ow * oh];
        for (i, plane) in input.iter().enumerate() {
            correlate_accumulate(&plane.samples, w, k.filter(o, i), k.kw, k.kh, &mut acc, ow, oh);
        }
        if let Some(b) = &k.bias {
            acc.iter_mut().for_each(|v| *v += b[o]);
        }
        out.push(Plane {
            width: ow,
            height: oh,
            bit_depth: bd,
            samples: acc,
        });
    }
    Ok(out)
}

/// `dst[y][x] += Σ taps[ky][kx] · src[y+ky][x+kx]`, accumulated in
/// `(ky, kx)` raster order for every output sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_accumulate(
    src: &[f64],
    src_w: usize,
    taps: &[f64],
    kw: usize,
    kh: usize,
    dst: &mut [f64],
    dst_w: usize,
    dst_h: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let t = taps[ky * kw + kx];
            for y in 0..dst_h {
                let s = &src[(y + ky) * src_w + kx..][..dst_w];
                let d = &mut dst[y * dst_w..][..dst_w];
                for (d, s) in d.iter_mut().zip(s) {
                    *d += t * s;
                }
            }
        }
    }
}

/// Full 2-D convolution of two small filters: `out[s+u][t+v] += a[s][t]·b[u][v]`.
pub(crate) fn full_convolve_accumulate(
    a: &[f64],
    ah: usize,
    aw: usize,
    b: &[f64],
    bh: usize,
    bw: usize,
    out: &mut [f64],
) {
    let ow = aw + bw - 1;
    for s in 0..ah {
        for t in 0..aw {
            let av = a[s * aw + t];
            if av == 0.0 {
                continue;
            }
            for u in 0..bh {
                let row = &mut out[(s + u) * ow + t..][..bw];
                for (o, bv) in row.iter_mut().zip(&b[u * bw..(u + 1) * bw]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Fuse two convolution layers into one: applying the result is the same as
/// applying `k1` then `k2` in valid mode.
///
/// Each fused filter is `Σ_c full_conv(k1[c][i], k2[o][c])` and the fused
/// bias is `b2[o] + Σ_c b1[c] · Σ taps(k2[o][c])`.
pub fn compose_spatial(k1: &Kernel, k2: &Kernel) -> Result<Kernel> {
    if k2.in_channels != k1.out_channels {
        return Err(Error::dim(format!(
            "cannot compose: second kernel expects {} channels, first produces {}",
            k2.in_channels, k1.out_channels
        )));
    }
    let kh = k1.kh + k2.kh - 1;
    let kw = k1.kw + k2.kw - 1;
    let (outs, ins, mids) = (k2.out_channels, k1.in_channels, k1.out_channels);
    let mut taps = vec![0.0; outs * ins * kh * kw];
    for o in 0..outs {
        for i in 0..ins {
            let dst = &mut taps[(o * ins + i) * kh * kw..][..kh * kw];
            for c in 0..mids {
                full_convolve_accumulate(k1.filter(c, i), k1.kh, k1.kw, k2.filter(o, c), k2.kh, k2.kw, dst);
            }
        }
    }
    let bias: Option<Vec<f64>> = match (&k1.bias, &k2.bias) {
        (None, None) => None,
        (b1, b2) => Some(
            (0..outs)
                .map(|o| {
                    let carried: f64 = b1.as_ref().map_or(0.0, |b1| {
                        (0..mids).map(|c| b1[c] * k2.filter(o, c).iter().sum::<f64>()).sum()
                    });
                    carried + b2.as_ref().map_or(0.0, |b2| b2[o])
                })
                .collect::<Vec<f64>>(),
        ),
    };
    check_finite(&taps, "compose_spatial")?;
    if let Some(b) = &bias {
        check_finite(b, "compose_spatial")?;
    }
    Ok(Kernel::from_parts_unchecked(outs, ins, kh, kw, taps, bias))
}

/// Solve `A X = B` for symmetric positive-definite `A` by Cholesky factorization.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::dim(format!("cholesky needs a square matrix, got {}x{}", a.rows, a.cols)));
    }
    if b.rows != n {
        return Err(Error::dim(format!(
            "right-hand side has {} rows, system has {n}",
            b.rows
        )));
    }
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > scale * 1e-14) {
            return Err(Error::Singular(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let m = b.cols;
    let mut x = b.values.clone();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    check_finite(&x, "cholesky_solve")?;
    Ok(Matrix { rows: n, cols: m, values: x })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out (m×n) = a (m×k) · b (k×n)`, row-major, overwriting `out`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out[..m * n].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×n) = a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn_accumulate(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, o: usize, i: usize, kh: usize, kw: usize, bias: bool) -> Kernel {
        let taps = (0..o * i * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = bias.then(|| (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect());
        Kernel::new(o, i, kh, kw, taps, bias).unwrap()
    }

    fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, 8, |_, _| rng.gen_range(0.0..255.0)).unwrap()
    }

    /// Straightforward loop oracle, same accumulation order as the library.
    fn conv_oracle(input: &[Plane], k: &Kernel) -> Vec<Plane> {
        let (w, h) = (input[0].width(), input[0].height());
        let (ow, oh) = (w - k.kw() + 1, h - k.kh() + 1);
        (0..k.out_channels())
            .map(|o| {
                Plane::from_fn(ow, oh, 8, |x, y| {
                    let mut s = 0.0;
                    for (i, p) in input.iter().enumerate() {
                        for ky in 0..k.kh() {
                            for kx in 0..k.kw() {
                                s += k.tap(o, i, ky, kx) * p.get(x + kx, y + ky);
                            }
                        }
                    }
                    s + k.bias().map_or(0.0, |b| b[o])
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 3);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);

        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().values(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_overflow_is_reported() {
        let a = Matrix::new(1, 2, vec![f64::MAX, f64::MAX]).unwrap();
        let b = Matrix::new(2, 1, vec![2.0, 2.0]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_plane(&mut rng, 7, 5);
        let out = conv2d(std::slice::from_ref(&p), &Kernel::identity(1), Padding::Valid).unwrap();
        assert_eq!(out[0], p);
        let out = conv2d(std::slice::from_ref(&p), &Kernel::identity(1), Padding::SameZero).unwrap();
        assert_eq!(out[0], p);
    }

    #[test]
    fn conv_all_ones() {
        let p = Plane::filled(3, 3, 8, 1.0).unwrap();
        let k = Kernel::new(1, 1, 3, 3, vec![1.0; 9], None).unwrap();
        let out = conv2d(&[p], &k, Padding::Valid).unwrap();
        assert_eq!((out[0].width(), out[0].height()), (1, 1));
        assert_eq!(out[0].get(0, 0), 9.0);
    }

    #[test]
    fn conv_matches_loop_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_plane(&mut rng, 8, 8);
        let k = random_kernel(&mut rng, 1, 1, 3, 3, false);
        assert_eq!(conv2d(std::slice::from_ref(&p), &k, Padding::Valid).unwrap(), conv_oracle(&[p], &k));

        let input: Vec<Plane> = (0..3).map(|_| random_plane(&mut rng, 9, 7)).collect();
        let k = random_kernel(&mut rng, 2, 3, 4, 3, true);
        assert_eq!(conv2d(&input, &k, Padding::Valid).unwrap(), conv_oracle(&input, &k));
    }

    #[test]
    fn conv_same_mode_zero_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_plane(&mut rng, 6, 5);
        let k = random_kernel(&mut rng, 1, 1, 5, 5, false);
        let out = conv2d(std::slice::from_ref(&p), &k, Padding::SameZero).unwrap();
        assert_eq!((out[0].width(), out[0].height()), (6, 5));
        let expected = conv_oracle(&[p.zero_padded(2, 2)], &k);
        assert_eq!(out, expected);
    }

    #[test]
    fn conv_too_small_input() {
        let p = Plane::filled(2, 5, 8, 0.0).unwrap();
        let k = Kernel::new(1, 1, 3, 3, vec![0.0; 9], None).unwrap();
        assert!(matches!(conv2d(&[p], &k, Padding::Valid), Err(Error::Dimension(_))));
    }

    #[test]
    fn compose_with_delta_returns_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_kernel(&mut rng, 2, 1, 3, 3, true);
        assert_eq!(compose_spatial(&Kernel::identity(1), &k).unwrap(), k);
        assert_eq!(compose_spatial(&k, &Kernel::identity(2)).unwrap(), k);
    }

    #[test]
    fn compose_srcnn_shape_is_13x13() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k1 = random_kernel(&mut rng, 64, 1, 9, 9, true);
        let k2 = random_kernel(&mut rng, 32, 64, 1, 1, true);
        let k3 = random_kernel(&mut rng, 1, 32, 5, 5, true);
        let fused = compose_spatial(&compose_spatial(&k1, &k2).unwrap(), &k3).unwrap();
        assert_eq!((fused.kh(), fused.kw(), fused.tap_count()), (13, 13, 169));
    }

    #[test]
    fn compose_channel_mismatch() {
        let a = Kernel::new(2, 1, 1, 1, vec![1.0, 1.0], None).unwrap();
        let b = Kernel::new(1, 3, 1, 1, vec![1.0; 3], None).unwrap();
        assert!(matches!(compose_spatial(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn fused_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input: Vec<Plane> = (0..2).map(|_| random_plane(&mut rng, 20, 17)).collect();
        let k1 = random_kernel(&mut rng, 5, 2, 3, 4, true);
        let k2 = random_kernel(&mut rng, 3, 5, 2, 3, true);
        let seq = conv2d(&conv2d(&input, &k1, Padding::Valid).unwrap(), &k2, Padding::Valid).unwrap();
        let fused = conv2d(&input, &compose_spatial(&k1, &k2).unwrap(), Padding::Valid).unwrap();
        for (a, b) in seq.iter().zip(&fused) {
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cholesky_solves_spd_and_rejects_singular() {
        let a = Matrix::new(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let b = Matrix::new(2, 1, vec![2.0, 1.0]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        let back = a.matmul(&x).unwrap();
        assert!((back.get(0, 0) - 2.0).abs() < 1e-12 && (back.get(1, 0) - 1.0).abs() < 1e-12);

        let s = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(cholesky_solve(&s, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn gemm_helpers_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 3, 5);
        let expected = a.matmul(&b).unwrap();
        let mut out = vec![0.0; 20];
        gemm_nt(a.values(), b.transpose().values(), 4, 3, 5, &mut out);
        for (x, y) in out.iter().zip(expected.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut out = vec![0.0; 20];
        gemm_tn_accumulate(a.transpose().values(), b.values(), 3, 4, 5, &mut out);
        for (x, y) in out.iter().zip(expected.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_and_crop() {
        let p = Plane::new(2, 2, 8, vec![-3.0, 12.6, 300.0, 5.0]).unwrap();
        assert_eq!(p.clipped().samples(), &[0.0, 13.0, 255.0, 5.0]);
        assert_eq!(p.crop(1, 0, 1, 2).unwrap().samples(), &[12.6, 5.0]);
        assert!(matches!(p.crop(1, 1, 2, 1), Err(Error::Bounds(_))));
    }
}
