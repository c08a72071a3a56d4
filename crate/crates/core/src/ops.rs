//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function of its inputs. The [`crate::tape`]
//! module records these kernels and calls the matching adjoints during the
//! backward pass.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded correlation along one axis.
fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Range of output positions `o` whose input position `o*stride + tap - pad`
/// falls inside `0..len`.
fn valid_range(
    out_len: usize,
    len: usize,
    tap: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi_num = len as isize - 1 + pad as isize - tap as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c_in, h, w) = input.chw()?;
    let (c_out, kc, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(shape_err(
                "conv2d",
                format!("kernel shape {:?}", kernel.shape()),
            ))
        }
    };
    if kc != c_in {
        return Err(shape_err(
            "conv2d",
            format!("input has {c_in} channels, kernel expects {kc}"),
        ));
    }
    if kh != kw {
        return Err(shape_err("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out: conv_out_len(h, kh, stride, pad),
        w_out: conv_out_len(w, kw, stride, pad),
        stride,
        pad,
    })
}

/// Row-major `c = a * b` for an `m x k` by `k x n` product, with explicit
/// row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let last =
        |(rs, cs): (usize, usize), rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(a_strides, m, k) < a.len() && last(b_strides, k, n) < b.len());
    // SAFETY: the asserts above keep every strided read in bounds, and `c` is
    // an exclusively borrowed dense m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Unfolds the input into a `[C_in*k*k, H_out*W_out]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * plane];
    for ci in 0..g.c_in {
        let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h_out, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w_out, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &in_plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let in_plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h_out, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w_out, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    let dst = &mut in_plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let cols = im2col(input.data(), &g);
    let (r, p) = (g.c_in * g.k * g.k, g.h_out * g.w_out);
    let out = gemm(g.c_out, r, p, kernel.data(), (r, 1), &cols, (p, 1));
    Tensor::new(&[g.c_out, g.h_out, g.w_out], out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input(
    input_shape: &[usize],
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let g = conv_geom(&probe, kernel, stride, pad)?;
    let (r, p) = (g.c_in * g.k * g.k, g.h_out * g.w_out);
    if grad_out.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(shape_err(
            "conv2d_grad_input",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let cols = gemm(
        r,
        g.c_out,
        p,
        kernel.data(),
        (1, r),
        grad_out.data(),
        (p, 1),
    );
    Tensor::new(input_shape, col2im(&cols, &g))
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_grad_kernel(
    input: &Tensor,
    kernel_shape: &[usize],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let probe = Tensor::zeros(kernel_shape);
    let g = conv_geom(input, &probe, stride, pad)?;
    let (r, p) = (g.c_in * g.k * g.k, g.h_out * g.w_out);
    if grad_out.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(shape_err(
            "conv2d_grad_kernel",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let cols = im2col(input.data(), &g);
    let gk = gemm(g.c_out, p, r, grad_out.data(), (p, 1), &cols, (1, p));
    Tensor::new(kernel_shape, gk)
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if bias.len() != c {
        return Err(shape_err(
            "add_bias",
            format!("{} biases for {c} channels", bias.len()),
        ));
    }
    let mut out = input.clone();
    let plane = h * w;
    for (ch, &b) in bias.data().iter().enumerate() {
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
    Ok(out)
}

/// Splits a 2-D or 3-D tensor into `(planes, H, W)`.
fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(
            "box_filter",
            format!("expected [H,W] or [C,H,W], got {:?}", t.shape()),
        )),
    }
}

/// Sum over the clipped window `[i-r, i+r]` along a strided line, for every `i`.
fn window_sums_1d(src: &[f64], dst: &mut [f64], r: usize, prefix: &mut Vec<f64>) {
    let n = src.len();
    prefix.clear();
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in src {
        acc += v;
        prefix.push(acc);
    }
    for (i, d) in dst.iter_mut().enumerate().take(n) {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        *d = prefix[hi] - prefix[lo];
    }
}

/// Clipped window sums over the last two dimensions (no normalization).
fn window_sums(t: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = planes(t)?;
    let mut out = vec![0.0; t.len()];
    let mut prefix = Vec::with_capacity(h.max(w) + 1);
    let mut col_src = vec![0.0; h];
    let mut col_dst = vec![0.0; h];
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = &t.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            window_sums_1d(
                &src[y * w..(y + 1) * w],
                &mut tmp[y * w..(y + 1) * w],
                radius,
                &mut prefix,
            );
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for x in 0..w {
            for y in 0..h {
                col_src[y] = tmp[y * w + x];
            }
            window_sums_1d(&col_src, &mut col_dst, radius, &mut prefix);
            for y in 0..h {
                dst[y * w + x] = col_dst[y];
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Number of pixels in the clipped window around each position of an `h x w` grid.
fn window_counts(h: usize, w: usize, radius: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + radius + 1).min(n) - i.saturating_sub(radius)) as f64;
    let mut counts = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = span(y, h);
        for x in 0..w {
            counts.push(sy * span(x, w));
        }
    }
    counts
}

fn check_radius(h: usize, w: usize, radius: usize) -> Result<()> {
    if radius > h && radius > w {
        return Err(Error::InvalidArgument(format!(
            "box filter radius {radius} exceeds both image extents {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean over the `(2r+1)^2` window around each pixel, clipped at the borders
/// and normalized by the number of pixels actually inside the image.
///
/// Accepts `[H,W]` or `[C,H,W]`; channels are filtered independently.
pub fn box_filter(t: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = planes(t)?;
    check_radius(h, w, radius)?;
    if radius == 0 {
        return Ok(t.clone());
    }
    let mut sums = window_sums(t, radius)?;
    let counts = window_counts(h, w, radius);
    for ch in 0..c {
        for (v, n) in sums.data_mut()[ch * h * w..(ch + 1) * h * w]
            .iter_mut()
            .zip(&counts)
        {
            *v /= n;
        }
    }
    Ok(sums)
}

/// Adjoint of [`box_filter`]: window membership is symmetric, so the VJP is a
/// window sum of the output gradient divided by each output's window size.
pub fn box_filter_grad(grad_out: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = planes(grad_out)?;
    if radius == 0 {
        return Ok(grad_out.clone());
    }
    let counts = window_counts(h, w, radius);
    let mut scaled = grad_out.clone();
    for ch in 0..c {
        for (v, n) in scaled.data_mut()[ch * h * w..(ch + 1) * h * w]
            .iter_mut()
            .zip(&counts)
        {
            *v /= n;
        }
    }
    window_sums(&scaled, radius)
}

/// Nearest-neighbour 2x upsampling of `[C,H,W]`.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = input.at3(ch, y / 2, x / 2);
            }
        }
    }
    Tensor::new(&[c, h2, w2], out)
}

pub fn upsample2x_grad(grad_out: &Tensor) -> Result<Tensor> {
    let (c, h2, w2) = grad_out.chw()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let v = grad_out.at3(ch, y, x);
                let cur = g.at3(ch, y / 2, x / 2);
                g.set3(ch, y / 2, x / 2, cur + v);
            }
        }
    }
    Ok(g)
}

/// Mean over non-overlapping `f x f` blocks.
pub fn avg_pool(input: &Tensor, f: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(shape_err(
            "avg_pool",
            format!("{h}x{w} not divisible by {f}"),
        ));
    }
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let cur = out.at3(ch, y / f, x / f);
                out.set3(ch, y / f, x / f, cur + input.at3(ch, y, x) * norm);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_grad(grad_out: &Tensor, f: usize) -> Result<Tensor> {
    let (c, ho, wo) = grad_out.chw()?;
    let norm = 1.0 / (f * f) as f64;
    let (h, w) = (ho * f, wo * f);
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        grad_out.at3(ch, y / f, x / f) * norm
    }))
}

/// Area-weighted resampling of `[C,H,W]` to `[C,out_h,out_w]`: every output
/// pixel is the overlap-weighted mean of the input pixels it covers.
pub fn area_resample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("area_resample to empty size".into()));
    }
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let a = o as f64 * scale;
                let b = (o + 1) as f64 * scale;
                let mut taps = Vec::new();
                let first = a.floor() as usize;
                let last = (b.ceil() as usize).min(n_in);
                for i in first..last {
                    let overlap = (b.min((i + 1) as f64) - a.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                }
                taps
            })
            .collect()
    };
    let wy = weights(h, out_h);
    let wx = weights(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (oy, ty) in wy.iter().enumerate() {
            for (ox, tx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, a) in ty {
                    for &(ix, b) in tx {
                        acc += a * b * input.at3(ch, iy, ix);
                    }
                }
                out.set3(ch, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Precomputed bilinear taps mapping an input plane to an output plane.
///
/// Each output pixel reads up to four input pixels; taps that fall outside the
/// input carry zero weight, so out-of-range samples read as zero.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl SamplingPlan {
    /// Builds a plan from a function returning the continuous input pixel
    /// coordinate `(row, col)` to sample for every output pixel.
    pub fn from_coords(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut coord: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut t = [(0u32, 0.0); 4];
                if let Some((r, c)) = coord(oy, ox) {
                    let (r, c) = (snap(r), snap(c));
                    let r0 = r.floor();
                    let c0 = c.floor();
                    let fr = r - r0;
                    let fc = c - c0;
                    let corners = [
                        (r0, c0, (1.0 - fr) * (1.0 - fc)),
                        (r0, c0 + 1.0, (1.0 - fr) * fc),
                        (r0 + 1.0, c0, fr * (1.0 - fc)),
                        (r0 + 1.0, c0 + 1.0, fr * fc),
                    ];
                    for (slot, &(rr, cc, wgt)) in t.iter_mut().zip(&corners) {
                        if wgt != 0.0
                            && rr >= 0.0
                            && cc >= 0.0
                            && (rr as usize) < in_h
                            && (cc as usize) < in_w
                        {
                            *slot = ((rr as usize * in_w + cc as usize) as u32, wgt);
                        }
                    }
                }
                taps.push(t);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        if (h, w) != (self.in_h, self.in_w) {
            return Err(shape_err(
                "sample",
                format!("plan expects {}x{}, got {h}x{w}", self.in_h, self.in_w),
            ));
        }
        let plane_out = self.out_h * self.out_w;
        let mut out = vec![0.0; c * plane_out];
        for ch in 0..c {
            let src = input.channel(ch);
            for (o, taps) in out[ch * plane_out..(ch + 1) * plane_out]
                .iter_mut()
                .zip(&self.taps)
            {
                let mut acc = 0.0;
                for &(idx, wgt) in taps {
                    if wgt != 0.0 {
                        acc += wgt * src[idx as usize];
                    }
                }
                *o = acc;
            }
        }
        Tensor::new(&[c, self.out_h, self.out_w], out)
    }

    pub fn apply_grad(&self, grad_out: &Tensor) -> Result<Tensor> {
        let (c, _, _) = grad_out.chw()?;
        let plane_out = self.out_h * self.out_w;
        let plane_in = self.in_h * self.in_w;
        let mut gin = vec![0.0; c * plane_in];
        for ch in 0..c {
            let g = &grad_out.data()[ch * plane_out..(ch + 1) * plane_out];
            let dst = &mut gin[ch * plane_in..(ch + 1) * plane_in];
            for (&go, taps) in g.iter().zip(&self.taps) {
                for &(idx, wgt) in taps {
                    if wgt != 0.0 {
                        dst[idx as usize] += wgt * go;
                    }
                }
            }
        }
        Tensor::new(&[c, self.in_h, self.in_w], gin)
    }
}

/// Peak signal-to-noise ratio in dB over the flat indices selected by `keep`.
///
/// `range` is the peak-to-peak signal range (2 for images in [-1, 1]).
/// Identical inputs give `f64::INFINITY`.
pub fn psnr_where(a: &Tensor, b: &Tensor, range: f64, keep: impl Fn(usize) -> bool) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if keep(i) {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "psnr over an empty selection".into(),
        ));
    }
    Ok(10.0 * (range * range / (se / n as f64)).log10())
}

pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    psnr_where(a, b, range, |_| true)
}

/// Rounds coordinates that are within 1e-9 of an integer, so exact
/// pixel-aligned mappings reproduce their input bit for bit.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}
