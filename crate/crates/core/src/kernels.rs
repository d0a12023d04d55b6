//! Raw numeric loops shared by the tape operations.
//!
//! All routines work on flat row-major slices and accumulate into their
//! output (`out += ...`) so they can serve both forward and backward passes.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    dgemm(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub(crate) fn gemm_at_b(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == k * m && b.len() == k * n && out.len() == m * n);
    dgemm(a, (1, m), b, (n, 1), out, m, k, n);
}

/// `out[m×n] += a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    dgemm(a, (k, 1), b, (1, k), out, m, k, n);
}

/// Strided `out += a · b`; strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
fn dgemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the callers check that every slice covers the index range
    // implied by its dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize, in_h: usize, in_w: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let span = dilation * (kernel - 1) + 1;
        let pad = |inp: usize, out: usize| ((out - 1) * stride + span).saturating_sub(inp) / 2;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top: pad(in_h, out_h),
            pad_left: pad(in_w, out_w),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + t * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Unfolds one `[c, h, w]` image into `[c·k·k, out_h·out_w]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, hw) = (g.kernel, g.col_cols());
    cols.fill(0.0);
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dilation, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dilation, g.pad_left, g.in_w) {
                            dst[oy * g.out_w + ox] = plane[iy * g.in_w + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c, h, w]` image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, hw) = (g.kernel, g.col_cols());
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dilation, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dilation, g.pad_left, g.in_w) {
                            plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear taps with half-pixel centers (align-corners = false).
///
/// Each output coordinate maps to `(i0, i1, frac)` so that the sampled
/// value is `(1 - frac)·v[i0] + frac·v[i1]`.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling of a single `[h, w]` plane.
pub fn resize_bilinear_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out[oy * out_w + ox] = (1.0 - fy) * top + fy * bottom;
        }
    }
    out
}

/// Nearest-neighbour resampling of a single `[h, w]` plane (half-pixel centers).
pub fn resize_nearest_plane<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let pick = |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = pick(oy, h, out_h);
        for ox in 0..out_w {
            out.push(src[sy * w + pick(ox, w, out_w)]);
        }
    }
    out
}
