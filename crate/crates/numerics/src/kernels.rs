use crate::element::Element;

/// `c (m×n) = op(a) · op(b) + beta·c`, where `op` optionally transposes a
/// row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths are checked above and `c` is a distinct mutable slice.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over one `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let span_h = (height + 2 * pad).checked_sub(kernel)?;
        let span_w = (width + 2 * pad).checked_sub(kernel)?;
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source pixel of `(ki, kj)` for output position `(oy, ox)`, if inside.
    #[cfg(test)]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Output columns `[lo, hi)` whose source column `ox*stride + kj - pad` lies
/// inside the image.
#[inline]
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    // largest ox with ox*stride + kj - pad <= width - 1
    let hi = if g.width + g.pad > kj {
        ((g.width + g.pad - kj - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn im2col<F: Element>(g: &ConvGeom, image: &[F], cols: &mut [F]) {
    let ncols = g.col_cols();
    let kk = g.kernel * g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = c * kk + ki * g.kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.out_h {
                    let out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let y = (oy * g.stride + ki).wrapping_sub(g.pad);
                    if y >= g.height {
                        out.fill(F::zero());
                        continue;
                    }
                    out[..lo].fill(F::zero());
                    out[hi..].fill(F::zero());
                    let src = &plane[y * g.width..(y + 1) * g.width];
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (i, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[x0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column entries back, summing overlaps.
pub(crate) fn col2im<F: Element>(g: &ConvGeom, cols: &[F], image: &mut [F]) {
    let ncols = g.col_cols();
    let kk = g.kernel * g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = c * kk + ki * g.kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki).wrapping_sub(g.pad);
                    if y >= g.height {
                        continue;
                    }
                    let inp = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let x0 = lo * g.stride + kj - g.pad;
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + inp.len()].iter_mut().zip(inp) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in inp.iter().enumerate() {
                            let d = &mut dst[x0 + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}
