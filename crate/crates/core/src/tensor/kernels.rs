//! Dense kernels shared by the forward and backward rules.

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe in-bounds row-major views of the slices, whose
    // lengths are checked above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` patch columns.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - pad;
                        dst[oy * ow + ox] = if y >= 0
                            && x >= 0
                            && (y as usize) < g.height
                            && (x as usize) < g.width
                        {
                            plane[y as usize * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && (x as usize) < g.width {
                            plane[y as usize * g.width + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
