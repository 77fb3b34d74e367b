//! Dense kernels shared by the forward and backward rules.
//!
//! Convolutions go through `im2col`/`col2im` and a strided GEMM. Images are
//! channel-major `[C, H, W]` slices of a larger `[N, C, H, W]` buffer.

/// Geometry of a 2-D sliding window over an image of `in_h × in_w`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, outs: usize) -> (usize, usize) {
        // need 0 <= o*s + k - p < extent
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(outs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub(crate) fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (stride > 0 && k > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// `(n - 1) s - 2p + k`, the extent whose strided convolution has `n` outputs.
pub(crate) fn conv_transpose_out_extent(
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (n - 1) * stride + k;
    (stride > 0 && k > 0 && full > 2 * pad).then(|| full - 2 * pad)
}

pub(crate) fn im2col(img: &[f64], win: &Window, col: &mut [f64]) {
    let plane = win.col_cols();
    debug_assert_eq!(col.len(), win.col_rows() * plane);
    let s = win.stride;
    for c in 0..win.channels {
        let src = &img[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.kh {
            let (ylo, yhi) = win.valid(ki, win.in_h, win.out_h);
            for kj in 0..win.kw {
                let (xlo, xhi) = win.valid(kj, win.in_w, win.out_w);
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst[..ylo * win.out_w].fill(0.0);
                dst[yhi * win.out_w..].fill(0.0);
                for oy in ylo..yhi {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    let iy = oy * s + ki - win.pad;
                    let x0 = xlo * s + kj - win.pad;
                    let src_row = &src[iy * win.in_w..(iy + 1) * win.in_w];
                    if s == 1 {
                        line[xlo..xhi].copy_from_slice(&src_row[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (i, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src_row[x0 + i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
pub(crate) fn col2im(col: &[f64], win: &Window, img: &mut [f64]) {
    let plane = win.col_cols();
    let s = win.stride;
    for c in 0..win.channels {
        let dst = &mut img[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.kh {
            let (ylo, yhi) = win.valid(ki, win.in_h, win.out_h);
            for kj in 0..win.kw {
                let (xlo, xhi) = win.valid(kj, win.in_w, win.out_w);
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let line = &src[oy * win.out_w + xlo..oy * win.out_w + xhi];
                    let iy = oy * s + ki - win.pad;
                    let x0 = xlo * s + kj - win.pad;
                    let dst_row = &mut dst[iy * win.in_w..(iy + 1) * win.in_w];
                    if s == 1 {
                        for (d, v) in dst_row[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in line.iter().enumerate() {
                            dst_row[x0 + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a·b + beta·c` for `a: m×k`, `b: k×n`, row-major `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len());
    assert!(b.max_index(k, n) < b.data.len());
    // matrixmultiply is markedly faster with the long side as `m`, so a wide
    // product is computed as its transpose c^T = b^T a^T.
    let (m, n, a, b, rsc, csc) = if m < n {
        let at = View { data: b.data, rs: b.cs, cs: b.rs };
        let bt = View { data: a.data, rs: a.cs, cs: a.rs };
        (n, m, at, bt, 1, n)
    } else {
        (m, n, a, b, n, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
