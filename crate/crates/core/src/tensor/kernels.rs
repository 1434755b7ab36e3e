//! Raw numeric kernels shared by forward and backward rules.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a` is stored `m × k` (or `k × m` when `ta`), `b` is stored `k × n` (or
/// `n × k` when `tb`). When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: slice lengths are checked above against the dimensions and
    // strides passed to the kernel, which only reads/writes within them.
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

/// Geometry of a channel-last sliding window over a `(height, width, channels)`
/// image. Positions form a `(pos_h, pos_w)` grid; position `(py, px)` with
/// tap `(ky, kx)` touches image cell `(py·sh − ph + ky, px·sw − pw + kx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub pos_h: usize,
    pub pos_w: usize,
}

impl Window {
    pub fn positions(&self) -> usize {
        self.pos_h * self.pos_w
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, Option<usize>)) {
        // f(col_index, image_offset_of_channel_0)
        let c = self.channels;
        let mut col = 0;
        for py in 0..self.pos_h {
            for px in 0..self.pos_w {
                for ky in 0..self.kh {
                    let y = (py * self.sh + ky) as isize - self.ph as isize;
                    for kx in 0..self.kw {
                        let x = (px * self.sw + kx) as isize - self.pw as isize;
                        let inside = y >= 0
                            && x >= 0
                            && (y as usize) < self.img_h
                            && (x as usize) < self.img_w;
                        let off = inside.then(|| (y as usize * self.img_w + x as usize) * c);
                        f(col, off);
                        col += c;
                    }
                }
            }
        }
    }

    /// Gather image windows into a `(positions, kh·kw·channels)` matrix.
    pub fn im2col(&self, img: &[f64]) -> Vec<f64> {
        debug_assert_eq!(img.len(), self.img_h * self.img_w * self.channels);
        let c = self.channels;
        let mut cols = vec![0.0; self.positions() * self.patch_len()];
        self.visit(|col, off| {
            if let Some(off) = off {
                cols[col..col + c].copy_from_slice(&img[off..off + c]);
            }
        });
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatter-add columns back into an image.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        debug_assert_eq!(cols.len(), self.positions() * self.patch_len());
        debug_assert_eq!(img.len(), self.img_h * self.img_w * self.channels);
        let c = self.channels;
        self.visit(|col, off| {
            if let Some(off) = off {
                for (dst, src) in img[off..off + c].iter_mut().zip(&cols[col..col + c]) {
                    *dst += src;
                }
            }
        });
    }
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad_total: usize) -> Option<usize> {
    let padded = len + pad_total;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

pub(crate) fn conv_transpose_out_len(
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    ((len - 1) * stride + k)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
}

/// Depthwise 1D convolution over a `(len, channels)` sequence with a
/// `(channels, k)` kernel and asymmetric zero padding.
pub fn depthwise1d(
    x: &[f64],
    len: usize,
    channels: usize,
    w: &[f64],
    k: usize,
    pad_left: usize,
    out: &mut [f64],
) {
    for i in 0..len {
        let row = &mut out[i * channels..(i + 1) * channels];
        for tap in 0..k {
            let src = i as isize + tap as isize - pad_left as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let xs = &x[src as usize * channels..(src as usize + 1) * channels];
            for (ch, (o, xv)) in row.iter_mut().zip(xs).enumerate() {
                *o += xv * w[ch * k + tap];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            img_h: 5,
            img_w: 6,
            channels: 2,
            kh: 3,
            kw: 3,
            sh: 2,
            sw: 2,
            ph: 1,
            pw: 1,
            pos_h: 3,
            pos_w: 3,
        };
        let img: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let cols_probe: Vec<f64> = (0..win.positions() * win.patch_len())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let cols = win.im2col(&img);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        win.col2im(&cols_probe, &mut back);
        let rhs: f64 = back.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn output_length_arithmetic() {
        assert_eq!(conv_out_len(32, 7, 4, 6), Some(8));
        assert_eq!(conv_out_len(8, 4, 4, 0), Some(2));
        assert_eq!(conv_transpose_out_len(8, 4, 2, 1), Some(16));
        assert_eq!(conv_transpose_out_len(16, 4, 2, 1), Some(32));
    }
}
