//! Raw forward/backward kernels over flat NCHW buffers.

use super::Real;

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[C*KH*KW, B*OH*OW]` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let ncols = g.columns();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[b * ohw..(b + 1) * ohw];
                    for oy in 0..oh {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        // valid ox range: 0 <= ox + kj - pad < width
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((g.width as isize + pad - kj as isize).min(ow as isize)).max(0)
                            as usize;
                        for ox in lo..hi {
                            dst_row[ox] = src_row[ox + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let ncols = g.columns();
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst =
                        &mut dx[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[b * ohw..(b + 1) * ohw];
                    for oy in 0..oh {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src_row = &src[oy * ow..(oy + 1) * ow];
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((g.width as isize + pad - kj as isize).min(ow as isize)).max(0)
                            as usize;
                        for ox in lo..hi {
                            dst_row[ox + kj - g.pad] = dst_row[ox + kj - g.pad] + src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output NCHW, im2col matrix)`.
pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, x);
    let ncols = g.columns();
    let k = g.patch();
    let mut mat = vec![T::zero(); g.out_ch * ncols];
    T::gemm(
        g.out_ch,
        k,
        ncols,
        T::one(),
        w,
        (k as isize, 1),
        &cols,
        (ncols as isize, 1),
        T::zero(),
        &mut mat,
        (ncols as isize, 1),
    );
    (
        ob_to_bo(&mat, g.out_ch, g.batch, g.out_h() * g.out_w()),
        cols,
    )
}

/// Gradients of a convolution. `dx` is only computed when requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    w: &[T],
    cols: &[T],
    dy: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let ncols = g.columns();
    let k = g.patch();
    let dmat = ob_to_bo(dy, g.batch, g.out_ch, g.out_h() * g.out_w());
    let mut dw = vec![T::zero(); g.out_ch * k];
    T::gemm(
        g.out_ch,
        ncols,
        k,
        T::one(),
        &dmat,
        (ncols as isize, 1),
        cols,
        (1, ncols as isize),
        T::zero(),
        &mut dw,
        (k as isize, 1),
    );
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); k * ncols];
        T::gemm(
            k,
            g.out_ch,
            ncols,
            T::one(),
            w,
            (1, k as isize),
            &dmat,
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        let mut dx = vec![T::zero(); g.batch * g.in_ch * g.height * g.width];
        col2im(g, &dcols, &mut dx);
        dx
    });
    (dx, dw)
}

/// Swaps the two outer axes of an `[outer, inner, plane]` buffer.
fn ob_to_bo<T: Real>(src: &[T], outer: usize, inner: usize, plane: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let s = &src[(o * inner + i) * plane..][..plane];
            dst[(i * outer + o) * plane..][..plane].copy_from_slice(s);
        }
    }
    dst
}

/// 2x2 stride-2 max pool. Odd trailing rows/columns are dropped.
pub(crate) fn maxpool2x2_forward<T: Real>(
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) struct BnBatch<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

/// Batch-statistics normalization over N, H, W for each channel.
pub(crate) fn batchnorm_train<T: Real>(
    n: usize,
    c: usize,
    hw: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
) -> BnBatch<T> {
    let m = n * hw;
    let mf = T::from_usize(m).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * hw..][..hw] {
                ss = ss + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = ss / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let var_unbiased = if m > 1 {
        let denom = T::from_usize(m - 1).unwrap();
        var.iter().map(|&v| v * mf / denom).collect()
    } else {
        var.clone()
    };
    BnBatch {
        y,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    }
}

/// Per-channel sums over N, H, W.
pub(crate) fn channel_sums<T: Real>(
    n: usize,
    c: usize,
    hw: usize,
    a: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for bi in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (bi * c + ch) * hw;
            *o = *o
                + match b {
                    Some(b) => a[off..off + hw]
                        .iter()
                        .zip(&b[off..off + hw])
                        .map(|(&p, &q)| p * q)
                        .sum(),
                    None => a[off..off + hw].iter().copied().sum(),
                };
        }
    }
    out
}
