//! Slice-level forward and backward kernels. Shapes are validated by the
//! callers in `ops`; everything here assumes consistent sizes.

use crate::scalar::Scalar;

/// Geometry of a batched `[B, C, H, W]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Chw {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Chw {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

// ---------------------------------------------------------------- conv 3x3

/// Unrolls 3x3 / pad 1 patches into `[C*9, B*H*W]`.
fn im2col<T: Scalar>(input: &[T], g: Chw) -> Vec<T> {
    let hw = g.plane();
    let cols_n = g.batch * hw;
    let mut cols = vec![T::zero(); g.channels * 9 * cols_n];
    for c in 0..g.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                for b in 0..g.batch {
                    let src = &input[(b * g.channels + c) * hw..][..hw];
                    let dst = &mut cols[row + b * hw..][..hw];
                    for y in 0..g.height {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= g.height as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..g.width {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < g.width as isize {
                                dst[y * g.width + x] = src[sy * g.width + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: Chw, grad_in: &mut [T]) {
    let hw = g.plane();
    let cols_n = g.batch * hw;
    for c in 0..g.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                for b in 0..g.batch {
                    let src = &cols[row + b * hw..][..hw];
                    let dst = &mut grad_in[(b * g.channels + c) * hw..][..hw];
                    for y in 0..g.height {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= g.height as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..g.width {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < g.width as isize {
                                dst[sy * g.width + sx as usize] += src[y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward<T: Scalar>(input: &[T], g: Chw, kernel: &[T], bias: &[T], out_channels: usize) -> Vec<T> {
    let hw = g.plane();
    let cols_n = g.batch * hw;
    let cols = im2col(input, g);
    let mut mat = vec![T::zero(); out_channels * cols_n];
    T::gemm(
        out_channels,
        g.channels * 9,
        cols_n,
        kernel,
        false,
        &cols,
        false,
        &mut mat,
        false,
    );
    let mut out = vec![T::zero(); g.batch * out_channels * hw];
    for b in 0..g.batch {
        for o in 0..out_channels {
            let src = &mat[o * cols_n + b * hw..][..hw];
            let dst = &mut out[(b * out_channels + o) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv3x3_backward<T: Scalar>(
    input: &[T],
    g: Chw,
    kernel: &[T],
    out_channels: usize,
    grad_out: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let hw = g.plane();
    let cols_n = g.batch * hw;
    let mut dmat = vec![T::zero(); out_channels * cols_n];
    for b in 0..g.batch {
        for o in 0..out_channels {
            let src = &grad_out[(b * out_channels + o) * hw..][..hw];
            dmat[o * cols_n + b * hw..][..hw].copy_from_slice(src);
        }
    }
    let bias = want[2].then(|| {
        (0..out_channels)
            .map(|o| T::from_f64_lossy(crate::scalar::sum_f64(&dmat[o * cols_n..][..cols_n])))
            .collect()
    });
    let kernel_grad = want[1].then(|| {
        let cols = im2col(input, g);
        let mut dk = vec![T::zero(); out_channels * g.channels * 9];
        T::gemm(
            out_channels,
            cols_n,
            g.channels * 9,
            &dmat,
            false,
            &cols,
            true,
            &mut dk,
            false,
        );
        dk
    });
    let input_grad = want[0].then(|| {
        let mut dcols = vec![T::zero(); g.channels * 9 * cols_n];
        T::gemm(
            g.channels * 9,
            out_channels,
            cols_n,
            kernel,
            true,
            &dmat,
            false,
            &mut dcols,
            false,
        );
        let mut dx = vec![T::zero(); input.len()];
        col2im_add(&dcols, g, &mut dx);
        dx
    });
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias,
    }
}

// ---------------------------------------------------------------- pooling

/// 2x2 / stride 2 max pool. Returns output and the flat input index of each
/// window's first row-major maximum.
pub(crate) fn maxpool2_forward<T: Scalar>(input: &[T], g: Chw) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.height / 2, g.width / 2);
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * g.plane();
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * g.width + 2 * j;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + dy) * g.width + 2 * j + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Cell boundaries `[floor(i*n/l), floor((i+1)*n/l))` for a pyramid level.
pub(crate) fn spp_bounds(n: usize, level: usize, i: usize) -> (usize, usize) {
    (i * n / level, (i + 1) * n / level)
}

/// Spatial pyramid max pooling. Output per batch item is laid out level by
/// level, each level as `[C, l, l]` row-major.
pub(crate) fn spp_forward<T: Scalar>(input: &[T], g: Chw, levels: &[usize]) -> (Vec<T>, Vec<usize>) {
    let per_item: usize = g.channels * levels.iter().map(|l| l * l).sum::<usize>();
    let mut out = Vec::with_capacity(g.batch * per_item);
    let mut arg = Vec::with_capacity(g.batch * per_item);
    for b in 0..g.batch {
        for &l in levels {
            for c in 0..g.channels {
                let base = (b * g.channels + c) * g.plane();
                for ci in 0..l {
                    let (r0, r1) = spp_bounds(g.height, l, ci);
                    for cj in 0..l {
                        let (c0, c1) = spp_bounds(g.width, l, cj);
                        let mut best = base + r0 * g.width + c0;
                        for y in r0..r1 {
                            for x in c0..c1 {
                                let idx = base + y * g.width + x;
                                if input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(input[best]);
                        arg.push(best);
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Routes output gradients back through recorded argmax positions.
pub(crate) fn scatter_argmax<T: Scalar>(grad_out: &[T], arg: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

// ---------------------------------------------------------------- batchnorm

/// Per-channel batch mean and biased variance, accumulated in f64.
pub(crate) fn channel_moments<T: Scalar>(input: &[T], g: Chw) -> (Vec<f64>, Vec<f64>) {
    let hw = g.plane();
    let count = (g.batch * hw) as f64;
    let mut mean = vec![0.0; g.channels];
    let mut var = vec![0.0; g.channels];
    for c in 0..g.channels {
        let mut s = 0.0;
        for b in 0..g.batch {
            s += crate::scalar::sum_f64(&input[(b * g.channels + c) * hw..][..hw]);
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..g.batch {
            for &x in &input[(b * g.channels + c) * hw..][..hw] {
                let d = x.as_f64() - m;
                v += d * d;
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// `y = scale * (x - mean) * inv_std + shift`, per channel.
pub(crate) fn affine_normalize<T: Scalar>(
    input: &[T],
    g: Chw,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[T],
    shift: &[T],
) -> Vec<T> {
    let hw = g.plane();
    let mut out = vec![T::zero(); input.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let off = (b * g.channels + c) * hw;
            let (m, s) = (mean[c], inv_std[c]);
            let (gm, bt) = (scale[c].as_f64(), shift[c].as_f64());
            for (o, &x) in out[off..off + hw].iter_mut().zip(&input[off..off + hw]) {
                *o = T::from_f64_lossy(gm * (x.as_f64() - m) * s + bt);
            }
        }
    }
    out
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

/// Backward of normalization. `batch_stats` selects whether mean and
/// variance were computed from this batch (training) or fixed (eval).
#[allow(clippy::too_many_arguments)]
pub(crate) fn normalize_backward<T: Scalar>(
    input: &[T],
    g: Chw,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[T],
    grad_out: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let hw = g.plane();
    let count = (g.batch * hw) as f64;
    let mut dx = vec![T::zero(); input.len()];
    let mut dscale = vec![T::zero(); g.channels];
    let mut dshift = vec![T::zero(); g.channels];
    for c in 0..g.channels {
        let (m, s, gm) = (mean[c], inv_std[c], scale[c].as_f64());
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..g.batch {
            let off = (b * g.channels + c) * hw;
            for i in off..off + hw {
                let dy = grad_out[i].as_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * (input[i].as_f64() - m) * s;
            }
        }
        dscale[c] = T::from_f64_lossy(sum_dy_xhat);
        dshift[c] = T::from_f64_lossy(sum_dy);
        for b in 0..g.batch {
            let off = (b * g.channels + c) * hw;
            for i in off..off + hw {
                let dy = grad_out[i].as_f64();
                let v = if batch_stats {
                    let xhat = (input[i].as_f64() - m) * s;
                    gm * s * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    gm * s * dy
                };
                dx[i] = T::from_f64_lossy(v);
            }
        }
    }
    NormGrads {
        input: dx,
        scale: dscale,
        shift: dshift,
    }
}

// ---------------------------------------------------------------- losses

/// Row-wise stabilized softmax in f64.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], rows: usize, cols: usize) -> Vec<f64> {
    let mut p = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..][..cols];
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x.as_f64() - max).exp();
            p[r * cols + j] = e;
            z += e;
        }
        for v in &mut p[r * cols..][..cols] {
            *v /= z;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spp_bounds_cover_the_axis() {
        for n in 1..20 {
            for l in 1..=n.min(5) {
                let mut next = 0;
                for i in 0..l {
                    let (a, b) = spp_bounds(n, l, i);
                    assert_eq!(a, next);
                    assert!(b > a, "empty cell n={n} l={l} i={i}");
                    next = b;
                }
                assert_eq!(next, n);
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let g = Chw {
            batch: 1,
            channels: 1,
            height: 2,
            width: 2,
        };
        let (out, arg) = maxpool2_forward(&[5.0f64, 5.0, 5.0, 5.0], g);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f32, 2.0, 3.0, 1000.0, 1000.0, 1000.0], 2, 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
