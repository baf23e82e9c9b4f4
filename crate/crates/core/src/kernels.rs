//! Raw forward/backward loops over flat `C×H×W` buffers.
//!
//! These carry no shape checking; callers in [`crate::graph`] validate first.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    #[inline]
    fn span(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest ox with ox*s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // largest ox with ox*s + k - pad <= in_len - 1
        let lim = in_len + self.pad;
        let hi = if k >= lim { 0 } else { ((lim - 1 - k) / s + 1).min(out_len) };
        (lo, hi.max(lo))
    }
}

/// Lowers the receptive fields of `input` into a `(in_c·kh·kw) × (oh·ow)`
/// matrix; out-of-range taps are zero.
fn im2col<S: Scalar>(g: &ConvGeom, input: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut col = vec![S::zero(); g.in_c * g.kh * g.kw * p];
    for c in 0..g.in_c {
        let src = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (y0, y1) = g.span(ky, g.in_h, oh);
            for kx in 0..g.kw {
                let (x0, x1) = g.span(kx, g.in_w, ow);
                let r = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * p..(r + 1) * p];
                for oy in y0..y1 {
                    let row = &src[(oy * g.stride + ky - g.pad) * g.in_w..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        d[x0..x1].copy_from_slice(&row[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            d[ox] = row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], d_input: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_c {
        let dst = &mut d_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (y0, y1) = g.span(ky, g.in_h, oh);
            for kx in 0..g.kw {
                let (x0, x1) = g.span(kx, g.in_w, ow);
                let r = (c * g.kh + ky) * g.kw + kx;
                let src = &col[r * p..(r + 1) * p];
                for oy in y0..y1 {
                    let off = (oy * g.stride + ky - g.pad) * g.in_w;
                    let s = &src[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        dst[off + ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Cross-correlation as one matrix product over the lowered input.
pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], bias: &[S]) -> Vec<S> {
    let p = g.out_h() * g.out_w();
    let r = g.in_c * g.kh * g.kw;
    let mut out = Vec::with_capacity(g.out_c * p);
    for &b in &bias[..g.out_c] {
        out.extend(std::iter::repeat_n(b, p));
    }
    let lowered;
    let col = if is_pointwise(g) {
        input
    } else {
        lowered = im2col(g, input);
        &lowered
    };
    S::gemm(g.out_c, r, p, S::one(), (kernel, r, 1), (col, p, 1), S::one(), (&mut out, p, 1));
    out
}

/// Accumulates into `d_input`, `d_kernel`, `d_bias` (any may be `None`).
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    kernel: &[S],
    d_out: &[S],
    d_input: Option<&mut [S]>,
    d_kernel: Option<&mut [S]>,
    d_bias: Option<&mut [S]>,
) {
    let p = g.out_h() * g.out_w();
    let r = g.in_c * g.kh * g.kw;
    if let Some(db) = d_bias {
        for o in 0..g.out_c {
            db[o] += d_out[o * p..(o + 1) * p].iter().copied().sum::<S>();
        }
    }
    let pointwise = is_pointwise(g);
    if let Some(dk) = d_kernel {
        let lowered;
        let col = if pointwise {
            input
        } else {
            lowered = im2col(g, input);
            &lowered
        };
        // dK = dOut · colᵀ
        S::gemm(g.out_c, p, r, S::one(), (d_out, p, 1), (col, 1, p), S::one(), (dk, r, 1));
    }
    if let Some(di) = d_input {
        // dCol = Kᵀ · dOut
        if pointwise {
            S::gemm(r, g.out_c, p, S::one(), (kernel, 1, r), (d_out, p, 1), S::one(), (di, p, 1));
        } else {
            let mut dcol = vec![S::zero(); r * p];
            S::gemm(r, g.out_c, p, S::one(), (kernel, 1, r), (d_out, p, 1), S::zero(), (&mut dcol, p, 1));
            col2im_add(g, &dcol, di);
        }
    }
}

/// 2×2 stride-2 max pooling; returns values and the flat source index of each.
pub fn maxpool2_forward<S: Scalar>(c: usize, h: usize, w: usize, input: &[S]) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], bias: &[S]) -> Vec<S> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![S::zero(); g.out_c * oh * ow];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += kernel[((o * g.in_c + c) * g.kh + ky) * g.kw + kx]
                                    * input[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop_over_strides_and_pads() {
        let mut rng = crate::rng::Rng::seed(5);
        for stride in 1..=3 {
            for pad in 0..=2 {
                for k in [1, 3, 5] {
                    let g = ConvGeom {
                        in_c: 2,
                        in_h: 7,
                        in_w: 6,
                        out_c: 3,
                        kh: k,
                        kw: k,
                        stride,
                        pad,
                    };
                    if g.in_h + 2 * pad < k || g.in_w + 2 * pad < k {
                        continue;
                    }
                    let x: Vec<f64> = (0..2 * 7 * 6).map(|_| rng.normal()).collect();
                    let w: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.normal()).collect();
                    let b: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                    let fast = conv2d_forward(&g, &x, &w, &b);
                    let slow = naive(&g, &x, &w, &b);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (out, idx) = maxpool2_forward(1, 2, 4, &x);
        assert_eq!(out, vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
    }
}
