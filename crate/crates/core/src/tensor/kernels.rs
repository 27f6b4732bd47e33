//! Loop kernels shared by the forward and backward passes of the tape.

use super::Element;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image `[C,H,W]` into `[C*kh*kw, OH*OW]`.
fn im2col<T: Element>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[C*kh*kw, OH*OW]` back onto one image, accumulating overlaps.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T]) -> Vec<T> {
    let (rows, ohw) = (g.col_rows(), g.out_hw());
    let img_len = g.in_c * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.out_c * ohw];
    let mut col = vec![T::zero(); rows * ohw];
    for b in 0..g.batch {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut col);
        let dst = &mut out[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
        T::gemm(
            g.out_c, rows, ohw, weight, rows as isize, 1, &col, ohw as isize, 1, T::zero(), dst,
            ohw as isize, 1,
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, ohw) = (g.col_rows(), g.out_hw());
    let img_len = g.in_c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let mut col = vec![T::zero(); rows * ohw];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * img_len..(b + 1) * img_len], &mut col);
            // dW[O, rows] += dY[O, ohw] * col^T
            T::gemm(
                g.out_c, ohw, rows, dy_b, ohw as isize, 1, &col, 1, ohw as isize, T::one(), dw,
                rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[rows, ohw] = W^T * dY
            T::gemm(
                rows, g.out_c, ohw, weight, 1, rows as isize, dy_b, ohw as isize, 1, T::zero(),
                &mut col, ohw as isize, 1,
            );
            col2im(g, &col, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }
    (dx, dw)
}

/// Split `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..len {
            let src = &x[(o * len + j) * inner..][..inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Max along an axis; ties resolve to the first index.
pub(crate) fn max_axis<T: Element>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut vals = vec![T::neg_infinity(); outer * inner];
    let mut idx = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let slot = o * inner + i;
            for j in 0..len {
                let v = x[(o * len + j) * inner + i];
                if j == 0 || v > vals[slot] {
                    vals[slot] = v;
                    idx[slot] = j;
                }
            }
        }
    }
    (vals, idx)
}

/// Maps every output position of a broadcast to its source position.
pub(crate) fn broadcast_index(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let offset = dst_shape.len() - src_shape.len();
    let mut src_strides = vec![0usize; dst_shape.len()];
    let mut stride = 1;
    for d in (0..src_shape.len()).rev() {
        src_strides[d + offset] = if src_shape[d] == 1 { 0 } else { stride };
        stride *= src_shape[d];
    }
    let numel: usize = dst_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; dst_shape.len()];
    for _ in 0..numel {
        map.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for d in (0..dst_shape.len()).rev() {
            counter[d] += 1;
            if counter[d] < dst_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    map
}

/// Bin bounds of adaptive pooling along one axis.
pub(crate) fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

pub(crate) fn zero_pad<T: Element>(x: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..][..w];
            out[(p * ph + y + pad) * pw + pad..][..w].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn unpad<T: Element>(dy: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            out.extend_from_slice(&dy[(p * ph + y + pad) * pw + pad..][..w]);
        }
    }
    out
}

/// Per-channel mean and biased variance of an `[B, C, S]` layout.
pub(crate) fn channel_stats<T: Element>(x: &[T], batch: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(batch * s).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..batch {
            acc += x[(b * c + ch) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = acc / (batch * s) as f64;
        let mut sq = 0.0f64;
        for b in 0..batch {
            sq += x[(b * c + ch) * s..][..s]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::from_f64_lossy(mu);
        var[ch] = T::from_f64_lossy(sq) / m;
    }
    (mean, var)
}
