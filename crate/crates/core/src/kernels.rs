//! Raw numeric kernels behind the graph operations.
//!
//! Convolutions run through a positions-major im2col: `col[pos][kdim]` with
//! kdim = C*k*k contiguous per output position. Every product then reduces to
//! either a long contiguous dot (forward) or a long contiguous axpy
//! (backward), which the compiler vectorizes well at every stage width. All
//! loops are in fixed order, so results are bit-reproducible per build.

use crate::graph::Real;

/// Dot product with eight independent accumulators (fixed combine order).
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n8 = (a.len() / 8) * 8;
    let mut acc = [T::zero(); 8];
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[n8..].iter().zip(&b[n8..]) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// y += alpha * x
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Positions-major im2col for one sample: input is C x H x W, output is
/// (H'*W') x (C*k*k) with row = output position in row-major order and
/// column = (c*k + ku)*k + kv.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let kdim = c * k * k;
    debug_assert_eq!(col.len(), ho * wo * kdim);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut col[(oy * wo + ox) * kdim..(oy * wo + ox + 1) * kdim];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ku in 0..k {
                    let iy = (oy * stride + ku) as isize - pad as isize;
                    let dst = &mut row[(ci * k + ku) * k..(ci * k + ku + 1) * k];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (kv, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kv) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add positions-major columns back into an input-shaped gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grad: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let kdim = c * k * k;
    debug_assert_eq!(col.len(), ho * wo * kdim);
    debug_assert_eq!(grad.len(), c * h * w);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &col[(oy * wo + ox) * kdim..(oy * wo + ox + 1) * kdim];
            for ci in 0..c {
                let plane = &mut grad[ci * h * w..(ci + 1) * h * w];
                for ku in 0..k {
                    let iy = (oy * stride + ku) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[(ci * k + ku) * k..(ci * k + ku + 1) * k];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (kv, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kv) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst_row[ix as usize] = dst_row[ix as usize] + v;
                    }
                }
            }
        }
    }
}

/// out[co][pos] = bias[co] + dot(weight[co], col[pos]) for all co, pos.
pub fn conv_forward_from_col<T: Real>(
    col: &[T],
    weight: &[T],
    bias: &[T],
    c_out: usize,
    kdim: usize,
    positions: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), c_out * positions);
    for (co, out_row) in out.chunks_exact_mut(positions).enumerate() {
        let w_row = &weight[co * kdim..(co + 1) * kdim];
        let b = bias[co];
        for (pos, o) in out_row.iter_mut().enumerate() {
            *o = b + dot(w_row, &col[pos * kdim..(pos + 1) * kdim]);
        }
    }
}

/// dW[co] += sum_pos dY[co][pos] * col[pos]; db[co] += sum_pos dY[co][pos].
pub fn conv_backward_params<T: Real>(
    col: &[T],
    gout: &[T],
    c_out: usize,
    kdim: usize,
    positions: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    debug_assert_eq!(gout.len(), c_out * positions);
    for (co, dy_row) in gout.chunks_exact(positions).enumerate() {
        let dw_row = &mut dw[co * kdim..(co + 1) * kdim];
        let mut bsum = T::zero();
        for (pos, &dy) in dy_row.iter().enumerate() {
            axpy(dy, &col[pos * kdim..(pos + 1) * kdim], dw_row);
            bsum = bsum + dy;
        }
        db[co] = db[co] + bsum;
    }
}

/// dcol[pos] += sum_co dY[co][pos] * W[co] (positions-major dcol).
pub fn conv_backward_col<T: Real>(
    weight: &[T],
    gout: &[T],
    c_out: usize,
    kdim: usize,
    positions: usize,
    dcol: &mut [T],
) {
    for co in 0..c_out {
        let w_row = &weight[co * kdim..(co + 1) * kdim];
        let dy_row = &gout[co * positions..(co + 1) * positions];
        for (pos, &dy) in dy_row.iter().enumerate() {
            axpy(dy, w_row, &mut dcol[pos * kdim..(pos + 1) * kdim]);
        }
    }
}
