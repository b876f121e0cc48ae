//! Dense f32 kernels behind the graph ops: three matmul orientations plus
//! im2col/col2im. Loop order is fixed so results are bit-reproducible; the
//! inner loops are written over contiguous slices so they vectorize.

/// c[m][n] += sum_k a[m][k] * b[k][n]
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let crow = &mut c[mi * n..(mi + 1) * n];
        let arow = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[ki * n..(ki + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m][n] += dot(a[m][..], b[n][..]); i.e. c = a * b^T with b stored row-major [n][k].
pub fn matmul_abt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let crow = &mut c[mi * n..(mi + 1) * n];
        for ni in 0..n {
            let brow = &b[ni * k..(ni + 1) * k];
            crow[ni] += dot(arow, brow);
        }
    }
}

/// c[m][n] += sum_k a[k][m] * b[k][n]; i.e. c = a^T * b with a stored [k][m].
pub fn matmul_atb(a: &[f32], b: &[f32], c: &mut [f32], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for ki in 0..k {
        let arow = &a[ki * m..(ki + 1) * m];
        let brow = &b[ki * n..(ki + 1) * n];
        for (mi, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[mi * n..(mi + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Unrolled dot product with four lanes; fixed association order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv: input {input} + 2*pad {pad} smaller than kernel {k}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Lower one sample [c,h,w] into columns [c*kh*kw][ho*wo] (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let n = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * n..((ci * kh + ki) * kw + kj + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [c*kh*kw][ho*wo] back onto a sample gradient [c,h,w].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut [f32],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    debug_assert_eq!(gx.len(), c * h * w);
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * n..((ci * kh + ki) * kw + kj + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
