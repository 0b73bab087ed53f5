//! 3x3 convolution kernels: per-image im2col plus GEMM.
//!
//! Layouts are row-major throughout: images [N,C,H,W], weights
//! [Cout,Cin,3,3] (a ready-made [Cout, Cin*9] matrix), column buffers
//! [Cin*9, Ho*Wo]. Padding is a fixed one-pixel zero border so stride 1
//! preserves the spatial size and stride 2 halves it (rounding up).

use super::Elem;

pub const K: usize = 3;
pub const PAD: usize = 1;

/// Output spatial extent for one axis.
pub fn out_extent(len: usize, stride: usize) -> usize {
    (len + 2 * PAD - K) / stride + 1
}

/// Expands one image [C,H,W] into columns [C*9, Ho*Wo].
///
/// At stride 1 each (ky,kx) row of the column matrix is the source row
/// shifted by one pixel, so the hot path is plain slice copies with a
/// zeroed border instead of a bounds test per element.
fn im2col<E: Elem>(x: &[E], c: usize, h: usize, w: usize, stride: usize, cols: &mut [E]) {
    let ho = out_extent(h, stride);
    let wo = out_extent(w, stride);
    debug_assert_eq!(cols.len(), c * K * K * ho * wo);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * K + ky) * K + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    let dst = &mut row[oy * wo..][..wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    if stride == 1 {
                        match kx {
                            0 => {
                                dst[0] = E::ZERO;
                                dst[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..]);
                                dst[w - 1] = E::ZERO;
                            }
                        }
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns [C*9, Ho*Wo] back onto an image gradient [C,H,W].
///
/// Mirrors the im2col fast path: at stride 1 every (ky,kx) row lands on
/// the destination row shifted by one pixel, so the adds vectorize. The
/// per-element accumulation order matches the generic path exactly.
fn col2im_add<E: Elem>(cols: &[E], c: usize, h: usize, w: usize, stride: usize, dx: &mut [E]) {
    let ho = out_extent(h, stride);
    let wo = out_extent(w, stride);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * K + ky) * K + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    if stride == 1 {
                        let (d, s) = match kx {
                            0 => (&mut dst[..w - 1], &src[1..]),
                            1 => (&mut dst[..], &src[..]),
                            _ => (&mut dst[1..], &src[..w - 1]),
                        };
                        for (d, s) in d.iter_mut().zip(s) {
                            *d = *d + *s;
                        }
                        continue;
                    }
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] = dst[ix as usize] + *s;
                        }
                    }
                }
            }
        }
    }
}

/// Reusable column buffers shared across every convolution on a tape.
/// `cols` holds the im2col expansion; `tr` holds its transpose for the
/// weight-gradient product, which would otherwise force the GEMM to pack
/// a strided operand at roughly half speed.
pub struct ConvScratch<E: Elem> {
    cols: Vec<E>,
    tr: Vec<E>,
}

impl<E: Elem> Default for ConvScratch<E> {
    fn default() -> Self {
        ConvScratch { cols: Vec::new(), tr: Vec::new() }
    }
}

/// Grows `buf` as needed and hands back the first `len` elements. Callers
/// overwrite the whole region, so stale contents never leak through.
fn scratch<E: Elem>(buf: &mut Vec<E>, len: usize) -> &mut [E] {
    if buf.len() < len {
        buf.resize(len, E::ZERO);
    }
    &mut buf[..len]
}

/// Transposes a row-major [rows, cols] matrix into `dst` as [cols, rows],
/// in cache-friendly square tiles.
fn transpose_into<E: Elem>(src: &[E], rows: usize, cols: usize, dst: &mut [E]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                let row = &src[r * cols..][..cols];
                for c in c0..c1 {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

/// Forward pass over a whole batch. `out` must hold [N, Cout, Ho, Wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<E: Elem>(
    x: &[E],
    weight: &[E],
    bias: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
    buf: &mut ConvScratch<E>,
    out: &mut [E],
) {
    let ho = out_extent(h, stride);
    let wo = out_extent(w, stride);
    let ck = cin * K * K;
    let px = ho * wo;
    let cols = scratch(&mut buf.cols, ck * px);
    for i in 0..n {
        im2col(&x[i * cin * h * w..][..cin * h * w], cin, h, w, stride, cols);
        let dst = &mut out[i * cout * px..][..cout * px];
        unsafe {
            E::gemm(
                cout, ck, px, E::ONE,
                weight.as_ptr(), ck as isize, 1,
                cols.as_ptr(), px as isize, 1,
                E::ZERO,
                dst.as_mut_ptr(), px as isize, 1,
            );
        }
        for co in 0..cout {
            let b = bias[co];
            for v in &mut dst[co * px..(co + 1) * px] {
                *v = *v + b;
            }
        }
    }
}

/// Backward pass; accumulates into `dx`, `dw`, `db` (never overwrites).
/// Any of the three may be `None` when that input does not need a gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Elem>(
    x: &[E],
    weight: &[E],
    grad_out: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
    buf: &mut ConvScratch<E>,
    dx: Option<&mut [E]>,
    mut dw: Option<&mut [E]>,
    mut db: Option<&mut [E]>,
) {
    let ho = out_extent(h, stride);
    let wo = out_extent(w, stride);
    let ck = cin * K * K;
    let px = ho * wo;
    if let Some(db) = db.as_deref_mut() {
        for i in 0..n {
            let g = &grad_out[i * cout * px..][..cout * px];
            for co in 0..cout {
                let mut acc = 0.0f64;
                for v in &g[co * px..(co + 1) * px] {
                    acc += v.to_f64();
                }
                db[co] = db[co] + E::from_f64(acc);
            }
        }
    }
    let cols = scratch(&mut buf.cols, ck * px);
    if let Some(dw) = dw.as_deref_mut() {
        let tr = scratch(&mut buf.tr, ck * px);
        for i in 0..n {
            im2col(&x[i * cin * h * w..][..cin * h * w], cin, h, w, stride, cols);
            transpose_into(cols, ck, px, tr);
            let g = &grad_out[i * cout * px..][..cout * px];
            unsafe {
                E::gemm(
                    cout, px, ck, E::ONE,
                    g.as_ptr(), px as isize, 1,
                    tr.as_ptr(), ck as isize, 1,
                    E::ONE,
                    dw.as_mut_ptr(), ck as isize, 1,
                );
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let g = &grad_out[i * cout * px..][..cout * px];
            unsafe {
                E::gemm(
                    ck, cout, px, E::ONE,
                    weight.as_ptr(), 1, ck as isize,
                    g.as_ptr(), px as isize, 1,
                    E::ZERO,
                    cols.as_mut_ptr(), px as isize, 1,
                );
            }
            col2im_add(cols, cin, h, w, stride, &mut dx[i * cin * h * w..][..cin * h * w]);
        }
    }
}
