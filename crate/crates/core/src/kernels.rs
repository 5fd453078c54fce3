//! Raw numeric kernels on flat slices. All loops use a fixed summation
//! order per output element so results are deterministic under any thread
//! count.

use crate::parallel::{pool, PAR_THRESHOLD};
use crate::tensor::Element;
use rayon::prelude::*;

/// out[m x n] = a[m x k] . b[k x n]
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        pool().install(|| {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(i, out_row));
        });
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
    out
}

/// out[m x n] = a[m x k] . b[n x k]^T
pub fn matmul_bt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        pool().install(|| {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(i, out_row));
        });
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
    out
}

/// out[k x n] = a[m x k]^T . c[m x n]
pub fn matmul_at<E: Element>(a: &[E], c: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    let row = |p: usize, out_row: &mut [E]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let c_row = &c[i * n..(i + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o = *o + av * cv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        pool().install(|| {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(p, out_row)| row(p, out_row));
        });
    } else {
        for (p, out_row) in out.chunks_mut(n).enumerate() {
            row(p, out_row);
        }
    }
    out
}

/// Batched matmul: per batch item, out = a . b with the given inner shapes.
pub fn bmm<E: Element>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    let work = batch * m * k * n;
    let item = |bi: usize, out_item: &mut [E]| {
        let a_item = &a[bi * m * k..(bi + 1) * m * k];
        let b_item = &b[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            for p in 0..k {
                let av = a_item[i * k + p];
                if av == E::zero() {
                    continue;
                }
                let b_row = &b_item[p * n..(p + 1) * n];
                let out_row = &mut out_item[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && batch > 1 {
        pool().install(|| {
            out.par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(bi, chunk)| item(bi, chunk));
        });
    } else {
        for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
            item(bi, chunk);
        }
    }
    out
}

/// Batched out = a . b^T where a is [batch, m, k] and b is [batch, n, k].
pub fn bmm_bt<E: Element>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    let work = batch * m * k * n;
    let item = |bi: usize, out_item: &mut [E]| {
        let a_item = &a[bi * m * k..(bi + 1) * m * k];
        let b_item = &b[bi * n * k..(bi + 1) * n * k];
        for i in 0..m {
            let a_row = &a_item[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b_item[j * k..(j + 1) * k];
                let mut acc = E::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                out_item[i * n + j] = acc;
            }
        }
    };
    if work >= PAR_THRESHOLD && batch > 1 {
        pool().install(|| {
            out.par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(bi, chunk)| item(bi, chunk));
        });
    } else {
        for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
            item(bi, chunk);
        }
    }
    out
}

/// Batched out = a^T . c per item, a [batch, m, k], c [batch, m, n].
pub fn bmm_at<E: Element>(a: &[E], c: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); batch * k * n];
    for bi in 0..batch {
        let a_item = &a[bi * m * k..(bi + 1) * m * k];
        let c_item = &c[bi * m * n..(bi + 1) * m * n];
        let out_item = &mut out[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            for p in 0..k {
                let av = a_item[i * k + p];
                if av == E::zero() {
                    continue;
                }
                let c_row = &c_item[i * n..(i + 1) * n];
                let out_row = &mut out_item[p * n..(p + 1) * n];
                for (o, &cv) in out_row.iter_mut().zip(c_row) {
                    *o = *o + av * cv;
                }
            }
        }
    }
    out
}

/// Spatial size produced by one fractionally-strided stage.
pub fn conv_transpose_out(input: usize, kernel: usize, stride: usize, padding: usize) -> isize {
    (input as isize - 1) * stride as isize - 2 * padding as isize + kernel as isize
}

/// Fractionally-strided 2D convolution.
/// x: [b, c_in, h, w], kernel: [c_in, c_out, kh, kw] -> [b, c_out, h', w'].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d<E: Element>(
    x: &[E],
    kernel: &[E],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv_transpose_out(h, ksize, stride, padding) as usize;
    let ow = conv_transpose_out(w, ksize, stride, padding) as usize;
    let mut out = vec![E::zero(); b * c_out * oh * ow];
    let plane = |idx: usize, out_plane: &mut [E]| {
        let bi = idx / c_out;
        let co = idx % c_out;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::zero();
                for ky in 0..ksize {
                    let ny = oy + padding;
                    if ny < ky || (ny - ky) % stride != 0 {
                        continue;
                    }
                    let iy = (ny - ky) / stride;
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..ksize {
                        let nx = ox + padding;
                        if nx < kx || (nx - kx) % stride != 0 {
                            continue;
                        }
                        let ix = (nx - kx) / stride;
                        if ix >= w {
                            continue;
                        }
                        for ci in 0..c_in {
                            let xv = x[((bi * c_in + ci) * h + iy) * w + ix];
                            let kv = kernel[((ci * c_out + co) * ksize + ky) * ksize + kx];
                            acc = acc + xv * kv;
                        }
                    }
                }
                out_plane[oy * ow + ox] = acc;
            }
        }
    };
    let work = b * c_out * oh * ow * c_in * ksize * ksize;
    if work >= PAR_THRESHOLD && b * c_out > 1 {
        pool().install(|| {
            out.par_chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(idx, chunk)| plane(idx, chunk));
        });
    } else {
        for (idx, chunk) in out.chunks_mut(oh * ow).enumerate() {
            plane(idx, chunk);
        }
    }
    out
}

/// Gradient of conv_transpose2d with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_grad_input<E: Element>(
    d_out: &[E],
    kernel: &[E],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv_transpose_out(h, ksize, stride, padding) as usize;
    let ow = conv_transpose_out(w, ksize, stride, padding) as usize;
    let mut dx = vec![E::zero(); b * c_in * h * w];
    let plane = |idx: usize, dx_plane: &mut [E]| {
        let bi = idx / c_in;
        let ci = idx % c_in;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = E::zero();
                for ky in 0..ksize {
                    let oy = iy * stride + ky;
                    if oy < padding || oy - padding >= oh {
                        continue;
                    }
                    let oy = oy - padding;
                    for kx in 0..ksize {
                        let ox = ix * stride + kx;
                        if ox < padding || ox - padding >= ow {
                            continue;
                        }
                        let ox = ox - padding;
                        for co in 0..c_out {
                            let gv = d_out[((bi * c_out + co) * oh + oy) * ow + ox];
                            let kv = kernel[((ci * c_out + co) * ksize + ky) * ksize + kx];
                            acc = acc + gv * kv;
                        }
                    }
                }
                dx_plane[iy * w + ix] = acc;
            }
        }
    };
    let work = b * c_in * h * w * c_out * ksize * ksize;
    if work >= PAR_THRESHOLD && b * c_in > 1 {
        pool().install(|| {
            dx.par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(idx, chunk)| plane(idx, chunk));
        });
    } else {
        for (idx, chunk) in dx.chunks_mut(h * w).enumerate() {
            plane(idx, chunk);
        }
    }
    dx
}

/// Gradient of conv_transpose2d with respect to its kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_grad_kernel<E: Element>(
    d_out: &[E],
    x: &[E],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv_transpose_out(h, ksize, stride, padding) as usize;
    let ow = conv_transpose_out(w, ksize, stride, padding) as usize;
    let mut dk = vec![E::zero(); c_in * c_out * ksize * ksize];
    let pair = |idx: usize, dk_pair: &mut [E]| {
        let ci = idx / c_out;
        let co = idx % c_out;
        for ky in 0..ksize {
            for kx in 0..ksize {
                let mut acc = E::zero();
                for bi in 0..b {
                    for iy in 0..h {
                        let oy = iy * stride + ky;
                        if oy < padding || oy - padding >= oh {
                            continue;
                        }
                        let oy = oy - padding;
                        for ix in 0..w {
                            let ox = ix * stride + kx;
                            if ox < padding || ox - padding >= ow {
                                continue;
                            }
                            let ox = ox - padding;
                            let xv = x[((bi * c_in + ci) * h + iy) * w + ix];
                            let gv = d_out[((bi * c_out + co) * oh + oy) * ow + ox];
                            acc = acc + xv * gv;
                        }
                    }
                }
                dk_pair[ky * ksize + kx] = acc;
            }
        }
    };
    let work = c_in * c_out * ksize * ksize * b * h * w;
    if work >= PAR_THRESHOLD && c_in * c_out > 1 {
        pool().install(|| {
            dk.par_chunks_mut(ksize * ksize)
                .enumerate()
                .for_each(|(idx, chunk)| pair(idx, chunk));
        });
    } else {
        for (idx, chunk) in dk.chunks_mut(ksize * ksize).enumerate() {
            pair(idx, chunk);
        }
    }
    dk
}

/// Valid-mode correlation with a fixed square window, per [b, c] plane.
/// x: [b, c, h, w] -> [b, c, h-k+1, w-k+1].
pub fn window_correlate_valid<E: Element>(
    x: &[E],
    win: &[E],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<E> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![E::zero(); planes * oh * ow];
    let plane = |pi: usize, out_plane: &mut [E]| {
        let x_plane = &x[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::zero();
                for ky in 0..k {
                    let x_row = &x_plane[(oy + ky) * w + ox..(oy + ky) * w + ox + k];
                    let w_row = &win[ky * k..(ky + 1) * k];
                    for (&xv, &wv) in x_row.iter().zip(w_row) {
                        acc = acc + xv * wv;
                    }
                }
                out_plane[oy * ow + ox] = acc;
            }
        }
    };
    if planes * oh * ow * k * k >= PAR_THRESHOLD && planes > 1 {
        pool().install(|| {
            out.par_chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(pi, chunk)| plane(pi, chunk));
        });
    } else {
        for (pi, chunk) in out.chunks_mut(oh * ow).enumerate() {
            plane(pi, chunk);
        }
    }
    out
}

/// Gradient of `window_correlate_valid` with respect to x (scatter of the
/// output gradient through the window).
pub fn window_correlate_valid_grad<E: Element>(
    d_out: &[E],
    win: &[E],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<E> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut dx = vec![E::zero(); planes * h * w];
    let plane = |pi: usize, dx_plane: &mut [E]| {
        let g_plane = &d_out[pi * oh * ow..(pi + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = E::zero();
                let ky_lo = (iy + 1).saturating_sub(oh).min(k);
                for ky in ky_lo..k.min(iy + 1) {
                    let oy = iy - ky;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k.min(ix + 1) {
                        let ox = ix - kx;
                        if ox >= ow {
                            continue;
                        }
                        acc = acc + g_plane[oy * ow + ox] * win[ky * k + kx];
                    }
                }
                dx_plane[iy * w + ix] = acc;
            }
        }
    };
    if planes * h * w * k * k >= PAR_THRESHOLD && planes > 1 {
        pool().install(|| {
            dx.par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(pi, chunk)| plane(pi, chunk));
        });
    } else {
        for (pi, chunk) in dx.chunks_mut(h * w).enumerate() {
            plane(pi, chunk);
        }
    }
    dx
}
