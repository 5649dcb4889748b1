//! Raw f64 kernels behind the tensor ops.
//!
//! Every output element is owned by exactly one task and computed with a
//! fixed-order sequential reduction, so results are bit-identical for any
//! thread count. `GSNET_THREADS` caps the pool used for the large kernels.

use rayon::prelude::*;
use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Pool for kernel-internal parallelism, sized by `GSNET_THREADS` when set.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(v) = std::env::var("GSNET_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    builder = builder.num_threads(n);
                }
            }
        }
        builder.build().expect("failed to build kernel thread pool")
    })
}

// Below this many output elements the parallel dispatch overhead dominates.
const PAR_THRESHOLD: usize = 16_384;

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    };
    if m * n >= PAR_THRESHOLD {
        pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
        });
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *c += s;
        }
    };
    if m * n >= PAR_THRESHOLD {
        pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
        });
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    let body = |p: usize, row: &mut [f64]| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (c, &bv) in row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    };
    if k * n >= PAR_THRESHOLD {
        pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(p, row)| body(p, row));
        });
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Option<ConvDims> {
        if input.len() != 4 || kernel.len() != 4 || stride == 0 {
            return None;
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in || kh > h + 2 * padding || kw > w + 2 * padding {
            return None;
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        Some(ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        })
    }
}

/// Cross-correlation (no kernel flip), zero padding.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims, out: &mut [f64]) {
    let plane_out = d.h_out * d.w_out;
    let body = |flat: usize, o: &mut [f64]| {
        let b = flat / d.c_out;
        let co = flat % d.c_out;
        let in_img = &input[b * d.c_in * d.h * d.w..];
        let k_base = co * d.c_in * d.kh * d.kw;
        for ci in 0..d.c_in {
            let in_plane = &in_img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = kernel[k_base + (ci * d.kh + ky) * d.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let y = (oy * d.stride + ky) as isize - d.padding as isize;
                        if y < 0 || y >= d.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[y as usize * d.w..(y as usize + 1) * d.w];
                        let o_row = &mut o[oy * d.w_out..(oy + 1) * d.w_out];
                        for (ox, ov) in o_row.iter_mut().enumerate() {
                            let x = (ox * d.stride + kx) as isize - d.padding as isize;
                            if x >= 0 && x < d.w as isize {
                                *ov += kv * in_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    if d.batch * d.c_out * plane_out >= PAR_THRESHOLD {
        pool().install(|| {
            out.par_chunks_mut(plane_out)
                .enumerate()
                .for_each(|(flat, o)| body(flat, o));
        });
    } else {
        for (flat, o) in out.chunks_mut(plane_out).enumerate() {
            body(flat, o);
        }
    }
}

/// dInput gather: each input cell sums the kernel taps that touched it.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], d: &ConvDims, grad_in: &mut [f64]) {
    let plane_in = d.h * d.w;
    let body = |flat: usize, gi: &mut [f64]| {
        let b = flat / d.c_in;
        let ci = flat % d.c_in;
        let go_img = &grad_out[b * d.c_out * d.h_out * d.w_out..];
        for co in 0..d.c_out {
            let go_plane = &go_img[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
            let k_plane = &kernel[(co * d.c_in + ci) * d.kh * d.kw..];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = k_plane[ky * d.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    // y = oy*s + ky - p  =>  oy = (y + p - ky)/s
                    for y in 0..d.h {
                        let num_y = y as isize + d.padding as isize - ky as isize;
                        if num_y < 0 || num_y % d.stride as isize != 0 {
                            continue;
                        }
                        let oy = (num_y / d.stride as isize) as usize;
                        if oy >= d.h_out {
                            continue;
                        }
                        let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        let gi_row = &mut gi[y * d.w..(y + 1) * d.w];
                        for (x, g) in gi_row.iter_mut().enumerate() {
                            let num_x = x as isize + d.padding as isize - kx as isize;
                            if num_x < 0 || num_x % d.stride as isize != 0 {
                                continue;
                            }
                            let ox = (num_x / d.stride as isize) as usize;
                            if ox < d.w_out {
                                *g += kv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    };
    if d.batch * d.c_in * plane_in >= PAR_THRESHOLD {
        pool().install(|| {
            grad_in
                .par_chunks_mut(plane_in)
                .enumerate()
                .for_each(|(flat, gi)| body(flat, gi));
        });
    } else {
        for (flat, gi) in grad_in.chunks_mut(plane_in).enumerate() {
            body(flat, gi);
        }
    }
}

/// dKernel gather: each kernel tap sums input/grad-out products over the batch.
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], d: &ConvDims, grad_k: &mut [f64]) {
    let taps = d.kh * d.kw;
    let body = |flat: usize, gk: &mut [f64]| {
        let co = flat / d.c_in;
        let ci = flat % d.c_in;
        for b in 0..d.batch {
            let in_plane = &input[(b * d.c_in + ci) * d.h * d.w..];
            let go_plane = &grad_out[(b * d.c_out + co) * d.h_out * d.w_out..];
            for (tap, g) in gk.iter_mut().enumerate() {
                let ky = tap / d.kw;
                let kx = tap % d.kw;
                let mut s = 0.0;
                for oy in 0..d.h_out {
                    let y = (oy * d.stride + ky) as isize - d.padding as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let in_row = &in_plane[y as usize * d.w..];
                    let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, &gv) in go_row.iter().enumerate() {
                        let x = (ox * d.stride + kx) as isize - d.padding as isize;
                        if x >= 0 && x < d.w as isize {
                            s += gv * in_row[x as usize];
                        }
                    }
                }
                *g += s;
            }
        }
    };
    // Kernel counts are small; sequential keeps accumulation trivially owned.
    for (flat, gk) in grad_k.chunks_mut(taps).enumerate() {
        body(flat, gk);
    }
}

/// Broadcast shape under trailing-aligned (NumPy) rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides of `shape` as seen from an `ndim`-long output shape,
/// with stride 0 on broadcast axes.
pub fn broadcast_strides(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for i in (0..ndim).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    strides
}

/// Apply `f(out_index, src_index)` for every element of the output shape,
/// where `src_index` follows the broadcast strides of `src_shape`.
pub fn for_each_broadcast(
    out_shape: &[usize],
    src_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0);
        return;
    }
    let strides = broadcast_strides(src_shape, ndim);
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for flat in 0..numel {
        f(flat, src);
        // odometer increment
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
}

/// Sum `grad` (of `from_shape`) down to `to_shape` over broadcast axes.
pub fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let numel: usize = to_shape.iter().product();
    let mut out = vec![0.0; numel];
    for_each_broadcast(from_shape, to_shape, |src_flat, dst_flat| {
        out[dst_flat] += grad[src_flat];
    });
    out
}
