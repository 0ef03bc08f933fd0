//! Raw convolution loop nests.
//!
//! Each kernel splits its output over rows (output channels, or input
//! channels for the input-gradient) and dispatches rows either sequentially
//! or on the rayon pool. Rows write disjoint slices, so the parallel path is
//! bit-identical to the sequential one regardless of scheduling. The
//! `*_with(exec)` entry points let the bench suite pin either path.

use crate::autodiff::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to dispatch row jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Parallel when the `parallel` feature is enabled and the job is large
    /// enough to amortize fork/join; sequential otherwise.
    Auto,
    #[cfg(feature = "parallel")]
    ForceParallel,
}

/// Below this many multiply-accumulates the fork/join overhead wins.
const PAR_THRESHOLD: usize = 1 << 15;

fn run_rows<T: Scalar>(
    out: &mut [T],
    row_len: usize,
    work: usize,
    exec: Exec,
    row: impl Fn(usize, &mut [T]) + Sync,
) {
    #[cfg(feature = "parallel")]
    {
        let parallel = match exec {
            Exec::Sequential => false,
            Exec::Auto => work >= PAR_THRESHOLD,
            Exec::ForceParallel => true,
        };
        if parallel {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, chunk)| row(i, chunk));
            return;
        }
    }
    let _ = (work, exec);
    for (i, chunk) in out.chunks_mut(row_len).enumerate() {
        row(i, chunk);
    }
}

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

pub fn conv2d_out_len(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// out[o, t'] = sum_{c,k} x[c, t'*s + k - p] * w[o, c, k]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd_with<T: Scalar>(
    x: &[T],
    w: &[T],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
    exec: Exec,
) {
    let t_out = conv1d_out_len(t_in, k, stride, pad);
    let work = c_out * t_out * c_in * k;
    run_rows(out, t_out, work, exec, |o, row_out| {
        let w_o = &w[o * c_in * k..(o + 1) * c_in * k];
        for (tp, slot) in row_out.iter_mut().enumerate() {
            let base = (tp * stride) as isize - pad as isize;
            let mut acc = T::zero();
            for c in 0..c_in {
                let x_c = &x[c * t_in..(c + 1) * t_in];
                let w_oc = &w_o[c * k..(c + 1) * k];
                for (kk, &wv) in w_oc.iter().enumerate() {
                    let t = base + kk as isize;
                    if t >= 0 && (t as usize) < t_in {
                        acc = acc + x_c[t as usize] * wv;
                    }
                }
            }
            *slot = acc;
        }
    });
}

/// dx[c, t] = sum over (o, t', k) with t'*s + k - p == t of go[o, t'] * w[o, c, k]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_igrad_with<T: Scalar>(
    go: &[T],
    w: &[T],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
    exec: Exec,
) {
    let t_out = conv1d_out_len(t_in, k, stride, pad);
    let work = c_out * t_out * c_in * k;
    run_rows(dx, t_in, work, exec, |c, row_dx| {
        for v in row_dx.iter_mut() {
            *v = T::zero();
        }
        for o in 0..c_out {
            let go_o = &go[o * t_out..(o + 1) * t_out];
            let w_oc = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
            for (tp, &g) in go_o.iter().enumerate() {
                let base = (tp * stride) as isize - pad as isize;
                for (kk, &wv) in w_oc.iter().enumerate() {
                    let t = base + kk as isize;
                    if t >= 0 && (t as usize) < t_in {
                        row_dx[t as usize] = row_dx[t as usize] + g * wv;
                    }
                }
            }
        }
    });
}

/// dw[o, c, k] = sum_{t'} go[o, t'] * x[c, t'*s + k - p]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_wgrad_with<T: Scalar>(
    x: &[T],
    go: &[T],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [T],
    exec: Exec,
) {
    let t_out = conv1d_out_len(t_in, k, stride, pad);
    let work = c_out * t_out * c_in * k;
    run_rows(dw, c_in * k, work, exec, |o, row_dw| {
        let go_o = &go[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let x_c = &x[c * t_in..(c + 1) * t_in];
            for kk in 0..k {
                let mut acc = T::zero();
                for (tp, &g) in go_o.iter().enumerate() {
                    let t = (tp * stride) as isize + kk as isize - pad as isize;
                    if t >= 0 && (t as usize) < t_in {
                        acc = acc + g * x_c[t as usize];
                    }
                }
                row_dw[c * k + kk] = acc;
            }
        }
    });
}

/// out[o, y, x] = sum_{c,kh,kw} input[c, y*sh + kh - ph, x*sw + kw - pw] * w[o, c, kh, kw]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd_with<T: Scalar>(
    input: &[T],
    w: &[T],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    out: &mut [T],
    exec: Exec,
) {
    let h_out = conv2d_out_len(h_in, kh, sh, ph);
    let w_out = conv2d_out_len(w_in, kw, sw, pw);
    let work = c_out * h_out * w_out * c_in * kh * kw;
    run_rows(out, h_out * w_out, work, exec, |o, row_out| {
        let w_o = &w[o * c_in * kh * kw..(o + 1) * c_in * kh * kw];
        for y in 0..h_out {
            for x in 0..w_out {
                let ybase = (y * sh) as isize - ph as isize;
                let xbase = (x * sw) as isize - pw as isize;
                let mut acc = T::zero();
                for c in 0..c_in {
                    let in_c = &input[c * h_in * w_in..(c + 1) * h_in * w_in];
                    let w_oc = &w_o[c * kh * kw..(c + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = ybase + ky as isize;
                        if iy < 0 || iy as usize >= h_in {
                            continue;
                        }
                        let in_row = &in_c[iy as usize * w_in..(iy as usize + 1) * w_in];
                        let w_row = &w_oc[ky * kw..(ky + 1) * kw];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let ix = xbase + kx as isize;
                            if ix >= 0 && (ix as usize) < w_in {
                                acc = acc + in_row[ix as usize] * wv;
                            }
                        }
                    }
                }
                row_out[y * w_out + x] = acc;
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_igrad_with<T: Scalar>(
    go: &[T],
    w: &[T],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dx: &mut [T],
    exec: Exec,
) {
    let h_out = conv2d_out_len(h_in, kh, sh, ph);
    let w_out = conv2d_out_len(w_in, kw, sw, pw);
    let work = c_out * h_out * w_out * c_in * kh * kw;
    run_rows(dx, h_in * w_in, work, exec, |c, row_dx| {
        for v in row_dx.iter_mut() {
            *v = T::zero();
        }
        for o in 0..c_out {
            let go_o = &go[o * h_out * w_out..(o + 1) * h_out * w_out];
            let w_oc = &w[(o * c_in + c) * kh * kw..(o * c_in + c + 1) * kh * kw];
            for y in 0..h_out {
                for x in 0..w_out {
                    let g = go_o[y * w_out + x];
                    let ybase = (y * sh) as isize - ph as isize;
                    let xbase = (x * sw) as isize - pw as isize;
                    for ky in 0..kh {
                        let iy = ybase + ky as isize;
                        if iy < 0 || iy as usize >= h_in {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = xbase + kx as isize;
                            if ix >= 0 && (ix as usize) < w_in {
                                let idx = iy as usize * w_in + ix as usize;
                                row_dx[idx] = row_dx[idx] + g * w_oc[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_wgrad_with<T: Scalar>(
    input: &[T],
    go: &[T],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dw: &mut [T],
    exec: Exec,
) {
    let h_out = conv2d_out_len(h_in, kh, sh, ph);
    let w_out = conv2d_out_len(w_in, kw, sw, pw);
    let work = c_out * h_out * w_out * c_in * kh * kw;
    run_rows(dw, c_in * kh * kw, work, exec, |o, row_dw| {
        let go_o = &go[o * h_out * w_out..(o + 1) * h_out * w_out];
        for c in 0..c_in {
            let in_c = &input[c * h_in * w_in..(c + 1) * h_in * w_in];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for y in 0..h_out {
                        let iy = (y * sh) as isize + ky as isize - ph as isize;
                        if iy < 0 || iy as usize >= h_in {
                            continue;
                        }
                        for x in 0..w_out {
                            let ix = (x * sw) as isize + kx as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < w_in {
                                acc = acc
                                    + go_o[y * w_out + x] * in_c[iy as usize * w_in + ix as usize];
                            }
                        }
                    }
                    row_dw[(c * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
}
