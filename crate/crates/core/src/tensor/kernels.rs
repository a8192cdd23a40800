//! Raw compute kernels behind the tape ops.
//!
//! Layout conventions: convolution inputs are `[channels, length, batch]`
//! row-major with the batch axis contiguous, matmul inputs are
//! `[batch, rows, cols]`. Inner loops run over contiguous slices so the
//! compiler can vectorize them.

use crate::scalar::Scalar;

/// y += a * x
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Dot product with eight independent accumulators; serial reduction would
/// otherwise block vectorization.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let n8 = a.len() - a.len() % 8;
    let mut acc = [S::zero(); 8];
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut s = a[n8..].iter().zip(&b[n8..]).fold(S::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        s = s + v;
    }
    s
}

pub fn out_len_for(l: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = l + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Grouped 1D convolution over axis 1 of `x: [ci, l, bt]` with weights
/// `[co, ci/groups, kernel]`, producing `out: [co, lo, bt]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward<S: Scalar>(
    x: &[S],
    ci: usize,
    l: usize,
    bt: usize,
    w: &[S],
    co: usize,
    kernel: usize,
    bias: Option<&[S]>,
    stride: usize,
    pad: usize,
    groups: usize,
    out: &mut [S],
    lo: usize,
) {
    let cig = ci / groups;
    let cog = co / groups;
    debug_assert_eq!(out.len(), co * lo * bt);

    if let Some(b) = bias {
        for c in 0..co {
            out[c * lo * bt..(c + 1) * lo * bt].fill(b[c]);
        }
    } else {
        out.fill(S::zero());
    }

    // Pointwise dense conv is the hot path; run it as a channel matmul over
    // the flattened l*bt positions.
    if kernel == 1 && stride == 1 && pad == 0 && groups == 1 {
        let m = l * bt;
        for c_out in 0..co {
            let (head, tail) = out.split_at_mut(c_out * m);
            let _ = head;
            let out_row = &mut tail[..m];
            for c_in in 0..ci {
                axpy(out_row, w[c_out * ci + c_in], &x[c_in * m..(c_in + 1) * m]);
            }
        }
        return;
    }

    for g in 0..groups {
        for c_out_l in 0..cog {
            let c_out = g * cog + c_out_l;
            for c_in_l in 0..cig {
                let c_in = g * cig + c_in_l;
                for kk in 0..kernel {
                    let wv = w[(c_out * cig + c_in_l) * kernel + kk];
                    for lo_i in 0..lo {
                        let li = (lo_i * stride + kk) as isize - pad as isize;
                        if li < 0 || li >= l as isize {
                            continue;
                        }
                        let xs = &x[(c_in * l + li as usize) * bt..][..bt];
                        let os = &mut out[(c_out * lo + lo_i) * bt..][..bt];
                        axpy(os, wv, xs);
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv1d_forward`] w.r.t. input, weights, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<S: Scalar>(
    x: &[S],
    ci: usize,
    l: usize,
    bt: usize,
    w: &[S],
    co: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    g_out: &[S],
    lo: usize,
    g_x: Option<&mut [S]>,
    g_w: Option<&mut [S]>,
    g_b: Option<&mut [S]>,
) {
    let cig = ci / groups;
    let cog = co / groups;

    if let Some(gb) = g_b {
        for c_out in 0..co {
            let mut s = S::zero();
            for v in &g_out[c_out * lo * bt..(c_out + 1) * lo * bt] {
                s += *v;
            }
            gb[c_out] += s;
        }
    }

    if let Some(gx) = g_x {
        if kernel == 1 && stride == 1 && pad == 0 && groups == 1 {
            let m = l * bt;
            for c_in in 0..ci {
                let gx_row = &mut gx[c_in * m..(c_in + 1) * m];
                for c_out in 0..co {
                    axpy(gx_row, w[c_out * ci + c_in], &g_out[c_out * m..(c_out + 1) * m]);
                }
            }
        } else {
            for g in 0..groups {
                for c_out_l in 0..cog {
                    let c_out = g * cog + c_out_l;
                    for c_in_l in 0..cig {
                        let c_in = g * cig + c_in_l;
                        for kk in 0..kernel {
                            let wv = w[(c_out * cig + c_in_l) * kernel + kk];
                            for lo_i in 0..lo {
                                let li = (lo_i * stride + kk) as isize - pad as isize;
                                if li < 0 || li >= l as isize {
                                    continue;
                                }
                                let gs = &g_out[(c_out * lo + lo_i) * bt..][..bt];
                                let xs = &mut gx[(c_in * l + li as usize) * bt..][..bt];
                                axpy(xs, wv, gs);
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(gw) = g_w {
        if kernel == 1 && stride == 1 && pad == 0 && groups == 1 {
            let m = l * bt;
            for c_out in 0..co {
                let go = &g_out[c_out * m..(c_out + 1) * m];
                for c_in in 0..ci {
                    gw[c_out * ci + c_in] += dot(go, &x[c_in * m..(c_in + 1) * m]);
                }
            }
        } else {
            for g in 0..groups {
                for c_out_l in 0..cog {
                    let c_out = g * cog + c_out_l;
                    for c_in_l in 0..cig {
                        let c_in = g * cig + c_in_l;
                        for kk in 0..kernel {
                            let mut s = S::zero();
                            for lo_i in 0..lo {
                                let li = (lo_i * stride + kk) as isize - pad as isize;
                                if li < 0 || li >= l as isize {
                                    continue;
                                }
                                s += dot(
                                    &g_out[(c_out * lo + lo_i) * bt..][..bt],
                                    &x[(c_in * l + li as usize) * bt..][..bt],
                                );
                            }
                            gw[(c_out * cig + c_in_l) * kernel + kk] += s;
                        }
                    }
                }
            }
        }
    }
}

/// c[m,n] = sum_k a[m,k] * b[k,n], accumulating into `c`.
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for ki in 0..k {
            axpy(c_row, a[mi * k + ki], &b[ki * n..(ki + 1) * n]);
        }
    }
}

/// c[m,n] = sum_k a[m,k] * b[n,k] (b transposed), accumulating into `c`.
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let a_row = &a[mi * k..(mi + 1) * k];
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for ni in 0..n {
            c_row[ni] += dot(a_row, &b[ni * k..(ni + 1) * k]);
        }
    }
}

/// c[m,n] = sum_k a[k,m] * b[k,n] (a transposed), accumulating into `c`.
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for ki in 0..k {
        let b_row = &b[ki * n..(ki + 1) * n];
        for mi in 0..m {
            axpy(&mut c[mi * n..(mi + 1) * n], a[ki * m + mi], b_row);
        }
    }
}
