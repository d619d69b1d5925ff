//! 2D convolution via im2col + GEMM.
//!
//! Batched inputs go through a single GEMM; per-row results are identical to
//! running samples one at a time, which the serial/chunked inference modes
//! rely on (and tests assert).

use crate::elem::Elem;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4, Axis};

pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` (N,C,H,W) into (N*HO*WO, C*KH*KW).
pub fn im2col<T: Elem>(
    x: &ArrayView4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let k = c * kh * kw;
    let mut col = Array2::<T>::zeros((n * ho * wo, k));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let kcol = (ci * kh + khi) * kw + kwi;
                    for hoi in 0..ho {
                        let ih = (hoi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row_base = ((ni * ho) + hoi) * wo;
                        let x_row = x_base + ih as usize * w;
                        for woi in 0..wo {
                            let iw = (woi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[(row_base + woi) * k + kcol] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold (N*HO*WO, C*KH*KW) gradients back onto the input grid (scatter-add).
pub fn col2im<T: Elem>(
    dcol: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let k = c * kh * kw;
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let ds = dcol.as_slice().expect("standard layout");
    let out = dx.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let kcol = (ci * kh + khi) * kw + kwi;
                    for hoi in 0..ho {
                        let ih = (hoi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row_base = ((ni * ho) + hoi) * wo;
                        let x_row = x_base + ih as usize * w;
                        for woi in 0..wo {
                            let iw = (woi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            out[x_row + iw as usize] =
                                out[x_row + iw as usize] + ds[(row_base + woi) * k + kcol];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// y = conv(x, w) + b with square stride/padding. Shapes: x (N,C,H,W),
/// w (O,C,KH,KW), b (O); output (N,O,HO,WO).
pub fn forward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    b: Option<&ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let (o, cw, kh, kw) = w.dim();
    assert_eq!(c, cw, "channel mismatch: input {c} vs kernel {cw}");
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wd, kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad);
    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    // (M, K) x (K, O)
    let out_mat = col.dot(&w_mat.t());
    let mut y = Array4::<T>::zeros((n, o, ho, wo));
    {
        let om = out_mat.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for oi in 0..o {
                let bias = b.map(|bv| bv[oi]).unwrap_or_else(T::zero);
                let dst = (ni * o + oi) * ho * wo;
                let src = ni * ho * wo;
                for p in 0..ho * wo {
                    ys[dst + p] = om[(src + p) * o + oi] + bias;
                }
            }
        }
    }
    y
}

/// Gradient w.r.t. the input.
pub fn backward_input<T: Elem>(
    dy: &ArrayView4<T>,
    w: &ArrayView4<T>,
    x_dims: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, wd) = x_dims;
    let (o, _, kh, kw) = w.dim();
    let dy_mat = dy_matrix(dy);
    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let dcol = dy_mat.dot(&w_mat); // (M, K)
    col2im(&dcol, n, c, h, wd, kh, kw, stride, pad)
}

/// Gradients w.r.t. kernel and bias.
pub fn backward_params<T: Elem>(
    x: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    w_dims: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array4<T>, Array1<T>) {
    let (o, c, kh, kw) = w_dims;
    let col = im2col(x, kh, kw, stride, pad);
    let dy_mat = dy_matrix(dy); // (M, O)
    let dw_mat = dy_mat.t().dot(&col); // (O, K)
    let dw = dw_mat
        .to_shape((o, c, kh, kw))
        .expect("grad reshape")
        .to_owned();
    let db = dy_mat.sum_axis(Axis(0));
    (dw, db)
}

/// (N,O,HO,WO) -> (N*HO*WO, O), matching im2col row order.
fn dy_matrix<T: Elem>(dy: &ArrayView4<T>) -> Array2<T> {
    let (n, o, ho, wo) = dy.dim();
    let mut m = Array2::<T>::zeros((n * ho * wo, o));
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let ms = m.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oi in 0..o {
            let src = (ni * o + oi) * ho * wo;
            let dst = ni * ho * wo;
            for p in 0..ho * wo {
                ms[(dst + p) * o + oi] = dys[src + p];
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::Rng;

    fn randn4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::rng::stream(seed, "conv2d-test", 0);
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct 7-loop convolution used as the oracle.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let ho = out_dim(h, kh, stride, pad);
        let wo = out_dim(wd, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((n, o, ho, wo));
        for ni in 0..n {
            for oi in 0..o {
                for hoi in 0..ho {
                    for woi in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (hoi * stride + khi) as isize - pad as isize;
                                    let iw = (woi * stride + kwi) as isize - pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wd
                                    {
                                        acc += x[[ni, ci, ih as usize, iw as usize]]
                                            * w[[oi, ci, khi, kwi]];
                                    }
                                }
                            }
                        }
                        y[[ni, oi, hoi, woi]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 2), (2, 0)] {
            let x = randn4((2, 3, 9, 7), 11 + stride as u64 + pad as u64);
            let w = randn4((4, 3, 3, 3), 5);
            let b = Array1::from_shape_fn(4, |i| 0.1 * i as f64);
            let y = forward(&x.view(), &w.view(), Some(&b.view()), stride, pad);
            let y0 = conv_naive(&x, &w, &b, stride, pad);
            let err = (&y - &y0).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-12, "stride {stride} pad {pad}: err {err}");
        }
    }

    #[test]
    fn batched_equals_per_sample_bitwise() {
        let x = randn4((6, 3, 8, 8), 3).mapv(|v| v as f32);
        let w = randn4((5, 3, 3, 3), 4).mapv(|v| v as f32);
        let b = Array1::from_shape_fn(5, |i| i as f32 * 0.3);
        let all = forward(&x.view(), &w.view(), Some(&b.view()), 1, 1);
        for ni in 0..6 {
            let single = x
                .index_axis(Axis(0), ni)
                .to_owned()
                .insert_axis(Axis(0));
            let y1 = forward(&single.view(), &w.view(), Some(&b.view()), 1, 1);
            let ya = all.index_axis(Axis(0), ni);
            for (a, b) in y1.index_axis(Axis(0), 0).iter().zip(ya.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = randn4((2, 2, 6, 5), 21);
        let w = randn4((3, 2, 3, 3), 22);
        let b = Array1::from_shape_fn(3, |i| 0.05 * (i as f64 + 1.0));
        let stride = 2;
        let pad = 1;

        // scalar objective: weighted sum of outputs
        let y0 = forward(&x.view(), &w.view(), Some(&b.view()), stride, pad).into_dyn();
        let wsum = Array::from_shape_fn(y0.raw_dim(), |d| {
            ((d[0] + 2 * d[1] + 3 * d[2] + 5 * d[3]) % 7) as f64 * 0.1 - 0.3
        });
        let wsum4: Array4<f64> = wsum.clone().into_dimensionality().unwrap();

        let dx = backward_input(&wsum4.view(), &w.view(), x.dim(), stride, pad);
        let (dw, db) = backward_params(&x.view(), &wsum4.view(), w.dim(), stride, pad);

        let f_x = |xv: &Array<f64, IxDyn>| {
            let xa: Array4<f64> = xv.clone().into_dimensionality().unwrap();
            (&forward(&xa.view(), &w.view(), Some(&b.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd_x = crate::graph::gradcheck::finite_diff(&x.clone().into_dyn(), f_x, 1e-5);
        let rel = crate::graph::gradcheck::rel_error(&dx.clone().into_dyn(), &fd_x);
        assert!(rel < 1e-8, "dx rel err {rel}");

        let f_w = |wv: &Array<f64, IxDyn>| {
            let wa: Array4<f64> = wv.clone().into_dimensionality().unwrap();
            (&forward(&x.view(), &wa.view(), Some(&b.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd_w = crate::graph::gradcheck::finite_diff(&w.clone().into_dyn(), f_w, 1e-5);
        let rel = crate::graph::gradcheck::rel_error(&dw.clone().into_dyn(), &fd_w);
        assert!(rel < 1e-8, "dw rel err {rel}");

        let f_b = |bv: &Array<f64, IxDyn>| {
            let ba: Array1<f64> = bv.clone().into_dimensionality().unwrap();
            (&forward(&x.view(), &w.view(), Some(&ba.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd_b = crate::graph::gradcheck::finite_diff(&b.clone().into_dyn(), f_b, 1e-5);
        let rel = crate::graph::gradcheck::rel_error(&db.clone().into_dyn(), &fd_b);
        assert!(rel < 1e-8, "db rel err {rel}");
    }
}
