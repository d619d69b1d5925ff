//! 3D convolution (temporal + spatial) for the clip discriminator.

use crate::elem::Elem;
use ndarray::{Array1, Array2, Array5, ArrayView1, ArrayView5, Axis};

use super::conv2d::out_dim;

/// Unfold x (N,C,D,H,W) into (N*DO*HO*WO, C*KD*KH*KW).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Elem>(
    x: &ArrayView5<T>,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array2<T> {
    let (n, c, d, h, w) = x.dim();
    let dd = out_dim(d, kd, stride[0], pad[0]);
    let ho = out_dim(h, kh, stride[1], pad[1]);
    let wo = out_dim(w, kw, stride[2], pad[2]);
    let k = c * kd * kh * kw;
    let mut col = Array2::<T>::zeros((n * dd * ho * wo, k));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let x_chan = (ni * c + ci) * d * h * w;
            for kdi in 0..kd {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let kcol = ((ci * kd + kdi) * kh + khi) * kw + kwi;
                        for ddi in 0..dd {
                            let id = (ddi * stride[0] + kdi) as isize - pad[0] as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for hoi in 0..ho {
                                let ih = (hoi * stride[1] + khi) as isize - pad[1] as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let row_base = (((ni * dd) + ddi) * ho + hoi) * wo;
                                let x_row = x_chan + (id as usize * h + ih as usize) * w;
                                for woi in 0..wo {
                                    let iw =
                                        (woi * stride[2] + kwi) as isize - pad[2] as isize;
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
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Elem>(
    dcol: &Array2<T>,
    dims: (usize, usize, usize, usize, usize),
    kd: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array5<T> {
    let (n, c, d, h, w) = dims;
    let dd = out_dim(d, kd, stride[0], pad[0]);
    let ho = out_dim(h, kh, stride[1], pad[1]);
    let wo = out_dim(w, kw, stride[2], pad[2]);
    let k = c * kd * kh * kw;
    let mut dx = Array5::<T>::zeros(dims);
    let ds = dcol.as_slice().expect("standard layout");
    let out = dx.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let x_chan = (ni * c + ci) * d * h * w;
            for kdi in 0..kd {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let kcol = ((ci * kd + kdi) * kh + khi) * kw + kwi;
                        for ddi in 0..dd {
                            let id = (ddi * stride[0] + kdi) as isize - pad[0] as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for hoi in 0..ho {
                                let ih = (hoi * stride[1] + khi) as isize - pad[1] as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let row_base = (((ni * dd) + ddi) * ho + hoi) * wo;
                                let x_row = x_chan + (id as usize * h + ih as usize) * w;
                                for woi in 0..wo {
                                    let iw =
                                        (woi * stride[2] + kwi) as isize - pad[2] as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    out[x_row + iw as usize] = out[x_row + iw as usize]
                                        + ds[(row_base + woi) * k + kcol];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn forward<T: Elem>(
    x: &ArrayView5<T>,
    w: &ArrayView5<T>,
    b: Option<&ArrayView1<T>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array5<T> {
    let (n, c, d, h, wd) = x.dim();
    let (o, cw, kd, kh, kw) = w.dim();
    assert_eq!(c, cw, "channel mismatch");
    let dd = out_dim(d, kd, stride[0], pad[0]);
    let ho = out_dim(h, kh, stride[1], pad[1]);
    let wo = out_dim(wd, kw, stride[2], pad[2]);
    let col = im2col(x, kd, kh, kw, stride, pad);
    let w_mat = w
        .to_shape((o, c * kd * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let out_mat = col.dot(&w_mat.t()); // (M, O)
    let mut y = Array5::<T>::zeros((n, o, dd, ho, wo));
    {
        let om = out_mat.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let vol = dd * ho * wo;
        for ni in 0..n {
            for oi in 0..o {
                let bias = b.map(|bv| bv[oi]).unwrap_or_else(T::zero);
                let dst = (ni * o + oi) * vol;
                let src = ni * vol;
                for p in 0..vol {
                    ys[dst + p] = om[(src + p) * o + oi] + bias;
                }
            }
        }
    }
    y
}

pub fn backward_input<T: Elem>(
    dy: &ArrayView5<T>,
    w: &ArrayView5<T>,
    x_dims: (usize, usize, usize, usize, usize),
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array5<T> {
    let (o, c, kd, kh, kw) = w.dim();
    let dy_mat = dy_matrix(dy);
    let w_mat = w
        .to_shape((o, c * kd * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let dcol = dy_mat.dot(&w_mat);
    col2im(&dcol, x_dims, kd, kh, kw, stride, pad)
}

pub fn backward_params<T: Elem>(
    x: &ArrayView5<T>,
    dy: &ArrayView5<T>,
    w_dims: (usize, usize, usize, usize, usize),
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Array5<T>, Array1<T>) {
    let (o, c, kd, kh, kw) = w_dims;
    let col = im2col(x, kd, kh, kw, stride, pad);
    let dy_mat = dy_matrix(dy);
    let dw_mat = dy_mat.t().dot(&col);
    let dw = dw_mat
        .to_shape((o, c, kd, kh, kw))
        .expect("grad reshape")
        .to_owned();
    let db = dy_mat.sum_axis(Axis(0));
    (dw, db)
}

fn dy_matrix<T: Elem>(dy: &ArrayView5<T>) -> Array2<T> {
    let (n, o, dd, ho, wo) = dy.dim();
    let vol = dd * ho * wo;
    let mut m = Array2::<T>::zeros((n * vol, o));
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let ms = m.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oi in 0..o {
            let src = (ni * o + oi) * vol;
            let dst = ni * vol;
            for p in 0..vol {
                ms[(dst + p) * o + oi] = dys[src + p];
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array5, IxDyn};
    use rand::Rng;

    fn randn5(dims: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = crate::rng::stream(seed, "conv3d-test", 0);
        Array5::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive() {
        let x = randn5((1, 2, 4, 6, 5), 31);
        let w = randn5((3, 2, 3, 3, 3), 32);
        let b = Array1::from_shape_fn(3, |i| 0.2 * i as f64);
        let stride = [2, 2, 2];
        let pad = [1, 1, 1];
        let y = forward(&x.view(), &w.view(), Some(&b.view()), stride, pad);

        let (_, c, d, h, wd) = x.dim();
        let (o, _, kd, kh, kw) = w.dim();
        let dd = out_dim(d, kd, 2, 1);
        let ho = out_dim(h, kh, 2, 1);
        let wo = out_dim(wd, kw, 2, 1);
        assert_eq!(y.dim(), (1, o, dd, ho, wo));
        let mut max_err = 0.0f64;
        for oi in 0..o {
            for ddi in 0..dd {
                for hoi in 0..ho {
                    for woi in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for kdi in 0..kd {
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let id = (ddi * 2 + kdi) as isize - 1;
                                        let ih = (hoi * 2 + khi) as isize - 1;
                                        let iw = (woi * 2 + kwi) as isize - 1;
                                        if id >= 0
                                            && ih >= 0
                                            && iw >= 0
                                            && (id as usize) < d
                                            && (ih as usize) < h
                                            && (iw as usize) < wd
                                        {
                                            acc += x[[
                                                0,
                                                ci,
                                                id as usize,
                                                ih as usize,
                                                iw as usize,
                                            ]] * w[[oi, ci, kdi, khi, kwi]];
                                        }
                                    }
                                }
                            }
                        }
                        max_err = max_err.max((acc - y[[0, oi, ddi, hoi, woi]]).abs());
                    }
                }
            }
        }
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = randn5((1, 2, 3, 6, 6), 41);
        let w = randn5((2, 2, 3, 3, 3), 42);
        let b = Array1::from_shape_fn(2, |i| 0.1 * i as f64);
        let stride = [1, 2, 2];
        let pad = [1, 1, 1];

        let y0 = forward(&x.view(), &w.view(), Some(&b.view()), stride, pad).into_dyn();
        let wsum = Array::from_shape_fn(y0.raw_dim(), |d| {
            ((d[1] + 2 * d[2] + 3 * d[3] + 5 * d[4]) % 5) as f64 * 0.2 - 0.4
        });
        let wsum5: Array5<f64> = wsum.clone().into_dimensionality().unwrap();

        let dx = backward_input(&wsum5.view(), &w.view(), x.dim(), stride, pad);
        let (dw, db) = backward_params(&x.view(), &wsum5.view(), w.dim(), stride, pad);

        let f_x = |xv: &Array<f64, IxDyn>| {
            let xa: Array5<f64> = xv.clone().into_dimensionality().unwrap();
            (&forward(&xa.view(), &w.view(), Some(&b.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd = crate::graph::gradcheck::finite_diff(&x.clone().into_dyn(), f_x, 1e-5);
        assert!(crate::graph::gradcheck::rel_error(&dx.into_dyn(), &fd) < 1e-8);

        let f_w = |wv: &Array<f64, IxDyn>| {
            let wa: Array5<f64> = wv.clone().into_dimensionality().unwrap();
            (&forward(&x.view(), &wa.view(), Some(&b.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd = crate::graph::gradcheck::finite_diff(&w.clone().into_dyn(), f_w, 1e-5);
        assert!(crate::graph::gradcheck::rel_error(&dw.into_dyn(), &fd) < 1e-8);

        let f_b = |bv: &Array<f64, IxDyn>| {
            let ba: Array1<f64> = bv.clone().into_dimensionality().unwrap();
            (&forward(&x.view(), &w.view(), Some(&ba.view()), stride, pad).into_dyn() * &wsum)
                .sum()
        };
        let fd = crate::graph::gradcheck::finite_diff(&b.clone().into_dyn(), f_b, 1e-5);
        assert!(crate::graph::gradcheck::rel_error(&db.into_dyn(), &fd) < 1e-8);
    }
}
