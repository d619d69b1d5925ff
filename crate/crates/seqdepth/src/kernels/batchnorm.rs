//! Per-channel batch normalization over (N, C, spatial...) tensors.
//! Works on any rank >= 2 by treating everything after the channel axis as
//! one flat spatial extent.

use crate::elem::Elem;
use ndarray::{Array1, ArrayD, ArrayViewD};

/// (N, C, L) decomposition of an (N, C, ...) tensor.
fn ncl(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batchnorm needs (N, C, ...)");
    let n = shape[0];
    let c = shape[1];
    let l: usize = shape[2..].iter().product::<usize>().max(1);
    (n, c, l)
}

pub struct BnForward<T> {
    pub y: ArrayD<T>,
    /// Batch mean per channel (training mode) or running mean (eval).
    pub mean: Array1<T>,
    /// 1 / sqrt(var + eps) actually used in the forward pass.
    pub invstd: Array1<T>,
    /// Biased batch variance (for running-average updates).
    pub var: Array1<T>,
}

pub fn forward<T: Elem>(
    x: &ArrayViewD<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
    train: bool,
) -> BnForward<T> {
    let (n, c, l) = ncl(x.shape());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let m = n * l;

    let (mean, var) = if train {
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * l;
                for li in 0..l {
                    s = s + xs[base + li];
                }
            }
            let mu = s / T::from_f64(m as f64);
            let mut v = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * l;
                for li in 0..l {
                    let d = xs[base + li] - mu;
                    v = v + d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = v / T::from_f64(m as f64);
        }
        (mean, var)
    } else {
        (running_mean.clone(), running_var.clone())
    };

    let invstd = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut y = ArrayD::<T>::zeros(x.raw_dim());
    {
        let ys = y.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * l;
                let (mu, is, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
                for li in 0..l {
                    ys[base + li] = (xs[base + li] - mu) * is * g + b;
                }
            }
        }
    }
    BnForward {
        y,
        mean,
        invstd,
        var,
    }
}

pub struct BnGrads<T> {
    pub dx: ArrayD<T>,
    pub dgamma: Array1<T>,
    pub dbeta: Array1<T>,
}

/// Backward for both modes. In eval mode mean/invstd are constants, so the
/// batch-statistics coupling terms vanish.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Elem>(
    x: &ArrayViewD<T>,
    dy: &ArrayViewD<T>,
    gamma: &Array1<T>,
    mean: &Array1<T>,
    invstd: &Array1<T>,
    train: bool,
) -> BnGrads<T> {
    let (n, c, l) = ncl(x.shape());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let m = T::from_f64((n * l) as f64);

    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let mut dx = ArrayD::<T>::zeros(x.raw_dim());
    let dxs = dx.as_slice_mut().expect("standard layout");

    for ci in 0..c {
        let (mu, is, g) = (mean[ci], invstd[ci], gamma[ci]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * l;
            for li in 0..l {
                let xhat = (xs[base + li] - mu) * is;
                sum_dy = sum_dy + dys[base + li];
                sum_dy_xhat = sum_dy_xhat + dys[base + li] * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        if train {
            for ni in 0..n {
                let base = (ni * c + ci) * l;
                for li in 0..l {
                    let xhat = (xs[base + li] - mu) * is;
                    let t = dys[base + li] * m - sum_dy - xhat * sum_dy_xhat;
                    dxs[base + li] = g * is / m * t;
                }
            }
        } else {
            for ni in 0..n {
                let base = (ni * c + ci) * l;
                for li in 0..l {
                    dxs[base + li] = dys[base + li] * g * is;
                }
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
