//! Max pooling over (N,C,D,H,W) volumes. Kernel and stride are per-dim so
//! the temporal dimension can stop pooling once it reaches length 1.

use crate::elem::Elem;
use ndarray::{Array5, ArrayView5};

use super::conv2d::out_dim;

/// Returns pooled output and the flat input index of each maximum
/// (argmax is relative to the whole input buffer, for the backward pass).
pub fn maxpool3d_forward<T: Elem>(
    x: &ArrayView5<T>,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> (Array5<T>, Vec<usize>) {
    let (n, c, d, h, w) = x.dim();
    let dd = out_dim(d, kernel[0], stride[0], 0);
    let ho = out_dim(h, kernel[1], stride[1], 0);
    let wo = out_dim(w, kernel[2], stride[2], 0);
    let mut y = Array5::<T>::zeros((n, c, dd, ho, wo));
    let mut arg = vec![0usize; n * c * dd * ho * wo];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    let mut oi = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let chan = (ni * c + ci) * d * h * w;
            for ddi in 0..dd {
                for hoi in 0..ho {
                    for woi in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for kd in 0..kernel[0] {
                            for kh in 0..kernel[1] {
                                for kw in 0..kernel[2] {
                                    let id = ddi * stride[0] + kd;
                                    let ih = hoi * stride[1] + kh;
                                    let iw = woi * stride[2] + kw;
                                    let idx = chan + (id * h + ih) * w + iw;
                                    let v = xs[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        ys[oi] = best;
                        arg[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool3d_backward<T: Elem>(
    dy: &ArrayView5<T>,
    argmax: &[usize],
    x_dims: (usize, usize, usize, usize, usize),
) -> Array5<T> {
    let mut dx = Array5::<T>::zeros(x_dims);
    let dxs = dx.as_slice_mut().expect("standard layout");
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    for (g, &idx) in dys.iter().zip(argmax.iter()) {
        dxs[idx] = dxs[idx] + *g;
    }
    dx
}
