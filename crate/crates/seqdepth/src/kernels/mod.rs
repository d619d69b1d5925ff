//! Pure array kernels: forward and backward passes with no graph attached.
//! The autodiff graph and the fast inference paths both call into these, so
//! results are bit-identical between training and inference code.

pub mod batchnorm;
pub mod conv2d;
pub mod conv3d;
pub mod pool;
pub mod resize;

use crate::elem::Elem;
use ndarray::ArrayD;

/// Elementwise map preserving shape.
pub fn map<T: Elem>(x: &ArrayD<T>, f: impl Fn(T) -> T) -> ArrayD<T> {
    x.mapv(f)
}

pub fn sigmoid<T: Elem>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus<T: Elem>(v: T) -> T {
    let cap = T::from_f64(30.0);
    if v > cap {
        v
    } else if v < -cap {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}
