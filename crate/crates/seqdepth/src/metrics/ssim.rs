//! Structural similarity with the standard 11x11 Gaussian window
//! (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2, averaged over windows that
//! fit entirely inside the image.

use ndarray::Array2;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let s2 = 2.0 * SIGMA * SIGMA;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / s2).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filtering.
fn filter(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    assert!(h >= WINDOW && w >= WINDOW, "image smaller than SSIM window");
    let k = gaussian_window();
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;
    // rows
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * a[[y, x + i]];
            }
            tmp[[y, x]] = acc;
        }
    }
    // cols
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean local SSIM between two equally-shaped images with dynamic range `L`.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim shape mismatch");
    assert!(dynamic_range > 0.0, "dynamic range must be positive");
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);

    let mu_a = filter(a);
    let mu_b = filter(b);
    let mu_aa = filter(&(a * a));
    let mu_bb = filter(&(b * b));
    let mu_ab = filter(&(a * b));

    let mut acc = 0.0;
    let n = mu_a.len();
    for i in 0..n {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = mu_aa.as_slice().unwrap()[i] - ma * ma;
        let vb = mu_bb.as_slice().unwrap()[i] - mb * mb;
        let cab = mu_ab.as_slice().unwrap()[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cab + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    acc / n as f64
}
