//! Spatial resampling over (N,C,H,W): nearest-neighbor 2x upsampling for the
//! decoder, and bilinear resize (half-pixel centers) for depth output and
//! image preprocessing.

use crate::elem::Elem;
use ndarray::{Array4, ArrayView4};

pub fn nearest_up2x<T: Elem>(x: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * 4 * h * w;
        for hi in 0..h {
            for wi in 0..w {
                let v = xs[src + hi * w + wi];
                let base = dst + 2 * hi * 2 * w + 2 * wi;
                ys[base] = v;
                ys[base + 1] = v;
                ys[base + 2 * w] = v;
                ys[base + 2 * w + 1] = v;
            }
        }
    }
    y
}

pub fn nearest_up2x_backward<T: Elem>(dy: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for nc in 0..n * c {
        let src = nc * h2 * w2;
        let dst = nc * h * w;
        for hi in 0..h {
            for wi in 0..w {
                let base = src + 2 * hi * w2 + 2 * wi;
                dxs[dst + hi * w + wi] =
                    dys[base] + dys[base + 1] + dys[base + w2] + dys[base + w2 + 1];
            }
        }
    }
    dx
}

/// Sampling weights for one output axis position under half-pixel mapping.
#[inline]
fn lerp_coords(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s = s.max(0.0).min((src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear_resize<T: Elem>(x: &ArrayView4<T>, oh: usize, ow: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut y = Array4::<T>::zeros((n, c, oh, ow));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * oh * ow;
        for yo in 0..oh {
            let (y0, y1, fy) = lerp_coords(yo, sy, h);
            for xo in 0..ow {
                let (x0, x1, fx) = lerp_coords(xo, sx, w);
                let v00 = xs[src + y0 * w + x0].to_f64();
                let v01 = xs[src + y0 * w + x1].to_f64();
                let v10 = xs[src + y1 * w + x0].to_f64();
                let v11 = xs[src + y1 * w + x1].to_f64();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                ys[dst + yo * ow + xo] = T::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    y
}

pub fn bilinear_resize_backward<T: Elem>(
    dy: &ArrayView4<T>,
    ih: usize,
    iw: usize,
) -> Array4<T> {
    let (n, c, oh, ow) = dy.dim();
    if (ih, iw) == (oh, ow) {
        return dy.to_owned();
    }
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    let mut dx = Array4::<T>::zeros((n, c, ih, iw));
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for nc in 0..n * c {
        let src = nc * oh * ow;
        let dst = nc * ih * iw;
        for yo in 0..oh {
            let (y0, y1, fy) = lerp_coords(yo, sy, ih);
            for xo in 0..ow {
                let (x0, x1, fx) = lerp_coords(xo, sx, iw);
                let g = dys[src + yo * ow + xo].to_f64();
                dxs[dst + y0 * iw + x0] =
                    dxs[dst + y0 * iw + x0] + T::from_f64(g * (1.0 - fx) * (1.0 - fy));
                dxs[dst + y0 * iw + x1] = dxs[dst + y0 * iw + x1] + T::from_f64(g * fx * (1.0 - fy));
                dxs[dst + y1 * iw + x0] = dxs[dst + y1 * iw + x0] + T::from_f64(g * (1.0 - fx) * fy);
                dxs[dst + y1 * iw + x1] = dxs[dst + y1 * iw + x1] + T::from_f64(g * fx * fy);
            }
        }
    }
    dx
}
