//! Dense optical flow by the duality-based TV-L1 iteration: coarse-to-fine
//! pyramid, repeated warping of the second image, and an inner primal-dual
//! loop alternating a pointwise data-term threshold step with a dual ascent
//! on the total-variation regularizer.

use crate::error::{Error, Result};
use ndarray::Array2;

#[derive(Clone, Copy, Debug)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub warps: usize,
    pub iterations: usize,
    /// Data-term weight.
    pub lambda: f64,
    /// Coupling between the data and regularization variables.
    pub theta: f64,
    /// Dual ascent step.
    pub tau: f64,
    /// Mean-update threshold that counts as converged.
    pub tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            warps: 5,
            iterations: 50,
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            tol: 1e-2,
        }
    }
}

/// Dense displacement field in pixels/frame.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub flow: FlowField,
    pub converged: bool,
}

fn bilinear_sample(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn downsample_half(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        bilinear_sample(img, sy, sx)
    })
}

fn upsample_to(field: &Array2<f64>, oh: usize, ow: usize, gain: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        gain * bilinear_sample(field, sy, sx)
    })
}

fn central_gradient(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(w - 1);
        (img[[y, xp]] - img[[y, xm]]) * 0.5
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        (img[[yp, x]] - img[[ym, x]]) * 0.5
    });
    (gx, gy)
}

/// Forward-difference gradient with replicate boundary (zero at far edge).
fn fwd_grad(f: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = f.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        if x + 1 < w {
            f[[y, x + 1]] - f[[y, x]]
        } else {
            0.0
        }
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        if y + 1 < h {
            f[[y + 1, x]] - f[[y, x]]
        } else {
            0.0
        }
    });
    (gx, gy)
}

/// Adjoint of `fwd_grad`: backward-difference divergence.
fn divergence(px: &Array2<f64>, py: &Array2<f64>) -> Array2<f64> {
    let (h, w) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = if x == 0 {
            px[[y, 0]]
        } else if x == w - 1 {
            -px[[y, x - 1]]
        } else {
            px[[y, x]] - px[[y, x - 1]]
        };
        let dy = if y == 0 {
            py[[0, x]]
        } else if y == h - 1 {
            -py[[y - 1, x]]
        } else {
            py[[y, x]] - py[[y - 1, x]]
        };
        dx + dy
    })
}

struct DualField {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl DualField {
    fn zeros(h: usize, w: usize) -> Self {
        DualField {
            x: Array2::zeros((h, w)),
            y: Array2::zeros((h, w)),
        }
    }

    /// p <- (p + sigma * grad(f)) / (1 + sigma * |grad(f)|), elementwise.
    fn ascend(&mut self, f: &Array2<f64>, sigma: f64) {
        let (gx, gy) = fwd_grad(f);
        for ((px, py), (fx, fy)) in self
            .x
            .iter_mut()
            .zip(self.y.iter_mut())
            .zip(gx.iter().zip(gy.iter()))
        {
            let nx = *px + sigma * fx;
            let ny = *py + sigma * fy;
            let mag = (fx * fx + fy * fy).sqrt();
            let den = 1.0 + sigma * mag;
            *px = nx / den;
            *py = ny / den;
        }
    }
}

/// TV-L1 flow between two single-channel images scaled to [0,1].
/// Returns the last iterate and whether the final level's updates fell
/// below tolerance.
pub fn optical_flow(a: &Array2<f64>, b: &Array2<f64>, params: &FlowParams) -> Result<FlowResult> {
    if a.dim() != b.dim() {
        return Err(Error::precondition(format!(
            "flow inputs must share a shape, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < 8 || w < 8 {
        return Err(Error::precondition(format!(
            "flow needs at least 8x8 images, got {h}x{w}"
        )));
    }
    if params.pyramid_scale != 0.5 {
        return Err(Error::precondition("pyramid_scale must be 0.5"));
    }

    // the lambda/theta defaults are calibrated for 8-bit intensity ranges;
    // inputs arrive in [0,1], so work on a 0..255 scale internally (flow
    // output is in pixels and unaffected)
    let a = a.mapv(|v| v * 255.0);
    let b = b.mapv(|v| v * 255.0);

    // pyramid, coarse last
    let mut pyr_a = vec![a.clone()];
    let mut pyr_b = vec![b.clone()];
    for _ in 1..params.pyramid_levels.max(1) {
        let next_a = downsample_half(pyr_a.last().unwrap());
        if next_a.dim().0 < 8 || next_a.dim().1 < 8 {
            break;
        }
        pyr_b.push(downsample_half(pyr_b.last().unwrap()));
        pyr_a.push(next_a);
    }

    let coarse = pyr_a.len() - 1;
    let (ch, cw) = pyr_a[coarse].dim();
    let mut u = Array2::<f64>::zeros((ch, cw));
    let mut v = Array2::<f64>::zeros((ch, cw));
    let mut converged = false;

    for level in (0..=coarse).rev() {
        let i0 = &pyr_a[level];
        let i1 = &pyr_b[level];
        let (lh, lw) = i0.dim();
        if u.dim() != (lh, lw) {
            u = upsample_to(&u, lh, lw, 1.0 / params.pyramid_scale);
            v = upsample_to(&v, lh, lw, 1.0 / params.pyramid_scale);
        }
        let (g1x, g1y) = central_gradient(i1);
        let mut pu = DualField::zeros(lh, lw);
        let mut pv = DualField::zeros(lh, lw);
        let lt = params.lambda * params.theta;
        let sigma = params.tau / params.theta;

        for _ in 0..params.warps {
            // warp the second image and its gradient by the current flow
            let mut i1w = Array2::<f64>::zeros((lh, lw));
            let mut ixw = Array2::<f64>::zeros((lh, lw));
            let mut iyw = Array2::<f64>::zeros((lh, lw));
            for y in 0..lh {
                for x in 0..lw {
                    let sy = y as f64 + v[[y, x]];
                    let sx = x as f64 + u[[y, x]];
                    i1w[[y, x]] = bilinear_sample(i1, sy, sx);
                    ixw[[y, x]] = bilinear_sample(&g1x, sy, sx);
                    iyw[[y, x]] = bilinear_sample(&g1y, sy, sx);
                }
            }
            let u0 = u.clone();
            let v0 = v.clone();
            converged = false;
            for _ in 0..params.iterations {
                let mut max_step = 0.0f64;
                // data step: pointwise shrink on the linearized residual
                for y in 0..lh {
                    for x in 0..lw {
                        let ix = ixw[[y, x]];
                        let iy = iyw[[y, x]];
                        let grad2 = ix * ix + iy * iy;
                        let rho = i1w[[y, x]]
                            + (u[[y, x]] - u0[[y, x]]) * ix
                            + (v[[y, x]] - v0[[y, x]]) * iy
                            - i0[[y, x]];
                        let (du, dv) = if rho < -lt * grad2 {
                            (lt * ix, lt * iy)
                        } else if rho > lt * grad2 {
                            (-lt * ix, -lt * iy)
                        } else if grad2 > 1e-12 {
                            (-rho * ix / grad2, -rho * iy / grad2)
                        } else {
                            (0.0, 0.0)
                        };
                        u[[y, x]] += du;
                        v[[y, x]] += dv;
                        max_step = max_step.max(du.abs().max(dv.abs()));
                    }
                }
                // regularization: dual ascent then primal update
                pu.ascend(&u, sigma);
                pv.ascend(&v, sigma);
                let div_u = divergence(&pu.x, &pu.y);
                let div_v = divergence(&pv.x, &pv.y);
                let mut mean_change = 0.0;
                for y in 0..lh {
                    for x in 0..lw {
                        let nu = u[[y, x]] + params.theta * div_u[[y, x]];
                        let nv = v[[y, x]] + params.theta * div_v[[y, x]];
                        mean_change += (nu - u[[y, x]]).abs() + (nv - v[[y, x]]).abs();
                        u[[y, x]] = nu;
                        v[[y, x]] = nv;
                    }
                }
                mean_change /= (lh * lw) as f64;
                if mean_change < params.tol && max_step < params.tol {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(FlowResult {
        flow: FlowField { u, v },
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let xf = x as f64;
            let yf = y as f64;
            0.5 + 0.20 * (xf / 6.0).sin() * (yf / 7.0).cos() + 0.15 * ((xf + yf) / 9.0).sin()
        })
    }

    fn shift_right(img: &Array2<f64>) -> Array2<f64> {
        let (h, w) = img.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            if x == 0 {
                img[[y, 0]]
            } else {
                img[[y, x - 1]]
            }
        })
    }

    fn median(mut vals: Vec<f64>) -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    }

    #[test]
    fn stationary_input_gives_near_zero_flow() {
        let a = smooth_image(48, 48);
        let r = optical_flow(&a, &a, &FlowParams::default()).unwrap();
        let max = r
            .flow
            .u
            .iter()
            .chain(r.flow.v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 0.05, "max flow {max}");
    }

    #[test]
    fn unit_shift_recovered_on_smooth_image() {
        let a = smooth_image(64, 64);
        let b = shift_right(&a);
        let r = optical_flow(&a, &b, &FlowParams::default()).unwrap();
        // ignore a border band where warping clamps
        let interior_u: Vec<f64> = r
            .flow
            .u
            .indexed_iter()
            .filter(|((y, x), _)| *y >= 8 && *y < 56 && *x >= 8 && *x < 56)
            .map(|(_, &v)| v)
            .collect();
        let interior_v: Vec<f64> = r
            .flow
            .v
            .indexed_iter()
            .filter(|((y, x), _)| *y >= 8 && *y < 56 && *x >= 8 && *x < 56)
            .map(|(_, &v)| v)
            .collect();
        let mu = median(interior_u);
        let mv = median(interior_v);
        assert!((0.7..=1.3).contains(&mu), "median u {mu}");
        assert!(mv.abs() <= 0.2, "median v {mv}");
    }

    #[test]
    fn antisymmetry_on_smooth_shift() {
        let a = smooth_image(64, 64);
        let b = shift_right(&a);
        let fwd = optical_flow(&a, &b, &FlowParams::default()).unwrap();
        let bwd = optical_flow(&b, &a, &FlowParams::default()).unwrap();
        let sum: Vec<f64> = fwd
            .flow
            .u
            .indexed_iter()
            .filter(|((y, x), _)| *y >= 8 && *y < 56 && *x >= 8 && *x < 56)
            .map(|((y, x), &v)| v + bwd.flow.u[[y, x]])
            .collect();
        let m = median(sum);
        assert!(m.abs() <= 0.3, "median u_fwd + u_bwd = {m}");
    }

    #[test]
    fn shape_mismatch_is_precondition_error() {
        let a = smooth_image(16, 16);
        let b = smooth_image(16, 17);
        assert!(matches!(
            optical_flow(&a, &b, &FlowParams::default()),
            Err(Error::Precondition(_))
        ));
    }
}
