//! Spatial training loss: a logarithmic L1 depth term plus gradient and
//! surface-normal terms, each averaged over valid pixels only, and the
//! combined objective that adds the weighted adversarial temporal term.
//!
//! Spatial derivatives are forward differences with a replicate boundary
//! (the difference at the last row/column is zero). A pixel contributes to
//! the gradient/normal terms only when it and both forward neighbors are
//! valid.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use ndarray::ArrayD;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpatialLossConfig {
    /// Weight of the gradient term.
    pub lambda: f64,
    /// Weight of the surface-normal term.
    pub mu: f64,
    /// Weight of the temporal term in the combined objective.
    pub alpha: f64,
    /// Stabilizer inside the normal-term square roots.
    pub eps_normal: f64,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        SpatialLossConfig {
            lambda: 1.0,
            mu: 1.0,
            alpha: 0.1,
            eps_normal: 1e-8,
        }
    }
}

impl SpatialLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("eps_normal", self.eps_normal),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::precondition(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Elementwise ln(|x - y| + 1).
pub fn log_l1<T: Elem>(x: &ArrayD<T>, y: &ArrayD<T>) -> ArrayD<T> {
    assert_eq!(x.shape(), y.shape(), "log_l1 shape mismatch");
    let mut out = x.clone();
    out.zip_mut_with(y, |a, &b| *a = (*a - b).abs().ln_1p());
    out
}

fn check_shapes<T: Elem>(d: &ArrayD<T>, g: &ArrayD<T>, mask: &ArrayD<bool>) -> Result<()> {
    if d.shape() != g.shape() || d.shape() != mask.shape() {
        return Err(Error::precondition(format!(
            "loss inputs must share a shape: d {:?}, g {:?}, mask {:?}",
            d.shape(),
            g.shape(),
            mask.shape()
        )));
    }
    if d.ndim() < 2 {
        return Err(Error::precondition("loss inputs must be at least 2-d"));
    }
    Ok(())
}

fn masked_mean<T: Elem>(values: &ArrayD<T>, mask: &ArrayD<bool>) -> Result<T> {
    let mut acc = T::zero();
    let mut count = 0usize;
    for (v, &m) in values.iter().zip(mask.iter()) {
        if m {
            acc = acc + *v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("mask has no valid pixels".into()));
    }
    Ok(acc / T::from_f64(count as f64))
}

/// Mean logarithmic L1 error over valid pixels.
pub fn depth_loss<T: Elem>(d: &ArrayD<T>, g: &ArrayD<T>, mask: &ArrayD<bool>) -> Result<T> {
    check_shapes(d, g, mask)?;
    masked_mean(&log_l1(d, g), mask)
}

/// Forward difference along the last axis (columns), replicate boundary.
fn diff_cols<T: Elem>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut g = Graph::<T>::new();
    let v = g.constant(x.clone());
    let d = g.diff_cols(v);
    g.value(d).clone()
}

fn diff_rows<T: Elem>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut g = Graph::<T>::new();
    let v = g.constant(x.clone());
    let d = g.diff_rows(v);
    g.value(d).clone()
}

/// Valid for derivative terms: the pixel and both forward neighbors are
/// valid (a missing neighbor replicates the pixel itself, hence stays valid).
pub fn derivative_mask(mask: &ArrayD<bool>) -> ArrayD<bool> {
    let shape = mask.shape().to_vec();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let b: usize = shape[..r - 2].iter().product::<usize>().max(1);
    let ms = mask.as_standard_layout();
    let ms = ms.as_slice().expect("standard layout");
    let mut out = vec![false; mask.len()];
    for bi in 0..b {
        let base = bi * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                let right = if x + 1 < w { ms[i + 1] } else { ms[i] };
                let down = if y + 1 < h { ms[i + w] } else { ms[i] };
                out[i] = ms[i] && right && down;
            }
        }
    }
    ArrayD::from_shape_vec(mask.raw_dim(), out).expect("shape preserved")
}

/// Mean over derivative-valid pixels of F(dx d, dx g) + F(dy d, dy g).
pub fn grad_loss<T: Elem>(d: &ArrayD<T>, g: &ArrayD<T>, mask: &ArrayD<bool>) -> Result<T> {
    check_shapes(d, g, mask)?;
    let dmask = derivative_mask(mask);
    let fx = log_l1(&diff_cols(d), &diff_cols(g));
    let fy = log_l1(&diff_rows(d), &diff_rows(g));
    let sum = &fx + &fy;
    masked_mean(&sum, &dmask).map_err(|_| {
        Error::DegenerateInput("no pixel has all forward neighbors valid".into())
    })
}

/// Mean over derivative-valid pixels of one minus the cosine between the
/// surface normals [-dx, -dy, 1] of estimate and ground truth.
///
/// `eps` guards the square root against underflow; the squared norms carry a
/// constant +1 component so the guard only engages below that, which keeps
/// the loss exactly zero on identical inputs. The per-pixel term is clamped
/// at zero so float rounding can never produce a negative loss.
pub fn normal_loss<T: Elem>(
    d: &ArrayD<T>,
    g: &ArrayD<T>,
    mask: &ArrayD<bool>,
    eps: f64,
) -> Result<T> {
    check_shapes(d, g, mask)?;
    let dmask = derivative_mask(mask);
    let (dxd, dyd) = (diff_cols(d), diff_rows(d));
    let (dxg, dyg) = (diff_cols(g), diff_rows(g));
    let one = T::one();
    let epst = T::from_f64(eps);
    let mut term = ArrayD::<T>::zeros(d.raw_dim());
    for (i, t) in term.iter_mut().enumerate() {
        let (a1, a2) = (dxd.as_slice().unwrap()[i], dyd.as_slice().unwrap()[i]);
        let (b1, b2) = (dxg.as_slice().unwrap()[i], dyg.as_slice().unwrap()[i]);
        let dot = a1 * b1 + a2 * b2 + one;
        let na2 = (a1 * a1 + a2 * a2 + one).max(epst);
        let nb2 = (b1 * b1 + b2 * b2 + one).max(epst);
        *t = (one - dot / (na2 * nb2).sqrt()).max(T::zero());
    }
    masked_mean(&term, &dmask).map_err(|_| {
        Error::DegenerateInput("no pixel has all forward neighbors valid".into())
    })
}

/// depth + lambda * grad + mu * normal.
pub fn spatial_loss<T: Elem>(
    d: &ArrayD<T>,
    g: &ArrayD<T>,
    mask: &ArrayD<bool>,
    cfg: &SpatialLossConfig,
) -> Result<T> {
    cfg.validate()?;
    let ld = depth_loss(d, g, mask)?;
    let lg = grad_loss(d, g, mask)?;
    let ln = normal_loss(d, g, mask, cfg.eps_normal)?;
    Ok(ld + T::from_f64(cfg.lambda) * lg + T::from_f64(cfg.mu) * ln)
}

/// spatial + alpha * temporal.
pub fn total_loss<T: Elem>(spatial: T, temporal: T, cfg: &SpatialLossConfig) -> T {
    spatial + T::from_f64(cfg.alpha) * temporal
}

/// Per-term spatial loss on the tape, for training. `gt` and `mask` are
/// constants; returns (depth, grad, normal, weighted total).
pub fn spatial_loss_graph<T: Elem>(
    g: &mut Graph<T>,
    d: Var,
    gt: &ArrayD<T>,
    mask: &ArrayD<bool>,
    cfg: &SpatialLossConfig,
) -> Result<SpatialLossVars> {
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::DegenerateInput("mask has no valid pixels".into()));
    }
    let dmask = derivative_mask(mask);
    let n_dvalid = dmask.iter().filter(|&&m| m).count();
    if n_dvalid == 0 {
        return Err(Error::DegenerateInput(
            "no pixel has all forward neighbors valid".into(),
        ));
    }
    let w_depth = mask.mapv(|m| {
        if m {
            T::one() / T::from_f64(n_valid as f64)
        } else {
            T::zero()
        }
    });
    let w_deriv = dmask.mapv(|m| {
        if m {
            T::one() / T::from_f64(n_dvalid as f64)
        } else {
            T::zero()
        }
    });

    let gt_v = g.constant(gt.clone());
    let wd = g.constant(w_depth);
    let wg = g.constant(w_deriv);

    // depth term
    let diff = g.sub(d, gt_v);
    let a = g.abs(diff);
    let l = g.ln1p(a);
    let lw = g.mul(l, wd);
    let l_depth = g.sum_all(lw);

    // derivatives
    let dxd = g.diff_cols(d);
    let dyd = g.diff_rows(d);
    let dxg = g.constant(diff_cols(gt));
    let dyg = g.constant(diff_rows(gt));

    // gradient term
    let gx = {
        let s = g.sub(dxd, dxg);
        let a = g.abs(s);
        g.ln1p(a)
    };
    let gy = {
        let s = g.sub(dyd, dyg);
        let a = g.abs(s);
        g.ln1p(a)
    };
    let gsum = g.add(gx, gy);
    let gw = g.mul(gsum, wg);
    let l_grad = g.sum_all(gw);

    // normal term; the +1 in the squared norms keeps them above eps_normal,
    // so the guard in the array version is a provable no-op here and the two
    // paths agree bitwise
    let one_arr = g.constant(ArrayD::from_elem(gt.raw_dim(), T::one()));
    let dot = {
        let xx = g.mul(dxd, dxg);
        let yy = g.mul(dyd, dyg);
        let s = g.add(xx, yy);
        g.add(s, one_arr)
    };
    let na2 = {
        let xx = g.mul(dxd, dxd);
        let yy = g.mul(dyd, dyd);
        let s = g.add(xx, yy);
        g.add(s, one_arr)
    };
    let nb2 = {
        let xx = g.mul(dxg, dxg);
        let yy = g.mul(dyg, dyg);
        let s = g.add(xx, yy);
        g.add(s, one_arr)
    };
    let prod = g.mul(na2, nb2);
    let denom = g.sqrt(prod);
    let cos = g.div(dot, denom);
    let one_minus = {
        let n = g.mul_scalar(cos, -T::one());
        let s = g.add(n, one_arr);
        g.relu(s)
    };
    let nw = g.mul(one_minus, wg);
    let l_normal = g.sum_all(nw);

    let lg_w = g.mul_scalar(l_grad, T::from_f64(cfg.lambda));
    let ln_w = g.mul_scalar(l_normal, T::from_f64(cfg.mu));
    let t = g.add(l_depth, lg_w);
    let total = g.add(t, ln_w);
    Ok(SpatialLossVars {
        depth: l_depth,
        grad: l_grad,
        normal: l_normal,
        total,
    })
}

pub struct SpatialLossVars {
    pub depth: Var,
    pub grad: Var,
    pub normal: Var,
    pub total: Var,
}
