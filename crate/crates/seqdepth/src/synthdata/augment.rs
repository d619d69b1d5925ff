//! Training augmentations. Every random decision is drawn once per sequence
//! and applied to all frames, keeping the temporal structure intact; any
//! geometric change hits RGB, depth and mask in lock-step, and depth values
//! themselves are never rescaled.

use super::DepthSequenceSample;
use crate::error::{Error, Result};
use crate::kernels::resize::bilinear_resize;
use crate::rng;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraws {
    pub flip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// The per-sequence random draws `augment` uses for a given seed.
pub fn augment_draws(rng_seed: u64) -> AugmentDraws {
    let mut r = rng::stream(rng_seed, "augment", 0);
    AugmentDraws {
        flip: r.random_bool(0.5),
        angle_deg: r.random_range(-5.0..=5.0),
        brightness: r.random_range(0.6..=1.4),
        contrast: r.random_range(0.6..=1.4),
        saturation: r.random_range(0.6..=1.4),
    }
}

/// Horizontal flip, rotation in [-5, 5] degrees, and photometric jitter with
/// ratios in [0.6, 1.4]; one draw per sequence.
pub fn augment(sample: &DepthSequenceSample, rng_seed: u64) -> DepthSequenceSample {
    let d = augment_draws(rng_seed);
    let mut out = if d.flip {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    out = rotate_degrees(&out, d.angle_deg);
    color_jitter(&out, d.brightness, d.contrast, d.saturation)
}

pub fn flip_horizontal(sample: &DepthSequenceSample) -> DepthSequenceSample {
    let flip3 = |a: &Array3<f32>| {
        let mut v = a.clone();
        v.invert_axis(Axis(2));
        v.as_standard_layout().to_owned()
    };
    let flip2f = |a: &Array2<f32>| {
        let mut v = a.clone();
        v.invert_axis(Axis(1));
        v.as_standard_layout().to_owned()
    };
    let flip2b = |a: &Array2<bool>| {
        let mut v = a.clone();
        v.invert_axis(Axis(1));
        v.as_standard_layout().to_owned()
    };
    DepthSequenceSample {
        rgb: sample.rgb.iter().map(flip3).collect(),
        depth: sample.depth.iter().map(flip2f).collect(),
        valid: sample.valid.iter().map(flip2b).collect(),
        frame_ids: sample.frame_ids.clone(),
        fps: sample.fps,
    }
}

/// Rotate all frames by one angle about the frame center. RGB samples
/// bilinearly; depth and mask use nearest-neighbor so no depth values are
/// invented across edges. Pixels whose source falls outside the frame (or on
/// an invalid source pixel) become invalid with zeroed RGB/depth.
pub fn rotate_degrees(sample: &DepthSequenceSample, angle_deg: f64) -> DepthSequenceSample {
    if angle_deg == 0.0 {
        return sample.clone();
    }
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();

    let mut out = sample.clone();
    for t in 0..sample.n_frames() {
        let mut rgb = Array3::<f32>::zeros((3, h, w));
        let mut depth = Array2::<f32>::zeros((h, w));
        let mut valid = Array2::<bool>::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                // inverse mapping: where does this output pixel come from?
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                let (nx, ny) = (sx.round(), sy.round());
                if nx < 0.0 || ny < 0.0 || nx > (w - 1) as f64 || ny > (h - 1) as f64 {
                    continue;
                }
                let (nxi, nyi) = (nx as usize, ny as usize);
                if !sample.valid[t][[nyi, nxi]] {
                    continue;
                }
                depth[[y, x]] = sample.depth[t][[nyi, nxi]];
                valid[[y, x]] = true;
                // bilinear rgb with clamped corners
                let x0 = sx.floor().clamp(0.0, (w - 1) as f64);
                let y0 = sy.floor().clamp(0.0, (h - 1) as f64);
                let x1 = (x0 + 1.0).min((w - 1) as f64);
                let y1 = (y0 + 1.0).min((h - 1) as f64);
                let fx = (sx - x0).clamp(0.0, 1.0) as f32;
                let fy = (sy - y0).clamp(0.0, 1.0) as f32;
                let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
                for c in 0..3 {
                    let f = &sample.rgb[t];
                    let top = f[[c, y0, x0]] * (1.0 - fx) + f[[c, y0, x1]] * fx;
                    let bot = f[[c, y1, x0]] * (1.0 - fx) + f[[c, y1, x1]] * fx;
                    rgb[[c, y, x]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out.rgb[t] = rgb;
        out.depth[t] = depth;
        out.valid[t] = valid;
    }
    out
}

/// Scale brightness, contrast and saturation of RGB by fixed ratios (shared
/// across frames). Depth and mask are untouched.
pub fn color_jitter(
    sample: &DepthSequenceSample,
    brightness: f64,
    contrast: f64,
    saturation: f64,
) -> DepthSequenceSample {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 {
        return sample.clone();
    }
    let mut out = sample.clone();
    let (b, c, s) = (brightness as f32, contrast as f32, saturation as f32);
    for frame in &mut out.rgb {
        if brightness != 1.0 {
            frame.mapv_inplace(|v| v * b);
        }
        if contrast != 1.0 {
            let gray_mean = {
                let r = frame.index_axis(Axis(0), 0);
                let g = frame.index_axis(Axis(0), 1);
                let bl = frame.index_axis(Axis(0), 2);
                let mut acc = 0.0f64;
                for ((r, g), bl) in r.iter().zip(g.iter()).zip(bl.iter()) {
                    acc += (0.299 * r + 0.587 * g + 0.114 * bl) as f64;
                }
                (acc / (frame.len() / 3) as f64) as f32
            };
            frame.mapv_inplace(|v| (v - gray_mean) * c + gray_mean);
        }
        if saturation != 1.0 {
            let (_, h, w) = frame.dim();
            for y in 0..h {
                for x in 0..w {
                    let gray = 0.299 * frame[[0, y, x]]
                        + 0.587 * frame[[1, y, x]]
                        + 0.114 * frame[[2, y, x]];
                    for ch in 0..3 {
                        let v = frame[[ch, y, x]];
                        frame[[ch, y, x]] = (v - gray) * s + gray;
                    }
                }
            }
        }
        frame.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct CropResizePolicy {
    /// (height, width) after bilinear (RGB) / nearest (depth, mask) resize.
    pub resize_to: (usize, usize),
    /// (height, width) of the crop taken after resizing.
    pub crop_to: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub enum CropMode {
    /// Training: one random offset per sequence.
    RandomSeeded(u64),
    /// Evaluation: center crop.
    Center,
}

fn nearest_resize_f32(a: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
        a[[sy, sx]]
    })
}

fn nearest_resize_bool(a: &Array2<bool>, oh: usize, ow: usize) -> Array2<bool> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
        a[[sy, sx]]
    })
}

/// Bilinear RGB resize, nearest depth/mask resize, then one crop shared by
/// all frames.
pub fn crop_resize(
    sample: &DepthSequenceSample,
    policy: CropResizePolicy,
    mode: CropMode,
) -> Result<DepthSequenceSample> {
    let (h, w) = (sample.height(), sample.width());
    let (rh, rw) = policy.resize_to;
    let (ch, cw) = policy.crop_to;
    if !(ch <= rh && cw <= rw && rh <= h && rw <= w) || ch == 0 || cw == 0 {
        return Err(Error::precondition(format!(
            "crop_resize needs crop <= resize <= original, got original ({h},{w}) resize ({rh},{rw}) crop ({ch},{cw})"
        )));
    }
    if (rh, rw) == (h, w) && (ch, cw) == (h, w) {
        return Ok(sample.clone());
    }
    let (oy, ox) = match mode {
        CropMode::Center => ((rh - ch) / 2, (rw - cw) / 2),
        CropMode::RandomSeeded(seed) => {
            let mut r = rng::stream(seed, "crop", 0);
            (
                if rh > ch { r.random_range(0..=rh - ch) } else { 0 },
                if rw > cw { r.random_range(0..=rw - cw) } else { 0 },
            )
        }
    };

    let mut out = sample.clone();
    for t in 0..sample.n_frames() {
        let resized_rgb = if (rh, rw) == (h, w) {
            sample.rgb[t].clone()
        } else {
            let x4: Array4<f32> = sample.rgb[t].clone().insert_axis(Axis(0));
            bilinear_resize(&x4.view(), rh, rw).index_axis_move(Axis(0), 0)
        };
        let resized_depth = if (rh, rw) == (h, w) {
            sample.depth[t].clone()
        } else {
            nearest_resize_f32(&sample.depth[t], rh, rw)
        };
        let resized_valid = if (rh, rw) == (h, w) {
            sample.valid[t].clone()
        } else {
            nearest_resize_bool(&sample.valid[t], rh, rw)
        };
        out.rgb[t] = resized_rgb
            .slice(ndarray::s![.., oy..oy + ch, ox..ox + cw])
            .as_standard_layout()
            .to_owned();
        out.depth[t] = resized_depth
            .slice(ndarray::s![oy..oy + ch, ox..ox + cw])
            .as_standard_layout()
            .to_owned();
        out.valid[t] = resized_valid
            .slice(ndarray::s![oy..oy + ch, ox..ox + cw])
            .as_standard_layout()
            .to_owned();
    }
    Ok(out)
}
