//! On-disk sequence layout:
//!
//! ```text
//! <root>/<sequence_id>/rgb/%06d.png     8-bit, 3-channel
//! <root>/<sequence_id>/depth/%06d.png   16-bit single-channel, raw = m * depth_scale
//! <root>/<sequence_id>/meta.json        {"fps": .., "depth_scale": ..}
//! ```
//!
//! A raw depth of 0 marks an invalid pixel.

use super::DepthSequenceSample;
use crate::error::{Error, Result};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub fps: f64,
    pub depth_scale: f64,
}

fn frame_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("{idx:06}.png"))
}

pub fn write_sequence(
    root: &Path,
    sequence_id: &str,
    sample: &DepthSequenceSample,
    depth_scale: f64,
) -> Result<()> {
    sample.validate()?;
    if depth_scale <= 0.0 || !depth_scale.is_finite() {
        return Err(Error::precondition(format!(
            "depth_scale must be positive, got {depth_scale}"
        )));
    }
    let seq_dir = root.join(sequence_id);
    let rgb_dir = seq_dir.join("rgb");
    let depth_dir = seq_dir.join("depth");
    fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;

    let (h, w) = (sample.height(), sample.width());
    for (t, ((rgb, depth), valid)) in sample
        .rgb
        .iter()
        .zip(sample.depth.iter())
        .zip(sample.valid.iter())
        .enumerate()
    {
        let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = core::array::from_fn(|c| {
                    (rgb[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        let p = frame_path(&rgb_dir, t);
        img.save(&p)
            .map_err(|e| Error::io(&p, std::io::Error::other(e)))?;

        let mut dimg = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let raw = if valid[[y, x]] {
                    ((depth[[y, x]] as f64 * depth_scale).round())
                        .clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                };
                dimg.put_pixel(x as u32, y as u32, Luma([raw]));
            }
        }
        let p = frame_path(&depth_dir, t);
        dimg.save(&p)
            .map_err(|e| Error::io(&p, std::io::Error::other(e)))?;
    }

    let meta = SequenceMeta {
        fps: sample.fps,
        depth_scale,
    };
    let meta_path = seq_dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta encode: {e}")))?;
    fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn read_meta(root: &Path, sequence_id: &str) -> Result<SequenceMeta> {
    let meta_path = root.join(sequence_id).join("meta.json");
    let body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))
}

/// Number of frames present in a sequence directory.
pub fn sequence_len(root: &Path, sequence_id: &str) -> Result<usize> {
    let rgb_dir = root.join(sequence_id).join("rgb");
    let mut count = 0usize;
    while frame_path(&rgb_dir, count).exists() {
        count += 1;
    }
    if count == 0 {
        return Err(Error::io(
            frame_path(&rgb_dir, 0),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frames"),
        ));
    }
    Ok(count)
}

/// Sequence ids under a dataset root, sorted for reproducible ordering.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("meta.json").exists() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_sequence(
    root: &Path,
    sequence_id: &str,
    start: usize,
    n_frames: usize,
) -> Result<DepthSequenceSample> {
    if n_frames == 0 {
        return Err(Error::precondition("n_frames must be >= 1"));
    }
    let meta = read_meta(root, sequence_id)?;
    let seq_dir = root.join(sequence_id);
    let mut rgb = Vec::with_capacity(n_frames);
    let mut depth = Vec::with_capacity(n_frames);
    let mut valid = Vec::with_capacity(n_frames);
    let mut dims: Option<(usize, usize)> = None;
    for t in start..start + n_frames {
        let rp = frame_path(&seq_dir.join("rgb"), t);
        let rimg = image::open(&rp)
            .map_err(|e| Error::io(&rp, std::io::Error::other(e)))?
            .into_rgb8();
        let (w, h) = (rimg.width() as usize, rimg.height() as usize);

        let dp = frame_path(&seq_dir.join("depth"), t);
        let dimg = image::open(&dp)
            .map_err(|e| Error::io(&dp, std::io::Error::other(e)))?
            .into_luma16();
        if (dimg.width() as usize, dimg.height() as usize) != (w, h) {
            return Err(Error::Format(format!(
                "frame {t} of {sequence_id}: rgb is {w}x{h} but depth is {}x{}",
                dimg.width(),
                dimg.height()
            )));
        }
        if let Some((h0, w0)) = dims {
            if (h, w) != (h0, w0) {
                return Err(Error::Format(format!(
                    "frame {t} of {sequence_id}: dims {w}x{h} differ from first frame"
                )));
            }
        } else {
            dims = Some((h, w));
        }

        let mut rf = Array3::<f32>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = rimg.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    rf[[c, y, x]] = px[c] as f32 / 255.0;
                }
            }
        }
        let mut df = Array2::<f32>::zeros((h, w));
        let mut mf = Array2::<bool>::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let raw = dimg.get_pixel(x as u32, y as u32).0[0];
                if raw > 0 {
                    df[[y, x]] = (raw as f64 / meta.depth_scale) as f32;
                    mf[[y, x]] = true;
                }
            }
        }
        rgb.push(rf);
        depth.push(df);
        valid.push(mf);
    }
    Ok(DepthSequenceSample {
        rgb,
        depth,
        valid,
        frame_ids: (start as i64..(start + n_frames) as i64).collect(),
        fps: meta.fps,
    })
}
