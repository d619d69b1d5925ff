//! Temporal-consistency metrics over depth sequences.
//!
//! TCC compares consecutive-frame absolute-difference maps of the
//! prediction against the ground truth with SSIM; TMC compares the optical
//! flow of consecutive predicted frames against the flow of the
//! corresponding ground-truth frames (SSIM of a flow field is the mean of
//! the per-component scores).

use super::flow::{optical_flow, FlowParams};
use super::ssim::ssim;
use crate::error::{Error, Result};
use ndarray::Array2;

#[derive(Clone, Copy, Debug)]
pub struct TemporalMetricConfig {
    /// SSIM dynamic range for depth-difference maps, meters.
    pub depth_range: f64,
    /// Depth normalization bound before flow estimation, meters.
    pub max_depth: f64,
    /// SSIM dynamic range for flow components, pixels.
    pub flow_range: f64,
    pub flow: FlowParams,
}

impl Default for TemporalMetricConfig {
    fn default() -> Self {
        TemporalMetricConfig {
            depth_range: 10.0,
            max_depth: 10.0,
            flow_range: 2.0,
            flow: FlowParams::default(),
        }
    }
}

fn check_pair(d: &[Array2<f64>], g: &[Array2<f64>]) -> Result<()> {
    if d.len() != g.len() || d.len() < 2 {
        return Err(Error::precondition(format!(
            "temporal metrics need aligned sequences with n >= 2, got {} vs {}",
            d.len(),
            g.len()
        )));
    }
    for (i, (a, b)) in d.iter().zip(g.iter()).enumerate() {
        if a.dim() != b.dim() || a.dim() != d[0].dim() {
            return Err(Error::precondition(format!("frame {i} dims disagree")));
        }
    }
    Ok(())
}

/// Temporal change consistency: mean SSIM between |d_i - d_{i+1}| and
/// |g_i - g_{i+1}|.
pub fn tcc(d: &[Array2<f64>], g: &[Array2<f64>], cfg: &TemporalMetricConfig) -> Result<f64> {
    check_pair(d, g)?;
    let mut acc = 0.0;
    for i in 0..d.len() - 1 {
        let dd = (&d[i] - &d[i + 1]).mapv(f64::abs);
        let gd = (&g[i] - &g[i + 1]).mapv(f64::abs);
        acc += ssim(&dd, &gd, cfg.depth_range);
    }
    Ok(acc / (d.len() - 1) as f64)
}

/// Temporal motion consistency: mean SSIM between the optical flow of
/// consecutive predicted frames and the flow of the matching ground-truth
/// frames. Depth maps are normalized to [0,1] before flow estimation.
pub fn tmc(d: &[Array2<f64>], g: &[Array2<f64>], cfg: &TemporalMetricConfig) -> Result<f64> {
    check_pair(d, g)?;
    let norm = |m: &Array2<f64>| m.mapv(|v| (v / cfg.max_depth).clamp(0.0, 1.0));
    let mut acc = 0.0;
    for i in 0..d.len() - 1 {
        let fd = optical_flow(&norm(&d[i]), &norm(&d[i + 1]), &cfg.flow)?;
        let fg = optical_flow(&norm(&g[i]), &norm(&g[i + 1]), &cfg.flow)?;
        let su = ssim(&fd.flow.u, &fg.flow.u, cfg.flow_range);
        let sv = ssim(&fd.flow.v, &fg.flow.v, cfg.flow_range);
        acc += 0.5 * (su + sv);
    }
    Ok(acc / (d.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn moving_scene(n: usize, vx: f64, seed: u64) -> Vec<Array2<f64>> {
        // a bright square sliding over a far background
        let mut r = crate::rng::stream(seed, "tmc-scene", 0);
        let base_y = r.random_range(10.0..20.0);
        (0..n)
            .map(|t| {
                Array2::from_shape_fn((48, 48), |(y, x)| {
                    let cx = 14.0 + vx * t as f64;
                    let cy = base_y;
                    if (x as f64 - cx).abs() < 7.0 && (y as f64 - cy).abs() < 7.0 {
                        2.0
                    } else {
                        8.0
                    }
                })
            })
            .collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let g = moving_scene(4, 1.0, 1);
        let cfg = TemporalMetricConfig::default();
        assert_eq!(tcc(&g, &g, &cfg).unwrap(), 1.0);
        let tm = tmc(&g, &g, &cfg).unwrap();
        assert!((tm - 1.0).abs() < 1e-9, "tmc(G,G) = {tm}");
    }

    #[test]
    fn two_frames_reduce_to_single_ssim() {
        let g = moving_scene(2, 1.0, 2);
        let mut d = g.clone();
        d[1].mapv_inplace(|v| v + 0.3);
        let cfg = TemporalMetricConfig::default();
        let t = tcc(&d, &g, &cfg).unwrap();
        let dd = (&d[0] - &d[1]).mapv(f64::abs);
        let gd = (&g[0] - &g[1]).mapv(f64::abs);
        assert_eq!(t, ssim(&dd, &gd, cfg.depth_range));
    }

    #[test]
    fn tcc_decreases_with_growing_temporal_noise() {
        let g = moving_scene(5, 1.0, 3);
        let cfg = TemporalMetricConfig::default();
        let mut scores = Vec::new();
        for (k, amp) in [0.0, 0.05, 0.1].iter().enumerate() {
            let mut r = crate::rng::stream(40 + k as u64, "noise", 0);
            let d: Vec<Array2<f64>> = g
                .iter()
                .map(|f| f.mapv(|v| v + cfg.depth_range * amp * r.random_range(-1.0..1.0)))
                .collect();
            scores.push(tcc(&d, &g, &cfg).unwrap());
        }
        assert!(
            scores[0] > scores[1] && scores[1] > scores[2],
            "tcc not decreasing: {scores:?}"
        );
    }

    #[test]
    fn static_sequences_give_tmc_near_one() {
        let frame = moving_scene(1, 0.0, 4).pop().unwrap();
        let seq: Vec<Array2<f64>> = (0..3).map(|_| frame.clone()).collect();
        let cfg = TemporalMetricConfig::default();
        let tm = tmc(&seq, &seq, &cfg).unwrap();
        assert!((tm - 1.0).abs() < 0.05, "static tmc {tm}");
    }

    #[test]
    fn reversed_motion_scores_below_matched_motion() {
        let g = moving_scene(4, 1.5, 5);
        let d_rev = moving_scene(4, -1.5, 5);
        let cfg = TemporalMetricConfig::default();
        let matched = tmc(&g, &g, &cfg).unwrap();
        let opposed = tmc(&d_rev, &g, &cfg).unwrap();
        assert!(
            opposed < matched,
            "opposed {opposed} should be < matched {matched}"
        );
    }

    #[test]
    fn length_mismatch_is_precondition_error() {
        let g = moving_scene(3, 1.0, 6);
        let cfg = TemporalMetricConfig::default();
        assert!(matches!(
            tcc(&g[..2], &g, &cfg),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            tcc(&g[..1], &g[..1], &cfg),
            Err(Error::Precondition(_))
        ));
    }
}
