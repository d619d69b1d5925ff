//! Evaluation metrics: spatial depth accuracy (Rel, RMS, log10, delta
//! thresholds) pooled over valid pixels, and the temporal-consistency pair
//! TCC/TMC built on SSIM and TV-L1 optical flow.

pub mod flow;
pub mod ssim;
mod temporal;

pub use flow::{optical_flow, FlowField, FlowParams, FlowResult};
pub use ssim::ssim;
pub use temporal::{tcc, tmc, TemporalMetricConfig};

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Aggregated evaluation scores for a sequence set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub tcc: f64,
    pub tmc: f64,
    pub n_pixels: u64,
    pub n_sequences: u64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.rel,
            self.rms,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.tcc,
            self.tmc,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("metric report has non-finite values".into()));
        }
        if !(self.delta1 <= self.delta2 && self.delta2 <= self.delta3 && self.delta3 <= 1.0) {
            return Err(Error::Format(format!(
                "delta thresholds must be nondecreasing and <= 1: {} {} {}",
                self.delta1, self.delta2, self.delta3
            )));
        }
        Ok(())
    }

    /// Flat `key = value` text, one metric per line.
    pub fn to_kv_string(&self) -> String {
        format!(
            "rel = {}\nrms = {}\nlog10 = {}\ndelta1 = {}\ndelta2 = {}\ndelta3 = {}\ntcc = {}\ntmc = {}\nn_pixels = {}\nn_sequences = {}\n",
            self.rel,
            self.rms,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.tcc,
            self.tmc,
            self.n_pixels,
            self.n_sequences
        )
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accumulator for spatial metrics pooled across an evaluation set.
#[derive(Clone, Copy, Debug, Default)]
pub struct SpatialAccumulator {
    sum_rel: f64,
    sum_sq: f64,
    sum_log10: f64,
    n_delta1: u64,
    n_delta2: u64,
    n_delta3: u64,
    n: u64,
}

impl SpatialAccumulator {
    pub fn add_map(&mut self, d: &Array2<f32>, g: &Array2<f32>, mask: &Array2<bool>) -> Result<()> {
        if d.dim() != g.dim() || d.dim() != mask.dim() {
            return Err(Error::precondition(format!(
                "metric maps must share a shape: {:?} {:?} {:?}",
                d.dim(),
                g.dim(),
                mask.dim()
            )));
        }
        for ((&dv, &gv), &m) in d.iter().zip(g.iter()).zip(mask.iter()) {
            if !m {
                continue;
            }
            let dv = dv as f64;
            let gv = gv as f64;
            let err = dv - gv;
            self.sum_rel += err.abs() / gv;
            self.sum_sq += err * err;
            self.sum_log10 += (dv.log10() - gv.log10()).abs();
            let ratio = (dv / gv).max(gv / dv);
            if ratio < 1.25 {
                self.n_delta1 += 1;
            }
            if ratio < 1.25f64.powi(2) {
                self.n_delta2 += 1;
            }
            if ratio < 1.25f64.powi(3) {
                self.n_delta3 += 1;
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> u64 {
        self.n
    }

    pub fn merge(&mut self, other: &SpatialAccumulator) {
        self.sum_rel += other.sum_rel;
        self.sum_sq += other.sum_sq;
        self.sum_log10 += other.sum_log10;
        self.n_delta1 += other.n_delta1;
        self.n_delta2 += other.n_delta2;
        self.n_delta3 += other.n_delta3;
        self.n += other.n;
    }

    /// (rel, rms, log10, delta1, delta2, delta3)
    pub fn finish(&self) -> Result<(f64, f64, f64, f64, f64, f64)> {
        if self.n == 0 {
            return Err(Error::DegenerateInput(
                "no valid pixels in metric accumulation".into(),
            ));
        }
        let n = self.n as f64;
        Ok((
            self.sum_rel / n,
            (self.sum_sq / n).sqrt(),
            self.sum_log10 / n,
            self.n_delta1 as f64 / n,
            self.n_delta2 as f64 / n,
            self.n_delta3 as f64 / n,
        ))
    }
}

/// Spatial metrics over one batch of maps (a convenience over the
/// accumulator).
pub fn spatial_metrics(
    d: &[Array2<f32>],
    g: &[Array2<f32>],
    masks: &[Array2<bool>],
) -> Result<(f64, f64, f64, f64, f64, f64)> {
    if d.len() != g.len() || d.len() != masks.len() {
        return Err(Error::precondition(
            "spatial_metrics needs aligned d/g/mask lists",
        ));
    }
    let mut acc = SpatialAccumulator::default();
    for ((dm, gm), mm) in d.iter().zip(g.iter()).zip(masks.iter()) {
        acc.add_map(dm, gm, mm)?;
    }
    acc.finish()
}
