//! Per-frame spatial feature extraction: a four-stage strided encoder, a
//! decoder built from up-projection modules, and multi-scale feature fusion
//! (MFF) that folds every encoder scale into the decoder output.
//!
//! Stage k of the encoder halves the spatial dims (strides 2/4/8/16); the
//! decoder applies four up-projection modules, upsampling until the
//! configured output stride is reached and refining at constant resolution
//! after that. MFF projects each encoder scale to a small fixed channel
//! count, resamples it to the decoder resolution, and one fusion convolution
//! produces the feature map handed to the temporal core.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNormLayer, BoundParams, Conv2dLayer, ParamStore};
use crate::rng;
use ndarray::{Array3, Array4, ArrayD, Axis};

/// Channels each encoder scale is projected to inside the MFF block.
pub const MFF_PROJ_CHANNELS: usize = 16;
/// Every input dim must divide this (the deepest encoder stride).
pub const DIM_DIVISOR: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BackbonePreset {
    Tiny,
    Small,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    /// Output channels of the four encoder stages.
    pub encoder_channels: [usize; 4],
    /// Channels of the emitted feature map (the `c` consumed by the CLSTM).
    pub feature_channels: usize,
    /// Spatial downsampling of the feature map relative to the input; 2 or 4.
    pub output_stride: usize,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig {
            preset: BackbonePreset::Tiny,
            encoder_channels: [16, 32, 64, 128],
            feature_channels: 64,
            output_stride: 4,
        }
    }

    pub fn small() -> Self {
        BackboneConfig {
            preset: BackbonePreset::Small,
            encoder_channels: [32, 64, 128, 256],
            feature_channels: 128,
            output_stride: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 16 {
            return Err(Error::precondition(format!(
                "feature_channels must be >= 16, got {}",
                self.feature_channels
            )));
        }
        if !(self.output_stride == 2 || self.output_stride == 4) {
            return Err(Error::precondition(format!(
                "output_stride must be 2 or 4, got {}",
                self.output_stride
            )));
        }
        if self.encoder_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::precondition(format!(
                "encoder_channels must be nondecreasing, got {:?}",
                self.encoder_channels
            )));
        }
        if self.encoder_channels[0] == 0 {
            return Err(Error::precondition("encoder_channels must be positive"));
        }
        Ok(())
    }
}

/// Spatial features for one frame: (c, H/stride, W/stride).
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Elem = f32> {
    pub values: Array3<T>,
    pub source_frame: i64,
}

struct EncoderStage {
    conv_down: Conv2dLayer,
    bn1: BatchNormLayer,
    conv: Conv2dLayer,
    bn2: BatchNormLayer,
}

struct UpProjection {
    upsample: bool,
    conv: Conv2dLayer,
    bn: BatchNormLayer,
}

struct MffBranch {
    proj: Conv2dLayer,
    bn: BatchNormLayer,
}

pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<EncoderStage>,
    decoder: Vec<UpProjection>,
    mff: Vec<MffBranch>,
    fuse: Conv2dLayer,
    fuse_bn: BatchNormLayer,
}

impl Backbone {
    /// Builds layers into `ps` under the `backbone.` prefix, deterministic in
    /// `seed`.
    pub fn new<T: Elem>(config: &BackboneConfig, ps: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "backbone-init", 0);
        let ch = config.encoder_channels;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (k, &out_ch) in ch.iter().enumerate() {
            stages.push(EncoderStage {
                conv_down: Conv2dLayer::new(
                    ps,
                    &format!("backbone.enc{k}.down"),
                    in_ch,
                    out_ch,
                    3,
                    2,
                    1,
                    &mut r,
                ),
                bn1: BatchNormLayer::new(ps, &format!("backbone.enc{k}.bn1"), out_ch),
                conv: Conv2dLayer::new(
                    ps,
                    &format!("backbone.enc{k}.conv"),
                    out_ch,
                    out_ch,
                    3,
                    1,
                    1,
                    &mut r,
                ),
                bn2: BatchNormLayer::new(ps, &format!("backbone.enc{k}.bn2"), out_ch),
            });
            in_ch = out_ch;
        }

        // four up-projection modules: halve channels each time, double
        // resolution until the output stride is reached
        let n_upsamples = match config.output_stride {
            4 => 2,
            _ => 3,
        };
        let mut decoder = Vec::new();
        let mut dch = ch[3];
        for m in 0..4 {
            let out_ch = (dch / 2).max(4);
            decoder.push(UpProjection {
                upsample: m < n_upsamples,
                conv: Conv2dLayer::new(
                    ps,
                    &format!("backbone.dec{m}.conv"),
                    dch,
                    out_ch,
                    5,
                    1,
                    2,
                    &mut r,
                ),
                bn: BatchNormLayer::new(ps, &format!("backbone.dec{m}.bn"), out_ch),
            });
            dch = out_ch;
        }

        let mut mff = Vec::new();
        for (k, &stage_ch) in ch.iter().enumerate() {
            mff.push(MffBranch {
                proj: Conv2dLayer::new(
                    ps,
                    &format!("backbone.mff{k}.proj"),
                    stage_ch,
                    MFF_PROJ_CHANNELS,
                    1,
                    1,
                    0,
                    &mut r,
                ),
                bn: BatchNormLayer::new(ps, &format!("backbone.mff{k}.bn"), MFF_PROJ_CHANNELS),
            });
        }

        let fuse_in = 4 * MFF_PROJ_CHANNELS + dch;
        let fuse = Conv2dLayer::new(
            ps,
            "backbone.fuse",
            fuse_in,
            config.feature_channels,
            3,
            1,
            1,
            &mut r,
        );
        let fuse_bn = BatchNormLayer::new(ps, "backbone.fuse_bn", config.feature_channels);

        Ok(Backbone {
            config: config.clone(),
            stages,
            decoder,
            mff,
            fuse,
            fuse_bn,
        })
    }

    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % DIM_DIVISOR != 0 || w % DIM_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::precondition(format!(
                "frame dims must be divisible by {DIM_DIVISOR}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Graph forward for training; input (N,3,H,W), output (N,c,H/os,W/os).
    pub fn forward_graph<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        ps: &mut ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Var {
        let (th, tw) = {
            let s = g.value(x).shape();
            (s[2] / self.config.output_stride, s[3] / self.config.output_stride)
        };
        let mut cur = x;
        let mut scales = Vec::with_capacity(4);
        for st in &self.stages {
            let c1 = st.conv_down.forward(g, bp, cur);
            let b1 = st.bn1.forward(g, bp, ps, c1, train);
            let r1 = g.relu(b1);
            let c2 = st.conv.forward(g, bp, r1);
            let b2 = st.bn2.forward(g, bp, ps, c2, train);
            cur = g.relu(b2);
            scales.push(cur);
        }
        for up in &self.decoder {
            if up.upsample {
                cur = g.nearest_up2x(cur);
            }
            let c = up.conv.forward(g, bp, cur);
            let b = up.bn.forward(g, bp, ps, c, train);
            cur = g.relu(b);
        }
        let mut parts = Vec::with_capacity(5);
        for (branch, &scale) in self.mff.iter().zip(scales.iter()) {
            let p = branch.proj.forward(g, bp, scale);
            let b = branch.bn.forward(g, bp, ps, p, train);
            let r = g.relu(b);
            parts.push(g.bilinear_resize(r, th, tw));
        }
        parts.push(cur);
        let cat = g.concat(&parts, 1);
        let f = self.fuse.forward(g, bp, cat);
        let fb = self.fuse_bn.forward(g, bp, ps, f, train);
        g.relu(fb)
    }

    /// Inference forward (running-statistics batch norm, no tape).
    pub fn infer<T: Elem>(&self, ps: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (_, _, h, w) = x.dim();
        let (th, tw) = (h / self.config.output_stride, w / self.config.output_stride);
        let relu = |a: ArrayD<T>| a.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let mut cur = x.clone();
        let mut scales = Vec::with_capacity(4);
        for st in &self.stages {
            let c1 = st.conv_down.infer(ps, &cur);
            let b1 = relu(st.bn1.infer(ps, &c1.into_dyn()));
            let c2 = st.conv.infer(ps, &b1.into_dimensionality().unwrap());
            let b2 = relu(st.bn2.infer(ps, &c2.into_dyn()));
            cur = b2.into_dimensionality().unwrap();
            scales.push(cur.clone());
        }
        for up in &self.decoder {
            if up.upsample {
                cur = crate::kernels::resize::nearest_up2x(&cur.view());
            }
            let c = up.conv.infer(ps, &cur);
            let b = relu(up.bn.infer(ps, &c.into_dyn()));
            cur = b.into_dimensionality().unwrap();
        }
        let mut parts: Vec<Array4<T>> = Vec::with_capacity(5);
        for (branch, scale) in self.mff.iter().zip(scales.iter()) {
            let p = branch.proj.infer(ps, scale);
            let b = relu(branch.bn.infer(ps, &p.into_dyn()));
            let b4: Array4<T> = b.into_dimensionality().unwrap();
            parts.push(crate::kernels::resize::bilinear_resize(&b4.view(), th, tw));
        }
        parts.push(cur);
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views).expect("mff concat");
        let cat = cat.as_standard_layout().to_owned();
        let f = self.fuse.infer(ps, &cat);
        let fb = relu(self.fuse_bn.infer(ps, &f.into_dyn()));
        fb.into_dimensionality().unwrap()
    }
}

/// Fresh deterministic parameters for a backbone (fan-in-scaled weights,
/// zero biases); returns the model and the store holding its parameters.
pub fn init_backbone<T: Elem>(
    config: &BackboneConfig,
    seed: u64,
) -> Result<(Backbone, ParamStore<T>)> {
    let mut ps = ParamStore::new();
    let bb = Backbone::new(config, &mut ps, seed)?;
    Ok((bb, ps))
}

/// Batch feature extraction (inference mode).
pub fn extract_features<T: Elem>(
    backbone: &Backbone,
    ps: &ParamStore<T>,
    frames: &Array4<T>,
    first_frame_id: i64,
) -> Result<Vec<FeatureMap<T>>> {
    let (_, c, h, w) = frames.dim();
    if c != 3 {
        return Err(Error::precondition(format!("frames must be RGB, got {c} channels")));
    }
    backbone.check_input_dims(h, w)?;
    let out = backbone.infer(ps, frames);
    Ok(out
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, f)| FeatureMap {
            values: f.to_owned(),
            source_frame: first_frame_id + i as i64,
        })
        .collect())
}
