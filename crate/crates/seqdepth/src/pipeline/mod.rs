//! Training orchestration, evaluation, and checkpoint persistence.
//!
//! One generator step per batch (backbone + temporal head under the spatial
//! loss, plus the adversarial temporal term once warmup ends), then one
//! discriminator step on real vs. predicted (ground-truth-mixed) clips.
//! The generator uses an adaptive-moment optimizer with the configured
//! learning-rate decay; the discriminator uses momentum SGD.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, FORMAT_VERSION};

use crate::adversary::{self, Discriminator, DiscriminatorConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::clstm::{logits_to_depth_graph, BaselineHead, Clstm, DEFAULT_D_MIN};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{spatial_loss_graph, SpatialLossConfig};
use crate::metrics::{
    tcc, tmc, MetricReport, SpatialAccumulator, TemporalMetricConfig,
};
use crate::nn::{Adam, ParamStore, SgdMomentum};
use crate::rng;
use crate::synthdata::{self, DepthSequenceSample};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub gen_lr: f64,
    /// Multiply the generator learning rate by 0.1 after every this many
    /// epochs.
    pub lr_decay_every: usize,
    pub disc_lr: f64,
    pub warmup_epochs: usize,
    pub n_frames: usize,
    pub batch_sequences: usize,
    pub seed: u64,
    pub use_clstm: bool,
    pub use_gan: bool,
    /// Apply the flip/rotate/color augmentations to training windows.
    pub augment: bool,
    pub d_min: f64,
    pub backbone: BackboneConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: SpatialLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            gen_lr: 1e-4,
            lr_decay_every: 5,
            disc_lr: 0.1,
            warmup_epochs: 1,
            n_frames: 5,
            batch_sequences: 4,
            seed: 0,
            use_clstm: true,
            use_gan: true,
            augment: true,
            d_min: DEFAULT_D_MIN,
            backbone: BackboneConfig::tiny(),
            discriminator: DiscriminatorConfig::default(),
            loss: SpatialLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::precondition("epochs must be >= 1"));
        }
        if self.n_frames == 0 {
            return Err(Error::precondition("n_frames must be >= 1"));
        }
        if self.batch_sequences == 0 {
            return Err(Error::precondition("batch_sequences must be >= 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::precondition(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::precondition("lr_decay_every must be >= 1"));
        }
        if !(self.gen_lr > 0.0 && self.disc_lr > 0.0 && self.d_min > 0.0) {
            return Err(Error::precondition(
                "learning rates and d_min must be positive",
            ));
        }
        self.backbone.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

pub enum Head {
    Clstm(Clstm),
    Baseline(BaselineHead),
}

/// All model state for one experiment: parameters plus the typed layers
/// reading them.
pub struct Models<T: Elem = f32> {
    pub ps: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
    pub disc: Option<Discriminator>,
    pub config: TrainConfig,
}

pub fn build_models<T: Elem>(config: &TrainConfig) -> Result<Models<T>> {
    config.validate()?;
    let mut ps = ParamStore::new();
    let backbone = Backbone::new(&config.backbone, &mut ps, rng::subseed(config.seed, "bb", 0))?;
    let c = config.backbone.feature_channels;
    let head = if config.use_clstm {
        Head::Clstm(Clstm::new(c, &mut ps, rng::subseed(config.seed, "head", 0)))
    } else {
        Head::Baseline(BaselineHead::new(
            c,
            &mut ps,
            rng::subseed(config.seed, "head", 0),
        ))
    };
    let disc = if config.use_gan {
        Some(Discriminator::new(
            &config.discriminator,
            &mut ps,
            rng::subseed(config.seed, "disc", 0),
        )?)
    } else {
        None
    };
    Ok(Models {
        ps,
        backbone,
        head,
        disc,
        config: config.clone(),
    })
}

impl Models<f32> {
    /// Rebuild models from a checkpoint, restoring every stored array.
    pub fn from_checkpoint(bundle: &CheckpointBundle) -> Result<Self> {
        let mut models = build_models::<f32>(&bundle.config)?;
        for (name, arr) in &bundle.arrays {
            if name.starts_with("adam.") || name.starts_with("sgd.") {
                continue;
            }
            let id = models.ps.id_of(name).ok_or_else(|| {
                Error::Corrupt(format!("checkpoint array {name} has no matching parameter"))
            })?;
            if models.ps.get(id).shape() != arr.shape() {
                return Err(Error::Corrupt(format!(
                    "checkpoint array {name} shape {:?} does not match model {:?}",
                    arr.shape(),
                    models.ps.get(id).shape()
                )));
            }
            *models.ps.get_mut(id) = arr.clone();
        }
        Ok(models)
    }

    pub fn to_checkpoint(&self, epoch: usize, opt_arrays: Vec<(String, ArrayD<f32>)>) -> CheckpointBundle {
        let mut arrays: Vec<(String, ArrayD<f32>)> = self
            .ps
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        arrays.extend(opt_arrays);
        CheckpointBundle {
            version: FORMAT_VERSION,
            epoch,
            config: self.config.clone(),
            arrays,
        }
    }

    /// Inference over one sequence of RGB frames: batched backbone, then the
    /// temporal head left to right. Returns (H, W) depth maps.
    pub fn predict_sequence(&self, frames: &[Array3<f32>]) -> Result<Vec<Array2<f32>>> {
        if frames.is_empty() {
            return Err(Error::precondition("predict needs >= 1 frame"));
        }
        let (_, h, w) = frames[0].dim();
        self.backbone.check_input_dims(h, w)?;
        let mut stack = Array4::<f32>::zeros((frames.len(), 3, h, w));
        for (i, f) in frames.iter().enumerate() {
            stack.index_axis_mut(Axis(0), i).assign(f);
        }
        let feats = self.backbone.infer(&self.ps, &stack);
        let per_frame: Vec<Array4<f32>> = (0..frames.len())
            .map(|i| {
                feats
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .insert_axis(Axis(0))
            })
            .collect();
        let d_min = self.config.d_min as f32;
        let depths = match &self.head {
            Head::Clstm(m) => m.run_sequence(&self.ps, &per_frame, (h, w), d_min)?,
            Head::Baseline(m) => m.run_sequence(&self.ps, &per_frame, (h, w), d_min)?,
        };
        Ok(depths
            .into_iter()
            .map(|d| d.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_depth: f64,
    pub l_grad: f64,
    pub l_normal: f64,
    pub l_spatial: f64,
    pub l_temporal: f64,
    pub l_total: f64,
    pub d_loss: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_rel: f64,
    pub val_rms: f64,
    pub val_log10: f64,
    pub val_delta1: f64,
    pub val_delta2: f64,
    pub val_delta3: f64,
    pub val_tcc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Tab-separated step lines:
    /// `epoch step l_depth l_grad l_normal l_spatial l_temporal l_total d_loss`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.epoch,
                s.step,
                s.l_depth,
                s.l_grad,
                s.l_normal,
                s.l_spatial,
                s.l_temporal,
                s.l_total,
                s.d_loss
            ));
        }
        out
    }

    pub fn epochs_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch,
                e.val_rel,
                e.val_rms,
                e.val_log10,
                e.val_delta1,
                e.val_delta2,
                e.val_delta3,
                e.val_tcc
            ));
        }
        out
    }
}

pub struct TrainOutput {
    pub checkpoint: CheckpointBundle,
    pub log: TrainLog,
}

struct BatchTensors {
    rgb: Vec<Array4<f32>>,      // per frame (B,3,H,W)
    gt: Vec<Array4<f32>>,       // per frame (B,1,H,W)
    mask: Vec<ArrayD<bool>>,    // per frame (B,1,H,W)
    gt_frames: Vec<Vec<Array2<f32>>>, // [sample][frame] (H,W)
}

fn assemble_batch(
    samples: &[&DepthSequenceSample],
    n_frames: usize,
    starts: &[usize],
) -> BatchTensors {
    let b = samples.len();
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut rgb = Vec::with_capacity(n_frames);
    let mut gt = Vec::with_capacity(n_frames);
    let mut mask = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let mut r = Array4::<f32>::zeros((b, 3, h, w));
        let mut g = Array4::<f32>::zeros((b, 1, h, w));
        let mut m = ArrayD::from_elem(IxDyn(&[b, 1, h, w]), false);
        for (i, s) in samples.iter().enumerate() {
            let f = starts[i] + t;
            r.index_axis_mut(Axis(0), i).assign(&s.rgb[f]);
            g.index_axis_mut(Axis(0), i)
                .index_axis_move(Axis(0), 0)
                .assign(&s.depth[f]);
            let mut mm = m.index_axis_mut(Axis(0), i);
            let mut mm = mm.index_axis_mut(Axis(0), 0);
            for (dst, src) in mm.iter_mut().zip(s.valid[f].iter()) {
                *dst = *src;
            }
        }
        rgb.push(r);
        gt.push(g);
        mask.push(m);
    }
    let gt_frames = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (0..n_frames)
                .map(|t| s.depth[starts[i] + t].clone())
                .collect()
        })
        .collect();
    BatchTensors {
        rgb,
        gt,
        mask,
        gt_frames,
    }
}

/// Stack per-frame RGB batches and per-sample depth frames into clips
/// (B,4,n,H,W), normalizing depth by `max_depth` (for the discriminator
/// update, where predictions are detached arrays).
fn build_clip_array(
    rgb: &[Array4<f32>],
    depth_frames: &[Vec<Array2<f32>>],
    max_depth: f32,
) -> ndarray::Array5<f32> {
    let n = rgb.len();
    let (b, _, h, w) = rgb[0].dim();
    let mut out = ndarray::Array5::<f32>::zeros((b, 4, n, h, w));
    for t in 0..n {
        for i in 0..b {
            for c in 0..3 {
                out.slice_mut(ndarray::s![i, c, t, .., ..])
                    .assign(&rgb[t].slice(ndarray::s![i, c, .., ..]));
            }
            out.slice_mut(ndarray::s![i, 3, t, .., ..])
                .assign(&depth_frames[i][t].mapv(|v| (v / max_depth).min(1.0)));
        }
    }
    out
}

/// Load every sequence under a dataset root into memory.
pub fn load_dataset(root: &Path) -> Result<Vec<(String, DepthSequenceSample)>> {
    let ids = synthdata::list_sequences(root)?;
    if ids.is_empty() {
        return Err(Error::Format(format!(
            "no sequences found under {}",
            root.display()
        )));
    }
    ids.into_iter()
        .map(|id| {
            let len = synthdata::sequence_len(root, &id)?;
            let s = synthdata::load_sequence(root, &id, 0, len)?;
            Ok((id, s))
        })
        .collect()
}

/// Deterministic validation split: every tenth sequence of the sorted list.
pub fn split_train_val(
    data: &[(String, DepthSequenceSample)],
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..data.len() {
        if i % 10 == 9 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() {
        // tiny datasets: reuse the last training sequence for validation
        val.push(data.len() - 1);
    }
    (train, val)
}

/// Train per the configuration; on numerical divergence the last finite
/// checkpoint is written to `rescue_path` (when given) before the error
/// returns.
pub fn train(
    config: &TrainConfig,
    dataset_root: &Path,
    rescue_path: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    let data = load_dataset(dataset_root)?;
    let (train_idx, val_idx) = split_train_val(&data);
    if train_idx.is_empty() {
        return Err(Error::Format("dataset has no training sequences".into()));
    }
    for (id, s) in &data {
        if s.n_frames() < config.n_frames {
            return Err(Error::Format(format!(
                "sequence {id} has {} frames, need >= {}",
                s.n_frames(),
                config.n_frames
            )));
        }
    }

    let mut models = build_models::<f32>(config)?;
    let gen_ids: Vec<_> = models
        .ps
        .iter()
        .filter(|(_, e)| {
            e.trainable && (e.name.starts_with("backbone.") || e.name.starts_with("clstm.") || e.name.starts_with("baseline."))
        })
        .map(|(id, _)| id)
        .collect();
    let disc_ids: Vec<_> = models
        .ps
        .iter()
        .filter(|(_, e)| e.trainable && e.name.starts_with("disc."))
        .map(|(id, _)| id)
        .collect();
    let mut gen_opt = Adam::new(&models.ps, gen_ids, config.gen_lr as f32, 1e-4);
    let mut disc_opt = SgdMomentum::new(&models.ps, disc_ids, config.disc_lr as f32, 0.9);

    let mut log = TrainLog::default();
    let mut last_finite = models.to_checkpoint(0, gen_opt.export(&models.ps));
    let alpha = config.loss.alpha;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        gen_opt.lr = (config.gen_lr * 0.1f64.powi((epoch / config.lr_decay_every) as i32)) as f32;
        let gan_active = config.use_gan && epoch >= config.warmup_epochs;

        let mut order = train_idx.clone();
        let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        for (step, chunk) in order.chunks(config.batch_sequences).enumerate() {
            // window + augmentation choices for this batch
            let mut batch_samples: Vec<DepthSequenceSample> = Vec::with_capacity(chunk.len());
            let mut starts = Vec::with_capacity(chunk.len());
            for (k, &si) in chunk.iter().enumerate() {
                let s = &data[si].1;
                let tag = (epoch * 1_000_000 + step * 1_000 + k) as u64;
                let s = if config.augment {
                    synthdata::augment(s, rng::subseed(config.seed, "augment", tag))
                } else {
                    s.clone()
                };
                let max_start = s.n_frames() - config.n_frames;
                let start = if max_start == 0 {
                    0
                } else {
                    rng::stream(config.seed, "window", tag).random_range(0..=max_start)
                };
                batch_samples.push(s);
                starts.push(start);
            }
            let sample_refs: Vec<&DepthSequenceSample> = batch_samples.iter().collect();
            let batch = assemble_batch(&sample_refs, config.n_frames, &starts);
            let (h, w) = (batch.rgb[0].dim().2, batch.rgb[0].dim().3);

            // ---- generator update ----
            let mut g = Graph::<f32>::new();
            let bp = models.ps.bind(&mut g);
            let mut depth_vars = Vec::with_capacity(config.n_frames);
            {
                let d_min = config.d_min as f32;
                match &models.head {
                    Head::Clstm(m) => {
                        let f0 = {
                            let x = g.constant(batch.rgb[0].clone().into_dyn());
                            models.backbone.forward_graph(&mut g, &bp, &mut models.ps, x, true)
                        };
                        let mut cell = {
                            let s = g.value(f0).shape().to_vec();
                            g.constant(ArrayD::zeros(IxDyn(&s)))
                        };
                        let mut prev = m.d_prev.forward(&mut g, &bp, f0);
                        let mut feats = vec![f0];
                        for t in 1..config.n_frames {
                            let x = g.constant(batch.rgb[t].clone().into_dyn());
                            feats.push(models.backbone.forward_graph(
                                &mut g,
                                &bp,
                                &mut models.ps,
                                x,
                                true,
                            ));
                        }
                        for &f_t in feats.iter() {
                            let (logits, nc, np) = m.cell_step_graph(&mut g, &bp, f_t, cell, prev);
                            cell = nc;
                            prev = np;
                            depth_vars.push(logits_to_depth_graph(&mut g, logits, (h, w), d_min));
                        }
                    }
                    Head::Baseline(m) => {
                        for t in 0..config.n_frames {
                            let x = g.constant(batch.rgb[t].clone().into_dyn());
                            let f_t = models.backbone.forward_graph(
                                &mut g,
                                &bp,
                                &mut models.ps,
                                x,
                                true,
                            );
                            let logits = m.forward_frame_graph(&mut g, &bp, f_t);
                            depth_vars.push(logits_to_depth_graph(&mut g, logits, (h, w), d_min));
                        }
                    }
                }
            }

            let d_all = g.concat(&depth_vars, 0);
            let gt_all = {
                let views: Vec<_> = batch.gt.iter().map(|a| a.view()).collect();
                ndarray::concatenate(Axis(0), &views).unwrap().into_dyn()
            };
            let mask_all = {
                let views: Vec<_> = batch.mask.iter().map(|a| a.view()).collect();
                ndarray::concatenate(Axis(0), &views).unwrap()
            };
            let parts = spatial_loss_graph(&mut g, d_all, &gt_all, &mask_all, &config.loss)?;

            let (total, l_temporal_val) = if gan_active {
                let disc = models.disc.as_ref().expect("gan requires discriminator");
                let max_depth = config.discriminator.max_depth as f32;
                let mut slabs = Vec::with_capacity(config.n_frames);
                for t in 0..config.n_frames {
                    let rgb_const = g.constant(batch.rgb[t].clone().into_dyn());
                    // min(depth / max_depth, 1) built from relu
                    let dn = g.mul_scalar(depth_vars[t], 1.0 / max_depth);
                    let neg = g.mul_scalar(dn, -1.0);
                    let shifted = g.add_scalar(neg, 1.0);
                    let r = g.relu(shifted);
                    let rneg = g.mul_scalar(r, -1.0);
                    let clamped = g.add_scalar(rneg, 1.0);
                    let rgbd = g.concat(&[rgb_const, clamped], 1);
                    let b = g.value(rgbd).shape()[0];
                    let slab = g.reshape(rgbd, &[b, 4, 1, h, w]);
                    slabs.push(slab);
                }
                let clips = g.concat(&slabs, 2);
                let logits = disc.logits_graph(&mut g, &bp, &mut models.ps, clips, true)?;
                let l_temporal = adversary::bce_real_graph(&mut g, logits);
                let weighted = g.mul_scalar(l_temporal, alpha as f32);
                let total = g.add(parts.total, weighted);
                (total, g.scalar(l_temporal) as f64)
            } else {
                (parts.total, 0.0)
            };

            let rec = StepRecord {
                epoch,
                step: global_step,
                l_depth: g.scalar(parts.depth) as f64,
                l_grad: g.scalar(parts.grad) as f64,
                l_normal: g.scalar(parts.normal) as f64,
                l_spatial: g.scalar(parts.total) as f64,
                l_temporal: l_temporal_val,
                l_total: g.scalar(total) as f64,
                d_loss: 0.0,
            };
            if !rec.l_total.is_finite() {
                if let Some(p) = rescue_path {
                    save_checkpoint(&last_finite, p)?;
                }
                return Err(Error::Divergence {
                    epoch,
                    step: global_step,
                    what: format!("generator loss {}", rec.l_total),
                });
            }

            // detached predictions for the discriminator update
            let predicted: Vec<Vec<Array2<f32>>> = (0..chunk.len())
                .map(|i| {
                    (0..config.n_frames)
                        .map(|t| {
                            g.value(depth_vars[t])
                                .index_axis(Axis(0), i)
                                .index_axis(Axis(0), 0)
                                .to_owned()
                                .into_dimensionality()
                                .unwrap()
                        })
                        .collect()
                })
                .collect();

            let mut grads = g.backward(total);
            gen_opt.step(&mut models.ps, &bp, &mut grads);
            drop(g);

            let mut rec = rec;
            if gan_active {
                let disc = models.disc.as_ref().expect("gan requires discriminator");
                let max_depth = config.discriminator.max_depth as f32;
                let mixed: Vec<Vec<Array2<f32>>> = predicted
                    .iter()
                    .zip(batch.gt_frames.iter())
                    .enumerate()
                    .map(|(i, (fake, real))| {
                        adversary::mix_ground_truth(
                            fake,
                            real,
                            config.discriminator.mix_prob,
                            rng::subseed(config.seed, "mix", (global_step * 64 + i) as u64),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let real_clips = build_clip_array(&batch.rgb, &batch.gt_frames, max_depth);
                let fake_clips = build_clip_array(&batch.rgb, &mixed, max_depth);

                let mut g2 = Graph::<f32>::new();
                let bp2 = models.ps.bind(&mut g2);
                let rc = g2.constant(real_clips.into_dyn());
                let fc = g2.constant(fake_clips.into_dyn());
                let lr_logits = disc.logits_graph(&mut g2, &bp2, &mut models.ps, rc, true)?;
                let lf_logits = disc.logits_graph(&mut g2, &bp2, &mut models.ps, fc, true)?;
                let loss_real = adversary::bce_real_graph(&mut g2, lr_logits);
                let loss_fake = adversary::bce_fake_graph(&mut g2, lf_logits);
                let d_loss = g2.add(loss_real, loss_fake);
                rec.d_loss = g2.scalar(d_loss) as f64;
                if !rec.d_loss.is_finite() {
                    if let Some(p) = rescue_path {
                        save_checkpoint(&last_finite, p)?;
                    }
                    return Err(Error::Divergence {
                        epoch,
                        step: global_step,
                        what: format!("discriminator loss {}", rec.d_loss),
                    });
                }
                let mut grads2 = g2.backward(d_loss);
                disc_opt.step(&mut models.ps, &bp2, &mut grads2);
            }

            log.steps.push(rec);
            global_step += 1;
        }

        // validation at epoch end: spatial metrics + TCC over held-out
        // sequences (full reports including TMC come from `evaluate`)
        let val_samples: Vec<&DepthSequenceSample> = val_idx.iter().map(|&i| &data[i].1).collect();
        let q = compute_quality(&models, &val_samples, config.n_frames.max(2), false)?;
        log.epochs.push(EpochRecord {
            epoch,
            val_rel: q.rel,
            val_rms: q.rms,
            val_log10: q.log10,
            val_delta1: q.delta1,
            val_delta2: q.delta2,
            val_delta3: q.delta3,
            val_tcc: q.tcc,
        });

        last_finite = models.to_checkpoint(epoch + 1, gen_opt.export(&models.ps));
        let mut disc_state = disc_opt.export(&models.ps);
        last_finite.arrays.append(&mut disc_state);
    }

    Ok(TrainOutput {
        checkpoint: last_finite,
        log,
    })
}

/// Inference quality over a sequence set.
#[derive(Clone, Copy, Debug)]
pub struct QualitySummary {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub tcc: f64,
    /// NaN when TMC was not requested.
    pub tmc: f64,
    pub n_pixels: u64,
    pub n_windows: u64,
}

/// Run inference over the sequence set and score it: pooled spatial
/// metrics over all evaluated frames, TCC (and optionally TMC) averaged
/// over non-overlapping `window`-frame spans.
pub fn compute_quality(
    models: &Models<f32>,
    samples: &[&DepthSequenceSample],
    window: usize,
    with_tmc: bool,
) -> Result<QualitySummary> {
    if samples.is_empty() {
        return Err(Error::DegenerateInput("no evaluation sequences".into()));
    }
    if window < 2 {
        return Err(Error::precondition("temporal window must be >= 2 frames"));
    }
    let temporal_cfg = TemporalMetricConfig {
        max_depth: models.config.discriminator.max_depth,
        depth_range: models.config.discriminator.max_depth,
        ..Default::default()
    };

    struct SeqOut {
        acc: SpatialAccumulator,
        tcc_sum: f64,
        tmc_sum: f64,
        windows: u64,
    }

    let outs: Vec<Result<SeqOut>> = samples
        .par_iter()
        .map(|s| {
            let mut acc = SpatialAccumulator::default();
            let mut tcc_sum = 0.0;
            let mut tmc_sum = 0.0;
            let mut windows = 0u64;
            let n = s.n_frames();
            let win = window.min(n);
            if win < 2 {
                return Err(Error::precondition(format!(
                    "evaluation sequence has {n} frames, need >= 2"
                )));
            }
            let mut start = 0;
            while start + win <= n {
                let frames: Vec<Array3<f32>> =
                    (start..start + win).map(|t| s.rgb[t].clone()).collect();
                let preds = models.predict_sequence(&frames)?;
                for (k, p) in preds.iter().enumerate() {
                    acc.add_map(p, &s.depth[start + k], &s.valid[start + k])?;
                }
                let d64: Vec<Array2<f64>> = preds.iter().map(|p| p.mapv(|v| v as f64)).collect();
                let g64: Vec<Array2<f64>> = (start..start + win)
                    .map(|t| s.depth[t].mapv(|v| v as f64))
                    .collect();
                tcc_sum += tcc(&d64, &g64, &temporal_cfg)?;
                if with_tmc {
                    tmc_sum += tmc(&d64, &g64, &temporal_cfg)?;
                }
                windows += 1;
                start += win;
            }
            Ok(SeqOut {
                acc,
                tcc_sum,
                tmc_sum,
                windows,
            })
        })
        .collect();

    let mut total = SpatialAccumulator::default();
    let mut tcc_sum = 0.0;
    let mut tmc_sum = 0.0;
    let mut windows = 0u64;
    for o in outs {
        let o = o?;
        total.merge(&o.acc);
        tcc_sum += o.tcc_sum;
        tmc_sum += o.tmc_sum;
        windows += o.windows;
    }
    let n_pixels = total.n_pixels();
    let (rel, rms, log10, d1, d2, d3) = total.finish()?;
    if windows == 0 {
        return Err(Error::DegenerateInput(
            "no temporal windows in evaluation set".into(),
        ));
    }
    Ok(QualitySummary {
        rel,
        rms,
        log10,
        delta1: d1,
        delta2: d2,
        delta3: d3,
        tcc: tcc_sum / windows as f64,
        tmc: if with_tmc {
            tmc_sum / windows as f64
        } else {
            f64::NAN
        },
        n_pixels,
        n_windows: windows,
    })
}

/// Full evaluation of a checkpoint over a dataset: spatial metrics pooled
/// over all frames, TCC/TMC averaged over `n_frames_eval`-long windows.
pub fn evaluate(
    bundle: &CheckpointBundle,
    dataset_root: &Path,
    n_frames_eval: usize,
) -> Result<MetricReport> {
    if n_frames_eval < 2 {
        return Err(Error::precondition("n_frames_eval must be >= 2"));
    }
    let models = Models::from_checkpoint(bundle)?;
    let data = load_dataset(dataset_root)?;
    let refs: Vec<&DepthSequenceSample> = data.iter().map(|(_, s)| s).collect();
    let q = compute_quality(&models, &refs, n_frames_eval, true)?;
    let report = MetricReport {
        rel: q.rel,
        rms: q.rms,
        log10: q.log10,
        delta1: q.delta1,
        delta2: q.delta2,
        delta3: q.delta3,
        tcc: q.tcc,
        tmc: q.tmc,
        n_pixels: q.n_pixels,
        n_sequences: data.len() as u64,
    };
    report.validate()?;
    Ok(report)
}
