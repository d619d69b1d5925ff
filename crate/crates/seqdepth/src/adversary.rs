//! The clip discriminator and adversarial temporal loss.
//!
//! A 3D CNN scores concatenated RGB-D clips: four blocks of
//! [conv3d -> batch norm -> relu -> max pool], global average pooling, and
//! one fully connected layer to a single logit. The first convolution and
//! every max pool have stride 2, so spatial dims shrink by 2^5 = 32 before
//! pooling to a scalar; temporal dims stop pooling at length 1.
//!
//! Label convention: the discriminator outputs the probability that the
//! clip is REAL (ground-truth depth). The generator's temporal loss is the
//! non-saturating form -log D(fake).

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNormLayer, BoundParams, Conv3dLayer, LinearLayer, ParamStore};
use crate::rng;
use ndarray::{Array2, Array3, Array5, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub block_channels: [usize; 4],
    /// Temporal extent of the (cubic) convolution kernels.
    pub temporal_kernel: usize,
    /// Probability of substituting a ground-truth frame into fake clips.
    pub mix_prob: f64,
    /// Depth channel normalization: meters mapped to [0,1] by this bound.
    pub max_depth: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            block_channels: [16, 32, 64, 128],
            temporal_kernel: 3,
            mix_prob: 0.25,
            max_depth: 10.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return Err(Error::precondition(format!(
                "mix_prob must be in [0,1], got {}",
                self.mix_prob
            )));
        }
        if self.max_depth <= 0.0 {
            return Err(Error::precondition("max_depth must be positive"));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::precondition("block_channels must be positive"));
        }
        if self.temporal_kernel != 3 {
            return Err(Error::precondition(
                "only temporal_kernel = 3 is supported",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipLabel {
    Real,
    Fake,
}

/// An RGB-D clip: n frames of 4 channels (RGB in [0,1], depth normalized by
/// `max_depth`). Stored channel-major as (4, n, H, W).
#[derive(Clone, Debug)]
pub struct RgbdClip<T: Elem = f32> {
    pub values: ndarray::Array4<T>,
    pub label: ClipLabel,
}

impl<T: Elem> RgbdClip<T> {
    pub fn n_frames(&self) -> usize {
        self.values.dim().1
    }
}

/// Assemble a clip from per-frame RGB (3,H,W) and depth (H,W) maps.
pub fn build_clip<T: Elem>(
    rgb: &[Array3<T>],
    depth: &[Array2<T>],
    max_depth: f64,
    label: ClipLabel,
) -> Result<RgbdClip<T>> {
    if rgb.len() != depth.len() || rgb.len() < 2 {
        return Err(Error::precondition(format!(
            "clip needs n >= 2 aligned frames, got {} rgb / {} depth",
            rgb.len(),
            depth.len()
        )));
    }
    let (_, h, w) = rgb[0].dim();
    let n = rgb.len();
    let inv = T::from_f64(1.0 / max_depth);
    let one = T::one();
    let mut values = ndarray::Array4::<T>::zeros((4, n, h, w));
    for (t, (r, d)) in rgb.iter().zip(depth.iter()).enumerate() {
        if r.dim() != (3, h, w) || d.dim() != (h, w) {
            return Err(Error::precondition(format!("clip frame {t} dims disagree")));
        }
        for c in 0..3 {
            values
                .slice_mut(ndarray::s![c, t, .., ..])
                .assign(&r.index_axis(Axis(0), c));
        }
        values
            .slice_mut(ndarray::s![3, t, .., ..])
            .assign(&d.mapv(|v| (v * inv).min(one)));
    }
    Ok(RgbdClip { values, label })
}

struct DiscBlock {
    conv: Conv3dLayer,
    bn: BatchNormLayer,
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    blocks: Vec<DiscBlock>,
    head: LinearLayer,
}

impl Discriminator {
    pub fn new<T: Elem>(
        config: &DiscriminatorConfig,
        ps: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "disc-init", 0);
        let mut blocks = Vec::new();
        let mut in_ch = 4;
        for (k, &out_ch) in config.block_channels.iter().enumerate() {
            let stride = if k == 0 { [2, 2, 2] } else { [1, 1, 1] };
            blocks.push(DiscBlock {
                conv: Conv3dLayer::new(
                    ps,
                    &format!("disc.block{k}.conv"),
                    in_ch,
                    out_ch,
                    3,
                    stride,
                    [1, 1, 1],
                    &mut r,
                ),
                bn: BatchNormLayer::new(ps, &format!("disc.block{k}.bn"), out_ch),
            });
            in_ch = out_ch;
        }
        let head = LinearLayer::new(ps, "disc.head", config.block_channels[3], 1, &mut r);
        Ok(Discriminator {
            config: config.clone(),
            blocks,
            head,
        })
    }

    fn check_dims(&self, d: usize, h: usize, w: usize) -> Result<()> {
        if d < 2 {
            return Err(Error::precondition(format!(
                "clip needs >= 2 frames, got {d}"
            )));
        }
        if h < 32 || w < 32 {
            return Err(Error::precondition(format!(
                "clip spatial dims must be >= 32 to survive five stride-2 stages, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Stride-2 pooling along dims that still have extent; temporal clamps
    /// to kernel 1 once the clip is a single slab.
    fn pool_spec(d: usize) -> ([usize; 3], [usize; 3]) {
        let kd = if d >= 2 { 2 } else { 1 };
        ([kd, 2, 2], [kd, 2, 2])
    }

    /// Batched logits (N,1) for clips stacked as (N,4,D,H,W), training tape.
    pub fn logits_graph<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        ps: &mut ParamStore<T>,
        clips: Var,
        train: bool,
    ) -> Result<Var> {
        {
            let s = g.value(clips).shape().to_vec();
            self.check_dims(s[2], s[3], s[4])?;
        }
        let mut cur = clips;
        for block in &self.blocks {
            let c = block.conv.forward(g, bp, cur);
            let b = block.bn.forward(g, bp, ps, c, train);
            let r = g.relu(b);
            let d_now = g.value(r).shape()[2];
            let (k, s) = Self::pool_spec(d_now);
            cur = g.maxpool3d(r, k, s);
        }
        let pooled = g.global_avg_pool(cur);
        Ok(self.head.forward(g, bp, pooled))
    }

    /// Inference logits for a batch of clips (N,4,D,H,W).
    pub fn logits_infer<T: Elem>(&self, ps: &ParamStore<T>, clips: &Array5<T>) -> Result<Vec<T>> {
        let (_, _, d, h, w) = clips.dim();
        self.check_dims(d, h, w)?;
        let relu = |a: ndarray::ArrayD<T>| a.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let mut cur = clips.clone();
        for block in &self.blocks {
            let c = block.conv.infer(ps, &cur);
            let b = relu(block.bn.infer(ps, &c.into_dyn()));
            let b5: Array5<T> = b.into_dimensionality().unwrap();
            let d_now = b5.dim().2;
            let (k, s) = Self::pool_spec(d_now);
            let (p, _) = crate::kernels::pool::maxpool3d_forward(&b5.view(), k, s);
            cur = p;
        }
        // global average pool + linear head
        let (n, c, dd, hh, ww) = cur.dim();
        let l = dd * hh * ww;
        let flat = cur.to_shape((n, c, l)).unwrap().to_owned();
        let pooled = flat.sum_axis(Axis(2)) / T::from_f64(l as f64);
        let wm: Array2<T> = ps.get(self.head.w).view().into_dimensionality().unwrap().to_owned();
        let bm = ps.get(self.head.b);
        let logits = pooled.dot(&wm.t());
        Ok((0..n).map(|i| logits[[i, 0]] + bm[[0]]).collect())
    }

    /// Probability that a single clip is real.
    pub fn discriminate<T: Elem>(&self, ps: &ParamStore<T>, clip: &RgbdClip<T>) -> Result<T> {
        let v = clip.values.clone().insert_axis(Axis(0));
        let logits = self.logits_infer(ps, &v)?;
        Ok(crate::kernels::sigmoid(logits[0]))
    }
}

/// Substitute ground-truth frames into a predicted sequence, each frame
/// independently with probability `p`. Deterministic in `seed`.
pub fn mix_ground_truth<T: Elem>(
    fake: &[Array2<T>],
    real: &[Array2<T>],
    p: f64,
    seed: u64,
) -> Result<Vec<Array2<T>>> {
    if fake.len() != real.len() {
        return Err(Error::precondition(format!(
            "mix needs equal lengths, got {} vs {}",
            fake.len(),
            real.len()
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::precondition(format!("p must be in [0,1], got {p}")));
    }
    let mut r = rng::stream(seed, "gt-mix", 0);
    Ok(fake
        .iter()
        .zip(real.iter())
        .map(|(f, g)| {
            if f.dim() != g.dim() {
                return Err(Error::precondition("mix frame dims disagree".to_string()));
            }
            Ok(if r.random_bool(p) { g.clone() } else { f.clone() })
        })
        .collect::<Result<Vec<_>>>()?)
}

/// Cross entropy of a perfect-real label on `d_real` and a fake label on
/// `d_fake`: -ln(d_real) - ln(1 - d_fake). Inputs are probabilities.
pub fn discriminator_loss<T: Elem>(d_real: T, d_fake: T) -> T {
    -(d_real.ln()) - (T::one() - d_fake).ln()
}

/// Non-saturating generator objective: the fake clip scored against the
/// real label, -ln(d_fake). Decreasing in d_fake.
pub fn generator_temporal_loss<T: Elem>(d_fake: T) -> T {
    -(d_fake.ln())
}

/// Mean of softplus(-logit) over a batch: equals -ln sigmoid(logit) without
/// forming the probability (used on the tape for stability).
pub fn bce_real_graph<T: Elem>(g: &mut Graph<T>, logits: Var) -> Var {
    let n = g.mul_scalar(logits, -T::one());
    let sp = g.softplus(n);
    g.mean_all(sp)
}

/// Mean of softplus(logit): equals -ln(1 - sigmoid(logit)).
pub fn bce_fake_graph<T: Elem>(g: &mut Graph<T>, logits: Var) -> Var {
    let sp = g.softplus(logits);
    g.mean_all(sp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck;
    use ndarray::{Array4, ArrayD, IxDyn};

    fn rand_clip_values(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut r = rng::stream(seed, "clip", 0);
        Array4::from_shape_fn((4, n, h, w), |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn discriminate_outputs_probability_deterministically() {
        let mut ps = ParamStore::<f32>::new();
        let disc = Discriminator::new(&DiscriminatorConfig::default(), &mut ps, 3).unwrap();
        let clip = RgbdClip {
            values: rand_clip_values(5, 64, 64, 1),
            label: ClipLabel::Fake,
        };
        let p1 = disc.discriminate(&ps, &clip).unwrap();
        let p2 = disc.discriminate(&ps, &clip).unwrap();
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    #[test]
    fn stride_schedule_reduces_spatial_by_32() {
        // follow the block dims by hand: conv1 s2 then four pools
        let dims = [64usize, 32, 16, 8, 4, 2];
        let mut h = dims[0];
        h /= 2; // first conv stride 2
        for _ in 0..4 {
            h /= 2;
        }
        assert_eq!(h, dims[0] / 32);
        assert_eq!(h, 2);

        // too-small spatial dims are a precondition error
        let mut ps = ParamStore::<f32>::new();
        let disc = Discriminator::new(&DiscriminatorConfig::default(), &mut ps, 3).unwrap();
        let clip = RgbdClip {
            values: rand_clip_values(4, 16, 16, 2),
            label: ClipLabel::Real,
        };
        assert!(matches!(
            disc.discriminate(&ps, &clip),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn temporal_order_changes_the_logit() {
        let mut ps = ParamStore::<f32>::new();
        let disc = Discriminator::new(&DiscriminatorConfig::default(), &mut ps, 5).unwrap();
        let values = rand_clip_values(5, 32, 32, 7);
        let mut rev = values.clone();
        rev.invert_axis(Axis(1));
        let rev = rev.as_standard_layout().to_owned();
        let a = disc
            .logits_infer(&ps, &values.insert_axis(Axis(0)))
            .unwrap()[0];
        let b = disc.logits_infer(&ps, &rev.insert_axis(Axis(0))).unwrap()[0];
        assert!((a - b).abs() > 1e-7, "logit insensitive to frame order");
    }

    #[test]
    fn mix_probability_endpoints_and_frequency() {
        let fake: Vec<Array2<f32>> = (0..8).map(|i| Array2::from_elem((4, 4), i as f32)).collect();
        let real: Vec<Array2<f32>> =
            (0..8).map(|i| Array2::from_elem((4, 4), 100.0 + i as f32)).collect();
        let same = mix_ground_truth(&fake, &real, 0.0, 1).unwrap();
        assert!(same.iter().zip(fake.iter()).all(|(a, b)| a == b));
        let all = mix_ground_truth(&fake, &real, 1.0, 1).unwrap();
        assert!(all.iter().zip(real.iter()).all(|(a, b)| a == b));

        let f1: Vec<Array2<f32>> = vec![Array2::zeros((2, 2))];
        let r1: Vec<Array2<f32>> = vec![Array2::ones((2, 2))];
        let mut subs = 0usize;
        let draws = 10_000;
        for s in 0..draws {
            let out = mix_ground_truth(&f1, &r1, 0.25, s).unwrap();
            if out[0][[0, 0]] == 1.0 {
                subs += 1;
            }
        }
        let rate = subs as f64 / draws as f64;
        assert!((0.23..=0.27).contains(&rate), "substitution rate {rate}");
    }

    #[test]
    fn loss_closed_forms_and_gradient_sign() {
        // perfect discriminator limit
        let near0 = 1e-12f64;
        let v = discriminator_loss(1.0 - near0, near0);
        assert!(v < 1e-10);
        // max-confusion point
        let v = discriminator_loss(0.5f64, 0.5);
        assert!((v - 2.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((generator_temporal_loss(0.5f64) - 2.0f64.ln()).abs() < 1e-12);
        assert!(generator_temporal_loss(1.0f64 - 1e-12) < 1e-10);
        // d(gen loss)/d(d_fake) = -1/d_fake < 0 everywhere in (0,1)
        for &p in &[0.01f64, 0.3, 0.9, 0.999] {
            let h = 1e-7;
            let fd = (generator_temporal_loss(p + h) - generator_temporal_loss(p - h)) / (2.0 * h);
            assert!(fd < 0.0);
            assert!((fd + 1.0 / p).abs() / (1.0 / p) < 1e-4);
        }
    }

    #[test]
    fn batch_loss_matches_scalar_loop() {
        // graph bce over a batch of logits vs scalar formulas per element
        let logits = ArrayD::from_shape_vec(
            IxDyn(&[5, 1]),
            vec![-2.0f64, -0.3, 0.0, 0.7, 3.1],
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits.clone());
        let real = bce_real_graph(&mut g, l);
        let fake = bce_fake_graph(&mut g, l);
        let mut expect_real = 0.0;
        let mut expect_fake = 0.0;
        for &v in logits.iter() {
            let p = 1.0 / (1.0 + (-v as f64).exp());
            expect_real += -(p.ln());
            expect_fake += -((1.0 - p).ln());
        }
        expect_real /= 5.0;
        expect_fake /= 5.0;
        assert!((g.scalar(real) - expect_real).abs() < 1e-10);
        assert!((g.scalar(fake) - expect_fake).abs() < 1e-10);
    }

    #[test]
    fn gradcheck_through_discriminator_and_loss() {
        let cfg = DiscriminatorConfig {
            block_channels: [4, 4, 8, 8],
            ..Default::default()
        };
        let mut ps = ParamStore::<f64>::new();
        let disc = Discriminator::new(&cfg, &mut ps, 11).unwrap();
        let mut r = rng::stream(12, "fd", 0);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 4, 2, 32, 32]), |_| r.random_range(0.0..1.0));

        let snapshot: Vec<ArrayD<f64>> = ps.iter().map(|(_, e)| e.value.clone()).collect();
        let restore = |ps: &mut ParamStore<f64>, snap: &[ArrayD<f64>]| {
            let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
            for (id, v) in ids.iter().zip(snap.iter()) {
                *ps.get_mut(*id) = v.clone();
            }
        };
        let run = |ps: &mut ParamStore<f64>, xv: &ArrayD<f64>, ng: bool| {
            let mut g = Graph::<f64>::new();
            let bp = ps.bind(&mut g);
            let x = g.leaf(xv.clone(), ng);
            let logit = disc.logits_graph(&mut g, &bp, ps, x, true).unwrap();
            let loss = bce_real_graph(&mut g, logit);
            (g, x, loss)
        };
        let (g, x, loss) = run(&mut ps, &x0, true);
        let mut grads = g.backward(loss);
        let dx = grads.take(x).unwrap();
        restore(&mut ps, &snapshot);

        let mut ri = rng::stream(13, "fd-idx", 0);
        let idxs: Vec<usize> = (0..32).map(|_| ri.random_range(0..x0.len())).collect();
        let fd = gradcheck::finite_diff_at(
            &x0,
            |xv| {
                let (g, _, loss) = run(&mut ps, xv, false);
                let v = g.scalar(loss);
                restore(&mut ps, &snapshot);
                v
            },
            1e-5,
            &idxs,
        );
        let analytic: Vec<f64> = idxs.iter().map(|&i| dx.as_slice().unwrap()[i]).collect();
        let rel = gradcheck::rel_error_slice(&analytic, &fd);
        assert!(rel < 1e-4, "disc grad rel err {rel}");
    }

    #[test]
    fn build_clip_normalizes_depth() {
        let rgb: Vec<Array3<f32>> = (0..3).map(|_| Array3::from_elem((3, 4, 4), 0.5)).collect();
        let depth: Vec<Array2<f32>> =
            (0..3).map(|i| Array2::from_elem((4, 4), 5.0 * (i as f32 + 1.0))).collect();
        let clip = build_clip(&rgb, &depth, 10.0, ClipLabel::Fake).unwrap();
        assert_eq!(clip.values.dim(), (4, 3, 4, 4));
        assert_eq!(clip.values[[3, 0, 0, 0]], 0.5); // 5 m / 10 m
        assert_eq!(clip.values[[3, 1, 0, 0]], 1.0); // 10 m
        assert_eq!(clip.values[[3, 2, 0, 0]], 1.0); // 15 m clamps
        assert!(matches!(
            build_clip(&rgb[..1], &depth[..1], 10.0, ClipLabel::Fake),
            Err(Error::Precondition(_))
        ));
    }
}
