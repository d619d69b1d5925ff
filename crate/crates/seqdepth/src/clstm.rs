//! The temporal core: a convolutional LSTM cell whose recurrent input is a
//! compressed copy of the previous frame's features, a strictly-sequential
//! sequence runner with an online stepper, and the temporally-blind
//! three-convolution baseline head used for ablations.
//!
//! Cell equations, per step (all convolutions 3x3 on the concatenation of
//! the current features with the compressed previous features):
//!
//! ```text
//! z_t   = concat(f_t, D(f_{t-1}))            c + 8 channels
//! fgate = sigmoid(conv_f(z_t))
//! igate = sigmoid(conv_i(z_t))
//! cand  = tanh(conv_C(z_t))
//! C_t   = fgate * C_{t-1} + igate * cand
//! ogate = sigmoid(conv_o(z_t))
//! R_t   = refine(concat(ogate, tanh(C_t)))   two convs -> 1 channel
//! ```
//!
//! Depth is `softplus(R_t) + d_min`, bilinearly upsampled to the input
//! resolution; positivity holds for any parameters.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::resize::bilinear_resize;
use crate::kernels::{sigmoid, softplus};
use crate::nn::{BoundParams, Conv2dLayer, ParamStore};
use crate::rng;
use ndarray::Array4;

/// Channel count of the compressed previous-frame features.
pub const PREV_COMPRESSED_CHANNELS: usize = 8;
/// Hidden width of the refine head's first convolution.
pub const REFINE_CHANNELS: usize = 128;
/// Depth floor added after softplus, meters.
pub const DEFAULT_D_MIN: f64 = 0.01;

/// Recurrent state: memory cell plus compressed previous-frame features,
/// both on the feature grid. Batched along the leading axis.
#[derive(Clone, Debug)]
pub struct ClstmState<T: Elem = f32> {
    pub cell: Array4<T>,
    pub prev_compressed: Array4<T>,
}

pub struct Clstm {
    /// Feature channels entering the cell (also the hidden width).
    pub c: usize,
    pub w_f: Conv2dLayer,
    pub w_i: Conv2dLayer,
    pub w_c: Conv2dLayer,
    pub w_o: Conv2dLayer,
    pub d_prev: Conv2dLayer,
    pub refine1: Conv2dLayer,
    pub refine2: Conv2dLayer,
}

impl Clstm {
    pub fn new<T: Elem>(c: usize, ps: &mut ParamStore<T>, seed: u64) -> Self {
        let mut r = rng::stream(seed, "clstm-init", 0);
        let zc = c + PREV_COMPRESSED_CHANNELS;
        Clstm {
            c,
            w_f: Conv2dLayer::new(ps, "clstm.gate_f", zc, c, 3, 1, 1, &mut r),
            w_i: Conv2dLayer::new(ps, "clstm.gate_i", zc, c, 3, 1, 1, &mut r),
            w_c: Conv2dLayer::new(ps, "clstm.gate_c", zc, c, 3, 1, 1, &mut r),
            w_o: Conv2dLayer::new(ps, "clstm.gate_o", zc, c, 3, 1, 1, &mut r),
            d_prev: Conv2dLayer::new(ps, "clstm.d_prev", c, PREV_COMPRESSED_CHANNELS, 1, 1, 0, &mut r),
            refine1: Conv2dLayer::new(ps, "clstm.refine1", 2 * c, REFINE_CHANNELS, 3, 1, 1, &mut r),
            refine2: Conv2dLayer::new(ps, "clstm.refine2", REFINE_CHANNELS, 1, 3, 1, 1, &mut r),
        }
    }

    pub fn check_dims<T: Elem>(&self, f_t: &Array4<T>, state: &ClstmState<T>) -> Result<()> {
        let (n, c, h, w) = f_t.dim();
        if c != self.c {
            return Err(Error::precondition(format!(
                "feature channels {c} do not match configured c={}",
                self.c
            )));
        }
        if state.cell.dim() != (n, self.c, h, w)
            || state.prev_compressed.dim() != (n, PREV_COMPRESSED_CHANNELS, h, w)
        {
            return Err(Error::precondition(format!(
                "state dims {:?}/{:?} do not match features {:?}",
                state.cell.dim(),
                state.prev_compressed.dim(),
                f_t.dim()
            )));
        }
        Ok(())
    }

    /// Zero cell; the compressed previous features are seeded from the first
    /// frame itself (duplicate-first-frame convention).
    pub fn initial_state<T: Elem>(&self, ps: &ParamStore<T>, f_first: &Array4<T>) -> ClstmState<T> {
        let (n, _, h, w) = f_first.dim();
        ClstmState {
            cell: Array4::zeros((n, self.c, h, w)),
            prev_compressed: self.d_prev.infer(ps, f_first),
        }
    }

    /// One recurrent step (inference path). Returns pre-activation depth
    /// logits on the feature grid plus the advanced state.
    pub fn cell_step<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        f_t: &Array4<T>,
        state: &ClstmState<T>,
    ) -> Result<(Array4<T>, ClstmState<T>)> {
        self.check_dims(f_t, state)?;
        let z = concat_ch(f_t, &state.prev_compressed);
        let fgate = self.w_f.infer(ps, &z).mapv(sigmoid);
        let igate = self.w_i.infer(ps, &z).mapv(sigmoid);
        let cand = self.w_c.infer(ps, &z).mapv(|v| v.tanh());
        let mut cell = fgate;
        cell.zip_mut_with(&state.cell, |f, &c| *f = *f * c);
        let mut add = igate;
        add.zip_mut_with(&cand, |i, &c| *i = *i * c);
        cell.zip_mut_with(&add, |c, &a| *c = *c + a);
        let ogate = self.w_o.infer(ps, &z).mapv(sigmoid);
        let r_in = concat_ch(&ogate, &cell.mapv(|v| v.tanh()));
        let h1 = self.refine1.infer(ps, &r_in).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let logits = self.refine2.infer(ps, &h1);
        let new_state = ClstmState {
            cell,
            prev_compressed: self.d_prev.infer(ps, f_t),
        };
        Ok((logits, new_state))
    }

    /// Graph twin of [`Clstm::cell_step`] for training.
    pub fn cell_step_graph<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        f_t: Var,
        cell: Var,
        prev_compressed: Var,
    ) -> (Var, Var, Var) {
        let z = g.concat(&[f_t, prev_compressed], 1);
        let fgate = {
            let c = self.w_f.forward(g, bp, z);
            g.sigmoid(c)
        };
        let igate = {
            let c = self.w_i.forward(g, bp, z);
            g.sigmoid(c)
        };
        let cand = {
            let c = self.w_c.forward(g, bp, z);
            g.tanh(c)
        };
        let keep = g.mul(fgate, cell);
        let add = g.mul(igate, cand);
        let new_cell = g.add(keep, add);
        let ogate = {
            let c = self.w_o.forward(g, bp, z);
            g.sigmoid(c)
        };
        let cell_t = g.tanh(new_cell);
        let r_in = g.concat(&[ogate, cell_t], 1);
        let h1 = {
            let c = self.refine1.forward(g, bp, r_in);
            g.relu(c)
        };
        let logits = self.refine2.forward(g, bp, h1);
        let new_prev = self.d_prev.forward(g, bp, f_t);
        (logits, new_cell, new_prev)
    }

    /// Strictly sequential left-to-right pass over per-frame features;
    /// returns positive depth maps upsampled to `(out_h, out_w)`.
    pub fn run_sequence<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        features: &[Array4<T>],
        out_hw: (usize, usize),
        d_min: T,
    ) -> Result<Vec<Array4<T>>> {
        if features.is_empty() {
            return Err(Error::precondition("run_sequence needs n >= 1 frames"));
        }
        let mut state = self.initial_state(ps, &features[0]);
        let mut out = Vec::with_capacity(features.len());
        for f_t in features {
            let (logits, next) = self.cell_step(ps, f_t, &state)?;
            state = next;
            out.push(logits_to_depth(&logits, out_hw, d_min));
        }
        Ok(out)
    }
}

/// Softplus + floor, then bilinear upsample to the output resolution.
pub fn logits_to_depth<T: Elem>(logits: &Array4<T>, out_hw: (usize, usize), d_min: T) -> Array4<T> {
    let pos = logits.mapv(|v| softplus(v) + d_min);
    bilinear_resize(&pos.view(), out_hw.0, out_hw.1)
}

pub fn logits_to_depth_graph<T: Elem>(
    g: &mut Graph<T>,
    logits: Var,
    out_hw: (usize, usize),
    d_min: T,
) -> Var {
    let sp = g.softplus(logits);
    let pos = g.add_scalar(sp, d_min);
    g.bilinear_resize(pos, out_hw.0, out_hw.1)
}

fn concat_ch<T: Elem>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
        .expect("channel concat")
        .as_standard_layout()
        .to_owned()
}

/// Online inference: owns the recurrent state so frame `t` can be processed
/// as it arrives. One stepper must not be advanced concurrently.
pub struct ClstmStepper<'a, T: Elem = f32> {
    clstm: &'a Clstm,
    ps: &'a ParamStore<T>,
    state: Option<ClstmState<T>>,
    out_hw: (usize, usize),
    d_min: T,
}

impl<'a, T: Elem> ClstmStepper<'a, T> {
    pub fn new(clstm: &'a Clstm, ps: &'a ParamStore<T>, out_hw: (usize, usize), d_min: T) -> Self {
        ClstmStepper {
            clstm,
            ps,
            state: None,
            out_hw,
            d_min,
        }
    }

    /// Feed the next frame's features, get its depth map.
    pub fn step(&mut self, f_t: &Array4<T>) -> Result<Array4<T>> {
        let state = match self.state.take() {
            Some(s) => s,
            None => self.clstm.initial_state(self.ps, f_t),
        };
        let (logits, next) = self.clstm.cell_step(self.ps, f_t, &state)?;
        self.state = Some(next);
        Ok(logits_to_depth(&logits, self.out_hw, self.d_min))
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}

/// The temporally blind ablation head: three plain convolutions
/// (128, 128, 1 channels) applied per frame.
pub struct BaselineHead {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
    pub conv3: Conv2dLayer,
}

impl BaselineHead {
    pub fn new<T: Elem>(c: usize, ps: &mut ParamStore<T>, seed: u64) -> Self {
        let mut r = rng::stream(seed, "baseline-init", 0);
        BaselineHead {
            conv1: Conv2dLayer::new(ps, "baseline.conv1", c, 128, 3, 1, 1, &mut r),
            conv2: Conv2dLayer::new(ps, "baseline.conv2", 128, 128, 3, 1, 1, &mut r),
            conv3: Conv2dLayer::new(ps, "baseline.conv3", 128, 1, 3, 1, 1, &mut r),
        }
    }

    pub fn forward_frame<T: Elem>(&self, ps: &ParamStore<T>, f_t: &Array4<T>) -> Array4<T> {
        let relu = |a: Array4<T>| a.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let h1 = relu(self.conv1.infer(ps, f_t));
        let h2 = relu(self.conv2.infer(ps, &h1));
        self.conv3.infer(ps, &h2)
    }

    pub fn forward_frame_graph<T: Elem>(&self, g: &mut Graph<T>, bp: &BoundParams, f_t: Var) -> Var {
        let c1 = self.conv1.forward(g, bp, f_t);
        let r1 = g.relu(c1);
        let c2 = self.conv2.forward(g, bp, r1);
        let r2 = g.relu(c2);
        self.conv3.forward(g, bp, r2)
    }

    /// Per-frame map over the sequence, same positivity and upsampling as
    /// the recurrent path.
    pub fn run_sequence<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        features: &[Array4<T>],
        out_hw: (usize, usize),
        d_min: T,
    ) -> Result<Vec<Array4<T>>> {
        if features.is_empty() {
            return Err(Error::precondition("run_sequence needs n >= 1 frames"));
        }
        Ok(features
            .iter()
            .map(|f| logits_to_depth(&self.forward_frame(ps, f), out_hw, d_min))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn rand_features<T: Elem>(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Array4<T>> {
        let mut r = rng::stream(seed, "clstm-test", 0);
        (0..n)
            .map(|_| {
                Array4::from_shape_fn((1, c, h, w), |_| T::from_f64(r.random_range(-1.0..1.0)))
            })
            .collect()
    }

    #[test]
    fn gate_convs_see_c_plus_8_channels() {
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(64, &mut ps, 0);
        assert_eq!(ps.get(m.w_f.w).shape(), &[64, 72, 3, 3]);
        assert_eq!(ps.get(m.d_prev.w).shape(), &[8, 64, 1, 1]);
        assert_eq!(ps.get(m.refine1.w).shape(), &[128, 128, 3, 3]);
        assert_eq!(ps.get(m.refine2.w).shape(), &[1, 128, 3, 3]);
    }

    #[test]
    fn saturated_gates_preserve_cell() {
        let c = 8;
        let mut ps = ParamStore::<f64>::new();
        let m = Clstm::new(c, &mut ps, 1);
        // zero every kernel, then saturate: forget open (+20), input closed (-20)
        let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
        for id in ids {
            ps.get_mut(id).fill(0.0);
        }
        ps.get_mut(m.w_f.b).fill(20.0);
        ps.get_mut(m.w_i.b).fill(-20.0);

        let f = rand_features(1, c, 6, 6, 2);
        let mut state = m.initial_state(&ps, &f[0]);
        let mut r = rng::stream(3, "cell", 0);
        state.cell = Array4::from_shape_fn((1, c, 6, 6), |_| r.random_range(-1.0..1.0));
        let before = state.cell.clone();
        let (_, next) = m.cell_step(&ps, &f[0], &state).unwrap();
        let max_err = next
            .cell
            .iter()
            .zip(before.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-3, "cell drifted by {max_err}");
    }

    #[test]
    fn zero_candidate_weights_give_zero_first_cell() {
        let c = 8;
        let mut ps = ParamStore::<f64>::new();
        let m = Clstm::new(c, &mut ps, 1);
        ps.get_mut(m.w_c.w).fill(0.0);
        ps.get_mut(m.w_c.b).fill(0.0);
        let f = rand_features(1, c, 4, 4, 9);
        let state = m.initial_state(&ps, &f[0]);
        assert!(state.cell.iter().all(|&v| v == 0.0));
        let (_, next) = m.cell_step(&ps, &f[0], &state).unwrap();
        // C_1 = fgate*0 + igate*tanh(0) = 0 regardless of input
        assert!(next.cell.iter().all(|&v| v.abs() == 0.0));
    }

    #[test]
    fn gate_ranges_hold_on_random_inputs() {
        let c = 8;
        let mut ps = ParamStore::<f64>::new();
        let m = Clstm::new(c, &mut ps, 4);
        let f = rand_features(1, c, 6, 6, 5);
        let state = m.initial_state(&ps, &f[0]);
        let z = concat_ch(&f[0], &state.prev_compressed);
        for layer in [&m.w_f, &m.w_i, &m.w_o] {
            let gate = layer.infer(&ps, &z).mapv(sigmoid);
            assert!(gate.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let cand = m.w_c.infer(&ps, &z).mapv(|v| v.tanh());
        assert!(cand.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn depth_positive_for_any_params() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(c, &mut ps, 6);
        // exaggerate weights to push logits strongly negative
        ps.get_mut(m.refine2.b).fill(-50.0);
        let f = rand_features(3, c, 4, 4, 7);
        let d_min = 0.01f32;
        let depths = m.run_sequence(&ps, &f, (16, 16), d_min).unwrap();
        for d in &depths {
            assert!(d.iter().all(|&v| v > d_min * 0.999 && v.is_finite()));
        }
    }

    #[test]
    fn single_frame_equals_cell_step_on_initial_state() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(c, &mut ps, 8);
        let f = rand_features(1, c, 4, 4, 11);
        let batch = m.run_sequence(&ps, &f, (8, 8), 0.01).unwrap();
        let state = m.initial_state(&ps, &f[0]);
        let (logits, _) = m.cell_step(&ps, &f[0], &state).unwrap();
        let direct = logits_to_depth(&logits, (8, 8), 0.01);
        assert_eq!(batch[0], direct);
    }

    #[test]
    fn repeat_runs_are_stateless_and_stepper_matches_batch() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(c, &mut ps, 12);
        let f = rand_features(5, c, 4, 4, 13);
        let a = m.run_sequence(&ps, &f, (16, 16), 0.01).unwrap();
        let b = m.run_sequence(&ps, &f, (16, 16), 0.01).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        let mut stepper = ClstmStepper::new(&m, &ps, (16, 16), 0.01);
        for (t, f_t) in f.iter().enumerate() {
            let d = stepper.step(f_t).unwrap();
            for (x, y) in d.iter().zip(a[t].iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "frame {t}");
            }
        }
    }

    #[test]
    fn temporal_sensitivity_clstm_yes_baseline_no() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(c, &mut ps, 14);
        let mut ps_b = ParamStore::<f32>::new();
        let head = BaselineHead::new(c, &mut ps_b, 15);

        let f = rand_features(4, c, 4, 4, 16);
        let mut f_perturbed = f.clone();
        f_perturbed[2] = &f[2] + 0.25f32; // change frame t-1 = index 2

        let a = m.run_sequence(&ps, &f, (8, 8), 0.01).unwrap();
        let b = m.run_sequence(&ps, &f_perturbed, (8, 8), 0.01).unwrap();
        let delta_t3: f32 = a[3]
            .iter()
            .zip(b[3].iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(delta_t3 > 1e-6, "clstm output at t must depend on frame t-1");

        let ha = head.run_sequence(&ps_b, &f, (8, 8), 0.01).unwrap();
        let hb = head.run_sequence(&ps_b, &f_perturbed, (8, 8), 0.01).unwrap();
        assert_eq!(ha[3], hb[3], "baseline output at t must ignore frame t-1");
        assert_ne!(ha[2], hb[2]);
    }

    #[test]
    fn baseline_is_a_per_frame_map_under_permutation() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let head = BaselineHead::new(c, &mut ps, 17);
        let f = rand_features(4, c, 4, 4, 18);
        let perm = [2usize, 0, 3, 1];
        let fp: Vec<_> = perm.iter().map(|&i| f[i].clone()).collect();
        let a = head.run_sequence(&ps, &f, (8, 8), 0.01).unwrap();
        let b = head.run_sequence(&ps, &fp, (8, 8), 0.01).unwrap();
        for (out_idx, &src) in perm.iter().enumerate() {
            assert_eq!(b[out_idx], a[src]);
        }
        assert_eq!(ps.get(head.conv1.w).shape()[0], 128);
        assert_eq!(ps.get(head.conv2.w).shape()[0], 128);
        assert_eq!(ps.get(head.conv3.w).shape()[0], 1);
    }

    #[test]
    fn graph_and_infer_paths_agree() {
        let c = 8;
        let mut ps = ParamStore::<f32>::new();
        let m = Clstm::new(c, &mut ps, 20);
        let f = rand_features(3, c, 4, 4, 21);
        let infer = m.run_sequence(&ps, &f, (8, 8), 0.01).unwrap();

        let mut g = Graph::<f32>::new();
        let bp = ps.bind(&mut g);
        let f0 = g.constant(f[0].clone().into_dyn());
        let init_prev = m.d_prev.forward(&mut g, &bp, f0);
        let init_cell = g.constant(ArrayD::zeros(IxDyn(&[1, c, 4, 4])));
        let (mut cell, mut prev) = (init_cell, init_prev);
        for (t, ft) in f.iter().enumerate() {
            let fv = g.constant(ft.clone().into_dyn());
            let (logits, nc, np) = m.cell_step_graph(&mut g, &bp, fv, cell, prev);
            cell = nc;
            prev = np;
            let d = logits_to_depth_graph(&mut g, logits, (8, 8), 0.01);
            for (a, b) in g.value(d).iter().zip(infer[t].iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "frame {t}");
            }
        }
    }

    #[test]
    fn two_step_gradients_match_finite_differences() {
        let c = 4;
        let h = 3;
        let mut ps = ParamStore::<f64>::new();
        let m = Clstm::new(c, &mut ps, 30);
        let mut r = rng::stream(31, "fd", 0);
        let f1 = ArrayD::from_shape_fn(IxDyn(&[1, c, h, h]), |_| r.random_range(-1.0..1.0));
        let f2 = ArrayD::from_shape_fn(IxDyn(&[1, c, h, h]), |_| r.random_range(-1.0..1.0));
        let wsum = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, h]), |_| r.random_range(-1.0..1.0));

        let run = |ps: &ParamStore<f64>, f1v: &ArrayD<f64>, f2v: &ArrayD<f64>, ng: bool| {
            let mut g = Graph::<f64>::new();
            let bp = ps.bind(&mut g);
            let f1n = g.leaf(f1v.clone(), ng);
            let f2n = g.leaf(f2v.clone(), ng);
            let cell0 = g.constant(ArrayD::zeros(IxDyn(&[1, c, h, h])));
            let prev0 = m.d_prev.forward(&mut g, &bp, f1n);
            let (l1, c1, p1) = m.cell_step_graph(&mut g, &bp, f1n, cell0, prev0);
            let (l2, _, _) = m.cell_step_graph(&mut g, &bp, f2n, c1, p1);
            let sum = g.add(l1, l2);
            let w = g.constant(wsum.clone());
            let p = g.mul(sum, w);
            let loss = g.sum_all(p);
            (g, f1n, loss)
        };
        let (g, f1n, loss) = run(&ps, &f1, &f2, true);
        let mut grads = g.backward(loss);
        let df1 = grads.take(f1n).unwrap();
        let fd = gradcheck::finite_diff(
            &f1,
            |v| {
                let (g, _, loss) = run(&ps, v, &f2, false);
                g.scalar(loss)
            },
            1e-6,
        );
        let rel = gradcheck::rel_error(&df1, &fd);
        assert!(rel < 1e-4, "two-step grad rel err {rel}");
    }
}
