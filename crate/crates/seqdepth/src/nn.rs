//! Layers, parameter storage, initialization and optimizers.
//!
//! Parameters live in a [`ParamStore`] keyed by stable names (the checkpoint
//! format serializes them by name). To build a training graph the store is
//! bound into the tape as leaves; inference paths read the arrays directly.

use crate::elem::Elem;
use crate::graph::{Gradients, Graph, Var};
use crate::kernels::{batchnorm, conv2d, conv3d};
use ndarray::{Array1, Array4, Array5, ArrayD, IxDyn};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Momentum of the running-statistics update in batch norm.
const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct PId(usize);

pub struct ParamEntry<T: Elem> {
    pub name: String,
    pub value: ArrayD<T>,
    pub trainable: bool,
}

pub struct ParamStore<T: Elem> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> PId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        PId(self.entries.len() - 1)
    }

    pub fn get(&self, id: PId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: PId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<PId> {
        self.by_name.get(name).copied().map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (PId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<PId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Inject every entry into a graph; trainable entries request gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.trainable))
            .collect();
        BoundParams { vars }
    }
}

pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }
}

/// Fan-in-scaled normal draw (variance 2/fan_in), the initialization used
/// for every convolution and linear weight in the package.
pub fn he_normal<T: Elem>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f64(dist.sample(rng)))
}

// ---- layers ----

pub struct Conv2dLayer {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            true,
        );
        let b = ps.add(
            format!("{name}.b"),
            ArrayD::zeros(IxDyn(&[out_ch])),
            true,
        );
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, bp: &BoundParams, x: Var) -> Var {
        g.conv2d(x, bp.var(self.w), bp.var(self.b), self.stride, self.pad)
    }

    pub fn infer<T: Elem>(&self, ps: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let w = ps.get(self.w).view().into_dimensionality().unwrap();
        let b = ps.get(self.b).view().into_dimensionality().unwrap();
        conv2d::forward(&x.view(), &w, Some(&b), self.stride, self.pad)
    }
}

pub struct Conv3dLayer {
    pub w: PId,
    pub b: PId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_normal(&[out_ch, in_ch, k, k, k], in_ch * k * k * k, rng),
            true,
        );
        let b = ps.add(
            format!("{name}.b"),
            ArrayD::zeros(IxDyn(&[out_ch])),
            true,
        );
        Conv3dLayer { w, b, stride, pad }
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, bp: &BoundParams, x: Var) -> Var {
        g.conv3d(x, bp.var(self.w), bp.var(self.b), self.stride, self.pad)
    }

    pub fn infer<T: Elem>(&self, ps: &ParamStore<T>, x: &Array5<T>) -> Array5<T> {
        let w = ps.get(self.w).view().into_dimensionality().unwrap();
        let b = ps.get(self.b).view().into_dimensionality().unwrap();
        conv3d::forward(&x.view(), &w, Some(&b), self.stride, self.pad)
    }
}

pub struct BatchNormLayer {
    pub gamma: PId,
    pub beta: PId,
    pub running_mean: PId,
    pub running_var: PId,
}

impl BatchNormLayer {
    pub fn new<T: Elem>(ps: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        BatchNormLayer {
            gamma: ps.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[ch])), true),
            beta: ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[ch])), true),
            running_mean: ps.add(format!("{name}.rmean"), ArrayD::zeros(IxDyn(&[ch])), false),
            running_var: ps.add(format!("{name}.rvar"), ArrayD::ones(IxDyn(&[ch])), false),
        }
    }

    /// Training mode updates running statistics in place.
    pub fn forward<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        ps: &mut ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Var {
        let rm: Array1<T> = ps
            .get(self.running_mean)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        let rv: Array1<T> = ps
            .get(self.running_var)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        let (y, mean, var) = g.batch_norm(
            x,
            bp.var(self.gamma),
            bp.var(self.beta),
            &rm,
            &rv,
            T::from_f64(BN_EPS),
            train,
        );
        if train {
            let mom = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - mom;
            let new_rm = rm.mapv(|v| v * keep) + mean.mapv(|v| v * mom);
            let new_rv = rv.mapv(|v| v * keep) + var.mapv(|v| v * mom);
            *ps.get_mut(self.running_mean) = new_rm.into_dyn();
            *ps.get_mut(self.running_var) = new_rv.into_dyn();
        }
        y
    }

    pub fn infer<T: Elem>(&self, ps: &ParamStore<T>, x: &ArrayD<T>) -> ArrayD<T> {
        let g: Array1<T> = ps.get(self.gamma).view().into_dimensionality().unwrap().to_owned();
        let b: Array1<T> = ps.get(self.beta).view().into_dimensionality().unwrap().to_owned();
        let rm: Array1<T> = ps
            .get(self.running_mean)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        let rv: Array1<T> = ps
            .get(self.running_var)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        batchnorm::forward(&x.view(), &g, &b, &rm, &rv, T::from_f64(BN_EPS), false).y
    }
}

pub struct LinearLayer {
    pub w: PId,
    pub b: PId,
}

impl LinearLayer {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LinearLayer {
            w: ps.add(
                format!("{name}.w"),
                he_normal(&[out_f, in_f], in_f, rng),
                true,
            ),
            b: ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])), true),
        }
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, bp: &BoundParams, x: Var) -> Var {
        g.linear(x, bp.var(self.w), bp.var(self.b))
    }
}

// ---- optimizers ----

pub struct Adam<T: Elem> {
    pub lr: T,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    ids: Vec<PId>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
}

impl<T: Elem> Adam<T> {
    pub fn new(ps: &ParamStore<T>, ids: Vec<PId>, lr: T, weight_decay: f64) -> Self {
        let m = ids.iter().map(|&i| ArrayD::zeros(ps.get(i).raw_dim())).collect();
        let v = ids.iter().map(|&i| ArrayD::zeros(ps.get(i).raw_dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore<T>, bp: &BoundParams, grads: &mut Gradients<T>) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(mut grad) = grads.take(bp.var(id)) else {
                continue;
            };
            let w = ps.get_mut(id);
            if self.weight_decay != 0.0 {
                grad.zip_mut_with(w, |g, &wv| *g = *g + wd * wv);
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            m.zip_mut_with(&grad, |mv, &g| *mv = b1 * *mv + (one - b1) * g);
            v.zip_mut_with(&grad, |vv, &g| *vv = b2 * *vv + (one - b2) * g * g);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|wv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *wv = *wv - self.lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    /// Optimizer state as named arrays for checkpointing.
    pub fn export(&self, ps: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
        let mut out = vec![(
            "adam.t".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), T::from_f64(self.t as f64)),
        )];
        for (k, &id) in self.ids.iter().enumerate() {
            out.push((format!("adam.m.{}", ps.name(id)), self.m[k].clone()));
            out.push((format!("adam.v.{}", ps.name(id)), self.v[k].clone()));
        }
        out
    }

    pub fn import(&mut self, ps: &ParamStore<T>, arrays: &HashMap<String, ArrayD<T>>) {
        if let Some(t) = arrays.get("adam.t") {
            self.t = t.iter().next().map(|&v| v.to_f64() as u64).unwrap_or(0);
        }
        for (k, &id) in self.ids.iter().enumerate() {
            if let Some(m) = arrays.get(&format!("adam.m.{}", ps.name(id))) {
                self.m[k] = m.clone();
            }
            if let Some(v) = arrays.get(&format!("adam.v.{}", ps.name(id))) {
                self.v[k] = v.clone();
            }
        }
    }
}

pub struct SgdMomentum<T: Elem> {
    pub lr: T,
    momentum: f64,
    ids: Vec<PId>,
    buf: Vec<ArrayD<T>>,
}

impl<T: Elem> SgdMomentum<T> {
    pub fn new(ps: &ParamStore<T>, ids: Vec<PId>, lr: T, momentum: f64) -> Self {
        let buf = ids.iter().map(|&i| ArrayD::zeros(ps.get(i).raw_dim())).collect();
        SgdMomentum {
            lr,
            momentum,
            ids,
            buf,
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore<T>, bp: &BoundParams, grads: &mut Gradients<T>) {
        let mu = T::from_f64(self.momentum);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(grad) = grads.take(bp.var(id)) else {
                continue;
            };
            let buf = &mut self.buf[k];
            buf.zip_mut_with(&grad, |b, &g| *b = mu * *b + g);
            let w = ps.get_mut(id);
            w.zip_mut_with(buf, |wv, &b| *wv = *wv - self.lr * b);
        }
    }

    pub fn export(&self, ps: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
        self.ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (format!("sgd.buf.{}", ps.name(id)), self.buf[k].clone()))
            .collect()
    }

    pub fn import(&mut self, ps: &ParamStore<T>, arrays: &HashMap<String, ArrayD<T>>) {
        for (k, &id) in self.ids.iter().enumerate() {
            if let Some(b) = arrays.get(&format!("sgd.buf.{}", ps.name(id))) {
                self.buf[k] = b.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_variance_close_to_two_over_fanin() {
        let mut rng = crate::rng::stream(3, "init", 0);
        let fan_in = 64 * 9;
        let w: ArrayD<f64> = he_normal(&[128, 64, 3, 3], fan_in, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / fan_in as f64;
        assert!((var - expect).abs() / expect < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = 0.5 * ||w - target||^2
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", ArrayD::zeros(IxDyn(&[4])), true);
        let target = ArrayD::from_shape_fn(IxDyn(&[4]), |d| d[0] as f64 - 1.5);
        let mut opt = Adam::new(&ps, vec![w], 0.05, 0.0);
        for _ in 0..500 {
            let mut g = Graph::<f64>::new();
            let bp = ps.bind(&mut g);
            let t = g.constant(target.clone());
            let d = g.sub(bp.var(w), t);
            let sq = g.mul(d, d);
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss);
            opt.step(&mut ps, &bp, &mut grads);
        }
        let err: f64 = ps
            .get(w)
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max err {err}");
    }

    #[test]
    fn sgd_momentum_minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", ArrayD::from_elem(IxDyn(&[3]), 2.0), true);
        let mut opt = SgdMomentum::new(&ps, vec![w], 0.05, 0.9);
        for _ in 0..200 {
            let mut g = Graph::<f64>::new();
            let bp = ps.bind(&mut g);
            let sq = g.mul(bp.var(w), bp.var(w));
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss);
            opt.step(&mut ps, &bp, &mut grads);
        }
        assert!(ps.get(w).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn conv_layer_infer_matches_graph_forward() {
        let mut rng = crate::rng::stream(9, "layer", 0);
        let mut ps = ParamStore::<f32>::new();
        let conv = Conv2dLayer::new(&mut ps, "c", 3, 8, 3, 1, 1, &mut rng);
        let x = Array4::<f32>::from_shape_fn((2, 3, 8, 8), |(n, c, h, w)| {
            ((n + c + h * w) % 13) as f32 * 0.1 - 0.5
        });
        let mut g = Graph::<f32>::new();
        let bp = ps.bind(&mut g);
        let xv = g.leaf(x.clone().into_dyn(), false);
        let y_graph = conv.forward(&mut g, &bp, xv);
        let y_infer = conv.infer(&ps, &x);
        for (a, b) in g.value(y_graph).iter().zip(y_infer.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batchnorm_running_stats_move_toward_batch_stats() {
        let mut ps = ParamStore::<f64>::new();
        let bn = BatchNormLayer::new(&mut ps, "bn", 2);
        let x = ArrayD::from_shape_fn(IxDyn(&[8, 2, 4]), |d| {
            if d[1] == 0 {
                3.0 + 0.1 * (d[0] as f64)
            } else {
                -1.0
            }
        });
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let bp = ps.bind(&mut g);
            let xv = g.leaf(x.clone(), false);
            let _ = bn.forward(&mut g, &bp, &mut ps, xv, true);
        }
        let rm = ps.get(bn.running_mean);
        assert!((rm[[0]] - 3.35).abs() < 0.05, "rmean {}", rm[[0]]);
        assert!((rm[[1]] + 1.0).abs() < 0.05);
    }
}
