//! Reverse-mode autodiff over `ndarray` buffers.
//!
//! A [`Graph`] is an eagerly-evaluated tape: every operator computes its
//! value when recorded, and `backward` walks the tape in reverse pushing
//! gradients to the leaves. One graph is built per training step; parameters
//! enter as leaves flagged `needs_grad`.

use crate::elem::Elem;
use crate::kernels::{batchnorm, conv2d, conv3d, pool, resize};
use ndarray::{Array1, ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, IxDyn, Slice};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<T: Elem> {
    Leaf,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Conv3d {
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Linear,
    BatchNorm {
        train: bool,
        mean: Array1<T>,
        invstd: Array1<T>,
    },
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Ln1p,
    Sqrt,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(T),
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
    },
    Reshape,
    NearestUp2x,
    Bilinear,
    MaxPool3d {
        argmax: Vec<usize>,
    },
    GlobalAvgPool,
    SumAll,
    MeanAll,
    /// Forward difference along the second-to-last axis, replicate boundary.
    DiffRows,
    /// Forward difference along the last axis, replicate boundary.
    DiffCols,
}

struct Node<T: Elem> {
    value: ArrayD<T>,
    parents: Vec<Var>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().expect("non-empty")
    }

    fn push(&mut self, value: ArrayD<T>, parents: Vec<Var>, op: Op<T>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    // ---- dense / conv ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("conv2d input rank 4");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("conv2d kernel rank 4");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("conv2d bias rank 1");
        let y = conv2d::forward(&xv, &wv, Some(&bv), stride, pad).into_dyn();
        self.push(y, vec![x, w, b], Op::Conv2d { stride, pad })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix5>().expect("conv3d input rank 5");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix5>().expect("conv3d kernel rank 5");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("conv3d bias rank 1");
        let y = conv3d::forward(&xv, &wv, Some(&bv), stride, pad).into_dyn();
        self.push(y, vec![x, w, b], Op::Conv3d { stride, pad })
    }

    /// x (N,K) * w (O,K)^T + b (O) -> (N,O)
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("linear input rank 2");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().expect("linear weight rank 2");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("linear bias rank 1");
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            row.zip_mut_with(&bv, |r, &b| *r = *r + b);
        }
        self.push(y.into_dyn(), vec![x, w, b], Op::Linear)
    }

    /// Batch normalization; returns the output var plus the batch statistics
    /// actually computed (for running-average updates by the caller).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<T>,
        running_var: &Array1<T>,
        eps: T,
        train: bool,
    ) -> (Var, Array1<T>, Array1<T>) {
        let g = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("gamma rank 1").to_owned();
        let b = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().expect("beta rank 1").to_owned();
        let out = batchnorm::forward(
            &self.nodes[x.0].value.view(),
            &g,
            &b,
            running_mean,
            running_var,
            eps,
            train,
        );
        let (mean, invstd, var) = (out.mean, out.invstd, out.var);
        let v = self.push(
            out.y,
            vec![x, gamma, beta],
            Op::BatchNorm {
                train,
                mean: mean.clone(),
                invstd,
            },
        );
        (v, mean, var)
    }

    // ---- elementwise ----

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let y = self.nodes[x.0].value.mapv(f);
        self.push(y, vec![x], op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, crate::kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh, |v| v.tanh())
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus, crate::kernels::softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs, |v| v.abs())
    }

    /// ln(1 + x); defined for x > -1.
    pub fn ln1p(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln1p, |v| v.ln_1p())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt, |v| v.sqrt())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let mut y = av.clone();
        y.zip_mut_with(bv, |x, &y2| *x = f(*x, y2));
        self.push(y, vec![a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar, |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::MulScalar(s), |v| v * s)
    }

    // ---- shape ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let y = y.as_standard_layout().to_owned();
        self.push(y, parts.to_vec(), Op::Concat { axis, sizes })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let y = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(y, vec![x], Op::Narrow { axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.nodes[x.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(y, vec![x], Op::Reshape)
    }

    pub fn nearest_up2x(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("upsample rank 4");
        let y = resize::nearest_up2x(&xv).into_dyn();
        self.push(y, vec![x], Op::NearestUp2x)
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("resize rank 4");
        let y = resize::bilinear_resize(&xv, oh, ow).into_dyn();
        self.push(y, vec![x], Op::Bilinear)
    }

    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix5>().expect("pool rank 5");
        let (y, argmax) = pool::maxpool3d_forward(&xv, kernel, stride);
        self.push(y.into_dyn(), vec![x], Op::MaxPool3d { argmax })
    }

    /// (N, C, spatial...) -> (N, C) mean over all trailing dims.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product::<usize>().max(1);
        let flat = self.nodes[x.0]
            .value
            .to_shape(IxDyn(&[n, c, l]))
            .expect("gap reshape");
        let y = flat.sum_axis(Axis(2)) / T::from_f64(l as f64);
        self.push(y.into_dyn(), vec![x], Op::GlobalAvgPool)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![x],
            Op::SumAll,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.nodes[x.0].value.sum() / T::from_f64(n as f64);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), vec![x], Op::MeanAll)
    }

    /// Forward difference along rows (axis -2) with replicate boundary:
    /// y[..., i, :] = x[..., i+1, :] - x[..., i, :], last row = 0.
    pub fn diff_rows(&mut self, x: Var) -> Var {
        let y = diff_forward(&self.nodes[x.0].value, true);
        self.push(y, vec![x], Op::DiffRows)
    }

    /// Forward difference along the last axis with replicate boundary.
    pub fn diff_cols(&mut self, x: Var) -> Var {
        let y = diff_forward(&self.nodes[x.0].value, false);
        self.push(y, vec![x], Op::DiffCols)
    }

    // ---- backward ----

    /// Backpropagate from a scalar node; returns per-node gradients for every
    /// leaf that was flagged `needs_grad`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[id];
        let parents = &node.parents;
        let wants: Vec<bool> = parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
        let mut out: Vec<Option<ArrayD<T>>> = vec![None; parents.len()];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, pad } => {
                let x = self.nodes[parents[0].0].value.view().into_dimensionality::<Ix4>().unwrap();
                let w = self.nodes[parents[1].0].value.view().into_dimensionality::<Ix4>().unwrap();
                let dy = g.view().into_dimensionality::<Ix4>().unwrap();
                if wants[0] {
                    out[0] = Some(
                        conv2d::backward_input(&dy, &w, x.dim(), *stride, *pad).into_dyn(),
                    );
                }
                if wants[1] || wants[2] {
                    let (dw, db) = conv2d::backward_params(&x, &dy, w.dim(), *stride, *pad);
                    if wants[1] {
                        out[1] = Some(dw.into_dyn());
                    }
                    if wants[2] {
                        out[2] = Some(db.into_dyn());
                    }
                }
            }
            Op::Conv3d { stride, pad } => {
                let x = self.nodes[parents[0].0].value.view().into_dimensionality::<Ix5>().unwrap();
                let w = self.nodes[parents[1].0].value.view().into_dimensionality::<Ix5>().unwrap();
                let dy = g.view().into_dimensionality::<Ix5>().unwrap();
                if wants[0] {
                    out[0] = Some(
                        conv3d::backward_input(&dy, &w, x.dim(), *stride, *pad).into_dyn(),
                    );
                }
                if wants[1] || wants[2] {
                    let (dw, db) = conv3d::backward_params(&x, &dy, w.dim(), *stride, *pad);
                    if wants[1] {
                        out[1] = Some(dw.into_dyn());
                    }
                    if wants[2] {
                        out[2] = Some(db.into_dyn());
                    }
                }
            }
            Op::Linear => {
                let x = self.nodes[parents[0].0].value.view().into_dimensionality::<Ix2>().unwrap();
                let w = self.nodes[parents[1].0].value.view().into_dimensionality::<Ix2>().unwrap();
                let dy = g.view().into_dimensionality::<Ix2>().unwrap();
                if wants[0] {
                    out[0] = Some(dy.dot(&w).into_dyn());
                }
                if wants[1] {
                    out[1] = Some(dy.t().dot(&x).into_dyn());
                }
                if wants[2] {
                    out[2] = Some(dy.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::BatchNorm {
                train,
                mean,
                invstd,
            } => {
                let x = &self.nodes[parents[0].0].value;
                let gamma = self.nodes[parents[1].0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let bg = batchnorm::backward(&x.view(), &g.view(), &gamma, mean, invstd, *train);
                if wants[0] {
                    out[0] = Some(bg.dx);
                }
                if wants[1] {
                    out[1] = Some(bg.dgamma.into_dyn());
                }
                if wants[2] {
                    out[2] = Some(bg.dbeta.into_dyn());
                }
            }
            Op::Relu => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &v| {
                    if v <= T::zero() {
                        *d = T::zero()
                    }
                });
                out[0] = Some(dx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &s| *d = *d * s * (T::one() - s));
                out[0] = Some(dx);
            }
            Op::Tanh => {
                let y = &node.value;
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &t| *d = *d * (T::one() - t * t));
                out[0] = Some(dx);
            }
            Op::Softplus => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &v| *d = *d * crate::kernels::sigmoid(v));
                out[0] = Some(dx);
            }
            Op::Abs => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &v| {
                    *d = if v > T::zero() {
                        *d
                    } else if v < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    }
                });
                out[0] = Some(dx);
            }
            Op::Ln1p => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &v| *d = *d / (T::one() + v));
                out[0] = Some(dx);
            }
            Op::Sqrt => {
                let y = &node.value;
                let half = T::from_f64(0.5);
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &s| *d = *d * half / s);
                out[0] = Some(dx);
            }
            Op::Add => {
                if wants[0] {
                    out[0] = Some(g.clone());
                }
                if wants[1] {
                    out[1] = Some(g.clone());
                }
            }
            Op::Sub => {
                if wants[0] {
                    out[0] = Some(g.clone());
                }
                if wants[1] {
                    out[1] = Some(g.mapv(|v| -v));
                }
            }
            Op::Mul => {
                if wants[0] {
                    let mut da = g.clone();
                    da.zip_mut_with(&self.nodes[parents[1].0].value, |d, &b| *d = *d * b);
                    out[0] = Some(da);
                }
                if wants[1] {
                    let mut db = g.clone();
                    db.zip_mut_with(&self.nodes[parents[0].0].value, |d, &a| *d = *d * a);
                    out[1] = Some(db);
                }
            }
            Op::Div => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                if wants[0] {
                    let mut da = g.clone();
                    da.zip_mut_with(b, |d, &bv| *d = *d / bv);
                    out[0] = Some(da);
                }
                if wants[1] {
                    let mut db = g.clone();
                    ndarray::Zip::from(&mut db).and(a).and(b).for_each(|d, &av, &bv| {
                        *d = -*d * av / (bv * bv);
                    });
                    out[1] = Some(db);
                }
            }
            Op::AddScalar => {
                out[0] = Some(g.clone());
            }
            Op::MulScalar(s) => {
                out[0] = Some(g.mapv(|v| v * *s));
            }
            Op::Concat { axis, sizes } => {
                let mut off = 0usize;
                for (i, sz) in sizes.iter().enumerate() {
                    if wants[i] {
                        out[i] = Some(
                            g.slice_axis(Axis(*axis), Slice::from(off..off + sz))
                                .to_owned(),
                        );
                    }
                    off += sz;
                }
            }
            Op::Narrow { axis, start } => {
                let parent_shape = self.nodes[parents[0].0].value.raw_dim();
                let mut dx = ArrayD::<T>::zeros(parent_shape);
                let len = g.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                out[0] = Some(dx);
            }
            Op::Reshape => {
                let parent_shape = self.nodes[parents[0].0].value.shape().to_vec();
                out[0] = Some(
                    g.to_shape(IxDyn(&parent_shape)).expect("reshape back").to_owned(),
                );
            }
            Op::NearestUp2x => {
                let dy = g.view().into_dimensionality::<Ix4>().unwrap();
                out[0] = Some(resize::nearest_up2x_backward(&dy).into_dyn());
            }
            Op::Bilinear => {
                let xs = self.nodes[parents[0].0].value.shape();
                let (ih, iw) = (xs[2], xs[3]);
                let dy = g.view().into_dimensionality::<Ix4>().unwrap();
                out[0] = Some(resize::bilinear_resize_backward(&dy, ih, iw).into_dyn());
            }
            Op::MaxPool3d { argmax } => {
                let xdims = self.nodes[parents[0].0].value.view().into_dimensionality::<Ix5>().unwrap().dim();
                let dy = g.view().into_dimensionality::<Ix5>().unwrap();
                out[0] = Some(pool::maxpool3d_backward(&dy, argmax, xdims).into_dyn());
            }
            Op::GlobalAvgPool => {
                let xshape = self.nodes[parents[0].0].value.shape().to_vec();
                let l: usize = xshape[2..].iter().product::<usize>().max(1);
                let scale = T::one() / T::from_f64(l as f64);
                let mut dx = ArrayD::<T>::zeros(IxDyn(&xshape));
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, c) = g2.dim();
                let dxs = dx.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g2[[ni, ci]] * scale;
                        let base = (ni * c + ci) * l;
                        for li in 0..l {
                            dxs[base + li] = gv;
                        }
                    }
                }
                out[0] = Some(dx);
            }
            Op::SumAll => {
                let gv = *g.iter().next().unwrap();
                let xshape = self.nodes[parents[0].0].value.raw_dim();
                out[0] = Some(ArrayD::from_elem(xshape, gv));
            }
            Op::MeanAll => {
                let n = self.nodes[parents[0].0].value.len();
                let gv = *g.iter().next().unwrap() / T::from_f64(n as f64);
                let xshape = self.nodes[parents[0].0].value.raw_dim();
                out[0] = Some(ArrayD::from_elem(xshape, gv));
            }
            Op::DiffRows => {
                out[0] = Some(diff_backward(g, true));
            }
            Op::DiffCols => {
                out[0] = Some(diff_backward(g, false));
            }
        }
        for (i, og) in out.into_iter().enumerate() {
            if let Some(og) = og {
                accumulate(grads, parents[i].0, og);
            }
        }
    }
}

fn accumulate<T: Elem>(grads: &mut [Option<ArrayD<T>>], id: usize, g: ArrayD<T>) {
    match &mut grads[id] {
        Some(acc) => {
            acc.zip_mut_with(&g, |a, &b| *a = *a + b);
        }
        slot => *slot = Some(g),
    }
}

/// View (..., H, W) as (B, H, W) rows.
fn bhw(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 2, "diff needs at least 2 dims");
    let h = shape[r - 2];
    let w = shape[r - 1];
    let b: usize = shape[..r - 2].iter().product::<usize>().max(1);
    (b, h, w)
}

fn diff_forward<T: Elem>(x: &ArrayD<T>, rows: bool) -> ArrayD<T> {
    let (b, h, w) = bhw(x.shape());
    let xc = x.as_standard_layout();
    let xs = xc.as_slice().expect("standard layout");
    let mut y = ArrayD::<T>::zeros(x.raw_dim());
    let ys = y.as_slice_mut().unwrap();
    for bi in 0..b {
        let base = bi * h * w;
        if rows {
            for hi in 0..h - 1 {
                for wi in 0..w {
                    let i = base + hi * w + wi;
                    ys[i] = xs[i + w] - xs[i];
                }
            }
            // replicate boundary: last row difference is zero
        } else {
            for hi in 0..h {
                for wi in 0..w - 1 {
                    let i = base + hi * w + wi;
                    ys[i] = xs[i + 1] - xs[i];
                }
            }
        }
    }
    y
}

fn diff_backward<T: Elem>(g: &ArrayD<T>, rows: bool) -> ArrayD<T> {
    let (b, h, w) = bhw(g.shape());
    let gc = g.as_standard_layout();
    let gs = gc.as_slice().expect("standard layout");
    let mut dx = ArrayD::<T>::zeros(g.raw_dim());
    let ds = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        let base = bi * h * w;
        if rows {
            for hi in 0..h - 1 {
                for wi in 0..w {
                    let i = base + hi * w + wi;
                    ds[i + w] = ds[i + w] + gs[i];
                    ds[i] = ds[i] - gs[i];
                }
            }
        } else {
            for hi in 0..h {
                for wi in 0..w - 1 {
                    let i = base + hi * w + wi;
                    ds[i + 1] = ds[i + 1] + gs[i];
                    ds[i] = ds[i] - gs[i];
                }
            }
        }
    }
    dx
}

pub struct Gradients<T: Elem> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub mod gradcheck {
    //! Central finite differences for gradient verification. These helpers
    //! never touch the tape; they re-evaluate a closure, so they stay
    //! independent of the backward implementation they are used to check.

    use ndarray::ArrayD;

    pub fn finite_diff(
        x0: &ArrayD<f64>,
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
        eps: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::<f64>::zeros(x0.raw_dim());
        let mut x = x0.clone();
        for i in 0..x0.len() {
            let orig = x.as_slice_mut().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + eps;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[i] = orig - eps;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    /// Finite differences at a subset of flat indices (for large tensors).
    pub fn finite_diff_at(
        x0: &ArrayD<f64>,
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
        eps: f64,
        idxs: &[usize],
    ) -> Vec<f64> {
        let mut x = x0.clone();
        idxs.iter()
            .map(|&i| {
                let orig = x.as_slice_mut().unwrap()[i];
                x.as_slice_mut().unwrap()[i] = orig + eps;
                let fp = f(&x);
                x.as_slice_mut().unwrap()[i] = orig - eps;
                let fm = f(&x);
                x.as_slice_mut().unwrap()[i] = orig;
                (fp - fm) / (2.0 * eps)
            })
            .collect()
    }

    /// Relative L2 error between two gradient arrays.
    pub fn rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nd: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if na == 0.0 && nb == 0.0 {
            return 0.0;
        }
        nd / na.max(nb)
    }

    pub fn rel_error_slice(a: &[f64], b: &[f64]) -> f64 {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nd: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if na == 0.0 && nb == 0.0 {
            return 0.0;
        }
        nd / na.max(nb)
    }
}
