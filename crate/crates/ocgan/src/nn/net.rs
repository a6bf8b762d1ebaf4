//! Sequential networks over named parameters.
//!
//! A [`Net`] is a static description: an ordered list of named layers whose
//! parameters live in a [`ParameterStore`] under `net/layer/param` keys.
//! Forward passes return a [`NetPass`] carrying per-layer caches so the
//! matching backward pass can run without re-deriving intermediate state.

use ndarray::{Array1, Array4, ArrayD, Axis, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use super::batchnorm::{bn_backward, bn_forward, BnCache};
use super::conv::{conv2d_backward, conv2d_forward, convt2d_backward, convt2d_forward, ConvGeom};
use super::dense::{dense_backward, dense_forward};
use super::{GradStore, ParameterStore};
use crate::{rng, Real};

/// Statistic regime for a forward pass.
///
/// `Train` and `Frozen` both normalize with batch statistics; only `Train`
/// updates the running averages. `Eval` uses the stored averages and is
/// fully elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
    Eval,
}

#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvT {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        features: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Tanh,
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Net {
    name: String,
    layers: Vec<(String, LayerSpec)>,
}

enum LayerCache<R: Real> {
    Conv { x: Array4<R> },
    ConvT { x: Array4<R> },
    Dense { x: ndarray::Array2<R> },
    Bn(BnCache<R>),
    LeakyRelu { x: ArrayD<R> },
    Relu { x: ArrayD<R> },
    Tanh { y: ArrayD<R> },
    Sigmoid { y: ArrayD<R> },
    Flatten { shape: Vec<usize> },
}

/// Result of a cached forward pass.
pub struct NetPass<R: Real> {
    pub output: ArrayD<R>,
    caches: Vec<LayerCache<R>>,
    stat_updates: Vec<(String, Array1<R>, Array1<R>)>,
}

impl<R: Real> NetPass<R> {
    /// Write the pending running-statistic updates into the store.
    /// Only a `Mode::Train` pass produces any.
    pub fn commit_stats(&self, store: &mut ParameterStore<R>) {
        for (prefix, mean, var) in &self.stat_updates {
            store.set(
                &format!("{prefix}/running_mean"),
                mean.clone().into_dyn(),
            );
            store.set(&format!("{prefix}/running_var"), var.clone().into_dyn());
        }
    }
}

impl Net {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&mut self, layer_name: impl Into<String>, spec: LayerSpec) {
        self.layers.push((layer_name.into(), spec));
    }

    fn key(&self, layer: &str, param: &str) -> String {
        format!("{}/{}/{}", self.name, layer, param)
    }

    /// Create all parameters: Gaussian(0, `weight_std`) kernels, zero biases,
    /// identity batch-norm with zero-mean/unit-variance running statistics.
    pub fn init_params<R: Real>(
        &self,
        store: &mut ParameterStore<R>,
        rng: &mut ChaCha8Rng,
        weight_std: f64,
    ) {
        for (lname, spec) in &self.layers {
            match spec {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let w = rng::gaussian::<R>(
                        rng,
                        &[*out_ch, *in_ch, *kernel, *kernel],
                        0.0,
                        weight_std,
                    );
                    store.insert(self.key(lname, "w"), w);
                    store.insert(self.key(lname, "b"), ArrayD::zeros(vec![*out_ch]));
                }
                LayerSpec::ConvT {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let w = rng::gaussian::<R>(
                        rng,
                        &[*in_ch, *out_ch, *kernel, *kernel],
                        0.0,
                        weight_std,
                    );
                    store.insert(self.key(lname, "w"), w);
                    store.insert(self.key(lname, "b"), ArrayD::zeros(vec![*out_ch]));
                }
                LayerSpec::Dense { in_dim, out_dim } => {
                    let w = rng::gaussian::<R>(rng, &[*in_dim, *out_dim], 0.0, weight_std);
                    store.insert(self.key(lname, "w"), w);
                    store.insert(self.key(lname, "b"), ArrayD::zeros(vec![*out_dim]));
                }
                LayerSpec::BatchNorm { features } => {
                    store.insert(self.key(lname, "gamma"), ArrayD::ones(vec![*features]));
                    store.insert(self.key(lname, "beta"), ArrayD::zeros(vec![*features]));
                    store.insert(
                        self.key(lname, "running_mean"),
                        ArrayD::zeros(vec![*features]),
                    );
                    store.insert(
                        self.key(lname, "running_var"),
                        ArrayD::ones(vec![*features]),
                    );
                }
                _ => {}
            }
        }
    }

    /// Forward pass with caches for a later [`Net::backward`].
    pub fn forward_cached<R: Real>(
        &self,
        store: &ParameterStore<R>,
        input: ArrayD<R>,
        mode: Mode,
    ) -> NetPass<R> {
        let mut cur = input;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stat_updates = Vec::new();
        for (lname, spec) in &self.layers {
            match spec {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let x = cur.into_dimensionality::<Ix4>().expect("conv input rank");
                    let w = store.get(&self.key(lname, "w"));
                    let b = store.get(&self.key(lname, "b"));
                    let g = ConvGeom {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let y = conv2d_forward(
                        &x,
                        &w.view().into_dimensionality::<Ix4>().unwrap(),
                        &b.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                        g,
                    );
                    caches.push(LayerCache::Conv { x });
                    cur = y.into_dyn();
                }
                LayerSpec::ConvT {
                    kernel,
                    stride,
                    pad,
                    out_pad,
                    ..
                } => {
                    let x = cur.into_dimensionality::<Ix4>().expect("convT input rank");
                    let w = store.get(&self.key(lname, "w"));
                    let b = store.get(&self.key(lname, "b"));
                    let g = ConvGeom {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let y = convt2d_forward(
                        &x,
                        &w.view().into_dimensionality::<Ix4>().unwrap(),
                        &b.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                        g,
                        *out_pad,
                    );
                    caches.push(LayerCache::ConvT { x });
                    cur = y.into_dyn();
                }
                LayerSpec::Dense { .. } => {
                    let x = cur.into_dimensionality::<Ix2>().expect("dense input rank");
                    let w = store.get(&self.key(lname, "w"));
                    let b = store.get(&self.key(lname, "b"));
                    let y = dense_forward(
                        &x,
                        &w.view().into_dimensionality::<Ix2>().unwrap(),
                        &b.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                    );
                    caches.push(LayerCache::Dense { x });
                    cur = y.into_dyn();
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = store.get(&self.key(lname, "gamma"));
                    let beta = store.get(&self.key(lname, "beta"));
                    let rm = store.get(&self.key(lname, "running_mean"));
                    let rv = store.get(&self.key(lname, "running_var"));
                    let out = bn_forward(
                        &cur,
                        gamma.view().into_dimensionality().unwrap(),
                        beta.view().into_dimensionality().unwrap(),
                        rm.view().into_dimensionality().unwrap(),
                        rv.view().into_dimensionality().unwrap(),
                        mode,
                    );
                    if let Some((mean, var)) = out.stat_update {
                        stat_updates.push((format!("{}/{}", self.name, lname), mean, var));
                    }
                    caches.push(LayerCache::Bn(out.cache));
                    cur = out.y;
                }
                LayerSpec::LeakyRelu { slope } => {
                    let s = R::from_f64(*slope);
                    let y = cur.mapv(|v| if v > R::zero() { v } else { s * v });
                    caches.push(LayerCache::LeakyRelu { x: cur });
                    cur = y;
                }
                LayerSpec::Relu => {
                    let y = cur.mapv(|v| if v > R::zero() { v } else { R::zero() });
                    caches.push(LayerCache::Relu { x: cur });
                    cur = y;
                }
                LayerSpec::Tanh => {
                    let y = cur.mapv(|v| v.tanh());
                    caches.push(LayerCache::Tanh { y: y.clone() });
                    cur = y;
                }
                LayerSpec::Sigmoid => {
                    let y = cur.mapv(|v| R::one() / (R::one() + (-v).exp()));
                    caches.push(LayerCache::Sigmoid { y: y.clone() });
                    cur = y;
                }
                LayerSpec::Flatten => {
                    let shape = cur.shape().to_vec();
                    let b = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    caches.push(LayerCache::Flatten { shape });
                    cur = cur
                        .into_shape(vec![b, rest])
                        .expect("flatten needs standard layout");
                }
            }
        }
        NetPass {
            output: cur,
            caches,
            stat_updates,
        }
    }

    /// Forward pass without caches. `mode` must not be `Train`
    /// (running statistics would silently be lost).
    pub fn forward<R: Real>(
        &self,
        store: &ParameterStore<R>,
        input: ArrayD<R>,
        mode: Mode,
    ) -> ArrayD<R> {
        debug_assert!(mode != Mode::Train, "use forward_cached + commit_stats");
        self.forward_cached(store, input, mode).output
    }

    /// Backward pass matching `pass`. Accumulates parameter gradients into
    /// `grads` when given; always returns the input gradient.
    pub fn backward<R: Real>(
        &self,
        store: &ParameterStore<R>,
        pass: &NetPass<R>,
        dy: ArrayD<R>,
        mut grads: Option<&mut GradStore<R>>,
    ) -> ArrayD<R> {
        let mut cur = dy;
        for ((lname, spec), cache) in self.layers.iter().zip(pass.caches.iter()).rev() {
            match (spec, cache) {
                (
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    LayerCache::Conv { x },
                ) => {
                    let g = ConvGeom {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let w = store.get(&self.key(lname, "w"));
                    let dy4 = cur.into_dimensionality::<Ix4>().unwrap();
                    let out = conv2d_backward(
                        x,
                        &w.view().into_dimensionality::<Ix4>().unwrap(),
                        g,
                        &dy4,
                        grads.is_some(),
                    );
                    if let Some(gs) = grads.as_deref_mut() {
                        gs.accumulate(&self.key(lname, "w"), out.dw.unwrap().into_dyn());
                        gs.accumulate(&self.key(lname, "b"), out.db.unwrap().into_dyn());
                    }
                    cur = out.dx.into_dyn();
                }
                (
                    LayerSpec::ConvT {
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    LayerCache::ConvT { x },
                ) => {
                    let g = ConvGeom {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let w = store.get(&self.key(lname, "w"));
                    let dy4 = cur.into_dimensionality::<Ix4>().unwrap();
                    let out = convt2d_backward(
                        x,
                        &w.view().into_dimensionality::<Ix4>().unwrap(),
                        g,
                        &dy4,
                        grads.is_some(),
                    );
                    if let Some(gs) = grads.as_deref_mut() {
                        gs.accumulate(&self.key(lname, "w"), out.dw.unwrap().into_dyn());
                        gs.accumulate(&self.key(lname, "b"), out.db.unwrap().into_dyn());
                    }
                    cur = out.dx.into_dyn();
                }
                (LayerSpec::Dense { .. }, LayerCache::Dense { x }) => {
                    let w = store.get(&self.key(lname, "w"));
                    let dy2 = cur.into_dimensionality::<Ix2>().unwrap();
                    let out = dense_backward(
                        x,
                        &w.view().into_dimensionality::<Ix2>().unwrap(),
                        &dy2,
                        grads.is_some(),
                    );
                    if let Some(gs) = grads.as_deref_mut() {
                        gs.accumulate(&self.key(lname, "w"), out.dw.unwrap().into_dyn());
                        gs.accumulate(&self.key(lname, "b"), out.db.unwrap().into_dyn());
                    }
                    cur = out.dx.into_dyn();
                }
                (LayerSpec::BatchNorm { .. }, LayerCache::Bn(bc)) => {
                    let gamma = store.get(&self.key(lname, "gamma"));
                    let out = bn_backward(
                        bc,
                        gamma.view().into_dimensionality().unwrap(),
                        &cur,
                        grads.is_some(),
                    );
                    if let Some(gs) = grads.as_deref_mut() {
                        gs.accumulate(&self.key(lname, "gamma"), out.dgamma.unwrap().into_dyn());
                        gs.accumulate(&self.key(lname, "beta"), out.dbeta.unwrap().into_dyn());
                    }
                    cur = out.dx;
                }
                (LayerSpec::LeakyRelu { slope }, LayerCache::LeakyRelu { x }) => {
                    let s = R::from_f64(*slope);
                    let mut dx = cur;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                        if xv <= R::zero() {
                            *d = *d * s;
                        }
                    });
                    cur = dx;
                }
                (LayerSpec::Relu, LayerCache::Relu { x }) => {
                    let mut dx = cur;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                        if xv <= R::zero() {
                            *d = R::zero();
                        }
                    });
                    cur = dx;
                }
                (LayerSpec::Tanh, LayerCache::Tanh { y }) => {
                    let mut dx = cur;
                    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                        *d = *d * (R::one() - yv * yv);
                    });
                    cur = dx;
                }
                (LayerSpec::Sigmoid, LayerCache::Sigmoid { y }) => {
                    let mut dx = cur;
                    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                        *d = *d * yv * (R::one() - yv);
                    });
                    cur = dx;
                }
                (LayerSpec::Flatten, LayerCache::Flatten { shape }) => {
                    cur = cur.into_shape(shape.clone()).expect("unflatten");
                }
                _ => unreachable!("cache/layer mismatch"),
            }
        }
        cur
    }

    /// Names of every parameter this net owns, including running statistics.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (lname, spec) in &self.layers {
            match spec {
                LayerSpec::Conv { .. } | LayerSpec::ConvT { .. } | LayerSpec::Dense { .. } => {
                    names.push(self.key(lname, "w"));
                    names.push(self.key(lname, "b"));
                }
                LayerSpec::BatchNorm { .. } => {
                    names.push(self.key(lname, "gamma"));
                    names.push(self.key(lname, "beta"));
                    names.push(self.key(lname, "running_mean"));
                    names.push(self.key(lname, "running_var"));
                }
                _ => {}
            }
        }
        names
    }

    /// The `"{net}/"` prefix under which all parameters of this net live.
    pub fn prefix(&self) -> String {
        format!("{}/", self.name)
    }
}

/// Mean over all elements, used for validation reconstruction error.
pub fn mean_all<R: Real>(x: &ArrayD<R>) -> R {
    x.sum() / R::from_f64(x.len() as f64)
}

/// Sum over the batch axis for a `(b,)`-shaped view of logits.
pub fn squeeze_logits<R: Real>(y: ArrayD<R>) -> Array1<R> {
    let y2 = y.into_dimensionality::<Ix2>().expect("logit rank");
    debug_assert_eq!(y2.len_of(Axis(1)), 1, "expected single-logit head");
    y2.index_axis(Axis(1), 0).to_owned()
}
