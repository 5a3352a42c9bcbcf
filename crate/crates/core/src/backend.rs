//! Execution backends for network definitions.
//!
//! A network is written once against [`Backend`]. Running it through
//! [`ShapeBackend`] declares the parameters and checks every shape without
//! arithmetic, [`EagerBackend`] runs inference, and [`TapeBackend`] records
//! a differentiable graph for training.

use std::sync::Arc;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamKind, ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub trait Backend {
    type T: Clone;

    fn shape_of(&self, x: &Self::T) -> Vec<usize>;

    /// Declares (shape backend) or fetches (others) a named parameter.
    fn param(&mut self, spec: ParamSpec) -> Result<Self::T>;

    /// A constant zero tensor that is not a parameter.
    fn zeros(&mut self, shape: &[usize]) -> Self::T;

    fn conv(&mut self, x: &Self::T, w: &Self::T, b: &Self::T, geom: ConvGeom) -> Result<Self::T>;
    fn deconv(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn max_pool(&mut self, x: &Self::T, window: usize) -> Result<Self::T>;
    fn upsample(&mut self, x: &Self::T, factor: usize) -> Result<Self::T>;
    /// Per-channel normalization with parameters and running statistics
    /// stored under `prefix`.
    fn batch_norm(&mut self, x: &Self::T, prefix: &str) -> Result<Self::T>;
    fn relu(&mut self, x: &Self::T) -> Result<Self::T>;
    fn sigmoid(&mut self, x: &Self::T) -> Result<Self::T>;
    fn softmax(&mut self, x: &Self::T) -> Result<Self::T>;
    fn concat(&mut self, xs: &[Self::T]) -> Result<Self::T>;

    /// Observes a named intermediate output.
    fn record(&mut self, _tag: &str, _x: &Self::T) {}
}

fn bn_specs(prefix: &str, c: usize) -> [ParamSpec; 4] {
    let mk = |suffix: &str, kind| ParamSpec { name: format!("{prefix}.{suffix}"), shape: vec![c], kind, fan_in: 0 };
    [
        mk("gamma", ParamKind::BnGamma),
        mk("beta", ParamKind::BnBeta),
        mk("running_mean", ParamKind::RunningMean),
        mk("running_var", ParamKind::RunningVar),
    ]
}

/// Shape-only execution that collects parameter declarations and tagged
/// intermediate shapes.
#[derive(Default)]
pub struct ShapeBackend {
    pub specs: Vec<ParamSpec>,
    pub records: Vec<(String, Vec<usize>)>,
}

impl ShapeBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recorded(&self, tag: &str) -> Option<&[usize]> {
        self.records.iter().find(|(t, _)| t == tag).map(|(_, s)| s.as_slice())
    }

    fn declare(&mut self, spec: ParamSpec) -> Result<Vec<usize>> {
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(Error::Contract(format!("parameter `{}` declared twice", spec.name)));
        }
        let shape = spec.shape.clone();
        self.specs.push(spec);
        Ok(shape)
    }
}

impl Backend for ShapeBackend {
    type T = Vec<usize>;

    fn shape_of(&self, x: &Vec<usize>) -> Vec<usize> {
        x.clone()
    }

    fn param(&mut self, spec: ParamSpec) -> Result<Vec<usize>> {
        self.declare(spec)
    }

    fn zeros(&mut self, shape: &[usize]) -> Vec<usize> {
        shape.to_vec()
    }

    fn conv(&mut self, x: &Vec<usize>, w: &Vec<usize>, b: &Vec<usize>, geom: ConvGeom) -> Result<Vec<usize>> {
        if b != &[w[0]] {
            return Err(Error::Shape(format!("conv bias {b:?} does not match weight {w:?}")));
        }
        kernels::conv_shape(x, w, geom)
    }

    fn deconv(&mut self, x: &Vec<usize>, w: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if b != &[w[1]] {
            return Err(Error::Shape(format!("deconv bias {b:?} does not match weight {w:?}")));
        }
        kernels::deconv_shape(x, w)
    }

    fn max_pool(&mut self, x: &Vec<usize>, window: usize) -> Result<Vec<usize>> {
        kernels::pool_shape(x, window)
    }

    fn upsample(&mut self, x: &Vec<usize>, factor: usize) -> Result<Vec<usize>> {
        kernels::upsample_shape(x, factor)
    }

    fn batch_norm(&mut self, x: &Vec<usize>, prefix: &str) -> Result<Vec<usize>> {
        for s in bn_specs(prefix, x[1]) {
            self.declare(s)?;
        }
        Ok(x.clone())
    }

    fn relu(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn sigmoid(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn softmax(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn concat(&mut self, xs: &[Vec<usize>]) -> Result<Vec<usize>> {
        let shapes: Vec<&[usize]> = xs.iter().map(|s| s.as_slice()).collect();
        kernels::concat_shape(&shapes)
    }

    fn record(&mut self, tag: &str, x: &Vec<usize>) {
        self.records.push((tag.to_string(), x.clone()));
    }
}

fn fetch<S: Scalar>(store: &ParamStore<S>, spec: &ParamSpec) -> Result<Arc<Tensor<S>>> {
    let t = store.get(&spec.name)?;
    if t.shape() != spec.shape.as_slice() {
        return Err(Error::Shape(format!(
            "parameter `{}` has shape {:?}, architecture expects {:?}",
            spec.name,
            t.shape(),
            spec.shape
        )));
    }
    Ok(t.clone())
}

/// Inference with running normalization statistics.
pub struct EagerBackend<'s, S: Scalar = f32> {
    store: &'s ParamStore<S>,
    /// Intermediate outputs captured by [`Backend::record`] when enabled.
    pub captured: Option<Vec<(String, Arc<Tensor<S>>)>>,
}

impl<'s, S: Scalar> EagerBackend<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        EagerBackend { store, captured: None }
    }

    pub fn capturing(store: &'s ParamStore<S>) -> Self {
        EagerBackend { store, captured: Some(Vec::new()) }
    }
}

impl<S: Scalar> Backend for EagerBackend<'_, S> {
    type T = Arc<Tensor<S>>;

    fn shape_of(&self, x: &Self::T) -> Vec<usize> {
        x.shape().to_vec()
    }

    fn param(&mut self, spec: ParamSpec) -> Result<Self::T> {
        fetch(self.store, &spec)
    }

    fn zeros(&mut self, shape: &[usize]) -> Self::T {
        Arc::new(Tensor::zeros(shape))
    }

    fn conv(&mut self, x: &Self::T, w: &Self::T, b: &Self::T, geom: ConvGeom) -> Result<Self::T> {
        kernels::conv_forward(x, w, b, geom).map(Arc::new)
    }

    fn deconv(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Result<Self::T> {
        kernels::deconv_forward(x, w, b).map(Arc::new)
    }

    fn max_pool(&mut self, x: &Self::T, window: usize) -> Result<Self::T> {
        if window == 1 {
            return Ok(x.clone());
        }
        kernels::max_pool_forward(x, window).map(|(y, _)| Arc::new(y))
    }

    fn upsample(&mut self, x: &Self::T, factor: usize) -> Result<Self::T> {
        if factor == 1 {
            return Ok(x.clone());
        }
        kernels::upsample_forward(x, factor).map(Arc::new)
    }

    fn batch_norm(&mut self, x: &Self::T, prefix: &str) -> Result<Self::T> {
        let [g, b, m, v] = bn_specs(prefix, x.channels()).map(|s| fetch(self.store, &s));
        let (g, b, m, v) = (g?, b?, m?, v?);
        kernels::batch_norm_eval(x, &g, &b, &m, &v).map(|(y, _)| Arc::new(y))
    }

    fn relu(&mut self, x: &Self::T) -> Result<Self::T> {
        Ok(Arc::new(kernels::relu(x)))
    }

    fn sigmoid(&mut self, x: &Self::T) -> Result<Self::T> {
        Ok(Arc::new(kernels::sigmoid(x)))
    }

    fn softmax(&mut self, x: &Self::T) -> Result<Self::T> {
        Ok(Arc::new(kernels::softmax_channels(x)))
    }

    fn concat(&mut self, xs: &[Self::T]) -> Result<Self::T> {
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        let refs: Vec<&Tensor<S>> = xs.iter().map(|t| t.as_ref()).collect();
        kernels::concat_forward(&refs).map(Arc::new)
    }

    fn record(&mut self, tag: &str, x: &Self::T) {
        if let Some(c) = &mut self.captured {
            c.push((tag.to_string(), x.clone()));
        }
    }
}

/// A parameter store attached to a [`TapeBackend`].
pub struct Binding<'s, S: Scalar> {
    pub store: &'s mut ParamStore<S>,
    /// Normalize with batch statistics and update running estimates.
    pub train: bool,
    /// Collect gradients for this store's parameters.
    pub trainable: bool,
}

/// Records a differentiable graph over one or more parameter stores.
pub struct TapeBackend<'s, S: Scalar = f32> {
    pub graph: Graph<S>,
    bindings: Vec<Binding<'s, S>>,
    active: usize,
    momentum: f64,
}

impl<'s, S: Scalar> TapeBackend<'s, S> {
    pub fn new(bindings: Vec<Binding<'s, S>>) -> Self {
        TapeBackend { graph: Graph::new(), bindings, active: 0, momentum: 0.1 }
    }

    /// Selects the store that subsequent parameter lookups read from.
    pub fn set_active(&mut self, slot: usize) {
        assert!(slot < self.bindings.len(), "no parameter store bound at slot {slot}");
        self.active = slot;
    }

    fn leaf(&mut self, spec: &ParamSpec) -> Result<NodeId> {
        let b = &self.bindings[self.active];
        let t = fetch(b.store, spec)?;
        let trainable = b.trainable && !spec.kind.is_buffer();
        Ok(self.graph.param(self.active, &spec.name, t, trainable))
    }
}

impl<S: Scalar> Backend for TapeBackend<'_, S> {
    type T = NodeId;

    fn shape_of(&self, x: &NodeId) -> Vec<usize> {
        self.graph.value(*x).shape().to_vec()
    }

    fn param(&mut self, spec: ParamSpec) -> Result<NodeId> {
        self.leaf(&spec)
    }

    fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.graph.input(Tensor::zeros(shape))
    }

    fn conv(&mut self, x: &NodeId, w: &NodeId, b: &NodeId, geom: ConvGeom) -> Result<NodeId> {
        self.graph.conv(*x, *w, *b, geom)
    }

    fn deconv(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.deconv(*x, *w, *b)
    }

    fn max_pool(&mut self, x: &NodeId, window: usize) -> Result<NodeId> {
        self.graph.max_pool(*x, window)
    }

    fn upsample(&mut self, x: &NodeId, factor: usize) -> Result<NodeId> {
        self.graph.upsample(*x, factor)
    }

    fn batch_norm(&mut self, x: &NodeId, prefix: &str) -> Result<NodeId> {
        let c = self.graph.value(*x).channels();
        let [gs, bs, ms, vs] = bn_specs(prefix, c);
        let g = self.leaf(&gs)?;
        let b = self.leaf(&bs)?;
        if self.bindings[self.active].train {
            let (y, mean, var) = self.graph.batch_norm_train(*x, g, b)?;
            let m = S::from_f64(self.momentum);
            let store = &mut *self.bindings[self.active].store;
            for (name, batch) in [(&ms.name, &mean), (&vs.name, &var)] {
                let run = store.get_mut(name)?;
                for (r, &v) in run.data_mut().iter_mut().zip(batch) {
                    *r = (S::one() - m) * *r + m * v;
                }
            }
            Ok(y)
        } else {
            let store = &*self.bindings[self.active].store;
            let rm = fetch(store, &ms)?;
            let rv = fetch(store, &vs)?;
            self.graph.batch_norm_eval(*x, g, b, &rm, rv)
        }
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        Ok(self.graph.relu(*x))
    }

    fn sigmoid(&mut self, x: &NodeId) -> Result<NodeId> {
        Ok(self.graph.sigmoid(*x))
    }

    fn softmax(&mut self, x: &NodeId) -> Result<NodeId> {
        Ok(self.graph.softmax(*x))
    }

    fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.graph.concat(xs)
    }
}
