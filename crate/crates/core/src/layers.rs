//! Parameter bundles and the forward-pass context shared by the block and
//! network builders.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::param::{ParamGroup, ParamId, ParamKind, ParamStore, StatsId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything one forward pass threads through the layers.
pub struct Pass<'a, T, R: ?Sized> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Pass<'a, T, R> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode, rng: &'a mut R) -> Self {
        Self { graph, store, mode, rng }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.mode, self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBn {
    pub gamma: Var,
    pub beta: Var,
    pub stats: StatsId,
}

impl BnParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, group: ParamGroup) -> Result<Self> {
        let gamma = store.register(format!("{prefix}/gamma"), ParamKind::BnGamma, group, Tensor::full(&[channels], T::one()))?;
        let beta = store.register(format!("{prefix}/beta"), ParamKind::BnBeta, group, Tensor::zeros(&[channels]))?;
        let stats = store.register_stats(prefix, channels);
        Ok(Self { gamma, beta, stats })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundBn {
        BoundBn { gamma: g.param(store, self.gamma), beta: g.param(store, self.beta), stats: self.stats }
    }
}

impl BoundBn {
    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, x: Var) -> Result<Var> {
        let running = pass.store.stats(self.stats);
        pass.graph.batch_norm(x, self.gamma, self.beta, self.stats, running, pass.mode)
    }

    /// BN followed by ReLU: the front half of every pre-activation unit.
    pub fn forward_relu<T: Scalar, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, x: Var) -> Result<Var> {
        let y = self.forward(pass, x)?;
        Ok(pass.graph.relu(y))
    }
}

/// Dense layer; the weight is laid out `in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Result<Self> {
        let weight = store.register(format!("{prefix}/weight"), ParamKind::DenseWeight, group, Tensor::zeros(&[fan_in, fan_out]))?;
        let bias = store.register(format!("{prefix}/bias"), ParamKind::DenseBias, group, Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        pass.graph.dense(x, w, b)
    }
}

pub fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: impl Into<alloc::string::String>,
    shape: [usize; 4],
    group: ParamGroup,
) -> Result<ParamId> {
    store.register(name, ParamKind::ConvKernel, group, Tensor::zeros(&shape))
}

/// Ids of parameters registered after `mark`, for initializing a freshly
/// added component.
pub fn registered_since<T: Scalar>(store: &ParamStore<T>, mark: usize) -> Vec<ParamId> {
    store.iter().skip(mark).map(|(id, _)| id).collect()
}
