//! Named parameter registry and batch-norm running statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Gradients, MomentUpdate};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Comma-joined names, cut after the first few.
fn name_list(names: &[&str]) -> String {
    const SHOWN: usize = 8;
    let mut out = names.iter().take(SHOWN).copied().collect::<Vec<_>>().join(",");
    if names.len() > SHOWN {
        out.push_str(&format!(",... {} more", names.len() - SHOWN));
    }
    out
}

/// Running-statistic momentum: `new = 0.9 * old + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub(crate) usize);

/// What a parameter is, which decides its initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
}

/// Accounting bucket used by the analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Stem,
    BlockConv(usize),
    BlockBn(usize),
    Transition(usize),
    Attention(usize),
    Compression(usize),
    Classifier,
    Other,
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Per-channel running mean and variance of one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<RunningStats<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), stats: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        group: ParamGroup,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, group, value, grad: None });
        Ok(id)
    }

    pub fn register_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats::new(name, channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets every gradient to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter leaf in `grads`. A parameter
    /// bound more than once receives the sum over its leaves.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_leaf_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += d;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Folds batch moments recorded during a train-mode pass into the
    /// running statistics.
    pub fn apply_moments(&mut self, updates: &[MomentUpdate<T>]) {
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        for u in updates {
            let s = &mut self.stats[u.stats.0];
            for (r, &b) in s.mean.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in s.var.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + take * b;
            }
        }
    }

    /// Converts every tensor to another scalar type, preserving names and ids.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats { name: s.name.clone(), mean: s.mean.cast(), var: s.var.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// All named tensors: parameters, then running means and variances.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> =
            self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        for s in &self.stats {
            out.push((format!("{}/running_mean", s.name), &s.mean));
            out.push((format!("{}/running_var", s.name), &s.var));
        }
        out
    }

    /// Replaces tensor values from a name table. Names and shapes must
    /// match the registered set exactly.
    pub fn load_named(&mut self, table: &[(String, Tensor<T>)]) -> Result<()> {
        let expected: BTreeMap<String, Vec<usize>> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let given: BTreeMap<&str, &Tensor<T>> = table.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let missing: Vec<&str> =
            expected.keys().map(String::as_str).filter(|n| !given.contains_key(n)).collect();
        let extra: Vec<&str> = given.keys().copied().filter(|n| !expected.contains_key(*n)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Incompatible { missing: name_list(&missing), extra: name_list(&extra) });
        }
        for (name, shape) in &expected {
            if given[name.as_str()].shape() != shape.as_slice() {
                return Err(Error::Incompatible {
                    missing: format!("{name}{shape:?}"),
                    extra: format!("{name}{:?}", given[name.as_str()].shape()),
                });
            }
        }
        for p in &mut self.params {
            p.value = given[p.name.as_str()].clone();
        }
        for s in &mut self.stats {
            s.mean = given[format!("{}/running_mean", s.name).as_str()].clone();
            s.var = given[format!("{}/running_var", s.name).as_str()].clone();
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.to_string()).collect()
    }
}
