//! The clique block: Stage-I initialization and Stage-II alternate updates
//! over one shared set of inter-layer kernels.
//!
//! Layers are numbered `1..=n`; layer 0 is the block input `X0`. The kernel
//! `W_ij` maps layer `i` into layer `j`. Stage I builds each `X_j` from `X0`
//! and the Stage-I layers below it. Stage II rebuilds each `X_i` from the
//! freshest version of every other layer: Stage-I survivors above `i`, then
//! Stage-II updates below `i`, reusing the very same `W_ij`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{register_conv, registered_since, BnParams, BoundBn, Pass};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::train::init::init_ids;

/// Number of propagation stages run per block.
pub const STAGES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CliqueBlockSpec {
    pub n_layers: usize,
    pub k_filters: usize,
    pub in_channels: usize,
    pub bottleneck: bool,
    pub dropout_rate: f64,
}

impl CliqueBlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        if self.n_layers < 2 {
            return bad("n_layers", "a clique block needs at least 2 layers");
        }
        if self.k_filters == 0 {
            return bad("k_filters", "must be at least 1");
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// Channels of the block feature: `X0` plus one group per layer.
    pub fn block_channels(&self) -> usize {
        self.in_channels + self.n_layers * self.k_filters
    }

    pub fn transit_channels(&self) -> usize {
        self.n_layers * self.k_filters
    }

    /// Channels of layer `i`'s output (`X0` for `i == 0`).
    pub fn layer_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.k_filters
        }
    }

    /// Channel width of the bottom feeding `target` at `stage`.
    pub fn bottom_channels(&self, stage: usize, target: usize) -> usize {
        bottom_schedule(self.n_layers, stage, target)
            .iter()
            .map(|s| self.layer_channels(s.layer))
            .sum()
    }
}

/// Which stage's layers form the block feature and the transit feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "I+I")]
    StageOneOnly,
    #[serde(rename = "I+II")]
    StageOneFeature,
    #[default]
    #[serde(rename = "II+II")]
    StageTwo,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::StageOneOnly => "I+I",
            Variant::StageOneFeature => "I+II",
            Variant::StageTwo => "II+II",
        }
    }

    /// Stage whose layers join `X0` in the block feature.
    pub fn feature_stage(self) -> usize {
        match self {
            Variant::StageTwo => 2,
            _ => 1,
        }
    }

    pub fn transit_stage(self) -> usize {
        match self {
            Variant::StageOneOnly => 1,
            _ => 2,
        }
    }

    pub fn stages_needed(self) -> usize {
        self.feature_stage().max(self.transit_stage())
    }
}

/// One entry of a bottom: layer `layer` as produced in `stage`
/// (`X0` is layer 0, stage 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source {
    pub layer: usize,
    pub stage: usize,
}

/// Bottom layers feeding `target` in `stage`, in concatenation order.
///
/// Stage 1: `X0, X_1, ..., X_{target-1}`. Stage `s >= 2`: the stage `s-1`
/// layers above the target, then the stage `s` layers below it.
pub fn bottom_schedule(n: usize, stage: usize, target: usize) -> Vec<Source> {
    assert!(stage >= 1 && (1..=n).contains(&target), "stage {stage} target {target} out of range for n={n}");
    if stage == 1 {
        core::iter::once(Source { layer: 0, stage: 0 })
            .chain((1..target).map(|l| Source { layer: l, stage: 1 }))
            .collect()
    } else {
        ((target + 1)..=n)
            .map(|m| Source { layer: m, stage: stage - 1 })
            .chain((1..target).map(|l| Source { layer: l, stage }))
            .collect()
    }
}

/// Kernel ids of one block plus its per-(stage, target) batch norms.
#[derive(Debug, Clone)]
pub struct WeightStore {
    spec: CliqueBlockSpec,
    /// `(n+1) x (n+1)` table indexed `[i * (n+1) + j]`; `None` on the diagonal
    /// and for `j == 0`.
    kernels: Vec<Option<ParamId>>,
    /// Bottleneck 3x3 kernels, one per target layer.
    mid_kernels: Vec<ParamId>,
    /// `[stage - 1][target - 1]`.
    bn: Vec<Vec<BnParams>>,
    bn_mid: Vec<Vec<BnParams>>,
}

impl WeightStore {
    pub fn spec(&self) -> &CliqueBlockSpec {
        &self.spec
    }

    pub fn kernel(&self, i: usize, j: usize) -> Option<ParamId> {
        let n = self.spec.n_layers;
        if i > n || j > n {
            return None;
        }
        self.kernels[i * (n + 1) + j]
    }

    /// Every `(i, j, id)` in row-major order.
    pub fn kernel_entries(&self) -> impl Iterator<Item = (usize, usize, ParamId)> + '_ {
        let w = self.spec.n_layers + 1;
        self.kernels.iter().enumerate().filter_map(move |(idx, k)| k.map(|id| (idx / w, idx % w, id)))
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.iter().flatten().count()
    }

    pub fn mid_kernels(&self) -> &[ParamId] {
        &self.mid_kernels
    }

    pub fn bn(&self, stage: usize, target: usize) -> &BnParams {
        &self.bn[stage - 1][target - 1]
    }

    pub fn bn_mid(&self, stage: usize, target: usize) -> Option<&BnParams> {
        self.bn_mid.get(stage - 1).map(|row| &row[target - 1])
    }

    /// Binds every parameter once; both stages see the same kernel leaves.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundWeights {
        let kernels: Vec<Option<Var>> = self.kernels.iter().map(|k| k.map(|id| g.param(store, id))).collect();
        let mid: Vec<Var> = self.mid_kernels.iter().map(|&id| g.param(store, id)).collect();
        let bind_rows = |g: &mut Graph<T>, rows: &[Vec<BnParams>]| -> Vec<Vec<BoundBn>> {
            rows.iter().map(|row| row.iter().map(|b| b.bind(g, store)).collect()).collect()
        };
        let bn = bind_rows(g, &self.bn);
        let bn_mid = bind_rows(g, &self.bn_mid);
        BoundWeights {
            n: self.spec.n_layers,
            kernels: vec![kernels; STAGES],
            mid: vec![mid; STAGES],
            bn,
            bn_mid,
        }
    }
}

/// Graph leaves for one block forward, indexed per stage so that a stage's
/// kernel uses can be cut from the gradient independently.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    n: usize,
    kernels: Vec<Vec<Option<Var>>>,
    mid: Vec<Vec<Var>>,
    bn: Vec<Vec<BoundBn>>,
    bn_mid: Vec<Vec<BoundBn>>,
}

impl BoundWeights {
    pub fn kernel(&self, stage: usize, i: usize, j: usize) -> Option<Var> {
        self.kernels[stage - 1][i * (self.n + 1) + j]
    }

    /// Replaces `stage`'s kernel uses with detached copies.
    pub fn detach_stage<T: Scalar>(&mut self, g: &mut Graph<T>, stage: usize) {
        for k in self.kernels[stage - 1].iter_mut().flatten() {
            *k = g.detach(*k);
        }
        for k in &mut self.mid[stage - 1] {
            *k = g.detach(*k);
        }
    }
}

/// Allocates the kernel set of one block: `n` input kernels `W_0j` and
/// `n(n-1)` inter-layer kernels `W_ij`, plus per-update batch norms.
/// New parameters are He-initialized from `rng`.
pub fn make_weight_store<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    block: usize,
    spec: &CliqueBlockSpec,
    rng: &mut R,
) -> Result<WeightStore> {
    spec.validate()?;
    let n = spec.n_layers;
    let k = spec.k_filters;
    let ksize = if spec.bottleneck { 1 } else { 3 };
    let mark = store.len();
    let mut kernels = vec![None; (n + 1) * (n + 1)];
    for i in 0..=n {
        for j in 1..=n {
            if i == j {
                continue;
            }
            let shape = [k, spec.layer_channels(i), ksize, ksize];
            kernels[i * (n + 1) + j] =
                Some(register_conv(store, format!("{prefix}/W_{i}_{j}"), shape, ParamGroup::BlockConv(block))?);
        }
    }
    let mut mid_kernels = Vec::new();
    if spec.bottleneck {
        for j in 1..=n {
            mid_kernels.push(register_conv(store, format!("{prefix}/W3_{j}"), [k, k, 3, 3], ParamGroup::BlockConv(block))?);
        }
    }
    let mut bn = Vec::with_capacity(STAGES);
    let mut bn_mid = Vec::new();
    for stage in 1..=STAGES {
        let mut row = Vec::with_capacity(n);
        let mut mid_row = Vec::new();
        for target in 1..=n {
            let width = spec.bottom_channels(stage, target);
            row.push(BnParams::register(store, &format!("{prefix}/bn_s{stage}_t{target}"), width, ParamGroup::BlockBn(block))?);
            if spec.bottleneck {
                mid_row.push(BnParams::register(
                    store,
                    &format!("{prefix}/bnmid_s{stage}_t{target}"),
                    k,
                    ParamGroup::BlockBn(block),
                )?);
            }
        }
        bn.push(row);
        if spec.bottleneck {
            bn_mid.push(mid_row);
        }
    }
    let fresh = registered_since(store, mark);
    init_ids(store, &fresh, rng);
    Ok(WeightStore { spec: *spec, kernels, mid_kernels, bn, bn_mid })
}

/// Bottleneck tail of a unit: BN, ReLU, 3x3 conv.
pub struct MidUnit<'b> {
    pub bn: &'b BoundBn,
    pub kernel: Var,
}

/// Pre-activation unit over a channel-concatenated bottom: BN, ReLU, then one
/// convolution with the source kernels concatenated along their input axis,
/// which equals summing the per-source convolutions. Dropout follows each
/// convolution.
pub fn conv_unit<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    bottom: &[Var],
    kernels: &[Var],
    bn: &BoundBn,
    mid: Option<MidUnit<'_>>,
    dropout_rate: f64,
) -> Result<Var> {
    if bottom.len() != kernels.len() {
        return Err(crate::error::dim_err(
            "conv_unit",
            format!("{} bottom sources but {} kernels", bottom.len(), kernels.len()),
        ));
    }
    let x = pass.graph.concat_channels(bottom)?;
    let w = pass.graph.concat_channels(kernels)?;
    let (xc, wc) = (pass.graph.shape(x)[1], pass.graph.shape(w)[1]);
    if xc != wc {
        return Err(crate::error::dim_err(
            "conv_unit",
            format!("bottom channel axis C={xc} != concatenated kernel input axis I={wc}"),
        ));
    }
    let pad = (pass.graph.shape(w)[2] - 1) / 2;
    let a = bn.forward_relu(pass, x)?;
    let y = pass.graph.conv2d(a, w, 1, pad)?;
    let mut y = pass.dropout(y, dropout_rate)?;
    if let Some(mid) = mid {
        let a = mid.bn.forward_relu(pass, y)?;
        let z = pass.graph.conv2d(a, mid.kernel, 1, 1)?;
        y = pass.dropout(z, dropout_rate)?;
    }
    Ok(y)
}

/// Runs one propagation stage. `prev` holds the previous stage's layers
/// (empty for stage 1).
pub fn stage_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    spec: &CliqueBlockSpec,
    weights: &BoundWeights,
    stage: usize,
    x0: Var,
    prev: &[Var],
) -> Result<Vec<Var>> {
    let n = spec.n_layers;
    if stage > 1 && prev.len() != n {
        return Err(Error::Usage(format!("stage {stage} needs {n} previous layers, got {}", prev.len())));
    }
    let mut current: Vec<Var> = Vec::with_capacity(n);
    for target in 1..=n {
        let sources = bottom_schedule(n, stage, target);
        let mut bottom = Vec::with_capacity(sources.len());
        let mut kernels = Vec::with_capacity(sources.len());
        for src in &sources {
            bottom.push(match src.stage {
                0 => x0,
                s if s == stage => current[src.layer - 1],
                _ => prev[src.layer - 1],
            });
            kernels.push(weights.kernel(stage, src.layer, target).expect("kernel exists for every scheduled pair"));
        }
        let bn = &weights.bn[stage - 1][target - 1];
        let mid = weights
            .bn_mid
            .get(stage - 1)
            .map(|row| MidUnit { bn: &row[target - 1], kernel: weights.mid[stage - 1][target - 1] });
        current.push(conv_unit(pass, &bottom, &kernels, bn, mid, spec.dropout_rate)?);
    }
    Ok(current)
}

pub fn stage1_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    spec: &CliqueBlockSpec,
    weights: &BoundWeights,
    x0: Var,
) -> Result<Vec<Var>> {
    let c = pass.graph.shape(x0).get(1).copied().unwrap_or(0);
    if c != spec.in_channels {
        return Err(crate::error::dim_err(
            "stage1_forward",
            format!("X0 channel axis C={c} != block in_channels {}", spec.in_channels),
        ));
    }
    stage_forward(pass, spec, weights, 1, x0, &[])
}

/// Stage II never reads `X0`.
pub fn stage2_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    spec: &CliqueBlockSpec,
    weights: &BoundWeights,
    stage1: &[Var],
) -> Result<Vec<Var>> {
    // x0 is unused; pass any var of the right graph
    let marker = stage1.first().copied().ok_or_else(|| Error::Usage("empty stage-1 list".into()))?;
    stage_forward(pass, spec, weights, 2, marker, stage1)
}

#[derive(Debug, Clone)]
pub struct BlockOutputs {
    pub x0: Var,
    pub stage1: Vec<Var>,
    /// Empty when the variant never reads Stage II.
    pub stage2: Vec<Var>,
    /// `X0` followed by the feature stage's layers.
    pub block_feature: Var,
    /// The transit stage's layers.
    pub transit_feature: Var,
}

pub fn block_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    spec: &CliqueBlockSpec,
    weights: &BoundWeights,
    x0: Var,
    variant: Variant,
) -> Result<BlockOutputs> {
    let stage1 = stage1_forward(pass, spec, weights, x0)?;
    let stage2 = if variant.stages_needed() >= 2 {
        stage2_forward(pass, spec, weights, &stage1)?
    } else {
        Vec::new()
    };
    let pick = |s: usize| if s == 1 { &stage1 } else { &stage2 };
    let mut feature = vec![x0];
    feature.extend_from_slice(pick(variant.feature_stage()));
    let block_feature = pass.graph.concat_channels(&feature)?;
    let transit_feature = pass.graph.concat_channels(pick(variant.transit_stage()))?;
    Ok(BlockOutputs { x0, stage1, stage2, block_feature, transit_feature })
}
