//! Parameter and FLOP accounting, weight-dependency heatmaps and stage-wise
//! feature-map dumps.
//!
//! FLOPs are `2 x` multiply-accumulates of conv and dense layers; batch
//! norm, pooling and activations are free. Parameter counts include batch
//! norm affine terms and the classifier bias but not running statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::clique::{bottom_schedule, CliqueBlockSpec};
use crate::error::{Error, Result};
use crate::network::{spatial_schedule, Model, Stem, STEM_CHANNELS};
use crate::param::ParamGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn group_label(group: ParamGroup) -> String {
    match group {
        ParamGroup::Stem => "stem".into(),
        ParamGroup::BlockConv(b) => format!("block{b}/conv"),
        ParamGroup::BlockBn(b) => format!("block{b}/bn"),
        ParamGroup::Transition(b) => format!("transition{b}"),
        ParamGroup::Attention(b) => format!("attention{b}"),
        ParamGroup::Compression(b) => format!("compression{b}"),
        ParamGroup::Classifier => "classifier".into(),
        ParamGroup::Other => "other".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountReport {
    pub total_params: usize,
    /// Scalar count per group, in group order.
    pub groups: Vec<(ParamGroup, usize)>,
    pub total_flops: u64,
    pub layers: Vec<LayerFlops>,
    /// Input resolution behind the FLOP figures; `None` for a params-only report.
    pub resolution: Option<(usize, usize)>,
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> CountReport {
    let mut groups: Vec<(ParamGroup, usize)> = Vec::new();
    for (_, p) in model.params.iter() {
        let n = p.value.numel();
        match groups.iter_mut().find(|(g, _)| *g == p.group) {
            Some((_, c)) => *c += n,
            None => groups.push((p.group, n)),
        }
    }
    groups.sort_by_key(|(g, _)| *g);
    CountReport {
        total_params: groups.iter().map(|(_, c)| c).sum(),
        groups,
        total_flops: 0,
        layers: Vec::new(),
        resolution: None,
    }
}

fn conv_flops(c_in: usize, c_out: usize, ksize: usize, h: usize, w: usize) -> u64 {
    2 * (c_in * c_out * ksize * ksize * h * w) as u64
}

fn block_layer_flops(b: usize, spec: &CliqueBlockSpec, stages: usize, h: usize, w: usize, out: &mut Vec<LayerFlops>) {
    let k = spec.k_filters;
    let ksize = if spec.bottleneck { 1 } else { 3 };
    for stage in 1..=stages {
        for target in 1..=spec.n_layers {
            let width: usize = bottom_schedule(spec.n_layers, stage, target)
                .iter()
                .map(|s| spec.layer_channels(s.layer))
                .sum();
            out.push(LayerFlops { name: format!("block{b}/s{stage}_t{target}"), flops: conv_flops(width, k, ksize, h, w) });
            if spec.bottleneck {
                out.push(LayerFlops { name: format!("block{b}/s{stage}_t{target}/mid"), flops: conv_flops(k, k, 3, h, w) });
            }
        }
    }
}

/// Static FLOP count of one forward pass of a single `h x w` image, plus the
/// parameter breakdown.
pub fn count_flops<T: Scalar>(model: &Model<T>, hw: (usize, usize)) -> Result<CountReport> {
    let cfg = &model.config;
    let (h, w) = hw;
    let sizes = spatial_schedule(cfg, h, w)?;
    let mut layers = Vec::new();
    let stem = match cfg.stem {
        Stem::Cifar => conv_flops(cfg.input_channels, STEM_CHANNELS, 3, h, w),
        Stem::Imagenet => conv_flops(cfg.input_channels, STEM_CHANNELS, 7, h / 2, w / 2),
    };
    layers.push(LayerFlops { name: "stem/conv".into(), flops: stem });
    let stages = cfg.variant.stages_needed();
    let mut feature_width = 0;
    for (idx, ws) in model.blocks.iter().enumerate() {
        let b = idx + 1;
        let spec = ws.spec();
        let (bh, bw) = sizes[idx];
        block_layer_flops(b, spec, stages, bh, bw, &mut layers);
        let c = spec.block_channels();
        if cfg.compression {
            layers.push(LayerFlops { name: format!("compression{b}/conv"), flops: conv_flops(c, c / 2, 1, bh, bw) });
            feature_width += c / 2;
        } else {
            feature_width += c;
        }
        if let Some(tp) = model.transitions.get(idx) {
            let t = spec.transit_channels();
            layers.push(LayerFlops { name: format!("transition{b}/conv"), flops: conv_flops(t, t, 1, bh, bw) });
            if tp.attention.is_some() {
                let hidden = (t / 2).max(1);
                layers.push(LayerFlops { name: format!("transition{b}/att"), flops: 2 * (2 * t * hidden) as u64 });
            }
        }
    }
    layers.push(LayerFlops { name: "head".into(), flops: 2 * (feature_width * cfg.num_classes) as u64 });
    let params = count_params(model);
    Ok(CountReport {
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
        resolution: Some(hw),
        ..params
    })
}

/// FLOPs measured by running a forward pass and reading the recorded conv
/// and dense nodes. Slow; meant for cross-checking the static count.
pub fn traced_flops<T: Scalar>(model: &Model<T>, hw: (usize, usize)) -> Result<u64> {
    let mut g = Graph::new();
    let images = Tensor::zeros(&[1, model.config.input_channels, hw.0, hw.1]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.logits(&mut g, images, Mode::Eval, &mut rng)?;
    Ok(2 * g.multiply_accumulates())
}

fn check_block<T>(model: &Model<T>, block: usize) -> Result<()> {
    if block == 0 || block > model.blocks.len() {
        return Err(Error::Usage(format!("block {block} out of range 1..={}", model.blocks.len())));
    }
    Ok(())
}

/// `(n+1) x (n+1)` matrix of mean `|W_ij|` for block `block` (1-based).
/// Pairs without a kernel (the diagonal and column 0) read 0.
pub fn weight_heatmap<T: Scalar>(model: &Model<T>, block: usize) -> Result<Vec<Vec<f64>>> {
    check_block(model, block)?;
    let ws = &model.blocks[block - 1];
    let n = ws.spec().n_layers;
    let mut m = vec![vec![0.0; n + 1]; n + 1];
    for (i, j, id) in ws.kernel_entries() {
        m[i][j] = model.params.value(id).mean_abs().as_f64();
    }
    Ok(m)
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Scales by the largest entry; an all-zero matrix stays black.
pub fn heatmap_image(matrix: &[Vec<f64>]) -> GrayImage {
    let max = matrix.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let pixels = matrix
        .iter()
        .flatten()
        .map(|&v| if max > 0.0 { to_u8(255.0 * v / max) } else { 0 })
        .collect();
    GrayImage { width: matrix.first().map_or(0, Vec::len), height: matrix.len(), pixels }
}

fn to_u8(v: f64) -> u8 {
    num_traits::Float::round(v).clamp(0.0, 255.0) as u8
}

/// Min-max normalization to `[0, 255]`; a flat map becomes all zeros.
pub fn normalize_map(values: &[f64], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| if span > 0.0 { to_u8(255.0 * (v - lo) / span) } else { 0 })
        .collect();
    GrayImage { width, height, pixels }
}

#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub stage: usize,
    /// Index among the stage's `n * k` maps.
    pub channel: usize,
    pub mean: f64,
    pub image: GrayImage,
}

/// Index and value of the largest entry; ties go to the first.
pub fn argmax(values: &[f64]) -> Option<(usize, f64)> {
    values.iter().copied().enumerate().fold(None, |best, (i, v)| match best {
        Some((_, b)) if b >= v => best,
        _ => Some((i, v)),
    })
}

fn dump_stage<T: Scalar>(g: &mut Graph<T>, layers: &[Var], stage: usize) -> Result<FeatureDump> {
    let cat = g.concat_channels(layers)?;
    let t = g.value(cat);
    let (_, c, h, w) = t.dims4("feature_dump")?;
    let means: Vec<f64> = (0..c)
        .map(|ch| t.plane(0, ch).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect();
    let (channel, mean) = argmax(&means).ok_or_else(|| Error::Usage("stage has no feature maps".into()))?;
    let values: Vec<f64> = t.plane(0, channel).iter().map(|v| v.as_f64()).collect();
    Ok(FeatureDump { stage, channel, mean, image: normalize_map(&values, w, h) })
}

/// Runs one image (`C x H x W` or `1 x C x H x W`) in eval mode and returns
/// the most active Stage-I and Stage-II maps of block `block` (1-based).
pub fn feature_dump<T: Scalar>(model: &Model<T>, image: &Tensor<T>, block: usize) -> Result<[FeatureDump; 2]> {
    check_block(model, block)?;
    let image = match image.rank() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::Input(format!("feature_dump takes a single image, got shape {:?}", image.shape())));
        }
    };
    if model.config.variant.stages_needed() < 2 {
        return Err(Error::Usage(format!("variant {} never computes Stage II", model.config.variant.label())));
    }
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = g.input(image);
    let trace = model.forward(&mut g, x, Mode::Eval, &mut rng)?;
    let out = &trace.blocks[block - 1];
    let (s1, s2) = (out.stage1.clone(), out.stage2.clone());
    Ok([dump_stage(&mut g, &s1, 1)?, dump_stage(&mut g, &s2, 2)?])
}
