use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::config::{ModelConfig, Stem, STEM_CHANNELS};
use crate::autograd::{Graph, Mode, PoolMode, Var};
use crate::clique::{block_forward, make_weight_store, BlockOutputs, CliqueBlockSpec, Variant, WeightStore};
use crate::error::{dim_err, Error, Result};
use crate::layers::{register_conv, registered_since, BnParams, DenseParams, Pass};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::train::init::init_ids;

#[derive(Debug, Clone)]
pub struct StemParams {
    pub conv: ParamId,
    /// Present for the ImageNet stem only.
    pub bn: Option<BnParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `C -> max(C / 2, 1)`.
    pub fc1: DenseParams,
    pub fc2: DenseParams,
}

#[derive(Debug, Clone)]
pub struct TransitionParams {
    pub bn: BnParams,
    /// Channel-preserving 1x1 kernel.
    pub conv: ParamId,
    pub attention: Option<AttentionParams>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct CompressionParams {
    pub bn: BnParams,
    /// `C -> C / 2` 1x1 kernel.
    pub conv: ParamId,
}

/// A built network: parameter registry plus the plan to run it.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: StemParams,
    pub blocks: Vec<WeightStore>,
    pub transitions: Vec<TransitionParams>,
    pub compression: Vec<Option<CompressionParams>>,
    pub classifier: DenseParams,
}

/// Vars produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub blocks: Vec<BlockOutputs>,
    /// Globally pooled classifier input of each block, `N x C_b`.
    pub pooled: Vec<Var>,
}

fn init_new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, mark: usize, rng: &mut R) {
    let ids = registered_since(store, mark);
    init_ids(store, &ids, rng);
}

/// Spatial size of each block for an input of `h x w`.
pub fn spatial_schedule(config: &ModelConfig, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let downs = config.blocks.len() - 1;
    let stem_factor = match config.stem {
        Stem::Cifar => 1,
        Stem::Imagenet => 4,
    };
    let factor = stem_factor << downs;
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(dim_err(
            "model_forward",
            format!("input height/width axes {h}x{w} must be positive multiples of {factor} for this stem and block count"),
        ));
    }
    let (mut bh, mut bw) = (h / stem_factor, w / stem_factor);
    let mut out = Vec::with_capacity(config.blocks.len());
    for _ in 0..config.blocks.len() {
        out.push((bh, bw));
        bh /= 2;
        bw /= 2;
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    pub fn block_spec(&self, b: usize) -> &CliqueBlockSpec {
        self.blocks[b].spec()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, images: Var, mode: Mode, rng: &mut R) -> Result<ForwardTrace> {
        let (_, c, h, w) = g.value(images).dims4("model_forward")?;
        if c != self.config.input_channels {
            return Err(dim_err(
                "model_forward",
                format!("image channel axis C={c} != config input_channels {}", self.config.input_channels),
            ));
        }
        spatial_schedule(&self.config, h, w)?;
        let mut pass = Pass::new(g, &self.params, mode, rng);

        let mut x = stem_forward(&mut pass, &self.stem, self.config.stem, images)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut pooled = Vec::with_capacity(self.blocks.len());
        for (b, ws) in self.blocks.iter().enumerate() {
            let bound = ws.bind(pass.graph, pass.store);
            let out = block_forward(&mut pass, ws.spec(), &bound, x, self.config.variant)?;
            let feature = match &self.compression[b] {
                Some(cp) => compression_head(&mut pass, cp, out.block_feature)?,
                None => out.block_feature,
            };
            let p = pass.graph.global_avg_pool(feature)?;
            pooled.push(pass.graph.flatten(p)?);
            if let Some(tp) = self.transitions.get(b) {
                x = transition_forward(&mut pass, tp, out.transit_feature)?;
            }
            blocks.push(out);
        }
        let features = pass.graph.concat_channels(&pooled)?;
        let logits = self.classifier.forward(&mut pass, features)?;
        Ok(ForwardTrace { logits, blocks, pooled })
    }

    /// Convenience: runs a forward on a fresh input and returns logits.
    pub fn logits<R: Rng + ?Sized>(&self, g: &mut Graph<T>, images: crate::Tensor<T>, mode: Mode, rng: &mut R) -> Result<Var> {
        let x = g.input(images);
        Ok(self.forward(g, x, mode, rng)?.logits)
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            transitions: self.transitions.clone(),
            compression: self.compression.clone(),
            classifier: self.classifier,
        }
    }
}

fn stem_forward<T: Scalar, R: Rng + ?Sized>(pass: &mut Pass<'_, T, R>, stem: &StemParams, kind: Stem, images: Var) -> Result<Var> {
    let k = pass.param(stem.conv);
    match kind {
        Stem::Cifar => pass.graph.conv2d(images, k, 1, 1),
        Stem::Imagenet => {
            let y = pass.graph.conv2d(images, k, 2, 3)?;
            let bn = stem.bn.as_ref().expect("imagenet stem has batch norm").bind(pass.graph, pass.store);
            let a = bn.forward_relu(pass, y)?;
            pass.graph.pool(a, PoolMode::Max, 3, 2, 1)
        }
    }
}

/// BN, ReLU, 1x1 conv, optional channel attention, then 2x2 average pool.
pub fn transition_forward<T: Scalar, R: Rng + ?Sized>(pass: &mut Pass<'_, T, R>, params: &TransitionParams, x: Var) -> Result<Var> {
    let bn = params.bn.bind(pass.graph, pass.store);
    let a = bn.forward_relu(pass, x)?;
    let k = pass.param(params.conv);
    let y = pass.graph.conv2d(a, k, 1, 0)?;
    let mut y = pass.dropout(y, params.dropout_rate)?;
    if let Some(att) = &params.attention {
        y = attentional_transition(pass, att, y)?;
    }
    pass.graph.pool(y, PoolMode::Avg, 2, 2, 0)
}

/// Squeeze-and-excitation rescale: global average, half-width FC + ReLU,
/// full-width FC + sigmoid, per-channel multiply.
pub fn attentional_transition<T: Scalar, R: Rng + ?Sized>(pass: &mut Pass<'_, T, R>, params: &AttentionParams, x: Var) -> Result<Var> {
    let squeezed = pass.graph.global_avg_pool(x)?;
    let s = pass.graph.flatten(squeezed)?;
    let h = params.fc1.forward(pass, s)?;
    let h = pass.graph.relu(h);
    let e = params.fc2.forward(pass, h)?;
    let scale = pass.graph.sigmoid(e);
    pass.graph.channel_scale(x, scale)
}

/// BN, ReLU, 1x1 conv halving the channel count.
pub fn compression_head<T: Scalar, R: Rng + ?Sized>(pass: &mut Pass<'_, T, R>, params: &CompressionParams, x: Var) -> Result<Var> {
    let bn = params.bn.bind(pass.graph, pass.store);
    let a = bn.forward_relu(pass, x)?;
    let k = pass.param(params.conv);
    pass.graph.conv2d(a, k, 1, 0)
}

pub fn register_attention<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, group: ParamGroup) -> Result<AttentionParams> {
    let hidden = (channels / 2).max(1);
    Ok(AttentionParams {
        fc1: DenseParams::register(store, &format!("{prefix}/fc1"), channels, hidden, group)?,
        fc2: DenseParams::register(store, &format!("{prefix}/fc2"), hidden, channels, group)?,
    })
}

/// Builds and initializes a model. Parameters are registered and drawn from
/// `rng` in a fixed order, so equal configs and seeds give equal models.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamStore::new();

    let mark = params.len();
    let stem = match config.stem {
        Stem::Cifar => StemParams {
            conv: register_conv(&mut params, "stem/conv", [STEM_CHANNELS, config.input_channels, 3, 3], ParamGroup::Stem)?,
            bn: None,
        },
        Stem::Imagenet => StemParams {
            conv: register_conv(&mut params, "stem/conv", [STEM_CHANNELS, config.input_channels, 7, 7], ParamGroup::Stem)?,
            bn: Some(BnParams::register(&mut params, "stem/bn", STEM_CHANNELS, ParamGroup::Stem)?),
        },
    };
    init_new(&mut params, mark, rng);

    let in_channels = config.block_in_channels();
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let mut compression = Vec::new();
    let last = config.blocks.len() - 1;
    for (b, &(n, k)) in config.blocks.iter().enumerate() {
        let idx = b + 1;
        let spec = CliqueBlockSpec {
            n_layers: n,
            k_filters: k,
            in_channels: in_channels[b],
            bottleneck: config.bottleneck,
            dropout_rate: config.dropout,
        };
        blocks.push(make_weight_store(&mut params, &format!("block{idx}"), idx, &spec, rng)?);

        let mark = params.len();
        compression.push(if config.compression {
            let c = spec.block_channels();
            if c < 2 {
                return Err(Error::Config { field: format!("blocks[{b}]"), reason: "compression needs at least 2 channels".into() });
            }
            let group = ParamGroup::Compression(idx);
            Some(CompressionParams {
                bn: BnParams::register(&mut params, &format!("compression{idx}/bn"), c, group)?,
                conv: register_conv(&mut params, format!("compression{idx}/conv"), [c / 2, c, 1, 1], group)?,
            })
        } else {
            None
        });
        if b < last {
            let t = spec.transit_channels();
            let group = ParamGroup::Transition(idx);
            let bn = BnParams::register(&mut params, &format!("transition{idx}/bn"), t, group)?;
            let conv = register_conv(&mut params, format!("transition{idx}/conv"), [t, t, 1, 1], group)?;
            let attention = if config.attentional_transition {
                if t < 2 {
                    return Err(Error::Config { field: "attention".into(), reason: "attention needs at least 2 channels".into() });
                }
                Some(register_attention(&mut params, &format!("transition{idx}/att"), t, ParamGroup::Attention(idx))?)
            } else {
                None
            };
            transitions.push(TransitionParams { bn, conv, attention, dropout_rate: config.dropout });
        }
        init_new(&mut params, mark, rng);
    }

    let feature_width: usize = blocks
        .iter()
        .map(|ws| {
            let c = ws.spec().block_channels();
            if config.compression { c / 2 } else { c }
        })
        .sum();
    let mark = params.len();
    let classifier = DenseParams::register(&mut params, "head", feature_width, config.num_classes, ParamGroup::Classifier)?;
    init_new(&mut params, mark, rng);

    Ok(Model { config: config.clone(), params, stem, blocks, transitions, compression, classifier })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn att_pass(x: Tensor<f64>, w1: &[f64], w2: &[f64]) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut store = ParamStore::new();
        let att = register_attention(&mut store, "att", c, ParamGroup::Other).unwrap();
        store.get_mut(att.fc1.weight).value.data_mut().copy_from_slice(w1);
        store.get_mut(att.fc2.weight).value.data_mut().copy_from_slice(w2);
        let mut g = Graph::new();
        let mut r = rng();
        let mut pass = Pass::new(&mut g, &store, Mode::Eval, &mut r);
        let xv = pass.graph.input(x);
        let y = attentional_transition(&mut pass, &att, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn attention_hand_example() {
        // fc1 maps channel 0 to the single hidden unit; fc2 sends it to channel 0 with weight 2
        let x = Tensor::full(&[1, 2, 2, 2], 1.0);
        let y = att_pass(x, &[1.0, 0.0], &[2.0, 0.0]);
        let s0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((y.data()[0] - s0).abs() < 1e-12);
        assert!((s0 - 0.8808).abs() < 1e-4);
        assert!((y.data()[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_attention_halves() {
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| i as f64 - 30.0);
        let y = att_pass(x.clone(), &[0.0; 8], &[0.0; 8]);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    fn cifar(blocks: Vec<(usize, usize)>) -> ModelConfig {
        ModelConfig { blocks, ..ModelConfig::preset("toy").unwrap() }
    }

    #[test]
    fn block_widths_and_classifier_input() {
        let cfg = ModelConfig { num_classes: 10, ..cifar(alloc::vec![(4, 36), (4, 36), (4, 36)]) };
        let m: Model<f32> = build_model(&cfg, &mut rng()).unwrap();
        let ins: Vec<_> = m.blocks.iter().map(|b| b.spec().in_channels).collect();
        assert_eq!(ins, [64, 144, 144]);
        assert_eq!(m.params.value(m.classifier.weight).shape(), &[784, 10]);
    }

    #[test]
    fn compression_halves_block_feature() {
        let cfg = ModelConfig { compression: true, ..cifar(alloc::vec![(4, 36), (4, 36)]) };
        let m: Model<f32> = build_model(&cfg, &mut rng()).unwrap();
        let shapes: Vec<_> = m.compression.iter().map(|c| m.params.value(c.as_ref().unwrap().conv).shape()[0]).collect();
        assert_eq!(shapes, [104, 144]);
    }

    #[test]
    fn spatial_schedule_per_stem() {
        let cfg = cifar(alloc::vec![(2, 4), (2, 4), (2, 4)]);
        assert_eq!(spatial_schedule(&cfg, 32, 32).unwrap(), [(32, 32), (16, 16), (8, 8)]);
        assert!(spatial_schedule(&cfg, 30, 32).is_err());
        let s0 = ModelConfig::preset("imagenet_s0").unwrap();
        let sizes: Vec<_> = spatial_schedule(&s0, 224, 224).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(sizes, [56, 28, 14, 7]);
    }

    #[test]
    fn transition_shapes_and_attention_off() {
        let cfg = cifar(alloc::vec![(2, 4), (2, 4)]);
        let m: Model<f64> = build_model(&cfg, &mut rng()).unwrap();
        let mut g = Graph::new();
        let mut r = rng();
        let mut pass = Pass::new(&mut g, &m.params, Mode::Eval, &mut r);
        let x = pass.graph.input(Tensor::from_fn(&[1, 8, 32, 32], |i| (i % 7) as f64));
        let y = transition_forward(&mut pass, &m.transitions[0], x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 16, 16]);
    }

    #[test]
    fn zero_images_give_finite_logits() {
        let cfg = ModelConfig { attentional_transition: true, compression: true, ..cifar(alloc::vec![(2, 4), (2, 4)]) };
        let m: Model<f32> = build_model(&cfg, &mut rng()).unwrap();
        let mut g = Graph::new();
        let logits = m.logits(&mut g, Tensor::zeros(&[2, 3, 8, 8]), Mode::Eval, &mut rng()).unwrap();
        assert_eq!(g.shape(logits), &[2, 2]);
        assert!(g.value(logits).all_finite());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m: Model<f32> = build_model(&cifar(alloc::vec![(2, 4), (2, 4)]), &mut rng()).unwrap();
        let mut g = Graph::new();
        assert!(m.logits(&mut g, Tensor::zeros(&[1, 3, 7, 8]), Mode::Eval, &mut rng()).is_err());
        let mut g = Graph::new();
        assert!(m.logits(&mut g, Tensor::zeros(&[1, 1, 8, 8]), Mode::Eval, &mut rng()).is_err());
    }

    #[test]
    fn equal_seeds_equal_models() {
        let cfg = ModelConfig::preset("toy").unwrap();
        let a: Model<f32> = build_model(&cfg, &mut rng()).unwrap();
        let b: Model<f32> = build_model(&cfg, &mut rng()).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
