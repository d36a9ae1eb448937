//! Declarative model descriptions and the shipped presets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clique::Variant;
use crate::error::{Error, Result};

/// Output width of either stem.
pub const STEM_CHANNELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3x3 conv to 64 channels, resolution preserved.
    Cifar,
    /// 7x7 stride-2 conv to 64 channels, BN, ReLU, 3x3 stride-2 max pool.
    Imagenet,
}

impl Stem {
    pub fn default_resolution(self) -> (usize, usize) {
        match self {
            Stem::Cifar => (32, 32),
            Stem::Imagenet => (224, 224),
        }
    }
}

fn default_input_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: Stem,
    /// `(n_layers, k_filters)` per block.
    pub blocks: Vec<(usize, usize)>,
    #[serde(rename = "attention")]
    pub attentional_transition: bool,
    pub bottleneck: bool,
    pub compression: bool,
    #[serde(default)]
    pub variant: Variant,
    pub num_classes: usize,
    pub dropout: f64,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(field_err("blocks", "at least one block is required"));
        }
        for (b, &(n, k)) in self.blocks.iter().enumerate() {
            if n < 2 {
                return Err(field_err(format!("blocks[{b}]"), format!("n_layers {n} < 2")));
            }
            if k == 0 {
                return Err(field_err(format!("blocks[{b}]"), "k_filters must be positive"));
            }
        }
        if self.num_classes == 0 {
            return Err(field_err("num_classes", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field_err("dropout", "must lie in [0, 1)"));
        }
        if self.input_channels == 0 {
            return Err(field_err("input_channels", "must be positive"));
        }
        Ok(())
    }

    /// `X0` width of each block: the stem for the first, the previous
    /// transition (`n * k`) after that.
    pub fn block_in_channels(&self) -> Vec<usize> {
        let mut out = vec![STEM_CHANNELS];
        for &(n, k) in &self.blocks[..self.blocks.len() - 1] {
            out.push(n * k);
        }
        out
    }

    /// Total layers across blocks (the `T` of `k / T` model names).
    pub fn total_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.0).sum()
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS.iter().find(|p| p.name == name).map(|p| (p.build)())
    }
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ModelConfig,
}

fn cifar(n: usize, k: usize, a: bool, b: bool, c: bool) -> ModelConfig {
    ModelConfig {
        stem: Stem::Cifar,
        blocks: vec![(n, k); 3],
        attentional_transition: a,
        bottleneck: b,
        compression: c,
        variant: Variant::StageTwo,
        num_classes: 10,
        dropout: 0.2,
        input_channels: 3,
    }
}

fn imagenet(blocks: [(usize, usize); 4], attention: bool) -> ModelConfig {
    ModelConfig {
        stem: Stem::Imagenet,
        blocks: blocks.to_vec(),
        attentional_transition: attention,
        bottleneck: true,
        compression: true,
        variant: Variant::StageTwo,
        num_classes: 1000,
        dropout: 0.0,
        input_channels: 3,
    }
}

const S0: [(usize, usize); 4] = [(5, 36), (6, 64), (6, 100), (6, 80)];
const S1: [(usize, usize); 4] = [(5, 36), (6, 80), (6, 120), (6, 100)];
const S2: [(usize, usize); 4] = [(5, 36), (5, 80), (6, 150), (6, 120)];
const S3: [(usize, usize); 4] = [(6, 40), (6, 80), (6, 160), (6, 160)];

pub static PRESETS: &[Preset] = &[
    Preset { name: "cifar_36_12", description: "CIFAR, k=36, T=12", build: || cifar(4, 36, false, false, false) },
    Preset { name: "cifar_64_15", description: "CIFAR, k=64, T=15", build: || cifar(5, 64, false, false, false) },
    Preset { name: "cifar_80_15", description: "CIFAR, k=80, T=15", build: || cifar(5, 80, false, false, false) },
    Preset { name: "cifar_80_18", description: "CIFAR, k=80, T=18", build: || cifar(6, 80, false, false, false) },
    Preset { name: "cifar_36_12_A", description: "CIFAR, k=36, T=12, attentional transition", build: || cifar(4, 36, true, false, false) },
    Preset { name: "cifar_36_12_C", description: "CIFAR, k=36, T=12, compression", build: || cifar(4, 36, false, false, true) },
    Preset { name: "cifar_36_12_AC", description: "CIFAR, k=36, T=12, attention + compression", build: || cifar(4, 36, true, false, true) },
    Preset { name: "cifar_80_15_AC", description: "CIFAR, k=80, T=15, attention + compression", build: || cifar(5, 80, true, false, true) },
    Preset {
        name: "cifar_150_30_ABC",
        description: "CIFAR, k=150, T=30 counting both bottleneck convs (5 layers per block), A+B+C",
        build: || cifar(5, 150, true, true, true),
    },
    Preset { name: "imagenet_s0", description: "ImageNet S0, bottleneck + compression", build: || imagenet(S0, false) },
    Preset { name: "imagenet_s1", description: "ImageNet S1, bottleneck + compression", build: || imagenet(S1, false) },
    Preset { name: "imagenet_s2", description: "ImageNet S2, attention + bottleneck + compression", build: || imagenet(S2, true) },
    Preset { name: "imagenet_s2_noatt", description: "ImageNet S2 without attentional transition", build: || imagenet(S2, false) },
    Preset { name: "imagenet_s3", description: "ImageNet S3, attention + bottleneck + compression", build: || imagenet(S3, true) },
    Preset { name: "imagenet_s3_noatt", description: "ImageNet S3 without attentional transition", build: || imagenet(S3, false) },
    Preset {
        name: "toy",
        description: "1 block (n=2, k=4) on 8x8 inputs, 2 classes; smoke training",
        build: || ModelConfig {
            stem: Stem::Cifar,
            blocks: vec![(2, 4)],
            attentional_transition: false,
            bottleneck: false,
            compression: false,
            variant: Variant::StageTwo,
            num_classes: 2,
            dropout: 0.2,
            input_channels: 3,
        },
    },
];
