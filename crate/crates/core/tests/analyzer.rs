mod common;

use cliquenet_core::analyzer::{argmax, count_flops, count_params, feature_dump, heatmap_image, weight_heatmap};
use cliquenet_core::autograd::BN_EPS;
use cliquenet_core::clique::Variant;
use cliquenet_core::network::{build_model, Model, ModelConfig, Stem, PRESETS};
use cliquenet_core::{Graph, Mode, ParamKind, Tensor};
use common::{randn, rng};
use proptest::prelude::*;

fn cifar(blocks: Vec<(usize, usize)>, a: bool, b: bool, c: bool) -> ModelConfig {
    ModelConfig {
        stem: Stem::Cifar,
        blocks,
        attentional_transition: a,
        bottleneck: b,
        compression: c,
        variant: Variant::StageTwo,
        num_classes: 10,
        dropout: 0.0,
        input_channels: 3,
    }
}

/// Closed-form parameter count, written from the layer list rather than the
/// registry.
fn formula_params(cfg: &ModelConfig) -> usize {
    let mut total = match cfg.stem {
        Stem::Cifar => 64 * cfg.input_channels * 9,
        Stem::Imagenet => 64 * cfg.input_channels * 49 + 2 * 64,
    };
    let mut c0 = 64;
    let mut head_in = 0;
    let last = cfg.blocks.len() - 1;
    for (b, &(n, k)) in cfg.blocks.iter().enumerate() {
        if cfg.bottleneck {
            total += n * k * c0 + n * (n - 1) * k * k + n * 9 * k * k + 2 * 2 * n * k;
        } else {
            total += 9 * (n * k * c0 + n * (n - 1) * k * k);
        }
        let stage1_bn: usize = (1..=n).map(|t| 2 * (c0 + (t - 1) * k)).sum();
        let stage2_bn = n * 2 * (n - 1) * k;
        total += stage1_bn + stage2_bn;
        let width = c0 + n * k;
        if cfg.compression {
            total += 2 * width + (width / 2) * width;
            head_in += width / 2;
        } else {
            head_in += width;
        }
        let t = n * k;
        if b < last {
            total += 2 * t + t * t;
            if cfg.attentional_transition {
                let h = t / 2;
                total += t * h + h + h * t + t;
            }
        }
        c0 = t;
    }
    total + head_in * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_formula_matches_every_preset() {
    for p in PRESETS {
        let cfg = ModelConfig::preset(p.name).unwrap();
        let model = build_model::<f32, _>(&cfg, &mut rng(0)).unwrap();
        let report = count_params(&model);
        assert_eq!(report.total_params, formula_params(&cfg), "{}", p.name);
        assert_eq!(report.groups.iter().map(|g| g.1).sum::<usize>(), report.total_params);
    }
}

fn flops(cfg: &ModelConfig, hw: usize) -> u64 {
    let model = build_model::<f32, _>(cfg, &mut rng(0)).unwrap();
    count_flops(&model, (hw, hw)).unwrap().total_flops
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flops_grow_with_width_depth_and_blocks(
        n in 2usize..5,
        k in 1usize..8,
        blocks in 1usize..4,
        a in any::<bool>(),
        b in any::<bool>(),
        c in any::<bool>(),
    ) {
        let base = cifar(vec![(n, k); blocks], a, b, c);
        let f = flops(&base, 16);
        let wider = cifar(vec![(n, k + 1); blocks], a, b, c);
        prop_assert!(flops(&wider, 16) > f);
        let deeper = cifar(vec![(n + 1, k); blocks], a, b, c);
        prop_assert!(flops(&deeper, 16) > f);
        let mut more = base.blocks.clone();
        more.push((n, k));
        let extra = cifar(more, a, b, c);
        prop_assert!(flops(&extra, 16) > f);

        let model = build_model::<f32, _>(&base, &mut rng(1)).unwrap();
        let r = count_flops(&model, (16, 16)).unwrap();
        prop_assert_eq!(r.layers.iter().map(|l| l.flops).sum::<u64>(), r.total_flops);
        prop_assert_eq!(r.total_params, model.params.scalar_count());
    }
}

#[test]
fn heatmap_has_feedback_mass() {
    let cfg = ModelConfig::preset("cifar_36_12").unwrap();
    let model = build_model::<f32, _>(&cfg, &mut rng(3)).unwrap();
    for block in 1..=3 {
        let m = weight_heatmap(&model, block).unwrap();
        let n = m.len() - 1;
        assert_eq!(n, 4);
        let mut above = 0.0;
        let mut below = 0.0;
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 0.0);
            assert_eq!(row[0], 0.0);
            for (j, &v) in row.iter().enumerate() {
                assert!(v >= 0.0);
                if j > i {
                    above += v;
                } else if j < i {
                    below += v;
                }
            }
        }
        assert!(above > 0.0 && below > 0.0, "block {block}");
        let img = heatmap_image(&m);
        assert_eq!((img.width, img.height), (5, 5));
        assert_eq!(img.pixels.iter().copied().max(), Some(255));
    }
    assert!(weight_heatmap(&model, 0).is_err());
    assert!(weight_heatmap(&model, 4).is_err());
}

fn bypass_bn(model: &mut Model<f64>) {
    for p in model.params.iter_mut() {
        match p.kind {
            ParamKind::BnGamma => p.value = Tensor::full(p.value.shape(), 1.0),
            ParamKind::BnBeta => p.value = Tensor::zeros(p.value.shape()),
            _ => {}
        }
    }
    for s in model.params.all_stats_mut() {
        s.mean = Tensor::zeros(s.mean.shape());
        s.var = Tensor::full(s.var.shape(), 1.0 - BN_EPS);
    }
}

fn stage_means(model: &Model<f64>, image: &Tensor<f64>, block: usize) -> [Vec<f64>; 2] {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let trace = model.forward(&mut g, x, Mode::Eval, &mut rng(0)).unwrap();
    let out = &trace.blocks[block - 1];
    let means = |layers: &[cliquenet_core::Var]| -> Vec<f64> {
        layers
            .iter()
            .flat_map(|v| {
                let t = g.value(*v);
                let k = t.shape()[1];
                (0..k).map(|c| t.plane(0, c).iter().sum::<f64>() / t.plane(0, c).len() as f64).collect::<Vec<_>>()
            })
            .collect()
    };
    [means(&out.stage1), means(&out.stage2)]
}

#[test]
fn dumped_maps_are_the_most_active() {
    let cfg = cifar(vec![(3, 4), (3, 4)], true, false, true);
    let model = build_model::<f64, _>(&cfg, &mut rng(5)).unwrap();
    let image = randn(&[1, 3, 8, 8], 6);
    for block in 1..=2 {
        let dumps = feature_dump(&model, &image, block).unwrap();
        let all = stage_means(&model, &image, block);
        for (d, means) in dumps.iter().zip(&all) {
            assert_eq!(means.len(), 12);
            assert!(means.iter().all(|&m| d.mean >= m));
            assert_eq!(argmax(means).unwrap().0, d.channel);
            assert_eq!(d.image.pixels.len(), [64, 16][block - 1]);
        }
        assert_eq!((dumps[0].stage, dumps[1].stage), (1, 2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn selection_ignores_positive_input_scale(seed in any::<u64>(), scale in 0.05f64..20.0) {
        let cfg = cifar(vec![(3, 3), (2, 3)], false, false, false);
        let mut model = build_model::<f64, _>(&cfg, &mut rng(seed)).unwrap();
        bypass_bn(&mut model);
        let image = randn(&[3, 4, 4], seed ^ 1);
        let scaled = image.map(|v| v * scale);
        for block in 1..=2 {
            let a = feature_dump(&model, &image, block).unwrap();
            let b = feature_dump(&model, &scaled, block).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.channel, y.channel);
                prop_assert!((y.mean - scale * x.mean).abs() <= 1e-9 * (1.0 + y.mean.abs()));
                for (p, q) in x.image.pixels.iter().zip(&y.image.pixels) {
                    prop_assert!(p.abs_diff(*q) <= 1);
                }
            }
        }
    }
}

#[test]
fn zero_model_dumps_black_maps() {
    let cfg = cifar(vec![(2, 2)], false, false, false);
    let mut model = build_model::<f64, _>(&cfg, &mut rng(0)).unwrap();
    for p in model.params.iter_mut() {
        if p.kind == ParamKind::ConvKernel {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let dumps = feature_dump(&model, &Tensor::zeros(&[3, 4, 4]), 1).unwrap();
    for d in &dumps {
        assert!(d.image.pixels.iter().all(|&p| p == 0));
        assert_eq!(d.channel, 0);
    }
    let one_stage = ModelConfig { variant: Variant::StageOneOnly, ..cfg };
    let model = build_model::<f64, _>(&one_stage, &mut rng(0)).unwrap();
    assert!(feature_dump(&model, &Tensor::zeros(&[3, 4, 4]), 1).is_err());
    let model = build_model::<f64, _>(&cifar(vec![(2, 2)], false, false, false), &mut rng(0)).unwrap();
    assert!(feature_dump(&model, &Tensor::zeros(&[2, 3, 4, 4]), 1).is_err());
}
