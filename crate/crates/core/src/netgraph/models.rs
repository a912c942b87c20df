//! Built-in architecture generators.
//!
//! Full-size generators (ResNet50, MobileNetV1, DeiT-Base) are meant for
//! FLOPs accounting; every generator is parameterised so a toy-scale copy
//! can also be run end to end.

use rand::Rng;

use super::{param_shapes, ActShape, GraphBuilder, LayerKind, NetworkGraph, WeightStore, INPUT};
use crate::error::Result;
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyCnnConfig {
    pub input: [usize; 3],
    /// Stem, stage-1, inner residual, stage-2 widths.
    pub widths: [usize; 4],
    pub classes: usize,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self {
            input: [3, 8, 8],
            widths: [8, 16, 16, 32],
            classes: 4,
        }
    }
}

/// Five conv/BN/ReLU layers with one residual connection, global pooling
/// and a linear classifier.
pub fn toy_cnn(cfg: &ToyCnnConfig) -> NetworkGraph {
    let [w0, w1, w2, w3] = cfg.widths;
    let mut b = GraphBuilder::new(&cfg.input, cfg.classes);
    let x = b.conv("conv0", INPUT, w0, 3, 1, 1);
    let x = b.batchnorm("bn0", &x);
    let x = b.relu("relu0", &x);
    let x = b.conv("conv1", &x, w1, 3, 2, 1);
    let x = b.batchnorm("bn1", &x);
    let skip = b.relu("relu1", &x);
    let x = b.conv("conv2", &skip, w2, 3, 1, 1);
    let x = b.batchnorm("bn2", &x);
    let x = b.relu("relu2", &x);
    let x = b.conv("conv3", &x, w1, 3, 1, 1);
    let x = b.batchnorm("bn3", &x);
    let x = b.add("add3", &[&x, &skip]);
    let x = b.relu("relu3", &x);
    let x = b.conv("conv4", &x, w3, 3, 2, 1);
    let x = b.batchnorm("bn4", &x);
    let x = b.relu("relu4", &x);
    let x = b.global_pool("pool", &x, false);
    b.classifier("fc", &x);
    b.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub input: usize,
    pub stem: usize,
    /// `(bottleneck width, output width, blocks)` per stage.
    pub stages: Vec<(usize, usize, usize)>,
    pub classes: usize,
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        Self {
            input: 224,
            stem: 64,
            stages: vec![(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)],
            classes: 1000,
        }
    }

    /// ResNet50 topology at 1/16 width on 32×32 inputs.
    pub fn toy() -> Self {
        Self {
            input: 32,
            stem: 4,
            stages: vec![(4, 16, 3), (8, 32, 4), (16, 64, 6), (32, 128, 3)],
            classes: 10,
        }
    }
}

/// Bottleneck ResNet with the stride on the 3×3 convolution.
pub fn resnet(cfg: &ResNetConfig) -> NetworkGraph {
    let mut b = GraphBuilder::new(&[3, cfg.input, cfg.input], cfg.classes);
    let x = b.conv("conv1", INPUT, cfg.stem, 7, 2, 3);
    let x = b.batchnorm("bn1", &x);
    let x = b.relu("relu", &x);
    let mut x = b.max_pool("maxpool", &x, 3, 2, 1);
    for (s, &(mid, out, blocks)) in cfg.stages.iter().enumerate() {
        for blk in 0..blocks {
            let p = format!("layer{}.{}", s + 1, blk);
            let stride = if blk == 0 && s > 0 { 2 } else { 1 };
            let h = b.conv(&format!("{p}.conv1"), &x, mid, 1, 1, 0);
            let h = b.batchnorm(&format!("{p}.bn1"), &h);
            let h = b.relu(&format!("{p}.relu1"), &h);
            let h = b.conv(&format!("{p}.conv2"), &h, mid, 3, stride, 1);
            let h = b.batchnorm(&format!("{p}.bn2"), &h);
            let h = b.relu(&format!("{p}.relu2"), &h);
            let h = b.conv(&format!("{p}.conv3"), &h, out, 1, 1, 0);
            let h = b.batchnorm(&format!("{p}.bn3"), &h);
            let shortcut = if blk == 0 {
                let d = b.conv(&format!("{p}.downsample.0"), &x, out, 1, stride, 0);
                b.batchnorm(&format!("{p}.downsample.1"), &d)
            } else {
                x.clone()
            };
            let sum = b.add(&format!("{p}.add"), &[&h, &shortcut]);
            x = b.relu(&format!("{p}.relu3"), &sum);
        }
    }
    let x = b.global_pool("avgpool", &x, false);
    b.classifier("fc", &x);
    b.finish()
}

pub fn resnet50() -> NetworkGraph {
    resnet(&ResNetConfig::resnet50())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MobileNetConfig {
    pub input: usize,
    /// Channel counts are divided by this factor.
    pub width_divisor: usize,
    pub classes: usize,
}

impl MobileNetConfig {
    pub fn mobilenet_v1() -> Self {
        Self {
            input: 224,
            width_divisor: 1,
            classes: 1000,
        }
    }

    pub fn toy() -> Self {
        Self {
            input: 32,
            width_divisor: 8,
            classes: 10,
        }
    }
}

pub fn mobilenet(cfg: &MobileNetConfig) -> NetworkGraph {
    const BLOCKS: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let div = cfg.width_divisor.max(1);
    let mut b = GraphBuilder::new(&[3, cfg.input, cfg.input], cfg.classes);
    let x = b.conv("conv0", INPUT, 32 / div, 3, 2, 1);
    let x = b.batchnorm("bn0", &x);
    let mut x = b.relu("relu0", &x);
    for (i, &(out, stride)) in BLOCKS.iter().enumerate() {
        let p = format!("block{}", i + 1);
        let h = b.depthwise(&format!("{p}.dw"), &x, 3, stride, 1);
        let h = b.batchnorm(&format!("{p}.dw_bn"), &h);
        let h = b.relu(&format!("{p}.dw_relu"), &h);
        let h = b.conv(&format!("{p}.pw"), &h, out / div, 1, 1, 0);
        let h = b.batchnorm(&format!("{p}.pw_bn"), &h);
        x = b.relu(&format!("{p}.pw_relu"), &h);
    }
    let x = b.global_pool("avgpool", &x, false);
    b.classifier("fc", &x);
    b.finish()
}

pub fn mobilenet_v1() -> NetworkGraph {
    mobilenet(&MobileNetConfig::mobilenet_v1())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image: [usize; 3],
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl VitConfig {
    pub fn deit_base() -> Self {
        Self {
            image: [3, 224, 224],
            patch: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            head_dim: 64,
            hidden: 3072,
            classes: 1000,
        }
    }

    /// 4 blocks, width 64, 4 heads, MLP hidden 128 on 8×8 images.
    pub fn toy() -> Self {
        Self {
            image: [3, 8, 8],
            patch: 2,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            head_dim: 16,
            hidden: 128,
            classes: 4,
        }
    }
}

/// Pre-norm vision transformer classifying from the class token.
pub fn vit(cfg: &VitConfig) -> NetworkGraph {
    let mut b = GraphBuilder::new(&cfg.image, cfg.classes);
    let mut x = b.patch_embed("patch_embed", INPUT, cfg.embed_dim, cfg.patch);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let h = b.layernorm(&format!("{p}.norm1"), &x);
        let h = b.attention(&format!("{p}.attn"), &h, cfg.heads, cfg.head_dim);
        let r = b.add(&format!("{p}.add1"), &[&x, &h]);
        let h = b.layernorm(&format!("{p}.norm2"), &r);
        let h = b.mlp(&format!("{p}.mlp"), &h, cfg.hidden);
        x = b.add(&format!("{p}.add2"), &[&r, &h]);
    }
    let x = b.layernorm("norm", &x);
    let x = b.global_pool("pool", &x, true);
    b.classifier("head", &x);
    b.finish()
}

pub fn deit_base() -> NetworkGraph {
    vit(&VitConfig::deit_base())
}

pub fn toy_transformer(cfg: &VitConfig) -> NetworkGraph {
    vit(cfg)
}

/// Looks up a generator by name.
pub fn builtin(name: &str) -> Option<NetworkGraph> {
    Some(match name {
        "resnet50" => resnet50(),
        "mobilenet-v1" | "mobilenetv1" => mobilenet_v1(),
        "deit-base" => deit_base(),
        "toy-cnn" => toy_cnn(&ToyCnnConfig::default()),
        "toy-transformer" => toy_transformer(&VitConfig::toy()),
        "toy-resnet50" => resnet(&ResNetConfig::toy()),
        "toy-mobilenet-v1" => mobilenet(&MobileNetConfig::toy()),
        _ => return None,
    })
}

pub const BUILTIN_NAMES: &[&str] = &[
    "resnet50",
    "mobilenet-v1",
    "deit-base",
    "toy-cnn",
    "toy-transformer",
    "toy-resnet50",
    "toy-mobilenet-v1",
];

/// Random initial weights: uniform fan-in scaled matrices, zero biases,
/// identity batch-norm statistics and unit layer-norm scales.
pub fn init_weights(graph: &NetworkGraph, rng: &mut RngStream) -> Result<WeightStore> {
    let shapes = graph.infer_shapes()?;
    let index = graph.layer_index();
    let input = ActShape::from_input(&graph.input_shape)?;
    let mut store = WeightStore::new();
    for layer in &graph.layers {
        let in_shape = match layer.inputs.first().map(String::as_str) {
            Some(INPUT) | None => input,
            Some(name) => shapes[index[name]],
        };
        for (param, shape) in param_shapes(layer, in_shape)? {
            let t = match param {
                "gamma" | "var" => Tensor::full(&shape, 1.0),
                "beta" | "mean" | "bias" | "qkv_bias" | "proj_bias" | "fc1_bias" | "fc2_bias" => Tensor::zeros(&shape),
                "cls_token" | "pos_embed" => uniform(&shape, 0.035, rng),
                _ => {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if layer.kind == LayerKind::Conv2d { 6.0 } else { 3.0 };
                    uniform(&shape, (gain / fan_in as f32).sqrt(), rng)
                }
            };
            store.insert(&layer.name, param, t);
        }
    }
    Ok(store)
}

fn uniform(shape: &[usize], bound: f32, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{count_flops_full, forward};

    #[test]
    fn resnet50_group_count() {
        let g = resnet50();
        // stem + 2 inner groups per block + 1 residual group per stage
        assert_eq!(g.groups.len(), 1 + 2 * 16 + 4);
    }

    #[test]
    fn toy_models_run() {
        for name in ["toy-cnn", "toy-transformer", "toy-resnet50", "toy-mobilenet-v1"] {
            let g = builtin(name).unwrap();
            let w = init_weights(&g, &mut RngStream::new(3, 0)).unwrap();
            let mut shape = vec![2];
            shape.extend(&g.input_shape);
            let x = Tensor::from_fn(&shape, |i| ((i % 13) as f32) / 13.0);
            let y = forward(&g, &w, &x).unwrap();
            assert_eq!(y.shape(), &[2, g.class_count], "{name}");
            assert!(y.is_finite());
            assert!(count_flops_full(&g).unwrap() > 0);
        }
    }
}
