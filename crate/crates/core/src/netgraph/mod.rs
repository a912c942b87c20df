//! Architecture description, dependency groups, weight storage, FLOPs
//! accounting and graph-walking inference.

mod builder;
mod flops;
mod forward;
pub mod models;
mod validate;
mod weights;

pub use builder::GraphBuilder;
pub use flops::{count_flops, count_flops_full, layer_flops, resize};
pub use forward::{forward, forward_collect, proxy_accuracy, LayerOutputs};
pub(crate) use forward::{gather, run_layer};
pub use validate::{validate, validate_graph, Diagnostic};
pub use weights::{load_weights, save_weights, WeightStore};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_size;

/// Name under which layers refer to the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    Dense,
    Batchnorm,
    Relu,
    Gelu,
    Layernorm,
    Attention,
    MlpBlock,
    Add,
    GlobalPool,
    Classifier,
    PatchEmbed,
    MaxPool,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        !matches!(
            self,
            LayerKind::Relu | LayerKind::Gelu | LayerKind::Add | LayerKind::GlobalPool | LayerKind::MaxPool
        )
    }
}

/// Kind-specific integer hyperparameters. Fields irrelevant to a kind stay
/// unset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    /// Head dimension used for the softmax temperature, when it differs
    /// from `head_dim` after head-dimension pruning.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_dim: Option<usize>,
    /// For `global-pool` on tokens: 1 selects the leading class token,
    /// otherwise tokens are averaged.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_token: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    fn need(&self, field: &'static str, v: Option<usize>) -> Result<usize> {
        v.ok_or_else(|| {
            Error::Graph(format!("layer `{}` ({:?}) is missing hyperparameter `{field}`", self.name, self.kind))
        })
    }

    pub fn in_channels(&self) -> Result<usize> {
        self.need("in_channels", self.hyperparams.in_channels)
    }
    pub fn out_channels(&self) -> Result<usize> {
        self.need("out_channels", self.hyperparams.out_channels)
    }
    pub fn kernel(&self) -> Result<usize> {
        self.need("kernel", self.hyperparams.kernel)
    }
    pub fn stride(&self) -> usize {
        self.hyperparams.stride.unwrap_or(1)
    }
    pub fn padding(&self) -> usize {
        self.hyperparams.padding.unwrap_or(0)
    }
    pub fn conv_groups(&self) -> usize {
        self.hyperparams.groups.unwrap_or(1)
    }
    pub fn in_features(&self) -> Result<usize> {
        self.need("in_features", self.hyperparams.in_features)
    }
    pub fn out_features(&self) -> Result<usize> {
        self.need("out_features", self.hyperparams.out_features)
    }
    pub fn features(&self) -> Result<usize> {
        self.need("features", self.hyperparams.features)
    }
    pub fn embed_dim(&self) -> Result<usize> {
        self.need("embed_dim", self.hyperparams.embed_dim)
    }
    pub fn head_count(&self) -> Result<usize> {
        self.need("head_count", self.hyperparams.head_count)
    }
    pub fn head_dim(&self) -> Result<usize> {
        self.need("head_dim", self.hyperparams.head_dim)
    }
    pub fn hidden_dim(&self) -> Result<usize> {
        self.need("hidden_dim", self.hyperparams.hidden_dim)
    }
    pub fn patch(&self) -> Result<usize> {
        self.need("patch", self.hyperparams.patch)
    }

    /// Whether the layer carries a bias term. Convolutions default to no
    /// bias; dense-style layers default to having one.
    pub fn has_bias(&self) -> bool {
        let default = match self.kind {
            LayerKind::Conv2d => 0,
            _ => 1,
        };
        self.hyperparams.bias.unwrap_or(default) != 0
    }

    pub fn is_depthwise(&self) -> bool {
        self.kind == LayerKind::Conv2d
            && self.conv_groups() > 1
            && self.hyperparams.in_channels == Some(self.conv_groups())
            && self.hyperparams.out_channels == Some(self.conv_groups())
    }

    pub fn attention_scale(&self) -> Result<f32> {
        let d = self.hyperparams.scale_dim.map_or_else(|| self.head_dim(), Ok)?;
        Ok(1.0 / (d as f32).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "out-channels")]
    Out,
    #[serde(rename = "in-channels")]
    In,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub layer: String,
    pub axis: Axis,
}

/// Layer axes that must keep identical channel counts and identical kept
/// indices. For attention layers the out axis counts heads; for MLP blocks
/// it counts hidden units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGroup {
    pub id: usize,
    pub members: Vec<GroupMember>,
    pub original_size: usize,
}

/// What a dependency group's index set selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupUnit {
    Channels,
    Heads,
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub groups: Vec<DependencyGroup>,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
    Tokens { t: usize, d: usize },
}

impl ActShape {
    pub fn from_input(shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] => Ok(ActShape::Spatial { c, h, w }),
            [t, d] => Ok(ActShape::Tokens { t, d }),
            [f] => Ok(ActShape::Flat { f }),
            _ => Err(Error::Graph(format!("unsupported input shape {shape:?}"))),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat { f } => vec![f],
            ActShape::Tokens { t, d } => vec![t, d],
        }
    }

    /// Size of the channel / feature axis.
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Spatial { c, .. } => c,
            ActShape::Flat { f } => f,
            ActShape::Tokens { d, .. } => d,
        }
    }
}

pub type GroupSizes = BTreeMap<usize, usize>;

impl NetworkGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self) -> HashMap<&str, usize> {
        self.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect()
    }

    pub fn group(&self, id: usize) -> Option<&DependencyGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn output_layer(&self) -> Option<&LayerSpec> {
        self.layers.last()
    }

    /// `(layer, axis) → group id`. Duplicate memberships keep the first
    /// group; `validate` reports them.
    pub fn membership(&self) -> HashMap<(String, Axis), usize> {
        let mut map = HashMap::new();
        for g in &self.groups {
            for m in &g.members {
                map.entry((m.layer.clone(), m.axis)).or_insert(g.id);
            }
        }
        map
    }

    pub fn group_unit(&self, id: usize) -> GroupUnit {
        let Some(g) = self.group(id) else {
            return GroupUnit::Channels;
        };
        for m in &g.members {
            match self.layer(&m.layer).map(|l| l.kind) {
                Some(LayerKind::Attention) => return GroupUnit::Heads,
                Some(LayerKind::MlpBlock) => return GroupUnit::Hidden,
                _ => {}
            }
        }
        GroupUnit::Channels
    }

    /// Full-width size of every group.
    pub fn full_sizes(&self) -> GroupSizes {
        self.groups.iter().map(|g| (g.id, g.original_size)).collect()
    }

    /// Output shape of every layer, in layer order.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let input = ActShape::from_input(&self.input_shape)?;
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.layers.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let ins = layer
                .inputs
                .iter()
                .map(|name| {
                    if name == INPUT {
                        Ok(input)
                    } else {
                        index.get(name.as_str()).map(|&j| shapes[j]).ok_or_else(|| {
                            Error::Graph(format!(
                                "layer `{}` consumes `{name}`, which is not defined earlier",
                                layer.name
                            ))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let out = layer_output_shape(layer, &ins).map_err(|e| e.in_layer(&layer.name))?;
            shapes.push(out);
            index.insert(layer.name.as_str(), i);
        }
        Ok(shapes)
    }

    /// Group governing the channel axis of each layer's output (`None` for
    /// fixed-width tensors), propagated through the channel flow.
    pub fn channel_flow(&self) -> Vec<Option<usize>> {
        let member = self.membership();
        let index = self.layer_index();
        let mut flow: Vec<Option<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input_group = |k: usize| -> Option<usize> {
                let name = layer.inputs.get(k)?;
                if name == INPUT {
                    None
                } else {
                    index.get(name.as_str()).and_then(|&j| flow.get(j).copied().flatten())
                }
            };
            let out_member = member.get(&(layer.name.clone(), Axis::Out)).copied();
            let g = match layer.kind {
                LayerKind::Conv2d if layer.is_depthwise() => input_group(0),
                LayerKind::Conv2d | LayerKind::Dense | LayerKind::Classifier => out_member,
                LayerKind::Batchnorm
                | LayerKind::Relu
                | LayerKind::Gelu
                | LayerKind::MaxPool
                | LayerKind::GlobalPool
                | LayerKind::Add => input_group(0),
                LayerKind::Layernorm | LayerKind::Attention | LayerKind::MlpBlock | LayerKind::PatchEmbed => None,
            };
            flow.push(g);
        }
        flow
    }

    /// Group governing the channel axis of `layer`'s first input.
    pub fn input_group(&self, layer: &LayerSpec, flow: &[Option<usize>]) -> Option<usize> {
        let name = layer.inputs.first()?;
        if name == INPUT {
            return None;
        }
        let idx = self.layers.iter().position(|l| &l.name == name)?;
        flow[idx]
    }
}

pub(crate) fn layer_output_shape(layer: &LayerSpec, ins: &[ActShape]) -> Result<ActShape> {
    let arity = match layer.kind {
        LayerKind::Add => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if ins.len() != n {
            return Err(Error::Graph(format!("expects {n} input(s), got {}", ins.len())));
        }
    } else if ins.len() < 2 {
        return Err(Error::Graph("add needs at least two inputs".into()));
    }
    let x = ins[0];
    let mismatch = |what: &str, expected: usize, got: usize| {
        Error::Dimension(format!("{what}: expected {expected}, input provides {got}"))
    };
    match layer.kind {
        LayerKind::Conv2d => {
            let ActShape::Spatial { c, h, w } = x else {
                return Err(Error::Dimension("conv2d needs a spatial input".into()));
            };
            let cin = layer.in_channels()?;
            if cin != c {
                return Err(mismatch("in_channels", cin, c));
            }
            let cout = layer.out_channels()?;
            let g = layer.conv_groups();
            if g == 0 || cin % g != 0 || cout % g != 0 {
                return Err(Error::Dimension(format!("groups {g} does not divide {cin}/{cout}")));
            }
            let k = layer.kernel()?;
            Ok(ActShape::Spatial {
                c: cout,
                h: conv_output_size(h, k, layer.stride(), layer.padding())?,
                w: conv_output_size(w, k, layer.stride(), layer.padding())?,
            })
        }
        LayerKind::MaxPool => {
            let ActShape::Spatial { c, h, w } = x else {
                return Err(Error::Dimension("max-pool needs a spatial input".into()));
            };
            let k = layer.kernel()?;
            Ok(ActShape::Spatial {
                c,
                h: conv_output_size(h, k, layer.stride(), layer.padding())?,
                w: conv_output_size(w, k, layer.stride(), layer.padding())?,
            })
        }
        LayerKind::Dense | LayerKind::Classifier => {
            let fin = layer.in_features()?;
            let fout = layer.out_features()?;
            match x {
                ActShape::Flat { f } if f == fin => Ok(ActShape::Flat { f: fout }),
                ActShape::Tokens { t, d } if d == fin && layer.kind == LayerKind::Dense => {
                    Ok(ActShape::Tokens { t, d: fout })
                }
                other => Err(mismatch("in_features", fin, other.channels())),
            }
        }
        LayerKind::Batchnorm => {
            let c = layer.features()?;
            match x {
                ActShape::Spatial { .. } | ActShape::Flat { .. } if x.channels() == c => Ok(x),
                other => Err(mismatch("features", c, other.channels())),
            }
        }
        LayerKind::Layernorm => {
            let d = layer.features()?;
            match x {
                ActShape::Tokens { .. } | ActShape::Flat { .. } if x.channels() == d => Ok(x),
                other => Err(mismatch("features", d, other.channels())),
            }
        }
        LayerKind::Relu | LayerKind::Gelu => Ok(x),
        LayerKind::Attention => {
            let ActShape::Tokens { d, .. } = x else {
                return Err(Error::Dimension("attention needs a token input".into()));
            };
            let e = layer.embed_dim()?;
            if e != d {
                return Err(mismatch("embed_dim", e, d));
            }
            layer.head_count()?;
            layer.head_dim()?;
            Ok(x)
        }
        LayerKind::MlpBlock => {
            let e = layer.embed_dim()?;
            if x.channels() != e || matches!(x, ActShape::Spatial { .. }) {
                return Err(mismatch("embed_dim", e, x.channels()));
            }
            layer.hidden_dim()?;
            Ok(x)
        }
        LayerKind::Add => {
            if let Some(other) = ins.iter().find(|s| **s != x) {
                return Err(Error::Dimension(format!(
                    "add inputs disagree: {:?} vs {:?}",
                    x.dims(),
                    other.dims()
                )));
            }
            Ok(x)
        }
        LayerKind::GlobalPool => match x {
            ActShape::Spatial { c, .. } => Ok(ActShape::Flat { f: c }),
            ActShape::Tokens { d, .. } => Ok(ActShape::Flat { f: d }),
            ActShape::Flat { .. } => Err(Error::Dimension("global-pool needs spatial or token input".into())),
        },
        LayerKind::PatchEmbed => {
            let ActShape::Spatial { c, h, w } = x else {
                return Err(Error::Dimension("patch-embed needs a spatial input".into()));
            };
            let cin = layer.in_channels()?;
            if cin != c {
                return Err(mismatch("in_channels", cin, c));
            }
            let p = layer.patch()?;
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::Dimension(format!("patch {p} does not tile {h}×{w}")));
            }
            Ok(ActShape::Tokens {
                t: 1 + (h / p) * (w / p),
                d: layer.embed_dim()?,
            })
        }
    }
}

/// Expected parameter tensors for a layer given its hyperparameters.
pub fn param_shapes(layer: &LayerSpec, input: ActShape) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let mut out = Vec::new();
    match layer.kind {
        LayerKind::Conv2d => {
            let k = layer.kernel()?;
            let cout = layer.out_channels()?;
            out.push(("kernel", vec![cout, layer.in_channels()? / layer.conv_groups().max(1), k, k]));
            if layer.has_bias() {
                out.push(("bias", vec![cout]));
            }
        }
        LayerKind::Dense | LayerKind::Classifier => {
            let fout = layer.out_features()?;
            out.push(("weight", vec![fout, layer.in_features()?]));
            if layer.has_bias() {
                out.push(("bias", vec![fout]));
            }
        }
        LayerKind::Batchnorm => {
            let c = layer.features()?;
            for p in ["gamma", "beta", "mean", "var"] {
                out.push((p, vec![c]));
            }
        }
        LayerKind::Layernorm => {
            let d = layer.features()?;
            out.push(("gamma", vec![d]));
            out.push(("beta", vec![d]));
        }
        LayerKind::Attention => {
            let d = layer.embed_dim()?;
            let inner = layer.head_count()? * layer.head_dim()?;
            out.push(("qkv_weight", vec![3 * inner, d]));
            if layer.has_bias() {
                out.push(("qkv_bias", vec![3 * inner]));
            }
            out.push(("proj_weight", vec![d, inner]));
            if layer.has_bias() {
                out.push(("proj_bias", vec![d]));
            }
        }
        LayerKind::MlpBlock => {
            let d = layer.embed_dim()?;
            let hdim = layer.hidden_dim()?;
            out.push(("fc1_weight", vec![hdim, d]));
            if layer.has_bias() {
                out.push(("fc1_bias", vec![hdim]));
            }
            out.push(("fc2_weight", vec![d, hdim]));
            if layer.has_bias() {
                out.push(("fc2_bias", vec![d]));
            }
        }
        LayerKind::PatchEmbed => {
            let d = layer.embed_dim()?;
            let p = layer.patch()?;
            out.push(("kernel", vec![d, layer.in_channels()?, p, p]));
            out.push(("bias", vec![d]));
            out.push(("cls_token", vec![d]));
            let ActShape::Spatial { h, w, .. } = input else {
                return Err(Error::Dimension("patch-embed needs a spatial input".into()));
            };
            out.push(("pos_embed", vec![1 + (h / p) * (w / p), d]));
        }
        _ => {}
    }
    Ok(out)
}

/// Reads a model-spec JSON file.
pub fn load_graph(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path)?;
    NetworkGraph::from_json(&text)
}

pub fn save_graph(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, graph.to_json()?)?;
    Ok(())
}
