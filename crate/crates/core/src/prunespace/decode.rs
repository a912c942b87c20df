use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GeneTarget, Genome, SpaceSpec};
use crate::error::{Error, Result};
use crate::netgraph::{count_flops_full, resize, Axis, GroupUnit, LayerKind, LayerSpec, NetworkGraph, WeightStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    #[default]
    Random,
    L1norm,
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "l1norm" | "l1" => Ok(Self::L1norm),
            other => Err(Error::Config(format!("unknown strategy `{other}` (random, l1norm)"))),
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::L1norm => "l1norm",
        })
    }
}

/// Kept indices per group, plus kept per-head dimensions for attention
/// layers pruned along the head dimension.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub groups: BTreeMap<usize, Vec<usize>>,
    pub head_dims: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Subnetwork {
    pub graph: NetworkGraph,
    pub selection: ChannelSelection,
    pub weights: WeightStore,
    pub flops: u64,
}

fn pick(scores: Option<Vec<f64>>, size: usize, kept: usize, rng: &mut impl Rng) -> Vec<usize> {
    if kept == size {
        return (0..size).collect();
    }
    let mut idx = match scores {
        None => rand::seq::index::sample(rng, size, kept).into_vec(),
        Some(s) => {
            let mut order: Vec<usize> = (0..size).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            order.truncate(kept);
            order
        }
    };
    idx.sort_unstable();
    idx
}

fn l1_rows(t: &Tensor, rows: impl Iterator<Item = usize>) -> f64 {
    let cols = t.len() / t.shape()[0];
    rows.map(|r| t.data()[r * cols..(r + 1) * cols].iter().map(|v| v.abs() as f64).sum::<f64>())
        .sum()
}

fn attention_layer(graph: &NetworkGraph, group: usize) -> Result<&LayerSpec> {
    graph
        .group(group)
        .and_then(|g| {
            g.members
                .iter()
                .find_map(|m| graph.layer(&m.layer).filter(|l| l.kind == LayerKind::Attention))
        })
        .ok_or_else(|| Error::Graph(format!("group {group} has no attention layer")))
}

fn group_scores(graph: &NetworkGraph, weights: &WeightStore, group: usize, size: usize) -> Result<Vec<f64>> {
    let g = graph
        .group(group)
        .ok_or_else(|| Error::Bounds(format!("unknown group id {group}")))?;
    match graph.group_unit(group) {
        GroupUnit::Heads => {
            let layer = attention_layer(graph, group)?;
            let qkv = weights.param(&layer.name, "qkv_weight")?;
            let dh = layer.head_dim()?;
            Ok((0..size)
                .map(|h| l1_rows(qkv, (0..3).flat_map(|p| (0..dh).map(move |j| (p * size + h) * dh + j))))
                .collect())
        }
        GroupUnit::Hidden => {
            let m = &g.members[0];
            let fc1 = weights.param(&m.layer, "fc1_weight")?;
            Ok((0..size).map(|r| l1_rows(fc1, std::iter::once(r))).collect())
        }
        GroupUnit::Channels => {
            let producers: Vec<&LayerSpec> = g
                .members
                .iter()
                .filter(|m| m.axis == Axis::Out)
                .filter_map(|m| graph.layer(&m.layer))
                .filter(|l| matches!(l.kind, LayerKind::Conv2d | LayerKind::Dense))
                .collect();
            let primary = producers
                .iter()
                .find(|l| !l.is_depthwise())
                .or(producers.first())
                .ok_or_else(|| Error::Graph(format!("group {group} has no producer layer")))?;
            let param = if primary.kind == LayerKind::Conv2d { "kernel" } else { "weight" };
            let w = weights.param(&primary.name, param)?;
            Ok((0..size).map(|r| l1_rows(w, std::iter::once(r))).collect())
        }
    }
}

/// Kept indices for one group, sorted ascending. `l1norm` ranks by the l1
/// norm of the group's primary producer slice (first non-depthwise producer;
/// QKV rows of a head; FC1 row of a hidden unit), ties to the lower index.
pub fn select_channels(
    graph: &NetworkGraph,
    weights: &WeightStore,
    group: usize,
    kept: usize,
    strategy: SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let size = graph
        .group(group)
        .ok_or_else(|| Error::Bounds(format!("unknown group id {group}")))?
        .original_size;
    if kept == 0 || kept > size {
        return Err(Error::Bounds(format!("group {group}: keep {kept} of {size}")));
    }
    let scores = match strategy {
        SelectionStrategy::L1norm if kept < size => Some(group_scores(graph, weights, group, size)?),
        _ => None,
    };
    Ok(pick(scores, size, kept, rng))
}

/// Kept per-head dimensions of an attention layer, shared by every head and
/// by Q, K and V.
pub fn select_head_dims(
    layer: &LayerSpec,
    weights: &WeightStore,
    kept: usize,
    strategy: SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let dh = layer.head_dim()?;
    if kept == 0 || kept > dh {
        return Err(Error::Bounds(format!("`{}`: keep {kept} of {dh} head dims", layer.name)));
    }
    let scores = match strategy {
        SelectionStrategy::L1norm if kept < dh => {
            let heads = layer.head_count()?;
            let qkv = weights.param(&layer.name, "qkv_weight")?;
            Some(
                (0..dh)
                    .map(|j| l1_rows(qkv, (0..3 * heads).map(|ph| ph * dh + j)))
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(pick(scores, dh, kept, rng))
}

/// Decodes `genome` into a pruned graph with sliced weights. Selections are
/// drawn group by group in gene order.
pub fn decode(
    graph: &NetworkGraph,
    weights: &WeightStore,
    space: &SpaceSpec,
    genome: &Genome,
    strategy: SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<Subnetwork> {
    space.check(genome)?;
    let mut selection = ChannelSelection::default();
    for (gene, &v) in space.genes.iter().zip(&genome.0) {
        match gene.target {
            GeneTarget::Width => {
                let idx = select_channels(graph, weights, gene.group, v, strategy, rng)?;
                selection.groups.insert(gene.group, idx);
            }
            GeneTarget::HeadDim => {
                let layer = attention_layer(graph, gene.group)?;
                let idx = select_head_dims(layer, weights, v, strategy, rng)?;
                selection.head_dims.insert(layer.name.clone(), idx);
            }
        }
    }
    let sizes = selection.groups.iter().map(|(&g, idx)| (g, idx.len())).collect();
    let mut pruned = resize(graph, &sizes)?;
    for layer in &mut pruned.layers {
        if let Some(dims) = selection.head_dims.get(&layer.name) {
            let dh = layer.head_dim()?;
            if dims.len() < dh {
                layer.hyperparams.scale_dim.get_or_insert(dh);
                layer.hyperparams.head_dim = Some(dims.len());
            }
        }
    }
    let sliced = slice_weights(graph, weights, &selection)?;
    let flops = count_flops_full(&pruned)?;
    Ok(Subnetwork {
        graph: pruned,
        selection,
        weights: sliced,
        flops,
    })
}

/// Architecture `genome` decodes to, without touching weights.
pub fn pruned_graph(graph: &NetworkGraph, space: &SpaceSpec, genome: &Genome) -> Result<NetworkGraph> {
    space.check(genome)?;
    let mut pruned = resize(graph, &space.group_sizes(genome))?;
    for (gene, &v) in space.genes.iter().zip(&genome.0) {
        if gene.target != GeneTarget::HeadDim {
            continue;
        }
        let name = attention_layer(graph, gene.group)?.name.clone();
        let layer = pruned
            .layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Graph(format!("layer `{name}` vanished after resize")))?;
        let dh = layer.head_dim()?;
        if v < dh {
            layer.hyperparams.scale_dim.get_or_insert(dh);
            layer.hyperparams.head_dim = Some(v);
        }
    }
    Ok(pruned)
}

/// Slices every parameter of the original graph according to `selection`.
pub fn slice_weights(graph: &NetworkGraph, weights: &WeightStore, selection: &ChannelSelection) -> Result<WeightStore> {
    let membership = graph.membership();
    let mut out = WeightStore::new();
    for layer in &graph.layers {
        let Some(params) = weights.layer(&layer.name) else { continue };
        let sel = |axis: Axis| {
            membership
                .get(&(layer.name.clone(), axis))
                .and_then(|g| selection.groups.get(g))
                .map(Vec::as_slice)
        };
        let (out_sel, in_sel) = (sel(Axis::Out), sel(Axis::In));
        for (name, t) in params {
            let sliced = slice_param(layer, name, t, out_sel, in_sel, selection.head_dims.get(&layer.name))
                .map_err(|e| e.in_layer(&layer.name))?;
            out.insert(&layer.name, name, sliced);
        }
    }
    Ok(out)
}

fn slice_param(
    layer: &LayerSpec,
    param: &str,
    t: &Tensor,
    out_sel: Option<&[usize]>,
    in_sel: Option<&[usize]>,
    head_dims: Option<&Vec<usize>>,
) -> Result<Tensor> {
    let mut t = t.clone();
    match (layer.kind, param) {
        (LayerKind::Conv2d, "kernel") if layer.is_depthwise() => {
            if let Some(s) = out_sel.or(in_sel) {
                t = t.select(0, s)?;
            }
        }
        (LayerKind::Conv2d, "kernel") | (LayerKind::Dense | LayerKind::Classifier, "weight") => {
            if let Some(s) = out_sel {
                t = t.select(0, s)?;
            }
            if let Some(s) = in_sel {
                t = t.select(1, s)?;
            }
        }
        (LayerKind::Conv2d | LayerKind::Dense | LayerKind::Batchnorm, _) => {
            if let Some(s) = out_sel.or(in_sel) {
                t = t.select(0, s)?;
            }
        }
        (LayerKind::Attention, _) => {
            let heads = layer.head_count()?;
            let dh = layer.head_dim()?;
            let all_heads: Vec<usize> = (0..heads).collect();
            let all_dims: Vec<usize> = (0..dh).collect();
            let hs = out_sel.unwrap_or(&all_heads);
            let ds = head_dims.map_or(all_dims.as_slice(), Vec::as_slice);
            let inner: Vec<usize> = hs.iter().flat_map(|&h| ds.iter().map(move |&j| h * dh + j)).collect();
            match param {
                "qkv_weight" | "qkv_bias" => {
                    let rows: Vec<usize> = (0..3).flat_map(|p| inner.iter().map(move |&i| p * heads * dh + i)).collect();
                    t = t.select(0, &rows)?;
                }
                "proj_weight" => t = t.select(1, &inner)?,
                _ => {}
            }
        }
        (LayerKind::MlpBlock, _) => {
            if let Some(s) = out_sel {
                match param {
                    "fc1_weight" | "fc1_bias" => t = t.select(0, s)?,
                    "fc2_weight" => t = t.select(1, s)?,
                    _ => {}
                }
            }
        }
        _ => {}
    }
    Ok(t)
}
