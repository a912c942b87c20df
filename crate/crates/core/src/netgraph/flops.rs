//! Multiply-accumulate counting. One MAC is reported as one FLOP; bias
//! adds, activations and normalisations are not counted.

use super::{ActShape, Axis, GroupSizes, LayerKind, LayerSpec, NetworkGraph, INPUT};
use crate::error::{Error, Result};

/// Copy of `graph` with every dependency group shrunk to the size given in
/// `sizes`; groups absent from `sizes` stay at full width. Attention groups
/// count heads, MLP groups count hidden units.
pub fn resize(graph: &NetworkGraph, sizes: &GroupSizes) -> Result<NetworkGraph> {
    let mut out = graph.clone();
    for group in &mut out.groups {
        let Some(&kept) = sizes.get(&group.id) else { continue };
        if kept == 0 || kept > group.original_size {
            return Err(Error::Bounds(format!(
                "group {} keeps {kept} of {} channels",
                group.id, group.original_size
            )));
        }
        group.original_size = kept;
    }
    for &id in sizes.keys() {
        if graph.group(id).is_none() {
            return Err(Error::Bounds(format!("unknown group id {id}")));
        }
    }
    let membership = graph.membership();
    for layer in &mut out.layers {
        for axis in [Axis::Out, Axis::In] {
            let Some(&gid) = membership.get(&(layer.name.clone(), axis)) else { continue };
            let Some(&kept) = sizes.get(&gid) else { continue };
            apply_width(layer, axis, kept);
        }
    }
    Ok(out)
}

fn apply_width(layer: &mut LayerSpec, axis: Axis, kept: usize) {
    let depthwise = layer.is_depthwise();
    let hp = &mut layer.hyperparams;
    match (layer.kind, axis) {
        (LayerKind::Conv2d, _) if depthwise => {
            hp.in_channels = Some(kept);
            hp.out_channels = Some(kept);
            hp.groups = Some(kept);
        }
        (LayerKind::Conv2d, Axis::Out) => hp.out_channels = Some(kept),
        (LayerKind::Conv2d, Axis::In) => hp.in_channels = Some(kept),
        (LayerKind::Dense, Axis::Out) => hp.out_features = Some(kept),
        (LayerKind::Dense | LayerKind::Classifier, Axis::In) => hp.in_features = Some(kept),
        (LayerKind::Batchnorm, _) => hp.features = Some(kept),
        (LayerKind::Attention, Axis::Out) => hp.head_count = Some(kept),
        (LayerKind::MlpBlock, Axis::Out) => hp.hidden_dim = Some(kept),
        _ => {}
    }
}

/// MACs of one layer given its input and output activation shapes.
pub fn layer_flops(layer: &LayerSpec, input: ActShape, output: ActShape) -> Result<u64> {
    let u = |v: usize| v as u64;
    Ok(match layer.kind {
        LayerKind::Conv2d => {
            let ActShape::Spatial { c: cout, h, w } = output else { return Ok(0) };
            let k = u(layer.kernel()?);
            u(cout) * u(layer.in_channels()? / layer.conv_groups().max(1)) * k * k * u(h) * u(w)
        }
        LayerKind::Dense | LayerKind::Classifier => {
            let rows = match input {
                ActShape::Tokens { t, .. } => t,
                _ => 1,
            };
            u(rows) * u(layer.in_features()?) * u(layer.out_features()?)
        }
        LayerKind::Attention => {
            let ActShape::Tokens { t, d } = input else { return Ok(0) };
            let (heads, hd) = (u(layer.head_count()?), u(layer.head_dim()?));
            let (t, d) = (u(t), u(d));
            let inner = heads * hd;
            // qkv projection + scores + weighted sum + output projection
            t * d * 3 * inner + 2 * heads * t * t * hd + t * inner * d
        }
        LayerKind::MlpBlock => {
            let rows = match input {
                ActShape::Tokens { t, .. } => t,
                _ => 1,
            };
            2 * u(rows) * u(layer.embed_dim()?) * u(layer.hidden_dim()?)
        }
        LayerKind::PatchEmbed => {
            let ActShape::Tokens { t, d } = output else { return Ok(0) };
            let p = u(layer.patch()?);
            u(t - 1) * u(d) * u(layer.in_channels()?) * p * p
        }
        _ => 0,
    })
}

/// Total MACs of `graph` at its own widths.
pub fn count_flops_full(graph: &NetworkGraph) -> Result<u64> {
    let shapes = graph.infer_shapes()?;
    let input = ActShape::from_input(&graph.input_shape)?;
    let index = graph.layer_index();
    let mut total = 0u64;
    for (i, layer) in graph.layers.iter().enumerate() {
        let in_shape = match layer.inputs.first().map(String::as_str) {
            Some(INPUT) | None => input,
            Some(name) => shapes[index[name]],
        };
        total += layer_flops(layer, in_shape, shapes[i])?;
    }
    Ok(total)
}

/// MACs of `graph` with groups shrunk to `sizes`.
pub fn count_flops(graph: &NetworkGraph, sizes: &GroupSizes) -> Result<u64> {
    count_flops_full(&resize(graph, sizes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{models, GraphBuilder};

    #[test]
    fn single_dense_layer() {
        let mut b = GraphBuilder::new(&[10], 10);
        b.classifier("fc", INPUT);
        assert_eq!(count_flops_full(&b.finish()).unwrap(), 100);
    }

    #[test]
    fn out_of_range_sizes_rejected() {
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let mut sizes = GroupSizes::new();
        sizes.insert(0, 0);
        assert!(matches!(count_flops(&g, &sizes), Err(Error::Bounds(_))));
        sizes.insert(0, g.groups[0].original_size + 1);
        assert!(matches!(count_flops(&g, &sizes), Err(Error::Bounds(_))));
    }

    #[test]
    fn toy_cnn_hand_count() {
        // 3×8×8 input, widths [8,16,16,32]
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let want = 8 * 3 * 9 * 64 // conv0
            + 16 * 8 * 9 * 16     // conv1, stride 2
            + 16 * 16 * 9 * 16    // conv2
            + 16 * 16 * 9 * 16    // conv3
            + 32 * 16 * 9 * 4     // conv4, stride 2
            + 32 * 4; // classifier
        assert_eq!(count_flops_full(&g).unwrap(), want);
    }
}
