use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{layer_output_shape, param_shapes, ActShape, Axis, LayerKind, LayerSpec, NetworkGraph, WeightStore, INPUT};

/// One violated invariant, naming the offending layer or group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    fn new(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Checks graph structure, dependency groups and weight shapes. An empty
/// result means the pair is usable.
pub fn validate(graph: &NetworkGraph, weights: &WeightStore) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let shapes = check_structure(graph, &mut diags);
    check_groups(graph, &shapes, &mut diags);
    check_weights(graph, weights, &shapes, &mut diags);
    diags
}

/// Structural and group checks only, for specs without weights.
pub fn validate_graph(graph: &NetworkGraph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let shapes = check_structure(graph, &mut diags);
    check_groups(graph, &shapes, &mut diags);
    diags
}

fn check_structure(graph: &NetworkGraph, diags: &mut Vec<Diagnostic>) -> Vec<Option<ActShape>> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut shapes: Vec<Option<ActShape>> = Vec::with_capacity(graph.layers.len());
    let input = match ActShape::from_input(&graph.input_shape) {
        Ok(s) => Some(s),
        Err(e) => {
            diags.push(Diagnostic::new("input", e.to_string()));
            None
        }
    };
    if graph.class_count == 0 {
        diags.push(Diagnostic::new("graph", "class_count must be positive"));
    }
    let mut consumed: HashSet<&str> = HashSet::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        if layer.name == INPUT || seen.contains_key(layer.name.as_str()) {
            diags.push(Diagnostic::new(&layer.name, "duplicate or reserved layer name"));
        }
        let mut ins = Vec::new();
        let mut known = true;
        for src in &layer.inputs {
            consumed.insert(src.as_str());
            if src == INPUT {
                ins.push(input);
            } else if let Some(&j) = seen.get(src.as_str()) {
                ins.push(shapes[j]);
            } else {
                diags.push(Diagnostic::new(
                    &layer.name,
                    format!("input `{src}` is not an earlier layer (graph must be acyclic and topologically ordered)"),
                ));
                known = false;
            }
        }
        if layer.inputs.is_empty() {
            diags.push(Diagnostic::new(&layer.name, "layer has no inputs"));
            known = false;
        }
        let shape = if known && ins.iter().all(Option::is_some) {
            let ins: Vec<ActShape> = ins.into_iter().flatten().collect();
            match layer_output_shape(layer, &ins) {
                Ok(s) => Some(s),
                Err(e) => {
                    diags.push(Diagnostic::new(&layer.name, e.to_string()));
                    None
                }
            }
        } else {
            None
        };
        shapes.push(shape);
        seen.entry(layer.name.as_str()).or_insert(i);
    }
    let sinks: Vec<&LayerSpec> = graph
        .layers
        .iter()
        .filter(|l| !consumed.contains(l.name.as_str()))
        .collect();
    match sinks.as_slice() {
        [] => diags.push(Diagnostic::new("graph", "no output layer")),
        [only] => {
            if graph.layers.last().map(|l| &l.name) != Some(&only.name) {
                diags.push(Diagnostic::new(&only.name, "output layer must come last"));
            }
        }
        many => diags.push(Diagnostic::new(
            "graph",
            format!(
                "multiple output layers: {}",
                many.iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
    if let Some(Some(last)) = shapes.last() {
        if *last != (ActShape::Flat { f: graph.class_count }) {
            diags.push(Diagnostic::new(
                &graph.layers.last().unwrap().name,
                format!("output shape {:?} does not match class_count {}", last.dims(), graph.class_count),
            ));
        }
    }
    shapes
}

/// Size of `layer` along a group axis, or `None` if the axis is not prunable.
pub(crate) fn axis_size(layer: &LayerSpec, axis: Axis) -> Option<usize> {
    let hp = &layer.hyperparams;
    match (layer.kind, axis) {
        (LayerKind::Conv2d, Axis::Out) => hp.out_channels,
        (LayerKind::Conv2d, Axis::In) => hp.in_channels,
        (LayerKind::Dense, Axis::Out) => hp.out_features,
        (LayerKind::Dense | LayerKind::Classifier, Axis::In) => hp.in_features,
        (LayerKind::Batchnorm, Axis::Out) => hp.features,
        (LayerKind::Attention, Axis::Out) => hp.head_count,
        (LayerKind::MlpBlock, Axis::Out) => hp.hidden_dim,
        _ => None,
    }
}

fn check_groups(graph: &NetworkGraph, shapes: &[Option<ActShape>], diags: &mut Vec<Diagnostic>) {
    let index = graph.layer_index();
    let mut ids = HashSet::new();
    let mut owner: HashMap<(String, Axis), usize> = HashMap::new();
    for g in &graph.groups {
        let subject = format!("group {}", g.id);
        if !ids.insert(g.id) {
            diags.push(Diagnostic::new(&subject, "duplicate group id"));
        }
        if g.original_size == 0 {
            diags.push(Diagnostic::new(&subject, "original_size must be positive"));
        }
        if g.members.is_empty() {
            diags.push(Diagnostic::new(&subject, "group has no members"));
        }
        for m in &g.members {
            let Some(&li) = index.get(m.layer.as_str()) else {
                diags.push(Diagnostic::new(&subject, format!("unknown member layer `{}`", m.layer)));
                continue;
            };
            let layer = &graph.layers[li];
            match axis_size(layer, m.axis) {
                None => diags.push(Diagnostic::new(
                    &subject,
                    format!("layer `{}` ({:?}) has no prunable {:?} axis", m.layer, layer.kind, m.axis),
                )),
                Some(sz) if sz != g.original_size => diags.push(Diagnostic::new(
                    &subject,
                    format!(
                        "member `{}` {:?} has size {sz}, group original_size is {}",
                        m.layer, m.axis, g.original_size
                    ),
                )),
                _ => {}
            }
            if let Some(prev) = owner.insert((m.layer.clone(), m.axis), g.id) {
                diags.push(Diagnostic::new(
                    &subject,
                    format!("`{}` {:?} already belongs to group {prev}", m.layer, m.axis),
                ));
            }
        }
    }

    let flow = graph.channel_flow();
    let member = |name: &str, axis: Axis| owner.get(&(name.to_string(), axis)).copied();
    for (i, layer) in graph.layers.iter().enumerate() {
        if shapes.get(i).copied().flatten().is_none() {
            continue;
        }
        let input_flow: Vec<Option<usize>> = layer
            .inputs
            .iter()
            .map(|s| {
                if s == INPUT {
                    None
                } else {
                    index.get(s.as_str()).and_then(|&j| flow[j])
                }
            })
            .collect();
        let gin = input_flow.first().copied().flatten();
        let expect = |diags: &mut Vec<Diagnostic>, axis: Axis, want: Option<usize>| {
            let got = member(&layer.name, axis);
            if got != want {
                diags.push(Diagnostic::new(
                    &layer.name,
                    format!("{axis:?} axis belongs to group {got:?}, but its channel flow requires {want:?}"),
                ));
            }
        };
        match layer.kind {
            LayerKind::Conv2d if layer.is_depthwise() => {
                expect(diags, Axis::In, gin);
                expect(diags, Axis::Out, gin);
            }
            LayerKind::Conv2d if layer.conv_groups() > 1 => {
                if gin.is_some() || member(&layer.name, Axis::Out).is_some() {
                    diags.push(Diagnostic::new(&layer.name, "grouped (non-depthwise) convolutions cannot be pruned"));
                }
            }
            LayerKind::Conv2d | LayerKind::Dense => expect(diags, Axis::In, gin),
            LayerKind::Classifier => {
                expect(diags, Axis::In, gin);
                if member(&layer.name, Axis::Out).is_some() {
                    diags.push(Diagnostic::new(&layer.name, "classifier outputs cannot be pruned"));
                }
            }
            LayerKind::Batchnorm => expect(diags, Axis::Out, gin),
            LayerKind::Add => {
                if input_flow.iter().any(|g| *g != input_flow[0]) {
                    diags.push(Diagnostic::new(
                        &layer.name,
                        format!("add joins tensors from different dependency groups {input_flow:?}"),
                    ));
                }
            }
            LayerKind::Layernorm | LayerKind::Attention | LayerKind::MlpBlock | LayerKind::PatchEmbed
                if gin.is_some() => {
                    diags.push(Diagnostic::new(&layer.name, "embedding width is fixed but its input is prunable"));
                }
            _ => {}
        }
    }
}

fn check_weights(graph: &NetworkGraph, weights: &WeightStore, shapes: &[Option<ActShape>], diags: &mut Vec<Diagnostic>) {
    let index = graph.layer_index();
    let input = ActShape::from_input(&graph.input_shape).ok();
    for layer in &graph.layers {
        if !layer.kind.has_params() {
            continue;
        }
        let in_shape = match layer.inputs.first() {
            Some(s) if s == INPUT => input,
            Some(s) => index.get(s.as_str()).and_then(|&j| shapes[j]),
            None => None,
        };
        let Some(in_shape) = in_shape else { continue };
        let Ok(expected) = param_shapes(layer, in_shape) else { continue };
        for (param, shape) in &expected {
            match weights.get(&layer.name, param) {
                None => diags.push(Diagnostic::new(&layer.name, format!("missing weight `{param}`"))),
                Some(t) if t.shape() != shape.as_slice() => diags.push(Diagnostic::new(
                    &layer.name,
                    format!("shape mismatch for `{param}`: stored {:?}, expected {:?}", t.shape(), shape),
                )),
                _ => {}
            }
        }
        if let Some(stored) = weights.layer(&layer.name) {
            for name in stored.keys() {
                if !expected.iter().any(|(p, _)| p == name) {
                    diags.push(Diagnostic::new(&layer.name, format!("unexpected weight `{name}`")));
                }
            }
        }
    }
    for name in weights.layer_names() {
        if graph.layer(name).is_none() {
            diags.push(Diagnostic::new(name, "weights stored for a layer that is not in the graph"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::models;
    use crate::netgraph::GraphBuilder;
    use crate::tensor::RngStream;

    #[test]
    fn two_layer_mlp_is_clean() {
        let mut b = GraphBuilder::new(&[6], 3);
        let h = b.dense("fc1", INPUT, 5);
        let r = b.relu("act", &h);
        b.classifier("head", &r);
        let g = b.finish();
        let w = models::init_weights(&g, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(validate(&g, &w), vec![]);
    }

    #[test]
    fn add_with_mismatched_channels_is_reported() {
        let mut b = GraphBuilder::new(&[3, 4, 4], 2);
        let a = b.conv("a", INPUT, 4, 3, 1, 1);
        let c = b.conv("c", INPUT, 5, 3, 1, 1);
        b.add("join", &[&a, &c]);
        let mut g = b.finish();
        // give the graph a valid tail so only the add is at fault
        g.layers.push(LayerSpec {
            name: "pool".into(),
            kind: LayerKind::GlobalPool,
            hyperparams: Default::default(),
            inputs: vec!["join".into()],
        });
        let diags = validate_graph(&g);
        assert!(diags.iter().any(|d| d.subject == "join"), "{diags:?}");
    }

    #[test]
    fn swapped_kernel_is_a_shape_mismatch() {
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let mut w = models::init_weights(&g, &mut RngStream::new(1, 0)).unwrap();
        let k = w.get("conv1", "kernel").unwrap().clone();
        let (o, i, kh, kw) = k.dims4().unwrap();
        w.insert("conv1", "kernel", k.reshape(&[i, o, kh, kw]).unwrap());
        let diags = validate(&g, &w);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].subject, "conv1");
        assert!(diags[0].message.contains("shape mismatch"));
    }

    #[test]
    fn group_size_and_flow_violations() {
        let mut g = models::toy_cnn(&models::ToyCnnConfig::default());
        g.groups[0].original_size += 1;
        assert!(validate_graph(&g).iter().any(|d| d.subject == "group 0"));

        let mut g = models::toy_cnn(&models::ToyCnnConfig::default());
        // drop a consumer's in-axis from its producer's group
        let pos = g.groups[1].members.iter().position(|m| m.axis == Axis::In).unwrap();
        let removed = g.groups[1].members.remove(pos);
        assert!(validate_graph(&g).iter().any(|d| d.subject == removed.layer));
    }

    #[test]
    fn builtin_generators_validate() {
        for g in [
            models::resnet50(),
            models::mobilenet_v1(),
            models::deit_base(),
            models::toy_cnn(&models::ToyCnnConfig::default()),
            models::toy_transformer(&models::VitConfig::toy()),
        ] {
            assert_eq!(validate_graph(&g), vec![]);
        }
    }
}
