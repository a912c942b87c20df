use std::collections::HashMap;

use super::{Axis, DependencyGroup, GroupMember, Hyperparams, LayerKind, LayerSpec, NetworkGraph, INPUT};

/// Incremental graph construction that derives dependency groups from the
/// channel flow: every convolution / dense output opens a group, consumers
/// join their producer's group, and `add` merges the groups it joins.
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerSpec>,
    groups: Vec<Option<(Vec<GroupMember>, usize)>>,
    flow: HashMap<String, Option<usize>>,
    channels: HashMap<String, usize>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize], class_count: usize) -> Self {
        let mut flow = HashMap::new();
        flow.insert(INPUT.to_string(), None);
        let mut channels = HashMap::new();
        channels.insert(INPUT.to_string(), input_shape[0]);
        if input_shape.len() == 2 {
            channels.insert(INPUT.to_string(), input_shape[1]);
        }
        Self {
            input_shape: input_shape.to_vec(),
            class_count,
            layers: Vec::new(),
            groups: Vec::new(),
            flow,
            channels,
        }
    }

    pub fn channels(&self, tensor: &str) -> usize {
        self.channels[tensor]
    }

    fn push(&mut self, name: &str, kind: LayerKind, hp: Hyperparams, inputs: &[&str], group: Option<usize>, ch: usize) -> String {
        assert!(!self.flow.contains_key(name), "duplicate layer name {name}");
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            hyperparams: hp,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        self.flow.insert(name.to_string(), group);
        self.channels.insert(name.to_string(), ch);
        name.to_string()
    }

    fn new_group(&mut self, size: usize) -> usize {
        self.groups.push(Some((Vec::new(), size)));
        self.groups.len() - 1
    }

    fn join(&mut self, group: Option<usize>, layer: &str, axis: Axis) {
        if let Some(g) = group {
            self.groups[g].as_mut().expect("merged group").0.push(GroupMember {
                layer: layer.to_string(),
                axis,
            });
        }
    }

    pub fn conv(&mut self, name: &str, input: &str, out: usize, kernel: usize, stride: usize, padding: usize) -> String {
        let cin = self.channels[input];
        let g_in = self.flow[input];
        let g = self.new_group(out);
        let hp = Hyperparams {
            in_channels: Some(cin),
            out_channels: Some(out),
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Conv2d, hp, &[input], Some(g), out);
        self.join(Some(g), name, Axis::Out);
        self.join(g_in, name, Axis::In);
        n
    }

    pub fn depthwise(&mut self, name: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> String {
        let c = self.channels[input];
        let g_in = self.flow[input];
        let hp = Hyperparams {
            in_channels: Some(c),
            out_channels: Some(c),
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            groups: Some(c),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Conv2d, hp, &[input], g_in, c);
        self.join(g_in, name, Axis::In);
        self.join(g_in, name, Axis::Out);
        n
    }

    pub fn batchnorm(&mut self, name: &str, input: &str) -> String {
        let c = self.channels[input];
        let g = self.flow[input];
        let hp = Hyperparams {
            features: Some(c),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Batchnorm, hp, &[input], g, c);
        self.join(g, name, Axis::Out);
        n
    }

    fn passthrough(&mut self, name: &str, kind: LayerKind, input: &str, hp: Hyperparams) -> String {
        let c = self.channels[input];
        let g = self.flow[input];
        self.push(name, kind, hp, &[input], g, c)
    }

    pub fn relu(&mut self, name: &str, input: &str) -> String {
        self.passthrough(name, LayerKind::Relu, input, Hyperparams::default())
    }

    pub fn gelu(&mut self, name: &str, input: &str) -> String {
        self.passthrough(name, LayerKind::Gelu, input, Hyperparams::default())
    }

    pub fn max_pool(&mut self, name: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> String {
        let hp = Hyperparams {
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Default::default()
        };
        self.passthrough(name, LayerKind::MaxPool, input, hp)
    }

    pub fn global_pool(&mut self, name: &str, input: &str, cls_token: bool) -> String {
        let hp = Hyperparams {
            cls_token: cls_token.then_some(1),
            ..Default::default()
        };
        self.passthrough(name, LayerKind::GlobalPool, input, hp)
    }

    /// Residual sum; merges the dependency groups of all inputs.
    pub fn add(&mut self, name: &str, inputs: &[&str]) -> String {
        let c = self.channels[inputs[0]];
        let mut target = self.flow[inputs[0]];
        for other in &inputs[1..] {
            let g = self.flow[*other];
            match (target, g) {
                (Some(a), Some(b)) if a != b => {
                    let (keep, gone) = (a.min(b), a.max(b));
                    let (members, _) = self.groups[gone].take().expect("merged group");
                    self.groups[keep].as_mut().unwrap().0.extend(members);
                    for v in self.flow.values_mut() {
                        if *v == Some(gone) {
                            *v = Some(keep);
                        }
                    }
                    target = Some(keep);
                }
                (None, Some(b)) => target = Some(b),
                _ => {}
            }
        }
        self.push(name, LayerKind::Add, Hyperparams::default(), inputs, target, c)
    }

    pub fn dense(&mut self, name: &str, input: &str, out: usize) -> String {
        let fin = self.channels[input];
        let g_in = self.flow[input];
        let g = self.new_group(out);
        let hp = Hyperparams {
            in_features: Some(fin),
            out_features: Some(out),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Dense, hp, &[input], Some(g), out);
        self.join(Some(g), name, Axis::Out);
        self.join(g_in, name, Axis::In);
        n
    }

    pub fn classifier(&mut self, name: &str, input: &str) -> String {
        let fin = self.channels[input];
        let g_in = self.flow[input];
        let hp = Hyperparams {
            in_features: Some(fin),
            out_features: Some(self.class_count),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Classifier, hp, &[input], None, self.class_count);
        self.join(g_in, name, Axis::In);
        n
    }

    pub fn patch_embed(&mut self, name: &str, input: &str, embed_dim: usize, patch: usize) -> String {
        let hp = Hyperparams {
            in_channels: Some(self.channels[input]),
            embed_dim: Some(embed_dim),
            patch: Some(patch),
            ..Default::default()
        };
        self.push(name, LayerKind::PatchEmbed, hp, &[input], None, embed_dim)
    }

    pub fn layernorm(&mut self, name: &str, input: &str) -> String {
        let hp = Hyperparams {
            features: Some(self.channels[input]),
            ..Default::default()
        };
        let c = self.channels[input];
        self.push(name, LayerKind::Layernorm, hp, &[input], None, c)
    }

    pub fn attention(&mut self, name: &str, input: &str, head_count: usize, head_dim: usize) -> String {
        let d = self.channels[input];
        let g = self.new_group(head_count);
        let hp = Hyperparams {
            embed_dim: Some(d),
            head_count: Some(head_count),
            head_dim: Some(head_dim),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::Attention, hp, &[input], None, d);
        self.join(Some(g), name, Axis::Out);
        n
    }

    pub fn mlp(&mut self, name: &str, input: &str, hidden: usize) -> String {
        let d = self.channels[input];
        let g = self.new_group(hidden);
        let hp = Hyperparams {
            embed_dim: Some(d),
            hidden_dim: Some(hidden),
            ..Default::default()
        };
        let n = self.push(name, LayerKind::MlpBlock, hp, &[input], None, d);
        self.join(Some(g), name, Axis::Out);
        n
    }

    pub fn finish(self) -> NetworkGraph {
        let groups = self
            .groups
            .into_iter()
            .flatten()
            .filter(|(members, _)| !members.is_empty())
            .enumerate()
            .map(|(id, (members, original_size))| DependencyGroup {
                id,
                members,
                original_size,
            })
            .collect();
        NetworkGraph {
            layers: self.layers,
            groups,
            input_shape: self.input_shape,
            class_count: self.class_count,
        }
    }
}
