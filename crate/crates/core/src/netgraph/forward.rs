use super::{LayerKind, LayerSpec, NetworkGraph, WeightStore, INPUT};
use crate::error::{Error, Result};
use crate::tensor::{
    argmax_classify, attention_forward_scaled, batchnorm_inference_forward, conv2d_grouped, dense_forward, gelu,
    global_average_pool, layernorm_forward, relu, Tensor,
};

/// Every layer's output for one batch, indexed like `graph.layers`.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    pub outputs: Vec<Tensor>,
}

impl LayerOutputs {
    pub fn get(&self, graph: &NetworkGraph, name: &str) -> Option<&Tensor> {
        graph.layers.iter().position(|l| l.name == name).map(|i| &self.outputs[i])
    }
}

fn check_batch(graph: &NetworkGraph, batch: &Tensor) -> Result<()> {
    if batch.rank() != graph.input_shape.len() + 1 || batch.shape()[1..] != graph.input_shape[..] {
        return Err(Error::Dimension(format!(
            "batch {:?} does not match input shape {:?}",
            batch.shape(),
            graph.input_shape
        )));
    }
    Ok(())
}

/// Logits `[N × class_count]`.
pub fn forward(graph: &NetworkGraph, weights: &WeightStore, batch: &Tensor) -> Result<Tensor> {
    check_batch(graph, batch)?;
    let index = graph.layer_index();
    let mut last_use = vec![0usize; graph.layers.len()];
    for (i, layer) in graph.layers.iter().enumerate() {
        for src in &layer.inputs {
            if let Some(&j) = index.get(src.as_str()) {
                last_use[j] = i;
            }
        }
    }
    let mut acts: Vec<Option<Tensor>> = vec![None; graph.layers.len()];
    for (i, layer) in graph.layers.iter().enumerate() {
        let out = {
            let ins = gather(layer, &index, &acts, batch)?;
            run_layer(layer, weights, &ins).map_err(|e| e.in_layer(&layer.name))?
        };
        for src in &layer.inputs {
            if let Some(&j) = index.get(src.as_str()) {
                if last_use[j] == i {
                    acts[j] = None;
                }
            }
        }
        acts[i] = Some(out);
    }
    acts.pop()
        .flatten()
        .ok_or_else(|| Error::Graph("graph has no layers".into()))
}

/// Forward pass keeping every intermediate output.
pub fn forward_collect(graph: &NetworkGraph, weights: &WeightStore, batch: &Tensor) -> Result<LayerOutputs> {
    check_batch(graph, batch)?;
    let index = graph.layer_index();
    let mut acts: Vec<Option<Tensor>> = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let out = {
            let ins = gather(layer, &index, &acts, batch)?;
            run_layer(layer, weights, &ins).map_err(|e| e.in_layer(&layer.name))?
        };
        acts.push(Some(out));
    }
    Ok(LayerOutputs {
        outputs: acts.into_iter().flatten().collect(),
    })
}

pub(crate) fn gather<'a>(
    layer: &LayerSpec,
    index: &std::collections::HashMap<&str, usize>,
    acts: &'a [Option<Tensor>],
    batch: &'a Tensor,
) -> Result<Vec<&'a Tensor>> {
    layer
        .inputs
        .iter()
        .map(|src| {
            if src == INPUT {
                Ok(batch)
            } else {
                index
                    .get(src.as_str())
                    .and_then(|&j| acts.get(j))
                    .and_then(Option::as_ref)
                    .ok_or_else(|| Error::Graph(format!("layer `{}`: input `{src}` not available", layer.name)))
            }
        })
        .collect()
}

/// Evaluates one layer on already-computed inputs.
pub(crate) fn run_layer(layer: &LayerSpec, weights: &WeightStore, ins: &[&Tensor]) -> Result<Tensor> {
    let w = |p: &str| weights.param(&layer.name, p);
    let opt = |p: &str| weights.get(&layer.name, p);
    let x = ins[0];
    match layer.kind {
        LayerKind::Conv2d => conv2d_grouped(
            x,
            w("kernel")?,
            if layer.has_bias() { Some(w("bias")?) } else { None },
            layer.stride(),
            layer.padding(),
            layer.conv_groups(),
        ),
        LayerKind::MaxPool => max_pool2d(x, layer.kernel()?, layer.stride(), layer.padding()),
        LayerKind::Dense | LayerKind::Classifier => dense_forward(x, w("weight")?, opt("bias")),
        LayerKind::Batchnorm => batchnorm_inference_forward(x, w("gamma")?, w("beta")?, w("mean")?, w("var")?),
        LayerKind::Relu => Ok(relu(x)),
        LayerKind::Gelu => Ok(gelu(x)),
        LayerKind::Layernorm => layernorm_forward(x, w("gamma")?, w("beta")?),
        LayerKind::Attention => attention_forward_scaled(
            x,
            w("qkv_weight")?,
            opt("qkv_bias"),
            w("proj_weight")?,
            opt("proj_bias"),
            layer.head_count()?,
            layer.head_dim()?,
            layer.attention_scale()?,
        ),
        LayerKind::MlpBlock => {
            let h = gelu(&dense_forward(x, w("fc1_weight")?, opt("fc1_bias"))?);
            dense_forward(&h, w("fc2_weight")?, opt("fc2_bias"))
        }
        LayerKind::Add => {
            let mut acc = x.clone();
            for other in &ins[1..] {
                acc = acc.add(other)?;
            }
            Ok(acc)
        }
        LayerKind::GlobalPool => match x.rank() {
            4 => global_average_pool(x),
            3 => {
                let (n, t, d) = x.dims3()?;
                if layer.hyperparams.cls_token == Some(1) {
                    let data = (0..n).flat_map(|b| x.data()[b * t * d..b * t * d + d].to_vec()).collect();
                    Tensor::new(vec![n, d], data)
                } else {
                    let mut data = vec![0.0f32; n * d];
                    for b in 0..n {
                        for j in 0..d {
                            let s: f64 = (0..t).map(|i| x.data()[(b * t + i) * d + j] as f64).sum();
                            data[b * d + j] = (s / t as f64) as f32;
                        }
                    }
                    Tensor::new(vec![n, d], data)
                }
            }
            _ => Err(Error::Dimension(format!("global-pool on {:?}", x.shape()))),
        },
        LayerKind::PatchEmbed => patch_embed(layer, weights, x),
    }
}

fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let oh = crate::tensor::conv_output_size(h, k, stride, padding)?;
    let ow = crate::tensor::conv_output_size(w, k, stride, padding)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for (p, plane) in x.data().chunks_exact(h * w).enumerate() {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - padding as isize;
                        let ix = (xo * stride + kx) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(plane[iy as usize * w + ix as usize]);
                        }
                    }
                }
                out[(p * oh + y) * ow + xo] = m;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn patch_embed(layer: &LayerSpec, weights: &WeightStore, x: &Tensor) -> Result<Tensor> {
    let p = layer.patch()?;
    let d = layer.embed_dim()?;
    let w = |name: &str| weights.param(&layer.name, name);
    let grid = conv2d_grouped(x, w("kernel")?, Some(w("bias")?), p, 0, 1)?;
    let (n, _, gh, gw) = grid.dims4()?;
    let patches = gh * gw;
    let t = patches + 1;
    let cls = w("cls_token")?;
    let pos = w("pos_embed")?;
    if pos.shape() != [t, d] {
        return Err(Error::Dimension(format!("pos_embed {:?} for {t} tokens of width {d}", pos.shape())));
    }
    let mut out = vec![0.0f32; n * t * d];
    let gd = grid.data();
    for b in 0..n {
        for j in 0..d {
            out[b * t * d + j] = cls.data()[j] + pos.data()[j];
        }
        for q in 0..patches {
            for j in 0..d {
                out[(b * t + q + 1) * d + j] = gd[(b * d + j) * patches + q] + pos.data()[(q + 1) * d + j];
            }
        }
    }
    Tensor::new(vec![n, t, d], out)
}

/// Top-1 accuracy of `graph` on `inputs`, evaluated in chunks of
/// `batch_size` samples. Rows are independent, so chunking does not change
/// the result.
pub fn proxy_accuracy(
    graph: &NetworkGraph,
    weights: &WeightStore,
    inputs: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let n = inputs.dim(0);
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let chunk = inputs.slice_outer(start, end)?;
        let logits = forward(graph, weights, &chunk)?;
        let pred = argmax_classify(&logits)?;
        correct += pred.iter().zip(&labels[start..end]).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{models, GraphBuilder};
    use crate::tensor::{conv2d_forward, RngStream};

    #[test]
    fn identity_dense_passes_input() {
        let mut b = GraphBuilder::new(&[3], 3);
        b.classifier("fc", INPUT);
        let g = b.finish();
        let mut w = WeightStore::new();
        w.insert("fc", "weight", Tensor::identity(3));
        w.insert("fc", "bias", Tensor::zeros(&[3]));
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5);
        assert_eq!(forward(&g, &w, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let mut w = models::init_weights(&g, &mut RngStream::new(0, 0)).unwrap();
        let names: Vec<(String, String)> = w.iter().map(|(l, p, _)| (l.to_string(), p.to_string())).collect();
        for (l, p) in names {
            if p == "var" {
                continue;
            }
            let shape = w.get(&l, &p).unwrap().shape().to_vec();
            w.insert(&l, &p, Tensor::zeros(&shape));
        }
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32);
        let y = forward(&g, &w, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// Two convolutions with a ReLU between them, stepped by hand through
    /// the kernels.
    #[test]
    fn two_conv_network_matches_manual_trace() {
        let mut b = GraphBuilder::new(&[2, 5, 5], 3);
        let c1 = b.conv("c1", INPUT, 4, 3, 1, 1);
        let r1 = b.relu("r1", &c1);
        let c2 = b.conv("c2", &r1, 3, 3, 2, 0);
        let p = b.global_pool("pool", &c2, false);
        b.classifier("fc", &p);
        let g = b.finish();
        let w = models::init_weights(&g, &mut RngStream::new(4, 0)).unwrap();
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 37) % 11) as f32 / 11.0 - 0.5);

        let h = relu(&conv2d_forward(&x, w.get("c1", "kernel").unwrap(), 1, 1).unwrap());
        let h = conv2d_forward(&h, w.get("c2", "kernel").unwrap(), 2, 0).unwrap();
        let h = global_average_pool(&h).unwrap();
        let want = dense_forward(&h, w.get("fc", "weight").unwrap(), w.get("fc", "bias")).unwrap();

        let got = forward(&g, &w, &x).unwrap();
        assert!(got.max_abs_diff(&want) == 0.0);
        let all = forward_collect(&g, &w, &x).unwrap();
        assert_eq!(all.outputs.last().unwrap(), &got);
    }

    #[test]
    fn bad_batch_shape() {
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let w = models::init_weights(&g, &mut RngStream::new(0, 0)).unwrap();
        assert!(matches!(forward(&g, &w, &Tensor::zeros(&[1, 3, 4, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn missing_weight_names_layer() {
        let g = models::toy_cnn(&models::ToyCnnConfig::default());
        let mut w = models::init_weights(&g, &mut RngStream::new(0, 0)).unwrap();
        w.remove_layer("bn2");
        let err = forward(&g, &w, &Tensor::zeros(&[1, 3, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::Layer { ref layer, .. } if layer == "bn2"), "{err}");
    }

    #[test]
    fn max_pool_hand_case() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let y = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
