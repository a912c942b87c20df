//! Closed-form fitting of a randomly initialised network to a dataset:
//! batch-norm statistics from data, then a least-squares linear readout.

use evoprune_core::netgraph::{forward_collect, models, LayerKind};
use evoprune_core::tensor::least_squares_solve;
use evoprune_core::{Error, NetworkGraph, Result, RngStream, Tensor, WeightStore};

use crate::data::Dataset;

const STREAM_INIT: u64 = 0x1417;

/// Most samples used for batch-norm statistics.
const STAT_SAMPLES: usize = 1024;

/// Random weights with batch-norm layers calibrated on `data` and the
/// classifier solved by least squares against one-hot labels.
pub fn fit_weights(graph: &NetworkGraph, data: &Dataset, seed: u64) -> Result<WeightStore> {
    let mut weights = models::init_weights(graph, &mut RngStream::new(seed, STREAM_INIT))?;
    if data.is_empty() {
        return Err(Error::Config("no training samples left to fit the model".into()));
    }
    let stats = data.inputs.slice_outer(0, data.len().min(STAT_SAMPLES))?;
    calibrate_batchnorm(graph, &mut weights, &stats)?;
    fit_classifier(graph, &mut weights, data)?;
    Ok(weights)
}

/// Sets each batch-norm layer's running mean and variance to the statistics
/// of its input on `inputs`, in layer order so later layers see normalised
/// activations.
pub fn calibrate_batchnorm(graph: &NetworkGraph, weights: &mut WeightStore, inputs: &Tensor) -> Result<()> {
    for layer in graph.layers.iter().filter(|l| l.kind == LayerKind::Batchnorm) {
        let outs = forward_collect(graph, weights, inputs)?;
        let src = &layer.inputs[0];
        let x = outs
            .get(graph, src)
            .ok_or_else(|| Error::Graph(format!("batch-norm input `{src}` is not a layer")))?;
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let m = (n * hw) as f64;
        let mean: Vec<f32> = mean.iter().map(|s| (s / m) as f32).collect();
        let var: Vec<f32> = sq
            .iter()
            .zip(&mean)
            .map(|(s, &mu)| ((s / m) - (mu as f64).powi(2)).max(1e-6) as f32)
            .collect();
        weights.insert(&layer.name, "mean", Tensor::new(vec![c], mean)?);
        weights.insert(&layer.name, "var", Tensor::new(vec![c], var)?);
    }
    Ok(())
}

/// Least-squares readout from the classifier's input features to one-hot
/// targets.
pub fn fit_classifier(graph: &NetworkGraph, weights: &mut WeightStore, data: &Dataset) -> Result<()> {
    let head = graph
        .output_layer()
        .filter(|l| l.kind == LayerKind::Classifier)
        .ok_or_else(|| Error::Graph("the last layer is not a classifier".into()))?;
    let outs = forward_collect(graph, weights, &data.inputs)?;
    let feats = outs
        .get(graph, &head.inputs[0])
        .ok_or_else(|| Error::Graph(format!("classifier input `{}` is not a layer", head.inputs[0])))?;
    let classes = head.out_features()?;
    let targets = Tensor::from_fn(&[data.len(), classes], |i| {
        if data.labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    });
    let w = least_squares_solve(feats, &targets)?;
    weights.insert(&head.name, "weight", w.transpose2()?);
    if head.has_bias() {
        weights.insert(&head.name, "bias", Tensor::zeros(&[classes]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use evoprune_core::netgraph::proxy_accuracy;

    #[test]
    fn fitted_toy_cnn_beats_chance() {
        let g = models::builtin("toy-cnn").unwrap();
        let data = synthetic(&SyntheticSpec {
            classes: 4,
            dims: vec![3, 8, 8],
            samples: 1200,
            seed: 2,
            noise: 1.0,
        })
        .unwrap();
        let train = data.subset(&(0..1000).collect::<Vec<_>>()).unwrap();
        let test = data.subset(&(1000..1200).collect::<Vec<_>>()).unwrap();
        let w = fit_weights(&g, &train, 0).unwrap();
        let acc = proxy_accuracy(&g, &w, &test.inputs, &test.labels, 256).unwrap();
        assert!(acc > 0.5, "{acc}");
    }

    #[test]
    fn batchnorm_outputs_are_standardised() {
        let g = models::builtin("toy-cnn").unwrap();
        let x = Tensor::from_fn(&[64, 3, 8, 8], |i| ((i * 7919) % 97) as f32 / 10.0);
        let mut w = models::init_weights(&g, &mut RngStream::new(1, 1)).unwrap();
        calibrate_batchnorm(&g, &mut w, &x).unwrap();
        let outs = forward_collect(&g, &w, &x).unwrap();
        let y = outs.get(&g, "bn2").unwrap();
        let (n, c, h, ww) = y.dims4().unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| y.data()[(b * c + ch) * h * ww..(b * c + ch + 1) * h * ww].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-3, "{mean}");
            assert!((var - 1.0).abs() < 1e-2, "{var}");
        }
    }
}
