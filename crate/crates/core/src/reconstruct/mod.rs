//! Layer-wise least-squares weight reconstruction of pruned subnetworks.
//!
//! Layers are visited in topological order. Each pruned layer's inputs come
//! from the partially reconstructed student; its targets are the original
//! network's outputs at the same layer, restricted to the kept outputs.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{forward_collect, gather, run_layer, Axis, LayerKind, LayerOutputs, LayerSpec, NetworkGraph, WeightStore};
use crate::prunespace::Subnetwork;
use crate::tensor::{attention_context, conv_output_size, dense_forward, gelu, least_squares_solve_detailed, Tensor};

pub const DEFAULT_PATCHES: usize = 10;
pub const DEFAULT_TOKENS: usize = 20;

/// Calibration images together with the original network's activations on
/// them, computed once and shared by every reconstruction.
pub struct CalibrationBatch {
    pub inputs: Tensor,
    /// Spatial positions sampled per image for convolutions.
    pub patches_per_image: usize,
    /// Tokens sampled per sequence, class token included.
    pub tokens: usize,
    teacher: LayerOutputs,
}

impl CalibrationBatch {
    pub fn new(
        graph: &NetworkGraph,
        weights: &WeightStore,
        inputs: Tensor,
        patches_per_image: usize,
        tokens: usize,
    ) -> Result<Self> {
        if patches_per_image == 0 || tokens == 0 {
            return Err(Error::Config("patches and tokens per sample must be at least 1".into()));
        }
        let teacher = forward_collect(graph, weights, &inputs)?;
        Ok(Self {
            inputs,
            patches_per_image,
            tokens,
            teacher,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub residual_before: f64,
    pub residual_after: f64,
    pub ridge_used: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub layers: Vec<LayerRecord>,
}

impl ReconstructionReport {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.layers {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn any_ridge(&self) -> bool {
        self.layers.iter().any(|r| r.ridge_used)
    }
}

/// `d` distinct output positions per image, each list sorted.
pub fn sample_positions(images: usize, positions: usize, d: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if d == 0 || d > positions {
        return Err(Error::Bounds(format!("cannot sample {d} of {positions} positions")));
    }
    Ok((0..images)
        .map(|_| {
            if d == positions {
                return (0..positions).collect();
            }
            let mut v = rand::seq::index::sample(rng, positions, d).into_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

fn gather_patches(
    feature: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: &[Vec<usize>],
) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    let ow = conv_output_size(w, kernel, stride, padding)?;
    let cols = c * kernel * kernel;
    let rows: usize = positions.iter().map(Vec::len).sum();
    let mut out = Tensor::zeros(&[rows, cols]);
    let dst = out.data_mut();
    let mut r = 0;
    for (b, pos) in positions.iter().enumerate().take(n) {
        for &p in pos {
            crate::tensor::im2col_row(
                feature.data(),
                (b, c, h, w),
                (kernel, kernel, stride, padding),
                p / ow,
                p % ow,
                &mut dst[r * cols..(r + 1) * cols],
            );
            r += 1;
        }
    }
    Ok(out)
}

/// Unrolls `d` random receptive fields per image into rows of
/// `[(N·d) × (C·K·K)]`, columns ordered channel-major like `im2col`.
pub fn sample_patches(
    feature: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (n, _, h, w) = feature.dims4()?;
    let total = conv_output_size(h, kernel, stride, padding)? * conv_output_size(w, kernel, stride, padding)?;
    let positions = sample_positions(n, total, d, rng)?;
    Ok((gather_patches(feature, kernel, stride, padding, &positions)?, positions))
}

/// `[N×C×H×W]` output values at sampled positions, restricted to `channels`.
fn gather_outputs(t: &Tensor, positions: &[Vec<usize>], channels: &[usize]) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    let rows: usize = positions.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(rows * channels.len());
    for (b, pos) in positions.iter().enumerate() {
        for &p in pos {
            for &ch in channels {
                out.push(t.data()[(b * c + ch) * h * w + p]);
            }
        }
    }
    Tensor::new(vec![rows, channels.len()], out)
}

/// Rows of a `[N×T×D]` (or `[N×D]`) tensor at sampled tokens, restricted to
/// `cols` when given.
fn gather_tokens(t: &Tensor, tokens: &[Vec<usize>], cols: Option<&[usize]>) -> Result<Tensor> {
    let (d, per) = match t.rank() {
        3 => (t.dim(2), t.dim(1)),
        2 => (t.dim(1), 1),
        _ => return Err(Error::Dimension(format!("token gather on {:?}", t.shape()))),
    };
    let all: Vec<usize> = (0..d).collect();
    let cols = cols.unwrap_or(&all);
    let rows: usize = tokens.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(rows * cols.len());
    for (b, toks) in tokens.iter().enumerate() {
        for &tk in toks {
            let row = &t.data()[(b * per + tk) * d..(b * per + tk + 1) * d];
            out.extend(cols.iter().map(|&j| row[j]));
        }
    }
    Tensor::new(vec![rows, cols.len()], out)
}

fn sample_tokens(n: usize, t: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            if k >= t {
                return (0..t).collect();
            }
            let mut v: Vec<usize> = rand::seq::index::sample(rng, t - 1, k - 1).into_iter().map(|i| i + 1).collect();
            v.push(0);
            v.sort_unstable();
            v
        })
        .collect()
}

/// Solution of `x·wᵀ + b ≈ y` as `(w [n×k], b [n])`.
struct Fit {
    weight: Tensor,
    bias: Option<Tensor>,
    ridge: bool,
}

fn fit(x: &Tensor, y: &Tensor, with_bias: bool) -> Result<Fit> {
    let (m, k) = x.dims2()?;
    let design = if with_bias {
        let mut d = Vec::with_capacity(m * (k + 1));
        for r in 0..m {
            d.extend_from_slice(x.row(r));
            d.push(1.0);
        }
        Tensor::new(vec![m, k + 1], d)?
    } else {
        x.clone()
    };
    let ls = least_squares_solve_detailed(&design, y)?;
    let sol = ls.solution.transpose2()?; // [n × k(+1)]
    let (n, _) = sol.dims2()?;
    if with_bias {
        let cols: Vec<usize> = (0..k).collect();
        let weight = sol.select(1, &cols)?;
        let bias = sol.select(1, &[k])?.reshape(&[n])?;
        Ok(Fit {
            weight,
            bias: Some(bias),
            ridge: ls.ridge_used,
        })
    } else {
        Ok(Fit {
            weight: sol,
            bias: None,
            ridge: ls.ridge_used,
        })
    }
}

/// Frobenius norm of `x·wᵀ + b − y`, accumulated in f64.
fn residual(x: &Tensor, w: &Tensor, b: Option<&Tensor>, y: &Tensor) -> Result<f64> {
    let pred = dense_forward(x, w, b)?;
    Ok(pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| {
            let e = *p as f64 - *t as f64;
            e * e
        })
        .sum::<f64>()
        .sqrt())
}

/// Single-layer reconstruction with shared inputs: targets are `x_full·Wᵀ`
/// and the design keeps the `kept_in` channels (all their kernel taps).
/// Returns `W'` shaped `[C_out × |kept_in| × K1 × K2]` (or `[out × |kept_in|]`
/// for a rank-2 weight).
pub fn reconstruct_layer(x_full: &Tensor, weight: &Tensor, kept_in: &[usize]) -> Result<Tensor> {
    let cout = weight.dim(0);
    let cin = weight.shape().get(1).copied().unwrap_or(1);
    let taps: usize = weight.shape()[2..].iter().product();
    let flat = weight.clone().reshape(&[cout, cin * taps])?;
    let y = dense_forward(x_full, &flat, None)?;
    let cols = tap_columns(kept_in, taps);
    let x = x_full.select(1, &cols)?;
    let sol = fit(&x, &y, false)?.weight;
    let mut shape = weight.shape().to_vec();
    shape[1] = kept_in.len();
    sol.reshape(&shape)
}

fn tap_columns(channels: &[usize], taps: usize) -> Vec<usize> {
    channels.iter().flat_map(|&c| c * taps..(c + 1) * taps).collect()
}

struct Context<'a> {
    original: &'a NetworkGraph,
    original_weights: &'a WeightStore,
    sub: &'a Subnetwork,
    calib: &'a CalibrationBatch,
    membership: HashMap<(String, Axis), usize>,
}

impl Context<'_> {
    /// Kept indices of the group on `axis`, or `None` at full width.
    fn pruned(&self, layer: &str, axis: Axis) -> Option<&[usize]> {
        let g = *self.membership.get(&(layer.to_string(), axis))?;
        let idx = self.sub.selection.groups.get(&g)?;
        let full = self.original.group(g)?.original_size;
        (idx.len() < full).then_some(idx.as_slice())
    }

    fn teacher(&self, name: &str) -> Result<&Tensor> {
        self.calib
            .teacher
            .get(self.original, name)
            .ok_or_else(|| Error::Graph(format!("original network has no layer `{name}`")))
    }

    fn teacher_input(&self, layer: &LayerSpec) -> Result<&Tensor> {
        match layer.inputs.first().map(String::as_str) {
            Some(crate::netgraph::INPUT) | None => Ok(&self.calib.inputs),
            Some(src) => self.teacher(src),
        }
    }
}

/// Solves the pruned layers of `sub` against the original network's
/// activations on `calib`. Depthwise convolutions are sliced only. When a
/// solve would not lower the sampled residual the sliced weights are kept.
pub fn reconstruct_network(
    original: &NetworkGraph,
    original_weights: &WeightStore,
    sub: &Subnetwork,
    calib: &CalibrationBatch,
    rng: &mut impl Rng,
) -> Result<(WeightStore, ReconstructionReport)> {
    let ctx = Context {
        original,
        original_weights,
        sub,
        calib,
        membership: original.membership(),
    };
    let graph = &sub.graph;
    let index = graph.layer_index();
    let mut weights = sub.weights.clone();
    let mut report = ReconstructionReport::default();
    let mut acts: Vec<Option<Tensor>> = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let out = {
            let ins = gather(layer, &index, &acts, &calib.inputs)?;
            reconstruct_one(&ctx, layer, ins[0], &mut weights, &mut report, rng).map_err(|e| e.in_layer(&layer.name))?;
            run_layer(layer, &weights, &ins).map_err(|e| e.in_layer(&layer.name))?
        };
        acts.push(Some(out));
    }
    Ok((weights, report))
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn reconstruct_one(
    ctx: &Context<'_>,
    layer: &LayerSpec,
    x: &Tensor,
    weights: &mut WeightStore,
    report: &mut ReconstructionReport,
    rng: &mut impl Rng,
) -> Result<()> {
    let name = layer.name.as_str();
    let out_sel = ctx.pruned(name, Axis::Out);
    let in_sel = ctx.pruned(name, Axis::In);
    match layer.kind {
        LayerKind::Conv2d if !layer.is_depthwise() && layer.conv_groups() == 1 => {
            if out_sel.is_none() && in_sel.is_none() {
                return Ok(());
            }
            let k = layer.kernel()?;
            let (n, _, h, w) = x.dims4()?;
            let total = conv_output_size(h, k, layer.stride(), layer.padding())?
                * conv_output_size(w, k, layer.stride(), layer.padding())?;
            let positions = sample_positions(n, total, ctx.calib.patches_per_image.min(total), rng)?;
            let xs = gather_patches(x, k, layer.stride(), layer.padding(), &positions)?;
            let cout = layer.out_channels()?;
            let full_out = all(ctx.original.layer(name).map_or(Ok(cout), |l| l.out_channels())?);
            let y = gather_outputs(ctx.teacher(name)?, &positions, out_sel.unwrap_or(&full_out))?;
            let kernel = weights.param(name, "kernel")?.clone();
            let flat = kernel.clone().reshape(&[cout, xs.dim(1)])?;
            let bias = layer.has_bias().then(|| weights.param(name, "bias").cloned()).transpose()?;
            if let Some(f) = solve_and_record(report, name.to_string(), &xs, &y, &flat, bias.as_ref())? {
                weights.insert(name, "kernel", f.weight.reshape(kernel.shape())?);
                if let Some(b) = f.bias {
                    weights.insert(name, "bias", b);
                }
            }
        }
        LayerKind::Dense | LayerKind::Classifier => {
            if out_sel.is_none() && in_sel.is_none() {
                return Ok(());
            }
            let tokens = token_sample(ctx, x, rng)?;
            let xs = gather_tokens(x, &tokens, None)?;
            let y = gather_tokens(ctx.teacher(name)?, &tokens, out_sel)?;
            let w = weights.param(name, "weight")?.clone();
            let b = weights.get(name, "bias").cloned();
            if let Some(f) = solve_and_record(report, name.to_string(), &xs, &y, &w, b.as_ref())? {
                weights.insert(name, "weight", f.weight);
                if let Some(b) = f.bias {
                    weights.insert(name, "bias", b);
                }
            }
        }
        LayerKind::Attention => {
            let dims = ctx.sub.selection.head_dims.get(name);
            let orig = ctx.original.layer(name).ok_or_else(|| Error::Graph(format!("no original `{name}`")))?;
            let dims_pruned = dims.is_some_and(|d| d.len() < orig.head_dim().unwrap_or(0));
            if out_sel.is_none() && !dims_pruned {
                return Ok(());
            }
            let (heads0, dh0) = (orig.head_count()?, orig.head_dim()?);
            let all_heads = all(heads0);
            let all_dims = all(dh0);
            let hs = out_sel.unwrap_or(&all_heads);
            let ds = dims.map_or(all_dims.as_slice(), Vec::as_slice);
            let inner: Vec<usize> = hs.iter().flat_map(|&h| ds.iter().map(move |&j| h * dh0 + j)).collect();
            let rows: Vec<usize> = (0..3).flat_map(|p| inner.iter().map(move |&i| p * heads0 * dh0 + i)).collect();

            let tokens = token_sample(ctx, x, rng)?;
            let xs = gather_tokens(x, &tokens, None)?;
            let t_in = gather_tokens(ctx.teacher_input(orig)?, &tokens, None)?;
            let qkv_full = dense_forward(
                &t_in,
                ctx.original_weights.param(name, "qkv_weight")?,
                ctx.original_weights.get(name, "qkv_bias"),
            )?;
            let y = qkv_full.select(1, &rows)?;
            let w = weights.param(name, "qkv_weight")?.clone();
            let b = weights.get(name, "qkv_bias").cloned();
            if let Some(f) = solve_and_record(report, format!("{name}.qkv"), &xs, &y, &w, b.as_ref())? {
                weights.insert(name, "qkv_weight", f.weight);
                if let Some(b) = f.bias {
                    weights.insert(name, "qkv_bias", b);
                }
            }

            let ctx_full = attention_context(
                x,
                weights.param(name, "qkv_weight")?,
                weights.get(name, "qkv_bias"),
                layer.head_count()?,
                layer.head_dim()?,
                layer.attention_scale()?,
            )?;
            let xs = gather_tokens(&ctx_full, &tokens, None)?;
            let y = gather_tokens(ctx.teacher(name)?, &tokens, None)?;
            let w = weights.param(name, "proj_weight")?.clone();
            let b = weights.get(name, "proj_bias").cloned();
            if let Some(f) = solve_and_record(report, format!("{name}.proj"), &xs, &y, &w, b.as_ref())? {
                weights.insert(name, "proj_weight", f.weight);
                if let Some(b) = f.bias {
                    weights.insert(name, "proj_bias", b);
                }
            }
        }
        LayerKind::MlpBlock => {
            let Some(kept) = out_sel else { return Ok(()) };
            let orig = ctx.original.layer(name).ok_or_else(|| Error::Graph(format!("no original `{name}`")))?;
            let tokens = token_sample(ctx, x, rng)?;
            let xs = gather_tokens(x, &tokens, None)?;
            let t_in = gather_tokens(ctx.teacher_input(orig)?, &tokens, None)?;
            let pre = dense_forward(
                &t_in,
                ctx.original_weights.param(name, "fc1_weight")?,
                ctx.original_weights.get(name, "fc1_bias"),
            )?;
            let y = pre.select(1, kept)?;
            let w = weights.param(name, "fc1_weight")?.clone();
            let b = weights.get(name, "fc1_bias").cloned();
            if let Some(f) = solve_and_record(report, format!("{name}.fc1"), &xs, &y, &w, b.as_ref())? {
                weights.insert(name, "fc1_weight", f.weight);
                if let Some(b) = f.bias {
                    weights.insert(name, "fc1_bias", b);
                }
            }

            let hidden = gelu(&dense_forward(&xs, weights.param(name, "fc1_weight")?, weights.get(name, "fc1_bias"))?);
            let y = gather_tokens(ctx.teacher(name)?, &tokens, None)?;
            let w = weights.param(name, "fc2_weight")?.clone();
            let b = weights.get(name, "fc2_bias").cloned();
            if let Some(f) = solve_and_record(report, format!("{name}.fc2"), &hidden, &y, &w, b.as_ref())? {
                weights.insert(name, "fc2_weight", f.weight);
                if let Some(b) = f.bias {
                    weights.insert(name, "fc2_bias", b);
                }
            }
        }
        _ => {}
    }
    Ok(())
}

fn token_sample(ctx: &Context<'_>, x: &Tensor, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    Ok(match x.rank() {
        3 => sample_tokens(x.dim(0), x.dim(1), ctx.calib.tokens, rng),
        2 => (0..x.dim(0)).map(|_| vec![0]).collect(),
        _ => return Err(Error::Dimension(format!("dense input {:?}", x.shape()))),
    })
}

/// Solves one system, records it, and returns the new weights only when
/// they lower the sampled residual.
fn solve_and_record(
    report: &mut ReconstructionReport,
    label: String,
    x: &Tensor,
    y: &Tensor,
    sliced_w: &Tensor,
    sliced_b: Option<&Tensor>,
) -> Result<Option<Fit>> {
    let before = residual(x, sliced_w, sliced_b, y)?;
    let f = fit(x, y, sliced_b.is_some())?;
    let solved = residual(x, &f.weight, f.bias.as_ref(), y)?;
    let improved = solved.is_finite() && solved <= before;
    report.layers.push(LayerRecord {
        layer: label,
        rows: x.dim(0),
        cols: x.dim(1) + usize::from(sliced_b.is_some()),
        residual_before: before,
        residual_after: if improved { solved } else { before },
        ridge_used: f.ridge,
    });
    Ok(improved.then_some(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{forward, models};
    use crate::prunespace::{build_space, decode, Genome, SelectionStrategy, SpaceMode};
    use crate::tensor::{im2col, RngStream};

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exhaustive_sampling_is_im2col() {
        let mut rng = RngStream::new(0, 0);
        let f = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let (x, pos) = sample_patches(&f, 3, 2, 1, 9, &mut rng).unwrap();
        assert!(pos.iter().all(|p| p == &(0..9).collect::<Vec<_>>()));
        let full = im2col(&f, 3, 3, 2, 1).unwrap();
        assert_eq!(x, full);
    }

    #[test]
    fn pointwise_patches_are_distinct_pixels() {
        let f = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let (x, pos) = sample_patches(&f, 1, 1, 0, 2, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(x.shape(), &[2, 1]);
        assert_ne!(pos[0][0], pos[0][1]);
        assert_eq!(x.data(), &[pos[0][0] as f32, pos[0][1] as f32]);
        assert!(matches!(sample_patches(&f, 1, 1, 0, 10, &mut RngStream::new(3, 0)), Err(Error::Bounds(_))));
        let again = sample_patches(&f, 1, 1, 0, 2, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(again.1, pos);
    }

    #[test]
    fn unpruned_layer_is_reproduced() {
        let mut rng = RngStream::new(1, 0);
        let x = rand_tensor(&[40, 2 * 9], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let w2 = reconstruct_layer(&x, &w, &[0, 1]).unwrap();
        let y = dense_forward(&x, &w.reshape(&[3, 18]).unwrap(), None).unwrap();
        let r = residual(&x, &w2.reshape(&[3, 18]).unwrap(), None, &y).unwrap();
        assert!(r <= 1e-4, "{r}");
    }

    #[test]
    fn scalar_closed_form() {
        let mut rng = RngStream::new(2, 0);
        let x = rand_tensor(&[30, 2], &mut rng);
        let w = Tensor::new(vec![1, 2, 1, 1], vec![0.7, -1.3]).unwrap();
        let got = reconstruct_layer(&x, &w, &[0]).unwrap();
        let (mut xx, mut xy) = (0f64, 0f64);
        for r in 0..30 {
            let (x0, x1) = (x.row(r)[0] as f64, x.row(r)[1] as f64);
            xx += x0 * x0;
            xy += x0 * (0.7 * x0 - 1.3 * x1);
        }
        assert!((got.data()[0] as f64 - xy / xx).abs() < 1e-5);
    }

    #[test]
    fn solved_beats_sliced_on_random_instances() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let x = rand_tensor(&[50, 4 * 4], &mut rng);
            let w = rand_tensor(&[2, 4, 2, 2], &mut rng);
            let kept = [0usize, 2];
            let w2 = reconstruct_layer(&x, &w, &kept).unwrap();
            let y = dense_forward(&x, &w.clone().reshape(&[2, 16]).unwrap(), None).unwrap();
            let xk = x.select(1, &tap_columns(&kept, 4)).unwrap();
            let naive = w.select(1, &kept).unwrap().reshape(&[2, 8]).unwrap();
            let after = residual(&xk, &w2.reshape(&[2, 8]).unwrap(), None, &y).unwrap();
            let before = residual(&xk, &naive, None, &y).unwrap();
            assert!(after <= before + 1e-6);
        }
    }

    #[test]
    fn solution_is_locally_optimal() {
        let mut rng = RngStream::new(7, 0);
        let x = rand_tensor(&[80, 6], &mut rng);
        let y = rand_tensor(&[80, 2], &mut rng);
        let f = fit(&x, &y, false).unwrap();
        let base = residual(&x, &f.weight, None, &y).unwrap();
        let norm = f.weight.frobenius_norm();
        for _ in 0..100 {
            let d = rand_tensor(f.weight.shape(), &mut rng);
            let d = d.scale((1e-2 * norm / d.frobenius_norm()) as f32);
            let r = residual(&x, &f.weight.add(&d).unwrap(), None, &y).unwrap();
            assert!(r >= base - 1e-9);
        }
    }

    #[test]
    fn scaling_targets_scales_solution() {
        let mut rng = RngStream::new(4, 0);
        let x = rand_tensor(&[60, 5], &mut rng);
        let y = rand_tensor(&[60, 3], &mut rng);
        let a = fit(&x, &y, true).unwrap();
        let b = fit(&x, &y.scale(2.5), true).unwrap();
        let rel = a.weight.scale(2.5).max_abs_diff(&b.weight) / a.weight.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(rel < 1e-5, "{rel}");
    }

    fn setup(model: NetworkGraph, n: usize) -> (NetworkGraph, WeightStore, CalibrationBatch) {
        let w = models::init_weights(&model, &mut RngStream::new(5, 0)).unwrap();
        let mut rng = RngStream::new(6, 0);
        let mut shape = vec![n];
        shape.extend(&model.input_shape);
        let x = rand_tensor(&shape, &mut rng);
        let calib = CalibrationBatch::new(&model, &w, x, DEFAULT_PATCHES, DEFAULT_TOKENS).unwrap();
        (model, w, calib)
    }

    #[test]
    fn full_width_pipeline_is_identity() {
        for (model, mode) in [
            (models::toy_cnn(&models::ToyCnnConfig::default()), SpaceMode::CnnChannels),
            (models::toy_transformer(&models::VitConfig::toy()), SpaceMode::VitHeadCount),
        ] {
            let (g, w, calib) = setup(model, 8);
            let space = build_space(&g, mode, 0.1).unwrap();
            let mut rng = RngStream::new(0, 0);
            let sub = decode(&g, &w, &space, &space.full_genome(), SelectionStrategy::Random, &mut rng).unwrap();
            let (w2, report) = reconstruct_network(&g, &w, &sub, &calib, &mut rng).unwrap();
            assert!(report.layers.is_empty());
            assert!(w2.bitwise_eq(&w));
            let a = forward(&g, &w, &calib.inputs).unwrap();
            let b = forward(&sub.graph, &w2, &calib.inputs).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-4);
        }
    }

    #[test]
    fn pruned_reports_never_regress() {
        for (model, mode) in [
            (models::toy_cnn(&models::ToyCnnConfig::default()), SpaceMode::CnnChannels),
            (models::toy_transformer(&models::VitConfig::toy()), SpaceMode::VitHeadCount),
            (models::toy_transformer(&models::VitConfig::toy()), SpaceMode::VitHeadDim),
            (models::resnet(&models::ResNetConfig::toy()), SpaceMode::CnnChannels),
        ] {
            let (g, w, calib) = setup(model, 6);
            let space = build_space(&g, mode, 0.1).unwrap();
            let mut rng = RngStream::new(11, 0);
            let genome = Genome(space.genes.iter().map(|ge| ge.value(ge.cardinality() / 2)).collect());
            let sub = decode(&g, &w, &space, &genome, SelectionStrategy::Random, &mut rng).unwrap();
            let (w2, report) = reconstruct_network(&g, &w, &sub, &calib, &mut rng).unwrap();
            assert!(!report.layers.is_empty());
            for r in &report.layers {
                assert!(r.residual_after <= r.residual_before + 1e-6, "{mode}: {r:?}");
            }
            assert!(crate::netgraph::validate(&sub.graph, &w2).is_empty());
            let lines = report.to_json_lines().unwrap();
            assert_eq!(lines.lines().count(), report.layers.len());
            assert!(lines.contains("\"residual_before\""));
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let (g, w, calib) = setup(models::toy_cnn(&models::ToyCnnConfig::default()), 6);
        let space = build_space(&g, SpaceMode::CnnChannels, 0.1).unwrap();
        let run = || {
            let mut rng = RngStream::new(12, 1);
            let sub = decode(&g, &w, &space, &Genome(vec![4, 8, 8, 16]), SelectionStrategy::Random, &mut rng).unwrap();
            reconstruct_network(&g, &w, &sub, &calib, &mut rng).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert!(a.bitwise_eq(&b));
        assert_eq!(ra.to_json_lines().unwrap(), rb.to_json_lines().unwrap());
    }
}
