use super::kernels::{dense_forward, dot, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Multi-head self-attention without biases, scaled by `1/sqrt(head_dim)`.
///
/// `qkv_weight` is `[3·H·Dh × D]` with row blocks Q, K, V and head `h`
/// occupying rows `h·Dh..(h+1)·Dh` inside each block. `proj_weight` is
/// `[D × H·Dh]`.
pub fn attention_forward(
    tokens: &Tensor,
    qkv_weight: &Tensor,
    proj_weight: &Tensor,
    head_count: usize,
    head_dim: usize,
) -> Result<Tensor> {
    let scale = 1.0 / (head_dim as f32).sqrt();
    attention_forward_scaled(tokens, qkv_weight, None, proj_weight, None, head_count, head_dim, scale)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_forward_scaled(
    tokens: &Tensor,
    qkv_weight: &Tensor,
    qkv_bias: Option<&Tensor>,
    proj_weight: &Tensor,
    proj_bias: Option<&Tensor>,
    head_count: usize,
    head_dim: usize,
    scale: f32,
) -> Result<Tensor> {
    let (_, _, d) = tokens.dims3()?;
    let (po, pi) = proj_weight.dims2()?;
    if po != d || pi != head_count * head_dim {
        return Err(Error::Dimension(format!(
            "attention: projection {:?} inconsistent with {head_count} heads × {head_dim} dims and width {d}",
            proj_weight.shape()
        )));
    }
    let ctx = attention_context(tokens, qkv_weight, qkv_bias, head_count, head_dim, scale)?;
    dense_forward(&ctx, proj_weight, proj_bias)
}

/// Concatenated per-head outputs `[N×T×H·Dh]`, i.e. the projection input.
pub fn attention_context(
    tokens: &Tensor,
    qkv_weight: &Tensor,
    qkv_bias: Option<&Tensor>,
    head_count: usize,
    head_dim: usize,
    scale: f32,
) -> Result<Tensor> {
    let (n, t, d) = tokens.dims3()?;
    let inner = head_count * head_dim;
    let (qo, qi) = qkv_weight.dims2()?;
    if head_count == 0 || head_dim == 0 || qo != 3 * inner || qi != d {
        return Err(Error::Dimension(format!(
            "attention: qkv weight {:?} inconsistent with {head_count} heads × {head_dim} dims and width {d}",
            qkv_weight.shape()
        )));
    }
    let qkv = dense_forward(tokens, qkv_weight, qkv_bias)?;
    let qd = qkv.data();
    let stride = 3 * inner;
    let mut ctx = vec![0.0f32; n * t * inner];
    let mut scores = vec![0.0f32; t];
    let mut acc = vec![0.0f32; head_dim];
    for b in 0..n {
        let base = b * t * stride;
        for h in 0..head_count {
            let q_off = h * head_dim;
            let k_off = inner + h * head_dim;
            let v_off = 2 * inner + h * head_dim;
            for i in 0..t {
                let q = &qd[base + i * stride + q_off..base + i * stride + q_off + head_dim];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &qd[base + j * stride + k_off..base + j * stride + k_off + head_dim];
                    *s = dot(q, k) * scale;
                }
                softmax_in_place(&mut scores);
                acc.fill(0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let v = &qd[base + j * stride + v_off..base + j * stride + v_off + head_dim];
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p * vv;
                    }
                }
                let out = &mut ctx[(b * t + i) * inner + h * head_dim..(b * t + i) * inner + (h + 1) * head_dim];
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = *a;
                }
            }
        }
    }
    Tensor::new(vec![n, t, inner], ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_transposed;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_token_passes_value_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h, dh) = (4, 2, 2);
        let x = rand_t(&[1, 1, d], &mut rng);
        let qkv = rand_t(&[3 * h * dh, d], &mut rng);
        let proj = rand_t(&[d, h * dh], &mut rng);
        let out = attention_forward(&x, &qkv, &proj, h, dh).unwrap();
        // softmax over one key is 1: output = proj · (Wv · x)
        let v_rows: Vec<usize> = (2 * h * dh..3 * h * dh).collect();
        let wv = qkv.select(0, &v_rows).unwrap();
        let v = matmul_transposed(&x.clone().reshape(&[1, d]).unwrap(), &wv).unwrap();
        let want = matmul_transposed(&v, &proj).unwrap();
        assert!(out.reshape(&[1, d]).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, h, dh, t) = (4, 2, 2, 5);
        let x = rand_t(&[2, t, d], &mut rng);
        let mut qkv = rand_t(&[3 * h * dh, d], &mut rng);
        let inner = h * dh;
        qkv.data_mut()[2 * inner * d..].fill(0.0);
        let proj = rand_t(&[d, inner], &mut rng);
        let out = attention_forward(&x, &qkv, &proj, h, dh).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Two heads equal two independent single-head attentions whose
    /// outputs are concatenated, then projected.
    #[test]
    fn two_heads_compose_from_single_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, dh, t) = (4, 2, 3);
        let x = rand_t(&[1, t, d], &mut rng);
        let qkv = rand_t(&[3 * 2 * dh, d], &mut rng);
        let proj = rand_t(&[d, 2 * dh], &mut rng);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut contexts = Vec::new();
        for head in 0..2 {
            let rows: Vec<usize> = (0..3)
                .flat_map(|part| (0..dh).map(move |r| part * 2 * dh + head * dh + r))
                .collect();
            let sub = qkv.select(0, &rows).unwrap();
            contexts.push(attention_context(&x, &sub, None, 1, dh, scale).unwrap());
        }
        let cat = Tensor::concat(&[&contexts[0], &contexts[1]], 2).unwrap();
        let want = dense_forward(&cat, &proj, None).unwrap();
        let got = attention_forward(&x, &qkv, &proj, 2, dh).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn inconsistent_weights_rejected() {
        let x = Tensor::zeros(&[1, 2, 4]);
        let qkv = Tensor::zeros(&[10, 4]);
        let proj = Tensor::zeros(&[4, 4]);
        assert!(matches!(attention_forward(&x, &qkv, &proj, 2, 2), Err(Error::Dimension(_))));
    }
}
