use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const LN_EPS: f32 = 1e-6;

/// Dot product summed sequentially in `f32`.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Column block width of the matmul kernel; keeps the touched rows of `b`
/// and `out` cache resident.
const COL_BLOCK: usize = 256;

/// `out [m×n] += a [m×k] · b [k×n]`, four rows at a time over column
/// blocks. Every output accumulates over `k` in order, so blocking does not
/// change values.
fn matmul_rows(a: &[f32], b: &[f32], out: &mut [f32], k: usize, n: usize) {
    let m = if n == 0 { 0 } else { out.len() / n };
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let w = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let (o0, o1, o2, o3) = (&mut o0[j0..j1], &mut o1[j0..j1], &mut o2[j0..j1], &mut o3[j0..j1]);
            for p in 0..k {
                let br = &b[p * n + j0..p * n + j1];
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                for j in 0..w {
                    let bv = br[j];
                    o0[j] += a0 * bv;
                    o1[j] += a1 * bv;
                    o2[j] += a2 * bv;
                    o3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let o = &mut out[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                for (ov, bv) in o.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                    *ov += av * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2()?;
    let (_, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_transposed: {:?} · {:?}ᵀ has mismatched inner dimension",
            a.shape(),
            b.shape()
        )));
    }
    matmul(a, &b.transpose2()?)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: {:?} × {:?} has mismatched inner dimension",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_rows(a.data(), b.data(), &mut out, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unrolls `input: [N×C×H×W]` into one row per output position,
/// giving `[(N·H'·W') × (C·K1·K2)]`. Column order is channel-major, then
/// kernel row, then kernel column, matching a flattened `[C×K1×K2]` kernel.
pub fn im2col(
    input: &Tensor,
    k1: usize,
    k2: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let oh = conv_output_size(h, k1, stride, padding)?;
    let ow = conv_output_size(w, k2, stride, padding)?;
    let cols = c * k1 * k2;
    let mut out = vec![0.0f32; n * oh * ow * cols];
    let src = input.data();
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let row = ((b * oh + y) * ow + x) * cols;
                im2col_row(src, (b, c, h, w), (k1, k2, stride, padding), y, x, &mut out[row..row + cols]);
            }
        }
    }
    Tensor::new(vec![n * oh * ow, cols], out)
}

/// Column-major counterpart of [`im2col`] restricted to channels
/// `c0..c0 + cn`: `[(cn·K1·K2) × (N·H'·W')]`, one row per kernel tap.
fn im2col_t(
    input: &Tensor,
    (c0, cn): (usize, usize),
    (k1, k2, stride, padding): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let np = n * oh * ow;
    let mut out = vec![0.0f32; cn * k1 * k2 * np];
    let src = input.data();
    let mut row = 0;
    for ch in c0..c0 + cn {
        for ky in 0..k1 {
            for kx in 0..k2 {
                let dst = &mut out[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for y in 0..oh {
                        let iy = (y * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let seg = &mut dst[(b * oh + y) * ow..(b * oh + y + 1) * ow];
                        for (x, d) in seg.iter_mut().enumerate() {
                            let ix = (x * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = line[ix as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![cn * k1 * k2, np], out)
}

/// Fills one patch row for output position `(y, x)` of image `b`.
#[inline]
pub(crate) fn im2col_row(
    src: &[f32],
    (b, c, h, w): (usize, usize, usize, usize),
    (k1, k2, stride, padding): (usize, usize, usize, usize),
    y: usize,
    x: usize,
    dst: &mut [f32],
) {
    let mut col = 0;
    for ch in 0..c {
        let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
        for ky in 0..k1 {
            let iy = (y * stride + ky) as isize - padding as isize;
            for kx in 0..k2 {
                let ix = (x * stride + kx) as isize - padding as isize;
                dst[col] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    plane[iy as usize * w + ix as usize]
                } else {
                    0.0
                };
                col += 1;
            }
        }
    }
}

/// Cross-correlation of `input: [N×C_in×H×W]` with `kernel: [C_out×C_in×K1×K2]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_grouped(input, kernel, None, stride, padding, 1)
}

/// Grouped convolution; `kernel` is `[C_out × C_in/groups × K1 × K2]`.
pub fn conv2d_grouped(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, c_per, k1, k2) = kernel.dims4()?;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_per {
        return Err(Error::Dimension(format!(
            "conv2d: input {:?} incompatible with kernel {:?} (groups {groups})",
            input.shape(),
            kernel.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Dimension(format!(
                "conv2d: bias of length {} for {c_out} output channels",
                b.len()
            )));
        }
    }
    let oh = conv_output_size(h, k1, stride, padding)?;
    let ow = conv_output_size(w, k2, stride, padding)?;
    let positions = oh * ow;
    let mut out = vec![0.0f32; n * c_out * positions];
    let out_per = c_out / groups;
    for g in 0..groups {
        let cols = im2col_t(input, (g * c_per, c_per), (k1, k2, stride, padding), (oh, ow))?;
        let kslice = if groups == 1 {
            kernel.clone().reshape(&[c_out, c_per * k1 * k2])?
        } else {
            let rows: Vec<usize> = (g * out_per..(g + 1) * out_per).collect();
            kernel.select(0, &rows)?.reshape(&[out_per, c_per * k1 * k2])?
        };
        // [out_per × N·P]
        let prod = matmul(&kslice, &cols)?;
        let pd = prod.data();
        let np = n * positions;
        for oc in 0..out_per {
            let ch = g * out_per + oc;
            for b in 0..n {
                let src = &pd[oc * np + b * positions..oc * np + (b + 1) * positions];
                out[(b * c_out + ch) * positions..(b * c_out + ch + 1) * positions].copy_from_slice(src);
            }
        }
    }
    if let Some(b) = bias {
        for bi in 0..n {
            for (ch, &bv) in b.data().iter().enumerate() {
                let start = (bi * c_out + ch) * positions;
                out[start..start + positions].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// Affine map over the last axis: `x · wᵀ + b` with `w: [out × in]`.
/// Leading axes of `x` are treated as batch.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_f, in_f) = weight.dims2()?;
    let last = *x.shape().last().unwrap();
    if last != in_f {
        return Err(Error::Dimension(format!(
            "dense: input {:?} incompatible with weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_f {
            return Err(Error::Dimension(format!(
                "dense: bias of length {} for {out_f} outputs",
                b.len()
            )));
        }
    }
    let rows = x.len() / in_f;
    let flat = x.clone().reshape(&[rows, in_f])?;
    let mut y = matmul_transposed(&flat, weight)?;
    if let Some(b) = bias {
        for row in y.data_mut().chunks_exact_mut(out_f) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    y.reshape(&shape)
}

/// Inference batch norm over axis 1 of `[N×C×…]` using stored statistics.
pub fn batchnorm_inference_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Dimension(format!("batchnorm: input {:?} has no channel axis", x.shape())));
    }
    let c = x.dim(1);
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm: {name} has {} entries for {c} channels",
                t.len()
            )));
        }
    }
    let inner: usize = x.shape()[2..].iter().product();
    let scale: Vec<f32> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
        let ch = i % c;
        let (s, m, b) = (scale[ch], mean.data()[ch], beta.data()[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// GELU, tanh approximation, evaluated as `x·σ(2u)` which equals
/// `½x(1 + tanh u)`.
pub fn gelu(x: &Tensor) -> Tensor {
    const C: f32 = 2.0 * 0.797_884_6; // 2·sqrt(2/pi)
    x.map(|v| v / (1.0 + (-C * (v + 0.044_715 * v * v * v)).exp()))
}

/// Normalises over the last axis, then applies `gamma`/`beta`.
pub fn layernorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layernorm: parameters of length {}/{} for feature size {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * inv) as f32 * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `[N×C×H×W] → [N×C]` spatial mean.
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let area = h * w;
    let data = x
        .data()
        .chunks_exact(area)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Row-wise argmax of `[N×K]` logits; ties resolve to the lower class index.
pub fn argmax_classify(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
