//! Labelled sample sets: IDX files, numeric CSV and seeded Gaussian
//! clusters, plus disjoint reconstruction / evaluation splits.

use std::path::Path;

use evoprune_core::{Error, Result, RngStream, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N × sample dims]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.select(0, idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Per-element noise standard deviation around the class mean.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    1.0
}

/// Gaussian class clusters: each class mean is a standard-normal vector,
/// samples add `noise`-scaled standard-normal perturbations. Labels cycle
/// through the classes so every class is equally represented.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.samples == 0 || spec.dims.is_empty() || spec.dims.contains(&0) {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let d: usize = spec.dims.iter().product();
    let mut rng = RngStream::new(spec.seed, 0xda7a);
    let means: Vec<f32> = (0..spec.classes * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect::<Vec<f64>>()
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut data = Vec::with_capacity(spec.samples * d);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        labels.push(c);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(means[c * d + j] + (spec.noise * e) as f32);
        }
    }
    let mut shape = vec![spec.samples];
    shape.extend(&spec.dims);
    Ok(Dataset {
        inputs: Tensor::new(shape, data)?,
        labels,
        classes: spec.classes,
    })
}

/// Parsed IDX array: dimensions and values. Unsigned-byte payloads are
/// returned raw (0–255).
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
    pub type_code: u8,
}

fn format_err(offset: usize, message: String) -> Error {
    Error::Format {
        offset: offset as u64,
        message,
    }
}

/// Parses an IDX file (`00 00 <type> <ndims>`, big-endian u32 dims, then
/// payload). Types 0x08 (u8) and 0x0D (f32) are supported.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), format!("truncated header: {} of 4 bytes", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(
            0,
            format!("bad magic: expected [00, 00], found [{:02x}, {:02x}]", bytes[0], bytes[1]),
        ));
    }
    let type_code = bytes[2];
    let width = match type_code {
        0x08 => 1,
        0x0D => 4,
        other => return Err(format_err(2, format!("unsupported element type 0x{other:02x} (expected 0x08 or 0x0d)"))),
    };
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(
            bytes.len(),
            format!("truncated dimension list: need {header} header bytes, file has {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(format_err(4 + 4 * i, format!("dimension {i} is zero")));
    }
    let count: usize = dims.iter().product();
    let end = header + count * width;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {end} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > end {
        return Err(format_err(end, format!("{} trailing bytes after payload", bytes.len() - end)));
    }
    let payload = &bytes[header..end];
    let values = match type_code {
        0x08 => payload.iter().map(|&b| b as f32).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Ok(IdxArray { dims, values, type_code })
}

/// Image file `[N × H × W]` (or `[N × C × H × W]`) plus a label file `[N]`.
/// Byte images are scaled to [0, 1]; rank-3 images gain a channel axis.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::Dimension(format!(
            "label file dims {:?} do not match {} images",
            lab.dims, img.dims[0]
        )));
    }
    let labels: Vec<usize> = lab.values.iter().map(|&v| v as usize).collect();
    let mut shape = img.dims.clone();
    if shape.len() == 3 {
        shape.insert(1, 1);
    }
    let values = if img.type_code == 0x08 {
        img.values.iter().map(|v| v / 255.0).collect()
    } else {
        img.values
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs: Tensor::new(shape, values)?,
        labels,
        classes,
    })
}

/// Encodes `values` as an IDX file.
pub fn write_idx(dims: &[usize], values: &[f32], type_code: u8) -> Vec<u8> {
    let mut out = vec![0, 0, type_code, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in values {
        match type_code {
            0x08 => out.push(v as u8),
            _ => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    out
}

/// Headerless numeric CSV, one sample per row: label first, then the
/// flattened sample values. `dims` gives the per-sample shape.
pub fn load_csv(path: impl AsRef<Path>, dims: &[usize]) -> Result<Dataset> {
    let per: usize = dims.iter().product();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != per + 1 {
            return Err(format_err(
                offset as usize,
                format!("row {row}: expected {} fields, found {}", per + 1, rec.len()),
            ));
        }
        let label = rec[0]
            .parse::<usize>()
            .map_err(|_| format_err(offset as usize, format!("row {row}: bad label `{}`", &rec[0])))?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            data.push(
                f.parse::<f32>()
                    .map_err(|_| format_err(offset as usize, format!("row {row}: bad value `{f}`")))?,
            );
        }
    }
    if labels.is_empty() {
        return Err(format_err(0, "no rows".into()));
    }
    let mut shape = vec![labels.len()];
    shape.extend(dims);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs: Tensor::new(shape, data)?,
        labels,
        classes,
    })
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => format_err(offset as usize, format!("{other:?}")),
    }
}

/// Disjoint reconstruction, evaluation and model-fitting subsets.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub recon: Dataset,
    pub eval: Dataset,
    /// Everything else; used to fit toy model weights.
    pub train: Dataset,
}

impl DataSplits {
    /// Shuffles indices with `seed`, then takes `r` reconstruction and `e`
    /// evaluation samples; the rest is the training set.
    pub fn new(data: &Dataset, r: usize, e: usize, seed: u64) -> Result<Self> {
        if r == 0 || e == 0 {
            return Err(Error::Config("reconstruction and evaluation sizes must be positive".into()));
        }
        if r + e > data.len() {
            return Err(Error::Config(format!(
                "need {} samples for the splits, dataset has {}",
                r + e,
                data.len()
            )));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= data.classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {})", data.classes)));
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut RngStream::new(seed, 0x5917));
        Ok(Self {
            recon: data.subset(&idx[..r])?,
            eval: data.subset(&idx[r..r + e])?,
            train: data.subset(&idx[r + e..])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_images_scaled() {
        let vals: Vec<f32> = (0..10 * 28 * 28).map(|i| (i % 256) as f32).collect();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        std::fs::write(&ip, write_idx(&[10, 28, 28], &vals, 0x08)).unwrap();
        std::fs::write(&lp, write_idx(&[10], &[3.0; 10], 0x08)).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.inputs.shape(), &[10, 1, 28, 28]);
        assert_eq!(d.inputs.data()[255], 1.0);
        assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_corruptions_have_offsets() {
        let good = write_idx(&[2, 3], &[1.0; 6], 0x08);
        let mut bad_magic = good.clone();
        bad_magic[1] = 7;
        let mut bad_type = good.clone();
        bad_type[2] = 0x0b;
        let mut no_dims = good.clone();
        no_dims[3] = 0;
        let cases: Vec<(Vec<u8>, u64)> = vec![
            (bad_magic, 0),
            (bad_type, 2),
            (no_dims, 3),
            (good[..9].to_vec(), 9),
            (good[..13].to_vec(), 13),
            ([good.clone(), vec![0]].concat(), 18),
        ];
        for (bytes, want) in cases {
            match parse_idx(&bytes) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, want),
                other => panic!("{other:?}"),
            }
        }
        match parse_idx(&[1, 0, 8, 1]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("expected [00, 00], found [01, 00]")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_reproducible() {
        let spec = SyntheticSpec {
            classes: 4,
            dims: vec![3, 8, 8],
            samples: 200,
            seed: 7,
            noise: 1.0,
        };
        let a = synthetic(&spec).unwrap();
        assert_eq!(a, synthetic(&spec).unwrap());
        assert_eq!(a.inputs.shape(), &[200, 3, 8, 8]);
        assert_eq!(a.labels.iter().filter(|&&l| l == 2).count(), 50);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SyntheticSpec {
            classes: 3,
            dims: vec![2],
            samples: 30,
            seed: 1,
            noise: 0.1,
        };
        let mut d = synthetic(&spec).unwrap();
        // tag every sample with its index so membership is checkable
        d.inputs = Tensor::from_fn(&[30, 2], |i| (i / 2) as f32);
        let s = DataSplits::new(&d, 5, 10, 3).unwrap();
        let ids = |x: &Dataset| (0..x.len()).map(|i| x.inputs.row(i)[0] as usize).collect::<Vec<_>>();
        let (r, e, t) = (ids(&s.recon), ids(&s.eval), ids(&s.train));
        assert_eq!(r.len() + e.len() + t.len(), 30);
        let mut all: Vec<usize> = r.iter().chain(&e).chain(&t).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert!(DataSplits::new(&d, 20, 20, 3).is_err());
    }

    #[test]
    fn csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1, 0.5, 0.25\n0, 1, 2\n").unwrap();
        let d = load_csv(&p, &[2]).unwrap();
        assert_eq!(d.labels, [1, 0]);
        assert_eq!(d.inputs.data(), &[0.5, 0.25, 1.0, 2.0]);
        std::fs::write(&p, "1, 0.5\n").unwrap();
        assert!(matches!(load_csv(&p, &[2]), Err(Error::Format { .. })));
    }
}
