//! Datasets: synthetic Gaussian blobs, CSV and binary files, epoch batching.
//!
//! Binary layout (`.ands`), all little-endian:
//!
//! ```text
//! "ANDS" | u16 version=1 | u8 has_labels | u8 pad | u32 N | u32 D
//! N·D f32 inputs, row-major
//! N i32 labels            (only when has_labels == 1)
//! ```
//!
//! CSV layout: header `label,f0,...,f{D-1}`, one sample per row. A label
//! column of all `-1` means the dataset is unlabelled.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::numerics::{Mat64, SeededRng};
use crate::{Error, Result};

const BIN_MAGIC: &[u8; 4] = b"ANDS";
const BIN_VERSION: u16 = 1;
const BIN_HEADER_LEN: usize = 16;

/// Raw sample vectors plus optional ground-truth labels.
///
/// Labels are carried for evaluation only; the training entry points take
/// `inputs` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    inputs: Mat64,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Mat64, labels: Option<Vec<usize>>) -> Result<Self> {
        if inputs.rows() < 2 {
            return Err(Error::config(format!(
                "a dataset needs at least 2 samples, got {}",
                inputs.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::Dimension {
                    expected: inputs.rows(),
                    actual: l.len(),
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
        })
    }

    pub fn inputs(&self) -> &Mat64 {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Splits into (even rows, odd rows). Blob data is generated class by
    /// class, so both halves keep the class balance.
    pub fn split_alternating(&self) -> Result<(Dataset, Dataset)> {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        Ok((self.subset(&even, "train")?, self.subset(&odd, "test")?))
    }

    fn subset(&self, idx: &[usize], suffix: &str) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect());
        Dataset::new(
            format!("{}-{suffix}", self.name),
            self.inputs.select_rows(idx)?,
            labels,
        )
    }
}

/// Parameters for [`generate_blobs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.per_class < 2 {
            return Err(Error::config("per_class must be >= 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim must be >= 2"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be > 0"));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::config("center_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian blobs around seeded random centres of norm
/// `center_scale`. Samples are laid out class by class.
pub fn generate_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            rng.unit_vector(spec.dim)
                .into_iter()
                .map(|x| x * spec.center_scale)
                .collect()
        })
        .collect();
    let n = spec.num_classes * spec.per_class;
    let mut inputs = Mat64::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..spec.per_class {
            let row = inputs.row_mut(c * spec.per_class + s);
            for (x, &mu) in row.iter_mut().zip(center) {
                *x = mu + spec.noise_sigma * rng.normal();
            }
            labels.push(c);
        }
    }
    Dataset::new(
        format!(
            "blobs-c{}-n{}-d{}-s{}",
            spec.num_classes, spec.per_class, spec.dim, spec.seed
        ),
        inputs,
        Some(labels),
    )
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_owned())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_to_io)?;
    let mut header = vec!["label".to_owned()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_to_io)?;
    for (i, row) in dataset.inputs().iter_rows().enumerate() {
        let label = dataset.labels().map_or(-1i64, |l| l[i] as i64);
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(label.to_string());
        // `{}` on f64 prints the shortest representation that round-trips
        rec.extend(row.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(csv_to_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_to_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_to_io)?;
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `label`".into(),
        });
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `f{j}`, found `{name}`"),
            });
        }
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} cells, found {}", dim + 1, rec.len()),
            });
        }
        let label: i64 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label `{}` is not an integer", &rec[0]),
        })?;
        if label < -1 {
            return Err(Error::Parse {
                line,
                msg: format!("label {label} must be >= 0 or -1"),
            });
        }
        raw_labels.push((line, label));
        for cell in rec.iter().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
    }

    let absent = raw_labels.iter().filter(|(_, l)| *l == -1).count();
    let labels = if absent == raw_labels.len() {
        None
    } else if absent == 0 {
        Some(raw_labels.iter().map(|&(_, l)| l as usize).collect())
    } else {
        let (line, _) = raw_labels.iter().find(|(_, l)| *l == -1).copied().unwrap();
        return Err(Error::Parse {
            line,
            msg: "labels must be all present or all -1".into(),
        });
    };
    let n = raw_labels.len();
    Dataset::new(dataset_name(path), Mat64::from_vec(n, dim, values)?, labels)
}

pub fn encode_bin(dataset: &Dataset) -> Vec<u8> {
    let (n, d) = (dataset.len(), dataset.dim());
    let has_labels = dataset.labels().is_some();
    let mut buf = Vec::with_capacity(BIN_HEADER_LEN + 4 * n * d + if has_labels { 4 * n } else { 0 });
    buf.extend_from_slice(BIN_MAGIC);
    buf.extend_from_slice(&BIN_VERSION.to_le_bytes());
    buf.push(has_labels as u8);
    buf.push(0);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in dataset.inputs().values() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(labels) = dataset.labels() {
        for &l in labels {
            buf.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_bin(bytes: &[u8], name: impl Into<String>) -> Result<Dataset> {
    if bytes.len() < BIN_HEADER_LEN {
        return Err(Error::format(format!(
            "dataset header needs {BIN_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != BIN_MAGIC {
        return Err(Error::format("bad dataset magic, expected ANDS"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BIN_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let has_labels = match bytes[6] {
        0 => false,
        1 => true,
        f => return Err(Error::format(format!("invalid has_labels flag {f}"))),
    };
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n < 2 {
        return Err(Error::format(format!("dataset must hold at least 2 samples, header says {n}")));
    }
    if d == 0 {
        return Err(Error::format("dataset dimension is 0"));
    }
    let expected = (n as u64) * (d as u64) * 4 + if has_labels { 4 * n as u64 } else { 0 };
    let payload = &bytes[BIN_HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(Error::format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let (inputs_raw, labels_raw) = payload.split_at(n * d * 4);
    let values: Vec<f64> = inputs_raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite input value"));
    }
    let labels = if has_labels {
        let mut out = Vec::with_capacity(n);
        for c in labels_raw.chunks_exact(4) {
            let l = i32::from_le_bytes(c.try_into().unwrap());
            if l < 0 {
                return Err(Error::format(format!("negative label {l}")));
            }
            out.push(l as usize);
        }
        Some(out)
    } else {
        None
    };
    Dataset::new(name, Mat64::from_vec(n, d, values)?, labels)
}

/// Writes the binary format. Inputs are stored as `f32`.
pub fn save_bin(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_bin(dataset))?;
    Ok(())
}

pub fn load_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_bin(&bytes, dataset_name(path))
}

/// Loads by extension: `.csv` as CSV, anything else as the binary format.
pub fn load_any(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_bin(path),
    }
}

/// A seeded permutation of `0..n` cut into `ceil(n / batch_size)` batches.
/// The last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if batch_size > n {
        return Err(Error::config(format!(
            "batch_size {batch_size} exceeds sample count {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
