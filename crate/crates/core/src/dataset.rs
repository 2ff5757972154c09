//! Feature ingestion, evaluation annotations and synthetic fixtures.
//!
//! Binary feature files (`f64_binary`) are laid out as the magic bytes `CBM1`,
//! two little-endian `u64` (`n_samples`, `dim`) and the row-major
//! little-endian `f64` payload.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stage};

const FEATURE_MAGIC: &[u8; 4] = b"CBM1";

/// Distance of the first ring of blob centers from the origin.
pub const BLOB_CENTER_RADIUS: f64 = 0.75;

/// Dense `n_samples × dim` matrix of exemplar features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    ids: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Format("feature matrix must be non-empty".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (col, row) = (pos / values.nrows(), pos % values.nrows());
            return Err(Error::Format(format!(
                "non-finite value at row {row}, column {col}"
            )));
        }
        Ok(Self { values, ids: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Format(format!(
                "row {i} has {} columns, expected {dim}",
                rows[i].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, dim, |i, j| rows[i][j]))
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_samples() {
            return Err(Error::Format(format!(
                "{} ids for {} samples",
                ids.len(),
                self.n_samples()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate sample id {dup:?}")));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    Csv,
    F64Binary,
}

impl FeatureFormat {
    /// `.csv` files are CSV, everything else is read as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::F64Binary,
        }
    }
}

pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            io::Error::new(io::ErrorKind::UnexpectedEof, "feature file is empty"),
        ));
    }
    match format {
        FeatureFormat::Csv => parse_csv(&bytes),
        FeatureFormat::F64Binary => parse_binary(&bytes),
    }
}

pub fn save_features(
    features: &FeatureMatrix,
    path: impl AsRef<Path>,
    format: FeatureFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        FeatureFormat::Csv => features_to_csv(features),
        FeatureFormat::F64Binary => features_to_binary(features),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_csv(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Format(format!(
                        "non-finite value on line {}, column {j}",
                        line + 1
                    )));
                }
                rows.push(row);
            }
            // a non-numeric first row is a header
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(Error::Format(format!(
                    "non-numeric cell on line {}: {e}",
                    line + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("csv contains no samples".into()));
    }
    FeatureMatrix::from_rows(&rows)
}

fn features_to_csv(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = String::new();
    for row in features.values.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub(crate) fn write_matrix_payload(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub(crate) fn read_u64(reader: &mut &[u8]) -> Result<u64> {
    let mut buf = [0u8; 8];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_matrix_payload(
    reader: &mut &[u8],
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>> {
    let needed = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    if reader.len() < needed {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {needed}",
            reader.len()
        )));
    }
    let (payload, rest) = reader.split_at(needed);
    *reader = rest;
    let mut m = DMatrix::zeros(rows, cols);
    for (idx, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value at entry {idx}")));
        }
        m[(idx / cols, idx % cols)] = v;
    }
    Ok(m)
}

pub(crate) fn expect_magic(reader: &mut &[u8], magic: &[u8; 4]) -> Result<()> {
    if reader.len() < 4 || &reader[..4] != magic {
        return Err(Error::Format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    *reader = &reader[4..];
    Ok(())
}

fn features_to_binary(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * features.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.n_samples() as u64).to_le_bytes());
    out.extend_from_slice(&(features.dim() as u64).to_le_bytes());
    write_matrix_payload(&mut out, &features.values);
    out
}

fn parse_binary(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut reader = bytes;
    expect_magic(&mut reader, FEATURE_MAGIC)?;
    let n = read_u64(&mut reader)? as usize;
    let dim = read_u64(&mut reader)? as usize;
    let values = read_matrix_payload(&mut reader, n, dim)?;
    if !reader.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", reader.len())));
    }
    FeatureMatrix::new(values)
}

/// Positive and negative sample indices for one query exemplar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Labeled retrieval ground truth, keyed by query index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalAnnotations {
    pub queries: BTreeMap<usize, QueryAnnotation>,
}

impl EvalAnnotations {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        for (&q, ann) in &self.queries {
            if q >= n_samples {
                return Err(Error::Format(format!("query {q} out of range")));
            }
            for &i in ann.pos.iter().chain(&ann.neg) {
                if i >= n_samples {
                    return Err(Error::Format(format!("query {q}: index {i} out of range")));
                }
                if i == q {
                    return Err(Error::Format(format!("query {q} annotates itself")));
                }
            }
            let pos: HashSet<_> = ann.pos.iter().collect();
            if let Some(i) = ann.neg.iter().find(|i| pos.contains(i)) {
                return Err(Error::Format(format!(
                    "query {q}: index {i} is both positive and negative"
                )));
            }
        }
        Ok(())
    }

    /// Annotations from ground-truth class labels: same label is positive,
    /// different label negative. With `max_per_side`, each side is subsampled
    /// without replacement from `seed`.
    pub fn from_labels(labels: &[usize], max_per_side: Option<usize>, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0, Stage::Annotations);
        let mut queries = BTreeMap::new();
        for (q, &lq) in labels.iter().enumerate() {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (j, &lj) in labels.iter().enumerate() {
                if j == q {
                    continue;
                }
                if lj == lq {
                    pos.push(j);
                } else {
                    neg.push(j);
                }
            }
            if let Some(m) = max_per_side {
                for side in [&mut pos, &mut neg] {
                    if side.len() > m {
                        let mut picked: Vec<usize> =
                            sample(&mut rng, side.len(), m).into_iter().map(|k| side[k]).collect();
                        picked.sort_unstable();
                        *side = picked;
                    }
                }
            }
            queries.insert(q, QueryAnnotation { pos, neg });
        }
        Self { queries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs { n_clusters: usize },
    CircularManifold { period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(n_samples: usize, dim: usize, n_clusters: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::GaussianBlobs { n_clusters },
            n_samples,
            dim,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.dim == 0 {
            return Err(Error::InvalidSpec("n_samples and dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        match self.kind {
            SyntheticKind::GaussianBlobs { n_clusters } if n_clusters < 2 => {
                Err(Error::InvalidSpec("n_clusters must be >= 2".into()))
            }
            SyntheticKind::CircularManifold { period } if period == 0 => {
                Err(Error::InvalidSpec("period must be >= 1".into()))
            }
            SyntheticKind::CircularManifold { .. } if self.dim < 2 => {
                Err(Error::InvalidSpec("a circle needs dim >= 2".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Center of blob `cluster`: axis `cluster % dim`, at radius
/// `BLOB_CENTER_RADIUS · (1 + cluster / dim)`.
pub fn blob_center(cluster: usize, dim: usize) -> DVector<f64> {
    let mut c = DVector::zeros(dim);
    c[cluster % dim] = BLOB_CENTER_RADIUS * (1 + cluster / dim) as f64;
    c
}

/// Samples are assigned to clusters (or angular bins) in contiguous,
/// balanced index ranges: sample `i` gets label `i · n_groups / n_samples`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureMatrix, Vec<usize>)> {
    spec.validate()?;
    let n = spec.n_samples;
    let dim = spec.dim;
    let mut rng = rng::stream(spec.seed, 0, Stage::Synthetic);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidSpec(format!("noise: {e}")))?;

    let mut values = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        SyntheticKind::GaussianBlobs { n_clusters } => {
            let centers: Vec<_> = (0..n_clusters).map(|c| blob_center(c, dim)).collect();
            for i in 0..n {
                let label = i * n_clusters / n;
                labels.push(label);
                for j in 0..dim {
                    values[(i, j)] = centers[label][j];
                }
            }
        }
        SyntheticKind::CircularManifold { period } => {
            for i in 0..n {
                let theta = TAU * i as f64 / n as f64;
                labels.push(i * period / n);
                values[(i, 0)] = theta.cos();
                values[(i, 1)] = theta.sin();
            }
        }
    }
    // row-major draw order keeps the stream layout independent of storage order
    for i in 0..n {
        for j in 0..dim {
            values[(i, j)] += noise.sample(&mut rng);
        }
    }
    Ok((FeatureMatrix::new(values)?, labels))
}
