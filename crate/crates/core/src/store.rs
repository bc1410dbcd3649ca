//! Interchange formats between the model-side harness and the engine.
//!
//! A run directory holds `manifest.json` plus one `layer_<i>.laps` file per
//! layer. Each layer file is the magic `LAPS`, a version byte, then three
//! row-major `[languages x units]` matrices, all little-endian:
//! token-active counts (`u64`), example-active counts (`u64`) and activation
//! sums (`f64`).
//!
//! The same module carries a small dense-matrix format (`LAPM`) used for
//! probe score matrices.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_MAGIC: &[u8; 4] = b"LAPS";
pub const LAYER_VERSION: u8 = 1;
pub const MATRIX_MAGIC: &[u8; 4] = b"LAPM";
pub const MATRIX_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: bad magic bytes, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u8,
        expected: u8,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: {actual} bytes exceeds the declared shape of {expected} bytes")]
    TrailingBytes {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("declared shape overflows addressable size")]
    ShapeOverflow,
    #[error("invalid aggregate: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Raw MLP neuron or sparse-autoencoder latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Raw,
    Sae,
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitKind::Raw => f.write_str("raw"),
            UnitKind::Sae => f.write_str("sae"),
        }
    }
}

/// Identity of a unit within one model run. Orders by layer, then index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: u32,
    pub index: u32,
    pub kind: UnitKind,
}

impl UnitId {
    pub fn new(layer: u32, index: u32, kind: UnitKind) -> Self {
        Self { layer, index, kind }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.layer, self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_name: String,
    pub kind: UnitKind,
    pub num_layers: usize,
    pub units_per_layer: usize,
    pub languages: Vec<String>,
    pub tokens_per_language: Vec<u64>,
    pub examples_per_language: Vec<u64>,
    pub condition: String,
}

impl RunManifest {
    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    /// Number of cells in one `[languages x units]` matrix.
    pub fn cells_per_matrix(&self) -> Result<usize, StoreError> {
        self.languages
            .len()
            .checked_mul(self.units_per_layer)
            .ok_or(StoreError::ShapeOverflow)
    }

    /// Exact byte length of a layer file for this manifest.
    pub fn layer_file_len(&self) -> Result<u64, StoreError> {
        let cells = self.cells_per_matrix()? as u64;
        cells
            .checked_mul(24)
            .and_then(|n| n.checked_add(HEADER_LEN as u64))
            .ok_or(StoreError::ShapeOverflow)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |msg: String| Err(StoreError::Invalid(msg));
        if self.languages.is_empty() {
            return invalid("manifest lists no languages".into());
        }
        let mut seen = std::collections::HashSet::new();
        for lang in &self.languages {
            if !seen.insert(lang.as_str()) {
                return invalid(format!("duplicate language {lang:?}"));
            }
        }
        let n = self.languages.len();
        if self.tokens_per_language.len() != n || self.examples_per_language.len() != n {
            return invalid(format!(
                "per-language totals have lengths {}/{} but {n} languages are declared",
                self.tokens_per_language.len(),
                self.examples_per_language.len()
            ));
        }
        for (k, lang) in self.languages.iter().enumerate() {
            if self.tokens_per_language[k] == 0 || self.examples_per_language[k] == 0 {
                return invalid(format!("language {lang:?} has a zero token or example total"));
            }
        }
        if u32::try_from(self.num_layers).is_err() || u32::try_from(self.units_per_layer).is_err() {
            return invalid("layer or unit count exceeds u32 range".into());
        }
        self.layer_file_len()?;
        Ok(())
    }
}

/// Per-layer statistics, each matrix row-major `[languages x units]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerStats {
    pub token_active_count: Vec<u64>,
    pub example_active_count: Vec<u64>,
    pub activation_sum: Vec<f64>,
}

impl LayerStats {
    pub fn zeros(cells: usize) -> Self {
        Self {
            token_active_count: vec![0; cells],
            example_active_count: vec![0; cells],
            activation_sum: vec![0.0; cells],
        }
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.token_active_count == other.token_active_count
            && self.example_active_count == other.example_active_count
            && self.activation_sum.len() == other.activation_sum.len()
            && self
                .activation_sum
                .iter()
                .zip(&other.activation_sum)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Count/sum summary of token-level activations for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationAggregate {
    pub manifest: RunManifest,
    pub layers: Vec<LayerStats>,
}

impl ActivationAggregate {
    /// All-zero aggregate shaped by `manifest`.
    pub fn zeros(manifest: RunManifest) -> Result<Self, StoreError> {
        manifest.validate()?;
        let cells = manifest.cells_per_matrix()?;
        let layers = (0..manifest.num_layers).map(|_| LayerStats::zeros(cells)).collect();
        Ok(Self { manifest, layers })
    }

    #[inline]
    pub fn cell(&self, language: usize, unit: usize) -> usize {
        language * self.manifest.units_per_layer + unit
    }

    pub fn kind(&self) -> UnitKind {
        self.manifest.kind
    }

    pub fn unit_count(&self) -> usize {
        self.manifest.num_layers * self.manifest.units_per_layer
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = UnitId> + '_ {
        let kind = self.manifest.kind;
        let per_layer = self.manifest.units_per_layer as u32;
        (0..self.manifest.num_layers as u32)
            .flat_map(move |l| (0..per_layer).map(move |i| UnitId::new(l, i, kind)))
    }

    /// Mean activation over all tokens of `language` for one unit.
    pub fn mean_activation(&self, layer: usize, language: usize, unit: usize) -> f64 {
        let sum = self.layers[layer].activation_sum[self.cell(language, unit)];
        sum / self.manifest.tokens_per_language[language] as f64
    }

    /// Equality that compares float payloads by bit pattern.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        m.validate()?;
        if self.layers.len() != m.num_layers {
            return Err(StoreError::Invalid(format!(
                "{} layer matrices for {} declared layers",
                self.layers.len(),
                m.num_layers
            )));
        }
        let cells = m.cells_per_matrix()?;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.token_active_count.len() != cells
                || layer.example_active_count.len() != cells
                || layer.activation_sum.len() != cells
            {
                return Err(StoreError::Invalid(format!(
                    "layer {l}: matrix sizes do not match {} languages x {} units",
                    m.languages.len(),
                    m.units_per_layer
                )));
            }
            for k in 0..m.languages.len() {
                let tokens = m.tokens_per_language[k];
                let examples = m.examples_per_language[k];
                for u in 0..m.units_per_layer {
                    let c = k * m.units_per_layer + u;
                    if layer.token_active_count[c] > tokens {
                        return Err(StoreError::Invalid(format!(
                            "layer {l}, language {}, unit {u}: token count {} exceeds total {tokens}",
                            m.languages[k], layer.token_active_count[c]
                        )));
                    }
                    if layer.example_active_count[c] > examples {
                        return Err(StoreError::Invalid(format!(
                            "layer {l}, language {}, unit {u}: example count {} exceeds total {examples}",
                            m.languages[k], layer.example_active_count[c]
                        )));
                    }
                    if !layer.activation_sum[c].is_finite() {
                        return Err(StoreError::Invalid(format!(
                            "layer {l}, language {}, unit {u}: non-finite activation sum",
                            m.languages[k]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer}.laps")
}

/// Writes `agg` as a run directory. Refuses aggregates that violate their invariants.
pub fn write_aggregate(agg: &ActivationAggregate, destination: &Path) -> Result<(), StoreError> {
    agg.validate()?;
    fs::create_dir_all(destination).map_err(io_err(destination))?;

    let manifest_path = destination.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&agg.manifest).map_err(|source| StoreError::Manifest {
        path: manifest_path.clone(),
        source,
    })?;
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;

    for (l, layer) in agg.layers.iter().enumerate() {
        let path = destination.join(layer_file_name(l));
        let mut buf = Vec::with_capacity(agg.manifest.layer_file_len()? as usize);
        buf.extend_from_slice(LAYER_MAGIC);
        buf.push(LAYER_VERSION);
        for v in &layer.token_active_count {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.example_active_count {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.activation_sum {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        file.write_all(&buf).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_manifest(source: &Path) -> Result<RunManifest, StoreError> {
    let path = source.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: RunManifest =
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Manifest { path, source })?;
    manifest.validate()?;
    Ok(manifest)
}

fn check_header(path: &Path, bytes: &[u8], magic: &[u8; 4], version: u8) -> Result<(), StoreError> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != magic {
        return Err(StoreError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if bytes[4] != version {
        return Err(StoreError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: bytes[4],
            expected: version,
        });
    }
    Ok(())
}

fn check_len(path: &Path, expected: u64, actual: u64) -> Result<(), StoreError> {
    use std::cmp::Ordering;
    match actual.cmp(&expected) {
        Ordering::Less => Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        }),
        Ordering::Greater => Err(StoreError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            actual,
        }),
        Ordering::Equal => Ok(()),
    }
}

fn u64_at(bytes: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8-byte slice"))
}

fn f64_at(bytes: &[u8], i: usize) -> f64 {
    f64::from_bits(u64_at(bytes, i))
}

/// Reads and validates a run directory.
pub fn read_aggregate(source: &Path) -> Result<ActivationAggregate, StoreError> {
    let manifest = read_manifest(source)?;
    let cells = manifest.cells_per_matrix()?;
    let expected_len = manifest.layer_file_len()?;

    let mut layers = Vec::with_capacity(manifest.num_layers);
    for l in 0..manifest.num_layers {
        let path = source.join(layer_file_name(l));
        // Size is checked against the manifest before the payload is read.
        let actual_len = fs::metadata(&path).map_err(io_err(&path))?.len();
        if actual_len >= HEADER_LEN as u64 {
            let mut header = [0u8; HEADER_LEN];
            let mut f = fs::File::open(&path).map_err(io_err(&path))?;
            io::Read::read_exact(&mut f, &mut header).map_err(io_err(&path))?;
            check_header(&path, &header, LAYER_MAGIC, LAYER_VERSION)?;
            check_len(&path, expected_len, actual_len)?;
        } else {
            check_len(&path, expected_len, actual_len)?;
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        check_len(&path, expected_len, bytes.len() as u64)?;

        let payload = &bytes[HEADER_LEN..];
        let token_active_count = (0..cells).map(|i| u64_at(payload, i)).collect();
        let example_active_count = (0..cells).map(|i| u64_at(payload, cells + i)).collect();
        let activation_sum = (0..cells).map(|i| f64_at(payload, 2 * cells + i)).collect();
        layers.push(LayerStats {
            token_active_count,
            example_active_count,
            activation_sum,
        });
    }

    let agg = ActivationAggregate { manifest, layers };
    agg.validate()?;
    Ok(agg)
}

/// Dense row-major `f64` matrix. NaN marks undefined entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix payload does not match shape");
        Self { rows, cols, values }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

/// `LAPM` file: magic, version byte, `u64` rows, `u64` cols, row-major `f64`s.
pub fn write_matrix(matrix: &DenseMatrix, path: &Path) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 16 + matrix.values.len() * 8);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.push(MATRIX_VERSION);
    buf.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols as u64).to_le_bytes());
    for v in &matrix.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    check_header(path, &bytes, MATRIX_MAGIC, MATRIX_VERSION)?;
    if bytes.len() < HEADER_LEN + 16 {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected: (HEADER_LEN + 16) as u64,
            actual: bytes.len() as u64,
        });
    }
    let dims = &bytes[HEADER_LEN..HEADER_LEN + 16];
    let rows = u64_at(dims, 0);
    let cols = u64_at(dims, 1);
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add((HEADER_LEN + 16) as u64))
        .ok_or(StoreError::ShapeOverflow)?;
    check_len(path, expected, bytes.len() as u64)?;
    let rows = usize::try_from(rows).map_err(|_| StoreError::ShapeOverflow)?;
    let cols = usize::try_from(cols).map_err(|_| StoreError::ShapeOverflow)?;
    let payload = &bytes[HEADER_LEN + 16..];
    let values = (0..rows * cols).map(|i| f64_at(payload, i)).collect();
    Ok(DenseMatrix { rows, cols, values })
}
