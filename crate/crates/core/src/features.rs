//! Feature matrices from iconometry, precomputed image embeddings and graph
//! embeddings, and their alignment on a common sample universe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{LabelMode, TaskLabeling};
use crate::error::{Error, Result};
use crate::iconometry::ProportionVector;
use crate::kgraph::{ATTRIBUTE_PREFIX, EMBEDDING_DIM};
use crate::learn::Labels;
use crate::matrix::DenseMatrix;

pub const BINARY_MAGIC: &[u8; 7] = b"ICOEMB1";
pub const IMAGE_EMBEDDING_DIM: usize = 2048;
pub const ICONOMETRY_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Iconometry,
    ImageEmbeddingFull,
    ImageEmbeddingCropped,
    ImageEmbeddingFace,
    GraphKg,
    GraphKgTime,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 6] = [
        FeatureSource::Iconometry,
        FeatureSource::ImageEmbeddingFull,
        FeatureSource::ImageEmbeddingCropped,
        FeatureSource::ImageEmbeddingFace,
        FeatureSource::GraphKg,
        FeatureSource::GraphKgTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Iconometry => "iconometry",
            FeatureSource::ImageEmbeddingFull => "image_embedding_full",
            FeatureSource::ImageEmbeddingCropped => "image_embedding_cropped",
            FeatureSource::ImageEmbeddingFace => "image_embedding_face",
            FeatureSource::GraphKg => "graph_kg",
            FeatureSource::GraphKgTime => "graph_kg_time",
        }
    }

    /// Row label used in the comparison table.
    pub fn display_name(self) -> &'static str {
        match self {
            FeatureSource::Iconometry => "Iconometry",
            FeatureSource::ImageEmbeddingFull => "ImageEmb_full",
            FeatureSource::ImageEmbeddingCropped => "ImageEmb_cropped",
            FeatureSource::ImageEmbeddingFace => "ImageEmb_face",
            FeatureSource::GraphKg => "Node2Vec_KG",
            FeatureSource::GraphKgTime => "Node2Vec_KG_time",
        }
    }

    pub fn expected_dim(self) -> usize {
        match self {
            FeatureSource::Iconometry => ICONOMETRY_DIM,
            FeatureSource::ImageEmbeddingFull
            | FeatureSource::ImageEmbeddingCropped
            | FeatureSource::ImageEmbeddingFace => IMAGE_EMBEDDING_DIM,
            FeatureSource::GraphKg | FeatureSource::GraphKgTime => EMBEDDING_DIM,
        }
    }

    /// For graph sources, whether the graph carries the century attribute.
    pub fn graph_time(self) -> Option<bool> {
        match self {
            FeatureSource::GraphKg => Some(false),
            FeatureSource::GraphKgTime => Some(true),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                Error::Validation(format!("unknown feature source '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Sample-by-feature matrix with sorted, unique sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    source: FeatureSource,
    sample_ids: Vec<String>,
    matrix: DenseMatrix,
}

impl FeatureMatrix {
    pub fn new(source: FeatureSource, sample_ids: Vec<String>, matrix: DenseMatrix) -> Result<Self> {
        if matrix.rows() != sample_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: sample_ids.len(),
                got: matrix.rows(),
                context: format!(" rows in {source} matrix"),
            });
        }
        if matrix.cols() != source.expected_dim() {
            return Err(Error::DimensionMismatch {
                expected: source.expected_dim(),
                got: matrix.cols(),
                context: format!(" columns for source {source}"),
            });
        }
        if let Some(w) = sample_ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "{source} sample ids must be sorted and unique (at '{}', '{}')",
                w[0], w[1]
            )));
        }
        if let Some(i) = (0..matrix.rows()).find(|&i| matrix.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!(
                "{source} features of '{}' are not finite",
                sample_ids[i]
            )));
        }
        Ok(Self {
            source,
            sample_ids,
            matrix,
        })
    }

    /// Builds a matrix from unordered `(id, vector)` rows; duplicate ids and
    /// ragged vectors are errors.
    pub fn from_rows(source: FeatureSource, mut rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = source.expected_dim();
        for (id, v) in &rows {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    context: format!(" values for '{id}' ({source})"),
                });
            }
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("duplicate sample id '{}' in {source}", w[0].0)));
        }
        let ids = rows.iter().map(|r| r.0.clone()).collect();
        let data = rows.into_iter().flat_map(|r| r.1).collect::<Vec<f64>>();
        let n = source_rows(&data, dim);
        Self::new(source, ids, DenseMatrix::from_vec(n, dim, data))
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.sample_ids
            .binary_search_by(|s| s.as_str().cmp(id))
            .ok()
            .map(|i| self.matrix.row(i))
    }

    /// Rows for the given ids, in the given order. Every id must be present.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for id in ids {
            let row = self.row_of(id).ok_or_else(|| {
                Error::Validation(format!("sample '{id}' missing from {} features", self.source))
            })?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            source: self.source,
            sample_ids: ids.to_vec(),
            matrix: DenseMatrix::from_vec(ids.len(), self.dim(), data),
        })
    }
}

fn source_rows(data: &[f64], dim: usize) -> usize {
    data.len().checked_div(dim).unwrap_or(0)
}

/// Proportions as a 6-column matrix in the order lh, rh, el, e, n, lf.
pub fn iconometry_features(vectors: &[ProportionVector]) -> Result<FeatureMatrix> {
    let rows = vectors
        .iter()
        .map(|p| (p.image_id.clone(), p.to_array().to_vec()))
        .collect();
    FeatureMatrix::from_rows(FeatureSource::Iconometry, rows)
}

// ---------------------------------------------------------------------------
// Embedding files

#[derive(Debug, Clone)]
pub struct EmbeddingIngest {
    pub matrix: FeatureMatrix,
    /// Ids dropped because the catalog does not know them.
    pub excluded: Vec<String>,
}

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::parse(format!("{source}:{line}"), msg)
}

/// Reads CSV rows `id,v0,...`. The first line is a header whose content is
/// ignored, so proportion and node-embedding CSVs load as they are written.
pub fn read_embeddings_csv<R: Read>(reader: R, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut dim = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(source, line, e.to_string()))?;
        let id = rec.get(0).unwrap_or("").trim();
        if id.is_empty() {
            return Err(parse_err(source, line, "empty sample id"));
        }
        let values = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(source, line, format!("field v{j}: '{v}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    source,
                    line,
                    format!("ragged row: expected {d} values, got {}", values.len()),
                ))
            }
            _ => {}
        }
        rows.push((id.to_string(), values));
    }
    Ok(rows)
}

/// Reads the binary layout: magic `ICOEMB1`, u64 row count, u64 dimension,
/// then per row a u32 id length, the UTF-8 id and `dim` f64 values, all
/// little-endian.
pub fn read_embeddings_binary<R: Read>(reader: R, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = BufReader::new(reader);
    let short = |what: &str| Error::parse(source, format!("truncated file while reading {what}"));
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| short("magic"))?;
    if &magic != BINARY_MAGIC {
        return Err(Error::parse(source, "missing ICOEMB1 header"));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| short("row count"))?;
    let rows = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(|_| short("dimension"))?;
    let dim = u64::from_le_bytes(u64buf) as usize;
    let mut out = Vec::new();
    for row in 0..rows {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| short(&format!("row {row} id length")))?;
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut id).map_err(|_| short(&format!("row {row} id")))?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::parse(source, format!("row {row}: id is not UTF-8")))?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u64buf).map_err(|_| short(&format!("row {row} values")))?;
            values.push(f64::from_le_bytes(u64buf));
        }
        out.push((id, values));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(source, e))? != 0 {
        return Err(Error::parse(source, format!("trailing bytes after {rows} rows")));
    }
    Ok(out)
}

pub fn write_embeddings_binary<W: Write>(m: &FeatureMatrix, mut w: W) -> Result<()> {
    write_rows_binary(m.sample_ids(), m.matrix(), &mut w)
}

pub fn write_rows_binary<W: Write>(ids: &[String], m: &DenseMatrix, w: &mut W) -> Result<()> {
    let io = |e| Error::io("embedding output", e);
    w.write_all(BINARY_MAGIC).map_err(io)?;
    w.write_all(&(ids.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.cols() as u64).to_le_bytes()).map_err(io)?;
    for (i, id) in ids.iter().enumerate() {
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        for v in m.row(i) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// CSV `<id_column>,v0,...,v{d-1}` with shortest round-trip float formatting.
pub fn write_rows_csv<W: Write>(id_column: &str, ids: &[String], m: &DenseMatrix, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    let mut header = vec![id_column.to_string()];
    header.extend((0..m.cols()).map(|j| format!("v{j}")));
    w.write_record(&header).map_err(wrap)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

pub fn write_embeddings_csv<W: Write>(m: &FeatureMatrix, w: W) -> Result<()> {
    write_rows_csv("image_id", m.sample_ids(), m.matrix(), w)
}

/// Reads raw rows from a CSV or `ICOEMB1` binary file, detected by content.
pub fn read_embedding_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(BINARY_MAGIC) {
        read_embeddings_binary(bytes.as_slice(), &name)
    } else {
        read_embeddings_csv(bytes.as_slice(), &name)
    }
}

/// Loads an embedding file for `source`. With `known_ids`, rows whose id is
/// not a catalog image are excluded; graph attribute nodes are dropped
/// without a warning since they are never samples.
pub fn ingest_embeddings(
    path: &Path,
    source: FeatureSource,
    known_ids: Option<&BTreeSet<String>>,
) -> Result<EmbeddingIngest> {
    let rows = read_embedding_rows(path)?;
    ingest_rows(rows, source, known_ids)
}

pub fn ingest_rows(
    rows: Vec<(String, Vec<f64>)>,
    source: FeatureSource,
    known_ids: Option<&BTreeSet<String>>,
) -> Result<EmbeddingIngest> {
    let mut kept = Vec::with_capacity(rows.len());
    let mut excluded = Vec::new();
    for (id, v) in rows {
        if source.graph_time().is_some() && id.starts_with(ATTRIBUTE_PREFIX) {
            continue;
        }
        match known_ids {
            Some(known) if !known.contains(&id) => excluded.push(id),
            _ => kept.push((id, v)),
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "{source}: {} id(s) not in the catalog were excluded: {}",
            excluded.len(),
            preview(&excluded)
        );
    }
    Ok(EmbeddingIngest {
        matrix: FeatureMatrix::from_rows(source, kept)?,
        excluded,
    })
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 5 {
        s.push_str(&format!(", ... ({} more)", ids.len() - 5));
    }
    s
}

// ---------------------------------------------------------------------------
// Alignment

/// Matrices restricted to the samples shared by all of them and by a task's
/// labeling, row-aligned, with encoded labels.
#[derive(Debug, Clone)]
pub struct AlignedData {
    pub sample_ids: Vec<String>,
    pub matrices: Vec<FeatureMatrix>,
    /// Class names in label-index order, restricted to classes present.
    pub classes: Vec<String>,
    pub labels: Labels,
}

pub fn common_universe(matrices: &[&FeatureMatrix], labeling: &TaskLabeling) -> Result<AlignedData> {
    if matrices.is_empty() {
        return Err(Error::Validation("at least one feature matrix is required".into()));
    }
    let mut universe: BTreeSet<&String> = labeling.labels.keys().collect();
    for m in matrices {
        let ids: BTreeSet<&String> = m.sample_ids().iter().collect();
        universe = universe.intersection(&ids).copied().collect();
    }
    if universe.is_empty() {
        let mut sizes: Vec<(usize, String)> = matrices
            .iter()
            .map(|m| (m.len(), format!("{} features ({} samples)", m.source(), m.len())))
            .collect();
        sizes.push((
            labeling.len(),
            format!("{} labeling ({} samples)", labeling.task.as_str(), labeling.len()),
        ));
        let smallest = sizes.into_iter().min_by_key(|s| s.0).map(|s| s.1).unwrap_or_default();
        return Err(Error::EmptyIntersection { smallest });
    }
    let sample_ids: Vec<String> = universe.into_iter().cloned().collect();
    let present: BTreeSet<&String> = sample_ids.iter().flat_map(|id| &labeling.labels[id]).collect();
    let classes: Vec<String> = labeling
        .classes()
        .into_iter()
        .filter(|c| present.contains(c))
        .collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = match labeling.mode {
        LabelMode::SingleLabel => Labels::Single {
            classes: classes.len(),
            y: sample_ids
                .iter()
                .map(|id| {
                    let set = &labeling.labels[id];
                    match set.iter().next() {
                        Some(c) if set.len() == 1 => Ok(index[c.as_str()]),
                        _ => Err(Error::Validation(format!(
                            "single-label task {} has {} labels for '{id}'",
                            labeling.task.as_str(),
                            set.len()
                        ))),
                    }
                })
                .collect::<Result<_>>()?,
        },
        LabelMode::MultiLabel => Labels::Multi {
            classes: classes.len(),
            y: sample_ids
                .iter()
                .map(|id| {
                    let set = &labeling.labels[id];
                    classes.iter().map(|c| set.contains(c)).collect()
                })
                .collect(),
        },
    };
    let matrices = matrices
        .iter()
        .map(|m| m.select(&sample_ids))
        .collect::<Result<_>>()?;
    Ok(AlignedData {
        sample_ids,
        matrices,
        classes,
        labels,
    })
}
