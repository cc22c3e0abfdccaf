//! Activation shards (`.acts`), atom labels, and ordered batch streaming.

use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerHeader, DTYPE_F32LE, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::matrix::{first_non_finite_row, DenseMatrix, MatrixView};

/// The (prompt, token) an activation came from.
///
/// Identity is the numeric triple; `snippet` is display text only and never
/// takes part in equality or hashing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomLabel {
    pub dataset_id: String,
    pub sequence_index: u64,
    pub token_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
}

impl AtomLabel {
    pub fn new(dataset_id: impl Into<String>, sequence_index: u64, token_index: u64) -> Self {
        AtomLabel {
            dataset_id: dataset_id.into(),
            sequence_index,
            token_index,
            snippet: None,
        }
    }

    pub fn with_snippet(mut self, snippet: impl Into<String>) -> Self {
        self.snippet = Some(snippet.into());
        self
    }

    pub fn key(&self) -> LabelKey {
        LabelKey {
            dataset_id: self.dataset_id.clone(),
            sequence_index: self.sequence_index,
            token_index: self.token_index,
        }
    }

    /// Field-exact comparison, snippet included.
    pub fn identical(&self, other: &AtomLabel) -> bool {
        self == other && self.snippet == other.snippet
    }
}

impl PartialEq for AtomLabel {
    fn eq(&self, other: &Self) -> bool {
        self.sequence_index == other.sequence_index
            && self.token_index == other.token_index
            && self.dataset_id == other.dataset_id
    }
}

impl Eq for AtomLabel {}

impl Hash for AtomLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.dataset_id.hash(state);
        self.sequence_index.hash(state);
        self.token_index.hash(state);
    }
}

/// Canonical identity of an [`AtomLabel`], ordered by dataset, sequence, token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelKey {
    pub dataset_id: String,
    pub sequence_index: u64,
    pub token_index: u64,
}

impl std::fmt::Display for LabelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.dataset_id, self.sequence_index, self.token_index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardHeader {
    format_version: u32,
    model_id: String,
    layer_id: String,
    d_model: usize,
    count: usize,
    dtype: String,
}

impl ContainerHeader for ShardHeader {
    fn count(&self) -> usize {
        self.count
    }
    fn d_model(&self) -> usize {
        self.d_model
    }
    fn dtype(&self) -> &str {
        &self.dtype
    }
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

/// A block of activation vectors from one model site, one labeled row each.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    model_id: String,
    layer_id: String,
    rows: DenseMatrix,
    labels: Vec<AtomLabel>,
}

impl ActivationShard {
    /// Builds a shard, checking that rows are finite and labels line up.
    pub fn new(
        model_id: impl Into<String>,
        layer_id: impl Into<String>,
        rows: DenseMatrix,
        labels: Vec<AtomLabel>,
    ) -> Result<Self> {
        let shard = ActivationShard {
            model_id: model_id.into(),
            layer_id: layer_id.into(),
            rows,
            labels,
        };
        shard.validate()?;
        Ok(shard)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.cols() == 0 {
            return Err(Error::Validation("d_model must be positive".into()));
        }
        if self.labels.len() != self.rows.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.rows.rows()
            )));
        }
        if let Some(r) = first_non_finite_row(self.rows.view()) {
            return Err(Error::Validation(format!("non-finite value in row {r}")));
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn d_model(&self) -> usize {
        self.rows.cols()
    }

    pub fn count(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn rows(&self) -> &DenseMatrix {
        &self.rows
    }

    pub fn labels(&self) -> &[AtomLabel] {
        &self.labels
    }

    pub fn batches(&self, batch_size: usize) -> BatchCursor<'_> {
        stream_batches(self, batch_size)
    }

    /// The whole shard as a single batch.
    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            range: 0..self.count(),
            rows: self.rows.view(),
            labels: &self.labels,
        }
    }
}

/// Writes `shard` to `path` and its labels to the sibling `.labels.jsonl`.
pub fn write_shard(shard: &ActivationShard, path: &Path) -> Result<()> {
    shard.validate()?;
    let header = ShardHeader {
        format_version: FORMAT_VERSION,
        model_id: shard.model_id.clone(),
        layer_id: shard.layer_id.clone(),
        d_model: shard.d_model(),
        count: shard.count(),
        dtype: DTYPE_F32LE.to_string(),
    };
    container::write(path, &header, shard.rows.as_slice(), &shard.labels)
}

pub fn read_shard(path: &Path) -> Result<ActivationShard> {
    let (header, payload) = container::read_payload::<ShardHeader>(path)?;
    let rows = DenseMatrix::from_vec(payload, header.count, header.d_model)?;
    if let Some(r) = first_non_finite_row(rows.view()) {
        return Err(Error::Validation(format!(
            "{}: non-finite value in row {r}",
            path.display()
        )));
    }
    let labels = container::read_labels(path, header.count)?;
    ActivationShard::new(header.model_id, header.layer_id, rows, labels)
}

/// Consecutive rows of a shard with their labels.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub range: Range<usize>,
    pub rows: MatrixView<'a>,
    pub labels: &'a [AtomLabel],
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Iterator over disjoint, in-order row ranges of a shard.
#[derive(Debug, Clone)]
pub struct BatchCursor<'a> {
    shard: &'a ActivationShard,
    batch_size: usize,
    position: usize,
}

impl<'a> Iterator for BatchCursor<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let count = self.shard.count();
        if self.position >= count {
            return None;
        }
        let end = (self.position + self.batch_size).min(count);
        let d = self.shard.d_model();
        let range = self.position..end;
        self.position = end;
        let data = &self.shard.rows.as_slice()[range.start * d..range.end * d];
        Some(Batch {
            rows: MatrixView::new(data, d).expect("aligned slice"),
            labels: &self.shard.labels[range.clone()],
            range,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.shard.count() - self.position.min(self.shard.count());
        let n = left.div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchCursor<'_> {}

/// Splits a shard into batches of `batch_size` rows (the last may be short).
///
/// # Panics
/// If `batch_size` is zero.
pub fn stream_batches(shard: &ActivationShard, batch_size: usize) -> BatchCursor<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    BatchCursor {
        shard,
        batch_size,
        position: 0,
    }
}
