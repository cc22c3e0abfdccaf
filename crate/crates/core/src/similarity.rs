//! Similarity indices between dictionaries and activation sets.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::activation_store::LabelKey;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matrix::MatrixView;

/// Canonical labels of a dictionary, vectors and snippets dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub elements: BTreeSet<LabelKey>,
    pub source: String,
}

impl LabelSet {
    pub fn new(elements: impl IntoIterator<Item = LabelKey>, source: impl Into<String>) -> Self {
        LabelSet {
            elements: elements.into_iter().collect(),
            source: source.into(),
        }
    }

    pub fn from_dictionary(dictionary: &Dictionary, source: impl Into<String>) -> Self {
        LabelSet::new(dictionary.label_keys(), source)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.elements.iter().filter(|k| large.elements.contains(*k)).count()
    }

    pub fn union_len(&self, other: &LabelSet) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }

    pub fn dataset_ids(&self) -> BTreeSet<&str> {
        self.elements.iter().map(|k| k.dataset_id.as_str()).collect()
    }
}

/// Warns and returns false when two sets draw labels from different datasets,
/// in which case their Jaccard index says nothing about the models.
pub fn same_dataset_universe(a: &LabelSet, b: &LabelSet) -> bool {
    let (da, db) = (a.dataset_ids(), b.dataset_ids());
    if da.is_empty() || db.is_empty() || da == db {
        return true;
    }
    log::warn!(
        "label sets {:?} and {:?} use different dataset ids ({:?} vs {:?})",
        a.source,
        b.source,
        da,
        db
    );
    false
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets are defined to score 1.
pub fn jaccard(a: &LabelSet, b: &LabelSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        log::warn!("jaccard of two empty label sets defined as 1.0");
        return 1.0;
    }
    inter as f64 / union as f64
}

pub fn union_labels(sets: &[LabelSet]) -> Result<LabelSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Validation("union of zero label sets".into()))?;
    let mut out = LabelSet {
        elements: BTreeSet::new(),
        source: if sets.len() == 1 {
            first.source.clone()
        } else {
            format!(
                "union({})",
                sets.iter().map(|s| s.source.as_str()).collect::<Vec<_>>().join(",")
            )
        },
    };
    for s in sets {
        out.elements.extend(s.elements.iter().cloned());
    }
    Ok(out)
}

/// Dense table of similarity values with named rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_units: Vec<String>,
    pub col_units: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(row_units: Vec<String>, col_units: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != row_units.len() || values.iter().any(|r| r.len() != col_units.len()) {
            return Err(Error::Validation("similarity matrix shape does not match units".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("similarity matrix has non-finite entries".into()));
        }
        Ok(SimilarityMatrix {
            row_units,
            col_units,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    /// `row_unit,col_unit,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_unit,col_unit,value\n");
        for (r, row) in self.row_units.iter().zip(&self.values) {
            for (c, v) in self.col_units.iter().zip(row) {
                let _ = writeln!(out, "{r},{c},{v}");
            }
        }
        out
    }
}

/// Per-layer representations of one model, in layer order.
#[derive(Debug, Clone)]
pub struct ModelLayers<T> {
    pub model_id: String,
    pub layers: Vec<T>,
}

impl<T> ModelLayers<T> {
    pub fn new(model_id: impl Into<String>, layers: Vec<T>) -> Self {
        ModelLayers {
            model_id: model_id.into(),
            layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    pub model_a: String,
    pub model_b: String,
    pub matrix: SimilarityMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMatchReport {
    /// Score over all ordered model pairs, self-pairs included.
    pub accuracy_literal: f64,
    /// Same score restricted to pairs of distinct models.
    pub accuracy_excluding_self: f64,
    pub models: Vec<String>,
    pub layer_count: usize,
    #[serde(rename = "per_pair_matrices")]
    pub per_pair: Vec<PairMatrix>,
}

impl LayerMatchReport {
    /// Mean of the matrices over pairs of distinct models.
    pub fn mean_cross_model_matrix(&self) -> Option<SimilarityMatrix> {
        let cross: Vec<_> = self.per_pair.iter().filter(|p| p.model_a != p.model_b).collect();
        let first = cross.first()?;
        let n = self.layer_count;
        let mut values = vec![vec![0.0; n]; n];
        for p in &cross {
            for (i, row) in p.matrix.values.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    values[i][j] += v / cross.len() as f64;
                }
            }
        }
        Some(SimilarityMatrix {
            row_units: first.matrix.row_units.clone(),
            col_units: first.matrix.col_units.clone(),
            values,
        })
    }
}

/// True when column `i` holds the unique maximum of row `i`.
fn diagonal_is_unique_max(row: &[f64], i: usize) -> bool {
    let target = row[i];
    row.iter().enumerate().all(|(j, &v)| j == i || v < target)
}

/// Layer-matching benchmark: for every ordered pair of models and every
/// layer `i` of the first, checks whether layer `i` of the second is the
/// strictly most similar. A tied maximum counts as a miss.
pub fn layer_matching_accuracy<T, F>(models: &[ModelLayers<T>], index: F) -> Result<LayerMatchReport>
where
    T: Sync,
    F: Fn(&T, &T) -> f64 + Sync,
{
    if models.len() < 2 {
        return Err(Error::Validation("layer matching needs at least two models".into()));
    }
    let layers = models[0].layers.len();
    if layers == 0 {
        return Err(Error::Validation("models have no layers".into()));
    }
    for m in models {
        if m.layers.len() != layers {
            return Err(Error::Validation(format!(
                "model {} has {} layers, expected {layers}",
                m.model_id,
                m.layers.len()
            )));
        }
    }

    let units = |m: &ModelLayers<T>| -> Vec<String> { (0..layers).map(|i| format!("{}/{i}", m.model_id)).collect() };
    let mut per_pair = Vec::with_capacity(models.len() * models.len());
    let (mut hits_all, mut hits_cross) = (0usize, 0usize);
    for a in models {
        for b in models {
            let values: Vec<Vec<f64>> = {
                use rayon::prelude::*;
                (0..layers)
                    .into_par_iter()
                    .map(|i| (0..layers).map(|j| index(&a.layers[i], &b.layers[j])).collect())
                    .collect()
            };
            let hits = (0..layers).filter(|&i| diagonal_is_unique_max(&values[i], i)).count();
            hits_all += hits;
            if !std::ptr::eq(a, b) {
                hits_cross += hits;
            }
            per_pair.push(PairMatrix {
                model_a: a.model_id.clone(),
                model_b: b.model_id.clone(),
                matrix: SimilarityMatrix::new(units(a), units(b), values)?,
            });
        }
    }
    let m = models.len() as f64;
    let l = layers as f64;
    Ok(LayerMatchReport {
        accuracy_literal: hits_all as f64 / (m * m * l),
        accuracy_excluding_self: hits_cross as f64 / (m * (m - 1.0) * l),
        models: models.iter().map(|m| m.model_id.clone()).collect(),
        layer_count: layers,
        per_pair,
    })
}

/// Cross-entropy losses: unpatched, patched with reconstructions, zero-ablated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeLossInputs {
    pub h_orig: f64,
    pub h_star: f64,
    pub h_zero: f64,
}

/// `(h_star - h_zero) / (h_orig - h_zero)`: 1 preserves the model's loss,
/// 0 is as bad as zero-ablation.
pub fn ce_loss_score(inputs: &CeLossInputs) -> Result<f64> {
    let denom = inputs.h_orig - inputs.h_zero;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Validation(
            "h_orig and h_zero must differ for the CE loss score".into(),
        ));
    }
    Ok((inputs.h_star - inputs.h_zero) / denom)
}

fn centered_columns(m: MatrixView<'_>) -> Vec<Vec<f64>> {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|c| {
            let col: Vec<f64> = m.iter_rows().map(|r| f64::from(r[c])).collect();
            let mean = col.iter().sum::<f64>() / n;
            col.into_iter().map(|v| v - mean).collect()
        })
        .collect()
}

fn frobenius_sq_cross(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for u in a {
        for v in b {
            let d: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            total += d * d;
        }
    }
    total
}

/// Linear CKA between two activation matrices over the same `N` inputs.
pub fn linear_cka(x: MatrixView<'_>, y: MatrixView<'_>) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            found: y.rows(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Validation("linear CKA needs at least two samples".into()));
    }
    let xc = centered_columns(x);
    let yc = centered_columns(y);
    let xx = frobenius_sq_cross(&xc, &xc).sqrt();
    let yy = frobenius_sq_cross(&yc, &yc).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Validation("linear CKA of a zero-variance input".into()));
    }
    Ok((frobenius_sq_cross(&yc, &xc) / (xx * yy)).clamp(0.0, 1.0))
}
