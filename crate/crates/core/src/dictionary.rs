//! Greedily constructed, labeled dictionaries of activations (`.itda`).
//!
//! Training walks batches in stored order. Every sample in a batch is
//! encoded against the dictionary as it stood at the start of the batch;
//! samples whose reconstruction loss exceeds `tau` are normalized and
//! appended in row order. After every batch, new atoms that are nearly
//! collinear with an earlier atom are dropped.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationShard, AtomLabel, Batch, LabelKey};
use crate::container::{self, ContainerHeader, DTYPE_F32LE, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::matching_pursuit::{encode_rows_unchecked, validate_dictionary, MpConfig, UNIT_NORM_TOLERANCE};
use crate::matrix::{dot, first_non_finite_row, normalized, DenseMatrix, MatrixView};

/// Vectors shorter than this cannot be normalized and are never added.
pub const MIN_ATOM_NORM: f64 = 1e-8;

pub const DEFAULT_DEDUP_COSINE: f64 = 0.999;

/// Losses at or below this fraction of `||x||^2` are `f32` rounding noise
/// (an activation encoded against its own normalized copy) and count as 0.
pub const RELATIVE_NOISE_FLOOR: f64 = 1e-12;

/// Norm deviation accepted when loading a dictionary from disk.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub layer_id: String,
    pub dataset_id: Option<String>,
    pub tau: f64,
    pub l0: usize,
    pub relative_tau: bool,
    pub dedup_cosine_threshold: f64,
    pub trained_token_count: u64,
    /// Size before [`crop`], if the dictionary was cropped.
    pub cropped_from: Option<usize>,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            model_id: String::new(),
            layer_id: String::new(),
            dataset_id: None,
            tau: 0.0,
            l0: 1,
            relative_tau: false,
            dedup_cosine_threshold: DEFAULT_DEDUP_COSINE,
            trained_token_count: 0,
            cropped_from: None,
        }
    }
}

/// Unit-norm atoms in insertion order, each with a unique label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DenseMatrix,
    labels: Vec<AtomLabel>,
    provenance: Provenance,
}

impl Dictionary {
    pub fn new(atoms: DenseMatrix, labels: Vec<AtomLabel>, provenance: Provenance) -> Result<Self> {
        if atoms.cols() == 0 {
            return Err(Error::Validation("d_model must be positive".into()));
        }
        if labels.len() != atoms.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} atoms",
                labels.len(),
                atoms.rows()
            )));
        }
        check_norms(atoms.view(), UNIT_NORM_TOLERANCE)?;
        let mut seen = HashSet::with_capacity(labels.len());
        for (j, l) in labels.iter().enumerate() {
            if !seen.insert(l) {
                return Err(Error::Validation(format!("atom {j} repeats label {}", l.key())));
            }
        }
        Ok(Dictionary {
            atoms,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.rows() == 0
    }

    pub fn d_model(&self) -> usize {
        self.atoms.cols()
    }

    pub fn atoms(&self) -> &DenseMatrix {
        &self.atoms
    }

    pub fn labels(&self) -> &[AtomLabel] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn label_keys(&self) -> impl Iterator<Item = LabelKey> + '_ {
        self.labels.iter().map(AtomLabel::key)
    }
}

fn check_norms(atoms: MatrixView<'_>, tol: f64) -> Result<()> {
    if let Some(r) = first_non_finite_row(atoms) {
        return Err(Error::Validation(format!("atom {r} has non-finite values")));
    }
    for (j, row) in atoms.iter_rows().enumerate() {
        let norm = dot(row, row).sqrt();
        if !((norm - 1.0).abs() <= tol) {
            return Err(Error::Validation(format!(
                "atom {j} has norm {norm:.9}, expected 1 within {tol}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Loss threshold: a sample is added when its loss is strictly above it.
    pub tau: f64,
    pub l0: usize,
    pub batch_size: usize,
    pub dedup_cosine_threshold: f64,
    pub max_dict_size: Option<usize>,
    /// Compare `loss / ||x||^2` against `tau` instead of the absolute loss.
    pub relative_tau: bool,
    pub residual_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.0,
            l0: 8,
            batch_size: 1024,
            dedup_cosine_threshold: DEFAULT_DEDUP_COSINE,
            max_dict_size: None,
            relative_tau: false,
            residual_epsilon: crate::matching_pursuit::DEFAULT_RESIDUAL_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn new(tau: f64, l0: usize) -> Self {
        TrainConfig {
            tau,
            l0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Validation(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        check_dedup_threshold(self.dedup_cosine_threshold)?;
        if self.max_dict_size == Some(0) {
            return Err(Error::Validation("max_dict_size must be positive".into()));
        }
        self.mp().validate()
    }

    fn mp(&self) -> MpConfig {
        MpConfig::new(self.l0).with_residual_epsilon(self.residual_epsilon)
    }
}

fn check_dedup_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Validation(format!(
            "dedup cosine threshold must be in (0, 1], got {t}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub batches: u64,
    pub tokens_seen: u64,
    /// Sum of per-sample losses against the batch-start dictionary.
    pub loss_sum: f64,
    pub added: u64,
    pub dedup_removed: u64,
    pub skipped_zero_norm: u64,
    pub skipped_duplicate_label: u64,
    /// Training stopped because `max_dict_size` was reached.
    pub halted: bool,
}

impl TrainStats {
    pub fn mean_loss(&self) -> f64 {
        if self.tokens_seen == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens_seen as f64
        }
    }
}

/// Incremental dictionary construction.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    atoms: Option<DenseMatrix>,
    labels: Vec<AtomLabel>,
    seen_labels: HashSet<LabelKey>,
    model_id: Option<String>,
    layer_id: Option<String>,
    dataset_id: Option<String>,
    stats: TrainStats,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            atoms: None,
            labels: Vec::new(),
            seen_labels: HashSet::new(),
            model_id: None,
            layer_id: None,
            dataset_id: None,
            stats: TrainStats::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stats(&self) -> &TrainStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.atoms.as_ref().map_or(0, DenseMatrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_halted(&self) -> bool {
        self.stats.halted
    }

    fn check_dim(&mut self, d: usize) -> Result<()> {
        match &self.atoms {
            Some(a) if a.cols() != d => Err(Error::DimensionMismatch {
                expected: a.cols(),
                found: d,
            }),
            Some(_) => Ok(()),
            None => {
                self.atoms = Some(DenseMatrix::empty(d));
                Ok(())
            }
        }
    }

    fn note_source(&mut self, shard: &ActivationShard) {
        self.model_id.get_or_insert_with(|| shard.model_id().to_string());
        self.layer_id.get_or_insert_with(|| shard.layer_id().to_string());
        if let Some(l) = shard.labels().first() {
            self.dataset_id.get_or_insert_with(|| l.dataset_id.clone());
        }
    }

    /// Preloads every usable row of `shard` as an atom, before training.
    pub fn seed(&mut self, shard: &ActivationShard) -> Result<()> {
        self.check_dim(shard.d_model())?;
        let start = self.len();
        for (row, label) in shard.rows().iter_rows().zip(shard.labels()) {
            self.try_append(row, label);
        }
        self.dedup_new(start);
        self.enforce_cap();
        Ok(())
    }

    /// Trains on every batch of `shard`.
    pub fn push_shard(&mut self, shard: &ActivationShard) -> Result<()> {
        self.note_source(shard);
        for batch in shard.batches(self.config.batch_size) {
            if self.is_halted() {
                break;
            }
            self.push_batch(batch)?;
        }
        Ok(())
    }

    /// One round of encode / append / dedup. No-op once halted.
    pub fn push_batch(&mut self, batch: Batch<'_>) -> Result<()> {
        if self.is_halted() || batch.is_empty() {
            return Ok(());
        }
        self.check_dim(batch.rows.cols())?;
        if let Some(r) = first_non_finite_row(batch.rows) {
            return Err(Error::Validation(format!(
                "row {} has non-finite values",
                batch.range.start + r
            )));
        }
        let frozen = self.len();
        let losses: Vec<f64> = if frozen == 0 {
            batch.rows.iter_rows().map(|r| dot(r, r)).collect()
        } else {
            let atoms = self.atoms.as_ref().expect("dimension fixed");
            encode_rows_unchecked(batch.rows, atoms.view(), &self.config.mp())
                .into_iter()
                .map(|c| c.residual_sq)
                .collect()
        };

        for ((row, label), &raw_loss) in batch.rows.iter_rows().zip(batch.labels).zip(&losses) {
            let energy = dot(row, row);
            let loss = if raw_loss <= RELATIVE_NOISE_FLOOR * energy {
                0.0
            } else {
                raw_loss
            };
            self.stats.tokens_seen += 1;
            self.stats.loss_sum += loss;
            let score = if self.config.relative_tau {
                if energy > 0.0 {
                    loss / energy
                } else {
                    0.0
                }
            } else {
                loss
            };
            if score > self.config.tau {
                self.try_append(row, label);
            }
        }
        self.stats.batches += 1;
        self.dedup_new(frozen);
        self.enforce_cap();
        Ok(())
    }

    fn try_append(&mut self, row: &[f32], label: &AtomLabel) {
        let Some(unit) = normalized(row, MIN_ATOM_NORM) else {
            self.stats.skipped_zero_norm += 1;
            return;
        };
        if !self.seen_labels.insert(label.key()) {
            self.stats.skipped_duplicate_label += 1;
            return;
        }
        self.atoms.as_mut().expect("dimension fixed").push_row(&unit);
        self.labels.push(label.clone());
        self.stats.added += 1;
    }

    fn dedup_new(&mut self, start: usize) {
        let Some(atoms) = self.atoms.as_mut() else { return };
        let keep = dedup_mask(atoms.view(), start, self.config.dedup_cosine_threshold);
        let removed = keep.iter().filter(|k| !**k).count();
        if removed == 0 {
            return;
        }
        atoms.retain_rows(|r| keep[r]);
        let mut i = 0;
        self.labels.retain(|l| {
            let k = keep[i];
            i += 1;
            if !k {
                self.seen_labels.remove(&l.key());
            }
            k
        });
        self.stats.dedup_removed += removed as u64;
    }

    fn enforce_cap(&mut self) {
        let Some(cap) = self.config.max_dict_size else { return };
        if self.len() >= cap {
            let atoms = self.atoms.as_mut().expect("non-empty");
            atoms.truncate(cap);
            for l in self.labels.drain(cap..) {
                self.seen_labels.remove(&l.key());
            }
            log::warn!("dictionary reached max size {cap}; training halted");
            self.stats.halted = true;
        }
    }

    pub fn finish(self) -> (Dictionary, TrainStats) {
        let d = self.atoms.as_ref().map_or(1, DenseMatrix::cols);
        let dict = Dictionary {
            atoms: self.atoms.unwrap_or_else(|| DenseMatrix::empty(d)),
            labels: self.labels,
            provenance: Provenance {
                model_id: self.model_id.unwrap_or_default(),
                layer_id: self.layer_id.unwrap_or_default(),
                dataset_id: self.dataset_id,
                tau: self.config.tau,
                l0: self.config.l0,
                relative_tau: self.config.relative_tau,
                dedup_cosine_threshold: self.config.dedup_cosine_threshold,
                trained_token_count: self.stats.tokens_seen,
                cropped_from: None,
            },
        };
        if self.stats.skipped_zero_norm > 0 {
            log::warn!(
                "{} near-zero activations exceeded tau but could not be normalized",
                self.stats.skipped_zero_norm
            );
        }
        (dict, self.stats)
    }
}

/// Trains a dictionary on `shards` in order, each split into batches.
pub fn train<'a>(
    shards: impl IntoIterator<Item = &'a ActivationShard>,
    config: &TrainConfig,
) -> Result<(Dictionary, TrainStats)> {
    let mut trainer = Trainer::new(config.clone())?;
    for shard in shards {
        if trainer.is_halted() {
            break;
        }
        trainer.push_shard(shard)?;
    }
    Ok(trainer.finish())
}

/// `keep[j]` is false for rows at or after `start` whose |cosine| with an
/// earlier kept row reaches `threshold`. Rows before `start` are kept.
fn dedup_mask(atoms: MatrixView<'_>, start: usize, threshold: f64) -> Vec<bool> {
    let n = atoms.rows();
    let norms: Vec<f64> = atoms.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    let mut keep = vec![true; n];
    for j in start..n {
        let row = atoms.row(j);
        for k in 0..j {
            if !keep[k] {
                continue;
            }
            let cos = dot(row, atoms.row(k)) / (norms[j] * norms[k]);
            if cos.abs() >= threshold {
                keep[j] = false;
                break;
            }
        }
    }
    keep
}

/// Drops every atom that is nearly collinear with an earlier kept atom.
pub fn dedup(dictionary: &Dictionary, cosine_threshold: f64) -> Result<Dictionary> {
    check_dedup_threshold(cosine_threshold)?;
    let keep = dedup_mask(dictionary.atoms.view(), 0, cosine_threshold);
    let mut atoms = dictionary.atoms.clone();
    atoms.retain_rows(|r| keep[r]);
    let labels = dictionary
        .labels
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(l, _)| l.clone())
        .collect();
    Ok(Dictionary {
        atoms,
        labels,
        provenance: dictionary.provenance.clone(),
    })
}

/// Keeps the first `size` atoms.
pub fn crop(dictionary: &Dictionary, size: usize) -> Result<Dictionary> {
    if size == 0 {
        return Err(Error::Validation("crop size must be at least 1".into()));
    }
    if size >= dictionary.len() {
        return Ok(dictionary.clone());
    }
    let mut atoms = dictionary.atoms.clone();
    atoms.truncate(size);
    let mut provenance = dictionary.provenance.clone();
    provenance.cropped_from.get_or_insert(dictionary.len());
    Ok(Dictionary {
        atoms,
        labels: dictionary.labels[..size].to_vec(),
        provenance,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DictHeader {
    format_version: u32,
    kind: String,
    model_id: String,
    layer_id: String,
    d_model: usize,
    count: usize,
    dtype: String,
    tau: f64,
    l0: usize,
    relative_tau: bool,
    dedup_cosine_threshold: f64,
    dataset_id: Option<String>,
    trained_token_count: u64,
    cropped_from: Option<usize>,
}

impl ContainerHeader for DictHeader {
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

const DICT_KIND: &str = "itda";

pub fn save_dictionary(dictionary: &Dictionary, path: &Path) -> Result<()> {
    let p = &dictionary.provenance;
    let header = DictHeader {
        format_version: FORMAT_VERSION,
        kind: DICT_KIND.into(),
        model_id: p.model_id.clone(),
        layer_id: p.layer_id.clone(),
        d_model: dictionary.d_model(),
        count: dictionary.len(),
        dtype: DTYPE_F32LE.into(),
        tau: p.tau,
        l0: p.l0,
        relative_tau: p.relative_tau,
        dedup_cosine_threshold: p.dedup_cosine_threshold,
        dataset_id: p.dataset_id.clone(),
        trained_token_count: p.trained_token_count,
        cropped_from: p.cropped_from,
    };
    container::write(path, &header, dictionary.atoms.as_slice(), &dictionary.labels)
}

/// Raw contents of an `.itda` file, before invariant checks.
#[derive(Debug, Clone)]
pub struct DictionaryFile {
    pub provenance: Provenance,
    pub atoms: DenseMatrix,
    pub labels: Vec<AtomLabel>,
}

impl DictionaryFile {
    pub fn read(path: &Path) -> Result<Self> {
        let (h, payload) = container::read_payload::<DictHeader>(path)?;
        if h.kind != DICT_KIND {
            return Err(Error::format(path, format!("not a dictionary (kind {:?})", h.kind)));
        }
        let atoms = DenseMatrix::from_vec(payload, h.count, h.d_model)?;
        let labels = container::read_labels(path, h.count)?;
        Ok(DictionaryFile {
            provenance: Provenance {
                model_id: h.model_id,
                layer_id: h.layer_id,
                dataset_id: h.dataset_id,
                tau: h.tau,
                l0: h.l0,
                relative_tau: h.relative_tau,
                dedup_cosine_threshold: h.dedup_cosine_threshold,
                trained_token_count: h.trained_token_count,
                cropped_from: h.cropped_from,
            },
            atoms,
            labels,
        })
    }
}

/// Loads an `.itda` file. Atoms off unit norm by more than
/// [`LOAD_NORM_TOLERANCE`] are rejected; smaller drift is renormalized.
pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let file = DictionaryFile::read(path)?;
    let mut atoms = file.atoms;
    check_norms(atoms.view(), LOAD_NORM_TOLERANCE)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for j in 0..atoms.rows() {
        let row = atoms.row(j);
        if (dot(row, row).sqrt() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            let unit = normalized(row, MIN_ATOM_NORM).expect("norm near 1");
            atoms.row_mut(j).copy_from_slice(&unit);
        }
    }
    Dictionary::new(atoms, file.labels, file.provenance)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub atom: usize,
    #[serde(rename = "coeff")]
    pub coefficient: f64,
    pub label: AtomLabel,
}

/// One decomposed activation: which labeled atoms rebuild it, and how well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub row: usize,
    pub loss: f64,
    pub entries: Vec<LabeledEntry>,
}

pub fn decompose(shard: &ActivationShard, dictionary: &Dictionary, l0: usize) -> Result<Vec<Decomposition>> {
    if shard.d_model() != dictionary.d_model() {
        return Err(Error::DimensionMismatch {
            expected: dictionary.d_model(),
            found: shard.d_model(),
        });
    }
    if shard.is_empty() {
        return Ok(Vec::new());
    }
    let config = MpConfig::new(l0);
    config.validate()?;
    validate_dictionary(dictionary.atoms.view())?;
    let codes = encode_rows_unchecked(shard.rows().view(), dictionary.atoms.view(), &config);
    Ok(codes
        .into_iter()
        .enumerate()
        .map(|(row, code)| Decomposition {
            row,
            loss: code.residual_sq,
            entries: code
                .entries
                .iter()
                .map(|e| LabeledEntry {
                    atom: e.atom,
                    coefficient: e.coefficient,
                    label: dictionary.labels[e.atom].clone(),
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::matching_pursuit::{mp_decode, mp_encode, reconstruction_loss, CodeEntry, SparseCode};

    fn shard(rows: &[Vec<f32>], offset: u64) -> ActivationShard {
        let labels = (0..rows.len() as u64)
            .map(|i| AtomLabel::new("ds", i + offset, 0))
            .collect();
        ActivationShard::new("m", "3", DenseMatrix::from_rows(rows).unwrap(), labels).unwrap()
    }

    fn unit_dict(rows: &[Vec<f32>]) -> Dictionary {
        let unit: Vec<Vec<f32>> = rows.iter().map(|r| normalized(r, 1e-8).unwrap()).collect();
        let labels = (0..rows.len() as u64).map(|i| AtomLabel::new("ds", i, 0)).collect();
        Dictionary::new(DenseMatrix::from_rows(&unit).unwrap(), labels, Provenance::default()).unwrap()
    }

    #[test]
    fn huge_tau_keeps_dictionary_empty() {
        let s = shard(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.1, 0.0]], 0);
        let (d, stats) = train([&s], &TrainConfig::new(1e9, 2)).unwrap();
        assert!(d.is_empty());
        assert_eq!(stats.tokens_seen, 3);
        assert_eq!(d.d_model(), 2);
    }

    #[test]
    fn frozen_batch_adds_all_orthogonal_samples() {
        let s = shard(&[vec![2.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 0.5]], 0);
        let mut cfg = TrainConfig::new(0.0, 3);
        cfg.batch_size = 3;
        let (d, _) = train([&s], &cfg).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(
            d.labels().iter().map(|l| l.sequence_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn frozen_batch_adds_duplicates_then_dedup_removes() {
        // Same direction twice in one batch: both exceed tau, dedup keeps the first.
        let s = shard(&[vec![1.0, 1.0], vec![2.0, 2.0]], 0);
        let mut cfg = TrainConfig::new(0.0, 1);
        cfg.batch_size = 2;
        let (d, stats) = train([&s], &cfg).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels()[0].sequence_index, 0);
        assert_eq!(stats.added, 2);
        assert_eq!(stats.dedup_removed, 1);
    }

    #[test]
    fn replayed_sample_is_not_added_again() {
        let x = vec![0.3f32, -1.2, 2.0, 0.7];
        let s = shard(&[x.clone(), x], 0);
        let mut cfg = TrainConfig::new(0.0, 1);
        cfg.batch_size = 1;
        let (d, stats) = train([&s], &cfg).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(stats.added, 1);
    }

    #[test]
    fn zero_vectors_are_counted_not_added() {
        let s = shard(&[vec![0.0, 0.0], vec![1e-10, 0.0], vec![1.0, 0.0]], 0);
        let (d, stats) = train([&s], &TrainConfig::new(0.0, 1)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(stats.skipped_zero_norm, 1);
    }

    #[test]
    fn relative_tau_scales_with_signal_energy() {
        // Second sample: loss 1 against atom e0 . energy 101 => relative ~0.0099.
        let s = shard(&[vec![1.0, 0.0], vec![10.0, 1.0]], 0);
        let mut cfg = TrainConfig::new(0.5, 1);
        cfg.batch_size = 1;
        let (abs, _) = train([&s], &cfg).unwrap();
        assert_eq!(abs.len(), 2);
        cfg.relative_tau = true;
        cfg.tau = 0.05;
        let (rel, _) = train([&s], &cfg).unwrap();
        assert_eq!(rel.len(), 1);
    }

    #[test]
    fn max_size_halts_training() {
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|i| {
                let mut v = vec![0.0; 6];
                v[i] = 1.0;
                v
            })
            .collect();
        let s = shard(&rows, 0);
        let mut cfg = TrainConfig::new(0.0, 2);
        cfg.batch_size = 2;
        cfg.max_dict_size = Some(3);
        let (d, stats) = train([&s], &cfg).unwrap();
        assert_eq!(d.len(), 3);
        assert!(stats.halted);
        assert_eq!(stats.tokens_seen, 4);
    }

    #[test]
    fn dimension_mismatch_across_shards() {
        let a = shard(&[vec![1.0, 0.0]], 0);
        let b = shard(&[vec![1.0, 0.0, 0.0]], 10);
        assert!(matches!(
            train([&a, &b], &TrainConfig::new(0.0, 1)),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn seed_shard_preloads_atoms() {
        let seed = shard(&[vec![1.0, 0.0]], 100);
        let s = shard(&[vec![5.0, 0.0], vec![0.0, 1.0]], 0);
        let mut t = Trainer::new(TrainConfig::new(0.0, 1)).unwrap();
        t.seed(&seed).unwrap();
        t.push_shard(&s).unwrap();
        let (d, _) = t.finish();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels()[0].sequence_index, 100);
        assert_eq!(d.labels()[1].sequence_index, 1);
    }

    #[test]
    fn dedup_examples() {
        let d = unit_dict(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![-2.0, 0.0]]);
        let out = dedup(&d, 0.999).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.labels()[0].sequence_index, 0);
        assert_eq!(out.labels()[1].sequence_index, 1);
        let ortho = unit_dict(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(dedup(&ortho, 0.999).unwrap(), ortho);
        assert!(dedup(&ortho, 0.0).is_err());
        assert!(dedup(&ortho, 1.5).is_err());
    }

    #[test]
    fn crop_examples() {
        let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![1.0, i as f32]).collect();
        let d = unit_dict(&rows);
        let c = crop(&d, 3).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.atoms().row(2), d.atoms().row(2));
        assert_eq!(c.labels(), &d.labels()[..3]);
        assert_eq!(c.provenance().cropped_from, Some(5));
        assert_eq!(crop(&d, 5).unwrap(), d);
        assert_eq!(crop(&d, 50).unwrap(), d);
        assert!(crop(&d, 0).is_err());
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.itda");
        let d = unit_dict(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        save_dictionary(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dictionary(&path), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&1.001f32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dictionary(&path), Err(Error::Validation(_))));

        // Drift inside the load tolerance is repaired.
        let mut drift = bytes.clone();
        drift[n - 4..].copy_from_slice(&1.00005f32.to_le_bytes());
        std::fs::write(&path, &drift).unwrap();
        let back = load_dictionary(&path).unwrap();
        assert!((dot(back.atoms().row(1), back.atoms().row(1)).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decompose_own_source_activation() {
        let s = shard(&[vec![3.0, 1.0, 0.0], vec![0.0, 0.0, 2.0], vec![-1.0, 4.0, 0.5]], 0);
        let (d, _) = train([&s], &TrainConfig::new(0.0, 1)).unwrap();
        let out = decompose(&s, &d, 1).unwrap();
        for (i, dec) in out.iter().enumerate() {
            assert_eq!(dec.entries.len(), 1);
            assert_eq!(dec.entries[0].label, s.labels()[i]);
            assert!(dec.loss < 1e-9);
        }
        let empty = ActivationShard::new("m", "3", DenseMatrix::empty(3), vec![]).unwrap();
        assert!(decompose(&empty, &d, 1).unwrap().is_empty());
        let wide = shard(&[vec![1.0; 4]], 0);
        assert!(decompose(&wide, &d, 1).is_err());
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dedup_is_idempotent(seed in 0u64..1000, n in 1usize..20, thr in 0.5f64..1.0) {
            let mut rows = random_rows(seed, n, 3);
            // Plant near-duplicates.
            for i in 0..n / 3 {
                let mut r = rows[i].clone();
                r[0] += 1e-4;
                rows.push(r);
            }
            let d = unit_dict(&rows);
            let once = dedup(&d, thr).unwrap();
            prop_assert_eq!(&dedup(&once, thr).unwrap(), &once);
        }

        #[test]
        fn crop_preserves_invariants(seed in 0u64..1000, n in 1usize..20, size in 1usize..25) {
            let d = unit_dict(&random_rows(seed, n, 4));
            let c = crop(&d, size).unwrap();
            prop_assert_eq!(c.len(), size.min(n));
            prop_assert!(Dictionary::new(c.atoms().clone(), c.labels().to_vec(), c.provenance().clone()).is_ok());
            for j in 0..c.len() {
                prop_assert_eq!(&c.labels()[j], &d.labels()[j]);
            }
        }

        #[test]
        fn save_load_round_trip(seed in 0u64..1000, n in 0usize..12, tau in 0.0f64..5.0) {
            let mut d = unit_dict(&random_rows(seed, n.max(1), 5));
            if n == 0 { d = crop(&d, 1).unwrap(); }
            d.provenance = Provenance { tau, model_id: "gpt2".into(), dataset_id: Some("pile".into()), ..Default::default() };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.itda");
            save_dictionary(&d, &path).unwrap();
            prop_assert_eq!(load_dictionary(&path).unwrap(), d);
        }

        #[test]
        fn decompose_loss_matches_recomputed(seed in 0u64..1000, l0 in 1usize..5) {
            let train_rows = random_rows(seed, 30, 6);
            let s = shard(&train_rows, 0);
            let (d, _) = train([&s], &TrainConfig::new(0.5, 2)).unwrap();
            prop_assume!(!d.is_empty());
            let probe = shard(&random_rows(seed + 1, 10, 6), 1000);
            let out = decompose(&probe, &d, l0).unwrap();
            let codes: Vec<SparseCode> = out.iter().map(|dec| SparseCode {
                entries: dec.entries.iter().map(|e| CodeEntry { atom: e.atom, coefficient: e.coefficient }).collect(),
                ..Default::default()
            }).collect();
            let recon = mp_decode(&codes, d.atoms().view()).unwrap();
            for (i, dec) in out.iter().enumerate() {
                let want = reconstruction_loss(probe.rows().row(i), recon.row(i)).unwrap();
                prop_assert!((dec.loss - want).abs() < 1e-6, "{} vs {}", dec.loss, want);
            }
        }

        #[test]
        fn every_training_sample_is_covered(seed in 0u64..500, tau in 0.01f64..1.0, bs in 1usize..8) {
            // With l0 = 1 a larger dictionary never reconstructs worse, so any
            // sample that was not added stays within tau after training.
            let rows = random_rows(seed, 25, 4);
            let s = shard(&rows, 0);
            let mut cfg = TrainConfig::new(tau, 1);
            cfg.batch_size = bs;
            let (d, stats) = train([&s], &cfg).unwrap();
            prop_assume!(stats.dedup_removed == 0 && !d.is_empty());
            prop_assert_eq!(stats.tokens_seen, 25);
            let codes = mp_encode(s.rows().view(), d.atoms().view(), &MpConfig::new(1)).unwrap();
            let labels: HashSet<&AtomLabel> = d.labels().iter().collect();
            for (i, c) in codes.iter().enumerate() {
                prop_assert!(c.residual_sq <= tau + 1e-9 || labels.contains(&s.labels()[i]));
            }
        }
    }
}
