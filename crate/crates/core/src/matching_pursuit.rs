//! Matching Pursuit over a dictionary of unit-norm atoms.
//!
//! Each iteration correlates the residual with every atom, picks the atom
//! with the largest absolute correlation (lowest index on ties), adds that
//! correlation to the atom's coefficient and subtracts the projection from
//! the residual. Signals are never normalized; only atoms are. Storage is
//! `f32`, all accumulation is `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, dot_f64, first_non_finite_row, DenseMatrix, MatrixView};

/// Allowed deviation of an atom's Euclidean norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_RESIDUAL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpConfig {
    /// Maximum number of MP iterations, hence of distinct atoms per code.
    pub l0: usize,
    /// Stop once the residual squared norm is at or below this value.
    /// Zero runs all `l0` iterations.
    pub residual_epsilon: f64,
}

impl MpConfig {
    pub fn new(l0: usize) -> Self {
        MpConfig {
            l0,
            residual_epsilon: DEFAULT_RESIDUAL_EPSILON,
        }
    }

    pub fn with_residual_epsilon(mut self, eps: f64) -> Self {
        self.residual_epsilon = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l0 == 0 {
            return Err(Error::Validation("l0 must be at least 1".into()));
        }
        if !(self.residual_epsilon >= 0.0) {
            return Err(Error::Validation("residual_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub atom: usize,
    pub coefficient: f64,
}

/// Sparse code of one signal; entries are in first-selection order and
/// atom indices are unique.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseCode {
    pub entries: Vec<CodeEntry>,
    /// Euclidean norm of the encoded signal.
    pub signal_norm: f64,
    /// Squared norm of the final residual, i.e. the reconstruction loss.
    pub residual_sq: f64,
}

impl SparseCode {
    /// Number of distinct atoms used (the effective L0).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coefficient(&self, atom: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.atom == atom).map(|e| e.coefficient)
    }
}

/// Checks that a dictionary is non-empty, finite, and has unit-norm rows.
pub fn validate_dictionary(atoms: MatrixView<'_>) -> Result<()> {
    if atoms.rows() == 0 {
        return Err(Error::EmptyDictionary);
    }
    if atoms.cols() == 0 {
        return Err(Error::Validation("dictionary has zero-width atoms".into()));
    }
    for (j, row) in atoms.iter_rows().enumerate() {
        let norm = dot(row, row).sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::Validation(format!(
                "atom {j} has norm {norm}, expected 1 within {UNIT_NORM_TOLERANCE}"
            )));
        }
    }
    Ok(())
}

fn validate_signals(signals: MatrixView<'_>, d: usize) -> Result<()> {
    if signals.rows() > 0 && signals.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: signals.cols(),
        });
    }
    if let Some(r) = first_non_finite_row(signals) {
        return Err(Error::Validation(format!("signal {r} has non-finite values")));
    }
    Ok(())
}

/// Encodes every row of `signals` against `atoms`.
///
/// Signals are independent, so the result is identical to encoding them one
/// at a time.
pub fn mp_encode(signals: MatrixView<'_>, atoms: MatrixView<'_>, config: &MpConfig) -> Result<Vec<SparseCode>> {
    config.validate()?;
    validate_dictionary(atoms)?;
    validate_signals(signals, atoms.cols())?;
    Ok(encode_rows_unchecked(signals, atoms, config))
}

/// Encodes a single signal.
pub fn mp_encode_one(signal: &[f32], atoms: MatrixView<'_>, config: &MpConfig) -> Result<SparseCode> {
    let view = MatrixView::new(signal, signal.len())?;
    Ok(mp_encode(view, atoms, config)?.pop().expect("one row"))
}

/// Like [`mp_encode_one`], also returning the residual squared norm before
/// the first iteration and after each one.
pub fn mp_encode_traced(signal: &[f32], atoms: MatrixView<'_>, config: &MpConfig) -> Result<(SparseCode, Vec<f64>)> {
    config.validate()?;
    validate_dictionary(atoms)?;
    validate_signals(MatrixView::new(signal, signal.len())?, atoms.cols())?;
    let mut trace = Vec::with_capacity(config.l0 + 1);
    let wide = widen(atoms);
    let code = pursue(signal, &wide, atoms.cols(), config, |r| trace.push(r));
    Ok((code, trace))
}

/// Parallel encode without input checks; callers guarantee the invariants.
pub(crate) fn encode_rows_unchecked(
    signals: MatrixView<'_>,
    atoms: MatrixView<'_>,
    config: &MpConfig,
) -> Vec<SparseCode> {
    let wide = widen(atoms);
    let d = atoms.cols();
    let rows: Vec<&[f32]> = signals.iter_rows().collect();
    rows.par_iter().map(|x| pursue(x, &wide, d, config, |_| {})).collect()
}

/// Atoms converted once to `f64` so the inner loop does no conversions.
fn widen(atoms: MatrixView<'_>) -> Vec<f64> {
    atoms.as_slice().iter().map(|&v| f64::from(v)).collect()
}

fn pursue(signal: &[f32], atoms: &[f64], d: usize, config: &MpConfig, mut observe: impl FnMut(f64)) -> SparseCode {
    let mut residual: Vec<f64> = signal.iter().map(|&v| f64::from(v)).collect();
    let mut residual_sq: f64 = residual.iter().map(|v| v * v).sum();
    let signal_norm = residual_sq.sqrt();
    let mut next = vec![0.0f64; residual.len()];
    let mut entries: Vec<CodeEntry> = Vec::with_capacity(config.l0);
    observe(residual_sq);

    for _ in 0..config.l0 {
        if residual_sq <= config.residual_epsilon {
            break;
        }
        let mut best = 0usize;
        let mut best_corr = 0.0f64;
        for (j, atom) in atoms.chunks_exact(d).enumerate() {
            let c = dot_f64(&residual, atom);
            if c.abs() > best_corr.abs() {
                best = j;
                best_corr = c;
            }
        }
        if best_corr == 0.0 {
            // Residual orthogonal to every atom: further iterations are no-ops.
            break;
        }
        let atom = &atoms[best * d..(best + 1) * d];
        for ((n, &r), &a) in next.iter_mut().zip(&residual).zip(atom) {
            *n = r - best_corr * a;
        }
        let next_sq: f64 = next.iter().map(|v| v * v).sum();
        if next_sq > residual_sq {
            // Correlation at rounding level: the step cannot make progress.
            break;
        }
        std::mem::swap(&mut residual, &mut next);
        residual_sq = next_sq;
        match entries.iter_mut().find(|e| e.atom == best) {
            Some(e) => e.coefficient += best_corr,
            None => entries.push(CodeEntry {
                atom: best,
                coefficient: best_corr,
            }),
        }
        observe(residual_sq);
    }

    SparseCode {
        entries,
        signal_norm,
        residual_sq,
    }
}

/// Reconstructs `sum(coefficient * atom)` for every code.
pub fn mp_decode(codes: &[SparseCode], atoms: MatrixView<'_>) -> Result<DenseMatrix> {
    let d = atoms.cols();
    let n = atoms.rows();
    let mut out = DenseMatrix::zeros(codes.len(), d);
    let mut acc = vec![0.0f64; d];
    for (b, code) in codes.iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for e in &code.entries {
            if e.atom >= n {
                return Err(Error::AtomOutOfRange { index: e.atom, len: n });
            }
            for (a, &v) in acc.iter_mut().zip(atoms.row(e.atom)) {
                *a += e.coefficient * f64::from(v);
            }
        }
        for (o, a) in out.row_mut(b).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Squared Euclidean distance `||signal - reconstruction||^2`.
pub fn reconstruction_loss(signal: &[f32], reconstruction: &[f32]) -> Result<f64> {
    if signal.len() != reconstruction.len() {
        return Err(Error::DimensionMismatch {
            expected: signal.len(),
            found: reconstruction.len(),
        });
    }
    Ok(signal
        .iter()
        .zip(reconstruction)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum())
}

/// `a.b / (||a|| ||b||)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
