//! Synthetic sparse-signal instances and brute-force sparse-coding oracles.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationShard, AtomLabel};
use crate::dictionary::{Dictionary, Provenance};
use crate::error::{Error, Result};
use crate::matrix::{dot, normalized, DenseMatrix, MatrixView};

/// Coefficient magnitudes are drawn uniformly from this range, with a random sign.
pub const COEFF_MIN: f64 = 0.5;
pub const COEFF_MAX: f64 = 2.0;

/// Largest number of supports [`exhaustive_best_code`] will enumerate.
pub const MAX_SUPPORTS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub n_true_atoms: usize,
    pub signals: usize,
    pub sparsity: usize,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Lead the stream with every true atom on its own, one per signal.
    pub isolated_first: bool,
    pub dataset_id: String,
    pub model_id: String,
    pub layer_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 16,
            n_true_atoms: 32,
            signals: 1000,
            sparsity: 2,
            noise_sigma: 0.0,
            rng_seed: 0,
            isolated_first: false,
            dataset_id: "synth".into(),
            model_id: "synth".into(),
            layer_id: "0".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_true_atoms == 0 {
            return Err(Error::Validation("d and n_true_atoms must be positive".into()));
        }
        if self.sparsity == 0 || self.sparsity > self.n_true_atoms {
            return Err(Error::Validation(format!(
                "sparsity must be in 1..={}, got {}",
                self.n_true_atoms, self.sparsity
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// `E ||x||^2`: random signs cancel the cross terms between atoms.
    pub fn expected_signal_energy(&self) -> f64 {
        let coeff_sq = (COEFF_MAX.powi(3) - COEFF_MIN.powi(3)) / (3.0 * (COEFF_MAX - COEFF_MIN));
        self.sparsity as f64 * coeff_sq + self.d as f64 * self.noise_sigma * self.noise_sigma
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// Generating atoms, labeled `<dataset_id>-truth` with the atom index.
    pub truth: Dictionary,
    pub shard: ActivationShard,
    /// Generating atom indices of every signal.
    pub supports: Vec<Vec<usize>>,
}

pub fn random_unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32
            })
            .collect();
        if let Some(u) = normalized(&v, 1e-6) {
            return u;
        }
    }
}

fn coefficient(rng: &mut impl Rng) -> f64 {
    let m = rng.random_range(COEFF_MIN..=COEFF_MAX);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let atom_rows: Vec<Vec<f32>> = (0..spec.n_true_atoms)
        .map(|_| random_unit_vector(&mut rng, spec.d))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Validation(e.to_string()))?;

    let mut rows = DenseMatrix::empty(spec.d);
    let mut labels = Vec::with_capacity(spec.signals);
    let mut supports = Vec::with_capacity(spec.signals);
    let mut acc = vec![0.0f64; spec.d];
    for i in 0..spec.signals {
        let support: Vec<usize> = if spec.isolated_first && i < spec.n_true_atoms {
            vec![i]
        } else {
            sample(&mut rng, spec.n_true_atoms, spec.sparsity).into_vec()
        };
        let coeffs: Vec<f64> = support.iter().map(|_| coefficient(&mut rng)).collect();
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (&j, &c) in support.iter().zip(&coeffs) {
            for (a, &v) in acc.iter_mut().zip(&atom_rows[j]) {
                *a += c * f64::from(v);
            }
        }
        if spec.noise_sigma > 0.0 {
            for a in acc.iter_mut() {
                *a += noise.sample(&mut rng);
            }
        }
        let row: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        rows.push_row(&row);
        let snippet = format!(
            "atoms={:?} coeffs=[{}]",
            support,
            coeffs.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(",")
        );
        labels.push(AtomLabel::new(&spec.dataset_id, i as u64, 0).with_snippet(snippet));
        supports.push(support);
    }

    let truth_labels = (0..spec.n_true_atoms as u64)
        .map(|j| AtomLabel::new(format!("{}-truth", spec.dataset_id), j, 0))
        .collect();
    let truth = Dictionary::new(
        DenseMatrix::from_rows(&atom_rows)?,
        truth_labels,
        Provenance {
            model_id: spec.model_id.clone(),
            layer_id: spec.layer_id.clone(),
            dataset_id: Some(format!("{}-truth", spec.dataset_id)),
            l0: spec.sparsity,
            ..Provenance::default()
        },
    )?;
    let shard = ActivationShard::new(&spec.model_id, &spec.layer_id, rows, labels)?;
    Ok(SynthData { truth, shard, supports })
}

/// Haar-ish random orthogonal `d x d` matrix: Gram-Schmidt on Gaussian rows.
pub fn random_orthogonal(d: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two passes keep the rows orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let data = basis.into_iter().flatten().map(|v| v as f32).collect();
    DenseMatrix::from_vec(data, d, d).expect("square")
}

/// Rows `x` become `x Q` (accumulated in `f64`).
pub fn rotate_rows(rows: MatrixView<'_>, rotation: &DenseMatrix) -> Result<DenseMatrix> {
    let d = rows.cols();
    if rotation.rows() != d || rotation.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: rotation.rows(),
        });
    }
    let mut out = DenseMatrix::zeros(rows.rows(), d);
    let mut acc = vec![0.0f64; d];
    for (i, x) in rows.iter_rows().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &xk) in x.iter().enumerate() {
            let xk = f64::from(xk);
            for (a, &q) in acc.iter_mut().zip(rotation.row(k)) {
                *a += xk * f64::from(q);
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// The same activations seen through a rotated basis, relabeled to another model.
pub fn rotate_shard(shard: &ActivationShard, rotation: &DenseMatrix, model_id: &str) -> Result<ActivationShard> {
    let rows = rotate_rows(shard.rows().view(), rotation)?;
    ActivationShard::new(model_id, shard.layer_id(), rows, shard.labels().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCode {
    pub loss: f64,
    /// Ascending atom indices of the best support (empty if nothing beats zero).
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Supports skipped because their atoms were linearly dependent.
    pub singular_supports: u64,
}

fn binomial(n: u64, k: u64) -> u64 {
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Solves the symmetric positive definite system by Cholesky; `None` if singular.
fn cholesky_solve(gram: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let k = rhs.len();
    let scale = (0..k).map(|i| gram[i][i]).fold(0.0f64, f64::max).max(1.0);
    let mut l = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = gram[i][j] - (0..j).map(|p| l[i][p] * l[j][p]).sum::<f64>();
            if i == j {
                if s <= 1e-10 * scale {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        y[i] = (rhs[i] - (0..i).map(|p| l[i][p] * y[p]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        x[i] = (y[i] - (i + 1..k).map(|p| l[p][i] * x[p]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Exact minimiser of `||x - a D||^2` subject to `||a||_0 <= l0`, by
/// enumerating every support and solving least squares on it.
pub fn exhaustive_best_code(signal: &[f32], atoms: MatrixView<'_>, l0: usize) -> Result<OracleCode> {
    let n = atoms.rows();
    if signal.len() != atoms.cols() {
        return Err(Error::DimensionMismatch {
            expected: atoms.cols(),
            found: signal.len(),
        });
    }
    let max_k = l0.min(n);
    let total: u64 = (1..=max_k as u64)
        .map(|k| binomial(n as u64, k))
        .fold(0, u64::saturating_add);
    if total > MAX_SUPPORTS {
        return Err(Error::TooLarge(format!(
            "{total} supports for n={n}, l0={l0} (limit {MAX_SUPPORTS})"
        )));
    }
    let x: Vec<f64> = signal.iter().map(|&v| f64::from(v)).collect();
    let mut best = OracleCode {
        loss: x.iter().map(|v| v * v).sum(),
        support: Vec::new(),
        coefficients: Vec::new(),
        singular_supports: 0,
    };
    let corr: Vec<f64> = atoms
        .iter_rows()
        .map(|a| x.iter().zip(a).map(|(u, &v)| u * f64::from(v)).sum())
        .collect();

    for k in 1..=max_k {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let gram: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| idx.iter().map(|&j| dot(atoms.row(i), atoms.row(j))).collect())
                .collect();
            let rhs: Vec<f64> = idx.iter().map(|&i| corr[i]).collect();
            match cholesky_solve(&gram, &rhs) {
                None => best.singular_supports += 1,
                Some(c) => {
                    let mut r = x.clone();
                    for (&i, &ci) in idx.iter().zip(&c) {
                        for (rv, &a) in r.iter_mut().zip(atoms.row(i)) {
                            *rv -= ci * f64::from(a);
                        }
                    }
                    let loss: f64 = r.iter().map(|v| v * v).sum();
                    if loss < best.loss {
                        best.loss = loss;
                        best.support = idx.clone();
                        best.coefficients = c;
                    }
                }
            }
            // Next k-combination in lexicographic order.
            let mut p = k;
            while p > 0 && idx[p - 1] == n - k + p - 1 {
                p -= 1;
            }
            if p == 0 {
                break;
            }
            idx[p - 1] += 1;
            for q in p..k {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching_pursuit::cosine_similarity;

    #[test]
    fn noiseless_one_sparse_signals_are_scaled_atoms() {
        let spec = SynthSpec {
            d: 8,
            n_true_atoms: 5,
            signals: 50,
            sparsity: 1,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        for (row, support) in data.shard.rows().iter_rows().zip(&data.supports) {
            let c = cosine_similarity(row, data.truth.atoms().row(support[0])).unwrap();
            assert!((c.abs() - 1.0).abs() < 1e-6);
            let n = dot(row, row).sqrt();
            assert!((COEFF_MIN - 1e-6..=COEFF_MAX + 1e-6).contains(&n));
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = SynthSpec {
            noise_sigma: 0.1,
            rng_seed: 42,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.shard, b.shard);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthSpec { rng_seed: 43, ..spec }).unwrap();
        assert_ne!(a.shard.rows(), c.shard.rows());
    }

    #[test]
    fn isolated_signals_lead_the_stream() {
        let spec = SynthSpec {
            n_true_atoms: 4,
            signals: 10,
            isolated_first: true,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(&data.supports[..4], &[vec![0], vec![1], vec![2], vec![3]]);
        assert!(data.supports[4..].iter().all(|s| s.len() == 2));
    }

    #[test]
    fn energy_matches_analytic_expectation() {
        let spec = SynthSpec {
            d: 24,
            n_true_atoms: 40,
            signals: 10_000,
            sparsity: 3,
            noise_sigma: 0.2,
            rng_seed: 9,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let energies: Vec<f64> = data.shard.rows().iter_rows().map(|r| dot(r, r)).collect();
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (energies.len() - 1) as f64;
        let se = (var / energies.len() as f64).sqrt();
        let want = spec.expected_signal_energy();
        assert!((mean - want).abs() < 4.0 * se, "mean {mean} want {want} se {se}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec {
            sparsity: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            sparsity: 40,
            n_true_atoms: 4,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = random_orthogonal(7, 3);
        for i in 0..7 {
            for j in 0..7 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(q.row(i), q.row(j)) - want).abs() < 1e-6);
            }
        }
        let x = DenseMatrix::from_rows(&[[1.0f32, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0]]).unwrap();
        let y = rotate_rows(x.view(), &q).unwrap();
        assert!((dot(x.row(0), x.row(0)) - dot(y.row(0), y.row(0))).abs() < 1e-4);
    }

    #[test]
    fn signal_on_one_atom_has_zero_loss() {
        let atoms = DenseMatrix::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 0.6, 0.8], [0.0, 1.0, 0.0]]).unwrap();
        let best = exhaustive_best_code(&[0.0, -1.2, -1.6], atoms.view(), 1).unwrap();
        assert!(best.loss < 1e-12);
        assert_eq!(best.support, vec![1]);
        assert!((best.coefficients[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn orthonormal_support_is_top_correlations() {
        let q = random_orthogonal(6, 11);
        let x = [0.3f32, -1.0, 2.0, 0.1, -0.4, 0.9];
        let corr: Vec<f64> = q.iter_rows().map(|a| dot(&x, a)).collect();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| corr[b].abs().total_cmp(&corr[a].abs()));
        for l0 in 1..=3 {
            let best = exhaustive_best_code(&x, q.view(), l0).unwrap();
            let mut want: Vec<usize> = order[..l0].to_vec();
            want.sort();
            assert_eq!(best.support, want);
            let rest: f64 = order[l0..].iter().map(|&j| corr[j] * corr[j]).sum();
            assert!((best.loss - rest).abs() < 1e-6);
        }
    }

    #[test]
    fn collinear_supports_are_skipped() {
        let atoms = DenseMatrix::from_rows(&[[1.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let best = exhaustive_best_code(&[2.0, 1.0], atoms.view(), 2).unwrap();
        assert_eq!(best.singular_supports, 1);
        assert!(best.loss < 1e-12);
    }

    #[test]
    fn refuses_huge_instances() {
        let atoms = DenseMatrix::zeros(60, 2);
        assert!(matches!(
            exhaustive_best_code(&[1.0, 0.0], atoms.view(), 5),
            Err(Error::TooLarge(_))
        ));
    }
}
