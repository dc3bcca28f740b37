//! Fréchet distance between two embedding distributions — the latent-gap
//! measure: fit a Gaussian to each set and compute
//!
//!   ||mu_x - mu_y||^2 + Tr(S_x + S_y - 2 (S_x S_y)^{1/2}).
//!
//! The cross term uses Tr((S_x^{1/2} S_y S_x^{1/2})^{1/2}), which equals
//! Tr((S_x S_y)^{1/2}) but stays symmetric PSD, so a symmetric
//! eigendecomposition with clamped eigenvalues is enough. Covariances are
//! unbiased (n-1) and regularized with 1e-6 * I so small samples cannot
//! produce non-PSD roots.

use nalgebra::DMatrix;
use ndarray::Array1;

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};

/// Diagonal regularizer added to both covariance estimates.
pub const COV_EPS: f64 = 1e-6;

fn moments(batch: &EmbeddingBatch) -> (Array1<f64>, DMatrix<f64>) {
    let n = batch.vectors.nrows();
    let d = batch.vectors.ncols();
    let mean = batch.vectors.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in batch.vectors.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(&v, &m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += COV_EPS;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// from roundoff are clamped to zero).
fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for c in 0..d {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        for r in 0..d {
            scaled[(r, c)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

pub fn latent_gap_fid(x: &EmbeddingBatch, y: &EmbeddingBatch) -> Result<f64> {
    if x.vectors.ncols() != y.vectors.ncols() {
        return Err(Error::BatchMismatch(format!(
            "embedding dims {} vs {}",
            x.vectors.ncols(),
            y.vectors.ncols()
        )));
    }
    for (name, b) in [("first", x), ("second", y)] {
        if b.vectors.nrows() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                actual: b.vectors.nrows(),
            });
        }
        if b.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::BatchMismatch(format!(
                "{name} embedding set contains non-finite values"
            )));
        }
    }
    let (mu_x, cov_x) = moments(x);
    let (mu_y, cov_y) = moments(y);
    let mean_term: f64 = mu_x
        .iter()
        .zip(mu_y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let root_x = sym_sqrt(&cov_x);
    let inner = &root_x * &cov_y * &root_x;
    // symmetrize against roundoff before the second root
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_sqrt(&inner);
    let trace_term = cov_x.trace() + cov_y.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(vectors: Array2<f64>) -> EmbeddingBatch {
        let ids = (0..vectors.nrows()).map(|i| format!("r{i}")).collect();
        EmbeddingBatch {
            vectors,
            record_ids: ids,
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((n, mean.len()), |(_, j)| {
            mean[j] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = gaussian(&mut rng, 200, &[0.0; 6]);
        let fid = latent_gap_fid(&batch(v.clone()), &batch(v)).unwrap();
        assert!(fid.abs() < 1e-6, "{fid}");
    }

    #[test]
    fn equal_covariance_converges_to_mean_gap() {
        // mu_1 = 0, mu_2 = (3, 4, 0, ...): ||dmu||^2 = 25 when covariances match
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let mut mean2 = vec![0.0; d];
        mean2[0] = 3.0;
        mean2[1] = 4.0;
        let x = gaussian(&mut rng, 10_000, &vec![0.0; d]);
        let y = gaussian(&mut rng, 10_000, &mean2);
        let fid = latent_gap_fid(&batch(x), &batch(y)).unwrap();
        assert!((fid - 25.0).abs() < 0.5, "{fid}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = batch(gaussian(&mut rng, 60, &[1.0, -1.0, 0.5, 0.0]));
        let mut y_mat = gaussian(&mut rng, 80, &[0.0, 0.0, 0.0, 2.0]);
        y_mat.column_mut(1).mapv_inplace(|v| 3.0 * v);
        let y = batch(y_mat);
        let ab = latent_gap_fid(&x, &y).unwrap();
        let ba = latent_gap_fid(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        assert!(ab >= 0.0);
    }

    /// Independent oracle: Denman–Beavers iteration for the matrix square
    /// root of S_x * S_y (no eigendecomposition), with Gauss-Jordan inverses.
    #[test]
    fn matches_independent_matrix_sqrt() {
        fn invert(m: &DMatrix<f64>) -> DMatrix<f64> {
            m.clone().try_inverse().expect("nonsingular")
        }
        fn db_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
            let mut y = a.clone();
            let mut z = DMatrix::<f64>::identity(a.nrows(), a.nrows());
            for _ in 0..60 {
                let y_next = (&y + invert(&z)) * 0.5;
                let z_next = (&z + invert(&y)) * 0.5;
                y = y_next;
                z = z_next;
            }
            y
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        // correlated general covariances
        let mut x_mat = gaussian(&mut rng, 400, &vec![0.3; d]);
        for i in 0..x_mat.nrows() {
            let bump: f64 = x_mat[[i, 0]];
            x_mat[[i, 2]] += 0.8 * bump;
        }
        let mut y_mat = gaussian(&mut rng, 300, &vec![-0.2; d]);
        for i in 0..y_mat.nrows() {
            let bump: f64 = y_mat[[i, 4]];
            y_mat[[i, 1]] -= 0.6 * bump;
        }
        let x = batch(x_mat);
        let y = batch(y_mat);
        let fast = latent_gap_fid(&x, &y).unwrap();

        let (mu_x, cov_x) = moments(&x);
        let (mu_y, cov_y) = moments(&y);
        let mean_term: f64 = mu_x
            .iter()
            .zip(mu_y.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let product = &cov_x * &cov_y;
        let root = db_sqrt(&product);
        let oracle = mean_term + cov_x.trace() + cov_y.trace() - 2.0 * root.trace();
        assert!((fast - oracle).abs() < 1e-4, "{fast} vs {oracle}");
    }

    #[test]
    fn single_sample_is_rejected() {
        let x = batch(Array2::zeros((1, 4)));
        let y = batch(Array2::zeros((5, 4)));
        assert!(matches!(
            latent_gap_fid(&x, &y),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
