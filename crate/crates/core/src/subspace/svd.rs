//! Thin SVD with a canonical sign convention.
//!
//! Decomposition is done in f64 by nalgebra's Golub-Kahan routine; this module
//! fixes ordering and signs so that factors are reproducible run to run.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `A = U·diag(σ)·Vᵀ` with `r = min(m, n)` columns in `U` and `V`.
#[derive(Debug, Clone)]
pub struct SpectralFactors {
    /// m × r, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Non-increasing, non-negative.
    pub sigmas: Vec<f64>,
    /// n × r, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SpectralFactors {
    pub fn rank(&self) -> usize {
        self.sigmas.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(&self.sigmas)
    }

    /// `U·diag(sigmas)·Vᵀ` with replacement singular values.
    pub fn reconstruct_with(&self, sigmas: &[f64]) -> DMatrix<f64> {
        assert_eq!(
            sigmas.len(),
            self.rank(),
            "one singular value per factor column"
        );
        let mut scaled = self.u.clone();
        for (k, &s) in sigmas.iter().enumerate() {
            scaled.column_mut(k).scale_mut(s);
        }
        scaled * self.v.transpose()
    }
}

/// Thin SVD of `a`.
///
/// Singular values are sorted in descending order. Each column of `U` is
/// flipped so that its largest-magnitude entry (lowest row on ties) is
/// positive, with the matching column of `V` flipped alongside.
pub fn svd(a: &DMatrix<f64>) -> Result<SpectralFactors> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "cannot decompose a {rows}x{cols} matrix"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix contains non-finite values"));
    }
    let rank = rows.min(cols);
    let max_iterations = 1000 + 100 * rank;
    let dec = nalgebra::SVD::try_new(a.clone(), true, true, f64::EPSILON, max_iterations)
        .ok_or(Error::SvdNonConvergence { rows, cols })?;
    let u_raw = dec.u.expect("requested U");
    let v_raw = dec.v_t.expect("requested V").transpose();
    let s_raw = dec.singular_values;

    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&i, &j| s_raw[j].total_cmp(&s_raw[i]).then(i.cmp(&j)));

    let mut u = DMatrix::zeros(rows, rank);
    let mut v = DMatrix::zeros(cols, rank);
    let mut sigmas = Vec::with_capacity(rank);
    for (k, &src) in order.iter().enumerate() {
        let ucol = u_raw.column(src);
        let mut pivot = 0;
        for i in 1..rows {
            if ucol[i].abs() > ucol[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        u.set_column(k, &(ucol * flip));
        v.set_column(k, &(v_raw.column(src) * flip));
        sigmas.push(s_raw[src].max(0.0));
    }
    Ok(SpectralFactors { u, sigmas, v })
}

pub fn matrix_from_row_major(rows: usize, cols: usize, values: &[f32]) -> DMatrix<f64> {
    debug_assert_eq!(values.len(), rows * cols);
    DMatrix::from_fn(rows, cols, |i, j| values[i * cols + j] as f64)
}

pub fn matrix_to_row_major(m: &DMatrix<f64>) -> Vec<f32> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)] as f32);
        }
    }
    out
}

/// `‖MᵀM − I‖_max`: how far the columns of `m` are from orthonormal.
pub fn column_orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed;
        DMatrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn diagonal_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let f = svd(&a).unwrap();
        assert_eq!(f.sigmas, vec![3.0, 1.0]);
        assert!((f.u.clone() - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((f.v.clone() - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let f = svd(&DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(f.sigmas, vec![0.0, 0.0]);
        assert!(column_orthonormality_error(&f.u) <= 1e-12);
        assert!(column_orthonormality_error(&f.v) <= 1e-12);
        assert_eq!(f.reconstruct().amax(), 0.0);
    }

    #[test]
    fn reconstructs_rectangular_matrices() {
        for (rows, cols) in [(8, 5), (5, 8), (1, 7), (7, 1), (16, 16)] {
            let a = pseudo_random(rows, cols, (rows * 31 + cols) as u64);
            let f = svd(&a).unwrap();
            assert_eq!(f.u.shape(), (rows, rows.min(cols)));
            assert_eq!(f.v.shape(), (cols, rows.min(cols)));
            assert!((f.reconstruct() - &a).norm() <= 1e-4 * a.norm().max(1.0));
            assert!(column_orthonormality_error(&f.u) <= 1e-5);
            assert!(column_orthonormality_error(&f.v) <= 1e-5);
            assert!(f.sigmas.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_is_canonical() {
        let a = pseudo_random(6, 4, 99);
        let f = svd(&a).unwrap();
        let g = svd(&(-a.clone())).unwrap();
        for k in 0..f.rank() {
            let col = f.u.column(k);
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
            // Negating A keeps U and flips V.
            assert!((f.u.column(k) - g.u.column(k)).amax() < 1e-10);
            assert!((f.v.column(k) + g.v.column(k)).amax() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(svd(&a).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let values = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = matrix_from_row_major(2, 3, &values);
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(matrix_to_row_major(&m), values.to_vec());
    }
}
