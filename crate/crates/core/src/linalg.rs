//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{HptrError, Result};

pub fn to_mat(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(HptrError::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn from_mat(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Row-major flattening: entry (i, j) lands at index d*i + j.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn sharpen(v: &[f64]) -> Result<DMatrix<f64>> {
    let d = (v.len() as f64).sqrt().round() as usize;
    if d * d != v.len() {
        return Err(HptrError::Shape(format!("length {} is not a perfect square", v.len())));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| v[d * i + j]))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Fourth-moment operator of N(0, sigma) on flattened matrices:
/// entry ((i,j),(k,l)) = sigma_ik sigma_jl + sigma_il sigma_jk.
pub fn isserlis_operator(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = sigma.nrows();
    DMatrix::from_fn(d * d, d * d, |r, c| {
        let (i, j, k, l) = (r / d, r % d, c / d, c % d);
        sigma[(i, k)] * sigma[(j, l)] + sigma[(i, l)] * sigma[(j, k)]
    })
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    is_symmetric(m) && m.clone().cholesky().is_some() && min_eigenvalue(m) > 0.0
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn max_eigen(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let e = SymmetricEigen::new(m.clone());
    let k = e.eigenvalues.imax();
    (e.eigenvalues[k], e.eigenvectors.column(k).into_owned())
}

fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    if !is_symmetric(m) {
        return Err(HptrError::Domain("matrix is not symmetric".into()));
    }
    let e = SymmetricEigen::new(m.clone());
    let scale = e.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if e.eigenvalues.iter().any(|&l| l <= 1e-14 * scale) {
        return Err(HptrError::Domain("matrix is not positive definite".into()));
    }
    let diag = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    Ok(&e.eigenvectors * diag * e.eigenvectors.transpose())
}

pub fn sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, f64::sqrt)
}

pub fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, |l| 1.0 / l.sqrt())
}

pub fn inv_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, |l| 1.0 / l)
}

/// Orthonormal basis (as columns of a d^2 x d(d+1)/2 matrix) of flattened symmetric matrices.
pub fn symmetric_basis(d: usize) -> DMatrix<f64> {
    let m = d * (d + 1) / 2;
    let mut b = DMatrix::zeros(d * d, m);
    let mut col = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                b[(d * i + i, col)] = 1.0;
            } else {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                b[(d * i + j, col)] = s;
                b[(d * j + i, col)] = s;
            }
            col += 1;
        }
    }
    b
}

pub fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_convention() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten(&m), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sharpen(&flatten(&m)).unwrap(), m);
        assert!(matches!(sharpen(&[1.0, 2.0, 3.0]), Err(HptrError::Shape(_))));
    }

    #[test]
    fn isserlis_identity_entries() {
        let psi = isserlis_operator(&DMatrix::identity(2, 2));
        for r in 0..4 {
            for c in 0..4 {
                let (i, j, k, l) = (r / 2, r % 2, c / 2, c % 2);
                let want = ((i == k && j == l) as u8 + (i == l && j == k) as u8) as f64;
                assert_eq!(psi[(r, c)], want);
            }
        }
    }

    #[test]
    fn kron_matches_isserlis_on_symmetric_inputs() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let psi = isserlis_operator(&s);
        let two_kron = kron(&s, &s) * 2.0;
        let v = flatten(&DMatrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 2.0]));
        let a = matvec(&psi, &v);
        let b = matvec(&two_kron, &v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn roots_and_domain() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_pd(&s).unwrap();
        assert!((&r * &r - &s).amax() < 1e-12);
        let ri = inv_sqrt_pd(&s).unwrap();
        assert!((&ri * &s * &ri - DMatrix::identity(2, 2)).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(inv_sqrt_pd(&bad), Err(HptrError::Domain(_))));
        assert!(!is_positive_definite(&bad));
    }

    #[test]
    fn symmetric_basis_is_orthonormal() {
        let b = symmetric_basis(3);
        assert!((b.transpose() * &b - DMatrix::identity(6, 6)).amax() < 1e-15);
    }
}
