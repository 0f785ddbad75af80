//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::scalar::{abs, lit, max, Real};

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Eigenvalues of the symmetric part of `m`, sorted ascending.
pub fn sym_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut values: Vec<T> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn lambda_max<T: Real>(m: &DMatrix<T>) -> T {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn lambda_min<T: Real>(m: &DMatrix<T>) -> T {
    sym_eigenvalues(m)[0]
}

/// Eigenvalues of a general square matrix, sorted by real part then imaginary part.
pub fn eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<Complex<T>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut values: Vec<Complex<T>> = m.complex_eigenvalues().iter().cloned().collect();
    values.sort_by(|a, b| {
        a.re.partial_cmp(&b.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    values
}

/// Largest absolute entry.
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &v| max(acc, abs(v)))
}

/// Orthonormal basis (as columns) of the kernel of `bᵀ`, i.e. all `v` with `vᵀ b = 0`.
///
/// `b` is `n × p`. Singular values below `rel_cutoff · σ_max` count as zero; when `b`
/// vanishes entirely the basis is the identity.
pub fn left_null_space<T: Real>(b: &DMatrix<T>, rel_cutoff: T) -> DMatrix<T> {
    let n = b.nrows();
    let cols = n.max(b.ncols());
    // Pad to at least n columns so the SVD yields a full n × n left factor.
    let mut padded = DMatrix::<T>::zeros(n, cols);
    padded.view_mut((0, 0), (n, b.ncols())).copy_from(b);
    let svd = padded.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.iter().fold(T::zero(), |acc, &s| max(acc, s));
    if sigma_max == T::zero() {
        return DMatrix::identity(n, n);
    }
    let threshold = rel_cutoff * sigma_max;
    let kernel: Vec<usize> = (0..n).filter(|&k| svd.singular_values[k] < threshold).collect();
    let mut basis = DMatrix::<T>::zeros(n, kernel.len());
    for (j, &k) in kernel.iter().enumerate() {
        basis.set_column(j, &u.column(k));
    }
    basis
}

/// Solves `S A + Aᵀ S = −C` by the Kronecker formulation.
///
/// Returns `None` when the linear system is singular (some pair of eigenvalues of `A`
/// sums to zero).
pub fn solve_lyapunov<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>) -> Option<DMatrix<T>> {
    let k = a.nrows();
    let size = k * k;
    // vec(S A) = (Aᵀ ⊗ I) vec(S), vec(Aᵀ S) = (I ⊗ Aᵀ) vec(S), column-major vec.
    let eye = DMatrix::<T>::identity(k, k);
    let at = a.transpose();
    let system = at.kronecker(&eye) + eye.kronecker(&at);
    let rhs = DVector::from_iterator(size, c.iter().map(|&v| -v));
    let solution = system.lu().solve(&rhs)?;
    let s = DMatrix::from_column_slice(k, k, solution.as_slice());
    Some(symmetrize(&s))
}

/// Central finite-difference Jacobian of `f` at `z`.
pub fn finite_difference_jacobian<T, F>(f: F, z: &DVector<T>, h: T) -> DMatrix<T>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    let n = z.len();
    let two_h = h + h;
    let mut columns = Vec::with_capacity(n);
    for k in 0..n {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[k] += h;
        minus[k] -= h;
        columns.push((f(&plus) - f(&minus)) / two_h);
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let mut jac = DMatrix::<T>::zeros(rows, n);
    for (k, col) in columns.iter().enumerate() {
        jac.set_column(k, col);
    }
    jac
}

/// Central finite-difference gradient of a scalar map.
pub fn finite_difference_gradient<T, F>(f: F, z: &DVector<T>, h: T) -> DVector<T>
where
    T: Real,
    F: Fn(&DVector<T>) -> T,
{
    let two_h = h + h;
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|k| {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[k] += h;
            minus[k] -= h;
            (f(&plus) - f(&minus)) / two_h
        }),
    )
}
