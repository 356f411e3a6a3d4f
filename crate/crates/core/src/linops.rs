//! Dense Hermitian operators, kets and eigen-decomposition.
//!
//! Storage is a plain `nalgebra::DMatrix<Complex64>`. Every operator that
//! enters this type has been symmetrized, so downstream eigensolvers may
//! assume exact Hermiticity.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Largest operator dimension accepted by [`tensor`].
pub const MAX_DIM: usize = 4096;

/// Asymmetry above which an input is rejected instead of symmetrized.
pub const HERMITICITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinopsError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not Hermitian (asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("dimension {0} exceeds the configured maximum {MAX_DIM}")]
    DimensionOverflow(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("ket has zero norm")]
    ZeroNorm,
    #[error("eigensolver did not converge")]
    NoConvergence,
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// A normalized state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ket {
    amps: DVector<C64>,
}

impl Ket {
    /// Builds a ket, rescaling the amplitudes to unit norm.
    pub fn normalized(amps: Vec<C64>) -> Result<Self, LinopsError> {
        let v = DVector::from_vec(amps);
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(LinopsError::ZeroNorm);
        }
        Ok(Self { amps: v.unscale(n) })
    }

    pub fn from_real(amps: &[f64]) -> Result<Self, LinopsError> {
        Self::normalized(amps.iter().map(|&x| c(x, 0.0)).collect())
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[i] = c(1.0, 0.0);
        Self { amps: v }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amps
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Ket) -> C64 {
        self.amps.dotc(&other.amps)
    }

    pub fn kron(&self, other: &Ket) -> Ket {
        Ket { amps: self.amps.kronecker(&other.amps) }
    }
}

/// Dense Hermitian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Herm {
    m: DMatrix<C64>,
}

impl Herm {
    /// Symmetrizes `m`, rejecting inputs with `max|m - m^dagger| > 1e-9`.
    pub fn new(m: DMatrix<C64>) -> Result<Self, LinopsError> {
        if m.nrows() != m.ncols() {
            return Err(LinopsError::NotSquare(m.nrows(), m.ncols()));
        }
        let adj = m.adjoint();
        let asym = (&m - &adj).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if asym > HERMITICITY_TOL {
            return Err(LinopsError::NotHermitian(asym));
        }
        Ok(Self { m: (m + adj).unscale(2.0) })
    }

    /// Wraps a matrix already known to be Hermitian up to rounding.
    pub(crate) fn from_trusted(m: DMatrix<C64>) -> Self {
        let adj = m.adjoint();
        Self { m: (m + adj).unscale(2.0) }
    }

    pub fn from_real(m: &DMatrix<f64>) -> Result<Self, LinopsError> {
        Self::new(m.map(|x| c(x, 0.0)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self { m: DMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: DMatrix::identity(dim, dim) }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = c(v, 0.0);
        }
        Self { m }
    }

    /// `|k><k|`.
    pub fn projector(k: &Ket) -> Self {
        let a = k.amplitudes();
        Self::from_trusted(a * a.adjoint())
    }

    /// `|i><i|` on a `dim`-dimensional space.
    pub fn basis_projector(dim: usize, i: usize) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        m[(i, i)] = c(1.0, 0.0);
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.m[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.m.diagonal().iter().map(|z| z.re).sum()
    }

    /// `Re Tr(self * other)`; exact for Hermitian pairs.
    pub fn trace_with(&self, other: &Herm) -> f64 {
        // Tr(AB) = sum_ij A_ij B_ji = sum_ij A_ij conj(B_ij)
        self.m.iter().zip(other.m.iter()).map(|(a, b)| (a * b.conj()).re).sum()
    }

    pub fn scale(&self, s: f64) -> Herm {
        Herm { m: self.m.scale(s) }
    }

    pub fn add(&self, other: &Herm) -> Herm {
        Herm { m: &self.m + &other.m }
    }

    pub fn sub(&self, other: &Herm) -> Herm {
        Herm { m: &self.m - &other.m }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Herm) {
        self.m += other.m.scale(s);
    }

    /// `self^2`, Hermitian by construction.
    pub fn square(&self) -> Herm {
        Herm::from_trusted(&self.m * &self.m)
    }

    /// `B * self * B^dagger` for an arbitrary (possibly rectangular) `B`.
    pub fn congruence(&self, b: &DMatrix<C64>) -> Herm {
        Herm::from_trusted(b * &self.m * b.adjoint())
    }

    pub fn frobenius_distance(&self, other: &Herm) -> f64 {
        (&self.m - &other.m).norm()
    }

    pub fn norm(&self) -> f64 {
        self.m.norm()
    }

    /// True when every imaginary part is exactly zero.
    pub fn is_real(&self) -> bool {
        self.m.iter().all(|z| z.im == 0.0)
    }

    /// True when every real part is exactly zero.
    pub fn is_imaginary(&self) -> bool {
        self.m.iter().all(|z| z.re == 0.0)
    }

    pub fn real_part(&self) -> DMatrix<f64> {
        self.m.map(|z| z.re)
    }

    pub fn eig(&self) -> Result<EigenSystem, LinopsError> {
        eig_herm(self)
    }

    pub fn min_eig(&self) -> Result<f64, LinopsError> {
        min_eig(self)
    }

    pub fn max_eig(&self) -> Result<f64, LinopsError> {
        Ok(-min_eig(&self.scale(-1.0))?)
    }
}

/// Kronecker product `a (x) b`.
pub fn tensor(a: &Herm, b: &Herm) -> Result<Herm, LinopsError> {
    let d = a.dim().checked_mul(b.dim()).unwrap_or(usize::MAX);
    if d > MAX_DIM {
        return Err(LinopsError::DimensionOverflow(d));
    }
    Ok(Herm { m: a.m.kronecker(&b.m) })
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: Vec<Ket>,
}

impl EigenSystem {
    pub fn reconstruct(&self) -> Herm {
        let d = self.vectors.first().map_or(0, Ket::dim);
        let mut m = DMatrix::zeros(d, d);
        for (w, v) in self.values.iter().zip(&self.vectors) {
            let a = v.amplitudes();
            m += (a * a.adjoint()).scale(*w);
        }
        Herm::from_trusted(m)
    }
}

fn sym_eigen(m: DMatrix<C64>) -> Result<nalgebra::SymmetricEigen<C64, nalgebra::Dyn>, LinopsError> {
    nalgebra::SymmetricEigen::try_new(m, 1e-15, 10_000).ok_or(LinopsError::NoConvergence)
}

pub fn eig_herm(h: &Herm) -> Result<EigenSystem, LinopsError> {
    let se = sym_eigen(h.m.clone())?;
    let mut order: Vec<usize> = (0..h.dim()).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let values = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| Ket { amps: se.eigenvectors.column(i).into_owned() })
        .collect();
    Ok(EigenSystem { values, vectors })
}

pub fn min_eig(h: &Herm) -> Result<f64, LinopsError> {
    if h.dim() == 0 {
        return Ok(0.0);
    }
    if h.dim() == 1 {
        return Ok(h.m[(0, 0)].re);
    }
    let vals = nalgebra::SymmetricEigen::try_new(h.m.clone(), 1e-15, 10_000)
        .ok_or(LinopsError::NoConvergence)?
        .eigenvalues;
    Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Real-symmetric minimum eigenvalue.
pub fn min_eig_real(m: &DMatrix<f64>) -> Result<f64, LinopsError> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let vals = nalgebra::SymmetricEigen::try_new(m.clone(), 1e-15, 10_000)
        .ok_or(LinopsError::NoConvergence)?
        .eigenvalues;
    Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Block-diagonal direct sum.
pub fn direct_sum(blocks: &[Herm]) -> Herm {
    let d: usize = blocks.iter().map(Herm::dim).sum();
    let mut m = DMatrix::zeros(d, d);
    let mut off = 0;
    for b in blocks {
        let n = b.dim();
        m.view_mut((off, off), (n, n)).copy_from(&b.m);
        off += n;
    }
    Herm { m }
}

/// Partial trace over the second factor of a `da * db` operator.
pub fn partial_trace_b(h: &Herm, da: usize, db: usize) -> Result<Herm, LinopsError> {
    if da * db != h.dim() {
        return Err(LinopsError::DimensionMismatch(da * db, h.dim()));
    }
    let mut m = DMatrix::zeros(da, da);
    for i in 0..da {
        for j in 0..da {
            let mut s = c(0.0, 0.0);
            for k in 0..db {
                s += h.m[(i * db + k, j * db + k)];
            }
            m[(i, j)] = s;
        }
    }
    Ok(Herm::from_trusted(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_herm(rng: &mut ChaCha8Rng, d: usize) -> Herm {
        let m = DMatrix::from_fn(d, d, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        Herm::from_trusted(&m + m.adjoint())
    }

    #[test]
    fn identity_tensor_identity() {
        let t = tensor(&Herm::identity(2), &Herm::identity(2)).unwrap();
        assert_eq!(t, Herm::identity(4));
    }

    #[test]
    fn basis_projector_tensor() {
        let t = tensor(&Herm::basis_projector(2, 0), &Herm::basis_projector(2, 1)).unwrap();
        assert_eq!(t, Herm::basis_projector(4, 1));
    }

    #[test]
    fn tensor_trace_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_herm(&mut rng, 3);
        let b = random_herm(&mut rng, 3);
        let t = tensor(&a, &b).unwrap();
        assert!((t.trace() - a.trace() * b.trace()).abs() < 1e-12);
    }

    #[test]
    fn tensor_overflow_is_rejected() {
        let a = Herm::identity(100);
        assert!(matches!(tensor(&a, &a), Err(LinopsError::DimensionOverflow(_))));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(Herm::new(m), Err(LinopsError::NotHermitian(_))));
    }

    #[test]
    fn diagonal_spectrum() {
        let e = eig_herm(&Herm::diag(&[2.0, -1.0, 0.0])).unwrap();
        assert_eq!(e.values.len(), 3);
        for (got, want) in e.values.iter().zip([-1.0, 0.0, 2.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn pauli_x_spectrum() {
        let x = Herm::from_real(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let e = eig_herm(&x).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = Ket::from_real(&[s, s]).unwrap();
        assert!((e.vectors[1].inner(&plus).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_herm(&mut rng, 8);
        let e = eig_herm(&h).unwrap();
        assert!(e.reconstruct().frobenius_distance(&h) < 1e-10);
        for i in 0..8 {
            for j in 0..8 {
                let ip = e.vectors[i].inner(&e.vectors[j]).norm();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn min_eig_examples() {
        assert_eq!(min_eig(&Herm::zeros(3)).unwrap(), 0.0);
        let h = Herm::diag(&[1.0, -2.0]);
        assert!((min_eig(&h).unwrap() + 2.0).abs() < 1e-14);
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DMatrix::from_fn(3, 5, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let g = Herm::from_trusted(v.adjoint() * v);
        assert!(min_eig(&g).unwrap() >= -1e-12);
    }

    #[test]
    fn partial_trace_of_product() {
        let a = Herm::diag(&[0.3, 0.7]);
        let b = Herm::diag(&[0.5, 0.25, 0.25]);
        let pt = partial_trace_b(&tensor(&a, &b).unwrap(), 2, 3).unwrap();
        assert!(pt.frobenius_distance(&a) < 1e-15);
    }

    #[test]
    fn direct_sum_spectrum() {
        let s = direct_sum(&[Herm::diag(&[1.0]), Herm::diag(&[-3.0, 2.0])]);
        assert_eq!(s.dim(), 3);
        assert!((min_eig(&s).unwrap() + 3.0).abs() < 1e-14);
    }
}
