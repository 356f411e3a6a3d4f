//! Primal-dual interior-point solver for block-diagonal linear matrix
//! inequalities with sparse generators.
//!
//! Dual (LMI) form:
//!
//! ```text
//!   minimize   c^T y
//!   subject to S_b(y) = sum_i y_i A_{b,i} - C_b  >= 0   for every block b
//! ```
//!
//! with primal `maximize sum_b Tr(C_b X_b)` subject to
//! `sum_b Tr(A_{b,i} X_b) = c_i`, `X_b >= 0`. The search direction is HKM
//! with a Mehrotra predictor-corrector step; the start is infeasible.
//! Nothing downstream trusts the returned point: callers certify it.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;

/// Scalar field of the solver: `f64` or `Complex64`.
pub trait Scalar: ComplexField<RealField = f64> + Copy {
    fn re(self) -> f64;
    fn from_complex(z: Complex64) -> Self;
    fn to_complex(self) -> Complex64;
}

impl Scalar for f64 {
    fn re(self) -> f64 {
        self
    }
    fn from_complex(z: Complex64) -> Self {
        z.re
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl Scalar for Complex64 {
    fn re(self) -> f64 {
        self.re
    }
    fn from_complex(z: Complex64) -> Self {
        z
    }
    fn to_complex(self) -> Complex64 {
        self
    }
}

/// Hermitian generator in coordinate form (both triangles listed).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat<T> {
    pub entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> SparseMat<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let mut entries = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v.modulus() != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Re Tr(self * m)`.
    pub fn trace_with(&self, m: &DMatrix<T>) -> f64 {
        self.entries.iter().map(|&(p, q, a)| (a * m[(q, p)]).re()).sum()
    }

    pub fn add_to(&self, target: &mut DMatrix<T>, s: f64) {
        for &(p, q, a) in &self.entries {
            target[(p, q)] += a.scale(s);
        }
    }

    fn frobenius(&self) -> f64 {
        self.entries.iter().map(|e| e.2.modulus().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LmiBlock<T> {
    pub dim: usize,
    pub constant: DMatrix<T>,
    pub terms: Vec<(usize, SparseMat<T>)>,
}

impl<T: Scalar> LmiBlock<T> {
    /// `sum_i y_i A_i - C`.
    pub fn slack(&self, y: &[f64]) -> DMatrix<T> {
        let mut s = -self.constant.clone();
        for (i, a) in &self.terms {
            a.add_to(&mut s, y[*i]);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct LmiProblem<T> {
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock<T>>,
}

impl<T: Scalar> LmiProblem<T> {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn dual_objective(&self, y: &[f64]) -> f64 {
        self.objective.iter().zip(y).map(|(c, y)| c * y).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative duality-gap target.
    pub gap_tol: f64,
    /// Relative primal and dual residual target.
    pub feas_tol: f64,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 100, gap_tol: 1e-10, feas_tol: 1e-10, step_fraction: 0.98 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Stalled,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct LmiSolution<T> {
    pub y: Vec<f64>,
    pub x: Vec<DMatrix<T>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub rel_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("variable {0} does not appear in any block")]
    UnusedVariable(usize),
    #[error("generator index {0} out of range")]
    BadIndex(usize),
    #[error("start point does not match the block structure")]
    BadStart,
}

fn tr_prod<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    // Re Tr(a b) = Re sum_ij a_ij b_ji
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (a[(i, j)] * b[(j, i)]).re();
        }
    }
    s
}

fn hermitize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::from_real(0.5);
    for i in 0..n {
        m[(i, i)] = T::from_real(m[(i, i)].re());
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)].conjugate()) * half;
            m[(i, j)] = v;
            m[(j, i)] = v.conjugate();
        }
    }
}

/// Largest `t` with `x + t dx` PSD (infinite when `dx` is PSD), given the
/// Cholesky factor of `x`.
fn max_step<T: Scalar>(chol_l: &DMatrix<T>, dx: &DMatrix<T>) -> f64 {
    let n = dx.nrows();
    if n == 1 {
        let x = (chol_l[(0, 0)] * chol_l[(0, 0)].conjugate()).re();
        let d = dx[(0, 0)].re();
        return if d >= 0.0 { f64::INFINITY } else { -x / d };
    }
    let Some(w) = chol_l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(mut z) = chol_l.solve_lower_triangular(&w.adjoint()) else {
        return 0.0;
    };
    hermitize(&mut z);
    let lmin = match nalgebra::SymmetricEigen::try_new(z, 1e-14, 1000) {
        Some(e) => e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
        None => return 0.0,
    };
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

const NO_PROGRESS_LIMIT: usize = 8;

struct Snapshot<T> {
    merit: f64,
    y: Vec<f64>,
    x: Vec<DMatrix<T>>,
    pobj: f64,
    dobj: f64,
    relgap: f64,
    pinf: f64,
    dinf: f64,
}

struct Direction<T> {
    dy: Vec<f64>,
    dx: Vec<DMatrix<T>>,
    ds: Vec<DMatrix<T>>,
}

/// Interior starting point: `x` and `s` positive definite per block.
#[derive(Debug, Clone)]
pub struct StartPoint<T> {
    pub x: Vec<DMatrix<T>>,
    pub s: Vec<DMatrix<T>>,
    pub y: Vec<f64>,
}

/// Scaled-identity start in the spirit of standard infeasible SDP codes.
pub fn default_start<T: Scalar>(p: &LmiProblem<T>) -> StartPoint<T> {
    let mut x = Vec::with_capacity(p.blocks.len());
    let mut s = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let nb = b.dim as f64;
        let mut xi: f64 = 10f64.max(nb.sqrt());
        let mut eta: f64 = 10f64.max(nb.sqrt());
        let mut amax: f64 = 0.0;
        for (i, a) in &b.terms {
            let an = a.frobenius();
            amax = amax.max(an);
            xi = xi.max(nb * (1.0 + p.objective.get(*i).map_or(0.0, |c| c.abs())) / (1.0 + an));
        }
        eta = eta.max((1.0 + amax.max(b.constant.norm())) / nb.sqrt());
        x.push(DMatrix::identity(b.dim, b.dim).scale(xi));
        s.push(DMatrix::identity(b.dim, b.dim).scale(eta));
    }
    StartPoint { x, s, y: vec![0.0; p.n_vars()] }
}

pub fn solve<T: Scalar>(
    p: &LmiProblem<T>,
    opts: &SolverOptions,
) -> Result<LmiSolution<T>, SolverError> {
    solve_from(p, opts, None)
}

/// Stopping measures are invariant under positive rescaling of the
/// variables combined with a block congruence of the slack, so equivalent
/// formulations started from corresponding points take the same path.
pub fn solve_from<T: Scalar>(
    p: &LmiProblem<T>,
    opts: &SolverOptions,
    start: Option<StartPoint<T>>,
) -> Result<LmiSolution<T>, SolverError> {
    let m = p.n_vars();
    let mut used = vec![false; m];
    for b in &p.blocks {
        for (i, _) in &b.terms {
            if *i >= m {
                return Err(SolverError::BadIndex(*i));
            }
            used[*i] = true;
        }
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(SolverError::UnusedVariable(i));
    }

    let ntot: usize = p.blocks.iter().map(|b| b.dim).sum();
    let start = start.unwrap_or_else(|| default_start(p));
    let shapes_ok = start.y.len() == m
        && start.x.len() == p.blocks.len()
        && start.s.len() == p.blocks.len()
        && p.blocks.iter().enumerate().all(|(bi, b)| {
            start.x[bi].shape() == (b.dim, b.dim) && start.s[bi].shape() == (b.dim, b.dim)
        });
    if !shapes_ok {
        return Err(SolverError::BadStart);
    }
    let StartPoint { mut x, mut s, mut y } = start;

    let status: SolveStatus;
    let mut iterations = 0;
    let mut stall = 0;
    let (mut pobj, mut dobj, mut relgap, mut pinf, mut dinf) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    // Late iterations can lose accuracy; the best iterate by residual merit
    // is returned when the loop ends without converging.
    let mut best: Option<Snapshot<T>> = None;
    let mut since_best = 0;

    loop {
        // Factorizations.
        let mut sinv = Vec::with_capacity(p.blocks.len());
        let mut lx = Vec::with_capacity(p.blocks.len());
        let mut ls = Vec::with_capacity(p.blocks.len());
        let mut fail = false;
        for bi in 0..p.blocks.len() {
            match (s[bi].clone().cholesky(), x[bi].clone().cholesky()) {
                (Some(cs), Some(cx)) => {
                    sinv.push(cs.inverse());
                    ls.push(cs.l());
                    lx.push(cx.l());
                }
                _ => {
                    fail = true;
                    break;
                }
            }
        }
        if fail {
            status = SolveStatus::NumericalFailure;
            break;
        }

        // Residuals.
        let mut rp = p.objective.clone();
        let mut rp_scale: Vec<f64> = p.objective.iter().map(|c| c.abs()).collect();
        for (bi, b) in p.blocks.iter().enumerate() {
            for (i, a) in &b.terms {
                let t = a.trace_with(&x[bi]);
                rp[*i] -= t;
                rp_scale[*i] += t.abs();
            }
        }
        let rd: Vec<DMatrix<T>> =
            p.blocks.iter().enumerate().map(|(bi, b)| b.slack(&y) - &s[bi]).collect();
        pobj = p.blocks.iter().enumerate().map(|(bi, b)| tr_prod(&b.constant, &x[bi])).sum::<f64>();
        dobj = p.dual_objective(&y);
        let xs: f64 = (0..p.blocks.len()).map(|bi| tr_prod(&x[bi], &s[bi])).sum();
        let mu = xs / ntot as f64;
        let obj_scale = (pobj.abs() + p.objective.iter().zip(&y).map(|(c, v)| (c * v).abs()).sum::<f64>())
            .max(f64::MIN_POSITIVE);
        relgap = (dobj - pobj).abs().max(xs.abs()) / obj_scale;
        pinf = rp.iter().zip(&rp_scale).map(|(r, sc)| r.abs() / sc.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        // dual residual in the metric of the primal iterate
        dinf = (0..p.blocks.len())
            .map(|bi| (lx[bi].adjoint() * &rd[bi] * &lx[bi]).norm().powi(2))
            .sum::<f64>()
            .sqrt()
            / obj_scale;
        if !(pobj.is_finite() && dobj.is_finite() && mu.is_finite()) {
            status = SolveStatus::NumericalFailure;
            break;
        }
        if relgap < opts.gap_tol && pinf < opts.feas_tol && dinf < opts.feas_tol {
            status = SolveStatus::Converged;
            best = None;
            break;
        }
        let merit = relgap.max(pinf).max(dinf);
        if best.as_ref().is_none_or(|b| merit < b.merit) {
            best = Some(Snapshot { merit, y: y.clone(), x: x.clone(), pobj, dobj, relgap, pinf, dinf });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= NO_PROGRESS_LIMIT {
                status = SolveStatus::Stalled;
                break;
            }
        }
        if iterations >= opts.max_iter {
            status = SolveStatus::MaxIterations;
            break;
        }
        iterations += 1;

        // Schur complement M_ij = Re Tr(A_i X A_j S^-1).
        let mut mm = DMatrix::<f64>::zeros(m, m);
        for (bi, b) in p.blocks.iter().enumerate() {
            let xb = &x[bi];
            let hb = &sinv[bi];
            for (u, (iu, au)) in b.terms.iter().enumerate() {
                for (iv, av) in b.terms[u..].iter() {
                    let mut v = 0.0;
                    for &(pp, q, a) in &au.entries {
                        for &(r, ss, bb) in &av.entries {
                            v += (a * xb[(q, r)] * bb * hb[(ss, pp)]).re();
                        }
                    }
                    mm[(*iu, *iv)] += v;
                    if iu != iv {
                        mm[(*iv, *iu)] += v;
                    }
                }
            }
        }
        let scale = (0..m).map(|i| mm[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let chol_m = match mm.clone().cholesky() {
            Some(c) => c,
            None => {
                let mut reg = mm.clone();
                for i in 0..m {
                    reg[(i, i)] += 1e-13 * mm[(i, i)].abs().max(1e-300 * scale);
                }
                match reg.cholesky() {
                    Some(c) => c,
                    None => {
                        status = SolveStatus::NumericalFailure;
                        break;
                    }
                }
            }
        };

        let xs_mats: Vec<DMatrix<T>> = (0..p.blocks.len()).map(|bi| &x[bi] * &s[bi]).collect();
        let direction = |rc: &[DMatrix<T>]| -> Direction<T> {
            let mut h: Vec<f64> = rp.iter().map(|r| -r).collect();
            let gm: Vec<DMatrix<T>> = (0..p.blocks.len())
                .map(|bi| (&rc[bi] - &x[bi] * &rd[bi]) * &sinv[bi])
                .collect();
            for (bi, b) in p.blocks.iter().enumerate() {
                for (i, a) in &b.terms {
                    h[*i] += a.trace_with(&gm[bi]);
                }
            }
            let dy = chol_m.solve(&nalgebra::DVector::from_vec(h));
            let dy: Vec<f64> = dy.iter().copied().collect();
            let mut dx = Vec::with_capacity(p.blocks.len());
            let mut ds = Vec::with_capacity(p.blocks.len());
            for (bi, b) in p.blocks.iter().enumerate() {
                let mut dsb = rd[bi].clone();
                for (i, a) in &b.terms {
                    a.add_to(&mut dsb, dy[*i]);
                }
                let mut dxb = (&rc[bi] - &x[bi] * &dsb) * &sinv[bi];
                hermitize(&mut dxb);
                dx.push(dxb);
                ds.push(dsb);
            }
            Direction { dy, dx, ds }
        };
        let steps = |d: &Direction<T>| -> (f64, f64) {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for bi in 0..p.blocks.len() {
                ap = ap.min(max_step(&lx[bi], &d.dx[bi]));
                ad = ad.min(max_step(&ls[bi], &d.ds[bi]));
            }
            (ap, ad)
        };

        // Predictor.
        let rc_aff: Vec<DMatrix<T>> = xs_mats.iter().map(|m| -m.clone()).collect();
        let aff = direction(&rc_aff);
        let (ap_a, ad_a) = steps(&aff);
        let ap_a = ap_a.min(1.0);
        let ad_a = ad_a.min(1.0);
        let mut mu_aff = 0.0;
        for bi in 0..p.blocks.len() {
            let xa = &x[bi] + aff.dx[bi].scale(ap_a);
            let sa = &s[bi] + aff.ds[bi].scale(ad_a);
            mu_aff += tr_prod(&xa, &sa);
        }
        mu_aff /= ntot as f64;
        let sigma = ((mu_aff / mu).max(0.0)).powi(3).min(1.0);

        // Corrector.
        let rc: Vec<DMatrix<T>> = (0..p.blocks.len())
            .map(|bi| {
                let mut r = DMatrix::<T>::identity(p.blocks[bi].dim, p.blocks[bi].dim)
                    .scale(sigma * mu);
                r -= &xs_mats[bi];
                r -= &aff.dx[bi] * &aff.ds[bi];
                r
            })
            .collect();
        let d = direction(&rc);
        let (ap, ad) = steps(&d);
        let ap = (opts.step_fraction * ap).min(1.0);
        let ad = (opts.step_fraction * ad).min(1.0);
        if !(ap.is_finite() && ad.is_finite()) {
            status = SolveStatus::NumericalFailure;
            break;
        }
        // Back off until both iterates factor; near the boundary rounding
        // can leave a full step numerically indefinite.
        let (mut ap, mut ad) = (ap, ad);
        let mut accepted = None;
        for _ in 0..30 {
            let mut xn = x.clone();
            let mut sn = s.clone();
            for bi in 0..p.blocks.len() {
                xn[bi] += d.dx[bi].scale(ap);
                hermitize(&mut xn[bi]);
                sn[bi] += d.ds[bi].scale(ad);
                hermitize(&mut sn[bi]);
            }
            let ok = xn.iter().chain(sn.iter()).all(|m| m.clone().cholesky().is_some());
            if ok {
                accepted = Some((xn, sn));
                break;
            }
            ap *= 0.5;
            ad *= 0.5;
        }
        let Some((xn, sn)) = accepted else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        x = xn;
        s = sn;
        for i in 0..m {
            y[i] += ad * d.dy[i];
        }
        if ap < 1e-9 && ad < 1e-9 {
            stall += 1;
            if stall >= 3 {
                status = SolveStatus::Stalled;
                break;
            }
        } else {
            stall = 0;
        }
    }

    if let Some(b) = best.filter(|b| b.merit < relgap.max(pinf).max(dinf) || !pobj.is_finite()) {
        y = b.y;
        x = b.x;
        pobj = b.pobj;
        dobj = b.dobj;
        relgap = b.relgap;
        pinf = b.pinf;
        dinf = b.dinf;
    }
    Ok(LmiSolution {
        y,
        x,
        status,
        iterations,
        primal_objective: pobj,
        dual_objective: dobj,
        rel_gap: relgap,
        primal_infeasibility: pinf,
        dual_infeasibility: dinf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_gen(d: usize, i: usize, v: f64) -> SparseMat<f64> {
        let _ = d;
        SparseMat { entries: vec![(i, i, v)] }
    }

    #[test]
    fn scalar_lp() {
        // minimize y subject to y - 2 >= 0
        let p = LmiProblem {
            objective: vec![1.0],
            blocks: vec![LmiBlock {
                dim: 1,
                constant: DMatrix::from_element(1, 1, 2.0),
                terms: vec![(0, diag_gen(1, 0, 1.0))],
            }],
        };
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.dual_objective - 2.0).abs() < 1e-8);
    }

    #[test]
    fn max_eigenvalue_via_identity() {
        // minimize t subject to t I - C >= 0 gives lambda_max(C)
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -1.0]);
        let p = LmiProblem {
            objective: vec![1.0],
            blocks: vec![LmiBlock {
                dim: 2,
                constant: c,
                terms: vec![(0, SparseMat { entries: vec![(0, 0, 1.0), (1, 1, 1.0)] })],
            }],
        };
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.dual_objective - 5f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn complex_max_eigenvalue() {
        let c = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, -1.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(0.0, 0.0),
            ],
        );
        let one = Complex64::new(1.0, 0.0);
        let p = LmiProblem {
            objective: vec![1.0],
            blocks: vec![LmiBlock {
                dim: 2,
                constant: c,
                terms: vec![(0, SparseMat { entries: vec![(0, 0, one), (1, 1, one)] })],
            }],
        };
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!((sol.dual_objective - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unused_variable_rejected() {
        let p: LmiProblem<f64> = LmiProblem {
            objective: vec![1.0, 1.0],
            blocks: vec![LmiBlock {
                dim: 1,
                constant: DMatrix::zeros(1, 1),
                terms: vec![(0, diag_gen(1, 0, 1.0))],
            }],
        };
        assert_eq!(solve(&p, &SolverOptions::default()).unwrap_err(), SolverError::UnusedVariable(1));
    }
}
