//! Upper bounds on the sum of the observable `W` over the test rounds of a
//! source with setting correlations of finite length, including the
//! decoy-state variant with intensity correlations.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::concbounds::bernstein_delta;
use crate::linops::{c, min_eig, Herm, LinopsError};
use crate::protocolkit::{decoy_gram, poisson, DecoyModel, SettingRegister};
use crate::sdpcore::solver::{solve, LmiBlock, LmiProblem, Scalar, SolveStatus, SolverOptions, SparseMat};

/// Margin added when shifting an infeasible Gram dual point.
const GRAM_PAD: f64 = 1e-10;
/// Default limit on raw context enumeration.
pub const CONTEXT_CAP: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CorrError {
    #[error("invalid correlation model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Gram SDP solver failed: {0}")]
    Solver(String),
    #[error("context enumeration needs {0} histories, cap is {1}")]
    ContextOverflow(usize, usize),
    #[error(transparent)]
    Linops(#[from] LinopsError),
}

pub fn epsilon_prime(epsilon: f64, l: usize) -> f64 {
    // 1-(1-e)^(L+1) without cancellation for tiny e
    -(((l + 1) as f64) * (-epsilon).ln_1p()).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

/// One-sided bound `alpha * opt` on `Tr(W^moment rho_A)` over the Gram set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBound {
    pub value: f64,
    /// Multipliers of the range-reduced problem: entries of the identity
    /// top block (row-major upper triangle, real then imaginary), then the
    /// `G_c` diagonals, then the `G_⊥` diagonals.
    pub y: Vec<f64>,
    /// Diagonal shift applied to make the dual point feasible.
    pub restoration: f64,
    pub margin: f64,
    pub iterations: usize,
    /// Spectral weight of the fixed block below the rank threshold.
    pub dropped_weight: f64,
    pub status: SolveStatus,
}

/// Relative eigenvalue threshold for the rank of the fixed block.
const RANK_TOL: f64 = 1e-11;

/// Constraint generator `A_k` with right-hand side `b_k`.
struct Constraint {
    entries: Vec<(usize, usize, Complex64)>,
    rhs: f64,
    diagonal: bool,
}

/// Constraints on `[[top, V^† X], [X^† V, G_⊥]]`-shaped matrices: the
/// top block equals `top`, `(V^† X)_ii = 0` and `G_⊥` has unit diagonal.
/// The original problem is `top = Φ`, `V = I`.
fn constraints(top: &Herm, v: &DMatrix<Complex64>, imag: bool) -> Vec<Constraint> {
    let r = top.dim();
    let n = v.ncols();
    let half = c(0.5, 0.0);
    let ihalf = c(0.0, 0.5);
    let mut out = Vec::new();
    for i in 0..r {
        out.push(Constraint { entries: vec![(i, i, c(1.0, 0.0))], rhs: top.get(i, i).re, diagonal: true });
        for j in (i + 1)..r {
            out.push(Constraint { entries: vec![(i, j, half), (j, i, half)], rhs: top.get(i, j).re, diagonal: false });
            if imag {
                out.push(Constraint { entries: vec![(i, j, ihalf), (j, i, -ihalf)], rhs: top.get(i, j).im, diagonal: false });
            }
        }
    }
    for i in 0..n {
        let col = |z: Complex64| -> Vec<(usize, usize, Complex64)> {
            let mut e = Vec::new();
            for k in 0..r {
                let vk = v[(k, i)];
                if vk.norm() != 0.0 {
                    e.push((k, r + i, vk * z));
                    e.push((r + i, k, (vk * z).conj()));
                }
            }
            e
        };
        out.push(Constraint { entries: col(half), rhs: 0.0, diagonal: false });
        if imag {
            out.push(Constraint { entries: col(ihalf), rhs: 0.0, diagonal: false });
        }
    }
    for i in 0..n {
        out.push(Constraint { entries: vec![(r + i, r + i, c(1.0, 0.0))], rhs: 1.0, diagonal: true });
    }
    out
}

/// `C = K ⊗ M` with `K = v v^T`, `v = (sqrt(1-e'), sqrt(e'))` and
/// `M_ij = sqrt(p_i p_j) W_ji`.
fn objective_matrix(probs: &[f64], w: &Herm, eps_prime: f64) -> DMatrix<Complex64> {
    let n = probs.len();
    let v = [(1.0 - eps_prime).sqrt(), eps_prime.sqrt()];
    DMatrix::from_fn(2 * n, 2 * n, |r, s| {
        let (bi, i) = (r / n, r % n);
        let (bj, j) = (s / n, s % n);
        w.get(j, i) * (v[bi] * v[bj] * (probs[i] * probs[j]).sqrt())
    })
}

fn lmi<T: Scalar>(cons: &[Constraint], cmat: &DMatrix<Complex64>) -> LmiProblem<T> {
    let dim = cmat.nrows();
    let terms = cons
        .iter()
        .enumerate()
        .map(|(k, con)| {
            (k, SparseMat { entries: con.entries.iter().map(|&(i, j, z)| (i, j, T::from_complex(z))).collect() })
        })
        .collect();
    LmiProblem {
        objective: cons.iter().map(|c| c.rhs).collect(),
        blocks: vec![LmiBlock { dim, constant: cmat.map(T::from_complex), terms }],
    }
}

fn slack(cons: &[Constraint], cmat: &DMatrix<Complex64>, y: &[f64]) -> Result<Herm, LinopsError> {
    let mut s = -cmat.clone();
    for (con, &yk) in cons.iter().zip(y) {
        for &(i, j, z) in &con.entries {
            s[(i, j)] += z * yk;
        }
    }
    Herm::new(s)
}

/// Range factor `Φ = V^† V` with orthogonal rows of `V`, and the absolute
/// spectral weight left out below the rank threshold.
fn range_factor(phi: &Herm, real: bool) -> (DMatrix<Complex64>, f64) {
    let n = phi.dim();
    let (vals, vecs): (Vec<f64>, DMatrix<Complex64>) = if real {
        let e = nalgebra::SymmetricEigen::new(phi.real_part());
        (e.eigenvalues.iter().copied().collect(), e.eigenvectors.map(|x| c(x, 0.0)))
    } else {
        let e = nalgebra::SymmetricEigen::new(phi.matrix().clone());
        (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
    };
    let top = vals.iter().copied().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&k| vals[k] > RANK_TOL * top.max(1.0)).collect();
    let dropped = (0..n).filter(|k| !keep.contains(k)).map(|k| vals[k].abs()).sum();
    let v = DMatrix::from_fn(keep.len(), n, |k, j| vecs[(j, keep[k])].conj() * vals[keep[k]].sqrt());
    (v, dropped)
}

/// `alpha * (min|max) Tr(W^moment rho_A^{e'}(G))` over PSD `G` whose fixed
/// block is `phi` (already including any `xi` factors). Maxima are bounded
/// from above and minima from below by a certified dual point.
///
/// With `phi = V^† V` of rank `r`, every feasible `G` is `B^† H B` for
/// `B = V ⊕ I` and PSD `H = [[I_r, X], [X^†, G_⊥]]`, so the problem is
/// solved and certified over `H`, where the primal is strictly feasible.
pub fn gram_extrema(
    phi: &Herm,
    probs: &[f64],
    w: &Herm,
    eps_prime: f64,
    alpha: f64,
    sense: Sense,
    moment: u8,
) -> Result<GramBound, CorrError> {
    let n = phi.dim();
    if probs.len() != n || w.dim() != n {
        return Err(CorrError::Dimension(format!("Gram {n}, probs {}, W {}", probs.len(), w.dim())));
    }
    if !(0.0..=1.0).contains(&eps_prime) {
        return Err(CorrError::InvalidModel(format!("eps' = {eps_prime}")));
    }
    let wm = if moment == 2 { w.square() } else { w.clone() };
    let sign = if sense == Sense::Max { 1.0 } else { -1.0 };
    if eps_prime == 0.0 {
        // the fixed block alone determines rho
        let mut tr = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                tr += wm.get(j, i) * phi.get(j, i) * (probs[i] * probs[j]).sqrt();
            }
        }
        return Ok(GramBound { value: alpha * tr.re, y: Vec::new(), restoration: 0.0, margin: 0.0, iterations: 0, dropped_weight: 0.0, status: SolveStatus::Converged });
    }
    let cmat = objective_matrix(probs, &wm, eps_prime) * Complex64::new(sign, 0.0);
    let real = phi.is_real() && wm.is_real();
    let identity = DMatrix::<Complex64>::identity(n, n);
    let (v, dropped_weight) = range_factor(phi, real);
    let r = v.nrows();
    let mut b = DMatrix::<Complex64>::zeros(r + n, 2 * n);
    b.view_mut((0, 0), (r, n)).copy_from(&v);
    b.view_mut((r, n), (n, n)).copy_from(&identity);
    let cred = &b * &cmat * b.adjoint();
    let cons_red = constraints(&Herm::identity(r), &v, !real);
    let opts = SolverOptions::default();
    let (y_red, status, iterations) = if real {
        let p = lmi::<f64>(&cons_red, &cred);
        let s = solve(&p, &opts).map_err(|e| CorrError::Solver(e.to_string()))?;
        (s.y, s.status, s.iterations)
    } else {
        let p = lmi::<Complex64>(&cons_red, &cred);
        let s = solve(&p, &opts).map_err(|e| CorrError::Solver(e.to_string()))?;
        (s.y, s.status, s.iterations)
    };
    // any finite iterate is certified; the status only affects tightness
    if y_red.iter().any(|v| !v.is_finite()) {
        return Err(CorrError::Solver(format!("{status:?}")));
    }

    let mut y = y_red;
    let m0 = min_eig(&slack(&cons_red, &cred, &y)?)?;
    let mut restoration = 0.0;
    if m0 < GRAM_PAD {
        restoration = GRAM_PAD - m0;
        for (con, yk) in cons_red.iter().zip(y.iter_mut()) {
            if con.diagonal {
                *yk += restoration;
            }
        }
    }
    let margin = min_eig(&slack(&cons_red, &cred, &y)?)?;
    if margin < 0.0 {
        return Err(CorrError::Solver(format!("restored margin {margin:e}")));
    }
    let cons = cons_red;
    let obj: f64 = cons.iter().zip(&y).map(|(c, y)| c.rhs * y).sum();
    Ok(GramBound { value: alpha * sign * obj, y, restoration, margin, iterations, dropped_weight, status })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwBound {
    pub e_lo: f64,
    pub e_hi: f64,
    pub e2_hi: f64,
    pub variance_hi: f64,
    pub c_hi: f64,
    pub delta_b: f64,
    pub n_bar: f64,
    pub m_w_upper: f64,
    pub eps_pb: f64,
}

fn per_context(e: (f64, f64, f64), omega_min: f64, omega_max: f64, n_bar: f64, l: usize, eps_pb: f64) -> MwBound {
    let (e_lo, e_hi, e2_hi) = e;
    let c_hi = (omega_max - e_lo).max(e_hi - omega_min);
    let variance_hi = (e2_hi - (e_lo.max(0.0) + e_hi.min(0.0)).powi(2)).max(0.0);
    let delta_b = bernstein_delta(n_bar, variance_hi, c_hi.max(f64::MIN_POSITIVE), eps_pb / (l + 1) as f64);
    let m_w_upper = (l + 1) as f64 * n_bar * (e_hi + delta_b);
    MwBound { e_lo, e_hi, e2_hi, variance_hi, c_hi, delta_b, n_bar, m_w_upper, eps_pb }
}

pub fn mw_upper(e: (f64, f64, f64), omega_min: f64, omega_max: f64, n: f64, l: usize, eps_pb: f64) -> MwBound {
    let n_bar = (n / (l + 1) as f64).ceil();
    per_context(e, omega_min, omega_max, n_bar, l, eps_pb)
}

/// Gram-set extrema `(E_lo, E_hi, E2_hi)` for one register.
pub fn gram_moments(phi: &Herm, probs: &[f64], w: &Herm, eps_prime: f64, alpha: f64) -> Result<(f64, f64, f64), CorrError> {
    let lo = gram_extrema(phi, probs, w, eps_prime, alpha, Sense::Min, 1)?;
    let hi = gram_extrema(phi, probs, w, eps_prime, alpha, Sense::Max, 1)?;
    let hi2 = gram_extrema(phi, probs, w, eps_prime, alpha, Sense::Max, 2)?;
    let (lo, hi, hi2) = (lo.value, hi.value, hi2.value);
    Ok((lo, hi, hi2))
}

/// Single-photon sources with setting correlations of length `l`.
#[allow(clippy::too_many_arguments)]
pub fn mw_upper_correlated(
    reg: &SettingRegister,
    w: &Herm,
    omega: (f64, f64),
    alpha: f64,
    n: f64,
    l: usize,
    epsilon: f64,
    eps_pb: f64,
) -> Result<MwBound, CorrError> {
    let e = gram_moments(&reg.gram, &reg.probs, w, epsilon_prime(epsilon, l), alpha)?;
    Ok(mw_upper(e, omega.0, omega.1, n, l, eps_pb))
}

/// Intensities whose value depends on the `L` previous intensity settings.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCorrelationModel {
    pub avg_intensities: Vec<f64>,
    pub eps_ic: f64,
    pub zeta: f64,
    pub corr_length: usize,
    pub setting_probs: Vec<f64>,
}

impl IntensityCorrelationModel {
    pub fn from_decoy(m: &DecoyModel) -> Self {
        Self {
            avg_intensities: m.intensities.clone(),
            eps_ic: m.eps_ic,
            zeta: m.zeta,
            corr_length: m.corr_length,
            setting_probs: m.intensity_probs.clone(),
        }
    }

    /// `z(mu)`: `1 - p_0` for the strongest setting, `-p_0` otherwise.
    pub fn z(&self, mu: usize) -> f64 {
        let p0 = self.setting_probs[0];
        if mu == 0 {
            1.0 - p0
        } else {
            -p0
        }
    }

    fn weight(&self, lag: usize) -> f64 {
        self.eps_ic * (-self.zeta * (lag as f64 - 1.0)).exp()
    }

    /// `delta` of a history with `history[l-1] = mu_{u-l}`.
    pub fn delta(&self, history: &[usize]) -> f64 {
        history.iter().enumerate().map(|(k, &mu)| self.weight(k + 1) * self.z(mu)).sum()
    }

    pub fn validate(&self) -> Result<(), CorrError> {
        let n = self.avg_intensities.len();
        if n == 0 || self.setting_probs.len() != n {
            return Err(CorrError::InvalidModel("intensity and probability lengths differ".into()));
        }
        if self.eps_ic < 0.0 || self.zeta <= 0.0 {
            return Err(CorrError::InvalidModel(format!("eps_ic {} zeta {}", self.eps_ic, self.zeta)));
        }
        let worst: f64 = (1..=self.corr_length).map(|l| self.weight(l) * self.z(1.min(n - 1))).sum();
        if n > 1 && worst < -1.0 {
            return Err(CorrError::InvalidModel(format!("delta reaches {worst}")));
        }
        Ok(())
    }

    pub fn actual_intensity(&self, mu: usize, history: &[usize]) -> Result<f64, CorrError> {
        if history.len() > self.corr_length {
            return Err(CorrError::InvalidModel(format!("history of {} exceeds L", history.len())));
        }
        let d = self.delta(history);
        if d < -1.0 {
            return Err(CorrError::InvalidModel(format!("delta {d} < -1")));
        }
        Ok(self.avg_intensities[mu] * (1.0 + d))
    }
}

/// Intensity settings around round `u`: `past[l-1] = mu_{u-l}` and
/// `future[k-1] = mu_{u+k}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Context {
    pub past: Vec<usize>,
    pub future: Vec<usize>,
}

/// `xi` between current intensities `mu_i` and `mu_j` in `ctx`.
pub fn xi_coefficients(model: &IntensityCorrelationModel, mu_i: usize, mu_j: usize, ctx: &Context) -> Result<f64, CorrError> {
    let l = model.corr_length;
    let mut log = 0.0;
    for k in 1..=l {
        let hist = |x: usize| -> Vec<usize> {
            (1..=l)
                .map(|lag| match lag.cmp(&k) {
                    std::cmp::Ordering::Less => ctx.future[k - lag - 1],
                    std::cmp::Ordering::Equal => x,
                    std::cmp::Ordering::Greater => ctx.past[lag - k - 1],
                })
                .collect()
        };
        let mu_next = ctx.future[k - 1];
        let a = model.actual_intensity(mu_next, &hist(mu_i))?.sqrt();
        let b = model.actual_intensity(mu_next, &hist(mu_j))?.sqrt();
        log -= 0.5 * (a - b).powi(2);
    }
    Ok(log.exp())
}

/// A class of contexts giving identical SDP data.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextClass {
    pub representative: Context,
    pub multiplicity: usize,
    /// `delta` of the current round.
    pub delta: f64,
    /// `xi` indexed by intensity pairs.
    pub xi: Vec<Vec<f64>>,
}

/// Enumerates all intensity histories and merges those with bit-identical
/// `(delta, xi)`, in first-seen order.
pub fn enumerate_contexts(model: &IntensityCorrelationModel, cap: usize) -> Result<Vec<ContextClass>, CorrError> {
    model.validate()?;
    let l = model.corr_length;
    let k = model.avg_intensities.len();
    let total = k.checked_pow((2 * l) as u32).filter(|&t| t <= cap).ok_or(CorrError::ContextOverflow(
        k.saturating_pow((2 * l) as u32),
        cap,
    ))?;
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<ContextClass> = Vec::new();
    for code in 0..total {
        let mut digits = Vec::with_capacity(2 * l);
        let mut c = code;
        for _ in 0..2 * l {
            digits.push(c % k);
            c /= k;
        }
        let ctx = Context { past: digits[..l].to_vec(), future: digits[l..].to_vec() };
        let delta = model.delta(&ctx.past) + 0.0;
        let mut xi = vec![vec![1.0; k]; k];
        for a in 0..k {
            for b in 0..k {
                xi[a][b] = xi_coefficients(model, a, b, &ctx)? + 0.0;
            }
        }
        let mut sig = vec![delta.to_bits()];
        sig.extend(xi.iter().flatten().map(|v| v.to_bits()));
        match seen.get(&sig) {
            Some(&idx) => out[idx].multiplicity += 1,
            None => {
                seen.insert(sig, out.len());
                out.push(ContextClass { representative: ctx, multiplicity: 1, delta, xi });
            }
        }
    }
    Ok(out)
}

/// Decoy-state observable: one `W_n` per photon number up to `n_cut` and
/// the diagonal `lambda_{i,inf}` of the tail block.
#[derive(Debug, Clone)]
pub struct DecoyObservable<'a> {
    pub w_blocks: &'a [Herm],
    pub lambda_inf: &'a [f64],
    pub omega_min: f64,
    pub omega_max: f64,
}

/// Moment bounds of one context class.
pub fn context_moments(
    model: &DecoyModel,
    corr: &IntensityCorrelationModel,
    class: &ContextClass,
    obs: &DecoyObservable,
    alpha: f64,
) -> Result<(f64, f64, f64), CorrError> {
    let pairs = model.pairs();
    let probs = model.setting_probs();
    let eps_prime = epsilon_prime(model.epsilon, model.corr_length);
    let intensity: Vec<f64> = pairs
        .iter()
        .map(|&(_, mu)| corr.avg_intensities[mu] * (1.0 + class.delta))
        .collect();
    if obs.w_blocks.len() != model.n_cut + 1 || obs.lambda_inf.len() != pairs.len() {
        return Err(CorrError::Dimension("decoy observable blocks".into()));
    }
    let (mut lo, mut hi, mut hi2) = (0.0, 0.0, 0.0);
    let mut covered = vec![0.0; pairs.len()];
    for n in 0..=model.n_cut {
        let pn: Vec<f64> = (0..pairs.len()).map(|i| probs[i] * poisson(intensity[i], n)).collect();
        for (c, (p, q)) in covered.iter_mut().zip(pn.iter().zip(&probs)) {
            *c += p / q;
        }
        let base = decoy_gram(model.delta_theta, &pairs, n);
        let phi = Herm::new(DMatrix::from_fn(pairs.len(), pairs.len(), |i, j| {
            base.get(i, j) * class.xi[pairs[i].1][pairs[j].1]
        }))?;
        let (a, b, c2) = gram_moments(&phi, &pn, &obs.w_blocks[n], eps_prime, alpha)?;
        lo += a;
        hi += b;
        hi2 += c2;
    }
    for i in 0..pairs.len() {
        let t = probs[i] * (1.0 - covered[i]).max(0.0);
        let lam = obs.lambda_inf[i];
        lo += alpha * lam * t;
        hi += alpha * lam * t;
        hi2 += alpha * lam * lam * t;
    }
    Ok((lo, hi, hi2))
}

/// Worst case over contexts of the Bernstein-inflated upper bound.
pub fn mw_upper_decoy(
    model: &DecoyModel,
    obs: &DecoyObservable,
    alpha: f64,
    n: f64,
    eps_pb: f64,
    cap: usize,
) -> Result<MwBound, CorrError> {
    let corr = IntensityCorrelationModel::from_decoy(model);
    let classes = enumerate_contexts(&corr, cap)?;
    let l = model.corr_length;
    let n_bar = (n / (l + 1) as f64).ceil();
    let mut worst: Option<MwBound> = None;
    for class in &classes {
        let e = context_moments(model, &corr, class, obs, alpha)?;
        let b = per_context(e, obs.omega_min, obs.omega_max, n_bar, l, eps_pb);
        if worst.as_ref().is_none_or(|w| b.m_w_upper > w.m_w_upper) {
            worst = Some(b);
        }
    }
    worst.ok_or_else(|| CorrError::InvalidModel("no contexts".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::Ket;
    use crate::protocolkit::{bb84_states, gram_of, Bb84Model};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Herm, Vec<f64>, Herm) {
        let s = bb84_states(0.0);
        (gram_of(&[s[0].clone(), s[2].clone()]), vec![0.5, 0.5], Herm::diag(&[1.0, -1.0]))
    }

    #[test]
    fn eps_prime_values() {
        assert_eq!(epsilon_prime(0.0, 5), 0.0);
        assert_abs_diff_eq!(epsilon_prime(0.3, 0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(epsilon_prime(1e-5, 2), 2.99997000010e-5, epsilon = 1e-15);
    }

    #[test]
    fn trivial_extrema() {
        let (phi, p, w) = toy();
        let id = Herm::identity(2);
        for sense in [Sense::Min, Sense::Max] {
            let b = gram_extrema(&phi, &p, &id, 0.01, 0.7, sense, 1).unwrap();
            assert_abs_diff_eq!(b.value, 0.7, epsilon = 1e-7);
            let z = gram_extrema(&phi, &p, &w, 0.0, 1.0, sense, 1).unwrap();
            assert_abs_diff_eq!(z.value, 0.0, epsilon = 1e-15);
        }
        let hi = gram_extrema(&phi, &p, &w, 0.01, 1.0, Sense::Max, 1).unwrap();
        let lo = gram_extrema(&phi, &p, &w, 0.01, 1.0, Sense::Min, 1).unwrap();
        assert!(hi.value > lo.value);
        assert!(hi.margin >= 0.0 && lo.margin >= 0.0);
    }

    /// Random unit vector in `C^d` orthogonal to `r` (embedded in the
    /// leading coordinates).
    fn random_perp(rng: &mut ChaCha8Rng, d: usize, r: &Ket) -> Ket {
        let mut v =
            nalgebra::DVector::from_iterator(d, (0..d).map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)));
        let mut e = nalgebra::DVector::zeros(d);
        for (i, a) in r.amplitudes().iter().enumerate() {
            e[i] = *a;
        }
        let ov = e.dotc(&v);
        v -= e * ov;
        Ket::normalized(v.iter().copied().collect()).unwrap()
    }

    #[test]
    fn bound_dominates_random_completions() {
        let (phi, p, _) = toy();
        let w = Herm::from_real(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0])).unwrap();
        let eps: f64 = 0.01;
        let hi = gram_extrema(&phi, &p, &w, eps, 1.0, Sense::Max, 1).unwrap().value;
        let lo = gram_extrema(&phi, &p, &w, eps, 1.0, Sense::Min, 1).unwrap().value;
        let s = bb84_states(0.0);
        let refs = [s[0].clone(), s[2].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 5;
        let value = |perps: &[Ket; 2]| -> f64 {
            let kets: Vec<Vec<Complex64>> = (0..2)
                .map(|i| {
                    (0..d)
                        .map(|k| {
                            let r = refs[i].amplitudes().get(k).copied().unwrap_or(c(0.0, 0.0));
                            r * (1.0 - eps).sqrt() + perps[i].amplitudes()[k] * eps.sqrt()
                        })
                        .collect()
                })
                .collect();
            // rho_ij = sqrt(p_i p_j) <psi_j|psi_i>
            let mut tr = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let ov: Complex64 = (0..d).map(|k| kets[j][k].conj() * kets[i][k]).sum();
                    tr += (w.get(j, i) * ov).re * (p[i] * p[j]).sqrt();
                }
            }
            tr
        };
        let draw = |rng: &mut ChaCha8Rng| [random_perp(rng, d, &refs[0]), random_perp(rng, d, &refs[1])];
        let nudge = |rng: &mut ChaCha8Rng, k: &[Ket; 2]| -> [Ket; 2] {
            let step = draw(rng);
            std::array::from_fn(|i| {
                let v: Vec<Complex64> =
                    k[i].amplitudes().iter().zip(step[i].amplitudes().iter()).map(|(a, b)| a + b * 0.05).collect();
                let mut e = nalgebra::DVector::zeros(d);
                for (t, a) in refs[i].amplitudes().iter().enumerate() {
                    e[t] = *a;
                }
                let mut v = nalgebra::DVector::from_vec(v);
                let ov = e.dotc(&v);
                v -= e * ov;
                Ket::normalized(v.iter().copied().collect()).unwrap()
            })
        };
        let (mut best_hi, mut best_lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for sign in [1.0, -1.0] {
            let mut cur = draw(&mut rng);
            let mut cur_v = sign * value(&cur);
            for it in 0..10_000 {
                let cand = if it < 2_000 { draw(&mut rng) } else { nudge(&mut rng, &cur) };
                let v = sign * value(&cand);
                if v > cur_v {
                    cur = cand;
                    cur_v = v;
                }
            }
            if sign > 0.0 {
                best_hi = cur_v;
            } else {
                best_lo = -cur_v;
            }
        }
        assert!(best_hi <= hi + 1e-9, "{best_hi} > {hi}");
        assert!(best_lo >= lo - 1e-9, "{best_lo} < {lo}");
        // the local search reaches the optimum closely
        assert!(hi - best_hi < 1e-3 && best_lo - lo < 1e-3, "{hi} {best_hi} {lo} {best_lo}");
    }

    #[test]
    fn mw_formula_reductions() {
        let b = mw_upper((0.0, 0.0, 0.3), -1.0, 2.0, 100.0, 0, 1e-3);
        assert_eq!(b.variance_hi, 0.3);
        assert_abs_diff_eq!(b.m_w_upper, 100.0 * bernstein_delta(100.0, 0.3, 2.0, 1e-3), epsilon = 1e-12);
        let b = mw_upper((0.1, 0.2, 0.3), -1.0, 2.0, 101.0, 1, 1e-3);
        assert_eq!(b.n_bar, 51.0);
        assert_abs_diff_eq!(b.variance_hi, 0.3 - 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(b.c_hi, 1.9, epsilon = 1e-15);
        let b = mw_upper((-0.3, -0.2, 0.3), -1.0, 2.0, 101.0, 1, 1e-3);
        assert_abs_diff_eq!(b.variance_hi, 0.3 - 0.04, epsilon = 1e-15);
    }

    #[test]
    fn bb84_point_above_guess() {
        let m = Bb84Model::new(0.063, 0.5, 1e-5, 1).unwrap();
        let reg = m.register();
        let w = Herm::diag(&[0.3, -0.2, 0.5, 0.1]);
        let b = mw_upper_correlated(&reg, &w, (-0.2, 0.5), 0.1, 1e8, 1, 1e-5, 1e-10).unwrap();
        let rho_gs = crate::protocolkit::marginal_guess(&reg, 0.0);
        assert!(b.m_w_upper.is_finite());
        assert!(b.m_w_upper >= 0.1 * 1e8 * w.trace_with(&rho_gs));
        assert!(b.e_lo <= b.e_hi);
    }

    #[test]
    fn monotone_in_eps_prime() {
        let m = Bb84Model::new(0.063, 0.5, 0.0, 0).unwrap();
        let reg = m.register();
        let w = Herm::diag(&[0.3, -0.2, 0.5, 0.1]);
        let mut last = f64::NEG_INFINITY;
        for e in [0.0, 1e-6, 1e-5, 1e-4] {
            let hi = gram_extrema(&reg.gram, &reg.probs, &w, e, 1.0, Sense::Max, 1).unwrap().value;
            assert!(hi >= last - 1e-10, "{e}: {hi} < {last}");
            last = hi;
        }
    }

    fn corr(eps_ic: f64, l: usize) -> IntensityCorrelationModel {
        IntensityCorrelationModel {
            avg_intensities: vec![0.5, 0.1, 1e-5],
            eps_ic,
            zeta: 6.0,
            corr_length: l,
            setting_probs: vec![0.5, 0.3, 0.2],
        }
    }

    #[test]
    fn intensity_model() {
        let m = corr(0.0, 2);
        assert_eq!(m.actual_intensity(1, &[0, 0]).unwrap(), 0.1);
        let m = corr(0.03, 2);
        let want = 0.5 * (1.0 + 0.03 * 0.5 + 0.03 * (-6f64).exp() * 0.5);
        assert_abs_diff_eq!(m.actual_intensity(0, &[0, 0]).unwrap(), want, epsilon = 1e-15);
        // average over histories reproduces the mean
        let mut avg = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                avg += m.setting_probs[a] * m.setting_probs[b] * m.actual_intensity(1, &[a, b]).unwrap();
            }
        }
        assert_abs_diff_eq!(avg, 0.1, epsilon = 1e-15);
        assert!(m.actual_intensity(0, &[0, 0, 0]).is_err());
    }

    #[test]
    fn xi_closed_form() {
        let m = corr(0.03, 1);
        let ctx = Context { past: vec![2], future: vec![0] };
        assert_eq!(xi_coefficients(&m, 1, 1, &ctx).unwrap(), 1.0);
        assert_eq!(xi_coefficients(&corr(0.0, 1), 0, 1, &ctx).unwrap(), 1.0);
        // adjacent lag: I_{u+1} = 0.5 (1 + 0.03 z(current))
        let (a, b): (f64, f64) = (0.5 * (1.0 + 0.03 * 0.5), 0.5 * (1.0 - 0.03 * 0.5));
        let want = (-0.5 * (a.sqrt() - b.sqrt()).powi(2)).exp();
        assert_abs_diff_eq!(xi_coefficients(&m, 0, 1, &ctx).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn context_counts() {
        assert_eq!(enumerate_contexts(&corr(0.03, 0), CONTEXT_CAP).unwrap().len(), 1);
        assert_eq!(enumerate_contexts(&corr(0.0, 2), CONTEXT_CAP).unwrap().len(), 1);
        // past enters through z only; the next intensity enters through its mean
        let c1 = enumerate_contexts(&corr(0.03, 1), CONTEXT_CAP).unwrap();
        assert_eq!(c1.len(), 6);
        assert_eq!(c1.iter().map(|c| c.multiplicity).sum::<usize>(), 9);
        assert_eq!(enumerate_contexts(&corr(0.03, 2), CONTEXT_CAP).unwrap().len(), 36);
        assert!(matches!(enumerate_contexts(&corr(0.03, 2), 10), Err(CorrError::ContextOverflow(81, 10))));
    }

    #[test]
    fn soundness_monte_carlo_l0() {
        use rand_distr::Binomial;
        let (phi, p, _) = toy();
        let w = Herm::from_real(&DMatrix::from_row_slice(2, 2, &[0.2, 0.6, 0.6, -0.4])).unwrap();
        let (eps, alpha, n, eps_pb) = (0.01f64, 0.2, 1e5, 1e-3);
        let eig = w.eig().unwrap();
        let (wmin, wmax) = (eig.values[0], eig.values[1]);
        let e = gram_moments(&phi, &p, &w, eps, alpha).unwrap();
        let b = mw_upper(e, wmin.min(0.0), wmax.max(0.0), n, 0, eps_pb);
        let s = bb84_states(0.0);
        let refs = [s[0].clone(), s[2].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut violations = 0;
        for _ in 0..1000 {
            let perps = [random_perp(&mut rng, 4, &refs[0]), random_perp(&mut rng, 4, &refs[1])];
            let psi: Vec<Vec<Complex64>> = (0..2)
                .map(|i| {
                    (0..4)
                        .map(|k| {
                            refs[i].amplitudes().get(k).copied().unwrap_or(c(0.0, 0.0)) * (1.0 - eps).sqrt()
                                + perps[i].amplitudes()[k] * eps.sqrt()
                        })
                        .collect()
                })
                .collect();
            let rho = DMatrix::from_fn(2, 2, |i, j| {
                let ov: Complex64 = (0..4).map(|k| psi[j][k].conj() * psi[i][k]).sum();
                ov * (p[i] * p[j]).sqrt()
            });
            // LWM rounds report omega_k with probability alpha <e_k|rho|e_k>
            let pk: Vec<f64> = (0..2)
                .map(|k| {
                    let v = eig.vectors[k].amplitudes();
                    alpha * (v.adjoint() * &rho * v)[(0, 0)].re
                })
                .collect();
            let k0 = rng.sample(Binomial::new(n as u64, pk[0]).unwrap());
            let k1 = rng.sample(Binomial::new(n as u64 - k0, (pk[1] / (1.0 - pk[0])).min(1.0)).unwrap());
            if wmin * k0 as f64 + wmax * k1 as f64 > b.m_w_upper {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    fn flat_decoy() -> DecoyModel {
        DecoyModel {
            delta_theta: 0.063,
            p_z: 0.7,
            intensities: vec![0.2, 0.2, 0.2],
            intensity_probs: vec![0.6, 0.3, 0.1],
            n_cut: 0,
            epsilon: 1e-4,
            corr_length: 1,
            vacuum_convention: false,
            drop_cross_terms: false,
            eps_ic: 0.0,
            zeta: 6.0,
        }
    }

    #[test]
    fn decoy_reduces_to_single_photon_theorem() {
        let m = flat_decoy();
        let w0 = Herm::from_real(&DMatrix::from_fn(12, 12, |i, j| ((i * 7 + j * 7) % 5) as f64 - 2.0)).unwrap();
        let lam = vec![0.0; 12];
        let obs = DecoyObservable { w_blocks: std::slice::from_ref(&w0), lambda_inf: &lam, omega_min: -30.0, omega_max: 30.0 };
        let t2 = mw_upper_decoy(&m, &obs, 0.1, 1e9, 1e-10, CONTEXT_CAP).unwrap();
        let reg = m.register(0);
        let t1 = mw_upper_correlated(&reg, &w0, (-30.0, 30.0), 0.1, 1e9, 1, 1e-4, 1e-10).unwrap();
        assert!((t2.m_w_upper - t1.m_w_upper).abs() <= 1e-8 * t1.m_w_upper.abs(), "{} {}", t2.m_w_upper, t1.m_w_upper);
    }

    #[test]
    fn uncorrelated_contexts_collapse() {
        let mut m = flat_decoy();
        m.intensities = vec![0.5, 0.1, 1e-3];
        m.n_cut = 1;
        let c = enumerate_contexts(&IntensityCorrelationModel::from_decoy(&m), CONTEXT_CAP).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].multiplicity, 9);
    }
}
