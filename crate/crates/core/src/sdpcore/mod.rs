//! Dual SDPs of the single-round operator inequality: assembly, solution,
//! independent certification, identity-shift restoration, setting
//! renormalization and self-contained certificate records.
//!
//! A problem is a list of PSD blocks. Block `b` lives on `A (x) B` and
//! requires
//!
//! ```text
//!   sum_l eta_l Q_l^b + sum_{g covers b} sum_k lambda_{g,k} T_{g,k} (x) I_B - O_b  >= 0,
//! ```
//!
//! and every T group may carry a cap `-Γ <= sum_k lambda_{g,k} T_{g,k} <= Γ`.
//! The objective is `sum eta q^gs + sum lambda t^gs`.

pub mod record;
pub mod solver;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::concbounds::RvRange;
use crate::linops::{eig_herm, min_eig, tensor, EigenSystem, Herm, LinopsError, C64};
use crate::protocolkit::TIndex;
use solver::{LmiBlock, LmiProblem, Scalar, SolveStatus, SolverError, SolverOptions, SparseMat, StartPoint};

pub use record::{export_certificate, import_certificate, verify_record, VerifyReport};

/// Feasibility margin below which a certificate may not be used.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Extra identity shift applied on top of the measured deficit.
pub const RESTORE_PAD: f64 = 1e-10;

#[derive(Debug, Error, Clone)]
pub enum SdpError {
    #[error("dimension mismatch in {0}")]
    Dimension(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Linops(#[from] LinopsError),
    #[error("solver did not converge (gap {gap:e})")]
    NotConverged { gap: f64, best: Box<DualCertificate> },
    #[error("block {0} is not covered by any identity-spanning T group")]
    Unrestorable(usize),
    #[error("still infeasible after restoration (margin {0:e})")]
    InfeasibleAfterRestore(f64),
    #[error("renormalization: {0}")]
    Renormalize(String),
    #[error("certificate record: {0}")]
    Record(String),
}

impl SdpError {
    /// The restored iterate carried by a non-convergence error.
    pub fn into_best(self) -> Result<DualCertificate, SdpError> {
        match self {
            SdpError::NotConverged { best, .. } => Ok(*best),
            e => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBlock {
    pub label: String,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Target `O_b` on `A (x) B`; zero when the block has none.
    pub target: Herm,
}

impl DualBlock {
    pub fn dim(&self) -> usize {
        self.dim_a * self.dim_b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTerm {
    pub label: String,
    /// Operator on each block it touches.
    pub parts: Vec<(usize, Herm)>,
    pub guess: f64,
    pub range: RvRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TGroup {
    pub label: String,
    pub dim_a: usize,
    pub ops: Vec<Herm>,
    /// Setting pair of each op (`(i, i)` for diagonal projectors).
    pub pairs: Vec<TIndex>,
    pub guesses: Vec<f64>,
    /// Ops whose sum is `I_A`.
    pub identity: Vec<usize>,
    pub blocks: Vec<usize>,
    pub cap: Option<Herm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    pub blocks: Vec<DualBlock>,
    pub q_terms: Vec<QTerm>,
    pub t_groups: Vec<TGroup>,
}

impl DualProblem {
    pub fn n_vars(&self) -> usize {
        self.q_terms.len() + self.t_groups.iter().map(|g| g.ops.len()).sum::<usize>()
    }

    fn group_offsets(&self) -> Vec<usize> {
        let mut off = self.q_terms.len();
        self.t_groups
            .iter()
            .map(|g| {
                let o = off;
                off += g.ops.len();
                o
            })
            .collect()
    }

    pub fn objective_vector(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.q_terms.iter().map(|q| q.guess).collect();
        for g in &self.t_groups {
            b.extend_from_slice(&g.guesses);
        }
        b
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        self.objective_vector().iter().zip(y).map(|(b, y)| b * y).sum()
    }

    /// Shape checks on every operator.
    pub fn validate(&self) -> Result<(), SdpError> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.target.dim() != b.dim() {
                return Err(SdpError::Dimension(format!("target of block {i}")));
            }
        }
        for q in &self.q_terms {
            for (b, op) in &q.parts {
                let blk = self.blocks.get(*b).ok_or_else(|| SdpError::Dimension(q.label.clone()))?;
                if op.dim() != blk.dim() {
                    return Err(SdpError::Dimension(q.label.clone()));
                }
            }
            if !q.guess.is_finite() {
                return Err(SdpError::Dimension(format!("guess of {}", q.label)));
            }
        }
        for g in &self.t_groups {
            let n = g.ops.len();
            if g.pairs.len() != n || g.guesses.len() != n || g.guesses.iter().any(|x| !x.is_finite()) {
                return Err(SdpError::Dimension(g.label.clone()));
            }
            if g.ops.iter().any(|t| t.dim() != g.dim_a) || g.identity.iter().any(|&k| k >= n) {
                return Err(SdpError::Dimension(g.label.clone()));
            }
            for &b in &g.blocks {
                if self.blocks.get(b).map(|x| x.dim_a) != Some(g.dim_a) {
                    return Err(SdpError::Dimension(g.label.clone()));
                }
            }
            if let Some(c) = &g.cap {
                if c.dim() != g.dim_a {
                    return Err(SdpError::Dimension(g.label.clone()));
                }
            }
        }
        Ok(())
    }

    /// `F_b(y)` evaluated on the full complex operators.
    pub fn block_slack(&self, b: usize, y: &[f64]) -> Herm {
        let blk = &self.blocks[b];
        let mut s = blk.target.scale(-1.0);
        for (l, q) in self.q_terms.iter().enumerate() {
            for (pb, op) in &q.parts {
                if *pb == b && y[l] != 0.0 {
                    s.add_scaled(y[l], op);
                }
            }
        }
        let idb = Herm::identity(blk.dim_b);
        for (g, off) in self.t_groups.iter().zip(self.group_offsets()) {
            if g.blocks.contains(&b) {
                let w = group_w(g, &y[off..off + g.ops.len()]);
                s.add_scaled(1.0, &tensor(&w, &idb).expect("block dimension"));
            }
        }
        s
    }

    pub fn split(&self, y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let eta = y[..self.q_terms.len()].to_vec();
        let lambda = self
            .t_groups
            .iter()
            .zip(self.group_offsets())
            .map(|(g, o)| y[o..o + g.ops.len()].to_vec())
            .collect();
        (eta, lambda)
    }
}

fn group_w(g: &TGroup, lam: &[f64]) -> Herm {
    let mut w = Herm::zeros(g.dim_a);
    for (t, &l) in g.ops.iter().zip(lam) {
        if l != 0.0 {
            w.add_scaled(l, t);
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub eta: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub objective: f64,
    /// Minimum eigenvalue of each block slack.
    pub block_margins: Vec<f64>,
    pub feasibility_margin: f64,
    /// Minimum eigenvalue over all cap constraints, if any.
    pub cap_margin: Option<f64>,
    /// Identity shift added per group by restoration.
    pub restoration: Vec<f64>,
    /// Observable `W_g = sum_k lambda_{g,k} T_{g,k}` per T group.
    pub w_blocks: Vec<Herm>,
    pub omega_min: f64,
    pub omega_max: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solver_gap: f64,
}

impl DualCertificate {
    pub fn y(&self) -> Vec<f64> {
        let mut y = self.eta.clone();
        for l in &self.lambda {
            y.extend_from_slice(l);
        }
        y
    }

    pub fn is_feasible(&self) -> bool {
        self.feasibility_margin >= -FEASIBILITY_TOL
    }
}

/// `W`, its spectra, and the range of `chi_W` including the non-firing 0.
#[derive(Debug, Clone)]
pub struct ObservableW {
    pub w: Vec<Herm>,
    pub eig: Vec<EigenSystem>,
    pub omega_min: f64,
    pub omega_max: f64,
}

pub fn observable_w(c: &DualCertificate) -> Result<ObservableW, SdpError> {
    let eig = c.w_blocks.iter().map(eig_herm).collect::<Result<Vec<_>, _>>()?;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for e in &eig {
        for &v in &e.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(ObservableW { w: c.w_blocks.clone(), eig, omega_min: lo, omega_max: hi })
}

/// Certifies `y` against `p` by independent eigendecomposition.
pub fn certify(p: &DualProblem, y: &[f64]) -> Result<DualCertificate, SdpError> {
    let block_margins = (0..p.blocks.len())
        .map(|b| min_eig(&p.block_slack(b, y)))
        .collect::<Result<Vec<_>, _>>()?;
    let feasibility_margin = block_margins.iter().copied().fold(f64::INFINITY, f64::min);
    let (eta, lambda) = p.split(y);
    let w_blocks: Vec<Herm> = p.t_groups.iter().zip(&lambda).map(|(g, l)| group_w(g, l)).collect();
    let mut cap_margin: Option<f64> = None;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (g, w) in p.t_groups.iter().zip(&w_blocks) {
        let e = eig_herm(w)?;
        lo = lo.min(e.values[0]);
        hi = hi.max(*e.values.last().expect("nonempty"));
        if let Some(cap) = &g.cap {
            let m = min_eig(&cap.sub(w))?.min(min_eig(&cap.add(w))?);
            cap_margin = Some(cap_margin.map_or(m, |c| c.min(m)));
        }
    }
    Ok(DualCertificate {
        eta,
        lambda,
        objective: p.objective(y),
        block_margins,
        feasibility_margin: if feasibility_margin.is_finite() { feasibility_margin } else { 0.0 },
        cap_margin,
        restoration: vec![0.0; p.t_groups.len()],
        w_blocks,
        omega_min: lo,
        omega_max: hi,
        status: SolveStatus::Converged,
        iterations: 0,
        solver_gap: 0.0,
    })
}

/// Adds `deficit + 1e-10` to the identity-spanning multipliers of each
/// group covering an infeasible block. Caps are not re-imposed: the
/// downstream range of `chi_W` is read from the restored `W` itself.
pub fn restore_feasibility(c: &DualCertificate, p: &DualProblem) -> Result<DualCertificate, SdpError> {
    if c.feasibility_margin >= 0.0 {
        return Ok(c.clone());
    }
    let mut shifts = vec![0.0; p.t_groups.len()];
    for (b, &m) in c.block_margins.iter().enumerate() {
        if m >= 0.0 {
            continue;
        }
        let mut covered = false;
        for (g, grp) in p.t_groups.iter().enumerate() {
            if grp.blocks.contains(&b) && !grp.identity.is_empty() {
                shifts[g] = f64::max(shifts[g], -m + RESTORE_PAD);
                covered = true;
            }
        }
        if !covered {
            return Err(SdpError::Unrestorable(b));
        }
    }
    let mut y = c.y();
    let offs = p.group_offsets();
    for (g, grp) in p.t_groups.iter().enumerate() {
        for &k in &grp.identity {
            y[offs[g] + k] += shifts[g];
        }
    }
    let mut out = certify(p, &y)?;
    if out.feasibility_margin < 0.0 {
        return Err(SdpError::InfeasibleAfterRestore(out.feasibility_margin));
    }
    out.restoration = c.restoration.iter().zip(&shifts).map(|(a, b)| a + b).collect();
    out.status = c.status;
    out.iterations = c.iterations;
    out.solver_gap = c.solver_gap;
    Ok(out)
}

fn sparse<T: Scalar>(h: &Herm, real: bool) -> SparseMat<T> {
    let m = h.matrix().map(|z| T::from_complex(if real { C64::new(z.re, 0.0) } else { z }));
    SparseMat::from_dense(&m)
}

fn dense<T: Scalar>(h: &Herm, real: bool) -> DMatrix<T> {
    h.matrix().map(|z| T::from_complex(if real { C64::new(z.re, 0.0) } else { z }))
}

/// Which variables enter the real reduction: purely imaginary T operators
/// with zero guess drop out (their optimal multipliers may be taken zero by
/// conjugation symmetry). `None` if the data are not real.
fn real_reduction(p: &DualProblem) -> Option<Vec<bool>> {
    if !p.blocks.iter().all(|b| b.target.is_real()) {
        return None;
    }
    let mut active = Vec::with_capacity(p.n_vars());
    for q in &p.q_terms {
        if !q.parts.iter().all(|(_, op)| op.is_real()) {
            return None;
        }
        active.push(true);
    }
    for g in &p.t_groups {
        if let Some(c) = &g.cap {
            if !c.is_real() {
                return None;
            }
        }
        for (t, &guess) in g.ops.iter().zip(&g.guesses) {
            if t.is_real() {
                active.push(true);
            } else if t.is_imaginary() && guess.abs() < 1e-14 {
                active.push(false);
            } else {
                return None;
            }
        }
    }
    Some(active)
}

fn assemble<T: Scalar>(p: &DualProblem, active: &[bool], real: bool) -> (LmiProblem<T>, Vec<usize>) {
    // variables that appear in no operator are fixed to zero as well
    let mut used = active.to_vec();
    let offs = p.group_offsets();
    for (l, q) in p.q_terms.iter().enumerate() {
        if q.parts.iter().all(|(_, op)| op.norm() == 0.0) {
            used[l] = false;
        }
    }
    for (g, grp) in p.t_groups.iter().enumerate() {
        for (k, t) in grp.ops.iter().enumerate() {
            if t.norm() == 0.0 || (grp.blocks.is_empty() && grp.cap.is_none()) {
                used[offs[g] + k] = false;
            }
        }
    }
    let map: Vec<usize> = (0..used.len()).filter(|&v| used[v]).collect();
    let mut pos = vec![usize::MAX; used.len()];
    for (i, &v) in map.iter().enumerate() {
        pos[v] = i;
    }
    let full_b = p.objective_vector();
    let objective: Vec<f64> = map.iter().map(|&v| full_b[v]).collect();
    let mut blocks = Vec::new();
    for (b, blk) in p.blocks.iter().enumerate() {
        let mut terms = Vec::new();
        for (l, q) in p.q_terms.iter().enumerate() {
            if pos[l] == usize::MAX {
                continue;
            }
            for (pb, op) in &q.parts {
                if *pb == b {
                    terms.push((pos[l], sparse::<T>(op, real)));
                }
            }
        }
        let idb = Herm::identity(blk.dim_b);
        for (g, grp) in p.t_groups.iter().enumerate() {
            if !grp.blocks.contains(&b) {
                continue;
            }
            for (k, t) in grp.ops.iter().enumerate() {
                let v = pos[offs[g] + k];
                if v != usize::MAX {
                    terms.push((v, sparse::<T>(&tensor(t, &idb).expect("block dimension"), real)));
                }
            }
        }
        blocks.push(LmiBlock { dim: blk.dim(), constant: dense::<T>(&blk.target, real), terms });
    }
    for (g, grp) in p.t_groups.iter().enumerate() {
        let Some(cap) = &grp.cap else { continue };
        for sign in [1.0, -1.0] {
            let mut terms = Vec::new();
            for (k, t) in grp.ops.iter().enumerate() {
                let v = pos[offs[g] + k];
                if v != usize::MAX {
                    terms.push((v, sparse::<T>(&t.scale(sign), real)));
                }
            }
            blocks.push(LmiBlock { dim: grp.dim_a, constant: dense::<T>(&cap.scale(-1.0), real), terms });
        }
    }
    (LmiProblem { objective, blocks }, map)
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    pub solver: SolverOptions,
    /// Gap above which a non-converged solve is reported as an error.
    pub accept_gap: f64,
    pub force_complex: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { solver: SolverOptions::default(), accept_gap: 1e-6, force_complex: false }
    }
}

/// Raw solve returning the full multiplier vector.
pub fn solve_raw(p: &DualProblem, opts: &SdpOptions) -> Result<(Vec<f64>, SolveStatus, usize, f64), SdpError> {
    solve_raw_mapped(p, opts, None)
}

/// Start of a renormalized solve: the default start of `plain` carried
/// through the setting congruence.
struct StartMap<'a> {
    plain: &'a DualProblem,
    probs: &'a [f64],
    kappa: f64,
}

/// Diagonal of the setting rescaling on each LMI block, in assembly order.
fn block_diagonals(p: &DualProblem, probs: &[f64]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> =
        p.blocks.iter().map(|b| (0..b.dim()).map(|i| probs[i / b.dim_b]).collect()).collect();
    for g in &p.t_groups {
        if g.cap.is_some() {
            out.push(probs[..g.dim_a].to_vec());
            out.push(probs[..g.dim_a].to_vec());
        }
    }
    out
}

fn mapped_start<T: Scalar>(
    lmi_plain: &LmiProblem<T>,
    diags: &[Vec<f64>],
    kappa: f64,
    map: &[usize],
    plain_map: &[usize],
) -> Option<StartPoint<T>> {
    if map != plain_map || diags.len() != lmi_plain.blocks.len() {
        return None;
    }
    let st = solver::default_start(lmi_plain);
    // X_r = D^{-1/2} X D^{-1/2}, S_r = D^{1/2} S D^{1/2} / kappa
    let x = st
        .x
        .iter()
        .zip(diags)
        .map(|(m, d)| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].scale(1.0 / (d[i] * d[j]).sqrt())))
        .collect();
    let s = st
        .s
        .iter()
        .zip(diags)
        .map(|(m, d)| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].scale((d[i] * d[j]).sqrt() / kappa)))
        .collect();
    Some(StartPoint { x, s, y: st.y })
}

fn solve_raw_mapped(
    p: &DualProblem,
    opts: &SdpOptions,
    start: Option<StartMap>,
) -> Result<(Vec<f64>, SolveStatus, usize, f64), SdpError> {
    p.validate()?;
    let n = p.n_vars();
    let reduction = if opts.force_complex { None } else { real_reduction(p) };
    let plain_reduction = start.as_ref().map(|st| if opts.force_complex { None } else { real_reduction(st.plain) });
    let (map, sol_y, status, iters, gap) = match reduction {
        Some(active) => {
            let (lmi, map) = assemble::<f64>(p, &active, true);
            let st = start.as_ref().and_then(|st| match plain_reduction.clone().flatten() {
                Some(pa) if pa == active => {
                    let (lp, pm) = assemble::<f64>(st.plain, &pa, true);
                    mapped_start(&lp, &block_diagonals(st.plain, st.probs), st.kappa, &map, &pm)
                }
                _ => None,
            });
            let s = solver::solve_from(&lmi, &opts.solver, st)?;
            (map, s.y, s.status, s.iterations, s.rel_gap)
        }
        None => {
            let all = vec![true; n];
            let (lmi, map) = assemble::<C64>(p, &all, false);
            let st = start.as_ref().and_then(|st| {
                let (lp, pm) = assemble::<C64>(st.plain, &all, false);
                mapped_start(&lp, &block_diagonals(st.plain, st.probs), st.kappa, &map, &pm)
            });
            let s = solver::solve_from(&lmi, &opts.solver, st)?;
            (map, s.y, s.status, s.iterations, s.rel_gap)
        }
    };
    let mut y = vec![0.0; n];
    for (i, &v) in map.iter().enumerate() {
        y[v] = sol_y[i];
    }
    Ok((y, status, iters, gap))
}

fn finish(p: &DualProblem, y: &[f64], status: SolveStatus, iters: usize, gap: f64, opts: &SdpOptions) -> Result<DualCertificate, SdpError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SdpError::InfeasibleAfterRestore(f64::NAN));
    }
    let mut c = certify(p, y)?;
    c.status = status;
    c.iterations = iters;
    c.solver_gap = gap;
    let c = restore_feasibility(&c, p)?;
    if status != SolveStatus::Converged && !(gap <= opts.accept_gap) {
        return Err(SdpError::NotConverged { gap, best: Box::new(c) });
    }
    Ok(c)
}

/// Solves, certifies and (if needed) restores.
pub fn solve_dual(p: &DualProblem, opts: &SdpOptions) -> Result<DualCertificate, SdpError> {
    let (y, status, iters, gap) = solve_raw(p, opts)?;
    finish(p, &y, status, iters, gap, opts)
}

/// A problem expressed in rescaled variables `y = kappa * y_r / scale`.
#[derive(Debug, Clone)]
pub struct Renormalized {
    pub problem: DualProblem,
    pub scales: Vec<f64>,
    pub kappa: f64,
}

impl Renormalized {
    pub fn map_back(&self, y_r: &[f64]) -> Vec<f64> {
        y_r.iter().zip(&self.scales).map(|(y, s)| self.kappa * y / s).collect()
    }

    pub fn map_forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.scales).map(|(y, s)| y * s / self.kappa).collect()
    }
}

const SAME_PROB_TOL: f64 = 1e-12;

/// Settings touched by any `A`-block of `op`. Coherences are allowed: the
/// rescaling acts on them as a scalar when all touched settings share one
/// probability, which `common_prob` enforces.
fn setting_support(op: &Herm, dim_a: usize, dim_b: usize) -> Vec<usize> {
    let m = op.matrix();
    let mut out = Vec::new();
    for i in 0..dim_a {
        let nz = (0..dim_a).any(|j| {
            (0..dim_b).any(|r| (0..dim_b).any(|s| m[(i * dim_b + r, j * dim_b + s)].norm() > 0.0))
        });
        if nz {
            out.push(i);
        }
    }
    out
}

fn common_prob(support: &[usize], probs: &[f64], what: &str) -> Result<Option<f64>, SdpError> {
    let Some(&first) = support.first() else { return Ok(None) };
    let p0 = probs[first];
    if support.iter().any(|&i| (probs[i] - p0).abs() > SAME_PROB_TOL * p0.max(1e-300)) {
        return Err(SdpError::Renormalize(format!("{what} spans settings of unequal probability")));
    }
    Ok(Some(p0))
}

/// Rescales the setting register by `diag(p)^{-1/2}`. Operators are
/// unchanged; guesses become `guess / scale`, caps `D^{1/2} Γ D^{1/2} / kappa`,
/// and `kappa` is the common probability of the target's settings.
pub fn renormalize(p: &DualProblem, probs: &[f64]) -> Result<Renormalized, SdpError> {
    if probs.iter().any(|&x| !(x > 0.0)) {
        return Err(SdpError::Renormalize("zero setting probability".into()));
    }
    let mut kappa: Option<f64> = None;
    for b in &p.blocks {
        if b.dim_a != probs.len() {
            return Err(SdpError::Renormalize("register size differs from probability vector".into()));
        }
        let sup = setting_support(&b.target, b.dim_a, b.dim_b);
        if let Some(k) = common_prob(&sup, probs, "target")? {
            if kappa.is_some_and(|k0| (k0 - k).abs() > SAME_PROB_TOL * k) {
                return Err(SdpError::Renormalize("targets of different blocks disagree".into()));
            }
            kappa = Some(k);
        }
    }
    let kappa = kappa.unwrap_or(1.0);
    let mut scales = Vec::with_capacity(p.n_vars());
    let mut out = p.clone();
    for q in &mut out.q_terms {
        let mut sup = Vec::new();
        for (b, op) in &q.parts {
            let blk = &p.blocks[*b];
            sup.extend(setting_support(op, blk.dim_a, blk.dim_b));
        }
        let s = common_prob(&sup, probs, &q.label)?.unwrap_or(1.0);
        q.guess /= s;
        scales.push(s);
    }
    let half: Vec<f64> = probs.iter().map(|x| x.sqrt()).collect();
    let dh = Herm::diag(&half);
    for g in &mut out.t_groups {
        for (k, ix) in g.pairs.iter().enumerate() {
            let s = (probs[ix.i] * probs[ix.j]).sqrt();
            g.guesses[k] /= s;
            scales.push(s);
        }
        if let Some(cap) = &g.cap {
            g.cap = Some(cap.congruence(dh.matrix()).scale(1.0 / kappa));
        }
    }
    Ok(Renormalized { problem: out, scales, kappa })
}

/// Solves the renormalized problem, then certifies and restores the
/// mapped-back multipliers against the original problem.
pub fn solve_dual_renormalized(p: &DualProblem, probs: &[f64], opts: &SdpOptions) -> Result<DualCertificate, SdpError> {
    let r = renormalize(p, probs)?;
    let start = StartMap { plain: p, probs, kappa: r.kappa };
    let (y_r, status, iters, gap) = solve_raw_mapped(&r.problem, opts, Some(start))?;
    let y = r.map_back(&y_r);
    finish(p, &y, status, iters, gap, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocolkit::t_family;

    fn toy(target: Herm, guesses: Vec<f64>, cap: Option<f64>) -> DualProblem {
        let fam = t_family(2);
        let identity = fam.iter().enumerate().filter(|(_, (ix, _))| ix.i == ix.j).map(|(k, _)| k).collect();
        DualProblem {
            blocks: vec![DualBlock { label: "main".into(), dim_a: 2, dim_b: 1, target }],
            q_terms: vec![],
            t_groups: vec![TGroup {
                label: "t".into(),
                dim_a: 2,
                pairs: fam.iter().map(|f| f.0).collect(),
                ops: fam.into_iter().map(|f| f.1).collect(),
                guesses,
                identity,
                blocks: vec![0],
                cap: cap.map(|g| Herm::identity(2).scale(g)),
            }],
        }
    }

    #[test]
    fn state_discrimination_toy() {
        // max Tr(O rho) over rho with known moments equals Tr(O rho)
        let rho = Herm::from_real(&DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.3])).unwrap();
        let o = Herm::diag(&[1.0, -1.0]);
        let fam = t_family(2);
        let guesses = fam.iter().map(|(_, t)| t.trace_with(&rho)).collect();
        let p = toy(o.clone(), guesses, None);
        let c = solve_dual(&p, &SdpOptions::default()).unwrap();
        assert!(c.feasibility_margin >= 0.0);
        assert!((c.objective - o.trace_with(&rho)).abs() < 1e-7, "{}", c.objective);
        let w = observable_w(&c).unwrap();
        assert!(w.omega_min <= 0.0 && w.omega_max >= 0.0);
    }

    #[test]
    fn restoration_shift_is_exact() {
        let p = toy(Herm::diag(&[1.0, 0.0]), vec![0.5, 0.0, 0.0, 0.5], None);
        let y = vec![1.0 - 1e-6, 0.0, 0.0, 0.0];
        let c = certify(&p, &y).unwrap();
        assert!((c.feasibility_margin + 1e-6).abs() < 1e-12);
        let r = restore_feasibility(&c, &p).unwrap();
        assert!(r.feasibility_margin >= 0.0);
        let want = c.objective + (1e-6 + RESTORE_PAD) * 1.0;
        assert!((r.objective - want).abs() < 1e-15);
        let same = restore_feasibility(&r, &p).unwrap();
        assert_eq!(same, r);
    }

    #[test]
    fn cap_limits_spectrum() {
        let rho = Herm::diag(&[0.5, 0.5]);
        let fam = t_family(2);
        let guesses = fam.iter().map(|(_, t)| t.trace_with(&rho)).collect();
        let p = toy(Herm::diag(&[1.5, -3.0]), guesses, Some(2.0));
        let c = solve_dual(&p, &SdpOptions::default()).unwrap();
        assert!(c.omega_max <= 2.0 + 1e-9 && c.omega_min >= -2.0 - 1e-9);
        // W = diag(1.5, -2) against rho = I/2
        assert!((c.objective + 0.25).abs() < 1e-7, "{}", c.objective);
    }

    #[test]
    fn record_round_trip() {
        let rho = Herm::diag(&[0.6, 0.4]);
        let fam = t_family(2);
        let guesses = fam.iter().map(|(_, t)| t.trace_with(&rho)).collect();
        let p = toy(Herm::diag(&[1.0, -1.0]), guesses, Some(5.0));
        let c = solve_dual(&p, &SdpOptions::default()).unwrap();
        let text = export_certificate(&p, &c);
        let rep = verify_record(&text).unwrap();
        assert!(rep.passed());
        let (p2, c2) = import_certificate(&text).unwrap();
        assert_eq!(p2, p);
        assert_eq!(c2.y(), c.y());
        let tampered = text.replace("cert.lambda.0=", "cert.lambda.0=-1e0,");
        let lam: Vec<f64> = c.lambda[0].iter().map(|x| x - 0.5).collect();
        let tampered2 = text
            .lines()
            .map(|l| if l.starts_with("cert.lambda.0=") { format!("cert.lambda.0={}", record::list_for_tests(&lam)) } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        assert!(import_certificate(&tampered).is_err());
        assert!(!verify_record(&tampered2).unwrap().passed());
        let guess_tamper = text.replacen("t.0.op.0.guess=", "t.0.op.0.guess=1", 1);
        assert!(!verify_record(&guess_tamper).unwrap().hash_ok);
    }
}
