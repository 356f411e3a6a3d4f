//! End-to-end finite-key assembly: the Kato bound on the phase errors of
//! the estimation protocol, the detector-mismatch lift, the sampling lift to
//! the virtual protocol, decoy single-photon bounds and the key length.

use thiserror::Error;

use crate::channelsim::{
    bb84_observables, decoy_observables, mdi_observables, ChannelParams, ExpectedObservables,
};
use crate::concbounds::{
    gamma_bin, inverted_lower, inverted_upper, k_bound, kato_tilde_ab, serfling_delta, ConcError, KatoParams, RvRange,
    Side,
};
use crate::corrbound::{epsilon_prime, mw_upper_correlated, mw_upper_decoy, CorrError, DecoyObservable, MwBound, CONTEXT_CAP};
use crate::linops::Herm;
use crate::protocolkit::{
    bb84_coefficient_sets, bb84_phase_error, decoy_detection_operator, decoy_gain_sets, decoy_phase_error,
    decoy_phase_sets, marginal_guess, mdi_coefficient_sets, mdi_phase_error, t_family, t_guesses,
    t_operator, Bb84Model, CoefficientSet, DecoyModel, MdiModel, Outcome, ProtocolError, ProtocolKind, TIndex,
    MDI_OMEGAS,
};
use crate::sdpcore::{
    solve_dual, solve_dual_renormalized, DualBlock, DualCertificate, DualProblem, QTerm, SdpError, SdpOptions, TGroup,
};

#[derive(Debug, Error)]
pub enum FiniteKeyError {
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Conc(#[from] ConcError),
    #[error(transparent)]
    Corr(#[from] CorrError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

// -------------------------------------------------------------- budget

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonBudget {
    pub eps_sec: f64,
    pub eps_pa: f64,
    pub eps_ev: f64,
    pub eps_pro: f64,
    pub eps_pk: f64,
    pub eps_pb: f64,
    pub eps_ps: f64,
    pub eps_dep1: f64,
    pub eps_dep2: f64,
}

impl EpsilonBudget {
    /// `ε_PA = ε_sec/2`, `ε_pro = (ε_sec/4)^2`; the remaining split depends
    /// on the protocol (`/6` BB84, `/5` MDI, `/10` decoy).
    pub fn preset(kind: ProtocolKind, eps_sec: f64, eps_ev: f64) -> Self {
        let eps_pro = (eps_sec / 4.0).powi(2);
        let (share, dep_sq) = match kind {
            ProtocolKind::Bb84 => (eps_pro / 6.0, eps_pro / 12.0),
            ProtocolKind::Mdi => (eps_pro / 5.0, 0.0),
            ProtocolKind::Decoy => (eps_pro / 10.0, eps_pro / 10.0),
        };
        Self {
            eps_sec,
            eps_pa: eps_sec / 2.0,
            eps_ev,
            eps_pro,
            eps_pk: share,
            eps_pb: share,
            eps_ps: share,
            eps_dep1: dep_sq.sqrt(),
            eps_dep2: dep_sq.sqrt(),
        }
    }

    pub fn default_for(kind: ProtocolKind) -> Self {
        Self::preset(kind, 1e-10, 1e-10)
    }

    /// `2 sqrt(ε_pro) + ε_PA`.
    pub fn secrecy(&self) -> f64 {
        2.0 * self.eps_pro.sqrt() + self.eps_pa
    }

    /// Failure probability actually consumed by the bounds of `kind`.
    pub fn consumed(&self, kind: ProtocolKind, mismatch: bool) -> f64 {
        let dep = if mismatch { self.eps_dep1.powi(2) + self.eps_dep2.powi(2) } else { 0.0 };
        match kind {
            ProtocolKind::Bb84 => 3.0 * self.eps_pk + self.eps_pb + self.eps_ps + dep,
            ProtocolKind::Mdi => 3.0 * self.eps_pk + self.eps_pb + self.eps_ps,
            // two estimation protocols, no sampling lift
            ProtocolKind::Decoy => 2.0 * (3.0 * self.eps_pk + self.eps_pb) + dep,
        }
    }

    pub fn validate(&self, kind: ProtocolKind, mismatch: bool) -> Result<(), FiniteKeyError> {
        let all = [
            self.eps_sec,
            self.eps_pa,
            self.eps_ev,
            self.eps_pro,
            self.eps_pk,
            self.eps_pb,
            self.eps_ps,
            self.eps_dep1,
            self.eps_dep2,
        ];
        if all.iter().any(|&e| !(e >= 0.0 && e < 1.0)) {
            return Err(FiniteKeyError::InvalidInput("budget entries must lie in [0, 1)".into()));
        }
        let used = self.consumed(kind, mismatch);
        if used > self.eps_pro * (1.0 + 1e-12) {
            return Err(FiniteKeyError::InvalidInput(format!("budget overspent: {used:e} > eps_pro {:e}", self.eps_pro)));
        }
        Ok(())
    }
}

// ------------------------------------------------------------ detectors

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorTolerances {
    pub eta_det: f64,
    pub d_det: f64,
    pub delta_eta: f64,
    pub delta_dc: f64,
}

impl DetectorTolerances {
    pub fn validate(&self) -> Result<(), FiniteKeyError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let tol = |x: f64| (0.0..1.0).contains(&x);
        if !(unit(self.eta_det) && unit(self.d_det) && tol(self.delta_eta) && tol(self.delta_dc)) {
            return Err(FiniteKeyError::InvalidInput("detector tolerances out of range".into()));
        }
        Ok(())
    }

    pub fn deltas(&self) -> (f64, f64) {
        detector_deltas(self)
    }
}

/// Canonical-model mismatch parameters `(δ1, δ2)`.
pub fn detector_deltas(t: &DetectorTolerances) -> (f64, f64) {
    let d_max = (t.d_det * (1.0 + t.delta_dc)).min(1.0);
    let d_min = t.d_det * (1.0 - t.delta_dc);
    let r_eta = (1.0 - t.delta_eta) / (1.0 + t.delta_eta);
    let click = |d: f64| 1.0 - (1.0 - d).powi(2);
    // 0/0 when there are no dark counts: the ratio term then vanishes
    let ratio_gap = if click(d_max) > 0.0 { 1.0 - click(d_min) / click(d_max) } else { 0.0 };
    let dc_term = if ratio_gap > 0.0 { ratio_gap * d_max * (2.0 - d_min) / click(d_min) } else { 0.0 };
    let miss = (1.0 - d_min).powi(2) * (1.0 - r_eta);
    let delta1 = dc_term.max(4.0 * (1.0 - (1.0 - miss).sqrt()).abs());
    let delta2 = ratio_gap.max(miss);
    (delta1.clamp(0.0, 1.0), delta2.clamp(0.0, 1.0))
}

// --------------------------------------------------------- assemblies

pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// `2 log2(1/(2 ε_PA)) + log2(2/ε_EV)`.
pub fn pa_ev_cost(b: &EpsilonBudget) -> f64 {
    2.0 * (1.0 / (2.0 * b.eps_pa)).log2() + (2.0 / b.eps_ev).log2()
}

/// Upper bound on the sum of conditional expectations of the target RV:
/// `sum_l η_l K^{sign η_l}(M_{Q,l}) + (1-α)/α K^{+1}(M_W^U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSum {
    pub value: f64,
    pub q_part: f64,
    pub w_part: f64,
    /// Clamped `M_W^U` fed to `K^{+1}`.
    pub m_w_used: f64,
    pub eps_per_term: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn conditional_upper(
    cert: &DualCertificate,
    problem: &DualProblem,
    m_w_upper: f64,
    observed_mq: &[f64],
    n: f64,
    alpha: f64,
    eps_pk: f64,
) -> Result<ConditionalSum, FiniteKeyError> {
    if observed_mq.len() != problem.q_terms.len() || cert.eta.len() != problem.q_terms.len() {
        return Err(FiniteKeyError::InvalidInput("one observed sum per Q term required".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FiniteKeyError::InvalidInput(format!("alpha = {alpha}")));
    }
    let active = cert.eta.iter().filter(|e| **e != 0.0).count();
    let eps_l = if active > 0 { eps_pk / active as f64 } else { eps_pk };
    let mut q_part = 0.0;
    for ((eta, q), &m) in cert.eta.iter().zip(&problem.q_terms).zip(observed_mq) {
        if *eta == 0.0 {
            continue;
        }
        let sign = if *eta > 0.0 { 1 } else { -1 };
        let guess = n * (1.0 - alpha) * q.guess;
        q_part += eta * k_bound(m, q.range, n, guess, eps_l, sign, false)?;
    }
    let m_w_used = m_w_upper.clamp(n * cert.omega_min, n * cert.omega_max);
    let w_part = if alpha < 1.0 {
        let range = RvRange::new(cert.omega_min, cert.omega_max)?;
        let tw: f64 = t_objective(cert, problem);
        let guess = n * alpha * tw;
        (1.0 - alpha) / alpha * k_bound(m_w_used, range, n, guess, eps_pk, 1, true)?
    } else {
        0.0
    };
    Ok(ConditionalSum { value: q_part + w_part, q_part, w_part, m_w_used, eps_per_term: eps_l })
}

/// `Tr(W rho_gs) = sum lambda t^gs`.
fn t_objective(cert: &DualCertificate, problem: &DualProblem) -> f64 {
    problem
        .t_groups
        .iter()
        .zip(&cert.lambda)
        .map(|(g, l)| g.guesses.iter().zip(l).map(|(t, y)| t * y).sum::<f64>())
        .sum()
}

fn checked_tilde(n: f64, guess: f64, eps: f64, side: Side) -> Result<KatoParams, FiniteKeyError> {
    let p = kato_tilde_ab(n, guess, eps, side);
    let limit = 0.5 * n.sqrt() * (1.0 - 1e-9);
    let bad = match side {
        Side::Upper => p.a >= limit,
        Side::Lower => p.a <= -limit,
    };
    if bad || !p.b.is_finite() {
        return Err(FiniteKeyError::InvalidRegime(format!("|a~| = {:e} reaches sqrt(N)/2", p.a.abs())));
    }
    Ok(p)
}

/// `M_ph^U` from an upper bound on the conditional sum; `guess` predicts
/// that sum (in counts).
pub fn mph_upper_from(cond: f64, n: f64, guess: f64, eps_pk: f64) -> Result<f64, FiniteKeyError> {
    let p = checked_tilde(n, guess, eps_pk, Side::Upper)?;
    Ok(inverted_upper(cond, &p)?)
}

/// Full upper bound on the phase errors of the estimation protocol.
#[allow(clippy::too_many_arguments)]
pub fn mph_upper(
    cert: &DualCertificate,
    problem: &DualProblem,
    m_w_upper: f64,
    observed_mq: &[f64],
    n: f64,
    alpha: f64,
    eps_pk: f64,
    guess: f64,
) -> Result<f64, FiniteKeyError> {
    let c = conditional_upper(cert, problem, m_w_upper, observed_mq, n, alpha, eps_pk)?;
    mph_upper_from(c.value, n, guess, eps_pk)
}

/// Lower bound for a `-D` target: the certificate bounds `-E[chi]`.
pub fn mkey1_lower_from(cond_upper_neg: f64, n: f64, guess: f64, eps_pk: f64) -> Result<f64, FiniteKeyError> {
    let p = checked_tilde(n, guess, eps_pk, Side::Lower)?;
    Ok(inverted_lower(-cond_upper_neg, &p)?)
}

/// Mismatch-lifted ratio `(r + δ1 + γ1)/(1 - δ2 - γ2)` for a reference
/// count `m`; `None` signals a nonpositive denominator.
pub fn mismatch_ratio(ratio: f64, m: f64, deltas: (f64, f64), eps_dep1: f64, eps_dep2: f64) -> Option<f64> {
    let mm = m.floor().max(1.0) as u64;
    let g1 = gamma_bin(mm, deltas.0, eps_dep1);
    let g2 = gamma_bin(mm, deltas.1, eps_dep2);
    let den = 1.0 - deltas.1 - g2;
    if den <= 0.0 {
        return None;
    }
    Some((ratio + deltas.0 + g1) / den)
}

/// `M_key [(M_ph^U/M_key + δ1 + γ_bin(M_key, δ1))/(1 - δ2 - γ_bin(M_key, δ2))]`.
pub fn mph_mismatch(m_ph_upper: f64, m_key: f64, deltas: (f64, f64), eps_dep1: f64, eps_dep2: f64) -> Option<f64> {
    if m_key < 1.0 {
        return None;
    }
    mismatch_ratio(m_ph_upper / m_key, m_key, deltas, eps_dep1, eps_dep2).map(|r| r * m_key)
}

/// `M_ph (1 + S_key/M_key) + S_key Δ_S(S_key, M_key, ε_pS)`.
pub fn nph_upper(m_ph: f64, m_key: f64, s_key: f64, eps_ps: f64) -> f64 {
    if s_key <= 0.0 {
        return m_ph;
    }
    m_ph * (1.0 + s_key / m_key) + s_key * serfling_delta(s_key, m_key, eps_ps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyRateResult {
    pub protocol: ProtocolKind,
    pub l_key: f64,
    /// Unclamped key length; `-inf` when no key could be assembled.
    pub l_raw: f64,
    pub rate: f64,
    pub n: f64,
    pub e_ph_upper: f64,
    pub m_w_upper: f64,
    /// Second estimation protocol (decoy detection bound).
    pub m_w_dot_upper: Option<f64>,
    pub m_ph_upper: f64,
    pub m_ph_delta: Option<f64>,
    pub n_ph_upper: Option<f64>,
    pub m_key1_lower: Option<f64>,
    pub lambda_ec: f64,
    pub n_key: f64,
    pub m_key: f64,
    pub s_key: f64,
    pub qber: f64,
    pub params: Vec<(String, f64)>,
    pub budget: EpsilonBudget,
    pub failure_probability: f64,
    pub zero_key: Option<String>,
}

impl KeyRateResult {
    /// Zero-key record carrying only a reason.
    pub fn zero(protocol: ProtocolKind, n: f64, budget: EpsilonBudget, reason: impl Into<String>) -> Self {
        let mut r = blank(protocol, n, budget);
        r.zero_key = Some(reason.into());
        r
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn blank(protocol: ProtocolKind, n: f64, budget: EpsilonBudget) -> KeyRateResult {
    KeyRateResult {
        protocol,
        l_key: 0.0,
        l_raw: f64::NEG_INFINITY,
        rate: 0.0,
        n,
        e_ph_upper: 0.5,
        m_w_upper: 0.0,
        m_w_dot_upper: None,
        m_ph_upper: 0.0,
        m_ph_delta: None,
        n_ph_upper: None,
        m_key1_lower: None,
        lambda_ec: 0.0,
        n_key: 0.0,
        m_key: 0.0,
        s_key: 0.0,
        qber: 0.0,
        params: Vec::new(),
        budget,
        failure_probability: 0.0,
        zero_key: None,
    }
}

/// `N_key [1 - h(min(e, 1/2))] - λ_EC - cost`, clamped at 0.
pub fn key_length_bb84(n_key: f64, e_ph_upper: f64, lambda_ec: f64, budget: &EpsilonBudget) -> KeyRateResult {
    let e = e_ph_upper.clamp(0.0, 0.5);
    let raw = n_key * (1.0 - binary_entropy(e)) - lambda_ec - pa_ev_cost(budget);
    let mut r = blank(ProtocolKind::Bb84, 0.0, *budget);
    r.l_key = raw.max(0.0);
    r.l_raw = raw;
    r.e_ph_upper = e_ph_upper;
    r.lambda_ec = lambda_ec;
    r.n_key = n_key;
    if raw <= 0.0 {
        r.zero_key = Some("key length nonpositive".into());
    }
    r
}

/// `M_key1^L [1 - h(ratio)] - λ_EC - cost` with the ratio optionally
/// lifted by the mismatch parameters at `M_key1^L`.
pub fn key_length_decoy(
    m_key1_lower: f64,
    m_ph_upper: f64,
    lambda_ec: f64,
    budget: &EpsilonBudget,
    deltas: Option<(f64, f64)>,
) -> KeyRateResult {
    let mut r = blank(ProtocolKind::Decoy, 0.0, *budget);
    r.lambda_ec = lambda_ec;
    r.m_key1_lower = Some(m_key1_lower);
    r.m_ph_upper = m_ph_upper;
    if m_key1_lower < 1.0 {
        r.zero_key = Some("single-photon key lower bound below one".into());
        return r;
    }
    let base = m_ph_upper.max(0.0) / m_key1_lower;
    let ratio = match deltas {
        Some(d) => mismatch_ratio(base, m_key1_lower, d, budget.eps_dep1, budget.eps_dep2),
        None => Some(base),
    };
    let Some(ratio) = ratio else {
        r.zero_key = Some("mismatch denominator nonpositive".into());
        return r;
    };
    r.e_ph_upper = ratio;
    let raw = m_key1_lower * (1.0 - binary_entropy(ratio.min(0.5))) - lambda_ec - pa_ev_cost(budget);
    r.l_key = raw.max(0.0);
    r.l_raw = raw;
    if raw <= 0.0 {
        r.zero_key = Some("key length nonpositive".into());
    }
    r
}

// ------------------------------------------------------------ problems

fn q_terms(sets: &[CoefficientSet], q_gs: &[f64], op: impl Fn(&CoefficientSet) -> Vec<(usize, Herm)>) -> Vec<QTerm> {
    sets.iter()
        .zip(q_gs)
        .map(|(s, &g)| QTerm {
            label: s.label.clone(),
            parts: op(s),
            guess: g,
            range: RvRange { x_min: s.x_min, x_max: s.x_max },
        })
        .collect()
}

fn full_t_group(label: &str, rho: &Herm, blocks: Vec<usize>, gamma_w: f64, keep: impl Fn(usize, usize) -> bool) -> TGroup {
    let d = rho.dim();
    let fam: Vec<(TIndex, Herm)> = t_family(d).into_iter().filter(|(ix, _)| keep(ix.i, ix.j)).collect();
    let guesses = t_guesses(rho, &fam);
    let identity = fam.iter().enumerate().filter(|(_, (ix, _))| ix.i == ix.j).map(|(k, _)| k).collect();
    TGroup {
        label: label.into(),
        dim_a: d,
        pairs: fam.iter().map(|f| f.0).collect(),
        ops: fam.into_iter().map(|f| f.1).collect(),
        guesses,
        identity,
        blocks,
        cap: Some(Herm::identity(d).scale(gamma_w)),
    }
}

/// Single block `E_ph ⪯ sum η Q + W (x) I_B` with `-γ_W ⪯ W ⪯ γ_W`.
pub fn bb84_problem(model: &Bb84Model, sets: &[CoefficientSet], q_gs: &[f64], gamma_w: f64) -> DualProblem {
    let eps = epsilon_prime(model.epsilon, model.corr_length);
    let rho = marginal_guess(&model.register(), eps);
    DualProblem {
        blocks: vec![DualBlock { label: "ph".into(), dim_a: 4, dim_b: 3, target: bb84_phase_error(model) }],
        q_terms: q_terms(sets, q_gs, |s| vec![(0, s.operator(4))]),
        t_groups: vec![full_t_group("T", &rho, vec![0], gamma_w, |_, _| true)],
    }
}

/// One block per announcement, sharing a single joint T group.
pub fn mdi_problem(model: &MdiModel, sets: &[CoefficientSet], q_gs: &[f64], gamma_w: f64) -> DualProblem {
    let eps = epsilon_prime(model.epsilon_joint(), model.corr_length);
    let rho = marginal_guess(&model.register(), eps);
    let blocks = MDI_OMEGAS
        .iter()
        .map(|&o| DualBlock { label: format!("{o:?}"), dim_a: 9, dim_b: 1, target: mdi_phase_error(model, o) })
        .collect();
    let omega_block = |o: Outcome| MDI_OMEGAS.iter().position(|&x| x == o).expect("announcement");
    DualProblem {
        blocks,
        q_terms: q_terms(sets, q_gs, |s| {
            let o = s.terms[0].outcome;
            vec![(omega_block(o), s.mdi_operator(o))]
        }),
        t_groups: vec![full_t_group("T", &rho, vec![0, 1, 2], gamma_w, |_, _| true)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoyTarget {
    PhaseError,
    /// `-D^{(1)}`, whose dual value bounds minus the single-photon gain.
    Detection,
}

/// Photon-number blocks `0..=n_cut` plus the tail block.
pub fn decoy_problem(
    model: &DecoyModel,
    target: DecoyTarget,
    sets: &[CoefficientSet],
    q_gs: &[f64],
    gamma_w: f64,
) -> DualProblem {
    let d = model.pairs().len();
    let eps = epsilon_prime(model.epsilon, model.corr_length);
    let o = match target {
        DecoyTarget::PhaseError => decoy_phase_error(model),
        DecoyTarget::Detection => decoy_detection_operator(model).scale(-1.0),
    };
    let n_cut = model.n_cut;
    let mut blocks: Vec<DualBlock> = (0..=n_cut)
        .map(|n| DualBlock {
            label: format!("n{n}"),
            dim_a: d,
            dim_b: 3,
            target: if n == 1 { o.clone() } else { Herm::zeros(3 * d) },
        })
        .collect();
    blocks.push(DualBlock { label: "tail".into(), dim_a: d, dim_b: 3, target: Herm::zeros(3 * d) });
    let all_blocks: Vec<usize> = (0..=n_cut + 1).collect();
    let mut groups: Vec<TGroup> = (0..=n_cut)
        .map(|n| {
            let rho = marginal_guess(&model.register(n), eps);
            full_t_group(&format!("T{n}"), &rho, vec![n], gamma_w, |i, j| model.keeps_pair(i, j))
        })
        .collect();
    let probs = model.setting_probs();
    let covered: Vec<f64> = (0..d)
        .map(|i| (0..=n_cut).map(|n| model.photon_probs(n)[i]).sum::<f64>())
        .collect();
    groups.push(TGroup {
        label: "Tinf".into(),
        dim_a: d,
        ops: (0..d).map(|i| t_operator(d, i, i)).collect(),
        pairs: (0..d).map(|i| TIndex { i, j: i }).collect(),
        guesses: (0..d).map(|i| probs[i] * (1.0 - covered[i]).max(0.0)).collect(),
        identity: (0..d).collect(),
        blocks: vec![n_cut + 1],
        cap: Some(Herm::identity(d).scale(gamma_w)),
    });
    DualProblem {
        blocks,
        q_terms: q_terms(sets, q_gs, |s| {
            let op = s.operator(d);
            all_blocks.iter().map(|&b| (b, op.clone())).collect()
        }),
        t_groups: groups,
    }
}

// ------------------------------------------------------------ pipelines

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n: f64,
    pub alpha: f64,
    pub gamma_w: f64,
    pub budget: EpsilonBudget,
    /// Detector tolerances; `None` disables the mismatch lift.
    pub detector: Option<DetectorTolerances>,
    pub f_ec: f64,
    pub renormalize: bool,
    pub sdp: SdpOptions,
    pub context_cap: usize,
}

impl EvalSettings {
    pub fn new(kind: ProtocolKind, n: f64, alpha: f64, gamma_w: f64) -> Self {
        Self {
            n,
            alpha,
            gamma_w,
            budget: EpsilonBudget::default_for(kind),
            detector: None,
            f_ec: 1.16,
            renormalize: false,
            sdp: SdpOptions::default(),
            context_cap: CONTEXT_CAP,
        }
    }

    fn check(&self, kind: ProtocolKind) -> Result<(), FiniteKeyError> {
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(FiniteKeyError::InvalidInput(format!("N = {}", self.n)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(FiniteKeyError::InvalidInput(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma_w > 0.0 && self.gamma_w.is_finite()) {
            return Err(FiniteKeyError::InvalidInput(format!("gamma_W = {}", self.gamma_w)));
        }
        if let Some(t) = &self.detector {
            t.validate()?;
        }
        self.budget.validate(kind, self.detector.is_some())
    }
}

/// One solved SDP of a run, kept for export.
#[derive(Debug, Clone)]
pub struct SolvedSdp {
    pub label: String,
    pub problem: DualProblem,
    pub certificate: DualCertificate,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: KeyRateResult,
    pub sdps: Vec<SolvedSdp>,
    pub mw: Vec<MwBound>,
}

/// Solves with or without renormalization. Non-converged solves still
/// carry a restored feasible certificate, which is used.
pub fn solve_problem(p: &DualProblem, probs: &[f64], s: &EvalSettings) -> Result<DualCertificate, FiniteKeyError> {
    let r = if s.renormalize { solve_dual_renormalized(p, probs, &s.sdp) } else { solve_dual(p, &s.sdp) };
    let c = match r {
        Ok(c) => c,
        Err(e) => e.into_best()?,
    };
    if !c.is_feasible() {
        return Err(FiniteKeyError::Sdp(SdpError::InfeasibleAfterRestore(c.feasibility_margin)));
    }
    Ok(c)
}

/// Sampling-lift tail shared by BB84 and MDI.
fn finish_single(
    kind: ProtocolKind,
    obs: &ExpectedObservables,
    m_ph: f64,
    m_w: f64,
    s: &EvalSettings,
    mismatch: bool,
) -> KeyRateResult {
    let b = &s.budget;
    let lambda_ec = s.f_ec * obs.n_key * binary_entropy(obs.qber.min(0.5));
    let mut r = blank(kind, s.n, *b);
    r.m_ph_upper = m_ph;
    r.m_w_upper = m_w;
    r.n_key = obs.n_key;
    r.m_key = obs.m_key;
    r.s_key = obs.s_key;
    r.qber = obs.qber;
    r.lambda_ec = lambda_ec;
    r.failure_probability = b.consumed(kind, mismatch);
    if obs.m_key < 1.0 {
        r.zero_key = Some("no sifted key".into());
        return r;
    }
    let m_ph = m_ph.max(0.0);
    let lifted = match (mismatch, s.detector) {
        (true, Some(t)) => match mph_mismatch(m_ph, obs.m_key, t.deltas(), b.eps_dep1, b.eps_dep2) {
            Some(v) => {
                r.m_ph_delta = Some(v);
                v
            }
            None => {
                r.zero_key = Some("mismatch denominator nonpositive".into());
                return r;
            }
        },
        _ => m_ph,
    };
    let n_ph = nph_upper(lifted, obs.m_key, obs.s_key, b.eps_ps);
    r.n_ph_upper = Some(n_ph);
    let e = n_ph / obs.n_key;
    let k = key_length_bb84(obs.n_key, e, lambda_ec, b);
    r.e_ph_upper = e;
    r.l_key = k.l_key;
    r.l_raw = k.l_raw;
    r.rate = k.l_key / s.n;
    r.zero_key = k.zero_key;
    r
}

pub fn evaluate_bb84(ch: &ChannelParams, model: &Bb84Model, s: &EvalSettings) -> Result<Evaluation, FiniteKeyError> {
    model.validate()?;
    s.check(ProtocolKind::Bb84)?;
    let sets = bb84_coefficient_sets(model);
    let obs = bb84_observables(ch, model, &sets, s.n, s.alpha);
    let p = bb84_problem(model, &sets, &obs.q, s.gamma_w);
    let cert = solve_problem(&p, &model.setting_probs, s)?;
    let reg = model.register();
    let mw = mw_upper_correlated(
        &reg,
        &cert.w_blocks[0],
        (cert.omega_min, cert.omega_max),
        s.alpha,
        s.n,
        model.corr_length,
        model.epsilon,
        s.budget.eps_pb,
    )?;
    let guess = s.n * (1.0 - s.alpha) * cert.objective.max(0.0);
    let m_ph = mph_upper(&cert, &p, mw.m_w_upper, &obs.m_q, s.n, s.alpha, s.budget.eps_pk, guess)?;
    let mut result = finish_single(ProtocolKind::Bb84, &obs, m_ph, mw.m_w_upper, s, s.detector.is_some());
    result.params = vec![
        ("distance_km".into(), ch.distance_km),
        ("p_z".into(), model.basis_probs[0]),
        ("alpha".into(), s.alpha),
        ("gamma_w".into(), s.gamma_w),
    ];
    Ok(Evaluation { result, sdps: vec![SolvedSdp { label: "phase".into(), problem: p, certificate: cert }], mw: vec![mw] })
}

pub fn evaluate_mdi(ch: &ChannelParams, model: &MdiModel, s: &EvalSettings) -> Result<Evaluation, FiniteKeyError> {
    model.validate()?;
    s.check(ProtocolKind::Mdi)?;
    let sets = mdi_coefficient_sets(model);
    let obs = mdi_observables(ch, model, &sets, s.n, s.alpha);
    let p = mdi_problem(model, &sets, &obs.q, s.gamma_w);
    let reg = model.register();
    let cert = solve_problem(&p, &reg.probs, s)?;
    let mw = mw_upper_correlated(
        &reg,
        &cert.w_blocks[0],
        (cert.omega_min, cert.omega_max),
        s.alpha,
        s.n,
        model.corr_length,
        model.epsilon_joint(),
        s.budget.eps_pb,
    )?;
    let guess = s.n * (1.0 - s.alpha) * cert.objective.max(0.0);
    let m_ph = mph_upper(&cert, &p, mw.m_w_upper, &obs.m_q, s.n, s.alpha, s.budget.eps_pk, guess)?;
    let mut result = finish_single(ProtocolKind::Mdi, &obs, m_ph, mw.m_w_upper, s, false);
    result.params = vec![
        ("distance_km".into(), ch.distance_km),
        ("p_z".into(), model.p_z),
        ("p_key_z".into(), model.p_key_z),
        ("mu".into(), model.mu),
        ("alpha".into(), s.alpha),
        ("gamma_w".into(), s.gamma_w),
    ];
    Ok(Evaluation { result, sdps: vec![SolvedSdp { label: "phase".into(), problem: p, certificate: cert }], mw: vec![mw] })
}

/// `(M_key1^L, M_ph^U)` with their `M_W^U` bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoyBounds {
    pub m_key1_lower: f64,
    pub m_ph_upper: f64,
    pub mw_ph: MwBound,
    pub mw_det: MwBound,
}

fn decoy_mw(model: &DecoyModel, cert: &DualCertificate, s: &EvalSettings) -> Result<MwBound, FiniteKeyError> {
    let k = model.n_cut + 1;
    let obs = DecoyObservable {
        w_blocks: &cert.w_blocks[..k],
        lambda_inf: &cert.lambda[k],
        omega_min: cert.omega_min,
        omega_max: cert.omega_max,
    };
    Ok(mw_upper_decoy(model, &obs, s.alpha, s.n, s.budget.eps_pb, s.context_cap)?)
}

/// Both decoy bounds from solved certificates.
#[allow(clippy::too_many_arguments)]
pub fn decoy_bounds(
    model: &DecoyModel,
    ph: (&DualProblem, &DualCertificate),
    det: (&DualProblem, &DualCertificate),
    obs: &ExpectedObservables,
    s: &EvalSettings,
) -> Result<DecoyBounds, FiniteKeyError> {
    let b = &s.budget;
    let mw_ph = decoy_mw(model, ph.1, s)?;
    let mw_det = decoy_mw(model, det.1, s)?;
    let guess_ph = s.n * (1.0 - s.alpha) * ph.1.objective.max(0.0);
    let m_ph_upper = mph_upper(ph.1, ph.0, mw_ph.m_w_upper, &obs.m_q, s.n, s.alpha, b.eps_pk, guess_ph)?;
    let c = conditional_upper(det.1, det.0, mw_det.m_w_upper, &obs.m_q_dot, s.n, s.alpha, b.eps_pk)?;
    let guess_key1 = s.n * (1.0 - s.alpha) * (-det.1.objective).max(0.0);
    let m_key1_lower = mkey1_lower_from(c.value, s.n, guess_key1, b.eps_pk)?;
    Ok(DecoyBounds { m_key1_lower, m_ph_upper, mw_ph, mw_det })
}

pub fn evaluate_decoy(ch: &ChannelParams, model: &DecoyModel, s: &EvalSettings) -> Result<Evaluation, FiniteKeyError> {
    model.validate()?;
    s.check(ProtocolKind::Decoy)?;
    let sets_ph = decoy_phase_sets(model);
    let sets_det = decoy_gain_sets(model);
    let obs = decoy_observables(ch, model, &sets_ph, &sets_det, s.n, s.alpha);
    let probs = model.setting_probs();
    let p_ph = decoy_problem(model, DecoyTarget::PhaseError, &sets_ph, &obs.q, s.gamma_w);
    let p_det = decoy_problem(model, DecoyTarget::Detection, &sets_det, &obs.q_dot, s.gamma_w);
    let c_ph = solve_problem(&p_ph, &probs, s)?;
    let c_det = solve_problem(&p_det, &probs, s)?;
    let db = decoy_bounds(model, (&p_ph, &c_ph), (&p_det, &c_det), &obs, s)?;
    let b = &s.budget;
    // error correction runs on every untagged sifted round of the signal intensity
    let lambda_ec = s.f_ec * obs.m_key * binary_entropy(obs.qber.min(0.5));
    let deltas = s.detector.map(|t| t.deltas());
    let k = key_length_decoy(db.m_key1_lower, db.m_ph_upper, lambda_ec, b, deltas);
    let mut result = blank(ProtocolKind::Decoy, s.n, *b);
    result.l_key = k.l_key;
    result.l_raw = k.l_raw;
    result.rate = k.l_key / s.n;
    result.e_ph_upper = k.e_ph_upper;
    result.m_w_upper = db.mw_ph.m_w_upper;
    result.m_w_dot_upper = Some(db.mw_det.m_w_upper);
    result.m_ph_upper = db.m_ph_upper;
    result.m_key1_lower = Some(db.m_key1_lower);
    result.lambda_ec = lambda_ec;
    result.n_key = obs.n_key;
    result.m_key = obs.m_key;
    result.s_key = obs.s_key;
    result.qber = obs.qber;
    result.failure_probability = b.consumed(ProtocolKind::Decoy, s.detector.is_some());
    result.zero_key = k.zero_key;
    result.params = vec![
        ("distance_km".into(), ch.distance_km),
        ("p_z".into(), model.p_z),
        ("alpha".into(), s.alpha),
        ("gamma_w".into(), s.gamma_w),
    ];
    for (i, (mu, p)) in model.intensities.iter().zip(&model.intensity_probs).enumerate() {
        result.params.push((format!("mu{i}"), *mu));
        result.params.push((format!("p_mu{i}"), *p));
    }
    Ok(Evaluation {
        result,
        sdps: vec![
            SolvedSdp { label: "phase".into(), problem: p_ph, certificate: c_ph },
            SolvedSdp { label: "detection".into(), problem: p_det, certificate: c_det },
        ],
        mw: vec![db.mw_ph, db.mw_det],
    })
}
