//! Protocol instantiations: reference states, POVMs, target operators,
//! T-operator families, coefficient sets and marginal-state guesses for
//! BB84, the coherent-state MDI scheme and three-intensity decoy BB84.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linops::{c, tensor, Herm, Ket, LinopsError, C64};

/// Tail mass allowed outside the truncated Fock space of an MDI state.
pub const FOCK_TAIL_TOL: f64 = 1e-12;
/// Largest Fock dimension used for MDI coherent states.
pub const FOCK_DIM_CAP: usize = 20;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("probabilities do not sum to one (sum {0})")]
    NotNormalized(f64),
    #[error("parameter `{0}` out of range: {1}")]
    OutOfRange(&'static str, f64),
    #[error("intensities must be strictly positive and descending")]
    BadIntensities,
    #[error("Fock truncation at {FOCK_DIM_CAP} leaves tail mass {0:e}")]
    TruncationInsufficient(f64),
    #[error(transparent)]
    Linops(#[from] LinopsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    Bb84,
    Mdi,
    Decoy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// Measurement outcome of Bob (BB84, decoy) or announcement of the middle
/// node (MDI).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    NoClick,
    Bit(u8),
    OmegaC,
    OmegaD,
    OmegaEmpty,
}

impl Outcome {
    /// Position on Bob's three-dimensional carrier `{⊥, 0, 1}`.
    pub fn carrier_index(self) -> usize {
        match self {
            Outcome::NoClick => 0,
            Outcome::Bit(b) => 1 + b as usize,
            Outcome::OmegaC => 0,
            Outcome::OmegaD => 1,
            Outcome::OmegaEmpty => 2,
        }
    }
}

pub const MDI_OMEGAS: [Outcome; 3] = [Outcome::OmegaC, Outcome::OmegaD, Outcome::OmegaEmpty];

fn check_prob(name: &'static str, p: f64) -> Result<(), ProtocolError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(ProtocolError::OutOfRange(name, p));
    }
    Ok(())
}

fn check_simplex(p: &[f64]) -> Result<(), ProtocolError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL || p.iter().any(|&x| x < 0.0) {
        return Err(ProtocolError::NotNormalized(s));
    }
    Ok(())
}

/// Settings, probabilities and reference-state Gram matrix of one register.
#[derive(Debug, Clone)]
pub struct SettingRegister {
    pub probs: Vec<f64>,
    /// `[gram]_{ij} = <phi_i|phi_j>`.
    pub gram: Herm,
}

impl SettingRegister {
    pub fn dim(&self) -> usize {
        self.probs.len()
    }
}

// ---------------------------------------------------------------- BB84

#[derive(Debug, Clone, PartialEq)]
pub struct Bb84Model {
    pub delta_theta: f64,
    /// `p_i^A` for `i` in `(0_Z, 1_Z, 0_X, 1_X)`.
    pub setting_probs: Vec<f64>,
    /// `(p_Z^B, p_X^B)`.
    pub basis_probs: [f64; 2],
    pub epsilon: f64,
    pub corr_length: usize,
}

impl Bb84Model {
    /// Same Z-basis probability for Alice and Bob.
    pub fn new(delta_theta: f64, p_z: f64, epsilon: f64, corr_length: usize) -> Result<Self, ProtocolError> {
        check_prob("p_z", p_z)?;
        let m = Self {
            delta_theta,
            setting_probs: vec![p_z / 2.0, p_z / 2.0, (1.0 - p_z) / 2.0, (1.0 - p_z) / 2.0],
            basis_probs: [p_z, 1.0 - p_z],
            epsilon,
            corr_length,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.delta_theta.abs() >= PI || !self.delta_theta.is_finite() {
            return Err(ProtocolError::OutOfRange("delta_theta", self.delta_theta));
        }
        check_prob("epsilon", self.epsilon)?;
        check_simplex(&self.setting_probs)?;
        check_simplex(&self.basis_probs)
    }

    pub fn register(&self) -> SettingRegister {
        let s = bb84_states(self.delta_theta);
        SettingRegister { probs: self.setting_probs.clone(), gram: gram_of(&s) }
    }
}

/// Polarization angle `kappa_a theta_a` of setting `a` in `0..4`.
pub fn encoding_angle(delta_theta: f64, a: usize) -> f64 {
    const THETA: [f64; 4] = [0.0, PI / 2.0, PI / 4.0, 3.0 * PI / 4.0];
    (1.0 + delta_theta / PI) * THETA[a]
}

pub fn bb84_states(delta_theta: f64) -> [Ket; 4] {
    std::array::from_fn(|a| {
        let t = encoding_angle(delta_theta, a);
        Ket::from_real(&[t.cos(), t.sin()]).expect("unit vector")
    })
}

/// Gram matrix `<k_i|k_j>` of a list of kets.
pub fn gram_of(kets: &[Ket]) -> Herm {
    let n = kets.len();
    let m = DMatrix::from_fn(n, n, |i, j| kets[i].inner(&kets[j]));
    Herm::from_trusted(m)
}

/// Bob's POVM element on the carrier `{|⊥>, |0>, |1>}`.
pub fn bob_element(basis: Basis, outcome: Outcome) -> Herm {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match (basis, outcome) {
        (_, Outcome::NoClick) => Herm::basis_projector(3, 0),
        (Basis::Z, Outcome::Bit(b)) => Herm::basis_projector(3, 1 + b as usize),
        (Basis::X, Outcome::Bit(b)) => {
            let sign = if b == 0 { 1.0 } else { -1.0 };
            Herm::projector(&Ket::from_real(&[0.0, s, sign * s]).expect("unit vector"))
        }
        _ => panic!("MDI announcement is not a Bob POVM element"),
    }
}

/// POVM of each basis, indexed by `[basis][carrier_index]`.
pub fn bb84_povm() -> [[Herm; 3]; 2] {
    [Basis::Z, Basis::X].map(|b| {
        [Outcome::NoClick, Outcome::Bit(0), Outcome::Bit(1)].map(|o| bob_element(b, o))
    })
}

/// `(|0> ± |1>)/sqrt 2` embedded at positions `i0`, `i1` of a `dim` space.
fn hadamard_ket(dim: usize, i0: usize, i1: usize, bit: u8) -> Ket {
    let mut v = vec![c(0.0, 0.0); dim];
    v[i0] = c(1.0, 0.0);
    v[i1] = c(if bit == 0 { 1.0 } else { -1.0 }, 0.0);
    Ket::normalized(v).expect("nonzero")
}

/// `E_ph = p_Z^B (|0_X><0_X| (x) Γ^{1|X} + |1_X><1_X| (x) Γ^{0|X})` on `A (x) B`.
pub fn bb84_phase_error(model: &Bb84Model) -> Herm {
    let pz = model.basis_probs[0];
    let mut e = Herm::zeros(12);
    for a in 0..2u8 {
        let pa = Herm::projector(&hadamard_ket(4, 0, 1, a));
        let g = bob_element(Basis::X, Outcome::Bit(1 - a));
        e.add_scaled(pz, &tensor(&pa, &g).expect("small"));
    }
    e
}

// ----------------------------------------------------------------- MDI

#[derive(Debug, Clone, PartialEq)]
pub struct MdiModel {
    pub mu: f64,
    /// `p_0 + p_1` for each user; the vacuum setting gets `1 - p_z`.
    pub p_z: f64,
    pub p_key_z: f64,
    /// Per-user side-channel parameter; the joint value is `1-(1-e)^2`.
    pub epsilon_user: f64,
    pub corr_length: usize,
}

impl MdiModel {
    pub fn new(mu: f64, p_z: f64, p_key_z: f64, epsilon_user: f64, corr_length: usize) -> Result<Self, ProtocolError> {
        let m = Self { mu, p_z, p_key_z, epsilon_user, corr_length };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(ProtocolError::OutOfRange("mu", self.mu));
        }
        check_prob("p_z", self.p_z)?;
        check_prob("p_key_z", self.p_key_z)?;
        check_prob("epsilon", self.epsilon_user)
    }

    pub fn user_probs(&self) -> [f64; 3] {
        [self.p_z / 2.0, self.p_z / 2.0, 1.0 - self.p_z]
    }

    /// Joint side-channel parameter of the pair of sources.
    pub fn epsilon_joint(&self) -> f64 {
        1.0 - (1.0 - self.epsilon_user).powi(2)
    }

    /// Key-tagging probability of tuple `(a, b, Ω)`.
    pub fn p_key(&self, a: usize, b: usize, omega: Outcome) -> f64 {
        if a < 2 && b < 2 && matches!(omega, Outcome::OmegaC | Outcome::OmegaD) {
            self.p_key_z
        } else {
            0.0
        }
    }

    /// Joint register `i = a + 3b`.
    pub fn register(&self) -> SettingRegister {
        let g1 = mdi_gram(self.mu);
        let pu = self.user_probs();
        let mut probs = vec![0.0; 9];
        let mut m = DMatrix::zeros(9, 9);
        for i in 0..9 {
            let (a, b) = (i % 3, i / 3);
            probs[i] = pu[a] * pu[b];
            for j in 0..9 {
                let (a2, b2) = (j % 3, j / 3);
                m[(i, j)] = c(g1[(a, a2)] * g1[(b, b2)], 0.0);
            }
        }
        SettingRegister { probs, gram: Herm::from_trusted(m) }
    }
}

/// Closed-form overlaps of `|sqrt mu>, |-sqrt mu>, |vac>`.
pub fn mdi_gram(mu: f64) -> DMatrix<f64> {
    let x = (-2.0 * mu).exp();
    let v = (-mu / 2.0).exp();
    DMatrix::from_row_slice(3, 3, &[1.0, x, v, x, 1.0, v, v, v, 1.0])
}

/// `|sqrt mu>`, `|-sqrt mu>`, `|vac>` in the smallest Fock space whose
/// tail mass is below [`FOCK_TAIL_TOL`].
pub fn mdi_states(mu: f64) -> Result<[Ket; 3], ProtocolError> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(ProtocolError::OutOfRange("mu", mu));
    }
    let mut amps = Vec::new();
    let mut term = (-mu / 2.0).exp();
    let mut mass = 0.0;
    let mut n = 0usize;
    loop {
        amps.push(term);
        mass += term * term;
        if 1.0 - mass < FOCK_TAIL_TOL {
            break;
        }
        n += 1;
        if n >= FOCK_DIM_CAP {
            return Err(ProtocolError::TruncationInsufficient(1.0 - mass));
        }
        term *= mu.sqrt() / (n as f64).sqrt();
    }
    let plus = Ket::from_real(&amps)?;
    let minus: Vec<f64> = amps.iter().enumerate().map(|(k, &x)| if k % 2 == 1 { -x } else { x }).collect();
    let minus = Ket::from_real(&minus)?;
    Ok([plus, minus, Ket::basis(amps.len(), 0)])
}

/// Phase-error operator of one announced block `Ω` on the joint register.
pub fn mdi_phase_error(model: &MdiModel, omega: Outcome) -> Herm {
    let mut e = Herm::zeros(9);
    if matches!(omega, Outcome::OmegaEmpty) || model.p_key_z == 0.0 {
        return e;
    }
    for bit in 0..2u8 {
        let k = hadamard_ket(3, 0, 1, bit);
        // amplitude at a + 3b is k_a k_b
        let joint = k.kron(&k);
        e.add_scaled(model.p_key_z, &Herm::projector(&joint));
    }
    e
}

// --------------------------------------------------------------- decoy

#[derive(Debug, Clone, PartialEq)]
pub struct DecoyModel {
    pub delta_theta: f64,
    /// `(p_Z^A = p_Z^B, ...)`; Alice picks each bit with `p_z/2`.
    pub p_z: f64,
    /// Average intensities, strictly descending.
    pub intensities: Vec<f64>,
    pub intensity_probs: Vec<f64>,
    pub n_cut: usize,
    pub epsilon: f64,
    pub corr_length: usize,
    /// Alice always sends `a = 0` with the weakest intensity.
    pub vacuum_convention: bool,
    /// Drop `T^{i,j}` with both different bit/basis and intensity.
    pub drop_cross_terms: bool,
    /// Intensity-correlation strength and decay of the lag model.
    pub eps_ic: f64,
    pub zeta: f64,
}

impl DecoyModel {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.delta_theta.abs() >= PI || !self.delta_theta.is_finite() {
            return Err(ProtocolError::OutOfRange("delta_theta", self.delta_theta));
        }
        check_prob("p_z", self.p_z)?;
        check_prob("epsilon", self.epsilon)?;
        if self.intensities.is_empty()
            || self.intensities.len() != self.intensity_probs.len()
            || self.intensities.iter().any(|&x| !(x > 0.0 && x.is_finite()))
            || self.intensities.windows(2).any(|w| w[0] <= w[1])
        {
            return Err(ProtocolError::BadIntensities);
        }
        check_simplex(&self.intensity_probs)?;
        if self.eps_ic < 0.0 {
            return Err(ProtocolError::OutOfRange("eps_ic", self.eps_ic));
        }
        if !(self.zeta > 0.0) {
            return Err(ProtocolError::OutOfRange("zeta", self.zeta));
        }
        Ok(())
    }

    pub fn basis_probs(&self) -> [f64; 2] {
        [self.p_z, 1.0 - self.p_z]
    }

    /// Setting pairs `(a, mu)` in register order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let last = self.intensities.len() - 1;
        let mut out = Vec::new();
        for mu in 0..self.intensities.len() {
            for a in 0..4 {
                if self.vacuum_convention && mu == last && a != 0 {
                    continue;
                }
                out.push((a, mu));
            }
        }
        out
    }

    pub fn pair_index(&self, a: usize, mu: usize) -> Option<usize> {
        self.pairs().iter().position(|&p| p == (a, mu))
    }

    pub fn setting_probs(&self) -> Vec<f64> {
        let last = self.intensities.len() - 1;
        let pa = [self.p_z / 2.0, self.p_z / 2.0, (1.0 - self.p_z) / 2.0, (1.0 - self.p_z) / 2.0];
        self.pairs()
            .into_iter()
            .map(|(a, mu)| {
                if self.vacuum_convention && mu == last {
                    self.intensity_probs[mu]
                } else {
                    pa[a] * self.intensity_probs[mu]
                }
            })
            .collect()
    }

    /// `p_{n|i}` for the average intensity of every setting.
    pub fn photon_probs(&self, n: usize) -> Vec<f64> {
        self.pairs().into_iter().map(|(_, mu)| poisson(self.intensities[mu], n)).collect()
    }

    /// Register of photon-number block `n` with weights `p_{n,i} = p_i p_{n|i}`.
    pub fn register(&self, n: usize) -> SettingRegister {
        let pairs = self.pairs();
        let probs: Vec<f64> = self
            .setting_probs()
            .iter()
            .zip(self.photon_probs(n))
            .map(|(p, q)| p * q)
            .collect();
        SettingRegister { probs, gram: decoy_gram(self.delta_theta, &pairs, n) }
    }

    /// Whether `T^{i,j}` is kept in the SDP.
    pub fn keeps_pair(&self, i: usize, j: usize) -> bool {
        if !self.drop_cross_terms {
            return true;
        }
        let p = self.pairs();
        p[i].0 == p[j].0 || p[i].1 == p[j].1
    }
}

pub fn poisson(mean: f64, n: usize) -> f64 {
    let mut t = (-mean).exp();
    for k in 1..=n {
        t *= mean / k as f64;
    }
    t
}

/// `|phi_{n,a}>` for `n ≤ n_cut` (outer index `n`, inner `a`).
pub fn decoy_fock_states(delta_theta: f64, n_cut: usize) -> Vec<[Ket; 4]> {
    (0..=n_cut)
        .map(|n| {
            std::array::from_fn(|a| {
                let t = encoding_angle(delta_theta, a);
                let (cs, sn) = (t.cos(), t.sin());
                let amps: Vec<f64> = (0..=n)
                    .map(|k| binomial(n, k).sqrt() * cs.powi(k as i32) * sn.powi((n - k) as i32))
                    .collect();
                Ket::from_real(&amps).expect("normalized by the binomial theorem")
            })
        })
        .collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `<phi_{n,a}|phi_{n,a'}> = cos(angle_a - angle_a')^n` on the pair register.
pub fn decoy_gram(delta_theta: f64, pairs: &[(usize, usize)], n: usize) -> Herm {
    let k = pairs.len();
    let m = DMatrix::from_fn(k, k, |i, j| {
        let d = encoding_angle(delta_theta, pairs[i].0) - encoding_angle(delta_theta, pairs[j].0);
        c(d.cos().powi(n as i32), 0.0)
    });
    Herm::from_trusted(m)
}

/// Single-photon phase-error operator `V^{0,1} + V^{1,0}`.
pub fn decoy_phase_error(model: &DecoyModel) -> Herm {
    let (i0, i1, d) = decoy_key_indices(model);
    let pz = model.p_z;
    let mut e = Herm::zeros(3 * d);
    for a in 0..2u8 {
        let pa = Herm::projector(&hadamard_ket(d, i0, i1, a));
        let g = bob_element(Basis::X, Outcome::Bit(1 - a));
        e.add_scaled(pz, &tensor(&pa, &g).expect("small"));
    }
    e
}

/// Single-photon sifted-key detection operator `D = sum_{a,b} V^{a,b}`.
pub fn decoy_detection_operator(model: &DecoyModel) -> Herm {
    let (i0, i1, d) = decoy_key_indices(model);
    let mut pa = Herm::basis_projector(d, i0);
    pa.add_scaled(1.0, &Herm::basis_projector(d, i1));
    let det = Herm::identity(3).sub(&bob_element(Basis::X, Outcome::NoClick));
    tensor(&pa, &det).expect("small").scale(model.p_z)
}

fn decoy_key_indices(model: &DecoyModel) -> (usize, usize, usize) {
    let i0 = model.pair_index(0, 0).expect("pair (0,0) always present");
    let i1 = model.pair_index(1, 0).expect("pair (1,0) always present");
    (i0, i1, model.pairs().len())
}

// ------------------------------------------------------------- generic

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolModel {
    Bb84(Bb84Model),
    Mdi(MdiModel),
    Decoy(DecoyModel),
}

impl ProtocolModel {
    pub fn kind(&self) -> ProtocolKind {
        match self {
            ProtocolModel::Bb84(_) => ProtocolKind::Bb84,
            ProtocolModel::Mdi(_) => ProtocolKind::Mdi,
            ProtocolModel::Decoy(_) => ProtocolKind::Decoy,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            ProtocolModel::Bb84(m) => m.validate(),
            ProtocolModel::Mdi(m) => m.validate(),
            ProtocolModel::Decoy(m) => m.validate(),
        }
    }

    /// Side-channel parameter entering `ε'`.
    pub fn epsilon(&self) -> f64 {
        match self {
            ProtocolModel::Bb84(m) => m.epsilon,
            ProtocolModel::Mdi(m) => m.epsilon_joint(),
            ProtocolModel::Decoy(m) => m.epsilon,
        }
    }

    pub fn corr_length(&self) -> usize {
        match self {
            ProtocolModel::Bb84(m) => m.corr_length,
            ProtocolModel::Mdi(m) => m.corr_length,
            ProtocolModel::Decoy(m) => m.corr_length,
        }
    }
}

/// One `(i, j)` entry of a T family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TIndex {
    pub i: usize,
    pub j: usize,
}

/// `T^{i,j}`: `(|i><j|+|j><i|)/2` for `i ≥ j`, `(|i><j|-|j><i|)/(2i)` for `i < j`.
pub fn t_operator(n: usize, i: usize, j: usize) -> Herm {
    let mut m = DMatrix::<C64>::zeros(n, n);
    if i >= j {
        m[(i, j)] += c(0.5, 0.0);
        m[(j, i)] += c(0.5, 0.0);
    } else {
        // 1/(2i) = -i/2
        m[(i, j)] = c(0.0, -0.5);
        m[(j, i)] = c(0.0, 0.5);
    }
    Herm::from_trusted(m)
}

/// All `n^2` operators, row-major in `(i, j)`.
pub fn t_family(n: usize) -> Vec<(TIndex, Herm)> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push((TIndex { i, j }, t_operator(n, i, j)));
        }
    }
    out
}

/// Guess of the register's marginal, using `<phi_i^⊥|phi_j^⊥> =
/// <phi_i^⊥|phi_j> = 0` for `i ≠ j`.
pub fn marginal_guess(reg: &SettingRegister, eps_prime: f64) -> Herm {
    let n = reg.dim();
    let g = reg.gram.matrix();
    let m = DMatrix::from_fn(n, n, |i, j| {
        let w = (reg.probs[i] * reg.probs[j]).sqrt();
        let side = if i == j { eps_prime } else { 0.0 };
        // <phi_j|phi_i> = conj(G_ij)
        (g[(i, j)].conj() * (1.0 - eps_prime) + c(side, 0.0)) * w
    });
    Herm::from_trusted(m)
}

/// `t_k = Tr(T^k rho)` over a family.
pub fn t_guesses(rho: &Herm, family: &[(TIndex, Herm)]) -> Vec<f64> {
    family.iter().map(|(_, t)| t.trace_with(rho)).collect()
}

// -------------------------------------------------------- coefficients

/// One nonzero coefficient `c^l` at a tuple (setting, basis, outcome).
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTerm {
    pub setting: usize,
    /// `None` for MDI, which has no receiver basis.
    pub basis: Option<Basis>,
    pub outcome: Outcome,
    pub c: f64,
    /// Probability that the tuple is used for testing (`p_β^B` or `p_test`).
    pub test_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub label: String,
    pub terms: Vec<CoeffTerm>,
    pub x_min: f64,
    pub x_max: f64,
}

impl CoefficientSet {
    fn new(label: String, terms: Vec<CoeffTerm>) -> Self {
        let vals = terms.iter().map(|t| t.c / t.test_prob);
        let x_min = vals.clone().fold(0.0, f64::min);
        let x_max = vals.fold(0.0, f64::max);
        Self { label, terms, x_min, x_max }
    }

    pub fn coefficient(&self, setting: usize, basis: Option<Basis>, outcome: Outcome) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.setting == setting && t.basis == basis && t.outcome == outcome)
            .map(|t| t.c)
            .sum()
    }

    /// Equal coefficients on all the given key tuples.
    pub fn key_consistent(&self, key_tuples: &[(usize, Option<Basis>, Outcome)]) -> bool {
        let vals: Vec<f64> = key_tuples.iter().map(|&(s, b, o)| self.coefficient(s, b, o)).collect();
        vals.windows(2).all(|w| w[0] == w[1])
    }

    /// Operator `sum c |i><i| (x) Γ^{b|β}` on the setting register times
    /// Bob's carrier (BB84, decoy).
    pub fn operator(&self, n_settings: usize) -> Herm {
        let mut q = Herm::zeros(3 * n_settings);
        for t in &self.terms {
            let basis = t.basis.expect("receiver basis");
            let op = tensor(&Herm::basis_projector(n_settings, t.setting), &bob_element(basis, t.outcome))
                .expect("small");
            q.add_scaled(t.c, &op);
        }
        q
    }

    /// MDI operator restricted to announcement `omega`.
    pub fn mdi_operator(&self, omega: Outcome) -> Herm {
        let mut q = Herm::zeros(9);
        for t in self.terms.iter().filter(|t| t.outcome == omega) {
            q.add_scaled(t.c, &Herm::basis_projector(9, t.setting));
        }
        q
    }
}

/// Eight indicator sets, `l = 1 + i' + 4b'`, over X-basis detections.
pub fn bb84_coefficient_sets(model: &Bb84Model) -> Vec<CoefficientSet> {
    let px = model.basis_probs[1];
    let mut out = Vec::new();
    for b in 0..2u8 {
        for i in 0..4 {
            let term = CoeffTerm { setting: i, basis: Some(Basis::X), outcome: Outcome::Bit(b), c: 1.0, test_prob: px };
            out.push(CoefficientSet::new(format!("c{}", 1 + i + 4 * b as usize), vec![term]));
        }
    }
    out
}

/// One indicator per `(a, b, Ω)` with `Ω ∈ {Ω_c, Ω_d}` and a positive test probability.
pub fn mdi_coefficient_sets(model: &MdiModel) -> Vec<CoefficientSet> {
    let mut out = Vec::new();
    for omega in [Outcome::OmegaC, Outcome::OmegaD] {
        for b in 0..3 {
            for a in 0..3 {
                let pt = 1.0 - model.p_key(a, b, omega);
                if pt <= 0.0 {
                    continue;
                }
                let term = CoeffTerm { setting: a + 3 * b, basis: None, outcome: omega, c: 1.0, test_prob: pt };
                let w = if omega == Outcome::OmegaC { 'c' } else { 'd' };
                out.push(CoefficientSet::new(format!("a{a}b{b}{w}"), vec![term]));
            }
        }
    }
    out
}

/// Phase-error target: indicator sets over `(a', mu', b', X)`.
pub fn decoy_phase_sets(model: &DecoyModel) -> Vec<CoefficientSet> {
    let px = 1.0 - model.p_z;
    let mut out = Vec::new();
    for (i, (a, mu)) in model.pairs().into_iter().enumerate() {
        for b in 0..2u8 {
            let term = CoeffTerm { setting: i, basis: Some(Basis::X), outcome: Outcome::Bit(b), c: 1.0, test_prob: px };
            out.push(CoefficientSet::new(format!("a{a}m{mu}b{b}X"), vec![term]));
        }
    }
    out
}

/// Detection target: one Z-basis gain per intensity.
pub fn decoy_gain_sets(model: &DecoyModel) -> Vec<CoefficientSet> {
    let pz = model.p_z;
    (0..model.intensities.len())
        .map(|l| {
            let mut terms = Vec::new();
            for a in 0..2 {
                if let Some(i) = model.pair_index(a, l) {
                    for b in 0..2u8 {
                        terms.push(CoeffTerm { setting: i, basis: Some(Basis::Z), outcome: Outcome::Bit(b), c: 1.0, test_prob: pz });
                    }
                }
            }
            CoefficientSet::new(format!("gainZ{l}"), terms)
        })
        .collect()
}

/// Sets per target: `(phase-error sets, detection sets)`; the second list
/// is empty except for decoy.
pub fn coefficient_sets(model: &ProtocolModel) -> (Vec<CoefficientSet>, Vec<CoefficientSet>) {
    match model {
        ProtocolModel::Bb84(m) => (bb84_coefficient_sets(m), Vec::new()),
        ProtocolModel::Mdi(m) => (mdi_coefficient_sets(m), Vec::new()),
        ProtocolModel::Decoy(m) => (decoy_phase_sets(m), decoy_gain_sets(m)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decoy() -> DecoyModel {
        DecoyModel {
            delta_theta: 0.063,
            p_z: 0.7,
            intensities: vec![0.5, 0.1, 1e-5],
            intensity_probs: vec![0.6, 0.3, 0.1],
            n_cut: 3,
            epsilon: 1e-5,
            corr_length: 1,
            vacuum_convention: false,
            drop_cross_terms: false,
            eps_ic: 0.03,
            zeta: 6.0,
        }
    }

    #[test]
    fn bb84_overlaps() {
        let s = bb84_states(0.0);
        assert_abs_diff_eq!(s[0].inner(&s[1]).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[0].inner(&s[2]).re, (PI / 4.0).cos(), epsilon = 1e-15);
        let s = bb84_states(0.063);
        let k = 1.0 + 0.063 / PI;
        assert_abs_diff_eq!(s[0].inner(&s[2]).re, (k * PI / 4.0).cos(), epsilon = 1e-15);
    }

    #[test]
    fn povm_completeness_and_bide() {
        let p = bb84_povm();
        assert_eq!(p[0][0], p[1][0]);
        for basis in &p {
            let mut s = Herm::zeros(3);
            for e in basis {
                assert!(e.min_eig().unwrap() >= -1e-12);
                s = s.add(e);
            }
            assert!(s.frobenius_distance(&Herm::identity(3)) < 1e-12);
        }
        let z0 = Herm::basis_projector(3, 1);
        assert_abs_diff_eq!(p[1][1].trace_with(&z0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn phase_error_bounds() {
        let m = Bb84Model::new(0.0, 1.0, 0.0, 0).unwrap();
        let e = bb84_phase_error(&m);
        assert!(e.min_eig().unwrap() >= -1e-12);
        assert!(e.max_eig().unwrap() <= 1.0 + 1e-12);
        // |0_X>_A |1_X>_B carries full error weight
        let k = hadamard_ket(4, 0, 1, 0).kron(&Ket::from_real(&[0.0, 1.0, -1.0]).unwrap());
        assert_abs_diff_eq!(e.trace_with(&Herm::projector(&k)), 1.0, epsilon = 1e-12);
        let mdi = MdiModel::new(0.1, 0.5, 0.0, 0.0, 0).unwrap();
        assert_eq!(mdi_phase_error(&mdi, Outcome::OmegaC).norm(), 0.0);
    }

    #[test]
    fn t_family_small() {
        let f = t_family(2);
        assert_eq!(f.len(), 4);
        assert_eq!(f[3].1, Herm::basis_projector(2, 1));
        let x = Herm::from_real(&DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])).unwrap();
        assert_eq!(f[2].1, x);
        assert!(f.iter().all(|(ix, t)| if ix.i < ix.j { t.is_imaginary() } else { t.is_real() }));
    }

    #[test]
    fn mdi_coherent_overlaps() {
        let s = mdi_states(0.1).unwrap();
        assert_abs_diff_eq!(s[0].inner(&s[1]).re, (-0.2f64).exp(), epsilon = 1e-11);
        assert_abs_diff_eq!(s[0].inner(&s[2]).re, (-0.05f64).exp(), epsilon = 1e-11);
        let z = mdi_states(0.0).unwrap();
        assert_eq!(z[0], z[2]);
        assert_eq!(z[1], z[2]);
        assert!(matches!(mdi_states(30.0), Err(ProtocolError::TruncationInsufficient(_))));
        let g = mdi_gram(0.1);
        assert_abs_diff_eq!(g[(0, 1)], s[0].inner(&s[1]).re, epsilon = 1e-11);
    }

    #[test]
    fn fock_states() {
        let f = decoy_fock_states(0.0, 3);
        assert_eq!(f[0][2].dim(), 1);
        // index k holds |k>_H |n-k>_V
        assert_eq!(f[1][0], Ket::from_real(&[0.0, 1.0]).unwrap());
        let a = f[2][2].amplitudes();
        assert_abs_diff_eq!(a[0].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a[2].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1].re, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn decoy_pairs_and_probs() {
        let mut m = decoy();
        assert_eq!(m.pairs().len(), 12);
        assert_abs_diff_eq!(m.setting_probs().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        m.vacuum_convention = true;
        assert_eq!(m.pairs().len(), 9);
        assert_abs_diff_eq!(m.setting_probs().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_eq!(decoy_phase_sets(&m).len(), 18);
        m.vacuum_convention = false;
        assert_eq!(decoy_phase_sets(&m).len(), 24);
        assert_eq!(decoy_gain_sets(&m).len(), 3);
    }

    #[test]
    fn coefficient_layout() {
        let m = Bb84Model::new(0.063, 0.8, 1e-5, 2).unwrap();
        let sets = bb84_coefficient_sets(&m);
        assert_eq!(sets.len(), 8);
        assert_eq!(sets[0].terms, vec![CoeffTerm {
            setting: 0,
            basis: Some(Basis::X),
            outcome: Outcome::Bit(0),
            c: 1.0,
            test_prob: m.basis_probs[1]
        }]);
        assert_abs_diff_eq!(sets[0].x_max, 1.0 / 0.2, epsilon = 1e-12);
        let key: Vec<_> = (0..2)
            .flat_map(|i| (0..2u8).map(move |b| (i, Some(Basis::Z), Outcome::Bit(b))))
            .collect();
        assert!(sets.iter().all(|s| s.key_consistent(&key)));
        let d = decoy();
        let key: Vec<_> = (0..2)
            .flat_map(|a| (0..2u8).map(move |b| (a, Some(Basis::Z), Outcome::Bit(b))))
            .map(|(a, b, o)| (d.pair_index(a, 0).unwrap(), b, o))
            .collect();
        assert!(decoy_gain_sets(&d).iter().all(|s| s.key_consistent(&key)));
        let mdi = MdiModel::new(0.1, 0.6, 0.5, 0.0, 0).unwrap();
        assert_eq!(mdi_coefficient_sets(&mdi).len(), 18);
        let mdi = MdiModel { p_key_z: 1.0, ..mdi };
        assert_eq!(mdi_coefficient_sets(&mdi).len(), 10);
    }

    #[test]
    fn marginal_limits() {
        let m = Bb84Model::new(0.0, 0.5, 0.0, 0).unwrap();
        let reg = m.register();
        let rho0 = marginal_guess(&reg, 0.0);
        let s = bb84_states(0.0);
        for i in 0..4 {
            for j in 0..4 {
                let want = 0.25 * s[j].inner(&s[i]).re;
                assert_abs_diff_eq!(rho0.get(i, j).re, want, epsilon = 1e-15);
            }
        }
        let rho1 = marginal_guess(&reg, 1.0);
        assert!(rho1.frobenius_distance(&Herm::diag(&[0.25; 4])) < 1e-15);
        let rho = marginal_guess(&reg, 1e-5);
        assert_abs_diff_eq!(rho.get(0, 2).re, 0.25 * (1.0 - 1e-5) * (PI / 4.0).cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(rho.get(1, 1).re, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn decoy_targets() {
        let m = decoy();
        let d = decoy_detection_operator(&m);
        let e = decoy_phase_error(&m);
        assert_eq!(d.dim(), 36);
        // E_ph is a sub-operator of D
        assert!(d.sub(&e).min_eig().unwrap() >= -1e-12);
        assert_abs_diff_eq!(d.trace(), 2.0 * 2.0 * m.p_z, epsilon = 1e-12);
    }
}
