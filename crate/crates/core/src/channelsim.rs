//! Expected statistics of a lossy, noiseless fiber channel with threshold
//! detectors, used both as the SDP guesses and as the deterministic
//! "observed" values.

use std::f64::consts::FRAC_PI_4;

use crate::protocolkit::{
    encoding_angle, poisson, Basis, Bb84Model, CoefficientSet, DecoyModel, MdiModel, Outcome,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub distance_km: f64,
    pub alpha_db_per_km: f64,
    pub eta_det: f64,
    pub p_dark: f64,
    /// Fraction of the distance on Alice's side of the MDI node.
    pub mdi_split: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self { distance_km: 0.0, alpha_db_per_km: 0.2, eta_det: 0.73, p_dark: 1e-6, mdi_split: 0.5 }
    }
}

impl ChannelParams {
    pub fn at(distance_km: f64, eta_det: f64, p_dark: f64) -> Self {
        Self { distance_km, eta_det, p_dark, ..Self::default() }
    }

    fn loss(&self, km: f64) -> f64 {
        10f64.powf(-self.alpha_db_per_km * km / 10.0)
    }

    /// `eta_det 10^{-alpha d / 10}`.
    pub fn transmittance(&self) -> f64 {
        self.eta_det * self.loss(self.distance_km)
    }

    /// Alice-to-node and Bob-to-node transmittances including detection.
    pub fn mdi_halves(&self) -> (f64, f64) {
        let da = self.distance_km * self.mdi_split;
        (self.eta_det * self.loss(da), self.eta_det * self.loss(self.distance_km - da))
    }
}

/// `[p_⊥, p_0, p_1]` for one polarization photon at `angle` measured in
/// the Z basis, double clicks split evenly.
pub fn single_photon_response(eta: f64, pd: f64, angle: f64) -> [f64; 3] {
    let (c2, s2) = (angle.cos().powi(2), angle.sin().powi(2));
    let q = 1.0 - pd;
    let only_h = eta * c2 * q + (1.0 - eta) * pd * q;
    let only_v = eta * s2 * q + (1.0 - eta) * pd * q;
    let both = eta * pd + (1.0 - eta) * pd * pd;
    let none = (1.0 - eta) * q * q;
    [none, only_h + both / 2.0, only_v + both / 2.0]
}

/// Phase-randomized coherent pulse of mean `mean` (after loss) at `angle`.
pub fn coherent_response(mean: f64, pd: f64, angle: f64) -> [f64; 3] {
    let (c2, s2) = (angle.cos().powi(2), angle.sin().powi(2));
    let q = 1.0 - pd;
    let nh = q * (-mean * c2).exp();
    let nv = q * (-mean * s2).exp();
    [nh * nv, (1.0 - nh) * (nv + 0.5 * (1.0 - nv)), (1.0 - nv) * (nh + 0.5 * (1.0 - nh))]
}

fn basis_angle(angle: f64, basis: Basis) -> f64 {
    match basis {
        Basis::Z => angle,
        Basis::X => angle - FRAC_PI_4,
    }
}

/// `p_{b|i,β}` indexed `[setting][basis][carrier index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub rows: Vec<[[f64; 3]; 2]>,
}

impl ConditionalTable {
    pub fn p(&self, setting: usize, basis: Basis, outcome: Outcome) -> f64 {
        self.rows[setting][basis.index()][outcome.carrier_index()]
    }
}

pub fn bb84_expected_stats(ch: &ChannelParams, m: &Bb84Model) -> ConditionalTable {
    let eta = ch.transmittance();
    let rows = (0..4)
        .map(|a| {
            let t = encoding_angle(m.delta_theta, a);
            [Basis::Z, Basis::X].map(|b| single_photon_response(eta, ch.p_dark, basis_angle(t, b)))
        })
        .collect();
    ConditionalTable { rows }
}

pub fn decoy_expected_stats(ch: &ChannelParams, m: &DecoyModel) -> ConditionalTable {
    let eta = ch.transmittance();
    let rows = m
        .pairs()
        .into_iter()
        .map(|(a, mu)| {
            let t = encoding_angle(m.delta_theta, a);
            let mean = eta * m.intensities[mu];
            [Basis::Z, Basis::X].map(|b| coherent_response(mean, ch.p_dark, basis_angle(t, b)))
        })
        .collect();
    ConditionalTable { rows }
}

/// `p_{Ω|a,b}` indexed `[a + 3b][Ω]` with `Ω` in `(c, d, ∅)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdiTable {
    pub rows: Vec<[f64; 3]>,
}

impl MdiTable {
    pub fn p(&self, setting: usize, omega: Outcome) -> f64 {
        self.rows[setting][omega.carrier_index()]
    }
}

/// Interference of the two coherent pulses on a 50:50 beamsplitter: the
/// constructive and destructive ports receive `(sqrt(ta) x_a ± sqrt(tb) x_b)^2 / 2`.
pub fn mdi_expected_stats(ch: &ChannelParams, m: &MdiModel) -> MdiTable {
    let (ta, tb) = ch.mdi_halves();
    let amp = |s: usize| match s {
        0 => m.mu.sqrt(),
        1 => -m.mu.sqrt(),
        _ => 0.0,
    };
    let q = 1.0 - ch.p_dark;
    let rows = (0..9)
        .map(|i| {
            let (xa, xb) = (ta.sqrt() * amp(i % 3), tb.sqrt() * amp(i / 3));
            let ic = 0.5 * (xa + xb).powi(2);
            let id = 0.5 * (xa - xb).powi(2);
            let (nc, nd) = (q * (-ic).exp(), q * (-id).exp());
            let pc = (1.0 - nc) * nd;
            let pd = (1.0 - nd) * nc;
            [pc, pd, 1.0 - pc - pd]
        })
        .collect();
    MdiTable { rows }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stats {
    Table(ConditionalTable),
    Mdi(MdiTable),
}

impl Stats {
    pub fn p(&self, setting: usize, basis: Option<Basis>, outcome: Outcome) -> f64 {
        match self {
            Stats::Table(t) => t.p(setting, basis.expect("receiver basis"), outcome),
            Stats::Mdi(t) => t.p(setting, outcome),
        }
    }
}

/// `q_l = sum c p_i p_{b|i,β}` for every set.
pub fn q_guesses(stats: &Stats, sets: &[CoefficientSet], probs: &[f64]) -> Vec<f64> {
    sets.iter()
        .map(|s| s.terms.iter().map(|t| t.c * probs[t.setting] * stats.p(t.setting, t.basis, t.outcome)).sum())
        .collect()
}

/// Deterministic expectations of every sum entering the key-length bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedObservables {
    pub q: Vec<f64>,
    /// `E[M_{Q,l}] = N (1 - alpha) q_l`.
    pub m_q: Vec<f64>,
    /// Second target's sets (decoy detection bound).
    pub q_dot: Vec<f64>,
    pub m_q_dot: Vec<f64>,
    pub n_key: f64,
    pub m_key: f64,
    pub s_key: f64,
    pub qber: f64,
    /// Expected phase-error sum of the estimation protocol, when the model
    /// provides one.
    pub m_ph_guess: Option<f64>,
    /// Expected single-photon sifted-key sum (decoy).
    pub m_key1_guess: Option<f64>,
}

pub fn expected_observables(
    stats: &Stats,
    sets: &[CoefficientSet],
    sets_dot: &[CoefficientSet],
    probs: &[f64],
    n: f64,
    alpha: f64,
) -> ExpectedObservables {
    let q = q_guesses(stats, sets, probs);
    let q_dot = q_guesses(stats, sets_dot, probs);
    let scale = n * (1.0 - alpha);
    ExpectedObservables {
        m_q: q.iter().map(|x| x * scale).collect(),
        m_q_dot: q_dot.iter().map(|x| x * scale).collect(),
        q,
        q_dot,
        n_key: 0.0,
        m_key: 0.0,
        s_key: 0.0,
        qber: 0.0,
        m_ph_guess: None,
        m_key1_guess: None,
    }
}

/// Polarization weight and angle of `(sqrt p0 |phi_0> ± sqrt p1 |phi_1>)/sqrt 2`.
fn virtual_x_state(delta_theta: f64, p0: f64, p1: f64, bit: u8) -> (f64, f64) {
    let s = if bit == 0 { 1.0 } else { -1.0 };
    let (t0, t1) = (encoding_angle(delta_theta, 0), encoding_angle(delta_theta, 1));
    let h = (p0.sqrt() * t0.cos() + s * p1.sqrt() * t1.cos()) / 2f64.sqrt();
    let v = (p0.sqrt() * t0.sin() + s * p1.sqrt() * t1.sin()) / 2f64.sqrt();
    (h * h + v * v, v.atan2(h))
}

/// Phase-error probability per round of a single-photon source whose Z
/// states are the reference states, under the Z-key virtual measurement.
pub fn single_photon_phase_error(delta_theta: f64, p0: f64, p1: f64, p_zb: f64, eta: f64, pd: f64) -> f64 {
    let mut e = 0.0;
    for bit in 0..2u8 {
        let (w, ang) = virtual_x_state(delta_theta, p0, p1, bit);
        let r = single_photon_response(eta, pd, basis_angle(ang, Basis::X));
        e += w * r[Outcome::Bit(1 - bit).carrier_index()];
    }
    p_zb * e
}

pub fn bb84_observables(ch: &ChannelParams, m: &Bb84Model, sets: &[CoefficientSet], n: f64, alpha: f64) -> ExpectedObservables {
    let table = bb84_expected_stats(ch, m);
    let pz_b = m.basis_probs[0];
    let mut det = 0.0;
    let mut err = 0.0;
    for a in 0..2 {
        let r = table.rows[a][0];
        det += m.setting_probs[a] * pz_b * (r[1] + r[2]);
        err += m.setting_probs[a] * pz_b * r[2 - a];
    }
    let stats = Stats::Table(table);
    let mut o = expected_observables(&stats, sets, &[], &m.setting_probs, n, alpha);
    o.n_key = n * det;
    o.m_key = (1.0 - alpha) * o.n_key;
    o.s_key = alpha * o.n_key;
    o.qber = if det > 0.0 { err / det } else { 0.0 };
    let e = single_photon_phase_error(m.delta_theta, m.setting_probs[0], m.setting_probs[1], pz_b, ch.transmittance(), ch.p_dark);
    o.m_ph_guess = Some(n * (1.0 - alpha) * e);
    o
}

pub fn mdi_observables(ch: &ChannelParams, m: &MdiModel, sets: &[CoefficientSet], n: f64, alpha: f64) -> ExpectedObservables {
    let table = mdi_expected_stats(ch, m);
    let reg = m.user_probs();
    let mut key = 0.0;
    let mut err = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            for omega in [Outcome::OmegaC, Outcome::OmegaD] {
                let w = reg[a] * reg[b] * table.p(a + 3 * b, omega) * m.p_key(a, b, omega);
                key += w;
                // Bob flips on Ω_d: errors are Ω_c with a≠b and Ω_d with a=b
                if (omega == Outcome::OmegaC) == (a != b) {
                    err += w;
                }
            }
        }
    }
    let stats = Stats::Mdi(table);
    let probs: Vec<f64> = (0..9).map(|i| reg[i % 3] * reg[i / 3]).collect();
    let mut o = expected_observables(&stats, sets, &[], &probs, n, alpha);
    o.n_key = n * key;
    o.m_key = (1.0 - alpha) * o.n_key;
    o.s_key = alpha * o.n_key;
    o.qber = if key > 0.0 { err / key } else { 0.0 };
    o
}

pub fn decoy_observables(
    ch: &ChannelParams,
    m: &DecoyModel,
    sets_ph: &[CoefficientSet],
    sets_det: &[CoefficientSet],
    n: f64,
    alpha: f64,
) -> ExpectedObservables {
    let table = decoy_expected_stats(ch, m);
    let probs = m.setting_probs();
    let pz = m.p_z;
    let (i0, i1) = (m.pair_index(0, 0).expect("pair"), m.pair_index(1, 0).expect("pair"));
    let mut det = 0.0;
    let mut err = 0.0;
    for (a, i) in [(0usize, i0), (1, i1)] {
        let r = table.rows[i][0];
        det += probs[i] * pz * (r[1] + r[2]);
        err += probs[i] * pz * r[2 - a];
    }
    let stats = Stats::Table(table);
    let mut o = expected_observables(&stats, sets_ph, sets_det, &probs, n, alpha);
    o.n_key = n * det;
    o.m_key = (1.0 - alpha) * o.n_key;
    o.s_key = alpha * o.n_key;
    o.qber = if det > 0.0 { err / det } else { 0.0 };
    let eta = ch.transmittance();
    let p1 = poisson(m.intensities[0], 1);
    let e = single_photon_phase_error(m.delta_theta, probs[i0] * p1, probs[i1] * p1, pz, eta, ch.p_dark);
    o.m_ph_guess = Some(n * (1.0 - alpha) * e);
    let click = 1.0 - (1.0 - eta) * (1.0 - ch.p_dark).powi(2);
    o.m_key1_guess = Some(n * (1.0 - alpha) * (probs[i0] + probs[i1]) * p1 * pz * click);
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocolkit::{bb84_coefficient_sets, decoy_gain_sets, decoy_phase_sets};
    use approx::assert_abs_diff_eq;

    fn decoy() -> DecoyModel {
        DecoyModel {
            delta_theta: 0.063,
            p_z: 0.7,
            intensities: vec![0.5, 0.1, 1e-5],
            intensity_probs: vec![0.6, 0.3, 0.1],
            n_cut: 3,
            epsilon: 0.0,
            corr_length: 0,
            vacuum_convention: false,
            drop_cross_terms: false,
            eps_ic: 0.0,
            zeta: 6.0,
        }
    }

    #[test]
    fn responses_limits() {
        assert_eq!(coherent_response(0.0, 0.0, 0.3), [1.0, 0.0, 0.0]);
        assert_eq!(single_photon_response(0.0, 0.0, 0.3), [1.0, 0.0, 0.0]);
        let r = single_photon_response(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(r[2], 0.0);
        for f in [single_photon_response, coherent_response] {
            let r = f(0.37, 1e-3, 0.7);
            assert_abs_diff_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        // |1_Z> at Δθ=0 with no dark counts never fires the 0 detector
        let r = coherent_response(0.4, 0.0, std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(r[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], 1.0 - (-0.4f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn decoy_table_printed_formulas() {
        let ch = ChannelParams::at(30.0, 0.73, 1e-6);
        let m = decoy();
        let t = decoy_expected_stats(&ch, &m);
        let eta = 0.73 * 10f64.powf(-0.6);
        let k = 0.5 * eta;
        let ang = (1.0 + 0.063 / std::f64::consts::PI) * std::f64::consts::FRAC_PI_4;
        let pd: f64 = 1e-6;
        let p_none = (1.0 - pd).powi(2) * (-k).exp();
        let p0 = (1.0 - (1.0 - pd) * (-k * ang.cos().powi(2)).exp())
            * ((1.0 - pd) * (-k * ang.sin().powi(2)).exp() + 0.5 * (1.0 - (1.0 - pd) * (-k * ang.sin().powi(2)).exp()));
        let i = m.pair_index(2, 0).unwrap();
        assert_abs_diff_eq!(t.rows[i][0][0], p_none, epsilon = 1e-15);
        assert_abs_diff_eq!(t.rows[i][0][1], p0, epsilon = 1e-15);
        for row in &t.rows {
            for b in row {
                assert_abs_diff_eq!(b.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn decoy_dark_limit() {
        let ch = ChannelParams::at(0.0, 1.0, 1e-3);
        let mut m = decoy();
        m.intensities = vec![3e-9, 2e-9, 1e-9];
        let t = decoy_expected_stats(&ch, &m);
        let pd: f64 = 1e-3;
        let dark = [(1.0 - pd).powi(2), pd * (1.0 - pd) + pd * pd / 2.0, pd * (1.0 - pd) + pd * pd / 2.0];
        for row in &t.rows {
            for b in row {
                for k in 0..3 {
                    assert_abs_diff_eq!(b[k], dark[k], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn bb84_vs_decoy_single_photon() {
        // post-selected single-photon sector of a weak pulse versus the single-photon model
        let ch = ChannelParams::at(10.0, 0.5, 0.0);
        let m = Bb84Model::new(0.063, 0.5, 0.0, 0).unwrap();
        let single = bb84_expected_stats(&ch, &m);
        let mut d = decoy();
        d.intensities = vec![1e-4, 5e-5, 1e-5];
        let dt = decoy_expected_stats(&ch, &d);
        for a in 0..4 {
            let i = d.pair_index(a, 0).unwrap();
            for b in 0..2 {
                let norm = 1e-4;
                for k in 1..3 {
                    assert_abs_diff_eq!(dt.rows[i][b][k] / norm, single.rows[a][b][k], epsilon = 1e-3);
                }
            }
        }
    }

    #[test]
    fn bb84_key_counts() {
        let ch = ChannelParams::at(50.0, 0.73, 1e-6);
        let m = Bb84Model::new(0.063, 0.8, 0.0, 0).unwrap();
        let sets = bb84_coefficient_sets(&m);
        let o = bb84_observables(&ch, &m, &sets, 1e10, 0.1);
        let t = bb84_expected_stats(&ch, &m);
        let pdet = 0.5 * (t.rows[0][0][1] + t.rows[0][0][2]) + 0.5 * (t.rows[1][0][1] + t.rows[1][0][2]);
        assert_abs_diff_eq!(o.n_key, 1e10 * 0.8 * 0.8 * pdet, epsilon = 1e-3);
        assert_abs_diff_eq!(o.m_key + o.s_key, o.n_key, epsilon = 1e-3);
        let o0 = bb84_observables(&ch, &m, &sets, 1e10, 0.0);
        for (mq, q) in o0.m_q.iter().zip(&o0.q) {
            assert_abs_diff_eq!(*mq, 1e10 * q, epsilon = 1e-6);
        }
    }

    #[test]
    fn ideal_phase_error_vanishes() {
        let e = single_photon_phase_error(0.0, 0.4, 0.4, 0.8, 1.0, 0.0);
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-16);
        assert!(single_photon_phase_error(0.063, 0.4, 0.4, 0.8, 1.0, 0.0) > 0.0);
    }

    #[test]
    fn mdi_interference() {
        let m = MdiModel::new(0.05, 0.5, 0.5, 0.0, 0).unwrap();
        let ch = ChannelParams { p_dark: 0.0, ..ChannelParams::at(40.0, 0.73, 0.0) };
        let t = mdi_expected_stats(&ch, &m);
        assert_eq!(t.p(0, Outcome::OmegaD), 0.0);
        assert_eq!(t.p(4, Outcome::OmegaD), 0.0);
        assert_eq!(t.p(8, Outcome::OmegaEmpty), 1.0);
        let eta = 0.73 * 10f64.powf(-0.4);
        // same phase: both pulses add at the constructive port
        assert_abs_diff_eq!(t.p(0, Outcome::OmegaC), 1.0 - (-2.0 * eta * 0.05f64).exp(), epsilon = 1e-15);
        for r in &t.rows {
            assert_abs_diff_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gain_sets_match_table() {
        let ch = ChannelParams::at(30.0, 0.73, 1e-6);
        let m = decoy();
        let sets = decoy_gain_sets(&m);
        let o = decoy_observables(&ch, &m, &decoy_phase_sets(&m), &sets, 1e11, 0.0);
        let t = decoy_expected_stats(&ch, &m);
        let p = m.setting_probs();
        let gain0: f64 = (0..2)
            .map(|a| {
                let i = m.pair_index(a, 0).unwrap();
                p[i] * (t.rows[i][0][1] + t.rows[i][0][2])
            })
            .sum();
        assert_abs_diff_eq!(o.q_dot[0], gain0, epsilon = 1e-16);
        assert_abs_diff_eq!(o.n_key, 1e11 * m.p_z * gain0, epsilon = 1e-2);
    }
}
