//! Derivative-free search over the free protocol parameters and
//! distance sweeps built on it.
//!
//! The search runs in unit coordinates: every free parameter is mapped to
//! `[0, 1]` through its linear or log transform, candidates are clamped to
//! the box and then projected onto the simplex groups.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::channelsim::ChannelParams;
use crate::finitekey::{
    evaluate_bb84, evaluate_decoy, evaluate_mdi, EvalSettings, Evaluation, FiniteKeyError, KeyRateResult,
};
use crate::protocolkit::{Bb84Model, DecoyModel, MdiModel, ProtocolKind, ProtocolModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("distance grid is empty")]
    EmptyGrid,
    #[error("distances must be finite, nonnegative and strictly increasing")]
    UnsortedGrid,
}

// ---------------------------------------------------------------- space

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub transform: Transform,
    pub initial: f64,
}

impl ParamSpec {
    pub fn new(name: &str, lower: f64, upper: f64, transform: Transform, initial: f64) -> Self {
        Self { name: name.into(), lower, upper, transform, initial }
    }

    fn fixed(&self) -> bool {
        self.lower == self.upper
    }

    fn to_unit(&self, x: f64) -> f64 {
        if self.fixed() {
            return 0.0;
        }
        let u = match self.transform {
            Transform::Linear => (x - self.lower) / (self.upper - self.lower),
            Transform::Log => (x / self.lower).ln() / (self.upper / self.lower).ln(),
        };
        u.clamp(0.0, 1.0)
    }

    fn from_unit(&self, u: f64) -> f64 {
        if self.fixed() {
            return self.lower;
        }
        let u = u.clamp(0.0, 1.0);
        let x = match self.transform {
            Transform::Linear => self.lower + u * (self.upper - self.lower),
            Transform::Log => self.lower * (self.upper / self.lower).powf(u),
        };
        x.clamp(self.lower, self.upper)
    }
}

/// Parameters whose sum may not exceed `max_sum` (the remaining mass goes
/// to an implicit last entry).
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGroup {
    pub indices: Vec<usize>,
    pub max_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    pub params: Vec<ParamSpec>,
    pub groups: Vec<SimplexGroup>,
}

impl ParameterSpace {
    pub fn new(params: Vec<ParamSpec>, groups: Vec<SimplexGroup>) -> Result<Self, OptimError> {
        let s = Self { params, groups };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidSpace(m));
        for (i, p) in self.params.iter().enumerate() {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower <= p.upper) {
                return bad(format!("{}: bounds [{}, {}]", p.name, p.lower, p.upper));
            }
            if p.transform == Transform::Log && p.lower <= 0.0 {
                return bad(format!("{}: log transform needs a positive lower bound", p.name));
            }
            if !(p.initial >= p.lower && p.initial <= p.upper) {
                return bad(format!("{}: initial {} outside bounds", p.name, p.initial));
            }
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return bad(format!("{}: duplicate name", p.name));
            }
        }
        for g in &self.groups {
            if g.indices.iter().any(|&i| i >= self.params.len()) {
                return bad("simplex group index out of range".into());
            }
            let lo: f64 = g.indices.iter().map(|&i| self.params[i].lower).sum();
            if !(lo <= g.max_sum) {
                return bad(format!("simplex group lower bounds sum to {lo} > {}", g.max_sum));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn initial(&self) -> Vec<f64> {
        self.project(&self.params.iter().map(|p| p.initial).collect::<Vec<_>>())
    }

    /// Box clamp followed by a proportional shrink of every overfull group
    /// (mass above the lower bounds is rescaled).
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.params.iter().zip(x).map(|(p, &v)| v.clamp(p.lower, p.upper)).collect();
        for g in &self.groups {
            let sum: f64 = g.indices.iter().map(|&i| y[i]).sum();
            if sum <= g.max_sum {
                continue;
            }
            let lo: f64 = g.indices.iter().map(|&i| self.params[i].lower).sum();
            let f = (g.max_sum - lo) / (sum - lo);
            for &i in &g.indices {
                let l = self.params[i].lower;
                y[i] = l + (y[i] - l) * f;
            }
        }
        y
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && self.params.iter().zip(x).all(|(p, &v)| v >= p.lower && v <= p.upper)
            && self.groups.iter().all(|g| g.indices.iter().map(|&i| x[i]).sum::<f64>() <= g.max_sum * (1.0 + 1e-12))
    }

    fn free(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.params[i].fixed()).collect()
    }

    fn to_unit(&self, x: &[f64], free: &[usize]) -> Vec<f64> {
        free.iter().map(|&i| self.params[i].to_unit(x[i])).collect()
    }

    fn from_unit(&self, u: &[f64], free: &[usize], base: &[f64]) -> Vec<f64> {
        let mut x = base.to_vec();
        for (k, &i) in free.iter().enumerate() {
            x[i] = self.params[i].from_unit(u[k]);
        }
        self.project(&x)
    }

    /// Replaces the bounds of `name`; `lower == upper` fixes it.
    pub fn set_bounds(&mut self, name: &str, lower: f64, upper: f64) -> Result<(), OptimError> {
        let i = self.index(name).ok_or_else(|| OptimError::InvalidSpace(format!("unknown parameter {name}")))?;
        let p = &mut self.params[i];
        p.lower = lower;
        p.upper = upper;
        p.initial = p.initial.clamp(lower, upper);
        self.check()
    }

    pub fn set_initial(&mut self, name: &str, value: f64) -> Result<(), OptimError> {
        let i = self.index(name).ok_or_else(|| OptimError::InvalidSpace(format!("unknown parameter {name}")))?;
        self.params[i].initial = value;
        self.check()
    }

    pub fn bb84() -> Self {
        Self {
            params: vec![
                ParamSpec::new("p_z", 0.5, 0.995, Transform::Linear, 0.95),
                ParamSpec::new("alpha", 0.01, 0.95, Transform::Linear, 0.3),
                ParamSpec::new("gamma_w", 1.0, 1e4, Transform::Log, 1000.0),
            ],
            groups: Vec::new(),
        }
    }

    pub fn mdi() -> Self {
        Self {
            params: vec![
                ParamSpec::new("p_z", 0.3, 0.99, Transform::Linear, 0.9),
                ParamSpec::new("p_key_z", 0.5, 0.99, Transform::Linear, 0.9),
                ParamSpec::new("alpha", 0.01, 0.95, Transform::Linear, 0.1),
                ParamSpec::new("mu", 0.01, 1.0, Transform::Log, 0.1),
                ParamSpec::new("gamma_w", 1.0, 1e4, Transform::Log, 10.0),
            ],
            groups: Vec::new(),
        }
    }

    /// Three intensities with the weakest one fixed by the model.
    pub fn decoy() -> Self {
        Self {
            params: vec![
                ParamSpec::new("p_z", 0.5, 0.99, Transform::Linear, 0.97),
                ParamSpec::new("alpha", 0.01, 0.95, Transform::Linear, 0.1),
                ParamSpec::new("gamma_w", 1.0, 1e4, Transform::Log, 80.0),
                ParamSpec::new("mu0", 0.15, 1.0, Transform::Linear, 0.5),
                ParamSpec::new("mu1", 0.005, 0.15, Transform::Log, 0.075),
                ParamSpec::new("p_mu0", 0.05, 0.9, Transform::Linear, 0.75),
                ParamSpec::new("p_mu1", 0.05, 0.9, Transform::Linear, 0.17),
            ],
            groups: vec![SimplexGroup { indices: vec![5, 6], max_sum: 0.95 }],
        }
    }

    pub fn default_for(kind: ProtocolKind) -> Self {
        match kind {
            ProtocolKind::Bb84 => Self::bb84(),
            ProtocolKind::Mdi => Self::mdi(),
            ProtocolKind::Decoy => Self::decoy(),
        }
    }
}

// ------------------------------------------------------------ optimizer

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    NelderMead,
    PatternSearch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub strategy: Strategy,
    pub max_evals: usize,
    pub restarts: usize,
    /// Initial simplex edge / poll step in unit coordinates.
    pub initial_step: f64,
    /// Stall threshold on the simplex diameter / poll step.
    pub tol: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { strategy: Strategy::NelderMead, max_evals: 60, restarts: 2, initial_step: 0.15, tol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub restarts_used: usize,
    /// Every evaluated point with its objective.
    pub probes: Vec<(Vec<f64>, f64)>,
}

struct Tracker<'a, F> {
    space: &'a ParameterSpace,
    free: Vec<usize>,
    base: Vec<f64>,
    f: F,
    probes: Vec<(Vec<f64>, f64)>,
    best: (Vec<f64>, f64),
    max_evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Tracker<'_, F> {
    fn exhausted(&self) -> bool {
        self.probes.len() >= self.max_evals
    }

    /// Evaluates at unit point `u`; returns the projected unit point and value.
    fn eval(&mut self, u: &[f64]) -> (Vec<f64>, f64) {
        let x = self.space.from_unit(u, &self.free, &self.base);
        let u = self.space.to_unit(&x, &self.free);
        let v = (self.f)(&x);
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if v > self.best.1 {
            self.best = (x.clone(), v);
        }
        self.probes.push((x, v));
        (u, v)
    }
}

/// Maximizes `f` over `space` starting from `x0` (projected first).
pub fn maximize<F: FnMut(&[f64]) -> f64>(space: &ParameterSpace, x0: &[f64], f: F, cfg: &OptimConfig) -> OptimOutcome {
    let base = space.project(x0);
    let free = space.free();
    let mut t = Tracker {
        space,
        free,
        base,
        f,
        probes: Vec::new(),
        best: (Vec::new(), f64::NEG_INFINITY),
        max_evals: cfg.max_evals.max(1),
    };
    // the start point is evaluated as given, not through the unit map
    let u0 = space.to_unit(&t.base, &t.free);
    let v0 = (t.f)(&t.base);
    let v0 = if v0.is_nan() { f64::NEG_INFINITY } else { v0 };
    t.best = (t.base.clone(), v0);
    t.probes.push((t.base.clone(), v0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let restarts = if t.free.is_empty() {
        0
    } else {
        match cfg.strategy {
            Strategy::NelderMead => nelder_mead(&mut t, u0, v0, cfg, &mut rng),
            Strategy::PatternSearch => pattern_search(&mut t, u0, v0, cfg),
        }
    };
    OptimOutcome { x: t.best.0, value: t.best.1, evals: t.probes.len(), restarts_used: restarts, probes: t.probes }
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
}

fn diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let b = &simplex[0].0;
    simplex[1..]
        .iter()
        .map(|(u, _)| u.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Builds a simplex around `u` with edge `step` along randomly signed axes.
fn start_simplex<F: FnMut(&[f64]) -> f64>(
    t: &mut Tracker<F>,
    u: Vec<f64>,
    v: f64,
    step: f64,
    rng: &mut ChaCha8Rng,
    randomize: bool,
) -> Vec<(Vec<f64>, f64)> {
    let mut s = vec![(u.clone(), v)];
    for k in 0..u.len() {
        if t.exhausted() {
            break;
        }
        let mut p = u.clone();
        let up = if randomize { rng.gen_bool(0.5) } else { true };
        let dir = if (up && p[k] + step <= 1.0) || p[k] - step < 0.0 { 1.0 } else { -1.0 };
        p[k] = (p[k] + dir * step).clamp(0.0, 1.0);
        s.push(t.eval(&p));
    }
    s
}

fn sort_desc(s: &mut [(Vec<f64>, f64)]) {
    // stable: ties keep earlier vertices (the start point stays first)
    s.sort_by(|a, b| b.1.total_cmp(&a.1));
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    t: &mut Tracker<F>,
    u0: Vec<f64>,
    v0: f64,
    cfg: &OptimConfig,
    rng: &mut ChaCha8Rng,
) -> usize {
    let n = u0.len();
    let mut step = cfg.initial_step;
    let mut s = start_simplex(t, u0, v0, step, rng, false);
    let mut restarts = 0;
    while !t.exhausted() {
        sort_desc(&mut s);
        let spread = s[0].1 - s[s.len() - 1].1;
        let flat = s.len() <= n || spread.is_nan() || spread <= 1e-12 * s[0].1.abs().max(1e-300);
        if diameter(&s) < cfg.tol || flat {
            if restarts >= cfg.restarts {
                break;
            }
            restarts += 1;
            step *= 0.5;
            let (bu, bv) = s[0].clone();
            s = start_simplex(t, bu, bv, step.max(cfg.tol * 10.0), rng, true);
            continue;
        }
        let worst = s[n].clone();
        let mut c = vec![0.0; n];
        for (u, _) in &s[..n] {
            for (ci, ui) in c.iter_mut().zip(u) {
                *ci += ui / n as f64;
            }
        }
        let r = t.eval(&lerp(&c, &worst.0, -1.0));
        if r.1 > s[0].1 {
            let replace = if t.exhausted() {
                r
            } else {
                let e = t.eval(&lerp(&c, &worst.0, -2.0));
                if e.1 > r.1 {
                    e
                } else {
                    r
                }
            };
            s[n] = replace;
            continue;
        }
        if r.1 > s[n - 1].1 {
            s[n] = r;
            continue;
        }
        if t.exhausted() {
            break;
        }
        let k = if r.1 > worst.1 { t.eval(&lerp(&c, &r.0, 0.5)) } else { t.eval(&lerp(&c, &worst.0, 0.5)) };
        if k.1 > r.1.max(worst.1) {
            s[n] = k;
            continue;
        }
        let b = s[0].0.clone();
        for v in s.iter_mut().skip(1) {
            if t.exhausted() {
                break;
            }
            *v = t.eval(&lerp(&b, &v.0, 0.5));
        }
    }
    restarts
}

fn pattern_search<F: FnMut(&[f64]) -> f64>(t: &mut Tracker<F>, u0: Vec<f64>, v0: f64, cfg: &OptimConfig) -> usize {
    let (mut u, mut v) = (u0, v0);
    let mut step = cfg.initial_step;
    while step >= cfg.tol && !t.exhausted() {
        let mut moved = false;
        'poll: for k in 0..u.len() {
            for dir in [1.0, -1.0] {
                if t.exhausted() {
                    break 'poll;
                }
                let mut p = u.clone();
                p[k] = (p[k] + dir * step).clamp(0.0, 1.0);
                if p[k] == u[k] {
                    continue;
                }
                let (pu, pv) = t.eval(&p);
                if pv > v {
                    (u, v) = (pu, pv);
                    moved = true;
                    break 'poll;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    0
}

// ---------------------------------------------------------- key points

/// Everything needed to evaluate a protocol at one distance except the
/// free parameters.
#[derive(Debug, Clone)]
pub struct PointSpec {
    pub model: ProtocolModel,
    /// Channel template; `distance_km` is overwritten per point.
    pub channel: ChannelParams,
    pub settings: EvalSettings,
    pub space: ParameterSpace,
}

fn unknown(name: &str) -> FiniteKeyError {
    FiniteKeyError::InvalidInput(format!("parameter {name} does not apply to this protocol"))
}

fn set_bb84(m: &mut Bb84Model, s: &mut EvalSettings, name: &str, v: f64) -> Result<(), FiniteKeyError> {
    match name {
        "p_z" => {
            *m = Bb84Model::new(m.delta_theta, v, m.epsilon, m.corr_length)?;
        }
        "alpha" => s.alpha = v,
        "gamma_w" => s.gamma_w = v,
        _ => return Err(unknown(name)),
    }
    Ok(())
}

fn set_mdi(m: &mut MdiModel, s: &mut EvalSettings, name: &str, v: f64) -> Result<(), FiniteKeyError> {
    match name {
        "p_z" => m.p_z = v,
        "p_key_z" => m.p_key_z = v,
        "mu" => m.mu = v,
        "alpha" => s.alpha = v,
        "gamma_w" => s.gamma_w = v,
        _ => return Err(unknown(name)),
    }
    Ok(())
}

fn indexed(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix).and_then(|r| r.parse().ok())
}

fn set_decoy(m: &mut DecoyModel, s: &mut EvalSettings, name: &str, v: f64) -> Result<(), FiniteKeyError> {
    let k = m.intensities.len();
    match name {
        "p_z" => m.p_z = v,
        "alpha" => s.alpha = v,
        "gamma_w" => s.gamma_w = v,
        _ => {
            if let Some(i) = indexed(name, "p_mu").filter(|&i| i + 1 < k) {
                m.intensity_probs[i] = v;
                // the last intensity takes the remaining mass
                m.intensity_probs[k - 1] = 1.0 - m.intensity_probs[..k - 1].iter().sum::<f64>();
            } else if let Some(i) = indexed(name, "mu").filter(|&i| i < k) {
                m.intensities[i] = v;
            } else {
                return Err(unknown(name));
            }
        }
    }
    Ok(())
}

impl PointSpec {
    pub fn kind(&self) -> ProtocolKind {
        self.model.kind()
    }

    /// Model and settings with the free parameters set to `x`.
    pub fn apply(&self, x: &[f64]) -> Result<(ProtocolModel, EvalSettings), FiniteKeyError> {
        if x.len() != self.space.dim() {
            return Err(FiniteKeyError::InvalidInput(format!("{} values for {} parameters", x.len(), self.space.dim())));
        }
        let mut model = self.model.clone();
        let mut s = self.settings.clone();
        for (p, &v) in self.space.params.iter().zip(x) {
            match &mut model {
                ProtocolModel::Bb84(m) => set_bb84(m, &mut s, &p.name, v)?,
                ProtocolModel::Mdi(m) => set_mdi(m, &mut s, &p.name, v)?,
                ProtocolModel::Decoy(m) => set_decoy(m, &mut s, &p.name, v)?,
            }
        }
        Ok((model, s))
    }

    pub fn evaluate(&self, distance_km: f64, x: &[f64]) -> Result<Evaluation, FiniteKeyError> {
        let (model, s) = self.apply(x)?;
        let ch = ChannelParams { distance_km, ..self.channel };
        match &model {
            ProtocolModel::Bb84(m) => evaluate_bb84(&ch, m, &s),
            ProtocolModel::Mdi(m) => evaluate_mdi(&ch, m, &s),
            ProtocolModel::Decoy(m) => evaluate_decoy(&ch, m, &s),
        }
    }

    /// Checks the free-parameter names against the protocol.
    pub fn check(&self) -> Result<(), FiniteKeyError> {
        self.space.check().map_err(|e| FiniteKeyError::InvalidInput(e.to_string()))?;
        self.apply(&self.space.initial()).map(|_| ())
    }
}

/// Key rate when positive, otherwise the (negative) unclamped rate so the
/// search can climb out of zero-key regions.
pub fn objective_of(r: &KeyRateResult) -> f64 {
    if r.rate > 0.0 {
        r.rate
    } else if r.l_raw.is_finite() && r.n > 0.0 {
        (r.l_raw / r.n).min(0.0)
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub distance_km: f64,
    pub x: Vec<f64>,
    pub result: KeyRateResult,
    pub evals: usize,
    pub restarts: usize,
    pub runtime_ms: f64,
    /// Last evaluation error when no point could be evaluated.
    pub error: Option<String>,
    /// Probed points, kept only when the best rate is zero.
    pub probes: Vec<(Vec<f64>, f64)>,
}

impl PointResult {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.runtime_ms = other.runtime_ms;
        a == *other
    }
}

/// Optimizes the key rate at one distance, warm-started at `x0` (or the
/// space's initial point).
pub fn optimize_point(distance_km: f64, spec: &PointSpec, x0: Option<&[f64]>, cfg: &OptimConfig) -> PointResult {
    let start = Instant::now();
    let x0 = x0.map(|x| x.to_vec()).unwrap_or_else(|| spec.space.initial());
    let mut best: Option<(f64, KeyRateResult)> = None;
    let mut last_err: Option<String> = None;
    let out = maximize(
        &spec.space,
        &x0,
        |x| match spec.evaluate(distance_km, x) {
            Ok(ev) => {
                let v = objective_of(&ev.result);
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, ev.result));
                }
                v
            }
            Err(e) => {
                last_err = Some(e.to_string());
                f64::NEG_INFINITY
            }
        },
        cfg,
    );
    let kind = spec.kind();
    let (result, error) = match best {
        Some((_, r)) => (r, None),
        None => {
            let msg = last_err.unwrap_or_else(|| "no evaluation".into());
            (KeyRateResult::zero(kind, spec.settings.n, spec.settings.budget, msg.clone()), Some(msg))
        }
    };
    let probes = if result.rate > 0.0 { Vec::new() } else { out.probes };
    PointResult {
        distance_km,
        x: out.x,
        result,
        evals: out.evals,
        restarts: out.restarts_used,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        error,
        probes,
    }
}

// --------------------------------------------------------------- sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub optim: OptimConfig,
    /// Number of contiguous distance chunks, one per worker.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::default(), threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<PointResult>,
    pub seed: u64,
    pub total_evals: usize,
    pub wall_ms: f64,
}

impl SweepResult {
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.total_evals == other.total_evals
            && self.points.len() == other.points.len()
            && self.points.iter().zip(&other.points).all(|(a, b)| a.same_outcome(b))
    }

    /// Largest distance with a positive rate.
    pub fn last_positive(&self) -> Option<f64> {
        self.points.iter().rev().find(|p| p.result.rate > 0.0).map(|p| p.distance_km)
    }
}

fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Optimizes every distance. The grid is split into `threads` contiguous
/// chunks evaluated concurrently; each chunk warm-starts point to point,
/// so results depend on the chunk count but not on scheduling.
pub fn sweep(distances: &[f64], spec: &PointSpec, cfg: &SweepConfig) -> Result<SweepResult, OptimError> {
    if distances.is_empty() {
        return Err(OptimError::EmptyGrid);
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || distances.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OptimError::UnsortedGrid);
    }
    spec.space.check()?;
    let start = Instant::now();
    let n_chunks = cfg.threads.clamp(1, distances.len());
    let size = distances.len().div_ceil(n_chunks);
    let chunks: Vec<(usize, &[f64])> = distances.chunks(size).enumerate().map(|(k, c)| (k * size, c)).collect();
    let run = |(offset, chunk): &(usize, &[f64])| {
        let mut out = Vec::with_capacity(chunk.len());
        let mut warm: Option<Vec<f64>> = None;
        for (j, &d) in chunk.iter().enumerate() {
            let oc = OptimConfig { seed: point_seed(cfg.optim.seed, offset + j), ..cfg.optim.clone() };
            let p = optimize_point(d, spec, warm.as_deref(), &oc);
            warm = Some(p.x.clone());
            out.push(p);
        }
        out
    };
    let nested: Vec<Vec<PointResult>> = if n_chunks == 1 {
        chunks.iter().map(run).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(n_chunks).build() {
            Ok(pool) => pool.install(|| chunks.par_iter().map(run).collect()),
            Err(_) => chunks.iter().map(run).collect(),
        }
    };
    let points: Vec<PointResult> = nested.into_iter().flatten().collect();
    let total_evals = points.iter().map(|p| p.evals).sum();
    Ok(SweepResult { points, seed: cfg.optim.seed, total_evals, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
}
