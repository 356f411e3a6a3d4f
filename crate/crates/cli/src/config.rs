//! Run configuration.
//!
//! The primary format is flat text with one `section.key = value` per line
//! and `#` comments; values are JSON literals, and bare words are read as
//! strings. A file whose first non-blank character is `{` is read as JSON.
//! Unknown keys are rejected in both formats.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use qkd_core::channelsim::ChannelParams;
use qkd_core::finitekey::{DetectorTolerances, EpsilonBudget, EvalSettings};
use qkd_core::optimsweep::{OptimConfig, ParameterSpace, PointSpec, Strategy, SweepConfig};
use qkd_core::protocolkit::{Bb84Model, DecoyModel, MdiModel, ProtocolKind, ProtocolModel};
use qkd_core::validation::ValidationConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn general(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Bb84,
    Mdi,
    Decoy,
}

impl Kind {
    pub fn protocol(self) -> ProtocolKind {
        match self {
            Kind::Bb84 => ProtocolKind::Bb84,
            Kind::Mdi => ProtocolKind::Mdi,
            Kind::Decoy => ProtocolKind::Decoy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub kind: Kind,
    pub delta_theta: f64,
    /// Source correlation parameter (per user for MDI).
    pub epsilon: f64,
    /// Defaults to 2 for BB84 and decoy, 0 for MDI.
    pub corr_length: Option<usize>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self { kind: Kind::Bb84, delta_theta: 0.063, epsilon: 1e-5, corr_length: None }
    }
}

/// Decoy-only model fields. The optimized intensities and probabilities
/// come from the parameter space; these are the remaining entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoySection {
    pub intensities: Vec<f64>,
    pub intensity_probs: Vec<f64>,
    pub n_cut: usize,
    pub vacuum_convention: bool,
    pub drop_cross_terms: bool,
    pub eps_ic: f64,
    pub zeta: f64,
}

impl Default for DecoySection {
    fn default() -> Self {
        Self {
            intensities: vec![0.4, 0.1, 1e-5],
            intensity_probs: vec![0.6, 0.3, 0.1],
            n_cut: 3,
            vacuum_convention: true,
            drop_cross_terms: false,
            eps_ic: 0.03,
            zeta: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub alpha_db_per_km: f64,
    pub eta_det: f64,
    /// Defaults to 1e-6, or 1e-8 for MDI.
    pub p_dark: Option<f64>,
    pub mdi_split: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelParams::default();
        Self { alpha_db_per_km: c.alpha_db_per_km, eta_det: c.eta_det, p_dark: None, mdi_split: c.mdi_split }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// Detector-mismatch lift; defaults to on for BB84 and decoy.
    pub enabled: Option<bool>,
    pub delta_eta: f64,
    pub delta_dc: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { enabled: None, delta_eta: 0.05, delta_dc: 0.05 }
    }
}

/// Preset from `eps_sec`/`eps_ev`, then per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub eps_sec: f64,
    pub eps_ev: f64,
    pub eps_pa: Option<f64>,
    pub eps_pro: Option<f64>,
    pub eps_pk: Option<f64>,
    pub eps_pb: Option<f64>,
    pub eps_ps: Option<f64>,
    pub eps_dep1: Option<f64>,
    pub eps_dep2: Option<f64>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            eps_sec: 1e-10,
            eps_ev: 1e-10,
            eps_pa: None,
            eps_pro: None,
            eps_pk: None,
            eps_pb: None,
            eps_ps: None,
            eps_dep1: None,
            eps_dep2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Defaults to 1e10, or 1e11 for decoy.
    pub n: Option<f64>,
    pub f_ec: f64,
    pub renormalize: bool,
    pub seed: u64,
    pub threads: usize,
    pub distance_km: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { n: None, f_ec: 1.16, renormalize: false, seed: 20240601, threads: 1, distance_km: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    NelderMead,
    PatternSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// When off, every point is evaluated once at the initial values.
    pub enabled: bool,
    pub strategy: StrategyName,
    pub max_evals: usize,
    pub restarts: usize,
    pub initial_step: f64,
    pub tol: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            enabled: true,
            strategy: StrategyName::NelderMead,
            max_evals: o.max_evals,
            restarts: o.restarts,
            initial_step: o.initial_step,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

/// Distance grid: `distances` when given, else `start..=stop` by `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub distances: Option<Vec<f64>>,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { distances: None, start: 0.0, stop: 160.0, step: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    pub n: u64,
    pub trials: usize,
    pub epsilon: f64,
    pub theorem1_trials: usize,
    pub theorem1_n: f64,
    pub theorem1_eps_pb: f64,
    pub theorem1_side: f64,
    pub min_trials: usize,
    pub min_expected_violations: f64,
    /// Stored certificate records to re-verify.
    pub certificates: Vec<String>,
    /// Export, re-verify and tamper-check the certificates of this run.
    pub self_check: bool,
}

impl Default for ValidateSection {
    fn default() -> Self {
        let v = ValidationConfig::default();
        Self {
            n: v.n,
            trials: v.trials,
            epsilon: v.epsilon,
            theorem1_trials: v.theorem1_trials,
            theorem1_n: v.theorem1_n,
            theorem1_eps_pb: v.theorem1_eps_pb,
            theorem1_side: v.theorem1_side,
            min_trials: v.min_trials,
            min_expected_violations: v.min_expected_violations,
            certificates: Vec::new(),
            self_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Output path; `--out` takes precedence.
    pub path: Option<String>,
    /// Write measured `runtime_ms`; when off the column is 0 and the CSV
    /// is bit-stable across runs.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { path: None, timing: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub protocol: ProtocolSection,
    pub decoy: DecoySection,
    pub channel: ChannelSection,
    pub detector: DetectorSection,
    pub budget: BudgetSection,
    pub run: RunSection,
    pub optim: OptimSection,
    pub space: BTreeMap<String, SpaceOverride>,
    pub sweep: SweepSection,
    pub validate: ValidateSection,
    pub output: OutputSection,
}

// ------------------------------------------------------------- reading

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn literal(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn known_key(schema: &Value, segments: &[&str]) -> bool {
    if segments.first() == Some(&"space") {
        return segments.len() == 3;
    }
    let mut node = schema;
    for s in segments {
        match node.get(s) {
            Some(child) => node = child,
            None => return false,
        }
    }
    !node.is_object()
}

fn insert(root: &mut Value, segments: &[&str], v: Value) {
    let mut node = root;
    for s in &segments[..segments.len() - 1] {
        node = node
            .as_object_mut()
            .expect("intermediate nodes are objects")
            .entry(s.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut().expect("intermediate nodes are objects").insert(segments[segments.len() - 1].to_string(), v);
}

fn from_value(v: Value) -> Result<RunConfig, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// Parses either format; see the module docs.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text)
            .map_err(|e| ConfigError { line: Some(e.line()), message: e.to_string() });
    }
    let schema = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut root = Value::Object(Map::new());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::at(no, "expected `key = value`"))?;
        let key = k.trim();
        let segments: Vec<&str> = key.split('.').collect();
        if segments.iter().any(|s| s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')) {
            return Err(ConfigError::at(no, format!("malformed key `{key}`")));
        }
        if !known_key(&schema, &segments) {
            return Err(ConfigError::at(no, format!("unknown key `{key}`")));
        }
        if let Some(prev) = seen.insert(key.to_string(), no) {
            return Err(ConfigError::at(no, format!("`{key}` already set on line {prev}")));
        }
        let value = literal(v.trim());
        let mut single = Value::Object(Map::new());
        insert(&mut single, &segments, value.clone());
        from_value(single).map_err(|e| ConfigError::at(no, format!("`{key}`: {e}")))?;
        insert(&mut root, &segments, value);
    }
    from_value(root).map_err(ConfigError::general)
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Null => {}
        leaf => {
            out.push_str(&format!("{prefix} = {leaf}\n"));
        }
    }
}

/// Canonical dotted-key serialization; unset optional fields are omitted.
pub fn to_dotted(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut out = String::new();
    flatten("", &v, &mut out);
    out
}

// ----------------------------------------------------------- resolution

/// Everything a command needs, validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: PointSpec,
    pub optim: OptimConfig,
    pub sweep: SweepConfig,
    pub distance_km: f64,
    pub grid: Vec<f64>,
    pub validation: ValidationConfig,
    pub certificates: Vec<String>,
    pub self_check: bool,
    pub out: Option<String>,
    pub timing: bool,
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError::general(msg)
}

fn grid(s: &SweepSection) -> Result<Vec<f64>, ConfigError> {
    let g = match &s.distances {
        Some(d) => d.clone(),
        None => {
            if !(s.step > 0.0 && s.start.is_finite() && s.stop.is_finite()) {
                return Err(bad("sweep: step must be positive and the range finite"));
            }
            if s.stop < s.start {
                Vec::new()
            } else {
                let n = ((s.stop - s.start) / s.step + 1e-9).floor() as usize + 1;
                (0..n).map(|i| s.start + i as f64 * s.step).collect()
            }
        }
    };
    if g.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || g.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("sweep: distances must be finite, nonnegative and strictly increasing"));
    }
    Ok(g)
}

fn budget(b: &BudgetSection, kind: ProtocolKind) -> EpsilonBudget {
    let mut e = EpsilonBudget::preset(kind, b.eps_sec, b.eps_ev);
    let fields = [
        (b.eps_pa, &mut e.eps_pa),
        (b.eps_pro, &mut e.eps_pro),
        (b.eps_pk, &mut e.eps_pk),
        (b.eps_pb, &mut e.eps_pb),
        (b.eps_ps, &mut e.eps_ps),
        (b.eps_dep1, &mut e.eps_dep1),
        (b.eps_dep2, &mut e.eps_dep2),
    ];
    for (v, slot) in fields {
        if let Some(v) = v {
            *slot = v;
        }
    }
    e
}

fn space(cfg: &RunConfig, kind: ProtocolKind) -> Result<ParameterSpace, ConfigError> {
    let mut sp = ParameterSpace::default_for(kind);
    for (name, o) in &cfg.space {
        let i = sp.index(name).ok_or_else(|| {
            bad(format!("space.{name}: not a parameter of {kind:?} (expected one of {})", sp.names().join(", ")))
        })?;
        let p = &mut sp.params[i];
        p.lower = o.lower.unwrap_or(p.lower);
        p.upper = o.upper.unwrap_or(p.upper);
        p.initial = o.initial.unwrap_or_else(|| p.initial.clamp(p.lower, p.upper));
    }
    sp.check().map_err(|e| bad(format!("space: {e}")))?;
    Ok(sp)
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let kind = self.protocol.kind.protocol();
        let sp = space(self, kind)?;
        let init = |name: &str| sp.index(name).map(|i| sp.params[i].initial);
        let p = &self.protocol;
        let model = match kind {
            ProtocolKind::Bb84 => ProtocolModel::Bb84(
                Bb84Model::new(p.delta_theta, init("p_z").unwrap_or(0.9), p.epsilon, p.corr_length.unwrap_or(2))
                    .map_err(|e| bad(format!("protocol: {e}")))?,
            ),
            ProtocolKind::Mdi => ProtocolModel::Mdi(
                MdiModel::new(
                    init("mu").unwrap_or(0.1),
                    init("p_z").unwrap_or(0.9),
                    init("p_key_z").unwrap_or(0.9),
                    p.epsilon,
                    p.corr_length.unwrap_or(0),
                )
                .map_err(|e| bad(format!("protocol: {e}")))?,
            ),
            ProtocolKind::Decoy => {
                let d = &self.decoy;
                let m = DecoyModel {
                    delta_theta: p.delta_theta,
                    p_z: init("p_z").unwrap_or(0.9),
                    intensities: d.intensities.clone(),
                    intensity_probs: d.intensity_probs.clone(),
                    n_cut: d.n_cut,
                    epsilon: p.epsilon,
                    corr_length: p.corr_length.unwrap_or(2),
                    vacuum_convention: d.vacuum_convention,
                    drop_cross_terms: d.drop_cross_terms,
                    eps_ic: d.eps_ic,
                    zeta: d.zeta,
                };
                m.validate().map_err(|e| bad(format!("decoy: {e}")))?;
                ProtocolModel::Decoy(m)
            }
        };

        let c = &self.channel;
        let p_dark = c.p_dark.unwrap_or(if kind == ProtocolKind::Mdi { 1e-8 } else { 1e-6 });
        let channel = ChannelParams {
            distance_km: 0.0,
            alpha_db_per_km: c.alpha_db_per_km,
            eta_det: c.eta_det,
            p_dark,
            mdi_split: c.mdi_split,
        };
        if !(c.alpha_db_per_km >= 0.0 && c.eta_det > 0.0 && c.eta_det <= 1.0 && (0.0..1.0).contains(&p_dark)) {
            return Err(bad("channel: need alpha_db_per_km >= 0, eta_det in (0, 1], p_dark in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&c.mdi_split) {
            return Err(bad("channel: mdi_split outside [0, 1]"));
        }

        let n = self.run.n.unwrap_or(if kind == ProtocolKind::Decoy { 1e11 } else { 1e10 });
        let mut settings = EvalSettings::new(kind, n, init("alpha").unwrap_or(0.3), init("gamma_w").unwrap_or(100.0));
        settings.budget = budget(&self.budget, kind);
        settings.f_ec = self.run.f_ec;
        settings.renormalize = self.run.renormalize;
        let det = &self.detector;
        if det.enabled.unwrap_or(kind != ProtocolKind::Mdi) {
            let t = DetectorTolerances { eta_det: c.eta_det, d_det: p_dark, delta_eta: det.delta_eta, delta_dc: det.delta_dc };
            t.validate().map_err(|e| bad(format!("detector: {e}")))?;
            settings.detector = Some(t);
        }
        if !(n >= 1.0 && n.is_finite()) {
            return Err(bad(format!("run.n = {n}")));
        }
        if !(self.run.f_ec >= 1.0 && self.run.f_ec.is_finite()) {
            return Err(bad(format!("run.f_ec = {} (must be >= 1)", self.run.f_ec)));
        }
        settings.budget.validate(kind, settings.detector.is_some()).map_err(|e| bad(format!("budget: {e}")))?;

        let spec = PointSpec { model, channel, settings, space: sp };
        spec.check().map_err(|e| bad(format!("model: {e}")))?;

        let o = &self.optim;
        if o.max_evals == 0 || !(o.initial_step > 0.0 && o.initial_step <= 1.0) || !(o.tol > 0.0) {
            return Err(bad("optim: need max_evals >= 1, initial_step in (0, 1], tol > 0"));
        }
        let optim = if o.enabled {
            OptimConfig {
                strategy: match o.strategy {
                    StrategyName::NelderMead => Strategy::NelderMead,
                    StrategyName::PatternSearch => Strategy::PatternSearch,
                },
                max_evals: o.max_evals,
                restarts: o.restarts,
                initial_step: o.initial_step,
                tol: o.tol,
                seed: self.run.seed,
            }
        } else {
            OptimConfig { max_evals: 1, restarts: 0, seed: self.run.seed, ..OptimConfig::default() }
        };
        if self.run.threads == 0 {
            return Err(bad("run.threads must be at least 1"));
        }
        if !(self.run.distance_km.is_finite() && self.run.distance_km >= 0.0) {
            return Err(bad(format!("run.distance_km = {}", self.run.distance_km)));
        }

        let v = &self.validate;
        if !(v.epsilon > 0.0 && v.epsilon < 1.0) || v.n == 0 {
            return Err(bad("validate: need epsilon in (0, 1) and n >= 1"));
        }
        let validation = ValidationConfig {
            n: v.n,
            trials: v.trials,
            epsilon: v.epsilon,
            seed: self.run.seed,
            theorem1_trials: v.theorem1_trials,
            theorem1_n: v.theorem1_n,
            theorem1_eps_pb: v.theorem1_eps_pb,
            theorem1_side: v.theorem1_side,
            min_trials: v.min_trials,
            min_expected_violations: v.min_expected_violations,
        };

        Ok(Resolved {
            spec,
            sweep: SweepConfig { optim: optim.clone(), threads: self.run.threads },
            optim,
            distance_km: self.run.distance_km,
            grid: grid(&self.sweep)?,
            validation,
            certificates: v.certificates.clone(),
            self_check: v.self_check,
            out: self.output.path.clone(),
            timing: self.output.timing,
        })
    }
}
