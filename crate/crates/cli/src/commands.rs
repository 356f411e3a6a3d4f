//! Subcommand implementations. Each returns an exit status; errors are
//! mapped to status 1 by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};

use qkd_core::finitekey::KeyRateResult;
use qkd_core::optimsweep::{optimize_point, sweep, PointResult, PointSpec};
use qkd_core::protocolkit::ProtocolKind;
use qkd_core::sdpcore::record::{export_certificate, problem_hash, verify_record};
use qkd_core::sdpcore::DualCertificate;
use qkd_core::validation::{run_all, SuiteStatus};

use crate::config::Resolved;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_ZERO_KEY: i32 = 2;

fn kind_name(k: ProtocolKind) -> &'static str {
    match k {
        ProtocolKind::Bb84 => "bb84",
        ProtocolKind::Mdi => "mdi",
        ProtocolKind::Decoy => "decoy",
    }
}

/// JSON record of one optimized point; non-finite numbers become `null`.
pub fn point_record(spec: &PointSpec, p: &PointResult) -> Value {
    let r: &KeyRateResult = &p.result;
    let b = &r.budget;
    let x: Map<String, Value> = spec.space.names().into_iter().zip(&p.x).map(|(k, v)| (k.to_string(), json!(v))).collect();
    json!({
        "protocol": kind_name(r.protocol),
        "distance_km": p.distance_km,
        "key_rate": r.rate,
        "l_key": r.l_key,
        "l_raw": r.l_raw,
        "n": r.n,
        "e_ph_upper": r.e_ph_upper,
        "m_w_upper": r.m_w_upper,
        "m_w_dot_upper": r.m_w_dot_upper,
        "m_ph_upper": r.m_ph_upper,
        "m_ph_delta": r.m_ph_delta,
        "n_ph_upper": r.n_ph_upper,
        "m_key1_lower": r.m_key1_lower,
        "lambda_ec": r.lambda_ec,
        "n_key": r.n_key,
        "m_key": r.m_key,
        "s_key": r.s_key,
        "qber": r.qber,
        "failure_probability": r.failure_probability,
        "zero_key": r.zero_key,
        "params": Value::Object(x),
        "budget": {
            "eps_sec": b.eps_sec, "eps_pa": b.eps_pa, "eps_ev": b.eps_ev, "eps_pro": b.eps_pro,
            "eps_pk": b.eps_pk, "eps_pb": b.eps_pb, "eps_ps": b.eps_ps,
            "eps_dep1": b.eps_dep1, "eps_dep2": b.eps_dep2,
        },
        "evals": p.evals,
        "restarts": p.restarts,
        "runtime_ms": p.runtime_ms,
        "error": p.error,
    })
}

fn print_flat(prefix: &str, v: &Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                print_flat(&key, x);
            }
        }
        Value::Null => {}
        leaf => println!("{prefix} = {leaf}"),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn status_of(p: &PointResult) -> i32 {
    if p.error.is_some() {
        EXIT_ERROR
    } else if p.result.rate > 0.0 {
        EXIT_OK
    } else {
        EXIT_ZERO_KEY
    }
}

pub fn keyrate(r: &Resolved) -> Result<i32> {
    let p = optimize_point(r.distance_km, &r.spec, None, &r.optim);
    let rec = point_record(&r.spec, &p);
    print_flat("", &rec);
    if let Some(out) = &r.out {
        write_file(Path::new(out), &(serde_json::to_string_pretty(&rec)? + "\n"))?;
    }
    if let Some(e) = &p.error {
        eprintln!("error: {e}");
    }
    Ok(status_of(&p))
}

/// Column names of the sweep CSV for `spec`.
pub fn csv_header(spec: &PointSpec) -> Vec<String> {
    let mut h: Vec<String> =
        ["distance_km", "key_rate", "l_key", "e_ph_upper", "M_W_upper", "p_Z", "alpha", "gamma_W"].map(String::from).into();
    h.extend(extra_params(spec).into_iter().map(String::from));
    h.push("runtime_ms".into());
    h.push("error".into());
    h
}

fn extra_params(spec: &PointSpec) -> Vec<&str> {
    spec.space.names().into_iter().filter(|n| !matches!(*n, "p_z" | "alpha" | "gamma_w")).collect()
}

fn sci(v: f64) -> String {
    format!("{v:e}")
}

/// CSV rows in full-precision scientific notation.
pub fn sweep_csv(spec: &PointSpec, points: &[PointResult], timing: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(spec))?;
    let value = |p: &PointResult, name: &str| spec.space.index(name).map(|i| sci(p.x[i])).unwrap_or_default();
    for p in points {
        let r = &p.result;
        let mut row = vec![
            sci(p.distance_km),
            sci(r.rate),
            sci(r.l_key),
            sci(r.e_ph_upper),
            sci(r.m_w_upper),
            value(p, "p_z"),
            value(p, "alpha"),
            value(p, "gamma_w"),
        ];
        row.extend(extra_params(spec).into_iter().map(|n| value(p, n)));
        row.push(sci(if timing { p.runtime_ms } else { 0.0 }));
        row.push(p.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn sweep_cmd(r: &Resolved) -> Result<i32> {
    let points = if r.grid.is_empty() { Vec::new() } else { sweep(&r.grid, &r.spec, &r.sweep)?.points };
    let text = sweep_csv(&r.spec, &points, r.timing)?;
    match &r.out {
        Some(out) => {
            write_file(Path::new(out), &text)?;
            for p in &points {
                eprintln!("{:>8} km  rate {:e}", p.distance_km, p.result.rate);
            }
        }
        None => print!("{text}"),
    }
    let code = if points.is_empty() || points.iter().any(|p| p.result.rate > 0.0) {
        EXIT_OK
    } else if points.iter().all(|p| p.error.is_some()) {
        EXIT_ERROR
    } else {
        EXIT_ZERO_KEY
    };
    Ok(code)
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Evaluates the configured point (optimized when enabled) and returns the
/// exported record of every SDP in the run.
fn run_records(r: &Resolved) -> Result<Vec<(String, String, DualCertificate)>> {
    let p = optimize_point(r.distance_km, &r.spec, None, &r.optim);
    if let Some(e) = &p.error {
        bail!("evaluation failed: {e}");
    }
    let ev = r.spec.evaluate(r.distance_km, &p.x)?;
    Ok(ev.sdps.iter().map(|s| (s.label.clone(), export_certificate(&s.problem, &s.certificate), s.certificate.clone())).collect())
}

pub fn certify(r: &Resolved) -> Result<i32> {
    let dir = PathBuf::from(r.out.clone().unwrap_or_else(|| "certificates".into()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut code = EXIT_OK;
    for (label, text, _) in run_records(r)? {
        let path = dir.join(format!("{}.cert", file_label(&label)));
        write_file(&path, &text)?;
        // re-read from disk so the check sees exactly what was written
        let back = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rep = verify_record(&back)?;
        let verdict = if rep.passed() { "verified" } else { "FAILED" };
        println!(
            "{} {verdict} margin={:e} objective={:e} hash_ok={}",
            path.display(),
            rep.margin,
            rep.objective,
            rep.hash_ok
        );
        if !rep.passed() {
            code = EXIT_ERROR;
        }
    }
    Ok(code)
}

/// Shifts every identity multiplier down by `margin + 1`, which lowers the
/// slack spectrum by the same amount.
fn tamper(problem: &qkd_core::sdpcore::DualProblem, c: &DualCertificate) -> DualCertificate {
    let mut t = c.clone();
    let shift = c.feasibility_margin.max(0.0) + 1.0;
    for (g, group) in problem.t_groups.iter().enumerate() {
        for &k in &group.identity {
            t.lambda[g][k] -= shift;
        }
    }
    t
}

pub fn validate(r: &Resolved) -> Result<i32> {
    let mut failed = Vec::new();
    for s in run_all(&r.validation) {
        let tag = match s.status {
            SuiteStatus::Passed => "PASS",
            SuiteStatus::Failed => "FAIL",
            SuiteStatus::Underpowered => "SKIP",
        };
        println!(
            "{tag} {} violations={}/{} rate={:e} allowed={:e} {}",
            s.name,
            s.violations,
            s.trials,
            s.rate(),
            s.allowed_rate,
            s.detail
        );
        match s.status {
            SuiteStatus::Failed => failed.push(s.name.clone()),
            SuiteStatus::Underpowered => eprintln!("warning: suite {} is underpowered and was skipped", s.name),
            SuiteStatus::Passed => {}
        }
    }
    for path in &r.certificates {
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let ok = match verify_record(&text) {
            Ok(rep) => {
                println!(
                    "{} certificate {path} margin={:e} hash_ok={}",
                    if rep.passed() { "PASS" } else { "FAIL" },
                    rep.margin,
                    rep.hash_ok
                );
                rep.passed()
            }
            Err(e) => {
                println!("FAIL certificate {path}: {e}");
                false
            }
        };
        if !ok {
            failed.push(format!("certificate {path}"));
        }
    }
    if r.self_check {
        let p = optimize_point(r.distance_km, &r.spec, None, &r.optim);
        if let Some(e) = &p.error {
            bail!("self-check evaluation failed: {e}");
        }
        let ev = r.spec.evaluate(r.distance_km, &p.x)?;
        for s in &ev.sdps {
            let rep = verify_record(&export_certificate(&s.problem, &s.certificate))?;
            let tampered = verify_record(&export_certificate(&s.problem, &tamper(&s.problem, &s.certificate)))?;
            let ok = rep.passed() && !tampered.passed();
            println!(
                "{} self-check {} hash={} margin={:e} tampered_margin={:e}",
                if ok { "PASS" } else { "FAIL" },
                s.label,
                &problem_hash(&s.problem)[..16],
                rep.margin,
                tampered.margin
            );
            if !ok {
                failed.push(format!("self-check {}", s.label));
            }
        }
    }
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        Ok(EXIT_ERROR)
    }
}
