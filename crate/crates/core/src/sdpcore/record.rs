//! Text record of a dual problem and its certificate. Everything needed to
//! re-check feasibility by eigendecomposition is inside the record; the
//! problem section is hashed so that tampering with operators or guesses is
//! detected.
//!
//! Layout: a header line, then `key=value` lines. Matrices are written as
//! `dim|i,j,re,im;...` over nonzero entries. Floats use the shortest
//! round-trip decimal representation.

use std::collections::HashMap;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::{certify, DualBlock, DualCertificate, DualProblem, QTerm, SdpError, TGroup};
use crate::concbounds::RvRange;
use crate::linops::{Herm, C64};
use crate::protocolkit::TIndex;

pub const HEADER: &str = "qkd-dual-certificate v1";

fn f(x: f64) -> String {
    format!("{x:e}")
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|&x| f(x)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
pub(crate) fn list_for_tests(xs: &[f64]) -> String {
    list(xs)
}

fn ulist(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn mat(h: &Herm) -> String {
    let m = h.matrix();
    let mut parts = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            if z.re != 0.0 || z.im != 0.0 {
                parts.push(format!("{i},{j},{},{}", f(z.re), f(z.im)));
            }
        }
    }
    format!("{}|{}", m.nrows(), parts.join(";"))
}

fn clean(label: &str) -> String {
    label.chars().map(|c| if c == '=' || c == '\n' || c == '\r' { '_' } else { c }).collect()
}

fn problem_lines(p: &DualProblem) -> Vec<String> {
    let mut out = vec![format!("blocks={}", p.blocks.len())];
    for (b, blk) in p.blocks.iter().enumerate() {
        out.push(format!("block.{b}.label={}", clean(&blk.label)));
        out.push(format!("block.{b}.dims={},{}", blk.dim_a, blk.dim_b));
        out.push(format!("block.{b}.target={}", mat(&blk.target)));
    }
    out.push(format!("q={}", p.q_terms.len()));
    for (l, q) in p.q_terms.iter().enumerate() {
        out.push(format!("q.{l}.label={}", clean(&q.label)));
        out.push(format!("q.{l}.guess={}", f(q.guess)));
        out.push(format!("q.{l}.range={}", list(&[q.range.x_min, q.range.x_max])));
        out.push(format!("q.{l}.parts={}", ulist(&q.parts.iter().map(|x| x.0).collect::<Vec<_>>())));
        for (k, (_, op)) in q.parts.iter().enumerate() {
            out.push(format!("q.{l}.part.{k}={}", mat(op)));
        }
    }
    out.push(format!("t={}", p.t_groups.len()));
    for (g, grp) in p.t_groups.iter().enumerate() {
        out.push(format!("t.{g}.label={}", clean(&grp.label)));
        out.push(format!("t.{g}.dim_a={}", grp.dim_a));
        out.push(format!("t.{g}.blocks={}", ulist(&grp.blocks)));
        out.push(format!("t.{g}.identity={}", ulist(&grp.identity)));
        out.push(format!("t.{g}.cap={}", grp.cap.as_ref().map_or("none".to_string(), mat)));
        out.push(format!("t.{g}.ops={}", grp.ops.len()));
        for (k, op) in grp.ops.iter().enumerate() {
            out.push(format!("t.{g}.op.{k}.pair={},{}", grp.pairs[k].i, grp.pairs[k].j));
            out.push(format!("t.{g}.op.{k}.guess={}", f(grp.guesses[k])));
            out.push(format!("t.{g}.op.{k}={}", mat(op)));
        }
    }
    out
}

fn digest(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the canonical problem serialization.
pub fn problem_hash(p: &DualProblem) -> String {
    digest(&problem_lines(p))
}

pub fn export_certificate(p: &DualProblem, c: &DualCertificate) -> String {
    let lines = problem_lines(p);
    let mut out = vec![HEADER.to_string(), format!("problem.sha256={}", digest(&lines))];
    out.extend(lines);
    out.push(format!("cert.eta={}", list(&c.eta)));
    for (g, l) in c.lambda.iter().enumerate() {
        out.push(format!("cert.lambda.{g}={}", list(l)));
    }
    out.push(format!("cert.objective={}", f(c.objective)));
    out.push(format!("cert.feasibility_margin={}", f(c.feasibility_margin)));
    out.push(format!("cert.block_margins={}", list(&c.block_margins)));
    out.push(format!("cert.restoration={}", list(&c.restoration)));
    out.push(format!("cert.omega={}", list(&[c.omega_min, c.omega_max])));
    let mut s = out.join("\n");
    s.push('\n');
    s
}

fn err(msg: impl Into<String>) -> SdpError {
    SdpError::Record(msg.into())
}

struct Fields {
    map: HashMap<String, String>,
    problem_lines: Vec<String>,
}

impl Fields {
    fn get(&self, k: &str) -> Result<&str, SdpError> {
        self.map.get(k).map(String::as_str).ok_or_else(|| err(format!("missing key `{k}`")))
    }
    fn usize(&self, k: &str) -> Result<usize, SdpError> {
        self.get(k)?.parse().map_err(|_| err(format!("bad integer at `{k}`")))
    }
    fn f64(&self, k: &str) -> Result<f64, SdpError> {
        self.get(k)?.parse().map_err(|_| err(format!("bad float at `{k}`")))
    }
    fn floats(&self, k: &str) -> Result<Vec<f64>, SdpError> {
        parse_list(self.get(k)?, k)
    }
    fn usizes(&self, k: &str) -> Result<Vec<usize>, SdpError> {
        let v = self.get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|x| x.parse().map_err(|_| err(format!("bad index at `{k}`")))).collect()
    }
    fn mat(&self, k: &str) -> Result<Herm, SdpError> {
        parse_mat(self.get(k)?, k)
    }
}

fn parse_list(v: &str, k: &str) -> Result<Vec<f64>, SdpError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| x.parse().map_err(|_| err(format!("bad float at `{k}`")))).collect()
}

fn parse_mat(v: &str, k: &str) -> Result<Herm, SdpError> {
    let (d, body) = v.split_once('|').ok_or_else(|| err(format!("bad matrix at `{k}`")))?;
    let d: usize = d.parse().map_err(|_| err(format!("bad matrix dimension at `{k}`")))?;
    let mut m = DMatrix::<C64>::zeros(d, d);
    for e in body.split(';').filter(|s| !s.is_empty()) {
        let p: Vec<&str> = e.split(',').collect();
        if p.len() != 4 {
            return Err(err(format!("bad matrix entry at `{k}`")));
        }
        let i: usize = p[0].parse().map_err(|_| err(format!("bad row at `{k}`")))?;
        let j: usize = p[1].parse().map_err(|_| err(format!("bad column at `{k}`")))?;
        if i >= d || j >= d {
            return Err(err(format!("entry out of range at `{k}`")));
        }
        let re: f64 = p[2].parse().map_err(|_| err(format!("bad entry at `{k}`")))?;
        let im: f64 = p[3].parse().map_err(|_| err(format!("bad entry at `{k}`")))?;
        m[(i, j)] = C64::new(re, im);
    }
    Herm::new(m).map_err(|e| err(format!("`{k}`: {e}")))
}

fn fields(text: &str) -> Result<Fields, SdpError> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(err("unrecognized header"));
    }
    let mut map = HashMap::new();
    let mut problem_lines = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("malformed line `{line}`")))?;
        if k != "problem.sha256" && !k.starts_with("cert.") {
            problem_lines.push(line.to_string());
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
    }
    Ok(Fields { map, problem_lines })
}

fn parse_problem(fl: &Fields) -> Result<DualProblem, SdpError> {
    let mut blocks = Vec::new();
    for b in 0..fl.usize("blocks")? {
        let dims = fl.usizes(&format!("block.{b}.dims"))?;
        if dims.len() != 2 {
            return Err(err("block dims"));
        }
        blocks.push(DualBlock {
            label: fl.get(&format!("block.{b}.label"))?.to_string(),
            dim_a: dims[0],
            dim_b: dims[1],
            target: fl.mat(&format!("block.{b}.target"))?,
        });
    }
    let mut q_terms = Vec::new();
    for l in 0..fl.usize("q")? {
        let r = fl.floats(&format!("q.{l}.range"))?;
        if r.len() != 2 {
            return Err(err("range"));
        }
        let idx = fl.usizes(&format!("q.{l}.parts"))?;
        let mut parts = Vec::new();
        for (k, b) in idx.into_iter().enumerate() {
            parts.push((b, fl.mat(&format!("q.{l}.part.{k}"))?));
        }
        q_terms.push(QTerm {
            label: fl.get(&format!("q.{l}.label"))?.to_string(),
            parts,
            guess: fl.f64(&format!("q.{l}.guess"))?,
            range: RvRange::new(r[0], r[1]).map_err(|e| err(e.to_string()))?,
        });
    }
    let mut t_groups = Vec::new();
    for g in 0..fl.usize("t")? {
        let n = fl.usize(&format!("t.{g}.ops"))?;
        let (mut ops, mut pairs, mut guesses) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..n {
            let pr = fl.usizes(&format!("t.{g}.op.{k}.pair"))?;
            if pr.len() != 2 {
                return Err(err("pair"));
            }
            pairs.push(TIndex { i: pr[0], j: pr[1] });
            guesses.push(fl.f64(&format!("t.{g}.op.{k}.guess"))?);
            ops.push(fl.mat(&format!("t.{g}.op.{k}"))?);
        }
        let cap_s = fl.get(&format!("t.{g}.cap"))?;
        let cap = if cap_s == "none" { None } else { Some(parse_mat(cap_s, "cap")?) };
        t_groups.push(TGroup {
            label: fl.get(&format!("t.{g}.label"))?.to_string(),
            dim_a: fl.usize(&format!("t.{g}.dim_a"))?,
            ops,
            pairs,
            guesses,
            identity: fl.usizes(&format!("t.{g}.identity"))?,
            blocks: fl.usizes(&format!("t.{g}.blocks"))?,
            cap,
        });
    }
    let p = DualProblem { blocks, q_terms, t_groups };
    p.validate()?;
    Ok(p)
}

/// Rebuilds the problem and the multipliers; margins are recomputed, never
/// read from the record.
pub fn import_certificate(text: &str) -> Result<(DualProblem, DualCertificate), SdpError> {
    let fl = fields(text)?;
    let p = parse_problem(&fl)?;
    let mut y = fl.floats("cert.eta")?;
    for g in 0..p.t_groups.len() {
        y.extend(fl.floats(&format!("cert.lambda.{g}"))?);
    }
    if y.len() != p.n_vars() {
        return Err(err("multiplier count does not match the problem"));
    }
    let mut c = certify(&p, &y)?;
    c.restoration = fl.floats("cert.restoration")?;
    Ok((p, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub hash_ok: bool,
    pub margin: f64,
    pub objective: f64,
    pub recorded_objective: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.hash_ok && self.margin >= -super::FEASIBILITY_TOL
    }
}

pub fn verify_record(text: &str) -> Result<VerifyReport, SdpError> {
    let fl = fields(text)?;
    let hash_ok = digest(&fl.problem_lines) == fl.get("problem.sha256")?;
    let (_, c) = import_certificate(text)?;
    Ok(VerifyReport {
        hash_ok,
        margin: c.feasibility_margin,
        objective: c.objective,
        recorded_objective: fl.f64("cert.objective")?,
    })
}
