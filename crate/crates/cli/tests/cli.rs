use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qkd_core::sdpcore::{export_certificate, import_certificate};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdkeyrate")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn bb84_defaults_at_zero_km_have_key() {
    let o = run(&["keyrate", "--distance", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rate: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("key_rate = "))
        .expect("key_rate line")
        .parse()
        .unwrap();
    assert!(rate > 0.0);
}

#[test]
fn bb84_defaults_at_400_km_exit_two() {
    let o = run(&["keyrate", "--distance", "400"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("key_rate = 0.0"));
}

#[test]
fn malformed_config_exit_one_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "run.n = 1e10\nthis is not a pair\n");
    let o = run(&["keyrate", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let cfg = write_cfg(dir.path(), "unknown.cfg", "channel.eta = 0.5\n");
    let o = run(&["keyrate", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `channel.eta`"));
}

#[test]
fn invalid_model_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "channel.eta_det = 1.5\n");
    assert_eq!(code(&run(&["keyrate", "--config", &cfg])), 1);
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&run(&["keyrate", "--distance", "far"])), 1);
    assert_eq!(code(&run(&["launch"])), 1);
}

#[test]
fn empty_grid_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "e.cfg", "sweep.distances = []\n");
    let out = dir.path().join("e.csv");
    let o = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(out).unwrap(),
        "distance_km,key_rate,l_key,e_ph_upper,M_W_upper,p_Z,alpha,gamma_W,runtime_ms,error\n"
    );
}

#[test]
fn sweep_csv_is_bit_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "s.cfg",
        "optim.max_evals = 8\noptim.restarts = 1\nsweep.distances = [0, 40, 80, 300]\noutput.timing = false\n",
    );
    let mut files = Vec::new();
    for (i, threads) in ["2", "2"].iter().enumerate() {
        let out = dir.path().join(format!("s{i}.csv"));
        let o = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads, "--seed", "7"]);
        assert_eq!(code(&o), 0);
        files.push(fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    // zero key at 300 km still yields a full row
    assert!(rows[4].starts_with("3e2,0e0,"));
}

#[test]
fn all_zero_sweep_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "z.cfg", "optim.enabled = false\nsweep.distances = [350, 400]\n");
    assert_eq!(code(&run(&["sweep", "--config", &cfg])), 2);
}

#[test]
fn decoy_csv_has_intensity_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", "protocol.kind = decoy\noptim.enabled = false\nsweep.distances = [10]\n");
    let o = run(&["sweep", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "distance_km,key_rate,l_key,e_ph_upper,M_W_upper,p_Z,alpha,gamma_W,mu0,mu1,p_mu0,p_mu1,runtime_ms,error"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 14);
    assert!(row[1].parse::<f64>().unwrap() > 0.0);
    assert_eq!(row[8], "5e-1");
}

fn certify_to(dir: &Path, name: &str, extra: &str) -> String {
    let cfg = write_cfg(dir, &format!("{name}.cfg"), &format!("optim.enabled = false\n{extra}"));
    let out = dir.join(name);
    let o = run(&["certify", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verified"));
    fs::read_to_string(out.join("phase.cert")).unwrap()
}

#[test]
fn certificate_reverifies_in_fresh_process() {
    let dir = tempfile::tempdir().unwrap();
    certify_to(dir.path(), "a", "");
    let path = dir.path().join("a").join("phase.cert");
    let cfg = write_cfg(
        dir.path(),
        "v.cfg",
        &format!(
            "validate.trials = 200\nvalidate.theorem1_trials = 50\nvalidate.self_check = false\nvalidate.certificates = [{:?}]\n",
            path.to_str().unwrap()
        ),
    );
    let o = run(&["validate", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS certificate"));

    // lowering every identity multiplier by margin + 1 must be caught
    let (p, mut c) = import_certificate(&fs::read_to_string(&path).unwrap()).unwrap();
    let shift = c.feasibility_margin + 1.0;
    for (g, group) in p.t_groups.iter().enumerate() {
        for &k in &group.identity {
            c.lambda[g][k] -= shift;
        }
    }
    fs::write(&path, export_certificate(&p, &c)).unwrap();
    let o = run(&["validate", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL certificate"));
}

#[test]
fn certificate_hash_tracks_delta_theta() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |t: &str| t.lines().find(|l| l.starts_with("problem.sha256=")).unwrap().to_string();
    let a = certify_to(dir.path(), "a", "");
    let b = certify_to(dir.path(), "b", "");
    let c = certify_to(dir.path(), "c", "protocol.delta_theta = 0.05\n");
    assert_eq!(hash(&a), hash(&b));
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn underpowered_suite_is_skipped_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "u.cfg",
        "validate.epsilon = 0.5\nvalidate.trials = 10\nvalidate.theorem1_trials = 50\nvalidate.self_check = false\n",
    );
    let o = run(&["validate", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("SKIP bernstein"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("underpowered"));
}

#[test]
fn default_validation_passes() {
    let o = run(&["validate"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS self-check"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn json_config_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "j.json", "{\"optim\": {\"enabled\": false}, \"run\": {\"distance_km\": 20}}");
    let o = run(&["keyrate", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("distance_km = 20.0"));
}
