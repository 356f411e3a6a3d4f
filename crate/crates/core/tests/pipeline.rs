//! End-to-end behavior of the BB84 pipeline across modules.

use qkd_core::channelsim::ChannelParams;
use qkd_core::finitekey::*;
use qkd_core::optimsweep::*;
use qkd_core::protocolkit::*;
use qkd_core::sdpcore::record::problem_hash;
use qkd_core::sdpcore::{import_certificate, verify_record};

fn spec() -> PointSpec {
    PointSpec {
        model: ProtocolModel::Bb84(Bb84Model::new(0.063, 0.9, 1e-5, 2).unwrap()),
        channel: ChannelParams::at(0.0, 0.73, 1e-6),
        settings: EvalSettings::new(ProtocolKind::Bb84, 1e10, 0.3, 30.0),
        space: ParameterSpace::bb84(),
    }
}

#[test]
fn rate_decreases_with_distance_at_fixed_parameters() {
    let s = spec();
    let x = s.space.initial();
    let rates: Vec<f64> = [0.0, 20.0, 40.0, 60.0, 80.0].iter().map(|&d| s.evaluate(d, &x).unwrap().result.rate).collect();
    assert!(rates[0] > 0.0);
    assert!(rates.windows(2).all(|w| w[1] < w[0]), "{rates:?}");
}

#[test]
fn optimizer_does_not_lose_to_its_start() {
    let s = spec();
    let start = s.evaluate(50.0, &s.space.initial()).unwrap().result.rate;
    let cfg = OptimConfig { max_evals: 25, ..Default::default() };
    let p = optimize_point(50.0, &s, None, &cfg);
    assert!(p.error.is_none());
    assert!(p.result.rate >= start, "{} < {start}", p.result.rate);
    assert!(s.space.contains(&p.x));
}

#[test]
fn sweep_is_repeatable() {
    let s = spec();
    let cfg = SweepConfig { optim: OptimConfig { max_evals: 8, restarts: 0, ..Default::default() }, threads: 2 };
    let grid = [0.0, 30.0, 60.0];
    let a = sweep(&grid, &s, &cfg).unwrap();
    let b = sweep(&grid, &s, &cfg).unwrap();
    assert!(a.same_outcome(&b));
}

#[test]
fn exported_certificate_survives_round_trip_and_edits_are_caught() {
    let s = spec();
    let ev = s.evaluate(20.0, &s.space.initial()).unwrap();
    let sdp = &ev.sdps[0];
    let text = qkd_core::sdpcore::export_certificate(&sdp.problem, &sdp.certificate);
    let rep = verify_record(&text).unwrap();
    assert!(rep.passed());
    let (p, _) = import_certificate(&text).unwrap();
    assert_eq!(problem_hash(&p), problem_hash(&sdp.problem));

    // changing the problem data without updating the hash must fail
    let other = Bb84Model::new(0.07, 0.9, 1e-5, 2).unwrap();
    let sets = bb84_coefficient_sets(&other);
    let p2 = bb84_problem(&other, &sets, &vec![0.0; sets.len()], 30.0);
    assert_ne!(problem_hash(&p2), problem_hash(&sdp.problem));
}
