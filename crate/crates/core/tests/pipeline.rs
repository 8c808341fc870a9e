use collective_cbf::filter::Prediction;
use collective_cbf::harness::{
    export_record, read_trajectory_csv, run_episode, run_monte_carlo, EpisodeStatus,
};
use collective_cbf::mission::{load_scenario, Scenario};
use collective_cbf::verify::PROP1_PRINTED;

#[test]
fn noise_free_runs_stay_in_safe_set() {
    for name in ["single-obstacle", "multi-obstacle"] {
        let s = Scenario::bundled(name).unwrap().without_noise();
        let rec = run_episode(&s).unwrap();
        assert_eq!(rec.status, EpisodeStatus::Reached, "{name}");
        assert!(rec.h_exact.iter().all(|h| *h >= -1e-6));
        assert!(rec.final_h_exact >= -1e-6);
        assert!(rec.margins.iter().all(|m| *m >= -1e-8));
        assert!(rec.controls.iter().all(|u| u.amax() <= s.u_max + 1e-8));
    }
}

#[test]
fn file_to_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("multi.toml");
    std::fs::write(
        &path,
        Scenario::bundled("multi-obstacle")
            .unwrap()
            .to_toml_string()
            .unwrap(),
    )
    .unwrap();
    let mut s = load_scenario(&path).unwrap();
    s.t_max = 60;
    let rec = run_episode(&s).unwrap();
    export_record(&rec, dir.path()).unwrap();
    let back = read_trajectory_csv(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(back.len(), rec.steps() + 1);
    assert!(back.iter().zip(rec.states()).all(|(a, b)| a == b));
}

#[test]
fn cbf_csv_respects_smoothing_bound() {
    let s = Scenario::bundled("multi-obstacle").unwrap();
    let rec = run_episode(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_record(&rec, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("cbf.csv")).unwrap();
    let slack = PROP1_PRINTED * s.beta * s.beta;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert!(v[2] >= v[1] - slack, "{line}");
    }
}

#[test]
fn nominal_prediction_mode_runs() {
    let mut s = Scenario::bundled("single-obstacle")
        .unwrap()
        .without_noise();
    s.prediction = Prediction::Nominal;
    let rec = run_episode(&s).unwrap();
    assert!(rec.is_safe() || rec.status.aborted());
}

#[test]
fn horizon_one_matches_longer_horizon_first_step() {
    // Rows separate by step, so the applied control does not depend on T_u.
    let base = Scenario::bundled("multi-obstacle").unwrap();
    let mut short = base.clone();
    short.horizon = 1;
    short.t_max = 80;
    let mut long = short.clone();
    long.horizon = 12;
    let (a, b) = (run_episode(&short).unwrap(), run_episode(&long).unwrap());
    assert_eq!(a.steps(), b.steps());
    for (ua, ub) in a.controls.iter().zip(&b.controls) {
        assert!((ua - ub).amax() < 1e-9);
    }
}

#[test]
fn batch_seeds_are_independent() {
    let mut s = Scenario::bundled("single-obstacle").unwrap();
    s.t_max = 30;
    let batch = run_monte_carlo(&s, 4).unwrap();
    let seeds: Vec<u64> = batch.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [1, 2, 3, 4]);
    assert_ne!(batch.runs[0].min_h_exact, batch.runs[1].min_h_exact);
    assert_eq!(batch.envelope.count[0], 4);
}

#[test]
fn nominal_rollout_rows_abort_on_compact_layout() {
    // Lanes 0.5 m apart with the obstacle on the middle lane: the open-loop
    // nominal prediction runs through the obstacle and its rows cannot be
    // met inside the box, while the closed-loop prediction stays feasible.
    let mut s = Scenario::from_toml_str(
        "n_agents = 3\nstarts = [[-2.0, -0.5], [-2.0, 0.0], [-2.0, 0.5]]\ngoals = [[2.0, -0.5], [2.0, 0.0], [2.0, 0.5]]\nobstacles = [{ center = [0.0, 0.05], radius = 0.25 }]\nt_max = 60\nseed = 1\n",
    )
    .unwrap();
    s.prediction = Prediction::Nominal;
    let literal = run_episode(&s).unwrap();
    assert_eq!(literal.status, EpisodeStatus::Infeasible);
    s.prediction = Prediction::ClosedLoop;
    let closed = run_episode(&s).unwrap();
    assert!(!closed.status.aborted());
    assert!(closed.is_safe());
}
