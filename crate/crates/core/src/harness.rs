//! Receding-horizon episodes, Monte Carlo batches and CSV/JSON export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mission::Scenario;
use crate::qp::QpStatus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Reached,
    TimedOut,
    /// The QP had no feasible point; the episode stops at that step.
    Infeasible,
    /// The QP hit its iteration cap; treated like infeasibility.
    MaxIter,
}

impl EpisodeStatus {
    pub fn aborted(self) -> bool {
        matches!(self, EpisodeStatus::Infeasible | EpisodeStatus::MaxIter)
    }
}

/// Everything recorded along one episode. Row `t` of every per-step series
/// refers to the state `trajectory[t]` at which the control `controls[t]`
/// was applied; `final_state` is where the loop stopped.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub trajectory: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub nominal_controls: Vec<DVector<f64>>,
    pub h_exact: Vec<f64>,
    pub h_smooth: Vec<f64>,
    pub margins: Vec<f64>,
    pub solve_times: Vec<f64>,
    pub qp_iterations: Vec<usize>,
    pub reached_at: Option<usize>,
    pub final_state: DVector<f64>,
    pub final_h_exact: f64,
    pub status: EpisodeStatus,
    /// Horizon step that blocked the QP when the episode aborted.
    pub blocking_step: Option<usize>,
    pub seed: u64,
    pub n_agents: usize,
}

impl RunRecord {
    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }

    /// Visited states including the final one.
    pub fn states(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.trajectory
            .iter()
            .chain(std::iter::once(&self.final_state))
    }

    pub fn min_h_exact(&self) -> f64 {
        self.h_exact
            .iter()
            .copied()
            .fold(self.final_h_exact, f64::min)
    }

    pub fn min_h_smooth(&self) -> f64 {
        self.h_smooth.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_safe(&self) -> bool {
        self.min_h_exact() > 0.0
    }

    /// `sum_t ||u_t - u_d,t||` over the applied controls.
    pub fn control_deviation(&self) -> f64 {
        self.controls
            .iter()
            .zip(&self.nominal_controls)
            .map(|(u, ud)| (u - ud).norm())
            .fold(0.0, |a, b| a + b)
    }

    pub fn summary(&self) -> RunSummary {
        let (mean, std) = mean_std(&self.solve_times);
        RunSummary {
            seed: self.seed,
            status: self.status,
            steps: self.steps(),
            reached_at: self.reached_at,
            min_h_exact: self.min_h_exact(),
            min_h_smooth: self.min_h_smooth(),
            safe: self.is_safe(),
            control_deviation: self.control_deviation(),
            mean_solve_time: mean,
            std_solve_time: std,
        }
    }
}

/// Algorithm-1 warm start: drop the applied control, shift the rest left
/// and refill the tail with the sequence's first element. The dual
/// active-set solver always starts from the unconstrained minimizer, so
/// episodes do not feed this back into the QP.
pub fn shift_warm_start(seq: &[DVector<f64>]) -> Vec<DVector<f64>> {
    match seq.split_first() {
        None => Vec::new(),
        Some((first, rest)) => rest
            .iter()
            .cloned()
            .chain(std::iter::once(first.clone()))
            .collect(),
    }
}

/// Runs one closed-loop episode from the scenario's start state.
pub fn run_episode(s: &Scenario) -> Result<RunRecord> {
    let filter = s.filter()?;
    let mut noise = s.noise_model()?;
    let goal = s.goal_state();
    let n = s.n_agents;

    let mut x = s.start_state();
    let mut rec = RunRecord {
        trajectory: Vec::new(),
        controls: Vec::new(),
        nominal_controls: Vec::new(),
        h_exact: Vec::new(),
        h_smooth: Vec::new(),
        margins: Vec::new(),
        solve_times: Vec::new(),
        qp_iterations: Vec::new(),
        reached_at: None,
        final_state: x.clone(),
        final_h_exact: 0.0,
        status: EpisodeStatus::TimedOut,
        blocking_step: None,
        seed: s.seed,
        n_agents: n,
    };
    let in_goal = |x: &DVector<f64>| (x - &goal).norm() <= s.eps_g;

    for t in 0..s.t_max {
        if in_goal(&x) {
            rec.reached_at = Some(t);
            rec.status = EpisodeStatus::Reached;
            break;
        }
        let w = noise.sample_disturbance(n);
        let res = filter.filter_controls(&x, &w)?;
        match res.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                rec.status = EpisodeStatus::Infeasible;
                rec.blocking_step = res.infeasible_step;
                break;
            }
            QpStatus::MaxIter => {
                rec.status = EpisodeStatus::MaxIter;
                break;
            }
        }
        let u = res.u_seq[0].clone();
        rec.h_exact.push(filter.expr.eval_exact(&x)?);
        rec.h_smooth.push(res.rows[0].h_smooth);
        rec.margins.push(res.margins[0]);
        rec.nominal_controls.push(res.nominal_seq[0].clone());
        rec.solve_times.push(res.solve_time);
        rec.qp_iterations.push(res.iterations);
        let next = filter.model.step(&x, &u, &w, s.dt)?;
        rec.controls.push(u);
        rec.trajectory.push(std::mem::replace(&mut x, next));
    }
    if s.t_max > 0 && rec.status == EpisodeStatus::TimedOut && in_goal(&x) {
        rec.reached_at = Some(rec.steps());
        rec.status = EpisodeStatus::Reached;
    }
    rec.final_h_exact = filter.expr.eval_exact(&x)?;
    rec.final_state = x;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    pub reached_at: Option<usize>,
    pub min_h_exact: f64,
    pub min_h_smooth: f64,
    pub safe: bool,
    pub control_deviation: f64,
    #[serde(skip)]
    pub mean_solve_time: f64,
    #[serde(skip)]
    pub std_solve_time: f64,
}

/// Per-step componentwise bounds across runs; step `t` covers the runs that
/// were still going at `t`.
#[derive(Clone, Debug, Default)]
pub struct Envelope {
    pub count: Vec<usize>,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
}

impl Envelope {
    fn from_records(records: &[RunRecord]) -> Self {
        let mut env = Envelope::default();
        for r in records {
            for (t, x) in r.states().enumerate() {
                if t == env.count.len() {
                    env.count.push(1);
                    env.lower.push(x.clone());
                    env.upper.push(x.clone());
                } else {
                    env.count[t] += 1;
                    env.lower[t] = env.lower[t].inf(x);
                    env.upper[t] = env.upper[t].sup(x);
                }
            }
        }
        env
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct BatchSummary {
    pub runs: Vec<RunSummary>,
    pub envelope: Envelope,
    pub n_agents: usize,
    pub safe_runs: usize,
    pub reached_runs: usize,
    pub aborted_runs: usize,
    /// Summed over every applied control of every run.
    pub control_deviation: f64,
    /// Over every QP solve of every run, in seconds.
    pub mean_solve_time: f64,
    pub std_solve_time: f64,
}

impl BatchSummary {
    pub fn from_records(records: &[RunRecord], n_agents: usize) -> Self {
        let runs: Vec<RunSummary> = records.iter().map(RunRecord::summary).collect();
        let times: Vec<f64> = records
            .iter()
            .flat_map(|r| r.solve_times.iter().copied())
            .collect();
        let (mean, std) = mean_std(&times);
        Self {
            safe_runs: runs.iter().filter(|r| r.safe).count(),
            reached_runs: runs.iter().filter(|r| r.reached_at.is_some()).count(),
            aborted_runs: runs.iter().filter(|r| r.status.aborted()).count(),
            control_deviation: runs
                .iter()
                .map(|r| r.control_deviation)
                .fold(0.0, |a, b| a + b),
            envelope: Envelope::from_records(records),
            runs,
            n_agents,
            mean_solve_time: mean,
            std_solve_time: std,
        }
    }

    pub fn safe_fraction(&self) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        self.safe_runs as f64 / self.runs.len() as f64
    }

    /// Every run that did not abort reached the goal ball.
    pub fn all_completed_reached(&self) -> bool {
        self.runs
            .iter()
            .filter(|r| !r.status.aborted())
            .all(|r| r.reached_at.is_some())
    }
}

/// Runs `runs` independent episodes with seeds `seed, seed + 1, ...` in
/// parallel. Results are ordered by seed.
pub fn run_monte_carlo_records(s: &Scenario, runs: usize) -> Result<Vec<RunRecord>> {
    if runs == 0 {
        return Err(Error::config("runs must be at least 1"));
    }
    (0..runs as u64)
        .into_par_iter()
        .map(|r| run_episode(&s.with_seed(s.seed.wrapping_add(r))))
        .collect()
}

pub fn run_monte_carlo(s: &Scenario, runs: usize) -> Result<BatchSummary> {
    let records = run_monte_carlo_records(s, runs)?;
    Ok(BatchSummary::from_records(&records, s.n_agents))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn position_header(n_agents: usize, prefix: &str) -> String {
    (0..n_agents)
        .map(|i| format!(",{prefix}p_x_{i},{prefix}p_y_{i}"))
        .collect()
}

fn push_row(out: &mut String, t: usize, values: impl IntoIterator<Item = f64>) {
    write!(out, "{t}").unwrap();
    for v in values {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
}

#[derive(Serialize)]
struct RecordFile<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    final_state: Vec<f64>,
    final_h_exact: f64,
    blocking_step: Option<usize>,
}

/// Writes `trajectory.csv`, `controls.csv`, `cbf.csv` and `summary.json`.
/// `trajectory.csv` ends with the final state at `t = steps`. Solve times are
/// wall-clock and therefore kept out of these files; see [`export_timing`].
pub fn export_record(rec: &RunRecord, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut traj = format!("t{}\n", position_header(rec.n_agents, ""));
    for (t, x) in rec.states().enumerate() {
        push_row(&mut traj, t, x.iter().copied());
    }
    fs::write(dir.join("trajectory.csv"), traj)?;

    let mut controls = String::from("t,nominal_norm,filtered_norm\n");
    for (t, (ud, u)) in rec.nominal_controls.iter().zip(&rec.controls).enumerate() {
        push_row(&mut controls, t, [ud.norm(), u.norm()]);
    }
    fs::write(dir.join("controls.csv"), controls)?;

    let mut cbf = String::from("t,h_exact,h_smooth,margin\n");
    for t in 0..rec.steps() {
        push_row(
            &mut cbf,
            t,
            [rec.h_exact[t], rec.h_smooth[t], rec.margins[t]],
        );
    }
    fs::write(dir.join("cbf.csv"), cbf)?;

    let summary = rec.summary();
    let file = RecordFile {
        summary: &summary,
        final_state: rec.final_state.iter().copied().collect(),
        final_h_exact: rec.final_h_exact,
        blocking_step: rec.blocking_step,
    };
    fs::write(dir.join("summary.json"), to_json(&file)?)?;
    Ok(())
}

#[derive(Serialize)]
struct BatchFile<'a> {
    runs: usize,
    safe_runs: usize,
    safe_fraction: f64,
    reached_runs: usize,
    aborted_runs: usize,
    control_deviation: f64,
    per_run: &'a [RunSummary],
}

/// Writes `envelope.csv`, `runs.csv` and `summary.json` for a batch. An
/// empty batch yields header-only CSVs.
pub fn export_batch(batch: &BatchSummary, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;

    let env = &batch.envelope;
    let mut out = format!(
        "t,count{}{}\n",
        position_header(batch.n_agents, "min_"),
        position_header(batch.n_agents, "max_")
    );
    for t in 0..env.len() {
        write!(out, "{t},{}", env.count[t]).unwrap();
        for v in env.lower[t].iter().chain(env.upper[t].iter()) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(dir.join("envelope.csv"), out)?;

    let mut runs = String::from(
        "seed,status,steps,reached_at,min_h_exact,min_h_smooth,safe,control_deviation\n",
    );
    for r in &batch.runs {
        let status = serde_json::to_value(r.status).map_err(|e| Error::Numerical(e.to_string()))?;
        writeln!(
            runs,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            status.as_str().unwrap_or_default(),
            r.steps,
            r.reached_at.map(|t| t.to_string()).unwrap_or_default(),
            r.min_h_exact,
            r.min_h_smooth,
            r.safe,
            r.control_deviation
        )
        .unwrap();
    }
    fs::write(dir.join("runs.csv"), runs)?;

    let file = BatchFile {
        runs: batch.runs.len(),
        safe_runs: batch.safe_runs,
        safe_fraction: batch.safe_fraction(),
        reached_runs: batch.reached_runs,
        aborted_runs: batch.aborted_runs,
        control_deviation: batch.control_deviation,
        per_run: &batch.runs,
    };
    fs::write(dir.join("summary.json"), to_json(&file)?)?;
    Ok(())
}

#[derive(Serialize)]
struct TimingFile {
    mean_solve_time_ms: f64,
    std_solve_time_ms: f64,
    per_run_mean_ms: Vec<f64>,
}

/// Wall-clock QP solve times in `timing.json`. Not reproducible by nature.
pub fn export_timing(batch: &BatchSummary, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let file = TimingFile {
        mean_solve_time_ms: batch.mean_solve_time * 1e3,
        std_solve_time_ms: batch.std_solve_time * 1e3,
        per_run_mean_ms: batch.runs.iter().map(|r| r.mean_solve_time * 1e3).collect(),
    };
    fs::write(dir.join("timing.json"), to_json(&file)?)?;
    Ok(())
}

fn to_json(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses a `trajectory.csv` back into state vectors.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<DVector<f64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let vals = line
                .split(',')
                .skip(1)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{f}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(vals))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_scenario() -> Scenario {
        let mut s = Scenario::from_toml_str(
            "n_agents = 2\nstarts = [[0.0, 0.0], [0.0, 1.0]]\ngoals = [[1.0, 0.0], [1.0, 1.0]]\nt_max = 400\n",
        )
        .unwrap();
        s.eps_g = 0.05;
        s.without_noise()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn proportional_descent_reaches_goal() {
        let s = free_scenario();
        let rec = run_episode(&s).unwrap();
        assert_eq!(rec.status, EpisodeStatus::Reached);
        let goal = s.goal_state();
        let d: Vec<f64> = rec.states().map(|x| (x - &goal).norm()).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]));
        let t = rec.reached_at.unwrap();
        assert!(t <= s.t_max);
        assert!(d[t] <= s.eps_g && d[t - 1] > s.eps_g);
    }

    #[test]
    fn zero_t_max_is_empty() {
        let mut s = free_scenario();
        s.t_max = 0;
        let rec = run_episode(&s).unwrap();
        assert_eq!(rec.steps(), 0);
        assert!(rec.reached_at.is_none());
    }

    #[test]
    fn record_lengths_consistent() {
        let mut s = Scenario::bundled("single-obstacle").unwrap();
        s.t_max = 30;
        let rec = run_episode(&s).unwrap();
        let n = rec.steps();
        assert!(n <= 30);
        for len in [
            rec.controls.len(),
            rec.nominal_controls.len(),
            rec.h_exact.len(),
            rec.h_smooth.len(),
            rec.margins.len(),
            rec.solve_times.len(),
        ] {
            assert_eq!(len, n);
        }
    }

    #[test]
    fn warm_start_refills_with_first() {
        let seq = vec![dv(&[1.0]), dv(&[2.0]), dv(&[3.0])];
        assert_eq!(
            shift_warm_start(&seq),
            vec![dv(&[2.0]), dv(&[3.0]), dv(&[1.0])]
        );
        assert!(shift_warm_start(&[]).is_empty());
    }

    #[test]
    fn single_run_batch_matches_record() {
        let mut s = Scenario::bundled("single-obstacle").unwrap();
        s.t_max = 40;
        let rec = run_episode(&s).unwrap();
        let batch = run_monte_carlo(&s, 1).unwrap();
        let strip = |mut r: RunSummary| {
            r.mean_solve_time = 0.0;
            r.std_solve_time = 0.0;
            r
        };
        assert_eq!(strip(batch.runs[0].clone()), strip(rec.summary()));
        assert_eq!(batch.envelope.len(), rec.steps() + 1);
        assert_eq!(batch.envelope.lower[3], rec.trajectory[3]);
        assert_eq!(batch.envelope.upper[3], rec.trajectory[3]);
        assert!(run_monte_carlo(&s, 0).is_err());
    }

    #[test]
    fn infeasible_qp_aborts_episode() {
        // Starts just outside the clearance disk with almost no actuation:
        // the tightened row cannot be met inside the box.
        let mut s = Scenario::from_toml_str(
            "n_agents = 1\nstarts = [[0.26, 0.0]]\ngoals = [[-1.0, 0.0]]\nobstacles = [{ center = [0.0, 0.0], radius = 0.1 }]\nu_max = 0.001\n",
        )
        .unwrap();
        s.t_max = 10;
        let rec = run_episode(&s).unwrap();
        assert_eq!(rec.status, EpisodeStatus::Infeasible);
        assert_eq!(rec.steps(), 0);
        assert!(rec.blocking_step.is_some());
    }

    #[test]
    fn exports_round_trip() {
        let mut s = Scenario::bundled("multi-obstacle").unwrap();
        s.t_max = 25;
        let rec = run_episode(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_record(&rec, dir.path()).unwrap();
        let back = read_trajectory_csv(dir.path().join("trajectory.csv")).unwrap();
        let expected: Vec<_> = rec.states().cloned().collect();
        assert_eq!(back, expected);
        let header = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert!(header.starts_with("t,p_x_0,p_y_0,p_x_1,p_y_1,p_x_2,p_y_2\n"));
    }

    #[test]
    fn empty_batch_writes_headers() {
        let batch = BatchSummary::from_records(&[], 2);
        let dir = tempfile::tempdir().unwrap();
        export_batch(&batch, dir.path()).unwrap();
        let env = fs::read_to_string(dir.path().join("envelope.csv")).unwrap();
        assert_eq!(env, "t,count,min_p_x_0,min_p_y_0,min_p_x_1,min_p_y_1,max_p_x_0,max_p_y_0,max_p_x_1,max_p_y_1\n");
        let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 1);
    }
}
