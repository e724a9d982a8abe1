//! The oracle, TDC, ODE and audit pipelines and their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twoscale::audit::{audit_tdc, AuditReport};
use twoscale::engine::{non_increasing_from, Divergence};
use twoscale::linalg::{dist, norm};
use twoscale::ode::{faster_field, integrate, slower_field, tracking_error};
use twoscale::{
    run_two_timescale, DecadeMedian, OdeTrajectory, OracleSolution, RunConfig, SchedulePair, TdcNoise, TdcProblem,
    TrajectoryLog,
};

use crate::config::{ExperimentConfig, Pipelines};
use crate::Failure;

/// A validated experiment, ready to run.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub problem: TdcProblem,
    pub oracle: OracleSolution,
    pub pair: SchedulePair,
}

impl Prepared {
    /// Validates everything a run depends on without touching the disk.
    pub fn new(config: ExperimentConfig) -> Result<Self, Failure> {
        let problem = config.build()?;
        let oracle = OracleSolution::solve(problem.mdp(), problem.target(), problem.behavior(), problem.features())
            .map_err(|e| Failure::validation(format!("oracle: {e}")))?;
        let d = oracle.dim();
        for (name, v) in [("theta0", &config.theta0), ("w0", &config.w0)] {
            if let Some(v) = v {
                if v.len() != d || v.iter().any(|x| !x.is_finite()) {
                    return Err(Failure::validation(format!("{name} must hold {d} finite numbers")));
                }
            }
        }
        let t = &config.tracking;
        if !(t.window >= 0.0 && t.window.is_finite() && t.dt > 0.0) {
            return Err(Failure::validation("tracking window must be >= 0 and dt > 0"));
        }
        if !(config.ode.slow_horizon.is_none_or(|h| h > 0.0) && config.ode.dt.is_none_or(|dt| dt > 0.0)) {
            return Err(Failure::validation("ode horizon and dt must be positive"));
        }
        if config.ode.max_rows < 2 {
            return Err(Failure::validation("ode max_rows must be at least 2"));
        }
        let pair = config.schedule.build();
        Ok(Self { config, problem, oracle, pair })
    }

    fn theta0(&self) -> Vec<f64> {
        self.config.theta0.clone().unwrap_or_else(|| vec![0.0; self.oracle.dim()])
    }

    fn w0(&self) -> Vec<f64> {
        self.config.w0.clone().unwrap_or_else(|| vec![0.0; self.oracle.dim()])
    }

    fn run_config(&self, horizon: u64, seed: u64) -> RunConfig {
        RunConfig::new(horizon, seed)
            .thinning(self.config.thinning)
            .divergence_bound(self.config.divergence_bound)
            .initial(self.theta0(), self.w0())
            .lambda(self.oracle.lambda.clone())
    }

    pub fn relative_error(&self, theta: &[f64]) -> f64 {
        dist(theta, self.oracle.theta_star.as_slice()) / self.oracle.theta_star.norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub trajectory_csv: String,
    pub decades_csv: String,
    pub final_n: u64,
    pub final_theta: Vec<f64>,
    /// `||theta_N - theta*|| / ||theta*||` at the final CSV row.
    pub final_relative_error: f64,
    pub final_coupling_error: Option<f64>,
    pub decade_medians: Vec<DecadeMedian>,
    pub divergence: Option<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingPoint {
    pub anchor: u64,
    pub s: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSummary {
    pub slow_horizon: f64,
    pub slow_dt: f64,
    /// `||theta(T) - theta*||` for the slower ODE from `theta0`.
    pub slow_endpoint_gap: f64,
    pub fast_horizon: f64,
    pub fast_dt: f64,
    /// `||w(T) - lambda(theta0)||` for the faster ODE from `w0`.
    pub fast_endpoint_gap: f64,
    pub tracking_seed: u64,
    pub tracking: Vec<TrackingPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub pipelines: Pipelines,
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub theta_star: Vec<f64>,
    pub seeds: Vec<SeedSummary>,
    pub ode: Option<OdeSummary>,
    pub audit: Option<Vec<Check>>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl Summary {
    pub fn diverged(&self) -> Vec<u64> {
        self.seeds.iter().filter(|s| s.divergence.is_some()).map(|s| s.seed).collect()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::io(format!("{}: {e}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
    write_with(path, |out| writeln!(out, "{text}"))
}

fn write_decades(path: &Path, medians: &[DecadeMedian]) -> Result<(), Failure> {
    write_with(path, |out| {
        writeln!(out, "decade,median,count")?;
        for d in medians {
            writeln!(out, "{},{},{}", d.decade, d.median, d.count)?;
        }
        Ok(())
    })
}

fn write_trajectory(path: &Path, traj: &OdeTrajectory, max_rows: usize) -> Result<(), Failure> {
    let every = traj.len().div_ceil(max_rows - 1).max(1);
    write_with(path, |out| traj.thinned(every).write_csv(out))
}

fn run_seeds(prep: &Prepared, out: &Path) -> Result<Vec<SeedSummary>, Failure> {
    let logs: Vec<(u64, TrajectoryLog<TdcNoise>)> = prep
        .config
        .seeds
        .par_iter()
        .map(|&seed| {
            let log = run_two_timescale(&prep.problem, &prep.pair, &prep.run_config(prep.config.horizon, seed))
                .map_err(|e| Failure::validation(format!("seed {seed}: {e}")))?;
            let csv = out.join(format!("seed_{seed}.csv"));
            write_with(&csv, |w| log.write_csv(w))?;
            write_decades(&out.join(format!("seed_{seed}_decades.csv")), &log.decade_medians)?;
            Ok((seed, log))
        })
        .collect::<Result<_, Failure>>()?;
    Ok(logs
        .into_iter()
        .map(|(seed, log)| SeedSummary {
            seed,
            trajectory_csv: format!("seed_{seed}.csv"),
            decades_csv: format!("seed_{seed}_decades.csv"),
            final_n: log.n(log.last()),
            final_theta: log.final_theta().to_vec(),
            final_relative_error: prep.relative_error(log.final_theta()),
            final_coupling_error: log.coupling(log.last()),
            decade_medians: log.decade_medians.clone(),
            divergence: log.divergence,
        })
        .collect())
}

fn run_ode(prep: &Prepared, out: &Path) -> Result<OdeSummary, Failure> {
    let sol = &prep.oracle;
    let cfg = &prep.config.ode;
    let theta0 = prep.theta0();
    let slow = slower_field(sol);
    let slow_horizon = cfg.slow_horizon.unwrap_or(40.0 / -sol.cond.slow_max_real);
    let slow_dt = cfg.dt.unwrap_or_else(|| slow.default_dt());
    let slow_traj =
        integrate(&slow, &theta0, slow_horizon, slow_dt).map_err(|e| Failure::divergence(format!("slow ODE: {e}")))?;
    let theta0_v = nalgebra::DVector::from_vec(theta0.clone());
    let fast = faster_field(sol, &theta0_v);
    let fast_horizon = 50.0 / sol.cond.c_eigen_min;
    let fast_dt = cfg.dt.unwrap_or_else(|| fast.default_dt());
    let fast_traj = integrate(&fast, &prep.w0(), fast_horizon, fast_dt)
        .map_err(|e| Failure::divergence(format!("fast ODE: {e}")))?;
    write_trajectory(&out.join("ode_slow.csv"), &slow_traj, cfg.max_rows)?;
    write_trajectory(&out.join("ode_fast.csv"), &fast_traj, cfg.max_rows)?;

    let t = &prep.config.tracking;
    let tracking_seed = prep.config.seeds[0];
    let mut tracking = Vec::new();
    if !t.anchors.is_empty() {
        let ends: Vec<u64> = t.anchors.iter().map(|&n| prep.pair.slow.index_after(n, t.window) + 2).collect();
        let horizon = ends.iter().copied().max().unwrap_or(0);
        let mut rc = prep.run_config(horizon, tracking_seed).record_noise(true);
        for (&n, &end) in t.anchors.iter().zip(&ends) {
            rc = rc.dense_window(n..end);
        }
        let log = run_two_timescale(&prep.problem, &prep.pair, &rc)
            .map_err(|e| Failure::validation(format!("tracking run: {e}")))?;
        if let Some(d) = log.divergence {
            return Err(Failure::divergence(format!("tracking run left the bound at n = {}", d.n)));
        }
        for &anchor in &t.anchors {
            let s = log.t(log.position(anchor).expect("anchor recorded"));
            let error = tracking_error(&log, &prep.problem, &sol.lambda, s, t.window, t.dt)
                .map_err(|e| Failure::validation(format!("tracking at n = {anchor}: {e}")))?;
            tracking.push(TrackingPoint { anchor, s, error });
        }
    }
    write_with(&out.join("tracking.csv"), |w| {
        writeln!(w, "anchor,s,error")?;
        for p in &tracking {
            writeln!(w, "{},{},{}", p.anchor, p.s, p.error)?;
        }
        Ok(())
    })?;
    let lambda0 = sol.lambda.eval(&theta0);
    Ok(OdeSummary {
        slow_horizon,
        slow_dt,
        slow_endpoint_gap: dist(slow_traj.final_state(), sol.theta_star.as_slice()),
        fast_horizon,
        fast_dt,
        fast_endpoint_gap: dist(fast_traj.final_state(), &lambda0),
        tracking_seed,
        tracking,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn checks(prep: &Prepared, seeds: &[SeedSummary], ode: Option<&OdeSummary>, audit: Option<&AuditReport>) -> Vec<Check> {
    let sol = &prep.oracle;
    let mut out = Vec::new();
    let residual = (&sol.a * &sol.theta_star - &sol.b).norm();
    out.push(check(
        "oracle fixed point",
        residual <= 1e-8 * (1.0 + sol.b.norm()),
        format!("|A theta* - b| = {residual:.3e}"),
    ));
    out.push(check(
        "stable spectra",
        sol.cond.fast_max_real < 0.0 && sol.cond.slow_max_real < 0.0,
        format!(
            "max Re eig(-C) = {:.4e}, max Re eig(-A'C^-1 A) = {:.4e}",
            sol.cond.fast_max_real, sol.cond.slow_max_real
        ),
    ));
    if !seeds.is_empty() {
        let rel: Vec<f64> = seeds.iter().map(|s| s.final_relative_error).collect();
        let worst = rel.iter().copied().fold(0.0, f64::max);
        let med = median(rel);
        out.push(check(
            "tdc final relative error",
            med <= 0.05 && worst <= 0.15,
            format!("median {med:.4e} (cap 0.05), worst {worst:.4e} (cap 0.15)"),
        ));
        let monotone = seeds.iter().all(|s| non_increasing_from(&s.decade_medians, 3));
        let last =
            seeds.iter().map(|s| s.decade_medians.last().map_or(f64::INFINITY, |d| d.median)).fold(0.0, f64::max);
        out.push(check(
            "coupling decade medians",
            monotone && last <= 0.1,
            format!("non-increasing from 10^3: {monotone}, worst final-decade median {last:.4e} (cap 0.1)"),
        ));
        let diverged: Vec<u64> = seeds.iter().filter(|s| s.divergence.is_some()).map(|s| s.seed).collect();
        out.push(check("bounded iterates", diverged.is_empty(), format!("diverged seeds: {diverged:?}")));
    }
    if let Some(ode) = ode {
        out.push(check(
            "slower ODE reaches theta*",
            ode.slow_endpoint_gap <= 1e-6,
            format!("gap {:.3e} at T = {:.4}", ode.slow_endpoint_gap, ode.slow_horizon),
        ));
        out.push(check(
            "faster ODE reaches lambda(theta0)",
            ode.fast_endpoint_gap <= 1e-6,
            format!("gap {:.3e} at T = {:.4}", ode.fast_endpoint_gap, ode.fast_horizon),
        ));
        if !ode.tracking.is_empty() {
            let errs: Vec<f64> = ode.tracking.iter().map(|p| p.error).collect();
            let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
            let last = *errs.last().unwrap();
            out.push(check(
                "tracking errors decrease",
                decreasing && last <= 0.05,
                format!(
                    "errors [{}], final cap 0.05",
                    errs.iter().map(|e| format!("{e:.4e}")).collect::<Vec<_>>().join(", ")
                ),
            ));
        }
    }
    if let Some(a) = audit {
        out.push(check("assumption audit", a.passed(), format!("{} audited rows", a.table().len())));
    }
    out
}

/// Runs the selected pipelines and writes every artifact under `output_dir`.
///
/// Divergence still writes all artifacts and the summary before the
/// divergence failure is returned.
pub fn run_experiment(prep: &Prepared, pipelines: Pipelines) -> Result<Summary, Failure> {
    let out: PathBuf = prep.config.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    if pipelines.oracle {
        write_json(&out.join("oracle.json"), &prep.oracle.export())?;
    }
    let seeds = if pipelines.tdc { run_seeds(prep, &out)? } else { Vec::new() };
    let ode = if pipelines.ode { Some(run_ode(prep, &out)?) } else { None };
    let audit = if pipelines.audit {
        let report = audit_tdc(&prep.problem, &prep.pair, &prep.config.audit.into())
            .map_err(|e| Failure::validation(format!("audit: {e}")))?;
        write_json(&out.join("audit.json"), &report)?;
        Some(report)
    } else {
        None
    };
    let checks = checks(prep, &seeds, ode.as_ref(), audit.as_ref());
    let summary = Summary {
        config: prep.config.clone(),
        pipelines,
        n_states: prep.problem.mdp().n_states(),
        n_actions: prep.problem.mdp().n_actions(),
        dim: prep.oracle.dim(),
        theta_star: prep.oracle.theta_star.iter().copied().collect(),
        seeds,
        ode,
        audit: audit.map(|a| {
            a.table().into_iter().map(|(name, passed)| Check { name, passed, detail: String::new() }).collect()
        }),
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let diverged = summary.diverged();
    if !diverged.is_empty() {
        return Err(Failure::divergence(format!("iterates left the divergence bound for seeds {diverged:?}")));
    }
    Ok(summary)
}

/// `||theta - theta*|| / ||theta*||` recomputed from the last row of a
/// trajectory CSV.
pub fn relative_error_from_csv(csv: &str, theta_star: &[f64]) -> Option<f64> {
    let last = csv.lines().rfind(|l| !l.is_empty())?;
    let theta: Vec<f64> =
        last.split(',').skip(2).take(theta_star.len()).map(|x| x.parse().ok()).collect::<Option<_>>()?;
    Some(dist(&theta, theta_star) / norm(theta_star))
}
