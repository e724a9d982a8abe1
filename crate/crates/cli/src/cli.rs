//! Subcommands and flag handling.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use twoscale::audit::transient_walk;
use twoscale::validate_schedule_pair;

use crate::config::{ExperimentConfig, Pipelines};
use crate::experiment::{run_experiment, Prepared, Summary};
use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "twoscale", version, about = "Two-timescale TDC experiments: oracle, runs, ODE diagnostics, audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config, schedule pair, MDP and oracle; writes nothing.
    Validate(ConfigArgs),
    /// Solve the oracle and print theta*, the lambda map and condition numbers.
    Oracle(RunArgs),
    /// Run TDC for every seed and write trajectory CSVs.
    RunTdc(RunArgs),
    /// Integrate the limiting ODEs and compute tracking errors.
    Ode(RunArgs),
    /// Audit the noise, Lipschitz and step-size assumptions.
    Audit(RunArgs),
    /// Every pipeline enabled in the config.
    Run(RunArgs),
    /// Transient random walk minima.
    WalkDemo(WalkArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file, or the name of a bundled config (chain3, random5, bad_schedule).
    #[arg(long)]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// A seed count N (seeds 0..N) or a comma separated list.
    #[arg(long, value_parser = seed_list)]
    pub seeds: Option<SeedList>,
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub thinning: Option<u64>,
}

#[derive(Debug, Args)]
pub struct WalkArgs {
    /// Probability of stepping up.
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 100_000)]
    pub horizon: u64,
    /// Number of seeds (0..N) or a comma separated list.
    #[arg(long, value_parser = seed_list, default_value = "100")]
    pub seeds: SeedList,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

/// `"5"` is seeds 0..5, `"3,7,11"` is a list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if text.contains(',') {
        text.split(',').map(|s| s.trim().parse::<u64>().map_err(|e| format!("bad seed {s:?}: {e}"))).collect()
    } else {
        let n: u64 = text.parse().map_err(|e| format!("bad seed count {text:?}: {e}"))?;
        if n == 0 {
            return Err("seed count must be at least 1".into());
        }
        Ok((0..n).collect())
    }
}

impl RunArgs {
    pub fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = ExperimentConfig::load(&self.config.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.0.clone();
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(t) = self.thinning {
            cfg.thinning = t;
        }
        Ok(cfg)
    }
}

fn only(oracle: bool, tdc: bool, ode: bool, audit: bool) -> Pipelines {
    Pipelines { oracle, tdc, ode, audit }
}

fn print_checks(out: &mut impl Write, summary: &Summary) -> std::io::Result<()> {
    for c in &summary.checks {
        writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    writeln!(out, "summary: {}", summary.config.output_dir.join("summary.json").display())
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn validate(args: &ConfigArgs, out: &mut impl Write) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let report = validate_schedule_pair(&cfg.schedule.build());
    let w = |e: std::io::Error| Failure::io(e);
    for c in &report.clauses {
        writeln!(out, "{} schedule {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.label, c.detail).map_err(w)?;
    }
    let prep = Prepared::new(cfg)?;
    writeln!(
        out,
        "PASS problem: {} states, {} actions, {} features, oracle solved",
        prep.problem.mdp().n_states(),
        prep.problem.mdp().n_actions(),
        prep.oracle.dim()
    )
    .map_err(w)
}

fn oracle(args: &RunArgs, out: &mut impl Write) -> Result<(), Failure> {
    let prep = Prepared::new(args.load()?)?;
    let sol = &prep.oracle;
    let w = |e: std::io::Error| Failure::io(e);
    writeln!(out, "theta* = {}", fmt_vec(sol.theta_star.iter().copied())).map_err(w)?;
    writeln!(out, "lambda(theta) = C^-1 b - C^-1 A theta").map_err(w)?;
    writeln!(out, "  C^-1 b = {}", fmt_vec(sol.lambda.c_inv_b.iter().copied())).map_err(w)?;
    for r in 0..sol.lambda.c_inv_a.nrows() {
        writeln!(out, "  C^-1 A[{r}] = {}", fmt_vec(sol.lambda.c_inv_a.row(r).iter().copied())).map_err(w)?;
    }
    let c = &sol.cond;
    writeln!(out, "cond(A) = {:.6e}, cond(C) = {:.6e}", c.cond_a, c.cond_c).map_err(w)?;
    writeln!(out, "eig(C) in [{:.6e}, {:.6e}]", c.c_eigen_min, c.c_eigen_max).map_err(w)?;
    writeln!(out, "max Re eig(-A'C^-1 A) = {:.6e}", c.slow_max_real).map_err(w)?;
    let summary = run_experiment(&prep, only(true, false, false, false))?;
    print_checks(out, &summary).map_err(w)
}

fn pipeline(args: &RunArgs, pipelines: Option<Pipelines>, out: &mut impl Write) -> Result<(), Failure> {
    let prep = Prepared::new(args.load()?)?;
    let pipelines = pipelines.unwrap_or(prep.config.pipelines);
    let result = run_experiment(&prep, pipelines);
    let summary = match &result {
        Ok(s) => Some(s.clone()),
        Err(_) => {
            let path = prep.config.output_dir.join("summary.json");
            std::fs::read_to_string(path).ok().and_then(|t| serde_json::from_str::<Summary>(&t).ok())
        }
    };
    if let Some(s) = summary {
        print_checks(out, &s).map_err(Failure::io)?;
    }
    result.map(|_| ())
}

fn walk_demo(args: &WalkArgs, out: &mut impl Write) -> Result<(), Failure> {
    let w = |e: std::io::Error| Failure::io(e);
    writeln!(out, "seed,min_position,final_position,sup_l").map_err(w)?;
    let mut worst = 0i64;
    for &seed in &args.seeds.0 {
        let s = transient_walk(args.p, args.horizon, seed).map_err(Failure::validation)?;
        worst = worst.min(s.min_position);
        writeln!(out, "{},{},{},{}", s.seed, s.min_position, s.final_position, s.sup_l).map_err(w)?;
    }
    writeln!(
        out,
        "# p = {}, horizon = {}, runs = {}, lowest minimum = {worst}",
        args.p,
        args.horizon,
        args.seeds.0.len()
    )
    .map_err(w)
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Validate(a) => validate(a, out),
        Command::Oracle(a) => oracle(a, out),
        Command::RunTdc(a) => pipeline(a, Some(only(true, true, false, false)), out),
        Command::Ode(a) => pipeline(a, Some(only(true, false, true, false)), out),
        Command::Audit(a) => pipeline(a, Some(only(false, false, false, true)), out),
        Command::Run(a) => pipeline(a, None, out),
        Command::WalkDemo(a) => walk_demo(a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse_as_count_or_list() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9,2").unwrap(), vec![4, 9, 2]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("1,x").is_err());
    }

    #[test]
    fn flags_override_the_config() {
        let cli = Cli::try_parse_from([
            "twoscale",
            "run-tdc",
            "--config",
            "chain3",
            "--out",
            "/tmp/x",
            "--seeds",
            "2",
            "--horizon",
            "50",
            "--thinning",
            "5",
        ])
        .unwrap();
        let Command::RunTdc(args) = &cli.command else { panic!("wrong subcommand") };
        let cfg = args.load().unwrap();
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!((cfg.horizon, cfg.thinning), (50, 5));
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn walk_demo_defaults() {
        let cli = Cli::try_parse_from(["twoscale", "walk-demo"]).unwrap();
        let Command::WalkDemo(w) = &cli.command else { panic!("wrong subcommand") };
        assert_eq!((w.p, w.horizon, w.seeds.0.len()), (0.9, 100_000, 100));
    }

    #[test]
    fn failures_map_to_exit_codes() {
        assert_eq!(Failure::validation("x").exit_code(), 2);
        assert_eq!(Failure::divergence("x").exit_code(), 3);
        assert_eq!(Failure::io("x").exit_code(), 4);
        let rec: serde_json::Value = serde_json::from_str(&Failure::io("disk").record()).unwrap();
        assert_eq!(rec["error"], "io");
        assert_eq!(rec["exit_code"], 4);
    }
}
