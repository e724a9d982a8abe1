//! Generic driver for coupled two-timescale recursions with Markov noise.
//!
//! ```text
//! theta_{n+1} = theta_n + a(n) H(theta_n, w_n, Z_n, xi_n)
//! w_{n+1}     = w_n     + b(n) G(theta_n, w_n, Z_n, xi_n)
//! Z_{n+1}     = next(Z_n, xi_n)
//! ```
//!
//! `H` and `G` are sampled updates; their conditional means `h`, `g` given the
//! noise state are optional and only used by diagnostics. Slow time is
//! `t(n) = a(0) + ... + a(n-1)`, accumulated with compensated summation.

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dist, norm, CompensatedSum};
use crate::oracle::LambdaMap;
use crate::{seeded_rng, Error, Result};

/// Power-law step size `a(n) = scale / (n + offset)^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub scale: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl StepSchedule {
    pub fn power_law(scale: f64, offset: f64, exponent: f64) -> Self {
        Self { scale, offset, exponent }
    }

    /// `base / (1 + n / n0)^exponent`, rewritten in power-law form.
    pub fn relative(base: f64, n0: f64, exponent: f64) -> Self {
        Self { scale: base * n0.powf(exponent), offset: n0, exponent }
    }

    pub fn at(&self, n: u64) -> f64 {
        let x = n as f64 + self.offset;
        if self.exponent == 1.0 {
            self.scale / x
        } else {
            self.scale * x.powf(-self.exponent)
        }
    }

    /// `t(n) = sum_{m < n} a(m)`.
    pub fn elapsed(&self, n: u64) -> f64 {
        let mut acc = CompensatedSum::default();
        for m in 0..n {
            acc.add(self.at(m));
        }
        acc.value()
    }

    /// Smallest `m >= start` with `a(start) + ... + a(m - 1) >= span`.
    pub fn index_after(&self, start: u64, span: f64) -> u64 {
        let mut acc = CompensatedSum::default();
        let mut m = start;
        while acc.value() < span {
            acc.add(self.at(m));
            m += 1;
        }
        m
    }

    pub fn describe(&self) -> String {
        format!("{}/(n+{})^{}", self.scale, self.offset, self.exponent)
    }
}

/// Slow (`a`) and fast (`b`) schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePair {
    pub slow: StepSchedule,
    pub fast: StepSchedule,
}

impl SchedulePair {
    pub fn new(slow: StepSchedule, fast: StepSchedule) -> Self {
        Self { slow, fast }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleClause {
    Positive,
    NonIncreasing,
    DivergentSum,
    SquareSummable,
    RatioVanishes,
}

impl ScheduleClause {
    pub fn label(self) -> &'static str {
        match self {
            Self::Positive => "a(n), b(n) > 0",
            Self::NonIncreasing => "a(n), b(n) non-increasing",
            Self::DivergentSum => "sum a(n) = sum b(n) = inf",
            Self::SquareSummable => "sum a(n)^2 + b(n)^2 < inf",
            Self::RatioVanishes => "a(n)/b(n) -> 0",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseCheck {
    pub clause: ScheduleClause,
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub clauses: Vec<ClauseCheck>,
}

impl ScheduleReport {
    pub fn is_valid(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ClauseCheck> {
        self.clauses.iter().filter(|c| !c.passed)
    }

    pub fn passed(&self, clause: ScheduleClause) -> bool {
        self.clauses.iter().any(|c| c.clause == clause && c.passed)
    }
}

/// Analytic check of the step-size conditions on the power-law family.
pub fn validate_schedule_pair(pair: &SchedulePair) -> ScheduleReport {
    let (a, b) = (pair.slow, pair.fast);
    let both = |f: &dyn Fn(&StepSchedule) -> bool| f(&a) && f(&b);
    let mut clauses = Vec::new();
    let mut push = |clause: ScheduleClause, passed: bool, detail: String| {
        clauses.push(ClauseCheck { clause, label: clause.label().into(), passed, detail });
    };
    push(
        ScheduleClause::Positive,
        both(&|s| s.scale > 0.0 && s.scale.is_finite() && s.offset >= 1.0 && s.offset.is_finite()),
        format!("scales {} and {}, offsets {} and {}", a.scale, b.scale, a.offset, b.offset),
    );
    push(
        ScheduleClause::NonIncreasing,
        both(&|s| s.exponent >= 0.0),
        format!("exponents {} and {}", a.exponent, b.exponent),
    );
    push(
        ScheduleClause::DivergentSum,
        both(&|s| s.exponent <= 1.0),
        format!("needs exponents <= 1, got {} and {}", a.exponent, b.exponent),
    );
    push(
        ScheduleClause::SquareSummable,
        both(&|s| 2.0 * s.exponent > 1.0),
        format!("needs exponents > 0.5, got {} and {}", a.exponent, b.exponent),
    );
    push(
        ScheduleClause::RatioVanishes,
        a.exponent > b.exponent,
        format!("needs slow exponent {} > fast exponent {}", a.exponent, b.exponent),
    );
    ScheduleReport { clauses }
}

/// Contract between a concrete recursion and the engine.
///
/// `Noise` is the Markov noise state `Z_n`. [`step`](Self::step) performs one
/// transition of the noise process and writes the sampled updates; the
/// optional exact means must satisfy `E[H | Z = z] = slow_mean(theta, w, z)`
/// for draws made by [`sample_updates`](Self::sample_updates).
pub trait TwoTimescaleProblem {
    type Noise: Clone;

    fn dim_theta(&self) -> usize;
    fn dim_w(&self) -> usize;

    fn initial_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Noise;

    /// Draws the step's randomness, writes `H` into `slow` and `G` into
    /// `fast`, and returns the next noise state.
    #[allow(clippy::too_many_arguments)]
    fn step<R: Rng + ?Sized>(
        &self,
        z: &Self::Noise,
        theta: &[f64],
        w: &[f64],
        control: Option<&[f64]>,
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) -> Self::Noise;

    /// Fresh draw of `(H, G)` given only `z`.
    fn sample_updates<R: Rng + ?Sized>(
        &self,
        z: &Self::Noise,
        theta: &[f64],
        w: &[f64],
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) {
        let _ = self.step(z, theta, w, None, rng, slow, fast);
    }

    /// Control process hook; uncontrolled by default.
    fn control(&self, _n: u64, _z: &Self::Noise, _theta: &[f64], _w: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn slow_mean(&self, _theta: &[f64], _w: &[f64], _z: &Self::Noise) -> Option<Vec<f64>> {
        None
    }

    fn fast_mean(&self, _theta: &[f64], _w: &[f64], _z: &Self::Noise) -> Option<Vec<f64>> {
        None
    }

    /// Representatives of every distinct conditioning noise state, for
    /// diagnostics that take a supremum over `z`. Empty when unknown.
    fn noise_support(&self) -> Vec<Self::Noise> {
        Vec::new()
    }
}

/// Wraps a problem with `H = 0`, freezing `theta` at its initial value.
#[derive(Clone, Debug)]
pub struct FrozenSlow<P>(pub P);

impl<P: TwoTimescaleProblem> TwoTimescaleProblem for FrozenSlow<P> {
    type Noise = P::Noise;

    fn dim_theta(&self) -> usize {
        self.0.dim_theta()
    }

    fn dim_w(&self) -> usize {
        self.0.dim_w()
    }

    fn initial_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> P::Noise {
        self.0.initial_noise(rng)
    }

    fn step<R: Rng + ?Sized>(
        &self,
        z: &P::Noise,
        theta: &[f64],
        w: &[f64],
        control: Option<&[f64]>,
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) -> P::Noise {
        let next = self.0.step(z, theta, w, control, rng, slow, fast);
        slow.fill(0.0);
        next
    }

    fn sample_updates<R: Rng + ?Sized>(
        &self,
        z: &P::Noise,
        theta: &[f64],
        w: &[f64],
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) {
        self.0.sample_updates(z, theta, w, rng, slow, fast);
        slow.fill(0.0);
    }

    fn control(&self, n: u64, z: &P::Noise, theta: &[f64], w: &[f64]) -> Option<Vec<f64>> {
        self.0.control(n, z, theta, w)
    }

    fn slow_mean(&self, theta: &[f64], _w: &[f64], _z: &P::Noise) -> Option<Vec<f64>> {
        Some(vec![0.0; theta.len()])
    }

    fn fast_mean(&self, theta: &[f64], w: &[f64], z: &P::Noise) -> Option<Vec<f64>> {
        self.0.fast_mean(theta, w, z)
    }

    fn noise_support(&self) -> Vec<P::Noise> {
        self.0.noise_support()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One noise stream drives both recursions.
    #[default]
    Shared,
    /// Each recursion owns an independent copy of the noise process.
    Independent,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub horizon: u64,
    pub seed: u64,
    pub thinning: u64,
    pub divergence_bound: f64,
    pub noise_mode: NoiseMode,
    pub theta0: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
    /// Registers the coupling diagnostic `||w_n - lambda(theta_n)||`.
    pub lambda: Option<LambdaMap>,
    pub record_noise: bool,
    /// Iterate ranges recorded densely on top of the thinned stream.
    pub dense_windows: Vec<Range<u64>>,
}

impl RunConfig {
    pub const DEFAULT_THINNING: u64 = 100;
    pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

    pub fn new(horizon: u64, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            thinning: Self::DEFAULT_THINNING,
            divergence_bound: Self::DEFAULT_DIVERGENCE_BOUND,
            noise_mode: NoiseMode::Shared,
            theta0: None,
            w0: None,
            lambda: None,
            record_noise: false,
            dense_windows: Vec::new(),
        }
    }

    pub fn thinning(mut self, stride: u64) -> Self {
        self.thinning = stride;
        self
    }

    pub fn divergence_bound(mut self, bound: f64) -> Self {
        self.divergence_bound = bound;
        self
    }

    pub fn noise_mode(mut self, mode: NoiseMode) -> Self {
        self.noise_mode = mode;
        self
    }

    pub fn initial(mut self, theta0: Vec<f64>, w0: Vec<f64>) -> Self {
        self.theta0 = Some(theta0);
        self.w0 = Some(w0);
        self
    }

    pub fn lambda(mut self, lambda: LambdaMap) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn record_noise(mut self, on: bool) -> Self {
        self.record_noise = on;
        self
    }

    pub fn dense_window(mut self, range: Range<u64>) -> Self {
        self.dense_windows.push(range);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// First iterate index whose norm left the bound.
    pub n: u64,
    /// `||theta_n|| + ||w_n||` at that index (may be non-finite).
    pub norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecadeMedian {
    /// Covers iterates `n` in `[10^decade, 10^(decade+1))`.
    pub decade: u32,
    pub median: f64,
    pub count: usize,
}

/// Borrowed view of one iterate handed to run observers.
#[derive(Debug)]
pub struct IterateView<'a, Z> {
    pub n: u64,
    pub t: f64,
    pub theta: &'a [f64],
    pub w: &'a [f64],
    pub noise: &'a Z,
    pub coupling: Option<f64>,
}

/// Recorded iterates `(n, t(n), theta_n, w_n)` plus diagnostics.
///
/// Records cover every `stride`-th iterate, any dense windows, and the final
/// iterate. Storage is flat; use the accessors.
#[derive(Clone, Debug)]
pub struct TrajectoryLog<Z> {
    pub stride: u64,
    pub seed: u64,
    pub horizon: u64,
    pub schedule: SchedulePair,
    dim_theta: usize,
    dim_w: usize,
    ns: Vec<u64>,
    ts: Vec<f64>,
    thetas: Vec<f64>,
    ws: Vec<f64>,
    noise: Vec<Z>,
    coupling: Vec<f64>,
    /// Exact per-decade medians of the unthinned coupling error.
    pub decade_medians: Vec<DecadeMedian>,
    pub divergence: Option<Divergence>,
}

impl<Z> TrajectoryLog<Z> {
    pub fn len(&self) -> usize {
        self.ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ns.is_empty()
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn n(&self, i: usize) -> u64 {
        self.ns[i]
    }

    pub fn t(&self, i: usize) -> f64 {
        self.ts[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.ts
    }

    pub fn indices(&self) -> &[u64] {
        &self.ns
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.dim_theta..(i + 1) * self.dim_theta]
    }

    pub fn w(&self, i: usize) -> &[f64] {
        &self.ws[i * self.dim_w..(i + 1) * self.dim_w]
    }

    pub fn noise(&self, i: usize) -> Option<&Z> {
        self.noise.get(i)
    }

    pub fn has_noise(&self) -> bool {
        !self.noise.is_empty()
    }

    /// Coupling error at record `i`, when a lambda map was registered.
    pub fn coupling(&self, i: usize) -> Option<f64> {
        self.coupling.get(i).copied()
    }

    pub fn last(&self) -> usize {
        self.ns.len() - 1
    }

    pub fn final_theta(&self) -> &[f64] {
        self.theta(self.last())
    }

    pub fn final_w(&self) -> &[f64] {
        self.w(self.last())
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Record index holding iterate `n`, if recorded.
    pub fn position(&self, n: u64) -> Option<usize> {
        self.ns.binary_search(&n).ok()
    }

    /// Writes `n,t,theta_0..,w_0..,coupling_err`; the last column is empty
    /// when no lambda map was registered.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["n".to_string(), "t".to_string()];
        header.extend((0..self.dim_theta).map(|i| format!("theta_{i}")));
        header.extend((0..self.dim_w).map(|i| format!("w_{i}")));
        header.push("coupling_err".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(out, "{},{}", self.ns[i], self.ts[i])?;
            for x in self.theta(i).iter().chain(self.w(i)) {
                write!(out, ",{x}")?;
            }
            match self.coupling(i) {
                Some(c) => writeln!(out, ",{c}")?,
                None => writeln!(out, ",")?,
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> LogSummary {
        let last = self.last();
        LogSummary {
            seed: self.seed,
            horizon: self.horizon,
            final_n: self.ns[last],
            final_t: self.ts[last],
            final_theta: self.final_theta().to_vec(),
            final_w: self.final_w().to_vec(),
            final_coupling_error: self.coupling(last),
            decade_medians: self.decade_medians.clone(),
            diverged: self.diverged(),
            divergence: self.divergence,
            thinning: self.stride,
            schedule: self.schedule,
            schedule_text: format!(
                "a(n) = {}, b(n) = {}",
                self.schedule.slow.describe(),
                self.schedule.fast.describe()
            ),
        }
    }

    fn push(&mut self, n: u64, t: f64, theta: &[f64], w: &[f64], z: Option<&Z>, coupling: Option<f64>)
    where
        Z: Clone,
    {
        self.ns.push(n);
        self.ts.push(t);
        self.thetas.extend_from_slice(theta);
        self.ws.extend_from_slice(w);
        if let Some(z) = z {
            self.noise.push(z.clone());
        }
        if let Some(c) = coupling {
            self.coupling.push(c);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub seed: u64,
    pub horizon: u64,
    pub final_n: u64,
    pub final_t: f64,
    pub final_theta: Vec<f64>,
    pub final_w: Vec<f64>,
    pub final_coupling_error: Option<f64>,
    pub decade_medians: Vec<DecadeMedian>,
    pub diverged: bool,
    pub divergence: Option<Divergence>,
    pub thinning: u64,
    pub schedule: SchedulePair,
    pub schedule_text: String,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn decade_of(n: u64) -> Option<u32> {
    (n > 0).then(|| n.ilog10())
}

/// Streaming per-decade medians.
#[derive(Default)]
struct DecadeAccumulator {
    current: Option<u32>,
    buf: Vec<f64>,
    out: Vec<DecadeMedian>,
}

impl DecadeAccumulator {
    fn push(&mut self, n: u64, value: f64) {
        let Some(d) = decade_of(n) else { return };
        if self.current != Some(d) {
            self.flush();
            self.current = Some(d);
        }
        self.buf.push(value);
    }

    fn flush(&mut self) {
        if let Some(decade) = self.current.take() {
            if !self.buf.is_empty() {
                let count = self.buf.len();
                let median = median(&mut self.buf);
                self.out.push(DecadeMedian { decade, median, count });
            }
        }
        self.buf.clear();
    }

    fn finish(mut self) -> Vec<DecadeMedian> {
        self.flush();
        self.out
    }
}

pub fn run_two_timescale<P: TwoTimescaleProblem>(
    problem: &P,
    pair: &SchedulePair,
    cfg: &RunConfig,
) -> Result<TrajectoryLog<P::Noise>> {
    run_two_timescale_observed(problem, pair, cfg, |_| {})
}

/// Runs the coupled recursion, calling `observer` on every iterate
/// `n = 0..=horizon` (unthinned).
///
/// Divergence does not produce an `Err`: the run halts and the partial log
/// comes back with [`TrajectoryLog::divergence`] set.
pub fn run_two_timescale_observed<P, F>(
    problem: &P,
    pair: &SchedulePair,
    cfg: &RunConfig,
    mut observer: F,
) -> Result<TrajectoryLog<P::Noise>>
where
    P: TwoTimescaleProblem,
    F: FnMut(&IterateView<'_, P::Noise>),
{
    let report = validate_schedule_pair(pair);
    if !report.is_valid() {
        let failed: Vec<&str> = report.failures().map(|c| c.label.as_str()).collect();
        return Err(Error::InvalidArgument(format!("step-size schedule rejected: {}", failed.join("; "))));
    }
    if cfg.horizon == 0 || cfg.thinning == 0 {
        return Err(Error::InvalidArgument("horizon and thinning must be at least 1".into()));
    }
    let (dt, dw) = (problem.dim_theta(), problem.dim_w());
    let mut theta = cfg.theta0.clone().unwrap_or_else(|| vec![0.0; dt]);
    let mut w = cfg.w0.clone().unwrap_or_else(|| vec![0.0; dw]);
    if theta.len() != dt || w.len() != dw {
        return Err(Error::Shape(format!(
            "initial iterates have lengths ({}, {}), problem expects ({dt}, {dw})",
            theta.len(),
            w.len()
        )));
    }
    if let Some(l) = &cfg.lambda {
        if l.dim_theta() != dt || l.dim_w() != dw {
            return Err(Error::Shape("lambda map dimensions do not match the problem".into()));
        }
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut z = problem.initial_noise(&mut rng);
    let mut z_fast = match cfg.noise_mode {
        NoiseMode::Shared => None,
        NoiseMode::Independent => Some(problem.initial_noise(&mut rng)),
    };

    let mut log = TrajectoryLog {
        stride: cfg.thinning,
        seed: cfg.seed,
        horizon: cfg.horizon,
        schedule: *pair,
        dim_theta: dt,
        dim_w: dw,
        ns: Vec::new(),
        ts: Vec::new(),
        thetas: Vec::new(),
        ws: Vec::new(),
        noise: Vec::new(),
        coupling: Vec::new(),
        decade_medians: Vec::new(),
        divergence: None,
    };
    let mut decades = DecadeAccumulator::default();
    let mut lam = vec![0.0; dw];
    let coupling_at = |theta: &[f64], w: &[f64], lam: &mut [f64]| {
        cfg.lambda.as_ref().map(|l| {
            l.eval_into(theta, lam);
            dist(w, lam)
        })
    };
    let wants_record =
        |n: u64| n % cfg.thinning == 0 || n == cfg.horizon || cfg.dense_windows.iter().any(|r| r.contains(&n));

    let mut clock = CompensatedSum::default();
    let c0 = coupling_at(&theta, &w, &mut lam);
    observer(&IterateView { n: 0, t: 0.0, theta: &theta, w: &w, noise: &z, coupling: c0 });
    log.push(0, 0.0, &theta, &w, cfg.record_noise.then_some(&z), c0);

    let mut h = vec![0.0; dt];
    let mut g = vec![0.0; dw];
    let mut scratch = vec![0.0; dt];
    for n in 0..cfg.horizon {
        let a = pair.slow.at(n);
        let b = pair.fast.at(n);
        let control = problem.control(n, &z, &theta, &w);
        let next = problem.step(&z, &theta, &w, control.as_deref(), &mut rng, &mut h, &mut g);
        if let Some(zf) = z_fast.as_mut() {
            let control = problem.control(n, zf, &theta, &w);
            *zf = problem.step(zf, &theta, &w, control.as_deref(), &mut rng, &mut scratch, &mut g);
        }
        axpy(a, &h, &mut theta);
        axpy(b, &g, &mut w);
        z = next;
        clock.add(a);

        let m = n + 1;
        let t = clock.value();
        let coupling = coupling_at(&theta, &w, &mut lam);
        if let Some(c) = coupling {
            decades.push(m, c);
        }
        observer(&IterateView { n: m, t, theta: &theta, w: &w, noise: &z, coupling });

        let size = norm(&theta) + norm(&w);
        let diverged = !(size <= cfg.divergence_bound);
        if diverged || wants_record(m) {
            log.push(m, t, &theta, &w, cfg.record_noise.then_some(&z), coupling);
        }
        if diverged {
            log.divergence = Some(Divergence { n: m, norm: size });
            break;
        }
    }
    log.decade_medians = decades.finish();
    Ok(log)
}

/// Piecewise-linear interpolation `(theta_bar(t), w_bar(t))`.
///
/// Requires the bracketing records to be consecutive iterates unless `t` is
/// itself a recorded knot.
pub fn interpolate<Z>(log: &TrajectoryLog<Z>, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (start, end) = (log.ts[0], log.ts[log.last()]);
    if !(t >= start && t <= end) {
        return Err(Error::OutOfRange { t, start, end });
    }
    let i = log.ts.partition_point(|&x| x <= t) - 1;
    if log.ts[i] == t {
        return Ok((log.theta(i).to_vec(), log.w(i).to_vec()));
    }
    if log.ns[i + 1] != log.ns[i] + 1 {
        return Err(Error::ThinnedLog { t });
    }
    let frac = (t - log.ts[i]) / (log.ts[i + 1] - log.ts[i]);
    let lerp = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + frac * (q - p)).collect::<Vec<_>>();
    Ok((lerp(log.theta(i), log.theta(i + 1)), lerp(log.w(i), log.w(i + 1))))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CouplingSeries {
    pub points: Vec<(u64, f64)>,
    pub decade_medians: Vec<DecadeMedian>,
}

impl CouplingSeries {
    /// True when the medians never increase from `decade` onward.
    pub fn medians_non_increasing_from(&self, decade: u32) -> bool {
        non_increasing_from(&self.decade_medians, decade)
    }
}

pub fn non_increasing_from(medians: &[DecadeMedian], decade: u32) -> bool {
    let tail: Vec<f64> = medians.iter().filter(|d| d.decade >= decade).map(|d| d.median).collect();
    tail.windows(2).all(|w| w[1] <= w[0])
}

/// `||w_n - lambda(theta_n)||` at every record, with per-decade medians over
/// the recorded iterates.
pub fn coupling_error_series<Z>(log: &TrajectoryLog<Z>, lambda: &LambdaMap) -> CouplingSeries {
    let mut lam = vec![0.0; log.dim_w];
    let mut decades = DecadeAccumulator::default();
    let points = (0..log.len())
        .map(|i| {
            lambda.eval_into(log.theta(i), &mut lam);
            let e = dist(log.w(i), &lam);
            decades.push(log.ns[i], e);
            (log.ns[i], e)
        })
        .collect();
    CouplingSeries { points, decade_medians: decades.finish() }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    /// Deterministic linear recursion `H = k_theta * theta`, `G = k_w * w`.
    pub(crate) struct Linear {
        pub dim: usize,
        pub k_theta: f64,
        pub k_w: f64,
    }

    impl TwoTimescaleProblem for Linear {
        type Noise = ();

        fn dim_theta(&self) -> usize {
            self.dim
        }

        fn dim_w(&self) -> usize {
            self.dim
        }

        fn initial_noise<R: Rng + ?Sized>(&self, _rng: &mut R) {}

        fn step<R: Rng + ?Sized>(
            &self,
            _z: &(),
            theta: &[f64],
            w: &[f64],
            _control: Option<&[f64]>,
            _rng: &mut R,
            slow: &mut [f64],
            fast: &mut [f64],
        ) {
            for (o, x) in slow.iter_mut().zip(theta) {
                *o = self.k_theta * x;
            }
            for (o, x) in fast.iter_mut().zip(w) {
                *o = self.k_w * x;
            }
        }

        fn slow_mean(&self, theta: &[f64], _w: &[f64], _z: &()) -> Option<Vec<f64>> {
            Some(theta.iter().map(|x| self.k_theta * x).collect())
        }

        fn fast_mean(&self, _theta: &[f64], w: &[f64], _z: &()) -> Option<Vec<f64>> {
            Some(w.iter().map(|x| self.k_w * x).collect())
        }

        fn noise_support(&self) -> Vec<()> {
            vec![()]
        }
    }

    fn harmonic() -> SchedulePair {
        SchedulePair::new(StepSchedule::power_law(1.0, 1.0, 1.0), StepSchedule::power_law(1.0, 1.0, 0.6))
    }

    #[test]
    fn schedule_validation_examples() {
        assert!(validate_schedule_pair(&harmonic()).is_valid());
        let same = StepSchedule::power_law(1.0, 1.0, 1.0);
        let r = validate_schedule_pair(&SchedulePair::new(same, same));
        let failed: Vec<_> = r.failures().map(|c| c.clause).collect();
        assert_eq!(failed, vec![ScheduleClause::RatioVanishes]);
        let slow = StepSchedule::power_law(1.0, 1.0, 0.4);
        let r = validate_schedule_pair(&SchedulePair::new(slow, StepSchedule::power_law(1.0, 1.0, 0.3)));
        assert!(!r.passed(ScheduleClause::SquareSummable));
        assert!(r.passed(ScheduleClause::DivergentSum));
        let r = validate_schedule_pair(&SchedulePair::new(StepSchedule::power_law(-1.0, 1.0, 1.0), harmonic().fast));
        assert!(!r.passed(ScheduleClause::Positive));
    }

    #[test]
    fn relative_schedule_matches_definition() {
        let s = StepSchedule::relative(0.5, 1e4, 0.6);
        for n in [0u64, 1, 10, 12345, 2_000_000] {
            let direct = 0.5 / (1.0 + n as f64 / 1e4).powf(0.6);
            assert!((s.at(n) - direct).abs() <= 1e-14 * direct);
        }
        assert_eq!(StepSchedule::relative(0.5, 1e4, 1.0).at(0), 0.5);
    }

    #[test]
    fn zero_updates_keep_iterates() {
        let p = Linear { dim: 2, k_theta: 0.0, k_w: 0.0 };
        let cfg = RunConfig::new(500, 1).thinning(7).initial(vec![1.0, -2.0], vec![0.5, 3.0]);
        let log = run_two_timescale(&p, &harmonic(), &cfg).unwrap();
        for i in 0..log.len() {
            assert_eq!(log.theta(i), &[1.0, -2.0]);
            assert_eq!(log.w(i), &[0.5, 3.0]);
        }
    }

    #[test]
    fn contraction_matches_closed_form_product() {
        // theta_n = theta_0 prod (1 - 1/(m+1)) = theta_0 / (n + 1) once n >= 1; a(0) = 1 zeroes it.
        let p = Linear { dim: 1, k_theta: -1.0, k_w: 0.0 };
        let pair = SchedulePair::new(StepSchedule::power_law(1.0, 2.0, 1.0), StepSchedule::power_law(1.0, 2.0, 0.6));
        let cfg = RunConfig::new(1000, 0).thinning(1).initial(vec![3.0], vec![0.0]);
        let log = run_two_timescale(&p, &pair, &cfg).unwrap();
        // a(n) = 1/(n+2): prod_{m<n} (1 - 1/(m+2)) = 1/(n+1)
        for i in 0..log.len() {
            let n = log.n(i) as f64;
            assert!((log.theta(i)[0] - 3.0 / (n + 1.0)).abs() < 1e-12);
        }
        // with a(n) = 1/(n+1) the first factor is zero
        let log = run_two_timescale(&p, &harmonic(), &cfg).unwrap();
        assert_eq!(log.theta(0), &[3.0]);
        assert!(log.indices()[1..].iter().zip(1..).all(|(_, i)| log.theta(i)[0] == 0.0));
    }

    #[test]
    fn log_is_stride_complete_and_time_consistent() {
        let p = Linear { dim: 1, k_theta: -0.5, k_w: -1.0 };
        let pair = harmonic();
        let cfg = RunConfig::new(1003, 2).thinning(10).dense_window(500..505);
        let log = run_two_timescale(&p, &pair, &cfg).unwrap();
        let mut expected: Vec<u64> = (0..=1000).step_by(10).collect();
        expected.extend([501, 502, 503, 504, 1003]);
        expected.sort();
        assert_eq!(log.indices(), expected.as_slice());
        for i in 0..log.len() {
            let t = pair.slow.elapsed(log.n(i));
            assert!((log.t(i) - t).abs() < 1e-12);
        }
        assert!(log.times().windows(2).all(|w| w[1] > w[0]));
        let i = log.position(502).unwrap();
        assert!((log.t(i + 1) - log.t(i) - pair.slow.at(502)).abs() < 1e-14);
    }

    #[test]
    fn divergence_is_flagged_before_horizon() {
        let p = Linear { dim: 1, k_theta: 1.0, k_w: 0.0 };
        let pair = SchedulePair::new(StepSchedule::power_law(1.0, 1.0, 0.7), StepSchedule::power_law(1.0, 1.0, 0.6));
        let cfg = RunConfig::new(1_000_000, 0).initial(vec![1.0], vec![0.0]);
        let log = run_two_timescale(&p, &pair, &cfg).unwrap();
        let div = log.divergence.unwrap();
        assert!(div.n < 1_000_000 && div.norm > 1e6);
        assert_eq!(log.n(log.last()), div.n);
    }

    #[test]
    fn rejected_schedule_is_an_error() {
        let p = Linear { dim: 1, k_theta: 0.0, k_w: 0.0 };
        let s = StepSchedule::power_law(1.0, 1.0, 1.0);
        let err = run_two_timescale(&p, &SchedulePair::new(s, s), &RunConfig::new(10, 0)).unwrap_err();
        assert!(err.to_string().contains("a(n)/b(n)"));
    }

    #[test]
    fn interpolation_examples() {
        let p = Linear { dim: 1, k_theta: -1.0, k_w: -1.0 };
        let cfg = RunConfig::new(50, 0).thinning(1).initial(vec![2.0], vec![1.0]);
        let log = run_two_timescale(&p, &harmonic(), &cfg).unwrap();
        for i in [0, 5, 50] {
            let (th, w) = interpolate(&log, log.t(i)).unwrap();
            assert_eq!(th, log.theta(i));
            assert_eq!(w, log.w(i));
        }
        let mid = 0.5 * (log.t(10) + log.t(11));
        let (th, _) = interpolate(&log, mid).unwrap();
        assert!((th[0] - 0.5 * (log.theta(10)[0] + log.theta(11)[0])).abs() < 1e-14);
        assert!(matches!(interpolate(&log, log.t(50) + 1.0), Err(Error::OutOfRange { .. })));

        let thinned = run_two_timescale(&p, &harmonic(), &RunConfig::new(50, 0).thinning(5)).unwrap();
        assert!(matches!(interpolate(&thinned, 0.5 * (thinned.t(1) + thinned.t(2))), Err(Error::ThinnedLog { .. })));
    }

    #[test]
    fn coupling_series_examples() {
        let p = Linear { dim: 2, k_theta: 0.0, k_w: 0.0 };
        let lambda = LambdaMap::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0]));
        // w0 = lambda(theta0) exactly
        let cfg = RunConfig::new(200, 0).thinning(1).initial(vec![0.5, 0.5], vec![0.5, -0.5]).lambda(lambda.clone());
        let log = run_two_timescale(&p, &harmonic(), &cfg).unwrap();
        let series = coupling_error_series(&log, &lambda);
        assert!(series.points.iter().all(|&(_, e)| e == 0.0));
        let cfg = RunConfig::new(200, 0).thinning(1).initial(vec![0.0, 0.0], vec![0.0, 0.0]).lambda(lambda.clone());
        let log = run_two_timescale(&p, &harmonic(), &cfg).unwrap();
        let series = coupling_error_series(&log, &lambda);
        assert!(series.points.iter().all(|&(_, e)| e == 1.0));
        assert_eq!(series.decade_medians.len(), 3);
        assert_eq!(series.decade_medians, log.decade_medians);
        assert!(series.medians_non_increasing_from(0));
    }

    #[test]
    fn csv_header_and_rows() {
        let p = Linear { dim: 2, k_theta: -1.0, k_w: -1.0 };
        let log = run_two_timescale(&p, &harmonic(), &RunConfig::new(20, 0).thinning(10)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,t,theta_0,theta_1,w_0,w_1,coupling_err");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
