//! Checks of the recursion's standing assumptions on concrete instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{validate_schedule_pair, SchedulePair, ScheduleReport, TwoTimescaleProblem};
use crate::linalg::norm;
use crate::tdc::TdcProblem;
use crate::{seeded_rng, Error, Result};

/// Per-coordinate Welford accumulator.
struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / k;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn std_dev(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|v| (v / denom).sqrt()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCheck {
    /// `||mean(H) - h||`.
    pub deviation: f64,
    /// `4 ||sigma_hat|| / sqrt(n)`.
    pub bound: f64,
    /// Every coordinate within its own 4-sigma band.
    pub passed: bool,
    /// `mean ||H - h||^2 / (1 + ||theta||^2 + ||w||^2)`.
    pub second_moment_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub n_draws: u64,
    pub slow: MeanCheck,
    pub fast: MeanCheck,
}

impl MartingaleReport {
    pub fn passed(&self) -> bool {
        self.slow.passed && self.fast.passed
    }
}

fn mean_check(acc: &Welford, exact: &[f64], sq_noise: f64, scale: f64) -> MeanCheck {
    let n = acc.count as f64;
    let sd = acc.std_dev();
    let dev: Vec<f64> = acc.mean.iter().zip(exact).map(|(m, h)| m - h).collect();
    let passed =
        dev.iter().zip(&sd).zip(exact).all(|((d, s), h)| d.abs() <= 4.0 * s / n.sqrt() + 1e-12 * (1.0 + h.abs()));
    MeanCheck {
        deviation: norm(&dev),
        bound: 4.0 * norm(&sd) / n.sqrt(),
        passed,
        second_moment_ratio: sq_noise / n / scale,
    }
}

/// Draws `n_draws` fresh updates at a fixed `(theta, w, z)` and compares the
/// sample means with the registered conditional means.
pub fn martingale_check<P: TwoTimescaleProblem>(
    problem: &P,
    theta: &[f64],
    w: &[f64],
    z: &P::Noise,
    n_draws: u64,
    seed: u64,
) -> Result<MartingaleReport> {
    if n_draws < 2 {
        return Err(Error::InvalidArgument("martingale check needs at least 2 draws".into()));
    }
    let h = problem.slow_mean(theta, w, z).ok_or(Error::MissingExactMeans)?;
    let g = problem.fast_mean(theta, w, z).ok_or(Error::MissingExactMeans)?;
    let mut rng = seeded_rng(seed);
    let (mut hs, mut gs) = (Welford::new(h.len()), Welford::new(g.len()));
    let (mut slow, mut fast) = (vec![0.0; h.len()], vec![0.0; g.len()]);
    let (mut sq_h, mut sq_g) = (0.0, 0.0);
    for _ in 0..n_draws {
        problem.sample_updates(z, theta, w, &mut rng, &mut slow, &mut fast);
        hs.push(&slow);
        gs.push(&fast);
        sq_h += slow.iter().zip(&h).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
        sq_g += fast.iter().zip(&g).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
    }
    let scale = 1.0 + norm(theta).powi(2) + norm(w).powi(2);
    Ok(MartingaleReport { n_draws, slow: mean_check(&hs, &h, sq_h, scale), fast: mean_check(&gs, &g, sq_g, scale) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub n_pairs: usize,
    pub radius: f64,
    pub slow: f64,
    pub fast: f64,
}

/// Largest `||f(x) - f(x')|| / (||theta - theta'|| + ||w - w'||)` for
/// `f = h` and `f = g` over random pairs in the ball of the given radius and
/// every supported noise state.
///
/// Each sampled point also contributes central-difference secants along the
/// coordinate axes, from which the blockwise Jacobian norms are taken; for
/// the combined norm the Lipschitz constant of a smooth map is the sup of
/// `max(||J_theta||, ||J_w||)`, so these are secant ratios in the limit and
/// keep the estimate a lower bound.
pub fn lipschitz_estimate<P: TwoTimescaleProblem>(
    problem: &P,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let support = problem.noise_support();
    if support.is_empty() {
        return Err(Error::InvalidProblem("noise support is unknown".into()));
    }
    let (dt, dw) = (problem.dim_theta(), problem.dim_w());
    let mut rng = seeded_rng(seed);
    let point = |rng: &mut crate::SimRng| -> Vec<f64> {
        (0..dt + dw).map(|_| radius * (2.0 * rng.random::<f64>() - 1.0)).collect()
    };
    let eps = 1e-4 * radius.max(1.0);
    let (mut best_h, mut best_g) = (0.0f64, 0.0f64);
    for _ in 0..n_pairs {
        let x = point(&mut rng);
        let y = point(&mut rng);
        let denom = norm(&diff(&x[..dt], &y[..dt])) + norm(&diff(&x[dt..], &y[dt..]));
        for z in &support {
            let eval = |p: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
                let h = problem.slow_mean(&p[..dt], &p[dt..], z).ok_or(Error::MissingExactMeans)?;
                let g = problem.fast_mean(&p[..dt], &p[dt..], z).ok_or(Error::MissingExactMeans)?;
                Ok((h, g))
            };
            let (hx, gx) = eval(&x)?;
            let (hy, gy) = eval(&y)?;
            if denom > 0.0 {
                best_h = best_h.max(norm(&diff(&hx, &hy)) / denom);
                best_g = best_g.max(norm(&diff(&gx, &gy)) / denom);
            }
            let mut jac_h = vec![vec![0.0; dt + dw]; hx.len()];
            let mut jac_g = vec![vec![0.0; dt + dw]; gx.len()];
            let mut probe = x.clone();
            for j in 0..dt + dw {
                probe[j] = x[j] + eps;
                let (hp, gp) = eval(&probe)?;
                probe[j] = x[j] - eps;
                let (hm, gm) = eval(&probe)?;
                probe[j] = x[j];
                for (row, (p, m)) in jac_h.iter_mut().zip(hp.iter().zip(&hm)) {
                    row[j] = (p - m) / (2.0 * eps);
                }
                for (row, (p, m)) in jac_g.iter_mut().zip(gp.iter().zip(&gm)) {
                    row[j] = (p - m) / (2.0 * eps);
                }
            }
            best_h = best_h.max(block_norm(&jac_h, dt));
            best_g = best_g.max(block_norm(&jac_g, dt));
        }
    }
    Ok(LipschitzEstimate { n_pairs, radius, slow: best_h, fast: best_g })
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `max(||J[:, ..split]||_2, ||J[:, split..]||_2)`.
fn block_norm(jac: &[Vec<f64>], split: usize) -> f64 {
    let rows = jac.len();
    let cols = jac.first().map_or(0, Vec::len);
    let left = nalgebra::DMatrix::from_fn(rows, split, |i, j| jac[i][j]);
    let right = nalgebra::DMatrix::from_fn(rows, cols - split, |i, j| jac[i][split + j]);
    crate::linalg::operator_norm(&left).max(crate::linalg::operator_norm(&right))
}

/// Constants `K_h`, `K_g` with `E[||H||^2 | z] <= K (1 + ||theta||^2 + ||w||^2)`,
/// hence the same bound for the martingale differences.
///
/// From `|delta| <= R + 2 M ||theta||` and `|phi^T w| <= M ||w||`:
/// `K_h = 3 L^2 M^2 max(R^2, 4 M^2)` and
/// `K_g = 3 M^2 max(L^2 R^2, 4 L^2 M^2, M^2)`, with `R` the largest reward
/// magnitude including noise.
pub fn tdc_second_moment_constants(problem: &TdcProblem) -> (f64, f64) {
    let l = problem.max_rho();
    let m = problem.features().max_row_norm();
    let r = problem.mdp().max_abs_reward() + problem.reward_noise().half_width;
    let k_h = 3.0 * l * l * m * m * (r * r).max(4.0 * m * m);
    let k_g = 3.0 * m * m * (l * l * r * r).max(4.0 * l * l * m * m).max(m * m);
    (k_h, k_g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkSummary {
    pub p: f64,
    pub horizon: u64,
    pub seed: u64,
    pub min_position: i64,
    pub final_position: i64,
    /// `sup_n L(Z_n)` with `L(k) = ((1 - p) / p)^k`.
    pub sup_l: f64,
}

/// Simple random walk on the integers from 0, up with probability `p`.
pub fn transient_walk(p: f64, horizon: u64, seed: u64) -> Result<WalkSummary> {
    if !(p > 0.5 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("up-probability must lie in (0.5, 1], got {p}")));
    }
    let mut rng = seeded_rng(seed);
    let (mut pos, mut min_pos) = (0i64, 0i64);
    for _ in 0..horizon {
        if rng.random::<f64>() < p {
            pos += 1;
        } else {
            pos -= 1;
            min_pos = min_pos.min(pos);
        }
    }
    Ok(WalkSummary { p, horizon, seed, min_position: min_pos, final_position: pos, sup_l: walk_l(p, min_pos) })
}

/// `((1 - p) / p)^k`.
pub fn walk_l(p: f64, k: i64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    ((1.0 - p) / p).powf(k as f64)
}

/// Probability that the walk ever reaches `-depth`.
pub fn walk_hitting_probability(p: f64, depth: u64) -> f64 {
    ((1.0 - p) / p).powf(depth as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub z: usize,
    pub report: MartingaleReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schedule: ScheduleReport,
    pub martingale: Vec<MartingaleSample>,
    pub lipschitz: LipschitzEstimate,
    pub lipschitz_bound: f64,
    pub second_moment_constants: (f64, f64),
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        let tol = 1e-9 * (1.0 + self.lipschitz_bound);
        self.schedule.is_valid()
            && self.martingale.iter().all(|m| m.report.passed())
            && self.lipschitz.slow <= self.lipschitz_bound + tol
            && self.lipschitz.fast <= self.lipschitz_bound + tol
    }

    /// One `(check, passed)` line per audited assumption.
    pub fn table(&self) -> Vec<(String, bool)> {
        let mut rows: Vec<(String, bool)> =
            self.schedule.clauses.iter().map(|c| (format!("schedule: {}", c.label), c.passed)).collect();
        let mg = self.martingale.iter().all(|m| m.report.passed());
        rows.push((format!("martingale means at {} points", self.martingale.len()), mg));
        let tol = 1e-9 * (1.0 + self.lipschitz_bound);
        rows.push((
            format!("lipschitz h: {:.4} <= {:.4}", self.lipschitz.slow, self.lipschitz_bound),
            self.lipschitz.slow <= self.lipschitz_bound + tol,
        ));
        rows.push((
            format!("lipschitz g: {:.4} <= {:.4}", self.lipschitz.fast, self.lipschitz_bound),
            self.lipschitz.fast <= self.lipschitz_bound + tol,
        ));
        let worst = self
            .martingale
            .iter()
            .map(|m| m.report.slow.second_moment_ratio.max(m.report.fast.second_moment_ratio))
            .fold(0.0, f64::max);
        let (k_h, k_g) = self.second_moment_constants;
        rows.push((format!("second moment ratio {worst:.4} <= {:.4}", k_h.max(k_g)), worst <= k_h.max(k_g)));
        rows
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuditSettings {
    pub points: usize,
    pub draws: u64,
    pub lipschitz_pairs: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self { points: 20, draws: 100_000, lipschitz_pairs: 200, radius: 10.0, seed: 0 }
    }
}

/// Full audit of a TDC instance under a schedule pair.
pub fn audit_tdc(problem: &TdcProblem, pair: &SchedulePair, settings: &AuditSettings) -> Result<AuditReport> {
    let mut rng = seeded_rng(settings.seed);
    let d = problem.dim_theta();
    let n_states = problem.mdp().n_states();
    let mut martingale = Vec::with_capacity(settings.points);
    for k in 0..settings.points {
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let z = rng.random_range(0..n_states);
        let noise = crate::tdc::TdcNoise { prev: z, current: z };
        let report =
            martingale_check(problem, &theta, &w, &noise, settings.draws, settings.seed.wrapping_add(k as u64 + 1))?;
        martingale.push(MartingaleSample { theta, w, z, report });
    }
    Ok(AuditReport {
        schedule: validate_schedule_pair(pair),
        martingale,
        lipschitz: lipschitz_estimate(problem, settings.lipschitz_pairs, settings.radius, settings.seed)?,
        lipschitz_bound: problem.analytic_lipschitz_bound(),
        second_moment_constants: tdc_second_moment_constants(problem),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tests::Linear;
    use crate::engine::StepSchedule;
    use crate::mdp::{random_mdp, FeatureMap, FiniteMdp, Policy, Sparsity};
    use crate::tdc::{make_tdc_problem, RewardNoise, TdcNoise};

    fn chain3(noise: RewardNoise) -> TdcProblem {
        make_tdc_problem(
            FiniteMdp::chain3(),
            Policy::greedy_on(3, 2, 1).unwrap(),
            Policy::uniform(3, 2),
            FeatureMap::tabular(3),
            noise,
        )
        .unwrap()
    }

    /// Wraps a problem and adds a constant bias to the sampled slow update.
    struct Biased<P>(P, f64);

    impl<P: TwoTimescaleProblem> TwoTimescaleProblem for Biased<P> {
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
            slow.iter_mut().for_each(|x| *x += self.1);
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
            slow.iter_mut().for_each(|x| *x += self.1);
        }

        fn slow_mean(&self, theta: &[f64], w: &[f64], z: &P::Noise) -> Option<Vec<f64>> {
            self.0.slow_mean(theta, w, z)
        }

        fn fast_mean(&self, theta: &[f64], w: &[f64], z: &P::Noise) -> Option<Vec<f64>> {
            self.0.fast_mean(theta, w, z)
        }

        fn noise_support(&self) -> Vec<P::Noise> {
            self.0.noise_support()
        }
    }

    /// Sampled means but no registered conditional means.
    struct Opaque;

    impl TwoTimescaleProblem for Opaque {
        type Noise = ();

        fn dim_theta(&self) -> usize {
            1
        }

        fn dim_w(&self) -> usize {
            1
        }

        fn initial_noise<R: Rng + ?Sized>(&self, _rng: &mut R) {}

        fn step<R: Rng + ?Sized>(
            &self,
            _z: &(),
            _theta: &[f64],
            _w: &[f64],
            _control: Option<&[f64]>,
            _rng: &mut R,
            slow: &mut [f64],
            fast: &mut [f64],
        ) {
            slow.fill(0.0);
            fast.fill(0.0);
        }
    }

    #[test]
    fn deterministic_updates_have_zero_deviation() {
        let p = Linear { dim: 2, k_theta: -0.5, k_w: 2.0 };
        let r = martingale_check(&p, &[1.0, 2.0], &[3.0, -1.0], &(), 1000, 0).unwrap();
        assert_eq!(r.slow.deviation, 0.0);
        assert_eq!(r.fast.deviation, 0.0);
        assert_eq!(r.slow.second_moment_ratio, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn chain3_martingale_passes() {
        let p = chain3(RewardNoise::uniform(0.5));
        let mut rng = seeded_rng(11);
        let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = martingale_check(&p, &theta, &w, &TdcNoise { prev: 1, current: 1 }, 100_000, 5).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.slow.bound > 0.0);
        let (k_h, k_g) = tdc_second_moment_constants(&p);
        assert!(r.slow.second_moment_ratio <= k_h);
        assert!(r.fast.second_moment_ratio <= k_g);
    }

    #[test]
    fn bias_is_detected() {
        let p = Biased(chain3(RewardNoise::NONE), 0.1);
        let r =
            martingale_check(&p, &[0.5, 0.0, -0.5], &[0.1, 0.2, 0.3], &TdcNoise { prev: 0, current: 0 }, 100_000, 1)
                .unwrap();
        assert!(!r.slow.passed);
        assert!(r.fast.passed);
        let exact = Biased(Linear { dim: 1, k_theta: 1.0, k_w: 1.0 }, 0.1);
        assert!(!martingale_check(&exact, &[1.0], &[1.0], &(), 10, 0).unwrap().passed());
    }

    #[test]
    fn missing_means_is_an_error() {
        assert!(matches!(martingale_check(&Opaque, &[0.0], &[0.0], &(), 10, 0), Err(Error::MissingExactMeans)));
        assert!(matches!(lipschitz_estimate(&Opaque, 10, 1.0, 0), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn every_tdc_problem_passes_at_random_points() {
        let mdp = random_mdp(5, 2, Sparsity::Dense, 3).unwrap();
        let p = make_tdc_problem(
            mdp,
            Policy::greedy_on(5, 2, 0).unwrap(),
            Policy::uniform(5, 2),
            FeatureMap::random(5, 3, 3).unwrap(),
            RewardNoise::uniform(0.2),
        )
        .unwrap();
        let pair = SchedulePair::new(StepSchedule::power_law(1.0, 1.0, 1.0), StepSchedule::power_law(1.0, 1.0, 0.6));
        let settings = AuditSettings { draws: 20_000, ..AuditSettings::default() };
        let report = audit_tdc(&p, &pair, &settings).unwrap();
        assert_eq!(report.martingale.len(), 20);
        assert!(report.passed(), "{:?}", report.table());
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<AuditReport>(&json).unwrap(), report);
    }

    #[test]
    fn constant_means_have_zero_lipschitz_estimate() {
        let p = Linear { dim: 2, k_theta: 0.0, k_w: 0.0 };
        let est = lipschitz_estimate(&p, 50, 3.0, 0).unwrap();
        assert_eq!(est.slow, 0.0);
        assert_eq!(est.fast, 0.0);
    }

    #[test]
    fn affine_estimate_is_exact_and_stable() {
        let p = chain3(RewardNoise::NONE);
        let small = lipschitz_estimate(&p, 100, 5.0, 1).unwrap();
        let large = lipschitz_estimate(&p, 10_000, 5.0, 2).unwrap();
        assert!((small.slow / large.slow - 1.0).abs() <= 0.05);
        assert!((small.fast / large.fast - 1.0).abs() <= 0.05);
        let sq = Linear { dim: 3, k_theta: -2.5, k_w: 0.75 };
        let est = lipschitz_estimate(&sq, 100, 1.0, 0).unwrap();
        assert!((est.slow - 2.5).abs() < 1e-8);
        assert!((est.fast - 0.75).abs() < 1e-8);
    }

    #[test]
    fn tdc_estimates_respect_analytic_bound() {
        for seed in 0..5 {
            let mdp = random_mdp(6, 3, Sparsity::Fraction(0.5), seed).unwrap();
            let p = make_tdc_problem(
                mdp,
                Policy::greedy_on(6, 3, 0).unwrap(),
                Policy::uniform(6, 3),
                FeatureMap::random(6, 4, seed).unwrap(),
                RewardNoise::NONE,
            )
            .unwrap();
            let est = lipschitz_estimate(&p, 200, 10.0, seed).unwrap();
            let bound = p.analytic_lipschitz_bound();
            assert!(est.slow <= bound && est.fast <= bound, "{est:?} vs {bound}");
        }
        let p = chain3(RewardNoise::NONE);
        let est = lipschitz_estimate(&p, 200, 10.0, 0).unwrap();
        // L = 2, M = 1
        assert_eq!(p.analytic_lipschitz_bound(), 4.0);
        assert!(est.slow <= 2.0 * (2.0 + 1.0));
        assert!(est.slow <= 4.0);
    }

    #[test]
    fn deterministic_walk() {
        let w = transient_walk(1.0, 1000, 3).unwrap();
        assert_eq!(w.min_position, 0);
        assert_eq!(w.sup_l, 1.0);
        assert_eq!(w.final_position, 1000);
        assert!(transient_walk(0.5, 10, 0).is_err());
        assert!(transient_walk(1.2, 10, 0).is_err());
    }

    #[test]
    fn walk_stays_bounded_below() {
        let p = 0.9;
        let mut ahead = 0;
        for seed in 0..100 {
            let w = transient_walk(p, 100_000, seed).unwrap();
            assert!(w.min_position >= -20);
            assert_eq!(w.sup_l, walk_l(p, w.min_position));
            assert!((w.sup_l - (1.0f64 / 9.0).powi(w.min_position as i32)).abs() <= 1e-9 * w.sup_l);
            if w.final_position as f64 > 0.5 * (2.0 * p - 1.0) * 100_000.0 {
                ahead += 1;
            }
        }
        assert!(ahead >= 95);
        assert!(100.0 * walk_hitting_probability(p, 20) < 1e-17);
    }
}
