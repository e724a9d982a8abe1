//! Off-policy TDC with importance weighting as a two-timescale problem.
//!
//! Per transition `(X_n, A_n, R_n, X_{n+1})` with `rho_n = pi(A_n|X_n) / pi_b(A_n|X_n)`:
//!
//! ```text
//! theta += a(n) rho_n [delta_n phi_n - gamma phi'_n (phi_n^T w)]
//! w     += b(n) [(rho_n delta_n - phi_n^T w) phi_n]
//! ```
//!
//! The Markov noise state is the previous chain state `X_{n-1}`; the engine
//! additionally carries `X_n` so the simulated trajectory is a single
//! on-policy path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::TwoTimescaleProblem;
use crate::linalg::dot;
use crate::mdp::{sample_index, sample_step, validate_mdp, FeatureMap, FiniteMdp, Policy, Transition};
use crate::oracle::behavior_matrix;
use crate::{seeded_rng, Error, Result};

/// `R + gamma theta^T phi(s') - theta^T phi(s)`.
pub fn td_error(theta: &[f64], tr: &Transition, phi: &FeatureMap, gamma: f64) -> f64 {
    tr.reward + gamma * dot(theta, phi.row(tr.s_next)) - dot(theta, phi.row(tr.s))
}

/// Writes the sampled slow update `H` and fast update `G` for one transition.
#[allow(clippy::too_many_arguments)]
pub fn tdc_increments(
    theta: &[f64],
    w: &[f64],
    tr: &Transition,
    rho: f64,
    phi: &FeatureMap,
    gamma: f64,
    slow: &mut [f64],
    fast: &mut [f64],
) {
    let f = phi.row(tr.s);
    let f_next = phi.row(tr.s_next);
    let delta = td_error(theta, tr, phi, gamma);
    let fw = dot(f, w);
    for i in 0..slow.len() {
        slow[i] = rho * (delta * f[i] - gamma * f_next[i] * fw);
    }
    let scale = rho * delta - fw;
    for i in 0..fast.len() {
        fast[i] = scale * f[i];
    }
}

/// One TDC update; returns `(theta', w')`.
#[allow(clippy::too_many_arguments)]
pub fn tdc_step(
    theta: &[f64],
    w: &[f64],
    tr: &Transition,
    rho: f64,
    a_n: f64,
    b_n: f64,
    phi: &FeatureMap,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0; theta.len()];
    let mut g = vec![0.0; w.len()];
    tdc_increments(theta, w, tr, rho, phi, gamma, &mut h, &mut g);
    let theta_next = theta.iter().zip(&h).map(|(x, d)| x + a_n * d).collect();
    let w_next = w.iter().zip(&g).map(|(x, d)| x + b_n * d).collect();
    (theta_next, w_next)
}

/// Additive reward noise, uniform on `[-half_width, half_width]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardNoise {
    pub half_width: f64,
}

impl RewardNoise {
    pub const NONE: Self = Self { half_width: 0.0 };

    pub fn uniform(half_width: f64) -> Self {
        Self { half_width }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.half_width > 0.0 {
            self.half_width * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            0.0
        }
    }
}

/// Noise state: `prev` is `X_{n-1}` (what conditional means condition on),
/// `current` is `X_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TdcNoise {
    pub prev: usize,
    pub current: usize,
}

#[derive(Clone, Debug)]
pub struct TdcProblem {
    mdp: FiniteMdp,
    pi: Policy,
    pi_b: Policy,
    phi: FeatureMap,
    reward_noise: RewardNoise,
    start_state: usize,
    p_behavior: DMatrix<f64>,
}

/// Validates the instance and wires it for the engine (shared noise).
pub fn make_tdc_problem(
    mdp: FiniteMdp,
    pi: Policy,
    pi_b: Policy,
    phi: FeatureMap,
    reward_noise: RewardNoise,
) -> Result<TdcProblem> {
    TdcProblem::new(mdp, pi, pi_b, phi, reward_noise)
}

impl TdcProblem {
    pub fn new(mdp: FiniteMdp, pi: Policy, pi_b: Policy, phi: FeatureMap, reward_noise: RewardNoise) -> Result<Self> {
        let report = validate_mdp(&mdp, &pi, &pi_b);
        if !report.is_valid() {
            let details: Vec<String> = report.violations.iter().map(|v| v.detail.clone()).collect();
            return Err(Error::InvalidProblem(details.join("; ")));
        }
        if phi.n_states() != mdp.n_states() {
            return Err(Error::Shape(format!("features cover {} states, MDP has {}", phi.n_states(), mdp.n_states())));
        }
        if !(reward_noise.half_width >= 0.0 && reward_noise.half_width.is_finite()) {
            return Err(Error::InvalidArgument("reward noise half-width must be finite and >= 0".into()));
        }
        let p_behavior = behavior_matrix(&mdp, &pi_b);
        Ok(Self { mdp, pi, pi_b, phi, reward_noise, start_state: 0, p_behavior })
    }

    pub fn with_start_state(mut self, s: usize) -> Result<Self> {
        if s >= self.mdp.n_states() {
            return Err(Error::InvalidArgument(format!("start state {s} out of range")));
        }
        self.start_state = s;
        Ok(self)
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn target(&self) -> &Policy {
        &self.pi
    }

    pub fn behavior(&self) -> &Policy {
        &self.pi_b
    }

    pub fn features(&self) -> &FeatureMap {
        &self.phi
    }

    pub fn reward_noise(&self) -> RewardNoise {
        self.reward_noise
    }

    pub fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }

    /// `pi(a|s) / pi_b(a|s)`; only called for actions the behavior policy takes.
    pub fn rho(&self, s: usize, a: usize) -> f64 {
        self.pi.prob(s, a) / self.pi_b.prob(s, a)
    }

    /// `L = max rho` over behavior-supported pairs.
    pub fn max_rho(&self) -> f64 {
        let mut best: f64 = 0.0;
        for s in 0..self.mdp.n_states() {
            for a in 0..self.mdp.n_actions() {
                if self.pi_b.prob(s, a) > 0.0 {
                    best = best.max(self.rho(s, a));
                }
            }
        }
        best
    }

    /// `L * max(2 M^2, M^2)` with `M = max ||phi(s)||`: bounds the Lipschitz
    /// constant of both conditional means w.r.t. `||dtheta|| + ||dw||`.
    pub fn analytic_lipschitz_bound(&self) -> f64 {
        let m = self.phi.max_row_norm();
        self.max_rho() * (2.0 * m * m).max(m * m)
    }

    fn draw_transition<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Transition {
        let mut tr = sample_step(&self.mdp, &self.pi_b, s, rng);
        tr.reward += self.reward_noise.draw(rng);
        tr
    }

    /// `E[H | X_n = x]` (expected rewards; the reward noise has mean zero).
    fn slow_mean_at_state(&self, theta: &[f64], w: &[f64], x: usize, out: &mut [f64]) {
        out.fill(0.0);
        let gamma = self.gamma();
        let f = self.phi.row(x);
        let fw = dot(f, w);
        let v_x = dot(theta, f);
        for a in 0..self.mdp.n_actions() {
            if !(self.pi_b.prob(x, a) > 0.0) {
                continue;
            }
            // pi_b * rho collapses to pi
            let pa = self.pi.prob(x, a);
            if pa == 0.0 {
                continue;
            }
            for t in 0..self.mdp.n_states() {
                let wt = pa * self.mdp.p(x, a, t);
                if wt == 0.0 {
                    continue;
                }
                let f_next = self.phi.row(t);
                let delta = self.mdp.r(x, a, t) + gamma * dot(theta, f_next) - v_x;
                for i in 0..out.len() {
                    out[i] += wt * (delta * f[i] - gamma * f_next[i] * fw);
                }
            }
        }
    }

    /// `E[G | X_n = x]`.
    fn fast_mean_at_state(&self, theta: &[f64], w: &[f64], x: usize, out: &mut [f64]) {
        let gamma = self.gamma();
        let f = self.phi.row(x);
        let v_x = dot(theta, f);
        let mut scale = -dot(f, w);
        for a in 0..self.mdp.n_actions() {
            if !(self.pi_b.prob(x, a) > 0.0) {
                continue;
            }
            let pa = self.pi.prob(x, a);
            for t in 0..self.mdp.n_states() {
                let wt = pa * self.mdp.p(x, a, t);
                if wt != 0.0 {
                    scale += wt * (self.mdp.r(x, a, t) + gamma * dot(theta, self.phi.row(t)) - v_x);
                }
            }
        }
        for (o, fi) in out.iter_mut().zip(f) {
            *o = scale * fi;
        }
    }

    fn mix_over_successors(&self, z: usize, out: &mut [f64], at_state: impl Fn(usize, &mut [f64])) {
        out.fill(0.0);
        let mut buf = vec![0.0; out.len()];
        for x in 0..self.mdp.n_states() {
            let px = self.p_behavior[(z, x)];
            if px == 0.0 {
                continue;
            }
            at_state(x, &mut buf);
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += px * v;
            }
        }
    }
}

/// `h(theta, w, z) = E[H_n | X_{n-1} = z]`, by enumeration over `X_n`, `A_n`, `X_{n+1}`.
pub fn conditional_h(problem: &TdcProblem, theta: &[f64], w: &[f64], z: usize) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    problem.mix_over_successors(z, &mut out, |x, buf| problem.slow_mean_at_state(theta, w, x, buf));
    out
}

/// `g(theta, w, z) = E[G_n | X_{n-1} = z]`.
pub fn conditional_g(problem: &TdcProblem, theta: &[f64], w: &[f64], z: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    problem.mix_over_successors(z, &mut out, |x, buf| problem.fast_mean_at_state(theta, w, x, buf));
    out
}

impl TwoTimescaleProblem for TdcProblem {
    type Noise = TdcNoise;

    fn dim_theta(&self) -> usize {
        self.phi.dim()
    }

    fn dim_w(&self) -> usize {
        self.phi.dim()
    }

    fn initial_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> TdcNoise {
        let prev = self.start_state;
        let current = sample_index(&self.p_behavior.row(prev).iter().copied().collect::<Vec<_>>(), rng.random());
        TdcNoise { prev, current }
    }

    fn step<R: Rng + ?Sized>(
        &self,
        z: &TdcNoise,
        theta: &[f64],
        w: &[f64],
        _control: Option<&[f64]>,
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) -> TdcNoise {
        let tr = self.draw_transition(z.current, rng);
        let rho = self.rho(tr.s, tr.a);
        tdc_increments(theta, w, &tr, rho, &self.phi, self.gamma(), slow, fast);
        TdcNoise { prev: tr.s, current: tr.s_next }
    }

    /// Resamples `X_n ~ P_b(z.prev, .)` before drawing the step.
    fn sample_updates<R: Rng + ?Sized>(
        &self,
        z: &TdcNoise,
        theta: &[f64],
        w: &[f64],
        rng: &mut R,
        slow: &mut [f64],
        fast: &mut [f64],
    ) {
        let x = sample_step(&self.mdp, &self.pi_b, z.prev, rng).s_next;
        let fresh = TdcNoise { prev: z.prev, current: x };
        let _ = self.step(&fresh, theta, w, None, rng, slow, fast);
    }

    fn slow_mean(&self, theta: &[f64], w: &[f64], z: &TdcNoise) -> Option<Vec<f64>> {
        Some(conditional_h(self, theta, w, z.prev))
    }

    fn fast_mean(&self, theta: &[f64], w: &[f64], z: &TdcNoise) -> Option<Vec<f64>> {
        Some(conditional_g(self, theta, w, z.prev))
    }

    fn noise_support(&self) -> Vec<TdcNoise> {
        (0..self.mdp.n_states()).map(|s| TdcNoise { prev: s, current: s }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMoments {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
}

/// Sample averages of `rho phi (phi - gamma phi')^T`, `rho R phi` and
/// `phi phi^T` along one behavior trajectory from state 0, after a burn-in of
/// 1% of `n_samples`.
pub fn empirical_moments(
    mdp: &FiniteMdp,
    pi: &Policy,
    pi_b: &Policy,
    phi: &FeatureMap,
    n_samples: usize,
    seed: u64,
) -> Result<EmpiricalMoments> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let d = phi.dim();
    let gamma = mdp.gamma();
    let mut rng = seeded_rng(seed);
    let mut s = 0;
    for _ in 0..n_samples / 100 {
        s = sample_step(mdp, pi_b, s, &mut rng).s_next;
    }
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut c = vec![0.0; d * d];
    for _ in 0..n_samples {
        let tr = sample_step(mdp, pi_b, s, &mut rng);
        let rho = pi.prob(tr.s, tr.a) / pi_b.prob(tr.s, tr.a);
        let f = phi.row(tr.s);
        let f_next = phi.row(tr.s_next);
        for i in 0..d {
            b[i] += rho * tr.reward * f[i];
            for j in 0..d {
                a[i * d + j] += rho * f[i] * (f[j] - gamma * f_next[j]);
                c[i * d + j] += f[i] * f[j];
            }
        }
        s = tr.s_next;
    }
    let n = n_samples as f64;
    Ok(EmpiricalMoments {
        a: DMatrix::from_row_slice(d, d, &a) / n,
        b: DVector::from_vec(b) / n,
        c: DMatrix::from_row_slice(d, d, &c) / n,
    })
}
