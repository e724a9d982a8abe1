//! Finite MDPs, policies, state features and behavior-policy sampling.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{seeded_rng, Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;
const GENERATOR_RETRIES: usize = 100;
const RANK_TOL: f64 = 1e-8;

/// Finite MDP with tensors stored flat in `[s][a][s']` order.
///
/// Construction only checks shapes. Stochasticity, discount range and policy
/// coverage are reported by [`validate_mdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    gamma: f64,
}

/// On-disk layout: nested `p[s][a][s']` and `r[s][a][s']` arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MdpDocument> for FiniteMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        FiniteMdp::from_nested(doc.n_states, doc.n_actions, &doc.p, &doc.r, doc.gamma)
    }
}

impl From<FiniteMdp> for MdpDocument {
    fn from(m: FiniteMdp) -> Self {
        let nest = |flat: &[f64]| {
            (0..m.n_states)
                .map(|s| {
                    (0..m.n_actions)
                        .map(|a| {
                            let start = (s * m.n_actions + a) * m.n_states;
                            flat[start..start + m.n_states].to_vec()
                        })
                        .collect()
                })
                .collect()
        };
        MdpDocument { n_states: m.n_states, n_actions: m.n_actions, gamma: m.gamma, p: nest(&m.p), r: nest(&m.r) }
    }
}

impl FiniteMdp {
    pub fn from_flat(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("an MDP needs at least one state and one action".into()));
        }
        let len = n_states * n_actions * n_states;
        if p.len() != len || r.len() != len {
            return Err(Error::Shape(format!(
                "expected {len} transition and reward entries, got {} and {}",
                p.len(),
                r.len()
            )));
        }
        Ok(Self { n_states, n_actions, p, r, gamma })
    }

    pub fn from_nested(
        n_states: usize,
        n_actions: usize,
        p: &[Vec<Vec<f64>>],
        r: &[Vec<Vec<f64>>],
        gamma: f64,
    ) -> Result<Self> {
        let flatten = |name: &str, t: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
            if t.len() != n_states {
                return Err(Error::Shape(format!("{name} has {} state rows, expected {n_states}", t.len())));
            }
            let mut out = Vec::with_capacity(n_states * n_actions * n_states);
            for (s, per_state) in t.iter().enumerate() {
                if per_state.len() != n_actions {
                    return Err(Error::Shape(format!(
                        "{name}[{s}] has {} actions, expected {n_actions}",
                        per_state.len()
                    )));
                }
                for (a, row) in per_state.iter().enumerate() {
                    if row.len() != n_states {
                        return Err(Error::Shape(format!(
                            "{name}[{s}][{a}] has {} entries, expected {n_states}",
                            row.len()
                        )));
                    }
                    out.extend_from_slice(row);
                }
            }
            Ok(out)
        };
        let p = flatten("p", p)?;
        let r = flatten("r", r)?;
        Self::from_flat(n_states, n_actions, p, r, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Transition row `p(.|s, a)`.
    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.p[start..start + self.n_states]
    }

    /// Reward row `r(s, a, .)`.
    pub fn r_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.r[start..start + self.n_states]
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.p_row(s, a)[s_next]
    }

    pub fn r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.r_row(s, a)[s_next]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.r.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Canonical three-state cycle: action 0 stays, action 1 advances
    /// `s -> s + 1 mod 3`; reward 1 on entering state 0, discount 0.9.
    pub fn chain3() -> Self {
        let n = 3;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2 * n];
        for s in 0..n {
            for (a, next) in [(0, s), (1, (s + 1) % n)] {
                p[(s * 2 + a) * n + next] = 1.0;
            }
            for a in 0..2 {
                r[(s * 2 + a) * n] = 1.0;
            }
        }
        Self::from_flat(n, 2, p, r, 0.9).expect("chain3 shapes are consistent")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad MDP document: {e}")))
    }
}

/// Row-stochastic action-probability table `pi(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Policy::from_rows(&rows)
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(p: Policy) -> Self {
        p.probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect()
    }
}

impl Policy {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("empty policy table".into()));
        }
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Shape("ragged policy table".into()));
        }
        Ok(Self { n_states, n_actions, probs: rows.concat() })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidArgument(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    /// Always takes action `k`.
    pub fn greedy_on(n_states: usize, n_actions: usize, k: usize) -> Result<Self> {
        Self::deterministic(n_actions, &vec![k; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// State features, one row `phi(s)` per state.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureMap {
    /// Builds from per-state rows and checks full column rank.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_states = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if n_states == 0 || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows must be non-empty and of equal length".into()));
        }
        let fm = Self { n_states, dim, rows: rows.concat() };
        fm.check_rank()?;
        Ok(fm)
    }

    pub fn tabular(n_states: usize) -> Self {
        let mut rows = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            rows[s * n_states + s] = 1.0;
        }
        Self { n_states, dim: n_states, rows }
    }

    /// Gaussian features with each row scaled to unit norm, resampled until
    /// the matrix has full column rank.
    pub fn random(n_states: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > n_states {
            return Err(Error::InvalidArgument(format!(
                "random features need 1 <= d <= n_states, got d = {dim}, n_states = {n_states}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut last = 0.0;
        for _ in 0..GENERATOR_RETRIES {
            let mut rows = Vec::with_capacity(n_states * dim);
            for _ in 0..n_states {
                let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = crate::linalg::norm(&row);
                if n < 1e-12 {
                    rows.extend(std::iter::repeat_n(0.0, dim));
                } else {
                    rows.extend(row.iter().map(|x| x / n));
                }
            }
            let fm = Self { n_states, dim, rows };
            match fm.min_normalized_singular_value() {
                sv if sv > RANK_TOL => return Ok(fm),
                sv => last = sv,
            }
        }
        Err(Error::GenerationFailed {
            attempts: GENERATOR_RETRIES,
            reason: format!("feature matrix stayed rank deficient (last singular value {last:e})"),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.dim..(s + 1) * self.dim]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_states, self.dim, &self.rows)
    }

    /// `max_s ||phi(s)||`
    pub fn max_row_norm(&self) -> f64 {
        (0..self.n_states).map(|s| crate::linalg::norm(self.row(s))).fold(0.0, f64::max)
    }

    /// Smallest singular value after scaling every column to unit norm.
    pub fn min_normalized_singular_value(&self) -> f64 {
        let mut m = self.matrix();
        for mut col in m.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        m.singular_values().min()
    }

    fn check_rank(&self) -> Result<()> {
        let sv = self.min_normalized_singular_value();
        if self.dim > self.n_states || !(sv > RANK_TOL) {
            return Err(Error::RankDeficient { min_singular: sv });
        }
        Ok(())
    }
}

/// One observed step `(X_n, A_n, R_n, X_{n+1})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub reward: f64,
    pub s_next: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Shape,
    RowStochastic,
    NegativeProbability,
    Discount,
    PolicyRow,
    Coverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub state: Option<usize>,
    pub action: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, state: Option<usize>, action: Option<usize>, detail: String) {
        self.violations.push(Violation { kind, state, action, detail });
    }
}

fn check_policy(report: &mut ValidationReport, name: &str, pol: &Policy) {
    for s in 0..pol.n_states() {
        let row = pol.row(s);
        if let Some(a) = row.iter().position(|&x| !(x >= 0.0)) {
            report.push(ViolationKind::NegativeProbability, Some(s), Some(a), format!("{name}({a}|{s}) = {}", row[a]));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            report.push(ViolationKind::PolicyRow, Some(s), None, format!("{name}(.|{s}) sums to {sum}"));
        }
    }
}

/// Report-style validation of an MDP together with target and behavior policies.
pub fn validate_mdp(mdp: &FiniteMdp, pi: &Policy, pi_b: &Policy) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, pol) in [("pi", pi), ("pi_b", pi_b)] {
        if pol.n_states() != mdp.n_states() || pol.n_actions() != mdp.n_actions() {
            report.push(
                ViolationKind::Shape,
                None,
                None,
                format!(
                    "{name} is {}x{}, MDP has {} states and {} actions",
                    pol.n_states(),
                    pol.n_actions(),
                    mdp.n_states(),
                    mdp.n_actions()
                ),
            );
        }
    }
    if !report.is_valid() {
        return report;
    }
    if !(mdp.gamma() > 0.0 && mdp.gamma() < 1.0) {
        report.push(ViolationKind::Discount, None, None, format!("gamma = {} not in (0, 1)", mdp.gamma()));
    }
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.p_row(s, a);
            if let Some(j) = row.iter().position(|&x| !(x >= 0.0)) {
                report.push(
                    ViolationKind::NegativeProbability,
                    Some(s),
                    Some(a),
                    format!("p({j}|{s},{a}) = {}", row[j]),
                );
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                report.push(ViolationKind::RowStochastic, Some(s), Some(a), format!("p(.|{s},{a}) sums to {sum}"));
            }
        }
    }
    check_policy(&mut report, "pi", pi);
    check_policy(&mut report, "pi_b", pi_b);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            if pi.prob(s, a) > 0.0 && !(pi_b.prob(s, a) > 0.0) {
                report.push(
                    ViolationKind::Coverage,
                    Some(s),
                    Some(a),
                    format!("pi({a}|{s}) = {} but pi_b({a}|{s}) = {}", pi.prob(s, a), pi_b.prob(s, a)),
                );
            }
        }
    }
    report
}

/// `pi(a|s) / pi_b(a|s)`.
pub fn importance_weight(pi: &Policy, pi_b: &Policy, s: usize, a: usize) -> Result<f64> {
    let denom = pi_b.prob(s, a);
    if !(denom > 0.0) {
        return Err(Error::ZeroBehaviorProbability { state: s, action: a });
    }
    Ok(pi.prob(s, a) / denom)
}

/// Inverse-CDF draw from a probability row. Falls back to the last index with
/// positive mass when rounding leaves `u` above the cumulative total.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws `a ~ pi_b(.|s)`, `s' ~ p(.|s,a)` with the expected reward `r(s,a,s')`.
pub fn sample_step<R: Rng + ?Sized>(mdp: &FiniteMdp, pi_b: &Policy, s: usize, rng: &mut R) -> Transition {
    let a = sample_index(pi_b.row(s), rng.random::<f64>());
    let s_next = sample_index(mdp.p_row(s, a), rng.random::<f64>());
    Transition { s, a, reward: mdp.r(s, a, s_next), s_next }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sparsity {
    Dense,
    /// Fraction of successor states with positive probability in each row
    /// (at least two).
    Fraction(f64),
}

/// Support graph of the chain obtained by allowing every action.
fn union_support_strongly_connected(mdp: &FiniteMdp) -> bool {
    let n = mdp.n_states();
    let adj = |s: usize, t: usize| (0..mdp.n_actions()).any(|a| mdp.p(s, a, t) > 0.0);
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let edge = if forward { adj(u, v) } else { adj(v, u) };
                if edge && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    reach(true) && reach(false)
}

/// Random row-stochastic MDP with `U[0,1]` rewards and discount 0.9.
///
/// Every `(s, a)` row has at least two successors. The chain under a
/// full-support behavior policy is checked for strong connectivity and the
/// draw is repeated with an incremented seed on failure.
pub fn random_mdp(n_states: usize, n_actions: usize, sparsity: Sparsity, seed: u64) -> Result<FiniteMdp> {
    if n_states < 2 || n_actions < 1 {
        return Err(Error::InvalidArgument(format!(
            "random_mdp needs n_states >= 2 and n_actions >= 1, got {n_states} and {n_actions}"
        )));
    }
    let k = match sparsity {
        Sparsity::Dense => n_states,
        Sparsity::Fraction(f) if f > 0.0 && f <= 1.0 => ((f * n_states as f64).ceil() as usize).clamp(2, n_states),
        Sparsity::Fraction(f) => {
            return Err(Error::InvalidArgument(format!("sparsity fraction {f} not in (0, 1]")));
        }
    };
    for attempt in 0..GENERATOR_RETRIES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(attempt));
        let len = n_states * n_actions * n_states;
        let mut p = vec![0.0; len];
        let mut r = vec![0.0; len];
        for row in 0..n_states * n_actions {
            let mut idx: Vec<usize> = (0..n_states).collect();
            // partial Fisher-Yates for the support
            for i in 0..k {
                let j = rng.random_range(i..n_states);
                idx.swap(i, j);
            }
            let weights: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            for (&j, w) in idx[..k].iter().zip(&weights) {
                p[row * n_states + j] = w / total;
            }
            for x in &mut r[row * n_states..(row + 1) * n_states] {
                *x = rng.random::<f64>();
            }
        }
        let mdp = FiniteMdp::from_flat(n_states, n_actions, p, r, 0.9)?;
        if union_support_strongly_connected(&mdp) {
            return Ok(mdp);
        }
    }
    Err(Error::GenerationFailed {
        attempts: GENERATOR_RETRIES,
        reason: "behavior chain never strongly connected".into(),
    })
}
