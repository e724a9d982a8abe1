//! Exact ground truth by enumeration over `(s, a, s')`.
//!
//! Everything here is a dense computation over a finite MDP: the behavior
//! chain and its stationary law `nu`, the moment matrices
//!
//! ```text
//! A = E[rho phi(X) (phi(X) - gamma phi(X'))^T]    b = E[rho R phi(X)]
//! C = E[phi(X) phi(X)^T]                          M = E[rho phi(X') phi(X)^T]
//! ```
//!
//! the TD fixed point `theta* = A^{-1} b`, the fast-iterate attractor
//! `lambda(theta) = C^{-1}(b - A theta)` and the projected Bellman objective
//! `J(theta) = (b - A theta)^T C^{-1} (b - A theta)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg::{condition_number, operator_norm, solve, to_rows};
use crate::mdp::{importance_weight, FeatureMap, FiniteMdp, Policy};
use crate::{Error, Result};

/// Condition numbers above this make `A` unusable.
pub const MAX_CONDITION: f64 = 1e12;

/// `P_b(s, s') = sum_a pi_b(a|s) p(s'|s,a)`.
pub fn behavior_matrix(mdp: &FiniteMdp, pi_b: &Policy) -> DMatrix<f64> {
    policy_matrix(mdp, pi_b)
}

fn policy_matrix(mdp: &FiniteMdp, pol: &Policy) -> DMatrix<f64> {
    let n = mdp.n_states();
    DMatrix::from_fn(n, n, |s, t| (0..mdp.n_actions()).map(|a| pol.prob(s, a) * mdp.p(s, a, t)).sum())
}

/// Number of closed communicating classes of the support graph of `p`.
fn closed_classes(p: &DMatrix<f64>) -> (usize, bool) {
    let n = p.nrows();
    let reach_from = |start: usize| {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if p[(u, v)] > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    };
    let reach: Vec<Vec<bool>> = (0..n).map(reach_from).collect();
    let strongly_connected = reach[0].iter().all(|&x| x) && (0..n).all(|s| reach[s][0]);
    // a state is in a closed class iff everything it reaches reaches it back
    let mut counted = vec![false; n];
    let mut classes = 0;
    for s in 0..n {
        if counted[s] {
            continue;
        }
        let closed = (0..n).all(|t| !reach[s][t] || reach[t][s]);
        if closed {
            classes += 1;
            for t in 0..n {
                if reach[s][t] {
                    counted[t] = true;
                }
            }
        }
    }
    (classes, strongly_connected)
}

/// Unique stationary law of an irreducible chain, by least squares on the
/// augmented system `[P^T - I; 1^T] nu = [0; 1]`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Shape(format!("transition matrix is {}x{}", p.nrows(), p.ncols())));
    }
    let (classes, connected) = closed_classes(p);
    if !connected {
        return Err(Error::NotIrreducible { closed_classes: classes });
    }
    let mut sys = DMatrix::zeros(n + 1, n);
    sys.view_mut((0, 0), (n, n)).copy_from(&(p.transpose() - DMatrix::identity(n, n)));
    sys.row_mut(n).fill(1.0);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let nu = sys.svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let nu = nu.map(|x| x.max(0.0));
    let total = nu.sum();
    Ok(nu / total)
}

/// Power iteration on the lazy chain `(I + P) / 2`, which shares the
/// stationary law of `P` and is aperiodic.
pub fn power_iteration(p: &DMatrix<f64>, iterations: usize) -> DVector<f64> {
    let n = p.nrows();
    let lazy = (p + DMatrix::identity(n, n)) * 0.5;
    let lazy_t = lazy.transpose();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..iterations {
        v = &lazy_t * v;
        let total = v.sum();
        v /= total;
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

/// Exact triple sums with weights `nu(s) pi_b(a|s) rho(s,a) p(s'|s,a)`.
/// Actions the behavior policy never takes carry zero mass and are skipped.
pub fn compute_moments(mdp: &FiniteMdp, pi: &Policy, pi_b: &Policy, phi: &FeatureMap, nu: &DVector<f64>) -> Moments {
    let d = phi.dim();
    let gamma = mdp.gamma();
    let mut a_mat = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut c = DMatrix::zeros(d, d);
    let mut m = DMatrix::zeros(d, d);
    for s in 0..mdp.n_states() {
        let phi_s = DVector::from_column_slice(phi.row(s));
        c += nu[s] * &phi_s * phi_s.transpose();
        for a in 0..mdp.n_actions() {
            let Ok(rho) = importance_weight(pi, pi_b, s, a) else {
                continue;
            };
            let sa = nu[s] * pi_b.prob(s, a) * rho;
            if sa == 0.0 {
                continue;
            }
            for t in 0..mdp.n_states() {
                let w = sa * mdp.p(s, a, t);
                if w == 0.0 {
                    continue;
                }
                let phi_t = DVector::from_column_slice(phi.row(t));
                a_mat += w * &phi_s * (&phi_s - gamma * &phi_t).transpose();
                b += w * mdp.r(s, a, t) * &phi_s;
                m += w * &phi_t * phi_s.transpose();
            }
        }
    }
    Moments { a: a_mat, b, c, m }
}

/// `theta*` solving `A theta = b`.
pub fn td_fixed_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let condition = condition_number(a);
    if !(condition < MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    solve(a, b)
}

/// `V^pi = (I - gamma P_pi)^{-1} r_pi` with `gamma` on the successor value.
pub fn bellman_value(mdp: &FiniteMdp, pi: &Policy) -> Result<DVector<f64>> {
    let n = mdp.n_states();
    let p_pi = policy_matrix(mdp, pi);
    let r_pi = DVector::from_fn(n, |s, _| {
        (0..mdp.n_actions())
            .map(|a| {
                let pa = pi.prob(s, a);
                (0..n).map(|t| pa * mdp.p(s, a, t) * mdp.r(s, a, t)).sum::<f64>()
            })
            .sum()
    });
    solve(&(DMatrix::identity(n, n) - mdp.gamma() * p_pi), &r_pi)
}

/// `lambda(theta) = C^{-1} b - C^{-1} A theta`, kept as affine coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaMap {
    pub c_inv_a: DMatrix<f64>,
    pub c_inv_b: DVector<f64>,
}

impl LambdaMap {
    pub fn new(c_inv_a: DMatrix<f64>, c_inv_b: DVector<f64>) -> Self {
        Self { c_inv_a, c_inv_b }
    }

    pub fn dim_theta(&self) -> usize {
        self.c_inv_a.ncols()
    }

    pub fn dim_w(&self) -> usize {
        self.c_inv_b.len()
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_w()];
        self.eval_into(theta, &mut out);
        out
    }

    pub fn eval_into(&self, theta: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.c_inv_b[i];
            for (j, th) in theta.iter().enumerate() {
                acc -= self.c_inv_a[(i, j)] * th;
            }
            *o = acc;
        }
    }

    /// Lipschitz constant `||C^{-1} A||_2`.
    pub fn lipschitz(&self) -> f64 {
        operator_norm(&self.c_inv_a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub cond_a: f64,
    pub cond_c: f64,
    pub c_eigen_min: f64,
    pub c_eigen_max: f64,
    /// Largest real part among eigenvalues of `-C` (negative means stable).
    pub fast_max_real: f64,
    /// Largest real part among eigenvalues of `-A^T C^{-1} A`.
    pub slow_max_real: f64,
    /// Real parts of the eigenvalues of `A`.
    pub a_eigen_real: Vec<f64>,
}

/// Ground truth for one `(mdp, pi, pi_b, phi)` instance.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub gamma: f64,
    pub nu: DVector<f64>,
    pub p_behavior: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub c_inv: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    pub lambda: LambdaMap,
    pub cond: ConditionReport,
}

impl OracleSolution {
    pub fn solve(mdp: &FiniteMdp, pi: &Policy, pi_b: &Policy, phi: &FeatureMap) -> Result<Self> {
        if phi.n_states() != mdp.n_states() {
            return Err(Error::Shape(format!("features cover {} states, MDP has {}", phi.n_states(), mdp.n_states())));
        }
        let p_behavior = behavior_matrix(mdp, pi_b);
        let nu = stationary_distribution(&p_behavior)?;
        let Moments { a, b, c, m } = compute_moments(mdp, pi, pi_b, phi, &nu);
        let theta_star = td_fixed_point(&a, &b)?;
        let cond_c = condition_number(&c);
        let c_inv = c
            .clone()
            .try_inverse()
            .filter(|_| cond_c < MAX_CONDITION)
            .ok_or(Error::IllConditioned { condition: cond_c })?;
        let lambda = LambdaMap::new(&c_inv * &a, &c_inv * &b);
        let cond = spectra(&a, &c, &c_inv);
        Ok(Self { gamma: mdp.gamma(), nu, p_behavior, a, b, c, m, c_inv, theta_star, lambda, cond })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `b - A theta = E[rho delta(theta) phi]`.
    pub fn expected_td_update(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * theta
    }

    pub fn lambda_map(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.lambda.c_inv_b - &self.lambda.c_inv_a * theta
    }

    /// `J(theta) = (b - A theta)^T C^{-1} (b - A theta)`.
    pub fn objective_j(&self, theta: &DVector<f64>) -> f64 {
        let r = self.expected_td_update(theta);
        r.dot(&(&self.c_inv * &r))
    }

    /// `grad J(theta) = -2 A^T C^{-1} (b - A theta)`.
    pub fn grad_j(&self, theta: &DVector<f64>) -> DVector<f64> {
        -2.0 * self.neg_half_grad(theta)
    }

    /// `A^T C^{-1} (b - A theta)`.
    pub fn neg_half_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.a.transpose() * (&self.c_inv * self.expected_td_update(theta))
    }

    /// The same quantity as [`Self::neg_half_grad`] written through the
    /// correction matrix: `(b - A theta) - gamma M lambda(theta)`.
    pub fn neg_half_grad_corrected(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.expected_td_update(theta) - self.gamma * &self.m * self.lambda_map(theta)
    }

    /// Serializable dump of every field plus spectra.
    pub fn export(&self) -> OracleExport {
        OracleExport {
            gamma: self.gamma,
            nu: self.nu.iter().copied().collect(),
            p_behavior: to_rows(&self.p_behavior),
            a: to_rows(&self.a),
            b: self.b.iter().copied().collect(),
            c: to_rows(&self.c),
            m: to_rows(&self.m),
            theta_star: self.theta_star.iter().copied().collect(),
            lambda_c_inv_a: to_rows(&self.lambda.c_inv_a),
            lambda_c_inv_b: self.lambda.c_inv_b.iter().copied().collect(),
            lambda_lipschitz: self.lambda.lipschitz(),
            condition: self.cond.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleExport {
    pub gamma: f64,
    pub nu: Vec<f64>,
    pub p_behavior: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
    pub lambda_c_inv_a: Vec<Vec<f64>>,
    pub lambda_c_inv_b: Vec<f64>,
    pub lambda_lipschitz: f64,
    pub condition: ConditionReport,
}

fn spectra(a: &DMatrix<f64>, c: &DMatrix<f64>, c_inv: &DMatrix<f64>) -> ConditionReport {
    let c_eig = c.clone().symmetric_eigen().eigenvalues;
    let slow = a.transpose() * c_inv * a;
    let slow = (&slow + slow.transpose()) * 0.5;
    let slow_eig = (-slow).symmetric_eigen().eigenvalues;
    let a_eig = a.complex_eigenvalues();
    ConditionReport {
        cond_a: condition_number(a),
        cond_c: condition_number(c),
        c_eigen_min: c_eig.min(),
        c_eigen_max: c_eig.max(),
        fast_max_real: -c_eig.min(),
        slow_max_real: slow_eig.max(),
        a_eigen_real: a_eig.iter().map(|z| z.re).collect(),
    }
}
