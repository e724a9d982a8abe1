//! Fixed-step RK4 and the ODE limits of the two-timescale recursion.
//!
//! The fast ODE at frozen `theta` is `w' = (b - A theta) - C w` with
//! equilibrium `lambda(theta)`; the slow ODE is
//! `theta' = A^T C^{-1} (b - A theta)` with equilibrium `theta*`. The
//! non-autonomous slow ODE replaces the averaged field by the conditional mean
//! at the logged noise state, held constant on each `[t(n), t(n+1))`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::engine::{interpolate, TrajectoryLog, TwoTimescaleProblem};
use crate::linalg::{dist, norm, operator_norm, solve};
use crate::oracle::{LambdaMap, OracleSolution};
use crate::{Error, Result};

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Autonomous vector field `x -> x'`.
#[derive(Clone)]
pub enum OdeField {
    /// `x' = matrix x + offset`.
    Affine {
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
    },
    General {
        dim: usize,
        f: Arc<FieldFn>,
    },
}

impl fmt::Debug for OdeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Affine { matrix, offset } => {
                f.debug_struct("Affine").field("matrix", matrix).field("offset", offset).finish()
            }
            Self::General { dim, .. } => f.debug_struct("General").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

impl OdeField {
    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        assert_eq!(matrix.nrows(), offset.len());
        assert_eq!(matrix.nrows(), matrix.ncols());
        Self::Affine { matrix, offset }
    }

    pub fn from_fn(dim: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::General { dim, f: Arc::new(f) }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Affine { offset, .. } => offset.len(),
            Self::General { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Affine { matrix, offset } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = offset[i];
                    for (j, xj) in x.iter().enumerate() {
                        acc += matrix[(i, j)] * xj;
                    }
                    *o = acc;
                }
            }
            Self::General { f, .. } => f(x, out),
        }
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Self::Affine { matrix, .. } => Some(matrix),
            Self::General { .. } => None,
        }
    }

    /// Zero of an affine field.
    pub fn equilibrium(&self) -> Option<Result<DVector<f64>>> {
        match self {
            Self::Affine { matrix, offset } => Some(solve(matrix, &(-offset))),
            Self::General { .. } => None,
        }
    }

    /// `1e-3 / (1 + ||matrix||_2)` for affine fields, `1e-3` otherwise.
    pub fn default_dt(&self) -> f64 {
        match self {
            Self::Affine { matrix, .. } => 1e-3 / (1.0 + operator_norm(matrix)),
            Self::General { .. } => 1e-3,
        }
    }
}

/// `w -> (b - A theta) - C w`.
pub fn faster_field(sol: &OracleSolution, theta: &DVector<f64>) -> OdeField {
    OdeField::affine(-&sol.c, sol.expected_td_update(theta))
}

/// `theta -> A^T C^{-1} (b - A theta)`.
pub fn slower_field(sol: &OracleSolution) -> OdeField {
    let at_cinv = sol.a.transpose() * &sol.c_inv;
    OdeField::affine(-(&at_cinv * &sol.a), &at_cinv * &sol.b)
}

/// The slow field assembled from the correction matrix:
/// `theta -> (b - A theta) - gamma M lambda(theta)`.
pub fn slower_field_corrected(sol: &OracleSolution) -> OdeField {
    let gm = sol.gamma * &sol.m;
    let matrix = -&sol.a + &gm * &sol.lambda.c_inv_a;
    let offset = &sol.b - &gm * &sol.lambda.c_inv_b;
    OdeField::affine(matrix, offset)
}

/// Sampled solution; `states` is flat, one row of `dim` per time.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeTrajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

impl OdeTrajectory {
    fn new(dim: usize) -> Self {
        Self { dim, times: Vec::new(), states: Vec::new() }
    }

    fn push(&mut self, t: f64, x: &[f64]) {
        self.times.push(t);
        self.states.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least the initial point")
    }

    /// Every `every`-th sample plus the final one.
    pub fn thinned(&self, every: usize) -> OdeTrajectory {
        let every = every.max(1);
        let mut out = OdeTrajectory::new(self.dim);
        for i in 0..self.len() {
            if i % every == 0 || i + 1 == self.len() {
                out.push(self.times[i], self.state(i));
            }
        }
        out
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.len()).map(|i| norm(self.state(i))).fold(0.0, f64::max)
    }

    /// CSV with header `t,x_0..x_{m-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain((0..self.dim).map(|i| format!("x_{i}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(out, "{}", self.times[i])?;
            for x in self.state(i) {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        Self { k1: vec![0.0; dim], k2: vec![0.0; dim], k3: vec![0.0; dim], k4: vec![0.0; dim], tmp: vec![0.0; dim] }
    }

    fn step<F>(&mut self, f: &mut F, x: &mut [f64], h: f64) -> Result<()>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let n = x.len();
        f(x, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(&self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(&self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(&self.tmp, &mut self.k4)?;
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

/// Classical RK4 from `0` to `t_end` with step `dt`; the last step is
/// shortened so the final sample sits at `t_end` exactly.
pub fn integrate(field: &OdeField, x0: &[f64], t_end: f64, dt: f64) -> Result<OdeTrajectory> {
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(Error::InvalidArgument(format!("need dt > 0 and T >= dt, got dt = {dt}, T = {t_end}")));
    }
    if x0.len() != field.dim() {
        return Err(Error::Shape(format!(
            "initial state has length {}, field has dimension {}",
            x0.len(),
            field.dim()
        )));
    }
    let mut x = x0.to_vec();
    let mut traj = OdeTrajectory::new(x.len());
    traj.push(0.0, &x);
    let mut rk = Rk4::new(x.len());
    let mut f = |y: &[f64], out: &mut [f64]| {
        field.eval(y, out);
        Ok(())
    };
    let mut k: u64 = 0;
    let mut t = 0.0;
    while t < t_end {
        let next = ((k + 1) as f64 * dt).min(t_end);
        // absorb a sliver left by rounding into the final step
        let next = if t_end - next < 1e-9 * dt { t_end } else { next };
        rk.step(&mut f, &mut x, next - t)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: next });
        }
        t = next;
        k += 1;
        traj.push(t, &x);
    }
    Ok(traj)
}

/// Noise states held constant between knots: `states[i]` is active on
/// `[knots[i], knots[i + 1])`, so `knots.len() == states.len() + 1`.
#[derive(Clone, Debug)]
pub struct NoisePath<Z> {
    pub knots: Vec<f64>,
    pub states: Vec<Z>,
}

impl<Z> NoisePath<Z> {
    pub fn new(knots: Vec<f64>, states: Vec<Z>) -> Result<Self> {
        if knots.len() != states.len() + 1 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("noise path needs increasing knots, one more than states".into()));
        }
        Ok(Self { knots, states })
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().expect("non-empty knots")
    }
}

/// Walks the union grid of knots and `dt` multiples from `t0` to `t1`,
/// integrating `theta' = h(theta, lambda(theta), z(t))`, and calls `visit`
/// at every grid point with the knot interval index.
fn walk_nonautonomous<P, V>(
    problem: &P,
    lambda: &LambdaMap,
    path: &NoisePath<P::Noise>,
    theta_s: &[f64],
    (t0, t1): (f64, f64),
    dt: f64,
    mut visit: V,
) -> Result<()>
where
    P: TwoTimescaleProblem,
    V: FnMut(f64, usize, &[f64]) -> Result<()>,
{
    if !(dt > 0.0) || !(t1 >= t0) {
        return Err(Error::InvalidArgument(format!("need dt > 0 and t1 >= t0, got dt = {dt}, span [{t0}, {t1}]")));
    }
    if t0 < path.start() || t1 > path.end() {
        let covered = if t0 < path.start() { path.start() } else { path.end() };
        let needed = if t0 < path.start() { t0 } else { t1 };
        return Err(Error::InsufficientCoverage { covered, needed });
    }
    let dim = theta_s.len();
    let mut x = theta_s.to_vec();
    let mut lam = vec![0.0; lambda.dim_w()];
    let mut rk = Rk4::new(dim);
    let mut piece = path.knots.partition_point(|&k| k <= t0) - 1;
    piece = piece.min(path.states.len() - 1);
    visit(t0, piece, &x)?;
    let mut t = t0;
    let mut k: u64 = 0;
    while t < t1 {
        while piece + 1 < path.states.len() && path.knots[piece + 1] <= t {
            piece += 1;
        }
        let knot_end = path.knots[piece + 1].min(t1);
        while t0 + (k as f64) * dt <= t {
            k += 1;
        }
        let next = (t0 + k as f64 * dt).min(knot_end);
        let z = &path.states[piece];
        let mut f = |y: &[f64], out: &mut [f64]| -> Result<()> {
            lambda.eval_into(y, &mut lam);
            let h = problem.slow_mean(y, &lam, z).ok_or(Error::MissingExactMeans)?;
            out.copy_from_slice(&h);
            Ok(())
        };
        rk.step(&mut f, &mut x, next - t)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: next });
        }
        t = next;
        visit(t, piece, &x)?;
    }
    Ok(())
}

/// Integrates `theta' = h(theta, lambda(theta), z(t))` over `t_span` with the
/// noise held piecewise constant; steps never cross a knot.
pub fn nonautonomous_integrate<P: TwoTimescaleProblem>(
    problem: &P,
    lambda: &LambdaMap,
    path: &NoisePath<P::Noise>,
    theta_s: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<OdeTrajectory> {
    let mut traj = OdeTrajectory::new(theta_s.len());
    walk_nonautonomous(problem, lambda, path, theta_s, t_span, dt, |t, _, x| {
        traj.push(t, x);
        Ok(())
    })?;
    Ok(traj)
}

/// `sup_{t in [s, s+T]} ||theta_bar(t) - theta^s(t)||` where `theta^s` solves
/// the non-autonomous slow ODE from `theta_bar(s)` along the logged noise.
///
/// The log must hold consecutive iterates and noise states over the window.
pub fn tracking_error<P: TwoTimescaleProblem>(
    log: &TrajectoryLog<P::Noise>,
    problem: &P,
    lambda: &LambdaMap,
    s: f64,
    window: f64,
    dt: f64,
) -> Result<f64> {
    let end = s + window;
    let insufficient = || Error::InsufficientLog { needed_start: s, needed_end: end };
    if !log.has_noise() || log.is_empty() || s < log.t(0) || end > log.t(log.last()) {
        return Err(insufficient());
    }
    if window == 0.0 {
        return Ok(0.0);
    }
    let ts = log.times();
    let i0 = ts.partition_point(|&x| x <= s) - 1;
    let i1 = ts.partition_point(|&x| x < end).min(log.last());
    if (i0..i1).any(|i| log.n(i + 1) != log.n(i) + 1) {
        return Err(insufficient());
    }
    let knots = ts[i0..=i1].to_vec();
    let states = (i0..i1).map(|i| log.noise(i).cloned().ok_or_else(insufficient)).collect::<Result<Vec<_>>>()?;
    let path = NoisePath::new(knots, states)?;
    let (theta_s, _) = interpolate(log, s)?;
    let mut worst: f64 = 0.0;
    walk_nonautonomous(problem, lambda, &path, &theta_s, (s, end), dt, |t, piece, x| {
        let i = i0 + piece;
        let (ta, tb) = (log.t(i), log.t(i + 1));
        let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        let bar: Vec<f64> = log.theta(i).iter().zip(log.theta(i + 1)).map(|(p, q)| p + frac * (q - p)).collect();
        worst = worst.max(dist(&bar, x));
        Ok(())
    })?;
    Ok(worst)
}

/// A-priori bound `(C0 + (M + L ||lambda(0)||) T) exp(L (K + 1) T)` on
/// `||theta(t)||` for the non-autonomous slow ODE, where `M = max_z ||h(0,0,z)||`,
/// `L` is the Lipschitz constant of `h` in `||dtheta|| + ||dw||` and
/// `K = ||C^{-1} A||`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GronwallBound {
    pub c0: f64,
    pub drift_at_origin: f64,
    pub lipschitz: f64,
    pub lambda_lipschitz: f64,
    pub lambda_at_origin: f64,
}

impl GronwallBound {
    pub fn for_problem<P: TwoTimescaleProblem>(
        problem: &P,
        lambda: &LambdaMap,
        lipschitz: f64,
        theta_s: &[f64],
    ) -> Result<Self> {
        let zero_t = vec![0.0; problem.dim_theta()];
        let zero_w = vec![0.0; problem.dim_w()];
        let mut drift: f64 = 0.0;
        for z in problem.noise_support() {
            let h = problem.slow_mean(&zero_t, &zero_w, &z).ok_or(Error::MissingExactMeans)?;
            drift = drift.max(norm(&h));
        }
        Ok(Self {
            c0: norm(theta_s),
            drift_at_origin: drift,
            lipschitz,
            lambda_lipschitz: lambda.lipschitz(),
            lambda_at_origin: norm(&lambda.eval(&zero_t)),
        })
    }

    pub fn at(&self, span: f64) -> f64 {
        let l = self.lipschitz;
        (self.c0 + (self.drift_at_origin + l * self.lambda_at_origin) * span)
            * (l * (self.lambda_lipschitz + 1.0) * span).exp()
    }
}
