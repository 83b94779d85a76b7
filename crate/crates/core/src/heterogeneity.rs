//! Heterogeneity measures: `sigma_f* = f* - (1/n) sum f_i*`, gradient
//! dissimilarity and its smoothness bound, BGD constant estimation, drift
//! at the optimum, and the PL sandwich.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{certified_infimum, norm_sq, Direction, FederatedProblem, DEFAULT_INFIMUM_TOL};

/// `f* - (1/n) sum_i f_i*`, recertified at `tol` when the problem is 1-D.
pub fn sigma_f_star(problem: &FederatedProblem, tol: f64) -> Result<f64> {
    let (f_star, infima) = if problem.dim() == 1 && problem.bracket().0.is_finite() {
        let bracket = problem.bracket();
        let f_star = certified_infimum(problem.average(), bracket, tol)?;
        let infima = problem
            .objectives()
            .map(|o| match o.infimum() {
                Some(v) => Ok(v),
                None => certified_infimum(o, bracket, tol),
            })
            .collect::<Result<Vec<_>>>()?;
        (f_star, infima)
    } else {
        (problem.f_star(), problem.agent_infima().to_vec())
    };
    let sigma = f_star - infima.iter().sum::<f64>() / infima.len() as f64;
    if sigma < -2.0 * tol {
        return Err(Error::CertificationFailed(format!(
            "negative sigma_f* = {sigma:e}"
        )));
    }
    Ok(sigma.max(0.0))
}

fn agent_gradients(problem: &FederatedProblem, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let grads = problem
        .objectives()
        .map(|o| o.gradient(x))
        .collect::<Result<Vec<_>>>()?;
    let n = grads.len() as f64;
    let mut mean = vec![0.0; x.len()];
    for g in &grads {
        for (m, gk) in mean.iter_mut().zip(g) {
            *m += gk / n;
        }
    }
    Ok((grads, mean))
}

/// `(1/n) sum_i ||grad f_i(x) - grad f(x)||^2`.
pub fn gradient_dissimilarity(problem: &FederatedProblem, x: &[f64]) -> Result<f64> {
    let (grads, mean) = agent_gradients(problem, x)?;
    Ok(grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / grads.len() as f64)
}

/// `(1/n) sum_i ||grad f_i(x)||^2`.
pub fn mean_sq_agent_gradient(problem: &FederatedProblem, x: &[f64]) -> Result<f64> {
    let (grads, _) = agent_gradients(problem, x)?;
    Ok(grads.iter().map(|g| norm_sq(g)).sum::<f64>() / grads.len() as f64)
}

fn sigma_of(problem: &FederatedProblem) -> f64 {
    let infima = problem.agent_infima();
    (problem.f_star() - infima.iter().sum::<f64>() / infima.len() as f64).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub pass: bool,
    pub probes: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` over the probes.
    pub min_slack: f64,
    pub worst_x: Vec<f64>,
}

/// Checks `dissimilarity(x) <= 2L (f(x) - f*) + 2L sigma_f*` at every probe,
/// with `L` the largest agent smoothness constant.
pub fn check_dissimilarity_bound(
    problem: &FederatedProblem,
    probe_points: &[Vec<f64>],
) -> Result<BoundReport> {
    if probe_points.is_empty() {
        return Err(Error::InvalidArgument("no probe points".into()));
    }
    let l = problem.l_max();
    let sigma = sigma_of(problem);
    let allowance = 4.0 * l * DEFAULT_INFIMUM_TOL;
    let mut report = BoundReport {
        pass: true,
        probes: probe_points.len(),
        violations: 0,
        min_slack: f64::INFINITY,
        worst_x: Vec::new(),
    };
    for x in probe_points {
        let lhs = gradient_dissimilarity(problem, x)?;
        let rhs = 2.0 * l * (problem.average().value(x)? - problem.f_star()) + 2.0 * l * sigma;
        let slack = rhs - lhs;
        if slack < -(allowance + 1e-12 * (1.0 + rhs.abs())) {
            report.violations += 1;
        }
        if slack < report.min_slack {
            report.min_slack = slack;
            report.worst_x = x.clone();
        }
    }
    report.pass = report.violations == 0;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BgdEstimate {
    pub zeta2: f64,
    pub psi2: f64,
    /// `max_x [dissimilarity(x) - zeta2 - psi2 ||grad f(x)||^2]` over the grid; `<= 0` when feasible.
    pub residual: f64,
}

impl BgdEstimate {
    pub fn sum(&self) -> f64 {
        self.zeta2 + self.psi2
    }
}

/// Quadratic `a2 x^2 + a1 x + a0` describing `dissimilarity - psi2 ||grad f||^2`
/// beyond the last kink in one direction.
#[derive(Debug, Clone, Copy)]
struct Tail {
    sign: f64,
    start: f64,
    // dissimilarity coefficients
    d2: f64,
    d1: f64,
    d0: f64,
    // ||grad f||^2 coefficients
    g2: f64,
    g1: f64,
    g0: f64,
}

impl Tail {
    fn build(problem: &FederatedProblem, direction: Direction, edge: f64) -> Result<Self> {
        let asym = problem
            .objectives()
            .map(|o| {
                o.asymptote(direction).ok_or_else(|| {
                    Error::EstimationFailed("objective has no affine gradient asymptote".into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = asym.len() as f64;
        let sbar = asym.iter().map(|a| a.slope).sum::<f64>() / n;
        let bbar = asym.iter().map(|a| a.intercept).sum::<f64>() / n;
        let mut t = Tail {
            sign: if direction == Direction::Positive { 1.0 } else { -1.0 },
            start: edge,
            d2: 0.0,
            d1: 0.0,
            d0: 0.0,
            g2: sbar * sbar,
            g1: 2.0 * sbar * bbar,
            g0: bbar * bbar,
        };
        for a in &asym {
            let ds = a.slope - sbar;
            let db = a.intercept - bbar;
            t.d2 += ds * ds / n;
            t.d1 += 2.0 * ds * db / n;
            t.d0 += db * db / n;
            t.start = if t.sign > 0.0 { t.start.max(a.from) } else { t.start.min(a.from) };
        }
        Ok(t)
    }

    /// Smallest psi2 keeping the leading coefficient non-positive.
    fn psi2_floor(&self) -> Result<f64> {
        if self.d2 <= 0.0 {
            Ok(0.0)
        } else if self.g2 > 0.0 {
            Ok(self.d2 / self.g2)
        } else {
            Err(Error::EstimationFailed(
                "dissimilarity grows without bound while grad f stays bounded".into(),
            ))
        }
    }

    fn sup(&self, psi2: f64) -> f64 {
        let a2 = self.d2 - psi2 * self.g2;
        let a1 = self.d1 - psi2 * self.g1;
        let a0 = self.d0 - psi2 * self.g0;
        let q = |x: f64| (a2 * x + a1) * x + a0;
        let scale = self.d2 + psi2 * self.g2;
        if a2 > 1e-12 * scale {
            return f64::INFINITY;
        }
        if a2.abs() <= 1e-12 * scale {
            // linear tail: bounded iff it decreases outward
            return if a1 * self.sign > 1e-12 * (self.d1.abs() + psi2 * self.g1.abs()) {
                f64::INFINITY
            } else {
                q(self.start).max(q(self.start + self.sign * 1e6 * (1.0 + self.start.abs())))
            };
        }
        let vertex = -a1 / (2.0 * a2);
        if (vertex - self.start) * self.sign > 0.0 {
            q(vertex)
        } else {
            q(self.start)
        }
    }
}

struct BgdGrid<'a> {
    problem: &'a FederatedProblem,
    xs: Vec<f64>,
    diss: Vec<f64>,
    grad_sq: Vec<f64>,
    tails: [Tail; 2],
}

impl BgdGrid<'_> {
    fn point(&self, x: f64) -> (f64, f64) {
        let d = gradient_dissimilarity(self.problem, &[x]).unwrap_or(f64::NAN);
        let g = self.problem.average().gradient_1d(x);
        (d, g * g)
    }

    /// `max(0, sup_x [dissimilarity(x) - psi2 ||grad f(x)||^2])`.
    fn zeta2(&self, psi2: f64) -> f64 {
        let vals: Vec<f64> = self
            .diss
            .iter()
            .zip(&self.grad_sq)
            .map(|(d, g)| d - psi2 * g)
            .collect();
        let mut best = self.tails.iter().map(|t| t.sup(psi2)).fold(0.0, f64::max);
        if best.is_infinite() {
            return best;
        }
        let n = vals.len();
        let mut peaks: Vec<usize> = (0..n)
            .filter(|&k| (k == 0 || vals[k] >= vals[k - 1]) && (k + 1 == n || vals[k] >= vals[k + 1]))
            .collect();
        peaks.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        peaks.truncate(6);
        for k in peaks {
            best = best.max(vals[k]);
            let (mut a, mut b) = (self.xs[k.saturating_sub(1)], self.xs[(k + 1).min(n - 1)]);
            let h = |x: f64| {
                let (d, g) = self.point(x);
                d - psi2 * g
            };
            let r = (5f64.sqrt() - 1.0) / 2.0;
            let mut c = b - r * (b - a);
            let mut e = a + r * (b - a);
            let (mut hc, mut he) = (h(c), h(e));
            for _ in 0..80 {
                if hc >= he {
                    b = e;
                    e = c;
                    he = hc;
                    c = b - r * (b - a);
                    hc = h(c);
                } else {
                    a = c;
                    c = e;
                    hc = he;
                    e = a + r * (b - a);
                    he = h(e);
                }
            }
            best = best.max(hc).max(he);
        }
        best
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iterations: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iterations {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if b - a <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Approximately solves `min zeta2 + psi2` subject to
/// `dissimilarity(x) <= zeta2 + psi2 ||grad f(x)||^2` for all `x`.
///
/// The inner supremum is taken over a uniform grid on `x_range` (widened to
/// cover every kink) with golden-section refinement of the largest peaks,
/// plus the closed-form supremum of the affine-gradient tails beyond the
/// grid. The outer problem is convex in `psi2` and solved by golden-section
/// search from the smallest `psi2` that keeps the tails bounded.
pub fn estimate_bgd(problem: &FederatedProblem, x_range: (f64, f64), grid: usize) -> Result<BgdEstimate> {
    if problem.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: problem.dim(),
        });
    }
    if grid < 1000 || !(x_range.0 < x_range.1) {
        return Err(Error::InvalidArgument(format!(
            "need grid >= 1000 and a non-empty range, got {grid} on [{}, {}]",
            x_range.0, x_range.1
        )));
    }
    let neg = Tail::build(problem, Direction::Negative, x_range.0)?;
    let pos = Tail::build(problem, Direction::Positive, x_range.1)?;
    let (lo, hi) = (neg.start, pos.start);
    let step = (hi - lo) / (grid - 1) as f64;
    let xs: Vec<f64> = (0..grid).map(|k| lo + step * k as f64).collect();
    let (diss, grad_sq): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .map(|&x| {
            let d = gradient_dissimilarity(problem, &[x])?;
            let g = problem.average().gradient_1d(x);
            Ok((d, g * g))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let bgd = BgdGrid {
        problem,
        xs,
        diss,
        grad_sq,
        tails: [neg, pos],
    };

    let floor = neg.psi2_floor()?.max(pos.psi2_floor()?);
    let objective = |psi2: f64| psi2 + bgd.zeta2(psi2);
    let mut upper = 10f64.max(2.0 * floor + 1.0);
    let mut best = (floor, objective(floor));
    for _ in 0..8 {
        let (p, v) = golden_min(objective, floor, upper, 200);
        if v < best.1 {
            best = (p, v);
        }
        if p < floor + 0.9 * (upper - floor) {
            break;
        }
        upper *= 2.0;
    }
    if !best.1.is_finite() {
        return Err(Error::EstimationFailed(
            "no psi2 makes the dissimilarity supremum finite".into(),
        ));
    }
    let psi2 = best.0;
    let zeta2 = bgd.zeta2(psi2);
    let residual = bgd
        .diss
        .iter()
        .zip(&bgd.grad_sq)
        .map(|(d, g)| d - zeta2 - psi2 * g)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(BgdEstimate {
        zeta2,
        psi2,
        residual,
    })
}

/// Stationarity tolerance for the optimum passed to [`drift_at_optimum`].
pub const STATIONARITY_TOL: f64 = 1e-8;

/// `|| (1/n) sum_i (x* - x_i^Q) / (eta Q) ||` after `q` exact local gradient
/// steps per agent from `x_star`.
pub fn drift_at_optimum(problem: &FederatedProblem, q: usize, eta: f64, x_star: &[f64]) -> Result<f64> {
    if q == 0 || !(eta > 0.0) {
        return Err(Error::InvalidArgument("need Q >= 1 and eta > 0".into()));
    }
    let grad_norm = norm_sq(&problem.average().gradient(x_star)?).sqrt();
    if grad_norm > STATIONARITY_TOL {
        return Err(Error::NotStationary { grad_norm });
    }
    let n = problem.n() as f64;
    let mut displacement = vec![0.0; x_star.len()];
    let mut g = vec![0.0; x_star.len()];
    for obj in problem.objectives() {
        let mut x = x_star.to_vec();
        for _ in 0..q {
            obj.gradient_into(&x, &mut g);
            for (xk, gk) in x.iter_mut().zip(&g) {
                *xk -= eta * gk;
            }
        }
        for ((dk, sk), xk) in displacement.iter_mut().zip(x_star).zip(&x) {
            *dk += (sk - xk) / (eta * q as f64 * n);
        }
    }
    Ok(norm_sq(&displacement).sqrt())
}

/// Polishes a 1-D minimizer estimate by bisection on the sign of `f'`, so
/// that it passes the stationarity test of [`drift_at_optimum`].
pub fn refine_stationary_point(problem: &FederatedProblem, x0: f64) -> Result<f64> {
    if problem.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: problem.dim(),
        });
    }
    let f = problem.average();
    let g0 = f.gradient_1d(x0);
    if g0 == 0.0 {
        return Ok(x0);
    }
    // walk downhill until the derivative changes sign
    let dir = -g0.signum();
    let mut h = 1e-9 * (1.0 + x0.abs());
    let (mut a, mut b) = (x0, x0 + dir * h);
    for _ in 0..200 {
        if f.gradient_1d(b).signum() != g0.signum() {
            break;
        }
        a = b;
        h *= 2.0;
        b = x0 + dir * h;
    }
    if f.gradient_1d(b).signum() == g0.signum() {
        return Err(Error::NotStationary { grad_norm: g0.abs() });
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        if f.gradient_1d(m).signum() == g0.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(if f.gradient_1d(a).abs() <= f.gradient_1d(b).abs() { a } else { b })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub pass: bool,
    pub probes: usize,
    pub violations: usize,
    /// Smallest slack of the lower and upper inequalities.
    pub min_lower_slack: f64,
    pub min_upper_slack: f64,
}

/// Checks `2 mu (f - f*) + 2 mu sigma <= (1/n) sum ||grad f_i||^2 <= 2L (f - f*) + 2L sigma`.
pub fn pl_sandwich_check(
    problem: &FederatedProblem,
    mu: f64,
    probe_points: &[Vec<f64>],
) -> Result<SandwichReport> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument("mu must be > 0".into()));
    }
    for (i, o) in problem.objectives().enumerate() {
        match o.pl_constant() {
            Some(m) if m >= mu => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "agent {} has no PL constant >= {mu}",
                    i + 1
                )))
            }
        }
    }
    let l = problem.l_max();
    let sigma = sigma_of(problem);
    let mut report = SandwichReport {
        pass: true,
        probes: probe_points.len(),
        violations: 0,
        min_lower_slack: f64::INFINITY,
        min_upper_slack: f64::INFINITY,
    };
    for x in probe_points {
        let mid = mean_sq_agent_gradient(problem, x)?;
        let gap = problem.average().value(x)? - problem.f_star();
        let lower = 2.0 * mu * gap + 2.0 * mu * sigma;
        let upper = 2.0 * l * gap + 2.0 * l * sigma;
        let tol = 1e-9 * (1.0 + mid.abs()) + 4.0 * l * DEFAULT_INFIMUM_TOL;
        if mid < lower - tol || mid > upper + tol {
            report.violations += 1;
        }
        report.min_lower_slack = report.min_lower_slack.min(mid - lower);
        report.min_upper_slack = report.min_upper_slack.min(upper - mid);
    }
    report.pass = report.violations == 0;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityReport {
    pub sigma_f_star: f64,
    pub bgd: Option<BgdEstimate>,
    pub rho: Option<f64>,
    pub bound_check: BoundReport,
}
