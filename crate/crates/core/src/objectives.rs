//! Differentiable objective families and federated problems built from them.

use crate::error::{Error, Result};
use crate::oracles::GradientOracle;

/// A smooth objective with analytic value, gradient and known constants.
///
/// Every family is defined on `R^p`; the one-dimensional case is the one the
/// experiment problems use.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `curvature / 2 * ||x - center||^2`
    Quadratic { curvature: f64, center: Vec<f64> },
    /// Unit-radius Huber loss around `center`: `r^2 / 2` for `r < 1`, else `r - 1/2`.
    Huber { center: Vec<f64> },
    /// `sum_k ln(1 + exp(x_k - shift))`
    Softplus { shift: f64, dim: usize },
    /// Equally weighted mean of `parts`. Also used for finite sums.
    Mean {
        parts: Vec<Objective>,
        infimum: Option<f64>,
    },
    /// `scale * inner(x) + offset`, `scale > 0`.
    Affine {
        scale: f64,
        offset: f64,
        inner: Box<Objective>,
    },
}

/// Asymptotic gradient of a 1-D objective: `slope * x + intercept` for
/// every `x` beyond `from` in the given direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Asymptote {
    pub slope: f64,
    pub intercept: f64,
    pub from: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Negative,
    Positive,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dist_sq(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

impl Objective {
    pub fn quadratic(curvature: f64, center: Vec<f64>) -> Result<Self> {
        if !(curvature >= 0.0) || center.is_empty() {
            return Err(Error::InvalidArgument(
                "quadratic needs curvature >= 0 and a non-empty center".into(),
            ));
        }
        Ok(Objective::Quadratic { curvature, center })
    }

    pub fn huber(center: Vec<f64>) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::InvalidArgument("huber center is empty".into()));
        }
        Ok(Objective::Huber { center })
    }

    pub fn softplus(shift: f64, dim: usize) -> Result<Self> {
        if dim == 0 || !shift.is_finite() {
            return Err(Error::InvalidArgument("softplus needs dim >= 1".into()));
        }
        Ok(Objective::Softplus { shift, dim })
    }

    /// `ln(1 + e^{x - i + 1})`, the softplus agent with index `i`.
    pub fn softplus_agent(i: usize) -> Self {
        Objective::Softplus {
            shift: i as f64 - 1.0,
            dim: 1,
        }
    }

    pub fn mean(parts: Vec<Objective>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("mean of zero objectives".into()));
        };
        let dim = first.dim();
        if let Some(bad) = parts.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Objective::Mean {
            parts,
            infimum: None,
        })
    }

    pub fn affine(scale: f64, offset: f64, inner: Objective) -> Result<Self> {
        if !(scale > 0.0) || !offset.is_finite() {
            return Err(Error::InvalidArgument("affine scale must be > 0".into()));
        }
        Ok(Objective::Affine {
            scale,
            offset,
            inner: Box::new(inner),
        })
    }

    /// Attach a certified infimum to a mean objective.
    pub fn with_infimum(self, value: f64) -> Self {
        match self {
            Objective::Mean { parts, .. } => Objective::Mean {
                parts,
                infimum: Some(value),
            },
            other => other,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic { center, .. } | Objective::Huber { center } => center.len(),
            Objective::Softplus { dim, .. } => *dim,
            Objective::Mean { parts, .. } => parts[0].dim(),
            Objective::Affine { inner, .. } => inner.dim(),
        }
    }

    /// Smoothness constant L.
    pub fn smoothness(&self) -> f64 {
        match self {
            Objective::Quadratic { curvature, .. } => *curvature,
            Objective::Huber { .. } => 1.0,
            Objective::Softplus { .. } => 0.25,
            Objective::Mean { parts, .. } => {
                parts.iter().map(Objective::smoothness).sum::<f64>() / parts.len() as f64
            }
            Objective::Affine { scale, inner, .. } => scale * inner.smoothness(),
        }
    }

    /// PL constant, when the family has one.
    pub fn pl_constant(&self) -> Option<f64> {
        match self {
            Objective::Quadratic { curvature, .. } if *curvature > 0.0 => Some(*curvature),
            Objective::Affine { scale, inner, .. } => inner.pl_constant().map(|m| scale * m),
            _ => None,
        }
    }

    /// Known infimum. `None` for a mean that has not been certified yet.
    pub fn infimum(&self) -> Option<f64> {
        match self {
            Objective::Quadratic { .. } | Objective::Huber { .. } | Objective::Softplus { .. } => {
                Some(0.0)
            }
            Objective::Mean { infimum, .. } => *infimum,
            Objective::Affine {
                scale,
                offset,
                inner,
            } => inner.infimum().map(|v| scale * v + offset),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.value_unchecked(x))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; x.len()];
        self.gradient_into(x, &mut out);
        Ok(out)
    }

    /// Value without the dimension check.
    pub fn value_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Objective::Quadratic { curvature, center } => 0.5 * curvature * dist_sq(x, center),
            Objective::Huber { center } => {
                let r2 = dist_sq(x, center);
                if r2 < 1.0 {
                    0.5 * r2
                } else {
                    r2.sqrt() - 0.5
                }
            }
            Objective::Softplus { shift, .. } => x.iter().map(|xk| softplus(xk - shift)).sum(),
            Objective::Mean { parts, .. } => {
                parts.iter().map(|p| p.value_unchecked(x)).sum::<f64>() / parts.len() as f64
            }
            Objective::Affine {
                scale,
                offset,
                inner,
            } => scale * inner.value_unchecked(x) + offset,
        }
    }

    /// Writes the gradient into `out` (length = dim, unchecked).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.add_gradient(x, 1.0, out);
    }

    /// `out += weight * grad(x)`
    pub fn add_gradient(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        match self {
            Objective::Quadratic { curvature, center } => {
                for ((o, xk), ck) in out.iter_mut().zip(x).zip(center) {
                    *o += weight * curvature * (xk - ck);
                }
            }
            Objective::Huber { center } => {
                let r2 = dist_sq(x, center);
                let s = if r2 < 1.0 { 1.0 } else { 1.0 / r2.sqrt() };
                for ((o, xk), ck) in out.iter_mut().zip(x).zip(center) {
                    *o += weight * s * (xk - ck);
                }
            }
            Objective::Softplus { shift, .. } => {
                for (o, xk) in out.iter_mut().zip(x) {
                    *o += weight * logistic(xk - shift);
                }
            }
            Objective::Mean { parts, .. } => {
                let w = weight / parts.len() as f64;
                for p in parts {
                    p.add_gradient(x, w, out);
                }
            }
            Objective::Affine { scale, inner, .. } => inner.add_gradient(x, weight * scale, out),
        }
    }

    /// Scalar value for 1-D objectives.
    pub fn value_1d(&self, x: f64) -> f64 {
        self.value_unchecked(std::slice::from_ref(&x))
    }

    /// Scalar derivative for 1-D objectives.
    pub fn gradient_1d(&self, x: f64) -> f64 {
        let mut g = [0.0];
        self.add_gradient(std::slice::from_ref(&x), 1.0, &mut g);
        g[0]
    }

    /// Affine asymptote of the derivative of a 1-D objective.
    ///
    /// Softplus tails are exact up to `e^{-40}`.
    pub fn asymptote(&self, direction: Direction) -> Option<Asymptote> {
        if self.dim() != 1 {
            return None;
        }
        let sign = match direction {
            Direction::Negative => -1.0,
            Direction::Positive => 1.0,
        };
        Some(match self {
            Objective::Quadratic { curvature, center } => Asymptote {
                slope: *curvature,
                intercept: -curvature * center[0],
                from: center[0],
            },
            Objective::Huber { center } => Asymptote {
                slope: 0.0,
                intercept: sign,
                from: center[0] + sign,
            },
            Objective::Softplus { shift, .. } => Asymptote {
                slope: 0.0,
                intercept: if sign > 0.0 { 1.0 } else { 0.0 },
                from: shift + sign * 40.0,
            },
            Objective::Mean { parts, .. } => {
                let m = parts.len() as f64;
                let mut acc = Asymptote {
                    slope: 0.0,
                    intercept: 0.0,
                    from: 0.0,
                };
                for (k, p) in parts.iter().enumerate() {
                    let a = p.asymptote(direction)?;
                    acc.slope += a.slope / m;
                    acc.intercept += a.intercept / m;
                    acc.from = if k == 0 {
                        a.from
                    } else if sign > 0.0 {
                        acc.from.max(a.from)
                    } else {
                        acc.from.min(a.from)
                    };
                }
                acc
            }
            Objective::Affine { scale, inner, .. } => {
                let a = inner.asymptote(direction)?;
                Asymptote {
                    slope: scale * a.slope,
                    intercept: scale * a.intercept,
                    from: a.from,
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfimumOptions {
    pub grid: usize,
    pub iterations: usize,
    /// Number of grid-local minima refined.
    pub starts: usize,
}

impl Default for InfimumOptions {
    fn default() -> Self {
        Self {
            grid: 10_000,
            iterations: 200,
            starts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub argmin: f64,
    pub value: f64,
    /// Upper bound on `value - inf f` over the bracket.
    pub error_bound: f64,
}

/// Golden-section search on `[a, b]`, returning the final bracket.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iterations: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iterations {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        if b - a <= f64::EPSILON * (a.abs() + b.abs()) {
            break;
        }
    }
    (a, b)
}

/// Minimum of a 1-D objective over `bracket`, with an error certificate.
///
/// Localizes on a uniform grid, then refines each grid-local minimum by
/// golden-section search. Fails when the best point sits on the bracket
/// boundary or the certificate `L * w^2` exceeds `tol`.
pub fn certified_minimum(
    obj: &Objective,
    bracket: (f64, f64),
    tol: f64,
    opts: InfimumOptions,
) -> Result<Minimum> {
    if obj.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: obj.dim(),
        });
    }
    let (lo, hi) = bracket;
    if !(lo < hi) || !(tol > 0.0) || opts.grid < 3 {
        return Err(Error::InvalidArgument(format!(
            "bad bracket [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    let n = opts.grid;
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|k| lo + h * k as f64).collect();
    let vs: Vec<f64> = xs.iter().map(|&x| obj.value_1d(x)).collect();

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&k| {
            let left = k == 0 || vs[k] <= vs[k - 1];
            let right = k + 1 == n || vs[k] <= vs[k + 1];
            left && right
        })
        .collect();
    candidates.sort_by(|&a, &b| vs[a].total_cmp(&vs[b]));
    candidates.truncate(opts.starts.max(1));

    let lsmooth = obj.smoothness().max(f64::MIN_POSITIVE);
    let mut best: Option<Minimum> = None;
    for k in candidates {
        let a = xs[k.saturating_sub(1)];
        let b = xs[(k + 1).min(n - 1)];
        let (a, b) = golden_section(|x| obj.value_1d(x), a, b, opts.iterations);
        let x = 0.5 * (a + b);
        let v = obj.value_1d(x).min(vs[k]);
        let x = if obj.value_1d(x) <= vs[k] { x } else { xs[k] };
        let w = b - a;
        let cand = Minimum {
            argmin: x,
            value: v,
            error_bound: lsmooth * w * w,
        };
        if best.is_none_or(|m| cand.value < m.value) {
            best = Some(cand);
        }
    }
    let best = best.expect("grid has at least one local minimum");
    let edge = 1e-9 * (hi - lo);
    if best.argmin - lo <= h + edge || hi - best.argmin <= h + edge {
        let g = obj.gradient_1d(best.argmin);
        if g.abs() > tol.sqrt() {
            return Err(Error::CertificationFailed(format!(
                "minimum at bracket boundary x = {} (derivative {g:e})",
                best.argmin
            )));
        }
    }
    if best.error_bound > tol {
        return Err(Error::CertificationFailed(format!(
            "error bound {:e} exceeds tolerance {tol:e}",
            best.error_bound
        )));
    }
    Ok(best)
}

/// Infimum of a 1-D objective over `bracket` within `tol`.
pub fn certified_infimum(obj: &Objective, bracket: (f64, f64), tol: f64) -> Result<f64> {
    certified_minimum(obj, bracket, tol, InfimumOptions::default()).map(|m| m.value)
}

/// `n` agents with equal weights, their oracles and the certified infimum of
/// the average objective.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    oracles: Vec<GradientOracle>,
    average: Objective,
    agent_infima: Vec<f64>,
    f_star: f64,
    argmin: Option<f64>,
    bracket: (f64, f64),
    l_max: f64,
}

/// Tolerance used when a problem certifies its own infima.
pub const DEFAULT_INFIMUM_TOL: f64 = 1e-10;

impl FederatedProblem {
    /// Builds a 1-D problem, certifying `f*` (and any unknown agent infimum)
    /// over `bracket`.
    pub fn new(oracles: Vec<GradientOracle>, bracket: (f64, f64)) -> Result<Self> {
        let parts = Self::validate(&oracles)?;
        let average = Objective::mean(parts)?;
        if average.dim() != 1 {
            return Err(Error::InvalidArgument(
                "infimum certification needs a 1-D problem; use with_known_infimum".into(),
            ));
        }
        let agent_infima = oracles
            .iter()
            .map(|o| match o.objective().infimum() {
                Some(v) => Ok(v),
                None => certified_infimum(o.objective(), bracket, DEFAULT_INFIMUM_TOL),
            })
            .collect::<Result<Vec<_>>>()?;
        let oracles = oracles
            .into_iter()
            .zip(&agent_infima)
            .map(|(o, &v)| o.with_objective_infimum(v))
            .collect();
        let m = certified_minimum(
            &average,
            bracket,
            DEFAULT_INFIMUM_TOL,
            InfimumOptions::default(),
        )?;
        Self::assemble(oracles, average, agent_infima, m.value, Some(m.argmin), bracket)
    }

    /// Builds a problem whose average infimum is supplied by the caller.
    pub fn with_known_infimum(oracles: Vec<GradientOracle>, f_star: f64) -> Result<Self> {
        let parts = Self::validate(&oracles)?;
        let average = Objective::mean(parts)?;
        let agent_infima = oracles
            .iter()
            .map(|o| {
                o.objective().infimum().ok_or_else(|| {
                    Error::InvalidArgument("agent infimum unknown and cannot be certified".into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(oracles, average, agent_infima, f_star, None, (f64::NAN, f64::NAN))
    }

    fn validate(oracles: &[GradientOracle]) -> Result<Vec<Objective>> {
        if oracles.is_empty() {
            return Err(Error::InvalidArgument("problem needs n >= 1 agents".into()));
        }
        Ok(oracles.iter().map(|o| o.objective().clone()).collect())
    }

    fn assemble(
        oracles: Vec<GradientOracle>,
        average: Objective,
        agent_infima: Vec<f64>,
        f_star: f64,
        argmin: Option<f64>,
        bracket: (f64, f64),
    ) -> Result<Self> {
        let lower = agent_infima.iter().sum::<f64>() / agent_infima.len() as f64;
        if f_star < lower - 1e-9 * (1.0 + lower.abs()) {
            return Err(Error::InvalidArgument(format!(
                "f* = {f_star} is below the mean of agent infima {lower}"
            )));
        }
        let l_max = oracles
            .iter()
            .map(|o| o.objective().smoothness())
            .fold(0.0, f64::max);
        Ok(Self {
            average: average.with_infimum(f_star),
            oracles,
            agent_infima,
            f_star,
            argmin,
            bracket,
            l_max,
        })
    }

    pub fn n(&self) -> usize {
        self.oracles.len()
    }

    /// Same problem with every oracle replaced by the exact gradient.
    pub fn with_exact_oracles(&self) -> Self {
        let oracles = self
            .oracles
            .iter()
            .map(|o| GradientOracle::exact(o.objective().clone()).with_claim(0.0, 0.0))
            .collect();
        Self {
            oracles,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.average.dim()
    }

    pub fn oracles(&self) -> &[GradientOracle] {
        &self.oracles
    }

    pub fn objectives(&self) -> impl Iterator<Item = &Objective> {
        self.oracles.iter().map(GradientOracle::objective)
    }

    pub fn average(&self) -> &Objective {
        &self.average
    }

    pub fn agent_infima(&self) -> &[f64] {
        &self.agent_infima
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    /// Certified minimizer of the average (1-D problems only).
    pub fn argmin(&self) -> Option<f64> {
        self.argmin
    }

    pub fn bracket(&self) -> (f64, f64) {
        self.bracket
    }

    /// Largest agent smoothness constant.
    pub fn l_max(&self) -> f64 {
        self.l_max
    }
}

/// The average objective `f = (1/n) sum f_i` of a problem.
pub fn average_objective(problem: &FederatedProblem) -> Objective {
    problem.average().clone()
}
