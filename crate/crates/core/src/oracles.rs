//! Stochastic gradient oracles and the checks run against them: exact
//! moments over finite noise supports, ABC envelope verification,
//! unbiasedness, and refutation of the relaxed growth condition.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objectives::{norm_sq, Objective};
use crate::rng::{CounterRng, NoiseStream};

/// Perturbation size rule for sign-perturbation oracles.
#[derive(Debug, Clone, PartialEq)]
pub enum Magnitude {
    /// `sqrt(||x - center||)`
    SqrtDistance { center: Vec<f64> },
    /// `sqrt(f(x) - f_inf)`
    SqrtValueGap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    Exact,
    /// `grad f(x) +/- m(x) u` with a fair sign and `u = (1, .., 1) / sqrt(p)`.
    SignPerturbation(Magnitude),
    /// Mean of `batch` components drawn uniformly with replacement.
    FiniteSumWithReplacement { batch: usize },
    /// Mean over a uniform `batch`-subset of the components.
    FiniteSumWithoutReplacement { batch: usize },
    /// Independent `N(0, variance)` added to every coordinate.
    AdditiveGaussian { variance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    WithReplacement(usize),
    WithoutReplacement(usize),
}

/// Claimed `(C, D)` in `E||g - grad f||^2 <= C (f(x) - f*) + D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcClaim {
    pub c: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOracle {
    objective: Objective,
    noise: Noise,
    claim: Option<AbcClaim>,
}

/// Supports larger than this are not enumerated.
const MAX_SUPPORT: usize = 1 << 20;

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for j in 0..k {
        acc = acc.checked_mul(n - j)? / (j + 1);
    }
    Some(acc)
}

impl GradientOracle {
    pub fn exact(objective: Objective) -> Self {
        Self {
            objective,
            noise: Noise::Exact,
            claim: None,
        }
    }

    pub fn sign_perturbation(objective: Objective, magnitude: Magnitude) -> Result<Self> {
        match &magnitude {
            Magnitude::SqrtDistance { center } if center.len() != objective.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: objective.dim(),
                    got: center.len(),
                })
            }
            Magnitude::SqrtValueGap if objective.infimum().is_none() => {
                return Err(Error::InvalidArgument(
                    "sqrt value-gap magnitude needs a known infimum".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            objective,
            noise: Noise::SignPerturbation(magnitude),
            claim: None,
        })
    }

    pub fn additive_gaussian(objective: Objective, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument("gaussian variance must be >= 0".into()));
        }
        Ok(Self {
            objective,
            noise: Noise::AdditiveGaussian { variance },
            claim: None,
        })
    }

    pub fn with_claim(mut self, c: f64, d: f64) -> Self {
        self.claim = Some(AbcClaim { c, d });
        self
    }

    /// Same oracle with the objective's infimum recorded (finite sums).
    pub fn with_objective_infimum(mut self, value: f64) -> Self {
        self.objective = self.objective.with_infimum(value);
        self
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn claim(&self) -> Option<AbcClaim> {
        self.claim
    }

    pub fn has_finite_support(&self) -> bool {
        !matches!(self.noise, Noise::AdditiveGaussian { .. })
    }

    fn components(&self) -> &[Objective] {
        match &self.objective {
            Objective::Mean { parts, .. } => parts,
            _ => std::slice::from_ref(&self.objective),
        }
    }

    fn magnitude(&self, rule: &Magnitude, x: &[f64]) -> f64 {
        match rule {
            Magnitude::SqrtDistance { center } => x
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                .sqrt(),
            Magnitude::SqrtValueGap => {
                let inf = self.objective.infimum().unwrap_or(0.0);
                (self.objective.value_unchecked(x) - inf).max(0.0).sqrt()
            }
        }
    }

    /// One stochastic gradient into `out`, drawing from `rng`. No dimension check.
    pub fn sample_into(&self, x: &[f64], rng: &mut CounterRng, out: &mut [f64]) {
        match &self.noise {
            Noise::Exact => self.objective.gradient_into(x, out),
            Noise::SignPerturbation(rule) => {
                self.objective.gradient_into(x, out);
                let m = self.magnitude(rule, x) / (x.len() as f64).sqrt();
                let delta = if rng.bernoulli_half() { -m } else { m };
                out.iter_mut().for_each(|o| *o += delta);
            }
            Noise::FiniteSumWithReplacement { batch } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let parts = self.components();
                let w = 1.0 / *batch as f64;
                for _ in 0..*batch {
                    let j = rng.random_range(0..parts.len());
                    parts[j].add_gradient(x, w, out);
                }
            }
            Noise::FiniteSumWithoutReplacement { batch } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let parts = self.components();
                let w = 1.0 / *batch as f64;
                for j in index::sample(rng, parts.len(), *batch) {
                    parts[j].add_gradient(x, w, out);
                }
            }
            Noise::AdditiveGaussian { variance } => {
                self.objective.gradient_into(x, out);
                let sd = variance.sqrt();
                for o in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o += sd * z;
                }
            }
        }
    }

    /// One draw `g(x; xi)` with `xi` addressed by `stream`.
    pub fn sample_gradient(&self, x: &[f64], stream: &NoiseStream) -> Result<Vec<f64>> {
        if x.len() != self.objective.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.objective.dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        self.sample_into(x, &mut stream.rng(), &mut out);
        Ok(out)
    }

    /// Every outcome of the noise at `x` with its probability.
    pub fn support(&self, x: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        let grad = self.objective.gradient(x)?;
        match &self.noise {
            Noise::Exact => Ok(vec![(1.0, grad)]),
            Noise::SignPerturbation(rule) => {
                let m = self.magnitude(rule, x) / (x.len() as f64).sqrt();
                let plus = grad.iter().map(|g| g + m).collect();
                let minus = grad.iter().map(|g| g - m).collect();
                Ok(vec![(0.5, plus), (0.5, minus)])
            }
            Noise::FiniteSumWithReplacement { batch } => {
                let parts = self.components();
                let m = parts.len();
                let size = (m as u128).checked_pow(*batch as u32).unwrap_or(u128::MAX);
                if size > MAX_SUPPORT as u128 {
                    return Err(Error::InvalidArgument(format!(
                        "support of size {m}^{batch} is too large to enumerate"
                    )));
                }
                let grads: Vec<Vec<f64>> =
                    parts.iter().map(|p| p.gradient(x)).collect::<Result<_>>()?;
                let p = 1.0 / size as f64;
                let mut counter = vec![0usize; *batch];
                let mut out = Vec::with_capacity(size as usize);
                loop {
                    let mut g = vec![0.0; x.len()];
                    for &j in &counter {
                        for (gk, cj) in g.iter_mut().zip(&grads[j]) {
                            *gk += cj / *batch as f64;
                        }
                    }
                    out.push((p, g));
                    // odometer increment
                    let mut pos = 0;
                    while pos < *batch {
                        counter[pos] += 1;
                        if counter[pos] < m {
                            break;
                        }
                        counter[pos] = 0;
                        pos += 1;
                    }
                    if pos == *batch {
                        break;
                    }
                }
                Ok(out)
            }
            Noise::FiniteSumWithoutReplacement { batch } => {
                let parts = self.components();
                let m = parts.len();
                let size = binomial(m, *batch).filter(|&s| s <= MAX_SUPPORT).ok_or_else(|| {
                    Error::InvalidArgument(format!("C({m}, {batch}) is too large to enumerate"))
                })?;
                let grads: Vec<Vec<f64>> =
                    parts.iter().map(|p| p.gradient(x)).collect::<Result<_>>()?;
                let p = 1.0 / size as f64;
                let mut subset: Vec<usize> = (0..*batch).collect();
                let mut out = Vec::with_capacity(size);
                loop {
                    let mut g = vec![0.0; x.len()];
                    for &j in &subset {
                        for (gk, cj) in g.iter_mut().zip(&grads[j]) {
                            *gk += cj / *batch as f64;
                        }
                    }
                    out.push((p, g));
                    // next combination in lexicographic order
                    let Some(i) = (0..*batch).rev().find(|&i| subset[i] < m - batch + i) else {
                        break;
                    };
                    subset[i] += 1;
                    for k in i + 1..*batch {
                        subset[k] = subset[k - 1] + 1;
                    }
                }
                Ok(out)
            }
            Noise::AdditiveGaussian { .. } => Err(Error::NoFiniteSupport),
        }
    }

    /// `E[g(x; xi)]` by enumerating the support.
    pub fn exact_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; x.len()];
        for (p, g) in self.support(x)? {
            for (m, gk) in mean.iter_mut().zip(&g) {
                *m += p * gk;
            }
        }
        Ok(mean)
    }

    /// `E||g(x; xi)||^2` by enumerating the support.
    pub fn exact_second_moment(&self, x: &[f64]) -> Result<f64> {
        Ok(self.support(x)?.iter().map(|(p, g)| p * norm_sq(g)).sum())
    }

    /// `E||g(x; xi) - grad f(x)||^2`: enumerated, or analytic for Gaussian noise.
    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        if let Noise::AdditiveGaussian { variance } = self.noise {
            self.objective.gradient(x)?;
            return Ok(variance * x.len() as f64);
        }
        let grad = self.objective.gradient(x)?;
        Ok(self
            .support(x)?
            .iter()
            .map(|(p, g)| {
                p * g
                    .iter()
                    .zip(&grad)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum())
    }

    /// `E||g||^2`, enumerated or analytic.
    pub fn second_moment(&self, x: &[f64]) -> Result<f64> {
        match self.noise {
            Noise::AdditiveGaussian { .. } => {
                Ok(norm_sq(&self.objective.gradient(x)?) + self.variance(x)?)
            }
            _ => self.exact_second_moment(x),
        }
    }
}

/// Finite-sum oracle over `components` with the given subsampling strategy.
pub fn make_finite_sum_oracle(
    components: Vec<Objective>,
    strategy: SamplingStrategy,
) -> Result<GradientOracle> {
    let m = components.len();
    let batch = match strategy {
        SamplingStrategy::WithReplacement(b) | SamplingStrategy::WithoutReplacement(b) => b,
    };
    if batch == 0 || batch > m {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} out of range 1..={m}"
        )));
    }
    let objective = Objective::mean(components)?;
    let noise = match strategy {
        SamplingStrategy::WithReplacement(b) => Noise::FiniteSumWithReplacement { batch: b },
        SamplingStrategy::WithoutReplacement(b) => Noise::FiniteSumWithoutReplacement { batch: b },
    };
    Ok(GradientOracle {
        objective,
        noise,
        claim: None,
    })
}

pub fn sample_gradient(oracle: &GradientOracle, x: &[f64], stream: &NoiseStream) -> Result<Vec<f64>> {
    oracle.sample_gradient(x, stream)
}

pub fn exact_second_moment(oracle: &GradientOracle, x: &[f64]) -> Result<f64> {
    oracle.exact_second_moment(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcProbe {
    pub x: Vec<f64>,
    pub variance: f64,
    pub bound: f64,
    /// Statistical margin added to the bound (0 when exact).
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcReport {
    pub exact: bool,
    pub probes: Vec<AbcProbe>,
    pub failures: usize,
    /// `min(bound + margin - variance)` over probes.
    pub min_slack: f64,
}

impl AbcReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

/// Sampling margin, in standard errors.
pub const SIGMA_MARGIN: f64 = 4.0;

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Checks `E||g - grad f||^2 <= C (f(x) - f_inf) + D` at each probe.
///
/// Finite-support oracles are checked exactly; others by `n_samples`
/// draws with a 4-sigma allowance.
pub fn verify_abc(
    oracle: &GradientOracle,
    c: f64,
    d: f64,
    probe_points: &[Vec<f64>],
    n_samples: usize,
    stream: &NoiseStream,
) -> Result<AbcReport> {
    if !(c >= 0.0) || !(d >= 0.0) {
        return Err(Error::InvalidArgument("C and D must be >= 0".into()));
    }
    if probe_points.is_empty() {
        return Err(Error::InvalidArgument("no probe points".into()));
    }
    let exact = oracle.has_finite_support();
    if !exact && n_samples < 100 {
        return Err(Error::InvalidArgument(format!(
            "sampled ABC check needs n_samples >= 100, got {n_samples}"
        )));
    }
    let inf = oracle.objective().infimum().ok_or_else(|| {
        Error::InvalidArgument("oracle objective has no known infimum".into())
    })?;
    let mut probes = Vec::with_capacity(probe_points.len());
    for (k, x) in probe_points.iter().enumerate() {
        let bound = c * (oracle.objective().value(x)? - inf) + d;
        let (variance, margin) = if exact {
            (oracle.variance(x)?, 0.0)
        } else {
            let grad = oracle.objective().gradient(x)?;
            let mut g = vec![0.0; x.len()];
            let sq: Vec<f64> = (0..n_samples)
                .map(|s| {
                    let mut rng = stream.round(k as u64).step(s as u64).rng();
                    oracle.sample_into(x, &mut rng, &mut g);
                    g.iter().zip(&grad).map(|(a, b)| (a - b) * (a - b)).sum()
                })
                .collect();
            let (mean, se) = mean_and_se(&sq);
            (mean, SIGMA_MARGIN * se)
        };
        let tol = 1e-12 * (1.0 + bound.abs());
        probes.push(AbcProbe {
            x: x.clone(),
            variance,
            bound,
            margin,
            pass: variance <= bound + margin + tol,
        });
    }
    let failures = probes.iter().filter(|p| !p.pass).count();
    let min_slack = probes
        .iter()
        .map(|p| p.bound + p.margin - p.variance)
        .fold(f64::INFINITY, f64::min);
    Ok(AbcReport {
        exact,
        probes,
        failures,
        min_slack,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub exact: bool,
    pub mean: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Per-coordinate allowed deviation.
    pub allowed: Vec<f64>,
    pub pass: bool,
}

/// Compares the mean of the oracle at `x` with the exact gradient.
pub fn check_unbiasedness(
    oracle: &GradientOracle,
    x: &[f64],
    n_samples: usize,
    stream: &NoiseStream,
) -> Result<UnbiasednessReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "unbiasedness check needs n_samples >= 1000, got {n_samples}"
        )));
    }
    let gradient = oracle.objective().gradient(x)?;
    if oracle.has_finite_support() {
        let mean = oracle.exact_mean(x)?;
        let allowed: Vec<f64> = gradient.iter().map(|g| 1e-12 * (1.0 + g.abs())).collect();
        let pass = mean
            .iter()
            .zip(&gradient)
            .zip(&allowed)
            .all(|((m, g), a)| (m - g).abs() <= *a);
        return Ok(UnbiasednessReport {
            exact: true,
            mean,
            gradient,
            allowed,
            pass,
        });
    }
    let p = x.len();
    let mut draws = vec![Vec::with_capacity(n_samples); p];
    let mut g = vec![0.0; p];
    for s in 0..n_samples {
        oracle.sample_into(x, &mut stream.step(s as u64).rng(), &mut g);
        for (col, gk) in draws.iter_mut().zip(&g) {
            col.push(*gk);
        }
    }
    let (mean, allowed): (Vec<f64>, Vec<f64>) = draws
        .iter()
        .map(|col| {
            let (m, se) = mean_and_se(col);
            (m, SIGMA_MARGIN * se)
        })
        .unzip();
    let pass = mean
        .iter()
        .zip(&gradient)
        .zip(&allowed)
        .all(|((m, g), a)| (m - g).abs() <= *a + 1e-15);
    Ok(UnbiasednessReport {
        exact: false,
        mean,
        gradient,
        allowed,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub x: f64,
    pub second_moment: f64,
    /// `sigma^2 + (eta^2 + 1) ||grad f(x)||^2`
    pub rhs: f64,
}

/// Log-spaced offsets `1e-3 .. 1e6` used by the grid search.
fn search_offsets() -> impl Iterator<Item = f64> {
    let steps = 3000;
    (0..=steps).map(move |k| 10f64.powf(-3.0 + 9.0 * k as f64 / steps as f64))
}

/// Finds `x` with `E||g(x)||^2 > sigma2 + (eta2 + 1) ||grad f(x)||^2`.
///
/// Softplus agents with value-gap perturbations use the closed-form
/// threshold `ln(e^{sigma2 + eta2} - 1) + shift` plus one; everything else
/// falls back to a log-spaced search around the perturbation center.
/// Candidates are accepted only after the strict inequality is evaluated.
pub fn refute_relaxed_growth(oracle: &GradientOracle, sigma2: f64, eta2: f64) -> Result<Witness> {
    if !(sigma2 >= 0.0) || !(eta2 >= 0.0) || sigma2 + eta2 == 0.0 {
        return Err(Error::InvalidArgument(
            "sigma^2 and eta^2 must be >= 0 and not both 0".into(),
        ));
    }
    if oracle.objective().dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: oracle.objective().dim(),
        });
    }
    let check = |x: f64| -> Result<Option<Witness>> {
        let second_moment = oracle.second_moment(&[x])?;
        let g = oracle.objective().gradient_1d(x);
        let rhs = sigma2 + (eta2 + 1.0) * g * g;
        Ok((second_moment > rhs).then_some(Witness {
            x,
            second_moment,
            rhs,
        }))
    };

    if let (Objective::Softplus { shift, .. }, Noise::SignPerturbation(Magnitude::SqrtValueGap)) =
        (oracle.objective(), oracle.noise())
    {
        let s = sigma2 + eta2;
        // ln(e^s - 1) without overflow
        let threshold = s + (-(-s).exp_m1()).ln() + shift;
        if let Some(w) = check(threshold + 1.0)? {
            return Ok(w);
        }
    }

    let anchor = match oracle.noise() {
        Noise::SignPerturbation(Magnitude::SqrtDistance { center }) => center[0],
        _ => 0.0,
    };
    for r in search_offsets() {
        for x in [anchor + r, anchor - r] {
            if let Some(w) = check(x)? {
                return Ok(w);
            }
        }
    }
    Err(Error::RefutationFailed(format!(
        "no witness within {anchor} +/- 1e6 for sigma^2 = {sigma2}, eta^2 = {eta2}"
    )))
}
