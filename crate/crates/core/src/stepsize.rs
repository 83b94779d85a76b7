//! Theory-driven stepsizes for FedAvg and SCAFFOLD, with their cap sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem and schedule constants a theory stepsize depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness constant.
    pub l: f64,
    /// ABC constant multiplying the suboptimality gap.
    pub c: f64,
    /// Local steps per round.
    pub q: usize,
    /// Server rounds.
    pub t: usize,
    /// Number of agents.
    pub n: usize,
}

impl TheoryParams {
    pub fn new(l: f64, c: f64, q: usize, t: usize, n: usize) -> Result<Self> {
        let p = TheoryParams { l, c, q, t, n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::InvalidArgument(format!("L must be positive, got {}", self.l)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!("C must be >= 0, got {}", self.c)));
        }
        if self.q == 0 || self.t == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("Q, T and n must be >= 1".into()));
        }
        Ok(())
    }

    fn qf(&self) -> f64 {
        self.q as f64
    }

    fn tf(&self) -> f64 {
        self.t as f64
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }
}

/// A named upper bound a stepsize must respect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cap {
    pub name: &'static str,
    pub value: f64,
}

fn recip(x: f64) -> f64 {
    if x == 0.0 {
        f64::INFINITY
    } else {
        1.0 / x
    }
}

/// `C + (14 Q^3 L^2 (2C + 3L) T)^(1/3) + 2 sqrt(2 Q C L)`.
pub fn fedavg_gamma(p: &TheoryParams) -> f64 {
    let (l, c, q, t) = (p.l, p.c, p.qf(), p.tf());
    c + (14.0 * q.powi(3) * l * l * (2.0 * c + 3.0 * l) * t).cbrt() + 2.0 * (2.0 * q * c * l).sqrt()
}

/// Constant FedAvg stepsize `1 / (sqrt(Q (L^2 + C^2) T / n) + gamma)`.
pub fn fedavg_stepsize(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    let lead = (p.qf() * (p.l * p.l + p.c * p.c) * p.tf() / p.nf()).sqrt();
    Ok(1.0 / (lead + fedavg_gamma(p)))
}

/// The four upper bounds the constant FedAvg stepsize must satisfy.
pub fn fedavg_caps(p: &TheoryParams) -> Result<Vec<Cap>> {
    p.validate()?;
    let (l, c, q, t, n) = (p.l, p.c, p.qf(), p.tf(), p.nf());
    Ok(vec![
        Cap {
            name: "sqrt(n / (Q (C^2 + L^2) T))",
            value: (n / (q * (c * c + l * l) * t)).sqrt(),
        },
        Cap {
            name: "(1 / (14 Q^3 L^2 (2C + 3L) T))^(1/3)",
            value: (1.0 / (14.0 * q.powi(3) * l * l * (2.0 * c + 3.0 * l) * t)).cbrt(),
        },
        Cap {
            name: "1 / C",
            value: recip(c),
        },
        Cap {
            name: "1 / (2 sqrt(2 Q C L))",
            value: recip(2.0 * (2.0 * q * c * l).sqrt()),
        },
    ])
}

/// Constant FedAvg stepsize for `C = 0`: `1 / (sqrt(Q L^2 T / n) + (42 T)^(1/3) Q L)`.
pub fn fedavg_noiseless_multiplier(l: f64, q: usize, t: usize, n: usize) -> Result<f64> {
    let p = TheoryParams::new(l, 0.0, q, t, n)?;
    let lead = (p.qf() * l * l * p.tf() / p.nf()).sqrt();
    Ok(1.0 / (lead + (42.0 * p.tf()).cbrt() * p.qf() * l))
}

/// SCAFFOLD effective stepsize `eta_tilde = eta_a * eta_s * Q` and its split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaffoldStepsize {
    pub eta_tilde: f64,
    pub eta_a: f64,
    pub eta_s: f64,
    /// Value of the closed-form expression before clamping to the cap set.
    pub formula: f64,
    /// True when the closed form exceeded a cap and `eta_tilde` was lowered to it.
    pub clipped: bool,
}

fn check_eta_s(eta_s: f64) -> Result<()> {
    if eta_s > 0.0 && eta_s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eta_s must be positive, got {eta_s}")))
    }
}

/// `sqrt(84 L (L + C)) / eta_s + (560 L C (L + C) T / (eta_s Q))^(1/3)`.
pub fn scaffold_gamma(p: &TheoryParams, eta_s: f64) -> f64 {
    let (l, c, q, t) = (p.l, p.c, p.qf(), p.tf());
    (84.0 * l * (l + c)).sqrt() / eta_s + (560.0 * l * c * (l + c) * t / (eta_s * q)).cbrt()
}

/// The four upper bounds on the SCAFFOLD effective stepsize.
pub fn scaffold_caps(p: &TheoryParams, eta_s: f64) -> Result<Vec<Cap>> {
    p.validate()?;
    check_eta_s(eta_s)?;
    let (l, c, q, t, n) = (p.l, p.c, p.qf(), p.tf(), p.nf());
    Ok(vec![
        Cap {
            name: "eta_s / sqrt(84 L (L + C))",
            value: eta_s / (84.0 * l * (l + c)).sqrt(),
        },
        Cap {
            name: "1 / (12 (L + C))",
            value: 1.0 / (12.0 * (l + c)),
        },
        Cap {
            name: "sqrt(2 n Q / ((L^2 + C^2) T))",
            value: (2.0 * n * q / ((l * l + c * c) * t)).sqrt(),
        },
        Cap {
            name: "(eta_s^2 Q / (560 L C (L + C) T))^(1/3)",
            value: recip(560.0 * l * c * (l + c) * t / (eta_s * eta_s * q)).cbrt(),
        },
    ])
}

fn split(p: &TheoryParams, eta_s: f64, formula: f64, caps: &[Cap]) -> ScaffoldStepsize {
    let cap = caps.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let eta_tilde = formula.min(cap);
    ScaffoldStepsize {
        eta_tilde,
        eta_a: eta_tilde / (eta_s * p.qf()),
        eta_s,
        formula,
        clipped: eta_tilde < formula,
    }
}

/// SCAFFOLD effective stepsize
/// `1 / (sqrt((L^2 + C^2) T / (2 n Q)) + 12 (L + C) + gamma_s)`.
///
/// For `eta_s < 1` and `C > 0` the closed form can exceed the last cap
/// (its `eta_s^2` does not match the `eta_s` inside `gamma_s`); the result is
/// then clamped to the cap set and flagged.
pub fn scaffold_stepsize(p: &TheoryParams, eta_s: f64) -> Result<ScaffoldStepsize> {
    let caps = scaffold_caps(p, eta_s)?;
    let (l, c) = (p.l, p.c);
    let lead = ((l * l + c * c) * p.tf() / (2.0 * p.nf() * p.qf())).sqrt();
    let formula = 1.0 / (lead + 12.0 * (l + c) + scaffold_gamma(p, eta_s));
    Ok(split(p, eta_s, formula, &caps))
}

/// The noiseless (`C = 0`) SCAFFOLD variant
/// `1 / (sqrt(L^2 T / (2 n Q)) + sqrt(84) L / eta_s + sqrt(70) L)`.
///
/// Its constant differs from [`scaffold_stepsize`] at `C = 0` (`sqrt(70) L`
/// instead of `12 L`), so it can exceed the `1 / (12 L)` cap. It is returned
/// as printed; `clipped` reports whether it violates the cap set.
pub fn scaffold_noiseless_variant(l: f64, q: usize, t: usize, n: usize, eta_s: f64) -> Result<ScaffoldStepsize> {
    let p = TheoryParams::new(l, 0.0, q, t, n)?;
    let caps = scaffold_caps(&p, eta_s)?;
    let lead = (l * l * p.tf() / (2.0 * p.nf() * p.qf())).sqrt();
    let formula = 1.0 / (lead + 84f64.sqrt() * l / eta_s + 70f64.sqrt() * l);
    let cap = caps.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    Ok(ScaffoldStepsize {
        eta_tilde: formula,
        eta_a: formula / (eta_s * p.qf()),
        eta_s,
        formula,
        clipped: formula > cap,
    })
}

/// `min{1/C, 1/(2 Q L sqrt 3), 1/(2 sqrt(2 Q C L))}` with `1/0 = inf`.
pub fn diminishing_cap(l: f64, c: f64, q: usize) -> Result<f64> {
    let p = TheoryParams::new(l, c, q, 1, 1)?;
    let qf = p.qf();
    Ok(recip(c)
        .min(1.0 / (2.0 * qf * l * 3f64.sqrt()))
        .min(recip(2.0 * (2.0 * qf * c * l).sqrt())))
}

/// `alpha_t = min(cap, alpha0 / (t + 1)^exponent)` with `exponent in (1/2, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diminishing {
    pub alpha0: f64,
    pub exponent: f64,
    pub cap: f64,
}

impl Diminishing {
    pub fn new(alpha0: f64, exponent: f64, cap: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha0 must be positive, got {alpha0}")));
        }
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "exponent must lie in (1/2, 1], got {exponent}"
            )));
        }
        if !(cap > 0.0) {
            return Err(Error::InvalidArgument(format!("cap must be positive, got {cap}")));
        }
        Ok(Diminishing { alpha0, exponent, cap })
    }

    pub fn at(&self, t: usize) -> f64 {
        self.cap.min(self.alpha0 / ((t + 1) as f64).powf(self.exponent))
    }
}

/// Per-round stepsize schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizePolicy {
    Constant(f64),
    Diminishing(Diminishing),
}

impl StepsizePolicy {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            StepsizePolicy::Constant(a) => *a,
            StepsizePolicy::Diminishing(d) => d.at(t),
        }
    }
}
