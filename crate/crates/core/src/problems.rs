//! The two experiment problems: the Huber/softplus mix with sign-perturbed
//! gradients, and the quadratic/Huber pair with tunable offset `d`.

use crate::error::{Error, Result};
use crate::objectives::{FederatedProblem, Objective};
use crate::oracles::{GradientOracle, Magnitude};

/// Agent 1 is a unit Huber loss at the origin with noise `+/- sqrt|x|`;
/// agents `i = 2..=n` are `ln(1 + e^{x - i + 1})` with noise `+/- sqrt(f_i(x))`.
/// Every oracle claims the ABC envelope `C = 1, D = 1`.
pub fn huber_softplus(n: usize) -> Result<FederatedProblem> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one agent".into()));
    }
    let mut oracles = Vec::with_capacity(n);
    oracles.push(
        GradientOracle::sign_perturbation(
            Objective::huber(vec![0.0])?,
            Magnitude::SqrtDistance { center: vec![0.0] },
        )?
        .with_claim(1.0, 1.0),
    );
    for i in 2..=n {
        oracles.push(
            GradientOracle::sign_perturbation(Objective::softplus_agent(i), Magnitude::SqrtValueGap)?
                .with_claim(1.0, 1.0),
        );
    }
    FederatedProblem::new(oracles, (-100.0, 100.0))
}

/// `f_1 = x^2` with noise `+/- sqrt(f_1(x)) = +/- |x|`, and a unit Huber loss
/// centred at `d` with noise `+/- sqrt|x - d|`. Claims `C = 1, D = 1`.
pub fn quadratic_huber(d: f64) -> Result<FederatedProblem> {
    if !d.is_finite() {
        return Err(Error::InvalidArgument(format!("offset d = {d} is not finite")));
    }
    let f1 = GradientOracle::sign_perturbation(
        Objective::quadratic(2.0, vec![0.0])?,
        Magnitude::SqrtValueGap,
    )?
    .with_claim(1.0, 1.0);
    let f2 = GradientOracle::sign_perturbation(
        Objective::huber(vec![d])?,
        Magnitude::SqrtDistance { center: vec![d] },
    )?
    .with_claim(1.0, 1.0);
    FederatedProblem::new(vec![f1, f2], (d.min(0.0) - 10.0, d.max(0.0) + 10.0))
}
