//! FedAvg and SCAFFOLD communication rounds.
//!
//! Local step `l` of agent `i` in round `t` draws its noise from
//! `stream.round(t).agent(i).step(l)`, so results do not depend on the order
//! agents are processed in.

use crate::error::{Error, Result};
use crate::objectives::{norm_sq, FederatedProblem};
use crate::rng::NoiseStream;

/// Iterates beyond this norm are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl FedAvgState {
    pub fn new(x0: Vec<f64>) -> Self {
        Self { x: x0, t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub x: Vec<f64>,
    /// Server control variate.
    pub c: Vec<f64>,
    /// Agent control variates.
    pub c_agents: Vec<Vec<f64>>,
    pub t: usize,
}

impl ScaffoldState {
    /// Zero control variates for `n` agents.
    pub fn new(x0: Vec<f64>, n: usize) -> Self {
        let p = x0.len();
        Self {
            x: x0,
            c: vec![0.0; p],
            c_agents: vec![vec![0.0; p]; n],
            t: 0,
        }
    }

    /// Given agent control variates; the server variate starts at their mean.
    pub fn with_controls(x0: Vec<f64>, c_agents: Vec<Vec<f64>>) -> Result<Self> {
        if c_agents.is_empty() {
            return Err(Error::InvalidArgument("need at least one agent".into()));
        }
        for c in &c_agents {
            check_dim(x0.len(), c)?;
        }
        let c = compensated_mean(c_agents.iter().map(Vec::as_slice), x0.len());
        Ok(Self {
            x: x0,
            c,
            c_agents,
            t: 0,
        })
    }

    /// Agent control variates set to one stochastic gradient at `x0`, drawn
    /// from `stream.round(u64::MAX)` so they never collide with round noise.
    pub fn warm_start(x0: Vec<f64>, problem: &FederatedProblem, stream: &NoiseStream) -> Result<Self> {
        let s = stream.round(u64::MAX);
        let c_agents = problem
            .oracles()
            .iter()
            .enumerate()
            .map(|(i, o)| o.sample_gradient(&x0, &s.agent(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_controls(x0, c_agents)
    }
}

/// Per-agent sums of the stochastic gradients drawn during one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub gradient_sums: Vec<Vec<f64>>,
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        })
    }
}

/// `mean += (value - mean) / k`, exact when every value is equal.
#[inline]
/// Compensated (Neumaier) sum.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Coordinatewise compensated mean of equal-length vectors.
fn compensated_mean<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, p: usize) -> Vec<f64> {
    let n = rows.clone().count() as f64;
    (0..p)
        .map(|k| neumaier_sum(rows.clone().map(|r| r[k])) / n)
        .collect()
}

fn running_mean_update(mean: &mut [f64], value: &[f64], k: usize) {
    let k = k as f64;
    for (m, v) in mean.iter_mut().zip(value) {
        *m += (v - *m) / k;
    }
}

fn check_divergence(x: &[f64], round: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) || norm_sq(x) > DIVERGENCE_NORM * DIVERGENCE_NORM {
        Err(Error::Diverged { round })
    } else {
        Ok(())
    }
}

fn check_round_args(problem: &FederatedProblem, x: &[f64], q: usize, steps: &[(&str, f64)]) -> Result<()> {
    check_dim(problem.dim(), x)?;
    if q == 0 {
        return Err(Error::InvalidArgument("Q must be >= 1".into()));
    }
    for (name, v) in steps {
        if !(*v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(())
}

/// One FedAvg round with stepsize `alpha`: `Q` local steps per agent from
/// the server point, then the server takes the average.
pub fn fedavg_round(
    state: &FedAvgState,
    problem: &FederatedProblem,
    alpha: f64,
    q: usize,
    stream: &NoiseStream,
) -> Result<FedAvgState> {
    fedavg_round_inner(state, problem, alpha, q, stream, None)
}

/// [`fedavg_round`] that also returns the gradients it drew.
pub fn fedavg_round_traced(
    state: &FedAvgState,
    problem: &FederatedProblem,
    alpha: f64,
    q: usize,
    stream: &NoiseStream,
) -> Result<(FedAvgState, RoundTrace)> {
    let mut sums = Vec::new();
    let next = fedavg_round_inner(state, problem, alpha, q, stream, Some(&mut sums))?;
    Ok((next, RoundTrace { gradient_sums: sums }))
}

fn fedavg_round_inner(
    state: &FedAvgState,
    problem: &FederatedProblem,
    alpha: f64,
    q: usize,
    stream: &NoiseStream,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<FedAvgState> {
    check_round_args(problem, &state.x, q, &[("alpha", alpha)])?;
    let p = state.x.len();
    let round = stream.round(state.t as u64);
    let mut mean = vec![0.0; p];
    let mut local = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut gsum = vec![0.0; p];
    for (i, oracle) in problem.oracles().iter().enumerate() {
        local.copy_from_slice(&state.x);
        gsum.iter_mut().for_each(|v| *v = 0.0);
        let agent = round.agent(i as u64);
        for l in 0..q {
            oracle.sample_into(&local, &mut agent.step(l as u64).rng(), &mut g);
            for k in 0..p {
                local[k] -= alpha * g[k];
                gsum[k] += g[k];
            }
        }
        running_mean_update(&mut mean, &local, i + 1);
        if let Some(t) = trace.as_deref_mut() {
            t.push(gsum.clone());
        }
    }
    check_divergence(&mean, state.t)?;
    Ok(FedAvgState {
        x: mean,
        t: state.t + 1,
    })
}

/// One SCAFFOLD round with agent stepsize `eta_a` and server stepsize `eta_s`.
///
/// Local steps follow `y <- y - eta_a (g - c_i + c)`; afterwards
/// `c_i <- c_i - c + (x - y_i) / (eta_a Q)`, `x <- x + (eta_s/n) sum (y_i - x)`
/// and `c <- c + (1/n) sum (c_i_new - c_i)`.
///
/// The control update is evaluated in its reduced form: substituting the
/// local steps gives `c_i_new = (1/Q) sum_l g_i^l` exactly, and the server
/// variate becomes the mean of the new agent variates plus whatever offset
/// `c - mean(c_i)` the state carried in. Subtracting nearly equal iterates
/// would otherwise cost several digits near a stationary point.
pub fn scaffold_round(
    state: &ScaffoldState,
    problem: &FederatedProblem,
    eta_a: f64,
    eta_s: f64,
    q: usize,
    stream: &NoiseStream,
) -> Result<ScaffoldState> {
    scaffold_round_inner(state, problem, eta_a, eta_s, q, stream, None)
}

/// [`scaffold_round`] that also returns the gradients it drew.
pub fn scaffold_round_traced(
    state: &ScaffoldState,
    problem: &FederatedProblem,
    eta_a: f64,
    eta_s: f64,
    q: usize,
    stream: &NoiseStream,
) -> Result<(ScaffoldState, RoundTrace)> {
    let mut sums = Vec::new();
    let next = scaffold_round_inner(state, problem, eta_a, eta_s, q, stream, Some(&mut sums))?;
    Ok((next, RoundTrace { gradient_sums: sums }))
}

fn scaffold_round_inner(
    state: &ScaffoldState,
    problem: &FederatedProblem,
    eta_a: f64,
    eta_s: f64,
    q: usize,
    stream: &NoiseStream,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<ScaffoldState> {
    check_round_args(problem, &state.x, q, &[("eta_s", eta_s)])?;
    if !(eta_a > 0.0 && eta_a.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta_a must be positive, got {eta_a}")));
    }
    if state.c_agents.len() != problem.n() {
        return Err(Error::InvalidArgument(format!(
            "{} agent control variates for {} agents",
            state.c_agents.len(),
            problem.n()
        )));
    }
    let p = state.x.len();
    let round = stream.round(state.t as u64);
    let qf = q as f64;
    let mut mean_move = vec![0.0; p];
    let mut c_agents = Vec::with_capacity(problem.n());
    let mut local = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut gsum = vec![0.0; p];
    // sum of local directions; the displacement is -eta_a * dsum
    let mut dsum = vec![0.0; p];
    for (i, oracle) in problem.oracles().iter().enumerate() {
        let ci = &state.c_agents[i];
        local.copy_from_slice(&state.x);
        gsum.iter_mut().for_each(|v| *v = 0.0);
        dsum.iter_mut().for_each(|v| *v = 0.0);
        let agent = round.agent(i as u64);
        for l in 0..q {
            oracle.sample_into(&local, &mut agent.step(l as u64).rng(), &mut g);
            for k in 0..p {
                let dir = g[k] - ci[k] + state.c[k];
                local[k] -= eta_a * dir;
                dsum[k] += dir;
                gsum[k] += g[k];
            }
        }
        let ci_new: Vec<f64> = gsum.iter().map(|v| v / qf).collect();
        dsum.iter_mut().for_each(|v| *v *= -eta_a);
        running_mean_update(&mut mean_move, &dsum, i + 1);
        c_agents.push(ci_new);
        if let Some(t) = trace.as_deref_mut() {
            t.push(gsum.clone());
        }
    }
    let x: Vec<f64> = (0..p).map(|k| state.x[k] + eta_s * mean_move[k]).collect();
    let mean_c_old = compensated_mean(state.c_agents.iter().map(Vec::as_slice), p);
    let mean_c_new = compensated_mean(c_agents.iter().map(Vec::as_slice), p);
    let c: Vec<f64> = (0..p)
        .map(|k| mean_c_new[k] + (state.c[k] - mean_c_old[k]))
        .collect();
    check_divergence(&x, state.t)?;
    Ok(ScaffoldState {
        x,
        c,
        c_agents,
        t: state.t + 1,
    })
}
