//! Deterministic experiment runner: repeated trials, aggregation, CSV
//! export and the two reproduction protocols.

use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::algorithms::neumaier_sum;
use crate::algorithms::{fedavg_round, scaffold_round, FedAvgState, ScaffoldState};
use crate::error::{Error, Result};
use crate::heterogeneity::{estimate_bgd, sigma_f_star};
use crate::objectives::{FederatedProblem, Objective, DEFAULT_INFIMUM_TOL};
use crate::oracles::{make_finite_sum_oracle, GradientOracle, Magnitude, SamplingStrategy};
use crate::problems;
use crate::rng::{trial_seed, NoiseStream};
use crate::stepsize::{
    diminishing_cap, fedavg_noiseless_multiplier, fedavg_stepsize, scaffold_noiseless_variant,
    scaffold_stepsize, Diminishing, StepsizePolicy, TheoryParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Scaffold,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Scaffold => "scaffold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic { curvature: f64, center: Vec<f64> },
    Huber { center: Vec<f64> },
    Softplus {
        shift: f64,
        #[serde(default = "one")]
        dimension: usize,
    },
    FiniteSum { components: Vec<ObjectiveSpec> },
    Affine {
        scale: f64,
        offset: f64,
        inner: Box<ObjectiveSpec>,
    },
}

fn one() -> usize {
    1
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Objective> {
        match self {
            ObjectiveSpec::Quadratic { curvature, center } => Objective::quadratic(*curvature, center.clone()),
            ObjectiveSpec::Huber { center } => Objective::huber(center.clone()),
            ObjectiveSpec::Softplus { shift, dimension } => Objective::softplus(*shift, *dimension),
            ObjectiveSpec::FiniteSum { components } => {
                Objective::mean(components.iter().map(|c| c.build()).collect::<Result<_>>()?)
            }
            ObjectiveSpec::Affine { scale, offset, inner } => Objective::affine(*scale, *offset, inner.build()?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "noise_kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Exact,
    SignPerturbationSqrtDistance { center: Vec<f64> },
    SignPerturbationSqrtValue,
    FiniteSumWithReplacement { batch: usize },
    FiniteSumWithoutReplacement { batch: usize },
    AdditiveGaussian { variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    #[serde(flatten)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub claimed_c: f64,
    #[serde(default)]
    pub claimed_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub objective: ObjectiveSpec,
    pub oracle: OracleSpec,
}

impl AgentSpec {
    pub fn build(&self) -> Result<GradientOracle> {
        let objective = self.objective.build()?;
        let oracle = match &self.oracle.noise {
            NoiseSpec::Exact => GradientOracle::exact(objective),
            NoiseSpec::SignPerturbationSqrtDistance { center } => GradientOracle::sign_perturbation(
                objective,
                Magnitude::SqrtDistance { center: center.clone() },
            )?,
            NoiseSpec::SignPerturbationSqrtValue => {
                GradientOracle::sign_perturbation(objective, Magnitude::SqrtValueGap)?
            }
            NoiseSpec::FiniteSumWithReplacement { batch } => {
                make_finite_sum_oracle(components(&self.objective)?, SamplingStrategy::WithReplacement(*batch))?
            }
            NoiseSpec::FiniteSumWithoutReplacement { batch } => make_finite_sum_oracle(
                components(&self.objective)?,
                SamplingStrategy::WithoutReplacement(*batch),
            )?,
            NoiseSpec::AdditiveGaussian { variance } => GradientOracle::additive_gaussian(objective, *variance)?,
        };
        Ok(oracle.with_claim(self.oracle.claimed_c, self.oracle.claimed_d))
    }
}

fn components(spec: &ObjectiveSpec) -> Result<Vec<Objective>> {
    match spec {
        ObjectiveSpec::FiniteSum { components } => components.iter().map(|c| c.build()).collect(),
        _ => Err(Error::InvalidArgument(
            "finite-sum noise needs a finite_sum objective".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Huber agent plus `n_agents - 1` shifted softplus agents.
    HuberSoftplus {
        #[serde(default = "sixteen")]
        n_agents: usize,
    },
    /// `x^2` and a unit Huber loss centred at `d`.
    QuadraticHuber { d: f64 },
    Custom {
        agents: Vec<AgentSpec>,
        bracket: (f64, f64),
    },
}

fn sixteen() -> usize {
    16
}

impl ProblemSpec {
    pub fn build(&self) -> Result<FederatedProblem> {
        match self {
            ProblemSpec::HuberSoftplus { n_agents } => problems::huber_softplus(*n_agents),
            ProblemSpec::QuadraticHuber { d } => problems::quadratic_huber(*d),
            ProblemSpec::Custom { agents, bracket } => {
                FederatedProblem::new(agents.iter().map(|a| a.build()).collect::<Result<_>>()?, *bracket)
            }
        }
    }

    /// Offset of the quadratic/Huber pair, if that is the problem.
    pub fn d(&self) -> Option<f64> {
        match self {
            ProblemSpec::QuadraticHuber { d } => Some(*d),
            _ => None,
        }
    }
}

/// Stepsize rule; for SCAFFOLD the value is the agent stepsize `eta_a`.
///
/// Theory rules take `L` as the largest agent smoothness and `C` as the
/// largest claimed ABC constant of the problem unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepsizeSpec {
    Constant { value: f64 },
    FedavgTheory {
        #[serde(default)]
        l: Option<f64>,
        #[serde(default)]
        c: Option<f64>,
    },
    FedavgNoiseless {
        #[serde(default)]
        l: Option<f64>,
    },
    ScaffoldTheory {
        #[serde(default)]
        l: Option<f64>,
        #[serde(default)]
        c: Option<f64>,
    },
    ScaffoldNoiseless {
        #[serde(default)]
        l: Option<f64>,
    },
    Diminishing {
        alpha0: f64,
        exponent: f64,
        #[serde(default)]
        l: Option<f64>,
        #[serde(default)]
        c: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlInit {
    #[default]
    Zero,
    WarmStart,
}

fn default_seed() -> u64 {
    42
}

fn default_record_every() -> usize {
    10
}

fn default_eta_s() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub algorithm: Algorithm,
    pub stepsize: StepsizeSpec,
    /// Server stepsize (SCAFFOLD only).
    #[serde(default = "default_eta_s")]
    pub eta_s: f64,
    #[serde(default)]
    pub control_init: ControlInit,
    #[serde(rename = "Q")]
    pub q: usize,
    /// Server rounds.
    #[serde(rename = "T")]
    pub t: usize,
    pub n_runs: usize,
    /// Defaults to the origin.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Replace every oracle by the exact gradient.
    #[serde(default)]
    pub exact_oracles: bool,
}

impl RunConfig {
    pub fn new(problem: ProblemSpec, algorithm: Algorithm, stepsize: StepsizeSpec, q: usize, t: usize, n_runs: usize) -> Self {
        RunConfig {
            problem,
            algorithm,
            stepsize,
            eta_s: 1.0,
            control_init: ControlInit::Zero,
            q,
            t,
            n_runs,
            x0: None,
            base_seed: 42,
            record_every: 10,
            exact_oracles: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.t == 0 || self.n_runs == 0 || self.record_every == 0 {
            return Err(Error::InvalidArgument(
                "Q, T, n_runs and record_every must all be >= 1".into(),
            ));
        }
        if !(self.eta_s > 0.0 && self.eta_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta_s must be positive, got {}", self.eta_s)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// One recorded round of a trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub gap: f64,
    pub grad_norm_sq: f64,
    pub running_min_grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub trial: usize,
    pub seed: u64,
    pub points: Vec<TrajectoryPoint>,
    /// Round at which the iterate diverged, if it did.
    pub diverged_at: Option<usize>,
}

impl TrajectoryRecord {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_gap(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.gap)
    }

    /// Point recorded at round `t`.
    pub fn at(&self, t: usize) -> Option<&TrajectoryPoint> {
        self.points.iter().find(|p| p.t == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatePoint {
    pub t: usize,
    pub mean_gap: f64,
    pub se_gap: f64,
    pub mean_grad_norm_sq: f64,
    pub n_effective: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub points: Vec<AggregatePoint>,
    pub n_diverged: usize,
}

impl Aggregate {
    pub fn final_mean_gap(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.mean_gap)
    }
}

/// Per-round mean and standard error over the non-diverged records.
pub fn aggregate(records: &[TrajectoryRecord]) -> Result<Aggregate> {
    let kept: Vec<&TrajectoryRecord> = records.iter().filter(|r| !r.diverged()).collect();
    let n_diverged = records.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::AllTrialsDiverged(records.len()));
    }
    let n = kept.len();
    let nf = n as f64;
    let points = (0..kept[0].points.len())
        .map(|k| {
            let t = kept[0].points[k].t;
            let gaps: Vec<f64> = kept.iter().map(|r| r.points[k].gap).collect();
            let mean_gap = neumaier_sum(gaps.iter().copied()) / nf;
            let se_gap = if n > 1 {
                let ss = neumaier_sum(gaps.iter().map(|g| (g - mean_gap) * (g - mean_gap)));
                (ss / (nf - 1.0) / nf).sqrt()
            } else {
                0.0
            };
            let mean_grad_norm_sq = neumaier_sum(kept.iter().map(|r| r.points[k].grad_norm_sq)) / nf;
            AggregatePoint {
                t,
                mean_gap,
                se_gap,
                mean_grad_norm_sq,
                n_effective: n,
            }
        })
        .collect();
    Ok(Aggregate { points, n_diverged })
}

enum State {
    Fedavg(FedAvgState),
    Scaffold(ScaffoldState),
}

/// A validated config with its problem and stepsize schedule resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: RunConfig,
    problem: FederatedProblem,
    policy: StepsizePolicy,
    x0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<TrajectoryRecord>,
    pub aggregate: Aggregate,
}

fn resolve_policy(config: &RunConfig, problem: &FederatedProblem) -> Result<StepsizePolicy> {
    let l_of = |l: &Option<f64>| l.unwrap_or(problem.l_max());
    let c_of = |c: &Option<f64>| {
        c.unwrap_or_else(|| {
            problem
                .oracles()
                .iter()
                .filter_map(|o| o.claim().map(|cl| cl.c))
                .fold(0.0, f64::max)
        })
    };
    let (q, t, n) = (config.q, config.t, problem.n());
    let policy = match &config.stepsize {
        StepsizeSpec::Constant { value } => {
            if !(*value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidArgument(format!("stepsize must be >= 0, got {value}")));
            }
            StepsizePolicy::Constant(*value)
        }
        StepsizeSpec::FedavgTheory { l, c } => {
            StepsizePolicy::Constant(fedavg_stepsize(&TheoryParams::new(l_of(l), c_of(c), q, t, n)?)?)
        }
        StepsizeSpec::FedavgNoiseless { l } => StepsizePolicy::Constant(fedavg_noiseless_multiplier(l_of(l), q, t, n)?),
        StepsizeSpec::ScaffoldTheory { l, c } => StepsizePolicy::Constant(
            scaffold_stepsize(&TheoryParams::new(l_of(l), c_of(c), q, t, n)?, config.eta_s)?.eta_a,
        ),
        StepsizeSpec::ScaffoldNoiseless { l } => {
            StepsizePolicy::Constant(scaffold_noiseless_variant(l_of(l), q, t, n, config.eta_s)?.eta_a)
        }
        StepsizeSpec::Diminishing { alpha0, exponent, l, c } => {
            let cap = diminishing_cap(l_of(l), c_of(c), q)?;
            StepsizePolicy::Diminishing(Diminishing::new(*alpha0, *exponent, cap)?)
        }
    };
    if config.algorithm == Algorithm::Scaffold {
        if let StepsizePolicy::Constant(v) = policy {
            if v <= 0.0 {
                return Err(Error::InvalidArgument("SCAFFOLD needs a positive agent stepsize".into()));
            }
        }
    }
    Ok(policy)
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut problem = config.problem.build()?;
        if config.exact_oracles {
            problem = problem.with_exact_oracles();
        }
        let x0 = config.x0.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
        if x0.len() != problem.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                got: x0.len(),
            });
        }
        let policy = resolve_policy(&config, &problem)?;
        Ok(Experiment {
            config,
            problem,
            policy,
            x0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn problem(&self) -> &FederatedProblem {
        &self.problem
    }

    pub fn policy(&self) -> &StepsizePolicy {
        &self.policy
    }

    /// Value written to the `stepsize` column: the constant, or `alpha0`.
    pub fn stepsize_label(&self) -> f64 {
        match self.policy {
            StepsizePolicy::Constant(a) => a,
            StepsizePolicy::Diminishing(d) => d.alpha0,
        }
    }

    fn metrics(&self, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        let avg = self.problem.average();
        avg.gradient_into(x, grad);
        let g2 = grad.iter().map(|g| g * g).sum();
        (avg.value_unchecked(x) - self.problem.f_star(), g2)
    }

    /// Runs trial `trial`; the result depends only on the config and `trial`.
    pub fn run_trial(&self, trial: usize) -> Result<TrajectoryRecord> {
        let cfg = &self.config;
        let seed = trial_seed(cfg.base_seed, trial as u64);
        let stream = NoiseStream::new(seed);
        let mut state = match cfg.algorithm {
            Algorithm::Fedavg => State::Fedavg(FedAvgState::new(self.x0.clone())),
            Algorithm::Scaffold => State::Scaffold(match cfg.control_init {
                ControlInit::Zero => ScaffoldState::new(self.x0.clone(), self.problem.n()),
                ControlInit::WarmStart => ScaffoldState::warm_start(self.x0.clone(), &self.problem, &stream)?,
            }),
        };
        let mut grad = vec![0.0; self.x0.len()];
        let (gap, g2) = self.metrics(&self.x0, &mut grad);
        let mut running_min = g2;
        let mut points = Vec::with_capacity(cfg.t / cfg.record_every + 2);
        points.push(TrajectoryPoint {
            t: 0,
            gap,
            grad_norm_sq: g2,
            running_min_grad_norm_sq: running_min,
        });
        let mut diverged_at = None;
        for t in 0..cfg.t {
            let step = self.policy.at(t);
            let next = match &state {
                State::Fedavg(s) => fedavg_round(s, &self.problem, step, cfg.q, &stream).map(State::Fedavg),
                State::Scaffold(s) => {
                    scaffold_round(s, &self.problem, step, cfg.eta_s, cfg.q, &stream).map(State::Scaffold)
                }
            };
            state = match next {
                Ok(s) => s,
                Err(Error::Diverged { round }) => {
                    diverged_at = Some(round);
                    break;
                }
                Err(e) => return Err(e),
            };
            let x = match &state {
                State::Fedavg(s) => &s.x,
                State::Scaffold(s) => &s.x,
            };
            let (gap, g2) = self.metrics(x, &mut grad);
            running_min = running_min.min(g2);
            let done = t + 1;
            if done % cfg.record_every == 0 || done == cfg.t {
                points.push(TrajectoryPoint {
                    t: done,
                    gap,
                    grad_norm_sq: g2,
                    running_min_grad_norm_sq: running_min,
                });
            }
        }
        Ok(TrajectoryRecord {
            trial,
            seed,
            points,
            diverged_at,
        })
    }

    /// Runs trials `trials` in parallel on the current rayon pool; results
    /// are ordered as given.
    pub fn run_trials(&self, trials: &[usize]) -> Result<Vec<TrajectoryRecord>> {
        trials.par_iter().map(|&i| self.run_trial(i)).collect()
    }

    pub fn run(&self) -> Result<ExperimentResult> {
        let trials: Vec<usize> = (0..self.config.n_runs).collect();
        let records = self.run_trials(&trials)?;
        let aggregate = aggregate(&records)?;
        Ok(ExperimentResult { records, aggregate })
    }

    pub fn trajectory_rows(&self, records: &[TrajectoryRecord]) -> Vec<TrajectoryRow> {
        let cfg = &self.config;
        records
            .iter()
            .flat_map(|r| {
                r.points.iter().map(move |p| TrajectoryRow {
                    algorithm: cfg.algorithm.to_string(),
                    d: cfg.problem.d(),
                    stepsize: self.stepsize_label(),
                    q: cfg.q,
                    t_total: cfg.t,
                    seed: r.seed,
                    t: p.t,
                    gap: p.gap,
                    grad_norm_sq: p.grad_norm_sq,
                    running_min_grad_norm_sq: p.running_min_grad_norm_sq,
                })
            })
            .collect()
    }

    pub fn aggregate_rows(&self, agg: &Aggregate) -> Vec<AggregateRow> {
        let cfg = &self.config;
        agg.points
            .iter()
            .map(|p| AggregateRow {
                algorithm: cfg.algorithm.to_string(),
                d: cfg.problem.d(),
                stepsize: self.stepsize_label(),
                q: cfg.q,
                t_total: cfg.t,
                t: p.t,
                mean_gap: p.mean_gap,
                se_gap: p.se_gap,
                mean_grad_norm_sq: p.mean_grad_norm_sq,
                n_effective: p.n_effective,
            })
            .collect()
    }
}

pub fn run_trial(config: &RunConfig, trial: usize) -> Result<TrajectoryRecord> {
    Experiment::new(config.clone())?.run_trial(trial)
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult> {
    Experiment::new(config.clone())?.run()
}

pub const TRAJECTORY_HEADER: [&str; 10] = [
    "algorithm",
    "d",
    "stepsize",
    "Q",
    "T",
    "seed",
    "t",
    "gap",
    "grad_norm_sq",
    "running_min_grad_norm_sq",
];

pub const AGGREGATE_HEADER: [&str; 10] = [
    "algorithm",
    "d",
    "stepsize",
    "Q",
    "T",
    "t",
    "mean_gap",
    "se_gap",
    "mean_grad_norm_sq",
    "n_effective",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub algorithm: String,
    pub d: Option<f64>,
    pub stepsize: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "T")]
    pub t_total: usize,
    pub seed: u64,
    pub t: usize,
    pub gap: f64,
    pub grad_norm_sq: f64,
    pub running_min_grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub algorithm: String,
    pub d: Option<f64>,
    pub stepsize: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "T")]
    pub t_total: usize,
    pub t: usize,
    pub mean_gap: f64,
    pub se_gap: f64,
    pub mean_grad_norm_sq: f64,
    pub n_effective: usize,
}

fn write_rows<W: Write, R: Serialize>(writer: W, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(reader: R, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    let found: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Io(format!("unexpected CSV header {found:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes trajectory rows under the exact trajectory header; floats use the
/// shortest representation that reads back to the same value.
pub fn write_trajectories<W: Write>(writer: W, rows: &[TrajectoryRow]) -> Result<()> {
    write_rows(writer, &TRAJECTORY_HEADER, rows)
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajectoryRow>> {
    read_rows(reader, &TRAJECTORY_HEADER)
}

pub fn write_aggregates<W: Write>(writer: W, rows: &[AggregateRow]) -> Result<()> {
    write_rows(writer, &AGGREGATE_HEADER, rows)
}

pub fn read_aggregates<R: Read>(reader: R) -> Result<Vec<AggregateRow>> {
    read_rows(reader, &AGGREGATE_HEADER)
}

/// Writes trajectory rows to `path`.
pub fn export_csv(rows: &[TrajectoryRow], path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trajectories(std::io::BufWriter::new(file), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Options {
    pub d_values: Vec<f64>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub alpha: f64,
    pub n_runs: usize,
    pub x0: f64,
    pub base_seed: u64,
    /// BGD grid resolution on [-1000, 1000].
    pub bgd_grid: usize,
}

impl Default for Table2Options {
    fn default() -> Self {
        Table2Options {
            d_values: vec![-100.0, -50.0, -20.0, -2.0],
            t: 4000,
            q: 17,
            alpha: 0.00046,
            n_runs: 100,
            x0: 0.0,
            base_seed: 42,
            bgd_grid: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub d: f64,
    pub zeta2_plus_psi2: f64,
    pub sigma_f_star: f64,
    pub fedavg_gap: f64,
    pub scaffold_gap: f64,
}

/// Heterogeneity measures and mean final gaps of FedAvg and SCAFFOLD
/// (agent stepsize `alpha`, server stepsize 1) on the quadratic/Huber pair.
pub fn reproduce_table2(opts: &Table2Options) -> Result<Vec<Table2Row>> {
    opts.d_values
        .iter()
        .map(|&d| {
            let spec = ProblemSpec::QuadraticHuber { d };
            let problem = spec.build()?;
            let sigma = sigma_f_star(&problem, DEFAULT_INFIMUM_TOL)?;
            let bgd = estimate_bgd(&problem, (-1000.0, 1000.0), opts.bgd_grid)?;
            let mut gaps = [0.0; 2];
            for (slot, alg) in [Algorithm::Fedavg, Algorithm::Scaffold].into_iter().enumerate() {
                let mut cfg = RunConfig::new(
                    spec.clone(),
                    alg,
                    StepsizeSpec::Constant { value: opts.alpha },
                    opts.q,
                    opts.t,
                    opts.n_runs,
                );
                cfg.x0 = Some(vec![opts.x0]);
                cfg.base_seed = opts.base_seed;
                cfg.record_every = opts.t;
                let result = Experiment::new(cfg)?.run()?;
                if result.aggregate.n_diverged > 0 {
                    return Err(Error::CheckFailed(format!(
                        "{} of {} {alg} trials diverged at d = {d}",
                        result.aggregate.n_diverged, opts.n_runs
                    )));
                }
                gaps[slot] = result.aggregate.final_mean_gap();
            }
            Ok(Table2Row {
                d,
                zeta2_plus_psi2: bgd.sum(),
                sigma_f_star: sigma,
                fedavg_gap: gaps[0],
                scaffold_gap: gaps[1],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Options {
    pub stepsizes: Vec<f64>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub n_runs: usize,
    pub n_agents: usize,
    pub x0: f64,
    pub base_seed: u64,
    pub record_every: usize,
    pub exact_oracles: bool,
}

impl Default for Fig1Options {
    fn default() -> Self {
        Fig1Options {
            stepsizes: vec![0.0005, 0.001, 0.002, 0.004],
            t: 2000,
            q: 17,
            n_runs: 100,
            n_agents: 16,
            x0: 10.0,
            base_seed: 42,
            record_every: 10,
            exact_oracles: false,
        }
    }
}

/// Mean gap curves of both algorithms for every stepsize.
#[derive(Debug, Clone)]
pub struct Curve {
    pub algorithm: Algorithm,
    pub stepsize: f64,
    pub rows: Vec<AggregateRow>,
    pub aggregate: Aggregate,
}

/// Runs FedAvg and SCAFFOLD (server stepsize 1) on the Huber/softplus
/// problem for every stepsize.
pub fn reproduce_fig1(opts: &Fig1Options) -> Result<Vec<Curve>> {
    let mut curves = Vec::new();
    for &alpha in &opts.stepsizes {
        for alg in [Algorithm::Fedavg, Algorithm::Scaffold] {
            let mut cfg = RunConfig::new(
                ProblemSpec::HuberSoftplus {
                    n_agents: opts.n_agents,
                },
                alg,
                StepsizeSpec::Constant { value: alpha },
                opts.q,
                opts.t,
                opts.n_runs,
            );
            cfg.x0 = Some(vec![opts.x0]);
            cfg.base_seed = opts.base_seed;
            cfg.record_every = opts.record_every;
            cfg.exact_oracles = opts.exact_oracles;
            let exp = Experiment::new(cfg)?;
            let result = exp.run()?;
            curves.push(Curve {
                algorithm: alg,
                stepsize: alpha,
                rows: exp.aggregate_rows(&result.aggregate),
                aggregate: result.aggregate,
            });
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_config(alpha: f64, t: usize) -> RunConfig {
        let agent = AgentSpec {
            objective: ObjectiveSpec::Quadratic {
                curvature: 1.0,
                center: vec![0.0],
            },
            oracle: OracleSpec {
                noise: NoiseSpec::Exact,
                claimed_c: 0.0,
                claimed_d: 0.0,
            },
        };
        let mut cfg = RunConfig::new(
            ProblemSpec::Custom {
                agents: vec![agent],
                bracket: (-10.0, 10.0),
            },
            Algorithm::Fedavg,
            StepsizeSpec::Constant { value: alpha },
            1,
            t,
            1,
        );
        cfg.x0 = Some(vec![1.0]);
        cfg.record_every = 1;
        cfg
    }

    #[test]
    fn gd_contraction_example() {
        let r = run_trial(&quadratic_config(0.1, 10), 0).unwrap();
        let expect = 0.9f64.powi(10).powi(2) / 2.0;
        assert!((r.final_gap() - expect).abs() < 1e-12, "{}", r.final_gap());
        assert_eq!(r.points.len(), 11);
    }

    #[test]
    fn zero_stepsize_keeps_the_start() {
        let r = run_trial(&quadratic_config(0.0, 5), 0).unwrap();
        assert!(r.points.iter().all(|p| p.gap == 0.5));
    }

    #[test]
    fn running_min_is_monotone_and_tracks_every_round() {
        let mut cfg = RunConfig::new(
            ProblemSpec::HuberSoftplus { n_agents: 16 },
            Algorithm::Fedavg,
            StepsizeSpec::Constant { value: 0.05 },
            3,
            200,
            1,
        );
        cfg.record_every = 7;
        let r = run_trial(&cfg, 3).unwrap();
        let ts: Vec<usize> = r.points.iter().map(|p| p.t).collect();
        assert_eq!(ts.first(), Some(&0));
        assert_eq!(ts.last(), Some(&200));
        assert!(ts.windows(2).all(|w| w[1] == w[0] + 7 || w[1] == 200));
        for w in r.points.windows(2) {
            assert!(w[1].running_min_grad_norm_sq <= w[0].running_min_grad_norm_sq);
            assert!(w[1].running_min_grad_norm_sq <= w[1].grad_norm_sq);
        }
        cfg.record_every = 1;
        let dense = run_trial(&cfg, 3).unwrap();
        for p in &r.points {
            let min = dense.points.iter().filter(|q| q.t <= p.t).map(|q| q.grad_norm_sq).fold(f64::INFINITY, f64::min);
            assert_eq!(p.running_min_grad_norm_sq, min);
        }
    }

    #[test]
    fn single_run_aggregate_equals_trial() {
        let mut cfg = quadratic_config(0.1, 20);
        cfg.problem = ProblemSpec::QuadraticHuber { d: -2.0 };
        cfg.q = 3;
        let exp = Experiment::new(cfg).unwrap();
        let res = exp.run().unwrap();
        let trial = exp.run_trial(0).unwrap();
        assert_eq!(res.records[0], trial);
        for (a, p) in res.aggregate.points.iter().zip(&trial.points) {
            assert_eq!(a.mean_gap, p.gap);
            assert_eq!(a.se_gap, 0.0);
            assert_eq!(a.n_effective, 1);
        }
    }

    #[test]
    fn exact_oracles_give_identical_trials() {
        let mut cfg = RunConfig::new(
            ProblemSpec::QuadraticHuber { d: -20.0 },
            Algorithm::Scaffold,
            StepsizeSpec::Constant { value: 0.01 },
            4,
            30,
            5,
        );
        cfg.exact_oracles = true;
        let res = run_experiment(&cfg).unwrap();
        assert!(res.aggregate.points.iter().all(|p| p.se_gap == 0.0));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut cfg = RunConfig::new(
            ProblemSpec::HuberSoftplus { n_agents: 16 },
            Algorithm::Fedavg,
            StepsizeSpec::Constant { value: 0.01 },
            17,
            50,
            100,
        );
        cfg.record_every = 25;
        let exp = Experiment::new(cfg).unwrap();
        let forward: Vec<usize> = (0..100).collect();
        let mut shuffled = forward.clone();
        shuffled.reverse();
        shuffled.swap(3, 71);
        let a = aggregate(&exp.run_trials(&forward).unwrap()).unwrap();
        let b = aggregate(&exp.run_trials(&shuffled).unwrap()).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p.mean_gap - q.mean_gap).abs() <= 1e-12 * (1.0 + p.mean_gap.abs()));
            assert!((p.mean_grad_norm_sq - q.mean_grad_norm_sq).abs() <= 1e-12 * (1.0 + p.mean_grad_norm_sq));
        }
    }

    #[test]
    fn diverged_trials_are_excluded() {
        let mut cfg = quadratic_config(5.0, 100);
        cfg.n_runs = 3;
        let exp = Experiment::new(cfg).unwrap();
        let res = exp.run_trial(0).unwrap();
        assert!(res.diverged());
        assert!(matches!(exp.run(), Err(Error::AllTrialsDiverged(3))));
        let fine = TrajectoryRecord {
            diverged_at: None,
            ..res.clone()
        };
        let agg = aggregate(&[res, fine.clone()]).unwrap();
        assert_eq!(agg.n_diverged, 1);
        assert_eq!(agg.points[0].n_effective, 1);
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(v), 2.0);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = quadratic_config(0.1, 10);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        b.base_seed = 43;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn config_rejects_invalid_values() {
        let mut cfg = quadratic_config(0.1, 10);
        cfg.t = 0;
        assert!(Experiment::new(cfg).is_err());
        let mut cfg = quadratic_config(0.1, 10);
        cfg.x0 = Some(vec![0.0, 1.0]);
        assert!(Experiment::new(cfg).is_err());
        let mut cfg = quadratic_config(0.0, 10);
        cfg.algorithm = Algorithm::Scaffold;
        assert!(Experiment::new(cfg).is_err());
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let text = r#"{
            "problem": {"kind": "quadratic_huber", "d": -2.0},
            "algorithm": "scaffold",
            "stepsize": {"kind": "constant", "value": 0.00046},
            "Q": 17, "T": 10, "n_runs": 2
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.base_seed, 42);
        assert_eq!(cfg.record_every, 10);
        assert_eq!(cfg.eta_s, 1.0);
        assert_eq!(cfg.x0, None);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(&text.replace("\"Q\"", "\"q_steps\"")).is_err());
    }

    #[test]
    fn custom_agents_build() {
        let text = r#"{"kind": "custom", "bracket": [-10, 10], "agents": [
            {"objective": {"kind": "finite_sum", "components": [
                {"kind": "quadratic", "curvature": 1.0, "center": [0.0]},
                {"kind": "quadratic", "curvature": 1.0, "center": [2.0]}]},
             "oracle": {"noise_kind": "finite_sum_without_replacement", "batch": 1, "claimed_c": 0, "claimed_d": 1}},
            {"objective": {"kind": "softplus", "shift": 1.0},
             "oracle": {"noise_kind": "sign_perturbation_sqrt_value", "claimed_c": 1, "claimed_d": 1}}
        ]}"#;
        let spec: ProblemSpec = serde_json::from_str(text).unwrap();
        let p = spec.build().unwrap();
        assert_eq!(p.n(), 2);
        assert!(p.oracles().iter().all(|o| o.has_finite_support()));
    }

    #[test]
    fn theory_stepsizes_resolve_from_problem_constants() {
        let cfg = RunConfig::new(
            ProblemSpec::HuberSoftplus { n_agents: 16 },
            Algorithm::Fedavg,
            StepsizeSpec::FedavgTheory { l: None, c: None },
            17,
            100,
            1,
        );
        let exp = Experiment::new(cfg).unwrap();
        let expect = fedavg_stepsize(&TheoryParams::new(1.0, 1.0, 17, 100, 16).unwrap()).unwrap();
        assert_eq!(*exp.policy(), StepsizePolicy::Constant(expect));

        let mut cfg = exp.config().clone();
        cfg.stepsize = StepsizeSpec::Diminishing {
            alpha0: 1.0,
            exponent: 0.6,
            l: None,
            c: None,
        };
        let exp = Experiment::new(cfg).unwrap();
        let cap = diminishing_cap(1.0, 1.0, 17).unwrap();
        assert_eq!(exp.policy().at(0), cap);
        assert_eq!(exp.stepsize_label(), 1.0);
    }

    #[test]
    fn csv_round_trips() {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), TRAJECTORY_HEADER.join(",") + "\n");
        assert!(read_trajectories(buf.as_slice()).unwrap().is_empty());

        let rows: Vec<TrajectoryRow> = (0..10_000)
            .map(|k| TrajectoryRow {
                algorithm: if k % 2 == 0 { "fedavg".into() } else { "scaffold".into() },
                d: if k % 3 == 0 { None } else { Some(-(k as f64) / 7.0) },
                stepsize: 0.00046 * (k as f64 + 1.0).sqrt(),
                q: 17,
                t_total: 4000,
                seed: u64::MAX - k as u64,
                t: k,
                gap: (k as f64).exp2().recip() * std::f64::consts::PI,
                grad_norm_sq: 1.0 / 3.0 + k as f64,
                running_min_grad_norm_sq: f64::MIN_POSITIVE * k as f64,
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &rows[..1]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        buf.clear();
        write_trajectories(&mut buf, &rows).unwrap();
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), rows);

        let agg = vec![AggregateRow {
            algorithm: "fedavg".into(),
            d: Some(-2.0),
            stepsize: 0.1,
            q: 1,
            t_total: 1,
            t: 1,
            mean_gap: 0.1 + 0.2,
            se_gap: 0.0,
            mean_grad_norm_sq: 1e-300,
            n_effective: 3,
        }];
        let mut buf = Vec::new();
        write_aggregates(&mut buf, &agg).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with(&AGGREGATE_HEADER.join(",")));
        assert_eq!(read_aggregates(buf.as_slice()).unwrap(), agg);
        assert!(read_trajectories(buf.as_slice()).is_err());
    }

    #[test]
    fn table2_smoke() {
        let opts = Table2Options {
            d_values: vec![-2.0, -20.0],
            t: 50,
            n_runs: 2,
            bgd_grid: 2000,
            ..Table2Options::default()
        };
        let rows = reproduce_table2(&opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].sigma_f_star - 0.625).abs() < 1e-9);
        assert!((rows[1].sigma_f_star - 9.625).abs() < 1e-9);
        assert!(rows.iter().all(|r| r.fedavg_gap > 0.0 && r.scaffold_gap > 0.0));
    }

    #[test]
    fn fig1_smoke() {
        let opts = Fig1Options {
            stepsizes: vec![0.001, 0.004],
            t: 20,
            n_runs: 2,
            ..Fig1Options::default()
        };
        let curves = reproduce_fig1(&opts).unwrap();
        assert_eq!(curves.len(), 4);
        assert!(curves.iter().all(|c| c.rows.len() == 3 && c.rows[0].d.is_none()));
    }
}
