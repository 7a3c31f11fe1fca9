//! Monte Carlo execution of the closed loop: plant, linear sensor, Kalman
//! filter and certainty-equivalence controller.
//!
//! Every trial draws its noise from ChaCha8 streams keyed by
//! `(master_seed, trial, channel)`, and trials are reduced in fixed-size
//! chunks combined in index order, so reports are bit-identical for any
//! thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::sqrt_psd;
use crate::model::{information_rates, ProblemSpec, SensorPolicy, SimulationReport, Trajectory};
use crate::riccati::{self, RiccatiError};
use crate::synthesis::propagate_covariances;

/// Environment variable capping the worker threads used for trials and sweeps.
pub const THREADS_ENV: &str = "INFOLQG_THREADS";

const CHUNK: usize = 256;

const CH_INIT: u64 = 0;
const CH_PROCESS: u64 = 1;
const CH_SENSOR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    FullObservationLqr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_trials: usize,
    pub master_seed: u64,
    /// Number of leading trials whose sample paths are kept.
    pub record_trajectories: usize,
    pub baseline: Baseline,
    /// Worker threads; `None` defers to `INFOLQG_THREADS`, then to rayon.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { num_trials: 10_000, master_seed: 0, record_trajectories: 0, baseline: Baseline::None, threads: None }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("num_trials must be at least 1")]
    NoTrials,
    #[error("policy horizon {got} does not match problem horizon {expected}")]
    Horizon { expected: usize, got: usize },
    #[error("policy matrices at step {step} do not fit the problem dimensions")]
    Dimension { step: usize },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("could not build thread pool: {0}")]
    Pool(String),
}

/// Thread count from `explicit`, else `INFOLQG_THREADS`, else `None`.
pub fn thread_count(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| std::env::var(THREADS_ENV).ok()?.trim().parse().ok()).filter(|&n| n > 0)
}

/// Runs `f` on a pool sized by [`thread_count`].
pub fn with_threads<T: Send>(explicit: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SimError> {
    match thread_count(explicit) {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| SimError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn stream(master_seed: u64, trial: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial.wrapping_mul(4).wrapping_add(channel));
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, root: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    root * z
}

/// Noise square roots shared by all trials.
struct Roots {
    p_init: DMatrix<f64>,
    w: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Roots {
    fn new(spec: &ProblemSpec, policy: Option<&SensorPolicy>) -> Self {
        Self {
            p_init: sqrt_psd(&spec.p_init),
            w: spec.w.iter().map(sqrt_psd).collect(),
            v: policy.map(|p| p.v.iter().map(sqrt_psd).collect()).unwrap_or_default(),
        }
    }
}

enum Mode<'a> {
    Filtered(&'a SensorPolicy),
    StateFeedback(&'a [DMatrix<f64>]),
}

struct TrialOutput {
    cost: f64,
    /// `x_t − x̂_t` per step (zero under state feedback).
    errors: Vec<DVector<f64>>,
    trajectory: Option<Trajectory>,
}

fn run_trial(spec: &ProblemSpec, mode: &Mode, roots: &Roots, seed: u64, trial: u64, record: bool) -> TrialOutput {
    let mut init = stream(seed, trial, CH_INIT);
    let mut process = stream(seed, trial, CH_PROCESS);
    let mut sensor = stream(seed, trial, CH_SENSOR);

    let mut x = gaussian(&mut init, &roots.p_init);
    let mut x_pred = DVector::zeros(spec.n(0));
    let mut cost = 0.0;
    let mut errors = Vec::with_capacity(spec.horizon);
    let mut traj = record.then(|| Trajectory {
        trial: trial as usize,
        states: vec![x.iter().copied().collect()],
        estimates: Vec::new(),
        inputs: Vec::new(),
        measurements: Vec::new(),
    });

    for t in 0..spec.horizon {
        let (x_hat, u, y) = match mode {
            Mode::Filtered(policy) => {
                let mut y = None;
                let x_hat = if policy.r[t] == 0 {
                    x_pred.clone()
                } else {
                    let meas = &policy.c[t] * &x + gaussian(&mut sensor, &roots.v[t]);
                    let innov = &meas - &policy.c[t] * &x_pred;
                    y = Some(meas);
                    &x_pred + &policy.l[t] * innov
                };
                let u = &policy.k[t] * &x_hat;
                (x_hat, u, y)
            }
            Mode::StateFeedback(k) => {
                let u = &k[t] * &x;
                (x.clone(), u, None)
            }
        };
        let noise = gaussian(&mut process, &roots.w[t]);
        let next = &spec.a[t] * &x + &spec.b[t] * &u + noise;
        cost += 0.5 * (next.dot(&(&spec.q[t] * &next)) + u.dot(&(&spec.r[t] * &u)));
        errors.push(&x - &x_hat);
        x_pred = &spec.a[t] * &x_hat + &spec.b[t] * &u;

        if let Some(tr) = traj.as_mut() {
            tr.estimates.push(x_hat.iter().copied().collect());
            tr.inputs.push(u.iter().copied().collect());
            tr.measurements.push(y.map(|v| v.iter().copied().collect()).unwrap_or_default());
            tr.states.push(next.iter().copied().collect());
        }
        x = next;
    }
    TrialOutput { cost, errors, trajectory: traj }
}

/// Running moments of a chunk of trials, merged exactly in chunk order.
#[derive(Clone)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
    err_sum: Vec<DVector<f64>>,
    err_outer: Vec<DMatrix<f64>>,
}

impl Moments {
    fn empty(spec: &ProblemSpec) -> Self {
        Self {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
            err_sum: (0..spec.horizon).map(|t| DVector::zeros(spec.n(t))).collect(),
            err_outer: (0..spec.horizon).map(|t| DMatrix::zeros(spec.n(t), spec.n(t))).collect(),
        }
    }

    fn push(&mut self, out: &TrialOutput) {
        self.count += 1.0;
        let d = out.cost - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (out.cost - self.mean);
        for (t, e) in out.errors.iter().enumerate() {
            self.err_sum[t] += e;
            self.err_outer[t].ger(1.0, e, e, 1.0);
        }
    }

    fn merge(mut self, o: Moments) -> Moments {
        let n = self.count + o.count;
        if n == 0.0 {
            return self;
        }
        let d = o.mean - self.mean;
        self.mean += d * o.count / n;
        self.m2 += o.m2 + d * d * self.count * o.count / n;
        self.count = n;
        for t in 0..self.err_sum.len() {
            self.err_sum[t] += &o.err_sum[t];
            self.err_outer[t] += &o.err_outer[t];
        }
        self
    }
}

/// Pairwise merge in index order; the tree shape depends only on the length.
fn merge_tree(mut parts: Vec<Moments>) -> Option<Moments> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop()
}

struct Aggregate {
    mean: f64,
    standard_error: f64,
    error_cov: Vec<DMatrix<f64>>,
    trajectories: Vec<Trajectory>,
}

fn aggregate(spec: &ProblemSpec, mode: &Mode, roots: &Roots, config: &SimConfig) -> Result<Aggregate, SimError> {
    if config.num_trials == 0 {
        return Err(SimError::NoTrials);
    }
    let chunks: Vec<(usize, usize)> =
        (0..config.num_trials).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(config.num_trials))).collect();
    let parts: Vec<(Moments, Vec<Trajectory>)> = with_threads(config.threads, || {
        chunks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = Moments::empty(spec);
                let mut kept = Vec::new();
                for trial in lo..hi {
                    let record = trial < config.record_trajectories;
                    let out = run_trial(spec, mode, roots, config.master_seed, trial as u64, record);
                    acc.push(&out);
                    kept.extend(out.trajectory);
                }
                (acc, kept)
            })
            .collect()
    })?;
    let (moments, trajs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let total = merge_tree(moments).expect("at least one chunk");
    let n = total.count;
    let variance = if n > 1.0 { total.m2 / (n - 1.0) } else { 0.0 };
    let error_cov = total
        .err_sum
        .iter()
        .zip(&total.err_outer)
        .map(|(s, o)| {
            if n > 1.0 {
                (o - s * s.transpose() / n) / (n - 1.0)
            } else {
                DMatrix::zeros(s.len(), s.len())
            }
        })
        .collect();
    Ok(Aggregate {
        mean: total.mean,
        standard_error: (variance / n).sqrt(),
        error_cov,
        trajectories: trajs.into_iter().flatten().collect(),
    })
}

fn check_policy(spec: &ProblemSpec, policy: &SensorPolicy) -> Result<(), SimError> {
    let t_len = spec.horizon;
    let lens = [policy.r.len(), policy.c.len(), policy.v.len(), policy.l.len(), policy.k.len()];
    if lens.iter().any(|&l| l != t_len) {
        return Err(SimError::Horizon { expected: t_len, got: policy.r.len() });
    }
    for t in 0..t_len {
        let (n, m, r) = (spec.n(t), spec.m(t), policy.r[t]);
        let ok = policy.c[t].shape() == (r, n)
            && policy.v[t].shape() == (r, r)
            && policy.l[t].shape() == (n, r)
            && policy.k[t].shape() == (m, n);
        if !ok {
            return Err(SimError::Dimension { step: t + 1 });
        }
    }
    Ok(())
}

/// One closed-loop sample path under `policy`; returns the realized control
/// cost `Σ ½(‖x_{t+1}‖²_Q + ‖u_t‖²_R)` and the path.
pub fn rollout(
    spec: &ProblemSpec,
    policy: &SensorPolicy,
    master_seed: u64,
    trial: u64,
) -> Result<(f64, Trajectory), SimError> {
    check_policy(spec, policy)?;
    let roots = Roots::new(spec, Some(policy));
    let out = run_trial(spec, &Mode::Filtered(policy), &roots, master_seed, trial, true);
    Ok((out.cost, out.trajectory.expect("recorded")))
}

/// Monte Carlo control cost of `policy` next to the analytic prediction.
///
/// Information rates come from the covariance recursion realized by the
/// policy, never from samples; steps without sensing report exactly zero.
pub fn estimate_costs(spec: &ProblemSpec, policy: &SensorPolicy, config: &SimConfig) -> Result<SimulationReport, SimError> {
    check_policy(spec, policy)?;
    let tables = riccati::riccati_backward(spec)?;
    let (_, post) = propagate_covariances(spec, policy);
    let predicted = riccati::analytic_min_control_cost(spec, &tables, &post)?;
    let info_rates: Vec<f64> = information_rates(&spec.a, &spec.w, &spec.p_init, &post)
        .into_iter()
        .zip(&policy.r)
        .map(|(rate, &r)| if r == 0 { 0.0 } else { rate.max(0.0) })
        .collect();
    let total_info_cost = info_rates.iter().zip(&spec.gamma).map(|(r, g)| r * g).sum();

    let roots = Roots::new(spec, Some(policy));
    let agg = aggregate(spec, &Mode::Filtered(policy), &roots, config)?;
    Ok(SimulationReport {
        num_trials: config.num_trials,
        empirical_control_cost: agg.mean,
        standard_error: agg.standard_error,
        predicted_control_cost: predicted,
        info_rates,
        total_info_cost,
        empirical_error_cov: agg.error_cov,
        trajectories: agg.trajectories,
    })
}

/// Exact state feedback `u_t = K_t x_t`. Uses the same initial-state and
/// process-noise streams as [`estimate_costs`], so equal seeds give paired
/// trials. Information cost is reported as `+∞`.
pub fn lqr_baseline(spec: &ProblemSpec, config: &SimConfig) -> Result<SimulationReport, SimError> {
    let tables = riccati::riccati_backward(spec)?;
    let roots = Roots::new(spec, None);
    let agg = aggregate(spec, &Mode::StateFeedback(&tables.k), &roots, config)?;
    Ok(SimulationReport {
        num_trials: config.num_trials,
        empirical_control_cost: agg.mean,
        standard_error: agg.standard_error,
        predicted_control_cost: riccati::full_information_cost(spec, &tables),
        info_rates: vec![f64::INFINITY; spec.horizon],
        total_info_cost: f64::INFINITY,
        empirical_error_cov: agg.error_cov,
        trajectories: agg.trajectories,
    })
}

/// Per-trial costs for paired comparisons (policy cost, baseline cost).
pub fn paired_costs(
    spec: &ProblemSpec,
    policy: &SensorPolicy,
    master_seed: u64,
    trials: usize,
) -> Result<Vec<(f64, f64)>, SimError> {
    check_policy(spec, policy)?;
    let tables = riccati::riccati_backward(spec)?;
    let roots = Roots::new(spec, Some(policy));
    let filtered = Mode::Filtered(policy);
    let exact = Mode::StateFeedback(&tables.k);
    Ok((0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let a = run_trial(spec, &filtered, &roots, master_seed, i, false).cost;
            let b = run_trial(spec, &exact, &roots, master_seed, i, false).cost;
            (a, b)
        })
        .collect())
}
