//! Wasserstein-2 distances between empirical measures and the experiments
//! that probe particle-number convergence and stability under perturbed
//! population inputs.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::embed::psi_moments;
use crate::problems::ProblemSpec;
use crate::sim::{simulate_with, NoisePlan, Policy, PsiJitter, RolloutOptions, SimError};

/// Largest support handled by the exact assignment solver in `d >= 2`.
pub const MAX_ASSIGNMENT_SIZE: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empirical measures have {left} and {right} atoms; equal sizes are required")]
    SizeMismatch { left: usize, right: usize },
    #[error("empirical measures live in dimensions {left} and {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("exact assignment is limited to {MAX_ASSIGNMENT_SIZE} atoms in d >= 2, got {0}")]
    TooLarge(usize),
    #[error("invalid empirical measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Uniform weights on the rows of an `[n, d]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    points: Tensor,
}

impl EmpiricalMeasure {
    pub fn new(points: Tensor) -> Result<Self, MetricsError> {
        if points.rank() != 2 || points.rows() == 0 {
            return Err(MetricsError::InvalidMeasure(format!(
                "need an [n >= 1, d] matrix, got {:?}",
                points.shape()
            )));
        }
        if !points.is_finite() {
            return Err(MetricsError::InvalidMeasure("non-finite support point".into()));
        }
        Ok(Self { points })
    }

    pub fn from_1d(values: &[f64]) -> Result<Self, MetricsError> {
        let t = Tensor::matrix(values.len(), 1, values.to_vec())
            .map_err(|e| MetricsError::InvalidMeasure(e.to_string()))?;
        Self::new(t)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.data()[i * d..(i + 1) * d]
    }

    /// The same measure with every atom repeated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        let data: Vec<f64> = (0..self.len())
            .flat_map(|i| std::iter::repeat(self.row(i)).take(times).flatten().copied())
            .collect();
        Self {
            points: Tensor::matrix(self.len() * times, self.dim(), data).expect("repeat keeps shape"),
        }
    }
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(), MetricsError> {
    if mu.dim() != nu.dim() {
        return Err(MetricsError::DimMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(MetricsError::SizeMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    Ok(())
}

/// Squared W2 between equal-size empirical measures: sorted order
/// statistics in one dimension, optimal assignment otherwise.
pub fn w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MetricsError> {
    check_pair(mu, nu)?;
    if mu.dim() == 1 {
        Ok(w2_squared_sorted(mu.points.data(), nu.points.data()))
    } else {
        w2_squared_assignment(mu, nu)
    }
}

pub fn w2_empirical(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MetricsError> {
    w2_squared(mu, nu).map(f64::sqrt)
}

fn w2_squared_sorted(x: &[f64], y: &[f64]) -> f64 {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    xs.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xs.len() as f64
}

/// Squared W2 through an exact minimum-cost perfect matching; works in any
/// dimension, subject to the size guard.
pub fn w2_squared_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MetricsError> {
    check_pair(mu, nu)?;
    let n = mu.len();
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(MetricsError::TooLarge(n));
    }
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                mu.row(i)
                    .iter()
                    .zip(nu.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
        })
        .collect();
    let assignment = min_cost_assignment(n, &cost);
    // summing in sorted order makes the result independent of argument order
    let mut matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_by(f64::total_cmp);
    Ok(matched.iter().sum::<f64>() / n as f64)
}

/// Hungarian algorithm with row/column potentials, `O(n^3)`.
/// Returns the column assigned to each row of the `n x n` cost matrix.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

/// Convergence of `E[W2^2(mu_N, mu)]` in the number of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub sizes: Vec<usize>,
    pub mean_w2sq: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Least-squares fit of `ln E[W2^2]` against `ln N`; absent when some
    /// estimate is zero.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl RateFit {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# schema: particle_rate v1")?;
        writeln!(out, "N,mean_w2sq,stderr")?;
        for ((n, m), s) in self.sizes.iter().zip(&self.mean_w2sq).zip(&self.stderr) {
            writeln!(out, "{n},{m},{s}")?;
        }
        Ok(())
    }
}

/// Number of reference atoms per sample atom.
pub const REFERENCE_FACTOR: usize = 20;

/// Monte-Carlo estimate of `E[W2^2]` between an `N`-sample and an independent
/// `20 N`-sample standing in for the law; the `N`-sample enters with every
/// atom repeated 20 times so both measures have equal size.
pub fn particle_rate_experiment(
    sampler: &dyn Fn(&mut ChaCha8Rng) -> Vec<f64>,
    dim: usize,
    sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<RateFit, MetricsError> {
    if trials < 2 || sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(MetricsError::InvalidExperiment(
            "need >= 2 trials and strictly increasing positive sizes".into(),
        ));
    }
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Result<EmpiricalMeasure, MetricsError> {
        let data: Vec<f64> = (0..n).flat_map(|_| sampler(rng)).collect();
        if data.len() != n * dim {
            return Err(MetricsError::InvalidExperiment(
                "sampler returned the wrong dimension".into(),
            ));
        }
        EmpiricalMeasure::new(Tensor::matrix(n, dim, data).expect("sized above"))
    };
    let mut means = Vec::new();
    let mut errs = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        let mut values = Vec::with_capacity(trials);
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((s as u64) << 32) | t as u64);
            let sample = draw(&mut rng, n)?;
            let reference = draw(&mut rng, REFERENCE_FACTOR * n)?;
            values.push(w2_squared(&sample.repeated(REFERENCE_FACTOR), &reference)?);
        }
        let mean = values.iter().sum::<f64>() / trials as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        means.push(mean);
        errs.push((var / trials as f64).sqrt());
    }
    let (slope, intercept) = if means.iter().all(|m| *m > 0.0) && sizes.len() >= 2 {
        let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
        let (a, b) = least_squares(&xs, &ys);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(RateFit {
        sizes: sizes.to_vec(),
        mean_w2sq: means,
        stderr: errs,
        slope,
        intercept,
    })
}

/// `(slope, intercept)` of the least-squares line through the points.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub delta: f64,
    /// Calibrated jitter standard deviation.
    pub scale: f64,
    /// Achieved `sum_t dt W2^2(mu_t, perturbed mu_t)`.
    pub budget: f64,
    pub cost_gap: f64,
    /// `max_t (1/N) sum_i |X_t^i - perturbed X_t^i|^2`.
    pub state_gap: f64,
}

pub fn write_gap_csv<W: Write>(rows: &[GapRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "# schema: perturbation_gap v1")?;
    writeln!(out, "delta,cost_gap,state_gap")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.delta, r.cost_gap, r.state_gap)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapExperiment {
    pub particles: usize,
    pub seed: u64,
    /// Bisection steps of the jitter calibration.
    pub calibration_steps: usize,
}

impl Default for GapExperiment {
    fn default() -> Self {
        Self {
            particles: 200,
            seed: 0,
            calibration_steps: 40,
        }
    }
}

/// Time-integrated `W2^2` between the simulated measure and the jittered
/// copy the policy read, along the jittered run.
fn perturbation_budget(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    noise: &NoisePlan,
    jitter: &PsiJitter,
) -> Result<(f64, Vec<Tensor>), MetricsError> {
    let rec = simulate_with(
        problem,
        policy,
        noise,
        RolloutOptions {
            train: false,
            jitter: Some(jitter),
        },
    )?;
    let n = noise.particles;
    let d = problem.state_dim;
    let mut budget = 0.0;
    for (step, s) in rec.states.iter().take(problem.steps()).enumerate() {
        let shift = &jitter.draws[step * n * d..(step + 1) * n * d];
        let moved: Vec<f64> = s.data().iter().zip(shift).map(|(x, z)| x + jitter.scale * z).collect();
        let a = EmpiricalMeasure::new(s.clone())?;
        let b = EmpiricalMeasure::new(Tensor::matrix(n, d, moved).expect("same shape"))?;
        budget += problem.dt * w2_squared(&a, &b)?;
    }
    Ok((budget, rec.states))
}

/// Paired rollouts on one noise plan: one reading the true particle cloud,
/// one reading a jittered copy whose time-integrated `W2^2` distance to
/// the truth is calibrated to each `delta`.
pub fn perturbation_gap_experiment(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    deltas: &[f64],
    setup: &GapExperiment,
) -> Result<Vec<GapRow>, MetricsError> {
    if deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(MetricsError::InvalidExperiment("deltas must be finite and >= 0".into()));
    }
    let noise = NoisePlan::for_problem(problem, setup.particles, setup.seed);
    let base = simulate_with(problem, policy, &noise, RolloutOptions::default())?;
    let unit = PsiJitter::generate(
        setup.seed ^ 0x5eed_0f_u64.rotate_left(32),
        setup.particles,
        problem.state_dim,
        problem.steps(),
        1.0,
    );
    let calibrate = |delta: f64| -> Result<f64, MetricsError> {
        let eval = |s: f64| perturbation_budget(problem, policy, &noise, &unit.with_scale(s));
        let mut hi = delta.sqrt();
        while eval(hi)?.0 < delta {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(MetricsError::InvalidExperiment(format!("cannot reach budget {delta}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..setup.calibration_steps {
            let mid = 0.5 * (lo + hi);
            if eval(mid)?.0 < delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let scale = if delta == 0.0 { 0.0 } else { calibrate(delta)? };
        let jitter = unit.with_scale(scale);
        let (budget, _) = perturbation_budget(problem, policy, &noise, &jitter)?;
        let perturbed = simulate_with(
            problem,
            policy,
            &noise,
            RolloutOptions {
                train: false,
                jitter: Some(&jitter),
            },
        )?;
        let state_gap = base
            .states
            .iter()
            .zip(&perturbed.states)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / setup.particles as f64
            })
            .fold(0.0, f64::max);
        rows.push(GapRow {
            delta,
            scale,
            budget,
            cost_gap: (base.total - perturbed.total).abs(),
            state_gap,
        });
    }
    Ok(rows)
}

/// Largest observed `|m_k(mu) - m_k(nu)| / W2(mu, nu)` for the clipped
/// `k`-th moment over random pairs of `n`-atom measures on `[-support, support]`.
/// Returns `None` when every pair had zero distance.
pub fn moment_lipschitz_check(
    truncation: f64,
    k: usize,
    support: f64,
    atoms: usize,
    trials: usize,
    seed: u64,
) -> Result<Option<f64>, MetricsError> {
    if k == 0 || !(truncation > 0.0) || atoms == 0 {
        return Err(MetricsError::InvalidExperiment(
            "need k >= 1, M > 0 and at least one atom".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<f64> = None;
    for _ in 0..trials {
        let draw =
            |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..atoms).map(|_| rng.gen_range(-support..=support)).collect() };
        let x = draw(&mut rng);
        // mix far and near pairs: half of the trials perturb x slightly
        let y: Vec<f64> = if rng.gen_bool(0.5) {
            x.iter()
                .map(|v| (v + rng.gen_range(-0.05..=0.05)).clamp(-support, support))
                .collect()
        } else {
            draw(&mut rng)
        };
        if let Some(r) = moment_ratio(&x, &y, truncation, k)? {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    Ok(best)
}

/// `|m_k(mu) - m_k(nu)| / W2(mu, nu)`, or `None` when the measures coincide.
pub fn moment_ratio(x: &[f64], y: &[f64], truncation: f64, k: usize) -> Result<Option<f64>, MetricsError> {
    let mu = EmpiricalMeasure::from_1d(x)?;
    let nu = EmpiricalMeasure::from_1d(y)?;
    let w = w2_empirical(&mu, &nu)?;
    if w == 0.0 {
        return Ok(None);
    }
    let a = psi_moments(mu.points(), k, truncation)[k - 1];
    let b = psi_moments(nu.points(), k, truncation)[k - 1];
    Ok(Some((a - b).abs() / w))
}
