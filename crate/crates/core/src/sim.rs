//! Euler–Maruyama simulation of an interacting particle batch under a
//! population-dependent policy.
//!
//! All randomness of a rollout is drawn up front into a [`NoisePlan`], so
//! for a fixed plan the sampled cost is a deterministic, differentiable
//! function of the policy parameters. Every particle owns its own random
//! stream, which keeps the noise of particle `i` unchanged when the
//! population size changes.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::embed::{embed, EmbedError, EmbeddingConfig};
use crate::nn::{BoundPolicy, NnError, PolicyParams};
use crate::problems::{Gaussian, ProblemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state at step {step}{}", particle.map(|p| format!(", particle {p}")).unwrap_or_default())]
    NonFinite { step: usize, particle: Option<usize> },
    #[error("step {step}: {source}")]
    Step { step: usize, source: AutodiffError },
    #[error("noise plan {what}")]
    NoiseShape { what: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBatch {
    pub t: f64,
    /// `[n, d]` states.
    pub states: Tensor,
}

impl ParticleBatch {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.states.cols();
        let mut m = vec![0.0; d];
        for row in self.states.data().chunks_exact(d) {
            m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.len() as f64);
        m
    }
}

/// Pre-sampled randomness of one rollout.
///
/// Stream `0` of the seed feeds the common draws, stream `i + 1` the draws
/// of particle `i`; each stream yields the initial standard normals first,
/// then the step increments in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePlan {
    pub seed: u64,
    pub particles: usize,
    pub dim: usize,
    pub steps: usize,
    pub dt: f64,
    /// `[n * d]` standard normals for the idiosyncratic initial states.
    pub initial: Vec<f64>,
    /// `[d]` standard normals for the common initial shift.
    pub common_initial: Vec<f64>,
    /// `[steps][n][d]` increments, each `N(0, dt)`.
    pub idiosyncratic: Vec<f64>,
    /// `[steps][d]` increments, each `N(0, dt)`.
    pub common: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl NoisePlan {
    pub fn generate(seed: u64, particles: usize, dim: usize, steps: usize, dt: f64) -> Self {
        let sq = dt.sqrt();
        let mut common_rng = stream(seed, 0);
        let common_initial = (0..dim).map(|_| normal(&mut common_rng)).collect();
        let common = (0..steps * dim).map(|_| sq * normal(&mut common_rng)).collect();
        let mut initial = vec![0.0; particles * dim];
        let mut idiosyncratic = vec![0.0; steps * particles * dim];
        for i in 0..particles {
            let mut rng = stream(seed, i as u64 + 1);
            for j in 0..dim {
                initial[i * dim + j] = normal(&mut rng);
            }
            for s in 0..steps {
                for j in 0..dim {
                    idiosyncratic[(s * particles + i) * dim + j] = sq * normal(&mut rng);
                }
            }
        }
        Self {
            seed,
            particles,
            dim,
            steps,
            dt,
            initial,
            common_initial,
            idiosyncratic,
            common,
        }
    }

    pub fn for_problem(problem: &ProblemSpec, particles: usize, seed: u64) -> Self {
        Self::generate(seed, particles, problem.state_dim, problem.steps(), problem.dt)
    }

    pub fn idiosyncratic_at(&self, step: usize) -> &[f64] {
        let w = self.particles * self.dim;
        &self.idiosyncratic[step * w..(step + 1) * w]
    }

    pub fn common_at(&self, step: usize) -> &[f64] {
        &self.common[step * self.dim..(step + 1) * self.dim]
    }

    /// Reorders particles: particle `i` of the result is particle `perm[i]`
    /// of `self`. Common draws are untouched.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, SimError> {
        let mut seen = vec![false; self.particles];
        if perm.len() != self.particles || perm.iter().any(|&p| p >= self.particles || std::mem::replace(&mut seen[p], true)) {
            return Err(SimError::NoiseShape {
                what: format!("permutation is not a permutation of 0..{}", self.particles),
            });
        }
        Ok(self.gather(perm))
    }

    /// Population of `times * n` particles in which every particle appears
    /// `times` times consecutively with identical noise.
    pub fn duplicated(&self, times: usize) -> Self {
        let index: Vec<usize> = (0..self.particles).flat_map(|i| std::iter::repeat(i).take(times)).collect();
        self.gather(&index)
    }

    /// The first `n` particles with the same common draws.
    pub fn truncated(&self, n: usize) -> Self {
        let index: Vec<usize> = (0..n.min(self.particles)).collect();
        self.gather(&index)
    }

    fn gather(&self, index: &[usize]) -> Self {
        let d = self.dim;
        let pick = |src: &[f64]| -> Vec<f64> { index.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect() };
        let mut idiosyncratic = Vec::with_capacity(self.steps * index.len() * d);
        for s in 0..self.steps {
            idiosyncratic.extend(pick(self.idiosyncratic_at(s)));
        }
        Self {
            particles: index.len(),
            initial: pick(&self.initial),
            idiosyncratic,
            ..self.clone()
        }
    }

    fn check(&self, problem: &ProblemSpec) -> Result<(), SimError> {
        if self.dim != problem.state_dim || self.steps != problem.steps() || self.particles == 0 {
            return Err(SimError::NoiseShape {
                what: format!(
                    "has (n={}, d={}, steps={}) but the problem needs d={}, steps={} and n >= 1",
                    self.particles,
                    self.dim,
                    self.steps,
                    problem.state_dim,
                    problem.steps()
                ),
            });
        }
        Ok(())
    }
}

/// `X_0^i = mu0 draw + x0`, with one shared draw `x0` of the common law.
pub fn sample_initial(initial: &[Gaussian], common: &[Gaussian], noise: &NoisePlan) -> ParticleBatch {
    let d = noise.dim;
    let shift: Vec<f64> = common.iter().zip(&noise.common_initial).map(|(g, z)| g.mean + g.std * z).collect();
    let data = noise
        .initial
        .chunks_exact(d)
        .flat_map(|z| (0..d).map(|j| initial[j].mean + initial[j].std * z[j] + shift[j]).collect::<Vec<_>>())
        .collect();
    ParticleBatch {
        t: 0.0,
        states: Tensor::matrix(noise.particles, d, data).expect("noise plan shape"),
    }
}

/// Convenience wrapper drawing a fresh plan for `n` particles.
pub fn sample_initial_seeded(problem: &ProblemSpec, particles: usize, seed: u64) -> ParticleBatch {
    sample_initial(&problem.initial, &problem.common_initial, &NoisePlan::for_problem(problem, particles, seed))
}

/// Per-particle noise `sigma_j eps_ij + sigma0_j eps0_j` of one step.
fn step_noise(noise: &NoisePlan, step: usize, sigma: &[f64], sigma_common: &[f64]) -> Vec<f64> {
    let common = noise.common_at(step);
    let d = noise.dim;
    noise
        .idiosyncratic_at(step)
        .iter()
        .enumerate()
        .map(|(k, e)| sigma[k % d] * e + sigma_common[k % d] * common[k % d])
        .collect()
}

fn first_non_finite(values: &[f64], d: usize) -> Option<usize> {
    values.iter().position(|v| !v.is_finite()).map(|k| k / d)
}

/// One Euler–Maruyama step on concrete values:
/// `X + b dt + sigma eps + sigma0 eps0`, the same `eps0` for every particle.
pub fn euler_step(
    batch: &ParticleBatch,
    drift: &Tensor,
    dt: f64,
    sigma: &[f64],
    sigma_common: &[f64],
    noise: &NoisePlan,
    step: usize,
) -> Result<ParticleBatch, SimError> {
    if drift.shape() != batch.states.shape() || noise.particles != batch.len() || step >= noise.steps {
        return Err(SimError::NoiseShape {
            what: format!("does not match batch {:?} at step {step}", batch.states.shape()),
        });
    }
    let eta = step_noise(noise, step, sigma, sigma_common);
    let data: Vec<f64> = batch
        .states
        .data()
        .iter()
        .zip(drift.data())
        .zip(&eta)
        .map(|((x, b), e)| x + b * dt + e)
        .collect();
    if let Some(p) = first_non_finite(&data, noise.dim) {
        return Err(SimError::NonFinite {
            step,
            particle: Some(p),
        });
    }
    Ok(ParticleBatch {
        t: batch.t + dt,
        states: Tensor::new(batch.states.shape().to_vec(), data)?,
    })
}

/// Actions of one step and the population embedding they were computed from.
#[derive(Clone, Copy, Debug)]
pub struct Decision {
    /// `[n, k]`.
    pub actions: Var,
    /// `[1, m]`, absent for population-blind policies.
    pub embedding: Option<Var>,
}

/// A feedback control evaluated on a whole batch.
pub trait Policy {
    fn control_dim(&self) -> usize;

    /// Registers trainable leaves on the tape.
    fn bind(&self, _tape: &mut Tape) -> Result<Option<BoundPolicy>, SimError> {
        Ok(None)
    }

    /// `x` are the particles' own states; `population` is the batch the
    /// policy reads the measure from (usually `x` itself).
    fn act(
        &self,
        tape: &mut Tape,
        bound: Option<&BoundPolicy>,
        step: usize,
        t: f64,
        x: Var,
        population: Var,
    ) -> Result<Decision, SimError>;
}

/// Control networks `v(t, x, m(psi(mu)))`, one per control dimension.
#[derive(Clone, Copy, Debug)]
pub struct NeuralPolicy<'a> {
    pub params: &'a PolicyParams,
    pub embedding: &'a EmbeddingConfig,
}

impl<'a> NeuralPolicy<'a> {
    pub fn new(params: &'a PolicyParams, embedding: &'a EmbeddingConfig) -> Self {
        Self { params, embedding }
    }
}

impl Policy for NeuralPolicy<'_> {
    fn control_dim(&self) -> usize {
        self.params.spec.control_dim
    }

    fn bind(&self, tape: &mut Tape) -> Result<Option<BoundPolicy>, SimError> {
        Ok(Some(self.params.bind(tape)?))
    }

    fn act(
        &self,
        tape: &mut Tape,
        bound: Option<&BoundPolicy>,
        _step: usize,
        t: f64,
        x: Var,
        population: Var,
    ) -> Result<Decision, SimError> {
        let bound = bound.expect("neural policy is bound before acting");
        let spec = &self.params.spec;
        let n = tape.value(x).rows();
        let emb = embed(tape, self.embedding, spec, bound, population)?;
        let time = tape.leaf(Tensor::filled(&[n, 1], t))?;
        let mut parts = vec![time, x];
        if let Some(e) = emb {
            parts.push(tape.broadcast_rows(e, n)?);
        }
        let input = tape.concat_cols(&parts)?;
        let mut cols = Vec::with_capacity(spec.control_dim);
        for params in &bound.controls {
            cols.push(spec.control.forward(tape, params, input)?);
        }
        let actions = if cols.len() == 1 { cols[0] } else { tape.concat_cols(&cols)? };
        Ok(Decision { actions, embedding: emb })
    }
}

/// `A = phi_step (Xbar - x)` with the mean read from the population input.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationFeedback {
    /// Slope per time step.
    pub slopes: Vec<f64>,
}

impl Policy for DeviationFeedback {
    fn control_dim(&self) -> usize {
        1
    }

    fn act(
        &self,
        tape: &mut Tape,
        _bound: Option<&BoundPolicy>,
        step: usize,
        _t: f64,
        x: Var,
        population: Var,
    ) -> Result<Decision, SimError> {
        let n = tape.value(x).rows();
        let mean = tape.mean_rows(population)?;
        let mean = tape.broadcast_rows(mean, n)?;
        let dev = tape.sub(mean, x)?;
        let actions = tape.scale(dev, self.slopes[step.min(self.slopes.len() - 1)])?;
        Ok(Decision {
            actions,
            embedding: None,
        })
    }
}

/// `A = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroPolicy {
    pub control_dim: usize,
}

impl Policy for ZeroPolicy {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn act(
        &self,
        tape: &mut Tape,
        _bound: Option<&BoundPolicy>,
        _step: usize,
        _t: f64,
        x: Var,
        _population: Var,
    ) -> Result<Decision, SimError> {
        let n = tape.value(x).rows();
        Ok(Decision {
            actions: tape.leaf(Tensor::zeros(&[n, self.control_dim]))?,
            embedding: None,
        })
    }
}

/// Gaussian perturbation of the population copy the policy reads:
/// `population_t = X_t + scale * z_t` with `z_t` standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiJitter {
    pub scale: f64,
    /// `[steps][n][d]` standard normals.
    pub draws: Vec<f64>,
    particles: usize,
    dim: usize,
}

impl PsiJitter {
    pub fn generate(seed: u64, particles: usize, dim: usize, steps: usize, scale: f64) -> Self {
        let unit = NoisePlan::generate(seed, particles, dim, steps, 1.0);
        Self {
            scale,
            draws: unit.idiosyncratic,
            particles,
            dim,
        }
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    fn at(&self, step: usize) -> Vec<f64> {
        let w = self.particles * self.dim;
        self.draws[step * w..(step + 1) * w].iter().map(|z| self.scale * z).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutOptions<'a> {
    /// Keep the whole computation on the tape so the cost can be
    /// differentiated; otherwise the tape is reset every step.
    pub train: bool,
    pub jitter: Option<&'a PsiJitter>,
}

impl RolloutOptions<'_> {
    pub fn training() -> Self {
        Self {
            train: true,
            jitter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub dt: f64,
    /// `steps + 1` batches `[n, d]`, from `t = 0` to `t = T`.
    pub states: Vec<Tensor>,
    /// `steps` batches `[n, k]`.
    pub actions: Vec<Tensor>,
    /// `steps` rows `[1, m]`; empty for population-blind policies.
    pub embeddings: Vec<Tensor>,
    /// `(1/N) sum_i f(t, X^i, A^i, mu) dt` per step.
    pub running: Vec<f64>,
    /// `(1/N) sum_i g(X^i_T, mu_T)`.
    pub terminal: f64,
    pub total: f64,
    /// Cost node on the caller's tape when training.
    pub cost: Option<Var>,
}

fn at_step(step: usize) -> impl Fn(AutodiffError) -> SimError {
    move |e| match e {
        AutodiffError::NonFinite { .. } => SimError::NonFinite { step, particle: None },
        source => SimError::Step { step, source },
    }
}

fn step_err(step: usize) -> impl Fn(SimError) -> SimError {
    move |e| match e {
        SimError::Autodiff(a) => at_step(step)(a),
        SimError::Nn(NnError::Autodiff(a)) => at_step(step)(a),
        other => other,
    }
}

/// Simulates one population under `policy` on the given noise.
///
/// In training mode the caller's tape receives the policy leaves, the full
/// trajectory and the averaged cost (returned in [`RolloutRecord::cost`]);
/// the policy must then be bound on that tape beforehand and passed in as
/// `bound`. In evaluation mode the tape is rewound to its initial length
/// after every step.
pub fn rollout(
    tape: &mut Tape,
    problem: &ProblemSpec,
    policy: &dyn Policy,
    bound: Option<&BoundPolicy>,
    noise: &NoisePlan,
    options: RolloutOptions<'_>,
) -> Result<RolloutRecord, SimError> {
    noise.check(problem)?;
    let (n, d, steps, dt) = (noise.particles, problem.state_dim, problem.steps(), problem.dt);
    if let Some(j) = options.jitter {
        if j.particles != n || j.dim != d || j.draws.len() != steps * n * d {
            return Err(SimError::NoiseShape {
                what: "jitter draws do not match the population".into(),
            });
        }
    }
    let model = problem.model.as_ref();
    let mark = tape.len();
    let inv_n = 1.0 / n as f64;
    let initial = sample_initial(&problem.initial, &problem.common_initial, noise);
    let mut states = vec![initial.states.clone()];
    let mut actions = Vec::with_capacity(steps);
    let mut embeddings = Vec::new();
    let mut running = Vec::with_capacity(steps);
    let mut x = tape.leaf(initial.states)?;
    let mut acc: Option<Var> = None;
    let mut total = 0.0;

    for step in 0..steps {
        let t = problem.time(step);
        if !options.train && step > 0 {
            let value = states[step].clone();
            tape.truncate(mark);
            x = tape.leaf(value)?;
        }
        let err = at_step(step);
        let population = match options.jitter {
            Some(j) => {
                let shift = tape.leaf(Tensor::new(vec![n, d], j.at(step))?)?;
                tape.add(x, shift).map_err(&err)?
            }
            None => x,
        };
        let decision = policy.act(tape, bound, step, t, x, population).map_err(step_err(step))?;
        let a = decision.actions;
        let f = model.running_cost(tape, t, x, a).map_err(&err)?;
        let f = tape.sum(f).map_err(&err)?;
        let inc = tape.scale(f, dt * inv_n).map_err(&err)?;
        let b = model.drift(tape, t, x, a).map_err(&err)?;

        let eta = step_noise(noise, step, &problem.sigma, &problem.sigma_common);
        let next: Vec<f64> = tape
            .value(x)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .zip(&eta)
            .map(|((x, b), e)| x + b * dt + e)
            .collect();
        if let Some(p) = first_non_finite(&next, d) {
            return Err(SimError::NonFinite {
                step,
                particle: Some(p),
            });
        }
        let bdt = tape.scale(b, dt).map_err(&err)?;
        let moved = tape.add(x, bdt).map_err(&err)?;
        let shock = tape.leaf(Tensor::new(vec![n, d], eta)?)?;
        let x_next = tape.add(moved, shock).map_err(&err)?;

        let inc_value = tape.value(inc).data()[0];
        running.push(inc_value);
        total += inc_value;
        actions.push(tape.value(a).clone());
        if let Some(e) = decision.embedding {
            embeddings.push(tape.value(e).clone());
        }
        states.push(tape.value(x_next).clone());
        if options.train {
            acc = Some(match acc {
                None => inc,
                Some(prev) => tape.add(prev, inc).map_err(&err)?,
            });
        }
        x = x_next;
    }

    if !options.train {
        let value = states[steps].clone();
        tape.truncate(mark);
        x = tape.leaf(value)?;
    }
    let err = at_step(steps);
    let g = model.terminal_cost(tape, x).map_err(&err)?;
    let g = tape.sum(g).map_err(&err)?;
    let g = tape.scale(g, inv_n).map_err(&err)?;
    let terminal = tape.value(g).data()[0];
    total += terminal;
    let cost = if options.train {
        let c = match acc {
            None => g,
            Some(prev) => tape.add(prev, g).map_err(&err)?,
        };
        Some(c)
    } else {
        tape.truncate(mark);
        None
    };
    Ok(RolloutRecord {
        dt,
        states,
        actions,
        embeddings,
        running,
        terminal,
        total,
        cost,
    })
}

/// Evaluation-mode rollout on a private tape.
pub fn simulate(problem: &ProblemSpec, policy: &dyn Policy, noise: &NoisePlan) -> Result<RolloutRecord, SimError> {
    simulate_with(problem, policy, noise, RolloutOptions::default())
}

pub fn simulate_with(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    noise: &NoisePlan,
    options: RolloutOptions<'_>,
) -> Result<RolloutRecord, SimError> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape)?;
    rollout(&mut tape, problem, policy, bound.as_ref(), noise, RolloutOptions { train: false, ..options })
}

pub const TRAJECTORY_SCHEMA: &str = "# schema: trajectories v1";

/// Writes `step,time,particle,x1..xd,a1..ak`; the terminal rows have empty
/// action fields.
pub fn write_trajectories<W: Write>(record: &RolloutRecord, out: &mut W) -> io::Result<()> {
    let d = record.states[0].cols();
    let k = record.actions.first().map_or(0, Tensor::cols);
    writeln!(out, "{TRAJECTORY_SCHEMA}")?;
    let mut header = vec!["step".to_string(), "time".into(), "particle".into()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    header.extend((1..=k).map(|j| format!("a{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (step, s) in record.states.iter().enumerate() {
        let a = record.actions.get(step);
        for (i, row) in s.data().chunks_exact(d).enumerate() {
            write!(out, "{step},{},{i}", step as f64 * record.dt)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            for j in 0..k {
                match a {
                    Some(a) => write!(out, ",{}", a.data()[i * k + j])?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::problems::{systemic_risk_spec, MeanFieldModel, SystemicRiskParams};

    /// `b = a`, `f = x^2 + a^2`, `g = x`.
    #[derive(Debug)]
    struct Toy;

    impl MeanFieldModel for Toy {
        fn drift(&self, _: &mut Tape, _: f64, _: Var, a: Var) -> Result<Var, AutodiffError> {
            Ok(a)
        }
        fn running_cost(&self, tape: &mut Tape, _: f64, x: Var, a: Var) -> Result<Var, AutodiffError> {
            let x2 = tape.square(x)?;
            let a2 = tape.square(a)?;
            tape.add(x2, a2)
        }
        fn terminal_cost(&self, _: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
            Ok(x)
        }
    }

    fn toy(sigma: f64, sigma_common: f64) -> ProblemSpec {
        ProblemSpec {
            name: "toy".into(),
            state_dim: 1,
            control_dim: 1,
            horizon: 1.0,
            dt: 0.5,
            initial: vec![Gaussian::new(0.0, 1.0)],
            common_initial: vec![Gaussian::dirac(0.0)],
            sigma: vec![sigma],
            sigma_common: vec![sigma_common],
            model: Arc::new(Toy),
        }
    }

    /// `A = -x` without looking at the population.
    struct MinusX;

    impl Policy for MinusX {
        fn control_dim(&self) -> usize {
            1
        }
        fn act(&self, tape: &mut Tape, _: Option<&BoundPolicy>, _: usize, _: f64, x: Var, _: Var) -> Result<Decision, SimError> {
            Ok(Decision {
                actions: tape.scale(x, -1.0)?,
                embedding: None,
            })
        }
    }

    fn plan_with(initial: Vec<f64>, idio: Vec<f64>, common: Vec<f64>) -> NoisePlan {
        let n = initial.len();
        NoisePlan {
            seed: 0,
            particles: n,
            dim: 1,
            steps: common.len(),
            dt: 0.5,
            initial,
            common_initial: vec![0.0],
            idiosyncratic: idio,
            common,
        }
    }

    #[test]
    fn two_particles_two_steps_by_hand() {
        // X0 = (1, -2); eps = [(0.1, 0.2), (-0.3, 0.0)]; eps0 = (0.5, -0.5); sigma = 1, sigma0 = 2
        let plan = plan_with(vec![1.0, -2.0], vec![0.1, 0.2, -0.3, 0.0], vec![0.5, -0.5]);
        let rec = simulate(&toy(1.0, 2.0), &MinusX, &plan).unwrap();
        // step 0: A = (-1, 2); f = (2, 8) -> inc 0.5 * 5 = 2.5
        //   X1 = X0 + 0.5 A + eps + 2 eps0 = (1.6, 0.2)
        // step 1: A = (-1.6, -0.2); f = (5.12, 0.08) -> inc 0.5 * 2.6 = 1.3
        //   X2 = X1 + 0.5 A + eps - 1 = (-0.5, -0.9)
        // terminal: mean(X2) = -0.7
        assert_eq!(rec.running.len(), 2);
        assert!((rec.running[0] - 2.5).abs() < 1e-12);
        assert!((rec.running[1] - 1.3).abs() < 1e-12);
        let x2 = rec.states[2].data();
        assert!((x2[0] + 0.5).abs() < 1e-12 && (x2[1] + 0.9).abs() < 1e-12);
        assert!((rec.terminal + 0.7).abs() < 1e-12);
        assert!((rec.total - 3.1).abs() < 1e-12);
    }

    #[test]
    fn training_mode_matches_evaluation() {
        let plan = NoisePlan::generate(3, 5, 1, 2, 0.5);
        let eval = simulate(&toy(0.7, 0.3), &MinusX, &plan).unwrap();
        let mut tape = Tape::new();
        let rec = rollout(&mut tape, &toy(0.7, 0.3), &MinusX, None, &plan, RolloutOptions::training()).unwrap();
        assert_eq!(tape.value(rec.cost.unwrap()).data()[0], rec.total);
        assert_eq!(rec.total, eval.total);
        assert_eq!(rec.states, eval.states);
    }

    #[test]
    fn noise_plan_regenerates_bitwise() {
        assert_eq!(NoisePlan::generate(9, 7, 2, 4, 0.01), NoisePlan::generate(9, 7, 2, 4, 0.01));
        assert_ne!(NoisePlan::generate(9, 7, 2, 4, 0.01), NoisePlan::generate(10, 7, 2, 4, 0.01));
    }

    #[test]
    fn particle_streams_survive_population_changes() {
        let big = NoisePlan::generate(4, 10, 2, 3, 0.1);
        let small = NoisePlan::generate(4, 6, 2, 3, 0.1);
        assert_eq!(big.truncated(6), small);
    }

    #[test]
    fn dirac_initial_law() {
        let plan = NoisePlan::generate(1, 4, 1, 1, 0.1);
        let b = sample_initial(&[Gaussian::dirac(2.5)], &[Gaussian::dirac(0.0)], &plan);
        assert!(b.states.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn systemic_initial_mean() {
        let spec = systemic_risk_spec(&SystemicRiskParams::default()).unwrap();
        let b = sample_initial_seeded(&spec, 1000, 17);
        assert!((b.mean()[0] - 1.0).abs() < 4.0 * 0.1 / 1000f64.sqrt());
    }

    #[test]
    fn euler_step_examples() {
        let plan = NoisePlan::generate(2, 3, 1, 1, 0.01);
        let batch = ParticleBatch {
            t: 0.0,
            states: Tensor::matrix(3, 1, vec![0.0, 1.0, -2.0]).unwrap(),
        };
        let zero = Tensor::zeros(&[3, 1]);
        assert_eq!(euler_step(&batch, &zero, 0.01, &[0.0], &[0.0], &plan, 0).unwrap().states, batch.states);
        let one = Tensor::filled(&[3, 1], 1.0);
        let moved = euler_step(&batch, &one, 0.01, &[0.0], &[0.0], &plan, 0).unwrap();
        for (a, b) in moved.states.data().iter().zip(batch.states.data()) {
            assert!((a - b - 0.01).abs() < 1e-15);
        }
        let shifted = euler_step(&batch, &zero, 0.01, &[0.0], &[1.0], &plan, 0).unwrap();
        let s = shifted.states.data();
        assert!((s[1] - s[0] - 1.0).abs() < 1e-12 && (s[2] - s[0] + 2.0).abs() < 1e-12);
        let huge = Tensor::filled(&[3, 1], f64::MAX);
        let err = euler_step(&batch, &huge, 10.0, &[0.0], &[0.0], &plan, 0).unwrap_err();
        assert_eq!(err, SimError::NonFinite { step: 0, particle: Some(0) });
    }

    #[test]
    fn permutation_and_duplication() {
        let plan = NoisePlan::generate(5, 3, 1, 2, 0.5);
        let p = plan.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.initial, vec![plan.initial[2], plan.initial[0], plan.initial[1]]);
        assert_eq!(p.idiosyncratic_at(1)[0], plan.idiosyncratic_at(1)[2]);
        assert!(plan.permuted(&[0, 0, 1]).is_err());
        let dup = plan.duplicated(2);
        assert_eq!(dup.particles, 6);
        assert_eq!(dup.initial[2], dup.initial[3]);
    }

    #[test]
    fn collapsed_systemic_population_costs_nothing() {
        let p = SystemicRiskParams {
            sigma: 0.0,
            mu0_std: 0.0,
            ..Default::default()
        };
        let spec = systemic_risk_spec(&p).unwrap();
        let plan = NoisePlan::for_problem(&spec, 4, 0);
        let rec = simulate(&spec, &ZeroPolicy { control_dim: 1 }, &plan).unwrap();
        assert_eq!(rec.total, 0.0);
    }

    #[test]
    fn trajectory_csv_layout() {
        let plan = plan_with(vec![1.0, -2.0], vec![0.0; 4], vec![0.0, 0.0]);
        let rec = simulate(&toy(0.0, 0.0), &MinusX, &plan).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_SCHEMA);
        assert_eq!(lines[1], "step,time,particle,x1,a1");
        assert_eq!(lines[2], "0,0,0,1,-1");
        assert_eq!(lines.len(), 2 + 3 * 2);
        assert!(lines.last().unwrap().ends_with(','));
    }
}
