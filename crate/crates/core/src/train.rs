//! Stochastic gradient training of population-dependent policies.
//!
//! Every iteration simulates one fresh population on the tape, takes the
//! averaged sampled cost as the loss, backpropagates through the whole
//! trajectory and updates all network weights with Adam (or plain SGD).

use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::embed::{policy_spec, EmbedError, EmbeddingConfig, EmbeddingMethod};
use crate::nn::{init_params, sgd_step, AdamConfig, AdamState, NetConfig, NnError, PolicyParams};
use crate::problems::ProblemSpec;
use crate::sim::{rollout, simulate, NeuralPolicy, NoisePlan, Policy, RolloutOptions, RolloutRecord, SimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: {reason}; last checkpoint is from iteration {checkpoint_iteration}")]
    Diverged {
        iteration: usize,
        reason: String,
        checkpoint_iteration: usize,
        checkpoint: Box<PolicyParams>,
        log: Vec<TrainLogRow>,
    },
    #[error("rollout was not recorded for training")]
    NotTaped,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("writing training output: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

/// Constant rate or one rate per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl LearningRate {
    pub fn at(&self, iteration: usize) -> f64 {
        match self {
            Self::Constant(lr) => *lr,
            Self::Schedule(s) => s[iteration.min(s.len() - 1)],
        }
    }
}

impl Default for LearningRate {
    fn default() -> Self {
        Self::Constant(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    pub populations: usize,
    /// Population size; the training size when absent.
    pub size: Option<usize>,
    pub seed: u64,
    /// Validate every this many iterations (and at the first and last).
    pub every: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            populations: 1,
            size: None,
            seed: 20_231_017,
            every: 100,
        }
    }
}

impl ValidationSpec {
    /// Noise plans of the validation populations; disjoint from training
    /// plans because they are derived under a different tag.
    pub fn plans(&self, problem: &ProblemSpec, particles: usize) -> Vec<NoisePlan> {
        let n = self.size.unwrap_or(particles);
        (0..self.populations)
            .map(|p| NoisePlan::for_problem(problem, n, derive_seed(self.seed, SeedTag::Validation, p as u64)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRate,
    pub particles: usize,
    pub seed: u64,
    pub validation: ValidationSpec,
    pub embedding: EmbeddingConfig,
    pub net: NetConfig,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    /// Record wall-clock time per logged row; off keeps logs reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRate::default(),
            particles: 200,
            seed: 0,
            validation: ValidationSpec::default(),
            embedding: EmbeddingConfig::default(),
            net: NetConfig::default(),
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            checkpoint_every: 100,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.particles == 0 || self.validation.size == Some(0) {
            return bad("population sizes must be >= 1".into());
        }
        if self.validation.populations == 0 || self.validation.every == 0 || self.checkpoint_every == 0 {
            return bad("validation populations and cadences must be >= 1".into());
        }
        let rates: &[f64] = match &self.lr {
            LearningRate::Constant(lr) => std::slice::from_ref(lr),
            LearningRate::Schedule(s) if s.is_empty() => return bad("empty learning-rate schedule".into()),
            LearningRate::Schedule(s) => s,
        };
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and >= 0".into());
        }
        if self.embedding.method == EmbeddingMethod::Emp && self.validation.size.is_some_and(|n| n != self.particles) {
            return bad("a dense empirical embedding fixes the population size; validation size must equal training size".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum SeedTag {
    Init = 0,
    Train = 1,
    Validation = 2,
}

/// SplitMix64 finaliser over `(base, tag, index)`.
fn derive_seed(base: u64, tag: SeedTag, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((tag as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the training population of iteration `k` (0-based).
pub fn training_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, SeedTag::Train, k as u64)
}

pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, SeedTag::Init, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// 1-based; row `k` reports the population sampled at iteration `k`.
    pub iter: usize,
    pub train_cost: f64,
    /// Validation cost after the update of this iteration, when validated.
    pub val_cost: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: Option<f64>,
}

pub const TRAIN_LOG_SCHEMA: &str = "# schema: train_log v1";
pub const TRAIN_LOG_HEADER: &str = "iter,train_cost,val_cost,grad_norm,wall_ms";

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iter,
            self.train_cost,
            opt(self.val_cost),
            self.grad_norm,
            opt(self.wall_ms)
        )
    }
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "{TRAIN_LOG_SCHEMA}")?;
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Receives log rows and checkpoints as training progresses.
pub trait TrainObserver {
    fn on_row(&mut self, _row: &TrainLogRow) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _params: &PolicyParams) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<TrainLogRow>,
    /// Validation cost of the initial parameters.
    pub initial_validation: f64,
}

impl TrainOutcome {
    pub fn final_validation(&self) -> f64 {
        self.log.iter().rev().find_map(|r| r.val_cost).unwrap_or(self.initial_validation)
    }
}

/// The averaged sampled cost of a rollout recorded for training.
pub fn sampled_cost(record: &RolloutRecord) -> Result<Var, TrainError> {
    record.cost.ok_or(TrainError::NotTaped)
}

/// Mean sampled cost of `policy` over the validation populations.
pub fn evaluate(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    validation: &ValidationSpec,
    particles: usize,
) -> Result<f64, TrainError> {
    let plans = validation.plans(problem, particles);
    let mut total = 0.0;
    for plan in &plans {
        total += simulate(problem, policy, plan)?.total;
    }
    Ok(total / plans.len() as f64)
}

pub fn initial_params(problem: &ProblemSpec, config: &TrainConfig) -> Result<PolicyParams, TrainError> {
    let spec = policy_spec(
        &config.embedding,
        &config.net,
        problem.state_dim,
        problem.control_dim,
        config.particles,
    )?;
    Ok(init_params(&spec, init_seed(config.seed))?)
}

pub fn train(problem: &ProblemSpec, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(problem, config, &mut ())
}

/// Training with the population input removed: controls see `(t, x)` only.
pub fn nodist_baseline(problem: &ProblemSpec, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut cfg = config.clone();
    cfg.embedding.method = EmbeddingMethod::Nodist;
    train(problem, &cfg)
}

pub fn train_with(
    problem: &ProblemSpec,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let params = initial_params(problem, config)?;
    train_from(problem, config, params, observer)
}

/// Continues training from given parameters.
pub fn train_from(
    problem: &ProblemSpec,
    config: &TrainConfig,
    mut params: PolicyParams,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let validate = |p: &PolicyParams| {
        evaluate(
            problem,
            &NeuralPolicy::new(p, &config.embedding),
            &config.validation,
            config.particles,
        )
    };
    let initial_validation = validate(&params)?;
    let mut adam = AdamState::new(config.adam, &params.blocks);
    let mut checkpoint = (0usize, params.clone());
    observer.on_checkpoint(0, &params)?;
    let mut log = Vec::with_capacity(config.iterations);

    for k in 0..config.iterations {
        let iter = k + 1;
        let diverged = |reason: String, checkpoint: &(usize, PolicyParams), log: &Vec<TrainLogRow>| TrainError::Diverged {
            iteration: iter,
            reason,
            checkpoint_iteration: checkpoint.0,
            checkpoint: Box::new(checkpoint.1.clone()),
            log: log.clone(),
        };
        let plan = NoisePlan::for_problem(problem, config.particles, training_seed(config.seed, k));
        let step = (|| -> Result<(f64, Vec<_>), TrainError> {
            let mut tape = Tape::new();
            let policy = NeuralPolicy::new(&params, &config.embedding);
            let bound = params.bind(&mut tape)?;
            let record = rollout(&mut tape, problem, &policy, Some(&bound), &plan, RolloutOptions::training())?;
            let cost = sampled_cost(&record)?;
            let grads = tape.backward(cost)?;
            Ok((record.total, params.gradients(&bound, &grads)))
        })();
        let (train_cost, grads) = match step {
            Ok(v) => v,
            Err(TrainError::Sim(e @ SimError::NonFinite { .. })) => return Err(diverged(e.to_string(), &checkpoint, &log)),
            Err(TrainError::Autodiff(e @ AutodiffError::NonFinite { .. })) => {
                return Err(diverged(e.to_string(), &checkpoint, &log))
            }
            Err(e) => return Err(e),
        };
        if !train_cost.is_finite() {
            return Err(diverged("non-finite training cost".into(), &checkpoint, &log));
        }
        let grad_norm = grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
        let lr = config.lr.at(k);
        let update = match config.optimizer {
            Optimizer::Adam => adam.step(&mut params.blocks, &grads, lr),
            Optimizer::Sgd => sgd_step(&mut params.blocks, &grads, lr),
        };
        match update {
            Ok(()) => {}
            Err(e @ NnError::NonFiniteGradient { .. }) => return Err(diverged(e.to_string(), &checkpoint, &log)),
            Err(e) => return Err(e.into()),
        }
        if params.blocks.iter().any(|b| !b.value.is_finite()) {
            return Err(diverged("non-finite parameters after update".into(), &checkpoint, &log));
        }

        let val_cost = if iter == 1 || iter % config.validation.every == 0 || iter == config.iterations {
            match validate(&params) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => return Err(diverged("non-finite validation cost".into(), &checkpoint, &log)),
                Err(TrainError::Sim(e @ SimError::NonFinite { .. })) => {
                    return Err(diverged(e.to_string(), &checkpoint, &log))
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let row = TrainLogRow {
            iter,
            train_cost,
            val_cost,
            grad_norm,
            wall_ms: config.timing.then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        observer.on_row(&row)?;
        log.push(row);
        if iter % config.checkpoint_every == 0 || iter == config.iterations {
            checkpoint = (iter, params.clone());
            observer.on_checkpoint(iter, &params)?;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        initial_validation,
    })
}
