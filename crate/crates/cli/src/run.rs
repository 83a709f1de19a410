//! Running one experiment, or a sweep of them, into an output directory.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mfc_core::embed::EmbeddingMethod;
use mfc_core::metrics::{
    moment_lipschitz_check, particle_rate_experiment, perturbation_gap_experiment, write_gap_csv, GapExperiment,
    MetricsError,
};
use mfc_core::nn::PolicyParams;
use mfc_core::problems::{ProblemError, ProblemSpec};
use mfc_core::sim::{simulate, write_trajectories, NeuralPolicy, NoisePlan, SimError};
use mfc_core::train::{train_with, write_train_log, TrainError, TrainObserver, TrainLogRow};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::artifacts::{write_atomic, write_manifest, DirLock, ManifestEntry, Sink};
use crate::config::{load, ConfigError, ExperimentConfig, OutputConfig, Overrides, TheoryKind};
use crate::slice::{control_slice, write_control_slice};

pub const RESOLVED_FILE: &str = "config.resolved";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const CONTROL_SLICE_FILE: &str = "control_slice.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output directory {} is in use (remove {} if no run is active)", .dir.display(), .dir.join(crate::artifacts::LOCK_FILE).display())]
    Locked { dir: PathBuf },
    #[error("{message}; checkpoint of iteration {checkpoint_iteration} kept in {}", .dir.display())]
    Diverged {
        message: String,
        checkpoint_iteration: usize,
        dir: PathBuf,
    },
    #[error("ablation finished with {failed} diverged run(s); see {}", .summary.display())]
    AblationDiverged { failed: usize, summary: PathBuf },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Diverged { .. } | Self::AblationDiverged { .. } => 3,
            Self::Locked { .. } => 4,
            _ => 1,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, fill: impl FnOnce(&mut Sink<'_>) -> io::Result<()>) -> Result<(), RunError> {
    write_atomic(path, fill).map_err(io_at(path))
}

fn lock(dir: &Path) -> Result<DirLock, RunError> {
    DirLock::acquire(dir).map_err(|e| match e.kind() {
        io::ErrorKind::AlreadyExists => RunError::Locked { dir: dir.to_path_buf() },
        _ => RunError::Io {
            path: dir.to_path_buf(),
            source: e,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub initial_validation: f64,
    pub final_validation: f64,
    pub log: Vec<TrainLogRow>,
    pub params: PolicyParams,
    pub manifest: Vec<ManifestEntry>,
}

/// Keeps `policy.ckpt` current so a crash or divergence leaves the latest
/// checkpoint behind.
struct CheckpointWriter {
    path: PathBuf,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, _iteration: usize, params: &PolicyParams) -> Result<(), TrainError> {
        let text = params.to_snapshot();
        write_atomic(&self.path, |w| w.write_all(text.as_bytes()))?;
        Ok(())
    }
}

fn write_log(dir: &Path, rows: &[TrainLogRow]) -> Result<(), RunError> {
    write_file(&dir.join(TRAIN_LOG_FILE), |w| write_train_log(rows, w))
}

/// Trains and writes every configured artifact into `outputs.dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    let dir = config.outputs.dir.clone().expect("resolved configs carry an output directory");
    let _lock = lock(&dir)?;
    let resolved = ExperimentConfig {
        outputs: OutputConfig {
            dir: None,
            ..config.outputs.clone()
        },
        ..config.clone()
    }
    .to_toml();
    write_file(&dir.join(RESOLVED_FILE), |w| w.write_all(resolved.as_bytes()))?;

    let problem = config.problem.spec()?;
    let mut observer = CheckpointWriter {
        path: dir.join(CHECKPOINT_FILE),
    };
    let outcome = match train_with(&problem, &config.train, &mut observer) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            iteration,
            reason,
            checkpoint_iteration,
            log,
            ..
        }) => {
            write_log(&dir, &log)?;
            write_manifest(&dir).map_err(io_at(&dir))?;
            return Err(RunError::Diverged {
                message: format!("training diverged at iteration {iteration}: {reason}"),
                checkpoint_iteration,
                dir,
            });
        }
        Err(TrainError::Io(source)) => {
            return Err(RunError::Io {
                path: observer.path,
                source,
            })
        }
        Err(e) => return Err(RunError::Train(e)),
    };
    write_log(&dir, &outcome.log)?;

    let policy = NeuralPolicy::new(&outcome.params, &config.train.embedding);
    if config.outputs.trajectories {
        let plan = &config.train.validation.plans(&problem, config.train.particles)[0];
        let record = simulate(&problem, &policy, plan)?;
        write_file(&dir.join(TRAJECTORIES_FILE), |w| write_trajectories(&record, w))?;
    }
    if config.outputs.control_slice {
        let plan = NoisePlan::for_problem(&problem, config.train.particles, config.slice.population_seed);
        let fixture = simulate(&problem, &policy, &plan)?;
        let analytic = config.problem.analytic()?;
        let rows = control_slice(&problem, &policy, &config.slice, &fixture.states, analytic.as_ref())?;
        write_file(&dir.join(CONTROL_SLICE_FILE), |w| write_control_slice(&rows, w))?;
    }
    for kind in &config.outputs.theory {
        write_theory(&dir, *kind, config, &problem, &outcome.params)?;
    }

    let manifest = write_manifest(&dir).map_err(io_at(&dir))?;
    Ok(RunSummary {
        dir,
        initial_validation: outcome.initial_validation,
        final_validation: outcome.final_validation(),
        log: outcome.log,
        params: outcome.params,
        manifest,
    })
}

fn write_theory(
    dir: &Path,
    kind: TheoryKind,
    config: &ExperimentConfig,
    problem: &ProblemSpec,
    params: &PolicyParams,
) -> Result<(), RunError> {
    let th = &config.theory;
    let path = dir.join(kind.file_name());
    match kind {
        TheoryKind::Rate => {
            let laws = problem.initial.clone();
            let sampler = move |rng: &mut ChaCha8Rng| -> Vec<f64> {
                laws.iter()
                    .map(|g| g.mean + g.std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let fit = particle_rate_experiment(&sampler, problem.state_dim, &th.rate_sizes, th.rate_trials, th.seed)?;
            write_file(&path, |w| fit.write_csv(w))
        }
        TheoryKind::Gap => {
            let policy = NeuralPolicy::new(params, &config.train.embedding);
            let setup = GapExperiment {
                particles: config.train.particles,
                seed: th.seed,
                ..Default::default()
            };
            let rows = perturbation_gap_experiment(problem, &policy, &th.gap_deltas, &setup)?;
            write_file(&path, |w| write_gap_csv(&rows, w))
        }
        TheoryKind::Moments => {
            let mut rows = Vec::new();
            for &(k, m) in &th.moment_orders {
                // support beyond the truncation so clipping is exercised
                let ratio = moment_lipschitz_check(m, k, 1.5 * m, th.moment_atoms, th.moment_trials, th.seed)?;
                rows.push((k, m, ratio, k as f64 * m.powi(k as i32 - 1)));
            }
            write_file(&path, |w| {
                writeln!(w, "# schema: moment_lipschitz v1")?;
                writeln!(w, "k,truncation,max_ratio,bound")?;
                for (k, m, r, b) in &rows {
                    writeln!(w, "{k},{m},{},{b}", r.map(|v| v.to_string()).unwrap_or_default())?;
                }
                Ok(())
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub run: String,
    pub embedding: EmbeddingMethod,
    pub nbin: usize,
    pub lr: f64,
    pub seed: u64,
    /// Absent when the run diverged.
    pub final_validation: Option<f64>,
}

/// One run per combination of the swept values. Every run is resolved
/// afresh from the same file and flags plus its own values, so presets that
/// depend on the embedding follow it.
pub fn ablate(path: Option<&Path>, overrides: &Overrides) -> Result<Vec<AblationRow>, RunError> {
    let base = load(path, overrides)?;
    let sweep = &base.ablation;
    if sweep.is_empty() {
        return Err(ConfigError::Invalid {
            origin: path.map_or("<flags>".into(), |p| p.display().to_string()),
            key: "ablation".into(),
            line: None,
            message: "nothing to sweep; list values under [ablation] or pass --sweep-* flags".into(),
        }
        .into());
    }
    let root = base.outputs.dir.clone().expect("resolved configs carry an output directory");
    let _lock = lock(&root)?;

    fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
        if values.is_empty() {
            vec![None]
        } else {
            values.iter().cloned().map(Some).collect()
        }
    }
    let mut variants = Vec::new();
    for m in axis(&sweep.embedding) {
        for n in axis(&sweep.nbin) {
            for lr in axis(&sweep.lr) {
                for s in axis(&sweep.seed) {
                    let mut parts = Vec::new();
                    if let Some(m) = m {
                        parts.push(m.name().to_string());
                    }
                    if let Some(n) = n {
                        parts.push(format!("nbin{n}"));
                    }
                    if let Some(lr) = lr {
                        parts.push(format!("lr{lr}"));
                    }
                    if let Some(s) = s {
                        parts.push(format!("seed{s}"));
                    }
                    let name = parts.join("_");
                    let ov = Overrides {
                        embedding: m.or(overrides.embedding),
                        nbin: n.or(overrides.nbin),
                        lr: lr.or(overrides.lr),
                        seed: s.or(overrides.seed),
                        out: Some(root.join(&name)),
                        sweep_embedding: Some(vec![]),
                        sweep_nbin: Some(vec![]),
                        sweep_lr: Some(vec![]),
                        sweep_seed: Some(vec![]),
                        ..overrides.clone()
                    };
                    variants.push((name, ov));
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (name, ov) in variants {
        let config = load(path, &ov)?;
        let final_validation = match run(&config) {
            Ok(summary) => Some(summary.final_validation),
            Err(RunError::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        rows.push(AblationRow {
            run: name,
            embedding: config.train.embedding.method,
            nbin: config.train.embedding.nbin,
            lr: config.train.lr.at(0),
            seed: config.train.seed,
            final_validation,
        });
    }

    let summary = root.join(ABLATION_FILE);
    write_file(&summary, |w| {
        writeln!(w, "# schema: ablation v1")?;
        writeln!(w, "run,embedding,nbin,lr,seed,final_val_cost,status")?;
        for r in &rows {
            let (cost, status) = match r.final_validation {
                Some(v) => (v.to_string(), "ok"),
                None => (String::new(), "diverged"),
            };
            writeln!(w, "{},{},{},{},{},{cost},{status}", r.run, r.embedding, r.nbin, r.lr, r.seed)?;
        }
        Ok(())
    })?;
    write_manifest(&root).map_err(io_at(&root))?;
    let failed = rows.iter().filter(|r| r.final_validation.is_none()).count();
    if failed > 0 {
        return Err(RunError::AblationDiverged { failed, summary });
    }
    Ok(rows)
}
