//! Experiment configuration: presets, TOML files and flag overrides.
//!
//! A run is described by layered tables. The preset for the chosen
//! `(problem, embedding, scale)` comes first, the user's file is merged on
//! top, then command-line overrides. The merged table is what gets written
//! to `config.resolved`, so reading that file back reproduces the run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mfc_core::embed::{EmbedError, EmbeddingConfig, EmbeddingMethod};
use mfc_core::nn::NetConfig;
use mfc_core::problems::{
    crowd_motion_spec, price_impact_spec, systemic_risk_analytic, systemic_risk_spec, CrowdMotionParams,
    PriceImpactParams, ProblemError, ProblemSpec, RiccatiSolution, SystemicRiskParams,
};
use mfc_core::train::{LearningRate, TrainConfig, ValidationSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

/// Output root used when neither the config nor `--out` names a directory.
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Parse or type error, already carrying line and column.
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}{line}: `{key}`: {message}", line = .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        origin: String,
        key: String,
        line: Option<usize>,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    SystemicRisk,
    PriceImpact,
    CrowdMotion,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 3] = [Self::SystemicRisk, Self::PriceImpact, Self::CrowdMotion];

    pub fn name(self) -> &'static str {
        match self {
            Self::SystemicRisk => "systemic_risk",
            Self::PriceImpact => "price_impact",
            Self::CrowdMotion => "crowd_motion",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Self::SystemicRisk => 1,
            Self::PriceImpact | Self::CrowdMotion => 2,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            format!("unknown problem `{s}`; valid names: {}", names.join(", "))
        })
    }
}

/// Desk runs fit a laptop; full runs use the published network sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(format!("unknown scale `{s}`; valid names: desk, full")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub problem: ProblemKind,
    pub scale: Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryKind {
    /// Sample-size convergence of the empirical measure of `mu_0`.
    Rate,
    /// Cost gap of the trained policy under calibrated measure noise.
    Gap,
    /// Lipschitz ratios of clipped moments.
    Moments,
}

impl TheoryKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Rate => "theory_rate.csv",
            Self::Gap => "theory_gap.csv",
            Self::Moments => "theory_moments.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub trajectories: bool,
    pub control_slice: bool,
    pub theory: Vec<TheoryKind>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            trajectories: true,
            control_slice: true,
            theory: Vec::new(),
        }
    }
}

/// State grid and times at which the trained control is tabulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    pub times: Vec<f64>,
    /// Grid bounds, one entry or one per state dimension.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid points per dimension.
    pub points: usize,
    /// Bounds are offsets from the fixture population mean.
    pub relative: bool,
    /// Seed of the noise that produces the fixture population.
    pub population_seed: u64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            times: vec![0.25, 0.5, 0.75],
            lower: vec![-0.5],
            upper: vec![0.5],
            points: 21,
            relative: true,
            population_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub rate_sizes: Vec<usize>,
    pub rate_trials: usize,
    pub gap_deltas: Vec<f64>,
    /// Clipped-moment `(k, M)` pairs.
    pub moment_orders: Vec<(usize, f64)>,
    pub moment_trials: usize,
    pub moment_atoms: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            rate_sizes: vec![64, 256, 1024],
            rate_trials: 100,
            gap_deltas: vec![0.0, 0.01, 0.02, 0.04, 0.08],
            moment_orders: vec![(1, 2.0), (2, 2.0), (3, 1.0)],
            moment_trials: 1000,
            moment_atoms: 8,
            seed: 0,
        }
    }
}

/// Lists of values to sweep in `mfc ablate`; empty lists are not varied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub embedding: Vec<EmbeddingMethod>,
    pub nbin: Vec<usize>,
    pub lr: Vec<f64>,
    pub seed: Vec<u64>,
}

impl AblationConfig {
    pub fn is_empty(&self) -> bool {
        self.embedding.is_empty() && self.nbin.is_empty() && self.lr.is_empty() && self.seed.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemParams {
    SystemicRisk(SystemicRiskParams),
    PriceImpact(PriceImpactParams),
    CrowdMotion(CrowdMotionParams),
}

impl ProblemParams {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Self::SystemicRisk(_) => ProblemKind::SystemicRisk,
            Self::PriceImpact(_) => ProblemKind::PriceImpact,
            Self::CrowdMotion(_) => ProblemKind::CrowdMotion,
        }
    }

    pub fn spec(&self) -> Result<ProblemSpec, ProblemError> {
        match self {
            Self::SystemicRisk(p) => systemic_risk_spec(p),
            Self::PriceImpact(p) => price_impact_spec(p),
            Self::CrowdMotion(p) => crowd_motion_spec(p),
        }
    }

    /// Closed-form optimal control, where the problem has one.
    pub fn analytic(&self) -> Result<Option<RiccatiSolution>, ProblemError> {
        match self {
            Self::SystemicRisk(p) => systemic_risk_analytic(p).map(Some),
            _ => Ok(None),
        }
    }

    fn to_table(&self) -> Table {
        let v = match self {
            Self::SystemicRisk(p) => Value::try_from(p),
            Self::PriceImpact(p) => Value::try_from(p),
            Self::CrowdMotion(p) => Value::try_from(p),
        };
        match v.expect("problem parameters serialize") {
            Value::Table(t) => t,
            _ => unreachable!("structs serialize to tables"),
        }
    }

    fn from_table(kind: ProblemKind, table: Table) -> Result<Self, toml::de::Error> {
        let v = Value::Table(table);
        Ok(match kind {
            ProblemKind::SystemicRisk => Self::SystemicRisk(v.try_into()?),
            ProblemKind::PriceImpact => Self::PriceImpact(v.try_into()?),
            ProblemKind::CrowdMotion => Self::CrowdMotion(v.try_into()?),
        })
    }

    fn default_for(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::SystemicRisk => Self::SystemicRisk(Default::default()),
            ProblemKind::PriceImpact => Self::PriceImpact(Default::default()),
            ProblemKind::CrowdMotion => Self::CrowdMotion(Default::default()),
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub problem: ProblemParams,
    pub train: TrainConfig,
    pub outputs: OutputConfig,
    pub slice: SliceConfig,
    pub theory: TheoryConfig,
    pub ablation: AblationConfig,
}

/// On-disk layout, with the problem table left untyped until the problem
/// kind is known.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentSection,
    problem: Table,
    train: TrainConfig,
    outputs: OutputConfig,
    slice: SliceConfig,
    theory: TheoryConfig,
    #[serde(default)]
    ablation: AblationConfig,
}

/// Sparse mirror of the file layout used to type-check a user file with
/// source positions.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct FileShape<P> {
    experiment: Option<ExperimentSection>,
    problem: Option<P>,
    train: Option<TrainConfig>,
    outputs: Option<OutputConfig>,
    slice: Option<SliceConfig>,
    theory: Option<TheoryConfig>,
    ablation: Option<AblationConfig>,
}

/// Command-line overrides, applied after the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub problem: Option<ProblemKind>,
    pub scale: Option<Scale>,
    pub embedding: Option<EmbeddingMethod>,
    pub nbin: Option<usize>,
    pub nmom: Option<usize>,
    pub particles: Option<usize>,
    pub iters: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Root for the default output directory.
    pub out_root: Option<PathBuf>,
    pub sweep_embedding: Option<Vec<EmbeddingMethod>>,
    pub sweep_nbin: Option<Vec<usize>>,
    pub sweep_lr: Option<Vec<f64>>,
    pub sweep_seed: Option<Vec<u64>>,
}

impl Overrides {
    fn table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |path: &str, v: Value| set_path(&mut t, path, v);
        if let Some(p) = self.problem {
            put("experiment.problem", p.name().into());
        }
        if let Some(s) = self.scale {
            put("experiment.scale", Value::try_from(s).expect("enum serializes"));
        }
        if let Some(m) = self.embedding {
            put("train.embedding.method", m.name().into());
        }
        if let Some(n) = self.nbin {
            put("train.embedding.nbin", (n as i64).into());
        }
        if let Some(n) = self.nmom {
            put("train.embedding.nmom", (n as i64).into());
        }
        if let Some(n) = self.particles {
            put("train.particles", (n as i64).into());
        }
        if let Some(n) = self.iters {
            put("train.iterations", (n as i64).into());
        }
        if let Some(lr) = self.lr {
            put("train.lr", lr.into());
        }
        if let Some(s) = self.seed {
            put("train.seed", (s as i64).into());
        }
        if let Some(d) = &self.out {
            put("outputs.dir", d.display().to_string().into());
        }
        if let Some(v) = &self.sweep_embedding {
            put("ablation.embedding", v.iter().map(|m| Value::from(m.name())).collect::<Vec<_>>().into());
        }
        if let Some(v) = &self.sweep_nbin {
            put("ablation.nbin", v.iter().map(|&n| Value::from(n as i64)).collect::<Vec<_>>().into());
        }
        if let Some(v) = &self.sweep_lr {
            put("ablation.lr", v.clone().into());
        }
        if let Some(v) = &self.sweep_seed {
            put("ablation.seed", v.iter().map(|&n| Value::from(n as i64)).collect::<Vec<_>>().into());
        }
        t
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("non-empty path");
    let mut cur = table;
    for k in keys {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.to_string(), value);
}

fn get_path<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut keys = path.split('.');
    let mut v = table.get(keys.next()?)?;
    for k in keys {
        v = v.as_table()?.get(k)?;
    }
    Some(v)
}

/// Recursive merge; tables merge key by key, everything else is replaced.
pub fn deep_merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Default histogram hypercube and bin count per problem and architecture.
fn histogram_preset(problem: ProblemKind, method: EmbeddingMethod) -> (usize, Vec<f64>, Vec<f64>) {
    let cnn = method == EmbeddingMethod::HistCnn;
    match problem {
        ProblemKind::SystemicRisk => (if cnn { 32 } else { 5 }, vec![1.0], vec![4.0]),
        ProblemKind::PriceImpact => (16, vec![1.0, 2.0], vec![8.0]),
        ProblemKind::CrowdMotion => (if cnn { 16 } else { 4 }, vec![1.0, 1.0], vec![6.0]),
    }
}

/// The shipped preset for one problem, embedding and scale.
pub fn preset(problem: ProblemKind, method: EmbeddingMethod, scale: Scale) -> ExperimentConfig {
    let (nbin, center, side) = histogram_preset(problem, method);
    let (width, iterations) = match scale {
        Scale::Desk => (32, 2000),
        Scale::Full => (100, 10_000),
    };
    let particles = match (scale, problem) {
        (Scale::Desk, _) => 200,
        (Scale::Full, ProblemKind::SystemicRisk) => 1000,
        (Scale::Full, _) => 800,
    };
    let populations = if problem == ProblemKind::SystemicRisk { 1 } else { 5 };
    let train = TrainConfig {
        iterations,
        lr: LearningRate::Constant(1e-3),
        particles,
        seed: 0,
        validation: ValidationSpec {
            populations,
            every: 50,
            ..Default::default()
        },
        embedding: EmbeddingConfig {
            method,
            nbin,
            center,
            side,
            ..Default::default()
        },
        net: NetConfig {
            hidden: vec![width; 4],
            cnn_dense: width,
            ..Default::default()
        },
        checkpoint_every: 100,
        ..Default::default()
    };
    let (slice, theory) = match problem {
        ProblemKind::SystemicRisk => (SliceConfig::default(), TheoryConfig::default()),
        _ => (
            SliceConfig {
                times: vec![0.0, 0.5, 0.9],
                lower: vec![-1.0],
                upper: vec![1.0],
                points: 11,
                ..Default::default()
            },
            TheoryConfig {
                // the 2-d transport solver is exact but cubic; keep 20 N <= 512
                rate_sizes: vec![4, 8, 16, 25],
                ..Default::default()
            },
        ),
    };
    ExperimentConfig {
        experiment: ExperimentSection { problem, scale },
        problem: ProblemParams::default_for(problem),
        train,
        outputs: OutputConfig::default(),
        slice,
        theory,
        ablation: AblationConfig::default(),
    }
}

impl ExperimentConfig {
    fn to_raw(&self) -> RawConfig {
        RawConfig {
            experiment: self.experiment.clone(),
            problem: self.problem.to_table(),
            train: self.train.clone(),
            outputs: self.outputs.clone(),
            slice: self.slice.clone(),
            theory: self.theory.clone(),
            ablation: self.ablation.clone(),
        }
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self.to_raw()).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!(),
        }
    }

    /// The `config.resolved` text.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("config serializes")
    }

    /// Output directory, with `root` standing in when none is configured.
    pub fn output_dir(&self, root: &Path) -> PathBuf {
        self.outputs.dir.clone().unwrap_or_else(|| root.join(self.run_name()))
    }

    /// `<problem>-<embedding>-seed<seed>`.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-seed{}",
            self.problem.kind(),
            self.train.embedding.method,
            self.train.seed
        )
    }

    /// Checks that every part fits together, naming the offending key.
    pub fn check(&self) -> Result<(), (String, String)> {
        let err = |key: &str, m: String| Err((key.to_string(), m));
        let spec = match self.problem.spec() {
            Ok(s) => s,
            Err(e) => return err("problem", e.to_string()),
        };
        if let Err(e) = self.problem.analytic() {
            return err("problem", e.to_string());
        }
        let d = spec.state_dim;
        if let Err(e) = self.train.embedding.validate(d) {
            let key = match e {
                EmbedError::Incompatible { .. } => "train.embedding.method",
                _ => "train.embedding",
            };
            return err(key, e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return err("train", e.to_string());
        }
        if let Err(e) = mfc_core::train::initial_params(&spec, &self.train) {
            return err("train.net", e.to_string());
        }
        let s = &self.slice;
        if s.points == 0 {
            return err("slice.points", "need at least one grid point".into());
        }
        for (key, v) in [("slice.lower", &s.lower), ("slice.upper", &s.upper)] {
            if v.len() != 1 && v.len() != d {
                return err(key, format!("expected 1 or {d} entries, got {}", v.len()));
            }
        }
        if s.times.iter().any(|t| !(0.0..=spec.horizon).contains(t)) {
            return err("slice.times", format!("times must lie in [0, {}]", spec.horizon));
        }
        let th = &self.theory;
        if self.outputs.theory.contains(&TheoryKind::Rate) {
            if th.rate_trials < 2 || th.rate_sizes.is_empty() || th.rate_sizes.windows(2).any(|w| w[0] >= w[1]) {
                return err("theory.rate_sizes", "need strictly increasing sizes and >= 2 trials".into());
            }
            let largest = th.rate_sizes.last().copied().unwrap_or(0) * mfc_core::metrics::REFERENCE_FACTOR;
            if d > 1 && largest > mfc_core::metrics::MAX_ASSIGNMENT_SIZE {
                return err(
                    "theory.rate_sizes",
                    format!(
                        "reference samples of {largest} points exceed the {}-point transport limit in {d} dimensions",
                        mfc_core::metrics::MAX_ASSIGNMENT_SIZE
                    ),
                );
            }
        }
        if th.gap_deltas.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return err("theory.gap_deltas", "deltas must be finite and >= 0".into());
        }
        if th.moment_orders.iter().any(|(k, m)| *k == 0 || !(*m > 0.0)) {
            return err("theory.moment_orders", "need k >= 1 and M > 0".into());
        }
        if self.outputs.theory.contains(&TheoryKind::Gap) && d > 1 && self.train.particles > mfc_core::metrics::MAX_ASSIGNMENT_SIZE {
            return err(
                "outputs.theory",
                format!(
                    "the perturbation experiment in {d} dimensions supports at most {} particles",
                    mfc_core::metrics::MAX_ASSIGNMENT_SIZE
                ),
            );
        }
        Ok(())
    }
}

/// Input layers of a resolution: an optional file and the overrides.
pub struct Sources<'a> {
    /// `(origin label, text)` of the config file.
    pub file: Option<(String, &'a str)>,
    pub overrides: &'a Overrides,
}

/// Reads `path` and resolves it with `overrides`.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.to_path_buf(),
            source,
        })?),
        None => None,
    };
    resolve(Sources {
        file: path.zip(text.as_deref()).map(|(p, t)| (p.display().to_string(), t)),
        overrides,
    })
}

fn parse_err(origin: &str, e: impl fmt::Display) -> ConfigError {
    ConfigError::Parse {
        origin: origin.to_string(),
        message: e.to_string().trim_end().to_string(),
    }
}

fn check_shape<P: DeserializeOwned>(origin: &str, text: &str) -> Result<(), ConfigError> {
    toml::from_str::<FileShape<P>>(text).map(|_| ()).map_err(|e| parse_err(origin, e))
}

/// String value at `path`, parsed with `FromStr`, anchored on failure.
fn pick<T: FromStr<Err = String>>(
    origin: &str,
    text: &str,
    table: &Table,
    path: &str,
) -> Result<Option<T>, ConfigError> {
    match get_path(table, path) {
        None => Ok(None),
        Some(Value::String(s)) => s.parse().map(Some).map_err(|message| ConfigError::Invalid {
            origin: origin.to_string(),
            key: path.to_string(),
            line: locate(text, path),
            message,
        }),
        Some(other) => Err(ConfigError::Invalid {
            origin: origin.to_string(),
            key: path.to_string(),
            line: locate(text, path),
            message: format!("expected a string, found {}", other.type_str()),
        }),
    }
}

pub fn resolve(sources: Sources<'_>) -> Result<ExperimentConfig, ConfigError> {
    let (origin, text) = sources.file.clone().unwrap_or_else(|| ("<flags>".into(), ""));
    let user: Table = toml::from_str(text).map_err(|e| parse_err(&origin, e))?;
    let ov = sources.overrides;

    let problem = match ov.problem {
        Some(p) => p,
        None => pick(&origin, text, &user, "experiment.problem")?.unwrap_or_default(),
    };
    let method = match ov.embedding {
        Some(m) => m,
        None => pick(&origin, text, &user, "train.embedding.method")?
            .unwrap_or(EmbeddingConfig::default().method),
    };
    let scale = match ov.scale {
        Some(s) => s,
        None => pick(&origin, text, &user, "experiment.scale")?.unwrap_or_default(),
    };
    match problem {
        ProblemKind::SystemicRisk => check_shape::<SystemicRiskParams>(&origin, text)?,
        ProblemKind::PriceImpact => check_shape::<PriceImpactParams>(&origin, text)?,
        ProblemKind::CrowdMotion => check_shape::<CrowdMotionParams>(&origin, text)?,
    }

    let mut merged = preset(problem, method, scale).to_table();
    deep_merge(&mut merged, user);
    deep_merge(&mut merged, ov.table());
    let raw: RawConfig = Value::Table(merged).try_into().map_err(|e| parse_err(&origin, e))?;
    let params = ProblemParams::from_table(problem, raw.problem).map_err(|e| parse_err(&origin, e))?;
    let mut config = ExperimentConfig {
        experiment: raw.experiment,
        problem: params,
        train: raw.train,
        outputs: raw.outputs,
        slice: raw.slice,
        theory: raw.theory,
        ablation: raw.ablation,
    };
    if config.outputs.dir.is_none() {
        let root = ov.out_root.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        config.outputs.dir = Some(root.join(config.run_name()));
    }
    config.check().map_err(|(key, message)| ConfigError::Invalid {
        line: locate(text, &key),
        origin,
        key,
        message,
    })?;
    Ok(config)
}

/// 1-based line of the key `path` in a TOML source, or of its nearest
/// enclosing table when the key itself is not written out.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let mut parts: Vec<&str> = path.split('.').collect();
    while !parts.is_empty() {
        if let Some(line) = locate_exact(text, &parts) {
            return Some(line);
        }
        parts.pop();
    }
    None
}

fn locate_exact(text: &str, path: &[&str]) -> Option<usize> {
    let mut section: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let name = header.trim_start_matches('[').split(']').next().unwrap_or("");
            section = name.split('.').map(|s| s.trim().to_string()).collect();
            if section == path {
                return Some(i + 1);
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else {
            continue;
        };
        let mut full = section.clone();
        full.extend(key.split('.').map(|s| s.trim().trim_matches('"').to_string()));
        if full == path {
            return Some(i + 1);
        }
    }
    None
}
