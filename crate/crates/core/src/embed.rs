//! Finite-dimensional summaries of a particle population and the networks
//! that embed them.
//!
//! Three summaries are available: the raw empirical measure, clipped
//! moments, and a histogram over a hypercube. The histogram is piecewise
//! constant in the particle states, so it enters the tape as a constant leaf
//! and gradients reach only the embedding weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sorted_column_sums, AutodiffError, Tape, Tensor, Var};
use crate::nn::{symmetric_forward, Architecture, BoundPolicy, EmbeddingNetSpec, InputShape, NetConfig, NnError, PolicySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("summary `{summary}` cannot feed a {architecture} embedding network")]
    Incompatible {
        summary: &'static str,
        architecture: &'static str,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The summary map applied to the population before embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    Empirical,
    Moments,
    Histogram,
}

impl SummaryKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Empirical => "empirical",
            Self::Moments => "moments",
            Self::Histogram => "histogram",
        }
    }
}

/// Summary/architecture pairs, plus the population-blind baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMethod {
    /// Flattened particle states into a dense network.
    Emp,
    /// Clipped moments into a dense network.
    Mom,
    /// Histogram into a dense network.
    Hist,
    /// Histogram into a convolutional network.
    HistCnn,
    /// Particle states into a permutation-invariant network.
    EmpSym,
    /// No population input; controls depend on `(t, x)` only.
    Nodist,
}

impl EmbeddingMethod {
    pub const ALL: [EmbeddingMethod; 6] = [
        Self::Emp,
        Self::Mom,
        Self::Hist,
        Self::HistCnn,
        Self::EmpSym,
        Self::Nodist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Emp => "emp",
            Self::Mom => "mom",
            Self::Hist => "hist",
            Self::HistCnn => "hist_cnn",
            Self::EmpSym => "emp_sym",
            Self::Nodist => "nodist",
        }
    }

    pub fn summary(self) -> Option<SummaryKind> {
        match self {
            Self::Emp | Self::EmpSym => Some(SummaryKind::Empirical),
            Self::Mom => Some(SummaryKind::Moments),
            Self::Hist | Self::HistCnn => Some(SummaryKind::Histogram),
            Self::Nodist => None,
        }
    }

    pub fn architecture(self) -> &'static str {
        match self {
            Self::HistCnn => "cnn",
            Self::EmpSym => "symmetric",
            Self::Nodist => "none",
            _ => "ffnn",
        }
    }
}

impl fmt::Display for EmbeddingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            format!("unknown embedding `{s}`; valid names: {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub method: EmbeddingMethod,
    pub nmom: usize,
    /// Bins per dimension.
    pub nbin: usize,
    /// Hypercube center, one entry or one per dimension.
    pub center: Vec<f64>,
    /// Hypercube side length, one entry or one per dimension.
    pub side: Vec<f64>,
    /// Moments are taken of `clip(x, -truncation, truncation)`.
    pub truncation: f64,
    pub normalize_counts: bool,
    /// Extra histogram cell for points outside the hypercube; when off,
    /// outside points are clamped into the edge bins.
    pub overflow_bin: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            method: EmbeddingMethod::Mom,
            nmom: 1,
            nbin: 5,
            center: vec![0.0],
            side: vec![8.0],
            truncation: 10.0,
            normalize_counts: true,
            overflow_bin: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, state_dim: usize) -> Result<(), EmbedError> {
        let bad = |m: String| Err(EmbedError::InvalidConfig(m));
        if self.nmom == 0 {
            return bad("nmom must be >= 1".into());
        }
        if self.nbin == 0 {
            return bad("nbin must be >= 1".into());
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation level {} must be > 0", self.truncation));
        }
        for (what, v) in [("center", &self.center), ("side", &self.side)] {
            if v.len() != 1 && v.len() != state_dim {
                return bad(format!("{what} needs 1 or {state_dim} entries, got {}", v.len()));
            }
        }
        if self.side.iter().any(|l| !(*l > 0.0)) || self.center.iter().any(|c| !c.is_finite()) {
            return bad("hypercube needs finite center and side > 0".into());
        }
        if self.method == EmbeddingMethod::HistCnn {
            if self.overflow_bin {
                return bad("the convolutional histogram path has no room for an overflow bin".into());
            }
            if !(1..=2).contains(&state_dim) {
                return bad(format!("convolutional histogram supports d = 1 or 2, got {state_dim}"));
            }
        }
        Ok(())
    }

    pub fn domain(&self, state_dim: usize) -> Hypercube {
        let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
        Hypercube {
            lower: (0..state_dim).map(|j| pick(&self.center, j) - 0.5 * pick(&self.side, j)).collect(),
            side: (0..state_dim).map(|j| pick(&self.side, j)).collect(),
        }
    }

    /// Width of the flat summary vector fed to a dense embedding network.
    pub fn summary_width(&self, state_dim: usize, particles: usize) -> usize {
        match self.method.summary() {
            None => 0,
            Some(SummaryKind::Empirical) => particles * state_dim,
            Some(SummaryKind::Moments) => state_dim * self.nmom,
            Some(SummaryKind::Histogram) => {
                self.nbin.pow(state_dim as u32) + usize::from(self.overflow_bin)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypercube {
    pub lower: Vec<f64>,
    pub side: Vec<f64>,
}

/// Flattens an `[n, d]` batch row by row into `n * d` values.
pub fn psi_empirical(batch: &Tensor) -> Vec<f64> {
    batch.data().to_vec()
}

/// Per dimension, the means of `clip(x, -m, m)^k` for `k = 1..=nmom`
/// (dimension-major order).
pub fn psi_moments(batch: &Tensor, nmom: usize, m: f64) -> Vec<f64> {
    let (n, d) = (batch.rows(), batch.cols());
    let mut powers = vec![0.0; n * d * nmom];
    for (row, out) in batch.data().chunks_exact(d).zip(powers.chunks_exact_mut(d * nmom)) {
        for (j, &x) in row.iter().enumerate() {
            let c = x.clamp(-m, m);
            let mut p = 1.0;
            for k in 0..nmom {
                p *= c;
                out[j * nmom + k] = p;
            }
        }
    }
    let powers = Tensor::matrix(n, d * nmom, powers).expect("shape matches data");
    sorted_column_sums(&powers).data().iter().map(|s| s / n as f64).collect()
}

/// Particle counts on `nbin^d` uniform cells (row-major, first dimension
/// slowest), followed by the overflow cell when enabled.
///
/// Cells are right-open except the last along each axis, which is closed.
pub fn psi_histogram(batch: &Tensor, nbin: usize, domain: &Hypercube, overflow_bin: bool, normalize: bool) -> Vec<f64> {
    let d = batch.cols();
    let cells = nbin.pow(d as u32);
    let mut counts = vec![0.0; cells + usize::from(overflow_bin)];
    for row in batch.data().chunks_exact(d) {
        let mut index = 0usize;
        let mut outside = false;
        for (j, &x) in row.iter().enumerate() {
            let u = (x - domain.lower[j]) / domain.side[j];
            if !(0.0..=1.0).contains(&u) {
                outside = true;
            }
            let b = ((u * nbin as f64).floor().max(0.0) as usize).min(nbin - 1);
            index = index * nbin + b;
        }
        if outside && overflow_bin {
            counts[cells] += 1.0;
        } else {
            counts[index] += 1.0;
        }
    }
    if normalize {
        let n = batch.rows() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
    }
    counts
}

/// Summary of the batch as the tape input of the embedding network.
pub fn summary_on_tape(tape: &mut Tape, config: &EmbeddingConfig, batch: Var) -> Result<Option<Var>, EmbedError> {
    let (n, d) = {
        let b = tape.value(batch);
        (b.rows(), b.cols())
    };
    let out = match config.method {
        EmbeddingMethod::Nodist => return Ok(None),
        EmbeddingMethod::EmpSym => batch,
        EmbeddingMethod::Emp => tape.reshape(batch, vec![1, n * d])?,
        EmbeddingMethod::Mom => {
            let m = config.truncation;
            let mut cols = Vec::with_capacity(d * config.nmom);
            for j in 0..d {
                let xj = if d == 1 { batch } else { tape.slice_cols(batch, j, 1)? };
                let c = tape.clamp(xj, -m, m)?;
                for k in 1..=config.nmom {
                    cols.push(if k == 1 { c } else { tape.powi(c, k as i32)? });
                }
            }
            let stacked = if cols.len() == 1 { cols[0] } else { tape.concat_cols(&cols)? };
            tape.sorted_mean_rows(stacked)?
        }
        EmbeddingMethod::Hist | EmbeddingMethod::HistCnn => {
            let counts = psi_histogram(
                tape.value(batch),
                config.nbin,
                &config.domain(d),
                config.overflow_bin,
                config.normalize_counts,
            );
            let shape = match (config.method, d) {
                (EmbeddingMethod::HistCnn, 1) => vec![1, config.nbin],
                (EmbeddingMethod::HistCnn, _) => vec![1, config.nbin, config.nbin],
                _ => vec![1, counts.len()],
            };
            tape.leaf(Tensor::new(shape, counts)?)?
        }
    };
    Ok(Some(out))
}

/// `m_theta2(psi(batch))` as a `[1, m]` row, or `None` without an embedding.
pub fn embed(
    tape: &mut Tape,
    config: &EmbeddingConfig,
    spec: &PolicySpec,
    bound: &BoundPolicy,
    batch: Var,
) -> Result<Option<Var>, EmbedError> {
    let net = match (&spec.embedding, config.method) {
        (None, EmbeddingMethod::Nodist) => return Ok(None),
        (Some(net), m) if net_matches(net, m) => net,
        (net, m) => {
            return Err(EmbedError::Incompatible {
                summary: m.summary().map_or("none", SummaryKind::name),
                architecture: match net {
                    None => "missing",
                    Some(EmbeddingNetSpec::Ffnn { .. }) => "ffnn",
                    Some(EmbeddingNetSpec::Cnn { .. }) => "cnn",
                    Some(EmbeddingNetSpec::Symmetric { .. }) => "symmetric",
                },
            })
        }
    };
    let input = summary_on_tape(tape, config, batch)?.expect("method has a summary");
    let out = match net {
        EmbeddingNetSpec::Ffnn { net } | EmbeddingNetSpec::Cnn { net } => net.forward(tape, &bound.embedding[0], input)?,
        EmbeddingNetSpec::Symmetric { phi1, phi2 } => {
            symmetric_forward(tape, phi1, &bound.embedding[0], phi2, &bound.embedding[1], input)?
        }
    };
    Ok(Some(out))
}

fn net_matches(net: &EmbeddingNetSpec, method: EmbeddingMethod) -> bool {
    matches!(
        (net, method),
        (EmbeddingNetSpec::Ffnn { .. }, EmbeddingMethod::Emp | EmbeddingMethod::Mom | EmbeddingMethod::Hist)
            | (EmbeddingNetSpec::Cnn { .. }, EmbeddingMethod::HistCnn)
            | (EmbeddingNetSpec::Symmetric { .. }, EmbeddingMethod::EmpSym)
    )
}

/// Network shapes for a policy on a `d`-dimensional state, `k` controls and
/// populations of `particles`.
pub fn policy_spec(
    config: &EmbeddingConfig,
    net: &NetConfig,
    state_dim: usize,
    control_dim: usize,
    particles: usize,
) -> Result<PolicySpec, EmbedError> {
    config.validate(state_dim)?;
    let m = net.embed_dim;
    let embedding = match config.method {
        EmbeddingMethod::Nodist => None,
        EmbeddingMethod::Emp | EmbeddingMethod::Mom | EmbeddingMethod::Hist => Some(EmbeddingNetSpec::Ffnn {
            net: Architecture::ffnn(config.summary_width(state_dim, particles), &net.hidden, m),
        }),
        EmbeddingMethod::HistCnn => {
            let input = if state_dim == 1 {
                InputShape::Signal {
                    channels: 1,
                    len: config.nbin,
                }
            } else {
                InputShape::Image {
                    channels: 1,
                    height: config.nbin,
                    width: config.nbin,
                }
            };
            Some(EmbeddingNetSpec::Cnn {
                net: Architecture::cnn(input, net.cnn_filters, &net.cnn_kernels, net.cnn_dense, m),
            })
        }
        EmbeddingMethod::EmpSym => {
            let last = *net
                .hidden
                .last()
                .ok_or_else(|| EmbedError::InvalidConfig("symmetric embedding needs a hidden layer".into()))?;
            Some(EmbeddingNetSpec::Symmetric {
                phi1: Architecture::sigmoid_stack(state_dim, &net.hidden),
                phi2: Architecture::ffnn(last, &[], m),
            })
        }
    };
    let embed_dim = if embedding.is_some() { m } else { 0 };
    let spec = PolicySpec {
        state_dim,
        control_dim,
        control: Architecture::ffnn(1 + state_dim + embed_dim, &net.hidden, 1),
        embedding,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    fn cfg(method: EmbeddingMethod) -> EmbeddingConfig {
        EmbeddingConfig {
            method,
            ..Default::default()
        }
    }

    #[test]
    fn empirical_flattens_rows() {
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(psi_empirical(&b), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cfg(EmbeddingMethod::Emp).summary_width(1, 1000), 1000);
        assert_eq!(cfg(EmbeddingMethod::Emp).summary_width(2, 800), 1600);
    }

    #[test]
    fn moments_examples() {
        assert_eq!(psi_moments(&col(&[1.0, 3.0]), 2, 10.0), vec![2.0, 5.0]);
        assert_eq!(psi_moments(&col(&[0.0, 0.0, 0.0]), 3, 10.0), vec![0.0; 3]);
        assert_eq!(psi_moments(&col(&[5.0, -5.0]), 1, 1.0), vec![0.0]);
    }

    #[test]
    fn moments_dimension_major_order() {
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(psi_moments(&b, 2, 10.0), vec![2.0, 5.0, 3.0, 10.0]);
    }

    #[test]
    fn histogram_examples() {
        let dom = Hypercube {
            lower: vec![0.0],
            side: vec![1.0],
        };
        assert_eq!(psi_histogram(&col(&[0.1, 0.9, 0.4]), 2, &dom, true, false), vec![2.0, 1.0, 0.0]);
        // the right edge belongs to the last bin, 0.5 to the upper bin
        assert_eq!(psi_histogram(&col(&[1.0, 0.5, 0.0]), 2, &dom, false, false), vec![1.0, 2.0]);
        assert_eq!(psi_histogram(&col(&[-3.0, 7.0]), 2, &dom, true, false), vec![0.0, 0.0, 2.0]);
        assert_eq!(psi_histogram(&col(&[-3.0, 7.0]), 2, &dom, false, true), vec![0.5, 0.5]);
    }

    #[test]
    fn histogram_2d_layout() {
        let c = EmbeddingConfig {
            nbin: 4,
            ..cfg(EmbeddingMethod::Hist)
        };
        assert_eq!(c.summary_width(2, 800), 16);
        let dom = c.domain(2);
        assert_eq!(dom.lower, vec![-4.0, -4.0]);
        let b = Tensor::matrix(1, 2, vec![-3.0, 3.0]).unwrap();
        let h = psi_histogram(&b, 4, &dom, false, false);
        assert_eq!(h[3], 1.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in EmbeddingMethod::ALL {
            assert_eq!(m.name().parse::<EmbeddingMethod>().unwrap(), m);
        }
        let err = "bogus".parse::<EmbeddingMethod>().unwrap_err();
        assert!(err.contains("hist_cnn") && err.contains("nodist"));
    }

    #[test]
    fn input_widths_per_method() {
        let net = NetConfig::default();
        let emb = |s: &PolicySpec| s.embedding.clone().unwrap();
        let mom = policy_spec(&cfg(EmbeddingMethod::Mom), &net, 1, 1, 1000).unwrap();
        assert_eq!(emb(&mom).nets()[0].1.input_width(), 1);
        let cnn = policy_spec(
            &EmbeddingConfig {
                nbin: 32,
                ..cfg(EmbeddingMethod::HistCnn)
            },
            &net,
            1,
            1,
            1000,
        )
        .unwrap();
        assert_eq!(emb(&cnn).nets()[0].1.input_width(), 32);
        let sym = policy_spec(&cfg(EmbeddingMethod::EmpSym), &net, 2, 2, 800).unwrap();
        assert_eq!(emb(&sym).nets()[0].1.input_width(), 2);
        let nodist = policy_spec(&cfg(EmbeddingMethod::Nodist), &net, 2, 2, 800).unwrap();
        assert_eq!(nodist.control.input_width(), 3);
        assert_eq!(mom.embed_dim().unwrap(), 5);
    }

    #[test]
    fn cnn_rejects_overflow_and_high_dims() {
        let net = NetConfig::default();
        let c = EmbeddingConfig {
            overflow_bin: true,
            ..cfg(EmbeddingMethod::HistCnn)
        };
        assert!(matches!(policy_spec(&c, &net, 1, 1, 10), Err(EmbedError::InvalidConfig(_))));
        assert!(policy_spec(&cfg(EmbeddingMethod::HistCnn), &net, 3, 1, 10).is_err());
    }

    #[test]
    fn mismatched_network_rejected() {
        let net = NetConfig {
            hidden: vec![4],
            ..Default::default()
        };
        let spec = policy_spec(&cfg(EmbeddingMethod::Mom), &net, 1, 1, 3).unwrap();
        let params = init_params(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.leaf(col(&[0.0, 1.0, 2.0])).unwrap();
        let err = embed(&mut tape, &cfg(EmbeddingMethod::EmpSym), &spec, &bound, x).unwrap_err();
        assert!(matches!(err, EmbedError::Incompatible { .. }));
    }

    #[test]
    fn taped_summaries_match_plain_ones() {
        let b = Tensor::matrix(3, 2, vec![0.5, -12.0, 1.5, 2.0, -0.25, 3.0]).unwrap();
        let c = EmbeddingConfig {
            nmom: 3,
            nbin: 3,
            ..cfg(EmbeddingMethod::Mom)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(b.clone()).unwrap();
        let s = summary_on_tape(&mut tape, &c, x).unwrap().unwrap();
        assert_eq!(tape.value(s).data(), psi_moments(&b, 3, 10.0).as_slice());
        let h = EmbeddingConfig {
            method: EmbeddingMethod::HistCnn,
            ..c
        };
        let s = summary_on_tape(&mut tape, &h, x).unwrap().unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(s).data(), psi_histogram(&b, 3, &h.domain(2), false, true).as_slice());
    }

    #[test]
    fn histogram_cuts_state_gradients() {
        let net = NetConfig {
            hidden: vec![3],
            ..Default::default()
        };
        for (method, flows) in [(EmbeddingMethod::Hist, false), (EmbeddingMethod::Mom, true)] {
            let c = cfg(method);
            let spec = policy_spec(&c, &net, 1, 1, 4).unwrap();
            let params = init_params(&spec, 1).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape).unwrap();
            let x = tape.leaf(col(&[0.1, 0.7, -1.0, 2.0])).unwrap();
            let e = embed(&mut tape, &c, &spec, &bound, x).unwrap().unwrap();
            let root = tape.sum(e).unwrap();
            let g = tape.backward(root).unwrap();
            let gx = g.wrt(x);
            assert_eq!(gx.data().iter().any(|v| *v != 0.0), flows, "{method}");
            let emb_grad = g.wrt(bound.embedding[0][0]);
            assert!(emb_grad.data().iter().any(|v| *v != 0.0));
        }
    }
}
