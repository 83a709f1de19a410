use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, NnError};
use crate::autodiff::{Gradients, Tape, Tensor, Var};

pub const SNAPSHOT_FORMAT: &str = "mfc-policy";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Architecture of the distribution-embedding network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingNetSpec {
    Ffnn { net: Architecture },
    Cnn { net: Architecture },
    /// `phi2(mean_i phi1(x_i))`.
    Symmetric { phi1: Architecture, phi2: Architecture },
}

impl EmbeddingNetSpec {
    pub fn nets(&self) -> Vec<(&'static str, &Architecture)> {
        match self {
            Self::Ffnn { net } | Self::Cnn { net } => vec![("embedding", net)],
            Self::Symmetric { phi1, phi2 } => vec![("embedding.phi1", phi1), ("embedding.phi2", phi2)],
        }
    }

    pub fn output_width(&self) -> Result<usize, NnError> {
        match self {
            Self::Ffnn { net } | Self::Cnn { net } => net.output_width(),
            Self::Symmetric { phi2, .. } => phi2.output_width(),
        }
    }
}

/// Shapes of the control networks (one per control dimension) and the
/// optional embedding network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub control: Architecture,
    pub embedding: Option<EmbeddingNetSpec>,
}

impl PolicySpec {
    pub fn embed_dim(&self) -> Result<usize, NnError> {
        self.embedding.as_ref().map_or(Ok(0), |e| e.output_width())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.state_dim == 0 || self.control_dim == 0 {
            return Err(NnError::InvalidArchitecture("state and control dims must be >= 1".into()));
        }
        for (_, net) in self.nets() {
            net.validate()?;
        }
        if let Some(EmbeddingNetSpec::Symmetric { phi1, phi2 }) = &self.embedding {
            if phi1.input_width() != self.state_dim || phi1.output_width()? != phi2.input_width() {
                return Err(NnError::InvalidArchitecture(
                    "symmetric embedding widths do not chain".into(),
                ));
            }
        }
        let expected = 1 + self.state_dim + self.embed_dim()?;
        if self.control.input_width() != expected {
            return Err(NnError::WidthMismatch {
                expected,
                got: self.control.input_width(),
            });
        }
        if self.control.output_width()? != 1 {
            return Err(NnError::InvalidArchitecture("control nets must have one output".into()));
        }
        Ok(())
    }

    /// `(name prefix, architecture)` for every network, in block order.
    pub fn nets(&self) -> Vec<(String, &Architecture)> {
        let mut out: Vec<(String, &Architecture)> = (0..self.control_dim)
            .map(|i| (format!("control{i}"), &self.control))
            .collect();
        if let Some(e) = &self.embedding {
            out.extend(e.nets().into_iter().map(|(n, a)| (n.to_string(), a)));
        }
        out
    }

    /// Fully qualified block names and shapes.
    pub fn block_layout(&self) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        let mut out = Vec::new();
        for (prefix, net) in self.nets() {
            for (name, shape) in net.param_shapes()? {
                out.push((format!("{prefix}.{name}"), shape));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

/// theta = (control nets, embedding net), stored as named blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: PolicySpec,
    pub blocks: Vec<ParamBlock>,
}

/// Parameter leaves of a policy registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    /// Leaves of each control net.
    pub controls: Vec<Vec<Var>>,
    /// Leaves of each embedding net (empty, one, or `phi1`/`phi2`).
    pub embedding: Vec<Vec<Var>>,
    /// Every leaf, in block order.
    pub all: Vec<Var>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    policy: PolicyParams,
}

impl PolicyParams {
    pub fn num_parameters(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| b.value.clone()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPolicy, NnError> {
        let mut all = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            all.push(tape.leaf(b.value.clone())?);
        }
        let mut offset = 0;
        let mut controls = Vec::new();
        let mut embedding = Vec::new();
        for (i, (_, net)) in self.spec.nets().into_iter().enumerate() {
            let n = net.param_shapes()?.len();
            let vars = all[offset..offset + n].to_vec();
            offset += n;
            if i < self.spec.control_dim {
                controls.push(vars);
            } else {
                embedding.push(vars);
            }
        }
        Ok(BoundPolicy {
            controls,
            embedding,
            all,
        })
    }

    /// Gradient tensors for every block, zero-filled where the root did not
    /// depend on a block.
    pub fn gradients(&self, bound: &BoundPolicy, grads: &Gradients) -> Vec<Tensor> {
        bound.all.iter().map(|v| grads.wrt(*v)).collect()
    }

    pub fn to_snapshot(&self) -> String {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            policy: self.clone(),
        };
        serde_json::to_string(&snap).expect("policy snapshot serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, NnError> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| NnError::Snapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(NnError::Snapshot(format!(
                "unsupported snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        let params = snap.policy;
        params.spec.validate()?;
        let layout = params.spec.block_layout()?;
        if layout.len() != params.blocks.len() {
            return Err(NnError::BlockCount {
                expected: layout.len(),
                got: params.blocks.len(),
            });
        }
        for ((name, shape), block) in layout.iter().zip(&params.blocks) {
            if name != &block.name || shape.as_slice() != block.value.shape() {
                return Err(NnError::Snapshot(format!("block `{}` does not match the architecture", block.name)));
            }
        }
        Ok(params)
    }
}

/// Glorot-uniform weights in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`,
/// zero biases.
pub fn init_params(spec: &PolicySpec, seed: u64) -> Result<PolicyParams, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = spec
        .block_layout()?
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let limit = glorot_limit(&shape);
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..=limit)).collect())
                    .expect("layout shapes are valid")
            };
            ParamBlock { name, value }
        })
        .collect();
    Ok(PolicyParams {
        spec: spec.clone(),
        blocks,
    })
}

pub(crate) fn glorot_limit(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [i, o] => (*i, *o),
        // [out_channels, in_channels, kernel...]
        [o, i, rest @ ..] => {
            let k: usize = rest.iter().product();
            (i * k, o * k)
        }
        _ => (1, 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
