//! Layer stacks for the control and distribution-embedding networks.

mod optim;
mod params;

pub use optim::{sgd_step, AdamConfig, AdamState};
pub use params::{
    init_params, BoundPolicy, EmbeddingNetSpec, ParamBlock, PolicyParams, PolicySpec, SNAPSHOT_FORMAT,
    SNAPSHOT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input width {got} does not match network input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("gradient for parameter block `{block}` has shape {got:?}, expected {expected:?}")]
    GradientShape {
        block: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("empty particle batch")]
    EmptyBatch,
    #[error("parameter count mismatch: expected {expected} blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        width: usize,
        activation: Activation,
    },
    Conv1d {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        activation: Activation,
    },
    Flatten,
}

/// Shape of a single network input (batch rows excluded for vectors).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    /// Rows of width `width`; a batch is an `[n, width]` matrix.
    Vector { width: usize },
    /// `[channels, len]`.
    Signal { channels: usize, len: usize },
    /// `[channels, height, width]`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// Widths shared by every network of a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Sigmoid hidden layers of the dense stacks.
    pub hidden: Vec<usize>,
    /// Output width `m` of the embedding network.
    pub embed_dim: usize,
    /// Filters per convolution layer.
    pub cnn_filters: usize,
    /// Kernel extents of the three convolution layers.
    pub cnn_kernels: Vec<usize>,
    /// Dense sigmoid layer between the flattened feature maps and the output.
    pub cnn_dense: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100; 4],
            embed_dim: 5,
            cnn_filters: 6,
            cnn_kernels: vec![8, 4, 2],
            cnn_dense: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Vector(usize),
    Signal(usize, usize),
    Image(usize, usize, usize),
}

impl Architecture {
    /// Dense sigmoid stack with a linear output layer.
    pub fn ffnn(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec::Dense {
                width,
                activation: Activation::Sigmoid,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            width: output,
            activation: Activation::Linear,
        });
        Self {
            input: InputShape::Vector { width: input },
            layers,
        }
    }

    /// Sigmoid-only dense stack (no linear head).
    pub fn sigmoid_stack(input: usize, hidden: &[usize]) -> Self {
        Self {
            input: InputShape::Vector { width: input },
            layers: hidden
                .iter()
                .map(|&width| LayerSpec::Dense {
                    width,
                    activation: Activation::Sigmoid,
                })
                .collect(),
        }
    }

    /// Convolution stack over a single-channel signal or image, then flatten,
    /// one dense sigmoid layer, and a linear head.
    pub fn cnn(input: InputShape, filters: usize, kernels: &[usize], dense: usize, output: usize) -> Self {
        let two_d = matches!(input, InputShape::Image { .. });
        let mut layers: Vec<LayerSpec> = kernels
            .iter()
            .map(|&k| {
                if two_d {
                    LayerSpec::Conv2d {
                        filters,
                        kernel_h: k,
                        kernel_w: k,
                        activation: Activation::Sigmoid,
                    }
                } else {
                    LayerSpec::Conv1d {
                        filters,
                        kernel: k,
                        activation: Activation::Sigmoid,
                    }
                }
            })
            .collect();
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            width: dense,
            activation: Activation::Sigmoid,
        });
        layers.push(LayerSpec::Dense {
            width: output,
            activation: Activation::Linear,
        });
        Self { input, layers }
    }

    fn input_shape(&self) -> Shape {
        match self.input {
            InputShape::Vector { width } => Shape::Vector(width),
            InputShape::Signal { channels, len } => Shape::Signal(channels, len),
            InputShape::Image {
                channels,
                height,
                width,
            } => Shape::Image(channels, height, width),
        }
    }

    /// Walks the layers, returning the shape after each one.
    fn trace(&self) -> Result<Vec<Shape>, NnError> {
        let bad = |msg: String| Err(NnError::InvalidArchitecture(msg));
        let mut shape = self.input_shape();
        match shape {
            Shape::Vector(w) if w == 0 => return bad("zero input width".into()),
            Shape::Signal(c, l) if c == 0 || l == 0 => return bad("empty signal input".into()),
            Shape::Image(c, h, w) if c == 0 || h == 0 || w == 0 => return bad("empty image input".into()),
            _ => {}
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (LayerSpec::Dense { width, .. }, Shape::Vector(_)) => {
                    if width == 0 {
                        return bad(format!("layer {i}: dense width must be >= 1"));
                    }
                    Shape::Vector(width)
                }
                (LayerSpec::Conv1d { filters, kernel, .. }, Shape::Signal(_, len)) => {
                    if filters == 0 || kernel == 0 || kernel > len {
                        return bad(format!("layer {i}: kernel {kernel} does not fit signal length {len}"));
                    }
                    Shape::Signal(filters, len - kernel + 1)
                }
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel_h,
                        kernel_w,
                        ..
                    },
                    Shape::Image(_, h, w),
                ) => {
                    if filters == 0 || kernel_h == 0 || kernel_w == 0 || kernel_h > h || kernel_w > w {
                        return bad(format!(
                            "layer {i}: kernel {kernel_h}x{kernel_w} does not fit image {h}x{w}"
                        ));
                    }
                    Shape::Image(filters, h - kernel_h + 1, w - kernel_w + 1)
                }
                (LayerSpec::Flatten, Shape::Signal(c, l)) => Shape::Vector(c * l),
                (LayerSpec::Flatten, Shape::Image(c, h, w)) => Shape::Vector(c * h * w),
                (layer, shape) => return bad(format!("layer {i}: {layer:?} cannot follow {shape:?}")),
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.trace().map(|_| ())
    }

    /// Extents after each convolution layer, e.g. `[25, 22, 21]` for a
    /// length-32 signal with kernels 8, 4, 2.
    pub fn conv_extents(&self) -> Result<Vec<Vec<usize>>, NnError> {
        Ok(self
            .trace()?
            .into_iter()
            .zip(&self.layers)
            .filter_map(|(s, l)| match (l, s) {
                (LayerSpec::Conv1d { .. }, Shape::Signal(_, len)) => Some(vec![len]),
                (LayerSpec::Conv2d { .. }, Shape::Image(_, h, w)) => Some(vec![h, w]),
                _ => None,
            })
            .collect())
    }

    /// Flat output width.
    pub fn output_width(&self) -> Result<usize, NnError> {
        let last = self.trace()?.last().copied().unwrap_or(self.input_shape());
        Ok(match last {
            Shape::Vector(w) => w,
            Shape::Signal(c, l) => c * l,
            Shape::Image(c, h, w) => c * h * w,
        })
    }

    pub fn input_width(&self) -> usize {
        match self.input {
            InputShape::Vector { width } => width,
            InputShape::Signal { channels, len } => channels * len,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Names and shapes of the parameter blocks, in binding order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        let shapes = self.trace()?;
        let mut prev = self.input_shape();
        let mut out = Vec::new();
        for (i, (layer, next)) in self.layers.iter().zip(shapes).enumerate() {
            match (*layer, prev) {
                (LayerSpec::Dense { width, .. }, Shape::Vector(fan_in)) => {
                    out.push((format!("layer{i}.weight"), vec![fan_in, width]));
                    out.push((format!("layer{i}.bias"), vec![1, width]));
                }
                (LayerSpec::Conv1d { filters, kernel, .. }, Shape::Signal(c, _)) => {
                    out.push((format!("layer{i}.kernel"), vec![filters, c, kernel]));
                    out.push((format!("layer{i}.bias"), vec![filters]));
                }
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel_h,
                        kernel_w,
                        ..
                    },
                    Shape::Image(c, _, _),
                ) => {
                    out.push((format!("layer{i}.kernel"), vec![filters, c, kernel_h, kernel_w]));
                    out.push((format!("layer{i}.bias"), vec![filters]));
                }
                _ => {}
            }
            prev = next;
        }
        Ok(out)
    }

    /// Applies the stack to `input` using parameter leaves `params`
    /// (in [`Architecture::param_shapes`] order).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var, NnError> {
        let got = tape.value(input).shape().to_vec();
        let ok = match self.input {
            InputShape::Vector { width } => got.len() == 2 && got[1] == width,
            InputShape::Signal { channels, len } => got == [channels, len],
            InputShape::Image {
                channels,
                height,
                width,
            } => got == [channels, height, width],
        };
        if !ok {
            return Err(NnError::WidthMismatch {
                expected: self.input_width(),
                got: if got.len() == 2 && matches!(self.input, InputShape::Vector { .. }) {
                    got[1]
                } else {
                    got.iter().product()
                },
            });
        }
        let expected = self.param_shapes()?.len();
        if params.len() != expected {
            return Err(NnError::BlockCount {
                expected,
                got: params.len(),
            });
        }
        let mut x = input;
        let mut p = params.iter().copied();
        let mut next = || -> Result<Var, NnError> { Ok(p.next().expect("block count checked")) };
        for layer in &self.layers {
            let (pre, act) = match *layer {
                LayerSpec::Dense { activation, .. } => {
                    let (w, b) = (next()?, next()?);
                    (tape.affine(x, w, b)?, activation)
                }
                LayerSpec::Conv1d { activation, .. } => {
                    let (k, b) = (next()?, next()?);
                    (tape.conv1d(x, k, b)?, activation)
                }
                LayerSpec::Conv2d { activation, .. } => {
                    let (k, b) = (next()?, next()?);
                    (tape.conv2d(x, k, b)?, activation)
                }
                LayerSpec::Flatten => {
                    let n = tape.value(x).len();
                    (tape.reshape(x, vec![1, n])?, Activation::Linear)
                }
            };
            x = match act {
                Activation::Sigmoid => tape.sigmoid(pre)?,
                Activation::Linear => pre,
            };
        }
        Ok(x)
    }

    /// Stand-alone evaluation on concrete parameter tensors.
    pub fn eval(&self, params: &[Tensor], input: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let x = tape.leaf(input.clone())?;
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Dense network on a single input vector.
pub fn ffnn_forward(arch: &Architecture, params: &[Tensor], input: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(arch.eval(params, &Tensor::row(input.to_vec()))?.into_data())
}

/// Permutation-invariant embedding `phi2(mean_i phi1(x_i))` of an `[n, d]` batch.
pub fn symmetric_forward(
    tape: &mut Tape,
    phi1: &Architecture,
    phi1_params: &[Var],
    phi2: &Architecture,
    phi2_params: &[Var],
    particles: Var,
) -> Result<Var, NnError> {
    if tape.value(particles).rank() != 2 {
        return Err(NnError::EmptyBatch);
    }
    let features = phi1.forward(tape, phi1_params, particles)?;
    let pooled = tape.mean_rows(features)?;
    phi2.forward(tape, phi2_params, pooled)
}

/// Convolutional embedding of a histogram tensor (`[1, len]` or `[1, h, w]`).
pub fn cnn_forward(arch: &Architecture, params: &[Tensor], histogram: &Tensor) -> Result<Vec<f64>, NnError> {
    Ok(arch.eval(params, histogram)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_for(arch: &Architecture) -> Vec<Tensor> {
        arch.param_shapes()
            .unwrap()
            .iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let arch = Architecture::ffnn(3, &[4, 4], 2);
        let out = ffnn_forward(&arch, &zeros_for(&arch), &[0.3, -7.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let arch = Architecture::ffnn(3, &[], 3);
        let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::row(vec![0.0; 3]);
        let out = ffnn_forward(&arch, &[w, b], &[0.5, -1.5, 2.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn one_two_one_sigmoid_golden() {
        // hidden = sigmoid(0) = [0.5, 0.5]; output = 1*0.5 + 1*0.5 = 1.0
        let arch = Architecture::ffnn(1, &[2], 1);
        let params = vec![
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::row(vec![0.0, 0.0]),
            Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            Tensor::row(vec![0.0]),
        ];
        assert_eq!(ffnn_forward(&arch, &params, &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let arch = Architecture::ffnn(3, &[4], 1);
        let err = ffnn_forward(&arch, &zeros_for(&arch), &[1.0, 2.0]).unwrap_err();
        assert_eq!(err, NnError::WidthMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn conv_extents_follow_valid_arithmetic() {
        let a1 = Architecture::cnn(InputShape::Signal { channels: 1, len: 32 }, 6, &[8, 4, 2], 100, 5);
        assert_eq!(a1.conv_extents().unwrap(), vec![vec![25], vec![22], vec![21]]);
        assert_eq!(a1.output_width().unwrap(), 5);
        let a2 = Architecture::cnn(
            InputShape::Image {
                channels: 1,
                height: 16,
                width: 16,
            },
            6,
            &[8, 4, 2],
            100,
            5,
        );
        assert_eq!(a2.conv_extents().unwrap(), vec![vec![9, 9], vec![6, 6], vec![5, 5]]);
    }

    #[test]
    fn kernel_larger_than_input_is_invalid() {
        let a = Architecture::cnn(InputShape::Signal { channels: 1, len: 5 }, 6, &[8, 4, 2], 100, 5);
        assert!(matches!(a.validate(), Err(NnError::InvalidArchitecture(_))));
    }

    #[test]
    fn zero_dense_width_is_invalid() {
        let a = Architecture::ffnn(2, &[0], 1);
        assert!(a.validate().is_err());
    }

    #[test]
    fn symmetric_single_particle_is_plain_composition() {
        let phi1 = Architecture::sigmoid_stack(2, &[3, 3]);
        let phi2 = Architecture::ffnn(3, &[], 2);
        let p1: Vec<Tensor> = phi1
            .param_shapes()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, (_, s))| {
                let n: usize = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|i| ((i + k) as f64 * 0.37).sin()).collect()).unwrap()
            })
            .collect();
        let p2: Vec<Tensor> = phi2
            .param_shapes()
            .unwrap()
            .iter()
            .map(|(_, s)| {
                let n: usize = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap()
            })
            .collect();
        let x = Tensor::matrix(1, 2, vec![0.4, -1.1]).unwrap();

        let mut tape = Tape::new();
        let v1: Vec<Var> = p1.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let v2: Vec<Var> = p2.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let xv = tape.leaf(x.clone()).unwrap();
        let sym = symmetric_forward(&mut tape, &phi1, &v1, &phi2, &v2, xv).unwrap();

        let direct = phi2.eval(&p2, &phi1.eval(&p1, &x).unwrap()).unwrap();
        assert_eq!(tape.value(sym).data(), direct.data());
    }
}
