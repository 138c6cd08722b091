//! Dense feed-forward network, Adam, and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::homotopy::HomotopyStage;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network needs at least an input and an output width, got {0:?}")]
    TooFewLayers(Vec<usize>),
    #[error("output heads cover {declared} columns but the last layer has {expected}")]
    HeadMismatch { expected: usize, declared: usize },
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("parameter set shape mismatch at tensor {index}")]
    ShapeMismatch { index: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad checkpoint magic at byte 0")]
    BadMagic,
    #[error("malformed checkpoint header at byte {offset}: {message}")]
    BadHeader { offset: usize, message: String },
    #[error("checkpoint has {extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("checkpoint dims {found:?} do not match configured dims {expected:?}")]
    DimsMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

/// Named slice of the output vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
    pub activation: Activation,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, width: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            width,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `input_dim × output_dim`.
    pub weight: Array2<T>,
    /// `1 × output_dim`.
    pub bias: Array2<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<Dense<T>>,
    pub heads: Vec<HeadSpec>,
    pub seed: u64,
}

/// Builds a network with relu hidden layers and a linear last layer whose
/// output is split into `heads`. Weights are Gaussian with variance
/// `2/fan_in` for relu layers and `1/fan_in` for the last layer; biases
/// start at zero.
pub fn init_mlp<T: Real>(
    dims: &[usize],
    heads: Vec<HeadSpec>,
    seed: u64,
) -> Result<MlpParams<T>, NnError> {
    if dims.len() < 2 {
        return Err(NnError::TooFewLayers(dims.to_vec()));
    }
    let out = *dims.last().unwrap();
    let declared: usize = heads.iter().map(|h| h.width).sum();
    if declared != out {
        return Err(NnError::HeadMismatch {
            expected: out,
            declared,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = dims.len() - 1;
    let layers = (0..n_layers)
        .map(|l| {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let activation = if l + 1 < n_layers {
                Activation::Relu
            } else {
                Activation::Identity
            };
            let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
            let weight = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(normal.sample(&mut rng)));
            Dense {
                weight,
                bias: Array2::zeros((1, fan_out)),
                activation,
            }
        })
        .collect();
    Ok(MlpParams {
        layers,
        heads,
        seed,
    })
}

impl<T: Real> MlpParams<T> {
    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.nrows()];
        d.extend(self.layers.iter().map(|l| l.weight.ncols()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in storage order: weight then bias, layer by layer.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.tensors()
            .into_iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Records every parameter tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    /// Records the parameters as constants (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Network output for the rows of `x`, head activations applied.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var, NnError> {
        let (_, cols) = tape.shape(x);
        if cols != self.input_dim() {
            return Err(NnError::InputWidth {
                expected: self.input_dim(),
                got: cols,
            });
        }
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, params[2 * l]);
            let z = tape.add(z, params[2 * l + 1]);
            h = apply_activation(tape, z, layer.activation);
        }
        if self.heads.iter().all(|hd| hd.activation == Activation::Identity) {
            return Ok(h);
        }
        let mut parts = Vec::with_capacity(self.heads.len());
        let mut off = 0;
        for head in &self.heads {
            let part = tape.slice_cols(h, off, head.width);
            parts.push(apply_activation(tape, part, head.activation));
            off += head.width;
        }
        Ok(tape.concat_cols(&parts))
    }

    /// Plain evaluation, split into named head outputs.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>, NnError> {
        let out = self.forward_matrix(batch)?;
        let mut res = Vec::with_capacity(self.heads.len());
        let mut off = 0;
        for head in &self.heads {
            let part = out
                .slice(ndarray::s![.., off..off + head.width])
                .to_owned();
            res.push((head.name.clone(), part));
            off += head.width;
        }
        Ok(res)
    }

    /// Plain evaluation returning the full output matrix.
    pub fn forward_matrix(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let y = self.forward_tape(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }

    /// Head offset and width by name.
    pub fn head(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for h in &self.heads {
            if h.name == name {
                return Some((off, h.width));
            }
            off += h.width;
        }
        None
    }
}

fn apply_activation<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Softplus => tape.softplus(x),
    }
}

/// Replaces NaN components with zero; infinities pass through.
pub fn zero_nans<T: Real>(grads: &mut [Array2<T>]) {
    for g in grads {
        g.mapv_inplace(|x| if x.is_nan() { T::zero() } else { x });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Array2<T>>,
    pub second: Vec<Array2<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &MlpParams<T>, config: AdamConfig) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// Zeroes both moment estimates and the step counter.
    pub fn reset(&mut self) {
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.fill(T::zero());
        }
        self.step = 0;
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &[Array2<T>]) -> Result<(), NnError> {
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() || self.first.len() != grads.len() {
            return Err(NnError::ShapeMismatch { index: grads.len() });
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for (k, (p, g)) in tensors.into_iter().zip(grads).enumerate() {
            if p.dim() != g.dim() {
                return Err(NnError::ShapeMismatch { index: k });
            }
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"MCLCKPT\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub heads: Vec<HeadSpec>,
    pub seed: u64,
    pub stage: Option<HomotopyStage>,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub param_count: usize,
    pub param_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: MlpParams<T>,
    pub adam: AdamState<T>,
    pub stage: Option<HomotopyStage>,
}

impl<T: Real> Checkpoint<T> {
    pub fn expect_dims(&self, dims: &[usize]) -> Result<(), CheckpointError> {
        let found = self.params.dims();
        if found != dims {
            return Err(CheckpointError::DimsMismatch {
                expected: dims.to_vec(),
                found,
            });
        }
        Ok(())
    }
}

/// Serializes parameters as an 8-byte magic, a little-endian `u64` header
/// length, a JSON header and the parameters as little-endian `f64`, layer
/// by layer, weights row-major then bias.
pub fn encode_checkpoint<T: Real>(
    params: &MlpParams<T>,
    adam: &AdamState<T>,
    stage: Option<&HomotopyStage>,
) -> Vec<u8> {
    let header = CheckpointHeader {
        dims: params.dims(),
        activations: params.layers.iter().map(|l| l.activation).collect(),
        heads: params.heads.clone(),
        seed: params.seed,
        stage: stage.cloned(),
        adam: adam.config,
        adam_step: adam.step,
        param_count: params.param_count(),
        param_bytes: params.param_count() * 8,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + header.param_bytes);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors() {
        // Standard layout iteration is row-major.
        for &x in t.iter() {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let need = |offset: usize, n: usize| -> Result<(), CheckpointError> {
        if bytes.len() < offset + n {
            Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: offset + n - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 8)?;
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    need(8, 8)?;
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(16, hlen)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| CheckpointError::BadHeader {
            offset: 16 + e.column().saturating_sub(1),
            message: e.to_string(),
        })?;
    let dims = &header.dims;
    if dims.len() < 2 || header.activations.len() != dims.len() - 1 {
        return Err(CheckpointError::BadHeader {
            offset: 16,
            message: "dims and activations disagree".into(),
        });
    }
    let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != header.param_count || header.param_bytes != expected * 8 {
        return Err(CheckpointError::BadHeader {
            offset: 16,
            message: format!(
                "param_count {} / param_bytes {} inconsistent with dims ({expected} params)",
                header.param_count, header.param_bytes
            ),
        });
    }
    let declared: usize = header.heads.iter().map(|h| h.width).sum();
    if declared != *dims.last().unwrap() {
        return Err(NnError::HeadMismatch {
            expected: *dims.last().unwrap(),
            declared,
        }
        .into());
    }
    let mut off = 16 + hlen;
    need(off, header.param_bytes)?;
    let mut read = |n: usize| -> Vec<T> {
        let v = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        off += 8 * n;
        v
    };
    let layers = dims
        .windows(2)
        .zip(&header.activations)
        .map(|(w, &activation)| {
            let weight = Array2::from_shape_vec((w[0], w[1]), read(w[0] * w[1])).unwrap();
            let bias = Array2::from_shape_vec((1, w[1]), read(w[1])).unwrap();
            Dense {
                weight,
                bias,
                activation,
            }
        })
        .collect();
    if off != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            offset: off,
            extra: bytes.len() - off,
        });
    }
    let params = MlpParams {
        layers,
        heads: header.heads,
        seed: header.seed,
    };
    let mut adam = AdamState::new(&params, header.adam);
    adam.step = header.adam_step;
    Ok(Checkpoint {
        params,
        adam,
        stage: header.stage,
    })
}

pub fn save_checkpoint<T: Real>(
    params: &MlpParams<T>,
    adam: &AdamState<T>,
    stage: Option<&HomotopyStage>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, adam, stage);
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
