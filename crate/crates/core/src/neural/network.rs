use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::layers::{self, Conv1dCache, DenseCache, LstmCache, MaxPoolCache};
use super::tensor::Tensor;

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[B, T, input] -> [B, T, hidden]` or `[B, hidden]`.
    Lstm {
        input: usize,
        hidden: usize,
        return_sequences: bool,
    },
    /// `[B, input] -> [B, output]`.
    Dense { input: usize, output: usize },
    /// `[B, T, channels] -> [B, T-kernel+1, filters]`.
    Conv1d {
        channels: usize,
        filters: usize,
        kernel: usize,
    },
    MaxPool1d { pool: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Parameter names and shapes this layer owns, in storage order.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Lstm { input, hidden, .. } => vec![
                ("w_input", vec![input, 4 * hidden]),
                ("w_hidden", vec![hidden, 4 * hidden]),
                ("bias", vec![4 * hidden]),
            ],
            LayerSpec::Dense { input, output } => vec![("weight", vec![input, output]), ("bias", vec![output])],
            LayerSpec::Conv1d {
                channels,
                filters,
                kernel,
            } => vec![("weight", vec![kernel, channels, filters]), ("bias", vec![filters])],
            LayerSpec::MaxPool1d { .. } | LayerSpec::Relu | LayerSpec::Flatten => Vec::new(),
        }
    }

    fn tag(&self) -> String {
        match *self {
            LayerSpec::Lstm {
                input,
                hidden,
                return_sequences,
            } => format!("lstm({input},{hidden},{})", if return_sequences { "seq" } else { "last" }),
            LayerSpec::Dense { input, output } => format!("dense({input},{output})"),
            LayerSpec::Conv1d {
                channels,
                filters,
                kernel,
            } => format!("conv1d({channels},{filters},{kernel})"),
            LayerSpec::MaxPool1d { pool } => format!("maxpool1d({pool})"),
            LayerSpec::Relu => "relu".to_string(),
            LayerSpec::Flatten => "flatten".to_string(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| Error::invalid(format!("{} cannot take input {input:?}: {what}", self.tag()));
        match *self {
            LayerSpec::Lstm {
                input: n_in,
                hidden,
                return_sequences,
            } => match input {
                [t, c] if *c == n_in && *t > 0 => Ok(if return_sequences { vec![*t, hidden] } else { vec![hidden] }),
                _ => Err(bad("expected [steps, features]")),
            },
            LayerSpec::Dense { input: n_in, output } => match input {
                [c] if *c == n_in => Ok(vec![output]),
                _ => Err(bad("expected a flat feature vector")),
            },
            LayerSpec::Conv1d {
                channels,
                filters,
                kernel,
            } => match input {
                [t, c] if *c == channels && kernel > 0 && *t >= kernel => Ok(vec![t - kernel + 1, filters]),
                _ => Err(bad("expected [steps >= kernel, channels]")),
            },
            LayerSpec::MaxPool1d { pool } => match input {
                [t, c] if pool > 0 && *t >= pool => Ok(vec![t / pool, *c]),
                _ => Err(bad("expected [steps >= pool, channels]")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Per-sample input shape plus layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture { input_shape, layers };
        arch.output_shape()?;
        Ok(arch)
    }

    /// Per-sample output shape; fails when consecutive layers do not fit.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Canonical text of the architecture; hashed into the fingerprint.
    pub fn describe(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let layers: Vec<String> = self.layers.iter().map(|l| l.tag()).collect();
        format!("input[{}]|{}", dims.join("x"), layers.join("|"))
    }

    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        hex::encode(&digest[..16])
    }

    /// Names and shapes of all parameters in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.tag();
                let kind = kind.split('(').next().unwrap_or_default().to_string();
                l.param_shapes()
                    .into_iter()
                    .map(move |(name, shape)| (format!("{i}.{kind}.{name}"), shape))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Runs the stack on `[B, input_shape...]`.
    pub fn forward(&self, state: &NetworkState, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_state(state)?;
        let mut expected = vec![input.shape().first().copied().unwrap_or(0)];
        expected.extend_from_slice(&self.input_shape);
        input.expect_shape(&expected)?;

        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut p = 0;
        for layer in &self.layers {
            let params = &state.entries[p..p + layer.param_shapes().len()];
            p += params.len();
            let (y, cache) = match *layer {
                LayerSpec::Lstm { return_sequences, .. } => {
                    let (y, c) = layers::lstm_forward(&x, &params[0].1, &params[1].1, &params[2].1, return_sequences)?;
                    (y, LayerCache::Lstm(c))
                }
                LayerSpec::Dense { .. } => {
                    let (y, c) = layers::dense_forward(&x, &params[0].1, &params[1].1)?;
                    (y, LayerCache::Dense(c))
                }
                LayerSpec::Conv1d { .. } => {
                    let (y, c) = layers::conv1d_forward(&x, &params[0].1, &params[1].1)?;
                    (y, LayerCache::Conv1d(c))
                }
                LayerSpec::MaxPool1d { pool } => {
                    let (y, c) = layers::maxpool1d_forward(&x, pool)?;
                    (y, LayerCache::MaxPool(c))
                }
                LayerSpec::Relu => (layers::relu_forward(&x), LayerCache::Relu(x)),
                LayerSpec::Flatten => {
                    let shape = x.shape().to_vec();
                    (layers::flatten(x)?, LayerCache::Flatten(shape))
                }
            };
            caches.push(cache);
            x = y;
        }
        x.check_finite("network output")?;
        Ok((x, ForwardCache { layers: caches }))
    }

    /// Forward pass without keeping caches.
    pub fn predict(&self, state: &NetworkState, input: &Tensor) -> Result<Tensor> {
        self.forward(state, input).map(|(y, _)| y)
    }

    /// Parameter gradients (aligned with `state.entries`) and the input
    /// gradient for an output gradient.
    pub fn backward(&self, state: &NetworkState, cache: &ForwardCache, grad_out: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut grads: Vec<Tensor> = Vec::with_capacity(state.entries.len());
        let mut g = grad_out.clone();
        let mut p = state.entries.len();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let n = layer.param_shapes().len();
            p -= n;
            let params = &state.entries[p..p + n];
            g = match (layer, lc) {
                (LayerSpec::Lstm { .. }, LayerCache::Lstm(c)) => {
                    let lg = layers::lstm_backward(&g, c, &params[0].1, &params[1].1)?;
                    grads.extend([lg.bias, lg.w_hidden, lg.w_input]);
                    lg.input
                }
                (LayerSpec::Dense { .. }, LayerCache::Dense(c)) => {
                    let lg = layers::dense_backward(&g, c, &params[0].1)?;
                    grads.extend([lg.bias, lg.weight]);
                    lg.input
                }
                (LayerSpec::Conv1d { .. }, LayerCache::Conv1d(c)) => {
                    let lg = layers::conv1d_backward(&g, c, &params[0].1)?;
                    grads.extend([lg.bias, lg.weight]);
                    lg.input
                }
                (LayerSpec::MaxPool1d { .. }, LayerCache::MaxPool(c)) => layers::maxpool1d_backward(&g, c)?,
                (LayerSpec::Relu, LayerCache::Relu(input)) => layers::relu_backward(&g, input)?,
                (LayerSpec::Flatten, LayerCache::Flatten(shape)) => g.reshape(shape)?,
                _ => return Err(Error::invalid("forward cache does not match architecture")),
            };
        }
        grads.reverse();
        Ok((grads, g))
    }

    fn check_state(&self, state: &NetworkState) -> Result<()> {
        let fp = self.fingerprint();
        if state.fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: state.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Lstm(LstmCache),
    Dense(DenseCache),
    Conv1d(Conv1dCache),
    MaxPool(MaxPoolCache),
    Relu(Tensor),
    Flatten(Vec<usize>),
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

/// Named parameter tensors of a network, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub fingerprint: String,
    pub entries: Vec<(String, Tensor)>,
}

impl NetworkState {
    pub fn new(fingerprint: String, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate parameter name {}", w[0])));
        }
        Ok(NetworkState { fingerprint, entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Checks names and shapes against `arch`.
    pub fn validate_for(&self, arch: &Architecture) -> Result<()> {
        arch.check_state(self)?;
        let layout = arch.param_layout();
        if layout.len() != self.entries.len() {
            return Err(Error::LengthMismatch {
                left: layout.len(),
                right: self.entries.len(),
            });
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(&self.entries) {
            if name != have_name {
                return Err(Error::invalid(format!("parameter {have_name} where {name} was expected")));
            }
            t.expect_shape(shape)?;
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1. Fully
/// determined by `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkState> {
    arch.output_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, layer) in arch.layers.iter().enumerate() {
        let kind = layer.tag();
        let kind = kind.split('(').next().unwrap_or_default();
        for (name, shape) in layer.param_shapes() {
            let full = format!("{i}.{kind}.{name}");
            let t = if name == "bias" {
                let mut b = Tensor::zeros(&shape);
                if let LayerSpec::Lstm { hidden, .. } = *layer {
                    b.data_mut()[hidden..2 * hidden].fill(1.0);
                }
                b
            } else {
                let (fan_in, fan_out) = fans(layer, &shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect())?
            };
            entries.push((full, t));
        }
    }
    NetworkState::new(arch.fingerprint(), entries)
}

fn fans(layer: &LayerSpec, shape: &[usize]) -> (usize, usize) {
    match *layer {
        LayerSpec::Conv1d {
            channels,
            filters,
            kernel,
        } => (kernel * channels, kernel * filters),
        _ => (shape[0], shape[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lstm() -> Architecture {
        Architecture::new(
            vec![4, 3],
            vec![
                LayerSpec::Lstm {
                    input: 3,
                    hidden: 5,
                    return_sequences: true,
                },
                LayerSpec::Lstm {
                    input: 5,
                    hidden: 4,
                    return_sequences: false,
                },
                LayerSpec::Dense { input: 4, output: 3 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = small_lstm();
        assert_eq!(init_params(&a, 11).unwrap(), init_params(&a, 11).unwrap());
        assert_ne!(init_params(&a, 11).unwrap(), init_params(&a, 12).unwrap());
    }

    #[test]
    fn dense_shapes_and_biases() {
        let a = Architecture::new(vec![4], vec![LayerSpec::Dense { input: 4, output: 3 }]).unwrap();
        let s = init_params(&a, 0).unwrap();
        assert_eq!(s.entries[0].1.shape(), &[4, 3]);
        assert_eq!(s.entries[1].1.shape(), &[3]);
        assert!(s.entries[1].1.data().iter().all(|&b| b == 0.0));
        let lstm = init_params(&small_lstm(), 0).unwrap();
        let b = lstm.get("0.lstm.bias").unwrap().data();
        assert!(b[..5].iter().all(|&v| v == 0.0));
        assert!(b[5..10].iter().all(|&v| v == 1.0));
        assert!(b[10..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glorot_variance() {
        // Enough draws in one matrix: 250 x 400 = 1e5.
        let a = Architecture::new(vec![250], vec![LayerSpec::Dense { input: 250, output: 400 }]).unwrap();
        let s = init_params(&a, 3).unwrap();
        let w = s.entries[0].1.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 650.0;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn rejects_incompatible_stack() {
        assert!(Architecture::new(vec![4, 3], vec![LayerSpec::Dense { input: 12, output: 3 }]).is_err());
        assert!(Architecture::new(
            vec![4, 3],
            vec![
                LayerSpec::Lstm {
                    input: 2,
                    hidden: 5,
                    return_sequences: false
                },
            ]
        )
        .is_err());
        assert!(Architecture::new(vec![3], vec![]).is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = small_lstm();
        let mut b = a.clone();
        b.layers[2] = LayerSpec::Dense { input: 4, output: 2 };
        assert_eq!(a.fingerprint(), small_lstm().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        let s = init_params(&a, 0).unwrap();
        assert!(s.validate_for(&a).is_ok());
        assert!(matches!(s.validate_for(&b), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(NetworkState::new("x".into(), vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let a = small_lstm();
        let s = init_params(&a, 5).unwrap();
        let x = Tensor::new(vec![2, 4, 3], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y1 = a.predict(&s, &x).unwrap();
        let y2 = a.predict(&s, &x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1.shape(), &[2, 3]);
    }
}
