//! Parameterized sender and receiver.
//!
//! The sender's signaling scheme maps the state encoding to logits over the
//! signal space; the receiver's policy maps its observation plus the signal
//! vector to logits over actions. Critics estimate the value quantities the
//! learn module needs. Small games use a single linear layer over one-hot
//! encodings, which is an exact tabular parameterization; the gridworld uses
//! one-hidden-layer tanh networks.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{sample_gumbel, AdError, Tape, Tensor, Var};
use crate::env::{Action, Signal};

/// Feed-forward network: tanh between layers, identity on the output.
#[derive(Debug, Clone)]
pub struct Network {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Tape handles for one network's parameters.
pub struct BoundNetwork {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Network {
    /// `dims` lists layer widths, e.g. `[in, hidden, out]`. Hidden weights
    /// are scaled by fan-in; the output layer starts near zero so fresh
    /// distributions are near-uniform.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "network needs input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let scale = if last {
                0.05
            } else {
                1.0 / (dims[i] as f64).sqrt()
            };
            weights.push(Tensor::randomize(dims[i], dims[i + 1], scale, rng));
            biases.push(Tensor::zeros(1, dims[i + 1]));
        }
        Network { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().cols
    }

    pub fn forward_plain(&self, input: &[f64]) -> Result<Vec<f64>, AdError> {
        if input.len() != self.input_dim() {
            return Err(AdError::ShapeMismatch {
                op: "forward",
                lr: 1,
                lc: input.len(),
                rr: self.input_dim(),
                rc: self.output_dim(),
            });
        }
        let mut x = input.to_vec();
        let layers = self.weights.len();
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let mut y = b.data.clone();
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &w.data[i * w.cols..(i + 1) * w.cols];
                for (j, &wij) in row.iter().enumerate() {
                    y[j] += xi * wij;
                }
            }
            if l + 1 < layers {
                for v in y.iter_mut() {
                    *v = v.tanh();
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Insert the parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        BoundNetwork {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone(), true)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone(), true)).collect(),
        }
    }

    /// Insert the parameters as constants (no gradient flows into them).
    pub fn bind_const(&self, tape: &mut Tape) -> BoundNetwork {
        BoundNetwork {
            weights: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    /// Batched forward pass on the tape; `input` is `[batch, in_dim]`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundNetwork, input: Var) -> Result<Var, AdError> {
        let layers = bound.weights.len();
        let mut x = input;
        for l in 0..layers {
            let h = tape.matmul(x, bound.weights[l])?;
            x = tape.add_row(h, bound.biases[l])?;
            if l + 1 < layers {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Collect the gradients accumulated on the tape for a bound copy,
    /// zero-filled where backward never reached.
    pub fn tape_grads(&self, tape: &Tape, bound: &BoundNetwork) -> Vec<(Tensor, Tensor)> {
        (0..self.weights.len())
            .map(|l| {
                let gw = tape
                    .grad(bound.weights[l])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.weights[l].rows, self.weights[l].cols));
                let gb = tape
                    .grad(bound.biases[l])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(1, self.biases[l].cols));
                (gw, gb)
            })
            .collect()
    }

    pub fn zero_grads_like(&self) -> Vec<(Tensor, Tensor)> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| (Tensor::zeros(w.rows, w.cols), Tensor::zeros(1, b.cols)))
            .collect()
    }

    /// θ += lr · grads (gradient ascent; pass a negative rate to descend).
    pub fn apply_grads(&mut self, grads: &[(Tensor, Tensor)], lr: f64) {
        for (l, (gw, gb)) in grads.iter().enumerate() {
            for (p, g) in self.weights[l].data.iter_mut().zip(gw.data.iter()) {
                *p += lr * g;
            }
            for (p, g) in self.biases[l].data.iter_mut().zip(gb.data.iter()) {
                *p += lr * g;
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .cloned()
            .collect()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        let n = self.weights.len();
        assert_eq!(params.len(), 2 * n, "parameter count mismatch");
        for l in 0..n {
            assert_eq!(
                (params[l].rows, params[l].cols),
                (self.weights[l].rows, self.weights[l].cols)
            );
            self.weights[l] = params[l].clone();
            self.biases[l] = params[n + l].clone();
        }
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| v / z).collect()
}

pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Sender
// ---------------------------------------------------------------------------

/// The sender's stochastic signaling scheme. Signals are drawn with Gumbel
/// perturbation so the hard sample can be replayed differentiably later.
#[derive(Debug, Clone)]
pub struct SignalingScheme {
    pub net: Network,
    pub temperature: f64,
}

impl SignalingScheme {
    pub fn new<R: Rng>(state_dim: usize, hidden: Option<usize>, signals: usize, temperature: f64, rng: &mut R) -> Self {
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![state_dim, h, signals],
            None => vec![state_dim, signals],
        };
        SignalingScheme {
            net: Network::new(&dims, rng),
            temperature,
        }
    }

    pub fn signal_count(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, state_encoding: &[f64]) -> Result<Vec<f64>, AdError> {
        self.net.forward_plain(state_encoding)
    }

    /// φ(·|s): softmax of the logits, full support by construction.
    pub fn distribution(&self, state_encoding: &[f64]) -> Result<Vec<f64>, AdError> {
        Ok(softmax_slice(&self.logits(state_encoding)?))
    }

    /// Draw a hard signal; the returned noise replays the exact draw through
    /// the straight-through pathway.
    pub fn sample<R: Rng>(
        &self,
        state_encoding: &[f64],
        rng: &mut R,
    ) -> Result<(Signal, Tensor), AdError> {
        let logits = self.logits(state_encoding)?;
        let k = logits.len();
        let noise = sample_gumbel(1, k, rng);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..k {
            let v = (logits[i] + noise.data[i]) / self.temperature;
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let mut one_hot = vec![0.0; k];
        one_hot[best] = 1.0;
        Ok((
            Signal {
                category_index: best,
                one_hot,
            },
            noise,
        ))
    }
}

// ---------------------------------------------------------------------------
// Receiver
// ---------------------------------------------------------------------------

/// Receiver policy over actions, conditioned on observation and signal.
/// The signal input stays differentiable so sender gradients can flow
/// through it.
#[derive(Debug, Clone)]
pub struct ReceiverPolicy {
    pub net: Network,
    pub obs_dim: usize,
    pub signal_dim: usize,
}

impl ReceiverPolicy {
    pub fn new<R: Rng>(obs_dim: usize, signal_dim: usize, hidden: Option<usize>, actions: usize, rng: &mut R) -> Self {
        let input = obs_dim + signal_dim;
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![input, h, actions],
            None => vec![input, actions],
        };
        ReceiverPolicy {
            net: Network::new(&dims, rng),
            obs_dim,
            signal_dim,
        }
    }

    pub fn action_count(&self) -> usize {
        self.net.output_dim()
    }

    fn joined(&self, obs: &[f64], signal: &[f64]) -> Result<Vec<f64>, AdError> {
        if obs.len() != self.obs_dim || signal.len() != self.signal_dim {
            return Err(AdError::ShapeMismatch {
                op: "policy_input",
                lr: obs.len(),
                lc: signal.len(),
                rr: self.obs_dim,
                rc: self.signal_dim,
            });
        }
        let mut v = Vec::with_capacity(obs.len() + signal.len());
        v.extend_from_slice(obs);
        v.extend_from_slice(signal);
        Ok(v)
    }

    pub fn distribution(&self, obs: &[f64], signal: &[f64]) -> Result<Vec<f64>, AdError> {
        let logits = self.net.forward_plain(&self.joined(obs, signal)?)?;
        Ok(softmax_slice(&logits))
    }

    pub fn sample_action<R: Rng>(
        &self,
        obs: &[f64],
        signal: &[f64],
        rng: &mut R,
    ) -> Result<Action, AdError> {
        let probs = self.distribution(obs, signal)?;
        Ok(Action {
            category_index: sample_categorical(&probs, rng),
        })
    }
}

// ---------------------------------------------------------------------------
// Critics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    /// V^j(o, σ) — the receiver's baseline.
    ReceiverV,
    /// W^i(s, a) — sender's marginal action value.
    SenderWi,
    /// W^j(s, a) — receiver's marginal action value, kept by the sender.
    SenderWj,
    /// V^i(s) — sender's state baseline.
    SenderVi,
}

/// Scalar critic with a hard-synced target copy. In tabular mode the two
/// input blocks are combined as an outer product, which makes the linear
/// head an exact table over input pairs.
#[derive(Debug, Clone)]
pub struct Critic {
    pub kind: CriticKind,
    pub net: Network,
    pub target: Network,
    pub pair_input: bool,
    dim_a: usize,
    dim_b: usize,
}

impl Critic {
    pub fn new<R: Rng>(
        kind: CriticKind,
        dim_a: usize,
        dim_b: usize,
        hidden: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let pair_input = hidden.is_none();
        let input = if dim_b == 0 {
            dim_a
        } else if dim_a == 0 {
            dim_b
        } else if pair_input {
            dim_a * dim_b
        } else {
            dim_a + dim_b
        };
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![input, h, 1],
            None => vec![input, 1],
        };
        let net = Network::new(&dims, rng);
        let target = net.clone();
        Critic {
            kind,
            net,
            target,
            pair_input,
            dim_a,
            dim_b,
        }
    }

    pub fn encode(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>, AdError> {
        if a.len() != self.dim_a || b.len() != self.dim_b {
            return Err(AdError::ShapeMismatch {
                op: "critic_input",
                lr: a.len(),
                lc: b.len(),
                rr: self.dim_a,
                rc: self.dim_b,
            });
        }
        if self.dim_b == 0 {
            return Ok(a.to_vec());
        }
        if self.dim_a == 0 {
            return Ok(b.to_vec());
        }
        if self.pair_input {
            let mut v = Vec::with_capacity(a.len() * b.len());
            for &x in a {
                for &y in b {
                    v.push(x * y);
                }
            }
            Ok(v)
        } else {
            let mut v = Vec::with_capacity(a.len() + b.len());
            v.extend_from_slice(a);
            v.extend_from_slice(b);
            Ok(v)
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64, AdError> {
        Ok(self.net.forward_plain(&self.encode(a, b)?)?[0])
    }

    pub fn eval_target(&self, a: &[f64], b: &[f64]) -> Result<f64, AdError> {
        Ok(self.target.forward_plain(&self.encode(a, b)?)?[0])
    }

    pub fn sync_target(&mut self) {
        self.target = self.net.clone();
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSGL";
const CHECKPOINT_VERSION: u32 = 1;

/// Write parameter tensors as little-endian f64 arrays with a small header.
pub fn save_checkpoint(
    path: &Path,
    env_id: &str,
    seed: u64,
    tensors: &[Tensor],
) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let id = env_id.as_bytes();
    f.write_all(&(id.len() as u32).to_le_bytes())?;
    f.write_all(id)?;
    f.write_all(&seed.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        f.write_all(&(t.rows as u32).to_le_bytes())?;
        f.write_all(&(t.cols as u32).to_le_bytes())?;
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> io::Result<(String, u64, Vec<Tensor>)> {
    let mut f = File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> io::Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let env_id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        tensors.push(
            Tensor::new(rows, cols, data)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?,
        );
    }
    Ok((env_id, seed, tensors))
}
