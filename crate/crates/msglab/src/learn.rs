//! Gradient estimators and training updates.
//!
//! The sender's objective gradient comes in two flavors: the signaling
//! gradient, which differentiates through the receiver's policy via the
//! straight-through signal pathway in addition to the score term, and the
//! plain policy-gradient baseline that treats the signal as an action. On
//! top of either, obedience constraints compare the receiver's action
//! distribution under the realized signal against counterfactual signals
//! and penalize schemes the receiver would rather disobey, with fixed or
//! dual-gradient-descent multipliers. `train` wires these into the five
//! algorithm variants.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{Critic, CriticKind, ReceiverPolicy, SignalingScheme};
use crate::autodiff::{AdError, Tape, Tensor};
use crate::env::{EnvError, Environment, Trajectory, Transition};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty trajectory batch")]
    EmptyTrajectory,
    #[error("transition is missing its signal noise; sender gradients need the soft pathway")]
    MissingSoftSignal,
    #[error("expected {expected} per-transition values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pg,
    Pgoc,
    Dial,
    Sg,
    Sgoc,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pg => "pg",
            Algorithm::Pgoc => "pgoc",
            Algorithm::Dial => "dial",
            Algorithm::Sg => "sg",
            Algorithm::Sgoc => "sgoc",
        }
    }

    fn constrained(&self) -> bool {
        matches!(self, Algorithm::Pgoc | Algorithm::Sgoc)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pg" => Ok(Algorithm::Pg),
            "pgoc" => Ok(Algorithm::Pgoc),
            "dial" => Ok(Algorithm::Dial),
            "sg" => Ok(Algorithm::Sg),
            "sgoc" => Ok(Algorithm::Sgoc),
            other => Err(format!("unknown algorithm: {other}")),
        }
    }
}

/// How the honesty metric is measured at evaluation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HonestyProbe {
    /// |φ(σ₀|s₀) − φ(σ₀|s₁)| on two-state games, the exact definition.
    TwoState,
    /// Mean total-variation distance of per-state signal distributions from
    /// the batch average, a discriminability proxy for larger state spaces.
    BatchSpread,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_episodes: usize,
    pub total_episodes: usize,
    pub eval_interval: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub dgd: bool,
    pub lambda_lr: f64,
    pub temperature: f64,
    pub constraint_samples: usize,
    pub sync_interval: usize,
    pub hidden: Option<usize>,
    pub honesty_probe: HonestyProbe,
    /// Keep the sender at its random initialization (control arm).
    pub freeze_scheme: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            batch_episodes: 32,
            total_episodes: 20_000,
            eval_interval: 1000,
            lambda: 3.0,
            epsilon: 0.1,
            dgd: false,
            lambda_lr: 3e-4,
            temperature: 1.0,
            constraint_samples: 4,
            sync_interval: 50,
            hidden: None,
            honesty_probe: HonestyProbe::BatchSpread,
            freeze_scheme: false,
        }
    }
}

impl TrainConfig {
    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errs.push(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.lr_actor <= 0.0 {
            errs.push(format!("lr_actor must be positive, got {}", self.lr_actor));
        }
        if self.lr_critic <= 0.0 {
            errs.push(format!("lr_critic must be positive, got {}", self.lr_critic));
        }
        if self.lambda < 0.0 {
            errs.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.epsilon < 0.0 {
            errs.push(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.batch_episodes == 0 {
            errs.push("batch_episodes must be at least 1".into());
        }
        if self.eval_interval == 0 {
            errs.push("eval_interval must be at least 1".into());
        }
        if self.temperature <= 0.0 {
            errs.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.constraint_samples == 0 {
            errs.push("constraint_samples must be at least 1".into());
        }
        if self.sync_interval == 0 {
            errs.push("sync_interval must be at least 1".into());
        }
        if self.dgd && self.lambda_lr <= 0.0 {
            errs.push(format!("lambda_lr must be positive in dgd mode, got {}", self.lambda_lr));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// One evaluation point of a training run.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub seed: u64,
    pub episode: usize,
    pub reward_sender: f64,
    pub reward_receiver: f64,
    pub social_welfare: f64,
    pub honesty: f64,
    pub min_slack: f64,
    pub wallclock: f64,
}

/// Independent deterministic RNG stream for one component of a run.
pub fn rng_stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// splitmix-style mix of the run seed with a component tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Discounted returns (G^i_t, G^j_t), bootstrapping 0 past the end.
pub fn compute_returns(traj: &Trajectory, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.len();
    let mut gi = vec![0.0; n];
    let mut gj = vec![0.0; n];
    let mut acc_i = 0.0;
    let mut acc_j = 0.0;
    for t in (0..n).rev() {
        acc_i = traj.transitions[t].reward_sender + gamma * acc_i;
        acc_j = traj.transitions[t].reward_receiver + gamma * acc_j;
        gi[t] = acc_i;
        gj[t] = acc_j;
    }
    (gi, gj)
}

fn tensor_from_rows(rows: &[Vec<f64>]) -> Result<Tensor, AdError> {
    let cols = rows.first().map_or(0, |r| r.len());
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
    Tensor::new(rows.len(), cols, data)
}

/// Batch of transitions flattened into matrices for the tape.
struct FlatBatch<'a> {
    transitions: Vec<&'a Transition>,
    states: Tensor,
    obs: Tensor,
    noise: Tensor,
    sig_idx: Vec<usize>,
    act_idx: Vec<usize>,
    gi: Vec<f64>,
    gj: Vec<f64>,
}

impl<'a> FlatBatch<'a> {
    fn new(batch: &'a [Trajectory], gamma: f64, signal_count: usize) -> Result<Self, LearnError> {
        let mut transitions = Vec::new();
        let mut gi = Vec::new();
        let mut gj = Vec::new();
        for traj in batch {
            let (ti, tj) = compute_returns(traj, gamma);
            gi.extend(ti);
            gj.extend(tj);
            transitions.extend(traj.transitions.iter());
        }
        if transitions.is_empty() {
            return Err(LearnError::EmptyTrajectory);
        }
        for tr in &transitions {
            if tr.signal_noise.len() != signal_count {
                return Err(LearnError::MissingSoftSignal);
            }
        }
        let states = tensor_from_rows(
            &transitions.iter().map(|t| t.state.encoding.clone()).collect::<Vec<_>>(),
        )?;
        let obs = tensor_from_rows(
            &transitions.iter().map(|t| t.observation.encoding.clone()).collect::<Vec<_>>(),
        )?;
        let noise = tensor_from_rows(
            &transitions.iter().map(|t| t.signal_noise.clone()).collect::<Vec<_>>(),
        )?;
        let sig_idx = transitions.iter().map(|t| t.signal.category_index).collect();
        let act_idx = transitions.iter().map(|t| t.action.category_index).collect();
        Ok(FlatBatch {
            transitions,
            states,
            obs,
            noise,
            sig_idx,
            act_idx,
            gi,
            gj,
        })
    }

    fn len(&self) -> usize {
        self.transitions.len()
    }
}

// ---------------------------------------------------------------------------
// Receiver update
// ---------------------------------------------------------------------------

/// Advantage actor-critic step for the receiver. The critic is regressed to
/// Monte-Carlo returns; the policy ascends A·∇log π with the signal treated
/// as a fixed input, so nothing here moves the sender's parameters.
pub fn receiver_a2c_update(
    policy: &mut ReceiverPolicy,
    critic: &mut Critic,
    batch: &[Trajectory],
    gamma: f64,
    lr_actor: f64,
    lr_critic: f64,
) -> Result<f64, LearnError> {
    let flat = FlatBatch::new(batch, gamma, policy.signal_dim)?;
    let n = flat.len();

    let mut critic_rows = Vec::with_capacity(n);
    let mut advantages = Vec::with_capacity(n);
    for (tr, &g) in flat.transitions.iter().zip(flat.gj.iter()) {
        let enc = critic.encode(&tr.observation.encoding, &tr.signal.one_hot)?;
        let v = critic.net.forward_plain(&enc)?[0];
        advantages.push(g - v);
        critic_rows.push(enc);
    }

    // critic regression to returns
    let mut tape = Tape::new();
    let bound = critic.net.bind(&mut tape);
    let x = tape.constant(tensor_from_rows(&critic_rows)?);
    let target = tape.constant(Tensor::new(n, 1, flat.gj.clone())?);
    let v = critic.net.forward(&mut tape, &bound, x)?;
    let d = tape.sub(v, target)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean(sq)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).data[0];
    let grads = critic.net.tape_grads(&tape, &bound);
    critic.net.apply_grads(&grads, -lr_critic);

    // policy ascent on advantage-weighted log-likelihood
    let mut tape = Tape::new();
    let bound = policy.net.bind(&mut tape);
    let input_rows: Vec<Vec<f64>> = flat
        .transitions
        .iter()
        .map(|tr| {
            let mut row = tr.observation.encoding.clone();
            row.extend_from_slice(&tr.signal.one_hot);
            row
        })
        .collect();
    let x = tape.constant(tensor_from_rows(&input_rows)?);
    let logits = policy.net.forward(&mut tape, &bound, x)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather_cols(logp, &flat.act_idx)?;
    let adv = tape.constant(Tensor::new(n, 1, advantages)?);
    let weighted = tape.mul(picked, adv)?;
    let objective = tape.mean(weighted)?;
    tape.backward(objective)?;
    let grads = policy.net.tape_grads(&tape, &bound);
    policy.net.apply_grads(&grads, lr_actor);

    Ok(loss_value)
}

// ---------------------------------------------------------------------------
// Sender objective gradients
// ---------------------------------------------------------------------------

/// Monte-Carlo sender gradient with the receiver chain included: each step
/// contributes w_t·(∇_η log π(a|o,σ) + ∇_η log φ(σ|s)), where the first term
/// flows through the straight-through replay of the sampled signal.
pub fn signaling_gradient(
    scheme: &SignalingScheme,
    policy: &ReceiverPolicy,
    batch: &[Trajectory],
    weights: &[f64],
) -> Result<Vec<(Tensor, Tensor)>, LearnError> {
    let flat = FlatBatch::new(batch, 1.0, scheme.signal_count())?;
    let n = flat.len();
    if weights.len() != n {
        return Err(LearnError::LengthMismatch { expected: n, got: weights.len() });
    }

    let mut tape = Tape::new();
    let bound = scheme.net.bind(&mut tape);
    let x = tape.constant(flat.states.clone());
    let logits = scheme.net.forward(&mut tape, &bound, x)?;
    let logphi = tape.log_softmax(logits)?;
    let score = tape.gather_cols(logphi, &flat.sig_idx)?;

    let signal = tape.gumbel_softmax_with_noise(logits, &flat.noise, scheme.temperature, true)?;
    let pol_bound = policy.net.bind_const(&mut tape);
    let pol_input = if policy.obs_dim == 0 {
        signal
    } else {
        let obs = tape.constant(flat.obs.clone());
        tape.concat_cols(obs, signal)?
    };
    let pol_logits = policy.net.forward(&mut tape, &pol_bound, pol_input)?;
    let logpi = tape.log_softmax(pol_logits)?;
    let chain = tape.gather_cols(logpi, &flat.act_idx)?;

    let both = tape.add(chain, score)?;
    let w = tape.constant(Tensor::new(n, 1, weights.to_vec())?);
    let weighted = tape.mul(both, w)?;
    let objective = tape.mean(weighted)?;
    tape.backward(objective)?;
    Ok(scheme.net.tape_grads(&tape, &bound))
}

/// Signal-as-action baseline: w_t·∇_η log φ(σ|s) only.
pub fn pg_signal_gradient(
    scheme: &SignalingScheme,
    batch: &[Trajectory],
    weights: &[f64],
) -> Result<Vec<(Tensor, Tensor)>, LearnError> {
    let flat = FlatBatch::new(batch, 1.0, scheme.signal_count())?;
    let n = flat.len();
    if weights.len() != n {
        return Err(LearnError::LengthMismatch { expected: n, got: weights.len() });
    }
    let mut tape = Tape::new();
    let bound = scheme.net.bind(&mut tape);
    let x = tape.constant(flat.states.clone());
    let logits = scheme.net.forward(&mut tape, &bound, x)?;
    let logphi = tape.log_softmax(logits)?;
    let score = tape.gather_cols(logphi, &flat.sig_idx)?;
    let w = tape.constant(Tensor::new(n, 1, weights.to_vec())?);
    let weighted = tape.mul(score, w)?;
    let objective = tape.mean(weighted)?;
    tape.backward(objective)?;
    Ok(scheme.net.tape_grads(&tape, &bound))
}

// ---------------------------------------------------------------------------
// Obedience constraints
// ---------------------------------------------------------------------------

/// Sampled obedience constraint Ĉ(σ,σ') and its gradient w.r.t. the scheme.
#[derive(Debug, Clone)]
pub struct ConstraintEstimate {
    pub sigma: usize,
    pub sigma_prime: usize,
    pub value: f64,
    pub grad_eta: Vec<(Tensor, Tensor)>,
}

/// Estimate Ĉ(σ,σ') = (1/T) Σ_t φ(σ|s_t) Σ_a (π(a|o_t,σ) − π(a|o_t,σ')) Ŵ^j(s_t,a)
/// over a batch. The policy and critic are treated as constants, so the
/// gradient only flows through φ; the critic is read through its target copy.
pub fn constraint_value_and_grad(
    scheme: &SignalingScheme,
    policy: &ReceiverPolicy,
    critic_wj: &Critic,
    batch: &[Trajectory],
    sigma: usize,
    sigma_prime: usize,
) -> Result<ConstraintEstimate, LearnError> {
    if sigma == sigma_prime {
        return Ok(ConstraintEstimate {
            sigma,
            sigma_prime,
            value: 0.0,
            grad_eta: scheme.net.zero_grads_like(),
        });
    }
    let flat = FlatBatch::new(batch, 1.0, scheme.signal_count())?;
    let n = flat.len();
    let k = scheme.signal_count();
    let actions = policy.action_count();

    let mut c = Vec::with_capacity(n);
    for tr in &flat.transitions {
        let pi_a = policy.distribution(&tr.observation.encoding, &one_hot(sigma, k))?;
        let pi_b = policy.distribution(&tr.observation.encoding, &one_hot(sigma_prime, k))?;
        let mut acc = 0.0;
        for a in 0..actions {
            let w = critic_wj.eval_target(&tr.state.encoding, &one_hot(a, actions))?;
            acc += (pi_a[a] - pi_b[a]) * w;
        }
        c.push(acc);
    }

    let mut tape = Tape::new();
    let bound = scheme.net.bind(&mut tape);
    let x = tape.constant(flat.states.clone());
    let logits = scheme.net.forward(&mut tape, &bound, x)?;
    let probs = tape.softmax(logits)?;
    let phi = tape.gather_cols(probs, &vec![sigma; n])?;
    let cv = tape.constant(Tensor::new(n, 1, c)?);
    let terms = tape.mul(phi, cv)?;
    let chat = tape.mean(terms)?;
    let value = tape.value(chat).data[0];
    tape.backward(chat)?;
    Ok(ConstraintEstimate {
        sigma,
        sigma_prime,
        value,
        grad_eta: scheme.net.tape_grads(&tape, &bound),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierMode {
    /// Shared fixed λ for every constraint.
    Fixed,
    /// Per-pair multipliers by projected dual gradient descent.
    Dgd,
}

/// Multiplier bookkeeping shared by the constrained algorithms. Per-pair
/// obedience keeps a threshold of zero; the mean constraint carries the
/// honesty slack ε, applied before clamping.
#[derive(Debug, Clone)]
pub struct LagrangeState {
    pub mode: MultiplierMode,
    pub lambda: f64,
    pub epsilon: f64,
    pub lambda_lr: f64,
    pair: BTreeMap<(usize, usize), f64>,
    aggregate: f64,
}

impl LagrangeState {
    pub fn new(mode: MultiplierMode, lambda: f64, epsilon: f64, lambda_lr: f64) -> Self {
        LagrangeState {
            mode,
            lambda,
            epsilon,
            lambda_lr,
            pair: BTreeMap::new(),
            aggregate: 0.0,
        }
    }

    pub fn pair_multiplier(&self, sigma: usize, sigma_prime: usize) -> f64 {
        match self.mode {
            MultiplierMode::Fixed => self.lambda,
            MultiplierMode::Dgd => *self.pair.get(&(sigma, sigma_prime)).unwrap_or(&0.0),
        }
    }

    /// Penalty coefficient per estimate: the pair's multiplier when the
    /// pair is violated, plus the aggregate multiplier's share when the
    /// mean constraint sits below ε. Dual variables step afterwards,
    /// clamped at zero.
    pub fn coefficients(&mut self, values: &[(usize, usize, f64)]) -> Vec<f64> {
        if values.is_empty() {
            return Vec::new();
        }
        let p = values.len() as f64;
        let mean: f64 = values.iter().map(|&(_, _, v)| v).sum::<f64>() / p;
        let agg_mult = match self.mode {
            MultiplierMode::Fixed => self.lambda,
            MultiplierMode::Dgd => self.aggregate,
        };
        let agg_share = if mean - self.epsilon < 0.0 { agg_mult / p } else { 0.0 };
        let coefs = values
            .iter()
            .map(|&(s, s2, v)| {
                let lam = self.pair_multiplier(s, s2);
                (if v < 0.0 { lam } else { 0.0 }) + agg_share
            })
            .collect();
        if self.mode == MultiplierMode::Dgd {
            for &(s, s2, v) in values {
                let lam = self.pair.entry((s, s2)).or_insert(0.0);
                *lam = (*lam - self.lambda_lr * v).max(0.0);
            }
            self.aggregate = (self.aggregate - self.lambda_lr * (mean - self.epsilon)).max(0.0);
        }
        coefs
    }
}

/// Ascend the objective plus the active constraint penalties.
pub fn constrained_sender_update(
    scheme: &mut SignalingScheme,
    estimates: &[ConstraintEstimate],
    objective_grads: &[(Tensor, Tensor)],
    lagrange: &mut LagrangeState,
    lr: f64,
) {
    let values: Vec<(usize, usize, f64)> = estimates
        .iter()
        .map(|e| (e.sigma, e.sigma_prime, e.value))
        .collect();
    let coefs = lagrange.coefficients(&values);
    let mut direction: Vec<(Tensor, Tensor)> = objective_grads.to_vec();
    for (est, &coef) in estimates.iter().zip(coefs.iter()) {
        if coef == 0.0 {
            continue;
        }
        for (d, g) in direction.iter_mut().zip(est.grad_eta.iter()) {
            for (x, y) in d.0.data.iter_mut().zip(g.0.data.iter()) {
                *x += coef * y;
            }
            for (x, y) in d.1.data.iter_mut().zip(g.1.data.iter()) {
                *x += coef * y;
            }
        }
    }
    scheme.net.apply_grads(&direction, lr);
}

/// Realized-signal constraint sample: contributions grouped per (σ, σ')
/// pair, each step paired with `constraint_samples` counterfactual signals.
struct SampledPair {
    sigma: usize,
    sigma_prime: usize,
    value: f64,
    entries: Vec<(usize, f64)>,
}

fn sample_constraint_terms(
    policy: &ReceiverPolicy,
    critic_wj: &Critic,
    flat: &FlatBatch,
    signal_count: usize,
    action_count: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SampledPair>, f64), LearnError> {
    let n = flat.len();
    let k_eff = samples.min(signal_count.saturating_sub(1));
    if k_eff == 0 {
        return Ok((Vec::new(), 1.0));
    }
    let p_sample = k_eff as f64 / (signal_count - 1) as f64;
    let scale = n as f64 * p_sample;

    // per-step counterfactual policies and critic rows
    let mut pair_map: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    let mut pi_cache: Vec<Vec<f64>> = Vec::with_capacity(signal_count);
    let mut w_row = vec![0.0; action_count];
    for (t, tr) in flat.transitions.iter().enumerate() {
        pi_cache.clear();
        for sig in 0..signal_count {
            pi_cache.push(policy.distribution(&tr.observation.encoding, &one_hot(sig, signal_count))?);
        }
        for (a, w) in w_row.iter_mut().enumerate() {
            *w = critic_wj.eval_target(&tr.state.encoding, &one_hot(a, action_count))?;
        }
        let sigma = tr.signal.category_index;
        // draw k_eff distinct counterfactual signals
        let mut others: Vec<usize> = (0..signal_count).filter(|&s| s != sigma).collect();
        for pick in 0..k_eff {
            let j = pick + rng.gen_range(0..others.len() - pick);
            others.swap(pick, j);
            let sigma_prime = others[pick];
            let mut c = 0.0;
            for a in 0..action_count {
                c += (pi_cache[sigma][a] - pi_cache[sigma_prime][a]) * w_row[a];
            }
            pair_map.entry((sigma, sigma_prime)).or_default().push((t, c));
        }
    }
    let pairs = pair_map
        .into_iter()
        .map(|((sigma, sigma_prime), entries)| {
            let value = entries.iter().map(|&(_, c)| c).sum::<f64>() / scale;
            SampledPair {
                sigma,
                sigma_prime,
                value,
                entries,
            }
        })
        .collect();
    Ok((pairs, scale))
}

/// Single-backward gradient of Σ_pairs coef·Ĉ(σ,σ') in score form: each
/// contribution c_t becomes c_t·∇φ(σ|s_t)/φ(σ|s_t) through a ratio against
/// the detached probability.
fn fused_constraint_grads(
    scheme: &SignalingScheme,
    pairs: &[SampledPair],
    coefs: &[f64],
    states: &Tensor,
    scale: f64,
) -> Result<Vec<(Tensor, Tensor)>, LearnError> {
    let mut tape = Tape::new();
    let bound = scheme.net.bind(&mut tape);
    let x = tape.constant(states.clone());
    let logits = scheme.net.forward(&mut tape, &bound, x)?;
    let probs = tape.softmax(logits)?;
    let probs_now = tape.value(probs).clone();

    let mut weight = Tensor::zeros(probs_now.rows, probs_now.cols);
    let mut any = false;
    for (pair, &coef) in pairs.iter().zip(coefs.iter()) {
        if coef == 0.0 {
            continue;
        }
        for &(t, c) in &pair.entries {
            let phi = probs_now.get(t, pair.sigma).max(1e-300);
            let w = weight.get(t, pair.sigma) + coef * c / (scale * phi);
            weight.set(t, pair.sigma, w);
            any = true;
        }
    }
    if !any {
        return Ok(scheme.net.zero_grads_like());
    }
    let w = tape.constant(weight);
    let terms = tape.mul(probs, w)?;
    let penalty = tape.sum(terms)?;
    tape.backward(penalty)?;
    Ok(scheme.net.tape_grads(&tape, &bound))
}

// ---------------------------------------------------------------------------
// DIAL-style cooperative update
// ---------------------------------------------------------------------------

/// Move the sender to improve the receiver's own objective, with gradients
/// flowing back through the soft signal channel. The sender's reward never
/// enters.
pub fn dial_update(
    scheme: &mut SignalingScheme,
    policy: &ReceiverPolicy,
    critic_vj: &Critic,
    batch: &[Trajectory],
    gamma: f64,
    lr: f64,
) -> Result<(), LearnError> {
    let flat = FlatBatch::new(batch, gamma, scheme.signal_count())?;
    let n = flat.len();

    let mut adv = Vec::with_capacity(n);
    for (tr, &g) in flat.transitions.iter().zip(flat.gj.iter()) {
        let v = critic_vj.eval(&tr.observation.encoding, &tr.signal.one_hot)?;
        adv.push(g - v);
    }

    let mut tape = Tape::new();
    let bound = scheme.net.bind(&mut tape);
    let x = tape.constant(flat.states.clone());
    let logits = scheme.net.forward(&mut tape, &bound, x)?;
    let signal = tape.gumbel_softmax_with_noise(logits, &flat.noise, scheme.temperature, true)?;
    let pol_bound = policy.net.bind_const(&mut tape);
    let pol_input = if policy.obs_dim == 0 {
        signal
    } else {
        let obs = tape.constant(flat.obs.clone());
        tape.concat_cols(obs, signal)?
    };
    let pol_logits = policy.net.forward(&mut tape, &pol_bound, pol_input)?;
    let logpi = tape.log_softmax(pol_logits)?;
    let picked = tape.gather_cols(logpi, &flat.act_idx)?;
    let w = tape.constant(Tensor::new(n, 1, adv)?);
    let weighted = tape.mul(picked, w)?;
    let objective = tape.mean(weighted)?;
    tape.backward(objective)?;
    let grads = scheme.net.tape_grads(&tape, &bound);
    scheme.net.apply_grads(&grads, lr);
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn collect_batch(
    env: &mut dyn Environment,
    scheme: &SignalingScheme,
    policy: &ReceiverPolicy,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>, LearnError> {
    let mut batch = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut traj = Trajectory::default();
        let mut state = env.reset();
        loop {
            let observation = env.observe(&state);
            let (signal, noise) = scheme.sample(&state.encoding, rng)?;
            let action = policy.sample_action(&observation.encoding, &signal.one_hot, rng)?;
            let out = env.step(&state, action)?;
            let done = out.done;
            traj.transitions.push(Transition {
                state: state.clone(),
                observation,
                signal,
                signal_noise: noise.data,
                action,
                reward_sender: out.reward_sender,
                reward_receiver: out.reward_receiver,
                next_state: out.next_state.clone(),
                done,
            });
            if done {
                break;
            }
            state = out.next_state;
        }
        batch.push(traj);
    }
    Ok(batch)
}

fn regress_critic(
    critic: &mut Critic,
    rows: &[Vec<f64>],
    targets: &[f64],
    lr: f64,
) -> Result<f64, LearnError> {
    let n = rows.len();
    let mut tape = Tape::new();
    let bound = critic.net.bind(&mut tape);
    let x = tape.constant(tensor_from_rows(rows)?);
    let t = tape.constant(Tensor::new(n, 1, targets.to_vec())?);
    let v = critic.net.forward(&mut tape, &bound, x)?;
    let d = tape.sub(v, t)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean(sq)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data[0];
    let grads = critic.net.tape_grads(&tape, &bound);
    critic.net.apply_grads(&grads, -lr);
    Ok(value)
}

fn honesty_metric(
    probe: HonestyProbe,
    scheme: &SignalingScheme,
    flat: &FlatBatch,
) -> Result<f64, LearnError> {
    match probe {
        HonestyProbe::TwoState => {
            let d0 = scheme.distribution(&one_hot(0, 2))?;
            let d1 = scheme.distribution(&one_hot(1, 2))?;
            Ok((d0[0] - d1[0]).abs())
        }
        HonestyProbe::BatchSpread => {
            let n = flat.len();
            let k = scheme.signal_count();
            let mut dists = Vec::with_capacity(n);
            let mut mean = vec![0.0; k];
            for tr in &flat.transitions {
                let d = scheme.distribution(&tr.state.encoding)?;
                for (m, &p) in mean.iter_mut().zip(d.iter()) {
                    *m += p / n as f64;
                }
                dists.push(d);
            }
            let tv: f64 = dists
                .iter()
                .map(|d| {
                    0.5 * d
                        .iter()
                        .zip(mean.iter())
                        .map(|(&p, &m)| (p - m).abs())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            Ok(tv)
        }
    }
}

/// Value-only slack of the worst obedience constraint over a batch.
fn min_constraint_slack(
    scheme: &SignalingScheme,
    policy: &ReceiverPolicy,
    critic_wj: &Critic,
    flat: &FlatBatch,
    action_count: usize,
) -> Result<f64, LearnError> {
    let k = scheme.signal_count();
    if k < 2 {
        return Ok(0.0);
    }
    let n = flat.len();
    let mut sums = vec![vec![0.0; k]; k];
    let mut w_row = vec![0.0; action_count];
    let mut pi_cache: Vec<Vec<f64>> = Vec::with_capacity(k);
    for tr in &flat.transitions {
        let phi = scheme.distribution(&tr.state.encoding)?;
        pi_cache.clear();
        for sig in 0..k {
            pi_cache.push(policy.distribution(&tr.observation.encoding, &one_hot(sig, k))?);
        }
        for (a, w) in w_row.iter_mut().enumerate() {
            *w = critic_wj.eval_target(&tr.state.encoding, &one_hot(a, action_count))?;
        }
        for sig in 0..k {
            for sig2 in 0..k {
                if sig == sig2 {
                    continue;
                }
                let mut c = 0.0;
                for a in 0..action_count {
                    c += (pi_cache[sig][a] - pi_cache[sig2][a]) * w_row[a];
                }
                sums[sig][sig2] += phi[sig] * c;
            }
        }
    }
    let mut min = f64::INFINITY;
    for sig in 0..k {
        for sig2 in 0..k {
            if sig != sig2 {
                min = min.min(sums[sig][sig2] / n as f64);
            }
        }
    }
    Ok(min)
}

/// Run one seeded training loop and return the metrics stream.
pub fn train(
    algorithm: Algorithm,
    env: &mut dyn Environment,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<MetricsRow>, LearnError> {
    cfg.validate().map_err(LearnError::InvalidConfig)?;
    let spaces = env.spaces();
    let start = Instant::now();

    let mut scheme = SignalingScheme::new(
        spaces.state_dim,
        cfg.hidden,
        spaces.signal_count,
        cfg.temperature,
        &mut rng_stream(seed, "init-scheme"),
    );
    let mut policy = ReceiverPolicy::new(
        spaces.obs_dim,
        spaces.signal_count,
        cfg.hidden,
        spaces.action_count,
        &mut rng_stream(seed, "init-policy"),
    );
    let mut critic_vj = Critic::new(
        CriticKind::ReceiverV,
        spaces.obs_dim,
        spaces.signal_count,
        cfg.hidden,
        &mut rng_stream(seed, "init-critic-vj"),
    );
    let mut critic_vi = Critic::new(
        CriticKind::SenderVi,
        spaces.state_dim,
        0,
        cfg.hidden,
        &mut rng_stream(seed, "init-critic-vi"),
    );
    let mut critic_wi = Critic::new(
        CriticKind::SenderWi,
        spaces.state_dim,
        spaces.action_count,
        cfg.hidden,
        &mut rng_stream(seed, "init-critic-wi"),
    );
    let mut critic_wj = Critic::new(
        CriticKind::SenderWj,
        spaces.state_dim,
        spaces.action_count,
        cfg.hidden,
        &mut rng_stream(seed, "init-critic-wj"),
    );
    let mut rng_sample = rng_stream(seed, "sample");
    let mut rng_constraint = rng_stream(seed, "constraint");
    let mut lagrange = LagrangeState::new(
        if cfg.dgd { MultiplierMode::Dgd } else { MultiplierMode::Fixed },
        cfg.lambda,
        cfg.epsilon,
        cfg.lambda_lr,
    );
    let use_constraints =
        algorithm.constrained() && (cfg.lambda > 0.0 || cfg.epsilon > 0.0 || cfg.dgd);

    let mut metrics = Vec::new();
    let mut episodes_done = 0usize;
    let mut next_eval = cfg.eval_interval;
    let mut update_idx = 0usize;

    while episodes_done < cfg.total_episodes {
        let episodes = cfg.batch_episodes.min(cfg.total_episodes - episodes_done);
        let batch = collect_batch(env, &scheme, &policy, episodes, &mut rng_sample)?;
        episodes_done += episodes;
        let flat = FlatBatch::new(&batch, cfg.gamma, spaces.signal_count)?;

        // critics
        let vj_rows: Vec<Vec<f64>> = flat
            .transitions
            .iter()
            .map(|tr| critic_vj.encode(&tr.observation.encoding, &tr.signal.one_hot))
            .collect::<Result<_, _>>()?;
        let needs_vi = matches!(
            algorithm,
            Algorithm::Pg | Algorithm::Pgoc | Algorithm::Sg | Algorithm::Sgoc
        );
        let needs_wi = matches!(algorithm, Algorithm::Sg | Algorithm::Sgoc);
        let advantages_j: Vec<f64> = flat
            .transitions
            .iter()
            .zip(flat.gj.iter())
            .map(|(tr, &g)| {
                Ok(g - critic_vj.eval(&tr.observation.encoding, &tr.signal.one_hot)?)
            })
            .collect::<Result<_, LearnError>>()?;
        regress_critic(&mut critic_vj, &vj_rows, &flat.gj, cfg.lr_critic)?;
        if needs_vi {
            let rows: Vec<Vec<f64>> = flat
                .transitions
                .iter()
                .map(|tr| critic_vi.encode(&tr.state.encoding, &[]))
                .collect::<Result<_, _>>()?;
            regress_critic(&mut critic_vi, &rows, &flat.gi, cfg.lr_critic)?;
        }
        if needs_wi {
            let rows: Vec<Vec<f64>> = flat
                .transitions
                .iter()
                .map(|tr| {
                    critic_wi.encode(
                        &tr.state.encoding,
                        &one_hot(tr.action.category_index, spaces.action_count),
                    )
                })
                .collect::<Result<_, _>>()?;
            regress_critic(&mut critic_wi, &rows, &flat.gi, cfg.lr_critic)?;
        }
        {
            let rows: Vec<Vec<f64>> = flat
                .transitions
                .iter()
                .map(|tr| {
                    critic_wj.encode(
                        &tr.state.encoding,
                        &one_hot(tr.action.category_index, spaces.action_count),
                    )
                })
                .collect::<Result<_, _>>()?;
            regress_critic(&mut critic_wj, &rows, &flat.gj, cfg.lr_critic)?;
        }

        // receiver: policy ascent on precomputed advantages
        {
            let n = flat.len();
            let mut tape = Tape::new();
            let bound = policy.net.bind(&mut tape);
            let input_rows: Vec<Vec<f64>> = flat
                .transitions
                .iter()
                .map(|tr| {
                    let mut row = tr.observation.encoding.clone();
                    row.extend_from_slice(&tr.signal.one_hot);
                    row
                })
                .collect();
            let x = tape.constant(tensor_from_rows(&input_rows)?);
            let logits = policy.net.forward(&mut tape, &bound, x)?;
            let logp = tape.log_softmax(logits)?;
            let picked = tape.gather_cols(logp, &flat.act_idx)?;
            let adv = tape.constant(Tensor::new(n, 1, advantages_j.clone())?);
            let weighted = tape.mul(picked, adv)?;
            let objective = tape.mean(weighted)?;
            tape.backward(objective)?;
            let grads = policy.net.tape_grads(&tape, &bound);
            policy.net.apply_grads(&grads, cfg.lr_actor);
        }

        // sender
        if !cfg.freeze_scheme {
            match algorithm {
                Algorithm::Dial => {
                    dial_update(&mut scheme, &policy, &critic_vj, &batch, cfg.gamma, cfg.lr_actor)?;
                }
                Algorithm::Pg | Algorithm::Pgoc | Algorithm::Sg | Algorithm::Sgoc => {
                    let weights: Vec<f64> = if needs_wi {
                        flat.transitions
                            .iter()
                            .map(|tr| {
                                let w = critic_wi.eval(
                                    &tr.state.encoding,
                                    &one_hot(tr.action.category_index, spaces.action_count),
                                )?;
                                let v = critic_vi.eval(&tr.state.encoding, &[])?;
                                Ok(w - v)
                            })
                            .collect::<Result<_, LearnError>>()?
                    } else {
                        flat.transitions
                            .iter()
                            .zip(flat.gi.iter())
                            .map(|(tr, &g)| Ok(g - critic_vi.eval(&tr.state.encoding, &[])?))
                            .collect::<Result<_, LearnError>>()?
                    };
                    let objective = match algorithm {
                        Algorithm::Sg | Algorithm::Sgoc => {
                            signaling_gradient(&scheme, &policy, &batch, &weights)?
                        }
                        _ => pg_signal_gradient(&scheme, &batch, &weights)?,
                    };
                    if use_constraints {
                        let (pairs, scale) = sample_constraint_terms(
                            &policy,
                            &critic_wj,
                            &flat,
                            spaces.signal_count,
                            spaces.action_count,
                            cfg.constraint_samples,
                            &mut rng_constraint,
                        )?;
                        let values: Vec<(usize, usize, f64)> = pairs
                            .iter()
                            .map(|p| (p.sigma, p.sigma_prime, p.value))
                            .collect();
                        let coefs = lagrange.coefficients(&values);
                        let penalty =
                            fused_constraint_grads(&scheme, &pairs, &coefs, &flat.states, scale)?;
                        let mut direction = objective;
                        for (d, g) in direction.iter_mut().zip(penalty.iter()) {
                            for (x, y) in d.0.data.iter_mut().zip(g.0.data.iter()) {
                                *x += y;
                            }
                            for (x, y) in d.1.data.iter_mut().zip(g.1.data.iter()) {
                                *x += y;
                            }
                        }
                        scheme.net.apply_grads(&direction, cfg.lr_actor);
                    } else {
                        scheme.net.apply_grads(&objective, cfg.lr_actor);
                    }
                }
            }
        }

        update_idx += 1;
        if update_idx % cfg.sync_interval == 0 {
            critic_vj.sync_target();
            critic_vi.sync_target();
            critic_wi.sync_target();
            critic_wj.sync_target();
        }

        if episodes_done >= next_eval {
            while next_eval <= episodes_done {
                next_eval += cfg.eval_interval;
            }
            let mut ri = 0.0;
            let mut rj = 0.0;
            for traj in &batch {
                for tr in &traj.transitions {
                    ri += tr.reward_sender;
                    rj += tr.reward_receiver;
                }
            }
            let ri = ri / episodes as f64;
            let rj = rj / episodes as f64;
            metrics.push(MetricsRow {
                seed,
                episode: episodes_done,
                reward_sender: ri,
                reward_receiver: rj,
                social_welfare: ri + rj,
                honesty: honesty_metric(cfg.honesty_probe, &scheme, &flat)?,
                min_slack: min_constraint_slack(
                    &scheme,
                    &policy,
                    &critic_wj,
                    &flat,
                    spaces.action_count,
                )?,
                wallclock: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(metrics)
}
