//! Markov signaling game environments.
//!
//! A game is the tuple (sender, receiver, S, O, Sigma, A, R^i, R^j, p, q):
//! each step the sender observes the state, emits a signal, the receiver
//! acts on its observation plus the signal, and both collect rewards that
//! depend only on (state, action). Two instantiations live here: the
//! recommendation-letter persuasion task and the reaching-goals gridworld.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action index {0} out of range (|A| = {1})")]
    InvalidAction(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsMode {
    NoObs,
    PosObs,
    FullObs,
}

impl std::str::FromStr for ObsMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "noobs" | "no-obs" | "no" => Ok(ObsMode::NoObs),
            "posobs" | "pos-obs" | "pos" => Ok(ObsMode::PosObs),
            "fullobs" | "full-obs" | "full" => Ok(ObsMode::FullObs),
            other => Err(format!("unknown obs mode: {other}")),
        }
    }
}

/// Full environment state as seen by the sender.
#[derive(Debug, Clone, PartialEq)]
pub struct MsgState {
    pub encoding: Vec<f64>,
    pub step_index: usize,
}

/// Receiver-side observation: a deterministic projection of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub encoding: Vec<f64>,
}

/// A signal category together with the vector form the receiver consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub category_index: usize,
    pub one_hot: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub category_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spaces {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub signal_count: usize,
    pub action_count: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: MsgState,
    pub reward_sender: f64,
    pub reward_receiver: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn spaces(&self) -> Spaces;
    fn reset(&mut self) -> MsgState;
    fn observe(&self, state: &MsgState) -> Observation;
    fn step(&mut self, state: &MsgState, action: Action) -> Result<StepOutcome, EnvError>;
}

// ---------------------------------------------------------------------------
// Recommendation Letter
// ---------------------------------------------------------------------------

pub const REC_STRONG: usize = 0;
pub const REC_WEAK: usize = 1;
pub const REC_HIRE: usize = 0;
pub const REC_NO_HIRE: usize = 1;

/// Prior probability that a candidate is strong.
pub const REC_PRIOR_STRONG: f64 = 1.0 / 3.0;

/// A professor writes letters for a stream of i.i.d. candidates; an HR
/// department decides whether to hire each one. The receiver sees nothing
/// but the letter, so the observation is empty.
pub struct RecommendationLetter {
    stream_len: usize,
    rng: ChaCha8Rng,
}

impl RecommendationLetter {
    /// `stream_len` is the number of candidates per episode. The task has no
    /// state coupling, so the default of one candidate per episode matches
    /// the one-shot persuasion structure while fitting the trajectory
    /// interface.
    pub fn new(stream_len: usize, seed: u64) -> Self {
        RecommendationLetter {
            stream_len: stream_len.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw_state(&mut self, step_index: usize) -> MsgState {
        let strong = self.rng.gen::<f64>() < REC_PRIOR_STRONG;
        let mut encoding = vec![0.0; 2];
        encoding[if strong { REC_STRONG } else { REC_WEAK }] = 1.0;
        MsgState {
            encoding,
            step_index,
        }
    }

    pub fn state_index(state: &MsgState) -> usize {
        if state.encoding[REC_STRONG] == 1.0 {
            REC_STRONG
        } else {
            REC_WEAK
        }
    }

    /// Sender and receiver payoffs w(s, a).
    pub fn payoffs(state_index: usize, action_index: usize) -> (f64, f64) {
        match (state_index, action_index) {
            (REC_STRONG, REC_HIRE) => (1.0, 1.0),
            (REC_WEAK, REC_HIRE) => (1.0, -1.0),
            (_, REC_NO_HIRE) => (0.0, 0.0),
            _ => unreachable!(),
        }
    }
}

impl Environment for RecommendationLetter {
    fn spaces(&self) -> Spaces {
        Spaces {
            state_dim: 2,
            obs_dim: 0,
            signal_count: 2,
            action_count: 2,
            horizon: self.stream_len,
        }
    }

    fn reset(&mut self) -> MsgState {
        self.draw_state(0)
    }

    fn observe(&self, _state: &MsgState) -> Observation {
        // The letters are the only source of information.
        Observation { encoding: vec![] }
    }

    fn step(&mut self, state: &MsgState, action: Action) -> Result<StepOutcome, EnvError> {
        if action.category_index >= 2 {
            return Err(EnvError::InvalidAction(action.category_index, 2));
        }
        let s = Self::state_index(state);
        let (ri, rj) = Self::payoffs(s, action.category_index);
        let next_index = state.step_index + 1;
        let done = next_index >= self.stream_len;
        Ok(StepOutcome {
            next_state: self.draw_state(if done { 0 } else { next_index }),
            reward_sender: ri,
            reward_receiver: rj,
            done,
        })
    }
}

// ---------------------------------------------------------------------------
// Reaching Goals
// ---------------------------------------------------------------------------

pub const GOALS_HORIZON: usize = 50;

/// Gridworld where the receiver moves toward apples: the sender is paid when
/// the receiver collects the red apple, the receiver when it collects the
/// green one. State encoding is three stacked one-hot n*n channels
/// (receiver position, red goal, green goal), flattened.
pub struct ReachingGoals {
    pub n: usize,
    pub obs_mode: ObsMode,
    reach_reward: f64,
    penalty_scale: f64,
    rng: ChaCha8Rng,
}

impl ReachingGoals {
    pub fn new(n: usize, obs_mode: ObsMode, seed: u64) -> Self {
        assert!(n >= 2, "grid must be at least 2x2");
        // Reward amplification: 20/5 on the 3x3 map, 12/3.5 on larger grids.
        let (reach_reward, penalty_scale) = if n <= 3 { (20.0, 5.0) } else { (12.0, 3.5) };
        ReachingGoals {
            n,
            obs_mode,
            reach_reward,
            penalty_scale,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn cells(&self) -> usize {
        self.n * self.n
    }

    fn random_cell_excluding(&mut self, exclude: usize) -> usize {
        loop {
            let c = self.rng.gen_range(0..self.cells());
            if c != exclude {
                return c;
            }
        }
    }

    fn encode(&self, receiver: usize, red: usize, green: usize, step_index: usize) -> MsgState {
        let cells = self.cells();
        let mut encoding = vec![0.0; 3 * cells];
        encoding[receiver] = 1.0;
        encoding[cells + red] = 1.0;
        encoding[2 * cells + green] = 1.0;
        MsgState {
            encoding,
            step_index,
        }
    }

    pub fn decode(&self, state: &MsgState) -> (usize, usize, usize) {
        let cells = self.cells();
        let pos = |chan: usize| {
            state.encoding[chan * cells..(chan + 1) * cells]
                .iter()
                .position(|&v| v == 1.0)
                .expect("channel must contain a one-hot cell")
        };
        (pos(0), pos(1), pos(2))
    }

    fn manhattan(&self, a: usize, b: usize) -> f64 {
        let n = self.n;
        let (ar, ac) = (a / n, a % n);
        let (br, bc) = (b / n, b % n);
        (ar.abs_diff(br) + ac.abs_diff(bc)) as f64
    }
}

impl Environment for ReachingGoals {
    fn spaces(&self) -> Spaces {
        let cells = self.cells();
        let obs_dim = match self.obs_mode {
            ObsMode::NoObs => cells,
            ObsMode::PosObs => cells,
            ObsMode::FullObs => 2 * cells,
        };
        Spaces {
            state_dim: 3 * cells,
            obs_dim,
            signal_count: cells,
            action_count: 4,
            horizon: GOALS_HORIZON,
        }
    }

    fn reset(&mut self) -> MsgState {
        let receiver = self.rng.gen_range(0..self.cells());
        let red = self.random_cell_excluding(receiver);
        let green = self.random_cell_excluding(receiver);
        self.encode(receiver, red, green, 0)
    }

    fn observe(&self, state: &MsgState) -> Observation {
        let cells = self.cells();
        let (receiver, _red, green) = self.decode(state);
        let encoding = match self.obs_mode {
            ObsMode::NoObs => vec![0.0; cells],
            ObsMode::PosObs => {
                let mut v = vec![0.0; cells];
                v[receiver] = 1.0;
                v
            }
            ObsMode::FullObs => {
                let mut v = vec![0.0; 2 * cells];
                v[receiver] = 1.0;
                v[cells + green] = 1.0;
                v
            }
        };
        Observation { encoding }
    }

    fn step(&mut self, state: &MsgState, action: Action) -> Result<StepOutcome, EnvError> {
        if action.category_index >= 4 {
            return Err(EnvError::InvalidAction(action.category_index, 4));
        }
        let n = self.n;
        let (receiver, mut red, mut green) = self.decode(state);
        let (mut r, mut c) = (receiver / n, receiver % n);
        match action.category_index {
            0 => r = r.saturating_sub(1),            // up
            1 => r = (r + 1).min(n - 1),             // down
            2 => c = c.saturating_sub(1),            // left
            3 => c = (c + 1).min(n - 1),             // right
            _ => unreachable!(),
        }
        let pos = r * n + c;

        // Distance penalties on the post-move, pre-respawn layout, normalized
        // by the map diameter so magnitude is map-independent.
        let diameter = 2.0 * (n as f64 - 1.0);
        let mut reward_sender = -self.penalty_scale * self.manhattan(pos, red) / diameter;
        let mut reward_receiver = -self.penalty_scale * self.manhattan(pos, green) / diameter;

        // Collection pays the owner; coincident goals pay both.
        if pos == red {
            reward_sender += self.reach_reward;
            red = self.random_cell_excluding(pos);
        }
        if pos == green {
            reward_receiver += self.reach_reward;
            green = self.random_cell_excluding(pos);
        }

        let next_index = state.step_index + 1;
        let done = next_index >= GOALS_HORIZON;
        Ok(StepOutcome {
            next_state: self.encode(pos, red, green, if done { 0 } else { next_index }),
            reward_sender,
            reward_receiver,
            done,
        })
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One environment step plus everything the updates need to replay it,
/// including the Gumbel noise that produced the signal (the soft pathway).
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: MsgState,
    pub observation: Observation,
    pub signal: Signal,
    pub signal_noise: Vec<f64>,
    pub action: Action,
    pub reward_sender: f64,
    pub reward_receiver: f64,
    pub next_state: MsgState,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recletter_prior_frequency() {
        let mut env = RecommendationLetter::new(1, 123);
        let n = 100_000;
        let mut strong = 0usize;
        for _ in 0..n {
            let s = env.reset();
            if RecommendationLetter::state_index(&s) == REC_STRONG {
                strong += 1;
            }
        }
        let f = strong as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.01, "strong frequency {f}");
    }

    #[test]
    fn recletter_payoffs() {
        let mut env = RecommendationLetter::new(1, 0);
        let mut strong_state = env.reset();
        strong_state.encoding = vec![1.0, 0.0];
        let out = env
            .step(&strong_state, Action { category_index: REC_HIRE })
            .unwrap();
        assert_eq!((out.reward_sender, out.reward_receiver), (1.0, 1.0));

        let mut weak_state = strong_state.clone();
        weak_state.encoding = vec![0.0, 1.0];
        let out = env
            .step(&weak_state, Action { category_index: REC_HIRE })
            .unwrap();
        assert_eq!((out.reward_sender, out.reward_receiver), (1.0, -1.0));
        let out = env
            .step(&weak_state, Action { category_index: REC_NO_HIRE })
            .unwrap();
        assert_eq!((out.reward_sender, out.reward_receiver), (0.0, 0.0));
    }

    #[test]
    fn recletter_observation_is_empty() {
        let mut env = RecommendationLetter::new(3, 5);
        let s = env.reset();
        assert!(env.observe(&s).encoding.is_empty());
    }

    #[test]
    fn recletter_invalid_action() {
        let mut env = RecommendationLetter::new(1, 0);
        let s = env.reset();
        assert!(env.step(&s, Action { category_index: 2 }).is_err());
    }

    #[test]
    fn goals_reset_layout() {
        let mut env = ReachingGoals::new(3, ObsMode::PosObs, 9);
        for _ in 0..500 {
            let s = env.reset();
            let (recv, red, green) = env.decode(&s);
            assert!(recv < 9 && red < 9 && green < 9);
            assert_ne!(recv, red);
            assert_ne!(recv, green);
        }
    }

    #[test]
    fn goals_spaces() {
        let e3 = ReachingGoals::new(3, ObsMode::PosObs, 0);
        let s = e3.spaces();
        assert_eq!(
            (s.state_dim, s.obs_dim, s.signal_count, s.action_count, s.horizon),
            (27, 9, 9, 4, 50)
        );
        let e5 = ReachingGoals::new(5, ObsMode::PosObs, 0);
        let s = e5.spaces();
        assert_eq!(
            (s.state_dim, s.obs_dim, s.signal_count, s.action_count, s.horizon),
            (75, 25, 25, 4, 50)
        );
    }

    #[test]
    fn goals_pos_obs_one_hot() {
        let env = ReachingGoals::new(3, ObsMode::PosObs, 0);
        // receiver at cell (1,2) -> flat index 5
        let state = env.encode(5, 0, 1, 0);
        let obs = env.observe(&state);
        let mut expected = vec![0.0; 9];
        expected[5] = 1.0;
        assert_eq!(obs.encoding, expected);
    }

    #[test]
    fn goals_no_obs_all_zero() {
        let env = ReachingGoals::new(3, ObsMode::NoObs, 0);
        let state = env.encode(4, 0, 1, 0);
        assert_eq!(env.observe(&state).encoding, vec![0.0; 9]);
    }

    #[test]
    fn goals_wall_clipping_keeps_penalties() {
        let mut env = ReachingGoals::new(3, ObsMode::PosObs, 1);
        // receiver in top-left corner pushing up
        let state = env.encode(0, 8, 7, 0);
        let out = env.step(&state, Action { category_index: 0 }).unwrap();
        let (recv, _, _) = env.decode(&out.next_state);
        assert_eq!(recv, 0);
        assert!(out.reward_sender < 0.0);
        assert!(out.reward_receiver < 0.0);
    }

    #[test]
    fn goals_collection_and_respawn() {
        let mut env = ReachingGoals::new(3, ObsMode::PosObs, 2);
        // receiver at 4, green at 5; moving right collects it
        let state = env.encode(4, 0, 5, 0);
        let out = env.step(&state, Action { category_index: 3 }).unwrap();
        assert!(out.reward_receiver > 19.0);
        let (recv, red, green) = env.decode(&out.next_state);
        assert_eq!(recv, 5);
        assert_eq!(red, 0);
        assert_ne!(green, 5, "respawned goal must avoid the receiver");
    }

    #[test]
    fn goals_episode_terminates_at_horizon() {
        let mut env = ReachingGoals::new(3, ObsMode::PosObs, 3);
        let mut state = env.reset();
        let mut steps = 0;
        loop {
            let out = env.step(&state, Action { category_index: 1 }).unwrap();
            steps += 1;
            if out.done {
                break;
            }
            state = out.next_state;
        }
        assert_eq!(steps, GOALS_HORIZON);
    }

    #[test]
    fn goals_exactly_one_goal_per_channel() {
        let mut env = ReachingGoals::new(3, ObsMode::PosObs, 4);
        let mut state = env.reset();
        for i in 0..300 {
            let a = Action { category_index: i % 4 };
            let out = env.step(&state, a).unwrap();
            for chan in 0..3 {
                let ones: f64 = out.next_state.encoding[chan * 9..(chan + 1) * 9].iter().sum();
                assert_eq!(ones, 1.0);
            }
            state = if out.done { env.reset() } else { out.next_state };
        }
    }
}
