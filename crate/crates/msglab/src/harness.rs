//! Experiment orchestration: config parsing, seeded runs with CSV output,
//! the honesty sweep over penalty grids, and the self-check suite that
//! validates the learned-estimator stack against closed-form oracles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use thiserror::Error;

use crate::agents::SignalingScheme;
use crate::env::{Environment, ObsMode, ReachingGoals, RecommendationLetter};
use crate::learn::{
    self, derive_seed, one_hot, rng_stream, Algorithm, HonestyProbe, LearnError, MetricsRow,
    TrainConfig,
};
use crate::oracle::{self, ExactScheme, TabularGame, TabularMsg};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvChoice {
    RecLetter,
    Goals { n: usize, obs: ObsMode },
}

impl EnvChoice {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "recletter" => Ok(EnvChoice::RecLetter),
            "goals3" => Ok(EnvChoice::Goals { n: 3, obs: ObsMode::PosObs }),
            "goals5" => Ok(EnvChoice::Goals { n: 5, obs: ObsMode::PosObs }),
            other => Err(format!("unknown env: {other} (expected recletter, goals3, goals5)")),
        }
    }

    pub fn name(&self) -> String {
        match self {
            EnvChoice::RecLetter => "recletter".into(),
            EnvChoice::Goals { n, .. } => format!("goals{n}"),
        }
    }
}

/// Build a fresh environment instance for one seeded run. The environment
/// gets its own derived RNG stream so run components stay independent.
pub fn make_env(choice: EnvChoice, seed: u64) -> Box<dyn Environment> {
    match choice {
        EnvChoice::RecLetter => Box::new(RecommendationLetter::new(1, derive_seed(seed, "env"))),
        EnvChoice::Goals { n, obs } => Box::new(ReachingGoals::new(n, obs, derive_seed(seed, "env"))),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub env: EnvChoice,
    pub seed_start: u64,
    pub seed_end: u64,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (self.seed_start..self.seed_end).collect()
    }

    /// Assemble a config from `key = value` pairs: file entries first, then
    /// command-line overrides, which win. Every violation is reported.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, Vec<String>> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in pairs {
            map.insert(k.clone(), v.clone());
        }
        let mut errs = Vec::new();

        let env = match map.get("env") {
            Some(v) => match EnvChoice::parse(v) {
                Ok(e) => e,
                Err(e) => {
                    errs.push(e);
                    EnvChoice::RecLetter
                }
            },
            None => EnvChoice::RecLetter,
        };
        let mut env = env;
        if let Some(v) = map.get("obs") {
            match (env, v.parse::<ObsMode>()) {
                (EnvChoice::Goals { n, .. }, Ok(obs)) => env = EnvChoice::Goals { n, obs },
                (EnvChoice::RecLetter, Ok(_)) => {
                    errs.push("obs only applies to the gridworld envs".into())
                }
                (_, Err(e)) => errs.push(e),
            }
        }

        // environment-specific training defaults, overridable below
        let mut train = TrainConfig::default();
        match env {
            EnvChoice::RecLetter => {
                train.gamma = 1.0;
                train.hidden = None;
                train.honesty_probe = HonestyProbe::TwoState;
            }
            EnvChoice::Goals { .. } => {
                train.gamma = 0.99;
                train.hidden = Some(64);
                train.honesty_probe = HonestyProbe::BatchSpread;
            }
        }

        let mut cfg = ExperimentConfig {
            algorithm: Algorithm::Sgoc,
            env,
            seed_start: 0,
            seed_end: 1,
            jobs: 1,
            out_dir: PathBuf::from("out"),
            train,
        };

        macro_rules! num {
            ($field:expr, $key:expr, $v:expr) => {
                match $v.parse() {
                    Ok(x) => $field = x,
                    Err(_) => errs.push(format!("{}: cannot parse '{}'", $key, $v)),
                }
            };
        }

        for (key, v) in &map {
            match key.as_str() {
                "env" | "obs" => {}
                "algo" => match v.parse() {
                    Ok(a) => cfg.algorithm = a,
                    Err(e) => errs.push(e),
                },
                "seeds" => match parse_seed_range(v) {
                    Ok((a, b)) => {
                        cfg.seed_start = a;
                        cfg.seed_end = b;
                    }
                    Err(e) => errs.push(e),
                },
                "jobs" => num!(cfg.jobs, key, v),
                "out" => cfg.out_dir = PathBuf::from(v),
                "gamma" => num!(cfg.train.gamma, key, v),
                "lr_actor" => num!(cfg.train.lr_actor, key, v),
                "lr_critic" => num!(cfg.train.lr_critic, key, v),
                "batch_episodes" => num!(cfg.train.batch_episodes, key, v),
                "total_episodes" => num!(cfg.train.total_episodes, key, v),
                "eval_interval" => num!(cfg.train.eval_interval, key, v),
                "lambda" => num!(cfg.train.lambda, key, v),
                "epsilon" => num!(cfg.train.epsilon, key, v),
                "dgd" => num!(cfg.train.dgd, key, v),
                "lambda_lr" => num!(cfg.train.lambda_lr, key, v),
                "temperature" => num!(cfg.train.temperature, key, v),
                "constraint_samples" => num!(cfg.train.constraint_samples, key, v),
                "sync_interval" => num!(cfg.train.sync_interval, key, v),
                "freeze_scheme" => num!(cfg.train.freeze_scheme, key, v),
                "hidden" => {
                    if v.eq_ignore_ascii_case("none") {
                        cfg.train.hidden = None;
                    } else {
                        match v.parse() {
                            Ok(h) => cfg.train.hidden = Some(h),
                            Err(_) => errs.push(format!("hidden: cannot parse '{v}'")),
                        }
                    }
                }
                "honesty" => match v.to_ascii_lowercase().as_str() {
                    "two-state" | "twostate" => cfg.train.honesty_probe = HonestyProbe::TwoState,
                    "batch-spread" | "batchspread" => {
                        cfg.train.honesty_probe = HonestyProbe::BatchSpread
                    }
                    other => errs.push(format!("honesty: unknown probe '{other}'")),
                },
                other => errs.push(format!("unknown config key: {other}")),
            }
        }

        if cfg.seed_start >= cfg.seed_end {
            errs.push(format!(
                "seeds: empty range {}..{}",
                cfg.seed_start, cfg.seed_end
            ));
        }
        if cfg.jobs == 0 {
            errs.push("jobs must be at least 1".into());
        }
        if let Err(more) = cfg.train.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    pub fn from_file_and_overrides(
        path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, HarnessError> {
        let mut pairs = Vec::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            pairs.extend(parse_kv(&text).map_err(HarnessError::Config)?);
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs).map_err(HarnessError::Config)
    }
}

/// Parse a flat `key = value` document: one pair per line, `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, Vec<String>> {
    let mut pairs = Vec::new();
    let mut errs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => errs.push(format!("line {}: expected key = value, got '{line}'", lineno + 1)),
        }
    }
    if errs.is_empty() {
        Ok(pairs)
    } else {
        Err(errs)
    }
}

fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("seeds: expected a..b, got '{s}'"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("seeds: bad start '{a}'"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("seeds: bad end '{b}'"))?;
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

/// Train every seed (up to `jobs` in parallel) and return the per-seed
/// metric streams in seed order. No files are written.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<Vec<MetricsRow>>, HarnessError> {
    let seeds = cfg.seeds();
    let mut results: Vec<Vec<MetricsRow>> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(cfg.jobs.max(1)) {
        let outputs = thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    scope.spawn(move || {
                        let mut env = make_env(cfg.env, seed);
                        learn::train(cfg.algorithm, env.as_mut(), &cfg.train, seed)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect::<Vec<_>>()
        });
        for out in outputs {
            results.push(out?);
        }
    }
    Ok(results)
}

const SEED_CSV_HEADER: &str =
    "episode,reward_sender,reward_receiver,social_welfare,honesty,min_slack";

/// Run every seed and write one CSV per seed plus a cross-seed aggregate.
/// Per-seed files carry no wallclock column so identical seeds produce
/// byte-identical files; timing lives in the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<Vec<MetricsRow>>, HarnessError> {
    let results = run_seeds(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;

    for (seed, rows) in cfg.seeds().iter().zip(results.iter()) {
        let mut text = String::from(SEED_CSV_HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.episode, r.reward_sender, r.reward_receiver, r.social_welfare, r.honesty,
                r.min_slack
            ));
        }
        fs::write(cfg.out_dir.join(format!("seed_{seed}.csv")), text)?;
    }

    let mut agg = String::from(
        "episode,reward_sender_mean,reward_sender_std,reward_receiver_mean,reward_receiver_std,\
         social_welfare_mean,social_welfare_std,honesty_mean,honesty_std,min_slack_mean,\
         min_slack_std,wallclock_mean",
    );
    agg.push('\n');
    let points = results.iter().map(|r| r.len()).min().unwrap_or(0);
    for t in 0..points {
        let col = |f: &dyn Fn(&MetricsRow) -> f64| -> (f64, f64) {
            mean_std(&results.iter().map(|r| f(&r[t])).collect::<Vec<_>>())
        };
        let (ri_m, ri_s) = col(&|r| r.reward_sender);
        let (rj_m, rj_s) = col(&|r| r.reward_receiver);
        let (w_m, w_s) = col(&|r| r.social_welfare);
        let (h_m, h_s) = col(&|r| r.honesty);
        let (s_m, s_s) = col(&|r| r.min_slack);
        let (wc_m, _) = col(&|r| r.wallclock);
        agg.push_str(&format!(
            "{},{ri_m},{ri_s},{rj_m},{rj_s},{w_m},{w_s},{h_m},{h_s},{s_m},{s_s},{wc_m}\n",
            results[0][t].episode
        ));
    }
    fs::write(cfg.out_dir.join("aggregate.csv"), agg)?;
    Ok(results)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean honesty over the final tenth of a run's evaluation points.
pub fn final_honesty(rows: &[MetricsRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let tail = (rows.len() / 10).max(1);
    rows[rows.len() - tail..].iter().map(|r| r.honesty).sum::<f64>() / tail as f64
}

#[derive(Debug, Clone, Copy)]
pub struct SweepCell {
    pub lambda: f64,
    pub epsilon: f64,
    pub honesty: f64,
}

/// Train the configured algorithm at every (λ, ε) grid point and record the
/// final honesty, averaged across seeds. Writes `sweep.csv` in the out dir.
pub fn run_honesty_sweep(
    cfg: &ExperimentConfig,
    lambda_grid: &[f64],
    epsilon_grid: &[f64],
) -> Result<Vec<SweepCell>, HarnessError> {
    let mut cells = Vec::new();
    for &lambda in lambda_grid {
        for &epsilon in epsilon_grid {
            let mut point = cfg.clone();
            point.train.lambda = lambda;
            point.train.epsilon = epsilon;
            let results = run_seeds(&point)?;
            let honesty = if results.is_empty() {
                0.0
            } else {
                results.iter().map(|r| final_honesty(r)).sum::<f64>() / results.len() as f64
            };
            cells.push(SweepCell { lambda, epsilon, honesty });
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut text = String::from("lambda,epsilon,honesty\n");
    for c in &cells {
        text.push_str(&format!("{},{},{}\n", c.lambda, c.epsilon, c.honesty));
    }
    fs::write(cfg.out_dir.join("sweep.csv"), text)?;
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Oracle self-check suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Cross-validate the closed-form machinery and the sampled estimators.
/// Every check reports pass/fail with a measured detail string; callers
/// should exit nonzero if any check fails.
pub fn run_oracle_suite() -> Vec<OracleCheck> {
    let mut checks = Vec::new();
    let game = TabularGame::recommendation_letter();

    // 1. the persuasion LP reaches the known optimum
    {
        let (scheme, value) = oracle::solve_persuasion_lp(&game).expect("letter LP");
        let target = 2.0 / 3.0;
        let ok = (value - target).abs() <= 1e-9
            && (scheme.phi[0][0] - 1.0).abs() <= 1e-6
            && (scheme.phi[1][0] - 0.5).abs() <= 1e-6;
        checks.push(OracleCheck {
            name: "persuasion-lp-optimum",
            passed: ok,
            detail: format!(
                "value {value:.12} (target {target:.12}), scheme [[{:.6},{:.6}],[{:.6},{:.6}]]",
                scheme.phi[0][0], scheme.phi[0][1], scheme.phi[1][0], scheme.phi[1][1]
            ),
        });
    }

    // 2. obedience audit accepts the optimum and flags blind hype
    {
        let (optimal, _) = oracle::solve_persuasion_lp(&game).expect("letter LP");
        let good = oracle::check_incentive_compatibility(&game, &optimal);
        let accepts = good
            .iter()
            .filter(|r| r.reachable)
            .all(|r| r.follows && r.slack >= -1e-9);
        let hype = ExactScheme { phi: vec![vec![1.0, 0.0], vec![1.0, 0.0]] };
        let bad = oracle::check_incentive_compatibility(&game, &hype);
        let flagged = bad
            .iter()
            .any(|r| r.reachable && !r.follows && (r.slack + 1.0 / 3.0).abs() <= 1e-9);
        checks.push(OracleCheck {
            name: "incentive-compatibility-audit",
            passed: accepts && flagged,
            detail: format!(
                "optimum slacks {:?}, always-recommend slack {:?}",
                good.iter().map(|r| r.slack).collect::<Vec<_>>(),
                bad.iter().map(|r| r.slack).collect::<Vec<_>>()
            ),
        });
    }

    // 3. chain evaluation reproduces the closed-form letter values
    {
        let msg = TabularMsg::recommendation_letter();
        let obedient = |phi_w: f64| -> (f64, f64) {
            let phi = vec![vec![1.0, 0.0], vec![phi_w, 1.0 - phi_w]];
            let pi = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
            let (vi, vj, _) = oracle::exact_msg_value(&msg, &phi, &pi).expect("chain value");
            (vi, vj)
        };
        let (v_opt_i, v_opt_j) = obedient(0.5);
        let eps = 0.1;
        let (v_eps_i, v_eps_j) = obedient(0.5 - eps);
        let ok = (v_opt_i - 2.0 / 3.0).abs() <= 1e-9
            && v_opt_j.abs() <= 1e-9
            && (v_eps_i - (2.0 / 3.0 - 2.0 * eps / 3.0)).abs() <= 1e-9
            && (v_eps_j - 2.0 * eps / 3.0).abs() <= 1e-9;
        checks.push(OracleCheck {
            name: "chain-value-consistency",
            passed: ok,
            detail: format!(
                "boundary ({v_opt_i:.12}, {v_opt_j:.12}), hedged ({v_eps_i:.12}, {v_eps_j:.12})"
            ),
        });
    }

    // 4. sampled signaling gradient against finite differences of the exact
    // value; the straight-through receiver chain is included as specified
    checks.push(signaling_gradient_check());

    checks
}

/// Monte-Carlo signaling gradient vs finite differences of the exact sender
/// value on the letter game, 100k sampled steps, 2% relative tolerance.
fn signaling_gradient_check() -> OracleCheck {
    let game = TabularGame::recommendation_letter();
    let (scheme, policy, batch) = letter_probe_setup(100_000, 101);
    let pi = vec![
        policy.distribution(&[], &one_hot(0, 2)).expect("policy"),
        policy.distribution(&[], &one_hot(1, 2)).expect("policy"),
    ];

    let eta0 = scheme.net.weights[0].data.clone();
    let value = |eta: &[f64]| -> f64 {
        let logits = vec![vec![eta[0], eta[1]], vec![eta[2], eta[3]]];
        oracle::exact_sender_value_from_logits(&game, &logits, &pi)
    };
    let exact = oracle::finite_difference_grad(&value, &eta0, 1e-5).expect("fd");

    let weights: Vec<f64> = batch
        .iter()
        .flat_map(|t| t.transitions.iter().map(|tr| tr.reward_sender))
        .collect();
    let grads = learn::signaling_gradient(&scheme, &policy, &batch, &weights).expect("gradient");
    let est = &grads[0].0.data;

    let num: f64 = est
        .iter()
        .zip(exact.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = num / den;
    OracleCheck {
        name: "signaling-gradient-consistency",
        passed: rel <= 0.02,
        detail: format!(
            "relative error {:.4} (tolerance 0.02); estimate {est:?}, finite differences {exact:?}",
            rel
        ),
    }
}

/// Fixed letter-game scheme/policy pair plus a sampled batch, shared by the
/// estimator checks.
pub fn letter_probe_setup(
    episodes: usize,
    seed: u64,
) -> (SignalingScheme, crate::agents::ReceiverPolicy, Vec<crate::env::Trajectory>) {
    use crate::autodiff::Tensor;

    let mut rng = rng_stream(seed, "probe-scheme");
    let mut scheme = SignalingScheme::new(2, None, 2, 1.0, &mut rng);
    scheme.net.weights[0] = Tensor::new(2, 2, vec![0.8, -0.3, -0.2, 0.5]).expect("shape");
    scheme.net.biases[0] = Tensor::zeros(1, 2);

    let mut rng = rng_stream(seed, "probe-policy");
    let mut policy = crate::agents::ReceiverPolicy::new(0, 2, None, 2, &mut rng);
    policy.net.weights[0] = Tensor::new(2, 2, vec![1.2, -0.6, -0.9, 0.7]).expect("shape");
    policy.net.biases[0] = Tensor::zeros(1, 2);

    let mut env = RecommendationLetter::new(1, derive_seed(seed, "env"));
    let mut rng = rng_stream(seed, "probe-sample");
    let mut batch = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let state = env.reset();
        let observation = env.observe(&state);
        let (signal, noise) = scheme.sample(&state.encoding, &mut rng).expect("sample");
        let action = policy
            .sample_action(&observation.encoding, &signal.one_hot, &mut rng)
            .expect("action");
        let out = env.step(&state, action).expect("step");
        batch.push(crate::env::Trajectory {
            transitions: vec![crate::env::Transition {
                state,
                observation,
                signal,
                signal_noise: noise.data,
                action,
                reward_sender: out.reward_sender,
                reward_receiver: out.reward_receiver,
                next_state: out.next_state,
                done: true,
            }],
        });
    }
    (scheme, policy, batch)
}
