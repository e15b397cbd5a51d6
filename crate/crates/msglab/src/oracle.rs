//! Exact ground-truth machinery for small games.
//!
//! Everything here is computed by enumeration or linear algebra, never by
//! sampling: the optimal one-shot persuasion scheme (a linear program over
//! direct schemes), exact value functions of tabular Markov signaling games,
//! posterior incentive-compatibility reports, and central finite differences.
//! The learn module's estimators are validated against these.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid game: {0}")]
    BadGame(String),
    #[error("linear program infeasible")]
    Infeasible,
}

/// One-shot persuasion game: a prior over states and payoff tables indexed
/// `[state][action]`.
#[derive(Debug, Clone)]
pub struct TabularGame {
    pub prior: Vec<f64>,
    pub sender_payoff: Vec<Vec<f64>>,
    pub receiver_payoff: Vec<Vec<f64>>,
}

impl TabularGame {
    pub fn new(
        prior: Vec<f64>,
        sender_payoff: Vec<Vec<f64>>,
        receiver_payoff: Vec<Vec<f64>>,
    ) -> Result<Self, OracleError> {
        let s = prior.len();
        if s == 0 || sender_payoff.len() != s || receiver_payoff.len() != s {
            return Err(OracleError::BadGame("state count mismatch".into()));
        }
        let a = sender_payoff[0].len();
        if a == 0
            || sender_payoff.iter().any(|r| r.len() != a)
            || receiver_payoff.iter().any(|r| r.len() != a)
        {
            return Err(OracleError::BadGame("action count mismatch".into()));
        }
        let total: f64 = prior.iter().sum();
        if prior.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(OracleError::BadGame("prior is not a distribution".into()));
        }
        let finite = |m: &[Vec<f64>]| m.iter().flatten().all(|v| v.is_finite());
        if !finite(&sender_payoff) || !finite(&receiver_payoff) {
            return Err(OracleError::BadGame("non-finite payoff".into()));
        }
        Ok(TabularGame {
            prior,
            sender_payoff,
            receiver_payoff,
        })
    }

    /// The letter-writing game: a professor recommends candidates to an HR
    /// department. States (strong, weak) with prior (1/3, 2/3); actions
    /// (hire, pass). The professor is paid per hire, HR gains +1 for hiring
    /// strong and loses 1 for hiring weak.
    pub fn recommendation_letter() -> Self {
        TabularGame {
            prior: vec![1.0 / 3.0, 2.0 / 3.0],
            sender_payoff: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            receiver_payoff: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        }
    }

    pub fn states(&self) -> usize {
        self.prior.len()
    }

    pub fn actions(&self) -> usize {
        self.sender_payoff[0].len()
    }
}

/// Direct scheme: `phi[s][a]` is the probability of recommending action `a`
/// in state `s`. Rows are distributions.
#[derive(Debug, Clone)]
pub struct ExactScheme {
    pub phi: Vec<Vec<f64>>,
}

impl ExactScheme {
    /// Recommend the receiver-optimal action for each state.
    pub fn full_revelation(game: &TabularGame) -> Self {
        let a = game.actions();
        let phi = game
            .receiver_payoff
            .iter()
            .map(|row| {
                let best = argmax(row);
                let mut r = vec![0.0; a];
                r[best] = 1.0;
                r
            })
            .collect();
        ExactScheme { phi }
    }

    /// Always recommend the receiver's best response to the prior.
    pub fn uninformative(game: &TabularGame) -> Self {
        let a = game.actions();
        let exp: Vec<f64> = (0..a)
            .map(|j| {
                (0..game.states())
                    .map(|s| game.prior[s] * game.receiver_payoff[s][j])
                    .sum()
            })
            .collect();
        let best = argmax(&exp);
        let mut row = vec![0.0; a];
        row[best] = 1.0;
        ExactScheme {
            phi: vec![row; game.states()],
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Expected payoffs when the receiver follows every recommendation.
pub fn obedient_value(game: &TabularGame, scheme: &ExactScheme) -> (f64, f64) {
    let mut vi = 0.0;
    let mut vj = 0.0;
    for s in 0..game.states() {
        for a in 0..game.actions() {
            let w = game.prior[s] * scheme.phi[s][a];
            vi += w * game.sender_payoff[s][a];
            vj += w * game.receiver_payoff[s][a];
        }
    }
    (vi, vj)
}

// ---------------------------------------------------------------------------
// Optimal persuasion LP
// ---------------------------------------------------------------------------

/// Solve for the sender-optimal direct scheme.
///
/// Variables are the joint probabilities x[s][a] = P(s)·φ(a|s); the
/// objective maximizes the sender's expected payoff subject to per-state
/// normalization and the receiver's obedience constraints
/// Σ_s x[s][a]·(w^j(s,a) − w^j(s,a')) ≥ 0 for every pair a ≠ a'.
pub fn solve_persuasion_lp(game: &TabularGame) -> Result<(ExactScheme, f64), OracleError> {
    let (ns, na) = (game.states(), game.actions());
    let n = ns * na;
    let c: Vec<f64> = (0..ns)
        .flat_map(|s| game.sender_payoff[s].clone())
        .collect();

    // Equalities: Σ_a x[s][a] = P(s).
    let mut eq_a = vec![vec![0.0; n]; ns];
    let mut eq_b = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            eq_a[s][s * na + a] = 1.0;
        }
        eq_b[s] = game.prior[s];
    }

    // Inequalities (≥ 0): obedience for each recommended/deviation pair.
    let mut ge = Vec::new();
    for a in 0..na {
        for a2 in 0..na {
            if a2 == a {
                continue;
            }
            let mut row = vec![0.0; n];
            for s in 0..ns {
                row[s * na + a] = game.receiver_payoff[s][a] - game.receiver_payoff[s][a2];
            }
            ge.push(row);
        }
    }

    let free = n - ns;
    let pool = ge.len() + n;
    let x = if binomial(pool, free) <= 200_000 {
        enumerate_vertices(&c, &eq_a, &eq_b, &ge)?
    } else {
        simplex_max(&c, &eq_a, &eq_b, &ge)?
    };

    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    let mut phi = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        if game.prior[s] > 1e-12 {
            for a in 0..na {
                phi[s][a] = (x[s * na + a] / game.prior[s]).max(0.0);
            }
            let z: f64 = phi[s].iter().sum();
            for v in phi[s].iter_mut() {
                *v /= z;
            }
        } else {
            phi[s] = vec![1.0 / na as f64; na];
        }
    }
    Ok((ExactScheme { phi }, value))
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: usize = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
        if r > 10_000_000 {
            return usize::MAX;
        }
    }
    r
}

/// Brute-force vertex enumeration: every basic feasible point of the
/// polytope is the solution of the equalities plus a choice of tight
/// inequality/non-negativity rows.
fn enumerate_vertices(
    c: &[f64],
    eq_a: &[Vec<f64>],
    eq_b: &[f64],
    ge: &[Vec<f64>],
) -> Result<Vec<f64>, OracleError> {
    let n = c.len();
    let need = n - eq_a.len();
    // candidate tight rows: each inequality, then each x_i = 0
    let mut rows: Vec<Vec<f64>> = ge.to_vec();
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = 1.0;
        rows.push(r);
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut choice: Vec<usize> = (0..need).collect();
    loop {
        let mut a = eq_a.to_vec();
        let mut b = eq_b.to_vec();
        for &i in &choice {
            a.push(rows[i].clone());
            b.push(0.0);
        }
        if let Some(x) = solve_linear(a, b) {
            let feasible = x.iter().all(|&v| v >= -1e-9)
                && ge
                    .iter()
                    .all(|row| row.iter().zip(&x).map(|(r, v)| r * v).sum::<f64>() >= -1e-9);
            if feasible {
                let obj: f64 = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
                if best.as_ref().map_or(true, |(bv, _)| obj > *bv) {
                    best = Some((obj, x));
                }
            }
        }
        if !next_combination(&mut choice, rows.len()) {
            break;
        }
    }
    best.map(|(_, x)| x).ok_or(OracleError::Infeasible)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    if c.is_empty() {
        return false;
    }
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - (k - i) {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Gaussian elimination with partial pivoting; `None` for singular systems.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return None;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Two-phase primal simplex with Bland's rule.
///
/// Maximizes c·x subject to eq_a·x = eq_b, ge·x ≥ 0, x ≥ 0. Inequalities
/// get surplus variables; phase one drives artificial variables to zero.
fn simplex_max(
    c: &[f64],
    eq_a: &[Vec<f64>],
    eq_b: &[f64],
    ge: &[Vec<f64>],
) -> Result<Vec<f64>, OracleError> {
    let n = c.len();
    let m = eq_a.len() + ge.len();
    let n_surplus = ge.len();
    let cols = n + n_surplus + m; // structural + surplus + artificial
    let mut a = vec![vec![0.0; cols]; m];
    let mut b = vec![0.0; m];
    for (i, row) in eq_a.iter().enumerate() {
        a[i][..n].copy_from_slice(row);
        b[i] = eq_b[i];
    }
    for (k, row) in ge.iter().enumerate() {
        let i = eq_a.len() + k;
        a[i][..n].copy_from_slice(row);
        a[i][n + k] = -1.0; // surplus: ge·x - s = 0
        b[i] = 0.0;
    }
    // rhs must be non-negative
    for i in 0..m {
        if b[i] < 0.0 {
            b[i] = -b[i];
            for v in a[i].iter_mut() {
                *v = -*v;
            }
        }
    }
    for i in 0..m {
        a[i][n + n_surplus + i] = 1.0;
    }
    let mut basis: Vec<usize> = (0..m).map(|i| n + n_surplus + i).collect();

    // phase 1: minimize the artificial sum
    let mut phase1 = vec![0.0; cols];
    for j in n + n_surplus..cols {
        phase1[j] = 1.0;
    }
    let z1 = simplex_pivot(&mut a, &mut b, &mut basis, &phase1, cols, true)?;
    if z1 > 1e-7 {
        return Err(OracleError::Infeasible);
    }

    // pivot remaining artificials out of the basis; all-zero rows are
    // redundant constraints and stay inert
    for i in 0..m {
        if basis[i] < n + n_surplus {
            continue;
        }
        if let Some(j) = (0..n + n_surplus).find(|&j| a[i][j].abs() > 1e-9) {
            let p = a[i][j];
            for v in a[i].iter_mut() {
                *v /= p;
            }
            b[i] /= p;
            for r in 0..m {
                if r == i {
                    continue;
                }
                let f = a[r][j];
                if f == 0.0 {
                    continue;
                }
                for k in 0..cols {
                    a[r][k] -= f * a[i][k];
                }
                b[r] -= f * b[i];
            }
            basis[i] = j;
        }
    }

    // phase 2: minimize -c over structural and surplus columns only
    let mut phase2 = vec![0.0; cols];
    for j in 0..n {
        phase2[j] = -c[j];
    }
    simplex_pivot(&mut a, &mut b, &mut basis, &phase2, n + n_surplus, false)?;

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = b[i];
        }
    }
    Ok(x)
}

/// Runs simplex pivots on the tableau until optimal; returns the final
/// objective value of `cost`.
fn simplex_pivot(
    a: &mut [Vec<f64>],
    b: &mut [f64],
    basis: &mut [usize],
    cost: &[f64],
    enter_limit: usize,
    phase1: bool,
) -> Result<f64, OracleError> {
    let m = a.len();
    let tol = 1e-10;
    for _ in 0..100_000 {
        // reduced costs r_j = cost_j - cost_B · column_j
        let mut entering = None;
        for j in 0..enter_limit {
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                r -= cost[basis[i]] * a[i][j];
            }
            if r < -tol {
                entering = Some(j);
                break; // Bland: first improving index
            }
        }
        let j = match entering {
            Some(j) => j,
            None => {
                let z: f64 = (0..m).map(|i| cost[basis[i]] * b[i]).sum();
                return Ok(z);
            }
        };
        // ratio test, Bland tie-break on basis index
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..m {
            if a[i][j] > tol {
                let ratio = b[i] / a[i][j];
                let better = ratio < best_ratio - tol
                    || (ratio < best_ratio + tol
                        && leave.map_or(true, |l| basis[i] < basis[l]));
                if better {
                    best_ratio = ratio.min(best_ratio);
                    leave = Some(i);
                }
            }
        }
        let r = match leave {
            Some(r) => r,
            None => {
                if phase1 {
                    return Err(OracleError::Infeasible);
                }
                return Err(OracleError::BadGame("unbounded program".into()));
            }
        };
        // pivot on (r, j)
        let p = a[r][j];
        for v in a[r].iter_mut() {
            *v /= p;
        }
        b[r] /= p;
        for i in 0..m {
            if i == r {
                continue;
            }
            let f = a[i][j];
            if f == 0.0 {
                continue;
            }
            for k in 0..a[i].len() {
                a[i][k] -= f * a[r][k];
            }
            b[i] -= f * b[r];
        }
        basis[r] = j;
    }
    Err(OracleError::BadGame("simplex iteration limit".into()))
}

// ---------------------------------------------------------------------------
// Exact tabular MSG evaluation
// ---------------------------------------------------------------------------

/// Fully enumerable Markov signaling game: `transition[s][a][s']`, rewards
/// indexed `[s][a]`.
#[derive(Debug, Clone)]
pub struct TabularMsg {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub sender_reward: Vec<Vec<f64>>,
    pub receiver_reward: Vec<Vec<f64>>,
}

impl TabularMsg {
    /// The letter game as a chain: candidates are drawn i.i.d., so every
    /// action leads back to the prior.
    pub fn recommendation_letter() -> Self {
        let game = TabularGame::recommendation_letter();
        let prior = game.prior.clone();
        TabularMsg {
            initial: prior.clone(),
            transition: vec![vec![prior.clone(); 2]; 2],
            sender_reward: game.sender_payoff,
            receiver_reward: game.receiver_payoff,
        }
    }
}

/// Exact per-step values and the stationary state distribution under a
/// scheme `phi[s][σ]` and policy `pi[σ][a]`.
pub fn exact_msg_value(
    msg: &TabularMsg,
    phi: &[Vec<f64>],
    pi: &[Vec<f64>],
) -> Result<(f64, f64, Vec<f64>), OracleError> {
    let ns = msg.initial.len();
    let na = msg.sender_reward[0].len();
    if phi.len() != ns {
        return Err(OracleError::BadGame("scheme rows != states".into()));
    }
    // action marginal per state
    let mut act = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for (sig, &p_sig) in phi[s].iter().enumerate() {
            for a in 0..na {
                act[s][a] += p_sig * pi[sig][a];
            }
        }
    }
    // induced chain and its stationary distribution by power iteration
    let mut d = msg.initial.clone();
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = d[s] * act[s][a];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..ns {
                    next[s2] += w * msg.transition[s][a][s2];
                }
            }
        }
        let diff: f64 = next.iter().zip(&d).map(|(x, y)| (x - y).abs()).sum();
        d = next;
        if diff < 1e-15 {
            break;
        }
    }
    let mut vi = 0.0;
    let mut vj = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let w = d[s] * act[s][a];
            vi += w * msg.sender_reward[s][a];
            vj += w * msg.receiver_reward[s][a];
        }
    }
    Ok((vi, vj, d))
}

/// Sender value of the one-shot game as a function of scheme logits, with
/// a frozen receiver `pi[σ][a]`. The differentiation target for validating
/// sampled gradient estimators.
pub fn exact_sender_value_from_logits(
    game: &TabularGame,
    logits: &[Vec<f64>],
    pi: &[Vec<f64>],
) -> f64 {
    let mut v = 0.0;
    for s in 0..game.states() {
        let phi = softmax(&logits[s]);
        for (sig, &p_sig) in phi.iter().enumerate() {
            for a in 0..game.actions() {
                v += game.prior[s] * p_sig * pi[sig][a] * game.sender_payoff[s][a];
            }
        }
    }
    v
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| v / z).collect()
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite differences of a deterministic scalar function.
pub fn finite_difference_grad(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, OracleError> {
    if step <= 0.0 {
        return Err(OracleError::InvalidStep(step));
    }
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Incentive compatibility
// ---------------------------------------------------------------------------

/// Per-signal obedience report for a direct scheme.
#[derive(Debug, Clone)]
pub struct IcReport {
    pub signal: usize,
    /// Probability the scheme ever sends this signal.
    pub probability: f64,
    pub reachable: bool,
    /// Posterior over states given the signal.
    pub posterior: Vec<f64>,
    /// Receiver best response to the posterior, ties broken toward the
    /// recommendation.
    pub best_response: usize,
    pub follows: bool,
    /// Unnormalized obedience slack: min over deviations a' of
    /// Σ_s P(s)φ(a|s)(w^j(s,a) − w^j(s,a')).
    pub slack: f64,
}

pub fn check_incentive_compatibility(game: &TabularGame, scheme: &ExactScheme) -> Vec<IcReport> {
    let (ns, na) = (game.states(), game.actions());
    (0..na)
        .map(|a| {
            let prob: f64 = (0..ns).map(|s| game.prior[s] * scheme.phi[s][a]).sum();
            if prob < 1e-12 {
                return IcReport {
                    signal: a,
                    probability: prob,
                    reachable: false,
                    posterior: vec![f64::NAN; ns],
                    best_response: a,
                    follows: true,
                    slack: 0.0,
                };
            }
            let posterior: Vec<f64> = (0..ns)
                .map(|s| game.prior[s] * scheme.phi[s][a] / prob)
                .collect();
            let expected: Vec<f64> = (0..na)
                .map(|a2| {
                    (0..ns)
                        .map(|s| posterior[s] * game.receiver_payoff[s][a2])
                        .sum()
                })
                .collect();
            let mut best = a; // tie toward the recommendation
            for a2 in 0..na {
                if expected[a2] > expected[best] + 1e-12 {
                    best = a2;
                }
            }
            let slack = (0..na)
                .filter(|&a2| a2 != a)
                .map(|a2| {
                    (0..ns)
                        .map(|s| {
                            game.prior[s]
                                * scheme.phi[s][a]
                                * (game.receiver_payoff[s][a] - game.receiver_payoff[s][a2])
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            IcReport {
                signal: a,
                probability: prob,
                reachable: true,
                posterior,
                best_response: best,
                follows: best == a,
                slack,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, Environment, RecommendationLetter};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lp_recommendation_letter_optimum() {
        let game = TabularGame::recommendation_letter();
        let (scheme, value) = solve_persuasion_lp(&game).unwrap();
        assert!((value - 2.0 / 3.0).abs() < 1e-9, "value {value}");
        assert!((scheme.phi[0][0] - 1.0).abs() < 1e-6, "{:?}", scheme.phi);
        assert!((scheme.phi[1][0] - 0.5).abs() < 1e-6, "{:?}", scheme.phi);
    }

    #[test]
    fn lp_aligned_payoffs_reveal_everything() {
        let payoff = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
        let game = TabularGame::new(vec![0.4, 0.6], payoff.clone(), payoff).unwrap();
        let (_, value) = solve_persuasion_lp(&game).unwrap();
        let revealed = obedient_value(&game, &ExactScheme::full_revelation(&game)).0;
        assert!((value - revealed).abs() < 1e-9);
        assert!((value - (0.4 * 2.0 + 0.6 * 1.0)).abs() < 1e-9);
    }

    #[test]
    fn lp_indifferent_receiver_lets_sender_pick() {
        let game = TabularGame::new(
            vec![0.5, 0.5],
            vec![vec![3.0, 1.0], vec![0.0, 2.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let (_, value) = solve_persuasion_lp(&game).unwrap();
        // every constraint is slack, so the sender takes its per-state max
        assert!((value - (0.5 * 3.0 + 0.5 * 2.0)).abs() < 1e-9, "value {value}");
    }

    #[test]
    fn simplex_and_vertex_enumeration_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let ns = rng.gen_range(2..4usize);
            let na = rng.gen_range(2..4usize);
            let mut prior: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = prior.iter().sum();
            for p in prior.iter_mut() {
                *p /= z;
            }
            let rand_payoff = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..ns)
                    .map(|_| (0..na).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let game =
                TabularGame::new(prior, rand_payoff(&mut rng), rand_payoff(&mut rng)).unwrap();

            let n = ns * na;
            let c: Vec<f64> = (0..ns).flat_map(|s| game.sender_payoff[s].clone()).collect();
            let mut eq_a = vec![vec![0.0; n]; ns];
            let mut eq_b = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    eq_a[s][s * na + a] = 1.0;
                }
                eq_b[s] = game.prior[s];
            }
            let mut ge = Vec::new();
            for a in 0..na {
                for a2 in 0..na {
                    if a2 != a {
                        let mut row = vec![0.0; n];
                        for s in 0..ns {
                            row[s * na + a] =
                                game.receiver_payoff[s][a] - game.receiver_payoff[s][a2];
                        }
                        ge.push(row);
                    }
                }
            }
            let xv = enumerate_vertices(&c, &eq_a, &eq_b, &ge).unwrap();
            let xs = simplex_max(&c, &eq_a, &eq_b, &ge).unwrap();
            let ov: f64 = c.iter().zip(&xv).map(|(a, b)| a * b).sum();
            let os: f64 = c.iter().zip(&xs).map(|(a, b)| a * b).sum();
            assert!((ov - os).abs() < 1e-7, "vertex {ov} vs simplex {os}");
        }
    }

    #[test]
    fn lp_dominates_revelation_and_silence() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let ns = rng.gen_range(2..4usize);
            let na = rng.gen_range(2..4usize);
            let mut prior: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = prior.iter().sum();
            for p in prior.iter_mut() {
                *p /= z;
            }
            let rand_payoff = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..ns)
                    .map(|_| (0..na).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let game =
                TabularGame::new(prior, rand_payoff(&mut rng), rand_payoff(&mut rng)).unwrap();
            let (scheme, value) = solve_persuasion_lp(&game).unwrap();
            let honest = obedient_value(&game, &ExactScheme::full_revelation(&game)).0;
            let silent = obedient_value(&game, &ExactScheme::uninformative(&game)).0;
            assert!(value >= honest - 1e-7, "{value} < honest {honest}");
            assert!(value >= silent - 1e-7, "{value} < silent {silent}");
            for report in check_incentive_compatibility(&game, &scheme) {
                assert!(report.slack >= -1e-9, "slack {}", report.slack);
            }
        }
    }

    #[test]
    fn msg_value_reproduces_known_regimes() {
        let msg = TabularMsg::recommendation_letter();
        // silent scheme, receiver never hires
        let silent = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let never = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let (vi, vj, _) = exact_msg_value(&msg, &silent, &never).unwrap();
        assert!(vi.abs() < 1e-9 && vj.abs() < 1e-9);

        // honest scheme, obedient receiver
        let honest = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let obedient = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (vi, vj, d) = exact_msg_value(&msg, &honest, &obedient).unwrap();
        assert!((vi - 1.0 / 3.0).abs() < 1e-9);
        assert!((vj - 1.0 / 3.0).abs() < 1e-9);
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-9);

        // boundary scheme pulled back by eps
        for eps in [0.1, 0.25] {
            let scheme = vec![vec![1.0, 0.0], vec![0.5 - eps, 0.5 + eps]];
            let (vi, vj, _) = exact_msg_value(&msg, &scheme, &obedient).unwrap();
            assert!((vi - (2.0 / 3.0 - 2.0 * eps / 3.0)).abs() < 1e-9);
            assert!((vj - 2.0 * eps / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn msg_value_matches_monte_carlo() {
        let msg = TabularMsg::recommendation_letter();
        let phi = vec![vec![0.9, 0.1], vec![0.35, 0.65]];
        let pi = vec![vec![0.8, 0.2], vec![0.15, 0.85]];
        let (vi, vj, _) = exact_msg_value(&msg, &phi, &pi).unwrap();

        let mut env = RecommendationLetter::new(1, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = 200_000usize;
        let (mut si, mut sj, mut sq_i, mut sq_j) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let state = env.reset();
            let s = RecommendationLetter::state_index(&state);
            let sig = if rng.gen::<f64>() < phi[s][0] { 0 } else { 1 };
            let a = if rng.gen::<f64>() < pi[sig][0] { 0 } else { 1 };
            let out = env.step(&state, Action { category_index: a }).unwrap();
            si += out.reward_sender;
            sj += out.reward_receiver;
            sq_i += out.reward_sender * out.reward_sender;
            sq_j += out.reward_receiver * out.reward_receiver;
        }
        let (mi, mj) = (si / n as f64, sj / n as f64);
        let sd_i = ((sq_i / n as f64 - mi * mi) / n as f64).sqrt();
        let sd_j = ((sq_j / n as f64 - mj * mj) / n as f64).sqrt();
        assert!((mi - vi).abs() < 3.0 * sd_i, "sender {mi} vs exact {vi}");
        assert!((mj - vj).abs() < 3.0 * sd_j, "receiver {mj} vs exact {vj}");
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1];
        let x = vec![0.7, -1.3];
        let g = finite_difference_grad(&f, &x, 1e-5).unwrap();
        let exact = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - 4.0 * x[1]];
        for (a, b) in g.iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn finite_differences_ignore_dead_coordinates() {
        let f = |x: &[f64]| x[0] * x[0];
        let g = finite_difference_grad(&f, &[1.0, 5.0], 1e-5).unwrap();
        assert!(g[1].abs() < 1e-10);
    }

    #[test]
    fn finite_differences_reject_bad_step() {
        let f = |x: &[f64]| x[0];
        assert!(matches!(
            finite_difference_grad(&f, &[0.0], 0.0),
            Err(OracleError::InvalidStep(_))
        ));
        assert!(finite_difference_grad(&f, &[0.0], -1.0).is_err());
    }

    #[test]
    fn ic_reports_on_letter_schemes() {
        let game = TabularGame::recommendation_letter();

        let (optimal, _) = solve_persuasion_lp(&game).unwrap();
        let reports = check_incentive_compatibility(&game, &optimal);
        let hire = &reports[0];
        assert!(hire.reachable);
        assert!((hire.posterior[0] - 0.5).abs() < 1e-6);
        assert!((hire.posterior[1] - 0.5).abs() < 1e-6);
        assert!(hire.slack.abs() < 1e-6);
        assert!(hire.follows);

        let honest = ExactScheme::full_revelation(&game);
        let reports = check_incentive_compatibility(&game, &honest);
        assert!((reports[0].slack - 1.0 / 3.0).abs() < 1e-9);
        assert!((reports[1].slack - 2.0 / 3.0).abs() < 1e-9);
        assert!(reports.iter().all(|r| r.follows));

        let silent = ExactScheme {
            phi: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        let reports = check_incentive_compatibility(&game, &silent);
        assert!((reports[0].slack + 1.0 / 3.0).abs() < 1e-9);
        assert!(!reports[0].follows);
        assert!(!reports[1].reachable);
    }

    #[test]
    fn letter_value_chain_orders_as_expected() {
        let game = TabularGame::recommendation_letter();
        let (_, lp) = solve_persuasion_lp(&game).unwrap();
        let honest = obedient_value(&game, &ExactScheme::full_revelation(&game)).0;
        // the receiver's prior best response is to pass, so silence earns 0
        let silent = obedient_value(&game, &ExactScheme::uninformative(&game)).0;
        assert!(lp > honest && honest > silent);
        assert!((honest - 1.0 / 3.0).abs() < 1e-9);
        assert!(silent.abs() < 1e-9);
    }

    /// Grid search over schemes with a posterior-best-responding receiver,
    /// filtered by the action-distribution obedience constraints, recovers
    /// the same optimal sender value as the recommendation-form LP.
    #[test]
    fn extended_constraints_match_lp_optimum() {
        let game = TabularGame::recommendation_letter();
        let (_, lp_value) = solve_persuasion_lp(&game).unwrap();

        let wj = &game.receiver_payoff;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=100 {
            for j in 0..=100 {
                let phi = [
                    [i as f64 / 100.0, 1.0 - i as f64 / 100.0],
                    [j as f64 / 100.0, 1.0 - j as f64 / 100.0],
                ];
                // receiver best-responds to its posterior per signal, ties
                // broken toward hiring
                let mut pi = [[0.0; 2]; 2];
                for sig in 0..2 {
                    let p_sig: f64 = (0..2).map(|s| game.prior[s] * phi[s][sig]).sum();
                    let mut exp = [0.0; 2];
                    for a in 0..2 {
                        for s in 0..2 {
                            exp[a] += game.prior[s] * phi[s][sig] * wj[s][a];
                        }
                    }
                    let a_star = if p_sig < 1e-12 || exp[0] >= exp[1] - 1e-12 { 0 } else { 1 };
                    pi[sig][a_star] = 1.0;
                }
                let mut ok = true;
                for sig in 0..2 {
                    for sig2 in 0..2 {
                        let mut c = 0.0;
                        for s in 0..2 {
                            let mut inner = 0.0;
                            for a in 0..2 {
                                inner += (pi[sig][a] - pi[sig2][a]) * wj[s][a];
                            }
                            c += game.prior[s] * phi[s][sig] * inner;
                        }
                        if c < -1e-12 {
                            ok = false;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let mut v = 0.0;
                for s in 0..2 {
                    for sig in 0..2 {
                        for a in 0..2 {
                            v += game.prior[s] * phi[s][sig] * pi[sig][a] * game.sender_payoff[s][a];
                        }
                    }
                }
                best = best.max(v);
            }
        }
        assert!(
            (best - lp_value).abs() < 1e-3,
            "grid optimum {best} vs lp {lp_value}"
        );
    }

    #[test]
    fn sender_value_from_logits_matches_direct_evaluation() {
        let game = TabularGame::recommendation_letter();
        // extreme logits approximate the honest deterministic scheme
        let logits = vec![vec![40.0, 0.0], vec![0.0, 40.0]];
        let pi = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = exact_sender_value_from_logits(&game, &logits, &pi);
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
    }
}
