//! The two-player game loops and their Stackelberg machinery.
//!
//! Both loops alternate a policy player (soft Bellman backups against the
//! current reward) with a reward player (gradient fit of a ranking loss):
//!
//! - PAL (policy as leader): few policy updates per round, reward refit to
//!   convergence on the current round's rankings only — old data discarded;
//! - RAL (reward as leader): the online dataset aggregates across rounds and
//!   the reward update count scales with the dataset size.
//!
//! [`leader_gradient_pal_analytic`] provides the exact total derivative of
//! the PAL leader objective through the follower's closed-form best response,
//! for validating the Stackelberg approximation on tiny instances.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{theorem1_certificate, GameReport};
use crate::error::{RankGameError, Result};
use crate::mdp::{
    empirical_visitation, exact_visitation, hard_value_iteration, policy_return, sample_trajectories, Policy,
    TabularMdp, Visitation,
};
use crate::ranking::{
    fit_reward_objective, make_auto_chain, FitConfig, LossKind, PairSource, RankingChain, RankingDataset,
    RankingPair, RewardFn, RewardKind, RewardObjective, ShapingFamily, SnippetTerms,
};

/// Which player leads the Stackelberg game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leader {
    Policy,
    Reward,
}

/// Reward initialization at game start (and per-round when warm starts are
/// disabled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardInit {
    Zeros,
    Noise { sigma: f64 },
}

/// Full configuration of one game run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub leader: Leader,
    pub loss_kind: LossKind,
    /// Performance-gap target; defaults to the environment's `r_max`.
    pub k: f64,
    /// Policy update steps per round; `None` means the horizon `H`.
    pub n_pol: Option<usize>,
    /// Reward update steps per round; `None` applies the two-timescale
    /// schedule formulas (`ceil(H/b)` for PAL, `ceil(|D|/b)` for RAL).
    pub n_rew: Option<usize>,
    /// Batch-size analog `b` in the schedule formulas.
    pub batch: usize,
    /// Number of auto-generated interpolants.
    pub p: usize,
    pub shaping: ShapingFamily,
    /// Online-loss weight of the offline-combined objective.
    pub lambda: f64,
    /// Softness of the policy player.
    pub temperature: f64,
    /// Relaxation of the policy player's backups (`1` = plain soft value
    /// iteration; smaller values damp policy reactions to reward changes).
    pub q_step: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Estimate visitations from sampled rollouts instead of the exact solve.
    pub use_empirical: bool,
    /// Rollouts collected per round in empirical mode.
    pub n_traj_per_round: usize,
    pub fit: FitConfig,
    pub reward_init: RewardInit,
    /// Warm-start the reward across rounds (reinitialize each round if off).
    pub reward_warm_start: bool,
    /// Snippet length for offline trajectory augmentation; `None` disables.
    pub snippet_len: Option<usize>,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            leader: Leader::Policy,
            loss_kind: LossKind::SlkAuto,
            k: 10.0,
            n_pol: None,
            n_rew: None,
            batch: 32,
            p: 5,
            shaping: ShapingFamily::default_auto(10.0),
            lambda: 0.3,
            temperature: 0.5,
            q_step: 1.0,
            rounds: 100,
            seed: 0,
            use_empirical: false,
            n_traj_per_round: 1,
            fit: FitConfig::default(),
            reward_init: RewardInit::Noise { sigma: 0.01 },
            reward_warm_start: true,
            snippet_len: Some(10),
        }
    }
}

impl GameConfig {
    /// Validate and return a copy with the dependent fields (`shaping.k_max`,
    /// `fit.k`, `fit.lambda`) synchronized to the top-level settings.
    pub fn normalized(&self) -> Result<GameConfig> {
        if self.rounds == 0 {
            return Err(RankGameError::config("game.rounds", "must be >= 1"));
        }
        if !(self.k > 0.0) {
            return Err(RankGameError::config("game.k", format!("must be > 0, got {}", self.k)));
        }
        if self.n_pol == Some(0) {
            return Err(RankGameError::config("game.n_pol", "must be >= 1"));
        }
        if self.n_rew == Some(0) {
            return Err(RankGameError::config("game.n_rew", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(RankGameError::config("game.batch", "must be >= 1"));
        }
        if self.p == 0 {
            return Err(RankGameError::config("game.p", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RankGameError::config("game.lambda", format!("must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(RankGameError::config("game.temperature", "must be > 0"));
        }
        if !(self.q_step > 0.0 && self.q_step <= 1.0) {
            return Err(RankGameError::config("game.q_step", "must lie in (0, 1]"));
        }
        if self.use_empirical && self.n_traj_per_round == 0 {
            return Err(RankGameError::config("game.n_traj_per_round", "must be >= 1 in empirical mode"));
        }
        let mut cfg = self.clone();
        cfg.shaping.k_max = cfg.k;
        cfg.fit.k = cfg.k;
        cfg.fit.lambda = cfg.lambda;
        Ok(cfg)
    }
}

/// Per-round update counts under the two-timescale schedules.
///
/// PAL keeps a fixed pair of counts; RAL scales reward updates with the
/// aggregated dataset size (`n_rew = ceil(|D| / b)` in transitions).
/// Explicit `n_pol`/`n_rew` overrides win over the formulas.
pub fn two_timescale_schedule(
    config: &GameConfig,
    horizon: usize,
    _round: usize,
    dataset_transitions: usize,
) -> (usize, usize) {
    let n_pol = config.n_pol.unwrap_or(horizon).max(1);
    let n_rew = match config.n_rew {
        Some(n) => n,
        None => match config.leader {
            Leader::Policy => horizon.div_ceil(config.batch).max(1),
            Leader::Reward => dataset_transitions.div_ceil(config.batch).max(1),
        },
    };
    (n_pol, n_rew)
}

/// Offline preference data attached to a game (grounded chain plus optional
/// snippet terms).
#[derive(Debug, Clone)]
pub struct OfflineData {
    pub chain: RankingChain,
    pub snippets: Option<SnippetTerms>,
}

/// Final state of a finished game run.
#[derive(Debug, Clone)]
pub struct GameState {
    pub policy: Policy,
    pub reward: RewardFn,
    pub online_dataset: RankingDataset,
    pub round: usize,
    pub history: Vec<GameReport>,
}

/// A running two-player game instance. Owns its state exclusively; multiple
/// instances with different seeds/configs can run in parallel.
#[derive(Debug, Clone)]
pub struct Game {
    mdp: TabularMdp,
    expert: Visitation,
    config: GameConfig,
    true_reward_fn: Option<RewardFn>,
    true_return_reference: Option<f64>,
    offline: Option<OfflineData>,
    q: Array2<f64>,
    policy: Policy,
    reward: RewardFn,
    dataset: RankingDataset,
    dataset_transitions: usize,
    round: usize,
    env_steps: u64,
    history: Vec<GameReport>,
    rng: ChaCha8Rng,
}

use crate::mdp::true_reward_fn as true_reward_table;

impl Game {
    pub fn new(mdp: TabularMdp, expert: Visitation, config: GameConfig, offline: Option<OfflineData>) -> Result<Self> {
        let config = config.normalized()?;
        mdp.validate()?;
        let expected_rows = mdp.n_rows();
        let shape = expert.rho.shape();
        let shape_ok = if expert.is_state_only() {
            shape.0 == expected_rows
        } else {
            shape == (expected_rows, mdp.n_actions)
        };
        if !shape_ok {
            return Err(RankGameError::DimensionMismatch(format!(
                "expert table shape {shape:?} does not fit MDP with {expected_rows} rows x {} actions",
                mdp.n_actions
            )));
        }
        if config.loss_kind == LossKind::Offline && offline.is_none() {
            return Err(RankGameError::config("game.loss_kind", "offline loss requires an offline chain"));
        }
        if let Some(data) = &offline {
            let last = *data.chain.targets.last().unwrap();
            if (last - config.k).abs() > 1e-9 {
                return Err(RankGameError::config(
                    "offline.chain",
                    format!("chain must be grounded at the expert with target k={}, found {last}", config.k),
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let kind = if expert.is_state_only() { RewardKind::StateOnly } else { RewardKind::StateAction };
        let reward = init_reward(&mdp, kind, &config, &mut rng);
        let true_reward_fn = true_reward_table(&mdp);
        let true_return_reference = match &true_reward_fn {
            Some(r) => Some(hard_value_iteration(&mdp, r)?.1),
            None => None,
        };

        Ok(Game {
            q: Array2::zeros((mdp.n_states, mdp.n_actions)),
            policy: Policy::uniform(mdp.n_states, mdp.n_actions),
            reward,
            dataset: RankingDataset::default(),
            dataset_transitions: 0,
            round: 0,
            env_steps: 0,
            history: Vec::new(),
            rng,
            mdp,
            expert,
            config,
            true_reward_fn,
            true_return_reference,
            offline,
        })
    }

    /// Override the denominator of `true_return_ratio` (defaults to the
    /// optimal return under the true reward).
    pub fn set_true_return_reference(&mut self, reference: f64) {
        self.true_return_reference = Some(reference);
    }

    /// Switch the reward player to a linear-in-features parameterization
    /// (one feature row per reward point). Must be called before the first
    /// round; parameters restart from the configured initialization.
    pub fn set_reward_features(&mut self, features: Vec<Vec<f64>>) -> Result<()> {
        if self.round != 0 {
            return Err(RankGameError::InvalidArgument("reward features must be set before stepping".into()));
        }
        let kind = self.reward.kind;
        let n_feat = features.first().map_or(0, |r| r.len());
        let mut weights = vec![0.0; n_feat];
        if let RewardInit::Noise { sigma } = self.config.reward_init {
            if sigma > 0.0 {
                for w in weights.iter_mut() {
                    *w = self.rng.gen_range(-sigma..sigma);
                }
            }
        }
        self.reward = RewardFn::linear(
            kind,
            self.mdp.n_states,
            self.mdp.n_actions,
            features,
            weights,
            self.config.fit.clamp,
        )?;
        Ok(())
    }

    /// Swap the environment and/or expert mid-run (nonstationary scenarios).
    /// Learned state (policy, reward, aggregated rankings) is kept.
    pub fn set_environment(&mut self, mdp: TabularMdp, expert: Visitation) -> Result<()> {
        mdp.validate()?;
        if mdp.n_states != self.mdp.n_states || mdp.n_actions != self.mdp.n_actions {
            return Err(RankGameError::DimensionMismatch("mutated MDP must keep the state/action space".into()));
        }
        if expert.is_state_only() != self.expert.is_state_only() {
            return Err(RankGameError::KindMismatch("mutated expert must keep the visitation kind".into()));
        }
        self.true_reward_fn = true_reward_table(&mdp);
        self.true_return_reference = match &self.true_reward_fn {
            Some(r) => Some(hard_value_iteration(&mdp, r)?.1),
            None => None,
        };
        self.mdp = mdp;
        self.expert = expert;
        Ok(())
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn history(&self) -> &[GameReport] {
        &self.history
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn reward(&self) -> &RewardFn {
        &self.reward
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn expert(&self) -> &Visitation {
        &self.expert
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Run one round: policy updates, dataset formation, reward fit, and the
    /// per-round certificate.
    pub fn step(&mut self) -> Result<GameReport> {
        self.round += 1;
        let (n_pol, _) = two_timescale_schedule(&self.config, self.mdp.horizon, self.round, self.dataset_transitions);

        // Policy player: n_pol soft backups against the current reward.
        let (policy, q) = crate::mdp::soft_value_iteration_damped(
            &self.mdp,
            &self.reward,
            self.config.temperature,
            n_pol,
            self.q.clone(),
            self.config.q_step,
        )?;
        self.policy = policy;
        self.q = q;

        // Data collection for this round's online ranking.
        let agent = if self.config.use_empirical {
            let seed = self.rng.gen::<u64>();
            let trajs = sample_trajectories(&self.mdp, &self.policy, self.config.n_traj_per_round, seed)?;
            self.env_steps += (self.config.n_traj_per_round * self.mdp.horizon) as u64;
            empirical_visitation(&trajs, &self.mdp)?
        } else {
            self.env_steps += n_pol as u64;
            exact_visitation(&self.mdp, &self.policy)?
        };
        let agent = if self.expert.is_state_only() { agent.marginalized() } else { agent };

        let pair = RankingPair::new(agent.clone(), self.expert.clone(), PairSource::OnlineAgentVsExpert)?;
        let auto_chain = if self.config.loss_kind == LossKind::SlkAuto {
            Some(make_auto_chain(&agent, &self.expert, self.config.p, self.mdp.gamma, &self.config.shaping)?)
        } else {
            None
        };
        match self.config.leader {
            Leader::Policy => {
                // Fresh data only: discard previous rounds.
                self.dataset.pairs.clear();
                self.dataset.chains.clear();
                self.dataset.pairs.push(pair);
                if let Some(chain) = auto_chain {
                    self.dataset.chains.push(chain);
                }
                self.dataset_transitions = self.mdp.horizon;
            }
            Leader::Reward => {
                self.dataset.pairs.push(pair);
                if let Some(chain) = auto_chain {
                    self.dataset.chains.push(chain);
                }
                self.dataset_transitions += self.mdp.horizon;
            }
        }
        if self.config.loss_kind == LossKind::Offline {
            let chain = self.offline.as_ref().unwrap().chain.clone();
            self.dataset.chains = vec![chain];
        }

        // Reward player.
        let (_, n_rew) = two_timescale_schedule(&self.config, self.mdp.horizon, self.round, self.dataset_transitions);
        let init = if self.config.reward_warm_start {
            self.reward.clone()
        } else {
            let kind = self.reward.kind;
            init_reward(&self.mdp, kind, &self.config, &mut self.rng)
        };
        let mut fit_cfg = self.config.fit;
        fit_cfg.max_steps = n_rew;
        let snippets = self.offline.as_ref().and_then(|o| o.snippets.as_ref());
        let objective = RewardObjective {
            dataset: &self.dataset,
            loss_kind: self.config.loss_kind,
            k: self.config.k,
            lambda: self.config.lambda,
            snippets,
        };
        let (fitted, _fit_report) = fit_reward_objective(&objective, &init, &fit_cfg)?;
        self.reward = fitted;

        // Diagnostics at the round's (policy, reward) pair.
        let cert = theorem1_certificate(&self.mdp, &self.policy, &self.reward, &self.expert, self.config.k)?;
        let true_return_ratio = match (&self.true_reward_fn, self.true_return_reference) {
            (Some(r), Some(reference)) if reference.abs() > 1e-12 => {
                policy_return(&self.mdp, &self.policy, r)? / reference
            }
            _ => f64::NAN,
        };
        let report = GameReport {
            round: self.round,
            ranking_loss: cert.raw_ranking_loss,
            eps_r: cert.eps_r,
            eps_pi: cert.eps_pi,
            f_divergence: cert.f_divergence,
            bound_rhs: cert.bound_rhs,
            bound_satisfied: cert.satisfied,
            true_return_ratio,
            env_steps: self.env_steps,
        };
        self.history.push(report.clone());
        Ok(report)
    }

    /// Run the configured number of rounds.
    pub fn run(mut self) -> Result<GameState> {
        for _ in 0..self.config.rounds {
            self.step()?;
        }
        Ok(self.into_state())
    }

    pub fn into_state(self) -> GameState {
        GameState {
            policy: self.policy,
            reward: self.reward,
            online_dataset: self.dataset,
            round: self.round,
            history: self.history,
        }
    }
}

fn init_reward(mdp: &TabularMdp, kind: RewardKind, config: &GameConfig, rng: &mut ChaCha8Rng) -> RewardFn {
    if let RewardInit::Noise { sigma } = config.reward_init {
        if sigma > 0.0 {
            let base = RewardFn::tabular_zero(mdp.n_states, mdp.n_actions, kind);
            let params: Vec<f64> = (0..base.n_params()).map(|_| rng.gen_range(-sigma..sigma)).collect();
            return RewardFn::tabular(kind, mdp.n_states, mdp.n_actions, params, config.fit.clamp)
                .expect("init reward geometry");
        }
    }
    let mut reward = RewardFn::tabular_zero(mdp.n_states, mdp.n_actions, kind);
    reward.clamp_range = config.fit.clamp;
    reward
}

/// Policy-as-leader practical instantiation.
pub fn run_pal(mdp: &TabularMdp, expert: &Visitation, config: &GameConfig) -> Result<GameState> {
    if config.leader != Leader::Policy {
        return Err(RankGameError::config("game.leader", "run_pal requires leader = policy"));
    }
    Game::new(mdp.clone(), expert.clone(), config.clone(), None)?.run()
}

/// Reward-as-leader practical instantiation.
pub fn run_ral(mdp: &TabularMdp, expert: &Visitation, config: &GameConfig) -> Result<GameState> {
    if config.leader != Leader::Reward {
        return Err(RankGameError::config("game.leader", "run_ral requires leader = reward"));
    }
    Game::new(mdp.clone(), expert.clone(), config.clone(), None)?.run()
}

/// The analytic PAL leader gradient, split into its direct and indirect
/// (best-response) terms. Entries are indexed like the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderGradient {
    pub total: Array2<f64>,
    pub direct: Array2<f64>,
    pub indirect: Array2<f64>,
}

const LEADER_GRADIENT_MAX_POINTS: usize = 64;

/// Composite PAL leader objective `J(R*(pi); pi)` with the follower's
/// closed-form best response substituted in:
/// `F = k/(1-gamma) * sum rho * rho_E / (rho_E + rho)`.
pub fn pal_composite_objective(mdp: &TabularMdp, pi: &Policy, expert: &Visitation, k: f64) -> Result<f64> {
    let agent = exact_visitation(mdp, pi)?;
    let expert_table = require_state_action(expert)?;
    let mut total = 0.0;
    for (&p, &e) in agent.rho.flat().iter().zip(expert_table) {
        let denom = p + e;
        if denom > 0.0 {
            total += p * e / denom;
        }
    }
    Ok(k / (1.0 - mdp.gamma) * total)
}

fn require_state_action(vis: &Visitation) -> Result<&[f64]> {
    match &vis.rho {
        crate::mdp::VisitTable::StateAction(_) => Ok(vis.rho.flat()),
        crate::mdp::VisitTable::State(_) => Err(RankGameError::KindMismatch(
            "leader-gradient oracle requires a state-action expert visitation".into(),
        )),
    }
}

/// Exact gradient of the composite PAL objective with respect to policy
/// logits, including the follower's best-response sensitivity; the occupancy
/// Jacobian is obtained by differentiating the linear flow solve.
///
/// Restricted to tiny instances (tabular reward class, unclamped,
/// `n_states * n_actions <= 64`) where the closed form is the exact follower.
pub fn leader_gradient_pal_analytic(
    mdp: &TabularMdp,
    pi: &Policy,
    expert: &Visitation,
    k: f64,
) -> Result<LeaderGradient> {
    let n = mdp.n_states;
    let m = mdp.n_actions;
    if n * m > LEADER_GRADIENT_MAX_POINTS {
        return Err(RankGameError::InvalidArgument(format!(
            "leader gradient oracle is for tiny MDPs (n*m <= {LEADER_GRADIENT_MAX_POINTS}), got {}",
            n * m
        )));
    }
    if pi.probs.iter().any(|&p| p <= 0.0) {
        return Err(RankGameError::InvalidArgument(
            "policy must be strictly positive (softmax image) for logit gradients".into(),
        ));
    }
    let expert_flat = require_state_action(expert)?;
    let gamma = mdp.gamma;

    // Occupancy of the current policy via the discounted flow solve.
    let mut p_pi = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        for a in 0..m {
            let w = pi.probs[[s, a]];
            for s2 in 0..n {
                p_pi[[s, s2]] += w * mdp.transition[[s, a, s2]];
            }
        }
    }
    let mut sys = nalgebra::DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            // (I - gamma * P_pi^T) d = (1 - gamma) * rho0.
            sys[(i, j)] -= gamma * p_pi[[j, i]];
        }
    }
    let lu = sys.lu();
    let rhs = nalgebra::DVector::from_iterator(n, mdp.rho0.iter().map(|&v| v * (1.0 - gamma)));
    let d = lu
        .solve(&rhs)
        .ok_or_else(|| RankGameError::InvalidArgument("flow system is singular".into()))?;

    let rho = |s: usize, a: usize| d[s] * pi.probs[[s, a]];
    let expert_at = |s: usize, a: usize| expert_flat[s * m + a];
    // Follower best response and its sensitivity to the agent occupancy.
    let r_star = |s: usize, a: usize| {
        let e = expert_at(s, a);
        let p = rho(s, a);
        if e + p > 0.0 {
            k * e / (e + p)
        } else {
            k / 2.0
        }
    };
    let sensitivity = |s: usize, a: usize| {
        let e = expert_at(s, a);
        let p = rho(s, a);
        if e + p > 0.0 {
            -k * e / ((e + p) * (e + p))
        } else {
            0.0
        }
    };

    let scale = 1.0 / (1.0 - gamma);
    let mut direct = Array2::<f64>::zeros((n, m));
    let mut indirect = Array2::<f64>::zeros((n, m));
    for s_t in 0..n {
        for a_t in 0..m {
            // dP_pi(s_t, .)/dtheta(s_t, a_t) = pi(a_t|s_t) * (P(s_t, a_t, .) - P_pi(s_t, .)).
            let w = pi.probs[[s_t, a_t]];
            let mut u = nalgebra::DVector::<f64>::zeros(n);
            for s2 in 0..n {
                u[s2] = gamma * d[s_t] * w * (mdp.transition[[s_t, a_t, s2]] - p_pi[[s_t, s2]]);
            }
            let dd = lu
                .solve(&u)
                .ok_or_else(|| RankGameError::InvalidArgument("flow system is singular".into()))?;
            let mut direct_acc = 0.0;
            let mut indirect_acc = 0.0;
            for s in 0..n {
                for a in 0..m {
                    // drho(s,a) = dd(s) pi(a|s) + d(s) dpi(a|s)/dtheta(s_t, a_t).
                    let mut drho = dd[s] * pi.probs[[s, a]];
                    if s == s_t {
                        let delta = if a == a_t { 1.0 } else { 0.0 };
                        drho += d[s] * pi.probs[[s, a]] * (delta - pi.probs[[s, a_t]]);
                    }
                    if drho == 0.0 {
                        continue;
                    }
                    direct_acc += drho * r_star(s, a);
                    indirect_acc += rho(s, a) * sensitivity(s, a) * drho;
                }
            }
            direct[[s_t, a_t]] = scale * direct_acc;
            indirect[[s_t, a_t]] = scale * indirect_acc;
        }
    }
    let total = &direct + &indirect;
    Ok(LeaderGradient { total, direct, indirect })
}
