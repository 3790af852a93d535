//! Divergence computation, premise measurement, and the equilibrium-bound
//! certificate.
//!
//! The certificate assembles, from measured quantities alone, the inequality
//!
//! `D_f(rho_pi || rho_E) <= ((1 - gamma) * eps_pi + 2 * eps_r) / k`
//!
//! where `D_f` uses the generator `f(x) = (1-x)/(1+x)`, `eps_pi` is the
//! policy's suboptimality under the learned reward, and `eps_r` is the
//! sup-norm deviation of the learned reward from the pointwise `L_k`
//! minimizer on the online pair. Every run of the game loops re-checks it
//! each round.

use serde::{Deserialize, Serialize};

use crate::error::{RankGameError, Result};
use crate::mdp::{hard_value_iteration, policy_return, Policy, TabularMdp, Visitation};
use crate::ranking::{closed_form_reward, loss_lk, PairSource, RankingDataset, RewardFn};
use crate::util::CompensatedSum;

/// Slack added to the certificate's right-hand side to absorb floating-point
/// rounding in the measured premises.
pub const CERTIFICATE_SLACK: f64 = 1e-9;

/// f-divergence with generator `f(x) = (1-x)/(1+x)`:
/// `D_f(rho_p || rho_q) = sum rho_q * (rho_q - rho_p) / (rho_q + rho_p)`.
///
/// Terms with `rho_q = 0` contribute 0 (continuous limit); identical inputs
/// give exactly 0 and disjoint supports exactly 1. Here `rho_p` plays the
/// agent and `rho_q` the expert.
pub fn f_divergence(rho_p: &Visitation, rho_q: &Visitation) -> Result<f64> {
    if !rho_p.rho.same_shape(&rho_q.rho) {
        return Err(RankGameError::KindMismatch("f_divergence over mismatched tables".into()));
    }
    rho_p.rho.validate_normalized("rho_p")?;
    rho_q.rho.validate_normalized("rho_q")?;
    let mut acc = CompensatedSum::new();
    for (&p, &q) in rho_p.rho.flat().iter().zip(rho_q.rho.flat()) {
        if q <= 0.0 {
            continue;
        }
        acc.add(q * (q - p) / (q + p));
    }
    Ok(acc.value())
}

/// Measured policy suboptimality under a reward:
/// `eps_pi = J*(R) - J(pi; R)` with `J*` from exact value iteration.
pub fn measure_eps_pi(mdp: &TabularMdp, pi: &Policy, reward: &RewardFn) -> Result<f64> {
    let (_, j_star) = hard_value_iteration(mdp, reward)?;
    let j_pi = policy_return(mdp, pi, reward)?;
    Ok(j_star - j_pi)
}

/// Measured reward error on the online pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsRMeasure {
    /// Supremum over the pair's support of `|R_hat - R_closed_form|` — the
    /// additive reward error the equilibrium bound consumes.
    pub sup_dev: f64,
    /// Raw `L_k` loss value on the pair, logged for reference.
    pub raw_loss: f64,
}

/// Measure `eps_r` against the most recent online `(agent, expert)` pair of a
/// dataset. Errors if the dataset holds no online pair.
pub fn measure_eps_r(dataset: &RankingDataset, reward: &RewardFn, k: f64) -> Result<EpsRMeasure> {
    let pair = dataset
        .pairs
        .iter()
        .rev()
        .find(|p| p.source == PairSource::OnlineAgentVsExpert)
        .ok_or_else(|| RankGameError::MissingData("dataset holds no online agent-vs-expert pair".into()))?;
    measure_eps_r_pair(&pair.lesser, &pair.greater, reward, k)
}

/// Measure `eps_r` directly on an `(agent, expert)` visitation pair.
pub fn measure_eps_r_pair(
    rho_agent: &Visitation,
    rho_expert: &Visitation,
    reward: &RewardFn,
    k: f64,
) -> Result<EpsRMeasure> {
    let closed = closed_form_reward(rho_agent, rho_expert, k)?;
    let fitted_values = reward.values_for(&rho_agent.rho)?;
    let closed_values = closed.values_for(&rho_agent.rho)?;
    let mut sup_dev = 0.0f64;
    for (i, (&p, &e)) in rho_agent.rho.flat().iter().zip(rho_expert.rho.flat()).enumerate() {
        if p + e > 0.0 {
            sup_dev = sup_dev.max((fitted_values[i] - closed_values[i]).abs());
        }
    }
    let single = RankingDataset::from_pairs(vec![crate::ranking::RankingPair::new(
        rho_agent.clone(),
        rho_expert.clone(),
        PairSource::OnlineAgentVsExpert,
    )?]);
    let raw_loss = loss_lk(&single, reward, k)?;
    Ok(EpsRMeasure { sup_dev, raw_loss })
}

/// The assembled certificate for one `(policy, reward)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub f_divergence: f64,
    pub eps_pi: f64,
    pub eps_r: f64,
    pub raw_ranking_loss: f64,
    pub bound_rhs: f64,
    pub satisfied: bool,
}

/// Compute the equilibrium-bound certificate from measured quantities.
///
/// `expert` may be state-only (LfO); the agent occupancy is marginalized to
/// match before the divergence and closed-form comparisons.
pub fn theorem1_certificate(
    mdp: &TabularMdp,
    pi: &Policy,
    reward: &RewardFn,
    expert: &Visitation,
    k: f64,
) -> Result<Certificate> {
    if !(k > 0.0) {
        return Err(RankGameError::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let agent_full = crate::mdp::exact_visitation(mdp, pi)?;
    let agent = if expert.is_state_only() { agent_full.marginalized() } else { agent_full };
    let eps_pi = measure_eps_pi(mdp, pi, reward)?;
    let eps = measure_eps_r_pair(&agent, expert, reward, k)?;
    let d_f = f_divergence(&agent, expert)?;
    let bound_rhs = ((1.0 - mdp.gamma) * eps_pi + 2.0 * eps.sup_dev) / k;
    Ok(Certificate {
        f_divergence: d_f,
        eps_pi,
        eps_r: eps.sup_dev,
        raw_ranking_loss: eps.raw_loss,
        bound_rhs,
        satisfied: d_f <= bound_rhs + CERTIFICATE_SLACK,
    })
}

/// Per-round metrics emitted by the game loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub round: usize,
    /// Raw ranking-loss value of the fitted reward on the online pair.
    pub ranking_loss: f64,
    /// Sup-norm deviation from the closed-form minimizer (the bound's eps_r).
    pub eps_r: f64,
    /// Policy suboptimality under the fitted reward (the bound's eps_pi).
    pub eps_pi: f64,
    pub f_divergence: f64,
    pub bound_rhs: f64,
    pub bound_satisfied: bool,
    /// `J(pi; R*) / J(pi_E; R*)` when the true reward is known, else NaN.
    pub true_return_ratio: f64,
    /// Cumulative environment transitions consumed so far.
    pub env_steps: u64,
}

impl GameReport {
    /// Fixed CSV column order shared by every emitted report file.
    pub const CSV_HEADER: &'static str =
        "round,ranking_loss,eps_r,eps_pi,f_divergence,bound_rhs,bound_satisfied,true_return_ratio,env_steps";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.ranking_loss,
            self.eps_r,
            self.eps_pi,
            self.f_divergence,
            self.bound_rhs,
            self.bound_satisfied,
            self.true_return_ratio,
            self.env_steps
        )
    }

    pub fn csv_document(reports: &[GameReport]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}
