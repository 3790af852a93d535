//! Finite MDPs, exact policy evaluation/optimization, and occupancy measures.
//!
//! Conventions used throughout the crate:
//!
//! - The occupancy measure `rho(s,a) = (1-gamma) * sum_t gamma^t Pr(s_t=s, a_t=a)`
//!   is normalized to a probability distribution over state-action pairs.
//! - Visitation and reward tables carry one extra state row (index
//!   `n_states`) reserved for the absorbing state that pads early-terminated
//!   trajectories. Exact occupancies leave that row at zero; the MDP dynamics
//!   themselves never enter it.
//! - Time-conditional marginals are undiscounted per-step distributions
//!   `Pr(s_t, a_t)` for `t = 0..horizon`, each summing to one.

use ndarray::{Array1, Array2, Array3};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RankGameError, Result};
use crate::ranking::RewardFn;
use crate::util::{cdot, csum};

const PROB_TOL: f64 = 1e-9;
const VISIT_TOL: f64 = 1e-8;

/// A finite MDP with transition tensor `P(s,a,s')`, discount, initial
/// distribution, episode horizon, and an optional ground-truth reward bounded
/// in `[0, r_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Transition probabilities indexed `(s, a, s')`.
    pub transition: Array3<f64>,
    pub gamma: f64,
    pub rho0: Array1<f64>,
    /// Episode length used for rollouts and time-conditional marginals.
    pub horizon: usize,
    pub r_max: f64,
    /// Ground-truth reward `R*(s,a)`, present for benchmark environments.
    pub true_reward: Option<Array2<f64>>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        gamma: f64,
        rho0: Array1<f64>,
        horizon: usize,
        r_max: f64,
        true_reward: Option<Array2<f64>>,
    ) -> Result<Self> {
        let (n_states, n_actions, _) = transition.dim();
        let mdp = TabularMdp { n_states, n_actions, transition, gamma, rho0, horizon, r_max, true_reward };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Index of the reserved absorbing state row in visitation/reward tables.
    pub fn absorbing_index(&self) -> usize {
        self.n_states
    }

    /// Row count of visitation/reward tables (`n_states` + absorbing row).
    pub fn n_rows(&self) -> usize {
        self.n_states + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a, s2) = self.transition.dim();
        if s != self.n_states || a != self.n_actions || s2 != self.n_states {
            return Err(RankGameError::DimensionMismatch(format!(
                "transition tensor is {:?}, expected ({n}, {m}, {n})",
                self.transition.dim(),
                n = self.n_states,
                m = self.n_actions
            )));
        }
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(RankGameError::InvalidArgument("MDP must have at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(RankGameError::InvalidArgument(format!("gamma must lie in [0,1), got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(RankGameError::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(self.r_max > 0.0) {
            return Err(RankGameError::InvalidArgument(format!("r_max must be > 0, got {}", self.r_max)));
        }
        if self.rho0.len() != self.n_states {
            return Err(RankGameError::DimensionMismatch(format!(
                "rho0 has length {}, expected {}",
                self.rho0.len(),
                self.n_states
            )));
        }
        check_distribution(self.rho0.as_slice().unwrap(), PROB_TOL, "rho0")?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                check_distribution(row.as_slice().unwrap(), PROB_TOL, &format!("transition({s},{a},.)"))?;
            }
        }
        if let Some(r) = &self.true_reward {
            if r.dim() != (self.n_states, self.n_actions) {
                return Err(RankGameError::DimensionMismatch(format!(
                    "true_reward has shape {:?}, expected ({}, {})",
                    r.dim(),
                    self.n_states,
                    self.n_actions
                )));
            }
            for (idx, v) in r.indexed_iter() {
                if !(*v >= 0.0 && *v <= self.r_max + PROB_TOL) {
                    return Err(RankGameError::InvalidArgument(format!(
                        "true_reward{idx:?} = {v} outside [0, r_max={}]",
                        self.r_max
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialize to the interchange JSON document.
    pub fn to_json(&self) -> Result<String> {
        let doc = MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self
                .transition
                .outer_iter()
                .map(|per_s| per_s.outer_iter().map(|row| row.to_vec()).collect())
                .collect(),
            gamma: self.gamma,
            rho0: self.rho0.to_vec(),
            horizon: self.horizon,
            r_max: self.r_max,
            true_reward: self.true_reward.as_ref().map(|r| r.outer_iter().map(|row| row.to_vec()).collect()),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parse and validate the interchange JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpJson = serde_json::from_str(text)?;
        let n = doc.n_states;
        let m = doc.n_actions;
        let mut transition = Array3::zeros((n, m, n));
        if doc.transition.len() != n {
            return Err(RankGameError::DimensionMismatch("transition outer length != n_states".into()));
        }
        for (s, per_s) in doc.transition.iter().enumerate() {
            if per_s.len() != m {
                return Err(RankGameError::DimensionMismatch(format!("transition[{s}] length != n_actions")));
            }
            for (a, row) in per_s.iter().enumerate() {
                if row.len() != n {
                    return Err(RankGameError::DimensionMismatch(format!("transition[{s}][{a}] length != n_states")));
                }
                for (s2, v) in row.iter().enumerate() {
                    transition[[s, a, s2]] = *v;
                }
            }
        }
        let true_reward = match doc.true_reward {
            None => None,
            Some(rows) => {
                let mut r = Array2::zeros((n, m));
                if rows.len() != n {
                    return Err(RankGameError::DimensionMismatch("true_reward outer length != n_states".into()));
                }
                for (s, row) in rows.iter().enumerate() {
                    if row.len() != m {
                        return Err(RankGameError::DimensionMismatch(format!("true_reward[{s}] length != n_actions")));
                    }
                    for (a, v) in row.iter().enumerate() {
                        r[[s, a]] = *v;
                    }
                }
                Some(r)
            }
        };
        TabularMdp::new(transition, doc.gamma, Array1::from_vec(doc.rho0), doc.horizon, doc.r_max, true_reward)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    rho0: Vec<f64>,
    horizon: usize,
    r_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_reward: Option<Vec<Vec<f64>>>,
}

fn check_distribution(p: &[f64], tol: f64, what: &str) -> Result<()> {
    for (i, v) in p.iter().enumerate() {
        if *v < -tol || !v.is_finite() {
            return Err(RankGameError::InvalidDistribution(format!("{what}[{i}] = {v} is negative or non-finite")));
        }
    }
    let total = csum(p.iter().copied());
    if (total - 1.0).abs() > tol {
        return Err(RankGameError::InvalidDistribution(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// A stochastic policy `pi(a|s)` as an `n_states x n_actions` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let pi = Policy { probs };
        pi.validate()?;
        Ok(pi)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Policy { probs }
    }

    /// Row-wise softmax of a logit table.
    pub fn softmax(logits: &Array2<f64>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Policy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.probs.outer_iter().enumerate() {
            check_distribution(row.as_slice().unwrap(), PROB_TOL, &format!("pi(.|{s})"))?;
        }
        Ok(())
    }
}

/// A visitation table: state-action mass or (LfO) state-only mass.
///
/// Rows include the reserved absorbing index, so a `StateAction` table over an
/// MDP with `n` states has shape `(n+1, n_actions)` and a `State` table has
/// length `n+1`.
#[derive(Debug, Clone, PartialEq)]
pub enum VisitTable {
    StateAction(Array2<f64>),
    State(Array1<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum VisitTableJson {
    StateAction { table: Vec<Vec<f64>> },
    State { table: Vec<f64> },
}

impl Serialize for VisitTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mirror = match self {
            VisitTable::StateAction(t) => {
                VisitTableJson::StateAction { table: t.outer_iter().map(|r| r.to_vec()).collect() }
            }
            VisitTable::State(t) => VisitTableJson::State { table: t.to_vec() },
        };
        mirror.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VisitTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match VisitTableJson::deserialize(deserializer)? {
            VisitTableJson::StateAction { table } => {
                let rows = table.len();
                let cols = table.first().map_or(0, |r| r.len());
                if table.iter().any(|r| r.len() != cols) {
                    return Err(serde::de::Error::custom("ragged state-action table"));
                }
                let flat: Vec<f64> = table.into_iter().flatten().collect();
                let arr = Array2::from_shape_vec((rows, cols), flat).map_err(serde::de::Error::custom)?;
                Ok(VisitTable::StateAction(arr))
            }
            VisitTableJson::State { table } => Ok(VisitTable::State(Array1::from_vec(table))),
        }
    }
}

impl VisitTable {
    pub fn is_state_only(&self) -> bool {
        matches!(self, VisitTable::State(_))
    }

    /// Number of scalar mass entries.
    pub fn len(&self) -> usize {
        match self {
            VisitTable::StateAction(t) => t.len(),
            VisitTable::State(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)`; `cols == 0` marks a state-only table.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            VisitTable::StateAction(t) => (t.nrows(), t.ncols()),
            VisitTable::State(t) => (t.len(), 0),
        }
    }

    /// Flat row-major view of the mass entries.
    pub fn flat(&self) -> &[f64] {
        match self {
            VisitTable::StateAction(t) => t.as_slice().expect("standard layout"),
            VisitTable::State(t) => t.as_slice().expect("standard layout"),
        }
    }

    /// Mass at a flat index.
    pub fn mass_at(&self, idx: usize) -> f64 {
        self.flat()[idx]
    }

    /// State index of a flat position.
    pub fn state_of(&self, idx: usize) -> usize {
        match self {
            VisitTable::StateAction(t) => idx / t.ncols(),
            VisitTable::State(_) => idx,
        }
    }

    pub fn sum(&self) -> f64 {
        csum(self.flat().iter().copied())
    }

    pub fn same_shape(&self, other: &VisitTable) -> bool {
        self.shape() == other.shape() && self.is_state_only() == other.is_state_only()
    }

    /// Elementwise convex step `self + alpha * (other - self)`.
    pub fn lerp(&self, other: &VisitTable, alpha: f64) -> Result<VisitTable> {
        self.zip_map(other, |x, y| x + alpha * (y - x))
    }

    pub fn zip_map(&self, other: &VisitTable, f: impl Fn(f64, f64) -> f64) -> Result<VisitTable> {
        if !self.same_shape(other) {
            return Err(RankGameError::KindMismatch(format!(
                "cannot combine tables with shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(match (self, other) {
            (VisitTable::StateAction(a), VisitTable::StateAction(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, y| *x = f(*x, *y));
                VisitTable::StateAction(out)
            }
            (VisitTable::State(a), VisitTable::State(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, y| *x = f(*x, *y));
                VisitTable::State(out)
            }
            _ => unreachable!(),
        })
    }

    /// Sum out the action dimension (identity on state-only tables).
    pub fn marginal_states(&self) -> VisitTable {
        match self {
            VisitTable::StateAction(t) => {
                VisitTable::State(Array1::from_iter(t.outer_iter().map(|row| csum(row.iter().copied()))))
            }
            VisitTable::State(t) => VisitTable::State(t.clone()),
        }
    }

    pub fn zeros_like(&self) -> VisitTable {
        match self {
            VisitTable::StateAction(t) => VisitTable::StateAction(Array2::zeros(t.dim())),
            VisitTable::State(t) => VisitTable::State(Array1::zeros(t.len())),
        }
    }

    pub fn add_scaled(&mut self, other: &VisitTable, w: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(RankGameError::KindMismatch("add_scaled on mismatched tables".into()));
        }
        match (self, other) {
            (VisitTable::StateAction(a), VisitTable::StateAction(b)) => a.zip_mut_with(b, |x, y| *x += w * y),
            (VisitTable::State(a), VisitTable::State(b)) => a.zip_mut_with(b, |x, y| *x += w * y),
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn scale(&mut self, w: f64) {
        match self {
            VisitTable::StateAction(t) => t.mapv_inplace(|x| x * w),
            VisitTable::State(t) => t.mapv_inplace(|x| x * w),
        }
    }

    pub fn validate_normalized(&self, what: &str) -> Result<()> {
        let total = self.sum();
        if (total - 1.0).abs() > VISIT_TOL {
            return Err(RankGameError::InvalidDistribution(format!("{what} sums to {total}, expected 1")));
        }
        for (i, v) in self.flat().iter().enumerate() {
            if *v < -VISIT_TOL || !v.is_finite() {
                return Err(RankGameError::InvalidDistribution(format!("{what}[{i}] = {v}")));
            }
        }
        Ok(())
    }
}

/// Normalized discounted occupancy plus optional per-step marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visitation {
    pub rho: VisitTable,
    /// Undiscounted per-step distributions for `t = 0..horizon`.
    pub time_marginals: Option<Vec<VisitTable>>,
}

impl Visitation {
    pub fn new(rho: VisitTable, time_marginals: Option<Vec<VisitTable>>) -> Result<Self> {
        rho.validate_normalized("rho")?;
        if let Some(ms) = &time_marginals {
            for (t, m) in ms.iter().enumerate() {
                m.validate_normalized(&format!("time_marginal[{t}]"))?;
            }
        }
        Ok(Visitation { rho, time_marginals })
    }

    /// Marginalize the occupancy (and marginals) over actions for LfO use.
    pub fn marginalized(&self) -> Visitation {
        Visitation {
            rho: self.rho.marginal_states(),
            time_marginals: self
                .time_marginals
                .as_ref()
                .map(|ms| ms.iter().map(|m| m.marginal_states()).collect()),
        }
    }

    pub fn is_state_only(&self) -> bool {
        self.rho.is_state_only()
    }
}

/// A finite rollout of at most `horizon` state-action steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub terminated_early: bool,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>, terminated_early: bool) -> Result<Self> {
        if steps.is_empty() {
            return Err(RankGameError::EmptyInput("trajectory must have at least one step".into()));
        }
        Ok(Trajectory { steps, terminated_early })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn check_compatible(mdp: &TabularMdp, pi: &Policy) -> Result<()> {
    if pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions {
        return Err(RankGameError::DimensionMismatch(format!(
            "policy is {}x{}, MDP wants {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

/// State-to-state transition matrix `P_pi(s, s')` under a policy.
fn policy_transition(mdp: &TabularMdp, pi: &Policy) -> Array2<f64> {
    let n = mdp.n_states;
    let mut p = Array2::zeros((n, n));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = pi.probs[[s, a]];
            if w == 0.0 {
                continue;
            }
            for s2 in 0..n {
                p[[s, s2]] += w * mdp.transition[[s, a, s2]];
            }
        }
    }
    p
}

/// Solve `(I - gamma * M) x = b` by LU decomposition.
fn discounted_solve(m: &Array2<f64>, gamma: f64, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    let mut sys = nalgebra::DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            sys[(i, j)] -= gamma * m[[i, j]];
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().copied());
    let lu = sys.lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| RankGameError::InvalidArgument("flow system is singular (cannot happen for gamma < 1)".into()))?;
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Exact normalized discounted occupancy of a policy, with per-step marginals
/// for `t = 0..horizon`.
///
/// The discounted state distribution solves the linear flow equations
/// `d = (1-gamma)*rho0 + gamma * P_pi^T d`; the occupancy is `d(s)*pi(a|s)`.
pub fn exact_visitation(mdp: &TabularMdp, pi: &Policy) -> Result<Visitation> {
    check_compatible(mdp, pi)?;
    let n = mdp.n_states;
    let m = mdp.n_actions;
    let p_pi = policy_transition(mdp, pi);
    let b = mdp.rho0.mapv(|v| v * (1.0 - mdp.gamma));
    let d = discounted_solve(&p_pi.t().to_owned(), mdp.gamma, &b)?;

    let mut rho = Array2::zeros((n + 1, m));
    for s in 0..n {
        for a in 0..m {
            rho[[s, a]] = d[s].max(0.0) * pi.probs[[s, a]];
        }
    }

    // Per-step marginals by forward propagation of the state distribution.
    let mut marginals = Vec::with_capacity(mdp.horizon);
    let mut dist = mdp.rho0.clone();
    for _ in 0..mdp.horizon {
        let mut mt = Array2::zeros((n + 1, m));
        for s in 0..n {
            for a in 0..m {
                mt[[s, a]] = dist[s] * pi.probs[[s, a]];
            }
        }
        marginals.push(VisitTable::StateAction(mt));
        let mut next = Array1::zeros(n);
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..m {
                let w = dist[s] * pi.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..n {
                    next[s2] += w * mdp.transition[[s, a, s2]];
                }
            }
        }
        dist = next;
    }

    Visitation::new(VisitTable::StateAction(rho), Some(marginals))
}

/// Pad an early-terminated trajectory with the reserved absorbing
/// state-action until it reaches the full horizon. Full-length or
/// non-early-terminated trajectories pass through unchanged.
pub fn pad_absorbing(trajectory: &Trajectory, mdp: &TabularMdp) -> Trajectory {
    if !trajectory.terminated_early || trajectory.len() >= mdp.horizon {
        return trajectory.clone();
    }
    let mut steps = trajectory.steps.clone();
    while steps.len() < mdp.horizon {
        steps.push((mdp.absorbing_index(), 0));
    }
    Trajectory { steps, terminated_early: false }
}

/// Normalized discount-weighted visitation counts over a trajectory set.
///
/// Early-terminated trajectories are padded with the absorbing state-action
/// first. Per-step marginals are populated when every (padded) trajectory
/// covers the full horizon.
pub fn empirical_visitation(trajectories: &[Trajectory], mdp: &TabularMdp) -> Result<Visitation> {
    if trajectories.is_empty() {
        return Err(RankGameError::EmptyInput("empirical_visitation needs at least one trajectory".into()));
    }
    let n_rows = mdp.n_rows();
    let m = mdp.n_actions;
    let padded: Vec<Trajectory> = trajectories.iter().map(|t| pad_absorbing(t, mdp)).collect();
    for (i, t) in padded.iter().enumerate() {
        for &(s, a) in &t.steps {
            if s >= n_rows || a >= m {
                return Err(RankGameError::DimensionMismatch(format!(
                    "trajectory {i} step ({s},{a}) out of range for {n_rows}x{m} tables"
                )));
            }
        }
    }

    let mut rho = Array2::<f64>::zeros((n_rows, m));
    let mut weight_total = 0.0;
    for t in &padded {
        let mut w = 1.0;
        for &(s, a) in &t.steps {
            rho[[s, a]] += w;
            weight_total += w;
            w *= mdp.gamma;
        }
    }
    rho.mapv_inplace(|v| v / weight_total);

    let full_horizon = padded.iter().all(|t| t.len() == mdp.horizon);
    let time_marginals = if full_horizon {
        let per = 1.0 / padded.len() as f64;
        let mut ms = Vec::with_capacity(mdp.horizon);
        for t_idx in 0..mdp.horizon {
            let mut mt = Array2::<f64>::zeros((n_rows, m));
            for t in &padded {
                let (s, a) = t.steps[t_idx];
                mt[[s, a]] += per;
            }
            ms.push(VisitTable::StateAction(mt));
        }
        Some(ms)
    } else {
        None
    };

    Visitation::new(VisitTable::StateAction(rho), time_marginals)
}

/// Expected return `J(pi; R) = 1/(1-gamma) * E_rho[R]` via the exact occupancy.
pub fn policy_return(mdp: &TabularMdp, pi: &Policy, reward: &RewardFn) -> Result<f64> {
    let vis = exact_visitation(mdp, pi)?;
    expected_reward(&vis.rho, reward).map(|e| e / (1.0 - mdp.gamma))
}

/// `E_rho[R]` under a visitation table.
pub fn expected_reward(rho: &VisitTable, reward: &RewardFn) -> Result<f64> {
    let values = reward.values_for(rho)?;
    Ok(cdot(&rho.flat(), &values))
}

/// Evaluate a reward as the dense `(n_states, n_actions)` table the policy
/// player optimizes against (the absorbing row is not part of the dynamics).
pub fn reward_matrix(mdp: &TabularMdp, reward: &RewardFn) -> Result<Array2<f64>> {
    reward.dense_matrix(mdp.n_states, mdp.n_actions)
}

/// The MDP's ground-truth reward wrapped as a scoreable [`RewardFn`] (zero on
/// the absorbing row), when present.
pub fn true_reward_fn(mdp: &TabularMdp) -> Option<RewardFn> {
    mdp.true_reward.as_ref().map(|r| {
        let params: Vec<f64> = (0..mdp.n_rows() * mdp.n_actions)
            .map(|i| {
                let (s, a) = (i / mdp.n_actions, i % mdp.n_actions);
                if s < mdp.n_states {
                    r[[s, a]]
                } else {
                    0.0
                }
            })
            .collect();
        RewardFn::tabular(crate::ranking::RewardKind::StateAction, mdp.n_states, mdp.n_actions, params, (0.0, mdp.r_max))
            .expect("true reward geometry")
    })
}

/// Entropy-regularized value iteration: `n_iters` soft Bellman backups from
/// zero, returning the softmax policy of the final Q table.
///
/// As `temperature -> 0` and `n_iters -> inf` this approaches the greedy
/// optimal policy; the residual suboptimality is measurable as `eps_pi`.
pub fn soft_value_iteration(mdp: &TabularMdp, reward: &RewardFn, temperature: f64, n_iters: usize) -> Result<Policy> {
    let q0 = Array2::zeros((mdp.n_states, mdp.n_actions));
    let (pi, _) = soft_value_iteration_from(mdp, reward, temperature, n_iters, q0)?;
    Ok(pi)
}

/// Soft value iteration continuing from a given Q table; used by the game
/// loops to warm-start the policy player across rounds.
pub fn soft_value_iteration_from(
    mdp: &TabularMdp,
    reward: &RewardFn,
    temperature: f64,
    n_iters: usize,
    q: Array2<f64>,
) -> Result<(Policy, Array2<f64>)> {
    soft_value_iteration_damped(mdp, reward, temperature, n_iters, q, 1.0)
}

/// Soft value iteration with relaxed backups `Q <- (1-step)*Q + step*TQ`;
/// `step = 1` is the plain operator. Relaxation damps the policy player the
/// way incremental actor-critic updates do, at the cost of slower tracking.
pub fn soft_value_iteration_damped(
    mdp: &TabularMdp,
    reward: &RewardFn,
    temperature: f64,
    n_iters: usize,
    mut q: Array2<f64>,
    step: f64,
) -> Result<(Policy, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(RankGameError::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if n_iters == 0 {
        return Err(RankGameError::InvalidArgument("n_iters must be >= 1".into()));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(RankGameError::InvalidArgument(format!("backup step must lie in (0,1], got {step}")));
    }
    if q.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(RankGameError::DimensionMismatch("Q table shape mismatch".into()));
    }
    let r = reward_matrix(mdp, reward)?;
    let n = mdp.n_states;
    let m = mdp.n_actions;
    let mut v = Array1::zeros(n);
    for _ in 0..n_iters {
        for s in 0..n {
            v[s] = soft_max_value(q.row(s).as_slice().unwrap(), temperature);
        }
        for s in 0..n {
            for a in 0..m {
                let mut exp_v = 0.0;
                for s2 in 0..n {
                    exp_v += mdp.transition[[s, a, s2]] * v[s2];
                }
                let backed_up = r[[s, a]] + mdp.gamma * exp_v;
                q[[s, a]] += step * (backed_up - q[[s, a]]);
            }
        }
    }
    let pi = Policy::softmax(&q.mapv(|x| x / temperature));
    Ok((pi, q))
}

/// `temperature * logsumexp(q / temperature)` with max subtraction.
fn soft_max_value(q: &[f64], temperature: f64) -> f64 {
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = q.iter().map(|&x| ((x - max) / temperature).exp()).sum();
    max + temperature * z.ln()
}

/// Exact optimal policy and return under a reward, by policy iteration with
/// exact linear-solve evaluation (terminates finitely; Bellman residual at
/// the fixed point is at floating-point level, well below 1e-10).
pub fn hard_value_iteration(mdp: &TabularMdp, reward: &RewardFn) -> Result<(Policy, f64)> {
    let r = reward_matrix(mdp, reward)?;
    let n = mdp.n_states;
    let m = mdp.n_actions;
    let mut actions = vec![0usize; n];
    let mut v = Array1::zeros(n);
    for _ in 0..10_000 {
        let pi = Policy::deterministic(&actions, m);
        let p_pi = policy_transition(mdp, &pi);
        let r_pi = Array1::from_iter((0..n).map(|s| r[[s, actions[s]]]));
        v = discounted_solve(&p_pi, mdp.gamma, &r_pi)?;
        let mut changed = false;
        for s in 0..n {
            let mut best_a = actions[s];
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..m {
                let mut q = r[[s, a]];
                for s2 in 0..n {
                    q += mdp.gamma * mdp.transition[[s, a, s2]] * v[s2];
                }
                if a == actions[s] {
                    // Incumbent keeps ties, so the iteration cannot cycle.
                    if q >= best_q {
                        best_q = q;
                        best_a = a;
                    }
                } else if q > best_q + 1e-12 {
                    best_q = q;
                    best_a = a;
                }
            }
            if best_a != actions[s] {
                actions[s] = best_a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let pi = Policy::deterministic(&actions, m);
    let j_star = cdot(mdp.rho0.as_slice().unwrap(), v.as_slice().unwrap());
    Ok((pi, j_star))
}

/// Sample `n` independent horizon-length rollouts, deterministic given the
/// seed.
pub fn sample_trajectories(mdp: &TabularMdp, pi: &Policy, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(RankGameError::InvalidArgument("need n >= 1 trajectories".into()));
    }
    check_compatible(mdp, pi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho0_dist = WeightedIndex::new(mdp.rho0.iter().copied())
        .map_err(|e| RankGameError::InvalidDistribution(format!("rho0: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = rho0_dist.sample(&mut rng);
        let mut steps = Vec::with_capacity(mdp.horizon);
        for _ in 0..mdp.horizon {
            let a_dist = WeightedIndex::new(pi.probs.row(s).iter().copied())
                .map_err(|e| RankGameError::InvalidDistribution(format!("pi(.|{s}): {e}")))?;
            let a = a_dist.sample(&mut rng);
            steps.push((s, a));
            let s_dist = WeightedIndex::new(mdp.transition.slice(ndarray::s![s, a, ..]).iter().copied())
                .map_err(|e| RankGameError::InvalidDistribution(format!("P({s},{a},.): {e}")))?;
            s = s_dist.sample(&mut rng);
        }
        out.push(Trajectory { steps, terminated_early: false });
    }
    Ok(out)
}
