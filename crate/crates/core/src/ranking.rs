//! Ranking datasets and reward-learning losses.
//!
//! The reward player never sees the environment: it only sees ordered pairs
//! and chains of visitations and fits a bounded reward to explain them. Three
//! loss families are implemented:
//!
//! - the supremum loss of classical adversarial imitation, realized as clamped
//!   gradient ascent on the expert/agent performance gap;
//! - the `L_k` regression loss driving the lesser member's expected reward to
//!   0 and the greater member's to `k`, with its pointwise closed-form
//!   minimizer `R = k * rho_E / (rho_E + rho_pi)`;
//! - the shaped `SL_k` loss over a chain of visitations with graded scalar
//!   targets, fed either by auto-generated time-conditional interpolants or by
//!   offline annotated rankings (optionally densified with trajectory-snippet
//!   regression terms).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{RankGameError, Result};
use crate::mdp::{Trajectory, VisitTable, Visitation};
use crate::util::{csum, CompensatedSum};

/// Clamp range used where the caller wants effectively unbounded rewards.
pub const WIDE_CLAMP: (f64, f64) = (-1e12, 1e12);

/// Whether a reward scores state-action pairs or states only (LfO).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    StateAction,
    StateOnly,
}

/// A bounded reward over state-action pairs or states.
///
/// Tables cover the reserved absorbing row, so a state-action reward over an
/// MDP with `n` states and `m` actions has `(n+1)*m` points and a state-only
/// reward has `n+1`. Parameters are either the table itself (identity
/// features) or a weight vector under a fixed linear feature basis; emitted
/// values are clamped to `clamp_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFn {
    pub kind: RewardKind,
    n_states: usize,
    n_actions: usize,
    params: Vec<f64>,
    /// Linear feature basis, one row per point; `None` means identity
    /// (tabular) features.
    features: Option<Vec<Vec<f64>>>,
    pub clamp_range: (f64, f64),
}

impl RewardFn {
    /// Tabular reward with all parameters zero and a wide clamp.
    pub fn tabular_zero(n_states: usize, n_actions: usize, kind: RewardKind) -> Self {
        let n_points = match kind {
            RewardKind::StateAction => (n_states + 1) * n_actions,
            RewardKind::StateOnly => n_states + 1,
        };
        RewardFn { kind, n_states, n_actions, params: vec![0.0; n_points], features: None, clamp_range: WIDE_CLAMP }
    }

    /// Tabular reward with every point set to `c`.
    pub fn tabular_constant(n_states: usize, n_actions: usize, kind: RewardKind, c: f64) -> Self {
        let mut r = Self::tabular_zero(n_states, n_actions, kind);
        r.params.iter_mut().for_each(|v| *v = c);
        r
    }

    /// Tabular state-action reward from a function of `(s, a)` over the real
    /// states; the absorbing row stays zero.
    pub fn tabular_from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut r = Self::tabular_zero(n_states, n_actions, RewardKind::StateAction);
        for s in 0..n_states {
            for a in 0..n_actions {
                r.params[s * n_actions + a] = f(s, a);
            }
        }
        r
    }

    /// Tabular reward from explicit per-point parameters.
    pub fn tabular(kind: RewardKind, n_states: usize, n_actions: usize, params: Vec<f64>, clamp_range: (f64, f64)) -> Result<Self> {
        let r = RewardFn { kind, n_states, n_actions, params, features: None, clamp_range };
        r.check_geometry()?;
        Ok(r)
    }

    /// Linear-in-features reward `R(x) = w . phi(x)` with one feature row per
    /// point.
    pub fn linear(
        kind: RewardKind,
        n_states: usize,
        n_actions: usize,
        features: Vec<Vec<f64>>,
        weights: Vec<f64>,
        clamp_range: (f64, f64),
    ) -> Result<Self> {
        let r = RewardFn { kind, n_states, n_actions, params: weights, features: Some(features), clamp_range };
        r.check_geometry()?;
        Ok(r)
    }

    fn check_geometry(&self) -> Result<()> {
        let n_points = self.n_points();
        match &self.features {
            None => {
                if self.params.len() != n_points {
                    return Err(RankGameError::DimensionMismatch(format!(
                        "tabular reward has {} params, expected {n_points}",
                        self.params.len()
                    )));
                }
            }
            Some(rows) => {
                if rows.len() != n_points {
                    return Err(RankGameError::DimensionMismatch(format!(
                        "feature basis has {} rows, expected {n_points}",
                        rows.len()
                    )));
                }
                if rows.iter().any(|r| r.len() != self.params.len()) {
                    return Err(RankGameError::DimensionMismatch("feature rows must match weight length".into()));
                }
            }
        }
        if !(self.clamp_range.0 < self.clamp_range.1) {
            return Err(RankGameError::InvalidArgument("clamp range must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of scoreable points (including the absorbing row).
    pub fn n_points(&self) -> usize {
        match self.kind {
            RewardKind::StateAction => (self.n_states + 1) * self.n_actions,
            RewardKind::StateOnly => self.n_states + 1,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn raw_point_value(&self, point: usize) -> f64 {
        match &self.features {
            None => self.params[point],
            Some(rows) => rows[point].iter().zip(&self.params).map(|(f, w)| f * w).sum(),
        }
    }

    fn clamp_value(&self, v: f64) -> f64 {
        v.clamp(self.clamp_range.0, self.clamp_range.1)
    }

    /// Clamped value at a point index.
    pub fn point_value(&self, point: usize) -> f64 {
        self.clamp_value(self.raw_point_value(point))
    }

    /// Clamped value at `(s, a)`; state-only rewards ignore the action.
    pub fn value_state_action(&self, s: usize, a: usize) -> f64 {
        match self.kind {
            RewardKind::StateAction => self.point_value(s * self.n_actions + a),
            RewardKind::StateOnly => self.point_value(s),
        }
    }

    /// All clamped point values.
    pub fn all_values(&self) -> Vec<f64> {
        (0..self.n_points()).map(|p| self.point_value(p)).collect()
    }

    /// Point index scored by flat position `i` of a visitation table.
    fn point_of_table_idx(&self, table: &VisitTable, i: usize) -> Result<usize> {
        match (self.kind, table) {
            (RewardKind::StateAction, VisitTable::StateAction(t)) => {
                if t.len() != self.n_points() {
                    return Err(RankGameError::DimensionMismatch(format!(
                        "table has {} entries, reward scores {}",
                        t.len(),
                        self.n_points()
                    )));
                }
                Ok(i)
            }
            (RewardKind::StateOnly, VisitTable::StateAction(t)) => {
                if t.nrows() != self.n_states + 1 {
                    return Err(RankGameError::DimensionMismatch("table rows do not match state-only reward".into()));
                }
                Ok(i / t.ncols())
            }
            (RewardKind::StateOnly, VisitTable::State(t)) => {
                if t.len() != self.n_points() {
                    return Err(RankGameError::DimensionMismatch("state table length mismatch".into()));
                }
                Ok(i)
            }
            (RewardKind::StateAction, VisitTable::State(_)) => Err(RankGameError::KindMismatch(
                "state-action reward cannot be evaluated under a state-only visitation".into(),
            )),
        }
    }

    /// Clamped reward values aligned with the flat layout of a table.
    pub fn values_for(&self, table: &VisitTable) -> Result<Vec<f64>> {
        (0..table.len()).map(|i| self.point_of_table_idx(table, i).map(|p| self.point_value(p))).collect()
    }

    /// Dense `(n_states, n_actions)` matrix the policy player optimizes
    /// against (absorbing row excluded).
    pub fn dense_matrix(&self, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
        if n_states != self.n_states || (self.kind == RewardKind::StateAction && n_actions != self.n_actions) {
            return Err(RankGameError::DimensionMismatch(format!(
                "reward is over {}x{}, MDP wants {}x{}",
                self.n_states, self.n_actions, n_states, n_actions
            )));
        }
        let mut m = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                m[[s, a]] = self.value_state_action(s, a);
            }
        }
        Ok(m)
    }

    /// Accumulate `coeff * dR(point)/dparams` into `grad`. Feature rewards
    /// pass no gradient through clamped-out points; tabular rewards are kept
    /// inside the clamp by projection instead.
    fn add_point_grad(&self, point: usize, coeff: f64, grad: &mut [f64]) {
        match &self.features {
            None => grad[point] += coeff,
            Some(rows) => {
                let raw = self.raw_point_value(point);
                if raw < self.clamp_range.0 || raw > self.clamp_range.1 {
                    return;
                }
                for (g, f) in grad.iter_mut().zip(&rows[point]) {
                    *g += coeff * f;
                }
            }
        }
    }

    /// Accumulate the gradient of `weight * E_table[(R - target)^2]`.
    fn add_sq_err_grad(&self, table: &VisitTable, target: f64, weight: f64, grad: &mut [f64]) -> Result<()> {
        for (i, &mass) in table.flat().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let point = self.point_of_table_idx(table, i)?;
            let coeff = weight * 2.0 * mass * (self.point_value(point) - target);
            self.add_point_grad(point, coeff, grad);
        }
        Ok(())
    }

    /// Accumulate the gradient of `weight * E_table[R]`.
    fn add_linear_grad(&self, table: &VisitTable, weight: f64, grad: &mut [f64]) -> Result<()> {
        for (i, &mass) in table.flat().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let point = self.point_of_table_idx(table, i)?;
            self.add_point_grad(point, weight * mass, grad);
        }
        Ok(())
    }

    /// `E_table[(R - target)^2]` with compensated summation.
    pub fn expected_sq_err(&self, table: &VisitTable, target: f64) -> Result<f64> {
        let values = self.values_for(table)?;
        Ok(csum(table.flat().iter().zip(&values).map(|(m, v)| m * (v - target) * (v - target))))
    }

    /// `E_table[R]` with compensated summation.
    pub fn expected_value(&self, table: &VisitTable) -> Result<f64> {
        let values = self.values_for(table)?;
        Ok(csum(table.flat().iter().zip(&values).map(|(m, v)| m * v)))
    }

    /// Project tabular parameters into the clamp range (no-op for feature
    /// rewards, whose outputs are clamped at evaluation).
    pub fn project_into_clamp(&mut self) {
        if self.features.is_none() {
            let (lo, hi) = self.clamp_range;
            self.params.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    fn step_params(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        self.project_into_clamp();
    }
}

/// Provenance tag for a ranking pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    OnlineAgentVsExpert,
    AutoInterpolant,
    OfflineAnnotated,
}

/// An ordered visitation comparison: `lesser` is ranked below `greater`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPair {
    pub lesser: Visitation,
    pub greater: Visitation,
    pub source: PairSource,
}

impl RankingPair {
    pub fn new(lesser: Visitation, greater: Visitation, source: PairSource) -> Result<Self> {
        if !lesser.rho.same_shape(&greater.rho) {
            return Err(RankGameError::KindMismatch("ranking pair members have mismatched tables".into()));
        }
        Ok(RankingPair { lesser, greater, source })
    }
}

/// An ordered sequence of visitations (weakest to strongest) with
/// nondecreasing scalar return targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingChain {
    pub members: Vec<Visitation>,
    pub targets: Vec<f64>,
}

impl RankingChain {
    pub fn new(members: Vec<Visitation>, targets: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(RankGameError::EmptyInput("ranking chain needs at least one member".into()));
        }
        if members.len() != targets.len() {
            return Err(RankGameError::DimensionMismatch(format!(
                "{} members vs {} targets",
                members.len(),
                targets.len()
            )));
        }
        if targets.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            return Err(RankGameError::InvalidArgument("chain targets must be nondecreasing".into()));
        }
        if members.windows(2).any(|w| !w[0].rho.same_shape(&w[1].rho)) {
            return Err(RankGameError::KindMismatch("chain members have mismatched tables".into()));
        }
        Ok(RankingChain { members, targets })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A collection of ranking pairs and chains.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankingDataset {
    pub pairs: Vec<RankingPair>,
    pub chains: Vec<RankingChain>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    visitations: Vec<Visitation>,
    pairs: Vec<PairRefJson>,
    chains: Vec<ChainRefJson>,
}

#[derive(Serialize, Deserialize)]
struct PairRefJson {
    lesser: usize,
    greater: usize,
    source: PairSource,
}

#[derive(Serialize, Deserialize)]
struct ChainRefJson {
    members: Vec<usize>,
    targets: Vec<f64>,
}

impl RankingDataset {
    pub fn from_pairs(pairs: Vec<RankingPair>) -> Self {
        RankingDataset { pairs, chains: Vec::new() }
    }

    /// Serialize as a JSON document with pairs/chains referencing a shared
    /// visitation blob list.
    pub fn to_json(&self) -> Result<String> {
        let mut visitations = Vec::new();
        let mut push = |v: &Visitation| {
            visitations.push(v.clone());
            visitations.len() - 1
        };
        let pairs = self
            .pairs
            .iter()
            .map(|p| PairRefJson { lesser: push(&p.lesser), greater: push(&p.greater), source: p.source })
            .collect();
        let chains = self
            .chains
            .iter()
            .map(|c| ChainRefJson { members: c.members.iter().map(&mut push).collect(), targets: c.targets.clone() })
            .collect();
        Ok(serde_json::to_string_pretty(&DatasetJson { visitations, pairs, chains })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(text)?;
        let get = |i: usize| -> Result<Visitation> {
            doc.visitations
                .get(i)
                .cloned()
                .ok_or_else(|| RankGameError::Serde(format!("visitation index {i} out of range")))
        };
        let mut pairs = Vec::with_capacity(doc.pairs.len());
        for p in &doc.pairs {
            pairs.push(RankingPair::new(get(p.lesser)?, get(p.greater)?, p.source)?);
        }
        let mut chains = Vec::with_capacity(doc.chains.len());
        for c in &doc.chains {
            let members = c.members.iter().map(|&i| get(i)).collect::<Result<Vec<_>>>()?;
            chains.push(RankingChain::new(members, c.targets.clone())?);
        }
        Ok(RankingDataset { pairs, chains })
    }
}

/// Which ranking loss drives a reward fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Classical adversarial gap, maximized by clamped ascent (IMIT).
    Supremum,
    /// Two-level regression to `{0, k}` on online pairs.
    Lk,
    /// Shaped chain regression on auto-generated interpolants (RANK-auto).
    SlkAuto,
    /// Weighted online `L_k` + offline chain `SL_k` (RANK-pref).
    Offline,
}

/// Families of monotone maps from interpolation degree `alpha` to return
/// targets `k_alpha`, with boundaries `k_0 = 0` and `k_1 = k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingFamily {
    pub kind: ShapingKind,
    /// Temperature of the exponential family (ignored by the linear one).
    #[serde(default)]
    pub beta: f64,
    pub k_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingKind {
    Linear,
    Exponential,
}

impl ShapingFamily {
    pub fn linear(k_max: f64) -> Self {
        ShapingFamily { kind: ShapingKind::Linear, beta: 0.0, k_max }
    }

    pub fn exponential(beta: f64, k_max: f64) -> Self {
        ShapingFamily { kind: ShapingKind::Exponential, beta, k_max }
    }

    /// Default shaping used by the shaped loss: exp(-1).
    pub fn default_auto(k_max: f64) -> Self {
        ShapingFamily::exponential(-1.0, k_max)
    }

    pub fn target(&self, alpha: f64) -> f64 {
        match self.kind {
            ShapingKind::Linear => alpha * self.k_max,
            ShapingKind::Exponential => {
                // beta -> 0 degenerates to the linear family.
                if self.beta.abs() < 1e-12 {
                    alpha * self.k_max
                } else {
                    self.k_max * (self.beta * alpha).exp_m1() / self.beta.exp_m1()
                }
            }
        }
    }
}

/// Map interpolation degrees to return targets under a shaping family.
pub fn shape_targets(family: &ShapingFamily, alphas: &[f64]) -> Result<Vec<f64>> {
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(RankGameError::InvalidArgument(format!("alpha {a} outside [0,1]")));
        }
    }
    Ok(alphas.iter().map(|&a| family.target(a)).collect())
}

/// Mean `L_k` regression loss over the pairs of a dataset: each pair
/// contributes `E_lesser[(R-0)^2] + E_greater[(R-k)^2]`.
pub fn loss_lk(dataset: &RankingDataset, reward: &RewardFn, k: f64) -> Result<f64> {
    if dataset.pairs.is_empty() {
        return Err(RankGameError::EmptyInput("loss_lk needs at least one ranking pair".into()));
    }
    if !(k > 0.0) {
        return Err(RankGameError::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let mut acc = CompensatedSum::new();
    for pair in &dataset.pairs {
        acc.add(reward.expected_sq_err(&pair.lesser.rho, 0.0)?);
        acc.add(reward.expected_sq_err(&pair.greater.rho, k)?);
    }
    Ok(acc.value() / dataset.pairs.len() as f64)
}

/// Pointwise minimizer of the single-pair `L_k` loss:
/// `R = k * rho_E / (rho_E + rho_pi)` on the support, `k/2` where both
/// visitations carry no mass (the symmetric fixed point).
pub fn closed_form_reward(rho_agent: &Visitation, rho_expert: &Visitation, k: f64) -> Result<RewardFn> {
    if !(k > 0.0) {
        return Err(RankGameError::InvalidArgument(format!("k must be positive, got {k}")));
    }
    if !rho_agent.rho.same_shape(&rho_expert.rho) {
        return Err(RankGameError::KindMismatch("agent/expert tables have mismatched shapes".into()));
    }
    let agent = rho_agent.rho.flat();
    let expert = rho_expert.rho.flat();
    let params: Vec<f64> = agent
        .iter()
        .zip(expert)
        .map(|(&p, &e)| {
            let denom = p + e;
            if denom > 0.0 {
                k * e / denom
            } else {
                k / 2.0
            }
        })
        .collect();
    let (rows, cols) = rho_agent.rho.shape();
    match &rho_agent.rho {
        VisitTable::StateAction(_) => RewardFn::tabular(RewardKind::StateAction, rows - 1, cols, params, WIDE_CLAMP),
        VisitTable::State(_) => RewardFn::tabular(RewardKind::StateOnly, rows - 1, 0, params, WIDE_CLAMP),
    }
}

/// Ascent gradient of the supremum objective `E_expert[R] - E_agent[R]` with
/// respect to the reward parameters: `(rho_E - rho_pi)` composed with the
/// feature map.
pub fn loss_supremum_grad(rho_agent: &Visitation, rho_expert: &Visitation, reward: &RewardFn) -> Result<Vec<f64>> {
    if !rho_agent.rho.same_shape(&rho_expert.rho) {
        return Err(RankGameError::KindMismatch("agent/expert tables have mismatched shapes".into()));
    }
    let mut grad = vec![0.0; reward.n_params()];
    reward.add_linear_grad(&rho_expert.rho, 1.0, &mut grad)?;
    reward.add_linear_grad(&rho_agent.rho, -1.0, &mut grad)?;
    Ok(grad)
}

/// Time-conditional interpolants between agent and expert visitations.
///
/// Interpolant `i` (for `i = 1..=p`) has per-step marginals
/// `rho_t_agent + alpha_i * (rho_t_expert - rho_t_agent)` with
/// `alpha_i = i/(p+1)`; its aggregate occupancy is the discount-weighted,
/// normalized combination of those marginals.
pub fn make_interpolants(rho_agent: &Visitation, rho_expert: &Visitation, p: usize, gamma: f64) -> Result<Vec<Visitation>> {
    if p == 0 {
        return Err(RankGameError::InvalidArgument("need p >= 1 interpolants".into()));
    }
    let agent_ms = rho_agent
        .time_marginals
        .as_ref()
        .ok_or_else(|| RankGameError::MissingData("agent visitation lacks time marginals".into()))?;
    let expert_ms = rho_expert
        .time_marginals
        .as_ref()
        .ok_or_else(|| RankGameError::MissingData("expert visitation lacks time marginals".into()))?;
    if agent_ms.len() != expert_ms.len() || agent_ms.is_empty() {
        return Err(RankGameError::DimensionMismatch(format!(
            "marginal horizons differ: {} vs {}",
            agent_ms.len(),
            expert_ms.len()
        )));
    }
    let mut out = Vec::with_capacity(p);
    for i in 1..=p {
        let alpha = i as f64 / (p as f64 + 1.0);
        let marginals: Vec<VisitTable> = agent_ms
            .iter()
            .zip(expert_ms)
            .map(|(a, e)| a.lerp(e, alpha))
            .collect::<Result<_>>()?;
        let rho = aggregate_marginals(&marginals, gamma)?;
        out.push(Visitation::new(rho, Some(marginals))?);
    }
    Ok(out)
}

/// Discount-weighted, normalized combination of per-step marginals.
pub fn aggregate_marginals(marginals: &[VisitTable], gamma: f64) -> Result<VisitTable> {
    if marginals.is_empty() {
        return Err(RankGameError::EmptyInput("no marginals to aggregate".into()));
    }
    let mut acc = marginals[0].zeros_like();
    let mut disc = 1.0;
    let mut total = 0.0;
    for m in marginals {
        acc.add_scaled(m, disc)?;
        total += disc;
        disc *= gamma;
    }
    acc.scale(1.0 / total);
    Ok(acc)
}

/// Build the auto-generated ranking chain
/// `agent = int_0 <= int_1 <= ... <= int_p <= int_{p+1} = expert`
/// with targets shaped at `alpha = 0, 1/(p+1), ..., 1`.
pub fn make_auto_chain(
    rho_agent: &Visitation,
    rho_expert: &Visitation,
    p: usize,
    gamma: f64,
    shaping: &ShapingFamily,
) -> Result<RankingChain> {
    let interpolants = make_interpolants(rho_agent, rho_expert, p, gamma)?;
    let mut alphas = Vec::with_capacity(p + 2);
    alphas.push(0.0);
    for i in 1..=p {
        alphas.push(i as f64 / (p as f64 + 1.0));
    }
    alphas.push(1.0);
    let targets = shape_targets(shaping, &alphas)?;
    let mut members = Vec::with_capacity(p + 2);
    members.push(rho_agent.clone());
    members.extend(interpolants);
    members.push(rho_expert.clone());
    RankingChain::new(members, targets)
}

/// Shaped ranking regression loss over a chain:
/// `(1/len) * sum_i E_member_i[(R - k_i)^2]`.
pub fn loss_slk(chain: &RankingChain, reward: &RewardFn) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for (member, &target) in chain.members.iter().zip(&chain.targets) {
        acc.add(reward.expected_sq_err(&member.rho, target)?);
    }
    Ok(acc.value() / chain.len() as f64)
}

/// Offline rankings as a soft constraint:
/// `lambda * L_k(online) + (1 - lambda) * SL_k(offline_chain)`.
pub fn loss_offline_combined(
    online: &RankingDataset,
    offline_chain: &RankingChain,
    reward: &RewardFn,
    k: f64,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RankGameError::InvalidArgument(format!("lambda must lie in [0,1], got {lambda}")));
    }
    // At the endpoints only the active term is evaluated, so lambda = 0 works
    // without any online pair and lambda = 1 without an offline chain.
    let online_part = if lambda > 0.0 { loss_lk(online, reward, k)? } else { 0.0 };
    let offline_part = if lambda < 1.0 { loss_slk(offline_chain, reward)? } else { 0.0 };
    Ok(lambda * online_part + (1.0 - lambda) * offline_part)
}

/// Snippet regression terms: every contiguous length-`l` window of trajectory
/// `i` is regressed so its reward sum hits `k_i * l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetTerms {
    windows: Vec<SnippetWindow>,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnippetWindow {
    steps: Vec<(usize, usize)>,
    target_sum: f64,
}

/// Enumerate snippet terms (sliding window, stride 1, deterministic order).
/// Trajectories shorter than `l` contribute no terms.
pub fn augment_snippets(trajectories: &[Trajectory], targets: &[f64], l: usize) -> Result<SnippetTerms> {
    if l == 0 {
        return Err(RankGameError::InvalidArgument("snippet length must be >= 1".into()));
    }
    if trajectories.len() != targets.len() {
        return Err(RankGameError::DimensionMismatch(format!(
            "{} trajectories vs {} targets",
            trajectories.len(),
            targets.len()
        )));
    }
    let mut windows = Vec::new();
    for (traj, &k_i) in trajectories.iter().zip(targets) {
        if traj.len() < l {
            continue;
        }
        for start in 0..=(traj.len() - l) {
            windows.push(SnippetWindow { steps: traj.steps[start..start + l].to_vec(), target_sum: k_i * l as f64 });
        }
    }
    Ok(SnippetTerms { windows, length: l })
}

impl SnippetTerms {
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    /// Mean squared deviation of window reward sums from their targets.
    pub fn loss(&self, reward: &RewardFn) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let total = csum(self.windows.iter().map(|w| {
            let sum = csum(w.steps.iter().map(|&(s, a)| reward.value_state_action(s, a)));
            (sum - w.target_sum) * (sum - w.target_sum)
        }));
        total / self.windows.len() as f64
    }

    fn add_grad(&self, reward: &RewardFn, weight: f64, grad: &mut [f64]) {
        if self.windows.is_empty() {
            return;
        }
        let w_norm = weight / self.windows.len() as f64;
        for w in &self.windows {
            let sum = csum(w.steps.iter().map(|&(s, a)| reward.value_state_action(s, a)));
            let coeff = w_norm * 2.0 * (sum - w.target_sum);
            for &(s, a) in &w.steps {
                let point = match reward.kind {
                    RewardKind::StateAction => s * reward.n_actions + a,
                    RewardKind::StateOnly => s,
                };
                reward.add_point_grad(point, coeff, grad);
            }
        }
    }
}

/// The differentiable objective a reward fit descends on.
pub(crate) struct RewardObjective<'a> {
    pub dataset: &'a RankingDataset,
    pub loss_kind: LossKind,
    pub k: f64,
    pub lambda: f64,
    pub snippets: Option<&'a SnippetTerms>,
}

impl<'a> RewardObjective<'a> {
    pub fn loss(&self, reward: &RewardFn) -> Result<f64> {
        match self.loss_kind {
            LossKind::Lk => loss_lk(self.dataset, reward, self.k),
            LossKind::SlkAuto => {
                if self.dataset.chains.is_empty() {
                    return Err(RankGameError::EmptyInput("slk objective needs at least one chain".into()));
                }
                let total = csum(
                    self.dataset
                        .chains
                        .iter()
                        .map(|c| loss_slk(c, reward))
                        .collect::<Result<Vec<_>>>()?,
                );
                Ok(total / self.dataset.chains.len() as f64)
            }
            LossKind::Supremum => {
                if self.dataset.pairs.is_empty() {
                    return Err(RankGameError::EmptyInput("supremum objective needs at least one pair".into()));
                }
                let mut acc = CompensatedSum::new();
                for pair in &self.dataset.pairs {
                    acc.add(reward.expected_value(&pair.greater.rho)?);
                    acc.add(-reward.expected_value(&pair.lesser.rho)?);
                }
                // Descending on the negated gap is ascent on the gap.
                Ok(-acc.value() / self.dataset.pairs.len() as f64)
            }
            LossKind::Offline => {
                let chain = self
                    .dataset
                    .chains
                    .first()
                    .ok_or_else(|| RankGameError::MissingData("offline objective needs an offline chain".into()))?;
                let mut loss = loss_offline_combined(self.dataset, chain, reward, self.k, self.lambda)?;
                if let Some(snips) = self.snippets {
                    let scale = (1.0 - self.lambda) / (snips.length * snips.length) as f64;
                    loss += scale * snips.loss(reward);
                }
                Ok(loss)
            }
        }
    }

    pub fn grad(&self, reward: &RewardFn) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; reward.n_params()];
        match self.loss_kind {
            LossKind::Lk => {
                let w = 1.0 / self.dataset.pairs.len().max(1) as f64;
                for pair in &self.dataset.pairs {
                    reward.add_sq_err_grad(&pair.lesser.rho, 0.0, w, &mut grad)?;
                    reward.add_sq_err_grad(&pair.greater.rho, self.k, w, &mut grad)?;
                }
            }
            LossKind::SlkAuto => {
                let w_chain = 1.0 / self.dataset.chains.len().max(1) as f64;
                for chain in &self.dataset.chains {
                    let w = w_chain / chain.len() as f64;
                    for (member, &target) in chain.members.iter().zip(&chain.targets) {
                        reward.add_sq_err_grad(&member.rho, target, w, &mut grad)?;
                    }
                }
            }
            LossKind::Supremum => {
                let w = 1.0 / self.dataset.pairs.len().max(1) as f64;
                for pair in &self.dataset.pairs {
                    reward.add_linear_grad(&pair.greater.rho, -w, &mut grad)?;
                    reward.add_linear_grad(&pair.lesser.rho, w, &mut grad)?;
                }
            }
            LossKind::Offline => {
                if self.lambda > 0.0 {
                    let w = self.lambda / self.dataset.pairs.len().max(1) as f64;
                    for pair in &self.dataset.pairs {
                        reward.add_sq_err_grad(&pair.lesser.rho, 0.0, w, &mut grad)?;
                        reward.add_sq_err_grad(&pair.greater.rho, self.k, w, &mut grad)?;
                    }
                }
                if self.lambda < 1.0 {
                    let chain = self
                        .dataset
                        .chains
                        .first()
                        .ok_or_else(|| RankGameError::MissingData("offline objective needs an offline chain".into()))?;
                    let w = (1.0 - self.lambda) / chain.len() as f64;
                    for (member, &target) in chain.members.iter().zip(&chain.targets) {
                        reward.add_sq_err_grad(&member.rho, target, w, &mut grad)?;
                    }
                    if let Some(snips) = self.snippets {
                        // Window sums couple l cells each; 1/l^2 keeps the
                        // term's curvature at the per-point scale.
                        let scale = (1.0 - self.lambda) / (snips.length * snips.length) as f64;
                        snips.add_grad(reward, scale, &mut grad);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Configuration for gradient-descent reward fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub clamp: (f64, f64),
    pub max_steps: usize,
    pub grad_tol: f64,
    /// Performance-gap target for the regression losses.
    pub k: f64,
    /// Online weight of the offline-combined loss.
    pub lambda: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-3,
            l2_weight: 1e-4,
            clamp: (-10.0, 10.0),
            max_steps: 1000,
            grad_tol: 1e-6,
            k: 1.0,
            lambda: 0.3,
        }
    }
}

/// Outcome of a reward fit; non-convergence is reported, not fatal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
}

/// Fit a reward by (projected) gradient descent on the selected ranking loss.
///
/// Values are clamped each step via projection (tabular) or output clipping
/// (feature rewards); the L2 penalty acts on raw parameters. Deterministic
/// given the config. Stops at `grad_tol` on the projected gradient norm or at
/// `max_steps`, whichever comes first.
pub fn fit_reward_gd(
    dataset: &RankingDataset,
    init: &RewardFn,
    loss_kind: LossKind,
    config: &FitConfig,
) -> Result<(RewardFn, FitReport)> {
    let objective =
        RewardObjective { dataset, loss_kind, k: config.k, lambda: config.lambda, snippets: None };
    fit_reward_objective(&objective, init, config)
}

pub(crate) fn fit_reward_objective(
    objective: &RewardObjective<'_>,
    init: &RewardFn,
    config: &FitConfig,
) -> Result<(RewardFn, FitReport)> {
    if !(config.learning_rate > 0.0) {
        return Err(RankGameError::InvalidArgument("learning rate must be positive".into()));
    }
    let mut reward = init.clone();
    reward.clamp_range = config.clamp;
    reward.project_into_clamp();

    let mut steps = 0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..config.max_steps {
        let mut grad = objective.grad(&reward)?;
        for (g, p) in grad.iter_mut().zip(reward.params.iter()) {
            *g += config.l2_weight * p;
        }
        grad_norm = projected_grad_norm(&reward, &grad, config.learning_rate);
        if grad_norm <= config.grad_tol {
            return Ok((reward, FitReport { steps, converged: true, final_grad_norm: grad_norm }));
        }
        reward.step_params(&grad, config.learning_rate);
        steps += 1;
    }
    if config.max_steps > 0 {
        let mut grad = objective.grad(&reward)?;
        for (g, p) in grad.iter_mut().zip(reward.params.iter()) {
            *g += config.l2_weight * p;
        }
        grad_norm = projected_grad_norm(&reward, &grad, config.learning_rate);
    }
    let converged = grad_norm <= config.grad_tol;
    Ok((reward, FitReport { steps, converged, final_grad_norm: grad_norm }))
}

/// Norm of the clamp-projected descent step divided by the learning rate;
/// equals the plain gradient norm in the interior of the clamp box.
fn projected_grad_norm(reward: &RewardFn, grad: &[f64], lr: f64) -> f64 {
    let (lo, hi) = reward.clamp_range;
    let tabular = reward.features.is_none();
    let mut acc = 0.0;
    for (p, g) in reward.params.iter().zip(grad) {
        let stepped = if tabular { (p - lr * g).clamp(lo, hi) } else { p - lr * g };
        let eff = (p - stepped) / lr;
        acc += eff * eff;
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};

    /// A state-action visitation over 2 real states x 1 action (plus the
    /// absorbing row) with the given masses, marginals equal to the aggregate
    /// so interpolation fixtures are exactly self-consistent.
    fn two_point_visitation(mass0: f64, mass1: f64) -> Visitation {
        let mut t = Array2::zeros((3, 1));
        t[[0, 0]] = mass0;
        t[[1, 0]] = mass1;
        let table = VisitTable::StateAction(t);
        Visitation::new(table.clone(), Some(vec![table.clone(), table])).unwrap()
    }

    fn pair(lesser: Visitation, greater: Visitation) -> RankingDataset {
        RankingDataset::from_pairs(vec![RankingPair::new(lesser, greater, PairSource::OnlineAgentVsExpert).unwrap()])
    }

    #[test]
    fn loss_lk_constant_reward_is_half_k_squared() {
        let k = 3.0;
        let data = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let reward = RewardFn::tabular_constant(2, 1, RewardKind::StateAction, k / 2.0);
        assert_abs_diff_eq!(loss_lk(&data, &reward, k).unwrap(), k * k / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_lk_disjoint_supports_exact_fit_is_zero() {
        let k = 2.0;
        let data = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let reward = RewardFn::tabular_from_fn(2, 1, |s, _| if s == 0 { 0.0 } else { k });
        assert_abs_diff_eq!(loss_lk(&data, &reward, k).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_lk_two_point_arithmetic() {
        // rho_lesser = (1,0), rho_greater = (0,1), R = (0.3, 0.8), k = 1:
        // 0.3^2 + (0.8-1)^2 = 0.09 + 0.04 = 0.13.
        let data = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let reward = RewardFn::tabular_from_fn(2, 1, |s, _| if s == 0 { 0.3 } else { 0.8 });
        assert_abs_diff_eq!(loss_lk(&data, &reward, 1.0).unwrap(), 0.13, epsilon = 1e-12);
    }

    #[test]
    fn loss_lk_rejects_empty_dataset() {
        let reward = RewardFn::tabular_zero(2, 1, RewardKind::StateAction);
        let empty = RankingDataset::default();
        assert!(matches!(loss_lk(&empty, &reward, 1.0), Err(RankGameError::EmptyInput(_))));
    }

    #[test]
    fn closed_form_symmetric_and_disjoint_cases() {
        let k = 4.0;
        let common = two_point_visitation(0.5, 0.5);
        let r = closed_form_reward(&common, &common, k).unwrap();
        assert_abs_diff_eq!(r.value_state_action(0, 0), k / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.value_state_action(1, 0), k / 2.0, epsilon = 1e-12);

        let agent = two_point_visitation(1.0, 0.0);
        let expert = two_point_visitation(0.0, 1.0);
        let r = closed_form_reward(&agent, &expert, k).unwrap();
        assert_abs_diff_eq!(r.value_state_action(1, 0), k, epsilon = 1e-12);
        assert_abs_diff_eq!(r.value_state_action(0, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_direct_substitution() {
        // rho_E = 0.75, rho_pi = 0.25, k = 10 -> R = 10 * 0.75 / 1.0 = 7.5.
        let agent = two_point_visitation(0.25, 0.75);
        let expert = two_point_visitation(0.75, 0.25);
        let r = closed_form_reward(&agent, &expert, 10.0).unwrap();
        assert_abs_diff_eq!(r.value_state_action(0, 0), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_values_bounded_and_locally_optimal() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut random_vis = || {
            let mut t = Array2::zeros((4, 2));
            let mut total = 0.0;
            for v in t.iter_mut() {
                *v = rng.gen::<f64>();
                total += *v;
            }
            t.mapv_inplace(|v| v / total);
            let mut full = Array2::zeros((5, 2));
            full.slice_mut(ndarray::s![..4, ..]).assign(&t);
            Visitation::new(VisitTable::StateAction(full), None).unwrap()
        };
        let k = 6.0;
        let agent = random_vis();
        let expert = random_vis();
        let closed = closed_form_reward(&agent, &expert, k).unwrap();
        for v in closed.all_values() {
            assert!((0.0..=k).contains(&v));
        }
        let data = pair(agent, expert);
        let base = loss_lk(&data, &closed, k).unwrap();
        for _ in 0..100 {
            let mut perturbed = closed.clone();
            for p in perturbed.params.iter_mut() {
                *p += rng.gen_range(-0.1..0.1);
            }
            let loss = loss_lk(&data, &perturbed, k).unwrap();
            assert!(base <= loss + 1e-10, "closed form beaten: {base} > {loss}");
        }
    }

    #[test]
    fn fit_reward_gd_matches_closed_form_on_single_pair() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut random_vis = |zero_row: usize| {
            let mut t = Array2::zeros((5, 3));
            let mut total = 0.0;
            for (idx, v) in t.indexed_iter_mut() {
                if idx.0 == 4 || idx.0 == zero_row {
                    continue;
                }
                *v = rng.gen::<f64>() + 0.02;
                total += *v;
            }
            t.mapv_inplace(|v| v / total);
            Visitation::new(VisitTable::StateAction(t), None).unwrap()
        };
        for trial in 0..5 {
            let agent = random_vis(trial % 3);
            let expert = random_vis((trial + 1) % 3);
            let k = 5.0;
            let data = pair(agent.clone(), expert.clone());
            let init = RewardFn::tabular_zero(4, 3, RewardKind::StateAction);
            let config = FitConfig {
                learning_rate: 0.4,
                l2_weight: 0.0,
                clamp: WIDE_CLAMP,
                max_steps: 60_000,
                grad_tol: 1e-9,
                k,
                lambda: 0.3,
            };
            let (fitted, report) = fit_reward_gd(&data, &init, LossKind::Lk, &config).unwrap();
            let closed = closed_form_reward(&agent, &expert, k).unwrap();
            let mut sup = 0.0f64;
            for i in 0..fitted.n_points() {
                let mass = agent.rho.flat()[i] + expert.rho.flat()[i];
                if mass > 0.0 {
                    sup = sup.max((fitted.point_value(i) - closed.point_value(i)).abs());
                }
            }
            assert!(sup < 1e-4, "trial {trial}: sup deviation {sup}, report {report:?}");
        }
    }

    #[test]
    fn fit_reward_gd_zero_steps_returns_init() {
        let data = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let init = RewardFn::tabular_constant(2, 1, RewardKind::StateAction, 0.7);
        let config = FitConfig { max_steps: 0, ..FitConfig::default() };
        let (fitted, report) = fit_reward_gd(&data, &init, LossKind::Lk, &config).unwrap();
        assert_eq!(fitted.params(), init.params());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn fit_reward_gd_l2_shrinks_strictly_inside() {
        let k = 2.0;
        let data = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let init = RewardFn::tabular_constant(2, 1, RewardKind::StateAction, k / 2.0);
        let config = FitConfig {
            learning_rate: 0.2,
            l2_weight: 0.01,
            clamp: (-10.0, 10.0),
            max_steps: 5000,
            grad_tol: 0.0,
            k,
            lambda: 0.3,
        };
        let (fitted, _) = fit_reward_gd(&data, &init, LossKind::Lk, &config).unwrap();
        let lesser_value = fitted.value_state_action(0, 0);
        let greater_value = fitted.value_state_action(1, 0);
        assert!(lesser_value > 0.0 && lesser_value < k);
        assert!(greater_value > 0.0 && greater_value < k, "greater {greater_value}");
        // The regularized fixed point on the greater support is k*m/(m + l2).
        assert!(greater_value < k - 1e-4);
    }

    #[test]
    fn supremum_grad_zero_when_visitations_match() {
        let v = two_point_visitation(0.4, 0.6);
        let reward = RewardFn::tabular_zero(2, 1, RewardKind::StateAction);
        let grad = loss_supremum_grad(&v, &v, &reward).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn supremum_grad_is_signed_difference() {
        let agent = two_point_visitation(0.0, 1.0);
        let expert = two_point_visitation(1.0, 0.0);
        let reward = RewardFn::tabular_zero(2, 1, RewardKind::StateAction);
        let grad = loss_supremum_grad(&agent, &expert, &reward).unwrap();
        assert_abs_diff_eq!(grad[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1 * 1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn supremum_ascent_saturates_at_clamp() {
        let agent = two_point_visitation(0.2, 0.8);
        let expert = two_point_visitation(0.7, 0.3);
        let data = pair(agent, expert);
        let init = RewardFn::tabular_zero(2, 1, RewardKind::StateAction);
        let config = FitConfig {
            learning_rate: 1.0,
            l2_weight: 0.0,
            clamp: (-10.0, 10.0),
            max_steps: 100_000,
            grad_tol: 1e-9,
            k: 1.0,
            lambda: 0.3,
        };
        let (fitted, report) = fit_reward_gd(&data, &init, LossKind::Supremum, &config).unwrap();
        assert!(report.converged, "{report:?}");
        // rho_E > rho_pi at point 0, rho_E < rho_pi at point 1.
        assert_abs_diff_eq!(fitted.value_state_action(0, 0), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fitted.value_state_action(1, 0), -10.0, epsilon = 1e-9);
    }

    #[test]
    fn interpolant_alphas_span_uniformly() {
        let agent = two_point_visitation(1.0, 0.0);
        let expert = two_point_visitation(0.0, 1.0);
        let interp = make_interpolants(&agent, &expert, 5, 0.9).unwrap();
        assert_eq!(interp.len(), 5);
        for (i, vis) in interp.iter().enumerate() {
            let alpha = (i + 1) as f64 / 6.0;
            // Mass at point 1 equals alpha under these disjoint fixtures.
            assert_abs_diff_eq!(vis.rho.mass_at(1), alpha, epsilon = 1e-12);
            assert_abs_diff_eq!(vis.rho.mass_at(0), 1.0 - alpha, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolants_of_identical_visitations_are_identical() {
        let common = two_point_visitation(0.3, 0.7);
        let interp = make_interpolants(&common, &common, 3, 0.8).unwrap();
        for vis in interp {
            assert_eq!(vis.time_marginals, common.time_marginals);
            for (a, b) in vis.rho.flat().iter().zip(common.rho.flat()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn interpolant_marginals_stay_normalized() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut random_vis = || {
            let mut marginals = Vec::new();
            for _ in 0..4 {
                let mut t = Array2::zeros((4, 2));
                let mut total = 0.0;
                for (idx, v) in t.indexed_iter_mut() {
                    if idx.0 == 3 {
                        continue;
                    }
                    *v = rng.gen::<f64>();
                    total += *v;
                }
                t.mapv_inplace(|v| v / total);
                marginals.push(VisitTable::StateAction(t));
            }
            let rho = aggregate_marginals(&marginals, 0.9).unwrap();
            Visitation::new(rho, Some(marginals)).unwrap()
        };
        let a = random_vis();
        let e = random_vis();
        for vis in make_interpolants(&a, &e, 4, 0.9).unwrap() {
            for m in vis.time_marginals.as_ref().unwrap() {
                assert!((m.sum() - 1.0).abs() < 1e-10);
            }
            assert!((vis.rho.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn make_interpolants_requires_time_marginals() {
        let mut t = Array2::zeros((3, 1));
        t[[0, 0]] = 1.0;
        let bare = Visitation::new(VisitTable::StateAction(t), None).unwrap();
        let with = two_point_visitation(1.0, 0.0);
        assert!(matches!(make_interpolants(&bare, &with, 2, 0.9), Err(RankGameError::MissingData(_))));
    }

    #[test]
    fn shape_targets_linear_and_boundaries() {
        let linear = ShapingFamily::linear(10.0);
        assert_abs_diff_eq!(shape_targets(&linear, &[0.5]).unwrap()[0], 5.0, epsilon = 1e-15);
        for beta in [-2.0, -1.0, 1.0, 2.0] {
            let fam = ShapingFamily::exponential(beta, 10.0);
            let t = shape_targets(&fam, &[0.0, 1.0]).unwrap();
            assert_abs_diff_eq!(t[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(t[1], 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_targets_exponential_derived_value() {
        // exp-[-1] at alpha = 0.5, k_max = 10: independent direct evaluation
        // of 10 * (e^{-0.5} - 1) / (e^{-1} - 1).
        let direct = 10.0 * ((-0.5f64).exp() - 1.0) / ((-1.0f64).exp() - 1.0);
        let fam = ShapingFamily::exponential(-1.0, 10.0);
        let got = shape_targets(&fam, &[0.5]).unwrap()[0];
        assert_abs_diff_eq!(got, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 6.224593, epsilon = 1e-6);
    }

    #[test]
    fn shape_targets_monotone_and_linear_limit() {
        let alphas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for beta in [-2.0, -1.0, -1e-8, 1e-8, 1.0, 2.0] {
            let fam = ShapingFamily::exponential(beta, 10.0);
            let t = shape_targets(&fam, &alphas).unwrap();
            for w in t.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "not monotone at beta {beta}");
            }
        }
        let linear = ShapingFamily::linear(10.0);
        for beta in [-1e-8, 1e-8] {
            let fam = ShapingFamily::exponential(beta, 10.0);
            for &a in &alphas {
                assert!((fam.target(a) - linear.target(a)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loss_slk_trivial_and_quadratic_cases() {
        let v = two_point_visitation(1.0, 0.0);
        let chain = RankingChain::new(vec![v.clone()], vec![0.0]).unwrap();
        let zero = RewardFn::tabular_zero(2, 1, RewardKind::StateAction);
        assert_abs_diff_eq!(loss_slk(&chain, &zero).unwrap(), 0.0, epsilon = 1e-15);

        // Constant reward c on targets {0, k/2, k} gives
        // (c^2 + (c-k/2)^2 + (c-k)^2) / 3, minimized at c = k/2.
        let k = 4.0;
        let chain = RankingChain::new(vec![v.clone(), v.clone(), v], vec![0.0, k / 2.0, k]).unwrap();
        let eval = |c: f64| {
            let r = RewardFn::tabular_constant(2, 1, RewardKind::StateAction, c);
            loss_slk(&chain, &r).unwrap()
        };
        let c = 1.3;
        assert_abs_diff_eq!(eval(c), (c * c + (c - k / 2.0).powi(2) + (c - k).powi(2)) / 3.0, epsilon = 1e-12);
        assert!(eval(k / 2.0) <= eval(c));
        assert!(eval(k / 2.0) <= eval(k / 2.0 + 0.05));
        assert!(eval(k / 2.0) <= eval(k / 2.0 - 0.05));
    }

    #[test]
    fn loss_slk_single_member_consistent_with_lk_term() {
        let v = two_point_visitation(0.25, 0.75);
        let reward = RewardFn::tabular_from_fn(2, 1, |s, _| s as f64 * 0.9);
        let t = 1.7;
        let chain = RankingChain::new(vec![v.clone()], vec![t]).unwrap();
        assert_abs_diff_eq!(
            loss_slk(&chain, &reward).unwrap(),
            reward.expected_sq_err(&v.rho, t).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn slk_fit_recovers_targets_on_disjoint_chain() {
        // Three disjoint members: the pointwise minimizer regresses each
        // member's support exactly to its target.
        let mut members = Vec::new();
        for i in 0..3 {
            let mut t = Array2::zeros((4, 1));
            t[[i, 0]] = 1.0;
            members.push(Visitation::new(VisitTable::StateAction(t), None).unwrap());
        }
        let targets = vec![0.0, 2.0, 5.0];
        let chain = RankingChain::new(members.clone(), targets.clone()).unwrap();
        let dataset = RankingDataset { pairs: Vec::new(), chains: vec![chain] };
        let init = RewardFn::tabular_zero(3, 1, RewardKind::StateAction);
        let config = FitConfig {
            learning_rate: 0.9,
            l2_weight: 0.0,
            clamp: WIDE_CLAMP,
            max_steps: 20_000,
            grad_tol: 1e-10,
            k: 5.0,
            lambda: 0.3,
        };
        let (fitted, _) = fit_reward_objective(
            &RewardObjective { dataset: &dataset, loss_kind: LossKind::SlkAuto, k: 5.0, lambda: 0.3, snippets: None },
            &init,
            &config,
        )
        .unwrap();
        for (i, &target) in targets.iter().enumerate() {
            let mean = fitted.expected_value(&dataset.chains[0].members[i].rho).unwrap();
            assert!((mean - target).abs() < 1e-3, "member {i}: {mean} vs {target}");
        }
    }

    #[test]
    fn offline_combined_endpoints_and_affine_value() {
        let online = pair(two_point_visitation(1.0, 0.0), two_point_visitation(0.0, 1.0));
        let chain =
            RankingChain::new(vec![two_point_visitation(0.5, 0.5), two_point_visitation(0.0, 1.0)], vec![1.0, 2.0])
                .unwrap();
        let reward = RewardFn::tabular_from_fn(2, 1, |s, _| s as f64);
        let k = 2.0;
        let lk = loss_lk(&online, &reward, k).unwrap();
        let slk = loss_slk(&chain, &reward).unwrap();
        assert_abs_diff_eq!(loss_offline_combined(&online, &chain, &reward, k, 1.0).unwrap(), lk, epsilon = 1e-15);
        assert_abs_diff_eq!(loss_offline_combined(&online, &chain, &reward, k, 0.0).unwrap(), slk, epsilon = 1e-15);
        let mixed = loss_offline_combined(&online, &chain, &reward, k, 0.3).unwrap();
        assert_abs_diff_eq!(mixed, 0.3 * lk + 0.7 * slk, epsilon = 1e-12);
    }

    #[test]
    fn offline_combined_affine_example() {
        // lambda = 0.3, L_k = 2.0, SL_k = 1.0 -> 1.3 by direct arithmetic.
        assert_abs_diff_eq!(0.3 * 2.0 + 0.7 * 1.0, 1.3, epsilon = 1e-15);
    }

    #[test]
    fn snippet_terms_window_counts_and_collapse() {
        let traj = Trajectory::new(vec![(0, 0), (1, 0), (2, 0), (3, 0), (0, 0)], false).unwrap();
        let terms = augment_snippets(&[traj.clone()], &[1.5], 3).unwrap();
        assert_eq!(terms.n_windows(), 3);

        // l = 1 reduces to per-step regression of R to k_i.
        let terms = augment_snippets(&[traj.clone()], &[1.5], 1).unwrap();
        assert_eq!(terms.n_windows(), 5);
        let reward = RewardFn::tabular_constant(4, 1, RewardKind::StateAction, 1.5);
        assert_abs_diff_eq!(terms.loss(&reward), 0.0, epsilon = 1e-15);

        // Too-long snippets contribute nothing.
        let terms = augment_snippets(&[traj], &[1.5], 9).unwrap();
        assert_eq!(terms.n_windows(), 0);
    }

    #[test]
    fn snippet_full_horizon_exact_sum_is_zero_loss() {
        // Reward whose per-step values sum to k*H over the whole trajectory.
        let traj = Trajectory::new(vec![(0, 0), (1, 0), (2, 0)], false).unwrap();
        let k_i = 2.0;
        let reward = RewardFn::tabular_from_fn(3, 1, |s, _| match s {
            0 => 1.0,
            1 => 2.0,
            _ => 3.0,
        });
        let terms = augment_snippets(&[traj], &[k_i], 3).unwrap();
        assert_eq!(terms.n_windows(), 1);
        assert_abs_diff_eq!(terms.loss(&reward), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn state_only_reward_ignores_action_shuffles() {
        let mut t1 = Array2::zeros((3, 2));
        t1[[0, 0]] = 0.3;
        t1[[0, 1]] = 0.1;
        t1[[1, 0]] = 0.6;
        let mut t2 = Array2::zeros((3, 2));
        t2[[0, 0]] = 0.1;
        t2[[0, 1]] = 0.3;
        t2[[1, 1]] = 0.6;
        let v1 = Visitation::new(VisitTable::StateAction(t1), None).unwrap();
        let v2 = Visitation::new(VisitTable::StateAction(t2), None).unwrap();
        let reward = RewardFn::tabular(RewardKind::StateOnly, 2, 2, vec![0.4, 1.9, 0.0], WIDE_CLAMP).unwrap();
        assert_abs_diff_eq!(
            reward.expected_sq_err(&v1.rho, 1.0).unwrap(),
            reward.expected_sq_err(&v2.rho, 1.0).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn auto_chain_preserves_endpoint_ranking() {
        let agent = two_point_visitation(1.0, 0.0);
        let expert = two_point_visitation(0.0, 1.0);
        let fam = ShapingFamily::default_auto(10.0);
        let chain = make_auto_chain(&agent, &expert, 5, 0.9, &fam).unwrap();
        assert_eq!(chain.len(), 7);
        assert_eq!(chain.members[0], agent);
        assert_eq!(chain.members[6], expert);
        assert_abs_diff_eq!(chain.targets[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(chain.targets[6], 10.0, epsilon = 1e-12);
        for w in chain.targets.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn loss_reduction_is_order_insensitive() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut random_vis = || {
            let mut t = Array2::zeros((6, 2));
            let mut total = 0.0;
            for (idx, v) in t.indexed_iter_mut() {
                if idx.0 == 5 {
                    continue;
                }
                *v = rng.gen::<f64>();
                total += *v;
            }
            t.mapv_inplace(|v| v / total);
            Visitation::new(VisitTable::StateAction(t), None).unwrap()
        };
        let pairs: Vec<RankingPair> = (0..40)
            .map(|_| RankingPair::new(random_vis(), random_vis(), PairSource::OnlineAgentVsExpert).unwrap())
            .collect();
        let reward = RewardFn::tabular_from_fn(5, 2, |s, a| (s as f64 - a as f64) * 0.7);
        let forward = RankingDataset::from_pairs(pairs.clone());
        let mut reversed_pairs = pairs;
        reversed_pairs.reverse();
        let reversed = RankingDataset::from_pairs(reversed_pairs);
        let a = loss_lk(&forward, &reward, 3.0).unwrap();
        let b = loss_lk(&reversed, &reward, 3.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dataset_json_roundtrip() {
        let agent = two_point_visitation(1.0, 0.0);
        let expert = two_point_visitation(0.0, 1.0);
        let chain = make_auto_chain(&agent, &expert, 2, 0.9, &ShapingFamily::linear(5.0)).unwrap();
        let dataset = RankingDataset {
            pairs: vec![RankingPair::new(agent, expert, PairSource::OnlineAgentVsExpert).unwrap()],
            chains: vec![chain],
        };
        let text = dataset.to_json().unwrap();
        let back = RankingDataset::from_json(&text).unwrap();
        assert_eq!(dataset, back);
    }

    #[test]
    fn linear_feature_reward_fits_in_span() {
        // Two weights, features tying the two real points to separate basis
        // directions: the fit recovers the disjoint-support targets exactly.
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let init = RewardFn::linear(RewardKind::StateOnly, 2, 0, features, vec![0.0, 0.0], WIDE_CLAMP).unwrap();
        let lesser = Visitation::new(VisitTable::State(Array1::from_vec(vec![1.0, 0.0, 0.0])), None).unwrap();
        let greater = Visitation::new(VisitTable::State(Array1::from_vec(vec![0.0, 1.0, 0.0])), None).unwrap();
        let data = pair(lesser, greater);
        let config = FitConfig {
            learning_rate: 0.4,
            l2_weight: 0.0,
            clamp: WIDE_CLAMP,
            max_steps: 20_000,
            grad_tol: 1e-12,
            k: 3.0,
            lambda: 0.3,
        };
        let (fitted, _) = fit_reward_gd(&data, &init, LossKind::Lk, &config).unwrap();
        assert!((fitted.point_value(0) - 0.0).abs() < 1e-6);
        assert!((fitted.point_value(1) - 3.0).abs() < 1e-6);
    }
}
