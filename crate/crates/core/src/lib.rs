//! Tabular laboratory for ranking-game imitation learning.
//!
//! The crate models imitation learning as a two-player game between a reward
//! learner and a policy learner on exactly solvable finite MDPs:
//!
//! - [`mdp`] — finite MDPs, exact policy evaluation/optimization, and exact or
//!   empirical occupancy measures (the substrate both players act on);
//! - [`ranking`] — ranking datasets and every reward-learning loss: the
//!   supremum loss, the `L_k` regression loss and its closed-form minimizer,
//!   the shaped `SL_k` loss over interpolant chains, offline-preference
//!   combination, and snippet augmentation;
//! - [`stackelberg`] — the PAL (policy-as-leader) and RAL (reward-as-leader)
//!   game loops with their two-timescale schedules, plus an analytic
//!   leader-gradient oracle for tiny instances;
//! - [`diagnostics`] — the f-divergence, the measured `eps_r` / `eps_pi`
//!   premises, and the equilibrium-bound certificate tying them together;
//! - [`envs`] — built-in benchmark MDPs, expert synthesis, nonstationary
//!   scenario mutators, and offline preference generation.
//!
//! All operations are pure functions of their inputs; randomness enters only
//! through explicitly passed seeds, so every run is reproducible.

pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod ranking;
pub mod stackelberg;
pub(crate) mod util;

pub use diagnostics::{f_divergence, measure_eps_pi, measure_eps_r, theorem1_certificate, Certificate, EpsRMeasure, GameReport};
pub use envs::{apply_mutation, build_env, make_offline_preferences, BuiltEnv, EnvKind, ExpertSource, MutationKind, MutationSpec, OfflinePreferences, ScenarioSpec};
pub use error::{RankGameError, Result};
pub use mdp::{empirical_visitation, exact_visitation, hard_value_iteration, pad_absorbing, policy_return, sample_trajectories, soft_value_iteration, Policy, TabularMdp, Trajectory, VisitTable, Visitation};
pub use ranking::{augment_snippets, closed_form_reward, fit_reward_gd, loss_lk, loss_offline_combined, loss_slk, loss_supremum_grad, make_auto_chain, make_interpolants, shape_targets, FitConfig, FitReport, LossKind, PairSource, RankingChain, RankingDataset, RankingPair, RewardFn, RewardKind, ShapingFamily, ShapingKind, SnippetTerms};
pub use stackelberg::{leader_gradient_pal_analytic, pal_composite_objective, run_pal, run_ral, two_timescale_schedule, Game, GameConfig, GameState, Leader, LeaderGradient, OfflineData, RewardInit};
