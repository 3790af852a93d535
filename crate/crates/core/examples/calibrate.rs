//! Scratch calibration runs for the benchmark scenarios (not shipped).

use rankgame_core::*;

fn steps_to_threshold(history: &[GameReport], threshold: f64) -> Option<u64> {
    history.iter().find(|r| r.true_return_ratio >= threshold).map(|r| r.env_steps)
}

fn grid_spec(slip: f64) -> ScenarioSpec {
    ScenarioSpec {
        env_kind: EnvKind::Gridworld { width: 5, height: 5, goal: (4, 4), slip },
        gamma: 0.9,
        horizon: 30,
        r_max: 10.0,
        n_expert_trajectories: 1,
        seed: 0,
        ..ScenarioSpec::default()
    }
}

fn chain_spec(n: usize) -> ScenarioSpec {
    ScenarioSpec {
        env_kind: EnvKind::Chain { n },
        gamma: 0.85,
        horizon: 40,
        r_max: 10.0,
        n_expert_trajectories: 1,
        lfo: true,
        seed: 0,
        ..ScenarioSpec::default()
    }
}

fn base_game(leader: Leader, loss: LossKind, seed: u64, rounds: usize) -> GameConfig {
    GameConfig {
        leader,
        loss_kind: loss,
        k: 10.0,
        n_pol: None,
        n_rew: match leader {
            Leader::Policy => Some(300),
            Leader::Reward => None,
        },
        batch: 8,
        p: 5,
        lambda: 0.3,
        temperature: 0.5,
        rounds,
        seed,
        use_empirical: true,
        n_traj_per_round: 1,
        reward_init: RewardInit::Noise { sigma: 0.05 },
        fit: FitConfig {
            learning_rate: 0.25,
            l2_weight: 1e-4,
            clamp: (-10.0, 10.0),
            grad_tol: 1e-6,
            ..FitConfig::default()
        },
        ..GameConfig::default()
    }
}

fn run_with(
    spec: &ScenarioSpec,
    config: &GameConfig,
    offline: Option<OfflineData>,
) -> (Vec<GameReport>, f64) {
    let built = build_env(spec).unwrap();
    let mut game = Game::new(built.mdp.clone(), built.expert.clone(), config.clone(), offline).unwrap();
    game.set_true_return_reference(built.expert_true_return);
    let mut history = Vec::new();
    for _ in 0..config.rounds {
        history.push(game.step().unwrap());
    }
    let final_ratio = history.last().unwrap().true_return_ratio;
    (history, final_ratio)
}

fn summarize(name: &str, spec: &ScenarioSpec, leader: Leader, loss: LossKind, rounds: usize) -> Vec<Option<u64>> {
    print!("{name:>14}:");
    let mut all = Vec::new();
    for seed in 0..5u64 {
        let config = base_game(leader, loss, seed, rounds);
        let (history, final_ratio) = run_with(spec, &config, None);
        let steps = steps_to_threshold(&history, 0.9);
        all.push(steps);
        print!(
            " s{seed}:{}(f{:.2})",
            steps.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            final_ratio
        );
    }
    println!();
    all
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "grid".into());
    match which.as_str() {
        "grid" => {
            for slip in [0.1, 0.2] {
                println!("=== 5x5 grid slip={slip}, 1 expert traj, exact agent, n_pol=10 ===");
                let spec = grid_spec(slip);
                summarize("RANK-PAL", &spec, Leader::Policy, LossKind::SlkAuto, 200);
                summarize("IMIT-PAL", &spec, Leader::Policy, LossKind::Supremum, 200);
                summarize("RANK-RAL", &spec, Leader::Reward, LossKind::SlkAuto, 200);
                summarize("IMIT-RAL", &spec, Leader::Reward, LossKind::Supremum, 200);
            }
        }
        "chain" => {
            for n in [12usize, 15] {
                for temp in [0.5] {
                    println!("=== chain({n}) LfO temp={temp}, 1 expert traj ===");
                    let spec = chain_spec(n);
                    let rounds = 250;
                    // auto
                    print!("{:>14}:", "RANK-PAL auto");
                    for seed in 0..5u64 {
                        let mut config = base_game(Leader::Policy, LossKind::SlkAuto, seed, rounds);
                        config.temperature = temp;
                        let (h, f) = run_with(&spec, &config, None);
                        print!(
                            " s{seed}:{}(f{:.2})",
                            steps_to_threshold(&h, 0.9).map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                            f
                        );
                    }
                    println!();
                    // pref
                    let built = build_env(&spec).unwrap();
                    let reward = rankgame_core::mdp::true_reward_fn(&built.mdp).unwrap();
                    let prefs =
                        envs::make_offline_preference_data(&built.mdp, &reward, 10, 5, &spec).unwrap();
                    for (label, lambda) in [("pref l=0.3", 0.3), ("pref+snip", 0.3), ("offline-only", 0.0)] {
                        print!("{label:>14}:");
                        for seed in 0..5u64 {
                            let mut config = base_game(Leader::Policy, LossKind::Offline, seed, rounds);
                            config.temperature = temp;
                            config.lambda = lambda;
                            if lambda == 0.0 {
                                // Offline-only protocol: infer the static
                                // reward to convergence up front.
                                config.n_rew = Some(30_000);
                                config.fit.grad_tol = 1e-7;
                            }
                            let snippets = augment_snippets(
                                &prefs.level_trajectories.concat(),
                                &prefs
                                    .level_targets
                                    .iter()
                                    .zip(prefs.level_trajectories.iter())
                                    .flat_map(|(t, trajs)| std::iter::repeat(*t).take(trajs.len()))
                                    .collect::<Vec<_>>(),
                                10,
                            )
                            .unwrap();
                            let use_snips = label == "pref+snip";
                            let offline = OfflineData {
                                chain: prefs.chain.clone(),
                                snippets: if use_snips { Some(snippets) } else { None },
                            };
                            let (h, f) = run_with(&spec, &config, Some(offline));
                            print!(
                                " s{seed}:{}(f{:.2})",
                                steps_to_threshold(&h, 0.9).map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                                f
                            );
                        }
                        println!();
                    }
                }
            }
        }
        "mutate" => {
            // Intent change and dynamics change on the grid, PAL vs RAL.
            for (label, kind) in [
                ("intent", MutationKind::IntentChange { new_goal: (0, 4) }),
                ("dynamics", MutationKind::DynamicsChange { slip: Some(0.15), noise: None }),
            ] {
                println!("=== {label} change at round 75, LfO grid ===");
                for (name, leader, loss) in [
                    ("RANK-PAL", Leader::Policy, LossKind::SlkAuto),
                    ("RANK-RAL", Leader::Reward, LossKind::SlkAuto),
                ] {
                    print!("{name:>14}:");
                    for seed in 0..5u64 {
                        let mut spec = grid_spec(0.05);
                        spec.lfo = true;
                        spec.mutation = Some(MutationSpec { at_round: 75, kind: kind.clone() });
                        let rounds = 400;
                        let mut config = base_game(leader, loss, seed, rounds);
                        config.temperature = 0.35;
                        config.n_traj_per_round = 8;
                        config.fit.learning_rate = 0.1;
                        config.q_step = 1.0;
                        if leader == Leader::Policy {
                            config.n_rew = Some(100);
                        }
                        let built = build_env(&spec).unwrap();
                        let mut game =
                            Game::new(built.mdp.clone(), built.expert.clone(), config.clone(), None).unwrap();
                        game.set_reward_features(envs::grid_rowcol_features(5, 5)).unwrap();
                        game.set_true_return_reference(built.expert_true_return);
                        let mut mutated = false;
                        let mut mutation_steps = 0u64;
                        let mut final_ratio = 0.0;
                        let mut post: Vec<(u64, f64)> = Vec::new();
                        for round in 1..=rounds {
                            let steps_before = game.env_steps();
                            if let Some(out) = apply_mutation(game.mdp(), &spec, round).unwrap() {
                                let expert = match &out.new_expert {
                                    Some((vis, _)) => vis.clone(),
                                    None => game.expert().clone(),
                                };
                                game.set_environment(out.mdp, expert).unwrap();
                                game.set_true_return_reference(out.true_return_reference);
                                mutated = true;
                                mutation_steps = steps_before;
                            }
                            let report = game.step().unwrap();
                            if mutated {
                                post.push((report.env_steps, report.true_return_ratio));
                            }
                            final_ratio = report.true_return_ratio;
                        }
                        let sustained = |thr: f64| -> Option<u64> {
                            post.windows(5)
                                .find(|w| w.iter().all(|(_, r)| *r >= thr))
                                .map(|w| w[0].0 - mutation_steps)
                        };
                        print!(
                            " s{seed}:[.8:{} .85:{}](f{:.2})",
                            sustained(0.8).map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                            sustained(0.85).map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                            final_ratio
                        );
                    }
                    println!();
                }
            }
        }
        "ceiling" => {
            for slip in [0.15, 0.2, 0.25, 0.3] {
                for temp in [0.3, 0.4, 0.5] {
                    let spec = grid_spec(slip);
                    let built = build_env(&spec).unwrap();
                    let reward = rankgame_core::mdp::true_reward_fn(&built.mdp).unwrap();
                    let soft = soft_value_iteration(&built.mdp, &reward, temp, 400).unwrap();
                    let j = policy_return(&built.mdp, &soft, &reward).unwrap();
                    println!("slip {slip} temp {temp}: soft/hard ratio {:.3}", j / built.expert_true_return);
                }
            }
        }
        "debugpref" => debug_pref(),
        _ => println!("unknown scenario {which}"),
    }
}

// Debug helper appended during calibration.
#[allow(dead_code)]
fn debug_pref() {
    let spec = chain_spec(12);
    let built = build_env(&spec).unwrap();
    let reward = rankgame_core::mdp::true_reward_fn(&built.mdp).unwrap();
    let prefs = envs::make_offline_preference_data(&built.mdp, &reward, 10, 5, &spec).unwrap();
    println!("level targets: {:?}", prefs.level_targets.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("chain targets: {:?}", prefs.chain.targets.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>());
    for (i, m) in prefs.chain.members.iter().enumerate() {
        let flat = m.rho.flat();
        println!("member {i}: {:?}", flat.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
    let mut config = base_game(Leader::Policy, LossKind::Offline, 0, 40);
    config.lambda = 0.3;
    let offline = OfflineData { chain: prefs.chain.clone(), snippets: None };
    let mut game = Game::new(built.mdp.clone(), built.expert.clone(), config, Some(offline)).unwrap();
    game.set_true_return_reference(built.expert_true_return);
    for round in 1..=40 {
        let rep = game.step().unwrap();
        if round % 10 == 0 || round <= 3 {
            let r = game.reward();
            let vals: Vec<f64> = (0..13).map(|s| (r.value_state_action(s, 0) * 10.0).round() / 10.0).collect();
            let right: Vec<f64> = (0..12).map(|s| (game.policy().probs[[s, 1]] * 100.0).round() / 100.0).collect();
            println!("round {round}: ratio {:.3} reward {vals:?} P(right) {right:?}", rep.true_return_ratio);
        }
    }
}
