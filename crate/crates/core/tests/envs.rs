use itap::envs::{
    apply_observation_mask, episode_rng, generate_offline_dataset, rollout, BehaviorPolicy, Environment, LatentRegime,
    PerturbationState, PointMassConfig, PointMassEnv, PushChainConfig, PushChainEnv,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env(f_max: f64) -> PointMassEnv {
    PointMassEnv::new(PointMassConfig::default(), LatentRegime::new(f_max).unwrap()).unwrap()
}

fn mean_return(env: &mut dyn Environment, f_max: f64, policy: BehaviorPolicy, episodes: usize) -> f64 {
    let eps = generate_offline_dataset(env, &[f_max], &[policy], episodes, 99).unwrap();
    eps.iter().map(|e| e.undiscounted_return()).sum::<f64>() / episodes as f64
}

#[test]
fn static_case_and_euler_step() {
    let mut e = env(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    e.reset(&mut rng);
    e.set_state([0.5, -0.5], [0.0, 0.0], [1.0, 1.0]);
    let out = e.step(&[0.0, 0.0], &mut rng).unwrap();
    assert_eq!(e.position(), &[0.5, -0.5]);
    let d = (0.25f64 + 2.25).sqrt();
    assert!((out.reward + d).abs() < 1e-12);

    e.set_state([0.5, -0.5], [0.0, 0.0], [0.5, -0.5]);
    let out = e.step(&[1.0, 0.0], &mut rng).unwrap();
    assert!((e.velocity()[0] - 0.1).abs() < 1e-12 && e.velocity()[1] == 0.0);
    assert!((e.position()[0] - 0.51).abs() < 1e-12);
    assert!((out.reward - (-0.01 - 0.01)).abs() < 1e-12);

    e.set_state([0.3, 0.3], [0.0, 0.0], [0.3, 0.3]);
    assert_eq!(e.step(&[0.0, 0.0], &mut rng).unwrap().reward, 0.0);
}

#[test]
fn actions_are_clamped_and_episode_ends() {
    let mut a = env(0.0);
    let mut b = env(0.0);
    let mut ra = ChaCha8Rng::seed_from_u64(1);
    let mut rb = ChaCha8Rng::seed_from_u64(1);
    a.reset(&mut ra);
    b.reset(&mut rb);
    let oa = a.step(&[5.0, -3.0], &mut ra).unwrap();
    let ob = b.step(&[1.0, -1.0], &mut rb).unwrap();
    assert_eq!(oa, ob);
    let mut steps = 1;
    loop {
        let out = a.step(&[0.0, 0.0], &mut ra).unwrap();
        steps += 1;
        if out.done {
            break;
        }
    }
    assert_eq!(steps, 60);
    assert!(a.step(&[0.0, 0.0], &mut ra).is_err());
    assert!(b.step(&[0.0], &mut rb).is_err());
}

#[test]
fn force_and_reward_bounds_hold_in_rollouts() {
    for f_max in [0.0, 2.5, 5.0, 7.5] {
        let mut e = env(f_max);
        for ep in 0..20 {
            let mut rng = episode_rng(3, 0, ep);
            e.reset(&mut rng);
            let floor = e.reward_floor();
            loop {
                let out = e.step(&[1.0, 1.0], &mut rng).unwrap();
                assert!(e.perturbation().force.abs() <= f_max);
                assert!(out.reward >= floor);
                assert!(out.observation.iter().all(|v| v.is_finite()));
                if out.done {
                    break;
                }
            }
        }
    }
}

#[test]
fn replaying_the_stream_reproduces_the_episode() {
    let mut e = env(5.0);
    let a = rollout(&mut e, &BehaviorPolicy::medium(), &mut episode_rng(4, 1, 2)).unwrap();
    let b = rollout(&mut e, &BehaviorPolicy::medium(), &mut episode_rng(4, 1, 2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn masked_goals_are_indistinguishable() {
    // Same start and force stream, different goals, open-loop actions.
    let run = |goal: [f64; 2]| {
        let mut e = env(2.5).with_goal_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        e.reset(&mut rng);
        e.set_state([0.0, 0.0], [0.0, 0.0], goal);
        e.set_perturbation(PerturbationState { force: 1.0 });
        (0..10)
            .map(|i| e.step(&[0.1 * i as f64, -0.2], &mut rng).unwrap().observation)
            .collect::<Vec<_>>()
    };
    let a = run([1.0, 1.0]);
    let b = run([-1.0, 0.5]);
    assert_eq!(a, b);
    assert!(a.iter().all(|o| o[4] == 0.0 && o[5] == 0.0));
    let unmasked = apply_observation_mask(&[1.0; 6], &Default::default());
    assert_eq!(unmasked, vec![1.0; 6]);
}

#[test]
fn tiers_are_ordered() {
    let mut e = env(0.0);
    let expert = mean_return(&mut e, 0.0, BehaviorPolicy::expert(), 100);
    let medium = mean_return(&mut e, 0.0, BehaviorPolicy::medium(), 100);
    let random = mean_return(&mut e, 0.0, BehaviorPolicy::random(), 100);
    assert!(expert > medium && medium > random, "{expert} {medium} {random}");
}

#[test]
fn stronger_regimes_cost_the_expert() {
    let mut e = env(0.0);
    let r: Vec<f64> = [0.0, 2.5, 5.0]
        .iter()
        .map(|&f| mean_return(&mut e, f, BehaviorPolicy::expert(), 100))
        .collect();
    assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    let drop = (r[0] - r[2]) / r[0].abs();
    assert!((0.2..=0.4).contains(&drop), "relative drop {drop}");
}

#[test]
fn dataset_counts_labels_and_determinism() {
    let mut e = env(0.0);
    let tiers = [BehaviorPolicy::expert(), BehaviorPolicy::medium()];
    let data = generate_offline_dataset(&mut e, &[0.0, 2.5, 5.0], &tiers, 10, 7).unwrap();
    assert_eq!(data.len(), 60);
    assert!(data[..20].iter().all(|ep| ep.regime_label == 0.0));
    assert!(data[40..].iter().all(|ep| ep.regime_label == 5.0));
    assert!(data.iter().all(|ep| ep.len() == 60));
    let again = generate_offline_dataset(&mut e, &[0.0, 2.5, 5.0], &tiers, 10, 7).unwrap();
    assert_eq!(data, again);
    assert!(generate_offline_dataset(&mut e, &[], &tiers, 10, 7).is_err());
}

#[test]
fn push_chain_runs() {
    let mut e = PushChainEnv::new(PushChainConfig::default(), LatentRegime::new(2.5).unwrap()).unwrap();
    let ep = rollout(&mut e, &BehaviorPolicy::expert(), &mut episode_rng(0, 0, 0)).unwrap();
    assert_eq!(ep.len(), 30);
    assert!(ep.observations.iter().all(|o| o.len() == 3));
    assert!(e.perturbation().force.abs() <= 2.5);
    let mut masked = e.clone().with_goal_mask();
    let obs = masked.reset(&mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(obs[2], 0.0);
}
