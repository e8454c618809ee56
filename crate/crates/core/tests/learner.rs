use icq_core::ais::{identity_maps, option_reward_bound};
use icq_core::envs::cpu::{CpuEnv, CpuSpec};
use icq_core::envs::graph::GraphFamily;
use icq_core::envs::routing::{RoutingEnv, RoutingSpec};
use icq_core::envs::synthetic::{SyntheticEnv, SyntheticSpec};
use icq_core::envs::table::{TableEnv, TableSpec};
use icq_core::learner::{
    Backend, EpisodeRngs, EpsilonSchedule, HandoffMessage, IcqLearner, LearnerConfig, Mlp, Mode, StepSchedule, Truncation,
};
use icq_core::rng::Streams;
use icq_core::Environment;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_gradient_matches_finite_differences(
        seed in any::<u64>(),
        n_in in 1usize..6,
        hidden in 1usize..8,
        n_out in 1usize..4,
        target in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(n_in, hidden, n_out, 1e9, &mut rng);
        let obs = (seed as usize) % n_in;
        let out = (seed as usize / 7) % n_out;
        let g = mlp.gradient(obs, out, target);
        let h = 1e-6;
        for k in 0..mlp.params.len() {
            let mut plus = mlp.clone();
            plus.params[k] += h;
            let mut minus = mlp.clone();
            minus.params[k] -= h;
            let fd = (plus.loss(obs, out, target) - minus.loss(obs, out, target)) / (2.0 * h);
            // a ReLU kink inside the stencil makes the difference quotient meaningless
            let kink = (fd - g[k]).abs() > 1e-4 * (1.0 + g[k].abs());
            if kink {
                let mut p2 = mlp.clone();
                p2.params[k] += 1e-3;
                let mut m2 = mlp.clone();
                m2.params[k] -= 1e-3;
                let same = p2.gradient(obs, out, target)[k] == m2.gradient(obs, out, target)[k];
                prop_assert!(!same, "param {}: analytic {} numeric {}", k, g[k], fd);
            }
        }
    }
}

fn table_config(seed: u64, eps: f64) -> LearnerConfig {
    LearnerConfig {
        epsilon: EpsilonSchedule::constant(eps),
        step: StepSchedule::Constant { eta: 0.5 },
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tabular_values_stay_bounded(seed in 0u64..10_000, eta in 0.05f64..0.5) {
        let spec = TableSpec { n_agents: 3, card_interface: 5, seed, ..Default::default() };
        let env = TableEnv::random(&spec).unwrap();
        let maps = identity_maps(3, 5);
        let cfg = LearnerConfig { step: StepSchedule::Constant { eta }, ..table_config(seed, 0.5) };
        let mut l = IcqLearner::new(&env, &maps, cfg).unwrap();
        l.train(&env, &maps, 300, seed).unwrap();
        let gamma = env.config().discount;
        let bound = option_reward_bound(env.r_max(), gamma, spec.tau_max) / (1.0 - gamma);
        for i in 0..3 {
            for m in 0..5 {
                for slot in 0..4 {
                    prop_assert!(l.q(i, m, slot).abs() <= bound + 1e-9);
                }
            }
        }
    }
}

#[test]
fn mlp_backend_stays_finite() {
    let env = SyntheticEnv::new(&SyntheticSpec { horizon: 30, ..Default::default() }).unwrap();
    let maps = env.retention_maps().unwrap();
    let cfg = LearnerConfig {
        backend: Backend::Mlp { hidden: 16, clip: 5.0 },
        step: StepSchedule::Constant { eta: 0.01 },
        ..table_config(3, 0.2)
    };
    let mut l = IcqLearner::new(&env, &maps, cfg).unwrap();
    l.train(&env, &maps, 50, 3).unwrap();
    assert!(l.is_finite());
}

fn audited_run(env: &dyn Environment, cfg: LearnerConfig, episodes: usize) {
    let maps = env.observation_maps();
    let mut l = IcqLearner::new(env, &maps, cfg).unwrap();
    let mut env_rng = ChaCha8Rng::seed_from_u64(1);
    let mut explore = ChaCha8Rng::seed_from_u64(2);
    let mut logged_handoffs = 0;
    for _ in 0..episodes {
        let before = l.audit;
        let res = l
            .run_episode(env, &maps, Mode::Train, EpisodeRngs { env: &mut env_rng, explore: &mut explore }, true)
            .unwrap();
        assert_eq!(res.access.latent_reads, 0);
        assert_eq!(res.access.foreign_private_reads, 0);
        let handoffs = l.audit.handoffs - before.handoffs;
        assert_eq!(l.audit.messages - before.messages, handoffs);
        assert_eq!(l.audit.scalars - before.scalars, HandoffMessage::SCALARS * handoffs);
        logged_handoffs += res.transitions.iter().filter(|t| t.handoff).count() as u64;
    }
    assert!(l.audit.handoffs > 0);
    assert_eq!(logged_handoffs, l.audit.handoffs);
    assert_eq!(l.audit.scalars, 3 * l.audit.handoffs);
}

#[test]
fn protocol_audit_on_every_family() {
    let table = TableEnv::random(&TableSpec { n_agents: 3, card_interface: 6, ..Default::default() }).unwrap();
    audited_run(&table, table_config(0, 0.3), 200);
    let synth = SyntheticEnv::new(&SyntheticSpec { horizon: 30, ..Default::default() }).unwrap();
    audited_run(&synth, table_config(0, 0.3), 50);
    let routing = RoutingEnv::new(&RoutingSpec { n_agents: 12, family: GraphFamily::WattsStrogatz { k: 4, beta: 0.2 }, ..Default::default() }).unwrap();
    audited_run(&routing, table_config(0, 0.3), 200);
    let cpu = CpuEnv::new(&CpuSpec::default()).unwrap();
    audited_run(&cpu, LearnerConfig { adaptable: true, ..table_config(0, 0.3) }, 200);
}

#[test]
fn tabular_learner_recovers_latent_values() {
    let spec = TableSpec { n_agents: 2, card_interface: 3, seed: 5, ..Default::default() };
    let env = TableEnv::random(&spec).unwrap();
    let lat = env.exact_latent();
    let sol = lat.solve().unwrap();
    let maps = identity_maps(2, 3);
    let cfg = LearnerConfig {
        epsilon: EpsilonSchedule::constant(1.0),
        step: StepSchedule::VisitCount { scale: 2.0, power: 1.0 },
        truncation: Truncation::Censor,
        seed: 5,
        ..Default::default()
    };
    let mut l = IcqLearner::new(&env, &maps, cfg).unwrap();
    l.train_updates(&env, &maps, 500_000, 5).unwrap();
    for i in 0..2 {
        for m in 0..3 {
            let s = lat.state(i, m);
            for &a in &lat.smdp.admissible[s] {
                let err = (l.q(i, m, a) - sol.q[lat.smdp.idx(s, a)]).abs();
                assert!(err < 0.03, "cell ({}, {}, {}): error {}", i, m, a, err);
            }
        }
    }
}

#[test]
fn checkpointed_training_matches_one_run() {
    let spec = TableSpec { n_agents: 3, card_interface: 5, seed: 2, ..Default::default() };
    let env = TableEnv::random(&spec).unwrap();
    let maps = identity_maps(3, 5);
    let cfg = table_config(2, 0.4);
    let mut whole = IcqLearner::new(&env, &maps, cfg.clone()).unwrap();
    whole.train(&env, &maps, 300, 2).unwrap();
    let mut pieces = IcqLearner::new(&env, &maps, cfg).unwrap();
    let mut streams = Streams::new(2);
    pieces.train_on(&env, &maps, 120, &mut streams).unwrap();
    pieces.train_on(&env, &maps, 180, &mut streams).unwrap();
    for i in 0..3 {
        for m in 0..5 {
            for slot in 0..4 {
                assert_eq!(whole.q(i, m, slot), pieces.q(i, m, slot));
            }
        }
    }
    let total = pieces.audit.beta_updates + 500;
    pieces.train_until(&env, &maps, total, &mut streams).unwrap();
    assert!(pieces.audit.beta_updates >= total);
}
