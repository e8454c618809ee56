//! Acceptance criteria 1-11. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting. The sweeps run the reference configurations
//! through the same code path as `icq run`.

use std::io::Write;

use icq_core::ais::{estimate_ais_gap, identity_maps, GapOptions, ObservationMap};
use icq_core::envs::cpu::{CpuEnv, CpuSpec};
use icq_core::envs::graph::GraphFamily;
use icq_core::envs::routing::{RoutingEnv, RoutingSpec};
use icq_core::envs::synthetic::{SyntheticEnv, SyntheticSpec};
use icq_core::envs::table::{TableEnv, TableSpec};
use icq_core::epochs::uniform_successor;
use icq_core::learner::{EpisodeRngs, EpsilonSchedule, HandoffMessage, IcqLearner, LearnerConfig, Mode, StepSchedule};
use icq_core::oracle::{ais_value_gap_check, lipschitz_constant, AisSmdp, Smdp};
use icq_core::rng::{substream, Stream};
use icq_core::Environment;
use icq_lab::config::{preset, ExperimentId};
use icq_lab::summary::Summary;
use icq_lab::{pool, run_to_dir};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written to the stdout handle rather than `println!` so the line survives
// libtest's output capture for passing tests.
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {}: {} ({})\n", n, if pass { "PASS" } else { "FAIL" }, detail);
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {} failed: {}", n, detail);
}

fn sweep(id: ExperimentId) -> Summary {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset(id, dir.path());
    let out = run_to_dir(&cfg, pool::worker_count().unwrap()).unwrap();
    assert!(icq_lab::csv_path(dir.path(), id).exists());
    out.summary
}

fn checks(s: &Summary) -> String {
    let mut parts: Vec<String> = s.checks.iter().map(|c| format!("{} = {:.4} ({})", c.name, c.value, c.threshold)).collect();
    parts.push(format!("diverged = {}", s.diverged));
    parts.join(", ")
}

#[test]
fn criterion_01_oracle_equivalence() {
    let s = sweep(ExperimentId::OracleCheck);
    assert_eq!(s.runs, 20);
    report(1, s.passed(), &checks(&s));
}

/// Random SMDP with at most 4 states, 3 actions and durations up to 3.
fn small_smdp(rng: &mut ChaCha8Rng) -> Smdp {
    let n = rng.gen_range(1..=4);
    let a = rng.gen_range(1..=3);
    let tau_max = rng.gen_range(1..=3);
    let mut s = Smdp::new(n, a, rng.gen_range(0.3..0.97), tau_max);
    for st in 0..n {
        let adm: Vec<usize> = if rng.gen_bool(0.1) { vec![] } else { (0..a).filter(|_| rng.gen_bool(0.75)).collect() };
        let adm = if adm.is_empty() && rng.gen_bool(0.8) { vec![rng.gen_range(0..a)] } else { adm };
        for &act in &adm {
            let k = s.idx(st, act);
            s.reward[k] = rng.gen_range(-2.0..2.0);
            let support = rng.gen_range(1..=4);
            let w: Vec<f64> = (0..support).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            s.kernel[k] = w
                .into_iter()
                .map(|p| icq_core::oracle::Outcome {
                    next: if rng.gen_bool(0.25) { None } else { Some(rng.gen_range(0..n)) },
                    tau: rng.gen_range(1..=tau_max),
                    prob: p / total,
                })
                .collect();
        }
        s.admissible[st] = adm;
    }
    s
}

/// Optimal values by enumerating deterministic policies and evaluating
/// each with a dense linear solve.
fn enumerate_policies(s: &Smdp) -> Vec<f64> {
    let n = s.n_states;
    let choices: Vec<Vec<Option<usize>>> = s
        .admissible
        .iter()
        .map(|adm| if adm.is_empty() { vec![None] } else { adm.iter().map(|&a| Some(a)).collect() })
        .collect();
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut pick = vec![0usize; n];
    loop {
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut r = DVector::<f64>::zeros(n);
        for st in 0..n {
            if let Some(a) = choices[st][pick[st]] {
                let k = s.idx(st, a);
                r[st] = s.reward[k];
                for o in &s.kernel[k] {
                    if let Some(j) = o.next {
                        m[(st, j)] -= o.prob * s.gamma.powi(o.tau as i32);
                    }
                }
            }
        }
        let v = m.lu().solve(&r).expect("discounted policy system is nonsingular");
        for st in 0..n {
            best[st] = best[st].max(v[st]);
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            pick[k] += 1;
            if pick[k] < choices[k].len() {
                break;
            }
            pick[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn criterion_02_brute_force_smdp_oracle() {
    let mut worst = 0.0f64;
    let instances = 2000;
    for seed in 0..instances {
        let s = small_smdp(&mut ChaCha8Rng::seed_from_u64(seed));
        s.validate().unwrap();
        let sol = s.value_iteration(1e-13).unwrap();
        let brute = enumerate_policies(&s);
        for (a, b) in sol.v.iter().zip(&brute) {
            worst = worst.max((a - b).abs());
        }
    }
    report(2, worst <= 1e-8, &format!("{} instances, max |V_vi - V_enum| = {:.2e}", instances, worst));
}

fn zero_gap(name: &str, env: &dyn Environment, card_interface: usize, n_epochs: usize) -> (bool, String) {
    let n = env.config().n_agents;
    let maps: Vec<ObservationMap> = identity_maps(n, card_interface);
    let opts = GapOptions { n_epochs, min_visits: 2, lipschitz: None };
    let g = estimate_ais_gap(env, &maps, &uniform_successor, &opts, &mut substream(0, Stream::Estimation, 0)).unwrap();
    let ok = g.eps_phi_hat <= 3.0 * g.eps_se && g.delta_phi_hat <= 3.0 * g.delta_noise && g.cells_used > 0;
    (ok, format!("{}: eps {:.1e} (se {:.1e}), delta {:.1e} (noise {:.1e}), {} cells", name, g.eps_phi_hat, g.eps_se, g.delta_phi_hat, g.delta_noise, g.cells_used))
}

#[test]
fn criterion_03_zero_gap_ais() {
    let synth = SyntheticEnv::new(&SyntheticSpec::default()).unwrap();
    let routing = RoutingEnv::new(&RoutingSpec { n_agents: 8, family: GraphFamily::WattsStrogatz { k: 4, beta: 0.2 }, ..Default::default() }).unwrap();
    let cpu = CpuEnv::new(&CpuSpec { value_range: 6, ..Default::default() }).unwrap();
    let results = [
        zero_gap("synthetic", &synth, synth.config().card_interface, 50_000),
        zero_gap("routing", &routing, routing.config().card_interface, 50_000),
        zero_gap("cpu", &cpu, cpu.config().card_interface, 50_000),
    ];
    let pass = results.iter().all(|r| r.0);
    let detail: Vec<&str> = results.iter().map(|r| r.1.as_str()).collect();
    report(3, pass, &detail.join("; "));
}

#[test]
fn criterion_04_t1_correlation() {
    let s = sweep(ExperimentId::T1AisGap);
    report(4, s.passed(), &format!("{}, sup-based pearson = {:.4}", checks(&s), s.stats.get("pearson_gap_alpha_sup").copied().unwrap_or(f64::NAN)));
}

#[test]
fn criterion_05_t2_budget_axis() {
    let s = sweep(ExperimentId::T2SampleBudget);
    report(5, s.passed(), &checks(&s));
}

#[test]
fn criterion_06_t2_retention_axis() {
    let s = sweep(ExperimentId::T2Retention);
    report(6, s.passed(), &checks(&s));
}

#[test]
fn criterion_07_t2_mixing_axis() {
    let s = sweep(ExperimentId::T2Mixing);
    report(7, s.passed(), &checks(&s));
}

#[test]
fn criterion_08_routing() {
    let s = sweep(ExperimentId::Routing);
    assert_eq!(s.points.len(), 4);
    report(8, s.passed(), &checks(&s));
}

#[test]
fn criterion_09_cpu_adaptable() {
    let s = sweep(ExperimentId::Cpu);
    report(9, s.passed(), &checks(&s));
}

#[test]
fn criterion_10_ais_value_gap_corollary() {
    let mut failures = 0;
    let mut tight = 0.0f64;
    for seed in 0..100u64 {
        let spec = TableSpec { n_agents: 2, card_interface: 6, stop_prob: 1.0, agent_prob: 1.0, seed, ..Default::default() };
        let env = TableEnv::random(&spec).unwrap();
        let lat = env.exact_latent();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa15);
        let maps: Vec<ObservationMap> = (0..2)
            .map(|i| {
                let k = rng.gen_range(1..=6);
                let table: Vec<usize> = (0..6).map(|m| if m < k { m } else { rng.gen_range(0..k) }).collect();
                ObservationMap::from_table(i, 6, 1, table).unwrap()
            })
            .collect();
        let ais = AisSmdp::from_latent(&lat, &maps, &|_, _| 1.0).unwrap();
        let l_v = lipschitz_constant(&ais, &ais.solve().unwrap());
        let c = ais_value_gap_check(&lat, &ais, &maps, l_v).unwrap();
        if !c.holds {
            failures += 1;
        }
        if c.rhs > 0.0 {
            tight = tight.max(c.lhs / c.rhs);
        }
    }
    report(10, failures == 0, &format!("100 instances, {} violations, max lhs/rhs = {:.3}", failures, tight));
}

#[test]
fn criterion_11_protocol_audit() {
    let table = TableEnv::random(&TableSpec { n_agents: 3, card_interface: 6, ..Default::default() }).unwrap();
    let synth = SyntheticEnv::new(&SyntheticSpec { horizon: 30, ..Default::default() }).unwrap();
    let routing = RoutingEnv::new(&RoutingSpec { n_agents: 12, family: GraphFamily::ErdosRenyi { p: None }, ..Default::default() }).unwrap();
    let cpu = CpuEnv::new(&CpuSpec::default()).unwrap();
    let runs: [(&dyn Environment, bool, u64); 4] = [(&table, false, 200), (&synth, false, 50), (&routing, false, 200), (&cpu, true, 300)];
    let (mut handoffs, mut scalars, mut reads, mut ok) = (0u64, 0u64, 0u64, true);
    for (env, adaptable, episodes) in runs {
        let maps = env.observation_maps();
        let cfg = LearnerConfig {
            adaptable,
            epsilon: EpsilonSchedule::constant(0.3),
            step: StepSchedule::Constant { eta: 0.3 },
            ..Default::default()
        };
        let mut l = IcqLearner::new(env, &maps, cfg).unwrap();
        let mut r_env = ChaCha8Rng::seed_from_u64(1);
        let mut r_exp = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..episodes {
            let before = l.audit;
            let res = l.run_episode(env, &maps, Mode::Train, EpisodeRngs { env: &mut r_env, explore: &mut r_exp }, true).unwrap();
            let h = l.audit.handoffs - before.handoffs;
            let s = l.audit.scalars - before.scalars;
            ok &= s == HandoffMessage::SCALARS * h && l.audit.messages - before.messages == h;
            ok &= res.transitions.iter().filter(|t| t.handoff).count() as u64 == h;
            reads += res.access.latent_reads + res.access.foreign_private_reads;
        }
        handoffs += l.audit.handoffs;
        scalars += l.audit.scalars;
    }
    ok &= reads == 0 && handoffs > 0;
    report(11, ok, &format!("{} handoffs, {} scalars, {} latent or foreign reads", handoffs, scalars, reads));
}
