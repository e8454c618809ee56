use std::collections::BTreeMap;

use icq_core::diagnostics::{contraction_margin, margin_holds_at, one_hot_features};
use icq_core::envs::cpu::{alu_apply, CpuEnv, CpuSpec};
use icq_core::envs::graph::{generate, GraphFamily};
use icq_core::envs::synthetic::{SyntheticEnv, SyntheticSpec};
use icq_core::envs::table::{TableEnv, TableSpec};
use icq_core::epochs::{uniform_successor, EpochSampler, LatentTally, NextKey};
use icq_core::oracle::{LatentSmdp, Outcome, Smdp};
use icq_core::{ais::identity_maps, Environment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_smdp(rng: &mut ChaCha8Rng) -> Smdp {
    let n = rng.gen_range(1..=4);
    let a = rng.gen_range(1..=3);
    let tau_max = rng.gen_range(1..=3);
    let mut s = Smdp::new(n, a, rng.gen_range(0.5..0.95), tau_max);
    for st in 0..n {
        let mut adm: Vec<usize> = (0..a).filter(|_| rng.gen_bool(0.7)).collect();
        if adm.is_empty() {
            adm.push(rng.gen_range(0..a));
        }
        for &act in &adm {
            let k = s.idx(st, act);
            s.reward[k] = rng.gen_range(-1.0..1.0);
            let support = rng.gen_range(1..=3);
            let mut w: Vec<f64> = (0..support).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            s.kernel[k] = w
                .into_iter()
                .map(|prob| Outcome {
                    next: if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..n)) },
                    tau: rng.gen_range(1..=tau_max),
                    prob,
                })
                .collect();
        }
        s.admissible[st] = adm;
    }
    s
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Best value per state over every deterministic policy.
fn brute_force_values(s: &Smdp) -> Vec<f64> {
    let n = s.n_states;
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut choice = vec![0usize; n];
    loop {
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for st in 0..n {
            a[st][st] = 1.0;
            let k = s.idx(st, s.admissible[st][choice[st]]);
            b[st] = s.reward[k];
            for o in &s.kernel[k] {
                if let Some(nx) = o.next {
                    a[st][nx] -= o.prob * s.gamma.powi(o.tau as i32);
                }
            }
        }
        let v = solve_linear(a, b);
        for st in 0..n {
            best[st] = best[st].max(v[st]);
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            choice[k] += 1;
            if choice[k] < s.admissible[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn value_iteration_matches_policy_enumeration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let smdp = random_smdp(&mut rng);
        smdp.validate().unwrap();
        let sol = smdp.value_iteration(1e-13).unwrap();
        let brute = brute_force_values(&smdp);
        for (a, b) in sol.v.iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-8, "vi {} vs brute {}", a, b);
        }
    }
}

fn sample_tally(env: &dyn Environment, n_epochs: usize, seed: u64) -> LatentTally {
    let cfg = env.config();
    let maps = identity_maps(cfg.n_agents, cfg.card_interface);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = EpochSampler::new(env, &maps, &mut rng).unwrap();
    let mut tally = LatentTally::new(cfg.n_agents, cfg.discount);
    for _ in 0..n_epochs {
        tally.record(&sampler.next_epoch(&uniform_successor, &mut rng).unwrap());
    }
    tally
}

/// Monte-Carlo cells agree with the exact model in option reward (within
/// 5 standard errors) and in `(next, tau)` law (within a TV noise margin).
fn check_against_exact(exact: &LatentSmdp, tally: &LatentTally, min_n: u64) -> usize {
    let n = exact.n_agents;
    let card = exact.card_interface;
    let mut checked = 0;
    for (&(i, m, slot), c) in &tally.cells {
        if c.n < min_n {
            continue;
        }
        let k = exact.smdp.idx(exact.state(i, m), slot);
        let r = exact.smdp.reward[k];
        assert!((c.mean() - r).abs() <= 5.0 * c.se() + 1e-9, "cell {:?}: mc {} exact {}", (i, m, slot), c.mean(), r);
        let mut law: BTreeMap<(Option<usize>, usize), f64> = BTreeMap::new();
        for o in &exact.smdp.kernel[k] {
            *law.entry((o.next, o.tau)).or_insert(0.0) += o.prob;
        }
        let mut emp: BTreeMap<(Option<usize>, usize), f64> = BTreeMap::new();
        for ((next, tau), cnt) in &c.outcomes {
            let key = match next {
                NextKey::Interface(m2) if slot < n => Some(slot * card + m2),
                _ => None,
            };
            *emp.entry((key, *tau)).or_insert(0.0) += *cnt as f64 / c.n as f64;
        }
        let keys: Vec<_> = law.keys().chain(emp.keys()).copied().collect();
        let mut tv = 0.0;
        let mut seen = std::collections::BTreeSet::new();
        for key in keys {
            if seen.insert(key) {
                tv += (law.get(&key).unwrap_or(&0.0) - emp.get(&key).unwrap_or(&0.0)).abs();
            }
        }
        let support = seen.len() as f64;
        assert!(0.5 * tv <= 2.0 * (support / c.n as f64).sqrt(), "cell {:?}: tv {}", (i, m, slot), 0.5 * tv);
        checked += 1;
    }
    checked
}

#[test]
fn table_closed_form_matches_monte_carlo() {
    for seed in 0..3 {
        let env = TableEnv::random(&TableSpec { seed, ..Default::default() }).unwrap();
        let exact = env.exact_latent();
        let tally = sample_tally(&env, 60_000, seed);
        let checked = check_against_exact(&exact, &tally, 500);
        assert!(checked > 5);
    }
}

#[test]
fn synthetic_exact_model_matches_monte_carlo() {
    let spec = SyntheticSpec {
        n_agents: 3,
        card_latent: 12,
        card_interface: 8,
        horizon: 20,
        shift_width: 2,
        p_handoff: 0.4,
        ..Default::default()
    };
    let env = SyntheticEnv::new(&spec).unwrap();
    let exact = env.exact_model().to_latent();
    let tally = sample_tally(&env, 150_000, 11);
    let checked = check_against_exact(&exact, &tally, 1500);
    assert!(checked > 20, "only {} cells checked", checked);
}

fn floyd_warshall(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (u, nb) in adj.iter().enumerate() {
        d[u][u] = 0;
        for &v in nb {
            d[u][v] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bfs_distances_match_floyd_warshall(seed in any::<u64>(), fam in 0usize..4, n in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = GraphFamily::defaults()[fam];
        let n = if matches!(family, GraphFamily::WattsStrogatz { .. }) { n.max(6) } else { n };
        let g = generate(family, n, &mut rng).unwrap();
        prop_assert_eq!(g.distances(), floyd_warshall(&g.adj));
    }
}

#[test]
fn cpu_reachable_outputs_match_closed_form() {
    let env = CpuEnv::new(&CpuSpec { value_range: 10, ..Default::default() }).unwrap();
    let v = env.spec.value_range;
    for a in 0..v {
        for b in 0..v {
            let mut expect = std::collections::BTreeSet::from([a, b]);
            for x in [a, b] {
                for y in [a, b] {
                    for op in 0..4 {
                        let r = alu_apply(op, x as i64, y as i64);
                        if (0..v as i64).contains(&r) {
                            expect.insert(r as usize);
                        }
                    }
                }
            }
            assert_eq!(env.reachable_outputs(a, b), expect, "operands ({}, {})", a, b);
        }
    }
}

#[test]
fn contraction_margin_agrees_with_grid_scan() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let smdp = random_smdp(&mut rng);
        let features = one_hot_features(&smdp);
        let cells = smdp.n_states * smdp.n_actions;
        let mut mu = vec![0.0; cells];
        for s in 0..smdp.n_states {
            for &a in &smdp.admissible[s] {
                mu[smdp.idx(s, a)] = rng.gen_range(0.1..1.0);
            }
        }
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|x| *x /= total);
        let probes: Vec<Vec<f64>> = (0..4).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let margin = contraction_margin(&smdp, &features, &mu, &probes).unwrap();
        let grid: Vec<f64> = (0..200).map(|k| k as f64 / 200.0).collect();
        let scan = grid.iter().copied().filter(|&nu| margin_holds_at(&smdp, &features, &mu, &probes, nu).unwrap()).fold(None, |_, nu| Some(nu));
        match (margin.nu, scan) {
            (None, None) => {}
            (Some(nu), Some(g)) => assert!(nu >= g - 1e-9 && nu < g + 1.0 / 200.0 + 1e-9, "bisection {} grid {}", nu, g),
            other => panic!("seed {}: {:?}", seed, other),
        }
    }
}
