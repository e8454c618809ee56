//! Numerical checks of the convergence assumptions and the error bound.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ais::{alpha_from_gaps, ObservationMap};
use crate::epochs::Behavior;
use crate::error::{bail, Result};
use crate::learner::{evaluate_greedy, EvalStats, IcqLearner};
use crate::linalg::{project, sym_eigen, Matrix};
use crate::oracle::Smdp;
use crate::smdp::{Environment, JointAction, JointState, Successor};

/// Primitive-step walker over the behavior-induced chain.
///
/// Runs in the same stationary mode as the epoch sampler: the step counter
/// is rewound at every epoch start and STOP restarts from the initial
/// distribution. The chain label of a state is its AIS index
/// `offset(active) + phi_active(m, l_active)`.
pub struct StepWalker<'a> {
    env: &'a dyn Environment,
    maps: &'a [ObservationMap],
    offsets: Vec<usize>,
    state: JointState,
    chosen: Option<Successor>,
}

impl<'a> StepWalker<'a> {
    pub fn new(env: &'a dyn Environment, maps: &'a [ObservationMap], state: JointState) -> Result<Self> {
        if maps.len() != env.config().n_agents {
            bail!(Config, "expected {} observation maps, got {}", env.config().n_agents, maps.len());
        }
        Ok(Self { env, maps, offsets: ais_offsets(maps), state, chosen: None })
    }

    pub fn n_labels(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0) + self.maps.last().map_or(0, |m| m.card_obs)
    }

    pub fn label(&self) -> usize {
        let i = self.state.active;
        self.offsets[i] + self.maps[i].observe(self.state.interface, self.state.privates[i])
    }

    pub fn state(&self) -> &JointState {
        &self.state
    }

    /// True when the next step opens a decision epoch.
    pub fn at_epoch_start(&self) -> bool {
        self.chosen.is_none()
    }

    /// Advance one primitive step.
    pub fn step(&mut self, behavior: Behavior<'_>, rng: &mut dyn RngCore) -> Result<()> {
        if self.state.terminated {
            self.state = self.env.reset(rng)?;
            self.chosen = None;
        }
        let agent = self.state.active;
        let chosen = match self.chosen {
            Some(c) => c,
            None => {
                self.state.step = 0;
                let obs = self.maps[agent].observe(self.state.interface, self.state.privates[agent]);
                let adm = self.env.admissible_successors(self.state.interface);
                let c = behavior(agent, obs, &adm, rng);
                self.chosen = Some(c);
                c
            }
        };
        let local = self.env.internal_action(&self.state, rng);
        let ends = self.env.ends_option(&self.state, local);
        let successor = if ends { chosen } else { Successor::Agent(agent) };
        let out = self.env.step(&self.state, &JointAction { local, successor }, rng)?;
        self.state = out.next;
        if out.option_end {
            self.chosen = None;
            if matches!(chosen, Successor::Agent(_)) {
                self.state.terminated = false;
            }
        } else if out.terminated {
            self.chosen = None;
        }
        Ok(())
    }

    /// Step until the next epoch start.
    pub fn advance_epoch(&mut self, behavior: Behavior<'_>, rng: &mut dyn RngCore) -> Result<usize> {
        let mut steps = 0;
        loop {
            self.step(behavior, rng)?;
            steps += 1;
            if self.at_epoch_start() {
                return Ok(steps);
            }
        }
    }
}

fn ais_offsets(maps: &[ObservationMap]) -> Vec<usize> {
    let mut acc = 0;
    maps.iter()
        .map(|m| {
            let o = acc;
            acc += m.card_obs;
            o
        })
        .collect()
}

pub fn tv_from_counts(counts: &[u64], total: u64, mu: &[f64]) -> f64 {
    let t = total.max(1) as f64;
    0.5 * counts.iter().zip(mu).map(|(c, p)| libm::fabs(*c as f64 / t - p)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingOptions {
    pub eps: f64,
    pub n_starts: usize,
    pub replicates: usize,
    pub max_k: usize,
}

impl Default for MixingOptions {
    fn default() -> Self {
        Self { eps: 0.25, n_starts: 16, replicates: 400, max_k: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingEstimate {
    /// Smallest `k >= 1` at which every start is within `eps` of `mu`
    /// after removing the sampling-noise floor; `max_k` if never.
    pub t_mix: usize,
    /// Worst start's TV to `mu` at `k = 1..=max_k`.
    pub tv_curve: Vec<f64>,
    /// Expected TV between `mu` and an empirical law of `replicates` draws
    /// from `mu`, plus two standard deviations.
    pub noise_floor: f64,
    /// Some state in the support of `mu` was never reached from some start.
    pub reducible: bool,
    pub mixed: bool,
}

/// Multiple-start TV mixing estimate. `walk(start, k, rng)` must return the
/// labels at times `1..=k` of one run from `start`.
pub fn estimate_mixing(
    mu: &[f64],
    n_starts: usize,
    walk: &mut dyn FnMut(usize, usize, &mut dyn RngCore) -> Result<Vec<usize>>,
    opts: &MixingOptions,
    rng: &mut dyn RngCore,
) -> Result<MixingEstimate> {
    if opts.replicates == 0 || opts.max_k == 0 || n_starts == 0 {
        bail!(Usage, "mixing estimate needs at least one start, replicate and step");
    }
    let n = mu.len();
    let noise_floor = sampling_noise_floor(mu, opts.replicates, rng);
    let mut tv_curve = vec![0.0f64; opts.max_k];
    let mut reducible = false;
    for s in 0..n_starts {
        let mut counts = vec![vec![0u64; n]; opts.max_k];
        let mut seen = vec![false; n];
        for _ in 0..opts.replicates {
            let path = walk(s, opts.max_k, rng)?;
            for (k, &x) in path.iter().enumerate() {
                counts[k][x] += 1;
                seen[x] = true;
            }
        }
        if mu.iter().zip(&seen).any(|(p, v)| *p > 0.0 && !v) {
            reducible = true;
        }
        for k in 0..opts.max_k {
            let tv = tv_from_counts(&counts[k], opts.replicates as u64, mu);
            tv_curve[k] = tv_curve[k].max(tv);
        }
    }
    let hit = tv_curve.iter().position(|tv| (tv - noise_floor).max(0.0) <= opts.eps);
    Ok(MixingEstimate {
        t_mix: hit.map_or(opts.max_k, |k| k + 1),
        tv_curve,
        noise_floor,
        reducible,
        mixed: hit.is_some(),
    })
}

fn sampling_noise_floor(mu: &[f64], draws: usize, rng: &mut dyn RngCore) -> f64 {
    let mut cdf = Vec::with_capacity(mu.len());
    let mut acc = 0.0;
    for p in mu {
        acc += p;
        cdf.push(acc);
    }
    let trials = 32;
    let tvs: Vec<f64> = (0..trials)
        .map(|_| {
            let mut counts = vec![0u64; mu.len()];
            for _ in 0..draws {
                let u: f64 = rng.gen::<f64>() * acc;
                let k = cdf.partition_point(|c| *c <= u).min(mu.len() - 1);
                counts[k] += 1;
            }
            tv_from_counts(&counts, draws as u64, mu)
        })
        .collect();
    let m = tvs.iter().sum::<f64>() / trials as f64;
    let sd = libm::sqrt(tvs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (trials - 1) as f64);
    m + 2.0 * sd
}

/// Stationary and mixing statistics of the behavior-induced epoch chain
/// over AIS states `(active agent, observation)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// Epoch-level stationary law, indexed by AIS state.
    pub mu: Vec<f64>,
    /// Smallest positive entry of `mu`.
    pub mu_min: f64,
    pub support: usize,
    pub n_states: usize,
    /// Primitive-step stationary law of the active agent's AIS state.
    pub mu_steps: Vec<f64>,
    pub eps: f64,
    /// Mixing time in decision epochs.
    pub t_mix: usize,
    /// Mixing time in primitive steps.
    pub t_mix_steps: usize,
    pub mean_duration: f64,
    pub reducible: bool,
    pub mixed: bool,
    pub noise_floor: f64,
    pub method: String,
    pub n_epochs: usize,
}

/// Long-run frequencies from `n_epochs` epochs, then multiple-start TV
/// mixing estimates at epoch and primitive-step resolution. Starts are
/// joint-state snapshots spread evenly over the long run.
pub fn estimate_chain_stats(
    env: &dyn Environment,
    maps: &[ObservationMap],
    behavior: Behavior<'_>,
    n_epochs: usize,
    opts: &MixingOptions,
    rng: &mut dyn RngCore,
) -> Result<ChainStats> {
    if n_epochs == 0 {
        bail!(Usage, "n_epochs must be at least 1");
    }
    let first = env.reset(rng)?;
    let mut walker = StepWalker::new(env, maps, first)?;
    let n = walker.n_labels();
    let mut epoch_counts = vec![0u64; n];
    let mut step_counts = vec![0u64; n];
    let mut starts = Vec::new();
    let stride = (n_epochs / opts.n_starts.max(1)).max(1);
    let mut steps_total = 0u64;
    for e in 0..n_epochs {
        epoch_counts[walker.label()] += 1;
        if e % stride == stride / 2 && starts.len() < opts.n_starts {
            starts.push(walker.state().clone());
        }
        loop {
            walker.step(behavior, rng)?;
            steps_total += 1;
            step_counts[walker.label()] += 1;
            if walker.at_epoch_start() {
                break;
            }
        }
    }
    let norm = |c: &[u64]| {
        let t: u64 = c.iter().sum();
        c.iter().map(|x| *x as f64 / t.max(1) as f64).collect::<Vec<f64>>()
    };
    let mu = norm(&epoch_counts);
    let mu_steps = norm(&step_counts);
    let support = mu.iter().filter(|p| **p > 0.0).count();
    let mu_min = mu.iter().copied().filter(|p| *p > 0.0).fold(f64::INFINITY, f64::min);

    let epoch_est = estimate_mixing(
        &mu,
        starts.len(),
        &mut |s, k, r| {
            let mut w = StepWalker::new(env, maps, starts[s].clone())?;
            (0..k)
                .map(|_| {
                    w.advance_epoch(behavior, r)?;
                    Ok(w.label())
                })
                .collect()
        },
        opts,
        rng,
    )?;
    let step_est = estimate_mixing(
        &mu_steps,
        starts.len(),
        &mut |s, k, r| {
            let mut w = StepWalker::new(env, maps, starts[s].clone())?;
            (0..k)
                .map(|_| {
                    w.step(behavior, r)?;
                    Ok(w.label())
                })
                .collect()
        },
        opts,
        rng,
    )?;
    Ok(ChainStats {
        mu,
        mu_min,
        support,
        n_states: n,
        mu_steps,
        eps: opts.eps,
        t_mix: epoch_est.t_mix,
        t_mix_steps: step_est.t_mix,
        mean_duration: steps_total as f64 / n_epochs as f64,
        reducible: epoch_est.reducible || step_est.reducible,
        mixed: epoch_est.mixed && step_est.mixed,
        noise_floor: epoch_est.noise_floor.max(step_est.noise_floor),
        method: String::from("multiple-start empirical TV to the long-run law"),
        n_epochs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCovariance {
    pub sigma: Matrix,
    /// Smallest eigenvalue above `1e-12 * lambda_max`.
    pub lambda0: f64,
    pub lambda_max: f64,
    pub rank: usize,
}

/// `Sigma = sum_k mu_k g_k g_k^T`.
pub fn feature_covariance(features: &[Vec<f64>], mu: &[f64]) -> Result<FeatureCovariance> {
    if features.len() != mu.len() {
        bail!(Domain, "{} feature vectors for {} weights", features.len(), mu.len());
    }
    let d = features.first().map_or(0, |g| g.len());
    if d == 0 || features.iter().any(|g| g.len() != d) {
        bail!(Domain, "feature vectors must share a positive dimension");
    }
    let mut sigma = Matrix::zeros(d);
    for (g, w) in features.iter().zip(mu) {
        if *w != 0.0 {
            sigma.add_outer(*w, g);
        }
    }
    let eig = sym_eigen(&sigma);
    let lambda_max = eig.values.last().copied().unwrap_or(0.0).max(0.0);
    let nonzero: Vec<f64> = eig.values.iter().copied().filter(|v| *v > 1e-12 * lambda_max).collect();
    Ok(FeatureCovariance {
        lambda0: nonzero.first().copied().unwrap_or(0.0),
        lambda_max,
        rank: nonzero.len(),
        sigma,
    })
}

/// One-hot features over `(state, action)` index pairs of `smdp`.
pub fn one_hot_features(smdp: &Smdp) -> Vec<Vec<f64>> {
    let d = smdp.n_states * smdp.n_actions;
    (0..d)
        .map(|k| {
            let mut g = vec![0.0; d];
            g[k] = 1.0;
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionMargin {
    /// Largest `nu` in `[0, 1)` satisfying the matrix inequality for every
    /// probe; `None` when it fails already at `nu = 0`.
    pub nu: Option<f64>,
    pub probes: usize,
    /// The supremum over value vectors is replaced by the probe set.
    pub approximation: String,
}

/// Greedy action of `v` at every state (lowest index on ties).
fn greedy_rule(smdp: &Smdp, v: &[f64]) -> Vec<Option<usize>> {
    (0..smdp.n_states)
        .map(|s| {
            let mut best: Option<usize> = None;
            for &a in &smdp.admissible[s] {
                if best.map_or(true, |b| v[smdp.idx(s, a)] > v[smdp.idx(s, b)]) {
                    best = Some(a);
                }
            }
            best
        })
        .collect()
}

/// `E_mu[gamma^{2 tau} g(s', pi_v(s')) g(s', pi_v(s'))^T]`; terminals add nothing.
pub fn next_feature_covariance(smdp: &Smdp, features: &[Vec<f64>], mu: &[f64], v: &[f64]) -> Matrix {
    let d = features[0].len();
    let rule = greedy_rule(smdp, v);
    let mut out = Matrix::zeros(d);
    for (k, w) in mu.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for o in &smdp.kernel[k] {
            let Some(s2) = o.next else { continue };
            let Some(a2) = rule[s2] else { continue };
            let disc = libm::pow(smdp.gamma, 2.0 * o.tau as f64);
            out.add_outer(w * o.prob * disc, &features[smdp.idx(s2, a2)]);
        }
    }
    out
}

/// Does `(1 - nu)^2 Sigma - Sigma'` stay PSD on the range of `Sigma`?
fn margin_holds(sigma: &Matrix, range: &(Matrix, Vec<usize>), next: &[Matrix], nu: f64) -> bool {
    let c = (1.0 - nu) * (1.0 - nu);
    next.iter().all(|sp| {
        let diff = sigma.scaled_sub(c, sp);
        let p = project(&diff, &range.0, &range.1);
        let scale = sigma.data.iter().fold(0.0f64, |m, x| m.max(libm::fabs(*x))).max(1e-300);
        sym_eigen(&p).values.first().map_or(true, |l| *l >= -1e-12 * scale)
    })
}

/// Largest `nu` with `(1 - nu)^2 Sigma_mu - Sigma'_v >= 0` on the range of
/// `Sigma_mu` for every probe `v`, found by bisection.
///
/// `features` and `mu` are indexed by `state * n_actions + action`; each
/// probe is a Q-vector with the same indexing whose greedy rule selects the
/// next feature.
pub fn contraction_margin(
    smdp: &Smdp,
    features: &[Vec<f64>],
    mu: &[f64],
    probes: &[Vec<f64>],
) -> Result<ContractionMargin> {
    let cov = feature_covariance(features, mu)?;
    if probes.is_empty() {
        bail!(Usage, "contraction margin needs at least one probe");
    }
    let eig = sym_eigen(&cov.sigma);
    let cols: Vec<usize> =
        (0..eig.values.len()).filter(|&k| eig.values[k] > 1e-12 * cov.lambda_max).collect();
    let range = (eig.vectors, cols);
    let next: Vec<Matrix> = probes.iter().map(|v| next_feature_covariance(smdp, features, mu, v)).collect();
    let approximation = String::from("sup over value vectors replaced by greedy rules of the probe set");
    if !margin_holds(&cov.sigma, &range, &next, 0.0) {
        return Ok(ContractionMargin { nu: None, probes: probes.len(), approximation });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if margin_holds(&cov.sigma, &range, &next, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ContractionMargin { nu: Some(lo), probes: probes.len(), approximation })
}

/// Value checks used by the margin's grid oracle.
pub fn margin_holds_at(smdp: &Smdp, features: &[Vec<f64>], mu: &[f64], probes: &[Vec<f64>], nu: f64) -> Result<bool> {
    let cov = feature_covariance(features, mu)?;
    let eig = sym_eigen(&cov.sigma);
    let cols: Vec<usize> =
        (0..eig.values.len()).filter(|&k| eig.values[k] > 1e-12 * cov.lambda_max).collect();
    let next: Vec<Matrix> = probes.iter().map(|v| next_feature_covariance(smdp, features, mu, v)).collect();
    Ok(margin_holds(&cov.sigma, &(eig.vectors, cols), &next, nu))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGap {
    pub gap: f64,
    pub reference: f64,
    pub learned: EvalStats,
}

/// `reference - mean greedy return` over `n_eval` evaluation episodes.
pub fn value_gap(
    learner: &IcqLearner,
    reference: f64,
    env: &dyn Environment,
    maps: &[ObservationMap],
    n_eval: usize,
    seed: u64,
) -> Result<ValueGap> {
    let learned = evaluate_greedy(learner, env, maps, n_eval, seed)?;
    Ok(ValueGap { gap: reference - learned.mean, reference, learned })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        bail!(Domain, "length mismatch: {} vs {}", xs.len(), ys.len());
    }
    if xs.len() < 2 {
        bail!(Domain, "correlation needs at least two points");
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        bail!(NonFinite, "correlation input contains a non-finite value");
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        bail!(UndefinedCorrelation, "zero variance");
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Average ranks, 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Term {
    Value(f64),
    /// Not evaluated; lists the missing inputs.
    Symbolic(Vec<String>),
}

impl Term {
    pub fn value(&self) -> Option<f64> {
        match self {
            Term::Value(v) => Some(*v),
            Term::Symbolic(_) => None,
        }
    }

    fn from_inputs<const K: usize>(inputs: [(&str, Option<f64>); K], f: impl FnOnce([f64; K]) -> f64) -> Term {
        let missing: Vec<String> = inputs.iter().filter(|(_, v)| v.is_none()).map(|(n, _)| String::from(*n)).collect();
        if !missing.is_empty() {
            return Term::Symbolic(missing);
        }
        Term::Value(f(inputs.map(|(_, v)| v.unwrap_or(0.0))))
    }
}

/// Inputs of the three-term bound; `None` marks an input as unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eps_phi: Option<f64>,
    pub delta_phi: Option<f64>,
    pub gamma_bar: Option<f64>,
    pub lipschitz_q: Option<f64>,
    pub eps_app: Option<f64>,
    pub eps_0: Option<f64>,
    pub lambda0: Option<f64>,
    pub lambda_max: Option<f64>,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub t_mix: Option<f64>,
    pub t: Option<f64>,
    pub nu_hat: Option<f64>,
    pub r_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lambda0: Option<f64>,
    pub lambda_max: Option<f64>,
    pub nu_hat: Option<f64>,
    pub gamma_bar_hat: Option<f64>,
    pub r_max: Option<f64>,
    pub alpha_q: Term,
    /// Interface representation gap, `2 alpha_Q^2`.
    pub representation: Term,
    /// Neural approximation, `6 eps_app + 6 eps_0 + 6 lambda_max C1 eps_0`.
    pub approximation: Term,
    /// Mixing-time residual, `6 lambda_max C0 (1 + t_mix)(1 + ln(T + 1)) / T`.
    pub mixing: Term,
    pub total: Term,
}

pub fn evaluate_bound_terms(b: &BoundInputs) -> Result<TheoryReport> {
    if let (Some(l0), Some(lm)) = (b.lambda0, b.lambda_max) {
        if l0 > lm {
            bail!(Domain, "lambda0 {} exceeds lambda_max {}", l0, lm);
        }
    }
    if b.t.is_some_and(|t| t <= 0.0) {
        bail!(Domain, "T must be positive");
    }
    let alpha_q = match (b.eps_phi, b.delta_phi, b.gamma_bar, b.lipschitz_q) {
        (Some(e), Some(d), Some(g), Some(l)) => Term::Value(alpha_from_gaps(e, d, g, l)?),
        // with zero evolution gap the Lipschitz constant drops out
        (Some(e), Some(d), Some(g), None) if d == 0.0 => Term::Value(alpha_from_gaps(e, 0.0, g, 0.0)?),
        _ => Term::from_inputs(
            [("eps_phi", b.eps_phi), ("delta_phi", b.delta_phi), ("gamma_bar", b.gamma_bar), ("lipschitz_q", b.lipschitz_q)],
            |_| 0.0,
        ),
    };
    let representation = match &alpha_q {
        Term::Value(a) => Term::Value(2.0 * a * a),
        Term::Symbolic(m) => Term::Symbolic(m.clone()),
    };
    let approximation = Term::from_inputs(
        [("eps_app", b.eps_app), ("eps_0", b.eps_0), ("lambda_max", b.lambda_max), ("c1", b.c1)],
        |[ea, e0, lm, c1]| 6.0 * ea + 6.0 * e0 + 6.0 * lm * c1 * e0,
    );
    let mixing = Term::from_inputs(
        [("lambda_max", b.lambda_max), ("c0", b.c0), ("t_mix", b.t_mix), ("t", b.t)],
        |[lm, c0, tm, t]| 6.0 * lm * c0 * (1.0 + tm) * (1.0 + libm::log(t + 1.0)) / t,
    );
    let total = match (representation.value(), approximation.value(), mixing.value()) {
        (Some(a), Some(b2), Some(c)) => Term::Value(a + b2 + c),
        _ => {
            let mut missing = Vec::new();
            for t in [&representation, &approximation, &mixing] {
                if let Term::Symbolic(m) = t {
                    for x in m {
                        if !missing.contains(x) {
                            missing.push(x.clone());
                        }
                    }
                }
            }
            Term::Symbolic(missing)
        }
    };
    Ok(TheoryReport {
        lambda0: b.lambda0,
        lambda_max: b.lambda_max,
        nu_hat: b.nu_hat,
        gamma_bar_hat: b.gamma_bar,
        r_max: b.r_max,
        alpha_q,
        representation,
        approximation,
        mixing,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Outcome;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    #[test]
    fn correlations_by_hand() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(crate::Error::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 5.0, 9.0], &[0.1, 0.2, 7.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_covariance_is_diagonal_mu() {
        let feats: Vec<Vec<f64>> = (0..4).map(|k| (0..4).map(|j| (j == k) as u8 as f64).collect()).collect();
        let c = feature_covariance(&feats, &[0.25; 4]).unwrap();
        assert!((c.lambda0 - 0.25).abs() < 1e-12 && (c.lambda_max - 0.25).abs() < 1e-12);
        let c = feature_covariance(&feats, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((c.lambda0 - 0.1).abs() < 1e-12);
        assert_eq!(c.rank, 4);
        let dup = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let c = feature_covariance(&dup, &[0.5, 0.5]).unwrap();
        assert_eq!(c.rank, 1);
        assert!((c.lambda0 - 2.0).abs() < 1e-12);
    }

    fn one_state(tau: usize, gamma: f64) -> Smdp {
        let mut s = Smdp::new(1, 1, gamma, tau);
        s.admissible[0] = vec![0];
        s.kernel[0] = vec![Outcome { next: Some(0), tau, prob: 1.0 }];
        s
    }

    #[test]
    fn scalar_contraction_margins() {
        let s = one_state(1, 0.9);
        let m = contraction_margin(&s, &[vec![1.0]], &[1.0], &[vec![0.0]]).unwrap();
        assert!((m.nu.unwrap() - 0.1).abs() < 1e-9);
        let s = one_state(2, 0.9);
        let m = contraction_margin(&s, &[vec![1.0]], &[1.0], &[vec![0.0]]).unwrap();
        assert!((m.nu.unwrap() - (1.0 - 0.81)).abs() < 1e-9);
    }

    #[test]
    fn two_state_chain_mixes_in_one_step() {
        let mu = [0.5, 0.5];
        let mut rng = StreamRng::seed_from_u64(3);
        let mut walk = |s: usize, k: usize, r: &mut dyn RngCore| -> Result<Vec<usize>> {
            let mut x = s;
            Ok((0..k)
                .map(|_| {
                    if r.gen::<f64>() < 0.5 {
                        x = 1 - x;
                    }
                    x
                })
                .collect())
        };
        let opts = MixingOptions { eps: 0.25, n_starts: 2, replicates: 400, max_k: 10 };
        let est = estimate_mixing(&mu, 2, &mut walk, &opts, &mut rng).unwrap();
        assert_eq!(est.t_mix, 1);
        assert!(est.mixed && !est.reducible);
    }

    #[test]
    fn deterministic_cycle_never_mixes() {
        let l = 4;
        let mu = vec![1.0 / l as f64; l];
        let mut rng = StreamRng::seed_from_u64(5);
        let mut walk = |s: usize, k: usize, _r: &mut dyn RngCore| -> Result<Vec<usize>> {
            Ok((1..=k).map(|t| (s + t) % l).collect())
        };
        let opts = MixingOptions { eps: 0.25, n_starts: l, replicates: 50, max_k: 40 };
        let est = estimate_mixing(&mu, l, &mut walk, &opts, &mut rng).unwrap();
        assert!(!est.mixed);
        assert_eq!(est.t_mix, 40);
    }

    #[test]
    fn bound_terms() {
        let r = evaluate_bound_terms(&BoundInputs {
            eps_phi: Some(0.0),
            delta_phi: Some(0.0),
            gamma_bar: Some(0.5),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.representation, Term::Value(0.0));
        assert!(matches!(r.mixing, Term::Symbolic(_)));
        assert!(matches!(r.total, Term::Symbolic(_)));
        // alpha_Q = 0.2 / (1 - 0.5) = 0.4
        let r = evaluate_bound_terms(&BoundInputs {
            eps_phi: Some(0.2),
            delta_phi: Some(0.0),
            gamma_bar: Some(0.5),
            lipschitz_q: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        assert!((r.representation.value().unwrap() - 0.32).abs() < 1e-12);
        let mix = |t: f64| {
            evaluate_bound_terms(&BoundInputs {
                lambda_max: Some(1.0),
                c0: Some(1.0),
                t_mix: Some(3.0),
                t: Some(t),
                ..Default::default()
            })
            .unwrap()
            .mixing
            .value()
            .unwrap()
        };
        for t in [10.0, 100.0, 1000.0] {
            assert!(mix(t) / mix(10.0 * t) > 5.0);
        }
    }
}
