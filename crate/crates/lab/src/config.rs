//! Declarative experiment configuration (TOML) and its content hash.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icq_core::envs::cpu::CpuSpec;
use icq_core::envs::graph::GraphFamily;
use icq_core::envs::routing::RoutingSpec;
use icq_core::envs::synthetic::SyntheticSpec;
use icq_core::envs::table::TableSpec;
use icq_core::learner::LearnerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    T1AisGap,
    T2SampleBudget,
    T2Mixing,
    T2Retention,
    Routing,
    Cpu,
    OracleCheck,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::T1AisGap,
        ExperimentId::T2SampleBudget,
        ExperimentId::T2Mixing,
        ExperimentId::T2Retention,
        ExperimentId::Routing,
        ExperimentId::Cpu,
        ExperimentId::OracleCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::T1AisGap => "t1-ais-gap",
            ExperimentId::T2SampleBudget => "t2-sample-budget",
            ExperimentId::T2Mixing => "t2-mixing",
            ExperimentId::T2Retention => "t2-retention",
            ExperimentId::Routing => "routing",
            ExperimentId::Cpu => "cpu",
            ExperimentId::OracleCheck => "oracle-check",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|e| e.name() == s) {
            Some(e) => Ok(*e),
            None => bail!("unknown experiment id {:?}", s),
        }
    }

    /// Axis swept by the experiment.
    pub fn axis(self) -> &'static str {
        match self {
            ExperimentId::T1AisGap | ExperimentId::T2Retention => "rho",
            ExperimentId::T2SampleBudget => "budget",
            ExperimentId::T2Mixing => "p-handoff",
            ExperimentId::Routing => "family",
            ExperimentId::Cpu => "train-fraction",
            ExperimentId::OracleCheck => "instance",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Synthetic(SyntheticSpec),
    Routing(RoutingSpec),
    Cpu(CpuSpec),
    Table(TableSpec),
}

impl EnvSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvSpec::Synthetic(_) => "synthetic",
            EnvSpec::Routing(_) => "routing",
            EnvSpec::Cpu(_) => "cpu",
            EnvSpec::Table(_) => "table",
        }
    }
}

/// A grid point: numeric for most axes, a name for graph families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Num(f64),
    Name(String),
}

impl AxisValue {
    pub fn num(&self) -> Result<f64> {
        match self {
            AxisValue::Num(x) => Ok(*x),
            AxisValue::Name(s) => bail!("axis value {:?} is not numeric", s),
        }
    }

    pub fn family(&self) -> Result<GraphFamily> {
        let name = match self {
            AxisValue::Name(s) => s.as_str(),
            AxisValue::Num(x) => bail!("axis value {} is not a graph family", x),
        };
        match GraphFamily::defaults().into_iter().find(|f| f.name() == name) {
            Some(f) => Ok(f),
            None => bail!("unknown graph family {:?}", name),
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Num(x) => write!(f, "{}", x),
            AxisValue::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: String,
    pub grid: Vec<AxisValue>,
}

/// Protocol knobs shared by the runners; each experiment reads the ones it
/// needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    /// Training budget `T`: mean routing updates per tabular
    /// (agent, observation, successor) cell.
    pub budget_per_cell: f64,
    /// T1 only: spend the budget of the full-retention instance at every
    /// `rho`, so all runs take the same number of updates.
    pub fixed_total_budget: bool,
    /// Training episodes for routing and CPU.
    pub train_episodes: u64,
    /// Epochs sampled by the AIS gap estimator.
    pub gap_epochs: usize,
    pub gap_min_visits: u64,
    /// Epochs of the long run behind the mixing estimate.
    pub chain_epochs: usize,
    pub mixing_eps: f64,
    /// Oracle check: total routing updates per instance and tolerance.
    pub oracle_updates: u64,
    pub oracle_tolerance: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            budget_per_cell: 3300.0,
            fixed_total_budget: true,
            train_episodes: 1_000_000,
            gap_epochs: 200_000,
            gap_min_visits: 20,
            chain_epochs: 100_000,
            mixing_eps: 0.25,
            oracle_updates: 4_000_000,
            oracle_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_eval")]
    pub eval_episodes: usize,
    pub env: EnvSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    pub sweep: Sweep,
    #[serde(default)]
    pub protocol: Protocol,
}

fn default_eval() -> usize {
    2000
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.grid.is_empty() {
            bail!("sweep grid is empty");
        }
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.sweep.axis != self.experiment.axis() {
            bail!("experiment {} sweeps {:?}, config names {:?}", self.experiment, self.experiment.axis(), self.sweep.axis);
        }
        let want = match self.experiment {
            ExperimentId::Routing => "routing",
            ExperimentId::Cpu => "cpu",
            ExperimentId::OracleCheck => "table",
            _ => "synthetic",
        };
        if self.env.kind() != want {
            bail!("experiment {} needs a {} environment, got {}", self.experiment, want, self.env.kind());
        }
        for v in &self.sweep.grid {
            match self.experiment {
                ExperimentId::Routing => {
                    v.family()?;
                }
                _ => {
                    v.num()?;
                }
            }
        }
        if self.eval_episodes == 0 {
            bail!("eval_episodes must be positive");
        }
        if !(self.protocol.budget_per_cell > 0.0) {
            bail!("budget_per_cell must be positive");
        }
        self.learner.validate().map_err(|e| anyhow::anyhow!("learner config: {}", e))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config and the crate
    /// version, hex-encoded and truncated to 16 characters.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update([0u8]);
        h.update(canonical.as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }
}

/// Reference configurations for every experiment, as used by the acceptance
/// suite and written by `icq init`.
pub fn preset(id: ExperimentId, output_dir: &Path) -> ExperimentConfig {
    use icq_core::learner::{EpsilonSchedule, StepSchedule, Truncation};
    let rho_grid: Vec<AxisValue> =
        [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05].into_iter().map(AxisValue::Num).collect();
    let oracle_learner = LearnerConfig {
        epsilon: EpsilonSchedule::constant(1.0),
        step: StepSchedule::VisitCount { scale: 2.0, power: 1.0 },
        truncation: Truncation::Censor,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..5).collect();
    let protocol = Protocol::default();
    let (env, learner, grid, seeds, protocol) = match id {
        ExperimentId::T1AisGap => (
            EnvSpec::Synthetic(SyntheticSpec::default()),
            oracle_learner,
            rho_grid,
            seeds,
            Protocol { budget_per_cell: 1000.0, ..protocol },
        ),
        ExperimentId::T2Retention => (
            EnvSpec::Synthetic(SyntheticSpec::default()),
            oracle_learner,
            rho_grid,
            seeds,
            Protocol { budget_per_cell: 1000.0, fixed_total_budget: false, ..protocol },
        ),
        ExperimentId::T2SampleBudget => (
            EnvSpec::Synthetic(SyntheticSpec::default()),
            oracle_learner,
            budget_grid(50.0, 3300.0, 12).into_iter().map(AxisValue::Num).collect(),
            seeds,
            protocol,
        ),
        ExperimentId::T2Mixing => (
            EnvSpec::Synthetic(SyntheticSpec::default()),
            oracle_learner,
            (0..10).map(|k| AxisValue::Num(((10 + 5 * k) as f64) / 100.0)).collect(),
            seeds,
            Protocol { budget_per_cell: 300.0, fixed_total_budget: false, ..protocol },
        ),
        ExperimentId::Routing => (
            EnvSpec::Routing(RoutingSpec::default()),
            LearnerConfig {
                epsilon: EpsilonSchedule::constant(0.2),
                step: StepSchedule::Constant { eta: 0.5 },
                init_center: 1.0,
                ..Default::default()
            },
            GraphFamily::defaults().iter().map(|f| AxisValue::Name(f.name().to_string())).collect(),
            vec![0],
            Protocol { train_episodes: 1_000_000, ..protocol },
        ),
        ExperimentId::Cpu => (
            EnvSpec::Cpu(CpuSpec::default()),
            LearnerConfig {
                adaptable: true,
                epsilon: EpsilonSchedule::for_budget(1.0, 0.05, 1_500_000),
                step: StepSchedule::Constant { eta: 0.05 },
                init_center: 1.0,
                ..Default::default()
            },
            vec![AxisValue::Num(0.2)],
            seeds,
            Protocol { train_episodes: 1_500_000, ..protocol },
        ),
        ExperimentId::OracleCheck => (
            EnvSpec::Table(TableSpec { n_agents: 2, card_interface: 4, horizon: 200, ..Default::default() }),
            oracle_learner,
            (0..20).map(|k| AxisValue::Num(k as f64)).collect(),
            vec![0],
            protocol,
        ),
    };
    ExperimentConfig {
        experiment: id,
        seeds,
        output_dir: output_dir.to_path_buf(),
        eval_episodes: 2000,
        env,
        learner,
        sweep: Sweep { axis: id.axis().to_string(), grid },
        protocol,
    }
}

/// `n` log-spaced points from `lo` to `hi`, rounded to integers.
pub fn budget_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            (lo * (hi / lo).powf(t)).round()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for id in ExperimentId::ALL {
            let cfg = preset(id, Path::new("out"));
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{}", id);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn hash_changes_with_content() {
        let a = preset(ExperimentId::T1AisGap, Path::new("out"));
        let mut b = a.clone();
        b.seeds.push(99);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn budget_grid_is_log_spaced() {
        let g = budget_grid(50.0, 3300.0, 12);
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 50.0);
        assert_eq!(g[11], 3300.0);
        for w in g.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = preset(ExperimentId::T1AisGap, Path::new("out"));
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = preset(ExperimentId::T1AisGap, Path::new("out"));
        cfg.sweep.grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = preset(ExperimentId::Routing, Path::new("out"));
        cfg.sweep.grid = vec![AxisValue::Name("torus".into())];
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"t9\"").is_err());
    }
}
