use std::path::Path;
use std::process::Command;
use std::time::Instant;

use icq_core::envs::graph::GraphFamily;
use icq_core::envs::routing::RoutingSpec;
use icq_core::envs::synthetic::SyntheticSpec;
use icq_lab::config::{preset, AxisValue, EnvSpec, ExperimentConfig, ExperimentId};
use icq_lab::record::{read_csv, write_csv, RunRecord};
use icq_lab::{csv_path, formats, summary_path};

fn icq(args: &[&str], workers: &str) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icq")).args(args).env("ICQ_WORKERS", workers).output().unwrap()
}

fn write_config(cfg: &ExperimentConfig, path: &Path) -> String {
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_synthetic() -> SyntheticSpec {
    SyntheticSpec { n_agents: 3, card_latent: 12, card_interface: 8, horizon: 25, shift_width: 2, ..Default::default() }
}

fn tiny_t1(out: &Path, grid: &[f64]) -> ExperimentConfig {
    let mut cfg = preset(ExperimentId::T1AisGap, out);
    cfg.env = EnvSpec::Synthetic(tiny_synthetic());
    cfg.seeds = vec![0, 1];
    cfg.eval_episodes = 200;
    cfg.sweep.grid = grid.iter().map(|&x| AxisValue::Num(x)).collect();
    cfg.protocol.budget_per_cell = 40.0;
    cfg.protocol.gap_epochs = 5000;
    cfg
}

fn stripped(path: &Path) -> Vec<RunRecord> {
    read_csv(path).unwrap().iter().map(RunRecord::without_timing).collect()
}

#[test]
fn full_retention_grid_has_zero_value_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_t1(&dir.path().join("out"), &[1.0]);
    let path = write_config(&cfg, &dir.path().join("t1.toml"));
    let out = icq(&["run", &path], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&csv_path(&cfg.output_dir, ExperimentId::T1AisGap)).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.gap_v, Some(0.0));
        assert!(r.floor.unwrap() < 1e-20);
    }
}

#[test]
fn reruns_and_worker_counts_give_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for (k, workers) in ["1", "3", "1"].iter().enumerate() {
        let cfg = tiny_t1(&dir.path().join(format!("out{}", k)), &[1.0, 0.5, 0.25]);
        let path = write_config(&cfg, &dir.path().join(format!("t1-{}.toml", k)));
        let out = icq(&["run", &path], workers);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        tables.push(stripped(&csv_path(&cfg.output_dir, ExperimentId::T1AisGap)));
    }
    // output_dir differs, so the hash does too; compare everything else
    let norm = |t: &Vec<RunRecord>| t.iter().map(|r| RunRecord { config_hash: String::new(), ..r.clone() }).collect::<Vec<_>>();
    assert_eq!(norm(&tables[0]), norm(&tables[1]));
    assert_eq!(norm(&tables[0]), norm(&tables[2]));
    let order: Vec<(String, u64)> = tables[0].iter().map(|r| (r.axis_value.clone(), r.seed)).collect();
    assert_eq!(order[0], ("1".to_string(), 0));
    assert_eq!(order[1], ("1".to_string(), 1));
    assert_eq!(order[5], ("0.25".to_string(), 1));
}

#[test]
fn summarize_recomputes_and_rejects_mixed_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_t1(&out_dir, &[1.0, 0.3]);
    let path = write_config(&cfg, &dir.path().join("t1.toml"));
    assert!(icq(&["run", &path], "1").status.success());
    let first = std::fs::read_to_string(summary_path(&out_dir, ExperimentId::T1AisGap)).unwrap();
    std::fs::remove_file(summary_path(&out_dir, ExperimentId::T1AisGap)).unwrap();
    let out = icq(&["summarize", out_dir.to_str().unwrap()], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(summary_path(&out_dir, ExperimentId::T1AisGap)).unwrap(), first);

    let plot = icq(&["plotdata", out_dir.to_str().unwrap(), "t1-ais-gap"], "1");
    assert!(plot.status.success());
    let text = std::fs::read_to_string(out_dir.join("plot-t1-ais-gap.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,y_se"));
    assert_eq!(text.lines().count(), 3);

    let csv = csv_path(&out_dir, ExperimentId::T1AisGap);
    let mut rows = read_csv(&csv).unwrap();
    rows[0].config_hash = "0000000000000000".into();
    write_csv(&csv, &rows).unwrap();
    let out = icq(&["summarize", out_dir.to_str().unwrap()], "1");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixed config hashes"));
}

#[test]
fn oracle_check_exit_code_follows_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset(ExperimentId::OracleCheck, &dir.path().join("out"));
    cfg.sweep.grid = vec![AxisValue::Num(0.0), AxisValue::Num(1.0)];
    cfg.protocol.oracle_updates = 400_000;
    cfg.protocol.oracle_tolerance = 0.05;
    let ok = write_config(&cfg, &dir.path().join("ok.toml"));
    let out = icq(&["oracle-check", &ok], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    cfg.protocol.oracle_tolerance = 1e-9;
    let strict = write_config(&cfg, &dir.path().join("strict.toml"));
    let out = icq(&["oracle-check", &strict], "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn small_chain_routing_smoke_run() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset(ExperimentId::Routing, &dir.path().join("out"));
    cfg.env = EnvSpec::Routing(RoutingSpec { n_agents: 10, family: GraphFamily::Chain, ..Default::default() });
    cfg.sweep.grid = vec![AxisValue::Name("chain".into())];
    cfg.protocol.train_episodes = 20_000;
    let path = write_config(&cfg, &dir.path().join("routing.toml"));
    let out = icq(&["run", &path], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&csv_path(&cfg.output_dir, ExperimentId::Routing)).unwrap();
    assert_eq!(rows[0].accuracy, Some(1.0));
    assert!(t0.elapsed().as_secs() < 60);

    let edges = dir.path().join("chain.txt");
    assert!(icq(&["export-graph", &path, edges.to_str().unwrap()], "1").status.success());
    let g = formats::parse_edge_list(&std::fs::read_to_string(&edges).unwrap(), None).unwrap();
    assert_eq!(g.n(), 10);
    assert_eq!(g.edges().len(), 9);
}

#[test]
fn init_writes_loadable_configs_and_models_export() {
    let dir = tempfile::tempdir().unwrap();
    for id in ExperimentId::ALL {
        let path = dir.path().join(format!("{}.toml", id));
        let out = icq(&["init", id.name(), path.to_str().unwrap()], "1");
        assert!(out.status.success());
        assert_eq!(ExperimentConfig::load(&path).unwrap().experiment, id);
    }
    let model = dir.path().join("table.bin");
    let cfg = dir.path().join("oracle-check.toml");
    assert!(icq(&["export-model", cfg.to_str().unwrap(), model.to_str().unwrap()], "1").status.success());
    let lat = formats::decode_smdp(&std::fs::read(&model).unwrap()).unwrap().into_latent().unwrap();
    assert_eq!(lat.n_agents, 2);
    assert!(!icq(&["init", "t9", "x.toml"], "1").status.success());
}
