use icq_core::ais::identity_maps;
use icq_core::envs::table::{TableEnv, TableSpec};
use icq_core::learner::{EpisodeRngs, IcqLearner, Mode};
use icq_core::oracle::AisSmdp;
use icq_lab::config::{preset, ExperimentId};
use icq_lab::formats::{decode_smdp, encode_ais, write_transitions, Checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained() -> (TableEnv, IcqLearner) {
    let env = TableEnv::random(&TableSpec { n_agents: 3, card_interface: 5, seed: 4, ..Default::default() }).unwrap();
    let maps = identity_maps(3, 5);
    let mut l = IcqLearner::new(&env, &maps, Default::default()).unwrap();
    l.train(&env, &maps, 200, 4).unwrap();
    (env, l)
}

#[test]
fn checkpoints_restore_the_learner_exactly() {
    let (_, l) = trained();
    let cfg = preset(ExperimentId::OracleCheck, std::path::Path::new("out"));
    let text = Checkpoint::new(&cfg, &l).to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back.learner, l);
    assert_eq!(back.config, cfg);
    let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
    assert!(Checkpoint::from_json(&bumped).unwrap_err().to_string().contains("version"));
}

#[test]
fn transition_log_has_one_row_per_epoch() {
    let (env, mut l) = trained();
    let maps = identity_maps(3, 5);
    let mut a = ChaCha8Rng::seed_from_u64(0);
    let mut b = ChaCha8Rng::seed_from_u64(1);
    let res = l.run_episode(&env, &maps, Mode::Train, EpisodeRngs { env: &mut a, explore: &mut b }, true).unwrap();
    let mut buf = Vec::new();
    write_transitions(&mut buf, &res.transitions).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "episode,epoch,predecessor,obs,successor,reward,tau,target,q_before,q_after");
    assert_eq!(text.lines().count(), res.transitions.len() + 1);
    if res.stopped {
        assert!(text.lines().last().unwrap().contains(",stop,"));
    }
}

#[test]
fn ais_tables_round_trip() {
    let spec = TableSpec { n_agents: 3, card_interface: 5, seed: 4, stop_prob: 1.0, agent_prob: 1.0, ..Default::default() };
    let lat = TableEnv::random(&spec).unwrap().exact_latent();
    let maps: Vec<_> = (0..3).map(|i| icq_core::ais::ObservationMap::modulo(i, 2).unwrap()).collect();
    let ais = AisSmdp::from_latent(&lat, &maps, &|_, _| 1.0).unwrap();
    let stored = decode_smdp(&encode_ais(&ais).unwrap()).unwrap();
    assert_eq!(stored.smdp, ais.smdp);
    assert_eq!(stored.header.offsets.as_deref(), Some(&ais.offsets[..]));
    assert!(stored.into_latent().is_err());
}
