//! On-disk formats: compact SMDP tables, learner checkpoints, transition
//! logs and graph edge lists.

use std::io::Write;

use anyhow::{bail, ensure, Context, Result};
use icq_core::envs::graph::Graph;
use icq_core::learner::{EpochTransition, IcqLearner};
use icq_core::oracle::{AisSmdp, LatentSmdp, Outcome, Smdp};
use icq_core::smdp::Successor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

const SMDP_MAGIC: &[u8; 8] = b"ICQSMDP\0";
const SMDP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmdpHeader {
    pub version: u32,
    /// `latent` or `ais`.
    pub kind: String,
    pub n_agents: usize,
    /// Latent tables only.
    pub card_interface: Option<usize>,
    /// AIS tables only: first state of each agent.
    pub offsets: Option<Vec<usize>>,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau_max: usize,
    pub body_len: usize,
    /// Hex SHA-256 of the body.
    pub checksum: String,
}

/// Decoded tables of either kind.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSmdp {
    pub header: SmdpHeader,
    pub smdp: Smdp,
}

impl StoredSmdp {
    pub fn into_latent(self) -> Result<LatentSmdp> {
        ensure!(self.header.kind == "latent", "stored tables are {}, not latent", self.header.kind);
        Ok(LatentSmdp {
            n_agents: self.header.n_agents,
            card_interface: self.header.card_interface.context("latent header without card_interface")?,
            smdp: self.smdp,
            unvisited: Vec::new(),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn encode_body(s: &Smdp) -> Vec<u8> {
    let mut b = Vec::new();
    for adm in &s.admissible {
        b.extend((adm.len() as u32).to_le_bytes());
        for &a in adm {
            b.extend((a as u32).to_le_bytes());
        }
    }
    for (r, row) in s.reward.iter().zip(&s.kernel) {
        b.extend(r.to_le_bytes());
        b.extend((row.len() as u32).to_le_bytes());
        for o in row {
            b.extend(o.next.map_or(u32::MAX, |n| n as u32).to_le_bytes());
            b.extend((o.tau as u32).to_le_bytes());
            b.extend(o.prob.to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        ensure!(self.at + K <= self.buf.len(), "truncated SMDP body at byte {}", self.at);
        let mut out = [0u8; K];
        out.copy_from_slice(&self.buf[self.at..self.at + K]);
        self.at += K;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn encode(mut header: SmdpHeader, smdp: &Smdp) -> Result<Vec<u8>> {
    let body = encode_body(smdp);
    header.body_len = body.len();
    header.checksum = hex(&Sha256::digest(&body));
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + body.len());
    out.extend(SMDP_MAGIC);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    out.extend(body);
    Ok(out)
}

fn header_for(kind: &str, n_agents: usize, smdp: &Smdp) -> SmdpHeader {
    SmdpHeader {
        version: SMDP_VERSION,
        kind: kind.to_string(),
        n_agents,
        card_interface: None,
        offsets: None,
        n_states: smdp.n_states,
        n_actions: smdp.n_actions,
        gamma: smdp.gamma,
        tau_max: smdp.tau_max,
        body_len: 0,
        checksum: String::new(),
    }
}

pub fn encode_latent(lat: &LatentSmdp) -> Result<Vec<u8>> {
    let h = SmdpHeader { card_interface: Some(lat.card_interface), ..header_for("latent", lat.n_agents, &lat.smdp) };
    encode(h, &lat.smdp)
}

/// Stores the AIS-induced tables; the conditioning weights and lifted
/// kernels are not kept.
pub fn encode_ais(ais: &AisSmdp) -> Result<Vec<u8>> {
    let h = SmdpHeader { offsets: Some(ais.offsets.clone()), ..header_for("ais", ais.n_agents, &ais.smdp) };
    encode(h, &ais.smdp)
}

pub fn decode_smdp(bytes: &[u8]) -> Result<StoredSmdp> {
    ensure!(bytes.len() >= 12 && &bytes[..8] == SMDP_MAGIC, "not an SMDP table file");
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 12 + hlen, "truncated SMDP header");
    let header: SmdpHeader = serde_json::from_slice(&bytes[12..12 + hlen]).context("parsing SMDP header")?;
    ensure!(header.version == SMDP_VERSION, "unsupported SMDP table version {}", header.version);
    let body = &bytes[12 + hlen..];
    ensure!(body.len() == header.body_len, "body is {} bytes, header says {}", body.len(), header.body_len);
    ensure!(hex(&Sha256::digest(body)) == header.checksum, "SMDP body checksum mismatch");
    let mut c = Cursor { buf: body, at: 0 };
    let mut smdp = Smdp::new(header.n_states, header.n_actions, header.gamma, header.tau_max);
    for s in 0..header.n_states {
        let k = c.u32()? as usize;
        smdp.admissible[s] = (0..k).map(|_| c.u32().map(|a| a as usize)).collect::<Result<_>>()?;
    }
    for idx in 0..header.n_states * header.n_actions {
        smdp.reward[idx] = c.f64()?;
        let k = c.u32()? as usize;
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            let next = c.u32()?;
            let tau = c.u32()? as usize;
            let prob = c.f64()?;
            row.push(Outcome { next: (next != u32::MAX).then_some(next as usize), tau, prob });
        }
        smdp.kernel[idx] = row;
    }
    ensure!(c.at == body.len(), "trailing bytes in SMDP body");
    smdp.validate().context("decoded SMDP is inconsistent")?;
    Ok(StoredSmdp { header, smdp })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub learner: IcqLearner,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, learner: &IcqLearner) -> Self {
        Self { version: CHECKPOINT_VERSION, config_hash: config.hash(), config: config.clone(), learner: learner.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).context("parsing checkpoint")?;
        let version = v.get("version").and_then(|x| x.as_u64()).context("checkpoint without version")?;
        if version != CHECKPOINT_VERSION as u64 {
            bail!("unsupported checkpoint version {}", version);
        }
        let cp: Checkpoint = serde_json::from_value(v)?;
        ensure!(cp.config_hash == cp.config.hash(), "checkpoint config hash does not match its config");
        Ok(cp)
    }
}

fn successor_label(s: Successor) -> String {
    match s {
        Successor::Agent(i) => i.to_string(),
        Successor::Stop => "stop".to_string(),
    }
}

/// One row per decision epoch.
pub fn write_transitions<W: Write>(out: W, log: &[EpochTransition]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "epoch", "predecessor", "obs", "successor", "reward", "tau", "target", "q_before", "q_after"])?;
    for t in log {
        w.write_record([
            t.episode.to_string(),
            t.epoch.to_string(),
            t.predecessor.to_string(),
            t.obs.to_string(),
            successor_label(t.successor),
            t.option_reward.to_string(),
            t.duration.to_string(),
            t.target.to_string(),
            t.q_before.to_string(),
            t.q_after.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `u v` per line, each undirected edge once.
pub fn edge_list(g: &Graph) -> String {
    g.edges().into_iter().map(|(u, v)| format!("{} {}\n", u, v)).collect()
}

/// Parse an edge list; node count is one more than the largest id unless
/// `n` is given. Blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str, n: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(u), Some(v), None) = (it.next(), it.next(), it.next()) else {
            bail!("line {}: expected \"u v\", got {:?}", k + 1, line);
        };
        edges.push((u.parse::<usize>().with_context(|| format!("line {}", k + 1))?, v.parse::<usize>().with_context(|| format!("line {}", k + 1))?));
    }
    let n = n.unwrap_or_else(|| edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0));
    Ok(Graph::from_edges(n, &edges)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use icq_core::envs::table::{TableEnv, TableSpec};

    fn latent() -> LatentSmdp {
        TableEnv::random(&TableSpec { n_agents: 3, card_interface: 5, seed: 9, ..Default::default() }).unwrap().exact_latent()
    }

    #[test]
    fn latent_tables_round_trip() {
        let lat = latent();
        let bytes = encode_latent(&lat).unwrap();
        let back = decode_smdp(&bytes).unwrap().into_latent().unwrap();
        assert_eq!(back.smdp, lat.smdp);
        assert_eq!(back.card_interface, 5);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_latent(&latent()).unwrap();
        let k = bytes.len() - 3;
        bytes[k] ^= 1;
        assert!(decode_smdp(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(decode_smdp(b"nonsense").is_err());
    }

    #[test]
    fn edge_lists_parse_back() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let text = edge_list(&g);
        assert_eq!(text.lines().count(), 4);
        let back = parse_edge_list(&format!("# ring\n{}", text), None).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert!(parse_edge_list("0 1 2\n", None).is_err());
    }
}
