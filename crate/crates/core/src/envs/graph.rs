//! Undirected random graphs and breadth-first search.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GraphFamily {
    /// Edge probability `p`; `None` uses `2 ln n / n`.
    ErdosRenyi { p: Option<f64> },
    /// Preferential attachment with `m` edges per new node.
    BarabasiAlbert { m: usize },
    /// Ring lattice of degree `k` with rewiring probability `beta`.
    WattsStrogatz { k: usize, beta: f64 },
    Chain,
}

impl GraphFamily {
    pub fn name(&self) -> &'static str {
        match self {
            GraphFamily::ErdosRenyi { .. } => "erdos-renyi",
            GraphFamily::BarabasiAlbert { .. } => "barabasi-albert",
            GraphFamily::WattsStrogatz { .. } => "watts-strogatz",
            GraphFamily::Chain => "chain",
        }
    }

    /// The four families with their default parameters.
    pub fn defaults() -> [GraphFamily; 4] {
        [
            GraphFamily::ErdosRenyi { p: None },
            GraphFamily::BarabasiAlbert { m: 2 },
            GraphFamily::WattsStrogatz { k: 4, beta: 0.2 },
            GraphFamily::Chain,
        ]
    }
}

/// Simple undirected graph with sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Self { adj: vec![Vec::new(); n] }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    /// Adds `u - v` unless it is a loop or already present.
    pub fn add_edge(&mut self, u: usize, v: usize) -> bool {
        if u == v || self.has_edge(u, v) {
            return false;
        }
        for (a, b) in [(u, v), (v, u)] {
            let pos = self.adj[a].binary_search(&b).unwrap_err();
            self.adj[a].insert(pos, b);
        }
        true
    }

    pub fn remove_edge(&mut self, u: usize, v: usize) {
        for (a, b) in [(u, v), (v, u)] {
            if let Ok(pos) = self.adj[a].binary_search(&b) {
                self.adj[a].remove(pos);
            }
        }
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, nb) in self.adj.iter().enumerate() {
            out.extend(nb.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(u, v) in edges {
            if u >= n || v >= n {
                bail!(Domain, "edge ({}, {}) out of range for {} nodes", u, v, n);
            }
            g.add_edge(u, v);
        }
        Ok(g)
    }

    /// Hop distances from `src`; `None` when unreachable.
    pub fn bfs(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n()];
        let mut queue = VecDeque::new();
        dist[src] = Some(0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for &v in &self.adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.n() == 0 || self.bfs(0).iter().all(|d| d.is_some())
    }

    /// All-pairs hop distances.
    pub fn distances(&self) -> Vec<Vec<usize>> {
        (0..self.n())
            .map(|s| self.bfs(s).into_iter().map(|d| d.unwrap_or(usize::MAX)).collect())
            .collect()
    }

    pub fn diameter(&self) -> usize {
        self.distances().iter().flatten().copied().filter(|d| *d != usize::MAX).max().unwrap_or(0)
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Draw a connected graph, regenerating until connected.
pub fn generate(family: GraphFamily, n: usize, rng: &mut dyn RngCore) -> Result<Graph> {
    if n < 2 {
        bail!(Config, "graphs need at least two nodes");
    }
    for _ in 0..MAX_ATTEMPTS {
        let g = draw(family, n, rng)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    bail!(Config, "no connected {} graph on {} nodes after {} attempts", family.name(), n, MAX_ATTEMPTS)
}

fn draw(family: GraphFamily, n: usize, rng: &mut dyn RngCore) -> Result<Graph> {
    let mut g = Graph::empty(n);
    match family {
        GraphFamily::Chain => {
            for u in 1..n {
                g.add_edge(u - 1, u);
            }
        }
        GraphFamily::ErdosRenyi { p } => {
            let p = p.unwrap_or(2.0 * libm::log(n as f64) / n as f64);
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "edge probability {} outside [0, 1]", p);
            }
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen::<f64>() < p {
                        g.add_edge(u, v);
                    }
                }
            }
        }
        GraphFamily::BarabasiAlbert { m } => {
            if m == 0 || m >= n {
                bail!(Config, "attachment count must lie in [1, n)");
            }
            let seed = m + 1;
            for u in 0..seed {
                for v in (u + 1)..seed {
                    g.add_edge(u, v);
                }
            }
            // endpoint list: sampling from it is degree-proportional
            let mut ends: Vec<usize> = g.edges().into_iter().flat_map(|(u, v)| [u, v]).collect();
            for u in seed..n {
                let mut targets = Vec::with_capacity(m);
                while targets.len() < m {
                    let t = ends[rng.gen_range(0..ends.len())];
                    if !targets.contains(&t) {
                        targets.push(t);
                    }
                }
                for t in targets {
                    g.add_edge(u, t);
                    ends.push(u);
                    ends.push(t);
                }
            }
        }
        GraphFamily::WattsStrogatz { k, beta } => {
            if k < 2 || k % 2 != 0 || k >= n {
                bail!(Config, "ring degree must be even and in [2, n)");
            }
            if !(0.0..=1.0).contains(&beta) {
                bail!(Config, "rewiring probability outside [0, 1]");
            }
            for j in 1..=k / 2 {
                for u in 0..n {
                    g.add_edge(u, (u + j) % n);
                }
            }
            for j in 1..=k / 2 {
                for u in 0..n {
                    let v = (u + j) % n;
                    if rng.gen::<f64>() < beta && g.has_edge(u, v) && g.adj[u].len() < n - 1 {
                        let w = loop {
                            let w = rng.gen_range(0..n);
                            if w != u && !g.has_edge(u, w) {
                                break w;
                            }
                        };
                        g.remove_edge(u, v);
                        g.add_edge(u, w);
                    }
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    #[test]
    fn families_are_connected_and_simple() {
        let mut rng = StreamRng::seed_from_u64(4);
        for fam in GraphFamily::defaults() {
            let g = generate(fam, 100, &mut rng).unwrap();
            assert!(g.is_connected(), "{}", fam.name());
            for (u, nb) in g.adj.iter().enumerate() {
                assert!(!nb.contains(&u));
                assert!(nb.windows(2).all(|w| w[0] < w[1]));
                assert!(nb.iter().all(|&v| g.has_edge(v, u)));
            }
        }
    }

    #[test]
    fn chain_distances() {
        let mut rng = StreamRng::seed_from_u64(0);
        let g = generate(GraphFamily::Chain, 5, &mut rng).unwrap();
        assert_eq!(g.bfs(0), vec![Some(0), Some(1), Some(2), Some(3), Some(4)]);
        assert_eq!(g.diameter(), 4);
        assert_eq!(g.edges(), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn watts_strogatz_keeps_edge_count() {
        let mut rng = StreamRng::seed_from_u64(2);
        let g = generate(GraphFamily::WattsStrogatz { k: 4, beta: 0.2 }, 50, &mut rng).unwrap();
        assert_eq!(g.edges().len(), 100);
    }
}
