//! Hop counts between frames on the scan graph, with and without the
//! attention hubs that inter-frame prompts add.

use std::collections::VecDeque;

use crate::error::{Result, SspError};
use crate::model::ModelConfig;
use crate::prompt::{sample_rows, SeqLayout, Strategy};

/// Nodes are sequence positions followed by one hub per IFS boundary.
/// Scan adjacency runs both ways; each hub has edges from the sampled
/// tokens and to every prompt slot.
#[derive(Clone, Debug)]
pub struct ConnectivityGraph {
    pub layout: SeqLayout,
    pub hubs: usize,
    adj: Vec<Vec<usize>>,
}

impl ConnectivityGraph {
    pub fn promptless(frames: usize, patches: usize) -> Self {
        Self::build(SeqLayout::new(frames, patches), None, 0)
    }

    pub fn with_ifs(frames: usize, patches: usize, strategy: Strategy, hubs: usize) -> Self {
        Self::build(
            SeqLayout::new(frames, patches).with_prompts(),
            Some(strategy),
            hubs.max(1),
        )
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        if c.use_ifs {
            Self::with_ifs(c.frames, c.patches(), c.strategy, c.n_ifs)
        } else {
            Self::promptless(c.frames, c.patches())
        }
    }

    fn build(layout: SeqLayout, strategy: Option<Strategy>, hubs: usize) -> Self {
        let s = layout.len();
        let mut adj = vec![Vec::new(); s + hubs];
        for k in 0..s - 1 {
            adj[k].push(k + 1);
            adj[k + 1].push(k);
        }
        if let Some(strategy) = strategy {
            let sampled: Vec<usize> = sample_rows(&layout, strategy).into_iter().flatten().collect();
            for h in s..s + hubs {
                for &r in &sampled {
                    adj[r].push(h);
                }
                adj[h] = layout.prompt_rows();
            }
        }
        ConnectivityGraph { layout, hubs, adj }
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adj[from].contains(&to)
    }

    /// Breadth-first hop counts from `from` to every node.
    pub fn bfs(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.adj.len()];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let next = dist[u].expect("queued nodes are reached") + 1;
            for &v in &self.adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(next);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Hops from frame `i`'s first token to frame `j`'s first token
    /// (0-based frames, `i ≤ j`).
    pub fn path_length(&self, i: usize, j: usize) -> Result<usize> {
        let t = self.layout.frames;
        if i > j || j >= t {
            return Err(SspError::contract(format!(
                "path_length needs i ≤ j < {t}, got ({i}, {j})"
            )));
        }
        let from = self.layout.patch_index(i, 0);
        let to = self.layout.patch_index(j, 0);
        self.bfs(from)[to].ok_or_else(|| SspError::contract(format!("frame {j} unreachable from frame {i}")))
    }

    /// Largest shortest-path hop count between sequence positions.
    pub fn diameter(&self) -> Result<usize> {
        let s = self.layout.len();
        let mut best = 0;
        for from in 0..s {
            let d = self.bfs(from);
            for (to, h) in d[..s].iter().enumerate() {
                let h = h.ok_or_else(|| SspError::contract(format!("position {to} unreachable from {from}")))?;
                best = best.max(h);
            }
        }
        Ok(best)
    }
}

/// `from_frame,to_frame,frame_distance,hops` for every frame pair `i ≤ j`.
pub fn paths_csv(g: &ConnectivityGraph) -> Result<String> {
    let mut out = String::from("from_frame,to_frame,frame_distance,hops\n");
    for i in 0..g.layout.frames {
        for j in i..g.layout.frames {
            out.push_str(&format!("{i},{j},{},{}\n", j - i, g.path_length(i, j)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    use super::*;

    #[test]
    fn spec_example() {
        let plain = ConnectivityGraph::promptless(4, 5);
        assert_eq!(plain.path_length(0, 0).unwrap(), 0);
        assert_eq!(plain.path_length(0, 3).unwrap(), 15);
        let ifs = ConnectivityGraph::with_ifs(4, 5, Strategy::LastForward, 1);
        let hops = ifs.path_length(0, 3).unwrap();
        assert!(hops <= 5 + 2 + 5 && hops < 15, "{hops}");
        assert_eq!(hops, 5 + 2);
        assert!(matches!(plain.path_length(2, 1), Err(SspError::Contract(_))));
    }

    #[test]
    fn promptless_graph_is_a_path() {
        let g = ConnectivityGraph::promptless(3, 4);
        assert_eq!(g.diameter().unwrap(), g.layout.len() - 1);
        assert_eq!(g.nodes(), g.layout.len());
    }

    #[test]
    fn csv_lists_every_pair() {
        let g = ConnectivityGraph::promptless(3, 4);
        let csv = paths_csv(&g).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.contains("\n0,2,2,8\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hub_bounds_hops(t in 2usize..=16, n in 1usize..=64, k in 0usize..4, hubs in 1usize..3) {
            let strategy = Strategy::ALL[k];
            let plain = ConnectivityGraph::promptless(t, n);
            let ifs = ConnectivityGraph::with_ifs(t, n, strategy, hubs);
            let prompts = ifs.layout.prompt_rows();
            let s = ifs.layout.len();
            for rows in sample_rows(&ifs.layout, strategy) {
                for &r in &rows {
                    for h in s..ifs.nodes() {
                        prop_assert!(ifs.has_edge(r, h));
                        for &p in &prompts {
                            prop_assert!(ifs.has_edge(h, p));
                        }
                    }
                }
            }
            let from0 = plain.bfs(plain.layout.patch_index(0, 0));
            for j in 0..t {
                prop_assert_eq!(from0[plain.layout.patch_index(j, 0)], Some(j * n));
                let hops = ifs.path_length(0, j).unwrap();
                prop_assert!(hops <= 2 * n + 2);
            }
        }
    }
}
