use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetError;
use crate::NodeId;

/// Radio range used by the random-geometric generator, in meters.
pub const DEFAULT_RADIO_RANGE: f64 = 100.0;

/// Undirected connectivity graph over nodes `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: u32,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    // keyed by (min, max); absent means a perfect link
    link_prob: BTreeMap<(NodeId, NodeId), f64>,
}

fn link_key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    (u.min(v), u.max(v))
}

impl Topology {
    pub fn empty(n: u32) -> Self {
        Topology {
            n,
            adjacency: (1..=n).map(|id| (id, BTreeSet::new())).collect(),
            link_prob: BTreeMap::new(),
        }
    }

    pub fn add_edge(&mut self, u: NodeId, v: NodeId, prob: Option<f64>) -> Result<(), NetError> {
        if u == v {
            return Err(NetError::SelfLoop(u));
        }
        for id in [u, v] {
            if !self.contains(id) {
                return Err(NetError::UnknownNode(id));
            }
        }
        self.adjacency.get_mut(&u).unwrap().insert(v);
        self.adjacency.get_mut(&v).unwrap().insert(u);
        match prob {
            Some(p) if !(p > 0.0 && p <= 1.0) => return Err(NetError::LinkProbability(p)),
            Some(p) if p < 1.0 => {
                self.link_prob.insert(link_key(u, v), p);
            }
            _ => {
                self.link_prob.remove(&link_key(u, v));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> u32 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id >= 1 && id <= self.n
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        1..=self.n
    }

    pub fn node_set(&self) -> BTreeSet<NodeId> {
        self.nodes().collect()
    }

    pub fn neighbors(&self, id: NodeId) -> &BTreeSet<NodeId> {
        static NONE: BTreeSet<NodeId> = BTreeSet::new();
        self.adjacency.get(&id).unwrap_or(&NONE)
    }

    pub fn link_prob(&self, u: NodeId, v: NodeId) -> f64 {
        self.link_prob.get(&link_key(u, v)).copied().unwrap_or(1.0)
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId, f64)> {
        self.adjacency
            .iter()
            .flat_map(|(&u, vs)| vs.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .map(|(u, v)| (u, v, self.link_prob(u, v)))
            .collect()
    }

    /// BFS hop counts from `from`, walking only through `within`.
    pub fn hop_distances(&self, from: NodeId, within: &BTreeSet<NodeId>) -> BTreeMap<NodeId, u32> {
        let mut dist = BTreeMap::new();
        if !within.contains(&from) {
            return dist;
        }
        dist.insert(from, 0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for &v in self.neighbors(u) {
                if within.contains(&v) && !dist.contains_key(&v) {
                    dist.insert(v, d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected_within(&self, within: &BTreeSet<NodeId>) -> bool {
        match within.iter().next() {
            None => true,
            Some(&first) => self.hop_distances(first, within).len() == within.len(),
        }
    }

    pub fn is_connected(&self) -> bool {
        self.is_connected_within(&self.node_set())
    }

    /// Diameter of the subgraph induced by `within`, or `None` if it is disconnected.
    pub fn diameter_within(&self, within: &BTreeSet<NodeId>) -> Option<u32> {
        let mut best = 0;
        for &u in within {
            let dist = self.hop_distances(u, within);
            if dist.len() != within.len() {
                return None;
            }
            best = best.max(dist.values().copied().max().unwrap_or(0));
        }
        Some(best)
    }

    pub fn diameter(&self) -> Option<u32> {
        self.diameter_within(&self.node_set())
    }

    pub fn complete(n: u32) -> Self {
        let mut t = Topology::empty(n);
        for u in 1..=n {
            for v in u + 1..=n {
                t.add_edge(u, v, None).unwrap();
            }
        }
        t
    }

    pub fn line(n: u32) -> Self {
        let mut t = Topology::empty(n);
        for u in 1..n {
            t.add_edge(u, u + 1, None).unwrap();
        }
        t
    }

    pub fn ring(n: u32) -> Self {
        let mut t = Topology::line(n);
        if n > 2 {
            t.add_edge(n, 1, None).unwrap();
        }
        t
    }

    /// Nodes placed uniformly in a `side` x `side` square, linked when within `radius`.
    pub fn random_geometric(n: u32, side: f64, radius: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..=side), rng.gen_range(0.0..=side)))
            .collect();
        let mut t = Topology::empty(n);
        for i in 0..n as usize {
            for j in i + 1..n as usize {
                let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                if (dx * dx + dy * dy).sqrt() <= radius {
                    t.add_edge(i as NodeId + 1, j as NodeId + 1, None).unwrap();
                }
            }
        }
        t
    }

    /// First connected draw among seeds `seed, seed + 1, ...`.
    pub fn random_geometric_connected(
        n: u32,
        side: f64,
        radius: f64,
        seed: u64,
        attempts: u32,
    ) -> Result<Self, NetError> {
        (0..attempts as u64)
            .map(|k| Topology::random_geometric(n, side, radius, seed.wrapping_add(k)))
            .find(|t| t.is_connected())
            .ok_or(NetError::NoConnectedDraw { n, side, attempts })
    }

    /// Parses `n` followed by one `u v [prob]` edge per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap().trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line_no, header) = lines.next().ok_or(NetError::Parse {
            line: 0,
            message: "missing node count".into(),
        })?;
        let n: u32 = header.parse().map_err(|_| NetError::Parse {
            line: line_no,
            message: format!("bad node count {header:?}"),
        })?;
        let mut topo = Topology::empty(n);
        for (line_no, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |message: String| NetError::Parse {
                line: line_no,
                message,
            };
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad(format!("expected `u v [prob]`, got {line:?}")));
            }
            let u: NodeId = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad node {:?}", fields[0])))?;
            let v: NodeId = fields[1]
                .parse()
                .map_err(|_| bad(format!("bad node {:?}", fields[1])))?;
            let prob = match fields.get(2) {
                Some(p) => Some(
                    p.parse::<f64>()
                        .map_err(|_| bad(format!("bad probability {p:?}")))?,
                ),
                None => None,
            };
            topo.add_edge(u, v, prob).map_err(|e| bad(e.to_string()))?;
        }
        Ok(topo)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for (u, v, p) in self.edges() {
            if p < 1.0 {
                writeln!(out, "{u} {v} {p}").unwrap();
            } else {
                writeln!(out, "{u} {v}").unwrap();
            }
        }
        out
    }
}
