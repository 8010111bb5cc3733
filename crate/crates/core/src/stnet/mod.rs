//! Slot-level simulator for synchronous-transmission primitives.
//!
//! Two primitives are modelled: a Glossy-style flood from one initiator and
//! a MiniCast-style all-to-all exchange where every participant owns a
//! position in a chain of sub-slots. Simultaneous transmissions never
//! collide; a listening node receives whatever any transmitting neighbor
//! sent, subject to that link's reception probability.
//!
//! Time is counted in sub-slots. A flood round costs one sub-slot; a
//! MiniCast slot costs the full chain (header, one sub-slot per scheduled
//! entry, trailer). A node's radio is on during every slot in which it
//! transmits or is still missing entries.

mod engine;
mod topology;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

pub use engine::{
    glossy_flood, minicast_round, minicast_with, restricted_minicast, ChainSpec, MinicastOutcome,
};
pub use topology::{Topology, DEFAULT_RADIO_RANGE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("node {0} is not part of the topology")]
    UnknownNode(NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("link reception probability {0} outside (0, 1]")]
    LinkProbability(f64),
    #[error("topology file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no connected {n}-node layout in a {side} m square after {attempts} draws")]
    NoConnectedDraw { n: u32, side: f64, attempts: u32 },
    #[error("participant set is empty")]
    EmptyParticipants,
    #[error("node {0} has an entry but is not a participant")]
    EntryWithoutSlot(NodeId),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// When a scheduled failure takes effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum FailurePhase {
    /// Never takes part in anything.
    BeforeDfke,
    /// Completes key establishment, then goes silent for good.
    AfterDfkeSilent,
    /// Dies right after its `after_k`-th chain transmission in the first sharing round.
    MidShare { after_k: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub node: NodeId,
    #[serde(flatten)]
    pub phase: FailurePhase,
}

impl FailureEvent {
    pub fn new(node: NodeId, phase: FailurePhase) -> Self {
        FailureEvent { node, phase }
    }
}

/// Which part of a protocol round a primitive belongs to; decides how the
/// failure plan applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    KeyExchange,
    PreShare,
    Share,
    PostShare,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::KeyExchange => 0xa0,
            Stage::PreShare => 0xa1,
            Stage::Share => 0xa2,
            Stage::PostShare => 0xa3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// How many times each node transmits its chain (or the flood packet).
    pub ntx: u32,
    pub rng_seed: u64,
    /// Cap on the number of flood rounds / MiniCast slots.
    pub max_hops: u32,
    #[serde(default)]
    pub failure_plan: Vec<FailureEvent>,
    /// Node that starts every round.
    pub initiator: NodeId,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ntx: 3,
            rng_seed: 0,
            max_hops: 255,
            failure_plan: Vec::new(),
            initiator: 1,
        }
    }
}

impl SimConfig {
    /// Config whose `ntx` equals the diameter of `topo` (at least 1).
    pub fn full_outreach(topo: &Topology, rng_seed: u64) -> Self {
        SimConfig {
            ntx: topo.diameter().unwrap_or(topo.len()).max(1),
            rng_seed,
            ..SimConfig::default()
        }
    }

    pub fn with_failures(mut self, plan: Vec<FailureEvent>) -> Self {
        self.failure_plan = plan;
        self
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), NetError> {
        if self.ntx == 0 {
            return Err(NetError::InvalidConfig("ntx must be at least 1".into()));
        }
        if self.max_hops == 0 {
            return Err(NetError::InvalidConfig(
                "max_hops must be at least 1".into(),
            ));
        }
        if !topo.contains(self.initiator) {
            return Err(NetError::UnknownNode(self.initiator));
        }
        let mut seen = BTreeSet::new();
        for event in &self.failure_plan {
            if !topo.contains(event.node) {
                return Err(NetError::UnknownNode(event.node));
            }
            if !seen.insert(event.node) {
                return Err(NetError::InvalidConfig(format!(
                    "node {} fails twice",
                    event.node
                )));
            }
            if let FailurePhase::MidShare { after_k: 0 } = event.phase {
                return Err(NetError::InvalidConfig(
                    "mid-share failure needs after_k >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn failure_of(&self, node: NodeId) -> Option<FailurePhase> {
        self.failure_plan
            .iter()
            .find(|e| e.node == node)
            .map(|e| e.phase)
    }

    /// Nodes that are down for the whole of `stage`.
    pub fn dead_in(&self, stage: Stage) -> BTreeSet<NodeId> {
        self.failure_plan
            .iter()
            .filter(|e| match (e.phase, stage) {
                (FailurePhase::BeforeDfke, _) => true,
                (FailurePhase::AfterDfkeSilent, s) => s != Stage::KeyExchange,
                (FailurePhase::MidShare { .. }, s) => s == Stage::PostShare,
            })
            .map(|e| e.node)
            .collect()
    }

    /// Per-node transmission caps that apply during `stage`.
    pub fn tx_caps(&self, stage: Stage) -> BTreeMap<NodeId, u32> {
        if stage != Stage::Share {
            return BTreeMap::new();
        }
        self.failure_plan
            .iter()
            .filter_map(|e| match e.phase {
                FailurePhase::MidShare { after_k } => Some((e.node, after_k)),
                _ => None,
            })
            .collect()
    }
}

/// Per-node cost and delivery of one or more primitives.
///
/// `completed_at` is the sub-slot at which a node first held everything it
/// was meant to receive. `latency` is when the node was done with the
/// primitive: the later of completion and its last radio activity, or the
/// end of the primitive if it never completed. Both `latency` and
/// `radio_on` add up when metrics of consecutive primitives are combined.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetMetrics {
    pub latency: BTreeMap<NodeId, u64>,
    pub radio_on: BTreeMap<NodeId, u64>,
    pub completed_at: BTreeMap<NodeId, u64>,
    /// Origins each node holds at the end of the (last) primitive.
    pub delivery: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// Length of the primitive(s) in sub-slots.
    pub duration: u64,
}

impl NetMetrics {
    /// Appends `next` as a primitive that starts when this one ends.
    pub fn accumulate(&mut self, next: &NetMetrics) {
        for (&node, &v) in &next.latency {
            *self.latency.entry(node).or_default() += v;
        }
        for (&node, &v) in &next.radio_on {
            *self.radio_on.entry(node).or_default() += v;
        }
        self.completed_at = next.completed_at.clone();
        self.delivery = next.delivery.clone();
        self.duration += next.duration;
    }

    pub fn latency_of(&self, node: NodeId) -> u64 {
        self.latency.get(&node).copied().unwrap_or(0)
    }

    pub fn radio_on_of(&self, node: NodeId) -> u64 {
        self.radio_on.get(&node).copied().unwrap_or(0)
    }

    pub fn mean_radio_on(&self) -> f64 {
        mean(self.radio_on.values())
    }

    pub fn mean_latency(&self) -> f64 {
        mean(self.latency.values())
    }
}

fn mean<'a>(values: impl Iterator<Item = &'a u64>) -> f64 {
    let (sum, count) = values.fold((0u64, 0u64), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}
