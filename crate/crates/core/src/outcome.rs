use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggspec::{plain_aggregate, Aggregate, AggregationSpec};
use crate::stnet::NetMetrics;
use crate::trace::{PhaseLabel, RoundTrace};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Lipi,
    Ppmp,
    Sss,
    Nsss,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Lipi,
        Protocol::Ppmp,
        Protocol::Sss,
        Protocol::Nsss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Lipi => "lipi",
            Protocol::Ppmp => "ppmp",
            Protocol::Sss => "sss",
            Protocol::Nsss => "nsss",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protocol {s:?} (expected lipi, ppmp, sss or nsss)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RoundStatus {
    Completed,
    /// The initiator was down, so the round never (fully) started.
    InitiatorFailed,
    /// Some reporting node could not gather everything it needed.
    Incomplete {
        nodes: Vec<NodeId>,
    },
    /// Recovery sharing did not complete; no third phase is attempted.
    RecoveryFailed {
        nodes: Vec<NodeId>,
    },
    /// The recovered value exceeds what the protocol's modulus can represent.
    Overflow,
}

impl RoundStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RoundStatus::Completed => "completed",
            RoundStatus::InitiatorFailed => "initiator_failed",
            RoundStatus::Incomplete { .. } => "incomplete",
            RoundStatus::RecoveryFailed { .. } => "recovery_failed",
            RoundStatus::Overflow => "overflow",
        }
    }

    /// Nodes the status names, if any.
    pub fn nodes(&self) -> &[NodeId] {
        match self {
            RoundStatus::Incomplete { nodes } | RoundStatus::RecoveryFailed { nodes } => nodes,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub label: PhaseLabel,
    pub duration: u64,
}

/// Outcome of one aggregation round of any protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub protocol: Protocol,
    pub seq_no: u32,
    pub status: RoundStatus,
    pub initiator: NodeId,
    /// Aggregate computed by each node that finished the round.
    pub aggregates: BTreeMap<NodeId, Aggregate>,
    /// Nodes announced at the start of the round.
    pub participants: BTreeSet<NodeId>,
    /// Nodes whose secret is folded into the aggregate.
    pub contributors: BTreeSet<NodeId>,
    pub recovery_used: bool,
    pub metrics: NetMetrics,
    pub phases: Vec<PhaseCost>,
    pub trace: RoundTrace,
}

impl AggregateResult {
    pub(crate) fn new(
        protocol: Protocol,
        seq_no: u32,
        initiator: NodeId,
        participants: BTreeSet<NodeId>,
    ) -> Self {
        AggregateResult {
            protocol,
            seq_no,
            status: RoundStatus::Completed,
            initiator,
            aggregates: BTreeMap::new(),
            contributors: BTreeSet::new(),
            participants,
            recovery_used: false,
            metrics: NetMetrics::default(),
            phases: Vec::new(),
            trace: RoundTrace::new(seq_no),
        }
    }

    pub(crate) fn add_phase(&mut self, label: PhaseLabel, metrics: &NetMetrics) {
        self.metrics.accumulate(metrics);
        self.phases.push(PhaseCost {
            label,
            duration: metrics.duration,
        });
    }

    pub fn is_completed(&self) -> bool {
        self.status == RoundStatus::Completed
    }

    /// The common aggregate, if the round completed and every reporter agrees.
    pub fn agreed(&self) -> Option<Aggregate> {
        if !self.is_completed() {
            return None;
        }
        let mut values = self.aggregates.values();
        let first = *values.next()?;
        values.all(|a| *a == first).then_some(first)
    }

    pub fn communication_rounds(&self) -> usize {
        self.trace.communication_rounds()
    }

    /// Whether the agreed aggregate equals the plaintext aggregate over the contributors.
    pub fn matches_plain(&self, spec: &AggregationSpec, secrets: &BTreeMap<NodeId, u64>) -> bool {
        let Some(agreed) = self.agreed() else {
            return false;
        };
        let plain: Vec<u64> = self
            .contributors
            .iter()
            .filter_map(|c| secrets.get(c).copied())
            .collect();
        if plain.len() != self.contributors.len() {
            return false;
        }
        plain_aggregate(spec, &plain)
            .map(|p| p == agreed)
            .unwrap_or(false)
    }
}
