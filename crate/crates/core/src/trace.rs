//! Record of everything put on the air during a round.
//!
//! A trace holds only broadcast payloads and which origins each node heard;
//! plaintext secrets and private exponents never appear in it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggspec::MaskedValue;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    DfkeParams,
    DfkePublics,
    SyncFlood,
    Share1,
    MissingFlood,
    Share2Recovery,
    PpmpKeyExchange,
    PpmpAggregation,
    SssShare,
    SssReconstruction,
}

impl PhaseLabel {
    pub fn is_minicast(self) -> bool {
        !matches!(
            self,
            PhaseLabel::DfkeParams | PhaseLabel::SyncFlood | PhaseLabel::MissingFlood
        )
    }

    /// Pairwise key setup, amortised over many aggregation rounds.
    pub fn is_key_setup(self) -> bool {
        matches!(self, PhaseLabel::DfkeParams | PhaseLabel::DfkePublics)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    GroupParams {
        p: u64,
        g: u64,
    },
    DhPublic {
        owner: NodeId,
        value: u64,
    },
    Sync {
        participants: Vec<NodeId>,
        seq_no: u32,
    },
    Masked(MaskedValue),
    MissingList {
        nodes: Vec<NodeId>,
    },
    RingKey {
        owner: NodeId,
        value: u64,
    },
    RingCipher {
        owner: NodeId,
        value: u64,
    },
    SealedShare {
        dealer: NodeId,
        recipient: NodeId,
        ciphertext: u64,
    },
    ShareSum {
        owner: NodeId,
        value: u64,
    },
}

impl Payload {
    /// Numeric content of the payload, for leak checks.
    pub fn values(&self) -> Vec<u64> {
        match self {
            Payload::GroupParams { p, g } => vec![*p, *g],
            Payload::DhPublic { value, .. }
            | Payload::RingKey { value, .. }
            | Payload::RingCipher { value, .. }
            | Payload::ShareSum { value, .. } => vec![*value],
            Payload::Masked(m) => vec![m.value],
            Payload::SealedShare { ciphertext, .. } => vec![*ciphertext],
            Payload::Sync { .. } | Payload::MissingList { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub label: PhaseLabel,
    pub payloads: Vec<Payload>,
    /// Origins whose payload each node held at the end of the phase.
    pub observations: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub seq_no: u32,
    pub phases: Vec<PhaseTrace>,
}

impl RoundTrace {
    pub fn new(seq_no: u32) -> Self {
        RoundTrace {
            seq_no,
            phases: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        label: PhaseLabel,
        payloads: Vec<Payload>,
        observations: BTreeMap<NodeId, BTreeSet<NodeId>>,
    ) {
        self.phases.push(PhaseTrace {
            label,
            payloads,
            observations,
        });
    }

    pub fn phase(&self, label: PhaseLabel) -> Option<&PhaseTrace> {
        self.phases.iter().rev().find(|p| p.label == label)
    }

    /// MiniCast instances of the round, not counting pairwise key setup.
    pub fn communication_rounds(&self) -> usize {
        self.phases
            .iter()
            .filter(|p| p.label.is_minicast() && !p.label.is_key_setup())
            .count()
    }

    /// Masked values of the last sharing phase (the recovery share if one ran).
    pub fn final_masked(&self) -> BTreeMap<NodeId, MaskedValue> {
        let phase = self
            .phase(PhaseLabel::Share2Recovery)
            .or_else(|| self.phase(PhaseLabel::Share1));
        phase
            .into_iter()
            .flat_map(|p| p.payloads.iter())
            .filter_map(|p| match p {
                Payload::Masked(m) => Some((m.owner, *m)),
                _ => None,
            })
            .collect()
    }

    pub fn all_values(&self) -> impl Iterator<Item = u64> + '_ {
        self.phases
            .iter()
            .flat_map(|p| p.payloads.iter())
            .flat_map(Payload::values)
    }
}
