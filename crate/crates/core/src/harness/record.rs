use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggspec::{plain_aggregate, AggregationSpec};
use crate::outcome::{AggregateResult, PhaseCost, Protocol};
use crate::stnet::NetMetrics;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub latency: u64,
    pub radio_on: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub duration: u64,
    pub mean_latency: f64,
    pub mean_radio_on: f64,
}

impl CostSummary {
    pub fn of(metrics: &NetMetrics) -> Self {
        CostSummary {
            duration: metrics.duration,
            mean_latency: metrics.mean_latency(),
            mean_radio_on: metrics.mean_radio_on(),
        }
    }
}

/// One round of one protocol, as emitted by the command line tool.
///
/// Costs are in sub-slots. The initiator is reported on its own; `nodes`
/// and the means cover every other node that was up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub protocol: Protocol,
    pub round: u32,
    pub seq_no: u32,
    pub status: String,
    pub status_nodes: Vec<NodeId>,
    pub aggregate: Option<f64>,
    pub aggregate_exact: Option<u64>,
    /// Plaintext aggregate over the contributing nodes.
    pub expected: Option<f64>,
    pub correct: bool,
    pub contributors: usize,
    pub recovery_used: bool,
    pub communication_rounds: usize,
    pub initiator: NodeCost,
    pub mean_latency: f64,
    pub mean_radio_on: f64,
    pub nodes: Vec<NodeCost>,
    pub phases: Vec<PhaseCost>,
    /// Key establishment that ran right before this round.
    pub key_setup: Option<CostSummary>,
}

impl ResultRecord {
    pub fn new(
        round: u32,
        result: &AggregateResult,
        key_setup: Option<&NetMetrics>,
        spec: &AggregationSpec,
        secrets: &BTreeMap<NodeId, u64>,
    ) -> Self {
        let metrics = &result.metrics;
        let cost = |node| NodeCost {
            node,
            latency: metrics.latency_of(node),
            radio_on: metrics.radio_on_of(node),
        };
        let nodes: Vec<NodeCost> = metrics
            .latency
            .keys()
            .copied()
            .filter(|&n| n != result.initiator)
            .map(cost)
            .collect();
        let mean = |f: fn(&NodeCost) -> u64| {
            if nodes.is_empty() {
                0.0
            } else {
                nodes.iter().map(f).sum::<u64>() as f64 / nodes.len() as f64
            }
        };
        let contributor_secrets: Vec<u64> = result
            .contributors
            .iter()
            .filter_map(|c| secrets.get(c).copied())
            .collect();
        let agreed = result.agreed();
        ResultRecord {
            protocol: result.protocol,
            round,
            seq_no: result.seq_no,
            status: result.status.label().to_string(),
            status_nodes: result.status.nodes().to_vec(),
            aggregate: agreed.map(|a| a.as_f64()),
            aggregate_exact: agreed.and_then(|a| a.exact()),
            expected: plain_aggregate(spec, &contributor_secrets)
                .ok()
                .map(|a| a.as_f64()),
            correct: result.matches_plain(spec, secrets),
            contributors: result.contributors.len(),
            recovery_used: result.recovery_used,
            communication_rounds: result.communication_rounds(),
            initiator: cost(result.initiator),
            mean_latency: mean(|c| c.latency),
            mean_radio_on: mean(|c| c.radio_on),
            nodes,
            phases: result.phases.clone(),
            key_setup: key_setup.map(CostSummary::of),
        }
    }

    /// Latency and radio-on of every reported node, initiator first.
    pub fn all_costs(&self) -> impl Iterator<Item = &NodeCost> {
        std::iter::once(&self.initiator).chain(self.nodes.iter())
    }
}
