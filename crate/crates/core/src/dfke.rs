//! Diffie-Hellman pairwise key establishment over a flood and one MiniCast.
//!
//! The initiator floods the group parameters, every reached node draws a
//! private exponent and shares its public value in a MiniCast, and each node
//! then derives one 64-bit key per peer it heard from.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modmath::{keyed_rand, mod_pow, ModError, ModParams, SeedMaterial};
use crate::stnet::{
    glossy_flood, minicast_with, ChainSpec, NetError, NetMetrics, SimConfig, Stage, Topology,
};
use crate::trace::{Payload, PhaseLabel, PhaseTrace};
use crate::NodeId;

const TAG_SECRET: u8 = 0x31;
const TAG_FOLD: u8 = 0x32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DfkeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mod(#[from] ModError),
    #[error("initiator {0} is down during key exchange")]
    InitiatorDown(NodeId),
    #[error("group modulus {0} leaves no room for a private exponent")]
    GroupTooSmall(u64),
}

/// One node's view after key establishment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTable {
    pub owner: NodeId,
    #[serde(skip)]
    secret: u64,
    pub public: u64,
    pub params: ModParams,
    pub pairwise: BTreeMap<NodeId, u64>,
}

impl KeyTable {
    /// Table for `owner` with private exponent `secret` and no peers yet.
    pub fn from_secret(owner: NodeId, secret: u64, params: ModParams) -> Result<Self, DfkeError> {
        Ok(KeyTable {
            owner,
            secret,
            public: mod_pow(params.g, secret, params.p)?,
            params,
            pairwise: BTreeMap::new(),
        })
    }

    pub fn secret(&self) -> u64 {
        self.secret
    }

    /// Unfolded shared value `peer_public ^ d mod p`.
    pub fn raw_shared(&self, peer_public: u64) -> Result<u64, DfkeError> {
        Ok(mod_pow(peer_public, self.secret, self.params.p)?)
    }

    pub fn learn(&mut self, peer: NodeId, peer_public: u64) -> Result<(), DfkeError> {
        let raw = self.raw_shared(peer_public)?;
        self.pairwise.insert(peer, fold_key(raw));
        Ok(())
    }
}

/// Spreads a group element over the full 64-bit key width.
pub fn fold_key(raw: u64) -> u64 {
    keyed_rand(SeedMaterial::new(raw, 0, TAG_FOLD))
}

/// Private exponent of `node`, uniform in `[2, p - 2]`.
pub fn draw_secret_exponent(node: NodeId, p: u64, rng_seed: u64) -> Result<u64, DfkeError> {
    if p < 5 {
        return Err(DfkeError::GroupTooSmall(p));
    }
    Ok(2 + keyed_rand(SeedMaterial::new(rng_seed, node, TAG_SECRET)) % (p - 3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfkeOutcome {
    pub tables: BTreeMap<NodeId, KeyTable>,
    /// Alive nodes the parameter flood did not reach.
    pub excluded: BTreeSet<NodeId>,
    /// Metrics of the flood followed by the MiniCast.
    pub metrics: NetMetrics,
    pub flood_metrics: NetMetrics,
    pub share_metrics: NetMetrics,
    pub trace: Vec<PhaseTrace>,
}

pub fn dfke_round(
    topo: &Topology,
    cfg: &SimConfig,
    params: ModParams,
    rng_seed: u64,
) -> Result<DfkeOutcome, DfkeError> {
    cfg.validate(topo)?;
    let stage = Stage::KeyExchange;
    let dead = cfg.dead_in(stage);
    if dead.contains(&cfg.initiator) {
        return Err(DfkeError::InitiatorDown(cfg.initiator));
    }
    let salt = rng_seed as u32;

    let flood_metrics = glossy_flood(topo, cfg, stage, cfg.initiator, salt)?;
    let mut reached: BTreeSet<NodeId> = flood_metrics.delivery.keys().copied().collect();
    reached.insert(cfg.initiator);
    let excluded: BTreeSet<NodeId> = topo
        .nodes()
        .filter(|n| !dead.contains(n) && !reached.contains(n))
        .collect();

    let mut tables = BTreeMap::new();
    for &node in &reached {
        let d = draw_secret_exponent(node, params.p, rng_seed)?;
        tables.insert(node, KeyTable::from_secret(node, d, params)?);
    }
    let publics: BTreeMap<NodeId, u64> = tables.iter().map(|(&n, t)| (n, t.public)).collect();

    let chain = ChainSpec::new(stage, &reached).salt(salt);
    let shared = minicast_with(topo, cfg, &chain, &publics)?;
    for (node, heard) in &shared.received {
        let Some(table) = tables.get_mut(node) else {
            continue;
        };
        for (&peer, &v) in heard {
            if peer != *node {
                table.learn(peer, v)?;
            }
        }
    }

    let trace = vec![
        PhaseTrace {
            label: PhaseLabel::DfkeParams,
            payloads: vec![Payload::GroupParams {
                p: params.p,
                g: params.g,
            }],
            observations: flood_metrics.delivery.clone(),
        },
        PhaseTrace {
            label: PhaseLabel::DfkePublics,
            payloads: publics
                .iter()
                .map(|(&owner, &value)| Payload::DhPublic { owner, value })
                .collect(),
            observations: shared.metrics.delivery.clone(),
        },
    ];
    let mut metrics = flood_metrics.clone();
    metrics.accumulate(&shared.metrics);
    Ok(DfkeOutcome {
        tables,
        excluded,
        metrics,
        flood_metrics,
        share_metrics: shared.metrics,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    /// Rounds after which keys are renewed.
    pub threshold: u32,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        RefreshPolicy { threshold: 100 }
    }
}

pub fn key_refresh_due(
    rounds_since_refresh: u32,
    policy: &RefreshPolicy,
    membership_changed: bool,
) -> bool {
    membership_changed || rounds_since_refresh >= policy.threshold
}

/// Largest set of table owners found greedily in which every pair holds a
/// key in both directions. With partial outreach some publics never arrive;
/// the node missing the most pairs is dropped first, the higher id on ties.
pub fn keyed_group(tables: &BTreeMap<NodeId, KeyTable>) -> BTreeSet<NodeId> {
    let mut group: BTreeSet<NodeId> = tables.keys().copied().collect();
    loop {
        let broken = |n: NodeId| {
            group
                .iter()
                .filter(|&&o| {
                    o != n
                        && !(tables[&n].pairwise.contains_key(&o)
                            && tables[&o].pairwise.contains_key(&n))
                })
                .count()
        };
        let worst = group
            .iter()
            .map(|&n| (broken(n), n))
            .max()
            .filter(|&(count, _)| count > 0);
        match worst {
            Some((_, n)) => {
                group.remove(&n);
            }
            None => return group,
        }
    }
}
