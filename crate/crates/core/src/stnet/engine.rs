use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NetError, NetMetrics, SimConfig, Stage, Topology};
use crate::modmath::{keyed_rand, SeedMaterial};
use crate::NodeId;

/// Chain layout and outreach of one MiniCast instance.
#[derive(Debug, Clone, Copy)]
pub struct ChainSpec<'a> {
    pub stage: Stage,
    /// Nodes owning a position in the chain, in id order.
    pub participants: &'a BTreeSet<NodeId>,
    /// Sub-slots each participant occupies; one when absent.
    pub sub_slots: Option<&'a BTreeMap<NodeId, u32>>,
    /// Entries are not forwarded beyond this many hops from their origin.
    pub hop_limit: Option<u32>,
    /// Separates the link-loss draws of different instances.
    pub salt: u32,
}

impl<'a> ChainSpec<'a> {
    pub fn new(stage: Stage, participants: &'a BTreeSet<NodeId>) -> Self {
        ChainSpec {
            stage,
            participants,
            sub_slots: None,
            hop_limit: None,
            salt: 0,
        }
    }

    pub fn salt(mut self, salt: u32) -> Self {
        self.salt = salt;
        self
    }

    pub fn sub_slots(mut self, sub_slots: &'a BTreeMap<NodeId, u32>) -> Self {
        self.sub_slots = Some(sub_slots);
        self
    }

    pub fn hop_limit(mut self, hop_limit: u32) -> Self {
        self.hop_limit = Some(hop_limit);
        self
    }

    /// Header + scheduled sub-slots + trailer.
    pub fn chain_length(&self) -> u64 {
        let body: u64 = self
            .participants
            .iter()
            .map(|p| self.sub_slots.and_then(|s| s.get(p)).copied().unwrap_or(1) as u64)
            .sum();
        body + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinicastOutcome<T> {
    pub metrics: NetMetrics,
    /// For every node that took part: origin -> entry it ended up holding.
    pub received: BTreeMap<NodeId, BTreeMap<NodeId, T>>,
}

struct Propagation<'a> {
    topo: &'a Topology,
    ntx: u32,
    max_slots: u32,
    slot_units: u64,
    hop_limit: u32,
    members: BTreeSet<NodeId>,
    caps: BTreeMap<NodeId, u32>,
    origins: BTreeSet<NodeId>,
    rng: ChaCha8Rng,
}

type Holdings = BTreeMap<NodeId, BTreeMap<NodeId, u32>>;

impl Propagation<'_> {
    fn forwardable(&self, held: &BTreeMap<NodeId, u32>) -> Vec<(NodeId, u32)> {
        held.iter()
            .filter(|(_, &hop)| hop < self.hop_limit)
            .map(|(&o, &h)| (o, h))
            .collect()
    }

    fn complete(&self, held: &BTreeMap<NodeId, u32>) -> bool {
        self.origins.iter().all(|o| held.contains_key(o))
    }

    fn transmitters(
        &self,
        alive: &BTreeSet<NodeId>,
        hold: &Holdings,
        budget: &BTreeMap<NodeId, u32>,
    ) -> BTreeMap<NodeId, Vec<(NodeId, u32)>> {
        alive
            .iter()
            .filter(|n| budget[n] > 0)
            .map(|&n| (n, self.forwardable(&hold[&n])))
            .filter(|(_, f)| !f.is_empty())
            .collect()
    }

    fn gains(held: &BTreeMap<NodeId, u32>, payload: &[(NodeId, u32)]) -> bool {
        payload
            .iter()
            .any(|&(o, h)| held.get(&o).is_none_or(|&have| have > h + 1))
    }

    /// True while some listening node could still learn something.
    fn may_change(
        &self,
        alive: &BTreeSet<NodeId>,
        hold: &Holdings,
        tx: &BTreeMap<NodeId, Vec<(NodeId, u32)>>,
    ) -> bool {
        tx.iter().any(|(&u, payload)| {
            self.topo.neighbors(u).iter().any(|v| {
                alive.contains(v)
                    && (tx.contains_key(v) || !self.complete(&hold[v]))
                    && Self::gains(&hold[v], payload)
            })
        })
    }

    fn run(mut self, initial: BTreeMap<NodeId, BTreeSet<NodeId>>) -> (NetMetrics, Holdings) {
        let mut hold: Holdings = self
            .members
            .iter()
            .map(|&m| {
                let own = initial
                    .get(&m)
                    .map(|os| os.iter().map(|&o| (o, 0)).collect());
                (m, own.unwrap_or_default())
            })
            .collect();
        let mut alive = self.members.clone();
        let mut budget: BTreeMap<NodeId, u32> =
            self.members.iter().map(|&m| (m, self.ntx)).collect();
        let mut tx_count: BTreeMap<NodeId, u32> = self.members.iter().map(|&m| (m, 0)).collect();
        let mut active_slots: BTreeMap<NodeId, u64> =
            self.members.iter().map(|&m| (m, 0)).collect();
        let mut last_active: BTreeMap<NodeId, u64> = active_slots.clone();
        let mut completed: BTreeMap<NodeId, u64> = self
            .members
            .iter()
            .filter(|m| self.complete(&hold[m]))
            .map(|&m| (m, 0))
            .collect();

        let mut slot = 0u64;
        while slot < self.max_slots as u64 {
            let tx = self.transmitters(&alive, &hold, &budget);
            if !self.may_change(&alive, &hold, &tx) {
                break;
            }
            slot += 1;
            let listening: Vec<NodeId> = alive
                .iter()
                .copied()
                .filter(|v| tx.contains_key(v) || !self.complete(&hold[v]))
                .collect();
            for &v in &listening {
                for &u in self.topo.neighbors(v) {
                    let Some(payload) = tx.get(&u) else { continue };
                    let p = self.topo.link_prob(u, v);
                    if p < 1.0 && !self.rng.gen_bool(p) {
                        continue;
                    }
                    let held = hold.get_mut(&v).unwrap();
                    for &(origin, hop) in payload {
                        let hop = hop + 1;
                        held.entry(origin)
                            .and_modify(|have| *have = (*have).min(hop))
                            .or_insert(hop);
                    }
                }
                *active_slots.get_mut(&v).unwrap() += 1;
                last_active.insert(v, slot);
            }
            for &u in tx.keys() {
                *budget.get_mut(&u).unwrap() -= 1;
                let count = tx_count.get_mut(&u).unwrap();
                *count += 1;
                if self.caps.get(&u) == Some(count) {
                    alive.remove(&u);
                }
            }
            for &v in &listening {
                if !completed.contains_key(&v) && self.complete(&hold[&v]) {
                    completed.insert(v, slot);
                }
            }
        }

        let units = self.slot_units;
        let mut metrics = NetMetrics {
            duration: slot * units,
            ..NetMetrics::default()
        };
        for &m in &self.members {
            let finished = match completed.get(&m) {
                Some(&c) => c.max(last_active[&m]),
                None if alive.contains(&m) => slot,
                None => last_active[&m],
            };
            metrics.latency.insert(m, finished * units);
            metrics.radio_on.insert(m, active_slots[&m] * units);
            if let Some(&c) = completed.get(&m) {
                metrics.completed_at.insert(m, c * units);
            }
            if !hold[&m].is_empty() {
                metrics
                    .delivery
                    .insert(m, hold[&m].keys().copied().collect());
            }
        }
        (metrics, hold)
    }
}

fn phase_rng(cfg: &SimConfig, tag: u8, salt: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(keyed_rand(SeedMaterial::new(cfg.rng_seed, salt, tag)))
}

/// Floods one packet from `initiator`. Each holder transmits in consecutive
/// rounds until it has sent `ntx` copies; the flood stops once no listening
/// node can receive anything new.
pub fn glossy_flood(
    topo: &Topology,
    cfg: &SimConfig,
    stage: Stage,
    initiator: NodeId,
    salt: u32,
) -> Result<NetMetrics, NetError> {
    cfg.validate(topo)?;
    if !topo.contains(initiator) {
        return Err(NetError::UnknownNode(initiator));
    }
    let dead = cfg.dead_in(stage);
    if dead.contains(&initiator) {
        return Ok(NetMetrics::default());
    }
    let members: BTreeSet<NodeId> = topo.nodes().filter(|n| !dead.contains(n)).collect();
    let run = Propagation {
        topo,
        ntx: cfg.ntx,
        max_slots: cfg.max_hops,
        slot_units: 1,
        hop_limit: u32::MAX,
        members,
        caps: cfg.tx_caps(stage),
        origins: [initiator].into(),
        rng: phase_rng(cfg, stage.tag() | 0x08, salt),
    };
    Ok(run.run([(initiator, [initiator].into())].into()).0)
}

/// All-to-all sharing of one entry per participant along a TDMA chain.
pub fn minicast_with<T: Clone>(
    topo: &Topology,
    cfg: &SimConfig,
    chain: &ChainSpec<'_>,
    entries: &BTreeMap<NodeId, T>,
) -> Result<MinicastOutcome<T>, NetError> {
    cfg.validate(topo)?;
    if chain.participants.is_empty() {
        return Err(NetError::EmptyParticipants);
    }
    if let Some(&bad) = chain.participants.iter().find(|&&p| !topo.contains(p)) {
        return Err(NetError::UnknownNode(bad));
    }
    if let Some(&bad) = entries.keys().find(|o| !chain.participants.contains(o)) {
        return Err(NetError::EntryWithoutSlot(bad));
    }
    if chain.hop_limit == Some(0) {
        return Err(NetError::InvalidConfig(
            "hop limit must be at least 1".into(),
        ));
    }
    let dead = cfg.dead_in(chain.stage);
    let members: BTreeSet<NodeId> = topo.nodes().filter(|n| !dead.contains(n)).collect();
    let initial: BTreeMap<NodeId, BTreeSet<NodeId>> = entries
        .keys()
        .filter(|o| members.contains(o))
        .map(|&o| (o, [o].into()))
        .collect();
    let run = Propagation {
        topo,
        ntx: cfg.ntx,
        max_slots: cfg.max_hops,
        slot_units: chain.chain_length(),
        hop_limit: chain.hop_limit.unwrap_or(u32::MAX),
        members,
        caps: cfg.tx_caps(chain.stage),
        origins: initial.keys().copied().collect(),
        rng: phase_rng(cfg, chain.stage.tag(), chain.salt),
    };
    let (metrics, hold) = run.run(initial);
    let received = hold
        .into_iter()
        .map(|(node, held)| {
            let vector = held.keys().map(|o| (*o, entries[o].clone())).collect();
            (node, vector)
        })
        .collect();
    Ok(MinicastOutcome { metrics, received })
}

pub fn minicast_round<T: Clone>(
    topo: &Topology,
    cfg: &SimConfig,
    stage: Stage,
    entries: &BTreeMap<NodeId, T>,
    participants: &BTreeSet<NodeId>,
) -> Result<MinicastOutcome<T>, NetError> {
    minicast_with(topo, cfg, &ChainSpec::new(stage, participants), entries)
}

/// MiniCast whose entries stop travelling `hop_limit` hops from their origin.
pub fn restricted_minicast<T: Clone>(
    topo: &Topology,
    cfg: &SimConfig,
    stage: Stage,
    entries: &BTreeMap<NodeId, T>,
    participants: &BTreeSet<NodeId>,
    hop_limit: u32,
) -> Result<MinicastOutcome<T>, NetError> {
    minicast_with(
        topo,
        cfg,
        &ChainSpec::new(stage, participants).hop_limit(hop_limit),
        entries,
    )
}
