//! The LiPI aggregation round.
//!
//! A round is a sync flood from the initiator, one MiniCast of masked
//! values, and local de-masking. When the initiator sees holes in its vector
//! it floods the list of missing nodes and the rest re-mask without their
//! noise terms and share once more. There is never a third sharing phase.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggspec::{
    demask, mask, recompute_mask, AggError, AggregationSpec, MaskedValue, NoiseVector,
};
use crate::dfke::{dfke_round, key_refresh_due, keyed_group, DfkeError, KeyTable, RefreshPolicy};
use crate::modmath::{keyed_rand, ModParams, SeedMaterial};
use crate::outcome::{AggregateResult, Protocol, RoundStatus};
use crate::stnet::{
    glossy_flood, minicast_with, ChainSpec, FailureEvent, FailurePhase, NetError, NetMetrics,
    SimConfig, Stage, Topology,
};
use crate::trace::{Payload, PhaseLabel};
use crate::NodeId;

const TAG_EPOCH: u8 = 0x41;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LipiError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Dfke(#[from] DfkeError),
    #[error("no secret for participant {0}")]
    MissingSecret(NodeId),
    #[error("no participant holds keys")]
    NoParticipants,
    #[error("illegal round transition {from:?} -> {to:?}")]
    IllegalTransition { from: RoundPhase, to: RoundPhase },
    #[error("a periodic run needs at least one round")]
    NoRounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    SyncFlood,
    Share1,
    MissingFlood,
    Share2Recovery,
    Done,
}

impl RoundPhase {
    pub fn can_advance_to(self, next: RoundPhase) -> bool {
        use RoundPhase::*;
        matches!(
            (self, next),
            (SyncFlood, Share1)
                | (Share1, Done)
                | (Share1, MissingFlood)
                | (MissingFlood, Share2Recovery)
                | (Share2Recovery, Done)
        )
    }
}

struct PhaseMachine {
    current: RoundPhase,
}

impl PhaseMachine {
    fn advance(&mut self, to: RoundPhase) -> Result<(), LipiError> {
        if !self.current.can_advance_to(to) {
            return Err(LipiError::IllegalTransition {
                from: self.current,
                to,
            });
        }
        self.current = to;
        Ok(())
    }
}

/// Participants with no entry in the initiator's vector.
pub fn detect_missing<T>(
    received: &BTreeMap<NodeId, T>,
    expected: &BTreeSet<NodeId>,
) -> BTreeSet<NodeId> {
    expected
        .iter()
        .filter(|n| !received.contains_key(n))
        .copied()
        .collect()
}

fn demask_vector(
    spec: &AggregationSpec,
    vector: &BTreeMap<NodeId, MaskedValue>,
    count: usize,
) -> Result<crate::aggspec::Aggregate, AggError> {
    let values: Vec<MaskedValue> = vector.values().copied().collect();
    demask(spec, &values, count)
}

/// One aggregation round among the nodes that hold keys for one another.
pub fn lipi_round(
    topo: &Topology,
    cfg: &SimConfig,
    spec: &AggregationSpec,
    secrets: &BTreeMap<NodeId, u64>,
    keys: &BTreeMap<NodeId, KeyTable>,
    seq_no: u32,
) -> Result<AggregateResult, LipiError> {
    cfg.validate(topo)?;
    let participants = keyed_group(keys);
    if participants.is_empty() {
        return Err(LipiError::NoParticipants);
    }
    if let Some(&n) = participants.iter().find(|n| !secrets.contains_key(n)) {
        return Err(LipiError::MissingSecret(n));
    }
    let initiator = cfg.initiator;
    let salt = seq_no;
    let mut machine = PhaseMachine {
        current: RoundPhase::SyncFlood,
    };
    let mut result = AggregateResult::new(Protocol::Lipi, seq_no, initiator, participants.clone());

    let sync = glossy_flood(topo, cfg, Stage::PreShare, initiator, salt)?;
    result.add_phase(PhaseLabel::SyncFlood, &sync);
    result.trace.push(
        PhaseLabel::SyncFlood,
        vec![Payload::Sync {
            participants: participants.iter().copied().collect(),
            seq_no,
        }],
        sync.delivery.clone(),
    );
    if !participants.contains(&initiator) || cfg.dead_in(Stage::PreShare).contains(&initiator) {
        result.status = RoundStatus::InitiatorFailed;
        return Ok(result);
    }
    let mut synced: BTreeSet<NodeId> = sync.delivery.keys().copied().collect();
    synced.insert(initiator);

    let mut noises = BTreeMap::new();
    for &p in &participants {
        noises.insert(
            p,
            NoiseVector::derive(spec, p, &keys[&p].pairwise, &participants, seq_no)?,
        );
    }
    let share_dead = cfg.dead_in(Stage::Share);
    let mut entries = BTreeMap::new();
    for &p in participants
        .iter()
        .filter(|p| synced.contains(p) && !share_dead.contains(p))
    {
        entries.insert(p, mask(spec, secrets[&p], &noises[&p])?);
    }

    machine.advance(RoundPhase::Share1)?;
    let chain = ChainSpec::new(Stage::Share, &participants).salt(salt);
    let share1 = minicast_with(topo, cfg, &chain, &entries)?;
    result.add_phase(PhaseLabel::Share1, &share1.metrics);
    result.trace.push(
        PhaseLabel::Share1,
        entries.values().map(|m| Payload::Masked(*m)).collect(),
        share1.metrics.delivery.clone(),
    );

    let post_dead = cfg.dead_in(Stage::PostShare);
    if post_dead.contains(&initiator) {
        result.status = RoundStatus::InitiatorFailed;
        return Ok(result);
    }
    let reporters: Vec<NodeId> = participants
        .iter()
        .filter(|p| !post_dead.contains(p))
        .copied()
        .collect();
    let empty = BTreeMap::new();
    let vector_of = |received: &BTreeMap<NodeId, BTreeMap<NodeId, MaskedValue>>, n: NodeId| {
        received.get(&n).cloned().unwrap_or_else(|| empty.clone())
    };
    let missing = detect_missing(&vector_of(&share1.received, initiator), &participants);
    let all_complete = reporters
        .iter()
        .all(|&n| vector_of(&share1.received, n).len() == participants.len());
    if missing.is_empty() && all_complete {
        machine.advance(RoundPhase::Done)?;
        for &n in &reporters {
            let agg = demask_vector(spec, &vector_of(&share1.received, n), participants.len())?;
            result.aggregates.insert(n, agg);
        }
        result.contributors = participants;
        return Ok(result);
    }

    machine.advance(RoundPhase::MissingFlood)?;
    result.recovery_used = true;
    let flood = glossy_flood(topo, cfg, Stage::PostShare, initiator, salt)?;
    result.add_phase(PhaseLabel::MissingFlood, &flood);
    result.trace.push(
        PhaseLabel::MissingFlood,
        vec![Payload::MissingList {
            nodes: missing.iter().copied().collect(),
        }],
        flood.delivery.clone(),
    );
    let mut told: BTreeSet<NodeId> = flood.delivery.keys().copied().collect();
    told.insert(initiator);

    machine.advance(RoundPhase::Share2Recovery)?;
    let remaining: BTreeSet<NodeId> = participants.difference(&missing).copied().collect();
    let mut entries2 = BTreeMap::new();
    for &p in remaining
        .iter()
        .filter(|p| told.contains(p) && !post_dead.contains(p))
    {
        entries2.insert(p, recompute_mask(spec, secrets[&p], &noises[&p], &missing)?);
    }
    let chain = ChainSpec::new(Stage::PostShare, &remaining).salt(salt);
    let share2 = minicast_with(topo, cfg, &chain, &entries2)?;
    result.add_phase(PhaseLabel::Share2Recovery, &share2.metrics);
    result.trace.push(
        PhaseLabel::Share2Recovery,
        entries2.values().map(|m| Payload::Masked(*m)).collect(),
        share2.metrics.delivery.clone(),
    );

    machine.advance(RoundPhase::Done)?;
    let mut failed = Vec::new();
    for n in remaining.iter().copied().filter(|n| !post_dead.contains(n)) {
        let vector = vector_of(&share2.received, n);
        if vector.len() == remaining.len() {
            result
                .aggregates
                .insert(n, demask_vector(spec, &vector, remaining.len())?);
        } else {
            failed.push(n);
        }
    }
    result.contributors = remaining;
    if !failed.is_empty() {
        result.status = RoundStatus::RecoveryFailed { nodes: failed };
    }
    Ok(result)
}

/// Schedule for a run of consecutive rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPlan {
    pub num_rounds: u32,
    pub refresh: RefreshPolicy,
    pub params: ModParams,
    pub first_seq_no: u32,
    /// Nodes that only appear from the given round (0-based) on.
    #[serde(default)]
    pub joins: BTreeMap<NodeId, u32>,
}

impl PeriodicPlan {
    pub fn new(num_rounds: u32) -> Self {
        PeriodicPlan {
            num_rounds,
            refresh: RefreshPolicy::default(),
            params: ModParams::default(),
            first_seq_no: 0,
            joins: BTreeMap::new(),
        }
    }
}

/// One round of a periodic run.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicRound {
    pub round: u32,
    /// Cost of key establishment, when it ran before this round.
    pub key_setup: Option<NetMetrics>,
    /// The aggregation round on its own.
    pub result: AggregateResult,
    /// Key establishment (if any) followed by the round.
    pub total: NetMetrics,
}

/// Runs `plan.num_rounds` rounds, re-running key establishment when due.
///
/// The broadcasts of key establishment are placed at the front of the
/// trace of the round they precede.
pub fn run_periodic(
    topo: &Topology,
    cfg: &SimConfig,
    spec: &AggregationSpec,
    secrets: &BTreeMap<NodeId, u64>,
    plan: &PeriodicPlan,
) -> Result<Vec<PeriodicRound>, LipiError> {
    if plan.num_rounds == 0 {
        return Err(LipiError::NoRounds);
    }
    let mut keys: Option<BTreeMap<NodeId, KeyTable>> = None;
    let mut keyed_members = BTreeSet::new();
    let mut since_refresh = 0;
    let mut rounds = Vec::with_capacity(plan.num_rounds as usize);
    for round in 0..plan.num_rounds {
        let absent: BTreeSet<NodeId> = plan
            .joins
            .iter()
            .filter(|(_, &from)| from > round)
            .map(|(&n, _)| n)
            .collect();
        let mut round_cfg = cfg.clone();
        round_cfg.failure_plan.retain(|e| !absent.contains(&e.node));
        round_cfg.failure_plan.extend(
            absent
                .iter()
                .map(|&n| FailureEvent::new(n, FailurePhase::BeforeDfke)),
        );
        let present: BTreeSet<NodeId> = topo.nodes().filter(|n| !absent.contains(n)).collect();

        let changed = keys.is_some() && present != keyed_members;
        let mut setup = None;
        if keys.is_none() || key_refresh_due(since_refresh, &plan.refresh, changed) {
            let epoch_seed = keyed_rand(SeedMaterial::new(cfg.rng_seed, round, TAG_EPOCH));
            let out = dfke_round(topo, &round_cfg, plan.params, epoch_seed)?;
            keys = Some(out.tables.clone());
            keyed_members = present;
            since_refresh = 0;
            setup = Some(out);
        }
        let seq_no = plan.first_seq_no.wrapping_add(round);
        let mut result = lipi_round(
            topo,
            &round_cfg,
            spec,
            secrets,
            keys.as_ref().unwrap(),
            seq_no,
        )?;
        let mut total = NetMetrics::default();
        let key_setup = setup.map(|out| {
            let mut trace = out.trace;
            trace.append(&mut result.trace.phases);
            result.trace.phases = trace;
            total.accumulate(&out.metrics);
            out.metrics
        });
        total.accumulate(&result.metrics);
        since_refresh += 1;
        rounds.push(PeriodicRound {
            round,
            key_setup,
            result,
            total,
        });
    }
    Ok(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggspec::{plain_aggregate, Aggregate};
    use crate::dfke::dfke_round;
    use proptest::prelude::*;

    fn setup(topo: &Topology, cfg: &SimConfig) -> BTreeMap<NodeId, KeyTable> {
        dfke_round(topo, cfg, ModParams::default(), cfg.rng_seed)
            .unwrap()
            .tables
    }

    fn ids(n: u32) -> BTreeMap<NodeId, u64> {
        (1..=n).map(|i| (i, i as u64)).collect()
    }

    #[test]
    fn transitions() {
        use RoundPhase::*;
        assert!(SyncFlood.can_advance_to(Share1));
        assert!(Share1.can_advance_to(Done));
        assert!(!SyncFlood.can_advance_to(Done));
        assert!(!Share2Recovery.can_advance_to(MissingFlood));
        assert!(!Done.can_advance_to(SyncFlood));
    }

    #[test]
    fn sums_of_ids() {
        for (n, expected) in [(24, 300), (31, 496)] {
            let topo = Topology::random_geometric_connected(n, 300.0, 100.0, 1, 1000).unwrap();
            let cfg = SimConfig::full_outreach(&topo, 1);
            let keys = setup(&topo, &cfg);
            let res = lipi_round(&topo, &cfg, &AggregationSpec::sum(), &ids(n), &keys, 0).unwrap();
            assert!(!res.recovery_used);
            assert_eq!(res.aggregates.len(), n as usize);
            assert_eq!(res.agreed(), Some(Aggregate::Sum { total: expected }));
            assert_eq!(res.communication_rounds(), 1);
        }
    }

    #[test]
    fn silent_node_triggers_recovery() {
        let topo = Topology::complete(3);
        let cfg = SimConfig::default()
            .with_failures(vec![FailureEvent::new(3, FailurePhase::AfterDfkeSilent)]);
        let keys = setup(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = [(1, 40), (2, 2), (3, 1000)].into();
        let res = lipi_round(&topo, &cfg, &AggregationSpec::sum(), &secrets, &keys, 5).unwrap();
        assert!(res.recovery_used);
        assert_eq!(res.contributors, [1, 2].into());
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 42 }));
        assert_eq!(res.communication_rounds(), 2);
    }

    #[test]
    fn missing_detection() {
        let expected: BTreeSet<NodeId> = [1, 2, 3].into();
        let full: BTreeMap<NodeId, ()> = [(1, ()), (2, ()), (3, ())].into();
        assert!(detect_missing(&full, &expected).is_empty());
        let partial: BTreeMap<NodeId, ()> = [(1, ()), (2, ())].into();
        assert_eq!(detect_missing(&partial, &expected), [3].into());
    }

    #[test]
    fn relayed_mid_share_value_survives() {
        let topo = Topology::ring(5);
        let mut cfg = SimConfig::full_outreach(&topo, 2);
        cfg.ntx += 1;
        let cfg = cfg.with_failures(vec![FailureEvent::new(
            3,
            FailurePhase::MidShare { after_k: 1 },
        )]);
        let keys = setup(&topo, &cfg);
        let res = lipi_round(&topo, &cfg, &AggregationSpec::sum(), &ids(5), &keys, 0).unwrap();
        assert!(!res.recovery_used);
        assert!(!res.aggregates.contains_key(&3));
        assert_eq!(res.contributors.len(), 5);
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 15 }));
    }

    #[test]
    fn initiator_failure_aborts() {
        let topo = Topology::complete(4);
        let cfg = SimConfig::default();
        let keys = setup(&topo, &cfg);
        let cfg = cfg.with_failures(vec![FailureEvent::new(1, FailurePhase::AfterDfkeSilent)]);
        let res = lipi_round(&topo, &cfg, &AggregationSpec::sum(), &ids(4), &keys, 0).unwrap();
        assert_eq!(res.status, RoundStatus::InitiatorFailed);
        assert!(res.aggregates.is_empty());
    }

    #[test]
    fn single_failure_roughly_doubles_latency() {
        let topo = Topology::random_geometric_connected(20, 250.0, 100.0, 4, 1000).unwrap();
        let base = SimConfig::full_outreach(&topo, 4);
        let keys = setup(&topo, &base);
        let victim = 20;
        let mut within = topo.node_set();
        within.remove(&victim);
        if !topo.is_connected_within(&within) {
            return;
        }
        let failing = base.clone().with_failures(vec![FailureEvent::new(
            victim,
            FailurePhase::AfterDfkeSilent,
        )]);
        let ok = lipi_round(&topo, &base, &AggregationSpec::sum(), &ids(20), &keys, 0).unwrap();
        let rec = lipi_round(&topo, &failing, &AggregationSpec::sum(), &ids(20), &keys, 0).unwrap();
        assert!(rec.recovery_used);
        for n in rec.aggregates.keys() {
            let ratio = rec.metrics.latency_of(*n) as f64 / ok.metrics.latency_of(*n) as f64;
            assert!((1.8..=2.2).contains(&ratio), "node {n}: ratio {ratio}");
        }
    }

    #[test]
    fn periodic_rounds_refresh_and_join() {
        let topo = Topology::complete(5);
        let cfg = SimConfig::default();
        let secrets = ids(5);
        let mut plan = PeriodicPlan::new(3);
        plan.joins.insert(5, 2);
        let out = run_periodic(&topo, &cfg, &AggregationSpec::sum(), &secrets, &plan).unwrap();
        let totals: Vec<u64> = out
            .iter()
            .map(|r| r.result.agreed().unwrap().exact().unwrap())
            .collect();
        assert_eq!(totals, vec![10, 10, 15]);
        let seqs: Vec<u32> = out.iter().map(|r| r.result.seq_no).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        let refreshed: Vec<bool> = out.iter().map(|r| r.key_setup.is_some()).collect();
        assert_eq!(refreshed, vec![true, false, true]);
        assert!(out[0].total.duration > out[0].result.metrics.duration);
        assert_eq!(out[1].total, out[1].result.metrics);
        assert_eq!(out[0].result.trace.phases[0].label, PhaseLabel::DfkeParams);
        assert_ne!(
            out[0].result.trace.final_masked()[&1],
            out[1].result.trace.final_masked()[&1]
        );

        plan.joins.clear();
        plan.refresh.threshold = 1;
        let out = run_periodic(&topo, &cfg, &AggregationSpec::sum(), &secrets, &plan).unwrap();
        assert!(out
            .iter()
            .all(|r| r.key_setup.is_some() && r.total.duration > r.result.metrics.duration));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn survivors_agree_on_plain_aggregate(
            seed in 0u64..1000,
            n in 4u32..12,
            silent in proptest::collection::btree_set(2u32..12, 0..3),
            family in 0usize..3,
        ) {
            let silent: BTreeSet<NodeId> = silent.into_iter().filter(|&s| s <= n && s as usize <= n as usize - 2).collect();
            let topo = Topology::complete(n);
            let plan: Vec<FailureEvent> = silent.iter().map(|&s| FailureEvent::new(s, FailurePhase::AfterDfkeSilent)).collect();
            let cfg = SimConfig { rng_seed: seed, ..SimConfig::default() }.with_failures(plan);
            let spec = match family {
                0 => AggregationSpec::sum(),
                1 => AggregationSpec::am(),
                _ => AggregationSpec::gm(crate::aggspec::DEFAULT_GM_MODULUS).unwrap(),
            };
            let secrets: BTreeMap<NodeId, u64> = (1..=n)
                .map(|i| (i, 1 + keyed_rand(SeedMaterial::new(seed, i, 1)) % 1_000_000))
                .collect();
            let keys = setup(&topo, &cfg);
            let res = lipi_round(&topo, &cfg, &spec, &secrets, &keys, seed as u32).unwrap();
            prop_assert!(res.is_completed());
            prop_assert_eq!(res.recovery_used, !silent.is_empty());
            let survivors: Vec<u64> = secrets.iter().filter(|(i, _)| !silent.contains(i)).map(|(_, &s)| s).collect();
            prop_assert_eq!(res.agreed(), Some(plain_aggregate(&spec, &survivors).unwrap()));
            let trace_values: BTreeSet<u64> = res.trace.all_values().collect();
            prop_assert!(secrets.values().all(|s| !trace_values.contains(s)));
        }
    }
}
