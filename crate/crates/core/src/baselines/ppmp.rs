use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{check_secrets, round_participants, sync_phase, BaselineError};
use crate::aggspec::Aggregate;
use crate::modmath::{
    find_generator, is_prime, keyed_rand, mod_inv, mod_pow, mul_mod, ModError, SeedMaterial,
    MAX_DEMO_PRIME,
};
use crate::outcome::{AggregateResult, Protocol, RoundStatus};
use crate::stnet::{minicast_with, ChainSpec, SimConfig, Stage, Topology};
use crate::trace::{Payload, PhaseLabel};
use crate::NodeId;

pub const DEFAULT_PPMP_PRIME: u64 = 2_147_483_647;

const TAG_RING_EXP: u8 = 0x61;

/// Group for the multiplicative masks: units modulo `p_enc^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PpmpParams {
    pub p_enc: u64,
    pub modulus: u64,
    /// Generator of the unit group mod `p_enc^2`.
    pub g_ring: u64,
}

impl PpmpParams {
    pub fn new(p_enc: u64) -> Result<Self, BaselineError> {
        if p_enc > MAX_DEMO_PRIME {
            return Err(ModError::PrimeTooLarge(p_enc).into());
        }
        if p_enc < 3 || !is_prime(p_enc) {
            return Err(ModError::NotPrime(p_enc).into());
        }
        let modulus = p_enc * p_enc;
        // A primitive root mod p lifts to one mod p^2 unless g^(p-1) = 1 there,
        // in which case g + p does.
        let mut g = find_generator(p_enc)?;
        if mod_pow(g, p_enc - 1, modulus)? == 1 {
            g += p_enc;
        }
        Ok(PpmpParams {
            p_enc,
            modulus,
            g_ring: g,
        })
    }

    fn group_order(&self) -> u64 {
        self.p_enc * (self.p_enc - 1)
    }
}

impl Default for PpmpParams {
    fn default() -> Self {
        PpmpParams::new(DEFAULT_PPMP_PRIME).expect("default prime is valid")
    }
}

/// Predecessor and successor of `node` when `ring` is closed into a cycle.
pub fn ring_neighbors(ring: &[NodeId], node: NodeId) -> Option<(NodeId, NodeId)> {
    let pos = ring.iter().position(|&n| n == node)?;
    let n = ring.len();
    Some((ring[(pos + n - 1) % n], ring[(pos + 1) % n]))
}

/// Private ring exponents `r_i`, fixed by `rng_seed`.
pub fn ppmp_exponents(
    participants: &BTreeSet<NodeId>,
    params: &PpmpParams,
    rng_seed: u64,
) -> BTreeMap<NodeId, u64> {
    participants
        .iter()
        .map(|&n| {
            let r = 1 + keyed_rand(SeedMaterial::new(rng_seed, n, TAG_RING_EXP))
                % (params.group_order() - 1);
            (n, r)
        })
        .collect()
}

/// `R_i = (g^{r_next} / g^{r_prev})^{r_i} mod p^2`.
pub fn ppmp_ring_factor(
    params: &PpmpParams,
    r_i: u64,
    key_prev: u64,
    key_next: u64,
) -> Result<u64, BaselineError> {
    let m = params.modulus;
    let ratio = mul_mod(key_next, mod_inv(key_prev, m)?, m);
    Ok(mod_pow(ratio, r_i, m)?)
}

/// `C_i = (1 + x_i p) R_i mod p^2`.
pub fn ppmp_cipher(params: &PpmpParams, x: u64, ring_factor: u64) -> u64 {
    let m = params.modulus;
    let lifted = (1 + mul_mod(x, params.p_enc, m)) % m;
    mul_mod(lifted, ring_factor, m)
}

fn recover_sum(params: &PpmpParams, ciphers: impl Iterator<Item = u64>) -> u64 {
    let m = params.modulus;
    let product = ciphers.fold(1, |acc, c| mul_mod(acc, c, m));
    (product + m - 1) % m / params.p_enc
}

/// A PPMP round: a MiniCast of ring keys, then a MiniCast of ciphertexts.
pub fn ppmp_round(
    topo: &Topology,
    cfg: &SimConfig,
    secrets: &BTreeMap<NodeId, u64>,
    params: &PpmpParams,
    rng_seed: u64,
    seq_no: u32,
) -> Result<AggregateResult, BaselineError> {
    cfg.validate(topo)?;
    let participants = round_participants(topo, cfg);
    if participants.is_empty() {
        return Err(BaselineError::NoParticipants);
    }
    check_secrets(&participants, secrets, params.p_enc)?;
    let mut result =
        AggregateResult::new(Protocol::Ppmp, seq_no, cfg.initiator, participants.clone());
    let salt = seq_no;
    let Some(synced) = sync_phase(topo, cfg, &mut result, salt)? else {
        return Ok(result);
    };

    let ring: Vec<NodeId> = participants.iter().copied().collect();
    let exps = ppmp_exponents(&participants, params, rng_seed);
    let pre_dead = cfg.dead_in(Stage::PreShare);
    let mut ring_keys = BTreeMap::new();
    for &n in participants
        .iter()
        .filter(|n| synced.contains(n) && !pre_dead.contains(n))
    {
        ring_keys.insert(n, mod_pow(params.g_ring, exps[&n], params.modulus)?);
    }
    let chain = ChainSpec::new(Stage::PreShare, &participants).salt(salt);
    let exchange = minicast_with(topo, cfg, &chain, &ring_keys)?;
    result.add_phase(PhaseLabel::PpmpKeyExchange, &exchange.metrics);
    result.trace.push(
        PhaseLabel::PpmpKeyExchange,
        ring_keys
            .iter()
            .map(|(&owner, &value)| Payload::RingKey { owner, value })
            .collect(),
        exchange.metrics.delivery.clone(),
    );

    let share_dead = cfg.dead_in(Stage::Share);
    let mut ciphers = BTreeMap::new();
    for &n in ring_keys.keys().filter(|n| !share_dead.contains(n)) {
        let (prev, next) = ring_neighbors(&ring, n).expect("participant is on the ring");
        let heard = exchange.received.get(&n);
        let (Some(&kp), Some(&kn)) = (
            heard.and_then(|h| h.get(&prev)),
            heard.and_then(|h| h.get(&next)),
        ) else {
            continue;
        };
        let factor = ppmp_ring_factor(params, exps[&n], kp, kn)?;
        ciphers.insert(n, ppmp_cipher(params, secrets[&n], factor));
    }
    let chain = ChainSpec::new(Stage::Share, &participants).salt(salt);
    let aggregation = minicast_with(topo, cfg, &chain, &ciphers)?;
    result.add_phase(PhaseLabel::PpmpAggregation, &aggregation.metrics);
    result.trace.push(
        PhaseLabel::PpmpAggregation,
        ciphers
            .iter()
            .map(|(&owner, &value)| Payload::RingCipher { owner, value })
            .collect(),
        aggregation.metrics.delivery.clone(),
    );

    let post_dead = cfg.dead_in(Stage::PostShare);
    let mut incomplete = Vec::new();
    for &n in participants.iter().filter(|n| !post_dead.contains(n)) {
        match aggregation.received.get(&n) {
            Some(v) if v.len() == participants.len() => {
                let total = recover_sum(params, v.values().copied());
                result.aggregates.insert(n, Aggregate::Sum { total });
            }
            _ => incomplete.push(n),
        }
    }
    result.contributors = participants.clone();
    let plain: u128 = participants.iter().map(|p| secrets[p] as u128).sum();
    if plain >= params.p_enc as u128 {
        result.status = RoundStatus::Overflow;
    } else if !incomplete.is_empty() {
        result.status = RoundStatus::Incomplete { nodes: incomplete };
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stnet::{FailureEvent, FailurePhase};
    use proptest::prelude::*;

    #[test]
    fn forced_unit_ring_factors() {
        let params = PpmpParams::new(101).unwrap();
        let product = [2u64, 3, 4]
            .iter()
            .fold(1u64, |acc, &x| acc * (1 + x * 101) % (101 * 101));
        assert_eq!(product, 910);
        assert_eq!(product, 1 + 9 * 101);
        let ciphers = [2u64, 3, 4].map(|x| ppmp_cipher(&params, x, 1));
        assert_eq!(recover_sum(&params, ciphers.into_iter()), 9);
    }

    #[test]
    fn ring_generator_has_full_order() {
        for p in [5u64, 7, 11, 13, 101] {
            let params = PpmpParams::new(p).unwrap();
            let m = p * p;
            let order = (1..=params.group_order())
                .scan(1u64, |acc, k| {
                    *acc = *acc * params.g_ring % m;
                    Some((k, *acc))
                })
                .find(|&(_, v)| v == 1)
                .map(|(k, _)| k);
            assert_eq!(order, Some(p * (p - 1)), "p = {p}");
        }
    }

    #[test]
    fn ring_wraps() {
        let ring = [2, 5, 9];
        assert_eq!(ring_neighbors(&ring, 2), Some((9, 5)));
        assert_eq!(ring_neighbors(&ring, 9), Some((5, 2)));
        assert_eq!(ring_neighbors(&ring, 4), None);
    }

    #[test]
    fn three_node_round() {
        let topo = Topology::complete(3);
        let params = PpmpParams::default();
        let secrets: BTreeMap<NodeId, u64> = [(1, 11), (2, 22), (3, 33)].into();
        let res = ppmp_round(&topo, &SimConfig::default(), &secrets, &params, 9, 0).unwrap();
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 66 }));
        assert_eq!(res.communication_rounds(), 2);
    }

    #[test]
    fn overflow_is_flagged() {
        let topo = Topology::complete(3);
        let params = PpmpParams::new(101).unwrap();
        let secrets: BTreeMap<NodeId, u64> = [(1, 50), (2, 50), (3, 50)].into();
        let res = ppmp_round(&topo, &SimConfig::default(), &secrets, &params, 9, 0).unwrap();
        assert_eq!(res.status, RoundStatus::Overflow);
        let too_big: BTreeMap<NodeId, u64> = [(1, 101), (2, 0), (3, 0)].into();
        assert!(matches!(
            ppmp_round(&topo, &SimConfig::default(), &too_big, &params, 9, 0),
            Err(BaselineError::SecretOutOfRange { node: 1, .. })
        ));
    }

    #[test]
    fn silent_node_leaves_round_incomplete() {
        let topo = Topology::complete(4);
        let cfg = SimConfig::default()
            .with_failures(vec![FailureEvent::new(4, FailurePhase::AfterDfkeSilent)]);
        let secrets: BTreeMap<NodeId, u64> = (1..=4).map(|i| (i, i as u64)).collect();
        let res = ppmp_round(&topo, &cfg, &secrets, &PpmpParams::default(), 1, 0).unwrap();
        assert!(matches!(res.status, RoundStatus::Incomplete { .. }));
    }

    proptest! {
        #[test]
        fn ring_factors_telescope(n in 3usize..17, seed in any::<u64>()) {
            let params = PpmpParams::default();
            let members: BTreeSet<NodeId> = (1..=n as NodeId).collect();
            let ring: Vec<NodeId> = members.iter().copied().collect();
            let exps = ppmp_exponents(&members, &params, seed);
            let keys: BTreeMap<NodeId, u64> = exps
                .iter()
                .map(|(&k, &r)| (k, mod_pow(params.g_ring, r, params.modulus).unwrap()))
                .collect();
            let product = ring.iter().fold(1u64, |acc, &i| {
                let (prev, next) = ring_neighbors(&ring, i).unwrap();
                let f = ppmp_ring_factor(&params, exps[&i], keys[&prev], keys[&next]).unwrap();
                mul_mod(acc, f, params.modulus)
            });
            prop_assert_eq!(product, 1);
        }
    }
}
