use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_secrets, lagrange_at_zero, lagrange_weights, sync_phase, BaselineError};
use crate::aggspec::Aggregate;
use crate::dfke::{keyed_group, KeyTable};
use crate::modmath::{is_prime, keyed_rand, mul_mod, ModError, SeedMaterial};
use crate::outcome::{AggregateResult, Protocol, RoundStatus};
use crate::stnet::{minicast_with, ChainSpec, SimConfig, Stage, Topology};
use crate::trace::{Payload, PhaseLabel};
use crate::NodeId;

pub const DEFAULT_SSS_FIELD: u64 = (1 << 61) - 1;

const TAG_POLY: u8 = 0x71;
const TAG_SEAL_UP: u8 = 0x72;
const TAG_SEAL_DOWN: u8 = 0x73;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingParams {
    pub field_prime: u64,
    /// Polynomial degree; `None` picks the largest one the share sets allow.
    pub degree: Option<u32>,
    pub seq_no: u32,
}

impl Default for SharingParams {
    fn default() -> Self {
        SharingParams {
            field_prime: DEFAULT_SSS_FIELD,
            degree: None,
            seq_no: 0,
        }
    }
}

/// A dealer's polynomial over `F_q`, lowest coefficient first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Polynomial {
    pub coeffs: Vec<u64>,
    pub q: u64,
}

impl Polynomial {
    pub fn random(secret: u64, degree: u32, q: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = vec![secret % q];
        coeffs.extend((0..degree).map(|_| rng.gen_range(0..q)));
        Polynomial { coeffs, q }
    }

    pub fn eval(&self, x: u64) -> u64 {
        let x = x % self.q;
        self.coeffs
            .iter()
            .rev()
            .fold(0, |acc, &c| (mul_mod(acc, x, self.q) + c) % self.q)
    }
}

/// XORs a share with a keystream bound to the pair key, round and direction.
pub fn seal_share(key: u64, seq_no: u32, dealer: NodeId, recipient: NodeId, share: u64) -> u64 {
    let tag = if dealer < recipient {
        TAG_SEAL_UP
    } else {
        TAG_SEAL_DOWN
    };
    share ^ keyed_rand(SeedMaterial::new(key, seq_no, tag))
}

pub fn open_share(
    key: u64,
    seq_no: u32,
    dealer: NodeId,
    recipient: NodeId,
    ciphertext: u64,
) -> u64 {
    seal_share(key, seq_no, dealer, recipient, ciphertext)
}

/// One dealer's encrypted shares, keyed by recipient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SssShareSet {
    pub dealer: NodeId,
    pub degree: u32,
    pub shares: BTreeMap<NodeId, u64>,
}

impl SssShareSet {
    pub fn deal(
        poly: &Polynomial,
        keys: &KeyTable,
        recipients: &BTreeSet<NodeId>,
        seq_no: u32,
    ) -> Result<Self, BaselineError> {
        let dealer = keys.owner;
        let mut shares = BTreeMap::new();
        for &r in recipients.iter().filter(|&&r| r != dealer) {
            let key = *keys.pairwise.get(&r).ok_or(BaselineError::MissingKey {
                owner: dealer,
                peer: r,
            })?;
            shares.insert(r, seal_share(key, seq_no, dealer, r, poly.eval(r as u64)));
        }
        Ok(SssShareSet {
            dealer,
            degree: poly.coeffs.len() as u32 - 1,
            shares,
        })
    }
}

/// Participants within `hop_limit` hops of each participant, itself excluded.
pub fn share_neighborhoods(
    topo: &Topology,
    participants: &BTreeSet<NodeId>,
    hop_limit: u32,
) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    let everyone = topo.node_set();
    participants
        .iter()
        .map(|&p| {
            let near = topo
                .hop_distances(p, &everyone)
                .into_iter()
                .filter(|&(n, d)| n != p && d <= hop_limit && participants.contains(&n))
                .map(|(n, _)| n)
                .collect();
            (p, near)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Reach {
    Everyone,
    Hops(u32),
}

fn sharing_round(
    topo: &Topology,
    cfg: &SimConfig,
    secrets: &BTreeMap<NodeId, u64>,
    keys: &BTreeMap<NodeId, KeyTable>,
    params: &SharingParams,
    reach: Reach,
) -> Result<AggregateResult, BaselineError> {
    cfg.validate(topo)?;
    let q = params.field_prime;
    if q >= 1 << 63 || !is_prime(q) {
        return Err(ModError::NotPrime(q).into());
    }
    let participants = keyed_group(keys);
    let Some(&max_id) = participants.last() else {
        return Err(BaselineError::NoParticipants);
    };
    if q <= max_id as u64 {
        return Err(BaselineError::FieldTooSmall {
            q,
            need: max_id as u64,
        });
    }
    check_secrets(&participants, secrets, q)?;

    let (protocol, neighborhoods) = match reach {
        Reach::Everyone => (
            Protocol::Sss,
            participants
                .iter()
                .map(|&p| {
                    (
                        p,
                        participants.iter().copied().filter(|&o| o != p).collect(),
                    )
                })
                .collect::<BTreeMap<NodeId, BTreeSet<NodeId>>>(),
        ),
        Reach::Hops(h) => (Protocol::Nsss, share_neighborhoods(topo, &participants, h)),
    };
    let smallest = neighborhoods.values().map(BTreeSet::len).min().unwrap_or(0) as u32;
    let degree = params.degree.unwrap_or(smallest);
    match reach {
        Reach::Everyone if degree > smallest => {
            return Err(BaselineError::Degree {
                degree,
                max: smallest,
            });
        }
        Reach::Hops(_) => {
            let deficient: Vec<NodeId> = neighborhoods
                .iter()
                .filter(|(_, e)| (e.len() as u32) < degree)
                .map(|(&p, _)| p)
                .collect();
            if !deficient.is_empty() {
                return Err(BaselineError::DeficientNeighborhood {
                    nodes: deficient,
                    degree,
                });
            }
        }
        _ => {}
    }

    let seq_no = params.seq_no;
    let mut result = AggregateResult::new(protocol, seq_no, cfg.initiator, participants.clone());
    let Some(synced) = sync_phase(topo, cfg, &mut result, seq_no)? else {
        return Ok(result);
    };

    // Per-dealer weights so that summing the published values yields the
    // total; a full share set instead publishes raw sums for interpolation.
    let mut weights: BTreeMap<NodeId, BTreeMap<NodeId, u64>> = BTreeMap::new();
    if let Reach::Hops(_) = reach {
        for (&dealer, near) in &neighborhoods {
            let mut points = near.clone();
            points.insert(dealer);
            let ys: Vec<u64> = points.iter().map(|&p| p as u64).collect();
            let w = lagrange_weights(&ys, q)?;
            weights.insert(dealer, points.into_iter().zip(w).collect());
        }
    }
    let weight = |dealer: NodeId, holder: NodeId| weights.get(&dealer).map_or(1, |w| w[&holder]);

    let polys: BTreeMap<NodeId, Polynomial> = participants
        .iter()
        .map(|&d| {
            let seed = keyed_rand(SeedMaterial::new(
                keyed_rand(SeedMaterial::new(cfg.rng_seed, d, TAG_POLY)),
                seq_no,
                TAG_POLY,
            ));
            (d, Polynomial::random(secrets[&d], degree, q, seed))
        })
        .collect();

    let share_dead = cfg.dead_in(Stage::Share);
    let mut deals = BTreeMap::new();
    for &d in participants
        .iter()
        .filter(|d| synced.contains(d) && !share_dead.contains(d))
    {
        deals.insert(
            d,
            SssShareSet::deal(&polys[&d], &keys[&d], &neighborhoods[&d], seq_no)?,
        );
    }
    let sub_slots: BTreeMap<NodeId, u32> = neighborhoods
        .iter()
        .map(|(&p, e)| (p, (e.len() as u32).max(1)))
        .collect();
    let mut chain = ChainSpec::new(Stage::Share, &participants)
        .sub_slots(&sub_slots)
        .salt(seq_no);
    if let Reach::Hops(h) = reach {
        chain = chain.hop_limit(h);
    }
    let shared = minicast_with(topo, cfg, &chain, &deals)?;
    result.add_phase(PhaseLabel::SssShare, &shared.metrics);
    result.trace.push(
        PhaseLabel::SssShare,
        deals
            .values()
            .flat_map(|set| {
                set.shares
                    .iter()
                    .map(|(&recipient, &ciphertext)| Payload::SealedShare {
                        dealer: set.dealer,
                        recipient,
                        ciphertext,
                    })
            })
            .collect(),
        shared.metrics.delivery.clone(),
    );

    let post_dead = cfg.dead_in(Stage::PostShare);
    let mut share_sums = BTreeMap::new();
    'holders: for &j in participants.iter().filter(|j| !post_dead.contains(j)) {
        let mut k = mul_mod(weight(j, j), polys[&j].eval(j as u64), q);
        let heard = shared.received.get(&j);
        for (&dealer, near) in &neighborhoods {
            if dealer == j || !near.contains(&j) {
                continue;
            }
            let Some(set) = heard.and_then(|h| h.get(&dealer)) else {
                continue 'holders;
            };
            let key = keys[&j]
                .pairwise
                .get(&dealer)
                .ok_or(BaselineError::MissingKey {
                    owner: j,
                    peer: dealer,
                })?;
            let share = open_share(*key, seq_no, dealer, j, set.shares[&j]) % q;
            k = (k + mul_mod(weight(dealer, j), share, q)) % q;
        }
        share_sums.insert(j, k);
    }

    let chain = ChainSpec::new(Stage::PostShare, &participants).salt(seq_no);
    let rebuilt = minicast_with(topo, cfg, &chain, &share_sums)?;
    result.add_phase(PhaseLabel::SssReconstruction, &rebuilt.metrics);
    result.trace.push(
        PhaseLabel::SssReconstruction,
        share_sums
            .iter()
            .map(|(&owner, &value)| Payload::ShareSum { owner, value })
            .collect(),
        rebuilt.metrics.delivery.clone(),
    );

    let mut incomplete = Vec::new();
    for &n in participants.iter().filter(|n| !post_dead.contains(n)) {
        let got = rebuilt.received.get(&n).cloned().unwrap_or_default();
        let total = match reach {
            Reach::Everyone if got.len() > degree as usize => {
                let points: Vec<(u64, u64)> = got.iter().map(|(&y, &v)| (y as u64, v)).collect();
                Some(lagrange_at_zero(&points, q)?)
            }
            Reach::Hops(_) if got.len() == participants.len() => {
                Some(got.values().fold(0, |acc, &v| (acc + v) % q))
            }
            _ => None,
        };
        match total {
            Some(total) => {
                result.aggregates.insert(n, Aggregate::Sum { total });
            }
            None => incomplete.push(n),
        }
    }
    result.contributors = participants.clone();
    let plain: u128 = participants.iter().map(|p| secrets[p] as u128).sum();
    if plain >= q as u128 {
        result.status = RoundStatus::Overflow;
    } else if !incomplete.is_empty() {
        result.status = RoundStatus::Incomplete { nodes: incomplete };
    }
    Ok(result)
}

/// Shamir sharing with every participant as a share holder.
pub fn sss_round(
    topo: &Topology,
    cfg: &SimConfig,
    secrets: &BTreeMap<NodeId, u64>,
    keys: &BTreeMap<NodeId, KeyTable>,
    params: &SharingParams,
) -> Result<AggregateResult, BaselineError> {
    sharing_round(topo, cfg, secrets, keys, params, Reach::Everyone)
}

/// Shamir sharing restricted to each dealer's `hop_limit`-hop neighborhood.
pub fn nsss_round(
    topo: &Topology,
    cfg: &SimConfig,
    secrets: &BTreeMap<NodeId, u64>,
    keys: &BTreeMap<NodeId, KeyTable>,
    params: &SharingParams,
    hop_limit: u32,
) -> Result<AggregateResult, BaselineError> {
    if hop_limit == 0 {
        return Err(BaselineError::DeficientNeighborhood {
            nodes: keys.keys().copied().collect(),
            degree: params.degree.unwrap_or(1),
        });
    }
    sharing_round(topo, cfg, secrets, keys, params, Reach::Hops(hop_limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfke::dfke_round;
    use crate::modmath::ModParams;

    fn keys_for(topo: &Topology, cfg: &SimConfig) -> BTreeMap<NodeId, KeyTable> {
        dfke_round(topo, cfg, ModParams::default(), 11)
            .unwrap()
            .tables
    }

    /// Sum of the dealers' polynomials evaluated at 0 by brute force over F_q:
    /// the unique degree-t polynomial agreeing with the share sums.
    fn brute_force_constant(points: &[(u64, u64)], t: usize, q: u64) -> u64 {
        assert_eq!(t, 1);
        let ((y1, v1), (y2, v2)) = (points[0], points[1]);
        (0..q)
            .find(|&c| (0..q).any(|a| (c + a * y1) % q == v1 && (c + a * y2) % q == v2))
            .unwrap()
    }

    #[test]
    fn three_nodes_degree_one_small_field() {
        let topo = Topology::complete(3);
        let cfg = SimConfig::default();
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = [(1, 2), (2, 3), (3, 4)].into();
        let params = SharingParams {
            field_prime: 97,
            degree: Some(1),
            seq_no: 0,
        };
        let res = sss_round(&topo, &cfg, &secrets, &keys, &params).unwrap();
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 9 }));
        let sums: Vec<(u64, u64)> = res
            .trace
            .phase(PhaseLabel::SssReconstruction)
            .unwrap()
            .payloads
            .iter()
            .filter_map(|p| match p {
                Payload::ShareSum { owner, value } => Some((*owner as u64, *value)),
                _ => None,
            })
            .collect();
        assert_eq!(brute_force_constant(&sums, 1, 97), 9);
        assert_eq!(res.communication_rounds(), 2);
    }

    #[test]
    fn constant_polynomials() {
        let topo = Topology::complete(4);
        let cfg = SimConfig::default();
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = [(1, 5), (2, 6), (3, 7), (4, 8)].into();
        let params = SharingParams {
            degree: Some(0),
            ..SharingParams::default()
        };
        let res = sss_round(&topo, &cfg, &secrets, &keys, &params).unwrap();
        let phase = res.trace.phase(PhaseLabel::SssReconstruction).unwrap();
        assert!(phase
            .payloads
            .iter()
            .all(|p| matches!(p, Payload::ShareSum { value: 26, .. })));
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 26 }));
    }

    #[test]
    fn wrong_key_garbles_share() {
        for k in 0..200u64 {
            let key = keyed_rand(SeedMaterial::new(k, 0, 1));
            let sealed = seal_share(key, 3, 1, 2, 12345);
            assert_eq!(open_share(key, 3, 1, 2, sealed), 12345);
            assert_ne!(open_share(key ^ 1, 3, 1, 2, sealed), 12345);
            assert_ne!(seal_share(key, 3, 2, 1, 12345), sealed);
        }
    }

    #[test]
    fn nsss_on_full_reach_matches_sss() {
        let topo = Topology::random_geometric_connected(12, 200.0, 100.0, 3, 500).unwrap();
        let cfg = SimConfig::full_outreach(&topo, 3);
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = (1..=12).map(|i| (i, 1000 + i as u64)).collect();
        let params = SharingParams::default();
        let a = sss_round(&topo, &cfg, &secrets, &keys, &params).unwrap();
        let b = nsss_round(
            &topo,
            &cfg,
            &secrets,
            &keys,
            &params,
            topo.diameter().unwrap(),
        )
        .unwrap();
        assert_eq!(a.agreed(), b.agreed());
        assert_eq!(a.agreed().unwrap().exact(), Some(secrets.values().sum()));
    }

    #[test]
    fn nsss_ring_of_eight() {
        let topo = Topology::ring(8);
        let cfg = SimConfig::full_outreach(&topo, 0);
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = (1..=8).map(|i| (i, 7 * i as u64)).collect();
        let params = SharingParams {
            degree: Some(4),
            ..SharingParams::default()
        };
        let res = nsss_round(&topo, &cfg, &secrets, &keys, &params, 2).unwrap();
        assert_eq!(res.agreed(), Some(Aggregate::Sum { total: 252 }));
    }

    #[test]
    fn nsss_rejects_thin_neighborhoods() {
        let topo = Topology::ring(8);
        let cfg = SimConfig::full_outreach(&topo, 0);
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = (1..=8).map(|i| (i, 1)).collect();
        let params = SharingParams {
            degree: Some(5),
            ..SharingParams::default()
        };
        let err = nsss_round(&topo, &cfg, &secrets, &keys, &params, 1).unwrap_err();
        assert_eq!(
            err,
            BaselineError::DeficientNeighborhood {
                nodes: (1..=8).collect(),
                degree: 5
            }
        );
    }

    #[test]
    fn sss_rejects_large_degree_and_small_field() {
        let topo = Topology::complete(3);
        let cfg = SimConfig::default();
        let keys = keys_for(&topo, &cfg);
        let secrets: BTreeMap<NodeId, u64> = [(1, 1), (2, 1), (3, 1)].into();
        let params = SharingParams {
            degree: Some(3),
            ..SharingParams::default()
        };
        assert_eq!(
            sss_round(&topo, &cfg, &secrets, &keys, &params),
            Err(BaselineError::Degree { degree: 3, max: 2 })
        );
        let params = SharingParams {
            field_prime: 3,
            ..SharingParams::default()
        };
        assert!(matches!(
            sss_round(&topo, &cfg, &secrets, &keys, &params),
            Err(BaselineError::FieldTooSmall { .. })
        ));
    }
}
