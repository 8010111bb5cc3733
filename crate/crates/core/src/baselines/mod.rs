//! Reference PPDA protocols run on the same simulated network as LiPI.
//!
//! PPMP hides each reading behind ring-cancelling multiplicative keys mod
//! `p^2`. SSS and NSSS split every reading into Shamir shares over a prime
//! field; NSSS only deals shares inside a hop-limited neighborhood.

mod ppmp;
mod sss;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::modmath::{mod_inv, mul_mod, ModError};
use crate::outcome::{AggregateResult, RoundStatus};
use crate::stnet::{glossy_flood, NetError, SimConfig, Stage, Topology};
use crate::trace::{Payload, PhaseLabel};
use crate::NodeId;

pub use ppmp::{
    ppmp_cipher, ppmp_exponents, ppmp_ring_factor, ppmp_round, ring_neighbors, PpmpParams,
    DEFAULT_PPMP_PRIME,
};
pub use sss::{
    nsss_round, open_share, seal_share, share_neighborhoods, sss_round, Polynomial, SharingParams,
    SssShareSet, DEFAULT_SSS_FIELD,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mod(#[from] ModError),
    #[error("no secret for participant {0}")]
    MissingSecret(NodeId),
    #[error("node {owner} holds no key for {peer}")]
    MissingKey { owner: NodeId, peer: NodeId },
    #[error("no participants")]
    NoParticipants,
    #[error("secret {value} of node {node} must be below {bound}")]
    SecretOutOfRange {
        node: NodeId,
        value: u64,
        bound: u64,
    },
    #[error("evaluation point {0} appears twice")]
    DuplicatePoint(u64),
    #[error("evaluation point must be nonzero")]
    ZeroPoint,
    #[error("interpolation needs at least one point")]
    NoPoints,
    #[error("field prime {q} must exceed {need}")]
    FieldTooSmall { q: u64, need: u64 },
    #[error("degree {degree} needs at most {max}")]
    Degree { degree: u32, max: u32 },
    #[error("nodes {nodes:?} have fewer than {degree} neighbors within reach")]
    DeficientNeighborhood { nodes: Vec<NodeId>, degree: u32 },
}

/// Value at zero of the lowest-degree polynomial through `points` over `F_q`.
pub fn lagrange_at_zero(points: &[(u64, u64)], q: u64) -> Result<u64, BaselineError> {
    let ys: Vec<u64> = points.iter().map(|&(y, _)| y).collect();
    let weights = lagrange_weights(&ys, q)?;
    Ok(points
        .iter()
        .zip(weights)
        .fold(0, |acc, (&(_, v), w)| (acc + mul_mod(v % q, w, q)) % q))
}

/// Lagrange basis values at zero: `w_k = prod_{m != k} y_m / (y_m - y_k)`.
pub fn lagrange_weights(ys: &[u64], q: u64) -> Result<Vec<u64>, BaselineError> {
    if ys.is_empty() {
        return Err(BaselineError::NoPoints);
    }
    let mut seen = BTreeSet::new();
    for &y in ys {
        if y % q == 0 {
            return Err(BaselineError::ZeroPoint);
        }
        if !seen.insert(y % q) {
            return Err(BaselineError::DuplicatePoint(y));
        }
    }
    let mut weights = Vec::with_capacity(ys.len());
    for (k, &yk) in ys.iter().enumerate() {
        let (mut num, mut den) = (1u64, 1u64);
        for (m, &ym) in ys.iter().enumerate() {
            if m != k {
                num = mul_mod(num, ym % q, q);
                den = mul_mod(den, (ym % q + q - yk % q) % q, q);
            }
        }
        weights.push(mul_mod(num, mod_inv(den, q)?, q));
    }
    Ok(weights)
}

/// Participants of a baseline round: every node that is up for key setup.
pub(crate) fn round_participants(topo: &Topology, cfg: &SimConfig) -> BTreeSet<NodeId> {
    let dead = cfg.dead_in(Stage::KeyExchange);
    topo.nodes().filter(|n| !dead.contains(n)).collect()
}

pub(crate) fn check_secrets(
    participants: &BTreeSet<NodeId>,
    secrets: &BTreeMap<NodeId, u64>,
    bound: u64,
) -> Result<(), BaselineError> {
    for &p in participants {
        let value = *secrets.get(&p).ok_or(BaselineError::MissingSecret(p))?;
        if value >= bound {
            return Err(BaselineError::SecretOutOfRange {
                node: p,
                value,
                bound,
            });
        }
    }
    Ok(())
}

/// Runs the sync flood; returns the synced set, or `None` when the initiator is down.
pub(crate) fn sync_phase(
    topo: &Topology,
    cfg: &SimConfig,
    result: &mut AggregateResult,
    salt: u32,
) -> Result<Option<BTreeSet<NodeId>>, NetError> {
    let sync = glossy_flood(topo, cfg, Stage::PreShare, cfg.initiator, salt)?;
    result.add_phase(PhaseLabel::SyncFlood, &sync);
    result.trace.push(
        PhaseLabel::SyncFlood,
        vec![Payload::Sync {
            participants: result.participants.iter().copied().collect(),
            seq_no: result.seq_no,
        }],
        sync.delivery.clone(),
    );
    if !result.participants.contains(&cfg.initiator)
        || cfg.dead_in(Stage::PreShare).contains(&cfg.initiator)
    {
        result.status = RoundStatus::InitiatorFailed;
        return Ok(None);
    }
    let mut synced: BTreeSet<NodeId> = sync.delivery.keys().copied().collect();
    synced.insert(cfg.initiator);
    Ok(Some(synced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(coeffs: &[u64], x: u64, q: u64) -> u64 {
        coeffs.iter().rev().fold(0, |acc, &c| (acc * x + c) % q)
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(lagrange_at_zero(&[(1, 42)], 97).unwrap(), 42);
        let f = |x: u64| (3 + 2 * x) % 97;
        assert_eq!(lagrange_at_zero(&[(1, f(1)), (2, f(2))], 97).unwrap(), 3);
        assert_eq!(
            lagrange_at_zero(&[(1, 5), (1, 6)], 97),
            Err(BaselineError::DuplicatePoint(1))
        );
        assert_eq!(
            lagrange_at_zero(&[(0, 5)], 97),
            Err(BaselineError::ZeroPoint)
        );
        assert_eq!(lagrange_at_zero(&[], 97), Err(BaselineError::NoPoints));
    }

    proptest! {
        #[test]
        fn extra_points_change_nothing(
            coeffs in proptest::collection::vec(0u64..97, 1..6),
            extra in 1usize..4,
        ) {
            let t = coeffs.len() - 1;
            let pts: Vec<(u64, u64)> = (1..=(t + 1 + extra) as u64).map(|y| (y, eval(&coeffs, y, 97))).collect();
            let minimal = lagrange_at_zero(&pts[..t + 1], 97).unwrap();
            prop_assert_eq!(minimal, coeffs[0]);
            prop_assert_eq!(lagrange_at_zero(&pts, 97).unwrap(), minimal);
            prop_assert_eq!(lagrange_at_zero(&pts[extra..], 97).unwrap(), minimal);
        }
    }
}
