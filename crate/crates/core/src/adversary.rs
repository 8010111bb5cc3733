//! Semi-honest collusion experiments over recorded round traces.
//!
//! A coalition knows its members' private state (pairwise keys, secrets,
//! ring exponents) and every broadcast payload. Nothing else is consulted.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggspec::{noise_for, AggError, AggregationSpec, Family, QAM_SCALE};
use crate::baselines::{lagrange_at_zero, open_share, ring_neighbors, BaselineError, PpmpParams};
use crate::dfke::KeyTable;
use crate::modmath::{mod_inv, mod_pow, mul_mod, ModError};
use crate::trace::{Payload, PhaseLabel, RoundTrace};
use crate::NodeId;

/// Largest `q^t` the exhaustive enumerations will walk.
pub const MAX_ENUMERATION: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdversaryError {
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Mod(#[from] ModError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("target {0} is a coalition member")]
    TargetInCoalition(NodeId),
    #[error("enumeration of {0} candidates is too large")]
    TooLarge(u128),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Exact,
    Ambiguous,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub target: NodeId,
    pub recovered: Option<u64>,
    pub status: AttackStatus,
}

impl AttackOutcome {
    fn new(target: NodeId, recovered: Option<u64>, status: AttackStatus) -> Self {
        AttackOutcome {
            target,
            recovered,
            status,
        }
    }
}

/// What a set of colluding nodes knows besides the broadcasts.
#[derive(Debug, Clone, Default)]
pub struct Coalition {
    pub members: BTreeSet<NodeId>,
    pub keys: BTreeMap<NodeId, KeyTable>,
    pub secrets: BTreeMap<NodeId, u64>,
    pub ring_exponents: BTreeMap<NodeId, u64>,
}

impl Coalition {
    /// Keeps only the members' entries of the given state.
    pub fn from_state(
        members: BTreeSet<NodeId>,
        keys: &BTreeMap<NodeId, KeyTable>,
        secrets: &BTreeMap<NodeId, u64>,
        ring_exponents: &BTreeMap<NodeId, u64>,
    ) -> Self {
        let pick = |m: &BTreeMap<NodeId, u64>| -> BTreeMap<NodeId, u64> {
            m.iter()
                .filter(|(k, _)| members.contains(k))
                .map(|(&k, &v)| (k, v))
                .collect()
        };
        Coalition {
            keys: keys
                .iter()
                .filter(|(k, _)| members.contains(k))
                .map(|(&k, v)| (k, v.clone()))
                .collect(),
            secrets: pick(secrets),
            ring_exponents: pick(ring_exponents),
            members,
        }
    }
}

fn sync_participants(trace: &RoundTrace) -> Option<BTreeSet<NodeId>> {
    trace
        .phase(PhaseLabel::SyncFlood)?
        .payloads
        .iter()
        .find_map(|p| match p {
            Payload::Sync { participants, .. } => Some(participants.iter().copied().collect()),
            _ => None,
        })
}

fn missing_list(trace: &RoundTrace) -> BTreeSet<NodeId> {
    trace
        .phase(PhaseLabel::MissingFlood)
        .into_iter()
        .flat_map(|p| p.payloads.iter())
        .flat_map(|p| match p {
            Payload::MissingList { nodes } => nodes.clone(),
            _ => Vec::new(),
        })
        .collect()
}

fn decode(spec: &AggregationSpec, encoded: u64) -> Result<u64, AggError> {
    match spec.family {
        Family::Sum | Family::Am | Family::Gm => Ok(encoded),
        family => {
            let y = (encoded as i64) as f64 / QAM_SCALE;
            Ok(family.transform().inverse(y)?.round() as u64)
        }
    }
}

/// Strips every noise term the coalition can regenerate from the target's
/// masked value. Exact only when the coalition covers all of the target's peers.
pub fn lipi_coalition_attack(
    spec: &AggregationSpec,
    trace: &RoundTrace,
    coalition: &Coalition,
    target: NodeId,
) -> Result<AttackOutcome, AdversaryError> {
    if coalition.members.contains(&target) {
        return Err(AdversaryError::TargetInCoalition(target));
    }
    let masked = trace.final_masked();
    let (Some(m), Some(participants)) = (masked.get(&target), sync_participants(trace)) else {
        return Ok(AttackOutcome::new(target, None, AttackStatus::Failed));
    };
    let missing = missing_list(trace);
    let peers: BTreeSet<NodeId> = participants
        .iter()
        .copied()
        .filter(|&p| p != target && !missing.contains(&p))
        .collect();
    let mut residual = m.value;
    let mut stripped = 0;
    for &j in peers.iter().filter(|j| coalition.members.contains(j)) {
        let Some(key) = coalition.keys.get(&j).and_then(|t| t.pairwise.get(&target)) else {
            continue;
        };
        let term = noise_for(spec, *key, m.seq_no, target, j)?;
        residual = if spec.family.is_multiplicative() {
            mul_mod(residual, mod_inv(term, spec.gm_modulus)?, spec.gm_modulus)
        } else {
            residual.wrapping_sub(term)
        };
        stripped += 1;
    }
    if stripped == peers.len() {
        Ok(AttackOutcome::new(
            target,
            Some(decode(spec, residual)?),
            AttackStatus::Exact,
        ))
    } else {
        Ok(AttackOutcome::new(
            target,
            Some(residual),
            AttackStatus::Ambiguous,
        ))
    }
}

/// Secret recovered by subtracting the coalition's own secrets from a sum.
///
/// Any scheme that publishes the sum leaks the last unknown summand this way.
pub fn aggregate_subtraction(
    total: u64,
    coalition: &Coalition,
    participants: &BTreeSet<NodeId>,
    target: NodeId,
) -> AttackOutcome {
    let others: BTreeSet<NodeId> = participants
        .iter()
        .copied()
        .filter(|&p| p != target)
        .collect();
    if others.iter().all(|o| coalition.secrets.contains_key(o)) {
        let known: u64 = others
            .iter()
            .fold(0u64, |acc, o| acc.wrapping_add(coalition.secrets[o]));
        AttackOutcome::new(target, Some(total.wrapping_sub(known)), AttackStatus::Exact)
    } else {
        AttackOutcome::new(target, None, AttackStatus::Ambiguous)
    }
}

/// Whether every secret in `Z_q` is consistent with an additive residual
/// that still carries `unknown_terms` uniformly random noise terms.
pub fn residual_ambiguity(
    residual: u64,
    unknown_terms: u32,
    q: u64,
) -> Result<bool, AdversaryError> {
    let space = (q as u128).pow(unknown_terms);
    if space > MAX_ENUMERATION as u128 {
        return Err(AdversaryError::TooLarge(space));
    }
    let mut reachable = BTreeSet::new();
    for idx in 0..space as u64 {
        let (mut rest, mut noise) = (idx, 0);
        for _ in 0..unknown_terms {
            noise = (noise + rest % q) % q;
            rest /= q;
        }
        reachable.insert((residual % q + q - noise) % q);
    }
    Ok(reachable.len() as u64 == q)
}

fn ppmp_payload(trace: &RoundTrace, label: PhaseLabel, target: NodeId) -> Option<u64> {
    trace.phase(label)?.payloads.iter().find_map(|p| match *p {
        Payload::RingKey { owner, value } | Payload::RingCipher { owner, value }
            if owner == target =>
        {
            Some(value)
        }
        _ => None,
    })
}

/// Ring-neighbor collusion against PPMP: both neighbors' exponents rebuild `R_target`.
pub fn ppmp_adjacent_attack(
    params: &PpmpParams,
    trace: &RoundTrace,
    coalition: &Coalition,
    target: NodeId,
) -> Result<AttackOutcome, AdversaryError> {
    if coalition.members.contains(&target) {
        return Err(AdversaryError::TargetInCoalition(target));
    }
    let ring: Vec<NodeId> = sync_participants(trace)
        .unwrap_or_default()
        .into_iter()
        .collect();
    let (Some((prev, next)), Some(key), Some(cipher)) = (
        ring_neighbors(&ring, target),
        ppmp_payload(trace, PhaseLabel::PpmpKeyExchange, target),
        ppmp_payload(trace, PhaseLabel::PpmpAggregation, target),
    ) else {
        return Ok(AttackOutcome::new(target, None, AttackStatus::Failed));
    };
    let (Some(&r_prev), Some(&r_next)) = (
        coalition.ring_exponents.get(&prev),
        coalition.ring_exponents.get(&next),
    ) else {
        return Ok(AttackOutcome::new(target, None, AttackStatus::Ambiguous));
    };
    let m = params.modulus;
    let factor = mul_mod(
        mod_pow(key, r_next, m)?,
        mod_inv(mod_pow(key, r_prev, m)?, m)?,
        m,
    );
    let lifted = mul_mod(cipher, mod_inv(factor, m)?, m);
    Ok(AttackOutcome::new(
        target,
        Some((lifted + m - 1) % m / params.p_enc),
        AttackStatus::Exact,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyReuseWitness {
    pub target: NodeId,
    /// `C(t+1) / C(t) mod p^2`.
    pub ratio: u64,
    /// `x(t+1) - x(t) mod p`, when the masks cancelled.
    pub delta: Option<u64>,
    pub status: AttackStatus,
}

/// Divides a node's ciphertexts from two rounds. If the ring exponents were
/// reused the masks cancel and the ratio is `1 + (x' - x) p mod p^2`.
pub fn ppmp_key_reuse_attack(
    params: &PpmpParams,
    earlier: &RoundTrace,
    later: &RoundTrace,
    target: NodeId,
) -> Result<KeyReuseWitness, AdversaryError> {
    let (Some(c0), Some(c1)) = (
        ppmp_payload(earlier, PhaseLabel::PpmpAggregation, target),
        ppmp_payload(later, PhaseLabel::PpmpAggregation, target),
    ) else {
        return Ok(KeyReuseWitness {
            target,
            ratio: 0,
            delta: None,
            status: AttackStatus::Failed,
        });
    };
    let (m, p) = (params.modulus, params.p_enc);
    let ratio = mul_mod(c1, mod_inv(c0, m)?, m);
    let shifted = (ratio + m - 1) % m;
    let (delta, status) = if shifted.is_multiple_of(p) {
        (Some(shifted / p), AttackStatus::Exact)
    } else {
        (None, AttackStatus::Failed)
    };
    Ok(KeyReuseWitness {
        target,
        ratio,
        delta,
        status,
    })
}

/// Whether `shares` of a degree-`degree` polynomial over `F_q` leave every
/// constant term possible. Walks the whole coefficient space.
pub fn sss_subset_ambiguity(
    shares: &[(u64, u64)],
    degree: u32,
    q: u64,
) -> Result<bool, AdversaryError> {
    if shares.len() > degree as usize {
        return Ok(false);
    }
    let space = (q as u128).pow(degree);
    if space > MAX_ENUMERATION as u128 {
        return Err(AdversaryError::TooLarge(space));
    }
    let mut constants = BTreeSet::new();
    let mut coeffs = vec![0u64; degree as usize];
    for idx in 0..space as u64 {
        let mut rest = idx;
        for c in coeffs.iter_mut() {
            *c = rest % q;
            rest /= q;
        }
        // higher terms evaluated at y, so the constant is fixed by the first share
        let tail = |y: u64| {
            coeffs
                .iter()
                .rev()
                .fold(0, |acc, &c| (mul_mod(acc, y % q, q) + c) % q)
                * (y % q)
                % q
        };
        match shares.first() {
            None => {
                constants.extend(0..q);
                break;
            }
            Some(&(y0, v0)) => {
                let c0 = (v0 % q + q - tail(y0)) % q;
                if shares.iter().all(|&(y, v)| (c0 + tail(y)) % q == v % q) {
                    constants.insert(c0);
                }
            }
        }
    }
    Ok(constants.len() as u64 == q)
}

/// Coalition members decrypt the shares the target dealt them and
/// interpolate once they hold `degree + 1` of them.
pub fn shamir_share_attack(
    trace: &RoundTrace,
    coalition: &Coalition,
    target: NodeId,
    q: u64,
    degree: u32,
) -> Result<AttackOutcome, AdversaryError> {
    if coalition.members.contains(&target) {
        return Err(AdversaryError::TargetInCoalition(target));
    }
    let Some(phase) = trace.phase(PhaseLabel::SssShare) else {
        return Ok(AttackOutcome::new(target, None, AttackStatus::Failed));
    };
    let mut points = Vec::new();
    for p in &phase.payloads {
        let Payload::SealedShare {
            dealer,
            recipient,
            ciphertext,
        } = *p
        else {
            continue;
        };
        if dealer != target {
            continue;
        }
        if let Some(key) = coalition
            .keys
            .get(&recipient)
            .and_then(|t| t.pairwise.get(&target))
        {
            let share = open_share(*key, trace.seq_no, dealer, recipient, ciphertext) % q;
            points.push((recipient as u64, share));
        }
    }
    if points.len() > degree as usize {
        let value = lagrange_at_zero(&points[..degree as usize + 1], q)?;
        Ok(AttackOutcome::new(target, Some(value), AttackStatus::Exact))
    } else {
        Ok(AttackOutcome::new(target, None, AttackStatus::Ambiguous))
    }
}

/// True when no consecutive pair of rounds exposes the target's secret
/// delta through its masked values (additive families).
pub fn lipi_rate_of_reuse_check(
    traces: &[RoundTrace],
    target_secrets: &[u64],
    target: NodeId,
) -> bool {
    let masked: Vec<Option<u64>> = traces
        .iter()
        .map(|t| t.final_masked().get(&target).map(|m| m.value))
        .collect();
    masked
        .windows(2)
        .zip(target_secrets.windows(2))
        .all(|(m, s)| match (m[0], m[1]) {
            (Some(a), Some(b)) => b.wrapping_sub(a) != s[1].wrapping_sub(s[0]),
            _ => true,
        })
}
