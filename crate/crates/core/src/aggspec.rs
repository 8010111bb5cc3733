//! Masking algebra for each aggregation family.
//!
//! A node masks its secret with one noise term per peer. Terms are derived
//! from the pairwise key and the round sequence number so that the two
//! endpoints of a pair produce terms that cancel when all masked values are
//! combined: additive families work in wrapping `u64` arithmetic, the
//! geometric mean works in the multiplicative group of a prime field.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modmath::{
    self, bit_reverse, keyed_rand, mod_inv, mul_mod, ModError, SeedMaterial, KEY_WIDTH,
};
use crate::NodeId;

/// Default field for the geometric mean: the Mersenne prime 2^61 - 1.
pub const DEFAULT_GM_MODULUS: u64 = (1 << 61) - 1;

/// Fixed-point scale used to carry transformed QAM values in the additive domain.
pub const QAM_SCALE: f64 = 4_294_967_296.0;

/// Transformed QAM values must stay below this magnitude so the fixed-point
/// encoding is exact to within one unit.
pub const QAM_MAX_MAGNITUDE: f64 = 1_048_576.0;

const TAG_NOISE: u8 = 0x10;
const MAX_REDRAWS: u8 = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggError {
    #[error(transparent)]
    Mod(#[from] ModError),
    #[error("node {0} cannot derive noise for itself")]
    SelfPair(NodeId),
    #[error("value outside the family's domain: {0}")]
    Domain(String),
    #[error("expected {expected} masked values, got {got}")]
    Incomplete { expected: usize, got: usize },
    #[error("masked values carry different sequence numbers")]
    MixedSeqNo,
    #[error("node {0} contributed more than one masked value")]
    DuplicateOwner(NodeId),
    #[error("node {owner} has no pairwise key for peer {peer}")]
    MissingKey { owner: NodeId, peer: NodeId },
    #[error("node {0} cannot exclude itself when recomputing its mask")]
    SelfMissing(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Sum,
    Am,
    Gm,
    QamHarmonic,
    QamPower { exponent: f64 },
}

impl Family {
    pub fn is_multiplicative(self) -> bool {
        matches!(self, Family::Gm)
    }

    pub fn transform(self) -> QamTransform {
        match self {
            Family::Sum | Family::Am => QamTransform::Identity,
            Family::Gm => QamTransform::Log,
            Family::QamHarmonic => QamTransform::Reciprocal,
            Family::QamPower { exponent } => QamTransform::Power(exponent),
        }
    }
}

/// The continuous injective map `g` behind a quasi-arithmetic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QamTransform {
    Identity,
    Log,
    Reciprocal,
    Power(f64),
}

impl QamTransform {
    pub fn forward(self, x: f64) -> Result<f64, AggError> {
        if !x.is_finite() {
            return Err(AggError::Domain(format!("{x} is not finite")));
        }
        match self {
            QamTransform::Identity => Ok(x),
            QamTransform::Log if x > 0.0 => Ok(x.ln()),
            QamTransform::Log => Err(AggError::Domain(format!("log of {x}"))),
            QamTransform::Reciprocal if x != 0.0 => Ok(1.0 / x),
            QamTransform::Reciprocal => Err(AggError::Domain("reciprocal of 0".into())),
            QamTransform::Power(e) => {
                check_exponent(e)?;
                if x < 0.0 && e.fract() != 0.0 {
                    return Err(AggError::Domain(format!("{x}^{e}")));
                }
                Ok(x.powf(e))
            }
        }
    }

    pub fn inverse(self, y: f64) -> Result<f64, AggError> {
        if !y.is_finite() {
            return Err(AggError::Domain(format!("{y} is not finite")));
        }
        match self {
            QamTransform::Identity => Ok(y),
            QamTransform::Log => Ok(y.exp()),
            QamTransform::Reciprocal if y != 0.0 => Ok(1.0 / y),
            QamTransform::Reciprocal => Err(AggError::Domain("reciprocal of 0".into())),
            QamTransform::Power(e) => {
                check_exponent(e)?;
                if y < 0.0 {
                    // odd integer powers are invertible on the whole line
                    if e.fract() == 0.0 && (e as i64) % 2 != 0 {
                        return Ok(-(-y).powf(1.0 / e));
                    }
                    return Err(AggError::Domain(format!("{e}-th root of {y}")));
                }
                Ok(y.powf(1.0 / e))
            }
        }
    }
}

fn check_exponent(e: f64) -> Result<(), AggError> {
    if e == 0.0 || !e.is_finite() {
        return Err(AggError::Domain(format!("power mean exponent {e}")));
    }
    Ok(())
}

pub fn qam_forward(family: Family, x: f64) -> Result<f64, AggError> {
    family.transform().forward(x)
}

pub fn qam_inverse(family: Family, y: f64) -> Result<f64, AggError> {
    family.transform().inverse(y)
}

/// `g^-1(mean(g(x_i)))`, computed in the clear.
pub fn quasi_arithmetic_mean(transform: QamTransform, xs: &[f64]) -> Result<f64, AggError> {
    if xs.is_empty() {
        return Err(AggError::Incomplete {
            expected: 1,
            got: 0,
        });
    }
    let mut total = 0.0;
    for &x in xs {
        total += transform.forward(x)?;
    }
    transform.inverse(total / xs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub family: Family,
    /// Prime field for [`Family::Gm`]; unused by the additive families.
    pub gm_modulus: u64,
}

impl AggregationSpec {
    pub fn new(family: Family) -> Self {
        AggregationSpec {
            family,
            gm_modulus: DEFAULT_GM_MODULUS,
        }
    }

    pub fn sum() -> Self {
        Self::new(Family::Sum)
    }

    pub fn am() -> Self {
        Self::new(Family::Am)
    }

    pub fn gm(modulus: u64) -> Result<Self, AggError> {
        if !modmath::is_prime(modulus) {
            return Err(ModError::NotPrime(modulus).into());
        }
        Ok(AggregationSpec {
            family: Family::Gm,
            gm_modulus: modulus,
        })
    }

    pub fn harmonic() -> Self {
        Self::new(Family::QamHarmonic)
    }

    pub fn power(exponent: f64) -> Self {
        Self::new(Family::QamPower { exponent })
    }

    /// Maps a plaintext secret into the masking domain.
    pub fn encode(&self, secret: u64) -> Result<u64, AggError> {
        match self.family {
            Family::Sum | Family::Am => Ok(secret),
            Family::Gm => {
                if secret == 0 || secret >= self.gm_modulus {
                    return Err(AggError::Domain(format!(
                        "geometric mean secret {secret} outside [1, {})",
                        self.gm_modulus
                    )));
                }
                Ok(secret)
            }
            Family::QamHarmonic | Family::QamPower { .. } => {
                let y = qam_forward(self.family, secret as f64)?;
                if y.abs() > QAM_MAX_MAGNITUDE {
                    return Err(AggError::Domain(format!(
                        "transformed value {y} exceeds fixed-point range"
                    )));
                }
                Ok(((y * QAM_SCALE).round() as i64) as u64)
            }
        }
    }

    fn identity(&self) -> u64 {
        if self.family.is_multiplicative() {
            1
        } else {
            0
        }
    }

    fn combine(&self, a: u64, b: u64) -> u64 {
        if self.family.is_multiplicative() {
            mul_mod(a, b, self.gm_modulus)
        } else {
            a.wrapping_add(b)
        }
    }
}

/// Draws a nonzero element of `Z_Q`, bumping the tag until one appears.
fn field_draw(key: u64, seq_no: u32, modulus: u64) -> Result<u64, AggError> {
    for bump in 0..MAX_REDRAWS {
        let v = keyed_rand(SeedMaterial::new(key, seq_no, TAG_NOISE + bump)) % modulus;
        if v != 0 {
            return Ok(v);
        }
    }
    Err(AggError::Domain(format!(
        "no nonzero draw modulo {modulus}"
    )))
}

/// Noise term node `self_id` contributes for `peer_id` in round `seq_no`.
pub fn noise_for(
    spec: &AggregationSpec,
    key: u64,
    seq_no: u32,
    self_id: NodeId,
    peer_id: NodeId,
) -> Result<u64, AggError> {
    if self_id == peer_id {
        return Err(AggError::SelfPair(self_id));
    }
    let lower = self_id < peer_id;
    let reversed = bit_reverse(key, KEY_WIDTH)?;
    match spec.family {
        Family::Sum => {
            let r = keyed_rand(SeedMaterial::new(key, seq_no, TAG_NOISE));
            Ok(if lower { r } else { r.wrapping_neg() })
        }
        Family::Am | Family::QamHarmonic | Family::QamPower { .. } => {
            let pair = keyed_rand(SeedMaterial::new(key, seq_no, TAG_NOISE))
                .wrapping_add(keyed_rand(SeedMaterial::new(reversed, seq_no, TAG_NOISE)));
            Ok(if lower { pair.wrapping_neg() } else { pair })
        }
        Family::Gm => {
            let q = spec.gm_modulus;
            let product = mul_mod(
                field_draw(key, seq_no, q)?,
                field_draw(reversed, seq_no, q)?,
                q,
            );
            if lower {
                Ok(mod_inv(product, q)?)
            } else {
                Ok(product)
            }
        }
    }
}

/// Per-peer noise terms of one node for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseVector {
    pub owner: NodeId,
    pub seq_no: u32,
    pub terms: BTreeMap<NodeId, u64>,
}

impl NoiseVector {
    /// Derives one term for every peer in `peers` other than `owner`.
    pub fn derive<'a>(
        spec: &AggregationSpec,
        owner: NodeId,
        keys: &BTreeMap<NodeId, u64>,
        peers: impl IntoIterator<Item = &'a NodeId>,
        seq_no: u32,
    ) -> Result<Self, AggError> {
        let mut terms = BTreeMap::new();
        for &peer in peers {
            if peer == owner {
                continue;
            }
            let key = *keys
                .get(&peer)
                .ok_or(AggError::MissingKey { owner, peer })?;
            terms.insert(peer, noise_for(spec, key, seq_no, owner, peer)?);
        }
        Ok(NoiseVector {
            owner,
            seq_no,
            terms,
        })
    }
}

/// A masked value as broadcast during a sharing round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedValue {
    pub owner: NodeId,
    pub value: u64,
    pub seq_no: u32,
}

pub fn mask(
    spec: &AggregationSpec,
    secret: u64,
    noises: &NoiseVector,
) -> Result<MaskedValue, AggError> {
    mask_terms(spec, secret, noises, noises.terms.values())
}

fn mask_terms<'a>(
    spec: &AggregationSpec,
    secret: u64,
    noises: &NoiseVector,
    terms: impl Iterator<Item = &'a u64>,
) -> Result<MaskedValue, AggError> {
    let value = terms.fold(spec.encode(secret)?, |acc, &q| spec.combine(acc, q));
    Ok(MaskedValue {
        owner: noises.owner,
        value,
        seq_no: noises.seq_no,
    })
}

/// Masks `secret` with the terms of every peer not listed in `missing`.
pub fn recompute_mask(
    spec: &AggregationSpec,
    secret: u64,
    noises: &NoiseVector,
    missing: &BTreeSet<NodeId>,
) -> Result<MaskedValue, AggError> {
    if missing.contains(&noises.owner) {
        return Err(AggError::SelfMissing(noises.owner));
    }
    let kept = noises
        .terms
        .iter()
        .filter(|(peer, _)| !missing.contains(peer))
        .map(|(_, q)| q);
    mask_terms(spec, secret, noises, kept)
}

/// Result of de-masking, per family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregate {
    Sum {
        total: u64,
    },
    Mean {
        numerator: u64,
        denominator: u64,
        value: f64,
    },
    Geometric {
        product: u64,
        root: f64,
    },
    Quasi {
        transformed_mean: f64,
        value: f64,
    },
}

impl Aggregate {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Aggregate::Sum { total } => total as f64,
            Aggregate::Mean { value, .. } => value,
            Aggregate::Geometric { root, .. } => root,
            Aggregate::Quasi { value, .. } => value,
        }
    }

    /// The exact integer part of the result, where the family has one.
    pub fn exact(&self) -> Option<u64> {
        match *self {
            Aggregate::Sum { total } => Some(total),
            Aggregate::Mean { numerator, .. } => Some(numerator),
            Aggregate::Geometric { product, .. } => Some(product),
            Aggregate::Quasi { .. } => None,
        }
    }
}

fn finish(spec: &AggregationSpec, combined: u64, n: usize) -> Result<Aggregate, AggError> {
    let n_f = n as f64;
    Ok(match spec.family {
        Family::Sum => Aggregate::Sum { total: combined },
        Family::Am => Aggregate::Mean {
            numerator: combined,
            denominator: n as u64,
            value: combined as f64 / n_f,
        },
        Family::Gm => Aggregate::Geometric {
            product: combined,
            root: (combined as f64).powf(1.0 / n_f),
        },
        Family::QamHarmonic | Family::QamPower { .. } => {
            let transformed_mean = (combined as i64) as f64 / QAM_SCALE / n_f;
            Aggregate::Quasi {
                transformed_mean,
                value: qam_inverse(spec.family, transformed_mean)?,
            }
        }
    })
}

/// Combines one masked value per participant, cancelling all noise terms.
pub fn demask(
    spec: &AggregationSpec,
    masked: &[MaskedValue],
    participant_count: usize,
) -> Result<Aggregate, AggError> {
    if masked.len() != participant_count || participant_count == 0 {
        return Err(AggError::Incomplete {
            expected: participant_count,
            got: masked.len(),
        });
    }
    let seq_no = masked[0].seq_no;
    let mut owners = BTreeSet::new();
    for m in masked {
        if m.seq_no != seq_no {
            return Err(AggError::MixedSeqNo);
        }
        if !owners.insert(m.owner) {
            return Err(AggError::DuplicateOwner(m.owner));
        }
    }
    let combined = masked
        .iter()
        .fold(spec.identity(), |acc, m| spec.combine(acc, m.value));
    finish(spec, combined, participant_count)
}

/// The aggregate computed directly over plaintext secrets.
pub fn plain_aggregate(spec: &AggregationSpec, secrets: &[u64]) -> Result<Aggregate, AggError> {
    if secrets.is_empty() {
        return Err(AggError::Incomplete {
            expected: 1,
            got: 0,
        });
    }
    let mut combined = spec.identity();
    for &s in secrets {
        combined = spec.combine(combined, spec.encode(s)?);
    }
    finish(spec, combined, secrets.len())
}
