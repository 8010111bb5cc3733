use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::HarnessError;
use crate::aggspec::{AggregationSpec, Family, DEFAULT_GM_MODULUS};
use crate::modmath::{keyed_rand, ModParams, SeedMaterial};
use crate::outcome::Protocol;
use crate::stnet::{FailureEvent, FailurePhase, SimConfig, Topology, DEFAULT_RADIO_RANGE};
use crate::NodeId;

const TAG_SECRETS: u8 = 0x81;
const GEOMETRIC_ATTEMPTS: u32 = 1000;
pub const DEFAULT_SIDE: f64 = 300.0;
pub const DEFAULT_NSSS_HOPS: u32 = 2;

/// Types that travel through config files in their command-line spelling.
macro_rules! serde_as_string {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?
                    .parse()
                    .map_err(serde::de::Error::custom)
            }
        }
    };
}

fn field<T: FromStr>(what: &str, s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Complete {
        n: u32,
    },
    Ring {
        n: u32,
    },
    Line {
        n: u32,
    },
    /// Uniform placement in a `side` x `side` square; the first connected draw is used.
    Geometric {
        n: u32,
        side: f64,
        radius: f64,
    },
    File {
        path: PathBuf,
    },
}

impl TopologySpec {
    pub fn build(&self, seed: u64) -> Result<Topology, HarnessError> {
        let topo = match self {
            TopologySpec::Complete { n } => Topology::complete(*n),
            TopologySpec::Ring { n } => Topology::ring(*n),
            TopologySpec::Line { n } => Topology::line(*n),
            TopologySpec::Geometric { n, side, radius } => {
                Topology::random_geometric_connected(*n, *side, *radius, seed, GEOMETRIC_ATTEMPTS)?
            }
            TopologySpec::File { path } => Topology::parse(&std::fs::read_to_string(path)?)?,
        };
        if topo.is_empty() {
            return Err(HarnessError::Config("topology has no nodes".into()));
        }
        Ok(topo)
    }

    pub fn with_n(&self, n: u32) -> Result<Self, HarnessError> {
        Ok(match self {
            TopologySpec::Complete { .. } => TopologySpec::Complete { n },
            TopologySpec::Ring { .. } => TopologySpec::Ring { n },
            TopologySpec::Line { .. } => TopologySpec::Line { n },
            TopologySpec::Geometric { side, radius, .. } => TopologySpec::Geometric {
                n,
                side: *side,
                radius: *radius,
            },
            TopologySpec::File { .. } => {
                return Err(HarnessError::Config(
                    "cannot resize a topology read from a file".into(),
                ))
            }
        })
    }

    pub fn with_side(&self, side: f64) -> Result<Self, HarnessError> {
        match self {
            TopologySpec::Geometric { n, radius, .. } => Ok(TopologySpec::Geometric {
                n: *n,
                side,
                radius: *radius,
            }),
            _ => Err(HarnessError::Config(
                "the area axis needs a geometric topology".into(),
            )),
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologySpec::Complete { n } => write!(f, "complete:{n}"),
            TopologySpec::Ring { n } => write!(f, "ring:{n}"),
            TopologySpec::Line { n } => write!(f, "line:{n}"),
            TopologySpec::Geometric { n, side, radius } => {
                write!(f, "geometric:{n}:{side}:{radius}")
            }
            TopologySpec::File { path } => write!(f, "file:{}", path.display()),
        }
    }
}

impl FromStr for TopologySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        if kind == "file" {
            if rest.is_empty() {
                return Err("file topology needs a path (file:PATH)".into());
            }
            return Ok(TopologySpec::File { path: rest.into() });
        }
        let parts: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(':').collect()
        };
        let n = match parts.first() {
            Some(v) => field::<u32>("node count", v)?,
            None => return Err(format!("topology {s:?} needs a node count ({kind}:N)")),
        };
        let fixed = |spec: TopologySpec| {
            if parts.len() == 1 {
                Ok(spec)
            } else {
                Err(format!("topology {s:?}: expected {kind}:N"))
            }
        };
        match kind {
            "complete" => fixed(TopologySpec::Complete { n }),
            "ring" => fixed(TopologySpec::Ring { n }),
            "line" => fixed(TopologySpec::Line { n }),
            "geometric" => {
                if parts.len() > 3 {
                    return Err(format!(
                        "topology {s:?}: expected geometric:N[:SIDE[:RADIUS]]"
                    ));
                }
                let side = parts
                    .get(1)
                    .map_or(Ok(DEFAULT_SIDE), |v| field("side", v))?;
                let radius = parts
                    .get(2)
                    .map_or(Ok(DEFAULT_RADIO_RANGE), |v| field("radius", v))?;
                if !(side > 0.0 && radius > 0.0) {
                    return Err("side and radius must be positive".into());
                }
                Ok(TopologySpec::Geometric { n, side, radius })
            }
            _ => Err(format!(
                "unknown topology kind {kind:?} (complete, ring, line, geometric, file)"
            )),
        }
    }
}

serde_as_string!(TopologySpec);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecretsMode {
    /// Every node's secret is its id.
    Ids,
    /// Drawn from `[lo, hi]` once per run.
    Uniform { lo: u64, hi: u64 },
    /// One value per node, in id order.
    List(Vec<u64>),
}

impl SecretsMode {
    pub fn draw(&self, n: u32, seed: u64) -> Result<BTreeMap<NodeId, u64>, HarnessError> {
        Ok(match self {
            SecretsMode::Ids => (1..=n).map(|i| (i, i as u64)).collect(),
            SecretsMode::Uniform { lo, hi } => {
                let span = hi - lo;
                (1..=n)
                    .map(|i| {
                        let r = keyed_rand(SeedMaterial::new(seed, i, TAG_SECRETS));
                        let v = if span == u64::MAX {
                            r
                        } else {
                            lo + r % (span + 1)
                        };
                        (i, v)
                    })
                    .collect()
            }
            SecretsMode::List(values) => {
                if values.len() != n as usize {
                    return Err(HarnessError::Config(format!(
                        "secret list has {} values for {n} nodes",
                        values.len()
                    )));
                }
                (1..=n).zip(values.iter().copied()).collect()
            }
        })
    }
}

impl fmt::Display for SecretsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecretsMode::Ids => f.write_str("ids"),
            SecretsMode::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
            SecretsMode::List(values) => {
                let joined: Vec<String> = values.iter().map(u64::to_string).collect();
                write!(f, "list:{}", joined.join(","))
            }
        }
    }
}

impl FromStr for SecretsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "ids" => Ok(SecretsMode::Ids),
            Some(("uniform", range)) => {
                let (lo, hi) = range.split_once(':').ok_or("expected uniform:LO:HI")?;
                let (lo, hi): (u64, u64) = (field("bound", lo)?, field("bound", hi)?);
                if lo > hi {
                    return Err(format!("empty range {lo}..={hi}"));
                }
                Ok(SecretsMode::Uniform { lo, hi })
            }
            Some(("list", values)) => values
                .split(',')
                .map(|v| field("secret", v.trim()))
                .collect::<Result<_, _>>()
                .map(SecretsMode::List),
            _ => Err(format!(
                "unknown secrets mode {s:?} (ids, uniform:LO:HI, list:A,B,...)"
            )),
        }
    }
}

serde_as_string!(SecretsMode);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilySpec(pub Family);

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Family::Sum => f.write_str("sum"),
            Family::Am => f.write_str("am"),
            Family::Gm => f.write_str("gm"),
            Family::QamHarmonic => f.write_str("harmonic"),
            Family::QamPower { exponent } => write!(f, "power:{exponent}"),
        }
    }
}

impl FromStr for FamilySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let family = match s {
            "sum" => Family::Sum,
            "am" => Family::Am,
            "gm" => Family::Gm,
            "harmonic" => Family::QamHarmonic,
            _ => match s.strip_prefix("power:") {
                Some(e) => Family::QamPower {
                    exponent: field("exponent", e)?,
                },
                None => {
                    return Err(format!(
                        "unknown family {s:?} (sum, am, gm, harmonic, power:E)"
                    ))
                }
            },
        };
        Ok(FamilySpec(family))
    }
}

serde_as_string!(FamilySpec);

/// A failure event written `NODE:before`, `NODE:silent` or `NODE:mid:K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailureSpec(pub FailureEvent);

impl fmt::Display for FailureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = self.0.node;
        match self.0.phase {
            FailurePhase::BeforeDfke => write!(f, "{node}:before"),
            FailurePhase::AfterDfkeSilent => write!(f, "{node}:silent"),
            FailurePhase::MidShare { after_k } => write!(f, "{node}:mid:{after_k}"),
        }
    }
}

impl FromStr for FailureSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let node: NodeId = field("node", parts.next().unwrap_or(""))?;
        let phase = match (parts.next(), parts.next(), parts.next()) {
            (Some("before"), None, None) => FailurePhase::BeforeDfke,
            (Some("silent"), None, None) => FailurePhase::AfterDfkeSilent,
            (Some("mid"), Some(k), None) => FailurePhase::MidShare {
                after_k: field("transmission count", k)?,
            },
            _ => {
                return Err(format!(
                    "bad failure {s:?} (NODE:before, NODE:silent, NODE:mid:K)"
                ))
            }
        };
        Ok(FailureSpec(FailureEvent::new(node, phase)))
    }
}

serde_as_string!(FailureSpec);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Csv => "csv",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            _ => Err(format!("unknown format {s:?} (json, csv)")),
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub topology: TopologySpec,
    /// Transmissions per node; defaults to the diameter (one more with a mid-share failure).
    pub ntx: Option<u32>,
    pub family: FamilySpec,
    pub secrets: SecretsMode,
    pub failures: Vec<FailureSpec>,
    pub rounds: u32,
    pub seed: u64,
    pub format: OutputFormat,
    /// Share field for SSS/NSSS, `p` for PPMP, modulus for geometric means.
    pub field: Option<u64>,
    /// Polynomial degree for SSS/NSSS.
    pub degree: Option<u32>,
    /// Share outreach for NSSS.
    pub hop_limit: Option<u32>,
    pub initiator: NodeId,
    /// Rounds after which LiPI re-runs key establishment.
    pub key_refresh: u32,
    /// Diffie-Hellman prime; its smallest generator is used.
    pub dh_prime: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Lipi,
            topology: TopologySpec::Complete { n: 24 },
            ntx: None,
            family: FamilySpec(Family::Sum),
            secrets: SecretsMode::Ids,
            failures: Vec::new(),
            rounds: 1,
            seed: 0,
            format: OutputFormat::Json,
            field: None,
            degree: None,
            hop_limit: None,
            initiator: 1,
            key_refresh: 100,
            dh_prime: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.rounds == 0 {
            return Err(HarnessError::Config("rounds must be at least 1".into()));
        }
        if self.protocol != Protocol::Lipi && self.family.0 != Family::Sum {
            return Err(HarnessError::Config(format!(
                "{} only computes sums (family {})",
                self.protocol, self.family
            )));
        }
        if self.key_refresh == 0 {
            return Err(HarnessError::Config(
                "key_refresh must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn aggregation_spec(&self) -> Result<AggregationSpec, HarnessError> {
        Ok(match self.family.0 {
            Family::Gm => AggregationSpec::gm(self.field.unwrap_or(DEFAULT_GM_MODULUS))?,
            family => AggregationSpec::new(family),
        })
    }

    pub fn dh_params(&self) -> Result<ModParams, HarnessError> {
        Ok(match self.dh_prime {
            Some(p) => ModParams::with_prime(p)?,
            None => ModParams::default(),
        })
    }

    pub fn failure_plan(&self) -> Vec<FailureEvent> {
        self.failures.iter().map(|f| f.0).collect()
    }

    /// Simulator settings for `topo`.
    pub fn sim_config(&self, topo: &Topology) -> Result<SimConfig, HarnessError> {
        let plan = self.failure_plan();
        let ntx = match self.ntx {
            Some(n) => n,
            None => {
                let mid_share = plan
                    .iter()
                    .any(|e| matches!(e.phase, FailurePhase::MidShare { .. }));
                SimConfig::full_outreach(topo, self.seed).ntx + u32::from(mid_share)
            }
        };
        let cfg = SimConfig {
            ntx,
            rng_seed: self.seed,
            initiator: self.initiator,
            ..SimConfig::default()
        }
        .with_failures(plan);
        cfg.validate(topo)?;
        Ok(cfg)
    }

    pub fn nsss_hop_limit(&self) -> u32 {
        self.hop_limit.unwrap_or(DEFAULT_NSSS_HOPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spellings_round_trip() {
        for s in [
            "complete:24",
            "ring:4",
            "line:7",
            "geometric:30:500:100",
            "file:topo.txt",
        ] {
            assert_eq!(s.parse::<TopologySpec>().unwrap().to_string(), s);
        }
        assert_eq!(
            "geometric:10".parse::<TopologySpec>().unwrap(),
            TopologySpec::Geometric {
                n: 10,
                side: DEFAULT_SIDE,
                radius: DEFAULT_RADIO_RANGE
            }
        );
        for s in ["ids", "uniform:5:9", "list:1,2,3"] {
            assert_eq!(s.parse::<SecretsMode>().unwrap().to_string(), s);
        }
        for s in ["sum", "am", "gm", "harmonic", "power:2"] {
            assert_eq!(s.parse::<FamilySpec>().unwrap().to_string(), s);
        }
        for s in ["3:before", "4:silent", "5:mid:2"] {
            assert_eq!(s.parse::<FailureSpec>().unwrap().to_string(), s);
        }
        for bad in ["complete", "torus:4", "ring:x", "geometric:4:1:2:3"] {
            assert!(bad.parse::<TopologySpec>().is_err(), "{bad}");
        }
        assert!("uniform:9:5".parse::<SecretsMode>().is_err());
        assert!("3:later".parse::<FailureSpec>().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig {
            protocol: Protocol::Nsss,
            topology: "geometric:24:300:100".parse().unwrap(),
            ntx: Some(4),
            secrets: "uniform:0:1000".parse().unwrap(),
            failures: vec!["3:silent".parse().unwrap()],
            hop_limit: Some(2),
            ..ExperimentConfig::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&text).unwrap(),
            cfg
        );
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"protocl": "lipi"}"#).is_err());
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"protocol": "sss", "rounds": 3}"#).unwrap();
        assert_eq!(partial.rounds, 3);
        assert_eq!(partial.topology, TopologySpec::Complete { n: 24 });
    }

    #[test]
    fn secrets_draws() {
        assert_eq!(
            SecretsMode::Ids.draw(3, 0).unwrap(),
            [(1, 1), (2, 2), (3, 3)].into()
        );
        let u = SecretsMode::Uniform { lo: 10, hi: 12 }.draw(50, 4).unwrap();
        assert!(u.values().all(|v| (10..=12).contains(v)));
        assert!(SecretsMode::List(vec![1, 2]).draw(3, 0).is_err());
    }
}
