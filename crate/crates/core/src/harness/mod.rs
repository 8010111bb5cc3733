//! Experiment runner behind the `lipi` command line tool.
//!
//! A run executes one protocol for a number of rounds and yields one
//! [`ResultRecord`] per round. `compare` summarises several protocols on
//! the same network; `sweep` varies one parameter and emits long-form rows.
//! All costs are abstract sub-slots.

mod config;
mod record;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggspec::AggError;
use crate::baselines::{
    nsss_round, ppmp_round, sss_round, BaselineError, PpmpParams, SharingParams,
    DEFAULT_PPMP_PRIME, DEFAULT_SSS_FIELD,
};
use crate::dfke::{dfke_round, DfkeError, RefreshPolicy};
use crate::lipi::{run_periodic, LipiError, PeriodicPlan};
use crate::modmath::{keyed_rand, ModError, SeedMaterial};
use crate::outcome::Protocol;
use crate::stnet::{FailureEvent, FailurePhase, NetError, Topology};
use crate::NodeId;

pub use config::{
    ExperimentConfig, FailureSpec, FamilySpec, OutputFormat, SecretsMode, TopologySpec,
    DEFAULT_NSSS_HOPS, DEFAULT_SIDE,
};
pub use record::{CostSummary, NodeCost, ResultRecord};

const TAG_PPMP_ROUND: u8 = 0x91;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mod(#[from] ModError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Dfke(#[from] DfkeError),
    #[error(transparent)]
    Lipi(#[from] LipiError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl HarnessError {
    /// Whether the error comes from what the user asked for rather than from a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Net(NetError::Parse { .. })
        )
    }
}

/// Runs the configured protocol and returns one record per round.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>, HarnessError> {
    cfg.validate()?;
    let topo = cfg.topology.build(cfg.seed)?;
    let sim = cfg.sim_config(&topo)?;
    let secrets = cfg.secrets.draw(topo.len(), cfg.seed)?;
    let spec = cfg.aggregation_spec()?;
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    match cfg.protocol {
        Protocol::Lipi => {
            let plan = PeriodicPlan {
                num_rounds: cfg.rounds,
                refresh: RefreshPolicy {
                    threshold: cfg.key_refresh,
                },
                params: cfg.dh_params()?,
                first_seq_no: 0,
                joins: Default::default(),
            };
            for r in run_periodic(&topo, &sim, &spec, &secrets, &plan)? {
                records.push(ResultRecord::new(
                    r.round,
                    &r.result,
                    r.key_setup.as_ref(),
                    &spec,
                    &secrets,
                ));
            }
        }
        Protocol::Ppmp => {
            let params = PpmpParams::new(cfg.field.unwrap_or(DEFAULT_PPMP_PRIME))?;
            for round in 0..cfg.rounds {
                let rng_seed = keyed_rand(SeedMaterial::new(cfg.seed, round, TAG_PPMP_ROUND));
                let res = ppmp_round(&topo, &sim, &secrets, &params, rng_seed, round)?;
                records.push(ResultRecord::new(round, &res, None, &spec, &secrets));
            }
        }
        Protocol::Sss | Protocol::Nsss => {
            let setup = dfke_round(&topo, &sim, cfg.dh_params()?, cfg.seed)?;
            for round in 0..cfg.rounds {
                let params = SharingParams {
                    field_prime: cfg.field.unwrap_or(DEFAULT_SSS_FIELD),
                    degree: cfg.degree,
                    seq_no: round,
                };
                let res = if cfg.protocol == Protocol::Sss {
                    sss_round(&topo, &sim, &secrets, &setup.tables, &params)?
                } else {
                    nsss_round(
                        &topo,
                        &sim,
                        &secrets,
                        &setup.tables,
                        &params,
                        cfg.nsss_hop_limit(),
                    )?
                };
                let key_setup = (round == 0).then_some(&setup.metrics);
                records.push(ResultRecord::new(round, &res, key_setup, &spec, &secrets));
            }
        }
    }
    Ok(records)
}

#[derive(Serialize)]
struct RunCsvRow<'a> {
    protocol: Protocol,
    round: u32,
    node: NodeId,
    class: &'static str,
    latency: u64,
    radio_on: u64,
    status: &'a str,
    aggregate: Option<f64>,
    correct: bool,
    recovery_used: bool,
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String, HarnessError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn csv_text<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, HarnessError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Records as JSON lines, or one CSV row per node and round.
pub fn render_records(
    records: &[ResultRecord],
    format: OutputFormat,
) -> Result<String, HarnessError> {
    match format {
        OutputFormat::Json => json_lines(records),
        OutputFormat::Csv => csv_text(records.iter().flat_map(|r| {
            r.all_costs().map(move |c| RunCsvRow {
                protocol: r.protocol,
                round: r.round,
                node: c.node,
                class: if c.node == r.initiator.node {
                    "initiator"
                } else {
                    "other"
                },
                latency: c.latency,
                radio_on: c.radio_on,
                status: &r.status,
                aggregate: r.aggregate,
                correct: r.correct,
                recovery_used: r.recovery_used,
            })
        })),
    }
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    render_records(&execute(cfg)?, cfg.format)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub protocol: Protocol,
    pub rounds: u32,
    /// Node-round samples behind the statistics.
    pub samples: usize,
    pub latency_mean: f64,
    pub latency_std: f64,
    pub radio_on_mean: f64,
    pub radio_on_std: f64,
    pub all_correct: bool,
    /// How much less LiPI spends than this protocol, in percent.
    pub lipi_latency_saving_pct: Option<f64>,
    pub lipi_radio_on_saving_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub topology: String,
    pub seed: u64,
    pub rows: Vec<CompareRow>,
}

fn mean_std(values: &[u64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<u64>() as f64 / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

fn saving(lipi: f64, other: f64) -> f64 {
    if other == 0.0 {
        0.0
    } else {
        (other - lipi) / other * 100.0
    }
}

/// Per-protocol cost statistics over every node of every round.
pub fn cmd_compare(entries: &[ExperimentConfig]) -> Result<Comparison, HarnessError> {
    let Some(first) = entries.first().filter(|_| entries.len() >= 2) else {
        return Err(HarnessError::Config(
            "compare needs at least two protocols".into(),
        ));
    };
    if let Some(bad) = entries
        .iter()
        .find(|e| e.topology != first.topology || e.seed != first.seed)
    {
        return Err(HarnessError::Config(format!(
            "entries run on different networks ({} seed {} vs {} seed {})",
            first.topology, first.seed, bad.topology, bad.seed
        )));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let records = execute(entry)?;
        let latency: Vec<u64> = records
            .iter()
            .flat_map(|r| r.all_costs().map(|c| c.latency))
            .collect();
        let radio: Vec<u64> = records
            .iter()
            .flat_map(|r| r.all_costs().map(|c| c.radio_on))
            .collect();
        let (latency_mean, latency_std) = mean_std(&latency);
        let (radio_on_mean, radio_on_std) = mean_std(&radio);
        rows.push(CompareRow {
            protocol: entry.protocol,
            rounds: entry.rounds,
            samples: latency.len(),
            latency_mean,
            latency_std,
            radio_on_mean,
            radio_on_std,
            all_correct: records.iter().all(|r| r.correct),
            lipi_latency_saving_pct: None,
            lipi_radio_on_saving_pct: None,
        });
    }
    if let Some(lipi) = rows.iter().find(|r| r.protocol == Protocol::Lipi).cloned() {
        for row in &mut rows {
            row.lipi_latency_saving_pct = Some(saving(lipi.latency_mean, row.latency_mean));
            row.lipi_radio_on_saving_pct = Some(saving(lipi.radio_on_mean, row.radio_on_mean));
        }
    }
    Ok(Comparison {
        topology: first.topology.to_string(),
        seed: first.seed,
        rows,
    })
}

pub fn render_comparison(cmp: &Comparison, format: OutputFormat) -> Result<String, HarnessError> {
    match format {
        OutputFormat::Json => Ok(serde_json::to_string_pretty(cmp)? + "\n"),
        OutputFormat::Csv => csv_text(&cmp.rows),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    Area,
    Failures,
    Ntx,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::N => "n",
            SweepAxis::Area => "area",
            SweepAxis::Failures => "failures",
            SweepAxis::Ntx => "ntx",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n" => Ok(SweepAxis::N),
            "area" => Ok(SweepAxis::Area),
            "failures" => Ok(SweepAxis::Failures),
            "ntx" => Ok(SweepAxis::Ntx),
            _ => Err(format!("unknown axis {s:?} (n, area, failures, ntx)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: u64,
    pub round: u32,
    pub class: String,
    pub nodes: usize,
    pub mean_latency: f64,
    pub mean_radio_on: f64,
    pub status: String,
    pub correct: bool,
    pub recovery_used: bool,
    pub aggregate: Option<f64>,
}

/// `k` nodes whose silence keeps the rest connected without stretching the
/// diameter, picked from the highest id down and never the initiator.
pub fn pick_failures(
    topo: &Topology,
    initiator: NodeId,
    k: u32,
) -> Result<Vec<NodeId>, HarnessError> {
    let base = topo
        .diameter()
        .ok_or_else(|| HarnessError::Config("failure sweep needs a connected topology".into()))?;
    let mut alive = topo.node_set();
    let mut chosen = Vec::new();
    let order: Vec<NodeId> = topo.nodes().collect();
    for &candidate in order.iter().rev() {
        if chosen.len() == k as usize {
            break;
        }
        if candidate == initiator {
            continue;
        }
        let mut trial = alive.clone();
        trial.remove(&candidate);
        if trial.len() >= 2 && topo.diameter_within(&trial).is_some_and(|d| d <= base) {
            alive = trial;
            chosen.push(candidate);
        }
    }
    if chosen.len() < k as usize {
        return Err(HarnessError::Config(format!(
            "only {} nodes can fail while the rest stay connected",
            chosen.len()
        )));
    }
    Ok(chosen)
}

/// One row per (value, round, node class).
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let mut base = base.clone();
    if axis == SweepAxis::Failures && base.ntx.is_none() {
        // keep the chain budget fixed so only the failures change
        let topo = base.topology.build(base.seed)?;
        base.ntx = Some(base.sim_config(&topo)?.ntx);
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        let small = u32::try_from(value)
            .map_err(|_| HarnessError::Config(format!("axis value {value} too large")))?;
        match axis {
            SweepAxis::N => cfg.topology = cfg.topology.with_n(small)?,
            SweepAxis::Area => cfg.topology = cfg.topology.with_side(value as f64)?,
            SweepAxis::Ntx => cfg.ntx = Some(small),
            SweepAxis::Failures => {
                let topo = cfg.topology.build(cfg.seed)?;
                let already: BTreeSet<NodeId> = cfg.failures.iter().map(|f| f.0.node).collect();
                if !already.is_empty() {
                    return Err(HarnessError::Config(
                        "the failures axis replaces the failure plan; leave it empty".into(),
                    ));
                }
                cfg.failures = pick_failures(&topo, cfg.initiator, small)?
                    .into_iter()
                    .map(|n| FailureSpec(FailureEvent::new(n, FailurePhase::AfterDfkeSilent)))
                    .collect();
            }
        }
        for record in execute(&cfg)? {
            let others = &record.nodes;
            let classes = [
                (
                    "initiator",
                    1,
                    record.initiator.latency as f64,
                    record.initiator.radio_on as f64,
                ),
                (
                    "other",
                    others.len(),
                    record.mean_latency,
                    record.mean_radio_on,
                ),
            ];
            for (class, nodes, mean_latency, mean_radio_on) in classes {
                rows.push(SweepRow {
                    axis,
                    value,
                    round: record.round,
                    class: class.to_string(),
                    nodes,
                    mean_latency,
                    mean_radio_on,
                    status: record.status.clone(),
                    correct: record.correct,
                    recovery_used: record.recovery_used,
                    aggregate: record.aggregate,
                });
            }
        }
    }
    Ok(rows)
}

pub fn render_sweep(rows: &[SweepRow], format: OutputFormat) -> Result<String, HarnessError> {
    match format {
        OutputFormat::Json => json_lines(rows),
        OutputFormat::Csv => csv_text(rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(protocol: Protocol, topology: &str) -> ExperimentConfig {
        ExperimentConfig {
            protocol,
            topology: topology.parse().unwrap(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn run_examples() {
        let rec = execute(&cfg(Protocol::Lipi, "complete:24")).unwrap();
        assert_eq!(rec[0].aggregate_exact, Some(300));
        let mut ring = cfg(Protocol::Lipi, "ring:4");
        ring.secrets = "list:1,2,3,4".parse().unwrap();
        assert_eq!(execute(&ring).unwrap()[0].aggregate_exact, Some(10));
        let mut sss = cfg(Protocol::Sss, "complete:3");
        sss.field = Some(97);
        sss.secrets = "list:2,3,4".parse().unwrap();
        let rec = execute(&sss).unwrap();
        assert_eq!(rec[0].aggregate_exact, Some(9));
        assert!(rec[0].correct);
    }

    #[test]
    fn records_split_initiator() {
        let rec = execute(&cfg(Protocol::Ppmp, "line:5")).unwrap();
        assert_eq!(rec[0].initiator.node, 1);
        assert_eq!(rec[0].nodes.len(), 4);
        assert!(rec[0].nodes.iter().all(|c| c.node != 1));
        assert_eq!(rec[0].communication_rounds, 2);
        assert!(rec[0].key_setup.is_none());
    }

    #[test]
    fn baselines_only_sum() {
        let mut c = cfg(Protocol::Ppmp, "complete:4");
        c.family = "am".parse().unwrap();
        assert!(matches!(execute(&c), Err(HarnessError::Config(_))));
    }

    #[test]
    fn compare_rules() {
        let a = cfg(Protocol::Lipi, "complete:8");
        let b = cfg(Protocol::Ppmp, "complete:8");
        let cmp = cmd_compare(&[a.clone(), b.clone()]).unwrap();
        assert!(cmp.rows[0].radio_on_mean < cmp.rows[1].radio_on_mean);
        assert!(cmp.rows[1].lipi_radio_on_saving_pct.unwrap() > 0.0);
        assert!(cmd_compare(std::slice::from_ref(&a)).is_err());
        let same = cmd_compare(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.rows[1].lipi_radio_on_saving_pct, Some(0.0));
        let other = cfg(Protocol::Ppmp, "complete:9");
        assert!(matches!(
            cmd_compare(&[a, other]),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn failure_picks_keep_network_whole() {
        let topo = Topology::random_geometric_connected(20, 250.0, 100.0, 2, 500).unwrap();
        let picked = pick_failures(&topo, 1, 5).unwrap();
        let mut alive = topo.node_set();
        for p in &picked {
            alive.remove(p);
        }
        assert!(!picked.contains(&1));
        assert!(topo.diameter_within(&alive).unwrap() <= topo.diameter().unwrap());
        assert!(pick_failures(&Topology::line(4), 1, 3).is_err());
    }

    #[test]
    fn sweep_rows() {
        let base = cfg(Protocol::Lipi, "geometric:16:250:100");
        let rows = cmd_sweep(&base, SweepAxis::Failures, &[0, 1, 2]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.correct));
        assert!(cmd_sweep(&base, SweepAxis::N, &[]).is_err());
        let text = render_sweep(&rows, OutputFormat::Csv).unwrap();
        assert!(text.starts_with("axis,value,round,class,"));
    }
}
