use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use lipi_core::adversary::{shamir_share_attack, AttackStatus, Coalition};
use lipi_core::baselines::{nsss_round, sss_round, SharingParams};
use lipi_core::dfke::dfke_round;
use lipi_core::harness::{execute, render_records, ExperimentConfig, OutputFormat};
use lipi_core::modmath::ModParams;
use lipi_core::outcome::Protocol;
use lipi_core::stnet::{SimConfig, Topology};
use lipi_core::NodeId;

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop::sample::select(Protocol::ALL.to_vec()),
        prop::sample::select(vec!["complete:6", "ring:7", "line:5", "geometric:10:200"]),
        prop::sample::select(vec!["ids", "uniform:0:5000", "uniform:1:9"]),
        prop::option::of(prop::sample::select(vec![
            "5:silent", "4:before", "3:mid:1",
        ])),
        1u32..3,
        any::<u64>(),
        prop::bool::ANY,
    )
        .prop_map(
            |(protocol, topology, secrets, failure, rounds, seed, csv)| {
                let mut cfg = ExperimentConfig {
                    protocol,
                    topology: topology.parse().unwrap(),
                    secrets: secrets.parse().unwrap(),
                    failures: failure.into_iter().map(|f| f.parse().unwrap()).collect(),
                    rounds,
                    seed,
                    ..ExperimentConfig::default()
                };
                if csv {
                    cfg.format = OutputFormat::Csv;
                }
                cfg
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_round_trips_and_reproduces(cfg in arb_config()) {
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        match (execute(&cfg), execute(&back)) {
            (Ok(a), Ok(b)) => {
                let (ra, rb) = (render_records(&a, cfg.format).unwrap(), render_records(&b, cfg.format).unwrap());
                prop_assert_eq!(ra, rb);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "runs diverged"),
        }
    }

    #[test]
    fn shares_stay_sealed_without_keys(n in 3u32..9, seed in any::<u64>(), hops in 1u32..3) {
        let topo = Topology::ring(n);
        let sim = SimConfig::full_outreach(&topo, seed);
        let keys = dfke_round(&topo, &sim, ModParams::default(), seed).unwrap().tables;
        let secrets: BTreeMap<NodeId, u64> = topo.nodes().map(|i| (i, seed % 1000 + i as u64)).collect();
        let params = SharingParams { seq_no: seed as u32, ..SharingParams::default() };
        let sss = sss_round(&topo, &sim, &secrets, &keys, &params).unwrap();
        let nsss = nsss_round(&topo, &sim, &secrets, &keys, &params, hops).unwrap();
        let outsiders = Coalition { members: BTreeSet::from([n + 100]), ..Coalition::default() };
        for trace in [&sss.trace, &nsss.trace] {
            for target in topo.nodes() {
                let out = shamir_share_attack(trace, &outsiders, target, params.field_prime, 1).unwrap();
                prop_assert_ne!(out.status, AttackStatus::Exact);
            }
        }
    }
}
