use serde_json::Value;

use lipi_core::harness::{execute, ExperimentConfig};
use lipi_core::outcome::Protocol;

fn schema() -> jsonschema::Validator {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../docs/result-record.schema.json"
    ))
    .expect("schema shipped in docs");
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).expect("schema compiles")
}

#[test]
fn every_record_validates() {
    let validator = schema();
    let mut cases = Vec::new();
    for protocol in Protocol::ALL {
        cases.push(ExperimentConfig {
            protocol,
            topology: "geometric:12:200".parse().unwrap(),
            rounds: 2,
            ..ExperimentConfig::default()
        });
    }
    cases.push(ExperimentConfig {
        topology: "ring:6".parse().unwrap(),
        failures: vec!["4:silent".parse().unwrap()],
        ..ExperimentConfig::default()
    });
    cases.push(ExperimentConfig {
        topology: "line:4".parse().unwrap(),
        failures: vec!["1:before".parse().unwrap()],
        initiator: 1,
        ..ExperimentConfig::default()
    });
    cases.push(ExperimentConfig {
        protocol: Protocol::Ppmp,
        topology: "complete:3".parse().unwrap(),
        field: Some(11),
        secrets: "list:5,6,7".parse().unwrap(),
        ..ExperimentConfig::default()
    });
    cases.push(ExperimentConfig {
        topology: "complete:5".parse().unwrap(),
        family: "harmonic".parse().unwrap(),
        ..ExperimentConfig::default()
    });
    let mut statuses = std::collections::BTreeSet::new();
    for cfg in &cases {
        let records = match execute(cfg) {
            Ok(r) => r,
            // an initiator that is down before key setup stops the run
            Err(e) => {
                assert!(
                    cfg.failures.iter().any(|f| f.to_string() == "1:before"),
                    "{e}"
                );
                continue;
            }
        };
        for rec in records {
            let value: Value = serde_json::to_value(&rec).unwrap();
            let errors: Vec<String> = validator
                .iter_errors(&value)
                .map(|e| e.to_string())
                .collect();
            assert!(errors.is_empty(), "{errors:?} in {value}");
            statuses.insert(rec.status);
        }
    }
    assert!(
        statuses.contains("completed") && statuses.contains("overflow"),
        "{statuses:?}"
    );
}

#[test]
fn schema_rejects_drift() {
    let validator = schema();
    let rec = execute(&ExperimentConfig::default()).unwrap().remove(0);
    let mut value = serde_json::to_value(&rec).unwrap();
    value["extra"] = Value::Bool(true);
    assert!(!validator.is_valid(&value));
    let mut value = serde_json::to_value(&rec).unwrap();
    value.as_object_mut().unwrap().remove("initiator");
    assert!(!validator.is_valid(&value));
}
