//! JSON reports with provenance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Scenario, SuiteName};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Informational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub name: SuiteName,
    pub status: Status,
    pub constants: BTreeMap<String, f64>,
    pub slopes: BTreeMap<String, f64>,
    pub samples: usize,
    /// Launches lost to grazing stalls.
    pub stalls: usize,
    pub notes: Vec<String>,
    pub runtime_s: f64,
}

impl SuiteRecord {
    pub fn new(name: SuiteName) -> Self {
        Self {
            name,
            status: Status::Informational,
            constants: BTreeMap::new(),
            slopes: BTreeMap::new(),
            samples: 0,
            stalls: 0,
            notes: Vec::new(),
            runtime_s: 0.0,
        }
    }

    pub fn constant(&mut self, key: &str, value: f64) -> &mut Self {
        self.constants.insert(key.to_string(), value);
        self
    }

    pub fn slope(&mut self, key: &str, value: f64) -> &mut Self {
        self.slopes.insert(key.to_string(), value);
        self
    }

    pub fn note(&mut self, msg: impl Into<String>) -> &mut Self {
        self.notes.push(msg.into());
        self
    }

    /// Record one pass/fail check; any failing check fails the suite.
    pub fn check(&mut self, ok: bool, what: impl Into<String>) -> &mut Self {
        if !ok {
            self.status = Status::Fail;
            self.notes.push(format!("failed: {}", what.into()));
        } else if self.status == Status::Informational {
            self.status = Status::Pass;
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.constants.get(key).or_else(|| self.slopes.get(key)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let digest = Sha256::digest(scenario.to_toml()?.as_bytes());
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed: scenario.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub suites: Vec<SuiteRecord>,
}

/// Exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_SUITE_FAILURE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_STALL: i32 = 4;

impl Report {
    pub fn suite(&self, name: SuiteName) -> Option<&SuiteRecord> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn stalls(&self) -> usize {
        self.suites.iter().map(|s| s.stalls).sum()
    }

    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.status != Status::Fail)
    }

    pub fn exit_code(&self, stall_budget: usize) -> i32 {
        if self.stalls() > stall_budget {
            EXIT_STALL
        } else if self.passed() {
            EXIT_PASS
        } else {
            EXIT_SUITE_FAILURE
        }
    }

    /// The report without runtimes; equal for equal config and seed.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(suites) = v.get_mut("suites").and_then(|s| s.as_array_mut()) {
            for s in suites {
                if let Some(o) = s.as_object_mut() {
                    o.remove("runtime_s");
                }
            }
        }
        v
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
