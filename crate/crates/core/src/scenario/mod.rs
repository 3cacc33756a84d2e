//! Deterministic replay of scripted steps against a broker loaded from TOML
//! topology and directory files.
//!
//! A run stops at the first step whose result does not match its expectation.
//! Exit statuses: 0 every step matched, 1 an expectation mismatch, 2 invalid
//! input, 3 an internal failure.

mod engine;
pub mod generate;
mod load;
mod step;

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Serialize;

pub use engine::{describe, parse_rule_endpoint, satisfies, Engine, Outcome, StepError};
pub use load::{
    directory_summary, parse_directory, parse_scenario, parse_topology, DirectorySpec, GroupEntry, LoadError, LoadErrorKind,
    Located, ProjectEntry, Scenario, SubjectEntry, UserEntry,
};
pub use step::{Expect, Op, Step};

use crate::broker::{Broker, BrokerConfig};
use crate::enclave::Topology;
use crate::types::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Pass,
    Mismatch,
    InvalidInput,
    Internal,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Pass => 0,
            ExitStatus::Mismatch => 1,
            ExitStatus::InvalidInput => 2,
            ExitStatus::Internal => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub line: Option<usize>,
    pub op: String,
    pub expected: Option<String>,
    pub actual: String,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub status: ExitStatus,
    pub records: Vec<StepRecord>,
    /// Explanation of the step that stopped the run.
    pub diff: Option<String>,
    #[serde(skip)]
    pub ledger_export: String,
}

/// Overrides applied on top of what a scenario file declares.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub retention_days: Option<u64>,
}

/// Broker settings for a scenario: overrides first, then the file, then
/// defaults.
pub fn config_for(scenario: &Scenario, overrides: Overrides) -> BrokerConfig {
    let mut config = BrokerConfig::default();
    if let Some(seed) = overrides.seed.or(scenario.seed) {
        config.seed = seed;
    }
    if let Some(days) = overrides.retention_days.or(scenario.retention_days) {
        config.retention_days = days;
    }
    config
}

/// Builds an engine from a topology and a directory.
pub fn load(topology: Topology, directory: &DirectorySpec, config: BrokerConfig) -> Result<Engine, LoadError> {
    let mut engine = Engine::new(Broker::new(config, topology));
    directory.apply(&mut engine)?;
    Ok(engine)
}

fn location(index: usize, line: Option<usize>, op: &str) -> String {
    match line {
        Some(l) => format!("step {index} (line {l}) `{op}`"),
        None => format!("step {index} `{op}`"),
    }
}

/// Runs steps in order, stopping at the first failure.
pub fn run_steps(engine: &mut Engine, steps: &[Located<Step>]) -> RunReport {
    let mut records = Vec::with_capacity(steps.len());
    let mut status = ExitStatus::Pass;
    let mut diff = None;
    for (index, located) in steps.iter().enumerate() {
        let step = &located.value;
        let op = step.op.name();
        let result = match catch_unwind(AssertUnwindSafe(|| engine.execute(step))) {
            Ok(r) => r,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".to_owned());
                status = ExitStatus::Internal;
                diff = Some(format!("{}: internal error: {msg}", location(index, located.line, &op)));
                break;
            }
        };
        let mut matched = satisfies(step.expect.as_ref(), &result);
        let mut actual = describe(&result);
        if let (Some(want), Ok(out)) = (&step.equals, &result) {
            let got = out.text();
            actual = format!("{actual} = {got}");
            matched &= got == *want;
        }
        let expected = match (&step.expect, &step.equals) {
            (None, None) => None,
            (e, v) => Some(format!(
                "{}{}",
                e.as_ref().map_or("ok".to_owned(), ToString::to_string),
                v.as_ref().map_or(String::new(), |v| format!(" = {v}"))
            )),
        };
        records.push(StepRecord { index, line: located.line, op: op.clone(), expected: expected.clone(), actual: actual.clone(), matched });
        if let Err(StepError::Invalid(m)) = &result {
            status = ExitStatus::InvalidInput;
            diff = Some(format!("{}: {m}", location(index, located.line, &op)));
            break;
        }
        if !matched {
            status = ExitStatus::Mismatch;
            diff = Some(format!(
                "{}\n- expected: {}\n+ actual:   {actual}",
                location(index, located.line, &op),
                expected.unwrap_or_else(|| "ok".to_owned())
            ));
            break;
        }
    }
    RunReport { status, records, diff, ledger_export: engine.broker().ledger().export() }
}

pub fn run_scenario(engine: &mut Engine, scenario: &Scenario) -> RunReport {
    engine.broker_mut().advance_to(Timestamp(scenario.clock));
    run_steps(engine, &scenario.steps)
}

/// A named input file.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub file: &'a str,
    pub text: &'a str,
}

/// Parses all three inputs, loads the broker and runs the scenario.
pub fn replay(topology: Source, directory: Source, scenario: Source, overrides: Overrides) -> Result<RunReport, LoadError> {
    let topo = parse_topology(topology.file, topology.text)?;
    let dir = parse_directory(directory.file, directory.text)?;
    let sc = parse_scenario(scenario.file, scenario.text)?;
    let mut engine = load(topo, &dir, config_for(&sc, overrides))?;
    Ok(run_scenario(&mut engine, &sc))
}
