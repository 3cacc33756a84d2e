//! Protected-enclave access broker.
//!
//! [`Broker`] owns all state. Subsystems add operations to it from their own
//! modules: `directory` (identities and groups), `policy` (projects and access
//! decisions), `enclave` (topology, reachability, VMs and shares), `session`
//! (brokered sessions and ephemeral credentials), `egress` (clipboard, file
//! egress and export review), `pipeline` (container images) and `ledger`
//! (the hash-chained audit log). `scenario` loads TOML inputs and replays
//! scripted steps.

pub mod broker;
pub mod directory;
pub mod egress;
pub mod enclave;
pub mod error;
pub mod ledger;
pub mod pipeline;
pub mod policy;
pub mod scenario;
pub mod session;
pub mod types;

pub use broker::{Broker, BrokerConfig, VmSize, DEFAULT_RETENTION_DAYS};
pub use error::{BrokerError, Result};
pub use types::{AccessMode, Decision, Digest, Period, Rule, Secret, Timestamp, Verdict};
