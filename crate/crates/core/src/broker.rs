//! The broker: one state container shared by every subsystem.
//!
//! Each subsystem module adds its operations to [`Broker`] in its own `impl`
//! block. Mutating operations take `&mut self`, so a single owner (or a lock
//! around the broker) is the serialization point for directory, policy,
//! session, VM and ledger writes. Read-only queries such as `check_access`,
//! `is_reachable` and `authenticate_to_vm` take `&self`.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::directory::Directory;
use crate::egress::ExportDesk;
use crate::enclave::{Enclave, Topology, ZoneId};
use crate::error::{BrokerError, Result};
use crate::ledger::{Action, AuditEvent, ChainStatus, ComplianceReport, Detail, Ledger};
use crate::pipeline::Pipeline;
use crate::policy::Project;
use crate::session::{SessionTable, Transcript};
use crate::types::{Period, Timestamp};

pub const DEFAULT_RETENTION_DAYS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmSize {
    pub cpu: u32,
    pub ram_gb: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub seed: u64,
    pub retention_days: u64,
    /// Allocation for VMs provisioned by `open_session`.
    pub session_vm: VmSize,
    /// Allocation for VMs hosting deployed images.
    pub instance_vm: VmSize,
    /// Whether one principal may hold two open sessions on the same project.
    pub allow_concurrent_sessions: bool,
    /// Zone brokered clients connect from.
    pub client_origin: ZoneId,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            seed: 0,
            retention_days: DEFAULT_RETENTION_DAYS,
            session_vm: VmSize { cpu: 2, ram_gb: 8 },
            instance_vm: VmSize { cpu: 2, ram_gb: 4 },
            allow_concurrent_sessions: false,
            client_origin: ZoneId::Internet,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct IdCounters {
    counters: BTreeMap<&'static str, u64>,
}

impl IdCounters {
    pub(crate) fn next(&mut self, prefix: &'static str, width: usize) -> String {
        let n = self.counters.entry(prefix).or_insert(0);
        *n += 1;
        format!("{prefix}-{:0width$}", *n, width = width)
    }
}

#[derive(Debug, Clone)]
pub struct Broker {
    pub(crate) config: BrokerConfig,
    pub(crate) rng: ChaCha20Rng,
    pub(crate) clock: Timestamp,
    pub(crate) ids: IdCounters,
    pub(crate) directory: Directory,
    pub(crate) projects: BTreeMap<String, Project>,
    pub(crate) enclave: Enclave,
    pub(crate) sessions: SessionTable,
    pub(crate) exports: ExportDesk,
    pub(crate) pipeline: Pipeline,
    pub(crate) ledger: Ledger,
    pub(crate) transcript: Transcript,
}

impl Broker {
    pub fn new(config: BrokerConfig, topology: Topology) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Broker {
            rng,
            clock: Timestamp(0),
            ids: IdCounters::default(),
            directory: Directory::default(),
            projects: BTreeMap::new(),
            enclave: Enclave::new(topology),
            sessions: SessionTable::default(),
            exports: ExportDesk::default(),
            pipeline: Pipeline::default(),
            ledger: Ledger::new(),
            transcript: Transcript::default(),
            config,
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn topology(&self) -> &Topology {
        &self.enclave.topology
    }

    pub fn now(&self) -> Timestamp {
        self.clock
    }

    /// Moves the simulated clock forward. Earlier times are ignored.
    pub fn advance_to(&mut self, at: Timestamp) {
        if at > self.clock {
            self.clock = at;
        }
    }

    pub fn resolve_identity(&self, arbitrary_user: &str, at: Timestamp) -> Result<String> {
        self.ledger.resolve_identity(arbitrary_user, at)
    }

    pub fn reconstruct_session(&self, session: &str) -> Result<Vec<&AuditEvent>> {
        self.ledger.reconstruct_session(session)
    }

    pub fn verify_chain(&self) -> ChainStatus {
        self.ledger.verify_chain()
    }

    pub fn compliance_report(&self, project: &str, period: Period) -> Result<ComplianceReport> {
        self.project_ref(project)?;
        Ok(ComplianceReport::from_events(self.ledger.events(), project, period))
    }

    pub(crate) fn log(&mut self, actor: &str, action: Action, object: &str, detail: Detail) -> u64 {
        let at = self.clock;
        self.ledger.record(at, actor, action, object, detail)
    }

    pub(crate) fn random_hex(&mut self, bytes: usize) -> String {
        let mut buf = vec![0u8; bytes];
        self.rng.fill_bytes(&mut buf);
        hex::encode(buf)
    }

    pub(crate) fn project_ref(&self, id: &str) -> Result<&Project> {
        self.projects.get(id).ok_or_else(|| BrokerError::UnknownProject(id.to_owned()))
    }

    pub(crate) fn project_mut(&mut self, id: &str) -> Result<&mut Project> {
        self.projects.get_mut(id).ok_or_else(|| BrokerError::UnknownProject(id.to_owned()))
    }

    pub(crate) fn retention_secs(&self, project: &str) -> u64 {
        let days = self.projects.get(project).and_then(|p| p.retention_days).unwrap_or(self.config.retention_days);
        days.saturating_mul(crate::types::SECS_PER_DAY)
    }
}
