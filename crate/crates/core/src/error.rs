use thiserror::Error;

use crate::types::{Rule, Timestamp};

pub type Result<T, E = BrokerError> = std::result::Result<T, E>;

/// Every failure an operation can report. [`BrokerError::code`] gives the stable
/// identifier used by scenario expectations and the wire protocol.
#[derive(Debug, Clone, PartialEq, Eq, Error, strum::IntoStaticStr, strum::VariantNames)]
pub enum BrokerError {
    // directory
    #[error("netid `{0}` is already registered")]
    DuplicateNetid(String),
    #[error("netid `{0}` collides with the broker's arbitrary-user namespace")]
    ReservedNetid(String),
    #[error("affiliate `{0}` must name a sponsor")]
    MissingSponsor(String),
    #[error("sponsor `{0}` is absent, inactive, or not a member")]
    InvalidSponsor(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` is inactive")]
    UserInactive(String),
    #[error("issuer `{0}` is not trusted")]
    UntrustedIssuer(String),
    #[error("assertion is outside its validity window")]
    AssertionExpired,
    #[error("assertion expires before it was issued")]
    InvalidAssertion,
    #[error("subject `{subject}` from `{issuer}` has no local mapping")]
    UnmappedSubject { issuer: String, subject: String },
    #[error("multi-factor authentication required")]
    MfaRequired,
    #[error("multi-factor proof rejected")]
    MfaFailed,
    #[error("`{actor}` may not {action}")]
    Unauthorized { actor: String, action: String },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("group `{0}` already exists")]
    DuplicateGroup(String),
    #[error("shadow group `{0}` is managed by the session broker")]
    ShadowGroupImmutable(String),

    // policy
    #[error("project `{0}` already exists")]
    DuplicateProject(String),
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("a project needs at least one steward")]
    EmptyStewards,
    #[error("project `{0}` is public; grants do not apply")]
    PublicProjectNoGrants(String),

    // enclave
    #[error("no host has capacity for the request")]
    NoCapacity,
    #[error("no host is dedicated to the enclave")]
    NoDedicatedHost,
    #[error("invalid input: {0}")]
    InvalidSpec(String),
    #[error("unknown vm `{0}`")]
    UnknownVm(String),
    #[error("vm `{0}` is destroyed")]
    VmDestroyed(String),
    #[error("vm `{0}` is not running")]
    VmNotRunning(String),
    #[error("vm `{0}` was already destroyed")]
    AlreadyDestroyed(String),
    #[error("disk of vm `{0}` was destroyed with the vm")]
    ContentDestroyed(String),
    #[error("protocol `{0}` is not permitted inside the enclave")]
    ProtocolForbidden(String),
    #[error("iSCSI storage requires a dedicated device")]
    IsolationRequired,
    #[error("unknown share `{0}`")]
    UnknownShare(String),
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("exception rule `{0}` has no documented justification")]
    UndocumentedRule(String),
    #[error("invalid exception rule: {0}")]
    InvalidRule(String),
    #[error("exception rule `{0}` already exists")]
    DuplicateRule(String),

    // sessions
    #[error("access denied ({0})")]
    AccessDenied(Rule),
    #[error("vpn access requires a managed endpoint")]
    UnmanagedEndpoint,
    #[error("no gateway path ({0})")]
    NoPath(Rule),
    #[error("no vm available: {0}")]
    VmUnavailable(String),
    #[error("`{netid}` already has an open session on `{project}`")]
    SessionAlreadyOpen { netid: String, project: String },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("session `{0}` is already closed")]
    SessionAlreadyClosed(String),
    #[error("arbitrary user `{0}` already holds an active credential")]
    CredentialAlreadyActive(String),
    #[error("retention for `{netid}` on `{project}` has expired")]
    RetentionExpired { netid: String, project: String },
    #[error("no retained vm for `{netid}` on `{project}`")]
    NoRetentionBinding { netid: String, project: String },

    // egress
    #[error("export payload is empty")]
    EmptyPayload,
    #[error("unknown export request `{0}`")]
    UnknownExport(String),
    #[error("requesters may not adjudicate their own exports")]
    SelfAdjudication,
    #[error("export request `{0}` was already adjudicated")]
    AlreadyAdjudicated(String),
    #[error("adjudication requires a rationale")]
    EmptyRationale,

    // delivery pipeline
    #[error("images must be submitted from outside the enclave")]
    InsideEnclaveSubmission,
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("image `{image}` is {state}")]
    WrongState { image: String, state: String },
    #[error("vetting report is empty")]
    EmptyReport,
    #[error("image `{0}` is not approved")]
    NotApproved(String),
    #[error("presented digest does not match image `{0}`")]
    DigestMismatch(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("image `{image}` targets `{expected}`, not `{actual}`")]
    ProjectMismatch { image: String, expected: String, actual: String },

    // ledger
    #[error("unknown audit action `{0}`")]
    UnknownAction(String),
    #[error("unknown arbitrary user `{0}`")]
    UnknownArbitraryUser(String),
    #[error("`{name}` had no session at {at}")]
    NoSessionAtTime { name: String, at: Timestamp },
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        self.into()
    }

    /// True when `code` names a variant.
    pub fn is_code(code: &str) -> bool {
        <Self as strum::VariantNames>::VARIANTS.contains(&code)
    }

    pub(crate) fn unauthorized(actor: &str, action: impl Into<String>) -> Self {
        BrokerError::Unauthorized { actor: actor.to_owned(), action: action.into() }
    }
}
