//! Append-only, hash-chained audit ledger.
//!
//! Each event commits to its predecessor through `prev_hash`, so any in-place
//! edit breaks the chain at the edited event. Truncating a suffix leaves a valid
//! chain; callers that need to detect it compare against a stored head with
//! [`Ledger::verify_against_head`].
//!
//! Besides storage the ledger keeps two read indexes built as events arrive:
//! arbitrary-user tenures (for identity resolution) and per-session event lists
//! (for session reconstruction).

mod report;

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use strum::{Display, EnumIter, EnumString, IntoStaticStr};

use crate::error::{BrokerError, Result};
use crate::types::{Digest, Timestamp};

pub use report::{ComplianceReport, EfficiencyFlag, EgressCounts, SessionCounts};

/// Actor recorded for events the broker performs on its own behalf.
pub const SYSTEM_ACTOR: &str = "system";

/// The closed action vocabulary. Anything else is rejected at append time.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Display, EnumString, IntoStaticStr, EnumIter,
)]
#[serde(rename_all = "kebab-case")]
#[strum(serialize_all = "kebab-case")]
pub enum Action {
    UserRegister,
    UserDeactivate,
    MfaEnroll,
    Mfa,
    RoleAssign,
    IssuerTrust,
    SubjectMap,
    GroupCreate,
    Membership,
    ProjectRegister,
    Grant,
    Revoke,
    Provision,
    Resize,
    Destroy,
    DiskWrite,
    ShareCreate,
    ShareAcl,
    ExceptionRegister,
    WhitelistSet,
    ProxyAllow,
    ProxyDeny,
    Connect,
    Authn,
    Map,
    Attach,
    CredentialDestroy,
    Close,
    RevokeForcedClose,
    VmLostClose,
    Expire,
    EgressAllow,
    EgressDeny,
    ExportSubmit,
    ExportAdjudicate,
    Release,
    ImageSubmit,
    ImageVet,
    ImageApprove,
    Deploy,
    Retire,
    ImageRevoke,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        self.into()
    }

    /// Actions that end a session.
    pub fn is_session_end(self) -> bool {
        matches!(self, Action::Close | Action::RevokeForcedClose | Action::VmLostClose)
    }
}

pub type Detail = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    pub action: Action,
    pub object: String,
    pub detail: Detail,
    pub prev_hash: Digest,
    pub this_hash: Digest,
}

impl AuditEvent {
    /// Recomputes the hash this event should carry given its own fields.
    pub fn expected_hash(&self) -> Digest {
        chain_hash(self.seq, self.at, &self.actor, self.action, &self.object, &self.detail, &self.prev_hash)
    }

    pub fn detail(&self, key: &str) -> Option<&str> {
        self.detail.get(key).map(String::as_str)
    }

    /// One export line: the struct's field order, hashes in lowercase hex.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit events always serialize")
    }
}

fn put_field(h: &mut Sha256, s: &str) {
    h.update((s.len() as u64).to_be_bytes());
    h.update(s.as_bytes());
}

/// Length-prefixed encoding of `seq ‖ at ‖ actor ‖ action ‖ object ‖ detail ‖ prev_hash`.
pub fn chain_hash(
    seq: u64,
    at: Timestamp,
    actor: &str,
    action: Action,
    object: &str,
    detail: &Detail,
    prev_hash: &Digest,
) -> Digest {
    let mut h = Sha256::new();
    h.update(seq.to_be_bytes());
    h.update(at.0.to_be_bytes());
    put_field(&mut h, actor);
    put_field(&mut h, action.as_str());
    put_field(&mut h, object);
    h.update((detail.len() as u64).to_be_bytes());
    for (k, v) in detail {
        put_field(&mut h, k);
        put_field(&mut h, v);
    }
    h.update(prev_hash.0);
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChainStatus {
    pub valid: bool,
    pub first_bad_seq: Option<u64>,
}

/// Verifies an event sequence: gapless seq from 1, correct links, correct hashes.
pub fn verify_events(events: &[AuditEvent]) -> ChainStatus {
    let mut prev = Digest::ZERO;
    for (i, ev) in events.iter().enumerate() {
        let pos = i as u64 + 1;
        if ev.seq != pos || ev.prev_hash != prev || ev.this_hash != ev.expected_hash() {
            return ChainStatus { valid: false, first_bad_seq: Some(pos) };
        }
        prev = ev.this_hash;
    }
    ChainStatus { valid: true, first_bad_seq: None }
}

/// Parses a ledger export back into events. No verification is performed.
pub fn parse_export(text: &str) -> std::result::Result<Vec<AuditEvent>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone)]
struct Tenure {
    session: String,
    principal: String,
    from: Timestamp,
    to: Option<Timestamp>,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    events: Vec<AuditEvent>,
    tenures: BTreeMap<String, Vec<Tenure>>,
    open_tenures: BTreeMap<String, (String, usize)>,
    by_session: BTreeMap<String, Vec<usize>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn head_hash(&self) -> Digest {
        self.events.last().map_or(Digest::ZERO, |e| e.this_hash)
    }

    /// Appends an event whose action is given by name.
    pub fn append(&mut self, at: Timestamp, actor: &str, action: &str, object: &str, detail: Detail) -> Result<u64> {
        let action = Action::from_str(action).map_err(|_| BrokerError::UnknownAction(action.to_owned()))?;
        Ok(self.record(at, actor, action, object, detail))
    }

    pub(crate) fn record(&mut self, at: Timestamp, actor: &str, action: Action, object: &str, detail: Detail) -> u64 {
        let seq = self.events.len() as u64 + 1;
        let prev_hash = self.head_hash();
        let this_hash = chain_hash(seq, at, actor, action, object, &detail, &prev_hash);
        let event = AuditEvent {
            seq,
            at,
            actor: actor.to_owned(),
            action,
            object: object.to_owned(),
            detail,
            prev_hash,
            this_hash,
        };
        self.index(&event);
        self.events.push(event);
        seq
    }

    fn index(&mut self, ev: &AuditEvent) {
        let pos = self.events.len();
        let session = ev.detail("session").map(str::to_owned).or_else(|| {
            (ev.action == Action::Authn).then(|| ev.object.clone())
        });
        if let Some(session) = &session {
            self.by_session.entry(session.clone()).or_default().push(pos);
        }
        match ev.action {
            Action::Map => {
                if let (Some(session), Some(principal)) = (session, ev.detail("principal")) {
                    let list = self.tenures.entry(ev.object.clone()).or_default();
                    list.push(Tenure { session: session.clone(), principal: principal.to_owned(), from: ev.at, to: None });
                    self.open_tenures.insert(session, (ev.object.clone(), list.len() - 1));
                }
            }
            a if a.is_session_end() => {
                if let Some((name, idx)) = session.and_then(|s| self.open_tenures.remove(&s)) {
                    if let Some(t) = self.tenures.get_mut(&name).and_then(|l| l.get_mut(idx)) {
                        t.to = Some(ev.at);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn verify_chain(&self) -> ChainStatus {
        verify_events(&self.events)
    }

    /// Chain check plus a length check against an externally stored head.
    pub fn verify_against_head(&self, expected_len: u64, expected_head: &Digest) -> ChainStatus {
        let status = self.verify_chain();
        if !status.valid {
            return status;
        }
        let len = self.events.len() as u64;
        if len != expected_len || self.head_hash() != *expected_head {
            return ChainStatus { valid: false, first_bad_seq: Some(len.min(expected_len) + 1) };
        }
        status
    }

    /// The real principal whose session owned `name` at `at`. Session
    /// intervals are closed at both ends.
    pub fn resolve_identity(&self, name: &str, at: Timestamp) -> Result<String> {
        let tenures = self.tenures.get(name).ok_or_else(|| BrokerError::UnknownArbitraryUser(name.to_owned()))?;
        tenures
            .iter()
            .find(|t| t.from <= at && t.to.map_or(true, |to| at <= to))
            .map(|t| t.principal.clone())
            .ok_or_else(|| BrokerError::NoSessionAtTime { name: name.to_owned(), at })
    }

    /// Sessions recorded for an arbitrary user, oldest first.
    pub fn sessions_of(&self, name: &str) -> Vec<&str> {
        self.tenures.get(name).map_or_else(Vec::new, |l| l.iter().map(|t| t.session.as_str()).collect())
    }

    pub fn reconstruct_session(&self, session: &str) -> Result<Vec<&AuditEvent>> {
        let idx = self.by_session.get(session).ok_or_else(|| BrokerError::UnknownSession(session.to_owned()))?;
        Ok(idx.iter().map(|&i| &self.events[i]).collect())
    }

    /// One event per line, newline-terminated.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&ev.to_line());
            out.push('\n');
        }
        out
    }
}

/// Builds a [`Detail`] map from key/value pairs.
pub fn detail<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Detail {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Ledger {
        let mut l = Ledger::new();
        for i in 0..n {
            l.append(Timestamp(i as u64), "ab123", "grant", &format!("p{i}"), detail([("mode", "rdp")])).unwrap();
        }
        l
    }

    #[test]
    fn genesis_uses_zero_prev_hash() {
        let l = sample(1);
        assert_eq!(l.events()[0].seq, 1);
        assert_eq!(l.events()[0].prev_hash, Digest::ZERO);
    }

    #[test]
    fn seq_increments() {
        let mut l = sample(4);
        let seq = l.append(Timestamp(9), "x", "revoke", "p", Detail::new()).unwrap();
        assert_eq!(seq, 5);
    }

    #[test]
    fn unknown_action_rejected() {
        let mut l = Ledger::new();
        let err = l.append(Timestamp(0), "x", "delete-everything", "p", Detail::new()).unwrap_err();
        assert_eq!(err, BrokerError::UnknownAction("delete-everything".into()));
        assert!(l.is_empty());
    }

    #[test]
    fn untampered_chain_verifies() {
        assert_eq!(sample(10).verify_chain(), ChainStatus { valid: true, first_bad_seq: None });
    }

    #[test]
    fn byte_flip_in_detail_detected_at_that_event() {
        let l = sample(10);
        let mut events = l.events().to_vec();
        let v = events[4].detail.get_mut("mode").unwrap();
        let mut bytes = v.clone().into_bytes();
        bytes[0] ^= 0x01;
        *v = String::from_utf8(bytes).unwrap();
        assert_eq!(verify_events(&events), ChainStatus { valid: false, first_bad_seq: Some(5) });
    }

    #[test]
    fn suffix_truncation_is_only_caught_by_head() {
        let l = sample(10);
        let (len, head) = (l.len() as u64, l.head_hash());
        let truncated: Vec<_> = l.events()[..7].to_vec();
        assert!(verify_events(&truncated).valid);
        let mut t = Ledger::new();
        for ev in &truncated {
            t.record(ev.at, &ev.actor, ev.action, &ev.object, ev.detail.clone());
        }
        let status = t.verify_against_head(len, &head);
        assert!(!status.valid);
        assert_eq!(status.first_bad_seq, Some(8));
    }

    #[test]
    fn export_round_trips() {
        let l = sample(3);
        let parsed = parse_export(&l.export()).unwrap();
        assert_eq!(parsed, l.events());
        let first = l.export().lines().next().unwrap().to_owned();
        assert!(first.starts_with("{\"seq\":1,\"at\":0,\"actor\":\"ab123\",\"action\":\"grant\""));
    }

    #[test]
    fn identity_resolution_respects_tenure() {
        let mut l = Ledger::new();
        let map = detail([("session", "s-1"), ("principal", "ab123")]);
        l.record(Timestamp(10), "ab123", Action::Map, "u-0000abcd", map);
        l.record(Timestamp(20), SYSTEM_ACTOR, Action::Close, "s-1", detail([("session", "s-1")]));
        assert_eq!(l.resolve_identity("u-0000abcd", Timestamp(15)).unwrap(), "ab123");
        assert_eq!(l.resolve_identity("u-0000abcd", Timestamp(20)).unwrap(), "ab123");
        assert!(matches!(l.resolve_identity("u-0000abcd", Timestamp(5)), Err(BrokerError::NoSessionAtTime { .. })));
        assert!(matches!(l.resolve_identity("u-ffffffff", Timestamp(15)), Err(BrokerError::UnknownArbitraryUser(_))));
    }

    #[test]
    fn action_names_round_trip() {
        use strum::IntoEnumIterator;
        for a in Action::iter() {
            assert_eq!(Action::from_str(a.as_str()).unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.as_str()));
        }
    }
}
