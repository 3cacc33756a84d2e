//! Mode-dependent clipboard and file egress, and honest-broker export review.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strum::{Display, EnumIter, EnumString, IntoStaticStr};

use crate::broker::Broker;
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action};
use crate::session::Session;
use crate::types::{AccessMode, Decision, Rule, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString, EnumIter, IntoStaticStr)]
#[serde(rename_all = "kebab-case")]
#[strum(serialize_all = "kebab-case", ascii_case_insensitive)]
pub enum EgressKind {
    ClipboardIn,
    ClipboardOut,
    FileOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum ClipboardDirection {
    In,
    Out,
}

/// The egress table. RDP sessions move nothing in either direction; VPN
/// sessions may, but only from a managed endpoint.
pub fn egress_decision(mode: AccessMode, endpoint_managed: bool, kind: EgressKind) -> Decision {
    match (mode, kind) {
        (AccessMode::Rdp, EgressKind::FileOut) => Decision::deny(Rule::RdpNoEgress),
        (AccessMode::Rdp, _) => Decision::deny(Rule::RdpClipboardDisabled),
        (AccessMode::Vpn, _) if !endpoint_managed => Decision::deny(Rule::UnmanagedEndpoint),
        (AccessMode::Vpn, EgressKind::FileOut) => Decision::allow(Rule::VpnManagedEndpoint),
        (AccessMode::Vpn, _) => Decision::allow(Rule::VpnClipboard),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgressAttempt {
    pub session: String,
    pub kind: EgressKind,
    pub object: String,
    pub at: Timestamp,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum ExportStatus {
    Pending,
    Approved,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum ExportVerdict {
    Approve,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub id: String,
    pub project: String,
    pub requester: String,
    pub session: String,
    pub mode: AccessMode,
    pub payload: String,
    pub status: ExportStatus,
    pub broker: Option<String>,
    pub rationale: Option<String>,
    pub release_token: Option<String>,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ExportDesk {
    pub(crate) attempts: Vec<EgressAttempt>,
    pub(crate) requests: BTreeMap<String, ExportRequest>,
}

impl Broker {
    pub fn egress_attempts(&self) -> &[EgressAttempt] {
        &self.exports.attempts
    }

    pub fn export_request(&self, id: &str) -> Result<&ExportRequest> {
        self.exports.requests.get(id).ok_or_else(|| BrokerError::UnknownExport(id.to_owned()))
    }

    pub fn export_requests(&self) -> impl Iterator<Item = &ExportRequest> {
        self.exports.requests.values()
    }

    fn open_for_egress(&self, session: &str) -> Result<Session> {
        let s = self.session(session)?;
        if !s.is_open() {
            return Err(BrokerError::SessionClosed(session.to_owned()));
        }
        Ok(s.clone())
    }

    fn record_egress(&mut self, s: &Session, kind: EgressKind, object: &str) -> Decision {
        let decision = egress_decision(s.mode, s.endpoint_managed, kind);
        let action = if decision.is_allow() { Action::EgressAllow } else { Action::EgressDeny };
        let d = detail([
            ("session", s.id.clone()),
            ("project", s.project.clone()),
            ("mode", s.mode.to_string()),
            ("kind", kind.to_string()),
            ("object", object.to_owned()),
            ("reason", decision.reason.to_string()),
        ]);
        let actor = s.arbitrary_user.clone();
        self.log(&actor, action, object, d);
        self.exports.attempts.push(EgressAttempt {
            session: s.id.clone(),
            kind,
            object: object.to_owned(),
            at: self.clock,
            decision,
        });
        decision
    }

    pub fn attempt_clipboard(&mut self, session: &str, direction: ClipboardDirection) -> Result<Decision> {
        let s = self.open_for_egress(session)?;
        let kind = match direction {
            ClipboardDirection::In => EgressKind::ClipboardIn,
            ClipboardDirection::Out => EgressKind::ClipboardOut,
        };
        Ok(self.record_egress(&s, kind, "clipboard"))
    }

    pub fn attempt_file_egress(&mut self, session: &str, object: &str) -> Result<Decision> {
        let s = self.open_for_egress(session)?;
        Ok(self.record_egress(&s, EgressKind::FileOut, object))
    }

    /// Queues results for honest-broker review. This is the sanctioned route
    /// out for RDP users.
    pub fn submit_export(&mut self, session: &str, payload: &str) -> Result<ExportRequest> {
        let s = self.open_for_egress(session)?;
        if payload.trim().is_empty() {
            return Err(BrokerError::EmptyPayload);
        }
        let id = self.ids.next("exp", 4);
        let req = ExportRequest {
            id: id.clone(),
            project: s.project.clone(),
            requester: s.principal.clone(),
            session: s.id.clone(),
            mode: s.mode,
            payload: payload.to_owned(),
            status: ExportStatus::Pending,
            broker: None,
            rationale: None,
            release_token: None,
            submitted_at: self.clock,
        };
        self.exports.requests.insert(id.clone(), req.clone());
        self.log(
            &s.principal,
            Action::ExportSubmit,
            &id,
            detail([
                ("session", s.id.clone()),
                ("project", s.project.clone()),
                ("mode", s.mode.to_string()),
                ("payload", payload.to_owned()),
            ]),
        );
        Ok(req)
    }

    pub fn adjudicate_export(
        &mut self,
        broker: &str,
        request: &str,
        verdict: ExportVerdict,
        rationale: &str,
    ) -> Result<ExportRequest> {
        let req = self.export_request(request)?;
        if req.status != ExportStatus::Pending {
            return Err(BrokerError::AlreadyAdjudicated(request.to_owned()));
        }
        if req.requester == broker {
            return Err(BrokerError::SelfAdjudication);
        }
        let project = req.project.clone();
        let is_broker =
            self.directory.is_active(broker) && self.project_ref(&project)?.honest_brokers.contains(broker);
        if !is_broker {
            return Err(BrokerError::unauthorized(broker, format!("adjudicate exports for {project}")));
        }
        if rationale.trim().is_empty() {
            return Err(BrokerError::EmptyRationale);
        }
        let token = match verdict {
            ExportVerdict::Approve => Some(format!("rel-{}", self.random_hex(16))),
            ExportVerdict::Deny => None,
        };
        let req = self.exports.requests.get_mut(request).expect("checked above");
        req.status = match verdict {
            ExportVerdict::Approve => ExportStatus::Approved,
            ExportVerdict::Deny => ExportStatus::Denied,
        };
        req.broker = Some(broker.to_owned());
        req.rationale = Some(rationale.to_owned());
        req.release_token = token.clone();
        let req = req.clone();
        self.log(
            broker,
            Action::ExportAdjudicate,
            request,
            detail([
                ("project", req.project.clone()),
                ("verdict", verdict.to_string()),
                ("rationale", rationale.to_owned()),
                ("requester", req.requester.clone()),
            ]),
        );
        if let Some(token) = token {
            self.log(
                broker,
                Action::Release,
                &token,
                detail([
                    ("request", request.to_owned()),
                    ("project", req.project.clone()),
                    ("requester", req.requester.clone()),
                    ("broker", broker.to_owned()),
                    ("mode", req.mode.to_string()),
                ]),
            );
        }
        Ok(req)
    }
}
