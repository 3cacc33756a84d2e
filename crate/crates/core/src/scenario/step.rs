//! One scripted command. Scenario files, the CLI journal and the service
//! protocol all carry steps in the same shape: a flat record with an `op`
//! field, the operation's arguments, and optional `at`, `expect`, `equals`
//! and `as` keys.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::directory::{Affiliation, MembershipAction, PlatformRole};
use crate::egress::{ClipboardDirection, ExportVerdict};
use crate::enclave::{Direction, RequestedProtocol, Service, ZoneId};
use crate::error::BrokerError;
use crate::policy::{DataClassification, ProjectRole};
use crate::types::{AccessMode, Rule};

fn yes() -> bool {
    true
}

fn campus() -> String {
    "zone:Campus".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Op {
    /// Moves the simulated clock.
    Advance { to: u64 },
    RegisterUser {
        netid: String,
        #[serde(default = "member")]
        affiliation: Affiliation,
        #[serde(default)]
        sponsor: Option<String>,
    },
    AssignRole { actor: String, netid: String, role: PlatformRole },
    EnrollMfa { netid: String, factor: String },
    DeactivateUser { actor: String, netid: String },
    TrustIssuer { actor: String, issuer: String },
    MapSubject { actor: String, issuer: String, subject: String, netid: String },
    /// Authenticates and verifies MFA without opening anything.
    Authenticate {
        #[serde(default)]
        netid: Option<String>,
        #[serde(default)]
        issuer: Option<String>,
        #[serde(default)]
        subject: Option<String>,
        #[serde(default)]
        mfa: Option<String>,
    },
    CreateGroup {
        actor: String,
        name: String,
        #[serde(default)]
        project: Option<String>,
    },
    Membership { actor: String, group: String, netid: String, action: MembershipAction },
    RegisterProject {
        actor: String,
        id: String,
        classification: DataClassification,
        stewards: Vec<String>,
        #[serde(default)]
        role_rules: Vec<String>,
        #[serde(default)]
        zone: Option<ZoneId>,
        #[serde(default)]
        retention_days: Option<u64>,
    },
    AssignProjectRole { actor: String, project: String, role: ProjectRole, netid: String },
    Grant { actor: String, project: String, netid: String, mode: AccessMode },
    Revoke { actor: String, project: String, netid: String, mode: AccessMode },
    CheckAccess {
        netid: String,
        project: String,
        mode: AccessMode,
        #[serde(default)]
        mfa: Option<String>,
    },
    ProvisionVm {
        project: String,
        #[serde(default)]
        zone: Option<ZoneId>,
        cpu: u32,
        ram_gb: u32,
        #[serde(default)]
        dedicated: bool,
    },
    ResizeVm { vm: String, cpu: u32, ram_gb: u32 },
    DestroyVm { vm: String },
    WriteDisk { vm: String, token: String },
    ReadDisk { vm: String },
    CreateShare {
        project: String,
        protocol: RequestedProtocol,
        capacity_tb: f64,
        #[serde(default)]
        dedicated_device: bool,
        #[serde(default)]
        encrypted_at_rest: bool,
    },
    ShareAcl { actor: String, share: String, groups: Vec<String> },
    /// Checks a share ACL for a netid, or for a session's arbitrary user.
    CheckShareAcl {
        #[serde(default)]
        identity: Option<String>,
        #[serde(default)]
        session: Option<String>,
        share: String,
    },
    RegisterException {
        actor: String,
        id: String,
        service: Service,
        src: String,
        dst: String,
        direction: Direction,
        documented_by: String,
    },
    ProxyWhitelist { actor: String, project: String, origins: Vec<String> },
    ProxyFetch { project: String, url: String },
    /// Read-only reachability query.
    Reach { src: String, dst: String, service: String },
    /// Reachability query that is recorded in the ledger.
    Connect { src: String, dst: String, service: String },
    OpenSession {
        netid: String,
        project: String,
        mode: AccessMode,
        #[serde(default = "yes")]
        managed: bool,
        #[serde(default)]
        mfa: Option<String>,
        #[serde(default)]
        issuer: Option<String>,
        #[serde(default)]
        subject: Option<String>,
    },
    ResumeSession {
        netid: String,
        project: String,
        mode: AccessMode,
        #[serde(default = "yes")]
        managed: bool,
        #[serde(default)]
        mfa: Option<String>,
        #[serde(default)]
        issuer: Option<String>,
        #[serde(default)]
        subject: Option<String>,
    },
    CloseSession { session: String },
    /// Reclaims every retention binding whose window has passed.
    Expire {},
    AlignGroups { session: String },
    /// Presents the secret installed for `session`'s credential to a VM
    /// (the session's own VM unless `vm` or `target_session` says otherwise).
    VmAuth {
        session: String,
        #[serde(default)]
        vm: Option<String>,
        #[serde(default)]
        target_session: Option<String>,
    },
    Clipboard { session: String, direction: ClipboardDirection },
    FileEgress { session: String, object: String },
    ExportSubmit { session: String, payload: String },
    ExportAdjudicate { broker: String, request: String, verdict: ExportVerdict, rationale: String },
    ImageSubmit {
        builder: String,
        project: String,
        payload: String,
        #[serde(default = "campus")]
        from: String,
    },
    ImageVet { vetter: String, image: String, report: String },
    ImageApprove { approver: String, image: String },
    /// Deploys with the image's recorded digest unless `digest` (hex) is given.
    ImageDeploy {
        operator: String,
        image: String,
        project: String,
        #[serde(default)]
        digest: Option<String>,
    },
    ImageUpdate { operator: String, instance: String, image: String },
    ImageRevoke { actor: String, image: String },
    /// Resolves an arbitrary user, named directly or through a session.
    Resolve {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        session: Option<String>,
        #[serde(default)]
        time: Option<u64>,
    },
    Trace { session: String },
    VerifyChain {},
    Report { project: String, from: u64, to: u64 },
}

fn member() -> Affiliation {
    Affiliation::Member
}

impl Op {
    pub fn name(&self) -> String {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m.get("op").and_then(Value::as_str).unwrap_or_default().to_owned(),
            _ => String::new(),
        }
    }

    /// Operations that never change broker state.
    pub fn is_read_only(&self) -> bool {
        matches!(
            self,
            Op::ReadDisk { .. }
                | Op::CheckShareAcl { .. }
                | Op::Reach { .. }
                | Op::VmAuth { .. }
                | Op::Resolve { .. }
                | Op::Trace { .. }
                | Op::VerifyChain {}
                | Op::Report { .. }
        )
    }
}

/// What a step expects to happen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Ok,
    Allow,
    Deny,
    AnyError,
    Rule(Rule),
    Error(String),
}

impl FromStr for Expect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ok" => Ok(Expect::Ok),
            "allow" => Ok(Expect::Allow),
            "deny" => Ok(Expect::Deny),
            "error" => Ok(Expect::AnyError),
            _ => {
                if let Ok(rule) = Rule::from_str(s) {
                    Ok(Expect::Rule(rule))
                } else if BrokerError::is_code(s) {
                    Ok(Expect::Error(s.to_owned()))
                } else {
                    Err(format!("unknown expectation `{s}`"))
                }
            }
        }
    }
}

impl std::fmt::Display for Expect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::Allow => f.write_str("allow"),
            Expect::Deny => f.write_str("deny"),
            Expect::AnyError => f.write_str("error"),
            Expect::Rule(r) => write!(f, "{r}"),
            Expect::Error(c) => f.write_str(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub op: Op,
    /// Clock value to advance to before running.
    pub at: Option<u64>,
    pub expect: Option<Expect>,
    /// Expected result value, compared as a string.
    pub equals: Option<String>,
    /// Name under which the step's result id is bound.
    pub bind: Option<String>,
}

const COMMON: [&str; 4] = ["at", "expect", "equals", "as"];

impl Step {
    pub fn new(op: Op) -> Self {
        Step { op, at: None, expect: None, equals: None, bind: None }
    }

    pub fn expecting(mut self, expect: Expect) -> Self {
        self.expect = Some(expect);
        self
    }

    pub fn bound(mut self, name: &str) -> Self {
        self.bind = Some(name.to_owned());
        self
    }

    pub fn at(mut self, at: u64) -> Self {
        self.at = Some(at);
        self
    }

    /// Builds a step from a flat record. Underscores in the `op` value are
    /// accepted in place of hyphens.
    pub fn from_value(value: Value) -> Result<Self, String> {
        let Value::Object(mut map) = value else {
            return Err("a step must be a table".into());
        };
        let take_str = |key: &str, map: &mut Map<String, Value>| -> Result<Option<String>, String> {
            match map.remove(key) {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(format!("field `{key}` must be a string")),
            }
        };
        let at = match map.remove("at") {
            None => None,
            Some(v) => Some(v.as_u64().ok_or("field `at` must be a non-negative integer")?),
        };
        let expect = take_str("expect", &mut map)?
            .map(|s| s.parse::<Expect>().map_err(|e| format!("field `expect`: {e}")))
            .transpose()?;
        let equals = take_str("equals", &mut map)?;
        let bind = take_str("as", &mut map)?;
        match map.get_mut("op") {
            Some(Value::String(op)) => *op = op.replace('_', "-"),
            Some(_) => return Err("field `op` must be a string".into()),
            None => return Err("missing field `op`".into()),
        }
        let op: Op = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(Step { op, at, expect, equals, bind })
    }

    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.op) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("ops serialize to objects"),
        };
        debug_assert!(COMMON.iter().all(|k| !map.contains_key(*k)));
        if let Some(at) = self.at {
            map.insert("at".into(), at.into());
        }
        if let Some(e) = &self.expect {
            map.insert("expect".into(), e.to_string().into());
        }
        if let Some(e) = &self.equals {
            map.insert("equals".into(), e.clone().into());
        }
        if let Some(b) = &self.bind {
            map.insert("as".into(), b.clone().into());
        }
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trips_through_json() {
        let v = json!({"op": "grant", "actor": "ab123", "project": "pace", "netid": "cd456", "mode": "rdp", "at": 5, "expect": "ok"});
        let step = Step::from_value(v.clone()).unwrap();
        assert_eq!(step.at, Some(5));
        assert_eq!(step.expect, Some(Expect::Ok));
        assert_eq!(step.to_value(), v);
    }

    #[test]
    fn underscores_accepted() {
        let step = Step::from_value(json!({"op": "check_access", "netid": "a", "project": "p", "mode": "vpn"})).unwrap();
        assert_eq!(step.op.name(), "check-access");
        assert!(!step.op.is_read_only(), "mfa checks are logged");
        assert!(Step::from_value(json!({"op": "verify_chain"})).unwrap().op.is_read_only());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Step::from_value(json!({"op": "teleport"})).unwrap_err().contains("unknown variant"));
        assert!(Step::from_value(json!({"op": "grant", "actor": "a", "project": "p", "netid": "n", "mode": "rdp", "colour": 1}))
            .unwrap_err()
            .contains("colour"));
        assert!(Step::from_value(json!({"op": "expire", "expect": "maybe"})).unwrap_err().contains("expect"));
        assert!(Step::from_value(json!([1])).is_err());
    }

    #[test]
    fn expectation_forms() {
        assert_eq!("rdp-clipboard-disabled".parse::<Expect>(), Ok(Expect::Rule(Rule::RdpClipboardDisabled)));
        assert_eq!("AccessDenied".parse::<Expect>(), Ok(Expect::Error("AccessDenied".into())));
        assert!("Nope".parse::<Expect>().is_err());
    }
}
