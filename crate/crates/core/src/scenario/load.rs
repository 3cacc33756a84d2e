//! TOML loaders for topology, directory and scenario files.
//!
//! Every array entry keeps its source span, so errors name the file, the line
//! of the offending entry and, where serde reports one, the field.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use strum::Display;
use toml::Spanned;

use super::engine::{parse_rule_endpoint, Engine};
use super::step::Step;
use crate::directory::{Affiliation, GroupKind, MembershipAction, PlatformRole};
use crate::enclave::{
    Direction, ExceptionRule, Gateway, GatewayKind, HostSpec, RuleEndpoint, Service, Topology, TopologyErrorKind, Zone, ZoneId,
};
use crate::policy::{DataClassification, ProjectRole, ProjectSpec};
use crate::types::AccessMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Display, Serialize)]
pub enum LoadErrorKind {
    ParseError,
    SchemaError,
    DanglingReference,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct LoadError {
    pub kind: LoadErrorKind,
    pub file: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        write!(f, ": {}", self.kind)?;
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// A parsed entry and the line it started on, if it came from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    pub line: Option<usize>,
    pub value: T,
}

impl<T> Located<T> {
    pub fn bare(value: T) -> Self {
        Located { line: None, value }
    }
}

struct Src<'a> {
    file: &'a str,
    text: &'a str,
}

impl Src<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn err(&self, kind: LoadErrorKind, line: Option<usize>, field: Option<&str>, message: impl Into<String>) -> LoadError {
        LoadError {
            kind,
            file: self.file.to_owned(),
            line,
            field: field.map(str::to_owned),
            message: message.into(),
        }
    }

    fn parse<T: DeserializeOwned>(&self) -> Result<T, LoadError> {
        toml::from_str(self.text).map_err(|e| {
            let line = e.span().map(|s| self.line(s));
            let message = e.message().to_owned();
            let kind = if is_syntax(&message) { LoadErrorKind::ParseError } else { LoadErrorKind::SchemaError };
            self.err(kind, line, field_in(&message).as_deref(), message)
        })
    }

    fn entries<T: DeserializeOwned>(&self, items: Vec<Spanned<toml::Table>>) -> Result<Vec<Located<T>>, LoadError> {
        items
            .into_iter()
            .map(|item| {
                let line = Some(self.line(item.span()));
                let value = toml::Value::Table(item.into_inner()).try_into::<T>().map_err(|e| {
                    let message = e.message().to_owned();
                    self.err(LoadErrorKind::SchemaError, line, field_in(&message).as_deref(), message)
                })?;
                Ok(Located { line, value })
            })
            .collect()
    }
}

/// Schema complaints from serde read like "missing field `x`"; anything else
/// from the TOML layer is a syntax error.
fn is_syntax(message: &str) -> bool {
    !(message.contains("field") || message.contains("variant") || message.contains("invalid type") || message.contains("invalid value"))
}

/// The field named in a serde message, if it names one.
fn field_in(message: &str) -> Option<String> {
    if !(message.starts_with("missing field") || message.starts_with("unknown field") || message.starts_with("duplicate field")) {
        return None;
    }
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_owned())
}

fn yes() -> bool {
    true
}

// ---------------------------------------------------------------- topology

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    #[serde(default)]
    zones: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    gateways: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    hosts: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    exceptions: Vec<Spanned<toml::Table>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawZone {
    id: String,
    #[serde(default)]
    parent: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGateway {
    id: String,
    kind: GatewayKind,
    admits_to: String,
    listens_on: Vec<String>,
    #[serde(default = "yes")]
    monitored: bool,
    #[serde(default)]
    enabled_by: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHost {
    id: String,
    #[serde(default)]
    dedicated_to_enclave: bool,
    cpu: u32,
    ram_gb: u32,
    #[serde(default)]
    outside_cpu: u32,
    #[serde(default)]
    outside_ram_gb: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawException {
    id: String,
    service: Service,
    src: String,
    dst: String,
    direction: Direction,
    documented_by: String,
}

/// Parses and validates a topology file.
pub fn parse_topology(file: &str, text: &str) -> Result<Topology, LoadError> {
    use LoadErrorKind::*;
    let src = Src { file, text };
    let raw: TopologyFile = src.parse()?;
    let zones: Vec<Located<RawZone>> = src.entries(raw.zones)?;
    let gateways: Vec<Located<RawGateway>> = src.entries(raw.gateways)?;
    let hosts: Vec<Located<RawHost>> = src.entries(raw.hosts)?;
    let exceptions: Vec<Located<RawException>> = src.entries(raw.exceptions)?;

    let zone_ref = |line: Option<usize>, field: &str, name: &str| {
        ZoneId::from_str(name).map_err(|_| src.err(DanglingReference, line, Some(field), format!("zone `{name}` does not exist")))
    };
    let endpoint = |line: Option<usize>, field: &str, s: &str| -> Result<RuleEndpoint, LoadError> {
        match s.split_once(':') {
            Some(("zone", z)) => zone_ref(line, field, z).map(RuleEndpoint::Zone),
            _ => parse_rule_endpoint(s).map_err(|m| src.err(SchemaError, line, Some(field), m)),
        }
    };

    let mut z = Vec::new();
    for e in &zones {
        let id = ZoneId::from_str(&e.value.id)
            .map_err(|_| src.err(SchemaError, e.line, Some("id"), format!("`{}` is not a zone kind", e.value.id)))?;
        let parent = e.value.parent.as_deref().map(|p| zone_ref(e.line, "parent", p)).transpose()?;
        z.push(Zone { id, parent });
    }
    let mut g = Vec::new();
    for e in &gateways {
        let r = &e.value;
        g.push(Gateway {
            id: r.id.clone(),
            kind: r.kind,
            admits_to: zone_ref(e.line, "admits_to", &r.admits_to)?,
            listens_on: r.listens_on.iter().map(|l| zone_ref(e.line, "listens_on", l)).collect::<Result<_, _>>()?,
            monitored: r.monitored,
            enabled_by: r.enabled_by.clone(),
        });
    }
    let h: Vec<HostSpec> = hosts
        .iter()
        .map(|e| {
            let r = &e.value;
            HostSpec {
                id: r.id.clone(),
                dedicated_to_enclave: r.dedicated_to_enclave,
                cpu: r.cpu,
                ram_gb: r.ram_gb,
                outside_cpu: r.outside_cpu,
                outside_ram_gb: r.outside_ram_gb,
            }
        })
        .collect();
    let mut x = Vec::new();
    for e in &exceptions {
        let r = &e.value;
        x.push(ExceptionRule {
            id: r.id.clone(),
            service: r.service,
            src: endpoint(e.line, "src", &r.src)?,
            dst: endpoint(e.line, "dst", &r.dst)?,
            direction: r.direction,
            documented_by: r.documented_by.clone(),
        });
    }

    Topology::new(z, g, h, x).map_err(|e| {
        let line = match e.section {
            "zones" => zones.get(e.index).and_then(|l| l.line),
            "gateways" => gateways.get(e.index).and_then(|l| l.line),
            "hosts" => hosts.get(e.index).and_then(|l| l.line),
            _ => exceptions.get(e.index).and_then(|l| l.line),
        };
        let kind = match e.kind {
            TopologyErrorKind::SchemaError => SchemaError,
            TopologyErrorKind::DanglingReference => DanglingReference,
        };
        src.err(kind, line, Some(e.field), format!("{}[{}]: {}", e.section, e.index, e.message))
    })
}

// ---------------------------------------------------------------- directory

fn member() -> Affiliation {
    Affiliation::Member
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub netid: String,
    #[serde(default = "member")]
    pub affiliation: Affiliation,
    #[serde(default)]
    pub sponsor: Option<String>,
    /// Second factor, enrolled at load and presented by scripted logins.
    #[serde(default)]
    pub mfa: Option<String>,
    #[serde(default)]
    pub roles: Vec<PlatformRole>,
    #[serde(default = "yes")]
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub issuer: String,
    pub subject: String,
    pub netid: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub name: String,
    #[serde(default)]
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectEntry {
    pub id: String,
    pub classification: DataClassification,
    pub stewards: Vec<String>,
    #[serde(default)]
    pub role_rules: Vec<String>,
    #[serde(default)]
    pub zone: Option<String>,
    #[serde(default)]
    pub retention_days: Option<u64>,
    #[serde(default)]
    pub honest_brokers: Vec<String>,
    #[serde(default)]
    pub approvers: Vec<String>,
    /// Netids granted VPN access by the first steward.
    #[serde(default)]
    pub vpn: Vec<String>,
    #[serde(default)]
    pub rdp: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectoryFile {
    #[serde(default)]
    admins: Vec<String>,
    #[serde(default)]
    trusted_issuers: Vec<String>,
    #[serde(default)]
    users: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    subjects: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    groups: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    projects: Vec<Spanned<toml::Table>>,
}

/// A parsed directory file. The first admin is bootstrapped and performs
/// every other setup action except grants, which the first steward issues.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectorySpec {
    pub file: String,
    pub admins: Vec<String>,
    pub trusted_issuers: Vec<String>,
    pub users: Vec<Located<UserEntry>>,
    pub subjects: Vec<Located<SubjectEntry>>,
    pub groups: Vec<Located<GroupEntry>>,
    pub projects: Vec<Located<ProjectEntry>>,
}

impl DirectorySpec {
    /// Checks references between entries of the file.
    pub fn validate(&self) -> Result<(), LoadError> {
        use LoadErrorKind::*;
        let src = Src { file: &self.file, text: "" };
        let users: BTreeSet<&str> = self.users.iter().map(|u| u.value.netid.as_str()).collect();
        let groups: BTreeSet<&str> = self.groups.iter().map(|g| g.value.name.as_str()).collect();
        let known = |line, field, netid: &str| {
            if users.contains(netid) {
                Ok(())
            } else {
                Err(src.err(DanglingReference, line, Some(field), format!("user `{netid}` is not declared")))
            }
        };
        if self.admins.is_empty() {
            return Err(src.err(SchemaError, None, Some("admins"), "at least one admin is required"));
        }
        for a in &self.admins {
            known(None, "admins", a)?;
        }
        for u in &self.users {
            if let Some(s) = &u.value.sponsor {
                known(u.line, "sponsor", s)?;
            }
        }
        for s in &self.subjects {
            known(s.line, "netid", &s.value.netid)?;
            if !self.trusted_issuers.contains(&s.value.issuer) {
                return Err(src.err(DanglingReference, s.line, Some("issuer"), format!("issuer `{}` is not trusted", s.value.issuer)));
            }
        }
        for g in &self.groups {
            for m in &g.value.members {
                known(g.line, "members", m)?;
            }
        }
        for p in &self.projects {
            let v = &p.value;
            for (field, list) in [
                ("stewards", &v.stewards),
                ("honest_brokers", &v.honest_brokers),
                ("approvers", &v.approvers),
                ("vpn", &v.vpn),
                ("rdp", &v.rdp),
            ] {
                for n in list {
                    known(p.line, field, n)?;
                }
            }
            for g in &v.role_rules {
                if !groups.contains(g.as_str()) {
                    return Err(src.err(DanglingReference, p.line, Some("role_rules"), format!("group `{g}` is not declared")));
                }
            }
        }
        Ok(())
    }

    /// Registers everything in the file with the engine's broker.
    pub fn apply(&self, engine: &mut Engine) -> Result<(), LoadError> {
        use LoadErrorKind::*;
        self.validate()?;
        let src = Src { file: &self.file, text: "" };
        let schema = |line: Option<usize>, field: &str, e: crate::error::BrokerError| {
            src.err(SchemaError, line, Some(field), e.to_string())
        };
        let admin = self.admins[0].as_str();

        // members first so sponsors exist before their affiliates
        let ordered = self
            .users
            .iter()
            .filter(|u| u.value.affiliation == Affiliation::Member)
            .chain(self.users.iter().filter(|u| u.value.affiliation == Affiliation::Affiliate));
        for u in ordered {
            let v = &u.value;
            engine.broker_mut().register_user(&v.netid, v.affiliation, v.sponsor.as_deref()).map_err(|e| schema(u.line, "netid", e))?;
        }
        let b = engine.broker_mut();
        b.bootstrap_admin(admin).map_err(|e| schema(None, "admins", e))?;
        for a in &self.admins[1..] {
            b.assign_role(admin, a, PlatformRole::Admin).map_err(|e| schema(None, "admins", e))?;
        }
        for u in &self.users {
            for r in &u.value.roles {
                engine.broker_mut().assign_role(admin, &u.value.netid, *r).map_err(|e| schema(u.line, "roles", e))?;
            }
            if let Some(f) = &u.value.mfa {
                engine.broker_mut().enroll_mfa(&u.value.netid, f).map_err(|e| schema(u.line, "mfa", e))?;
                engine.remember_factor(&u.value.netid, f);
            }
        }
        for i in &self.trusted_issuers {
            engine.broker_mut().trust_issuer(admin, i).map_err(|e| schema(None, "trusted_issuers", e))?;
        }
        for s in &self.subjects {
            let v = &s.value;
            engine.broker_mut().map_subject(admin, &v.issuer, &v.subject, &v.netid).map_err(|e| schema(s.line, "subject", e))?;
        }
        for g in &self.groups {
            let b = engine.broker_mut();
            b.create_group(admin, &g.value.name, GroupKind::Role, None).map_err(|e| schema(g.line, "name", e))?;
            for m in &g.value.members {
                b.set_membership(admin, &g.value.name, m, MembershipAction::Add).map_err(|e| schema(g.line, "members", e))?;
            }
        }
        for p in &self.projects {
            let v = &p.value;
            let zone = match &v.zone {
                None => ZoneId::ProtectedVRF,
                Some(z) => ZoneId::from_str(z)
                    .ok()
                    .filter(|z| engine.broker().topology().has_zone(*z))
                    .ok_or_else(|| src.err(DanglingReference, p.line, Some("zone"), format!("zone `{z}` is not in the topology")))?,
            };
            let spec = ProjectSpec {
                id: v.id.clone(),
                classification: v.classification,
                stewards: v.stewards.clone(),
                role_rules: v.role_rules.clone(),
                zone,
                retention_days: v.retention_days,
            };
            let b = engine.broker_mut();
            b.register_project(admin, spec).map_err(|e| schema(p.line, "id", e))?;
            for n in &v.honest_brokers {
                b.assign_project_role(admin, &v.id, ProjectRole::HonestBroker, n).map_err(|e| schema(p.line, "honest_brokers", e))?;
            }
            for n in &v.approvers {
                b.assign_project_role(admin, &v.id, ProjectRole::Approver, n).map_err(|e| schema(p.line, "approvers", e))?;
            }
            let steward = v.stewards.first().map(String::as_str).unwrap_or(admin);
            for (mode, list, field) in [(AccessMode::Vpn, &v.vpn, "vpn"), (AccessMode::Rdp, &v.rdp, "rdp")] {
                for n in list {
                    b.grant_access(steward, &v.id, n, mode).map_err(|e| schema(p.line, field, e))?;
                }
            }
        }
        for u in self.users.iter().filter(|u| !u.value.active) {
            engine.broker_mut().deactivate_user(admin, &u.value.netid).map_err(|e| schema(u.line, "active", e))?;
        }
        Ok(())
    }
}

pub fn parse_directory(file: &str, text: &str) -> Result<DirectorySpec, LoadError> {
    let src = Src { file, text };
    let raw: DirectoryFile = src.parse()?;
    let spec = DirectorySpec {
        file: file.to_owned(),
        admins: raw.admins,
        trusted_issuers: raw.trusted_issuers,
        users: src.entries(raw.users)?,
        subjects: src.entries(raw.subjects)?,
        groups: src.entries(raw.groups)?,
        projects: src.entries(raw.projects)?,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------- scenario

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    clock: u64,
    #[serde(default)]
    retention_days: Option<u64>,
    #[serde(default)]
    steps: Vec<Spanned<toml::Table>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub name: String,
    pub seed: Option<u64>,
    /// Simulated time at which the first step runs.
    pub clock: u64,
    pub retention_days: Option<u64>,
    pub steps: Vec<Located<Step>>,
}

pub fn parse_scenario(file: &str, text: &str) -> Result<Scenario, LoadError> {
    let src = Src { file, text };
    let raw: ScenarioFile = src.parse()?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for item in raw.steps {
        let line = Some(src.line(item.span()));
        let table = item.into_inner();
        let op = table.get("op").and_then(|v| v.as_str()).map(str::to_owned);
        let value = serde_json::to_value(&table).map_err(|e| src.err(LoadErrorKind::SchemaError, line, None, e.to_string()))?;
        let step = Step::from_value(value).map_err(|message| {
            let field = field_in(&message).or_else(|| {
                let bad_op = op.as_ref().is_some_and(|o| message.starts_with(&format!("unknown variant `{}`", o.replace('_', "-"))));
                let field = message.split_once(':').filter(|(head, _)| head.starts_with("field `")).map(|(head, _)| head);
                if bad_op || op.is_none() {
                    Some("op".to_owned())
                } else {
                    field.and_then(field_in_head)
                }
            });
            src.err(LoadErrorKind::SchemaError, line, field.as_deref(), message)
        })?;
        steps.push(Located { line, value: step });
    }
    Ok(Scenario {
        name: raw.name.unwrap_or_else(|| file.to_owned()),
        seed: raw.seed,
        clock: raw.clock,
        retention_days: raw.retention_days,
        steps,
    })
}

fn field_in_head(head: &str) -> Option<String> {
    head.strip_prefix("field `").and_then(|r| r.strip_suffix('`')).map(str::to_owned)
}

/// Counts of what a directory file declares, for CLI summaries.
pub fn directory_summary(spec: &DirectorySpec) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("users", spec.users.len()),
        ("groups", spec.groups.len()),
        ("projects", spec.projects.len()),
        ("subjects", spec.subjects.len()),
    ])
}
