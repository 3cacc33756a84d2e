//! Executes [`Step`]s against a [`Broker`].

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use super::step::{Expect, Op, Step};
use crate::broker::Broker;
use crate::directory::{AuthenticatedPrincipal, FederatedAssertion};
use crate::enclave::{Endpoint, ExceptionRule, RuleEndpoint, ShareRequest, Source, ZoneId};
use crate::error::BrokerError;
use crate::policy::ProjectSpec;
use crate::session::AuthOutcome;
use crate::types::{Decision, Digest, Period, Rule, Timestamp, Verdict};

/// Lifetime of assertions minted for federated logins in scripted steps.
const ASSERTION_TTL_SECS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub verdict: Option<Verdict>,
    pub reason: Option<Rule>,
    /// Primary id produced by the step, bound by `as`.
    pub id: Option<String>,
    pub value: Value,
    #[serde(skip)]
    extra: Vec<(&'static str, String)>,
}

impl Outcome {
    fn value(value: impl Serialize) -> Self {
        Outcome {
            verdict: None,
            reason: None,
            id: None,
            value: serde_json::to_value(value).expect("results serialize"),
            extra: Vec::new(),
        }
    }

    fn decision(d: Decision) -> Self {
        Outcome { verdict: Some(d.verdict), reason: Some(d.reason), ..Outcome::value(d) }
    }

    fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    fn with(mut self, suffix: &'static str, value: impl Into<String>) -> Self {
        self.extra.push((suffix, value.into()));
        self
    }

    /// String form of the value used by `equals`.
    pub fn text(&self) -> String {
        match &self.value {
            Value::String(s) => s.clone(),
            Value::Array(items) if items.iter().all(Value::is_string) => {
                items.iter().filter_map(Value::as_str).collect::<Vec<_>>().join(",")
            }
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("{}: {0}", .0.code())]
    Broker(#[from] BrokerError),
    #[error("invalid step: {0}")]
    Invalid(String),
}

impl StepError {
    pub fn code(&self) -> &'static str {
        match self {
            StepError::Broker(e) => e.code(),
            StepError::Invalid(_) => "bad-request",
        }
    }
}

/// Whether a step's result satisfies its expectation. A step without an
/// expectation must not fail.
pub fn satisfies(expect: Option<&Expect>, result: &Result<Outcome, StepError>) -> bool {
    match (expect, result) {
        (_, Err(StepError::Invalid(_))) => false,
        (None, r) => r.is_ok(),
        (Some(e), Ok(o)) => match e {
            Expect::Ok => true,
            Expect::Allow => o.verdict == Some(Verdict::Allow),
            Expect::Deny => o.verdict == Some(Verdict::Deny),
            Expect::Rule(r) => o.reason == Some(*r),
            Expect::AnyError | Expect::Error(_) => false,
        },
        (Some(e), Err(StepError::Broker(err))) => match e {
            Expect::AnyError => true,
            Expect::Error(code) => err.code() == code,
            Expect::Deny => matches!(err, BrokerError::AccessDenied(_)),
            Expect::Rule(r) => *err == BrokerError::AccessDenied(*r),
            Expect::Ok | Expect::Allow => false,
        },
    }
}

/// Short human form of a result, used in run reports.
pub fn describe(result: &Result<Outcome, StepError>) -> String {
    match result {
        Ok(o) => match (o.verdict, o.reason) {
            (Some(v), Some(r)) => format!("{v} ({r})"),
            (Some(v), None) => v.to_string(),
            _ => "ok".to_owned(),
        },
        Err(e) => format!("error {e}"),
    }
}

/// Parses `zone:<id>`, `vm:<id>` or `origin:<url>`.
pub fn parse_rule_endpoint(s: &str) -> Result<RuleEndpoint, String> {
    match s.split_once(':') {
        Some(("zone", z)) => ZoneId::from_str(z).map(RuleEndpoint::Zone).map_err(|_| format!("unknown zone `{z}`")),
        Some(("vm", v)) if !v.is_empty() => Ok(RuleEndpoint::Vm(v.to_owned())),
        Some(("origin", o)) if !o.is_empty() => Ok(RuleEndpoint::Origin(o.to_owned())),
        _ => Err(format!("`{s}` is not zone:<id>, vm:<id> or origin:<url>")),
    }
}

/// A broker plus the bookkeeping scripted steps need: named results and the
/// MFA factors scripted users present by default.
#[derive(Debug, Clone)]
pub struct Engine {
    broker: Broker,
    bindings: BTreeMap<String, String>,
    factors: BTreeMap<String, String>,
}

impl Engine {
    pub fn new(broker: Broker) -> Self {
        Engine { broker, bindings: BTreeMap::new(), factors: BTreeMap::new() }
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn broker_mut(&mut self) -> &mut Broker {
        &mut self.broker
    }

    pub fn into_broker(self) -> Broker {
        self.broker
    }

    pub fn bindings(&self) -> &BTreeMap<String, String> {
        &self.bindings
    }

    /// Factor presented for `netid` when a step does not give one.
    pub fn remember_factor(&mut self, netid: &str, factor: &str) {
        self.factors.insert(netid.to_owned(), factor.to_owned());
    }

    /// Follows a binding if `name` is bound, else returns it unchanged.
    pub fn resolve(&self, name: &str) -> String {
        self.bindings.get(name).cloned().unwrap_or_else(|| name.to_owned())
    }

    pub fn execute(&mut self, step: &Step) -> Result<Outcome, StepError> {
        if let Some(at) = step.at {
            self.broker.advance_to(Timestamp(at));
        }
        let out = self.apply(&step.op)?;
        if let Some(name) = &step.bind {
            let id = out.id.clone().ok_or_else(|| StepError::Invalid(format!("`{}` produces nothing to bind", step.op.name())))?;
            self.bindings.insert(name.clone(), id);
            for (suffix, v) in &out.extra {
                self.bindings.insert(format!("{name}.{suffix}"), v.clone());
            }
        }
        Ok(out)
    }

    fn source(&self, s: &str) -> Result<Source, StepError> {
        match s.split_once(':') {
            Some(("zone", z)) => ZoneId::from_str(z).map(Source::Zone).map_err(|_| StepError::Invalid(format!("unknown zone `{z}`"))),
            Some(("vm", v)) => Ok(Source::Vm(self.resolve(v))),
            Some(("session", id)) => Ok(Source::Session(self.resolve(id))),
            _ => Err(StepError::Invalid(format!("`{s}` is not zone:<id>, vm:<id> or session:<id>"))),
        }
    }

    fn endpoint(&self, s: &str) -> Result<Endpoint, StepError> {
        match s.split_once(':') {
            Some(("zone", z)) => ZoneId::from_str(z).map(Endpoint::Zone).map_err(|_| StepError::Invalid(format!("unknown zone `{z}`"))),
            Some(("vm", v)) => Ok(Endpoint::Vm(self.resolve(v))),
            Some(("share", v)) => Ok(Endpoint::Share(self.resolve(v))),
            Some(("origin", o)) => Ok(Endpoint::Origin(o.to_owned())),
            _ => Err(StepError::Invalid(format!("`{s}` is not zone:, vm:, share: or origin:"))),
        }
    }

    /// Authenticates locally or through a minted assertion, then checks MFA.
    /// An empty `mfa` presents no factor.
    fn principal(
        &mut self,
        netid: Option<&str>,
        issuer: Option<&str>,
        subject: Option<&str>,
        mfa: Option<&str>,
    ) -> Result<AuthenticatedPrincipal, StepError> {
        let now = self.broker.now();
        let assertion = match (issuer, subject) {
            (Some(i), Some(s)) => Some(FederatedAssertion {
                issuer: i.to_owned(),
                subject: s.to_owned(),
                issued_at: now,
                expires_at: now.plus_secs(ASSERTION_TTL_SECS),
                mfa_satisfied: false,
                attributes: BTreeMap::new(),
            }),
            (None, None) => None,
            _ => return Err(StepError::Invalid("issuer and subject go together".into())),
        };
        let p = self.broker.authenticate(netid, assertion.as_ref(), now)?;
        if p.mfa_passed() {
            return Ok(p);
        }
        let proof = match mfa {
            Some("") => None,
            Some(f) => Some(f.to_owned()),
            None => self.factors.get(p.netid()).cloned(),
        };
        Ok(self.broker.verify_mfa(&p, proof.as_deref())?)
    }

    fn secret_of(&self, session: &str) -> Result<crate::types::Secret, StepError> {
        let s = self.broker.session(session)?;
        self.broker
            .installed_secret(&s.credential)
            .ok_or_else(|| StepError::Invalid(format!("no secret installed for {}", s.credential)))
    }

    fn apply(&mut self, op: &Op) -> Result<Outcome, StepError> {
        let out = match op {
            Op::Advance { to } => {
                self.broker.advance_to(Timestamp(*to));
                Outcome::value(self.broker.now())
            }
            Op::RegisterUser { netid, affiliation, sponsor } => {
                let u = self.broker.register_user(netid, *affiliation, sponsor.as_deref())?;
                Outcome::value(&u).with_id(&u.netid)
            }
            Op::AssignRole { actor, netid, role } => {
                self.broker.assign_role(actor, netid, *role)?;
                Outcome::value(Value::Null)
            }
            Op::EnrollMfa { netid, factor } => {
                self.broker.enroll_mfa(netid, factor)?;
                self.factors.insert(netid.clone(), factor.clone());
                Outcome::value(Value::Null)
            }
            Op::DeactivateUser { actor, netid } => Outcome::value(self.broker.deactivate_user(actor, netid)?),
            Op::TrustIssuer { actor, issuer } => {
                self.broker.trust_issuer(actor, issuer)?;
                Outcome::value(Value::Null)
            }
            Op::MapSubject { actor, issuer, subject, netid } => {
                self.broker.map_subject(actor, issuer, subject, netid)?;
                Outcome::value(Value::Null)
            }
            Op::Authenticate { netid, issuer, subject, mfa } => {
                let p = self.principal(netid.as_deref(), issuer.as_deref(), subject.as_deref(), mfa.as_deref())?;
                Outcome::value(&p).with_id(p.netid())
            }
            Op::CreateGroup { actor, name, project } => {
                let g = self.broker.create_group(actor, name, crate::directory::GroupKind::Role, project.as_deref())?;
                Outcome::value(&g).with_id(&g.name)
            }
            Op::Membership { actor, group, netid, action } => Outcome::value(self.broker.set_membership(actor, group, netid, *action)?),
            Op::RegisterProject { actor, id, classification, stewards, role_rules, zone, retention_days } => {
                let spec = ProjectSpec {
                    id: id.clone(),
                    classification: *classification,
                    stewards: stewards.clone(),
                    role_rules: role_rules.clone(),
                    zone: zone.unwrap_or(ZoneId::ProtectedVRF),
                    retention_days: *retention_days,
                };
                let p = self.broker.register_project(actor, spec)?;
                Outcome::value(&p).with_id(&p.id)
            }
            Op::AssignProjectRole { actor, project, role, netid } => {
                self.broker.assign_project_role(actor, project, *role, netid)?;
                Outcome::value(Value::Null)
            }
            Op::Grant { actor, project, netid, mode } => Outcome::value(self.broker.grant_access(actor, project, netid, *mode)?),
            Op::Revoke { actor, project, netid, mode } => Outcome::value(self.broker.revoke_access(actor, project, netid, *mode)?),
            Op::CheckAccess { netid, project, mode, mfa } => {
                let p = self.principal(Some(netid), None, None, mfa.as_deref())?;
                Outcome::decision(self.broker.check_access(&p, project, *mode)?)
            }
            Op::ProvisionVm { project, zone, cpu, ram_gb, dedicated } => {
                let zone = match zone {
                    Some(z) => *z,
                    None => self.broker.project(project)?.zone,
                };
                let vm = self.broker.provision_vm(project, zone, *cpu, *ram_gb, *dedicated)?;
                Outcome::value(&vm).with_id(&vm.id)
            }
            Op::ResizeVm { vm, cpu, ram_gb } => Outcome::value(self.broker.resize_vm(&self.resolve(vm), *cpu, *ram_gb)?),
            Op::DestroyVm { vm } => {
                let vm = self.resolve(vm);
                Outcome::value(self.broker.destroy_vm(&vm)?)
            }
            Op::WriteDisk { vm, token } => {
                let vm = self.resolve(vm);
                self.broker.write_disk(&vm, token)?;
                Outcome::value(Value::Null)
            }
            Op::ReadDisk { vm } => Outcome::value(self.broker.read_disk(&self.resolve(vm))?),
            Op::CreateShare { project, protocol, capacity_tb, dedicated_device, encrypted_at_rest } => {
                let s = self.broker.create_share(ShareRequest {
                    project: project.clone(),
                    protocol: *protocol,
                    capacity_tb: *capacity_tb,
                    dedicated_device: *dedicated_device,
                    encrypted_at_rest: *encrypted_at_rest,
                })?;
                Outcome::value(&s).with_id(&s.id)
            }
            Op::ShareAcl { actor, share, groups } => {
                let share = self.resolve(share);
                Outcome::value(self.broker.set_share_acl(actor, &share, groups)?)
            }
            Op::CheckShareAcl { identity, session, share } => {
                let identity = match (identity, session) {
                    (Some(i), None) => i.clone(),
                    (None, Some(s)) => self.broker.session(&self.resolve(s))?.arbitrary_user.clone(),
                    _ => return Err(StepError::Invalid("give exactly one of identity or session".into())),
                };
                Outcome::decision(self.broker.check_share_acl(&identity, &self.resolve(share))?)
            }
            Op::RegisterException { actor, id, service, src, dst, direction, documented_by } => {
                let rule = ExceptionRule {
                    id: id.clone(),
                    service: *service,
                    src: self.rule_endpoint(src)?,
                    dst: self.rule_endpoint(dst)?,
                    direction: *direction,
                    documented_by: documented_by.clone(),
                };
                let id = self.broker.register_exception(actor, rule)?;
                Outcome::value(&id).with_id(id)
            }
            Op::ProxyWhitelist { actor, project, origins } => Outcome::value(self.broker.set_proxy_whitelist(actor, project, origins)?),
            Op::ProxyFetch { project, url } => Outcome::decision(self.broker.proxy_fetch(project, url)?),
            Op::Reach { src, dst, service } | Op::Connect { src, dst, service } => {
                let (src, dst) = (self.source(src)?, self.endpoint(dst)?);
                let r = if matches!(op, Op::Connect { .. }) {
                    self.broker.connect(&src, &dst, service)?
                } else {
                    self.broker.is_reachable(&src, &dst, service)?
                };
                Outcome { verdict: Some(r.decision.verdict), reason: Some(r.decision.reason), ..Outcome::value(&r) }
            }
            Op::OpenSession { netid, project, mode, managed, mfa, issuer, subject }
            | Op::ResumeSession { netid, project, mode, managed, mfa, issuer, subject } => {
                let netid = (issuer.is_none()).then_some(netid.as_str());
                let p = self.principal(netid, issuer.as_deref(), subject.as_deref(), mfa.as_deref())?;
                let now = self.broker.now();
                let (s, view) = if matches!(op, Op::OpenSession { .. }) {
                    self.broker.open_session(&p, project, *mode, *managed, now)?
                } else {
                    self.broker.resume_session(&p, project, *mode, *managed, now)?
                };
                Outcome::value(&view)
                    .with_id(&s.id)
                    .with("vm", &s.vm)
                    .with("user", &s.arbitrary_user)
                    .with("credential", &s.credential)
            }
            Op::CloseSession { session } => {
                let (id, now) = (self.resolve(session), self.broker.now());
                Outcome::value(self.broker.close_session(&id, now)?)
            }
            Op::Expire {} => {
                let now = self.broker.now();
                Outcome::value(self.broker.expire_retained(now))
            }
            Op::AlignGroups { session } => {
                let id = self.resolve(session);
                Outcome::value(self.broker.align_groups(&id)?)
            }
            Op::VmAuth { session, vm, target_session } => {
                let secret = self.secret_of(&self.resolve(session))?;
                let target = match (vm, target_session) {
                    (Some(v), None) => self.resolve(v),
                    (None, Some(t)) => self.broker.session(&self.resolve(t))?.vm.clone(),
                    (None, None) => self.broker.session(&self.resolve(session))?.vm.clone(),
                    _ => return Err(StepError::Invalid("give at most one of vm or target_session".into())),
                };
                let outcome = self.broker.authenticate_to_vm(&secret, &target, self.broker.now());
                let verdict = if outcome == AuthOutcome::Accepted { Verdict::Allow } else { Verdict::Deny };
                Outcome { verdict: Some(verdict), ..Outcome::value(outcome) }
            }
            Op::Clipboard { session, direction } => {
                let id = self.resolve(session);
                Outcome::decision(self.broker.attempt_clipboard(&id, *direction)?)
            }
            Op::FileEgress { session, object } => {
                let id = self.resolve(session);
                Outcome::decision(self.broker.attempt_file_egress(&id, object)?)
            }
            Op::ExportSubmit { session, payload } => {
                let id = self.resolve(session);
                let r = self.broker.submit_export(&id, payload)?;
                Outcome::value(&r).with_id(&r.id)
            }
            Op::ExportAdjudicate { broker, request, verdict, rationale } => {
                let id = self.resolve(request);
                let r = self.broker.adjudicate_export(broker, &id, *verdict, rationale)?;
                Outcome::value(&r).with_id(&r.id)
            }
            Op::ImageSubmit { builder, project, payload, from } => {
                let from = self.source(from)?;
                let i = self.broker.submit_image(builder, project, payload, &from)?;
                Outcome::value(&i).with_id(&i.id)
            }
            Op::ImageVet { vetter, image, report } => {
                let id = self.resolve(image);
                Outcome::value(self.broker.vet_image(vetter, &id, report)?)
            }
            Op::ImageApprove { approver, image } => {
                let id = self.resolve(image);
                Outcome::value(self.broker.approve_image(approver, &id)?)
            }
            Op::ImageDeploy { operator, image, project, digest } => {
                let id = self.resolve(image);
                let digest = match digest {
                    Some(hex) => hex.parse::<Digest>().ok().ok_or_else(|| StepError::Invalid(format!("`{hex}` is not a digest")))?,
                    None => self.broker.image(&id)?.digest,
                };
                let inst = self.broker.deploy_image(operator, &id, project, &digest)?;
                Outcome::value(&inst).with_id(&inst.id).with("vm", &inst.vm)
            }
            Op::ImageUpdate { operator, instance, image } => {
                let (inst, img) = (self.resolve(instance), self.resolve(image));
                let new = self.broker.update_deployment(operator, &inst, &img)?;
                Outcome::value(&new).with_id(&new.id).with("vm", &new.vm)
            }
            Op::ImageRevoke { actor, image } => {
                let id = self.resolve(image);
                Outcome::value(self.broker.revoke_image(actor, &id)?)
            }
            Op::Resolve { name, session, time } => {
                let name = match (name, session) {
                    (Some(n), None) => self.resolve(n),
                    (None, Some(s)) => self.broker.session(&self.resolve(s))?.arbitrary_user.clone(),
                    _ => return Err(StepError::Invalid("give exactly one of name or session".into())),
                };
                let at = time.map_or(self.broker.now(), Timestamp);
                Outcome::value(self.broker.resolve_identity(&name, at)?)
            }
            Op::Trace { session } => {
                let events = self.broker.reconstruct_session(&self.resolve(session))?;
                Outcome::value(events.iter().map(|e| e.action.as_str()).collect::<Vec<_>>())
            }
            Op::VerifyChain {} => {
                let status = self.broker.verify_chain();
                let verdict = if status.valid { Verdict::Allow } else { Verdict::Deny };
                Outcome { verdict: Some(verdict), ..Outcome::value(json!({"valid": status.valid, "first_bad_seq": status.first_bad_seq})) }
            }
            Op::Report { project, from, to } => {
                Outcome::value(self.broker.compliance_report(project, Period::new(Timestamp(*from), Timestamp(*to)))?)
            }
        };
        Ok(out)
    }

    fn rule_endpoint(&self, s: &str) -> Result<RuleEndpoint, StepError> {
        match parse_rule_endpoint(s).map_err(StepError::Invalid)? {
            RuleEndpoint::Vm(v) => Ok(RuleEndpoint::Vm(self.resolve(&v))),
            other => Ok(other),
        }
    }
}
