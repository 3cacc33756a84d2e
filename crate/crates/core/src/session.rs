//! Brokered sessions: real principals mapped onto per-VM arbitrary users with
//! single-session credentials, retained VMs and shadow-group alignment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::Display;

use crate::broker::Broker;
use crate::directory::{is_arbitrary_name, shadow_name, AuthMethod, AuthenticatedPrincipal, GroupKind};
use crate::enclave::{evaluate, Service, Target, TargetKind, Traveler, VmState, ZoneId};
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action, SYSTEM_ACTOR};
use crate::types::{AccessMode, Secret, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbitraryUser {
    pub name: String,
    pub vm: String,
    pub created_at: Timestamp,
    pub shadow_groups: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum CredentialState {
    Active,
    Destroyed,
}

/// A single-session credential. The secret never leaves the broker except
/// in the message that installs it on the VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EphemeralCredential {
    pub id: String,
    pub arbitrary_user: String,
    pub session: String,
    pub state: CredentialState,
    #[serde(skip)]
    pub(crate) secret: Secret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub principal: String,
    pub project: String,
    pub mode: AccessMode,
    pub vm: String,
    pub arbitrary_user: String,
    pub credential: String,
    pub opened_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub state: SessionState,
    pub endpoint_managed: bool,
    pub origin: ZoneId,
    pub auth_method: AuthMethod,
}

impl Session {
    pub fn is_open(&self) -> bool {
        self.state == SessionState::Open
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionBinding {
    pub principal: String,
    pub project: String,
    pub vm: String,
    pub retained_until: Timestamp,
    /// Set when the VM was destroyed out from under the binding.
    pub vm_lost: bool,
}

/// What the client learns about its session. Contains no secret by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientView {
    pub session_id: String,
    pub vm_id: String,
    pub gateway_path: Vec<String>,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum AuthOutcome {
    Accepted,
    Rejected,
}

/// Instructions sent to a VM's agent. Identities are arbitrary users only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum VmMessage {
    CreateUser { vm: String, user: String },
    SetCredential { vm: String, user: String, credential: String, secret: String },
    DestroyCredential { vm: String, user: String, credential: String },
    AddToGroup { vm: String, user: String, group: String },
    RemoveFromGroup { vm: String, user: String, group: String },
    MountShare { vm: String, user: String, share: String },
}

impl VmMessage {
    pub fn vm(&self) -> &str {
        match self {
            VmMessage::CreateUser { vm, .. }
            | VmMessage::SetCredential { vm, .. }
            | VmMessage::DestroyCredential { vm, .. }
            | VmMessage::AddToGroup { vm, .. }
            | VmMessage::RemoveFromGroup { vm, .. }
            | VmMessage::MountShare { vm, .. } => vm,
        }
    }
}

/// Everything the broker sent outward, in order.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    /// Serialized client views.
    pub client: Vec<String>,
    pub vm: Vec<VmMessage>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct SessionTable {
    pub(crate) sessions: BTreeMap<String, Session>,
    pub(crate) users: BTreeMap<String, ArbitraryUser>,
    pub(crate) vm_user: BTreeMap<String, String>,
    pub(crate) credentials: BTreeMap<String, EphemeralCredential>,
    by_secret: BTreeMap<[u8; 16], String>,
    active_cred: BTreeMap<String, String>,
    pub(crate) bindings: BTreeMap<(String, String), RetentionBinding>,
    open: BTreeSet<String>,
}

impl SessionTable {
    pub(crate) fn get(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    fn open_sessions(&self) -> impl Iterator<Item = &Session> {
        self.open.iter().map(|id| &self.sessions[id])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CloseKind {
    Normal,
    Forced,
    VmLost,
}

impl Broker {
    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| BrokerError::UnknownSession(id.to_owned()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.sessions.values()
    }

    pub fn arbitrary_user(&self, name: &str) -> Option<&ArbitraryUser> {
        self.sessions.users.get(name)
    }

    pub fn credential(&self, id: &str) -> Option<&EphemeralCredential> {
        self.sessions.credentials.get(id)
    }

    pub fn retention_binding(&self, principal: &str, project: &str) -> Option<&RetentionBinding> {
        self.sessions.bindings.get(&(principal.to_owned(), project.to_owned()))
    }

    pub fn retention_bindings(&self) -> impl Iterator<Item = &RetentionBinding> {
        self.sessions.bindings.values()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn open_session(
        &mut self,
        principal: &AuthenticatedPrincipal,
        project: &str,
        mode: AccessMode,
        endpoint_managed: bool,
        now: Timestamp,
    ) -> Result<(Session, ClientView)> {
        self.start_session(principal, project, mode, endpoint_managed, now, false)
    }

    /// Reopens the principal's retained VM with a fresh credential.
    pub fn resume_session(
        &mut self,
        principal: &AuthenticatedPrincipal,
        project: &str,
        mode: AccessMode,
        endpoint_managed: bool,
        now: Timestamp,
    ) -> Result<(Session, ClientView)> {
        self.start_session(principal, project, mode, endpoint_managed, now, true)
    }

    fn start_session(
        &mut self,
        principal: &AuthenticatedPrincipal,
        project: &str,
        mode: AccessMode,
        endpoint_managed: bool,
        now: Timestamp,
        resume: bool,
    ) -> Result<(Session, ClientView)> {
        principal.require_mfa()?;
        let netid = principal.netid().to_owned();
        self.advance_to(now);
        let now = self.clock;
        let prj = self.project_ref(project)?;
        let zone = prj.zone;
        let decision = self.access_decision(&netid, prj, mode);
        if !decision.is_allow() {
            return Err(BrokerError::AccessDenied(decision.reason));
        }
        if mode == AccessMode::Vpn && !endpoint_managed {
            return Err(BrokerError::UnmanagedEndpoint);
        }
        if !self.config.allow_concurrent_sessions
            && self.sessions.open_sessions().any(|s| s.principal == netid && s.project == project)
        {
            return Err(BrokerError::SessionAlreadyOpen { netid, project: project.to_owned() });
        }

        let key = (netid.clone(), project.to_owned());
        let binding = self.sessions.bindings.get(&key).cloned();
        let reuse = match binding {
            None if resume => {
                return Err(BrokerError::NoRetentionBinding { netid, project: project.to_owned() });
            }
            None => None,
            Some(b) if b.vm_lost => {
                if resume {
                    self.sessions.bindings.remove(&key);
                    return Err(BrokerError::VmUnavailable(format!("retained vm {} was destroyed", b.vm)));
                }
                self.sessions.bindings.remove(&key);
                None
            }
            Some(b) if b.retained_until < now => {
                if resume {
                    return Err(BrokerError::RetentionExpired { netid, project: project.to_owned() });
                }
                self.reclaim_binding(&key);
                None
            }
            Some(b) => Some(b.vm),
        };

        let origin = self.config.client_origin;
        let probe = |id: &str| Target { id: id.to_owned(), zone, kind: TargetKind::Vm };
        let traveler = |id: &str| Traveler::Session { id: id.to_owned(), origin, mode, open: true, authorized: true };
        let check = evaluate(&self.enclave.topology, &traveler("pending"), &probe("pending"), Service::Rdp);
        if !check.decision.is_allow() {
            return Err(BrokerError::NoPath(check.decision.reason));
        }

        let reused = reuse.is_some();
        let vm = match reuse {
            Some(vm) => {
                self.sessions.bindings.remove(&key);
                if let Some(v) = self.enclave.vms.get_mut(&vm) {
                    v.state = VmState::Running;
                }
                vm
            }
            None => {
                let size = self.config.session_vm;
                self.provision_inner(project, zone, size.cpu, size.ram_gb, false, "session")
                    .map_err(|e| BrokerError::VmUnavailable(e.to_string()))?
            }
        };

        let name = match self.sessions.vm_user.get(&vm) {
            Some(n) => n.clone(),
            None => {
                let name = self.fresh_arbitrary_name();
                self.sessions.users.insert(
                    name.clone(),
                    ArbitraryUser { name: name.clone(), vm: vm.clone(), created_at: now, shadow_groups: BTreeSet::new() },
                );
                self.sessions.vm_user.insert(vm.clone(), name.clone());
                self.transcript.vm.push(VmMessage::CreateUser { vm: vm.clone(), user: name.clone() });
                name
            }
        };

        let sid = self.ids.next("s", 6);
        let cred = self.mint_inner(&name, &sid)?;
        let gateway_path = evaluate(&self.enclave.topology, &traveler(&sid), &probe(&vm), Service::Rdp).path;
        let session = Session {
            id: sid.clone(),
            principal: netid.clone(),
            project: project.to_owned(),
            mode,
            vm: vm.clone(),
            arbitrary_user: name.clone(),
            credential: cred.clone(),
            opened_at: now,
            closed_at: None,
            state: SessionState::Open,
            endpoint_managed,
            origin,
            auth_method: principal.method(),
        };
        self.sessions.sessions.insert(sid.clone(), session);
        self.sessions.open.insert(sid.clone());

        self.log(
            &netid,
            Action::Authn,
            &sid,
            detail([
                ("project", project.to_owned()),
                ("mode", mode.to_string()),
                ("method", principal.method().to_string()),
                ("mfa", "passed".to_owned()),
                ("endpoint_managed", endpoint_managed.to_string()),
                ("resume", resume.to_string()),
            ]),
        );
        self.log(
            &netid,
            Action::Map,
            &name,
            detail([
                ("session", sid.clone()),
                ("principal", netid.clone()),
                ("vm", vm.clone()),
                ("project", project.to_owned()),
                ("mode", mode.to_string()),
                ("credential", cred),
                ("reused_vm", reused.to_string()),
            ]),
        );
        // the initial shadow set is recorded on the attach event
        let shadows = self.align_inner(&sid, false);
        let mut mounted = Vec::new();
        let shares: Vec<String> = self.projects[project].shares.iter().cloned().collect();
        for share in shares {
            if self.check_share_acl(&name, &share)?.is_allow() {
                self.transcript.vm.push(VmMessage::MountShare { vm: vm.clone(), user: name.clone(), share: share.clone() });
                mounted.push(share);
            }
        }
        let held: Vec<String> = self.sessions.users[&name].shadow_groups.iter().cloned().collect();
        debug_assert!(shadows.iter().all(|s| held.contains(s)));
        self.log(
            SYSTEM_ACTOR,
            Action::Attach,
            &sid,
            detail([
                ("session", sid.clone()),
                ("project", project.to_owned()),
                ("vm", vm.clone()),
                ("shares", mounted.join(",")),
                ("shadow_groups", held.join(",")),
            ]),
        );

        let view = ClientView { session_id: sid.clone(), vm_id: vm, gateway_path, mode };
        self.transcript.client.push(serde_json::to_string(&view).expect("client view serializes"));
        Ok((self.sessions.sessions[&sid].clone(), view))
    }

    fn fresh_arbitrary_name(&mut self) -> String {
        loop {
            let name = format!("u-{}", self.random_hex(4));
            debug_assert!(is_arbitrary_name(&name));
            if !self.sessions.users.contains_key(&name) && !self.directory.users.contains_key(&name) {
                return name;
            }
        }
    }

    /// Issues a new credential for an arbitrary user's open session.
    pub fn mint_credential(&mut self, arbitrary_user: &str, session: &str) -> Result<EphemeralCredential> {
        if !self.sessions.users.contains_key(arbitrary_user) {
            return Err(BrokerError::UnknownArbitraryUser(arbitrary_user.to_owned()));
        }
        if self.sessions.active_cred.contains_key(arbitrary_user) {
            return Err(BrokerError::CredentialAlreadyActive(arbitrary_user.to_owned()));
        }
        let s = self.session(session)?;
        if s.arbitrary_user != arbitrary_user {
            return Err(BrokerError::InvalidSpec(format!("session {session} does not belong to {arbitrary_user}")));
        }
        if !s.is_open() {
            return Err(BrokerError::SessionClosed(session.to_owned()));
        }
        let id = self.mint_inner(arbitrary_user, session)?;
        if let Some(s) = self.sessions.sessions.get_mut(session) {
            s.credential = id.clone();
        }
        Ok(self.sessions.credentials[&id].clone())
    }

    fn mint_inner(&mut self, name: &str, session: &str) -> Result<String> {
        if self.sessions.active_cred.contains_key(name) {
            return Err(BrokerError::CredentialAlreadyActive(name.to_owned()));
        }
        let secret = loop {
            let mut bytes = [0u8; 16];
            rand::RngCore::fill_bytes(&mut self.rng, &mut bytes);
            if !self.sessions.by_secret.contains_key(&bytes) {
                break Secret::from_bytes(bytes);
            }
        };
        let id = self.ids.next("c", 6);
        let vm = self.sessions.users[name].vm.clone();
        self.sessions.by_secret.insert(secret.0, id.clone());
        self.sessions.active_cred.insert(name.to_owned(), id.clone());
        self.sessions.credentials.insert(
            id.clone(),
            EphemeralCredential {
                id: id.clone(),
                arbitrary_user: name.to_owned(),
                session: session.to_owned(),
                state: CredentialState::Active,
                secret,
            },
        );
        self.transcript.vm.push(VmMessage::SetCredential {
            vm,
            user: name.to_owned(),
            credential: id.clone(),
            secret: secret.to_hex(),
        });
        Ok(id)
    }

    fn destroy_credential(&mut self, name: &str) {
        let Some(id) = self.sessions.active_cred.remove(name) else { return };
        let cred = self.sessions.credentials.get_mut(&id).expect("indexed credential");
        cred.state = CredentialState::Destroyed;
        let session = cred.session.clone();
        let vm = self.sessions.users[name].vm.clone();
        self.transcript.vm.push(VmMessage::DestroyCredential { vm, user: name.to_owned(), credential: id.clone() });
        self.log(SYSTEM_ACTOR, Action::CredentialDestroy, &id, detail([("session", session), ("arbitrary_user", name.to_owned())]));
    }

    /// Mirrors the principal's project-relevant groups onto the session's
    /// arbitrary user. Returns the shadow memberships this call created.
    pub fn align_groups(&mut self, session: &str) -> Result<BTreeSet<String>> {
        if !self.session(session)?.is_open() {
            return Err(BrokerError::SessionClosed(session.to_owned()));
        }
        Ok(self.align_inner(session, true))
    }

    fn relevant_groups(&self, project: &str) -> BTreeSet<String> {
        let p = &self.projects[project];
        let mut groups: BTreeSet<String> = [p.vpn_group.clone(), p.rdp_group.clone()].into();
        groups.extend(p.role_rules.iter().cloned());
        for s in &p.shares {
            groups.extend(self.enclave.shares[s].acl_groups.iter().cloned());
        }
        groups
    }

    fn align_inner(&mut self, session: &str, log: bool) -> BTreeSet<String> {
        let s = &self.sessions.sessions[session];
        let (principal, name, vm) = (s.principal.clone(), s.arbitrary_user.clone(), s.vm.clone());
        let active = self.directory.is_active(&principal);
        let desired: BTreeSet<String> = self
            .relevant_groups(&s.project)
            .into_iter()
            .filter(|g| active && self.directory.is_member(g, &principal))
            .map(|g| shadow_name(&g))
            .collect();
        let current = self.sessions.users[&name].shadow_groups.clone();
        let added: BTreeSet<String> = desired.difference(&current).cloned().collect();
        let removed: Vec<String> = current.difference(&desired).cloned().collect();
        for g in &added {
            if !self.directory.groups.contains_key(g) {
                let owner = self.directory.groups[g.trim_end_matches("@shadow")].owning_project.clone();
                self.directory.insert_group(g, GroupKind::Shadow, owner.as_deref());
            }
            self.directory.apply(g, &name, crate::directory::MembershipAction::Add);
            self.transcript.vm.push(VmMessage::AddToGroup { vm: vm.clone(), user: name.clone(), group: g.clone() });
        }
        for g in &removed {
            self.directory.apply(g, &name, crate::directory::MembershipAction::Remove);
            self.transcript.vm.push(VmMessage::RemoveFromGroup { vm: vm.clone(), user: name.clone(), group: g.clone() });
        }
        if log && (!added.is_empty() || !removed.is_empty()) {
            let listed = |set: &mut dyn Iterator<Item = &String>| set.map(String::as_str).collect::<Vec<_>>().join(",");
            let d = detail([
                ("session", session.to_owned()),
                ("project", self.sessions.sessions[session].project.clone()),
                ("added", listed(&mut added.iter())),
                ("removed", listed(&mut removed.iter())),
            ]);
            self.log(SYSTEM_ACTOR, Action::Membership, &name, d);
        }
        self.sessions.users.get_mut(&name).expect("known user").shadow_groups = desired;
        added
    }

    pub(crate) fn realign_principal(&mut self, netid: &str) {
        let ids: Vec<String> = self.sessions.open_sessions().filter(|s| s.principal == netid).map(|s| s.id.clone()).collect();
        for id in ids {
            self.align_inner(&id, true);
        }
    }

    pub(crate) fn realign_project(&mut self, project: &str) {
        let ids: Vec<String> = self.sessions.open_sessions().filter(|s| s.project == project).map(|s| s.id.clone()).collect();
        for id in ids {
            self.align_inner(&id, true);
        }
    }

    /// Whether `secret` opens `vm` right now. Never fails; rejection is a value.
    pub fn authenticate_to_vm(&self, secret: &Secret, vm: &str, now: Timestamp) -> AuthOutcome {
        let accepted = self
            .sessions
            .by_secret
            .get(&secret.0)
            .and_then(|id| self.sessions.credentials.get(id))
            .filter(|c| c.secret.matches(secret) && c.state == CredentialState::Active)
            .and_then(|c| self.sessions.sessions.get(&c.session))
            .is_some_and(|s| s.is_open() && s.vm == vm && now >= s.opened_at);
        if accepted {
            AuthOutcome::Accepted
        } else {
            AuthOutcome::Rejected
        }
    }

    pub fn close_session(&mut self, session: &str, now: Timestamp) -> Result<Session> {
        self.advance_to(now);
        self.close_inner(session, CloseKind::Normal)
    }

    fn close_inner(&mut self, session: &str, kind: CloseKind) -> Result<Session> {
        let s = self.session(session)?;
        if !s.is_open() {
            return Err(BrokerError::SessionAlreadyClosed(session.to_owned()));
        }
        let (name, principal, project, vm) = (s.arbitrary_user.clone(), s.principal.clone(), s.project.clone(), s.vm.clone());
        let now = self.clock;
        self.destroy_credential(&name);
        let shadows: Vec<String> = std::mem::take(&mut self.sessions.users.get_mut(&name).expect("known user").shadow_groups)
            .into_iter()
            .collect();
        for g in shadows {
            self.directory.apply(&g, &name, crate::directory::MembershipAction::Remove);
            self.transcript.vm.push(VmMessage::RemoveFromGroup { vm: vm.clone(), user: name.clone(), group: g });
        }
        let s = self.sessions.sessions.get_mut(session).expect("checked above");
        s.state = SessionState::Closed;
        s.closed_at = Some(now);
        self.sessions.open.remove(session);

        let mut d = detail([("session", session.to_owned()), ("project", project.clone()), ("principal", principal.clone())]);
        if kind != CloseKind::VmLost {
            let retained_until = now.plus_secs(self.retention_secs(&project));
            let key = (principal.clone(), project.clone());
            if let Some(old) = self.sessions.bindings.get(&key).cloned() {
                if old.vm != vm && !old.vm_lost {
                    self.reclaim_binding(&key);
                }
            }
            self.sessions.bindings.insert(
                key,
                RetentionBinding { principal, project, vm: vm.clone(), retained_until, vm_lost: false },
            );
            if let Some(v) = self.enclave.vms.get_mut(&vm) {
                v.state = VmState::Retained;
            }
            d.insert("retained_until".into(), retained_until.to_string());
        }
        let action = match kind {
            CloseKind::Normal => Action::Close,
            CloseKind::Forced => Action::RevokeForcedClose,
            CloseKind::VmLost => Action::VmLostClose,
        };
        self.log(SYSTEM_ACTOR, action, session, d);
        Ok(self.sessions.sessions[session].clone())
    }

    /// Force-closes every open session matching `pred`.
    pub(crate) fn force_close_where(&mut self, pred: impl Fn(&Session) -> bool) -> Vec<String> {
        let ids: Vec<String> = self.sessions.open_sessions().filter(|s| pred(s)).map(|s| s.id.clone()).collect();
        for id in &ids {
            self.close_inner(id, CloseKind::Forced).expect("open session closes");
        }
        ids
    }

    pub(crate) fn force_close_principal(&mut self, netid: &str) -> Vec<String> {
        self.force_close_where(|s| s.principal == netid)
    }

    pub(crate) fn close_sessions_on_vm(&mut self, vm: &str) -> Vec<String> {
        let ids: Vec<String> = self.sessions.open_sessions().filter(|s| s.vm == vm).map(|s| s.id.clone()).collect();
        for id in &ids {
            self.close_inner(id, CloseKind::VmLost).expect("open session closes");
        }
        ids
    }

    /// Marks any binding on `vm` as lost. Returns the bound principal.
    pub(crate) fn invalidate_binding_for(&mut self, vm: &str) -> Option<String> {
        let b = self.sessions.bindings.values_mut().find(|b| b.vm == vm && !b.vm_lost)?;
        b.vm_lost = true;
        Some(b.principal.clone())
    }

    fn reclaim_binding(&mut self, key: &(String, String)) -> Option<String> {
        let b = self.sessions.bindings.remove(key)?;
        if b.vm_lost {
            return None;
        }
        self.log(
            SYSTEM_ACTOR,
            Action::Expire,
            &b.vm,
            detail([("project", b.project.clone()), ("principal", b.principal.clone()), ("retained_until", b.retained_until.to_string())]),
        );
        self.destroy_inner(&b.vm, "retention-expired").ok().map(|_| b.vm)
    }

    /// Removes every binding whose retention has lapsed and destroys its VM.
    pub fn expire_retained(&mut self, now: Timestamp) -> Vec<String> {
        self.advance_to(now);
        let now = self.clock;
        let expired: Vec<(String, String)> =
            self.sessions.bindings.iter().filter(|(_, b)| b.retained_until < now).map(|(k, _)| k.clone()).collect();
        expired.iter().filter_map(|k| self.reclaim_binding(k)).collect()
    }

    /// Installed-secret view as seen by a VM's agent, for the given credential.
    pub fn installed_secret(&self, credential: &str) -> Option<Secret> {
        self.transcript.vm.iter().find_map(|m| match m {
            VmMessage::SetCredential { credential: c, secret, .. } if c == credential => Secret::from_hex(secret),
            _ => None,
        })
    }
}
