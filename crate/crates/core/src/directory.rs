//! Principals, affiliates, groups, federation trust and MFA.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::{Display, EnumString, IntoStaticStr};
use subtle::ConstantTimeEq;

use crate::broker::Broker;
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action, SYSTEM_ACTOR};
use crate::types::{AccessMode, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString, IntoStaticStr)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum Affiliation {
    Member,
    Affiliate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealPersistentUser {
    pub netid: String,
    pub affiliation: Affiliation,
    pub sponsor: Option<String>,
    pub mfa_enrolled: bool,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "kebab-case")]
#[strum(serialize_all = "kebab-case", ascii_case_insensitive)]
pub enum GroupKind {
    AccessVpn,
    AccessRdp,
    Role,
    Shadow,
}

impl GroupKind {
    pub fn for_mode(mode: AccessMode) -> Self {
        match mode {
            AccessMode::Vpn => GroupKind::AccessVpn,
            AccessMode::Rdp => GroupKind::AccessRdp,
        }
    }

    pub fn mode(self) -> Option<AccessMode> {
        match self {
            GroupKind::AccessVpn => Some(AccessMode::Vpn),
            GroupKind::AccessRdp => Some(AccessMode::Rdp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub members: BTreeSet<String>,
    pub owning_project: Option<String>,
    pub kind: GroupKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederatedAssertion {
    pub issuer: String,
    pub subject: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub mfa_satisfied: bool,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum AuthMethod {
    Local,
    Federated,
}

/// Proof that the directory authenticated someone. Only the directory can
/// construct one, so holding a value means authentication actually happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuthenticatedPrincipal {
    netid: String,
    method: AuthMethod,
    mfa_passed: bool,
    authenticated_at: Timestamp,
}

impl AuthenticatedPrincipal {
    pub fn netid(&self) -> &str {
        &self.netid
    }

    pub fn method(&self) -> AuthMethod {
        self.method
    }

    pub fn mfa_passed(&self) -> bool {
        self.mfa_passed
    }

    pub fn authenticated_at(&self) -> Timestamp {
        self.authenticated_at
    }

    pub(crate) fn require_mfa(&self) -> Result<()> {
        if self.mfa_passed {
            Ok(())
        } else {
            Err(BrokerError::MfaRequired)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString, IntoStaticStr)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum MembershipAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum PlatformRole {
    Admin,
    Vetter,
    Operator,
}

/// True for names in the broker's arbitrary-user namespace: `u-` followed by
/// eight lowercase hex digits.
pub fn is_arbitrary_name(name: &str) -> bool {
    name.len() == 10
        && name.starts_with("u-")
        && name[2..].bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn shadow_name(group: &str) -> String {
    format!("{group}@shadow")
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Directory {
    pub(crate) users: BTreeMap<String, RealPersistentUser>,
    pub(crate) groups: BTreeMap<String, Group>,
    factors: BTreeMap<String, String>,
    pub(crate) trusted_issuers: BTreeSet<String>,
    pub(crate) subjects: BTreeMap<(String, String), String>,
    pub(crate) roles: BTreeMap<String, BTreeSet<PlatformRole>>,
}

impl Directory {
    pub(crate) fn user(&self, netid: &str) -> Result<&RealPersistentUser> {
        self.users.get(netid).ok_or_else(|| BrokerError::UnknownUser(netid.to_owned()))
    }

    pub(crate) fn active_user(&self, netid: &str) -> Result<&RealPersistentUser> {
        let u = self.user(netid)?;
        if u.active {
            Ok(u)
        } else {
            Err(BrokerError::UserInactive(netid.to_owned()))
        }
    }

    pub(crate) fn is_active(&self, netid: &str) -> bool {
        self.users.get(netid).is_some_and(|u| u.active)
    }

    pub(crate) fn has_role(&self, netid: &str, role: PlatformRole) -> bool {
        self.is_active(netid) && self.roles.get(netid).is_some_and(|r| r.contains(&role))
    }

    pub(crate) fn is_admin(&self, netid: &str) -> bool {
        self.has_role(netid, PlatformRole::Admin)
    }

    pub(crate) fn is_member(&self, group: &str, netid: &str) -> bool {
        self.groups.get(group).is_some_and(|g| g.members.contains(netid))
    }

    pub(crate) fn group(&self, name: &str) -> Result<&Group> {
        self.groups.get(name).ok_or_else(|| BrokerError::UnknownGroup(name.to_owned()))
    }

    /// Adds or removes a member. Returns whether anything changed.
    pub(crate) fn apply(&mut self, group: &str, netid: &str, action: MembershipAction) -> bool {
        let Some(g) = self.groups.get_mut(group) else { return false };
        match action {
            MembershipAction::Add => g.members.insert(netid.to_owned()),
            MembershipAction::Remove => g.members.remove(netid),
        }
    }

    pub(crate) fn insert_group(&mut self, name: &str, kind: GroupKind, owning_project: Option<&str>) {
        self.groups.insert(
            name.to_owned(),
            Group { name: name.to_owned(), members: BTreeSet::new(), owning_project: owning_project.map(str::to_owned), kind },
        );
    }

    /// Sponsor of every affiliate must be an active member.
    fn sponsor_ok(&self, user: &RealPersistentUser) -> bool {
        match user.affiliation {
            Affiliation::Member => true,
            Affiliation::Affiliate => user
                .sponsor
                .as_deref()
                .and_then(|s| self.users.get(s))
                .is_some_and(|s| s.active && s.affiliation == Affiliation::Member),
        }
    }
}

impl Broker {
    pub fn user(&self, netid: &str) -> Result<&RealPersistentUser> {
        self.directory.user(netid)
    }

    pub fn users(&self) -> impl Iterator<Item = &RealPersistentUser> {
        self.directory.users.values()
    }

    pub fn group(&self, name: &str) -> Result<&Group> {
        self.directory.group(name)
    }

    pub fn groups(&self) -> impl Iterator<Item = &Group> {
        self.directory.groups.values()
    }

    pub fn has_role(&self, netid: &str, role: PlatformRole) -> bool {
        self.directory.has_role(netid, role)
    }

    pub fn register_user(
        &mut self,
        netid: &str,
        affiliation: Affiliation,
        sponsor: Option<&str>,
    ) -> Result<RealPersistentUser> {
        if netid.is_empty() || netid.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(BrokerError::InvalidSpec(format!("netid `{netid}`")));
        }
        if is_arbitrary_name(netid) {
            return Err(BrokerError::ReservedNetid(netid.to_owned()));
        }
        if self.directory.users.contains_key(netid) {
            return Err(BrokerError::DuplicateNetid(netid.to_owned()));
        }
        let sponsor = match affiliation {
            Affiliation::Member => None,
            Affiliation::Affiliate => {
                let s = sponsor.ok_or_else(|| BrokerError::MissingSponsor(netid.to_owned()))?;
                let valid = self.directory.users.get(s).is_some_and(|u| u.active && u.affiliation == Affiliation::Member);
                if !valid {
                    return Err(BrokerError::InvalidSponsor(s.to_owned()));
                }
                Some(s.to_owned())
            }
        };
        let user = RealPersistentUser { netid: netid.to_owned(), affiliation, sponsor, mfa_enrolled: false, active: true };
        self.directory.users.insert(netid.to_owned(), user.clone());
        let mut d = detail([("affiliation", affiliation.to_string())]);
        if let Some(s) = &user.sponsor {
            d.insert("sponsor".into(), s.clone());
        }
        self.log(SYSTEM_ACTOR, Action::UserRegister, netid, d);
        Ok(user)
    }

    /// Grants the first administrator. Fails once any administrator exists.
    pub fn bootstrap_admin(&mut self, netid: &str) -> Result<()> {
        self.directory.active_user(netid)?;
        if self.directory.roles.values().any(|r| r.contains(&PlatformRole::Admin)) {
            return Err(BrokerError::unauthorized(netid, "bootstrap an administrator"));
        }
        self.directory.roles.entry(netid.to_owned()).or_default().insert(PlatformRole::Admin);
        self.log(SYSTEM_ACTOR, Action::RoleAssign, netid, detail([("role", "admin")]));
        Ok(())
    }

    pub fn assign_role(&mut self, actor: &str, netid: &str, role: PlatformRole) -> Result<()> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "assign platform roles"));
        }
        self.directory.active_user(netid)?;
        self.directory.roles.entry(netid.to_owned()).or_default().insert(role);
        self.log(actor, Action::RoleAssign, netid, detail([("role", role.to_string())]));
        Ok(())
    }

    /// Records the user's simulated second factor (a shared secret).
    pub fn enroll_mfa(&mut self, netid: &str, factor: &str) -> Result<()> {
        self.directory.user(netid)?;
        if factor.is_empty() {
            return Err(BrokerError::InvalidSpec("empty mfa factor".into()));
        }
        self.directory.factors.insert(netid.to_owned(), factor.to_owned());
        if let Some(u) = self.directory.users.get_mut(netid) {
            u.mfa_enrolled = true;
        }
        self.log(SYSTEM_ACTOR, Action::MfaEnroll, netid, detail::<&str, &str>([]));
        Ok(())
    }

    pub fn deactivate_user(&mut self, actor: &str, netid: &str) -> Result<Vec<String>> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "deactivate users"));
        }
        self.directory.user(netid)?;
        self.deactivate_inner(actor, netid, "administrative");
        Ok(self.validate_directory())
    }

    fn deactivate_inner(&mut self, actor: &str, netid: &str, reason: &str) {
        if let Some(u) = self.directory.users.get_mut(netid) {
            if !u.active {
                return;
            }
            u.active = false;
        }
        self.log(actor, Action::UserDeactivate, netid, detail([("reason", reason)]));
        self.force_close_principal(netid);
    }

    /// Deactivates every affiliate whose sponsor is no longer an active member.
    /// Returns the affiliates deactivated by this pass.
    pub fn validate_directory(&mut self) -> Vec<String> {
        let orphaned: Vec<String> = self
            .directory
            .users
            .values()
            .filter(|u| u.active && !self.directory.sponsor_ok(u))
            .map(|u| u.netid.clone())
            .collect();
        for netid in &orphaned {
            self.deactivate_inner(SYSTEM_ACTOR, netid, "sponsor-inactive");
        }
        orphaned
    }

    pub fn trust_issuer(&mut self, actor: &str, issuer: &str) -> Result<()> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "trust identity providers"));
        }
        self.directory.trusted_issuers.insert(issuer.to_owned());
        self.log(actor, Action::IssuerTrust, issuer, detail::<&str, &str>([]));
        Ok(())
    }

    pub fn map_subject(&mut self, actor: &str, issuer: &str, subject: &str, netid: &str) -> Result<()> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "map federated subjects"));
        }
        self.directory.user(netid)?;
        self.directory.subjects.insert((issuer.to_owned(), subject.to_owned()), netid.to_owned());
        self.log(actor, Action::SubjectMap, netid, detail([("issuer", issuer), ("subject", subject)]));
        Ok(())
    }

    /// First-factor authentication against the local directory.
    pub fn authenticate_local(&self, netid: &str, now: Timestamp) -> Result<AuthenticatedPrincipal> {
        self.directory.active_user(netid)?;
        Ok(AuthenticatedPrincipal {
            netid: netid.to_owned(),
            method: AuthMethod::Local,
            mfa_passed: false,
            authenticated_at: now,
        })
    }

    pub fn assert_federated(&self, assertion: &FederatedAssertion, now: Timestamp) -> Result<AuthenticatedPrincipal> {
        if !self.directory.trusted_issuers.contains(&assertion.issuer) {
            return Err(BrokerError::UntrustedIssuer(assertion.issuer.clone()));
        }
        if assertion.expires_at <= assertion.issued_at {
            return Err(BrokerError::InvalidAssertion);
        }
        if now < assertion.issued_at || now > assertion.expires_at {
            return Err(BrokerError::AssertionExpired);
        }
        let key = (assertion.issuer.clone(), assertion.subject.clone());
        let netid = self.directory.subjects.get(&key).ok_or_else(|| BrokerError::UnmappedSubject {
            issuer: assertion.issuer.clone(),
            subject: assertion.subject.clone(),
        })?;
        self.directory.active_user(netid)?;
        Ok(AuthenticatedPrincipal {
            netid: netid.clone(),
            method: AuthMethod::Federated,
            mfa_passed: assertion.mfa_satisfied,
            authenticated_at: now,
        })
    }

    /// Checks the second factor. Every attempt is logged.
    pub fn verify_mfa(&mut self, principal: &AuthenticatedPrincipal, proof: Option<&str>) -> Result<AuthenticatedPrincipal> {
        let netid = principal.netid.as_str();
        self.directory.active_user(netid)?;
        let Some(proof) = proof else {
            self.log(netid, Action::Mfa, netid, detail([("result", "missing")]));
            return Err(BrokerError::MfaRequired);
        };
        let ok = self
            .directory
            .factors
            .get(netid)
            .is_some_and(|f| f.len() == proof.len() && bool::from(f.as_bytes().ct_eq(proof.as_bytes())));
        self.log(netid, Action::Mfa, netid, detail([("result", if ok { "passed" } else { "failed" })]));
        if !ok {
            return Err(BrokerError::MfaFailed);
        }
        Ok(AuthenticatedPrincipal { mfa_passed: true, ..principal.clone() })
    }

    /// Local directory first, then federation. The returned principal records
    /// which path decided.
    pub fn authenticate(
        &self,
        netid: Option<&str>,
        assertion: Option<&FederatedAssertion>,
        now: Timestamp,
    ) -> Result<AuthenticatedPrincipal> {
        let local = netid.map(|n| self.authenticate_local(n, now));
        match (local, assertion) {
            (Some(Ok(p)), _) => Ok(p),
            (_, Some(a)) => self.assert_federated(a, now),
            (Some(Err(e)), None) => Err(e),
            (None, None) => Err(BrokerError::InvalidSpec("no credentials presented".into())),
        }
    }

    /// Creates a role group. Access groups come from project registration and
    /// shadow groups from session alignment, so neither can be created here.
    pub fn create_group(&mut self, actor: &str, name: &str, kind: GroupKind, owning_project: Option<&str>) -> Result<Group> {
        let permitted = self.directory.is_admin(actor) || owning_project.is_some_and(|p| self.is_steward(actor, p));
        if !permitted {
            return Err(BrokerError::unauthorized(actor, format!("create group {name}")));
        }
        if kind != GroupKind::Role {
            return Err(BrokerError::InvalidSpec(format!("only role groups can be created directly, not {kind}")));
        }
        if name.is_empty() || name.ends_with("@shadow") {
            return Err(BrokerError::InvalidSpec(format!("group name `{name}`")));
        }
        if let Some(p) = owning_project {
            self.project_ref(p)?;
        }
        if self.directory.groups.contains_key(name) {
            return Err(BrokerError::DuplicateGroup(name.to_owned()));
        }
        self.directory.insert_group(name, kind, owning_project);
        let mut d = detail([("kind", kind.to_string())]);
        if let Some(p) = owning_project {
            d.insert("project".into(), p.to_owned());
        }
        self.log(actor, Action::GroupCreate, name, d);
        Ok(self.directory.groups[name].clone())
    }

    pub fn set_membership(&mut self, actor: &str, group: &str, netid: &str, action: MembershipAction) -> Result<Group> {
        let g = self.directory.group(group)?;
        if g.kind == GroupKind::Shadow {
            return Err(BrokerError::ShadowGroupImmutable(group.to_owned()));
        }
        let kind = g.kind;
        let owner = g.owning_project.clone();
        let permitted = self.directory.is_admin(actor) || owner.as_deref().is_some_and(|p| self.is_steward(actor, p));
        if !permitted {
            return Err(BrokerError::unauthorized(actor, format!("change membership of {group}")));
        }
        self.directory.user(netid)?;

        if let (Some(mode), Some(project)) = (kind.mode(), owner.as_deref()) {
            match action {
                MembershipAction::Add => {
                    self.grant_inner(actor, project, netid, mode)?;
                }
                MembershipAction::Remove => {
                    self.revoke_inner(actor, project, netid, mode);
                }
            }
        } else {
            if action == MembershipAction::Add {
                self.directory.active_user(netid)?;
            }
            let changed = self.directory.apply(group, netid, action);
            let mut d = detail([("group", group), ("action", action.into())]);
            if !changed {
                d.insert("noop".into(), "true".into());
            }
            if let Some(p) = &owner {
                d.insert("project".into(), p.clone());
            }
            self.log(actor, Action::Membership, netid, d);
            if changed {
                self.realign_principal(netid);
            }
        }
        Ok(self.directory.groups[group].clone())
    }
}
