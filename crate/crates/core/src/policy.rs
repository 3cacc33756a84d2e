//! Classification tiers, projects, grants and access decisions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use strum::{Display, EnumIter, EnumString, IntoStaticStr};

use crate::broker::Broker;
use crate::directory::{AuthenticatedPrincipal, GroupKind, MembershipAction};
use crate::enclave::ZoneId;
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action};
use crate::types::{AccessMode, Decision, Rule, Timestamp};

/// Sensitivity tier. Ordering follows restrictiveness: `Public < Restricted < Sensitive`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Display, EnumString, EnumIter,
    IntoStaticStr,
)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum DataClassification {
    Public,
    Restricted,
    Sensitive,
}

/// The classification table. `in_mode_group` is individual membership in the
/// project's group for the requested mode; `in_role_group` is membership in
/// any of the project's role groups.
pub fn classify(tier: DataClassification, in_mode_group: bool, in_role_group: bool) -> Decision {
    match tier {
        DataClassification::Public => Decision::allow(Rule::PublicTier),
        DataClassification::Restricted if in_mode_group => Decision::allow(Rule::RestrictedModeGrant),
        DataClassification::Restricted if in_role_group => Decision::allow(Rule::RestrictedRoleRule),
        DataClassification::Restricted => Decision::deny(Rule::RestrictedNoGrant),
        DataClassification::Sensitive if in_mode_group => Decision::allow(Rule::SensitiveIndividualGrant),
        DataClassification::Sensitive => Decision::deny(Rule::SensitiveNoIndividualGrant),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub classification: DataClassification,
    pub stewards: BTreeSet<String>,
    pub vpn_group: String,
    pub rdp_group: String,
    pub role_rules: BTreeSet<String>,
    pub hosts: BTreeSet<String>,
    pub shares: BTreeSet<String>,
    /// Enclave zone the project's VMs and shares live in.
    pub zone: ZoneId,
    /// Overrides the broker-wide retention period.
    pub retention_days: Option<u64>,
    pub honest_brokers: BTreeSet<String>,
    pub approvers: BTreeSet<String>,
}

impl Project {
    pub fn mode_group(&self, mode: AccessMode) -> &str {
        match mode {
            AccessMode::Vpn => &self.vpn_group,
            AccessMode::Rdp => &self.rdp_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub id: String,
    pub classification: DataClassification,
    pub stewards: Vec<String>,
    #[serde(default)]
    pub role_rules: Vec<String>,
    #[serde(default = "default_zone")]
    pub zone: ZoneId,
    #[serde(default)]
    pub retention_days: Option<u64>,
}

fn default_zone() -> ZoneId {
    ZoneId::ProtectedVRF
}

impl ProjectSpec {
    pub fn new(id: &str, classification: DataClassification, stewards: &[&str]) -> Self {
        ProjectSpec {
            id: id.to_owned(),
            classification,
            stewards: stewards.iter().map(|s| s.to_string()).collect(),
            role_rules: Vec::new(),
            zone: ZoneId::ProtectedVRF,
            retention_days: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "kebab-case")]
#[strum(serialize_all = "kebab-case", ascii_case_insensitive)]
pub enum ProjectRole {
    HonestBroker,
    Approver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub project: String,
    pub netid: String,
    pub mode: AccessMode,
    pub actor: String,
    pub at: Timestamp,
    /// False once the grant has been revoked.
    pub active: bool,
    /// True when the call did not change membership.
    pub noop: bool,
}

impl Broker {
    pub fn project(&self, id: &str) -> Result<&Project> {
        self.project_ref(id)
    }

    pub fn projects(&self) -> impl Iterator<Item = &Project> {
        self.projects.values()
    }

    pub(crate) fn is_steward(&self, netid: &str, project: &str) -> bool {
        self.directory.is_active(netid) && self.projects.get(project).is_some_and(|p| p.stewards.contains(netid))
    }

    pub fn register_project(&mut self, actor: &str, spec: ProjectSpec) -> Result<Project> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "register projects"));
        }
        if spec.id.is_empty() || spec.id.contains(',') || spec.id.contains('@') {
            return Err(BrokerError::InvalidSpec(format!("project id `{}`", spec.id)));
        }
        if self.projects.contains_key(&spec.id) {
            return Err(BrokerError::DuplicateProject(spec.id));
        }
        if spec.stewards.is_empty() {
            return Err(BrokerError::EmptyStewards);
        }
        for s in &spec.stewards {
            self.directory.active_user(s)?;
        }
        for r in &spec.role_rules {
            let g = self.directory.group(r)?;
            if g.kind != GroupKind::Role {
                return Err(BrokerError::InvalidSpec(format!("role rule `{r}` is not a role group")));
            }
        }
        if !spec.zone.is_enclave() {
            return Err(BrokerError::InvalidSpec(format!("project zone {} is outside the enclave", spec.zone)));
        }
        if !self.enclave.topology.has_zone(spec.zone) {
            return Err(BrokerError::InvalidSpec(format!("zone {} is not in the topology", spec.zone)));
        }
        let vpn_group = format!("{}-vpn", spec.id);
        let rdp_group = format!("{}-rdp", spec.id);
        for g in [&vpn_group, &rdp_group] {
            if self.directory.groups.contains_key(g) {
                return Err(BrokerError::DuplicateGroup(g.clone()));
            }
        }
        self.directory.insert_group(&vpn_group, GroupKind::AccessVpn, Some(&spec.id));
        self.directory.insert_group(&rdp_group, GroupKind::AccessRdp, Some(&spec.id));

        let project = Project {
            id: spec.id.clone(),
            classification: spec.classification,
            stewards: spec.stewards.iter().cloned().collect(),
            vpn_group,
            rdp_group,
            role_rules: spec.role_rules.iter().cloned().collect(),
            hosts: BTreeSet::new(),
            shares: BTreeSet::new(),
            zone: spec.zone,
            retention_days: spec.retention_days,
            honest_brokers: BTreeSet::new(),
            approvers: BTreeSet::new(),
        };
        let stewards: Vec<&str> = project.stewards.iter().map(String::as_str).collect();
        let d = detail([
            ("project", spec.id.clone()),
            ("classification", spec.classification.to_string()),
            ("stewards", stewards.join(",")),
            ("zone", spec.zone.to_string()),
        ]);
        self.log(actor, Action::ProjectRegister, &spec.id, d);
        self.projects.insert(spec.id.clone(), project.clone());
        Ok(project)
    }

    /// Designates an honest broker or an image approver for a project.
    pub fn assign_project_role(&mut self, actor: &str, project: &str, role: ProjectRole, netid: &str) -> Result<()> {
        self.project_ref(project)?;
        if !(self.directory.is_admin(actor) || self.is_steward(actor, project)) {
            return Err(BrokerError::unauthorized(actor, format!("assign roles on {project}")));
        }
        self.directory.active_user(netid)?;
        let p = self.project_mut(project)?;
        match role {
            ProjectRole::HonestBroker => p.honest_brokers.insert(netid.to_owned()),
            ProjectRole::Approver => p.approvers.insert(netid.to_owned()),
        };
        self.log(actor, Action::RoleAssign, netid, detail([("role", role.to_string()), ("project", project.to_owned())]));
        Ok(())
    }

    pub fn grant_access(&mut self, actor: &str, project: &str, netid: &str, mode: AccessMode) -> Result<Grant> {
        self.project_ref(project)?;
        if !self.is_steward(actor, project) {
            return Err(BrokerError::unauthorized(actor, format!("grant access to {project}")));
        }
        self.grant_inner(actor, project, netid, mode)
    }

    pub(crate) fn grant_inner(&mut self, actor: &str, project: &str, netid: &str, mode: AccessMode) -> Result<Grant> {
        self.directory.active_user(netid)?;
        let p = self.project_ref(project)?;
        if p.classification == DataClassification::Public {
            return Err(BrokerError::PublicProjectNoGrants(project.to_owned()));
        }
        let group = p.mode_group(mode).to_owned();
        let changed = self.directory.apply(&group, netid, MembershipAction::Add);
        let mut d = detail([("project", project), ("mode", mode.into()), ("group", group.as_str())]);
        if !changed {
            d.insert("noop".into(), "true".into());
        }
        self.log(actor, Action::Grant, netid, d);
        if changed {
            self.realign_principal(netid);
        }
        Ok(Grant {
            project: project.to_owned(),
            netid: netid.to_owned(),
            mode,
            actor: actor.to_owned(),
            at: self.clock,
            active: true,
            noop: !changed,
        })
    }

    /// Removes the grant and force-closes the principal's open sessions on the
    /// project in that mode.
    pub fn revoke_access(&mut self, actor: &str, project: &str, netid: &str, mode: AccessMode) -> Result<Grant> {
        self.project_ref(project)?;
        if !self.is_steward(actor, project) {
            return Err(BrokerError::unauthorized(actor, format!("revoke access to {project}")));
        }
        self.directory.user(netid)?;
        Ok(self.revoke_inner(actor, project, netid, mode))
    }

    pub(crate) fn revoke_inner(&mut self, actor: &str, project: &str, netid: &str, mode: AccessMode) -> Grant {
        let group = self.projects[project].mode_group(mode).to_owned();
        let changed = self.directory.apply(&group, netid, MembershipAction::Remove);
        let mut d = detail([("project", project), ("mode", mode.into()), ("group", group.as_str())]);
        if !changed {
            d.insert("noop".into(), "true".into());
        }
        self.log(actor, Action::Revoke, netid, d);
        self.force_close_where(|s| s.principal == netid && s.project == project && s.mode == mode);
        if changed {
            self.realign_principal(netid);
        }
        Grant {
            project: project.to_owned(),
            netid: netid.to_owned(),
            mode,
            actor: actor.to_owned(),
            at: self.clock,
            active: false,
            noop: !changed,
        }
    }

    /// Decision for a netid without the MFA gate. Shared by `check_access` and
    /// the session and reachability paths.
    pub(crate) fn access_decision(&self, netid: &str, project: &Project, mode: AccessMode) -> Decision {
        if !self.directory.is_active(netid) {
            return Decision::deny(Rule::PrincipalInactive);
        }
        let in_mode_group = self.directory.is_member(project.mode_group(mode), netid);
        let in_role_group = project.role_rules.iter().any(|g| self.directory.is_member(g, netid));
        classify(project.classification, in_mode_group, in_role_group)
    }

    pub fn check_access(&self, principal: &AuthenticatedPrincipal, project: &str, mode: AccessMode) -> Result<Decision> {
        principal.require_mfa()?;
        let p = self.project_ref(project)?;
        Ok(self.access_decision(principal.netid(), p, mode))
    }

    pub fn authorize_mode(&self, principal: &AuthenticatedPrincipal, project: &str) -> Result<BTreeSet<AccessMode>> {
        principal.require_mfa()?;
        let p = self.project_ref(project)?;
        Ok(AccessMode::ALL.into_iter().filter(|m| self.access_decision(principal.netid(), p, *m).is_allow()).collect())
    }
}
