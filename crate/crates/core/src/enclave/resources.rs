//! Hosts, VMs, storage shares, exception rules and the download proxy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::{Display, EnumString};

use super::{
    evaluate, normalize_origin, ExceptionRule, Reachability, RuleEndpoint, Service, ShareProtocol, Target, TargetKind,
    Topology, Traveler, Via, ZoneId,
};
use crate::broker::Broker;
use crate::directory::shadow_name;
use crate::error::{BrokerError, Result};
use crate::ledger::{detail, Action, SYSTEM_ACTOR};
use crate::types::{Decision, Rule, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum VmState {
    Running,
    Retained,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualMachine {
    pub id: String,
    pub project: String,
    pub zone: ZoneId,
    pub host: String,
    pub cpu: u32,
    pub ram_gb: u32,
    pub state: VmState,
    /// Opaque content token; `None` once the VM is destroyed.
    pub disk: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypervisorHost {
    pub id: String,
    pub dedicated_to_enclave: bool,
    pub cpu_capacity: u32,
    pub ram_capacity_gb: u32,
    pub outside_cpu: u32,
    pub outside_ram_gb: u32,
    pub resident_vms: BTreeSet<String>,
    pub used_cpu: u32,
    pub used_ram_gb: u32,
}

impl HypervisorHost {
    pub fn free_cpu(&self) -> u32 {
        self.cpu_capacity - self.outside_cpu - self.used_cpu
    }

    pub fn free_ram_gb(&self) -> u32 {
        self.ram_capacity_gb - self.outside_ram_gb - self.used_ram_gb
    }

    fn fits(&self, cpu: u32, ram_gb: u32) -> bool {
        self.free_cpu() >= cpu && self.free_ram_gb() >= ram_gb
    }
}

/// What a share request may ask for. NFS exists only so it can be refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "UPPERCASE")]
#[strum(serialize_all = "UPPERCASE", ascii_case_insensitive)]
pub enum RequestedProtocol {
    Cifs,
    Iscsi,
    Nfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRequest {
    pub project: String,
    pub protocol: RequestedProtocol,
    pub capacity_tb: f64,
    #[serde(default)]
    pub dedicated_device: bool,
    #[serde(default)]
    pub encrypted_at_rest: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageShare {
    pub id: String,
    pub project: String,
    pub zone: ZoneId,
    pub protocol: ShareProtocol,
    pub capacity_tb: f64,
    pub acl_groups: BTreeSet<String>,
    pub dedicated_device: bool,
    pub encrypted_at_rest: bool,
    pub resizable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DestructionReceipt {
    pub vm: String,
    pub at: Timestamp,
    pub released_cpu: u32,
    pub released_ram_gb: u32,
    pub closed_sessions: Vec<String>,
    /// Principal whose retention binding pointed at this VM.
    pub invalidated_binding: Option<String>,
}

/// Origin of a reachability query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Zone(ZoneId),
    Vm(String),
    Session(String),
}

/// Destination of a reachability query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Zone(ZoneId),
    Vm(String),
    Share(String),
    /// Any URL; reduced to its origin.
    Origin(String),
}

#[derive(Debug, Clone)]
pub(crate) struct Enclave {
    pub(crate) topology: Topology,
    pub(crate) hosts: BTreeMap<String, HypervisorHost>,
    pub(crate) vms: BTreeMap<String, VirtualMachine>,
    pub(crate) shares: BTreeMap<String, StorageShare>,
    pub(crate) whitelist: BTreeMap<String, BTreeSet<String>>,
}

impl Enclave {
    pub(crate) fn new(topology: Topology) -> Self {
        let hosts = topology
            .hosts()
            .iter()
            .map(|h| {
                let host = HypervisorHost {
                    id: h.id.clone(),
                    dedicated_to_enclave: h.dedicated_to_enclave,
                    cpu_capacity: h.cpu,
                    ram_capacity_gb: h.ram_gb,
                    outside_cpu: h.outside_cpu,
                    outside_ram_gb: h.outside_ram_gb,
                    resident_vms: BTreeSet::new(),
                    used_cpu: 0,
                    used_ram_gb: 0,
                };
                (h.id.clone(), host)
            })
            .collect();
        Enclave { topology, hosts, vms: BTreeMap::new(), shares: BTreeMap::new(), whitelist: BTreeMap::new() }
    }

    /// Shared hosts first, dedicated hosts as overflow; dedicated requests only
    /// land on dedicated hosts.
    fn place(&self, cpu: u32, ram_gb: u32, dedicated: bool) -> Result<String> {
        let dedicated_hosts = || self.hosts.values().filter(|h| h.dedicated_to_enclave);
        if dedicated {
            if dedicated_hosts().next().is_none() {
                return Err(BrokerError::NoDedicatedHost);
            }
            return dedicated_hosts().find(|h| h.fits(cpu, ram_gb)).map(|h| h.id.clone()).ok_or(BrokerError::NoCapacity);
        }
        self.hosts
            .values()
            .filter(|h| !h.dedicated_to_enclave)
            .chain(dedicated_hosts())
            .find(|h| h.fits(cpu, ram_gb))
            .map(|h| h.id.clone())
            .ok_or(BrokerError::NoCapacity)
    }

    pub(crate) fn vm(&self, id: &str) -> Result<&VirtualMachine> {
        self.vms.get(id).ok_or_else(|| BrokerError::UnknownVm(id.to_owned()))
    }
}

impl Broker {
    pub fn vm(&self, id: &str) -> Result<&VirtualMachine> {
        self.enclave.vm(id)
    }

    pub fn vms(&self) -> impl Iterator<Item = &VirtualMachine> {
        self.enclave.vms.values()
    }

    pub fn hosts(&self) -> impl Iterator<Item = &HypervisorHost> {
        self.enclave.hosts.values()
    }

    pub fn share(&self, id: &str) -> Result<&StorageShare> {
        self.enclave.shares.get(id).ok_or_else(|| BrokerError::UnknownShare(id.to_owned()))
    }

    pub fn shares(&self) -> impl Iterator<Item = &StorageShare> {
        self.enclave.shares.values()
    }

    pub fn proxy_whitelist(&self, project: &str) -> BTreeSet<String> {
        self.enclave.whitelist.get(project).cloned().unwrap_or_default()
    }

    pub fn provision_vm(&mut self, project: &str, zone: ZoneId, cpu: u32, ram_gb: u32, dedicated: bool) -> Result<VirtualMachine> {
        let id = self.provision_inner(project, zone, cpu, ram_gb, dedicated, "manual")?;
        Ok(self.enclave.vms[&id].clone())
    }

    pub(crate) fn provision_inner(
        &mut self,
        project: &str,
        zone: ZoneId,
        cpu: u32,
        ram_gb: u32,
        dedicated: bool,
        purpose: &str,
    ) -> Result<String> {
        self.project_ref(project)?;
        if cpu == 0 || ram_gb == 0 {
            return Err(BrokerError::InvalidSpec("cpu and ram must be positive".into()));
        }
        if !zone.is_enclave() || !self.enclave.topology.has_zone(zone) {
            return Err(BrokerError::InvalidSpec(format!("{zone} is not an enclave zone")));
        }
        let host_id = self.enclave.place(cpu, ram_gb, dedicated)?;
        let id = self.ids.next("vm", 4);
        let disk = format!("disk-{}", self.random_hex(8));
        let host = self.enclave.hosts.get_mut(&host_id).expect("placed on known host");
        host.used_cpu += cpu;
        host.used_ram_gb += ram_gb;
        host.resident_vms.insert(id.clone());
        self.enclave.vms.insert(
            id.clone(),
            VirtualMachine {
                id: id.clone(),
                project: project.to_owned(),
                zone,
                host: host_id.clone(),
                cpu,
                ram_gb,
                state: VmState::Running,
                disk: Some(disk),
            },
        );
        self.project_mut(project)?.hosts.insert(id.clone());
        self.log(
            SYSTEM_ACTOR,
            Action::Provision,
            &id,
            detail([
                ("project", project.to_owned()),
                ("zone", zone.to_string()),
                ("host", host_id),
                ("cpu", cpu.to_string()),
                ("ram_gb", ram_gb.to_string()),
                ("dedicated", dedicated.to_string()),
                ("purpose", purpose.to_owned()),
            ]),
        );
        Ok(id)
    }

    pub fn resize_vm(&mut self, vm: &str, cpu: u32, ram_gb: u32) -> Result<VirtualMachine> {
        let v = self.enclave.vm(vm)?;
        match v.state {
            VmState::Destroyed => return Err(BrokerError::VmDestroyed(vm.to_owned())),
            VmState::Retained => return Err(BrokerError::VmNotRunning(vm.to_owned())),
            VmState::Running => {}
        }
        if cpu == 0 || ram_gb == 0 {
            return Err(BrokerError::InvalidSpec("cpu and ram must be positive".into()));
        }
        if (v.cpu, v.ram_gb) == (cpu, ram_gb) {
            return Ok(v.clone());
        }
        let (old_cpu, old_ram, host_id, project) = (v.cpu, v.ram_gb, v.host.clone(), v.project.clone());
        let host = &self.enclave.hosts[&host_id];
        if host.free_cpu() + old_cpu < cpu || host.free_ram_gb() + old_ram < ram_gb {
            return Err(BrokerError::NoCapacity);
        }
        let host = self.enclave.hosts.get_mut(&host_id).expect("known host");
        host.used_cpu = host.used_cpu - old_cpu + cpu;
        host.used_ram_gb = host.used_ram_gb - old_ram + ram_gb;
        let v = self.enclave.vms.get_mut(vm).expect("checked above");
        v.cpu = cpu;
        v.ram_gb = ram_gb;
        let out = v.clone();
        self.log(
            SYSTEM_ACTOR,
            Action::Resize,
            vm,
            detail([("project", project), ("cpu", cpu.to_string()), ("ram_gb", ram_gb.to_string())]),
        );
        Ok(out)
    }

    /// Destroys the VM and its disk. Open sessions on it are closed and any
    /// retention binding pointing at it becomes unusable.
    pub fn destroy_vm(&mut self, vm: &str) -> Result<DestructionReceipt> {
        self.destroy_inner(vm, "destroy")
    }

    pub(crate) fn destroy_inner(&mut self, vm: &str, cause: &str) -> Result<DestructionReceipt> {
        let v = self.enclave.vm(vm)?;
        if v.state == VmState::Destroyed {
            return Err(BrokerError::AlreadyDestroyed(vm.to_owned()));
        }
        let (cpu, ram_gb, host_id, project) = (v.cpu, v.ram_gb, v.host.clone(), v.project.clone());
        let closed_sessions = self.close_sessions_on_vm(vm);
        let invalidated_binding = self.invalidate_binding_for(vm);
        self.retire_instances_on(vm);

        let host = self.enclave.hosts.get_mut(&host_id).expect("known host");
        host.used_cpu -= cpu;
        host.used_ram_gb -= ram_gb;
        host.resident_vms.remove(vm);
        let v = self.enclave.vms.get_mut(vm).expect("checked above");
        v.state = VmState::Destroyed;
        v.disk = None;
        self.log(SYSTEM_ACTOR, Action::Destroy, vm, detail([("project", project), ("cause", cause.to_owned())]));
        Ok(DestructionReceipt {
            vm: vm.to_owned(),
            at: self.clock,
            released_cpu: cpu,
            released_ram_gb: ram_gb,
            closed_sessions,
            invalidated_binding,
        })
    }

    pub fn read_disk(&self, vm: &str) -> Result<String> {
        self.enclave.vm(vm)?.disk.clone().ok_or_else(|| BrokerError::ContentDestroyed(vm.to_owned()))
    }

    /// Replaces the disk content token, as if the VM's user changed its state.
    pub fn write_disk(&mut self, vm: &str, token: &str) -> Result<()> {
        let v = self.enclave.vms.get_mut(vm).ok_or_else(|| BrokerError::UnknownVm(vm.to_owned()))?;
        if v.state == VmState::Destroyed {
            return Err(BrokerError::ContentDestroyed(vm.to_owned()));
        }
        v.disk = Some(token.to_owned());
        let project = v.project.clone();
        self.log(SYSTEM_ACTOR, Action::DiskWrite, vm, detail([("project", project)]));
        Ok(())
    }

    pub fn create_share(&mut self, req: ShareRequest) -> Result<StorageShare> {
        let zone = self.project_ref(&req.project)?.zone;
        let protocol = match req.protocol {
            RequestedProtocol::Nfs => return Err(BrokerError::ProtocolForbidden("NFS".into())),
            RequestedProtocol::Iscsi if !req.dedicated_device => return Err(BrokerError::IsolationRequired),
            RequestedProtocol::Iscsi => ShareProtocol::Iscsi,
            RequestedProtocol::Cifs => ShareProtocol::Cifs,
        };
        if !(req.capacity_tb.is_finite() && req.capacity_tb > 0.0) {
            return Err(BrokerError::InvalidSpec("share capacity must be positive".into()));
        }
        let id = self.ids.next("share", 4);
        let share = StorageShare {
            id: id.clone(),
            project: req.project.clone(),
            zone,
            protocol,
            capacity_tb: req.capacity_tb,
            acl_groups: BTreeSet::new(),
            dedicated_device: req.dedicated_device,
            encrypted_at_rest: req.encrypted_at_rest,
            resizable: protocol == ShareProtocol::Cifs,
        };
        self.enclave.shares.insert(id.clone(), share.clone());
        self.project_mut(&req.project)?.shares.insert(id.clone());
        self.log(
            SYSTEM_ACTOR,
            Action::ShareCreate,
            &id,
            detail([
                ("project", req.project),
                ("protocol", protocol.to_string()),
                ("capacity_tb", req.capacity_tb.to_string()),
                ("dedicated_device", req.dedicated_device.to_string()),
                ("encrypted_at_rest", req.encrypted_at_rest.to_string()),
            ]),
        );
        Ok(share)
    }

    pub fn set_share_acl(&mut self, actor: &str, share: &str, groups: &[String]) -> Result<StorageShare> {
        let project = self.share(share)?.project.clone();
        if !self.is_steward(actor, &project) {
            return Err(BrokerError::unauthorized(actor, format!("set the acl of {share}")));
        }
        for g in groups {
            let group = self.directory.group(g)?;
            if group.kind == crate::directory::GroupKind::Shadow {
                return Err(BrokerError::ShadowGroupImmutable(g.clone()));
            }
        }
        let acl: BTreeSet<String> = groups.iter().cloned().collect();
        let listed = acl.iter().map(String::as_str).collect::<Vec<_>>().join(",");
        let s = self.enclave.shares.get_mut(share).expect("checked above");
        s.acl_groups = acl;
        let out = s.clone();
        self.log(actor, Action::ShareAcl, share, detail([("project", project.clone()), ("groups", listed)]));
        self.realign_project(&project);
        Ok(out)
    }

    /// ACL check for a real netid or an arbitrary user. Arbitrary users pass
    /// only through shadow memberships.
    pub fn check_share_acl(&self, identity: &str, share: &str) -> Result<Decision> {
        let s = self.share(share)?;
        for g in &s.acl_groups {
            if self.directory.is_active(identity) && self.directory.is_member(g, identity) {
                return Ok(Decision::allow(Rule::AclGroupMember));
            }
            if self.directory.is_member(&shadow_name(g), identity) {
                return Ok(Decision::allow(Rule::AclShadowMember));
            }
        }
        Ok(Decision::deny(Rule::AclNoMatch))
    }

    pub fn register_exception(&mut self, actor: &str, rule: ExceptionRule) -> Result<String> {
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "register exception rules"));
        }
        if rule.documented_by.trim().is_empty() {
            return Err(BrokerError::UndocumentedRule(rule.id));
        }
        if self.enclave.topology.exceptions().iter().any(|r| r.id == rule.id) {
            return Err(BrokerError::DuplicateRule(rule.id));
        }
        for ep in [&rule.src, &rule.dst] {
            if let RuleEndpoint::Vm(v) = ep {
                if self.enclave.vm(v)?.state == VmState::Destroyed {
                    return Err(BrokerError::VmDestroyed(v.clone()));
                }
            }
        }
        let rule = self.enclave.topology.check_rule(rule).map_err(|(field, _, msg)| {
            BrokerError::InvalidRule(format!("{field}: {msg}"))
        })?;
        let id = rule.id.clone();
        let d = detail([
            ("service", rule.service.to_string()),
            ("direction", rule.direction.to_string()),
            ("src", rule.src.node()),
            ("dst", rule.dst.node()),
            ("documented_by", rule.documented_by.clone()),
        ]);
        self.enclave.topology.push_exception(rule);
        self.log(actor, Action::ExceptionRegister, &id, d);
        Ok(id)
    }

    /// Replaces a project's download-proxy whitelist.
    pub fn set_proxy_whitelist(&mut self, actor: &str, project: &str, origins: &[String]) -> Result<BTreeSet<String>> {
        self.project_ref(project)?;
        if !self.directory.is_admin(actor) {
            return Err(BrokerError::unauthorized(actor, "configure the download proxy"));
        }
        let normalized = origins
            .iter()
            .map(|o| normalize_origin(o).ok_or_else(|| BrokerError::InvalidSpec(format!("`{o}` is not a web origin"))))
            .collect::<Result<BTreeSet<String>>>()?;
        let listed = normalized.iter().map(String::as_str).collect::<Vec<_>>().join(",");
        self.enclave.whitelist.insert(project.to_owned(), normalized.clone());
        self.log(actor, Action::WhitelistSet, project, detail([("project", project.to_owned()), ("origins", listed)]));
        Ok(normalized)
    }

    /// Fetch through the project's download proxy. Every attempt is logged.
    pub fn proxy_fetch(&mut self, project: &str, url: &str) -> Result<Decision> {
        self.project_ref(project)?;
        let origin = normalize_origin(url);
        let decision = match &origin {
            None => Decision::deny(Rule::MalformedUrl),
            Some(o) if self.enclave.whitelist.get(project).is_some_and(|w| w.contains(o)) => {
                Decision::allow(Rule::ProxyWhitelisted)
            }
            Some(_) => Decision::deny(Rule::ProxyNotWhitelisted),
        };
        let action = if decision.is_allow() { Action::ProxyAllow } else { Action::ProxyDeny };
        let d = detail([
            ("project", project.to_owned()),
            ("url", url.to_owned()),
            ("origin", origin.unwrap_or_default()),
            ("reason", decision.reason.to_string()),
        ]);
        self.log(SYSTEM_ACTOR, action, project, d);
        Ok(decision)
    }

    fn resolve_target(&self, dst: &Endpoint) -> Result<(Target, Option<String>, bool)> {
        let unknown = |s: &str| BrokerError::UnknownEndpoint(s.to_owned());
        Ok(match dst {
            Endpoint::Zone(z) => {
                if !self.enclave.topology.has_zone(*z) {
                    return Err(unknown(&z.to_string()));
                }
                (Target { id: z.to_string(), zone: *z, kind: TargetKind::Zone }, None, false)
            }
            Endpoint::Vm(id) => {
                let v = self.enclave.vms.get(id).ok_or_else(|| unknown(id))?;
                let target = Target { id: id.clone(), zone: v.zone, kind: TargetKind::Vm };
                (target, Some(v.project.clone()), v.state == VmState::Destroyed)
            }
            Endpoint::Share(id) => {
                let s = self.enclave.shares.get(id).ok_or_else(|| unknown(id))?;
                (Target { id: id.clone(), zone: s.zone, kind: TargetKind::Share(s.protocol) }, Some(s.project.clone()), false)
            }
            Endpoint::Origin(raw) => {
                let o = normalize_origin(raw).ok_or_else(|| unknown(raw))?;
                (Target { id: o, zone: ZoneId::Internet, kind: TargetKind::Origin }, None, false)
            }
        })
    }

    fn resolve_traveler(&self, src: &Source, dst_project: Option<&str>) -> Result<(Traveler, bool)> {
        let unknown = |s: &str| BrokerError::UnknownEndpoint(s.to_owned());
        Ok(match src {
            Source::Zone(z) => {
                if !self.enclave.topology.has_zone(*z) {
                    return Err(unknown(&z.to_string()));
                }
                (Traveler::Zone(*z), false)
            }
            Source::Vm(id) => {
                let v = self.enclave.vms.get(id).ok_or_else(|| unknown(id))?;
                (Traveler::Vm { id: id.clone(), zone: v.zone }, v.state == VmState::Destroyed)
            }
            Source::Session(id) => {
                let s = self.sessions.get(id).ok_or_else(|| unknown(id))?;
                let authorized = dst_project.is_some_and(|p| {
                    p == s.project && self.projects.get(p).is_some_and(|prj| self.access_decision(&s.principal, prj, s.mode).is_allow())
                });
                let t = Traveler::Session { id: id.clone(), origin: s.origin, mode: s.mode, open: s.is_open(), authorized };
                (t, false)
            }
        })
    }

    /// Evaluates whether `src` can reach `dst` for the named service.
    pub fn is_reachable(&self, src: &Source, dst: &Endpoint, service: &str) -> Result<Reachability> {
        let service: Service = service.parse().map_err(|_| BrokerError::UnknownService(service.to_owned()))?;
        let (target, project, dst_gone) = self.resolve_target(dst)?;
        let (traveler, src_gone) = self.resolve_traveler(src, project.as_deref())?;
        if dst_gone || src_gone {
            let mut path = match &traveler {
                Traveler::Zone(z) => vec![format!("zone:{z}")],
                Traveler::Vm { id, .. } => vec![format!("vm:{id}")],
                Traveler::Session { id, .. } => vec![format!("session:{id}")],
            };
            path.push(target.node());
            return Ok(Reachability { decision: Decision::deny(Rule::EndpointDestroyed), path, via: Via::None });
        }
        Ok(evaluate(&self.enclave.topology, &traveler, &target, service))
    }

    /// Like [`Broker::is_reachable`], but records the attempt as a traversal.
    pub fn connect(&mut self, src: &Source, dst: &Endpoint, service: &str) -> Result<Reachability> {
        let r = self.is_reachable(src, dst, service)?;
        let (actor, session, src_project) = match src {
            Source::Session(id) => {
                let s = &self.sessions.get(id).expect("resolved above");
                (s.principal.clone(), Some(id.clone()), Some(s.project.clone()))
            }
            Source::Vm(id) => (SYSTEM_ACTOR.to_owned(), None, Some(self.enclave.vms[id].project.clone())),
            Source::Zone(_) => (SYSTEM_ACTOR.to_owned(), None, None),
        };
        let dst_project = self.resolve_target(dst)?.1;
        let mut d = detail([
            ("service", service.to_ascii_lowercase()),
            ("verdict", r.decision.verdict.to_string()),
            ("reason", r.decision.reason.to_string()),
            ("via", r.via.label().to_owned()),
            ("path", r.path.join(" > ")),
        ]);
        match &r.via {
            Via::Gateway(g) => {
                d.insert("gateway".into(), g.clone());
            }
            Via::Exception(rule) => {
                d.insert("rule".into(), rule.clone());
            }
            _ => {}
        }
        if let Some(p) = dst_project.or(src_project) {
            d.insert("project".into(), p);
        }
        if let Some(s) = session {
            d.insert("session".into(), s);
        }
        let object = r.path.last().cloned().unwrap_or_default();
        self.log(&actor, Action::Connect, &object, d);
        Ok(r)
    }
}
