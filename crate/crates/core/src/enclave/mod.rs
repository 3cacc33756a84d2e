//! Zones, gateways, hosts, VMs, storage and the reachability evaluator.

mod reach;
mod resources;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strum::{Display, EnumIter, EnumString, IntoStaticStr};

use crate::types::AccessMode;

pub use reach::{evaluate, Reachability, Target, TargetKind, Traveler, Via};
pub use resources::{
    DestructionReceipt, Endpoint, HypervisorHost, RequestedProtocol, ShareRequest, Source, StorageShare,
    VirtualMachine, VmState,
};
pub(crate) use resources::Enclave;

#[allow(clippy::upper_case_acronyms)]
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Display, EnumString, EnumIter,
    IntoStaticStr,
)]
#[strum(ascii_case_insensitive)]
pub enum ZoneId {
    Internet,
    Campus,
    ProtectedVRF,
    PRDNSubnet,
    Management,
}

impl ZoneId {
    /// Zones that make up the enclave. Everything else is outside it.
    pub fn is_enclave(self) -> bool {
        matches!(self, ZoneId::ProtectedVRF | ZoneId::PRDNSubnet)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub id: ZoneId,
    pub parent: Option<ZoneId>,
}

#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Display, EnumString, EnumIter)]
#[strum(ascii_case_insensitive)]
pub enum GatewayKind {
    VPNContext,
    RDPJumpbox,
    SSH,
}

impl GatewayKind {
    /// Session mode a gateway admits. SSH sessions count as VPN-class.
    pub fn carries(self) -> AccessMode {
        match self {
            GatewayKind::VPNContext | GatewayKind::SSH => AccessMode::Vpn,
            GatewayKind::RDPJumpbox => AccessMode::Rdp,
        }
    }

    /// Services the gateway forwards into its zone.
    pub fn forwards(self, service: Service) -> bool {
        match self {
            GatewayKind::VPNContext => true,
            GatewayKind::RDPJumpbox => service == Service::Rdp,
            GatewayKind::SSH => service == Service::Ssh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gateway {
    pub id: String,
    pub kind: GatewayKind,
    pub admits_to: ZoneId,
    /// Zones the gateway accepts connections from.
    pub listens_on: Vec<ZoneId>,
    pub monitored: bool,
    /// Exception rule that enables an SSH gateway.
    pub enabled_by: Option<String>,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Display, EnumString, EnumIter,
    IntoStaticStr,
)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum Service {
    Rdp,
    Ssh,
    Https,
    Cifs,
    Iscsi,
    Patching,
    Monitoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Display, EnumString)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Display, EnumString, IntoStaticStr)]
#[serde(rename_all = "UPPERCASE")]
#[strum(serialize_all = "UPPERCASE", ascii_case_insensitive)]
pub enum ShareProtocol {
    Cifs,
    Iscsi,
}

impl ShareProtocol {
    pub fn service(self) -> Service {
        match self {
            ShareProtocol::Cifs => Service::Cifs,
            ShareProtocol::Iscsi => Service::Iscsi,
        }
    }
}

/// One side of an exception rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleEndpoint {
    Zone(ZoneId),
    Vm(String),
    /// A normalized web origin such as `https://data.example.org`.
    Origin(String),
}

impl RuleEndpoint {
    pub fn node(&self) -> String {
        match self {
            RuleEndpoint::Zone(z) => format!("zone:{z}"),
            RuleEndpoint::Vm(v) => format!("vm:{v}"),
            RuleEndpoint::Origin(o) => format!("origin:{o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceptionRule {
    pub id: String,
    pub service: Service,
    pub src: RuleEndpoint,
    pub dst: RuleEndpoint,
    pub direction: Direction,
    pub documented_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    pub id: String,
    pub dedicated_to_enclave: bool,
    pub cpu: u32,
    pub ram_gb: u32,
    /// Capacity already consumed by workloads outside the enclave.
    #[serde(default)]
    pub outside_cpu: u32,
    #[serde(default)]
    pub outside_ram_gb: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Display)]
#[strum(serialize_all = "PascalCase")]
pub enum TopologyErrorKind {
    SchemaError,
    DanglingReference,
}

/// A validation failure, located by section, entry index and field so file
/// loaders can point at the offending line.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind}: {section}[{index}].{field}: {message}")]
pub struct TopologyError {
    pub kind: TopologyErrorKind,
    pub section: &'static str,
    pub index: usize,
    pub field: &'static str,
    pub message: String,
}

fn schema(section: &'static str, index: usize, field: &'static str, message: impl Into<String>) -> TopologyError {
    TopologyError { kind: TopologyErrorKind::SchemaError, section, index, field, message: message.into() }
}

fn dangling(section: &'static str, index: usize, field: &'static str, message: impl Into<String>) -> TopologyError {
    TopologyError { kind: TopologyErrorKind::DanglingReference, section, index, field, message: message.into() }
}

/// Normalizes a URL to its `scheme://host[:port]` origin, lowercasing the host.
/// Returns `None` for unparsable input or opaque origins.
pub fn normalize_origin(raw: &str) -> Option<String> {
    let url = url::Url::parse(raw).ok()?;
    if !matches!(url.scheme(), "http" | "https") {
        return None;
    }
    let origin = url.origin();
    origin.is_tuple().then(|| origin.ascii_serialization())
}

/// The static network design: zones, gateways, hosts and exception rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Topology {
    zones: BTreeMap<ZoneId, Zone>,
    gateways: Vec<Gateway>,
    hosts: Vec<HostSpec>,
    exceptions: Vec<ExceptionRule>,
}

impl Topology {
    pub fn new(
        zones: Vec<Zone>,
        gateways: Vec<Gateway>,
        hosts: Vec<HostSpec>,
        exceptions: Vec<ExceptionRule>,
    ) -> Result<Self, TopologyError> {
        let mut zone_map = BTreeMap::new();
        for (i, z) in zones.iter().enumerate() {
            if zone_map.insert(z.id, z.clone()).is_some() {
                return Err(schema("zones", i, "id", format!("zone {} declared twice", z.id)));
            }
        }
        for (i, z) in zones.iter().enumerate() {
            match (z.id, z.parent) {
                (ZoneId::PRDNSubnet, Some(ZoneId::ProtectedVRF)) => {
                    if !zone_map.contains_key(&ZoneId::ProtectedVRF) {
                        return Err(dangling("zones", i, "parent", "parent zone ProtectedVRF is not declared"));
                    }
                }
                (ZoneId::PRDNSubnet, _) => {
                    return Err(schema("zones", i, "parent", "PRDNSubnet must nest inside ProtectedVRF"));
                }
                (_, Some(p)) => {
                    return Err(schema("zones", i, "parent", format!("zone {} may not nest inside {p}", z.id)));
                }
                (_, None) => {}
            }
        }
        let mut topo = Topology { zones: zone_map, gateways: Vec::new(), hosts: Vec::new(), exceptions: Vec::new() };

        for (i, r) in exceptions.into_iter().enumerate() {
            if topo.exceptions.iter().any(|e| e.id == r.id) {
                return Err(schema("exceptions", i, "id", format!("rule `{}` declared twice", r.id)));
            }
            for (field, ep) in [("src", &r.src), ("dst", &r.dst)] {
                if let RuleEndpoint::Vm(v) = ep {
                    return Err(dangling("exceptions", i, field, format!("vm `{v}` does not exist at load time")));
                }
            }
            let r = topo.check_rule(r).map_err(|(field, dangling_ref, msg)| {
                if dangling_ref {
                    dangling("exceptions", i, field, msg)
                } else {
                    schema("exceptions", i, field, msg)
                }
            })?;
            topo.exceptions.push(r);
        }

        for (i, g) in gateways.into_iter().enumerate() {
            if topo.gateways.iter().any(|x| x.id == g.id) {
                return Err(schema("gateways", i, "id", format!("gateway `{}` declared twice", g.id)));
            }
            if !topo.zones.contains_key(&g.admits_to) {
                return Err(dangling("gateways", i, "admits_to", format!("zone {} is not declared", g.admits_to)));
            }
            if !g.admits_to.is_enclave() {
                return Err(schema("gateways", i, "admits_to", format!("{} is outside the enclave", g.admits_to)));
            }
            if !g.monitored {
                return Err(schema("gateways", i, "monitored", "every gateway is monitored"));
            }
            for z in &g.listens_on {
                if !topo.zones.contains_key(z) {
                    return Err(dangling("gateways", i, "listens_on", format!("zone {z} is not declared")));
                }
                if z.is_enclave() {
                    return Err(schema("gateways", i, "listens_on", format!("{z} is inside the enclave")));
                }
            }
            if g.kind == GatewayKind::VPNContext
                && topo.gateways.iter().any(|x| x.kind == GatewayKind::VPNContext && x.admits_to == g.admits_to)
            {
                return Err(schema("gateways", i, "admits_to", format!("a VPN context already admits to {}", g.admits_to)));
            }
            match (&g.kind, &g.enabled_by) {
                (GatewayKind::SSH, None) => {
                    return Err(schema("gateways", i, "enabled_by", "SSH gateways require an enabling exception rule"));
                }
                (_, Some(rule)) => {
                    let Some(r) = topo.exceptions.iter().find(|r| &r.id == rule) else {
                        return Err(dangling("gateways", i, "enabled_by", format!("rule `{rule}` is not declared")));
                    };
                    if r.service != Service::Ssh || r.direction != Direction::Inbound {
                        return Err(schema("gateways", i, "enabled_by", format!("rule `{rule}` is not an inbound ssh rule")));
                    }
                }
                _ => {}
            }
            topo.gateways.push(g);
        }

        for (i, h) in hosts.into_iter().enumerate() {
            if topo.hosts.iter().any(|x| x.id == h.id) {
                return Err(schema("hosts", i, "id", format!("host `{}` declared twice", h.id)));
            }
            if h.cpu == 0 || h.ram_gb == 0 {
                return Err(schema("hosts", i, "cpu", "capacity must be positive"));
            }
            if h.outside_cpu > h.cpu || h.outside_ram_gb > h.ram_gb {
                return Err(schema("hosts", i, "outside_cpu", "outside load exceeds capacity"));
            }
            if h.dedicated_to_enclave && (h.outside_cpu > 0 || h.outside_ram_gb > 0) {
                return Err(schema("hosts", i, "dedicated_to_enclave", "dedicated hosts carry no outside load"));
            }
            topo.hosts.push(h);
        }
        Ok(topo)
    }

    /// Five zones, VPN contexts for both enclave zones, the PRDN jumpbox, two
    /// shared hosts and one dedicated host. No exception rules.
    pub fn standard() -> Self {
        let zones = vec![
            Zone { id: ZoneId::Internet, parent: None },
            Zone { id: ZoneId::Campus, parent: None },
            Zone { id: ZoneId::ProtectedVRF, parent: None },
            Zone { id: ZoneId::PRDNSubnet, parent: Some(ZoneId::ProtectedVRF) },
            Zone { id: ZoneId::Management, parent: None },
        ];
        let gw = |id: &str, kind, admits_to| Gateway {
            id: id.to_owned(),
            kind,
            admits_to,
            listens_on: vec![ZoneId::Internet, ZoneId::Campus],
            monitored: true,
            enabled_by: None,
        };
        let gateways = vec![
            gw("vpn-protected", GatewayKind::VPNContext, ZoneId::ProtectedVRF),
            gw("vpn-prdn", GatewayKind::VPNContext, ZoneId::PRDNSubnet),
            gw("rdp-jumpbox", GatewayKind::RDPJumpbox, ZoneId::PRDNSubnet),
        ];
        let host = |id: &str, dedicated, cpu, ram_gb, outside_cpu, outside_ram_gb| HostSpec {
            id: id.to_owned(),
            dedicated_to_enclave: dedicated,
            cpu,
            ram_gb,
            outside_cpu,
            outside_ram_gb,
        };
        let hosts = vec![
            host("hv-shared-1", false, 512, 4096, 64, 512),
            host("hv-shared-2", false, 512, 4096, 64, 512),
            host("hv-dedicated-1", true, 128, 1024, 0, 0),
        ];
        Topology::new(zones, gateways, hosts, Vec::new()).expect("standard topology is valid")
    }

    pub fn has_zone(&self, z: ZoneId) -> bool {
        self.zones.contains_key(&z)
    }

    pub fn zones(&self) -> impl Iterator<Item = &Zone> {
        self.zones.values()
    }

    pub fn gateways(&self) -> &[Gateway] {
        &self.gateways
    }

    pub fn hosts(&self) -> &[HostSpec] {
        &self.hosts
    }

    pub fn exceptions(&self) -> &[ExceptionRule] {
        &self.exceptions
    }

    /// Validates a rule's shape against the declared zones and normalizes
    /// origin endpoints. VM references are checked by the caller, which knows
    /// the live VM inventory. Errors carry `(field, is_dangling, message)`.
    pub(crate) fn check_rule(&self, mut r: ExceptionRule) -> Result<ExceptionRule, (&'static str, bool, String)> {
        if r.id.is_empty() {
            return Err(("id", false, "rule id is empty".into()));
        }
        if r.documented_by.trim().is_empty() {
            return Err(("documented_by", false, format!("rule `{}` has no documented justification", r.id)));
        }
        for (field, ep) in [("src", &mut r.src), ("dst", &mut r.dst)] {
            match ep {
                RuleEndpoint::Zone(z) if !self.zones.contains_key(z) => {
                    return Err((field, true, format!("zone {z} is not declared")));
                }
                RuleEndpoint::Origin(o) => {
                    *o = normalize_origin(o).ok_or_else(|| (field, false, format!("`{o}` is not a web origin")))?;
                }
                _ => {}
            }
        }
        let inside = |ep: &RuleEndpoint| match ep {
            RuleEndpoint::Zone(z) => z.is_enclave(),
            RuleEndpoint::Vm(_) => true,
            RuleEndpoint::Origin(_) => false,
        };
        match r.direction {
            Direction::Inbound => {
                if !matches!(r.src, RuleEndpoint::Zone(_)) || inside(&r.src) {
                    return Err(("src", false, "inbound rules start from a zone outside the enclave".into()));
                }
                if !inside(&r.dst) {
                    return Err(("dst", false, "inbound rules end inside the enclave".into()));
                }
            }
            Direction::Outbound => {
                if !inside(&r.src) {
                    return Err(("src", false, "outbound rules start inside the enclave".into()));
                }
                if inside(&r.dst) {
                    return Err(("dst", false, "outbound rules end outside the enclave".into()));
                }
            }
        }
        Ok(r)
    }

    pub(crate) fn push_exception(&mut self, r: ExceptionRule) {
        self.exceptions.push(r);
    }
}
