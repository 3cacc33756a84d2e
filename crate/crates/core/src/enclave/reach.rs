//! Pure reachability evaluation over a [`Topology`].

use serde::Serialize;

use super::{Direction, RuleEndpoint, Service, ShareProtocol, Topology, ZoneId};
use crate::types::{AccessMode, Decision, Rule};

/// Whoever is trying to connect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Traveler {
    /// Unauthenticated traffic from anywhere in a zone.
    Zone(ZoneId),
    Vm { id: String, zone: ZoneId },
    /// A brokered client. `authorized` says whether the session's principal
    /// may use `mode` on the destination's project.
    Session { id: String, origin: ZoneId, mode: AccessMode, open: bool, authorized: bool },
}

impl Traveler {
    pub fn zone(&self) -> ZoneId {
        match self {
            Traveler::Zone(z) => *z,
            Traveler::Vm { zone, .. } => *zone,
            Traveler::Session { origin, .. } => *origin,
        }
    }

    fn path_start(&self) -> Vec<String> {
        match self {
            Traveler::Zone(z) => vec![format!("zone:{z}")],
            Traveler::Vm { id, .. } => vec![format!("vm:{id}")],
            Traveler::Session { id, origin, .. } => vec![format!("session:{id}"), format!("zone:{origin}")],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Vm,
    Share(ShareProtocol),
    Zone,
    /// A web origin; located in the Internet zone.
    Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub id: String,
    pub zone: ZoneId,
    pub kind: TargetKind,
}

impl Target {
    pub fn node(&self) -> String {
        match self.kind {
            TargetKind::Vm => format!("vm:{}", self.id),
            TargetKind::Share(_) => format!("share:{}", self.id),
            TargetKind::Zone => format!("zone:{}", self.zone),
            TargetKind::Origin => format!("origin:{}", self.id),
        }
    }

    pub fn offers(&self, service: Service) -> bool {
        match self.kind {
            TargetKind::Vm => matches!(
                service,
                Service::Rdp | Service::Ssh | Service::Https | Service::Patching | Service::Monitoring
            ),
            TargetKind::Share(p) => p.service() == service,
            TargetKind::Zone | TargetKind::Origin => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Via {
    Internal,
    Gateway(String),
    Exception(String),
    Outside,
    None,
}

impl Via {
    pub fn label(&self) -> &'static str {
        match self {
            Via::Internal => "internal",
            Via::Gateway(_) => "gateway",
            Via::Exception(_) => "exception",
            Via::Outside => "outside",
            Via::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reachability {
    pub decision: Decision,
    /// Ordered node names, e.g. `["session:s-000001", "zone:Internet", "gw:vpn-prdn", "vm:vm-0001"]`.
    pub path: Vec<String>,
    pub via: Via,
}

impl Reachability {
    fn new(decision: Decision, mut path: Vec<String>, dst: &Target, via: Via) -> Self {
        path.push(dst.node());
        Reachability { decision, path, via }
    }

    /// Number of gateway and exception-rule hops on the path.
    pub fn boundary_hops(&self) -> usize {
        self.path.iter().filter(|n| n.starts_with("gw:") || n.starts_with("rule:")).count()
    }
}

fn rule_src_matches(ep: &RuleEndpoint, src: &Traveler) -> bool {
    match (ep, src) {
        (RuleEndpoint::Zone(z), t) => *z == t.zone(),
        (RuleEndpoint::Vm(v), Traveler::Vm { id, .. }) => v == id,
        _ => false,
    }
}

fn rule_dst_matches(ep: &RuleEndpoint, dst: &Target) -> bool {
    match ep {
        RuleEndpoint::Zone(z) => *z == dst.zone,
        RuleEndpoint::Vm(v) => dst.kind == TargetKind::Vm && *v == dst.id,
        RuleEndpoint::Origin(o) => dst.kind == TargetKind::Origin && *o == dst.id,
    }
}

fn find_exception<'t>(
    topo: &'t Topology,
    direction: Direction,
    src: &Traveler,
    dst: &Target,
    service: Service,
) -> Option<&'t str> {
    topo.exceptions()
        .iter()
        .find(|r| {
            r.direction == direction
                && r.service == service
                && rule_src_matches(&r.src, src)
                && rule_dst_matches(&r.dst, dst)
        })
        .map(|r| r.id.as_str())
}

/// Decides whether `src` may reach `dst` for `service`, returning the path
/// taken.
///
/// Inside the enclave traffic stays within its zone. Crossing into the enclave
/// takes exactly one gateway (for an authorized session of the gateway's mode)
/// or one inbound exception rule. Leaving takes one outbound exception rule.
/// Traffic entirely outside the enclave is not this evaluator's concern.
pub fn evaluate(topo: &Topology, src: &Traveler, dst: &Target, service: Service) -> Reachability {
    let start = src.path_start();
    if !dst.offers(service) {
        return Reachability::new(Decision::deny(Rule::ServiceNotOffered), start, dst, Via::None);
    }
    if let Traveler::Session { open: false, .. } = src {
        return Reachability::new(Decision::deny(Rule::SessionNotOpen), start, dst, Via::None);
    }
    let from = src.zone();
    match (from.is_enclave(), dst.zone.is_enclave()) {
        (true, true) if from == dst.zone => {
            Reachability::new(Decision::allow(Rule::SameZone), start, dst, Via::Internal)
        }
        (true, true) => Reachability::new(Decision::deny(Rule::ZoneIsolation), start, dst, Via::None),
        (false, false) => Reachability::new(Decision::allow(Rule::OutsideEnclave), start, dst, Via::Outside),
        (false, true) => {
            let mut refused = false;
            if let Traveler::Session { mode, authorized, .. } = src {
                let gw = topo.gateways().iter().find(|g| {
                    g.admits_to == dst.zone && g.listens_on.contains(&from) && g.kind.carries() == *mode && g.kind.forwards(service)
                });
                if let Some(g) = gw {
                    if *authorized {
                        let mut path = start.clone();
                        path.push(format!("gw:{}", g.id));
                        return Reachability::new(Decision::allow(Rule::GatewayIngress), path, dst, Via::Gateway(g.id.clone()));
                    }
                    refused = true;
                }
            }
            if let Some(rule) = find_exception(topo, Direction::Inbound, src, dst, service) {
                let mut path = start;
                path.push(format!("rule:{rule}"));
                return Reachability::new(Decision::allow(Rule::ExceptionRule), path, dst, Via::Exception(rule.to_owned()));
            }
            let reason = match src {
                Traveler::Session { .. } if refused => Rule::SessionNotAuthorized,
                Traveler::Session { .. } => Rule::NoGatewayPath,
                _ => Rule::NoDirectIngress,
            };
            Reachability::new(Decision::deny(reason), start, dst, Via::None)
        }
        (true, false) => {
            if let Some(rule) = find_exception(topo, Direction::Outbound, src, dst, service) {
                let mut path = start;
                path.push(format!("rule:{rule}"));
                return Reachability::new(Decision::allow(Rule::ExceptionRule), path, dst, Via::Exception(rule.to_owned()));
            }
            Reachability::new(Decision::deny(Rule::NoEgressPath), start, dst, Via::None)
        }
    }
}
