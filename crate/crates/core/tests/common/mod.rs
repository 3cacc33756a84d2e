//! Reference models used as test oracles. Each one restates the intended
//! behavior directly from the domain rules and shares no logic with the
//! engine beyond plain data types.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use enclave_core::enclave::{
    Direction, ExceptionRule, Gateway, GatewayKind, HostSpec, RuleEndpoint, Service, ShareProtocol, Target, TargetKind,
    Topology, Traveler, Zone, ZoneId,
};
use enclave_core::egress::EgressKind;
use enclave_core::ledger::{Action, AuditEvent};
use enclave_core::policy::DataClassification;
use enclave_core::scenario::{self, Engine, Overrides, Source};
use enclave_core::types::{AccessMode, Period};
use rand::seq::SliceRandom;
use rand::Rng;

pub mod criteria;
pub mod world;

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

/// Engine loaded from the fixture topology and directory.
pub fn fixture_engine(seed: u64) -> Engine {
    let read = |n: &str| std::fs::read_to_string(format!("{FIXTURES}/{n}")).expect("fixture exists");
    let topo = scenario::parse_topology("topology.toml", &read("topology.toml")).expect("fixture topology");
    let dir = scenario::parse_directory("directory.toml", &read("directory.toml")).expect("fixture directory");
    let mut config = enclave_core::BrokerConfig::default();
    config.seed = seed;
    scenario::load(topo, &dir, config).expect("fixtures load")
}

pub fn replay_fixture(name: &str) -> scenario::RunReport {
    let read = |n: &str| std::fs::read_to_string(format!("{FIXTURES}/{n}")).expect("fixture exists");
    let (t, d, s) = (read("topology.toml"), read("directory.toml"), read(name));
    scenario::replay(
        Source { file: "topology.toml", text: &t },
        Source { file: "directory.toml", text: &d },
        Source { file: name, text: &s },
        Overrides::default(),
    )
    .expect("fixture loads")
}

// ------------------------------------------------------------ classification

/// Whether a principal may use a mode on a project, straight from the tier
/// rules: public admits everyone, restricted admits a grant for the mode or
/// any role rule, sensitive admits only an individual grant for the mode.
pub fn classification_oracle(tier: DataClassification, granted_this_mode: bool, in_role_group: bool, active: bool) -> bool {
    if !active {
        return false;
    }
    match tier {
        DataClassification::Public => true,
        DataClassification::Restricted => granted_this_mode || in_role_group,
        DataClassification::Sensitive => granted_this_mode,
    }
}

// ------------------------------------------------------------ egress

pub fn egress_oracle(mode: AccessMode, managed: bool, kind: EgressKind) -> bool {
    // RDP moves nothing; VPN moves anything, but only from a managed endpoint
    let table = [
        (AccessMode::Rdp, false, [false, false, false]),
        (AccessMode::Rdp, true, [false, false, false]),
        (AccessMode::Vpn, false, [false, false, false]),
        (AccessMode::Vpn, true, [true, true, true]),
    ];
    let col = match kind {
        EgressKind::ClipboardIn => 0,
        EgressKind::ClipboardOut => 1,
        EgressKind::FileOut => 2,
    };
    table.iter().find(|r| r.0 == mode && r.1 == managed).map(|r| r.2[col]).expect("row exists")
}

// ------------------------------------------------------------ reachability

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Src,
    Zone(ZoneId),
    Gw(String),
    Rule(String),
    Dst,
}

pub fn enclave(z: ZoneId) -> bool {
    z == ZoneId::ProtectedVRF || z == ZoneId::PRDNSubnet
}

fn offers(dst: &Target, service: Service) -> bool {
    match dst.kind {
        TargetKind::Vm => {
            [Service::Rdp, Service::Ssh, Service::Https, Service::Patching, Service::Monitoring].contains(&service)
        }
        TargetKind::Share(ShareProtocol::Cifs) => service == Service::Cifs,
        TargetKind::Share(ShareProtocol::Iscsi) => service == Service::Iscsi,
        TargetKind::Zone | TargetKind::Origin => true,
    }
}

fn gateway_admits(kind: GatewayKind, mode: AccessMode, service: Service) -> bool {
    match kind {
        GatewayKind::VPNContext => mode == AccessMode::Vpn,
        GatewayKind::RDPJumpbox => mode == AccessMode::Rdp && service == Service::Rdp,
        GatewayKind::SSH => mode == AccessMode::Vpn && service == Service::Ssh,
    }
}

fn src_zone(src: &Traveler) -> ZoneId {
    match src {
        Traveler::Zone(z) => *z,
        Traveler::Vm { zone, .. } => *zone,
        Traveler::Session { origin, .. } => *origin,
    }
}

/// Breadth-first search over an explicit graph of zones, gateways and
/// exception rules. Returns the node path (gateway and rule nodes named) when
/// the destination is reachable.
pub fn reach_oracle(topo: &Topology, src: &Traveler, dst: &Target, service: Service) -> Option<Vec<String>> {
    if !offers(dst, service) {
        return None;
    }
    if let Traveler::Session { open: false, .. } = src {
        return None;
    }
    let from = src_zone(src);
    let mut edges: BTreeMap<Node, Vec<Node>> = BTreeMap::new();
    let mut add = |a: Node, b: Node| edges.entry(a).or_default().push(b);
    add(Node::Src, Node::Zone(from));
    if from == dst.zone || (!enclave(from) && !enclave(dst.zone)) {
        add(Node::Zone(from), Node::Dst);
    }
    if let Traveler::Session { mode, authorized: true, .. } = src {
        for g in topo.gateways() {
            if g.listens_on.contains(&from) && gateway_admits(g.kind, *mode, service) {
                add(Node::Zone(from), Node::Gw(g.id.clone()));
            }
            if g.admits_to == dst.zone && enclave(dst.zone) && !enclave(from) {
                add(Node::Gw(g.id.clone()), Node::Dst);
            }
        }
    }
    for r in topo.exceptions() {
        if r.service != service {
            continue;
        }
        let src_ok = match (&r.src, src) {
            (RuleEndpoint::Zone(z), _) => *z == from,
            (RuleEndpoint::Vm(v), Traveler::Vm { id, .. }) => v == id,
            _ => false,
        };
        let dst_ok = match &r.dst {
            RuleEndpoint::Zone(z) => *z == dst.zone,
            RuleEndpoint::Vm(v) => dst.kind == TargetKind::Vm && *v == dst.id,
            RuleEndpoint::Origin(o) => dst.kind == TargetKind::Origin && *o == dst.id,
        };
        let crossing = match r.direction {
            Direction::Inbound => !enclave(from) && enclave(dst.zone),
            Direction::Outbound => enclave(from) && !enclave(dst.zone),
        };
        if src_ok && crossing {
            add(Node::Zone(from), Node::Rule(r.id.clone()));
        }
        if dst_ok && crossing {
            add(Node::Rule(r.id.clone()), Node::Dst);
        }
    }

    let mut prev: BTreeMap<Node, Node> = BTreeMap::new();
    let mut seen = BTreeSet::from([Node::Src]);
    let mut queue = VecDeque::from([Node::Src]);
    while let Some(n) = queue.pop_front() {
        if n == Node::Dst {
            let mut path = Vec::new();
            let mut cur = Node::Dst;
            while let Some(p) = prev.get(&cur) {
                match &cur {
                    Node::Gw(g) => path.push(format!("gw:{g}")),
                    Node::Rule(r) => path.push(format!("rule:{r}")),
                    _ => {}
                }
                cur = p.clone();
            }
            path.reverse();
            return Some(path);
        }
        for m in edges.get(&n).into_iter().flatten() {
            if seen.insert(m.clone()) {
                prev.insert(m.clone(), n.clone());
                queue.push_back(m.clone());
            }
        }
    }
    None
}

/// A random valid topology of at most twenty nodes, plus the travelers and
/// targets to enumerate against it.
pub struct RandomTopology {
    pub topology: Topology,
    pub travelers: Vec<Traveler>,
    pub targets: Vec<Target>,
}

pub const ORIGINS: [&str; 2] = ["https://updates.example.org", "https://cran.example.org"];

pub fn random_topology(rng: &mut impl Rng) -> RandomTopology {
    let outside_pool = [ZoneId::Internet, ZoneId::Campus, ZoneId::Management];
    let mut outside: Vec<ZoneId> = outside_pool.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
    if outside.is_empty() {
        outside.push(ZoneId::Internet);
    }
    let with_prdn = rng.gen_bool(0.7);
    let mut zones: Vec<Zone> = outside.iter().map(|&id| Zone { id, parent: None }).collect();
    zones.push(Zone { id: ZoneId::ProtectedVRF, parent: None });
    let mut inside = vec![ZoneId::ProtectedVRF];
    if with_prdn {
        zones.push(Zone { id: ZoneId::PRDNSubnet, parent: Some(ZoneId::ProtectedVRF) });
        inside.push(ZoneId::PRDNSubnet);
    }

    let listeners = |rng: &mut dyn rand::RngCore| -> Vec<ZoneId> {
        let mut l: Vec<ZoneId> = outside.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        if l.is_empty() {
            l.push(outside[0]);
        }
        l
    };
    let services = [Service::Rdp, Service::Ssh, Service::Https, Service::Cifs, Service::Iscsi, Service::Patching, Service::Monitoring];
    let mut gateways = Vec::new();
    let mut exceptions = Vec::new();
    for &z in &inside {
        if rng.gen_bool(0.7) {
            gateways.push(Gateway {
                id: format!("vpn-{z}"),
                kind: GatewayKind::VPNContext,
                admits_to: z,
                listens_on: listeners(rng),
                monitored: true,
                enabled_by: None,
            });
        }
        for j in 0..rng.gen_range(0..=2) {
            gateways.push(Gateway {
                id: format!("rdp-{z}-{j}"),
                kind: GatewayKind::RDPJumpbox,
                admits_to: z,
                listens_on: listeners(rng),
                monitored: true,
                enabled_by: None,
            });
        }
        if rng.gen_bool(0.3) {
            let rule = format!("ssh-in-{z}");
            exceptions.push(ExceptionRule {
                id: rule.clone(),
                service: Service::Ssh,
                src: RuleEndpoint::Zone(*outside.choose(rng).expect("non-empty")),
                dst: RuleEndpoint::Zone(z),
                direction: Direction::Inbound,
                documented_by: "ticket".into(),
            });
            gateways.push(Gateway {
                id: format!("ssh-{z}"),
                kind: GatewayKind::SSH,
                admits_to: z,
                listens_on: listeners(rng),
                monitored: true,
                enabled_by: Some(rule),
            });
        }
    }
    for k in 0..rng.gen_range(0..=3) {
        let service = *services.choose(rng).expect("non-empty");
        let rule = if rng.gen_bool(0.5) {
            ExceptionRule {
                id: format!("in-{k}"),
                service,
                src: RuleEndpoint::Zone(*outside.choose(rng).expect("non-empty")),
                dst: RuleEndpoint::Zone(*inside.choose(rng).expect("non-empty")),
                direction: Direction::Inbound,
                documented_by: "ticket".into(),
            }
        } else {
            let dst = if rng.gen_bool(0.5) {
                RuleEndpoint::Origin(ORIGINS.choose(rng).expect("non-empty").to_string())
            } else {
                RuleEndpoint::Zone(*outside.choose(rng).expect("non-empty"))
            };
            ExceptionRule {
                id: format!("out-{k}"),
                service,
                src: RuleEndpoint::Zone(*inside.choose(rng).expect("non-empty")),
                dst,
                direction: Direction::Outbound,
                documented_by: "ticket".into(),
            }
        };
        exceptions.push(rule);
    }
    let hosts = vec![HostSpec { id: "hv".into(), dedicated_to_enclave: true, cpu: 64, ram_gb: 256, outside_cpu: 0, outside_ram_gb: 0 }];
    assert!(zones.len() + gateways.len() + exceptions.len() + hosts.len() <= 20);
    let topology = Topology::new(zones.clone(), gateways, hosts, exceptions).expect("generator builds valid topologies");

    let (travelers, targets) = probes(&topology);
    RandomTopology { topology, travelers, targets }
}

/// Every kind of traveler and target in every zone of `topo`.
pub fn probes(topo: &Topology) -> (Vec<Traveler>, Vec<Target>) {
    let mut travelers = Vec::new();
    let mut targets = Vec::new();
    for z in topo.zones().map(|z| z.id) {
        travelers.push(Traveler::Zone(z));
        travelers.push(Traveler::Vm { id: format!("vm-{z}"), zone: z });
        targets.push(Target { id: format!("vm-{z}"), zone: z, kind: TargetKind::Vm });
        targets.push(Target { id: format!("{z}"), zone: z, kind: TargetKind::Zone });
        if enclave(z) {
            targets.push(Target { id: format!("cifs-{z}"), zone: z, kind: TargetKind::Share(ShareProtocol::Cifs) });
            targets.push(Target { id: format!("iscsi-{z}"), zone: z, kind: TargetKind::Share(ShareProtocol::Iscsi) });
            continue;
        }
        for mode in AccessMode::ALL {
            for authorized in [true, false] {
                travelers.push(Traveler::Session { id: format!("s-{z}-{mode}-{authorized}"), origin: z, mode, open: true, authorized });
            }
        }
        travelers.push(Traveler::Session { id: format!("closed-{z}"), origin: z, mode: AccessMode::Vpn, open: false, authorized: true });
    }
    for o in ORIGINS {
        targets.push(Target { id: o.to_owned(), zone: ZoneId::Internet, kind: TargetKind::Origin });
    }
    (travelers, targets)
}

pub const ALL_SERVICES: [Service; 7] =
    [Service::Rdp, Service::Ssh, Service::Https, Service::Cifs, Service::Iscsi, Service::Patching, Service::Monitoring];

// ------------------------------------------------------------ ledger

/// Replays session open and close events in order and, for every event whose
/// actor is an arbitrary user, records who owned that name at that moment.
pub fn linear_scan_owners(events: &[AuditEvent]) -> Vec<(u64, String, String)> {
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    let mut session_name: BTreeMap<String, String> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in events {
        match ev.action {
            Action::Map => {
                let principal = ev.detail.get("principal").expect("map names a principal").clone();
                let session = ev.detail.get("session").expect("map names a session").clone();
                owner.insert(ev.object.clone(), principal);
                session_name.insert(session, ev.object.clone());
            }
            _ => {}
        }
        let is_arbitrary = ev.actor.len() == 10
            && ev.actor.starts_with("u-")
            && ev.actor[2..].chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase());
        if is_arbitrary {
            let who = owner.get(&ev.actor).cloned().expect("arbitrary actor acts only while mapped");
            out.push((ev.seq, ev.actor.clone(), who));
        }
        if matches!(ev.action, Action::Close | Action::RevokeForcedClose | Action::VmLostClose) {
            if let Some(name) = ev.detail.get("session").and_then(|s| session_name.remove(s)) {
                owner.remove(&name);
            }
        }
    }
    out
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Recount {
    pub vpn: u64,
    pub rdp: u64,
    pub egress_allowed: u64,
    pub egress_denied: u64,
    pub exception_traversals: u64,
    pub grants: u64,
    pub revokes: u64,
}

/// Direct filter-and-count over raw events.
pub fn recount(events: &[AuditEvent], project: &str, period: Period) -> Recount {
    let mine = |e: &&AuditEvent| e.detail.get("project").map(String::as_str) == Some(project) && e.at >= period.from && e.at <= period.to;
    let count = |pred: &dyn Fn(&AuditEvent) -> bool| events.iter().filter(mine).filter(|e| pred(e)).count() as u64;
    let changed = |e: &AuditEvent| e.detail.get("noop").map(String::as_str) != Some("true");
    Recount {
        vpn: count(&|e| e.action == Action::Map && e.detail["mode"] == "vpn"),
        rdp: count(&|e| e.action == Action::Map && e.detail["mode"] == "rdp"),
        egress_allowed: count(&|e| e.action == Action::EgressAllow),
        egress_denied: count(&|e| e.action == Action::EgressDeny),
        exception_traversals: count(&|e| e.action == Action::Connect && e.detail.get("via").map(String::as_str) == Some("exception")),
        grants: count(&|e| e.action == Action::Grant && changed(e)),
        revokes: count(&|e| e.action == Action::Revoke && changed(e)),
    }
}

pub fn report_counts(r: &enclave_core::ledger::ComplianceReport) -> Recount {
    Recount {
        vpn: r.session_counts.vpn,
        rdp: r.session_counts.rdp,
        egress_allowed: r.egress_attempts.allowed,
        egress_denied: r.egress_attempts.denied,
        exception_traversals: r.exception_traversals,
        grants: r.grant_count,
        revokes: r.revoke_count,
    }
}
