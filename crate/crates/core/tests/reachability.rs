mod common;

use common::criteria::no_direct_ingress;
use common::{enclave, probes, reach_oracle, ALL_SERVICES};
use enclave_core::enclave::{evaluate, Service, Target, TargetKind, Topology, Traveler, Via, ZoneId};
use enclave_core::scenario::parse_topology;
use enclave_core::types::{AccessMode, Rule};
use proptest::prelude::*;

fn agrees_everywhere(topo: &Topology) {
    let (travelers, targets) = probes(topo);
    for src in &travelers {
        for dst in &targets {
            for &service in &ALL_SERVICES {
                let got = evaluate(topo, src, dst, service);
                let want = reach_oracle(topo, src, dst, service);
                assert_eq!(got.decision.is_allow(), want.is_some(), "{src:?} -> {dst:?} over {service}: {:?}", got.decision);
                if got.decision.is_allow() && enclave(dst.zone) && !enclave(src.zone()) {
                    assert_eq!(got.boundary_hops(), 1, "{:?}", got.path);
                }
            }
        }
    }
}

#[test]
fn standard_topology_matches_oracle() {
    agrees_everywhere(&Topology::standard());
}

#[test]
fn fixture_topology_matches_oracle() {
    let text = std::fs::read_to_string(format!("{}/topology.toml", common::FIXTURES)).unwrap();
    agrees_everywhere(&parse_topology("topology.toml", &text).unwrap());
}

#[test]
fn unbrokered_traffic_never_enters() {
    let topo = Topology::standard();
    let (travelers, targets) = probes(&topo);
    for src in travelers.iter().filter(|t| !matches!(t, Traveler::Session { .. }) && !enclave(t.zone())) {
        for dst in targets.iter().filter(|t| enclave(t.zone)) {
            for &service in &ALL_SERVICES {
                let r = evaluate(&topo, src, dst, service);
                assert!(!r.decision.is_allow(), "{src:?} reached {dst:?} over {service}");
            }
        }
    }
}

#[test]
fn rdp_sessions_only_land_through_the_jumpbox() {
    let topo = Topology::standard();
    let src = Traveler::Session { id: "s".into(), origin: ZoneId::Internet, mode: AccessMode::Rdp, open: true, authorized: true };
    let vm = Target { id: "vm-0001".into(), zone: ZoneId::PRDNSubnet, kind: TargetKind::Vm };
    let r = evaluate(&topo, &src, &vm, Service::Rdp);
    assert_eq!(r.via, Via::Gateway("rdp-jumpbox".into()));
    assert_eq!(r.path, ["session:s", "zone:Internet", "gw:rdp-jumpbox", "vm:vm-0001"]);
    let r = evaluate(&topo, &src, &vm, Service::Ssh);
    assert_eq!(r.decision.reason, Rule::NoGatewayPath);
}

#[test]
fn closed_sessions_go_nowhere() {
    let topo = Topology::standard();
    let src = Traveler::Session { id: "s".into(), origin: ZoneId::Internet, mode: AccessMode::Vpn, open: false, authorized: true };
    let vm = Target { id: "vm-0001".into(), zone: ZoneId::ProtectedVRF, kind: TargetKind::Vm };
    assert_eq!(evaluate(&topo, &src, &vm, Service::Rdp).decision.reason, Rule::SessionNotOpen);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_topologies_match_oracle(seed in any::<u64>()) {
        let r = no_direct_ingress(seed, 2);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }
}
