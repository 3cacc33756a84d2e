//! A small hand-built directory shared by the trace-based tests.

use enclave_core::directory::{Affiliation, AuthenticatedPrincipal, PlatformRole};
use enclave_core::enclave::ZoneId;
use enclave_core::policy::{DataClassification, ProjectRole, ProjectSpec};
use enclave_core::types::AccessMode;
use enclave_core::{Broker, BrokerConfig};

pub const FACTOR: &str = "otp";
pub const RESEARCHERS: [&str; 4] = ["u1", "u2", "u3", "u4"];
pub const BROKERS: [&str; 2] = ["hb1", "hb2"];
/// Sensitive, in the PRDN subnet; every researcher and `hb1` hold both modes.
pub const SENSITIVE: &str = "sens";
/// Restricted, in the protected zone; every researcher holds VPN.
pub const RESTRICTED: &str = "restr";

pub fn world(seed: u64) -> Broker {
    let config = BrokerConfig { seed, ..BrokerConfig::default() };
    let mut b = Broker::new(config, enclave_core::enclave::Topology::standard());
    let everyone = ["root", "st", "vet1", "ops1", "appr"].into_iter().chain(BROKERS).chain(RESEARCHERS);
    for u in everyone {
        b.register_user(u, Affiliation::Member, None).unwrap();
        b.enroll_mfa(u, FACTOR).unwrap();
    }
    b.bootstrap_admin("root").unwrap();
    b.assign_role("root", "vet1", PlatformRole::Vetter).unwrap();
    b.assign_role("root", "ops1", PlatformRole::Operator).unwrap();

    let mut sens = ProjectSpec::new(SENSITIVE, DataClassification::Sensitive, &["st"]);
    sens.zone = ZoneId::PRDNSubnet;
    b.register_project("root", sens).unwrap();
    b.register_project("root", ProjectSpec::new(RESTRICTED, DataClassification::Restricted, &["st"])).unwrap();
    for p in [SENSITIVE, RESTRICTED] {
        for hb in BROKERS {
            b.assign_project_role("st", p, ProjectRole::HonestBroker, hb).unwrap();
        }
    }
    b.assign_project_role("st", SENSITIVE, ProjectRole::Approver, "appr").unwrap();
    for u in RESEARCHERS.into_iter().chain(["hb1"]) {
        for mode in AccessMode::ALL {
            b.grant_access("st", SENSITIVE, u, mode).unwrap();
        }
        b.grant_access("st", RESTRICTED, u, AccessMode::Vpn).unwrap();
    }
    b
}

/// A fully authenticated principal at the broker's current time.
pub fn login(b: &mut Broker, netid: &str) -> AuthenticatedPrincipal {
    let p = b.authenticate_local(netid, b.now()).unwrap();
    b.verify_mfa(&p, Some(FACTOR)).unwrap()
}
