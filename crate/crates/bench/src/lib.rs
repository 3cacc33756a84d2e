//! Fixtures shared by the benchmarks.

use enclave_core::directory::{Affiliation, AuthenticatedPrincipal};
use enclave_core::ledger::{Detail, Ledger};
use enclave_core::policy::{DataClassification, ProjectSpec};
use enclave_core::scenario::generate::{prdn_scale, Generated, ScaleParams};
use enclave_core::{AccessMode, Broker, BrokerConfig, Timestamp};

pub const PROJECT: &str = "bench";

/// A broker with `users` researchers, every other one granted RDP on
/// [`PROJECT`], and a logged-in principal for each.
pub fn populated(users: usize) -> (Broker, Vec<AuthenticatedPrincipal>) {
    let mut b = Broker::new(BrokerConfig::default(), enclave_core::enclave::Topology::standard());
    for u in ["root", "st"] {
        b.register_user(u, Affiliation::Member, None).unwrap();
    }
    b.bootstrap_admin("root").unwrap();
    b.register_project("root", ProjectSpec::new(PROJECT, DataClassification::Sensitive, &["st"])).unwrap();
    let mut principals = Vec::with_capacity(users);
    for i in 0..users {
        let netid = format!("u{i:05}");
        b.register_user(&netid, Affiliation::Member, None).unwrap();
        b.enroll_mfa(&netid, "otp").unwrap();
        if i % 2 == 0 {
            b.grant_access("st", PROJECT, &netid, AccessMode::Rdp).unwrap();
        }
        let p = b.authenticate_local(&netid, b.now()).unwrap();
        principals.push(b.verify_mfa(&p, Some("otp")).unwrap());
    }
    (b, principals)
}

pub fn ledger_of(n: usize) -> Ledger {
    let mut ledger = Ledger::new();
    for i in 0..n {
        let detail = Detail::from([("session".to_owned(), format!("s-{i:06}"))]);
        ledger.append(Timestamp(i as u64), "u-bench", "map", "s", detail).unwrap();
    }
    ledger
}

/// A generated directory and session workload, scaled down by `factor`
/// from the default PRDN size.
pub fn workload(factor: usize) -> Generated {
    let d = ScaleParams::default();
    prdn_scale(&ScaleParams {
        data_providers: d.data_providers / factor,
        projects: d.projects / factor,
        researchers: d.researchers / factor,
        sessions: d.sessions / factor,
        ..d
    })
}
