mod common;

use common::criteria::pipeline_soundness;
use common::world::{world, SENSITIVE};
use enclave_core::enclave::{Source, ZoneId};
use enclave_core::pipeline::ImageState;
use enclave_core::BrokerError;

#[test]
fn short_paths_are_sound() {
    let r = pipeline_soundness(4, 100, 21);
    assert!(r.is_ok(), "{}", r.unwrap_err());
}

#[test]
fn full_promotion_then_revocation() {
    let mut b = world(2);
    let img = b.submit_image("u1", SENSITIVE, "r-env", &Source::Zone(ZoneId::Campus)).unwrap();
    assert!(matches!(b.deploy_image("ops1", &img.id, SENSITIVE, &img.digest), Err(BrokerError::NotApproved(_))));
    b.vet_image("vet1", &img.id, "no findings").unwrap();
    b.approve_image("appr", &img.id).unwrap();
    let inst = b.deploy_image("ops1", &img.id, SENSITIVE, &img.digest).unwrap();
    assert_eq!(b.image(&img.id).unwrap().state, ImageState::Deployed);
    b.revoke_image("root", &img.id).unwrap();
    assert!(b.instance(&inst.id).unwrap().retired);
    assert!(b.read_disk(&inst.vm).is_err());
}

#[test]
fn enclave_builds_are_refused() {
    let mut b = world(2);
    let r = b.submit_image("u1", SENSITIVE, "r-env", &Source::Zone(ZoneId::PRDNSubnet));
    assert!(matches!(r, Err(BrokerError::InsideEnclaveSubmission)));
}
