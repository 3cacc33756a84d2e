//! Checks shared by the integration tests (small sizes, many seeds) and the
//! acceptance target (full sizes). Each returns a one-line summary on success
//! and a counterexample description on failure.

use std::collections::{BTreeMap, BTreeSet};

use enclave_core::directory::{GroupKind, MembershipAction};
use enclave_core::egress::{ClipboardDirection, EgressKind, ExportStatus, ExportVerdict};
use enclave_core::enclave::{evaluate, Source, Topology, ZoneId};
use enclave_core::ledger::{verify_events, Action, AuditEvent};
use enclave_core::pipeline::ImageState;
use enclave_core::policy::{DataClassification, ProjectSpec};
use enclave_core::scenario::generate::{prdn_scale, ScaleParams};
use enclave_core::scenario::{config_for, load, run_scenario, ExitStatus, Overrides};
use enclave_core::session::AuthOutcome;
use enclave_core::types::{AccessMode, Period, Timestamp, SECS_PER_DAY};
use enclave_core::{Broker, BrokerConfig, BrokerError, Digest, Secret};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::world::{self, login, BROKERS, RESEARCHERS, RESTRICTED, SENSITIVE};
use super::{
    classification_oracle, egress_oracle, enclave, linear_scan_owners, random_topology, reach_oracle, recount,
    report_counts, ALL_SERVICES,
};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ------------------------------------------------------------ 1

pub fn no_direct_ingress(seed: u64, topologies: usize) -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut triples, mut allowed_in) = (0usize, 0usize);
    for t in 0..topologies {
        let rt = random_topology(&mut rng);
        for src in &rt.travelers {
            for dst in &rt.targets {
                for &service in &ALL_SERVICES {
                    triples += 1;
                    let got = evaluate(&rt.topology, src, dst, service);
                    let want = reach_oracle(&rt.topology, src, dst, service);
                    ensure!(
                        got.decision.is_allow() == want.is_some(),
                        "topology {t}: {src:?} -> {dst:?} over {service}: engine {:?}, oracle {want:?}",
                        got.decision
                    );
                    let Some(oracle_path) = want else { continue };
                    ensure!(
                        got.boundary_hops() == oracle_path.len(),
                        "topology {t}: {src:?} -> {dst:?}: engine path {:?}, oracle {oracle_path:?}",
                        got.path
                    );
                    if enclave(dst.zone) && !enclave(src.zone()) {
                        allowed_in += 1;
                        ensure!(got.boundary_hops() == 1, "ingress without exactly one crossing: {:?}", got.path);
                    }
                }
            }
        }
    }
    Ok(format!("{topologies} topologies, {triples} triples agree, {allowed_in} ingress allows each cross once"))
}

// ------------------------------------------------------------ 2

struct Issued {
    session: String,
    secret: Secret,
    vm: String,
}

pub fn credential_window(seed: u64, traces: usize) -> Outcome {
    let base = world::world(seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut accepted, mut replays) = (0usize, 0usize);
    for t in 0..traces {
        let mut b = base.clone();
        let mut issued: Vec<Issued> = Vec::new();
        let mut open: BTreeSet<String> = BTreeSet::new();
        for step in 0..rng.gen_range(10..30) {
            match rng.gen_range(0..9) {
                op @ (0 | 1) => {
                    let netid = *RESEARCHERS.choose(&mut rng).expect("non-empty");
                    let (project, mode) = if rng.gen_bool(0.5) {
                        (SENSITIVE, *AccessMode::ALL.choose(&mut rng).expect("non-empty"))
                    } else {
                        (RESTRICTED, AccessMode::Vpn)
                    };
                    let p = login(&mut b, netid);
                    let now = b.now();
                    let r = if op == 0 {
                        b.open_session(&p, project, mode, true, now)
                    } else {
                        b.resume_session(&p, project, mode, true, now)
                    };
                    let busy = open.iter().any(|id| {
                        let s = b.session(id).expect("known");
                        s.principal == netid && s.project == project
                    });
                    match r {
                        Ok((s, _)) => {
                            ensure!(!busy, "trace {t} step {step}: second open session for {netid} on {project}");
                            let secret = b.installed_secret(&s.credential).expect("credential installed");
                            open.insert(s.id.clone());
                            issued.push(Issued { session: s.id, secret, vm: s.vm });
                        }
                        Err(e) => ensure!(busy || op == 1, "trace {t} step {step}: open failed: {e}"),
                    }
                }
                2 if !issued.is_empty() => {
                    let i = rng.gen_range(0..issued.len());
                    let now = b.now();
                    let r = b.close_session(&issued[i].session, now);
                    ensure!(r.is_ok() == open.remove(&issued[i].session), "trace {t} step {step}: close disagreed: {r:?}");
                }
                3 => {
                    let to = b.now().plus_secs(rng.gen_range(1..4 * 3600));
                    b.advance_to(to);
                }
                4 => {
                    let now = b.now();
                    b.expire_retained(now);
                }
                5 => {
                    let mut bytes = [0u8; 16];
                    rng.fill(&mut bytes);
                    if let Some(target) = issued.choose(&mut rng) {
                        let out = b.authenticate_to_vm(&Secret::from_bytes(bytes), &target.vm, b.now());
                        ensure!(out == AuthOutcome::Rejected, "trace {t} step {step}: forged secret accepted");
                    }
                }
                _ if !issued.is_empty() => {
                    let cred = &issued[rng.gen_range(0..issued.len())];
                    // half the time aim at the credential's own VM
                    let vm = if rng.gen_bool(0.5) { cred.vm.clone() } else { issued.choose(&mut rng).expect("non-empty").vm.clone() };
                    let out = b.authenticate_to_vm(&cred.secret, &vm, b.now());
                    let expected = open.contains(&cred.session) && cred.vm == vm;
                    if !expected {
                        replays += 1;
                    }
                    ensure!(
                        (out == AuthOutcome::Accepted) == expected,
                        "trace {t} step {step}: secret of {} (open: {}) on {vm}: {out}",
                        cred.session,
                        open.contains(&cred.session)
                    );
                    if out == AuthOutcome::Accepted {
                        accepted += 1;
                    }
                }
                _ => {}
            }
            let engine_open: BTreeSet<String> = b.sessions().filter(|s| s.is_open()).map(|s| s.id.clone()).collect();
            ensure!(engine_open == open, "trace {t} step {step}: open sessions {engine_open:?}, model {open:?}");
        }
    }
    Ok(format!("{traces} traces, {accepted} in-session acceptances, {replays} out-of-window or cross-session attempts rejected"))
}

// ------------------------------------------------------------ 3

pub fn traceability(seed: u64, researchers: usize, sessions: usize, min_principals: usize) -> Outcome {
    let params = ScaleParams { seed, data_providers: 20, projects: 40, researchers, sessions, honest_brokers: 3 };
    let g = prdn_scale(&params);
    let mut engine = load(Topology::standard(), &g.directory, config_for(&g.scenario, Overrides::default()))
        .map_err(|e| e.to_string())?;
    let report = run_scenario(&mut engine, &g.scenario);
    ensure!(report.status == ExitStatus::Pass, "generated scenario failed: {:?}", report.diff);
    let b = engine.broker();
    let events = b.ledger().events();
    let principals: BTreeSet<&str> =
        events.iter().filter(|e| e.action == Action::Map).filter_map(|e| e.detail("principal")).collect();
    let opened = events.iter().filter(|e| e.action == Action::Map).count();
    let attributed = linear_scan_owners(events);
    ensure!(!attributed.is_empty(), "no arbitrary-user events to check");
    ensure!(principals.len() >= min_principals, "only {} principals held sessions", principals.len());
    ensure!(opened >= sessions, "only {opened} of {sessions} sessions opened");
    for (seq, name, who) in &attributed {
        let at = events[*seq as usize - 1].at;
        let got = b.resolve_identity(name, at).map_err(|e| format!("event {seq}: {e}"))?;
        ensure!(got == *who, "event {seq} by {name}: resolved {got}, scan says {who}");
    }
    Ok(format!("{} principals, {opened} sessions, {} attributed events resolved", principals.len(), attributed.len()))
}

// ------------------------------------------------------------ 4

pub fn classification_table() -> Outcome {
    let tiers = [DataClassification::Public, DataClassification::Restricted, DataClassification::Sensitive];
    let grant_sets: [&[AccessMode]; 4] = [&[], &[AccessMode::Vpn], &[AccessMode::Rdp], &[AccessMode::Vpn, AccessMode::Rdp]];
    let mut rows = 0;
    for tier in tiers {
        for grants in grant_sets {
            for role in [false, true] {
                for active in [true, false] {
                    let mut b = Broker::new(BrokerConfig::default(), Topology::standard());
                    for u in ["root", "st", "x"] {
                        b.register_user(u, enclave_core::directory::Affiliation::Member, None).unwrap();
                        b.enroll_mfa(u, world::FACTOR).unwrap();
                    }
                    b.bootstrap_admin("root").unwrap();
                    b.create_group("root", "analysts", GroupKind::Role, None).unwrap();
                    if role {
                        b.set_membership("root", "analysts", "x", MembershipAction::Add).unwrap();
                    }
                    let mut spec = ProjectSpec::new("p", tier, &["st"]);
                    spec.role_rules = vec!["analysts".into()];
                    b.register_project("root", spec).unwrap();
                    let mut granted = true;
                    for &m in grants {
                        match b.grant_access("st", "p", "x", m) {
                            Ok(_) => {}
                            Err(BrokerError::PublicProjectNoGrants(_)) if tier == DataClassification::Public => granted = false,
                            Err(e) => return Err(format!("grant failed: {e}")),
                        }
                    }
                    if !granted {
                        continue;
                    }
                    let bare = b.authenticate_local("x", b.now()).unwrap();
                    let p = login(&mut b, "x");
                    if !active {
                        b.deactivate_user("root", "x").unwrap();
                    }
                    for mode in AccessMode::ALL {
                        rows += 1;
                        ensure!(
                            matches!(b.check_access(&bare, "p", mode), Err(BrokerError::MfaRequired)),
                            "{tier}/{grants:?}: check without MFA did not fail closed"
                        );
                        let got = b.check_access(&p, "p", mode).map_err(|e| e.to_string())?;
                        let want = classification_oracle(tier, grants.contains(&mode), role, active);
                        ensure!(
                            got.is_allow() == want,
                            "tier {tier}, grants {grants:?}, role {role}, active {active}, mode {mode}: got {got:?}"
                        );
                        if tier == DataClassification::Sensitive && got.is_allow() {
                            ensure!(grants.contains(&mode), "sensitive allow without an individual {mode} grant");
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{rows} tier x grant x role x activity x mode rows match"))
}

// ------------------------------------------------------------ 5

pub fn rdp_egress_closure(seed: u64, traces: usize) -> Outcome {
    let base = world::world(seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut attempts, mut releases) = (0usize, 0usize);
    for t in 0..traces {
        let mut b = base.clone();
        let mut sessions: Vec<(String, AccessMode, bool)> = Vec::new();
        let mut requests: Vec<String> = Vec::new();
        let users: Vec<&str> = RESEARCHERS.iter().copied().chain(["hb1"]).collect();
        let n = rng.gen_range(1..=3);
        for netid in users.choose_multiple(&mut rng, n) {
            let mode = *AccessMode::ALL.choose(&mut rng).expect("non-empty");
            let managed = rng.gen_bool(0.5);
            let p = login(&mut b, netid);
            let now = b.now();
            match b.open_session(&p, SENSITIVE, mode, managed, now) {
                Ok((s, _)) => sessions.push((s.id, mode, managed)),
                Err(BrokerError::UnmanagedEndpoint) if mode == AccessMode::Vpn && !managed => {}
                Err(e) => return Err(format!("trace {t}: open failed: {e}")),
            }
        }
        if sessions.is_empty() {
            continue;
        }
        for _ in 0..rng.gen_range(1..20) {
            let (sid, mode, managed) = sessions.choose(&mut rng).expect("non-empty").clone();
            let kind = *[EgressKind::ClipboardIn, EgressKind::ClipboardOut, EgressKind::FileOut].choose(&mut rng).expect("non-empty");
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let r = match kind {
                        EgressKind::ClipboardIn => b.attempt_clipboard(&sid, ClipboardDirection::In),
                        EgressKind::ClipboardOut => b.attempt_clipboard(&sid, ClipboardDirection::Out),
                        EgressKind::FileOut => b.attempt_file_egress(&sid, "results.csv"),
                    };
                    let Ok(d) = r else { continue };
                    attempts += 1;
                    ensure!(
                        d.is_allow() == egress_oracle(mode, managed, kind),
                        "trace {t}: {mode} managed={managed} {kind}: {d:?}"
                    );
                }
                2 => {
                    if let Ok(req) = b.submit_export(&sid, "aggregate table") {
                        requests.push(req.id);
                    }
                }
                _ => {
                    if let Some(req) = requests.choose(&mut rng) {
                        let stored = b.export_request(req).expect("known");
                        let (requester, pending) = (stored.requester.clone(), stored.status == ExportStatus::Pending);
                        let who = *[BROKERS[0], BROKERS[1], requester.as_str(), "u2"].choose(&mut rng).expect("non-empty");
                        let verdict = if rng.gen_bool(0.6) { ExportVerdict::Approve } else { ExportVerdict::Deny };
                        let r = b.adjudicate_export(who, req, verdict, "reviewed");
                        if who == requester && pending {
                            ensure!(matches!(r, Err(BrokerError::SelfAdjudication)), "trace {t}: self adjudication {r:?}");
                        }
                    }
                }
            }
        }
        releases += check_releases(&b).map_err(|e| format!("trace {t}: {e}"))?;
    }
    Ok(format!("{traces} traces, {attempts} egress attempts match the table, {releases} RDP releases all broker-approved"))
}

/// Every allowed egress is non-RDP and every RDP release follows an approval
/// by someone other than the requester. Returns the number of RDP releases.
pub fn check_releases(b: &Broker) -> Result<usize, String> {
    let events = b.ledger().events();
    let mut approvals: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    let mut count = 0;
    for ev in events {
        match ev.action {
            Action::EgressAllow => ensure!(ev.detail("mode") != Some("rdp"), "allowed RDP egress at seq {}", ev.seq),
            Action::ExportAdjudicate if ev.detail("verdict") == Some("approve") => {
                approvals.insert(&ev.object, (&ev.actor, ev.detail("requester").unwrap_or("")));
            }
            Action::Release if ev.detail("mode") == Some("rdp") => {
                count += 1;
                let req = ev.detail("request").unwrap_or("");
                let Some((broker, requester)) = approvals.get(req) else {
                    return Err(format!("release at seq {} has no prior approval", ev.seq));
                };
                ensure!(broker != requester, "release at seq {} approved by its own requester", ev.seq);
                let stored = b.export_request(req).map_err(|e| e.to_string())?;
                ensure!(stored.status == ExportStatus::Approved, "released request {req} is {:?}", stored.status);
            }
            _ => {}
        }
    }
    Ok(count)
}

// ------------------------------------------------------------ 6

#[derive(Debug, Clone, Copy)]
enum ImageOp {
    Submit,
    Vet,
    VetByOutsider,
    Approve,
    ApproveByOutsider,
    Deploy,
    DeployTampered,
    Revoke,
}

const IMAGE_OPS: [ImageOp; 8] = [
    ImageOp::Submit,
    ImageOp::Vet,
    ImageOp::VetByOutsider,
    ImageOp::Approve,
    ImageOp::ApproveByOutsider,
    ImageOp::Deploy,
    ImageOp::DeployTampered,
    ImageOp::Revoke,
];

fn flip(d: &Digest, bit: usize) -> Digest {
    let mut bytes = d.0;
    bytes[bit / 8] ^= 1 << (bit % 8);
    Digest(bytes)
}

fn latest_image(b: &Broker) -> Option<(String, Digest)> {
    b.images().last().map(|i| (i.id.clone(), i.digest))
}

fn apply_image_op(b: &mut Broker, op: ImageOp, n: usize) -> Result<(), String> {
    if let ImageOp::Submit = op {
        let _ = b.submit_image("u1", SENSITIVE, &format!("payload-{n}"), &Source::Zone(ZoneId::Campus));
        return Ok(());
    }
    let Some((img, digest)) = latest_image(b) else { return Ok(()) };
    let _ = match op {
        ImageOp::Submit => unreachable!("handled above"),
        ImageOp::Vet => b.vet_image("vet1", &img, "clean").map(|_| ()),
        ImageOp::VetByOutsider => b.vet_image("u2", &img, "looks fine").map(|_| ()),
        ImageOp::Approve => b.approve_image("appr", &img).map(|_| ()),
        ImageOp::ApproveByOutsider => b.approve_image("u2", &img).map(|_| ()),
        ImageOp::Deploy => b.deploy_image("ops1", &img, SENSITIVE, &digest).map(|_| ()),
        ImageOp::DeployTampered => {
            let r = b.deploy_image("ops1", &img, SENSITIVE, &flip(&digest, n % 256));
            ensure!(r.is_err(), "deploy with a tampered digest succeeded for {img}");
            Ok(())
        }
        ImageOp::Revoke => b.revoke_image("root", &img).map(|_| ()),
    };
    Ok(())
}

/// No deploy without a prior vet and approval of the same image, checked
/// against the ledger and against live state.
fn deploys_sound(b: &Broker) -> Result<(), String> {
    let mut vetted = BTreeSet::new();
    let mut approved = BTreeSet::new();
    for ev in b.ledger().events() {
        match ev.action {
            Action::ImageVet => {
                vetted.insert(ev.object.as_str());
            }
            Action::ImageApprove => {
                approved.insert(ev.object.as_str());
            }
            Action::Deploy => ensure!(
                vetted.contains(ev.object.as_str()) && approved.contains(ev.object.as_str()),
                "deploy of {} at seq {} without prior vet and approval",
                ev.object,
                ev.seq
            ),
            _ => {}
        }
    }
    for img in b.images() {
        if img.state == ImageState::Deployed {
            ensure!(vetted.contains(img.id.as_str()) && approved.contains(img.id.as_str()), "{} deployed unvetted", img.id);
            ensure!(img.vetter.is_some() && img.approver.is_some(), "{} deployed without recorded vetter and approver", img.id);
        }
    }
    for inst in b.instances() {
        let img = b.image(&inst.image).map_err(|e| e.to_string())?;
        ensure!(img.vetter.is_some() && img.approver.is_some(), "instance {} of an unvetted image", inst.id);
    }
    Ok(())
}

fn explore(b: &Broker, depth: usize, max: usize, path: &mut Vec<ImageOp>, paths: &mut usize, deployed: &mut usize) -> Result<(), String> {
    deploys_sound(b).map_err(|e| format!("after {path:?}: {e}"))?;
    *paths += 1;
    if b.instances().next().is_some() {
        *deployed += 1;
    }
    if depth == max {
        return Ok(());
    }
    for op in IMAGE_OPS {
        let mut next = b.clone();
        path.push(op);
        apply_image_op(&mut next, op, *paths).map_err(|e| format!("after {path:?}: {e}"))?;
        explore(&next, depth + 1, max, path, paths, deployed)?;
        path.pop();
    }
    Ok(())
}

pub fn pipeline_soundness(max_len: usize, flips: usize, seed: u64) -> Outcome {
    let base = world::world(seed);
    let (mut paths, mut deployed) = (0, 0);
    explore(&base, 0, max_len, &mut Vec::new(), &mut paths, &mut deployed)?;

    let mut b = base.clone();
    let img = b.submit_image("u1", SENSITIVE, "analysis-env", &Source::Zone(ZoneId::Campus)).map_err(|e| e.to_string())?;
    b.vet_image("vet1", &img.id, "clean").map_err(|e| e.to_string())?;
    b.approve_image("appr", &img.id).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for _ in 0..flips {
        let bad = flip(&img.digest, rng.gen_range(0..256));
        if matches!(b.deploy_image("ops1", &img.id, SENSITIVE, &bad), Err(BrokerError::DigestMismatch(_))) {
            rejected += 1;
        }
    }
    ensure!(rejected == flips, "only {rejected}/{flips} tampered digests rejected");
    ensure!(b.deploy_image("ops1", &img.id, SENSITIVE, &img.digest).is_ok(), "untampered deploy refused");
    Ok(format!("{paths} paths up to length {max_len} ({deployed} with a deployment) sound, {rejected}/{flips} bit flips rejected"))
}

// ------------------------------------------------------------ 7

#[derive(Debug, Default)]
struct DiskModel {
    /// Last known disk token per VM; `None` once destroyed.
    disks: BTreeMap<String, Option<String>>,
    open: Option<(String, String)>,
    /// (vm, retained_until, lost)
    binding: Option<(String, Timestamp, bool)>,
}

impl DiskModel {
    fn destroy(&mut self, vm: &str) {
        self.disks.insert(vm.to_owned(), None);
        if self.open.as_ref().is_some_and(|(_, v)| v == vm) {
            self.open = None;
        }
        if let Some(bd) = self.binding.as_mut().filter(|bd| bd.0 == vm) {
            bd.2 = true;
        }
    }

    /// VM a new or resumed session lands on, if the binding is still good.
    fn usable_binding(&self, now: Timestamp) -> Option<String> {
        self.binding.as_ref().filter(|(_, until, lost)| !lost && now <= *until).map(|b| b.0.clone())
    }
}

pub fn destruction_and_retention(seed: u64, traces: usize) -> Outcome {
    let base = world::world(seed);
    let retention = base.config().retention_days * SECS_PER_DAY;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut dead_reads, mut resumes) = (0usize, 0usize);
    for t in 0..traces {
        let mut b = base.clone();
        let mut m = DiskModel::default();
        for step in 0..rng.gen_range(5..25) {
            let now = b.now();
            let ctx = |what: &str| format!("trace {t} step {step}: {what}");
            match rng.gen_range(0..8) {
                op @ (0 | 1) => {
                    let resume = op == 1;
                    let p = login(&mut b, "u1");
                    let r = if resume {
                        b.resume_session(&p, RESTRICTED, AccessMode::Vpn, true, now)
                    } else {
                        b.open_session(&p, RESTRICTED, AccessMode::Vpn, true, now)
                    };
                    let kept = m.usable_binding(now);
                    match r {
                        Ok((s, _)) => {
                            ensure!(m.open.is_none(), "{}", ctx("second concurrent session"));
                            ensure!(!resume || kept.is_some(), "{}", ctx("resume without a usable binding"));
                            match &kept {
                                Some(vm) => {
                                    ensure!(s.vm == *vm, "{}", ctx(&format!("resumed onto {} not retained {vm}", s.vm)));
                                    resumes += 1;
                                }
                                None => {
                                    if let Some((old, _, false)) = m.binding.clone() {
                                        m.destroy(&old);
                                    }
                                    let fresh = b.read_disk(&s.vm).map_err(|e| ctx(&e.to_string()))?;
                                    m.disks.insert(s.vm.clone(), Some(fresh));
                                }
                            }
                            m.binding = None;
                            m.open = Some((s.id, s.vm));
                        }
                        Err(e) => ensure!(m.open.is_some() || (resume && kept.is_none()), "{}", ctx(&format!("open failed: {e}"))),
                    }
                }
                2 => {
                    if let Some((sid, vm)) = m.open.take() {
                        b.close_session(&sid, now).map_err(|e| ctx(&e.to_string()))?;
                        m.binding = Some((vm, now.plus_secs(retention), false));
                    }
                }
                3 => {
                    let vm = m.open.as_ref().map(|o| o.1.clone()).or_else(|| m.binding.as_ref().map(|bd| bd.0.clone()));
                    if let Some(vm) = vm {
                        let token = format!("state-{t}-{step}");
                        let r = b.write_disk(&vm, &token);
                        let alive = m.disks.get(&vm).is_some_and(Option::is_some);
                        ensure!(r.is_ok() == alive, "{}", ctx(&format!("write to {vm}: {r:?}")));
                        if alive {
                            m.disks.insert(vm, Some(token));
                        }
                    }
                }
                4 => {
                    let to = now.plus_secs(rng.gen_range(0..20 * SECS_PER_DAY));
                    b.advance_to(to);
                }
                5 => {
                    b.expire_retained(now);
                    if let Some((vm, until, lost)) = m.binding.clone() {
                        if until < now {
                            if !lost {
                                m.destroy(&vm);
                            }
                            m.binding = None;
                        }
                    }
                }
                _ => {
                    let known: Vec<String> = m.disks.keys().cloned().collect();
                    if let Some(vm) = known.choose(&mut rng) {
                        let r = b.destroy_vm(vm);
                        let alive = m.disks[vm].is_some();
                        ensure!(r.is_ok() == alive, "{}", ctx(&format!("destroy {vm}: {r:?}")));
                        m.destroy(vm);
                    }
                }
            }
            for (vm, want) in &m.disks {
                let got = b.read_disk(vm).ok();
                ensure!(got == *want, "{}", ctx(&format!("disk of {vm}: engine {got:?}, model {want:?}")));
                if want.is_none() {
                    dead_reads += 1;
                }
            }
        }
    }
    Ok(format!("{traces} traces, {dead_reads} reads of destroyed disks failed, {resumes} resumes kept their disk"))
}

// ------------------------------------------------------------ 8

pub fn prdn_scale_replay(params: ScaleParams) -> Outcome {
    let g = prdn_scale(&params);
    let run = || {
        let mut engine = load(Topology::standard(), &g.directory, config_for(&g.scenario, Overrides::default()))
            .map_err(|e| e.to_string())?;
        let report = run_scenario(&mut engine, &g.scenario);
        ensure!(report.status == ExitStatus::Pass, "scale scenario failed: {:?}", report.diff);
        Ok((engine, report.ledger_export))
    };
    let (engine, first) = run()?;
    let (_, second) = run()?;
    ensure!(first == second, "ledger exports differ between runs");
    let b = engine.broker();
    let period = Period::new(Timestamp(0), b.now());
    let providers = g.directory.users.iter().filter(|u| u.value.netid.starts_with("dp")).count();
    for p in b.projects() {
        let report = b.compliance_report(&p.id, period).map_err(|e| e.to_string())?;
        let want = recount(b.ledger().events(), &p.id, period);
        ensure!(report_counts(&report) == want, "report for {}: {:?} vs recount {want:?}", p.id, report_counts(&report));
    }
    Ok(format!(
        "{providers} data providers, {} projects, {} researchers, {} events, identical exports, reports match recount",
        b.projects().count(),
        params.researchers,
        b.ledger().len()
    ))
}

// ------------------------------------------------------------ 9

/// A ledger of exactly `n` events from a generated workload.
pub fn ledger_of(n: usize, seed: u64) -> Vec<AuditEvent> {
    // roughly ten events per session on top of the directory load
    let params = ScaleParams { seed, sessions: n / 8, ..ScaleParams::default() };
    let g = prdn_scale(&params);
    let mut engine = load(Topology::standard(), &g.directory, config_for(&g.scenario, Overrides::default())).expect("loads");
    let report = run_scenario(&mut engine, &g.scenario);
    assert_eq!(report.status, ExitStatus::Pass, "{:?}", report.diff);
    let events = engine.broker().ledger().events();
    assert!(events.len() >= n, "workload produced only {} events", events.len());
    events[..n].to_vec()
}

fn flip_ascii(s: &mut String, rng: &mut impl Rng) -> bool {
    if s.is_empty() {
        return false;
    }
    let i = rng.gen_range(0..s.len());
    if !s.as_bytes()[i].is_ascii() {
        return false;
    }
    // flipping one of the low seven bits keeps the byte ASCII
    let mut bytes = std::mem::take(s).into_bytes();
    bytes[i] ^= 1 << rng.gen_range(0..7);
    *s = String::from_utf8(bytes).expect("still ASCII at the flipped byte");
    true
}

/// Applies one random single-bit mutation to `ev`. Returns a label.
pub fn mutate(ev: &mut AuditEvent, rng: &mut impl Rng) -> &'static str {
    loop {
        match rng.gen_range(0..8) {
            0 => {
                ev.seq ^= 1 << rng.gen_range(0..64);
                return "seq";
            }
            1 => {
                ev.at.0 ^= 1 << rng.gen_range(0..64);
                return "at";
            }
            2 if flip_ascii(&mut ev.actor, rng) => return "actor",
            3 if flip_ascii(&mut ev.object, rng) => return "object",
            4 if !ev.detail.is_empty() => {
                let key = ev.detail.keys().nth(rng.gen_range(0..ev.detail.len())).expect("in range").clone();
                let mut value = ev.detail.remove(&key).expect("present");
                let mut key2 = key.clone();
                if rng.gen_bool(0.5) && flip_ascii(&mut key2, rng) {
                    ev.detail.insert(key2, value);
                    return "detail-key";
                }
                if !flip_ascii(&mut value, rng) {
                    value.push('\u{1}');
                }
                ev.detail.insert(key, value);
                return "detail-value";
            }
            5 => {
                ev.prev_hash = flip(&ev.prev_hash, rng.gen_range(0..256));
                return "prev-hash";
            }
            6 => {
                ev.this_hash = flip(&ev.this_hash, rng.gen_range(0..256));
                return "this-hash";
            }
            7 => {
                let others = [Action::Grant, Action::Revoke, Action::Close, Action::EgressDeny, Action::Release];
                let current = ev.action;
                ev.action = **others.iter().filter(|a| **a != current).collect::<Vec<_>>().choose(rng).expect("non-empty");
                return "action";
            }
            _ => {}
        }
    }
}

pub fn tamper_evidence(events: &[AuditEvent], mutations: usize, seed: u64) -> Outcome {
    let mut events = events.to_vec();
    let clean = verify_events(&events);
    ensure!(clean.valid, "untouched ledger fails verification at {:?}", clean.first_bad_seq);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = events.len();
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for k in 0..mutations {
        // with enough budget every event is hit; otherwise both ends plus a sample
        let i = match k {
            _ if mutations >= n => k % n,
            0 => 0,
            1 => n - 1,
            _ => rng.gen_range(0..n),
        };
        let original = events[i].clone();
        let label = mutate(&mut events[i], &mut rng);
        if events[i] == original {
            continue;
        }
        let status = verify_events(&events);
        let seq = original.seq;
        ensure!(
            !status.valid && status.first_bad_seq.is_some_and(|bad| bad <= seq),
            "{label} mutation of seq {seq} reported as {status:?}"
        );
        *kinds.entry(label).or_default() += 1;
        events[i] = original;
    }
    Ok(format!("{n}-event ledger, {mutations} single-bit mutations detected at or before their seq ({kinds:?})"))
}
