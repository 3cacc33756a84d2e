//! Synthetic directories and scenarios at research-network scale.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::load::{DirectorySpec, Located, ProjectEntry, Scenario, UserEntry};
use super::step::{Op, Step};
use crate::directory::Affiliation;
use crate::egress::{ClipboardDirection, ExportVerdict};
use crate::policy::DataClassification;
use crate::types::{AccessMode, SECS_PER_DAY};

pub const ADMIN: &str = "root";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleParams {
    pub seed: u64,
    /// Projects stewarded by an external data provider.
    pub data_providers: usize,
    pub projects: usize,
    pub researchers: usize,
    pub sessions: usize,
    pub honest_brokers: usize,
}

impl Default for ScaleParams {
    fn default() -> Self {
        ScaleParams { seed: 1, data_providers: 75, projects: 125, researchers: 200, sessions: 600, honest_brokers: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub directory: DirectorySpec,
    pub scenario: Scenario,
}

pub fn researcher(i: usize) -> String {
    format!("r{i:03}")
}

pub fn project_id(i: usize) -> String {
    format!("p{i:03}")
}

fn factor(netid: &str) -> String {
    format!("{netid}-otp")
}

fn user(netid: &str, affiliation: Affiliation, sponsor: Option<&str>) -> Located<UserEntry> {
    Located::bare(UserEntry {
        netid: netid.to_owned(),
        affiliation,
        sponsor: sponsor.map(str::to_owned),
        mfa: Some(factor(netid)),
        roles: Vec::new(),
        active: true,
    })
}

/// Builds a directory and a session-heavy scenario. The scenario has no
/// expectations beyond "no step fails"; every step is legal by construction.
pub fn prdn_scale(p: &ScaleParams) -> Generated {
    assert!(p.projects >= p.data_providers && p.researchers > 0 && p.honest_brokers > 0);
    let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
    let mut dir = DirectorySpec { file: "generated-directory".into(), admins: vec![ADMIN.into()], ..Default::default() };

    dir.users.push(user(ADMIN, Affiliation::Member, None));
    let researchers: Vec<String> = (1..=p.researchers).map(researcher).collect();
    for (i, r) in researchers.iter().enumerate() {
        // every tenth researcher is an external affiliate sponsored by the first
        if i % 10 == 9 {
            dir.users.push(user(r, Affiliation::Affiliate, Some(&researchers[0])));
        } else {
            dir.users.push(user(r, Affiliation::Member, None));
        }
    }
    let brokers: Vec<String> = (1..=p.honest_brokers).map(|i| format!("hb{i:02}")).collect();
    for b in &brokers {
        dir.users.push(user(b, Affiliation::Member, None));
    }

    // (netid, mode) grantees per project; empty for public projects
    let mut grantees: BTreeMap<String, Vec<(String, AccessMode)>> = BTreeMap::new();
    for i in 1..=p.projects {
        let id = project_id(i);
        let provider = i <= p.data_providers;
        let steward = if provider {
            let s = format!("dp{i:03}");
            dir.users.push(user(&s, Affiliation::Member, None));
            s
        } else {
            researchers[rng.gen_range(0..researchers.len())].clone()
        };
        let classification = match (provider, i % 3) {
            (true, 0) | (true, 1) => DataClassification::Sensitive,
            (true, _) | (false, 0) | (false, 1) => DataClassification::Restricted,
            (false, _) => DataClassification::Public,
        };
        // the jumpbox only admits to the PRDN subnet, so RDP projects live there
        let prdn = classification == DataClassification::Sensitive
            || (classification == DataClassification::Restricted && rng.gen_bool(0.5));
        let mut entry = ProjectEntry {
            id: id.clone(),
            classification,
            stewards: vec![steward],
            role_rules: Vec::new(),
            zone: Some(if prdn { "PRDNSubnet" } else { "ProtectedVRF" }.into()),
            retention_days: None,
            honest_brokers: brokers.clone(),
            approvers: Vec::new(),
            vpn: Vec::new(),
            rdp: Vec::new(),
        };
        let mut list = Vec::new();
        if classification != DataClassification::Public {
            let n = rng.gen_range(2..=5);
            for r in researchers.choose_multiple(&mut rng, n) {
                let mode = if prdn && rng.gen_bool(0.8) {
                    AccessMode::Rdp
                } else {
                    AccessMode::Vpn
                };
                match mode {
                    AccessMode::Rdp => entry.rdp.push(r.clone()),
                    AccessMode::Vpn => entry.vpn.push(r.clone()),
                }
                list.push((r.clone(), mode));
            }
        }
        grantees.insert(id, list);
        dir.projects.push(Located::bare(entry));
    }

    let retention = crate::broker::DEFAULT_RETENTION_DAYS * SECS_PER_DAY;
    let start = 1_000_000u64;
    let mut now = start;
    let mut steps = Vec::new();
    let mut last_close: BTreeMap<(String, String), u64> = BTreeMap::new();
    let project_ids: Vec<String> = grantees.keys().cloned().collect();

    for i in 0..p.sessions {
        if i > 0 && i % 50 == 0 {
            now += SECS_PER_DAY;
            steps.push(Step::new(Op::Expire {}).at(now));
        }
        let project = project_ids.choose(&mut rng).expect("projects exist").clone();
        let (netid, mode) = match grantees[&project].choose(&mut rng) {
            Some(g) => g.clone(),
            None => (researchers.choose(&mut rng).expect("researchers exist").clone(), AccessMode::Vpn),
        };
        let key = (netid.clone(), project.clone());
        let resume = last_close.get(&key).is_some_and(|&t| now - t < retention - SECS_PER_DAY) && rng.gen_bool(0.5);
        let managed = mode == AccessMode::Vpn || rng.gen_bool(0.5);
        let alias = format!("g{i}");
        now += rng.gen_range(30..600);
        let op = if resume {
            Op::ResumeSession { netid: netid.clone(), project: project.clone(), mode, managed, mfa: None, issuer: None, subject: None }
        } else {
            Op::OpenSession { netid: netid.clone(), project: project.clone(), mode, managed, mfa: None, issuer: None, subject: None }
        };
        steps.push(Step::new(op).at(now).bound(&alias));

        for _ in 0..rng.gen_range(0..3) {
            now += rng.gen_range(10..300);
            let op = match rng.gen_range(0..3) {
                0 => Op::Clipboard { session: alias.clone(), direction: ClipboardDirection::Out },
                1 => Op::Clipboard { session: alias.clone(), direction: ClipboardDirection::In },
                _ => Op::FileEgress { session: alias.clone(), object: format!("out-{i}.csv") },
            };
            steps.push(Step::new(op).at(now));
        }
        if rng.gen_bool(0.2) {
            now += rng.gen_range(10..300);
            let req = format!("{alias}-x");
            steps.push(Step::new(Op::ExportSubmit { session: alias.clone(), payload: format!("table-{i}") }).at(now).bound(&req));
            let broker = brokers.iter().find(|b| **b != netid).expect("a broker other than the requester").clone();
            let verdict = if rng.gen_bool(0.7) { ExportVerdict::Approve } else { ExportVerdict::Deny };
            steps.push(Step::new(Op::ExportAdjudicate { broker, request: req, verdict, rationale: "reviewed".into() }).at(now + 5));
        }
        now += rng.gen_range(600..7200);
        steps.push(Step::new(Op::CloseSession { session: alias }).at(now));
        last_close.insert(key, now);

        // occasional revocation; the pair is never used again
        if rng.gen_bool(0.02) {
            if let Some(list) = grantees.get_mut(&project) {
                if let Some(pos) = list.iter().position(|(n, m)| *n == netid && *m == mode) {
                    list.remove(pos);
                    let steward = dir.projects.iter().find(|e| e.value.id == project).expect("known").value.stewards[0].clone();
                    steps.push(Step::new(Op::Revoke { actor: steward, project: project.clone(), netid, mode }).at(now + 1));
                }
            }
        }
    }

    let scenario = Scenario {
        name: format!("prdn-scale-{}", p.seed),
        seed: Some(p.seed),
        clock: start,
        retention_days: None,
        steps: steps.into_iter().map(Located::bare).collect(),
    };
    Generated { directory: dir, scenario }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::Topology;
    use crate::scenario::{config_for, load, run_scenario, ExitStatus, Overrides};

    #[test]
    fn small_scale_runs_clean() {
        let g = prdn_scale(&ScaleParams { seed: 3, data_providers: 6, projects: 10, researchers: 20, sessions: 60, honest_brokers: 2 });
        let mut engine = load(Topology::standard(), &g.directory, config_for(&g.scenario, Overrides::default())).unwrap();
        let report = run_scenario(&mut engine, &g.scenario);
        assert_eq!(report.status, ExitStatus::Pass, "{:?}", report.diff);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = ScaleParams { sessions: 40, ..ScaleParams::default() };
        assert_eq!(prdn_scale(&p).scenario, prdn_scale(&p).scenario);
    }
}
