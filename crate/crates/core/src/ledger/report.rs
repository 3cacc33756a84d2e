use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Action, AuditEvent};
use crate::types::Period;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounts {
    pub vpn: u64,
    pub rdp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgressCounts {
    pub allowed: u64,
    pub denied: u64,
}

/// A VM that held an allocation during the period but saw no sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyFlag {
    pub vm: String,
    pub cpu: u32,
    pub ram_gb: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub project: String,
    pub period: Period,
    pub session_counts: SessionCounts,
    pub egress_attempts: EgressCounts,
    pub exception_traversals: u64,
    pub grant_count: u64,
    pub revoke_count: u64,
    pub efficiency_flags: Vec<EfficiencyFlag>,
    /// Stewards registered as affiliates rather than members.
    pub affiliate_stewards: Vec<String>,
}

fn is_for(ev: &AuditEvent, project: &str) -> bool {
    ev.detail("project") == Some(project)
}

impl ComplianceReport {
    /// Computes the report from ledger events alone.
    pub fn from_events(events: &[AuditEvent], project: &str, period: Period) -> Self {
        let mut report = ComplianceReport {
            project: project.to_owned(),
            period,
            session_counts: SessionCounts::default(),
            egress_attempts: EgressCounts::default(),
            exception_traversals: 0,
            grant_count: 0,
            revoke_count: 0,
            efficiency_flags: Vec::new(),
            affiliate_stewards: Vec::new(),
        };

        // vm -> (cpu, ram, destroyed_at)
        let mut vms: BTreeMap<&str, (u32, u32, Option<u64>)> = BTreeMap::new();
        let mut sessioned: BTreeSet<&str> = BTreeSet::new();
        let mut affiliates: BTreeSet<&str> = BTreeSet::new();
        let mut stewards: Vec<&str> = Vec::new();

        for ev in events {
            if ev.action == Action::UserRegister && ev.detail("affiliation") == Some("affiliate") {
                affiliates.insert(&ev.object);
            }
            if ev.action == Action::ProjectRegister && ev.object == project {
                stewards = ev.detail("stewards").map_or_else(Vec::new, |s| s.split(',').collect());
            }
            if !is_for(ev, project) {
                continue;
            }
            let num = |key: &str| ev.detail(key).and_then(|v| v.parse::<u32>().ok()).unwrap_or(0);
            if ev.at <= period.to {
                match ev.action {
                    Action::Provision => {
                        vms.insert(&ev.object, (num("cpu"), num("ram_gb"), None));
                    }
                    Action::Resize => {
                        if let Some(v) = vms.get_mut(ev.object.as_str()) {
                            v.0 = num("cpu");
                            v.1 = num("ram_gb");
                        }
                    }
                    Action::Destroy => {
                        if let Some(v) = vms.get_mut(ev.object.as_str()) {
                            v.2 = Some(ev.at.0);
                        }
                    }
                    _ => {}
                }
            }
            if !period.contains(ev.at) {
                continue;
            }
            let noop = ev.detail("noop") == Some("true");
            match ev.action {
                Action::Map => {
                    match ev.detail("mode") {
                        Some("vpn") => report.session_counts.vpn += 1,
                        Some("rdp") => report.session_counts.rdp += 1,
                        _ => {}
                    }
                    if let Some(vm) = ev.detail("vm") {
                        sessioned.insert(vm);
                    }
                }
                Action::EgressAllow => report.egress_attempts.allowed += 1,
                Action::EgressDeny => report.egress_attempts.denied += 1,
                Action::Connect if ev.detail("via") == Some("exception") => report.exception_traversals += 1,
                Action::Grant if !noop => report.grant_count += 1,
                Action::Revoke if !noop => report.revoke_count += 1,
                _ => {}
            }
        }

        report.efficiency_flags = vms
            .into_iter()
            .filter(|(vm, (_, _, destroyed))| {
                destroyed.map_or(true, |d| d >= period.from.0) && !sessioned.contains(vm)
            })
            .map(|(vm, (cpu, ram_gb, _))| EfficiencyFlag { vm: vm.to_owned(), cpu, ram_gb })
            .collect();
        let mut aff: Vec<String> =
            stewards.into_iter().filter(|s| affiliates.contains(s)).map(str::to_owned).collect();
        aff.sort();
        report.affiliate_stewards = aff;
        report
    }
}
