//! Plan compliance checker.
//!
//! Everything here is re-derived from raw policy data and raw topology
//! fields. It deliberately does not call the policy evaluator or the scope
//! helpers the placement code uses, so a bug there cannot hide itself.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DeploymentPlan;
use crate::appmodel::ApplicationDag;
use crate::ids::{DomainId, MsId, NodeId};
use crate::policy::{PolicySet, RestrictionMode};
use crate::topology::{Anchor, InfrastructureGraph, LocalityLevel};

const RATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    UnknownReference,
    Restriction,
    ScopeMembership,
    InvalidCount,
    DrainedNode,
    Capacity,
    Throughput,
    RouteLocality,
    RouteTarget,
    EmptyRoute,
    MissingRoute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub violations: Vec<Violation>,
}

impl ComplianceReport {
    pub fn is_compliant(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, subject: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            subject: subject.into(),
            detail: detail.into(),
        });
    }
}

fn node_domain<'g>(graph: &'g InfrastructureGraph, node: &str) -> Option<&'g DomainId> {
    graph.node(node).map(|n| &n.domain_id)
}

fn same_region(graph: &InfrastructureGraph, a: &str, b: &str) -> bool {
    match (graph.domain(a), graph.domain(b)) {
        (Some(x), Some(y)) => x.region_id == y.region_id,
        _ => false,
    }
}

fn within(graph: &InfrastructureGraph, from: &str, level: LocalityLevel, to: &str) -> bool {
    match level {
        LocalityLevel::StrictDomain => from == to,
        LocalityLevel::StrictRegion => same_region(graph, from, to),
        LocalityLevel::Global => graph.domain(to).is_some(),
    }
}

fn inside_anchor(graph: &InfrastructureGraph, anchor: &Anchor, domain: &str) -> bool {
    match anchor {
        Anchor::Domain(d) => d.as_str() == domain,
        Anchor::Region(r) => graph.domain(domain).is_some_and(|d| d.region_id == *r),
        Anchor::Global => graph.domain(domain).is_some(),
    }
}

fn restriction_permits(policies: &PolicySet, ms: &str, domain: &DomainId) -> bool {
    match policies.restrictions().get(ms) {
        None => true,
        Some(r) => match r.mode {
            RestrictionMode::Allow => r.domains.contains(domain),
            RestrictionMode::Deny => !r.domains.contains(domain),
        },
    }
}

fn raw_level(policies: &PolicySet, consumer: Option<&MsId>, target: &MsId) -> LocalityLevel {
    let listed = match consumer {
        None => policies.iot_rules().get(target).copied(),
        Some(c) => policies.ms_rules().get(&(c.clone(), target.clone())).copied(),
    };
    listed.unwrap_or(policies.default_locality())
}

/// Checks placements, capacities, throughput and routes of a plan. The
/// report is empty exactly when the plan is compliant.
pub fn validate_plan(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    policies: &PolicySet,
    plan: &DeploymentPlan,
) -> ComplianceReport {
    let mut report = ComplianceReport::default();
    if plan.app != *app.id() {
        report.push(
            ViolationKind::UnknownReference,
            plan.app.to_string(),
            format!("plan is for `{}`, application is `{}`", plan.app, app.id()),
        );
    }

    // Placements.
    let mut hosted: BTreeMap<(&MsId, &NodeId), u64> = BTreeMap::new();
    let mut node_use: BTreeMap<&NodeId, (u64, u64)> = BTreeMap::new();
    for (ms, allocs) in &plan.mapping.0 {
        let Some(spec) = app.microservice(ms.as_str()).filter(|m| !m.placed_on_iot) else {
            report.push(
                ViolationKind::UnknownReference,
                ms.to_string(),
                "mapping names a microservice that is not deployable",
            );
            continue;
        };
        for alloc in allocs {
            let mut scope_capacity = 0.0;
            for batch in &alloc.instances {
                let subject = format!("{ms}@{}", batch.node);
                let Some(domain) = node_domain(graph, batch.node.as_str()) else {
                    report.push(ViolationKind::UnknownReference, subject, "unknown node");
                    continue;
                };
                if batch.count == 0 {
                    report.push(ViolationKind::InvalidCount, subject.clone(), "zero instances");
                }
                if plan.drained.contains(&batch.node) {
                    report.push(ViolationKind::DrainedNode, subject.clone(), "node is drained");
                }
                if !restriction_permits(policies, ms.as_str(), domain) {
                    report.push(
                        ViolationKind::Restriction,
                        subject.clone(),
                        format!("{ms} may not be placed in {domain} (placement restriction)"),
                    );
                }
                if !inside_anchor(graph, &alloc.anchor, domain.as_str()) {
                    report.push(
                        ViolationKind::ScopeMembership,
                        subject.clone(),
                        format!("{domain} is outside {}", alloc.anchor),
                    );
                }
                *hosted.entry((ms, &batch.node)).or_insert(0) += u64::from(batch.count);
                let u = node_use.entry(&batch.node).or_insert((0, 0));
                u.0 += spec.resources.cpu_m * u64::from(batch.count);
                u.1 += spec.resources.mem_mi * u64::from(batch.count);
                scope_capacity += f64::from(batch.count) * spec.capacity_rps;
            }
            if scope_capacity + RATE_EPS < alloc.demand_rps {
                report.push(
                    ViolationKind::Throughput,
                    format!("{ms}@{}", alloc.anchor),
                    format!("{scope_capacity} rps capacity < {} rps demand", alloc.demand_rps),
                );
            }
        }
    }

    for (node, (cpu, mem)) in &node_use {
        if let Some(n) = graph.node(node.as_str()) {
            if *cpu > n.capacity.cpu_m || *mem > n.capacity.mem_mi {
                report.push(
                    ViolationKind::Capacity,
                    node.to_string(),
                    format!(
                        "requests {cpu}m/{mem}Mi exceed {}m/{}Mi",
                        n.capacity.cpu_m, n.capacity.mem_mi
                    ),
                );
            }
        }
    }

    // Ingress throughput, recomputed from the raw demand map.
    for ms in app.ingress() {
        let Some(spec) = app.microservice(ms.as_str()) else { continue };
        let level = raw_level(policies, None, ms);
        let mut by_scope: BTreeMap<Anchor, f64> = BTreeMap::new();
        for (domain, per_ms) in &plan.demand.0 {
            let Some(&rps) = per_ms.get(ms) else { continue };
            let Some(d) = graph.domain(domain.as_str()) else {
                report.push(ViolationKind::UnknownReference, domain.to_string(), "unknown demand domain");
                continue;
            };
            let key = match level {
                LocalityLevel::StrictDomain => Anchor::Domain(d.id.clone()),
                LocalityLevel::StrictRegion => Anchor::Region(d.region_id.clone()),
                LocalityLevel::Global => Anchor::Global,
            };
            *by_scope.entry(key).or_insert(0.0) += rps;
        }
        for (anchor, rps) in by_scope {
            let capacity: f64 = plan
                .mapping
                .scopes(ms.as_str())
                .iter()
                .filter(|a| a.anchor == anchor)
                .flat_map(|a| a.instances.iter())
                .map(|b| f64::from(b.count) * spec.capacity_rps)
                .sum();
            if capacity + RATE_EPS < rps {
                report.push(
                    ViolationKind::Throughput,
                    format!("{ms}@{anchor}"),
                    format!("{capacity} rps capacity < {rps} rps ingress demand"),
                );
            }
        }
    }

    // Routes.
    for rule in &plan.routes.rules {
        let subject = format!("{}:{}→{}", rule.domain, rule.source_label(), rule.target);
        if graph.domain(rule.domain.as_str()).is_none()
            || !app.contains(rule.target.as_str())
            || rule.consumer.as_ref().is_some_and(|c| !app.contains(c.as_str()))
        {
            report.push(ViolationKind::UnknownReference, subject, "rule names unknown entities");
            continue;
        }
        let level = raw_level(policies, rule.consumer.as_ref(), &rule.target);
        if rule.level != level {
            report.push(
                ViolationKind::RouteLocality,
                subject.clone(),
                format!("rule declares {} but policy requires {level}", rule.level),
            );
        }
        if rule.destinations.is_empty() {
            report.push(ViolationKind::EmptyRoute, subject.clone(), "no destinations");
        }
        for dest in &rule.destinations {
            let Some(domain) = node_domain(graph, dest.node.as_str()) else {
                report.push(ViolationKind::UnknownReference, subject.clone(), format!("unknown node {}", dest.node));
                continue;
            };
            if !within(graph, rule.domain.as_str(), level, domain.as_str()) {
                report.push(
                    ViolationKind::RouteLocality,
                    subject.clone(),
                    format!("{} in {domain} is outside {level} of {}", dest.node, rule.domain),
                );
            }
            let count = hosted.get(&(&rule.target, &dest.node)).copied().unwrap_or(0);
            if count == 0 || u64::from(dest.weight) != count {
                report.push(
                    ViolationKind::RouteTarget,
                    subject.clone(),
                    format!(
                        "{} hosts {count} {} instance(s) but has weight {}",
                        dest.node, rule.target, dest.weight
                    ),
                );
            }
        }
    }

    // Every flow the plan implies needs a rule.
    for (domain, ms, rps) in plan.demand.entries() {
        if rps > 0.0 && plan.routes.find(domain.as_str(), None, ms.as_str()).is_none() {
            report.push(
                ViolationKind::MissingRoute,
                format!("{domain}:ingress→{ms}"),
                "ingress traffic has no rule",
            );
        }
    }
    for ms in plan.mapping.0.keys() {
        let domains: BTreeSet<&DomainId> = hosted
            .keys()
            .filter(|(m, _)| *m == ms)
            .filter_map(|(_, n)| node_domain(graph, n.as_str()))
            .collect();
        for edge in app.succs(ms.as_str()).filter(|e| e.rate_ratio > 0.0) {
            for d in &domains {
                if plan
                    .routes
                    .find(d.as_str(), Some(ms.as_str()), edge.to.as_str())
                    .is_none()
                {
                    report.push(
                        ViolationKind::MissingRoute,
                        format!("{d}:{ms}→{}", edge.to),
                        "consumer instances have no rule",
                    );
                }
            }
        }
    }

    report
}
