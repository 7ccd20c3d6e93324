//! Property checks shared by the property tests and the acceptance run.
//! Each returns `Err` with a description of the first disagreement.

use std::collections::{BTreeMap, BTreeSet};

use edgeplane::controlplane::{place_application, required_instances, validate_plan, DeploymentPlan};
use edgeplane::meshsim::{check_compliance, route_flows, FlowSource};
use edgeplane::policy::{batch_evaluate, eligible_domains, is_allowed, RestrictionMode};
use edgeplane::scenario::{Scenario, ScenarioDoc};
use edgeplane::topology::LocalityLevel;

pub const TOL: f64 = 1e-9;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // Negated so that NaN comparisons fail the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Restriction decisions computed straight from the document.
pub fn doc_allows(doc: &ScenarioDoc, ms: &str, domain: &str) -> bool {
    match doc.policies.placement_restriction.iter().find(|r| r.microservice == ms) {
        None => true,
        Some(r) => {
            let listed = r.domains.iter().any(|d| d == domain);
            match r.mode {
                RestrictionMode::Allow => listed,
                RestrictionMode::Deny => !listed,
            }
        }
    }
}

/// Scope membership computed straight from the document.
pub fn doc_in_scope(doc: &ScenarioDoc, anchor: &str, level: LocalityLevel, domain: &str) -> bool {
    let region: BTreeMap<&str, &str> = doc
        .topology
        .domains
        .iter()
        .map(|d| (d.id.as_str(), d.region.as_str()))
        .collect();
    match level {
        LocalityLevel::StrictDomain => anchor == domain,
        LocalityLevel::StrictRegion => region[anchor] == region[domain],
        LocalityLevel::Global => true,
    }
}

pub fn services(doc: &ScenarioDoc) -> Vec<String> {
    doc.application
        .microservices
        .iter()
        .filter(|m| !m.iot)
        .map(|m| m.id.clone())
        .collect()
}

pub fn domains(doc: &ScenarioDoc) -> Vec<String> {
    doc.topology.domains.iter().map(|d| d.id.clone()).collect()
}

pub fn eligible(s: &Scenario, ms: &str, anchor: &str, level: LocalityLevel) -> BTreeSet<String> {
    eligible_domains(&s.policies, ms, Some(anchor), level, &s.graph)
        .unwrap()
        .into_iter()
        .map(|d| d.to_string())
        .collect()
}

/// Eligible domains equal the allowed domains inside the scope.
pub fn eligible_matches_brute_force(doc: &ScenarioDoc) -> Result<(), String> {
    let s = Scenario::from_doc(doc).unwrap();
    for ms in services(doc) {
        for anchor in domains(doc) {
            for level in LocalityLevel::ALL {
                let expected: BTreeSet<String> = domains(doc)
                    .into_iter()
                    .filter(|d| doc_allows(doc, &ms, d) && doc_in_scope(doc, &anchor, level, d))
                    .collect();
                let got = eligible(&s, &ms, &anchor, level);
                ensure!(got == expected, "{ms} from {anchor} at {level:?}: {got:?} vs {expected:?}");
            }
        }
    }
    Ok(())
}

/// A batch of (microservice, domain) queries, drawn from `picks`, evaluates
/// to the same decisions as one query at a time.
pub fn batch_matches_sequential(doc: &ScenarioDoc, picks: &[(u16, u16)]) -> Result<(), String> {
    let s = Scenario::from_doc(doc).unwrap();
    let (ms, ds) = (services(doc), domains(doc));
    let queries: Vec<(String, String)> = picks
        .iter()
        .map(|&(a, b)| (ms[a as usize % ms.len()].clone(), ds[b as usize % ds.len()].clone()))
        .collect();
    let batch = batch_evaluate(&s.policies, &queries).unwrap();
    let sequential: Vec<_> = queries.iter().map(|(m, d)| is_allowed(&s.policies, m, d).unwrap()).collect();
    ensure!(batch == sequential, "batch and sequential decisions differ");
    Ok(())
}

/// The scenario and its plan, or `None` when placement is infeasible.
pub fn placed(doc: &ScenarioDoc) -> Option<(Scenario, DeploymentPlan)> {
    let s = Scenario::from_doc(doc).expect("generated scenarios are well formed");
    match place_application(&s.graph, &s.app, &s.request, &s.policies) {
        Ok(plan) => Some((s, plan)),
        Err(e) if e.is_infeasible() => None,
        Err(e) => panic!("unexpected placement error: {e}"),
    }
}

/// A placed plan passes the validator and its traffic breaches nothing.
/// Returns whether the scenario was feasible.
pub fn compliant_by_construction(doc: &ScenarioDoc) -> Result<bool, String> {
    let Some((s, plan)) = placed(doc) else { return Ok(false) };
    let report = validate_plan(&s.graph, &s.app, &s.policies, &plan);
    ensure!(report.is_compliant(), "{:#?}", report.violations);
    let flows = route_flows(&s.graph, &s.app, &plan, &plan.demand).unwrap();
    let v = check_compliance(&s.graph, &s.policies, &flows);
    ensure!(v.is_empty(), "{v:#?}");
    Ok(true)
}

/// Ingress demand enters in full, and every edge carries exactly the
/// consumer's served rate times the edge ratio.
pub fn flow_is_conserved(doc: &ScenarioDoc) -> Result<(), String> {
    let Some((s, plan)) = placed(doc) else { return Ok(()) };
    let flows = route_flows(&s.graph, &s.app, &plan, &plan.demand).unwrap();
    let mut into: BTreeMap<String, f64> = BTreeMap::new();
    let mut edge: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut ingress: BTreeMap<String, f64> = BTreeMap::new();
    for f in &flows.flows {
        ensure!(f.rps >= 0.0, "negative flow {f:?}");
        *into.entry(f.target_ms.to_string()).or_default() += f.rps;
        match &f.source {
            FlowSource::Ingress { .. } => *ingress.entry(f.target_ms.to_string()).or_default() += f.rps,
            FlowSource::Instance { ms, .. } => {
                *edge.entry((ms.to_string(), f.target_ms.to_string())).or_default() += f.rps
            }
        }
    }
    for ms in s.app.ingress() {
        let demand: f64 = plan.demand.entries().filter(|(_, m, _)| *m == ms).map(|(_, _, r)| r).sum();
        let entered = ingress.get(ms.as_str()).copied().unwrap_or(0.0);
        ensure!(close(entered, demand), "{ms}: {entered} entered, {demand} demanded");
    }
    for e in s.app.edges().iter().filter(|e| !s.app.is_iot(e.from.as_str())) {
        let served = into.get(e.from.as_str()).copied().unwrap_or(0.0);
        let carried = edge.get(&(e.from.to_string(), e.to.to_string())).copied().unwrap_or(0.0);
        ensure!(close(carried, served * e.rate_ratio), "{}→{}: {carried} vs {served}×{}", e.from, e.to, e.rate_ratio);
    }
    Ok(())
}

/// With the plan held fixed, doubling the ingress demand doubles each flow.
pub fn doubling_doubles_every_flow(doc: &ScenarioDoc) -> Result<(), String> {
    let Some((s, plan)) = placed(doc) else { return Ok(()) };
    let once = route_flows(&s.graph, &s.app, &plan, &plan.demand).unwrap();
    let twice = route_flows(&s.graph, &s.app, &plan, &plan.demand.scaled(2.0)).unwrap();
    ensure!(once.flows.len() == twice.flows.len(), "flow count changed");
    for (a, b) in once.flows.iter().zip(&twice.flows) {
        ensure!(
            (&a.source, &a.target_ms, &a.target_node) == (&b.source, &b.target_ms, &b.target_node),
            "flow endpoints changed"
        );
        ensure!(close(b.rps, 2.0 * a.rps), "{} vs 2×{}", b.rps, a.rps);
    }
    Ok(())
}

/// With the plan held fixed, the doubled traffic reaching each scope needs at
/// most twice the instances the scope has.
pub fn doubling_at_most_doubles_scope_instances(doc: &ScenarioDoc) -> Result<(), String> {
    let Some((s, plan)) = placed(doc) else { return Ok(()) };
    let twice = route_flows(&s.graph, &s.app, &plan, &plan.demand.scaled(2.0)).unwrap();
    let mut arriving: BTreeMap<(String, String), f64> = BTreeMap::new();
    for f in &twice.flows {
        let level = s.policies.level(f.source.consumer().map(|m| m.as_str()), f.target_ms.as_str());
        let anchor = s.graph.anchor_for(f.source_domain.as_str(), level).unwrap();
        *arriving.entry((f.target_ms.to_string(), anchor.to_string())).or_default() += f.rps;
    }
    for (ms, allocs) in &plan.mapping.0 {
        let cap = s.app.microservice(ms.as_str()).unwrap().capacity_rps;
        for a in allocs {
            let rps = arriving.get(&(ms.to_string(), a.anchor.to_string())).copied().unwrap_or(0.0);
            ensure!(close(rps, 2.0 * a.demand_rps), "{ms} in {}: {rps} vs 2×{}", a.anchor, a.demand_rps);
            let needed = required_instances(rps, cap);
            ensure!(needed <= 2 * required_instances(a.demand_rps, cap), "{ms} in {}: ceiling grew", a.anchor);
            ensure!(needed <= 2 * a.count(), "{ms} in {}: {needed} > 2×{}", a.anchor, a.count());
        }
    }
    Ok(())
}
