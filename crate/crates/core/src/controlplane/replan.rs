//! Scaling and migration in response to observer alerts.

use std::collections::BTreeMap;

use log::{debug, info};

use super::placement::{Planner, Served};
use super::{
    generate_routes, select_nodes, Alert, AlertKind, ControlError, DeploymentPlan,
    InfeasibleCause, PlacementMapping, ScopeAllocation,
};
use crate::appmodel::{validate_demand, ApplicationDag};
use crate::ids::{DomainId, MsId, NodeId};
use crate::policy::{eligible_in_anchor, PolicySet};
use crate::topology::{Anchor, CapacityLedger, InfrastructureGraph, Resources, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSettings {
    /// Node CPU utilization above which an overload alert is raised; also
    /// the per-instance target used when scaling out an overloaded service.
    pub overload_threshold: f64,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            overload_threshold: 0.8,
        }
    }
}

/// Produces the next plan revision for an alert.
///
/// Demand changes rescale every affected scope: new instances go through
/// first-fit, surplus instances are removed newest first. A drained node's
/// instances move to other eligible nodes, same domain first. An overload
/// resizes the services on that node to run at the overload threshold. When
/// the incremental adjustment cannot be made, the whole application is
/// placed again from scratch before giving up.
pub fn handle_alert(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    policies: &PolicySet,
    plan: &DeploymentPlan,
    alert: &Alert,
    settings: &ControlSettings,
) -> Result<DeploymentPlan, ControlError> {
    if plan.app != *app.id() {
        return Err(ControlError::PlanMismatch(format!(
            "plan is for `{}`, application is `{}`",
            plan.app,
            app.id()
        )));
    }
    let mut demand = plan.demand.clone();
    let mut drained = plan.drained.clone();
    let mut headroom = plan.headroom.clone();
    let mut drain = None;

    match &alert.kind {
        AlertKind::DemandChange { demand: next } => {
            demand = validate_demand(app, graph, next.clone())?.demand;
        }
        AlertKind::NodeDrain { node } => {
            if graph.node(node.as_str()).is_none() {
                return Err(TopologyError::UnknownNode(node.to_string()).into());
            }
            drained.insert(node.clone());
            drain = Some(node.clone());
        }
        AlertKind::Overload { node, .. } => {
            for (ms, _, _) in plan.mapping.triples().into_iter().filter(|(_, n, _)| n == node) {
                headroom.insert(ms, settings.overload_threshold);
            }
        }
    }

    let planner = Planner::new(graph, app, policies, &demand, &drained, &headroom);
    let incremental = match &drain {
        Some(node) => migrate(&planner, plan.mapping.clone(), node).and_then(|m| reconcile(&planner, m)),
        None => reconcile(&planner, plan.mapping.clone()),
    };
    let mapping = match incremental {
        Ok(m) => m,
        Err(e) => {
            info!("incremental replan failed ({e}); placing from scratch");
            planner.place()?
        }
    };
    let routes = generate_routes(graph, app, &mapping, policies, &demand)?;
    Ok(DeploymentPlan {
        app: plan.app.clone(),
        revision: plan.revision + 1,
        demand,
        drained,
        headroom,
        mapping,
        routes,
    })
}

fn remove_newest(alloc: &mut ScopeAllocation, mut surplus: u32, ledger: &mut CapacityLedger, req: Resources) {
    while surplus > 0 {
        let Some(last) = alloc.instances.last_mut() else { break };
        let k = last.count.min(surplus);
        last.count -= k;
        surplus -= k;
        ledger.release(last.node.as_str(), req.times(k));
        if last.count == 0 {
            alloc.instances.pop();
        }
    }
}

/// Adjusts instance counts of every scope to the current demand, keeping
/// existing instances where they are.
pub(crate) fn reconcile(planner: &Planner<'_>, mut mapping: PlacementMapping) -> Result<PlacementMapping, ControlError> {
    let (mut ledger, consistent) = planner.ledger_for(&mapping);
    if !consistent {
        return Err(ControlError::PlanMismatch(
            "current mapping overcommits or uses drained nodes".to_owned(),
        ));
    }
    let mut served = Served::new();
    for ms in &planner.order {
        let req = planner.resources(ms.as_str());
        let targets: BTreeMap<Anchor, (f64, u32)> = planner
            .scope_demand(ms, &served)
            .into_iter()
            .map(|(a, rps)| {
                let n = planner.required(ms.as_str(), rps);
                (a, (rps, n))
            })
            .collect();
        if unchanged(planner, ms, &mapping, &targets, &served)? {
            let load = planner.serve(ms, &mapping, &served)?;
            served.insert(ms.clone(), load);
            continue;
        }
        let mut current: BTreeMap<Anchor, ScopeAllocation> = mapping
            .0
            .remove(ms)
            .unwrap_or_default()
            .into_iter()
            .map(|a| (a.anchor.clone(), a))
            .collect();

        // Shrink first so that growth elsewhere can reuse the capacity.
        for (anchor, alloc) in current.iter_mut() {
            let want = targets.get(anchor).map_or(0, |t| t.1);
            let have = alloc.count();
            if have > want {
                debug!("scale in {ms} in {anchor}: {have} -> {want}");
                remove_newest(alloc, have - want, &mut ledger, req);
            }
        }
        current.retain(|a, _| targets.contains_key(a));

        for (anchor, (rps, want)) in &targets {
            let alloc = current.entry(anchor.clone()).or_insert_with(|| ScopeAllocation {
                anchor: anchor.clone(),
                demand_rps: *rps,
                instances: Vec::new(),
            });
            alloc.demand_rps = *rps;
            let have = alloc.count();
            if *want > have {
                debug!("scale out {ms} in {anchor}: {have} -> {want}");
                let domains = eligible_in_anchor(planner.policies, ms.as_str(), anchor, planner.graph)?;
                if domains.is_empty() {
                    return Err(planner.infeasible(ms, anchor, InfeasibleCause::PolicyEmptyScope, want - have, &mapping));
                }
                match select_nodes(planner.graph, &mut ledger, &domains, req, want - have) {
                    Ok(picks) => {
                        for (node, k) in picks {
                            alloc.push(node, k);
                        }
                    }
                    Err(ControlError::InsufficientCapacity { requested, placed }) => {
                        return Err(planner.infeasible(
                            ms,
                            anchor,
                            InfeasibleCause::InsufficientCapacity,
                            requested - placed,
                            &mapping,
                        ))
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        mapping.0.insert(ms.clone(), current.into_values().collect());
        planner.balance(ms, &mut mapping, &mut ledger, &served)?;
        let load = planner.serve(ms, &mapping, &served)?;
        served.insert(ms.clone(), load);
    }
    Ok(mapping)
}

/// True when `ms` already serves exactly the scopes and rates it is asked
/// for with at least the required instances, none of them overloaded. Such
/// a microservice keeps its placement, including any instances added for
/// balancing.
fn unchanged(
    planner: &Planner<'_>,
    ms: &MsId,
    mapping: &PlacementMapping,
    targets: &BTreeMap<Anchor, (f64, u32)>,
    served: &Served,
) -> Result<bool, ControlError> {
    let allocs = mapping.scopes(ms.as_str());
    let same = allocs.len() == targets.len()
        && allocs.iter().all(|a| {
            targets.get(&a.anchor).is_some_and(|(rps, want)| {
                a.count() >= *want && (a.demand_rps - rps).abs() <= 1e-9 * rps.abs().max(1.0)
            })
        });
    Ok(same && planner.overloaded(ms, mapping, served)?.is_none())
}

/// Moves every instance off `node`, preferring nodes in the same domain and
/// then the rest of the instance's scope.
pub(crate) fn migrate(
    planner: &Planner<'_>,
    mut mapping: PlacementMapping,
    node: &NodeId,
) -> Result<PlacementMapping, ControlError> {
    let (mut ledger, _) = planner.ledger_for(&mapping);
    let home = planner.graph.domain_of_node(node.as_str())?.clone();
    for ms in &planner.order {
        let req = planner.resources(ms.as_str());
        let Some(allocs) = mapping.0.get(ms).cloned() else { continue };
        let mut updated = Vec::with_capacity(allocs.len());
        for mut alloc in allocs {
            let moved: u32 = alloc
                .instances
                .iter()
                .filter(|b| b.node == *node)
                .map(|b| b.count)
                .sum();
            alloc.instances.retain(|b| b.node != *node);
            if moved > 0 {
                let domains = eligible_in_anchor(planner.policies, ms.as_str(), &alloc.anchor, planner.graph)?;
                let (same, rest): (Vec<DomainId>, Vec<DomainId>) =
                    domains.into_iter().partition(|d| *d == home);
                let picks = select_preferring(planner, &mut ledger, &same, &rest, req, moved)
                    .map_err(|shortfall| {
                        planner.infeasible(ms, &alloc.anchor, InfeasibleCause::InsufficientCapacity, shortfall, &mapping)
                    })?;
                debug!("migrated {moved} {ms} instance(s) off {node}: {picks:?}");
                for (n, k) in picks {
                    alloc.push(n, k);
                }
            }
            updated.push(alloc);
        }
        mapping.0.insert(ms.clone(), updated);
    }
    Ok(mapping)
}

fn select_preferring(
    planner: &Planner<'_>,
    ledger: &mut CapacityLedger,
    preferred: &[DomainId],
    rest: &[DomainId],
    req: Resources,
    n: u32,
) -> Result<Vec<(NodeId, u32)>, u32> {
    let in_home = match select_nodes(planner.graph, ledger, preferred, req, n) {
        Ok(p) => return Ok(p),
        Err(ControlError::InsufficientCapacity { placed, .. }) => placed,
        Err(_) => 0,
    };
    let mut picks = if in_home > 0 {
        select_nodes(planner.graph, ledger, preferred, req, in_home).map_err(|_| n)?
    } else {
        Vec::new()
    };
    match select_nodes(planner.graph, ledger, rest, req, n - in_home) {
        Ok(more) => {
            picks.extend(more);
            Ok(picks)
        }
        Err(ControlError::InsufficientCapacity { requested, placed }) => {
            for (node, k) in &picks {
                ledger.release(node.as_str(), req.times(*k));
            }
            Err(requested - placed)
        }
        Err(_) => Err(n - in_home),
    }
}

/// Owns the current plan and applies alerts one at a time.
#[derive(Debug, Clone)]
pub struct ControlPlane {
    graph: InfrastructureGraph,
    app: ApplicationDag,
    policies: PolicySet,
    settings: ControlSettings,
    plan: DeploymentPlan,
}

impl ControlPlane {
    pub fn new(
        graph: InfrastructureGraph,
        app: ApplicationDag,
        policies: PolicySet,
        settings: ControlSettings,
        plan: DeploymentPlan,
    ) -> Self {
        Self {
            graph,
            app,
            policies,
            settings,
            plan,
        }
    }

    pub fn plan(&self) -> &DeploymentPlan {
        &self.plan
    }

    pub fn graph(&self) -> &InfrastructureGraph {
        &self.graph
    }

    pub fn app(&self) -> &ApplicationDag {
        &self.app
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn settings(&self) -> &ControlSettings {
        &self.settings
    }

    /// Applies an alert. On error the current plan is kept.
    pub fn handle(&mut self, alert: &Alert) -> Result<&DeploymentPlan, ControlError> {
        let next = handle_alert(&self.graph, &self.app, &self.policies, &self.plan, alert, &self.settings)?;
        self.plan = next;
        Ok(&self.plan)
    }

    /// Microservices with instances on `node`.
    pub fn hosted_on(&self, node: &str) -> Vec<MsId> {
        let mut out: Vec<MsId> = self
            .plan
            .mapping
            .triples()
            .into_iter()
            .filter(|(_, n, _)| n == node)
            .map(|(m, _, _)| m)
            .collect();
        out.dedup();
        out
    }
}
