//! Policy-integrated placement.
//!
//! Microservices are placed one at a time starting from the ingress
//! microservices. The next microservice always comes from the frontier (all
//! predecessors placed), strictest locality first. For each microservice the
//! demand arriving from its already-placed consumers is grouped by the
//! locality scope it must stay in, sized with [`required_instances`], and
//! packed onto nodes of the eligible domains with [`select_nodes`].
//!
//! Sizing each scope on its own is not quite enough: a route spreads a
//! source's traffic over every instance inside the source's scope, so a
//! node that lies in nested scopes (a domain scope and the region or global
//! scope around it) receives traffic sized for both. Each microservice is
//! therefore balanced after its scopes are placed, adding instances until
//! none is routed more than its rated rate.
//!
//! If the first-fit pass gets stuck, a bounded backtracking search
//! over the same decisions (which node receives how many instances) is tried
//! before reporting the first-fit failure.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use super::{
    generate_routes, Batch, ControlError, DeploymentPlan, InfeasibleCause, PlacementMapping,
    ScopeAllocation,
};
use crate::appmodel::{bucket_by_scope, ApplicationDag, IngressDemand, PlacementRequest};
use crate::ids::{DomainId, MsId, NodeId};
use crate::policy::{eligible_in_anchor, PolicySet};
use crate::topology::{Anchor, CapacityLedger, InfrastructureGraph, LocalityLevel, Resources};

const SEARCH_BUDGET: usize = 200_000;

/// Instances needed to serve `demand_rps` at `capacity_rps` each.
pub fn required_instances(demand_rps: f64, capacity_rps: f64) -> u32 {
    if demand_rps <= 0.0 || demand_rps.is_nan() {
        return 0;
    }
    let ratio = demand_rps / capacity_rps;
    // Rates are carried through floating-point splits; absorb rounding noise
    // so that 2.0000000000004 instances still means 2.
    let tolerance = 1e-9 * ratio.max(1.0);
    ((ratio - tolerance).ceil().max(1.0)) as u32
}

/// First-fit over the nodes of `domains`, ordered by descending free CPU then
/// node id. Each node takes as many instances as fit. The ledger is only
/// charged when every instance could be placed.
pub fn select_nodes(
    graph: &InfrastructureGraph,
    ledger: &mut CapacityLedger,
    domains: &[DomainId],
    req: Resources,
    instances: u32,
) -> Result<Vec<(NodeId, u32)>, ControlError> {
    let order = first_fit_order(graph, ledger, domains);
    let mut remaining = instances;
    let mut picks = Vec::new();
    for node in order {
        if remaining == 0 {
            break;
        }
        let k = req.copies_in(ledger.free(node.as_str())).min(remaining);
        if k > 0 {
            picks.push((node, k));
            remaining -= k;
        }
    }
    if remaining > 0 {
        return Err(ControlError::InsufficientCapacity {
            requested: instances,
            placed: instances - remaining,
        });
    }
    for (node, k) in &picks {
        let ok = ledger.reserve(node.as_str(), req.times(*k));
        debug_assert!(ok);
    }
    Ok(picks)
}

fn first_fit_order(
    graph: &InfrastructureGraph,
    ledger: &CapacityLedger,
    domains: &[DomainId],
) -> Vec<NodeId> {
    let mut nodes: Vec<NodeId> = domains
        .iter()
        .flat_map(|d| graph.nodes_of_domain(d.as_str()).iter().cloned())
        .collect();
    nodes.sort_by_key(|n| (Reverse(ledger.free(n.as_str()).cpu_m), n.clone()));
    nodes
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub chosen: MsId,
    pub level: LocalityLevel,
    /// The sorted frontier from which `chosen` was taken (including it).
    pub frontier: Vec<(MsId, LocalityLevel)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementTrace {
    pub steps: Vec<TraceStep>,
}

impl PlacementTrace {
    pub fn order(&self) -> Vec<MsId> {
        self.steps.iter().map(|s| s.chosen.clone()).collect()
    }
}

/// Locality used to rank a microservice on the frontier: the IoT level for
/// ingress microservices, else the strictest level among incoming edges.
fn sort_level(app: &ApplicationDag, policies: &PolicySet, ms: &str) -> LocalityLevel {
    if app.is_ingress(ms) {
        return policies.iot_level(ms);
    }
    app.service_preds(ms)
        .map(|e| policies.ms_level(e.from.as_str(), ms))
        .fold(LocalityLevel::Global, LocalityLevel::stricter)
}

/// The order in which the placement loop visits microservices. It depends
/// only on the DAG and the policies, never on capacities.
pub fn placement_order(app: &ApplicationDag, policies: &PolicySet) -> PlacementTrace {
    let mut placed: BTreeSet<&MsId> = BTreeSet::new();
    let mut trace = PlacementTrace::default();
    loop {
        let mut frontier: Vec<(&MsId, LocalityLevel, usize)> = app
            .topo_order()
            .iter()
            .enumerate()
            .filter(|(_, m)| !placed.contains(m))
            .filter(|(_, m)| app.service_preds(m.as_str()).all(|e| placed.contains(&e.from)))
            .map(|(rank, m)| (m, sort_level(app, policies, m.as_str()), rank))
            .collect();
        if frontier.is_empty() {
            break;
        }
        frontier.sort_by_key(|(m, level, rank)| (Reverse(level.strictness()), *rank, (*m).clone()));
        let (chosen, level, _) = frontier[0];
        trace.steps.push(TraceStep {
            chosen: chosen.clone(),
            level,
            frontier: frontier.iter().map(|(m, l, _)| ((*m).clone(), *l)).collect(),
        });
        placed.insert(chosen);
    }
    trace
}

/// Per-node request rate served by each placed microservice.
pub(crate) type Served = BTreeMap<MsId, BTreeMap<NodeId, f64>>;

/// Everything placement needs besides the mapping under construction.
pub(crate) struct Planner<'a> {
    pub graph: &'a InfrastructureGraph,
    pub app: &'a ApplicationDag,
    pub policies: &'a PolicySet,
    pub demand: &'a IngressDemand,
    pub drained: &'a BTreeSet<NodeId>,
    pub headroom: &'a BTreeMap<MsId, f64>,
    pub order: Vec<MsId>,
}

impl<'a> Planner<'a> {
    pub fn new(
        graph: &'a InfrastructureGraph,
        app: &'a ApplicationDag,
        policies: &'a PolicySet,
        demand: &'a IngressDemand,
        drained: &'a BTreeSet<NodeId>,
        headroom: &'a BTreeMap<MsId, f64>,
    ) -> Self {
        Self {
            graph,
            app,
            policies,
            demand,
            drained,
            headroom,
            order: placement_order(app, policies).order(),
        }
    }

    pub fn empty_ledger(&self) -> CapacityLedger {
        let mut ledger = CapacityLedger::new(self.graph);
        for n in self.drained {
            ledger.zero(n.as_str());
        }
        ledger
    }

    /// Ledger with every allocation of `mapping` charged. The flag is false
    /// if the mapping overcommits a node or uses a drained one.
    pub fn ledger_for(&self, mapping: &PlacementMapping) -> (CapacityLedger, bool) {
        let mut ledger = CapacityLedger::new(self.graph);
        let mut ok = true;
        for (ms, node, count) in mapping.triples() {
            let req = self.resources(ms.as_str());
            ok &= self.app.contains(ms.as_str())
                && !self.drained.contains(&node)
                && ledger.charge(node.as_str(), req.times(count));
        }
        for n in self.drained {
            ledger.zero(n.as_str());
        }
        (ledger, ok)
    }

    pub fn resources(&self, ms: &str) -> Resources {
        self.app.microservice(ms).map(|m| m.resources).unwrap_or_default()
    }

    pub fn required(&self, ms: &str, rps: f64) -> u32 {
        required_instances(rps, self.instance_capacity(ms))
    }

    /// Rate one instance is sized for, after any overload headroom.
    pub fn instance_capacity(&self, ms: &str) -> f64 {
        let m = self.app.microservice(ms).expect("validated microservice");
        m.capacity_rps * self.headroom.get(ms).copied().unwrap_or(1.0)
    }

    /// The node whose instances of `ms` are routed the most traffic each,
    /// if that is more than an instance is sized for.
    pub(crate) fn overloaded(
        &self,
        ms: &MsId,
        mapping: &PlacementMapping,
        served: &Served,
    ) -> Result<Option<NodeId>, ControlError> {
        let cap = self.instance_capacity(ms.as_str());
        let hosts = mapping.instances(ms.as_str());
        let mut worst: Option<(f64, NodeId)> = None;
        for (node, rps) in self.serve(ms, mapping, served)? {
            let each = rps / f64::from(hosts.get(&node).copied().unwrap_or(1).max(1));
            if each > cap * (1.0 + 1e-9) && worst.as_ref().is_none_or(|(w, _)| each > *w) {
                worst = Some((each, node));
            }
        }
        Ok(worst.map(|(_, n)| n))
    }

    /// Adds instances of `ms` until no instance is routed more than it is
    /// sized for. Each extra instance goes to the strictest scope around the
    /// overloaded node that still has room.
    pub(crate) fn balance(
        &self,
        ms: &MsId,
        mapping: &mut PlacementMapping,
        ledger: &mut CapacityLedger,
        served: &Served,
    ) -> Result<(), ControlError> {
        let req = self.resources(ms.as_str());
        while let Some(node) = self.overloaded(ms, mapping, served)? {
            let domain = self.graph.domain_of_node(node.as_str())?.clone();
            let mut allocs = mapping.0.remove(ms).unwrap_or_default();
            let mut around: Vec<usize> = (0..allocs.len())
                .filter(|&i| self.graph.anchor_contains(&allocs[i].anchor, domain.as_str()))
                .collect();
            around.sort_by_key(|&i| Reverse(anchor_strictness(&allocs[i].anchor)));
            let mut added = false;
            for &i in &around {
                let domains = self.eligible(ms, &allocs[i].anchor)?;
                if let Ok(picks) = select_nodes(self.graph, ledger, &domains, req, 1) {
                    debug!("balancing {ms}: {node} overloaded, adding {picks:?} in {}", allocs[i].anchor);
                    for (n, k) in picks {
                        allocs[i].push(n, k);
                    }
                    added = true;
                    break;
                }
            }
            let anchor = around.first().map_or(Anchor::Global, |&i| allocs[i].anchor.clone());
            mapping.0.insert(ms.clone(), allocs);
            if !added {
                return Err(self.infeasible(ms, &anchor, InfeasibleCause::InsufficientCapacity, 1, mapping));
            }
        }
        Ok(())
    }

    /// Traffic emitted by a placed microservice, summed per domain.
    fn emissions(&self, ms: &MsId, served: &Served) -> BTreeMap<DomainId, f64> {
        let mut out = BTreeMap::new();
        for (node, rps) in served.get(ms).into_iter().flatten() {
            if let Ok(d) = self.graph.domain_of_node(node.as_str()) {
                *out.entry(d.clone()).or_insert(0.0) += rps;
            }
        }
        out
    }

    /// Demand for `ms` grouped by the scope that has to serve it. All
    /// predecessors of `ms` must already be in `served`.
    pub fn scope_demand(&self, ms: &MsId, served: &Served) -> BTreeMap<Anchor, f64> {
        let mut buckets = BTreeMap::new();
        if self.app.is_ingress(ms.as_str()) {
            let by_domain: BTreeMap<DomainId, f64> = self
                .demand
                .0
                .iter()
                .filter_map(|(d, m)| m.get(ms).map(|r| (d.clone(), *r)))
                .collect();
            bucket_by_scope(self.graph, &by_domain, self.policies.iot_level(ms.as_str()), &mut buckets);
        } else {
            for edge in self.app.service_preds(ms.as_str()) {
                let level = self.policies.ms_level(edge.from.as_str(), ms.as_str());
                let emitted: BTreeMap<DomainId, f64> = self
                    .emissions(&edge.from, served)
                    .into_iter()
                    .map(|(d, r)| (d, r * edge.rate_ratio))
                    .collect();
                bucket_by_scope(self.graph, &emitted, level, &mut buckets);
            }
        }
        buckets.retain(|_, rps| *rps > 0.0);
        buckets
    }

    /// Splits the traffic arriving at `ms` over its instances, proportional
    /// to instance counts within each source's locality scope.
    pub fn serve(
        &self,
        ms: &MsId,
        mapping: &PlacementMapping,
        served: &Served,
    ) -> Result<BTreeMap<NodeId, f64>, ControlError> {
        let hosts = mapping.instances(ms.as_str());
        let mut inflows: Vec<(DomainId, Option<&MsId>, LocalityLevel, f64)> = Vec::new();
        if self.app.is_ingress(ms.as_str()) {
            for (d, m) in &self.demand.0 {
                if let Some(r) = m.get(ms) {
                    inflows.push((d.clone(), None, self.policies.iot_level(ms.as_str()), *r));
                }
            }
        } else {
            for edge in self.app.service_preds(ms.as_str()) {
                let level = self.policies.ms_level(edge.from.as_str(), ms.as_str());
                for (d, r) in self.emissions(&edge.from, served) {
                    inflows.push((d, Some(&edge.from), level, r * edge.rate_ratio));
                }
            }
        }

        let mut load: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (domain, consumer, level, rps) in inflows {
            if rps <= 0.0 {
                continue;
            }
            let anchor = self.graph.anchor_for(domain.as_str(), level)?;
            let dests: Vec<(&NodeId, u32)> = hosts
                .iter()
                .filter(|(n, _)| {
                    self.graph
                        .domain_of_node(n.as_str())
                        .is_ok_and(|d| self.graph.anchor_contains(&anchor, d.as_str()))
                })
                .map(|(n, c)| (n, *c))
                .collect();
            let total: u32 = dests.iter().map(|(_, c)| c).sum();
            if total == 0 {
                return Err(ControlError::NoDestinationInScope {
                    domain,
                    consumer: consumer.map_or_else(|| "ingress".to_owned(), |c| c.to_string()),
                    target: ms.clone(),
                    anchor,
                });
            }
            for (n, c) in dests {
                *load.entry(n.clone()).or_insert(0.0) += rps * f64::from(c) / f64::from(total);
            }
        }
        Ok(load)
    }

    pub(crate) fn eligible(&self, ms: &MsId, anchor: &Anchor) -> Result<Vec<DomainId>, ControlError> {
        Ok(eligible_in_anchor(self.policies, ms.as_str(), anchor, self.graph)?)
    }

    pub(crate) fn infeasible(
        &self,
        ms: &MsId,
        anchor: &Anchor,
        cause: InfeasibleCause,
        shortfall: u32,
        partial: &PlacementMapping,
    ) -> ControlError {
        ControlError::InfeasiblePlacement {
            ms: ms.clone(),
            anchor: anchor.clone(),
            cause,
            shortfall,
            partial: Box::new(partial.clone()),
        }
    }

    /// First-fit pass in placement order.
    pub fn place_first_fit(&self) -> Result<PlacementMapping, ControlError> {
        let mut ledger = self.empty_ledger();
        let mut mapping = PlacementMapping::default();
        let mut served = Served::new();
        for ms in &self.order {
            let req = self.resources(ms.as_str());
            let mut allocs = Vec::new();
            for (anchor, rps) in self.scope_demand(ms, &served) {
                let n = self.required(ms.as_str(), rps);
                let domains = self.eligible(ms, &anchor)?;
                if domains.is_empty() {
                    return Err(self.infeasible(ms, &anchor, InfeasibleCause::PolicyEmptyScope, n, &mapping));
                }
                let picks = match select_nodes(self.graph, &mut ledger, &domains, req, n) {
                    Ok(p) => p,
                    Err(ControlError::InsufficientCapacity { requested, placed }) => {
                        return Err(self.infeasible(
                            ms,
                            &anchor,
                            InfeasibleCause::InsufficientCapacity,
                            requested - placed,
                            &mapping,
                        ))
                    }
                    Err(e) => return Err(e),
                };
                debug!("placed {ms} in {anchor}: {picks:?}");
                allocs.push(ScopeAllocation {
                    anchor,
                    demand_rps: rps,
                    instances: picks
                        .into_iter()
                        .map(|(node, count)| Batch { node, count })
                        .collect(),
                });
            }
            mapping.0.insert(ms.clone(), allocs);
            self.balance(ms, &mut mapping, &mut ledger, &served)?;
            let load = self.serve(ms, &mapping, &served)?;
            served.insert(ms.clone(), load);
        }
        Ok(mapping)
    }

    /// First-fit, then backtracking if first-fit gets stuck. Capacity is not
    /// the only way to get stuck: where upstream instances land decides
    /// where downstream demand is anchored, so an early choice can leave a
    /// later microservice with a scope its restriction excludes.
    pub fn place(&self) -> Result<PlacementMapping, ControlError> {
        match self.place_first_fit() {
            Ok(m) => Ok(m),
            Err(err @ ControlError::InfeasiblePlacement { .. }) => {
                let mut search = Search {
                    planner: self,
                    budget: SEARCH_BUDGET,
                };
                let mut ledger = self.empty_ledger();
                match search.ms_step(0, &PlacementMapping::default(), &mut ledger, &Served::new()) {
                    Some(m) => {
                        debug!("first-fit failed ({err}); backtracking found a placement");
                        Ok(m)
                    }
                    None => Err(err),
                }
            }
            Err(e) => Err(e),
        }
    }
}

pub(crate) fn anchor_strictness(anchor: &Anchor) -> u8 {
    match anchor {
        Anchor::Domain(_) => 2,
        Anchor::Region(_) => 1,
        Anchor::Global => 0,
    }
}

struct PendingScope {
    anchor: Anchor,
    rps: f64,
    count: u32,
    candidates: Vec<NodeId>,
}

/// Depth-first search over node assignments. The first branch explored at
/// every step is the first-fit choice. The ledger and the allocations of the
/// microservice being placed are updated in place and restored on the way
/// back; the mapping is only copied once a microservice is complete.
struct Search<'p, 'a> {
    planner: &'p Planner<'a>,
    budget: usize,
}

impl Search<'_, '_> {
    fn tick(&mut self) -> bool {
        if self.budget == 0 {
            return false;
        }
        self.budget -= 1;
        true
    }

    fn ms_step(
        &mut self,
        k: usize,
        mapping: &PlacementMapping,
        ledger: &mut CapacityLedger,
        served: &Served,
    ) -> Option<PlacementMapping> {
        if !self.tick() {
            return None;
        }
        let Some(ms) = self.planner.order.get(k).cloned() else {
            return Some(mapping.clone());
        };
        let mut pending = Vec::new();
        for (anchor, rps) in self.planner.scope_demand(&ms, served) {
            let count = self.planner.required(ms.as_str(), rps);
            let domains = self.planner.eligible(&ms, &anchor).ok()?;
            if domains.is_empty() {
                return None;
            }
            pending.push(PendingScope {
                anchor,
                rps,
                count,
                candidates: domains
                    .iter()
                    .flat_map(|d| self.planner.graph.nodes_of_domain(d.as_str()).iter().cloned())
                    .collect(),
            });
        }
        let req = self.planner.resources(ms.as_str());
        let mut done = Vec::new();
        self.scope_step(k, &ms, req, &pending, 0, &mut done, mapping, ledger, served)
    }

    #[allow(clippy::too_many_arguments)]
    fn scope_step(
        &mut self,
        k: usize,
        ms: &MsId,
        req: Resources,
        pending: &[PendingScope],
        s: usize,
        done: &mut Vec<ScopeAllocation>,
        mapping: &PlacementMapping,
        ledger: &mut CapacityLedger,
        served: &Served,
    ) -> Option<PlacementMapping> {
        let Some(scope) = pending.get(s) else {
            let mut next = mapping.clone();
            next.0.insert(ms.clone(), done.clone());
            let mut ledger = ledger.clone();
            self.planner.balance(ms, &mut next, &mut ledger, served).ok()?;
            let load = self.planner.serve(ms, &next, served).ok()?;
            let mut served = served.clone();
            served.insert(ms.clone(), load);
            return self.ms_step(k + 1, &next, &mut ledger, &served);
        };
        let mut order = scope.candidates.clone();
        order.sort_by_key(|n| (Reverse(ledger.free(n.as_str()).cpu_m), n.clone()));
        done.push(ScopeAllocation {
            anchor: scope.anchor.clone(),
            demand_rps: scope.rps,
            instances: Vec::new(),
        });
        let found = self.node_step(k, ms, req, pending, s, done, &order, 0, scope.count, mapping, ledger, served);
        done.pop();
        found
    }

    #[allow(clippy::too_many_arguments)]
    fn node_step(
        &mut self,
        k: usize,
        ms: &MsId,
        req: Resources,
        pending: &[PendingScope],
        s: usize,
        done: &mut Vec<ScopeAllocation>,
        order: &[NodeId],
        i: usize,
        remaining: u32,
        mapping: &PlacementMapping,
        ledger: &mut CapacityLedger,
        served: &Served,
    ) -> Option<PlacementMapping> {
        if !self.tick() {
            return None;
        }
        if remaining == 0 {
            return self.scope_step(k, ms, req, pending, s + 1, done, mapping, ledger, served);
        }
        let room: u64 = order[i..]
            .iter()
            .map(|n| u64::from(req.copies_in(ledger.free(n.as_str()))))
            .sum();
        if room < u64::from(remaining) {
            return None;
        }
        let node = order.get(i)?;
        let fit = req.copies_in(ledger.free(node.as_str())).min(remaining);
        for c in (0..=fit).rev() {
            if c > 0 {
                ledger.reserve(node.as_str(), req.times(c));
                let alloc = done.last_mut().expect("scope_step pushed the allocation");
                alloc.instances.push(Batch { node: node.clone(), count: c });
            }
            let found = self.node_step(k, ms, req, pending, s, done, order, i + 1, remaining - c, mapping, ledger, served);
            if c > 0 {
                ledger.release(node.as_str(), req.times(c));
                done.last_mut().expect("scope_step pushed the allocation").instances.pop();
            }
            if found.is_some() {
                return found;
            }
            if self.budget == 0 {
                return None;
            }
        }
        None
    }
}

/// Initial placement of an application: revision 1 of its deployment plan.
pub fn place_application(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    request: &PlacementRequest,
    policies: &PolicySet,
) -> Result<DeploymentPlan, ControlError> {
    place_application_traced(graph, app, request, policies).map(|(plan, _)| plan)
}

/// [`place_application`] plus the order in which microservices were visited.
pub fn place_application_traced(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    request: &PlacementRequest,
    policies: &PolicySet,
) -> Result<(DeploymentPlan, PlacementTrace), ControlError> {
    if policies.app_id() != app.id() {
        return Err(ControlError::PlanMismatch(format!(
            "policies are for `{}`, application is `{}`",
            policies.app_id(),
            app.id()
        )));
    }
    let drained = BTreeSet::new();
    let headroom = BTreeMap::new();
    let planner = Planner::new(graph, app, policies, &request.demand, &drained, &headroom);
    let mapping = planner.place()?;
    let routes = generate_routes(graph, app, &mapping, policies, &request.demand)?;
    let trace = placement_order(app, policies);
    Ok((
        DeploymentPlan {
            app: app.id().clone(),
            revision: 1,
            demand: request.demand.clone(),
            drained,
            headroom,
            mapping,
            routes,
        },
        trace,
    ))
}
