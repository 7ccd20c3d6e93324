//! Rate-based traffic simulation over a deployment plan, and the observer
//! loop that feeds alerts back to the control plane.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::appmodel::{ApplicationDag, IngressDemand, PlacementRequest};
use crate::controlplane::{
    handle_alert, place_application, Alert, AlertKind, ControlError, ControlSettings, DeploymentPlan,
};
use crate::ids::{DomainId, MsId, NodeId};
use crate::policy::{is_allowed, PolicySet};
use crate::topology::{Anchor, InfrastructureGraph};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("MissingRoute: no rule in {domain} for {from}→{target}")]
    MissingRoute {
        domain: DomainId,
        from: String,
        target: MsId,
    },
    #[error("UnknownNode: `{0}` carries traffic but is not in the topology")]
    UnknownNode(String),
    #[error("InvalidEvent: tick {tick}: {reason}")]
    InvalidEvent { tick: u64, reason: String },
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Where a flow comes from: IoT devices behind a domain's ingress gateway,
/// or one node's instances of a microservice.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSource {
    Ingress { domain: DomainId },
    Instance { ms: MsId, node: NodeId },
}

impl FlowSource {
    pub fn consumer(&self) -> Option<&MsId> {
        match self {
            FlowSource::Ingress { .. } => None,
            FlowSource::Instance { ms, .. } => Some(ms),
        }
    }

    pub fn label(&self) -> String {
        match self {
            FlowSource::Ingress { domain } => format!("ingress@{domain}"),
            FlowSource::Instance { ms, node } => format!("{ms}@{node}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub source: FlowSource,
    pub source_domain: DomainId,
    pub target_ms: MsId,
    pub target_node: NodeId,
    pub target_domain: DomainId,
    pub rps: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub flows: Vec<Flow>,
}

impl FlowAssignment {
    /// Requests/second served per node and microservice.
    pub fn served(&self) -> BTreeMap<NodeId, BTreeMap<MsId, f64>> {
        let mut out: BTreeMap<NodeId, BTreeMap<MsId, f64>> = BTreeMap::new();
        for f in &self.flows {
            *out.entry(f.target_node.clone())
                .or_default()
                .entry(f.target_ms.clone())
                .or_insert(0.0) += f.rps;
        }
        out
    }

    /// Total rps of flows into `ms` from `source_domain` landing in `target_domain`.
    pub fn between(&self, ms: &str, source_domain: &str, target_domain: &str) -> f64 {
        self.flows
            .iter()
            .filter(|f| f.target_ms == ms && f.source_domain == source_domain && f.target_domain == target_domain)
            .map(|f| f.rps)
            .sum()
    }

    /// One row per flow: source, target node, microservice, rps.
    pub fn to_table(&self) -> String {
        let mut out = String::from("source\ttarget_node\tms\trps\n");
        for f in &self.flows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", f.source.label(), f.target_node, f.target_ms, f.rps);
        }
        out
    }
}

/// Pushes the ingress demand through the plan's routing rules. Each hop
/// splits the rate over the rule's destinations in proportion to their
/// weights and multiplies it by the edge ratio.
pub fn route_flows(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    plan: &DeploymentPlan,
    demand: &IngressDemand,
) -> Result<FlowAssignment, SimError> {
    let mut flows: BTreeMap<(FlowSource, MsId, NodeId), f64> = BTreeMap::new();
    let mut served: BTreeMap<MsId, BTreeMap<NodeId, f64>> = BTreeMap::new();

    let mut send = |source: FlowSource,
                    domain: &DomainId,
                    target: &MsId,
                    rps: f64,
                    served: &mut BTreeMap<MsId, BTreeMap<NodeId, f64>>|
     -> Result<(), SimError> {
        let rule = plan
            .routes
            .find(domain.as_str(), source.consumer().map(MsId::as_str), target.as_str())
            .filter(|r| r.total_weight() > 0)
            .ok_or_else(|| SimError::MissingRoute {
                domain: domain.clone(),
                from: source.consumer().map_or_else(|| "ingress".to_owned(), |c| c.to_string()),
                target: target.clone(),
            })?;
        let total = rule.total_weight() as f64;
        for d in &rule.destinations {
            let share = rps * f64::from(d.weight) / total;
            *flows
                .entry((source.clone(), target.clone(), d.node.clone()))
                .or_insert(0.0) += share;
            *served
                .entry(target.clone())
                .or_default()
                .entry(d.node.clone())
                .or_insert(0.0) += share;
        }
        Ok(())
    };

    for (domain, ms, rps) in demand.entries() {
        if rps > 0.0 {
            send(FlowSource::Ingress { domain: domain.clone() }, domain, ms, rps, &mut served)?;
        }
    }
    for ms in app.topo_order() {
        let load = served.get(ms).cloned().unwrap_or_default();
        for (node, rps) in load {
            let domain = graph
                .domain_of_node(node.as_str())
                .map_err(|_| SimError::UnknownNode(node.to_string()))?
                .clone();
            for edge in app.succs(ms.as_str()) {
                let out = rps * edge.rate_ratio;
                if out > 0.0 {
                    let source = FlowSource::Instance {
                        ms: ms.clone(),
                        node: node.clone(),
                    };
                    send(source, &domain, &edge.to, out, &mut served)?;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(flows.len());
    for ((source, target_ms, target_node), rps) in flows {
        let source_domain = match &source {
            FlowSource::Ingress { domain } => domain.clone(),
            FlowSource::Instance { node, .. } => graph
                .domain_of_node(node.as_str())
                .map_err(|_| SimError::UnknownNode(node.to_string()))?
                .clone(),
        };
        let target_domain = graph
            .domain_of_node(target_node.as_str())
            .map_err(|_| SimError::UnknownNode(target_node.to_string()))?
            .clone();
        out.push(Flow {
            source,
            source_domain,
            target_ms,
            target_node,
            target_domain,
            rps,
        });
    }
    Ok(FlowAssignment { flows: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowViolationKind {
    Locality,
    Restriction,
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowViolation {
    pub kind: FlowViolationKind,
    pub subject: String,
    pub detail: String,
}

/// Checks every positive flow against the locality policy of its edge and
/// the placement restriction of its target.
pub fn check_compliance(
    graph: &InfrastructureGraph,
    policies: &PolicySet,
    flows: &FlowAssignment,
) -> Vec<FlowViolation> {
    let mut out = Vec::new();
    for f in flows.flows.iter().filter(|f| f.rps > 0.0) {
        let subject = format!("{}→{}@{}", f.source.label(), f.target_ms, f.target_node);
        let Ok(target_domain) = graph.domain_of_node(f.target_node.as_str()) else {
            out.push(FlowViolation {
                kind: FlowViolationKind::Locality,
                subject,
                detail: "target node is not in the topology".to_owned(),
            });
            continue;
        };
        let level = policies.level(f.source.consumer().map(MsId::as_str), f.target_ms.as_str());
        let inside = graph
            .anchor_for(f.source_domain.as_str(), level)
            .is_ok_and(|a| graph.anchor_contains(&a, target_domain.as_str()));
        if !inside {
            out.push(FlowViolation {
                kind: FlowViolationKind::Locality,
                subject: subject.clone(),
                detail: format!("{target_domain} is outside {level} of {}", f.source_domain),
            });
        }
        match is_allowed(policies, f.target_ms.as_str(), target_domain.as_str()) {
            Ok(d) if d.allowed => {}
            Ok(d) => out.push(FlowViolation {
                kind: FlowViolationKind::Restriction,
                subject,
                detail: d.reason,
            }),
            Err(e) => out.push(FlowViolation {
                kind: FlowViolationKind::Restriction,
                subject,
                detail: e.to_string(),
            }),
        }
    }
    out
}

/// CPU utilization of a node: served rps weighted by each microservice's
/// CPU per request, over the node's CPU capacity.
pub fn utilization(app: &ApplicationDag, served: &BTreeMap<MsId, f64>, node_cpu_m: u64) -> f64 {
    let used: f64 = served
        .iter()
        .filter_map(|(ms, rps)| app.microservice(ms.as_str()).map(|m| rps * m.cpu_per_rps()))
        .sum();
    used / node_cpu_m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub tick: u64,
    pub node: NodeId,
    pub utilization: f64,
    pub served: BTreeMap<MsId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventAction {
    SetDemand {
        domain: DomainId,
        microservice: MsId,
        rps: f64,
    },
    DrainNode {
        node: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub action: EventAction,
}

/// Checks that events are sorted and name existing entities.
pub fn validate_events(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    events: &[ScenarioEvent],
) -> Result<(), SimError> {
    let invalid = |tick, reason: String| SimError::InvalidEvent { tick, reason };
    for pair in events.windows(2) {
        if pair[1].tick < pair[0].tick {
            return Err(invalid(pair[1].tick, "events are not sorted by tick".to_owned()));
        }
    }
    for e in events {
        match &e.action {
            EventAction::SetDemand { domain, microservice, rps } => {
                if !graph.has_attachment_in(domain.as_str()) {
                    return Err(invalid(e.tick, format!("`{domain}` is not a domain with IoT attachments")));
                }
                if !app.is_ingress(microservice.as_str()) {
                    return Err(invalid(e.tick, format!("`{microservice}` is not an ingress microservice")));
                }
                if !(*rps >= 0.0 && rps.is_finite()) {
                    return Err(invalid(e.tick, format!("rate {rps} must be finite and non-negative")));
                }
            }
            EventAction::DrainNode { node } => {
                if graph.node(node.as_str()).is_none() {
                    return Err(invalid(e.tick, format!("unknown node `{node}`")));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    /// Ticks to run; ticks are numbered from 0.
    pub ticks: u64,
    pub overload_threshold: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            ticks: 1,
            overload_threshold: ControlSettings::default().overload_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub alert: Alert,
    /// Plan revision the alert produced; absent if handling failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickViolation {
    pub tick: u64,
    #[serde(flatten)]
    pub violation: FlowViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeThroughput {
    pub ms: MsId,
    pub anchor: Anchor,
    pub demand_rps: f64,
    pub capacity_rps: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halt {
    pub tick: u64,
    pub infeasible: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub ticks_run: u64,
    pub final_revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<Halt>,
    pub alerts: Vec<AlertRecord>,
    pub violations: Vec<TickViolation>,
    pub throughput: Vec<ScopeThroughput>,
    /// Flows of the last completed tick.
    pub flows: FlowAssignment,
    pub samples: Vec<MetricSample>,
    pub plan: DeploymentPlan,
}

impl SimulationReport {
    pub fn is_compliant(&self) -> bool {
        self.violations.is_empty() && self.halted.is_none()
    }
}

/// Control-plane callback: the next plan for an alert.
pub type AlertHandler<'h> = dyn FnMut(&DeploymentPlan, &Alert) -> Result<DeploymentPlan, ControlError> + 'h;

/// Places the application and runs the observer loop. An infeasible initial
/// placement is recorded as a halt at tick 0.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    policies: &PolicySet,
    request: &PlacementRequest,
    events: &[ScenarioEvent],
    settings: &SimulationSettings,
    control: &mut AlertHandler<'_>,
) -> Result<SimulationReport, SimError> {
    match place_application(graph, app, request, policies) {
        Ok(plan) => run_from_plan(graph, app, policies, plan, events, settings, control),
        Err(e) if e.is_infeasible() => {
            validate_events(graph, app, events)?;
            let plan = DeploymentPlan {
                app: app.id().clone(),
                revision: 0,
                demand: request.demand.clone(),
                drained: BTreeSet::new(),
                headroom: BTreeMap::new(),
                mapping: Default::default(),
                routes: Default::default(),
            };
            Ok(SimulationReport {
                ticks_run: 0,
                final_revision: 0,
                halted: Some(Halt {
                    tick: 0,
                    infeasible: true,
                    reason: e.to_string(),
                }),
                alerts: Vec::new(),
                violations: Vec::new(),
                throughput: Vec::new(),
                flows: FlowAssignment::default(),
                samples: Vec::new(),
                plan,
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// [`run_scenario`] with the stock control plane.
pub fn simulate(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    policies: &PolicySet,
    request: &PlacementRequest,
    events: &[ScenarioEvent],
    settings: &SimulationSettings,
) -> Result<SimulationReport, SimError> {
    let control = ControlSettings {
        overload_threshold: settings.overload_threshold,
    };
    let mut handler = |plan: &DeploymentPlan, alert: &Alert| handle_alert(graph, app, policies, plan, alert, &control);
    run_scenario(graph, app, policies, request, events, settings, &mut handler)
}

/// The observer loop, starting from an existing plan.
///
/// Every tick applies that tick's events (demand changes are merged into one
/// alert, each drain is its own alert), routes the current demand, samples
/// node utilization and raises at most one overload alert for the busiest
/// node above the threshold. Violations are collected from the traffic the
/// tick ends with. A failing alert halts the run.
pub fn run_from_plan(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    policies: &PolicySet,
    plan: DeploymentPlan,
    events: &[ScenarioEvent],
    settings: &SimulationSettings,
    control: &mut AlertHandler<'_>,
) -> Result<SimulationReport, SimError> {
    validate_events(graph, app, events)?;
    let mut plan = plan;
    let mut demand = plan.demand.clone();
    let mut alerts = Vec::new();
    let mut violations = Vec::new();
    let mut samples = Vec::new();
    let mut flows = FlowAssignment::default();
    let mut halted = None;
    let mut ticks_run = 0;

    'ticks: for tick in 0..settings.ticks {
        let mut raised = Vec::new();
        let mut demand_changed = false;
        for e in events.iter().filter(|e| e.tick == tick) {
            match &e.action {
                EventAction::SetDemand { domain, microservice, rps } => {
                    demand.set(domain.clone(), microservice.clone(), *rps);
                    demand_changed = true;
                }
                EventAction::DrainNode { node } => raised.push(AlertKind::NodeDrain { node: node.clone() }),
            }
        }
        if demand_changed {
            raised.insert(0, AlertKind::DemandChange { demand: demand.clone() });
        }

        for kind in raised {
            let alert = Alert { tick, kind };
            if let Err(halt) = apply(&mut plan, alert, &mut alerts, control) {
                halted = Some(halt);
                break 'ticks;
            }
        }

        let mut current = route_flows(graph, app, &plan, &demand)?;
        let mut tick_samples = sample(graph, app, tick, &current);
        if let Some(busiest) = tick_samples
            .iter()
            .filter(|s| s.utilization > settings.overload_threshold)
            .max_by(|a, b| a.utilization.total_cmp(&b.utilization).then_with(|| b.node.cmp(&a.node)))
        {
            let alert = Alert {
                tick,
                kind: AlertKind::Overload {
                    node: busiest.node.clone(),
                    utilization: busiest.utilization,
                },
            };
            if let Err(halt) = apply(&mut plan, alert, &mut alerts, control) {
                halted = Some(halt);
                break 'ticks;
            }
            current = route_flows(graph, app, &plan, &demand)?;
            tick_samples = sample(graph, app, tick, &current);
        }

        violations.extend(
            check_compliance(graph, policies, &current)
                .into_iter()
                .chain(capacity_violations(graph, app, &plan, &current))
                .map(|violation| TickViolation { tick, violation }),
        );
        samples.extend(tick_samples);
        flows = current;
        ticks_run = tick + 1;
    }

    let throughput = plan
        .mapping
        .0
        .iter()
        .flat_map(|(ms, allocs)| {
            let cap = app.microservice(ms.as_str()).map_or(0.0, |m| m.capacity_rps);
            allocs.iter().map(move |a| {
                let capacity_rps = f64::from(a.count()) * cap;
                ScopeThroughput {
                    ms: ms.clone(),
                    anchor: a.anchor.clone(),
                    demand_rps: a.demand_rps,
                    capacity_rps,
                    satisfied: capacity_rps + 1e-9 >= a.demand_rps,
                }
            })
        })
        .collect();

    info!(
        "simulation finished after {ticks_run} tick(s): revision {}, {} alert(s), {} violation(s)",
        plan.revision,
        alerts.len(),
        violations.len()
    );
    Ok(SimulationReport {
        ticks_run,
        final_revision: plan.revision,
        halted,
        alerts,
        violations,
        throughput,
        flows,
        samples,
        plan,
    })
}

fn apply(
    plan: &mut DeploymentPlan,
    alert: Alert,
    log: &mut Vec<AlertRecord>,
    control: &mut AlertHandler<'_>,
) -> Result<(), Halt> {
    debug!("tick {}: alert {:?}", alert.tick, alert.kind);
    match control(plan, &alert) {
        Ok(next) => {
            *plan = next;
            log.push(AlertRecord {
                alert,
                revision: Some(plan.revision),
            });
            Ok(())
        }
        Err(e) => {
            let halt = Halt {
                tick: alert.tick,
                infeasible: e.is_infeasible(),
                reason: e.to_string(),
            };
            info!("tick {}: control plane failed: {e}", alert.tick);
            log.push(AlertRecord { alert, revision: None });
            Err(halt)
        }
    }
}

fn sample(graph: &InfrastructureGraph, app: &ApplicationDag, tick: u64, flows: &FlowAssignment) -> Vec<MetricSample> {
    let mut served = flows.served();
    graph
        .nodes()
        .map(|n| {
            let served = served.remove(&n.id).unwrap_or_default();
            MetricSample {
                tick,
                node: n.id.clone(),
                utilization: utilization(app, &served, n.capacity.cpu_m),
                served,
            }
        })
        .collect()
}

/// Nodes whose instances are asked for more than their rated throughput, or
/// whose resource requests exceed the node.
fn capacity_violations(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    plan: &DeploymentPlan,
    flows: &FlowAssignment,
) -> Vec<FlowViolation> {
    let mut out = Vec::new();
    let hosted: BTreeMap<(MsId, NodeId), u32> = plan
        .mapping
        .triples()
        .into_iter()
        .map(|(m, n, c)| ((m, n), c))
        .collect();
    for (node, per_ms) in flows.served() {
        for (ms, rps) in per_ms {
            let count = hosted.get(&(ms.clone(), node.clone())).copied().unwrap_or(0);
            let cap = app.microservice(ms.as_str()).map_or(0.0, |m| m.capacity_rps) * f64::from(count);
            if rps > cap * (1.0 + 1e-9) + 1e-9 {
                out.push(FlowViolation {
                    kind: FlowViolationKind::Capacity,
                    subject: format!("{ms}@{node}"),
                    detail: format!("{rps} rps offered to {count} instance(s) rated {cap} rps"),
                });
            }
        }
    }
    let mut used: BTreeMap<NodeId, (u64, u64)> = BTreeMap::new();
    for ((ms, node), count) in &hosted {
        if let Some(m) = app.microservice(ms.as_str()) {
            let u = used.entry(node.clone()).or_insert((0, 0));
            u.0 += m.resources.cpu_m * u64::from(*count);
            u.1 += m.resources.mem_mi * u64::from(*count);
        }
    }
    for (node, (cpu, mem)) in used {
        if let Some(n) = graph.node(node.as_str()) {
            if cpu > n.capacity.cpu_m || mem > n.capacity.mem_mi {
                out.push(FlowViolation {
                    kind: FlowViolationKind::Capacity,
                    subject: node.to_string(),
                    detail: format!("requests {cpu}m/{mem}Mi exceed {}m/{}Mi", n.capacity.cpu_m, n.capacity.mem_mi),
                });
            }
        }
    }
    out
}
