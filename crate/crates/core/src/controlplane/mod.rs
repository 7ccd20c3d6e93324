//! The microservice manager: placement, routing-rule generation, plan
//! validation and alert-driven replanning.

mod placement;
mod replan;
mod routing;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::appmodel::{DemandError, IngressDemand};
use crate::ids::{AppId, DomainId, MsId, NodeId};
use crate::policy::PolicyError;
use crate::topology::{Anchor, LocalityLevel, TopologyError};

pub use placement::{
    place_application, place_application_traced, placement_order, required_instances,
    select_nodes, PlacementTrace, TraceStep,
};
pub use replan::{handle_alert, ControlPlane, ControlSettings};
pub use routing::{generate_routes, render_domain_routes, DomainRoutesDoc};
pub use validate::{validate_plan, ComplianceReport, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibleCause {
    /// No domain in the scope passes the placement restriction.
    PolicyEmptyScope,
    /// Eligible domains exist but their nodes lack free resources.
    InsufficientCapacity,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("InfeasiblePlacement: {ms} in {anchor}: {cause:?} (short by {shortfall} instance(s))")]
    InfeasiblePlacement {
        ms: MsId,
        anchor: Anchor,
        cause: InfeasibleCause,
        shortfall: u32,
        partial: Box<PlacementMapping>,
    },
    #[error("InsufficientCapacity: placed {placed} of {requested} instance(s)")]
    InsufficientCapacity { requested: u32, placed: u32 },
    #[error("NoDestinationInScope: {consumer}@{domain} has no {target} instance within {anchor}")]
    NoDestinationInScope {
        domain: DomainId,
        consumer: String,
        target: MsId,
        anchor: Anchor,
    },
    #[error("PlanMismatch: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Demand(#[from] DemandError),
}

impl ControlError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, ControlError::InfeasiblePlacement { .. })
    }
}

/// Instances placed on one node in a single allocation step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub node: NodeId,
    pub count: u32,
}

/// Instances serving the demand of one locality scope. Batches are kept in
/// allocation order so that scale-in can remove the newest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeAllocation {
    pub anchor: Anchor,
    pub demand_rps: f64,
    pub instances: Vec<Batch>,
}

impl ScopeAllocation {
    pub fn count(&self) -> u32 {
        self.instances.iter().map(|b| b.count).sum()
    }

    pub(crate) fn push(&mut self, node: NodeId, count: u32) {
        if count == 0 {
            return;
        }
        match self.instances.last_mut() {
            Some(last) if last.node == node => last.count += count,
            _ => self.instances.push(Batch { node, count }),
        }
    }
}

/// Microservice → scope allocations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlacementMapping(pub BTreeMap<MsId, Vec<ScopeAllocation>>);

impl PlacementMapping {
    /// Instances per node for one microservice.
    pub fn instances(&self, ms: &str) -> BTreeMap<NodeId, u32> {
        let mut out = BTreeMap::new();
        for alloc in self.0.get(ms).into_iter().flatten() {
            for b in &alloc.instances {
                *out.entry(b.node.clone()).or_insert(0) += b.count;
            }
        }
        out
    }

    pub fn total_instances(&self, ms: &str) -> u32 {
        self.instances(ms).values().sum()
    }

    /// Every (microservice, node, count) triple, in key order.
    pub fn triples(&self) -> Vec<(MsId, NodeId, u32)> {
        self.0
            .keys()
            .flat_map(|ms| {
                self.instances(ms.as_str())
                    .into_iter()
                    .map(move |(n, c)| (ms.clone(), n, c))
            })
            .collect()
    }

    pub fn scopes(&self, ms: &str) -> &[ScopeAllocation] {
        self.0.get(ms).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    pub node: NodeId,
    pub weight: u32,
}

/// Per-domain routing directive for traffic to one microservice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRule {
    /// Domain the rule is installed in (where the traffic originates).
    pub domain: DomainId,
    /// Consuming microservice; absent for IoT traffic through the ingress
    /// gateway.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer: Option<MsId>,
    pub target: MsId,
    pub level: LocalityLevel,
    pub destinations: Vec<Destination>,
}

impl RoutingRule {
    pub fn total_weight(&self) -> u64 {
        self.destinations.iter().map(|d| u64::from(d.weight)).sum()
    }

    pub fn source_label(&self) -> &str {
        self.consumer.as_ref().map_or("ingress", |c| c.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutingRuleSet {
    pub rules: Vec<RoutingRule>,
}

impl RoutingRuleSet {
    pub fn find(&self, domain: &str, consumer: Option<&str>, target: &str) -> Option<&RoutingRule> {
        self.rules.iter().find(|r| {
            r.domain == domain && r.target == target && r.consumer.as_ref().map(|c| c.as_str()) == consumer
        })
    }

    pub fn in_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a RoutingRule> + 'a {
        self.rules.iter().filter(move |r| r.domain == domain)
    }
}

/// A complete, self-describing deployment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub app: AppId,
    pub revision: u64,
    /// Ingress demand the plan is sized for.
    pub demand: IngressDemand,
    /// Nodes removed from service; they host nothing.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub drained: BTreeSet<NodeId>,
    /// Microservices sized for a target utilization below 1.0 after an
    /// overload alert.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub headroom: BTreeMap<MsId, f64>,
    pub mapping: PlacementMapping,
    pub routes: RoutingRuleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlertKind {
    DemandChange { demand: IngressDemand },
    NodeDrain { node: NodeId },
    Overload { node: NodeId, utilization: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: AlertKind,
}
