//! Locality-aware routing rules derived from a placement mapping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ControlError, Destination, PlacementMapping, RoutingRule, RoutingRuleSet};
use crate::appmodel::{ApplicationDag, IngressDemand};
use crate::ids::{DomainId, MsId, NodeId};
use crate::policy::PolicySet;
use crate::topology::{InfrastructureGraph, LocalityLevel};

/// Builds one rule per (source domain, consumer, target) for every flow the
/// plan carries. Destinations are the target's instances within the
/// locality scope anchored at the source domain, weighted by instance count.
pub fn generate_routes(
    graph: &InfrastructureGraph,
    app: &ApplicationDag,
    mapping: &PlacementMapping,
    policies: &PolicySet,
    demand: &IngressDemand,
) -> Result<RoutingRuleSet, ControlError> {
    let mut rules = Vec::new();

    for (domain, ms, rps) in demand.entries() {
        if rps > 0.0 {
            rules.push(rule(graph, mapping, domain, None, ms, policies.iot_level(ms.as_str()))?);
        }
    }

    for consumer in app.topo_order() {
        let domains: BTreeSet<&DomainId> = mapping
            .instances(consumer.as_str())
            .keys()
            .filter_map(|n| graph.domain_of_node(n.as_str()).ok())
            .collect();
        for edge in app.succs(consumer.as_str()).filter(|e| e.rate_ratio > 0.0) {
            let level = policies.ms_level(consumer.as_str(), edge.to.as_str());
            for d in &domains {
                rules.push(rule(graph, mapping, d, Some(consumer), &edge.to, level)?);
            }
        }
    }

    rules.sort_by(|a, b| {
        (&a.domain, &a.target, &a.consumer).cmp(&(&b.domain, &b.target, &b.consumer))
    });
    Ok(RoutingRuleSet { rules })
}

fn rule(
    graph: &InfrastructureGraph,
    mapping: &PlacementMapping,
    domain: &DomainId,
    consumer: Option<&MsId>,
    target: &MsId,
    level: LocalityLevel,
) -> Result<RoutingRule, ControlError> {
    let anchor = graph.anchor_for(domain.as_str(), level)?;
    let destinations: Vec<Destination> = mapping
        .instances(target.as_str())
        .into_iter()
        .filter(|(n, _)| {
            graph
                .domain_of_node(n.as_str())
                .is_ok_and(|d| graph.anchor_contains(&anchor, d.as_str()))
        })
        .map(|(node, weight)| Destination { node, weight })
        .collect();
    if destinations.is_empty() {
        return Err(ControlError::NoDestinationInScope {
            domain: domain.clone(),
            consumer: consumer.map_or_else(|| "ingress".to_owned(), |c| c.to_string()),
            target: target.clone(),
            anchor,
        });
    }
    Ok(RoutingRule {
        domain: domain.clone(),
        consumer: consumer.cloned(),
        target: target.clone(),
        level,
        destinations,
    })
}

/// Virtual-service style view of the rules installed in one domain.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DomainRoutesDoc {
    pub virtual_services: Vec<VirtualService>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualService {
    pub host: MsId,
    pub http: Vec<HttpRoute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRoute {
    pub source: String,
    pub locality: LocalityLevel,
    pub route: Vec<RouteDestination>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDestination {
    pub destination: DestinationRef,
    pub weight: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationRef {
    pub host: MsId,
    pub subset: NodeId,
}

/// One document per domain of the topology, including domains without rules.
pub fn render_domain_routes(
    graph: &InfrastructureGraph,
    routes: &RoutingRuleSet,
) -> BTreeMap<DomainId, DomainRoutesDoc> {
    let mut out = BTreeMap::new();
    for domain in graph.domain_ids() {
        let mut by_host: BTreeMap<&MsId, Vec<HttpRoute>> = BTreeMap::new();
        for r in routes.in_domain(domain.as_str()) {
            by_host.entry(&r.target).or_default().push(HttpRoute {
                source: r.source_label().to_owned(),
                locality: r.level,
                route: r
                    .destinations
                    .iter()
                    .map(|d| RouteDestination {
                        destination: DestinationRef {
                            host: r.target.clone(),
                            subset: d.node.clone(),
                        },
                        weight: d.weight,
                    })
                    .collect(),
            });
        }
        out.insert(
            domain.clone(),
            DomainRoutesDoc {
                virtual_services: by_host
                    .into_iter()
                    .map(|(host, http)| VirtualService {
                        host: host.clone(),
                        http,
                    })
                    .collect(),
            },
        );
    }
    out
}
