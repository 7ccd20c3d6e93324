//! Microservice applications as DAGs and demand propagation through them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{AppId, DomainId, MsId};
use crate::topology::{Anchor, InfrastructureGraph, LocalityLevel, Resources};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("DuplicateId: microservice `{0}` is defined more than once")]
    DuplicateId(String),
    #[error("UnknownMicroservice: `{id}` referenced by {by}")]
    UnknownMicroservice { id: String, by: String },
    #[error("SelfLoop: edge {0}→{0}")]
    SelfLoop(String),
    #[error("DuplicateEdge: {0}→{1}")]
    DuplicateEdge(String, String),
    #[error("CycleDetected: {}", .0.join("→"))]
    CycleDetected(Vec<String>),
    #[error("UnknownIngress: `{0}`")]
    UnknownIngress(String),
    #[error("InvalidIngress: `{ms}` {reason}")]
    InvalidIngress { ms: String, reason: &'static str },
    #[error("NoIngress: application declares no ingress microservice")]
    NoIngress,
    #[error("UnreachableMicroservice: `{0}` is not reachable from any ingress microservice")]
    UnreachableMicroservice(String),
    #[error("InvalidResources: `{0}` needs positive cpu, memory and capacity_rps")]
    InvalidResources(String),
    #[error("InvalidRatio: edge {0}→{1} needs a finite, non-negative ratio")]
    InvalidRatio(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DemandError {
    #[error("UnknownDomain: demand domain `{0}`")]
    UnknownDomain(String),
    #[error("NoAttachment: demand domain `{0}` has no IoT attachment")]
    NoAttachment(String),
    #[error("NotIngress: demand targets `{0}`, which is not an ingress microservice")]
    NotIngress(String),
    #[error("InvalidRate: demand {domain}/{ms} must be finite and non-negative")]
    InvalidRate { domain: String, ms: String },
    #[error("MissingLocality: no locality resolves for {consumer}→{consumed}")]
    MissingLocality { consumer: String, consumed: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Microservice {
    pub id: MsId,
    /// Per-instance request; zero for microservices running on IoT devices.
    pub resources: Resources,
    pub capacity_rps: f64,
    pub placed_on_iot: bool,
}

impl Microservice {
    /// CPU millicores consumed per request/second served.
    pub fn cpu_per_rps(&self) -> f64 {
        self.resources.cpu_m as f64 / self.capacity_rps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppEdge {
    pub from: MsId,
    pub to: MsId,
    pub rate_ratio: f64,
}

/// A validated application graph. Build with [`validate_app`].
#[derive(Debug, Clone, PartialEq)]
pub struct ApplicationDag {
    id: AppId,
    microservices: BTreeMap<MsId, Microservice>,
    edges: Vec<AppEdge>,
    ingress: BTreeSet<MsId>,
    topo_order: Vec<MsId>,
    preds: BTreeMap<MsId, Vec<usize>>,
    succs: BTreeMap<MsId, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationDoc {
    pub id: String,
    pub microservices: Vec<MicroserviceDoc>,
    #[serde(default)]
    pub edges: Vec<EdgeDoc>,
    #[serde(default)]
    pub ingress: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroserviceDoc {
    pub id: String,
    #[serde(default)]
    pub cpu_m: u64,
    #[serde(default)]
    pub mem_mi: u64,
    #[serde(default)]
    pub capacity_rps: f64,
    #[serde(default)]
    pub iot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub from: String,
    pub to: String,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_ratio() -> f64 {
    1.0
}

pub fn validate_app(doc: &ApplicationDoc) -> Result<ApplicationDag, AppError> {
    let mut microservices = BTreeMap::new();
    for m in &doc.microservices {
        let id = MsId::new(m.id.as_str());
        if !m.iot && (m.cpu_m == 0 || m.mem_mi == 0 || !(m.capacity_rps > 0.0 && m.capacity_rps.is_finite())) {
            return Err(AppError::InvalidResources(m.id.clone()));
        }
        let ms = Microservice {
            id: id.clone(),
            resources: if m.iot {
                Resources::default()
            } else {
                Resources::new(m.cpu_m, m.mem_mi)
            },
            capacity_rps: if m.iot { 0.0 } else { m.capacity_rps },
            placed_on_iot: m.iot,
        };
        if microservices.insert(id, ms).is_some() {
            return Err(AppError::DuplicateId(m.id.clone()));
        }
    }

    let mut edges = Vec::with_capacity(doc.edges.len());
    let mut seen_edges = BTreeSet::new();
    for e in &doc.edges {
        for end in [&e.from, &e.to] {
            if !microservices.contains_key(end.as_str()) {
                return Err(AppError::UnknownMicroservice {
                    id: end.clone(),
                    by: format!("edge {}→{}", e.from, e.to),
                });
            }
        }
        if e.from == e.to {
            return Err(AppError::SelfLoop(e.from.clone()));
        }
        if !(e.ratio >= 0.0 && e.ratio.is_finite()) {
            return Err(AppError::InvalidRatio(e.from.clone(), e.to.clone()));
        }
        if !seen_edges.insert((e.from.as_str(), e.to.as_str())) {
            return Err(AppError::DuplicateEdge(e.from.clone(), e.to.clone()));
        }
        edges.push(AppEdge {
            from: e.from.as_str().into(),
            to: e.to.as_str().into(),
            rate_ratio: e.ratio,
        });
    }
    edges.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));

    let mut preds: BTreeMap<MsId, Vec<usize>> =
        microservices.keys().map(|k| (k.clone(), Vec::new())).collect();
    let mut succs = preds.clone();
    for (i, e) in edges.iter().enumerate() {
        succs.get_mut(&e.from).unwrap().push(i);
        preds.get_mut(&e.to).unwrap().push(i);
    }

    if let Some(cycle) = find_cycle(&microservices, &edges, &succs) {
        return Err(AppError::CycleDetected(cycle));
    }

    let mut ingress = BTreeSet::new();
    for i in &doc.ingress {
        let Some(ms) = microservices.get(i.as_str()) else {
            return Err(AppError::UnknownIngress(i.clone()));
        };
        if ms.placed_on_iot {
            return Err(AppError::InvalidIngress {
                ms: i.clone(),
                reason: "runs on IoT devices",
            });
        }
        if preds[&ms.id].iter().any(|&e| !microservices[&edges[e].from].placed_on_iot) {
            return Err(AppError::InvalidIngress {
                ms: i.clone(),
                reason: "has a predecessor that is not placed on IoT devices",
            });
        }
        ingress.insert(ms.id.clone());
    }
    if ingress.is_empty() {
        return Err(AppError::NoIngress);
    }
    for e in &edges {
        if microservices[&e.from].placed_on_iot && !ingress.contains(&e.to) {
            return Err(AppError::InvalidIngress {
                ms: e.to.to_string(),
                reason: "receives IoT traffic but is not declared ingress",
            });
        }
    }

    // Reachability over non-IoT microservices.
    let mut reached: BTreeSet<&MsId> = BTreeSet::new();
    let mut stack: Vec<&MsId> = ingress.iter().collect();
    while let Some(m) = stack.pop() {
        if reached.insert(m) {
            stack.extend(succs[m].iter().map(|&e| &edges[e].to));
        }
    }
    if let Some(m) = microservices
        .values()
        .find(|m| !m.placed_on_iot && !reached.contains(&m.id))
    {
        return Err(AppError::UnreachableMicroservice(m.id.to_string()));
    }

    // Kahn's algorithm, smallest id first among ready microservices.
    let mut indegree: BTreeMap<&MsId, usize> = microservices
        .values()
        .filter(|m| !m.placed_on_iot)
        .map(|m| {
            let d = preds[&m.id]
                .iter()
                .filter(|&&e| !microservices[&edges[e].from].placed_on_iot)
                .count();
            (&m.id, d)
        })
        .collect();
    let mut ready: BTreeSet<&MsId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(m, _)| *m)
        .collect();
    let mut topo_order = Vec::with_capacity(indegree.len());
    while let Some(m) = ready.pop_first() {
        topo_order.push(m.clone());
        for &e in &succs[m] {
            let d = indegree.get_mut(&edges[e].to).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(&edges[e].to);
            }
        }
    }

    Ok(ApplicationDag {
        id: AppId::new(doc.id.as_str()),
        microservices,
        edges,
        ingress,
        topo_order,
        preds,
        succs,
    })
}

fn find_cycle(
    microservices: &BTreeMap<MsId, Microservice>,
    edges: &[AppEdge],
    succs: &BTreeMap<MsId, Vec<usize>>,
) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: BTreeMap<&MsId, Mark> = microservices.keys().map(|k| (k, Mark::New)).collect();

    for start in microservices.keys() {
        if mark[start] != Mark::New {
            continue;
        }
        let mut path: Vec<&MsId> = vec![start];
        let mut cursor: Vec<usize> = vec![0];
        mark.insert(start, Mark::Active);
        while let Some(&node) = path.last() {
            let idx = cursor.last_mut().unwrap();
            if let Some(&e) = succs[node].get(*idx) {
                *idx += 1;
                let next = &edges[e].to;
                match mark[next] {
                    Mark::Active => {
                        let from = path.iter().position(|m| *m == next).unwrap();
                        let mut cycle: Vec<String> =
                            path[from..].iter().map(|m| m.to_string()).collect();
                        cycle.push(next.to_string());
                        return Some(cycle);
                    }
                    Mark::New => {
                        mark.insert(next, Mark::Active);
                        path.push(next);
                        cursor.push(0);
                    }
                    Mark::Done => {}
                }
            } else {
                mark.insert(node, Mark::Done);
                path.pop();
                cursor.pop();
            }
        }
    }
    None
}

impl ApplicationDag {
    pub fn id(&self) -> &AppId {
        &self.id
    }

    pub fn microservice(&self, id: &str) -> Option<&Microservice> {
        self.microservices.get(id)
    }

    pub fn microservices(&self) -> impl Iterator<Item = &Microservice> {
        self.microservices.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.microservices.contains_key(id)
    }

    pub fn edges(&self) -> &[AppEdge] {
        &self.edges
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&AppEdge> {
        self.succs
            .get(from)?
            .iter()
            .map(|&e| &self.edges[e])
            .find(|e| e.to == to)
    }

    pub fn ingress(&self) -> &BTreeSet<MsId> {
        &self.ingress
    }

    pub fn is_ingress(&self, id: &str) -> bool {
        self.ingress.contains(id)
    }

    pub fn is_iot(&self, id: &str) -> bool {
        self.microservices.get(id).is_some_and(|m| m.placed_on_iot)
    }

    /// Non-IoT microservices in topological order (ties broken by id).
    pub fn topo_order(&self) -> &[MsId] {
        &self.topo_order
    }

    pub fn topo_rank(&self, id: &str) -> Option<usize> {
        self.topo_order.iter().position(|m| m == id)
    }

    /// Incoming edges whose source is not an IoT microservice.
    pub fn service_preds(&self, id: &str) -> impl Iterator<Item = &AppEdge> {
        self.preds
            .get(id)
            .into_iter()
            .flatten()
            .map(|&e| &self.edges[e])
            .filter(|e| !self.microservices[&e.from].placed_on_iot)
    }

    pub fn succs(&self, id: &str) -> impl Iterator<Item = &AppEdge> {
        self.succs
            .get(id)
            .into_iter()
            .flatten()
            .map(|&e| &self.edges[e])
    }
}

/// Ingress demand: domain → ingress microservice → requests/second.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IngressDemand(pub BTreeMap<DomainId, BTreeMap<MsId, f64>>);

impl IngressDemand {
    pub fn rps(&self, domain: &str, ms: &str) -> f64 {
        self.0
            .get(domain)
            .and_then(|m| m.get(ms))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn set(&mut self, domain: DomainId, ms: MsId, rps: f64) {
        self.0.entry(domain).or_default().insert(ms, rps);
    }

    pub fn scaled(&self, k: f64) -> IngressDemand {
        IngressDemand(
            self.0
                .iter()
                .map(|(d, m)| (d.clone(), m.iter().map(|(ms, r)| (ms.clone(), r * k)).collect()))
                .collect(),
        )
    }

    pub fn total(&self) -> f64 {
        self.0.values().flat_map(|m| m.values()).sum()
    }

    /// (domain, ingress microservice, rps) triples in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&DomainId, &MsId, f64)> {
        self.0
            .iter()
            .flat_map(|(d, m)| m.iter().map(move |(ms, r)| (d, ms, *r)))
    }
}

/// A placement request: the application and where its IoT traffic enters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementRequest {
    pub demand: IngressDemand,
}

pub fn validate_demand(
    app: &ApplicationDag,
    graph: &InfrastructureGraph,
    demand: IngressDemand,
) -> Result<PlacementRequest, DemandError> {
    for (domain, ms, rps) in demand.entries() {
        if !graph.has_domain(domain.as_str()) {
            return Err(DemandError::UnknownDomain(domain.to_string()));
        }
        if !graph.has_attachment_in(domain.as_str()) {
            return Err(DemandError::NoAttachment(domain.to_string()));
        }
        if !app.is_ingress(ms.as_str()) {
            return Err(DemandError::NotIngress(ms.to_string()));
        }
        if !(rps >= 0.0 && rps.is_finite()) {
            return Err(DemandError::InvalidRate {
                domain: domain.to_string(),
                ms: ms.to_string(),
            });
        }
    }
    Ok(PlacementRequest { demand })
}

/// Per microservice, requests/second keyed by the scope that must serve them.
pub type DemandProfile = BTreeMap<MsId, BTreeMap<Anchor, f64>>;

/// Adds traffic leaving each domain into the buckets of its locality scope.
pub(crate) fn bucket_by_scope(
    graph: &InfrastructureGraph,
    by_domain: &BTreeMap<DomainId, f64>,
    level: LocalityLevel,
    into: &mut BTreeMap<Anchor, f64>,
) {
    for (domain, rps) in by_domain {
        if let Ok(anchor) = graph.anchor_for(domain.as_str(), level) {
            *into.entry(anchor).or_insert(0.0) += rps;
        }
    }
}

/// Carries ingress demand through the DAG in topological order.
///
/// `locality_of(consumer, consumed)` gives the locality level of an edge;
/// `consumer` is `None` for IoT traffic into an ingress microservice.
/// Before placement the location of a consumer's traffic is unknown, so each
/// request stays attributed to the domain its IoT device connects to.
pub fn propagate_demand<F>(
    app: &ApplicationDag,
    graph: &InfrastructureGraph,
    request: &PlacementRequest,
    locality_of: F,
) -> Result<DemandProfile, DemandError>
where
    F: Fn(Option<&MsId>, &MsId) -> Option<LocalityLevel>,
{
    let mut by_origin: BTreeMap<&MsId, BTreeMap<DomainId, f64>> = BTreeMap::new();
    let mut profile = DemandProfile::new();

    for ms in app.topo_order() {
        let mut origin: BTreeMap<DomainId, f64> = BTreeMap::new();
        let mut buckets: BTreeMap<Anchor, f64> = BTreeMap::new();
        if app.is_ingress(ms.as_str()) {
            let level = locality_of(None, ms).ok_or_else(|| DemandError::MissingLocality {
                consumer: "iot".into(),
                consumed: ms.to_string(),
            })?;
            for (domain, m) in &request.demand.0 {
                if let Some(rps) = m.get(ms) {
                    *origin.entry(domain.clone()).or_insert(0.0) += rps;
                }
            }
            bucket_by_scope(graph, &origin, level, &mut buckets);
        } else {
            for edge in app.service_preds(ms.as_str()) {
                let level =
                    locality_of(Some(&edge.from), ms).ok_or_else(|| DemandError::MissingLocality {
                        consumer: edge.from.to_string(),
                        consumed: ms.to_string(),
                    })?;
                let emitted: BTreeMap<DomainId, f64> = by_origin[&edge.from]
                    .iter()
                    .map(|(d, r)| (d.clone(), r * edge.rate_ratio))
                    .collect();
                bucket_by_scope(graph, &emitted, level, &mut buckets);
                for (d, r) in emitted {
                    *origin.entry(d).or_insert(0.0) += r;
                }
            }
        }
        by_origin.insert(ms, origin);
        profile.insert(ms.clone(), buckets);
    }
    Ok(profile)
}
