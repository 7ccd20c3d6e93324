//! Multi-domain edge-cloud infrastructure model.
//!
//! Regions group administrative domains; domains own compute nodes and IoT
//! attachment points. The graph is immutable once loaded. Free capacity is
//! tracked separately in a [`CapacityLedger`] so that planning can work on a
//! snapshot without touching the shared graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{DeviceGroupId, DomainId, NodeId, RegionId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("EmptyTopology: topology defines no domains")]
    EmptyTopology,
    #[error("DuplicateId: `{0}` is defined more than once")]
    DuplicateId(String),
    #[error("DanglingReference: {kind} `{id}` referenced by `{by}` does not exist")]
    DanglingReference {
        id: String,
        kind: &'static str,
        by: String,
    },
    #[error("RegionMismatch: domain `{domain}` declares region `{declared}` but is listed under `{listed}`")]
    RegionMismatch {
        domain: String,
        declared: String,
        listed: String,
    },
    #[error("EmptyRegion: region `{0}` lists no domains")]
    EmptyRegion(String),
    #[error("InvalidCapacity: node `{0}` must have positive cpu and memory capacity")]
    InvalidCapacity(String),
    #[error("UnknownDomain: `{0}`")]
    UnknownDomain(String),
    #[error("UnknownNode: `{0}`")]
    UnknownNode(String),
}

/// Scope within which traffic for a microservice must stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalityLevel {
    StrictDomain,
    StrictRegion,
    Global,
}

impl LocalityLevel {
    pub const ALL: [LocalityLevel; 3] = [
        LocalityLevel::StrictDomain,
        LocalityLevel::StrictRegion,
        LocalityLevel::Global,
    ];

    /// Larger is stricter.
    pub fn strictness(self) -> u8 {
        match self {
            LocalityLevel::StrictDomain => 2,
            LocalityLevel::StrictRegion => 1,
            LocalityLevel::Global => 0,
        }
    }

    pub fn stricter(self, other: LocalityLevel) -> LocalityLevel {
        if other.strictness() > self.strictness() {
            other
        } else {
            self
        }
    }

    /// Name used by the policy wire API (`StrictDomain`, ...).
    pub fn wire_name(self) -> &'static str {
        match self {
            LocalityLevel::StrictDomain => "StrictDomain",
            LocalityLevel::StrictRegion => "StrictRegion",
            LocalityLevel::Global => "Global",
        }
    }

    /// Name used in scenario documents (`strict-domain`, ...).
    pub fn doc_name(self) -> &'static str {
        match self {
            LocalityLevel::StrictDomain => "strict-domain",
            LocalityLevel::StrictRegion => "strict-region",
            LocalityLevel::Global => "global",
        }
    }
}

impl fmt::Display for LocalityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.doc_name())
    }
}

impl FromStr for LocalityLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict-domain" | "StrictDomain" => Ok(LocalityLevel::StrictDomain),
            "strict-region" | "StrictRegion" => Ok(LocalityLevel::StrictRegion),
            "global" | "Global" => Ok(LocalityLevel::Global),
            other => Err(format!("unknown locality level `{other}`")),
        }
    }
}

/// A concrete locality scope: one domain, one region, or everything.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Anchor {
    Domain(DomainId),
    Region(RegionId),
    Global,
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::Domain(d) => write!(f, "domain/{d}"),
            Anchor::Region(r) => write!(f, "region/{r}"),
            Anchor::Global => f.write_str("global"),
        }
    }
}

impl FromStr for Anchor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(Anchor::Global);
        }
        match s.split_once('/') {
            Some(("domain", id)) if !id.is_empty() => Ok(Anchor::Domain(id.into())),
            Some(("region", id)) if !id.is_empty() => Ok(Anchor::Region(id.into())),
            _ => Err(format!("malformed anchor `{s}`")),
        }
    }
}

impl TryFrom<String> for Anchor {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Anchor> for String {
    fn from(a: Anchor) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Edge,
    Cloud,
}

/// CPU in millicores and memory in mebibytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpu_m: u64,
    pub mem_mi: u64,
}

impl Resources {
    pub fn new(cpu_m: u64, mem_mi: u64) -> Self {
        Self { cpu_m, mem_mi }
    }

    pub fn times(self, n: u32) -> Self {
        Self {
            cpu_m: self.cpu_m * u64::from(n),
            mem_mi: self.mem_mi * u64::from(n),
        }
    }

    pub fn fits_in(self, free: Resources) -> bool {
        self.cpu_m <= free.cpu_m && self.mem_mi <= free.mem_mi
    }

    /// How many copies of `self` fit into `free`.
    pub fn copies_in(self, free: Resources) -> u32 {
        let by_cpu = free.cpu_m.checked_div(self.cpu_m).unwrap_or(u64::MAX);
        let by_mem = free.mem_mi.checked_div(self.mem_mi).unwrap_or(u64::MAX);
        by_cpu.min(by_mem).min(u64::from(u32::MAX)) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub domain_ids: BTreeSet<DomainId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    pub id: DomainId,
    pub region_id: RegionId,
    pub admin_id: String,
    pub kind: DomainKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeNode {
    pub id: NodeId,
    pub domain_id: DomainId,
    pub capacity: Resources,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoTAttachment {
    pub device_group_id: DeviceGroupId,
    pub domain_id: DomainId,
}

/// Validated infrastructure. Construct with [`load_topology`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfrastructureGraph {
    regions: BTreeMap<RegionId, Region>,
    domains: BTreeMap<DomainId, Domain>,
    nodes: BTreeMap<NodeId, ComputeNode>,
    attachments: BTreeMap<DeviceGroupId, IoTAttachment>,
    nodes_by_domain: BTreeMap<DomainId, Vec<NodeId>>,
}

// Scenario document fragment.

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    #[serde(default)]
    pub regions: Vec<RegionDoc>,
    #[serde(default)]
    pub domains: Vec<DomainDoc>,
    #[serde(default)]
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub attachments: Vec<AttachmentDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDoc {
    pub id: String,
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDoc {
    pub id: String,
    pub region: String,
    pub admin: String,
    pub kind: DomainKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub domain: String,
    pub cpu_m: u64,
    pub mem_mi: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentDoc {
    pub id: String,
    pub domain: String,
}

pub fn load_topology(doc: &TopologyDoc) -> Result<InfrastructureGraph, TopologyError> {
    if doc.domains.is_empty() {
        return Err(TopologyError::EmptyTopology);
    }

    // Region and domain ids share one namespace so that anchors are unambiguous.
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for id in doc.regions.iter().map(|r| &r.id).chain(doc.domains.iter().map(|d| &d.id)) {
        if !seen.insert(id.as_str()) {
            return Err(TopologyError::DuplicateId(id.clone()));
        }
    }

    let mut regions = BTreeMap::new();
    for r in &doc.regions {
        if r.domains.is_empty() {
            return Err(TopologyError::EmptyRegion(r.id.clone()));
        }
        let mut domain_ids = BTreeSet::new();
        for d in &r.domains {
            if !domain_ids.insert(DomainId::new(d.as_str())) {
                return Err(TopologyError::DuplicateId(d.clone()));
            }
        }
        regions.insert(
            RegionId::new(r.id.as_str()),
            Region {
                id: RegionId::new(r.id.as_str()),
                domain_ids,
            },
        );
    }

    let mut domains = BTreeMap::new();
    for d in &doc.domains {
        let region_id = RegionId::new(d.region.as_str());
        if !regions.contains_key(&region_id) {
            return Err(TopologyError::DanglingReference {
                id: d.region.clone(),
                kind: "region",
                by: d.id.clone(),
            });
        }
        domains.insert(
            DomainId::new(d.id.as_str()),
            Domain {
                id: DomainId::new(d.id.as_str()),
                region_id,
                admin_id: d.admin.clone(),
                kind: d.kind,
            },
        );
    }

    // Region membership lists and the domains' own region field must agree.
    for region in regions.values() {
        for d in &region.domain_ids {
            let domain = domains
                .get(d)
                .ok_or_else(|| TopologyError::DanglingReference {
                    id: d.to_string(),
                    kind: "domain",
                    by: region.id.to_string(),
                })?;
            if domain.region_id != region.id {
                return Err(TopologyError::RegionMismatch {
                    domain: d.to_string(),
                    declared: domain.region_id.to_string(),
                    listed: region.id.to_string(),
                });
            }
        }
    }
    for domain in domains.values() {
        if !regions[&domain.region_id].domain_ids.contains(&domain.id) {
            return Err(TopologyError::RegionMismatch {
                domain: domain.id.to_string(),
                declared: domain.region_id.to_string(),
                listed: "<none>".to_owned(),
            });
        }
    }

    let mut nodes = BTreeMap::new();
    let mut nodes_by_domain: BTreeMap<DomainId, Vec<NodeId>> =
        domains.keys().map(|d| (d.clone(), Vec::new())).collect();
    for n in &doc.nodes {
        let id = NodeId::new(n.id.as_str());
        let domain_id = DomainId::new(n.domain.as_str());
        if nodes.contains_key(&id) {
            return Err(TopologyError::DuplicateId(n.id.clone()));
        }
        let Some(list) = nodes_by_domain.get_mut(&domain_id) else {
            return Err(TopologyError::DanglingReference {
                id: n.domain.clone(),
                kind: "domain",
                by: n.id.clone(),
            });
        };
        if n.cpu_m == 0 || n.mem_mi == 0 {
            return Err(TopologyError::InvalidCapacity(n.id.clone()));
        }
        list.push(id.clone());
        nodes.insert(
            id.clone(),
            ComputeNode {
                id,
                domain_id,
                capacity: Resources::new(n.cpu_m, n.mem_mi),
            },
        );
    }
    for list in nodes_by_domain.values_mut() {
        list.sort();
    }

    let mut attachments = BTreeMap::new();
    for a in &doc.attachments {
        let id = DeviceGroupId::new(a.id.as_str());
        if attachments.contains_key(&id) {
            return Err(TopologyError::DuplicateId(a.id.clone()));
        }
        let domain_id = DomainId::new(a.domain.as_str());
        if !domains.contains_key(&domain_id) {
            return Err(TopologyError::DanglingReference {
                id: a.domain.clone(),
                kind: "domain",
                by: a.id.clone(),
            });
        }
        attachments.insert(
            id.clone(),
            IoTAttachment {
                device_group_id: id,
                domain_id,
            },
        );
    }

    Ok(InfrastructureGraph {
        regions,
        domains,
        nodes,
        attachments,
        nodes_by_domain,
    })
}

impl InfrastructureGraph {
    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.values()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ComputeNode> {
        self.nodes.values()
    }

    pub fn attachments(&self) -> impl Iterator<Item = &IoTAttachment> {
        self.attachments.values()
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = &DomainId> {
        self.domains.keys()
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.get(id)
    }

    pub fn domain(&self, id: &str) -> Option<&Domain> {
        self.domains.get(id)
    }

    pub fn node(&self, id: &str) -> Option<&ComputeNode> {
        self.nodes.get(id)
    }

    pub fn has_domain(&self, id: &str) -> bool {
        self.domains.contains_key(id)
    }

    pub fn has_attachment_in(&self, domain: &str) -> bool {
        self.attachments.values().any(|a| a.domain_id == *domain)
    }

    /// Nodes of one domain, sorted by id.
    pub fn nodes_of_domain(&self, domain: &str) -> &[NodeId] {
        self.nodes_by_domain
            .get(domain)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn region_of(&self, domain: &str) -> Result<&RegionId, TopologyError> {
        self.domains
            .get(domain)
            .map(|d| &d.region_id)
            .ok_or_else(|| TopologyError::UnknownDomain(domain.to_owned()))
    }

    pub fn domain_of_node(&self, node: &str) -> Result<&DomainId, TopologyError> {
        self.nodes
            .get(node)
            .map(|n| &n.domain_id)
            .ok_or_else(|| TopologyError::UnknownNode(node.to_owned()))
    }

    /// The scope reached from `domain` at the given locality level.
    pub fn anchor_for(&self, domain: &str, level: LocalityLevel) -> Result<Anchor, TopologyError> {
        let d = self
            .domains
            .get(domain)
            .ok_or_else(|| TopologyError::UnknownDomain(domain.to_owned()))?;
        Ok(match level {
            LocalityLevel::StrictDomain => Anchor::Domain(d.id.clone()),
            LocalityLevel::StrictRegion => Anchor::Region(d.region_id.clone()),
            LocalityLevel::Global => Anchor::Global,
        })
    }

    /// Domains covered by an anchor, in id order. Unknown anchors cover nothing.
    pub fn domains_in(&self, anchor: &Anchor) -> Vec<DomainId> {
        match anchor {
            Anchor::Domain(d) if self.domains.contains_key(d) => vec![d.clone()],
            Anchor::Domain(_) => Vec::new(),
            Anchor::Region(r) => self
                .regions
                .get(r)
                .map(|r| r.domain_ids.iter().cloned().collect())
                .unwrap_or_default(),
            Anchor::Global => self.domains.keys().cloned().collect(),
        }
    }

    pub fn anchor_contains(&self, anchor: &Anchor, domain: &str) -> bool {
        match anchor {
            Anchor::Domain(d) => d == domain,
            Anchor::Region(r) => self
                .domains
                .get(domain)
                .is_some_and(|d| &d.region_id == r),
            Anchor::Global => self.domains.contains_key(domain),
        }
    }

    /// Nodes reachable from `anchor_domain` at `scope`, ordered by
    /// (domain id, node id).
    pub fn nodes_in_scope(
        &self,
        anchor_domain: &str,
        scope: LocalityLevel,
    ) -> Result<Vec<NodeId>, TopologyError> {
        let anchor = self.anchor_for(anchor_domain, scope)?;
        Ok(self.nodes_in_anchor(&anchor))
    }

    pub fn nodes_in_anchor(&self, anchor: &Anchor) -> Vec<NodeId> {
        self.domains_in(anchor)
            .iter()
            .flat_map(|d| self.nodes_of_domain(d.as_str()).iter().cloned())
            .collect()
    }
}

/// Free capacity per node during planning.
///
/// Reservations either succeed completely or leave the ledger untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapacityLedger {
    free: BTreeMap<NodeId, Resources>,
}

impl CapacityLedger {
    /// Every node fully free.
    pub fn new(graph: &InfrastructureGraph) -> Self {
        Self {
            free: graph
                .nodes()
                .map(|n| (n.id.clone(), n.capacity))
                .collect(),
        }
    }

    pub fn free(&self, node: &str) -> Resources {
        self.free.get(node).copied().unwrap_or_default()
    }

    /// Removes all remaining capacity of a node.
    pub fn zero(&mut self, node: &str) {
        if let Some(f) = self.free.get_mut(node) {
            *f = Resources::default();
        }
    }

    pub fn reserve(&mut self, node: &str, req: Resources) -> bool {
        match self.free.get_mut(node) {
            Some(f) if req.fits_in(*f) => {
                f.cpu_m -= req.cpu_m;
                f.mem_mi -= req.mem_mi;
                true
            }
            _ => false,
        }
    }

    /// Returns capacity to a node. Callers only release what they reserved.
    pub fn release(&mut self, node: &str, req: Resources) {
        if let Some(f) = self.free.get_mut(node) {
            f.cpu_m += req.cpu_m;
            f.mem_mi += req.mem_mi;
        }
    }

    /// Forces a reservation even when it overdraws the node. Used when
    /// rebuilding a ledger from an existing plan; returns whether it fit.
    pub(crate) fn charge(&mut self, node: &str, req: Resources) -> bool {
        match self.free.get_mut(node) {
            Some(f) => {
                let fit = req.fits_in(*f);
                f.cpu_m = f.cpu_m.saturating_sub(req.cpu_m);
                f.mem_mi = f.mem_mi.saturating_sub(req.mem_mi);
                fit
            }
            None => false,
        }
    }
}
