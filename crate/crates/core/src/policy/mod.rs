//! Policy-as-Code: placement restrictions and the two locality policy types.
//!
//! A [`PolicySet`] is immutable after [`parse_policies`] and evaluation is
//! pure, so any number of threads may query it concurrently. The two query
//! families mirror a policy agent's endpoints: [`get_data`] returns stored
//! policy data (or the default for unlisted keys) and [`is_allowed`] returns a
//! decision with a reason.

pub mod api;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::appmodel::ApplicationDag;
use crate::ids::{AppId, DomainId, MsId};
use crate::topology::{Anchor, InfrastructureGraph};

pub use crate::topology::LocalityLevel;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("UnknownMicroservice: `{0}`")]
    UnknownMicroservice(String),
    #[error("UnknownDomain: `{0}`")]
    UnknownDomain(String),
    #[error("DuplicateRule: {policy} has more than one rule for `{key}`")]
    DuplicateRule { policy: PolicyType, key: String },
    #[error("NonIngressIotRule: `{0}` is not an ingress microservice")]
    NonIngressIotRule(String),
    #[error("NotAnEdge: {0}→{1} is not an edge of the application")]
    NotAnEdge(String, String),
    #[error("UnknownPolicyType: `{0}`")]
    UnknownPolicyType(String),
    #[error("MalformedKey: {policy} expects {expected}")]
    MalformedKey {
        policy: PolicyType,
        expected: &'static str,
    },
    #[error("MissingAnchor: locality {0} needs an anchor domain")]
    MissingAnchor(LocalityLevel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyType {
    PlacementRestriction,
    IotLocality,
    MsLocality,
}

impl PolicyType {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyType::PlacementRestriction => "placement_restriction",
            PolicyType::IotLocality => "iot_locality",
            PolicyType::MsLocality => "ms_locality",
        }
    }
}

impl fmt::Display for PolicyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyType {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "placement_restriction" => Ok(PolicyType::PlacementRestriction),
            "iot_locality" => Ok(PolicyType::IotLocality),
            "ms_locality" => Ok(PolicyType::MsLocality),
            other => Err(PolicyError::UnknownPolicyType(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestrictionMode {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Restriction {
    pub mode: RestrictionMode,
    pub domains: BTreeSet<DomainId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySet {
    app_id: AppId,
    restrictions: BTreeMap<MsId, Restriction>,
    iot_locality: BTreeMap<MsId, LocalityLevel>,
    ms_locality: BTreeMap<(MsId, MsId), LocalityLevel>,
    default_locality: LocalityLevel,
    // Snapshot of the identifiers queries may name.
    microservices: BTreeSet<MsId>,
    ingress: BTreeSet<MsId>,
    domains: BTreeSet<DomainId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoliciesDoc {
    #[serde(default)]
    pub placement_restriction: Vec<RestrictionDoc>,
    #[serde(default)]
    pub iot_locality: Vec<IotLocalityDoc>,
    #[serde(default)]
    pub ms_locality: Vec<MsLocalityDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_locality: Option<LocalityLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionDoc {
    pub microservice: String,
    pub mode: RestrictionMode,
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IotLocalityDoc {
    pub microservice: String,
    pub level: LocalityLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsLocalityDoc {
    pub consumer: String,
    pub consumed: String,
    pub level: LocalityLevel,
}

pub fn parse_policies(
    doc: &PoliciesDoc,
    app: &ApplicationDag,
    graph: &InfrastructureGraph,
) -> Result<PolicySet, PolicyError> {
    let known_ms = |id: &str| {
        if app.contains(id) {
            Ok(MsId::new(id))
        } else {
            Err(PolicyError::UnknownMicroservice(id.to_owned()))
        }
    };

    let mut restrictions = BTreeMap::new();
    for r in &doc.placement_restriction {
        let ms = known_ms(&r.microservice)?;
        let mut domains = BTreeSet::new();
        for d in &r.domains {
            if !graph.has_domain(d) {
                return Err(PolicyError::UnknownDomain(d.clone()));
            }
            domains.insert(DomainId::new(d.as_str()));
        }
        let rule = Restriction {
            mode: r.mode,
            domains,
        };
        if restrictions.insert(ms, rule).is_some() {
            return Err(PolicyError::DuplicateRule {
                policy: PolicyType::PlacementRestriction,
                key: r.microservice.clone(),
            });
        }
    }

    let mut iot_locality = BTreeMap::new();
    for r in &doc.iot_locality {
        let ms = known_ms(&r.microservice)?;
        if !app.is_ingress(ms.as_str()) {
            return Err(PolicyError::NonIngressIotRule(r.microservice.clone()));
        }
        if iot_locality.insert(ms, r.level).is_some() {
            return Err(PolicyError::DuplicateRule {
                policy: PolicyType::IotLocality,
                key: r.microservice.clone(),
            });
        }
    }

    let mut ms_locality = BTreeMap::new();
    for r in &doc.ms_locality {
        let consumer = known_ms(&r.consumer)?;
        let consumed = known_ms(&r.consumed)?;
        if app.edge(consumer.as_str(), consumed.as_str()).is_none() {
            return Err(PolicyError::NotAnEdge(r.consumer.clone(), r.consumed.clone()));
        }
        if ms_locality.insert((consumer, consumed), r.level).is_some() {
            return Err(PolicyError::DuplicateRule {
                policy: PolicyType::MsLocality,
                key: format!("{}/{}", r.consumer, r.consumed),
            });
        }
    }

    Ok(PolicySet {
        app_id: app.id().clone(),
        restrictions,
        iot_locality,
        ms_locality,
        default_locality: doc.default_locality.unwrap_or(LocalityLevel::Global),
        microservices: app.microservices().map(|m| m.id.clone()).collect(),
        ingress: app.ingress().clone(),
        domains: graph.domain_ids().cloned().collect(),
    })
}

impl PolicySet {
    pub fn app_id(&self) -> &AppId {
        &self.app_id
    }

    pub fn default_locality(&self) -> LocalityLevel {
        self.default_locality
    }

    pub fn restrictions(&self) -> &BTreeMap<MsId, Restriction> {
        &self.restrictions
    }

    pub fn iot_rules(&self) -> &BTreeMap<MsId, LocalityLevel> {
        &self.iot_locality
    }

    pub fn ms_rules(&self) -> &BTreeMap<(MsId, MsId), LocalityLevel> {
        &self.ms_locality
    }

    pub fn knows_microservice(&self, id: &str) -> bool {
        self.microservices.contains(id)
    }

    pub fn knows_domain(&self, id: &str) -> bool {
        self.domains.contains(id)
    }

    /// Locality between IoT devices and an ingress microservice.
    pub fn iot_level(&self, ms: &str) -> LocalityLevel {
        self.iot_locality
            .get(ms)
            .copied()
            .unwrap_or(self.default_locality)
    }

    /// Locality between a consumer and the microservice it consumes.
    pub fn ms_level(&self, consumer: &str, consumed: &str) -> LocalityLevel {
        self.ms_locality
            .get(&(MsId::new(consumer), MsId::new(consumed)))
            .copied()
            .unwrap_or(self.default_locality)
    }

    /// Level of traffic into `consumed`; `consumer` is `None` for IoT traffic.
    pub fn level(&self, consumer: Option<&str>, consumed: &str) -> LocalityLevel {
        match consumer {
            None => self.iot_level(consumed),
            Some(c) => self.ms_level(c, consumed),
        }
    }

    fn check_ms(&self, id: &str) -> Result<(), PolicyError> {
        if self.knows_microservice(id) {
            Ok(())
        } else {
            Err(PolicyError::UnknownMicroservice(id.to_owned()))
        }
    }

    fn check_domain(&self, id: &str) -> Result<(), PolicyError> {
        if self.knows_domain(id) {
            Ok(())
        } else {
            Err(PolicyError::UnknownDomain(id.to_owned()))
        }
    }
}

/// Key of a data query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyKey {
    Microservice(MsId),
    Pair(MsId, MsId),
}

impl PolicyKey {
    /// Builds a key from URL path segments.
    pub fn from_segments(policy: PolicyType, segments: &[&str]) -> Result<Self, PolicyError> {
        match (policy, segments) {
            (PolicyType::MsLocality, [c, d]) if !c.is_empty() && !d.is_empty() => {
                Ok(PolicyKey::Pair(MsId::new(*c), MsId::new(*d)))
            }
            (PolicyType::MsLocality, _) => Err(PolicyError::MalformedKey {
                policy,
                expected: "<consumer>/<consumed>",
            }),
            (_, [m]) if !m.is_empty() => Ok(PolicyKey::Microservice(MsId::new(*m))),
            _ => Err(PolicyError::MalformedKey {
                policy,
                expected: "<microservice>",
            }),
        }
    }
}

/// Value returned by a data query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyData {
    Restriction(Restriction),
    Unrestricted,
    Locality(LocalityLevel),
}

impl PolicyData {
    /// JSON form used by the wire API.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            PolicyData::Restriction(r) => serde_json::json!({
                "mode": r.mode,
                "domains": r.domains,
            }),
            PolicyData::Unrestricted => serde_json::json!({
                "mode": "unrestricted",
                "domains": [],
            }),
            PolicyData::Locality(l) => serde_json::Value::from(l.wire_name()),
        }
    }
}

pub fn get_data(set: &PolicySet, policy: PolicyType, key: &PolicyKey) -> Result<PolicyData, PolicyError> {
    match (policy, key) {
        (PolicyType::PlacementRestriction, PolicyKey::Microservice(ms)) => {
            set.check_ms(ms.as_str())?;
            Ok(set
                .restrictions
                .get(ms)
                .cloned()
                .map_or(PolicyData::Unrestricted, PolicyData::Restriction))
        }
        (PolicyType::IotLocality, PolicyKey::Microservice(ms)) => {
            set.check_ms(ms.as_str())?;
            Ok(PolicyData::Locality(set.iot_level(ms.as_str())))
        }
        (PolicyType::MsLocality, PolicyKey::Pair(c, d)) => {
            set.check_ms(c.as_str())?;
            set.check_ms(d.as_str())?;
            Ok(PolicyData::Locality(set.ms_level(c.as_str(), d.as_str())))
        }
        (PolicyType::MsLocality, _) => Err(PolicyError::MalformedKey {
            policy,
            expected: "<consumer>/<consumed>",
        }),
        _ => Err(PolicyError::MalformedKey {
            policy,
            expected: "<microservice>",
        }),
    }
}

/// String-keyed variant of [`get_data`].
pub fn get_data_by_name(
    set: &PolicySet,
    policy_type: &str,
    segments: &[&str],
) -> Result<PolicyData, PolicyError> {
    let policy: PolicyType = policy_type.parse()?;
    let key = PolicyKey::from_segments(policy, segments)?;
    get_data(set, policy, &key)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub allowed: bool,
    pub reason: String,
}

impl PolicyDecision {
    fn allow(reason: String) -> Self {
        Self {
            allowed: true,
            reason,
        }
    }

    fn deny(reason: String) -> Self {
        Self {
            allowed: false,
            reason,
        }
    }
}

/// Placement-restriction evaluation for one (microservice, domain) pair.
pub fn is_allowed(set: &PolicySet, ms: &str, domain: &str) -> Result<PolicyDecision, PolicyError> {
    set.check_ms(ms)?;
    set.check_domain(domain)?;
    Ok(match set.restrictions.get(ms) {
        None => PolicyDecision::allow(format!("restriction: {ms} unrestricted")),
        Some(r) => {
            let listed = r.domains.contains(domain);
            match (r.mode, listed) {
                (RestrictionMode::Allow, true) => {
                    PolicyDecision::allow(format!("restriction: {ms} allow-list includes {domain}"))
                }
                (RestrictionMode::Allow, false) => {
                    PolicyDecision::deny(format!("restriction: {ms} allow-list excludes {domain}"))
                }
                (RestrictionMode::Deny, true) => {
                    PolicyDecision::deny(format!("restriction: {ms} deny-list contains {domain}"))
                }
                (RestrictionMode::Deny, false) => PolicyDecision::allow(format!(
                    "restriction: {ms} deny-list does not contain {domain}"
                )),
            }
        }
    })
}

/// Whether an ingress microservice instance in `domain` may serve IoT devices
/// attached to `device_domain`.
pub fn iot_locality_allows(
    set: &PolicySet,
    graph: &InfrastructureGraph,
    ms: &str,
    device_domain: &str,
    domain: &str,
) -> Result<PolicyDecision, PolicyError> {
    set.check_ms(ms)?;
    set.check_domain(device_domain)?;
    set.check_domain(domain)?;
    let level = set.iot_level(ms);
    Ok(locality_decision(graph, "iot_locality", &format!("iot→{ms}"), level, device_domain, domain))
}

/// Whether `consumed` may be served from `domain` to a consumer in
/// `consumer_domain`.
pub fn ms_locality_allows(
    set: &PolicySet,
    graph: &InfrastructureGraph,
    consumer: &str,
    consumed: &str,
    consumer_domain: &str,
    domain: &str,
) -> Result<PolicyDecision, PolicyError> {
    set.check_ms(consumer)?;
    set.check_ms(consumed)?;
    set.check_domain(consumer_domain)?;
    set.check_domain(domain)?;
    let level = set.ms_level(consumer, consumed);
    Ok(locality_decision(
        graph,
        "ms_locality",
        &format!("{consumer}→{consumed}"),
        level,
        consumer_domain,
        domain,
    ))
}

fn locality_decision(
    graph: &InfrastructureGraph,
    policy: &str,
    edge: &str,
    level: LocalityLevel,
    from: &str,
    to: &str,
) -> PolicyDecision {
    let anchor = graph
        .anchor_for(from, level)
        .expect("domain checked against the policy snapshot");
    if graph.anchor_contains(&anchor, to) {
        PolicyDecision::allow(format!("{policy}: {edge} is {level}; {to} within {anchor}"))
    } else {
        PolicyDecision::deny(format!("{policy}: {edge} is {level}; {to} outside {anchor}"))
    }
}

/// Domains that pass the placement restriction and lie inside `anchor`.
pub fn eligible_in_anchor(
    set: &PolicySet,
    ms: &str,
    anchor: &Anchor,
    graph: &InfrastructureGraph,
) -> Result<Vec<DomainId>, PolicyError> {
    let mut out = Vec::new();
    for d in graph.domains_in(anchor) {
        if is_allowed(set, ms, d.as_str())?.allowed {
            out.push(d);
        }
    }
    Ok(out)
}

pub fn eligible_domains(
    set: &PolicySet,
    ms: &str,
    anchor_domain: Option<&str>,
    locality: LocalityLevel,
    graph: &InfrastructureGraph,
) -> Result<Vec<DomainId>, PolicyError> {
    set.check_ms(ms)?;
    let anchor = match (anchor_domain, locality) {
        (_, LocalityLevel::Global) => Anchor::Global,
        (None, level) => return Err(PolicyError::MissingAnchor(level)),
        (Some(d), level) => {
            set.check_domain(d)?;
            graph
                .anchor_for(d, level)
                .map_err(|_| PolicyError::UnknownDomain(d.to_owned()))?
        }
    };
    eligible_in_anchor(set, ms, &anchor, graph)
}

const PARALLEL_CHUNK: usize = 256;

/// Evaluates many restriction queries, in parallel for large batches. Element
/// `i` of the result answers query `i`; the first invalid query (by position)
/// aborts the batch.
pub fn batch_evaluate<M, D>(set: &PolicySet, queries: &[(M, D)]) -> Result<Vec<PolicyDecision>, PolicyError>
where
    M: AsRef<str> + Sync,
    D: AsRef<str> + Sync,
{
    let eval = |chunk: &[(M, D)]| -> Result<Vec<PolicyDecision>, PolicyError> {
        chunk
            .iter()
            .map(|(m, d)| is_allowed(set, m.as_ref(), d.as_ref()))
            .collect()
    };
    if queries.len() <= PARALLEL_CHUNK {
        return eval(queries);
    }
    let parts: Vec<Result<Vec<PolicyDecision>, PolicyError>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(PARALLEL_CHUNK)
            .map(|chunk| s.spawn(move || eval(chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("policy evaluation does not panic"))
            .collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}
