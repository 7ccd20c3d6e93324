//! The single scenario document: topology, application, policies, demand,
//! events and settings.

use serde::{Deserialize, Serialize};

use crate::appmodel::{validate_app, validate_demand, AppError, ApplicationDag, ApplicationDoc, DemandError, IngressDemand, PlacementRequest};
use crate::controlplane::ControlSettings;
use crate::meshsim::{validate_events, ScenarioEvent, SimError, SimulationSettings};
use crate::policy::{parse_policies, PoliciesDoc, PolicyError, PolicySet};
use crate::topology::{load_topology, InfrastructureGraph, TopologyDoc, TopologyError};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("parse: {0}")]
    Parse(String),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("application: {0}")]
    Application(#[from] AppError),
    #[error("policies: {0}")]
    Policies(#[from] PolicyError),
    #[error("demand: {0}")]
    Demand(#[from] DemandError),
    #[error("events: {0}")]
    Events(SimError),
    #[error("settings: {0}")]
    Settings(String),
}

impl ScenarioError {
    /// Parse errors are syntax or schema problems; everything else is a
    /// semantic error in an otherwise well-formed document.
    pub fn is_parse(&self) -> bool {
        matches!(self, ScenarioError::Parse(_))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overload_threshold: Option<f64>,
    /// Simulation length; defaults to one tick past the last event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticks: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub topology: TopologyDoc,
    pub application: ApplicationDoc,
    #[serde(default)]
    pub policies: PoliciesDoc,
    #[serde(default)]
    pub demand: IngressDemand,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub settings: SettingsDoc,
}

impl ScenarioDoc {
    /// Parses YAML or JSON (JSON is valid YAML).
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        serde_yaml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }
}

/// A scenario whose fragments have been validated against each other.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: InfrastructureGraph,
    pub app: ApplicationDag,
    pub policies: PolicySet,
    pub request: PlacementRequest,
    pub events: Vec<ScenarioEvent>,
    pub settings: SimulationSettings,
}

impl Scenario {
    pub fn from_doc(doc: &ScenarioDoc) -> Result<Self, ScenarioError> {
        let graph = load_topology(&doc.topology)?;
        let app = validate_app(&doc.application)?;
        let policies = parse_policies(&doc.policies, &app, &graph)?;
        let request = validate_demand(&app, &graph, doc.demand.clone())?;
        validate_events(&graph, &app, &doc.events).map_err(ScenarioError::Events)?;

        let overload_threshold = doc
            .settings
            .overload_threshold
            .unwrap_or(ControlSettings::default().overload_threshold);
        if !(overload_threshold > 0.0 && overload_threshold <= 1.0) {
            return Err(ScenarioError::Settings(format!(
                "overload_threshold {overload_threshold} must be in (0, 1]"
            )));
        }
        let ticks = match doc.settings.ticks {
            Some(0) => return Err(ScenarioError::Settings("ticks must be at least 1".to_owned())),
            Some(t) => t,
            None => doc.events.iter().map(|e| e.tick + 1).max().unwrap_or(1),
        };
        if let Some(late) = doc.events.iter().find(|e| e.tick >= ticks) {
            return Err(ScenarioError::Settings(format!(
                "event at tick {} is past the last tick {}",
                late.tick,
                ticks - 1
            )));
        }

        Ok(Self {
            graph,
            app,
            policies,
            request,
            events: doc.events.clone(),
            settings: SimulationSettings {
                ticks,
                overload_threshold,
            },
        })
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Self::from_doc(&ScenarioDoc::parse(text)?)
    }

    pub fn control_settings(&self) -> ControlSettings {
        ControlSettings {
            overload_threshold: self.settings.overload_threshold,
        }
    }
}
