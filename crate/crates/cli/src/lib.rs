//! Subcommands of the `edgeplane` binary.
//!
//! Every command returns an [`Exit`] code on success; failures carry their
//! exit code in a [`Failure`] so that `main` can report and exit uniformly.

pub mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use edgeplane::controlplane::{
    handle_alert, place_application, render_domain_routes, validate_plan, Alert, ComplianceReport,
    DeploymentPlan,
};
use edgeplane::meshsim::{run_from_plan, simulate, SimulationReport};
use edgeplane::scenario::{Scenario, ScenarioDoc, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "edgeplane", version, about = "Policy-driven placement and routing for edge-cloud microservices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output document format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Yaml)]
    pub format: Format,
    /// Suppress summaries on stdout; documents and diagnostics are still written.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario document.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Place the application and write the plan document.
    Place {
        #[arg(long)]
        scenario: PathBuf,
        /// Plan document path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the routing rules of a plan, one document per domain.
    Routes {
        #[arg(long)]
        plan: PathBuf,
        /// Directory for the per-domain documents; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the observer loop over the scenario's events.
    Simulate {
        #[arg(long, required_unless_present = "plan", conflicts_with = "plan")]
        scenario: Option<PathBuf>,
        /// Start from an existing plan document instead of placing anew.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Report document path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the final flow table (tab separated).
        #[arg(long)]
        flows: Option<PathBuf>,
    },
    /// Summarize a plan document and its compliance.
    Report {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Serve the policy agent HTTP API for a scenario's policies.
    ServePolicy {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8181")]
        bind: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Yaml,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Yaml => "yaml",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Violation = 1,
    Parse = 2,
    Infeasible = 3,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

impl Failure {
    fn error(exit: Exit, message: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(Failure {
            exit,
            message: message.into(),
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Exit code for an error returned by [`run`]; unclassified errors are 1.
pub fn exit_for(err: &anyhow::Error) -> Exit {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map_or(Exit::Violation, |f| f.exit)
}

/// What `place` writes: the plan, its compliance report and the scenario it
/// was made for, so that later commands need only this one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub plan: DeploymentPlan,
    pub compliance: ComplianceReport,
    pub scenario: ScenarioDoc,
}

pub fn render<T: Serialize>(value: &T, format: Format) -> anyhow::Result<String> {
    Ok(match format {
        Format::Yaml => serde_yaml::to_string(value)?,
        Format::Json => {
            let mut s = serde_json::to_string_pretty(value)?;
            s.push('\n');
            s
        }
    })
}

fn scenario_failure(e: ScenarioError) -> anyhow::Error {
    let exit = if e.is_parse() { Exit::Parse } else { Exit::Violation };
    Failure::error(exit, e.to_string())
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::error(Exit::Parse, format!("{e:#}")))
}

pub fn load_scenario(path: &Path) -> anyhow::Result<(ScenarioDoc, Scenario)> {
    let doc = ScenarioDoc::parse(&read(path)?).map_err(scenario_failure)?;
    let scenario = Scenario::from_doc(&doc).map_err(scenario_failure)?;
    Ok((doc, scenario))
}

/// Reads a plan document and rebuilds the scenario it embeds.
pub fn load_plan(path: &Path) -> anyhow::Result<(PlanDocument, Scenario)> {
    let text = read(path)?;
    let doc: PlanDocument = serde_yaml::from_str(&text)
        .map_err(|e| Failure::error(Exit::Parse, format!("parse: {}: {e}", path.display())))?;
    let scenario = Scenario::from_doc(&doc.scenario).map_err(scenario_failure)?;
    Ok((doc, scenario))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn describe(report: &ComplianceReport) -> String {
    report
        .violations
        .iter()
        .map(|v| format!("  {:?} {}: {}", v.kind, v.subject, v.detail))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn run(cli: &Cli) -> anyhow::Result<Exit> {
    match &cli.command {
        Command::Validate { scenario } => cmd_validate(cli, scenario),
        Command::Place { scenario, out } => cmd_place(cli, scenario, out.as_deref()),
        Command::Routes { plan, out } => cmd_routes(cli, plan, out.as_deref()),
        Command::Simulate {
            scenario,
            plan,
            out,
            flows,
        } => cmd_simulate(cli, scenario.as_deref(), plan.as_deref(), out.as_deref(), flows.as_deref()),
        Command::Report { plan } => cmd_report(cli, plan),
        Command::ServePolicy { scenario, bind } => {
            let (_, s) = load_scenario(scenario)?;
            server::serve_blocking(s, bind, cli.quiet)
        }
    }
}

pub fn cmd_validate(cli: &Cli, path: &Path) -> anyhow::Result<Exit> {
    let (doc, s) = load_scenario(path)?;
    if !cli.quiet {
        println!(
            "ok: {} domain(s), {} node(s), {} microservice(s), {} policy rule(s), {} event(s)",
            s.graph.domains().count(),
            s.graph.nodes().count(),
            s.app.microservices().count(),
            doc.policies.placement_restriction.len() + doc.policies.iot_locality.len() + doc.policies.ms_locality.len(),
            s.events.len()
        );
    }
    Ok(Exit::Ok)
}

pub fn cmd_place(cli: &Cli, path: &Path, out: Option<&Path>) -> anyhow::Result<Exit> {
    let (doc, s) = load_scenario(path)?;
    let started = Instant::now();
    let plan = place_application(&s.graph, &s.app, &s.request, &s.policies).map_err(|e| {
        let exit = if e.is_infeasible() { Exit::Infeasible } else { Exit::Violation };
        Failure::error(exit, e.to_string())
    })?;
    info!("placement took {:?}", started.elapsed());
    let compliance = validate_plan(&s.graph, &s.app, &s.policies, &plan);
    let compliant = compliance.is_compliant();
    if !compliant {
        eprintln!("plan violates policy:\n{}", describe(&compliance));
    }
    let text = render(
        &PlanDocument {
            plan,
            compliance,
            scenario: doc,
        },
        cli.format,
    )?;
    emit(out, &text)?;
    Ok(if compliant { Exit::Ok } else { Exit::Violation })
}

pub fn cmd_routes(cli: &Cli, path: &Path, out: Option<&Path>) -> anyhow::Result<Exit> {
    let (doc, s) = load_plan(path)?;
    let report = validate_plan(&s.graph, &s.app, &s.policies, &doc.plan);
    if !report.is_compliant() {
        return Err(Failure::error(
            Exit::Violation,
            format!("inconsistent plan:\n{}", describe(&report)),
        ));
    }
    let per_domain = render_domain_routes(&s.graph, &doc.plan.routes);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (domain, routes) in &per_domain {
                let file = dir.join(format!("{domain}.{}", cli.format.extension()));
                fs::write(&file, render(routes, cli.format)?)
                    .with_context(|| format!("writing {}", file.display()))?;
            }
            if !cli.quiet {
                println!("wrote {} routing document(s) to {}", per_domain.len(), dir.display());
            }
        }
        None => print!("{}", render(&per_domain, cli.format)?),
    }
    Ok(Exit::Ok)
}

pub fn cmd_simulate(
    cli: &Cli,
    scenario: Option<&Path>,
    plan: Option<&Path>,
    out: Option<&Path>,
    flows: Option<&Path>,
) -> anyhow::Result<Exit> {
    let report: SimulationReport = match (scenario, plan) {
        (_, Some(p)) => {
            let (doc, s) = load_plan(p)?;
            let settings = s.control_settings();
            let mut control = |plan: &DeploymentPlan, alert: &Alert| {
                handle_alert(&s.graph, &s.app, &s.policies, plan, alert, &settings)
            };
            run_from_plan(&s.graph, &s.app, &s.policies, doc.plan, &s.events, &s.settings, &mut control)
        }
        (Some(p), None) => {
            let (_, s) = load_scenario(p)?;
            simulate(&s.graph, &s.app, &s.policies, &s.request, &s.events, &s.settings)
        }
        (None, None) => return Err(Failure::error(Exit::Parse, "simulate needs --scenario or --plan")),
    }
    .map_err(|e| Failure::error(Exit::Violation, e.to_string()))?;

    emit(out, &render(&report, cli.format)?)?;
    if let Some(path) = flows {
        fs::write(path, report.flows.to_table()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(h) = &report.halted {
        eprintln!("halted at tick {}: {}", h.tick, h.reason);
        return Ok(if h.infeasible { Exit::Infeasible } else { Exit::Violation });
    }
    if !report.violations.is_empty() {
        eprintln!("{} violation(s) during the run", report.violations.len());
        return Ok(Exit::Violation);
    }
    if !cli.quiet && out.is_some() {
        println!(
            "ok: {} tick(s), {} alert(s), final revision {}",
            report.ticks_run,
            report.alerts.len(),
            report.final_revision
        );
    }
    Ok(Exit::Ok)
}

pub fn cmd_report(cli: &Cli, path: &Path) -> anyhow::Result<Exit> {
    let (doc, s) = load_plan(path)?;
    let plan = &doc.plan;
    let report = validate_plan(&s.graph, &s.app, &s.policies, plan);
    if !cli.quiet {
        println!("application {} revision {}", plan.app, plan.revision);
        for ms in s.app.topo_order() {
            let mut per_domain: BTreeMap<String, u32> = BTreeMap::new();
            for (node, count) in plan.mapping.instances(ms.as_str()) {
                let domain = s.graph.domain_of_node(node.as_str()).map_or("?", |d| d.as_str());
                *per_domain.entry(domain.to_owned()).or_insert(0) += count;
            }
            let cells: Vec<String> = per_domain.iter().map(|(d, c)| format!("{d}={c}")).collect();
            println!("  {ms}: {}", cells.join(" "));
        }
        println!("  routing rules: {}", plan.routes.rules.len());
        if report.is_compliant() {
            println!("compliant");
        } else {
            println!("{} violation(s):\n{}", report.violations.len(), describe(&report));
        }
    }
    Ok(if report.is_compliant() { Exit::Ok } else { Exit::Violation })
}
