mod common;

use common::checks::{self, placed};
use edgeplane::meshsim::{simulate, EventAction, ScenarioEvent, SimulationSettings};
use edgeplane::scenario::Scenario;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Ingress demand enters in full, and every edge carries exactly the
    /// consumer's served rate times the edge ratio.
    #[test]
    fn flow_is_conserved(doc in common::scenario(common::FUZZ)) {
        checks::flow_is_conserved(&doc).map_err(TestCaseError::fail)?;
    }

    /// With the plan held fixed, doubling the ingress demand doubles each flow.
    #[test]
    fn doubling_demand_doubles_every_flow(doc in common::scenario(common::FUZZ)) {
        checks::doubling_doubles_every_flow(&doc).map_err(TestCaseError::fail)?;
    }

    /// With the plan held fixed, the doubled traffic reaching each scope
    /// needs at most twice the instances the scope has.
    #[test]
    fn doubling_demand_at_most_doubles_scope_instances(doc in common::scenario(common::FUZZ)) {
        checks::doubling_at_most_doubles_scope_instances(&doc).map_err(TestCaseError::fail)?;
    }

    /// Draining any node either halts on infeasibility or leaves a plan that
    /// avoids the node and stays compliant.
    #[test]
    fn drains_are_handled_or_reported(doc in common::scenario(common::FUZZ), pick in any::<usize>()) {
        let Some((s, _)) = placed(&doc) else { return Ok(()) };
        let nodes: Vec<_> = s.graph.nodes().map(|n| n.id.clone()).collect();
        let node = nodes[pick % nodes.len()].clone();
        let events = vec![ScenarioEvent { tick: 1, action: EventAction::DrainNode { node: node.clone() } }];
        let settings = SimulationSettings { ticks: 3, ..SimulationSettings::default() };
        let r = simulate(&s.graph, &s.app, &s.policies, &s.request, &events, &settings).unwrap();
        match &r.halted {
            // Overload alerts can also end a run, from tick 0 on.
            Some(h) => prop_assert!(h.infeasible && h.tick <= 1, "{h:?}"),
            None => {
                prop_assert!(r.plan.mapping.triples().iter().all(|(_, n, _)| *n != node));
                prop_assert!(r.violations.is_empty(), "{:?}", r.violations);
                prop_assert_eq!(r.ticks_run, 3);
            }
        }
        for tick in 0..r.ticks_run {
            let overloads = r
                .alerts
                .iter()
                .filter(|a| a.alert.tick == tick && matches!(a.alert.kind, edgeplane::controlplane::AlertKind::Overload { .. }))
                .count();
            prop_assert!(overloads <= 1);
        }
    }

    #[test]
    fn reports_are_deterministic(doc in common::scenario(common::FUZZ), rps in 0.0f64..300.0) {
        let s = Scenario::from_doc(&doc).unwrap();
        let (domain, per) = s.request.demand.0.iter().next().unwrap();
        let ms = per.keys().next().unwrap();
        let events = vec![ScenarioEvent {
            tick: 1,
            action: EventAction::SetDemand { domain: domain.clone(), microservice: ms.clone(), rps },
        }];
        let settings = SimulationSettings { ticks: 3, ..SimulationSettings::default() };
        let a = simulate(&s.graph, &s.app, &s.policies, &s.request, &events, &settings).unwrap();
        let b = simulate(&s.graph, &s.app, &s.policies, &s.request, &events, &settings).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
