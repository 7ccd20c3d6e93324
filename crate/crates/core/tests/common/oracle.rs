//! Exhaustive search over all instance-to-node assignments on small
//! scenarios, compared against the placement heuristic.
//!
//! The model: walking the DAG in topological order, each microservice's
//! demand is grouped into locality scopes anchored where its traffic comes
//! from (the ingress domain, or the domains of the consumer's serving
//! instances). Each scope needs ceil(demand / capacity) instances on nodes
//! inside the scope that the placement restriction admits. Traffic into a
//! microservice is split across its instances in the consumer's scope in
//! proportion to instance counts. A scenario is feasible if some assignment
//! fits every node's CPU and memory and routes no instance more than its
//! rated rate.
//!
//! The heuristic may add instances beyond ceil(demand / capacity) to relieve
//! nodes inside nested scopes, so it can succeed where this model fails. That
//! is accepted when its plan validates and its traffic overloads nothing.

use std::collections::BTreeMap;

use edgeplane::controlplane::{place_application, validate_plan};
use edgeplane::meshsim::route_flows;
use edgeplane::policy::is_allowed;
use edgeplane::scenario::Scenario;
use edgeplane::topology::LocalityLevel;

const STEP_LIMIT: u64 = 20_000_000;

type Assign = BTreeMap<String, BTreeMap<String, u32>>;
type Load = BTreeMap<String, BTreeMap<String, f64>>;

pub struct Oracle<'s> {
    s: &'s Scenario,
    order: Vec<String>,
    steps: u64,
}

#[derive(Debug, PartialEq)]
pub enum Verdict {
    Feasible,
    Infeasible,
    GaveUp,
}

impl<'s> Oracle<'s> {
    pub fn new(s: &'s Scenario) -> Self {
        Self {
            s,
            order: s.app.topo_order().iter().map(|m| m.to_string()).collect(),
            steps: 0,
        }
    }

    fn domain_of(&self, node: &str) -> String {
        self.s.graph.node(node).unwrap().domain_id.to_string()
    }

    fn region_of(&self, domain: &str) -> String {
        self.s.graph.domain(domain).unwrap().region_id.to_string()
    }

    /// Scope key for traffic leaving `domain` under `level`.
    fn scope(&self, domain: &str, level: LocalityLevel) -> String {
        match level {
            LocalityLevel::StrictDomain => format!("d:{domain}"),
            LocalityLevel::StrictRegion => format!("r:{}", self.region_of(domain)),
            LocalityLevel::Global => "g".to_owned(),
        }
    }

    fn in_scope(&self, scope: &str, node: &str) -> bool {
        let d = self.domain_of(node);
        match scope.split_once(':') {
            Some(("d", x)) => d == x,
            Some(("r", x)) => self.region_of(&d) == x,
            _ => true,
        }
    }

    /// Incoming traffic of `ms` as (source domain, level, rps).
    fn inflows(&self, ms: &str, load: &Load) -> Vec<(String, LocalityLevel, f64)> {
        let mut out = Vec::new();
        if self.s.app.is_ingress(ms) {
            let level = self.s.policies.level(None, ms);
            for (d, per) in &self.s.request.demand.0 {
                if let Some(&r) = per.get(ms) {
                    out.push((d.to_string(), level, r));
                }
            }
        } else {
            for e in self.s.app.edges().iter().filter(|e| e.to == ms && !self.s.app.is_iot(e.from.as_str())) {
                let level = self.s.policies.level(Some(e.from.as_str()), ms);
                let mut by_domain: BTreeMap<String, f64> = BTreeMap::new();
                for (node, r) in load.get(e.from.as_str()).into_iter().flatten() {
                    *by_domain.entry(self.domain_of(node)).or_default() += r;
                }
                for (d, r) in by_domain {
                    out.push((d, level, r * e.rate_ratio));
                }
            }
        }
        out.retain(|(_, _, r)| *r > 0.0);
        out
    }

    fn buckets(&self, ms: &str, load: &Load) -> Vec<(String, u32)> {
        let cap = self.s.app.microservice(ms).unwrap().capacity_rps;
        let mut by_scope: BTreeMap<String, f64> = BTreeMap::new();
        for (d, level, r) in self.inflows(ms, load) {
            *by_scope.entry(self.scope(&d, level)).or_default() += r;
        }
        by_scope
            .into_iter()
            .filter(|(_, r)| *r > 0.0)
            .map(|(scope, r)| {
                let x = r / cap;
                (scope, (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as u32)
            })
            .collect()
    }

    fn serve(&self, ms: &str, hosts: &BTreeMap<String, u32>, load: &Load) -> Option<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (d, level, r) in self.inflows(ms, load) {
            let scope = self.scope(&d, level);
            let dests: Vec<(&String, u32)> = hosts
                .iter()
                .filter(|(n, c)| **c > 0 && self.in_scope(&scope, n))
                .map(|(n, c)| (n, *c))
                .collect();
            let total: u32 = dests.iter().map(|(_, c)| c).sum();
            if total == 0 {
                return None;
            }
            for (n, c) in dests {
                *out.entry(n.clone()).or_insert(0.0) += r * f64::from(c) / f64::from(total);
            }
        }
        Some(out)
    }

    pub fn run(&mut self) -> Verdict {
        let free: BTreeMap<String, (u64, u64)> = self
            .s
            .graph
            .nodes()
            .map(|n| (n.id.to_string(), (n.capacity.cpu_m, n.capacity.mem_mi)))
            .collect();
        match self.ms_level(0, &free, &mut Assign::new(), &mut Load::new()) {
            Some(true) => Verdict::Feasible,
            Some(false) => Verdict::Infeasible,
            None => Verdict::GaveUp,
        }
    }

    /// `None` when the step limit is hit.
    fn ms_level(&mut self, i: usize, free: &BTreeMap<String, (u64, u64)>, assign: &mut Assign, load: &mut Load) -> Option<bool> {
        if i == self.order.len() {
            return Some(true);
        }
        let ms = self.order[i].clone();
        let buckets = self.buckets(&ms, load);
        let found = self.bucket_level(&ms, &buckets, 0, free, &mut BTreeMap::new(), i, assign, load)?;
        Some(found)
    }

    #[allow(clippy::too_many_arguments)]
    fn bucket_level(
        &mut self,
        ms: &str,
        buckets: &[(String, u32)],
        b: usize,
        free: &BTreeMap<String, (u64, u64)>,
        hosts: &mut BTreeMap<String, u32>,
        i: usize,
        assign: &mut Assign,
        load: &mut Load,
    ) -> Option<bool> {
        if b == buckets.len() {
            let Some(served) = self.serve(ms, hosts, load) else {
                return Some(false);
            };
            let cap = self.s.app.microservice(ms).unwrap().capacity_rps;
            if served.iter().any(|(n, r)| r / f64::from(hosts[n]) > cap * (1.0 + 1e-9)) {
                return Some(false);
            }
            assign.insert(ms.to_owned(), hosts.clone());
            load.insert(ms.to_owned(), served);
            let r = self.ms_level(i + 1, free, assign, load);
            assign.remove(ms);
            load.remove(ms);
            return r;
        }
        let (scope, count) = &buckets[b];
        let m = self.s.app.microservice(ms).unwrap();
        let eligible: Vec<String> = self
            .s
            .graph
            .nodes()
            .map(|n| n.id.to_string())
            .filter(|n| self.in_scope(scope, n))
            .filter(|n| is_allowed(&self.s.policies, ms, &self.domain_of(n)).unwrap().allowed)
            .collect();
        self.distribute(ms, buckets, b, &eligible, 0, *count, (m.resources.cpu_m, m.resources.mem_mi), free, hosts, i, assign, load)
    }

    #[allow(clippy::too_many_arguments)]
    fn distribute(
        &mut self,
        ms: &str,
        buckets: &[(String, u32)],
        b: usize,
        eligible: &[String],
        at: usize,
        left: u32,
        req: (u64, u64),
        free: &BTreeMap<String, (u64, u64)>,
        hosts: &mut BTreeMap<String, u32>,
        i: usize,
        assign: &mut Assign,
        load: &mut Load,
    ) -> Option<bool> {
        self.steps += 1;
        if self.steps > STEP_LIMIT {
            return None;
        }
        if left == 0 {
            return self.bucket_level(ms, buckets, b + 1, free, hosts, i, assign, load);
        }
        if at == eligible.len() {
            return Some(false);
        }
        let node = &eligible[at];
        let (cpu, mem) = free[node];
        let fit = (cpu / req.0.max(1)).min(mem / req.1.max(1)).min(u64::from(left)) as u32;
        for k in (0..=fit).rev() {
            let mut next = free.clone();
            next.insert(node.clone(), (cpu - req.0 * u64::from(k), mem - req.1 * u64::from(k)));
            *hosts.entry(node.clone()).or_insert(0) += k;
            let r = self.distribute(ms, buckets, b, eligible, at + 1, left - k, req, &next, hosts, i, assign, load);
            let c = hosts.entry(node.clone()).or_insert(0);
            *c -= k;
            if *c == 0 {
                hosts.remove(node);
            }
            match r {
                Some(false) => {}
                other => return other,
            }
        }
        Some(false)
    }
}

/// Compares the heuristic with the exhaustive search on one scenario.
pub fn check(doc: &edgeplane::scenario::ScenarioDoc) -> Result<(), String> {
    let s = Scenario::from_doc(doc).unwrap();
    let verdict = Oracle::new(&s).run();
    let heuristic = place_application(&s.graph, &s.app, &s.request, &s.policies);
    match (&verdict, &heuristic) {
        (Verdict::GaveUp, _) => Err("oracle exceeded its step limit".into()),
        (Verdict::Feasible | Verdict::Infeasible, Ok(plan)) => {
            let report = validate_plan(&s.graph, &s.app, &s.policies, plan);
            if !report.is_compliant() {
                return Err(format!("{:?}", report.violations));
            }
            overload(&s, plan).map_or(Ok(()), Err)
        }
        (Verdict::Infeasible, Err(e)) if e.is_infeasible() => Ok(()),
        (v, h) => Err(format!(
            "oracle says {v:?}, heuristic says {}\n{}",
            match h {
                Ok(_) => "feasible".to_owned(),
                Err(e) => e.to_string(),
            },
            serde_yaml::to_string(doc).unwrap()
        )),
    }
}

/// An instance routed more than its rated rate, if any.
pub fn overload(s: &Scenario, plan: &edgeplane::controlplane::DeploymentPlan) -> Option<String> {
    let flows = route_flows(&s.graph, &s.app, plan, &plan.demand).unwrap();
    for (node, per) in flows.served() {
        for (ms, rps) in per {
            let count = plan.mapping.instances(ms.as_str())[&node];
            let cap = s.app.microservice(ms.as_str()).unwrap().capacity_rps;
            if rps / f64::from(count) > cap * (1.0 + 1e-9) {
                return Some(format!("{ms}@{node}: {rps} rps over {count} instance(s)"));
            }
        }
    }
    None
}
