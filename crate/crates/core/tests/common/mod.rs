//! Random scenario generation shared by the property tests.
//!
//! A strategy draws a pool of random numbers and a [`Draw`] cursor turns it
//! into a well-formed scenario document: every region has a domain, every
//! non-ingress service has a predecessor, and demand only enters attached
//! domains. Policies and capacities are arbitrary, so scenarios may be
//! infeasible.

#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use edgeplane::appmodel::{ApplicationDoc, EdgeDoc, IngressDemand, MicroserviceDoc};
use edgeplane::policy::{IotLocalityDoc, MsLocalityDoc, PoliciesDoc, RestrictionDoc, RestrictionMode};
use edgeplane::scenario::{ScenarioDoc, SettingsDoc};
use edgeplane::topology::{AttachmentDoc, DomainDoc, DomainKind, LocalityLevel, NodeDoc, RegionDoc, TopologyDoc};
use proptest::collection::vec;
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub regions: usize,
    pub domains: usize,
    pub nodes: usize,
    /// Deployable microservices; one IoT source is added on top.
    pub services: usize,
    pub node_cpu: &'static [u64],
    pub node_mem: &'static [u64],
    pub ms_cpu: &'static [u64],
    pub ms_mem: &'static [u64],
    pub capacity: &'static [f64],
    pub ratio: &'static [f64],
    pub rps: &'static [f64],
    /// Chance (out of 4) that a microservice gets a placement restriction.
    pub restrict: usize,
}

/// Mid-sized scenarios for fuzzing.
pub const FUZZ: Limits = Limits {
    regions: 3,
    domains: 6,
    nodes: 8,
    services: 5,
    node_cpu: &[2000, 4000, 8000, 16000],
    node_mem: &[4096, 8192, 16384],
    ms_cpu: &[250, 500, 1000],
    ms_mem: &[256, 512, 1024],
    capacity: &[50.0, 100.0, 200.0],
    ratio: &[0.5, 1.0, 1.0, 2.0],
    rps: &[0.0, 30.0, 60.0, 100.0, 150.0],
    restrict: 1,
};

/// Scenarios small enough for exhaustive search: at most 4 nodes, 4
/// deployable microservices and 3 domains. Capacities are tight so that
/// infeasible and barely feasible instances are common.
pub const SMALL: Limits = Limits {
    regions: 2,
    domains: 3,
    nodes: 4,
    services: 4,
    node_cpu: &[1000, 1500, 2000, 3000],
    node_mem: &[1024, 2048, 4096],
    ms_cpu: &[250, 500, 1000],
    ms_mem: &[256, 512, 1024],
    capacity: &[50.0, 100.0],
    ratio: &[0.5, 1.0, 2.0],
    rps: &[0.0, 20.0, 50.0, 80.0],
    restrict: 2,
};

/// Cursor over a pool of random numbers; wraps around when exhausted.
pub struct Draw {
    pool: Vec<u32>,
    at: usize,
}

impl Draw {
    pub fn new(pool: Vec<u32>) -> Self {
        Self { pool, at: 0 }
    }

    pub fn below(&mut self, n: usize) -> usize {
        let v = self.pool[self.at % self.pool.len()];
        self.at += 1;
        v as usize % n.max(1)
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn chance(&mut self, k: usize, of: usize) -> bool {
        self.below(of) < k
    }

    pub fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        items[self.below(items.len())]
    }

    fn level(&mut self) -> LocalityLevel {
        self.pick(&LocalityLevel::ALL)
    }
}

pub fn scenario(limits: Limits) -> impl Strategy<Value = ScenarioDoc> {
    vec(any::<u32>(), 192).prop_map(move |pool| build(&mut Draw::new(pool), &limits))
}

pub fn build(d: &mut Draw, l: &Limits) -> ScenarioDoc {
    let n_regions = d.range(1, l.regions);
    let n_domains = d.range(n_regions, l.domains);
    let n_nodes = d.range(1, l.nodes);

    let region_of: Vec<usize> = (0..n_domains)
        .map(|i| if i < n_regions { i } else { d.below(n_regions) })
        .collect();
    let domain_name = |i: usize| format!("D{i}");
    let topology = TopologyDoc {
        regions: (0..n_regions)
            .map(|r| RegionDoc {
                id: format!("R{r}"),
                domains: (0..n_domains).filter(|&i| region_of[i] == r).map(domain_name).collect(),
            })
            .collect(),
        domains: (0..n_domains)
            .map(|i| DomainDoc {
                id: domain_name(i),
                region: format!("R{}", region_of[i]),
                admin: format!("admin-{i}"),
                kind: if region_of[i] + 1 == n_regions && n_regions > 1 {
                    DomainKind::Cloud
                } else {
                    DomainKind::Edge
                },
            })
            .collect(),
        nodes: (0..n_nodes)
            .map(|i| NodeDoc {
                id: format!("n{i}"),
                domain: domain_name(if i < n_domains { i } else { d.below(n_domains) }),
                cpu_m: d.pick(l.node_cpu),
                mem_mi: d.pick(l.node_mem),
            })
            .collect(),
        attachments: {
            let mut attached: Vec<usize> = (0..n_domains).filter(|_| d.chance(1, 2)).collect();
            if attached.is_empty() {
                attached.push(d.below(n_domains));
            }
            attached
                .into_iter()
                .map(|i| AttachmentDoc {
                    id: format!("iot-{i}"),
                    domain: domain_name(i),
                })
                .collect()
        },
    };

    let n_services = d.range(1, l.services);
    let n_ingress = d.range(1, n_services.min(2));
    let ms = |i: usize| format!("s{i}");
    let mut microservices = vec![MicroserviceDoc {
        id: "iot".into(),
        cpu_m: 0,
        mem_mi: 0,
        capacity_rps: 0.0,
        iot: true,
    }];
    for i in 0..n_services {
        microservices.push(MicroserviceDoc {
            id: ms(i),
            cpu_m: d.pick(l.ms_cpu),
            mem_mi: d.pick(l.ms_mem),
            capacity_rps: d.pick(l.capacity),
            iot: false,
        });
    }
    let mut edges: Vec<EdgeDoc> = (0..n_ingress)
        .map(|i| EdgeDoc {
            from: "iot".into(),
            to: ms(i),
            ratio: 1.0,
        })
        .collect();
    for j in n_ingress..n_services {
        let first = d.below(j);
        for i in 0..j {
            if i == first || d.chance(1, 3) {
                edges.push(EdgeDoc {
                    from: ms(i),
                    to: ms(j),
                    ratio: d.pick(l.ratio),
                });
            }
        }
    }
    let application = ApplicationDoc {
        id: "fuzz".into(),
        microservices,
        edges: edges.clone(),
        ingress: (0..n_ingress).map(ms).collect(),
    };

    let mut placement_restriction = Vec::new();
    for i in 0..n_services {
        if d.chance(l.restrict, 4) {
            let domains: Vec<String> = (0..n_domains).filter(|_| d.chance(2, 3)).map(domain_name).collect();
            placement_restriction.push(RestrictionDoc {
                microservice: ms(i),
                mode: if d.chance(1, 2) {
                    RestrictionMode::Allow
                } else {
                    RestrictionMode::Deny
                },
                domains,
            });
        }
    }
    let mut iot_locality = Vec::new();
    for i in 0..n_ingress {
        if d.chance(3, 4) {
            iot_locality.push(IotLocalityDoc {
                microservice: ms(i),
                level: d.level(),
            });
        }
    }
    let mut ms_locality = Vec::new();
    for e in edges.iter().filter(|e| e.from != "iot") {
        if d.chance(3, 4) {
            ms_locality.push(MsLocalityDoc {
                consumer: e.from.clone(),
                consumed: e.to.clone(),
                level: d.level(),
            });
        }
    }
    let policies = PoliciesDoc {
        placement_restriction,
        iot_locality,
        ms_locality,
        default_locality: if d.chance(1, 2) { Some(d.level()) } else { None },
    };

    let mut demand = IngressDemand::default();
    for a in &topology.attachments {
        for i in 0..n_ingress {
            demand.set(a.domain.as_str().into(), ms(i).into(), d.pick(l.rps));
        }
    }

    ScenarioDoc {
        topology,
        application,
        policies,
        demand,
        events: Vec::new(),
        settings: SettingsDoc::default(),
    }
}
