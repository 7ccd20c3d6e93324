//! The placement heuristic against exhaustive search on small scenarios.

mod common;

use common::oracle::{check, Oracle, Verdict};
use edgeplane::scenario::Scenario;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn heuristic_matches_exhaustive_search(doc in common::scenario(common::SMALL)) {
        if let Err(msg) = check(&doc) {
            prop_assert!(false, "{msg}");
        }
    }
}

#[test]
fn both_verdicts_occur() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let strategy = common::scenario(common::SMALL);
    let (mut feasible, mut infeasible) = (0, 0);
    for _ in 0..300 {
        let doc = strategy.new_tree(&mut runner).unwrap().current();
        let s = Scenario::from_doc(&doc).unwrap();
        match Oracle::new(&s).run() {
            Verdict::Feasible => feasible += 1,
            Verdict::Infeasible => infeasible += 1,
            Verdict::GaveUp => {}
        }
    }
    assert!(feasible > 30 && infeasible > 30, "feasible {feasible}, infeasible {infeasible}");
}
