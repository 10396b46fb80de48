mod common;

use std::sync::Arc;

use common::gen_domain;
use deepmon::pddl::{parse_domain, parse_problem, PlanEntry};
use deepmon::planner::{apply, plan, PlanOptions, PlannerError, Strategy};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimal_planner_matches_bfs_oracle(seed in any::<u64>()) {
        let g = gen_domain(&mut ChaCha8Rng::seed_from_u64(seed));
        let d = Arc::new(parse_domain(&g.domain_pddl()).unwrap());
        let p = parse_problem(&g.problem_pddl(), &d).unwrap();
        let e = PlanEntry::new("gen", d, p);
        let (want, _) = g.bfs_oracle();
        let got = plan(&e, &PlanOptions { strategy: Strategy::UniformCost, budget: 1_000_000 });
        match (want, got) {
            (Some(n), Ok(sol)) => {
                prop_assert_eq!(sol.steps.len(), n);
                let mut s = e.problem.init.clone();
                for a in &sol.steps {
                    s = apply(&s, a).unwrap();
                }
                prop_assert!(e.goal_state.is_subset(&s));
            }
            (None, Err(PlannerError::NoPlan { .. })) => {}
            (w, g) => prop_assert!(false, "oracle {:?} planner {:?}", w, g.map(|s| s.steps.len())),
        }
    }

    #[test]
    fn greedy_plans_are_valid_when_found(seed in any::<u64>()) {
        let g = gen_domain(&mut ChaCha8Rng::seed_from_u64(seed));
        let d = Arc::new(parse_domain(&g.domain_pddl()).unwrap());
        let p = parse_problem(&g.problem_pddl(), &d).unwrap();
        let e = PlanEntry::new("gen", d, p);
        let (want, _) = g.bfs_oracle();
        match plan(&e, &PlanOptions::default()) {
            Ok(sol) => {
                prop_assert!(want.is_some_and(|n| sol.steps.len() >= n));
                let s = sol.steps.iter().try_fold(e.problem.init.clone(), |s, a| apply(&s, a)).unwrap();
                prop_assert!(e.goal_state.is_subset(&s));
            }
            Err(_) => prop_assert!(want.is_none()),
        }
    }
}
