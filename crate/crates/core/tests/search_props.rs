use proptest::prelude::*;
use twinopt::cohort::generate_cohort;
use twinopt::model::ModelDefinition;
use twinopt::monitor::{check, Downregulation, MonitorState, PropertySet, Status};
use twinopt::search::{
    exhaustive_oracle, optimise, plan_cost, Cost, DecisionOrder, DoseMenu, Robustness, SearchConfig, SearchStatus,
    TreatmentPlan,
};
use twinopt::sim::simulate;

fn setup() -> (ModelDefinition, PropertySet, DoseMenu, SearchConfig) {
    let m = ModelDefinition::surrogate();
    let set = PropertySet::new(&m, Downregulation::default().properties(5.0)).unwrap();
    let menu = DoseMenu::uniform(&m, &[0.0, 1.0, 2.0]).unwrap();
    (m, set, menu, SearchConfig { horizon: 5, ..SearchConfig::default() })
}

fn twins(m: &ModelDefinition, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let spread = vec![0.25; m.param_count()];
    generate_cohort(m, &m.default_params(), &spread, n, seed).unwrap().members.into_iter().map(|v| v.params).collect()
}

#[test]
fn optimise_matches_oracle_on_random_twins() {
    let (m, set, menu, cfg) = setup();
    let mut feasible = 0;
    for params in twins(&m, 30, 11) {
        let t = vec![params];
        let r = optimise(&m, &t, &set, &menu, &cfg).unwrap();
        let o = exhaustive_oracle(&m, &t, &set, &menu, &cfg).unwrap();
        assert_eq!((r.status, r.cost, &r.plan), (o.status, o.cost, &o.plan));
        feasible += r.status.is_feasible() as usize;
    }
    // The instance family must exercise both outcomes.
    assert!(feasible > 0 && feasible < 30, "feasible on {feasible}/30");
}

#[test]
fn robust_mode_matches_oracle_and_holds_on_every_twin() {
    let (m, set, menu, cfg) = setup();
    let cfg = SearchConfig { robustness: Robustness::AllAccepted, ..cfg };
    let all = twins(&m, 12, 5);
    for group in all.chunks(3) {
        let r = optimise(&m, group, &set, &menu, &cfg).unwrap();
        let o = exhaustive_oracle(&m, group, &set, &menu, &cfg).unwrap();
        assert_eq!((r.status, r.cost, &r.plan), (o.status, o.cost, &o.plan));
        if let Some(plan) = &r.plan {
            for params in group {
                let cost = plan_cost(&m, std::slice::from_ref(params), &set, plan, Robustness::BestTwin, &cfg.sim).unwrap();
                assert!(!cost.is_top());
            }
        }
    }
    // A singleton set behaves like best-twin mode.
    let one = vec![all[0].clone()];
    let a = optimise(&m, &one, &set, &menu, &cfg).unwrap();
    let b = optimise(&m, &one, &set, &menu, &SearchConfig { robustness: Robustness::BestTwin, ..cfg.clone() }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn chronological_and_backjumping_agree() {
    let (m, set, menu, cfg) = setup();
    for params in twins(&m, 10, 3) {
        let t = vec![params];
        let j = optimise(&m, &t, &set, &menu, &cfg).unwrap();
        let c = optimise(&m, &t, &set, &menu, &SearchConfig { backjumping: false, ..cfg.clone() }).unwrap();
        assert_eq!((j.status, j.cost, &j.plan), (c.status, c.cost, &c.plan));
        assert!(j.stats.nodes_expanded <= c.stats.nodes_expanded);
    }
}

#[test]
fn search_is_deterministic() {
    let (m, set, menu, cfg) = setup();
    let t = twins(&m, 4, 9);
    let cfg = SearchConfig { robustness: Robustness::AllAccepted, ..cfg };
    assert_eq!(optimise(&m, &t, &set, &menu, &cfg).unwrap(), optimise(&m, &t, &set, &menu, &cfg).unwrap());
}

#[test]
fn oracle_refuses_huge_spaces() {
    let (m, _, menu, cfg) = setup();
    let cfg = SearchConfig { horizon: 13, ..cfg };
    let set13 = PropertySet::new(&m, Downregulation::default().properties(13.0)).unwrap();
    assert!(exhaustive_oracle(&m, &[m.default_params()], &set13, &menu, &cfg).is_err());
}

/// Every prefix bound, recomputed here from a replay of the prefix, stays at
/// or below the cost of each feasible completion.
#[test]
fn prefix_bound_is_admissible() {
    let (m, set, menu, cfg) = setup();
    let choices = menu.day_choices(DecisionOrder::Descending);
    let grid = cfg.sim.output_grid;
    for params in twins(&m, 6, 21) {
        for code in 0..choices.len().pow(5) {
            let mut digits = [0usize; 5];
            let mut c = code;
            for d in (0..5).rev() {
                digits[d] = c % choices.len();
                c /= choices.len();
            }
            let plan = TreatmentPlan { decisions: digits.iter().map(|&i| choices[i].clone()).collect() };
            let cost = plan_cost(&m, std::slice::from_ref(&params), &set, &plan, Robustness::BestTwin, &cfg.sim).unwrap();
            if cost.is_top() {
                continue;
            }
            let traj = simulate(&m, &params, &m.initial_state(), &plan.doses(&m), 5.0, &cfg.sim).unwrap();
            for depth in 0..=5usize {
                let prefix = TreatmentPlan { decisions: plan.decisions[..depth].to_vec() };
                let mut mon = MonitorState::new(&set, grid);
                for k in 0..=depth {
                    mon.feed_row(&set, traj.times[k], &traj.observables[k]).unwrap();
                }
                let goal = match mon.status(0) {
                    Status::Satisfied => mon.witness(0).unwrap() + 1.0,
                    _ => mon.pending_run_start(0).map_or(depth as f64 + grid + 1.0, |r| r + 1.0),
                };
                let lb = Cost { goal_time: goal, total_drug: prefix.total_drug(), used_days: prefix.used_days() };
                assert!(lb <= cost, "bound {lb} above cost {cost} at depth {depth}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Zero days appended after a feasible plan leave its cost unchanged.
    #[test]
    fn zero_padding_keeps_cost(days in prop::collection::vec(0usize..3, 5), extra in 1u32..4) {
        let (m, set, _, cfg) = setup();
        let plan = TreatmentPlan { decisions: days.iter().map(|&d| vec![d as f64]).collect() };
        let base = plan_cost(&m, &[m.default_params()], &set, &plan, Robustness::BestTwin, &cfg.sim).unwrap();
        let horizon = 5 + extra;
        let mut padded = plan.clone();
        padded.decisions.resize(horizon as usize, vec![0.0]);
        // Invariants extend over the padded horizon; goals are unchanged.
        let long = PropertySet::new(&m, Downregulation::default().properties(horizon as f64)).unwrap();
        let grown = plan_cost(&m, &[m.default_params()], &long, &padded, Robustness::BestTwin, &cfg.sim).unwrap();
        if !grown.is_top() {
            prop_assert_eq!(base, grown);
        }
        let traj = simulate(&m, &m.default_params(), &m.initial_state(), &plan.doses(&m), 5.0, &cfg.sim).unwrap();
        prop_assert_eq!(base.is_top(), check(&traj, &set).unwrap().iter().any(|v| v.status != Status::Satisfied));
    }
}

#[test]
fn search_status_strings() {
    assert_eq!(SearchStatus::FeasibleBudgetExhausted.as_str(), "feasible-budget-exhausted");
}
