//! Acceptance criteria. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twinopt::cohort::{generate_cohort, Cohort};
use twinopt::model::ModelDefinition;
use twinopt::monitor::{
    check, Comparison, Downregulation, MonitorState, Predicate, Property, PropertySet, Verdict,
};
use twinopt::records::{
    apply_exclusion, synthesise_record, ClinicalRecord, ExclusionCriteria, ExclusionReason, Measurement, SynthSpec,
};
use twinopt::search::{exhaustive_oracle, optimise, DoseMenu, SearchConfig, SearchStatus, TreatmentPlan};
use twinopt::sim::{resume, simulate, Checkpoint, DoseEvent, SimulationConfig, Trajectory};
use twinopt::trial::{run_trial, write_report, EvaluationRule, Strategy as ArmStrategy, Trial, TrialArm};
use twinopt::twin::{compute_twins, MatchConfig};

/// Top-5 count at 5% noise observed on the first verified run with the
/// seeds below; later runs must reproduce it.
const RECORDED_TOP5: usize = 20;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let took = start.elapsed();
    (took < limit, format!("{:.2}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

fn decay_model() -> ModelDefinition {
    ModelDefinition::from_toml_str(
        r#"
        name = "decay"
        states = [ { name = "x", init = 1.0 } ]
        observables = [ { name = "X", expr = "x" } ]
        [rhs]
        x = "-x"
        "#,
    )
    .unwrap()
}

fn integrator_order() -> Outcome {
    let start = Instant::now();
    let m = decay_model();
    let exact = (-1.0f64).exp();
    let err = |h: f64| {
        let tr = simulate(&m, &[], &m.initial_state(), &[], 1.0, &SimulationConfig::rk4(h, 1.0)).unwrap();
        (tr.states[1][0] - exact).abs()
    };
    let ratios: Vec<f64> = [0.1, 0.05, 0.02].iter().map(|&h| err(h) / err(h / 2.0)).collect();
    let in_band = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    let (fast, time) = within(Duration::from_secs(1), start);
    outcome(in_band && fast, format!("ratios {ratios:.3?}, {time}"))
}

fn bits(tr: &Trajectory) -> Vec<u64> {
    tr.times
        .iter()
        .chain(tr.states.iter().flatten())
        .chain(tr.observables.iter().flatten())
        .map(|v| v.to_bits())
        .collect()
}

fn checkpoint_transparency() -> Outcome {
    let start = Instant::now();
    let m = ModelDefinition::surrogate();
    let p = m.default_params();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for (i, cfg) in [SimulationConfig::default(), SimulationConfig::rkf45(1e-6, 1e-9, 1.0)].iter().enumerate() {
        let runs = if i == 0 { 100 } else { 20 };
        for _ in 0..runs {
            let mut doses = Vec::new();
            for d in 0..30 {
                if rng.gen_bool(0.4) {
                    let at = d as f64 + rng.gen_range(0..4) as f64 * 0.25;
                    doses.push(DoseEvent::new(at, "agonist", rng.gen_range(0.5..3.0)));
                }
            }
            let whole = simulate(&m, &p, &m.initial_state(), &doses, 30.0, cfg).unwrap();
            let mut cuts: Vec<u32> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(1..30)).collect();
            cuts.sort_unstable();
            cuts.dedup();
            cuts.push(30);
            let mut cp = Checkpoint::start(&m, &p, &m.initial_state(), cfg).unwrap();
            let mut pieces = cp.row(&m, &p);
            for c in cuts {
                let (seg, next) = resume(&m, &p, &cp, &doses, c as f64, cfg).unwrap();
                pieces.extend(seg);
                cp = next;
            }
            failures += (bits(&pieces) != bits(&whole)) as usize;
        }
    }
    let (fast, time) = within(Duration::from_secs(5), start);
    outcome(failures == 0 && fast, format!("100 rk4 + 20 rkf45 segmentations, {failures} mismatches, {time}"))
}

fn monitor_equivalence() -> Outcome {
    let start = Instant::now();
    let m = ModelDefinition::from_toml_str(
        r#"
        name = "signals"
        states = [ { name = "a", init = 0.0 }, { name = "b", init = 0.0 } ]
        observables = [ { name = "A", expr = "a" }, { name = "B", expr = "b" } ]
        [rhs]
        a = "0"
        b = "0"
        "#,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agree = 0;
    let mut witnessed = 0;
    let instances = 200;
    for i in 0..instances {
        let n = rng.gen_range(2..40);
        let grid = [1.0, 0.5, 0.25][i % 3];
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let tr = Trajectory {
            times: (0..n).map(|k| k as f64 * grid).collect(),
            states: rows.clone(),
            observables: rows,
        };
        let (lo, hi) = {
            let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
            (x.min(y) as f64 * grid, x.max(y) as f64 * grid)
        };
        let predicate = Predicate {
            terms: vec![("A".into(), rng.gen_range(-2.0..2.0)), ("B".into(), rng.gen_range(-2.0..2.0))],
            constant: 0.0,
            op: if rng.gen_bool(0.5) { Comparison::Le } else { Comparison::Ge },
            rhs: rng.gen_range(-2.0..2.0),
        };
        let prop = if rng.gen_bool(0.5) {
            Property::goal("p", hi, hi - lo, predicate)
        } else {
            Property::invariant("p", lo, hi, predicate)
        };
        let props = vec![prop];
        let set = PropertySet::new(&m, props.clone()).unwrap();
        let expected = common::brute_force_verdicts(&tr, &props, |name| if name == "A" { 0 } else { 1 });

        let mut state = MonitorState::new(&set, grid);
        let mut at = 0;
        let mut online: Vec<Verdict> = Vec::new();
        while at < n {
            let end = (at + rng.gen_range(1..6)).min(n);
            let seg = Trajectory {
                times: tr.times[at..end].to_vec(),
                states: tr.states[at..end].to_vec(),
                observables: tr.observables[at..end].to_vec(),
            };
            online = state.feed(&set, &seg).unwrap();
            at = end;
        }
        let offline = check(&tr, &set).unwrap();
        if online == expected && offline == expected {
            agree += 1;
        }
        witnessed += expected[0].witness.is_some() as usize;
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    outcome(
        agree == instances && fast,
        format!("{agree}/{instances} agree ({witnessed} with witnesses), {time}"),
    )
}

fn search_instances() -> (ModelDefinition, PropertySet, DoseMenu, SearchConfig, Vec<Vec<f64>>) {
    let m = ModelDefinition::surrogate();
    let set = PropertySet::new(&m, Downregulation::default().properties(5.0)).unwrap();
    let menu = DoseMenu::uniform(&m, &[0.0, 1.0, 2.0]).unwrap();
    let cfg = SearchConfig { horizon: 5, ..SearchConfig::default() };
    let spread = vec![0.25; m.param_count()];
    let twins = generate_cohort(&m, &m.default_params(), &spread, 51, 4)
        .unwrap()
        .members
        .into_iter()
        .skip(1)
        .map(|vp| vp.params)
        .collect();
    (m, set, menu, cfg, twins)
}

fn search_optimality() -> Outcome {
    let start = Instant::now();
    let (m, set, menu, cfg, twins) = search_instances();
    let mut equal = 0;
    let mut feasible = 0;
    for params in &twins {
        let t = std::slice::from_ref(params);
        let r = optimise(&m, t, &set, &menu, &cfg).unwrap();
        let o = exhaustive_oracle(&m, t, &set, &menu, &cfg).unwrap();
        equal += (r.status == o.status && r.cost == o.cost) as usize;
        feasible += (o.status == SearchStatus::Optimal) as usize;
    }
    let (fast, time) = within(Duration::from_secs(60), start);
    outcome(
        equal == twins.len() && fast,
        format!("{equal}/{} equal to oracle ({feasible} feasible), {time}", twins.len()),
    )
}

fn pruning_soundness() -> Outcome {
    let (m, set, menu, cfg, twins) = search_instances();
    let mut ok = 0;
    let (mut jump_nodes, mut chrono_nodes, mut oracle_days) = (0, 0, 0);
    for params in &twins {
        let t = std::slice::from_ref(params);
        let jump = optimise(&m, t, &set, &menu, &cfg).unwrap();
        let chrono = optimise(&m, t, &set, &menu, &SearchConfig { backjumping: false, ..cfg.clone() }).unwrap();
        let o = exhaustive_oracle(&m, t, &set, &menu, &cfg).unwrap();
        let bound = o.stats.nodes_expanded * cfg.horizon as u64;
        let same = (jump.status, jump.cost, &jump.plan) == (chrono.status, chrono.cost, &chrono.plan);
        if jump.stats.nodes_expanded <= bound && same && jump.stats.nodes_expanded <= chrono.stats.nodes_expanded {
            ok += 1;
        }
        jump_nodes += jump.stats.nodes_expanded;
        chrono_nodes += chrono.stats.nodes_expanded;
        oracle_days += bound;
    }
    outcome(
        ok == twins.len(),
        format!(
            "{ok}/{} sound; nodes backjump {jump_nodes}, chronological {chrono_nodes}, oracle leaves x horizon {oracle_days}",
            twins.len()
        ),
    )
}

/// Challenge dose on day 0, daily LH/FSH-like samples for ten days.
fn measurement_design(noise: f64, seed: u64) -> (SynthSpec, MatchConfig) {
    let challenge = vec![DoseEvent::new(0.0, "agonist", 2.0)];
    let mut spec = SynthSpec::new((0..=10).map(f64::from).collect(), noise, seed);
    spec.doses = challenge.clone();
    spec.observables = vec!["L".into(), "F".into()];
    let matching = MatchConfig { context_doses: challenge, ..MatchConfig::default() };
    (spec, matching)
}

fn trial_cohort(m: &ModelDefinition) -> Cohort {
    generate_cohort(m, &m.default_params(), &vec![0.25; m.param_count()], 200, 42).unwrap()
}

fn source_members(cohort: &Cohort) -> Vec<usize> {
    (0..20).map(|k| 3 + k * 9).collect::<Vec<_>>().into_iter().filter(|&i| i < cohort.len()).collect()
}

fn twin_recovery() -> Outcome {
    let start = Instant::now();
    let m = ModelDefinition::surrogate();
    let cohort = trial_cohort(&m);
    let sources = source_members(&cohort);
    let (mut exact, mut top5) = (0, 0);
    for (k, &i) in sources.iter().enumerate() {
        let vp = &cohort.members[i];
        let (spec, matching) = measurement_design(0.0, 100 + k as u64);
        let set = compute_twins(&cohort, &synthesise_record(vp, &m, &spec).unwrap(), &m, &matching).unwrap();
        let best = &set.ranked[0];
        exact += (best.vp_id == vp.id && best.score == 0.0) as usize;

        let (spec, matching) = measurement_design(0.05, 500 + k as u64);
        let set = compute_twins(&cohort, &synthesise_record(vp, &m, &spec).unwrap(), &m, &matching).unwrap();
        top5 += set.ranked.iter().take(5).any(|r| r.vp_id == vp.id) as usize;
    }
    let (fast, time) = within(Duration::from_secs(120), start);
    outcome(
        exact == 20 && top5 >= 18 && top5 == RECORDED_TOP5 && fast,
        format!("noise 0: {exact}/20 exact at rank 1; noise 5%: {top5}/20 in top 5 (recorded {RECORDED_TOP5}); {time}"),
    )
}

fn build_trial(workers: usize) -> Trial {
    let m = ModelDefinition::surrogate();
    let cohort = trial_cohort(&m);
    let records: Vec<ClinicalRecord> = source_members(&cohort)
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (spec, _) = measurement_design(0.05, 900 + k as u64);
            synthesise_record(&cohort.members[i], &m, &spec).unwrap()
        })
        .collect();
    let (_, matching) = measurement_design(0.05, 0);
    let horizon = 5;
    let sim = SimulationConfig::default();
    let menu = DoseMenu::uniform(&m, &[0.0, 1.0, 1.5, 2.0]).unwrap();
    Trial {
        properties: Downregulation::default().properties(horizon as f64),
        menu,
        horizon,
        arms: vec![
            TrialArm { name: "reference".into(), strategy: ArmStrategy::Fixed(TreatmentPlan::constant(horizon, &[1.5])) },
            TrialArm {
                name: "personalised".into(),
                strategy: ArmStrategy::Personalised(SearchConfig { horizon, sim: sim.clone(), ..SearchConfig::default() }),
            },
        ],
        sim,
        model: m,
        cohort,
        records,
        exclusion: ExclusionCriteria::default(),
        matching,
        evaluation: EvaluationRule::TopAccepted,
        seed: 7,
        workers,
        trajectories: true,
    }
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn end_to_end_trial() -> Outcome {
    let start = Instant::now();
    let trial = build_trial(4);
    let report = run_trial(&trial).unwrap();
    let mut both = 0;
    let mut dominated = 0;
    let (mut ref_ok, mut pers_ok) = (0, 0);
    for pair in report.rows.chunks(2) {
        let (fixed, pers) = (&pair[0], &pair[1]);
        assert_eq!((fixed.arm.as_str(), pers.arm.as_str()), ("reference", "personalised"));
        ref_ok += fixed.success as usize;
        pers_ok += pers.success as usize;
        if let (Some(f), Some(p)) = (fixed.cost, pers.cost) {
            both += 1;
            dominated += (p <= f) as usize;
        }
    }
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    write_report(&report, &trial.model, dirs[0].path()).unwrap();
    // Fresh run with a different worker count.
    let again = run_trial(&build_trial(1)).unwrap();
    write_report(&again, &trial.model, dirs[1].path()).unwrap();
    let identical = read_dir_bytes(dirs[0].path()) == read_dir_bytes(dirs[1].path());
    let admitted = report.rows.len() / 2;
    let (fast, time) = within(Duration::from_secs(300), start);
    outcome(
        dominated == both && identical && admitted > 0 && fast,
        format!(
            "{admitted} admitted; successes reference {ref_ok}, personalised {pers_ok}; dominance {dominated}/{both}; rerun identical {identical}; {time}"
        ),
    )
}

fn record_strategy() -> impl Strategy<Value = Vec<ClinicalRecord>> {
    let measurement = (prop::sample::select(vec!["L", "F", "dose_total"]), 0.0..20.0f64, 0.0..10.0f64)
        .prop_map(|(o, t, v)| Measurement { time: t, observable: o.to_string(), value: v, unit: String::new() });
    prop::collection::vec(prop::collection::vec(measurement, 0..8), 0..12).prop_map(|groups| {
        groups
            .into_iter()
            .enumerate()
            .map(|(i, mut ms)| {
                ms.sort_by(|a, b| a.time.total_cmp(&b.time));
                ClinicalRecord { patient_id: format!("p{i}"), measurements: ms, metadata: Default::default() }
            })
            .collect()
    })
}

fn criteria_strategy() -> impl Strategy<Value = ExclusionCriteria> {
    let names = prop::sample::subsequence(vec!["L", "F", "dose_total"], 0..=3);
    (names.clone(), prop::collection::vec(0usize..4, 3), 0.0..15.0f64).prop_map(|(req, mins, span)| {
        ExclusionCriteria {
            required_observables: req.iter().map(|s| s.to_string()).collect(),
            min_measurements: ["L", "F", "dose_total"].iter().zip(mins).map(|(n, c)| (n.to_string(), c)).collect(),
            min_span: span,
        }
    })
}

fn exclusion_partition() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let result = runner.run(&(record_strategy(), criteria_strategy()), |(records, criteria)| {
        let out = apply_exclusion(&records, &criteria);
        prop_assert_eq!(out.kept.len() + out.excluded.len(), records.len());
        for (r, why) in &out.excluded {
            prop_assert!(ExclusionReason::ALL.contains(why));
            prop_assert_eq!(ExclusionReason::parse(why.as_str()), Some(*why));
            prop_assert_eq!(criteria.violation(r), Some(*why));
        }
        for r in &out.kept {
            prop_assert_eq!(criteria.violation(r), None);
        }
        Ok(())
    });
    let (fast, time) = within(Duration::from_secs(5), start);
    let detail = match &result {
        Ok(()) => format!("1000 cases, {time}"),
        Err(e) => format!("{e}, {time}"),
    };
    outcome(result.is_ok() && fast, detail)
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("integrator order", integrator_order),
        ("checkpoint transparency", checkpoint_transparency),
        ("monitor oracle equivalence", monitor_equivalence),
        ("search optimality", search_optimality),
        ("pruning and backjump soundness", pruning_soundness),
        ("twin recovery", twin_recovery),
        ("end-to-end trial", end_to_end_trial),
        ("exclusion partition", exclusion_partition),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        failed += !result.pass as usize;
        println!("criterion {} {}: {name}: {}", i + 1, if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
