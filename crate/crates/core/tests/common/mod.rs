//! Reference implementations shared by integration tests.

use twinopt::monitor::{Comparison, Property, PropertyKind, Status, Verdict};
use twinopt::sim::{Trajectory, TIME_EPS};

/// Definitional property evaluation: every candidate goal start is checked
/// against every sample. `observable` maps a predicate term to its column.
pub fn brute_force_verdicts(tr: &Trajectory, props: &[Property], observable: impl Fn(&str) -> usize) -> Vec<Verdict> {
    let holds = |p: &Property, row: &[f64]| {
        let lhs: f64 =
            p.predicate.terms.iter().map(|(n, c)| c * row[observable(n)]).sum::<f64>() + p.predicate.constant;
        match p.predicate.op {
            Comparison::Le => lhs <= p.predicate.rhs,
            Comparison::Ge => lhs >= p.predicate.rhs,
        }
    };
    props
        .iter()
        .map(|p| {
            let (status, witness) = match p.kind {
                PropertyKind::Invariant { from, until } => {
                    let mut w = None;
                    for (t, row) in tr.times.iter().zip(&tr.observables) {
                        if *t >= from - TIME_EPS && *t <= until + TIME_EPS && !holds(p, row) {
                            w = Some(*t);
                            break;
                        }
                    }
                    (if w.is_some() { Status::Violated } else { Status::Satisfied }, w)
                }
                PropertyKind::Goal { deadline, sustain } => {
                    let mut w = None;
                    for &s in &tr.times {
                        if s + sustain > deadline + TIME_EPS {
                            continue;
                        }
                        let ok = tr
                            .times
                            .iter()
                            .zip(&tr.observables)
                            .filter(|(t, _)| **t >= s - TIME_EPS && **t <= s + sustain + TIME_EPS)
                            .all(|(_, row)| holds(p, row));
                        if ok {
                            w = Some(s);
                            break;
                        }
                    }
                    (if w.is_some() { Status::Satisfied } else { Status::Violated }, w)
                }
            };
            Verdict { property: p.name.clone(), status, witness }
        })
        .collect()
}
