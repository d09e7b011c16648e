//! Treatment invariants and goals over sampled trajectories.
//!
//! A property pairs a linear predicate over observables with a temporal
//! shape:
//!
//! * **invariant** on `[from, until]`: the predicate must hold at every
//!   sample in the window. The witness of a violation is the earliest
//!   failing sample.
//! * **goal** with `deadline` and `sustain`: some sample `s` with
//!   `s + sustain <= deadline` must start a stretch where the predicate holds
//!   at every sample of `[s, s + sustain]`. The witness is the smallest such
//!   `s`.
//!
//! Predicates are evaluated at grid samples only. [`check`] evaluates a whole
//! trajectory at once; [`MonitorState`] consumes it incrementally and reaches
//! the same verdicts, reporting a violation as soon as its witness is fed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{expr::BinOp, Expr, ModelDefinition};
use crate::sim::{Trajectory, TIME_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("property '{property}': {message}")]
    Invalid { property: String, message: String },
    #[error("cannot parse predicate '{text}': {message}")]
    Predicate { text: String, message: String },
    #[error("property '{property}' needs samples up to t = {needed}, trajectory ends at {available}")]
    Coverage { property: String, needed: f64, available: f64 },
    #[error("segment is not contiguous: expected t = {expected}, got {found}")]
    NonContiguous { expected: f64, found: f64 },
    #[error("cannot read property file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
}

/// `sum(coef * observable) + constant  (<= | >=)  rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub terms: Vec<(String, f64)>,
    pub constant: f64,
    pub op: Comparison,
    pub rhs: f64,
}

impl Predicate {
    /// Single-observable threshold `observable op rhs`.
    pub fn threshold(observable: &str, op: Comparison, rhs: f64) -> Self {
        Predicate { terms: vec![(observable.to_string(), 1.0)], constant: 0.0, op, rhs }
    }

    /// Parses `lhs <= rhs` or `lhs >= rhs` where both sides are linear in
    /// observable names, e.g. `L + 0.5 * F <= 4`.
    pub fn parse(text: &str) -> Result<Self, MonitorError> {
        let err = |message: String| MonitorError::Predicate { text: text.to_string(), message };
        let (op, pos) = match (text.find("<="), text.find(">=")) {
            (Some(p), None) => (Comparison::Le, p),
            (None, Some(p)) => (Comparison::Ge, p),
            _ => return Err(err("expected exactly one '<=' or '>='".into())),
        };
        let side = |s: &str| -> Result<Linear, MonitorError> {
            let e = Expr::parse(s).map_err(|e| err(e.to_string()))?;
            linearise(&e).ok_or_else(|| err("predicate must be linear in observables".into()))
        };
        let lhs = side(&text[..pos])?;
        let rhs = side(&text[pos + 2..])?;
        // Move everything to the left: lhs - rhs_terms  op  rhs_const - lhs_const.
        let mut terms = lhs.terms;
        for (name, c) in rhs.terms {
            *terms.entry(name).or_insert(0.0) -= c;
        }
        Ok(Predicate {
            terms: terms.into_iter().filter(|(_, c)| *c != 0.0).collect(),
            constant: 0.0,
            op,
            rhs: rhs.constant - lhs.constant,
        })
    }

    /// Always-true predicate `0 <= 0`.
    pub fn trivially_true() -> Self {
        Predicate { terms: Vec::new(), constant: 0.0, op: Comparison::Le, rhs: 0.0 }
    }
}

impl std::fmt::Display for Predicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts: Vec<String> = self.terms.iter().map(|(n, c)| format!("{c} * {n}")).collect();
        if self.constant != 0.0 || parts.is_empty() {
            parts.push(self.constant.to_string());
        }
        let op = match self.op {
            Comparison::Le => "<=",
            Comparison::Ge => ">=",
        };
        write!(f, "{} {op} {}", parts.join(" + "), self.rhs)
    }
}

struct Linear {
    terms: BTreeMap<String, f64>,
    constant: f64,
}

fn linearise(e: &Expr) -> Option<Linear> {
    Some(match e {
        Expr::Num(v) => Linear { terms: BTreeMap::new(), constant: *v },
        Expr::Ident(n) => Linear { terms: [(n.clone(), 1.0)].into(), constant: 0.0 },
        Expr::Neg(a) => scale(linearise(a)?, -1.0),
        Expr::Bin(op, a, b) => {
            let (a, b) = (linearise(a)?, linearise(b)?);
            match op {
                BinOp::Add | BinOp::Sub => {
                    let sign = if *op == BinOp::Add { 1.0 } else { -1.0 };
                    let mut terms = a.terms;
                    for (n, c) in b.terms {
                        *terms.entry(n).or_insert(0.0) += sign * c;
                    }
                    Linear { terms, constant: a.constant + sign * b.constant }
                }
                BinOp::Mul if a.terms.is_empty() => scale(b, a.constant),
                BinOp::Mul if b.terms.is_empty() => scale(a, b.constant),
                BinOp::Div if b.terms.is_empty() => scale(a, 1.0 / b.constant),
                _ => return None,
            }
        }
        Expr::Call(..) => return None,
    })
}

fn scale(mut l: Linear, k: f64) -> Linear {
    l.terms.values_mut().for_each(|c| *c *= k);
    l.constant *= k;
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PropertyKind {
    Invariant { from: f64, until: f64 },
    Goal { deadline: f64, sustain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
    pub predicate: Predicate,
}

impl Property {
    pub fn invariant(name: &str, from: f64, until: f64, predicate: Predicate) -> Self {
        Property { name: name.to_string(), kind: PropertyKind::Invariant { from, until }, predicate }
    }

    pub fn goal(name: &str, deadline: f64, sustain: f64, predicate: Predicate) -> Self {
        Property { name: name.to_string(), kind: PropertyKind::Goal { deadline, sustain }, predicate }
    }

    pub fn is_goal(&self) -> bool {
        matches!(self.kind, PropertyKind::Goal { .. })
    }

    /// Last time the property needs to see.
    pub fn horizon_needed(&self) -> f64 {
        match self.kind {
            PropertyKind::Invariant { until, .. } => until,
            PropertyKind::Goal { deadline, .. } => deadline,
        }
    }

    fn validate(&self) -> Result<(), MonitorError> {
        let invalid = |message: &str| MonitorError::Invalid { property: self.name.clone(), message: message.into() };
        match self.kind {
            PropertyKind::Invariant { from, until } => {
                if !(from.is_finite() && until.is_finite() && from >= 0.0 && from <= until) {
                    return Err(invalid("window must satisfy 0 <= from <= until"));
                }
            }
            PropertyKind::Goal { deadline, sustain } => {
                if !(deadline.is_finite() && deadline >= 0.0) {
                    return Err(invalid("deadline must be finite and >= 0"));
                }
                if !(sustain.is_finite() && sustain >= 0.0) {
                    return Err(invalid("sustain must be finite and >= 0"));
                }
            }
        }
        let finite = self.predicate.terms.iter().all(|(_, c)| c.is_finite())
            && self.predicate.constant.is_finite()
            && self.predicate.rhs.is_finite();
        if !finite {
            return Err(invalid("predicate coefficients must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Satisfied,
    Violated,
    Pending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub property: String,
    pub status: Status,
    /// First violating sample (invariants) or earliest sustained start (goals).
    pub witness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct BoundProperty {
    name: String,
    kind: PropertyKind,
    coefs: Vec<(usize, f64)>,
    constant: f64,
    op: Comparison,
    rhs: f64,
}

impl BoundProperty {
    #[inline]
    fn holds(&self, row: &[f64]) -> bool {
        let lhs = self.coefs.iter().fold(self.constant, |acc, &(i, c)| acc + c * row[i]);
        match self.op {
            Comparison::Le => lhs <= self.rhs,
            Comparison::Ge => lhs >= self.rhs,
        }
    }
}

/// Properties bound to a model's observables.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertySet {
    properties: Vec<Property>,
    bound: Vec<BoundProperty>,
}

impl PropertySet {
    pub fn new(model: &ModelDefinition, properties: Vec<Property>) -> Result<Self, MonitorError> {
        let mut names = std::collections::HashSet::new();
        let mut bound = Vec::with_capacity(properties.len());
        for p in &properties {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(MonitorError::Invalid { property: p.name.clone(), message: "duplicate name".into() });
            }
            let coefs = p
                .predicate
                .terms
                .iter()
                .map(|(n, c)| {
                    model.observable_index(n).map(|i| (i, *c)).ok_or_else(|| MonitorError::Invalid {
                        property: p.name.clone(),
                        message: format!("unknown observable '{n}'"),
                    })
                })
                .collect::<Result<_, _>>()?;
            bound.push(BoundProperty {
                name: p.name.clone(),
                kind: p.kind,
                coefs,
                constant: p.predicate.constant,
                op: p.predicate.op,
                rhs: p.predicate.rhs,
            });
        }
        Ok(PropertySet { properties, bound })
    }

    pub fn properties(&self) -> &[Property] {
        &self.properties
    }

    pub fn len(&self) -> usize {
        self.properties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.properties.is_empty()
    }

    /// Whether the predicate of property `i` holds on an observable row.
    pub fn holds(&self, i: usize, row: &[f64]) -> bool {
        self.bound[i].holds(row)
    }

    /// Observable indices read by property `i`.
    pub fn observables_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.bound[i].coefs.iter().map(|(o, _)| *o)
    }

    /// Checks every window and deadline fits in `[0, horizon]`.
    pub fn validate_horizon(&self, horizon: f64) -> Result<(), MonitorError> {
        for p in &self.properties {
            if p.horizon_needed() > horizon + TIME_EPS {
                return Err(MonitorError::Invalid {
                    property: p.name.clone(),
                    message: format!("needs t = {} beyond horizon {horizon}", p.horizon_needed()),
                });
            }
        }
        Ok(())
    }
}

/// Offline evaluation of every property over a complete trajectory.
pub fn check(traj: &Trajectory, set: &PropertySet) -> Result<Vec<Verdict>, MonitorError> {
    let available = traj.last_time().unwrap_or(f64::NEG_INFINITY);
    let mut out = Vec::with_capacity(set.len());
    for p in &set.bound {
        let needed = match p.kind {
            PropertyKind::Invariant { until, .. } => until,
            PropertyKind::Goal { deadline, .. } => deadline,
        };
        if available < needed - TIME_EPS {
            return Err(MonitorError::Coverage { property: p.name.clone(), needed, available });
        }
        let holds: Vec<bool> = traj.observables.iter().map(|row| p.holds(row)).collect();
        let (status, witness) = match p.kind {
            PropertyKind::Invariant { from, until } => {
                let first_bad = traj
                    .times
                    .iter()
                    .zip(&holds)
                    .find(|(t, ok)| **t >= from - TIME_EPS && **t <= until + TIME_EPS && !**ok);
                match first_bad {
                    Some((t, _)) => (Status::Violated, Some(*t)),
                    None => (Status::Satisfied, None),
                }
            }
            PropertyKind::Goal { deadline, sustain } => {
                // next_fail[i]: time of the first failing sample at or after i.
                let n = holds.len();
                let mut next_fail = vec![f64::INFINITY; n + 1];
                for i in (0..n).rev() {
                    next_fail[i] = if holds[i] { next_fail[i + 1] } else { traj.times[i] };
                }
                let start = (0..n).find(|&i| {
                    let s = traj.times[i];
                    s + sustain <= deadline + TIME_EPS && next_fail[i] > s + sustain + TIME_EPS
                });
                match start {
                    Some(i) => (Status::Satisfied, Some(traj.times[i])),
                    None => (Status::Violated, None),
                }
            }
        };
        out.push(Verdict { property: p.name.clone(), status, witness });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Progress {
    status: Status,
    witness: Option<f64>,
    run_start: Option<f64>,
}

/// Incremental monitor over a trajectory fed in contiguous segments.
///
/// Cloning is the snapshot; [`MonitorState::restore`] rewinds to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    grid: f64,
    last: Option<f64>,
    progress: Vec<Progress>,
}

impl MonitorState {
    pub fn new(set: &PropertySet, grid: f64) -> Self {
        MonitorState {
            grid,
            last: None,
            progress: vec![Progress { status: Status::Pending, witness: None, run_start: None }; set.len()],
        }
    }

    pub fn snapshot(&self) -> MonitorState {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &MonitorState) {
        self.clone_from(snapshot);
    }

    pub fn last_time(&self) -> Option<f64> {
        self.last
    }

    /// Feeds one sample; the first sample must be at `t = 0` and each later
    /// one exactly one grid step after its predecessor.
    pub fn feed_row(&mut self, set: &PropertySet, t: f64, row: &[f64]) -> Result<(), MonitorError> {
        let expected = self.last.map_or(0.0, |l| l + self.grid);
        if (t - expected).abs() > TIME_EPS {
            return Err(MonitorError::NonContiguous { expected, found: t });
        }
        self.last = Some(t);
        for (p, st) in set.bound.iter().zip(self.progress.iter_mut()) {
            if st.status != Status::Pending {
                continue;
            }
            match p.kind {
                PropertyKind::Invariant { from, until } => {
                    if t >= from - TIME_EPS && t <= until + TIME_EPS && !p.holds(row) {
                        st.status = Status::Violated;
                        st.witness = Some(t);
                    } else if t >= until - TIME_EPS {
                        st.status = Status::Satisfied;
                    }
                }
                PropertyKind::Goal { deadline, sustain } => {
                    if let Some(r) = st.run_start {
                        if t > r + sustain + TIME_EPS {
                            st.status = Status::Satisfied;
                            st.witness = Some(r);
                            continue;
                        }
                    }
                    if p.holds(row) {
                        if st.run_start.is_none() && t + sustain <= deadline + TIME_EPS {
                            st.run_start = Some(t);
                        }
                        if let Some(r) = st.run_start {
                            if t >= r + sustain - TIME_EPS {
                                st.status = Status::Satisfied;
                                st.witness = Some(r);
                                continue;
                            }
                        }
                    } else {
                        st.run_start = None;
                    }
                    if st.run_start.is_none() && t + sustain >= deadline - TIME_EPS {
                        st.status = Status::Violated;
                    }
                }
            }
        }
        Ok(())
    }

    /// Feeds a trajectory segment and returns the verdicts after it.
    pub fn feed(&mut self, set: &PropertySet, segment: &Trajectory) -> Result<Vec<Verdict>, MonitorError> {
        for (t, row) in segment.times.iter().zip(&segment.observables) {
            self.feed_row(set, *t, row)?;
        }
        Ok(self.verdicts(set))
    }

    pub fn verdicts(&self, set: &PropertySet) -> Vec<Verdict> {
        set.bound
            .iter()
            .zip(&self.progress)
            .map(|(p, st)| Verdict { property: p.name.clone(), status: st.status, witness: st.witness })
            .collect()
    }

    pub fn status(&self, i: usize) -> Status {
        self.progress[i].status
    }

    pub fn witness(&self, i: usize) -> Option<f64> {
        self.progress[i].witness
    }

    /// First violated property (lowest index) and its witness.
    pub fn violation(&self) -> Option<(usize, Option<f64>)> {
        self.progress
            .iter()
            .position(|p| p.status == Status::Violated)
            .map(|i| (i, self.progress[i].witness))
    }

    /// Pending goal with the earliest open sustained run, if any.
    pub fn pending_run_start(&self, i: usize) -> Option<f64> {
        self.progress[i].run_start
    }
}

/// On-disk property declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: PropertyKind,
    pub predicate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PropertyFile {
    #[serde(rename = "property", default)]
    properties: Vec<PropertyDecl>,
}

pub fn parse_properties(text: &str) -> Result<Vec<Property>, MonitorError> {
    let file: PropertyFile =
        toml::from_str(text).map_err(|e| MonitorError::File { path: "<text>".into(), message: e.to_string() })?;
    file.properties
        .into_iter()
        .map(|d| Ok(Property { name: d.name, kind: d.kind, predicate: Predicate::parse(&d.predicate)? }))
        .collect()
}

pub fn properties_to_string(props: &[Property]) -> String {
    let file = PropertyFile {
        properties: props
            .iter()
            .map(|p| PropertyDecl { name: p.name.clone(), kind: p.kind, predicate: p.predicate.to_string() })
            .collect(),
    };
    toml::to_string(&file).expect("properties serialise")
}

pub fn load_properties(path: impl AsRef<Path>) -> Result<Vec<Property>, MonitorError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MonitorError::File { path: path.display().to_string(), message: e.to_string() })?;
    parse_properties(&text).map_err(|e| match e {
        MonitorError::File { message, .. } => MonitorError::File { path: path.display().to_string(), message },
        other => other,
    })
}

/// Thresholds of the shipped downregulation property set for the surrogate
/// model. These are engine defaults, not clinical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Downregulation {
    /// LH-like level counted as suppressed.
    pub threshold: f64,
    /// Days suppression must be held.
    pub sustain: f64,
    /// Latest day suppression may complete.
    pub deadline: f64,
    /// FSH-like floor that must hold throughout.
    pub f_min: f64,
    /// Cap on the cumulative administered amount.
    pub max_total_dose: f64,
}

impl Default for Downregulation {
    fn default() -> Self {
        Downregulation { threshold: 4.0, sustain: 1.0, deadline: 5.0, f_min: 3.5, max_total_dose: 8.0 }
    }
}

impl Downregulation {
    pub fn properties(&self, horizon: f64) -> Vec<Property> {
        vec![
            Property::goal(
                "downregulated",
                self.deadline,
                self.sustain,
                Predicate::threshold("L", Comparison::Le, self.threshold),
            ),
            Property::invariant("fsh-floor", 0.0, horizon, Predicate::threshold("F", Comparison::Ge, self.f_min)),
            Property::invariant(
                "dose-cap",
                0.0,
                horizon,
                Predicate::threshold("dose_total", Comparison::Le, self.max_total_dose),
            ),
        ]
    }
}
