//! Deterministic simulation of patient models under impulse dosing.
//!
//! Trajectories are sampled on a fixed output grid `t_k = k * grid`. A
//! sample at `t_k` is the state *before* any dose administered at `t_k`
//! (a blood draw precedes the day's injection). Doses split the integration
//! at their time and add their amount to the drug's target state.
//!
//! [`simulate`] is a thin wrapper over [`Checkpoint::start`] plus one
//! [`resume`] call, so chaining `resume` over arbitrary grid-aligned split
//! points reproduces `simulate` bit for bit.

mod integrator;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Fnv64, ModelDefinition};
use integrator::Workspace;

/// Time comparison slack in days.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulation diverged (non-finite state) at t = {time}")]
    Diverged { time: f64 },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("checkpoint was produced by a different model, parameter set or configuration")]
    CheckpointIncompatible,
}

impl SimError {
    fn invalid(msg: impl Into<String>) -> Self {
        SimError::Validation(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseEvent {
    pub time: f64,
    pub drug: String,
    pub amount: f64,
}

impl DoseEvent {
    pub fn new(time: f64, drug: impl Into<String>, amount: f64) -> Self {
        DoseEvent { time, drug: drug.into(), amount }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rk4-fixed")]
    Rk4,
    #[serde(rename = "rkf45-adaptive")]
    Rkf45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub method: Method,
    /// Fixed step for [`Method::Rk4`]; initial step proposal for [`Method::Rkf45`].
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Days between stored samples.
    pub output_grid: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { method: Method::Rk4, step: 0.25, rel_tol: 1e-6, abs_tol: 1e-9, output_grid: 1.0 }
    }
}

impl SimulationConfig {
    pub fn rk4(step: f64, output_grid: f64) -> Self {
        SimulationConfig { method: Method::Rk4, step, output_grid, ..Default::default() }
    }

    pub fn rkf45(rel_tol: f64, abs_tol: f64, output_grid: f64) -> Self {
        SimulationConfig { method: Method::Rkf45, rel_tol, abs_tol, output_grid, step: output_grid.min(0.1) }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.output_grid) {
            return Err(SimError::invalid("output grid must be finite and > 0"));
        }
        if !pos(self.step) {
            return Err(SimError::invalid("step must be finite and > 0"));
        }
        if self.step > self.output_grid + TIME_EPS {
            return Err(SimError::invalid("step must not exceed the output grid"));
        }
        if self.method == Method::Rkf45 && !(pos(self.rel_tol) && pos(self.abs_tol)) {
            return Err(SimError::invalid("tolerances must be finite and > 0"));
        }
        Ok(())
    }

    /// Grid index of `t`, if `t` lies on the output grid.
    pub fn grid_index(&self, t: f64) -> Option<u64> {
        if !t.is_finite() || t < -TIME_EPS {
            return None;
        }
        let k = (t / self.output_grid).round();
        ((k * self.output_grid - t).abs() <= TIME_EPS).then_some(k as u64)
    }

    pub fn grid_time(&self, k: u64) -> f64 {
        k as f64 * self.output_grid
    }

    fn signature(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(match self.method {
            Method::Rk4 => 1,
            Method::Rkf45 => 2,
        });
        for v in [self.step, self.rel_tol, self.abs_tol, self.output_grid] {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

/// Sampled simulation output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub observables: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Appends `other`, which must start after this trajectory ends.
    pub fn extend(&mut self, other: Trajectory) {
        debug_assert!(match (self.last_time(), other.times.first()) {
            (Some(a), Some(b)) => *b > a,
            _ => true,
        });
        self.times.extend(other.times);
        self.states.extend(other.states);
        self.observables.extend(other.observables);
    }

    /// True when any stored state is negative. Negative states are allowed
    /// by the integrator but usually indicate a modelling error.
    pub fn has_negative_states(&self) -> bool {
        self.states.iter().flatten().any(|v| *v < 0.0)
    }

    /// Observable `obs` at time `t`, linearly interpolated between samples.
    /// Exact sample values are returned at sample times.
    pub fn observable_at(&self, obs: usize, t: f64) -> Option<f64> {
        interpolate(&self.times, t, |i| self.observables[i][obs])
    }

    pub fn state_at(&self, state: usize, t: f64) -> Option<f64> {
        interpolate(&self.times, t, |i| self.states[i][state])
    }

    /// Writes `time,state_<name>...,<observable>...` with shortest round-trip floats.
    pub fn write_csv<W: Write>(&self, model: &ModelDefinition, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["time".to_string()];
        header.extend(model.states().iter().map(|s| format!("state_{}", s.name)));
        header.extend(model.observables().iter().map(|o| o.name.clone()));
        writeln!(out, "{}", header.join(","))?;
        for ((t, s), o) in self.times.iter().zip(&self.states).zip(&self.observables) {
            let mut line = t.to_string();
            for v in s.iter().chain(o) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn interpolate(times: &[f64], t: f64, value: impl Fn(usize) -> f64) -> Option<f64> {
    let first = *times.first()?;
    let last = *times.last()?;
    if t < first - TIME_EPS || t > last + TIME_EPS {
        return None;
    }
    let i = times.partition_point(|x| *x < t);
    if i < times.len() && (times[i] - t).abs() <= TIME_EPS {
        return Some(value(i));
    }
    if i > 0 && (times[i - 1] - t).abs() <= TIME_EPS {
        return Some(value(i - 1));
    }
    if i == 0 || i >= times.len() {
        return Some(value(if i == 0 { 0 } else { times.len() - 1 }));
    }
    let (t0, t1) = (times[i - 1], times[i]);
    let w = (t - t0) / (t1 - t0);
    let (v0, v1) = (value(i - 1), value(i));
    Some(v0 + w * (v1 - v0))
}

/// Resumable simulation state at a grid point, before that point's doses.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub index: u64,
    pub state: Vec<f64>,
    /// Step-size proposal carried by the adaptive integrator.
    pub step_hint: Option<f64>,
    signature: u64,
}

fn run_signature(model: &ModelDefinition, params: &[f64], cfg: &SimulationConfig) -> u64 {
    let mut h = Fnv64::new();
    h.write_u64(model.fingerprint());
    for p in params {
        h.write_u64(p.to_bits());
    }
    h.write_u64(cfg.signature());
    h.finish()
}

impl Checkpoint {
    /// Checkpoint at `t = 0` holding `init`.
    pub fn start(
        model: &ModelDefinition,
        params: &[f64],
        init: &[f64],
        cfg: &SimulationConfig,
    ) -> Result<Checkpoint, SimError> {
        cfg.validate()?;
        if params.len() != model.param_count() {
            return Err(SimError::invalid(format!(
                "expected {} parameters, got {}",
                model.param_count(),
                params.len()
            )));
        }
        if init.len() != model.state_count() {
            return Err(SimError::invalid(format!(
                "expected {} initial states, got {}",
                model.state_count(),
                init.len()
            )));
        }
        if let Some(p) = params.iter().position(|v| !v.is_finite()) {
            return Err(SimError::invalid(format!("parameter '{}' is not finite", model.params()[p].name)));
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(SimError::invalid("initial state is not finite"));
        }
        Ok(Checkpoint {
            time: 0.0,
            index: 0,
            state: init.to_vec(),
            step_hint: (cfg.method == Method::Rkf45).then_some(cfg.step),
            signature: run_signature(model, params, cfg),
        })
    }

    /// The sample row this checkpoint corresponds to.
    pub fn row(&self, model: &ModelDefinition, params: &[f64]) -> Trajectory {
        Trajectory {
            times: vec![self.time],
            states: vec![self.state.clone()],
            observables: vec![model.evaluate_observables(&self.state, params)],
        }
    }
}

/// A dose resolved against the model: `(time, drug index, amount)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ResolvedDose {
    time: f64,
    drug: usize,
    amount: f64,
}

fn resolve_doses(model: &ModelDefinition, doses: &[DoseEvent]) -> Result<Vec<ResolvedDose>, SimError> {
    let mut out = Vec::with_capacity(doses.len());
    for d in doses {
        let drug = model
            .drug_index(&d.drug)
            .ok_or_else(|| SimError::invalid(format!("unknown drug '{}'", d.drug)))?;
        if !(d.amount.is_finite() && d.amount >= 0.0) {
            return Err(SimError::invalid(format!("dose amount {} of '{}' is not a non-negative number", d.amount, d.drug)));
        }
        if !(d.time.is_finite() && d.time >= 0.0) {
            return Err(SimError::invalid(format!("dose time {} is not a non-negative number", d.time)));
        }
        out.push(ResolvedDose { time: d.time, drug, amount: d.amount });
    }
    // Canonical order so that input permutations cannot change the sums below.
    out.sort_by(|a, b| {
        a.time.total_cmp(&b.time).then(a.drug.cmp(&b.drug)).then(a.amount.total_cmp(&b.amount))
    });
    Ok(out)
}

/// Adds all doses in `batch` (same time) to the state; amounts landing on the
/// same state are summed first.
fn apply_batch(model: &ModelDefinition, batch: &[ResolvedDose], y: &mut [f64], scratch: &mut [f64]) {
    scratch.iter_mut().for_each(|v| *v = 0.0);
    for d in batch {
        let drug = &model.drugs()[d.drug];
        scratch[drug.target] += d.amount;
        if let Some(acc) = drug.accumulator {
            scratch[acc] += d.amount;
        }
    }
    for (v, add) in y.iter_mut().zip(scratch.iter()) {
        if *add != 0.0 {
            *v += *add;
        }
    }
}

/// Adds `doses` to `state` as if administered at one instant. Exposed so
/// callers can reason about impulse semantics directly.
pub fn apply_doses(model: &ModelDefinition, state: &mut [f64], doses: &[DoseEvent]) -> Result<(), SimError> {
    let resolved = resolve_doses(model, doses)?;
    let mut scratch = vec![0.0; state.len()];
    apply_batch(model, &resolved, state, &mut scratch);
    Ok(())
}

/// Simulates from `t = 0` to `horizon`, returning samples on the output grid.
pub fn simulate(
    model: &ModelDefinition,
    params: &[f64],
    init: &[f64],
    doses: &[DoseEvent],
    horizon: f64,
    cfg: &SimulationConfig,
) -> Result<Trajectory, SimError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(SimError::invalid("horizon must be finite and > 0"));
    }
    let cp = Checkpoint::start(model, params, init, cfg)?;
    if let Some(d) = doses.iter().find(|d| d.time > horizon + TIME_EPS) {
        return Err(SimError::invalid(format!("dose at t = {} lies beyond the horizon {horizon}", d.time)));
    }
    let mut traj = cp.row(model, params);
    let (segment, _) = resume(model, params, &cp, doses, horizon, cfg)?;
    traj.extend(segment);
    Ok(traj)
}

/// Continues from `cp` to the grid time `until`, applying the doses whose
/// time lies in `[cp.time, until)`. Returns the samples in `(cp.time, until]`
/// and the checkpoint at `until`.
pub fn resume(
    model: &ModelDefinition,
    params: &[f64],
    cp: &Checkpoint,
    doses: &[DoseEvent],
    until: f64,
    cfg: &SimulationConfig,
) -> Result<(Trajectory, Checkpoint), SimError> {
    if cp.signature != run_signature(model, params, cfg) || cp.state.len() != model.state_count() {
        return Err(SimError::CheckpointIncompatible);
    }
    if until.is_nan() || until <= cp.time + TIME_EPS {
        return Err(SimError::invalid(format!("resume target {until} is not after checkpoint time {}", cp.time)));
    }
    let end_index = cfg
        .grid_index(until)
        .ok_or_else(|| SimError::invalid(format!("resume target {until} is not on the output grid")))?;

    let resolved = resolve_doses(model, doses)?;
    let mut pending = resolved
        .iter()
        .copied()
        .filter(|d| d.time >= cp.time - TIME_EPS && d.time < until - TIME_EPS)
        .peekable();

    let n = model.state_count();
    let mut ws = Workspace::new(n);
    let mut scratch = vec![0.0; n];
    let mut batch: Vec<ResolvedDose> = Vec::new();
    let mut y = cp.state.clone();
    let mut h = cp.step_hint.unwrap_or(cfg.step);
    let mut out = Trajectory::default();

    for k in cp.index..end_index {
        let t_end = cfg.grid_time(k + 1);
        let mut t = cfg.grid_time(k);
        loop {
            // Apply everything due at `t`.
            batch.clear();
            while let Some(d) = pending.next_if(|d| d.time <= t + TIME_EPS) {
                batch.push(d);
            }
            if !batch.is_empty() {
                apply_batch(model, &batch, &mut y, &mut scratch);
            }
            let stop = match pending.peek() {
                Some(d) if d.time < t_end - TIME_EPS => d.time,
                _ => t_end,
            };
            let res = match cfg.method {
                Method::Rk4 => integrator::rk4_span(model, params, t, stop, cfg.step, &mut y, &mut ws),
                Method::Rkf45 => {
                    integrator::rkf45_span(model, params, t, stop, &mut h, cfg.rel_tol, cfg.abs_tol, &mut y, &mut ws)
                }
            };
            res.map_err(|time| SimError::Diverged { time })?;
            if stop == t_end {
                break;
            }
            t = stop;
        }
        out.times.push(t_end);
        out.observables.push(model.evaluate_observables(&y, params));
        out.states.push(y.clone());
    }

    let next = Checkpoint {
        time: cfg.grid_time(end_index),
        index: end_index,
        state: y,
        step_hint: (cfg.method == Method::Rkf45).then_some(h),
        signature: cp.signature,
    };
    Ok((out, next))
}

/// Observable values for one state row; see [`ModelDefinition::evaluate_observables`].
pub fn evaluate_observables(model: &ModelDefinition, params: &[f64], row: &[f64]) -> Result<Vec<f64>, SimError> {
    if row.len() != model.state_count() {
        return Err(SimError::invalid(format!("expected {} states, got {}", model.state_count(), row.len())));
    }
    Ok(model.evaluate_observables(row, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn decay() -> ModelDefinition {
        ModelDefinition::from_toml_str(
            r#"
            name = "decay"
            states = [ { name = "x", init = 1.0 } ]
            drugs = [ { name = "bolus", target = "x" } ]
            observables = [ { name = "x", expr = "x" } ]
            [rhs]
            x = "-x"
            "#,
        )
        .unwrap()
    }

    fn oscillator() -> ModelDefinition {
        ModelDefinition::from_toml_str(
            r#"
            name = "osc"
            states = [ { name = "x", init = 1.0 }, { name = "y", init = 0.0 } ]
            [rhs]
            x = "y"
            y = "-x"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn exponential_decay_matches_analytic_solution() {
        let m = decay();
        let cfg = SimulationConfig::rk4(0.01, 1.0);
        let tr = simulate(&m, &[], &[1.0], &[], 1.0, &cfg).unwrap();
        assert_eq!(tr.times, vec![0.0, 1.0]);
        assert!((tr.states[1][0] - 0.367879441).abs() < 1e-8);
    }

    #[test]
    fn harmonic_oscillator_returns_after_one_period() {
        let m = oscillator();
        let period = 2.0 * std::f64::consts::PI;
        let cfg = SimulationConfig::rk4(0.01, period);
        let tr = simulate(&m, &[], &[1.0, 0.0], &[], period, &cfg).unwrap();
        assert!((tr.states.last().unwrap()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn impulse_adds_amount_exactly() {
        let m = decay();
        let cfg = SimulationConfig::rk4(0.01, 0.5);
        let dosed = simulate(&m, &[], &[1.0], &[DoseEvent::new(0.5, "bolus", 2.0)], 1.0, &cfg).unwrap();
        let plain = simulate(&m, &[], &[1.0], &[], 0.5, &cfg).unwrap();
        // Sample at 0.5 is pre-dose and unaffected.
        assert_eq!(dosed.states[1][0], plain.states[1][0]);

        let start = Checkpoint::start(&m, &[], &[1.0], &cfg).unwrap();
        let (_, mid) = resume(&m, &[], &start, &[], 0.5, &cfg).unwrap();
        let mut bumped = mid.clone();
        bumped.state[0] = mid.state[0] + 2.0;
        let (after, _) = resume(&m, &[], &bumped, &[], 1.0, &cfg).unwrap();
        assert_eq!(after.states[0][0], dosed.states[2][0]);
    }

    #[test]
    fn simultaneous_doses_sum_independent_of_order() {
        let m = decay();
        let cfg = SimulationConfig::default();
        let a = vec![
            DoseEvent::new(1.0, "bolus", 0.1),
            DoseEvent::new(1.0, "bolus", 0.2),
            DoseEvent::new(0.3, "bolus", 0.7),
            DoseEvent::new(1.0, "bolus", 0.3),
        ];
        let mut b = a.clone();
        b.reverse();
        let ta = simulate(&m, &[], &[1.0], &a, 3.0, &cfg).unwrap();
        let tb = simulate(&m, &[], &[1.0], &b, 3.0, &cfg).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn validation_errors() {
        let m = decay();
        let cfg = SimulationConfig::default();
        let bad_drug = simulate(&m, &[], &[1.0], &[DoseEvent::new(0.0, "nope", 1.0)], 1.0, &cfg);
        assert!(matches!(bad_drug, Err(SimError::Validation(_))));
        let negative = simulate(&m, &[], &[1.0], &[DoseEvent::new(0.0, "bolus", -1.0)], 1.0, &cfg);
        assert!(matches!(negative, Err(SimError::Validation(_))));
        let beyond = simulate(&m, &[], &[1.0], &[DoseEvent::new(5.0, "bolus", 1.0)], 1.0, &cfg);
        assert!(matches!(beyond, Err(SimError::Validation(_))));
        assert!(simulate(&m, &[1.0], &[1.0], &[], 1.0, &cfg).is_err());
        assert!(simulate(&m, &[], &[1.0], &[], 1.5, &cfg).is_err());
        assert!(simulate(&m, &[], &[1.0], &[], 0.0, &cfg).is_err());
        let coarse = SimulationConfig::rk4(2.0, 1.0);
        assert!(simulate(&m, &[], &[1.0], &[], 1.0, &coarse).is_err());
    }

    #[test]
    fn blow_up_reports_divergence_time() {
        let m = ModelDefinition::from_toml_str(
            r#"
            name = "blowup"
            states = [ { name = "x", init = 1.0 } ]
            [rhs]
            x = "x * x"
            "#,
        )
        .unwrap();
        // x(t) = 1 / (1 - t) blows up at t = 1.
        let err = simulate(&m, &[], &[1.0], &[], 3.0, &SimulationConfig::rk4(0.01, 1.0)).unwrap_err();
        match err {
            SimError::Diverged { time } => assert!(time > 0.9 && time <= 3.0, "{time}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_preconditions() {
        let m = decay();
        let cfg = SimulationConfig::default();
        let cp = Checkpoint::start(&m, &[], &[1.0], &cfg).unwrap();
        let (_, at2) = resume(&m, &[], &cp, &[], 2.0, &cfg).unwrap();
        assert!(matches!(resume(&m, &[], &at2, &[], 2.0, &cfg), Err(SimError::Validation(_))));
        assert!(matches!(resume(&m, &[], &at2, &[], 1.0, &cfg), Err(SimError::Validation(_))));
        assert!(resume(&m, &[], &at2, &[], 2.5, &cfg).is_err());
        let other = SimulationConfig::rk4(0.1, 1.0);
        assert!(matches!(resume(&m, &[], &at2, &[], 3.0, &other), Err(SimError::CheckpointIncompatible)));
        let osc = oscillator();
        assert!(matches!(resume(&osc, &[], &at2, &[], 3.0, &cfg), Err(SimError::CheckpointIncompatible)));
    }

    #[test]
    fn split_decay_is_bit_identical() {
        let m = decay();
        let cfg = SimulationConfig::rk4(0.01, 0.5);
        let whole = simulate(&m, &[], &[1.0], &[], 1.0, &cfg).unwrap();
        let cp = Checkpoint::start(&m, &[], &[1.0], &cfg).unwrap();
        let (_, mid) = resume(&m, &[], &cp, &[], 0.5, &cfg).unwrap();
        let (tail, _) = resume(&m, &[], &mid, &[], 1.0, &cfg).unwrap();
        assert_eq!(tail.states[0][0].to_bits(), whole.states[2][0].to_bits());
    }

    #[test]
    fn chained_tenth_splits_equal_unsplit() {
        let m = decay();
        let cfg = SimulationConfig::rk4(0.01, 0.1);
        let doses = [DoseEvent::new(0.35, "bolus", 0.4), DoseEvent::new(0.7, "bolus", 1.0)];
        let whole = simulate(&m, &[], &[1.0], &doses, 1.0, &cfg).unwrap();
        let mut cp = Checkpoint::start(&m, &[], &[1.0], &cfg).unwrap();
        let mut chained = cp.row(&m, &[]);
        for k in 1..=10 {
            let (seg, next) = resume(&m, &[], &cp, &doses, cfg.grid_time(k), &cfg).unwrap();
            chained.extend(seg);
            cp = next;
        }
        assert_eq!(chained, whole);
    }

    #[test]
    fn interpolation_hits_samples_exactly() {
        let m = decay();
        let tr = simulate(&m, &[], &[1.0], &[], 2.0, &SimulationConfig::default()).unwrap();
        assert_eq!(tr.observable_at(0, 1.0), Some(tr.observables[1][0]));
        let mid = tr.observable_at(0, 1.5).unwrap();
        assert_eq!(mid, 0.5 * (tr.observables[1][0] + tr.observables[2][0]));
        assert_eq!(tr.observable_at(0, 2.5), None);
    }

    #[test]
    fn csv_export_has_header_and_round_trip_floats() {
        let m = oscillator();
        let tr = simulate(&m, &[], &[1.0, 0.0], &[], 2.0, &SimulationConfig::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,state_x,state_y");
        assert_eq!(lines.len(), 4);
        let x: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(x.to_bits(), tr.states[1][0].to_bits());
    }

    #[test]
    fn negative_states_are_flagged_not_clamped() {
        let m = ModelDefinition::from_toml_str(
            r#"
            name = "drain"
            states = [ { name = "x", init = 1.0 } ]
            [rhs]
            x = "-1"
            "#,
        )
        .unwrap();
        let tr = simulate(&m, &[], &[1.0], &[], 2.0, &SimulationConfig::default()).unwrap();
        assert!(tr.has_negative_states());
        assert!((tr.states[2][0] + 1.0).abs() < 1e-12);
    }
}
