//! Digital-twin selection: scoring virtual patients against a clinical record.
//!
//! Each measurement contributes a normalised error
//! `|sim - meas| / max(abs_tol, rel_tol * |meas|)`. The score is the mean of
//! these; the matched fraction is the share of measurements with normalised
//! error at most 1. A virtual patient is accepted as a twin when its matched
//! fraction reaches `min_matched_fraction`.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, VirtualPatient};
use crate::model::ModelDefinition;
use crate::records::{covering_horizon, ClinicalRecord};
use crate::sim::{simulate, DoseEvent, SimError, SimulationConfig};

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("invalid matching input: {0}")]
    Validation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write twin report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerance {
    #[serde(default)]
    pub rel: f64,
    #[serde(default)]
    pub abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Tolerance for observables without an entry in `tolerances`.
    pub default_tolerance: Tolerance,
    pub tolerances: BTreeMap<String, Tolerance>,
    pub min_matched_fraction: f64,
    pub context_doses: Vec<DoseEvent>,
    pub sim: SimulationConfig,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            default_tolerance: Tolerance { rel: 0.1, abs: 0.0 },
            tolerances: BTreeMap::new(),
            min_matched_fraction: 0.8,
            context_doses: Vec::new(),
            sim: SimulationConfig::default(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), TwinError> {
        let ok = |t: &Tolerance| t.rel.is_finite() && t.abs.is_finite() && t.rel >= 0.0 && t.abs >= 0.0;
        if !ok(&self.default_tolerance) || !self.tolerances.values().all(ok) {
            return Err(TwinError::Validation("tolerances must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_matched_fraction) {
            return Err(TwinError::Validation("min_matched_fraction must lie in [0, 1]".into()));
        }
        self.sim.validate()?;
        Ok(())
    }

    pub fn tolerance(&self, observable: &str) -> Tolerance {
        self.tolerances.get(observable).copied().unwrap_or(self.default_tolerance)
    }

    /// Copy with every tolerance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> MatchConfig {
        let s = |t: Tolerance| Tolerance { rel: t.rel * factor, abs: t.abs * factor };
        MatchConfig {
            default_tolerance: s(self.default_tolerance),
            tolerances: self.tolerances.iter().map(|(k, v)| (k.clone(), s(*v))).collect(),
            ..self.clone()
        }
    }
}

/// Tolerance-normalised absolute error of a single measurement.
pub fn normalised_error(sim: f64, meas: f64, tol: Tolerance) -> f64 {
    let err = (sim - meas).abs();
    let scale = tol.abs.max(tol.rel * meas.abs());
    if err == 0.0 {
        0.0
    } else if scale > 0.0 {
        err / scale
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    pub score: f64,
    pub matched_fraction: f64,
    /// Set when the virtual patient's simulation diverged.
    pub diverged_at: Option<f64>,
}

/// Scores one virtual patient against one record.
pub fn match_score(
    vp: &VirtualPatient,
    record: &ClinicalRecord,
    model: &ModelDefinition,
    cfg: &MatchConfig,
) -> Result<MatchScore, TwinError> {
    if record.measurements.is_empty() {
        return Err(TwinError::Validation(format!("record '{}' has no measurements", record.patient_id)));
    }
    let mut idx = Vec::with_capacity(record.measurements.len());
    for m in &record.measurements {
        idx.push(model.observable_index(&m.observable).ok_or_else(|| {
            TwinError::Validation(format!("observable '{}' is not defined by model '{}'", m.observable, model.name()))
        })?);
    }
    let t_max = record.measurements.iter().map(|m| m.time).fold(0.0, f64::max);
    let horizon = covering_horizon(t_max, &cfg.sim);
    let tr = match simulate(model, &vp.params, &model.initial_state(), &cfg.context_doses, horizon, &cfg.sim) {
        Ok(tr) => tr,
        Err(SimError::Diverged { time }) => {
            log::warn!("virtual patient {} diverged at t = {time} while matching {}", vp.id, record.patient_id);
            return Ok(MatchScore { score: f64::INFINITY, matched_fraction: 0.0, diverged_at: Some(time) });
        }
        Err(e) => return Err(e.into()),
    };
    let mut total = 0.0;
    let mut matched = 0usize;
    for (m, &o) in record.measurements.iter().zip(&idx) {
        let sim = tr.observable_at(o, m.time).expect("horizon covers the record");
        let e = normalised_error(sim, m.value, cfg.tolerance(&m.observable));
        total += e;
        if e <= 1.0 {
            matched += 1;
        }
    }
    let n = record.measurements.len() as f64;
    Ok(MatchScore { score: total / n, matched_fraction: matched as f64 / n, diverged_at: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedTwin {
    pub vp_id: String,
    pub score: f64,
    pub matched_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinSet {
    pub patient_id: String,
    /// Ascending by score, ties by virtual-patient id.
    pub ranked: Vec<RankedTwin>,
    /// Ranked entries meeting the matched-fraction threshold, in rank order.
    pub accepted: Vec<RankedTwin>,
}

impl TwinSet {
    pub fn has_twin(&self) -> bool {
        !self.accepted.is_empty()
    }

    pub fn best(&self) -> Option<&RankedTwin> {
        self.accepted.first()
    }
}

/// Scores every cohort member against `record` and ranks them.
pub fn compute_twins(
    cohort: &Cohort,
    record: &ClinicalRecord,
    model: &ModelDefinition,
    cfg: &MatchConfig,
) -> Result<TwinSet, TwinError> {
    if cohort.is_empty() {
        return Err(TwinError::Validation("cohort is empty".into()));
    }
    cfg.validate()?;
    let scores: Vec<MatchScore> = cohort
        .members
        .par_iter()
        .map(|vp| match_score(vp, record, model, cfg))
        .collect::<Result<_, _>>()?;
    let mut ranked: Vec<RankedTwin> = cohort
        .members
        .iter()
        .zip(scores)
        .map(|(vp, s)| RankedTwin { vp_id: vp.id.clone(), score: s.score, matched_fraction: s.matched_fraction })
        .collect();
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.vp_id.cmp(&b.vp_id)));
    let accepted = ranked
        .iter()
        .filter(|r| r.score.is_finite() && r.matched_fraction >= cfg.min_matched_fraction)
        .cloned()
        .collect();
    Ok(TwinSet { patient_id: record.patient_id.clone(), ranked, accepted })
}

pub const TWIN_HEADER: &str = "patient_id,vp_id,rank,score,matched_fraction,accepted";

/// Writes `patient_id,vp_id,rank,score,matched_fraction,accepted` rows.
pub fn write_twin_report<W: Write>(sets: &[TwinSet], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TWIN_HEADER}")?;
    for set in sets {
        for (rank, r) in set.ranked.iter().enumerate() {
            let accepted = set.accepted.iter().any(|a| a.vp_id == r.vp_id);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                set.patient_id,
                r.vp_id,
                rank + 1,
                r.score,
                r.matched_fraction,
                accepted
            )?;
        }
    }
    Ok(())
}

/// Parses a twin report back into per-patient twin sets (in file order).
pub fn read_twin_report(text: &str) -> Result<Vec<TwinSet>, TwinError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TWIN_HEADER) {
        return Err(TwinError::Validation(format!("twin report must start with '{TWIN_HEADER}'")));
    }
    let mut sets: Vec<TwinSet> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || TwinError::Validation(format!("line {}: malformed twin row", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let entry = RankedTwin {
            vp_id: f[1].to_string(),
            score: f[3].parse().map_err(|_| bad())?,
            matched_fraction: f[4].parse().map_err(|_| bad())?,
        };
        let accepted: bool = f[5].parse().map_err(|_| bad())?;
        if sets.last().map(|s| s.patient_id != f[0]).unwrap_or(true) {
            sets.push(TwinSet { patient_id: f[0].to_string(), ranked: Vec::new(), accepted: Vec::new() });
        }
        let set = sets.last_mut().expect("pushed above");
        if accepted {
            set.accepted.push(entry.clone());
        }
        set.ranked.push(entry);
    }
    Ok(sets)
}
