//! Virtual patients and cohorts.
//!
//! A virtual patient is a full parameter assignment for a model. Cohorts are
//! generated by independent uniform perturbation of a reference
//! parameterisation, seeded and reproducible; member 0 is always the
//! reference itself.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelDefinition;
use crate::sim::{simulate, SimError, SimulationConfig};

const COHORT_FORMAT: &str = "twinopt-cohort-1";

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort input: {0}")]
    Validation(String),
    #[error("cannot access cohort file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed cohort file: {0}")]
    Schema(String),
    #[error("cohort is for model '{found}', expected '{expected}'")]
    UnknownModel { found: String, expected: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Reference,
    Perturbed { seed: u64, index: u64 },
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub id: String,
    pub params: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub members: Vec<VirtualPatient>,
}

/// Identifier of the `index`-th generated member; zero-padded so that
/// lexicographic and numeric order agree.
pub fn member_id(index: usize) -> String {
    format!("vp{index:05}")
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VirtualPatient> {
        self.members.iter().find(|m| m.id == id)
    }

    /// Checks member-id uniqueness, parameter count and finiteness against `model`.
    pub fn validate(&self, model: &ModelDefinition) -> Result<(), CohortError> {
        if self.model != model.name() {
            return Err(CohortError::UnknownModel { found: self.model.clone(), expected: model.name().to_string() });
        }
        let mut ids = std::collections::HashSet::new();
        for m in &self.members {
            if !ids.insert(m.id.as_str()) {
                return Err(CohortError::Schema(format!("duplicate member id '{}'", m.id)));
            }
            if m.params.len() != model.param_count() {
                return Err(CohortError::Schema(format!(
                    "member '{}' has {} parameters, model '{}' has {}",
                    m.id,
                    m.params.len(),
                    model.name(),
                    model.param_count()
                )));
            }
            if m.params.iter().any(|v| !v.is_finite()) {
                return Err(CohortError::Schema(format!("member '{}' has non-finite parameters", m.id)));
            }
        }
        Ok(())
    }
}

/// Draws `n` virtual patients. Parameter `j` of every member lies in
/// `[ref_j (1 - spread_j), ref_j (1 + spread_j)]`.
pub fn generate_cohort(
    model: &ModelDefinition,
    reference: &[f64],
    spread: &[f64],
    n: usize,
    seed: u64,
) -> Result<Cohort, CohortError> {
    if reference.is_empty() {
        return Err(CohortError::Validation("reference parameterisation is empty".into()));
    }
    if reference.len() != model.param_count() {
        return Err(CohortError::Validation(format!(
            "reference has {} parameters, model has {}",
            reference.len(),
            model.param_count()
        )));
    }
    if spread.len() != reference.len() {
        return Err(CohortError::Validation("spread and reference lengths differ".into()));
    }
    if let Some(s) = spread.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(CohortError::Validation(format!("spread {s} outside [0, 1)")));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(CohortError::Validation("reference contains non-finite values".into()));
    }
    if n == 0 {
        return Err(CohortError::Validation("cohort size must be at least 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::with_capacity(n);
    members.push(VirtualPatient { id: member_id(0), params: reference.to_vec(), provenance: Provenance::Reference });
    for index in 1..n {
        let params = reference
            .iter()
            .zip(spread)
            .map(|(&r, &s)| {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let (a, b) = (r * (1.0 - s), r * (1.0 + s));
                (r * (1.0 + s * u)).clamp(a.min(b), a.max(b))
            })
            .collect();
        members.push(VirtualPatient {
            id: member_id(index),
            params,
            provenance: Provenance::Perturbed { seed, index: index as u64 },
        });
    }
    Ok(Cohort { model: model.name().to_string(), seed: Some(seed), members })
}

/// Inclusive bounds on one observable over a drug-free simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityBound {
    pub observable: String,
    #[serde(default = "neg_inf")]
    pub min: f64,
    #[serde(default = "pos_inf")]
    pub max: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub id: String,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub cohort: Cohort,
    /// Members dropped because their simulation diverged.
    pub diverged: Vec<Divergence>,
}

/// Keeps the members whose drug-free observables stay within `bounds` at
/// every sample over `[0, horizon]`. Order is preserved.
pub fn filter_plausible(
    cohort: &Cohort,
    model: &ModelDefinition,
    bounds: &[PlausibilityBound],
    horizon: f64,
    cfg: &SimulationConfig,
) -> Result<FilterOutcome, CohortError> {
    let mut resolved = Vec::with_capacity(bounds.len());
    for b in bounds {
        let idx = model
            .observable_index(&b.observable)
            .ok_or_else(|| CohortError::Validation(format!("unknown observable '{}'", b.observable)))?;
        if b.min.is_nan() || b.max.is_nan() || b.min > b.max {
            return Err(CohortError::Validation(format!("bad bounds for '{}'", b.observable)));
        }
        resolved.push((idx, b.min, b.max));
    }
    cohort.validate(model)?;
    let init = model.initial_state();

    enum Fate {
        Keep,
        Drop,
        Diverged(f64),
    }
    let fates: Vec<Fate> = cohort
        .members
        .par_iter()
        .map(|m| match simulate(model, &m.params, &init, &[], horizon, cfg) {
            Ok(tr) => Ok({
                let ok = tr
                    .observables
                    .iter()
                    .all(|row| resolved.iter().all(|&(i, lo, hi)| row[i] >= lo && row[i] <= hi));
                if ok {
                    Fate::Keep
                } else {
                    Fate::Drop
                }
            }),
            Err(SimError::Diverged { time }) => Ok(Fate::Diverged(time)),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;

    let mut kept = Vec::new();
    let mut diverged = Vec::new();
    for (m, fate) in cohort.members.iter().zip(fates) {
        match fate {
            Fate::Keep => kept.push(m.clone()),
            Fate::Drop => {}
            Fate::Diverged(time) => {
                log::warn!("virtual patient {} diverged at t = {time}; excluded", m.id);
                diverged.push(Divergence { id: m.id.clone(), time });
            }
        }
    }
    Ok(FilterOutcome {
        cohort: Cohort { model: cohort.model.clone(), seed: cohort.seed, members: kept },
        diverged,
    })
}

#[derive(Serialize, Deserialize)]
struct CohortFile {
    format: String,
    #[serde(flatten)]
    cohort: Cohort,
}

pub fn cohort_to_string(cohort: &Cohort) -> String {
    let file = CohortFile { format: COHORT_FORMAT.to_string(), cohort: cohort.clone() };
    toml::to_string(&file).expect("cohort serialises")
}

pub fn cohort_from_str(text: &str, model: &ModelDefinition) -> Result<Cohort, CohortError> {
    let file: CohortFile = toml::from_str(text).map_err(|e| CohortError::Schema(e.to_string()))?;
    if file.format != COHORT_FORMAT {
        return Err(CohortError::Schema(format!("unsupported format '{}'", file.format)));
    }
    file.cohort.validate(model)?;
    Ok(file.cohort)
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<(), CohortError> {
    let path = path.as_ref();
    std::fs::write(path, cohort_to_string(cohort))
        .map_err(|source| CohortError::Io { path: path.display().to_string(), source })
}

pub fn load_cohort(path: impl AsRef<Path>, model: &ModelDefinition) -> Result<Cohort, CohortError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| CohortError::Io { path: path.display().to_string(), source })?;
    cohort_from_str(&text, model)
}

/// Per-parameter relative half-widths: a default plus named overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpreadSpec {
    #[serde(default)]
    pub default: f64,
    #[serde(default)]
    pub params: std::collections::BTreeMap<String, f64>,
}

impl SpreadSpec {
    pub fn uniform(default: f64) -> Self {
        SpreadSpec { default, params: Default::default() }
    }

    pub fn resolve(&self, model: &ModelDefinition) -> Result<Vec<f64>, CohortError> {
        for name in self.params.keys() {
            if model.param_index(name).is_none() {
                return Err(CohortError::Validation(format!("spread given for unknown parameter '{name}'")));
            }
        }
        Ok(model.params().iter().map(|p| self.params.get(&p.name).copied().unwrap_or(self.default)).collect())
    }
}
