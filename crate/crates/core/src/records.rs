//! Clinical records: ingestion, exclusion criteria and synthetic records.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::VirtualPatient;
use crate::model::ModelDefinition;
use crate::sim::{simulate, DoseEvent, SimError, SimulationConfig};

pub const RECORD_HEADER: [&str; 5] = ["patient_id", "time_days", "observable", "value", "unit"];

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: unit '{found}' for '{observable}' does not match the model unit '{expected}'")]
    UnitMismatch { line: u64, observable: String, found: String, expected: String },
    #[error("invalid record input: {0}")]
    Validation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time: f64,
    pub observable: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    /// Sorted by time; ties keep file order.
    pub measurements: Vec<Measurement>,
    pub metadata: BTreeMap<String, String>,
}

impl ClinicalRecord {
    pub fn span(&self) -> f64 {
        match (self.measurements.first(), self.measurements.last()) {
            (Some(a), Some(b)) => b.time - a.time,
            _ => 0.0,
        }
    }

    pub fn count(&self, observable: &str) -> usize {
        self.measurements.iter().filter(|m| m.observable == observable).count()
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> RecordError {
    RecordError::Parse { line, message: message.into() }
}

/// Reads records from CSV. With a model bound, unknown observables and unit
/// mismatches are rejected.
pub fn ingest_reader<R: Read>(reader: R, model: Option<&ModelDefinition>) -> Result<Vec<ClinicalRecord>, RecordError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_error(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(parse_error(1, format!("expected header {}", RECORD_HEADER.join(","))));
    }
    let mut by_patient: BTreeMap<String, Vec<Measurement>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let patient = field(0);
        if patient.is_empty() {
            return Err(parse_error(line, "empty patient_id"));
        }
        let time: f64 = field(1).parse().map_err(|_| parse_error(line, format!("time '{}' is not a number", field(1))))?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(parse_error(line, format!("time {time} must be finite and >= 0")));
        }
        let observable = field(2).to_string();
        let value: f64 =
            field(3).parse().map_err(|_| parse_error(line, format!("value '{}' is not a number", field(3))))?;
        if !value.is_finite() {
            return Err(parse_error(line, "value is not finite"));
        }
        let unit = field(4).to_string();
        if let Some(m) = model {
            let idx = m
                .observable_index(&observable)
                .ok_or_else(|| parse_error(line, format!("unknown observable '{observable}'")))?;
            let expected = &m.observables()[idx].unit;
            if *expected != unit {
                return Err(RecordError::UnitMismatch { line, observable, found: unit, expected: expected.clone() });
            }
        }
        by_patient.entry(patient.to_string()).or_default().push(Measurement { time, observable, value, unit });
    }
    Ok(by_patient
        .into_iter()
        .map(|(patient_id, mut measurements)| {
            measurements.sort_by(|a, b| a.time.total_cmp(&b.time));
            ClinicalRecord { patient_id, measurements, metadata: BTreeMap::new() }
        })
        .collect())
}

pub fn ingest(path: impl AsRef<Path>, model: Option<&ModelDefinition>) -> Result<Vec<ClinicalRecord>, RecordError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
    ingest_reader(file, model)
}

/// Writes records in the ingest schema with round-trip float formatting.
pub fn write_records<W: Write>(records: &[ClinicalRecord], out: W) -> Result<(), RecordError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| RecordError::Io { path: "<output>".into(), source: std::io::Error::other(e) };
    w.write_record(RECORD_HEADER).map_err(io)?;
    for r in records {
        for m in &r.measurements {
            w.write_record([
                r.patient_id.as_str(),
                &m.time.to_string(),
                &m.observable,
                &m.value.to_string(),
                &m.unit,
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|source| RecordError::Io { path: "<output>".into(), source })
}

pub fn save_records(path: impl AsRef<Path>, records: &[ClinicalRecord]) -> Result<(), RecordError> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
    write_records(records, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExclusionCriteria {
    pub required_observables: BTreeSet<String>,
    pub min_measurements: BTreeMap<String, usize>,
    /// Minimum days between first and last measurement.
    pub min_span: f64,
}

/// Why a record was excluded; checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    EmptyRecord,
    MissingObservable,
    MinMeasurements,
    MinSpan,
    NoDigitalTwin,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 5] = [
        ExclusionReason::EmptyRecord,
        ExclusionReason::MissingObservable,
        ExclusionReason::MinMeasurements,
        ExclusionReason::MinSpan,
        ExclusionReason::NoDigitalTwin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::EmptyRecord => "empty-record",
            ExclusionReason::MissingObservable => "missing-observable",
            ExclusionReason::MinMeasurements => "min-measurements",
            ExclusionReason::MinSpan => "min-span",
            ExclusionReason::NoDigitalTwin => "no-digital-twin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl ExclusionCriteria {
    pub fn validate(&self) -> Result<(), RecordError> {
        if !(self.min_span.is_finite() && self.min_span >= 0.0) {
            return Err(RecordError::Validation("min_span must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// First violated criterion, if any.
    pub fn violation(&self, record: &ClinicalRecord) -> Option<ExclusionReason> {
        if record.measurements.is_empty() {
            return Some(ExclusionReason::EmptyRecord);
        }
        if self.required_observables.iter().any(|o| record.count(o) == 0) {
            return Some(ExclusionReason::MissingObservable);
        }
        if self.min_measurements.iter().any(|(o, &n)| record.count(o) < n) {
            return Some(ExclusionReason::MinMeasurements);
        }
        if record.span() < self.min_span {
            return Some(ExclusionReason::MinSpan);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionOutcome {
    pub kept: Vec<ClinicalRecord>,
    pub excluded: Vec<(ClinicalRecord, ExclusionReason)>,
}

/// Partitions `records` into kept and excluded, preserving input order.
pub fn apply_exclusion(records: &[ClinicalRecord], criteria: &ExclusionCriteria) -> ExclusionOutcome {
    let mut out = ExclusionOutcome { kept: Vec::new(), excluded: Vec::new() };
    for r in records {
        match criteria.violation(r) {
            None => out.kept.push(r.clone()),
            Some(reason) => out.excluded.push((r.clone(), reason)),
        }
    }
    out
}

/// How to derive a synthetic record from a virtual patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub times: Vec<f64>,
    /// Observables to sample; all model observables when empty.
    pub observables: Vec<String>,
    /// Relative half-width of multiplicative uniform noise.
    pub noise_rel: f64,
    pub seed: u64,
    /// Doses the patient received while being measured.
    pub doses: Vec<DoseEvent>,
    pub sim: SimulationConfig,
}

impl SynthSpec {
    pub fn new(times: Vec<f64>, noise_rel: f64, seed: u64) -> Self {
        SynthSpec { times, observables: Vec::new(), noise_rel, seed, doses: Vec::new(), sim: SimulationConfig::default() }
    }
}

/// Smallest grid-aligned horizon covering `t_max` (at least one grid step).
pub(crate) fn covering_horizon(t_max: f64, cfg: &SimulationConfig) -> f64 {
    let k = ((t_max / cfg.output_grid) - 1e-9).ceil().max(1.0);
    k * cfg.output_grid
}

/// Samples the virtual patient's simulated observables at `spec.times`,
/// each multiplied by `1 + eps` with `eps` uniform in `[-noise, noise]`.
pub fn synthesise_record(
    vp: &VirtualPatient,
    model: &ModelDefinition,
    spec: &SynthSpec,
) -> Result<ClinicalRecord, RecordError> {
    if !(spec.noise_rel.is_finite() && spec.noise_rel >= 0.0) {
        return Err(RecordError::Validation("noise must be finite and >= 0".into()));
    }
    if spec.times.is_empty() {
        return Err(RecordError::Validation("no sample times".into()));
    }
    if spec.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(RecordError::Validation("sample times must be finite and >= 0".into()));
    }
    let observables: Vec<usize> = if spec.observables.is_empty() {
        (0..model.observables().len()).collect()
    } else {
        spec.observables
            .iter()
            .map(|o| model.observable_index(o).ok_or_else(|| RecordError::Validation(format!("unknown observable '{o}'"))))
            .collect::<Result<_, _>>()?
    };
    let t_max = spec.times.iter().copied().fold(0.0, f64::max);
    let horizon = covering_horizon(t_max, &spec.sim);
    let tr = simulate(model, &vp.params, &model.initial_state(), &spec.doses, horizon, &spec.sim)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut measurements = Vec::with_capacity(spec.times.len() * observables.len());
    let mut times = spec.times.clone();
    times.sort_by(f64::total_cmp);
    for &t in &times {
        for &o in &observables {
            let clean = tr.observable_at(o, t).expect("horizon covers every sample time");
            let value = if spec.noise_rel > 0.0 {
                let eps: f64 = rng.gen_range(-spec.noise_rel..=spec.noise_rel);
                clean * (1.0 + eps)
            } else {
                clean
            };
            let decl = &model.observables()[o];
            measurements.push(Measurement { time: t, observable: decl.name.clone(), value, unit: decl.unit.clone() });
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("source_vp".to_string(), vp.id.clone());
    metadata.insert("noise_rel".to_string(), spec.noise_rel.to_string());
    metadata.insert("seed".to_string(), spec.seed.to_string());
    Ok(ClinicalRecord { patient_id: format!("pt-{}", vp.id), measurements, metadata })
}
