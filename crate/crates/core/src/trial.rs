//! Multi-arm in-silico trials.
//!
//! Records are ingested and screened, each admitted patient is matched to
//! digital twins, and every arm is run on those twins. Fixed arms replay a
//! plan; personalised arms optimise one. Both are adjudicated on the same
//! evaluation twins, so their costs are directly comparable.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{cohort_to_string, generate_cohort, load_cohort, Cohort, SpreadSpec};
use crate::model::ModelDefinition;
use crate::monitor::{load_properties, properties_to_string, Downregulation, Property, PropertySet};
use crate::records::{apply_exclusion, ingest, write_records, ClinicalRecord, ExclusionCriteria, ExclusionReason};
use crate::search::{
    evaluate_plan, optimise, Cost, DecisionOrder, DoseMenu, Robustness, SearchConfig, TreatmentPlan,
};
use crate::sim::{SimulationConfig, Trajectory};
use crate::twin::{compute_twins, MatchConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failure of a trial stage; the stage is named in the message.
#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct TrialError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> TrialError {
    move |e| TrialError { stage, message: e.to_string() }
}

fn invalid(stage: &'static str, message: impl Into<String>) -> TrialError {
    TrialError { stage, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationRule {
    /// Adjudicate on the rank-1 accepted twin.
    #[default]
    TopAccepted,
    /// Adjudicate on every accepted twin; all must succeed.
    AllAccepted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Fixed(TreatmentPlan),
    Personalised(SearchConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialArm {
    pub name: String,
    pub strategy: Strategy,
}

/// A fully loaded trial.
#[derive(Debug, Clone)]
pub struct Trial {
    pub model: ModelDefinition,
    pub cohort: Cohort,
    pub records: Vec<ClinicalRecord>,
    pub exclusion: ExclusionCriteria,
    pub matching: MatchConfig,
    pub properties: Vec<Property>,
    pub menu: DoseMenu,
    pub horizon: u32,
    /// Simulation settings for treatment runs.
    pub sim: SimulationConfig,
    pub arms: Vec<TrialArm>,
    pub evaluation: EvaluationRule,
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    /// Keep the rank-1 twin's trajectory for every patient and arm.
    pub trajectories: bool,
}

impl Trial {
    pub fn validate(&self) -> Result<PropertySet, TrialError> {
        if self.arms.len() < 2 {
            return Err(invalid("config", "a trial needs at least two arms"));
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            if !names.insert(arm.name.as_str()) {
                return Err(invalid("config", format!("duplicate arm name '{}'", arm.name)));
            }
        }
        if !self.arms.iter().any(|a| matches!(a.strategy, Strategy::Fixed(_))) {
            return Err(invalid("config", "at least one fixed comparator arm is required"));
        }
        if self.horizon == 0 {
            return Err(invalid("config", "horizon must be at least one day"));
        }
        self.sim.validate().map_err(stage("config"))?;
        self.cohort.validate(&self.model).map_err(stage("cohort"))?;
        self.exclusion.validate().map_err(stage("exclusion"))?;
        self.matching.validate().map_err(stage("matching"))?;
        let set = PropertySet::new(&self.model, self.properties.clone()).map_err(stage("properties"))?;
        set.validate_horizon(self.horizon as f64).map_err(stage("properties"))?;
        if self.menu.drug_count() != self.model.drugs().len() {
            return Err(invalid("menu", "menu does not match the model's drugs"));
        }
        for arm in &self.arms {
            match &arm.strategy {
                Strategy::Fixed(plan) => {
                    if plan.horizon() != self.horizon {
                        return Err(invalid(
                            "arms",
                            format!("arm '{}' plan has {} days, trial horizon is {}", arm.name, plan.horizon(), self.horizon),
                        ));
                    }
                    plan.validate(&self.menu).map_err(|e| invalid("arms", format!("arm '{}': {e}", arm.name)))?;
                }
                Strategy::Personalised(cfg) => {
                    if cfg.horizon != self.horizon || cfg.sim != self.sim {
                        return Err(invalid("arms", format!("arm '{}' must use the trial horizon and simulation", arm.name)));
                    }
                    cfg.validate(&set).map_err(|e| invalid("arms", format!("arm '{}': {e}", arm.name)))?;
                }
            }
        }
        Ok(set)
    }

    /// SHA-256 over every input that can change the report.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |label: &str, text: &str| {
            h.update(label.as_bytes());
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
        };
        put("model", &toml::to_string(&self.model.to_model_file()).unwrap_or_default());
        put("cohort", &cohort_to_string(&self.cohort));
        let mut recs = Vec::new();
        let _ = write_records(&self.records, &mut recs);
        put("records", &String::from_utf8_lossy(&recs));
        put("exclusion", &toml::to_string(&self.exclusion).unwrap_or_default());
        put("matching", &toml::to_string(&self.matching).unwrap_or_default());
        put("properties", &properties_to_string(&self.properties));
        let menu: Vec<String> = (0..self.menu.drug_count()).map(|d| format!("{:?}", self.menu.amounts(d))).collect();
        put("menu", &menu.join(";"));
        put("sim", &toml::to_string(&self.sim).unwrap_or_default());
        for arm in &self.arms {
            let body = match &arm.strategy {
                Strategy::Fixed(p) => format!("fixed {:?}", p.decisions),
                Strategy::Personalised(c) => format!("personalised {}", toml::to_string(c).unwrap_or_default()),
            };
            put(&format!("arm {}", arm.name), &body);
        }
        put("run", &format!("{} {:?} {} {}", self.horizon, self.evaluation, self.seed, self.trajectories));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub patient_id: String,
    pub arm: String,
    /// Fixed arms: `feasible`, `infeasible` or `diverged`; personalised
    /// arms: the search status.
    pub status: String,
    pub success: bool,
    /// Present on success.
    pub cost: Option<Cost>,
    pub nodes_expanded: u64,
    /// Accepted twins for the patient.
    pub twin_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub arm: String,
    /// Evaluated (admitted) patients.
    pub n: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful patients only; absent when there are none.
    pub mean_goal_time: Option<f64>,
    pub median_goal_time: Option<f64>,
    pub mean_total_drug: Option<f64>,
    pub median_total_drug: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialProvenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    /// Ordered by patient id, then arm order.
    pub rows: Vec<TrialRow>,
    /// Ordered by patient id.
    pub excluded: Vec<(String, ExclusionReason)>,
    pub aggregates: Vec<ArmAggregate>,
    pub provenance: TrialProvenance,
    pub ingested: usize,
    /// `(patient, arm, trajectory)` when requested.
    pub trajectories: Vec<(String, String, Trajectory)>,
}

struct PatientResult {
    rows: Vec<TrialRow>,
    excluded: Option<ExclusionReason>,
    trajectories: Vec<(String, String, Trajectory)>,
}

/// Runs every arm for every admitted patient.
pub fn run_trial(trial: &Trial) -> Result<TrialReport, TrialError> {
    let set = trial.validate()?;
    let screened = apply_exclusion(&trial.records, &trial.exclusion);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(trial.workers).build().map_err(stage("workers"))?;
    let results: Vec<PatientResult> =
        pool.install(|| screened.kept.par_iter().map(|r| run_patient(trial, &set, r)).collect::<Result<_, _>>())?;

    let mut excluded: Vec<(String, ExclusionReason)> =
        screened.excluded.iter().map(|(r, why)| (r.patient_id.clone(), *why)).collect();
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for (record, res) in screened.kept.iter().zip(results) {
        match res.excluded {
            Some(why) => excluded.push((record.patient_id.clone(), why)),
            None => rows.extend(res.rows),
        }
        trajectories.extend(res.trajectories);
    }
    let arm_pos = |name: &str| trial.arms.iter().position(|a| a.name == name);
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(arm_pos(&a.arm).cmp(&arm_pos(&b.arm))));
    excluded.sort();
    trajectories.sort_by(|a, b| (&a.0, arm_pos(&a.1)).cmp(&(&b.0, arm_pos(&b.1))));

    let aggregates = if rows.is_empty() {
        trial.arms.iter().map(|a| empty_aggregate(&a.name)).collect()
    } else {
        summarise_arms(&rows, trial.arms.iter().map(|a| a.name.as_str()))
    };
    Ok(TrialReport {
        rows,
        excluded,
        aggregates,
        provenance: TrialProvenance {
            config_hash: trial.config_hash(),
            seed: trial.seed,
            version: VERSION.to_string(),
            model: trial.model.name().to_string(),
        },
        ingested: trial.records.len(),
        trajectories,
    })
}

fn run_patient(trial: &Trial, set: &PropertySet, record: &ClinicalRecord) -> Result<PatientResult, TrialError> {
    let twins = compute_twins(&trial.cohort, record, &trial.model, &trial.matching).map_err(stage("twins"))?;
    if !twins.has_twin() {
        return Ok(PatientResult { rows: Vec::new(), excluded: Some(ExclusionReason::NoDigitalTwin), trajectories: Vec::new() });
    }
    let params_of = |id: &str| trial.cohort.get(id).map(|vp| vp.params.clone()).expect("twin comes from the cohort");
    let accepted: Vec<Vec<f64>> = twins.accepted.iter().map(|t| params_of(&t.vp_id)).collect();
    let evaluation: &[Vec<f64>] = match trial.evaluation {
        EvaluationRule::TopAccepted => &accepted[..1],
        EvaluationRule::AllAccepted => &accepted,
    };

    let mut rows = Vec::with_capacity(trial.arms.len());
    let mut trajectories = Vec::new();
    for arm in &trial.arms {
        let (status, plan, nodes) = match &arm.strategy {
            Strategy::Fixed(plan) => (None, Some(plan.clone()), 0),
            Strategy::Personalised(cfg) => {
                let r = optimise(&trial.model, &accepted, set, &trial.menu, cfg)
                    .map_err(|e| invalid("search", format!("patient '{}', arm '{}': {e}", record.patient_id, arm.name)))?;
                (Some(r.status), r.plan, r.stats.nodes_expanded)
            }
        };
        let adjudicated = match &plan {
            Some(p) => Some(adjudicate(trial, set, evaluation, p)?),
            None => None,
        };
        let status = match (status, &adjudicated) {
            (Some(s), _) => s.as_str().to_string(),
            (None, Some(a)) => a.label.to_string(),
            (None, None) => unreachable!("fixed arms always carry a plan"),
        };
        let cost = adjudicated.as_ref().and_then(|a| a.cost);
        if trial.trajectories {
            if let Some(tr) = adjudicated.and_then(|a| a.trajectory) {
                trajectories.push((record.patient_id.clone(), arm.name.clone(), tr));
            }
        }
        rows.push(TrialRow {
            patient_id: record.patient_id.clone(),
            arm: arm.name.clone(),
            status,
            success: cost.is_some(),
            cost,
            nodes_expanded: nodes,
            twin_count: accepted.len(),
        });
    }
    Ok(PatientResult { rows, excluded: None, trajectories })
}

struct Adjudication {
    label: &'static str,
    cost: Option<Cost>,
    trajectory: Option<Trajectory>,
}

/// Runs `plan` on every evaluation twin; success needs all of them.
fn adjudicate(trial: &Trial, set: &PropertySet, twins: &[Vec<f64>], plan: &TreatmentPlan) -> Result<Adjudication, TrialError> {
    let mut label = "feasible";
    let mut worst: f64 = 0.0;
    let mut first = None;
    for (i, params) in twins.iter().enumerate() {
        let out = evaluate_plan(&trial.model, params, set, plan, &trial.sim).map_err(stage("evaluation"))?;
        if out.trajectory.is_none() {
            label = "diverged";
        } else if !out.feasible && label == "feasible" {
            label = "infeasible";
        }
        worst = worst.max(out.goal_time);
        if i == 0 {
            first = out.trajectory;
        }
    }
    let cost = (label == "feasible")
        .then(|| Cost { goal_time: worst, total_drug: plan.total_drug(), used_days: plan.used_days() });
    Ok(Adjudication { label, cost, trajectory: first })
}

fn empty_aggregate(arm: &str) -> ArmAggregate {
    ArmAggregate {
        arm: arm.to_string(),
        n: 0,
        successes: 0,
        success_rate: 0.0,
        mean_goal_time: None,
        median_goal_time: None,
        mean_total_drug: None,
        median_total_drug: None,
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Lower median: the `(n - 1) / 2`-th smallest value.
fn lower_median(xs: &[f64]) -> Option<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len().saturating_sub(1) / 2).copied()
}

fn summarise_arms<'a>(rows: &[TrialRow], arms: impl Iterator<Item = &'a str>) -> Vec<ArmAggregate> {
    arms.map(|arm| {
        let mine: Vec<&TrialRow> = rows.iter().filter(|r| r.arm == arm).collect();
        let costs: Vec<Cost> = mine.iter().filter_map(|r| r.cost).collect();
        let goal: Vec<f64> = costs.iter().map(|c| c.goal_time).collect();
        let drug: Vec<f64> = costs.iter().map(|c| c.total_drug).collect();
        ArmAggregate {
            arm: arm.to_string(),
            n: mine.len(),
            successes: costs.len(),
            success_rate: if mine.is_empty() { 0.0 } else { costs.len() as f64 / mine.len() as f64 },
            mean_goal_time: mean(&goal),
            median_goal_time: lower_median(&goal),
            mean_total_drug: mean(&drug),
            median_total_drug: lower_median(&drug),
        }
    })
    .collect()
}

/// Per-arm aggregates, arms in order of first appearance.
pub fn summarise(rows: &[TrialRow]) -> Result<Vec<ArmAggregate>, TrialError> {
    if rows.is_empty() {
        return Err(invalid("summary", "no rows to summarise"));
    }
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    Ok(summarise_arms(rows, arms.into_iter()))
}

pub const ROWS_HEADER: [&str; 10] = [
    "patient_id",
    "arm",
    "status",
    "success",
    "goal_time",
    "total_drug",
    "used_days",
    "nodes_expanded",
    "twin_count",
    "excluded_reason",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Rows CSV: one row per admitted patient and arm, then one row per
/// excluded patient with an empty arm and its reason.
pub fn write_rows<W: std::io::Write>(report: &TrialReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROWS_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.patient_id.clone(),
            r.arm.clone(),
            r.status.clone(),
            r.success.to_string(),
            opt(r.cost.map(|c| c.goal_time)),
            opt(r.cost.map(|c| c.total_drug)),
            opt(r.cost.map(|c| c.used_days)),
            r.nodes_expanded.to_string(),
            r.twin_count.to_string(),
            String::new(),
        ])?;
    }
    for (id, why) in &report.excluded {
        let mut rec = vec![id.clone(), String::new(), "excluded".into(), "false".into()];
        rec.extend(std::iter::repeat_n(String::new(), 5));
        rec.push(why.as_str().to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregates<W: std::io::Write>(aggregates: &[ArmAggregate], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "arm",
        "n",
        "successes",
        "success_rate",
        "mean_goal_time",
        "median_goal_time",
        "mean_total_drug",
        "median_total_drug",
    ])?;
    for a in aggregates {
        w.write_record([
            a.arm.clone(),
            a.n.to_string(),
            a.successes.to_string(),
            a.success_rate.to_string(),
            opt(a.mean_goal_time),
            opt(a.median_goal_time),
            opt(a.mean_total_drug),
            opt(a.median_total_drug),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    provenance: &'a TrialProvenance,
    counts: Counts,
    exclusions: BTreeMap<&'static str, usize>,
    #[serde(rename = "arm")]
    arms: &'a [ArmAggregate],
}

#[derive(Serialize)]
struct Counts {
    ingested: usize,
    admitted: usize,
    excluded: usize,
}

pub fn summary_toml(report: &TrialReport) -> String {
    let mut exclusions = BTreeMap::new();
    for (_, why) in &report.excluded {
        *exclusions.entry(why.as_str()).or_insert(0) += 1;
    }
    let summary = Summary {
        provenance: &report.provenance,
        counts: Counts {
            ingested: report.ingested,
            admitted: report.ingested - report.excluded.len(),
            excluded: report.excluded.len(),
        },
        exclusions,
        arms: &report.aggregates,
    };
    toml::to_string(&summary).expect("summary serialises")
}

/// Writes `rows.csv`, `aggregates.csv`, `summary.toml` and, when present,
/// `trajectories/<patient>__<arm>.csv` under `dir`.
pub fn write_report(report: &TrialReport, model: &ModelDefinition, dir: &Path) -> Result<Vec<PathBuf>, TrialError> {
    let io = stage::<std::io::Error>("output");
    let csv_err = stage::<csv::Error>("output");
    std::fs::create_dir_all(dir).map_err(&io)?;
    let mut written = Vec::new();
    let rows = dir.join("rows.csv");
    write_rows(report, std::fs::File::create(&rows).map_err(&io)?).map_err(&csv_err)?;
    written.push(rows);
    let agg = dir.join("aggregates.csv");
    write_aggregates(&report.aggregates, std::fs::File::create(&agg).map_err(&io)?).map_err(&csv_err)?;
    written.push(agg);
    let summary = dir.join("summary.toml");
    std::fs::write(&summary, summary_toml(report)).map_err(&io)?;
    written.push(summary);
    if !report.trajectories.is_empty() {
        let tdir = dir.join("trajectories");
        std::fs::create_dir_all(&tdir).map_err(&io)?;
        for (patient, arm, tr) in &report.trajectories {
            let path = tdir.join(format!("{}__{}.csv", sanitise(patient), sanitise(arm)));
            let mut buf = Vec::new();
            tr.write_csv(model, &mut buf).map_err(&io)?;
            std::fs::write(&path, buf).map_err(&io)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn sanitise(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Where the virtual cohort comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CohortSource {
    /// Path to a cohort file.
    File(String),
    /// Generated around the model defaults with the trial seed.
    Generate { size: usize, spread: SpreadSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArmStrategyConfig {
    /// `daily` repeats the same amounts every day; `plan` names a plan CSV.
    Fixed {
        #[serde(default)]
        daily: Option<Vec<f64>>,
        #[serde(default)]
        plan: Option<String>,
    },
    Personalised {
        #[serde(default)]
        robustness: Robustness,
        #[serde(default = "default_budget")]
        budget: u64,
        #[serde(default)]
        order: DecisionOrder,
        #[serde(default = "default_true")]
        backjumping: bool,
    },
}

fn default_budget() -> u64 {
    SearchConfig::default().budget
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub name: String,
    #[serde(flatten)]
    pub strategy: ArmStrategyConfig,
}

fn default_model() -> String {
    "surrogate".into()
}

fn default_horizon() -> u32 {
    5
}

/// On-disk trial description. Paths are relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_model")]
    pub model: String,
    pub cohort: CohortSource,
    pub records: String,
    /// Property file; the default downregulation set when absent.
    #[serde(default)]
    pub properties: Option<String>,
    #[serde(default)]
    pub downregulation: Downregulation,
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    pub menu: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub sim: SimulationConfig,
    #[serde(default)]
    pub exclusion: ExclusionCriteria,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub evaluation: EvaluationRule,
    #[serde(default)]
    pub trajectories: bool,
    #[serde(rename = "arm", default)]
    pub arms: Vec<ArmConfig>,
}

impl TrialConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<(TrialConfig, PathBuf), TrialError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        let cfg = toml::from_str(&text).map_err(stage("config"))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Loads every referenced input, resolving paths against `base`.
    pub fn into_trial(self, base: &Path) -> Result<Trial, TrialError> {
        let resolve = |p: &str| base.join(p);
        let model = if self.model == "surrogate" {
            ModelDefinition::surrogate()
        } else {
            ModelDefinition::from_file(resolve(&self.model)).map_err(stage("model"))?
        };
        let cohort = match &self.cohort {
            CohortSource::File(p) => load_cohort(resolve(p), &model).map_err(stage("cohort"))?,
            CohortSource::Generate { size, spread } => {
                let spread = spread.resolve(&model).map_err(stage("cohort"))?;
                generate_cohort(&model, &model.default_params(), &spread, *size, self.seed).map_err(stage("cohort"))?
            }
        };
        let records = ingest(resolve(&self.records), Some(&model)).map_err(stage("records"))?;
        let properties = match &self.properties {
            Some(p) => load_properties(resolve(p)).map_err(stage("properties"))?,
            None => self.downregulation.properties(self.horizon as f64),
        };
        let menu_text = toml::to_string(&self.menu).map_err(stage("menu"))?;
        let menu = DoseMenu::from_toml_str(&model, &menu_text).map_err(stage("menu"))?;
        let mut arms = Vec::with_capacity(self.arms.len());
        for a in &self.arms {
            let strategy = match &a.strategy {
                ArmStrategyConfig::Fixed { daily: Some(d), plan: None } => Strategy::Fixed(TreatmentPlan::constant(self.horizon, d)),
                ArmStrategyConfig::Fixed { daily: None, plan: Some(p) } => {
                    let file = std::fs::File::open(resolve(p)).map_err(|e| invalid("arms", format!("{p}: {e}")))?;
                    let plan = TreatmentPlan::read_csv(&model, std::io::BufReader::new(file)).map_err(stage("arms"))?;
                    Strategy::Fixed(plan)
                }
                ArmStrategyConfig::Fixed { .. } => {
                    return Err(invalid("arms", format!("fixed arm '{}' needs exactly one of daily or plan", a.name)))
                }
                ArmStrategyConfig::Personalised { robustness, budget, order, backjumping } => {
                    Strategy::Personalised(SearchConfig {
                        horizon: self.horizon,
                        robustness: *robustness,
                        budget: *budget,
                        order: *order,
                        backjumping: *backjumping,
                        sim: self.sim.clone(),
                    })
                }
            };
            arms.push(TrialArm { name: a.name.clone(), strategy });
        }
        let trial = Trial {
            model,
            cohort,
            records,
            exclusion: self.exclusion,
            matching: self.matching,
            properties,
            menu,
            horizon: self.horizon,
            sim: self.sim,
            arms,
            evaluation: self.evaluation,
            seed: self.seed,
            workers: self.workers,
            trajectories: self.trajectories,
        };
        trial.validate()?;
        Ok(trial)
    }
}
