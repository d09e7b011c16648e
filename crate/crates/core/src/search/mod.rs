//! Optimal discrete treatment plans.
//!
//! A plan doses each drug once per day from a finite menu. Plans are ranked
//! by [`Cost`]: earliest goal completion, then least total drug, then fewest
//! days used. [`optimise`] finds the cost-minimal feasible plan by depth-first
//! search with incremental simulation, monitor-driven pruning, backjumping and
//! branch-and-bound; [`exhaustive_oracle`] is the brute-force reference.

mod backjump;
mod engine;
mod oracle;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelDefinition;
use crate::monitor::{check, MonitorError, PropertySet, Status, Verdict};
use crate::sim::{simulate, DoseEvent, SimError, SimulationConfig, Trajectory};

pub use backjump::{backjump_target, TrailEntry};
pub use engine::optimise;
pub use oracle::{exhaustive_oracle, ORACLE_LIMIT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("invalid dose menu: {0}")]
    Menu(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("plan space has {size} leaves, above the oracle limit of {limit}")]
    TooLarge { size: f64, limit: f64 },
}

/// Allowed daily amounts per drug, in model drug order.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseMenu {
    amounts: Vec<Vec<f64>>,
}

impl DoseMenu {
    /// Each list must contain 0 and be strictly ascending.
    pub fn new(model: &ModelDefinition, amounts: Vec<Vec<f64>>) -> Result<Self, SearchError> {
        if amounts.len() != model.drugs().len() {
            return Err(SearchError::Menu(format!(
                "expected {} drug lists, got {}",
                model.drugs().len(),
                amounts.len()
            )));
        }
        for (drug, list) in model.drugs().iter().zip(&amounts) {
            if list.is_empty() || !list.contains(&0.0) {
                return Err(SearchError::Menu(format!("'{}' must allow amount 0", drug.name)));
            }
            if list.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(SearchError::Menu(format!("'{}' has a negative or non-finite amount", drug.name)));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SearchError::Menu(format!("'{}' amounts must be strictly ascending", drug.name)));
            }
        }
        Ok(DoseMenu { amounts })
    }

    /// The same list for every drug of the model.
    pub fn uniform(model: &ModelDefinition, amounts: &[f64]) -> Result<Self, SearchError> {
        Self::new(model, vec![amounts.to_vec(); model.drugs().len()])
    }

    pub fn amounts(&self, drug: usize) -> &[f64] {
        &self.amounts[drug]
    }

    pub fn drug_count(&self) -> usize {
        self.amounts.len()
    }

    pub fn contains(&self, drug: usize, amount: f64) -> bool {
        self.amounts[drug].contains(&amount)
    }

    /// Number of distinct per-day decisions.
    pub fn choices_per_day(&self) -> usize {
        self.amounts.iter().map(Vec::len).product()
    }

    /// Per-day decisions in exploration order: first drug most significant,
    /// each drug's amounts in `order`.
    pub fn day_choices(&self, order: DecisionOrder) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for list in &self.amounts {
            let mut ordered = list.clone();
            if order == DecisionOrder::Descending {
                ordered.reverse();
            }
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    ordered.iter().map(move |a| {
                        let mut p = prefix.clone();
                        p.push(*a);
                        p
                    })
                })
                .collect();
        }
        out
    }

    /// TOML table mapping each drug name to its amount list.
    pub fn from_toml_str(model: &ModelDefinition, text: &str) -> Result<Self, SearchError> {
        let table: BTreeMap<String, Vec<f64>> =
            toml::from_str(text).map_err(|e| SearchError::Menu(e.to_string()))?;
        if let Some(unknown) = table.keys().find(|k| model.drug_index(k).is_none()) {
            return Err(SearchError::Menu(format!("unknown drug '{unknown}'")));
        }
        let amounts = model
            .drugs()
            .iter()
            .map(|d| table.get(&d.name).cloned().ok_or_else(|| SearchError::Menu(format!("no amounts for '{}'", d.name))))
            .collect::<Result<_, _>>()?;
        Self::new(model, amounts)
    }

    pub fn load(model: &ModelDefinition, path: impl AsRef<Path>) -> Result<Self, SearchError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SearchError::Menu(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(model, &text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionOrder {
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Robustness {
    /// Optimise on the first twin only.
    #[default]
    BestTwin,
    /// Every twin must satisfy every property; goal time is the worst twin's.
    AllAccepted,
}

/// Per-day decisions for a fixed number of days.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPlan {
    /// `decisions[day][drug]`
    pub decisions: Vec<Vec<f64>>,
}

impl TreatmentPlan {
    pub fn zeros(horizon: u32, drugs: usize) -> Self {
        TreatmentPlan { decisions: vec![vec![0.0; drugs]; horizon as usize] }
    }

    /// The same daily amounts every day.
    pub fn constant(horizon: u32, daily: &[f64]) -> Self {
        TreatmentPlan { decisions: vec![daily.to_vec(); horizon as usize] }
    }

    pub fn horizon(&self) -> u32 {
        self.decisions.len() as u32
    }

    pub fn validate(&self, menu: &DoseMenu) -> Result<(), SearchError> {
        for (day, d) in self.decisions.iter().enumerate() {
            if d.len() != menu.drug_count() {
                return Err(SearchError::Plan(format!("day {day} has {} amounts, expected {}", d.len(), menu.drug_count())));
            }
            if let Some(i) = (0..d.len()).find(|&i| !menu.contains(i, d[i])) {
                return Err(SearchError::Plan(format!("day {day}: amount {} not in menu", d[i])));
            }
        }
        Ok(())
    }

    /// Dose events at the start of each day; zero amounts are omitted.
    pub fn doses(&self, model: &ModelDefinition) -> Vec<DoseEvent> {
        let mut out = Vec::new();
        for (day, d) in self.decisions.iter().enumerate() {
            for (drug, amount) in model.drugs().iter().zip(d) {
                if *amount != 0.0 {
                    out.push(DoseEvent::new(day as f64, drug.name.clone(), *amount));
                }
            }
        }
        out
    }

    /// Sum of every amount, in day then drug order.
    pub fn total_drug(&self) -> f64 {
        self.decisions.iter().flatten().fold(0.0, |acc, a| acc + a)
    }

    /// Index of the last day with any non-zero amount, plus one.
    pub fn used_days(&self) -> u32 {
        self.decisions.iter().rposition(|d| d.iter().any(|a| *a != 0.0)).map_or(0, |i| i as u32 + 1)
    }

    pub fn write_csv<W: Write>(&self, model: &ModelDefinition, mut out: W) -> std::io::Result<()> {
        writeln!(out, "day,drug,amount")?;
        for (day, d) in self.decisions.iter().enumerate() {
            for (drug, amount) in model.drugs().iter().zip(d) {
                writeln!(out, "{day},{},{amount}", drug.name)?;
            }
        }
        Ok(())
    }

    /// Reads `day,drug,amount` rows; every (day, drug) pair up to the
    /// largest day must appear exactly once.
    pub fn read_csv<R: BufRead>(model: &ModelDefinition, input: R) -> Result<Self, SearchError> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers().map_err(|e| SearchError::Plan(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["day", "drug", "amount"] {
            return Err(SearchError::Plan("header must be day,drug,amount".into()));
        }
        let mut cells: BTreeMap<(u32, usize), f64> = BTreeMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| SearchError::Plan(e.to_string()))?;
            let at = |m: String| SearchError::Plan(format!("row {}: {m}", line + 2));
            let day: u32 = rec[0].trim().parse().map_err(|_| at(format!("bad day '{}'", &rec[0])))?;
            let drug = model.drug_index(rec[1].trim()).ok_or_else(|| at(format!("unknown drug '{}'", &rec[1])))?;
            let amount: f64 = rec[2].trim().parse().map_err(|_| at(format!("bad amount '{}'", &rec[2])))?;
            if cells.insert((day, drug), amount).is_some() {
                return Err(at("duplicate day/drug".into()));
            }
        }
        let horizon = cells.keys().map(|(d, _)| d + 1).max().unwrap_or(0);
        let drugs = model.drugs().len();
        let mut decisions = vec![vec![0.0; drugs]; horizon as usize];
        for (day, row) in decisions.iter_mut().enumerate() {
            let day = day as u32;
            for (drug, slot) in row.iter_mut().enumerate() {
                *slot = *cells
                    .get(&(day, drug))
                    .ok_or_else(|| SearchError::Plan(format!("missing day {day} for '{}'", model.drugs()[drug].name)))?;
            }
        }
        Ok(TreatmentPlan { decisions })
    }
}

/// Lexicographic plan cost. Infeasible plans cost [`Cost::TOP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    /// Latest goal completion (witness + sustain) in days; 0 without goals.
    pub goal_time: f64,
    pub total_drug: f64,
    pub used_days: u32,
}

impl Cost {
    pub const TOP: Cost = Cost { goal_time: f64::INFINITY, total_drug: f64::INFINITY, used_days: u32::MAX };

    pub fn is_top(&self) -> bool {
        *self == Cost::TOP
    }
}

impl Eq for Cost {}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.goal_time
            .total_cmp(&other.goal_time)
            .then(self.total_drug.total_cmp(&other.total_drug))
            .then(self.used_days.cmp(&other.used_days))
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Cost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_top() {
            write!(f, "infeasible")
        } else {
            write!(f, "({}, {}, {})", self.goal_time, self.total_drug, self.used_days)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Days to plan.
    pub horizon: u32,
    pub robustness: Robustness,
    /// Maximum number of day decisions simulated.
    pub budget: u64,
    pub order: DecisionOrder,
    /// Backjump on drug-independent failures; off gives plain chronological
    /// backtracking.
    pub backjumping: bool,
    pub sim: SimulationConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            horizon: 5,
            robustness: Robustness::BestTwin,
            budget: 1_000_000,
            order: DecisionOrder::Descending,
            backjumping: true,
            sim: SimulationConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, properties: &PropertySet) -> Result<(), SearchError> {
        if self.horizon == 0 {
            return Err(SearchError::Config("horizon must be at least one day".into()));
        }
        if self.budget == 0 {
            return Err(SearchError::Config("budget must be at least 1".into()));
        }
        self.sim.validate()?;
        let per_day = 1.0 / self.sim.output_grid;
        if (per_day - per_day.round()).abs() > 1e-9 * per_day.max(1.0) {
            return Err(SearchError::Config("output grid must divide one day".into()));
        }
        properties.validate_horizon(self.horizon as f64)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStatus {
    Optimal,
    FeasibleBudgetExhausted,
    Infeasible,
    InfeasibleBudgetExhausted,
}

impl SearchStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchStatus::Optimal => "optimal",
            SearchStatus::FeasibleBudgetExhausted => "feasible-budget-exhausted",
            SearchStatus::Infeasible => "infeasible",
            SearchStatus::InfeasibleBudgetExhausted => "infeasible-budget-exhausted",
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, SearchStatus::Optimal | SearchStatus::FeasibleBudgetExhausted)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Day decisions simulated inside the tree (oracle: leaves evaluated).
    pub nodes_expanded: u64,
    /// Simulated days, including zero-dose completions.
    pub days_simulated: u64,
    /// Jumps that skipped decisions chronological backtracking would retry.
    pub backjumps: u64,
    /// Subtrees cut by a violation or by the cost bound.
    pub prunes: u64,
    /// Branches abandoned because the simulation diverged.
    pub diverged: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub status: SearchStatus,
    pub plan: Option<TreatmentPlan>,
    pub cost: Cost,
    pub stats: SearchStats,
}

/// The twin parameter sets a search or evaluation runs on.
pub(crate) fn select_twins(twins: &[Vec<f64>], robustness: Robustness) -> Result<&[Vec<f64>], SearchError> {
    if twins.is_empty() {
        return Err(SearchError::Config("at least one twin is required".into()));
    }
    Ok(match robustness {
        Robustness::BestTwin => &twins[..1],
        Robustness::AllAccepted => twins,
    })
}

/// Outcome of one plan on one twin.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub verdicts: Vec<Verdict>,
    /// `None` when the simulation diverged.
    pub trajectory: Option<Trajectory>,
    pub feasible: bool,
    pub goal_time: f64,
}

/// Simulates `plan` over its horizon and checks every property.
pub fn evaluate_plan(
    model: &ModelDefinition,
    params: &[f64],
    properties: &PropertySet,
    plan: &TreatmentPlan,
    sim: &SimulationConfig,
) -> Result<PlanOutcome, SearchError> {
    let horizon = plan.horizon() as f64;
    properties.validate_horizon(horizon)?;
    let traj = match simulate(model, params, &model.initial_state(), &plan.doses(model), horizon, sim) {
        Ok(t) => t,
        Err(SimError::Diverged { .. }) => {
            return Ok(PlanOutcome { verdicts: Vec::new(), trajectory: None, feasible: false, goal_time: f64::INFINITY })
        }
        Err(e) => return Err(e.into()),
    };
    let verdicts = check(&traj, properties)?;
    let feasible = verdicts.iter().all(|v| v.status == Status::Satisfied);
    let goal_time = goal_time(properties, &verdicts);
    Ok(PlanOutcome { verdicts, trajectory: Some(traj), feasible, goal_time })
}

/// Latest `witness + sustain` over satisfied goals (0 when there are none).
pub(crate) fn goal_time(properties: &PropertySet, verdicts: &[Verdict]) -> f64 {
    properties
        .properties()
        .iter()
        .zip(verdicts)
        .filter_map(|(p, v)| match p.kind {
            crate::monitor::PropertyKind::Goal { sustain, .. } => Some(v.witness.map_or(f64::INFINITY, |w| w + sustain)),
            _ => None,
        })
        .fold(0.0, f64::max)
}

/// Cost of `plan` across the twins selected by `robustness`.
pub fn plan_cost(
    model: &ModelDefinition,
    twins: &[Vec<f64>],
    properties: &PropertySet,
    plan: &TreatmentPlan,
    robustness: Robustness,
    sim: &SimulationConfig,
) -> Result<Cost, SearchError> {
    let mut worst: f64 = 0.0;
    for params in select_twins(twins, robustness)? {
        let out = evaluate_plan(model, params, properties, plan, sim)?;
        if !out.feasible {
            return Ok(Cost::TOP);
        }
        worst = worst.max(out.goal_time);
    }
    Ok(Cost { goal_time: worst, total_drug: plan.total_drug(), used_days: plan.used_days() })
}

pub(crate) fn check_twins(model: &ModelDefinition, twins: &[Vec<f64>]) -> Result<(), SearchError> {
    for t in twins {
        if t.len() != model.param_count() || t.iter().any(|v| !v.is_finite()) {
            return Err(SearchError::Config("twin parameters do not fit the model".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_order_is_lexicographic_with_top() {
        let a = Cost { goal_time: 3.0, total_drug: 9.0, used_days: 5 };
        let b = Cost { goal_time: 4.0, total_drug: 0.0, used_days: 0 };
        let c = Cost { goal_time: 3.0, total_drug: 9.0, used_days: 4 };
        assert!(a < b && c < a);
        assert!(b < Cost::TOP);
        assert_eq!(Cost::TOP.to_string(), "infeasible");
    }

    #[test]
    fn menu_validation_and_choices() {
        let m = ModelDefinition::surrogate();
        assert!(DoseMenu::uniform(&m, &[1.0, 2.0]).is_err());
        assert!(DoseMenu::uniform(&m, &[0.0, 2.0, 1.0]).is_err());
        assert!(DoseMenu::uniform(&m, &[0.0, 0.0]).is_err());
        let menu = DoseMenu::uniform(&m, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(menu.day_choices(DecisionOrder::Descending), vec![vec![2.0], vec![1.0], vec![0.0]]);
        assert_eq!(menu.day_choices(DecisionOrder::Ascending), vec![vec![0.0], vec![1.0], vec![2.0]]);
        let parsed = DoseMenu::from_toml_str(&m, "agonist = [0, 1.0, 2]").unwrap();
        assert_eq!(parsed, menu);
        assert!(DoseMenu::from_toml_str(&m, "other = [0]").is_err());
    }

    #[test]
    fn plan_csv_round_trip_and_metrics() {
        let m = ModelDefinition::surrogate();
        let plan = TreatmentPlan { decisions: vec![vec![2.0], vec![0.0], vec![1.0], vec![0.0]] };
        assert_eq!(plan.total_drug(), 3.0);
        assert_eq!(plan.used_days(), 3);
        assert_eq!(TreatmentPlan::zeros(4, 1).used_days(), 0);
        let mut buf = Vec::new();
        plan.write_csv(&m, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("day,drug,amount\n0,agonist,2\n"));
        assert_eq!(TreatmentPlan::read_csv(&m, &buf[..]).unwrap(), plan);
        assert!(TreatmentPlan::read_csv(&m, "day,drug,amount\n1,agonist,2\n".as_bytes()).is_err());
        let menu = DoseMenu::uniform(&m, &[0.0, 2.0]).unwrap();
        assert!(plan.validate(&menu).is_err());
    }
}
