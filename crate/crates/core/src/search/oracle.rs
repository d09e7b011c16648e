use crate::model::ModelDefinition;
use crate::monitor::PropertySet;

use super::{
    check_twins, plan_cost, select_twins, Cost, DoseMenu, SearchConfig, SearchError, SearchResult, SearchStats,
    SearchStatus, TreatmentPlan,
};

/// Largest plan space [`exhaustive_oracle`] will enumerate.
pub const ORACLE_LIMIT: f64 = 1e6;

/// Brute-force reference for [`super::optimise`]: simulates every plan over
/// the full horizon and keeps the first cost-minimal one in exploration
/// order. The budget is ignored.
pub fn exhaustive_oracle(
    model: &ModelDefinition,
    twins: &[Vec<f64>],
    properties: &PropertySet,
    menu: &DoseMenu,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate(properties)?;
    check_twins(model, twins)?;
    let used_twins = select_twins(twins, cfg.robustness)?.len() as u64;
    let choices = menu.day_choices(cfg.order);
    let size = (choices.len() as f64).powi(cfg.horizon as i32);
    if size > ORACLE_LIMIT {
        return Err(SearchError::TooLarge { size, limit: ORACLE_LIMIT });
    }
    let leaves = size as u64;
    let h = cfg.horizon as usize;

    let mut best: Option<(Cost, TreatmentPlan)> = None;
    let mut digits = vec![0usize; h];
    let mut stats = SearchStats::default();
    for _ in 0..leaves {
        let plan = TreatmentPlan { decisions: digits.iter().map(|&c| choices[c].clone()).collect() };
        let cost = plan_cost(model, twins, properties, &plan, cfg.robustness, &cfg.sim)?;
        stats.nodes_expanded += 1;
        stats.days_simulated += cfg.horizon as u64 * used_twins;
        if !cost.is_top() && best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, plan));
        }
        // Odometer increment, last day least significant.
        for d in (0..h).rev() {
            digits[d] += 1;
            if digits[d] < choices.len() {
                break;
            }
            digits[d] = 0;
        }
    }

    Ok(match best {
        Some((cost, plan)) => SearchResult { status: SearchStatus::Optimal, plan: Some(plan), cost, stats },
        None => SearchResult { status: SearchStatus::Infeasible, plan: None, cost: Cost::TOP, stats },
    })
}
