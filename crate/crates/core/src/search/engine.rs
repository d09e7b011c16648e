use crate::model::ModelDefinition;
use crate::monitor::{MonitorState, PropertyKind, PropertySet, Status};
use crate::sim::{resume, Checkpoint, DoseEvent, Method, SimError};

use super::{
    backjump_target, check_twins, select_twins, Cost, DoseMenu, SearchConfig, SearchError, SearchResult, SearchStats,
    SearchStatus, TrailEntry, TreatmentPlan,
};

/// Cost-minimal feasible plan for `twins` under `properties`.
///
/// Day `d` of a branch is simulated once, from the checkpoint of day `d - 1`,
/// and fed to incremental monitors. A violated property cuts the branch
/// there. Once every goal is met the zero-dose completion is tried first,
/// since nothing else in that subtree can cost less. Partial plans whose
/// lower bound cannot beat the incumbent are pruned.
///
/// Ties between equal-cost plans go to the plan explored first under
/// `cfg.order`, matching [`super::exhaustive_oracle`].
pub fn optimise(
    model: &ModelDefinition,
    twins: &[Vec<f64>],
    properties: &PropertySet,
    menu: &DoseMenu,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate(properties)?;
    check_twins(model, twins)?;
    if menu.drug_count() != model.drugs().len() {
        return Err(SearchError::Menu("menu does not match the model's drugs".into()));
    }
    let twins = select_twins(twins, cfg.robustness)?;
    let mut search = Search::new(model, twins, properties, menu, cfg);

    let mut root = Vec::with_capacity(twins.len());
    for params in twins {
        let cp = Checkpoint::start(model, params, &model.initial_state(), &cfg.sim)?;
        let row = cp.row(model, params);
        let mut mon = MonitorState::new(properties, cfg.sim.output_grid);
        mon.feed_row(properties, row.times[0], &row.observables[0])?;
        root.push(TwinState { cp, mon });
    }
    let node = Node { twins: root, drug: 0.0, used: 0 };
    if node.twins.iter().all(|t| t.mon.violation().is_none()) {
        search.visit(0, &node)?;
    }

    let Search { best, stats, exhausted_budget, .. } = search;
    let status = match (&best, exhausted_budget) {
        (Some(_), false) => SearchStatus::Optimal,
        (Some(_), true) => SearchStatus::FeasibleBudgetExhausted,
        (None, false) => SearchStatus::Infeasible,
        (None, true) => SearchStatus::InfeasibleBudgetExhausted,
    };
    Ok(match best {
        Some((cost, plan)) => SearchResult { status, plan: Some(plan), cost, stats },
        None => SearchResult { status, plan: None, cost: Cost::TOP, stats },
    })
}

#[derive(Clone)]
struct TwinState {
    cp: Checkpoint,
    mon: MonitorState,
}

struct Node {
    twins: Vec<TwinState>,
    drug: f64,
    used: u32,
}

/// How a subtree ended.
enum Flow {
    Continue,
    /// Unwind to this day and try its next alternative.
    JumpTo(u32),
    /// Nothing left worth exploring.
    Stop,
}

struct Search<'a> {
    model: &'a ModelDefinition,
    twins: &'a [Vec<f64>],
    props: &'a PropertySet,
    cfg: &'a SearchConfig,
    choices: Vec<Vec<f64>>,
    goals: Vec<(usize, f64)>,
    /// Per property: does any drug reach one of its observables?
    drug_relevant: Vec<bool>,
    prefix: Vec<Vec<f64>>,
    trail: Vec<TrailEntry>,
    best: Option<(Cost, TreatmentPlan)>,
    stats: SearchStats,
    exhausted_budget: bool,
}

enum DayOutcome {
    Ok(Vec<TwinState>),
    /// Property index (None for divergence) and the time it failed.
    Failed(Option<usize>, f64),
}

impl<'a> Search<'a> {
    fn new(
        model: &'a ModelDefinition,
        twins: &'a [Vec<f64>],
        props: &'a PropertySet,
        menu: &DoseMenu,
        cfg: &'a SearchConfig,
    ) -> Self {
        let goals = props
            .properties()
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match p.kind {
                PropertyKind::Goal { sustain, .. } => Some((i, sustain)),
                _ => None,
            })
            .collect();
        let drug_relevant = (0..props.len())
            .map(|i| {
                props.observables_of(i).any(|o| (0..model.drugs().len()).any(|d| model.drug_influences_observable(d, o)))
            })
            .collect();
        Search {
            model,
            twins,
            props,
            cfg,
            choices: menu.day_choices(cfg.order),
            goals,
            drug_relevant,
            prefix: Vec::new(),
            trail: Vec::new(),
            best: None,
            stats: SearchStats::default(),
            exhausted_budget: false,
        }
    }

    fn horizon(&self) -> u32 {
        self.cfg.horizon
    }

    fn incumbent(&self) -> Cost {
        self.best.as_ref().map_or(Cost::TOP, |(c, _)| *c)
    }

    /// Earliest completion time a goal can still reach on one twin.
    fn goal_bound(&self, mon: &MonitorState, prop: usize, sustain: f64) -> f64 {
        match mon.status(prop) {
            Status::Satisfied => mon.witness(prop).expect("satisfied goal has a witness") + sustain,
            Status::Violated => f64::INFINITY,
            Status::Pending => match mon.pending_run_start(prop) {
                Some(r) => r + sustain,
                None => mon.last_time().unwrap_or(0.0) + self.cfg.sim.output_grid + sustain,
            },
        }
    }

    fn lower_bound(&self, node: &Node) -> Cost {
        let goal_time = node
            .twins
            .iter()
            .flat_map(|t| self.goals.iter().map(move |&(g, s)| (t, g, s)))
            .map(|(t, g, s)| self.goal_bound(&t.mon, g, s))
            .fold(0.0, f64::max);
        Cost { goal_time, total_drug: node.drug, used_days: node.used }
    }

    fn goals_met(&self, node: &Node) -> bool {
        node.twins.iter().all(|t| self.goals.iter().all(|&(g, _)| t.mon.status(g) == Status::Satisfied))
    }

    /// Simulates `[from, until)` with `doses` on every twin, feeding monitors.
    fn advance(&mut self, twins: &[TwinState], doses: &[DoseEvent], until: u32) -> Result<DayOutcome, SearchError> {
        let from = twins[0].cp.time;
        let mut next = Vec::with_capacity(twins.len());
        for (state, params) in twins.iter().zip(self.twins) {
            let (seg, cp) = match resume(self.model, params, &state.cp, doses, until as f64, &self.cfg.sim) {
                Ok(r) => r,
                Err(SimError::Diverged { time }) => {
                    self.stats.diverged += 1;
                    return Ok(DayOutcome::Failed(None, time));
                }
                Err(e) => return Err(e.into()),
            };
            let mut mon = state.mon.clone();
            for (t, row) in seg.times.iter().zip(&seg.observables) {
                mon.feed_row(self.props, *t, row)?;
                if let Some((p, w)) = mon.violation() {
                    return Ok(DayOutcome::Failed(Some(p), w.unwrap_or(*t)));
                }
            }
            next.push(TwinState { cp, mon });
        }
        self.stats.days_simulated += ((until as f64 - from).round() as u64) * twins.len() as u64;
        Ok(DayOutcome::Ok(next))
    }

    /// Explores the subtree below `node`, whose first `day` days are decided.
    fn visit(&mut self, day: u32, node: &Node) -> Result<Flow, SearchError> {
        let lb = self.lower_bound(node);
        if lb >= self.incumbent() {
            self.stats.prunes += 1;
            return Ok(Flow::Continue);
        }
        if self.goals_met(node) {
            // Goal time is fixed and no completion uses less drug or fewer
            // days than all zeros; if that is feasible it is the subtree's best.
            let feasible = if day == self.horizon() {
                true
            } else {
                matches!(self.advance(&node.twins, &[], self.horizon())?, DayOutcome::Ok(_))
            };
            if feasible {
                let mut decisions = self.prefix.clone();
                decisions.resize(self.horizon() as usize, vec![0.0; self.model.drugs().len()]);
                self.best = Some((lb, TreatmentPlan { decisions }));
                return Ok(Flow::Continue);
            }
        }
        if day == self.horizon() {
            return Ok(Flow::Continue);
        }

        let n = self.choices.len();
        for c in 0..n {
            if self.stats.nodes_expanded >= self.cfg.budget {
                self.exhausted_budget = true;
                return Ok(Flow::Stop);
            }
            self.stats.nodes_expanded += 1;
            let amounts = self.choices[c].clone();
            let doses: Vec<DoseEvent> = self
                .model
                .drugs()
                .iter()
                .zip(&amounts)
                .filter(|(_, a)| **a != 0.0)
                .map(|(d, a)| DoseEvent::new(day as f64, d.name.clone(), *a))
                .collect();
            let outcome = self.advance(&node.twins, &doses, day + 1)?;
            self.trail.push(TrailEntry { day, untried: n - c - 1 });
            let flow = match outcome {
                DayOutcome::Failed(prop, time) => {
                    self.stats.prunes += 1;
                    self.after_failure(day, prop, time)
                }
                DayOutcome::Ok(twins) => {
                    let drug = amounts.iter().fold(node.drug, |acc, a| acc + a);
                    let used = if amounts.iter().any(|a| *a != 0.0) { day + 1 } else { node.used };
                    self.prefix.push(amounts);
                    let child = Node { twins, drug, used };
                    let flow = self.visit(day + 1, &child)?;
                    self.prefix.pop();
                    flow
                }
            };
            self.trail.pop();
            match flow {
                Flow::Continue => {}
                Flow::JumpTo(d) if d == day => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Continue)
    }

    /// Where to continue after the branch just pushed on the trail failed.
    fn after_failure(&mut self, day: u32, prop: Option<usize>, time: f64) -> Flow {
        if !self.cfg.backjumping {
            return Flow::Continue;
        }
        // With fixed steps, a property no drug can reach fails at the same
        // time under every plan, so no decision can repair it.
        let independent = self.cfg.sim.method == Method::Rk4 && prop.is_some_and(|p| !self.drug_relevant[p]);
        if independent {
            if self.trail.iter().any(|e| e.untried > 0) {
                self.stats.backjumps += 1;
            }
            return Flow::Stop;
        }
        // A blow-up may be reported at the dose instant itself; it still
        // belongs to this day's decision.
        let time = if prop.is_none() { time.max(day as f64 + self.cfg.sim.output_grid) } else { time };
        let target = backjump_target(time, &self.trail);
        let chronological = self.trail.iter().rev().find(|e| e.untried > 0).map(|e| e.day);
        if Some(target) != chronological && chronological.is_some() {
            self.stats.backjumps += 1;
        }
        if target == day {
            Flow::Continue
        } else if self.trail[target as usize].untried == 0 {
            Flow::Stop
        } else {
            Flow::JumpTo(target)
        }
    }
}
