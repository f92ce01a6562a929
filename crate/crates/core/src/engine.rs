//! Exact conditional expectations and optional projections by path enumeration.
//!
//! On a compiled model every conditional object reduces to a ratio of
//! probability-weighted path sums. A [`Session`] memoizes those sums keyed by
//! the conditioning event and the conditioned variable, because the same state
//! cells recur across paths and times.
//!
//! Two conventions apply throughout:
//! * `0/0 := 0` — conditioning on a zero-probability event yields 0, flagged on
//!   the result rather than raised as an error;
//! * mark conditions are lazy: `Z_M = z` constrains a piece only on paths where
//!   that piece was actually innovated. Ratios of conditional quantities do not
//!   depend on this choice, but standalone denominators such as the bounded
//!   fraction diagnostic do.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::model::{
    CompiledModel, InformationState, MarkId, PathIdx, PathRecord, Side, StateId, TimeIdx,
};

/// Absolute tolerance for identities the exact engine must satisfy.
pub const EXACT_TOL: f64 = 1e-12;

/// One atomic condition from the closed conditioning vocabulary.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Condition {
    /// `Z_M = z`: every piece of `active` that is innovated on the path carries
    /// the paired mark. Lazy in the sense documented on the module.
    MarksMatch { active: Vec<u8>, marks: Vec<MarkId> },
    /// `A^M_t` (side = right) or `A^M_{t-}` (side = left): the active index set
    /// equals `set` exactly. No mark constraint.
    ActiveEq {
        time_idx: TimeIdx,
        side: Side,
        set: Vec<u8>,
    },
    /// `R_I = (u, e)`: the joint event with exactly index set `set` happens at
    /// `time_idx` with mark tuple `marks`.
    JointEvent {
        time_idx: TimeIdx,
        set: Vec<u8>,
        marks: Vec<MarkId>,
    },
    /// `Δ_t = 1` (some event at `time_idx`) or `Δ_t = 0`.
    JumpAt { time_idx: TimeIdx, jump: bool },
    /// Full observable history: the path visits tree node `node`. This is the
    /// filtration-level conditioning used by the classical compensator.
    HistoryNode { node: usize },
}

impl Condition {
    fn holds(&self, model: &CompiledModel, path: &PathRecord) -> bool {
        match self {
            Condition::MarksMatch { active, marks } => {
                active.iter().zip(marks).all(|(&idx, &mark)| {
                    let piece = idx.div_ceil(2);
                    match path.mark(piece) {
                        Some(m) => m == mark,
                        None => true,
                    }
                })
            }
            Condition::ActiveEq {
                time_idx,
                side,
                set,
            } => {
                let state = model.state(path.state_at(*time_idx, *side));
                state.active == *set
            }
            Condition::JointEvent {
                time_idx,
                set,
                marks,
            } => match path.joint_event_at(*time_idx) {
                Some((indices, event_marks)) => indices == *set && event_marks == *marks,
                None => false,
            },
            Condition::JumpAt { time_idx, jump } => path.has_event_at(*time_idx) == *jump,
            Condition::HistoryNode { node } => {
                let k = model.nodes()[*node].time_idx;
                path.nodes[k] == *node
            }
        }
    }
}

/// A conjunction of atomic conditions, canonically sorted so that equal events
/// hash equally.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct ConditioningEvent(Vec<Condition>);

impl ConditioningEvent {
    pub fn all() -> Self {
        ConditioningEvent(Vec::new())
    }

    pub fn new(mut conditions: Vec<Condition>) -> Self {
        conditions.sort();
        conditions.dedup();
        ConditioningEvent(conditions)
    }

    pub fn and(&self, extra: Condition) -> Self {
        let mut conditions = self.0.clone();
        conditions.push(extra);
        ConditioningEvent::new(conditions)
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.0
    }

    pub fn holds(&self, model: &CompiledModel, path: &PathRecord) -> bool {
        self.0.iter().all(|c| c.holds(model, path))
    }

    /// The exact-information cell: active set and marks at `(t, side)` both equal
    /// the given state.
    pub fn state_cell(model: &CompiledModel, id: StateId, time_idx: TimeIdx, side: Side) -> Self {
        let state = model.state(id);
        ConditioningEvent::new(vec![
            Condition::ActiveEq {
                time_idx,
                side,
                set: state.active.clone(),
            },
            Condition::MarksMatch {
                active: state.active.clone(),
                marks: state.marks.clone(),
            },
        ])
    }
}

/// Handle to a registered path functional; valid for the session that created it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

/// Result of a conditional expectation under the `0/0 := 0` convention.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct CondResult {
    pub value: f64,
    /// The conditioning event has probability zero; the value is 0 by convention.
    pub zero_probability: bool,
}

/// Per-path optional projection values on the grid.
#[derive(Clone, Debug)]
pub struct ProjectionPath {
    pub path_id: PathIdx,
    /// `E[. | G_{t_k}]` for `k = 0..=N`.
    pub right: Vec<f64>,
    /// `E[. | G^-_{t_k}]` for `k = 1..=N`; index `k - 1`.
    pub left: Vec<f64>,
}

struct SessionCache {
    sets: HashMap<ConditioningEvent, Rc<SetInfo>>,
    conditionals: HashMap<(ConditioningEvent, Var), CondResult>,
}

struct SetInfo {
    paths: Vec<PathIdx>,
    prob: f64,
}

/// Memoizing facade over one compiled model. Sessions are cheap to create and
/// confined to one thread; create one per worker for parallel verification.
pub struct Session<'m> {
    model: &'m CompiledModel,
    vars: RefCell<Vec<Rc<Vec<f64>>>>,
    cache: RefCell<SessionCache>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m CompiledModel) -> Self {
        Session {
            model,
            vars: RefCell::new(Vec::new()),
            cache: RefCell::new(SessionCache {
                sets: HashMap::new(),
                conditionals: HashMap::new(),
            }),
        }
    }

    pub fn model(&self) -> &'m CompiledModel {
        self.model
    }

    /// Register a path functional given by explicit per-path values.
    pub fn register_values(&self, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), self.model.paths().len());
        let mut vars = self.vars.borrow_mut();
        vars.push(Rc::new(values));
        Var(vars.len() - 1)
    }

    /// Register a path functional given by a closure.
    pub fn register(&self, f: impl Fn(&PathRecord) -> f64) -> Var {
        let values = self.model.paths().iter().map(f).collect();
        self.register_values(values)
    }

    pub fn values(&self, var: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.vars.borrow()[var.0])
    }

    fn set_info(&self, event: &ConditioningEvent) -> Rc<SetInfo> {
        if let Some(info) = self.cache.borrow().sets.get(event) {
            return Rc::clone(info);
        }
        let mut paths = Vec::new();
        let mut prob = 0.0;
        for path in self.model.paths() {
            if event.holds(self.model, path) {
                paths.push(path.id);
                prob += path.probability;
            }
        }
        let info = Rc::new(SetInfo { paths, prob });
        self.cache
            .borrow_mut()
            .sets
            .insert(event.clone(), Rc::clone(&info));
        info
    }

    /// Probability of a conditioning event.
    pub fn probability(&self, event: &ConditioningEvent) -> f64 {
        self.set_info(event).prob
    }

    /// Paths on which the event holds.
    pub fn matching_paths(&self, event: &ConditioningEvent) -> Vec<PathIdx> {
        self.set_info(event).paths.clone()
    }

    /// `E[var | event]` as a probability-weighted average over the matching
    /// paths, `0` with a flag when the event has probability zero. When every
    /// matching path carries bit-identical values the common value is returned
    /// unchanged, so conditioning a measurable variable is exact.
    pub fn conditional_expectation(&self, var: Var, event: &ConditioningEvent) -> CondResult {
        let key = (event.clone(), var);
        if let Some(&hit) = self.cache.borrow().conditionals.get(&key) {
            return hit;
        }
        let info = self.set_info(event);
        let values = self.values(var);
        let result = if info.paths.is_empty() || info.prob <= 0.0 {
            CondResult {
                value: 0.0,
                zero_probability: true,
            }
        } else {
            let first = values[info.paths[0]];
            let mut all_equal = true;
            let mut weighted = 0.0;
            for &p in &info.paths {
                let v = values[p];
                if v.to_bits() != first.to_bits() {
                    all_equal = false;
                }
                weighted += v * self.model.paths()[p].probability;
            }
            CondResult {
                value: if all_equal { first } else { weighted / info.prob },
                zero_probability: false,
            }
        };
        self.cache.borrow_mut().conditionals.insert(key, result);
        result
    }

    /// Shorthand: conditional expectation value.
    pub fn cond(&self, var: Var, event: &ConditioningEvent) -> f64 {
        self.conditional_expectation(var, event).value
    }

    /// The projection value `E[var | G]` shared by every path in the state cell.
    pub fn cell_value(&self, var: Var, state: StateId, time_idx: TimeIdx, side: Side) -> f64 {
        let cell = ConditioningEvent::state_cell(self.model, state, time_idx, side);
        self.cond(var, &cell)
    }

    /// Optional projection of `var`: per path, `E[var | G_t]` for every grid time
    /// and `E[var | G^-_t]` for every positive grid time. Direct conditioning on
    /// the information-state partition.
    pub fn optional_projection(&self, var: Var) -> Vec<ProjectionPath> {
        let steps = self.model.steps();
        self.model
            .paths()
            .iter()
            .map(|path| {
                let right = (0..=steps)
                    .map(|k| self.cell_value(var, path.states[k], k, Side::Right))
                    .collect();
                let left = (1..=steps)
                    .map(|k| self.cell_value(var, path.states[k - 1], k, Side::Left))
                    .collect();
                ProjectionPath {
                    path_id: path.id,
                    right,
                    left,
                }
            })
            .collect()
    }

    /// Projection of a time-indexed process: `right[k] = E[X_{t_k} | G_{t_k}]`
    /// and `left[k - 1] = E[X_{t_{k-1}} | G^-_{t_k}]` (the left limit pairs the
    /// left value of the process with the left information).
    pub fn projection_process(&self, process: &[Var]) -> Vec<ProjectionPath> {
        let steps = self.model.steps();
        assert_eq!(process.len(), steps + 1);
        self.model
            .paths()
            .iter()
            .map(|path| {
                let right = (0..=steps)
                    .map(|k| self.cell_value(process[k], path.states[k], k, Side::Right))
                    .collect();
                let left = (1..=steps)
                    .map(|k| self.cell_value(process[k - 1], path.states[k - 1], k, Side::Left))
                    .collect();
                ProjectionPath {
                    path_id: path.id,
                    right,
                    left,
                }
            })
            .collect()
    }

    /// Independent route to the projection, following the ratio formula:
    /// `E_M[var · 1_{A^M_t}] / E_M[1_{A^M_t}]` with both factors computed as
    /// separate conditional expectations given the lazy mark condition.
    pub fn ratio_formula_projection(
        &self,
        var: Var,
        path: &PathRecord,
        time_idx: TimeIdx,
        side: Side,
    ) -> f64 {
        let state = self.model.state(path.state_at(time_idx, side));
        let marks_event = ConditioningEvent::new(vec![Condition::MarksMatch {
            active: state.active.clone(),
            marks: state.marks.clone(),
        }]);
        let indicator: Vec<f64> = self
            .model
            .paths()
            .iter()
            .map(|q| {
                let q_state = self.model.state(q.state_at(time_idx, side));
                if q_state.active == state.active {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let values = self.values(var);
        let weighted: Vec<f64> = indicator
            .iter()
            .zip(values.iter())
            .map(|(ind, v)| ind * v)
            .collect();
        let num_var = self.register_values(weighted);
        let den_var = self.register_values(indicator);
        let num = self.cond(num_var, &marks_event);
        let den = self.cond(den_var, &marks_event);
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Per-path supremum over grid times of `1 / E_M[1_{A^M_t}]` along the
    /// realized states; finite on every path of a finite model. The value bounds
    /// how strongly one path can dominate its own state cell.
    pub fn bounded_fraction_diagnostic(&self) -> Vec<f64> {
        let steps = self.model.steps();
        self.model
            .paths()
            .iter()
            .map(|path| {
                let mut sup: f64 = 0.0;
                for k in 0..=steps {
                    let state = self.model.state(path.states[k]);
                    let marks_event = ConditioningEvent::new(vec![Condition::MarksMatch {
                        active: state.active.clone(),
                        marks: state.marks.clone(),
                    }]);
                    let active = ConditioningEvent::new(vec![
                        Condition::ActiveEq {
                            time_idx: k,
                            side: Side::Right,
                            set: state.active.clone(),
                        },
                        Condition::MarksMatch {
                            active: state.active.clone(),
                            marks: state.marks.clone(),
                        },
                    ]);
                    let denominator = self.probability(&active) / self.probability(&marks_event);
                    sup = sup.max(1.0 / denominator);
                }
                sup
            })
            .collect()
    }

    /// All distinct `(state, time)` pairs realized on some path, with the cell
    /// probability attached. The cells at a fixed time partition the path space.
    pub fn state_cells_at(&self, time_idx: TimeIdx, side: Side) -> Vec<(StateId, f64)> {
        let mut seen: Vec<(StateId, f64)> = Vec::new();
        for path in self.model.paths() {
            let id = path.state_at(time_idx, side);
            match seen.iter_mut().find(|(s, _)| *s == id) {
                Some((_, p)) => *p += path.probability,
                None => seen.push((id, path.probability)),
            }
        }
        seen.sort_by_key(|(s, _)| *s);
        seen
    }

    /// Helper for the factorized conditioning `P(. | Z_{M_I} = z', R_I = r)`:
    /// the mark condition is reduced by every piece whose innovation or deletion
    /// index appears in the joint index set.
    pub fn reduced_marks_condition(
        &self,
        state: &InformationState,
        joint_set: &[u8],
    ) -> Condition {
        let mut active = Vec::new();
        let mut marks = Vec::new();
        for (idx, mark) in state.active.iter().zip(&state.marks) {
            let covered = joint_set.contains(idx) || joint_set.contains(&(idx + 1));
            if !covered {
                active.push(*idx);
                marks.push(*mark);
            }
        }
        Condition::MarksMatch { active, marks }
    }
}
