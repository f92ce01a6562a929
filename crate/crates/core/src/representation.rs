//! Two-sided decomposition of projection increments.
//!
//! For an integrable path functional `xi` and every grid time `t`, the change
//! `E[xi | G_t] - E[xi | G_0]` splits into a forward stochastic integral against
//! `counting - forward_compensator` (the innovation part, with an integrand
//! measurable just before each jump) plus a backward integral against
//! `backward_compensator - counting` (the information-loss part, measurable at
//! the jump itself). On monotone models the backward part vanishes and the
//! forward integrand coincides with the classical martingale-representation
//! integrand. For a time-indexed process the same split holds after adding the
//! backward (or forward) compensator of the process as a drift.
//!
//! The residual of the decomposition is the module's central diagnostic; it is
//! reported per path and time rather than as a single scalar, so consumers can
//! emit full trajectories.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::{Condition, ConditioningEvent, Session, Var};
use crate::measures::{
    backward_compensator_atoms, backward_compensator_increments, counting_atoms,
    forward_compensator_atoms, forward_compensator_increments, AtomKey, MeasureAtoms,
};
use crate::model::{PathIdx, PathRecord, Side, TimeIdx};

/// Absolute tolerance for the decomposition residual.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("integrand undefined at atom {key}")]
    MissingIntegrand { key: String },
    #[error("process must provide one variable per grid point, got {got} for {want}")]
    ProcessLength { got: usize, want: usize },
}

/// Which compensator of the process enters as drift.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DriftSide {
    /// Forward compensator: increments conditioned at the left endpoint.
    Forward,
    /// Backward compensator: increments conditioned at the right endpoint.
    Backward,
}

/// Representation integrand of one path: values at `(u, I, e)` for the
/// pre-jump argument (`left`, measurable for the information just before `u`)
/// and the at-jump argument (`right`, measurable at `u`).
#[derive(Clone, Debug, Default)]
pub struct RepresentationIntegrand {
    pub path_id: PathIdx,
    pub left: BTreeMap<AtomKey, f64>,
    pub right: BTreeMap<AtomKey, f64>,
}

/// Per-time ledger entry of the decomposition.
#[derive(Clone, Copy, Debug)]
pub struct ReportRow {
    pub time_idx: TimeIdx,
    pub t: f64,
    /// `E[. | G_t] - E[. | G_0]`.
    pub lhs: f64,
    /// Cumulative drift (zero for plain functionals).
    pub drift: f64,
    /// Cumulative forward integral.
    pub forward_integral: f64,
    /// Cumulative backward integral.
    pub backward_integral: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct RepresentationReport {
    pub path_id: PathIdx,
    pub rows: Vec<ReportRow>,
}

impl RepresentationReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max)
    }
}

pub fn max_abs_residual(reports: &[RepresentationReport]) -> f64 {
    reports
        .iter()
        .map(RepresentationReport::max_abs_residual)
        .fold(0.0, f64::max)
}

/// One integrand value: difference between the jump-scenario conditional
/// expectation (factorized conditioning on the joint event) and the
/// remain-scenario conditional expectation (state unchanged across `u`).
/// Zero-probability terms contribute 0 by the `0/0` convention.
pub(crate) fn integrand_value(
    session: &Session<'_>,
    path: &PathRecord,
    xi: Var,
    key: &AtomKey,
    side: Side,
) -> f64 {
    let model = session.model();
    let k = key.time_idx;
    let state = model.state(path.state_at(k, side));
    let jump_event = ConditioningEvent::new(vec![
        Condition::ActiveEq {
            time_idx: k,
            side,
            set: state.active.clone(),
        },
        session.reduced_marks_condition(state, &key.index_set),
        Condition::JointEvent {
            time_idx: k,
            set: key.index_set.clone(),
            marks: key.marks.clone(),
        },
    ]);
    let remain_event = ConditioningEvent::new(vec![
        Condition::MarksMatch {
            active: state.active.clone(),
            marks: state.marks.clone(),
        },
        Condition::ActiveEq {
            time_idx: k,
            side: Side::Left,
            set: state.active.clone(),
        },
        Condition::ActiveEq {
            time_idx: k,
            side: Side::Right,
            set: state.active.clone(),
        },
    ]);
    session.cond(xi, &jump_event) - session.cond(xi, &remain_event)
}

struct PathMeasures {
    counting: MeasureAtoms,
    forward: MeasureAtoms,
    backward: MeasureAtoms,
}

fn path_measures(session: &Session<'_>, path: &PathRecord) -> PathMeasures {
    PathMeasures {
        counting: counting_atoms(path),
        forward: forward_compensator_atoms(session, path),
        backward: backward_compensator_atoms(session, path),
    }
}

pub(crate) fn keys_at(measures: &[&MeasureAtoms], k: TimeIdx) -> BTreeSet<AtomKey> {
    let mut keys = BTreeSet::new();
    for m in measures {
        for atom in m.atoms() {
            if atom.key.time_idx == k {
                keys.insert(atom.key.clone());
            }
        }
    }
    keys
}

/// Representation integrand of a fixed functional on every atom reachable on
/// the path (union of the counting and compensator supports).
pub fn integrand_xi(
    session: &Session<'_>,
    path: &PathRecord,
    xi: Var,
) -> RepresentationIntegrand {
    let m = path_measures(session, path);
    let mut result = RepresentationIntegrand {
        path_id: path.id,
        ..Default::default()
    };
    for k in 1..=session.model().steps() {
        for key in keys_at(&[&m.counting, &m.forward], k) {
            let v = integrand_value(session, path, xi, &key, Side::Left);
            result.left.insert(key, v);
        }
        for key in keys_at(&[&m.counting, &m.backward], k) {
            let v = integrand_value(session, path, xi, &key, Side::Right);
            result.right.insert(key, v);
        }
    }
    result
}

/// Interpretation form of the integrand: expected change-scenario value minus
/// expected remain-scenario value, conditioning directly on the information
/// state together with either the joint event or the no-event indicator. The
/// process argument is frozen at its pre-jump value. Agrees with
/// [`integrand_xi`] on every reachable atom.
pub fn integrand_interpretation(
    session: &Session<'_>,
    path: &PathRecord,
    process: &[Var],
) -> Result<RepresentationIntegrand, ReprError> {
    let model = session.model();
    let steps = model.steps();
    if process.len() != steps + 1 {
        return Err(ReprError::ProcessLength {
            got: process.len(),
            want: steps + 1,
        });
    }
    let m = path_measures(session, path);
    let mut result = RepresentationIntegrand {
        path_id: path.id,
        ..Default::default()
    };
    let value = |key: &AtomKey, side: Side, frozen: Var| -> f64 {
        let k = key.time_idx;
        let cell =
            ConditioningEvent::state_cell(model, path.state_at(k, side), k, side);
        let change = cell.and(Condition::JointEvent {
            time_idx: k,
            set: key.index_set.clone(),
            marks: key.marks.clone(),
        });
        let remain = cell.and(Condition::JumpAt {
            time_idx: k,
            jump: false,
        });
        session.cond(frozen, &change) - session.cond(frozen, &remain)
    };
    for k in 1..=steps {
        let frozen = process[k - 1];
        for key in keys_at(&[&m.counting, &m.forward], k) {
            let v = value(&key, Side::Left, frozen);
            result.left.insert(key, v);
        }
        for key in keys_at(&[&m.counting, &m.backward], k) {
            let v = value(&key, Side::Right, frozen);
            result.right.insert(key, v);
        }
    }
    Ok(result)
}

/// `sum value(key) · (plus - minus)` over atoms in `(0, t]`, grouped by key.
/// Every atom of either measure must have an integrand value.
pub fn stochastic_integral(
    session: &Session<'_>,
    integrand: &BTreeMap<AtomKey, f64>,
    plus: &MeasureAtoms,
    minus: &MeasureAtoms,
    through: TimeIdx,
) -> Result<f64, ReprError> {
    let mut keys: BTreeSet<&AtomKey> = BTreeSet::new();
    keys.extend(plus.atoms().iter().map(|a| &a.key));
    keys.extend(minus.atoms().iter().map(|a| &a.key));
    let mut total = 0.0;
    for key in keys {
        if key.time_idx > through {
            continue;
        }
        let value = integrand
            .get(key)
            .ok_or_else(|| ReprError::MissingIntegrand {
                key: key.display(session.model().marks()),
            })?;
        total += value * (plus.mass_at(key) - minus.mass_at(key));
    }
    Ok(total)
}

/// Verify the decomposition of `E[xi | G_t] - E[xi | G_0]` on every path. The
/// drift column is identically zero here.
pub fn verify_representation_xi(session: &Session<'_>, xi: Var) -> Vec<RepresentationReport> {
    let model = session.model();
    let steps = model.steps();
    model
        .paths()
        .iter()
        .map(|path| {
            let m = path_measures(session, path);
            let base = session.cell_value(xi, path.states[0], 0, Side::Right);
            let mut forward_cum = 0.0;
            let mut backward_cum = 0.0;
            let mut rows = Vec::with_capacity(steps + 1);
            rows.push(ReportRow {
                time_idx: 0,
                t: model.grid()[0],
                lhs: 0.0,
                drift: 0.0,
                forward_integral: 0.0,
                backward_integral: 0.0,
                residual: 0.0,
            });
            for k in 1..=steps {
                for key in keys_at(&[&m.counting, &m.forward], k) {
                    let g = integrand_value(session, path, xi, &key, Side::Left);
                    forward_cum += g * (m.counting.mass_at(&key) - m.forward.mass_at(&key));
                }
                for key in keys_at(&[&m.counting, &m.backward], k) {
                    let g = integrand_value(session, path, xi, &key, Side::Right);
                    backward_cum += g * (m.backward.mass_at(&key) - m.counting.mass_at(&key));
                }
                let lhs = session.cell_value(xi, path.states[k], k, Side::Right) - base;
                rows.push(ReportRow {
                    time_idx: k,
                    t: model.grid()[k],
                    lhs,
                    drift: 0.0,
                    forward_integral: forward_cum,
                    backward_integral: backward_cum,
                    residual: lhs - forward_cum - backward_cum,
                });
            }
            RepresentationReport {
                path_id: path.id,
                rows,
            }
        })
        .collect()
}

/// Verify the decomposition of a projected process with the canonical grid
/// compensator of the requested side as drift.
pub fn verify_representation_process(
    session: &Session<'_>,
    process: &[Var],
    side: DriftSide,
) -> Result<Vec<RepresentationReport>, ReprError> {
    let drift = match side {
        DriftSide::Backward => backward_compensator_increments(session, process),
        DriftSide::Forward => forward_compensator_increments(session, process),
    };
    verify_representation_process_with_drift(session, process, side, &drift)
}

/// As [`verify_representation_process`] with caller-supplied per-path drift
/// increments (for example a sojourn drift ledger).
pub fn verify_representation_process_with_drift(
    session: &Session<'_>,
    process: &[Var],
    side: DriftSide,
    drift: &[Vec<f64>],
) -> Result<Vec<RepresentationReport>, ReprError> {
    let model = session.model();
    let steps = model.steps();
    if process.len() != steps + 1 {
        return Err(ReprError::ProcessLength {
            got: process.len(),
            want: steps + 1,
        });
    }
    let reports = model
        .paths()
        .iter()
        .map(|path| {
            let m = path_measures(session, path);
            let base = session.cell_value(process[0], path.states[0], 0, Side::Right);
            let mut forward_cum = 0.0;
            let mut backward_cum = 0.0;
            let mut drift_cum = 0.0;
            let mut rows = Vec::with_capacity(steps + 1);
            rows.push(ReportRow {
                time_idx: 0,
                t: model.grid()[0],
                lhs: 0.0,
                drift: 0.0,
                forward_integral: 0.0,
                backward_integral: 0.0,
                residual: 0.0,
            });
            for k in 1..=steps {
                // the integrand freezes the process at its pre-jump value on the
                // backward drift side, and at the post-jump value on the forward
                // drift side
                let frozen = match side {
                    DriftSide::Backward => process[k - 1],
                    DriftSide::Forward => process[k],
                };
                for key in keys_at(&[&m.counting, &m.forward], k) {
                    let g = integrand_value(session, path, frozen, &key, Side::Left);
                    forward_cum += g * (m.counting.mass_at(&key) - m.forward.mass_at(&key));
                }
                for key in keys_at(&[&m.counting, &m.backward], k) {
                    let g = integrand_value(session, path, frozen, &key, Side::Right);
                    backward_cum += g * (m.backward.mass_at(&key) - m.counting.mass_at(&key));
                }
                drift_cum += drift[path.id][k - 1];
                let lhs =
                    session.cell_value(process[k], path.states[k], k, Side::Right) - base;
                rows.push(ReportRow {
                    time_idx: k,
                    t: model.grid()[k],
                    lhs,
                    drift: drift_cum,
                    forward_integral: forward_cum,
                    backward_integral: backward_cum,
                    residual: lhs - drift_cum - forward_cum - backward_cum,
                });
            }
            RepresentationReport {
                path_id: path.id,
                rows,
            }
        })
        .collect();
    Ok(reports)
}

/// One row of the telescoping identity check, per information state and time.
#[derive(Clone, Debug)]
pub struct TelescopeRow {
    pub state_label: String,
    pub time_idx: TimeIdx,
    pub lhs: f64,
    pub rhs: f64,
}

impl TelescopeRow {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Verify, for every realized mark configuration `(M, z)` and grid time `t`,
/// that the change of `E_M[1_{A^M_t} xi]` telescopes over the joint-event
/// conditionals: the sum over reachable `(u, I, e)` with `u <= t` of
/// `E_{M,R_I=(u,e)}[(1_{A^M_u} - 1_{A^M_{u-}}) xi] · P_M(R_I = (u,e))`.
pub fn lemma_telescoping_check(session: &Session<'_>, xi: Var) -> Vec<TelescopeRow> {
    let model = session.model();
    let steps = model.steps();
    let xi_values = session.values(xi);
    let mut rows = Vec::new();
    for state_no in 0..model.state_count() {
        let state_id = crate::model::StateId(state_no as u32);
        let state = model.state(state_id).clone();
        let marks_event = ConditioningEvent::new(vec![Condition::MarksMatch {
            active: state.active.clone(),
            marks: state.marks.clone(),
        }]);
        let prob_marks = session.probability(&marks_event);
        if prob_marks == 0.0 {
            continue;
        }
        // active-set indicator at (k, side), as a value vector
        let indicator = |k: TimeIdx, side: Side| -> Vec<f64> {
            model
                .paths()
                .iter()
                .map(|q| {
                    if model.state(q.state_at(k, side)).active == state.active {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let weighted = |ind: &[f64]| -> Var {
            session.register_values(
                ind.iter()
                    .zip(xi_values.iter())
                    .map(|(i, v)| i * v)
                    .collect(),
            )
        };
        let lhs_at: Vec<f64> = (0..=steps)
            .map(|k| {
                let var = weighted(&indicator(k, Side::Right));
                session.cond(var, &marks_event)
            })
            .collect();

        // reachable joint events within the mark cell
        let mut atom_terms: Vec<(TimeIdx, f64)> = Vec::new();
        let mut seen: BTreeSet<AtomKey> = BTreeSet::new();
        for &q in &session.matching_paths(&marks_event) {
            let q_path = &model.paths()[q];
            for k in 1..=steps {
                if let Some((set, marks)) = q_path.joint_event_at(k) {
                    let key = AtomKey {
                        time_idx: k,
                        index_set: set,
                        marks,
                    };
                    if !seen.insert(key.clone()) {
                        continue;
                    }
                    let jump_diff: Vec<f64> = {
                        let right = indicator(k, Side::Right);
                        let left = indicator(k, Side::Left);
                        right
                            .iter()
                            .zip(&left)
                            .zip(xi_values.iter())
                            .map(|((r, l), v)| (r - l) * v)
                            .collect()
                    };
                    let diff_var = session.register_values(jump_diff);
                    let joint = Condition::JointEvent {
                        time_idx: k,
                        set: key.index_set.clone(),
                        marks: key.marks.clone(),
                    };
                    let factor_event = ConditioningEvent::new(vec![
                        session.reduced_marks_condition(&state, &key.index_set),
                        joint.clone(),
                    ]);
                    let factor = session.cond(diff_var, &factor_event);
                    let weight =
                        session.probability(&marks_event.and(joint)) / prob_marks;
                    atom_terms.push((k, factor * weight));
                }
            }
        }
        for t in 0..=steps {
            let rhs: f64 = atom_terms
                .iter()
                .filter(|(k, _)| *k <= t)
                .map(|(_, v)| v)
                .sum();
            rows.push(TelescopeRow {
                state_label: model.state_label(state_id),
                time_idx: t,
                lhs: lhs_at[t] - lhs_at[0],
                rhs,
            });
        }
    }
    rows
}

/// Classical martingale-representation integrand under the full history:
/// `E[xi | node, joint event (I, e) at u] - E[xi | node, no event at u]`.
/// Used as the independent oracle for the monotone collapse.
pub fn classical_integrand(
    session: &Session<'_>,
    path: &PathRecord,
    xi: Var,
    key: &AtomKey,
) -> f64 {
    let node = Condition::HistoryNode {
        node: path.nodes[key.time_idx - 1],
    };
    let change = ConditioningEvent::new(vec![
        node.clone(),
        Condition::JointEvent {
            time_idx: key.time_idx,
            set: key.index_set.clone(),
            marks: key.marks.clone(),
        },
    ]);
    let remain = ConditioningEvent::new(vec![
        node,
        Condition::JumpAt {
            time_idx: key.time_idx,
            jump: false,
        },
    ]);
    session.cond(xi, &change) - session.cond(xi, &remain)
}
