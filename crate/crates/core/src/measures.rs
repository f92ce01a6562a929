//! Random measures on the grid: the counting measure of the joint events, its
//! forward and backward compensators under partial information, the classical
//! compensator under full history, and sojourn-type drift ledgers.
//!
//! All measures are finite atom lists keyed by `(time, index set, mark tuple)`.
//! The forward compensator charges `(u, I, e)` with the probability of that
//! joint event given the information immediately before `u`; the backward
//! compensator conditions on the information at `u` instead, so deletions give
//! it mass on events that did not happen on the observed path. On monotone
//! models both collapse: forward equals the classical compensator and backward
//! equals the counting measure itself.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::engine::{Condition, ConditioningEvent, Session, Var};
use crate::model::{
    CompiledModel, MarkId, ModelError, PathRecord, Side, TimeIdx,
};

/// Absolute tolerance for measure-level identities.
pub const MEASURE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MeasureKind {
    /// Unit atoms at the realized joint events.
    Counting,
    /// Compensator with respect to the pre-event information.
    Forward,
    /// Compensator with respect to the post-event information.
    Backward,
    /// Compensator with respect to the full observable history.
    Classical,
    Generic,
}

impl MeasureKind {
    pub fn label(&self) -> &'static str {
        match self {
            MeasureKind::Counting => "counting",
            MeasureKind::Forward => "forward",
            MeasureKind::Backward => "backward",
            MeasureKind::Classical => "classical",
            MeasureKind::Generic => "generic",
        }
    }
}

/// Key of one atom: grid index, sorted jump indices, aligned marks.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct AtomKey {
    pub time_idx: TimeIdx,
    pub index_set: Vec<u8>,
    pub marks: Vec<MarkId>,
}

impl AtomKey {
    pub fn display(&self, marks: &[String]) -> String {
        let set = self
            .index_set
            .iter()
            .map(u8::to_string)
            .collect::<Vec<_>>()
            .join("+");
        let tuple = self
            .marks
            .iter()
            .map(|&m| marks[m as usize].clone())
            .collect::<Vec<_>>()
            .join("+");
        format!("t{}({}:{})", self.time_idx, set, tuple)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Atom {
    pub key: AtomKey,
    pub mass: f64,
}

/// A finite random measure restricted to one path: sorted atoms, no duplicates.
#[derive(Clone, Debug)]
pub struct MeasureAtoms {
    pub kind: MeasureKind,
    atoms: Vec<Atom>,
}

impl MeasureAtoms {
    pub fn new(kind: MeasureKind, mut atoms: Vec<Atom>) -> Self {
        atoms.sort_by(|a, b| a.key.cmp(&b.key));
        MeasureAtoms { kind, atoms }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn mass_at(&self, key: &AtomKey) -> f64 {
        match self.atoms.binary_search_by(|a| a.key.cmp(key)) {
            Ok(i) => self.atoms[i].mass,
            Err(_) => 0.0,
        }
    }

    /// Total mass on `(0, t_k] x {key}` for the given key ignoring its time.
    pub fn cumulative(&self, through: TimeIdx, index_set: &[u8], marks: &[MarkId]) -> f64 {
        self.atoms
            .iter()
            .filter(|a| {
                a.key.time_idx <= through
                    && a.key.index_set == index_set
                    && a.key.marks == marks
            })
            .map(|a| a.mass)
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    pub fn keys(&self) -> impl Iterator<Item = &AtomKey> {
        self.atoms.iter().map(|a| &a.key)
    }
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("integrand undefined at atom {key}")]
    MissingIntegrand { key: String },
    #[error("Dirac time {t} is not on the grid")]
    DiracOffGrid { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Counting measure of a path: one unit atom per grid time with events, the
/// index set being exactly the jump indices occurring there.
pub fn counting_atoms(path: &PathRecord) -> MeasureAtoms {
    let atoms = (1..=path.events.len())
        .filter_map(|k| {
            path.joint_event_at(k).map(|(index_set, marks)| Atom {
                key: AtomKey {
                    time_idx: k,
                    index_set,
                    marks,
                },
                mass: 1.0,
            })
        })
        .collect();
    MeasureAtoms::new(MeasureKind::Counting, atoms)
}

/// Atoms charged by conditioning on a per-time cell: at every grid time, every
/// joint event reachable within the cell gets its conditional probability.
fn compensator_atoms(
    session: &Session<'_>,
    cell_at: impl Fn(TimeIdx) -> ConditioningEvent,
    kind: MeasureKind,
) -> MeasureAtoms {
    let model = session.model();
    let mut atoms = Vec::new();
    for k in 1..=model.steps() {
        let cell = cell_at(k);
        let cell_prob = session.probability(&cell);
        let mut candidates: BTreeSet<(Vec<u8>, Vec<MarkId>)> = BTreeSet::new();
        for q in session.matching_paths(&cell) {
            if let Some(joint) = model.paths()[q].joint_event_at(k) {
                candidates.insert(joint);
            }
        }
        for (index_set, marks) in candidates {
            let with_event = cell.and(Condition::JointEvent {
                time_idx: k,
                set: index_set.clone(),
                marks: marks.clone(),
            });
            let mass = session.probability(&with_event) / cell_prob;
            atoms.push(Atom {
                key: AtomKey {
                    time_idx: k,
                    index_set,
                    marks,
                },
                mass,
            });
        }
    }
    MeasureAtoms::new(kind, atoms)
}

/// Forward compensator of the counting measure along one path: mass of
/// `(u, I, e)` is the probability of that joint event given the information
/// state immediately before `u`.
pub fn forward_compensator_atoms(session: &Session<'_>, path: &PathRecord) -> MeasureAtoms {
    let model = session.model();
    compensator_atoms(
        session,
        |k| ConditioningEvent::state_cell(model, path.state_at(k, Side::Left), k, Side::Left),
        MeasureKind::Forward,
    )
}

/// Backward compensator: conditions on the information state at `u` itself.
pub fn backward_compensator_atoms(session: &Session<'_>, path: &PathRecord) -> MeasureAtoms {
    let model = session.model();
    compensator_atoms(
        session,
        |k| ConditioningEvent::state_cell(model, path.state_at(k, Side::Right), k, Side::Right),
        MeasureKind::Backward,
    )
}

/// Classical compensator under the full observable history: one-step-ahead
/// conditional probabilities given the tree node before each time, evaluated by
/// enumeration.
pub fn classical_compensator_atoms(session: &Session<'_>, path: &PathRecord) -> MeasureAtoms {
    compensator_atoms(
        session,
        |k| {
            ConditioningEvent::new(vec![Condition::HistoryNode {
                node: path.nodes[k - 1],
            }])
        },
        MeasureKind::Classical,
    )
}

/// A jointly measurable jump integrand `F_I(u, e)` evaluated per path.
pub trait JumpIntegrand {
    fn value(&self, path: &PathRecord, key: &AtomKey) -> Option<f64>;
}

impl<F> JumpIntegrand for F
where
    F: Fn(&PathRecord, &AtomKey) -> f64,
{
    fn value(&self, path: &PathRecord, key: &AtomKey) -> Option<f64> {
        Some(self(path, key))
    }
}

/// Path-independent integrand given by an explicit table; undefined keys are
/// reported as errors by the consumers.
#[derive(Clone, Debug, Default)]
pub struct TableIntegrand {
    pub values: std::collections::BTreeMap<AtomKey, f64>,
}

impl JumpIntegrand for TableIntegrand {
    fn value(&self, _path: &PathRecord, key: &AtomKey) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// Integrand values attached to the atoms of one measure.
#[derive(Clone, Debug)]
pub struct WeightedAtoms {
    pub measure: MeasureAtoms,
    /// Aligned with `measure.atoms()`.
    pub weights: Vec<f64>,
}

impl WeightedAtoms {
    /// `sum weight · mass` over atoms in `(0, t_k]`.
    pub fn weighted_mass_through(&self, through: TimeIdx) -> f64 {
        self.measure
            .atoms()
            .iter()
            .zip(&self.weights)
            .filter(|(a, _)| a.key.time_idx <= through)
            .map(|(a, w)| w * a.mass)
            .sum()
    }
}

/// Compensate the weighted jump process `F·counting` along one path. Returns
/// the forward part (weights `G` on the forward compensator, conditioned on the
/// pre-event information joined with the factorized joint-event conditioning)
/// and the backward part (`H` on the backward compensator). When `F` is itself
/// measurable for the conditioning information the weights coincide with `F`.
pub fn compensate_jump_process(
    session: &Session<'_>,
    path: &PathRecord,
    integrand: &dyn JumpIntegrand,
) -> Result<(WeightedAtoms, WeightedAtoms), MeasureError> {
    let model = session.model();
    let forward = forward_compensator_atoms(session, path);
    let backward = backward_compensator_atoms(session, path);

    let register = |key: &AtomKey| -> Result<Var, MeasureError> {
        let mut values = Vec::with_capacity(model.paths().len());
        for q in model.paths() {
            values.push(integrand.value(q, key).ok_or_else(|| {
                MeasureError::MissingIntegrand {
                    key: key.display(model.marks()),
                }
            })?);
        }
        Ok(session.register_values(values))
    };

    let weigh = |atoms: &MeasureAtoms, side: Side| -> Result<Vec<f64>, MeasureError> {
        let mut weights = Vec::with_capacity(atoms.atoms().len());
        for atom in atoms.atoms() {
            let key = &atom.key;
            let state = model.state(path.state_at(key.time_idx, side));
            let var = register(key)?;
            let event = ConditioningEvent::new(vec![
                Condition::ActiveEq {
                    time_idx: key.time_idx,
                    side,
                    set: state.active.clone(),
                },
                session.reduced_marks_condition(state, &key.index_set),
                Condition::JointEvent {
                    time_idx: key.time_idx,
                    set: key.index_set.clone(),
                    marks: key.marks.clone(),
                },
            ]);
            weights.push(session.cond(var, &event));
        }
        Ok(weights)
    };

    let forward_weights = weigh(&forward, Side::Left)?;
    let backward_weights = weigh(&backward, Side::Right)?;
    Ok((
        WeightedAtoms {
            measure: forward,
            weights: forward_weights,
        },
        WeightedAtoms {
            measure: backward,
            weights: backward_weights,
        },
    ))
}

/// A deterministic time measure: an optional Lebesgue part, discretized to the
/// grid with trapezoid point masses, plus unit Dirac masses at grid times.
#[derive(Clone, Debug, Default)]
pub struct TimeMeasure {
    pub lebesgue: bool,
    pub dirac_idx: Vec<TimeIdx>,
}

impl TimeMeasure {
    pub fn lebesgue() -> Self {
        TimeMeasure {
            lebesgue: true,
            dirac_idx: Vec::new(),
        }
    }

    pub fn diracs(model: &CompiledModel, times: &[f64]) -> Result<Self, MeasureError> {
        let mut dirac_idx = Vec::new();
        for &t in times {
            let k = model
                .model()
                .time_index(t)
                .map_err(|_| MeasureError::DiracOffGrid { t })?;
            dirac_idx.push(k);
        }
        dirac_idx.sort_unstable();
        dirac_idx.dedup();
        Ok(TimeMeasure {
            lebesgue: false,
            dirac_idx,
        })
    }

    pub fn with_lebesgue(mut self) -> Self {
        self.lebesgue = true;
        self
    }

    /// Point mass at grid index `k`: half of each adjacent grid gap plus any
    /// Dirac contribution.
    pub fn weight(&self, grid: &[f64], k: TimeIdx) -> f64 {
        let mut w = 0.0;
        if self.lebesgue {
            if k > 0 {
                w += (grid[k] - grid[k - 1]) / 2.0;
            }
            if k + 1 < grid.len() {
                w += (grid[k + 1] - grid[k]) / 2.0;
            }
        }
        if self.dirac_idx.contains(&k) {
            w += 1.0;
        }
        w
    }
}

/// Occupation-type process `X_t = sum_M 1(state = M) h(M, s) gamma(ds)` on the
/// grid. The `side` fixes which endpoint state weights an accrual: `Right`
/// evaluates states and `h` at the atom time itself (the backward-friendly
/// version), `Left` uses the pre-event state (the forward-friendly version).
pub struct SojournSpec<'h> {
    pub h: &'h dyn Fn(&crate::model::InformationState, f64, &PathRecord) -> f64,
    pub gamma: TimeMeasure,
}

/// Per-path values `X_{t_k}` of the discretized sojourn process.
pub fn sojourn_process(
    session: &Session<'_>,
    spec: &SojournSpec<'_>,
    side: Side,
) -> Vec<Vec<f64>> {
    let model = session.model();
    let grid = model.grid();
    model
        .paths()
        .iter()
        .map(|path| {
            let mut values = Vec::with_capacity(grid.len());
            let mut acc = 0.0;
            for k in 0..grid.len() {
                let state_side = if k == 0 { Side::Right } else { side };
                let state = model.state(path.state_at(k, state_side));
                acc += spec.gamma.weight(grid, k) * (spec.h)(state, grid[k], path);
                values.push(acc);
            }
            values
        })
        .collect()
}

/// Drift ledger of the sojourn process: per path, the per-step conditional
/// accruals `weight_k · E[h(M_k, t_k) | information at the side endpoint]`.
/// For `Side::Right` this is the backward drift, for `Side::Left` the forward
/// one. When `h` is measurable for the conditioning information the ledger
/// reproduces the process increments exactly.
pub fn sojourn_drift(
    session: &Session<'_>,
    spec: &SojournSpec<'_>,
    side: Side,
) -> Vec<Vec<f64>> {
    let model = session.model();
    let grid = model.grid();
    let steps = model.steps();
    let mut drift = vec![Vec::with_capacity(steps); model.paths().len()];
    // conditional values are functions of (state, k); registration deduped there
    let mut var_cache: std::collections::HashMap<(crate::model::StateId, TimeIdx), Var> =
        std::collections::HashMap::new();
    for path in model.paths() {
        for k in 1..=steps {
            let state_id = path.state_at(k, side);
            let var = *var_cache.entry((state_id, k)).or_insert_with(|| {
                let state = model.state(state_id).clone();
                let t = grid[k];
                session.register(move |q: &PathRecord| (spec.h)(&state, t, q))
            });
            let cell = ConditioningEvent::state_cell(model, state_id, k, side);
            let expected = session.cond(var, &cell);
            drift[path.id].push(spec.gamma.weight(grid, k) * expected);
        }
    }
    drift
}

/// Backward compensator increments of an arbitrary grid process: per path and
/// step, `E[X_{t_k} - X_{t_{k-1}} | G_{t_k}]`. On a finite grid this always
/// exists and its increments are measurable at the right endpoint.
pub fn backward_compensator_increments(
    session: &Session<'_>,
    process: &[Var],
) -> Vec<Vec<f64>> {
    generic_compensator_increments(session, process, Side::Right)
}

/// Forward compensator increments: `E[X_{t_k} - X_{t_{k-1}} | G_{t_{k-1}}]`.
pub fn forward_compensator_increments(
    session: &Session<'_>,
    process: &[Var],
) -> Vec<Vec<f64>> {
    generic_compensator_increments(session, process, Side::Left)
}

fn generic_compensator_increments(
    session: &Session<'_>,
    process: &[Var],
    side: Side,
) -> Vec<Vec<f64>> {
    let model = session.model();
    let steps = model.steps();
    assert_eq!(process.len(), steps + 1);
    let diffs: Vec<Var> = (1..=steps)
        .map(|k| {
            let hi = session.values(process[k]);
            let lo = session.values(process[k - 1]);
            session.register_values(hi.iter().zip(lo.iter()).map(|(a, b)| a - b).collect())
        })
        .collect();
    model
        .paths()
        .iter()
        .map(|path| {
            (1..=steps)
                .map(|k| {
                    let (cell_time, cell_side) = match side {
                        Side::Right => (k, Side::Right),
                        Side::Left => (k - 1, Side::Right),
                    };
                    let cell = ConditioningEvent::state_cell(
                        model,
                        path.state_at(cell_time, cell_side),
                        cell_time,
                        cell_side,
                    );
                    session.cond(diffs[k - 1], &cell)
                })
                .collect()
        })
        .collect()
}

/// CSV dump with columns `time,index_set,marks,mass,kind`.
pub fn atoms_to_csv(model: &CompiledModel, measures: &[(&MeasureAtoms, &str)]) -> String {
    let mut out = String::from("time,index_set,marks,mass,kind\n");
    for (atoms, label) in measures {
        for atom in atoms.atoms() {
            let set = atom
                .key
                .index_set
                .iter()
                .map(u8::to_string)
                .collect::<Vec<_>>()
                .join("+");
            let marks = atom
                .key
                .marks
                .iter()
                .map(|&m| model.marks()[m as usize].clone())
                .collect::<Vec<_>>()
                .join("+");
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                model.grid()[atom.key.time_idx],
                set,
                marks,
                atom.mass,
                label
            ));
        }
    }
    out
}
