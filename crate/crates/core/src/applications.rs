//! Three worked models on top of the engine: prospective reserving with data
//! deletion, the error of Markovian approximations, and location prediction
//! under auto-delete retention limits.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::{Condition, ConditioningEvent, Session, Var};
use crate::measures::{
    counting_atoms, forward_compensator_atoms, AtomKey,
};
use crate::model::{
    builder::TableBuilder, CompiledModel, CompositeEvent, Elementary, MarkId, ModelError,
    PathIdx, PathRecord, ScenarioModel, Side, TimeIdx,
};
use crate::representation::{
    integrand_value, keys_at, verify_representation_process_with_drift, DriftSide, ReprError,
    RepresentationReport,
};

/// Residual tolerance for the application-level ledgers.
pub const APP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("horizon {t} is not a grid time")]
    HorizonOffGrid { t: f64 },
    #[error("rate vector has length {got}, grid has {want} points")]
    RateLength { got: usize, want: usize },
    #[error("interest intensity must be non-negative, found {value} at grid point {idx}")]
    NegativeInterest { idx: usize, value: f64 },
    #[error("path {path}: the death piece is deleted, its information must persist")]
    DeathPieceDeleted { path: PathIdx },
    #[error("death mark {mark:?} is used at two different death times")]
    AmbiguousDeathMark { mark: String },
    #[error("path {path}: not a state-jump structure: {reason}")]
    NotStateJump { path: PathIdx, reason: String },
    #[error("path {path}: not a retention structure: {reason}")]
    NotRetention { path: PathIdx, reason: String },
    #[error("retention and lag must be positive and within the horizon")]
    BadRetention,
    #[error("walk requires {want} locations, got {got} rows")]
    KernelShape { got: usize, want: usize },
    #[error("walk distribution sums to {sum}, not 1")]
    KernelMass { sum: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

// ---------------------------------------------------------------------------
// Reserving with deletions
// ---------------------------------------------------------------------------

/// Contract data sampled on the model grid. Piece 1 is the death piece: it is
/// never deleted and its mark must identify the death time, so benefit
/// increments are observable.
#[derive(Clone, Debug)]
pub struct InsuranceContract {
    /// Survival benefit rate `a(t_k)` per grid point.
    pub survival_rate: Vec<f64>,
    /// Death benefit `b(t_k)` paid upon death at `t_k`.
    pub death_benefit: Vec<f64>,
    /// Interest intensity per grid point, non-negative.
    pub interest: Vec<f64>,
    /// Contract horizon, a grid time.
    pub horizon: f64,
}

impl InsuranceContract {
    pub fn from_fns(
        grid: &[f64],
        a: impl Fn(f64) -> f64,
        b: impl Fn(f64) -> f64,
        phi: impl Fn(f64) -> f64,
        horizon: f64,
    ) -> Self {
        InsuranceContract {
            survival_rate: grid.iter().map(|&t| a(t)).collect(),
            death_benefit: grid.iter().map(|&t| b(t)).collect(),
            interest: grid.iter().map(|&t| phi(t)).collect(),
            horizon,
        }
    }

    fn validate(&self, compiled: &CompiledModel) -> Result<TimeIdx, AppError> {
        let grid = compiled.grid();
        let horizon_idx = compiled
            .model()
            .time_index(self.horizon)
            .map_err(|_| AppError::HorizonOffGrid { t: self.horizon })?;
        for rates in [&self.survival_rate, &self.death_benefit, &self.interest] {
            if rates.len() != grid.len() {
                return Err(AppError::RateLength {
                    got: rates.len(),
                    want: grid.len(),
                });
            }
        }
        if let Some(idx) = self.interest.iter().position(|&v| v < 0.0) {
            return Err(AppError::NegativeInterest {
                idx,
                value: self.interest[idx],
            });
        }
        // the death piece must persist and its mark must pin the death time
        let mut mark_to_time: BTreeMap<MarkId, TimeIdx> = BTreeMap::new();
        for path in compiled.paths() {
            if path.deletion_idx(1).is_some() {
                return Err(AppError::DeathPieceDeleted { path: path.id });
            }
            if let (Some(k), Some(mark)) = (path.innovation_idx(1), path.mark(1)) {
                match mark_to_time.get(&mark) {
                    Some(&existing) if existing != k => {
                        return Err(AppError::AmbiguousDeathMark {
                            mark: compiled.marks()[mark as usize].clone(),
                        })
                    }
                    _ => {
                        mark_to_time.insert(mark, k);
                    }
                }
            }
        }
        Ok(horizon_idx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ThieleRow {
    pub time_idx: TimeIdx,
    pub t: f64,
    /// Prospective reserve `E[X_t | G_t]`.
    pub reserve: f64,
    /// Realized benefit increment paid at `t`.
    pub benefit_increment: f64,
    /// Interest drift of the step, `(1 - e^{-w}) reserve - e^{-w} benefit`.
    pub interest_drift: f64,
    pub forward_increment: f64,
    pub backward_increment: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SumAtRiskRow {
    pub path_id: PathIdx,
    pub key: AtomKey,
    pub value: f64,
}

#[derive(Debug)]
pub struct ThieleOutput {
    /// Ledger rows per path, one per grid index `0..=horizon`.
    pub rows: Vec<Vec<ThieleRow>>,
    /// Forward integrand values on every reachable atom up to the horizon.
    pub sum_at_risk: Vec<SumAtRiskRow>,
    pub reports: Vec<RepresentationReport>,
    pub max_residual: f64,
}

/// Prospective reserve of the contract along every path, with the per-step
/// decomposition `ΔV = -e^{-w} ΔB + (1 - e^{-w}) V + forward + backward`.
/// The discounted-liability process is built backwards with exact per-step
/// discount factors, so the terminal reserve is zero identically.
pub fn thiele_reserve(
    session: &Session<'_>,
    contract: &InsuranceContract,
) -> Result<ThieleOutput, AppError> {
    let compiled = session.model();
    let grid = compiled.grid();
    let steps = compiled.steps();
    let horizon_idx = contract.validate(compiled)?;

    // per-step trapezoid weights for annuity and interest
    let annuity: Vec<f64> = (1..=steps)
        .map(|k| {
            (contract.survival_rate[k - 1] + contract.survival_rate[k]) / 2.0
                * (grid[k] - grid[k - 1])
        })
        .collect();
    let discount: Vec<f64> = (1..=steps)
        .map(|k| {
            let w = (contract.interest[k - 1] + contract.interest[k]) / 2.0
                * (grid[k] - grid[k - 1]);
            (-w).exp()
        })
        .collect();

    // realized benefit increments: annuity accrues while alive through the
    // interval, the death benefit is paid at the death time
    let benefit = |path: &PathRecord, k: TimeIdx| -> f64 {
        if k == 0 || k > horizon_idx {
            return 0.0;
        }
        let death = path.innovation_idx(1);
        let alive_through = death.is_none_or(|d| d >= k);
        let mut db = 0.0;
        if alive_through {
            db += annuity[k - 1];
        }
        if death == Some(k) {
            db += contract.death_benefit[k];
        }
        db
    };

    // discounted outstanding liabilities, built backwards per path
    let liabilities: Vec<Vec<f64>> = compiled
        .paths()
        .iter()
        .map(|path| {
            let mut values = vec![0.0; steps + 1];
            for k in (1..=horizon_idx).rev() {
                values[k - 1] = discount[k - 1] * (benefit(path, k) + values[k]);
            }
            values
        })
        .collect();
    let process: Vec<Var> = (0..=steps)
        .map(|k| session.register_values(liabilities.iter().map(|v| v[k]).collect()))
        .collect();

    // reserve per (path, time) and the Thiele drift
    let mut drift = vec![vec![0.0; steps]; compiled.paths().len()];
    let mut reserves = vec![vec![0.0; steps + 1]; compiled.paths().len()];
    for path in compiled.paths() {
        for k in 0..=steps {
            reserves[path.id][k] =
                session.cell_value(process[k], path.states[k], k, Side::Right);
        }
        for k in 1..=horizon_idx {
            drift[path.id][k - 1] = (1.0 - discount[k - 1]) * reserves[path.id][k]
                - discount[k - 1] * benefit(path, k);
        }
    }

    let reports =
        verify_representation_process_with_drift(session, &process, DriftSide::Backward, &drift)?;
    let max_residual = crate::representation::max_abs_residual(&reports);

    let mut rows = Vec::with_capacity(compiled.paths().len());
    let mut sum_at_risk = Vec::new();
    for (path, report) in compiled.paths().iter().zip(&reports) {
        let mut path_rows = Vec::with_capacity(horizon_idx + 1);
        for k in 0..=horizon_idx {
            let r = &report.rows[k];
            let prev = if k == 0 { r } else { &report.rows[k - 1] };
            path_rows.push(ThieleRow {
                time_idx: k,
                t: grid[k],
                reserve: reserves[path.id][k],
                benefit_increment: benefit(path, k),
                interest_drift: if k == 0 { 0.0 } else { drift[path.id][k - 1] },
                forward_increment: r.forward_integral - if k == 0 { 0.0 } else { prev.forward_integral },
                backward_increment: r.backward_integral
                    - if k == 0 { 0.0 } else { prev.backward_integral },
                residual: r.residual,
            });
        }
        rows.push(path_rows);

        // classical sum at risk: the forward integrand of the frozen liability
        let mu = counting_atoms(path);
        let nu = forward_compensator_atoms(session, path);
        for k in 1..=horizon_idx {
            for key in keys_at(&[&mu, &nu], k) {
                let value = integrand_value(session, path, process[k - 1], &key, Side::Left);
                sum_at_risk.push(SumAtRiskRow {
                    path_id: path.id,
                    key,
                    value,
                });
            }
        }
    }

    Ok(ThieleOutput {
        rows,
        sum_at_risk,
        reports,
        max_residual,
    })
}

// ---------------------------------------------------------------------------
// Markovian approximation gap
// ---------------------------------------------------------------------------

/// Target functional `f(Y_T, N_T)` of the terminal state and jump count, with
/// `None` standing for "no jump has happened yet".
#[derive(Clone, Debug)]
pub struct MarkovApproxSpec {
    pub horizon: f64,
    pub f: BTreeMap<(Option<String>, usize), f64>,
    pub default: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MarkovRow {
    pub path_id: PathIdx,
    pub time_idx: TimeIdx,
    pub t: f64,
    /// `E[f | full history]`.
    pub full_history: f64,
    /// `E[f | (Y_t, N_t)]`, i.e. the state-only projection.
    pub state_only: f64,
    pub gap: f64,
    /// Backward-martingale increment of the state-only projection.
    pub backward_increment: f64,
    /// Running sum of absolute backward increments (the averaging effect).
    pub backward_running_abs: f64,
}

#[derive(Debug)]
pub struct MarkovOutput {
    pub rows: Vec<MarkovRow>,
    pub max_gap: f64,
    pub reports: Vec<RepresentationReport>,
}

/// Validate the state-jump structure: pieces are innovated in order, each jump
/// deletes the previous piece at the same instant, so the observable state is
/// exactly the pair (current mark, jump count).
fn validate_state_jump(compiled: &CompiledModel) -> Result<(), AppError> {
    for path in compiled.paths() {
        let pieces = compiled.model().max_pieces();
        let mut previous: Option<(u8, TimeIdx)> = None;
        for piece in 1..=pieces {
            match path.innovation_idx(piece) {
                Some(idx) => {
                    if let Some((_, prev_idx)) = previous {
                        if prev_idx >= idx {
                            return Err(AppError::NotStateJump {
                                path: path.id,
                                reason: format!("piece {piece} does not jump after its predecessor"),
                            });
                        }
                    } else if piece > 1 {
                        // a successor piece exists without its predecessor
                        return Err(AppError::NotStateJump {
                            path: path.id,
                            reason: format!("piece {piece} innovated before piece {}", piece - 1),
                        });
                    }
                    if piece > 1 {
                        let expected = path.deletion_idx(piece - 1);
                        if expected != Some(idx) {
                            return Err(AppError::NotStateJump {
                                path: path.id,
                                reason: format!(
                                    "piece {} must be deleted exactly when piece {piece} arrives",
                                    piece - 1
                                ),
                            });
                        }
                    }
                    previous = Some((piece, idx));
                }
                None => {
                    if path.deletion_idx(piece).is_some() {
                        return Err(AppError::NotStateJump {
                            path: path.id,
                            reason: format!("piece {piece} deleted but never innovated"),
                        });
                    }
                }
            }
        }
        // the current piece stays observable until the next jump
        if let Some((piece, _)) = previous {
            if path.deletion_idx(piece).is_some() {
                return Err(AppError::NotStateJump {
                    path: path.id,
                    reason: format!("terminal piece {piece} must stay active"),
                });
            }
        }
    }
    Ok(())
}

/// Compare the full-history projection of `f(Y_T, N_T)` with the state-only
/// projection, and decompose the latter. On Markov models the gap vanishes;
/// otherwise the gap measures what the state pair forgets.
pub fn markov_gap(
    session: &Session<'_>,
    spec: &MarkovApproxSpec,
) -> Result<MarkovOutput, AppError> {
    let compiled = session.model();
    validate_state_jump(compiled)?;
    let horizon_idx = compiled
        .model()
        .time_index(spec.horizon)
        .map_err(|_| AppError::HorizonOffGrid { t: spec.horizon })?;

    let terminal = |path: &PathRecord| -> (Option<MarkId>, usize) {
        let mut count = 0usize;
        let mut current: Option<MarkId> = None;
        for piece in 1..=compiled.model().max_pieces() {
            match path.innovation_idx(piece) {
                Some(idx) if idx <= horizon_idx => {
                    count += 1;
                    current = path.mark(piece);
                }
                _ => break,
            }
        }
        (current, count)
    };
    let xi = session.register(|path| {
        let (mark, count) = terminal(path);
        let name = mark.map(|m| compiled.marks()[m as usize].clone());
        spec.f.get(&(name, count)).copied().unwrap_or(spec.default)
    });

    let reports = crate::representation::verify_representation_xi(session, xi);
    let mut rows = Vec::new();
    let mut max_gap: f64 = 0.0;
    for (path, report) in compiled.paths().iter().zip(&reports) {
        let mut running = 0.0;
        for k in 0..=compiled.steps() {
            let node_cell = ConditioningEvent::new(vec![Condition::HistoryNode {
                node: path.nodes[k],
            }]);
            let full_history = session.cond(xi, &node_cell);
            let state_only = session.cell_value(xi, path.states[k], k, Side::Right);
            let gap = full_history - state_only;
            max_gap = max_gap.max(gap.abs());
            let backward_increment = if k == 0 {
                0.0
            } else {
                report.rows[k].backward_integral - report.rows[k - 1].backward_integral
            };
            running += backward_increment.abs();
            rows.push(MarkovRow {
                path_id: path.id,
                time_idx: k,
                t: compiled.grid()[k],
                full_history,
                state_only,
                gap,
                backward_increment,
                backward_running_abs: running,
            });
        }
    }
    Ok(MarkovOutput {
        rows,
        max_gap,
        reports,
    })
}

/// Build a state-jump model from a per-node rule. The rule sees the current
/// mark (if any), the jump count and the time index of the last jump, and
/// returns `(next mark or stay, probability)` pairs; a jump innovates the next
/// piece and deletes the previous one simultaneously.
pub fn state_jump_model(
    grid: Vec<f64>,
    marks: Vec<String>,
    rule: impl Fn(Option<MarkId>, usize, TimeIdx, TimeIdx) -> Vec<(Option<MarkId>, f64)>,
) -> Result<ScenarioModel, AppError> {
    let steps = grid.len() - 1;
    let max_pieces = u8::try_from(steps).map_err(|_| AppError::BadRetention)?;
    struct NodeState {
        history: Vec<CompositeEvent>,
        mark: Option<MarkId>,
        count: usize,
        last_jump: TimeIdx,
    }
    let mut builder = TableBuilder::new();
    let mut stack = vec![NodeState {
        history: Vec::new(),
        mark: None,
        count: 0,
        last_jump: 0,
    }];
    while let Some(node) = stack.pop() {
        let step = node.history.len();
        if step == steps {
            continue;
        }
        let mut dist = Vec::new();
        for (target, prob) in rule(node.mark, node.count, node.last_jump, step) {
            if prob <= 0.0 {
                continue;
            }
            match target {
                None => {
                    dist.push((CompositeEvent::empty(), prob));
                    stack.push(NodeState {
                        history: {
                            let mut h = node.history.clone();
                            h.push(CompositeEvent::empty());
                            h
                        },
                        mark: node.mark,
                        count: node.count,
                        last_jump: node.last_jump,
                    });
                }
                Some(mark) => {
                    let piece = node.count as u8 + 1;
                    let mut elems = vec![Elementary::Innovate { piece, mark }];
                    if node.count > 0 {
                        elems.push(Elementary::Delete {
                            piece: node.count as u8,
                        });
                    }
                    let event = CompositeEvent::new(elems)?;
                    stack.push(NodeState {
                        history: {
                            let mut h = node.history.clone();
                            h.push(event.clone());
                            h
                        },
                        mark: Some(mark),
                        count: node.count + 1,
                        last_jump: step + 1,
                    });
                    dist.push((event, prob));
                }
            }
        }
        builder.node(node.history, dist);
    }
    Ok(ScenarioModel::new(grid, marks, max_pieces, builder.build())?)
}

impl From<std::convert::Infallible> for AppError {
    fn from(value: std::convert::Infallible) -> Self {
        match value {}
    }
}

// ---------------------------------------------------------------------------
// Location prediction with auto-delete
// ---------------------------------------------------------------------------

/// Retention model parameters: measurements expire after `retention_steps`
/// grid steps, the predictor looks `lag_steps` ahead into the target `area`.
#[derive(Clone, Debug)]
pub struct LocationSpec {
    pub retention_steps: usize,
    pub lag_steps: usize,
    pub area: Vec<MarkId>,
}

/// Random-walk generator of measurements: `kernel[y][y']` moves the device,
/// `initial` places it at the first measurement, and a measurement is taken at
/// each grid step with probability `measure_prob`. The device only moves when
/// it is measured, so its position is always the mark of the latest
/// measurement; sparse measurements are what make expired data costly.
#[derive(Clone, Debug)]
pub struct WalkSpec {
    pub kernel: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub measure_prob: f64,
}

/// Build the measurement model: measurement `j` innovates piece `j` with the
/// current location and is deleted `retention_steps` later, whether or not a
/// new measurement arrives.
pub fn location_model(
    grid: Vec<f64>,
    locations: Vec<String>,
    walk: &WalkSpec,
    retention_steps: usize,
) -> Result<ScenarioModel, AppError> {
    let steps = grid.len() - 1;
    let count = locations.len();
    if walk.initial.len() != count || walk.kernel.len() != count {
        return Err(AppError::KernelShape {
            got: walk.kernel.len().max(walk.initial.len()),
            want: count,
        });
    }
    for row in &walk.kernel {
        if row.len() != count {
            return Err(AppError::KernelShape {
                got: row.len(),
                want: count,
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > crate::model::PROB_TOL {
            return Err(AppError::KernelMass { sum });
        }
    }
    let initial_sum: f64 = walk.initial.iter().sum();
    if (initial_sum - 1.0).abs() > crate::model::PROB_TOL {
        return Err(AppError::KernelMass { sum: initial_sum });
    }
    if retention_steps == 0 || steps == 0 || !(walk.measure_prob > 0.0 && walk.measure_prob <= 1.0)
    {
        return Err(AppError::BadRetention);
    }
    let max_pieces = u8::try_from(steps).map_err(|_| AppError::BadRetention)?;

    #[derive(Clone)]
    struct NodeState {
        history: Vec<CompositeEvent>,
        location: Option<MarkId>,
        count: u8,
        /// measurement pieces still active, with their innovation step
        active: Vec<(u8, usize)>,
    }
    let mut builder = TableBuilder::new();
    let mut stack = vec![NodeState {
        history: Vec::new(),
        location: None,
        count: 0,
        active: Vec::new(),
    }];
    while let Some(node) = stack.pop() {
        let step = node.history.len();
        if step == steps {
            continue;
        }
        let expiring: Vec<u8> = node
            .active
            .iter()
            .filter(|(_, innovated)| innovated + retention_steps == step + 1)
            .map(|(piece, _)| *piece)
            .collect();
        let mut dist = Vec::new();
        let mut push = |elems: Vec<Elementary>,
                        prob: f64,
                        location: Option<MarkId>,
                        measured: Option<(u8, usize)>,
                        stack: &mut Vec<NodeState>|
         -> Result<(), AppError> {
            if prob <= 0.0 {
                return Ok(());
            }
            let event = CompositeEvent::new(elems)?;
            let mut child = node.clone();
            child.history.push(event.clone());
            child.location = location;
            child.active.retain(|(p, _)| !expiring.contains(p));
            if let Some(measurement) = measured {
                child.count += 1;
                child.active.push(measurement);
            }
            stack.push(child);
            dist.push((event, prob));
            Ok(())
        };
        let expiry_elems: Vec<Elementary> = expiring
            .iter()
            .map(|&piece| Elementary::Delete { piece })
            .collect();
        // the first fix is certain, later measurements arrive with measure_prob;
        // expiries happen either way
        let measure_prob = if step == 0 { 1.0 } else { walk.measure_prob };
        push(
            expiry_elems.clone(),
            1.0 - measure_prob,
            node.location,
            None,
            &mut stack,
        )?;
        // measurement: the device moves and the new position is recorded
        let weights: Vec<f64> = match node.location {
            None => walk.initial.clone(),
            Some(y) => walk.kernel[y as usize].clone(),
        };
        let piece = node.count + 1;
        for (target, &prob) in weights.iter().enumerate() {
            let mark = target as MarkId;
            let mut elems = expiry_elems.clone();
            elems.push(Elementary::Innovate { piece, mark });
            push(
                elems,
                measure_prob * prob,
                Some(mark),
                Some((piece, step + 1)),
                &mut stack,
            )?;
        }
        builder.node(node.history, dist);
    }
    Ok(ScenarioModel::new(
        grid,
        locations,
        max_pieces,
        builder.build(),
    )?)
}

/// Validate the retention structure `deletion = innovation + retention_steps`
/// with strictly increasing measurement times.
fn validate_retention(compiled: &CompiledModel, retention_steps: usize) -> Result<(), AppError> {
    let steps = compiled.steps();
    for path in compiled.paths() {
        let mut last = None;
        for piece in 1..=compiled.model().max_pieces() {
            if let Some(idx) = path.innovation_idx(piece) {
                if last.is_some_and(|l| l >= idx) {
                    return Err(AppError::NotRetention {
                        path: path.id,
                        reason: format!("measurement {piece} does not arrive strictly later"),
                    });
                }
                last = Some(idx);
                let expected = idx + retention_steps;
                let deletion = path.deletion_idx(piece);
                if expected <= steps {
                    if deletion != Some(expected) {
                        return Err(AppError::NotRetention {
                            path: path.id,
                            reason: format!(
                                "piece {piece} must be deleted {retention_steps} steps after arrival"
                            ),
                        });
                    }
                } else if deletion.is_some() {
                    return Err(AppError::NotRetention {
                        path: path.id,
                        reason: format!("piece {piece} deleted beyond the horizon"),
                    });
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct LocationRow {
    pub path_id: PathIdx,
    pub time_idx: TimeIdx,
    pub t: f64,
    /// `P(location in area at t + lag | information at t)`.
    pub predictor: f64,
    pub drift_increment: f64,
    pub forward_increment: f64,
    pub backward_increment: f64,
    pub residual: f64,
}

#[derive(Debug)]
pub struct LocationOutput {
    pub rows: Vec<LocationRow>,
    pub max_residual: f64,
    /// Expected total absolute backward increment (the averaging effect).
    pub mean_total_abs_backward: f64,
    /// Largest absolute backward increment over paths and times.
    pub max_abs_backward: f64,
    pub reports: Vec<RepresentationReport>,
}

/// Dynamic predictor of the event "the device is in the area `lag` steps
/// ahead", decomposed with the forward drift.
pub fn location_predictor(
    session: &Session<'_>,
    spec: &LocationSpec,
) -> Result<LocationOutput, AppError> {
    let compiled = session.model();
    let steps = compiled.steps();
    if spec.lag_steps == 0 || spec.lag_steps >= steps {
        return Err(AppError::BadRetention);
    }
    validate_retention(compiled, spec.retention_steps)?;
    let last_predictable = steps - spec.lag_steps;

    // location at a grid index: mark of the latest measurement at or before it
    let location_at = |path: &PathRecord, k: TimeIdx| -> Option<MarkId> {
        (1..=compiled.model().max_pieces())
            .filter(|&p| path.innovation_idx(p).is_some_and(|i| i <= k))
            .max_by_key(|&p| path.innovation_idx(p).unwrap())
            .and_then(|p| path.mark(p))
    };
    let process: Vec<Var> = (0..=steps)
        .map(|k| {
            let query = k.min(last_predictable) + spec.lag_steps;
            session.register(move |path: &PathRecord| {
                location_at(path, query)
                    .is_some_and(|m| spec.area.contains(&m)) as u8 as f64
            })
        })
        .collect();

    let reports = crate::representation::verify_representation_process(
        session,
        &process,
        DriftSide::Forward,
    )?;
    let mut rows = Vec::new();
    let mut mean_total = 0.0;
    let mut max_abs: f64 = 0.0;
    for (path, report) in compiled.paths().iter().zip(&reports) {
        let mut total_abs = 0.0;
        for k in 0..=last_predictable {
            let r = &report.rows[k];
            let prev = if k == 0 { r } else { &report.rows[k - 1] };
            let backward_increment =
                r.backward_integral - if k == 0 { 0.0 } else { prev.backward_integral };
            total_abs += backward_increment.abs();
            max_abs = max_abs.max(backward_increment.abs());
            rows.push(LocationRow {
                path_id: path.id,
                time_idx: k,
                t: compiled.grid()[k],
                predictor: session.cell_value(process[k], path.states[k], k, Side::Right),
                drift_increment: r.drift - if k == 0 { 0.0 } else { prev.drift },
                forward_increment: r.forward_integral
                    - if k == 0 { 0.0 } else { prev.forward_integral },
                backward_increment,
                residual: r.residual,
            });
        }
        mean_total += path.probability * total_abs;
    }
    let max_residual = reports
        .iter()
        .flat_map(|r| r.rows.iter().take(last_predictable + 1))
        .map(|r| r.residual.abs())
        .fold(0.0, f64::max);
    Ok(LocationOutput {
        rows,
        max_residual,
        mean_total_abs_backward: mean_total,
        max_abs_backward: max_abs,
        reports,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub retention_steps: usize,
    pub max_abs_backward: f64,
    pub mean_total_abs_backward: f64,
    pub max_residual: f64,
}

/// Re-run the predictor over a range of retention limits on the same walk.
pub fn location_sweep(
    grid: Vec<f64>,
    locations: Vec<String>,
    walk: &WalkSpec,
    lag_steps: usize,
    area: Vec<MarkId>,
    retentions: &[usize],
) -> Result<Vec<SweepRow>, AppError> {
    let mut out = Vec::with_capacity(retentions.len());
    for &retention_steps in retentions {
        let compiled =
            location_model(grid.clone(), locations.clone(), walk, retention_steps)?.compile()?;
        let session = Session::new(&compiled);
        let result = location_predictor(
            &session,
            &LocationSpec {
                retention_steps,
                lag_steps,
                area: area.clone(),
            },
        )?;
        out.push(SweepRow {
            retention_steps,
            max_abs_backward: result.max_abs_backward,
            mean_total_abs_backward: result.mean_total_abs_backward,
            max_residual: result.max_residual,
        });
    }
    Ok(out)
}

/// Structural check that a longer retention refines the information: paths are
/// matched by their measurement trajectory, and any two paths sharing a state
/// in the longer-retention model must share it in the shorter one.
pub fn retention_refines(
    shorter: &CompiledModel,
    longer: &CompiledModel,
) -> bool {
    // the measurement trajectory: per step, the innovation made there (if any);
    // identical across retention variants of the same walk
    let trajectory = |_: &CompiledModel, path: &PathRecord| -> Vec<Option<(u8, MarkId)>> {
        path.events
            .iter()
            .map(|event| {
                event.events().iter().find_map(|elem| match *elem {
                    Elementary::Innovate { piece, mark } => Some((piece, mark)),
                    Elementary::Delete { .. } => None,
                })
            })
            .collect()
    };
    let mut short_by_traj: BTreeMap<Vec<Option<(u8, MarkId)>>, &PathRecord> = BTreeMap::new();
    for path in shorter.paths() {
        short_by_traj.insert(trajectory(shorter, path), path);
    }
    let steps = shorter.steps();
    for a in longer.paths() {
        for b in longer.paths() {
            let (sa, sb) = (
                short_by_traj[&trajectory(longer, a)],
                short_by_traj[&trajectory(longer, b)],
            );
            for k in 0..=steps {
                let same_long = longer.state(a.states[k]) == longer.state(b.states[k]);
                let same_short = shorter.state(sa.states[k]) == shorter.state(sb.states[k]);
                if same_long && !same_short {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EXACT_TOL;

    fn time_marks(steps: usize) -> Vec<String> {
        (1..=steps).map(|k| format!("d{k}")).collect()
    }

    /// Pure death model: death at each step with the given hazard.
    fn death_model(steps: usize, hazard: f64) -> ScenarioModel {
        let marks = time_marks(steps);
        let grid: Vec<f64> = (0..=steps).map(|k| k as f64).collect();
        let mut builder = TableBuilder::new();
        let mut stack: Vec<(Vec<CompositeEvent>, bool)> = vec![(Vec::new(), false)];
        while let Some((history, dead)) = stack.pop() {
            let step = history.len();
            if step == steps {
                continue;
            }
            let mut dist = Vec::new();
            if dead {
                dist.push((CompositeEvent::empty(), 1.0));
                let mut h = history.clone();
                h.push(CompositeEvent::empty());
                stack.push((h, true));
            } else {
                let death = CompositeEvent::new(vec![Elementary::Innovate {
                    piece: 1,
                    mark: step as MarkId,
                }])
                .unwrap();
                let mut h1 = history.clone();
                h1.push(death.clone());
                stack.push((h1, true));
                let mut h2 = history.clone();
                h2.push(CompositeEvent::empty());
                stack.push((h2, false));
                dist.push((death, hazard));
                dist.push((CompositeEvent::empty(), 1.0 - hazard));
            }
            builder.node(history, dist);
        }
        ScenarioModel::new(grid, marks, 1, builder.build()).unwrap()
    }

    #[test]
    fn zero_benefits_zero_reserve() {
        let compiled = death_model(3, 0.4).compile().unwrap();
        let session = Session::new(&compiled);
        let contract =
            InsuranceContract::from_fns(compiled.grid(), |_| 0.0, |_| 0.0, |_| 0.05, 3.0);
        let output = thiele_reserve(&session, &contract).unwrap();
        for path_rows in &output.rows {
            for row in path_rows {
                assert_eq!(row.reserve, 0.0);
                assert_eq!(row.residual, 0.0);
            }
        }
    }

    #[test]
    fn pure_endowment_death_cover_matches_enumeration() {
        // phi = 0, b = 1, a = 0: reserve at t equals P(death in (t, T] | alive)
        let compiled = death_model(3, 0.3).compile().unwrap();
        let session = Session::new(&compiled);
        let contract =
            InsuranceContract::from_fns(compiled.grid(), |_| 0.0, |_| 1.0, |_| 0.0, 3.0);
        let output = thiele_reserve(&session, &contract).unwrap();
        assert!(output.max_residual < APP_TOL);
        for (path, rows) in compiled.paths().iter().zip(&output.rows) {
            for row in rows {
                let k = row.time_idx;
                let alive = path.innovation_idx(1).is_none_or(|d| d > k);
                if alive {
                    // oracle: 1 - (1 - hazard)^(T - k) by direct conditioning
                    let expect = 1.0 - (1.0 - 0.3f64).powi((3 - k) as i32);
                    assert!(
                        (row.reserve - expect).abs() < EXACT_TOL,
                        "k={k} reserve={} expect={expect}",
                        row.reserve
                    );
                } else {
                    assert!(row.reserve.abs() < EXACT_TOL);
                }
            }
        }
    }

    #[test]
    fn terminal_reserve_is_zero_exactly() {
        let compiled = death_model(4, 0.25).compile().unwrap();
        let session = Session::new(&compiled);
        let contract = InsuranceContract::from_fns(
            compiled.grid(),
            |t| 0.1 + 0.01 * t,
            |t| 1.0 + 0.2 * t,
            |_| 0.04,
            4.0,
        );
        let output = thiele_reserve(&session, &contract).unwrap();
        assert!(output.max_residual < APP_TOL);
        for rows in &output.rows {
            assert_eq!(rows.last().unwrap().reserve, 0.0);
        }
    }

    /// Death model with one deletable health piece whose value moves the hazard.
    fn health_model() -> ScenarioModel {
        // marks: d1..d3 for death times, plus health outcomes g (good), p (poor)
        let marks = vec![
            "d1".to_string(),
            "d2".to_string(),
            "d3".to_string(),
            "g".to_string(),
            "p".to_string(),
        ];
        let steps = 3;
        let grid: Vec<f64> = (0..=steps).map(|k| k as f64).collect();
        let mut builder = TableBuilder::new();
        #[derive(Clone)]
        struct S {
            history: Vec<CompositeEvent>,
            dead: bool,
            health: Option<MarkId>,
            health_deleted: bool,
        }
        let mut stack = vec![S {
            history: Vec::new(),
            dead: false,
            health: None,
            health_deleted: false,
        }];
        while let Some(node) = stack.pop() {
            let step = node.history.len();
            if step == steps {
                continue;
            }
            let mut dist: Vec<(CompositeEvent, f64)> = Vec::new();
            let mut push = |event: CompositeEvent, prob: f64, next: S, stack: &mut Vec<S>| {
                if prob > 0.0 {
                    let mut child = next;
                    child.history.push(event.clone());
                    stack.push(child);
                    dist.push((event, prob));
                }
            };
            if node.dead {
                push(
                    CompositeEvent::empty(),
                    1.0,
                    S {
                        history: node.history.clone(),
                        ..node.clone()
                    },
                    &mut stack,
                );
            } else if step == 0 {
                // health assessment arrives at t_1: good or poor
                for (mark, prob) in [(3u8, 0.5), (4u8, 0.5)] {
                    push(
                        CompositeEvent::new(vec![Elementary::Innovate { piece: 2, mark }])
                            .unwrap(),
                        prob,
                        S {
                            history: node.history.clone(),
                            dead: false,
                            health: Some(mark),
                            health_deleted: false,
                        },
                        &mut stack,
                    );
                }
            } else {
                let hazard = match node.health {
                    Some(4) => 0.5,
                    _ => 0.2,
                };
                let death = CompositeEvent::new(vec![Elementary::Innovate {
                    piece: 1,
                    mark: step as MarkId,
                }])
                .unwrap();
                push(
                    death,
                    hazard,
                    S {
                        history: node.history.clone(),
                        dead: true,
                        ..node.clone()
                    },
                    &mut stack,
                );
                if !node.health_deleted && step == 1 {
                    // the policyholder erases the health record at t_2
                    let erase =
                        CompositeEvent::new(vec![Elementary::Delete { piece: 2 }]).unwrap();
                    push(
                        erase,
                        1.0 - hazard,
                        S {
                            history: node.history.clone(),
                            dead: false,
                            health: node.health,
                            health_deleted: true,
                        },
                        &mut stack,
                    );
                } else {
                    push(
                        CompositeEvent::empty(),
                        1.0 - hazard,
                        S {
                            history: node.history.clone(),
                            ..node.clone()
                        },
                        &mut stack,
                    );
                }
            }
            builder.node(node.history, dist);
        }
        ScenarioModel::new(grid, marks, 2, builder.build()).unwrap()
    }

    #[test]
    fn health_deletion_moves_the_backward_integral() {
        let compiled = health_model().compile().unwrap();
        let session = Session::new(&compiled);
        let contract =
            InsuranceContract::from_fns(compiled.grid(), |_| 0.0, |_| 1.0, |_| 0.03, 3.0);
        let output = thiele_reserve(&session, &contract).unwrap();
        assert!(output.max_residual < APP_TOL);
        let mut saw_deletion_effect = false;
        for (path, rows) in compiled.paths().iter().zip(&output.rows) {
            for row in rows.iter().skip(1) {
                let deletion_here = path.deletion_idx(2) == Some(row.time_idx);
                if deletion_here && row.backward_increment.abs() > 1e-6 {
                    saw_deletion_effect = true;
                }
                if !deletion_here {
                    // backward increments live only on deletion atoms here:
                    // innovations are fully observed
                    assert!(
                        row.backward_increment.abs() < 1e-6,
                        "path {} t {}: {}",
                        path.id,
                        row.t,
                        row.backward_increment
                    );
                }
            }
        }
        assert!(saw_deletion_effect);
    }

    #[test]
    fn ambiguous_death_marks_are_rejected() {
        // one mark reused for deaths at two different times
        let mut builder = TableBuilder::new();
        let death = |mark| {
            CompositeEvent::new(vec![Elementary::Innovate { piece: 1, mark }]).unwrap()
        };
        builder.node(
            vec![],
            vec![(death(0), 0.5), (CompositeEvent::empty(), 0.5)],
        );
        builder.node(vec![death(0)], vec![(CompositeEvent::empty(), 1.0)]);
        builder.node(vec![CompositeEvent::empty()], vec![(death(0), 1.0)]);
        let model = ScenarioModel::new(
            vec![0.0, 1.0, 2.0],
            vec!["d".to_string()],
            1,
            builder.build(),
        )
        .unwrap();
        let compiled = model.compile().unwrap();
        let session = Session::new(&compiled);
        let contract =
            InsuranceContract::from_fns(compiled.grid(), |_| 0.0, |_| 1.0, |_| 0.0, 2.0);
        assert!(matches!(
            thiele_reserve(&session, &contract),
            Err(AppError::AmbiguousDeathMark { .. })
        ));
    }

    fn markov_chain(steps: usize) -> ScenarioModel {
        // two states, jump probability depends only on the current state
        state_jump_model(
            (0..=steps).map(|k| k as f64).collect(),
            vec!["a".to_string(), "b".to_string()],
            |mark, _count, _last, _step| match mark {
                None => vec![(Some(0), 0.6), (Some(1), 0.4)],
                Some(0) => vec![(None, 0.7), (Some(1), 0.3)],
                Some(1) => vec![(None, 0.5), (Some(0), 0.5)],
                _ => unreachable!(),
            },
        )
        .unwrap()
    }

    fn duration_dependent(steps: usize) -> ScenarioModel {
        // hazard of leaving a state grows with the time spent in it
        state_jump_model(
            (0..=steps).map(|k| k as f64).collect(),
            vec!["a".to_string(), "b".to_string()],
            |mark, _count, last_jump, step| {
                let duration = step + 1 - last_jump;
                let leave = (0.2 * duration as f64).min(0.9);
                match mark {
                    None => vec![(Some(0), 0.5), (Some(1), 0.5)],
                    Some(0) => vec![(None, 1.0 - leave), (Some(1), leave)],
                    Some(1) => vec![(None, 1.0 - leave), (Some(0), leave)],
                    _ => unreachable!(),
                }
            },
        )
        .unwrap()
    }

    fn indicator_spec(horizon: f64) -> MarkovApproxSpec {
        let mut f = BTreeMap::new();
        f.insert((Some("a".to_string()), 1), 1.0);
        f.insert((Some("a".to_string()), 2), 1.0);
        f.insert((Some("a".to_string()), 3), 1.0);
        MarkovApproxSpec {
            horizon,
            f,
            default: 0.0,
        }
    }

    #[test]
    fn markov_model_has_zero_gap() {
        let compiled = markov_chain(3).compile().unwrap();
        let session = Session::new(&compiled);
        let output = markov_gap(&session, &indicator_spec(3.0)).unwrap();
        assert!(output.max_gap < EXACT_TOL, "gap {}", output.max_gap);
    }

    #[test]
    fn duration_dependence_creates_a_gap() {
        let compiled = duration_dependent(4).compile().unwrap();
        let session = Session::new(&compiled);
        let output = markov_gap(&session, &indicator_spec(4.0)).unwrap();
        assert!(output.max_gap > 1e-3, "gap {}", output.max_gap);
        // and the state-only projection still decomposes exactly
        assert!(crate::representation::max_abs_residual(&output.reports) < APP_TOL);
    }

    #[test]
    fn constant_functional_makes_everything_constant() {
        let compiled = markov_chain(3).compile().unwrap();
        let session = Session::new(&compiled);
        let spec = MarkovApproxSpec {
            horizon: 3.0,
            f: BTreeMap::new(),
            default: 2.5,
        };
        let output = markov_gap(&session, &spec).unwrap();
        for row in &output.rows {
            assert_eq!(row.full_history, 2.5);
            assert_eq!(row.state_only, 2.5);
            assert_eq!(row.backward_increment, 0.0);
        }
    }

    #[test]
    fn non_state_jump_model_is_rejected() {
        // plain deletion without a simultaneous innovation
        let mut builder = TableBuilder::new();
        let innovate = CompositeEvent::new(vec![Elementary::Innovate { piece: 1, mark: 0 }])
            .unwrap();
        builder.node(vec![], vec![(innovate.clone(), 1.0)]);
        builder.node(
            vec![innovate],
            vec![(
                CompositeEvent::new(vec![Elementary::Delete { piece: 1 }]).unwrap(),
                1.0,
            )],
        );
        let compiled = ScenarioModel::new(
            vec![0.0, 1.0, 2.0],
            vec!["a".to_string()],
            1,
            builder.build(),
        )
        .unwrap()
        .compile()
        .unwrap();
        let session = Session::new(&compiled);
        assert!(matches!(
            markov_gap(&session, &indicator_spec(2.0)),
            Err(AppError::NotStateJump { .. })
        ));
    }

    fn two_location_walk(measure_prob: f64) -> WalkSpec {
        WalkSpec {
            kernel: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            initial: vec![0.5, 0.5],
            measure_prob,
        }
    }

    #[test]
    fn full_area_predicts_one() {
        let grid: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let locations = vec!["a".to_string(), "b".to_string()];
        let compiled = location_model(grid, locations, &two_location_walk(0.6), 1)
            .unwrap()
            .compile()
            .unwrap();
        let session = Session::new(&compiled);
        let output = location_predictor(
            &session,
            &LocationSpec {
                retention_steps: 1,
                lag_steps: 1,
                area: vec![0, 1],
            },
        )
        .unwrap();
        // with events at every step the remain scenario is impossible, so the
        // integrand picks up a constant that cancels between the measures;
        // every martingale term is zero up to rounding
        for row in &output.rows {
            assert_eq!(row.predictor, 1.0);
            assert!(row.forward_increment.abs() < EXACT_TOL);
            assert!(row.backward_increment.abs() < EXACT_TOL);
            assert!(row.residual.abs() < EXACT_TOL);
        }
    }

    #[test]
    fn long_retention_recovers_classical_filtering() {
        let grid: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let locations = vec!["a".to_string(), "b".to_string()];
        // retention beyond the horizon: nothing is ever deleted
        let compiled = location_model(grid, locations, &two_location_walk(1.0), 10)
            .unwrap()
            .compile()
            .unwrap();
        let session = Session::new(&compiled);
        let output = location_predictor(
            &session,
            &LocationSpec {
                retention_steps: 10,
                lag_steps: 1,
                area: vec![0],
            },
        )
        .unwrap();
        assert!(output.max_residual < APP_TOL);
        assert!(output.max_abs_backward < EXACT_TOL);
    }

    #[test]
    fn short_retention_decomposes_exactly_with_backward_mass() {
        let grid: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let locations = vec!["a".to_string(), "b".to_string()];
        let compiled = location_model(grid, locations, &two_location_walk(0.6), 1)
            .unwrap()
            .compile()
            .unwrap();
        let session = Session::new(&compiled);
        let output = location_predictor(
            &session,
            &LocationSpec {
                retention_steps: 1,
                lag_steps: 1,
                area: vec![0],
            },
        )
        .unwrap();
        assert!(output.max_residual < APP_TOL, "residual {}", output.max_residual);
        assert!(output.max_abs_backward > 1e-4);
    }

    #[test]
    fn retention_sweep_and_refinement() {
        let grid: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let locations = vec!["a".to_string(), "b".to_string()];
        let walk = two_location_walk(0.7);
        let rows =
            location_sweep(grid.clone(), locations.clone(), &walk, 1, vec![0], &[1, 2, 10])
                .unwrap();
        assert_eq!(rows.len(), 3);
        // beyond-horizon retention kills the backward component
        assert!(rows[2].max_abs_backward < EXACT_TOL, "{}", rows[2].max_abs_backward);
        assert!(rows[0].max_abs_backward > rows[2].max_abs_backward);
        for row in &rows {
            assert!(row.max_residual < APP_TOL);
        }

        // longer retention refines the information partition when measurement
        // times are observable (a measurement at every step); with random
        // measurement times the state hides the timestamps and refinement can
        // genuinely fail
        let every_step = two_location_walk(1.0);
        let shorter = location_model(grid.clone(), locations.clone(), &every_step, 1)
            .unwrap()
            .compile()
            .unwrap();
        let longer = location_model(grid, locations, &every_step, 2)
            .unwrap()
            .compile()
            .unwrap();
        assert!(retention_refines(&shorter, &longer));
        assert!(!retention_refines(&longer, &shorter));
    }
}
