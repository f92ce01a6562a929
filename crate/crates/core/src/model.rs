//! Scenario-tree models for marked point processes with expiring information pieces.
//!
//! A model describes up to `max_pieces` information pieces. Piece `p` is created
//! ("innovated") at most once with a mark from a finite mark set and may later be
//! deleted while active. Randomness lives on a finite time grid `t_0 = 0 < t_1 < …
//! < t_N`: at every grid step a node of the tree picks one composite event (a set
//! of simultaneous innovations/deletions, possibly empty) according to its
//! transition distribution.
//!
//! Jump-time indexing follows the doubled convention: the innovation of piece `p`
//! carries jump index `2p - 1`, its deletion `2p`, so a piece is observable on
//! `{T_{2p-1} <= t < T_{2p}}`. The observable information at a time is the set of
//! active (odd) jump indices together with the marks of the active pieces, and
//! nothing else; deletions genuinely remove information.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Index into the model's mark table.
pub type MarkId = u8;
/// Index into the model's time grid.
pub type TimeIdx = usize;
/// Index into the enumerated path list.
pub type PathIdx = usize;

/// Interned information state handle, valid for one [`CompiledModel`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct StateId(pub u32);

/// Which side of a grid time a query refers to: the post-event state at `t`
/// (`Right`) or the left limit carried over from the previous grid point (`Left`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Side {
    Right,
    Left,
}

/// One elementary event inside a composite event.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Elementary {
    /// Piece `piece` becomes observable with mark `mark`.
    Innovate { piece: u8, mark: MarkId },
    /// Active piece `piece` stops being observable.
    Delete { piece: u8 },
}

impl Elementary {
    /// Jump-time index: `2p - 1` for an innovation of piece `p`, `2p` for a deletion.
    pub fn jump_index(&self) -> u8 {
        match *self {
            Elementary::Innovate { piece, .. } => 2 * piece - 1,
            Elementary::Delete { piece } => 2 * piece,
        }
    }

    pub fn piece(&self) -> u8 {
        match *self {
            Elementary::Innovate { piece, .. } | Elementary::Delete { piece } => piece,
        }
    }
}

/// A set of simultaneous elementary events at one grid time. Canonically sorted
/// by jump index; a piece appears at most once, so a piece is never innovated and
/// deleted at the same instant.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct CompositeEvent(Vec<Elementary>);

impl CompositeEvent {
    pub fn empty() -> Self {
        CompositeEvent(Vec::new())
    }

    pub fn new(mut events: Vec<Elementary>) -> Result<Self, ModelError> {
        events.sort_by_key(Elementary::jump_index);
        for pair in events.windows(2) {
            if pair[0].piece() == pair[1].piece() {
                return Err(ModelError::PieceTwiceInEvent {
                    piece: pair[0].piece(),
                });
            }
        }
        Ok(CompositeEvent(events))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn events(&self) -> &[Elementary] {
        &self.0
    }

    /// Canonical text form, e.g. `+1:a,-2` (innovate piece 1 with mark `a`,
    /// delete piece 2). The empty event encodes as the empty string.
    pub fn encode(&self, marks: &[String]) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|ev| match *ev {
                Elementary::Innovate { piece, mark } => {
                    format!("+{}:{}", piece, marks[mark as usize])
                }
                Elementary::Delete { piece } => format!("-{}", piece),
            })
            .collect();
        parts.join(",")
    }

    pub fn parse(text: &str, marks: &[String], max_pieces: u8) -> Result<Self, ModelError> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(CompositeEvent::empty());
        }
        let mut events = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            let bad = || ModelError::BadEventText {
                text: text.to_string(),
            };
            let (sign, rest) = part.split_at(1);
            match sign {
                "+" => {
                    let (piece_s, mark_s) = rest.split_once(':').ok_or_else(bad)?;
                    let piece: u8 = piece_s.parse().map_err(|_| bad())?;
                    if piece == 0 || piece > max_pieces {
                        return Err(ModelError::PieceOutOfRange { piece, max_pieces });
                    }
                    let mark = marks
                        .iter()
                        .position(|m| m == mark_s)
                        .ok_or_else(|| ModelError::UnknownMark {
                            mark: mark_s.to_string(),
                        })? as MarkId;
                    events.push(Elementary::Innovate { piece, mark });
                }
                "-" => {
                    let piece: u8 = rest.parse().map_err(|_| bad())?;
                    if piece == 0 || piece > max_pieces {
                        return Err(ModelError::PieceOutOfRange { piece, max_pieces });
                    }
                    events.push(Elementary::Delete { piece });
                }
                _ => return Err(bad()),
            }
        }
        CompositeEvent::new(events)
    }
}

/// Lifecycle of one piece along a history.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PieceStatus {
    /// Never innovated so far.
    Fresh,
    Active {
        mark: MarkId,
        innovated: TimeIdx,
    },
    Deleted {
        mark: MarkId,
        innovated: TimeIdx,
        deleted: TimeIdx,
    },
}

impl PieceStatus {
    pub fn is_active(&self) -> bool {
        matches!(self, PieceStatus::Active { .. })
    }

    pub fn mark(&self) -> Option<MarkId> {
        match *self {
            PieceStatus::Fresh => None,
            PieceStatus::Active { mark, .. } | PieceStatus::Deleted { mark, .. } => Some(mark),
        }
    }
}

/// The observable information at one instant: the set of active odd jump indices
/// `M` together with the marks of the active pieces, in index order. This is all
/// an observer sees; histories that lead to the same state are indistinguishable.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct InformationState {
    /// Active odd jump indices, ascending.
    pub active: Vec<u8>,
    /// Marks aligned with `active`.
    pub marks: Vec<MarkId>,
}

impl InformationState {
    pub fn from_pieces(pieces: &[PieceStatus]) -> Self {
        let mut active = Vec::new();
        let mut marks = Vec::new();
        for (idx, status) in pieces.iter().enumerate() {
            if let PieceStatus::Active { mark, .. } = status {
                active.push(2 * (idx as u8 + 1) - 1);
                marks.push(*mark);
            }
        }
        InformationState { active, marks }
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Canonical display, e.g. `1:a|5:b`; the empty state prints as `-`.
    pub fn display(&self, marks: &[String]) -> String {
        if self.active.is_empty() {
            return "-".to_string();
        }
        self.active
            .iter()
            .zip(&self.marks)
            .map(|(i, m)| format!("{}:{}", i, marks[*m as usize]))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// The joint event observed at one grid time of one path: the exact set of jump
/// indices whose times coincide there, with the corresponding marks.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct JointEventRecord {
    /// Sorted jump indices whose times coincide.
    pub index_set: Vec<u8>,
    /// Grid index of the first (and only) occurrence, `None` if the joint event
    /// never happens on the path.
    pub time_idx: Option<TimeIdx>,
    /// Marks aligned with `index_set`; the mark of a deletion index `2p` equals
    /// the mark piece `p` was innovated with.
    pub marks: Vec<MarkId>,
}

/// A view of one node history handed to rule-based transition laws.
pub struct HistoryView<'a> {
    /// Grid index of the node; the distribution decides the events at `step + 1`.
    pub step: TimeIdx,
    pub events: &'a [CompositeEvent],
    pub pieces: &'a [PieceStatus],
}

/// A node distribution: composite events with their probabilities.
pub type Distribution = Vec<(CompositeEvent, f64)>;
/// Evaluates a node distribution from the history on demand.
pub type TransitionRule = dyn Fn(&HistoryView<'_>) -> Distribution + Send + Sync;

/// Transition law: a distribution over composite events for every tree node.
#[derive(Clone)]
pub enum TransitionLaw {
    /// Explicit table keyed by the canonical history (events at `t_1..t_k`).
    Table(HashMap<Vec<CompositeEvent>, Distribution>),
    /// Lazily evaluated rule, for models too large to materialize.
    Rule(Arc<TransitionRule>),
}

impl fmt::Debug for TransitionLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionLaw::Table(t) => write!(f, "TransitionLaw::Table({} nodes)", t.len()),
            TransitionLaw::Rule(_) => write!(f, "TransitionLaw::Rule"),
        }
    }
}

/// Tolerance for per-node and whole-tree probability conservation.
pub const PROB_TOL: f64 = 1e-12;

/// Marks must not collide with the reserved null symbol or the separators used
/// by the canonical event encoding.
pub const RESERVED_NULL_MARK: &str = "-";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("grid must contain at least the origin t_0 = 0")]
    EmptyGrid,
    #[error("grid must start at 0, found {0}")]
    GridOrigin(f64),
    #[error("grid must be strictly increasing and finite at position {pos}")]
    GridNotIncreasing { pos: usize },
    #[error("mark set must not be empty")]
    NoMarks,
    #[error("mark {mark:?} is reserved or contains a separator character")]
    BadMarkSymbol { mark: String },
    #[error("duplicate mark {mark:?}")]
    DuplicateMark { mark: String },
    #[error("max_pieces must be between 1 and 63, found {0}")]
    BadPieceCount(u8),
    #[error("piece {piece} out of range 1..={max_pieces}")]
    PieceOutOfRange { piece: u8, max_pieces: u8 },
    #[error("unknown mark {mark:?}")]
    UnknownMark { mark: String },
    #[error("cannot parse composite event {text:?}")]
    BadEventText { text: String },
    #[error("piece {piece} appears twice in one composite event")]
    PieceTwiceInEvent { piece: u8 },
    #[error("node [{node}]: no transition distribution")]
    MissingTransition { node: String },
    #[error("node [{node}]: distribution sums to {sum}, not 1")]
    DistributionSum { node: String, sum: f64 },
    #[error("node [{node}]: event {event:?} has negative probability {prob}")]
    NegativeProbability {
        node: String,
        event: String,
        prob: f64,
    },
    #[error("node [{node}]: duplicate event {event:?} in distribution")]
    DuplicateEvent { node: String, event: String },
    #[error("node [{node}]: piece {piece} innovated but was innovated before")]
    IllegalInnovation { node: String, piece: u8 },
    #[error("node [{node}]: piece {piece} deleted but is not active")]
    IllegalDeletion { node: String, piece: u8 },
    #[error("tree exceeds {cap} nodes; enumerate smaller models or simulate")]
    TooLarge { cap: usize },
    #[error("time {t} is not on the grid")]
    TimeOffGrid { t: f64 },
    #[error("left limit queried at t_0")]
    LeftLimitAtOrigin,
    #[error("path probabilities sum to {sum}, not 1")]
    PathMass { sum: f64 },
    #[error("rule-based transition law cannot be serialized")]
    RuleNotSerializable,
}

/// A scenario model: grid, marks, piece budget and transition law. Immutable
/// after construction; [`ScenarioModel::compile`] materializes the tree.
#[derive(Clone, Debug)]
pub struct ScenarioModel {
    grid: Vec<f64>,
    marks: Vec<String>,
    max_pieces: u8,
    law: TransitionLaw,
    implicit_no_event: bool,
}

impl ScenarioModel {
    pub fn new(
        grid: Vec<f64>,
        marks: Vec<String>,
        max_pieces: u8,
        law: TransitionLaw,
    ) -> Result<Self, ModelError> {
        if grid.is_empty() {
            return Err(ModelError::EmptyGrid);
        }
        if grid[0] != 0.0 {
            return Err(ModelError::GridOrigin(grid[0]));
        }
        for (pos, pair) in grid.windows(2).enumerate() {
            if !(pair[1].is_finite() && pair[1] > pair[0]) {
                return Err(ModelError::GridNotIncreasing { pos: pos + 1 });
            }
        }
        if marks.is_empty() {
            return Err(ModelError::NoMarks);
        }
        for (i, mark) in marks.iter().enumerate() {
            if mark.is_empty()
                || mark == RESERVED_NULL_MARK
                || mark.contains([',', ':', '|', ';'])
            {
                return Err(ModelError::BadMarkSymbol { mark: mark.clone() });
            }
            if marks[..i].contains(mark) {
                return Err(ModelError::DuplicateMark { mark: mark.clone() });
            }
        }
        if max_pieces == 0 || max_pieces > 63 {
            return Err(ModelError::BadPieceCount(max_pieces));
        }
        Ok(ScenarioModel {
            grid,
            marks,
            max_pieces,
            law,
            implicit_no_event: false,
        })
    }

    /// Treat nodes missing from a table law as "no event with probability 1".
    pub fn with_implicit_no_event(mut self, yes: bool) -> Self {
        self.implicit_no_event = yes;
        self
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn marks(&self) -> &[String] {
        &self.marks
    }

    pub fn max_pieces(&self) -> u8 {
        self.max_pieces
    }

    pub fn law(&self) -> &TransitionLaw {
        &self.law
    }

    pub fn implicit_no_event(&self) -> bool {
        self.implicit_no_event
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Number of transitions, i.e. grid points after the origin.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn time_index(&self, t: f64) -> Result<TimeIdx, ModelError> {
        self.grid
            .iter()
            .position(|&g| g == t)
            .ok_or(ModelError::TimeOffGrid { t })
    }

    pub fn mark_id(&self, mark: &str) -> Result<MarkId, ModelError> {
        self.marks
            .iter()
            .position(|m| m == mark)
            .map(|i| i as MarkId)
            .ok_or_else(|| ModelError::UnknownMark {
                mark: mark.to_string(),
            })
    }

    fn node_label(&self, events: &[CompositeEvent]) -> String {
        if events.is_empty() {
            return "root".to_string();
        }
        events
            .iter()
            .enumerate()
            .map(|(k, e)| format!("{}:{}", k + 1, e.encode(&self.marks)))
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Distribution at one node, validated against the piece lifecycle rules.
    /// Entries with probability exactly zero are dropped.
    pub fn distribution(
        &self,
        view: &HistoryView<'_>,
    ) -> Result<Vec<(CompositeEvent, f64)>, ModelError> {
        let raw = match &self.law {
            TransitionLaw::Table(table) => match table.get(view.events) {
                Some(dist) => dist.clone(),
                None if self.implicit_no_event => vec![(CompositeEvent::empty(), 1.0)],
                None => {
                    return Err(ModelError::MissingTransition {
                        node: self.node_label(view.events),
                    })
                }
            },
            TransitionLaw::Rule(rule) => rule(view),
        };
        let node = || self.node_label(view.events);
        let mut sum = 0.0;
        let mut dist = Vec::with_capacity(raw.len());
        for (event, prob) in raw {
            if prob < 0.0 || !prob.is_finite() {
                return Err(ModelError::NegativeProbability {
                    node: node(),
                    event: event.encode(&self.marks),
                    prob,
                });
            }
            sum += prob;
            if prob == 0.0 {
                continue;
            }
            if dist.iter().any(|(e, _)| *e == event) {
                return Err(ModelError::DuplicateEvent {
                    node: node(),
                    event: event.encode(&self.marks),
                });
            }
            for elem in event.events() {
                let piece = elem.piece();
                if piece == 0 || piece > self.max_pieces {
                    return Err(ModelError::PieceOutOfRange {
                        piece,
                        max_pieces: self.max_pieces,
                    });
                }
                let status = view.pieces[piece as usize - 1];
                match elem {
                    Elementary::Innovate { .. } if status != PieceStatus::Fresh => {
                        return Err(ModelError::IllegalInnovation {
                            node: node(),
                            piece,
                        })
                    }
                    Elementary::Delete { .. } if !status.is_active() => {
                        return Err(ModelError::IllegalDeletion {
                            node: node(),
                            piece,
                        })
                    }
                    _ => {}
                }
            }
            dist.push((event, prob));
        }
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(ModelError::DistributionSum { node: node(), sum });
        }
        Ok(dist)
    }

    /// Validate and materialize the full tree with the default node cap.
    pub fn compile(self) -> Result<CompiledModel, ModelError> {
        self.compile_with_cap(1 << 20)
    }

    pub fn compile_with_cap(self, cap: usize) -> Result<CompiledModel, ModelError> {
        CompiledModel::build(self, cap)
    }
}

pub(crate) fn apply_event(
    pieces: &mut [PieceStatus],
    event: &CompositeEvent,
    time_idx: TimeIdx,
) {
    for elem in event.events() {
        let slot = &mut pieces[elem.piece() as usize - 1];
        match *elem {
            Elementary::Innovate { mark, .. } => {
                *slot = PieceStatus::Active {
                    mark,
                    innovated: time_idx,
                };
            }
            Elementary::Delete { .. } => {
                if let PieceStatus::Active { mark, innovated } = *slot {
                    *slot = PieceStatus::Deleted {
                        mark,
                        innovated,
                        deleted: time_idx,
                    };
                }
            }
        }
    }
}

/// One node of the materialized tree.
#[derive(Clone, Debug)]
pub struct Node {
    pub time_idx: TimeIdx,
    pub parent: Option<usize>,
    pub pieces: Vec<PieceStatus>,
    pub state: StateId,
    /// Probability of reaching this node from the root.
    pub prob: f64,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub event: CompositeEvent,
    pub prob: f64,
    pub child: usize,
}

/// One realized path: the composite events at `t_1..t_N` plus derived views.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub id: PathIdx,
    /// `events[k - 1]` is the composite event at `t_k`.
    pub events: Vec<CompositeEvent>,
    /// Product of transition probabilities along the path.
    pub probability: f64,
    /// Final status per piece.
    pub pieces: Vec<PieceStatus>,
    /// Post-event information state at every grid index, length `N + 1`.
    pub states: Vec<StateId>,
    /// Tree node visited at every grid index, length `N + 1`.
    pub nodes: Vec<usize>,
}

impl PathRecord {
    /// Grid index of `T_{2p-1}` for piece `p`.
    pub fn innovation_idx(&self, piece: u8) -> Option<TimeIdx> {
        match self.pieces[piece as usize - 1] {
            PieceStatus::Fresh => None,
            PieceStatus::Active { innovated, .. } | PieceStatus::Deleted { innovated, .. } => {
                Some(innovated)
            }
        }
    }

    /// Grid index of `T_{2p}` for piece `p`.
    pub fn deletion_idx(&self, piece: u8) -> Option<TimeIdx> {
        match self.pieces[piece as usize - 1] {
            PieceStatus::Deleted { deleted, .. } => Some(deleted),
            _ => None,
        }
    }

    pub fn mark(&self, piece: u8) -> Option<MarkId> {
        self.pieces[piece as usize - 1].mark()
    }

    /// Grid index of the jump time `T_i` for a doubled jump index `i`.
    pub fn jump_time_idx(&self, jump_index: u8) -> Option<TimeIdx> {
        let piece = jump_index.div_ceil(2);
        if jump_index % 2 == 1 {
            self.innovation_idx(piece)
        } else {
            self.deletion_idx(piece)
        }
    }

    /// Information state id at grid index `k`; `Side::Left` asks for the left
    /// limit, which on the grid is the post-event state of `k - 1`.
    pub fn state_at(&self, k: TimeIdx, side: Side) -> StateId {
        match side {
            Side::Right => self.states[k],
            Side::Left => self.states[k - 1],
        }
    }

    pub fn has_event_at(&self, k: TimeIdx) -> bool {
        k >= 1 && !self.events[k - 1].is_empty()
    }

    /// The joint event at grid index `k`: sorted jump indices and their marks.
    pub fn joint_event_at(&self, k: TimeIdx) -> Option<(Vec<u8>, Vec<MarkId>)> {
        if !self.has_event_at(k) {
            return None;
        }
        let event = &self.events[k - 1];
        let mut indices: Vec<u8> = event.events().iter().map(Elementary::jump_index).collect();
        indices.sort_unstable();
        let marks = indices
            .iter()
            .map(|&i| self.mark(i.div_ceil(2)).expect("event piece has a mark"))
            .collect();
        Some((indices, marks))
    }

    /// All joint events of the path plus never-occurring singletons, as records.
    pub fn joint_events(&self, max_pieces: u8) -> Vec<JointEventRecord> {
        let mut records: Vec<JointEventRecord> = (1..=self.events.len())
            .filter_map(|k| {
                self.joint_event_at(k).map(|(index_set, marks)| JointEventRecord {
                    index_set,
                    time_idx: Some(k),
                    marks,
                })
            })
            .collect();
        for i in 1..=2 * max_pieces {
            if self.jump_time_idx(i).is_none() {
                records.push(JointEventRecord {
                    index_set: vec![i],
                    time_idx: None,
                    marks: Vec::new(),
                });
            }
        }
        records
    }
}

/// A validated, fully materialized model: tree, enumerated paths and the intern
/// table of every information state that occurs. All data is immutable; shared
/// read access from multiple threads is safe.
#[derive(Debug)]
pub struct CompiledModel {
    model: ScenarioModel,
    nodes: Vec<Node>,
    paths: Vec<PathRecord>,
    states: Vec<InformationState>,
    state_index: HashMap<InformationState, StateId>,
}

impl CompiledModel {
    fn build(model: ScenarioModel, cap: usize) -> Result<Self, ModelError> {
        let steps = model.steps();
        let mut states: Vec<InformationState> = Vec::new();
        let mut state_index: HashMap<InformationState, StateId> = HashMap::new();
        let mut intern = |state: InformationState| -> StateId {
            if let Some(&id) = state_index.get(&state) {
                return id;
            }
            let id = StateId(states.len() as u32);
            states.push(state.clone());
            state_index.insert(state, id);
            id
        };

        let root_pieces = vec![PieceStatus::Fresh; model.max_pieces as usize];
        let root_state = intern(InformationState::from_pieces(&root_pieces));
        let mut nodes = vec![Node {
            time_idx: 0,
            parent: None,
            pieces: root_pieces,
            state: root_state,
            prob: 1.0,
            edges: Vec::new(),
        }];
        // history events per node, kept only while building
        let mut histories: Vec<Vec<CompositeEvent>> = vec![Vec::new()];

        let mut frontier = vec![0usize];
        for _ in 0..steps {
            let mut next = Vec::new();
            for node_id in frontier {
                let view = HistoryView {
                    step: nodes[node_id].time_idx,
                    events: &histories[node_id],
                    pieces: &nodes[node_id].pieces,
                };
                let dist = model.distribution(&view)?;
                let time_idx = nodes[node_id].time_idx + 1;
                for (event, prob) in dist {
                    let mut pieces = nodes[node_id].pieces.clone();
                    apply_event(&mut pieces, &event, time_idx);
                    let state = intern(InformationState::from_pieces(&pieces));
                    let child = nodes.len();
                    if child > cap {
                        return Err(ModelError::TooLarge { cap });
                    }
                    let child_prob = nodes[node_id].prob * prob;
                    nodes.push(Node {
                        time_idx,
                        parent: Some(node_id),
                        pieces,
                        state,
                        prob: child_prob,
                        edges: Vec::new(),
                    });
                    let mut history = histories[node_id].clone();
                    history.push(event.clone());
                    histories.push(history);
                    nodes[node_id].edges.push(Edge {
                        event,
                        prob,
                        child,
                    });
                    next.push(child);
                }
            }
            frontier = next;
        }

        // leaves -> paths
        let mut paths = Vec::with_capacity(frontier.len());
        let mut total = 0.0;
        for (id, &leaf) in frontier.iter().enumerate() {
            let mut chain = Vec::with_capacity(steps + 1);
            let mut cursor = Some(leaf);
            while let Some(n) = cursor {
                chain.push(n);
                cursor = nodes[n].parent;
            }
            chain.reverse();
            let states_along: Vec<StateId> = chain.iter().map(|&n| nodes[n].state).collect();
            let record = PathRecord {
                id,
                events: histories[leaf].clone(),
                probability: nodes[leaf].prob,
                pieces: nodes[leaf].pieces.clone(),
                states: states_along,
                nodes: chain,
            };
            total += record.probability;
            paths.push(record);
        }
        if steps > 0 && (total - 1.0).abs() > PROB_TOL {
            return Err(ModelError::PathMass { sum: total });
        }

        Ok(CompiledModel {
            model,
            nodes,
            paths,
            states,
            state_index,
        })
    }

    pub fn model(&self) -> &ScenarioModel {
        &self.model
    }

    pub fn grid(&self) -> &[f64] {
        self.model.grid()
    }

    pub fn steps(&self) -> usize {
        self.model.steps()
    }

    pub fn marks(&self) -> &[String] {
        self.model.marks()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn paths(&self) -> &[PathRecord] {
        &self.paths
    }

    pub fn state(&self, id: StateId) -> &InformationState {
        &self.states[id.0 as usize]
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn lookup_state(&self, state: &InformationState) -> Option<StateId> {
        self.state_index.get(state).copied()
    }

    /// Display form of a state id using the model's mark symbols.
    pub fn state_label(&self, id: StateId) -> String {
        self.state(id).display(self.model.marks())
    }
}

/// Every positive-probability path of the model. Convenience wrapper around
/// [`ScenarioModel::compile`] for callers that only need the path list.
pub fn enumerate_paths(model: ScenarioModel) -> Result<Vec<PathRecord>, ModelError> {
    Ok(model.compile()?.paths.clone())
}

/// The observable information of a path at time `t` (which must lie on the grid).
pub fn information_state(
    compiled: &CompiledModel,
    path: &PathRecord,
    t: f64,
    side: Side,
) -> Result<InformationState, ModelError> {
    let k = compiled.model.time_index(t)?;
    if side == Side::Left && k == 0 {
        return Err(ModelError::LeftLimitAtOrigin);
    }
    Ok(compiled.state(path.state_at(k, side)).clone())
}

pub mod builder {
    //! Small helper for assembling table-based transition laws.

    use super::*;

    /// Collects per-node distributions; histories are canonicalized event lists.
    #[derive(Default)]
    pub struct TableBuilder {
        table: HashMap<Vec<CompositeEvent>, Vec<(CompositeEvent, f64)>>,
    }

    impl TableBuilder {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn node(
            &mut self,
            history: Vec<CompositeEvent>,
            dist: Vec<(CompositeEvent, f64)>,
        ) -> &mut Self {
            self.table.insert(history, dist);
            self
        }

        pub fn build(self) -> TransitionLaw {
            TransitionLaw::Table(self.table)
        }
    }

    /// Materialize a rule into an explicit table by walking all histories that
    /// the rule reaches with positive probability. The result is serializable.
    pub fn table_from_rule(
        grid: Vec<f64>,
        marks: Vec<String>,
        max_pieces: u8,
        rule: impl Fn(&HistoryView<'_>) -> Vec<(CompositeEvent, f64)> + Send + Sync + 'static,
    ) -> Result<ScenarioModel, ModelError> {
        let rule_model = ScenarioModel::new(
            grid.clone(),
            marks.clone(),
            max_pieces,
            TransitionLaw::Rule(Arc::new(rule)),
        )?;
        let compiled = rule_model.compile()?;
        let mut table = HashMap::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node_id, history)) = stack.pop() {
            let node = &compiled.nodes[node_id];
            if node.edges.is_empty() {
                continue;
            }
            let dist: Vec<(CompositeEvent, f64)> = node
                .edges
                .iter()
                .map(|e| (e.event.clone(), e.prob))
                .collect();
            for edge in &node.edges {
                let mut child_history = history.clone();
                child_history.push(edge.event.clone());
                stack.push((edge.child, child_history));
            }
            table.insert(history, dist);
        }
        ScenarioModel::new(grid, marks, max_pieces, TransitionLaw::Table(table))
    }
}
