//! JSON model documents: the on-disk format consumed by the CLI and the C API.
//!
//! A document carries the model itself (grid, marks, piece budget, transition
//! table), named payoff functionals in a small expression vocabulary over path
//! primitives, named sojourn processes, and application parameter blocks. The
//! transition table is keyed by canonical histories: one composite-event string
//! per elapsed grid step, `"+1:a,-2"` style, the empty string for no event.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::applications::{InsuranceContract, MarkovApproxSpec, WalkSpec};
use crate::measures::TimeMeasure;
use crate::model::{
    CompiledModel, CompositeEvent, InformationState, MarkId, ModelError, PathRecord,
    ScenarioModel, TransitionLaw,
};

#[derive(Debug, Error)]
pub enum DocError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duplicate transition entry for history {history:?}")]
    DuplicateHistory { history: Vec<String> },
    #[error("payoff {name:?}: {reason}")]
    BadExpression { name: String, reason: String },
    #[error("unknown payoff or process {name:?}")]
    UnknownTarget { name: String },
    #[error("application block {app:?} missing")]
    MissingApplication { app: String },
    #[error("rate vector must have one value per grid point")]
    BadRate,
    #[error("{what} must be a positive multiple of the uniform grid spacing")]
    NotGridAligned { what: String },
    #[error("location walk block required for model construction")]
    MissingWalk,
    #[error("rule-based models cannot be serialized")]
    NotSerializable,
}

fn default_true() -> bool {
    true
}

fn default_measure_prob() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Treat unlisted nodes as "no event with probability 1".
    #[serde(default)]
    pub implicit_no_event: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawTransition {
    history: Vec<String>,
    next: BTreeMap<String, f64>,
}

/// Bounded path functional in a closed expression vocabulary. Indicator
/// primitives return 0/1; `time_value` is made total by the `if_never`
/// fallback. The state primitives (`active_count`, `state_has`,
/// `state_mark_is`, `s`) are only meaningful inside process integrands, where
/// they refer to the occupation state and time being weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    Add(Vec<Expr>),
    Sub(Vec<Expr>),
    Mul(Vec<Expr>),
    Neg(Box<Expr>),
    Min(Vec<Expr>),
    Max(Vec<Expr>),
    /// `1` if the jump time `T_index <= time`.
    TimeLe { index: u8, time: f64 },
    /// `1` if the jump time is finite.
    Occurs { index: u8 },
    /// The jump time itself, or `if_never` when the jump never happens.
    TimeValue { index: u8, if_never: f64 },
    /// `1` if the piece was innovated with the given mark.
    MarkIs { piece: u8, mark: String },
    /// `1` if the piece is observable at `time` (post-event state).
    Active { piece: u8, time: f64 },
    If {
        cond: Box<Expr>,
        then: Box<Expr>,
        r#else: Box<Expr>,
    },
    /// Number of active pieces of the occupation state (process context).
    ActiveCount,
    /// `1` if the occupation state holds the piece (process context).
    StateHas { piece: u8 },
    /// `1` if the occupation state holds the piece with the mark.
    StateMarkIs { piece: u8, mark: String },
    /// The occupation time (process context).
    S,
}

struct ExprCtx<'a> {
    compiled: &'a CompiledModel,
    path: &'a PathRecord,
    state: Option<&'a InformationState>,
    s: f64,
}

impl Expr {
    /// Check indices, marks and grid times; `in_process` allows the state
    /// primitives.
    fn validate(&self, model: &ScenarioModel, in_process: bool) -> Result<(), String> {
        let check_piece = |piece: u8| -> Result<(), String> {
            if piece == 0 || piece > model.max_pieces() {
                Err(format!("piece {piece} out of range"))
            } else {
                Ok(())
            }
        };
        let check_index = |index: u8| -> Result<(), String> {
            if index == 0 || index > 2 * model.max_pieces() {
                Err(format!("jump index {index} out of range"))
            } else {
                Ok(())
            }
        };
        let check_time = |t: f64| -> Result<(), String> {
            model
                .time_index(t)
                .map(|_| ())
                .map_err(|_| format!("time {t} not on the grid"))
        };
        let check_mark = |mark: &str| -> Result<(), String> {
            model
                .mark_id(mark)
                .map(|_| ())
                .map_err(|_| format!("unknown mark {mark:?}"))
        };
        match self {
            Expr::Const(v) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err("constants must be finite".to_string())
                }
            }
            Expr::Add(items) | Expr::Mul(items) | Expr::Min(items) | Expr::Max(items) => {
                if items.is_empty() {
                    return Err("empty operand list".to_string());
                }
                items.iter().try_for_each(|e| e.validate(model, in_process))
            }
            Expr::Sub(items) => {
                if items.len() != 2 {
                    return Err("sub takes exactly two operands".to_string());
                }
                items.iter().try_for_each(|e| e.validate(model, in_process))
            }
            Expr::Neg(inner) => inner.validate(model, in_process),
            Expr::TimeLe { index, time } => {
                check_index(*index)?;
                check_time(*time)
            }
            Expr::Occurs { index } => check_index(*index),
            Expr::TimeValue { index, if_never } => {
                check_index(*index)?;
                if if_never.is_finite() {
                    Ok(())
                } else {
                    Err("if_never must be finite".to_string())
                }
            }
            Expr::MarkIs { piece, mark } => {
                check_piece(*piece)?;
                check_mark(mark)
            }
            Expr::Active { piece, time } => {
                check_piece(*piece)?;
                check_time(*time)
            }
            Expr::If { cond, then, r#else } => {
                cond.validate(model, in_process)?;
                then.validate(model, in_process)?;
                r#else.validate(model, in_process)
            }
            Expr::ActiveCount | Expr::StateHas { .. } | Expr::StateMarkIs { .. } | Expr::S => {
                if !in_process {
                    return Err("state primitives are only valid in process integrands".into());
                }
                match self {
                    Expr::StateHas { piece } => check_piece(*piece),
                    Expr::StateMarkIs { piece, mark } => {
                        check_piece(*piece)?;
                        check_mark(mark)
                    }
                    _ => Ok(()),
                }
            }
        }
    }

    fn eval(&self, ctx: &ExprCtx<'_>) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Add(items) => items.iter().map(|e| e.eval(ctx)).sum(),
            Expr::Sub(items) => items[0].eval(ctx) - items[1].eval(ctx),
            Expr::Mul(items) => items.iter().map(|e| e.eval(ctx)).product(),
            Expr::Neg(inner) => -inner.eval(ctx),
            Expr::Min(items) => items.iter().map(|e| e.eval(ctx)).fold(f64::MAX, f64::min),
            Expr::Max(items) => items.iter().map(|e| e.eval(ctx)).fold(f64::MIN, f64::max),
            Expr::TimeLe { index, time } => {
                let k = ctx.compiled.model().time_index(*time).expect("validated");
                ctx.path
                    .jump_time_idx(*index)
                    .is_some_and(|idx| idx <= k) as u8 as f64
            }
            Expr::Occurs { index } => ctx.path.jump_time_idx(*index).is_some() as u8 as f64,
            Expr::TimeValue { index, if_never } => ctx
                .path
                .jump_time_idx(*index)
                .map_or(*if_never, |idx| ctx.compiled.grid()[idx]),
            Expr::MarkIs { piece, mark } => {
                let id = ctx.compiled.model().mark_id(mark).expect("validated");
                (ctx.path.mark(*piece) == Some(id)) as u8 as f64
            }
            Expr::Active { piece, time } => {
                let k = ctx.compiled.model().time_index(*time).expect("validated");
                let innovated = ctx.path.innovation_idx(*piece).is_some_and(|i| i <= k);
                let deleted = ctx.path.deletion_idx(*piece).is_some_and(|d| d <= k);
                (innovated && !deleted) as u8 as f64
            }
            Expr::If { cond, then, r#else } => {
                if cond.eval(ctx) != 0.0 {
                    then.eval(ctx)
                } else {
                    r#else.eval(ctx)
                }
            }
            Expr::ActiveCount => ctx.state.map_or(0.0, |s| s.active.len() as f64),
            Expr::StateHas { piece } => ctx
                .state
                .is_some_and(|s| s.active.contains(&(2 * piece - 1)))
                as u8 as f64,
            Expr::StateMarkIs { piece, mark } => {
                let id = ctx.compiled.model().mark_id(mark).expect("validated");
                ctx.state.is_some_and(|s| {
                    s.active
                        .iter()
                        .position(|&i| i == 2 * piece - 1)
                        .is_some_and(|pos| s.marks[pos] == id)
                }) as u8 as f64
            }
            Expr::S => ctx.s,
        }
    }
}

/// Which drift side a named process is meant to be verified against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessSide {
    Forward,
    Backward,
}

/// A named sojourn process: `h` integrated against the grid-discretized time
/// measure, endpoint conventions matching the requested side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProcessDoc {
    pub h: Expr,
    #[serde(default = "default_true")]
    pub lebesgue: bool,
    #[serde(default)]
    pub diracs: Vec<f64>,
    pub side: ProcessSide,
}

/// Scalar or one value per grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Constant(f64),
    PerGridPoint(Vec<f64>),
}

impl Rate {
    pub fn sample(&self, grid: &[f64]) -> Result<Vec<f64>, DocError> {
        match self {
            Rate::Constant(v) => Ok(vec![*v; grid.len()]),
            Rate::PerGridPoint(values) => {
                if values.len() == grid.len() {
                    Ok(values.clone())
                } else {
                    Err(DocError::BadRate)
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThieleDoc {
    pub survival_rate: Rate,
    pub death_benefit: Rate,
    pub interest: Rate,
    pub horizon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovEntry {
    pub y: Option<String>,
    pub n: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovDoc {
    pub horizon: f64,
    #[serde(default)]
    pub f: Vec<MarkovEntry>,
    #[serde(default)]
    pub default: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkDoc {
    pub locations: Vec<String>,
    pub initial: Vec<f64>,
    pub kernel: Vec<Vec<f64>>,
    #[serde(default = "default_measure_prob")]
    pub measure_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocationDoc {
    /// Retention limit in time units; must align with a uniform grid.
    pub delta: f64,
    /// Prediction lag in time units.
    pub lag: f64,
    pub area: Vec<String>,
    /// Walk parameters; when present the application builds its own
    /// measurement model on the document's grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk: Option<WalkDoc>,
    /// Additional retention limits for the sweep report.
    #[serde(default)]
    pub sweep: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ApplicationDocs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thiele: Option<ThieleDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov: Option<MarkovDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<LocationDoc>,
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    #[serde(default)]
    meta: Meta,
    grid: Vec<f64>,
    marks: Vec<String>,
    pieces: u8,
    #[serde(default)]
    transitions: Vec<RawTransition>,
    #[serde(default)]
    payoffs: BTreeMap<String, Expr>,
    #[serde(default)]
    processes: BTreeMap<String, ProcessDoc>,
    #[serde(default)]
    applications: ApplicationDocs,
}

/// A parsed and validated model document.
#[derive(Debug)]
pub struct ModelDocument {
    pub meta: Meta,
    pub model: ScenarioModel,
    pub payoffs: BTreeMap<String, Expr>,
    pub processes: BTreeMap<String, ProcessDoc>,
    pub applications: ApplicationDocs,
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self, DocError> {
        let raw: RawDocument = serde_json::from_str(text)?;
        let mut table = std::collections::HashMap::new();
        for entry in &raw.transitions {
            let history: Result<Vec<CompositeEvent>, ModelError> = entry
                .history
                .iter()
                .map(|text| CompositeEvent::parse(text, &raw.marks, raw.pieces))
                .collect();
            let history = history?;
            let mut dist = Vec::with_capacity(entry.next.len());
            for (event_text, prob) in &entry.next {
                let event = CompositeEvent::parse(event_text, &raw.marks, raw.pieces)?;
                dist.push((event, *prob));
            }
            if table.insert(history, dist).is_some() {
                return Err(DocError::DuplicateHistory {
                    history: entry.history.clone(),
                });
            }
        }
        let model = ScenarioModel::new(
            raw.grid,
            raw.marks,
            raw.pieces,
            TransitionLaw::Table(table),
        )?
        .with_implicit_no_event(raw.meta.implicit_no_event);

        for (name, expr) in &raw.payoffs {
            expr.validate(&model, false)
                .map_err(|reason| DocError::BadExpression {
                    name: name.clone(),
                    reason,
                })?;
        }
        for (name, process) in &raw.processes {
            process
                .h
                .validate(&model, true)
                .map_err(|reason| DocError::BadExpression {
                    name: name.clone(),
                    reason,
                })?;
            for &t in &process.diracs {
                model
                    .time_index(t)
                    .map_err(|_| DocError::BadExpression {
                        name: name.clone(),
                        reason: format!("Dirac time {t} not on the grid"),
                    })?;
            }
        }
        Ok(ModelDocument {
            meta: raw.meta,
            model,
            payoffs: raw.payoffs,
            processes: raw.processes,
            applications: raw.applications,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DocError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DocError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String, DocError> {
        let table = match self.model.law() {
            TransitionLaw::Table(table) => table,
            TransitionLaw::Rule(_) => return Err(DocError::NotSerializable),
        };
        let marks = self.model.marks();
        let mut transitions: Vec<RawTransition> = table
            .iter()
            .map(|(history, dist)| RawTransition {
                history: history.iter().map(|e| e.encode(marks)).collect(),
                next: dist
                    .iter()
                    .map(|(e, p)| (e.encode(marks), *p))
                    .collect(),
            })
            .collect();
        transitions.sort_by(|a, b| (a.history.len(), &a.history).cmp(&(b.history.len(), &b.history)));
        let raw = RawDocument {
            meta: self.meta.clone(),
            grid: self.model.grid().to_vec(),
            marks: marks.to_vec(),
            pieces: self.model.max_pieces(),
            transitions,
            payoffs: self.payoffs.clone(),
            processes: self.processes.clone(),
            applications: self.applications.clone(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn compile(&self) -> Result<CompiledModel, DocError> {
        Ok(self.model.clone().compile()?)
    }

    /// Evaluate a named payoff on every path.
    pub fn payoff_values(
        &self,
        compiled: &CompiledModel,
        name: &str,
    ) -> Result<Vec<f64>, DocError> {
        let expr = self
            .payoffs
            .get(name)
            .ok_or_else(|| DocError::UnknownTarget {
                name: name.to_string(),
            })?;
        Ok(compiled
            .paths()
            .iter()
            .map(|path| {
                expr.eval(&ExprCtx {
                    compiled,
                    path,
                    state: None,
                    s: 0.0,
                })
            })
            .collect())
    }

    /// Instantiate a named process as a sojourn specification plus side.
    pub fn process_spec<'a>(
        &'a self,
        compiled: &'a CompiledModel,
        name: &str,
    ) -> Result<(DocSojourn<'a>, ProcessSide), DocError> {
        let doc = self
            .processes
            .get(name)
            .ok_or_else(|| DocError::UnknownTarget {
                name: name.to_string(),
            })?;
        let mut gamma = TimeMeasure {
            lebesgue: doc.lebesgue,
            dirac_idx: Vec::new(),
        };
        for &t in &doc.diracs {
            gamma.dirac_idx.push(compiled.model().time_index(t)?);
        }
        gamma.dirac_idx.sort_unstable();
        gamma.dirac_idx.dedup();
        Ok((
            DocSojourn {
                compiled,
                expr: doc.h.clone(),
                gamma,
            },
            doc.side,
        ))
    }

    pub fn thiele_contract(&self, grid: &[f64]) -> Result<InsuranceContract, DocError> {
        let doc = self
            .applications
            .thiele
            .as_ref()
            .ok_or_else(|| DocError::MissingApplication {
                app: "thiele".to_string(),
            })?;
        Ok(InsuranceContract {
            survival_rate: doc.survival_rate.sample(grid)?,
            death_benefit: doc.death_benefit.sample(grid)?,
            interest: doc.interest.sample(grid)?,
            horizon: doc.horizon,
        })
    }

    pub fn markov_spec(&self) -> Result<MarkovApproxSpec, DocError> {
        let doc = self
            .applications
            .markov
            .as_ref()
            .ok_or_else(|| DocError::MissingApplication {
                app: "markov".to_string(),
            })?;
        let mut f = BTreeMap::new();
        for entry in &doc.f {
            f.insert((entry.y.clone(), entry.n), entry.value);
        }
        Ok(MarkovApproxSpec {
            horizon: doc.horizon,
            f,
            default: doc.default,
        })
    }

    /// Grid-alignment conversion of a duration to steps on a uniform grid.
    pub fn duration_steps(&self, duration: f64, what: &str) -> Result<usize, DocError> {
        let grid = self.model.grid();
        let spacing = grid[1] - grid[0];
        let uniform = grid
            .windows(2)
            .all(|w| ((w[1] - w[0]) - spacing).abs() < 1e-9);
        let ratio = duration / spacing;
        let steps = ratio.round();
        if !uniform || duration <= 0.0 || (ratio - steps).abs() > 1e-9 || steps < 1.0 {
            return Err(DocError::NotGridAligned {
                what: what.to_string(),
            });
        }
        Ok(steps as usize)
    }

    pub fn location_parts(
        &self,
    ) -> Result<(&LocationDoc, usize, usize), DocError> {
        let doc = self
            .applications
            .location
            .as_ref()
            .ok_or_else(|| DocError::MissingApplication {
                app: "location".to_string(),
            })?;
        let retention = self.duration_steps(doc.delta, "delta")?;
        let lag = self.duration_steps(doc.lag, "lag")?;
        Ok((doc, retention, lag))
    }

    /// Build the walk-defined measurement model of the location block on the
    /// document's grid.
    pub fn location_walk_model(&self, retention_steps: usize) -> Result<ScenarioModel, DocError> {
        let (doc, _, _) = self.location_parts()?;
        let walk_doc = doc.walk.as_ref().ok_or(DocError::MissingWalk)?;
        let walk = WalkSpec {
            kernel: walk_doc.kernel.clone(),
            initial: walk_doc.initial.clone(),
            measure_prob: walk_doc.measure_prob,
        };
        crate::applications::location_model(
            self.model.grid().to_vec(),
            walk_doc.locations.clone(),
            &walk,
            retention_steps,
        )
        .map_err(|e| DocError::BadExpression {
            name: "location".to_string(),
            reason: e.to_string(),
        })
    }

    pub fn area_marks(
        &self,
        marks: &[String],
        area: &[String],
    ) -> Result<Vec<MarkId>, DocError> {
        area.iter()
            .map(|name| {
                marks
                    .iter()
                    .position(|m| m == name)
                    .map(|i| i as MarkId)
                    .ok_or_else(|| DocError::BadExpression {
                        name: "location".to_string(),
                        reason: format!("unknown area mark {name:?}"),
                    })
            })
            .collect()
    }
}

/// A document-defined sojourn integrand bound to a compiled model. Borrow the
/// evaluator into a [`crate::measures::SojournSpec`] at the call site:
/// `SojournSpec { h: &|m, s, p| sojourn.eval(m, s, p), gamma: sojourn.gamma.clone() }`.
pub struct DocSojourn<'a> {
    compiled: &'a CompiledModel,
    expr: Expr,
    pub gamma: TimeMeasure,
}

impl DocSojourn<'_> {
    pub fn eval(&self, state: &InformationState, s: f64, path: &PathRecord) -> f64 {
        self.expr.eval(&ExprCtx {
            compiled: self.compiled,
            path,
            state: Some(state),
            s,
        })
    }
}
