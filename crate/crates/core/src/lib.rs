//! Exact and Monte Carlo computation for marked point processes whose
//! information pieces expire.
//!
//! The crate models finite scenario trees of innovation/deletion events,
//! computes optional projections and forward/backward compensators exactly by
//! enumeration, verifies the two-sided decomposition of projection increments
//! per path, and estimates the same objects by seeded simulation on models too
//! large to enumerate. Three worked applications (reserving with data deletion,
//! Markovian approximation error, location prediction with auto-delete) sit on
//! top, together with a JSON model-document format and a CLI.
//!
//! # Example
//!
//! One piece, innovated at `t_1` with probability one half and certainly
//! deleted at `t_2`. The projection of a mark indicator jumps on the
//! innovation and falls back to the prior after the deletion; the two
//! movements are carried by the forward and the backward integral of the
//! decomposition, and the residual vanishes:
//!
//! ```
//! use imr::model::{builder::TableBuilder, CompositeEvent, Elementary, ScenarioModel};
//! use imr::engine::Session;
//! use imr::representation::{max_abs_residual, verify_representation_xi};
//!
//! let innovate = CompositeEvent::new(vec![Elementary::Innovate { piece: 1, mark: 0 }])?;
//! let delete = CompositeEvent::new(vec![Elementary::Delete { piece: 1 }])?;
//! let mut table = TableBuilder::new();
//! table.node(vec![], vec![(innovate.clone(), 0.5), (CompositeEvent::empty(), 0.5)]);
//! table.node(vec![innovate], vec![(delete, 1.0)]);
//! table.node(vec![CompositeEvent::empty()], vec![(CompositeEvent::empty(), 1.0)]);
//!
//! let model = ScenarioModel::new(vec![0.0, 1.0, 2.0], vec!["a".into()], 1, table.build())?;
//! let compiled = model.compile()?;
//! let session = Session::new(&compiled);
//! let observed = session.register(|path| path.innovation_idx(1).is_some() as u8 as f64);
//!
//! let reports = verify_representation_xi(&session, observed);
//! assert!(max_abs_residual(&reports) < 1e-10);
//! # Ok::<(), imr::model::ModelError>(())
//! ```

// grid-time loops index several parallel per-time arrays; iterator rewrites
// obscure that
#![allow(clippy::needless_range_loop)]

pub mod applications;
pub mod cli;
pub mod document;
pub mod engine;
pub mod generator;
pub mod measures;
pub mod model;
pub mod montecarlo;
pub mod representation;

pub use engine::{CondResult, Condition, ConditioningEvent, ProjectionPath, Session, Var};
pub use measures::{Atom, AtomKey, MeasureAtoms, MeasureKind, TimeMeasure};
pub use model::{
    CompiledModel, CompositeEvent, Elementary, InformationState, ModelError, PathRecord,
    ScenarioModel, Side, StateId, TransitionLaw,
};
pub use representation::{DriftSide, RepresentationIntegrand, RepresentationReport, ReportRow};
