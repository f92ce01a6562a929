//! Random scenario-model generation for tests and the acceptance suite.
//!
//! Models are generated node by node: every node gets the empty event plus a
//! few random composite events (innovations of fresh pieces, deletions of
//! active pieces, occasionally a simultaneous pair), with probabilities drawn
//! away from zero so no branch degenerates numerically.
//!
//! `slot_innovations` restricts piece `p` to be innovated at grid step `p`
//! only, with no deletions. On such models the information state pins down the
//! whole event history, so the partial information coincides with the full
//! filtration; this is the monotone regime used by the classical-collapse
//! checks.

use rand::prelude::IndexedRandom;
use rand::Rng;

use crate::model::{
    builder::TableBuilder, CompositeEvent, Elementary, HistoryView, PieceStatus, ScenarioModel,
    TransitionLaw,
};

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub pieces: u8,
    pub steps: usize,
    pub mark_count: u8,
    /// Maximum branches per node, including the mandatory empty event.
    pub max_branches: usize,
    pub allow_deletions: bool,
    pub slot_innovations: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            pieces: 3,
            steps: 5,
            mark_count: 3,
            max_branches: 3,
            allow_deletions: true,
            slot_innovations: false,
        }
    }
}

const MARK_SYMBOLS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

pub fn random_model(cfg: &GeneratorConfig, rng: &mut impl Rng) -> ScenarioModel {
    assert!(cfg.mark_count as usize <= MARK_SYMBOLS.len());
    assert!(cfg.pieces >= 1 && cfg.steps >= 1 && cfg.max_branches >= 2);
    let marks: Vec<String> = MARK_SYMBOLS[..cfg.mark_count as usize]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let grid: Vec<f64> = (0..=cfg.steps).map(|k| k as f64).collect();

    let mut builder = TableBuilder::new();
    let mut stack: Vec<(Vec<CompositeEvent>, Vec<PieceStatus>)> =
        vec![(Vec::new(), vec![PieceStatus::Fresh; cfg.pieces as usize])];
    while let Some((history, pieces)) = stack.pop() {
        let step = history.len();
        if step == cfg.steps {
            continue;
        }
        let dist = random_distribution(cfg, rng, step, &pieces);
        for (event, _) in &dist {
            let mut child_pieces = pieces.clone();
            crate::model::apply_event(&mut child_pieces, event, step + 1);
            let mut child_history = history.clone();
            child_history.push(event.clone());
            stack.push((child_history, child_pieces));
        }
        builder.node(history, dist);
    }
    ScenarioModel::new(grid, marks, cfg.pieces, builder.build())
        .expect("generated model is valid")
}

fn random_distribution(
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
    step: usize,
    pieces: &[PieceStatus],
) -> Vec<(CompositeEvent, f64)> {
    // candidate elementary events at this node
    let mut singles: Vec<Elementary> = Vec::new();
    for (idx, status) in pieces.iter().enumerate() {
        let piece = idx as u8 + 1;
        match status {
            PieceStatus::Fresh => {
                let allowed = if cfg.slot_innovations {
                    piece as usize == step + 1
                } else {
                    true
                };
                if allowed {
                    for mark in 0..cfg.mark_count {
                        singles.push(Elementary::Innovate { piece, mark });
                    }
                }
            }
            PieceStatus::Active { .. } => {
                if cfg.allow_deletions && !cfg.slot_innovations {
                    singles.push(Elementary::Delete { piece });
                }
            }
            PieceStatus::Deleted { .. } => {}
        }
    }

    let mut events = vec![CompositeEvent::empty()];
    if !singles.is_empty() {
        let extra = rng.random_range(1..cfg.max_branches);
        for _ in 0..extra {
            let event = if singles.len() >= 2 && rng.random_bool(0.25) {
                // a simultaneous pair on distinct pieces
                let first = *singles.choose(rng).unwrap();
                let second = *singles.choose(rng).unwrap();
                if first.piece() == second.piece() {
                    CompositeEvent::new(vec![first]).unwrap()
                } else {
                    CompositeEvent::new(vec![first, second]).unwrap()
                }
            } else {
                CompositeEvent::new(vec![*singles.choose(rng).unwrap()]).unwrap()
            };
            if !events.contains(&event) {
                events.push(event);
            }
        }
    }

    // weights bounded away from zero so every branch keeps real mass
    let weights: Vec<f64> = events.iter().map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    events
        .into_iter()
        .zip(weights)
        .map(|(e, w)| (e, w / total))
        .collect()
}

/// A rule-based variant of the same generator, useful for models too large to
/// materialize. The rule re-derives the node distribution deterministically
/// from the history, so simulation never needs the full tree.
pub fn random_rule_model(cfg: &GeneratorConfig, seed: u64) -> ScenarioModel {
    use rand::SeedableRng;
    let cfg = cfg.clone();
    let marks: Vec<String> = MARK_SYMBOLS[..cfg.mark_count as usize]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let grid: Vec<f64> = (0..=cfg.steps).map(|k| k as f64).collect();
    let pieces = cfg.pieces;
    let rule = move |view: &HistoryView<'_>| {
        // derive a node-specific stream from the seed and the history
        let mut h: u64 = seed ^ 0x9e37_79b9_7f4a_7c15;
        for event in view.events {
            for elem in event.events() {
                let code = match *elem {
                    Elementary::Innovate { piece, mark } => {
                        0x100 + (piece as u64) * 8 + mark as u64
                    }
                    Elementary::Delete { piece } => 0x200 + piece as u64,
                };
                h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(code);
            }
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(0xff);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
        random_distribution(&cfg, &mut rng, view.step, view.pieces)
    };
    ScenarioModel::new(
        grid,
        marks,
        pieces,
        TransitionLaw::Rule(std::sync::Arc::new(rule)),
    )
    .expect("generated model is valid")
}

/// Random bounded path functional: independent values in `[-1, 1]` per path.
pub fn random_functional(paths: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..paths).map(|_| rng.random_range(-1.0..1.0)).collect()
}
