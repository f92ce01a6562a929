//! Seeded path simulation, empirical projection estimates and
//! partition-refinement diagnostics.
//!
//! Reproducibility contract: a fixed `(seed, n_paths)` produces bit-identical
//! output regardless of scheduling, because draw `i` uses its own counter
//! stream derived from `(seed, i)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{ConditioningEvent, Session, Var};
use crate::model::{
    apply_event, CompiledModel, CompositeEvent, HistoryView, InformationState, ModelError,
    PathIdx, PieceStatus, ScenarioModel, Side, StateId, TimeIdx,
};
use crate::representation::DriftSide;

#[derive(Clone, Copy, Debug)]
pub struct SimulationConfig {
    pub seed: u64,
    pub n_paths: usize,
}

fn draw_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng
}

fn pick_edge(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draw `n_paths` tree leaves i.i.d. from the model law. Returns enumerated
/// path indices; the records live on the compiled model.
pub fn simulate_paths(compiled: &CompiledModel, config: &SimulationConfig) -> Vec<PathIdx> {
    let leaf_of: BTreeMap<usize, PathIdx> = compiled
        .paths()
        .iter()
        .map(|p| (*p.nodes.last().unwrap(), p.id))
        .collect();
    (0..config.n_paths)
        .map(|draw| {
            let mut rng = draw_rng(config.seed, draw as u64);
            let mut node = 0usize;
            for _ in 0..compiled.steps() {
                let edges = &compiled.nodes()[node].edges;
                let weights: Vec<f64> = edges.iter().map(|e| e.prob).collect();
                let u: f64 = rng.random();
                node = edges[pick_edge(&weights, u)].child;
            }
            leaf_of[&node]
        })
        .collect()
}

/// A simulated trajectory of a model that was never compiled.
#[derive(Clone, Debug)]
pub struct FreePath {
    pub events: Vec<CompositeEvent>,
    /// Post-event information state per grid index.
    pub states: Vec<InformationState>,
    pub probability: f64,
}

/// Simulate directly against the transition law, without materializing the
/// tree. Works for rule-based laws of any size.
pub fn simulate_free(
    model: &ScenarioModel,
    config: &SimulationConfig,
) -> Result<Vec<FreePath>, ModelError> {
    let steps = model.steps();
    let mut out = Vec::with_capacity(config.n_paths);
    for draw in 0..config.n_paths {
        let mut rng = draw_rng(config.seed, draw as u64);
        let mut pieces = vec![PieceStatus::Fresh; model.max_pieces() as usize];
        let mut events: Vec<CompositeEvent> = Vec::with_capacity(steps);
        let mut states = vec![InformationState::from_pieces(&pieces)];
        let mut probability = 1.0;
        for step in 0..steps {
            let view = HistoryView {
                step,
                events: &events,
                pieces: &pieces,
            };
            let dist = model.distribution(&view)?;
            let weights: Vec<f64> = dist.iter().map(|(_, p)| *p).collect();
            let u: f64 = rng.random();
            let (event, prob) = dist[pick_edge(&weights, u)].clone();
            probability *= prob;
            apply_event(&mut pieces, &event, step + 1);
            events.push(event);
            states.push(InformationState::from_pieces(&pieces));
        }
        out.push(FreePath {
            events,
            states,
            probability,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellEstimate {
    pub n: usize,
    pub estimate: f64,
    /// Plug-in standard error; infinite for singleton cells.
    pub stderr: f64,
}

/// Empirical projection estimate per `(time, state)` cell, plus the cells of
/// the exact model that no draw visited (absent, not zero).
#[derive(Clone, Debug)]
pub struct ProjectionEstimates {
    pub cells: BTreeMap<(TimeIdx, StateId), CellEstimate>,
    pub absent: Vec<(TimeIdx, StateId)>,
}

/// Group the draws by exact information state at every grid time and average
/// `values` (a per-path functional) within each cell.
pub fn estimate_projection(
    compiled: &CompiledModel,
    draws: &[PathIdx],
    values: &[f64],
) -> ProjectionEstimates {
    assert_eq!(values.len(), compiled.paths().len());
    let steps = compiled.steps();
    // Welford accumulators
    let mut acc: BTreeMap<(TimeIdx, StateId), (usize, f64, f64)> = BTreeMap::new();
    for &draw in draws {
        let path = &compiled.paths()[draw];
        let value = values[draw];
        for k in 0..=steps {
            let entry = acc.entry((k, path.states[k])).or_insert((0, 0.0, 0.0));
            entry.0 += 1;
            let delta = value - entry.1;
            entry.1 += delta / entry.0 as f64;
            entry.2 += delta * (value - entry.1);
        }
    }
    let cells: BTreeMap<(TimeIdx, StateId), CellEstimate> = acc
        .into_iter()
        .map(|(key, (n, mean, m2))| {
            let stderr = if n >= 2 {
                (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                f64::INFINITY
            };
            (
                key,
                CellEstimate {
                    n,
                    estimate: mean,
                    stderr,
                },
            )
        })
        .collect();
    let mut absent = Vec::new();
    for path in compiled.paths() {
        for k in 0..=steps {
            let key = (k, path.states[k]);
            if !cells.contains_key(&key) && !absent.contains(&key) {
                absent.push(key);
            }
        }
    }
    absent.sort_unstable();
    ProjectionEstimates { cells, absent }
}

/// Empirical projection for free simulations, keyed by the state itself.
pub fn estimate_projection_free(
    draws: &[FreePath],
    value: impl Fn(&FreePath) -> f64,
) -> BTreeMap<(TimeIdx, InformationState), CellEstimate> {
    let mut acc: BTreeMap<(TimeIdx, InformationState), (usize, f64, f64)> = BTreeMap::new();
    for path in draws {
        let v = value(path);
        for (k, state) in path.states.iter().enumerate() {
            let entry = acc.entry((k, state.clone())).or_insert((0, 0.0, 0.0));
            entry.0 += 1;
            let delta = v - entry.1;
            entry.1 += delta / entry.0 as f64;
            entry.2 += delta * (v - entry.1);
        }
    }
    acc.into_iter()
        .map(|(key, (n, mean, m2))| {
            let stderr = if n >= 2 {
                (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                f64::INFINITY
            };
            (
                key,
                CellEstimate {
                    n,
                    estimate: mean,
                    stderr,
                },
            )
        })
        .collect()
}

/// One refinement level: every `stride`-th grid point plus the horizon.
#[derive(Clone, Debug)]
pub struct DiagLevel {
    pub level: usize,
    pub stride: usize,
    /// Coarsest time gap in the partition.
    pub mesh: f64,
    /// Per-path conditional-increment sums over the partition.
    pub per_path_sums: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RefinementDiagnostic {
    pub side: DriftSide,
    pub levels: Vec<DiagLevel>,
    /// Set when the requested number of levels exceeded the grid resolution.
    pub capped: bool,
}

impl RefinementDiagnostic {
    pub fn finest(&self) -> &DiagLevel {
        self.levels.last().expect("at least one level")
    }
}

fn partition_indices(steps: usize, stride: usize) -> Vec<TimeIdx> {
    let mut idx: Vec<TimeIdx> = (0..steps).step_by(stride.max(1)).collect();
    idx.push(steps);
    idx.dedup();
    idx
}

/// Conditional-increment sums of a grid process over a nested dyadic family of
/// partitions. Level `levels` is the grid itself; level `l` uses every
/// `2^(levels-l)`-th grid point. Forward sums condition each increment on the
/// information at the left partition point, backward sums at the right one.
pub fn partition_sum_diagnostic(
    session: &Session<'_>,
    process: &[Var],
    side: DriftSide,
    levels: usize,
) -> RefinementDiagnostic {
    let model = session.model();
    let steps = model.steps();
    assert_eq!(process.len(), steps + 1);
    let levels = levels.max(1);
    let capped = levels > 1 && (1usize << (levels - 1)) > steps;

    let mut diff_vars: BTreeMap<(TimeIdx, TimeIdx), Var> = BTreeMap::new();
    let mut diff = |a: TimeIdx, b: TimeIdx| -> Var {
        *diff_vars.entry((a, b)).or_insert_with(|| {
            let hi = session.values(process[b]);
            let lo = session.values(process[a]);
            session.register_values(hi.iter().zip(lo.iter()).map(|(x, y)| x - y).collect())
        })
    };

    let mut out = Vec::with_capacity(levels);
    for level in 1..=levels {
        let stride = (1usize << (levels - level)).min(steps.max(1));
        let idx = partition_indices(steps, stride);
        let mesh = idx
            .windows(2)
            .map(|w| model.grid()[w[1]] - model.grid()[w[0]])
            .fold(0.0, f64::max);
        let per_path_sums = model
            .paths()
            .iter()
            .map(|path| {
                idx.windows(2)
                    .map(|w| {
                        let (a, b) = (w[0], w[1]);
                        let anchor = match side {
                            DriftSide::Forward => a,
                            DriftSide::Backward => b,
                        };
                        let cell = ConditioningEvent::state_cell(
                            model,
                            path.states[anchor],
                            anchor,
                            Side::Right,
                        );
                        session.cond(diff(a, b), &cell)
                    })
                    .sum()
            })
            .collect();
        out.push(DiagLevel {
            level,
            stride,
            mesh,
            per_path_sums,
        });
    }
    RefinementDiagnostic {
        side,
        levels: out,
        capped,
    }
}

/// Monte Carlo variant of the partition sums for models that cannot be
/// enumerated: conditional expectations are replaced by empirical cell means
/// over the draws, and the per-draw sums are returned.
pub fn partition_sum_estimate(
    grid: &[f64],
    draws: &[FreePath],
    process: impl Fn(&FreePath, TimeIdx) -> f64,
    side: DriftSide,
    levels: usize,
) -> RefinementDiagnostic {
    let steps = grid.len() - 1;
    let levels = levels.max(1);
    let capped = levels > 1 && (1usize << (levels - 1)) > steps;
    let mut out = Vec::with_capacity(levels);
    for level in 1..=levels {
        let stride = (1usize << (levels - level)).min(steps.max(1));
        let idx = partition_indices(steps, stride);
        let mesh = idx
            .windows(2)
            .map(|w| grid[w[1]] - grid[w[0]])
            .fold(0.0, f64::max);
        // empirical cell means of each increment, keyed by anchor state
        let mut sums = vec![0.0; draws.len()];
        for w in idx.windows(2) {
            let (a, b) = (w[0], w[1]);
            let anchor = match side {
                DriftSide::Forward => a,
                DriftSide::Backward => b,
            };
            let mut acc: BTreeMap<&InformationState, (usize, f64)> = BTreeMap::new();
            for path in draws {
                let inc = process(path, b) - process(path, a);
                let entry = acc.entry(&path.states[anchor]).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += inc;
            }
            for (i, path) in draws.iter().enumerate() {
                let (n, total) = acc[&path.states[anchor]];
                sums[i] += total / n as f64;
            }
        }
        out.push(DiagLevel {
            level,
            stride,
            mesh,
            per_path_sums: sums,
        });
    }
    RefinementDiagnostic {
        side,
        levels: out,
        capped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{random_model, GeneratorConfig};
    use crate::measures::{
        backward_compensator_atoms, counting_atoms, forward_compensator_atoms,
    };
    use crate::representation::RESIDUAL_TOL;
    use rand::SeedableRng;

    fn small_model() -> CompiledModel {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        random_model(
            &GeneratorConfig {
                pieces: 2,
                steps: 3,
                mark_count: 2,
                ..Default::default()
            },
            &mut rng,
        )
        .compile()
        .unwrap()
    }

    #[test]
    fn deterministic_model_simulates_identically() {
        let mut b = crate::model::builder::TableBuilder::new();
        b.node(vec![], vec![(CompositeEvent::empty(), 1.0)]);
        let compiled = ScenarioModel::new(
            vec![0.0, 1.0],
            vec!["a".to_string()],
            1,
            b.build(),
        )
        .unwrap()
        .compile()
        .unwrap();
        let draws = simulate_paths(&compiled, &SimulationConfig { seed: 5, n_paths: 64 });
        assert!(draws.iter().all(|&d| d == 0));
    }

    #[test]
    fn same_seed_same_draws() {
        let compiled = small_model();
        let cfg = SimulationConfig {
            seed: 404,
            n_paths: 256,
        };
        assert_eq!(
            simulate_paths(&compiled, &cfg),
            simulate_paths(&compiled, &cfg)
        );
    }

    #[test]
    fn bernoulli_frequency_within_binomial_error() {
        let mut b = crate::model::builder::TableBuilder::new();
        b.node(
            vec![],
            vec![
                (
                    CompositeEvent::new(vec![crate::model::Elementary::Innovate {
                        piece: 1,
                        mark: 0,
                    }])
                    .unwrap(),
                    0.5,
                ),
                (CompositeEvent::empty(), 0.5),
            ],
        );
        let compiled = ScenarioModel::new(vec![0.0, 1.0], vec!["a".to_string()], 1, b.build())
            .unwrap()
            .compile()
            .unwrap();
        let n = 100_000usize;
        let draws = simulate_paths(&compiled, &SimulationConfig { seed: 7, n_paths: n });
        let hits = draws
            .iter()
            .filter(|&&d| compiled.paths()[d].innovation_idx(1).is_some())
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 4.0 / (n as f64).sqrt(), "freq {freq}");
    }

    #[test]
    fn empirical_frequencies_converge_to_enumeration() {
        let compiled = small_model();
        let distance = |n: usize| -> f64 {
            let draws = simulate_paths(&compiled, &SimulationConfig { seed: 3, n_paths: n });
            let mut counts = vec![0usize; compiled.paths().len()];
            for d in draws {
                counts[d] += 1;
            }
            compiled
                .paths()
                .iter()
                .zip(&counts)
                .map(|(path, &count)| (count as f64 / n as f64 - path.probability).powi(2))
                .sum()
        };
        // squared frequency distance shrinks roughly like 1/n
        let coarse = distance(2_000);
        let fine = distance(200_000);
        assert!(fine < coarse / 10.0, "coarse {coarse}, fine {fine}");
        // and the chi-square statistic stays at its dof scale
        let n = 200_000usize;
        let draws = simulate_paths(&compiled, &SimulationConfig { seed: 3, n_paths: n });
        let mut counts = vec![0usize; compiled.paths().len()];
        for d in draws {
            counts[d] += 1;
        }
        let mut chi2 = 0.0;
        for (path, &count) in compiled.paths().iter().zip(&counts) {
            let expected = path.probability * n as f64;
            chi2 += (count as f64 - expected).powi(2) / expected;
        }
        assert!(
            chi2 < 5.0 * compiled.paths().len() as f64,
            "chi2 {chi2} for {} paths",
            compiled.paths().len()
        );
    }

    #[test]
    fn constant_functional_estimates_exactly() {
        let compiled = small_model();
        let draws = simulate_paths(
            &compiled,
            &SimulationConfig {
                seed: 2,
                n_paths: 500,
            },
        );
        let values = vec![0.3; compiled.paths().len()];
        let estimates = estimate_projection(&compiled, &draws, &values);
        for cell in estimates.cells.values() {
            assert_eq!(cell.estimate, 0.3);
        }
    }

    #[test]
    fn absent_cells_are_flagged_not_zero() {
        let compiled = small_model();
        // a single draw cannot visit every cell of this model
        let draws = simulate_paths(&compiled, &SimulationConfig { seed: 1, n_paths: 1 });
        let values = vec![1.0; compiled.paths().len()];
        let estimates = estimate_projection(&compiled, &draws, &values);
        assert!(!estimates.absent.is_empty());
        for key in &estimates.absent {
            assert!(!estimates.cells.contains_key(key));
        }
    }

    #[test]
    fn free_simulation_matches_tree_simulation_statistics() {
        let compiled = small_model();
        let cfg = SimulationConfig {
            seed: 21,
            n_paths: 4_000,
        };
        let tree_draws = simulate_paths(&compiled, &cfg);
        let free_draws = simulate_free(compiled.model(), &cfg).unwrap();
        // identical streams must yield identical event sequences
        for (d, f) in tree_draws.iter().zip(&free_draws) {
            assert_eq!(compiled.paths()[*d].events, f.events);
        }
    }

    #[test]
    fn constant_process_has_zero_partition_sums() {
        let compiled = small_model();
        let session = Session::new(&compiled);
        let c = session.register(|_| 1.25);
        let process = vec![c; compiled.steps() + 1];
        for side in [DriftSide::Forward, DriftSide::Backward] {
            let diag = partition_sum_diagnostic(&session, &process, side, 3);
            for level in &diag.levels {
                assert!(level.per_path_sums.iter().all(|&s| s == 0.0));
            }
        }
    }

    #[test]
    fn compensated_jump_process_sums_vanish_at_finest_level() {
        let compiled = small_model();
        let session = Session::new(&compiled);
        // V = counting minus matching compensator, cumulated over all atoms
        for side in [DriftSide::Forward, DriftSide::Backward] {
            let process: Vec<Var> = (0..=compiled.steps())
                .map(|k| {
                    session.register(|p: &crate::model::PathRecord| {
                        let mu = counting_atoms(p);
                        mu.atoms()
                            .iter()
                            .filter(|a| a.key.time_idx <= k)
                            .map(|a| a.mass)
                            .sum::<f64>()
                    })
                })
                .collect();
            // subtract the compensator cumulatives path by path
            let adjusted: Vec<Var> = (0..=compiled.steps())
                .map(|k| {
                    let base = session.values(process[k]);
                    let vals: Vec<f64> = compiled
                        .paths()
                        .iter()
                        .map(|p| {
                            let comp = match side {
                                DriftSide::Forward => forward_compensator_atoms(&session, p),
                                DriftSide::Backward => backward_compensator_atoms(&session, p),
                            };
                            let total: f64 = comp
                                .atoms()
                                .iter()
                                .filter(|a| a.key.time_idx <= k)
                                .map(|a| a.mass)
                                .sum();
                            base[p.id] - total
                        })
                        .collect();
                    session.register_values(vals)
                })
                .collect();
            let diag = partition_sum_diagnostic(&session, &adjusted, side, 2);
            for &sum in &diag.finest().per_path_sums {
                assert!(sum.abs() < RESIDUAL_TOL, "side {side:?}: {sum}");
            }
        }
    }

    #[test]
    fn predictable_process_sums_equal_increment() {
        let compiled = small_model();
        let session = Session::new(&compiled);
        for side in [DriftSide::Forward, DriftSide::Backward] {
            let process: Vec<Var> = (0..=compiled.steps())
                .map(|k| {
                    session.register(|p: &crate::model::PathRecord| {
                        let comp = match side {
                            DriftSide::Forward => forward_compensator_atoms(&session, p),
                            DriftSide::Backward => backward_compensator_atoms(&session, p),
                        };
                        comp.atoms()
                            .iter()
                            .filter(|a| a.key.time_idx <= k)
                            .map(|a| a.mass)
                            .sum::<f64>()
                    })
                })
                .collect();
            let diag = partition_sum_diagnostic(&session, &process, side, 1);
            let last = session.values(process[compiled.steps()]);
            let first = session.values(process[0]);
            for (path, &sum) in compiled.paths().iter().zip(&diag.finest().per_path_sums) {
                let increment = last[path.id] - first[path.id];
                assert!(
                    (sum - increment).abs() < RESIDUAL_TOL,
                    "side {side:?}: {sum} vs {increment}"
                );
            }
        }
    }

    #[test]
    fn level_cap_is_flagged()  {
        let compiled = small_model();
        let session = Session::new(&compiled);
        let c = session.register(|_| 0.0);
        let process = vec![c; compiled.steps() + 1];
        let diag = partition_sum_diagnostic(&session, &process, DriftSide::Forward, 12);
        assert!(diag.capped);
        assert_eq!(diag.levels.len(), 12);
    }
}
