//! Property tests over randomly generated models: probability conservation,
//! the partition structure of information states, the single-atom property of
//! the counting measure, lifecycle ordering, and document round-trips.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imr::document::{ApplicationDocs, Meta, ModelDocument};
use imr::engine::Session;
use imr::generator::{random_functional, random_model, GeneratorConfig};
use imr::measures::counting_atoms;
use imr::model::{CompiledModel, Side, PROB_TOL};
use imr::representation::lemma_telescoping_check;

fn arb_model() -> impl Strategy<Value = CompiledModel> {
    (1u8..=3, 2usize..=5, 1u8..=3, any::<u64>(), any::<bool>()).prop_map(
        |(pieces, steps, mark_count, seed, allow_deletions)| {
            let cfg = GeneratorConfig {
                pieces,
                steps,
                mark_count,
                max_branches: 3,
                allow_deletions,
                slot_innovations: false,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_model(&cfg, &mut rng).compile().expect("valid model")
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_probabilities_sum_to_one(compiled in arb_model()) {
        let total: f64 = compiled.paths().iter().map(|p| p.probability).sum();
        prop_assert!((total - 1.0).abs() < PROB_TOL, "total {total}");
        prop_assert!(compiled.paths().iter().all(|p| p.probability > 0.0));
    }

    #[test]
    fn information_states_partition_unity(compiled in arb_model()) {
        // at every time exactly one state cell holds per path, and the cell
        // probabilities sum to one
        let session = Session::new(&compiled);
        for k in 0..=compiled.steps() {
            for side in [Side::Right, Side::Left] {
                if side == Side::Left && k == 0 {
                    continue;
                }
                let mut total = 0.0;
                for (state, prob) in session.state_cells_at(k, side) {
                    let _ = state;
                    total += prob;
                }
                prop_assert!((total - 1.0).abs() < PROB_TOL);
            }
        }
    }

    #[test]
    fn counting_measure_has_single_atoms(compiled in arb_model()) {
        for path in compiled.paths() {
            let atoms = counting_atoms(path);
            let mut seen_times = std::collections::BTreeSet::new();
            for atom in atoms.atoms() {
                prop_assert_eq!(atom.mass, 1.0);
                // at most one atom per grid time, covering exactly the events
                prop_assert!(seen_times.insert(atom.key.time_idx));
                let (set, marks) = path.joint_event_at(atom.key.time_idx).unwrap();
                prop_assert_eq!(&set, &atom.key.index_set);
                prop_assert_eq!(&marks, &atom.key.marks);
            }
            // event-free times carry no atom
            for k in 1..=compiled.steps() {
                prop_assert_eq!(path.has_event_at(k), seen_times.contains(&k));
            }
        }
    }

    #[test]
    fn no_instant_deletion_and_lifecycle_order(compiled in arb_model()) {
        for path in compiled.paths() {
            for piece in 1..=compiled.model().max_pieces() {
                if let Some(deleted) = path.deletion_idx(piece) {
                    let innovated = path.innovation_idx(piece).expect("deleted piece was innovated");
                    prop_assert!(innovated < deleted, "piece {piece} lifecycle");
                }
            }
        }
    }

    #[test]
    fn left_state_is_previous_right_state(compiled in arb_model()) {
        let session = Session::new(&compiled);
        let xi = session.register(|p| p.probability * 7.0 + p.events.len() as f64);
        let projections = session.optional_projection(xi);
        for projection in &projections {
            // on the grid the left limit carries exactly the previous
            // post-event value, event or not
            for k in 1..=compiled.steps() {
                prop_assert_eq!(projection.left[k - 1], projection.right[k - 1]);
            }
        }
    }

    #[test]
    fn document_round_trip_preserves_law(compiled in arb_model()) {
        let document = ModelDocument {
            meta: Meta::default(),
            model: compiled.model().clone(),
            payoffs: BTreeMap::new(),
            processes: BTreeMap::new(),
            applications: ApplicationDocs::default(),
        };
        let text = document.to_json().unwrap();
        let reparsed = ModelDocument::from_json(&text).unwrap();
        let again = reparsed.compile().unwrap();
        prop_assert_eq!(compiled.paths().len(), again.paths().len());
        let key = |p: &imr::model::PathRecord, compiled: &CompiledModel| -> (String, u64) {
            let events = p
                .events
                .iter()
                .map(|e| e.encode(compiled.marks()))
                .collect::<Vec<_>>()
                .join("|");
            (events, p.probability.to_bits())
        };
        let mut original: Vec<_> = compiled.paths().iter().map(|p| key(p, &compiled)).collect();
        let mut round_tripped: Vec<_> = again.paths().iter().map(|p| key(p, &again)).collect();
        original.sort();
        round_tripped.sort();
        prop_assert_eq!(original, round_tripped);
    }
}

#[test]
fn telescoping_identity_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10 {
        let cfg = GeneratorConfig {
            pieces: 1 + i % 3,
            steps: 2 + (i as usize) % 3,
            mark_count: 2,
            max_branches: 3,
            allow_deletions: true,
            slot_innovations: false,
        };
        let compiled = random_model(&cfg, &mut rng).compile().unwrap();
        let session = Session::new(&compiled);
        let xi = session.register_values(random_functional(compiled.paths().len(), &mut rng));
        for row in lemma_telescoping_check(&session, xi) {
            assert!(
                row.gap() < 1e-12,
                "state {} t={}: lhs {} rhs {}",
                row.state_label,
                row.time_idx,
                row.lhs,
                row.rhs
            );
        }
    }
}
