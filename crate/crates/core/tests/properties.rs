mod common;

use proptest::prelude::*;

use common::*;
use seqtag::crf::oracle::enumerate_oracle;
use seqtag::crf::{
    constrained_decode, log_partition, viterbi_decode, CrfParams, EmissionTable, TransitionMask,
};
use seqtag::data::scheme::{bio_to_bioes, bioes_to_bio, is_valid_bioes};
use seqtag::eval::{entity_f1, extract_entities};
use seqtag::train::{clip_gradients, global_grad_norm};
use seqtag::{ParamSet, Tensor};

fn lattice() -> impl Strategy<Value = (EmissionTable, CrfParams)> {
    (1usize..=5, 2usize..=4).prop_flat_map(|(n, t)| {
        (
            prop::collection::vec(-4.0f64..4.0, n * t),
            prop::collection::vec(-2.0f64..2.0, t * t),
            prop::collection::vec(-2.0f64..2.0, t),
            prop::collection::vec(-2.0f64..2.0, t),
        )
            .prop_map(move |(e, tr, b, en)| {
                (
                    EmissionTable::new(n, t, e).unwrap(),
                    CrfParams::new(t, tr, b, en).unwrap(),
                )
            })
    })
}

fn bio_seq() -> impl Strategy<Value = Vec<String>> {
    (any::<u64>(), 1usize..=40).prop_map(|(seed, len)| random_bio(&mut rng(seed), len))
}

proptest! {
    #[test]
    fn forward_matches_enumeration((em, p) in lattice()) {
        let e = enumerate_oracle(&em, &p).unwrap();
        prop_assert!((log_partition(&em, &p).unwrap() - e.log_z).abs() <= 1e-9);
        let total: f64 = e.distribution.iter().map(|(_, q)| q).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn viterbi_beats_every_sequence((em, p) in lattice()) {
        let (_, score) = viterbi_decode(&em, &p).unwrap();
        let e = enumerate_oracle(&em, &p).unwrap();
        prop_assert!((score - e.best_score).abs() <= 1e-10);
    }

    #[test]
    fn unconstrained_mask_is_plain_viterbi((em, p) in lattice()) {
        let mask = TransitionMask::allow_all(p.num_tags());
        prop_assert_eq!(constrained_decode(&em, &p, &mask).unwrap(), viterbi_decode(&em, &p).unwrap().0);
    }

    #[test]
    fn scheme_round_trip(bio in bio_seq()) {
        let bioes = bio_to_bioes(&bio).unwrap();
        prop_assert!(is_valid_bioes(&bioes).unwrap());
        prop_assert_eq!(&bioes_to_bio(&bioes).unwrap(), &bio);
        prop_assert_eq!(extract_entities(&bio).unwrap(), extract_entities(&bioes).unwrap());
    }

    #[test]
    fn f1_symmetric_and_bounded(a in bio_seq(), seed in any::<u64>()) {
        let b = random_bio(&mut rng(seed), a.len());
        let (a, b) = (vec![a], vec![b]);
        let ab = entity_f1(&a, &b).unwrap();
        let ba = entity_f1(&b, &a).unwrap();
        prop_assert!((ab.overall.f1 - ba.overall.f1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.overall.f1));
        let own = entity_f1(&a, &a).unwrap().overall.f1;
        let has_entities = !extract_entities(&a[0]).unwrap().is_empty();
        prop_assert_eq!(own, if has_entities { 1.0 } else { 0.0 });
    }

    #[test]
    fn clipping_bounds_norm(values in prop::collection::vec(-100.0f64..100.0, 1..30), max in 0.1f64..10.0) {
        let mut params = ParamSet::new();
        let id = params.insert("w", Tensor::vector(vec![0.0; values.len()]).unwrap());
        params.get_mut(id).grad_mut().unwrap().copy_from_slice(&values);
        clip_gradients(&mut params, max).unwrap();
        prop_assert!(global_grad_norm(&params) <= max + 1e-9);
    }
}
