use nas_core::space::*;
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn builtin(name: &str) -> SearchSpace {
    build_space(builtin_space(name).unwrap()).unwrap()
}

#[test]
fn decode_is_acyclic_on_random_encodings() {
    for name in BUILTIN_SPACES {
        let space = builtin(name);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let enc = sample_random_with(&space, &mut rng);
            let g = decode(&space, &enc).unwrap();
            assert!(g.topological_order().is_some(), "{name}: cycle for {:?}", enc.0);
        }
    }
}

#[test]
fn read_back_reproduces_encodings() {
    for name in BUILTIN_SPACES {
        let space = builtin(name);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let enc = sample_random_with(&space, &mut rng);
            let g = decode(&space, &enc).unwrap();
            assert_eq!(read_encoding(&space, &g), Some(enc), "{name}");
        }
    }
}

proptest! {
    #[test]
    fn size_is_enumeration_count(arities in prop::collection::vec(1usize..8, 1..6)) {
        prop_assume!(arities.iter().product::<usize>() <= 10_000);
        let space = build_space(SpaceSpec::flat("x", 3, &arities)).unwrap();
        let count = enumerate(&space.arities()).count();
        prop_assert_eq!(space_size(&space), BigUint::from(count));
    }

    #[test]
    fn flat_round_trip(arities in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
        let space = build_space(SpaceSpec::flat("x", 3, &arities)).unwrap();
        let enc = sample_random(&space, seed);
        let g = decode(&space, &enc).unwrap();
        prop_assert!(g.topological_order().is_some());
        prop_assert_eq!(read_encoding(&space, &g), Some(enc));
    }
}
