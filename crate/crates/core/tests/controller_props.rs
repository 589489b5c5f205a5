use nas_core::controller::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rewarded(p: &PolicyParams, m: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = sample_batch(p, m, &mut rng).unwrap();
    for x in t.iter_mut() {
        x.reward = Some(rng.random_range(-1.0..1.0));
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn categoricals_are_normalized(arities in prop::collection::vec(1usize..7, 1..5), seed in any::<u64>()) {
        let p = init_policy(&arities, seed, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = sample_batch(&p, 1, &mut rng).unwrap().remove(0).encoding;
        for probs in action_probabilities(&p, &enc) {
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn initial_heads_are_near_uniform(arities in prop::collection::vec(2usize..9, 1..5), seed in any::<u64>()) {
        let p = init_policy(&arities, seed, 32, 16);
        let enc: Vec<usize> = arities.iter().map(|a| a - 1).collect();
        for (probs, &a) in action_probabilities(&p, &enc).iter().zip(&arities) {
            let h: f64 = probs.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
            prop_assert!(h >= 0.9 * (a as f64).ln());
        }
    }

    #[test]
    fn two_slot_gradient_matches_finite_differences(a in 1usize..6, b in 1usize..6, seed in any::<u64>()) {
        let mut p = init_policy(&[a, b], seed, 4, 3);
        let t = rewarded(&p, 4, seed ^ 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let cfg = PpoConfig::default();
        let (_, g, _) = loss_and_gradient(&p, &t, &cfg).unwrap();
        let h = 1e-4;
        for i in 0..p.len() {
            let mut up = p.clone();
            up.data[i] += h;
            let mut down = p.clone();
            down.data[i] -= h;
            let fd = (ppo_loss(&up, &t, &cfg).unwrap().0 - ppo_loss(&down, &t, &cfg).unwrap().0) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6f64.max(1e-3 * fd.abs()), "coord {}: {} vs {}", i, fd, g[i]);
        }
    }
}
