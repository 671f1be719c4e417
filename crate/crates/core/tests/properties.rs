use std::f64::consts::TAU;

use approx::assert_relative_eq;
use chienn::chienn::cyclic_windows;
use chienn::datagen::{chirality_oracle, gen_random_molecule};
use chienn::geometry::RigidTransform;
use chienn::molgraph::{apply_rigid, MolecularGraph};
use chienn::ordering::{canonical_transform, is_cyclic_shift, projection_angle};
use chienn::train::{cosine_warmup_lr, split_indices, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-10.0f64..10.0)
}

proptest! {
    #[test]
    fn windows_use_each_position_once_per_slot(d in 0usize..12, k in 1usize..6) {
        let w = cyclic_windows(d, k);
        prop_assert_eq!(w.len(), d);
        for slot in 0..k {
            let mut seen: Vec<usize> = w.iter().filter_map(|win| win[slot]).collect();
            seen.sort_unstable();
            if slot < d.min(k) {
                prop_assert_eq!(seen, (0..d).collect::<Vec<_>>());
            } else {
                prop_assert!(seen.is_empty());
            }
        }
    }

    #[test]
    fn rotations_are_cyclic_shifts(v in prop::collection::vec(0u8..50, 0..10), s in 0usize..10) {
        let mut r = v.clone();
        if !r.is_empty() {
            let n = s % r.len();
            r.rotate_left(n);
        }
        prop_assert!(is_cyclic_shift(&v, &r));
    }

    #[test]
    fn canonical_frame_places_bond_on_x(cj in point(), ck in point()) {
        prop_assume!((0..3).map(|i| (ck[i] - cj[i]).powi(2)).sum::<f64>() > 1e-6);
        let t = canonical_transform(cj, ck).unwrap();
        let len = (0..3).map(|i| (ck[i] - cj[i]).powi(2)).sum::<f64>().sqrt();
        let (a, b) = (t.apply(cj), t.apply(ck));
        for v in a {
            prop_assert!(v.abs() < 1e-9);
        }
        assert_relative_eq!(b[0], len, max_relative = 1e-12);
        prop_assert!(b[1].abs() < 1e-9 && b[2].abs() < 1e-9);
    }

    #[test]
    fn projection_angle_in_range(p in point()) {
        prop_assume!(p[1].hypot(p[2]) > 1e-6);
        let a = projection_angle(p).unwrap();
        prop_assert!((0.0..TAU).contains(&a));
        assert_relative_eq!(a.cos() * p[1].hypot(p[2]), p[1], epsilon = 1e-9);
    }

    #[test]
    fn schedule_stays_between_zero_and_base(epochs in 2usize..300, w_frac in 0.0f64..1.0, lr in 1e-6f64..1.0) {
        let cfg = TrainConfig { epochs, warmup_epochs: ((epochs as f64 * w_frac) as usize).min(epochs - 1), base_lr: lr, ..TrainConfig::default() };
        for e in 0..epochs {
            let v = cosine_warmup_lr(e, &cfg).unwrap();
            prop_assert!(v >= 0.0 && v <= lr * (1.0 + 1e-12));
        }
        prop_assert!(cosine_warmup_lr(epochs, &cfg).is_err());
    }

    #[test]
    fn split_is_a_partition_by_pair(pairs in 1u64..200, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..pairs).flat_map(|p| [p, p]).collect();
        let parts = split_indices(&ids, seed);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ids.len()).collect::<Vec<_>>());
        for part in &parts {
            for &i in part {
                prop_assert!(part.contains(&(i ^ 1)));
            }
        }
    }

    #[test]
    fn oracle_is_invariant_under_proper_motion(c in point(), s in prop::array::uniform4(point()), seed in any::<u64>()) {
        let subs = [(1, s[0]), (2, s[1]), (3, s[2]), (4, s[3])];
        if let Ok(label) = chirality_oracle(c, subs) {
            let t = RigidTransform::random(&mut ChaCha8Rng::seed_from_u64(seed), 5.0);
            let moved = chirality_oracle(t.apply(c), subs.map(|(r, p)| (r, t.apply(p))));
            prop_assert_eq!(moved.ok(), Some(label));
        }
    }

    #[test]
    fn graph_json_round_trip(seed in any::<u64>(), n in 1usize..15) {
        let g = gen_random_molecule(&mut ChaCha8Rng::seed_from_u64(seed), n).unwrap();
        let g = apply_rigid(&g, &RigidTransform::random(&mut ChaCha8Rng::seed_from_u64(!seed), 3.0)).unwrap();
        let back: MolecularGraph = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }
}
