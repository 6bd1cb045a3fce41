//! Property tests over randomized inputs.

use lafs::augment::{landmark_perturb, landmark_shuffle, subsample_landmarks, PerturbConfig, SubsampleOrder};
use lafs::checkpoint::Checkpoint;
use lafs::config::KvConfig;
use lafs::eval::{kfold_accuracy, tar_at_far, ScoreSet};
use lafs::finetune::layerwise_lr;
use lafs::geometry::{extract_patches, hflip, Image, LandmarkSet};
use lafs::rng::CounterRng;
use lafs::{Tape, Tensor};
use proptest::prelude::*;

fn landmarks(n: usize, seed: u64) -> LandmarkSet {
    let mut rng = CounterRng::new(seed);
    let pts: Vec<[f32; 2]> = (0..n).map(|_| [rng.uniform() as f32, rng.uniform() as f32]).collect();
    LandmarkSet::from_points(&pts)
}

fn sorted_bits(lm: &LandmarkSet) -> Vec<(u32, u32)> {
    let mut v: Vec<(u32, u32)> = lm.points().map(|[x, y]| (x.to_bits(), y.to_bits())).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_indices_are_distinct_and_in_range(seed: u64, n in 1usize..300, frac in 0.0f64..=1.0) {
        let k = ((n as f64 * frac) as usize).max(1).min(n);
        let idx = CounterRng::new(seed).sample_indices(n, k);
        prop_assert_eq!(idx.len(), k);
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), k);
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn shuffle_preserves_the_landmark_multiset(seed: u64, n in 1usize..100) {
        let lm = landmarks(n, seed ^ 1);
        prop_assert_eq!(sorted_bits(&landmark_shuffle(&lm, seed)), sorted_bits(&lm));
    }

    #[test]
    fn subsample_draws_distinct_rows_of_the_source(seed: u64, n in 1usize..100, k in 1usize..100) {
        let lm = landmarks(n, seed ^ 2);
        let r = subsample_landmarks(&lm, k, seed, SubsampleOrder::Drawn);
        if k > n {
            prop_assert!(r.is_err());
        } else {
            let s = r.unwrap();
            prop_assert_eq!(s.landmarks.len(), k);
            for (row, &i) in s.indices.iter().enumerate() {
                prop_assert_eq!(s.landmarks.point(row), lm.point(i));
            }
            let mut u = s.indices.clone();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), k);
        }
    }

    #[test]
    fn perturbation_stays_in_the_unit_square(seed: u64, alpha in 0.0f32..20.0, size in 2usize..200) {
        let lm = landmarks(50, seed);
        let p = landmark_perturb(&lm, &PerturbConfig { alpha, stream: 0 }, size, seed).unwrap();
        prop_assert!(p.points().all(|[x, y]| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn hflip_is_an_involution(seed: u64, h in 1usize..12, w in 1usize..12) {
        let mut rng = CounterRng::new(seed);
        let img = Image::new(1, h, w, (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap();
        prop_assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn patches_stay_within_pixel_range(seed: u64, p in 1usize..9) {
        let mut rng = CounterRng::new(seed);
        let img = Image::new(1, 16, 16, (0..256).map(|_| rng.uniform() as f32).collect()).unwrap();
        let ps = extract_patches(&img, &landmarks(8, seed), p).unwrap();
        prop_assert!(ps.patches.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed: u64, shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..6)) {
        let mut rng = CounterRng::new(seed);
        let mut ck = Checkpoint::new();
        for (i, s) in shapes.iter().enumerate() {
            let t = Tensor::from_fn(s, |_| f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff));
            ck.entries.push((format!("p{i}"), t));
        }
        ck.meta.insert("seed".into(), seed.to_string());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((_, a), (_, b)) in back.entries.iter().zip(&ck.entries) {
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn config_text_round_trips(pairs in prop::collection::btree_map("[a-z_]{1,8}", "[a-z0-9.,]{0,8}", 0..10)) {
        let mut c = KvConfig::default();
        for (k, v) in &pairs {
            c.set(k, v);
        }
        let back = KvConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }

    #[test]
    fn tar_is_monotone_in_far(seed: u64) {
        let mut rng = CounterRng::new(seed);
        let s = ScoreSet {
            genuine: (0..50).map(|_| rng.normal() as f32 + 1.0).collect(),
            impostor: (0..80).map(|_| rng.normal() as f32).collect(),
        };
        let tars: Vec<f64> = [0.01, 0.05, 0.1, 0.5, 1.0].iter().map(|&f| tar_at_far(&s, f).unwrap().tar).collect();
        prop_assert!(tars.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(tars[4], 1.0);
    }

    #[test]
    fn kfold_accuracy_is_a_rate(seed: u64, n in 10usize..200) {
        let mut rng = CounterRng::new(seed);
        let recs: Vec<(f32, bool)> = (0..n).map(|_| (rng.normal() as f32, rng.bernoulli(0.5))).collect();
        let k = kfold_accuracy(&recs, 10).unwrap();
        prop_assert!(k.folds.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!((0.0..=1.0).contains(&k.mean));
    }

    #[test]
    fn layerwise_lr_grows_toward_the_head(decay in 0.01f64..=1.0, total in 1usize..20) {
        let lrs: Vec<f64> = (0..=total).map(|i| layerwise_lr(1.0, decay, i, total)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(lrs[total], 1.0);
    }

    #[test]
    fn matmul_gradient_is_the_transposed_product(seed: u64, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = CounterRng::new(seed);
        let a = Tensor::from_fn(&[m, k], |_| rng.normal() as f32);
        let b = Tensor::from_fn(&[k, n], |_| rng.normal() as f32);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // d(sum AB)/dA[i,p] = sum_j B[p,j].
        let ga = g.get(va).unwrap();
        for i in 0..m {
            for p in 0..k {
                let want: f32 = (0..n).map(|j| b.data()[p * n + j]).sum();
                prop_assert!((ga.data()[i * k + p] - want).abs() < 1e-5);
            }
        }
    }
}
