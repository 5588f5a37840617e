//! Module invariants as proptest runners. Each returns `Err` with the
//! shrunk counterexample so the same checks can back both `#[test]`s and the
//! acceptance report.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;
use sar_core::{
    category_dist, evaluate, gradients, laplace_factor, mae, pca_project, predict_mf, predict_rating,
    preference_scores, rmse, round_rating, split, stats, train_mf, train_nmf, AnyModel, Checkpoint, Pca, RatingDataset,
    SarModel, Side, TrainConfig, Trainer,
};

use super::{hp, random_batch, random_params, rng};

pub type Property = fn(u32) -> Result<(), String>;

/// Every invariant, by name.
pub const ALL: &[(&str, Property)] = &[
    ("category simplex", category_simplex),
    ("logit shift invariance", logit_shift_invariance),
    ("laplace bounds/symmetry/monotonicity", laplace_properties),
    ("prediction strictly inside (1, R)", prediction_range),
    ("soft-max shift invariance", score_shift_invariance),
    ("omega sign-flip invariance", omega_sign_flip),
    ("gradient locality", gradient_locality),
    ("split partition", split_partition),
    ("reindex round trip", reindex_round_trip),
    ("sparsity vs brute force", sparsity_brute_force),
    ("NMF nonnegativity", nmf_nonnegative),
    ("MF loss windows non-increasing", mf_loss_windows),
    ("MF predictions in [1, R]", mf_prediction_range),
    ("PCA variance vs independent eigensolver", pca_variance),
    ("PCA translation invariance", pca_translation),
    ("PCA orthonormal axes", pca_orthonormal),
    ("rmse >= mae_raw >= 0", rmse_dominates_mae),
    ("rounded predictions are integers in [1, R]", rounded_integers),
    ("AdaDelta accumulators nonnegative and finite", adadelta_accumulators),
    ("training determinism", training_determinism),
    ("evaluate determinism", evaluate_determinism),
    ("checkpoint round trip", checkpoint_round_trip),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// (|F|, |C|, |R|, seed)
fn small_model() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=4, 2usize..=6, any::<u64>())
}

/// A ratings table over `users` x `items` with each cell filled with
/// probability `fill`; at least one cell is always present.
fn random_table(users: usize, items: usize, fill: f64, seed: u64) -> Vec<(u64, u64, u8)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for u in 0..users {
        for t in 0..items {
            if r.random_bool(fill) {
                out.push((1000 + 7 * u as u64, 50 + 3 * t as u64, r.random_range(1..=5u8)));
            }
        }
    }
    if out.is_empty() {
        out.push((1000, 50, 3));
    }
    out
}

fn dataset(users: usize, items: usize, fill: f64, seed: u64) -> RatingDataset {
    RatingDataset::from_raw_triples(random_table(users, items, fill, seed)).unwrap()
}

pub fn category_simplex(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), 0.1f64..60.0), |((f, c, r, seed), scale)| {
        let h = hp(f, c, r, 1.0, 0.0);
        let p = random_params(&h, 2, 2, scale, &mut rng(seed));
        for side in [Side::User, Side::Item] {
            for e in 0..2 {
                for n in 0..f {
                    let d = category_dist(&p, side, e, n).unwrap();
                    prop_assert!(d.iter().all(|&x| x >= 0.0));
                    prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
        Ok(())
    })
}

pub fn logit_shift_invariance(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), -100.0f64..100.0), |((f, c, r, seed), shift)| {
        let h = hp(f, c, r, 1.0, 0.0);
        let p = random_params(&h, 1, 1, 2.0, &mut rng(seed));
        let mut q = p.clone();
        q.user_logits.iter_mut().for_each(|x| *x += shift);
        for n in 0..f {
            let a = category_dist(&p, Side::User, 0, n).unwrap();
            let b = category_dist(&q, Side::User, 0, n).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
        Ok(())
    })
}

pub fn laplace_properties(cases: u32) -> Result<(), String> {
    run(
        cases,
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.01f64..5.0),
        |(a, b, c, sigma)| {
            let ab = laplace_factor(a, b, sigma).unwrap();
            prop_assert!(ab > 0.0 && ab <= 1.0);
            prop_assert_eq!(ab, laplace_factor(b, a, sigma).unwrap());
            prop_assert_eq!(laplace_factor(a, a, sigma).unwrap(), 1.0);
            let ac = laplace_factor(a, c, sigma).unwrap();
            if (a - b).abs() < (a - c).abs() {
                prop_assert!(ab >= ac);
            } else if (a - b).abs() > (a - c).abs() {
                prop_assert!(ab <= ac);
            }
            Ok(())
        },
    )
}

pub fn prediction_range(cases: u32) -> Result<(), String> {
    run(cases, small_model(), |(f, c, r, seed)| {
        let h = hp(f, c, r, 1.0, 0.0);
        let p = random_params(&h, 3, 3, 1.5, &mut rng(seed));
        for u in 0..3 {
            for t in 0..3 {
                let v = predict_rating(&p, &h, u, t).unwrap();
                prop_assert!(v > 1.0 && v < r as f64, "{v}");
            }
        }
        Ok(())
    })
}

pub fn score_shift_invariance(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), -3.0f64..3.0), |((f, c, r, seed), shift)| {
        let h = hp(f, c, r, 1.0, 0.0);
        let p = random_params(&h, 2, 2, 1.0, &mut rng(seed));
        // Adding the same constant to every table entry moves every level's
        // score by the same amount.
        let mut q = p.clone();
        q.tau.iter_mut().for_each(|x| *x += shift);
        let (s0, s1) = (
            preference_scores(&p, &h, 1, 0).unwrap(),
            preference_scores(&q, &h, 1, 0).unwrap(),
        );
        let d0 = s1[0] - s0[0];
        for (a, b) in s0.iter().zip(&s1) {
            prop_assert!((b - a - d0).abs() <= 1e-12);
        }
        let (a, b) = (
            predict_rating(&p, &h, 1, 0).unwrap(),
            predict_rating(&q, &h, 1, 0).unwrap(),
        );
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        Ok(())
    })
}

pub fn omega_sign_flip(cases: u32) -> Result<(), String> {
    run(cases, small_model(), |(f, c, r, seed)| {
        let h = hp(f, c, r, 1.0, 0.0);
        let p = random_params(&h, 2, 2, 1.0, &mut rng(seed));
        let mut q = p.clone();
        q.omega_u[0] = -q.omega_u[0];
        q.omega_t[1] = -q.omega_t[1];
        prop_assert_eq!(
            predict_rating(&p, &h, 0, 1).unwrap(),
            predict_rating(&q, &h, 0, 1).unwrap()
        );
        Ok(())
    })
}

pub fn gradient_locality(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), 1usize..=8), |((f, c, r, seed), len)| {
        let h = hp(f, c, r, 1.0, 0.05);
        let mut g = rng(seed);
        let p = random_params(&h, 5, 5, 1.0, &mut g);
        // Entities 3 and 4 never appear.
        let batch = random_batch(3, 3, len, r, &mut g);
        let grad = gradients(&p, &h, &batch).unwrap();
        let row = f * c;
        for e in 3..5 {
            prop_assert!(grad.user_logits[e * row..(e + 1) * row].iter().all(|&x| x == 0.0));
            prop_assert!(grad.item_logits[e * row..(e + 1) * row].iter().all(|&x| x == 0.0));
            prop_assert!(grad.omega_u[e] == 0.0 && grad.omega_t[e] == 0.0);
        }
        Ok(())
    })
}

pub fn split_partition(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            2usize..12,
            2usize..12,
            0.2f64..0.9,
            0.05f64..0.95,
            any::<u64>(),
            any::<u64>(),
        ),
        |(users, items, fill, rho, data_seed, seed)| {
            let ds = dataset(users, items, fill, data_seed);
            let Ok(sp) = split(&ds, rho, seed) else {
                // Only an empty side is a legal refusal.
                let n_train = (rho * ds.num_ratings() as f64).round() as usize;
                prop_assert!(n_train == 0 || n_train == ds.num_ratings());
                return Ok(());
            };
            let raw = |d: &RatingDataset| -> Vec<(u64, u64, u8)> {
                d.triples()
                    .iter()
                    .map(|r| {
                        (
                            d.users().raw_of(r.user).unwrap(),
                            d.items().raw_of(r.item).unwrap(),
                            r.rating,
                        )
                    })
                    .collect()
            };
            let (train, test) = (raw(&sp.train), raw(&sp.test));
            let a: BTreeSet<_> = train.iter().map(|x| (x.0, x.1)).collect();
            let b: BTreeSet<_> = test.iter().map(|x| (x.0, x.1)).collect();
            prop_assert!(a.is_disjoint(&b));
            let mut union: Vec<_> = train.into_iter().chain(test).collect();
            let mut source = raw(&ds);
            union.sort_unstable();
            source.sort_unstable();
            prop_assert_eq!(union, source);
            prop_assert_eq!(sp.train.num_ratings(), (rho * ds.num_ratings() as f64).round() as usize);
            Ok(())
        },
    )
}

pub fn reindex_round_trip(cases: u32) -> Result<(), String> {
    run(
        cases,
        proptest::collection::vec((any::<u64>(), any::<u64>(), 1u8..=5), 1..40),
        |triples| {
            let mut seen = BTreeSet::new();
            let triples: Vec<_> = triples.into_iter().filter(|t| seen.insert((t.0, t.1))).collect();
            let ds = RatingDataset::from_raw_triples(triples.clone()).unwrap();
            let mut first_users = Vec::new();
            for t in &triples {
                if !first_users.contains(&t.0) {
                    first_users.push(t.0);
                }
            }
            prop_assert_eq!(ds.users().raw_ids(), &first_users[..]);
            for (u, t, _) in &triples {
                let ui = ds.users().index_of(*u).unwrap();
                let ti = ds.items().index_of(*t).unwrap();
                prop_assert_eq!(ds.users().raw_of(ui), Some(*u));
                prop_assert_eq!(ds.items().raw_of(ti), Some(*t));
            }
            Ok(())
        },
    )
}

pub fn sparsity_brute_force(cases: u32) -> Result<(), String> {
    run(
        cases,
        (1usize..10, 1usize..10, 0.05f64..1.0, any::<u64>()),
        |(users, items, fill, seed)| {
            let table = random_table(users, items, fill, seed);
            let ds = RatingDataset::from_raw_triples(table.clone()).unwrap();
            let rows: BTreeSet<u64> = table.iter().map(|x| x.0).collect();
            let cols: BTreeSet<u64> = table.iter().map(|x| x.1).collect();
            let mut filled = 0usize;
            for &u in &rows {
                for &t in &cols {
                    if table.iter().any(|x| x.0 == u && x.1 == t) {
                        filled += 1;
                    }
                }
            }
            let expect = 1.0 - filled as f64 / (rows.len() * cols.len()) as f64;
            prop_assert!((stats(&ds).sparsity - expect).abs() <= 1e-15);
            Ok(())
        },
    )
}

pub fn nmf_nonnegative(cases: u32) -> Result<(), String> {
    run(
        cases,
        (2usize..8, 2usize..8, 1usize..4, any::<u64>()),
        |(users, items, k, seed)| {
            let ds = dataset(users, items, 0.6, seed);
            // Training is deterministic, so the first `e` epochs of a longer run
            // equal a run of `e` epochs.
            for epochs in 1..=6 {
                let (m, _) = train_nmf(&ds, k, epochs, seed).unwrap();
                prop_assert!(m
                    .user_factors
                    .iter()
                    .chain(&m.item_factors)
                    .all(|&x| x >= 0.0 && x.is_finite()));
            }
            Ok(())
        },
    )
}

pub fn mf_loss_windows(cases: u32) -> Result<(), String> {
    run(cases, (4usize..12, 4usize..12, any::<u64>()), |(users, items, seed)| {
        let ds = dataset(users, items, 0.7, seed);
        let (_, report) = train_mf(&ds, 4, 0.005, 0.05, 40, seed).unwrap();
        let windows: Vec<f64> = report
            .loss
            .chunks(10)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{:?}", windows);
        }
        Ok(())
    })
}

pub fn mf_prediction_range(cases: u32) -> Result<(), String> {
    run(
        cases,
        (2usize..8, 2usize..8, prop_oneof![Just(0.005), Just(0.1)], any::<u64>()),
        |(users, items, lr, seed)| {
            let ds = dataset(users, items, 0.6, seed);
            // An oversized step pushes raw scores far outside the scale.
            let (m, _) = train_mf(&ds, 3, lr, 0.0, 20, seed).unwrap();
            let r = m.rating_max as f64;
            for u in 0..m.num_users() + 1 {
                for t in 0..m.num_items() + 1 {
                    let v = predict_mf(&m, u, t);
                    prop_assert!((1.0..=r).contains(&v), "{v}");
                }
            }
            Ok(())
        },
    )
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=6).prop_flat_map(|d| proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), 3..30))
}

fn sample_cov(points: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, d) = (points.len(), points[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    centered.transpose() * &centered / (n as f64 - 1.0)
}

pub fn pca_variance(cases: u32) -> Result<(), String> {
    run(cases, points(), |pts| {
        let d = pts[0].len();
        let pca = Pca::fit(&pts, 2).unwrap();
        let mut reference: Vec<f64> = SymmetricEigen::new(sample_cov(&pts))
            .eigenvalues
            .iter()
            .copied()
            .collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let scale = reference.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        for (a, b) in pca.eigenvalues.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
        prop_assert_eq!(pca.eigenvalues.len(), d);
        let coords = pca_project(&pts, 2).unwrap();
        let n = coords.len() as f64;
        let variance: f64 = (0..2)
            .map(|k| {
                let m = coords.iter().map(|c| c[k]).sum::<f64>() / n;
                coords.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        prop_assert!((variance - reference[0] - reference[1]).abs() <= 1e-8, "{variance}");
        Ok(())
    })
}

pub fn pca_translation(cases: u32) -> Result<(), String> {
    run(
        cases,
        (points(), proptest::collection::vec(-50.0f64..50.0, 6)),
        |(pts, shift)| {
            let moved: Vec<Vec<f64>> = pts
                .iter()
                .map(|p| p.iter().zip(&shift).map(|(x, s)| x + s).collect())
                .collect();
            let a = pca_project(&pts, 2).unwrap();
            let b = pca_project(&moved, 2).unwrap();
            let gap = Pca::fit(&pts, 2).unwrap().eigenvalues;
            // Axes are only determined when the retained eigenvalues are separated.
            if gap.len() > 2 && ((gap[1] - gap[2]).abs() < 1e-6 || (gap[0] - gap[1]).abs() < 1e-6) {
                return Ok(());
            }
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
            }
            Ok(())
        },
    )
}

pub fn pca_orthonormal(cases: u32) -> Result<(), String> {
    run(cases, points(), |pts| {
        let d = pts[0].len();
        let pca = Pca::fit(&pts, d).unwrap();
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() <= 1e-10, "axes {i},{j}: {dot}");
            }
        }
        Ok(())
    })
}

pub fn rmse_dominates_mae(cases: u32) -> Result<(), String> {
    run(
        cases,
        proptest::collection::vec((-1.0f64..7.0, 1u8..=5), 1..60),
        |pairs| {
            let (p, g): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            let (e, a) = (rmse(&p, &g).unwrap(), mae(&p, &g, false, 5).unwrap());
            prop_assert!(a >= 0.0 && e >= a - 1e-12, "rmse {e} mae {a}");
            Ok(())
        },
    )
}

pub fn rounded_integers(cases: u32) -> Result<(), String> {
    run(cases, (-10.0f64..15.0, 2usize..=10), |(x, r)| {
        let v = round_rating(x, r);
        prop_assert!(v.fract() == 0.0 && v >= 1.0 && v <= r as f64);
        let k = x.floor();
        if k + 1.0 >= 1.0 && k + 1.0 <= r as f64 {
            prop_assert_eq!(round_rating(k + 0.5, r), k + 1.0);
        }
        Ok(())
    })
}

fn tiny_config(seed: u64, rounds: usize) -> TrainConfig {
    TrainConfig {
        max_rounds: rounds,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

pub fn adadelta_accumulators(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), any::<bool>()), |((f, c, _, seed), lazy)| {
        let ds = dataset(6, 6, 0.5, seed);
        let h = hp(f, c, 5, 1.0, 0.05);
        let config = TrainConfig {
            lazy_rows: lazy,
            ..tiny_config(seed, 5)
        };
        let mut trainer = Trainer::new(&ds, h, config).unwrap();
        for _ in 0..5 {
            trainer.run_round().unwrap();
            let s = trainer.optimizer_state();
            for t in s.sq_grad.tensors().into_iter().chain(s.sq_update.tensors()) {
                prop_assert!(t.iter().all(|&x| x >= 0.0 && x.is_finite()));
            }
        }
        Ok(())
    })
}

pub fn training_determinism(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), 1usize..4), |((f, c, _, seed), threads)| {
        let ds = dataset(6, 6, 0.6, seed);
        let h = hp(f, c, 5, 1.0, 0.05);
        let single = tiny_config(seed, 4);
        let (p1, r1) = sar_core::train(&ds, &h, &single).unwrap();
        let (p2, r2) = sar_core::train(&ds, &h, &single).unwrap();
        let (p3, _) = sar_core::train(&ds, &h, &TrainConfig { threads, ..single }).unwrap();
        prop_assert_eq!(&p1, &p2);
        prop_assert_eq!(&p1, &p3);
        prop_assert_eq!(r1.loss, r2.loss);
        prop_assert_eq!(r1.train_rmse, r2.train_rmse);
        Ok(())
    })
}

pub fn evaluate_determinism(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), any::<u64>()), |((f, c, _, seed), split_seed)| {
        let ds = dataset(8, 8, 0.6, seed);
        let Ok(sp) = split(&ds, 0.7, split_seed) else {
            return Ok(());
        };
        let h = hp(f, c, 5, 1.0, 0.05);
        let p = random_params(&h, sp.train.num_users(), sp.train.num_items(), 1.0, &mut rng(seed));
        let model = SarModel::new(&sp.train, h, p).unwrap();
        let a = evaluate(&model, &sp.test, model.global_mean).unwrap();
        let b = evaluate(&model, &sp.test, model.global_mean).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn checkpoint_round_trip(cases: u32) -> Result<(), String> {
    run(cases, (small_model(), -1e6f64..1e6), |((f, c, r, seed), big)| {
        let ds = dataset(5, 4, 0.7, seed);
        let h = hp(f, c, r.max(5), 0.7, 0.05);
        let mut p = random_params(&h, ds.num_users(), ds.num_items(), 3.0, &mut rng(seed));
        p.tau[0] = big;
        let model = SarModel::new(&ds, h, p).unwrap();
        let config = BTreeMap::from([("seed".to_string(), seed.to_string())]);
        let text = Checkpoint::from_sar(&model, config.clone()).to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        prop_assert_eq!(back.config(), &config);
        let AnyModel::Sar(loaded) = back.into_model().unwrap() else {
            return Err(TestCaseError::fail("wrong model kind"));
        };
        prop_assert_eq!(&loaded.params, &model.params);
        prop_assert_eq!(loaded.hp, model.hp);
        prop_assert_eq!(loaded.users.raw_ids(), model.users.raw_ids());
        prop_assert_eq!(loaded.global_mean.to_bits(), model.global_mean.to_bits());
        Ok(())
    })
}
