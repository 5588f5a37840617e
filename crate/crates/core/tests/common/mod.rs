//! Reference computations written independently of the library's forward and
//! backward code: plain nested loops over every (feature, level, z, y).

#![allow(dead_code, clippy::needless_range_loop)]

pub mod props;

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sar_core::{Rating, SarHyperparams, SarParams};
use twofloat::TwoFloat;

pub fn ml100k_path() -> Option<PathBuf> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data");
    p.is_file().then_some(p)
}

pub fn ml1m_path() -> Option<PathBuf> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-1m/ratings.dat");
    p.is_file().then_some(p)
}

pub fn hp(f: usize, c: usize, r: usize, sigma: f64, lambda: f64) -> SarHyperparams {
    SarHyperparams {
        num_features: f,
        num_categories: c,
        rating_max: r,
        sigma,
        lambda,
    }
}

/// Random parameters with every entry drawn independently, including τ of
/// both signs and ω of both signs.
pub fn random_params(hp: &SarHyperparams, users: usize, items: usize, scale: f64, rng: &mut ChaCha8Rng) -> SarParams {
    let mut p = SarParams::zeros(hp, users, items);
    let normal = Normal::new(0.0, scale).unwrap();
    for x in p.user_logits.iter_mut().chain(p.item_logits.iter_mut()) {
        *x = normal.sample(rng);
    }
    for n in 0..hp.num_features {
        for q in 0..hp.rating_max {
            for i in 0..hp.num_categories {
                for j in 0..hp.num_categories {
                    p.set_tau(q, i, j, n, rng.random_range(-0.5..1.5));
                }
            }
        }
    }
    for x in p.omega_u.iter_mut().chain(p.omega_t.iter_mut()) {
        *x = rng.random_range(-2.0..2.0);
    }
    p
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn user_dist(p: &SarParams, hp: &SarHyperparams, u: usize, n: usize) -> Vec<f64> {
    let (f, c) = (hp.num_features, hp.num_categories);
    softmax(&p.user_logits[(u * f + n) * c..(u * f + n + 1) * c])
}

pub fn item_dist(p: &SarParams, hp: &SarHyperparams, t: usize, n: usize) -> Vec<f64> {
    let (f, c) = (hp.num_features, hp.num_categories);
    softmax(&p.item_logits[(t * f + n) * c..(t * f + n + 1) * c])
}

fn lap(a: f64, b: f64, sigma: f64) -> f64 {
    (-(a - b).abs() / sigma).exp()
}

/// Unnormalized level scores by exhaustive enumeration; optionally with τ
/// clamped at zero.
pub fn enum_scores(p: &SarParams, hp: &SarHyperparams, u: usize, t: usize, clamp: bool) -> Vec<f64> {
    let mut q = vec![0.0; hp.rating_max];
    for (level, qp) in q.iter_mut().enumerate() {
        for n in 0..hp.num_features {
            let a = user_dist(p, hp, u, n);
            let b = item_dist(p, hp, t, n);
            for i in 0..hp.num_categories {
                for j in 0..hp.num_categories {
                    let mut tau = p.tau(level, i, j, n);
                    if clamp {
                        tau = tau.max(0.0);
                    }
                    *qp += a[i] * b[j] * tau * lap(a[i], b[j], hp.sigma) / hp.num_features as f64;
                }
            }
        }
    }
    q
}

pub fn enum_predict(p: &SarParams, hp: &SarHyperparams, u: usize, t: usize) -> f64 {
    let q = enum_scores(p, hp, u, t, false);
    let w = p.omega_u[u] * p.omega_t[t];
    let z: Vec<f64> = q.iter().map(|x| x * w).collect();
    softmax(&z).iter().enumerate().map(|(k, s)| (k + 1) as f64 * s).sum()
}

/// Sum-rule profile of user `u` on feature `n` over `items`.
pub fn enum_user_profile(p: &SarParams, hp: &SarHyperparams, u: usize, n: usize, items: &[usize]) -> Vec<f64> {
    let c = hp.num_categories;
    let mut score = vec![0.0; c];
    for &t in items {
        let a = user_dist(p, hp, u, n);
        let b = item_dist(p, hp, t, n);
        for (i, s) in score.iter_mut().enumerate() {
            for j in 0..c {
                for level in 0..hp.rating_max {
                    *s += a[i] * b[j] * p.tau(level, i, j, n).max(0.0) * lap(a[i], b[j], hp.sigma)
                        / hp.num_features as f64;
                }
            }
        }
    }
    let total: f64 = score.iter().sum();
    score.iter().map(|s| s / total).collect()
}

pub fn enum_item_profile(p: &SarParams, hp: &SarHyperparams, t: usize, n: usize, users: &[usize]) -> Vec<f64> {
    let c = hp.num_categories;
    let mut score = vec![0.0; c];
    for &u in users {
        let a = user_dist(p, hp, u, n);
        let b = item_dist(p, hp, t, n);
        for (j, s) in score.iter_mut().enumerate() {
            for i in 0..c {
                for level in 0..hp.rating_max {
                    *s += a[i] * b[j] * p.tau(level, i, j, n).max(0.0) * lap(a[i], b[j], hp.sigma)
                        / hp.num_features as f64;
                }
            }
        }
    }
    let total: f64 = score.iter().sum();
    score.iter().map(|s| s / total).collect()
}

/// Squared error plus `lambda` times the squared category probabilities of
/// every distinct user and item in the batch.
pub fn enum_loss(p: &SarParams, hp: &SarHyperparams, batch: &[Rating]) -> f64 {
    let mut total = 0.0;
    for r in batch {
        let e = enum_predict(p, hp, r.user as usize, r.item as usize) - r.rating as f64;
        total += e * e;
    }
    let users: BTreeSet<usize> = batch.iter().map(|r| r.user as usize).collect();
    let items: BTreeSet<usize> = batch.iter().map(|r| r.item as usize).collect();
    for n in 0..hp.num_features {
        for &u in &users {
            total += hp.lambda * user_dist(p, hp, u, n).iter().map(|x| x * x).sum::<f64>();
        }
        for &t in &items {
            total += hp.lambda * item_dist(p, hp, t, n).iter().map(|x| x * x).sum::<f64>();
        }
    }
    total
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs());
    scale == 0.0 || (a - b).abs() / scale <= tol
}

pub fn random_batch(users: usize, items: usize, len: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<Rating> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < len.min(users * items) {
        let u = rng.random_range(0..users) as u32;
        let t = rng.random_range(0..items) as u32;
        if seen.insert((u, t)) {
            out.push(Rating {
                user: u,
                item: t,
                rating: rng.random_range(1..=r) as u8,
            });
        }
    }
    out
}

type Dd = TwoFloat;

fn dd(x: f64) -> Dd {
    TwoFloat::from(x)
}

/// `1/x` by one Newton step from the f64 reciprocal; twofloat 0.8's own
/// double-double division drops the low word of the remainder.
fn recip(x: Dd) -> Dd {
    let r0 = dd(1.0 / x.hi());
    r0 + r0 * (dd(1.0) - x * r0)
}

fn softmax_dd(v: &[f64]) -> Vec<Dd> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = v.iter().map(|&x| (dd(x) - m).exp()).collect();
    let s = e.iter().fold(dd(0.0), |acc, &x| acc + x);
    let inv = recip(s);
    e.into_iter().map(|x| x * inv).collect()
}

fn softmax_dd_of(v: &[Dd]) -> Vec<Dd> {
    let m = v.iter().map(|x| x.hi()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = v.iter().map(|&x| (x - m).exp()).collect();
    let s = e.iter().fold(dd(0.0), |acc, &x| acc + x);
    let inv = recip(s);
    e.into_iter().map(|x| x * inv).collect()
}

fn dist_dd(p: &SarParams, hp: &SarHyperparams, user: bool, idx: usize, n: usize) -> Vec<Dd> {
    let (f, c) = (hp.num_features, hp.num_categories);
    let data = if user { &p.user_logits } else { &p.item_logits };
    softmax_dd(&data[(idx * f + n) * c..(idx * f + n + 1) * c])
}

fn predict_dd(p: &SarParams, hp: &SarHyperparams, u: usize, t: usize) -> Dd {
    let w = dd(p.omega_u[u]) * p.omega_t[t];
    let mut z = vec![dd(0.0); hp.rating_max];
    for n in 0..hp.num_features {
        let a = dist_dd(p, hp, true, u, n);
        let b = dist_dd(p, hp, false, t, n);
        for (level, zl) in z.iter_mut().enumerate() {
            for i in 0..hp.num_categories {
                for j in 0..hp.num_categories {
                    let gap = (a[i] - b[j]).abs() / hp.sigma;
                    *zl += a[i] * b[j] * p.tau(level, i, j, n) * (-gap).exp() / hp.num_features as f64;
                }
            }
        }
    }
    let z: Vec<Dd> = z.into_iter().map(|q| q * w).collect();
    softmax_dd_of(&z)
        .into_iter()
        .enumerate()
        .fold(dd(0.0), |acc, (k, s)| acc + s * (k + 1) as f64)
}

/// [`enum_loss`] evaluated in double-double arithmetic.
pub fn enum_loss_dd(p: &SarParams, hp: &SarHyperparams, batch: &[Rating]) -> Dd {
    let mut total = dd(0.0);
    for r in batch {
        let e = predict_dd(p, hp, r.user as usize, r.item as usize) - r.rating as f64;
        total += e * e;
    }
    let users: BTreeSet<usize> = batch.iter().map(|r| r.user as usize).collect();
    let items: BTreeSet<usize> = batch.iter().map(|r| r.item as usize).collect();
    for n in 0..hp.num_features {
        for (user, set) in [(true, &users), (false, &items)] {
            for &idx in set {
                for x in dist_dd(p, hp, user, idx, n) {
                    total += x * x * hp.lambda;
                }
            }
        }
    }
    total
}

/// Central differences of the double-double reference loss, one scalar at a
/// time, in the tensor order user logits, item logits, τ, ω_u, ω_t. Extended
/// precision keeps cancellation noise far below the gradients being checked.
pub fn fd_gradient(p: &SarParams, hp: &SarHyperparams, batch: &[Rating], h: f64) -> Vec<Vec<f64>> {
    let mut work = p.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (k, &len) in sizes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (idx, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors()[k][idx];
            let (hi, lo) = (orig + h, orig - h);
            work.tensors_mut()[k][idx] = hi;
            let up = enum_loss_dd(&work, hp, batch);
            work.tensors_mut()[k][idx] = lo;
            let down = enum_loss_dd(&work, hp, batch);
            work.tensors_mut()[k][idx] = orig;
            *gi = ((up - down) * recip(dd(hi) - lo)).hi();
        }
        out.push(g);
    }
    out
}

/// Worst relative error between analytic and finite-difference gradients over
/// entries where either exceeds `floor` in magnitude.
pub fn worst_gradient_error(p: &SarParams, hp: &SarHyperparams, batch: &[Rating], h: f64, floor: f64) -> f64 {
    let analytic = sar_core::gradients(p, hp, batch).unwrap();
    let fd = fd_gradient(p, hp, batch, h);
    let mut worst = 0.0f64;
    for (a, b) in analytic.tensors().iter().zip(&fd) {
        for (&x, &y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs());
            if scale > floor {
                worst = worst.max((x - y).abs() / scale);
            }
        }
    }
    worst
}

/// Copies the user's logits for `feature` onto the item so both category
/// distributions coincide and every diagonal gap sits exactly on the kink.
pub fn put_on_kink(p: &mut SarParams, hp: &SarHyperparams, u: usize, t: usize, feature: usize) {
    let (f, c) = (hp.num_features, hp.num_categories);
    let src = p.user_logits[(u * f + feature) * c..(u * f + feature + 1) * c].to_vec();
    p.item_logits[(t * f + feature) * c..(t * f + feature + 1) * c].copy_from_slice(&src);
}
