//! Parameters and exact forward inference for the two-level semantic model.
//!
//! For a user `u` and item `t`, every feature `n` carries a category
//! distribution on each side (normalized exponentials of stored logits). A
//! rating level `p` receives the score
//!
//! ```text
//! q_p = 1/|F| * sum_n sum_{i,j} P(z=i|u,n) P(y=j|t,n) tau[p,i,j,n] exp(-|P(z=i|u,n) - P(y=j|t,n)| / sigma)
//! ```
//!
//! and the predicted rating is the expectation of the soft-max over
//! `q_p * omega_u * omega_t`.
//!
//! All indices in this module are 0-based. A preference index `p` stands for
//! the rating level `p + 1`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{IdMap, RatingDataset};
use crate::error::{check_index, invalid, Result, SarError};

/// Largest `1 / sigma` for which the separable evaluation of the Laplace
/// factor cannot overflow.
const SEPARABLE_MAX_INV_SIGMA: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarHyperparams {
    pub num_features: usize,
    pub num_categories: usize,
    pub rating_max: usize,
    pub sigma: f64,
    pub lambda: f64,
}

impl Default for SarHyperparams {
    fn default() -> Self {
        Self {
            num_features: 10,
            num_categories: 10,
            rating_max: 5,
            sigma: 1.0,
            lambda: 0.05,
        }
    }
}

impl SarHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.num_features < 1 {
            return Err(invalid("F", "must be >= 1"));
        }
        if self.num_categories < 1 {
            return Err(invalid("C", "must be >= 1"));
        }
        if self.rating_max < 2 {
            return Err(invalid("R", "must be >= 2"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl std::str::FromStr for Side {
    type Err = SarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Side::User),
            "item" => Ok(Side::Item),
            other => Err(invalid("kind", format!("expected user or item, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
        })
    }
}

/// Learnable parameters.
///
/// Logit tensors are row-major `[entity][feature][category]`. The preference
/// table is stored feature-major as `[feature][level][z][y]` so that one
/// feature's block is contiguous; [`SarParams::tau`] indexes it in the
/// conventional `(p, i, j, n)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SarParams {
    pub(crate) num_users: usize,
    pub(crate) num_items: usize,
    pub(crate) num_features: usize,
    pub(crate) num_categories: usize,
    pub(crate) rating_max: usize,
    pub user_logits: Vec<f64>,
    pub item_logits: Vec<f64>,
    pub tau: Vec<f64>,
    pub omega_u: Vec<f64>,
    pub omega_t: Vec<f64>,
}

impl SarParams {
    /// All-zero parameters (uniform category distributions, zero preference
    /// table, zero omegas).
    pub fn zeros(hp: &SarHyperparams, num_users: usize, num_items: usize) -> Self {
        let (f, c, r) = (hp.num_features, hp.num_categories, hp.rating_max);
        Self {
            num_users,
            num_items,
            num_features: f,
            num_categories: c,
            rating_max: r,
            user_logits: vec![0.0; num_users * f * c],
            item_logits: vec![0.0; num_items * f * c],
            tau: vec![0.0; f * r * c * c],
            omega_u: vec![0.0; num_users],
            omega_t: vec![0.0; num_items],
        }
    }

    /// Logits ~ N(0, s), tau ~ 1/|R| + N(0, s/10), omegas ~ 1 + N(0, s).
    pub fn init_random<R: Rng + ?Sized>(
        hp: &SarHyperparams,
        num_users: usize,
        num_items: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(hp, num_users, num_items);
        let logit = Normal::new(0.0, init_scale).map_err(|e| invalid("init_scale", e.to_string()))?;
        let table = Normal::new(0.0, init_scale * 0.1).map_err(|e| invalid("init_scale", e.to_string()))?;
        let base = 1.0 / hp.rating_max as f64;
        for x in p.user_logits.iter_mut().chain(p.item_logits.iter_mut()) {
            *x = logit.sample(rng);
        }
        for x in p.tau.iter_mut() {
            *x = base + table.sample(rng);
        }
        for x in p.omega_u.iter_mut().chain(p.omega_t.iter_mut()) {
            *x = 1.0 + logit.sample(rng);
        }
        Ok(p)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn rating_max(&self) -> usize {
        self.rating_max
    }

    /// Offset of `(p, i, j, n)` in the stored preference table.
    #[inline]
    pub fn tau_offset(&self, p: usize, i: usize, j: usize, n: usize) -> usize {
        let c = self.num_categories;
        ((n * self.rating_max + p) * c + i) * c + j
    }

    #[inline]
    pub fn tau(&self, p: usize, i: usize, j: usize, n: usize) -> f64 {
        self.tau[self.tau_offset(p, i, j, n)]
    }

    pub fn set_tau(&mut self, p: usize, i: usize, j: usize, n: usize, value: f64) {
        let k = self.tau_offset(p, i, j, n);
        self.tau[k] = value;
    }

    /// Logit row for one entity and feature.
    pub fn logits(&self, side: Side, index: usize, feature: usize) -> &[f64] {
        let fc = self.num_features * self.num_categories;
        let start = index * fc + feature * self.num_categories;
        let data = match side {
            Side::User => &self.user_logits,
            Side::Item => &self.item_logits,
        };
        &data[start..start + self.num_categories]
    }

    pub fn logits_mut(&mut self, side: Side, index: usize, feature: usize) -> &mut [f64] {
        let fc = self.num_features * self.num_categories;
        let c = self.num_categories;
        let start = index * fc + feature * c;
        let data = match side {
            Side::User => &mut self.user_logits,
            Side::Item => &mut self.item_logits,
        };
        &mut data[start..start + c]
    }

    /// Every tensor as a mutable slice, in a fixed order.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.user_logits,
            &mut self.item_logits,
            &mut self.tau,
            &mut self.omega_u,
            &mut self.omega_t,
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.user_logits,
            &self.item_logits,
            &self.tau,
            &self.omega_u,
            &self.omega_t,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn check_hyperparams(&self, hp: &SarHyperparams) -> Result<()> {
        if hp.num_features != self.num_features
            || hp.num_categories != self.num_categories
            || hp.rating_max != self.rating_max
        {
            return Err(invalid(
                "hyperparams",
                format!(
                    "F={}, C={}, R={} do not match parameter shapes F={}, C={}, R={}",
                    hp.num_features,
                    hp.num_categories,
                    hp.rating_max,
                    self.num_features,
                    self.num_categories,
                    self.rating_max
                ),
            ));
        }
        Ok(())
    }

    fn check_pair(&self, u: usize, t: usize) -> Result<()> {
        check_index("user", u, self.num_users)?;
        check_index("item", t, self.num_items)
    }
}

/// Normalized exponential of `logits` into `out`, with max subtraction.
#[inline]
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Category distribution `P(z | u, f)` (or `P(y | t, f)` on the item side).
pub fn category_dist(params: &SarParams, side: Side, index: usize, feature: usize) -> Result<Vec<f64>> {
    let len = match side {
        Side::User => params.num_users,
        Side::Item => params.num_items,
    };
    check_index(if side == Side::User { "user" } else { "item" }, index, len)?;
    check_index("feature", feature, params.num_features)?;
    let mut out = vec![0.0; params.num_categories];
    softmax_into(params.logits(side, index, feature), &mut out);
    Ok(out)
}

/// `exp(-|a - b| / sigma)`.
pub fn laplace_factor(a: f64, b: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    Ok((-(a - b).abs() / sigma).exp())
}

/// Intermediate quantities of one (user, item) forward pass, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct PairForward {
    pub f: usize,
    pub c: usize,
    pub r: usize,
    /// User category distributions, `[feature][category]`.
    pub user_dist: Vec<f64>,
    /// Item category distributions, `[feature][category]`.
    pub item_dist: Vec<f64>,
    /// Laplace factors, `[feature][i][j]`.
    pub laplace: Vec<f64>,
    /// Mixture weights `P(z=i) P(y=j) exp(..) / |F|`, `[feature][i][j]`.
    pub weight: Vec<f64>,
    pub scores: Vec<f64>,
    pub soft: Vec<f64>,
    pub omega: f64,
    pub prediction: f64,
    exp_neg: Vec<f64>,
    exp_pos: Vec<f64>,
}

impl PairForward {
    pub fn new(f: usize, c: usize, r: usize) -> Self {
        Self {
            f,
            c,
            r,
            user_dist: vec![0.0; f * c],
            item_dist: vec![0.0; f * c],
            laplace: vec![0.0; f * c * c],
            weight: vec![0.0; f * c * c],
            scores: vec![0.0; r],
            soft: vec![0.0; r],
            omega: 0.0,
            prediction: 0.0,
            exp_neg: vec![0.0; 2 * c],
            exp_pos: vec![0.0; 2 * c],
        }
    }

    /// Runs the forward pass for `(u, t)`. Indices are not range-checked.
    pub fn run(&mut self, params: &SarParams, sigma: f64, u: usize, t: usize) {
        let (f, c, r) = (self.f, self.c, self.r);
        let inv_f = 1.0 / f as f64;
        let inv_sigma = 1.0 / sigma;
        let separable = inv_sigma <= SEPARABLE_MAX_INV_SIGMA;
        self.scores.fill(0.0);
        for n in 0..f {
            let a = &mut self.user_dist[n * c..(n + 1) * c];
            softmax_into(params.logits(Side::User, u, n), a);
            let b = &mut self.item_dist[n * c..(n + 1) * c];
            softmax_into(params.logits(Side::Item, t, n), b);
            let a = &self.user_dist[n * c..(n + 1) * c];
            let b = &self.item_dist[n * c..(n + 1) * c];
            let lap = &mut self.laplace[n * c * c..(n + 1) * c * c];
            let w = &mut self.weight[n * c * c..(n + 1) * c * c];
            if separable {
                // exp(-|a-b|/s) = min(exp(-a/s) exp(b/s), exp(a/s) exp(-b/s))
                let (pos, neg) = (&mut self.exp_pos, &mut self.exp_neg);
                for k in 0..c {
                    let ea = (a[k] * inv_sigma).exp();
                    let eb = (b[k] * inv_sigma).exp();
                    pos[k] = ea;
                    neg[k] = 1.0 / ea;
                    pos[c + k] = eb;
                    neg[c + k] = 1.0 / eb;
                }
                let (bp, bn) = (&pos[c..2 * c], &neg[c..2 * c]);
                for i in 0..c {
                    let (ap, an, ai) = (pos[i], neg[i], a[i] * inv_f);
                    let lap_row = &mut lap[i * c..(i + 1) * c];
                    let w_row = &mut w[i * c..(i + 1) * c];
                    for ((((l, wv), &bj), &bpj), &bnj) in
                        lap_row.iter_mut().zip(w_row.iter_mut()).zip(b).zip(bp).zip(bn)
                    {
                        let e = (an * bpj).min(ap * bnj);
                        *l = e;
                        *wv = ai * bj * e;
                    }
                }
            } else {
                for i in 0..c {
                    for j in 0..c {
                        let e = (-(a[i] - b[j]).abs() * inv_sigma).exp();
                        lap[i * c + j] = e;
                        w[i * c + j] = a[i] * b[j] * e * inv_f;
                    }
                }
            }
            let block = &params.tau[n * r * c * c..(n + 1) * r * c * c];
            for (p, score) in self.scores.iter_mut().enumerate() {
                let row = &block[p * c * c..(p + 1) * c * c];
                *score += dot(row, w);
            }
        }
        self.omega = params.omega_u[u] * params.omega_t[t];
        self.prediction = softmax_expectation(&self.scores, self.omega, &mut self.soft);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Expected rating level under soft-max(`scores * omega`); `soft` receives the
/// distribution.
pub(crate) fn softmax_expectation(scores: &[f64], omega: f64, soft: &mut [f64]) -> f64 {
    let max = scores.iter().map(|&q| q * omega).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (s, &q) in soft.iter_mut().zip(scores) {
        *s = (q * omega - max).exp();
        sum += *s;
    }
    let mut expectation = 0.0;
    for (p, s) in soft.iter_mut().enumerate() {
        *s /= sum;
        expectation += (p + 1) as f64 * *s;
    }
    expectation
}

/// Preference scores `q_p` for `p = 1..|R|` (returned 0-based).
pub fn preference_scores(params: &SarParams, hp: &SarHyperparams, u: usize, t: usize) -> Result<Vec<f64>> {
    params.check_hyperparams(hp)?;
    params.check_pair(u, t)?;
    let mut fwd = PairForward::new(hp.num_features, hp.num_categories, hp.rating_max);
    fwd.run(params, hp.sigma, u, t);
    Ok(fwd.scores)
}

/// Expected rating in `[1, |R|]`.
pub fn predict_rating(params: &SarParams, hp: &SarHyperparams, u: usize, t: usize) -> Result<f64> {
    params.check_hyperparams(hp)?;
    params.check_pair(u, t)?;
    let mut fwd = PairForward::new(hp.num_features, hp.num_categories, hp.rating_max);
    fwd.run(params, hp.sigma, u, t);
    if !fwd.prediction.is_finite() {
        return Err(SarError::NonFinite(format!("prediction for user {u}, item {t}")));
    }
    Ok(fwd.prediction)
}

/// One summand of the joint `P(p, z=i, y=j, f=n | u, t)`, with the
/// preference table clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn joint_prob(
    params: &SarParams,
    hp: &SarHyperparams,
    u: usize,
    t: usize,
    p: usize,
    i: usize,
    j: usize,
    n: usize,
) -> Result<f64> {
    params.check_hyperparams(hp)?;
    params.check_pair(u, t)?;
    check_index("preference", p, hp.rating_max)?;
    check_index("category", i, hp.num_categories)?;
    check_index("category", j, hp.num_categories)?;
    check_index("feature", n, hp.num_features)?;
    let a = category_dist(params, Side::User, u, n)?[i];
    let b = category_dist(params, Side::Item, t, n)?[j];
    let tau = params.tau(p, i, j, n).max(0.0);
    Ok(a * b * tau * laplace_factor(a, b, hp.sigma)? / hp.num_features as f64)
}

/// `sum_p max(tau[p,i,j,n], 0)` for one feature, `[i][j]`.
fn clamped_tau_mass(params: &SarParams, n: usize) -> Vec<f64> {
    let (c, r) = (params.num_categories, params.rating_max);
    let mut mass = vec![0.0; c * c];
    let block = &params.tau[n * r * c * c..(n + 1) * r * c * c];
    for p in 0..r {
        for (m, &x) in mass.iter_mut().zip(&block[p * c * c..(p + 1) * c * c]) {
            *m += x.max(0.0);
        }
    }
    mass
}

fn semantic_profile(
    params: &SarParams,
    hp: &SarHyperparams,
    side: Side,
    target: usize,
    feature: usize,
    others: &[u32],
) -> Result<Vec<f64>> {
    params.check_hyperparams(hp)?;
    let (own_len, other_len, other_kind) = match side {
        Side::User => (params.num_users, params.num_items, "item"),
        Side::Item => (params.num_items, params.num_users, "user"),
    };
    check_index(if side == Side::User { "user" } else { "item" }, target, own_len)?;
    check_index("feature", feature, hp.num_features)?;
    if others.is_empty() {
        return Err(invalid("others", format!("empty {other_kind} set")));
    }
    let c = hp.num_categories;
    let other_side = match side {
        Side::User => Side::Item,
        Side::Item => Side::User,
    };
    let mass = clamped_tau_mass(params, feature);
    let mut own = vec![0.0; c];
    softmax_into(params.logits(side, target, feature), &mut own);
    let mut other = vec![0.0; c];
    let mut score = vec![0.0; c];
    let inv_f = 1.0 / hp.num_features as f64;
    for &o in others {
        check_index(other_kind, o as usize, other_len)?;
        softmax_into(params.logits(other_side, o as usize, feature), &mut other);
        for (k, s) in score.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (l, &b) in other.iter().enumerate() {
                let m = match side {
                    Side::User => mass[k * c + l],
                    Side::Item => mass[l * c + k],
                };
                let a = own[k];
                acc += a * b * m * (-(a - b).abs() / hp.sigma).exp();
            }
            *s += acc * inv_f;
        }
    }
    let total: f64 = score.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SarError::Degenerate(format!(
            "all category scores are zero for {side} {target}, feature {feature}"
        )));
    }
    for s in score.iter_mut() {
        *s /= total;
    }
    Ok(score)
}

/// Per-feature marginal `P(z | u)` summed over the given items.
pub fn user_semantic_profile(
    params: &SarParams,
    hp: &SarHyperparams,
    u: usize,
    feature: usize,
    items: &[u32],
) -> Result<Vec<f64>> {
    semantic_profile(params, hp, Side::User, u, feature, items)
}

/// Per-feature marginal `P(y | t)` summed over the given users.
pub fn item_semantic_profile(
    params: &SarParams,
    hp: &SarHyperparams,
    t: usize,
    feature: usize,
    users: &[u32],
) -> Result<Vec<f64>> {
    semantic_profile(params, hp, Side::Item, t, feature, users)
}

/// Trained parameters bundled with what is needed to serve predictions by
/// raw ID: the ID maps, per-entity training support and the fallback mean.
#[derive(Debug, Clone)]
pub struct SarModel {
    pub hp: SarHyperparams,
    pub params: SarParams,
    pub users: Arc<IdMap>,
    pub items: Arc<IdMap>,
    pub user_counts: Vec<u32>,
    pub item_counts: Vec<u32>,
    pub global_mean: f64,
}

impl SarModel {
    pub fn new(train: &RatingDataset, hp: SarHyperparams, params: SarParams) -> Result<Self> {
        params.check_hyperparams(&hp)?;
        if params.num_users != train.num_users() || params.num_items != train.num_items() {
            return Err(invalid("params", "entity counts differ from the training set"));
        }
        Ok(Self {
            hp,
            params,
            users: Arc::new(train.users().clone()),
            items: Arc::new(train.items().clone()),
            user_counts: train.user_counts(),
            item_counts: train.item_counts(),
            global_mean: train.global_mean(),
        })
    }

    /// True when both entities have training ratings.
    pub fn is_warm(&self, u: usize, t: usize) -> bool {
        self.user_counts.get(u).is_some_and(|&c| c > 0) && self.item_counts.get(t).is_some_and(|&c| c > 0)
    }

    /// Prediction by raw IDs; `None` for unknown or cold entities.
    pub fn predict_raw(&self, user: u64, item: u64) -> Result<Option<f64>> {
        match (self.users.index_of(user), self.items.index_of(item)) {
            (Some(u), Some(t)) if self.is_warm(u as usize, t as usize) => {
                predict_rating(&self.params, &self.hp, u as usize, t as usize).map(Some)
            }
            _ => Ok(None),
        }
    }
}
