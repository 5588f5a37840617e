//! Reference factorization baselines: biased matrix factorization trained by
//! SGD, and nonnegative factorization with masked multiplicative updates.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{IdMap, RatingDataset};
use crate::error::{invalid, Result, SarError};

/// Denominator floor of the multiplicative updates.
pub const NMF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MfKind {
    Mf,
    Nmf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Biases {
    pub global: f64,
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MFModel {
    pub kind: MfKind,
    pub rank: usize,
    pub rating_max: usize,
    /// `[user][rank]`
    pub user_factors: Vec<f64>,
    /// `[item][rank]`
    pub item_factors: Vec<f64>,
    pub biases: Option<Biases>,
    /// Prediction for cold users or items.
    pub global_mean: f64,
    pub users: Arc<IdMap>,
    pub items: Arc<IdMap>,
    pub user_counts: Vec<u32>,
    pub item_counts: Vec<u32>,
}

impl MFModel {
    fn empty(kind: MfKind, train: &RatingDataset, rank: usize) -> Self {
        Self {
            kind,
            rank,
            rating_max: train.rating_max().max(2) as usize,
            user_factors: vec![0.0; train.num_users() * rank],
            item_factors: vec![0.0; train.num_items() * rank],
            biases: None,
            global_mean: train.global_mean(),
            users: Arc::new(train.users().clone()),
            items: Arc::new(train.items().clone()),
            user_counts: train.user_counts(),
            item_counts: train.item_counts(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_counts.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_counts.len()
    }

    pub fn is_warm(&self, u: usize, t: usize) -> bool {
        self.user_counts.get(u).is_some_and(|&c| c > 0) && self.item_counts.get(t).is_some_and(|&c| c > 0)
    }

    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item_row(&self, t: usize) -> &[f64] {
        &self.item_factors[t * self.rank..(t + 1) * self.rank]
    }

    /// Unclipped score.
    fn raw_score(&self, u: usize, t: usize) -> f64 {
        let dot: f64 = self.user_row(u).iter().zip(self.item_row(t)).map(|(a, b)| a * b).sum();
        match &self.biases {
            Some(b) => b.global + b.user[u] + b.item[t] + dot,
            None => dot,
        }
    }
}

/// Per-epoch objective and timing of a baseline fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochReport {
    pub loss: Vec<f64>,
    pub seconds: Vec<f64>,
}

/// Prediction clipped to `[1, R]`; cold pairs get the global mean.
pub fn predict_mf(model: &MFModel, u: usize, t: usize) -> f64 {
    if u >= model.num_users() || t >= model.num_items() || !model.is_warm(u, t) {
        return model.global_mean;
    }
    model.raw_score(u, t).clamp(1.0, model.rating_max as f64)
}

/// Biased MF by SGD on squared error with L2 penalty.
pub fn train_mf(
    train_set: &RatingDataset,
    k: usize,
    learning_rate: f64,
    reg: f64,
    epochs: usize,
    seed: u64,
) -> Result<(MFModel, EpochReport)> {
    if k == 0 {
        return Err(invalid("k", "rank must be >= 1"));
    }
    if train_set.is_empty() {
        return Err(SarError::EmptyDataset);
    }
    if !(learning_rate > 0.0) || !(reg >= 0.0) {
        return Err(invalid(
            "learning_rate",
            "learning rate must be positive and reg nonnegative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MFModel::empty(MfKind::Mf, train_set, k);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    for x in model.user_factors.iter_mut().chain(model.item_factors.iter_mut()) {
        *x = init.sample(&mut rng);
    }
    let mut biases = Biases {
        global: train_set.global_mean(),
        user: vec![0.0; train_set.num_users()],
        item: vec![0.0; train_set.num_items()],
    };
    let mut order: Vec<usize> = (0..train_set.num_ratings()).collect();
    let mut report = EpochReport::default();
    let mut tmp = vec![0.0; k];
    for epoch in 0..epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for &idx in &order {
            let r = train_set.triples()[idx];
            let (u, t) = (r.user as usize, r.item as usize);
            let pu = &mut model.user_factors[u * k..(u + 1) * k];
            let qi = &mut model.item_factors[t * k..(t + 1) * k];
            let dot: f64 = pu.iter().zip(qi.iter()).map(|(a, b)| a * b).sum();
            let pred = biases.global + biases.user[u] + biases.item[t] + dot;
            let e = r.rating as f64 - pred;
            loss += e * e;
            biases.user[u] += learning_rate * (e - reg * biases.user[u]);
            biases.item[t] += learning_rate * (e - reg * biases.item[t]);
            tmp.copy_from_slice(pu);
            for (p, &q) in pu.iter_mut().zip(qi.iter()) {
                *p += learning_rate * (e * q - reg * *p);
            }
            for (q, &p) in qi.iter_mut().zip(&tmp) {
                *q += learning_rate * (e * p - reg * *q);
            }
        }
        let penalty: f64 = model
            .user_factors
            .iter()
            .chain(&model.item_factors)
            .map(|x| x * x)
            .sum::<f64>()
            + biases.user.iter().chain(&biases.item).map(|x| x * x).sum::<f64>();
        loss += reg * penalty;
        if !loss.is_finite() {
            return Err(SarError::NonFinite(format!("MF loss diverged at epoch {}", epoch + 1)));
        }
        report.loss.push(loss);
        report.seconds.push(start.elapsed().as_secs_f64());
    }
    model.biases = Some(biases);
    Ok((model, report))
}

/// Squared error of `W H` over the observed entries.
pub fn nmf_objective(model: &MFModel, train_set: &RatingDataset) -> f64 {
    train_set
        .triples()
        .iter()
        .map(|r| {
            let e = r.rating as f64 - model.raw_score(r.user as usize, r.item as usize);
            e * e
        })
        .sum()
}

/// Nonnegative factorization fit to the observed entries with masked
/// multiplicative updates (user factors, then item factors, per epoch).
pub fn train_nmf(train_set: &RatingDataset, k: usize, epochs: usize, seed: u64) -> Result<(MFModel, EpochReport)> {
    if k == 0 {
        return Err(invalid("k", "rank must be >= 1"));
    }
    if train_set.is_empty() {
        return Err(SarError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MFModel::empty(MfKind::Nmf, train_set, k);
    // Uniform init scaled so that E[w . h] matches the mean rating.
    let scale = (2.0 * train_set.global_mean() / k as f64).sqrt();
    for x in model.user_factors.iter_mut().chain(model.item_factors.iter_mut()) {
        *x = rng.random::<f64>() * scale;
    }
    let by_user = train_set.triples().to_vec();
    let mut report = EpochReport::default();
    let (nu, ni) = (train_set.num_users(), train_set.num_items());
    let mut numer_u = vec![0.0; nu * k];
    let mut denom_u = vec![0.0; nu * k];
    let mut numer_i = vec![0.0; ni * k];
    let mut denom_i = vec![0.0; ni * k];
    for _ in 0..epochs {
        let start = Instant::now();
        numer_u.fill(0.0);
        denom_u.fill(0.0);
        for r in &by_user {
            let (u, t) = (r.user as usize, r.item as usize);
            let est = model.raw_score(u, t);
            let h = &model.item_factors[t * k..(t + 1) * k];
            for l in 0..k {
                numer_u[u * k + l] += r.rating as f64 * h[l];
                denom_u[u * k + l] += est * h[l];
            }
        }
        for ((w, &n), &d) in model.user_factors.iter_mut().zip(&numer_u).zip(&denom_u) {
            *w *= n / (d + NMF_FLOOR);
        }
        numer_i.fill(0.0);
        denom_i.fill(0.0);
        for r in &by_user {
            let (u, t) = (r.user as usize, r.item as usize);
            let est = model.raw_score(u, t);
            let w = &model.user_factors[u * k..(u + 1) * k];
            for l in 0..k {
                numer_i[t * k + l] += r.rating as f64 * w[l];
                denom_i[t * k + l] += est * w[l];
            }
        }
        for ((h, &n), &d) in model.item_factors.iter_mut().zip(&numer_i).zip(&denom_i) {
            *h *= n / (d + NMF_FLOOR);
        }
        let loss = nmf_objective(&model, train_set);
        if !loss.is_finite() {
            return Err(SarError::NonFinite("NMF objective".into()));
        }
        report.loss.push(loss);
        report.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((model, report))
}
