//! Regularized squared-error objective, its analytic gradient, and AdaDelta
//! training.
//!
//! Per batch the objective is
//!
//! ```text
//! L = sum_{(u,t,r)} (r_hat(u,t) - r)^2
//!   + lambda * (sum_{u in batch} sum_n ||P(z|u,n)||^2 + sum_{t in batch} sum_n ||P(y|t,n)||^2)
//! ```
//!
//! where every user and item in the batch is regularized once, however many
//! of its ratings the batch holds.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Rating, RatingDataset};
use crate::error::{invalid, Result, SarError};
use crate::model::{dot, PairForward, SarHyperparams, SarParams, Side};

/// Examples per gradient chunk. Chunk partials are reduced in chunk order so
/// the result does not depend on the thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// AdaDelta decay of both moving averages.
    pub eta: f64,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Minimum train-RMSE improvement that resets the patience counter.
    pub tolerance: f64,
    pub patience: usize,
    pub init_scale: f64,
    /// Worker threads for per-example gradients; 1 runs inline.
    pub threads: usize,
    /// Bring the accumulators of rows absent from a batch up to date lazily
    /// (exactly `eta^k` decay on next use) instead of touching every row on
    /// every step.
    pub lazy_rows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.6,
            epsilon: 1e-6,
            max_rounds: 400,
            batch_size: 128,
            seed: 0,
            tolerance: 1e-5,
            patience: 5,
            init_scale: 0.1,
            threads: 1,
            lazy_rows: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid("eta", format!("must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if self.max_rounds == 0 {
            return Err(invalid("max_rounds", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance", "must be nonnegative"));
        }
        if self.patience == 0 {
            return Err(invalid("patience", "must be >= 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(invalid("init_scale", "must be positive"));
        }
        if self.threads == 0 {
            return Err(invalid("threads", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective summed over the batches of each round.
    pub loss: Vec<f64>,
    /// RMSE of the predictions made during each round's pass.
    pub train_rmse: Vec<f64>,
    pub seconds: Vec<f64>,
    pub rounds: usize,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// CSV training log, `round,loss,train_rmse,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,loss,train_rmse,seconds\n");
        for k in 0..self.rounds {
            out.push_str(&format!(
                "{},{},{},{}\n",
                k + 1,
                self.loss[k],
                self.train_rmse[k],
                self.seconds[k]
            ));
        }
        out
    }
}

/// Per-round statistics handed to a training observer.
#[derive(Debug, Clone, Copy)]
pub struct RoundStats {
    pub round: usize,
    pub loss: f64,
    pub train_rmse: f64,
    pub seconds: f64,
}

/// Gradients of one chunk of examples: the summed preference-table gradient
/// plus per-example row gradients, `[example][user row | item row]`.
struct ChunkGrad {
    tau: Vec<f64>,
    rows: Vec<f64>,
    omegas: Vec<(f64, f64)>,
    sq_err: f64,
}

/// Scratch for the backward pass of one pair.
struct Backward {
    fwd: PairForward,
    grad_scores: Vec<f64>,
    mix: Vec<f64>,
    grad_user_dist: Vec<f64>,
    grad_item_dist: Vec<f64>,
}

impl Backward {
    fn new(hp: &SarHyperparams) -> Self {
        let (f, c, r) = (hp.num_features, hp.num_categories, hp.rating_max);
        Self {
            fwd: PairForward::new(f, c, r),
            grad_scores: vec![0.0; r],
            mix: vec![0.0; c * c],
            grad_user_dist: vec![0.0; f * c],
            grad_item_dist: vec![0.0; f * c],
        }
    }

    /// Forward + backward for one rating. Adds the preference-table gradient
    /// into `tau_grad`, writes the user and item logit gradients into
    /// `user_row` and `item_row`, and returns the omega gradients and the
    /// squared error.
    fn run(
        &mut self,
        params: &SarParams,
        hp: &SarHyperparams,
        rating: Rating,
        tau_grad: &mut [f64],
        user_row: &mut [f64],
        item_row: &mut [f64],
    ) -> ((f64, f64), f64) {
        let (f, c, r) = (hp.num_features, hp.num_categories, hp.rating_max);
        let (u, t) = (rating.user as usize, rating.item as usize);
        self.fwd.run(params, hp.sigma, u, t);
        let fwd = &self.fwd;
        let resid = fwd.prediction - rating.rating as f64;
        let g_pred = 2.0 * resid;

        // d r_hat / d x_p = s_p (p - r_hat), with x_p = q_p * omega.
        let mut g_omega = 0.0;
        for p in 0..r {
            let d = fwd.soft[p] * ((p + 1) as f64 - fwd.prediction) * g_pred;
            self.grad_scores[p] = d * fwd.omega;
            g_omega += d * fwd.scores[p];
        }

        let cc = c * c;
        let inv_f = 1.0 / f as f64;
        let inv_sigma = 1.0 / hp.sigma;
        for n in 0..f {
            let block = &params.tau[n * r * cc..(n + 1) * r * cc];
            let gblock = &mut tau_grad[n * r * cc..(n + 1) * r * cc];
            let w = &fwd.weight[n * cc..(n + 1) * cc];
            self.mix.fill(0.0);
            for ((&g, row), grow) in self
                .grad_scores
                .iter()
                .zip(block.chunks_exact(cc))
                .zip(gblock.chunks_exact_mut(cc))
            {
                for (((gt, m), &x), &wk) in grow.iter_mut().zip(self.mix.iter_mut()).zip(row).zip(w) {
                    *gt += g * wk;
                    *m += g * x;
                }
            }
            let a = &fwd.user_dist[n * c..(n + 1) * c];
            let b = &fwd.item_dist[n * c..(n + 1) * c];
            let lap = &fwd.laplace[n * cc..(n + 1) * cc];
            let ga = &mut self.grad_user_dist[n * c..(n + 1) * c];
            let gb = &mut self.grad_item_dist[n * c..(n + 1) * c];
            gb.fill(0.0);
            for i in 0..c {
                let ai = a[i];
                let mix_row = &self.mix[i * c..(i + 1) * c];
                let lap_row = &lap[i * c..(i + 1) * c];
                let mut acc = 0.0;
                for (((gbj, &bj), &m), &l) in gb.iter_mut().zip(b).zip(mix_row).zip(lap_row) {
                    let h = m * l * inv_f;
                    // Subgradient 0 at the kink a_i == b_j.
                    let sign = (ai > bj) as i32 as f64 - (ai < bj) as i32 as f64;
                    let slope = sign * inv_sigma;
                    acc += h * bj * (1.0 - ai * slope);
                    *gbj += h * ai * (1.0 + bj * slope);
                }
                ga[i] = acc;
            }
        }

        for n in 0..f {
            let range = n * c..(n + 1) * c;
            softmax_backward(
                &fwd.user_dist[range.clone()],
                &self.grad_user_dist[range.clone()],
                &mut user_row[range.clone()],
            );
            softmax_backward(
                &fwd.item_dist[range.clone()],
                &self.grad_item_dist[range.clone()],
                &mut item_row[range],
            );
        }
        let omegas = (g_omega * params.omega_t[t], g_omega * params.omega_u[u]);
        (omegas, resid * resid)
    }
}

/// Pulls a gradient w.r.t. a distribution back to its logits.
#[inline]
fn softmax_backward(dist: &[f64], grad_dist: &[f64], out: &mut [f64]) {
    let inner = dot(dist, grad_dist);
    for ((o, &a), &g) in out.iter_mut().zip(dist).zip(grad_dist) {
        *o = a * (g - inner);
    }
}

/// Objective value and gradient of one batch, accumulated into a full-size
/// gradient buffer whose touched rows are recorded.
struct BatchGrad {
    grad: SarParams,
    users: Vec<u32>,
    items: Vec<u32>,
    user_mark: Vec<bool>,
    item_mark: Vec<bool>,
}

struct BatchValue {
    loss: f64,
    sq_err: f64,
}

impl BatchGrad {
    fn new(params: &SarParams, hp: &SarHyperparams) -> Self {
        Self {
            grad: SarParams::zeros(hp, params.num_users(), params.num_items()),
            users: Vec::new(),
            items: Vec::new(),
            user_mark: vec![false; params.num_users()],
            item_mark: vec![false; params.num_items()],
        }
    }

    /// Zeros the rows touched by the previous batch.
    fn clear(&mut self) {
        let fc = self.grad.num_features() * self.grad.num_categories();
        for &u in &self.users {
            let u = u as usize;
            self.grad.user_logits[u * fc..(u + 1) * fc].fill(0.0);
            self.grad.omega_u[u] = 0.0;
            self.user_mark[u] = false;
        }
        for &t in &self.items {
            let t = t as usize;
            self.grad.item_logits[t * fc..(t + 1) * fc].fill(0.0);
            self.grad.omega_t[t] = 0.0;
            self.item_mark[t] = false;
        }
        self.users.clear();
        self.items.clear();
        self.grad.tau.fill(0.0);
    }

    fn compute(
        &mut self,
        params: &SarParams,
        hp: &SarHyperparams,
        batch: &[Rating],
        pool: Option<&rayon::ThreadPool>,
    ) -> BatchValue {
        self.clear();
        let tau_len = params.tau.len();
        let fc = hp.num_features * hp.num_categories;
        let chunk_grad = |chunk: &[Rating]| -> ChunkGrad {
            let mut bw = Backward::new(hp);
            let mut out = ChunkGrad {
                tau: vec![0.0; tau_len],
                rows: vec![0.0; chunk.len() * 2 * fc],
                omegas: Vec::with_capacity(chunk.len()),
                sq_err: 0.0,
            };
            for (&rating, rows) in chunk.iter().zip(out.rows.chunks_exact_mut(2 * fc)) {
                let (user_row, item_row) = rows.split_at_mut(fc);
                let (omegas, e) = bw.run(params, hp, rating, &mut out.tau, user_row, item_row);
                out.sq_err += e;
                out.omegas.push(omegas);
            }
            out
        };
        let chunks: Vec<ChunkGrad> = match pool {
            Some(pool) => pool.install(|| batch.par_chunks(GRAD_CHUNK).map(chunk_grad).collect()),
            None => batch.chunks(GRAD_CHUNK).map(chunk_grad).collect(),
        };

        let mut sq_err = 0.0;
        for (chunk, ratings) in chunks.iter().zip(batch.chunks(GRAD_CHUNK)) {
            sq_err += chunk.sq_err;
            for (acc, g) in self.grad.tau.iter_mut().zip(&chunk.tau) {
                *acc += g;
            }
            for ((rating, rows), &(gu, gt)) in ratings.iter().zip(chunk.rows.chunks_exact(2 * fc)).zip(&chunk.omegas) {
                let (u, t) = (rating.user as usize, rating.item as usize);
                if !self.user_mark[u] {
                    self.user_mark[u] = true;
                    self.users.push(rating.user);
                }
                if !self.item_mark[t] {
                    self.item_mark[t] = true;
                    self.items.push(rating.item);
                }
                let (user_row, item_row) = rows.split_at(fc);
                for (acc, g) in self.grad.user_logits[u * fc..(u + 1) * fc].iter_mut().zip(user_row) {
                    *acc += g;
                }
                for (acc, g) in self.grad.item_logits[t * fc..(t + 1) * fc].iter_mut().zip(item_row) {
                    *acc += g;
                }
                self.grad.omega_u[u] += gu;
                self.grad.omega_t[t] += gt;
            }
        }

        let reg = if hp.lambda > 0.0 {
            let mut reg = 0.0;
            for &u in &self.users {
                reg += add_regularizer(params, &mut self.grad, hp, Side::User, u as usize);
            }
            for &t in &self.items {
                reg += add_regularizer(params, &mut self.grad, hp, Side::Item, t as usize);
            }
            reg
        } else {
            0.0
        };
        BatchValue {
            loss: sq_err + hp.lambda * reg,
            sq_err,
        }
    }
}

/// Adds `lambda * grad(sum_n ||P(.|e,n)||^2)` to the entity's logit gradient
/// and returns the unscaled penalty.
fn add_regularizer(params: &SarParams, grad: &mut SarParams, hp: &SarHyperparams, side: Side, e: usize) -> f64 {
    let c = hp.num_categories;
    let mut dist = vec![0.0; c];
    let mut penalty = 0.0;
    for n in 0..hp.num_features {
        crate::model::softmax_into(params.logits(side, e, n), &mut dist);
        let sq = dot(&dist, &dist);
        penalty += sq;
        // d/dx_k sum_i a_i^2 = 2 a_k (a_k - sum_i a_i^2)
        for (g, &a) in grad.logits_mut(side, e, n).iter_mut().zip(&dist) {
            *g += hp.lambda * 2.0 * a * (a - sq);
        }
    }
    penalty
}

fn check_batch(params: &SarParams, hp: &SarHyperparams, batch: &[Rating]) -> Result<()> {
    params.check_hyperparams(hp)?;
    if batch.is_empty() {
        return Err(invalid("batch", "must be nonempty"));
    }
    for r in batch {
        crate::error::check_index("user", r.user as usize, params.num_users())?;
        crate::error::check_index("item", r.item as usize, params.num_items())?;
    }
    Ok(())
}

/// Objective value on one batch.
pub fn loss(params: &SarParams, hp: &SarHyperparams, batch: &[Rating]) -> Result<f64> {
    check_batch(params, hp, batch)?;
    let mut fwd = PairForward::new(hp.num_features, hp.num_categories, hp.rating_max);
    let mut sq_err = 0.0;
    let mut users = std::collections::BTreeSet::new();
    let mut items = std::collections::BTreeSet::new();
    for r in batch {
        fwd.run(params, hp.sigma, r.user as usize, r.item as usize);
        let e = fwd.prediction - r.rating as f64;
        sq_err += e * e;
        users.insert(r.user as usize);
        items.insert(r.item as usize);
    }
    let mut reg = 0.0;
    let mut dist = vec![0.0; hp.num_categories];
    for (side, set) in [(Side::User, &users), (Side::Item, &items)] {
        for &e in set {
            for n in 0..hp.num_features {
                crate::model::softmax_into(params.logits(side, e, n), &mut dist);
                reg += dot(&dist, &dist);
            }
        }
    }
    let value = sq_err + hp.lambda * reg;
    if !value.is_finite() {
        return Err(SarError::NonFinite("batch loss".into()));
    }
    Ok(value)
}

/// Analytic gradient of [`loss`], shaped like the parameters.
pub fn gradients(params: &SarParams, hp: &SarHyperparams, batch: &[Rating]) -> Result<SarParams> {
    check_batch(params, hp, batch)?;
    let mut bg = BatchGrad::new(params, hp);
    bg.compute(params, hp, batch, None);
    if !bg.grad.all_finite() {
        return Err(SarError::NonFinite("gradient".into()));
    }
    Ok(bg.grad)
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` of a scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient of [`loss`] for every scalar parameter.
/// Intended for small instances.
pub fn finite_diff_grad(params: &SarParams, hp: &SarHyperparams, batch: &[Rating], h: f64) -> Result<SarParams> {
    if !(h > 0.0) {
        return Err(invalid("h", "must be positive"));
    }
    check_batch(params, hp, batch)?;
    let mut probe = params.clone();
    let mut out = SarParams::zeros(hp, params.num_users(), params.num_items());
    for which in 0..5 {
        let len = params.tensors()[which].len();
        for k in 0..len {
            let x = params.tensors()[which][k];
            probe.tensors_mut()[which][k] = x + h;
            let plus = loss(&probe, hp, batch)?;
            probe.tensors_mut()[which][k] = x - h;
            let minus = loss(&probe, hp, batch)?;
            probe.tensors_mut()[which][k] = x;
            out.tensors_mut()[which][k] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

/// AdaDelta moving averages, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub sq_grad: SarParams,
    pub sq_update: SarParams,
}

impl AdaDeltaState {
    pub fn new(params: &SarParams) -> Self {
        let hp = SarHyperparams {
            num_features: params.num_features(),
            num_categories: params.num_categories(),
            rating_max: params.rating_max(),
            ..SarHyperparams::default()
        };
        let zeros = SarParams::zeros(&hp, params.num_users(), params.num_items());
        Self {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// One AdaDelta update over parallel slices.
#[inline]
pub fn adadelta_update(
    sq_grad: &mut [f64],
    sq_update: &mut [f64],
    theta: &mut [f64],
    grad: &[f64],
    eta: f64,
    epsilon: f64,
) {
    for (((eg, ed), th), &g) in sq_grad
        .iter_mut()
        .zip(sq_update.iter_mut())
        .zip(theta.iter_mut())
        .zip(grad)
    {
        let next = eta * *eg + (1.0 - eta) * g * g;
        let delta = -((*ed + epsilon).sqrt() / (next + epsilon).sqrt()) * g;
        *eg = next;
        *ed = eta * *ed + (1.0 - eta) * delta * delta;
        *th += delta;
    }
}

/// Dense AdaDelta step over every parameter tensor.
pub fn adadelta_step(state: &mut AdaDeltaState, params: &mut SarParams, grads: &SarParams, eta: f64, epsilon: f64) {
    let sq_grad = state.sq_grad.tensors_mut();
    let sq_update = state.sq_update.tensors_mut();
    let thetas = params.tensors_mut();
    let gs = grads.tensors();
    for (((eg, ed), theta), g) in sq_grad.into_iter().zip(sq_update).zip(thetas).zip(gs) {
        adadelta_update(eg, ed, theta, g, eta, epsilon);
    }
}

/// AdaDelta over row-sparse gradients. Rows absent from a step only decay
/// their accumulators by `eta`, so the decay is deferred until the row is
/// next touched (or [`LazyAdaDelta::flush`] is called).
struct LazyAdaDelta {
    state: AdaDeltaState,
    step: u64,
    user_seen: Vec<u64>,
    item_seen: Vec<u64>,
}

impl LazyAdaDelta {
    fn new(params: &SarParams) -> Self {
        Self {
            state: AdaDeltaState::new(params),
            step: 0,
            user_seen: vec![0; params.num_users()],
            item_seen: vec![0; params.num_items()],
        }
    }

    fn catch_up(&mut self, side: Side, e: usize, upto: u64, eta: f64) {
        let fc = self.state.sq_grad.num_features() * self.state.sq_grad.num_categories();
        let (seen, eg, ed, og, od) = match side {
            Side::User => (
                &mut self.user_seen,
                &mut self.state.sq_grad.user_logits,
                &mut self.state.sq_update.user_logits,
                &mut self.state.sq_grad.omega_u,
                &mut self.state.sq_update.omega_u,
            ),
            Side::Item => (
                &mut self.item_seen,
                &mut self.state.sq_grad.item_logits,
                &mut self.state.sq_update.item_logits,
                &mut self.state.sq_grad.omega_t,
                &mut self.state.sq_update.omega_t,
            ),
        };
        let skipped = upto - seen[e];
        if skipped > 0 {
            let decay = eta.powi(skipped.min(i32::MAX as u64) as i32);
            for x in eg[e * fc..(e + 1) * fc]
                .iter_mut()
                .chain(ed[e * fc..(e + 1) * fc].iter_mut())
            {
                *x *= decay;
            }
            og[e] *= decay;
            od[e] *= decay;
        }
        seen[e] = upto;
    }

    fn step(&mut self, params: &mut SarParams, bg: &BatchGrad, eta: f64, epsilon: f64) {
        self.step += 1;
        let before = self.step - 1;
        let fc = params.num_features() * params.num_categories();
        adadelta_update(
            &mut self.state.sq_grad.tau,
            &mut self.state.sq_update.tau,
            &mut params.tau,
            &bg.grad.tau,
            eta,
            epsilon,
        );
        for &u in &bg.users {
            let u = u as usize;
            self.catch_up(Side::User, u, before, eta);
            let rows = u * fc..(u + 1) * fc;
            adadelta_update(
                &mut self.state.sq_grad.user_logits[rows.clone()],
                &mut self.state.sq_update.user_logits[rows.clone()],
                &mut params.user_logits[rows.clone()],
                &bg.grad.user_logits[rows],
                eta,
                epsilon,
            );
            adadelta_update(
                &mut self.state.sq_grad.omega_u[u..u + 1],
                &mut self.state.sq_update.omega_u[u..u + 1],
                &mut params.omega_u[u..u + 1],
                &bg.grad.omega_u[u..u + 1],
                eta,
                epsilon,
            );
            self.user_seen[u] = self.step;
        }
        for &t in &bg.items {
            let t = t as usize;
            self.catch_up(Side::Item, t, before, eta);
            let rows = t * fc..(t + 1) * fc;
            adadelta_update(
                &mut self.state.sq_grad.item_logits[rows.clone()],
                &mut self.state.sq_update.item_logits[rows.clone()],
                &mut params.item_logits[rows.clone()],
                &bg.grad.item_logits[rows],
                eta,
                epsilon,
            );
            adadelta_update(
                &mut self.state.sq_grad.omega_t[t..t + 1],
                &mut self.state.sq_update.omega_t[t..t + 1],
                &mut params.omega_t[t..t + 1],
                &bg.grad.omega_t[t..t + 1],
                eta,
                epsilon,
            );
            self.item_seen[t] = self.step;
        }
    }

    /// Applies all pending decay so the state equals the dense recurrence.
    fn flush(&mut self, eta: f64) -> &AdaDeltaState {
        let now = self.step;
        for u in 0..self.user_seen.len() {
            self.catch_up(Side::User, u, now, eta);
        }
        for t in 0..self.item_seen.len() {
            self.catch_up(Side::Item, t, now, eta);
        }
        &self.state
    }
}

enum Optimizer {
    Dense(AdaDeltaState),
    Lazy(LazyAdaDelta),
}

/// Mini-batch AdaDelta trainer over a fixed dataset.
pub struct Trainer<'a> {
    data: &'a RatingDataset,
    hp: SarHyperparams,
    config: TrainConfig,
    params: SarParams,
    optimizer: Optimizer,
    batch_grad: BatchGrad,
    order: Vec<usize>,
    batch: Vec<Rating>,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    rounds_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a RatingDataset, hp: SarHyperparams, config: TrainConfig) -> Result<Self> {
        hp.validate()?;
        config.validate()?;
        if data.is_empty() {
            return Err(SarError::EmptyDataset);
        }
        if (data.rating_max() as usize) > hp.rating_max {
            return Err(invalid(
                "R",
                format!(
                    "dataset holds ratings up to {} but R = {}",
                    data.rating_max(),
                    hp.rating_max
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = SarParams::init_random(&hp, data.num_users(), data.num_items(), config.init_scale, &mut rng)?;
        let optimizer = if config.lazy_rows {
            Optimizer::Lazy(LazyAdaDelta::new(&params))
        } else {
            Optimizer::Dense(AdaDeltaState::new(&params))
        };
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| invalid("threads", e.to_string()))?,
            )
        } else {
            None
        };
        let batch_grad = BatchGrad::new(&params, &hp);
        Ok(Self {
            data,
            hp,
            order: (0..data.num_ratings()).collect(),
            batch: Vec::with_capacity(config.batch_size),
            config,
            params,
            optimizer,
            batch_grad,
            rng,
            pool,
            rounds_done: 0,
        })
    }

    pub fn params(&self) -> &SarParams {
        &self.params
    }

    pub fn into_params(self) -> SarParams {
        self.params
    }

    /// Current optimizer state with all deferred decay applied.
    pub fn optimizer_state(&mut self) -> &AdaDeltaState {
        match &mut self.optimizer {
            Optimizer::Dense(s) => s,
            Optimizer::Lazy(l) => l.flush(self.config.eta),
        }
    }

    /// One shuffled pass over the data in mini-batches.
    pub fn run_round(&mut self) -> Result<RoundStats> {
        let start = Instant::now();
        self.order.shuffle(&mut self.rng);
        let mut loss = 0.0;
        let mut sq_err = 0.0;
        let (eta, eps) = (self.config.eta, self.config.epsilon);
        for idx in self.order.chunks(self.config.batch_size) {
            self.batch.clear();
            self.batch.extend(idx.iter().map(|&k| self.data.triples()[k]));
            let value = self
                .batch_grad
                .compute(&self.params, &self.hp, &self.batch, self.pool.as_ref());
            if !value.loss.is_finite() {
                return Err(SarError::NonFinite(format!(
                    "loss diverged in round {}",
                    self.rounds_done + 1
                )));
            }
            loss += value.loss;
            sq_err += value.sq_err;
            match &mut self.optimizer {
                Optimizer::Dense(state) => adadelta_step(state, &mut self.params, &self.batch_grad.grad, eta, eps),
                Optimizer::Lazy(lazy) => lazy.step(&mut self.params, &self.batch_grad, eta, eps),
            }
        }
        self.rounds_done += 1;
        Ok(RoundStats {
            round: self.rounds_done,
            loss,
            train_rmse: (sq_err / self.data.num_ratings() as f64).sqrt(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains until the train RMSE stalls for `patience` rounds or `max_rounds`
/// is reached.
pub fn train(train_set: &RatingDataset, hp: &SarHyperparams, config: &TrainConfig) -> Result<(SarParams, TrainReport)> {
    train_with_observer(train_set, hp, config, |_, _| {})
}

/// Like [`train`], calling `observer` after every round.
pub fn train_with_observer<F>(
    train_set: &RatingDataset,
    hp: &SarHyperparams,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(SarParams, TrainReport)>
where
    F: FnMut(&RoundStats, &SarParams),
{
    let mut trainer = Trainer::new(train_set, *hp, config.clone())?;
    let mut report = TrainReport {
        loss: Vec::new(),
        train_rmse: Vec::new(),
        seconds: Vec::new(),
        rounds: 0,
        stop_reason: StopReason::MaxRounds,
    };
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..config.max_rounds {
        let stats = trainer.run_round()?;
        report.loss.push(stats.loss);
        report.train_rmse.push(stats.train_rmse);
        report.seconds.push(stats.seconds);
        report.rounds += 1;
        observer(&stats, trainer.params());
        if stats.train_rmse < best - config.tolerance {
            best = stats.train_rmse;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.patience {
                report.stop_reason = StopReason::Converged;
                break;
            }
        }
    }
    Ok((trainer.into_params(), report))
}
