//! Error metrics, held-out evaluation, sweeps and timing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{predict_mf, train_mf, train_nmf, MFModel};
use crate::dataset::{split, IdMap, RatingDataset, Split};
use crate::error::{invalid, Result, SarError};
use crate::model::{predict_rating, SarHyperparams, SarModel};
use crate::training::{train, TrainConfig, TrainReport, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae_raw: f64,
    pub mae_rounded: f64,
    /// Test pairs scored, cold ones included.
    pub n_evaluated: usize,
    /// Pairs predicted by the fallback because a side had no training data.
    pub n_cold: usize,
}

impl Metrics {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nrmse,{}\nmae_raw,{}\nmae_rounded,{}\nn_evaluated,{}\nn_cold,{}\n",
            self.rmse, self.mae_raw, self.mae_rounded, self.n_evaluated, self.n_cold
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        writeln!(f, "{:<12} {:>10.4}", "rmse", self.rmse)?;
        writeln!(f, "{:<12} {:>10.4}", "mae_raw", self.mae_raw)?;
        writeln!(f, "{:<12} {:>10.4}", "mae_rounded", self.mae_rounded)?;
        writeln!(f, "{:<12} {:>10}", "n_evaluated", self.n_evaluated)?;
        write!(f, "{:<12} {:>10}", "n_cold", self.n_cold)
    }
}

fn check_lengths(preds: &[f64], golds: &[u8]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(invalid(
            "preds",
            format!("{} predictions for {} ratings", preds.len(), golds.len()),
        ));
    }
    if preds.is_empty() {
        return Err(invalid("preds", "empty input"));
    }
    Ok(())
}

pub fn rmse(preds: &[f64], golds: &[u8]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let sse: f64 = preds.iter().zip(golds).map(|(p, &g)| (p - g as f64).powi(2)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Round half up, then clip to `[1, rating_max]`.
pub fn round_rating(pred: f64, rating_max: usize) -> f64 {
    (pred + 0.5).floor().clamp(1.0, rating_max as f64)
}

pub fn mae(preds: &[f64], golds: &[u8], rounded: bool, rating_max: usize) -> Result<f64> {
    check_lengths(preds, golds)?;
    let sae: f64 = preds
        .iter()
        .zip(golds)
        .map(|(&p, &g)| {
            let p = if rounded { round_rating(p, rating_max) } else { p };
            (p - g as f64).abs()
        })
        .sum();
    Ok(sae / preds.len() as f64)
}

/// Anything that scores (user, item) pairs addressed by dense training
/// indices.
pub trait Predictor: Sync {
    fn users(&self) -> &IdMap;
    fn items(&self) -> &IdMap;
    fn rating_max(&self) -> usize;
    /// `None` when either side has no training ratings.
    fn predict_index(&self, u: usize, t: usize) -> Result<Option<f64>>;
}

impl Predictor for SarModel {
    fn users(&self) -> &IdMap {
        &self.users
    }

    fn items(&self) -> &IdMap {
        &self.items
    }

    fn rating_max(&self) -> usize {
        self.hp.rating_max
    }

    fn predict_index(&self, u: usize, t: usize) -> Result<Option<f64>> {
        if !self.is_warm(u, t) {
            return Ok(None);
        }
        predict_rating(&self.params, &self.hp, u, t).map(Some)
    }
}

impl Predictor for MFModel {
    fn users(&self) -> &IdMap {
        &self.users
    }

    fn items(&self) -> &IdMap {
        &self.items
    }

    fn rating_max(&self) -> usize {
        self.rating_max
    }

    fn predict_index(&self, u: usize, t: usize) -> Result<Option<f64>> {
        if !self.is_warm(u, t) {
            return Ok(None);
        }
        Ok(Some(predict_mf(self, u, t)))
    }
}

/// Scores every test pair, matching entities through raw IDs. Cold pairs get
/// `fallback`.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, test: &RatingDataset, fallback: f64) -> Result<Metrics> {
    if test.is_empty() {
        return Err(SarError::EmptyDataset);
    }
    let preds: Vec<Result<Option<f64>>> = test
        .triples()
        .par_iter()
        .map(|r| {
            let raw_u = test.users().raw_of(r.user).expect("valid test index");
            let raw_t = test.items().raw_of(r.item).expect("valid test index");
            match (model.users().index_of(raw_u), model.items().index_of(raw_t)) {
                (Some(u), Some(t)) => model.predict_index(u as usize, t as usize),
                _ => Ok(None),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(preds.len());
    let mut n_cold = 0;
    for p in preds {
        match p? {
            Some(v) => values.push(v),
            None => {
                n_cold += 1;
                values.push(fallback);
            }
        }
    }
    let golds: Vec<u8> = test.triples().iter().map(|r| r.rating).collect();
    let rating_max = model.rating_max();
    Ok(Metrics {
        rmse: rmse(&values, &golds)?,
        mae_raw: mae(&values, &golds, false, rating_max)?,
        mae_rounded: mae(&values, &golds, true, rating_max)?,
        n_evaluated: values.len(),
        n_cold,
    })
}

/// Trains SAR on the split's training side and scores the test side with the
/// training mean as fallback.
pub fn train_and_evaluate(
    data: &Split,
    hp: &SarHyperparams,
    config: &TrainConfig,
) -> Result<(SarModel, TrainReport, Metrics)> {
    let (params, report) = train(&data.train, hp, config)?;
    let model = SarModel::new(&data.train, *hp, params)?;
    let metrics = evaluate(&model, &data.test, model.global_mean)?;
    Ok((model, report, metrics))
}

/// Quantity varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SweepParam {
    Rho,
    F,
    C,
    Sigma,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Rho => "rho",
            SweepParam::F => "F",
            SweepParam::C => "C",
            SweepParam::Sigma => "sigma",
            SweepParam::Lambda => "lambda",
        }
    }

    /// Sets this parameter to `value` in `hp` or `rho`.
    pub fn apply(self, value: f64, hp: &mut SarHyperparams, rho: &mut f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(invalid(
                    "values",
                    format!("{} needs a positive integer, got {v}", self.name()),
                ))
            }
        };
        match self {
            SweepParam::Rho => *rho = value,
            SweepParam::F => hp.num_features = count(value)?,
            SweepParam::C => hp.num_categories = count(value)?,
            SweepParam::Sigma => hp.sigma = value,
            SweepParam::Lambda => hp.lambda = value,
        }
        Ok(())
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = SarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(SweepParam::Rho),
            "F" => Ok(SweepParam::F),
            "C" => Ok(SweepParam::C),
            "sigma" => Ok(SweepParam::Sigma),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(invalid("param", format!("unknown sweep parameter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

/// One split + train + evaluate per `(value, seed)`. The seed drives both the
/// split and the initialization.
#[allow(clippy::too_many_arguments)]
pub fn param_sweep(
    ds: &RatingDataset,
    param: SweepParam,
    values: &[f64],
    hp: &SarHyperparams,
    config: &TrainConfig,
    rho: f64,
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(invalid("values", "sweep needs at least one value and one seed"));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        let mut hp = *hp;
        let mut rho = rho;
        param.apply(value, &mut hp, &mut rho)?;
        hp.validate()?;
        for &seed in seeds {
            let data = split(ds, rho, seed)?;
            let config = TrainConfig { seed, ..config.clone() };
            let (_, _, metrics) = train_and_evaluate(&data, &hp, &config)?;
            let row = SweepRow { value, seed, metrics };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// [`param_sweep`] over the training ratio.
pub fn sparsity_sweep(
    ds: &RatingDataset,
    rhos: &[f64],
    hp: &SarHyperparams,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    param_sweep(ds, SweepParam::Rho, rhos, hp, config, 0.8, seeds, |_| {})
}

/// Mean metrics per swept value, in first-appearance order.
pub fn mean_by_value(rows: &[SweepRow]) -> Vec<(f64, Metrics)> {
    let mut out: Vec<(f64, Vec<Metrics>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _)| v.to_bits() == r.value.to_bits()) {
            Some((_, ms)) => ms.push(r.metrics),
            None => out.push((r.value, vec![r.metrics])),
        }
    }
    out.into_iter()
        .map(|(v, ms)| {
            let n = ms.len() as f64;
            let mean = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
            (
                v,
                Metrics {
                    rmse: mean(|m| m.rmse),
                    mae_raw: mean(|m| m.mae_raw),
                    mae_rounded: mean(|m| m.mae_rounded),
                    n_evaluated: ms.iter().map(|m| m.n_evaluated).sum::<usize>() / ms.len(),
                    n_cold: ms.iter().map(|m| m.n_cold).sum::<usize>() / ms.len(),
                },
            )
        })
        .collect()
}

pub fn sweep_csv_header(param: SweepParam) -> String {
    format!("{},seed,rmse,mae_raw,mae_rounded", param.name())
}

pub fn sweep_csv_row(row: &SweepRow) -> String {
    format!(
        "{},{},{},{},{}",
        row.value, row.seed, row.metrics.rmse, row.metrics.mae_raw, row.metrics.mae_rounded
    )
}

pub fn sweep_to_csv(param: SweepParam, rows: &[SweepRow], config: &BTreeMap<String, String>) -> String {
    let mut out = crate::semantics::config_header(config);
    out.push_str(&sweep_csv_header(param));
    out.push('\n');
    for r in rows {
        out.push_str(&sweep_csv_row(r));
        out.push('\n');
    }
    out
}

/// RMSE gained over NMF per extra second of round time; larger is better.
pub fn tradeoff_metric(rmse_alg: f64, time_alg: f64, rmse_nmf: f64, time_nmf: f64) -> Result<f64> {
    if time_alg == time_nmf {
        return Err(invalid("time_alg", "equal round times make the trade-off undefined"));
    }
    Ok(-(rmse_alg - rmse_nmf) / (time_alg - time_nmf))
}

/// Model whose training rounds [`time_rounds`] measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Timed {
    Sar {
        hp: SarHyperparams,
        config: TrainConfig,
    },
    Mf {
        k: usize,
        learning_rate: f64,
        reg: f64,
        seed: u64,
    },
    Nmf {
        k: usize,
        seed: u64,
    },
}

/// Mean wall-clock seconds of `n_rounds` training rounds after one warm-up
/// round.
pub fn time_rounds(model: &Timed, ds: &RatingDataset, n_rounds: usize) -> Result<f64> {
    if n_rounds == 0 {
        return Err(invalid("n_rounds", "must be >= 1"));
    }
    let seconds: Vec<f64> = match model {
        Timed::Sar { hp, config } => {
            let mut trainer = Trainer::new(ds, *hp, config.clone())?;
            trainer.run_round()?;
            let mut out = Vec::with_capacity(n_rounds);
            for _ in 0..n_rounds {
                let start = Instant::now();
                trainer.run_round()?;
                out.push(start.elapsed().as_secs_f64());
            }
            out
        }
        Timed::Mf {
            k,
            learning_rate,
            reg,
            seed,
        } => train_mf(ds, *k, *learning_rate, *reg, n_rounds + 1, *seed)?.1.seconds[1..].to_vec(),
        Timed::Nmf { k, seed } => train_nmf(ds, *k, n_rounds + 1, *seed)?.1.seconds[1..].to_vec(),
    };
    Ok(seconds.iter().sum::<f64>() / seconds.len() as f64)
}
