//! JSON checkpoints for trained models.
//!
//! One document per model, tagged by `model_type` (`sar`, `mf`, `nmf`).
//! Tensors are written as row-major nested arrays; the SAR preference table
//! uses the `[level][z][y][feature]` nesting. Floats are printed in shortest
//! round-trip form, so `load(save(m))` reproduces every finite value bit for
//! bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{Biases, MFModel, MfKind};
use crate::dataset::IdMap;
use crate::error::{Result, SarError};
use crate::model::{SarHyperparams, SarModel, SarParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparamsJson {
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SarCheckpoint {
    pub version: u32,
    /// Effective run configuration, echoed verbatim.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    pub hyperparams: HyperparamsJson,
    pub num_users: usize,
    pub num_items: usize,
    pub user_logits: Vec<Vec<Vec<f64>>>,
    pub item_logits: Vec<Vec<Vec<f64>>>,
    pub tau: Vec<Vec<Vec<Vec<f64>>>>,
    pub omega_u: Vec<f64>,
    pub omega_t: Vec<f64>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub user_counts: Vec<u32>,
    pub item_counts: Vec<u32>,
    pub global_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfCheckpoint {
    pub version: u32,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    pub rank: usize,
    pub rating_max: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    #[serde(default)]
    pub biases: Option<Biases>,
    pub global_mean: f64,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub user_counts: Vec<u32>,
    pub item_counts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "lowercase")]
pub enum Checkpoint {
    Sar(SarCheckpoint),
    Mf(MfCheckpoint),
    Nmf(MfCheckpoint),
}

/// A loaded model of any supported type.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Sar(SarModel),
    Factor(MFModel),
}

fn bad(msg: impl Into<String>) -> SarError {
    SarError::Checkpoint(msg.into())
}

fn nest2(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    if cols == 0 {
        return Vec::new();
    }
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn flatten2(rows: &[Vec<f64>], n_rows: usize, cols: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != cols) {
        return Err(bad(format!("{what} must have shape [{n_rows}][{cols}]")));
    }
    Ok(rows.concat())
}

fn logits_to_json(flat: &[f64], f: usize, c: usize) -> Vec<Vec<Vec<f64>>> {
    flat.chunks(f * c).map(|row| nest2(row, c)).collect()
}

fn logits_from_json(data: &[Vec<Vec<f64>>], n: usize, f: usize, c: usize, what: &str) -> Result<Vec<f64>> {
    if data.len() != n {
        return Err(bad(format!("{what} must have {n} rows")));
    }
    let mut out = Vec::with_capacity(n * f * c);
    for row in data {
        out.extend(flatten2(row, f, c, what)?);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_sar(model: &SarModel, config: BTreeMap<String, String>) -> Self {
        let hp = model.hp;
        let p = &model.params;
        let (f, c, r) = (hp.num_features, hp.num_categories, hp.rating_max);
        let tau = (0..r)
            .map(|q| {
                (0..c)
                    .map(|i| (0..c).map(|j| (0..f).map(|n| p.tau(q, i, j, n)).collect()).collect())
                    .collect()
            })
            .collect();
        Checkpoint::Sar(SarCheckpoint {
            version: CHECKPOINT_VERSION,
            config,
            hyperparams: HyperparamsJson {
                f,
                c,
                r,
                sigma: hp.sigma,
                lambda: hp.lambda,
            },
            num_users: p.num_users(),
            num_items: p.num_items(),
            user_logits: logits_to_json(&p.user_logits, f, c),
            item_logits: logits_to_json(&p.item_logits, f, c),
            tau,
            omega_u: p.omega_u.clone(),
            omega_t: p.omega_t.clone(),
            user_ids: model.users.raw_ids().to_vec(),
            item_ids: model.items.raw_ids().to_vec(),
            user_counts: model.user_counts.clone(),
            item_counts: model.item_counts.clone(),
            global_mean: model.global_mean,
        })
    }

    pub fn from_mf(model: &MFModel, config: BTreeMap<String, String>) -> Self {
        let body = MfCheckpoint {
            version: CHECKPOINT_VERSION,
            config,
            rank: model.rank,
            rating_max: model.rating_max,
            num_users: model.num_users(),
            num_items: model.num_items(),
            user_factors: nest2(&model.user_factors, model.rank),
            item_factors: nest2(&model.item_factors, model.rank),
            biases: model.biases.clone(),
            global_mean: model.global_mean,
            user_ids: model.users.raw_ids().to_vec(),
            item_ids: model.items.raw_ids().to_vec(),
            user_counts: model.user_counts.clone(),
            item_counts: model.item_counts.clone(),
        };
        match model.kind {
            MfKind::Mf => Checkpoint::Mf(body),
            MfKind::Nmf => Checkpoint::Nmf(body),
        }
    }

    pub fn config(&self) -> &BTreeMap<String, String> {
        match self {
            Checkpoint::Sar(c) => &c.config,
            Checkpoint::Mf(c) | Checkpoint::Nmf(c) => &c.config,
        }
    }

    pub fn into_model(self) -> Result<AnyModel> {
        match self {
            Checkpoint::Sar(c) => sar_from_json(c).map(AnyModel::Sar),
            Checkpoint::Mf(c) => mf_from_json(c, MfKind::Mf).map(AnyModel::Factor),
            Checkpoint::Nmf(c) => mf_from_json(c, MfKind::Nmf).map(AnyModel::Factor),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let version = match &ck {
            Checkpoint::Sar(c) => c.version,
            Checkpoint::Mf(c) | Checkpoint::Nmf(c) => c.version,
        };
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|source| SarError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SarError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn id_maps(users: Vec<u64>, items: Vec<u64>, nu: usize, ni: usize) -> Result<(Arc<IdMap>, Arc<IdMap>)> {
    if users.len() != nu || items.len() != ni {
        return Err(bad("id maps do not match entity counts"));
    }
    Ok((Arc::new(IdMap::from_raw(users)?), Arc::new(IdMap::from_raw(items)?)))
}

fn sar_from_json(c: SarCheckpoint) -> Result<SarModel> {
    let hp = SarHyperparams {
        num_features: c.hyperparams.f,
        num_categories: c.hyperparams.c,
        rating_max: c.hyperparams.r,
        sigma: c.hyperparams.sigma,
        lambda: c.hyperparams.lambda,
    };
    hp.validate()?;
    let (f, cc, r) = (hp.num_features, hp.num_categories, hp.rating_max);
    let mut params = SarParams::zeros(&hp, c.num_users, c.num_items);
    params.user_logits = logits_from_json(&c.user_logits, c.num_users, f, cc, "user_logits")?;
    params.item_logits = logits_from_json(&c.item_logits, c.num_items, f, cc, "item_logits")?;
    if c.tau.len() != r
        || c.tau
            .iter()
            .any(|a| a.len() != cc || a.iter().any(|b| b.len() != cc || b.iter().any(|d| d.len() != f)))
    {
        return Err(bad(format!("tau must have shape [{r}][{cc}][{cc}][{f}]")));
    }
    for (q, a) in c.tau.iter().enumerate() {
        for (i, b) in a.iter().enumerate() {
            for (j, d) in b.iter().enumerate() {
                for (n, &x) in d.iter().enumerate() {
                    params.set_tau(q, i, j, n, x);
                }
            }
        }
    }
    if c.omega_u.len() != c.num_users || c.omega_t.len() != c.num_items {
        return Err(bad("omega lengths do not match entity counts"));
    }
    params.omega_u = c.omega_u;
    params.omega_t = c.omega_t;
    if c.user_counts.len() != c.num_users || c.item_counts.len() != c.num_items {
        return Err(bad("count lengths do not match entity counts"));
    }
    let (users, items) = id_maps(c.user_ids, c.item_ids, c.num_users, c.num_items)?;
    Ok(SarModel {
        hp,
        params,
        users,
        items,
        user_counts: c.user_counts,
        item_counts: c.item_counts,
        global_mean: c.global_mean,
    })
}

fn mf_from_json(c: MfCheckpoint, kind: MfKind) -> Result<MFModel> {
    if c.rank == 0 {
        return Err(bad("rank must be >= 1"));
    }
    let user_factors = flatten2(&c.user_factors, c.num_users, c.rank, "user_factors")?;
    let item_factors = flatten2(&c.item_factors, c.num_items, c.rank, "item_factors")?;
    if let Some(b) = &c.biases {
        if b.user.len() != c.num_users || b.item.len() != c.num_items {
            return Err(bad("bias lengths do not match entity counts"));
        }
    }
    if c.user_counts.len() != c.num_users || c.item_counts.len() != c.num_items {
        return Err(bad("count lengths do not match entity counts"));
    }
    let (users, items) = id_maps(c.user_ids, c.item_ids, c.num_users, c.num_items)?;
    Ok(MFModel {
        kind,
        rank: c.rank,
        rating_max: c.rating_max,
        user_factors,
        item_factors,
        biases: c.biases,
        global_mean: c.global_mean,
        users,
        items,
        user_counts: c.user_counts,
        item_counts: c.item_counts,
    })
}
