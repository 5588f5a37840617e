//! Per-feature semantic profiles and their 2-D PCA projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::RatingDataset;
use crate::error::{invalid, Result, SarError};
use crate::model::{item_semantic_profile, user_semantic_profile, SarHyperparams, SarParams, Side};

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticProfile {
    pub kind: Side,
    pub index: usize,
    pub raw_id: u64,
    pub feature: usize,
    pub distribution: Vec<f64>,
    pub pca_xy: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SkipReason {
    /// No training ratings.
    NoRatings,
    /// Every category score was zero (all clamped preferences vanish).
    Degenerate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SkipReport {
    pub skipped: Vec<(u64, SkipReason)>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }
}

/// One profile per entity of `kind` that has ratings in `ds`; `pca_xy` is
/// left at zero.
pub fn extract_profiles(
    params: &SarParams,
    hp: &SarHyperparams,
    ds: &RatingDataset,
    feature: usize,
    kind: Side,
) -> Result<(Vec<SemanticProfile>, SkipReport)> {
    params.check_hyperparams(hp)?;
    if feature >= hp.num_features {
        return Err(invalid("feature", format!("{feature} >= {}", hp.num_features)));
    }
    if params.num_users() != ds.num_users() || params.num_items() != ds.num_items() {
        return Err(invalid("ds", "entity counts differ from the model"));
    }
    let (neighbours, ids) = match kind {
        Side::User => (ds.items_by_user(), ds.users()),
        Side::Item => (ds.users_by_item(), ds.items()),
    };
    let results: Vec<Result<std::result::Result<Vec<f64>, SkipReason>>> = neighbours
        .par_iter()
        .enumerate()
        .map(|(idx, others)| {
            if others.is_empty() {
                return Ok(Err(SkipReason::NoRatings));
            }
            let r = match kind {
                Side::User => user_semantic_profile(params, hp, idx, feature, others),
                Side::Item => item_semantic_profile(params, hp, idx, feature, others),
            };
            match r {
                Ok(d) => Ok(Ok(d)),
                Err(SarError::Degenerate(_)) => Ok(Err(SkipReason::Degenerate)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut profiles = Vec::new();
    let mut report = SkipReport::default();
    for (idx, r) in results.into_iter().enumerate() {
        let raw_id = ids.raw_of(idx as u32).expect("dense index has a raw id");
        match r? {
            Ok(distribution) => profiles.push(SemanticProfile {
                kind,
                index: idx,
                raw_id,
                feature,
                distribution,
                pca_xy: [0.0; 2],
            }),
            Err(reason) => report.skipped.push((raw_id, reason)),
        }
    }
    Ok((profiles, report))
}

/// Eigen-decomposition of a symmetric `d x d` row-major matrix by cyclic
/// Jacobi rotations. Returns `(values, vectors)` with eigenvector `k` stored
/// in column `k` of `vectors`, in the order the diagonal ends up in.
pub fn jacobi_eigen(matrix: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != d * d {
        return Err(invalid(
            "matrix",
            format!("expected {} entries, got {}", d * d, matrix.len()),
        ));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    Ok((values, v))
}

/// Fitted principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues of the sample covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Retained unit axes, one row each.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>], out_dims: usize) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("points", "need at least 2 points"));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(invalid("points", "ragged input"));
        }
        if out_dims > d {
            return Err(invalid("out_dims", format!("{out_dims} > dimension {d}")));
        }
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for p in points {
            for i in 0..d {
                let di = p[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n - 1.0;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let (values, vectors) = jacobi_eigen(&cov, d)?;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&x, &y| values[y].total_cmp(&values[x]));
        let components = order[..out_dims]
            .iter()
            .map(|&k| {
                let mut axis: Vec<f64> = (0..d).map(|i| vectors[i * d + k]).collect();
                let mut lead = 0;
                for i in 1..d {
                    if axis[i].abs() > axis[lead].abs() {
                        lead = i;
                    }
                }
                if axis[lead] < 0.0 {
                    axis.iter_mut().for_each(|x| *x = -*x);
                }
                axis
            })
            .collect();
        Ok(Self {
            mean,
            eigenvalues: order.iter().map(|&k| values[k]).collect(),
            components,
        })
    }

    pub fn transform(&self, point: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|axis| {
                axis.iter()
                    .zip(point)
                    .zip(&self.mean)
                    .map(|((a, x), m)| a * (x - m))
                    .sum()
            })
            .collect()
    }
}

/// Centers `points` and projects them onto the top `out_dims` principal axes.
pub fn pca_project(points: &[Vec<f64>], out_dims: usize) -> Result<Vec<Vec<f64>>> {
    let pca = Pca::fit(points, out_dims)?;
    Ok(points.iter().map(|p| pca.transform(p)).collect())
}

/// Fills `pca_xy` on every profile. Needs at least 2 profiles and 2
/// categories.
pub fn project_profiles(profiles: &mut [SemanticProfile]) -> Result<()> {
    let points: Vec<Vec<f64>> = profiles.iter().map(|p| p.distribution.clone()).collect();
    let coords = pca_project(&points, 2)?;
    for (p, xy) in profiles.iter_mut().zip(coords) {
        p.pca_xy = [xy[0], xy[1]];
    }
    Ok(())
}

/// `%.{digits}g`-style formatting.
pub fn format_significant(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes `# key = value` header lines for an effective configuration.
pub fn config_header(config: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in config {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

pub fn profiles_to_csv(
    profiles: &[SemanticProfile],
    num_categories: usize,
    config: &BTreeMap<String, String>,
) -> String {
    let mut out = config_header(config);
    out.push_str("kind,raw_id,feature");
    for k in 1..=num_categories {
        let _ = write!(out, ",c{k}");
    }
    out.push_str(",pca_x,pca_y\n");
    for p in profiles {
        let _ = write!(out, "{},{},{}", p.kind, p.raw_id, p.feature);
        for &x in &p.distribution {
            let _ = write!(out, ",{}", format_significant(x, 9));
        }
        let _ = writeln!(
            out,
            ",{},{}",
            format_significant(p.pca_xy[0], 9),
            format_significant(p.pca_xy[1], 9)
        );
    }
    out
}

pub fn write_profiles_csv(
    path: impl AsRef<Path>,
    profiles: &[SemanticProfile],
    num_categories: usize,
    config: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, profiles_to_csv(profiles, num_categories, config)).map_err(|source| SarError::Io {
        path: path.to_path_buf(),
        source,
    })
}
