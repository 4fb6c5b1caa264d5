//! Distribution metrics for translated images (IS, FID, KID) over a
//! pluggable feature extractor, and confusion scoring of change maps.

mod extractor;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use extractor::{extractor_by_name, FeatureExtractor, Features, PretrainedInception, TinyCnn};

use crate::changedetect::ChangeMap;
use crate::error::{Error, Result};

/// Diagonal regularization applied to both covariances before the matrix
/// square root.
pub const FID_EPS: f64 = 1e-6;

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid(format!("{what}: empty set")))?;
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::shape(format!("{what}: vectors of length {d} and {}", r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite value")));
    }
    Ok(d)
}

fn kl_to_marginal(probs: &[Vec<f64>]) -> f64 {
    let k = probs[0].len();
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pj, _)| pj > 0.0)
                .map(|(&pj, &mj)| pj * (pj / mj).ln())
                .sum::<f64>()
        })
        .sum();
    (kl / n).exp()
}

/// `exp(E_x KL(p(y|x) || p(y)))`. With `splits > 1` the set is cut into
/// that many contiguous parts and the per-part scores are averaged.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    let k = check_rows(probs, "inception score")?;
    if probs.len() < 2 {
        return Err(Error::invalid("inception score needs at least two images"));
    }
    if k == 0 {
        return Err(Error::shape("inception score: zero classes"));
    }
    for p in probs {
        let s: f64 = p.iter().sum();
        if p.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "class probabilities must be non-negative and sum to 1 (sum {s})"
            )));
        }
    }
    let splits = splits.max(1);
    if splits > probs.len() / 2 && splits > 1 {
        return Err(Error::invalid(format!(
            "{splits} splits of {} images leave fewer than two per split",
            probs.len()
        )));
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| kl_to_marginal(&probs[s * n / splits..(s + 1) * n / splits]))
        .collect();
    Ok(scores.iter().sum::<f64>() / splits as f64)
}

/// Mean and unbiased covariance of a feature set.
pub fn feature_stats(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = check_rows(rows, "feature statistics")?;
    if rows.len() < 2 {
        return Err(Error::invalid("covariance needs at least two samples"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians `N(mu_a, cov_a)` and `N(mu_b, cov_b)`.
pub fn fid_from_stats(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::shape(format!(
            "FID statistics of dimension {d} and {}",
            mu_b.len()
        )));
    }
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let a = cov_a + &eye;
    let b = cov_b + &eye;
    // Tr sqrt(A B) = Tr sqrt(A^1/2 B A^1/2), which is symmetric PSD.
    let ra = psd_sqrt(&a);
    let inner = &ra * &b * &ra;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + a.trace() + b.trace() - 2.0 * cross)
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = feature_stats(a)?;
    let (mu_b, cov_b) = feature_stats(b)?;
    fid_from_stats(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn kid_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with [`kid_kernel`]. Can be slightly negative.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let da = check_rows(a, "KID")?;
    let db = check_rows(b, "KID")?;
    if da != db {
        return Err(Error::shape(format!("KID features of dimension {da} and {db}")));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("KID needs at least two samples per set"));
    }
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += kid_kernel(&s[i], &s[j]);
            }
        }
        2.0 * sum / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += kid_kernel(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64)
}

/// False alarms, missed alarms, overall errors and percentage correct.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub fa: u64,
    pub ma: u64,
    pub oe: u64,
    pub pcc: f64,
    pub n: u64,
}

impl ConfusionSummary {
    pub fn from_counts(fa: u64, ma: u64, n: u64) -> Result<Self> {
        if n == 0 || fa + ma > n {
            return Err(Error::invalid(format!("{fa} + {ma} errors out of {n} pixels")));
        }
        let oe = fa + ma;
        Ok(ConfusionSummary {
            fa,
            ma,
            oe,
            pcc: 100.0 * (n - oe) as f64 / n as f64,
            n,
        })
    }
}

pub fn score_change_map(predicted: &ChangeMap, truth: &ChangeMap) -> Result<ConfusionSummary> {
    predicted.check_same_dims(truth)?;
    let (mut fa, mut ma) = (0, 0);
    for (&p, &t) in predicted.data().iter().zip(truth.data()) {
        match (p != 0, t != 0) {
            (true, false) => fa += 1,
            (false, true) => ma += 1,
            _ => {}
        }
    }
    ConfusionSummary::from_counts(fa, ma, predicted.data().len() as u64)
}
