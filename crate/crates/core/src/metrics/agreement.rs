//! Rater-agreement statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pairs(op: &'static str, x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(op, format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::invalid(format!("{op} needs at least {min} pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op.into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
pub fn icc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs("icc", x, y, 2)?;
    let n = x.len() as f64;
    let k = 2.0;
    let grand = (x.iter().sum::<f64>() + y.iter().sum::<f64>()) / (n * k);
    let sst: f64 = x.iter().chain(y).map(|v| (v - grand).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::invalid("icc: ratings have zero total variance"));
    }
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| k * ((a + b) / k - grand).powi(2))
        .sum();
    let ssc = n * ((mean(x) - grand).powi(2) + (mean(y) - grand).powi(2));
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1.0);
    let msc = ssc / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    Ok((msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n))
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pairs("pearson", x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Least-squares fit `y = slope·x + intercept`; `None` for constant `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<Option<(f64, f64)>> {
    check_pairs("linear_fit", x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Ok(None);
    }
    let slope = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    Ok(Some((slope, my - slope * mx)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Differences `x − y`, mean ± 1.96 sample SD.
pub fn bland_altman(x: &[f64], y: &[f64]) -> Result<BlandAltman> {
    check_pairs("bland_altman", x, y, 2)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    Ok(BlandAltman {
        mean_diff: m,
        sd,
        loa_low: m - 1.96 * sd,
        loa_high: m + 1.96 * sd,
    })
}

/// Square confusion matrix, rows = truth, columns = prediction.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", format!("{} vs {} labels", pred.len(), truth.len())));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("label out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Cohen's kappa from a confusion matrix; `None` when chance agreement is 1.
pub fn kappa_from_confusion(m: &[Vec<usize>]) -> Option<f64> {
    let n: usize = m.iter().flatten().sum();
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let po = (0..m.len()).map(|i| m[i][i]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..m.len())
        .map(|i| {
            let row: usize = m[i].iter().sum();
            let col: usize = m.iter().map(|r| r[i]).sum();
            row as f64 * col as f64 / (n * n)
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return None;
    }
    Some((po - pe) / (1.0 - pe))
}

pub fn cohens_kappa(pred: &[usize], truth: &[usize]) -> Result<Option<f64>> {
    let classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    Ok(kappa_from_confusion(&confusion(pred, truth, classes)?))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", format!("{} vs {} labels", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}
