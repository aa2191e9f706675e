//! Linear-chain CRF over sleep stages: path score, log-partition by the
//! forward algorithm, marginals, and Viterbi decoding.
//!
//! Emissions `y` are row-major `[n, s]`; transitions `a` are `[s, s]` with
//! `a[i * s + j]` the score of moving from stage `i` to stage `j`. There are
//! no start or end transition scores.

use crate::autodiff::log_sum_exp;

/// `g(path) = Σ a[path[n], path[n+1]] + Σ y[n, path[n]]`.
pub fn path_score(y: &[f64], a: &[f64], s: usize, path: &[usize]) -> f64 {
    let emit: f64 = path.iter().enumerate().map(|(n, &p)| y[n * s + p]).sum();
    let trans: f64 = path.windows(2).map(|w| a[w[0] * s + w[1]]).sum();
    emit + trans
}

/// Forward log-messages `alpha[n, j]`.
fn forward(y: &[f64], a: &[f64], s: usize) -> Vec<f64> {
    let n = y.len() / s;
    let mut alpha = vec![0.0; n * s];
    alpha[..s].copy_from_slice(&y[..s]);
    let mut buf = vec![0.0; s];
    for t in 1..n {
        for j in 0..s {
            for i in 0..s {
                buf[i] = alpha[(t - 1) * s + i] + a[i * s + j];
            }
            alpha[t * s + j] = log_sum_exp(&buf) + y[t * s + j];
        }
    }
    alpha
}

fn backward(y: &[f64], a: &[f64], s: usize) -> Vec<f64> {
    let n = y.len() / s;
    let mut beta = vec![0.0; n * s];
    let mut buf = vec![0.0; s];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..s {
            for j in 0..s {
                buf[j] = a[i * s + j] + y[(t + 1) * s + j] + beta[(t + 1) * s + j];
            }
            beta[t * s + i] = log_sum_exp(&buf);
        }
    }
    beta
}

/// `log Σ_paths exp g(path)`.
pub fn log_partition(y: &[f64], a: &[f64], s: usize) -> f64 {
    let n = y.len() / s;
    if n == 0 {
        return 0.0;
    }
    let alpha = forward(y, a, s);
    log_sum_exp(&alpha[(n - 1) * s..])
}

/// Log-partition, per-position state marginals `[n, s]`, and pairwise
/// marginals summed over positions `[s, s]`.
pub fn marginals(y: &[f64], a: &[f64], s: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let n = y.len() / s;
    let alpha = forward(y, a, s);
    let beta = backward(y, a, s);
    let log_z = log_sum_exp(&alpha[(n - 1) * s..]);
    let node: Vec<f64> = alpha
        .iter()
        .zip(&beta)
        .map(|(al, be)| (al + be - log_z).exp())
        .collect();
    let mut edge = vec![0.0; s * s];
    for t in 0..n.saturating_sub(1) {
        for i in 0..s {
            for j in 0..s {
                let lp = alpha[t * s + i] + a[i * s + j] + y[(t + 1) * s + j] + beta[(t + 1) * s + j]
                    - log_z;
                edge[i * s + j] += lp.exp();
            }
        }
    }
    (log_z, node, edge)
}

/// Highest-scoring path. Ties prefer the lower stage index, both for the
/// final state and for each back-pointer.
pub fn viterbi(y: &[f64], a: &[f64], s: usize) -> Vec<usize> {
    let n = y.len() / s;
    if n == 0 {
        return Vec::new();
    }
    let mut score = y[..s].to_vec();
    let mut back = vec![0usize; n * s];
    let mut next = vec![0.0; s];
    for t in 1..n {
        for j in 0..s {
            let mut best = 0;
            let mut best_v = score[0] + a[j];
            for i in 1..s {
                let v = score[i] + a[i * s + j];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            back[t * s + j] = best;
            next[j] = best_v + y[t * s + j];
        }
        score.copy_from_slice(&next);
    }
    let mut last = 0;
    for j in 1..s {
        if score[j] > score[last] {
            last = j;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * s + path[t]];
    }
    path
}
