//! Pareto-smoothed importance weights and stratified resampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Pareto k above which importance weights are considered unreliable.
pub const KHAT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub k: f64,
    pub sigma: f64,
}

/// Generalized Pareto fit to tail excesses sorted ascending.
///
/// Profile-likelihood posterior mean over a grid of `theta = -k / sigma`
/// candidates, followed by a weakly informative shrink of `k` toward 0.5.
pub fn gpd_fit_tail(x: &[f64]) -> Result<GpdFit> {
    let n = x.len();
    if n < 5 {
        return Err(Error::TailTooSmall(n));
    }
    let last = x[n - 1];
    if !(last > 0.0) || x[0] == last || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::TailTooSmall(n));
    }
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt() as usize;
    let quart = x[((n as f64 / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| {
            1.0 / last + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (prior * quart)
        })
        .collect();
    let nf = n as f64;
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = x.iter().map(|&v| (-t * v).ln_1p()).sum::<f64>() / nf;
            nf * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let top = profile.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::TailTooSmall(n));
    }
    let w: Vec<f64> =
        profile.iter().map(|&l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
    let wsum: f64 = w.iter().sum();
    let theta_hat = theta.iter().zip(&w).map(|(t, w)| t * w).sum::<f64>() / wsum;
    let k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta_hat;
    let k = (k * nf + 10.0 * 0.5) / (nf + 10.0);
    if !k.is_finite() || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::TailTooSmall(n));
    }
    Ok(GpdFit { k, sigma })
}

/// Generalized Pareto quantile with location 0.
pub fn gpd_quantile(p: f64, fit: GpdFit) -> f64 {
    if fit.k == 0.0 {
        -fit.sigma * (-p).ln_1p()
    } else {
        fit.sigma * (-fit.k * (-p).ln_1p()).exp_m1() / fit.k
    }
}

/// Smoothed importance weights for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    /// Weights scaled so that the largest raw ratio maps to 1.
    pub weights: Vec<f64>,
    /// Pareto k; infinite when the tail could not be fitted.
    pub khat: f64,
    pub tail_len: usize,
}

/// Tail length `ceil(min(0.2 B, 3 sqrt(B)))`.
pub fn tail_length(b: usize) -> usize {
    let b = b as f64;
    (0.2 * b).min(3.0 * b.sqrt()).ceil() as usize
}

/// Smooth log importance ratios: replace the largest `M` by expected
/// order statistics of a fitted generalized Pareto, then cap at the raw maximum.
pub fn psis_smooth(log_ratios: &[f64]) -> Smoothed {
    let b = log_ratios.len();
    let top = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - top).collect();
    let m = tail_length(b).min(b.saturating_sub(1));
    let mut khat = f64::INFINITY;
    if m >= 5 {
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| lw[i].total_cmp(&lw[j]));
        let tail = &order[b - m..];
        let cutoff = lw[order[b - m - 1]];
        let exp_cut = cutoff.exp();
        let excess: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        if let Ok(fit) = gpd_fit_tail(&excess) {
            khat = fit.k;
            if fit.k.is_finite() {
                for (r, &i) in tail.iter().enumerate() {
                    let p = (r as f64 + 0.5) / m as f64;
                    lw[i] = (gpd_quantile(p, fit) + exp_cut).ln();
                }
            }
        }
    }
    let weights = lw.into_iter().map(|v| v.min(0.0).exp()).collect();
    Smoothed { weights, khat, tail_len: m }
}

/// Stratified resampling: one uniform in each of `B` equal strata,
/// scanned against the cumulative normalized weights.
pub fn stratified_resample(weights: &[f64], seed: u64) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroWeights);
    }
    let b = weights.len();
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(b);
    let mut j = 0;
    let mut cum = weights[0] / total;
    for i in 0..b {
        let u = (i as f64 + rng.gen::<f64>()) / b as f64;
        while u > cum && j + 1 < b {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    Ok(out)
}
