//! Split R-hat and effective sample size for multi-chain traces.

use serde::{Deserialize, Serialize};

use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub chains: usize,
    pub warmup: usize,
    pub draws_per_chain: usize,
    pub params: Vec<ParamDiagnostic>,
    pub max_rhat: f64,
    pub min_ess_bulk: Option<f64>,
    /// Post-warmup acceptance rate per update block.
    pub acceptance: Vec<(String, f64)>,
    pub rhat_threshold: f64,
    pub converged: bool,
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .filter(|c| !c.is_empty())
        .collect()
}

/// Returns (W, var_plus) over the given chains.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let within = stats::mean(&chains.iter().map(|c| stats::variance(c)).collect::<Vec<_>>());
    let between = if chains.len() > 1 { n * stats::variance(&means) } else { 0.0 };
    (within, (n - 1.0) / n * within + between / n)
}

/// Potential scale reduction on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let parts = split(chains);
    if parts.len() < 2 || parts[0].len() < 2 {
        return f64::NAN;
    }
    let (w, var_plus) = variance_components(&parts);
    if w == 0.0 {
        return if var_plus == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

fn autocov(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Effective sample size using Geyer's initial monotone sequence over split chains.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let parts = split(chains);
    if parts.len() < 2 || parts[0].len() < 4 {
        return f64::NAN;
    }
    let m = parts.len();
    let n = parts[0].len();
    let (_, var_plus) = variance_components(&parts);
    if var_plus == 0.0 {
        return (m * n) as f64;
    }
    let means: Vec<f64> = parts.iter().map(|c| stats::mean(c)).collect();
    // within-chain variance with 1/n normalization, as used for rho_0 = 1.
    let w_n = stats::mean(
        &parts.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect::<Vec<_>>(),
    );
    let rho = |t: usize| {
        let ac = stats::mean(
            &parts.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, t)).collect::<Vec<_>>(),
        );
        1.0 - (w_n - ac) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = tau.max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

/// ESS of the 5% and 95% quantile indicators; the smaller is reported.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let q05 = stats::quantile(&all, 0.05);
    let q95 = stats::quantile(&all, 0.95);
    let ind = |q: f64| -> Vec<Vec<f64>> {
        chains.iter().map(|c| c.iter().map(|&v| (v <= q) as u8 as f64).collect()).collect()
    };
    ess(&ind(q05)).min(ess(&ind(q95)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn iid_chains_look_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = split_rhat(&chains);
        assert!(r < 1.01, "{r}");
        let e = ess(&chains);
        assert!(e > 3000.0 && e < 5000.0, "{e}");
        assert!(ess_tail(&chains) > 1500.0);
    }

    #[test]
    fn shifted_chain_flags_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..500).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        for v in &mut chains[0] {
            *v += 3.0;
        }
        assert!(split_rhat(&chains) > 1.1);
    }

    #[test]
    fn autocorrelated_chain_has_lower_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        // AR(1) with phi = 0.9 has ESS ratio (1 - phi) / (1 + phi) ~ 0.053.
        let e = ess(&chains);
        assert!(e > 100.0 && e < 400.0, "{e}");
    }
}
