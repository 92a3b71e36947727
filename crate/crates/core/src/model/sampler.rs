//! Adaptive Metropolis-within-Gibbs for the random-intercept binomial logit.
//!
//! State is non-centered: `alpha[k][l] = sigma[k] * z[k][l]`. One sweep does
//! random-walk updates of the intercept, every `z`, and every `log sigma`
//! (non-centered), then two likelihood-free moves per covariate: a centered
//! `log sigma` update with `alpha` held fixed, and a ridge move that shifts
//! the intercept against all of that covariate's effects. Cell data enter
//! only through design groups (cells pooled by their included-level tuple),
//! which leaves the posterior unchanged.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{McmcConfig, ModelSpec, StudentT};
use crate::poststrat::PostStratTable;

pub(crate) struct Design {
    pub num_levels: usize,
    /// Per group: level of each included covariate.
    pub group_levels: Vec<Vec<usize>>,
    pub n: Vec<f64>,
    pub y: Vec<f64>,
    /// `by_level[k][l]` lists groups whose included covariate `k` sits at level `l`.
    pub by_level: Vec<Vec<Vec<usize>>>,
}

impl Design {
    pub fn new(spec: &ModelSpec, table: &PostStratTable, exclude: Option<usize>) -> Self {
        let mut pooled: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for c in &table.cells {
            if c.n == 0 || Some(c.id) == exclude {
                continue;
            }
            let key: Vec<usize> = spec.covariates.iter().map(|&v| c.levels[v]).collect();
            let e = pooled.entry(key).or_insert((0.0, 0.0));
            e.0 += c.n as f64;
            e.1 += c.y as f64;
        }
        let k = spec.covariates.len();
        let num_levels = table.levels_per_covariate;
        let mut by_level = vec![vec![Vec::new(); num_levels]; k];
        let mut group_levels = Vec::with_capacity(pooled.len());
        let mut n = Vec::with_capacity(pooled.len());
        let mut y = Vec::with_capacity(pooled.len());
        for (g, (lv, (nn, yy))) in pooled.into_iter().enumerate() {
            for (kk, &l) in lv.iter().enumerate() {
                by_level[kk][l].push(g);
            }
            group_levels.push(lv);
            n.push(nn);
            y.push(yy);
        }
        Self { num_levels, group_levels, n, y, by_level }
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn pooled_rate(&self) -> Option<f64> {
        let n: f64 = self.n.iter().sum();
        (n > 0.0).then(|| self.y.iter().sum::<f64>() / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta0: f64,
    pub log_sigma: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl ChainState {
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.z
            .iter()
            .zip(&self.log_sigma)
            .map(|(zs, ls)| {
                let s = ls.exp();
                zs.iter().map(|z| s * z).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Steps {
    pub beta0: f64,
    pub z: Vec<Vec<f64>>,
    pub sigma_nc: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub ridge: Vec<f64>,
}

impl Steps {
    pub fn initial(k: usize, levels: usize) -> Self {
        Self {
            beta0: 0.2,
            z: vec![vec![0.5; levels]; k],
            sigma_nc: vec![0.3; k],
            sigma_c: vec![0.3; k],
            ridge: vec![0.3; k],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Tally {
    pub proposed: u64,
    pub accepted: u64,
}

impl Tally {
    fn add(&mut self, acc: bool) {
        self.proposed += 1;
        self.accepted += acc as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Post-warmup acceptance per block: b0, z, sigma (nc), sigma (c), ridge.
pub type Tallies = [Tally; 5];

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn group_ll(eta: f64, n: f64, y: f64) -> f64 {
    y * eta - n * softplus(eta)
}

/// log density of log(sigma) under a half-t prior on sigma.
#[inline]
fn log_sigma_prior(prior: &StudentT, log_sigma: f64) -> f64 {
    prior.ln_kernel(log_sigma.exp()) + log_sigma
}

pub(crate) struct Chain<'a> {
    design: &'a Design,
    spec: &'a ModelSpec,
    pub state: ChainState,
    pub steps: Steps,
    eta: Vec<f64>,
    ll: Vec<f64>,
    scratch: Vec<f64>,
    target: f64,
}

impl<'a> Chain<'a> {
    pub fn new(
        design: &'a Design,
        spec: &'a ModelSpec,
        state: ChainState,
        steps: Steps,
        target: f64,
    ) -> Self {
        let g = design.len();
        let mut c = Self {
            design,
            spec,
            state,
            steps,
            eta: vec![0.0; g],
            ll: vec![0.0; g],
            scratch: vec![0.0; g],
            target,
        };
        c.refresh();
        c
    }

    pub fn initial_state<R: Rng>(design: &Design, spec: &ModelSpec, rng: &mut R) -> ChainState {
        let k = spec.covariates.len();
        let base = design
            .pooled_rate()
            .map(|p| {
                let p = p.clamp(0.02, 0.98);
                (p / (1.0 - p)).ln()
            })
            .unwrap_or(0.0);
        ChainState {
            beta0: base + rng.gen_range(-0.5..0.5),
            log_sigma: (0..k).map(|_| rng.gen_range(0.3f64..1.5).ln()).collect(),
            z: (0..k)
                .map(|_| {
                    (0..design.num_levels)
                        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
        }
    }

    /// Recompute linear predictors and log-likelihood terms from the state.
    fn refresh(&mut self) {
        let sigma: Vec<f64> = self.state.log_sigma.iter().map(|s| s.exp()).collect();
        for g in 0..self.design.len() {
            let mut e = self.state.beta0;
            for (k, &l) in self.design.group_levels[g].iter().enumerate() {
                e += sigma[k] * self.state.z[k][l];
            }
            self.eta[g] = e;
            self.ll[g] = group_ll(e, self.design.n[g], self.design.y[g]);
        }
    }

    fn accept<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio
    }

    fn adapt(step: &mut f64, acc: bool, gamma: Option<f64>, target: f64) {
        if let Some(g) = gamma {
            *step *= (g * (acc as u8 as f64 - target)).exp();
            *step = step.clamp(1e-4, 50.0);
        }
    }

    /// One full sweep; `gamma` is the adaptation rate during warmup.
    pub fn sweep<R: Rng>(&mut self, rng: &mut R, gamma: Option<f64>, tallies: &mut Tallies) {
        self.refresh();
        let d = self.design;
        let k = self.spec.covariates.len();
        let tgt = self.target;

        // Intercept.
        {
            let delta = self.steps.beta0 * rng.sample::<f64, _>(StandardNormal);
            let prop = self.state.beta0 + delta;
            let mut dll = 0.0;
            for g in 0..d.len() {
                let v = group_ll(self.eta[g] + delta, d.n[g], d.y[g]);
                self.scratch[g] = v;
                dll += v - self.ll[g];
            }
            let prior = &self.spec.intercept_prior;
            let lr = dll + prior.ln_kernel(prop) - prior.ln_kernel(self.state.beta0);
            let acc = Self::accept(rng, lr);
            if acc {
                self.state.beta0 = prop;
                for g in 0..d.len() {
                    self.eta[g] += delta;
                    self.ll[g] = self.scratch[g];
                }
            }
            tallies[0].add(acc);
            Self::adapt(&mut self.steps.beta0, acc, gamma, tgt);
        }

        for kk in 0..k {
            let sigma = self.state.log_sigma[kk].exp();
            // Standardized effects, one level at a time.
            for l in 0..d.num_levels {
                let z = self.state.z[kk][l];
                let prop = z + self.steps.z[kk][l] * rng.sample::<f64, _>(StandardNormal);
                let de = sigma * (prop - z);
                let mut dll = 0.0;
                for &g in &d.by_level[kk][l] {
                    let v = group_ll(self.eta[g] + de, d.n[g], d.y[g]);
                    self.scratch[g] = v;
                    dll += v - self.ll[g];
                }
                let lr = dll - 0.5 * (prop * prop - z * z);
                let acc = Self::accept(rng, lr);
                if acc {
                    self.state.z[kk][l] = prop;
                    for &g in &d.by_level[kk][l] {
                        self.eta[g] += de;
                        self.ll[g] = self.scratch[g];
                    }
                }
                tallies[1].add(acc);
                Self::adapt(&mut self.steps.z[kk][l], acc, gamma, tgt);
            }

            // Non-centered scale: alpha moves with sigma.
            {
                let ls = self.state.log_sigma[kk];
                let prop = ls + self.steps.sigma_nc[kk] * rng.sample::<f64, _>(StandardNormal);
                let ds = prop.exp() - ls.exp();
                let mut dll = 0.0;
                for l in 0..d.num_levels {
                    let de = ds * self.state.z[kk][l];
                    for &g in &d.by_level[kk][l] {
                        let v = group_ll(self.eta[g] + de, d.n[g], d.y[g]);
                        self.scratch[g] = v;
                        dll += v - self.ll[g];
                    }
                }
                let prior = &self.spec.sd_prior;
                let lr = dll + log_sigma_prior(prior, prop) - log_sigma_prior(prior, ls);
                let acc = Self::accept(rng, lr);
                if acc {
                    self.state.log_sigma[kk] = prop;
                    for l in 0..d.num_levels {
                        let de = ds * self.state.z[kk][l];
                        for &g in &d.by_level[kk][l] {
                            self.eta[g] += de;
                            self.ll[g] = self.scratch[g];
                        }
                    }
                }
                tallies[2].add(acc);
                Self::adapt(&mut self.steps.sigma_nc[kk], acc, gamma, tgt);
            }

            // Centered scale: alpha fixed, z rescaled. Likelihood unchanged.
            {
                let ls = self.state.log_sigma[kk];
                let prop = ls + self.steps.sigma_c[kk] * rng.sample::<f64, _>(StandardNormal);
                let (s0, s1) = (ls.exp(), prop.exp());
                let ss: f64 = self.state.z[kk].iter().map(|z| (z * s0).powi(2)).sum();
                let levels = d.num_levels as f64;
                let lr = -0.5 * ss * (1.0 / (s1 * s1) - 1.0 / (s0 * s0)) - levels * (prop - ls)
                    + log_sigma_prior(&self.spec.sd_prior, prop)
                    - log_sigma_prior(&self.spec.sd_prior, ls);
                let acc = Self::accept(rng, lr);
                if acc {
                    let r = s0 / s1;
                    for z in &mut self.state.z[kk] {
                        *z *= r;
                    }
                    self.state.log_sigma[kk] = prop;
                }
                tallies[3].add(acc);
                Self::adapt(&mut self.steps.sigma_c[kk], acc, gamma, tgt);
            }

            // Ridge: beta0 + delta, alpha - delta. Likelihood unchanged.
            {
                let sigma = self.state.log_sigma[kk].exp();
                let delta = self.steps.ridge[kk] * rng.sample::<f64, _>(StandardNormal);
                let dz = delta / sigma;
                let prior = &self.spec.intercept_prior;
                let b0 = self.state.beta0;
                let mut lr = prior.ln_kernel(b0 + delta) - prior.ln_kernel(b0);
                for &z in &self.state.z[kk] {
                    lr -= 0.5 * ((z - dz).powi(2) - z * z);
                }
                let acc = Self::accept(rng, lr);
                if acc {
                    self.state.beta0 += delta;
                    for z in &mut self.state.z[kk] {
                        *z -= dz;
                    }
                }
                tallies[4].add(acc);
                Self::adapt(&mut self.steps.ridge[kk], acc, gamma, tgt);
            }
        }
    }
}

/// Robbins-Monro rate for warmup iteration `t`.
pub(crate) fn adaptation_rate(t: usize) -> f64 {
    (1.0 + t as f64 / 10.0).powf(-0.6)
}

/// Run one chain, calling `record(iteration, state)` after every post-warmup sweep.
pub(crate) fn run_chain(
    design: &Design,
    spec: &ModelSpec,
    cfg: &McmcConfig,
    warmup: usize,
    init: ChainState,
    steps: Steps,
    rng: &mut ChaCha8Rng,
    mut record: impl FnMut(usize, &ChainState),
) -> (ChainState, Steps, Tallies) {
    let mut chain = Chain::new(design, spec, init, steps, cfg.target_accept);
    let mut warm_tallies = Tallies::default();
    for t in 0..warmup {
        chain.sweep(rng, Some(adaptation_rate(t)), &mut warm_tallies);
    }
    let mut tallies = Tallies::default();
    for it in 0..cfg.draws {
        chain.sweep(rng, None, &mut tallies);
        record(it, &chain.state);
    }
    (chain.state, chain.steps, tallies)
}
