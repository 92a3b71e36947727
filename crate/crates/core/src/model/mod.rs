//! Random-intercept binomial logistic models fitted by MCMC.
//!
//! `logit(p_j) = beta0 + sum_k alpha[k][level(j, k)]` with
//! `alpha[k][l] ~ normal(0, sigma[k])`, `sigma[k] ~ half-t(3, 0, 2.5)` and
//! `beta0 ~ t(3, 0, 2.5)`. Only cells with `n_j > 0` enter the likelihood;
//! predictions are produced for every table cell.

pub mod diagnostics;
mod sampler;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::poststrat::PostStratTable;
use crate::seed;
use crate::simulation::inv_logit;
use diagnostics::{FitDiagnostics, ParamDiagnostic};
use sampler::{ChainState, Design, Steps, Tallies};

/// Location-scale Student t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentT {
    pub df: f64,
    pub loc: f64,
    pub scale: f64,
}

impl StudentT {
    pub const fn new(df: f64, loc: f64, scale: f64) -> Self {
        Self { df, loc, scale }
    }

    /// Log density up to an additive constant.
    #[inline]
    pub fn ln_kernel(&self, x: f64) -> f64 {
        let u = (x - self.loc) / self.scale;
        -0.5 * (self.df + 1.0) * (u * u / self.df).ln_1p()
    }

    pub fn sd(&self) -> Option<f64> {
        (self.df > 2.0).then(|| self.scale * (self.df / (self.df - 2.0)).sqrt())
    }
}

pub const DEFAULT_PRIOR: StudentT = StudentT::new(3.0, 0.0, 2.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    /// 0-based covariate indices with a varying intercept; empty means
    /// intercept only.
    pub covariates: Vec<usize>,
    pub intercept_prior: StudentT,
    /// Half-t prior on each group-level sd.
    pub sd_prior: StudentT,
}

impl ModelSpec {
    pub fn new(label: impl Into<String>, covariates: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            covariates,
            intercept_prior: DEFAULT_PRIOR,
            sd_prior: DEFAULT_PRIOR,
        }
    }

    /// Models of the simulation study, by label.
    pub fn named(label: &str) -> Result<Self> {
        let cov = match label {
            "full" => vec![0, 1, 2, 3],
            "precision" => vec![0, 1, 2],
            "bias" => vec![0, 2, 3],
            "nuisance" => vec![0, 2],
            "x1_only" => vec![0],
            "x3_only" => vec![2],
            "intercept" => vec![],
            other => return Err(Error::UnknownModel(other.to_string())),
        };
        Ok(Self::new(label, cov))
    }

    pub fn validate(&self, table: &PostStratTable) -> Result<()> {
        if let Some(&v) = self.covariates.iter().find(|&&v| v >= table.num_covariates) {
            return Err(Error::InvalidConfig(format!("covariate {v} not in table")));
        }
        if !(self.intercept_prior.scale > 0.0 && self.sd_prior.scale > 0.0) {
            return Err(Error::InvalidConfig("prior scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Post-warmup iterations per chain.
    pub draws: usize,
    /// Keep every `thin`-th post-warmup iteration.
    pub thin: usize,
    /// Warmup length for warm-started refits.
    pub refit_warmup: usize,
    pub target_accept: f64,
    pub rhat_threshold: f64,
    /// Compute bulk/tail ESS (costlier than R-hat).
    pub compute_ess: bool,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            thin: 4,
            refit_warmup: 250,
            target_accept: 0.44,
            rhat_threshold: 1.05,
            compute_ess: true,
            seed: 0,
        }
    }
}

impl McmcConfig {
    /// Settings giving 500 retained draws.
    pub fn desk() -> Self {
        Self { warmup: 1000, draws: 1000, thin: 8, refit_warmup: 250, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn kept_per_chain(&self) -> usize {
        self.draws / self.thin
    }

    pub fn total_draws(&self) -> usize {
        self.chains * self.kept_per_chain()
    }

    fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 || self.total_draws() < 2 {
            return Err(Error::InvalidConfig("need at least 2 retained draws".into()));
        }
        Ok(())
    }
}

/// Final per-chain sampler states and step sizes, reused to warm-start refits.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    states: Vec<ChainState>,
    steps: Vec<Steps>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawOrigin {
    pub chain: u32,
    pub iteration: u32,
}

/// `B x J` posterior draws of cell probabilities, row-major by draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CellProbDraws {
    pub label: String,
    num_draws: usize,
    num_cells: usize,
    probs: Vec<f64>,
    pub provenance: Vec<DrawOrigin>,
    pub diagnostics: Option<FitDiagnostics>,
    pub warm_start: Option<WarmStart>,
}

const P_FLOOR: f64 = 1e-300;
const P_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

impl CellProbDraws {
    /// Wrap a row-major matrix; every entry must lie in (0, 1).
    pub fn from_rows(label: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_draws = rows.len();
        let num_cells = rows.first().map_or(0, |r| r.len());
        if num_draws < 1 {
            return Err(Error::InvalidConfig("draw matrix needs at least one row".into()));
        }
        let mut probs = Vec::with_capacity(num_draws * num_cells);
        for r in rows {
            if r.len() != num_cells {
                return Err(Error::LengthMismatch { expected: num_cells, got: r.len() });
            }
            probs.extend(r);
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidConfig(format!("probability {p} outside (0, 1)")));
        }
        Ok(Self {
            label: label.into(),
            num_draws,
            num_cells,
            probs,
            provenance: (0..num_draws)
                .map(|b| DrawOrigin { chain: 0, iteration: b as u32 })
                .collect(),
            diagnostics: None,
            warm_start: None,
        })
    }

    pub fn num_draws(&self) -> usize {
        self.num_draws
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    #[inline]
    pub fn get(&self, b: usize, j: usize) -> f64 {
        self.probs[b * self.num_cells + j]
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.probs[b * self.num_cells..(b + 1) * self.num_cells]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.num_draws).map(|b| self.get(b, j)).collect()
    }

    pub fn cell_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_cells];
        for b in 0..self.num_draws {
            for (acc, p) in m.iter_mut().zip(self.row(b)) {
                *acc += p;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.num_draws as f64);
        m
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.as_ref().map_or(true, |d| d.converged)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.diagnostics.as_ref().map(|d| d.max_rhat)
    }

    /// CSV with one row per draw and one column per cell id.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record((0..self.num_cells).map(|j| j.to_string()))?;
        for b in 0..self.num_draws {
            wtr.write_record(self.row(b).iter().map(|p| format!("{p:.17e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(label: impl Into<String>, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::from_rows(label, rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(label: impl Into<String>, path: &Path) -> Result<Self> {
        Self::read_csv(label, std::fs::File::open(path)?)
    }
}

/// Fit `spec` to the sample counts in `table`.
///
/// Non-convergence (max split R-hat above the threshold) is reported through
/// `diagnostics.converged`, not as an error.
pub fn fit(spec: &ModelSpec, table: &PostStratTable, mcmc: &McmcConfig) -> Result<CellProbDraws> {
    fit_with(spec, table, mcmc, None, None)
}

/// Fit with one cell's sample data removed, warm-started from an earlier fit.
pub fn fit_without_cell(
    spec: &ModelSpec,
    table: &PostStratTable,
    mcmc: &McmcConfig,
    exclude: usize,
    warm: Option<&WarmStart>,
) -> Result<CellProbDraws> {
    fit_with(spec, table, mcmc, Some(exclude), warm)
}

struct ChainOutput {
    state: ChainState,
    steps: Steps,
    tallies: Tallies,
    kept: Vec<(usize, Vec<f64>)>,
    trace: Vec<Vec<f64>>,
}

fn param_names(spec: &ModelSpec, levels: usize) -> Vec<String> {
    let mut names = vec!["b0".to_string()];
    for &v in &spec.covariates {
        names.push(format!("sigma[x{}]", v + 1));
    }
    for &v in &spec.covariates {
        for l in 0..levels {
            names.push(format!("alpha[x{},{}]", v + 1, l));
        }
    }
    names
}

fn param_vector(state: &ChainState) -> Vec<f64> {
    let mut out = vec![state.beta0];
    out.extend(state.log_sigma.iter().map(|s| s.exp()));
    for a in state.alphas() {
        out.extend(a);
    }
    out
}

fn fit_with(
    spec: &ModelSpec,
    table: &PostStratTable,
    mcmc: &McmcConfig,
    exclude: Option<usize>,
    warm: Option<&WarmStart>,
) -> Result<CellProbDraws> {
    spec.validate(table)?;
    mcmc.validate()?;
    let design = Design::new(spec, table, exclude);
    let k = spec.covariates.len();
    let levels = table.levels_per_covariate;
    let cell_levels: Vec<Vec<usize>> = table
        .cells
        .iter()
        .map(|c| spec.covariates.iter().map(|&v| c.levels[v]).collect())
        .collect();
    let warmup = if warm.is_some() { mcmc.refit_warmup } else { mcmc.warmup };
    let stream = exclude.map_or(u64::MAX, |e| e as u64);

    let outputs: Vec<ChainOutput> = (0..mcmc.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::substream(mcmc.seed, &[stream.into(), (c as u64).into()]);
            let (init, steps) = match warm {
                Some(w) => (w.states[c % w.states.len()].clone(), w.steps[c % w.steps.len()].clone()),
                None => (
                    sampler::Chain::initial_state(&design, spec, &mut rng),
                    Steps::initial(k, levels),
                ),
            };
            let mut kept = Vec::with_capacity(mcmc.kept_per_chain());
            let mut trace = Vec::with_capacity(mcmc.draws);
            let (state, steps, tallies) =
                sampler::run_chain(&design, spec, mcmc, warmup, init, steps, &mut rng, |it, st| {
                    trace.push(param_vector(st));
                    if it % mcmc.thin == mcmc.thin - 1 {
                        let alpha = st.alphas();
                        let row = cell_levels
                            .iter()
                            .map(|lv| {
                                let eta = lv
                                    .iter()
                                    .enumerate()
                                    .fold(st.beta0, |e, (k, &l)| e + alpha[k][l]);
                                inv_logit(eta).clamp(P_FLOOR, P_CEIL)
                            })
                            .collect();
                        kept.push((it, row));
                    }
                });
            ChainOutput { state, steps, tallies, kept, trace }
        })
        .collect();

    let num_cells = table.len();
    let mut probs = Vec::with_capacity(mcmc.total_draws() * num_cells);
    let mut provenance = Vec::with_capacity(mcmc.total_draws());
    for (c, out) in outputs.iter().enumerate() {
        for (it, row) in &out.kept {
            probs.extend_from_slice(row);
            provenance.push(DrawOrigin { chain: c as u32, iteration: *it as u32 });
        }
    }

    let names = param_names(spec, levels);
    let mut params = Vec::with_capacity(names.len());
    for (p, name) in names.into_iter().enumerate() {
        let chains: Vec<Vec<f64>> =
            outputs.iter().map(|o| o.trace.iter().map(|v| v[p]).collect()).collect();
        let (ess_bulk, ess_tail) = if mcmc.compute_ess {
            (Some(diagnostics::ess(&chains)), Some(diagnostics::ess_tail(&chains)))
        } else {
            (None, None)
        };
        params.push(ParamDiagnostic { name, rhat: diagnostics::split_rhat(&chains), ess_bulk, ess_tail });
    }
    let max_rhat = params.iter().map(|p| p.rhat).filter(|r| !r.is_nan()).fold(1.0, f64::max);
    let min_ess_bulk = params.iter().filter_map(|p| p.ess_bulk).reduce(f64::min);
    let block_names = ["b0", "z", "sigma_noncentered", "sigma_centered", "ridge"];
    let acceptance = block_names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut t = sampler::Tally::default();
            for o in &outputs {
                t.proposed += o.tallies[i].proposed;
                t.accepted += o.tallies[i].accepted;
            }
            (n.to_string(), t.rate())
        })
        .collect();

    let diag = FitDiagnostics {
        chains: mcmc.chains,
        warmup,
        draws_per_chain: mcmc.draws,
        params,
        max_rhat,
        min_ess_bulk,
        acceptance,
        rhat_threshold: mcmc.rhat_threshold,
        converged: max_rhat <= mcmc.rhat_threshold,
    };
    let warm_start = WarmStart {
        states: outputs.iter().map(|o| o.state.clone()).collect(),
        steps: outputs.iter().map(|o| o.steps.clone()).collect(),
    };
    Ok(CellProbDraws {
        label: spec.label.clone(),
        num_draws: provenance.len(),
        num_cells,
        probs,
        provenance,
        diagnostics: Some(diag),
        warm_start: Some(warm_start),
    })
}

/// Per-draw binomial log pmf of `(n, y)` given the cell's draws `probs`.
pub fn log_lik_cell(probs: &[f64], n: u32, y: u32) -> Vec<f64> {
    let c = ln_binomial(n as u64, y as u64);
    let (y, f) = (y as f64, (n - y) as f64);
    probs
        .iter()
        .map(|&p| {
            let a = if y > 0.0 { y * p.ln() } else { 0.0 };
            let b = if f > 0.0 { f * (-p).ln_1p() } else { 0.0 };
            c + a + b
        })
        .collect()
}
