//! Leave-one-cell-out (LOCO) cross-validation: brute-force refits and the
//! PSIS approximation, with SE and CRPS scores over cell sets.

mod psis;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

pub use psis::{
    gpd_fit_tail, gpd_quantile, psis_smooth, stratified_resample, tail_length, GpdFit, Smoothed,
    KHAT_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::model::{fit_without_cell, log_lik_cell, CellProbDraws, McmcConfig, ModelSpec};
use crate::poststrat::{CellSet, PostStratTable};
use crate::scoring::{crps_sample, energy, gather, CellTruths, Column, EnergyTerm, Permutation};
use crate::seed;

/// Stabilized raw importance ratios `1 / p(y_j | p_j^b)` for one cell, max 1.
pub fn raw_ratios(probs: &[f64], n: u32, y: u32) -> Vec<f64> {
    let lr = log_ratios(probs, n, y);
    let top = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lr.iter().map(|v| (v - top).exp()).collect()
}

/// Unstabilized log importance ratios `-log p(y_j | p_j^b)`.
pub fn log_ratios(probs: &[f64], n: u32, y: u32) -> Vec<f64> {
    log_lik_cell(probs, n, y).into_iter().map(|v| -v).collect()
}

/// PSIS output for one observed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPsis {
    pub weights: Vec<f64>,
    pub khat: f64,
    pub tail_len: usize,
    /// Largest unstabilized log ratio.
    pub max_log_ratio: f64,
    /// Draw indices from stratified resampling on `weights`.
    pub resample: Vec<usize>,
}

impl CellPsis {
    pub fn flagged(&self) -> bool {
        !(self.khat <= KHAT_THRESHOLD)
    }
}

/// Per-cell PSIS results, indexed by table cell id; `None` for unobserved cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PsisResult {
    pub cells: Vec<Option<CellPsis>>,
}

impl PsisResult {
    pub fn cell(&self, j: usize) -> Result<&CellPsis> {
        self.cells.get(j).and_then(Option::as_ref).ok_or_else(|| Error::UnobservedCell(vec![j]))
    }

    fn check_set(&self, set: &CellSet) -> Result<()> {
        let missing: Vec<usize> =
            set.members.iter().copied().filter(|&s| self.cells.get(s).map_or(true, Option::is_none)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::UnobservedCell(missing))
        }
    }

    /// Largest k-hat among the observed members of `set`.
    pub fn khat_max(&self, set: &CellSet) -> Option<f64> {
        set.members
            .iter()
            .filter_map(|&s| self.cells.get(s)?.as_ref())
            .map(|c| c.khat)
            .reduce(f64::max)
    }

    /// Number of observed members of `set` with k-hat above the threshold.
    pub fn flagged_count(&self, set: &CellSet) -> usize {
        set.members
            .iter()
            .filter_map(|&s| self.cells.get(s)?.as_ref())
            .filter(|c| c.flagged())
            .count()
    }

    /// Write `cell,khat,tail_len,max_raw_ratio,flagged` for each observed cell.
    pub fn write_diagnostics<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["cell", "khat", "tail_len", "max_raw_ratio", "flagged"])?;
        for (j, c) in self.cells.iter().enumerate() {
            if let Some(c) = c {
                wtr.write_record([
                    j.to_string(),
                    c.khat.to_string(),
                    c.tail_len.to_string(),
                    c.max_log_ratio.exp().to_string(),
                    c.flagged().to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// PSIS weights and resampled indices for every observed cell.
pub fn psis(draws: &CellProbDraws, table: &PostStratTable, seed: u64) -> Result<PsisResult> {
    if draws.num_cells() != table.len() {
        return Err(Error::LengthMismatch { expected: table.len(), got: draws.num_cells() });
    }
    let cells = table
        .cells
        .par_iter()
        .map(|c| {
            if !c.observed() {
                return Ok(None);
            }
            let lr = log_ratios(&draws.column(c.id), c.n, c.y);
            let max_log_ratio = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = psis_smooth(&lr);
            let resample = stratified_resample(
                &s.weights,
                seed::derive(seed, &["resample".into(), c.id.into()]),
            )?;
            Ok(Some(CellPsis {
                weights: s.weights,
                khat: s.khat,
                tail_len: s.tail_len,
                max_log_ratio,
                resample,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PsisResult { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocoSource {
    Brute,
    Psis,
}

/// Held-out predictive draws per cell, `None` where no LOCO prediction exists.
#[derive(Debug, Clone, PartialEq)]
pub struct LocoCellPredictions {
    pub source: LocoSource,
    pub cells: Vec<Option<Vec<f64>>>,
    /// Per-refit convergence, brute force only.
    pub converged: Vec<Option<bool>>,
}

impl LocoCellPredictions {
    /// Full-fit draws resampled with each cell's PSIS indices.
    pub fn from_psis(draws: &CellProbDraws, psis: &PsisResult) -> Self {
        let cells = psis
            .cells
            .iter()
            .enumerate()
            .map(|(j, c)| c.as_ref().map(|c| resampled_column(draws, j, &c.resample)))
            .collect();
        Self { source: LocoSource::Psis, cells, converged: vec![None; psis.cells.len()] }
    }

    pub fn cell(&self, j: usize) -> Result<&[f64]> {
        self.cells.get(j).and_then(|c| c.as_deref()).ok_or_else(|| Error::UnobservedCell(vec![j]))
    }

    fn check_set(&self, set: &CellSet) -> Result<()> {
        let missing: Vec<usize> =
            set.members.iter().copied().filter(|&s| self.cells.get(s).map_or(true, Option::is_none)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::UnobservedCell(missing))
        }
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|c| c.unwrap_or(true))
    }

    /// Number of refits whose R-hat exceeded the threshold.
    pub fn unconverged_count(&self) -> usize {
        self.converged.iter().filter(|c| **c == Some(false)).count()
    }
}

pub(crate) fn resampled_column(draws: &CellProbDraws, j: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&b| draws.get(b, j)).collect()
}

/// Refit without each observed cell and keep that cell's predictive draws.
///
/// Refits are warm-started from `full` when it carries a warm start, and skip ESS.
pub fn brute_force_loco(
    spec: &ModelSpec,
    table: &PostStratTable,
    mcmc: &McmcConfig,
    full: &CellProbDraws,
) -> Result<LocoCellPredictions> {
    let refit = McmcConfig { compute_ess: false, ..mcmc.clone() };
    let fits = table
        .cells
        .par_iter()
        .map(|c| {
            if !c.observed() {
                return Ok((None, None));
            }
            let d = fit_without_cell(spec, table, &refit, c.id, full.warm_start.as_ref())?;
            Ok((Some(d.column(c.id)), Some(d.converged())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (cells, converged) = fits.into_iter().unzip();
    Ok(LocoCellPredictions { source: LocoSource::Brute, cells, converged })
}

/// `((1/N) sum_s N_s sum_b w ε / sum_b w)^2`, `ε = p - truth`.
pub fn psis_loco_se(
    draws: &CellProbDraws,
    psis: &PsisResult,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<f64> {
    psis.check_set(set)?;
    let (w, t) = gather(table, set, truths)?;
    let e: f64 = set
        .members
        .iter()
        .zip(w.iter().zip(&t))
        .map(|(&s, (n, t))| n * (weighted_cell_mean(draws, psis, s) - t))
        .sum::<f64>()
        / w.iter().sum::<f64>();
    Ok(e * e)
}

/// `sum_s N_s (weighted mean error)^2 / N`.
pub fn mean_cell_psis_loco_se(
    draws: &CellProbDraws,
    psis: &PsisResult,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<f64> {
    psis.check_set(set)?;
    let (w, t) = gather(table, set, truths)?;
    Ok(set
        .members
        .iter()
        .zip(w.iter().zip(&t))
        .map(|(&s, (n, t))| n * (weighted_cell_mean(draws, psis, s) - t).powi(2))
        .sum::<f64>()
        / w.iter().sum::<f64>())
}

/// Importance-weighted posterior mean of cell `j`.
pub(crate) fn weighted_cell_mean(draws: &CellProbDraws, psis: &PsisResult, j: usize) -> f64 {
    let c = psis.cells[j].as_ref().expect("checked observed");
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, w) in c.weights.iter().enumerate() {
        num += w * draws.get(b, j);
        den += w;
    }
    num / den
}

/// CRPS of the held-out predictions over `set`, weighted cell sums within draw.
pub fn psis_loco_crps(
    draws: &CellProbDraws,
    psis: &PsisResult,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    psis.check_set(set)?;
    loco_crps(&LocoCellPredictions::from_psis(draws, psis), table, set, truths, perm)
}

/// N-weighted mean of per-cell CRPS on resampled draws.
pub fn mean_cell_psis_loco_crps(
    draws: &CellProbDraws,
    psis: &PsisResult,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    psis.check_set(set)?;
    let (w, t) = gather(table, set, truths)?;
    let mut acc = 0.0;
    for (&s, (n, t)) in set.members.iter().zip(w.iter().zip(&t)) {
        let x = resampled_column(draws, s, &psis.cells[s].as_ref().unwrap().resample);
        acc += n * crps_sample(&x, *t, perm)?;
    }
    Ok(acc / w.iter().sum::<f64>())
}

/// SE from held-out predictive means.
pub fn loco_se(
    preds: &LocoCellPredictions,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<f64> {
    preds.check_set(set)?;
    let (w, t) = gather(table, set, truths)?;
    let e: f64 = set
        .members
        .iter()
        .zip(w.iter().zip(&t))
        .map(|(&s, (n, t))| n * (crate::stats::mean(preds.cells[s].as_ref().unwrap()) - t))
        .sum::<f64>()
        / w.iter().sum::<f64>();
    Ok(e * e)
}

/// CRPS from held-out predictive draws.
pub fn loco_crps(
    preds: &LocoCellPredictions,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    preds.check_set(set)?;
    let (w, t) = gather(table, set, truths)?;
    let terms: Vec<EnergyTerm> = set
        .members
        .iter()
        .zip(w.into_iter().zip(t))
        .map(|(&s, (weight, t))| EnergyTerm {
            weight,
            x: preds.cells[s].clone().unwrap(),
            t: Column::Fixed(t),
        })
        .collect();
    energy(&terms, perm)
}

/// Arithmetic mean of one score per level `0..num_levels`.
pub fn level_average_score(scores: &BTreeMap<usize, f64>, num_levels: usize) -> Result<f64> {
    if num_levels == 0 {
        return Err(Error::EmptySet);
    }
    let mut acc = 0.0;
    for l in 0..num_levels {
        acc += scores.get(&l).ok_or(Error::MissingLevel(l))?;
    }
    Ok(acc / num_levels as f64)
}
