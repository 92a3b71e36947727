//! Synthetic finite populations and constrained samples.
//!
//! Covariates are iid `normal(0, covariate_sd)`; the outcome probability and
//! the inclusion probability are both inverse-logit linear in the raw
//! covariates. Covariates are then cut into equal-width bins computed over
//! the population, and those bin indices define poststratification cells.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// How the sample is forced to cover the table before the pi-weighted phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingConstraint {
    /// One individual from every nonempty population cell.
    AllCellsObserved,
    /// One individual carrying every level of every covariate.
    AllLevelsObserved,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub population_size: usize,
    pub sample_size: usize,
    pub num_covariates: usize,
    pub covariate_sd: f64,
    pub levels_per_covariate: usize,
    pub outcome_coefs: Vec<f64>,
    pub inclusion_coefs: Vec<f64>,
    pub sampling_constraint: SamplingConstraint,
    pub seed: u64,
}

impl SimConfig {
    /// The four-covariate design: X2 is a precision variable, X4 a bias variable.
    pub fn paper_design(population_size: usize, sample_size: usize, seed: u64) -> Self {
        Self {
            population_size,
            sample_size,
            num_covariates: 4,
            covariate_sd: 2.0,
            levels_per_covariate: 5,
            outcome_coefs: vec![0.1, 1.0, 0.1, 1.0],
            inclusion_coefs: vec![0.1, 0.1, 1.0, 1.0],
            sampling_constraint: SamplingConstraint::AllCellsObserved,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.population_size == 0 || self.sample_size == 0 || self.num_covariates == 0 {
            return bad("sizes must be positive");
        }
        if self.sample_size > self.population_size {
            return bad("sample_size exceeds population_size");
        }
        if !(self.covariate_sd > 0.0) {
            return bad("covariate_sd must be positive");
        }
        if self.levels_per_covariate < 2 {
            return bad("levels_per_covariate must be at least 2");
        }
        if self.outcome_coefs.len() != self.num_covariates
            || self.inclusion_coefs.len() != self.num_covariates
        {
            return bad("coefficient vectors must have num_covariates entries");
        }
        Ok(())
    }
}

/// Finite population stored column-wise; `x[i]` and `levels[i]` have `k` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x: Vec<Vec<f64>>,
    pub levels: Vec<Vec<usize>>,
    pub outcome_prob: Vec<f64>,
    pub y: Vec<u8>,
    pub inclusion_prob: Vec<f64>,
    /// `bin_edges[k]` has `levels_per_covariate + 1` entries.
    pub bin_edges: Vec<Vec<f64>>,
    pub levels_per_covariate: usize,
}

impl Population {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_covariates(&self) -> usize {
        self.bin_edges.len()
    }

    pub fn mean_outcome(&self) -> f64 {
        self.y.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    /// Individuals grouped by their full level tuple, in lexicographic order.
    pub fn cells(&self) -> BTreeMap<Vec<usize>, Vec<usize>> {
        let mut out: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, lv) in self.levels.iter().enumerate() {
            out.entry(lv.clone()).or_default().push(i);
        }
        out
    }

    /// Write the population as CSV; `sampled` marks sample members when given.
    pub fn write_csv<W: Write>(&self, w: W, sampled: Option<&SampleCounts>) -> Result<()> {
        let k = self.num_covariates();
        let flags: Vec<bool> = match sampled {
            Some(s) => {
                let mut f = vec![false; self.len()];
                for &i in &s.members {
                    f[i] = true;
                }
                f
            }
            None => vec![false; self.len()],
        };
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend((1..=k).map(|j| format!("x{j}")));
        header.extend((1..=k).map(|j| format!("level{j}")));
        header.extend(["p_outcome", "y", "pi", "sampled"].map(String::from));
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.x[i].iter().map(|v| format!("{v:.17e}")));
            rec.extend(self.levels[i].iter().map(|v| v.to_string()));
            rec.push(format!("{:.17e}", self.outcome_prob[i]));
            rec.push(self.y[i].to_string());
            rec.push(format!("{:.17e}", self.inclusion_prob[i]));
            rec.push((flags[i] as u8).to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, sampled: Option<&SampleCounts>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), sampled)
    }
}

/// Sample membership plus per-cell counts keyed by level tuple.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleCounts {
    /// Indices into the population, in draw order.
    pub members: Vec<usize>,
    /// level tuple -> (n_j, y_j)
    pub counts: BTreeMap<Vec<usize>, (u32, u32)>,
}

impl SampleCounts {
    pub fn from_members(pop: &Population, members: Vec<usize>) -> Self {
        let mut counts: BTreeMap<Vec<usize>, (u32, u32)> = BTreeMap::new();
        for &i in &members {
            let e = counts.entry(pop.levels[i].clone()).or_insert((0, 0));
            e.0 += 1;
            e.1 += pop.y[i] as u32;
        }
        Self { members, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().map(|c| c.0 as usize).sum()
    }

    pub fn total_positive(&self) -> usize {
        self.counts.values().map(|c| c.1 as usize).sum()
    }
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Equal-width binning of `values` into `levels` bins over `[min, max]`.
///
/// A value lying exactly on an interior edge goes to the lower bin; the
/// global minimum lands in bin 0 and the global maximum in the top bin.
pub fn discretize(values: &[f64], levels: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if levels < 2 {
        return Err(Error::InvalidConfig("levels must be at least 2".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::DegenerateCovariate);
    }
    let width = (hi - lo) / levels as f64;
    let mut edges: Vec<f64> = (0..=levels).map(|i| lo + i as f64 * width).collect();
    edges[levels] = hi;
    let interior = &edges[1..levels];
    let idx = values
        .iter()
        .map(|&v| interior.partition_point(|&e| e < v))
        .collect();
    Ok((idx, edges))
}

pub fn generate_population(config: &SimConfig) -> Result<Population> {
    config.validate()?;
    let n = config.population_size;
    let k = config.num_covariates;
    let mut rng = seed::substream(config.seed, &["population".into()]);
    let normal = Normal::new(0.0, config.covariate_sd)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let dot = |c: &[f64], row: &[f64]| c.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
    let outcome_prob: Vec<f64> = x.iter().map(|r| inv_logit(dot(&config.outcome_coefs, r))).collect();
    let inclusion_prob: Vec<f64> = x
        .iter()
        .map(|r| inv_logit(dot(&config.inclusion_coefs, r)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
        .collect();
    let y: Vec<u8> = outcome_prob.iter().map(|&p| rng.gen_bool(p) as u8).collect();

    let mut levels = vec![vec![0usize; k]; n];
    let mut bin_edges = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = x.iter().map(|r| r[c]).collect();
        let (idx, edges) = discretize(&col, config.levels_per_covariate)?;
        for (row, l) in levels.iter_mut().zip(idx) {
            row[c] = l;
        }
        bin_edges.push(edges);
    }

    Ok(Population {
        x,
        levels,
        outcome_prob,
        y,
        inclusion_prob,
        bin_edges,
        levels_per_covariate: config.levels_per_covariate,
    })
}

/// Weighted sampling without replacement of `m` items from `pool`.
///
/// Uses exponential keys `ln(u) / w`; the top-`m` keys follow the same law as
/// sequential remove-and-renormalize draws.
fn weighted_without_replacement<R: Rng>(
    rng: &mut R,
    pool: &[usize],
    weights: &[f64],
    m: usize,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / weights[i], i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(m).map(|(_, i)| i).collect()
}

pub fn draw_sample(pop: &Population, config: &SimConfig) -> Result<SampleCounts> {
    config.validate()?;
    let n = config.sample_size;
    let mut rng = seed::substream(config.seed, &["sample".into()]);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut taken: BTreeSet<usize> = BTreeSet::new();

    match config.sampling_constraint {
        SamplingConstraint::AllCellsObserved => {
            let cells = pop.cells();
            if cells.len() > n {
                return Err(Error::InfeasibleConstraint(format!(
                    "{} occupied cells exceed sample size {n}",
                    cells.len()
                )));
            }
            for members in cells.values() {
                let i = *members.choose(&mut rng).expect("cells are nonempty");
                chosen.push(i);
                taken.insert(i);
            }
        }
        SamplingConstraint::AllLevelsObserved => {
            let k = pop.num_covariates();
            let levels = pop.levels_per_covariate;
            let mut by_level: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); levels]; k];
            for (i, lv) in pop.levels.iter().enumerate() {
                for (c, &l) in lv.iter().enumerate() {
                    by_level[c][l].push(i);
                }
            }
            for (c, per_level) in by_level.iter().enumerate() {
                for (l, members) in per_level.iter().enumerate() {
                    if members.is_empty() {
                        return Err(Error::InfeasibleConstraint(format!(
                            "level {l} of covariate {} is empty in the population",
                            c + 1
                        )));
                    }
                    if chosen.iter().any(|&i| pop.levels[i][c] == l) {
                        continue;
                    }
                    let i = *members.choose(&mut rng).expect("nonempty");
                    chosen.push(i);
                    taken.insert(i);
                }
            }
            if chosen.len() > n {
                return Err(Error::InfeasibleConstraint(format!(
                    "{} seeded individuals exceed sample size {n}",
                    chosen.len()
                )));
            }
        }
        SamplingConstraint::Unconstrained => {}
    }

    let pool: Vec<usize> = (0..pop.len()).filter(|i| !taken.contains(i)).collect();
    let rest = n - chosen.len();
    chosen.extend(weighted_without_replacement(&mut rng, &pool, &pop.inclusion_prob, rest));
    Ok(SampleCounts::from_members(pop, chosen))
}

/// Population cells that received at least one sampled individual, as a
/// fraction of all nonempty population cells.
pub fn observed_cell_fraction(pop: &Population, sample: &SampleCounts) -> f64 {
    let total = pop.cells().len();
    sample.counts.values().filter(|c| c.0 > 0).count() as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(constraint: SamplingConstraint) -> SimConfig {
        let mut c = SimConfig::paper_design(2_000, 300, 11);
        c.sampling_constraint = constraint;
        c
    }

    #[test]
    fn discretize_lower_bin_rule() {
        let (idx, edges) = discretize(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 5).unwrap();
        assert_eq!(idx, vec![0, 0, 1, 2, 3, 4]);
        assert_eq!(edges, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn discretize_constant_is_degenerate() {
        assert!(matches!(discretize(&[2.0; 4], 5), Err(Error::DegenerateCovariate)));
    }

    #[test]
    fn zero_outcome_coefs_give_half() {
        let mut c = small(SamplingConstraint::Unconstrained);
        c.outcome_coefs = vec![0.0; 4];
        let pop = generate_population(&c).unwrap();
        assert!(pop.outcome_prob.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn population_is_deterministic() {
        let c = small(SamplingConstraint::AllCellsObserved);
        let a = generate_population(&c).unwrap();
        let b = generate_population(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(draw_sample(&a, &c).unwrap(), draw_sample(&b, &c).unwrap());
    }

    #[test]
    fn levels_match_edges() {
        let pop = generate_population(&small(SamplingConstraint::Unconstrained)).unwrap();
        for (row, lv) in pop.x.iter().zip(&pop.levels) {
            for c in 0..pop.num_covariates() {
                let e = &pop.bin_edges[c];
                let l = lv[c];
                assert!(l < pop.levels_per_covariate);
                assert!(row[c] <= e[l + 1]);
                assert!(l == 0 || row[c] > e[l]);
            }
        }
        assert!(pop.inclusion_prob.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn all_cells_observed_covers_every_cell() {
        let c = small(SamplingConstraint::AllCellsObserved);
        let pop = generate_population(&c).unwrap();
        let s = draw_sample(&pop, &c).unwrap();
        assert_eq!(s.total(), c.sample_size);
        assert_eq!(s.counts.len(), pop.cells().len());
        assert!(s.total_positive() <= s.total());
        let distinct: BTreeSet<_> = s.members.iter().collect();
        assert_eq!(distinct.len(), s.members.len());
    }

    #[test]
    fn all_levels_observed_covers_every_level() {
        let c = small(SamplingConstraint::AllLevelsObserved);
        let pop = generate_population(&c).unwrap();
        let s = draw_sample(&pop, &c).unwrap();
        assert_eq!(s.total(), c.sample_size);
        for k in 0..4 {
            for l in 0..5 {
                assert!(s.members.iter().any(|&i| pop.levels[i][k] == l));
            }
        }
    }

    #[test]
    fn infeasible_when_cells_exceed_sample() {
        let mut c = small(SamplingConstraint::AllCellsObserved);
        c.sample_size = 10;
        let pop = generate_population(&c).unwrap();
        assert!(matches!(draw_sample(&pop, &c), Err(Error::InfeasibleConstraint(_))));
    }
}
