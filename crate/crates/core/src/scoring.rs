//! Squared error and CRPS for poststratified targets.
//!
//! CRPS is in negative orientation: values are `<= 0` and closer to zero is
//! better. SE is `>= 0` and smaller is better.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CellProbDraws;
use crate::mrp::EstimateDraws;
use crate::poststrat::{CellSet, CellSetDescriptor, PostStratTable};
use crate::seed;

/// A bijection on draw indices, shared by every cell in one scoring call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    map: Vec<usize>,
    pub seed: u64,
}

impl Permutation {
    /// Uniform random permutation of `0..b`, redrawn until it is not the identity.
    pub fn random(b: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut map: Vec<usize> = (0..b).collect();
        loop {
            map.shuffle(&mut rng);
            if b < 2 || map.iter().enumerate().any(|(i, &j)| i != j) {
                return Self { map, seed };
            }
        }
    }

    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidConfig("not a permutation".into()));
            }
        }
        Ok(Self { map, seed: 0 })
    }

    #[inline]
    pub fn apply(&self, b: usize) -> usize {
        self.map[b]
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn fixed_points(&self) -> usize {
        self.map.iter().enumerate().filter(|(i, j)| i == *j).count()
    }

    fn check(&self, b: usize) -> Result<()> {
        if self.len() != b {
            return Err(Error::LengthMismatch { expected: b, got: self.len() });
        }
        Ok(())
    }
}

/// Per-cell target values; `None` where no truth is available.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTruths(pub Vec<Option<f64>>);

impl CellTruths {
    /// Population truths from the table.
    pub fn population(table: &PostStratTable) -> Self {
        Self(table.cells.iter().map(|c| c.true_prob).collect())
    }

    pub fn from_values(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| Some(v)).collect())
    }

    pub fn get(&self, cell: usize) -> Result<f64> {
        self.0.get(cell).copied().flatten().ok_or(Error::MissingTruth(cell))
    }

    /// N-weighted truth over `set`.
    pub fn weighted(&self, table: &PostStratTable, set: &CellSet) -> Result<f64> {
        let (w, t) = gather(table, set, self)?;
        Ok(w.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>())
    }
}

/// `y_j / n_j` for each member cell of `set`.
pub fn sample_proxy_truths(table: &PostStratTable, set: &CellSet) -> Result<CellTruths> {
    let missing = table.unobserved_in(set);
    if !missing.is_empty() {
        return Err(Error::UnobservedCell(missing));
    }
    let mut out = vec![None; table.len()];
    for &s in &set.members {
        let c = &table.cells[s];
        out[s] = Some(c.y as f64 / c.n as f64);
    }
    Ok(CellTruths(out))
}

pub(crate) fn gather(
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut w = Vec::with_capacity(set.len());
    let mut t = Vec::with_capacity(set.len());
    for &s in &set.members {
        w.push(table.cells[s].pop_count as f64);
        t.push(truths.get(s)?);
    }
    Ok((w, t))
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: a, got: b });
    }
    if a != c {
        return Err(Error::LengthMismatch { expected: a, got: c });
    }
    Ok(())
}

/// `(mean(est) - truth)^2`.
pub fn se_direct(est: &EstimateDraws, truth: f64) -> f64 {
    let m = crate::mrp::point_estimate(est);
    (m - truth).powi(2)
}

/// `(sum N_j (m_j - t_j) / sum N_j)^2`.
///
/// Weights are normalized before summing so that a single cell gives
/// exactly the same value as [`mean_cell_se`].
pub fn se_cellwise(cell_means: &[f64], cell_truths: &[f64], weights: &[f64]) -> Result<f64> {
    check_lengths(cell_means.len(), cell_truths.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    let e: f64 = cell_means
        .iter()
        .zip(cell_truths)
        .zip(weights)
        .map(|((m, t), w)| (w / total) * (m - t))
        .sum();
    Ok(e * e)
}

/// `sum N_j (m_j - t_j)^2 / sum N_j`.
pub fn mean_cell_se(cell_means: &[f64], cell_truths: &[f64], weights: &[f64]) -> Result<f64> {
    check_lengths(cell_means.len(), cell_truths.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    Ok(cell_means
        .iter()
        .zip(cell_truths)
        .zip(weights)
        .map(|((m, t), w)| (w / total) * (m - t).powi(2))
        .sum())
}

/// Cellwise SE over `set` using posterior cell means.
pub fn set_se(
    draws: &CellProbDraws,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<f64> {
    let (w, t) = gather(table, set, truths)?;
    let means = draws.cell_means();
    let m: Vec<f64> = set.members.iter().map(|&s| means[s]).collect();
    se_cellwise(&m, &t, &w)
}

/// Mean-of-cells SE over `set` using posterior cell means.
pub fn set_mean_cell_se(
    draws: &CellProbDraws,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
) -> Result<f64> {
    let (w, t) = gather(table, set, truths)?;
    let means = draws.cell_means();
    let m: Vec<f64> = set.members.iter().map(|&s| means[s]).collect();
    mean_cell_se(&m, &t, &w)
}

/// `(1/B) sum_b [ |x_b - x_perm(b)| / 2 - |x_b - truth| ]`.
pub fn crps_sample(x: &[f64], truth: f64, perm: &Permutation) -> Result<f64> {
    perm.check(x.len())?;
    let b = x.len() as f64;
    Ok(x
        .iter()
        .enumerate()
        .map(|(i, &v)| 0.5 * (v - x[perm.apply(i)]).abs() - (v - truth).abs())
        .sum::<f64>()
        / b)
}

pub fn crps_draws(est: &EstimateDraws, truth: f64, perm: &Permutation) -> Result<f64> {
    crps_sample(&est.draws, truth, perm)
}

/// Target side of an energy term.
#[derive(Debug, Clone)]
pub(crate) enum Column {
    Fixed(f64),
    Draws(Vec<f64>),
}

impl Column {
    #[inline]
    fn at(&self, b: usize) -> f64 {
        match self {
            Column::Fixed(v) => *v,
            Column::Draws(d) => d[b],
        }
    }
}

/// One cell's contribution: population weight, candidate draws, target.
#[derive(Debug, Clone)]
pub(crate) struct EnergyTerm {
    pub weight: f64,
    pub x: Vec<f64>,
    pub t: Column,
}

/// Draw-based energy score of N-weighted cell sums:
/// `E|X-X'|/2 + E|T-T'|/2 - E|X-T'|` where `X`, `T` are weighted means over cells.
///
/// With a fixed target the cross term pairs draw `b` with the target itself.
/// With random targets it pairs `X_b` with `T_perm(b)` and `T_b` with
/// `X_perm(b)` and averages, so identical inputs score exactly 0 and the
/// score is symmetric in `X` and `T`.
pub(crate) fn energy(terms: &[EnergyTerm], perm: &Permutation) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::EmptySet);
    }
    let nb = perm.len();
    for term in terms {
        perm.check(term.x.len())?;
        if let Column::Draws(d) = &term.t {
            perm.check(d.len())?;
        }
    }
    let total: f64 = terms.iter().map(|t| t.weight).sum();
    let random_target = terms.iter().any(|t| matches!(t.t, Column::Draws(_)));
    let mut acc = 0.0;
    for b in 0..nb {
        let p = perm.apply(b);
        let (mut g, mut gt, mut h, mut h2) = (0.0, 0.0, 0.0, 0.0);
        for term in terms {
            let (xb, xp) = (term.x[b], term.x[p]);
            g += term.weight * (xb - xp);
            if random_target {
                let (tb, tp) = (term.t.at(b), term.t.at(p));
                gt += term.weight * (tb - tp);
                h += term.weight * (xb - tp);
                h2 += term.weight * (tb - xp);
            } else {
                h += term.weight * (xb - term.t.at(b));
            }
        }
        acc += if random_target {
            0.5 * ((g.abs() + gt.abs()) - (h.abs() + h2.abs())) / total
        } else {
            0.5 * g.abs() / total - h.abs() / total
        };
    }
    Ok(acc / nb as f64)
}

/// CRPS of the poststratified estimate over `set`, from within-draw weighted cell sums.
pub fn crps_cellwise(
    draws: &CellProbDraws,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    let (w, t) = gather(table, set, truths)?;
    let terms: Vec<EnergyTerm> = set
        .members
        .iter()
        .zip(w.iter().zip(t))
        .map(|(&s, (&weight, t))| EnergyTerm { weight, x: draws.column(s), t: Column::Fixed(t) })
        .collect();
    energy(&terms, perm)
}

/// N-weighted mean of per-cell CRPS.
pub fn mean_cell_crps(
    draws: &CellProbDraws,
    table: &PostStratTable,
    set: &CellSet,
    truths: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    let (w, t) = gather(table, set, truths)?;
    let mut acc = 0.0;
    for (&s, (weight, t)) in set.members.iter().zip(w.iter().zip(&t)) {
        acc += weight * crps_sample(&draws.column(s), *t, perm)?;
    }
    Ok(acc / w.iter().sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "CRPS")]
    Crps,
    #[serde(rename = "CRPS-REF")]
    CrpsRef,
}

impl Family {
    /// True when a larger value means a worse model.
    pub fn higher_is_worse(self) -> bool {
        matches!(self, Family::Se)
    }

    /// Value oriented so that larger is worse.
    pub fn loss(self, value: f64) -> f64 {
        if self.higher_is_worse() {
            value
        } else {
            -value
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Se => "SE",
            Family::Crps => "CRPS",
            Family::CrpsRef => "CRPS-REF",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "truth-direct")]
    TruthDirect,
    #[serde(rename = "truth-cellwise")]
    TruthCellwise,
    #[serde(rename = "sample-proxy")]
    SampleProxy,
    #[serde(rename = "brute-LOCO")]
    BruteLoco,
    #[serde(rename = "PSIS-LOCO")]
    PsisLoco,
    /// Reference score, PSIS-LOCO form.
    #[serde(rename = "reference")]
    Reference,
    #[serde(rename = "reference-full")]
    ReferenceFull,
    #[serde(rename = "reference-brute-LOCO")]
    ReferenceBruteLoco,
    #[serde(rename = "partial-reference")]
    PartialReference,
    #[serde(rename = "combined")]
    Combined,
    /// Mean of per-cell scores against the population truth.
    #[serde(rename = "mean-cell-baseline")]
    MeanCellBaseline,
    #[serde(rename = "mean-cell-PSIS-LOCO")]
    MeanCellPsisLoco,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::TruthDirect,
        Variant::TruthCellwise,
        Variant::SampleProxy,
        Variant::BruteLoco,
        Variant::PsisLoco,
        Variant::Reference,
        Variant::ReferenceFull,
        Variant::ReferenceBruteLoco,
        Variant::PartialReference,
        Variant::Combined,
        Variant::MeanCellBaseline,
        Variant::MeanCellPsisLoco,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TruthDirect => "truth-direct",
            Variant::TruthCellwise => "truth-cellwise",
            Variant::SampleProxy => "sample-proxy",
            Variant::BruteLoco => "brute-LOCO",
            Variant::PsisLoco => "PSIS-LOCO",
            Variant::Reference => "reference",
            Variant::ReferenceFull => "reference-full",
            Variant::ReferenceBruteLoco => "reference-brute-LOCO",
            Variant::PartialReference => "partial-reference",
            Variant::Combined => "combined",
            Variant::MeanCellBaseline => "mean-cell-baseline",
            Variant::MeanCellPsisLoco => "mean-cell-PSIS-LOCO",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Variants scored against a reference model.
    pub fn uses_reference(self) -> bool {
        matches!(
            self,
            Variant::Reference
                | Variant::ReferenceFull
                | Variant::ReferenceBruteLoco
                | Variant::PartialReference
                | Variant::Combined
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a score is about: a set of cells, or the mean over levels of one variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Set(CellSetDescriptor),
    LevelAverage { variable: usize },
}

impl Target {
    pub const POPULATION: Target = Target::Set(CellSetDescriptor::Population);

    pub fn kind(&self) -> &'static str {
        match self {
            Target::Set(d) => d.kind(),
            Target::LevelAverage { .. } => "level-average",
        }
    }

    /// One-based variable index, if any.
    pub fn variable(&self) -> Option<usize> {
        match self {
            Target::Set(CellSetDescriptor::Level { variable, .. })
            | Target::LevelAverage { variable } => Some(variable + 1),
            _ => None,
        }
    }

    /// One-based level index, if any.
    pub fn level(&self) -> Option<usize> {
        match self {
            Target::Set(CellSetDescriptor::Level { level, .. }) => Some(level + 1),
            _ => None,
        }
    }

    fn from_parts(kind: &str, variable: Option<usize>, level: Option<usize>) -> Result<Self> {
        let bad = || Error::Parse(format!("bad target ({kind}, {variable:?}, {level:?})"));
        Ok(match kind {
            "population" => Target::POPULATION,
            "observed" => Target::Set(CellSetDescriptor::Observed),
            "unobserved" => Target::Set(CellSetDescriptor::Unobserved),
            "level" => Target::Set(CellSetDescriptor::Level {
                variable: variable.and_then(|v| v.checked_sub(1)).ok_or_else(bad)?,
                level: level.and_then(|v| v.checked_sub(1)).ok_or_else(bad)?,
            }),
            "level-average" => Target::LevelAverage {
                variable: variable.and_then(|v| v.checked_sub(1)).ok_or_else(bad)?,
            },
            _ => return Err(bad()),
        })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Set(d) => d.fmt(f),
            Target::LevelAverage { variable } => write!(f, "mean over levels of x{}", variable + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub rep: u32,
    pub seed: u64,
    pub model: String,
    pub reference: Option<String>,
    pub family: Family,
    pub variant: Variant,
    pub target: Target,
    pub value: f64,
    /// Largest Pareto k among the cells that fed the score.
    pub khat_max: Option<f64>,
    /// Set when a fit did not converge, a k-hat exceeded the threshold, or scoring failed.
    pub flagged: bool,
}

impl ScoreRecord {
    /// Sign convention check: SE is nonnegative and CRPS against a fixed
    /// target is nonpositive. Scores against reference draws are Monte Carlo
    /// estimates of a nonpositive quantity and may land slightly above zero.
    pub fn sign_ok(&self) -> bool {
        if self.value.is_nan() {
            return self.flagged;
        }
        match self.family {
            Family::Se => self.value >= 0.0,
            _ if self.variant.uses_reference() => true,
            Family::Crps | Family::CrpsRef => self.value <= 0.0,
        }
    }
}

/// Flat CSV row of a [`ScoreRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    rep: u32,
    model: String,
    family: Family,
    variant: Variant,
    target_kind: String,
    target_variable: Option<usize>,
    target_level: Option<usize>,
    value: f64,
    khat_max: Option<f64>,
    flagged: bool,
    seed: u64,
    reference: Option<String>,
}

impl From<&ScoreRecord> for Row {
    fn from(r: &ScoreRecord) -> Self {
        Row {
            rep: r.rep,
            model: r.model.clone(),
            family: r.family,
            variant: r.variant,
            target_kind: r.target.kind().to_string(),
            target_variable: r.target.variable(),
            target_level: r.target.level(),
            value: r.value,
            khat_max: r.khat_max,
            flagged: r.flagged,
            seed: r.seed,
            reference: r.reference.clone(),
        }
    }
}

impl TryFrom<Row> for ScoreRecord {
    type Error = Error;

    fn try_from(r: Row) -> Result<Self> {
        Ok(ScoreRecord {
            target: Target::from_parts(&r.target_kind, r.target_variable, r.target_level)?,
            rep: r.rep,
            seed: r.seed,
            model: r.model,
            reference: r.reference,
            family: r.family,
            variant: r.variant,
            value: r.value,
            khat_max: r.khat_max,
            flagged: r.flagged,
        })
    }
}

/// Write records as CSV, with a header when `header` is set.
pub fn write_records<W: Write>(w: W, records: &[ScoreRecord], header: bool) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
    for r in records {
        wtr.serialize(Row::from(r))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize::<Row>().map(|row| ScoreRecord::try_from(row?)).collect()
}

pub fn load_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    read_records(std::fs::File::open(path)?)
}
