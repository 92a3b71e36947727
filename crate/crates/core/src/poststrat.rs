//! The poststratification table and cell subsets.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulation::{Population, SampleCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub levels: Vec<usize>,
    pub pop_count: u64,
    /// Share of the cell's population with `Y = 1`; `None` for external
    /// tables without known truth.
    pub true_prob: Option<f64>,
    pub n: u32,
    pub y: u32,
}

impl Cell {
    pub fn observed(&self) -> bool {
        self.n > 0
    }
}

/// Cells of one run, ordered lexicographically by level tuple. Column `j` of
/// every draw matrix refers to `cells[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PostStratTable {
    pub num_covariates: usize,
    pub levels_per_covariate: usize,
    pub cells: Vec<Cell>,
    pub total: u64,
}

impl PostStratTable {
    /// Build from explicit cells; re-sorts and re-numbers them.
    pub fn from_cells(
        num_covariates: usize,
        levels_per_covariate: usize,
        mut cells: Vec<Cell>,
    ) -> Result<Self> {
        cells.sort_by(|a, b| a.levels.cmp(&b.levels));
        for (j, c) in cells.iter_mut().enumerate() {
            if c.levels.len() != num_covariates {
                return Err(Error::LengthMismatch { expected: num_covariates, got: c.levels.len() });
            }
            if c.levels.iter().any(|&l| l >= levels_per_covariate) {
                return Err(Error::Parse(format!("cell {j} has an out-of-range level")));
            }
            if c.y > c.n || c.n as u64 > c.pop_count {
                return Err(Error::Parse(format!("cell {j} violates y <= n <= N")));
            }
            c.id = j;
        }
        for w in cells.windows(2) {
            if w[0].levels == w[1].levels {
                return Err(Error::Parse("duplicate cell level tuple".into()));
            }
        }
        let total = cells.iter().map(|c| c.pop_count).sum();
        Ok(Self { num_covariates, levels_per_covariate, cells, total })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn pop_counts(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.pop_count as f64).collect()
    }

    /// Per-cell population truths; `None` if any cell lacks one.
    pub fn truths(&self) -> Option<Vec<f64>> {
        self.cells.iter().map(|c| c.true_prob).collect()
    }

    /// Population mean recomposed from cell truths.
    pub fn population_truth(&self) -> Option<f64> {
        let t = self.truths()?;
        Some(
            self.cells.iter().zip(&t).map(|(c, p)| c.pop_count as f64 * p).sum::<f64>()
                / self.total as f64,
        )
    }

    pub fn weighted_truth(&self, set: &CellSet) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for &s in &set.members {
            let c = &self.cells[s];
            num += c.pop_count as f64 * c.true_prob?;
            den += c.pop_count as f64;
        }
        Some(num / den)
    }

    pub fn observed_ids(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.observed()).map(|c| c.id).collect()
    }

    /// Return the cells of `set` that have no sample observation.
    pub fn unobserved_in(&self, set: &CellSet) -> Vec<usize> {
        set.members.iter().copied().filter(|&s| !self.cells[s].observed()).collect()
    }

    pub fn cell_set(&self, descriptor: CellSetDescriptor) -> Result<CellSet> {
        let members: Vec<usize> = match &descriptor {
            CellSetDescriptor::Population => (0..self.len()).collect(),
            CellSetDescriptor::Level { variable, level } => {
                if *variable >= self.num_covariates || *level >= self.levels_per_covariate {
                    return Err(Error::UnknownLevel { variable: *variable, level: *level });
                }
                self.cells
                    .iter()
                    .filter(|c| c.levels[*variable] == *level)
                    .map(|c| c.id)
                    .collect()
            }
            CellSetDescriptor::Observed => self.observed_ids(),
            CellSetDescriptor::Unobserved => {
                self.cells.iter().filter(|c| !c.observed()).map(|c| c.id).collect()
            }
            CellSetDescriptor::Explicit(ids) => {
                if let Some(&bad) = ids.iter().find(|&&j| j >= self.len()) {
                    return Err(Error::Parse(format!("cell id {bad} out of range")));
                }
                let mut v = ids.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        Ok(CellSet { descriptor, members })
    }

    pub fn set_weight(&self, set: &CellSet) -> f64 {
        set.members.iter().map(|&s| self.cells[s].pop_count as f64).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["j".to_string()];
        header.extend((1..=self.num_covariates).map(|k| format!("level{k}")));
        header.extend(["N_j", "true_prob", "n_j", "y_j"].map(String::from));
        wtr.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.id.to_string()];
            rec.extend(c.levels.iter().map(|l| l.to_string()));
            rec.push(c.pop_count.to_string());
            rec.push(c.true_prob.map(|p| format!("{p:.17e}")).unwrap_or_default());
            rec.push(c.n.to_string());
            rec.push(c.y.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read a table written by [`PostStratTable::write_csv`] or supplied
    /// externally with the same columns. `levels_per_covariate` defaults to
    /// one more than the largest level seen.
    pub fn read_csv<R: Read>(r: R, levels_per_covariate: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let level_cols: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("level"))
            .map(|(i, _)| i)
            .collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("missing column {name}")))
        };
        let (cn, ct, cnj, cyj) = (col("N_j")?, col("true_prob")?, col("n_j")?, col("y_j")?);
        let parse_u = |s: &str| s.trim().parse::<u64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let levels = level_cols
                .iter()
                .map(|&i| parse_u(&rec[i]).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let tp = rec[ct].trim();
            let true_prob = if tp.is_empty() || tp.eq_ignore_ascii_case("na") {
                None
            } else {
                Some(tp.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?)
            };
            cells.push(Cell {
                id: 0,
                levels,
                pop_count: parse_u(&rec[cn])?,
                true_prob,
                n: parse_u(&rec[cnj])? as u32,
                y: parse_u(&rec[cyj])? as u32,
            });
        }
        let lpc = levels_per_covariate.unwrap_or_else(|| {
            cells.iter().flat_map(|c| c.levels.iter().copied()).max().map_or(0, |m| m + 1)
        });
        Self::from_cells(level_cols.len(), lpc, cells)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(path: &Path, levels_per_covariate: Option<usize>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, levels_per_covariate)
    }
}

/// Table of every nonempty population cell with its sample counts.
/// Cells absent from the population are dropped.
pub fn build_table(pop: &Population, sample: &SampleCounts) -> Result<PostStratTable> {
    let groups = pop.cells();
    let missing: Vec<Vec<usize>> = sample
        .counts
        .iter()
        .filter(|(lv, c)| c.0 > 0 && !groups.contains_key(*lv))
        .map(|(lv, _)| lv.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::CellMismatch(missing));
    }
    let cells = groups
        .iter()
        .enumerate()
        .map(|(j, (lv, members))| {
            let positives: u64 = members.iter().map(|&i| pop.y[i] as u64).sum();
            let (n, y) = sample.counts.get(lv).copied().unwrap_or((0, 0));
            Cell {
                id: j,
                levels: lv.clone(),
                pop_count: members.len() as u64,
                true_prob: Some(positives as f64 / members.len() as f64),
                n,
                y,
            }
        })
        .collect();
    PostStratTable::from_cells(pop.num_covariates(), pop.levels_per_covariate, cells)
}

/// Which cells a score is computed over.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSetDescriptor {
    Population,
    /// 0-based variable and level indices.
    Level { variable: usize, level: usize },
    Observed,
    Unobserved,
    Explicit(Vec<usize>),
}

impl CellSetDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Population => "population",
            Self::Level { .. } => "level",
            Self::Observed => "observed",
            Self::Unobserved => "unobserved",
            Self::Explicit(_) => "explicit",
        }
    }
}

impl fmt::Display for CellSetDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Level { variable, level } => write!(f, "x{}={}", variable + 1, level),
            other => f.write_str(other.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSet {
    pub descriptor: CellSetDescriptor,
    pub members: Vec<usize>,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{draw_sample, generate_population, SamplingConstraint, SimConfig};

    fn table(constraint: SamplingConstraint) -> (Population, PostStratTable) {
        let mut c = SimConfig::paper_design(2_000, 300, 5);
        c.sampling_constraint = constraint;
        let pop = generate_population(&c).unwrap();
        let s = draw_sample(&pop, &c).unwrap();
        let t = build_table(&pop, &s).unwrap();
        (pop, t)
    }

    #[test]
    fn cell_truths_recompose_population_mean() {
        let (pop, t) = table(SamplingConstraint::AllCellsObserved);
        assert_eq!(t.total as usize, pop.len());
        assert!((t.population_truth().unwrap() - pop.mean_outcome()).abs() < 1e-12);
        assert!(t.len() <= 625);
        for c in &t.cells {
            let p = c.true_prob.unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert!(c.n as u64 <= c.pop_count && c.y <= c.n);
        }
    }

    #[test]
    fn level_sets_partition_population() {
        let (_, t) = table(SamplingConstraint::AllLevelsObserved);
        for v in 0..4 {
            let mut seen = vec![0usize; t.len()];
            let mut weight = 0.0;
            for l in 0..5 {
                let s = t.cell_set(CellSetDescriptor::Level { variable: v, level: l }).unwrap();
                weight += t.set_weight(&s);
                for &m in &s.members {
                    seen[m] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            assert_eq!(weight, t.total as f64);
        }
        let pop = t.cell_set(CellSetDescriptor::Population).unwrap();
        assert_eq!(pop.len(), t.len());
    }

    #[test]
    fn observed_unobserved_partition() {
        let (_, t) = table(SamplingConstraint::AllLevelsObserved);
        let o = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let u = t.cell_set(CellSetDescriptor::Unobserved).unwrap();
        assert_eq!(o.len() + u.len(), t.len());
        assert!(o.members.iter().all(|m| !u.members.contains(m)));
        assert!(!u.is_empty());
    }

    #[test]
    fn unknown_level_rejected() {
        let (_, t) = table(SamplingConstraint::AllCellsObserved);
        assert!(matches!(
            t.cell_set(CellSetDescriptor::Level { variable: 0, level: 9 }),
            Err(Error::UnknownLevel { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let (_, t) = table(SamplingConstraint::AllCellsObserved);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = PostStratTable::read_csv(&buf[..], Some(5)).unwrap();
        assert_eq!(back, t);
    }
}
