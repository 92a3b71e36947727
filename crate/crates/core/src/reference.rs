//! Scoring a candidate model against a reference model, and combined
//! validation for tables with unobserved cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loco::{resampled_column, weighted_cell_mean, LocoCellPredictions, PsisResult};
use crate::model::CellProbDraws;
use crate::poststrat::{CellSet, PostStratTable};
use crate::scoring::{energy, gather, CellTruths, Column, EnergyTerm, Permutation};
use crate::stats;

/// A fitted model with whatever LOCO machinery has been computed for it.
#[derive(Debug, Clone, Copy)]
pub struct ModelFit<'a> {
    pub draws: &'a CellProbDraws,
    pub psis: Option<&'a PsisResult>,
    pub loco: Option<&'a LocoCellPredictions>,
}

impl<'a> ModelFit<'a> {
    pub fn new(draws: &'a CellProbDraws, psis: Option<&'a PsisResult>) -> Self {
        Self { draws, psis, loco: None }
    }

    fn psis(&self) -> Result<&'a PsisResult> {
        self.psis.ok_or_else(|| Error::InvalidConfig(format!("no PSIS result for {}", self.draws.label)))
    }

    fn cell_mean(&self, form: RefForm, s: usize, means: &[f64]) -> Result<f64> {
        Ok(match form {
            RefForm::Full => means[s],
            RefForm::Psis => {
                self.psis()?.cell(s)?;
                weighted_cell_mean(self.draws, self.psis()?, s)
            }
            RefForm::BruteLoco => stats::mean(self.loco()?.cell(s)?),
        })
    }

    fn cell_draws(&self, form: RefForm, s: usize) -> Result<Vec<f64>> {
        Ok(match form {
            RefForm::Full => self.draws.column(s),
            RefForm::Psis => resampled_column(self.draws, s, &self.psis()?.cell(s)?.resample),
            RefForm::BruteLoco => self.loco()?.cell(s)?.to_vec(),
        })
    }

    fn loco(&self) -> Result<&'a LocoCellPredictions> {
        self.loco.ok_or_else(|| Error::InvalidConfig(format!("no brute-force LOCO for {}", self.draws.label)))
    }
}

/// Which per-cell predictions a reference score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefForm {
    Full,
    BruteLoco,
    Psis,
}

/// Candidate and reference fits sharing one table and one permutation.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePair<'a> {
    pub candidate: ModelFit<'a>,
    pub reference: ModelFit<'a>,
    pub table: &'a PostStratTable,
    pub perm: &'a Permutation,
}

impl<'a> ReferencePair<'a> {
    pub fn new(
        candidate: ModelFit<'a>,
        reference: ModelFit<'a>,
        table: &'a PostStratTable,
        perm: &'a Permutation,
    ) -> Result<Self> {
        for d in [candidate.draws, reference.draws] {
            if d.num_cells() != table.len() {
                return Err(Error::LengthMismatch { expected: table.len(), got: d.num_cells() });
            }
            if d.num_draws() != perm.len() {
                return Err(Error::LengthMismatch { expected: perm.len(), got: d.num_draws() });
            }
        }
        Ok(Self { candidate, reference, table, perm })
    }

    fn weighted_diff(&self, set: &CellSet, form: RefForm) -> Result<f64> {
        let (mc, mr) = (self.candidate.draws.cell_means(), self.reference.draws.cell_means());
        let mut acc = 0.0;
        for &s in &set.members {
            let n = self.table.cells[s].pop_count as f64;
            acc += n * (self.candidate.cell_mean(form, s, &mc)? - self.reference.cell_mean(form, s, &mr)?);
        }
        Ok(acc)
    }

    fn terms(&self, set: &CellSet, form: RefForm) -> Result<Vec<EnergyTerm>> {
        set.members
            .iter()
            .map(|&s| {
                Ok(EnergyTerm {
                    weight: self.table.cells[s].pop_count as f64,
                    x: self.candidate.cell_draws(form, s)?,
                    t: Column::Draws(self.reference.cell_draws(form, s)?),
                })
            })
            .collect()
    }
}

/// `(sum N_j (m_c,j - m_*,j) / sum N_j)^2` with per-cell means from `form`.
pub fn ref_se(pair: &ReferencePair, set: &CellSet, form: RefForm) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = pair.weighted_diff(set, form)? / pair.table.set_weight(set);
    Ok(d * d)
}

/// `E|C-C'|/2 + E|R-R'|/2 - E|C-R|` over within-draw weighted cell sums.
pub fn ref_crps(pair: &ReferencePair, set: &CellSet, form: RefForm) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    energy(&pair.terms(set, form)?, pair.perm)
}

fn check_partition(table: &PostStratTable, obs: &CellSet, unobs: &CellSet) -> Result<()> {
    let mut seen = vec![false; table.len()];
    for &s in obs.members.iter().chain(&unobs.members) {
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::BadPartition(format!("cell {s} appears twice")));
        }
    }
    if let Some(s) = seen.iter().position(|v| !v) {
        return Err(Error::BadPartition(format!("cell {s} is in neither set")));
    }
    let bad = table.unobserved_in(obs);
    if !bad.is_empty() {
        return Err(Error::UnobservedCell(bad));
    }
    Ok(())
}

/// Reference SE with PSIS-LOCO means on `obs` and full-fit means on `unobs`.
pub fn partial_ref_se(pair: &ReferencePair, obs: &CellSet, unobs: &CellSet) -> Result<f64> {
    check_partition(pair.table, obs, unobs)?;
    let d = (pair.weighted_diff(obs, RefForm::Psis)? + pair.weighted_diff(unobs, RefForm::Full)?)
        / pair.table.total as f64;
    Ok(d * d)
}

/// Reference CRPS with resampled draws on `obs` and raw draws on `unobs`.
///
/// The cross term is subtracted and each model's spread term pairs its own
/// draws, as in the energy-distance identity. A printed form of this score
/// adds all three terms and swaps the model subscripts on the spread terms
/// of the unobserved cells; that form is not a distance and is not used.
pub fn partial_ref_crps(pair: &ReferencePair, obs: &CellSet, unobs: &CellSet) -> Result<f64> {
    check_partition(pair.table, obs, unobs)?;
    let mut terms = pair.terms(obs, RefForm::Psis)?;
    terms.extend(pair.terms(unobs, RefForm::Full)?);
    energy(&terms, pair.perm)
}

/// Cross-validated SE on `obs` against `truths` and full-fit reference
/// differences on `unobs`, in one weighted sum.
pub fn combined_se(
    candidate: ModelFit,
    reference: &CellProbDraws,
    table: &PostStratTable,
    obs: &CellSet,
    unobs: &CellSet,
    truths_obs: &CellTruths,
) -> Result<f64> {
    check_partition(table, obs, unobs)?;
    let psis = candidate.psis()?;
    let mut acc = 0.0;
    if !obs.is_empty() {
        let (w, t) = gather(table, obs, truths_obs)?;
        for (&s, (n, t)) in obs.members.iter().zip(w.iter().zip(&t)) {
            psis.cell(s)?;
            acc += n * (weighted_cell_mean(candidate.draws, psis, s) - t);
        }
    }
    let (mc, mr) = (candidate.draws.cell_means(), reference.cell_means());
    for &s in &unobs.members {
        acc += table.cells[s].pop_count as f64 * (mc[s] - mr[s]);
    }
    let d = acc / table.total as f64;
    Ok(d * d)
}

/// Combined CRPS: on `obs` the candidate's resampled draws are scored against
/// `truths`; on `unobs` its full-fit draws are scored against reference draws.
pub fn combined_crps(
    candidate: ModelFit,
    reference: &CellProbDraws,
    table: &PostStratTable,
    obs: &CellSet,
    unobs: &CellSet,
    truths_obs: &CellTruths,
    perm: &Permutation,
) -> Result<f64> {
    check_partition(table, obs, unobs)?;
    let psis = candidate.psis()?;
    let mut terms = Vec::with_capacity(table.len());
    if !obs.is_empty() {
        let (w, t) = gather(table, obs, truths_obs)?;
        for (&s, (weight, t)) in obs.members.iter().zip(w.into_iter().zip(t)) {
            let idx = &psis.cell(s)?.resample;
            terms.push(EnergyTerm {
                weight,
                x: resampled_column(candidate.draws, s, idx),
                t: Column::Fixed(t),
            });
        }
    }
    for &s in &unobs.members {
        terms.push(EnergyTerm {
            weight: table.cells[s].pop_count as f64,
            x: candidate.draws.column(s),
            t: Column::Draws(reference.column(s)),
        });
    }
    energy(&terms, perm)
}

/// Cross-validation and reference scores on the observed cells, per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub reference: String,
    pub models: Vec<String>,
    pub cv_se: Vec<f64>,
    pub ref_se: Vec<f64>,
    pub cv_crps: Vec<f64>,
    pub ref_crps: Vec<f64>,
    /// Kendall tau between the two SE orderings.
    pub tau_se: f64,
    /// Kendall tau between the two CRPS orderings.
    pub tau_crps: f64,
}

impl ReferenceCheck {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Compare PSIS-LOCO cross-validation scores on the observed cells, taken
/// against the sample, with PSIS reference scores on the same cells.
pub fn reference_check(
    candidates: &[ModelFit],
    reference: ModelFit,
    table: &PostStratTable,
    perm: &Permutation,
) -> Result<ReferenceCheck> {
    let obs = table.cell_set(crate::poststrat::CellSetDescriptor::Observed)?;
    let truths = crate::scoring::sample_proxy_truths(table, &obs)?;
    let mut out = ReferenceCheck {
        reference: reference.draws.label.clone(),
        models: Vec::new(),
        cv_se: Vec::new(),
        ref_se: Vec::new(),
        cv_crps: Vec::new(),
        ref_crps: Vec::new(),
        tau_se: f64::NAN,
        tau_crps: f64::NAN,
    };
    for c in candidates {
        let psis = c.psis()?;
        let pair = ReferencePair::new(*c, reference, table, perm)?;
        out.models.push(c.draws.label.clone());
        out.cv_se.push(crate::loco::psis_loco_se(c.draws, psis, table, &obs, &truths)?);
        out.cv_crps.push(crate::loco::psis_loco_crps(c.draws, psis, table, &obs, &truths, perm)?);
        out.ref_se.push(ref_se(&pair, &obs, RefForm::Psis)?);
        out.ref_crps.push(ref_crps(&pair, &obs, RefForm::Psis)?);
    }
    if candidates.len() >= 2 {
        out.tau_se = stats::kendall_tau(&out.cv_se, &out.ref_se);
        out.tau_crps = stats::kendall_tau(&out.cv_crps, &out.ref_crps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loco::{psis, psis_loco_crps, psis_loco_se};
    use crate::poststrat::{Cell, CellSetDescriptor};
    use crate::scoring::sample_proxy_truths;
    use rand::Rng;

    fn table(observed: &[bool]) -> PostStratTable {
        let cells = observed
            .iter()
            .enumerate()
            .map(|(j, &o)| Cell {
                id: j,
                levels: vec![j],
                pop_count: 5 + 3 * j as u64,
                true_prob: Some(0.5),
                n: if o { 3 } else { 0 },
                y: if o { 1 } else { 0 },
            })
            .collect();
        PostStratTable::from_cells(1, observed.len(), cells).unwrap()
    }

    fn random_draws(label: &str, b: usize, j: usize, seed: u64) -> CellProbDraws {
        let mut rng = crate::seed::rng(seed);
        let rows = (0..b).map(|_| (0..j).map(|_| rng.gen_range(0.05..0.95)).collect()).collect();
        CellProbDraws::from_rows(label, rows).unwrap()
    }

    #[test]
    fn self_comparison_is_zero() {
        let t = table(&[true, false, true, true]);
        let d = random_draws("a", 40, 4, 1);
        let p = psis(&d, &t, 2).unwrap();
        let perm = Permutation::random(40, 3);
        let m = ModelFit::new(&d, Some(&p));
        let pair = ReferencePair::new(m, m, &t, &perm).unwrap();
        let all = t.cell_set(CellSetDescriptor::Population).unwrap();
        let obs = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let unobs = t.cell_set(CellSetDescriptor::Unobserved).unwrap();
        assert_eq!(ref_se(&pair, &all, RefForm::Full).unwrap(), 0.0);
        assert_eq!(ref_crps(&pair, &all, RefForm::Full).unwrap(), 0.0);
        assert_eq!(ref_se(&pair, &obs, RefForm::Psis).unwrap(), 0.0);
        assert_eq!(ref_crps(&pair, &obs, RefForm::Psis).unwrap(), 0.0);
        assert_eq!(partial_ref_se(&pair, &obs, &unobs).unwrap(), 0.0);
        assert_eq!(partial_ref_crps(&pair, &obs, &unobs).unwrap(), 0.0);
        assert!(matches!(ref_se(&pair, &unobs, RefForm::Psis), Err(Error::UnobservedCell(_))));
    }

    #[test]
    fn two_single_cell_models() {
        let t = table(&[true]);
        let a = CellProbDraws::from_rows("a", vec![vec![0.4]; 5]).unwrap();
        let b = CellProbDraws::from_rows("b", vec![vec![0.6]; 5]).unwrap();
        let perm = Permutation::random(5, 1);
        let pair = ReferencePair::new(ModelFit::new(&a, None), ModelFit::new(&b, None), &t, &perm).unwrap();
        let all = t.cell_set(CellSetDescriptor::Population).unwrap();
        assert!((ref_se(&pair, &all, RefForm::Full).unwrap() - 0.04).abs() < 1e-15);
        assert!((ref_crps(&pair, &all, RefForm::Full).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn ref_crps_is_symmetric_and_negative_for_distinct_models() {
        let t = table(&[true, true, true]);
        let a = random_draws("a", 200, 3, 5);
        let rows = (0..200).map(|b| (0..3).map(|j| a.get(b, j) * 0.5).collect()).collect();
        let b = CellProbDraws::from_rows("b", rows).unwrap();
        let perm = Permutation::random(200, 7);
        let all = t.cell_set(CellSetDescriptor::Population).unwrap();
        let ab = ReferencePair::new(ModelFit::new(&a, None), ModelFit::new(&b, None), &t, &perm).unwrap();
        let ba = ReferencePair::new(ModelFit::new(&b, None), ModelFit::new(&a, None), &t, &perm).unwrap();
        let x = ref_crps(&ab, &all, RefForm::Full).unwrap();
        let y = ref_crps(&ba, &all, RefForm::Full).unwrap();
        assert!((x - y).abs() < 1e-12);
        assert!(x <= 0.0);
    }

    #[test]
    fn reductions_with_no_unobserved_cells() {
        let t = table(&[true, true, true, true]);
        let c = random_draws("c", 50, 4, 8);
        let r = random_draws("r", 50, 4, 9);
        let (pc, pr) = (psis(&c, &t, 1).unwrap(), psis(&r, &t, 2).unwrap());
        let perm = Permutation::random(50, 3);
        let obs = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let none = t.cell_set(CellSetDescriptor::Unobserved).unwrap();
        let truths = sample_proxy_truths(&t, &obs).unwrap();
        let cand = ModelFit::new(&c, Some(&pc));
        assert_eq!(
            combined_se(cand, &r, &t, &obs, &none, &truths).unwrap(),
            psis_loco_se(&c, &pc, &t, &obs, &truths).unwrap()
        );
        assert_eq!(
            combined_crps(cand, &r, &t, &obs, &none, &truths, &perm).unwrap(),
            psis_loco_crps(&c, &pc, &t, &obs, &truths, &perm).unwrap()
        );
        let pair = ReferencePair::new(cand, ModelFit::new(&r, Some(&pr)), &t, &perm).unwrap();
        assert_eq!(partial_ref_se(&pair, &obs, &none).unwrap(), ref_se(&pair, &obs, RefForm::Psis).unwrap());
        assert_eq!(
            partial_ref_crps(&pair, &obs, &none).unwrap(),
            ref_crps(&pair, &obs, RefForm::Psis).unwrap()
        );
    }

    #[test]
    fn all_unobserved_reduces_to_full_fit() {
        let t = table(&[false, false]);
        let c = random_draws("c", 30, 2, 1);
        let r = random_draws("r", 30, 2, 2);
        let perm = Permutation::random(30, 3);
        let pair = ReferencePair::new(ModelFit::new(&c, None), ModelFit::new(&r, None), &t, &perm).unwrap();
        let obs = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let unobs = t.cell_set(CellSetDescriptor::Unobserved).unwrap();
        assert_eq!(partial_ref_se(&pair, &obs, &unobs).unwrap(), ref_se(&pair, &unobs, RefForm::Full).unwrap());
    }

    #[test]
    fn perfect_candidate_scores_zero() {
        let t = table(&[true, false]);
        let c = CellProbDraws::from_rows("c", vec![vec![1.0 / 3.0, 0.7]; 30]).unwrap();
        let pc = psis(&c, &t, 1).unwrap();
        let perm = Permutation::random(30, 3);
        let obs = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let unobs = t.cell_set(CellSetDescriptor::Unobserved).unwrap();
        let truths = sample_proxy_truths(&t, &obs).unwrap();
        let cand = ModelFit::new(&c, Some(&pc));
        assert!(combined_se(cand, &c, &t, &obs, &unobs, &truths).unwrap() < 1e-30);
        assert!(combined_crps(cand, &c, &t, &obs, &unobs, &truths, &perm).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bad_partitions() {
        let t = table(&[true, false, true]);
        let d = random_draws("a", 10, 3, 1);
        let p = psis(&d, &t, 1).unwrap();
        let perm = Permutation::random(10, 1);
        let m = ModelFit::new(&d, Some(&p));
        let pair = ReferencePair::new(m, m, &t, &perm).unwrap();
        let obs = t.cell_set(CellSetDescriptor::Observed).unwrap();
        let all = t.cell_set(CellSetDescriptor::Population).unwrap();
        let part = t.cell_set(CellSetDescriptor::Explicit(vec![1])).unwrap();
        let empty = t.cell_set(CellSetDescriptor::Explicit(vec![])).unwrap();
        assert!(matches!(partial_ref_se(&pair, &obs, &all), Err(Error::BadPartition(_))));
        assert!(matches!(partial_ref_se(&pair, &empty, &part), Err(Error::BadPartition(_))));
        assert!(matches!(partial_ref_se(&pair, &all, &empty), Err(Error::UnobservedCell(v)) if v == vec![1]));
    }

    #[test]
    fn rank_agreement_extremes() {
        let t = table(&[true, true, true]);
        let perm = Permutation::random(20, 1);
        let fits: Vec<CellProbDraws> = [0.4, 0.5, 0.6, 0.7]
            .iter()
            .map(|&v| CellProbDraws::from_rows(format!("m{v}"), vec![vec![v; 3]; 20]).unwrap())
            .collect();
        let ps: Vec<PsisResult> = fits.iter().map(|f| psis(f, &t, 1).unwrap()).collect();
        let cands: Vec<ModelFit> = fits.iter().zip(&ps).map(|(f, p)| ModelFit::new(f, Some(p))).collect();
        let near = CellProbDraws::from_rows("near", vec![vec![0.3; 3]; 20]).unwrap();
        let pn = psis(&near, &t, 1).unwrap();
        let r = reference_check(&cands, ModelFit::new(&near, Some(&pn)), &t, &perm).unwrap();
        assert_eq!(r.models.len(), 4);
        assert!((r.tau_se - 1.0).abs() < 1e-12 && (r.tau_crps - 1.0).abs() < 1e-12);
        let far = CellProbDraws::from_rows("far", vec![vec![0.9; 3]; 20]).unwrap();
        let pf = psis(&far, &t, 1).unwrap();
        let r2 = reference_check(&cands, ModelFit::new(&far, Some(&pf)), &t, &perm).unwrap();
        assert!((r2.tau_se + 1.0).abs() < 1e-12 && (r2.tau_crps + 1.0).abs() < 1e-12);
        assert!(r2.to_json().unwrap().contains("tau_crps"));
    }
}
