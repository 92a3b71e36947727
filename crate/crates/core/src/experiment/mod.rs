//! Replicated simulation studies: generate, fit, score, persist, summarize.

mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    filter_records, load_results, ordering_rate, summarize, underestimation_rate, write_report,
    AgreementStat, ExtractRow, FigureExtract, OrderingRate, Report, Summary, UnderestimationRate,
};

use crate::error::{Error, Result};
use crate::loco::{
    brute_force_loco, level_average_score, loco_crps, loco_se, mean_cell_psis_loco_crps,
    mean_cell_psis_loco_se, psis, psis_loco_crps, psis_loco_se, LocoCellPredictions, PsisResult,
};
use crate::model::{fit, CellProbDraws, McmcConfig, ModelSpec};
use crate::mrp::aggregate;
use crate::poststrat::{build_table, CellSet, CellSetDescriptor, PostStratTable};
use crate::reference::{
    combined_crps, combined_se, partial_ref_crps, partial_ref_se, ref_crps, ref_se, reference_check,
    ModelFit, RefForm, ReferenceCheck, ReferencePair,
};
use crate::scoring::{
    crps_cellwise, crps_draws, mean_cell_crps, sample_proxy_truths, se_direct, set_mean_cell_se,
    set_se, write_records, CellTruths, Family, Permutation, ScoreRecord, Target, Variant,
};
use crate::seed;
use crate::simulation::{draw_sample, generate_population, observed_cell_fraction, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

/// Everything needed to reproduce a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Simulation settings; the seed is replaced per replication.
    pub sim: SimConfig,
    pub models: Vec<String>,
    /// Reference models for the reference, partial and combined scores.
    #[serde(default)]
    pub references: Vec<String>,
    /// Variants to compute; empty means all.
    #[serde(default)]
    pub variants: Vec<Variant>,
    pub reps: u32,
    pub base_seed: u64,
    pub mcmc: McmcConfig,
    /// Replications that also run brute-force LOCO refits.
    #[serde(default)]
    pub brute_force_reps: Vec<u32>,
    /// Score every level of every covariate and the level averages.
    #[serde(default = "default_true")]
    pub subpopulations: bool,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

impl ExperimentPlan {
    /// Defaults for the two supported scales.
    pub fn for_scale(scale: Scale, output_dir: impl Into<PathBuf>) -> Self {
        let (sim, reps, mcmc, brute) = match scale {
            Scale::Paper => (SimConfig::paper_design(20_000, 1_000, 0), 100, McmcConfig::default(), vec![]),
            Scale::Desk => (SimConfig::paper_design(2_000, 300, 0), 10, McmcConfig::desk(), vec![0, 1]),
        };
        Self {
            sim,
            models: ["full", "precision", "bias", "nuisance"].map(String::from).to_vec(),
            references: ["full", "precision"].map(String::from).to_vec(),
            variants: Vec::new(),
            reps,
            base_seed: 20240101,
            mcmc,
            brute_force_reps: brute,
            subpopulations: true,
            output_dir: output_dir.into(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no models to fit".into()));
        }
        for label in self.models.iter().chain(&self.references) {
            ModelSpec::named(label)?;
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn wants(&self, v: Variant) -> bool {
        self.variants.is_empty() || self.variants.contains(&v)
    }

    pub fn rep_seed(&self, rep: u32) -> u64 {
        seed::derive(self.base_seed, &["rep".into(), (rep as u64).into()])
    }

    /// Models to fit: candidates first, then any extra references.
    pub fn fitted_labels(&self) -> Vec<String> {
        let mut out = self.models.clone();
        for r in &self.references {
            if !out.contains(r) {
                out.push(r.clone());
            }
        }
        out
    }

    fn wants_psis(&self) -> bool {
        [
            Variant::PsisLoco,
            Variant::MeanCellPsisLoco,
            Variant::Reference,
            Variant::PartialReference,
            Variant::Combined,
        ]
        .into_iter()
        .any(|v| self.wants(v))
    }

    fn wants_brute(&self, rep: u32) -> bool {
        self.brute_force_reps.contains(&rep)
            && (self.wants(Variant::BruteLoco) || self.wants(Variant::ReferenceBruteLoco))
    }
}

/// Per-model fit summary kept alongside the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    /// Convergence of the full-data fit.
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub khat_max: Option<f64>,
    pub khat_flagged: usize,
    pub brute_force: bool,
    /// Brute-force refits whose R-hat exceeded the threshold.
    #[serde(default)]
    pub refits_unconverged: usize,
    pub error: Option<String>,
}

/// Per-replication metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMeta {
    pub rep: u32,
    pub seed: u64,
    pub num_cells: usize,
    pub observed_fraction: f64,
    pub models: Vec<ModelSummary>,
    pub reference_checks: Vec<ReferenceCheck>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RepOutput {
    pub records: Vec<ScoreRecord>,
    pub meta: RepMeta,
    /// PSIS diagnostics CSV text per model.
    pub psis_diagnostics: Vec<(String, String)>,
}

struct Fitted {
    draws: CellProbDraws,
    psis: Option<PsisResult>,
    brute: Option<LocoCellPredictions>,
}

impl Fitted {
    fn as_fit(&self) -> ModelFit<'_> {
        ModelFit { draws: &self.draws, psis: self.psis.as_ref(), loco: self.brute.as_ref() }
    }
}

fn fit_model(plan: &ExperimentPlan, table: &PostStratTable, label: &str, rep: u32, seed: u64) -> Result<Fitted> {
    let spec = ModelSpec::named(label)?;
    let mcmc = plan.mcmc.clone().with_seed(seed::derive(seed, &["fit".into(), label.into()]));
    let draws = fit(&spec, table, &mcmc)?;
    let psis = if plan.wants_psis() {
        Some(psis(&draws, table, seed::derive(seed, &["psis".into(), label.into()]))?)
    } else {
        None
    };
    let brute = if plan.wants_brute(rep) {
        Some(brute_force_loco(&spec, table, &mcmc, &draws)?)
    } else {
        None
    };
    Ok(Fitted { draws, psis, brute })
}

/// Collects records for one replication.
struct Sink<'a> {
    plan: &'a ExperimentPlan,
    rep: u32,
    seed: u64,
    records: Vec<ScoreRecord>,
}

impl Sink<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        model: &str,
        reference: Option<&str>,
        family: Family,
        variant: Variant,
        target: &Target,
        value: Result<f64>,
        khat_max: Option<f64>,
        flagged: bool,
    ) {
        if !self.plan.wants(variant) {
            return;
        }
        let (value, failed) = match value {
            Ok(v) if v.is_finite() => (v, false),
            _ => (f64::NAN, true),
        };
        self.records.push(ScoreRecord {
            rep: self.rep,
            seed: self.seed,
            model: model.to_string(),
            reference: reference.map(str::to_string),
            family,
            variant,
            target: target.clone(),
            value,
            khat_max,
            flagged: flagged || failed,
        });
    }
}

/// Run one replication entirely in memory.
pub fn run_rep(plan: &ExperimentPlan, rep: u32) -> Result<RepOutput> {
    plan.validate()?;
    let seed = plan.rep_seed(rep);
    let sim = SimConfig { seed, ..plan.sim.clone() };
    let mut meta = RepMeta {
        rep,
        seed,
        num_cells: 0,
        observed_fraction: f64::NAN,
        models: Vec::new(),
        reference_checks: Vec::new(),
        error: None,
    };
    let mut sink = Sink { plan, rep, seed, records: Vec::new() };
    let table = match generate_population(&sim).and_then(|pop| {
        let sample = draw_sample(&pop, &sim)?;
        meta.observed_fraction = observed_cell_fraction(&pop, &sample);
        build_table(&pop, &sample)
    }) {
        Ok(t) => t,
        Err(e) => {
            meta.error = Some(e.to_string());
            for m in &plan.models {
                for fam in [Family::Se, Family::Crps] {
                    sink.push(m, None, fam, Variant::TruthDirect, &Target::POPULATION, Err(Error::EmptySet), None, true);
                }
            }
            return Ok(RepOutput { records: sink.records, meta, psis_diagnostics: Vec::new() });
        }
    };
    meta.num_cells = table.len();

    let labels = plan.fitted_labels();
    let fits: BTreeMap<String, Result<Fitted>> = labels
        .iter()
        .map(|l| (l.clone(), fit_model(plan, &table, l, rep, seed)))
        .collect();
    let b = plan.mcmc.total_draws();
    let perm = Permutation::random(b, seed::derive(seed, &["permutation".into()]));

    let mut psis_diagnostics = Vec::new();
    let all_cells = table.cell_set(CellSetDescriptor::Population)?;
    for label in &labels {
        let summary = match &fits[label] {
            Ok(f) => {
                if let Some(p) = &f.psis {
                    let mut buf = Vec::new();
                    p.write_diagnostics(&mut buf)?;
                    psis_diagnostics.push((label.clone(), String::from_utf8_lossy(&buf).into_owned()));
                }
                ModelSummary {
                    label: label.clone(),
                    converged: f.draws.converged(),
                    max_rhat: f.draws.max_rhat(),
                    khat_max: f.psis.as_ref().and_then(|p| p.khat_max(&all_cells)),
                    khat_flagged: f.psis.as_ref().map_or(0, |p| p.flagged_count(&all_cells)),
                    brute_force: f.brute.is_some(),
                    refits_unconverged: f.brute.as_ref().map_or(0, |b| b.unconverged_count()),
                    error: None,
                }
            }
            Err(e) => ModelSummary {
                label: label.clone(),
                converged: false,
                max_rhat: None,
                khat_max: None,
                khat_flagged: 0,
                brute_force: false,
                refits_unconverged: 0,
                error: Some(e.to_string()),
            },
        };
        meta.models.push(summary);
    }

    let mut targets = vec![Target::POPULATION];
    if plan.subpopulations {
        for variable in 0..table.num_covariates {
            for level in 0..table.levels_per_covariate {
                targets.push(Target::Set(CellSetDescriptor::Level { variable, level }));
            }
        }
    }
    let has_unobserved = table.cells.iter().any(|c| !c.observed());
    if has_unobserved {
        targets.push(Target::Set(CellSetDescriptor::Observed));
    }

    let truth = CellTruths::population(&table);
    for model in &plan.models {
        let fitted = match &fits[model] {
            Ok(f) => f,
            Err(_) => {
                for fam in [Family::Se, Family::Crps] {
                    sink.push(model, None, fam, Variant::TruthDirect, &Target::POPULATION, Err(Error::EmptySet), None, true);
                }
                continue;
            }
        };
        let start = sink.records.len();
        for target in &targets {
            let Target::Set(desc) = target else { continue };
            let set = table.cell_set(desc.clone())?;
            if set.is_empty() {
                continue;
            }
            score_target(&mut sink, &table, &fits, model, fitted, target, &set, &truth, &perm)?;
        }
        if plan.subpopulations {
            push_level_averages(&mut sink, start, table.levels_per_covariate);
        }
    }

    if plan.wants(Variant::Reference) && plan.wants_psis() {
        let candidates: Vec<ModelFit> =
            plan.models.iter().filter_map(|m| fits[m].as_ref().ok()).map(Fitted::as_fit).collect();
        for r in &plan.references {
            if let Ok(reference) = &fits[r] {
                if let Ok(check) = reference_check(&candidates, reference.as_fit(), &table, &perm) {
                    meta.reference_checks.push(check);
                }
            }
        }
    }
    Ok(RepOutput { records: sink.records, meta, psis_diagnostics })
}

#[allow(clippy::too_many_arguments)]
fn score_target(
    sink: &mut Sink,
    table: &PostStratTable,
    fits: &BTreeMap<String, Result<Fitted>>,
    model: &str,
    fitted: &Fitted,
    target: &Target,
    set: &CellSet,
    truth: &CellTruths,
    perm: &Permutation,
) -> Result<()> {
    let plan = sink.plan;
    let d = &fitted.draws;
    let unconverged = !d.converged();
    let est = aggregate(d, table, set)?;
    let wt = truth.weighted(table, set).ok();
    let se = wt.map(|t| se_direct(&est, t)).ok_or(Error::EmptySet);
    sink.push(model, None, Family::Se, Variant::TruthDirect, target, se, None, unconverged);
    let crps = wt.ok_or(Error::EmptySet).and_then(|t| crps_draws(&est, t, perm));
    sink.push(model, None, Family::Crps, Variant::TruthDirect, target, crps, None, unconverged);
    sink.push(model, None, Family::Se, Variant::TruthCellwise, target, set_se(d, table, set, truth), None, unconverged);
    sink.push(model, None, Family::Crps, Variant::TruthCellwise, target, crps_cellwise(d, table, set, truth, perm), None, unconverged);
    sink.push(model, None, Family::Se, Variant::MeanCellBaseline, target, set_mean_cell_se(d, table, set, truth), None, unconverged);
    sink.push(model, None, Family::Crps, Variant::MeanCellBaseline, target, mean_cell_crps(d, table, set, truth, perm), None, unconverged);

    let all_observed = table.unobserved_in(set).is_empty();
    if all_observed {
        let proxy = sample_proxy_truths(table, set)?;
        sink.push(model, None, Family::Se, Variant::SampleProxy, target, set_se(d, table, set, &proxy), None, unconverged);
        sink.push(model, None, Family::Crps, Variant::SampleProxy, target, crps_cellwise(d, table, set, &proxy, perm), None, unconverged);
        if let Some(p) = &fitted.psis {
            let khat = p.khat_max(set);
            let flag = unconverged || p.flagged_count(set) > 0;
            sink.push(model, None, Family::Se, Variant::PsisLoco, target, psis_loco_se(d, p, table, set, &proxy), khat, flag);
            sink.push(model, None, Family::Crps, Variant::PsisLoco, target, psis_loco_crps(d, p, table, set, &proxy, perm), khat, flag);
            sink.push(model, None, Family::Se, Variant::MeanCellPsisLoco, target, mean_cell_psis_loco_se(d, p, table, set, &proxy), khat, flag);
            sink.push(model, None, Family::Crps, Variant::MeanCellPsisLoco, target, mean_cell_psis_loco_crps(d, p, table, set, &proxy, perm), khat, flag);
        }
        if let Some(bl) = &fitted.brute {
            let flag = unconverged || !bl.all_converged();
            sink.push(model, None, Family::Se, Variant::BruteLoco, target, loco_se(bl, table, set, &proxy), None, flag);
            sink.push(model, None, Family::Crps, Variant::BruteLoco, target, loco_crps(bl, table, set, &proxy, perm), None, flag);
        }
    }

    for r in &plan.references {
        let Ok(reference) = &fits[r] else { continue };
        let rf = reference.as_fit();
        let cf = fitted.as_fit();
        let pair = ReferencePair::new(cf, rf, table, perm)?;
        let flag = unconverged || !reference.draws.converged();
        let rs = Some(r.as_str());
        sink.push(model, rs, Family::Se, Variant::ReferenceFull, target, ref_se(&pair, set, RefForm::Full), None, flag);
        sink.push(model, rs, Family::CrpsRef, Variant::ReferenceFull, target, ref_crps(&pair, set, RefForm::Full), None, flag);
        if all_observed {
            if let (Some(pc), Some(pr)) = (&fitted.psis, &reference.psis) {
                let khat = max_opt(pc.khat_max(set), pr.khat_max(set));
                let flag = flag || pc.flagged_count(set) + pr.flagged_count(set) > 0;
                sink.push(model, rs, Family::Se, Variant::Reference, target, ref_se(&pair, set, RefForm::Psis), khat, flag);
                sink.push(model, rs, Family::CrpsRef, Variant::Reference, target, ref_crps(&pair, set, RefForm::Psis), khat, flag);
            }
            if fitted.brute.is_some() && reference.brute.is_some() {
                sink.push(model, rs, Family::Se, Variant::ReferenceBruteLoco, target, ref_se(&pair, set, RefForm::BruteLoco), None, flag);
                sink.push(model, rs, Family::CrpsRef, Variant::ReferenceBruteLoco, target, ref_crps(&pair, set, RefForm::BruteLoco), None, flag);
            }
        }
        if let (true, Some(pc)) = (*target == Target::POPULATION, &fitted.psis) {
            let obs = table.cell_set(CellSetDescriptor::Observed)?;
            let unobs = table.cell_set(CellSetDescriptor::Unobserved)?;
            let proxy = sample_proxy_truths(table, &obs)?;
            let khat = pc.khat_max(&obs);
            let cflag = unconverged || pc.flagged_count(&obs) > 0 || !reference.draws.converged();
            if let Some(pr) = &reference.psis {
                let khat = max_opt(khat, pr.khat_max(&obs));
                sink.push(model, rs, Family::Se, Variant::PartialReference, target, partial_ref_se(&pair, &obs, &unobs), khat, cflag);
                sink.push(model, rs, Family::CrpsRef, Variant::PartialReference, target, partial_ref_crps(&pair, &obs, &unobs), khat, cflag);
            }
            sink.push(model, rs, Family::Se, Variant::Combined, target, combined_se(cf, &reference.draws, table, &obs, &unobs, &proxy), khat, cflag);
            sink.push(model, rs, Family::Crps, Variant::Combined, target, combined_crps(cf, &reference.draws, table, &obs, &unobs, &proxy, perm), khat, cflag);
        }
    }
    Ok(())
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

/// Append a level-average record for every (family, variant, reference,
/// variable) whose per-level scores are all present and finite.
fn push_level_averages(sink: &mut Sink, start: usize, num_levels: usize) {
    type Key = (String, Option<String>, Family, Variant, usize);
    let mut groups: BTreeMap<Key, (BTreeMap<usize, f64>, Option<f64>, bool)> = BTreeMap::new();
    for r in &sink.records[start..] {
        if let Target::Set(CellSetDescriptor::Level { variable, level }) = r.target {
            if r.value.is_nan() {
                continue;
            }
            let g = groups
                .entry((r.model.clone(), r.reference.clone(), r.family, r.variant, variable))
                .or_default();
            g.0.insert(level, r.value);
            g.1 = max_opt(g.1, r.khat_max);
            g.2 |= r.flagged;
        }
    }
    for ((model, reference, family, variant, variable), (scores, khat, flagged)) in groups {
        if let Ok(v) = level_average_score(&scores, num_levels) {
            sink.records.push(ScoreRecord {
                rep: sink.rep,
                seed: sink.seed,
                model,
                reference,
                family,
                variant,
                target: Target::LevelAverage { variable },
                value: v,
                khat_max: khat,
                flagged,
            });
        }
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub completed: Vec<u32>,
    pub skipped: Vec<u32>,
    pub scores_path: PathBuf,
}

fn rep_stem(dir: &Path, rep: u32) -> PathBuf {
    dir.join("reps").join(format!("rep_{rep:04}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Run every replication not already on disk, then rebuild `scores.csv`.
///
/// Each replication is written to `reps/` as a CSV of records plus a JSON
/// metadata file; the JSON file marks the replication complete.
pub fn run(plan: &ExperimentPlan) -> Result<RunSummary> {
    plan.validate()?;
    let dir = &plan.output_dir;
    fs::create_dir_all(dir.join("reps"))?;
    let plan_path = dir.join("plan.json");
    let plan_text = serde_json::to_string_pretty(plan)?;
    if fs::read_to_string(&plan_path).ok().as_deref() != Some(plan_text.as_str()) {
        write_atomic(&plan_path, plan_text.as_bytes())?;
    }
    let (skipped, todo): (Vec<u32>, Vec<u32>) =
        (0..plan.reps).partition(|&r| rep_stem(dir, r).with_extension("json").exists());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        todo.par_iter().try_for_each(|&rep| -> Result<()> {
            let out = run_rep(plan, rep)?;
            let stem = rep_stem(dir, rep);
            for (label, text) in &out.psis_diagnostics {
                let p = PathBuf::from(format!("{}_psis_{label}.csv", stem.display()));
                write_atomic(&p, text.as_bytes())?;
            }
            let mut buf = Vec::new();
            write_records(&mut buf, &out.records, true)?;
            write_atomic(&stem.with_extension("csv"), &buf)?;
            write_atomic(&stem.with_extension("json"), serde_json::to_string_pretty(&out.meta)?.as_bytes())?;
            Ok(())
        })
    })?;
    let scores_path = dir.join("scores.csv");
    let mut merged = Vec::new();
    for rep in 0..plan.reps {
        let text = fs::read(rep_stem(dir, rep).with_extension("csv"))?;
        let body = if rep == 0 {
            &text[..]
        } else {
            let nl = text.iter().position(|&c| c == b'\n').map_or(text.len(), |i| i + 1);
            &text[nl..]
        };
        merged.extend_from_slice(body);
    }
    if fs::read(&scores_path).ok().as_deref() != Some(&merged[..]) {
        write_atomic(&scores_path, &merged)?;
    }
    Ok(RunSummary { completed: todo, skipped, scores_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(dir: &Path) -> ExperimentPlan {
        let mut p = ExperimentPlan::for_scale(Scale::Desk, dir);
        p.sim = SimConfig::paper_design(300, 60, 0);
        p.sim.levels_per_covariate = 2;
        p.models = vec!["precision".into(), "bias".into()];
        p.references = vec!["bias".into()];
        p.mcmc = McmcConfig { chains: 2, warmup: 100, draws: 120, thin: 4, refit_warmup: 40, ..McmcConfig::desk() };
        p.reps = 2;
        p.brute_force_reps = vec![1];
        p
    }

    #[test]
    fn truth_only_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny_plan(dir.path());
        p.reps = 1;
        p.subpopulations = false;
        p.references.clear();
        p.variants = vec![Variant::TruthDirect];
        let out = run_rep(&p, 0).unwrap();
        // models x targets x families
        assert_eq!(out.records.len(), 2 * 1 * 2);
    }

    #[test]
    fn run_is_resumable_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_plan(dir.path());
        let first = run(&p).unwrap();
        assert_eq!(first.completed, vec![0, 1]);
        let bytes = fs::read(&first.scores_path).unwrap();
        let second = run(&p).unwrap();
        assert_eq!(second.skipped, vec![0, 1]);
        assert!(second.completed.is_empty());
        assert_eq!(fs::read(&second.scores_path).unwrap(), bytes);

        let records = crate::scoring::load_records(&first.scores_path).unwrap();
        assert!(records.iter().all(|r| r.sign_ok()));
        assert!(records.iter().any(|r| r.variant == Variant::BruteLoco && r.rep == 1));
        assert!(!records.iter().any(|r| r.variant == Variant::BruteLoco && r.rep == 0));
        assert!(records.iter().any(|r| matches!(r.target, Target::LevelAverage { .. })));
        for r in records.iter().filter(|r| r.model == "bias" && r.reference.as_deref() == Some("bias")) {
            if matches!(r.variant, Variant::Reference | Variant::ReferenceFull | Variant::PartialReference) {
                assert_eq!(r.value, 0.0);
            }
        }
    }

    #[test]
    fn plan_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = ExperimentPlan::for_scale(Scale::Paper, dir.path());
        let path = dir.path().join("plan.json");
        p.save(&path).unwrap();
        assert_eq!(ExperimentPlan::load(&path).unwrap(), p);
        let mut bad = p.clone();
        bad.models = vec!["nope".into()];
        assert!(bad.validate().is_err());
        bad = p;
        bad.reps = 0;
        assert!(bad.validate().is_err());
    }
}
