//! Summaries of a results store: figure extracts, ordering and
//! underestimation rates, and agreement statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RepMeta;
use crate::error::Result;
use crate::poststrat::CellSetDescriptor;
use crate::scoring::{load_records, Family, ScoreRecord, Target, Variant};
use crate::stats;

/// Records whose variant is in `variants`; all records when it is empty.
pub fn filter_records<'a>(records: &'a [ScoreRecord], variants: &[Variant]) -> Vec<&'a ScoreRecord> {
    records.iter().filter(|r| variants.is_empty() || variants.contains(&r.variant)).collect()
}

/// Read `scores.csv` and every replication's metadata from a run directory.
pub fn load_results(dir: &Path) -> Result<(Vec<ScoreRecord>, Vec<RepMeta>)> {
    let records = load_records(&dir.join("scores.csv"))?;
    let mut metas = Vec::new();
    let reps = dir.join("reps");
    if reps.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(&reps)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            metas.push(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
    }
    Ok((records, metas))
}

/// How often `better` beats `worse` across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRate {
    pub family: Family,
    pub variant: Variant,
    pub reference: Option<String>,
    pub better: String,
    pub worse: String,
    pub rate: f64,
    pub reps: usize,
}

fn population_value(
    records: &[ScoreRecord],
    family: Family,
    variant: Variant,
    reference: Option<&str>,
) -> BTreeMap<(u32, String), f64> {
    records
        .iter()
        .filter(|r| {
            r.family == family
                && r.variant == variant
                && r.reference.as_deref() == reference
                && r.target == Target::POPULATION
                && !r.value.is_nan()
        })
        .map(|r| ((r.rep, r.model.clone()), r.value))
        .collect()
}

/// Fraction of replications, at the population target, in which `better`
/// scores strictly better than `worse`.
pub fn ordering_rate(
    records: &[ScoreRecord],
    family: Family,
    variant: Variant,
    reference: Option<&str>,
    better: &str,
    worse: &str,
) -> Option<OrderingRate> {
    let vals = population_value(records, family, variant, reference);
    let reps: BTreeSet<u32> = vals.keys().map(|k| k.0).collect();
    let mut wins = 0;
    let mut n = 0;
    for rep in reps {
        if let (Some(&a), Some(&b)) =
            (vals.get(&(rep, better.to_string())), vals.get(&(rep, worse.to_string())))
        {
            n += 1;
            if family.loss(a) < family.loss(b) {
                wins += 1;
            }
        }
    }
    (n > 0).then(|| OrderingRate {
        family,
        variant,
        reference: reference.map(str::to_string),
        better: better.to_string(),
        worse: worse.to_string(),
        rate: wins as f64 / n as f64,
        reps: n,
    })
}

/// How often an estimated score understates the error of the truth score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderestimationRate {
    pub family: Family,
    pub estimator: Variant,
    pub truth: Variant,
    pub rate: f64,
    pub cells: usize,
}

/// Fraction of (model, replication) pairs, at the population target, in which
/// the estimator reports less error than the truth score: smaller SE, or a CRPS
/// closer to zero.
pub fn underestimation_rate(
    records: &[ScoreRecord],
    family: Family,
    estimator: Variant,
    truth: Variant,
) -> Option<UnderestimationRate> {
    let est = population_value(records, family, estimator, None);
    let tru = population_value(records, family, truth, None);
    let mut hits = 0;
    let mut n = 0;
    for (k, e) in &est {
        if let Some(t) = tru.get(k) {
            n += 1;
            if family.loss(*e) < family.loss(*t) {
                hits += 1;
            }
        }
    }
    (n > 0).then(|| UnderestimationRate { family, estimator, truth, rate: hits as f64 / n as f64, cells: n })
}

/// A correlation or rank-agreement summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStat {
    pub name: String,
    pub family: Family,
    pub reference: Option<String>,
    pub value: f64,
    pub n: usize,
}

/// One joined point of a figure extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRow {
    pub rep: u32,
    pub model: String,
    pub reference: Option<String>,
    pub family: Family,
    pub target_kind: String,
    pub target_variable: Option<usize>,
    pub target_level: Option<usize>,
    pub x: f64,
    pub y: f64,
}

/// Description of one extract file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureExtract {
    pub name: String,
    pub x_variant: Variant,
    pub y_variant: Variant,
    /// Target kinds included.
    pub targets: Vec<String>,
    pub file: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reps: usize,
    pub records: usize,
    pub flagged_records: usize,
    pub khat_flagged_cells: usize,
    pub unconverged_fits: usize,
    pub unconverged_refits: usize,
    pub observed_fraction_mean: Option<f64>,
    pub observed_fraction_min: Option<f64>,
    pub observed_fraction_max: Option<f64>,
    pub extracts: Vec<FigureExtract>,
    pub ordering_rates: Vec<OrderingRate>,
    pub underestimation: Vec<UnderestimationRate>,
    pub agreement: Vec<AgreementStat>,
}

/// A report plus the extract tables it describes.
#[derive(Debug, Clone)]
pub struct Summary {
    pub report: Report,
    pub tables: Vec<(FigureExtract, Vec<ExtractRow>)>,
    /// Mean score per (model, reference, family, variant, variable, level).
    pub level_means: Vec<LevelMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMean {
    pub model: String,
    pub reference: Option<String>,
    pub family: Family,
    pub variant: Variant,
    pub variable: usize,
    pub level: usize,
    pub mean: f64,
    pub reps: usize,
}

/// SE pairs with SE; the CRPS families pair with each other.
fn family_class(f: Family) -> u8 {
    match f {
        Family::Se => 0,
        Family::Crps | Family::CrpsRef => 1,
    }
}

fn join(
    records: &[ScoreRecord],
    x: Variant,
    y: Variant,
    targets: &[&str],
) -> Vec<ExtractRow> {
    type Key = (u32, String, u8, Target);
    let keep = |r: &&ScoreRecord| targets.contains(&r.target.kind()) && !r.value.is_nan();
    let xs: BTreeMap<Key, Vec<&ScoreRecord>> = records
        .iter()
        .filter(|r| r.variant == x)
        .filter(keep)
        .fold(BTreeMap::new(), |mut m, r| {
            m.entry((r.rep, r.model.clone(), family_class(r.family), r.target.clone())).or_insert_with(Vec::new).push(r);
            m
        });
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.variant == y).filter(keep) {
        let key = (r.rep, r.model.clone(), family_class(r.family), r.target.clone());
        for xr in xs.get(&key).into_iter().flatten() {
            if xr.reference.is_some() && xr.reference != r.reference {
                continue;
            }
            out.push(ExtractRow {
                rep: r.rep,
                model: r.model.clone(),
                reference: r.reference.clone().or_else(|| xr.reference.clone()),
                family: r.family,
                target_kind: r.target.kind().to_string(),
                target_variable: r.target.variable(),
                target_level: r.target.level(),
                x: xr.value,
                y: r.value,
            });
        }
    }
    out
}

const EXTRACTS: &[(&str, Variant, Variant, &[&str])] = &[
    ("fig1", Variant::TruthCellwise, Variant::TruthDirect, &["population", "level"]),
    ("fig2", Variant::TruthCellwise, Variant::SampleProxy, &["population"]),
    ("fig3", Variant::SampleProxy, Variant::BruteLoco, &["population"]),
    ("fig4", Variant::TruthCellwise, Variant::BruteLoco, &["population"]),
    ("fig5", Variant::PsisLoco, Variant::Reference, &["population"]),
    ("fig6", Variant::PsisLoco, Variant::Reference, &["observed"]),
    ("fig7", Variant::BruteLoco, Variant::PsisLoco, &["population"]),
    ("fig8", Variant::TruthCellwise, Variant::Combined, &["population"]),
    ("supp_levels", Variant::TruthCellwise, Variant::PsisLoco, &["level", "level-average"]),
];

fn spearman_of(rows: &[ExtractRow], family: u8, reference: Option<&str>) -> Option<(f64, usize)> {
    let pts: Vec<&ExtractRow> = rows
        .iter()
        .filter(|r| family_class(r.family) == family)
        .filter(|r| reference.is_none() || r.reference.as_deref() == reference)
        .filter(|r| reference.is_none() || r.reference.as_deref() != Some(r.model.as_str()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let x: Vec<f64> = pts.iter().map(|r| r.x).collect();
    let y: Vec<f64> = pts.iter().map(|r| r.y).collect();
    Some((stats::spearman(&x, &y), pts.len()))
}

/// Build figure extracts, ordering and underestimation rates, and
/// agreement statistics from the records and metadata of a run.
pub fn summarize(records: &[ScoreRecord], metas: &[RepMeta]) -> Summary {
    let mut tables = Vec::new();
    for (name, x, y, targets) in EXTRACTS {
        let rows = join(records, *x, *y, targets);
        let ex = FigureExtract {
            name: name.to_string(),
            x_variant: *x,
            y_variant: *y,
            targets: targets.iter().map(|s| s.to_string()).collect(),
            file: format!("extracts/{name}.csv"),
            rows: rows.len(),
        };
        tables.push((ex, rows));
    }

    let models: Vec<String> =
        records.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let groups: BTreeSet<(Family, Variant, Option<String>)> = records
        .iter()
        .filter(|r| r.target == Target::POPULATION)
        .map(|r| (r.family, r.variant, r.reference.clone()))
        .collect();
    let mut ordering_rates = Vec::new();
    for (family, variant, reference) in &groups {
        for a in &models {
            for b in &models {
                if a != b {
                    if let Some(o) = ordering_rate(records, *family, *variant, reference.as_deref(), a, b) {
                        ordering_rates.push(o);
                    }
                }
            }
        }
    }

    let mut underestimation = Vec::new();
    for family in [Family::Se, Family::Crps] {
        for est in [Variant::SampleProxy, Variant::BruteLoco, Variant::PsisLoco, Variant::Combined] {
            if let Some(u) = underestimation_rate(records, family, est, Variant::TruthCellwise) {
                underestimation.push(u);
            }
        }
    }

    let mut agreement = Vec::new();
    let references: BTreeSet<String> = records.iter().filter_map(|r| r.reference.clone()).collect();
    for (ex, rows) in &tables {
        for (fam, family) in [(0u8, Family::Se), (1u8, Family::Crps)] {
            match ex.name.as_str() {
                "fig7" | "fig1" => {
                    if let Some((v, n)) = spearman_of(rows, fam, None) {
                        agreement.push(AgreementStat { name: format!("spearman_{}", ex.name), family, reference: None, value: v, n });
                    }
                }
                "fig5" | "fig8" => {
                    for r in &references {
                        if let Some((v, n)) = spearman_of(rows, fam, Some(r)) {
                            agreement.push(AgreementStat {
                                name: format!("spearman_{}", ex.name),
                                family,
                                reference: Some(r.clone()),
                                value: v,
                                n,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let mut taus: BTreeMap<(String, u8), Vec<f64>> = BTreeMap::new();
    for m in metas {
        for c in &m.reference_checks {
            taus.entry((c.reference.clone(), 0)).or_default().push(c.tau_se);
            taus.entry((c.reference.clone(), 1)).or_default().push(c.tau_crps);
        }
    }
    for ((reference, fam), v) in taus {
        let v: Vec<f64> = v.into_iter().filter(|t| !t.is_nan()).collect();
        if !v.is_empty() {
            agreement.push(AgreementStat {
                name: "mean_kendall_tau_observed".into(),
                family: if fam == 0 { Family::Se } else { Family::Crps },
                reference: Some(reference),
                value: stats::mean(&v),
                n: v.len(),
            });
        }
    }

    let mut level_acc: BTreeMap<(String, Option<String>, Family, Variant, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Target::Set(CellSetDescriptor::Level { variable, level }) = r.target {
            if !r.value.is_nan() {
                level_acc
                    .entry((r.model.clone(), r.reference.clone(), r.family, r.variant, variable + 1, level + 1))
                    .or_default()
                    .push(r.value);
            }
        }
    }
    let level_means = level_acc
        .into_iter()
        .map(|((model, reference, family, variant, variable, level), v)| LevelMean {
            model,
            reference,
            family,
            variant,
            variable,
            level,
            mean: stats::mean(&v),
            reps: v.len(),
        })
        .collect();

    let fractions: Vec<f64> = metas.iter().map(|m| m.observed_fraction).filter(|f| f.is_finite()).collect();
    let reps: BTreeSet<u32> = records.iter().map(|r| r.rep).collect();
    let report = Report {
        reps: reps.len(),
        records: records.len(),
        flagged_records: records.iter().filter(|r| r.flagged).count(),
        khat_flagged_cells: metas.iter().flat_map(|m| &m.models).map(|s| s.khat_flagged).sum(),
        unconverged_fits: metas.iter().flat_map(|m| &m.models).filter(|s| !s.converged).count(),
        unconverged_refits: metas.iter().flat_map(|m| &m.models).map(|s| s.refits_unconverged).sum(),
        observed_fraction_mean: (!fractions.is_empty()).then(|| stats::mean(&fractions)),
        observed_fraction_min: fractions.iter().cloned().reduce(f64::min),
        observed_fraction_max: fractions.iter().cloned().reduce(f64::max),
        extracts: tables.iter().map(|(e, _)| e.clone()).collect(),
        ordering_rates,
        underestimation,
        agreement,
    };
    Summary { report, tables, level_means }
}

/// Write `report.json`, `extracts/*.csv` and `extracts/level_means.csv`.
pub fn write_report(dir: &Path, summary: &Summary) -> Result<()> {
    let ex_dir = dir.join("extracts");
    fs::create_dir_all(&ex_dir)?;
    for (ex, rows) in &summary.tables {
        let mut wtr = csv::Writer::from_path(dir.join(&ex.file))?;
        if rows.is_empty() {
            wtr.write_record([
                "rep", "model", "reference", "family", "target_kind", "target_variable", "target_level", "x", "y",
            ])?;
        }
        for r in rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
    }
    let mut wtr = csv::Writer::from_path(ex_dir.join("level_means.csv"))?;
    for r in &summary.level_means {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary.report)?)?;
    Ok(())
}
