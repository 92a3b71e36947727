use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mrp_score::experiment::{self, ExperimentPlan, Scale};
use mrp_score::loco::psis;
use mrp_score::model::{fit, CellProbDraws, McmcConfig, ModelSpec};
use mrp_score::mrp::aggregate;
use mrp_score::poststrat::{build_table, CellSetDescriptor, PostStratTable};
use mrp_score::reference::{ref_crps, ref_se, ModelFit, RefForm, ReferencePair};
use mrp_score::scoring::{
    crps_cellwise, crps_draws, sample_proxy_truths, se_direct, set_se, write_records, CellTruths,
    Family, Permutation, ScoreRecord, Target, Variant,
};
use mrp_score::simulation::{draw_sample, generate_population, SamplingConstraint, SimConfig};
use mrp_score::{loco, seed};

#[derive(Parser)]
#[command(name = "mrp-score", version, about = "Score MRP estimates with cellwise SE and CRPS")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replications.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Preset sizes and sampler settings.
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Paper => Scale::Paper,
            ScaleArg::Desk => Scale::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintArg {
    AllCells,
    AllLevels,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a population and a sample; write population and table CSVs.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, value_enum, default_value = "all-cells")]
        constraint: ConstraintArg,
    },
    /// Fit one model to a poststratification table; write cell-probability draws.
    Fit {
        #[arg(long)]
        table: PathBuf,
        /// full, precision, bias, nuisance, x1_only, x3_only or intercept.
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Score draws against truth, the sample, PSIS-LOCO and optionally a reference.
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// population, observed, or level:<variable>:<level> (one-based).
        #[arg(long, default_value = "population")]
        target: String,
        /// Write scores here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-cell PSIS diagnostics here.
        #[arg(long)]
        psis_diagnostics: Option<PathBuf>,
    },
    /// Run a full replicated study.
    Run {
        /// Plan file (JSON); defaults come from --scale.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        reps: Option<u32>,
        /// Replications that also run brute-force LOCO, e.g. 0,1,2.
        #[arg(long, value_delimiter = ',')]
        brute_reps: Option<Vec<u32>>,
        #[arg(long, value_enum)]
        constraint: Option<ConstraintArg>,
        /// Also write the report when the run finishes.
        #[arg(long)]
        report: bool,
    },
    /// Summarize a run directory into report.json and figure extracts.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Only echo these variants in the filtered output (all when empty).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn constraint(c: ConstraintArg) -> SamplingConstraint {
    match c {
        ConstraintArg::AllCells => SamplingConstraint::AllCellsObserved,
        ConstraintArg::AllLevels => SamplingConstraint::AllLevelsObserved,
        ConstraintArg::None => SamplingConstraint::Unconstrained,
    }
}

fn scale_of(g: &Global) -> Scale {
    g.scale.map_or(Scale::Desk, Scale::from)
}

fn mcmc_for(g: &Global) -> McmcConfig {
    match scale_of(g) {
        Scale::Paper => McmcConfig::default(),
        Scale::Desk => McmcConfig::desk(),
    }
    .with_seed(g.seed.unwrap_or(0))
}

fn parse_target(s: &str) -> Result<CellSetDescriptor> {
    Ok(match s {
        "population" => CellSetDescriptor::Population,
        "observed" => CellSetDescriptor::Observed,
        _ => {
            let parts: Vec<&str> = s.split(':').collect();
            match parts.as_slice() {
                ["level", v, l] => {
                    let v: usize = v.parse()?;
                    let l: usize = l.parse()?;
                    if v == 0 || l == 0 {
                        bail!("variable and level are one-based");
                    }
                    CellSetDescriptor::Level { variable: v - 1, level: l - 1 }
                }
                _ => bail!("unknown target {s:?}"),
            }
        }
    })
}

fn label_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn simulate(g: &Global, out: &Path, population: Option<usize>, sample: Option<usize>, c: ConstraintArg) -> Result<()> {
    let (n_pop, n_sample) = match scale_of(g) {
        Scale::Paper => (20_000, 1_000),
        Scale::Desk => (2_000, 300),
    };
    let mut cfg = SimConfig::paper_design(
        population.unwrap_or(n_pop),
        sample.unwrap_or(n_sample),
        g.seed.unwrap_or(0),
    );
    cfg.sampling_constraint = constraint(c);
    let pop = generate_population(&cfg)?;
    let s = draw_sample(&pop, &cfg)?;
    let table = build_table(&pop, &s)?;
    fs::create_dir_all(out)?;
    pop.save_csv(&out.join("population.csv"), Some(&s))?;
    table.save_csv(&out.join("table.csv"))?;
    fs::write(out.join("sim.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "{} units, {} sampled, {} cells ({} observed)",
        pop.y.len(),
        s.total(),
        table.len(),
        table.observed_ids().len()
    );
    Ok(())
}

fn fit_cmd(
    g: &Global,
    table: &Path,
    model: &str,
    out: &Path,
    chains: Option<usize>,
    warmup: Option<usize>,
    draws: Option<usize>,
) -> Result<()> {
    let table = PostStratTable::load_csv(table, None)?;
    let spec = ModelSpec::named(model)?;
    let mut mcmc = mcmc_for(g);
    mcmc.chains = chains.unwrap_or(mcmc.chains);
    mcmc.warmup = warmup.unwrap_or(mcmc.warmup);
    mcmc.draws = draws.unwrap_or(mcmc.draws);
    let d = fit(&spec, &table, &mcmc)?;
    d.save_csv(out)?;
    if let Some(diag) = &d.diagnostics {
        fs::write(out.with_extension("diagnostics.json"), serde_json::to_string_pretty(diag)?)?;
        println!(
            "{}: {} draws, max R-hat {:.3}, converged {}",
            model,
            d.num_draws(),
            diag.max_rhat,
            diag.converged
        );
    }
    Ok(())
}

fn score_cmd(
    g: &Global,
    table_path: &Path,
    draws_path: &Path,
    reference: Option<&Path>,
    target: &str,
    out: Option<&Path>,
    diag_path: Option<&Path>,
) -> Result<()> {
    let table = PostStratTable::load_csv(table_path, None)?;
    let draws = CellProbDraws::load_csv(label_of(draws_path), draws_path)?;
    let base = g.seed.unwrap_or(0);
    let perm = Permutation::random(draws.num_draws(), seed::derive(base, &["permutation".into()]));
    let desc = parse_target(target)?;
    let set = table.cell_set(desc.clone())?;
    let tgt = Target::Set(desc);
    let mut records = Vec::new();
    let mut push = |family, variant, reference: Option<String>, value: f64, khat: Option<f64>| {
        records.push(ScoreRecord {
            rep: 0,
            seed: base,
            model: draws.label.clone(),
            reference,
            family,
            variant,
            target: tgt.clone(),
            value,
            khat_max: khat,
            flagged: !draws.converged() || khat.is_some_and(|k| !(k <= loco::KHAT_THRESHOLD)),
        })
    };
    let truths = CellTruths::population(&table);
    if let Ok(t) = truths.weighted(&table, &set) {
        let est = aggregate(&draws, &table, &set)?;
        push(Family::Se, Variant::TruthDirect, None, se_direct(&est, t), None);
        push(Family::Crps, Variant::TruthDirect, None, crps_draws(&est, t, &perm)?, None);
        push(Family::Se, Variant::TruthCellwise, None, set_se(&draws, &table, &set, &truths)?, None);
        push(Family::Crps, Variant::TruthCellwise, None, crps_cellwise(&draws, &table, &set, &truths, &perm)?, None);
    }
    let psis_c = psis(&draws, &table, seed::derive(base, &["psis".into(), draws.label.as_str().into()]))?;
    if let Some(p) = diag_path {
        psis_c.write_diagnostics(fs::File::create(p)?)?;
    }
    if let Ok(proxy) = sample_proxy_truths(&table, &set) {
        let k = psis_c.khat_max(&set);
        push(Family::Se, Variant::SampleProxy, None, set_se(&draws, &table, &set, &proxy)?, None);
        push(Family::Crps, Variant::SampleProxy, None, crps_cellwise(&draws, &table, &set, &proxy, &perm)?, None);
        push(Family::Se, Variant::PsisLoco, None, loco::psis_loco_se(&draws, &psis_c, &table, &set, &proxy)?, k);
        push(Family::Crps, Variant::PsisLoco, None, loco::psis_loco_crps(&draws, &psis_c, &table, &set, &proxy, &perm)?, k);
    }
    if let Some(rp) = reference {
        let rd = CellProbDraws::load_csv(label_of(rp), rp)?;
        let psis_r = psis(&rd, &table, seed::derive(base, &["psis".into(), rd.label.as_str().into()]))?;
        let pair = ReferencePair::new(
            ModelFit::new(&draws, Some(&psis_c)),
            ModelFit::new(&rd, Some(&psis_r)),
            &table,
            &perm,
        )?;
        let name = Some(rd.label.clone());
        push(Family::Se, Variant::ReferenceFull, name.clone(), ref_se(&pair, &set, RefForm::Full)?, None);
        push(Family::CrpsRef, Variant::ReferenceFull, name.clone(), ref_crps(&pair, &set, RefForm::Full)?, None);
        if table.unobserved_in(&set).is_empty() {
            push(Family::Se, Variant::Reference, name.clone(), ref_se(&pair, &set, RefForm::Psis)?, None);
            push(Family::CrpsRef, Variant::Reference, name, ref_crps(&pair, &set, RefForm::Psis)?, None);
        }
    }
    match out {
        Some(p) => write_records(fs::File::create(p)?, &records, true)?,
        None => write_records(std::io::stdout().lock(), &records, true)?,
    }
    Ok(())
}

fn run_cmd(
    g: &Global,
    plan_path: Option<&Path>,
    out: Option<PathBuf>,
    reps: Option<u32>,
    brute: Option<Vec<u32>>,
    c: Option<ConstraintArg>,
    report: bool,
) -> Result<()> {
    let mut plan = match plan_path {
        Some(p) => ExperimentPlan::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentPlan::for_scale(scale_of(g), out.clone().unwrap_or_else(|| "results".into())),
    };
    if let Some(o) = out {
        plan.output_dir = o;
    }
    if let Some(s) = g.seed {
        plan.base_seed = s;
    }
    if let Some(w) = g.workers {
        plan.workers = w;
    }
    if let Some(r) = reps {
        plan.reps = r;
    }
    if let Some(b) = brute {
        plan.brute_force_reps = b;
    }
    if let Some(c) = c {
        plan.sim.sampling_constraint = constraint(c);
    }
    let summary = experiment::run(&plan)?;
    println!(
        "ran {} replications, {} already complete; scores in {}",
        summary.completed.len(),
        summary.skipped.len(),
        summary.scores_path.display()
    );
    if report {
        report_cmd(&plan.output_dir, &[])?;
    }
    Ok(())
}

fn report_cmd(dir: &Path, variants: &[String]) -> Result<()> {
    let (records, metas) = experiment::load_results(dir)?;
    let summary = experiment::summarize(&records, &metas);
    experiment::write_report(dir, &summary)?;
    let r = &summary.report;
    println!("{} replications, {} records ({} flagged)", r.reps, r.records, r.flagged_records);
    if let Some(f) = r.observed_fraction_mean {
        println!("observed cell fraction: mean {f:.3}");
    }
    for a in &r.agreement {
        let reference = a.reference.as_deref().map_or(String::new(), |s| format!(" ref={s}"));
        println!("{} {}{}: {:.3} (n={})", a.name, a.family, reference, a.value, a.n);
    }
    for u in &r.underestimation {
        println!("underestimation {} {}: {:.2} of {}", u.family, u.estimator, u.rate, u.cells);
    }
    if !variants.is_empty() {
        let vs: Vec<Variant> = variants
            .iter()
            .map(|v| Variant::parse(v).with_context(|| format!("unknown variant {v}")))
            .collect::<Result<_>>()?;
        let kept: Vec<ScoreRecord> =
            experiment::filter_records(&records, &vs).into_iter().cloned().collect();
        write_records(fs::File::create(dir.join("filtered.csv"))?, &kept, true)?;
        println!("{} filtered records in {}", kept.len(), dir.join("filtered.csv").display());
    }
    println!("report written to {}", dir.join("report.json").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    match cli.command {
        Command::Simulate { out, population, sample, constraint } => {
            simulate(g, &out, population, sample, constraint)
        }
        Command::Fit { table, model, out, chains, warmup, draws } => {
            fit_cmd(g, &table, &model, &out, chains, warmup, draws)
        }
        Command::Score { table, draws, reference, target, out, psis_diagnostics } => score_cmd(
            g,
            &table,
            &draws,
            reference.as_deref(),
            &target,
            out.as_deref(),
            psis_diagnostics.as_deref(),
        ),
        Command::Run { plan, out, reps, brute_reps, constraint, report } => {
            run_cmd(g, plan.as_deref(), out, reps, brute_reps, constraint, report)
        }
        Command::Report { dir, variants } => report_cmd(&dir, &variants),
    }
}
