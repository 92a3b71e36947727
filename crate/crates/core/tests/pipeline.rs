use approx::assert_abs_diff_eq;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use mrp_score::loco::{brute_force_loco, log_ratios, psis, psis_loco_se, psis_smooth, LocoCellPredictions};
use mrp_score::model::{fit, CellProbDraws, McmcConfig, ModelSpec};
use mrp_score::mrp::{aggregate, point_estimate};
use mrp_score::poststrat::{build_table, Cell, CellSetDescriptor, PostStratTable};
use mrp_score::scoring::{set_se, CellTruths, Family, ScoreRecord, Target, Variant};
use mrp_score::scoring::{read_records, write_records};
use mrp_score::seed;
use mrp_score::simulation::{draw_sample, generate_population, SamplingConstraint, SimConfig};

fn small_mcmc(seed: u64) -> McmcConfig {
    McmcConfig { chains: 4, warmup: 600, draws: 1000, thin: 2, refit_warmup: 300, ..McmcConfig::default() }.with_seed(seed)
}

#[test]
fn simulated_table_round_trips_through_csv() {
    let mut cfg = SimConfig::paper_design(2_000, 300, 5);
    cfg.sampling_constraint = SamplingConstraint::AllLevelsObserved;
    let pop = generate_population(&cfg).unwrap();
    let sample = draw_sample(&pop, &cfg).unwrap();
    let table = build_table(&pop, &sample).unwrap();
    assert_eq!(table.total, 2_000);
    assert_eq!(table.cells.iter().map(|c| c.n as usize).sum::<usize>(), 300);
    let positives: f64 = table.cells.iter().map(|c| c.true_prob.unwrap() * c.pop_count as f64).sum();
    assert_abs_diff_eq!(positives / 2_000.0, pop.mean_outcome(), epsilon = 1e-12);

    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let back = PostStratTable::read_csv(buf.as_slice(), Some(5)).unwrap();
    assert_eq!(back, table);
}

#[test]
fn draws_and_records_round_trip() {
    let mut rng = seed::rng(3);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..7).map(|_| rng.gen::<f64>()).collect()).collect();
    let d = CellProbDraws::from_rows("m", rows).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let back = CellProbDraws::read_csv("m", buf.as_slice()).unwrap();
    assert_eq!((back.num_draws(), back.num_cells()), (50, 7));
    for b in 0..50 {
        assert_eq!(back.row(b), d.row(b));
    }

    let records = vec![
        ScoreRecord {
            rep: 3,
            seed: 99,
            model: "bias".into(),
            reference: None,
            family: Family::Crps,
            variant: Variant::PsisLoco,
            target: Target::Set(CellSetDescriptor::Level { variable: 2, level: 4 }),
            value: -0.012345678901234567,
            khat_max: Some(0.81),
            flagged: true,
        },
        ScoreRecord {
            rep: 0,
            seed: 1,
            model: "full".into(),
            reference: Some("precision".into()),
            family: Family::CrpsRef,
            variant: Variant::Combined,
            target: Target::LevelAverage { variable: 0 },
            value: 1.0 / 3.0,
            khat_max: None,
            flagged: false,
        },
    ];
    let mut buf = Vec::new();
    write_records(&mut buf, &records, true).unwrap();
    assert_eq!(read_records(buf.as_slice()).unwrap(), records);
}

#[test]
fn importance_weights_recover_conjugate_leave_out_mean() {
    // Posterior Beta(2 + y, 3 + n - y); removing the cell's data leaves Beta(2, 3).
    let (n, y) = (4u32, 1u32);
    let post = Beta::new(2.0 + y as f64, 3.0 + (n - y) as f64).unwrap();
    let mut rng = seed::rng(11);
    let rows: Vec<Vec<f64>> = (0..4000).map(|_| vec![post.sample(&mut rng)]).collect();
    let d = CellProbDraws::from_rows("m", rows).unwrap();
    let cells = vec![Cell { id: 0, levels: vec![0], pop_count: 100, true_prob: Some(0.0), n, y }];
    let table = PostStratTable::from_cells(1, 1, cells).unwrap();
    let p = psis(&d, &table, 12).unwrap();
    assert!(p.cell(0).unwrap().khat.is_finite());
    let set = table.cell_set(CellSetDescriptor::Population).unwrap();
    let zero = CellTruths::from_values(&[0.0]);
    let loo_mean = psis_loco_se(&d, &p, &table, &set, &zero).unwrap().sqrt();
    assert_abs_diff_eq!(loo_mean, 0.4, epsilon = 0.03);
    // The full-data posterior mean sits well away from it.
    assert_abs_diff_eq!(point_estimate(&aggregate(&d, &table, &set).unwrap()), 1.0 / 3.0, epsilon = 0.01);
}

#[test]
fn heavy_tailed_ratios_are_flagged() {
    // Against Beta(22, 43) draws the ratios to Beta(2, 3) have tail index 40/43.
    let post = Beta::new(22.0, 43.0).unwrap();
    let mut rng = seed::rng(13);
    let rows: Vec<Vec<f64>> = (0..4000).map(|_| vec![post.sample(&mut rng)]).collect();
    let d = CellProbDraws::from_rows("m", rows).unwrap();
    let cells = vec![Cell { id: 0, levels: vec![0], pop_count: 100, true_prob: Some(0.0), n: 60, y: 20 }];
    let table = PostStratTable::from_cells(1, 1, cells).unwrap();
    let p = psis(&d, &table, 14).unwrap();
    assert!(p.cell(0).unwrap().flagged(), "khat {}", p.cell(0).unwrap().khat);
}

#[test]
fn psis_tracks_refits_on_a_small_table() {
    let cells = (0..6)
        .map(|j| Cell {
            id: j,
            levels: vec![j],
            pop_count: 200,
            true_prob: Some(0.2 + 0.1 * j as f64),
            n: 8,
            y: 1 + j as u32,
        })
        .collect();
    let table = PostStratTable::from_cells(1, 6, cells).unwrap();
    let spec = ModelSpec::new("m", vec![0]);
    let mcmc = small_mcmc(21);
    let d = fit(&spec, &table, &mcmc).unwrap();
    let p = psis(&d, &table, 22).unwrap();
    let brute = brute_force_loco(&spec, &table, &mcmc, &d).unwrap();
    let is = LocoCellPredictions::from_psis(&d, &p);
    let mut compared = 0;
    for j in 0..6 {
        if p.cell(j).unwrap().flagged() {
            continue;
        }
        compared += 1;
        let a = mrp_score::stats::mean(brute.cell(j).unwrap());
        let b = mrp_score::stats::mean(is.cell(j).unwrap());
        assert_abs_diff_eq!(a, b, epsilon = 0.05);
    }
    assert!(compared >= 3);
    // Leaving a cell out pulls its prediction toward the others.
    let full = d.cell_means();
    assert!(mrp_score::stats::mean(brute.cell(0).unwrap()) > full[0]);
    assert!(mrp_score::stats::mean(brute.cell(5).unwrap()) < full[5]);
}

#[test]
fn smoothing_preserves_the_order_of_ratios() {
    let mut rng = seed::rng(8);
    let probs: Vec<f64> = (0..1000).map(|_| 0.5 + 0.2 * rng.sample::<f64, _>(StandardNormal)).map(|p: f64| p.clamp(0.01, 0.99)).collect();
    let lr = log_ratios(&probs, 30, 4);
    let s = psis_smooth(&lr);
    let mut order: Vec<usize> = (0..lr.len()).collect();
    order.sort_by(|&a, &b| lr[a].total_cmp(&lr[b]));
    for w in order.windows(2) {
        assert!(s.weights[w[0]] <= s.weights[w[1]]);
    }
    assert!(s.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
}

#[test]
fn truth_scores_on_a_fitted_model() {
    let mut cfg = SimConfig::paper_design(2_000, 300, 9);
    cfg.sampling_constraint = SamplingConstraint::AllCellsObserved;
    let pop = generate_population(&cfg).unwrap();
    let table = build_table(&pop, &draw_sample(&pop, &cfg).unwrap()).unwrap();
    let truth = CellTruths::population(&table);
    let all = table.cell_set(CellSetDescriptor::Population).unwrap();
    let mcmc = McmcConfig { chains: 2, warmup: 300, draws: 400, thin: 4, ..McmcConfig::default() };
    let full = fit(&ModelSpec::named("full").unwrap(), &table, &mcmc.clone().with_seed(1)).unwrap();
    let none = fit(&ModelSpec::named("intercept").unwrap(), &table, &mcmc.with_seed(2)).unwrap();
    // Both bias covariates matter, so the intercept-only model misses the population mean.
    assert!(set_se(&full, &table, &all, &truth).unwrap() < set_se(&none, &table, &all, &truth).unwrap());
}
