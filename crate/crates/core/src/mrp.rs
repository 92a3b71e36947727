//! Poststratification of cell-probability draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CellProbDraws;
use crate::poststrat::{CellSet, CellSetDescriptor, PostStratTable};

/// Draws of a population or subpopulation mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateDraws {
    pub draws: Vec<f64>,
    pub target: CellSetDescriptor,
    pub label: String,
}

/// `phi_b = sum_s N_s p_s^b / sum_s N_s` for each draw `b`.
pub fn aggregate(
    draws: &CellProbDraws,
    table: &PostStratTable,
    set: &CellSet,
) -> Result<EstimateDraws> {
    let weight = table.set_weight(set);
    if set.is_empty() || weight <= 0.0 {
        return Err(Error::EmptySet);
    }
    if draws.num_cells() != table.len() {
        return Err(Error::LengthMismatch { expected: table.len(), got: draws.num_cells() });
    }
    let n: Vec<f64> = set.members.iter().map(|&s| table.cells[s].pop_count as f64).collect();
    let out = (0..draws.num_draws())
        .map(|b| {
            let row = draws.row(b);
            set.members.iter().zip(&n).map(|(&s, w)| w * row[s]).sum::<f64>() / weight
        })
        .collect();
    Ok(EstimateDraws { draws: out, target: set.descriptor.clone(), label: draws.label.clone() })
}

/// Posterior mean of the estimate.
pub fn point_estimate(est: &EstimateDraws) -> f64 {
    est.draws.iter().sum::<f64>() / est.draws.len() as f64
}

/// Population-weighted mean of per-cell values over `set`.
pub fn weighted_mean(values: &[f64], table: &PostStratTable, set: &CellSet) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &s in &set.members {
        let w = table.cells[s].pop_count as f64;
        num += w * values[s];
        den += w;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poststrat::Cell;
    use proptest::prelude::*;

    fn table(counts: &[u64]) -> PostStratTable {
        let cells = counts
            .iter()
            .enumerate()
            .map(|(j, &n)| Cell {
                id: j,
                levels: vec![j / 2, j % 2],
                pop_count: n,
                true_prob: Some(0.5),
                n: 1,
                y: 0,
            })
            .collect();
        PostStratTable::from_cells(2, counts.len().div_ceil(2).max(2), cells).unwrap()
    }

    #[test]
    fn two_cell_arithmetic() {
        let t = table(&[1, 3]);
        let d = CellProbDraws::from_rows("m", vec![vec![1e-300, 1.0 - 1e-16]]).unwrap();
        let all = t.cell_set(CellSetDescriptor::Population).unwrap();
        let e = aggregate(&d, &t, &all).unwrap();
        assert!((e.draws[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_probs_aggregate_to_constant() {
        let t = table(&[4, 9, 2, 7]);
        let d = CellProbDraws::from_rows("m", vec![vec![0.3; 4], vec![0.6; 4]]).unwrap();
        for desc in [
            CellSetDescriptor::Population,
            CellSetDescriptor::Level { variable: 0, level: 1 },
            CellSetDescriptor::Explicit(vec![2]),
        ] {
            let s = t.cell_set(desc).unwrap();
            let e = aggregate(&d, &t, &s).unwrap();
            assert!((e.draws[0] - 0.3).abs() < 1e-15 && (e.draws[1] - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn point_estimate_basics() {
        let e = EstimateDraws { draws: vec![0.2, 0.4], target: CellSetDescriptor::Population, label: "m".into() };
        assert!((point_estimate(&e) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_set_rejected() {
        let t = table(&[1, 1]);
        let d = CellProbDraws::from_rows("m", vec![vec![0.5, 0.5]]).unwrap();
        let s = t.cell_set(CellSetDescriptor::Explicit(vec![])).unwrap();
        assert!(matches!(aggregate(&d, &t, &s), Err(Error::EmptySet)));
    }

    proptest! {
        #[test]
        fn convex_and_additive(
            counts in proptest::collection::vec(1u64..50, 4),
            rows in proptest::collection::vec(proptest::collection::vec(0.001f64..0.999, 4), 1..6),
        ) {
            let t = table(&counts);
            let d = CellProbDraws::from_rows("m", rows.clone()).unwrap();
            let all = t.cell_set(CellSetDescriptor::Population).unwrap();
            let a = t.cell_set(CellSetDescriptor::Explicit(vec![0, 1])).unwrap();
            let b = t.cell_set(CellSetDescriptor::Explicit(vec![2, 3])).unwrap();
            let (na, nb) = (t.set_weight(&a), t.set_weight(&b));
            let ea = aggregate(&d, &t, &a).unwrap();
            let eb = aggregate(&d, &t, &b).unwrap();
            let e = aggregate(&d, &t, &all).unwrap();
            for (i, r) in rows.iter().enumerate() {
                let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(e.draws[i] >= lo - 1e-15 && e.draws[i] <= hi + 1e-15);
                let combined = (na * ea.draws[i] + nb * eb.draws[i]) / (na + nb);
                prop_assert!((combined - e.draws[i]).abs() < 1e-14);
            }
            let means = d.cell_means();
            prop_assert!((point_estimate(&e) - weighted_mean(&means, &t, &all)).abs() < 1e-14);
        }
    }
}
