//! The published tables are internally consistent once rounding of their
//! inputs is taken into account. The exact-arithmetic checks live in the
//! acceptance suite.

use lvlm_fairness::metrics::improvement_pct;

const RECALLS: &str = include_str!("fixtures/published/recall_disparity.csv");
const MITIGATION: &str = include_str!("fixtures/published/mitigation.csv");

/// Half a unit in the fourth decimal.
const HALF_ULP4: f64 = 5e-5;

fn rows(text: &str) -> Vec<csv::StringRecord> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.records().map(Result::unwrap).collect()
}

fn col(reader_text: &str, name: &str) -> usize {
    let mut reader = csv::Reader::from_reader(reader_text.as_bytes());
    reader.headers().unwrap().iter().position(|h| h == name).unwrap()
}

#[test]
fn every_gd_lies_within_the_rounding_box_of_its_recalls() {
    let (a, b, g) = (col(RECALLS, "r_first"), col(RECALLS, "r_second"), col(RECALLS, "gd"));
    let rows = rows(RECALLS);
    assert_eq!(rows.len(), 60);
    for r in &rows {
        let (r1, r2, gd): (f64, f64, f64) = (r[a].parse().unwrap(), r[b].parse().unwrap(), r[g].parse().unwrap());
        // Each recall moves at most half a unit; the published GD was itself
        // rounded once more.
        assert!((gd - (r1 - r2)).abs() <= 3.0 * HALF_ULP4 + 1e-12, "{r:?}");
    }
}

#[test]
fn every_improvement_is_reachable_from_unrounded_inputs() {
    let (raw, after, pct) = (
        col(MITIGATION, "raw"),
        col(MITIGATION, "with_rationale"),
        col(MITIGATION, "improvement_pct"),
    );
    let rows = rows(MITIGATION);
    assert_eq!(rows.len(), 27);
    for r in &rows {
        let (x, y, published): (f64, f64, f64) = (
            r[raw].parse().unwrap(),
            r[after].parse().unwrap(),
            r[pct].parse().unwrap(),
        );
        // The ratio is monotone in each input, so the extremes sit on corners.
        let corners: Vec<f64> = [x - HALF_ULP4, x + HALF_ULP4]
            .iter()
            .flat_map(|&rx| [y - HALF_ULP4, y + HALF_ULP4].map(|ry| improvement_pct(rx, ry).unwrap()))
            .collect();
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            published >= lo - 0.005 && published <= hi + 0.005,
            "{r:?}: [{lo}, {hi}]"
        );
    }
}
