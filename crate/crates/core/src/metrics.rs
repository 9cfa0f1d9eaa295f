//! Error metrics for count-scale predictions against known tables.
//!
//! * subpopulation errors per `(geolocation, race)`: absolute, relative, and
//!   per race the mean absolute deviation and statewide error;
//! * cellwise ℓ1, ℓ2 and negative log-likelihood per geolocation and region;
//! * cumulative miscalibration curves and the Kuiper statistic.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::race::{self, Race, RaceVec, N_RACES};
use crate::table::{ContingencyTable, PredictionTable};

/// Floor applied to predicted probabilities inside the log-likelihood.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("truth and prediction do not share axis labels")]
    LabelMismatch,
    #[error("no occupied cells to evaluate")]
    EmptySupport,
    #[error("no prediction for occupied cell ({surname}, {geo})")]
    MissingPrediction { surname: String, geo: String },
}

/// Sign convention for signed errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `m − x`: positive means overestimate.
    #[default]
    EstimateMinusTruth,
    /// `x − m`.
    TruthMinusEstimate,
}

impl Orientation {
    #[inline]
    pub fn signed(self, truth: f64, estimate: f64) -> f64 {
        match self {
            Orientation::EstimateMinusTruth => estimate - truth,
            Orientation::TruthMinusEstimate => truth - estimate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubpopEntry {
    pub geo: usize,
    pub race: Race,
    pub truth: f64,
    pub estimate: f64,
    pub error: f64,
    /// `None` where the true count is zero.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub race: Race,
    pub truth: f64,
    pub estimate: f64,
    /// Statewide signed error.
    pub average_error: f64,
    pub relative: Option<f64>,
    /// `Σ_g |x_{+gr} − m_{+gr}|`.
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopReport {
    pub orientation: Orientation,
    pub entries: Vec<SubpopEntry>,
    pub by_race: Vec<RaceSummary>,
}

impl SubpopReport {
    /// Mean of `|error|` over all `(geolocation, race)` entries.
    pub fn mean_absolute_error(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.error.abs()).sum::<f64>() / self.entries.len() as f64
    }

    /// Largest statewide relative error over races with positive truth.
    pub fn max_statewide_relative_error(&self) -> f64 {
        self.by_race.iter().filter_map(|s| s.relative).map(f64::abs).fold(0.0, f64::max)
    }
}

fn relative(error: f64, truth: f64) -> Option<f64> {
    (truth != 0.0).then(|| error / truth)
}

pub fn subpop_report(
    truth: &ContingencyTable,
    pred: &PredictionTable,
    orientation: Orientation,
) -> Result<SubpopReport, MetricsError> {
    if !truth.same_labels(pred) {
        return Err(MetricsError::LabelMismatch);
    }
    let x = truth.geo_race_margin();
    let m = pred.geo_race_margin();
    let mut entries = Vec::with_capacity(x.len() * N_RACES);
    let mut mad = [0.0; N_RACES];
    for (g, (xg, mg)) in x.iter().zip(&m).enumerate() {
        for race in Race::ALL {
            let r = race.index();
            let error = orientation.signed(xg[r], mg[r]);
            mad[r] += (xg[r] - mg[r]).abs();
            entries.push(SubpopEntry { geo: g, race, truth: xg[r], estimate: mg[r], error, relative: relative(error, xg[r]) });
        }
    }
    let xs = truth.race_margin();
    let ms = pred.race_margin();
    let by_race = Race::ALL
        .iter()
        .map(|&race| {
            let r = race.index();
            let average_error = orientation.signed(xs[r], ms[r]);
            RaceSummary {
                race,
                truth: xs[r],
                estimate: ms[r],
                average_error,
                relative: relative(average_error, xs[r]),
                mad: mad[r],
            }
        })
        .collect();
    Ok(SubpopReport { orientation, entries, by_race })
}

/// ℓ1, ℓ2 and negative log-likelihood normalized by population; `None` for
/// groups with zero population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellwiseEntry {
    pub population: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct CellwiseSums {
    population: f64,
    l1: f64,
    l2: f64,
    nll: f64,
}

impl CellwiseSums {
    fn add(&mut self, other: &CellwiseSums) {
        self.population += other.population;
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.nll += other.nll;
    }

    fn entry(&self) -> CellwiseEntry {
        let norm = |v: f64| (self.population > 0.0).then(|| v / self.population);
        CellwiseEntry { population: self.population, l1: norm(self.l1), l2: norm(self.l2), nll: norm(self.nll) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellwiseReport {
    /// Indexed by geolocation.
    pub by_geo: Vec<CellwiseEntry>,
    /// Keyed by region name; geolocations without a region are grouped
    /// under [`CellwiseReport::UNASSIGNED`].
    pub by_region: BTreeMap<String, CellwiseEntry>,
    pub overall: CellwiseEntry,
}

impl CellwiseReport {
    pub const UNASSIGNED: &'static str = "(unassigned)";
}

/// Per-cell contributions `(Σ_r |x − m|, (Σ_r (x − m)²)^½, −Σ_r x log p̂)`
/// where `p̂ = m_{sgr} / m_{sg+}` floored at [`NLL_FLOOR`].
pub fn cell_errors(x: &RaceVec, m: &RaceVec) -> (f64, f64, f64) {
    let mut l1 = 0.0;
    let mut sq = 0.0;
    for r in 0..N_RACES {
        let d = x[r] - m[r];
        l1 += d.abs();
        sq += d * d;
    }
    let m_total = race::sum(m);
    let mut nll = 0.0;
    for r in 0..N_RACES {
        if x[r] > 0.0 {
            let p = if m_total > 0.0 { m[r] / m_total } else { 0.0 };
            nll -= x[r] * p.max(NLL_FLOOR).ln();
        }
    }
    (l1, sq.sqrt(), nll)
}

pub fn cellwise_report(
    truth: &ContingencyTable,
    pred: &PredictionTable,
    region_map: Option<&BTreeMap<String, String>>,
) -> Result<CellwiseReport, MetricsError> {
    if !truth.same_labels(pred) {
        return Err(MetricsError::LabelMismatch);
    }
    let labels = truth.labels();
    let zero = [0.0; N_RACES];
    let mut sums = vec![CellwiseSums::default(); labels.n_geolocations()];

    // Merge-walk the two sorted cell lists.
    let (xc, mc) = (truth.cells(), pred.cells());
    let (mut i, mut j) = (0, 0);
    while i < xc.len() || j < mc.len() {
        let (g, x, m) = match (xc.get(i), mc.get(j)) {
            (Some(a), Some(b)) if a.key() == b.key() => {
                i += 1;
                j += 1;
                (a.geo, &a.counts, &b.counts)
            }
            (Some(a), Some(b)) if a.key() < b.key() => {
                i += 1;
                (a.geo, &a.counts, &zero)
            }
            (Some(a), None) => {
                i += 1;
                (a.geo, &a.counts, &zero)
            }
            (_, Some(b)) => {
                j += 1;
                (b.geo, &zero, &b.counts)
            }
            (None, None) => unreachable!(),
        };
        let (l1, l2, nll) = cell_errors(x, m);
        let s = &mut sums[g];
        s.population += race::sum(x);
        s.l1 += l1;
        s.l2 += l2;
        s.nll += nll;
    }

    let mut overall = CellwiseSums::default();
    let mut regions: BTreeMap<String, CellwiseSums> = BTreeMap::new();
    let region_map = region_map.or(labels.regions());
    for (g, s) in sums.iter().enumerate() {
        overall.add(s);
        if let Some(map) = region_map {
            let name = map.get(labels.geolocation(g)).map(String::as_str).unwrap_or(CellwiseReport::UNASSIGNED);
            regions.entry(name.to_string()).or_default().add(s);
        }
    }
    Ok(CellwiseReport {
        by_geo: sums.iter().map(CellwiseSums::entry).collect(),
        by_region: regions.into_iter().map(|(k, v)| (k, v.entry())).collect(),
        overall: overall.entry(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Fraction of total weight up to and including this cell.
    pub cum_weight: f64,
    pub cum_miscalibration: f64,
    /// Predicted probability of the cell added at this step; `None` at the
    /// origin.
    pub predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub race: Race,
    /// Starts at the origin.
    pub points: Vec<CurvePoint>,
    pub kuiper: f64,
}

/// `max − min` of the curve values with the origin prepended.
pub fn kuiper(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Weighted cumulative miscalibration of `pred` for one race. Cells are
/// sorted by predicted probability (ties by surname, then geolocation);
/// step `k` adds `w_k (f_k − p_k) / Σ w` where `w = x_{sg+}` and `f` is the
/// observed frequency.
pub fn calibration_curve(
    truth: &ContingencyTable,
    pred: &PredictionTable,
    race: Race,
) -> Result<CalibrationCurve, MetricsError> {
    if !truth.same_labels(pred) {
        return Err(MetricsError::LabelMismatch);
    }
    let r = race.index();
    let labels = truth.labels();
    let mut rows = Vec::new();
    for c in truth.cells() {
        let w = c.total();
        if !(w > 0.0) {
            continue;
        }
        let m = pred.get(c.surname, c.geo);
        let m_total = m.map(race::sum).unwrap_or(0.0);
        let Some(m) = m.filter(|_| m_total > 0.0) else {
            return Err(MetricsError::MissingPrediction {
                surname: labels.surname(c.surname).to_string(),
                geo: labels.geolocation(c.geo).to_string(),
            });
        };
        // Predicted count on the truth's cell total; exact when the totals agree.
        let expected = m[r] * (w / m_total);
        rows.push((m[r] / m_total, c.key(), w, c.counts[r] - expected));
    }
    if rows.is_empty() {
        return Err(MetricsError::EmptySupport);
    }
    // Cell keys follow label order, which is lexicographic.
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total_w: f64 = rows.iter().map(|row| row.2).sum();
    let mut points = Vec::with_capacity(rows.len() + 1);
    points.push(CurvePoint { cum_weight: 0.0, cum_miscalibration: 0.0, predicted: None });
    let (mut cw, mut cm) = (0.0, 0.0);
    for (p, _, w, gap) in rows {
        cw += w;
        cm += gap;
        points.push(CurvePoint { cum_weight: cw / total_w, cum_miscalibration: cm / total_w, predicted: Some(p) });
    }
    let values: Vec<f64> = points.iter().map(|pt| pt.cum_miscalibration).collect();
    Ok(CalibrationCurve { race, points, kuiper: kuiper(&values) })
}

/// Curves for all six races. `Other` is computed like the rest; callers
/// that follow the five-race reporting convention can drop it.
pub fn calibration_curves(truth: &ContingencyTable, pred: &PredictionTable) -> Result<Vec<CalibrationCurve>, MetricsError> {
    Race::ALL.iter().map(|&r| calibration_curve(truth, pred, r)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per `(geolocation, race)`:
/// `geoid,race,truth,estimate,error,relative_error`.
pub fn write_subpop_csv<W: Write>(report: &SubpopReport, truth: &ContingencyTable, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["geoid", "race", "truth", "estimate", "error", "relative_error"])?;
    for e in &report.entries {
        w.write_record([
            truth.labels().geolocation(e.geo).to_string(),
            e.race.key().to_string(),
            e.truth.to_string(),
            e.estimate.to_string(),
            e.error.to_string(),
            opt(e.relative),
        ])?;
    }
    w.flush()
}

/// `level,name,population,l1,l2,nll` with levels `geo`, `region`, `overall`.
pub fn write_cellwise_csv<W: Write>(report: &CellwiseReport, truth: &ContingencyTable, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "name", "population", "l1", "l2", "nll"])?;
    let mut row = |level: &str, name: &str, e: &CellwiseEntry| {
        w.write_record([level, name, &e.population.to_string(), &opt(e.l1), &opt(e.l2), &opt(e.nll)])
    };
    for (g, e) in report.by_geo.iter().enumerate() {
        row("geo", truth.labels().geolocation(g), e)?;
    }
    for (name, e) in &report.by_region {
        row("region", name, e)?;
    }
    row("overall", "all", &report.overall)?;
    w.flush()
}

/// `race,step,cum_weight,cum_miscalibration,predicted` for plotting.
pub fn write_curves_csv<W: Write>(curves: &[CalibrationCurve], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["race", "step", "cum_weight", "cum_miscalibration", "predicted"])?;
    for c in curves {
        for (k, p) in c.points.iter().enumerate() {
            w.write_record([
                c.race.key().to_string(),
                k.to_string(),
                p.cum_weight.to_string(),
                p.cum_miscalibration.to_string(),
                opt(p.predicted),
            ])?;
        }
    }
    w.flush()
}

/// `race,kuiper,reported` where `reported` is false for `Other`, which the
/// five-race tables leave out.
pub fn write_kuiper_csv<W: Write>(curves: &[CalibrationCurve], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["race", "kuiper", "reported"])?;
    for c in curves {
        w.write_record([c.race.key(), &c.kuiper.to_string(), if c.race == Race::Other { "false" } else { "true" }])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bisg::{fit_factors, weighted_predictions_on, Method};
    use crate::table::fixtures::f1;
    use crate::table::{build_table, AxisLabels, ThreeWayTable};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn two(a: f64, b: f64) -> RaceVec {
        [a, b, 0.0, 0.0, 0.0, 0.0]
    }

    fn single_geo_black(truth: f64, est: f64) -> (ContingencyTable, PredictionTable) {
        let labels = Arc::new(AxisLabels::new(vec!["ALL".into()], vec!["FL".into()]).unwrap());
        let mut x = [0.0; 6];
        x[Race::Black.index()] = truth;
        let mut m = [0.0; 6];
        m[Race::Black.index()] = est;
        (
            ThreeWayTable::from_cells(labels.clone(), [(0, 0, x)]).unwrap(),
            ThreeWayTable::from_cells(labels, [(0, 0, m)]).unwrap(),
        )
    }

    #[test]
    fn statewide_black_error() {
        let (x, m) = single_geo_black(1_762_643.0, 1_725_555.0);
        let rep = subpop_report(&x, &m, Orientation::default()).unwrap();
        let black = rep.by_race[Race::Black.index()];
        assert_eq!(black.average_error, -37_088.0);
        assert!((black.average_error - -37_087.0).abs() <= 1.0);
        assert!((black.relative.unwrap() * 100.0 - -2.10).abs() <= 0.01);
        assert_eq!(black.mad, 37_088.0);
        let flipped = subpop_report(&x, &m, Orientation::TruthMinusEstimate).unwrap();
        assert_eq!(flipped.by_race[2].average_error, 37_088.0);
        assert_eq!(flipped.by_race[2].mad, 37_088.0);
    }

    #[test]
    fn f1_weighted_estimator_error() {
        let t = f1();
        let m = weighted_predictions_on(&fit_factors(&t).unwrap(), &t, Method::Bisg, None).table;
        let rep = subpop_report(&t, &m, Orientation::default()).unwrap();
        let e = rep.entries.iter().find(|e| e.geo == 0 && e.race == Race::Aian).unwrap();
        assert!((e.estimate - 11.592).abs() < 1e-3);
        assert!((e.error - 0.592).abs() < 1e-3);
        assert!((e.relative.unwrap() - 0.054).abs() < 1e-3);
        // Races with no truth have no relative error.
        assert!(rep.entries.iter().filter(|e| e.race == Race::White).all(|e| e.relative.is_none()));
    }

    #[test]
    fn perfect_prediction_has_no_error() {
        let t = f1();
        let rep = subpop_report(&t, &t, Orientation::default()).unwrap();
        assert!(rep.entries.iter().all(|e| e.error == 0.0));
        assert!(rep.by_race.iter().all(|s| s.mad == 0.0 && s.average_error == 0.0));
        let cw = cellwise_report(&t, &t, None).unwrap();
        assert!(cw.by_geo.iter().all(|e| e.l1 == Some(0.0) && e.l2 == Some(0.0)));
    }

    #[test]
    fn label_mismatch() {
        let t = f1();
        let other = build_table(&[("zz", "g1", two(1.0, 1.0))]).unwrap();
        assert_eq!(subpop_report(&t, &other, Orientation::default()), Err(MetricsError::LabelMismatch));
        assert_eq!(cellwise_report(&t, &other, None), Err(MetricsError::LabelMismatch));
        assert_eq!(calibration_curve(&t, &other, Race::Aian), Err(MetricsError::LabelMismatch));
    }

    #[test]
    fn f1_cellwise_l1_by_summation() {
        let t = f1();
        let m = weighted_predictions_on(&fit_factors(&t).unwrap(), &t, Method::Bisg, None).table;
        let cw = cellwise_report(&t, &m, None).unwrap();
        // Brute force over the two g1 cells.
        let mut expect = 0.0;
        for s in ["s1", "s2"] {
            let x = t.get_by_label(s, "g1").unwrap();
            let y = m.get_by_label(s, "g1").unwrap();
            expect += (0..6).map(|r| (x[r] - y[r]).abs()).sum::<f64>();
        }
        assert!((cw.by_geo[0].l1.unwrap() - expect / 20.0).abs() < 1e-14);
        assert!(cw.by_geo[0].l1.unwrap() > 0.0);
        assert!(cw.by_geo[0].l2.unwrap() <= cw.by_geo[0].l1.unwrap());
    }

    #[test]
    fn nll_uses_conditional_probability() {
        let x = build_table(&[("a", "x", two(1.0, 0.0))]).unwrap();
        let m = ThreeWayTable::from_cells(x.shared_labels(), [(0, 0, two(0.5, 0.5))]).unwrap();
        let cw = cellwise_report(&x, &m, None).unwrap();
        assert!((cw.by_geo[0].nll.unwrap() - 2f64.ln()).abs() < 1e-15);
        // Scale of the prediction does not matter.
        let m4 = ThreeWayTable::from_cells(x.shared_labels(), [(0, 0, two(2.0, 2.0))]).unwrap();
        assert_eq!(cellwise_report(&x, &m4, None).unwrap().by_geo[0].nll, cw.by_geo[0].nll);
        // Zero predicted probability is floored.
        let m0 = ThreeWayTable::from_cells(x.shared_labels(), [(0, 0, two(0.0, 1.0))]).unwrap();
        let nll = cellwise_report(&x, &m0, None).unwrap().by_geo[0].nll.unwrap();
        assert!((nll - -(NLL_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_population_geo_is_null_and_regions_aggregate() {
        let t = build_table(&[("a", "g1", two(3.0, 1.0)), ("b", "g2", [0.0; 6]), ("b", "g3", two(1.0, 1.0))]).unwrap();
        let m = t.map_counts(|c| {
            let n = c.total();
            two(n / 2.0, n / 2.0)
        });
        let regions = BTreeMap::from([("g1".to_string(), "North".to_string()), ("g2".to_string(), "North".to_string())]);
        let cw = cellwise_report(&t, &m, Some(&regions)).unwrap();
        assert_eq!(cw.by_geo[1].l1, None);
        assert_eq!(cw.by_geo[2].l1, Some(0.0));
        let north = cw.by_region["North"];
        assert_eq!(north.population, 4.0);
        assert_eq!(north.l1, Some((1.0 + 1.0) / 4.0));
        assert_eq!(cw.by_region[CellwiseReport::UNASSIGNED].population, 2.0);
        assert_eq!(cw.overall.l1, Some(2.0 / 6.0));
    }

    #[test]
    fn kuiper_examples() {
        assert_eq!(kuiper(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(kuiper(&[0.1, 0.0]), 0.1);
        assert!((kuiper(&[-0.05, 0.02]) - 0.07).abs() < 1e-15);
    }

    #[test]
    fn two_cell_curve() {
        // Equal weights; predicted (0.2, 0.8), observed (0.4, 0.6).
        let x = build_table(&[("a", "x", two(2.0, 3.0)), ("b", "x", two(3.0, 2.0))]).unwrap();
        let m = ThreeWayTable::from_cells(x.shared_labels(), [(0, 0, two(1.0, 4.0)), (1, 0, two(4.0, 1.0))]).unwrap();
        let curve = calibration_curve(&x, &m, Race::Aian).unwrap();
        let vals: Vec<f64> = curve.points.iter().map(|p| p.cum_miscalibration).collect();
        assert_eq!(vals.len(), 3);
        assert_eq!(vals[0], 0.0);
        assert!((vals[1] - 0.1).abs() < 1e-15);
        assert!(vals[2].abs() < 1e-15);
        assert_eq!(curve.kuiper, 0.1);
        assert_eq!(curve.points[2].cum_weight, 1.0);
    }

    #[test]
    fn perfect_calibration_is_flat() {
        let t = f1();
        for c in calibration_curves(&t, &t).unwrap() {
            assert!(c.points.iter().all(|p| p.cum_miscalibration == 0.0));
            assert_eq!(c.kuiper, 0.0);
        }
    }

    #[test]
    fn curve_errors() {
        let x = build_table(&[("a", "x", two(1.0, 0.0)), ("b", "x", two(1.0, 0.0))]).unwrap();
        let m = ThreeWayTable::from_cells(x.shared_labels(), [(0, 0, two(1.0, 0.0))]).unwrap();
        assert!(matches!(calibration_curve(&x, &m, Race::Aian), Err(MetricsError::MissingPrediction { .. })));
        let empty = build_table(&[("a", "x", [0.0; 6])]).unwrap();
        assert_eq!(calibration_curve(&empty, &empty, Race::Aian), Err(MetricsError::EmptySupport));
    }

    #[test]
    fn ties_break_by_label() {
        let x = build_table(&[("b", "x", two(1.0, 0.0)), ("a", "x", two(0.0, 1.0))]).unwrap();
        let m = x.map_counts(|_| two(0.5, 0.5));
        let curve = calibration_curve(&x, &m, Race::Aian).unwrap();
        // Surname `a` comes first: observed 0, predicted 0.5.
        assert!((curve.points[1].cum_miscalibration - -0.25).abs() < 1e-15);
        assert!((curve.kuiper - 0.25).abs() < 1e-15);
    }

    #[test]
    fn writers_produce_headers() {
        let t = f1();
        let rep = subpop_report(&t, &t, Orientation::default()).unwrap();
        let mut buf = Vec::new();
        write_subpop_csv(&rep, &t, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("geoid,race,truth,estimate,error,relative_error\ng1,aian,11,11,0,0\n"));
        let mut buf = Vec::new();
        write_cellwise_csv(&cellwise_report(&t, &t, None).unwrap(), &t, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().last().unwrap().starts_with("overall,all,40,0,0,"));
        let mut buf = Vec::new();
        write_kuiper_csv(&calibration_curves(&t, &t).unwrap(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("other,0,false"));
    }

    fn arb_pair() -> impl Strategy<Value = Vec<(u8, u8, RaceVec, RaceVec)>> {
        prop::collection::vec(
            (0u8..5, 0u8..3, prop::array::uniform6(0.0f64..10.0), prop::array::uniform6(0.0f64..10.0)),
            1..20,
        )
    }

    fn tables(rows: &[(u8, u8, RaceVec, RaceVec)]) -> (ContingencyTable, PredictionTable) {
        let recs: Vec<_> = rows.iter().map(|(s, g, x, _)| (format!("s{s}"), format!("g{g}"), *x)).collect();
        let x = build_table(&recs).unwrap();
        let m = ThreeWayTable::from_labeled_cells(
            x.shared_labels(),
            recs.iter().zip(rows).map(|(r, row)| (r.0.as_str(), r.1.as_str(), row.3)),
        )
        .unwrap();
        (x, m)
    }

    proptest! {
        #[test]
        fn metric_invariants(rows in arb_pair()) {
            let (x, m) = tables(&rows);
            let rep = subpop_report(&x, &m, Orientation::default()).unwrap();
            let flipped = subpop_report(&x, &m, Orientation::TruthMinusEstimate).unwrap();
            for (a, b) in rep.entries.iter().zip(&flipped.entries) {
                prop_assert_eq!(a.error, -b.error);
            }
            for (s, f) in rep.by_race.iter().zip(&flipped.by_race) {
                prop_assert!(s.mad + 1e-9 >= s.average_error.abs());
                prop_assert_eq!(s.mad, f.mad);
                prop_assert_eq!(s.average_error, -f.average_error);
            }
            for c in x.cells() {
                let y = m.get(c.surname, c.geo).copied().unwrap_or([0.0; 6]);
                let (l1, l2, _) = cell_errors(&c.counts, &y);
                prop_assert!(l2 <= l1 + 1e-12);
            }
            let cw = cellwise_report(&x, &m, None).unwrap();
            for e in &cw.by_geo {
                if let (Some(l1), Some(l2)) = (e.l1, e.l2) {
                    prop_assert!(l1 >= 0.0 && l2 >= 0.0);
                }
            }
        }

        #[test]
        fn kuiper_is_range_of_curve(rows in arb_pair()) {
            let (x, _) = tables(&rows);
            let m = x.map_counts(|c| c.counts.map(|v| v + 0.5));
            if let Ok(curve) = calibration_curve(&x, &m, Race::Api) {
                let vals: Vec<f64> = curve.points.iter().map(|p| p.cum_miscalibration).collect();
                let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
                let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
                prop_assert!((curve.kuiper - (hi - lo)).abs() <= 1e-12);
                prop_assert_eq!(vals[0], 0.0);

                // Zero-weight cells do not change the statistic.
                let mut recs: Vec<_> = x.cells().iter().map(|c| (x.labels().surname(c.surname).to_string(), x.labels().geolocation(c.geo).to_string(), c.counts)).collect();
                recs.push(("zzz".into(), x.labels().geolocation(0).to_string(), [0.0; 6]));
                recs.push(("AAA".into(), x.labels().geolocation(0).to_string(), [0.0; 6]));
                let x2 = build_table(&recs).unwrap();
                let m2 = x2.map_counts(|c| c.counts.map(|v| v + 0.5));
                let c2 = calibration_curve(&x2, &m2, Race::Api).unwrap();
                prop_assert!((c2.kuiper - curve.kuiper).abs() <= 1e-12);
            }
        }
    }
}
