//! Raking (iterative proportional fitting) of a base prediction table to a
//! known race margin `x_{++r}` and surname×geolocation margin `x_{sg+}`.
//!
//! The fitted table has the form `m_{sgr} = base_{sgr} · exp(θ_r + θ_{sg})`;
//! the log-scale parameters are accumulated during the sweeps and returned
//! alongside the table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::race::{Race, RaceVec, N_RACES};
use crate::table::{Cell, MarginSet, PredictionTable, ThreeWayTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RakingError {
    #[error("invalid raking configuration: {0}")]
    InvalidConfig(String),
    #[error("base table has a negative or non-finite entry at cell ({surname}, {geo})")]
    InvalidBase { surname: String, geo: String },
    #[error("target cell ({surname}, {geo}) is outside the base table's labels")]
    TargetOutOfRange { surname: usize, geo: usize },
    #[error("infeasible support: target {target} for cell ({surname}, {geo}) but the base has no mass there")]
    InfeasibleCell { surname: String, geo: String, target: f64 },
    #[error("infeasible support: target {target} for race {race} but the base has no mass in that race")]
    InfeasibleRace { race: Race, target: f64 },
    #[error("raking did not converge after {iterations} sweeps (margin gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },
    #[error("tables do not share axis labels")]
    LabelMismatch,
    #[error("absolute continuity violated")]
    AbsoluteContinuity,
}

/// Which margin family is scaled first within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    #[default]
    RaceFirst,
    CellFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RakingConfig {
    /// Maximum relative margin deviation accepted as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub order: SweepOrder,
}

impl Default for RakingConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 10_000, order: SweepOrder::RaceFirst }
    }
}

impl RakingConfig {
    fn validate(&self) -> Result<(), RakingError> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(RakingError::InvalidConfig(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(RakingError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RakingResult {
    pub table: PredictionTable,
    /// Race log-adjustments; `-inf` for races whose target is zero.
    pub theta_r: RaceVec,
    /// Cell log-adjustments for every cell with a positive target.
    pub theta_sg: BTreeMap<(usize, usize), f64>,
    /// Number of full sweeps performed.
    pub iterations: usize,
    pub final_margin_gap: f64,
}

/// Rakes `base` to `targets`. Cells with a zero (or absent) target and races
/// with a zero target are zeroed before iterating; everything else keeps the
/// base support.
pub fn rake(base: &PredictionTable, targets: &MarginSet, config: &RakingConfig) -> Result<RakingResult, RakingError> {
    config.validate()?;
    let labels = base.labels();
    for &(s, g) in targets.cell().keys() {
        if s >= labels.n_surnames() || g >= labels.n_geolocations() {
            return Err(RakingError::TargetOutOfRange { surname: s, geo: g });
        }
    }
    let name = |c: &Cell| (labels.surname(c.surname).to_string(), labels.geolocation(c.geo).to_string());

    let race_target = *targets.race();
    let mut work: Vec<Cell> = base.cells().to_vec();
    let mut cell_target = Vec::with_capacity(work.len());
    for c in &mut work {
        if c.counts.iter().any(|v| !v.is_finite() || *v < 0.0) {
            let (surname, geo) = name(c);
            return Err(RakingError::InvalidBase { surname, geo });
        }
        let t = targets.cell_target(c.surname, c.geo);
        if t == 0.0 {
            c.counts = [0.0; N_RACES];
        }
        for r in 0..N_RACES {
            if race_target[r] == 0.0 {
                c.counts[r] = 0.0;
            }
        }
        cell_target.push(t);
    }

    // Feasibility of the support.
    for (&(s, g), &t) in targets.cell() {
        if t > 0.0 {
            let mass = base.position(s, g).map(|i| work[i].total()).unwrap_or(0.0);
            if !(mass > 0.0) {
                return Err(RakingError::InfeasibleCell {
                    surname: labels.surname(s).to_string(),
                    geo: labels.geolocation(g).to_string(),
                    target: t,
                });
            }
        }
    }
    let race_mass = race_sums(&work);
    for r in 0..N_RACES {
        if race_target[r] > 0.0 && !(race_mass[r] > 0.0) {
            return Err(RakingError::InfeasibleRace { race: Race::ALL[r], target: race_target[r] });
        }
    }

    let mut theta_r = race_target.map(|t| if t > 0.0 { 0.0 } else { f64::NEG_INFINITY });
    let mut theta_cell = vec![0.0; work.len()];
    let mut gap = f64::INFINITY;

    for iteration in 1..=config.max_iterations {
        match config.order {
            SweepOrder::RaceFirst => {
                scale_races(&mut work, &race_target, &mut theta_r);
                scale_cells(&mut work, &cell_target, &mut theta_cell);
            }
            SweepOrder::CellFirst => {
                scale_cells(&mut work, &cell_target, &mut theta_cell);
                scale_races(&mut work, &race_target, &mut theta_r);
            }
        }
        gap = gap_of(&work, &cell_target, &race_target);
        if gap <= config.tolerance {
            let theta_sg = work
                .iter()
                .zip(&cell_target)
                .zip(&theta_cell)
                .filter(|((_, t), _)| **t > 0.0)
                .map(|((c, _), th)| (c.key(), *th))
                .collect();
            return Ok(RakingResult {
                table: ThreeWayTable::from_sorted_cells(base.shared_labels(), work),
                theta_r,
                theta_sg,
                iterations: iteration,
                final_margin_gap: gap,
            });
        }
    }
    Err(RakingError::NonConvergence { iterations: config.max_iterations, gap })
}

fn race_sums(cells: &[Cell]) -> RaceVec {
    let mut out = [0.0; N_RACES];
    for c in cells {
        for (o, v) in out.iter_mut().zip(c.counts) {
            *o += v;
        }
    }
    out
}

fn scale_races(cells: &mut [Cell], target: &RaceVec, theta: &mut RaceVec) {
    let current = race_sums(cells);
    let mut factor = [1.0; N_RACES];
    for r in 0..N_RACES {
        if target[r] > 0.0 && current[r] > 0.0 {
            factor[r] = target[r] / current[r];
            theta[r] += factor[r].ln();
        }
    }
    for c in cells {
        for (v, f) in c.counts.iter_mut().zip(factor) {
            *v *= f;
        }
    }
}

fn scale_cells(cells: &mut [Cell], target: &[f64], theta: &mut [f64]) {
    for ((c, &t), th) in cells.iter_mut().zip(target).zip(theta) {
        let current = c.total();
        if t > 0.0 && current > 0.0 {
            let f = t / current;
            *th += f.ln();
            for v in &mut c.counts {
                *v *= f;
            }
        }
    }
}

fn rel_dev(achieved: f64, target: f64) -> f64 {
    (achieved - target).abs() / target.max(1.0)
}

// Positive targets on cells the base lacks are rejected up front, so the
// working cells cover every target entry that can deviate.
fn gap_of(cells: &[Cell], cell_target: &[f64], race_target: &RaceVec) -> f64 {
    let race = race_sums(cells);
    let mut gap = race.iter().zip(race_target).map(|(a, t)| rel_dev(*a, *t)).fold(0.0, f64::max);
    for (c, &t) in cells.iter().zip(cell_target) {
        gap = gap.max(rel_dev(c.total(), t));
    }
    gap
}

/// Largest relative margin deviation `|achieved − target| / max(target, 1)`
/// over every race target and every cell target.
pub fn margin_gap(m: &PredictionTable, targets: &MarginSet) -> f64 {
    let race = m.race_margin();
    let mut gap = race.iter().zip(targets.race()).map(|(a, t)| rel_dev(*a, *t)).fold(0.0, f64::max);
    for (&(s, g), &t) in targets.cell() {
        let achieved = m.get(s, g).map(crate::race::sum).unwrap_or(0.0);
        gap = gap.max(rel_dev(achieved, t));
    }
    gap
}

/// Generalized KL divergence between unnormalized tables,
/// `Σ m log(m / base) − Σ m + Σ base`.
pub fn kl_divergence(m: &PredictionTable, base: &PredictionTable) -> Result<f64, RakingError> {
    if !m.same_labels(base) {
        return Err(RakingError::LabelMismatch);
    }
    let mut kl = 0.0;
    for c in m.cells() {
        let b = base.get(c.surname, c.geo);
        for r in 0..N_RACES {
            let mv = c.counts[r];
            if mv == 0.0 {
                continue;
            }
            let bv = b.map(|b| b[r]).unwrap_or(0.0);
            if !(bv > 0.0) {
                return Err(RakingError::AbsoluteContinuity);
            }
            kl += mv * (mv / bv).ln();
        }
    }
    Ok((kl - m.total() + base.total()).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bisg::{bisg_counts_on, fit_factors, weighted_predictions_on, Method};
    use crate::table::fixtures::f1;
    use crate::table::build_table;
    use proptest::prelude::*;

    fn two(a: f64, b: f64) -> RaceVec {
        [a, b, 0.0, 0.0, 0.0, 0.0]
    }

    fn f1_bisg() -> PredictionTable {
        let t = f1();
        bisg_counts_on(&fit_factors(&t).unwrap(), &t).unwrap().table
    }

    /// Dense IPF on the 2×2×2 active block, written independently of the
    /// library path.
    fn dense_ipf(base: [[[f64; 2]; 2]; 2], race: [f64; 2], cell: [[f64; 2]; 2]) -> [[[f64; 2]; 2]; 2] {
        let mut m = base;
        for _ in 0..100_000 {
            for r in 0..2 {
                let cur: f64 = (0..2).flat_map(|s| (0..2).map(move |g| (s, g))).map(|(s, g)| m[s][g][r]).sum();
                for s in 0..2 {
                    for g in 0..2 {
                        m[s][g][r] *= race[r] / cur;
                    }
                }
            }
            for s in 0..2 {
                for g in 0..2 {
                    let cur = m[s][g][0] + m[s][g][1];
                    m[s][g][0] *= cell[s][g] / cur;
                    m[s][g][1] *= cell[s][g] / cur;
                }
            }
        }
        m
    }

    fn dense(t: &PredictionTable) -> [[[f64; 2]; 2]; 2] {
        let mut out = [[[0.0; 2]; 2]; 2];
        for c in t.cells() {
            out[c.surname][c.geo] = [c.counts[0], c.counts[1]];
        }
        out
    }

    fn assert_parametric(base: &PredictionTable, res: &RakingResult, tol: f64) {
        for c in res.table.cells() {
            let b = base.get(c.surname, c.geo).unwrap();
            let th_sg = res.theta_sg.get(&c.key()).copied().unwrap_or(f64::NEG_INFINITY);
            for r in 0..N_RACES {
                let expect = if b[r] == 0.0 { 0.0 } else { b[r] * (res.theta_r[r] + th_sg).exp() };
                assert!(
                    (c.counts[r] - expect).abs() <= tol * expect.abs().max(c.counts[r].abs()),
                    "cell {:?} race {r}: {} vs {}",
                    c.key(),
                    c.counts[r],
                    expect
                );
            }
        }
    }

    #[test]
    fn f1_bisg_to_true_margins() {
        let t = f1();
        let base = f1_bisg();
        let targets = MarginSet::of(&t);
        // The count-scale base already has the right race margin, but not the
        // surname×geolocation margin, so raking has work to do.
        assert!((base.race_margin()[0] - 17.0).abs() < 1e-12);
        assert!(margin_gap(&base, &targets) > 0.1);
        let res = rake(&base, &targets, &RakingConfig::default()).unwrap();
        assert!(res.final_margin_gap <= 1e-10);
        assert!(margin_gap(&res.table, &targets) <= 1e-10);
        assert_parametric(&base, &res, 1e-8);

        // Same fixed point as raking the weighted estimator: both bases
        // differ only by a per-cell factor.
        let wbase = weighted_predictions_on(&fit_factors(&t).unwrap(), &t, Method::Bisg, None).table;
        let wres = rake(&wbase, &targets, &RakingConfig::default()).unwrap();
        for (a, b) in res.table.cells().iter().zip(wres.table.cells()) {
            for r in 0..2 {
                assert!((a.counts[r] - b.counts[r]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn f1_bisg_to_even_race_margin_matches_dense_oracle() {
        let t = f1();
        let base = f1_bisg();
        let mut cell = BTreeMap::new();
        for (k, v) in t.cell_totals() {
            cell.insert(k, v);
        }
        let targets = MarginSet::new(two(20.0, 20.0), cell).unwrap();
        let res = rake(&base, &targets, &RakingConfig::default()).unwrap();
        let rm = res.table.race_margin();
        assert!((rm[0] - 20.0).abs() <= 1e-10 * 20.0);
        for (k, v) in t.cell_totals() {
            let got: f64 = res.table.get(k.0, k.1).unwrap().iter().sum();
            assert!((got - v).abs() <= 1e-10 * v);
        }
        let oracle = dense_ipf(dense(&base), [20.0, 20.0], [[10.0, 5.0], [10.0, 15.0]]);
        let got = dense(&res.table);
        for s in 0..2 {
            for g in 0..2 {
                for r in 0..2 {
                    assert!((got[s][g][r] - oracle[s][g][r]).abs() < 1e-8, "{s}{g}{r}");
                }
            }
        }
        assert_parametric(&base, &res, 1e-8);
    }

    #[test]
    fn fixed_point_is_one_exact_sweep() {
        let t = f1();
        let res = rake(&t, &MarginSet::of(&t), &RakingConfig::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert_eq!(res.table, t);
        assert_eq!(res.final_margin_gap, 0.0);
        assert!(res.theta_sg.values().all(|v| *v == 0.0));
        assert_eq!(res.theta_r[..2], [0.0, 0.0]);
    }

    #[test]
    fn zero_targets_zero_the_base() {
        let t = f1();
        let mut cell: BTreeMap<_, _> = t.cell_totals().into_iter().collect();
        cell.insert((0, 1), 0.0);
        let race = two(17.0 - 1.0, 23.0 - 4.0);
        let targets = MarginSet::new(race, cell).unwrap();
        let res = rake(&t, &targets, &RakingConfig::default()).unwrap();
        assert_eq!(res.table.get(0, 1).unwrap(), &[0.0; 6]);
        assert!(!res.theta_sg.contains_key(&(0, 1)));
        assert_eq!(res.theta_r[3], f64::NEG_INFINITY);
    }

    #[test]
    fn infeasible_support_is_reported() {
        let t = f1();
        let mut cell: BTreeMap<_, _> = t.cell_totals().into_iter().collect();
        let race = two(17.0, 23.0);
        // A race with no base mass.
        let mut race_bad = race;
        race_bad[0] -= 1.0;
        race_bad[4] = 1.0;
        let err = rake(&t, &MarginSet::new(race_bad, cell.clone()).unwrap(), &RakingConfig::default()).unwrap_err();
        assert_eq!(err, RakingError::InfeasibleRace { race: Race::White, target: 1.0 });

        // A cell with no base mass.
        let sparse = build_table(&[("s1", "g1", two(1.0, 1.0)), ("s2", "g2", two(1.0, 1.0)), ("s1", "g2", [0.0; 6])]).unwrap();
        let mut c2 = BTreeMap::new();
        c2.insert((0, 0), 2.0);
        c2.insert((1, 1), 1.0);
        c2.insert((0, 1), 1.0);
        let err = rake(&sparse, &MarginSet::new(two(2.0, 2.0), c2).unwrap(), &RakingConfig::default()).unwrap_err();
        assert!(matches!(err, RakingError::InfeasibleCell { ref surname, ref geo, .. } if surname == "s1" && geo == "g2"));

        cell.insert((5, 5), 0.0);
        let err = rake(&t, &MarginSet::new(race, cell).unwrap(), &RakingConfig::default()).unwrap_err();
        assert!(matches!(err, RakingError::TargetOutOfRange { .. }));
    }

    #[test]
    fn non_convergence_carries_the_gap() {
        // Structural zeros make these margins unreachable.
        let t = build_table(&[("a", "x", two(1.0, 0.0)), ("b", "x", two(0.0, 1.0))]).unwrap();
        let mut cell = BTreeMap::new();
        cell.insert((0, 0), 3.0);
        cell.insert((1, 0), 1.0);
        let targets = MarginSet::new(two(1.0, 3.0), cell).unwrap();
        let cfg = RakingConfig { max_iterations: 50, ..Default::default() };
        match rake(&t, &targets, &cfg) {
            Err(RakingError::NonConvergence { iterations, gap }) => {
                assert_eq!(iterations, 50);
                assert!(gap > 0.1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_config() {
        let t = f1();
        let m = MarginSet::of(&t);
        let bad = RakingConfig { tolerance: 0.0, ..Default::default() };
        assert!(matches!(rake(&t, &m, &bad), Err(RakingError::InvalidConfig(_))));
        let bad = RakingConfig { max_iterations: 0, ..Default::default() };
        assert!(matches!(rake(&t, &m, &bad), Err(RakingError::InvalidConfig(_))));
    }

    #[test]
    fn kl_examples() {
        let t = f1();
        assert_eq!(kl_divergence(&t, &t).unwrap(), 0.0);
        let m = build_table(&[("a", "x", [2.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        let b = build_table(&[("a", "x", [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        assert!((kl_divergence(&m, &b).unwrap() - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((kl_divergence(&m, &b).unwrap() - 0.3863).abs() < 1e-4);
        let m2 = build_table(&[("a", "x", [1.0, 1.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        let b2 = build_table(&[("a", "x", [2.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(kl_divergence(&m2, &b2), Err(RakingError::AbsoluteContinuity));
    }

    #[test]
    fn margin_gap_examples() {
        let t = f1();
        let targets = MarginSet::of(&t);
        assert_eq!(margin_gap(&t, &targets), 0.0);

        let t2 = build_table(&[("a", "x", two(21.0, 5.0))]).unwrap();
        let cell = BTreeMap::from([((0, 0), 26.0)]);
        let targets = MarginSet::new(two(20.0, 6.0), cell).unwrap();
        // race 2 is off by 1 on a target of 6 → 1/6; race 1 by 1/20.
        assert!((margin_gap(&t2, &targets) - 1.0 / 6.0).abs() < 1e-15);
        let targets = MarginSet::new(two(20.0, 5.0), BTreeMap::from([((0, 0), 25.0)])).unwrap();
        let t3 = build_table(&[("a", "x", two(21.0, 5.0))]).unwrap();
        let gap_r = (21.0f64 - 20.0).abs() / 20.0;
        let gap_c = (26.0f64 - 25.0).abs() / 25.0;
        assert!((margin_gap(&t3, &targets) - gap_r.max(gap_c)).abs() < 1e-15);
        assert!((gap_r - 0.05).abs() < 1e-15);

        // Zero targets count achieved mass as the deviation.
        let empty = MarginSet::new([0.0; 6], BTreeMap::new()).unwrap();
        assert_eq!(margin_gap(&t, &empty), 23.0);
        assert_eq!(margin_gap(&t.map_counts(|_| [0.0; 6]), &empty), 0.0);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<(String, String, RaceVec)>, RaceVec)> {
        let cell = (0u8..4, 0u8..3, prop::array::uniform6(0.05f64..5.0)).prop_map(|(s, g, w)| (format!("s{s}"), format!("g{g}"), w));
        (prop::collection::vec(cell, 1..12), prop::array::uniform6(0.5f64..2.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raking_hits_margins_in_parametric_form((records, tilt) in arb_instance()) {
            let truth = build_table(&records).unwrap();
            // Targets: truth's cell totals, and a tilted race margin rescaled
            // to the same total so the two families are consistent.
            let base_race = truth.race_margin();
            let mut race: RaceVec = std::array::from_fn(|r| base_race[r] * tilt[r]);
            let scale = truth.total() / race.iter().sum::<f64>();
            race.iter_mut().for_each(|v| *v *= scale);
            let cell: BTreeMap<_, _> = truth.cell_totals().into_iter().collect();
            let targets = MarginSet::new(race, cell).unwrap();
            let base = truth.map_counts(|c| c.counts.map(|v| v * 0.5 + 0.1));

            let a = rake(&base, &targets, &RakingConfig::default()).unwrap();
            prop_assert!(a.final_margin_gap <= 1e-10);
            prop_assert!(margin_gap(&a.table, &targets) <= 1e-10);
            assert_parametric(&base, &a, 1e-8);

            // Statewide race totals match exactly (up to tolerance).
            let rm = a.table.race_margin();
            for r in 0..N_RACES {
                prop_assert!((rm[r] - race[r]).abs() <= 1e-10 * race[r].max(1.0));
            }

            let b = rake(&base, &targets, &RakingConfig { order: SweepOrder::CellFirst, ..Default::default() }).unwrap();
            for (x, y) in a.table.cells().iter().zip(b.table.cells()) {
                for r in 0..N_RACES {
                    prop_assert!((x.counts[r] - y.counts[r]).abs() <= 1e-8 * x.counts[r].abs().max(1.0));
                }
            }
        }
    }
}
