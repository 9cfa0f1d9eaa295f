//! Bayesian Improved Surname Geocoding.
//!
//! Predictions are available on two scales:
//!
//! * count scale, `m_{sgr} = x*_{+gr} x*_{s+r} / x*_{++r}` ([`bisg_counts`]);
//! * probability scale, `p(r | s, g) ∝ P(r|g) P(r|s) / P(r)`, optionally
//!   reweighted by `P(v | r)` for a registered-voter population
//!   ([`bisg_probability`]).
//!
//! [`weighted_predictions`] turns per-cell conditionals into a count-scale
//! table by multiplying with the known cell totals `x_{sg+}`; summing that
//! table over surnames is the usual weighted subpopulation estimator.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::race::{self, Race, RaceVec, N_RACES};
use crate::table::{AxisLabels, Cell, ContingencyTable, PredictionTable, ThreeWayTable};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BisgError {
    #[error("table has no mass")]
    EmptyTable,
    #[error("label not in factors: {axis} `{label}`")]
    UnknownLabel { axis: &'static str, label: String },
    #[error("no admissible race for cell")]
    NoAdmissibleRace,
    #[error("count-scale predictions need geolocation and surname population totals")]
    MissingCounts,
    #[error("{what} is not a probability vector (sum {sum})")]
    NotADistribution { what: String, sum: f64 },
    #[error("unsupported race in voter population: {0}")]
    UnsupportedRace(Race),
    #[error("adjustment weights are all zero")]
    ZeroAdjustment,
}

/// The three BISG ingredients `P(r|g)`, `P(r|s)`, `P(r)`, plus optional
/// population totals per geolocation and surname so count-scale margins
/// `x*_{+gr}`, `x*_{s+r}` can be recovered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisgFactors {
    race_given_geo: BTreeMap<String, RaceVec>,
    race_given_surname: BTreeMap<String, RaceVec>,
    race_prior: RaceVec,
    geo_counts: Option<BTreeMap<String, f64>>,
    surname_counts: Option<BTreeMap<String, f64>>,
}

fn check_distribution(what: impl fmt::Display, v: &RaceVec, tol: f64) -> Result<(), BisgError> {
    let sum = race::sum(v);
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > tol {
        return Err(BisgError::NotADistribution { what: what.to_string(), sum });
    }
    Ok(())
}

impl BisgFactors {
    pub fn new(
        race_given_geo: BTreeMap<String, RaceVec>,
        race_given_surname: BTreeMap<String, RaceVec>,
        race_prior: RaceVec,
    ) -> Result<Self, BisgError> {
        for (g, p) in &race_given_geo {
            check_distribution(format_args!("P(r | {g})"), p, SUM_TOL)?;
        }
        for (s, p) in &race_given_surname {
            check_distribution(format_args!("P(r | {s})"), p, SUM_TOL)?;
        }
        check_distribution("P(r)", &race_prior, SUM_TOL)?;
        Ok(Self {
            race_given_geo,
            race_given_surname,
            race_prior,
            geo_counts: None,
            surname_counts: None,
        })
    }

    /// Attaches population totals `x*_{+g+}` and `x*_{s++}`.
    pub fn with_counts(mut self, geo_counts: BTreeMap<String, f64>, surname_counts: BTreeMap<String, f64>) -> Self {
        self.geo_counts = Some(geo_counts);
        self.surname_counts = Some(surname_counts);
        self
    }

    pub fn race_given_geo(&self) -> &BTreeMap<String, RaceVec> {
        &self.race_given_geo
    }

    pub fn race_given_surname(&self) -> &BTreeMap<String, RaceVec> {
        &self.race_given_surname
    }

    pub fn race_prior(&self) -> &RaceVec {
        &self.race_prior
    }

    pub fn geo_counts(&self) -> Option<&BTreeMap<String, f64>> {
        self.geo_counts.as_ref()
    }

    pub fn surname_counts(&self) -> Option<&BTreeMap<String, f64>> {
        self.surname_counts.as_ref()
    }

    pub fn geo(&self, g: &str) -> Option<&RaceVec> {
        self.race_given_geo.get(g)
    }

    pub fn surname(&self, s: &str) -> Option<&RaceVec> {
        self.race_given_surname.get(s)
    }
}

/// Exact factors computed from a labeled table: every conditional is the
/// empirical one, so any remaining BISG error is due to conditional
/// dependence of surname and geolocation. Labels with zero mass are omitted.
pub fn fit_factors(labeled: &ContingencyTable) -> Result<BisgFactors, BisgError> {
    let total = labeled.total();
    if !(total > 0.0) {
        return Err(BisgError::EmptyTable);
    }
    let labels = labeled.labels();
    let mut race_given_geo = BTreeMap::new();
    let mut geo_counts = BTreeMap::new();
    for (g, counts) in labeled.geo_race_margin().iter().enumerate() {
        let n = race::sum(counts);
        if n > 0.0 {
            race_given_geo.insert(labels.geolocation(g).to_string(), counts.map(|c| c / n));
            geo_counts.insert(labels.geolocation(g).to_string(), n);
        }
    }
    let mut race_given_surname = BTreeMap::new();
    let mut surname_counts = BTreeMap::new();
    for (s, counts) in labeled.surname_race_margin().iter().enumerate() {
        let n = race::sum(counts);
        if n > 0.0 {
            race_given_surname.insert(labels.surname(s).to_string(), counts.map(|c| c / n));
            surname_counts.insert(labels.surname(s).to_string(), n);
        }
    }
    let prior = labeled.race_margin().map(|c| c / total);
    Ok(BisgFactors::new(race_given_geo, race_given_surname, prior)?.with_counts(geo_counts, surname_counts))
}

/// Why a cell was flagged during prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Surname absent from the factors; the geolocation-only prediction was
    /// used instead.
    MissingSurnameFallback,
    /// Surname absent and no fallback applies; cell skipped.
    MissingSurname,
    /// Geolocation absent; cell skipped.
    MissingGeolocation,
    /// Every race had zero weight; cell skipped.
    NoAdmissibleRace,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingSurnameFallback => "missing surname, geolocation-only fallback",
            RejectReason::MissingSurname => "missing surname",
            RejectReason::MissingGeolocation => "missing geolocation",
            RejectReason::NoAdmissibleRace => "no admissible race for cell",
        }
    }

    /// Whether the cell still received a prediction.
    pub fn is_fallback(self) -> bool {
        matches!(self, RejectReason::MissingSurnameFallback)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReject {
    pub surname: String,
    pub geolocation: String,
    pub reason: RejectReason,
}

/// A prediction table plus the cells that were skipped or fell back.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub table: PredictionTable,
    pub rejects: Vec<CellReject>,
}

/// Count-scale BISG on the given `(surname index, geo index)` support of
/// `labels`. Cells whose surname or geolocation is missing from the factors
/// are skipped and reported. Races with `x*_{++r} = 0` predict zero.
pub fn bisg_counts<I>(factors: &BisgFactors, labels: Arc<AxisLabels>, support: I) -> Result<Prediction, BisgError>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let (geo_counts, surname_counts) = match (&factors.geo_counts, &factors.surname_counts) {
        (Some(g), Some(s)) => (g, s),
        _ => return Err(BisgError::MissingCounts),
    };
    let population: f64 = geo_counts.values().sum();
    let race_total = factors.race_prior.map(|p| p * population);

    let mut keys: Vec<(usize, usize)> = support.into_iter().collect();
    keys.sort_unstable();
    keys.dedup();

    let mut cells = Vec::with_capacity(keys.len());
    let mut rejects = Vec::new();
    for (s, g) in keys {
        let sname = labels.surname(s);
        let gname = labels.geolocation(g);
        let geo = factors.race_given_geo.get(gname).zip(geo_counts.get(gname));
        let sur = factors.race_given_surname.get(sname).zip(surname_counts.get(sname));
        let ((p_rg, n_g), (p_rs, n_s)) = match (geo, sur) {
            (Some(geo), Some(sur)) => (geo, sur),
            (None, _) => {
                rejects.push(reject(sname, gname, RejectReason::MissingGeolocation));
                continue;
            }
            (Some(_), None) => {
                rejects.push(reject(sname, gname, RejectReason::MissingSurname));
                continue;
            }
        };
        let mut counts = [0.0; N_RACES];
        for r in 0..N_RACES {
            if race_total[r] > 0.0 {
                counts[r] = (p_rg[r] * n_g) * (p_rs[r] * n_s) / race_total[r];
            }
        }
        cells.push(Cell { surname: s, geo: g, counts });
    }
    Ok(Prediction { table: ThreeWayTable::from_sorted_cells(labels, cells), rejects })
}

/// Count-scale BISG on the occupied cells of `table`.
pub fn bisg_counts_on(factors: &BisgFactors, table: &ThreeWayTable) -> Result<Prediction, BisgError> {
    bisg_counts(factors, table.shared_labels(), table.cells().iter().map(Cell::key))
}

fn reject(s: &str, g: &str, reason: RejectReason) -> CellReject {
    CellReject { surname: s.to_string(), geolocation: g.to_string(), reason }
}

/// Reweighting `P(v | r)` (up to scale) that turns full-population BISG into
/// registered-voter BISG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoterAdjustment {
    pub weight: RaceVec,
}

impl VoterAdjustment {
    pub fn new(weight: RaceVec) -> Result<Self, BisgError> {
        if weight.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(BisgError::NotADistribution { what: "adjustment weight".into(), sum: race::sum(&weight) });
        }
        if weight.iter().all(|w| *w == 0.0) {
            return Err(BisgError::ZeroAdjustment);
        }
        Ok(Self { weight })
    }

    pub fn identity() -> Self {
        Self { weight: [1.0; N_RACES] }
    }
}

/// `weight[r] = P(r | v) / P(r)` from the survey's registered-voter race
/// distribution and the census adult race distribution.
pub fn voter_adjustment(cps_race_given_voter: &RaceVec, census_race_prior: &RaceVec) -> Result<VoterAdjustment, BisgError> {
    check_distribution("CPS race distribution", cps_race_given_voter, 1e-6)?;
    check_distribution("census race prior", census_race_prior, 1e-6)?;
    let mut weight = [0.0; N_RACES];
    for r in 0..N_RACES {
        let (cps, prior) = (cps_race_given_voter[r], census_race_prior[r]);
        if prior > 0.0 {
            weight[r] = cps / prior;
        } else if cps > 0.0 {
            return Err(BisgError::UnsupportedRace(Race::ALL[r]));
        }
    }
    VoterAdjustment::new(weight)
}

fn normalize(v: RaceVec) -> Result<RaceVec, BisgError> {
    let sum = race::sum(&v);
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(BisgError::NoAdmissibleRace);
    }
    Ok(v.map(|x| x / sum))
}

fn weighted(v: &RaceVec, adjustment: Option<&VoterAdjustment>) -> RaceVec {
    match adjustment {
        Some(a) => std::array::from_fn(|r| v[r] * a.weight[r]),
        None => *v,
    }
}

fn bisg_vector(p_rg: &RaceVec, p_rs: &RaceVec, prior: &RaceVec, adjustment: Option<&VoterAdjustment>) -> Result<RaceVec, BisgError> {
    let mut num = [0.0; N_RACES];
    for r in 0..N_RACES {
        if prior[r] > 0.0 {
            num[r] = p_rg[r] * p_rs[r] / prior[r];
        }
    }
    normalize(weighted(&num, adjustment))
}

/// Probability-scale BISG for one `(surname, geolocation)` pair.
pub fn bisg_probability(
    factors: &BisgFactors,
    surname: &str,
    geo: &str,
    adjustment: Option<&VoterAdjustment>,
) -> Result<RaceVec, BisgError> {
    let p_rg = factors
        .geo(geo)
        .ok_or_else(|| BisgError::UnknownLabel { axis: "geolocation", label: geo.to_string() })?;
    let p_rs = factors
        .surname(surname)
        .ok_or_else(|| BisgError::UnknownLabel { axis: "surname", label: surname.to_string() })?;
    bisg_vector(p_rg, p_rs, &factors.race_prior, adjustment)
}

/// Geolocation-only baseline `P(r | g)`.
pub fn baseline_geo_only(factors: &BisgFactors, geo: &str) -> Result<RaceVec, BisgError> {
    factors
        .geo(geo)
        .copied()
        .ok_or_else(|| BisgError::UnknownLabel { axis: "geolocation", label: geo.to_string() })
}

/// Surname-only baseline `P(r | s)`.
pub fn baseline_surname_only(factors: &BisgFactors, surname: &str) -> Result<RaceVec, BisgError> {
    factors
        .surname(surname)
        .copied()
        .ok_or_else(|| BisgError::UnknownLabel { axis: "surname", label: surname.to_string() })
}

/// Which conditional to use for per-cell prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Bisg,
    GeoOnly,
    SurnameOnly,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bisg" => Ok(Method::Bisg),
            "geo-only" => Ok(Method::GeoOnly),
            "surname-only" => Ok(Method::SurnameOnly),
            other => Err(format!("unknown method `{other}` (expected bisg, geo-only or surname-only)")),
        }
    }
}

/// Per-cell conditional under `method`. For BISG a missing surname falls
/// back to the (adjusted) geolocation-only prediction.
pub fn predict_conditional(
    factors: &BisgFactors,
    surname: &str,
    geo: &str,
    method: Method,
    adjustment: Option<&VoterAdjustment>,
) -> Result<(RaceVec, Option<RejectReason>), RejectReason> {
    let admissible = |v: Result<RaceVec, BisgError>| v.map_err(|_| RejectReason::NoAdmissibleRace);
    match method {
        Method::Bisg => {
            let p_rg = factors.geo(geo).ok_or(RejectReason::MissingGeolocation)?;
            match factors.surname(surname) {
                Some(p_rs) => admissible(bisg_vector(p_rg, p_rs, &factors.race_prior, adjustment)).map(|p| (p, None)),
                None => admissible(normalize(weighted(p_rg, adjustment)))
                    .map(|p| (p, Some(RejectReason::MissingSurnameFallback))),
            }
        }
        Method::GeoOnly => {
            let p_rg = factors.geo(geo).ok_or(RejectReason::MissingGeolocation)?;
            admissible(normalize(weighted(p_rg, adjustment))).map(|p| (p, None))
        }
        Method::SurnameOnly => {
            let p_rs = factors.surname(surname).ok_or(RejectReason::MissingSurname)?;
            admissible(normalize(weighted(p_rs, adjustment))).map(|p| (p, None))
        }
    }
}

/// Count-scale predictions `m_{sgr} = x_{sg+} · p(r | s, g)` for every cell
/// in `occupancy` (cell totals on `labels`). Cells are evaluated in
/// parallel; output order is the sorted cell order.
pub fn weighted_predictions(
    factors: &BisgFactors,
    labels: Arc<AxisLabels>,
    occupancy: &[((usize, usize), f64)],
    method: Method,
    adjustment: Option<&VoterAdjustment>,
) -> Prediction {
    let mut occ: Vec<((usize, usize), f64)> = occupancy.to_vec();
    occ.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    occ.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    let results: Vec<_> = occ
        .par_iter()
        .map(|&((s, g), n)| {
            let out = predict_conditional(factors, labels.surname(s), labels.geolocation(g), method, adjustment);
            (s, g, n, out)
        })
        .collect();
    let mut cells = Vec::with_capacity(results.len());
    let mut rejects = Vec::new();
    for (s, g, n, out) in results {
        match out {
            Ok((p, flag)) => {
                if let Some(reason) = flag {
                    rejects.push(reject(labels.surname(s), labels.geolocation(g), reason));
                }
                cells.push(Cell { surname: s, geo: g, counts: p.map(|v| v * n) });
            }
            Err(reason) => rejects.push(reject(labels.surname(s), labels.geolocation(g), reason)),
        }
    }
    Prediction { table: ThreeWayTable::from_sorted_cells(labels, cells), rejects }
}

/// Weighted predictions on the occupied cells of a labeled table, i.e. with
/// `x_{sg+}` taken from `truth`.
pub fn weighted_predictions_on(
    factors: &BisgFactors,
    truth: &ThreeWayTable,
    method: Method,
    adjustment: Option<&VoterAdjustment>,
) -> Prediction {
    weighted_predictions(factors, truth.shared_labels(), &truth.cell_totals(), method, adjustment)
}
