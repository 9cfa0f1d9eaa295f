//! Canonical on-disk formats and voter-file plumbing.
//!
//! All formats are UTF-8 CSV with fixed headers, except the survey margin
//! file which is JSON. Numbers are written with Rust's shortest round-trip
//! float formatting, so parse → write → parse is exact.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bisg::{BisgError, BisgFactors, CellReject};
use crate::race::{self, Race, RaceVec, N_RACES};
use crate::table::{AxisLabels, ContingencyTable, MarginSet, PredictionTable, TableError, ThreeWayTable};

pub const SURNAME_HEADER: [&str; 8] = ["surname", "count", "p_aian", "p_api", "p_black", "p_hispanic", "p_white", "p_other"];
pub const GEO_HEADER: [&str; 8] = ["geoid", "count", "aian", "api", "black", "hispanic", "white", "other"];
pub const VOTER_HEADER: [&str; 5] = ["voter_id", "surname", "geoid", "race", "active"];
pub const HISPANIC_ORIGIN_COLUMN: &str = "hispanic_origin";
pub const TABLE_HEADER: [&str; 8] = ["surname", "geoid", "aian", "api", "black", "hispanic", "white", "other"];
pub const CELLS_HEADER: [&str; 3] = ["surname", "geoid", "count"];
pub const CONDITIONALS_HEADER: [&str; 8] = ["surname", "geoid", "p_aian", "p_api", "p_black", "p_hispanic", "p_white", "p_other"];
pub const REGION_HEADER: [&str; 2] = ["geoid", "region"];

/// Share of surname rows that may be rejected before parsing fails.
pub const MAX_REJECT_SHARE: f64 = 0.10;
/// Surname probability rows summing outside this band are rejected.
pub const RENORMALIZE_BAND: (f64, f64) = (0.98, 1.02);

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("{rejected} of {total} rows rejected (limit {limit:.0}%)")]
    TooManyRejects { rejected: usize, total: usize, limit: f64 },
    #[error("line {line}: duplicate geolocation `{geoid}`")]
    DuplicateGeolocation { line: u64, geoid: String },
    #[error("line {line}: duplicate cell ({surname}, {geoid})")]
    DuplicateCell { line: u64, surname: String, geoid: String },
    #[error("line {line}: duplicate voter_id `{voter_id}`")]
    DuplicateVoterId { line: u64, voter_id: String },
    #[error("unknown {source_name} category `{category}`")]
    UnknownCategory { source_name: String, category: String },
    #[error("no records of race {0} available for a positive target")]
    NoRecordsForRace(Race),
    #[error("record {0} has no race label")]
    UnlabeledRecord(String),
    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),
    #[error("unknown race key `{0}`")]
    UnknownRaceKey(String),
    #[error("label `{label}` is not on the {axis} axis of the base table")]
    UnknownLabel { axis: &'static str, label: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Bisg(#[from] BisgError),
}

/// A row that was skipped, with its 1-based line number in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

/// Surnames are matched uppercased with surrounding whitespace removed.
pub fn normalize_surname(s: &str) -> String {
    s.trim().to_uppercase()
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::None).from_reader(input)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), IngestError> {
    if found.iter().eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(IngestError::BadHeader { expected: expected.join(","), found: found.iter().collect::<Vec<_>>().join(",") })
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_nonneg(field: &str, name: &str) -> Result<f64, String> {
    let v: f64 = field.trim().parse().map_err(|_| format!("{name}: not a number `{field}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{name}: expected a finite nonnegative value, got `{field}`"));
    }
    Ok(v)
}

fn parse_race_vec(rec: &csv::StringRecord, from: usize, names: &[&str]) -> Result<RaceVec, String> {
    let mut v = [0.0; N_RACES];
    for r in 0..N_RACES {
        v[r] = parse_nonneg(&rec[from + r], names[from + r])?;
    }
    Ok(v)
}

fn malformed(line: u64, reason: impl Into<String>) -> IngestError {
    IngestError::Malformed { line, reason: reason.into() }
}

fn fmt_row<'a>(head: impl IntoIterator<Item = String>, v: &'a RaceVec) -> Vec<String> {
    head.into_iter().chain(v.iter().map(|x| x.to_string())).collect()
}

/// Surname side of the factors: `P(r | s)` and the surname counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurnameFactors {
    pub race_given_surname: BTreeMap<String, RaceVec>,
    pub counts: BTreeMap<String, f64>,
    pub rejects: Vec<Reject>,
}

pub fn parse_surname_factors<R: Read>(input: R) -> Result<SurnameFactors, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &SURNAME_HEADER)?;
    let mut out = SurnameFactors::default();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        rows += 1;
        let line = line_of(&rec);
        let parsed = (|| {
            if rec.len() != SURNAME_HEADER.len() {
                return Err(format!("expected {} fields, found {}", SURNAME_HEADER.len(), rec.len()));
            }
            let surname = normalize_surname(&rec[0]);
            if surname.is_empty() {
                return Err("empty surname".to_string());
            }
            if out.race_given_surname.contains_key(&surname) {
                return Err(format!("duplicate surname `{surname}`"));
            }
            let count = parse_nonneg(&rec[1], "count")?;
            let p = parse_race_vec(&rec, 2, &SURNAME_HEADER)?;
            let sum = race::sum(&p);
            if !(RENORMALIZE_BAND.0..=RENORMALIZE_BAND.1).contains(&sum) {
                return Err(format!("probabilities sum to {sum}"));
            }
            // Rows already normalized are kept as written.
            let p = if (sum - 1.0).abs() > 1e-12 { p.map(|x| x / sum) } else { p };
            Ok((surname, count, p))
        })();
        match parsed {
            Ok((s, count, p)) => {
                out.counts.insert(s.clone(), count);
                out.race_given_surname.insert(s, p);
            }
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
    }
    if rows > 0 && out.rejects.len() as f64 > MAX_REJECT_SHARE * rows as f64 {
        return Err(IngestError::TooManyRejects { rejected: out.rejects.len(), total: rows, limit: MAX_REJECT_SHARE * 100.0 });
    }
    Ok(out)
}

pub fn write_surname_factors<W: Write>(
    race_given_surname: &BTreeMap<String, RaceVec>,
    counts: &BTreeMap<String, f64>,
    out: W,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SURNAME_HEADER)?;
    for (s, p) in race_given_surname {
        let n = counts.get(s).copied().unwrap_or(0.0);
        w.write_record(fmt_row([s.clone(), n.to_string()], p))?;
    }
    w.flush()?;
    Ok(())
}

/// Geolocation side of the factors, kept as race counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoFactors {
    pub race_counts: BTreeMap<String, RaceVec>,
    pub rejects: Vec<Reject>,
}

impl GeoFactors {
    pub fn race_given_geo(&self) -> BTreeMap<String, RaceVec> {
        self.race_counts
            .iter()
            .map(|(g, c)| {
                let n = race::sum(c);
                (g.clone(), c.map(|x| x / n))
            })
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<String, f64> {
        self.race_counts.iter().map(|(g, c)| (g.clone(), race::sum(c))).collect()
    }

    /// `P(r)` implied by the geolocation counts.
    pub fn prior(&self) -> RaceVec {
        let mut total = [0.0; N_RACES];
        for c in self.race_counts.values() {
            for r in 0..N_RACES {
                total[r] += c[r];
            }
        }
        let n = race::sum(&total);
        total.map(|x| x / n)
    }
}

pub fn parse_geo_factors<R: Read>(input: R) -> Result<GeoFactors, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &GEO_HEADER)?;
    let mut out = GeoFactors::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != GEO_HEADER.len() {
            out.rejects.push(Reject { line, reason: format!("expected {} fields, found {}", GEO_HEADER.len(), rec.len()) });
            continue;
        }
        let geoid = rec[0].trim().to_string();
        if geoid.is_empty() {
            out.rejects.push(Reject { line, reason: "empty geoid".into() });
            continue;
        }
        if out.race_counts.contains_key(&geoid) {
            return Err(IngestError::DuplicateGeolocation { line, geoid });
        }
        let parsed = parse_nonneg(&rec[1], "count").and_then(|n| Ok((n, parse_race_vec(&rec, 2, &GEO_HEADER)?)));
        match parsed {
            Ok((n, counts)) => {
                let sum = race::sum(&counts);
                if !(sum > 0.0) {
                    out.rejects.push(Reject { line, reason: format!("zero total for geolocation `{geoid}`") });
                } else if (n - sum).abs() > 1e-9 * sum.max(1.0) {
                    out.rejects.push(Reject { line, reason: format!("count {n} does not match race counts summing to {sum} for `{geoid}`") });
                } else {
                    out.race_counts.insert(geoid, counts);
                }
            }
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
    }
    Ok(out)
}

/// Writes `geoid,count,<race counts>` rows.
pub fn write_geo_factors<'a, W, I>(rows: I, out: W) -> Result<(), IngestError>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, RaceVec)>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GEO_HEADER)?;
    for (g, c) in rows {
        w.write_record(fmt_row([g.to_string(), race::sum(&c).to_string()], &c))?;
    }
    w.flush()?;
    Ok(())
}

/// Assembles full factors; the race prior comes from the geolocation counts.
pub fn assemble_factors(geo: &GeoFactors, surname: &SurnameFactors) -> Result<BisgFactors, IngestError> {
    Ok(BisgFactors::new(geo.race_given_geo(), surname.race_given_surname.clone(), geo.prior())?
        .with_counts(geo.counts(), surname.counts.clone()))
}

/// Maps a source's race strings onto the six categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMapping {
    pub name: String,
    /// Keys are compared case-insensitively after trimming.
    map: BTreeMap<String, Option<Race>>,
    /// Values of the `hispanic_origin` column meaning Hispanic. When set,
    /// such rows are Hispanic whatever the race field says.
    hispanic_origin: Option<BTreeSet<String>>,
}

fn key(s: &str) -> String {
    s.trim().to_lowercase()
}

impl CategoryMapping {
    /// `map` entries with `None` are recognized but mean "race not given".
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = (String, Option<Race>)>) -> Self {
        Self {
            name: name.into(),
            map: entries.into_iter().map(|(k, v)| (key(&k), v)).collect(),
            hispanic_origin: None,
        }
    }

    pub fn with_hispanic_origin<I: IntoIterator<Item = S>, S: AsRef<str>>(mut self, values: I) -> Self {
        self.hispanic_origin = Some(values.into_iter().map(|v| key(v.as_ref())).collect());
        self
    }

    pub fn uses_hispanic_origin(&self) -> bool {
        self.hispanic_origin.is_some()
    }

    /// The six race keys and labels, e.g. `black` or `AIAN`.
    pub fn canonical() -> Self {
        let entries = Race::ALL.iter().flat_map(|&r| [(r.key().to_string(), Some(r)), (r.label().to_string(), Some(r))]);
        Self::new("canonical", entries)
    }

    /// Florida's published race descriptions and their numeric codes.
    pub fn florida() -> Self {
        let e = |k: &str, r: Option<Race>| (k.to_string(), r);
        Self::new(
            "florida",
            [
                e("American Indian/ Alaskan Native", Some(Race::Aian)),
                e("American Indian/Alaskan Native", Some(Race::Aian)),
                e("Asian/Pacific Islander", Some(Race::Api)),
                e("Asian/Pacific Islander (API)", Some(Race::Api)),
                e("Black, not of Hispanic Origin", Some(Race::Black)),
                e("Hispanic", Some(Race::Hispanic)),
                e("White, not of Hispanic Origin", Some(Race::White)),
                e("Multi-racial", Some(Race::Other)),
                e("Other", Some(Race::Other)),
                e("Unknown", None),
                e("1", Some(Race::Aian)),
                e("2", Some(Race::Api)),
                e("3", Some(Race::Black)),
                e("4", Some(Race::Hispanic)),
                e("5", Some(Race::White)),
                e("6", Some(Race::Other)),
                e("7", Some(Race::Other)),
                e("9", None),
            ],
        )
    }

    /// North Carolina race codes plus the separate ethnicity field, where
    /// `HL` marks Hispanic origin.
    pub fn north_carolina() -> Self {
        let e = |k: &str, r: Option<Race>| (k.to_string(), r);
        Self::new(
            "north_carolina",
            [
                e("A", Some(Race::Api)),
                e("P", Some(Race::Api)),
                e("B", Some(Race::Black)),
                e("I", Some(Race::Aian)),
                e("W", Some(Race::White)),
                e("M", Some(Race::Other)),
                e("O", Some(Race::Other)),
                e("U", None),
            ],
        )
        .with_hispanic_origin(["HL"])
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "canonical" => Some(Self::canonical()),
            "florida" => Some(Self::florida()),
            "north_carolina" => Some(Self::north_carolina()),
            _ => None,
        }
    }

    /// Every source string this mapping recognizes.
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Race for a `(race, hispanic_origin)` pair. An empty race is `None`.
    pub fn classify(&self, race: &str, hispanic_origin: Option<&str>) -> Result<Option<Race>, IngestError> {
        if let (Some(set), Some(h)) = (&self.hispanic_origin, hispanic_origin) {
            if set.contains(&key(h)) {
                return Ok(Some(Race::Hispanic));
            }
        }
        let k = key(race);
        if k.is_empty() {
            return Ok(None);
        }
        self.map
            .get(&k)
            .copied()
            .ok_or_else(|| IngestError::UnknownCategory { source_name: self.name.clone(), category: race.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterRecord {
    pub voter_id: String,
    pub surname: String,
    pub geolocation: String,
    pub race: Option<Race>,
    pub active: bool,
}

impl VoterRecord {
    pub fn race_missing(&self) -> bool {
        self.race.is_none()
    }

    /// Active and race answered.
    pub fn evaluable(&self) -> bool {
        self.active && self.race.is_some()
    }
}

fn parse_active(s: &str) -> Option<bool> {
    match key(s).as_str() {
        "1" | "true" | "t" | "y" | "yes" | "a" | "act" | "active" => Some(true),
        "0" | "false" | "f" | "n" | "no" | "i" | "inactive" => Some(false),
        _ => None,
    }
}

/// Reads a voter file. Inactive and race-missing rows are kept; see
/// [`evaluable_only`] for the filtering step.
pub fn parse_voter_file<R: Read>(input: R, mapping: &CategoryMapping) -> Result<Vec<VoterRecord>, IngestError> {
    let mut rdr = reader(input);
    let header = rdr.headers()?.clone();
    let with_origin = header.len() == VOTER_HEADER.len() + 1 && &header[VOTER_HEADER.len()] == HISPANIC_ORIGIN_COLUMN;
    let base_ok = header.len() >= VOTER_HEADER.len() && header.iter().take(VOTER_HEADER.len()).eq(VOTER_HEADER.iter().copied());
    if !base_ok || !(header.len() == VOTER_HEADER.len() || with_origin) {
        return Err(IngestError::BadHeader { expected: VOTER_HEADER.join(","), found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let voter_id = rec[0].trim().to_string();
        let surname = normalize_surname(&rec[1]);
        let geolocation = rec[2].trim().to_string();
        if voter_id.is_empty() || surname.is_empty() || geolocation.is_empty() {
            return Err(malformed(line, "voter_id, surname and geoid must be nonempty"));
        }
        if !seen.insert(voter_id.clone()) {
            return Err(IngestError::DuplicateVoterId { line, voter_id });
        }
        let origin = with_origin.then(|| &rec[VOTER_HEADER.len()]);
        let race = mapping.classify(&rec[3], origin).map_err(|e| malformed(line, e.to_string()))?;
        let active = parse_active(&rec[4]).ok_or_else(|| malformed(line, format!("active: unrecognized value `{}`", &rec[4])))?;
        out.push(VoterRecord { voter_id, surname, geolocation, race, active });
    }
    Ok(out)
}

pub fn write_voter_file<W: Write>(records: &[VoterRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(VOTER_HEADER)?;
    for v in records {
        let race = v.race.map(|r| r.key()).unwrap_or("");
        w.write_record([v.voter_id.as_str(), &v.surname, &v.geolocation, race, if v.active { "true" } else { "false" }])?;
    }
    w.flush()?;
    Ok(())
}

/// Drops inactive registrations and rows without a race answer.
pub fn evaluable_only(records: &[VoterRecord]) -> Vec<VoterRecord> {
    records.iter().filter(|v| v.evaluable()).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoterAggregate {
    /// Labeled counts; cells holding only unlabeled voters are all-zero.
    pub table: ContingencyTable,
    /// Record count per `(s, g)`, including unlabeled voters.
    pub occupancy: Vec<((usize, usize), f64)>,
}

/// Counts records into a table. With `require_race`, inactive and
/// race-missing records are excluded first.
pub fn aggregate_voters(records: &[VoterRecord], require_race: bool) -> Result<VoterAggregate, IngestError> {
    let kept: Vec<&VoterRecord> = records.iter().filter(|v| !require_race || v.evaluable()).collect();
    let surnames: BTreeSet<&str> = kept.iter().map(|v| v.surname.as_str()).collect();
    let geos: BTreeSet<&str> = kept.iter().map(|v| v.geolocation.as_str()).collect();
    let labels = Arc::new(AxisLabels::new(
        surnames.into_iter().map(String::from).collect(),
        geos.into_iter().map(String::from).collect(),
    )?);
    let mut cells: BTreeMap<(usize, usize), (RaceVec, f64)> = BTreeMap::new();
    for v in kept {
        let k = (labels.surname_index(&v.surname).expect("label"), labels.geo_index(&v.geolocation).expect("label"));
        let e = cells.entry(k).or_insert(([0.0; N_RACES], 0.0));
        if let Some(r) = v.race {
            e.0[r.index()] += 1.0;
        }
        e.1 += 1.0;
    }
    let occupancy = cells.iter().map(|(&k, &(_, n))| (k, n)).collect();
    let table = ThreeWayTable::from_cells(labels, cells.into_iter().map(|((s, g), (c, _))| (s, g, c)))?;
    Ok(VoterAggregate { table, occupancy })
}

/// CPS-style histogram keys look like `non-hispanic:White+Black` or
/// `hispanic:Asian`; races are `White`, `Black`, `AIAN`, `Asian`, `HPI`.
pub const CPS_RACES: [&str; 5] = ["White", "Black", "AIAN", "Asian", "HPI"];

/// Every key of the documented CPS category set.
pub fn cps_categories() -> Vec<String> {
    let mut out = Vec::new();
    for origin in ["hispanic", "non-hispanic"] {
        for mask in 1u32..(1 << CPS_RACES.len()) {
            let races: Vec<&str> = (0..CPS_RACES.len()).filter(|i| mask & (1 << i) != 0).map(|i| CPS_RACES[i]).collect();
            out.push(format!("{origin}:{}", races.join("+")));
        }
    }
    out
}

fn cps_category(k: &str) -> Result<Race, IngestError> {
    let unknown = || IngestError::UnknownCategory { source_name: "cps".into(), category: k.to_string() };
    let (origin, races) = k.split_once(':').ok_or_else(unknown)?;
    let hispanic = match key(origin).as_str() {
        "hispanic" => true,
        "non-hispanic" => false,
        _ => return Err(unknown()),
    };
    let mut set = BTreeSet::new();
    for r in races.split('+') {
        let r = key(r);
        if !CPS_RACES.iter().any(|c| c.to_lowercase() == r) || !set.insert(r) {
            return Err(unknown());
        }
    }
    if hispanic {
        return Ok(Race::Hispanic);
    }
    let has = |r: &str| set.contains(r);
    let race = if set.len() == 1 {
        match set.iter().next().map(String::as_str) {
            Some("white") => Race::White,
            Some("black") => Race::Black,
            Some("aian") => Race::Aian,
            _ => Race::Api,
        }
    } else if has("black") {
        Race::Black
    } else if has("asian") || has("hpi") {
        Race::Api
    } else {
        Race::Other
    };
    Ok(race)
}

/// Collapses a CPS category histogram onto the six categories.
pub fn map_cps_categories(histogram: &BTreeMap<String, f64>) -> Result<RaceVec, IngestError> {
    let mut out = [0.0; N_RACES];
    for (k, &n) in histogram {
        out[cps_category(k)?.index()] += n;
    }
    Ok(out)
}

/// Survey margin file. `race_distribution` is required unless
/// `categories` (a CPS histogram) is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race_distribution: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race_counts: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeMap<String, f64>>,
}

fn race_vec_from_map(m: &BTreeMap<String, f64>) -> Result<RaceVec, IngestError> {
    let mut v = [0.0; N_RACES];
    for (k, &x) in m {
        let r: Race = k.parse().map_err(|_| IngestError::UnknownRaceKey(k.clone()))?;
        if !x.is_finite() || x < 0.0 {
            return Err(IngestError::InvalidTarget(format!("{k} = {x}")));
        }
        v[r.index()] = x;
    }
    Ok(v)
}

pub fn race_map(v: &RaceVec) -> BTreeMap<String, f64> {
    Race::ALL.iter().map(|r| (r.key().to_string(), v[r.index()])).collect()
}

impl MarginFile {
    pub fn parse<R: Read>(input: R) -> Result<Self, IngestError> {
        Ok(serde_json::from_reader(input)?)
    }

    pub fn from_counts(counts: &RaceVec) -> Self {
        let n = race::sum(counts);
        Self {
            race_distribution: Some(race_map(&counts.map(|c| if n > 0.0 { c / n } else { 0.0 }))),
            race_counts: Some(race_map(counts)),
            categories: None,
        }
    }

    /// Normalized race distribution.
    pub fn distribution(&self) -> Result<RaceVec, IngestError> {
        let raw = match (&self.race_distribution, &self.categories, &self.race_counts) {
            (Some(d), _, _) => race_vec_from_map(d)?,
            (None, Some(c), _) => map_cps_categories(c)?,
            (None, None, Some(c)) => race_vec_from_map(c)?,
            (None, None, None) => return Err(IngestError::InvalidTarget("no race_distribution, categories or race_counts".into())),
        };
        let n = race::sum(&raw);
        if !(n > 0.0) {
            return Err(IngestError::InvalidTarget("distribution sums to zero".into()));
        }
        Ok(raw.map(|x| x / n))
    }

    /// Count-scale race margin; falls back to `distribution · total`.
    pub fn counts(&self, total: f64) -> Result<RaceVec, IngestError> {
        match &self.race_counts {
            Some(c) => race_vec_from_map(c),
            None => Ok(self.distribution()?.map(|p| p * total)),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), IngestError> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_table<R: Read>(input: R) -> Result<ContingencyTable, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &TABLE_HEADER)?;
    let mut rows: Vec<(String, String, RaceVec)> = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != TABLE_HEADER.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", TABLE_HEADER.len(), rec.len())));
        }
        let s = normalize_surname(&rec[0]);
        let g = rec[1].trim().to_string();
        let counts = parse_race_vec(&rec, 2, &TABLE_HEADER).map_err(|r| malformed(line, r))?;
        if !seen.insert((s.clone(), g.clone())) {
            return Err(IngestError::DuplicateCell { line, surname: s, geoid: g });
        }
        rows.push((s, g, counts));
    }
    Ok(crate::table::build_table(&rows)?)
}

pub fn write_table<W: Write>(table: &ThreeWayTable, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    let labels = table.labels();
    for c in table.cells() {
        w.write_record(fmt_row([labels.surname(c.surname).to_string(), labels.geolocation(c.geo).to_string()], &c.counts))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell totals keyed by labels.
pub fn read_cells<R: Read>(input: R) -> Result<BTreeMap<(String, String), f64>, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &CELLS_HEADER)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != CELLS_HEADER.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", CELLS_HEADER.len(), rec.len())));
        }
        let s = normalize_surname(&rec[0]);
        let g = rec[1].trim().to_string();
        let n = parse_nonneg(&rec[2], "count").map_err(|r| malformed(line, r))?;
        if out.insert((s.clone(), g.clone()), n).is_some() {
            return Err(IngestError::DuplicateCell { line, surname: s, geoid: g });
        }
    }
    Ok(out)
}

pub fn write_cells<W: Write>(labels: &AxisLabels, cells: &[((usize, usize), f64)], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CELLS_HEADER)?;
    for &((s, g), n) in cells {
        w.write_record([labels.surname(s), labels.geolocation(g), &n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves labeled cell targets against `base` and pairs them with the
/// race margin.
pub fn margin_set_for(
    base: &PredictionTable,
    race: RaceVec,
    cells: &BTreeMap<(String, String), f64>,
) -> Result<MarginSet, IngestError> {
    let labels = base.labels();
    let mut out = BTreeMap::new();
    for ((s, g), &n) in cells {
        let si = labels.surname_index(s).ok_or_else(|| IngestError::UnknownLabel { axis: "surname", label: s.clone() })?;
        let gi = labels.geo_index(g).ok_or_else(|| IngestError::UnknownLabel { axis: "geolocation", label: g.clone() })?;
        out.insert((si, gi), n);
    }
    Ok(MarginSet::new(race, out)?)
}

/// Per-cell conditionals `p(r | s, g)` of a count-scale table; empty cells
/// are skipped.
pub fn write_conditionals<W: Write>(table: &ThreeWayTable, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONDITIONALS_HEADER)?;
    let labels = table.labels();
    for c in table.cells() {
        let n = c.total();
        if n > 0.0 {
            w.write_record(fmt_row([labels.surname(c.surname).to_string(), labels.geolocation(c.geo).to_string()], &c.counts.map(|x| x / n)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_region_map<R: Read>(input: R) -> Result<BTreeMap<String, String>, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &REGION_HEADER)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(malformed(line, "expected 2 fields"));
        }
        let g = rec[0].trim().to_string();
        if out.insert(g.clone(), rec[1].trim().to_string()).is_some() {
            return Err(IngestError::DuplicateGeolocation { line, geoid: g });
        }
    }
    Ok(out)
}

pub fn write_region_map<W: Write>(regions: &BTreeMap<String, String>, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REGION_HEADER)?;
    for (g, r) in regions {
        w.write_record([g, r])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejects<W: Write>(rejects: &[Reject], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["line", "reason"])?;
    for r in rejects {
        w.write_record([r.line.to_string(), r.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Prediction-time flags: `surname,geoid,reason`.
pub fn write_cell_rejects<W: Write>(rejects: &[CellReject], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["surname", "geoid", "reason"])?;
    for r in rejects {
        w.write_record([r.surname.as_str(), &r.geolocation, r.reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Size and per-race quotas for a subsample with race distribution `target`.
pub fn subsample_quotas(available: &[usize; N_RACES], target: &RaceVec) -> Result<(usize, [usize; N_RACES]), IngestError> {
    if target.iter().any(|t| !t.is_finite() || *t < 0.0) || (race::sum(target) - 1.0).abs() > 1e-6 {
        return Err(IngestError::InvalidTarget(format!("{target:?} is not a probability vector")));
    }
    let mut n = f64::INFINITY;
    for r in 0..N_RACES {
        if target[r] > 0.0 {
            if available[r] == 0 {
                return Err(IngestError::NoRecordsForRace(Race::ALL[r]));
            }
            n = n.min(available[r] as f64 / target[r]);
        }
    }
    let n = (n + 1e-9).floor() as usize;
    let mut quotas = [0usize; N_RACES];
    let mut rema = Vec::with_capacity(N_RACES);
    for r in 0..N_RACES {
        let exact = n as f64 * target[r];
        quotas[r] = (exact.floor() as usize).min(available[r]);
        rema.push((exact - quotas[r] as f64, r));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut short = n - quotas.iter().sum::<usize>().min(n);
    for &(_, r) in &rema {
        if short == 0 {
            break;
        }
        if target[r] > 0.0 && quotas[r] < available[r] {
            quotas[r] += 1;
            short -= 1;
        }
    }
    Ok((n, quotas))
}

/// Samples race-labeled records without replacement so their race
/// distribution matches `target` as closely as largest-remainder rounding
/// allows. Output order is shuffled.
pub fn subsample_to_margin(records: &[VoterRecord], target: &RaceVec, seed: u64) -> Result<Vec<VoterRecord>, IngestError> {
    let mut by_race: [Vec<usize>; N_RACES] = Default::default();
    for (i, v) in records.iter().enumerate() {
        let r = v.race.ok_or_else(|| IngestError::UnlabeledRecord(v.voter_id.clone()))?;
        by_race[r.index()].push(i);
    }
    let available = by_race.each_ref().map(Vec::len);
    let (_, quotas) = subsample_quotas(&available, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(quotas.iter().sum());
    for r in 0..N_RACES {
        let pool = &by_race[r];
        chosen.extend(rand::seq::index::sample(&mut rng, pool.len(), quotas[r]).into_iter().map(|k| pool[k]));
    }
    chosen.shuffle(&mut rng);
    Ok(chosen.into_iter().map(|i| records[i].clone()).collect())
}
