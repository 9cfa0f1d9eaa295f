//! Sparse three-way (surname × geolocation × race) tables, margins and
//! per-cell conditional views.
//!
//! Cells are keyed by `(surname index, geolocation index)` and carry a dense
//! six-entry race vector. Axis labels are sorted and unique, so cell order
//! (and everything derived from it) is deterministic.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::race::{self, RaceVec, N_RACES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("empty table")]
    EmptyTable,
    #[error("record {index}: negative weight {value}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("record {index}: non-finite weight")]
    NonFiniteWeight { index: usize },
    #[error("record {index}: empty {axis} label")]
    EmptyLabel { index: usize, axis: &'static str },
    #[error("duplicate {axis} label `{label}`")]
    DuplicateLabel { axis: &'static str, label: String },
    #[error("{axis} label `{label}` not present in axis labels")]
    UnknownLabel { axis: &'static str, label: String },
    #[error("cell ({surname}, {geo}) is outside the axis labels")]
    IndexOutOfRange { surname: usize, geo: usize },
    #[error("empty cell conditional")]
    EmptyCellConditional,
    #[error("margin requires at least one retained axis")]
    NoAxes,
    #[error("negative margin target {value}")]
    NegativeTarget { value: f64 },
    #[error("inconsistent margins: race targets sum to {race_total}, cell targets sum to {cell_total}")]
    InconsistentMargins { race_total: f64, cell_total: f64 },
    #[error("tables do not share axis labels")]
    LabelMismatch,
}

/// Labels for the surname and geolocation axes, plus an optional grouping of
/// geolocations into named regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisLabels {
    surnames: Vec<String>,
    geolocations: Vec<String>,
    regions: Option<BTreeMap<String, String>>,
}

impl AxisLabels {
    /// Builds labels from already-distinct values; they are sorted
    /// lexicographically. Duplicates are an error.
    pub fn new(surnames: Vec<String>, geolocations: Vec<String>) -> Result<Self, TableError> {
        let surnames = sorted_unique(surnames, "surname")?;
        let geolocations = sorted_unique(geolocations, "geolocation")?;
        if surnames.is_empty() || geolocations.is_empty() {
            return Err(TableError::EmptyTable);
        }
        Ok(Self { surnames, geolocations, regions: None })
    }

    pub fn with_regions(mut self, regions: BTreeMap<String, String>) -> Self {
        self.regions = Some(regions);
        self
    }

    pub fn surnames(&self) -> &[String] {
        &self.surnames
    }

    pub fn geolocations(&self) -> &[String] {
        &self.geolocations
    }

    pub fn regions(&self) -> Option<&BTreeMap<String, String>> {
        self.regions.as_ref()
    }

    pub fn n_surnames(&self) -> usize {
        self.surnames.len()
    }

    pub fn n_geolocations(&self) -> usize {
        self.geolocations.len()
    }

    pub fn surname_index(&self, surname: &str) -> Option<usize> {
        self.surnames.binary_search_by(|s| s.as_str().cmp(surname)).ok()
    }

    pub fn geo_index(&self, geo: &str) -> Option<usize> {
        self.geolocations.binary_search_by(|g| g.as_str().cmp(geo)).ok()
    }

    pub fn surname(&self, index: usize) -> &str {
        &self.surnames[index]
    }

    pub fn geolocation(&self, index: usize) -> &str {
        &self.geolocations[index]
    }

    /// Same surname and geolocation axes (regions are ignored).
    pub fn same_axes(&self, other: &AxisLabels) -> bool {
        self.surnames == other.surnames && self.geolocations == other.geolocations
    }
}

fn sorted_unique(mut values: Vec<String>, axis: &'static str) -> Result<Vec<String>, TableError> {
    values.sort_unstable();
    if let Some(w) = values.windows(2).find(|w| w[0] == w[1]) {
        return Err(TableError::DuplicateLabel { axis, label: w[0].clone() });
    }
    Ok(values)
}

/// One occupied `(surname, geolocation)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub surname: usize,
    pub geo: usize,
    pub counts: RaceVec,
}

impl Cell {
    #[inline]
    pub fn key(&self) -> (usize, usize) {
        (self.surname, self.geo)
    }

    #[inline]
    pub fn total(&self) -> f64 {
        race::sum(&self.counts)
    }
}

/// Sparse nonnegative three-way table. Absent cells are exactly zero.
///
/// Used both for known counts `x_{sgr}` ([`ContingencyTable`]) and for
/// count-scale predictions `m_{sgr}` ([`PredictionTable`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeWayTable {
    labels: Arc<AxisLabels>,
    cells: Vec<Cell>,
}

pub type ContingencyTable = ThreeWayTable;
pub type PredictionTable = ThreeWayTable;

/// Which axes a margin retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub surname: bool,
    pub geo: bool,
    pub race: bool,
}

impl Axes {
    pub const S: Axes = Axes { surname: true, geo: false, race: false };
    pub const G: Axes = Axes { surname: false, geo: true, race: false };
    pub const R: Axes = Axes { surname: false, geo: false, race: true };
    pub const SG: Axes = Axes { surname: true, geo: true, race: false };
    pub const SR: Axes = Axes { surname: true, geo: false, race: true };
    pub const GR: Axes = Axes { surname: false, geo: true, race: true };
    pub const SGR: Axes = Axes { surname: true, geo: true, race: true };

    pub fn is_subset_of(self, other: Axes) -> bool {
        (!self.surname || other.surname) && (!self.geo || other.geo) && (!self.race || other.race)
    }
}

impl ThreeWayTable {
    /// Builds a table from `(surname index, geo index, counts)` triples.
    /// Repeated keys accumulate. Counts must be finite and nonnegative.
    pub fn from_cells<I>(labels: Arc<AxisLabels>, cells: I) -> Result<Self, TableError>
    where
        I: IntoIterator<Item = (usize, usize, RaceVec)>,
    {
        let mut acc: BTreeMap<(usize, usize), RaceVec> = BTreeMap::new();
        for (index, (s, g, counts)) in cells.into_iter().enumerate() {
            if s >= labels.n_surnames() || g >= labels.n_geolocations() {
                return Err(TableError::IndexOutOfRange { surname: s, geo: g });
            }
            check_weights(index, &counts)?;
            let slot = acc.entry((s, g)).or_insert([0.0; N_RACES]);
            for (a, c) in slot.iter_mut().zip(counts) {
                *a += c;
            }
        }
        let cells = acc
            .into_iter()
            .map(|((surname, geo), counts)| Cell { surname, geo, counts })
            .collect();
        Ok(Self { labels, cells })
    }

    /// Like [`ThreeWayTable::from_cells`] but keyed by label strings, which
    /// must all be present in `labels`.
    pub fn from_labeled_cells<'a, I>(labels: Arc<AxisLabels>, cells: I) -> Result<Self, TableError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, RaceVec)>,
    {
        let mut indexed = Vec::new();
        for (s, g, counts) in cells {
            let si = labels
                .surname_index(s)
                .ok_or_else(|| TableError::UnknownLabel { axis: "surname", label: s.to_string() })?;
            let gi = labels
                .geo_index(g)
                .ok_or_else(|| TableError::UnknownLabel { axis: "geolocation", label: g.to_string() })?;
            indexed.push((si, gi, counts));
        }
        Self::from_cells(labels, indexed)
    }

    /// Internal constructor for callers that already hold sorted, validated
    /// cells on `labels`.
    pub(crate) fn from_sorted_cells(labels: Arc<AxisLabels>, cells: Vec<Cell>) -> Self {
        debug_assert!(cells.windows(2).all(|w| w[0].key() < w[1].key()));
        Self { labels, cells }
    }

    pub fn labels(&self) -> &AxisLabels {
        &self.labels
    }

    pub fn shared_labels(&self) -> Arc<AxisLabels> {
        Arc::clone(&self.labels)
    }

    /// Occupied cells in `(surname, geo)` order.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, surname: usize, geo: usize) -> Option<&RaceVec> {
        self.position(surname, geo).map(|i| &self.cells[i].counts)
    }

    pub fn get_by_label(&self, surname: &str, geo: &str) -> Option<&RaceVec> {
        let s = self.labels.surname_index(surname)?;
        let g = self.labels.geo_index(geo)?;
        self.get(s, g)
    }

    pub(crate) fn position(&self, surname: usize, geo: usize) -> Option<usize> {
        self.cells.binary_search_by(|c| c.key().cmp(&(surname, geo))).ok()
    }

    pub fn same_labels(&self, other: &ThreeWayTable) -> bool {
        Arc::ptr_eq(&self.labels, &other.labels) || self.labels.same_axes(&other.labels)
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().map(Cell::total).sum()
    }

    /// `x_{++r}`.
    pub fn race_margin(&self) -> RaceVec {
        let mut out = [0.0; N_RACES];
        for c in &self.cells {
            for (o, v) in out.iter_mut().zip(c.counts) {
                *o += v;
            }
        }
        out
    }

    /// `x_{sg+}` for every occupied cell, in cell order.
    pub fn cell_totals(&self) -> Vec<((usize, usize), f64)> {
        self.cells.iter().map(|c| (c.key(), c.total())).collect()
    }

    /// `x_{+gr}`, indexed by geolocation.
    pub fn geo_race_margin(&self) -> Vec<RaceVec> {
        let mut out = vec![[0.0; N_RACES]; self.labels.n_geolocations()];
        for c in &self.cells {
            for (o, v) in out[c.geo].iter_mut().zip(c.counts) {
                *o += v;
            }
        }
        out
    }

    /// `x_{s+r}`, indexed by surname.
    pub fn surname_race_margin(&self) -> Vec<RaceVec> {
        let mut out = vec![[0.0; N_RACES]; self.labels.n_surnames()];
        for c in &self.cells {
            for (o, v) in out[c.surname].iter_mut().zip(c.counts) {
                *o += v;
            }
        }
        out
    }

    /// Dense margin over the retained axes, in `(surname, geo, race)` axis
    /// order.
    pub fn margin(&self, axes: Axes) -> Result<ArrayD<f64>, TableError> {
        if !(axes.surname || axes.geo || axes.race) {
            return Err(TableError::NoAxes);
        }
        let mut shape = Vec::with_capacity(3);
        if axes.surname {
            shape.push(self.labels.n_surnames());
        }
        if axes.geo {
            shape.push(self.labels.n_geolocations());
        }
        if axes.race {
            shape.push(N_RACES);
        }
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let mut idx = Vec::with_capacity(3);
        for c in &self.cells {
            for (r, v) in c.counts.iter().enumerate() {
                idx.clear();
                if axes.surname {
                    idx.push(c.surname);
                }
                if axes.geo {
                    idx.push(c.geo);
                }
                if axes.race {
                    idx.push(r);
                }
                out[idx.as_slice()] += v;
            }
        }
        Ok(out)
    }

    /// Per-cell conditional `p(r | s, g)`, skipping zero-sum cells.
    pub fn conditionals(&self) -> impl Iterator<Item = (&Cell, RaceVec)> + '_ {
        self.cells
            .iter()
            .filter_map(|c| conditional_race(&c.counts).ok().map(|p| (c, p)))
    }

    /// Applies `f` to every cell's race vector, keeping support and labels.
    pub fn map_counts<F>(&self, mut f: F) -> ThreeWayTable
    where
        F: FnMut(&Cell) -> RaceVec,
    {
        let cells = self
            .cells
            .iter()
            .map(|c| Cell { surname: c.surname, geo: c.geo, counts: f(c) })
            .collect();
        Self { labels: Arc::clone(&self.labels), cells }
    }
}

fn check_weights(index: usize, counts: &RaceVec) -> Result<(), TableError> {
    for &v in counts {
        if !v.is_finite() {
            return Err(TableError::NonFiniteWeight { index });
        }
        if v < 0.0 {
            return Err(TableError::NegativeWeight { index, value: v });
        }
    }
    Ok(())
}

/// Aggregates `(surname, geolocation, race weights)` records into a table.
/// Axis labels are the sorted distinct values encountered.
pub fn build_table<S, G>(records: &[(S, G, RaceVec)]) -> Result<ContingencyTable, TableError>
where
    S: AsRef<str>,
    G: AsRef<str>,
{
    if records.is_empty() {
        return Err(TableError::EmptyTable);
    }
    let mut surnames = Vec::new();
    let mut geos = Vec::new();
    for (index, (s, g, counts)) in records.iter().enumerate() {
        let (s, g) = (s.as_ref(), g.as_ref());
        if s.is_empty() {
            return Err(TableError::EmptyLabel { index, axis: "surname" });
        }
        if g.is_empty() {
            return Err(TableError::EmptyLabel { index, axis: "geolocation" });
        }
        check_weights(index, counts)?;
        surnames.push(s.to_string());
        geos.push(g.to_string());
    }
    surnames.sort_unstable();
    surnames.dedup();
    geos.sort_unstable();
    geos.dedup();
    let labels = Arc::new(AxisLabels::new(surnames, geos)?);
    ThreeWayTable::from_labeled_cells(
        Arc::clone(&labels),
        records.iter().map(|(s, g, c)| (s.as_ref(), g.as_ref(), *c)),
    )
}

/// Normalizes a cell's race vector to `p(r | s, g)`.
pub fn conditional_race(cell: &RaceVec) -> Result<RaceVec, TableError> {
    let total = race::sum(cell);
    if !(total > 0.0) || !total.is_finite() {
        return Err(TableError::EmptyCellConditional);
    }
    let mut out = *cell;
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Target margins for raking: `x_{++r}` and `x_{sg+}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginSet {
    race: RaceVec,
    cell: BTreeMap<(usize, usize), f64>,
}

impl MarginSet {
    /// Validates nonnegativity and that both families share a total
    /// (relative tolerance `1e-9`).
    pub fn new(race: RaceVec, cell: BTreeMap<(usize, usize), f64>) -> Result<Self, TableError> {
        for &v in race.iter().chain(cell.values()) {
            if !v.is_finite() || v < 0.0 {
                return Err(TableError::NegativeTarget { value: v });
            }
        }
        let race_total: f64 = race.iter().sum();
        let cell_total: f64 = cell.values().sum();
        let scale = race_total.abs().max(cell_total.abs()).max(f64::MIN_POSITIVE);
        if (race_total - cell_total).abs() > 1e-9 * scale {
            return Err(TableError::InconsistentMargins { race_total, cell_total });
        }
        Ok(Self { race, cell })
    }

    /// The `x_{++r}` and `x_{sg+}` margins of `table` itself.
    pub fn of(table: &ThreeWayTable) -> Self {
        Self {
            race: table.race_margin(),
            cell: table.cell_totals().into_iter().collect(),
        }
    }

    pub fn race(&self) -> &RaceVec {
        &self.race
    }

    pub fn cell(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.cell
    }

    /// Target for `(s, g)`; absent cells are zero.
    pub fn cell_target(&self, surname: usize, geo: usize) -> f64 {
        self.cell.get(&(surname, geo)).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The 2×2×2 dependence fixture: two surnames, two geolocations, counts
    /// on the first two race columns.
    pub fn f1() -> ContingencyTable {
        let rec = |s: &str, g: &str, a: f64, b: f64| (s.to_string(), g.to_string(), [a, b, 0.0, 0.0, 0.0, 0.0]);
        build_table(&[
            rec("s1", "g1", 9.0, 1.0),
            rec("s1", "g2", 1.0, 4.0),
            rec("s2", "g1", 2.0, 8.0),
            rec("s2", "g2", 5.0, 10.0),
        ])
        .unwrap()
    }
}
