use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use raketab_core::bisg::{self, voter_adjustment, weighted_predictions, Method};
use raketab_core::calibmap::{apply_calibration_map, solve_calibration_map};
use raketab_core::ingest::{self, MarginFile, VoterRecord};
use raketab_core::metrics::{self, Orientation};
use raketab_core::raking::{kl_divergence, rake as rake_table, RakingConfig, SweepOrder};
use raketab_core::synth::{generate, DrawMode, SynthConfig};
use raketab_core::{AxisLabels, Race, RaceVec, ThreeWayTable, N_RACES};
use serde_json::json;

use crate::output::{CliError, Run};
use crate::*;

fn table_from(bytes: &[u8]) -> Result<ThreeWayTable, CliError> {
    Ok(ingest::read_table(bytes)?)
}

fn race_vec_arg(v: &[f64]) -> Result<RaceVec, CliError> {
    v.try_into().map_err(|_| CliError::input(format!("expected {N_RACES} values, got {}", v.len())))
}

/// Puts `table` on `labels`; every label used by `table` must exist there.
fn relabel(table: &ThreeWayTable, labels: Arc<AxisLabels>) -> Result<ThreeWayTable, CliError> {
    let l = table.labels();
    let cells = table.cells().iter().map(|c| (l.surname(c.surname), l.geolocation(c.geo), c.counts));
    Ok(ThreeWayTable::from_labeled_cells(labels, cells)?)
}

pub fn fit_factors(a: &FitFactorsArgs) -> Result<(), CliError> {
    let mut run = Run::new("fit-factors", &a.out_dir, a)?;
    let table = table_from(&run.read(&a.table)?)?;
    let factors = bisg::fit_factors(&table)?;
    let counts = factors.surname_counts().cloned().unwrap_or_default();
    run.write("surname_factors.csv", |w| ingest::write_surname_factors(factors.race_given_surname(), &counts, w))?;
    let labels = table.labels();
    let geo_rows: Vec<(usize, RaceVec)> =
        table.geo_race_margin().into_iter().enumerate().filter(|(_, c)| c.iter().sum::<f64>() > 0.0).collect();
    run.write("geo_factors.csv", |w| ingest::write_geo_factors(geo_rows.iter().map(|(g, c)| (labels.geolocation(*g), *c)), w))?;
    run.finish()
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let mut run = Run::new("predict", &a.out_dir, a)?;
    let surname = ingest::parse_surname_factors(run.read(&a.surname_factors)?.as_slice())?;
    let geo = ingest::parse_geo_factors(run.read(&a.geo_factors)?.as_slice())?;
    let factors = ingest::assemble_factors(&geo, &surname)?;

    let (labels, occupancy) = if let Some(path) = &a.voters {
        let records = ingest::parse_voter_file(run.read(path)?.as_slice(), &a.mapping.mapping())?;
        run.note("voter_records", records.len())?;
        let agg = ingest::aggregate_voters(&records, a.require_race)?;
        (agg.table.shared_labels(), agg.occupancy)
    } else {
        let path = a.cells.as_ref().ok_or_else(|| CliError::input("one of --voters or --cells is required"))?;
        let cells = ingest::read_cells(run.read(path)?.as_slice())?;
        let surnames: std::collections::BTreeSet<&String> = cells.keys().map(|k| &k.0).collect();
        let geos: std::collections::BTreeSet<&String> = cells.keys().map(|k| &k.1).collect();
        let labels = Arc::new(AxisLabels::new(surnames.into_iter().cloned().collect(), geos.into_iter().cloned().collect())?);
        let occ = cells
            .iter()
            .map(|((s, g), n)| ((labels.surname_index(s).expect("label"), labels.geo_index(g).expect("label")), *n))
            .collect();
        (labels, occ)
    };

    let adjustment = match &a.adjust_cps {
        Some(path) => {
            let cps = MarginFile::parse(run.read(path)?.as_slice())?.distribution()?;
            let adj = voter_adjustment(&cps, factors.race_prior())?;
            run.note("adjustment_weight", ingest::race_map(&adj.weight))?;
            Some(adj)
        }
        None => None,
    };
    let method = match a.method {
        MethodArg::Bisg => Method::Bisg,
        MethodArg::GeoOnly => Method::GeoOnly,
        MethodArg::SurnameOnly => Method::SurnameOnly,
    };
    let pred = weighted_predictions(&factors, labels.clone(), &occupancy, method, adjustment.as_ref());
    run.note("flagged_cells", pred.rejects.len())?;
    run.write("predictions.csv", |w| ingest::write_table(&pred.table, w))?;
    run.write("conditionals.csv", |w| ingest::write_conditionals(&pred.table, w))?;
    run.write("cells.csv", |w| ingest::write_cells(&labels, &occupancy, w))?;
    run.write("prediction_rejects.csv", |w| ingest::write_cell_rejects(&pred.rejects, w))?;
    run.write("surname_rejects.csv", |w| ingest::write_rejects(&surname.rejects, w))?;
    run.write("geo_rejects.csv", |w| ingest::write_rejects(&geo.rejects, w))?;
    run.finish()
}

pub fn rake(a: &RakeArgs) -> Result<(), CliError> {
    let mut run = Run::new("rake", &a.out_dir, a)?;
    let base = table_from(&run.read(&a.base)?)?;
    let margin = MarginFile::parse(run.read(&a.race_margin)?.as_slice())?;
    let cells: BTreeMap<(String, String), f64> = match &a.cell_margin {
        Some(path) => ingest::read_cells(run.read(path)?.as_slice())?,
        None => {
            let l = base.labels();
            base.cell_totals().into_iter().map(|((s, g), n)| ((l.surname(s).to_string(), l.geolocation(g).to_string()), n)).collect()
        }
    };
    let total: f64 = cells.values().sum();
    let targets = ingest::margin_set_for(&base, margin.counts(total)?, &cells)?;
    let config = RakingConfig {
        tolerance: a.tol,
        max_iterations: a.max_iters,
        order: match a.order {
            OrderArg::RaceFirst => SweepOrder::RaceFirst,
            OrderArg::CellFirst => SweepOrder::CellFirst,
        },
    };
    let result = rake_table(&base, &targets, &config)?;
    run.iterations(result.iterations);
    let kl = kl_divergence(&result.table, &base)?;
    run.write("raked.csv", |w| ingest::write_table(&result.table, w))?;
    run.write("conditionals.csv", |w| ingest::write_conditionals(&result.table, w))?;
    run.write("theta_race.csv", |w| -> Result<(), CliError> {
        writeln!(w, "race,theta")?;
        for r in Race::ALL {
            writeln!(w, "{},{}", r.key(), result.theta_r[r.index()])?;
        }
        Ok(())
    })?;
    let labels = base.labels();
    run.write("theta_cell.csv", |w| -> Result<(), CliError> {
        writeln!(w, "surname,geoid,theta")?;
        for (&(s, g), th) in &result.theta_sg {
            writeln!(w, "{},{},{}", labels.surname(s), labels.geolocation(g), th)?;
        }
        Ok(())
    })?;
    run.write_json(
        "rake_report.json",
        &json!({
            "iterations": result.iterations,
            "final_margin_gap": result.final_margin_gap,
            "kl_to_base": kl,
        }),
    )?;
    run.finish()
}

pub fn calib_map(a: &CalibMapArgs) -> Result<(), CliError> {
    let mut run = Run::new("calib-map", &a.out_dir, a)?;
    let u = MarginFile::parse(run.read(&a.source)?.as_slice())?.distribution()?;
    let v = MarginFile::parse(run.read(&a.target)?.as_slice())?.distribution()?;
    let map = solve_calibration_map(&u, &v)?;
    run.iterations(map.iterations);
    run.write("calibration_map.csv", |w| -> Result<(), CliError> {
        write!(w, "race")?;
        for r in Race::ALL {
            write!(w, ",{}", r.key())?;
        }
        writeln!(w)?;
        for i in Race::ALL {
            write!(w, "{}", i.key())?;
            for j in 0..N_RACES {
                write!(w, ",{}", map.matrix[(i.index(), j)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    run.write_json("calib_report.json", &json!({ "objective": map.objective, "kkt_residual": map.kkt_residual, "iterations": map.iterations }))?;
    if let Some(path) = &a.apply {
        let pred = table_from(&run.read(path)?)?;
        let mut bad = None;
        let out = pred.map_counts(|c| {
            let n = c.total();
            if n <= 0.0 {
                return c.counts;
            }
            match apply_calibration_map(&map, &c.counts.map(|x| x / n)) {
                Ok(p) => std::array::from_fn(|r| p[r] * n),
                Err(e) => {
                    bad.get_or_insert(e);
                    c.counts
                }
            }
        });
        if let Some(e) = bad {
            return Err(e.into());
        }
        run.write("calibrated.csv", |w| ingest::write_table(&out, w))?;
    }
    run.finish()
}

pub fn subsample(a: &SubsampleArgs) -> Result<(), CliError> {
    let mut run = Run::new("subsample", &a.out_dir, a)?;
    run.seed(a.seed);
    let records = ingest::parse_voter_file(run.read(&a.voters)?.as_slice(), &a.mapping.mapping())?;
    let target = MarginFile::parse(run.read(&a.target)?.as_slice())?.distribution()?;
    let usable: Vec<VoterRecord> = ingest::evaluable_only(&records);
    run.note("dropped_inactive_or_unlabeled", records.len() - usable.len())?;
    let sample = ingest::subsample_to_margin(&usable, &target, a.seed)?;
    let mut counts = [0usize; N_RACES];
    for v in &sample {
        counts[v.race.expect("labeled").index()] += 1;
    }
    run.write("voters.csv", |w| ingest::write_voter_file(&sample, w))?;
    run.write_json(
        "subsample_report.json",
        &json!({ "n": sample.len(), "quotas": Race::ALL.iter().map(|r| (r.key(), counts[r.index()])).collect::<BTreeMap<_, _>>() }),
    )?;
    run.finish()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let mut run = Run::new("evaluate", &a.out_dir, a)?;
    let truth = table_from(&run.read(&a.truth)?)?;
    let pred = relabel(&table_from(&run.read(&a.predictions)?)?, truth.shared_labels())?;
    let regions = match &a.regions {
        Some(path) => Some(ingest::read_region_map(run.read(path)?.as_slice())?),
        None => None,
    };
    let orientation = match a.orientation {
        OrientationArg::EstimateMinusTruth => Orientation::EstimateMinusTruth,
        OrientationArg::TruthMinusEstimate => Orientation::TruthMinusEstimate,
    };
    let subpop = metrics::subpop_report(&truth, &pred, orientation)?;
    let cellwise = metrics::cellwise_report(&truth, &pred, regions.as_ref())?;
    let curves = metrics::calibration_curves(&truth, &pred)?;
    run.write("subpop.csv", |w| metrics::write_subpop_csv(&subpop, &truth, w))?;
    run.write("cellwise.csv", |w| metrics::write_cellwise_csv(&cellwise, &truth, w))?;
    run.write("calibration_curves.csv", |w| metrics::write_curves_csv(&curves, w))?;
    run.write("kuiper.csv", |w| metrics::write_kuiper_csv(&curves, w))?;
    run.write_json(
        "summary.json",
        &json!({
            "orientation": subpop.orientation,
            "mean_absolute_subpop_error": subpop.mean_absolute_error(),
            "by_race": subpop.by_race,
            "cellwise_overall": cellwise.overall,
            "cellwise_by_region": cellwise.by_region,
            "kuiper": curves.iter().map(|c| (c.race.key(), c.kuiper)).collect::<BTreeMap<_, _>>(),
        }),
    )?;
    run.finish()
}

fn voters_from_table(table: &ThreeWayTable) -> Option<Vec<VoterRecord>> {
    const MAX_VOTERS: f64 = 5_000_000.0;
    if table.total() > MAX_VOTERS || table.cells().iter().any(|c| c.counts.iter().any(|v| v.fract() != 0.0)) {
        return None;
    }
    let width = (table.total() as usize).to_string().len();
    let l = table.labels();
    let mut out = Vec::with_capacity(table.total() as usize);
    for c in table.cells() {
        for race in Race::ALL {
            for _ in 0..c.counts[race.index()] as usize {
                out.push(VoterRecord {
                    voter_id: format!("V{:0width$}", out.len()),
                    surname: l.surname(c.surname).to_string(),
                    geolocation: l.geolocation(c.geo).to_string(),
                    race: Some(race),
                    active: true,
                });
            }
        }
    }
    Some(out)
}

fn write_margins(run: &mut Run, table: &ThreeWayTable) -> Result<(), CliError> {
    let margin = MarginFile::from_counts(&table.race_margin());
    run.write("race_margin.json", |w| margin.write(w))?;
    run.write("cells.csv", |w| ingest::write_cells(table.labels(), &table.cell_totals(), w))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut run = Run::new("synth", &a.out_dir, a)?;
    run.seed(a.seed);
    let config = SynthConfig {
        n_surnames: a.n_surnames,
        n_geolocations: a.n_geolocations,
        race_mix: race_vec_arg(&a.race_mix)?,
        dependence: a.dependence,
        total_population: a.total,
        seed: a.seed,
        draw: match a.draw {
            DrawArg::Expected => DrawMode::Expected,
            DrawArg::Multinomial => DrawMode::Multinomial,
        },
    };
    let table = generate(&config)?;
    run.write("table.csv", |w| ingest::write_table(&table, w))?;
    write_margins(&mut run, &table)?;
    if let Some(voters) = voters_from_table(&table) {
        run.write("voters.csv", |w| ingest::write_voter_file(&voters, w))?;
    }
    run.write_json("synth_config.json", &config)?;
    run.finish()
}

pub fn margins(a: &MarginsArgs) -> Result<(), CliError> {
    let mut run = Run::new("margins", &a.out_dir, a)?;
    let table = table_from(&run.read(&a.table)?)?;
    write_margins(&mut run, &table)?;
    run.finish()
}
