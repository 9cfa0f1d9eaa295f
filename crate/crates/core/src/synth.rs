//! Synthetic populations with a tunable violation of conditional
//! independence between surname and geolocation given race.
//!
//! The table is the mixture `(1 − δ)·I + δ·D` where `I` is the product
//! `N·π_r·P(s|r)·P(g|r)` and `D` puts each race's surname mass on one
//! geolocation per surname, `g = (s + offset_r) mod n_g`. Every random draw
//! is made before `δ` is used, so changing only `δ` keeps the same
//! ingredients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bisg::{fit_factors, BisgError, BisgFactors};
use crate::race::{self, RaceVec, N_RACES};
use crate::table::{AxisLabels, ContingencyTable, MarginSet, TableError, ThreeWayTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Bisg(#[from] BisgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// Cell values are expected counts.
    #[default]
    Expected,
    /// Integer counts drawn multinomially with the expected table as mean.
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_surnames: usize,
    pub n_geolocations: usize,
    pub race_mix: RaceVec,
    /// `δ ∈ [0, 1]`.
    pub dependence: f64,
    pub total_population: f64,
    pub seed: u64,
    #[serde(default)]
    pub draw: DrawMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_surnames: 50,
            n_geolocations: 10,
            race_mix: [0.01, 0.05, 0.15, 0.2, 0.55, 0.04],
            dependence: 0.0,
            total_population: 100_000.0,
            seed: 0,
            draw: DrawMode::Expected,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_surnames < 2 || self.n_geolocations < 2 {
            return bad(format!("axis sizes must be at least 2, got {}×{}", self.n_surnames, self.n_geolocations));
        }
        if self.race_mix.iter().any(|p| !p.is_finite() || *p < 0.0) || (race::sum(&self.race_mix) - 1.0).abs() > 1e-9 {
            return bad(format!("race_mix {:?} is not a probability vector", self.race_mix));
        }
        if !(0.0..=1.0).contains(&self.dependence) {
            return bad(format!("dependence {} outside [0, 1]", self.dependence));
        }
        if !(self.total_population >= 1.0) || !self.total_population.is_finite() {
            return bad(format!("total_population {} must be at least 1", self.total_population));
        }
        Ok(())
    }
}

fn exp_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Zero-padded labels sort lexicographically in numeric order.
fn labels(n_s: usize, n_g: usize) -> Arc<AxisLabels> {
    let ws = n_s.to_string().len();
    let wg = n_g.to_string().len();
    let surnames = (0..n_s).map(|s| format!("S{s:0ws$}")).collect();
    let geos = (0..n_g).map(|g| format!("G{g:0wg$}")).collect();
    Arc::new(AxisLabels::new(surnames, geos).expect("distinct generated labels"))
}

pub fn generate(config: &SynthConfig) -> Result<ContingencyTable, SynthError> {
    config.validate()?;
    let (n_s, n_g) = (config.n_surnames, config.n_geolocations);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p_s: Vec<Vec<f64>> = (0..N_RACES).map(|_| exp_weights(&mut rng, n_s)).collect();
    let p_g: Vec<Vec<f64>> = (0..N_RACES).map(|_| exp_weights(&mut rng, n_g)).collect();
    let offsets: Vec<usize> = (0..N_RACES).map(|_| rng.random_range(0..n_g)).collect();

    let delta = config.dependence;
    let n = config.total_population;
    let mut dense = vec![[0.0; N_RACES]; n_s * n_g];
    for r in 0..N_RACES {
        let mass = n * config.race_mix[r];
        if mass == 0.0 {
            continue;
        }
        for s in 0..n_s {
            let ms = mass * p_s[r][s];
            if delta < 1.0 {
                for g in 0..n_g {
                    dense[s * n_g + g][r] += (1.0 - delta) * ms * p_g[r][g];
                }
            }
            if delta > 0.0 {
                dense[s * n_g + (s + offsets[r]) % n_g][r] += delta * ms;
            }
        }
    }

    if config.draw == DrawMode::Multinomial {
        // Sequential binomials: each cell takes its share of what is left.
        let mut left = n.round() as u64;
        let mut mass_left: f64 = dense.iter().map(race::sum).sum();
        for cell in dense.iter_mut() {
            for v in cell.iter_mut() {
                let p = if mass_left > 0.0 { (*v / mass_left).clamp(0.0, 1.0) } else { 0.0 };
                mass_left -= *v;
                let k = if left == 0 || p == 0.0 { 0 } else { Binomial::new(left, p).expect("valid binomial").sample(&mut rng) };
                left -= k;
                *v = k as f64;
            }
        }
    }

    let labels = labels(n_s, n_g);
    let cells = dense
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.iter().any(|v| *v > 0.0))
        .map(|(i, c)| (i / n_g, i % n_g, c));
    Ok(ThreeWayTable::from_cells(labels, cells)?)
}

/// Self-fit factors and the table itself as truth.
pub fn split_factors_and_truth(table: &ContingencyTable) -> Result<(BisgFactors, ContingencyTable), SynthError> {
    Ok((fit_factors(table)?, table.clone()))
}

/// True cell margins with the race margin multiplied by `exp(σ·z_r)`,
/// `z_r` standard normal, then rescaled to the true total. Mimics a noisy
/// survey estimate of the race distribution.
pub fn perturbed_margins(truth: &ContingencyTable, sigma: f64, seed: u64) -> Result<MarginSet, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let race = truth.race_margin();
    let noisy: RaceVec = race.map(|x| x * (sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp());
    let scale = race::sum(&race) / race::sum(&noisy);
    let cells = MarginSet::of(truth).cell().clone();
    Ok(MarginSet::new(noisy.map(|x| x * scale), cells)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bisg::{bisg_counts_on, weighted_predictions_on, Method};
    use crate::metrics::{subpop_report, Orientation};
    use crate::table::fixtures::f1;
    use proptest::prelude::*;

    fn cfg(delta: f64, seed: u64) -> SynthConfig {
        SynthConfig { n_surnames: 20, n_geolocations: 6, dependence: delta, seed, ..Default::default() }
    }

    fn max_rel(a: &ContingencyTable, b: &ContingencyTable) -> f64 {
        let mut worst = 0.0f64;
        for c in a.cells() {
            let y = b.get(c.surname, c.geo).copied().unwrap_or([0.0; N_RACES]);
            for r in 0..N_RACES {
                let scale = c.counts[r].abs().max(y[r].abs());
                if scale > 0.0 {
                    worst = worst.max((c.counts[r] - y[r]).abs() / scale);
                }
            }
        }
        worst
    }

    #[test]
    fn independent_tables_are_recovered_exactly() {
        for seed in 0..5 {
            let t = generate(&cfg(0.0, seed)).unwrap();
            let (f, truth) = split_factors_and_truth(&t).unwrap();
            let m = bisg_counts_on(&f, &truth).unwrap().table;
            assert!(max_rel(&truth, &m) < 1e-10, "seed {seed}");
            assert!((t.total() - 100_000.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_table() {
        assert_eq!(generate(&cfg(0.3, 9)).unwrap(), generate(&cfg(0.3, 9)).unwrap());
        assert_ne!(generate(&cfg(0.3, 9)).unwrap(), generate(&cfg(0.3, 10)).unwrap());
        let mut c = cfg(0.3, 9);
        c.draw = DrawMode::Multinomial;
        let a = generate(&c).unwrap();
        assert_eq!(a, generate(&c).unwrap());
        assert_eq!(a.total(), 100_000.0);
        assert!(a.cells().iter().all(|c| c.counts.iter().all(|v| v.fract() == 0.0)));
    }

    #[test]
    fn full_dependence_two_by_two() {
        let c = SynthConfig {
            n_surnames: 2,
            n_geolocations: 2,
            race_mix: [0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            dependence: 1.0,
            total_population: 1000.0,
            seed: 3,
            draw: DrawMode::Expected,
        };
        let t = generate(&c).unwrap();
        // Each surname of each race sits in exactly one geolocation.
        for s in 0..2 {
            for r in 0..2 {
                let in_geos = (0..2).filter(|&g| t.get(s, g).is_some_and(|v| v[r] > 0.0)).count();
                assert_eq!(in_geos, 1);
            }
        }
        let (f, truth) = split_factors_and_truth(&t).unwrap();
        let m = weighted_predictions_on(&f, &truth, Method::Bisg, None).table;
        let rep = subpop_report(&truth, &m, Orientation::default()).unwrap();
        for g in 0..2 {
            let e: f64 = rep.entries.iter().filter(|e| e.geo == g).map(|e| e.error.abs()).sum();
            assert!(e > 1e-6, "geo {g} error {e}");
        }
    }

    #[test]
    fn split_on_f1() {
        let (f, truth) = split_factors_and_truth(&f1()).unwrap();
        assert_eq!(truth, f1());
        assert_eq!(f.geo("g1").unwrap()[0], 0.55);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(0.0, 0);
        c.n_surnames = 1;
        assert!(generate(&c).is_err());
        let mut c = cfg(1.5, 0);
        assert!(generate(&c).is_err());
        c.dependence = 0.0;
        c.race_mix = [0.5; 6];
        assert!(generate(&c).is_err());
        c.race_mix = SynthConfig::default().race_mix;
        c.total_population = 0.5;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn perturbed_margins_keep_the_total() {
        let t = generate(&cfg(0.5, 1)).unwrap();
        let m = perturbed_margins(&t, 0.05, 2).unwrap();
        assert!((race::sum(m.race()) - t.total()).abs() < 1e-6);
        assert_ne!(m.race(), &t.race_margin());
        assert_eq!(perturbed_margins(&t, 0.0, 2).unwrap().race(), &t.race_margin());
    }

    fn self_fit_error(delta: f64, seed: u64) -> f64 {
        let t = generate(&cfg(delta, seed)).unwrap();
        let (f, truth) = split_factors_and_truth(&t).unwrap();
        let m = weighted_predictions_on(&f, &truth, Method::Bisg, None).table;
        subpop_report(&truth, &m, Orientation::default()).unwrap().mean_absolute_error()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn error_grows_with_dependence(seed in any::<u64>()) {
            let errs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&d| self_fit_error(d, seed)).collect();
            prop_assert!(errs[0] < 1e-6);
            for w in errs.windows(2) {
                prop_assert!(w[1] + 1e-9 >= w[0], "{:?}", errs);
            }
        }
    }
}
