//! Planted-regime EMA cohorts for testing and benchmarking.
//!
//! Each regime is a slow trajectory over the individual's observation span
//! (rising, falling or U-shaped per variable) under a shared short cycle. Individuals get a random time shift, per-variable level and
//! scale, an individual noise level, and cells missing completely at random.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmaDataset, EmaSeries, VariableSchema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dim: usize,
    /// Inclusive range of series lengths.
    pub len_range: (usize, usize),
    /// Number of planted regimes; 0 draws pure noise with no structure.
    pub n_regimes: usize,
    pub missing_rate: f64,
    /// Inclusive range of per-individual noise standard deviations.
    pub noise_range: (f64, f64),
    pub max_time_shift: f64,
    /// Amplitude of the shared short cycle added to every regime.
    pub cycle_amplitude: f64,
    /// When set, each trajectory is stretched over the individual's own
    /// length, so shorter series are compressed copies of longer ones.
    /// Otherwise all individuals share one time base and shorter series end
    /// earlier.
    pub stretch_to_length: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 30,
            dim: 5,
            len_range: (70, 100),
            n_regimes: 2,
            missing_rate: 0.05,
            noise_range: (0.1, 0.6),
            max_time_shift: 6.0,
            cycle_amplitude: 0.5,
            stretch_to_length: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub dataset: EmaDataset,
    /// Planted regime of each individual, in dataset order.
    pub labels: Vec<usize>,
}

/// Regime shape at relative position `tau ∈ [0, 1]` of the individual's
/// span, plus a shared daily-like cycle at absolute time `t`.
fn regime_value(regime: usize, v: usize, tau: f64, t: f64, cycle: f64) -> f64 {
    let trend = 2.0 * tau - 1.0;
    let direction = match regime % 4 {
        0 => 1.0,
        1 => {
            if v.is_multiple_of(2) {
                -1.0
            } else {
                1.0
            }
        }
        2 => -1.0,
        _ => {
            if v.is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        }
    };
    let curve = if regime % 4 >= 2 { trend * trend * 2.0 - 1.0 } else { trend };
    direction * 1.5 * curve + cycle * (2.0 * PI * t / 12.0).sin()
}

/// Draws a cohort. Individual ids are zero-padded so dataset order matches
/// generation order.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCohort> {
    let (lo, hi) = cfg.len_range;
    if cfg.n < 2 || cfg.dim == 0 || lo < 2 || lo > hi {
        return Err(Error::InvalidParameter(format!("bad synthetic shape {cfg:?}")));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::InvalidParameter("missing_rate must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| if cfg.n_regimes == 0 { 0 } else { i % cfg.n_regimes }).collect();
    labels.shuffle(&mut rng);

    let width = cfg.n.to_string().len();
    let mut series = Vec::with_capacity(cfg.n);
    for (i, &regime) in labels.iter().enumerate() {
        let len = rng.gen_range(lo..=hi);
        let shift = rng.gen_range(0.0..=cfg.max_time_shift);
        let noise = rng.gen_range(cfg.noise_range.0..=cfg.noise_range.1);
        let levels: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(1.0..6.0)).collect();
        let scales: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(0.5..2.0)).collect();
        let span = if cfg.stretch_to_length {
            (len - 1) as f64
        } else {
            hi as f64 - 1.0 + cfg.max_time_shift
        };
        let mut values = Vec::with_capacity(len * cfg.dim);
        for t in 0..len {
            for v in 0..cfg.dim {
                let signal = if cfg.n_regimes == 0 {
                    0.0
                } else {
                    regime_value(regime, v, (t as f64 + shift) / span, t as f64 + shift, cfg.cycle_amplitude)
                };
                let eps: f64 = rng.sample(StandardNormal);
                values.push(levels[v] + scales[v] * (signal + noise * eps));
            }
        }
        // keep at least one observation per variable so repair can succeed
        for cell in 0..values.len() {
            if cell / cfg.dim > 0 && rng.gen::<f64>() < cfg.missing_rate {
                values[cell] = f64::NAN;
            }
        }
        let timestamps = (0..len).map(|t| t as f64).collect();
        series.push(EmaSeries::new(format!("p{i:0width$}"), timestamps, values, cfg.dim)?);
    }
    let schema = VariableSchema::new((0..cfg.dim).map(|v| format!("v{v}")))?;
    Ok(SyntheticCohort {
        dataset: EmaDataset::new(schema, series)?,
        labels,
    })
}
