//! Coordinate-wise selection of the client value sitting at the density peak
//! of `V_{i,l}`.
//!
//! Two selection rules are provided:
//!
//! * [`FftStrategy::Literal`] sorts the coordinate vector, takes the
//!   magnitude spectrum of the sorted values and uses the index of the
//!   largest bin as an index into the sorted vector.
//! * [`FftStrategy::KdeMode`] estimates the density of the coordinate values
//!   with an FFT-convolved Gaussian KDE and returns the submitted value
//!   closest to its mode.
//!
//! Both rules only ever return one of the submitted values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{kde_density, magnitudes, FftPlan, DEFAULT_GRID_SIZE};
use crate::tensors::{try_map_coordinates, ClientUpdate, CoordinateVector, ModelWeights};

/// Magnitudes within this relative distance of the maximum count as tied.
/// Real-input spectra are conjugate-symmetric, so bins `n` and `N - n` tie
/// exactly in theory and differ only by rounding in practice.
const MAGNITUDE_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FftStrategy {
    Literal {
        #[serde(default)]
        include_dc: bool,
    },
    #[serde(rename = "kde")]
    KdeMode {
        #[serde(default = "default_grid_size")]
        grid_size: usize,
    },
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

impl Default for FftStrategy {
    fn default() -> Self {
        FftStrategy::KdeMode {
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

impl FftStrategy {
    pub fn literal() -> Self {
        FftStrategy::Literal { include_dc: false }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FftStrategy::Literal { .. } => "literal",
            FftStrategy::KdeMode { .. } => "kde",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub value: f64,
    /// Position of the (first) client that submitted `value`.
    pub client: usize,
}

pub fn fft_select(v: &CoordinateVector, strategy: &FftStrategy) -> Result<Selection> {
    select_values(&v.values, strategy, None)
}

/// Selection on a bare slice of client values. `plan` may carry a
/// precomputed transform of length `values.len()`.
pub fn select_values(values: &[f64], strategy: &FftStrategy, plan: Option<&FftPlan>) -> Result<Selection> {
    let first = *values.first().ok_or(Error::EmptyVector)?;
    if values.iter().all(|&v| v == first) {
        return Ok(Selection {
            value: first,
            client: 0,
        });
    }
    let value = match *strategy {
        FftStrategy::Literal { include_dc } => literal_pick(values, include_dc, plan),
        FftStrategy::KdeMode { grid_size } => {
            let est = kde_density(values, grid_size)?;
            let mode = est.mode();
            nearest(values, mode)
        }
    };
    let client = values
        .iter()
        .position(|&v| v == value)
        .expect("selected value comes from the input");
    Ok(Selection { value, client })
}

fn literal_pick(values: &[f64], include_dc: bool, plan: Option<&FftPlan>) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let spectrum = match plan {
        Some(p) if p.len() == sorted.len() => p.forward_real(&sorted),
        _ => FftPlan::new(sorted.len()).forward_real(&sorted),
    };
    let mags = magnitudes(&spectrum);
    let start = if include_dc { 0 } else { 1 };
    let peak = mags[start..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = peak - MAGNITUDE_TIE_TOLERANCE * peak.abs();
    let bin = (start..mags.len())
        .find(|&n| mags[n] >= cutoff)
        .expect("peak is attained");
    sorted[bin]
}

/// Sample value closest to `target`; ties go to the lowest position.
fn nearest(values: &[f64], target: f64) -> f64 {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if (v - target).abs() < (values[best] - target).abs() {
            best = k;
        }
    }
    values[best]
}

/// Applies the selection rule at every coordinate and reassembles the model.
pub fn fft_aggregate(updates: &[ClientUpdate], strategy: &FftStrategy) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdateSet);
    }
    let plan = match strategy {
        FftStrategy::Literal { .. } => Some(FftPlan::new(updates.len())),
        FftStrategy::KdeMode { .. } => None,
    };
    try_map_coordinates(updates, |v| {
        select_values(&v.values, strategy, plan.as_ref()).map(|s| s.value)
    })
}
