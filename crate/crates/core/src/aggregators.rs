//! Baseline aggregation rules: FedAvg, coordinate-wise median, trimmed mean
//! and Krum. Ties are always broken toward the lowest client position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensors::{map_coordinates, validate_uniform, ClientUpdate, ModelWeights};

/// Number of values dropped from each end by the trimmed mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimParam {
    pub n: usize,
}

impl TrimParam {
    pub fn check(&self, clients: usize) -> Result<()> {
        if 2 * self.n >= clients {
            return Err(Error::TrimTooLarge {
                trim: self.n,
                clients,
            });
        }
        Ok(())
    }
}

/// Declared attacker count for Krum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KrumParam {
    pub f: usize,
}

impl KrumParam {
    /// Neighbours counted in each score, `K - f - 2`.
    pub fn neighbours(&self, clients: usize) -> Result<usize> {
        match clients.checked_sub(self.f + 2) {
            Some(n) if n >= 1 => Ok(n),
            _ => Err(Error::TooFewClients { clients, f: self.f }),
        }
    }
}

/// Dataset-size weighted mean `sum_k (D_k / D) W^k`.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ModelWeights> {
    validate_uniform(updates)?;
    let total: f64 = updates.iter().map(|u| u.dataset_size() as f64).sum();
    let fractions: Vec<f64> = updates.iter().map(|u| u.dataset_size() as f64 / total).collect();
    map_coordinates(updates, |v| weighted_mean(&v.values, &fractions))
}

/// `sum_k p_k v_k` for probability weights `p`, evaluated as an offset from
/// `v_0` so that identical inputs come back bit-exactly.
pub(crate) fn weighted_mean(values: &[f64], fractions: &[f64]) -> f64 {
    let base = values[0];
    base + values
        .iter()
        .zip(fractions)
        .map(|(&v, &p)| p * (v - base))
        .sum::<f64>()
}

pub fn coordinate_median(updates: &[ClientUpdate]) -> Result<ModelWeights> {
    validate_uniform(updates)?;
    map_coordinates(updates, |v| median_of(&v.values))
}

/// Median of a non-empty slice; even lengths take the midpoint of the two
/// central order statistics.
pub fn median_of(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Per coordinate: sort, drop `n` lowest and `n` highest, average the rest
/// with equal weight.
pub fn trimmed_mean(updates: &[ClientUpdate], p: TrimParam) -> Result<ModelWeights> {
    validate_uniform(updates)?;
    p.check(updates.len())?;
    map_coordinates(updates, |v| trimmed_mean_of(&v.values, p.n))
}

pub fn trimmed_mean_of(values: &[f64], n: usize) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let kept = &s[n..s.len() - n];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Trimmed mean whose retained values are weighted by their clients'
/// dataset sizes.
pub fn trimmed_mean_weighted(updates: &[ClientUpdate], p: TrimParam) -> Result<ModelWeights> {
    validate_uniform(updates)?;
    p.check(updates.len())?;
    let sizes: Vec<f64> = updates.iter().map(|u| u.dataset_size() as f64).collect();
    map_coordinates(updates, |v| {
        let mut order: Vec<usize> = (0..v.values.len()).collect();
        order.sort_by(|&a, &b| v.values[a].total_cmp(&v.values[b]).then(a.cmp(&b)));
        let kept = &order[p.n..order.len() - p.n];
        let mass: f64 = kept.iter().map(|&k| sizes[k]).sum();
        kept.iter().map(|&k| sizes[k] / mass * v.values[k]).sum()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumSelection {
    /// Position in the update list of the chosen update.
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Scores every update by the sum of its `K - f - 2` smallest squared
/// distances to the others and picks the minimum.
pub fn krum_select(updates: &[ClientUpdate], p: KrumParam) -> Result<KrumSelection> {
    validate_uniform(updates)?;
    let k = updates.len();
    let neighbours = p.neighbours(k)?;
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.weights.to_flat()).collect();
    let rows = par::map_indexed(k, |a| {
        (0..k)
            .map(|b| {
                flats[a]
                    .iter()
                    .zip(&flats[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    let scores: Vec<f64> = (0..k)
        .map(|a| {
            let mut d: Vec<f64> = (0..k).filter(|&b| b != a).map(|b| rows[a][b]).collect();
            d.sort_by(f64::total_cmp);
            d[..neighbours].iter().sum()
        })
        .collect();
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[index] {
            index = i;
        }
    }
    Ok(KrumSelection { index, scores })
}

pub fn krum(updates: &[ClientUpdate], p: KrumParam) -> Result<ModelWeights> {
    let sel = krum_select(updates, p)?;
    Ok(updates[sel.index].weights.clone())
}
