//! Model-poisoning attacks: Glorot-distributed random weights, and the
//! colluding min-max attack `Theta = mean(W^m) + gamma * Theta^p` with the
//! largest `gamma` keeping `max_m ||Theta - W^m||` within the attackers'
//! own diameter `max_{m,l} ||W^m - W^l||`.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregators::weighted_mean;
use crate::error::{Error, Result};
use crate::seeding::substream;
use crate::tensors::{ClientUpdate, ModelWeights, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    RandomWeights,
    MinMax,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::RandomWeights => "random_weights",
            AttackKind::MinMax => "min_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    InverseUnitVector,
    InverseStd,
    InverseSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Only used by [`AttackKind::MinMax`].
    pub perturbation: Perturbation,
    pub fraction: f64,
    /// First round (1-based) in which attackers misbehave.
    pub start_round: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            perturbation: Perturbation::InverseUnitVector,
            fraction: 0.0,
            start_round: 1,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.fraction) {
            return Err(Error::InvalidConfig(format!(
                "attacker fraction {} not in [0, 0.5)",
                self.fraction
            )));
        }
        Ok(())
    }

    /// `M = floor(fraction * K)`.
    pub fn attacker_count(&self, clients: usize) -> usize {
        if self.kind == AttackKind::None {
            return 0;
        }
        (self.fraction * clients as f64 + 1e-9).floor() as usize
    }

    pub fn active_in(&self, round: usize) -> bool {
        self.kind != AttackKind::None && round >= self.start_round
    }
}

/// Uniformly chosen set of `count` client ids out of `0..clients`.
pub fn choose_attackers<R: Rng + ?Sized>(clients: usize, count: usize, rng: &mut R) -> BTreeSet<usize> {
    sample_indices(rng, clients, count.min(clients))
        .into_iter()
        .collect()
}

/// Glorot fan sizes. Vectors count as `fan_in = len, fan_out = 1`; matrices
/// and higher-rank kernels follow the `[..., in, out]` convention with the
/// leading extents as receptive field.
pub fn fan_in_out(shape: &TensorShape) -> (usize, usize) {
    let d = shape.dims();
    match d.len() {
        1 => (d[0], 1),
        n => {
            let receptive: usize = d[..n - 2].iter().product();
            (d[n - 2] * receptive, d[n - 1] * receptive)
        }
    }
}

pub fn glorot_std(shape: &TensorShape) -> f64 {
    let (fi, fo) = fan_in_out(shape);
    (2.0 / (fi + fo) as f64).sqrt()
}

/// Fresh weights shaped like `template`, i.i.d. `N(0, 2 / (fan_in + fan_out))`
/// per layer.
pub fn random_weights<R: Rng + ?Sized>(template: &ModelWeights, rng: &mut R) -> ModelWeights {
    let mut flat = Vec::with_capacity(template.num_params());
    for layer in template.layers() {
        let sd = glorot_std(layer.shape());
        for _ in 0..layer.data().len() {
            let z: f64 = StandardNormal.sample(rng);
            flat.push(sd * z);
        }
    }
    template.with_flat_unchecked(&flat)
}

/// Unweighted mean of the malicious models.
pub fn malicious_mean(malicious: &[ModelWeights]) -> Result<ModelWeights> {
    let first = malicious.first().ok_or(Error::EmptyUpdateSet)?;
    for w in &malicious[1..] {
        first.sub(w)?;
    }
    let fractions = vec![1.0 / malicious.len() as f64; malicious.len()];
    let flats: Vec<Vec<f64>> = malicious.iter().map(|w| w.to_flat()).collect();
    let mut column = vec![0.0; malicious.len()];
    let mean: Vec<f64> = (0..first.num_params())
        .map(|p| {
            for (c, f) in column.iter_mut().zip(&flats) {
                *c = f[p];
            }
            weighted_mean(&column, &fractions)
        })
        .collect();
    Ok(first.with_flat_unchecked(&mean))
}

pub fn perturbation_vector(malicious: &[ModelWeights], kind: Perturbation) -> Result<ModelWeights> {
    let mean = malicious_mean(malicious)?;
    match kind {
        Perturbation::InverseUnitVector => {
            let norm = mean.l2_norm();
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(mean.scale(-1.0 / norm))
        }
        Perturbation::InverseStd => {
            let m = malicious.len() as f64;
            let flats: Vec<Vec<f64>> = malicious.iter().map(|w| w.to_flat()).collect();
            let std: Vec<f64> = mean
                .iter_flat()
                .enumerate()
                .map(|(p, mu)| {
                    let var = flats.iter().map(|f| (f[p] - mu) * (f[p] - mu)).sum::<f64>() / m;
                    -var.sqrt()
                })
                .collect();
            Ok(mean.with_flat_unchecked(&std))
        }
        Perturbation::InverseSign => Ok(mean.map(|v| {
            if v > 0.0 {
                -1.0
            } else if v < 0.0 {
                1.0
            } else {
                0.0
            }
        })),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxResult {
    pub crafted: ModelWeights,
    pub gamma: f64,
    pub perturbation: ModelWeights,
}

/// Upper end of the exponential search for gamma.
pub const GAMMA_CAP: f64 = (1u64 << 60) as f64;
const BISECTION_STEPS: usize = 60;

/// `max_{m,l} ||W^m - W^l||`.
pub fn diameter(malicious: &[ModelWeights]) -> f64 {
    let mut d: f64 = 0.0;
    for a in 0..malicious.len() {
        for b in a + 1..malicious.len() {
            d = d.max(malicious[a].distance(&malicious[b]).unwrap_or(f64::INFINITY));
        }
    }
    d
}

/// `max_m ||theta - W^m||`.
pub fn max_distance_to(theta: &ModelWeights, malicious: &[ModelWeights]) -> f64 {
    malicious
        .iter()
        .map(|w| theta.distance(w).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

/// Flat-vector form of the constraint function `gamma -> max_m ||mean + gamma p - W^m||`.
pub(crate) struct MinMaxObjective {
    mean: Vec<f64>,
    direction: Vec<f64>,
    members: Vec<Vec<f64>>,
}

impl MinMaxObjective {
    pub(crate) fn new(mean: &ModelWeights, direction: &ModelWeights, malicious: &[ModelWeights]) -> Self {
        Self {
            mean: mean.to_flat(),
            direction: direction.to_flat(),
            members: malicious.iter().map(|w| w.to_flat()).collect(),
        }
    }

    pub(crate) fn eval(&self, gamma: f64) -> f64 {
        self.members
            .iter()
            .map(|w| {
                self.mean
                    .iter()
                    .zip(&self.direction)
                    .zip(w)
                    .map(|((m, p), x)| {
                        let d = m + gamma * p - x;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

pub fn min_max_craft(malicious: &[ModelWeights], kind: Perturbation) -> Result<MinMaxResult> {
    let direction = perturbation_vector(malicious, kind)?;
    let mean = malicious_mean(malicious)?;
    let bound = diameter(malicious);
    let gamma = if bound == 0.0 {
        0.0
    } else {
        let objective = MinMaxObjective::new(&mean, &direction, malicious);
        largest_feasible_gamma(|g| objective.eval(g) <= bound)
    };
    let crafted = mean.add(&direction.scale(gamma))?;
    Ok(MinMaxResult {
        crafted,
        gamma,
        perturbation: direction,
    })
}

/// Largest gamma >= 0 with `feasible(gamma)`, assuming `feasible(0)` and a
/// feasible set that is an interval starting at 0. Doubling from 1 finds an
/// infeasible upper end, then bisection narrows the gap.
fn largest_feasible_gamma(feasible: impl Fn(f64) -> bool) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while feasible(hi) {
        lo = hi;
        if hi >= GAMMA_CAP {
            log::warn!("min-max constraint never became active; returning gamma = 2^60");
            return GAMMA_CAP;
        }
        hi *= 2.0;
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Replaces the attackers' honest updates with poisoned ones. Benign
/// updates and all dataset sizes pass through untouched.
pub fn apply_attack<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    spec: &AttackSpec,
    attacker_ids: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<Vec<ClientUpdate>> {
    for &id in attacker_ids {
        if !updates.iter().any(|u| u.client_id == id) {
            return Err(Error::UnknownClientId(id));
        }
    }
    let mut out = updates.to_vec();
    if attacker_ids.is_empty() {
        return Ok(out);
    }
    match spec.kind {
        AttackKind::None => {}
        AttackKind::RandomWeights => {
            let base = rng.random::<u64>();
            for u in out.iter_mut().filter(|u| attacker_ids.contains(&u.client_id)) {
                let mut stream = substream(base, &[u.client_id as u64]);
                u.weights = random_weights(&u.weights, &mut stream);
            }
        }
        AttackKind::MinMax => {
            let pooled: Vec<ModelWeights> = updates
                .iter()
                .filter(|u| attacker_ids.contains(&u.client_id))
                .map(|u| u.weights.clone())
                .collect();
            let crafted = min_max_craft(&pooled, spec.perturbation)?.crafted;
            for u in out.iter_mut().filter(|u| attacker_ids.contains(&u.client_id)) {
                u.weights = crafted.clone();
            }
        }
    }
    Ok(out)
}
