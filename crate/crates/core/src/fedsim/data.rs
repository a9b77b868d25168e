//! Gaussian-blob classification task split across clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CENTER_RADIUS: f64 = 3.0;
pub const GLOBAL_TEST_SIZE: usize = 1000;
pub const TRAIN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub dim: usize,
    pub classes: usize,
    pub per_client: usize,
    pub clients: usize,
    /// `None` means IID labels.
    pub dirichlet_alpha: Option<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            dim: 8,
            classes: 4,
            per_client: 200,
            clients: 20,
            dirichlet_alpha: None,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.per_client < self.classes {
            return bad(format!(
                "per_client ({}) must be at least the class count ({})",
                self.per_client, self.classes
            ));
        }
        if self.dim == 0 || self.clients == 0 {
            return bad("dim and clients must be positive".into());
        }
        if let Some(a) = self.dirichlet_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("dirichlet_alpha {a} must be a positive real"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &r in rows {
            out.push(self.row(r), self.labels[r]);
        }
        out
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub centers: Vec<Vec<f64>>,
    pub clients: Vec<ClientData>,
    pub global_test: Dataset,
}

fn sample_point<R: Rng + ?Sized>(center: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|g| g / total).collect()
    } else {
        // all draws underflowed: put the mass on one class
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Class centres on a sphere of radius 3, isotropic Gaussian noise, IID or
/// Dirichlet label skew per client, a per-client 80/20 split and a shared
/// 1000-sample test set.
pub fn gen_task<R: Rng + ?Sized>(task: &SyntheticTask, rng: &mut R) -> Result<TaskData> {
    task.validate()?;
    let centers: Vec<Vec<f64>> = (0..task.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..task.dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| CENTER_RADIUS * x / norm).collect();
            }
        })
        .collect();

    let mut clients = Vec::with_capacity(task.clients);
    for _ in 0..task.clients {
        let probs = match task.dirichlet_alpha {
            None => vec![1.0 / task.classes as f64; task.classes],
            Some(a) => dirichlet(a, task.classes, rng),
        };
        let mut all = Dataset::new(task.dim);
        for _ in 0..task.per_client {
            let y = match task.dirichlet_alpha {
                None => rng.random_range(0..task.classes),
                Some(_) => categorical(&probs, rng),
            };
            all.push(&sample_point(&centers[y], task.noise_sigma, rng), y);
        }
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(rng);
        let n_train = ((task.per_client as f64 * TRAIN_SHARE).round() as usize).clamp(1, task.per_client);
        clients.push(ClientData {
            train: all.subset(&order[..n_train]),
            test: all.subset(&order[n_train..]),
        });
    }

    let mut global_test = Dataset::new(task.dim);
    for _ in 0..GLOBAL_TEST_SIZE {
        let y = rng.random_range(0..task.classes);
        global_test.push(&sample_point(&centers[y], task.noise_sigma, rng), y);
    }
    Ok(TaskData {
        centers,
        clients,
        global_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(task: &SyntheticTask) -> TaskData {
        gen_task(task, &mut ChaCha8Rng::seed_from_u64(task.seed)).unwrap()
    }

    #[test]
    fn splits_and_sizes() {
        let t = SyntheticTask::default();
        let d = gen(&t);
        assert_eq!(d.clients.len(), 20);
        assert!(d
            .clients
            .iter()
            .all(|c| c.train.len() == 160 && c.test.len() == 40));
        assert_eq!(d.global_test.len(), GLOBAL_TEST_SIZE);
        for c in &d.centers {
            let r = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - CENTER_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_histograms_near_uniform() {
        let t = SyntheticTask {
            per_client: 400,
            ..Default::default()
        };
        let d = gen(&t);
        let n = 400.0;
        let p = 1.0 / t.classes as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in &d.clients {
            let mut h = c.train.label_histogram(t.classes);
            for (a, b) in h.iter_mut().zip(c.test.label_histogram(t.classes)) {
                *a += b;
            }
            for &count in &h {
                assert!((count as f64 - n * p).abs() <= 3.0 * sd, "{h:?}");
            }
        }
    }

    #[test]
    fn dirichlet_skews_labels() {
        let t = SyntheticTask {
            dirichlet_alpha: Some(0.1),
            ..Default::default()
        };
        let d = gen(&t);
        // with alpha = 0.1 most clients are dominated by one class
        let dominated = d
            .clients
            .iter()
            .filter(|c| {
                let h = c.train.label_histogram(t.classes);
                *h.iter().max().unwrap() as f64 > 0.6 * c.train.len() as f64
            })
            .count();
        assert!(dominated >= 10, "{dominated}");
    }

    #[test]
    fn noiseless_task_is_linearly_separable() {
        let t = SyntheticTask {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let d = gen(&t);
        // nearest-centre rule, i.e. argmax_k <c_k, x> - |c_k|^2 / 2, is linear
        let correct = (0..d.global_test.len())
            .filter(|&i| {
                let x = d.global_test.row(i);
                let score = |c: &Vec<f64>| {
                    c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                        - 0.5 * c.iter().map(|a| a * a).sum::<f64>()
                };
                let best = (0..t.classes)
                    .max_by(|&a, &b| score(&d.centers[a]).total_cmp(&score(&d.centers[b])))
                    .unwrap();
                best == d.global_test.labels[i]
            })
            .count();
        assert_eq!(correct, d.global_test.len());
    }

    #[test]
    fn same_seed_same_data() {
        let t = SyntheticTask {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(gen(&t), gen(&t));
        let other = SyntheticTask {
            seed: 18,
            ..Default::default()
        };
        assert_ne!(gen(&t), gen(&other));
    }

    #[test]
    fn validation() {
        assert!(SyntheticTask {
            classes: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticTask {
            per_client: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticTask {
            dirichlet_alpha: Some(0.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
