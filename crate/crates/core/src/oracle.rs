//! Brute-force reference computations for small instances, and a seeded
//! synthetic instance generator.
//!
//! Nothing here uses the counting engine: panels are enumerated directly
//! from k-subsets so agreement with the engine is independent evidence.

use itertools::Itertools;
use num_bigint::BigUint;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::counting::{BigCount, WeightVector};
use crate::error::{OptimizerError, OracleError};
use crate::instance::{FeatureDef, Instance, PoolMember, Quota};
use crate::optimizer::GradientSource;

pub const ENUMERATION_GUARD: u128 = 10_000_000;

/// C(n, k), saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All k-subsets meeting the quotas of `features`, in lexicographic order.
pub fn enumerate_panels_for(instance: &Instance, features: &[usize]) -> Result<Vec<Vec<usize>>, OracleError> {
    let (n, k) = (instance.pool_size(), instance.panel_size());
    let subsets = binomial(n, k);
    if subsets > ENUMERATION_GUARD {
        return Err(OracleError::GuardExceeded {
            subsets,
            guard: ENUMERATION_GUARD,
        });
    }
    Ok((0..n)
        .combinations(k)
        .filter(|c| instance.satisfies_features(c, features.iter().copied()))
        .collect())
}

/// All panels of the instance.
pub fn enumerate_panels(instance: &Instance) -> Result<Vec<Vec<usize>>, OracleError> {
    let all: Vec<usize> = (0..instance.features().len()).collect();
    enumerate_panels_for(instance, &all)
}

/// Sum over panels of the product of member weights.
pub fn weighted_count(panels: &[Vec<usize>], weights: &WeightVector) -> BigCount {
    panels
        .iter()
        .map(|p| p.iter().fold(BigUint::from(1u32), |acc, &m| acc * weights.get(m)))
        .sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn panel_scores(panels: &[Vec<usize>], theta: &[f64]) -> Vec<f64> {
    panels.iter().map(|p| p.iter().map(|&m| theta[m]).sum()).collect()
}

/// Probabilities proportional to `exp(sum of theta over the panel)`.
pub fn distribution_from_theta(panels: &[Vec<usize>], theta: &[f64]) -> Vec<f64> {
    let scores = panel_scores(panels, theta);
    let z = log_sum_exp(&scores);
    scores.iter().map(|s| (s - z).exp()).collect()
}

/// Probabilities proportional to the product of member weights.
pub fn exact_distribution(panels: &[Vec<usize>], weights: &WeightVector) -> Vec<f64> {
    let theta: Vec<f64> = weights.as_slice().iter().map(|&w| (w as f64).ln()).collect();
    distribution_from_theta(panels, &theta)
}

pub fn marginals(n: usize, panels: &[Vec<usize>], probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (p, &q) in panels.iter().zip(probs) {
        for &m in p {
            out[m] += q;
        }
    }
    out
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `log sum_P exp(theta(P)) - <theta, targets>`.
pub fn dual_objective(panels: &[Vec<usize>], theta: &[f64], targets: &[f64]) -> f64 {
    log_sum_exp(&panel_scores(panels, theta)) - theta.iter().zip(targets).map(|(t, p)| t * p).sum::<f64>()
}

/// Gradient of [`dual_objective`]: marginals under `theta` minus targets.
pub fn dual_gradient(panels: &[Vec<usize>], theta: &[f64], targets: &[f64]) -> Vec<f64> {
    let probs = distribution_from_theta(panels, theta);
    marginals(theta.len(), panels, &probs)
        .into_iter()
        .zip(targets)
        .map(|(m, t)| m - t)
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

#[derive(Debug, Clone)]
pub struct MaxEntropyConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// At the iteration cap, a theta spread that still grew by more than
    /// this over the second half of the run marks a boundary target: interior
    /// solutions settle, boundary ones drift off logarithmically.
    pub boundary_drift: f64,
}

impl Default for MaxEntropyConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 200_000,
            boundary_drift: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxEntropySolution {
    pub theta: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub marginals: Vec<f64>,
    pub entropy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Maximum-entropy distribution over `panels` with the given marginals, by
/// full-gradient descent on the dual.
pub fn exact_max_entropy(
    n: usize,
    panels: &[Vec<usize>],
    targets: &[f64],
    config: &MaxEntropyConfig,
) -> Result<MaxEntropySolution, OracleError> {
    if panels.is_empty() {
        return Err(OracleError::NoPanels);
    }
    // The dual's Hessian is the covariance of the inclusion indicators,
    // whose largest eigenvalue is at most k, so 1/k is a safe fixed step.
    let k = panels[0].len().max(1) as f64;
    let step = 1.0 / k;
    let mut theta = vec![0.0; n];
    let mut grad = dual_gradient(panels, &theta, targets);
    let mut iterations = 0;
    let mut midway_spread = 0.0;
    while norm(&grad) > config.tol && iterations < config.max_iters {
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        grad = dual_gradient(panels, &theta, targets);
        iterations += 1;
        if iterations == config.max_iters / 2 {
            midway_spread = spread(&theta);
        }
    }
    let grad_norm = norm(&grad);
    if grad_norm > config.tol {
        let theta_spread = spread(&theta);
        return Err(if theta_spread - midway_spread > config.boundary_drift {
            OracleError::BoundaryTarget {
                grad_norm,
                theta_spread,
                iterations,
            }
        } else {
            OracleError::NotConverged { grad_norm, iterations }
        });
    }
    let probabilities = distribution_from_theta(panels, &theta);
    Ok(MaxEntropySolution {
        marginals: marginals(n, panels, &probabilities),
        entropy: entropy(&probabilities),
        theta,
        probabilities,
        iterations,
        grad_norm,
    })
}

/// Exact selection probabilities over the enumerated panel set, for running
/// the optimizer without sampling noise.
#[derive(Debug, Clone)]
pub struct ExactGradient {
    n: usize,
    panels: Vec<Vec<usize>>,
}

impl ExactGradient {
    pub fn new(instance: &Instance) -> Result<Self, OracleError> {
        let panels = enumerate_panels(instance)?;
        if panels.is_empty() {
            return Err(OracleError::NoPanels);
        }
        Ok(Self {
            n: instance.pool_size(),
            panels,
        })
    }

    pub fn panels(&self) -> &[Vec<usize>] {
        &self.panels
    }
}

impl GradientSource for ExactGradient {
    fn marginals(&mut self, weights: &WeightVector, _iteration: usize) -> Result<Vec<f64>, OptimizerError> {
        Ok(marginals(self.n, &self.panels, &exact_distribution(&self.panels, weights)))
    }
}

/// Parameters of a synthetic instance.
#[derive(Debug, Clone, Serialize)]
pub struct SyntheticSpec {
    pub pool_size: usize,
    pub panel_size: usize,
    /// Number of values of each feature.
    pub values: Vec<usize>,
    /// 0 leaves every quota at `[0, k]`; 1 pins every quota to the counts
    /// of a hidden feasible panel.
    pub tightness: f64,
    /// Value `v` of a feature is drawn with weight `exp(-skew * v)`; 0 is
    /// uniform, larger values give census-like majority/minority splits.
    pub skew: f64,
    pub seed: u64,
}

/// Reproducible synthetic instance. Members draw a latent class, and each
/// feature follows the class half the time, so features are correlated.
/// Quotas are centered on a hidden random panel, which stays feasible.
pub fn generate_instance(spec: &SyntheticSpec) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, k) = (spec.pool_size, spec.panel_size);
    let classes = spec.values.iter().copied().max().unwrap_or(1).max(1);
    let skewed = |nv: usize| {
        WeightedIndex::new((0..nv).map(|v| (-spec.skew * v as f64).exp())).expect("weights are positive")
    };
    let class_dist = skewed(classes);
    let value_dists: Vec<_> = spec.values.iter().map(|&nv| skewed(nv.max(1))).collect();
    let features: Vec<FeatureDef> = spec
        .values
        .iter()
        .enumerate()
        .map(|(f, &v)| FeatureDef {
            name: format!("f{f}"),
            values: (0..v).map(|i| format!("v{i}")).collect(),
        })
        .collect();
    let width = (n.max(1) - 1).to_string().len().max(3);
    let mut value_of = vec![vec![0usize; spec.values.len()]; n];
    let pool: Vec<PoolMember> = (0..n)
        .map(|m| {
            let class = class_dist.sample(&mut rng);
            let attributes = features
                .iter()
                .enumerate()
                .map(|(f, feat)| {
                    let nv = feat.values.len();
                    let v = if rng.gen_bool(0.5) {
                        class % nv
                    } else {
                        value_dists[f].sample(&mut rng)
                    };
                    value_of[m][f] = v;
                    (feat.name.clone(), feat.values[v].clone())
                })
                .collect();
            PoolMember {
                id: format!("m{m:0width$}"),
                attributes,
            }
        })
        .collect();

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let witness = &idx[..k];
    let slack = ((1.0 - spec.tightness.clamp(0.0, 1.0)) * k as f64).ceil() as u32;
    let mut quotas = Vec::new();
    for (f, feat) in features.iter().enumerate() {
        for (v, value) in feat.values.iter().enumerate() {
            let c = witness.iter().filter(|&&m| value_of[m][f] == v).count() as u32;
            quotas.push(Quota {
                feature: feat.name.clone(),
                value: value.clone(),
                min: c.saturating_sub(slack),
                max: (c + slack).min(k as u32),
            });
        }
    }
    Instance::new(k, features, quotas, pool).expect("generated instance is well formed")
}
