//! Fair reweighting: finds member weights whose panel distribution has
//! prescribed selection probabilities, by stochastic descent on the dual of
//! the constrained maximum-entropy program.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::counting::{WeightVector, MAX_WEIGHT};
use crate::error::OptimizerError;
use crate::instance::Instance;
use crate::sampler::PanelSampler;

/// Selection-probability targets, indexed by pool position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetMarginals {
    targets: Vec<f64>,
}

impl TargetMarginals {
    pub fn new(instance: &Instance, targets: Vec<f64>) -> Result<Self, OptimizerError> {
        if targets.len() != instance.pool_size() {
            return Err(OptimizerError::InvalidTargets(format!(
                "expected {} targets, got {}",
                instance.pool_size(),
                targets.len()
            )));
        }
        if let Some((i, p)) = targets
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(OptimizerError::InvalidTargets(format!(
                "target {p} for member '{}' is not a probability",
                instance.member_id(i)
            )));
        }
        let sum: f64 = targets.iter().sum();
        if (sum - instance.panel_size() as f64).abs() > 1e-6 {
            return Err(OptimizerError::InvalidTargets(format!(
                "targets sum to {sum}, expected the panel size {}",
                instance.panel_size()
            )));
        }
        Ok(Self { targets })
    }

    /// Targets keyed by member id; every member must appear.
    pub fn from_map(instance: &Instance, map: &HashMap<String, f64>) -> Result<Self, OptimizerError> {
        let mut targets = vec![f64::NAN; instance.pool_size()];
        for (id, &p) in map {
            let i = instance
                .member_index(id)
                .ok_or_else(|| OptimizerError::InvalidTargets(format!("unknown member '{id}'")))?;
            targets[i] = p;
        }
        if let Some(i) = targets.iter().position(|p| p.is_nan()) {
            return Err(OptimizerError::InvalidTargets(format!(
                "no target for member '{}'",
                instance.member_id(i)
            )));
        }
        Self::new(instance, targets)
    }

    /// Parses a JSON object `{member_id: probability}`.
    pub fn from_json(instance: &Instance, json: &str) -> Result<Self, OptimizerError> {
        let map: HashMap<String, f64> =
            serde_json::from_str(json).map_err(|e| OptimizerError::InvalidTargets(e.to_string()))?;
        Self::from_map(instance, &map)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.targets
    }

    pub fn to_map(&self, instance: &Instance) -> HashMap<String, f64> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, &p)| (instance.member_id(i).to_string(), p))
            .collect()
    }
}

/// `(1 - eps) * targets + eps * uniform`, where `uniform` estimates the
/// selection probabilities of the unweighted distribution.
pub fn interiorize(targets: &TargetMarginals, uniform: &[f64], eps: f64) -> TargetMarginals {
    TargetMarginals {
        targets: targets
            .targets
            .iter()
            .zip(uniform)
            .map(|(p, u)| (1.0 - eps) * p + eps * u)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualIterate {
    pub theta: Vec<f64>,
    pub iteration: usize,
    pub grad_norm_history: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl DualIterate {
    pub fn zeros(n: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            iteration: 0,
            grad_norm_history: Vec::new(),
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Adam(AdamParams),
    /// Plain gradient steps `c / sqrt(T) * 2^-i`, where phase `i` covers
    /// iterations `T - T/2^i .. T - T/2^(i+1)` of a run of `T` iterations.
    /// This schedule carries the last-iterate convergence guarantee.
    LastIterate { scale: f64 },
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub step: StepRule,
    pub budget: Option<Duration>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            batch_size: 10_000,
            grad_tol: 1e-3,
            max_iters: 200,
            step: StepRule::Adam(AdamParams::default()),
            budget: None,
            seed: 0,
        }
    }
}

/// Supplies selection probabilities of the weighted panel distribution,
/// exactly or estimated from samples.
pub trait GradientSource {
    fn marginals(&mut self, weights: &WeightVector, iteration: usize) -> Result<Vec<f64>, OptimizerError>;
}

/// Estimates marginals from `batch_size` panels drawn from a reweighted
/// sampler. Iteration `t` uses its own seed, so runs are reproducible.
pub struct SampledGradient {
    sampler: PanelSampler,
    batch_size: usize,
    seed: u64,
}

impl SampledGradient {
    pub fn new(sampler: PanelSampler, batch_size: usize, seed: u64) -> Self {
        Self {
            sampler,
            batch_size,
            seed,
        }
    }

    fn iteration_seed(&self, iteration: usize) -> u64 {
        self.seed
            .wrapping_add((iteration as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03))
    }
}

/// Fraction of panels containing each member.
pub fn panel_frequencies(n: usize, panels: &[Vec<usize>]) -> Vec<f64> {
    let mut hits = vec![0u64; n];
    for p in panels {
        for &m in p {
            hits[m] += 1;
        }
    }
    let m = panels.len().max(1) as f64;
    hits.into_iter().map(|h| h as f64 / m).collect()
}

impl GradientSource for SampledGradient {
    fn marginals(&mut self, weights: &WeightVector, iteration: usize) -> Result<Vec<f64>, OptimizerError> {
        let sampler = self.sampler.reweighted(weights)?;
        let panels = sampler.sample_many_indices(self.iteration_seed(iteration), self.batch_size)?;
        Ok(panel_frequencies(weights.len(), &panels))
    }
}

/// Gradient estimate `pi_bar - pi` from one batch.
pub fn estimate_gradient(
    source: &mut dyn GradientSource,
    theta: &[f64],
    targets: &TargetMarginals,
    iteration: usize,
) -> Result<Vec<f64>, OptimizerError> {
    let weights = weights_from_theta(theta);
    let m = source.marginals(&weights, iteration)?;
    Ok(m.iter().zip(&targets.targets).map(|(a, b)| a - b).collect())
}

/// One bias-corrected ADAM step in the descent direction.
pub fn adam_step(iterate: &DualIterate, grad: &[f64], params: &AdamParams) -> DualIterate {
    let t = iterate.iteration as i32 + 1;
    let mut next = iterate.clone();
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    for (i, &g) in grad.iter().enumerate() {
        next.first_moment[i] = params.beta1 * iterate.first_moment[i] + (1.0 - params.beta1) * g;
        next.second_moment[i] = params.beta2 * iterate.second_moment[i] + (1.0 - params.beta2) * g * g;
        let m_hat = next.first_moment[i] / c1;
        let v_hat = next.second_moment[i] / c2;
        next.theta[i] -= params.alpha * m_hat / (v_hat.sqrt() + params.eps);
    }
    next.iteration += 1;
    next
}

/// Step size of the last-iterate schedule at iteration `t` of `total`.
pub fn last_iterate_step(scale: f64, t: usize, total: usize) -> f64 {
    let total = total.max(1);
    let mut phase = 0;
    let mut boundary = total - total.div_ceil(2);
    while t >= boundary && boundary < total {
        phase += 1;
        let left = total - boundary;
        boundary = total - left / 2;
        if left / 2 == 0 {
            break;
        }
    }
    scale / (total as f64).sqrt() * 0.5f64.powi(phase)
}

/// `round(exp(theta - max theta) * 1e12)`, clamped to `[1, 1e12]`.
pub fn weights_from_theta(theta: &[f64]) -> WeightVector {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = theta
        .iter()
        .map(|t| {
            let v = ((t - max).exp() * MAX_WEIGHT as f64).round();
            (v as u64).clamp(1, MAX_WEIGHT)
        })
        .collect();
    WeightVector::new(w).expect("clamped weights are in range")
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub grad_norm: f64,
    pub wallclock_ms: u128,
    pub theta_minmax: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeOutcome {
    #[serde(skip)]
    pub weights: WeightVector,
    pub iterate: DualIterate,
    pub diagnostics: Vec<IterationRecord>,
    pub converged: bool,
    /// Theta kept spreading while the gradient stalled: the targets are
    /// likely outside the interior of the marginal polytope.
    pub diverging: bool,
    pub warning: Option<String>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

const STALL_WINDOW: usize = 10;

fn stalled(history: &[f64]) -> bool {
    if history.len() <= STALL_WINDOW {
        return false;
    }
    let split = history.len() - STALL_WINDOW;
    let before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    recent > 0.9 * before
}

/// Runs dual descent from theta = 0 until the gradient norm drops below
/// `grad_tol`, the iteration cap, divergence, or the time budget.
pub fn optimize(
    source: &mut dyn GradientSource,
    targets: &TargetMarginals,
    config: &OptimizerConfig,
) -> Result<OptimizeOutcome, OptimizerError> {
    let start = Instant::now();
    let n = targets.targets.len();
    let mut iterate = DualIterate::zeros(n);
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut diverging = false;
    let mut warning = None;
    let spread_limit = (MAX_WEIGHT as f64).ln();
    for t in 0..config.max_iters {
        let grad = estimate_gradient(source, &iterate.theta, targets, t)?;
        let norm = l2(&grad);
        iterate.grad_norm_history.push(norm);
        diagnostics.push(IterationRecord {
            iter: t,
            grad_norm: norm,
            wallclock_ms: start.elapsed().as_millis(),
            theta_minmax: min_max(&iterate.theta),
        });
        if norm < config.grad_tol {
            converged = true;
            break;
        }
        let (lo, hi) = min_max(&iterate.theta);
        if hi - lo > spread_limit && stalled(&iterate.grad_norm_history) {
            diverging = true;
            warning = Some(
                "weights diverge while the gradient stalls; the targets look unreachable, \
                 consider interiorizing them"
                    .into(),
            );
            break;
        }
        if let Some(budget) = config.budget {
            if start.elapsed() > budget {
                if t + 1 < 2 {
                    return Err(OptimizerError::Timeout { iterations: t + 1 });
                }
                warning = Some(format!(
                    "time budget exhausted after {} iterations; returning current weights",
                    t + 1
                ));
                break;
            }
        }
        iterate = match config.step {
            StepRule::Adam(params) => adam_step(&iterate, &grad, &params),
            StepRule::LastIterate { scale } => {
                let eta = last_iterate_step(scale, t, config.max_iters);
                let mut next = iterate.clone();
                for (th, g) in next.theta.iter_mut().zip(&grad) {
                    *th -= eta * g;
                }
                next.iteration += 1;
                next
            }
        };
    }
    if !converged && warning.is_none() {
        warning = Some(format!(
            "gradient norm {:.3e} still above tolerance after {} iterations",
            iterate.grad_norm_history.last().copied().unwrap_or(f64::NAN),
            iterate.grad_norm_history.len()
        ));
    }
    Ok(OptimizeOutcome {
        weights: weights_from_theta(&iterate.theta),
        iterate,
        diagnostics,
        converged,
        diverging,
        warning,
    })
}
