//! Cross-checks of the counting engine and sampler against brute-force
//! enumeration on one instance.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::counting::{audit_pruning, build_dp, DpOptions, WeightVector};
use crate::error::Error;
use crate::instance::{choose_anchor, Instance};
use crate::oracle::{enumerate_panels, weighted_count};
use crate::rng::stream_rng;
use crate::sampler::{PanelSampler, PlanConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub enumerated_panels: usize,
    pub dp_count: String,
    pub counts_match: bool,
    pub weighted_counts_match: bool,
    pub anchor_invariant: bool,
    pub audited_states: usize,
    pub pruning_violations: usize,
    pub samples: usize,
    pub tv_distance: f64,
    /// `3 * sqrt(|P| / samples)`.
    pub tv_bound: f64,
    pub passed: bool,
}

/// Total variation distance between the empirical distribution of `samples`
/// and the uniform distribution over `panels`. Samples outside `panels`
/// count fully towards the distance.
pub fn tv_from_uniform(panels: &[Vec<usize>], samples: &[Vec<usize>]) -> f64 {
    let mut freq: HashMap<&[usize], usize> = HashMap::new();
    for s in samples {
        *freq.entry(s.as_slice()).or_insert(0) += 1;
    }
    let m = samples.len().max(1) as f64;
    let u = 1.0 / panels.len().max(1) as f64;
    let mut tv = 0.0;
    let mut seen = 0usize;
    for p in panels {
        let c = freq.get(p.as_slice()).copied().unwrap_or(0);
        seen += c;
        tv += (c as f64 / m - u).abs();
    }
    tv += (samples.len() - seen) as f64 / m;
    tv / 2.0
}

/// Compares uniform and randomly weighted counts, anchor reduction on/off,
/// pruning along the feature chain, and the empirical distribution of
/// `samples` uniform draws, all against enumeration.
pub fn verify_instance(instance: &Instance, samples: usize, seed: u64) -> Result<VerifyReport, Error> {
    let n = instance.pool_size();
    let panels = enumerate_panels(instance)?;
    let all: Vec<usize> = (0..instance.features().len()).collect();
    let uniform = WeightVector::uniform(n);
    let opts = DpOptions::default();

    let table = build_dp(instance, &all, &uniform, None, &opts)?;
    let dp_count = table.total_count();
    let counts_match = dp_count == weighted_count(&panels, &uniform);

    let mut rng = stream_rng(seed, u64::MAX);
    let weights = WeightVector::new((0..n).map(|_| rng.gen_range(1..=9)).collect())?;
    let weighted_counts_match = table.reweight(&weights)?.total_count() == weighted_count(&panels, &weights);

    let plain = DpOptions {
        anchor_reduction: false,
        ..DpOptions::default()
    };
    let anchor_invariant = build_dp(instance, &all, &uniform, None, &plain)?.total_count() == dp_count;

    let anchor = choose_anchor(instance, &all);
    let order: Vec<usize> = anchor
        .into_iter()
        .chain(all.iter().copied().filter(|&f| Some(f) != anchor))
        .collect();
    let (mut audited_states, mut pruning_violations) = (0usize, 0usize);
    let mut prev = None;
    for i in 1..=order.len() {
        let t = build_dp(instance, &order[..i], &uniform, prev.as_ref(), &opts)?;
        if let Some(p) = &prev {
            let audit = audit_pruning(p, &t)?;
            audited_states += audit.states_checked;
            pruning_violations += audit.violations;
        }
        prev = Some(t);
    }

    let (tv_distance, tv_bound) = if panels.is_empty() || samples == 0 {
        (0.0, 0.0)
    } else {
        let sampler = PanelSampler::build(Arc::new(instance.clone()), &uniform, &PlanConfig::default())?;
        let drawn = sampler.sample_many_indices(seed, samples)?;
        (
            tv_from_uniform(&panels, &drawn),
            3.0 * (panels.len() as f64 / samples as f64).sqrt(),
        )
    };

    let passed = counts_match
        && weighted_counts_match
        && anchor_invariant
        && pruning_violations == 0
        && tv_distance <= tv_bound.max(f64::EPSILON);
    Ok(VerifyReport {
        enumerated_panels: panels.len(),
        dp_count: dp_count.to_string(),
        counts_match,
        weighted_counts_match,
        anchor_invariant,
        audited_states,
        pruning_violations,
        samples,
        tv_distance,
        tv_bound,
        passed,
    })
}
