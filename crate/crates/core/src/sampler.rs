//! Exact panel sampling from a counting table, rejection for features the
//! table does not enforce, and the feature-addition planner.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_traits::Zero;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting::{build_dp, DpOptions, DpTable, WeightVector};
use crate::error::{CountingError, SamplingError};
use crate::instance::{choose_anchor, Instance};
use crate::rng::stream_rng;

pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;
pub const DEFAULT_ACCEPTANCE_FLOOR: f64 = 1e-3;
pub const DEFAULT_HEURISTIC_SAMPLES: usize = 100_000;

/// Mixed into the seed of the planner's diagnostic draws so they never
/// coincide with output streams.
const HEURISTIC_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSample {
    /// Member ids, in pool order.
    pub members: Vec<String>,
    pub seed: u64,
    pub stream: u64,
    pub attempts: u64,
    #[serde(skip)]
    pub indices: Vec<usize>,
    #[serde(skip)]
    pub enforced_features: Vec<String>,
}

impl PanelSample {
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "members": self.members,
            "seed": self.seed,
            "attempts": self.attempts,
            "stream": self.stream,
        })
        .to_string()
    }
}

/// Which features the counting table enforces and which are left to
/// rejection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerPlan {
    pub dp_features: Vec<String>,
    pub deferred_features: Vec<String>,
    /// Estimated probability that a table draw satisfies each deferred
    /// feature, from the last round of estimates.
    pub satisfaction_estimates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub acceptance_floor: f64,
    pub heuristic_samples: usize,
    pub seed: u64,
    pub dp_options: DpOptions,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            acceptance_floor: DEFAULT_ACCEPTANCE_FLOOR,
            heuristic_samples: DEFAULT_HEURISTIC_SAMPLES,
            seed: 0,
            dp_options: DpOptions::default(),
        }
    }
}

/// One draw from the table's weighted distribution over the panels it
/// admits. Returns member indices in increasing order.
pub fn sample_exact<R: Rng + ?Sized>(table: &DpTable, rng: &mut R) -> Result<Vec<usize>, SamplingError> {
    table.draw(rng)
}

/// Draws from the table until the panel meets every quota of `instance`.
/// Returns the panel and the number of draws used.
pub fn sample_rejection<R: Rng + ?Sized>(
    instance: &Instance,
    table: &DpTable,
    rng: &mut R,
    max_attempts: u64,
) -> Result<(Vec<usize>, u64), SamplingError> {
    let deferred: Vec<usize> = (0..instance.features().len())
        .filter(|f| !table.features().contains(f) && instance.feature_is_binding(*f))
        .collect();
    for attempt in 1..=max_attempts {
        let panel = table.draw(rng)?;
        if deferred.is_empty() || instance.satisfies_features(&panel, deferred.iter().copied()) {
            return Ok((panel, attempt));
        }
    }
    Err(SamplingError::Timeout {
        attempts: max_attempts,
        acceptance_rate: 0.0,
    })
}

/// Fraction of `num_samples` table draws meeting each feature's quotas.
/// Draw `i` uses stream `i` of `seed`.
pub fn estimate_satisfaction(
    instance: &Instance,
    table: &DpTable,
    features: &[usize],
    num_samples: usize,
    seed: u64,
) -> Result<BTreeMap<usize, f64>, SamplingError> {
    if features.is_empty() {
        return Ok(BTreeMap::new());
    }
    let hits = (0..num_samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<u64>, SamplingError> {
            let mut rng = stream_rng(seed, i);
            let panel = table.draw(&mut rng)?;
            let profile = instance.profile_of(&panel);
            Ok(features
                .iter()
                .map(|&f| instance.feature_satisfied(&profile, f) as u64)
                .collect::<Vec<u64>>())
        })
        .try_reduce(
            || vec![0u64; features.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    Ok(features
        .iter()
        .zip(hits)
        .map(|(&f, h)| (f, h as f64 / num_samples.max(1) as f64))
        .collect())
}

fn names(instance: &Instance, features: &[usize]) -> Vec<String> {
    features.iter().map(|&f| instance.features()[f].name.clone()).collect()
}

/// Builds a counting table, adding features one at a time (rarest first)
/// until what is left to rejection is accepted often enough.
pub fn plan_and_build(
    instance: &Instance,
    weights: &WeightVector,
    config: &PlanConfig,
) -> Result<(DpTable, SamplerPlan), SamplingError> {
    let binding = instance.binding_features();
    let Some(anchor) = choose_anchor(instance, &binding) else {
        let table = build_dp(instance, &[], weights, None, &config.dp_options)?;
        if table.total_count().is_zero() {
            return Err(SamplingError::Infeasible { features: Vec::new() });
        }
        return Ok((
            table,
            SamplerPlan {
                dp_features: Vec::new(),
                deferred_features: Vec::new(),
                satisfaction_estimates: BTreeMap::new(),
            },
        ));
    };

    let mut dp = vec![anchor];
    let mut table = build_dp(instance, &dp, weights, None, &config.dp_options)?;
    if table.total_count().is_zero() {
        return Err(SamplingError::Infeasible {
            features: names(instance, &dp),
        });
    }
    let mut unbuildable: Vec<usize> = Vec::new();
    let mut estimates;
    let mut round = 0u64;
    loop {
        let rest: Vec<usize> = binding.iter().copied().filter(|f| !dp.contains(f)).collect();
        estimates = estimate_satisfaction(
            instance,
            &table,
            &rest,
            config.heuristic_samples,
            config.seed ^ HEURISTIC_SALT.wrapping_mul(round + 1),
        )?;
        round += 1;
        let product: f64 = estimates.values().product();
        if rest.is_empty() || product >= config.acceptance_floor {
            break;
        }
        let mut candidates: Vec<usize> = rest.iter().copied().filter(|f| !unbuildable.contains(f)).collect();
        candidates.sort_by(|a, b| estimates[a].total_cmp(&estimates[b]).then(a.cmp(b)));
        let mut added = false;
        for f in candidates {
            let mut next = dp.clone();
            next.push(f);
            match build_dp(instance, &next, weights, Some(&table), &config.dp_options) {
                Ok(t) => {
                    if t.total_count().is_zero() {
                        return Err(SamplingError::Infeasible {
                            features: names(instance, &next),
                        });
                    }
                    dp = next;
                    table = t;
                    added = true;
                    break;
                }
                Err(CountingError::ResourceExceeded { .. } | CountingError::KeyTooWide { .. }) => {
                    unbuildable.push(f);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !added {
            break;
        }
    }

    let deferred: Vec<usize> = binding.iter().copied().filter(|f| !dp.contains(f)).collect();
    let plan = SamplerPlan {
        dp_features: names(instance, table.features()),
        deferred_features: names(instance, &deferred),
        satisfaction_estimates: deferred
            .iter()
            .map(|f| (instance.features()[*f].name.clone(), estimates.get(f).copied().unwrap_or(1.0)))
            .collect(),
    };
    Ok((table, plan))
}

/// A built table plus its instance, shareable across threads.
#[derive(Debug, Clone)]
pub struct PanelSampler {
    instance: Arc<Instance>,
    table: Arc<DpTable>,
    plan: SamplerPlan,
    pub max_attempts: u64,
}

impl PanelSampler {
    pub fn new(instance: Arc<Instance>, table: Arc<DpTable>, plan: SamplerPlan) -> Self {
        Self {
            instance,
            table,
            plan,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    /// Plans and builds a table for `weights`.
    pub fn build(instance: Arc<Instance>, weights: &WeightVector, config: &PlanConfig) -> Result<Self, SamplingError> {
        let (table, plan) = plan_and_build(&instance, weights, config)?;
        Ok(Self::new(instance, Arc::new(table), plan))
    }

    /// Same plan and state skeleton under new weights.
    pub fn reweighted(&self, weights: &WeightVector) -> Result<Self, SamplingError> {
        Ok(Self {
            instance: self.instance.clone(),
            table: Arc::new(self.table.reweight(weights)?),
            plan: self.plan.clone(),
            max_attempts: self.max_attempts,
        })
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn table(&self) -> &DpTable {
        &self.table
    }

    pub fn plan(&self) -> &SamplerPlan {
        &self.plan
    }

    /// Member indices of the panel on stream `stream` of `seed`, plus the
    /// draws it took.
    pub fn sample_indices(&self, seed: u64, stream: u64) -> Result<(Vec<usize>, u64), SamplingError> {
        let mut rng = stream_rng(seed, stream);
        sample_rejection(&self.instance, &self.table, &mut rng, self.max_attempts)
    }

    pub fn sample(&self, seed: u64, stream: u64) -> Result<PanelSample, SamplingError> {
        let (indices, attempts) = self.sample_indices(seed, stream)?;
        Ok(PanelSample {
            members: indices.iter().map(|&m| self.instance.member_id(m).to_string()).collect(),
            seed,
            stream,
            attempts,
            indices,
            enforced_features: self.plan.dp_features.clone(),
        })
    }

    /// Panels on streams `0..count`, drawn in parallel; the result does not
    /// depend on the thread count.
    pub fn sample_many(&self, seed: u64, count: usize) -> Result<Vec<PanelSample>, SamplingError> {
        let out: Result<Vec<PanelSample>, SamplingError> =
            (0..count as u64).into_par_iter().map(|i| self.sample(seed, i)).collect();
        out.map_err(|e| self.with_acceptance(e))
    }

    /// Index-only variant of [`Self::sample_many`].
    pub fn sample_many_indices(&self, seed: u64, count: usize) -> Result<Vec<Vec<usize>>, SamplingError> {
        let out: Result<Vec<Vec<usize>>, SamplingError> = (0..count as u64)
            .into_par_iter()
            .map(|i| self.sample_indices(seed, i).map(|(p, _)| p))
            .collect();
        out.map_err(|e| self.with_acceptance(e))
    }

    /// Fills in the planner's acceptance estimate on a timeout.
    fn with_acceptance(&self, e: SamplingError) -> SamplingError {
        match e {
            SamplingError::Timeout { attempts, .. } => SamplingError::Timeout {
                attempts,
                acceptance_rate: self.plan.satisfaction_estimates.values().product(),
            },
            e => e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::fixtures::{member, quota, t1, t1_with};
    use crate::instance::FeatureDef;
    use std::collections::HashMap;

    fn full_table(inst: &Instance, w: &WeightVector) -> DpTable {
        let all: Vec<usize> = (0..inst.features().len()).collect();
        build_dp(inst, &all, w, None, &DpOptions::default()).unwrap()
    }

    fn frequencies(inst: &Instance, table: &DpTable, n: u64) -> HashMap<Vec<usize>, u64> {
        let mut freq = HashMap::new();
        for i in 0..n {
            let mut rng = stream_rng(11, i);
            let (p, _) = sample_rejection(inst, table, &mut rng, 1000).unwrap();
            *freq.entry(p).or_insert(0) += 1;
        }
        freq
    }

    #[test]
    fn t1_uniform_frequencies() {
        let inst = t1();
        let table = full_table(&inst, &WeightVector::uniform(4));
        let n = 100_000u64;
        let freq = frequencies(&inst, &table, n);
        assert_eq!(freq.len(), 4);
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for (p, c) in freq {
            assert_eq!(p.len(), 2);
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sigma, "{p:?}: {c}");
        }
    }

    #[test]
    fn t1_weighted_frequencies() {
        let inst = t1();
        let table = full_table(&inst, &WeightVector::new(vec![2, 1, 1, 1]).unwrap());
        let n = 60_000u64;
        let freq = frequencies(&inst, &table, n);
        for (p, c) in freq {
            let expect = if p.contains(&0) { 2.0 / 6.0 } else { 1.0 / 6.0 };
            let sigma = (n as f64 * expect * (1.0 - expect)).sqrt();
            assert!((c as f64 - n as f64 * expect).abs() < 4.0 * sigma, "{p:?}: {c}");
        }
    }

    #[test]
    fn weighted_within_group_draw() {
        // one group of three, pick two; weights 1,2,3 -> pair weights 2,3,6
        let feats = vec![FeatureDef {
            name: "g".into(),
            values: vec!["a".into()],
        }];
        let pool = (0..3).map(|i| member(&i.to_string(), &[("g", "a")])).collect();
        let inst = Instance::new(2, feats, vec![quota("g", "a", 0, 2)], pool).unwrap();
        let table = build_dp(&inst, &[], &WeightVector::new(vec![1, 2, 3]).unwrap(), None, &DpOptions::default())
            .unwrap();
        let n = 55_000u64;
        let mut freq: HashMap<Vec<usize>, u64> = HashMap::new();
        for i in 0..n {
            let p = sample_exact(&table, &mut stream_rng(3, i)).unwrap();
            *freq.entry(p).or_default() += 1;
        }
        for (p, w) in [(vec![0, 1], 2.0), (vec![0, 2], 3.0), (vec![1, 2], 6.0)] {
            let expect = w / 11.0;
            let sigma = (n as f64 * expect * (1.0 - expect)).sqrt();
            assert!((freq[&p] as f64 - n as f64 * expect).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn deferred_feature_acceptance() {
        // Size-only table; gender by rejection accepts 4 of 6 subsets.
        let inst = t1();
        let table = build_dp(&inst, &[], &WeightVector::uniform(4), None, &DpOptions::default()).unwrap();
        let est = estimate_satisfaction(&inst, &table, &[0], 30_000, 1).unwrap();
        assert!((est[&0] - 2.0 / 3.0).abs() < 0.02, "{}", est[&0]);
        let mut total = 0;
        let trials = 5000;
        for i in 0..trials {
            let (p, a) = sample_rejection(&inst, &table, &mut stream_rng(2, i), 1000).unwrap();
            assert!(inst.is_panel(&p));
            total += a;
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 1.5).abs() < 0.06, "{mean}");
    }

    #[test]
    fn enforced_table_accepts_first_draw() {
        let inst = t1();
        let table = full_table(&inst, &WeightVector::uniform(4));
        let (_, a) = sample_rejection(&inst, &table, &mut stream_rng(0, 0), 10).unwrap();
        assert_eq!(a, 1);
    }

    #[test]
    fn impossible_deferred_quota_times_out() {
        let inst = t1_with(3, 3);
        let table = build_dp(&inst, &[], &WeightVector::uniform(4), None, &DpOptions::default()).unwrap();
        let err = sample_rejection(&inst, &table, &mut stream_rng(0, 0), 50).unwrap_err();
        assert!(matches!(err, SamplingError::Timeout { attempts: 50, .. }));
    }

    #[test]
    fn zero_count_cannot_sample() {
        let inst = t1_with(3, 3);
        let table = full_table(&inst, &WeightVector::uniform(4));
        assert_eq!(sample_exact(&table, &mut stream_rng(0, 0)), Err(SamplingError::ZeroCount));
    }

    fn two_feature_instance() -> Instance {
        // `rare` needs all 4 `r` members in a panel of 4 out of 16: one
        // subset in 1820 satisfies it by chance.
        let feats = vec![
            FeatureDef {
                name: "common".into(),
                values: vec!["a".into(), "b".into(), "c".into()],
            },
            FeatureDef {
                name: "rare".into(),
                values: vec!["r".into(), "s".into()],
            },
        ];
        let pool = (0..16)
            .map(|i| {
                let c = ["a", "b", "c"][i % 3];
                let r = if i < 4 { "r" } else { "s" };
                member(&format!("p{i}"), &[("common", c), ("rare", r)])
            })
            .collect();
        let quotas = vec![
            quota("common", "a", 0, 3),
            quota("common", "b", 0, 3),
            quota("common", "c", 0, 3),
            quota("rare", "r", 4, 4),
            quota("rare", "s", 0, 0),
        ];
        Instance::new(4, feats, quotas, pool).unwrap()
    }

    #[test]
    fn planner_adds_rare_feature() {
        let inst = two_feature_instance();
        let config = PlanConfig {
            heuristic_samples: 5000,
            ..PlanConfig::default()
        };
        let (table, plan) = plan_and_build(&inst, &WeightVector::uniform(16), &config).unwrap();
        assert_eq!(plan.dp_features, vec!["common", "rare"]);
        assert!(plan.deferred_features.is_empty());
        assert!(table.total_count() > Zero::zero());
    }

    #[test]
    fn planner_defers_when_floor_is_met() {
        let inst = two_feature_instance();
        let config = PlanConfig {
            heuristic_samples: 5000,
            acceptance_floor: 0.0,
            ..PlanConfig::default()
        };
        let (_, plan) = plan_and_build(&inst, &WeightVector::uniform(16), &config).unwrap();
        assert_eq!(plan.dp_features, vec!["common"]);
        assert_eq!(plan.deferred_features, vec!["rare"]);
        assert!(plan.satisfaction_estimates["rare"] < 0.05);
    }

    #[test]
    fn planner_single_and_nonbinding() {
        let inst = t1();
        let (_, plan) = plan_and_build(&inst, &WeightVector::uniform(4), &PlanConfig::default()).unwrap();
        assert_eq!(plan.dp_features, vec!["gender"]);
        assert!(plan.deferred_features.is_empty());

        let loose = Instance::new(
            2,
            inst.features().to_vec(),
            vec![quota("gender", "F", 0, 2), quota("gender", "M", 0, 2)],
            inst.pool().to_vec(),
        )
        .unwrap();
        let (table, plan) = plan_and_build(&loose, &WeightVector::uniform(4), &PlanConfig::default()).unwrap();
        assert!(plan.dp_features.is_empty() && plan.deferred_features.is_empty());
        assert_eq!(table.total_count(), 6u32.into());
    }

    #[test]
    fn planner_reports_infeasible_subset() {
        let inst = t1_with(3, 3);
        let err = plan_and_build(&inst, &WeightVector::uniform(4), &PlanConfig::default()).unwrap_err();
        assert_eq!(
            err,
            SamplingError::Infeasible {
                features: vec!["gender".into()]
            }
        );
    }

    #[test]
    fn sample_many_is_thread_count_independent() {
        let inst = Arc::new(two_feature_instance());
        let sampler = PanelSampler::build(inst, &WeightVector::uniform(16), &PlanConfig::default()).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sampler.sample_many(5, 50)).unwrap();
        let b = four.install(|| sampler.sample_many(5, 50)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.members.len() == 4));
    }
}
