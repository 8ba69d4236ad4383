//! Statistics over sampled panels: selection-probability estimates,
//! fairness aggregates, intersectional diversity and the hold-out
//! generalization experiment.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::counting::{build_dp, DpOptions, WeightVector};
use crate::error::{Error, SamplingError};
use crate::instance::Instance;
use crate::sampler::{PanelSampler, PlanConfig};
use std::sync::Arc;

/// Jeffreys 95% interval for `x` successes in `m` trials.
pub fn jeffreys_interval(x: u64, m: u64) -> (f64, f64) {
    jeffreys_interval_at(x, m, 0.95)
}

/// Jeffreys interval with coverage `confidence`.
pub fn jeffreys_interval_at(x: u64, m: u64, confidence: f64) -> (f64, f64) {
    if m == 0 {
        return (0.0, 1.0);
    }
    let tail = (1.0 - confidence) / 2.0;
    let beta = Beta::new(x as f64 + 0.5, (m - x) as f64 + 0.5).expect("shape parameters are positive");
    let lower = if x == 0 { 0.0 } else { beta.inverse_cdf(tail) };
    let upper = if x == m { 1.0 } else { beta.inverse_cdf(1.0 - tail) };
    (lower, upper)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberMarginal {
    pub id: String,
    pub hits: u64,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalEstimate {
    pub samples: u64,
    pub members: Vec<MemberMarginal>,
}

impl MarginalEstimate {
    pub fn points(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.point).collect()
    }
}

pub fn estimate_marginals(instance: &Instance, panels: &[Vec<usize>]) -> MarginalEstimate {
    let m = panels.len() as u64;
    let mut hits = vec![0u64; instance.pool_size()];
    for p in panels {
        for &i in p {
            hits[i] += 1;
        }
    }
    let members = hits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (lower, upper) = jeffreys_interval(x, m);
            MemberMarginal {
                id: instance.member_id(i).to_string(),
                hits: x,
                point: if m == 0 { 0.0 } else { x as f64 / m as f64 },
                lower,
                upper,
            }
        })
        .collect();
    MarginalEstimate { samples: m, members }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessSummary {
    pub gini: f64,
    pub geometric_mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Gini coefficient `sum_ij |x_i - x_j| / (2 n^2 mean)`.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_ij |x_i - x_j| = 2 sum_i (2i - n + 1) x_(i)
    let diff: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    diff / (2.0 * n * n * mean)
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

pub fn fairness_summary(values: &[f64]) -> FairnessSummary {
    FairnessSummary {
        gini: gini(values),
        geometric_mean: geometric_mean(values),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Mean number of distinct feature-value vectors per panel.
    pub expected_vector_count: f64,
    /// The same divided by the panel size.
    pub vector_count_ratio: f64,
    pub total_correlation: f64,
    /// Keyed `"feature_a|feature_b"`.
    pub pairwise_nmi: BTreeMap<String, f64>,
}

fn entropy_of_counts<I: IntoIterator<Item = usize>>(counts: I, total: f64) -> f64 {
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn tally<K: std::hash::Hash + Eq>(keys: impl IntoIterator<Item = K>) -> HashMap<K, usize> {
    let mut out = HashMap::new();
    for k in keys {
        *out.entry(k).or_insert(0) += 1;
    }
    out
}

/// Intersectional diversity of panels, from each panel's empirical
/// distribution of member values, averaged over panels.
pub fn diversity_report(instance: &Instance, panels: &[Vec<usize>]) -> DiversityReport {
    let nf = instance.features().len();
    let m = panels.len().max(1) as f64;
    let mut vectors = 0.0;
    let mut tc = 0.0;
    let mut nmi = vec![vec![0.0; nf]; nf];
    for p in panels {
        let k = p.len() as f64;
        let distinct: HashSet<&[u16]> = p.iter().map(|&i| instance.member_values(i)).collect();
        vectors += distinct.len() as f64;
        let h: Vec<f64> = (0..nf)
            .map(|f| entropy_of_counts(tally(p.iter().map(|&i| instance.value_of(i, f))).into_values(), k))
            .collect();
        let joint = entropy_of_counts(tally(p.iter().map(|&i| instance.member_values(i))).into_values(), k);
        tc += (h.iter().sum::<f64>() - joint).max(0.0);
        for a in 0..nf {
            for b in a + 1..nf {
                let hab = entropy_of_counts(
                    tally(p.iter().map(|&i| (instance.value_of(i, a), instance.value_of(i, b)))).into_values(),
                    k,
                );
                let mi = (h[a] + h[b] - hab).max(0.0);
                let denom = h[a] + h[b];
                if denom > 0.0 {
                    nmi[a][b] += mi / denom;
                }
            }
        }
    }
    let mut pairwise_nmi = BTreeMap::new();
    let names: Vec<&str> = instance.features().iter().map(|f| f.name.as_str()).collect();
    for (a, row) in nmi.iter().enumerate() {
        for (b, v) in row.iter().enumerate().skip(a + 1) {
            pairwise_nmi.insert(format!("{}|{}", names[a], names[b]), v / m);
        }
    }
    let expected_vector_count = vectors / m;
    DiversityReport {
        expected_vector_count,
        vector_count_ratio: expected_vector_count / instance.panel_size() as f64,
        total_correlation: tc / m,
        pairwise_nmi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub marginals: MarginalEstimate,
    pub fairness: FairnessSummary,
    pub diversity: DiversityReport,
}

pub fn evaluate(instance: &Instance, panels: &[Vec<usize>]) -> EvaluationReport {
    let marginals = estimate_marginals(instance, panels);
    let fairness = fairness_summary(&marginals.points());
    EvaluationReport {
        fairness,
        diversity: diversity_report(instance, panels),
        marginals,
    }
}

impl EvaluationReport {
    /// One `metric,value` row per scalar metric.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"]).unwrap();
        let mut row = |k: &str, v: f64| w.write_record([k, &v.to_string()]).unwrap();
        row("samples", self.marginals.samples as f64);
        row("gini", self.fairness.gini);
        row("geometric_mean", self.fairness.geometric_mean);
        row("min_probability", self.fairness.min);
        row("max_probability", self.fairness.max);
        row("expected_vector_count", self.diversity.expected_vector_count);
        row("vector_count_ratio", self.diversity.vector_count_ratio);
        row("total_correlation", self.diversity.total_correlation);
        for (pair, v) in &self.diversity.pairwise_nmi {
            row(&format!("nmi:{pair}"), *v);
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// `a / b` for big integers, without overflowing `f64` on the way.
pub fn big_ratio(a: &BigUint, b: &BigUint) -> f64 {
    if b.is_zero() {
        return f64::NAN;
    }
    let shift = b.bits().saturating_sub(64);
    let a_s: BigUint = a >> shift;
    let b_s: BigUint = b >> shift;
    a_s.to_f64().unwrap_or(f64::INFINITY) / b_s.to_f64().unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutResult {
    pub feature: String,
    pub samples: u64,
    pub satisfied: u64,
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
    /// Exact ratio of uniform panel counts with and without the feature.
    pub exact: Option<f64>,
}

/// Uniform probability that a panel drawn without `feature`'s quotas meets
/// them anyway: count(all features) / count(all but `feature`).
pub fn exact_holdout_ratio(instance: &Instance, feature: usize) -> Result<f64, Error> {
    let reduced = instance.without_feature(feature)?;
    let options = DpOptions {
        retain_counts: false,
        ..DpOptions::default()
    };
    let all: Vec<usize> = (0..instance.features().len()).collect();
    let full = build_dp(instance, &all, &WeightVector::uniform(instance.pool_size()), None, &options)?;
    let rest: Vec<usize> = (0..reduced.features().len()).collect();
    let part = build_dp(&reduced, &rest, &WeightVector::uniform(reduced.pool_size()), None, &options)?;
    if part.total_count().is_zero() {
        return Err(SamplingError::Infeasible {
            features: reduced.features().iter().map(|f| f.name.clone()).collect(),
        }
        .into());
    }
    Ok(big_ratio(&full.total_count(), &part.total_count()))
}

/// Samples `m` panels from the instance with `feature` removed (weighted by
/// `weights` when given) and reports how often the dropped quotas hold.
pub fn holdout_experiment(
    instance: &Instance,
    feature: usize,
    weights: Option<&WeightVector>,
    m: usize,
    seed: u64,
    config: &PlanConfig,
    with_exact: bool,
) -> Result<HoldoutResult, Error> {
    let reduced = Arc::new(instance.without_feature(feature)?);
    let uniform = WeightVector::uniform(reduced.pool_size());
    let sampler = PanelSampler::build(reduced, weights.unwrap_or(&uniform), config)?;
    let panels = sampler.sample_many_indices(seed, m)?;
    let satisfied = panels
        .iter()
        .filter(|p| instance.satisfies_features(p, [feature]))
        .count() as u64;
    let (lower, upper) = jeffreys_interval(satisfied, m as u64);
    let exact = if with_exact && weights.is_none() {
        Some(exact_holdout_ratio(instance, feature)?)
    } else {
        None
    };
    Ok(HoldoutResult {
        feature: instance.features()[feature].name.clone(),
        samples: m as u64,
        satisfied,
        probability: satisfied as f64 / m.max(1) as f64,
        lower,
        upper,
        exact,
    })
}

/// CSV with one row per hold-out result.
pub fn holdout_csv(instance_name: &str, rows: &[HoldoutResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance", "feature", "samples", "satisfied", "probability", "lower", "upper", "exact"])
        .unwrap();
    for r in rows {
        w.write_record([
            instance_name.to_string(),
            r.feature.clone(),
            r.samples.to_string(),
            r.satisfied.to_string(),
            r.probability.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.exact.map(|e| e.to_string()).unwrap_or_default(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::fixtures::{member, quota, t1};
    use crate::instance::FeatureDef;

    #[test]
    fn jeffreys_matches_reference_quantiles() {
        // scipy.stats.beta(5000.5, 5000.5).ppf([0.025, 0.975])
        let (lo, hi) = jeffreys_interval(5000, 10_000);
        assert!((lo - 0.4902013660718027).abs() < 1e-9, "{lo}");
        assert!((hi - 0.5097986339281972).abs() < 1e-9, "{hi}");
        let (lo, hi) = jeffreys_interval(0, 10_000);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 1e-3);
        assert_eq!(jeffreys_interval(10, 10).1, 1.0);
    }

    #[test]
    fn marginal_points_and_sum() {
        let inst = t1();
        let panels = vec![vec![0, 2], vec![0, 3], vec![1, 2]];
        let est = estimate_marginals(&inst, &panels);
        assert_eq!(est.members[0].hits, 2);
        let total: u64 = est.members.iter().map(|m| m.hits).sum();
        assert_eq!(total, 6);
        let all = estimate_marginals(&inst, &[vec![0, 2], vec![0, 3]]);
        assert_eq!(all.members[0].point, 1.0);
        assert_eq!(all.members[0].upper, 1.0);
        assert_eq!(all.members[1].lower, 0.0);
    }

    #[test]
    fn fairness_aggregates() {
        assert_eq!(gini(&[0.3; 5]), 0.0);
        assert!((gini(&[0.0, 0.0, 1.0, 1.0]) - 0.5).abs() < 1e-12);
        // brute force on a ragged vector
        let v = [0.1, 0.4, 0.2, 0.9, 0.05];
        let mut s = 0.0;
        for a in v {
            for b in v {
                s += f64::abs(a - b);
            }
        }
        let mean = v.iter().sum::<f64>() / 5.0;
        assert!((gini(&v) - s / (2.0 * 25.0 * mean)).abs() < 1e-12);
        assert!((geometric_mean(&[0.5, 0.5]) - 0.5).abs() < 1e-15);
        let f = fairness_summary(&[0.2, 0.8]);
        assert_eq!((f.min, f.max), (0.2, 0.8));
    }

    fn copy_instance() -> Instance {
        // `b` copies `a`; `c` is independent of both
        let feats = ["a", "b", "c"]
            .iter()
            .map(|n| FeatureDef {
                name: n.to_string(),
                values: vec!["x".into(), "y".into()],
            })
            .collect();
        let pool = (0..8)
            .map(|i| {
                let a = if i % 2 == 0 { "x" } else { "y" };
                let c = if i / 2 % 2 == 0 { "x" } else { "y" };
                member(&i.to_string(), &[("a", a), ("b", a), ("c", c)])
            })
            .collect();
        let quotas = ["a", "b", "c"]
            .iter()
            .flat_map(|f| [quota(f, "x", 0, 4), quota(f, "y", 0, 4)])
            .collect();
        Instance::new(4, feats, quotas, pool).unwrap()
    }

    #[test]
    fn diversity_metrics() {
        let inst = copy_instance();
        let panel = vec![vec![0, 1, 2, 3]];
        let d = diversity_report(&inst, &panel);
        assert_eq!(d.expected_vector_count, 4.0);
        assert_eq!(d.vector_count_ratio, 1.0);
        assert!((d.pairwise_nmi["a|b"] - 0.5).abs() < 1e-12);
        assert!(d.pairwise_nmi["a|c"].abs() < 1e-12);
        // H(a)+H(b)+H(c) - H(a,b,c) = 3 ln2 - 2 ln2
        assert!((d.total_correlation - 2f64.ln()).abs() < 1e-12);

        let single = diversity_report(&t1(), &[vec![0, 2], vec![1, 3]]);
        assert_eq!(single.total_correlation, 0.0);
        assert!(single.pairwise_nmi.is_empty());

        // constant features give 0/0, reported as 0
        let same = diversity_report(&inst, &[vec![0, 4]]);
        assert_eq!(same.pairwise_nmi["a|b"], 0.0);
    }

    #[test]
    fn ratio_of_big_counts() {
        let a = BigUint::from(3u32) << 2000;
        let b = BigUint::from(4u32) << 2000;
        assert!((big_ratio(&a, &b) - 0.75).abs() < 1e-15);
        assert_eq!(big_ratio(&BigUint::from(1u32), &BigUint::from(4u32)), 0.25);
    }

    #[test]
    fn holdout_on_two_feature_t1() {
        // T1 plus a crossed region feature.
        let inst = Instance::new(
            2,
            vec![
                FeatureDef {
                    name: "gender".into(),
                    values: vec!["F".into(), "M".into()],
                },
                FeatureDef {
                    name: "region".into(),
                    values: vec!["N".into(), "S".into()],
                },
            ],
            vec![
                quota("gender", "F", 1, 1),
                quota("gender", "M", 1, 1),
                quota("region", "N", 1, 1),
                quota("region", "S", 1, 1),
            ],
            vec![
                member("1", &[("gender", "F"), ("region", "N")]),
                member("2", &[("gender", "F"), ("region", "S")]),
                member("3", &[("gender", "M"), ("region", "N")]),
                member("4", &[("gender", "M"), ("region", "S")]),
            ],
        )
        .unwrap();
        // region-compliant: {1,2},{1,4},{2,3},{3,4}; of those gender-compliant: {1,4},{2,3}
        let exact = exact_holdout_ratio(&inst, 0).unwrap();
        assert_eq!(exact, 0.5);
        let r = holdout_experiment(&inst, 0, None, 20_000, 1, &PlanConfig::default(), true).unwrap();
        assert_eq!(r.exact, Some(0.5));
        assert!(r.lower <= 0.5 && 0.5 <= r.upper, "{r:?}");
    }

    #[test]
    fn csv_rows() {
        let inst = copy_instance();
        let report = evaluate(&inst, &[vec![0, 1, 2, 3]]);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("nmi:a|b,0.5"));
    }
}
