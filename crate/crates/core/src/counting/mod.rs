//! Exact weighted counting of quota-feasible panels.
//!
//! The table stores, for every group boundary `j` and every reachable
//! partial state `z` with a nonzero completion count, the weighted number
//! of ways `phi(j, z)` to complete `z` into a quota-compliant panel using
//! groups `j..`. Counts are exact big integers; zero states are never
//! stored, so the skeleton of stored states does not depend on the
//! (positive) weights and can be reused by [`DpTable::reweight`].

mod audit;
mod layout;
mod weights;

use num_bigint::RandBigInt;
use num_traits::{One, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use audit::{audit_pruning, PruningAudit};
pub use weights::{convolution_coeffs, BigCount, WeightVector, MAX_WEIGHT};

use crate::error::{CountingError, SamplingError};
use crate::instance::{choose_anchor, Instance};
use layout::Layout;
use weights::suffix_coeffs;

/// Rough live bytes per stored state (key, big-integer count, vector slack).
const BYTES_PER_STATE: u64 = 72;

#[derive(Debug, Clone)]
pub struct DpOptions {
    /// Finalize and drop coordinates once their last contributing group is
    /// processed (the anchor-feature reduction).
    pub anchor_reduction: bool,
    /// Process members with identical tracked vectors in one step.
    pub aggregate: bool,
    /// Use the coarser table passed as `prune_with` to skip states. When
    /// false the coarser table still fixes the group order.
    pub prune: bool,
    /// Keep counts for every layer. Required for sampling.
    pub retain_counts: bool,
    pub memory_budget_bytes: u64,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self {
            anchor_reduction: true,
            aggregate: true,
            prune: true,
            retain_counts: true,
            memory_budget_bytes: 8 << 30,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Layer {
    keys: Vec<u128>,
    counts: Vec<BigCount>,
}

impl Layer {
    #[inline]
    fn get(&self, key: u128) -> Option<&BigCount> {
        self.keys.binary_search(&key).ok().map(|i| &self.counts[i])
    }

    #[inline]
    fn contains(&self, key: u128) -> bool {
        self.keys.binary_search(&key).is_ok()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub states: usize,
    pub estimated_bytes: u64,
    pub max_count_bits: u64,
}

#[derive(Debug, Clone)]
pub struct DpTable {
    layout: Layout,
    weights: WeightVector,
    panel_size: usize,
    coeffs: Vec<Vec<BigCount>>,
    /// Per group; `None` when all members of the group share one weight.
    suffix: Vec<Option<Vec<Vec<BigCount>>>>,
    layers: Vec<Layer>,
    retain_counts: bool,
}

impl DpTable {
    /// Features enforced by this table, in table order.
    pub fn features(&self) -> &[usize] {
        &self.layout.features
    }

    pub fn anchor(&self) -> Option<usize> {
        self.layout.anchor
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn num_groups(&self) -> usize {
        self.layout.groups.len()
    }

    /// Members of group `j`, in table order.
    pub fn group_members(&self, j: usize) -> &[usize] {
        &self.layout.groups[j].members
    }

    /// Weighted combination counts `C(j, d)` for `d = 0..=n_j`.
    pub fn conv_coeffs(&self, j: usize) -> &[BigCount] {
        &self.coeffs[j]
    }

    pub fn key_bits(&self) -> u32 {
        self.layout.key_bits
    }

    /// Number of stored (nonzero) states at layer `j`; layer `num_groups()`
    /// is the base layer.
    pub fn layer_len(&self, j: usize) -> usize {
        self.layers[j].keys.len()
    }

    pub fn total_states(&self) -> usize {
        self.layers.iter().map(|l| l.keys.len()).sum()
    }

    pub fn has_counts(&self) -> bool {
        self.retain_counts
    }

    /// Weighted count of panels feasible for this table's features.
    pub fn total_count(&self) -> BigCount {
        self.layers[0].counts.first().cloned().unwrap_or_default()
    }

    pub fn layer_stats(&self) -> Vec<LayerStats> {
        self.layers
            .iter()
            .enumerate()
            .map(|(j, l)| LayerStats {
                layer: j,
                states: l.keys.len(),
                estimated_bytes: l.keys.len() as u64 * BYTES_PER_STATE
                    + l.counts.iter().map(|c| c.bits().div_ceil(64) * 8).sum::<u64>(),
                max_count_bits: l.counts.iter().map(|c| c.bits()).max().unwrap_or(0),
            })
            .collect()
    }

    /// Recomputes counts under new weights over the same state skeleton.
    pub fn reweight(&self, weights: &WeightVector) -> Result<DpTable, CountingError> {
        if weights.len() != self.weights.len() {
            return Err(CountingError::InvalidWeights(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        let (coeffs, suffix) = group_coefficients(&self.layout, weights, self.panel_size);
        let mut table = DpTable {
            layout: self.layout.clone(),
            weights: weights.clone(),
            panel_size: self.panel_size,
            coeffs,
            suffix,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    keys: l.keys.clone(),
                    counts: Vec::new(),
                })
                .collect(),
            retain_counts: self.retain_counts,
        };
        table.backward(false);
        Ok(table)
    }

    /// Draws one member set from the product distribution restricted to the
    /// panels this table admits.
    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<usize>, SamplingError> {
        if !self.retain_counts {
            return Err(CountingError::CountsNotRetained.into());
        }
        let Some(root) = self.layers[0].counts.first() else {
            return Err(SamplingError::ZeroCount);
        };
        let mut panel = Vec::with_capacity(self.panel_size);
        let mut key = 0u128;
        let mut current = root.clone();
        for j in 0..self.num_groups() {
            let group = &self.layout.groups[j];
            let (lo, hi) = self
                .layout
                .d_range(j, key, group.members.len())
                .expect("stored state has an admissible transition");
            let next_layer = &self.layers[j + 1];
            let mut r = rng.gen_biguint_below(&current);
            let mut chosen = None;
            for d in lo..=hi {
                let nk = self.layout.next_key(j, key, d);
                let Some(phi) = next_layer.get(nk) else { continue };
                let w = &self.coeffs[j][d] * phi;
                if r < w {
                    chosen = Some((d, nk, phi.clone()));
                    break;
                }
                r -= w;
            }
            let (d, nk, phi) = chosen.expect("cumulative weights sum to the state count");
            self.draw_subset(j, d, rng, &mut panel);
            key = nk;
            current = phi;
        }
        panel.sort_unstable();
        Ok(panel)
    }

    /// Picks `d` members of group `j` with probability proportional to the
    /// product of their weights.
    fn draw_subset<R: Rng + ?Sized>(&self, j: usize, d: usize, rng: &mut R, out: &mut Vec<usize>) {
        let members = &self.layout.groups[j].members;
        if d == 0 {
            return;
        }
        match &self.suffix[j] {
            None => {
                for i in rand::seq::index::sample(rng, members.len(), d) {
                    out.push(members[i]);
                }
            }
            Some(table) => {
                let n = members.len();
                let mut left = d;
                for t in 0..n {
                    if left == 0 {
                        break;
                    }
                    if n - t == left {
                        out.extend_from_slice(&members[t..]);
                        break;
                    }
                    let r = rng.gen_biguint_below(&table[t][left]);
                    let take = BigCount::from(self.weights.get(members[t])) * &table[t + 1][left - 1];
                    if r < take {
                        out.push(members[t]);
                        left -= 1;
                    }
                }
            }
        }
    }

    /// Fills counts from the base layer upward over the stored keys. When
    /// `drop_zero` is set, states with a zero count are removed.
    fn backward(&mut self, drop_zero: bool) {
        let g_count = self.num_groups();
        let base = g_count;
        self.layers[base].counts = vec![BigCount::one(); self.layers[base].keys.len()];
        for j in (0..g_count).rev() {
            let (head, tail) = self.layers.split_at_mut(j + 1);
            let next = &tail[0];
            let cur = &mut head[j];
            let layout = &self.layout;
            let coeffs = &self.coeffs[j];
            let cap = layout.groups[j].members.len();
            let computed: Vec<(u128, BigCount)> = cur
                .keys
                .par_iter()
                .filter_map(|&key| {
                    let mut sum = BigCount::zero();
                    if let Some((lo, hi)) = layout.d_range(j, key, cap) {
                        for (d, c) in coeffs.iter().enumerate().take(hi + 1).skip(lo) {
                            if let Some(phi) = next.get(layout.next_key(j, key, d)) {
                                sum += c * phi;
                            }
                        }
                    }
                    if drop_zero && sum.is_zero() {
                        None
                    } else {
                        Some((key, sum))
                    }
                })
                .collect();
            let (keys, counts): (Vec<u128>, Vec<BigCount>) = computed.into_iter().unzip();
            cur.keys = keys;
            cur.counts = counts;
            if !self.retain_counts {
                tail[0].counts = Vec::new();
            }
        }
    }
}

type Coefficients = Vec<BigCount>;

fn group_coefficients(
    layout: &Layout,
    weights: &WeightVector,
    panel_size: usize,
) -> (Vec<Coefficients>, Vec<Option<Vec<Coefficients>>>) {
    layout
        .groups
        .par_iter()
        .map(|g| {
            let coeffs = convolution_coeffs(&g.members, weights);
            let first = weights.get(g.members[0]);
            let uniform = g.members.iter().all(|&m| weights.get(m) == first);
            let suffix = (!uniform).then(|| suffix_coeffs(&g.members, weights, panel_size));
            (coeffs, suffix)
        })
        .unzip()
}

/// Builds the counting table for the features `features`.
///
/// With `prune_with`, a table over a subset of `features`, groups are
/// ordered inside the coarser table's groups and the anchor is inherited,
/// so every state can be checked against the coarser counts; states whose
/// restriction has no completion there are never materialized.
pub fn build_dp(
    instance: &Instance,
    features: &[usize],
    weights: &WeightVector,
    prune_with: Option<&DpTable>,
    options: &DpOptions,
) -> Result<DpTable, CountingError> {
    if weights.len() != instance.pool_size() {
        return Err(CountingError::InvalidWeights(format!(
            "expected {} weights, got {}",
            instance.pool_size(),
            weights.len()
        )));
    }
    let mut wanted: Vec<usize> = features.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(&bad) = wanted.iter().find(|&&f| f >= instance.features().len()) {
        return Err(CountingError::Instance(crate::error::InstanceError::UnknownFeature(
            format!("#{bad}"),
        )));
    }

    // A coarse table without tracked coordinates carries no information.
    let coarse = prune_with.filter(|c| c.layout.coords.len() > 1);
    let (order, anchor, coarse_group) = match coarse {
        Some(c) => {
            if c.weights.len() != instance.pool_size() {
                return Err(CountingError::IncompatiblePruneTable("pool size differs".into()));
            }
            if let Some(f) = c.features().iter().find(|f| !wanted.contains(f)) {
                return Err(CountingError::IncompatiblePruneTable(format!(
                    "feature #{f} of the pruning table is not being counted"
                )));
            }
            if c.layout.reduction != options.anchor_reduction {
                return Err(CountingError::IncompatiblePruneTable(
                    "anchor reduction settings differ".into(),
                ));
            }
            let mut order = c.features().to_vec();
            order.extend(wanted.iter().copied().filter(|f| !c.features().contains(f)));
            let mut member_group = vec![0usize; instance.pool_size()];
            for (g, grp) in c.layout.groups.iter().enumerate() {
                for &m in &grp.members {
                    member_group[m] = g;
                }
            }
            (order, c.anchor(), Some(member_group))
        }
        None => {
            let binding: Vec<usize> = wanted
                .iter()
                .copied()
                .filter(|&f| instance.feature_is_binding(f))
                .collect();
            let anchor = choose_anchor(instance, &binding);
            (wanted.clone(), anchor, None)
        }
    };

    let layout = Layout::new(
        instance,
        order,
        anchor,
        coarse_group.as_deref(),
        options.aggregate,
        options.anchor_reduction,
    )?;
    let (coeffs, suffix) = group_coefficients(&layout, weights, instance.panel_size());
    let g_count = layout.groups.len();
    let mut table = DpTable {
        layout,
        weights: weights.clone(),
        panel_size: instance.panel_size(),
        coeffs,
        suffix,
        layers: vec![Layer::default(); g_count + 1],
        retain_counts: options.retain_counts,
    };
    if table.layout.infeasible {
        return Ok(table);
    }

    let prune = match coarse {
        Some(c) if options.prune => Some(audit::ProjectionMaps::new(&table.layout, c)),
        _ => None,
    };
    let prune_ok = |j: usize, key: u128| -> bool {
        match (&prune, coarse) {
            (Some(maps), Some(c)) if j < g_count => maps.coarse_has_completion(j, key, c),
            _ => true,
        }
    };

    // Forward reachability.
    let mut live: u64 = 0;
    let root_ok = prune_ok(0, 0);
    table.layers[0].keys = if root_ok { vec![0] } else { Vec::new() };
    for j in 0..g_count {
        let cur = &table.layers[j].keys;
        let layout = &table.layout;
        let cap = layout.groups[j].members.len();
        let mut next: Vec<u128> = cur
            .par_iter()
            .flat_map_iter(|&key| {
                let range = layout.d_range(j, key, cap);
                range
                    .into_iter()
                    .flat_map(move |(lo, hi)| (lo..=hi).map(move |d| layout.next_key(j, key, d)))
            })
            .collect();
        next.par_sort_unstable();
        next.dedup();
        if j + 1 < g_count {
            next = next
                .into_par_iter()
                .filter(|&k| layout.slots_ok(j, k) && prune_ok(j + 1, k))
                .collect();
        }
        live += next.len() as u64;
        let estimated = live * BYTES_PER_STATE;
        if estimated > options.memory_budget_bytes {
            return Err(CountingError::ResourceExceeded {
                layer: j + 1,
                live_states: live as usize,
                estimated_bytes: estimated,
                budget_bytes: options.memory_budget_bytes,
            });
        }
        table.layers[j + 1].keys = next;
    }

    table.backward(true);
    Ok(table)
}

/// `phi(1, 0)` of a table.
pub fn total_count(table: &DpTable) -> BigCount {
    table.total_count()
}

pub fn reweight(table: &DpTable, weights: &WeightVector) -> Result<DpTable, CountingError> {
    table.reweight(weights)
}
