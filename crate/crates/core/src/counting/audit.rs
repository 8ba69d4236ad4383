//! Projection of fine states onto a coarser table, used both to prune the
//! forward pass and to audit that coarse counts dominate fine counts.

use num_traits::Zero;
use serde::Serialize;

use super::layout::{Layout, SIZE_COORD};
use super::weights::convolution_coeffs;
use super::{BigCount, DpTable};
use crate::error::CountingError;

#[derive(Debug, Clone)]
struct Field {
    fine_offset: u32,
    fine_mask: u128,
    coarse_offset: u32,
}

#[derive(Debug, Clone)]
struct LayerMap {
    /// Coarse group containing the start of this fine group.
    coarse_group: usize,
    /// Members of that coarse group not yet processed at this fine layer.
    remaining: Vec<usize>,
    fields: Vec<Field>,
}

/// Per fine layer, how to read a fine key as a state of the coarse table
/// part-way through one of its groups.
#[derive(Debug, Clone)]
pub(crate) struct ProjectionMaps {
    layers: Vec<LayerMap>,
}

fn member_groups(layout: &Layout, n: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; n];
    for (g, grp) in layout.groups.iter().enumerate() {
        for &m in &grp.members {
            out[m] = g;
        }
    }
    out
}

impl ProjectionMaps {
    pub fn new(fine: &Layout, coarse: &DpTable) -> Self {
        let cl = &coarse.layout;
        let n = coarse.weights.len();
        let cg_of = member_groups(cl, n);
        let mut layers = Vec::with_capacity(fine.groups.len());
        for (j, grp) in fine.groups.iter().enumerate() {
            let g = cg_of[grp.members[0]];
            let remaining: Vec<usize> = fine.groups[j..]
                .iter()
                .take_while(|h| cg_of[h.members[0]] == g)
                .flat_map(|h| h.members.iter().copied())
                .collect();
            let mut fields = Vec::new();
            for (cc, coord) in cl.coords.iter().enumerate() {
                let active = coord.first <= g && (!cl.reduction || coord.last >= g);
                if !active {
                    continue;
                }
                let Some(fc) = fine.coord_of_fv(coord.fv) else { continue };
                if cc != SIZE_COORD && !fine.live_at(fc, j) {
                    continue;
                }
                if cc == SIZE_COORD && j == 0 {
                    continue;
                }
                fields.push(Field {
                    fine_offset: fine.coords[fc].offset,
                    fine_mask: fine.coords[fc].mask(),
                    coarse_offset: coord.offset,
                });
            }
            layers.push(LayerMap {
                coarse_group: g,
                remaining,
                fields,
            });
        }
        Self { layers }
    }

    #[inline]
    fn project(&self, j: usize, key: u128) -> u128 {
        self.layers[j]
            .fields
            .iter()
            .fold(0u128, |acc, f| acc | (((key >> f.fine_offset) & f.fine_mask) << f.coarse_offset))
    }

    /// Whether the restriction of fine state `key` at layer `j` has any
    /// completion in the coarse table.
    pub fn coarse_has_completion(&self, j: usize, key: u128, coarse: &DpTable) -> bool {
        let map = &self.layers[j];
        let g = map.coarse_group;
        let pseudo = self.project(j, key);
        let Some((lo, hi)) = coarse.layout.d_range(g, pseudo, map.remaining.len()) else {
            return false;
        };
        let next = &coarse.layers[g + 1];
        (lo..=hi).any(|d| next.contains(coarse.layout.next_key(g, pseudo, d)))
    }

    /// Coarse completion count of the restriction of `key`.
    fn coarse_count(&self, j: usize, key: u128, coarse: &DpTable, rem_coeffs: &[BigCount]) -> BigCount {
        let map = &self.layers[j];
        let g = map.coarse_group;
        let pseudo = self.project(j, key);
        let mut sum = BigCount::zero();
        if let Some((lo, hi)) = coarse.layout.d_range(g, pseudo, map.remaining.len()) {
            for (d, c) in rem_coeffs.iter().enumerate().take(hi + 1).skip(lo) {
                if let Some(phi) = coarse.layers[g + 1].get(coarse.layout.next_key(g, pseudo, d)) {
                    sum += c * phi;
                }
            }
        }
        sum
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct PruningAudit {
    pub states_checked: usize,
    /// Fine states whose count exceeds the coarse count of their restriction.
    pub violations: usize,
    /// Fine states whose restriction has coarse count zero (prunable).
    pub prunable: usize,
}

/// Checks that every stored state of `fine` has a completion count no larger
/// than the coarse completion count of its restriction. `fine` must have been
/// built with `coarse` as its pruning table (pruning may be switched off),
/// and both must carry the same weights and retained counts.
pub fn audit_pruning(coarse: &DpTable, fine: &DpTable) -> Result<PruningAudit, CountingError> {
    if !coarse.has_counts() || !fine.has_counts() {
        return Err(CountingError::CountsNotRetained);
    }
    if coarse.weights != fine.weights {
        return Err(CountingError::IncompatiblePruneTable("weights differ".into()));
    }
    if coarse.layout.reduction != fine.layout.reduction {
        return Err(CountingError::IncompatiblePruneTable("anchor reduction settings differ".into()));
    }
    if let Some(f) = coarse.features().iter().find(|f| !fine.features().contains(f)) {
        return Err(CountingError::IncompatiblePruneTable(format!(
            "feature #{f} of the coarse table is missing from the fine table"
        )));
    }
    let cg_of = member_groups(&coarse.layout, coarse.weights.len());
    let mut prev = 0usize;
    for grp in &fine.layout.groups {
        let g = cg_of[grp.members[0]];
        if grp.members.iter().any(|&m| cg_of[m] != g) || g < prev {
            return Err(CountingError::IncompatiblePruneTable(
                "fine groups are not ordered inside the coarse groups".into(),
            ));
        }
        prev = g;
    }

    let mut audit = PruningAudit {
        states_checked: 0,
        violations: 0,
        prunable: 0,
    };
    if coarse.layout.coords.len() <= 1 || fine.layout.infeasible {
        audit.states_checked = fine.total_states();
        return Ok(audit);
    }
    let maps = ProjectionMaps::new(&fine.layout, coarse);
    for j in 0..fine.num_groups() {
        let rem = convolution_coeffs(&maps.layers[j].remaining, &fine.weights);
        let layer = &fine.layers[j];
        for (key, phi) in layer.keys.iter().zip(&layer.counts) {
            let bound = maps.coarse_count(j, *key, coarse, &rem);
            audit.states_checked += 1;
            if *phi > bound {
                audit.violations += 1;
            }
            if bound.is_zero() {
                audit.prunable += 1;
            }
        }
    }
    Ok(audit)
}
