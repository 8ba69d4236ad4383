//! Member grouping and packed state-key layout for the counting DP.
//!
//! A DP state is a partial profile over the *tracked coordinates*: the panel
//! size plus every binding feature-value pair of the table's features.
//! Each coordinate occupies a bit field of a `u128` key. A coordinate is
//! live from the first group that contributes to it until the last one;
//! after its last contributor its bounds are final, so the field is cleared
//! and may be reused by a coordinate whose live interval starts later.
//! Ordering groups by the anchor feature makes each anchor value's interval
//! short, which is what shrinks the state space.

use std::collections::BTreeMap;

use crate::error::CountingError;
use crate::instance::Instance;

pub(crate) const SIZE_COORD: usize = 0;

#[derive(Debug, Clone)]
pub(crate) struct Coord {
    /// `None` for the panel-size coordinate.
    pub fv: Option<usize>,
    pub lower: u32,
    pub upper: u32,
    /// First and last group index that contributes to this coordinate.
    pub first: usize,
    pub last: usize,
    pub offset: u32,
    pub width: u32,
}

impl Coord {
    pub fn mask(&self) -> u128 {
        if self.width == 0 {
            0
        } else {
            (1u128 << self.width) - 1
        }
    }
}

/// Bounds a group's transition must respect for one coordinate.
#[derive(Debug, Clone)]
pub(crate) struct Check {
    pub offset: u32,
    pub mask: u128,
    pub upper: i64,
    /// Lower bound minus what later groups can still contribute.
    pub need_after: i64,
}

/// One tracked value of a feature, as seen by the per-feature slot check.
#[derive(Debug, Clone)]
pub(crate) struct SlotTerm {
    pub offset: u32,
    pub mask: u128,
    pub lower: i64,
    pub upper: i64,
    pub avail: i64,
}

/// Per-feature test on a state after a group: the remaining panel slots
/// must cover the feature's unmet lower bounds and must be fillable without
/// breaking its upper bounds.
#[derive(Debug, Clone, Default)]
pub(crate) struct FeatureSlots {
    pub terms: Vec<SlotTerm>,
    /// Contribution of values whose count is zero in every state here
    /// (not started yet) or untracked.
    pub base_deficit: i64,
    pub base_capacity: i64,
}

#[derive(Debug, Clone)]
pub(crate) struct GroupPlan {
    pub members: Vec<usize>,
    /// Tracked coordinates (besides size) every member of the group adds to.
    pub coords: Vec<usize>,
    pub checks: Vec<Check>,
    pub delta: u128,
    pub finalize_mask: u128,
    /// Slot checks for states after this group.
    pub slots: Vec<FeatureSlots>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub features: Vec<usize>,
    pub anchor: Option<usize>,
    pub coords: Vec<Coord>,
    pub groups: Vec<GroupPlan>,
    pub key_bits: u32,
    pub reduction: bool,
    /// Some quota can never be met; the table is empty.
    pub infeasible: bool,
}

fn bits_for(v: u32) -> u32 {
    (32 - v.leading_zeros()).max(1)
}

impl Layout {
    /// `features` is in table order; `coarse_group` (member -> group of a
    /// coarser table) forces every group to sit inside one coarse group.
    pub fn new(
        instance: &Instance,
        features: Vec<usize>,
        anchor: Option<usize>,
        coarse_group: Option<&[usize]>,
        aggregate: bool,
        reduction: bool,
    ) -> Result<Self, CountingError> {
        let k = instance.panel_size() as u32;
        let n = instance.pool_size();
        let mut infeasible = false;

        // tracked fv -> coordinate index
        let mut coords = vec![Coord {
            fv: None,
            lower: k,
            upper: k,
            first: 0,
            last: 0,
            offset: 0,
            width: bits_for(k),
        }];
        let mut coord_of_fv = vec![None; instance.num_fv()];
        let mut holders = vec![0u32; instance.num_fv()];
        for m in 0..n {
            for &f in &features {
                holders[instance.fv_index(f, instance.value_of(m, f))] += 1;
            }
        }
        for &f in &features {
            for fv in instance.fv_range(f) {
                let (lower, upper) = instance.bounds(fv);
                // Bounds the pool can never push against are not tracked.
                if lower == 0 && upper >= k.min(holders[fv]) {
                    continue;
                }
                let upper = upper.min(k);
                if lower > upper {
                    infeasible = true;
                }
                coord_of_fv[fv] = Some(coords.len());
                coords.push(Coord {
                    fv: Some(fv),
                    lower,
                    upper,
                    first: usize::MAX,
                    last: 0,
                    offset: 0,
                    width: bits_for(upper),
                });
            }
        }

        // Sort key: coarse group, anchor entry, then each feature's tracked
        // value (None when the member's value is not tracked).
        let order: Vec<usize> = {
            let mut rest: Vec<usize> = features.iter().copied().filter(|&f| Some(f) != anchor).collect();
            if let Some(a) = anchor {
                rest.insert(0, a);
            }
            rest
        };
        let key_of = |m: usize| -> (usize, Vec<Option<u16>>) {
            let cg = coarse_group.map_or(0, |c| c[m]);
            let sig = order
                .iter()
                .map(|&f| {
                    let v = instance.value_of(m, f);
                    coord_of_fv[instance.fv_index(f, v)].map(|_| v as u16)
                })
                .collect();
            (cg, sig)
        };

        type BucketKey = (usize, Vec<Option<u16>>, usize);
        let mut buckets: BTreeMap<BucketKey, Vec<usize>> = BTreeMap::new();
        for m in 0..n {
            let (cg, sig) = key_of(m);
            let tie = if aggregate { 0 } else { m };
            buckets.entry((cg, sig, tie)).or_default().push(m);
        }

        let mut groups: Vec<GroupPlan> = Vec::with_capacity(buckets.len());
        for ((_, sig, _), members) in buckets {
            let mut gc = Vec::new();
            for (&f, v) in order.iter().zip(&sig) {
                if let Some(v) = v {
                    gc.push(coord_of_fv[instance.fv_index(f, *v as usize)].unwrap());
                }
            }
            gc.sort_unstable();
            let j = groups.len();
            for &c in &gc {
                coords[c].first = coords[c].first.min(j);
                coords[c].last = j;
            }
            groups.push(GroupPlan {
                members,
                coords: gc,
                checks: Vec::new(),
                delta: 0,
                finalize_mask: 0,
                slots: Vec::new(),
            });
        }
        let num_groups = groups.len();
        coords[SIZE_COORD].first = 0;
        coords[SIZE_COORD].last = num_groups - 1;

        // Coordinates nobody contributes to: fine if the lower bound is 0.
        let mut keep = vec![true; coords.len()];
        for (c, coord) in coords.iter().enumerate().skip(1) {
            if coord.first == usize::MAX {
                keep[c] = false;
                if coord.lower > 0 {
                    infeasible = true;
                }
            }
        }
        if keep.iter().any(|k| !k) {
            let mut remap = vec![usize::MAX; coords.len()];
            let mut kept = Vec::new();
            for (c, coord) in coords.into_iter().enumerate() {
                if keep[c] {
                    remap[c] = kept.len();
                    kept.push(coord);
                }
            }
            coords = kept;
            for g in &mut groups {
                for c in &mut g.coords {
                    *c = remap[*c];
                }
            }
        }

        // Slot assignment.
        let size_width = coords[SIZE_COORD].width;
        let mut slot_of = vec![0usize; coords.len()];
        // (last group of current occupant, width)
        let mut slots: Vec<(usize, u32)> = vec![(num_groups - 1, size_width)];
        let mut by_start: Vec<usize> = (1..coords.len()).collect();
        by_start.sort_by_key(|&c| (coords[c].first, c));
        for c in by_start {
            let reuse = if reduction {
                slots
                    .iter()
                    .enumerate()
                    .skip(1)
                    .find(|(_, (last, _))| *last < coords[c].first)
                    .map(|(s, _)| s)
            } else {
                None
            };
            let s = match reuse {
                Some(s) => {
                    slots[s].0 = coords[c].last;
                    slots[s].1 = slots[s].1.max(coords[c].width);
                    s
                }
                None => {
                    slots.push((coords[c].last, coords[c].width));
                    slots.len() - 1
                }
            };
            slot_of[c] = s;
        }
        let mut offsets = Vec::with_capacity(slots.len());
        let mut key_bits = 0u32;
        for &(_, w) in &slots {
            offsets.push(key_bits);
            key_bits += w;
        }
        if key_bits > 128 {
            return Err(CountingError::KeyTooWide { bits: key_bits });
        }
        for (c, coord) in coords.iter_mut().enumerate() {
            coord.offset = offsets[slot_of[c]];
            coord.width = slots[slot_of[c]].1;
        }

        // Remaining contributors after each group.
        let mut avail = vec![0i64; coords.len()];
        for g in &groups {
            avail[SIZE_COORD] += g.members.len() as i64;
            for &c in &g.coords {
                avail[c] += g.members.len() as i64;
            }
        }
        for (j, g) in groups.iter_mut().enumerate() {
            let nj = g.members.len() as i64;
            avail[SIZE_COORD] -= nj;
            for &c in &g.coords {
                avail[c] -= nj;
            }
            let mut checks = Vec::with_capacity(g.coords.len() + 1);
            let mut delta = 0u128;
            let mut finalize = 0u128;
            for &c in std::iter::once(&SIZE_COORD).chain(g.coords.iter()) {
                let coord = &coords[c];
                checks.push(Check {
                    offset: coord.offset,
                    mask: coord.mask(),
                    upper: coord.upper as i64,
                    need_after: coord.lower as i64 - avail[c],
                });
                delta += 1u128 << coord.offset;
                if reduction && coord.last == j {
                    finalize |= coord.mask() << coord.offset;
                }
            }
            g.checks = checks;
            g.delta = delta;
            g.finalize_mask = finalize;
        }

        // Per-feature slot checks. `remaining[fv]` counts members in groups
        // after the current one holding value fv.
        let mut remaining = holders.clone();
        #[allow(clippy::needless_range_loop)]
        for j in 0..num_groups {
            for &m in &groups[j].members {
                for &f in &features {
                    remaining[instance.fv_index(f, instance.value_of(m, f))] -= 1;
                }
            }
            let mut slots = Vec::with_capacity(features.len());
            for &f in &features {
                let mut fs = FeatureSlots::default();
                let mut any_tracked = false;
                for fv in instance.fv_range(f) {
                    let avail = remaining[fv] as i64;
                    let Some(c) = coords.iter().position(|c| c.fv == Some(fv)) else {
                        fs.base_capacity += avail;
                        continue;
                    };
                    any_tracked = true;
                    let coord = &coords[c];
                    let (lower, upper) = (coord.lower as i64, coord.upper as i64);
                    if coord.first > j {
                        fs.base_deficit += lower;
                        fs.base_capacity += upper.min(avail);
                    } else if !reduction || coord.last > j {
                        fs.terms.push(SlotTerm {
                            offset: coord.offset,
                            mask: coord.mask(),
                            lower,
                            upper,
                            avail,
                        });
                    }
                }
                if any_tracked {
                    slots.push(fs);
                }
            }
            groups[j].slots = slots;
        }

        Ok(Self {
            features,
            anchor,
            coords,
            groups,
            key_bits,
            reduction,
            infeasible,
        })
    }

    /// Admissible number of members to take from group `j` in state `key`,
    /// taking at most `cap`.
    #[inline]
    pub fn d_range(&self, j: usize, key: u128, cap: usize) -> Option<(usize, usize)> {
        let mut lo: i64 = 0;
        let mut hi: i64 = cap as i64;
        for c in &self.groups[j].checks {
            let z = ((key >> c.offset) & c.mask) as i64;
            hi = hi.min(c.upper - z);
            lo = lo.max(c.need_after - z);
        }
        (lo <= hi).then_some((lo as usize, hi as usize))
    }

    #[inline]
    pub fn next_key(&self, j: usize, key: u128, d: usize) -> u128 {
        let g = &self.groups[j];
        (key + d as u128 * g.delta) & !g.finalize_mask
    }

    /// Per-feature slot test on a state of layer `j + 1` (after group `j`).
    #[inline]
    pub fn slots_ok(&self, j: usize, key: u128) -> bool {
        let size = (key & self.coords[SIZE_COORD].mask()) as i64;
        let left = self.coords[SIZE_COORD].upper as i64 - size;
        self.groups[j].slots.iter().all(|fs| {
            let mut deficit = fs.base_deficit;
            let mut capacity = fs.base_capacity;
            for t in &fs.terms {
                let z = ((key >> t.offset) & t.mask) as i64;
                deficit += (t.lower - z).max(0);
                capacity += (t.upper - z).min(t.avail);
            }
            deficit <= left && capacity >= left
        })
    }

    /// Whether coordinate `c` holds a meaningful value in keys of layer `j`
    /// (the state before group `j` is processed).
    pub fn live_at(&self, c: usize, j: usize) -> bool {
        let coord = &self.coords[c];
        coord.first < j && (!self.reduction || coord.last >= j)
    }

    pub fn coord_of_fv(&self, fv: Option<usize>) -> Option<usize> {
        self.coords.iter().position(|c| c.fv == fv)
    }
}
