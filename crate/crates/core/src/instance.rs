//! Sortition instances: pool, features, quotas and panel size.
//!
//! An [`Instance`] is immutable after construction. Feature values are
//! addressed internally by a flat feature-value index (`fv`), laid out
//! feature by feature in declaration order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::InstanceError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub values: Vec<String>,
}

impl FeatureDef {
    /// Features with a single value are allowed but carry no information.
    pub fn is_degenerate(&self) -> bool {
        self.values.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub feature: String,
    pub value: String,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolMember {
    pub id: String,
    pub attributes: BTreeMap<String, String>,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceFile {
    panel_size: usize,
    features: Vec<FeatureDef>,
    quotas: Vec<Quota>,
    pool: Vec<PoolMember>,
}

/// Where to read an instance from.
#[derive(Debug, Clone)]
pub enum InstanceSource<'a> {
    Json(&'a Path),
    JsonBytes(&'a [u8]),
    /// Pool CSV (`id,<feature>...`) plus quotas CSV (`feature,value,min,max`).
    /// Neither file carries the panel size, so it is passed alongside.
    CsvPair {
        pool: &'a Path,
        quotas: &'a Path,
        panel_size: usize,
    },
    CsvPairBytes {
        pool: &'a [u8],
        quotas: &'a [u8],
        panel_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    panel_size: usize,
    features: Vec<FeatureDef>,
    /// Indexed by fv.
    quotas: Vec<Quota>,
    pool: Vec<PoolMember>,
    fv_offsets: Vec<usize>,
    /// member -> value index per feature
    member_values: Vec<Vec<u16>>,
    member_index: HashMap<String, usize>,
}

impl Instance {
    /// Builds an instance, checking structural consistency: unique names,
    /// one quota per feature-value pair, every member assigned a known value
    /// for every feature, `min <= max`, and `k <= n`.
    ///
    /// Quota ranges against `k` are checked separately by [`Instance::validate`]
    /// so that deliberately infeasible fixtures can still be built.
    pub fn new(
        panel_size: usize,
        features: Vec<FeatureDef>,
        quotas: Vec<Quota>,
        pool: Vec<PoolMember>,
    ) -> Result<Self, InstanceError> {
        if panel_size == 0 {
            return Err(InstanceError::Invalid("panel_size must be at least 1".into()));
        }
        if panel_size > pool.len() {
            return Err(InstanceError::Invalid(format!(
                "panel_size {} exceeds pool size {}",
                panel_size,
                pool.len()
            )));
        }

        let mut feature_names = HashSet::new();
        let mut fv_offsets = Vec::with_capacity(features.len());
        let mut fv_lookup: HashMap<(&str, &str), usize> = HashMap::new();
        let mut num_fv = 0;
        for f in &features {
            if !feature_names.insert(f.name.as_str()) {
                return Err(InstanceError::Invalid(format!("duplicate feature '{}'", f.name)));
            }
            if f.values.is_empty() {
                return Err(InstanceError::Invalid(format!("feature '{}' has no values", f.name)));
            }
            fv_offsets.push(num_fv);
            for v in &f.values {
                if fv_lookup.insert((f.name.as_str(), v.as_str()), num_fv).is_some() {
                    return Err(InstanceError::Invalid(format!(
                        "duplicate value '{}' in feature '{}'",
                        v, f.name
                    )));
                }
                num_fv += 1;
            }
        }

        let mut ordered: Vec<Option<Quota>> = vec![None; num_fv];
        for q in quotas {
            let Some(&fv) = fv_lookup.get(&(q.feature.as_str(), q.value.as_str())) else {
                return Err(InstanceError::Invalid(format!(
                    "quota for unknown feature value {}={}",
                    q.feature, q.value
                )));
            };
            if q.min > q.max {
                return Err(InstanceError::QuotaBounds {
                    feature: q.feature,
                    value: q.value,
                    min: q.min,
                    max: q.max,
                    panel_size,
                });
            }
            if ordered[fv].is_some() {
                return Err(InstanceError::Invalid(format!(
                    "duplicate quota for {}={}",
                    q.feature, q.value
                )));
            }
            ordered[fv] = Some(q);
        }
        let mut quotas_by_fv = Vec::with_capacity(num_fv);
        for (fi, f) in features.iter().enumerate() {
            for (vi, v) in f.values.iter().enumerate() {
                match ordered[fv_offsets[fi] + vi].take() {
                    Some(q) => quotas_by_fv.push(q),
                    None => {
                        return Err(InstanceError::Invalid(format!(
                            "missing quota for {}={}",
                            f.name, v
                        )))
                    }
                }
            }
        }

        let mut member_index = HashMap::with_capacity(pool.len());
        let mut member_values = Vec::with_capacity(pool.len());
        for (i, m) in pool.iter().enumerate() {
            if member_index.insert(m.id.clone(), i).is_some() {
                return Err(InstanceError::Invalid(format!("duplicate member id '{}'", m.id)));
            }
            let mut row = Vec::with_capacity(features.len());
            for f in &features {
                let Some(val) = m.attributes.get(&f.name) else {
                    return Err(InstanceError::MissingAttribute {
                        member: m.id.clone(),
                        feature: f.name.clone(),
                    });
                };
                let Some(vi) = f.values.iter().position(|v| v == val) else {
                    return Err(InstanceError::UnknownValue {
                        member: m.id.clone(),
                        feature: f.name.clone(),
                        value: val.clone(),
                    });
                };
                row.push(vi as u16);
            }
            if let Some(extra) = m.attributes.keys().find(|k| !feature_names.contains(k.as_str())) {
                return Err(InstanceError::Invalid(format!(
                    "member '{}' has attribute for unknown feature '{}'",
                    m.id, extra
                )));
            }
            member_values.push(row);
        }

        Ok(Self {
            panel_size,
            features,
            quotas: quotas_by_fv,
            pool,
            fv_offsets,
            member_values,
            member_index,
        })
    }

    /// Checks `0 <= min <= max <= k` for every quota and the counting
    /// condition `sum_v min <= k <= sum_v max` for every feature.
    pub fn validate(&self) -> Result<(), InstanceError> {
        let k = self.panel_size as u64;
        for q in &self.quotas {
            if q.max as u64 > k {
                return Err(InstanceError::QuotaBounds {
                    feature: q.feature.clone(),
                    value: q.value.clone(),
                    min: q.min,
                    max: q.max,
                    panel_size: self.panel_size,
                });
            }
        }
        for (fi, f) in self.features.iter().enumerate() {
            let (lo, hi) = self
                .fv_range(fi)
                .map(|fv| (self.quotas[fv].min as u64, self.quotas[fv].max as u64))
                .fold((0, 0), |(a, b), (l, u)| (a + l, b + u));
            if lo > k || hi < k {
                return Err(InstanceError::InfeasibleByCounting {
                    feature: f.name.clone(),
                    sum_min: lo,
                    sum_max: hi,
                    panel_size: self.panel_size,
                });
            }
        }
        Ok(())
    }

    pub fn panel_size(&self) -> usize {
        self.panel_size
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn pool(&self) -> &[PoolMember] {
        &self.pool
    }

    /// Quotas ordered by fv index.
    pub fn quotas(&self) -> &[Quota] {
        &self.quotas
    }

    pub fn num_fv(&self) -> usize {
        self.quotas.len()
    }

    pub fn fv_index(&self, feature: usize, value: usize) -> usize {
        self.fv_offsets[feature] + value
    }

    pub fn fv_range(&self, feature: usize) -> std::ops::Range<usize> {
        let start = self.fv_offsets[feature];
        start..start + self.features[feature].values.len()
    }

    /// `(feature, value)` for an fv index.
    pub fn fv_parts(&self, fv: usize) -> (usize, usize) {
        let f = match self.fv_offsets.binary_search(&fv) {
            Ok(f) => {
                // empty features are rejected, so offsets are strictly increasing
                f
            }
            Err(f) => f - 1,
        };
        (f, fv - self.fv_offsets[f])
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn member_index(&self, id: &str) -> Option<usize> {
        self.member_index.get(id).copied()
    }

    pub fn member_id(&self, member: usize) -> &str {
        &self.pool[member].id
    }

    /// Value index of `member` for `feature`.
    pub fn value_of(&self, member: usize, feature: usize) -> usize {
        self.member_values[member][feature] as usize
    }

    pub fn member_values(&self, member: usize) -> &[u16] {
        &self.member_values[member]
    }

    /// `(min, max)` for an fv index.
    pub fn bounds(&self, fv: usize) -> (u32, u32) {
        (self.quotas[fv].min, self.quotas[fv].max)
    }

    /// A quota is non-binding when it admits every count from 0 to k.
    pub fn is_binding(&self, fv: usize) -> bool {
        let q = &self.quotas[fv];
        q.min > 0 || (q.max as usize) < self.panel_size
    }

    pub fn feature_is_binding(&self, feature: usize) -> bool {
        self.fv_range(feature).any(|fv| self.is_binding(fv))
    }

    pub fn binding_features(&self) -> Vec<usize> {
        (0..self.features.len()).filter(|&f| self.feature_is_binding(f)).collect()
    }

    /// Resolves feature names to indices.
    pub fn resolve_features<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>, InstanceError> {
        names
            .iter()
            .map(|n| {
                self.feature_index(n.as_ref())
                    .ok_or_else(|| InstanceError::UnknownFeature(n.as_ref().to_string()))
            })
            .collect()
    }

    /// Feature-value vector w(i).
    pub fn vector_of(&self, member: usize) -> FeatureValueVector {
        let mut bits = vec![false; self.num_fv()];
        for (f, &v) in self.member_values[member].iter().enumerate() {
            bits[self.fv_offsets[f] + v as usize] = true;
        }
        FeatureValueVector { bits }
    }

    /// Profile w(U) of a member set.
    pub fn profile_of(&self, members: &[usize]) -> Profile {
        let mut counts = vec![0u32; self.num_fv()];
        for &m in members {
            for (f, &v) in self.member_values[m].iter().enumerate() {
                counts[self.fv_offsets[f] + v as usize] += 1;
            }
        }
        Profile { counts }
    }

    /// Whether `members` forms a panel: exactly k members satisfying every quota.
    pub fn is_panel(&self, members: &[usize]) -> bool {
        members.len() == self.panel_size
            && self.satisfies_features(members, 0..self.features.len())
    }

    /// Whether the member set meets the quotas of the given features.
    pub fn satisfies_features(&self, members: &[usize], features: impl IntoIterator<Item = usize>) -> bool {
        let profile = self.profile_of(members);
        features.into_iter().all(|f| self.feature_satisfied(&profile, f))
    }

    pub fn feature_satisfied(&self, profile: &Profile, feature: usize) -> bool {
        self.fv_range(feature).all(|fv| {
            let (lo, hi) = self.bounds(fv);
            (lo..=hi).contains(&profile.counts[fv])
        })
    }

    /// Copy of the instance with `feature` removed entirely.
    pub fn without_feature(&self, feature: usize) -> Result<Instance, InstanceError> {
        let name = &self.features[feature].name;
        let features = self
            .features
            .iter()
            .filter(|f| &f.name != name)
            .cloned()
            .collect();
        let quotas = self
            .quotas
            .iter()
            .filter(|q| &q.feature != name)
            .cloned()
            .collect();
        let pool = self
            .pool
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.attributes.remove(name);
                m
            })
            .collect();
        Instance::new(self.panel_size, features, quotas, pool)
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            panel_size: self.panel_size,
            features: self.features.clone(),
            quotas: self.quotas.clone(),
            pool: self.pool.clone(),
        };
        serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
    }

    /// Writes the pool and quota CSV files of the CSV-pair format.
    pub fn to_csv_pair(&self) -> (String, String) {
        let mut pool = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.features.iter().map(|f| f.name.clone()));
        pool.write_record(&header).unwrap();
        for (i, m) in self.pool.iter().enumerate() {
            let mut row = vec![m.id.clone()];
            for (f, feat) in self.features.iter().enumerate() {
                row.push(feat.values[self.value_of(i, f)].clone());
            }
            pool.write_record(&row).unwrap();
        }
        let mut quotas = csv::Writer::from_writer(Vec::new());
        quotas.write_record(["feature", "value", "min", "max"]).unwrap();
        for q in &self.quotas {
            quotas
                .write_record([&q.feature, &q.value, &q.min.to_string(), &q.max.to_string()])
                .unwrap();
        }
        (
            String::from_utf8(pool.into_inner().unwrap()).unwrap(),
            String::from_utf8(quotas.into_inner().unwrap()).unwrap(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureValueVector {
    pub bits: Vec<bool>,
}

/// Feature-value counts, indexed by fv.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Profile {
    pub counts: Vec<u32>,
}

/// Members sharing the same feature-value vector restricted to some features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorGroup {
    /// Restricted vector; entries outside the feature subset are false.
    pub vector: FeatureValueVector,
    pub members: Vec<usize>,
}

impl VectorGroup {
    pub fn multiplicity(&self) -> usize {
        self.members.len()
    }
}

/// Anchor choice: the feature with the most values, earliest on ties.
pub fn choose_anchor(instance: &Instance, candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &f in candidates {
        let better = match best {
            None => true,
            Some(b) => {
                let (nf, nb) = (instance.features[f].values.len(), instance.features[b].values.len());
                nf > nb || (nf == nb && f < b)
            }
        };
        if better {
            best = Some(f);
        }
    }
    best
}

/// Partitions the pool by feature-value vector restricted to `features`.
///
/// Groups are ordered by the anchor feature's value first (see
/// [`choose_anchor`]), then by the restricted value tuple in `features`
/// order. Members keep pool order within a group.
pub fn group_by_vector(instance: &Instance, features: &[usize]) -> Vec<VectorGroup> {
    let anchor = choose_anchor(instance, features);
    let mut by_key: BTreeMap<(usize, Vec<u16>), Vec<usize>> = BTreeMap::new();
    for m in 0..instance.pool_size() {
        let a = anchor.map_or(0, |f| instance.value_of(m, f));
        let key: Vec<u16> = features.iter().map(|&f| instance.member_values[m][f]).collect();
        by_key.entry((a, key)).or_default().push(m);
    }
    by_key
        .into_iter()
        .map(|((_, key), members)| {
            let mut bits = vec![false; instance.num_fv()];
            for (&f, &v) in features.iter().zip(&key) {
                bits[instance.fv_index(f, v as usize)] = true;
            }
            VectorGroup {
                vector: FeatureValueVector { bits },
                members,
            }
        })
        .collect()
}

/// Whether `profile` lies in the quota-compliant set for `features`: every
/// (f, v) with f in the subset within bounds, and the first feature of the
/// subset summing to k. An empty subset imposes nothing.
pub fn quota_compliant(profile: &Profile, instance: &Instance, features: &[usize]) -> bool {
    let Some(&f0) = features.first() else {
        return true;
    };
    let size: u64 = instance.fv_range(f0).map(|fv| profile.counts[fv] as u64).sum();
    size == instance.panel_size as u64 && features.iter().all(|&f| instance.feature_satisfied(profile, f))
}

pub fn parse_instance(source: InstanceSource<'_>) -> Result<Instance, InstanceError> {
    let inst = match source {
        InstanceSource::Json(path) => {
            let bytes = read_file(path)?;
            parse_json(&bytes)?
        }
        InstanceSource::JsonBytes(bytes) => parse_json(bytes)?,
        InstanceSource::CsvPair { pool, quotas, panel_size } => {
            let p = read_file(pool)?;
            let q = read_file(quotas)?;
            parse_csv_pair(&p, &q, panel_size)?
        }
        InstanceSource::CsvPairBytes { pool, quotas, panel_size } => parse_csv_pair(pool, quotas, panel_size)?,
    };
    inst.validate()?;
    Ok(inst)
}

fn read_file(path: &Path) -> Result<Vec<u8>, InstanceError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| InstanceError::Io(format!("{}: {}", path.display(), e)))?;
    Ok(buf)
}

fn parse_json(bytes: &[u8]) -> Result<Instance, InstanceError> {
    let file: InstanceFile = serde_json::from_slice(bytes).map_err(|e| InstanceError::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Instance::new(file.panel_size, file.features, file.quotas, file.pool)
}

fn csv_err(what: &str, e: csv::Error) -> InstanceError {
    let location = match e.position() {
        Some(p) => format!("{} line {}", what, p.line()),
        None => what.to_string(),
    };
    InstanceError::Parse {
        location,
        message: e.to_string(),
    }
}

fn parse_csv_pair(pool: &[u8], quotas: &[u8], panel_size: usize) -> Result<Instance, InstanceError> {
    let mut features: Vec<FeatureDef> = Vec::new();
    let mut quota_rows = Vec::new();
    let mut rdr = csv::Reader::from_reader(quotas);
    let header = rdr.headers().map_err(|e| csv_err("quotas", e))?.clone();
    let expected = ["feature", "value", "min", "max"];
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(InstanceError::Parse {
            location: "quotas line 1".into(),
            message: format!("expected header feature,value,min,max, found {:?}", header),
        });
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err("quotas", e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| -> Result<u32, InstanceError> {
            field(i).parse().map_err(|_| InstanceError::Parse {
                location: format!("quotas line {} field {}", line, expected[i]),
                message: format!("not a non-negative integer: '{}'", field(i)),
            })
        };
        let (feature, value) = (field(0), field(1));
        let (min, max) = (num(2)?, num(3)?);
        match features.iter_mut().find(|f| f.name == feature) {
            Some(f) => f.values.push(value.clone()),
            None => features.push(FeatureDef {
                name: feature.clone(),
                values: vec![value.clone()],
            }),
        }
        quota_rows.push(Quota { feature, value, min, max });
    }

    let mut rdr = csv::Reader::from_reader(pool);
    let header = rdr.headers().map_err(|e| csv_err("pool", e))?.clone();
    if header.get(0).map(str::trim) != Some("id") {
        return Err(InstanceError::Parse {
            location: "pool line 1".into(),
            message: "first column must be 'id'".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    for c in &columns {
        if !features.iter().any(|f| &f.name == c) {
            return Err(InstanceError::UnknownFeature(c.clone()));
        }
    }
    let mut members = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err("pool", e))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let mut attributes = BTreeMap::new();
        for (c, val) in columns.iter().zip(rec.iter().skip(1)) {
            let val = val.trim();
            if !val.is_empty() {
                attributes.insert(c.clone(), val.to_string());
            }
        }
        members.push(PoolMember { id, attributes });
    }
    Instance::new(panel_size, features, quota_rows, members)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    const T1_JSON: &str = r#"{
        "panel_size": 2,
        "features": [{"name": "gender", "values": ["F", "M"]}],
        "quotas": [
            {"feature": "gender", "value": "F", "min": 1, "max": 1},
            {"feature": "gender", "value": "M", "min": 1, "max": 1}
        ],
        "pool": [
            {"id": "1", "attributes": {"gender": "F"}},
            {"id": "2", "attributes": {"gender": "F"}},
            {"id": "3", "attributes": {"gender": "M"}},
            {"id": "4", "attributes": {"gender": "M"}}
        ]
    }"#;

    #[test]
    fn parses_t1_json() {
        let inst = parse_instance(InstanceSource::JsonBytes(T1_JSON.as_bytes())).unwrap();
        assert_eq!(inst.pool_size(), 4);
        assert_eq!(inst.panel_size(), 2);
        assert_eq!(inst, t1());
    }

    #[test]
    fn malformed_json_reports_location() {
        let err = parse_instance(InstanceSource::JsonBytes(b"{\"panel_size\": 2,\n \"features\": [")).unwrap_err();
        match err {
            InstanceError::Parse { location, .. } => assert!(location.contains("line 2"), "{location}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn csv_unknown_value_names_member() {
        let quotas = "feature,value,min,max\ngender,F,1,1\ngender,M,1,1\n";
        let pool = "id,gender\na,F\nb,X\nc,M\n";
        let err = parse_instance(InstanceSource::CsvPairBytes {
            pool: pool.as_bytes(),
            quotas: quotas.as_bytes(),
            panel_size: 2,
        })
        .unwrap_err();
        match err {
            InstanceError::UnknownValue { member, value, .. } => {
                assert_eq!(member, "b");
                assert_eq!(value, "X");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn csv_missing_value_rejected() {
        let quotas = "feature,value,min,max\ngender,F,1,1\ngender,M,1,1\n";
        let pool = "id,gender\na,F\nb,\nc,M\n";
        let err = parse_instance(InstanceSource::CsvPairBytes {
            pool: pool.as_bytes(),
            quotas: quotas.as_bytes(),
            panel_size: 2,
        })
        .unwrap_err();
        assert!(matches!(err, InstanceError::MissingAttribute { ref member, .. } if member == "b"));
    }

    #[test]
    fn csv_bad_number_reports_field() {
        let quotas = "feature,value,min,max\ngender,F,one,1\n";
        let err = parse_instance(InstanceSource::CsvPairBytes {
            pool: b"id,gender\na,F\n",
            quotas: quotas.as_bytes(),
            panel_size: 1,
        })
        .unwrap_err();
        match err {
            InstanceError::Parse { location, .. } => assert_eq!(location, "quotas line 2 field min"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn counting_infeasible_quotas_rejected() {
        // sum of minimums is k + 1
        let json = T1_JSON.replace(
            r#""value": "M", "min": 1, "max": 1"#,
            r#""value": "M", "min": 2, "max": 2"#,
        );
        let err = parse_instance(InstanceSource::JsonBytes(json.as_bytes())).unwrap_err();
        assert!(matches!(err, InstanceError::InfeasibleByCounting { sum_min: 3, .. }));
        assert!(err.to_string().contains("quotas infeasible by counting"));
    }

    #[test]
    fn quota_above_k_rejected_by_validate() {
        let inst = t1_with(3, 3);
        assert!(matches!(inst.validate(), Err(InstanceError::QuotaBounds { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let inst = t1();
        let (pool, quotas) = inst.to_csv_pair();
        let back = parse_instance(InstanceSource::CsvPairBytes {
            pool: pool.as_bytes(),
            quotas: quotas.as_bytes(),
            panel_size: 2,
        })
        .unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn csv_quoted_fields() {
        let quotas = "feature,value,min,max\nregion,\"North, upper\",0,1\nregion,South,0,1\n";
        let pool = "id,region\n\"a\",\"North, upper\"\nb,South\n";
        let inst = parse_instance(InstanceSource::CsvPairBytes {
            pool: pool.as_bytes(),
            quotas: quotas.as_bytes(),
            panel_size: 1,
        })
        .unwrap();
        assert_eq!(inst.features()[0].values[0], "North, upper");
    }

    fn six_member() -> Instance {
        let f = |n: &str, vs: &[&str]| FeatureDef {
            name: n.into(),
            values: vs.iter().map(|s| s.to_string()).collect(),
        };
        Instance::new(
            2,
            vec![f("gender", &["F", "M"]), f("region", &["N", "S", "E"]), f("age", &["Y", "O"])],
            vec![
                quota("gender", "F", 0, 2),
                quota("gender", "M", 0, 2),
                quota("region", "N", 0, 2),
                quota("region", "S", 0, 2),
                quota("region", "E", 0, 2),
                quota("age", "Y", 0, 2),
                quota("age", "O", 0, 2),
            ],
            vec![
                member("a", &[("gender", "F"), ("region", "N"), ("age", "Y")]),
                member("b", &[("gender", "F"), ("region", "N"), ("age", "O")]),
                member("c", &[("gender", "F"), ("region", "S"), ("age", "Y")]),
                member("d", &[("gender", "M"), ("region", "S"), ("age", "Y")]),
                member("e", &[("gender", "M"), ("region", "S"), ("age", "O")]),
                member("f", &[("gender", "M"), ("region", "E"), ("age", "O")]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn groups_by_single_feature() {
        let inst = t1();
        let groups = group_by_vector(&inst, &[0]);
        assert_eq!(groups.iter().map(|g| g.multiplicity()).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn groups_merge_on_feature_subset() {
        let inst = six_member();
        // by hand: (F,N) {a,b}, (F,S) {c}, (M,S) {d,e}, (M,E) {f}
        let groups = group_by_vector(&inst, &[0, 1]);
        assert_eq!(groups.len(), 4);
        // region has the most values, so it leads the order: N, S, S, E
        let members: Vec<Vec<usize>> = groups.iter().map(|g| g.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1], vec![2], vec![3, 4], vec![5]]);
        // all three features: every member distinct
        assert_eq!(group_by_vector(&inst, &[0, 1, 2]).len(), 6);
        // gender and age: (F,Y) {a,c}, (F,O) {b}, (M,Y) {d}, (M,O) {e,f}
        assert_eq!(group_by_vector(&inst, &[0, 2]).len(), 4);
    }

    #[test]
    fn full_grouping_covers_every_member_once() {
        let inst = six_member();
        let mut all: Vec<usize> = group_by_vector(&inst, &[0, 1, 2])
            .into_iter()
            .flat_map(|g| g.members)
            .collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn quota_compliance_t1() {
        let inst = t1();
        let p = |f, m| Profile { counts: vec![f, m] };
        assert!(quota_compliant(&p(1, 1), &inst, &[0]));
        assert!(!quota_compliant(&p(2, 0), &inst, &[0]));
        assert!(!quota_compliant(&p(1, 0), &inst, &[0]));
    }

    #[test]
    fn non_binding_flags() {
        let inst = six_member();
        assert!(inst.binding_features().is_empty());
        assert!(t1().feature_is_binding(0));
    }

    #[test]
    fn fv_parts_inverts_index() {
        let inst = six_member();
        for f in 0..3 {
            for v in 0..inst.features()[f].values.len() {
                assert_eq!(inst.fv_parts(inst.fv_index(f, v)), (f, v));
            }
        }
    }

    #[test]
    fn quota_compliance_matches_brute_force_on_subsets() {
        let inst = six_member_tight();
        let n = inst.pool_size();
        for mask in 0u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let profile = inst.profile_of(&members);
            let brute = members.len() == inst.panel_size()
                && inst.quotas().iter().all(|q| {
                    let f = inst.feature_index(&q.feature).unwrap();
                    let c = members
                        .iter()
                        .filter(|&&m| inst.features()[f].values[inst.value_of(m, f)] == q.value)
                        .count() as u32;
                    q.min <= c && c <= q.max
                });
            assert_eq!(quota_compliant(&profile, &inst, &[0, 1, 2]), brute, "mask {mask:b}");
        }
    }

    fn six_member_tight() -> Instance {
        let base = six_member();
        let quotas = vec![
            quota("gender", "F", 1, 2),
            quota("gender", "M", 1, 2),
            quota("region", "N", 0, 1),
            quota("region", "S", 1, 2),
            quota("region", "E", 0, 1),
            quota("age", "Y", 1, 1),
            quota("age", "O", 1, 1),
        ];
        Instance::new(3, base.features().to_vec(), quotas, base.pool().to_vec()).unwrap()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn json_round_trip(assign in proptest::collection::vec((0usize..2, 0usize..3), 2..12), k in 1usize..3) {
                let k = k.min(assign.len());
                let features = vec![
                    FeatureDef { name: "g".into(), values: vec!["a".into(), "b".into()] },
                    FeatureDef { name: "r".into(), values: vec!["x".into(), "y".into(), "z".into()] },
                ];
                let mut quotas = Vec::new();
                for f in &features {
                    for v in &f.values {
                        quotas.push(quota(&f.name, v, 0, k as u32));
                    }
                }
                let pool: Vec<PoolMember> = assign.iter().enumerate().map(|(i, &(g, r))| {
                    member(&format!("m{i}"), &[("g", ["a", "b"][g]), ("r", ["x", "y", "z"][r])])
                }).collect();
                let inst = Instance::new(k, features, quotas, pool).unwrap();
                let again = parse_instance(InstanceSource::JsonBytes(inst.to_json().as_bytes())).unwrap();
                prop_assert_eq!(again, inst);
            }
        }
    }
}
