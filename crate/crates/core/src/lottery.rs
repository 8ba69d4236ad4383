//! Transparent lotteries: a published list of independently sampled panels
//! from which the final panel is picked with public randomness.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::LotteryError;
use crate::sampler::PanelSampler;

pub const DEFAULT_DELTA: f64 = 0.05;

/// With probability at least `1 - delta`, every member's selection
/// frequency in a lottery of `m` panels is within this of its true
/// selection probability (Hoeffding plus a union bound over `n` members).
pub fn deviation_bound(n: usize, m: usize, delta: f64) -> f64 {
    ((((2 * n) as f64).ln() + (1.0 / delta).ln()) / (2.0 * m as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryHeader {
    pub m: usize,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PanelLine {
    members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lottery {
    pub header: LotteryHeader,
    pub panels: Vec<Vec<String>>,
}

/// How the public randomness selects a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawKey {
    Index(u64),
    /// Index `seed mod m`.
    Seed(u64),
}

/// Draws `m` panels on streams `0..m` of `seed`.
pub fn build_lottery(sampler: &PanelSampler, m: usize, seed: u64, delta: f64) -> Result<Lottery, LotteryError> {
    let samples = sampler.sample_many(seed, m)?;
    let instance = sampler.instance();
    Ok(Lottery {
        header: LotteryHeader {
            m,
            seed,
            n: instance.pool_size(),
            k: instance.panel_size(),
            delta,
            bound: deviation_bound(instance.pool_size(), m, delta),
        },
        panels: samples.into_iter().map(|s| s.members).collect(),
    })
}

impl Lottery {
    /// Header line, then one JSON line per panel.
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), LotteryError> {
        let io = |e: std::io::Error| LotteryError::Io(e.to_string());
        writeln!(out, "{}", serde_json::to_string(&self.header).expect("header serializes")).map_err(io)?;
        for p in &self.panels {
            let line = serde_json::to_string(&PanelLine { members: p.clone() }).expect("panel serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, LotteryError> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, e: &dyn std::fmt::Display| LotteryError::Parse {
            line,
            message: e.to_string(),
        };
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, &"empty file"))?;
        let first = first.map_err(|e| LotteryError::Io(e.to_string()))?;
        let header: LotteryHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, &e))?;
        let mut panels = Vec::with_capacity(header.m);
        for (i, line) in lines {
            let line = line.map_err(|e| LotteryError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PanelLine = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, &e))?;
            panels.push(p.members);
        }
        if panels.len() != header.m {
            return Err(parse_err(
                panels.len() + 2,
                &format!("header announces {} panels, file has {}", header.m, panels.len()),
            ));
        }
        Ok(Self { header, panels })
    }

    /// The selected panel and its index.
    pub fn draw(&self, key: DrawKey) -> Result<(usize, &[String]), LotteryError> {
        let m = self.panels.len();
        let index = match key {
            DrawKey::Index(i) => i,
            DrawKey::Seed(s) => {
                if m == 0 {
                    return Err(LotteryError::IndexOutOfRange { index: s, m });
                }
                s % m as u64
            }
        };
        if index >= m as u64 {
            return Err(LotteryError::IndexOutOfRange { index, m });
        }
        Ok((index as usize, &self.panels[index as usize]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::WeightVector;
    use crate::instance::fixtures::t1;
    use crate::sampler::PlanConfig;
    use std::sync::Arc;

    fn t1_sampler() -> PanelSampler {
        PanelSampler::build(Arc::new(t1()), &WeightVector::uniform(4), &PlanConfig::default()).unwrap()
    }

    #[test]
    fn bound_values() {
        assert!((deviation_bound(1000, 10_000, 0.01) - 0.024705).abs() < 1e-6);
        let b = deviation_bound(50, 100, 0.1);
        assert!((deviation_bound(50, 400, 0.1) - b / 2.0).abs() < 1e-15);
        assert!((deviation_bound(50, 100, 1.0) - (100f64.ln() / 200.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn round_trip_and_regeneration() {
        let s = t1_sampler();
        let lot = build_lottery(&s, 25, 42, DEFAULT_DELTA).unwrap();
        let text = lot.to_jsonl();
        let back = Lottery::read(text.as_bytes()).unwrap();
        assert_eq!(back, lot);
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(build_lottery(&s, 25, 42, DEFAULT_DELTA).unwrap().to_jsonl(), text);
        assert!(text.lines().next().unwrap().contains("\"bound\""));
    }

    #[test]
    fn draws() {
        let lot = build_lottery(&t1_sampler(), 10, 1, DEFAULT_DELTA).unwrap();
        assert_eq!(lot.draw(DrawKey::Index(0)).unwrap().1, lot.panels[0].as_slice());
        assert_eq!(lot.draw(DrawKey::Index(9)).unwrap().0, 9);
        assert_eq!(lot.draw(DrawKey::Seed(123)).unwrap().0, 3);
        assert_eq!(
            lot.draw(DrawKey::Index(10)).unwrap_err(),
            LotteryError::IndexOutOfRange { index: 10, m: 10 }
        );
        let single = build_lottery(&t1_sampler(), 1, 1, DEFAULT_DELTA).unwrap();
        assert_eq!(single.draw(DrawKey::Seed(77)).unwrap().0, 0);
    }

    #[test]
    fn t1_lottery_marginals_within_bound() {
        let lot = build_lottery(&t1_sampler(), 10_000, 3, DEFAULT_DELTA).unwrap();
        let bound = lot.header.bound;
        for id in ["1", "2", "3", "4"] {
            let f = lot.panels.iter().filter(|p| p.iter().any(|m| m == id)).count() as f64 / 1e4;
            assert!((f - 0.5).abs() < bound, "{id}: {f} vs {bound}");
        }
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(Lottery::read("".as_bytes()), Err(LotteryError::Parse { line: 1, .. })));
        let bad = "{\"m\":2,\"seed\":0,\"n\":4,\"k\":2,\"delta\":0.05,\"bound\":0.1}\n{\"members\":[\"1\"]}\n";
        assert!(matches!(Lottery::read(bad.as_bytes()), Err(LotteryError::Parse { .. })));
        let garbage = "{\"m\":1,\"seed\":0,\"n\":4,\"k\":2,\"delta\":0.05,\"bound\":0.1}\nnot json\n";
        assert!(matches!(Lottery::read(garbage.as_bytes()), Err(LotteryError::Parse { line: 2, .. })));
    }
}
