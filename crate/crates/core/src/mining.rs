//! Triplet database construction.
//!
//! Positive pairs are ordered pairs of co-located samples (same place,
//! different runs when run labels exist). Each pair receives one negative:
//! in the random regime a uniform draw over samples farther than `t_n`
//! from the anchor, in the hard regime a uniform draw over the annulus
//! `(d_w, hard_radius]`. Sampling is keyed on (seed, anchor, positive), so
//! mining parallelizes over pairs without losing determinism.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::geo::MetricPose;
use crate::{RunId, SampleId};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("mining config must satisfy d_w < hard_radius <= t_n, got d_w={d_w}, hard_radius={hard_radius}, t_n={t_n}")]
    InvalidConfig { d_w: f64, hard_radius: f64, t_n: f64 },
    #[error("no eligible negative for anchor {anchor} in the {regime} regime")]
    Exhausted { anchor: SampleId, regime: Regime },
    #[error("cannot build a triplet db from an empty pair list")]
    EmptyPairs,
    #[error("anchor {anchor} has no pose")]
    MissingPose { anchor: SampleId },
    #[error("triplet db parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distance thresholds for mining, all in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Positive window: samples this close to a place belong to it.
    pub d_w: f64,
    /// Random negatives must be farther than this from the anchor.
    pub t_n: f64,
    /// Hard negatives live in (d_w, hard_radius].
    pub hard_radius: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            d_w: 10.0,
            t_n: 50.0,
            hard_radius: 25.0,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.d_w < self.hard_radius && self.hard_radius <= self.t_n {
            Ok(())
        } else {
            Err(MiningError::InvalidConfig {
                d_w: self.d_w,
                hard_radius: self.hard_radius,
                t_n: self.t_n,
            })
        }
    }
}

/// Negative-sampling regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Random,
    Hard,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Random => "random",
            Regime::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "random" => Some(Regime::Random),
            "hard" => Some(Regime::Hard),
            _ => None,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training triplet, by sample id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRecord {
    pub anchor: SampleId,
    pub positive: SampleId,
    pub negative: SampleId,
    pub regime: Regime,
}

/// A mined database: shuffled records plus everything needed to reproduce
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDb {
    pub records: Vec<TripletRecord>,
    pub config: MiningConfig,
    pub regime: Regime,
    /// Distinct run ids the samples came from.
    pub provenance: Vec<RunId>,
    /// Pairs dropped because no eligible negative existed.
    pub skipped: u64,
}

/// All ordered pairs of distinct samples sharing a place. When both
/// samples carry run labels, same-run pairs are excluded so positives
/// always bridge two traversals. Pairs seen through several shared places
/// are emitted once; the result is sorted by (anchor, positive).
pub fn mine_positive_pairs(
    by_place: &BTreeMap<crate::PlaceId, Vec<SampleId>>,
    runs: &BTreeMap<SampleId, RunId>,
) -> Vec<(SampleId, SampleId)> {
    let mut pairs = BTreeSet::new();
    for samples in by_place.values() {
        for &a in samples {
            for &p in samples {
                if a == p {
                    continue;
                }
                if let (Some(ra), Some(rp)) = (runs.get(&a), runs.get(&p)) {
                    if ra == rp {
                        continue;
                    }
                }
                pairs.insert((a, p));
            }
        }
    }
    pairs.into_iter().collect()
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn pair_rng(seed: u64, anchor: SampleId, salt: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&splitmix64(anchor.0).to_le_bytes());
    key[16..24].copy_from_slice(&splitmix64(salt ^ 0xa5a5_a5a5_a5a5_a5a5).to_le_bytes());
    key[24..32].copy_from_slice(&splitmix64(seed ^ anchor.0 ^ salt).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

fn eligible_negatives(
    anchor: SampleId,
    exclude: Option<SampleId>,
    poses: &BTreeMap<SampleId, MetricPose>,
    config: &MiningConfig,
    regime: Regime,
) -> Result<Vec<SampleId>, MiningError> {
    let anchor_pose = poses
        .get(&anchor)
        .ok_or(MiningError::MissingPose { anchor })?;
    let mut out = Vec::new();
    for (&id, pose) in poses {
        if id == anchor || Some(id) == exclude {
            continue;
        }
        let d = anchor_pose.distance(pose);
        let ok = match regime {
            Regime::Random => d > config.t_n,
            Regime::Hard => d > config.d_w && d <= config.hard_radius,
        };
        if ok {
            out.push(id);
        }
    }
    Ok(out)
}

/// Uniform negative for `anchor` under the given regime, deterministic in
/// (config.seed, anchor, salt). `exclude` removes one extra id from the
/// eligible set, typically the positive of the pair being served.
pub fn sample_negative_salted(
    anchor: SampleId,
    salt: u64,
    exclude: Option<SampleId>,
    poses: &BTreeMap<SampleId, MetricPose>,
    config: &MiningConfig,
    regime: Regime,
) -> Result<SampleId, MiningError> {
    let eligible = eligible_negatives(anchor, exclude, poses, config, regime)?;
    if eligible.is_empty() {
        return Err(MiningError::Exhausted { anchor, regime });
    }
    let mut rng = pair_rng(config.seed, anchor, salt);
    Ok(eligible[rng.gen_range(0..eligible.len())])
}

/// Uniform negative for `anchor`; see [`sample_negative_salted`].
pub fn sample_negative(
    anchor: SampleId,
    poses: &BTreeMap<SampleId, MetricPose>,
    config: &MiningConfig,
    regime: Regime,
) -> Result<SampleId, MiningError> {
    sample_negative_salted(anchor, 0, None, poses, config, regime)
}

/// Builds the database: one record per positive pair with a fresh
/// negative. Pairs whose anchor has no eligible negative are skipped and
/// counted rather than failing the build; map edges legitimately lack far
/// negatives. The record list is sorted by (anchor, positive) and then
/// shuffled once under the seed.
pub fn build_triplet_db(
    pairs: &[(SampleId, SampleId)],
    poses: &BTreeMap<SampleId, MetricPose>,
    runs: &BTreeMap<SampleId, RunId>,
    config: &MiningConfig,
    regime: Regime,
) -> Result<TripletDb, MiningError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(MiningError::EmptyPairs);
    }

    let mut ordered: Vec<(SampleId, SampleId)> = pairs.to_vec();
    ordered.sort_unstable();
    ordered.dedup();

    let mut records = Vec::with_capacity(ordered.len());
    let mut skipped = 0u64;
    for (anchor, positive) in ordered {
        let salt = splitmix64(positive.0).rotate_left(17) ^ positive.0;
        match sample_negative_salted(anchor, salt, Some(positive), poses, config, regime) {
            Ok(negative) => records.push(TripletRecord {
                anchor,
                positive,
                negative,
                regime,
            }),
            Err(MiningError::Exhausted { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }

    let mut shuffle_rng = pair_rng(config.seed, SampleId(u64::MAX), SHUFFLE_SALT);
    // Fisher-Yates over the sorted record list.
    for i in (1..records.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        records.swap(i, j);
    }

    let mut provenance = BTreeSet::new();
    for r in &records {
        for id in [r.anchor, r.positive, r.negative] {
            if let Some(run) = runs.get(&id) {
                provenance.insert(run.clone());
            }
        }
    }

    Ok(TripletDb {
        records,
        config: *config,
        regime,
        provenance: provenance.into_iter().collect(),
        skipped,
    })
}

const SHUFFLE_SALT: u64 = 0x7472_6970_6c65_7473;

/// Writes the database as line-delimited records under a header that
/// carries the mining config, seed and provenance.
pub fn save_triplet_db(path: &Path, db: &TripletDb) -> Result<(), MiningError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let runs: Vec<&str> = db.provenance.iter().map(|r| r.as_str()).collect();
    writeln!(
        w,
        "# triplets v1 regime={} d_w={} t_n={} hard_radius={} seed={} skipped={} runs={}",
        db.regime,
        db.config.d_w,
        db.config.t_n,
        db.config.hard_radius,
        db.config.seed,
        db.skipped,
        runs.join(";"),
    )?;
    for r in &db.records {
        writeln!(w, "{},{},{},{}", r.anchor, r.positive, r.negative, r.regime)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a database written by [`save_triplet_db`].
pub fn load_triplet_db(path: &Path) -> Result<TripletDb, MiningError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines.next().ok_or(MiningError::Parse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let header = header?;
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for token in header.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = token.split_once('=') {
            fields.insert(k, v);
        }
    }
    let get = |key: &str| -> Result<&str, MiningError> {
        fields.get(key).copied().ok_or(MiningError::Parse {
            line: 1,
            reason: format!("header missing {key}"),
        })
    };
    let num = |key: &str| -> Result<f64, MiningError> {
        get(key)?.parse().map_err(|e| MiningError::Parse {
            line: 1,
            reason: format!("{key}: {e}"),
        })
    };
    let regime = Regime::parse(get("regime")?).ok_or(MiningError::Parse {
        line: 1,
        reason: "bad regime".into(),
    })?;
    let config = MiningConfig {
        d_w: num("d_w")?,
        t_n: num("t_n")?,
        hard_radius: num("hard_radius")?,
        seed: get("seed")?.parse().map_err(|e| MiningError::Parse {
            line: 1,
            reason: format!("seed: {e}"),
        })?,
    };
    let skipped = get("skipped")?.parse().map_err(|e| MiningError::Parse {
        line: 1,
        reason: format!("skipped: {e}"),
    })?;
    let provenance: Vec<RunId> = get("runs")?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(RunId::new)
        .collect();

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(MiningError::Parse {
                line: line_no,
                reason: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let id = |s: &str| -> Result<SampleId, MiningError> {
            s.parse::<u64>().map(SampleId).map_err(|e| MiningError::Parse {
                line: line_no,
                reason: format!("sample id: {e}"),
            })
        };
        records.push(TripletRecord {
            anchor: id(parts[0])?,
            positive: id(parts[1])?,
            negative: id(parts[2])?,
            regime: Regime::parse(parts[3]).ok_or(MiningError::Parse {
                line: line_no,
                reason: format!("bad regime {:?}", parts[3]),
            })?,
        });
    }

    Ok(TripletDb {
        records,
        config,
        regime,
        provenance,
        skipped,
    })
}
