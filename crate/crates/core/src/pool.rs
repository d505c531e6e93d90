//! Per-image store of the best `B` pseudo-labels, updated by strict
//! 2-of-3 uncertainty dominance.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{self, Ratio, UncertaintyScores};
use crate::error::{Error, Result};
use crate::raster::{load_mask, save_mask, GrayMask};

pub const DEFAULT_CAPACITY: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub mask: GrayMask,
    pub u_abs: f64,
    pub u_rel: Ratio,
    pub epoch_added: u32,
}

impl PoolEntry {
    pub fn new(mask: GrayMask, theta: f64, epoch_added: u32) -> Self {
        Self {
            u_abs: entropy::u_abs(&mask, theta),
            u_rel: entropy::u_rel(&mask, theta),
            mask,
            epoch_added,
        }
    }

    /// Cached intrinsic scores plus a fresh residual score against `prev_pred`.
    pub fn scores_against(&self, prev_pred: &GrayMask, theta: f64) -> Result<UncertaintyScores> {
        Ok(UncertaintyScores {
            u_abs: self.u_abs,
            u_rel: self.u_rel,
            u_diff: entropy::u_diff(&self.mask, prev_pred, theta)?,
        })
    }
}

pub fn score_candidate(candidate: &GrayMask, prev_pred: &GrayMask, theta: f64) -> Result<UncertaintyScores> {
    entropy::scores(candidate, prev_pred, theta)
}

/// True when `candidate` is strictly lower than `entry` in at least two of
/// the three scores.
pub fn dominates(candidate: &UncertaintyScores, entry: &UncertaintyScores) -> bool {
    let wins = [
        candidate.u_abs < entry.u_abs,
        candidate.u_rel.strictly_below(&entry.u_rel),
        candidate.u_diff < entry.u_diff,
    ];
    wins.iter().filter(|&&w| w).count() >= 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slot")]
pub enum PoolUpdate {
    Appended,
    Replaced(usize),
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPool {
    capacity: usize,
    entries: Vec<PoolEntry>,
}

impl LabelPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "pool capacity must be at least 1");
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Immutable copy of the stored labels.
    pub fn snapshot(&self) -> Vec<PoolEntry> {
        self.entries.clone()
    }

    /// Offers `candidate` to the pool.
    ///
    /// Below capacity the candidate is appended. At capacity, every stored
    /// entry is re-scored against `prev_pred` and one of the entries the
    /// candidate dominates is replaced, picked uniformly with `rng_seed`.
    pub fn update(
        &mut self,
        candidate: &GrayMask,
        prev_pred: &GrayMask,
        theta: f64,
        epoch: u32,
        rng_seed: u64,
    ) -> Result<PoolUpdate> {
        candidate.ensure_same_dims(prev_pred)?;
        if let Some(first) = self.entries.first() {
            first.mask.ensure_same_dims(candidate)?;
        }
        if !self.is_full() {
            self.entries.push(PoolEntry::new(candidate.clone(), theta, epoch));
            return Ok(PoolUpdate::Appended);
        }
        let cand_scores = score_candidate(candidate, prev_pred, theta)?;
        let mut dominated = Vec::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if dominates(&cand_scores, &entry.scores_against(prev_pred, theta)?) {
                dominated.push(i);
            }
        }
        if dominated.is_empty() {
            return Ok(PoolUpdate::Rejected);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let slot = dominated[rng.gen_range(0..dominated.len())];
        self.entries[slot] = PoolEntry {
            mask: candidate.clone(),
            u_abs: cand_scores.u_abs,
            u_rel: cand_scores.u_rel,
            epoch_added: epoch,
        };
        Ok(PoolUpdate::Replaced(slot))
    }

    /// Keeps only the newest label regardless of scores.
    pub fn replace_all(&mut self, candidate: &GrayMask, theta: f64, epoch: u32) -> PoolUpdate {
        let was_empty = self.entries.is_empty();
        self.entries.clear();
        self.entries.push(PoolEntry::new(candidate.clone(), theta, epoch));
        if was_empty {
            PoolUpdate::Appended
        } else {
            PoolUpdate::Replaced(0)
        }
    }

    /// Writes `<dir>/entry_<b>.mskf` for every entry plus `<dir>/scores.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (b, entry) in self.entries.iter().enumerate() {
            save_mask(&entry.mask, dir.join(format!("entry_{b}.mskf")))?;
        }
        // drop files left over from a previously larger pool
        for b in self.entries.len()..self.capacity.max(self.entries.len()) + 8 {
            let stale = dir.join(format!("entry_{b}.mskf"));
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        let doc = ScoresFile {
            entries: self
                .entries
                .iter()
                .map(|e| ScoreRecord {
                    u_abs: e.u_abs,
                    u_rel: e.u_rel,
                    epoch: e.epoch_added,
                })
                .collect(),
        };
        let path = dir.join("scores.json");
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a pool written by [`LabelPool::save`]; a missing directory is an empty pool.
    pub fn load(dir: &Path, capacity: usize) -> Result<Self> {
        let mut pool = Self::new(capacity);
        let path = dir.join("scores.json");
        if !path.exists() {
            return Ok(pool);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: ScoresFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if doc.entries.len() > capacity {
            return Err(Error::format(
                &path,
                format!("{} entries exceed capacity {capacity}", doc.entries.len()),
            ));
        }
        for (b, rec) in doc.entries.into_iter().enumerate() {
            pool.entries.push(PoolEntry {
                mask: load_mask(dir.join(format!("entry_{b}.mskf")))?,
                u_abs: rec.u_abs,
                u_rel: rec.u_rel,
                epoch_added: rec.epoch,
            });
        }
        Ok(pool)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresFile {
    entries: Vec<ScoreRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    u_abs: f64,
    u_rel: Ratio,
    epoch: u32,
}
