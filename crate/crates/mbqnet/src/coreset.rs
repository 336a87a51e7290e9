//! Score-proportional sampling: min-max normalization, temperature-controlled
//! probabilities, and per-bit per-epoch coreset draws.

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::scoring::ScoreMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const DEFAULT_TEMPERATURE: f32 = 0.5;
pub const DEFAULT_FLOOR: f32 = 1e-3;

/// Per-(bit, epoch) coreset index sets plus the sampling parameters that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetPlan {
    pub bits: Vec<u8>,
    pub pruning_rate: f32,
    pub temperature: f32,
    pub floor: f32,
    pub seed: u64,
    pub epochs: usize,
    /// `sets[bit][epoch]` -> sorted sample indices.
    pub sets: BTreeMap<u8, Vec<Vec<u32>>>,
    pub config_hash: String,
}

impl CoresetPlan {
    pub fn set(&self, bit: u8, epoch: usize) -> Result<&[u32]> {
        let per_epoch = self
            .sets
            .get(&bit)
            .ok_or_else(|| Error::invalid(format!("plan has no bit {}", bit)))?;
        per_epoch
            .get(epoch)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("plan has no epoch {} for bit {}", epoch, bit)))
    }
}

/// Min-max normalize to [floor, 1]. Constant input falls back to all ones and
/// is flagged.
pub fn normalize_scores(s: &[f32], floor: f32) -> Result<(Vec<f32>, bool)> {
    if s.len() < 2 {
        return Err(Error::invalid("normalize_scores needs at least 2 entries".to_string()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("normalize_scores: non-finite score".to_string()));
    }
    let mn = s.iter().cloned().fold(f32::INFINITY, f32::min);
    let mx = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if mx == mn {
        return Ok((vec![1.0; s.len()], true));
    }
    let out = s
        .iter()
        .map(|&v| ((v - mn) / (mx - mn)).max(floor))
        .collect();
    Ok((out, false))
}

/// Eq.-style probabilities: p_i = s_i^(1/tau) / sum_j s_j^(1/tau).
pub fn sampling_probabilities(s_norm: &[f32], tau: f32) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {} must be positive", tau)));
    }
    if s_norm.iter().any(|&v| v <= 0.0 || v > 1.0) {
        return Err(Error::invalid("normalized scores must lie in (0, 1]".to_string()));
    }
    let inv = 1.0 / tau as f64;
    let raised: Vec<f64> = s_norm.iter().map(|&v| (v as f64).powf(inv)).collect();
    let z: f64 = raised.iter().sum();
    Ok(raised.iter().map(|&v| v / z).collect())
}

/// Weighted sampling without replacement by the exponential-race method:
/// key_i = -ln(u_i) / p_i, keep the `size` smallest keys.
pub fn sample_coreset(p: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    if size > p.len() {
        return Err(Error::invalid(format!(
            "coreset size {} exceeds population {}",
            size,
            p.len()
        )));
    }
    let nonzero = p.iter().filter(|&&v| v > 0.0).count();
    if size > nonzero {
        return Err(Error::invalid(format!(
            "coreset size {} exceeds {} entries with nonzero probability",
            size, nonzero
        )));
    }
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(nonzero);
    for (i, &pi) in p.iter().enumerate() {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if pi > 0.0 {
            keyed.push((-u.ln() / pi, i as u32));
        }
    }
    keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut idx: Vec<u32> = keyed[..size].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// One index set per (bit, epoch), resampled every epoch from per-bit
/// probabilities computed once. When `survivors` is given, sampling is
/// restricted to (and renormalized over) those indices.
pub fn build_plan(
    scores: &ScoreMatrix,
    pruning_rate: f32,
    tau: f32,
    epochs: usize,
    seed: u64,
    survivors: Option<&[u32]>,
) -> Result<CoresetPlan> {
    if !(0.0..1.0).contains(&pruning_rate) {
        return Err(Error::invalid(format!(
            "pruning rate {} outside [0, 1)",
            pruning_rate
        )));
    }
    if epochs == 0 {
        return Err(Error::invalid("plan needs at least 1 epoch".to_string()));
    }
    let n = scores.n();
    let pool: Vec<u32> = match survivors {
        Some(s) => {
            if s.iter().any(|&i| i as usize >= n) {
                return Err(Error::invalid("survivor index out of range".to_string()));
            }
            s.to_vec()
        }
        None => (0..n as u32).collect(),
    };
    let size = (((1.0 - pruning_rate) as f64 * n as f64).round() as usize).min(pool.len());
    let mut sets = BTreeMap::new();
    for (bi, &bit) in scores.bits.iter().enumerate() {
        let restricted: Vec<f32> = pool.iter().map(|&i| scores.scores[bi][i as usize]).collect();
        let (norm, _) = normalize_scores(&restricted, DEFAULT_FLOOR)?;
        let probs = sampling_probabilities(&norm, tau)?;
        let mut per_epoch = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, bit as u64, epoch as u64]));
            let drawn = sample_coreset(&probs, size, &mut rng)?;
            let mut mapped: Vec<u32> = drawn.iter().map(|&j| pool[j as usize]).collect();
            mapped.sort_unstable();
            per_epoch.push(mapped);
        }
        sets.insert(bit, per_epoch);
    }
    Ok(CoresetPlan {
        bits: scores.bits.clone(),
        pruning_rate,
        temperature: tau,
        floor: DEFAULT_FLOOR,
        seed,
        epochs,
        sets,
        config_hash: scores.meta.config_hash.clone(),
    })
}

/// Storage-constrained filtering: rank samples by the cross-bit sum of their
/// (already variability-based) scores and keep the top `keep_fraction`.
pub fn storage_filter(scores: &ScoreMatrix, keep_fraction: f32) -> Result<Vec<u32>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction {} outside (0, 1]",
            keep_fraction
        )));
    }
    let n = scores.n();
    let mut agg = vec![0.0f64; n];
    for per_bit in &scores.scores {
        for (a, &s) in agg.iter_mut().zip(per_bit) {
            *a += s as f64;
        }
    }
    let keep = ((keep_fraction as f64 * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    // descending by aggregate, ties broken by index for determinism
    idx.sort_by(|&a, &b| {
        agg[b as usize]
            .partial_cmp(&agg[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = idx[..keep].to_vec();
    out.sort_unstable();
    Ok(out)
}

pub fn write_plan(plan: &CoresetPlan, path: &Path) -> Result<()> {
    let json = serde_json::to_string(plan)
        .map_err(|e| Error::Format(format!("plan serialization: {}", e)))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<CoresetPlan> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("plan parse: {}", e)))
}
