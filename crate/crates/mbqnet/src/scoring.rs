//! Per-bit sample importance scores from bit-wise training dynamics, the
//! baseline scoring methods, and Spearman rank correlation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MultiBitModel;
use crate::train::{train_batchwise, train_bitwise, BatchwiseOpts, BitwiseOpts, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SCORE_DECAY: f64 = 0.9;
pub const DEFAULT_SCORE_EPOCHS: usize = 10;
pub const DEFAULT_SCORE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    Dynamics,
    Random,
    Entropy,
    El2n,
    Forgetting,
    Moderate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub method: String,
    pub epochs: usize,
    pub window: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-bit score arrays over dataset indices 0..N-1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub bits: Vec<u8>,
    pub scores: Vec<Vec<f32>>,
    pub meta: ScoreMeta,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.scores.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn get(&self, bit: u8) -> Option<&[f32]> {
        self.bits
            .iter()
            .position(|&b| b == bit)
            .map(|i| self.scores[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.len() != self.scores.len() || self.bits.is_empty() {
            return Err(Error::invalid("score matrix bits/arrays mismatch".to_string()));
        }
        let n = self.n();
        for s in &self.scores {
            if s.len() != n {
                return Err(Error::invalid("score arrays have unequal length".to_string()));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite score".to_string()));
            }
        }
        Ok(())
    }
}

/// TDDS-style variability: s_i = sum over the last `window` epochs of
/// decay^(age) * |c_e - c_(e-1)|, newest difference weighted 1.
/// `contribs[e][i]` is sample i's contribution at epoch e (0-based).
pub fn variability_scores(contribs: &[Vec<f64>], window: usize) -> Result<Vec<f32>> {
    let e_total = contribs.len();
    if e_total < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 epochs of contributions, got {}",
            e_total
        )));
    }
    if window == 0 || window >= e_total {
        return Err(Error::invalid(format!(
            "window {} outside [1, {})",
            window, e_total
        )));
    }
    let n = contribs[0].len();
    let mut out = vec![0.0f32; n];
    // 1-based epochs e in [E-K+1, E]; epoch E carries weight decay^0
    for e in (e_total - window + 1)..=e_total {
        let w = SCORE_DECAY.powi((e_total - e) as i32);
        let cur = &contribs[e - 1];
        let prev = &contribs[e - 2];
        for i in 0..n {
            out[i] += (w * (cur[i] - prev[i]).abs()) as f32;
        }
    }
    Ok(out)
}

fn check_dynamics_args(epochs: usize, window: usize) -> Result<()> {
    if epochs < 2 {
        return Err(Error::invalid(format!(
            "score extraction needs epochs >= 2, got {}",
            epochs
        )));
    }
    if window == 0 || window >= epochs {
        return Err(Error::invalid(format!(
            "window {} outside [1, {})",
            window, epochs
        )));
    }
    Ok(())
}

/// Importance scores from bit-wise training dynamics: contribution
/// c_(i,b,e) = ||softmax - onehot||^2 recorded per epoch, scored by weighted
/// absolute epoch-to-epoch differences.
pub fn score_bitwise_dynamics(
    model: &mut MultiBitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    window: usize,
) -> Result<ScoreMatrix> {
    check_dynamics_args(epochs, window)?;
    let bits = model.spec.ranges.trained.clone();
    let n = data.len();
    // contribs[bit][epoch][sample]
    let mut contribs: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n]; epochs]; bits.len()];
    {
        let bit_pos = |b: u8| bits.iter().position(|&x| x == b).unwrap();
        let mut probe = |ev: crate::train::ProbeEvent| {
            let c: f64 = ev.err.iter().map(|&v| (v as f64) * (v as f64)).sum();
            contribs[bit_pos(ev.bit)][ev.epoch][ev.index as usize] = c;
        };
        let run_cfg = TrainConfig {
            epochs,
            ..cfg.clone()
        };
        train_bitwise(
            model,
            data,
            &run_cfg,
            BitwiseOpts {
                probe: Some(&mut probe),
                ..BitwiseOpts::default()
            },
        )?;
    }
    let scores = contribs
        .iter()
        .map(|per_epoch| variability_scores(per_epoch, window))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreMatrix {
        bits,
        scores,
        meta: ScoreMeta {
            method: "dynamics-bitwise".to_string(),
            epochs,
            window,
            seed: cfg.seed,
            config_hash: String::new(),
        },
    })
}

/// Same dynamics score extracted under batch-wise training. Contributions are
/// summed over bits before scoring, so the per-bit arrays are identical by
/// construction.
pub fn score_batchwise_dynamics(
    model: &mut MultiBitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    window: usize,
) -> Result<ScoreMatrix> {
    check_dynamics_args(epochs, window)?;
    let bits = model.spec.ranges.trained.clone();
    let n = data.len();
    let mut contribs: Vec<Vec<f64>> = vec![vec![0.0; n]; epochs];
    {
        let mut probe = |ev: crate::train::ProbeEvent| {
            let c: f64 = ev.err.iter().map(|&v| (v as f64) * (v as f64)).sum();
            contribs[ev.epoch][ev.index as usize] += c;
        };
        let run_cfg = TrainConfig {
            epochs,
            ..cfg.clone()
        };
        train_batchwise(
            model,
            data,
            &run_cfg,
            BatchwiseOpts {
                probe: Some(&mut probe),
                ..BatchwiseOpts::default()
            },
        )?;
    }
    let per_bit = variability_scores(&contribs, window)?;
    Ok(ScoreMatrix {
        scores: vec![per_bit; bits.len()],
        bits,
        meta: ScoreMeta {
            method: "dynamics-batchwise".to_string(),
            epochs,
            window,
            seed: cfg.seed,
            config_hash: String::new(),
        },
    })
}

fn entropy_from_err(err: &[f32], label: usize) -> f64 {
    let mut h = 0.0f64;
    for (j, &e) in err.iter().enumerate() {
        let p = e as f64 + if j == label { 1.0 } else { 0.0 };
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

fn el2n_from_err(err: &[f32]) -> f64 {
    err.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Baseline scoring methods, each run under bit-wise training (so per-bit
/// arrays differ, except Random which is training-free and replicated).
pub fn score_baseline(
    method: ScoreMethod,
    model: &mut MultiBitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<ScoreMatrix> {
    let bits = model.spec.ranges.trained.clone();
    let n = data.len();
    let meta = |name: &str| ScoreMeta {
        method: name.to_string(),
        epochs,
        window: 0,
        seed: cfg.seed,
        config_hash: String::new(),
    };
    match method {
        ScoreMethod::Dynamics => {
            return Err(Error::invalid(
                "dynamics scoring uses score_bitwise_dynamics".to_string(),
            ))
        }
        ScoreMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let s: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            return Ok(ScoreMatrix {
                scores: vec![s; bits.len()],
                bits,
                meta: meta("random"),
            });
        }
        ScoreMethod::Forgetting if epochs < 2 => {
            return Err(Error::invalid(
                "forgetting scores need at least 2 epochs".to_string(),
            ))
        }
        _ => {}
    }
    if epochs < 1 {
        return Err(Error::invalid("baseline scoring needs epochs >= 1".to_string()));
    }
    let bit_pos = |b: u8| bits.iter().position(|&x| x == b).unwrap();
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; n]; bits.len()];
    let mut prev_correct: Vec<Vec<bool>> = vec![vec![false; n]; bits.len()];
    let mut ever_correct: Vec<Vec<bool>> = vec![vec![false; n]; bits.len()];
    let mut features: Vec<Vec<Vec<f32>>> = vec![vec![Vec::new(); n]; bits.len()];
    {
        let mut probe = |ev: crate::train::ProbeEvent| {
            let bi = bit_pos(ev.bit);
            let i = ev.index as usize;
            match method {
                ScoreMethod::Entropy => {
                    acc[bi][i] += entropy_from_err(ev.err, data.labels[i] as usize)
                }
                ScoreMethod::El2n => acc[bi][i] += el2n_from_err(ev.err),
                ScoreMethod::Forgetting => {
                    if prev_correct[bi][i] && !ev.correct {
                        acc[bi][i] += 1.0;
                    }
                    prev_correct[bi][i] = ev.correct;
                    ever_correct[bi][i] |= ev.correct;
                }
                ScoreMethod::Moderate => {
                    if ev.epoch == epochs - 1 {
                        features[bi][i] = ev.features.expect("features requested").to_vec();
                    }
                }
                ScoreMethod::Dynamics | ScoreMethod::Random => unreachable!(),
            }
        };
        let run_cfg = TrainConfig {
            epochs,
            ..cfg.clone()
        };
        train_bitwise(
            model,
            data,
            &run_cfg,
            BitwiseOpts {
                capture_features: method == ScoreMethod::Moderate,
                probe: Some(&mut probe),
                ..BitwiseOpts::default()
            },
        )?;
    }
    let scores: Vec<Vec<f32>> = match method {
        ScoreMethod::Entropy | ScoreMethod::El2n => acc
            .iter()
            .map(|per| per.iter().map(|&v| (v / epochs as f64) as f32).collect())
            .collect(),
        ScoreMethod::Forgetting => acc
            .iter()
            .zip(&ever_correct)
            .map(|(per, ever)| {
                per.iter()
                    .zip(ever)
                    .map(|(&v, &e)| if e { v as f32 } else { epochs as f32 })
                    .collect()
            })
            .collect(),
        ScoreMethod::Moderate => features
            .iter()
            .map(|per_bit| moderate_scores(per_bit, &data.labels, model.spec.arch.classes()))
            .collect::<Result<Vec<_>>>()?,
        _ => unreachable!(),
    };
    let name = match method {
        ScoreMethod::Entropy => "entropy",
        ScoreMethod::El2n => "el2n",
        ScoreMethod::Forgetting => "forgetting",
        ScoreMethod::Moderate => "moderate",
        _ => unreachable!(),
    };
    Ok(ScoreMatrix {
        bits,
        scores,
        meta: meta(name),
    })
}

/// Moderate scoring: distance of the penultimate feature to its class mean,
/// ranked by closeness to the median distance (closer to median = higher).
fn moderate_scores(features: &[Vec<f32>], labels: &[u8], classes: usize) -> Result<Vec<f32>> {
    let n = features.len();
    let d = features
        .first()
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::invalid("moderate scoring: missing features".to_string()))?
        .len();
    let mut means = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        for (m, &v) in means[y as usize].iter_mut().zip(f) {
            *m += v as f64;
        }
        counts[y as usize] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let dist: Vec<f64> = features
        .iter()
        .zip(labels)
        .map(|(f, &y)| {
            f.iter()
                .zip(&means[y as usize])
                .map(|(&v, &m)| (v as f64 - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut sorted = dist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let devs: Vec<f64> = dist.iter().map(|&v| (v - median).abs()).collect();
    let max_dev = devs.iter().cloned().fold(0.0f64, f64::max);
    Ok(devs.iter().map(|&v| (max_dev - v) as f32).collect())
}

fn average_ranks(vals: &[f32]) -> Vec<f64> {
    let n = vals.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two equal arrays of length >= 2".to_string()));
    }
    let constant = |v: &[f32]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Err(Error::invalid("spearman undefined for constant arrays".to_string()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let xa = ra[i] - ma;
        let xb = rb[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    Ok(num / (da * db).sqrt())
}

/// `.scores` file: one JSON header line, then per-bit little-endian f32
/// arrays in bit order.
pub fn write_scores(m: &ScoreMatrix, path: &Path) -> Result<()> {
    m.validate()?;
    #[derive(Serialize)]
    struct Header<'a> {
        method: &'a str,
        bits: &'a [u8],
        n: usize,
        epochs: usize,
        window: usize,
        seed: u64,
        config_hash: &'a str,
    }
    let header = serde_json::to_string(&Header {
        method: &m.meta.method,
        bits: &m.bits,
        n: m.n(),
        epochs: m.meta.epochs,
        window: m.meta.window,
        seed: m.meta.seed,
        config_hash: &m.meta.config_hash,
    })
    .map_err(|e| Error::Format(format!("scores header: {}", e)))?;
    let mut out = Vec::with_capacity(header.len() + 1 + m.bits.len() * m.n() * 4);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for per_bit in &m.scores {
        for &v in per_bit {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreMatrix> {
    #[derive(Deserialize)]
    struct Header {
        method: String,
        bits: Vec<u8>,
        n: usize,
        epochs: usize,
        window: usize,
        seed: u64,
        config_hash: String,
    }
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("scores file: missing header line".to_string()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("scores header parse: {}", e)))?;
    let payload = &bytes[nl + 1..];
    let expected = header.bits.len() * header.n * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "scores payload {} bytes at offset {}, expected {}",
            payload.len(),
            nl + 1,
            expected
        )));
    }
    let mut scores = Vec::with_capacity(header.bits.len());
    for bi in 0..header.bits.len() {
        let base = bi * header.n * 4;
        let arr: Vec<f32> = (0..header.n)
            .map(|i| {
                let o = base + i * 4;
                f32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]])
            })
            .collect();
        scores.push(arr);
    }
    let m = ScoreMatrix {
        bits: header.bits,
        scores,
        meta: ScoreMeta {
            method: header.method,
            epochs: header.epochs,
            window: header.window,
            seed: header.seed,
            config_hash: header.config_hash,
        },
    };
    m.validate()?;
    Ok(m)
}
