//! Executable analyses: cross-bit gradient alignment, pre-BN activation
//! differences, score similarity, rank drift, and the linear-layer gradient
//! subspace property. All diagnostics are read-only over the model.

use crate::error::{Error, Result};
use crate::model::{ForwardOpts, MultiBitModel};
use crate::scoring::{spearman, ScoreMatrix};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Angle between two bit-widths' theta gradients, overall and per parameter
/// tensor. `None` marks an undefined angle (zero gradient vector).
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub b1: u8,
    pub b2: u8,
    pub overall: Option<f64>,
    pub per_layer: Vec<(String, Option<f64>)>,
}

/// arccos of cosine similarity, in degrees; `None` when either vector is zero.
pub fn angle_degrees(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += (x as f64) * (x as f64);
        nb += (y as f64) * (y as f64);
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Some(c.acos().to_degrees())
}

fn theta_grads(
    model: &mut MultiBitModel,
    x: &Tensor,
    labels: &[usize],
    b: u8,
) -> Result<Vec<Vec<f32>>> {
    let mut fwd = model.child_forward(b, x, ForwardOpts::default())?;
    let (loss, _) = fwd.tape.softmax_cross_entropy(fwd.logits, labels)?;
    let grads = fwd.tape.backward(loss)?;
    Ok(fwd
        .theta_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .get_flat(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; model.theta[i].len()])
        })
        .collect())
}

/// Gradients of the same batch at both bit-widths from identical theta
/// (inference-mode forwards; the model is left untouched).
pub fn gradient_angle(
    model: &mut MultiBitModel,
    x: &Tensor,
    labels: &[usize],
    b1: u8,
    b2: u8,
) -> Result<AlignmentReport> {
    let g1 = theta_grads(model, x, labels, b1)?;
    let g2 = theta_grads(model, x, labels, b2)?;
    let flat1: Vec<f32> = g1.iter().flatten().copied().collect();
    let flat2: Vec<f32> = g2.iter().flatten().copied().collect();
    let per_layer = model
        .theta_names
        .iter()
        .zip(g1.iter().zip(&g2))
        .map(|(name, (a, b))| (name.clone(), angle_degrees(a, b)))
        .collect();
    Ok(AlignmentReport {
        b1,
        b2,
        overall: angle_degrees(&flat1, &flat2),
        per_layer,
    })
}

/// Mean absolute difference of pre-BN activations between the b-bit child and
/// the full-precision child at one BN site, with activations quantized
/// identically in both passes.
pub fn activation_mae(
    model: &mut MultiBitModel,
    x: &Tensor,
    b: u8,
    site: usize,
    bias_correction: bool,
) -> Result<f64> {
    let maes = activation_mae_all(model, x, b, bias_correction)?;
    maes.get(site).copied().ok_or_else(|| {
        Error::invalid(format!(
            "BN site {} out of range [0, {})",
            site,
            model.spec.arch.bn_sites()
        ))
    })
}

/// Per-site pre-BN MAE against the full-precision child.
pub fn activation_mae_all(
    model: &mut MultiBitModel,
    x: &Tensor,
    b: u8,
    bias_correction: bool,
) -> Result<Vec<f64>> {
    // activation quantization is fixed across bit-widths, so the captured
    // pre-BN deltas isolate the effect of weight quantization
    let opts = ForwardOpts {
        bias_correction,
        capture_prebn: true,
        ..ForwardOpts::default()
    };
    let quant = model.child_forward(b, x, opts)?;
    let full = model.child_forward(32, x, opts)?;
    Ok(quant
        .prebn
        .iter()
        .zip(&full.prebn)
        .map(|(a, f)| {
            let s: f64 = a
                .data()
                .iter()
                .zip(f.data())
                .map(|(&u, &v)| (u as f64 - v as f64).abs())
                .sum();
            s / a.len() as f64
        })
        .collect())
}

/// Pairwise Spearman over the per-bit score arrays; `None` marks undefined
/// entries (constant score vector).
pub fn score_similarity_matrix(scores: &ScoreMatrix) -> Result<Vec<Vec<Option<f64>>>> {
    if scores.bits.len() < 2 {
        return Err(Error::invalid("similarity matrix needs at least 2 bits".to_string()));
    }
    let k = scores.bits.len();
    let mut m = vec![vec![None; k]; k];
    for i in 0..k {
        m[i][i] = Some(1.0);
        for j in i + 1..k {
            let v = spearman(&scores.scores[i], &scores.scores[j]).ok();
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Spearman of each snapshot against the final one.
pub fn rank_drift(snapshots: &[Vec<f32>]) -> Result<Vec<f64>> {
    if snapshots.len() < 2 {
        return Err(Error::invalid("rank drift needs at least 2 snapshots".to_string()));
    }
    let last = snapshots.last().unwrap();
    snapshots.iter().map(|s| spearman(s, last)).collect()
}

/// Appendix-style subspace property of a single linear layer: the weight
/// gradient's per-class columns lie in the span of the batch inputs. Returns
/// the relative norm of the orthogonal residual after projecting onto an
/// orthonormal basis of the batch.
pub fn subspace_residual(x: &Tensor, labels: &[usize], w: &Tensor) -> Result<f64> {
    let &[n, d] = x.shape() else {
        return Err(Error::shape("subspace_residual", format!("input {:?}", x.shape())));
    };
    if w.rank() != 2 || w.shape()[0] != d {
        return Err(Error::shape(
            "subspace_residual",
            format!("weight {:?} vs input dim {}", w.shape(), d),
        ));
    }
    if x.data().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("subspace_residual: all-zero batch".to_string()));
    }
    let k = w.shape()[1];
    // dW = x^T (softmax - onehot) / n, computed via the tape
    let mut tape = crate::tape::Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let wi = tape.leaf(w.clone(), true);
    let logits = tape.matmul(xi, wi)?;
    let (loss, _) = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let dw = grads
        .get(wi)
        .ok_or_else(|| Error::invalid("missing weight gradient".to_string()))?;
    // orthonormal basis of the batch rows (modified Gram-Schmidt in f64)
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..n {
        let mut v: Vec<f64> = x.data()[r * d..(r + 1) * d].iter().map(|&u| u as f64).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let mut res_sq = 0.0f64;
    let mut tot_sq = 0.0f64;
    for c in 0..k {
        let g: Vec<f64> = (0..d).map(|r| dw.data()[r * k + c] as f64).collect();
        let mut r = g.clone();
        for b in &basis {
            let dot: f64 = r.iter().zip(b).map(|(a, u)| a * u).sum();
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= dot * bi;
            }
        }
        res_sq += r.iter().map(|a| a * a).sum::<f64>();
        tot_sq += g.iter().map(|a| a * a).sum::<f64>();
    }
    if tot_sq == 0.0 {
        return Err(Error::invalid("subspace_residual: zero gradient".to_string()));
    }
    Ok((res_sq / tot_sq).sqrt())
}

// ---- CSV emission -------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_default()
}

/// One alignment observation per training step.
#[derive(Debug, Clone)]
pub struct AlignmentRow {
    pub step: usize,
    pub layer: String,
    pub angle: Option<f64>,
}

/// Columns: step, layer ("overall" for the flattened gradient), angle_degrees
/// (empty when undefined).
pub fn write_alignment_csv(rows: &[AlignmentRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,layer,angle_degrees\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.layer, fmt_opt(r.angle)));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Columns: bit, then one column per bit with the Spearman value.
pub fn write_similarity_csv(
    bits: &[u8],
    matrix: &[Vec<Option<f64>>],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("bit");
    for &b in bits {
        out.push_str(&format!(",b{}", b));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&format!("{}", bits[i]));
        for &v in row {
            out.push(',');
            out.push_str(&fmt_opt(v));
        }
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Columns: site, bit, bias_correction, mae.
pub fn write_mae_csv(rows: &[(usize, u8, bool, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("site,bit,bias_correction,mae\n");
    for &(site, bit, bc, mae) in rows {
        out.push_str(&format!("{},{},{},{:.6}\n", site, bit, bc, mae));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
