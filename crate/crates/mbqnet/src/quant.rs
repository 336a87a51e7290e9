//! Weight and activation quantizers plus the weight bias correction that
//! aligns quantized-weight moments with their full-precision counterparts.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    DoReFa,
    StatsQ,
}

/// Quantizer configuration. `weight_bits == 32` means full precision.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u8,
    pub scheme: QuantScheme,
    pub activation_bits: u8,
    pub epsilon: f32,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            weight_bits: 32,
            scheme: QuantScheme::DoReFa,
            activation_bits: 4,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weight_bits < 1 || self.weight_bits > 32 {
            return Err(Error::invalid(format!(
                "weight_bits {} outside [1, 32]",
                self.weight_bits
            )));
        }
        if self.activation_bits < 1 || self.activation_bits > 31 {
            return Err(Error::invalid(format!(
                "activation_bits {} outside [1, 31]",
                self.activation_bits
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon must be positive".to_string()));
        }
        Ok(())
    }
}

/// Scaling-group layout for StatsQ and per-channel bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingAxes {
    PerTensor,
    /// One scaling group per leading-dimension slice (rows of a 2-D weight,
    /// output channels of a conv weight).
    PerLeadingDim,
}

/// Quantized weights: dequantized reals, integer bins, scales, and metadata.
#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    pub q: Tensor,
    pub bins: Tensor,
    pub scale: Vec<f32>,
    pub bits: u8,
    pub guard_flagged: bool,
}

/// Tape nodes produced by an in-graph quantizer.
pub struct QuantVars {
    pub q: VarId,
    pub bins: VarId,
    pub scale: VarId,
    pub guard_flagged: bool,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=31).contains(&bits) {
        return Err(Error::invalid(format!("quantizer bits {} outside [1, 31]", bits)));
    }
    Ok(())
}

fn max_bin(bits: u8) -> f32 {
    ((1u64 << bits) - 1) as f32
}

/// DoReFa weight quantizer recorded on the tape. With `use_round == false` the
/// rounding step is replaced by identity, which by the straight-through rule
/// must leave the backward pass unchanged.
///
/// The scalar statistics (s = E|W| and max|tanh W|) are detached from the
/// backward pass; otherwise product-rule terms through them would depend on
/// the rounded forward values and break the straight-through identity.
pub fn dorefa_graph_with(
    tape: &mut Tape,
    w: VarId,
    bits: u8,
    eps: f32,
    use_round: bool,
) -> Result<QuantVars> {
    check_bits(bits)?;
    let wv = tape.value(w);
    if !wv.all_finite() {
        return Err(Error::invalid("dorefa_quantize: non-finite weights".to_string()));
    }
    let m_n = max_bin(bits);
    let s_val = {
        let sum: f64 = wv.data().iter().map(|&v| v.abs() as f64).sum();
        (sum / wv.len() as f64) as f32
    };
    let t = tape.tanh(w);
    let max_t = tape
        .value(t)
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(0.0f32, f32::max);
    let guard_flagged = max_t < eps;
    let max_t = max_t.max(eps);
    let wn = tape.mul_const(t, 0.5 / max_t);
    let wn = tape.add_const(wn, 0.5);
    let scaled = tape.mul_const(wn, m_n);
    let bins = if use_round { tape.ste_round(scaled) } else { scaled };
    let q = tape.mul_const(bins, 2.0 / m_n);
    let q = tape.add_const(q, -1.0);
    let q = tape.mul_const(q, s_val);
    let scale = tape.constant(Tensor::scalar(s_val));
    Ok(QuantVars {
        q,
        bins,
        scale,
        guard_flagged,
    })
}

pub fn dorefa_graph(tape: &mut Tape, w: VarId, bits: u8, eps: f32) -> Result<QuantVars> {
    dorefa_graph_with(tape, w, bits, eps, true)
}

/// DoReFa activation quantizer: clip to [0, 1], then uniform rounding.
/// Straight-through inside the clip range, zero gradient outside.
pub fn dorefa_activation_graph(tape: &mut Tape, x: VarId, bits: u8) -> Result<VarId> {
    check_bits(bits)?;
    let m_n = max_bin(bits);
    let c = tape.clip(x, 0.0, 1.0);
    let s = tape.mul_const(c, m_n);
    let r = tape.ste_round(s);
    Ok(tape.mul_const(r, 1.0 / m_n))
}

/// StatsQ weight quantizer recorded on the tape.
pub fn statsq_graph_with(
    tape: &mut Tape,
    w: VarId,
    bits: u8,
    axes: ScalingAxes,
    eps: f32,
    use_round: bool,
) -> Result<QuantVars> {
    check_bits(bits)?;
    let shape = tape.value(w).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape(
            "statsq_quantize",
            format!("rank {} weights unsupported", shape.len()),
        ));
    }
    let m_n = max_bin(bits);
    // scaling groups: one for PerTensor, leading-dim slices otherwise
    let (groups, inner) = match axes {
        ScalingAxes::PerTensor => (1usize, tape.value(w).len()),
        ScalingAxes::PerLeadingDim => {
            let g = shape[0];
            (g, tape.value(w).len() / g)
        }
    };
    // detached per-group statistics, as in the DoReFa path
    let wd = tape.value(w).data();
    let mut s_vals = vec![0.0f32; groups];
    for g in 0..groups {
        let sum: f64 = wd[g * inner..(g + 1) * inner]
            .iter()
            .map(|&v| v.abs() as f64)
            .sum();
        s_vals[g] = (2.0 * sum / inner as f64) as f32;
    }
    let guard_flagged = s_vals.iter().any(|&v| v < eps);
    s_vals.iter_mut().for_each(|v| *v = v.max(eps));
    let inv_s: Vec<f32> = s_vals.iter().map(|&v| 1.0 / v).collect();
    let inv_s_c = tape.constant(Tensor::from_vec(inv_s));
    let wn = if groups == 1 {
        tape.scale_scalar(w, inv_s_c)?
    } else {
        tape.scale_group(w, inv_s_c)?
    };
    let wc = tape.clip(wn, -1.0, 1.0);
    let wcd = tape.value(wc).data();
    let mut half_inv_max = vec![0.0f32; groups];
    for g in 0..groups {
        let mx = wcd[g * inner..(g + 1) * inner]
            .iter()
            .map(|v| v.abs())
            .fold(0.0f32, f32::max)
            .max(eps);
        half_inv_max[g] = 0.5 / mx;
    }
    let him_c = tape.constant(Tensor::from_vec(half_inv_max));
    let w2 = if groups == 1 {
        tape.scale_scalar(wc, him_c)?
    } else {
        tape.scale_group(wc, him_c)?
    };
    let w2 = tape.add_const(w2, 0.5);
    let scaled = tape.mul_const(w2, m_n);
    let bins = if use_round { tape.ste_round(scaled) } else { scaled };
    let q = tape.mul_const(bins, 2.0 / m_n);
    let q = tape.add_const(q, -1.0);
    let s_c = tape.constant(Tensor::from_vec(s_vals));
    let q = if groups == 1 {
        tape.scale_scalar(q, s_c)?
    } else {
        tape.scale_group(q, s_c)?
    };
    Ok(QuantVars {
        q,
        bins,
        scale: s_c,
        guard_flagged,
    })
}

pub fn statsq_graph(
    tape: &mut Tape,
    w: VarId,
    bits: u8,
    axes: ScalingAxes,
    eps: f32,
) -> Result<QuantVars> {
    statsq_graph_with(tape, w, bits, axes, eps, true)
}

fn group_moments(data: &[f32], groups: usize) -> (Vec<f64>, Vec<f64>) {
    let inner = data.len() / groups;
    let mut means = vec![0.0f64; groups];
    let mut vars = vec![0.0f64; groups];
    for g in 0..groups {
        let seg = &data[g * inner..(g + 1) * inner];
        let m: f64 = seg.iter().map(|&v| v as f64).sum::<f64>() / inner as f64;
        let v: f64 = seg.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / inner as f64;
        means[g] = m;
        vars[g] = v;
    }
    (means, vars)
}

/// Bias correction recorded on the tape:
/// `sqrt(V[w] / V[w_q]) * (w_q + (E[w] - E[w_q]))` with population moments.
/// Falls back to shift-only when `V[w_q] < eps`. Moments are detached from
/// the backward pass; the gradient through the correction is the scale factor.
pub fn bias_correct_graph(
    tape: &mut Tape,
    w_q: VarId,
    w: VarId,
    eps: f32,
    per_channel: bool,
) -> Result<(VarId, bool)> {
    let shape = tape.value(w).shape().to_vec();
    if tape.value(w_q).shape() != shape.as_slice() {
        return Err(Error::shape(
            "bias_correct",
            format!("w_q {:?} vs w {:?}", tape.value(w_q).shape(), shape),
        ));
    }
    if shape.iter().product::<usize>() < 2 {
        return Err(Error::invalid("bias_correct needs at least 2 elements".to_string()));
    }
    let groups = if per_channel { shape[0] } else { 1 };
    let (mw, vw) = group_moments(tape.value(w).data(), groups);
    let (mq, vq) = group_moments(tape.value(w_q).data(), groups);
    let flagged = vq.iter().any(|&v| v < eps as f64);
    let shift: Vec<f32> = mw.iter().zip(&mq).map(|(&a, &b)| (a - b) as f32).collect();
    let scale: Vec<f32> = vw
        .iter()
        .zip(&vq)
        .map(|(&a, &b)| if b < eps as f64 { 1.0 } else { (a / b).sqrt() as f32 })
        .collect();
    if groups == 1 {
        let shift_c = tape.constant(Tensor::scalar(shift[0]));
        let shifted = tape.add_scalar(w_q, shift_c)?;
        let out = tape.mul_const(shifted, scale[0]);
        Ok((out, flagged))
    } else {
        let shift_c = tape.constant(Tensor::from_vec(shift));
        let scale_c = tape.constant(Tensor::from_vec(scale));
        let ones = tape.constant(Tensor::full(shape, 1.0));
        let bshift = tape.scale_group(ones, shift_c)?;
        let shifted = tape.add(w_q, bshift)?;
        let out = tape.scale_group(shifted, scale_c)?;
        Ok((out, flagged))
    }
}

// ---- plain (non-graph) entry points ------------------------------------

fn run_quant(
    w: &Tensor,
    f: impl FnOnce(&mut Tape, VarId) -> Result<QuantVars>,
    bits: u8,
) -> Result<QuantizedWeights> {
    let mut tape = Tape::new();
    let wid = tape.leaf(w.clone(), false);
    let vars = f(&mut tape, wid)?;
    Ok(QuantizedWeights {
        q: tape.value(vars.q).clone(),
        bins: tape.value(vars.bins).clone(),
        scale: tape.value(vars.scale).data().to_vec(),
        bits,
        guard_flagged: vars.guard_flagged,
    })
}

pub fn dorefa_quantize(w: &Tensor, bits: u8, eps: f32) -> Result<QuantizedWeights> {
    run_quant(w, |t, wid| dorefa_graph(t, wid, bits, eps), bits)
}

pub fn dorefa_quantize_activation(x: &Tensor, bits: u8) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), false);
    let out = dorefa_activation_graph(&mut tape, xid, bits)?;
    Ok(tape.value(out).clone())
}

pub fn statsq_quantize(w: &Tensor, bits: u8, axes: ScalingAxes, eps: f32) -> Result<QuantizedWeights> {
    run_quant(w, |t, wid| statsq_graph(t, wid, bits, axes, eps), bits)
}

/// Corrected weights per the moment-matching rule; population moments in f64.
pub fn bias_correct(w_q: &Tensor, w: &Tensor, eps: f32) -> Result<(Tensor, bool)> {
    if w_q.shape() != w.shape() {
        return Err(Error::shape(
            "bias_correct",
            format!("w_q {:?} vs w {:?}", w_q.shape(), w.shape()),
        ));
    }
    if w.len() < 2 {
        return Err(Error::invalid("bias_correct needs at least 2 elements".to_string()));
    }
    let (ew, eq) = (w.mean(), w_q.mean());
    let (vw, vq) = (w.variance(), w_q.variance());
    let shift = ew - eq;
    if vq < eps as f64 {
        let out: Vec<f32> = w_q.data().iter().map(|&v| (v as f64 + shift) as f32).collect();
        return Ok((Tensor::new(w.shape().to_vec(), out)?, true));
    }
    let scale = (vw / vq).sqrt();
    let out: Vec<f32> = w_q
        .data()
        .iter()
        .map(|&v| (scale * (v as f64 + shift)) as f32)
        .collect();
    Ok((Tensor::new(w.shape().to_vec(), out)?, false))
}

/// `V[w_q] / V[w]`; errors when the reference variance is zero.
pub fn variance_ratio(w_q: &Tensor, w: &Tensor) -> Result<f64> {
    let vw = w.variance();
    if vw == 0.0 {
        return Err(Error::invalid("variance_ratio: V[w] is zero".to_string()));
    }
    Ok(w_q.variance() / vw)
}
