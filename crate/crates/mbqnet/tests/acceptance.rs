//! Acceptance suite. Each criterion prints one pass/fail line; failures then
//! panic with details. Oracles are computed independently in f64 inside this
//! file (reference forwards, enumeration of the sampling scheme, two-pass
//! statistics) rather than by calling back into the code under test.

use mbqnet::coreset::{
    build_plan, normalize_scores, sample_coreset, sampling_probabilities,
};
use mbqnet::data::{synth_blobs, synth_digits, Dataset};
use mbqnet::diagnostics::{angle_degrees, subspace_residual, write_alignment_csv, AlignmentRow};
use mbqnet::model::{
    build_model, Arch, BitRanges, BnPolicy, ForwardOpts, ModelSpec,
};
use mbqnet::quant::{
    bias_correct, dorefa_graph_with, dorefa_quantize, dorefa_quantize_activation,
    statsq_graph_with, statsq_quantize, QuantScheme, QuantSpec, ScalingAxes, DEFAULT_EPSILON,
};
use mbqnet::scoring::{score_batchwise_dynamics, score_bitwise_dynamics, spearman};
use mbqnet::tape::{Tape, VarId};
use mbqnet::tensor::Tensor;
use mbqnet::train::{
    bn_adapt, evaluate, train_batchwise, BatchwiseOpts, LrSchedule, TrainConfig, TrainScheme,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn report(n: usize, name: &str, failures: &[String]) {
    let ok = failures.is_empty();
    println!(
        "criterion {:2} ({}): {}",
        n,
        name,
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {} ({}) failed:\n{}", n, name, failures.join("\n"));
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---- criterion 1: bias-correction exactness ------------------------------

#[test]
fn criterion_1_bias_correction() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..1000 {
        let n = rng.gen_range(8..64);
        let w = Tensor::from_vec(uniform(&mut rng, n, -1.0, 1.0));
        let wq = Tensor::from_vec(uniform(&mut rng, n, -1.0, 1.0));
        if w.variance() < 1e-4 || wq.variance() < 1e-4 {
            continue; // degenerate draws are out of scope
        }
        let (out, flagged) = bias_correct(&wq, &w, DEFAULT_EPSILON).unwrap();
        if flagged {
            failures.push(format!("trial {}: unexpected guard", trial));
            continue;
        }
        let rel = (out.variance() - w.variance()).abs() / w.variance();
        if rel > 1e-6 {
            failures.push(format!("trial {}: variance rel err {:.3e}", trial, rel));
        }
    }
    // hand example must hold exactly
    let (out, _) = bias_correct(
        &Tensor::from_vec(vec![0.0, 2.0, 4.0]),
        &Tensor::from_vec(vec![1.0, 2.0, 3.0]),
        DEFAULT_EPSILON,
    )
    .unwrap();
    if out.data() != [0.0, 1.0, 2.0] {
        failures.push(format!("hand example gave {:?}", out.data()));
    }
    report(1, "bias-correction exactness", &failures);
}

// ---- criterion 2: quantizer suite ----------------------------------------

#[test]
fn criterion_2_quantizer_suite() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    // DoReFa monotonicity and bin-count bound
    for &b in &[1u8, 2, 4, 8] {
        let mut vals = uniform(&mut rng, 100, -2.0, 2.0);
        vals.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let q = dorefa_quantize(&Tensor::from_vec(vals), b, DEFAULT_EPSILON).unwrap();
        let qd = q.q.data();
        if qd.windows(2).any(|w| w[1] < w[0]) {
            failures.push(format!("b={}: monotonicity violated", b));
        }
        let distinct: std::collections::BTreeSet<u32> =
            qd.iter().map(|v| v.to_bits()).collect();
        if distinct.len() > (1usize << b) {
            failures.push(format!("b={}: {} distinct values", b, distinct.len()));
        }
    }

    // constant-tensor identity
    for &c in &[0.7f32, -0.4] {
        let q = dorefa_quantize(&Tensor::from_vec(vec![c; 6]), 3, DEFAULT_EPSILON).unwrap();
        if q.q.data().iter().any(|&v| (v - c).abs() > 1e-5) {
            failures.push(format!("constant {} not preserved: {:?}", c, q.q.data()));
        }
    }

    // three worked DoReFa examples
    let q = dorefa_quantize(&Tensor::from_vec(vec![0.5, -0.5]), 1, DEFAULT_EPSILON).unwrap();
    if (q.q.data()[0] - 0.5).abs() > 1e-6 || (q.q.data()[1] + 0.5).abs() > 1e-6 {
        failures.push(format!("[0.5,-0.5] b=1 gave {:?}", q.q.data()));
    }
    let q = dorefa_quantize(&Tensor::from_vec(vec![0.1, 0.5]), 1, DEFAULT_EPSILON).unwrap();
    if q.q.data().iter().any(|&v| (v - 0.3).abs() > 1e-6) {
        failures.push(format!("[0.1,0.5] b=1 gave {:?}", q.q.data()));
    }
    let q = dorefa_quantize(&Tensor::from_vec(vec![0.9; 4]), 2, DEFAULT_EPSILON).unwrap();
    if q.q.data().iter().any(|&v| (v - 0.9).abs() > 1e-5) {
        failures.push(format!("constant 0.9 b=2 gave {:?}", q.q.data()));
    }

    // activation quantizer spot checks
    let y = dorefa_quantize_activation(&Tensor::from_vec(vec![0.3]), 2).unwrap();
    if (y.data()[0] - 1.0 / 3.0).abs() > 1e-7 {
        failures.push(format!("act 0.3 @2 bits gave {}", y.data()[0]));
    }

    // StatsQ worked example
    let w = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
    let q = statsq_quantize(&w, 1, ScalingAxes::PerLeadingDim, DEFAULT_EPSILON).unwrap();
    if (q.q.data()[0] - 1.0).abs() > 1e-6 || (q.q.data()[1] + 1.0).abs() > 1e-6 {
        failures.push(format!("statsq [[0.5,-0.5]] b=1 gave {:?}", q.q.data()));
    }

    report(2, "quantizer suite", &failures);
}

// ---- criterion 3: gradient integrity --------------------------------------
//
// All finite differences run on independent f64 mirror implementations of the
// primitives, so the oracle shares no code with the tape.

mod ref64 {
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    /// 3x3 convolution, padding 1.
    pub fn conv(
        x: &[f64],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        oc: usize,
        stride: usize,
    ) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; n * oc * oh * ow];
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                    {
                                        acc += x[((ni * c + ci) * h + iy as usize) * w
                                            + ix as usize]
                                            * wt[((o * c + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    pub fn bias_add(x: &[f64], c: usize, inner: usize, b: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect()
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v.max(0.0)).collect()
    }

    pub fn gap(x: &[f64], nc: usize, inner: usize) -> Vec<f64> {
        (0..nc)
            .map(|i| x[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect()
    }

    /// Training-mode batch norm: batch mean and population variance.
    pub fn bn_train(
        x: &[f64],
        n: usize,
        c: usize,
        inner: usize,
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let m = (n * inner) as f64;
        let per = c * inner;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..inner {
                    mean[ci] += x[ni * per + ci * inner + j];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..inner {
                    let d = x[ni * per + ci * inner + j] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let is = 1.0 / (var[ci] + eps).sqrt();
                for j in 0..inner {
                    let idx = ni * per + ci * inner + j;
                    out[idx] = gamma[ci] * (x[idx] - mean[ci]) * is + beta[ci];
                }
            }
        }
        out
    }

    pub fn ce_mean(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> f64 {
        let mut loss = 0.0;
        for i in 0..n {
            let row = &logits[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        loss / n as f64
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// Central-difference check of one taped loss against an f64 reference.
fn fd_check(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[VarId]) -> VarId,
    reference: &dyn Fn(&[Vec<f64>]) -> f64,
    failures: &mut Vec<String>,
) {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    // the reference must agree with the f32 forward itself
    let fwd = tape.value(loss).data()[0] as f64;
    let refv = reference(&base);
    if (fwd - refv).abs() > 1e-4 * refv.abs().max(1.0) {
        failures.push(format!("{}: forward {} vs reference {}", name, fwd, refv));
        return;
    }
    let h = 1e-5;
    for (i, id) in ids.iter().enumerate() {
        let g = grads.get_flat(*id).unwrap_or(&[]).to_vec();
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let fd = (reference(&plus) - reference(&minus)) / (2.0 * h);
            let a = g.get(j).copied().unwrap_or(0.0) as f64;
            let scale = fd.abs().max(a.abs());
            // absolute floor 1e-8: one part in ~1e5 of the gradient scale,
            // below the f32 tape's own rounding noise
            if scale > 1e-6 && (a - fd).abs() / scale > 1e-3 && (a - fd).abs() > 1e-8 {
                failures.push(format!(
                    "{}: input {} coord {}: autodiff {:.8e} vs fd {:.8e}",
                    name, i, j, a, fd
                ));
            }
        }
    }
}

#[test]
fn criterion_3_gradient_integrity() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // --- per-primitive checks, each weighted into a scalar by a fixed
    //     random coefficient tensor -------------------------------------
    let coef = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        uniform(rng, n, -1.0, 1.0).iter().map(|&v| v as f64).collect()
    };

    // matmul [3x4][4x5]
    let a = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap();
    let b = Tensor::new(vec![4, 5], uniform(&mut rng, 20, -1.0, 1.0)).unwrap();
    let cw = coef(&mut rng, 15);
    let cw32 = Tensor::new(vec![3, 5], cw.iter().map(|&v| v as f32).collect()).unwrap();
    fd_check(
        "matmul",
        &[a, b],
        &|t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            let c = t.constant(cw32.clone());
            let m = t.mul(y, c).unwrap();
            t.sum(m)
        },
        &|p| ref64::dot(&ref64::matmul(&p[0], 3, 4, &p[1], 5), &cw),
        &mut failures,
    );

    // conv 3x3 at both strides
    for &stride in &[1usize, 2] {
        let x = Tensor::new(vec![2, 2, 5, 5], uniform(&mut rng, 100, -1.0, 1.0)).unwrap();
        let w = Tensor::new(vec![3, 2, 3, 3], uniform(&mut rng, 54, -0.5, 0.5)).unwrap();
        let (oh, ow) = ((5 - 1) / stride + 1, (5 - 1) / stride + 1);
        let cw = coef(&mut rng, 2 * 3 * oh * ow);
        let cw32 = Tensor::new(
            vec![2, 3, oh, ow],
            cw.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let cwc = cw.clone();
        fd_check(
            &format!("conv2d stride {}", stride),
            &[x, w],
            &|t, ids| {
                let y = t.conv2d(ids[0], ids[1], stride).unwrap();
                let c = t.constant(cw32.clone());
                let m = t.mul(y, c).unwrap();
                t.sum(m)
            },
            &move |p| {
                let (y, _, _) = ref64::conv(&p[0], 2, 2, 5, 5, &p[1], 3, stride);
                ref64::dot(&y, &cwc)
            },
            &mut failures,
        );
    }

    // bias add over channels of a 4-D map
    let x = Tensor::new(vec![2, 3, 4, 4], uniform(&mut rng, 96, -1.0, 1.0)).unwrap();
    let bch = Tensor::from_vec(uniform(&mut rng, 3, -0.5, 0.5));
    let cw = coef(&mut rng, 96);
    let cw32 = Tensor::new(vec![2, 3, 4, 4], cw.iter().map(|&v| v as f32).collect()).unwrap();
    let cwc = cw.clone();
    fd_check(
        "bias_add",
        &[x, bch],
        &|t, ids| {
            let y = t.bias_add(ids[0], ids[1]).unwrap();
            let c = t.constant(cw32.clone());
            let m = t.mul(y, c).unwrap();
            t.sum(m)
        },
        &move |p| ref64::dot(&ref64::bias_add(&p[0], 3, 16, &p[1]), &cwc),
        &mut failures,
    );

    // elementwise add
    let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap();
    let y = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap();
    let cw = coef(&mut rng, 12);
    let cw32 = Tensor::new(vec![3, 4], cw.iter().map(|&v| v as f32).collect()).unwrap();
    let cwc = cw.clone();
    fd_check(
        "add",
        &[x, y],
        &|t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let c = t.constant(cw32.clone());
            let m = t.mul(s, c).unwrap();
            t.sum(m)
        },
        &move |p| {
            let s: Vec<f64> = p[0].iter().zip(&p[1]).map(|(a, b)| a + b).collect();
            ref64::dot(&s, &cwc)
        },
        &mut failures,
    );

    // relu (inputs bounded away from the kink)
    let vals: Vec<f32> = uniform(&mut rng, 20, -1.0, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let x = Tensor::from_vec(vals);
    let cw = coef(&mut rng, 20);
    let cw32 = Tensor::from_vec(cw.iter().map(|&v| v as f32).collect::<Vec<_>>());
    let cwc = cw.clone();
    fd_check(
        "relu",
        &[x],
        &|t, ids| {
            let y = t.relu(ids[0]);
            let c = t.constant(cw32.clone());
            let m = t.mul(y, c).unwrap();
            t.sum(m)
        },
        &move |p| ref64::dot(&ref64::relu(&p[0]), &cwc),
        &mut failures,
    );

    // global average pool
    let x = Tensor::new(vec![2, 3, 4, 4], uniform(&mut rng, 96, -1.0, 1.0)).unwrap();
    let cw = coef(&mut rng, 6);
    let cw32 = Tensor::new(vec![2, 3], cw.iter().map(|&v| v as f32).collect()).unwrap();
    let cwc = cw.clone();
    fd_check(
        "global_avg_pool",
        &[x],
        &|t, ids| {
            let y = t.global_avg_pool(ids[0]).unwrap();
            let c = t.constant(cw32.clone());
            let m = t.mul(y, c).unwrap();
            t.sum(m)
        },
        &move |p| ref64::dot(&ref64::gap(&p[0], 6, 16), &cwc),
        &mut failures,
    );

    // batch norm (training mode), gradients through x, gamma, beta
    let x = Tensor::new(vec![4, 3, 2, 2], uniform(&mut rng, 48, -1.0, 1.0)).unwrap();
    let gamma = Tensor::from_vec(uniform(&mut rng, 3, 0.5, 1.5));
    let beta = Tensor::from_vec(uniform(&mut rng, 3, -0.5, 0.5));
    let cw = coef(&mut rng, 48);
    let cw32 = Tensor::new(vec![4, 3, 2, 2], cw.iter().map(|&v| v as f32).collect()).unwrap();
    let cwc = cw.clone();
    let eps = 1e-5f32;
    fd_check(
        "batch_norm",
        &[x, gamma, beta],
        &|t, ids| {
            let mut rm = vec![0.0f32; 3];
            let mut rv = vec![1.0f32; 3];
            let y = t
                .batch_norm(ids[0], ids[1], ids[2], &mut rm, &mut rv, true, 0.1, eps)
                .unwrap();
            let c = t.constant(cw32.clone());
            let m = t.mul(y, c).unwrap();
            t.sum(m)
        },
        &move |p| {
            ref64::dot(
                &ref64::bn_train(&p[0], 4, 3, 4, &p[1], &p[2], eps as f64),
                &cwc,
            )
        },
        &mut failures,
    );

    // softmax cross-entropy
    let logits = Tensor::new(vec![4, 5], uniform(&mut rng, 20, -2.0, 2.0)).unwrap();
    let labels = vec![0usize, 3, 1, 4];
    let labels_c = labels.clone();
    fd_check(
        "softmax_cross_entropy",
        &[logits],
        &|t, ids| t.softmax_cross_entropy(ids[0], &labels).unwrap().0,
        &move |p| ref64::ce_mean(&p[0], 4, 5, &labels_c),
        &mut failures,
    );

    // --- full small-CNN loss -------------------------------------------
    cnn_fd_check(&mut failures);

    // --- straight-through identity ---------------------------------------
    let w = Tensor::new(vec![2, 3], vec![0.4, -0.7, 0.2, 0.9, -0.1, 0.6]).unwrap();
    for &bits in &[1u8, 2, 4] {
        let grad_dorefa = |use_round: bool| {
            let mut t = Tape::new();
            let wid = t.leaf(w.clone(), true);
            let qv = dorefa_graph_with(&mut t, wid, bits, DEFAULT_EPSILON, use_round).unwrap();
            let loss = t.sum(qv.q);
            t.backward(loss).unwrap().get(wid).unwrap()
        };
        if grad_dorefa(true).data() != grad_dorefa(false).data() {
            failures.push(format!("dorefa ste identity broken at b={}", bits));
        }
        let grad_statsq = |use_round: bool| {
            let mut t = Tape::new();
            let wid = t.leaf(w.clone(), true);
            let qv = statsq_graph_with(
                &mut t,
                wid,
                bits,
                ScalingAxes::PerLeadingDim,
                DEFAULT_EPSILON,
                use_round,
            )
            .unwrap();
            let loss = t.sum(qv.q);
            t.backward(loss).unwrap().get(wid).unwrap()
        };
        if grad_statsq(true).data() != grad_statsq(false).data() {
            failures.push(format!("statsq ste identity broken at b={}", bits));
        }
    }

    report(3, "gradient integrity", &failures);
}

/// Finite differences on an f64 reference of the whole small CNN (two convs +
/// BN + ReLU + pool + classifier) against the taped gradient at b = 32.
fn cnn_fd_check(failures: &mut Vec<String>) {
    let spec = ModelSpec {
        arch: Arch::SmallCnn {
            in_channels: 1,
            channels: vec![4, 5],
            classes: 3,
        },
        ranges: BitRanges::new(vec![32], vec![32]).unwrap(),
        policy: BnPolicy::SharedAll,
        // at 24 activation bits the quantizer is clip(x, 0, 1) up to an f32
        // ulp, so the f64 reference can model it as an exact clip
        quant: QuantSpec {
            activation_bits: 24,
            ..QuantSpec::default()
        },
        axes: ScalingAxes::PerLeadingDim,
        keep_first_last_fp: true,
        per_channel_correction: false,
    };
    let mut model = build_model(spec, 33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = Tensor::new(vec![4, 1, 8, 8], uniform(&mut rng, 256, -1.0, 1.0)).unwrap();
    let labels = vec![0usize, 1, 2, 0];
    let eps = 1e-5f32 as f64;

    // parameters in reference order: theta tensors, then (gamma, beta) per site
    let mut params: Vec<Vec<f64>> = model
        .theta
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    for bank in model.banks.values() {
        params.push(bank.gamma.data().iter().map(|&v| v as f64).collect());
        params.push(bank.beta.data().iter().map(|&v| v as f64).collect());
    }
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let reference = |p: &[Vec<f64>]| -> f64 {
        let (h1, _, _) = ref64::conv(&xd, 4, 1, 8, 8, &p[0], 4, 1);
        let h1 = ref64::relu(&ref64::bn_train(&h1, 4, 4, 64, &p[4], &p[5], eps));
        // fixed activation quantizer between conv blocks, clip at 32 bits
        let h1: Vec<f64> = h1.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let (h2, _, _) = ref64::conv(&h1, 4, 4, 8, 8, &p[1], 5, 2);
        let h2 = ref64::relu(&ref64::bn_train(&h2, 4, 5, 16, &p[6], &p[7], eps));
        let pooled = ref64::gap(&h2, 20, 16);
        let logits = ref64::matmul(&pooled, 4, 5, &p[2], 3);
        let logits = ref64::bias_add(&logits, 3, 1, &p[3]);
        ref64::ce_mean(&logits, 4, 3, &labels)
    };

    let opts = ForwardOpts {
        training: true,
        ..ForwardOpts::default()
    };
    let mut fwd = model.child_forward(32, &x, opts).unwrap();
    let (loss, _) = fwd.tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
    let grads = fwd.tape.backward(loss).unwrap();
    let mut grad_list: Vec<Vec<f32>> = fwd
        .theta_vars
        .iter()
        .map(|&v| grads.get_flat(v).unwrap().to_vec())
        .collect();
    for (_, gid, bid) in &fwd.bank_vars {
        grad_list.push(grads.get_flat(*gid).unwrap().to_vec());
        grad_list.push(grads.get_flat(*bid).unwrap().to_vec());
    }

    let fwd_loss = fwd.tape.value(loss).data()[0] as f64;
    let ref_loss = reference(&params);
    if (fwd_loss - ref_loss).abs() > 1e-4 {
        failures.push(format!(
            "cnn forward {} vs reference {}",
            fwd_loss, ref_loss
        ));
        return;
    }

    let h = 1e-5;
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let saved = params[i][j];
            params[i][j] = saved + h;
            let up = reference(&params);
            params[i][j] = saved - h;
            let down = reference(&params);
            params[i][j] = saved;
            let fd = (up - down) / (2.0 * h);
            let a = grad_list[i][j] as f64;
            let scale = fd.abs().max(a.abs());
            // absolute floor 1e-8: one part in ~1e5 of the gradient scale,
            // below the f32 tape's own rounding noise
            if scale > 1e-6 && (a - fd).abs() / scale > 1e-3 && (a - fd).abs() > 1e-8 {
                failures.push(format!(
                    "cnn param {} coord {}: autodiff {:.8e} vs fd {:.8e}",
                    i, j, a, fd
                ));
            }
        }
    }
}

// ---- criterion 4: Eq. 3 sampling ------------------------------------------

#[test]
fn criterion_4_sampling() {
    let mut failures = Vec::new();

    // tau = 1 proportionality
    let s = vec![0.2f32, 0.5, 1.0, 0.8];
    let p = sampling_probabilities(&s, 1.0).unwrap();
    let total: f64 = s.iter().map(|&v| v as f64).sum();
    for (i, &pi) in p.iter().enumerate() {
        if (pi - s[i] as f64 / total).abs() > 1e-12 {
            failures.push(format!("tau=1: p[{}] = {} off proportionality", i, pi));
        }
    }

    // worked sharpening example
    let p = sampling_probabilities(&[0.25, 1.0], 0.5).unwrap();
    if (p[0] - 1.0 / 17.0).abs() > 1e-9 || (p[1] - 16.0 / 17.0).abs() > 1e-9 {
        failures.push(format!("tau=0.5 example gave {:?}", p));
    }

    // inclusion frequencies vs enumeration of successive sampling without
    // replacement (the scheme the exponential race realizes)
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let raw = uniform(&mut rng, 10, 0.0, 1.0);
    let (norm, _) = normalize_scores(&raw, 1e-3).unwrap();
    let p = sampling_probabilities(&norm, 0.5).unwrap();
    let n = 10usize;
    let size = 3usize;
    let mut incl = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                let prob = p[i] * (p[j] / (1.0 - p[i])) * (p[k] / (1.0 - p[i] - p[j]));
                incl[i] += prob;
                incl[j] += prob;
                incl[k] += prob;
            }
        }
    }
    for v in incl.iter_mut() {
        *v /= 3.0; // each unordered draw was counted once per ordering slot
    }
    // each item's inclusion = sum over ordered triples containing it; the
    // triple loop above fixes i as the first pick, so totals already cover
    // all orderings — renormalize to the unordered inclusion probability
    let total: f64 = incl.iter().sum();
    for v in incl.iter_mut() {
        *v *= size as f64 / total;
    }

    let draws = 20_000usize;
    let mut freq = vec![0.0f64; n];
    for _ in 0..draws {
        for idx in sample_coreset(&p, size, &mut rng).unwrap() {
            freq[idx as usize] += 1.0;
        }
    }
    for v in freq.iter_mut() {
        *v /= draws as f64;
    }
    for i in 0..n {
        if (freq[i] - incl[i]).abs() > 0.02 {
            failures.push(format!(
                "item {}: empirical {:.4} vs oracle {:.4}",
                i, freq[i], incl[i]
            ));
        }
    }

    report(4, "Eq. 3 sampling", &failures);
}

// ---- criteria 5 + 6: blobs run — score distinctness and gradient alignment

fn blobs_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::Mlp {
            input_dim: 16,
            hidden: vec![32, 32],
            classes: 10,
        },
        ranges: BitRanges::new(vec![2, 8], vec![2, 8, 32]).unwrap(),
        policy: BnPolicy::HybridOneBitSeparate,
        quant: QuantSpec::default(),
        axes: ScalingAxes::PerLeadingDim,
        keep_first_last_fp: true,
        per_channel_correction: false,
    }
}

#[test]
fn criteria_5_and_6_blobs_run() {
    let data = synth_blobs(2000, 16, 10, 4.0, 505).unwrap();
    let cfg = TrainConfig {
        scheme: TrainScheme::BatchWise,
        epochs: 10,
        batch_size: 50,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_schedule: LrSchedule::CosineToZero,
        seed: 606,
    };

    // criterion 5: score distinctness
    let mut m = build_model(blobs_spec(), 606).unwrap();
    let batch_scores = score_batchwise_dynamics(&mut m, &data, &cfg, 10, 5).unwrap();
    let mut m = build_model(blobs_spec(), 606).unwrap();
    let bit_scores = score_bitwise_dynamics(&mut m, &data, &cfg, 10, 5).unwrap();
    let rho_batch = spearman(&batch_scores.scores[0], &batch_scores.scores[1]).unwrap();
    let rho_bit = spearman(&bit_scores.scores[0], &bit_scores.scores[1]).unwrap();
    let mut f5 = Vec::new();
    if rho_batch != 1.0 {
        f5.push(format!("batch-wise cross-bit spearman {} != 1.0", rho_batch));
    }
    if !(rho_bit < 0.999) {
        f5.push(format!("bit-wise cross-bit spearman {} not < 0.999", rho_bit));
    }
    report(5, "bit-wise score distinctness", &f5);

    // criterion 6: gradient alignment during a batch-wise training run
    let mut m = build_model(blobs_spec(), 606).unwrap();
    let layer_lens: Vec<usize> = m.theta.iter().map(|t| t.len()).collect();
    let layer_names = m.theta_names.clone();
    let mut angles: Vec<(usize, usize, Option<f64>, Vec<Option<f64>>)> = Vec::new();
    {
        let mut hook = |epoch: usize, step: usize, grads: &BTreeMap<u8, Vec<f32>>| {
            let g2 = &grads[&2];
            let g8 = &grads[&8];
            let overall = angle_degrees(g2, g8);
            let mut per_layer = Vec::new();
            let mut off = 0;
            for &len in &layer_lens {
                per_layer.push(angle_degrees(&g2[off..off + len], &g8[off..off + len]));
                off += len;
            }
            angles.push((epoch, step, overall, per_layer));
        };
        let opts = BatchwiseOpts {
            grad_hook: Some(&mut hook),
            ..BatchwiseOpts::default()
        };
        train_batchwise(&mut m, &data, &cfg, opts).unwrap();
    }

    // log per-step angles (overall + per layer) for external plotting
    let mut rows = Vec::new();
    for (i, (_, _, overall, per_layer)) in angles.iter().enumerate() {
        rows.push(AlignmentRow {
            step: i,
            layer: "overall".to_string(),
            angle: *overall,
        });
        for (name, a) in layer_names.iter().zip(per_layer) {
            rows.push(AlignmentRow {
                step: i,
                layer: name.clone(),
                angle: *a,
            });
        }
    }
    let csv = Path::new(env!("CARGO_TARGET_TMPDIR")).join("alignment.csv");
    write_alignment_csv(&rows, &csv).unwrap();

    let post_warmup: Vec<f64> = angles
        .iter()
        .filter(|(epoch, _, _, _)| *epoch >= 1)
        .filter_map(|(_, _, overall, _)| *overall)
        .collect();
    let mut f6 = Vec::new();
    if post_warmup.is_empty() {
        f6.push("no post-warmup angles recorded".to_string());
    } else {
        let below = post_warmup.iter().filter(|&&a| a < 90.0).count();
        let frac = below as f64 / post_warmup.len() as f64;
        let mut sorted = post_warmup.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        println!(
            "  criterion 6 detail: {:.1}% of post-warmup steps < 90 deg, median {:.1} deg, log {}",
            frac * 100.0,
            median,
            csv.display()
        );
        if frac < 0.95 {
            f6.push(format!(
                "only {:.1}% of post-warmup steps below 90 degrees",
                frac * 100.0
            ));
        }
    }
    report(6, "gradient alignment", &f6);
}

// ---- criterion 7: BN adaptation oracle -------------------------------------

#[test]
fn criterion_7_bn_adaptation() {
    let mut failures = Vec::new();
    let data = synth_blobs(256, 16, 10, 4.0, 707).unwrap();
    let mut model = build_model(blobs_spec(), 707).unwrap();
    let digest_before = model.theta_digest();

    // oracle first: exact two-pass mean/population variance of training-mode
    // pre-BN activations pooled over both bits (they share one bank),
    // captured over the same batch partition bn_adapt walks
    let bits = [2u8, 8];
    let sites = model.spec.arch.bn_sites();
    let mut sums = vec![BTreeMap::<usize, (f64, f64, f64)>::new(); sites]; // ch -> (n, sum, sumsq)
    for &b in &bits {
        let mut start = 0;
        while start < data.len() {
            let end = (start + 32).min(data.len());
            let idx: Vec<u32> = (start as u32..end as u32).collect();
            let (x, _) = data.gather(&idx);
            let opts = ForwardOpts {
                training: true,
                capture_prebn: true,
                ..ForwardOpts::default()
            };
            let fwd = model.child_forward(b, &x, opts).unwrap();
            for (site, act) in fwd.prebn.iter().enumerate() {
                let c = act.shape()[1];
                let rows = act.shape()[0];
                for ci in 0..c {
                    let entry = sums[site].entry(ci).or_insert((0.0, 0.0, 0.0));
                    for r in 0..rows {
                        let v = act.data()[r * c + ci] as f64;
                        entry.0 += 1.0;
                        entry.1 += v;
                        entry.2 += v * v;
                    }
                }
            }
            start = end;
        }
    }

    bn_adapt(&mut model, &data, &bits, 1, 32, true).unwrap();

    if model.theta_digest() != digest_before {
        failures.push("theta changed during bn_adapt".to_string());
    }
    for site in 0..sites {
        let bank = &model.banks[&(site, mbqnet::model::BankSlot::Shared)];
        for (&ci, &(n, s, ss)) in &sums[site] {
            let mean = s / n;
            let var = ss / n - mean * mean;
            let rm = bank.running_mean[ci] as f64;
            let rv = bank.running_var[ci] as f64;
            let mrel = (rm - mean).abs() / mean.abs().max(1e-3);
            let vrel = (rv - var).abs() / var.abs().max(1e-3);
            if mrel > 1e-5 || vrel > 1e-5 {
                failures.push(format!(
                    "site {} ch {}: mean rel {:.2e}, var rel {:.2e}",
                    site, ci, mrel, vrel
                ));
            }
        }
    }
    report(7, "BN adaptation oracle", &failures);
}

// ---- criteria 8 + 9: end-to-end efficiency and calibration-free range -----

// Pilot-run floor per trained bit for full-data training. The pilot run of
// the exact setup below measured 1.0000 / 0.9968 / 1.0000 / 1.0000 / 1.0000
// for b = 1 / 2 / 4 / 8 / 32; floors leave a 3-point margin.
const BASELINE_FLOOR: [(u8, f64); 5] = [
    (1, 0.97),
    (2, 0.96),
    (4, 0.97),
    (8, 0.97),
    (32, 0.97),
];

fn digits_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::SmallCnn {
            in_channels: 1,
            channels: vec![8, 12, 16, 16],
            classes: 10,
        },
        ranges: BitRanges::new(vec![1, 2, 4, 8, 32], vec![1, 2, 3, 4, 5, 6, 8, 32]).unwrap(),
        policy: BnPolicy::HybridOneBitSeparate,
        // StatsQ keeps all children linearly aligned with the raw-weight
        // full-precision child, which is what lets one set of shared BN
        // statistics cover the whole switchable range at this scale
        quant: QuantSpec {
            scheme: QuantScheme::StatsQ,
            ..QuantSpec::default()
        },
        axes: ScalingAxes::PerLeadingDim,
        keep_first_last_fp: true,
        per_channel_correction: false,
    }
}

fn digits_data() -> (Dataset, Dataset) {
    let full = synth_digits(12_500, 808).unwrap();
    let (train, val) = full.split_at(10_000, "train", "val").unwrap();
    let stats = train.compute_norm_stats();
    (train.normalized(&stats), val.normalized(&stats))
}

#[test]
fn criteria_8_and_9_end_to_end() {
    let (train, val) = digits_data();
    let cfg = TrainConfig {
        scheme: TrainScheme::BatchWise,
        epochs: 10,
        batch_size: 50,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_schedule: LrSchedule::CosineToZero,
        seed: 909,
    };
    let trained_bits = [1u8, 2, 4, 8, 32];

    // (a) full-data batch-wise baseline
    let mut steps_a = 0usize;
    let mut model_a = build_model(digits_spec(), 909).unwrap();
    {
        let mut hook = |_e: usize, _s: usize, _g: &BTreeMap<u8, Vec<f32>>| steps_a += 1;
        let opts = BatchwiseOpts {
            grad_hook: Some(&mut hook),
            ..BatchwiseOpts::default()
        };
        train_batchwise(&mut model_a, &train, &cfg, opts).unwrap();
    }
    // the pipeline ends with one BN-adaptation pass over the trained bits
    bn_adapt(&mut model_a, &train, &trained_bits, 1, 100, true).unwrap();
    let mut acc_a = BTreeMap::new();
    for &b in &trained_bits {
        acc_a.insert(b, evaluate(&mut model_a, &val, b, 100, true).unwrap().0);
    }

    // bit-wise score extraction + per-epoch coreset plan at p = 0.8
    let mut scorer = build_model(digits_spec(), 909).unwrap();
    let scores = score_bitwise_dynamics(&mut scorer, &train, &cfg, 5, 3).unwrap();
    let plan = build_plan(&scores, 0.8, 0.5, cfg.epochs, 909, None).unwrap();

    // (b) coreset training
    let mut steps_b = 0usize;
    let mut model_b = build_model(digits_spec(), 909).unwrap();
    {
        let mut hook = |_e: usize, _s: usize, _g: &BTreeMap<u8, Vec<f32>>| steps_b += 1;
        let opts = BatchwiseOpts {
            plan: Some(&plan),
            grad_hook: Some(&mut hook),
            ..BatchwiseOpts::default()
        };
        train_batchwise(&mut model_b, &train, &cfg, opts).unwrap();
    }
    bn_adapt(&mut model_b, &train, &trained_bits, 1, 100, true).unwrap();
    let mut acc_b = BTreeMap::new();
    for &b in &trained_bits {
        acc_b.insert(b, evaluate(&mut model_b, &val, b, 100, true).unwrap().0);
    }

    let mut f8 = Vec::new();
    println!("  criterion 8 detail: full-data accuracies {:?}", acc_a);
    println!("  criterion 8 detail: coreset   accuracies {:?}", acc_b);
    for (b, floor) in BASELINE_FLOOR {
        if acc_a[&b] < floor {
            f8.push(format!(
                "baseline at b={} reached {:.4}, floor {:.4}",
                b, acc_a[&b], floor
            ));
        }
    }
    for &b in &trained_bits {
        let budget = if b <= 2 { 0.04 } else { 0.02 };
        if acc_b[&b] < acc_a[&b] - budget {
            f8.push(format!(
                "coreset at b={}: {:.4} vs full {:.4} (budget {:.2} pts)",
                b,
                acc_b[&b],
                acc_a[&b],
                budget * 100.0
            ));
        }
    }
    let per_epoch_a = steps_a / cfg.epochs;
    let per_epoch_b = steps_b / cfg.epochs;
    if per_epoch_b * 5 != per_epoch_a {
        f8.push(format!(
            "step counts {} vs {} per epoch are not a 20% ratio",
            per_epoch_b, per_epoch_a
        ));
    }
    report(8, "end-to-end efficiency at desk scale", &f8);

    // criterion 9: calibration-free switchable range on model (b)
    let switchable = model_b.spec.ranges.switchable.clone();
    bn_adapt(&mut model_b, &train, &switchable, 1, 100, true).unwrap();
    let mut acc9 = BTreeMap::new();
    for &b in &switchable {
        acc9.insert(b, evaluate(&mut model_b, &val, b, 100, true).unwrap().0);
    }
    println!("  criterion 9 detail: post-adaptation accuracies {:?}", acc9);
    let mut f9 = Vec::new();
    // nearest trained bit; distance ties resolve to the larger bit-width
    for (untrained, nearest) in [(3u8, 4u8), (5, 4), (6, 8)] {
        let diff = (acc9[&untrained] - acc9[&nearest]).abs();
        if diff > 0.03 {
            f9.push(format!(
                "b={}: {:.4} vs nearest trained b={} {:.4} (gap {:.2} pts)",
                untrained,
                acc9[&untrained],
                nearest,
                acc9[&nearest],
                diff * 100.0
            ));
        }
    }
    report(9, "calibration-free switchable range", &f9);
}

// ---- criterion 10: subspace property ---------------------------------------

#[test]
fn criterion_10_subspace_property() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for inst in 0..100 {
        let x = Tensor::new(vec![3, 8], uniform(&mut rng, 24, -1.0, 1.0)).unwrap();
        let w = Tensor::new(vec![8, 4], uniform(&mut rng, 32, -1.0, 1.0)).unwrap();
        let labels = [
            rng.gen_range(0..4usize),
            rng.gen_range(0..4),
            rng.gen_range(0..4),
        ];
        let r = subspace_residual(&x, &labels, &w).unwrap();
        if r >= 1e-5 {
            failures.push(format!("instance {}: residual {:.3e}", inst, r));
        }
    }
    report(10, "gradient subspace property", &failures);
}

// ---- criterion 11: CLI determinism -----------------------------------------

#[test]
fn criterion_11_cli_determinism() {
    let mut failures: Vec<String> = Vec::new();
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-det");
    std::fs::create_dir_all(&tmp).unwrap();
    let bin = env!("CARGO_BIN_EXE_mbqnet");

    // identical config (same output directory) run twice end to end
    let out = tmp.join("out");
    let cfg_path = tmp.join("run.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "seed = 13\noutput_dir = \"{}\"\n\n\
             [dataset]\nkind = \"synth-blobs\"\nn = 300\ndim = 12\nclasses = 4\n\n\
             [model]\narch = \"mlp\"\ninput_dim = 12\nhidden = [16, 16]\nclasses = 4\n\
             trained_bits = [2, 8]\nswitchable_bits = [2, 8, 32]\n\n\
             [train]\nepochs = 3\nbatch_size = 30\nlr = 0.05\n\n\
             [scoring]\nepochs = 3\nwindow = 2\n",
            out.display()
        ),
    )
    .unwrap();

    let mut artifacts: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in 0..2 {
        for sub in ["score", "plan", "train"] {
            let mut cmd = Command::new(bin);
            cmd.arg("--config").arg(&cfg_path).arg(sub);
            if sub == "train" {
                cmd.arg("--plan").arg(out.join("coreset.plan"));
            }
            let status = cmd.status().unwrap();
            if !status.success() {
                failures.push(format!("run {}: {} exited {}", run, sub, status));
            }
        }
        artifacts.push(
            ["scores.scores", "coreset.plan", "model.ckpt"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).unwrap_or_default())
                .collect(),
        );
    }
    for (i, name) in ["scores.scores", "coreset.plan", "model.ckpt"]
        .iter()
        .enumerate()
    {
        if artifacts[0][i].is_empty() || artifacts[0][i] != artifacts[1][i] {
            failures.push(format!("{} differs between identical runs", name));
        }
    }
    report(11, "pipeline determinism", &failures);
}
