//! Training schedules: the batch-wise joint objective, the bit-wise scheme
//! used for score extraction, final-stage BN adaptation, and the
//! calibration baseline.

use crate::coreset::CoresetPlan;
use crate::data::{derive_seed, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{BankKey, BankSlot, BnPolicy, ChildForward, ForwardOpts, MultiBitModel};
use crate::tape::Gradients;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScheme {
    BatchWise,
    BitWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    CosineToZero,
    StepDecay { milestones: Vec<usize>, gamma: f32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: TrainScheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: TrainScheme::BatchWise,
            epochs: 30,
            batch_size: 50,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::CosineToZero,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".to_string()));
        }
        Ok(())
    }
}

/// One metrics line; field order is the on-disk JSONL order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub bit: u8,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
    pub samples_seen: u64,
}

pub fn write_metrics_jsonl(records: &[MetricsRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format(format!("metrics serialization: {}", e)))?;
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

/// Per-sample event delivered to score probes: err = softmax(logits) −
/// onehot(y), from the same forward that produced the update.
pub struct ProbeEvent<'a> {
    pub epoch: usize,
    pub bit: u8,
    pub index: u32,
    pub err: &'a [f32],
    pub correct: bool,
    pub features: Option<&'a [f32]>,
}

pub fn schedule_lr(cfg: &TrainConfig, epoch: usize) -> f32 {
    match &cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::CosineToZero => {
            let t = epoch as f64 / cfg.epochs as f64;
            (cfg.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
        }
        LrSchedule::StepDecay { milestones, gamma } => {
            let k = milestones.iter().filter(|&&m| m <= epoch).count();
            cfg.lr * gamma.powi(k as i32)
        }
    }
}

/// Gradient accumulator across the per-bit backward passes of one step.
pub struct GradAccum {
    pub theta: Vec<Vec<f32>>,
    pub banks: BTreeMap<BankKey, (Vec<f32>, Vec<f32>)>,
}

impl GradAccum {
    pub fn new(model: &MultiBitModel) -> Self {
        GradAccum {
            theta: model.theta.iter().map(|t| vec![0.0; t.len()]).collect(),
            banks: BTreeMap::new(),
        }
    }

    /// Add this forward's gradients; returns the flattened theta gradient of
    /// the single pass when `flat` is requested (for diagnostics hooks).
    pub fn absorb(&mut self, fwd: &ChildForward, grads: &Gradients, flat: bool) -> Option<Vec<f32>> {
        let mut flattened = if flat { Some(Vec::new()) } else { None };
        for (i, &v) in fwd.theta_vars.iter().enumerate() {
            if let Some(g) = grads.get_flat(v) {
                for (a, &b) in self.theta[i].iter_mut().zip(g) {
                    *a += b;
                }
                if let Some(f) = flattened.as_mut() {
                    f.extend_from_slice(g);
                }
            } else if let Some(f) = flattened.as_mut() {
                f.extend(std::iter::repeat(0.0).take(self.theta[i].len()));
            }
        }
        for &(key, gv, bv) in &fwd.bank_vars {
            let entry = self.banks.entry(key).or_insert_with(|| {
                let c = fwd.tape.value(gv).len();
                (vec![0.0; c], vec![0.0; c])
            });
            if let Some(g) = grads.get_flat(gv) {
                for (a, &b) in entry.0.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if let Some(g) = grads.get_flat(bv) {
                for (a, &b) in entry.1.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        flattened
    }
}

/// SGD with momentum; weight decay applies to theta only, never to BN affine.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    vel_theta: Vec<Vec<f32>>,
    vel_banks: BTreeMap<BankKey, (Vec<f32>, Vec<f32>)>,
}

impl Sgd {
    pub fn new(model: &MultiBitModel, cfg: &TrainConfig) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            vel_theta: model.theta.iter().map(|t| vec![0.0; t.len()]).collect(),
            vel_banks: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut MultiBitModel, acc: &GradAccum, lr: f32) {
        self.step_filtered(model, acc, lr, true);
    }

    /// `update_theta = false` freezes weights (calibration baseline).
    pub fn step_filtered(
        &mut self,
        model: &mut MultiBitModel,
        acc: &GradAccum,
        lr: f32,
        update_theta: bool,
    ) {
        if update_theta {
            for (i, g) in acc.theta.iter().enumerate() {
                let w = model.theta[i].data_mut();
                let v = &mut self.vel_theta[i];
                for j in 0..w.len() {
                    let grad = g[j] + self.weight_decay * w[j];
                    v[j] = self.momentum * v[j] + grad;
                    w[j] -= lr * v[j];
                }
            }
        }
        for (key, (gg, gb)) in &acc.banks {
            let bank = model.banks.get_mut(key).expect("bank for gradient");
            let (vg, vb) = self
                .vel_banks
                .entry(*key)
                .or_insert_with(|| (vec![0.0; gg.len()], vec![0.0; gb.len()]));
            let gd = bank.gamma.data_mut();
            for j in 0..gd.len() {
                vg[j] = self.momentum * vg[j] + gg[j];
                gd[j] -= lr * vg[j];
            }
            let bd = bank.beta.data_mut();
            for j in 0..bd.len() {
                vb[j] = self.momentum * vb[j] + gb[j];
                bd[j] -= lr * vb[j];
            }
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&probs.data()[i * k..(i + 1) * k]) == y)
        .count()
}

/// Joint objective: sum of per-bit cross-entropies of the same batch, in
/// inference mode. Returns (total, per-bit components).
pub fn joint_loss(
    model: &mut MultiBitModel,
    x: &Tensor,
    labels: &[usize],
    bits: &[u8],
) -> Result<(f64, Vec<(u8, f64)>)> {
    if bits.is_empty() {
        return Err(Error::invalid("joint_loss over an empty bit set".to_string()));
    }
    for &b in bits {
        if !model.spec.ranges.trained.contains(&b) {
            return Err(Error::invalid(format!(
                "bit {} not in trained range {:?}",
                b, model.spec.ranges.trained
            )));
        }
    }
    let mut parts = Vec::with_capacity(bits.len());
    let mut total = 0.0f64;
    for &b in bits {
        let mut fwd = model.child_forward(b, x, ForwardOpts::default())?;
        let (loss, _) = fwd.tape.softmax_cross_entropy(fwd.logits, labels)?;
        let v = fwd.tape.value(loss).data()[0] as f64;
        parts.push((b, v));
        total += v;
    }
    Ok((total, parts))
}

/// Options for the batch-wise loop.
pub struct BatchwiseOpts<'a> {
    pub plan: Option<&'a CoresetPlan>,
    pub bias_correction: bool,
    pub eval_data: Option<&'a Dataset>,
    /// Called once per step with flattened per-bit theta gradients.
    pub grad_hook: Option<&'a mut dyn FnMut(usize, usize, &BTreeMap<u8, Vec<f32>>)>,
    pub probe: Option<&'a mut dyn FnMut(ProbeEvent)>,
}

impl Default for BatchwiseOpts<'_> {
    fn default() -> Self {
        BatchwiseOpts {
            plan: None,
            bias_correction: true,
            eval_data: None,
            grad_hook: None,
            probe: None,
        }
    }
}

struct BitCounters {
    loss: f64,
    correct: usize,
    seen: usize,
}

fn cycled_batch(stream: &[u32], step: usize, batch: usize, width: usize) -> Vec<u32> {
    (0..width)
        .map(|j| stream[(step * batch + j) % stream.len()])
        .collect()
}

/// Algorithm-1 style training: per batch, forward/backward at every trained
/// bit, then one SGD update from the summed loss. With a `CoresetPlan`, each
/// bit draws from its own shuffled per-epoch coreset stream; unequal streams
/// are cycled so every bit performs the same number of steps.
pub fn train_batchwise(
    model: &mut MultiBitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut opts: BatchwiseOpts,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".to_string()));
    }
    let bits = model.spec.ranges.trained.clone();
    let mut sgd = Sgd::new(model, cfg);
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = schedule_lr(cfg, epoch);
        let mut streams: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
        if let Some(plan) = opts.plan {
            for &b in &bits {
                let mut idx = plan.set(b, epoch)?.to_vec();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[1, epoch as u64, b as u64],
                ));
                let order = shuffled_indices(idx.len(), &mut rng);
                idx = order.iter().map(|&i| idx[i as usize]).collect();
                streams.insert(b, idx);
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
            let shared = shuffled_indices(data.len(), &mut rng);
            for &b in &bits {
                streams.insert(b, shared.clone());
            }
        }
        let max_len = streams.values().map(|s| s.len()).max().unwrap();
        let steps = (max_len + cfg.batch_size - 1) / cfg.batch_size;
        let mut counters: BTreeMap<u8, BitCounters> = bits
            .iter()
            .map(|&b| {
                (
                    b,
                    BitCounters {
                        loss: 0.0,
                        correct: 0,
                        seen: 0,
                    },
                )
            })
            .collect();
        for step in 0..steps {
            let width = cfg.batch_size.min(max_len - step * cfg.batch_size);
            let mut acc = GradAccum::new(model);
            let mut per_bit_flat: BTreeMap<u8, Vec<f32>> = BTreeMap::new();
            for &b in &bits {
                let idx = cycled_batch(&streams[&b], step, cfg.batch_size, width);
                let (x, labels) = data.gather(&idx);
                let fwd_opts = ForwardOpts {
                    bias_correction: opts.bias_correction,
                    training: true,
                    ..ForwardOpts::default()
                };
                let mut fwd = model.child_forward(b, &x, fwd_opts)?;
                let (loss, probs) = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
                let grads = fwd.tape.backward(loss)?;
                let flat = acc.absorb(&fwd, &grads, opts.grad_hook.is_some());
                if let Some(f) = flat {
                    per_bit_flat.insert(b, f);
                }
                let c = counters.get_mut(&b).unwrap();
                c.loss += fwd.tape.value(loss).data()[0] as f64 * labels.len() as f64;
                c.correct += count_correct(&probs, &labels);
                c.seen += labels.len();
                if let Some(probe) = opts.probe.as_mut() {
                    let k = probs.shape()[1];
                    for (row, (&i, &y)) in idx.iter().zip(&labels).enumerate() {
                        let p = &probs.data()[row * k..(row + 1) * k];
                        let mut err: Vec<f32> = p.to_vec();
                        err[y] -= 1.0;
                        probe(ProbeEvent {
                            epoch,
                            bit: b,
                            index: i,
                            err: &err,
                            correct: argmax(p) == y,
                            features: None,
                        });
                    }
                }
            }
            sgd.step(model, &acc, lr);
            if let Some(hook) = opts.grad_hook.as_mut() {
                hook(epoch, step, &per_bit_flat);
            }
        }
        let wall = t0.elapsed().as_secs_f64();
        for &b in &bits {
            let c = &counters[&b];
            records.push(MetricsRecord {
                epoch,
                bit: b,
                split: "train".to_string(),
                loss: c.loss / c.seen as f64,
                accuracy: c.correct as f64 / c.seen as f64,
                wall_seconds: wall,
                samples_seen: c.seen as u64,
            });
        }
        if let Some(eval) = opts.eval_data {
            for &b in &bits {
                let t1 = Instant::now();
                let (acc_v, loss_v) =
                    evaluate(model, eval, b, cfg.batch_size, opts.bias_correction)?;
                records.push(MetricsRecord {
                    epoch,
                    bit: b,
                    split: "test".to_string(),
                    loss: loss_v,
                    accuracy: acc_v,
                    wall_seconds: t1.elapsed().as_secs_f64(),
                    samples_seen: eval.len() as u64,
                });
            }
        }
    }
    Ok(records)
}

/// Options for the bit-wise loop.
pub struct BitwiseOpts<'a> {
    pub bias_correction: bool,
    pub capture_features: bool,
    pub probe: Option<&'a mut dyn FnMut(ProbeEvent)>,
}

impl Default for BitwiseOpts<'_> {
    fn default() -> Self {
        BitwiseOpts {
            bias_correction: true,
            capture_features: false,
            probe: None,
        }
    }
}

/// Algorithm-2 style training: for each epoch, each trained bit in ascending
/// order completes a full data pass with updates from its loss alone. Used
/// for importance-score extraction; the probe fires once per sample per
/// (epoch, bit).
pub fn train_bitwise(
    model: &mut MultiBitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut opts: BitwiseOpts,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".to_string()));
    }
    let bits = model.spec.ranges.trained.clone();
    let mut sgd = Sgd::new(model, cfg);
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        let stream = shuffled_indices(data.len(), &mut rng);
        let steps = (stream.len() + cfg.batch_size - 1) / cfg.batch_size;
        for &b in &bits {
            let t0 = Instant::now();
            let mut c = BitCounters {
                loss: 0.0,
                correct: 0,
                seen: 0,
            };
            for step in 0..steps {
                let width = cfg.batch_size.min(stream.len() - step * cfg.batch_size);
                let idx = cycled_batch(&stream, step, cfg.batch_size, width);
                let (x, labels) = data.gather(&idx);
                let fwd_opts = ForwardOpts {
                    bias_correction: opts.bias_correction,
                    training: true,
                    capture_features: opts.capture_features,
                    ..ForwardOpts::default()
                };
                let mut fwd = model.child_forward(b, &x, fwd_opts)?;
                let (loss, probs) = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
                let grads = fwd.tape.backward(loss)?;
                let mut acc = GradAccum::new(model);
                acc.absorb(&fwd, &grads, false);
                c.loss += fwd.tape.value(loss).data()[0] as f64 * labels.len() as f64;
                c.correct += count_correct(&probs, &labels);
                c.seen += labels.len();
                if let Some(probe) = opts.probe.as_mut() {
                    let k = probs.shape()[1];
                    let feats = fwd.features.as_ref();
                    for (row, (&i, &y)) in idx.iter().zip(&labels).enumerate() {
                        let p = &probs.data()[row * k..(row + 1) * k];
                        let mut err: Vec<f32> = p.to_vec();
                        err[y] -= 1.0;
                        let frow = feats.map(|f| {
                            let fdim = f.shape()[1];
                            &f.data()[row * fdim..(row + 1) * fdim]
                        });
                        probe(ProbeEvent {
                            epoch,
                            bit: b,
                            index: i,
                            err: &err,
                            correct: argmax(p) == y,
                            features: frow,
                        });
                    }
                }
                sgd.step(model, &acc, lr);
            }
            records.push(MetricsRecord {
                epoch,
                bit: b,
                split: "train".to_string(),
                loss: c.loss / c.seen as f64,
                accuracy: c.correct as f64 / c.seen as f64,
                wall_seconds: t0.elapsed().as_secs_f64(),
                samples_seen: c.seen as u64,
            });
        }
    }
    Ok(records)
}

/// Inference-mode evaluation: top-1 accuracy and mean loss at bit `b`.
pub fn evaluate(
    model: &mut MultiBitModel,
    data: &Dataset,
    b: u8,
    batch_size: usize,
    bias_correction: bool,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".to_string()));
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<u32> = (start as u32..end as u32).collect();
        let (x, labels) = data.gather(&idx);
        let fwd_opts = ForwardOpts {
            bias_correction,
            ..ForwardOpts::default()
        };
        let mut fwd = model.child_forward(b, &x, fwd_opts)?;
        let (loss, probs) = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
        loss_sum += fwd.tape.value(loss).data()[0] as f64 * labels.len() as f64;
        correct += count_correct(&probs, &labels);
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

#[derive(Debug, Clone, Copy, Default)]
struct Chan {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Chan {
    /// Chan's parallel mean/variance merge.
    fn merge(self, o: Chan) -> Chan {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Chan {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }

    fn from_values(vals: impl Iterator<Item = f64>) -> Chan {
        let mut n = 0.0f64;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        for v in vals {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        Chan { n, mean, m2 }
    }
}

fn prebn_channel_agg(t: &Tensor, aggs: &mut [Chan]) {
    let (c, inner) = match t.shape() {
        [_, c] => (*c, 1),
        [_, c, h, w] => (*c, h * w),
        s => panic!("unsupported pre-BN shape {:?}", s),
    };
    let n = t.shape()[0];
    let per = c * inner;
    for (ci, agg) in aggs.iter_mut().enumerate().take(c) {
        let block = Chan::from_values((0..n).flat_map(|ni| {
            t.data()[ni * per + ci * inner..ni * per + (ci + 1) * inner]
                .iter()
                .map(|&v| v as f64)
        }));
        *agg = agg.merge(block);
    }
}

/// Final-stage BN adaptation: recompute each resolved bank's running
/// mean/variance from forward passes over the adaptation set using exact
/// streaming aggregation. Affine parameters and theta are untouched. Bits
/// resolving to the same bank pool their activations.
pub fn bn_adapt(
    model: &mut MultiBitModel,
    data: &Dataset,
    bits: &[u8],
    passes: usize,
    batch_size: usize,
    bias_correction: bool,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty adaptation set".to_string()));
    }
    if bits.is_empty() || passes == 0 {
        return Err(Error::invalid("bn_adapt needs bits and passes >= 1".to_string()));
    }
    let sites = model.spec.arch.bn_sites();
    for _ in 0..passes {
        let mut groups: BTreeMap<BankSlot, Vec<u8>> = BTreeMap::new();
        for &b in bits {
            groups.entry(model.resolve_slot(b)).or_default().push(b);
        }
        for (slot, group_bits) in groups {
            // per-site per-channel aggregates pooled over all bits in the group
            let mut aggs: Vec<Vec<Chan>> = (0..sites)
                .map(|s| {
                    let c = model.banks[&(s, slot)].gamma.len();
                    vec![Chan::default(); c]
                })
                .collect();
            for &b in &group_bits {
                let n = data.len();
                let mut start = 0usize;
                while start < n {
                    let end = (start + batch_size).min(n);
                    let idx: Vec<u32> = (start as u32..end as u32).collect();
                    let (x, _) = data.gather(&idx);
                    // Capture in training mode so downstream sites are
                    // normalized by the batch statistics actually implied by
                    // the activations being captured; eval-mode capture would
                    // condition every site on the stale running stats and the
                    // per-site aggregates would be mutually inconsistent.
                    let fwd_opts = ForwardOpts {
                        training: true,
                        bias_correction,
                        capture_prebn: true,
                        ..ForwardOpts::default()
                    };
                    let fwd = model.child_forward(b, &x, fwd_opts)?;
                    for (s, t) in fwd.prebn.iter().enumerate() {
                        prebn_channel_agg(t, &mut aggs[s]);
                    }
                    start = end;
                }
            }
            for (s, site_aggs) in aggs.iter().enumerate() {
                let bank = model.banks.get_mut(&(s, slot)).unwrap();
                for (ci, agg) in site_aggs.iter().enumerate() {
                    bank.running_mean[ci] = agg.mean as f32;
                    bank.running_var[ci] = (agg.m2 / agg.n).max(0.0) as f32;
                }
            }
        }
    }
    Ok(())
}

/// Any-Precision-style calibration baseline: theta frozen, only the BN banks
/// of the listed bits train, for ceil(epochs / 3) epochs. Requires the
/// per-bit BN policy.
pub fn calibrate_baseline(
    model: &mut MultiBitModel,
    data: &Dataset,
    bits: &[u8],
    cfg: &TrainConfig,
    bias_correction: bool,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if model.spec.policy != BnPolicy::PerBit {
        return Err(Error::invalid(
            "calibration baseline requires the per-bit BN policy".to_string(),
        ));
    }
    for &b in bits {
        if !model.spec.ranges.contains_switchable(b) {
            return Err(Error::invalid(format!(
                "calibration bit {} not in switchable range {:?}",
                b, model.spec.ranges.switchable
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Data("empty calibration set".to_string()));
    }
    let cal_epochs = (cfg.epochs + 2) / 3;
    let cal_cfg = TrainConfig {
        epochs: cal_epochs,
        ..cfg.clone()
    };
    let mut sgd = Sgd::new(model, &cal_cfg);
    let mut records = Vec::new();
    for epoch in 0..cal_epochs {
        let lr = schedule_lr(&cal_cfg, epoch);
        for &b in bits {
            let t0 = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[4, epoch as u64, b as u64],
            ));
            let stream = shuffled_indices(data.len(), &mut rng);
            let steps = (stream.len() + cfg.batch_size - 1) / cfg.batch_size;
            let mut c = BitCounters {
                loss: 0.0,
                correct: 0,
                seen: 0,
            };
            for step in 0..steps {
                let width = cfg.batch_size.min(stream.len() - step * cfg.batch_size);
                let idx = cycled_batch(&stream, step, cfg.batch_size, width);
                let (x, labels) = data.gather(&idx);
                let fwd_opts = ForwardOpts {
                    bias_correction,
                    training: true,
                    ..ForwardOpts::default()
                };
                let mut fwd = model.child_forward(b, &x, fwd_opts)?;
                let (loss, probs) = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
                let grads = fwd.tape.backward(loss)?;
                let mut acc = GradAccum::new(model);
                acc.absorb(&fwd, &grads, false);
                c.loss += fwd.tape.value(loss).data()[0] as f64 * labels.len() as f64;
                c.correct += count_correct(&probs, &labels);
                c.seen += labels.len();
                sgd.step_filtered(model, &acc, lr, false);
            }
            records.push(MetricsRecord {
                epoch,
                bit: b,
                split: "calibrate".to_string(),
                loss: c.loss / c.seen as f64,
                accuracy: c.correct as f64 / c.seen as f64,
                wall_seconds: t0.elapsed().as_secs_f64(),
                samples_seen: c.seen as u64,
            });
        }
    }
    Ok(records)
}
