//! Multi-bit network container: one shared parameter store producing
//! quantized child views per bit-width, with configurable batch-norm banking.

use crate::error::{Error, Result};
use crate::quant::{
    bias_correct_graph, dorefa_activation_graph, dorefa_graph, statsq_graph, QuantScheme,
    QuantSpec, ScalingAxes,
};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const FULL_PRECISION_BITS: u8 = 32;

/// Supported architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Arch {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// 3x3 conv stack (first conv stride 1, the rest stride 2), global average
    /// pooling, one linear classifier.
    SmallCnn {
        in_channels: usize,
        channels: Vec<usize>,
        classes: usize,
    },
}

impl Arch {
    pub fn id(&self) -> String {
        match self {
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => format!(
                "mlp-{}-{}-{}",
                input_dim,
                hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
                classes
            ),
            Arch::SmallCnn {
                in_channels,
                channels,
                classes,
            } => format!(
                "smallcnn-{}-{}-{}",
                in_channels,
                channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
                classes
            ),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { classes, .. } | Arch::SmallCnn { classes, .. } => *classes,
        }
    }

    /// Number of batch-norm sites (one after every non-final layer).
    pub fn bn_sites(&self) -> usize {
        match self {
            Arch::Mlp { hidden, .. } => hidden.len(),
            Arch::SmallCnn { channels, .. } => channels.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => *input_dim >= 1 && hidden.len() >= 1 && hidden.iter().all(|&h| h >= 1) && *classes >= 2,
            Arch::SmallCnn {
                in_channels,
                channels,
                classes,
            } => *in_channels >= 1 && channels.len() >= 1 && channels.iter().all(|&c| c >= 1) && *classes >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("unsupported architecture {:?}", self)))
        }
    }
}

/// Trained bit-widths B and the switchable superset R.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitRanges {
    pub trained: Vec<u8>,
    pub switchable: Vec<u8>,
}

impl BitRanges {
    pub fn new(mut trained: Vec<u8>, mut switchable: Vec<u8>) -> Result<Self> {
        trained.sort_unstable();
        trained.dedup();
        switchable.sort_unstable();
        switchable.dedup();
        let r = BitRanges {
            trained,
            switchable,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trained.is_empty() {
            return Err(Error::invalid("trained bit set is empty".to_string()));
        }
        for &b in self.trained.iter().chain(&self.switchable) {
            if !(1..=32).contains(&b) {
                return Err(Error::invalid(format!("bit-width {} outside [1, 32]", b)));
            }
        }
        for &b in &self.trained {
            if !self.switchable.contains(&b) {
                return Err(Error::invalid(format!(
                    "trained bit {} not in switchable range {:?}",
                    b, self.switchable
                )));
            }
        }
        Ok(())
    }

    pub fn contains_switchable(&self, b: u8) -> bool {
        self.switchable.contains(&b)
    }
}

/// Batch-norm banking policy across bit-widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnPolicy {
    SharedAll,
    PerBit,
    /// One shared bank plus exactly one extra bank used iff b = 1.
    HybridOneBitSeparate,
}

/// Which bank a bit-width resolves to at one BN site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankSlot {
    Shared,
    PerBit(u8),
    OneBit,
}

impl BankSlot {
    pub fn tag(&self) -> String {
        match self {
            BankSlot::Shared => "shared".to_string(),
            BankSlot::PerBit(b) => format!("bit{}", b),
            BankSlot::OneBit => "onebit".to_string(),
        }
    }
}

/// (BN site index, bank slot).
pub type BankKey = (usize, BankSlot);

/// One batch-norm bank: affine parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct BnBank {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnBank {
    fn new(channels: usize) -> Self {
        BnBank {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Everything that defines a model besides the learned values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub ranges: BitRanges,
    pub policy: BnPolicy,
    pub quant: QuantSpec,
    pub axes: ScalingAxes,
    pub keep_first_last_fp: bool,
    pub per_channel_correction: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.ranges.validate()?;
        self.quant.validate()
    }
}

/// Shared-parameter multi-bit model. `theta` is the unique trainable weight
/// store; child views per bit-width own no parameters.
#[derive(Debug, Clone)]
pub struct MultiBitModel {
    pub spec: ModelSpec,
    pub theta: Vec<Tensor>,
    pub theta_names: Vec<String>,
    pub banks: BTreeMap<BankKey, BnBank>,
}

/// Flags controlling a child forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub bias_correction: bool,
    pub training: bool,
    pub capture_prebn: bool,
    pub capture_features: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            bias_correction: true,
            training: false,
            capture_prebn: false,
            capture_features: false,
        }
    }
}

/// A child forward pass: the tape plus handles needed for backprop and
/// diagnostics.
pub struct ChildForward {
    pub tape: Tape,
    pub logits: VarId,
    /// One VarId per theta tensor, in model order.
    pub theta_vars: Vec<VarId>,
    /// (bank key, gamma var, beta var) for every BN site touched.
    pub bank_vars: Vec<(BankKey, VarId, VarId)>,
    /// Pre-BN activations per site, when requested.
    pub prebn: Vec<Tensor>,
    /// Penultimate features [N, F], when requested.
    pub features: Option<Tensor>,
    /// True when any quantizer hit a degenerate-statistics guard.
    pub guard_flagged: bool,
}

pub fn build_model(spec: ModelSpec, seed: u64) -> Result<MultiBitModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::new();
    let mut names = Vec::new();
    match &spec.arch {
        Arch::Mlp {
            input_dim,
            hidden,
            classes,
        } => {
            let mut dims = vec![*input_dim];
            dims.extend(hidden);
            dims.push(*classes);
            for i in 0..dims.len() - 1 {
                theta.push(Tensor::he_uniform(
                    vec![dims[i], dims[i + 1]],
                    dims[i],
                    &mut rng,
                ));
                names.push(format!("layer{}.weight", i));
            }
            theta.push(Tensor::zeros(vec![*classes]));
            names.push(format!("layer{}.bias", dims.len() - 2));
        }
        Arch::SmallCnn {
            in_channels,
            channels,
            classes,
        } => {
            let mut ic = *in_channels;
            for (i, &oc) in channels.iter().enumerate() {
                theta.push(Tensor::he_uniform(vec![oc, ic, 3, 3], ic * 9, &mut rng));
                names.push(format!("conv{}.weight", i));
                ic = oc;
            }
            theta.push(Tensor::he_uniform(vec![ic, *classes], ic, &mut rng));
            names.push("fc.weight".to_string());
            theta.push(Tensor::zeros(vec![*classes]));
            names.push("fc.bias".to_string());
        }
    }
    let mut banks = BTreeMap::new();
    let widths = bn_site_widths(&spec.arch);
    for (site, &c) in widths.iter().enumerate() {
        for slot in policy_slots(spec.policy, &spec.ranges) {
            banks.insert((site, slot), BnBank::new(c));
        }
    }
    Ok(MultiBitModel {
        spec,
        theta,
        theta_names: names,
        banks,
    })
}

fn bn_site_widths(arch: &Arch) -> Vec<usize> {
    match arch {
        Arch::Mlp { hidden, .. } => hidden.clone(),
        Arch::SmallCnn { channels, .. } => channels.clone(),
    }
}

fn policy_slots(policy: BnPolicy, ranges: &BitRanges) -> Vec<BankSlot> {
    match policy {
        BnPolicy::SharedAll => vec![BankSlot::Shared],
        BnPolicy::PerBit => ranges.switchable.iter().map(|&b| BankSlot::PerBit(b)).collect(),
        BnPolicy::HybridOneBitSeparate => {
            let mut slots = vec![BankSlot::Shared];
            if ranges.switchable.contains(&1) {
                slots.push(BankSlot::OneBit);
            }
            slots
        }
    }
}

impl MultiBitModel {
    /// The bank slot a bit-width resolves to under the active policy.
    pub fn resolve_slot(&self, b: u8) -> BankSlot {
        match self.spec.policy {
            BnPolicy::SharedAll => BankSlot::Shared,
            BnPolicy::PerBit => BankSlot::PerBit(b),
            BnPolicy::HybridOneBitSeparate => {
                if b == 1 {
                    BankSlot::OneBit
                } else {
                    BankSlot::Shared
                }
            }
        }
    }

    fn check_bit(&self, b: u8) -> Result<()> {
        if !self.spec.ranges.contains_switchable(b) {
            return Err(Error::invalid(format!(
                "bit-width {} not in switchable range {:?}",
                b, self.spec.ranges.switchable
            )));
        }
        Ok(())
    }

    /// Whether theta tensor `i` is quantized when running below full precision.
    /// Biases are never quantized; first and last weights follow the flag.
    fn quantized_param(&self, i: usize) -> bool {
        if self.theta[i].rank() < 2 {
            return false;
        }
        if !self.spec.keep_first_last_fp {
            return true;
        }
        let weight_idx: Vec<usize> = (0..self.theta.len())
            .filter(|&j| self.theta[j].rank() >= 2)
            .collect();
        let first = *weight_idx.first().unwrap();
        let last = *weight_idx.last().unwrap();
        i != first && i != last
    }

    /// Record theta leaf `i` on the tape, quantized at `b` when applicable.
    fn weight_var(
        &self,
        tape: &mut Tape,
        i: usize,
        leaf: VarId,
        b: u8,
        opts: &ForwardOpts,
        guard: &mut bool,
    ) -> Result<VarId> {
        if b == FULL_PRECISION_BITS || !self.quantized_param(i) {
            return Ok(leaf);
        }
        let q = &self.spec.quant;
        let qv = match q.scheme {
            QuantScheme::DoReFa => dorefa_graph(tape, leaf, b, q.epsilon)?,
            QuantScheme::StatsQ => statsq_graph(tape, leaf, b, self.spec.axes, q.epsilon)?,
        };
        *guard |= qv.guard_flagged;
        if opts.bias_correction {
            let (corrected, flagged) = bias_correct_graph(
                tape,
                qv.q,
                leaf,
                q.epsilon,
                self.spec.per_channel_correction,
            )?;
            *guard |= flagged;
            Ok(corrected)
        } else {
            Ok(qv.q)
        }
    }

    fn act_quant(&self, tape: &mut Tape, x: VarId, _b: u8, _opts: &ForwardOpts) -> Result<VarId> {
        // The activation bit-width is fixed for the whole model and applied at
        // every weight bit-width, including b = 32: children differ only in
        // their weights, which is what lets one set of BN statistics serve
        // the entire switchable range.
        dorefa_activation_graph(tape, x, self.spec.quant.activation_bits)
    }

    /// Forward pass of the child view at bit-width `b`. Training mode updates
    /// the resolved bank's running statistics with its momentum rule.
    pub fn child_forward(&mut self, b: u8, x: &Tensor, opts: ForwardOpts) -> Result<ChildForward> {
        self.check_bit(b)?;
        let mut tape = Tape::new();
        let theta_vars: Vec<VarId> = self
            .theta
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let mut bank_vars = Vec::new();
        let mut prebn = Vec::new();
        let mut features = None;
        let mut guard = false;
        let slot = self.resolve_slot(b);

        let bn_site = |tape: &mut Tape,
                           banks: &mut BTreeMap<BankKey, BnBank>,
                           site: usize,
                           h: VarId,
                           bank_vars: &mut Vec<(BankKey, VarId, VarId)>,
                           prebn: &mut Vec<Tensor>|
         -> Result<VarId> {
            let key = (site, slot);
            if opts.capture_prebn {
                prebn.push(tape.value(h).clone());
            }
            let bank = banks
                .get_mut(&key)
                .ok_or_else(|| Error::invalid(format!("missing BN bank {:?}", key)))?;
            let gid = tape.leaf(bank.gamma.clone(), true);
            let bid = tape.leaf(bank.beta.clone(), true);
            let out = tape.batch_norm(
                h,
                gid,
                bid,
                &mut bank.running_mean,
                &mut bank.running_var,
                opts.training,
                bank.momentum,
                bank.eps,
            )?;
            bank_vars.push((key, gid, bid));
            Ok(out)
        };

        let logits = match &self.spec.arch {
            Arch::Mlp { hidden, .. } => {
                let n_hidden = hidden.len();
                let mut h = tape.leaf(x.clone(), false);
                for i in 0..n_hidden {
                    if i > 0 {
                        h = self.act_quant(&mut tape, h, b, &opts)?;
                    }
                    let w = self.weight_var(&mut tape, i, theta_vars[i], b, &opts, &mut guard)?;
                    let z = tape.matmul(h, w)?;
                    let z = bn_site(&mut tape, &mut self.banks, i, z, &mut bank_vars, &mut prebn)?;
                    h = tape.relu(z);
                }
                if opts.capture_features {
                    features = Some(tape.value(h).clone());
                }
                if self.quantized_param(n_hidden) {
                    h = self.act_quant(&mut tape, h, b, &opts)?;
                }
                let w = self.weight_var(
                    &mut tape,
                    n_hidden,
                    theta_vars[n_hidden],
                    b,
                    &opts,
                    &mut guard,
                )?;
                let z = tape.matmul(h, w)?;
                tape.bias_add(z, theta_vars[n_hidden + 1])?
            }
            Arch::SmallCnn { channels, .. } => {
                let n_conv = channels.len();
                let mut h = tape.leaf(x.clone(), false);
                for i in 0..n_conv {
                    if i > 0 {
                        h = self.act_quant(&mut tape, h, b, &opts)?;
                    }
                    let w = self.weight_var(&mut tape, i, theta_vars[i], b, &opts, &mut guard)?;
                    let stride = if i == 0 { 1 } else { 2 };
                    let z = tape.conv2d(h, w, stride)?;
                    let z = bn_site(&mut tape, &mut self.banks, i, z, &mut bank_vars, &mut prebn)?;
                    h = tape.relu(z);
                }
                let pooled = tape.global_avg_pool(h)?;
                if opts.capture_features {
                    features = Some(tape.value(pooled).clone());
                }
                let mut p = pooled;
                if self.quantized_param(n_conv) {
                    p = self.act_quant(&mut tape, p, b, &opts)?;
                }
                let w = self.weight_var(&mut tape, n_conv, theta_vars[n_conv], b, &opts, &mut guard)?;
                let z = tape.matmul(p, w)?;
                tape.bias_add(z, theta_vars[n_conv + 1])?
            }
        };
        Ok(ChildForward {
            tape,
            logits,
            theta_vars,
            bank_vars,
            prebn,
            features,
            guard_flagged: guard,
        })
    }

    /// SHA-256 over theta payloads in order; detects any parameter mutation.
    pub fn theta_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.theta {
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Total number of theta scalars.
    pub fn theta_len(&self) -> usize {
        self.theta.iter().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mlp_spec(policy: BnPolicy) -> ModelSpec {
        ModelSpec {
            arch: Arch::Mlp {
                input_dim: 6,
                hidden: vec![8, 8],
                classes: 3,
            },
            ranges: BitRanges::new(vec![1, 2, 4, 8, 32], vec![1, 2, 4, 8, 32]).unwrap(),
            policy,
            quant: QuantSpec::default(),
            axes: ScalingAxes::PerLeadingDim,
            keep_first_last_fp: true,
            per_channel_correction: false,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn bank_count_per_policy() {
        let per_bit = build_model(mlp_spec(BnPolicy::PerBit), 0).unwrap();
        assert_eq!(per_bit.banks.len(), 2 * 5);
        let hybrid = build_model(mlp_spec(BnPolicy::HybridOneBitSeparate), 0).unwrap();
        assert_eq!(hybrid.banks.len(), 2 * 2);
        let shared = build_model(mlp_spec(BnPolicy::SharedAll), 0).unwrap();
        assert_eq!(shared.banks.len(), 2);
    }

    #[test]
    fn equal_seed_equal_theta() {
        let a = build_model(mlp_spec(BnPolicy::PerBit), 7).unwrap();
        let b = build_model(mlp_spec(BnPolicy::PerBit), 7).unwrap();
        assert_eq!(a.theta_digest(), b.theta_digest());
        let c = build_model(mlp_spec(BnPolicy::PerBit), 8).unwrap();
        assert_ne!(a.theta_digest(), c.theta_digest());
    }

    #[test]
    fn bit_outside_range_named_in_error() {
        let mut m = build_model(mlp_spec(BnPolicy::SharedAll), 0).unwrap();
        let x = batch(2, 6, 0);
        let err = match m.child_forward(5, &x, ForwardOpts::default()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error for b = 5"),
        };
        assert!(err.contains('5') && err.contains("32"), "{}", err);
    }

    #[test]
    fn full_precision_bypass_matches_plain_forward() {
        let mut m = build_model(mlp_spec(BnPolicy::SharedAll), 1).unwrap();
        let x = batch(4, 6, 1);
        let opts = ForwardOpts {
            bias_correction: false,
            ..ForwardOpts::default()
        };
        let fwd = m.child_forward(32, &x, opts).unwrap();
        let child = fwd.tape.value(fwd.logits).clone();

        // plain network with the same theta: full-precision weights, but the
        // fixed activation quantizer still sits between hidden layers
        let mut tape = Tape::new();
        let xi = tape.leaf(x, false);
        let w0 = tape.leaf(m.theta[0].clone(), false);
        let h = tape.matmul(xi, w0).unwrap();
        let bank0 = m.banks.get(&(0, BankSlot::Shared)).unwrap().clone();
        let g0 = tape.leaf(bank0.gamma.clone(), false);
        let b0 = tape.leaf(bank0.beta.clone(), false);
        let mut rm = bank0.running_mean.clone();
        let mut rv = bank0.running_var.clone();
        let h = tape
            .batch_norm(h, g0, b0, &mut rm, &mut rv, false, 0.1, BN_EPS)
            .unwrap();
        let h = tape.relu(h);
        let h = dorefa_activation_graph(&mut tape, h, m.spec.quant.activation_bits).unwrap();
        let w1 = tape.leaf(m.theta[1].clone(), false);
        let h = tape.matmul(h, w1).unwrap();
        let bank1 = m.banks.get(&(1, BankSlot::Shared)).unwrap().clone();
        let g1 = tape.leaf(bank1.gamma.clone(), false);
        let b1 = tape.leaf(bank1.beta.clone(), false);
        let mut rm1 = bank1.running_mean.clone();
        let mut rv1 = bank1.running_var.clone();
        let h = tape
            .batch_norm(h, g1, b1, &mut rm1, &mut rv1, false, 0.1, BN_EPS)
            .unwrap();
        let h = tape.relu(h);
        let w2 = tape.leaf(m.theta[2].clone(), false);
        let z = tape.matmul(h, w2).unwrap();
        let b2 = tape.leaf(m.theta[3].clone(), false);
        let out = tape.bias_add(z, b2).unwrap();
        assert_eq!(child.data(), tape.value(out).data());
    }

    #[test]
    fn shared_policy_same_bank_object_across_bits() {
        let mut m = build_model(mlp_spec(BnPolicy::HybridOneBitSeparate), 2).unwrap();
        let x = batch(4, 6, 2);
        let opts = ForwardOpts {
            training: true,
            ..ForwardOpts::default()
        };
        let before = m.banks.get(&(0, BankSlot::Shared)).unwrap().running_mean.clone();
        m.child_forward(4, &x, opts).unwrap();
        let after4 = m.banks.get(&(0, BankSlot::Shared)).unwrap().running_mean.clone();
        assert_ne!(before, after4);
        m.child_forward(8, &x, opts).unwrap();
        let after8 = m.banks.get(&(0, BankSlot::Shared)).unwrap().running_mean.clone();
        assert_ne!(after4, after8);
    }

    #[test]
    fn one_bit_bank_isolation() {
        let mut m = build_model(mlp_spec(BnPolicy::HybridOneBitSeparate), 3).unwrap();
        let x = batch(4, 6, 3);
        let opts = ForwardOpts {
            training: true,
            ..ForwardOpts::default()
        };
        let shared_before = m.banks.get(&(0, BankSlot::Shared)).unwrap().clone();
        m.child_forward(1, &x, opts).unwrap();
        let shared_after = m.banks.get(&(0, BankSlot::Shared)).unwrap();
        assert_eq!(shared_before.running_mean, shared_after.running_mean);
        assert_eq!(shared_before.running_var, shared_after.running_var);
        // and the 1-bit bank moved
        let ob = m.banks.get(&(0, BankSlot::OneBit)).unwrap();
        assert_ne!(ob.running_mean, vec![0.0; 8]);
    }

    #[test]
    fn eval_mode_leaves_running_stats() {
        let mut m = build_model(mlp_spec(BnPolicy::SharedAll), 4).unwrap();
        let x = batch(4, 6, 4);
        let before: Vec<_> = m.banks.values().map(|b| b.running_mean.clone()).collect();
        m.child_forward(2, &x, ForwardOpts::default()).unwrap();
        let after: Vec<_> = m.banks.values().map(|b| b.running_mean.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn theta_gradients_flow_through_quantized_children() {
        let mut m = build_model(mlp_spec(BnPolicy::SharedAll), 5).unwrap();
        let x = batch(4, 6, 5);
        let opts = ForwardOpts {
            training: true,
            ..ForwardOpts::default()
        };
        let mut fwd = m.child_forward(2, &x, opts).unwrap();
        let (loss, _) = fwd
            .tape
            .softmax_cross_entropy(fwd.logits, &[0, 1, 2, 0])
            .unwrap();
        let grads = fwd.tape.backward(loss).unwrap();
        // every weight (and the bias) receives a gradient
        for (i, &v) in fwd.theta_vars.iter().enumerate() {
            assert!(grads.get(v).is_some(), "theta {} missing grad", i);
        }
        for (_, g, b) in &fwd.bank_vars {
            assert!(grads.get(*g).is_some() && grads.get(*b).is_some());
        }
    }

    #[test]
    fn cnn_forward_shapes() {
        let spec = ModelSpec {
            arch: Arch::SmallCnn {
                in_channels: 1,
                channels: vec![4, 6, 8],
                classes: 10,
            },
            ranges: BitRanges::new(vec![2, 8], vec![2, 8, 32]).unwrap(),
            policy: BnPolicy::HybridOneBitSeparate,
            quant: QuantSpec::default(),
            axes: ScalingAxes::PerLeadingDim,
            keep_first_last_fp: true,
            per_channel_correction: false,
        };
        let mut m = build_model(spec, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = (0..2 * 1 * 12 * 12).map(|_| rng.gen_range(0.0..1.0f32)).collect();
        let x = Tensor::new(vec![2, 1, 12, 12], data).unwrap();
        let opts = ForwardOpts {
            capture_prebn: true,
            capture_features: true,
            ..ForwardOpts::default()
        };
        let fwd = m.child_forward(2, &x, opts).unwrap();
        assert_eq!(fwd.tape.value(fwd.logits).shape(), &[2, 10]);
        assert_eq!(fwd.prebn.len(), 3);
        assert_eq!(fwd.features.as_ref().unwrap().shape(), &[2, 8]);
    }

    #[test]
    fn shared_theta_no_copies() {
        // mutating theta changes the child output
        let mut m = build_model(mlp_spec(BnPolicy::SharedAll), 9).unwrap();
        let x = batch(2, 6, 9);
        let f1 = m.child_forward(4, &x, ForwardOpts::default()).unwrap();
        let y1 = f1.tape.value(f1.logits).clone();
        m.theta[2].data_mut()[0] += 0.5;
        let f2 = m.child_forward(4, &x, ForwardOpts::default()).unwrap();
        let y2 = f2.tape.value(f2.logits).clone();
        assert_ne!(y1.data(), y2.data());
    }
}
