//! Binary model checkpoints. Little-endian throughout: magic "MBQN", format
//! version, architecture id, bit ranges, BN policy, the config hash of the run
//! that produced the file, the full model spec (JSON), then named f32 tensors.
//! BN banks are stored as tensors under the reserved "bn/" name prefix.

use crate::error::{Error, Result};
use crate::model::{build_model, BankSlot, BnPolicy, ModelSpec, MultiBitModel};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MBQN";
pub const FORMAT_VERSION: u32 = 1;

/// Reserved tensor-name prefix; theta tensors must not start with it.
pub const BN_PREFIX: &str = "bn/";

fn policy_byte(p: BnPolicy) -> u8 {
    match p {
        BnPolicy::SharedAll => 0,
        BnPolicy::PerBit => 1,
        BnPolicy::HybridOneBitSeparate => 2,
    }
}

fn policy_from_byte(v: u8) -> Result<BnPolicy> {
    match v {
        0 => Ok(BnPolicy::SharedAll),
        1 => Ok(BnPolicy::PerBit),
        2 => Ok(BnPolicy::HybridOneBitSeparate),
        _ => Err(Error::Format(format!("unknown BN policy byte {}", v))),
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(buf, name);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Byte-wise reader tracking its offset so errors can name the position.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 string at offset {}", at)))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn bank_name(site: usize, slot: BankSlot, field: &str) -> String {
    format!("{}{}/{}/{}", BN_PREFIX, site, slot.tag(), field)
}

fn parse_slot(tag: &str) -> Result<BankSlot> {
    match tag {
        "shared" => Ok(BankSlot::Shared),
        "onebit" => Ok(BankSlot::OneBit),
        _ => tag
            .strip_prefix("bit")
            .and_then(|b| b.parse::<u8>().ok())
            .map(BankSlot::PerBit)
            .ok_or_else(|| Error::Format(format!("unknown BN bank slot tag '{}'", tag))),
    }
}

/// Serialize the model (plus the producing config's hash) to `path`. The
/// encoding is deterministic: identical models produce identical bytes.
pub fn save_checkpoint(model: &MultiBitModel, config_hash: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &model.spec.arch.id());
    buf.extend_from_slice(&(model.spec.ranges.trained.len() as u32).to_le_bytes());
    buf.extend_from_slice(&model.spec.ranges.trained);
    buf.extend_from_slice(&(model.spec.ranges.switchable.len() as u32).to_le_bytes());
    buf.extend_from_slice(&model.spec.ranges.switchable);
    buf.push(policy_byte(model.spec.policy));
    put_str(&mut buf, config_hash);
    let spec_json = serde_json::to_string(&model.spec)
        .map_err(|e| Error::Format(format!("spec serialization failed: {}", e)))?;
    put_str(&mut buf, &spec_json);

    let n_tensors = model.theta.len() + 4 * model.banks.len();
    buf.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    for (name, t) in model.theta_names.iter().zip(&model.theta) {
        if name.starts_with(BN_PREFIX) {
            return Err(Error::Format(format!(
                "theta tensor '{}' collides with the reserved '{}' prefix",
                name, BN_PREFIX
            )));
        }
        put_tensor(&mut buf, name, t.shape(), t.data());
    }
    // BTreeMap order keeps bank emission deterministic
    for (&(site, slot), bank) in &model.banks {
        let c = bank.running_mean.len();
        put_tensor(&mut buf, &bank_name(site, slot, "gamma"), &[c], bank.gamma.data());
        put_tensor(&mut buf, &bank_name(site, slot, "beta"), &[c], bank.beta.data());
        put_tensor(&mut buf, &bank_name(site, slot, "running_mean"), &[c], &bank.running_mean);
        put_tensor(&mut buf, &bank_name(site, slot, "running_var"), &[c], &bank.running_var);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint; returns the model and the embedded config hash.
pub fn load_checkpoint(path: &Path) -> Result<(MultiBitModel, String)> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic: not an MBQN checkpoint".to_string()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {} (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let arch_id = c.string()?;
    let n_trained = c.u32()? as usize;
    let trained = c.take(n_trained)?.to_vec();
    let n_switch = c.u32()? as usize;
    let switchable = c.take(n_switch)?.to_vec();
    let policy = policy_from_byte(c.take(1)?[0])?;
    let config_hash = c.string()?;
    let spec: ModelSpec = serde_json::from_str(&c.string()?)
        .map_err(|e| Error::Format(format!("bad embedded model spec: {}", e)))?;
    // header fields are redundant with the spec; require agreement
    if spec.arch.id() != arch_id
        || spec.ranges.trained != trained
        || spec.ranges.switchable != switchable
        || spec.policy != policy
    {
        return Err(Error::Format(
            "checkpoint header disagrees with embedded model spec".to_string(),
        ));
    }

    // skeleton provides tensor names/shapes and bank keys to fill in
    let mut model = build_model(spec, 0)?;
    let n_tensors = c.u32()? as usize;
    let mut seen = 0usize;
    for _ in 0..n_tensors {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = c.f32_vec(len)?;
        if let Some(rest) = name.strip_prefix(BN_PREFIX) {
            let mut parts = rest.splitn(3, '/');
            let (site, slot, field) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(t), Some(f)) => (
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad BN site in '{}'", name)))?,
                    parse_slot(t)?,
                    f,
                ),
                _ => return Err(Error::Format(format!("malformed BN tensor name '{}'", name))),
            };
            let bank = model
                .banks
                .get_mut(&(site, slot))
                .ok_or_else(|| Error::Format(format!("unexpected BN bank tensor '{}'", name)))?;
            if len != bank.running_mean.len() {
                return Err(Error::Format(format!(
                    "BN tensor '{}' has {} channels, model expects {}",
                    name,
                    len,
                    bank.running_mean.len()
                )));
            }
            match field {
                "gamma" => bank.gamma = Tensor::new(shape, data)?,
                "beta" => bank.beta = Tensor::new(shape, data)?,
                "running_mean" => bank.running_mean = data,
                "running_var" => bank.running_var = data,
                _ => return Err(Error::Format(format!("unknown BN field in '{}'", name))),
            }
        } else {
            let i = model
                .theta_names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter tensor '{}'", name)))?;
            if model.theta[i].shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    name,
                    shape,
                    model.theta[i].shape()
                )));
            }
            model.theta[i] = Tensor::new(shape, data)?;
        }
        seen += 1;
    }
    if seen != model.theta.len() + 4 * model.banks.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model needs {}",
            seen,
            model.theta.len() + 4 * model.banks.len()
        )));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - c.pos,
            c.pos
        )));
    }
    Ok((model, config_hash))
}
