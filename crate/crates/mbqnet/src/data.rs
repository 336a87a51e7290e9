//! Dataset ingestion: IDX images, CIFAR-10 binary records, and synthetic
//! generators. All loaders scale pixels to [0, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Per-channel affine normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images plus labels. `images` is [N, C, H, W] for pixel data or [N, D] for
/// vector data; labels lie in [0, classes).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: String,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len()
    }

    /// Materialize a batch for the given sample indices.
    pub fn gather(&self, idx: &[u32]) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * sl);
        let src = self.images.data();
        for &i in idx {
            let i = i as usize;
            data.extend_from_slice(&src[i * sl..(i + 1) * sl]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let labels = idx.iter().map(|&i| self.labels[i as usize] as usize).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// Split off the first `n_head` samples; remainder keeps the tail.
    pub fn split_at(&self, n_head: usize, head_tag: &str, tail_tag: &str) -> Result<(Dataset, Dataset)> {
        if n_head == 0 || n_head >= self.len() {
            return Err(Error::Data(format!(
                "split_at {} out of range for {} samples",
                n_head,
                self.len()
            )));
        }
        let head_idx: Vec<u32> = (0..n_head as u32).collect();
        let tail_idx: Vec<u32> = (n_head as u32..self.len() as u32).collect();
        Ok((self.subset(&head_idx, head_tag), self.subset(&tail_idx, tail_tag)))
    }

    pub fn subset(&self, idx: &[u32], tag: &str) -> Dataset {
        let (images, _) = self.gather(idx);
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i as usize]).collect(),
            classes: self.classes,
            split: tag.to_string(),
            norm: self.norm.clone(),
        }
    }

    /// Per-channel mean/std over this split (population std, floored at 1e-6).
    pub fn compute_norm_stats(&self) -> NormStats {
        let (c, inner) = match self.images.shape() {
            [_, c, h, w] => (*c, h * w),
            [_, d] => (*d, 1),
            s => panic!("unsupported image shape {:?}", s),
        };
        let n = self.len();
        let src = self.images.data();
        let per = c * inner;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..inner {
                    mean[ci] += src[ni * per + ci * inner + j] as f64;
                }
            }
        }
        let m = (n * inner) as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..inner {
                    let d = src[ni * per + ci * inner + j] as f64 - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        NormStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: var
                .iter()
                .map(|&v| ((v / m).sqrt().max(1e-6)) as f32)
                .collect(),
        }
    }

    /// Apply `(x - mean) / std` per channel, recording the stats used.
    pub fn normalized(&self, stats: &NormStats) -> Dataset {
        let mut out = self.clone();
        out.apply_affine(|ci, v| (v - stats.mean[ci]) / stats.std[ci]);
        out.norm = Some(stats.clone());
        out
    }

    /// Invert a previous normalization.
    pub fn denormalized(&self) -> Result<Dataset> {
        let stats = self
            .norm
            .clone()
            .ok_or_else(|| Error::Data("dataset is not normalized".to_string()))?;
        let mut out = self.clone();
        out.apply_affine(|ci, v| v * stats.std[ci] + stats.mean[ci]);
        out.norm = None;
        Ok(out)
    }

    fn apply_affine(&mut self, f: impl Fn(usize, f32) -> f32) {
        let (c, inner) = match self.images.shape() {
            [_, c, h, w] => (*c, h * w),
            [_, d] => (*d, 1),
            s => panic!("unsupported image shape {:?}", s),
        };
        let n = self.len();
        let per = c * inner;
        let data = self.images.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..inner {
                    let idx = ni * per + ci * inner + j;
                    data[idx] = f(ci, data[idx]);
                }
            }
        }
    }
}

fn read_be_u32(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    if buf.len() < off + 4 {
        return Err(Error::Format(format!(
            "{}: truncated at byte offset {}",
            what, off
        )));
    }
    Ok(u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]))
}

/// Parse the IDX pair used by MNIST-style datasets.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let magic = read_be_u32(&img, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic 0x{:08x} at byte offset 0, expected 0x{:08x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let n = read_be_u32(&img, 4, "idx images")? as usize;
    let h = read_be_u32(&img, 8, "idx images")? as usize;
    let w = read_be_u32(&img, 12, "idx images")? as usize;
    let payload = &img[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format(format!(
            "idx images: payload {} bytes at offset 16, expected {}",
            payload.len(),
            n * h * w
        )));
    }
    let magic = read_be_u32(&lab, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic 0x{:08x} at byte offset 0, expected 0x{:08x}",
            magic, IDX_LABELS_MAGIC
        )));
    }
    let ln = read_be_u32(&lab, 4, "idx labels")? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "idx: {} labels for {} images",
            ln, n
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::Format(format!(
            "idx labels: payload {} bytes at offset 8, expected {}",
            lab.len() - 8,
            n
        )));
    }
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels: lab[8..].to_vec(),
        classes: 10,
        split: "train".to_string(),
        norm: None,
    })
}

/// Write an IDX image/label pair (the inverse of `load_mnist_idx`).
pub fn write_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [n, _c, h, w] = *ds.images.shape() else {
        return Err(Error::Data("write_mnist_idx expects [N, 1, H, W] images".to_string()));
    };
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Parse CIFAR-10 binary batches: per record one label byte plus 3072
/// channel-major pixel bytes.
pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let buf = fs::read(p.as_ref())?;
        if buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "cifar10: {} is {} bytes, not a multiple of {}",
                p.as_ref().display(),
                buf.len(),
                CIFAR_RECORD
            )));
        }
        for rec in buf.chunks(CIFAR_RECORD) {
            labels.push(rec[0]);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("cifar10: no records".to_string()));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        classes: 10,
        split: "train".to_string(),
        norm: None,
    })
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `k` unit-covariance Gaussian clusters with centers at mutual distance
/// `separation`, labels by cluster. Requires `k <= d` (simplex on scaled
/// basis vectors).
pub fn synth_blobs(n: usize, d: usize, k: usize, separation: f32, seed: u64) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::invalid("synth_blobs requires k >= 2 and d >= 2".to_string()));
    }
    if k > d {
        return Err(Error::invalid(format!(
            "synth_blobs: k = {} clusters need at least k dimensions, got d = {}",
            k, d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation as f64 / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % k) as u8;
        for j in 0..d {
            let center = if j == label as usize { scale } else { 0.0 };
            data.push((center + box_muller(&mut rng)) as f32);
        }
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, d], data)?,
        labels,
        classes: k,
        split: "train".to_string(),
        norm: None,
    })
}

// 7x5 glyph bitmaps for digits 0-9, row-major.
const GLYPHS: [[u8; 35]; 10] = [
    [0,1,1,1,0, 1,0,0,0,1, 1,0,0,1,1, 1,0,1,0,1, 1,1,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [0,0,1,0,0, 0,1,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,1,1,1,0],
    [0,1,1,1,0, 1,0,0,0,1, 0,0,0,0,1, 0,0,0,1,0, 0,0,1,0,0, 0,1,0,0,0, 1,1,1,1,1],
    [0,1,1,1,0, 1,0,0,0,1, 0,0,0,0,1, 0,0,1,1,0, 0,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [0,0,0,1,0, 0,0,1,1,0, 0,1,0,1,0, 1,0,0,1,0, 1,1,1,1,1, 0,0,0,1,0, 0,0,0,1,0],
    [1,1,1,1,1, 1,0,0,0,0, 1,1,1,1,0, 0,0,0,0,1, 0,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [0,0,1,1,0, 0,1,0,0,0, 1,0,0,0,0, 1,1,1,1,0, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [1,1,1,1,1, 0,0,0,0,1, 0,0,0,1,0, 0,0,1,0,0, 0,1,0,0,0, 0,1,0,0,0, 0,1,0,0,0],
    [0,1,1,1,0, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [0,1,1,1,0, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,1, 0,0,0,0,1, 0,0,0,1,0, 0,1,1,0,0],
];

fn glyph_bilinear(glyph: &[u8; 35], r: f64, c: f64) -> f64 {
    if r < -1.0 || r > 7.0 || c < -1.0 || c > 5.0 {
        return 0.0;
    }
    let at = |ri: i64, ci: i64| -> f64 {
        if (0..7).contains(&ri) && (0..5).contains(&ci) {
            glyph[(ri * 5 + ci) as usize] as f64
        } else {
            0.0
        }
    };
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    at(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + at(r0, c0 + 1) * (1.0 - fr) * fc
        + at(r0 + 1, c0) * fr * (1.0 - fc)
        + at(r0 + 1, c0 + 1) * fr * fc
}

/// Procedurally rendered 28x28 ten-class digit images: glyph bitmaps under
/// random affine jitter plus pixel noise, quantized to byte pixels so the
/// dataset round-trips exactly through the IDX format.
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label: u8 = rng.gen_range(0..10);
        let glyph = &GLYPHS[label as usize];
        let scale: f64 = rng.gen_range(0.75..1.15);
        let theta: f64 = rng.gen_range(-0.25..0.25);
        let tx: f64 = rng.gen_range(-3.0..3.0);
        let ty: f64 = rng.gen_range(-3.0..3.0);
        let intensity: f64 = rng.gen_range(0.7..1.0);
        let (sin_t, cos_t) = theta.sin_cos();
        // glyph cell size in output pixels
        let cell = 2.9 * scale;
        for y in 0..28 {
            for x in 0..28 {
                let dx = x as f64 - 13.5 - tx;
                let dy = y as f64 - 13.5 - ty;
                let gx = (cos_t * dx + sin_t * dy) / cell + 2.0;
                let gy = (-sin_t * dx + cos_t * dy) / cell + 3.0;
                let v = glyph_bilinear(glyph, gy, gx) * intensity;
                let noise: f64 = rng.gen_range(-0.08..0.08);
                let byte = ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                data.push(byte as f32 / 255.0);
            }
        }
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, 28, 28], data)?,
        labels,
        classes: 10,
        split: "train".to_string(),
        norm: None,
    })
}

/// Deterministic Fisher-Yates shuffle of 0..n.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Mix a base seed with a context label, for independent deterministic streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_dataset(n: usize) -> Dataset {
        let mut data = Vec::new();
        for i in 0..n * 28 * 28 {
            data.push(((i % 256) as f32) / 255.0);
        }
        Dataset {
            images: Tensor::new(vec![n, 1, 28, 28], data).unwrap(),
            labels: (0..n as u8).collect(),
            classes: 10,
            split: "train".to_string(),
            norm: None,
        }
    }

    #[test]
    fn idx_roundtrip_fixture() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let ds = toy_dataset(4);
        write_mnist_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.images.shape(), &[4, 1, 28, 28]);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.images.data(), ds.images.data());
    }

    #[test]
    fn idx_scaling_endpoints() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let mut ds = toy_dataset(1);
        ds.images.data_mut().fill(0.0);
        ds.images.data_mut()[0] = 1.0;
        write_mnist_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.images.data()[0], 1.0);
        assert!(back.images.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_magic_mismatch_reports_offset() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_mnist_idx(&toy_dataset(2), &ip, &lp).unwrap();
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        fs::write(&ip, &bytes).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("magic"), "{}", err);
    }

    #[test]
    fn idx_truncation_detected() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_mnist_idx(&toy_dataset(2), &ip, &lp).unwrap();
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("expected"), "{}", err);
    }

    #[test]
    fn cifar_record_arithmetic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rec = vec![9u8];
        rec.extend(std::iter::repeat(128u8).take(3072));
        let mut two = rec.clone();
        two[0] = 3;
        two.extend(&rec);
        fs::write(&p, &two).unwrap();
        let ds = load_cifar10_bin(&[&p]).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels, vec![3, 9]);

        // single record
        fs::write(&p, &rec).unwrap();
        let ds = load_cifar10_bin(&[&p]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 9);

        // bad length
        fs::write(&p, &rec[..3000]).unwrap();
        assert!(load_cifar10_bin(&[&p]).is_err());
    }

    #[test]
    fn blobs_deterministic_and_labeled() {
        let a = synth_blobs(40, 8, 4, 10.0, 7).unwrap();
        let b = synth_blobs(40, 8, 4, 10.0, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.classes, 4);
        // centers at mutual distance `separation`
        let scale = 10.0 / std::f64::consts::SQRT_2;
        let dist = (2.0 * scale * scale).sqrt();
        assert!((dist - 10.0).abs() < 1e-9);
        assert!(synth_blobs(10, 2, 4, 1.0, 0).is_err());
    }

    #[test]
    fn digits_deterministic_and_byte_quantized() {
        let a = synth_digits(16, 3).unwrap();
        let b = synth_digits(16, 3).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        for &v in a.images.data() {
            let byte = (v * 255.0).round();
            assert!((v - byte / 255.0).abs() < 1e-7);
        }
        assert!(a.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn normalization_roundtrip() {
        let ds = synth_digits(8, 5).unwrap();
        let stats = ds.compute_norm_stats();
        let normed = ds.normalized(&stats);
        let back = normed.denormalized().unwrap();
        for (a, b) in back.images.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let idx = shuffled_indices(100, &mut rng);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<u32>>());
    }
}
