//! Dataset handles: deterministic synthetic generators and IDX ingestion.

use crate::engine::Batch;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_inputs: Tensor,
    pub train_labels: Vec<usize>,
    pub eval_inputs: Tensor,
    pub eval_labels: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub warning: Option<String>,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn eval_len(&self) -> usize {
        self.eval_labels.len()
    }

    fn gather(&self, indices: &[usize]) -> Batch {
        let per: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.train_inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.train_labels[i]);
        }
        let shape: Vec<usize> = std::iter::once(indices.len())
            .chain(self.input_shape.iter().copied())
            .collect();
        Batch::new(Tensor::new(shape, data).expect("gather shapes agree"), labels)
            .expect("non-empty index set")
    }

    /// Training batch by explicit indices.
    pub fn train_batch(&self, indices: &[usize]) -> Batch {
        self.gather(indices)
    }

    /// Deterministic cycling batch: samples [start, start+size) mod train_len.
    pub fn train_batch_cycled(&self, start: usize, size: usize) -> Batch {
        let n = self.train_len();
        let idx: Vec<usize> = (0..size).map(|k| (start + k) % n).collect();
        self.gather(&idx)
    }

    pub fn eval_batch(&self) -> Batch {
        Batch::new(self.eval_inputs.clone(), self.eval_labels.clone()).expect("eval non-empty")
    }
}

/// Gaussian class blobs in `dim` dimensions with orthogonal class means at
/// pairwise distance `separation` (unit noise). Class-balanced, 80/20
/// train/eval split, fully deterministic in `seed`.
pub fn gen_synthetic(seed: u64, classes: usize, n: usize, dim: usize, separation: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Invalid(format!("need >= 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Invalid(format!("need n >= classes, got n={n} classes={classes}")));
    }
    let mut rng = substream(seed, "blob-means", &[]);

    // Orthonormal class directions via Gram-Schmidt (classes <= dim), scaled so
    // that pairwise mean distance equals `separation`.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                for (vi, mi) in v.iter_mut().zip(m) {
                    *vi -= dot * mi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 || classes > dim {
                let scale = if norm > 1e-6 { 1.0 / norm } else { 1.0 };
                for vi in &mut v {
                    *vi *= scale;
                }
                means.push(v);
                break;
            }
        }
    }
    let radius = separation / 2f64.sqrt();
    for m in &mut means {
        for v in m {
            *v *= radius;
        }
    }

    let mut rng = substream(seed, "blob-samples", &[]);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(means[k][d] + z);
        }
    }

    // per-class 80/20 split; round-robin labels make this a simple prefix rule
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    let per_class = n / classes;
    let train_per_class = ((per_class as f64) * 0.8).round() as usize;
    for i in 0..n {
        let occurrence = i / classes; // how many of this class came before
        if occurrence < train_per_class.max(1) {
            train_idx.push(i);
        } else {
            eval_idx.push(i);
        }
    }
    let mut warning = None;
    if eval_idx.is_empty() {
        eval_idx = train_idx.clone();
        warning = Some("eval split empty; evaluating on training data".to_string());
    }

    let take = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut lab = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
            lab.push(labels[i]);
        }
        (Tensor::new(vec![idx.len(), dim], data).unwrap(), lab)
    };
    let (train_inputs, train_labels) = take(&train_idx);
    let (eval_inputs, eval_labels) = take(&eval_idx);

    Ok(Dataset {
        train_inputs,
        train_labels,
        eval_inputs,
        eval_labels,
        input_shape: vec![dim],
        classes,
        warning,
    })
}

// ---------------------------------------------------------------------------
// IDX format (big-endian headers, u8 payload)
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    if buf.len() < offset + 4 {
        return Err(Error::Data(format!(
            "{}: truncated header at byte offset {offset}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]]))
}

/// Parse an IDX image file into (n, rows, cols, pixels).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let buf = read_file(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x} at byte offset 0 (want {IDX_IMAGES_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let rows = be_u32(&buf, 8, path)? as usize;
    let cols = be_u32(&buf, 12, path)? as usize;
    let want = 16 + n * rows * cols;
    if buf.len() < want {
        return Err(Error::Data(format!(
            "{}: truncated image payload at byte offset {} (want {} bytes)",
            path.display(),
            buf.len(),
            want
        )));
    }
    Ok((n, rows, cols, buf[16..want].to_vec()))
}

/// Parse an IDX label file into labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x} at byte offset 0 (want {IDX_LABELS_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let want = 8 + n;
    if buf.len() < want {
        return Err(Error::Data(format!(
            "{}: truncated label payload at byte offset {} (want {} bytes)",
            path.display(),
            buf.len(),
            want
        )));
    }
    Ok(buf[8..want].to_vec())
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::shape("write_idx_images", n * rows * cols, pixels.len()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hdr = Vec::with_capacity(16);
    hdr.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    hdr.extend_from_slice(&(n as u32).to_be_bytes());
    hdr.extend_from_slice(&(rows as u32).to_be_bytes());
    hdr.extend_from_slice(&(cols as u32).to_be_bytes());
    f.write_all(&hdr)
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hdr = Vec::with_capacity(8);
    hdr.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    hdr.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    f.write_all(&hdr)
        .and_then(|_| f.write_all(labels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load an IDX directory (train-images/train-labels/t10k-images/t10k-labels,
/// ubyte files). Pixels normalized to [0, 1]; train/eval split as shipped.
pub fn ingest_mnist(dir: &Path) -> Result<Dataset> {
    let (tn, tr, tc, tp) = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let tl = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let (en, er, ec, ep) = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let el = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if tl.len() != tn || el.len() != en {
        return Err(Error::Data(format!(
            "label/image count mismatch: {} vs {tn} (train), {} vs {en} (eval)",
            tl.len(),
            el.len()
        )));
    }
    if (tr, tc) != (er, ec) {
        return Err(Error::Data(format!(
            "image dims differ between splits: {tr}x{tc} vs {er}x{ec}"
        )));
    }
    let to_f64 = |p: &[u8]| -> Vec<f64> { p.iter().map(|&v| v as f64 / 255.0).collect() };
    let classes = 1 + tl.iter().chain(el.iter()).copied().max().unwrap_or(0) as usize;
    Ok(Dataset {
        train_inputs: Tensor::new(vec![tn, 1, tr, tc], to_f64(&tp))?,
        train_labels: tl.iter().map(|&v| v as usize).collect(),
        eval_inputs: Tensor::new(vec![en, 1, er, ec], to_f64(&ep))?,
        eval_labels: el.iter().map(|&v| v as usize).collect(),
        input_shape: vec![1, tr, tc],
        classes: classes.max(2),
        warning: None,
    })
}

// ---------------------------------------------------------------------------
// Synthetic 28x28 image classes (an IDX-format stand-in when no real digit
// corpus is on disk). Each class is a smoothed random prototype; samples are
// shifted, noisy copies.
// ---------------------------------------------------------------------------

fn box_blur(img: &mut [f64], rows: usize, cols: usize) {
    let src = img.to_vec();
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii >= 0 && ii < rows as i64 && jj >= 0 && jj < cols as i64 {
                        acc += src[(ii as usize) * cols + jj as usize];
                        cnt += 1.0;
                    }
                }
            }
            img[i * cols + j] = acc / cnt;
        }
    }
}

fn class_prototype(seed: u64, class: usize) -> Vec<f64> {
    let mut rng = substream(seed, "image-proto", &[class as u64]);
    let mut img: Vec<f64> = (0..28 * 28).map(|_| rng.random::<f64>()).collect();
    for _ in 0..3 {
        box_blur(&mut img, 28, 28);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    for v in &mut img {
        *v = (*v - lo) / span;
    }
    img
}

/// Deterministic 10-class-style image set: (pixels, labels), row-major 28x28.
/// Prototypes depend only on `seed`; `split` selects an independent sample
/// stream so train and eval share classes but not noise.
pub fn gen_synthetic_images(seed: u64, classes: usize, n: usize, split: u64) -> (Vec<u8>, Vec<u8>) {
    let protos: Vec<Vec<f64>> = (0..classes).map(|k| class_prototype(seed, k)).collect();
    let mut rng = substream(seed, "image-samples", &[split]);
    let mut pixels = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k as u8);
        let dx = rng.random_range(-2i64..=2);
        let dy = rng.random_range(-2i64..=2);
        for r in 0..28i64 {
            for c in 0..28i64 {
                let (sr, sc) = (r - dy, c - dx);
                let base = if sr >= 0 && sr < 28 && sc >= 0 && sc < 28 {
                    protos[k][(sr as usize) * 28 + sc as usize]
                } else {
                    0.0
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = (base + 0.10 * noise).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
    }
    (pixels, labels)
}

/// Write a complete synthetic IDX directory (train + t10k files).
pub fn write_synthetic_idx_dir(
    dir: &Path,
    seed: u64,
    train_n: usize,
    eval_n: usize,
    classes: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (tp, tl) = gen_synthetic_images(seed, classes, train_n, 0);
    let (ep, el) = gen_synthetic_images(seed, classes, eval_n, 1);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &tp, train_n, 28, 28)?;
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &tl)?;
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &ep, eval_n, 28, 28)?;
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &el)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(5, 4, 100, 16, 6.0).unwrap();
        let b = gen_synthetic(5, 4, 100, 16, 6.0).unwrap();
        assert_eq!(a.train_inputs.data(), b.train_inputs.data());
        assert_eq!(a.eval_inputs.data(), b.eval_inputs.data());
        assert_eq!(a.train_labels, b.train_labels);
        let c = gen_synthetic(6, 4, 100, 16, 6.0).unwrap();
        assert_ne!(a.train_inputs.data(), c.train_inputs.data());
    }

    #[test]
    fn synthetic_degenerate_split_warns() {
        let d = gen_synthetic(1, 5, 5, 16, 6.0).unwrap();
        assert_eq!(d.train_len(), 5);
        assert_eq!(d.eval_len(), 5);
        assert!(d.warning.is_some());
    }

    #[test]
    fn synthetic_rejects_bad_args() {
        assert!(gen_synthetic(0, 1, 10, 16, 6.0).is_err());
        assert!(gen_synthetic(0, 4, 3, 16, 6.0).is_err());
    }

    #[test]
    fn idx_roundtrip_and_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_idx_dir(dir.path(), 3, 50, 20, 10).unwrap();
        let ds = ingest_mnist(dir.path()).unwrap();
        assert_eq!(ds.train_len(), 50);
        assert_eq!(ds.eval_len(), 20);
        assert_eq!(ds.input_shape, vec![1, 28, 28]);
        assert!(ds.train_labels.iter().all(|&l| l < 10));
        assert!(ds.train_inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        std::fs::write(&p, [0u8, 0, 8, 9, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        let err = read_idx_images(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        let mut buf = Vec::new();
        buf.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend_from_slice(&[7u8; 100]); // far short of 2*28*28
        std::fs::write(&p, &buf).unwrap();
        let err = read_idx_images(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn canonical_train_file_layout_parses() {
        // a full-size train file: 60,000 images of 28x28 through the parser
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        write_idx_images(&p, &vec![0u8; 60_000 * 28 * 28], 60_000, 28, 28).unwrap();
        let (n, rows, cols, pixels) = read_idx_images(&p).unwrap();
        assert_eq!((n, rows, cols), (60_000, 28, 28));
        assert_eq!(pixels.len(), 60_000 * 28 * 28);
    }

    #[test]
    fn synthetic_images_deterministic_and_labeled() {
        let (p1, l1) = gen_synthetic_images(9, 10, 40, 0);
        let (p2, l2) = gen_synthetic_images(9, 10, 40, 0);
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert!(l1.iter().all(|&l| l < 10));
        assert_eq!(p1.len(), 40 * 28 * 28);
    }
}
