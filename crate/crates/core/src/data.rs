//! Datasets: MNIST IDX ingestion and small synthetic 2-D tasks.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::Bounds;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `(n, ...sample shape)`.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub bounds: Bounds,
}

impl Dataset {
    pub fn new(name: &str, x: Tensor, y: Vec<usize>, classes: usize, split: Split, bounds: Bounds) -> Result<Self> {
        if x.ndim() < 2 || x.rows() != y.len() {
            return Err(Error::Data(format!(
                "{name}: {} labels for inputs of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("{name}: label {bad} outside [0, {classes})")));
        }
        if !bounds.contains(&x) {
            return Err(Error::Data(format!(
                "{name}: inputs outside [{}, {}]",
                bounds.lo, bounds.hi
            )));
        }
        Ok(Self {
            name: name.to_owned(),
            x,
            y,
            classes,
            split,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            split: self.split,
            bounds: self.bounds,
        }
    }

    /// The first `n` rows (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            declared: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Checks the payload length against the header. A short payload is a
/// truncation; a long one is a dimension mismatch.
fn check_payload(bytes: &[u8], header: usize, declared: usize, path: &Path) -> Result<()> {
    let actual = bytes.len() - header;
    if actual < declared {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            declared,
            actual,
        });
    }
    if actual > declared {
        return Err(Error::DimMismatch {
            path: path.to_path_buf(),
            detail: format!("header declares {declared} payload bytes, file has {actual}"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read_all(images)?;
    check_magic(&ib, IMAGES_MAGIC, images)?;
    let n = be_u32(&ib, 4, images)? as usize;
    let rows = be_u32(&ib, 8, images)? as usize;
    let cols = be_u32(&ib, 12, images)? as usize;
    check_payload(&ib, 16, n * rows * cols, images)?;

    let lb = read_all(labels)?;
    check_magic(&lb, LABELS_MAGIC, labels)?;
    let nl = be_u32(&lb, 4, labels)? as usize;
    check_payload(&lb, 8, nl, labels)?;
    if nl != n {
        return Err(Error::DimMismatch {
            path: labels.to_path_buf(),
            detail: format!("{nl} labels for {n} images"),
        });
    }

    let x = Tensor::new(
        vec![n, 1, rows, cols],
        ib[16..].iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let y = lb[8..].iter().map(|&b| b as usize).collect();
    Dataset::new("mnist", x, y, 10, split, Bounds::UNIT)
}

/// Loads the standard four-file MNIST layout from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    TwoMoons,
    GaussianBlobs,
    Linear,
}

impl SynthKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthKind::TwoMoons => "two-moons",
            SynthKind::GaussianBlobs => "gaussian-blobs",
            SynthKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-moons" => Some(SynthKind::TwoMoons),
            "gaussian-blobs" => Some(SynthKind::GaussianBlobs),
            "linear" => Some(SynthKind::Linear),
            _ => None,
        }
    }
}

/// Line `w·x + b = 0` with class 1 on the positive side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    pub w: [f64; 2],
    pub b: f64,
}

impl Separator {
    pub fn side(&self, p: &[f64]) -> f64 {
        self.w[0] * p[0] + self.w[1] * p[1] + self.b
    }
}

/// Minimum distance of linear-kind points from their separator.
pub const LINEAR_MARGIN: f64 = 0.05;

/// A deterministic binary 2-D dataset inside `[0, 1]²`. The linear kind also
/// returns its separating line.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<(Dataset, Option<Separator>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("synthetic set needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise {noise}")));
    }
    let split_tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut g = RngStream::new(seed, &format!("synth/{}/{split_tag}", kind.as_str())).rng();
    let gauss = |g: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(g) };
    let mut pts = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    let mut sep = None;
    match kind {
        SynthKind::TwoMoons => {
            // raw moons span x ∈ [-1, 2], y ∈ [-0.5, 1]; mapped into [0, 1]²
            for i in 0..n {
                let label = usize::from(i >= n / 2);
                let t = g.gen_range(0.0..std::f64::consts::PI);
                let (mut px, mut py) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                px += noise * gauss(&mut g);
                py += noise * gauss(&mut g);
                pts.push(((px + 1.25) / 3.5).clamp(0.0, 1.0));
                pts.push(((py + 0.75) / 2.0).clamp(0.0, 1.0));
                y.push(label);
            }
        }
        SynthKind::GaussianBlobs => {
            let centers = [[0.3, 0.3], [0.7, 0.7]];
            let spread = 0.08 + noise;
            for i in 0..n {
                let label = usize::from(i >= n / 2);
                let c = centers[label];
                pts.push((c[0] + spread * gauss(&mut g)).clamp(0.0, 1.0));
                pts.push((c[1] + spread * gauss(&mut g)).clamp(0.0, 1.0));
                y.push(label);
            }
        }
        SynthKind::Linear => {
            // the line depends only on the seed so train and test splits share it
            let angle = RngStream::new(seed, "synth/linear/line")
                .rng()
                .gen_range(0.0..std::f64::consts::TAU);
            let w = [angle.cos(), angle.sin()];
            let s = Separator {
                w,
                b: -(w[0] + w[1]) * 0.5,
            };
            while y.len() < n {
                let p = [g.gen_range(0.0..1.0), g.gen_range(0.0..1.0)];
                let d = s.side(&p);
                if d.abs() < LINEAR_MARGIN {
                    continue;
                }
                // jitter never crosses the line when noise < margin
                let jx = (noise * gauss(&mut g)).clamp(-LINEAR_MARGIN * 0.49, LINEAR_MARGIN * 0.49);
                let jy = (noise * gauss(&mut g)).clamp(-LINEAR_MARGIN * 0.49, LINEAR_MARGIN * 0.49);
                pts.push((p[0] + jx).clamp(0.0, 1.0));
                pts.push((p[1] + jy).clamp(0.0, 1.0));
                y.push(usize::from(d > 0.0));
            }
            sep = Some(s);
        }
    }
    let x = Tensor::new(vec![n, 2], pts)?;
    let ds = Dataset::new(kind.as_str(), x, y, 2, split, Bounds::UNIT)?;
    Ok((ds, sep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n_declared: u32, n_actual: usize, magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&magic.to_be_bytes());
        b.extend_from_slice(&n_declared.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        for i in 0..n_actual * 4 {
            b.push(if i == 0 { 255 } else { (i % 200) as u8 });
        }
        b
    }

    fn idx_labels(n: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend((0..n).map(|i| (i % 10) as u8));
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &idx_images(3, 3, IMAGES_MAGIC));
        let l = write(dir.path(), "l", &idx_labels(3));
        let ds = load_mnist_idx(&i, &l, Split::Train).unwrap();
        assert_eq!(ds.x.shape(), &[3, 1, 2, 2]);
        assert_eq!(ds.x.data()[0], 1.0);
        assert_eq!(ds.y, vec![0, 1, 2]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l", &idx_labels(10));
        let short = write(dir.path(), "short", &idx_images(10, 5, IMAGES_MAGIC));
        assert!(matches!(
            load_mnist_idx(&short, &l, Split::Train),
            Err(Error::Truncated { .. })
        ));
        let magic = write(dir.path(), "magic", &idx_images(10, 10, 0x0803_0000));
        assert!(matches!(
            load_mnist_idx(&magic, &l, Split::Train),
            Err(Error::BadMagic { .. })
        ));
        let long = write(dir.path(), "long", &idx_images(10, 12, IMAGES_MAGIC));
        assert!(matches!(
            load_mnist_idx(&long, &l, Split::Train),
            Err(Error::DimMismatch { .. })
        ));
        let l5 = write(dir.path(), "l5", &idx_labels(5));
        let ok = write(dir.path(), "ok", &idx_images(10, 10, IMAGES_MAGIC));
        assert!(matches!(
            load_mnist_idx(&ok, &l5, Split::Train),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_sets_are_deterministic_and_balanced() {
        let (a, _) = synth_dataset(SynthKind::TwoMoons, 1000, 0.05, 3, Split::Train).unwrap();
        let (b, _) = synth_dataset(SynthKind::TwoMoons, 1000, 0.05, 3, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y.iter().filter(|&&l| l == 1).count(), 500);
        assert!(Bounds::UNIT.contains(&a.x));
    }

    #[test]
    fn linear_set_is_separated_by_emitted_line() {
        for seed in 0..5 {
            let (ds, sep) = synth_dataset(SynthKind::Linear, 300, 0.0, seed, Split::Train).unwrap();
            let sep = sep.unwrap();
            for i in 0..ds.len() {
                assert_eq!(usize::from(sep.side(ds.x.row(i)) > 0.0), ds.y[i]);
            }
        }
    }
}
