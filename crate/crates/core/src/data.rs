//! Dataset generation, IDX loading, and split management.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled input.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[C, H, W]`, without a batch axis.
    pub input: Tensor,
    pub label: usize,
}

/// Disjoint splits, in the roles the pipeline consumes them.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub calib: Vec<Sample>,
    pub val: Vec<Sample>,
    pub holdout: Vec<Sample>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub calib: usize,
    pub val: usize,
    pub holdout: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.calib + self.val + self.holdout
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 8000,
            calib: 1000,
            val: 1000,
            holdout: 1000,
        }
    }
}

/// Gaussian-blob image generator parameters.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Blob standard deviation, in pixels.
    pub blob_sigma: f32,
    /// Standard deviation of per-sample center jitter.
    pub center_jitter: f32,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            blob_sigma: 1.6,
            center_jitter: 0.7,
            pixel_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

/// Builds the four splits from a source, deterministically per seed. IDX
/// sources are shuffled with the seed before splitting; synthetic sources
/// generate exactly the requested number of samples.
pub fn load_dataset(source: &DataSource, sizes: &SplitSizes, seed: u64) -> Result<DatasetBundle> {
    let mut samples = match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec, sizes.total(), seed),
        DataSource::Idx { images, labels } => {
            let images = load_idx_images(images)?;
            let labels = load_idx_labels(labels)?;
            if images.len() != labels.len() {
                return Err(Error::IdxError(format!(
                    "{} images but {} labels",
                    images.len(),
                    labels.len()
                )));
            }
            if sizes.total() > images.len() {
                return Err(Error::SplitError(format!(
                    "splits need {} samples, file provides {}",
                    sizes.total(),
                    images.len()
                )));
            }
            let mut samples: Vec<Sample> = images
                .into_iter()
                .zip(labels)
                .map(|(input, label)| Sample {
                    input,
                    label: label as usize,
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            samples.shuffle(&mut rng);
            samples
        }
    };
    samples.truncate(sizes.total());
    let holdout = samples.split_off(sizes.train + sizes.calib + sizes.val);
    let val = samples.split_off(sizes.train + sizes.calib);
    let calib = samples.split_off(sizes.train);
    Ok(DatasetBundle {
        train: samples,
        calib,
        val,
        holdout,
        seed,
    })
}

/// Class `k` gets a blob centered on a ring position; each sample jitters the
/// center, scales the amplitude, and adds pixel noise.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0f32, spec.center_jitter.max(1e-6)).unwrap();
    let noise = Normal::new(0.0f32, spec.pixel_noise.max(1e-9)).unwrap();
    let cy0 = (spec.height as f32 - 1.0) / 2.0;
    let cx0 = (spec.width as f32 - 1.0) / 2.0;
    let radius = 0.30 * spec.height.min(spec.width) as f32;
    let two_sigma_sq = 2.0 * spec.blob_sigma * spec.blob_sigma;

    (0..count)
        .map(|i| {
            let label = i % spec.classes;
            let angle = std::f32::consts::TAU * label as f32 / spec.classes as f32;
            let cy = cy0 + radius * angle.sin() + jitter.sample(&mut rng);
            let cx = cx0 + radius * angle.cos() + jitter.sample(&mut rng);
            let amp = rng.gen_range(0.8..1.2);
            let mut elems = Vec::with_capacity(spec.channels * spec.height * spec.width);
            for _ in 0..spec.channels {
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let dy = y as f32 - cy;
                        let dx = x as f32 - cx;
                        let v = amp * (-(dy * dy + dx * dx) / two_sigma_sq).exp()
                            + noise.sample(&mut rng);
                        elems.push(v);
                    }
                }
            }
            Sample {
                input: Tensor::new(vec![spec.channels, spec.height, spec.width], elems)
                    .expect("generator shape is consistent"),
                label,
            }
        })
        .collect()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::IdxError(format!("truncated header: {e}")))?;
    Ok(u32::from_be_bytes(b))
}

/// Parses an IDX image file (magic 0x00000803) into `[1, rows, cols]`
/// tensors with pixel values scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let magic = read_be_u32(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxError(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut r)? as usize;
    let rows = read_be_u32(&mut r)? as usize;
    let cols = read_be_u32(&mut r)? as usize;
    if rows == 0 || cols == 0 || rows * cols > (1 << 24) {
        return Err(Error::IdxError(format!("bad image dims {rows}x{cols}")));
    }
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; rows * cols];
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::IdxError(format!("truncated at image {i} of {count}")))?;
        let elems: Vec<f32> = buf.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], elems).expect("image shape"));
    }
    Ok(images)
}

/// Parses an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let magic = read_be_u32(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxError(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)
        .map_err(|_| Error::IdxError("truncated label payload".into()))?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 64, 7);
        let b = generate_synthetic(&spec, 64, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.input.elems(), y.input.elems());
        }
        let c = generate_synthetic(&spec, 64, 8);
        assert_ne!(a[0].input.elems(), c[0].input.elems());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let sizes = SplitSizes { train: 40, calib: 20, val: 20, holdout: 20 };
        let bundle = load_dataset(
            &DataSource::Synthetic(SyntheticSpec::default()),
            &sizes,
            3,
        )
        .unwrap();
        assert_eq!(bundle.train.len(), 40);
        assert_eq!(bundle.calib.len(), 20);
        assert_eq!(bundle.val.len(), 20);
        assert_eq!(bundle.holdout.len(), 20);
    }

    fn write_idx_fixture(dir: &Path, n: usize, rows: usize, cols: usize) -> (PathBuf, PathBuf) {
        let img_path = dir.join("imgs.idx");
        let lbl_path = dir.join("lbls.idx");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        f.write_all(&vec![128u8; n * rows * cols]).unwrap();
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>()).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_files_parse_to_expected_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, _) = write_idx_fixture(dir.path(), 100, 8, 8);
        let tensors = load_idx_images(&imgs).unwrap();
        assert_eq!(tensors.len(), 100);
        assert_eq!(tensors[0].shape(), &[1, 8, 8]);
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0xdead_beefu32.to_be_bytes()).unwrap();
        assert!(matches!(load_idx_images(&path), Err(Error::IdxError(_))));
    }

    #[test]
    fn oversubscribed_splits_error() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_idx_fixture(dir.path(), 10, 4, 4);
        let sizes = SplitSizes { train: 10, calib: 4, val: 0, holdout: 0 };
        let err = load_dataset(
            &DataSource::Idx { images: imgs, labels: lbls },
            &sizes,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SplitError(_)));
    }
}
