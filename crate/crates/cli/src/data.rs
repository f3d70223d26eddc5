//! Dataset files and input preprocessing.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use simnet_core::synthetic::{gaussian_mixture_images, separable_2d};
use simnet_core::tensor::Tensor3;
use simnet_core::training::LabeledSet;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
/// Label byte followed by channel-planar pixels.
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
/// Coarse and fine label bytes followed by pixels.
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Cifar10,
    Cifar100,
    IdxRaster,
    Synthetic,
}

impl DataFormat {
    pub fn name(&self) -> &'static str {
        match self {
            DataFormat::Cifar10 => "cifar_binary",
            DataFormat::Cifar100 => "cifar100",
            DataFormat::IdxRaster => "idx_raster",
            DataFormat::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cifar_binary" | "cifar10" => DataFormat::Cifar10,
            "cifar100" => DataFormat::Cifar100,
            "idx_raster" => DataFormat::IdxRaster,
            "synthetic" => DataFormat::Synthetic,
            other => bail!("unknown data format {other:?} (cifar_binary, cifar100, idx_raster, synthetic)"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Two classes of 2-D points split by a line.
    Separable,
    /// Noisy copies of one random prototype image per class.
    Mixture,
}

impl SyntheticTask {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticTask::Separable => "separable",
            SyntheticTask::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "separable" => SyntheticTask::Separable,
            "mixture" => SyntheticTask::Mixture,
            other => bail!("unknown synthetic task {other:?} (separable, mixture)"),
        })
    }
}

/// Where and how to read one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Training files; for `idx_raster` an images file and a labels file.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub classes: usize,
    pub dims: (usize, usize, usize),
    /// Keep only these labels, renumbered `0..` in the listed order.
    pub select_classes: Vec<usize>,
    /// Keep the first `limit` training records after selection; 0 keeps all.
    pub limit: usize,
    pub mean_subtraction: bool,
    pub synthetic_task: SyntheticTask,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Synthetic,
            train: vec![],
            test: vec![],
            classes: 2,
            dims: (1, 1, 2),
            select_classes: vec![],
            limit: 0,
            mean_subtraction: false,
            synthetic_task: SyntheticTask::Separable,
            synthetic_count: 200,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    /// Number of labels the network sees after class selection.
    pub fn effective_classes(&self) -> usize {
        if self.select_classes.is_empty() {
            self.classes
        } else {
            self.select_classes.len()
        }
    }
}

fn scaled(byte: u8) -> f64 {
    f64::from(byte) / 255.0
}

fn cifar_records(bytes: &[u8], classes: usize, record: usize, label_byte: usize) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let whole = bytes.len() / record * record;
    if whole != bytes.len() {
        bail!(
            "byte {whole}: {} trailing bytes after {} complete {record}-byte records",
            bytes.len() - whole,
            bytes.len() / record
        );
    }
    let mut images = Vec::with_capacity(bytes.len() / record);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_byte] as usize;
        if label >= classes {
            bail!("byte {}: label {label} in record {i} is not below the class count {classes}", i * record + label_byte);
        }
        let px = &rec[record - CIFAR_PIXELS..];
        let mut data = vec![0.0; CIFAR_PIXELS];
        for c in 0..3 {
            for (k, &b) in px[c * plane..(c + 1) * plane].iter().enumerate() {
                data[k * 3 + c] = scaled(b);
            }
        }
        images.push(Tensor3::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// CIFAR-10 binary records: one label byte, then 1024 red, 1024 green and
/// 1024 blue bytes, each plane row-major.
pub fn parse_cifar10(bytes: &[u8], classes: usize) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    cifar_records(bytes, classes, CIFAR10_RECORD, 0)
}

/// CIFAR-100 binary records; the second (fine) label byte is used.
pub fn parse_cifar100(bytes: &[u8], classes: usize) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    cifar_records(bytes, classes, CIFAR100_RECORD, 1)
}

fn idx_header(bytes: &[u8], what: &str) -> Result<(Vec<usize>, usize)> {
    ensure!(bytes.len() >= 4, "byte {}: {what} file too short for the idx magic", bytes.len());
    ensure!(
        bytes[0] == 0 && bytes[1] == 0,
        "byte 0: {what} file does not start with an idx magic"
    );
    ensure!(bytes[2] == 0x08, "byte 2: {what} file holds type 0x{:02x}, only unsigned bytes are read", bytes[2]);
    let nd = bytes[3] as usize;
    let end = 4 + 4 * nd;
    ensure!(bytes.len() >= end, "byte {}: {what} header truncated, needs {end} bytes", bytes.len());
    let dims = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    Ok((dims, end))
}

/// IDX raster pair: unsigned-byte images shaped `N x H x W` or
/// `N x H x W x C`, and `N` unsigned-byte labels.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let (dims, start) = idx_header(images, "image")?;
    let (n, h, w, c) = match dims[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => bail!("byte 3: image file has {} dims, expected 3 or 4", dims.len()),
    };
    let size = h * w * c;
    let expected = start + n * size;
    ensure!(
        images.len() == expected,
        "byte {}: image file is {} bytes, header implies {expected}",
        expected.min(images.len()),
        images.len()
    );
    let (ldims, lstart) = idx_header(labels, "label")?;
    ensure!(ldims == [n], "byte 4: label file holds {ldims:?} entries for {n} images");
    ensure!(
        labels.len() == lstart + n,
        "byte {}: label file is {} bytes, header implies {}",
        (lstart + n).min(labels.len()),
        labels.len(),
        lstart + n
    );
    let mut out = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = labels[lstart + i] as usize;
        if label >= classes {
            bail!("byte {}: label {label} of image {i} is not below the class count {classes}", lstart + i);
        }
        let px = &images[start + i * size..start + (i + 1) * size];
        out.push(Tensor3::new(h, w, c, px.iter().map(|&b| scaled(b)).collect())?);
        ys.push(label);
    }
    Ok((out, ys))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_files(cfg: &DataConfig, files: &[PathBuf]) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    match cfg.format {
        DataFormat::Cifar10 | DataFormat::Cifar100 => {
            for f in files {
                let bytes = read(f)?;
                let parsed = if cfg.format == DataFormat::Cifar10 {
                    parse_cifar10(&bytes, cfg.classes)
                } else {
                    parse_cifar100(&bytes, cfg.classes)
                };
                let (im, lb) = parsed.with_context(|| format!("in {}", f.display()))?;
                images.extend(im);
                labels.extend(lb);
            }
        }
        DataFormat::IdxRaster => {
            let [im, lb] = files else {
                bail!("idx_raster needs exactly two files (images, labels), got {}", files.len());
            };
            let (i, l) = parse_idx(&read(im)?, &read(lb)?, cfg.classes)
                .with_context(|| format!("in {} / {}", im.display(), lb.display()))?;
            images = i;
            labels = l;
        }
        DataFormat::Synthetic => unreachable!("synthetic data has no files"),
    }
    if let Some(im) = images.first() {
        ensure!(
            im.dims() == cfg.dims,
            "images are {:?} but the config declares {:?}",
            im.dims(),
            cfg.dims
        );
    }
    Ok((images, labels))
}

fn select(cfg: &DataConfig, images: Vec<Tensor3>, labels: Vec<usize>) -> Result<LabeledSet> {
    if cfg.select_classes.is_empty() {
        return Ok(LabeledSet::new(images, labels)?);
    }
    let (mut im, mut lb) = (Vec::new(), Vec::new());
    for (x, y) in images.into_iter().zip(labels) {
        if let Some(pos) = cfg.select_classes.iter().position(|&c| c == y) {
            im.push(x);
            lb.push(pos);
        }
    }
    Ok(LabeledSet::new(im, lb)?)
}

fn synthetic(cfg: &DataConfig, count: usize, seed: u64) -> Result<LabeledSet> {
    Ok(match cfg.synthetic_task {
        SyntheticTask::Separable => {
            ensure!(
                cfg.dims == (1, 1, 2) && cfg.classes == 2,
                "the separable task is 2 classes of 1x1x2 inputs"
            );
            separable_2d(count, seed)?
        }
        SyntheticTask::Mixture => gaussian_mixture_images(count, cfg.dims, cfg.classes, seed)?,
    })
}

/// Training split after class selection and `limit`.
pub fn load_train(cfg: &DataConfig) -> Result<LabeledSet> {
    let set = match cfg.format {
        DataFormat::Synthetic => synthetic(cfg, cfg.synthetic_count, cfg.synthetic_seed)?,
        _ => {
            ensure!(!cfg.train.is_empty(), "no training files configured");
            let (im, lb) = load_files(cfg, &cfg.train)?;
            select(cfg, im, lb)?
        }
    };
    Ok(if cfg.limit > 0 { set.truncated(cfg.limit) } else { set })
}

/// Test split after class selection; the synthetic test set uses the next seed.
pub fn load_test(cfg: &DataConfig) -> Result<LabeledSet> {
    match cfg.format {
        DataFormat::Synthetic => synthetic(cfg, cfg.synthetic_count, cfg.synthetic_seed.wrapping_add(1)),
        _ => {
            ensure!(!cfg.test.is_empty(), "no test files configured");
            let (im, lb) = load_files(cfg, &cfg.test)?;
            select(cfg, im, lb)
        }
    }
}

/// Per-channel means over every pixel of `set`.
pub fn channel_means(set: &LabeledSet) -> Vec<f64> {
    let Some(first) = set.images().first() else { return vec![] };
    let c = first.channels();
    let mut sums = vec![0.0; c];
    for im in set.images() {
        for (i, v) in im.data().iter().enumerate() {
            sums[i % c] += v;
        }
    }
    let count = (set.len() * first.height() * first.width()) as f64;
    sums.iter().map(|s| s / count).collect()
}

/// Subtracts `means` from every pixel.
pub fn subtract_means(set: LabeledSet, means: &[f64]) -> Result<LabeledSet> {
    let labels = set.labels().to_vec();
    let images = set
        .images()
        .iter()
        .map(|im| {
            let (h, w, c) = im.dims();
            ensure!(c == means.len(), "{} channel means for {c}-channel images", means.len());
            let data = im.data().iter().enumerate().map(|(i, v)| v - means[i % c]).collect();
            Ok(Tensor3::new(h, w, c, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSet::new(images, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn single_cifar_record() {
        let bytes = record(7, |i| (i % 251) as u8);
        let (im, lb) = parse_cifar10(&bytes, 10).unwrap();
        assert_eq!((im.len(), lb[0]), (1, 7));
        // green plane, row 2, column 5
        let k = 1024 + 2 * 32 + 5;
        assert_eq!(im[0].get(2, 5, 1), (k % 251) as f64 / 255.0);
    }

    #[test]
    fn truncation_names_the_trailing_byte() {
        let mut bytes: Vec<u8> = (0..10).flat_map(|i| record(i, |_| 0)).collect();
        bytes.push(0);
        let e = parse_cifar10(&bytes, 10).unwrap_err().to_string();
        assert!(e.contains("byte 30730") && e.contains("1 trailing"), "{e}");
    }

    #[test]
    fn bad_label_reports_offset() {
        let bytes: Vec<u8> = [record(1, |_| 0), record(12, |_| 0)].concat();
        let e = parse_cifar10(&bytes, 10).unwrap_err().to_string();
        assert!(e.contains(&format!("byte {CIFAR10_RECORD}")), "{e}");
    }

    #[test]
    fn handcrafted_two_records() {
        let bytes: Vec<u8> = [record(0, |i| (i * 7 % 256) as u8), record(9, |i| 255 - (i % 256) as u8)].concat();
        let (im, lb) = parse_cifar10(&bytes, 10).unwrap();
        assert_eq!(lb, [0, 9]);
        for (n, img) in im.iter().enumerate() {
            let rec = &bytes[n * CIFAR10_RECORD + 1..(n + 1) * CIFAR10_RECORD];
            for c in 0..3 {
                for r in 0..32 {
                    for col in 0..32 {
                        assert_eq!(img.get(r, col, c), f64::from(rec[c * 1024 + r * 32 + col]) / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn cifar100_uses_the_fine_label() {
        let mut bytes = vec![3u8, 42];
        bytes.extend(std::iter::repeat_n(128u8, CIFAR_PIXELS));
        let (_, lb) = parse_cifar100(&bytes, 100).unwrap();
        assert_eq!(lb, [42]);
        assert!(parse_cifar100(&bytes, 20).is_err());
    }

    fn idx(dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn idx_pair() {
        let images = idx(&[2, 2, 3], &[0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]);
        let labels = idx(&[2], &[1, 0]);
        let (im, lb) = parse_idx(&images, &labels, 2).unwrap();
        assert_eq!(lb, [1, 0]);
        assert_eq!(im[0].dims(), (2, 3, 1));
        assert_eq!(im[0].get(0, 2, 0), 51.0 / 255.0);
        assert!(parse_idx(&images[..images.len() - 1], &labels, 2).is_err());
        assert!(parse_idx(&images, &idx(&[2], &[1, 5]), 2).is_err());
        assert!(parse_idx(&images, &idx(&[3], &[1, 0, 0]), 2).is_err());
    }

    #[test]
    fn selection_and_means() {
        let cfg = DataConfig {
            format: DataFormat::Synthetic,
            synthetic_task: SyntheticTask::Mixture,
            dims: (3, 3, 2),
            classes: 3,
            synthetic_count: 9,
            ..DataConfig::default()
        };
        let set = load_train(&cfg).unwrap();
        let images = set.images().to_vec();
        let labels = set.labels().to_vec();
        let picked = select(
            &DataConfig {
                select_classes: vec![2, 0],
                ..cfg.clone()
            },
            images,
            labels,
        )
        .unwrap();
        assert_eq!(picked.labels(), [1, 0, 1, 0, 1, 0]);
        let means = channel_means(&set);
        let centered = subtract_means(set, &means).unwrap();
        assert!(channel_means(&centered).iter().all(|m| m.abs() < 1e-12));
    }
}
