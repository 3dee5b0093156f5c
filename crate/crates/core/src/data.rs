//! Image datasets: file loaders, the procedural desk benchmark and seeded
//! subsets.
//!
//! Three on-disk formats are read:
//!
//! * `cifar10-bin`: records of 3073 bytes, one label byte followed by
//!   3×32×32 pixel bytes in channel-major order. A directory argument loads
//!   every `*.bin` file in name order.
//! * `idx`: the big-endian magic-number format used by MNIST. Pixel files
//!   have magic `0x00000803` (N×H×W) or `0x00000804` (N×C×H×W), label files
//!   `0x00000801`. The path is the image file; the label file is found by
//!   replacing `images` with `labels` (and `idx3`/`idx4` with `idx1`) in its
//!   name. A directory argument must contain exactly one of each.
//! * `raw`: little-endian, magic `SCRW`, then `u32` version (1), `u32` fields
//!   N, C, H, W, num_classes, then N `u32` labels, then N·C·H·W `f32` pixels
//!   in [0,1].

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const CIFAR_RECORD: usize = 3073;
pub const RAW_MAGIC: &[u8; 4] = b"SCRW";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in [0,1], stored N×C×H×W row-major, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let ds = Dataset { images, labels, channels, height, width, num_classes, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Data("dataset has no examples".into()));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} examples of {}×{}×{}",
                self.images.len(),
                self.labels.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {l} at example {i} is outside [0, {})",
                self.num_classes
            )));
        }
        if let Some(i) = self.images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "pixel {i} has value {} outside [0,1]",
                self.images[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images at `idx` packed into one buffer.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut px = Vec::with_capacity(idx.len() * self.image_len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            px.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (px, labels)
    }

    /// Images at `idx` as a `[B, C, H, W]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let (px, _) = self.gather(idx);
        Tensor::new(vec![idx.len(), self.channels, self.height, self.width], px)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.gather(idx);
        Dataset { images, labels, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Deterministic random subset of `n` examples (all of them when the
    /// dataset is smaller), kept in original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, Domain::Subset, 0, 0));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(28 + 4 * (self.len() + self.images.len()));
        out.extend_from_slice(RAW_MAGIC);
        for v in [1, self.len(), self.channels, self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &p in &self.images {
            out.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Cifar10Bin,
    Idx,
    Raw,
    /// Procedural benchmark, see [`DeskSpec`].
    Desk,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Cifar10Bin => "cifar10-bin",
            DataFormat::Idx => "idx",
            DataFormat::Raw => "raw",
            DataFormat::Desk => "desk",
        })
    }
}

impl FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-bin" | "cifar10" => Ok(DataFormat::Cifar10Bin),
            "idx" => Ok(DataFormat::Idx),
            "raw" | "raw-npy-like" => Ok(DataFormat::Raw),
            "desk" => Ok(DataFormat::Desk),
            _ => Err(Error::config("data.format", format!("unknown format `{s}`"))),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DataFormat::Cifar10Bin => load_cifar10(path, split),
        DataFormat::Idx => load_idx(path, split),
        DataFormat::Raw => load_raw(path, split),
        DataFormat::Desk => Err(Error::Data(
            "desk datasets are generated, not loaded; use DeskSpec".into(),
        )),
    }
}

fn read_nonempty(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

fn sorted_entries(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(&keep) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let files = if path.is_dir() {
        let f = sorted_entries(path, |n| n.ends_with(".bin"))?;
        if f.is_empty() {
            return Err(Error::Data(format!("no .bin files in {}", path.display())));
        }
        f
    } else {
        vec![path.to_path_buf()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let bytes = read_nonempty(&file)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Data(format!(
                    "{}: label {} at record {} exceeds 9",
                    file.display(),
                    rec[0],
                    labels.len()
                )));
            }
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(images, labels, (3, 32, 32), 10, split)
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

fn idx_pair(path: &Path) -> Result<(PathBuf, PathBuf)> {
    if path.is_dir() {
        let imgs = sorted_entries(path, |n| n.contains("images"))?;
        let lbls = sorted_entries(path, |n| n.contains("labels"))?;
        return match (imgs.as_slice(), lbls.as_slice()) {
            ([i], [l]) => Ok((i.clone(), l.clone())),
            _ => Err(Error::Data(format!(
                "{} must hold exactly one *images* and one *labels* file",
                path.display()
            ))),
        };
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if !name.contains("images") {
        return Err(Error::Data(format!(
            "cannot derive a label file from `{name}` (expected `images` in the name)"
        )));
    }
    let label_name = name.replacen("images", "labels", 1).replace("idx3", "idx1").replace("idx4", "idx1");
    Ok((path.to_path_buf(), path.with_file_name(label_name)))
}

fn load_idx(path: &Path, split: Split) -> Result<Dataset> {
    let (ipath, lpath) = idx_pair(path)?;
    let ib = read_nonempty(&ipath)?;
    let lb = read_nonempty(&lpath)?;
    if ib.len() < 4 || lb.len() < 8 {
        return Err(Error::Data("idx header truncated".into()));
    }
    let magic = be_u32(&ib, 0);
    let (n, c, h, w, header) = match magic {
        0x0803 if ib.len() >= 16 => (be_u32(&ib, 4), 1, be_u32(&ib, 8), be_u32(&ib, 12), 16),
        0x0804 if ib.len() >= 20 => (be_u32(&ib, 4), be_u32(&ib, 8), be_u32(&ib, 12), be_u32(&ib, 16), 20),
        0x0803 | 0x0804 => return Err(Error::Data("idx header truncated".into())),
        m => return Err(Error::Data(format!("{}: bad idx image magic {m:#010x}", ipath.display()))),
    };
    if be_u32(&lb, 0) != 0x0801 {
        return Err(Error::Data(format!(
            "{}: bad idx label magic {:#010x}",
            lpath.display(),
            be_u32(&lb, 0)
        )));
    }
    let (n, c, h, w) = (n as usize, c as usize, h as usize, w as usize);
    if be_u32(&lb, 4) as usize != n {
        return Err(Error::Data(format!("{n} images but {} labels", be_u32(&lb, 4))));
    }
    if ib.len() != header + n * c * h * w || lb.len() != 8 + n {
        return Err(Error::Data("idx payload size does not match its header".into()));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let images = ib[header..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(images, labels, (c, h, w), num_classes, split)
}

fn load_raw(path: &Path, split: Split) -> Result<Dataset> {
    let b = read_nonempty(path)?;
    if b.len() < 28 || &b[..4] != RAW_MAGIC {
        return Err(Error::Data(format!("{}: not a raw dataset (bad magic)", path.display())));
    }
    let field = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != 1 {
        return Err(Error::Data(format!("raw dataset version {} is unsupported", field(0))));
    }
    let (n, c, h, w, k) = (field(1), field(2), field(3), field(4), field(5));
    let expect = 28 + 4 * n + 4 * n * c * h * w;
    if b.len() != expect {
        return Err(Error::Data(format!("raw dataset has {} bytes, header implies {expect}", b.len())));
    }
    let labels = b[28..28 + 4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let images = b[28 + 4 * n..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Dataset::new(images, labels, (c, h, w), k, split)
}

/// Procedural image families of the desk benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeskFamily {
    /// Class = (dominant colour, grating orientation): 5 colours × 2
    /// orientations.
    Gratings,
    /// Class = (blob position, warm/cool tint): 5 positions × 2 tints. Used
    /// as the transfer target.
    Blobs,
    /// Both families under 20 labels: gratings take 0..10 and blobs 10..20.
    /// A broad pretraining source for transfer experiments.
    Mixed,
}

impl DeskFamily {
    pub fn num_classes(self) -> usize {
        match self {
            DeskFamily::Mixed => 20,
            _ => 10,
        }
    }
}

impl FromStr for DeskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gratings" => Ok(DeskFamily::Gratings),
            "blobs" => Ok(DeskFamily::Blobs),
            "mixed" => Ok(DeskFamily::Mixed),
            _ => Err(Error::config("data.path", format!("unknown desk family `{s}`"))),
        }
    }
}

impl fmt::Display for DeskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeskFamily::Gratings => "gratings",
            DeskFamily::Blobs => "blobs",
            DeskFamily::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSpec {
    pub family: DeskFamily,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
}

impl DeskSpec {
    pub fn new(family: DeskFamily, image_size: usize, count: usize, seed: u64) -> Self {
        DeskSpec { family, image_size, count, seed }
    }

    /// Generates the split; train and test draw from disjoint streams.
    /// Labels cycle through the classes so every class is balanced.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        if self.image_size < 4 || self.count == 0 {
            return Err(Error::config("data", "desk data needs image_size ≥ 4 and count ≥ 1"));
        }
        let s = self.image_size;
        let per = 3 * s * s;
        let mut images = vec![0f32; self.count * per];
        let mut labels = Vec::with_capacity(self.count);
        let tag = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        for (i, img) in images.chunks_exact_mut(per).enumerate() {
            let classes = self.family.num_classes();
            let label = i % classes;
            let mut r = rng::stream(self.seed, Domain::Data, tag, i as u64);
            match self.family {
                DeskFamily::Gratings => draw_grating(img, s, label, &mut r),
                DeskFamily::Blobs => draw_blob(img, s, label, &mut r),
                DeskFamily::Mixed if label < 10 => draw_grating(img, s, label, &mut r),
                DeskFamily::Mixed => draw_blob(img, s, label - 10, &mut r),
            }
            labels.push(label);
        }
        Dataset::new(images, labels, (3, s, s), self.family.num_classes(), split)
    }
}

const PALETTE: [[f32; 3]; 5] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.75, 0.25],
    [0.2, 0.3, 0.85],
    [0.85, 0.8, 0.2],
    [0.7, 0.25, 0.8],
];

fn draw_grating<R: Rng>(img: &mut [f32], s: usize, label: usize, r: &mut R) {
    let colour = PALETTE[label / 2];
    let vertical = label % 2 == 1;
    let period = r.random_range(5.0..8.0f32);
    let phase = r.random_range(0.0..std::f32::consts::TAU);
    let contrast = r.random_range(0.25..0.4f32);
    let jitter: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.08..0.08f32));
    for y in 0..s {
        for x in 0..s {
            let t = if vertical { x } else { y } as f32;
            let wave = (std::f32::consts::TAU * t / period + phase).sin();
            let speck = r.random_range(-0.05..0.05f32);
            for (ch, c) in colour.iter().enumerate() {
                let v = 0.5 * (c + jitter[ch]) + 0.25 + contrast * wave * 0.5 + speck;
                img[ch * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn draw_blob<R: Rng>(img: &mut [f32], s: usize, label: usize, r: &mut R) {
    let sf = s as f32;
    let centres = [(0.27, 0.27), (0.73, 0.27), (0.27, 0.73), (0.73, 0.73), (0.5, 0.5)];
    let (cx, cy) = centres[label / 2];
    let cx = (cx + r.random_range(-0.05..0.05f32)) * sf;
    let cy = (cy + r.random_range(-0.05..0.05f32)) * sf;
    let radius = r.random_range(0.16..0.22f32) * sf;
    let tint = if label.is_multiple_of(2) { [0.95, 0.55, 0.2] } else { [0.2, 0.55, 0.95] };
    let bg = r.random_range(0.15..0.3f32);
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            let w = (-d2 / (2.0 * radius * radius)).exp();
            let speck = r.random_range(-0.05..0.05f32);
            for (ch, t) in tint.iter().enumerate() {
                let v = bg + w * (t - bg) + speck;
                img[ch * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..3072).map(|j| ((i + j) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let bytes = cifar_bytes(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3]);
        assert_eq!(bytes.len(), 30730);
        fs::write(&p, &bytes).unwrap();
        let ds = load_dataset(&p, DataFormat::Cifar10Bin, Split::Test).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels[0], 3);
        assert_eq!(ds.image(0)[1], 1.0 / 255.0);

        fs::write(&p, &bytes[..30729]).unwrap();
        assert!(load_dataset(&p, DataFormat::Cifar10Bin, Split::Test).is_err());
        fs::write(&p, b"").unwrap();
        assert!(load_dataset(&p, DataFormat::Cifar10Bin, Split::Test).is_err());
        fs::write(&p, cifar_bytes(&[10])).unwrap();
        assert!(load_dataset(&p, DataFormat::Cifar10Bin, Split::Test)
            .unwrap_err()
            .to_string()
            .contains("label 10"));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 1, 2, 3, 4]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 2];
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img).unwrap();
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), &lbl).unwrap();
        let ds = load_dataset(dir.path().join("t10k-images-idx3-ubyte"), DataFormat::Idx, Split::Test).unwrap();
        assert_eq!((ds.len(), ds.channels, ds.height), (2, 1, 2));
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.image(0), &[0.0, 1.0, 0.2, 0.4]);
        let from_dir = load_dataset(dir.path(), DataFormat::Idx, Split::Test).unwrap();
        assert_eq!(from_dir, ds);

        img[3] = 9;
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img).unwrap();
        assert!(load_dataset(dir.path(), DataFormat::Idx, Split::Test).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let ds = DeskSpec::new(DeskFamily::Blobs, 8, 12, 3).generate(Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        ds.write_raw(&p).unwrap();
        assert_eq!(load_dataset(&p, DataFormat::Raw, Split::Train).unwrap(), ds);
        let mut b = fs::read(&p).unwrap();
        b.pop();
        fs::write(&p, b).unwrap();
        assert!(load_dataset(&p, DataFormat::Raw, Split::Train).is_err());
    }

    #[test]
    fn desk_is_deterministic_balanced_and_in_range() {
        for family in [DeskFamily::Gratings, DeskFamily::Blobs] {
            let spec = DeskSpec::new(family, 16, 40, 11);
            let a = spec.generate(Split::Train).unwrap();
            assert_eq!(a, spec.generate(Split::Train).unwrap());
            assert_ne!(a.images, spec.generate(Split::Test).unwrap().images);
            for c in 0..10 {
                assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
            }
        }
    }

    #[test]
    fn subset_is_seeded_and_ordered() {
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 50, 1).generate(Split::Test).unwrap();
        let s = ds.subset(20, 9);
        assert_eq!(s.len(), 20);
        assert_eq!(s, ds.subset(20, 9));
        assert_ne!(s, ds.subset(20, 10));
        assert_eq!(ds.subset(500, 9), ds);
    }
}
