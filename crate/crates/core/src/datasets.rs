//! Binary image datasets: bars and stripes, MNIST IDX ingestion, stochastic
//! binarization, 8×8 downsampling, splits and per-mode assignment.
//!
//! The dataset cache is a little-endian binary file:
//! `"PDSC"`, version `u32`, count `u64`, H, W, d as `u32`, binarization seed
//! `u64`, seed-present flag `u8`, split `u8`, labels-present flag `u8`, then
//! every configuration packed (one bit per pixel when `d == 2`, else one byte)
//! and padded to a whole byte, then `u32` labels when present.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{PepsError, Result};
use crate::peps::GridConfig;
use crate::rng::stream_rng;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;
const CACHE_MAGIC: &[u8; 4] = b"PDSC";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Validation,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::All => 0,
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Split::All,
            1 => Split::Train,
            2 => Split::Validation,
            3 => Split::Test,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub configs: Vec<GridConfig>,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub phys_dim: usize,
    /// Seed used to binarize greyscale images, when applicable.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(
        configs: Vec<GridConfig>,
        labels: Option<Vec<usize>>,
        height: usize,
        width: usize,
        phys_dim: usize,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != configs.len() {
                return Err(PepsError::shape(format!(
                    "{} labels for {} configurations",
                    l.len(),
                    configs.len()
                )));
            }
        }
        for (i, x) in configs.iter().enumerate() {
            if x.height() != height || x.width() != width || x.max_value() >= phys_dim {
                return Err(PepsError::shape(format!(
                    "configuration {i} does not fit a {height}x{width} grid with d = {phys_dim}"
                )));
            }
        }
        Ok(Dataset {
            configs,
            labels,
            split: Split::All,
            height,
            width,
            phys_dim,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// The examples at `idx`, in that order, tagged with `split`.
    pub fn select(&self, idx: impl IntoIterator<Item = usize>, split: Split) -> Dataset {
        let idx: Vec<usize> = idx.into_iter().collect();
        Dataset {
            configs: idx.iter().map(|&i| self.configs[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            split,
            height: self.height,
            width: self.width,
            phys_dim: self.phys_dim,
            seed: self.seed,
        }
    }
}

/// Every `L×L` pattern whose rows are uniform (stripes) or whose columns are
/// uniform (bars), without duplicates: stripes in order of their row bits,
/// then the bars that are not also stripes.
pub fn gen_bars_stripes(side: usize) -> Dataset {
    assert!(side >= 1, "side must be positive");
    assert!(side < 32, "side too large to enumerate");
    let mut configs: Vec<GridConfig> = Vec::new();
    for bits in 0..1u64 << side {
        let bit = |i: usize| ((bits >> (side - 1 - i)) & 1) as u8;
        let mut stripe = GridConfig::zeros(side, side);
        let mut bar = GridConfig::zeros(side, side);
        for r in 0..side {
            for c in 0..side {
                stripe.set(r, c, bit(r));
                bar.set(r, c, bit(c));
            }
        }
        configs.push(stripe);
        if bits != 0 && bits != (1u64 << side) - 1 && side > 1 {
            configs.push(bar);
        }
    }
    Dataset::new(configs, None, side, side, 2).expect("binary patterns")
}

/// Greyscale images with optional labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreyImages {
    pub height: usize,
    pub width: usize,
    /// Raster-ordered pixels of every image, concatenated.
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

impl GreyImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.height * self.width).max(1)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| PepsError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| PepsError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PepsError::format(offset as u64, "truncated IDX header"))
}

/// Parses an IDX image file (magic 2051).
pub fn parse_idx_images(bytes: &[u8]) -> Result<GreyImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(PepsError::format(
            0,
            format!("bad IDX image magic {magic}, expected {IMAGE_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let height = be_u32(bytes, 8)? as usize;
    let width = be_u32(bytes, 12)? as usize;
    let need = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| PepsError::format(4, "IDX dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(PepsError::format(
            bytes.len() as u64,
            format!("IDX image payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(PepsError::format(
            (16 + need) as u64,
            "trailing bytes after IDX image payload",
        ));
    }
    Ok(GreyImages {
        height,
        width,
        pixels: payload.to_vec(),
        labels: None,
    })
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(PepsError::format(
            0,
            format!("bad IDX label magic {magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        let offset = if payload.len() < count { bytes.len() } else { 8 + count };
        return Err(PepsError::format(
            offset as u64,
            format!("IDX label payload has {} bytes, header says {count}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Loads IDX images and optional labels; gzip-compressed files are accepted.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<GreyImages> {
    let mut out = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    if let Some(path) = labels {
        let l = parse_idx_labels(&read_maybe_gz(path)?)?;
        if l.len() != out.count() {
            return Err(PepsError::format(
                4,
                format!("{} labels for {} images", l.len(), out.count()),
            ));
        }
        out.labels = Some(l);
    }
    Ok(out)
}

/// Sets each pixel to 1 with probability `v/255`. Image `i` draws from its
/// own stream of `seed`, one uniform per pixel in raster order.
pub fn binarize(images: &GreyImages, seed: u64) -> Dataset {
    let (h, w) = (images.height, images.width);
    let configs: Vec<GridConfig> = (0..images.count())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let values = images
                .image(i)
                .iter()
                .map(|&v| u8::from(rng.gen::<f64>() * 255.0 < f64::from(v)))
                .collect();
            GridConfig::new(h, w, values).expect("grid size matches")
        })
        .collect();
    let labels = images
        .labels
        .as_ref()
        .map(|l| l.iter().map(|&v| usize::from(v)).collect());
    let mut ds = Dataset::new(configs, labels, h, w, 2).expect("binary configurations");
    ds.seed = Some(seed);
    ds
}

/// Averages the central `3·target` square crop over 3×3 blocks, rounding to
/// the nearest integer. Only 28×28 sources with `target == 8` are supported.
pub fn downsample(images: &GreyImages, target: usize) -> Result<GreyImages> {
    if images.height != 28 || images.width != 28 || target != 8 {
        return Err(PepsError::shape(format!(
            "downsampling supports 28x28 to 8x8, got {}x{} to {target}x{target}",
            images.height, images.width
        )));
    }
    let offset = (28 - 3 * target) / 2;
    let mut pixels = Vec::with_capacity(images.count() * target * target);
    for i in 0..images.count() {
        let img = images.image(i);
        for br in 0..target {
            for bc in 0..target {
                let mut sum = 0u32;
                for r in 0..3 {
                    for c in 0..3 {
                        sum += u32::from(img[(offset + 3 * br + r) * 28 + offset + 3 * bc + c]);
                    }
                }
                pixels.push(((sum + 4) / 9) as u8);
            }
        }
    }
    Ok(GreyImages {
        height: target,
        width: target,
        pixels,
        labels: images.labels.clone(),
    })
}

/// First `n_train` examples (file order) as training set, the rest as
/// validation set.
pub fn split_train_validation(ds: &Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= ds.len() {
        return Err(PepsError::Input(format!(
            "cannot split {} examples with {n_train} for training",
            ds.len()
        )));
    }
    Ok((
        ds.select(0..n_train, Split::Train),
        ds.select(n_train..ds.len(), Split::Validation),
    ))
}

pub enum ModeSource<'a> {
    Labels,
    /// Text with one `index,cluster` row per example.
    ClusterText(&'a str),
}

/// Parses `index,cluster` rows covering every index in `0..n`. A leading
/// header row and blank lines are skipped.
pub fn parse_cluster_assignments(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut out: Vec<Option<usize>> = vec![None; n];
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (row == 0 && line.eq_ignore_ascii_case("index,cluster")) {
            continue;
        }
        let bad = |msg: &str| PepsError::Input(format!("cluster file row {}: {msg}", row + 1));
        let (i, c) = line.split_once(',').ok_or_else(|| bad("expected `index,cluster`"))?;
        let i: usize = i.trim().parse().map_err(|_| bad("index is not a non-negative integer"))?;
        let c: usize = c.trim().parse().map_err(|_| bad("cluster is not a non-negative integer"))?;
        if i >= n {
            return Err(bad(&format!("index {i} out of range for {n} examples")));
        }
        if out[i].replace(c).is_some() {
            return Err(bad(&format!("index {i} assigned twice")));
        }
    }
    out.iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| PepsError::Input(format!("cluster file has no row for index {i}")))
        })
        .collect()
}

/// Mode id of every example.
pub fn mode_ids(ds: &Dataset, source: ModeSource<'_>) -> Result<Vec<usize>> {
    match source {
        ModeSource::Labels => ds
            .labels
            .clone()
            .ok_or_else(|| PepsError::Input("dataset has no labels to assign modes by".into())),
        ModeSource::ClusterText(text) => parse_cluster_assignments(text, ds.len()),
    }
}

/// Example indices of each mode `0..=max id`, in file order.
pub fn group_by_mode(ids: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let modes = groups.keys().next_back().map_or(0, |m| m + 1);
    (0..modes)
        .map(|m| groups.remove(&m).ok_or(PepsError::EmptyMode(m)))
        .collect()
}

/// Partitions examples into modes `0..=max id`. Mode order follows the id;
/// examples keep their relative order.
pub fn split_assign(ds: &Dataset, source: ModeSource<'_>) -> Result<Vec<Dataset>> {
    let ids = mode_ids(ds, source)?;
    Ok(group_by_mode(&ids)?
        .into_iter()
        .map(|idx| ds.select(idx, ds.split))
        .collect())
}

fn bits_per_value(d: usize) -> usize {
    if d == 2 {
        1
    } else {
        8
    }
}

/// Packs a configuration, one bit per value for binary data, MSB first.
pub fn pack_config(x: &GridConfig, d: usize) -> Vec<u8> {
    if bits_per_value(d) == 8 {
        return x.values().to_vec();
    }
    let mut out = vec![0u8; x.values().len().div_ceil(8)];
    for (i, &v) in x.values().iter().enumerate() {
        out[i / 8] |= (v & 1) << (7 - i % 8);
    }
    out
}

fn unpack_config(bytes: &[u8], h: usize, w: usize, d: usize) -> GridConfig {
    let values = if bits_per_value(d) == 8 {
        bytes.to_vec()
    } else {
        (0..h * w).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
    };
    GridConfig::new(h, w, values).expect("sized by header")
}

pub fn write_dataset_cache<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for v in [ds.height, ds.width, ds.phys_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ds.seed.unwrap_or(0).to_le_bytes());
    buf.push(u8::from(ds.seed.is_some()));
    buf.push(ds.split.code());
    buf.push(u8::from(ds.labels.is_some()));
    for x in &ds.configs {
        buf.extend_from_slice(&pack_config(x, ds.phys_dim));
    }
    if let Some(l) = &ds.labels {
        for &v in l {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_dataset_cache<R: Read>(mut r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| PepsError::format(0, format!("read failed: {e}")))?;
    let mut cur = Cursor::new(&bytes[..]);
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let at = cur.position() as usize;
        let slice = bytes
            .get(at..at + n)
            .ok_or_else(|| PepsError::format(at as u64, format!("truncated {what}")))?;
        cur.set_position((at + n) as u64);
        Ok(slice)
    };
    if take(4, "magic")? != CACHE_MAGIC {
        return Err(PepsError::format(0, "not a dataset cache"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_at(take(4, "version")?);
    if version != CACHE_VERSION {
        return Err(PepsError::format(4, format!("unsupported dataset cache version {version}")));
    }
    let count = u64_at(take(8, "count")?) as usize;
    let h = u32_at(take(4, "height")?) as usize;
    let w = u32_at(take(4, "width")?) as usize;
    let d = u32_at(take(4, "phys_dim")?) as usize;
    if h == 0 || w == 0 || !(2..=256).contains(&d) {
        return Err(PepsError::format(16, format!("invalid grid {h}x{w} with d = {d}")));
    }
    let seed = u64_at(take(8, "seed")?);
    let flags = take(3, "flags")?.to_vec();
    let split = Split::from_code(flags[1])
        .ok_or_else(|| PepsError::format(37, format!("unknown split code {}", flags[1])))?;
    let per = (h * w * bits_per_value(d)).div_ceil(8);
    let mut configs = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let at = take(per, &format!("configuration {i}"))?.to_vec();
        let x = unpack_config(&at, h, w, d);
        if x.max_value() >= d {
            return Err(PepsError::format(
                0,
                format!("configuration {i} has a value beyond d = {d}"),
            ));
        }
        configs.push(x);
    }
    let labels = if flags[2] == 1 {
        let mut l = Vec::with_capacity(count);
        for i in 0..count {
            l.push(u32_at(take(4, &format!("label {i}"))?) as usize);
        }
        Some(l)
    } else {
        None
    };
    let end = cur.position();
    if (end as usize) != bytes.len() {
        return Err(PepsError::format(end, "trailing bytes after dataset"));
    }
    let mut ds = Dataset::new(configs, labels, h, w, d)?;
    ds.split = split;
    ds.seed = (flags[0] == 1).then_some(seed);
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| PepsError::io(path, e))?;
    write_dataset_cache(ds, std::io::BufWriter::new(f)).map_err(|e| PepsError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| PepsError::io(path, e))?;
    read_dataset_cache(std::io::BufReader::new(f))
}
