//! File outputs: tiled PGM images, histograms and key=value manifests.

use std::collections::BTreeMap;
use std::path::Path;

use peps_core::peps::GridConfig;
use peps_core::PepsError;

pub const TILES_PER_ROW: usize = 10;

/// Binary PGM (P5) with the configurations tiled `TILES_PER_ROW` per row,
/// separated by one grey pixel. Value 1 is white.
pub fn tiled_pgm(configs: &[GridConfig], height: usize, width: usize) -> Vec<u8> {
    let n = configs.len();
    let cols = n.min(TILES_PER_ROW);
    let rows = n.div_ceil(TILES_PER_ROW);
    let (img_w, img_h) = if n == 0 {
        (0, 0)
    } else {
        (cols * (width + 1) - 1, rows * (height + 1) - 1)
    };
    let mut pixels = vec![128u8; img_w * img_h];
    for (k, x) in configs.iter().enumerate() {
        let (tr, tc) = (k / TILES_PER_ROW, k % TILES_PER_ROW);
        for r in 0..height {
            for c in 0..width {
                let v = if x.get(r, c) > 0 { 255 } else { 0 };
                pixels[(tr * (height + 1) + r) * img_w + tc * (width + 1) + c] = v;
            }
        }
    }
    let mut out = format!("P5\n{img_w} {img_h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

/// Counts per bin of width `width`, with bin `k` covering
/// `[(k − ½)·width, (k + ½)·width)` so that zero sits at a bin center.
/// Non-finite values are left out.
pub fn histogram(values: &[f64], width: f64) -> Vec<(f64, f64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values.iter().filter(|v| v.is_finite()) {
        *bins.entry((v / width + 0.5).floor() as i64).or_default() += 1;
    }
    let (Some(&lo), Some(&hi)) = (bins.keys().next(), bins.keys().next_back()) else {
        return Vec::new();
    };
    (lo..=hi)
        .map(|k| {
            let left = (k as f64 - 0.5) * width;
            (left, left + width, bins.get(&k).copied().unwrap_or(0))
        })
        .collect()
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub struct KeyValues {
    path: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn read(path: &Path) -> Result<Self, PepsError> {
        let text = std::fs::read_to_string(path).map_err(|e| PepsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PepsError::Input(format!("{} line {}: expected `key = value`", path.display(), i + 1))
            })?;
            entries.insert(k.trim().to_owned(), (i + 1, v.trim().to_owned()));
        }
        Ok(KeyValues {
            path: path.display().to_string(),
            entries,
        })
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V, PepsError> {
        let (line, v) = self
            .entries
            .get(key)
            .ok_or_else(|| PepsError::Input(format!("{}: missing `{key}`", self.path)))?;
        v.parse()
            .map_err(|_| PepsError::Input(format!("{} line {line}: cannot parse `{v}`", self.path)))
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PepsError> {
    std::fs::write(path, bytes).map_err(|e| PepsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
