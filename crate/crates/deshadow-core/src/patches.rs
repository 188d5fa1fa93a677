//! Overlapping-patch extraction and the non-shadow / boundary / full-shadow
//! partition of a shadow-image dataset.
//!
//! The manifest stores coordinates, not pixel copies: records are re-cut from
//! the source images on demand. Windows that would overhang the image are
//! dropped rather than padded.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::mask::ShadowMask;
use crate::scalar::Scalar;

/// Patch class by mask content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatchLabel {
    /// No shadow pixel in the patch.
    N,
    /// Both shadow and non-shadow pixels: a boundary patch.
    B,
    /// Every pixel in shadow.
    F,
}

/// One grid window: its source image, position, size, and label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub label: PatchLabel,
}

/// A patch together with its pixels and mask, as cut from the source image.
#[derive(Debug, Clone)]
pub struct PatchData<S: Scalar> {
    pub record: PatchRecord,
    pub patch: RasterImage<S>,
    pub mask_patch: ShadowMask,
}

/// Classifies a mask window into N / B / F.
pub fn label_for_mask(mask_patch: &ShadowMask) -> PatchLabel {
    let ones = mask_patch.count_ones();
    if ones == 0 {
        PatchLabel::N
    } else if ones == mask_patch.bits().len() {
        PatchLabel::F
    } else {
        PatchLabel::B
    }
}

/// Cuts the n×n / stride-m grid over an image, labeling each window.
///
/// Windows are emitted row-major by (top, left); offsets are multiples of the
/// stride, and windows that do not fit entirely inside the image are dropped.
pub fn crop_grid<S: Scalar>(
    img: &RasterImage<S>,
    mask: &ShadowMask,
    image_id: &str,
    n: usize,
    m: usize,
) -> Result<Vec<PatchData<S>>> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be >= 1".into()));
    }
    if n > img.height() || n > img.width() {
        return Err(Error::InvalidArgument(format!(
            "patch size {n} exceeds image {}x{}",
            img.height(),
            img.width()
        )));
    }
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut out = Vec::new();
    let mut top = 0;
    while top + n <= img.height() {
        let mut left = 0;
        while left + n <= img.width() {
            let mask_patch = mask.crop(top, left, n)?;
            let record = PatchRecord {
                image_id: image_id.to_string(),
                top,
                left,
                size: n,
                label: label_for_mask(&mask_patch),
            };
            out.push(PatchData {
                record,
                patch: img.crop(top, left, n)?,
                mask_patch,
            });
            left += m;
        }
        top += m;
    }
    Ok(out)
}

/// Number of grid windows an H×W image yields at size n, stride m.
pub fn grid_count(height: usize, width: usize, n: usize, m: usize) -> usize {
    if n > height || n > width {
        return 0;
    }
    ((height - n) / m + 1) * ((width - n) / m + 1)
}

/// Manifest header: extraction config plus per-label counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub patch_size: usize,
    pub stride: usize,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub count_n: usize,
    pub count_b: usize,
    pub count_f: usize,
    pub total: usize,
    /// Images skipped because no mask with the same filename existed.
    pub skipped: Vec<String>,
}

/// The patch dataset: header plus records ordered by (image_id, top, left).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchManifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

impl PatchManifest {
    pub fn records_with_label(&self, label: PatchLabel) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn count(&self, label: PatchLabel) -> usize {
        match label {
            PatchLabel::N => self.header.count_n,
            PatchLabel::B => self.header.count_b,
            PatchLabel::F => self.header.count_f,
        }
    }
}

fn png_like(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

/// Scans matched image/mask directories and builds the manifest.
///
/// Pairing is by identical filename. Images without a mask are skipped and
/// listed in the header. Ordering is deterministic: filenames sorted, then
/// row-major grid order.
pub fn build_manifest<S: Scalar>(
    image_dir: impl AsRef<Path>,
    mask_dir: impl AsRef<Path>,
    n: usize,
    m: usize,
) -> Result<PatchManifest> {
    let image_dir = image_dir.as_ref();
    let mask_dir = mask_dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| png_like(name))
        .collect();
    names.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut counts: BTreeMap<PatchLabel, usize> = BTreeMap::new();
    for name in names {
        let mask_path = mask_dir.join(&name);
        if !mask_path.exists() {
            skipped.push(name);
            continue;
        }
        let img: RasterImage<S> = crate::imaging::load_image(image_dir.join(&name))?;
        let mask = crate::mask::load_mask(&mask_path)?;
        for data in crop_grid(&img, &mask, &name, n, m)? {
            *counts.entry(data.record.label).or_insert(0) += 1;
            records.push(data.record);
        }
    }
    let total = records.len();
    Ok(PatchManifest {
        header: ManifestHeader {
            patch_size: n,
            stride: m,
            image_dir: image_dir.to_path_buf(),
            mask_dir: mask_dir.to_path_buf(),
            count_n: counts.get(&PatchLabel::N).copied().unwrap_or(0),
            count_b: counts.get(&PatchLabel::B).copied().unwrap_or(0),
            count_f: counts.get(&PatchLabel::F).copied().unwrap_or(0),
            total,
            skipped,
        },
        records,
    })
}

/// Writes the manifest as JSON-lines: header line, then one record per line.
pub fn save_manifest(manifest: &PatchManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut line = serde_json::to_string(&manifest.header)?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for record in &manifest.records {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a manifest written by [`save_manifest`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<PatchManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty manifest file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::with_capacity(header.total);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    if records.len() != header.total {
        return Err(Error::Format(format!(
            "manifest header claims {} records, file has {}",
            header.total,
            records.len()
        )));
    }
    Ok(PatchManifest { header, records })
}
