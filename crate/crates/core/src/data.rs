//! Patch dataset ingestion and synthesis.
//!
//! Datasets are collections of 64x64 8-bit grayscale patches, each tagged
//! with the id of the 3D point it depicts. Two on-disk forms are
//! supported:
//!
//! - **Mosaic directories**: numbered 1024x1024 grayscale images, each a
//!   16x16 row-major grid of 64x64 patches, plus an `info.txt` with one
//!   point id per patch line in global patch order. Trailing filler
//!   patches beyond the info-file line count are dropped.
//! - **Raw files**: a binary container (magic `PDRAWDS1`, version, patch
//!   count, then per patch a 32-bit id plus 4096 pixel bytes, trailing
//!   CRC-32) that round-trips bit-exactly.
//!
//! [`generate_synthetic`] builds a deterministic stand-in dataset for
//! desk-scale experiments: each class is a random procedural texture
//! (oriented sinusoids plus Gaussian blobs) and each patch renders that
//! texture under a small random rotation, translation, brightness change
//! and pixel noise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::rng::Rng;
use crate::sampler::DatasetIndex;

pub const PATCH_SIDE: usize = 64;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;

const MOSAIC_SIDE: usize = 1024;
const MOSAIC_GRID: usize = MOSAIC_SIDE / PATCH_SIDE;
const PATCHES_PER_MOSAIC: usize = MOSAIC_GRID * MOSAIC_GRID;

pub const RAW_MAGIC: &[u8; 8] = b"PDRAWDS1";
pub const RAW_VERSION: u32 = 1;

/// Borrowed view of one patch.
#[derive(Debug, Clone, Copy)]
pub struct Patch<'a> {
    pub pixels: &'a [u8],
    pub point_id: u32,
}

/// An in-memory patch dataset; patch order is load order and never changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchDataset {
    pixels: Vec<u8>,
    point_ids: Vec<u32>,
    provenance: String,
}

impl PatchDataset {
    pub fn empty(provenance: &str) -> PatchDataset {
        PatchDataset {
            pixels: Vec::new(),
            point_ids: Vec::new(),
            provenance: provenance.to_string(),
        }
    }

    pub fn push(&mut self, pixels: &[u8], point_id: u32) -> Result<()> {
        if pixels.len() != PATCH_PIXELS {
            return Err(Error::dataset(format!(
                "patch must have {PATCH_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        self.pixels.extend_from_slice(pixels);
        self.point_ids.push(point_id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn patch(&self, i: usize) -> Patch<'_> {
        Patch {
            pixels: &self.pixels[i * PATCH_PIXELS..(i + 1) * PATCH_PIXELS],
            point_id: self.point_ids[i],
        }
    }

    pub fn point_ids(&self) -> &[u32] {
        &self.point_ids
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Builds the patch-to-point index.
    pub fn index(&self) -> DatasetIndex {
        DatasetIndex::from_point_ids(&self.point_ids)
    }

    /// New dataset holding the given patches (in the given order).
    pub fn subset(&self, patch_indices: &[usize], provenance: &str) -> PatchDataset {
        let mut out = PatchDataset::empty(provenance);
        for &i in patch_indices {
            out.push(self.patch(i).pixels, self.point_ids[i]).unwrap();
        }
        out
    }

    /// Merges another dataset after this one, keeping point-id spaces
    /// disjoint by offsetting the other dataset's ids.
    pub fn concat_disjoint(&self, other: &PatchDataset, provenance: &str) -> PatchDataset {
        let offset = self.point_ids.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = PatchDataset {
            pixels: self.pixels.clone(),
            point_ids: self.point_ids.clone(),
            provenance: provenance.to_string(),
        };
        out.pixels.extend_from_slice(&other.pixels);
        out.point_ids
            .extend(other.point_ids.iter().map(|&id| id + offset));
        out
    }
}

/// Splits a dataset by reserving validation points: the unique point ids
/// (in first-appearance order) are shuffled with the seed and the first
/// `reserve_points` become the validation set. Patch order within each
/// half is preserved.
pub fn split_validation(
    dataset: &PatchDataset,
    reserve_points: usize,
    seed: u64,
) -> Result<(PatchDataset, PatchDataset)> {
    let index = dataset.index();
    let m = index.point_count();
    if reserve_points == 0 || reserve_points >= m {
        return Err(Error::dataset(format!(
            "cannot reserve {reserve_points} of {m} unique points for validation"
        )));
    }
    let mut points: Vec<u32> = (0..m as u32).collect();
    Rng::new(seed).shuffle(&mut points);
    let reserved: std::collections::HashSet<u32> =
        points[..reserve_points].iter().copied().collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..dataset.len() {
        if reserved.contains(&index.point_of_patch(i)) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((
        dataset.subset(&train, &format!("{}/train", dataset.provenance)),
        dataset.subset(&val, &format!("{}/validation", dataset.provenance)),
    ))
}

/// Loads a mosaic-directory dataset.
///
/// `dir` must contain the mosaic images (sorted by file name) and an
/// `info.txt` whose line `i` carries the point id of patch `i` as its
/// first whitespace-separated token.
pub fn load_mosaic_dataset(dir: &Path) -> Result<PatchDataset> {
    let info_path = dir.join("info.txt");
    let info = std::fs::read_to_string(&info_path)
        .map_err(|e| Error::dataset(format!("cannot read {}: {e}", info_path.display())))?;
    let ids: Vec<u32> = info
        .lines()
        .enumerate()
        .map(|(ln, line)| {
            line.split_whitespace()
                .next()
                .ok_or_else(|| Error::dataset(format!("info.txt line {} is empty", ln + 1)))?
                .parse::<u32>()
                .map_err(|e| Error::dataset(format!("info.txt line {}: {e}", ln + 1)))
        })
        .collect::<Result<_>>()?;

    let mut mosaics: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("bmp") | Some("png") | Some("pgm")
            )
        })
        .collect();
    mosaics.sort();

    if ids.len() > mosaics.len() * PATCHES_PER_MOSAIC {
        return Err(Error::dataset(format!(
            "info.txt lists {} patches but {} mosaics hold at most {}",
            ids.len(),
            mosaics.len(),
            mosaics.len() * PATCHES_PER_MOSAIC
        )));
    }

    let mut dataset = PatchDataset::empty(
        dir.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("mosaic"),
    );
    'outer: for (mi, path) in mosaics.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::dataset(format!("cannot read {}: {e}", path.display())))?
            .to_luma8();
        if img.width() as usize != MOSAIC_SIDE || img.height() as usize != MOSAIC_SIDE {
            return Err(Error::dataset(format!(
                "{} is {}x{}, expected {MOSAIC_SIDE}x{MOSAIC_SIDE}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        let raw = img.as_raw();
        for cell in 0..PATCHES_PER_MOSAIC {
            let global = mi * PATCHES_PER_MOSAIC + cell;
            if global >= ids.len() {
                break 'outer;
            }
            let (gy, gx) = (cell / MOSAIC_GRID, cell % MOSAIC_GRID);
            let mut patch = [0u8; PATCH_PIXELS];
            for row in 0..PATCH_SIDE {
                let src = (gy * PATCH_SIDE + row) * MOSAIC_SIDE + gx * PATCH_SIDE;
                patch[row * PATCH_SIDE..(row + 1) * PATCH_SIDE]
                    .copy_from_slice(&raw[src..src + PATCH_SIDE]);
            }
            dataset.push(&patch, ids[global])?;
        }
    }
    Ok(dataset)
}

/// Writes the raw binary dataset format.
pub fn save_raw(dataset: &PatchDataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(RAW_MAGIC, RAW_VERSION);
    w.put_u64(dataset.len() as u64);
    for i in 0..dataset.len() {
        let p = dataset.patch(i);
        w.put_u32(p.point_id);
        w.put_bytes(p.pixels);
    }
    std::fs::write(path, w.finish())?;
    Ok(())
}

/// Reads the raw binary dataset format; a failed checksum or truncation
/// yields an error and no partial dataset.
pub fn load_raw(path: &Path) -> Result<PatchDataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, RAW_MAGIC, RAW_VERSION)?;
    let count = r.get_u64()? as usize;
    let mut dataset = PatchDataset::empty(
        path.file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("raw"),
    );
    for _ in 0..count {
        let id = r.get_u32()?;
        let pixels = r.get_bytes(PATCH_PIXELS)?;
        dataset.push(pixels, id)?;
    }
    r.expect_end()?;
    Ok(dataset)
}

/// Loads either dataset form: a directory is treated as a mosaic dataset,
/// a file as the raw format.
pub fn load_dataset(path: &Path) -> Result<PatchDataset> {
    if path.is_dir() {
        load_mosaic_dataset(path)
    } else {
        load_raw(path)
    }
}

/// Procedural texture: a mixture of oriented sinusoids and Gaussian blobs,
/// evaluated analytically at arbitrary (sub-pixel) coordinates.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>, // (amplitude, kx, ky, phase)
    blobs: Vec<(f64, f64, f64, f64)>, // (amplitude, cx, cy, inv_2s2)
    lo: f64,
    hi: f64,
}

impl Texture {
    fn generate(rng: &mut Rng) -> Texture {
        let mut waves = Vec::new();
        for _ in 0..4 {
            let amp = rng.uniform(0.5, 1.0);
            let freq = rng.uniform(0.02, 0.09) * std::f64::consts::TAU;
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            waves.push((amp, freq * theta.cos(), freq * theta.sin(), phase));
        }
        let mut blobs = Vec::new();
        for _ in 0..3 {
            let amp = rng.uniform(-1.5, 1.5);
            let cx = rng.uniform(8.0, 56.0);
            let cy = rng.uniform(8.0, 56.0);
            let s = rng.uniform(5.0, 14.0);
            blobs.push((amp, cx, cy, 1.0 / (2.0 * s * s)));
        }
        let mut tex = Texture {
            waves,
            blobs,
            lo: 0.0,
            hi: 1.0,
        };
        // Contrast range measured on the canonical (untransformed) grid.
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..PATCH_SIDE {
            for x in 0..PATCH_SIDE {
                let v = tex.raw(x as f64, y as f64);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        tex.lo = lo;
        tex.hi = if hi > lo { hi } else { lo + 1.0 };
        tex
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for &(amp, kx, ky, phase) in &self.waves {
            v += amp * (kx * x + ky * y + phase).sin();
        }
        for &(amp, cx, cy, inv_2s2) in &self.blobs {
            let dx = x - cx;
            let dy = y - cy;
            v += amp * (-(dx * dx + dy * dy) * inv_2s2).exp();
        }
        v
    }

    /// Normalized to roughly [0, 1].
    fn at(&self, x: f64, y: f64) -> f64 {
        ((self.raw(x, y) - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Per-patch viewing jitter, mirroring the correspondence tolerances of
/// real patch datasets: rotation within pi/8, translation within 5 px,
/// brightness gain/offset, and pixel noise.
const MAX_ROTATION: f64 = std::f64::consts::PI / 8.0;
const MAX_TRANSLATION: f64 = 5.0;
const GAIN_JITTER: f64 = 0.25;
const OFFSET_JITTER: f64 = 0.12;
const PIXEL_NOISE: f64 = 0.02;

/// Generates `classes * per_class` patches; class `c` patch `j` is
/// deterministic for a given seed regardless of generation order.
pub fn generate_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<PatchDataset> {
    if classes < 2 || per_class < 2 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs at least 2 classes of 2 patches, got {classes}x{per_class}"
        )));
    }
    let base = Rng::new(seed);
    let mut dataset = PatchDataset::empty("synthetic");
    let mut patch = vec![0u8; PATCH_PIXELS];
    let center = (PATCH_SIDE as f64 - 1.0) / 2.0;

    for class in 0..classes {
        let mut class_rng = base.derive(0x7e_0000_0000 + class as u64);
        let texture = Texture::generate(&mut class_rng);
        for j in 0..per_class {
            let mut rng = base.derive(0x9a_0000_0000 + (class * per_class + j) as u64);
            let alpha = rng.uniform(-MAX_ROTATION, MAX_ROTATION);
            let (sin_a, cos_a) = alpha.sin_cos();
            let tx = rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION);
            let ty = rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION);
            let gain = rng.uniform(1.0 - GAIN_JITTER, 1.0 + GAIN_JITTER);
            let offset = rng.uniform(-OFFSET_JITTER, OFFSET_JITTER);

            for row in 0..PATCH_SIDE {
                for col in 0..PATCH_SIDE {
                    let u = col as f64 - center;
                    let v = row as f64 - center;
                    let x = cos_a * u - sin_a * v + center + tx;
                    let y = sin_a * u + cos_a * v + center + ty;
                    let mut value = gain * texture.at(x, y) + offset;
                    value += PIXEL_NOISE * rng.next_gaussian();
                    patch[row * PATCH_SIDE + col] =
                        (value.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            dataset.push(&patch, class as u32)?;
        }
    }
    Ok(dataset)
}
