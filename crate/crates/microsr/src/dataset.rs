//! Aligned LR/HR training pairs.
//!
//! Each source HR image is degraded once as a whole, then both the HR image
//! and its simulated LR counterpart are cut into patches on the same stride
//! grid, so every pair shares an exact field of view with no registration
//! step. Optional right-angle rotations and horizontal mirroring expand the
//! training split eightfold while preserving that alignment, because the
//! symmetric kernel, block averaging, and reflect padding all commute with
//! those transforms.
//!
//! On disk a dataset is a `manifest.json` plus one 16-bit PNG per patch under
//! `<source-id>/<row>_<col>[_<variant>]_{lr,hr}.png`, with `row`/`col` the
//! patch origin in HR pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::degradation::{degrade, default_radius, DegradationParams};
use crate::error::{Error, Result};
use crate::raster::{load_image, save_image, Image};
use crate::rng::{fnv1a, SeededRng};

/// One of the eight axis-aligned symmetries applied to a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentVariant {
    /// Quarter turns counter-clockwise, 0..=3.
    pub quarter_turns: u8,
    /// Horizontal mirror applied before the rotation.
    pub hflip: bool,
}

impl AugmentVariant {
    pub fn identity() -> Self {
        AugmentVariant::default()
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns == 0 && !self.hflip
    }

    pub fn apply(&self, img: &Image) -> Image {
        let flipped;
        let src = if self.hflip {
            flipped = img.flip_horizontal();
            &flipped
        } else {
            img
        };
        src.rotate90(self.quarter_turns as usize)
    }

    fn tag(&self) -> String {
        format!("r{}f{}", self.quarter_turns, u8::from(self.hflip))
    }
}

/// Which augmentations to enable for the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOptions {
    pub rotations: bool,
    pub flips: bool,
}

impl AugmentOptions {
    pub fn none() -> Self {
        AugmentOptions::default()
    }

    /// Enabled variants, identity first.
    pub fn variants(&self) -> Vec<AugmentVariant> {
        let turns: &[u8] = if self.rotations { &[0, 1, 2, 3] } else { &[0] };
        let flips: &[bool] = if self.flips { &[false, true] } else { &[false] };
        let mut out = Vec::new();
        for &hflip in flips {
            for &q in turns {
                out.push(AugmentVariant {
                    quarter_turns: q,
                    hflip,
                });
            }
        }
        out
    }
}

/// Train/validation assignment, decided per source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// An aligned LR/HR training sample.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub lr: Image,
    pub hr: Image,
    pub source_id: String,
    /// Patch origin in HR pixels of the source image.
    pub origin: (usize, usize),
    pub variant: AugmentVariant,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_id: String,
    pub origin: (usize, usize),
    pub variant: AugmentVariant,
    pub split: Split,
    pub lr_file: String,
    pub hr_file: String,
}

/// Build settings for a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub params: DegradationParams,
    /// LR patch side; HR patches are `factor` times larger.
    pub patch_lr: usize,
    /// Stride between LR patch origins; below `patch_lr` this is the
    /// translation augmentation.
    pub stride: usize,
    pub augment: AugmentOptions,
    /// Fraction of source images assigned to the training split.
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            params: DegradationParams {
                sigma: 2.0,
                noise_variance: 0.0,
                factor: 4,
                downsample: Default::default(),
            },
            patch_lr: 96,
            stride: 96,
            augment: AugmentOptions::none(),
            split_fraction: 0.9,
            seed: 0,
        }
    }
}

/// A named source image.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub image: Image,
}

/// Manifest of a built dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads the patch files of one split back into memory.
    pub fn load_pairs(&self, dir: impl AsRef<Path>, split: Split) -> Result<Vec<PatchPair>> {
        let dir = dir.as_ref();
        self.split_records(split)
            .map(|rec| {
                Ok(PatchPair {
                    lr: load_image(dir.join(&rec.lr_file))?,
                    hr: load_image(dir.join(&rec.hr_file))?,
                    source_id: rec.source_id.clone(),
                    origin: rec.origin,
                    variant: rec.variant,
                })
            })
            .collect()
    }
}

/// Patch origins along one axis: multiples of `stride`, with a final origin
/// clamped so the last patch ends exactly at the border (duplicates removed).
pub(crate) fn patch_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch <= dim {
        origins.push(o);
        o += stride;
    }
    let last = dim - patch;
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

fn assign_splits(ids: &[String], fraction: f64, seed: u64) -> Vec<Split> {
    let n = ids.len();
    if n == 1 {
        return vec![Split::Train];
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).split(0xdeca_f).shuffle(&mut order);
    let mut splits = vec![Split::Validation; n];
    for &i in order.iter().take(n_train) {
        splits[i] = Split::Train;
    }
    splits
}

/// Degrades every source image, cuts aligned patch pairs, writes them to
/// `out_dir` as 16-bit PNGs, and returns the manifest (also written there).
pub fn build_dataset(
    sources: &[SourceImage],
    spec: &DatasetSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if sources.is_empty() {
        return Err(Error::InvalidDataset("no source images".into()));
    }
    if !(spec.split_fraction > 0.0 && spec.split_fraction < 1.0) {
        return Err(Error::InvalidDataset(format!(
            "split fraction must be in (0, 1), got {}",
            spec.split_fraction
        )));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidDataset("stride must be positive".into()));
    }
    spec.params.validate()?;
    let factor = spec.params.factor;
    let patch_hr = spec.patch_lr * factor;
    for s in sources {
        if s.image.height() < patch_hr || s.image.width() < patch_hr {
            return Err(Error::InvalidDataset(format!(
                "source {} is {}x{}, smaller than one {patch_hr}x{patch_hr} HR patch",
                s.id,
                s.image.height(),
                s.image.width()
            )));
        }
    }

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    let splits = assign_splits(&ids, spec.split_fraction, spec.seed);

    let master = SeededRng::new(spec.seed);
    let mut records = Vec::new();
    for (id, split) in ids.iter().zip(&splits) {
        let source = sources.iter().find(|s| &s.id == id).expect("sorted from sources");
        // One noise stream per source image, keyed by its id so the result
        // does not depend on list order.
        let mut rng = master.split(fnv1a(id.as_bytes()));
        let lr_full = degrade(&source.image, &spec.params, &mut rng)?;

        let variants = match split {
            Split::Train => spec.augment.variants(),
            Split::Validation => vec![AugmentVariant::identity()],
        };

        let sub_dir = out_dir.join(id);
        std::fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;

        let rows = patch_origins(lr_full.height(), spec.patch_lr, spec.stride);
        let cols = patch_origins(lr_full.width(), spec.patch_lr, spec.stride);
        for &oy in &rows {
            for &ox in &cols {
                let lr = lr_full.crop(oy, ox, spec.patch_lr, spec.patch_lr)?;
                let hr = source.image.crop(
                    oy * factor,
                    ox * factor,
                    patch_hr,
                    patch_hr,
                )?;
                for variant in &variants {
                    let lr_v = variant.apply(&lr);
                    let hr_v = variant.apply(&hr);
                    let stem = if variant.is_identity() {
                        format!("{}_{}", oy * factor, ox * factor)
                    } else {
                        format!("{}_{}_{}", oy * factor, ox * factor, variant.tag())
                    };
                    let lr_file = format!("{id}/{stem}_lr.png");
                    let hr_file = format!("{id}/{stem}_hr.png");
                    save_image(&lr_v, out_dir.join(&lr_file), 16)?;
                    save_image(&hr_v, out_dir.join(&hr_file), 16)?;
                    records.push(PairRecord {
                        source_id: id.clone(),
                        origin: (oy * factor, ox * factor),
                        variant: *variant,
                        split: *split,
                        lr_file,
                        hr_file,
                    });
                }
            }
        }
    }

    records.sort_by(|a, b| {
        (&a.source_id, a.origin, a.variant.hflip, a.variant.quarter_turns).cmp(&(
            &b.source_id,
            b.origin,
            b.variant.hflip,
            b.variant.quarter_turns,
        ))
    });
    let manifest = DatasetManifest {
        spec: spec.clone(),
        records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Checks that a pair's LR half really is the degradation of its HR half.
///
/// The comparison skips a thin border: the pair was cut from a whole-image
/// degradation, so border pixels blend content from outside the patch and
/// cannot be reproduced from the patch alone. Interior pixels must match up
/// to the noise floor: MSE below `noise_variance + 1e-6`, widened by the
/// 4-sigma sampling spread of a chi-square mean over the compared pixels
/// (the empirical MSE of true noise fluctuates by `var * sqrt(2/n)`).
pub fn verify_alignment(pair: &PatchPair, params: &DegradationParams) -> Result<bool> {
    let factor = params.factor;
    if pair.hr.height() != pair.lr.height() * factor || pair.hr.width() != pair.lr.width() * factor
    {
        return Ok(false);
    }
    let sim = degrade(&pair.hr, &params.noiseless(), &mut SeededRng::new(0))?;
    let margin = default_radius(params.sigma).div_ceil(factor) + 1;
    let (h, w) = (pair.lr.height(), pair.lr.width());
    let (y0, y1, x0, x1) = if h > 2 * margin && w > 2 * margin {
        (margin, h - margin, margin, w - margin)
    } else {
        (0, h, 0, w)
    };
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..pair.lr.channels() {
                let d = pair.lr.get(y, x, c) as f64 - sim.get(y, x, c) as f64;
                acc += d * d;
                n += 1;
            }
        }
    }
    let spread = 4.0 * params.noise_variance * (2.0 / n as f64).sqrt();
    Ok(acc / n as f64 <= params.noise_variance + spread + 1e-6)
}

/// Convenience: loads every PNG/TIFF in a directory as a source image, id'd
/// by file stem, sorted by id.
pub fn load_source_dir(dir: impl AsRef<Path>) -> Result<Vec<SourceImage>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "tif" | "tiff")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no raster files in {}",
            dir.display()
        )));
    }
    paths
        .par_iter()
        .map(|p| {
            Ok(SourceImage {
                id: p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string(),
                image: load_image(p)?,
            })
        })
        .collect()
}
