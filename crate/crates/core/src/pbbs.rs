//! Pure-background base set construction.
//!
//! Every labeled base-class instance is cut out along its mask and pasted at
//! its original position onto a synthetic background, so the composed image
//! contains no unlabeled foreground. Three background designs: a fixed gray,
//! a per-image gray matching the foreground mean, or an image pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::coco;
use crate::data::{AnnotatedImage, Dataset, Instance, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    FixedGray,
    NormalizedGray,
    Pool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    pub fixed_rgb: [u8; 3],
    pub pool_dir: Option<PathBuf>,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            kind: BackgroundKind::FixedGray,
            fixed_rgb: [127, 127, 127],
            pool_dir: None,
        }
    }
}

/// Foreground pixels of one instance, in source-image coordinates.
#[derive(Debug, Clone)]
pub struct MaskedPatch {
    /// Top-left corner of the crop within the source image.
    pub x0: usize,
    pub y0: usize,
    /// Box-region crop of the source pixels, (h, w, 3).
    pub pixels: Array3<u8>,
    /// Binary mask of the same (h, w); 1 marks foreground.
    pub mask: Array2<u8>,
}

/// Produces a mask for an instance when ground truth has none. The command
/// form receives `(png_path, x1, y1, x2, y2, out_png_path)` and must write a
/// grayscale mask image where nonzero means foreground.
pub trait Segmenter {
    fn segment(&self, image: &AnnotatedImage, instance_index: usize) -> Result<Array2<u8>>;
}

/// Shells out to an external segmentation command.
pub struct CommandSegmenter {
    pub command: String,
    pub work_dir: PathBuf,
}

impl Segmenter for CommandSegmenter {
    fn segment(&self, image: &AnnotatedImage, instance_index: usize) -> Result<Array2<u8>> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let png = self.work_dir.join(format!("{}.png", image.image_id));
        let out = self
            .work_dir
            .join(format!("{}_{}_mask.png", image.image_id, instance_index));
        coco::save_png(&png, &image.pixels)?;
        let b = &image.instances[instance_index].bbox;
        let status = std::process::Command::new(&self.command)
            .arg(&png)
            .args([b.x1, b.y1, b.x2, b.y2].map(|v| v.to_string()))
            .arg(&out)
            .status()
            .map_err(|e| Error::MissingDependency {
                command: self.command.clone(),
                detail: e.to_string(),
            })?;
        if !status.success() {
            return Err(Error::Other(format!(
                "segmenter `{}` exited with {status} on {}",
                self.command, image.image_id
            )));
        }
        let mask_rgb = coco::load_png(&out)?;
        let (h, w, _) = mask_rgb.dim();
        let mut mask = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if (0..3).any(|c| mask_rgb[[y, x, c]] != 0) {
                    mask[[y, x]] = 1;
                }
            }
        }
        Ok(mask)
    }
}

/// Cut one instance's foreground out of its source image.
pub fn extract_foreground(image: &AnnotatedImage, instance_index: usize) -> Result<MaskedPatch> {
    extract_foreground_with(image, instance_index, None)
}

pub fn extract_foreground_with(
    image: &AnnotatedImage,
    instance_index: usize,
    segmenter: Option<&dyn Segmenter>,
) -> Result<MaskedPatch> {
    let instance = image.instances.get(instance_index).ok_or_else(|| {
        Error::Shape(format!(
            "instance index {instance_index} out of range for image {}",
            image.image_id
        ))
    })?;
    let mask = match (&instance.mask, segmenter) {
        (Some(m), _) => m.clone(),
        (None, Some(seg)) => seg.segment(image, instance_index)?,
        (None, None) => {
            return Err(Error::MissingMask {
                image: image.image_id.clone(),
                instance: instance_index,
            })
        }
    };
    if mask.dim() != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match image {}x{}",
            mask.dim(),
            image.height(),
            image.width()
        )));
    }
    if mask.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask {
            image: image.image_id.clone(),
            instance: instance_index,
        });
    }
    // Crop to the mask's own bounding rectangle so the patch carries exactly
    // the pixels under the mask.
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let (ph, pw) = (y1 - y0, x1 - x0);
    let mut pixels = Array3::zeros((ph, pw, 3));
    let mut crop_mask = Array2::zeros((ph, pw));
    for y in 0..ph {
        for x in 0..pw {
            crop_mask[[y, x]] = mask[[y0 + y, x0 + x]];
            for c in 0..3 {
                pixels[[y, x, c]] = image.pixels[[y0 + y, x0 + x, c]];
            }
        }
    }
    Ok(MaskedPatch {
        x0,
        y0,
        pixels,
        mask: crop_mask,
    })
}

impl MaskedPatch {
    pub fn foreground_pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }
}

/// Background level for NORMALIZED_GRAY: the per-channel mean over the union
/// of labeled-instance mask pixels, rounded to nearest. Falls back to
/// `fixed_rgb` when there is no foreground.
fn normalized_gray_level(image: &AnnotatedImage, fallback: [u8; 3]) -> Result<[u8; 3]> {
    let union = labeled_mask_union(image)?;
    let mut sums = [0u64; 3];
    let mut count = 0u64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if union[[y, x]] != 0 {
                count += 1;
                for c in 0..3 {
                    sums[c] += u64::from(image.pixels[[y, x, c]]);
                }
            }
        }
    }
    if count == 0 {
        return Ok(fallback);
    }
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (sums[c] as f64 / count as f64).round().clamp(0.0, 255.0) as u8;
    }
    Ok(rgb)
}

/// Union of the masks of all labeled instances.
pub fn labeled_mask_union(image: &AnnotatedImage) -> Result<Array2<u8>> {
    let mut union = Array2::zeros((image.height(), image.width()));
    for (i, inst) in image.instances.iter().enumerate() {
        if !inst.label.is_labeled() {
            continue;
        }
        let mask = inst.mask.as_ref().ok_or_else(|| Error::MissingMask {
            image: image.image_id.clone(),
            instance: i,
        })?;
        for (u, &m) in union.iter_mut().zip(mask.iter()) {
            *u |= u8::from(m != 0);
        }
    }
    Ok(union)
}

/// Bilinear resize with half-pixel centers, used for pool backgrounds.
pub fn resize_bilinear(src: &Array3<u8>, out_h: usize, out_w: usize) -> Array3<u8> {
    let (h, w, _) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let v00 = src[[y0, x0, c]] as f64;
                let v01 = src[[y0, x1, c]] as f64;
                let v10 = src[[y1, x0, c]] as f64;
                let v11 = src[[y1, x1, c]] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn list_pool_images(pool_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(pool_dir).map_err(|e| {
        Error::Config(format!("pool_dir {} unreadable: {e}", pool_dir.display()))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "pool_dir {} contains no .png images",
            pool_dir.display()
        )));
    }
    Ok(files)
}

/// Stable pool index: first 8 bytes of sha256(source_image_id), mod pool
/// size. Reproducible across runs and platforms.
pub fn pool_index(source_image_id: &str, pool_len: usize) -> usize {
    let digest = Sha256::digest(source_image_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(bytes) % pool_len as u64) as usize
}

fn render_background(image: &AnnotatedImage, spec: &BackgroundSpec) -> Result<Array3<u8>> {
    let (h, w) = (image.height(), image.width());
    let fill = |rgb: [u8; 3]| {
        let mut px = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    px[[y, x, c]] = rgb[c];
                }
            }
        }
        px
    };
    match spec.kind {
        BackgroundKind::FixedGray => Ok(fill(spec.fixed_rgb)),
        BackgroundKind::NormalizedGray => {
            Ok(fill(normalized_gray_level(image, spec.fixed_rgb)?))
        }
        BackgroundKind::Pool => {
            let dir = spec.pool_dir.as_ref().ok_or_else(|| {
                Error::Config("background kind `pool` requires pbbs.pool_dir".into())
            })?;
            let files = list_pool_images(dir)?;
            let chosen = &files[pool_index(&image.image_id, files.len())];
            Ok(resize_bilinear(&coco::load_png(chosen)?, h, w))
        }
    }
}

/// Compose the pure-background counterpart of one image: background fill,
/// then labeled foregrounds pasted at their original positions in
/// annotation order with hard edges.
pub fn compose_pbbs(image: &AnnotatedImage, spec: &BackgroundSpec) -> Result<AnnotatedImage> {
    let mut pixels = render_background(image, spec)?;
    let mut instances: Vec<Instance> = Vec::new();
    for (i, inst) in image.instances.iter().enumerate() {
        match inst.label {
            Label::Class(_) => {}
            Label::Unlabeled { .. } => continue,
        }
        let patch = extract_foreground(image, i)?;
        let (ph, pw) = patch.mask.dim();
        for y in 0..ph {
            for x in 0..pw {
                if patch.mask[[y, x]] != 0 {
                    for c in 0..3 {
                        pixels[[patch.y0 + y, patch.x0 + x, c]] = patch.pixels[[y, x, c]];
                    }
                }
            }
        }
        instances.push(inst.clone());
    }
    Ok(AnnotatedImage {
        image_id: image.image_id.clone(),
        pixels,
        instances,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PbbsManifest {
    pub background: BackgroundSpec,
    pub source_image_count: usize,
    /// source_image_id -> relative path of the composed image.
    pub entries: BTreeMap<String, String>,
    pub failures: Vec<PbbsFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PbbsFailure {
    pub image_id: String,
    pub reason: String,
}

/// Build the full PBBS dataset and write it under `out_dir` with COCO
/// annotations and an index manifest. Per-image failures skip the image and
/// are recorded in the manifest.
pub fn build_pbbs_dataset(
    dataset: &Dataset,
    spec: &BackgroundSpec,
    out_dir: &Path,
) -> Result<(Dataset, PbbsManifest)> {
    let mut images = Vec::new();
    let mut entries = BTreeMap::new();
    let mut failures = Vec::new();
    for im in &dataset.images {
        match compose_pbbs(im, spec) {
            Ok(composed) => {
                entries.insert(im.image_id.clone(), format!("images/{}.png", im.image_id));
                images.push(composed);
            }
            Err(e @ (Error::Config(_) | Error::Io { .. })) => return Err(e),
            Err(e) => failures.push(PbbsFailure {
                image_id: im.image_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let pbbs = Dataset {
        images,
        classes: dataset.classes.clone(),
    };
    crate::data::store::save_dataset(&pbbs, out_dir)?;
    let manifest = PbbsManifest {
        background: spec.clone(),
        source_image_count: dataset.images.len(),
        entries,
        failures,
    };
    coco::write_json(&manifest, &out_dir.join("manifest.json"))?;
    Ok((pbbs, manifest))
}

pub fn load_manifest(dir: &Path) -> Result<PbbsManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingDependency {
            command: "build-pbbs".into(),
            detail: format!("no PBBS manifest at {}", path.display()),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    coco::parse_json(&text, &path)
}
