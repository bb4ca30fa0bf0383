//! COCO-format annotation ingest and export.
//!
//! One interchange format keeps the pipeline testable: boxes arrive as
//! (x, y, w, h) and are converted to corner form, polygon segmentations are
//! rasterized at pixel centers, and uncompressed column-major RLE round-trips
//! masks exactly. Unlabeled instances are never written to annotation files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, ClassId, Dataset, Instance, Label};
use crate::error::{Error, Result};
use crate::geometry::BoxF;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: ClassId,
    /// (x, y, w, h) in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: ClassId,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flattened [x0, y0, x1, y1, ...] rings; membership is the union.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

/// Uncompressed COCO RLE: runs alternate background/foreground starting with
/// background, in column-major pixel order; `size` is [height, width].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<usize>,
    pub size: [usize; 2],
}

pub fn encode_rle(mask: &ArrayView2<u8>) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = u8::from(mask[[y, x]] != 0);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle {
        counts,
        size: [h, w],
    }
}

pub fn decode_rle(rle: &Rle) -> Result<Array2<u8>> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::Shape(format!(
            "RLE run lengths sum to {total}, expected {h}x{w}={}",
            h * w
        )));
    }
    let mut mask = Array2::zeros((h, w));
    let mut idx = 0usize;
    let mut foreground = false;
    for &run in &rle.counts {
        if foreground {
            for k in idx..idx + run {
                mask[[k % h, k / h]] = 1;
            }
        }
        idx += run;
        foreground = !foreground;
    }
    Ok(mask)
}

/// Union of even-odd polygon fills, sampled at pixel centers.
pub fn rasterize_polygons(polygons: &[Vec<f64>], h: usize, w: usize) -> Array2<u8> {
    let mut mask = Array2::zeros((h, w));
    for poly in polygons {
        if poly.len() < 6 {
            continue;
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let xs = (x0.floor().max(0.0) as usize).min(w);
        let xe = ((x1.ceil() as i64).max(0) as usize).min(w);
        let ys = (y0.floor().max(0.0) as usize).min(h);
        let ye = ((y1.ceil() as i64).max(0) as usize).min(h);
        for y in ys..ye {
            for x in xs..xe {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &pts) {
                    mask[[y, x]] = 1;
                }
            }
        }
    }
    mask
}

fn point_in_polygon(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// An image listed in the annotation file that could not be ingested.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedImage {
    pub file_name: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct CocoIngest {
    pub dataset: Dataset,
    /// Per-image failures (missing or unreadable files); ingest never aborts
    /// on these.
    pub skipped: Vec<SkippedImage>,
    /// Non-fatal annotation-level oddities (unknown ids, degenerate boxes).
    pub issues: Vec<String>,
}

/// Parse a COCO annotation file and load the referenced images.
///
/// Image identity is the file-name stem, so exporting and re-ingesting keeps
/// stable string ids regardless of the numeric ids in the JSON.
pub fn ingest_coco(annotation_file: &Path, image_root: &Path) -> Result<CocoIngest> {
    let text = std::fs::read_to_string(annotation_file)
        .map_err(|e| Error::io(annotation_file, e))?;
    let doc: CocoDoc = parse_json(&text, annotation_file)?;
    ingest_doc(&doc, image_root)
}

/// Deserialize with byte-offset error reporting.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0usize;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

pub fn ingest_doc(doc: &CocoDoc, image_root: &Path) -> Result<CocoIngest> {
    let mut issues = Vec::new();
    let mut skipped = Vec::new();

    let mut categories = BTreeMap::new();
    for cat in &doc.categories {
        if categories.insert(cat.id, cat.name.clone()).is_some() {
            issues.push(format!("duplicate category id {}", cat.id));
        }
    }

    // Group annotations per image, ordered by annotation id so instance
    // order is reproducible.
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for ann in &doc.annotations {
        by_image.entry(ann.image_id).or_default().push(ann);
    }
    for anns in by_image.values_mut() {
        anns.sort_by_key(|a| a.id);
    }

    let mut image_records: Vec<&CocoImage> = doc.images.iter().collect();
    image_records.sort_by_key(|im| im.id);
    let known_ids: std::collections::BTreeSet<u64> = image_records.iter().map(|im| im.id).collect();
    for ann in &doc.annotations {
        if !known_ids.contains(&ann.image_id) {
            issues.push(format!(
                "annotation {} references unknown image id {}",
                ann.id, ann.image_id
            ));
        }
    }

    let mut images = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    for record in image_records {
        if !seen_ids.insert(record.id) {
            issues.push(format!("duplicate image id {}", record.id));
            continue;
        }
        let path = image_root.join(&record.file_name);
        let pixels = match load_png(&path) {
            Ok(p) => p,
            Err(e) => {
                skipped.push(SkippedImage {
                    file_name: record.file_name.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (h, w, _) = pixels.dim();
        if h != record.height || w != record.width {
            issues.push(format!(
                "image {} declares {}x{} but file is {}x{}",
                record.file_name, record.width, record.height, w, h
            ));
        }
        let image_id = Path::new(&record.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| record.file_name.clone());

        let mut instances = Vec::new();
        for ann in by_image.get(&record.id).map(|v| v.as_slice()).unwrap_or(&[]) {
            if !categories.contains_key(&ann.category_id) {
                issues.push(format!(
                    "annotation {} uses unknown category {}",
                    ann.id, ann.category_id
                ));
                continue;
            }
            let bbox =
                BoxF::from_xywh(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3])
                    .clip(w as f64, h as f64);
            if !bbox.is_valid() {
                issues.push(format!("annotation {} has a degenerate box", ann.id));
                continue;
            }
            let mask = match &ann.segmentation {
                None => None,
                Some(Segmentation::Polygons(polys)) => Some(rasterize_polygons(polys, h, w)),
                Some(Segmentation::Rle(rle)) => {
                    if rle.size != [h, w] {
                        issues.push(format!(
                            "annotation {} RLE size {:?} does not match image {}x{}",
                            ann.id, rle.size, h, w
                        ));
                        None
                    } else {
                        Some(decode_rle(rle)?)
                    }
                }
            };
            // Enforce the mask-inside-dilated-box invariant on external data.
            let mask = mask.and_then(|mut m| {
                clip_mask_to_box(&mut m, &bbox);
                if m.iter().any(|&v| v != 0) {
                    Some(m)
                } else {
                    issues.push(format!("annotation {} mask is empty; dropped", ann.id));
                    None
                }
            });
            let area = mask
                .as_ref()
                .map(|m| m.iter().filter(|&&v| v != 0).count() as f64)
                .or(ann.area)
                .unwrap_or_else(|| bbox.area());
            instances.push(Instance {
                bbox,
                label: Label::Class(ann.category_id),
                mask,
                area,
            });
        }
        images.push(AnnotatedImage {
            image_id,
            pixels,
            instances,
        });
    }

    Ok(CocoIngest {
        dataset: Dataset {
            images,
            classes: categories,
        },
        skipped,
        issues,
    })
}

fn clip_mask_to_box(mask: &mut Array2<u8>, bbox: &BoxF) {
    let (h, w) = mask.dim();
    let x0 = (bbox.x1 - 2.0).floor().max(0.0) as usize;
    let y0 = (bbox.y1 - 2.0).floor().max(0.0) as usize;
    let x1 = ((bbox.x2 + 2.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((bbox.y2 + 2.0).ceil().max(0.0) as usize).min(h);
    for y in 0..h {
        for x in 0..w {
            if y < y0 || y >= y1 || x < x0 || x >= x1 {
                mask[[y, x]] = 0;
            }
        }
    }
}

pub fn load_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw();
    Array3::from_shape_vec((h as usize, w as usize, 3), data)
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn save_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let std_order = pixels
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    let img = image::RgbImage::from_raw(w as u32, h as u32, std_order)
        .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    })
}

/// Build a COCO document from a dataset. Unlabeled instances are dropped;
/// masks are written as exact uncompressed RLE.
pub fn export_coco(dataset: &Dataset) -> CocoDoc {
    let categories = dataset
        .classes
        .iter()
        .map(|(&id, name)| CocoCategory {
            id,
            name: name.clone(),
        })
        .collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for (i, im) in dataset.images.iter().enumerate() {
        let image_id = (i + 1) as u64;
        images.push(CocoImage {
            id: image_id,
            file_name: format!("{}.png", im.image_id),
            width: im.width(),
            height: im.height(),
        });
        for inst in im.instances.iter() {
            let class = match inst.label {
                Label::Class(c) => c,
                Label::Unlabeled { .. } => continue,
            };
            let b = &inst.bbox;
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: class,
                bbox: [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1],
                area: Some(inst.area),
                iscrowd: 0,
                segmentation: inst.mask.as_ref().map(|m| Segmentation::Rle(encode_rle(&m.view()))),
            });
            ann_id += 1;
        }
    }
    CocoDoc {
        images,
        annotations,
        categories,
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Other(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rle_round_trips_and_matches_hand_encoding() {
        let mask = array![[0, 1, 1], [0, 0, 1]];
        let rle = encode_rle(&mask.view());
        // Column-major walk: (0,0)(1,0) zeros, (0,1) one, (1,1) zero,
        // (0,2)(1,2) ones.
        assert_eq!(rle.counts, vec![2, 1, 1, 2]);
        assert_eq!(rle.size, [2, 3]);
        assert_eq!(decode_rle(&rle).unwrap(), mask);
    }

    #[test]
    fn rle_handles_all_zero_and_all_one() {
        let zeros = Array2::<u8>::zeros((3, 4));
        let rle = encode_rle(&zeros.view());
        assert_eq!(rle.counts, vec![12]);
        assert_eq!(decode_rle(&rle).unwrap(), zeros);

        let ones = Array2::<u8>::ones((3, 4));
        let rle = encode_rle(&ones.view());
        assert_eq!(rle.counts, vec![0, 12]);
        assert_eq!(decode_rle(&rle).unwrap(), ones);
    }

    #[test]
    fn rle_length_mismatch_is_an_error() {
        let rle = Rle {
            counts: vec![3],
            size: [2, 2],
        };
        assert!(decode_rle(&rle).is_err());
    }

    #[test]
    fn rectangle_polygon_fills_expected_pixels() {
        // Rectangle covering pixel centers x in {1,2}, y in {1}.
        let poly = vec![vec![1.0, 1.0, 3.0, 1.0, 3.0, 2.0, 1.0, 2.0]];
        let mask = rasterize_polygons(&poly, 4, 4);
        let expected = array![
            [0, 0, 0, 0],
            [0, 1, 1, 0],
            [0, 0, 0, 0],
            [0, 0, 0, 0]
        ];
        assert_eq!(mask, expected.mapv(|v: i32| v as u8));
    }

    #[test]
    fn byte_offset_counts_lines() {
        let text = "ab\ncd\nef";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 1), 3);
        assert_eq!(byte_offset(text, 3, 2), 7);
    }
}
