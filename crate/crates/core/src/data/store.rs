//! Dataset directory persistence.
//!
//! Layout: `<dir>/images/*.png`, `<dir>/annotations.json` (COCO format,
//! labeled instances only), `<dir>/truth.json` (sidecar with unlabeled
//! ground truth for diagnostics; annotation files must never carry it).
//! Loading reconstructs the in-memory dataset exactly, including instance
//! order, which keeps downstream sampling reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coco::{self, Rle};
use super::{ClassId, Dataset, Instance, Label};
use crate::error::{Error, Result};
use crate::geometry::BoxF;

#[derive(Debug, Default, Serialize, Deserialize)]
struct TruthDoc {
    /// image_id -> unlabeled instances, each remembering its original
    /// position in the instance list.
    unlabeled: BTreeMap<String, Vec<UnlabeledRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnlabeledRecord {
    index: usize,
    bbox: [f64; 4],
    true_class: Option<ClassId>,
    area: f64,
    segmentation: Option<Rle>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for im in &dataset.images {
        coco::save_png(&images_dir.join(format!("{}.png", im.image_id)), &im.pixels)?;
    }
    coco::write_json(&coco::export_coco(dataset), &dir.join("annotations.json"))?;

    let mut truth = TruthDoc::default();
    for im in &dataset.images {
        let records: Vec<UnlabeledRecord> = im
            .instances
            .iter()
            .enumerate()
            .filter_map(|(index, inst)| match inst.label {
                Label::Class(_) => None,
                Label::Unlabeled { true_class } => Some(UnlabeledRecord {
                    index,
                    bbox: [inst.bbox.x1, inst.bbox.y1, inst.bbox.x2, inst.bbox.y2],
                    true_class,
                    area: inst.area,
                    segmentation: inst.mask.as_ref().map(|m| coco::encode_rle(&m.view())),
                }),
            })
            .collect();
        if !records.is_empty() {
            truth.unlabeled.insert(im.image_id.clone(), records);
        }
    }
    coco::write_json(&truth, &dir.join("truth.json"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ingest = coco::ingest_coco(&dir.join("annotations.json"), &dir.join("images"))?;
    if !ingest.skipped.is_empty() {
        return Err(Error::Other(format!(
            "dataset at {} is missing {} image file(s), first: {}",
            dir.display(),
            ingest.skipped.len(),
            ingest.skipped[0].file_name
        )));
    }
    let mut dataset = ingest.dataset;

    let truth_path = dir.join("truth.json");
    if truth_path.exists() {
        let text = std::fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        let truth: TruthDoc = coco::parse_json(&text, &truth_path)?;
        for (image_id, mut records) in truth.unlabeled {
            let Some(im) = dataset.images.iter_mut().find(|im| im.image_id == image_id)
            else {
                return Err(Error::Other(format!(
                    "truth.json references unknown image {image_id}"
                )));
            };
            records.sort_by_key(|r| r.index);
            for record in records {
                let mask = record
                    .segmentation
                    .as_ref()
                    .map(coco::decode_rle)
                    .transpose()?;
                let instance = Instance {
                    bbox: BoxF::new(record.bbox[0], record.bbox[1], record.bbox[2], record.bbox[3]),
                    label: Label::Unlabeled {
                        true_class: record.true_class,
                    },
                    mask,
                    area: record.area,
                };
                let at = record.index.min(im.instances.len());
                im.instances.insert(at, instance);
            }
        }
    }
    Ok(dataset)
}
