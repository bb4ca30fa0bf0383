//! Canonical dataset representation shared by every stage.
//!
//! Images are dense H×W×3 u8 arrays. Instances carry a box, a label, and an
//! optional exact binary mask. Unlabeled instances exist only as synthetic
//! ground truth for diagnostics: exporters strip them, so no training path
//! ever observes their identity.

pub mod coco;
pub mod split;
pub mod store;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxF;

pub type ClassId = u32;

/// Instance label. `Unlabeled` records the true synthetic identity (if any)
/// purely for diagnostics; it is never exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(ClassId),
    Unlabeled { true_class: Option<ClassId> },
}

impl Label {
    pub fn class_id(&self) -> Option<ClassId> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Unlabeled { .. } => None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self, Label::Class(_))
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub bbox: BoxF,
    pub label: Label,
    /// Full-image binary mask (H×W, values 0/1), exact where present.
    pub mask: Option<Array2<u8>>,
    /// Pixel area: mask count when a mask exists, box area otherwise.
    pub area: f64,
}

impl Instance {
    pub fn mask_pixel_count(&self) -> Option<usize> {
        self.mask
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v != 0).count())
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image_id: String,
    /// (H, W, 3) with 8-bit channels.
    pub pixels: Array3<u8>,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Check the structural invariants: boxes inside bounds, mask pixels
    /// inside the box dilated by at most 2 px.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height() as f64, self.width() as f64);
        for (idx, inst) in self.instances.iter().enumerate() {
            let b = &inst.bbox;
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::Shape(format!(
                    "instance {idx} of {} has box {:?} outside {w}x{h}",
                    self.image_id, b
                )));
            }
            if let Some(mask) = &inst.mask {
                if mask.shape() != [self.height(), self.width()] {
                    return Err(Error::Shape(format!(
                        "instance {idx} of {} has mask shape {:?}, image is {}x{}",
                        self.image_id,
                        mask.shape(),
                        self.height(),
                        self.width()
                    )));
                }
                let dilated = BoxF::new(b.x1 - 2.0, b.y1 - 2.0, b.x2 + 2.0, b.y2 + 2.0);
                for ((y, x), &v) in mask.indexed_iter() {
                    if v != 0 && !dilated.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                        return Err(Error::Shape(format!(
                            "instance {idx} of {} has mask pixel ({x},{y}) outside its box",
                            self.image_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn labeled_instances(&self) -> impl Iterator<Item = (usize, &Instance)> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.label.is_labeled())
    }
}

/// Immutable collection of annotated images plus the class vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    /// class id -> class name, ordered.
    pub classes: BTreeMap<ClassId, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn find_image(&self, image_id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|im| im.image_id == image_id)
    }

    /// Count instances currently carrying the given label kind.
    pub fn labeled_instance_count(&self) -> usize {
        self.images
            .iter()
            .map(|im| im.labeled_instances().count())
            .sum()
    }

    /// Per-channel mean and standard deviation of pixels scaled to [0,1].
    /// Used to normalize backbone inputs.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut count = 0usize;
        for im in &self.images {
            let (h, w) = (im.height(), im.width());
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let v = im.pixels[[y, x, c]] as f64 / 255.0;
                        sum[c] += v;
                        sumsq[c] += v * v;
                    }
                }
            }
            count += h * w;
        }
        let n = count.max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            let var = (sumsq[c] / n - mean[c] * mean[c]).max(1e-12);
            std[c] = var.sqrt();
        }
        (mean, std)
    }
}

/// Reference to a single instance inside a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceRef {
    pub image_id: String,
    pub instance_index: usize,
}

/// Base/novel class partition and the k-shot novel sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub base_classes: BTreeSet<ClassId>,
    pub novel_classes: BTreeSet<ClassId>,
    pub k: usize,
    pub novel_sample_ids: BTreeMap<ClassId, Vec<InstanceRef>>,
}

impl FewShotSplit {
    pub fn is_base(&self, class: ClassId) -> bool {
        self.base_classes.contains(&class)
    }

    pub fn is_novel(&self, class: ClassId) -> bool {
        self.novel_classes.contains(&class)
    }

    /// Evaluation label space under G-FSOD: base then novel, ordered.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.base_classes
            .iter()
            .chain(self.novel_classes.iter())
            .copied()
            .collect()
    }
}
