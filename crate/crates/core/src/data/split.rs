//! Base/novel class partitioning and k-shot sampling.
//!
//! Base training must never see novel labels, so `base_visible` relabels
//! novel instances as unlabeled while keeping their ground truth for
//! diagnostics. Fine-tuning uses a balanced set: the k sampled novel shots
//! plus k shots per base class.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as index_sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassId, Dataset, FewShotSplit, InstanceRef, Label};
use crate::error::{Error, Result};

/// All labeled instances of `class`, in image order then instance order.
pub fn labeled_refs_of_class(dataset: &Dataset, class: ClassId) -> Vec<InstanceRef> {
    let mut refs = Vec::new();
    for im in &dataset.images {
        for (i, inst) in im.instances.iter().enumerate() {
            if inst.label == Label::Class(class) {
                refs.push(InstanceRef {
                    image_id: im.image_id.clone(),
                    instance_index: i,
                });
            }
        }
    }
    refs
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn sample_refs(
    dataset: &Dataset,
    class: ClassId,
    k: usize,
    seed: u64,
    salt: u64,
) -> Result<Vec<InstanceRef>> {
    let candidates = labeled_refs_of_class(dataset, class);
    if candidates.len() < k {
        return Err(Error::InsufficientShots {
            class,
            available: candidates.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, salt ^ u64::from(class)));
    let mut picked: Vec<usize> = index_sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Deterministic k-shot split: `k` labeled instances sampled per novel
/// class, without replacement, from `dataset`.
pub fn make_split(
    dataset: &Dataset,
    novel_classes: &BTreeSet<ClassId>,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    let all: BTreeSet<ClassId> = dataset.classes.keys().copied().collect();
    for c in novel_classes {
        if !all.contains(c) {
            return Err(Error::Config(format!(
                "novel class {c} is not in the dataset vocabulary"
            )));
        }
    }
    if novel_classes.len() == all.len() {
        return Err(Error::Config(
            "every class marked novel; no base classes remain".into(),
        ));
    }
    let base_classes: BTreeSet<ClassId> = all.difference(novel_classes).copied().collect();
    let mut novel_sample_ids = BTreeMap::new();
    for &c in novel_classes {
        novel_sample_ids.insert(c, sample_refs(dataset, c, k, seed, 0x6e6f76656c)?);
    }
    Ok(FewShotSplit {
        base_classes,
        novel_classes: novel_classes.clone(),
        k,
        novel_sample_ids,
    })
}

/// The dataset as base training sees it: novel-class labels replaced by the
/// unlabeled sentinel (ground truth retained for diagnostics), vocabulary
/// reduced to base classes.
pub fn base_visible(dataset: &Dataset, split: &FewShotSplit) -> Dataset {
    let images = dataset
        .images
        .iter()
        .map(|im| {
            let mut im = im.clone();
            for inst in &mut im.instances {
                if let Label::Class(c) = inst.label {
                    if split.is_novel(c) {
                        inst.label = Label::Unlabeled {
                            true_class: Some(c),
                        };
                    }
                }
            }
            im
        })
        .collect();
    let classes = dataset
        .classes
        .iter()
        .filter(|(c, _)| split.is_base(**c))
        .map(|(c, n)| (*c, n.clone()))
        .collect();
    Dataset { images, classes }
}

/// Balanced fine-tune set: the split's k novel shots plus k deterministic
/// shots per base class. Images are deduplicated; instances not selected are
/// relabeled unlabeled so the fine-tune loss treats them as background.
pub fn finetune_set(dataset: &Dataset, split: &FewShotSplit, seed: u64) -> Result<Dataset> {
    let mut selected: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut note = |r: &InstanceRef| {
        selected
            .entry(r.image_id.clone())
            .or_default()
            .insert(r.instance_index);
    };
    for refs in split.novel_sample_ids.values() {
        for r in refs {
            note(r);
        }
    }
    for &c in &split.base_classes {
        for r in sample_refs(dataset, c, split.k, seed, 0x62617365)? {
            note(&r);
        }
    }

    let mut images = Vec::new();
    for im in &dataset.images {
        let Some(keep) = selected.get(&im.image_id) else {
            continue;
        };
        let mut im = im.clone();
        for (i, inst) in im.instances.iter_mut().enumerate() {
            if keep.contains(&i) {
                continue;
            }
            if let Label::Class(c) = inst.label {
                inst.label = Label::Unlabeled {
                    true_class: Some(c),
                };
            }
        }
        images.push(im);
    }
    Ok(Dataset {
        images,
        classes: dataset.classes.clone(),
    })
}
