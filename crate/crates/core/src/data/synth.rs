//! Synthetic few-shot shapes benchmark.
//!
//! Images carry filled geometric shapes with per-class color+geometry
//! signatures on textured low-contrast backgrounds, so class identity is
//! angle-separable while figure/ground is separable from low-level texture.
//! A configurable fraction of instances are distractors: unlabeled
//! novel-class or off-vocabulary shapes, recorded only in the diagnostic
//! ground truth. Generation is a pure function of (config, image index).

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, ClassId, Dataset, Instance, Label};
use crate::error::{Error, Result};
use crate::geometry::BoxF;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub image_size: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Probability that an instance slot becomes an unlabeled distractor.
    pub distractor_rate: f64,
    /// Probability that a distractor takes a novel-class signature rather
    /// than an off-vocabulary one.
    pub distractor_novel_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_base_classes: 6,
            n_novel_classes: 2,
            image_size: 64,
            instances_min: 1,
            instances_max: 3,
            distractor_rate: 0.3,
            distractor_novel_frac: 0.75,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_base_classes + self.n_novel_classes
    }

    /// Default novel class ids: the trailing `n_novel_classes` ids.
    pub fn default_novel_classes(&self) -> Vec<ClassId> {
        (self.n_base_classes..self.n_classes())
            .map(|c| c as ClassId)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config(format!(
                "distractor_rate {} outside [0,1]",
                self.distractor_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_novel_frac) {
            return Err(Error::Config(format!(
                "distractor_novel_frac {} outside [0,1]",
                self.distractor_novel_frac
            )));
        }
        if self.n_base_classes == 0 {
            return Err(Error::Config("need at least one base class".into()));
        }
        if self.instances_min > self.instances_max || self.instances_min == 0 {
            return Err(Error::Config(format!(
                "invalid instances_per_image range {}..={}",
                self.instances_min, self.instances_max
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size {} too small (minimum 32)",
                self.image_size
            )));
        }
        // Rough packing feasibility for the sampled size range.
        let smax = 0.42 * self.image_size as f64;
        if self.instances_max as f64 * smax * smax > 0.95 * (self.image_size as f64).powi(2) {
            return Err(Error::Config(format!(
                "instances_per_image up to {} cannot fit into a {}px image",
                self.instances_max, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    TriangleUp,
    Diamond,
    Cross,
    Ring,
    Pentagon,
    WideEllipse,
    // off-vocabulary kinds below: used only by distractors
    Hexagon,
    Hexagram,
}

const CLASS_KINDS: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::TriangleUp,
    ShapeKind::Diamond,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Pentagon,
    ShapeKind::WideEllipse,
];

const OFF_VOCAB_KINDS: [ShapeKind; 2] = [ShapeKind::Hexagon, ShapeKind::Hexagram];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::TriangleUp => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Pentagon => "pentagon",
            ShapeKind::WideEllipse => "ellipse",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Hexagram => "hexagram",
        }
    }

    /// Membership test in the shape frame: `r` is the half-size, (dx, dy)
    /// already de-rotated. Exact, no anti-aliasing, so masks are exact.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.88 * r && dy.abs() <= 0.88 * r,
            ShapeKind::TriangleUp => point_in_convex(
                dx,
                dy,
                &[(0.0, -r), (0.98 * r, 0.8 * r), (-0.98 * r, 0.8 * r)],
            ),
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Cross => {
                (dx.abs() <= 0.34 * r && dy.abs() <= r) || (dy.abs() <= 0.34 * r && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.45 * r) * (0.45 * r)
            }
            ShapeKind::Pentagon => point_in_regular_polygon(dx, dy, r, 5, -0.5 * std::f64::consts::PI),
            ShapeKind::WideEllipse => {
                let ry = 0.55 * r;
                (dx / r) * (dx / r) + (dy / ry) * (dy / ry) <= 1.0
            }
            ShapeKind::Hexagon => point_in_regular_polygon(dx, dy, r, 6, 0.0),
            ShapeKind::Hexagram => {
                point_in_convex(
                    dx,
                    dy,
                    &[(0.0, -r), (0.92 * r, 0.62 * r), (-0.92 * r, 0.62 * r)],
                ) || point_in_convex(
                    dx,
                    dy,
                    &[(0.0, r), (0.92 * r, -0.62 * r), (-0.92 * r, -0.62 * r)],
                )
            }
        }
    }
}

fn point_in_convex(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let n = verts.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn point_in_regular_polygon(px: f64, py: f64, r: f64, sides: usize, phase: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / sides as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    point_in_convex(px, py, &verts)
}

/// Per-class visual signature: a geometry plus a hue around the wheel.
#[derive(Debug, Clone, Copy)]
pub struct ClassSignature {
    pub kind: ShapeKind,
    pub hue: f64,
}

pub fn class_signature(class: ClassId, n_classes: usize) -> ClassSignature {
    ClassSignature {
        kind: CLASS_KINDS[class as usize % CLASS_KINDS.len()],
        hue: (class as f64 + 0.5) / n_classes.max(1) as f64 * 360.0,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round().clamp(0.0, 255.0) as u8,
        (g * 255.0).round().clamp(0.0, 255.0) as u8,
        (b * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stable per-image RNG stream.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)))
}

struct PlacedShape {
    kind: ShapeKind,
    label: Label,
    cx: f64,
    cy: f64,
    r: f64,
    cos_t: f64,
    sin_t: f64,
    rgb: [u8; 3],
    nominal_box: BoxF,
}

impl PlacedShape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        // de-rotate
        let lx = dx * self.cos_t + dy * self.sin_t;
        let ly = -dx * self.sin_t + dy * self.cos_t;
        self.kind.contains(lx, ly, self.r)
    }
}

/// Generate `n_images` images. The same (config, index) pair always yields a
/// bit-identical image.
pub fn generate_synthetic(config: &SynthConfig, n_images: usize) -> Result<Dataset> {
    config.validate()?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be >= 1".into()));
    }
    let mut images = Vec::with_capacity(n_images);
    for index in 0..n_images {
        images.push(generate_image(config, index));
    }
    let mut classes = std::collections::BTreeMap::new();
    for c in 0..config.n_classes() {
        let sig = class_signature(c as ClassId, config.n_classes());
        let role = if c < config.n_base_classes { "base" } else { "novel" };
        classes.insert(c as ClassId, format!("{}_{}_{}", role, c, sig.kind.name()));
    }
    Ok(Dataset { images, classes })
}

/// Generate the image at `index` under `config`.
pub fn generate_image(config: &SynthConfig, index: usize) -> AnnotatedImage {
    let s = config.image_size;
    let mut rng = image_rng(config.seed, index);
    let mut pixels = render_background(&mut rng, s);

    let n_slots = rng.gen_range(config.instances_min..=config.instances_max);
    let n_classes = config.n_classes();
    let novel_ids = config.default_novel_classes();

    let mut placed: Vec<PlacedShape> = Vec::new();
    for _ in 0..n_slots {
        // Distractor decision first so the slot-level rate is exact.
        let is_distractor = rng.gen::<f64>() < config.distractor_rate;
        let (kind, hue, label) = if is_distractor {
            let novel = !novel_ids.is_empty() && rng.gen::<f64>() < config.distractor_novel_frac;
            if novel {
                let c = novel_ids[rng.gen_range(0..novel_ids.len())];
                let sig = class_signature(c, n_classes);
                (sig.kind, sig.hue, Label::Unlabeled { true_class: Some(c) })
            } else {
                let kind = OFF_VOCAB_KINDS[rng.gen_range(0..OFF_VOCAB_KINDS.len())];
                let hue = rng.gen_range(0.0..360.0);
                (kind, hue, Label::Unlabeled { true_class: None })
            }
        } else {
            let c = rng.gen_range(0..n_classes) as ClassId;
            let sig = class_signature(c, n_classes);
            (sig.kind, sig.hue, Label::Class(c))
        };

        // Rejection placement: keep pairwise box IoU low so shapes stay
        // mostly visible and masks stay meaningful.
        let smin = 0.18 * s as f64;
        let smax = 0.42 * s as f64;
        let mut attempt = 0;
        let shape = loop {
            attempt += 1;
            if attempt > 60 {
                break None;
            }
            let size = rng.gen_range(smin..smax);
            let r = 0.5 * size;
            let margin = 1.3 * r + 1.0;
            if 2.0 * margin >= s as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..s as f64 - margin);
            let cy = rng.gen_range(margin..s as f64 - margin);
            let nominal = BoxF::new(cx - r, cy - r, cx + r, cy + r);
            if placed.iter().any(|p| p.nominal_box.iou(&nominal) > 0.2) {
                continue;
            }
            let theta: f64 = rng.gen_range(-0.35..0.35);
            let hue_j = hue + rng.gen_range(-12.0..12.0);
            let sat = rng.gen_range(0.75..0.95);
            let val = rng.gen_range(0.75..0.95);
            break Some(PlacedShape {
                kind,
                label,
                cx,
                cy,
                r,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                rgb: hsv_to_rgb(hue_j, sat, val),
                nominal_box: nominal,
            });
        };
        if let Some(shape) = shape {
            placed.push(shape);
        }
    }

    // Composite with an ownership map so later shapes occlude earlier ones
    // and every mask stays exact.
    let mut owner: Array2<i32> = Array2::from_elem((s, s), -1);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (i, shape) in placed.iter().enumerate() {
                if shape.contains(px, py) {
                    owner[[y, x]] = i as i32;
                }
            }
        }
    }
    for y in 0..s {
        for x in 0..s {
            let o = owner[[y, x]];
            if o >= 0 {
                let shape = &placed[o as usize];
                // Smooth vertical shading keeps objects solid but not flat.
                let shade = 1.0 - 0.22 * ((y as f64 + 0.5 - shape.cy) / shape.r + 1.0) / 2.0;
                for c in 0..3 {
                    let v = shape.rgb[c] as f64 * shade;
                    pixels[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    let mut instances = Vec::new();
    for (i, shape) in placed.iter().enumerate() {
        let mut mask = Array2::<u8>::zeros((s, s));
        let (mut x1, mut y1, mut x2, mut y2) = (s, s, 0usize, 0usize);
        let mut count = 0usize;
        for y in 0..s {
            for x in 0..s {
                if owner[[y, x]] == i as i32 {
                    mask[[y, x]] = 1;
                    count += 1;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        if count == 0 {
            continue; // fully occluded; nothing was rendered
        }
        instances.push(Instance {
            bbox: BoxF::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64),
            label: shape.label,
            mask: Some(mask),
            area: count as f64,
        });
    }

    AnnotatedImage {
        image_id: format!("synth_{:016x}_{:05}", splitmix64(config.seed), index),
        pixels,
        instances,
    }
}

fn render_background(rng: &mut ChaCha8Rng, s: usize) -> Array3<u8> {
    // Muted bilinear gradient between four corner colors, plus luminance
    // speckle and a couple of faint soft blobs: textured but low contrast.
    let hue = rng.gen_range(0.0..360.0);
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            let c = hsv_to_rgb(
                hue + rng.gen_range(-25.0..25.0),
                rng.gen_range(0.05..0.22),
                rng.gen_range(0.38..0.60),
            );
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..s as f64),
                rng.gen_range(0.0..s as f64),
                rng.gen_range(0.15 * s as f64..0.45 * s as f64),
                rng.gen_range(-22.0..22.0),
            )
        })
        .collect();
    let mut pixels = Array3::<u8>::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let fx = x as f64 / (s - 1) as f64;
            let fy = y as f64 / (s - 1) as f64;
            let speckle = rng.gen_range(-16.0..16.0);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                let mut v = top * (1.0 - fy) + bot * fy + speckle;
                for &(bx, by, br, bv) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    if d2 < br * br {
                        v += bv * (1.0 - d2 / (br * br));
                    }
                }
                pixels[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    pixels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distractor_rate_yields_no_unlabeled() {
        let cfg = SynthConfig {
            distractor_rate: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 20).unwrap();
        for im in &ds.images {
            assert!(im.instances.iter().all(|i| i.label.is_labeled()));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 5).unwrap();
        let b = generate_synthetic(&cfg, 5).unwrap();
        for (ia, ib) in a.images.iter().zip(&b.images) {
            assert_eq!(ia.image_id, ib.image_id);
            assert_eq!(ia.pixels, ib.pixels);
            assert_eq!(ia.instances.len(), ib.instances.len());
        }
    }

    #[test]
    fn distractor_fraction_matches_binomial_oracle() {
        // Oracle: the distractor decision is one Bernoulli(0.5) draw per
        // slot, so over >=1000 slots the unlabeled fraction concentrates
        // within +/-0.05 of 0.5.
        let cfg = SynthConfig {
            distractor_rate: 0.5,
            instances_min: 2,
            instances_max: 3,
            seed: 7,
            ..Default::default()
        };
        let mut total = 0usize;
        let mut unlabeled = 0usize;
        let mut index = 0;
        while total < 1000 {
            let im = generate_image(&cfg, index);
            index += 1;
            for inst in &im.instances {
                total += 1;
                if !inst.label.is_labeled() {
                    unlabeled += 1;
                }
            }
        }
        let frac = unlabeled as f64 / total as f64;
        assert!(
            (frac - 0.5).abs() <= 0.05,
            "unlabeled fraction {frac} strays from 0.5"
        );
    }

    #[test]
    fn masks_and_boxes_satisfy_invariants() {
        let cfg = SynthConfig {
            seed: 3,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 10).unwrap();
        for im in &ds.images {
            im.validate().unwrap();
            for inst in &im.instances {
                let count = inst.mask_pixel_count().unwrap();
                assert!(count > 0);
                assert_eq!(count as f64, inst.area);
            }
        }
    }

    #[test]
    fn infeasible_instance_range_is_rejected() {
        let cfg = SynthConfig {
            instances_min: 9,
            instances_max: 9,
            image_size: 32,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, 1),
            Err(Error::Config(_))
        ));
    }
}
