//! Detector scaffold: backbone, ROI feature extraction, attention
//! disentanglement, the shared head stack, and box regression.
//!
//! Images run through a small strided convolutional backbone once; each
//! region of interest is then bilinearly resampled onto a fixed grid and
//! pushed through a head stack shared by every task path. Task-specific
//! attention sits between the two: per-task masks reweight the ROI tensor
//! before the shared stack, so classification, objectness, and regression
//! can read different spatial evidence from the same features.

use ndarray::{Array2, Array3, Array4, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, ClassId};
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::heads::{HeadKind, HeadParams, Orientation};
use crate::nn::{
    gap_backward, gap_forward, sigmoid, silu_backward, silu_forward, Conv2d, ConvCache, Linear,
    LinearCache, ParamSlot, SiluCache,
};
use crate::scalar::Scalar;

/// Which task-attention masks exist and which task reads which mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SadaMode {
    /// No attention: every task reads the raw ROI tensor.
    None,
    /// One shared mask for all three tasks.
    Unified,
    /// Classification and objectness share the class-specific mask;
    /// regression gets the class-agnostic one.
    Sada1,
    /// Three independent masks, one per task.
    Sada2,
    /// Classification alone on the class-specific mask; objectness and
    /// regression share the class-agnostic one.
    Sada3,
}

/// The three task paths reading ROI features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cls,
    Obj,
    Reg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum MaskId {
    Spe,
    Agn,
    Reg,
}

impl SadaMode {
    fn mask_for(self, task: Task) -> Option<MaskId> {
        match self {
            SadaMode::None => None,
            SadaMode::Unified => Some(MaskId::Spe),
            SadaMode::Sada1 => match task {
                Task::Cls | Task::Obj => Some(MaskId::Spe),
                Task::Reg => Some(MaskId::Agn),
            },
            SadaMode::Sada2 => match task {
                Task::Cls => Some(MaskId::Spe),
                Task::Obj => Some(MaskId::Agn),
                Task::Reg => Some(MaskId::Reg),
            },
            SadaMode::Sada3 => match task {
                Task::Cls => Some(MaskId::Spe),
                Task::Obj | Task::Reg => Some(MaskId::Agn),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each backbone stage; each stage halves the
    /// resolution, so the feature stride is 2^len.
    pub channels_per_stage: Vec<usize>,
    /// Hidden channels of the shared head stack.
    pub head_channels: usize,
    /// Dimension of the ROI feature vector f.
    pub feat_dim: usize,
    /// ROI resampling grid (grid x grid samples).
    pub roi_grid: usize,
    pub sada_mode: SadaMode,
    /// One shared set of box deltas versus one set per class.
    pub class_agnostic_reg: bool,
    /// Weight of the box regression term in the detection loss.
    pub reg_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels_per_stage: vec![16, 32, 48],
            head_channels: 64,
            feat_dim: 256,
            roi_grid: 5,
            sada_mode: SadaMode::Sada3,
            class_agnostic_reg: true,
            reg_loss_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels_per_stage.len()
    }

    pub fn validate(&self, n_classes: usize, n_unknown: usize) -> Result<()> {
        if self.channels_per_stage.is_empty() {
            return Err(Error::Config("model.channels_per_stage is empty".into()));
        }
        if self.channels_per_stage.iter().any(|&c| c == 0) || self.head_channels == 0 {
            return Err(Error::Config("model channel counts must be > 0".into()));
        }
        if self.roi_grid == 0 {
            return Err(Error::Config("model.roi_grid must be > 0".into()));
        }
        if self.feat_dim < n_classes + n_unknown {
            return Err(Error::Config(format!(
                "model.feat_dim {} cannot hold {} class and {} unknown prototypes",
                self.feat_dim, n_classes, n_unknown
            )));
        }
        if self.reg_loss_weight < 0.0 {
            return Err(Error::Config("model.reg_loss_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization applied before the backbone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

/// (pixels/255 − mean)/std as a (1, 3, H, W) tensor.
pub fn preprocess<S: Scalar>(pixels: &ndarray::ArrayView3<u8>, norm: &Normalization) -> Array4<S> {
    let (h, w, _) = pixels.dim();
    let mut out = Array4::zeros((1, 3, h, w));
    for c in 0..3 {
        let mean = S::of(norm.mean[c]);
        let inv_std = S::of(1.0 / norm.std[c]);
        for y in 0..h {
            for x in 0..w {
                out[[0, c, y, x]] =
                    (S::of(pixels[[y, x, c]] as f64 / 255.0) - mean) * inv_std;
            }
        }
    }
    out
}

/// Strided convolutional feature extractor. Each stage is a stride-2 conv
/// followed by a stride-1 conv, both with SiLU. There are no normalization
/// layers and biases start at zero, so an all-zero input maps to all-zero
/// features.
#[derive(Debug, Clone)]
pub struct Backbone<S> {
    convs: Vec<Conv2d<S>>,
}

pub struct BackboneCache<S> {
    steps: Vec<(ConvCache<S>, SiluCache<S>)>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(channels_per_stage: &[usize], seed: u64) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in channels_per_stage.iter().enumerate() {
            convs.push(Conv2d::new(
                format!("backbone.s{i}.down"),
                c_in,
                c_out,
                3,
                2,
                1,
                seed,
            ));
            convs.push(Conv2d::new(
                format!("backbone.s{i}.mix"),
                c_out,
                c_out,
                3,
                1,
                1,
                seed,
            ));
            c_in = c_out;
        }
        Backbone { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().expect("backbone has stages").weight.dim().0
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, BackboneCache<S>) {
        let mut cur = x.clone();
        let mut steps = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (z, conv_cache) = conv.forward(&cur);
            let (a, silu_cache) = silu_forward(&z);
            steps.push((conv_cache, silu_cache));
            cur = a;
        }
        (cur, BackboneCache { steps })
    }

    pub fn backward(&mut self, cache: &BackboneCache<S>, grad_out: &Array4<S>) -> Array4<S> {
        let mut grad = grad_out.clone();
        for (conv, (conv_cache, silu_cache)) in
            self.convs.iter_mut().zip(cache.steps.iter()).rev()
        {
            let gz = silu_backward(silu_cache, &grad);
            grad = conv.backward(conv_cache, &gz);
        }
        grad
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for c in &mut self.convs {
            c.frozen = frozen;
        }
    }

    pub fn frozen(&self) -> bool {
        self.convs.iter().all(|c| c.frozen)
    }
}

/// One bilinear tap: feature map position and interpolation weight.
type Tap = (usize, usize, f64);

pub struct RoiCache {
    batch_of_roi: Vec<usize>,
    /// grid*grid tap lists per ROI, row-major over (gy, gx).
    taps: Vec<Vec<Vec<Tap>>>,
    in_dim: (usize, usize, usize, usize),
    grid: usize,
}

/// Resample each ROI onto a grid x grid patch with one bilinear sample at
/// each bin center. Sample points are mapped to feature coordinates with the
/// half-pixel convention u = x/stride − 0.5; taps falling outside the map
/// contribute zero.
pub fn roi_extract<S: Scalar>(
    features: &Array4<S>,
    rois: &[(usize, BoxF)],
    stride: usize,
    grid: usize,
) -> Result<(Array4<S>, RoiCache)> {
    let (n, c, hf, wf) = features.dim();
    let mut out = Array4::zeros((rois.len(), c, grid, grid));
    let mut all_taps = Vec::with_capacity(rois.len());
    let mut batch_of_roi = Vec::with_capacity(rois.len());
    for (p, (ni, bbox)) in rois.iter().enumerate() {
        if *ni >= n {
            return Err(Error::Shape(format!(
                "roi batch index {ni} out of range for batch {n}"
            )));
        }
        if !bbox.is_valid() {
            return Err(Error::Degenerate(format!(
                "roi with non-positive extent: {bbox:?}"
            )));
        }
        batch_of_roi.push(*ni);
        let (bw, bh) = (bbox.width(), bbox.height());
        let mut roi_taps = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let cx = bbox.x1 + (gx as f64 + 0.5) * bw / grid as f64;
                let cy = bbox.y1 + (gy as f64 + 0.5) * bh / grid as f64;
                let u = cx / stride as f64 - 0.5;
                let v = cy / stride as f64 - 0.5;
                let x0 = u.floor();
                let y0 = v.floor();
                let dx = u - x0;
                let dy = v - y0;
                let mut taps: Vec<Tap> = Vec::with_capacity(4);
                for (iy, wy) in [(y0, 1.0 - dy), (y0 + 1.0, dy)] {
                    for (ix, wx) in [(x0, 1.0 - dx), (x0 + 1.0, dx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        if iy >= 0.0 && ix >= 0.0 && (iy as usize) < hf && (ix as usize) < wf {
                            taps.push((iy as usize, ix as usize, wgt));
                        }
                    }
                }
                for ci in 0..c {
                    let mut acc = S::zero();
                    for &(iy, ix, wgt) in &taps {
                        acc += features[[*ni, ci, iy, ix]] * S::of(wgt);
                    }
                    out[[p, ci, gy, gx]] = acc;
                }
                roi_taps.push(taps);
            }
        }
        all_taps.push(roi_taps);
    }
    Ok((
        out,
        RoiCache {
            batch_of_roi,
            taps: all_taps,
            in_dim: (n, c, hf, wf),
            grid,
        },
    ))
}

/// Scatter ROI gradients back onto the feature map.
pub fn roi_backward<S: Scalar>(cache: &RoiCache, grad_out: &Array4<S>) -> Array4<S> {
    let (n, c, hf, wf) = cache.in_dim;
    let grid = cache.grid;
    let mut gx = Array4::zeros((n, c, hf, wf));
    for (p, roi_taps) in cache.taps.iter().enumerate() {
        let ni = cache.batch_of_roi[p];
        for gy in 0..grid {
            for gxi in 0..grid {
                let taps = &roi_taps[gy * grid + gxi];
                for ci in 0..c {
                    let g = grad_out[[p, ci, gy, gxi]];
                    for &(iy, ix, wgt) in taps {
                        gx[[ni, ci, iy, ix]] += g * S::of(wgt);
                    }
                }
            }
        }
    }
    gx
}

/// Task attention: per-mask 1x1 convolutions producing a single-channel map
/// M = sigmoid(conv(x)); the attended tensor is x ⊙ (1 + M). Convolutions
/// start at zero so every mask begins flat at 0.5.
#[derive(Debug, Clone)]
pub struct Sada<S> {
    pub mode: SadaMode,
    spe: Conv2d<S>,
    agn: Conv2d<S>,
    reg: Conv2d<S>,
}

struct MaskCache<S> {
    conv: ConvCache<S>,
    /// Sigmoid outputs, shape (P, 1, g, g).
    mask: Array4<S>,
    input: Array4<S>,
}

/// One attended tensor per distinct mask in use (or the identity path for
/// mode NONE), plus the task -> path wiring.
pub struct SadaForward<S> {
    pub attended: Vec<Array4<S>>,
    pub task_path: [usize; 3],
    caches: Vec<Option<MaskCache<S>>>,
}

impl<S: Scalar> Sada<S> {
    pub fn new(mode: SadaMode, c_in: usize) -> Self {
        Sada {
            mode,
            spe: Conv2d::zeroed("sada.spe", c_in, 1, 1),
            agn: Conv2d::zeroed("sada.agn", c_in, 1, 1),
            reg: Conv2d::zeroed("sada.reg", c_in, 1, 1),
        }
    }

    fn conv(&self, id: MaskId) -> &Conv2d<S> {
        match id {
            MaskId::Spe => &self.spe,
            MaskId::Agn => &self.agn,
            MaskId::Reg => &self.reg,
        }
    }

    fn conv_mut(&mut self, id: MaskId) -> &mut Conv2d<S> {
        match id {
            MaskId::Spe => &mut self.spe,
            MaskId::Agn => &mut self.agn,
            MaskId::Reg => &mut self.reg,
        }
    }

    /// Distinct paths in task order (cls, obj, reg), deduplicated.
    fn paths(&self) -> (Vec<Option<MaskId>>, [usize; 3]) {
        let mut paths: Vec<Option<MaskId>> = Vec::new();
        let mut task_path = [0usize; 3];
        for (t, task) in [Task::Cls, Task::Obj, Task::Reg].into_iter().enumerate() {
            let id = self.mode.mask_for(task);
            let idx = match paths.iter().position(|&p| p == id) {
                Some(i) => i,
                None => {
                    paths.push(id);
                    paths.len() - 1
                }
            };
            task_path[t] = idx;
        }
        (paths, task_path)
    }

    /// Sigmoid attention maps for every active mask, keyed by a stable
    /// short name. The masks are 1x1 convolutions, so this works on whole
    /// feature maps as well as ROI tensors; used for heatmap rendering.
    pub fn attention_maps(&self, x: &Array4<S>) -> Vec<(&'static str, Array4<S>)> {
        let (paths, _) = self.paths();
        paths
            .into_iter()
            .flatten()
            .map(|id| {
                let (logits, _) = self.conv(id).forward(x);
                let name = match id {
                    MaskId::Spe => "spe",
                    MaskId::Agn => "agn",
                    MaskId::Reg => "reg",
                };
                (name, logits.mapv(sigmoid))
            })
            .collect()
    }

    pub fn forward(&self, x: &Array4<S>) -> SadaForward<S> {
        let (paths, task_path) = self.paths();
        let mut attended = Vec::with_capacity(paths.len());
        let mut caches = Vec::with_capacity(paths.len());
        for id in paths {
            match id {
                None => {
                    attended.push(x.clone());
                    caches.push(None);
                }
                Some(id) => {
                    let conv = self.conv(id);
                    let (logits, conv_cache) = conv.forward(x);
                    let mask = logits.mapv(sigmoid);
                    let (p, c, h, w) = x.dim();
                    let mut out = Array4::zeros((p, c, h, w));
                    for pi in 0..p {
                        for ci in 0..c {
                            for y in 0..h {
                                for xi in 0..w {
                                    out[[pi, ci, y, xi]] = x[[pi, ci, y, xi]]
                                        * (S::one() + mask[[pi, 0, y, xi]]);
                                }
                            }
                        }
                    }
                    attended.push(out);
                    caches.push(Some(MaskCache {
                        conv: conv_cache,
                        mask,
                        input: x.clone(),
                    }));
                }
            }
        }
        SadaForward {
            attended,
            task_path,
            caches,
        }
    }

    /// Propagate per-path gradients back to the ROI tensor, accumulating
    /// mask convolution gradients on the way.
    pub fn backward(&mut self, fwd: &SadaForward<S>, grad_paths: &[Array4<S>]) -> Array4<S> {
        let (paths, _) = self.paths();
        assert_eq!(grad_paths.len(), paths.len(), "one gradient per path");
        let mut grad_x: Option<Array4<S>> = None;
        for (i, id) in paths.into_iter().enumerate() {
            let g = &grad_paths[i];
            let contribution = match (&fwd.caches[i], id) {
                (None, None) => g.clone(),
                (Some(cache), Some(id)) => {
                    let (p, c, h, w) = cache.input.dim();
                    // Direct term: d(x·(1+M))/dx = (1+M).
                    let mut gx = Array4::zeros((p, c, h, w));
                    // Mask term: dL/dM = sum_c g·x, then through the sigmoid
                    // and the 1x1 conv.
                    let mut gm = Array4::zeros((p, 1, h, w));
                    for pi in 0..p {
                        for y in 0..h {
                            for xi in 0..w {
                                let m = cache.mask[[pi, 0, y, xi]];
                                let mut acc = S::zero();
                                for ci in 0..c {
                                    gx[[pi, ci, y, xi]] =
                                        g[[pi, ci, y, xi]] * (S::one() + m);
                                    acc += g[[pi, ci, y, xi]] * cache.input[[pi, ci, y, xi]];
                                }
                                gm[[pi, 0, y, xi]] = acc * m * (S::one() - m);
                            }
                        }
                    }
                    let conv = self.conv_mut(id);
                    let g_from_conv = conv.backward(&cache.conv, &gm);
                    gx + g_from_conv
                }
                _ => unreachable!("cache layout matches path layout"),
            };
            grad_x = Some(match grad_x {
                None => contribution,
                Some(acc) => acc + contribution,
            });
        }
        grad_x.expect("at least one path")
    }

    /// Only the masks the current mode actually uses.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let (paths, _) = self.paths();
        let mut out = Vec::new();
        if paths.contains(&Some(MaskId::Spe)) {
            out.extend(self.spe.params_mut());
        }
        if paths.contains(&Some(MaskId::Agn)) {
            out.extend(self.agn.params_mut());
        }
        if paths.contains(&Some(MaskId::Reg)) {
            out.extend(self.reg.params_mut());
        }
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.spe.frozen = frozen;
        self.agn.frozen = frozen;
        self.reg.frozen = frozen;
    }
}

/// Shared ROI head: two 3x3 convolutions with SiLU between, then global
/// average pooling down to the feature vector f. No activation after the
/// last convolution, so f can point anywhere in feature space.
#[derive(Debug, Clone)]
pub struct HeadStack<S> {
    conv1: Conv2d<S>,
    conv2: Conv2d<S>,
}

pub struct HeadStackCache<S> {
    c1: ConvCache<S>,
    s1: SiluCache<S>,
    c2: ConvCache<S>,
    out_hw: (usize, usize),
}

impl<S: Scalar> HeadStack<S> {
    pub fn new(c_in: usize, hidden: usize, feat_dim: usize, seed: u64) -> Self {
        HeadStack {
            conv1: Conv2d::new("head_stack.conv1", c_in, hidden, 3, 1, 1, seed),
            conv2: Conv2d::new("head_stack.conv2", hidden, feat_dim, 3, 1, 1, seed),
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array2<S>, HeadStackCache<S>) {
        let (z1, c1) = self.conv1.forward(x);
        let (a1, s1) = silu_forward(&z1);
        let (z2, c2) = self.conv2.forward(&a1);
        let (_, _, h, w) = z2.dim();
        let f = gap_forward(&z2);
        (
            f,
            HeadStackCache {
                c1,
                s1,
                c2,
                out_hw: (h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &HeadStackCache<S>, grad_f: &Array2<S>) -> Array4<S> {
        let (h, w) = cache.out_hw;
        let gz2 = gap_backward(grad_f, h, w);
        let ga1 = self.conv2.backward(&cache.c2, &gz2);
        let gz1 = silu_backward(&cache.s1, &ga1);
        self.conv1.backward(&cache.c1, &gz1)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.conv1.frozen = frozen;
        self.conv2.frozen = frozen;
    }
}

/// Box delta predictor on the regression feature vector: one shared set of
/// four deltas, or four per class.
#[derive(Debug, Clone)]
pub struct RegressionHead<S> {
    pub linear: Linear<S>,
    pub class_agnostic: bool,
}

impl<S: Scalar> RegressionHead<S> {
    pub fn new(feat_dim: usize, n_classes: usize, class_agnostic: bool, seed: u64) -> Self {
        let d_out = if class_agnostic { 4 } else { 4 * n_classes };
        RegressionHead {
            linear: Linear::new("reg_head.linear", feat_dim, d_out, seed),
            class_agnostic,
        }
    }

    pub fn forward(&self, f_reg: &Array2<S>) -> (Array2<S>, LinearCache<S>) {
        self.linear.forward(f_reg)
    }

    /// The four deltas for `class` out of a prediction row.
    pub fn deltas_for(&self, pred_row: &ArrayView2<S>, row: usize, class: usize) -> [f64; 4] {
        let base = if self.class_agnostic { 0 } else { 4 * class };
        [
            pred_row[[row, base]].to_f64_lossy(),
            pred_row[[row, base + 1]].to_f64_lossy(),
            pred_row[[row, base + 2]].to_f64_lossy(),
            pred_row[[row, base + 3]].to_f64_lossy(),
        ]
    }
}

/// Smooth L1 (Huber with unit transition): 0.5x² for |x|<1, |x|−0.5 beyond.
pub fn smooth_l1<S: Scalar>(x: S) -> S {
    let a = x.abs();
    if a < S::one() {
        S::of(0.5) * x * x
    } else {
        a - S::of(0.5)
    }
}

pub fn smooth_l1_grad<S: Scalar>(x: S) -> S {
    if x.abs() < S::one() {
        x
    } else if x > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

/// One positive proposal's regression supervision: row into the prediction
/// matrix, class column (ignored for class-agnostic heads), encoded target.
pub struct RegTarget {
    pub row: usize,
    pub class: usize,
    pub target: [f64; 4],
}

/// Mean smooth L1 over positives, summed over the four coordinates, plus the
/// gradient with respect to the prediction matrix. Returns zero loss when
/// there are no targets.
pub fn reg_loss_backward<S: Scalar>(
    pred: &Array2<S>,
    targets: &[RegTarget],
    class_agnostic: bool,
    scale: S,
) -> (S, Array2<S>) {
    let mut grad = Array2::zeros(pred.dim());
    if targets.is_empty() {
        return (S::zero(), grad);
    }
    let denom = S::of(targets.len() as f64);
    let mut loss = S::zero();
    for t in targets {
        let base = if class_agnostic { 0 } else { 4 * t.class };
        for k in 0..4 {
            let diff = pred[[t.row, base + k]] - S::of(t.target[k]);
            loss += smooth_l1(diff);
            grad[[t.row, base + k]] += smooth_l1_grad(diff) / denom * scale;
        }
    }
    (loss / denom * scale, grad)
}

/// The full detector: backbone, attention, shared head stack, the decoupled
/// probability head, and box regression.
pub struct DetectorModel<S> {
    pub config: ModelConfig,
    pub norm: Normalization,
    pub backbone: Backbone<S>,
    pub sada: Sada<S>,
    pub head_stack: HeadStack<S>,
    pub reg_head: RegressionHead<S>,
    pub head: HeadParams<S>,
}

/// Task feature vectors for a batch of proposals, all (P, feat_dim).
pub struct TaskVectors<S> {
    pub f_cls: Array2<S>,
    pub f_obj: Array2<S>,
    pub f_reg: Array2<S>,
}

pub struct ProposalCache<S> {
    roi: RoiCache,
    sada: SadaForward<S>,
    stacks: Vec<HeadStackCache<S>>,
}

impl<S: Scalar> DetectorModel<S> {
    pub fn new(
        config: ModelConfig,
        kind: HeadKind,
        orientation: Orientation,
        tau: f64,
        n_classes: usize,
        n_unknown: usize,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        config.validate(n_classes, n_unknown)?;
        let backbone = Backbone::new(&config.channels_per_stage, seed);
        let c4 = *config.channels_per_stage.last().expect("validated");
        let sada = Sada::new(config.sada_mode, c4);
        let head_stack = HeadStack::new(c4, config.head_channels, config.feat_dim, seed);
        let reg_head = RegressionHead::new(
            config.feat_dim,
            n_classes,
            config.class_agnostic_reg,
            seed,
        );
        let head = HeadParams::new(
            kind,
            config.feat_dim,
            n_classes,
            n_unknown,
            tau,
            orientation,
            seed,
        )?;
        Ok(DetectorModel {
            config,
            norm,
            backbone,
            sada,
            head_stack,
            reg_head,
            head,
        })
    }

    pub fn features(&self, image: &AnnotatedImage) -> (Array4<S>, BackboneCache<S>) {
        let x = preprocess(&image.pixels.view(), &self.norm);
        self.backbone.forward(&x)
    }

    /// ROI tensors -> attention paths -> shared head stack, yielding the
    /// three task vectors.
    pub fn forward_proposals(
        &self,
        features: &Array4<S>,
        rois: &[(usize, BoxF)],
    ) -> Result<(TaskVectors<S>, ProposalCache<S>)> {
        let (f4, roi_cache) = roi_extract(
            features,
            rois,
            self.config.stride(),
            self.config.roi_grid,
        )?;
        let sada_fwd = self.sada.forward(&f4);
        let mut fs = Vec::with_capacity(sada_fwd.attended.len());
        let mut stacks = Vec::with_capacity(sada_fwd.attended.len());
        for attended in &sada_fwd.attended {
            let (f, cache) = self.head_stack.forward(attended);
            fs.push(f);
            stacks.push(cache);
        }
        let tv = TaskVectors {
            f_cls: fs[sada_fwd.task_path[0]].clone(),
            f_obj: fs[sada_fwd.task_path[1]].clone(),
            f_reg: fs[sada_fwd.task_path[2]].clone(),
        };
        Ok((
            tv,
            ProposalCache {
                roi: roi_cache,
                sada: sada_fwd,
                stacks,
            },
        ))
    }

    /// Backpropagate per-task vector gradients to the feature map,
    /// accumulating all intermediate parameter gradients.
    pub fn backward_proposals(
        &mut self,
        cache: &ProposalCache<S>,
        g_cls: &Array2<S>,
        g_obj: &Array2<S>,
        g_reg: &Array2<S>,
    ) -> Array4<S> {
        let n_paths = cache.sada.attended.len();
        let (p, d) = g_cls.dim();
        let mut per_path: Vec<Array2<S>> =
            (0..n_paths).map(|_| Array2::zeros((p, d))).collect();
        for (t, g) in [g_cls, g_obj, g_reg].into_iter().enumerate() {
            per_path[cache.sada.task_path[t]] += g;
        }
        let mut grad_paths = Vec::with_capacity(n_paths);
        for (i, gf) in per_path.iter().enumerate() {
            grad_paths.push(self.head_stack.backward(&cache.stacks[i], gf));
        }
        let grad_f4 = self.sada.backward(&cache.sada, &grad_paths);
        roi_backward(&cache.roi, &grad_f4)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let mut out = self.backbone.params_mut();
        out.extend(self.sada.params_mut());
        out.extend(self.head_stack.params_mut());
        out.extend(self.reg_head.linear.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        for mut slot in self.params_mut() {
            slot.grad.fill(S::zero());
        }
    }

    /// When true, backpropagation can stop at the feature map.
    pub fn backbone_frozen(&self) -> bool {
        self.backbone.frozen()
    }

    /// Fine-tuning trains the attention masks, prototypes, objectness
    /// affinity, and the regression head on top of frozen features.
    pub fn freeze_for_finetune(&mut self) {
        self.backbone.set_frozen(true);
        self.head_stack.set_frozen(true);
        self.sada.set_frozen(false);
        self.reg_head.linear.frozen = false;
        self.head.frozen_cls = false;
        self.head.frozen_unk = true;
        self.head.frozen_obj = false;
    }
}

/// Label assigned to a sampled proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalLabel {
    Positive(ClassId),
    Negative,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BoxF,
    pub label: ProposalLabel,
    /// Index of the matched labeled instance, for regression targets.
    pub gt_index: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Jittered copies added per ground-truth box (the box itself always
    /// counts as one positive).
    pub jitter_per_gt: usize,
    /// Negatives per positive.
    pub neg_ratio: f64,
    /// Negatives sampled when an image has no positives.
    pub min_neg: usize,
    /// Maximum relative perturbation of box coordinates when jittering.
    pub jitter_frac: f64,
    /// Negative box side lengths, as fractions of the shorter image side.
    pub neg_size_range: (f64, f64),
    /// IoU threshold separating positives from negatives.
    pub pos_iou: f64,
    pub max_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            jitter_per_gt: 3,
            neg_ratio: 3.0,
            min_neg: 8,
            jitter_frac: 0.15,
            neg_size_range: (0.10, 0.70),
            pos_iou: 0.5,
            max_tries: 40,
        }
    }
}

/// Training proposals for one image: every labeled box plus jittered copies
/// that keep IoU >= pos_iou (positives), and random boxes rejected against
/// all labeled boxes (negatives). Unlabeled instances are invisible here, so
/// boxes over them become ordinary negatives.
pub fn sample_proposals(
    image: &AnnotatedImage,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Proposal> {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let gts: Vec<(usize, BoxF, ClassId)> = image
        .instances
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| inst.label.class_id().map(|c| (i, inst.bbox, c)))
        .collect();

    let mut out = Vec::new();
    for &(gi, bbox, class) in &gts {
        out.push(Proposal {
            bbox,
            label: ProposalLabel::Positive(class),
            gt_index: Some(gi),
            iou: 1.0,
        });
        for _ in 0..cfg.jitter_per_gt {
            let mut chosen = None;
            for _ in 0..cfg.max_tries {
                let jw = bbox.width() * cfg.jitter_frac;
                let jh = bbox.height() * cfg.jitter_frac;
                let cand = BoxF::new(
                    bbox.x1 + rng.gen_range(-jw..=jw),
                    bbox.y1 + rng.gen_range(-jh..=jh),
                    bbox.x2 + rng.gen_range(-jw..=jw),
                    bbox.y2 + rng.gen_range(-jh..=jh),
                )
                .clip(w, h);
                if cand.is_valid() && cand.iou(&bbox) >= cfg.pos_iou {
                    chosen = Some(cand);
                    break;
                }
            }
            out.push(Proposal {
                bbox: chosen.unwrap_or(bbox),
                label: ProposalLabel::Positive(class),
                gt_index: Some(gi),
                iou: chosen.map_or(1.0, |c| c.iou(&bbox)),
            });
        }
    }

    let n_pos = out.len();
    let n_neg = if n_pos == 0 {
        cfg.min_neg
    } else {
        ((n_pos as f64) * cfg.neg_ratio).ceil() as usize
    };
    let short = h.min(w);
    for _ in 0..n_neg {
        for _ in 0..cfg.max_tries {
            let bw = rng.gen_range(cfg.neg_size_range.0..cfg.neg_size_range.1) * short;
            let bh = rng.gen_range(cfg.neg_size_range.0..cfg.neg_size_range.1) * short;
            let cx = rng.gen_range(0.0..w);
            let cy = rng.gen_range(0.0..h);
            let cand =
                BoxF::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
                    .clip(w, h);
            if !cand.is_valid() || cand.width() < 2.0 || cand.height() < 2.0 {
                continue;
            }
            let max_iou = gts
                .iter()
                .map(|(_, g, _)| cand.iou(g))
                .fold(0.0f64, f64::max);
            if max_iou < cfg.pos_iou {
                out.push(Proposal {
                    bbox: cand,
                    label: ProposalLabel::Negative,
                    gt_index: None,
                    iou: max_iou,
                });
                break;
            }
        }
    }
    out
}

/// Mirror an image and its annotations left-right; proposals sampled after
/// the flip see consistent geometry.
pub fn hflip_image(image: &AnnotatedImage) -> AnnotatedImage {
    let (h, w) = (image.height(), image.width());
    let mut pixels = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[[y, x, c]] = image.pixels[[y, w - 1 - x, c]];
            }
        }
    }
    let instances = image
        .instances
        .iter()
        .map(|inst| {
            let mut flipped = inst.clone();
            flipped.bbox = inst.bbox.hflip(w as f64);
            flipped.mask = inst.mask.as_ref().map(|m| {
                let (mh, mw) = m.dim();
                let mut fm = Array2::zeros((mh, mw));
                for y in 0..mh {
                    for x in 0..mw {
                        fm[[y, x]] = m[[y, mw - 1 - x]];
                    }
                }
                fm
            });
            flipped
        })
        .collect();
    AnnotatedImage {
        image_id: image.image_id.clone(),
        pixels,
        instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_image, SynthConfig};
    use crate::nn::{check_gradient, seeded_rng};
    use ndarray::array;
    use rand::SeedableRng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels_per_stage: vec![4, 6, 8],
            head_channels: 8,
            feat_dim: 12,
            roi_grid: 5,
            sada_mode: SadaMode::Sada3,
            class_agnostic_reg: true,
            reg_loss_weight: 1.0,
        }
    }

    fn small_model(mode: SadaMode) -> DetectorModel<f64> {
        let mut cfg = small_config();
        cfg.sada_mode = mode;
        DetectorModel::new(
            cfg,
            HeadKind::Uofs,
            Orientation::Outer,
            20.0,
            3,
            2,
            Normalization::default(),
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_image_maps_to_zero_features() {
        let backbone = Backbone::<f64>::new(&[4, 6], 3);
        let x = Array4::zeros((1, 3, 32, 32));
        let (f, _) = backbone.forward(&x);
        assert_eq!(f.dim(), (1, 6, 8, 8));
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_output_stride_matches_stage_count() {
        let backbone = Backbone::<f64>::new(&[4, 6, 8], 3);
        let x = Array4::zeros((2, 3, 64, 48));
        let (f, _) = backbone.forward(&x);
        assert_eq!(f.dim(), (2, 8, 8, 6));
    }

    #[test]
    fn backbone_is_shift_equivariant_away_from_borders() {
        // Shifting the input by one stride shifts the features by one cell,
        // up to border effects.
        let backbone = Backbone::<f64>::new(&[4, 6], 5);
        let stride = 4;
        let mut rng = seeded_rng(9, 1);
        let base: Array4<f64> =
            Array4::from_shape_fn((1, 3, 40, 40), |_| rng.gen_range(-1.0..1.0));
        let mut shifted = Array4::zeros((1, 3, 40, 40));
        for c in 0..3 {
            for y in 0..40 {
                for x in stride..40 {
                    shifted[[0, c, y, x]] = base[[0, c, y, x - stride]];
                }
            }
        }
        let (fa, _) = backbone.forward(&base);
        let (fb, _) = backbone.forward(&shifted);
        let (_, ch, fh, fw) = fa.dim();
        // Compare interior cells only: a final cell reads input within
        // +-9 pixels, so stay clear of the zero-filled strip and the
        // per-layer padding on both sides.
        let mut max_diff = 0.0f64;
        let mut compared = 0usize;
        for c in 0..ch {
            for y in 0..fh {
                for x in 5..fw - 2 {
                    let d = (fb[[0, c, y, x]] - fa[[0, c, y, x - 1]]).abs();
                    max_diff = max_diff.max(d);
                    compared += 1;
                }
            }
        }
        assert!(compared > 100);
        assert!(max_diff < 1e-10, "max interior drift {max_diff}");
    }

    #[test]
    fn roi_identity_crop_reproduces_aligned_features() {
        // A ROI covering exactly one feature cell per bin, centered on cell
        // centers, must read back the feature values untouched.
        let mut features = Array4::zeros((1, 2, 8, 8));
        let mut rng = seeded_rng(4, 2);
        features.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let stride = 8usize;
        let grid = 4usize;
        // Bin centers land at image coords stride*(g+0.5), which map to
        // feature coords exactly g under the half-pixel convention.
        let bbox = BoxF::new(0.0, 0.0, (grid * stride) as f64, (grid * stride) as f64);
        let (out, _) = roi_extract(&features, &[(0, bbox)], stride, grid).unwrap();
        for c in 0..2 {
            for gy in 0..grid {
                for gx in 0..grid {
                    let diff: f64 = out[[0, c, gy, gx]] - features[[0, c, gy, gx]];
                    assert!(diff.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn roi_constant_map_reads_constant() {
        let features = Array4::from_elem((1, 3, 10, 10), 0.7f64);
        let bbox = BoxF::new(13.0, 21.0, 55.0, 61.0);
        let (out, _) = roi_extract(&features, &[(0, bbox)], 8, 5).unwrap();
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_bilinear_two_by_two_oracle() {
        // One sample point at known fractional position between four cells.
        let mut features = Array4::zeros((1, 1, 2, 2));
        features[[0, 0, 0, 0]] = 1.0;
        features[[0, 0, 0, 1]] = 2.0;
        features[[0, 0, 1, 0]] = 3.0;
        features[[0, 0, 1, 1]] = 4.0;
        let stride = 4usize;
        // grid=1: single sample at box center. Put the center at feature
        // coords (0.25, 0.75): u = cx/4 - 0.5 -> cx = 5, v -> cy = 3.
        let bbox = BoxF::new(4.0, 2.0, 6.0, 4.0);
        let (out, _) = roi_extract(&features, &[(0, bbox)], stride, 1).unwrap();
        // v=0.25, u=0.75: rows blend 1..3 at 0.25, cols blend at 0.75:
        // (1-0.25)*((1-0.75)*1 + 0.75*2) + 0.25*((1-0.75)*3 + 0.75*4)
        let expect: f64 = 0.75 * (0.25 * 1.0 + 0.75 * 2.0) + 0.25 * (0.25 * 3.0 + 0.75 * 4.0);
        let got: f64 = out[[0, 0, 0, 0]];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn roi_rejects_degenerate_boxes() {
        let features = Array4::<f64>::zeros((1, 1, 4, 4));
        let err = roi_extract(&features, &[(0, BoxF::new(5.0, 5.0, 5.0, 9.0))], 8, 3);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn roi_backward_matches_finite_differences() {
        let mut rng = seeded_rng(6, 3);
        let features: Array4<f64> =
            Array4::from_shape_fn((1, 2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let rois = vec![
            (0usize, BoxF::new(3.0, 5.0, 30.0, 28.0)),
            (0usize, BoxF::new(10.0, 2.0, 44.0, 40.0)),
        ];
        let (out, cache) = roi_extract(&features, &rois, 8, 3).unwrap();
        // Loss = weighted sum of outputs with fixed random weights.
        let wts: Array4<f64> = Array4::from_shape_fn(out.dim(), |_| rng.gen_range(-1.0..1.0));
        let grad = roi_backward(&cache, &wts);
        let x0: Vec<f64> = features.iter().copied().collect();
        let ga: Vec<f64> = grad.iter().copied().collect();
        let dims = features.dim();
        let rois2 = rois.clone();
        let mut loss = move |xv: &[f64]| {
            let f = Array4::from_shape_vec(dims, xv.to_vec()).unwrap();
            let (o, _) = roi_extract(&f, &rois2, 8, 3).unwrap();
            o.iter().zip(wts.iter()).map(|(a, b)| a * b).sum()
        };
        check_gradient(&mut loss, &x0, &ga, 1e-5, 1e-6).unwrap();
    }

    #[test]
    fn sada_zero_init_scales_features_by_three_halves() {
        let sada = Sada::<f64>::new(SadaMode::Sada3, 4);
        let mut rng = seeded_rng(8, 1);
        let x: Array4<f64> = Array4::from_shape_fn((2, 4, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let fwd = sada.forward(&x);
        assert_eq!(fwd.attended.len(), 2);
        for att in &fwd.attended {
            for (a, b) in att.iter().zip(x.iter()) {
                assert!((a - 1.5 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sada_mode_wiring_paths() {
        let expect = [
            (SadaMode::None, 1, [0, 0, 0]),
            (SadaMode::Unified, 1, [0, 0, 0]),
            (SadaMode::Sada1, 2, [0, 0, 1]),
            (SadaMode::Sada2, 3, [0, 1, 2]),
            (SadaMode::Sada3, 2, [0, 1, 1]),
        ];
        for (mode, n_paths, wiring) in expect {
            let sada = Sada::<f64>::new(mode, 3);
            let (paths, task_path) = sada.paths();
            assert_eq!(paths.len(), n_paths, "{mode:?}");
            assert_eq!(task_path, wiring, "{mode:?}");
        }
    }

    #[test]
    fn sada_none_passes_features_through() {
        let sada = Sada::<f64>::new(SadaMode::None, 4);
        let x = Array4::from_elem((1, 4, 3, 3), 0.3f64);
        let fwd = sada.forward(&x);
        assert_eq!(fwd.attended.len(), 1);
        assert_eq!(fwd.attended[0], x);
    }

    #[test]
    fn sada_active_parameter_sets_follow_mode() {
        let count = |mode| {
            let mut s = Sada::<f64>::new(mode, 3);
            s.params_mut()
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        assert!(count(SadaMode::None).is_empty());
        assert_eq!(count(SadaMode::Unified).len(), 2); // weight + bias
        assert_eq!(count(SadaMode::Sada1).len(), 4);
        assert_eq!(count(SadaMode::Sada2).len(), 6);
        assert_eq!(count(SadaMode::Sada3).len(), 4);
        assert!(count(SadaMode::Sada3)
            .iter()
            .all(|n| n.starts_with("sada.spe") || n.starts_with("sada.agn")));
    }

    #[test]
    fn sada_isolation_cls_gradient_leaves_agnostic_mask_untouched() {
        // With SADA3, a loss applied only to the classification vector must
        // produce zero gradient on the agnostic mask, and vice versa.
        let mut model = small_model(SadaMode::Sada3);
        let mut rng = seeded_rng(12, 4);
        let features: Array4<f64> =
            Array4::from_shape_fn((1, 8, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let rois = vec![(0usize, BoxF::new(5.0, 5.0, 50.0, 50.0))];
        let (tv, cache) = model.forward_proposals(&features, &rois).unwrap();
        let g_cls: Array2<f64> = Array2::from_elem(tv.f_cls.dim(), 1.0);
        let zero = Array2::zeros(tv.f_cls.dim());
        model.zero_grads();
        model.backward_proposals(&cache, &g_cls, &zero, &zero);
        let spe_grad: f64 = model.sada.spe.grad_weight.iter().map(|v| v.abs()).sum();
        let agn_grad: f64 = model.sada.agn.grad_weight.iter().map(|v| v.abs()).sum();
        assert!(spe_grad > 0.0, "class mask must receive gradient");
        assert_eq!(agn_grad, 0.0, "agnostic mask must be isolated");

        model.zero_grads();
        let (_, cache) = model.forward_proposals(&features, &rois).unwrap();
        model.backward_proposals(&cache, &zero, &g_cls, &zero);
        let spe_grad: f64 = model.sada.spe.grad_weight.iter().map(|v| v.abs()).sum();
        let agn_grad: f64 = model.sada.agn.grad_weight.iter().map(|v| v.abs()).sum();
        assert_eq!(spe_grad, 0.0);
        assert!(agn_grad > 0.0);
    }

    #[test]
    fn proposal_pipeline_gradients_match_finite_differences() {
        // End-to-end through SADA + head stack: loss = weighted sum of all
        // three task vectors, checked against FD on the feature map.
        let model = small_model(SadaMode::Sada3);
        let mut rng = seeded_rng(13, 5);
        let features: Array4<f64> =
            Array4::from_shape_fn((1, 8, 6, 6), |_| rng.gen_range(-0.5..0.5));
        let rois = vec![
            (0usize, BoxF::new(4.0, 8.0, 30.0, 36.0)),
            (0usize, BoxF::new(12.0, 4.0, 46.0, 40.0)),
        ];
        let (tv, cache) = model.forward_proposals(&features, &rois).unwrap();
        let wc: Array2<f64> = Array2::from_shape_fn(tv.f_cls.dim(), |_| rng.gen_range(-1.0..1.0));
        let wo: Array2<f64> = Array2::from_shape_fn(tv.f_obj.dim(), |_| rng.gen_range(-1.0..1.0));
        let wr: Array2<f64> = Array2::from_shape_fn(tv.f_reg.dim(), |_| rng.gen_range(-1.0..1.0));
        let mut m2 = small_model(SadaMode::Sada3);
        m2.zero_grads();
        let grad_feat = m2.backward_proposals(&cache, &wc, &wo, &wr);

        let x0: Vec<f64> = features.iter().copied().collect();
        let ga: Vec<f64> = grad_feat.iter().copied().collect();
        let dims = features.dim();
        let rois2 = rois.clone();
        let model2 = small_model(SadaMode::Sada3);
        let mut loss = move |xv: &[f64]| {
            let f = Array4::from_shape_vec(dims, xv.to_vec()).unwrap();
            let (tv, _) = model2.forward_proposals(&f, &rois2).unwrap();
            tv.f_cls.iter().zip(wc.iter()).map(|(a, b)| a * b).sum::<f64>()
                + tv.f_obj.iter().zip(wo.iter()).map(|(a, b)| a * b).sum::<f64>()
                + tv.f_reg.iter().zip(wr.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        check_gradient(&mut loss, &x0, &ga, 1e-5, 1e-3).unwrap();
    }

    #[test]
    fn smooth_l1_values_and_grad() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert!((smooth_l1(0.5f64) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0f64) - 1.5).abs() < 1e-15);
        assert!((smooth_l1(-2.0f64) - 1.5).abs() < 1e-15);
        assert_eq!(smooth_l1_grad(0.5f64), 0.5);
        assert_eq!(smooth_l1_grad(3.0f64), 1.0);
        assert_eq!(smooth_l1_grad(-3.0f64), -1.0);
    }

    #[test]
    fn reg_loss_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(14, 6);
        let pred: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
        let targets = vec![
            RegTarget {
                row: 0,
                class: 0,
                target: [0.1, -0.2, 0.05, 0.3],
            },
            RegTarget {
                row: 2,
                class: 0,
                target: [1.5, 0.0, -0.7, 0.2],
            },
        ];
        let (loss, grad) = reg_loss_backward(&pred, &targets, true, 1.0);
        assert!(loss > 0.0);
        let x0: Vec<f64> = pred.iter().copied().collect();
        let ga: Vec<f64> = grad.iter().copied().collect();
        let mut f = move |xv: &[f64]| {
            let p = Array2::from_shape_vec((3, 4), xv.to_vec()).unwrap();
            reg_loss_backward(&p, &targets, true, 1.0).0
        };
        check_gradient(&mut f, &x0, &ga, 1e-6, 1e-5).unwrap();
    }

    #[test]
    fn class_specific_regression_only_trains_target_columns() {
        let mut rng = seeded_rng(15, 7);
        let pred: Array2<f64> = Array2::from_shape_fn((2, 12), |_| rng.gen_range(-1.0..1.0));
        let targets = vec![RegTarget {
            row: 1,
            class: 2,
            target: [0.5, 0.5, 0.5, 0.5],
        }];
        let (_, grad) = reg_loss_backward(&pred, &targets, false, 1.0);
        for col in 0..12 {
            let expect_zero = !(8..12).contains(&col);
            assert_eq!(grad[[0, col]], 0.0);
            if expect_zero {
                assert_eq!(grad[[1, col]], 0.0);
            }
        }
        assert!(grad.row(1).iter().skip(8).any(|&v| v != 0.0));
    }

    fn synth_image(seed: u64) -> AnnotatedImage {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        generate_image(&cfg, 0)
    }

    #[test]
    fn sampled_proposal_labels_are_iou_consistent() {
        let image = synth_image(42);
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts: Vec<(BoxF, ClassId)> = image
            .instances
            .iter()
            .filter_map(|i| i.label.class_id().map(|c| (i.bbox, c)))
            .collect();
        for round in 0..50 {
            let _ = round;
            let proposals = sample_proposals(&image, &cfg, &mut rng);
            for p in &proposals {
                let max_iou = gts.iter().map(|(g, _)| p.bbox.iou(g)).fold(0.0, f64::max);
                match p.label {
                    ProposalLabel::Positive(c) => {
                        let gt = &image.instances[p.gt_index.unwrap()];
                        assert!(p.bbox.iou(&gt.bbox) >= cfg.pos_iou - 1e-12);
                        assert_eq!(gt.label.class_id(), Some(c));
                    }
                    ProposalLabel::Negative => {
                        assert!(max_iou < cfg.pos_iou);
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_keeps_positive_negative_ratio() {
        let image = synth_image(43);
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proposals = sample_proposals(&image, &cfg, &mut rng);
        let n_pos = proposals
            .iter()
            .filter(|p| matches!(p.label, ProposalLabel::Positive(_)))
            .count();
        let n_gt = image.labeled_instances().count();
        assert_eq!(n_pos, n_gt * (1 + cfg.jitter_per_gt));
        let n_neg = proposals.len() - n_pos;
        assert!(n_neg <= (n_pos as f64 * cfg.neg_ratio).ceil() as usize);
        assert!(n_neg >= 1, "rejection sampling found no negatives");
    }

    #[test]
    fn sampler_zero_jitter_returns_exact_gt_boxes() {
        let image = synth_image(44);
        let cfg = SamplerConfig {
            jitter_per_gt: 0,
            jitter_frac: 0.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proposals = sample_proposals(&image, &cfg, &mut rng);
        for p in proposals
            .iter()
            .filter(|p| matches!(p.label, ProposalLabel::Positive(_)))
        {
            let gt = &image.instances[p.gt_index.unwrap()];
            assert_eq!(p.bbox, gt.bbox);
            assert_eq!(p.iou, 1.0);
        }
    }

    #[test]
    fn sampler_empty_image_still_yields_negatives() {
        let mut image = synth_image(45);
        image.instances.clear();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let proposals = sample_proposals(&image, &cfg, &mut rng);
        assert_eq!(proposals.len(), cfg.min_neg);
        assert!(proposals
            .iter()
            .all(|p| p.label == ProposalLabel::Negative));
    }

    #[test]
    fn hflip_preserves_instance_geometry() {
        let image = synth_image(46);
        let flipped = hflip_image(&image);
        let twice = hflip_image(&flipped);
        assert_eq!(image.pixels, twice.pixels);
        for (a, b) in image.instances.iter().zip(&twice.instances) {
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-9);
            assert!((a.bbox.x2 - b.bbox.x2).abs() < 1e-9);
            assert_eq!(a.mask, b.mask);
        }
        // Flipped boxes still frame foreground: mask pixel counts match.
        for (a, b) in image.instances.iter().zip(&flipped.instances) {
            assert_eq!(a.mask_pixel_count(), b.mask_pixel_count());
        }
    }

    #[test]
    fn model_config_validation() {
        let cfg = small_config();
        assert!(cfg.validate(3, 2).is_ok());
        assert!(cfg.validate(10, 4).is_err()); // feat_dim 12 < 14
        let mut empty = small_config();
        empty.channels_per_stage.clear();
        assert!(empty.validate(1, 1).is_err());
        assert_eq!(small_config().stride(), 8);
    }

    #[test]
    fn freeze_for_finetune_marks_expected_slots() {
        let mut model = small_model(SadaMode::Sada3);
        model.freeze_for_finetune();
        for slot in model.params_mut() {
            let frozen_expected = slot.name.starts_with("backbone.")
                || slot.name.starts_with("head_stack.")
                || slot.name == "head.w_unk";
            assert_eq!(
                slot.frozen, frozen_expected,
                "slot {} frozen={}",
                slot.name, slot.frozen
            );
        }
    }

    #[test]
    fn offsets_round_trip_through_regression_encoding() {
        let anchor = BoxF::new(10.0, 20.0, 50.0, 70.0);
        let gt = BoxF::new(12.0, 18.0, 47.0, 80.0);
        let t = crate::geometry::encode_offsets(&gt, &anchor);
        let (back, clamped) = crate::geometry::decode_offsets(&anchor, &t);
        assert!(!clamped);
        assert!((back.x1 - gt.x1).abs() < 1e-9);
        assert!((back.y2 - gt.y2).abs() < 1e-9);
        let _ = array![0.0];
    }
}
