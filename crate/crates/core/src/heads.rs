//! Classification and objectness heads.
//!
//! The decoupled head reads class identity from the angle of the ROI vector
//! and objectness from its magnitude: p_obj is affine in ‖f‖ (clamped to a
//! valid probability), class probabilities are a temperature-scaled cosine
//! softmax, and the two combine into a joint distribution over foreground
//! classes plus background. During base training, unlabeled foreground is
//! absorbed by learnable unknown prototypes: each background proposal is
//! matched to its most similar unknown column, which joins the softmax, and
//! its probability folds into the background entry. Entangled baselines
//! (cosine and dot-product softmax over classes + background) are included
//! for the feature-space ablation.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{name_salt, normal_vec, seeded_rng, softmax, ParamSlot};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Uofs,
    Ofs,
    Cosine,
    Euclidean,
}

impl HeadKind {
    pub fn is_decoupled(self) -> bool {
        matches!(self, HeadKind::Uofs | HeadKind::Ofs)
    }
}

/// Which hypersphere region background features are pushed toward. OUTER is
/// the paper's choice: background magnitudes grow, so p_obj falls with ‖f‖.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Outer,
    Inner,
}

/// Loss phase selecting the probability assembly: base training folds the
/// matched unknown prototype into the background entry; the pure-background
/// and fine-tune phases use the plain joint form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPhase {
    Base,
    Pbbs,
    Finetune,
}

/// Classification target for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    /// Column index into W_cls.
    Class(usize),
    Background,
}

/// Joint distribution over N_c foreground classes followed by background.
#[derive(Debug, Clone)]
pub struct JointProbs<S> {
    pub p: Vec<S>,
    pub p_obj: S,
    pub p_cls: Vec<S>,
    /// True when ‖f‖ was too small for angles to be defined and a uniform
    /// class distribution was substituted.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct HeadParams<S> {
    pub kind: HeadKind,
    /// (feat_dim, n_cols): one column per class; entangled kinds append a
    /// background prototype as the last column.
    pub w_cls: Array2<S>,
    /// (feat_dim, n_unknown) angular anchors for unlabeled foreground.
    pub w_unk: Array2<S>,
    /// Objectness slope and intercept, length-1 arrays so the optimizer and
    /// checkpoints treat them like any other tensor.
    pub w_obj: Array1<S>,
    pub b: Array1<S>,
    pub tau: S,
    pub eps: S,
    pub orientation: Orientation,
    pub n_classes: usize,
    pub grad_w_cls: Array2<S>,
    pub grad_w_unk: Array2<S>,
    pub grad_w_obj: Array1<S>,
    pub grad_b: Array1<S>,
    pub frozen_cls: bool,
    pub frozen_unk: bool,
    pub frozen_obj: bool,
}

fn spherical_columns<S: Scalar>(d: usize, n: usize, seed: u64, name: &str) -> Array2<S> {
    let mut rng = seeded_rng(seed, name_salt(name));
    let raw = normal_vec(&mut rng, d * n);
    let mut w = Array2::from_shape_vec((d, n), raw.into_iter().map(S::of).collect())
        .expect("prototype shape");
    for mut col in w.columns_mut() {
        let norm = col.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm > S::of(1e-12) {
            col.mapv_inplace(|v| v / norm);
        }
    }
    w
}

impl<S: Scalar> HeadParams<S> {
    pub fn new(
        kind: HeadKind,
        feat_dim: usize,
        n_classes: usize,
        n_unknown: usize,
        tau: f64,
        orientation: Orientation,
        seed: u64,
    ) -> Result<Self> {
        if n_unknown == 0 {
            return Err(Error::Config("head.n_unknown must be >= 1".into()));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("head.tau must be > 0, got {tau}")));
        }
        let n_cols = if kind.is_decoupled() {
            n_classes
        } else {
            n_classes + 1
        };
        let b0 = match orientation {
            // INNER with the OUTER intercept would start clamp-saturated
            // (z = |w|·‖f‖ + 1 > 1 for every feature) and never train.
            Orientation::Outer => 1.0,
            Orientation::Inner => 0.0,
        };
        Ok(HeadParams {
            kind,
            w_cls: spherical_columns(feat_dim, n_cols, seed, "head.w_cls"),
            w_unk: spherical_columns(feat_dim, n_unknown, seed, "head.w_unk"),
            w_obj: Array1::from_vec(vec![S::of(0.5)]),
            b: Array1::from_vec(vec![S::of(b0)]),
            tau: S::of(tau),
            eps: S::of(1e-4),
            orientation,
            n_classes,
            grad_w_cls: Array2::zeros((feat_dim, n_cols)),
            grad_w_unk: Array2::zeros((feat_dim, n_unknown)),
            grad_w_obj: Array1::zeros(1),
            grad_b: Array1::zeros(1),
            frozen_cls: false,
            frozen_unk: false,
            frozen_obj: false,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.w_cls.dim().0
    }

    pub fn n_unknown(&self) -> usize {
        self.w_unk.dim().1
    }

    fn orient(&self) -> S {
        match self.orientation {
            Orientation::Outer => -S::one(),
            Orientation::Inner => S::one(),
        }
    }

    /// Unclamped objectness logit z = ±|W_obj|·‖f‖ + b.
    fn obj_raw(&self, norm: S) -> S {
        self.orient() * self.w_obj[0].abs() * norm + self.b[0]
    }

    /// p_obj = clamp(±|W_obj|·‖f‖ + b, ε, 1−ε).
    pub fn objectness(&self, f: &ArrayView1<S>) -> Result<S> {
        let norm = vec_norm(f);
        if !norm.is_finite() {
            return Err(Error::Degenerate("non-finite feature vector".into()));
        }
        Ok(clamp(self.obj_raw(norm), self.eps, S::one() - self.eps))
    }

    /// Cosine of f against every column of `w`, plus ‖f‖.
    fn cosines(&self, f: &ArrayView1<S>, w: &Array2<S>) -> (Vec<S>, S) {
        let norm = vec_norm(f);
        let tiny = S::of(1e-12);
        let cos = w
            .columns()
            .into_iter()
            .map(|col| {
                let wn = vec_norm(&col);
                if norm < tiny || wn < tiny {
                    S::zero()
                } else {
                    dot(f, &col) / (norm * wn)
                }
            })
            .collect();
        (cos, norm)
    }

    /// Temperature-scaled cosine softmax over the class prototypes.
    pub fn class_probs(&self, f: &ArrayView1<S>) -> (Vec<S>, bool) {
        let (cos, norm) = self.cosines(f, &self.w_cls);
        let degenerate = norm < S::of(1e-12);
        if degenerate {
            let n = cos.len();
            return (vec![S::one() / S::of(n as f64); n], true);
        }
        let logits: Vec<S> = cos.iter().map(|&c| self.tau * c).collect();
        (softmax(&logits), false)
    }

    /// Most similar unknown prototype by cosine; ties take the lowest index.
    pub fn match_unknown(&self, f: &ArrayView1<S>) -> usize {
        let (cos, _) = self.cosines(f, &self.w_unk);
        let mut best = 0usize;
        for (i, &c) in cos.iter().enumerate() {
            if c > cos[best] {
                best = i;
            }
        }
        best
    }

    /// Joint probabilities for the pure-background and fine-tune phases:
    /// p = [p_cls·p_obj, 1−p_obj]. Class probabilities read the angle of
    /// `f_cls`; objectness reads the magnitude of `f_obj` (the two differ
    /// when task attention routes them through different masks).
    pub fn joint_pbbs(
        &self,
        f_cls: &ArrayView1<S>,
        f_obj: &ArrayView1<S>,
    ) -> Result<JointProbs<S>> {
        let p_obj = self.objectness(f_obj)?;
        let (p_cls, degenerate) = self.class_probs(f_cls);
        let mut p: Vec<S> = p_cls.iter().map(|&c| c * p_obj).collect();
        p.push(S::one() - p_obj);
        Ok(JointProbs {
            p,
            p_obj,
            p_cls,
            degenerate,
        })
    }

    /// Joint probabilities for the base phase: the matched unknown column
    /// joins the cosine softmax and its probability folds into background,
    /// p = [q[..N_c]·p_obj, 1−p_obj + q[N_c]·p_obj].
    pub fn joint_base(
        &self,
        f_cls: &ArrayView1<S>,
        f_obj: &ArrayView1<S>,
    ) -> Result<JointProbs<S>> {
        let p_obj = self.objectness(f_obj)?;
        let m = self.match_unknown(f_cls);
        let (mut cos, norm) = self.cosines(f_cls, &self.w_cls);
        let (unk_cos, _) = self.cosines(f_cls, &self.w_unk);
        cos.push(unk_cos[m]);
        let degenerate = norm < S::of(1e-12);
        let q = if degenerate {
            vec![S::one() / S::of(cos.len() as f64); cos.len()]
        } else {
            let logits: Vec<S> = cos.iter().map(|&c| self.tau * c).collect();
            softmax(&logits)
        };
        let nc = self.n_classes;
        let mut p: Vec<S> = q[..nc].iter().map(|&c| c * p_obj).collect();
        p.push(S::one() - p_obj + q[nc] * p_obj);
        Ok(JointProbs {
            p,
            p_obj,
            p_cls: q,
            degenerate,
        })
    }

    /// Entangled baselines over N_c+1 prototypes (background last): cosine
    /// softmax or plain dot-product softmax.
    pub fn entangled_probs(&self, f: &ArrayView1<S>) -> Vec<S> {
        match self.kind {
            HeadKind::Cosine => self.class_probs(f).0,
            HeadKind::Euclidean => {
                let logits: Vec<S> = self
                    .w_cls
                    .columns()
                    .into_iter()
                    .map(|col| dot(f, &col))
                    .collect();
                softmax(&logits)
            }
            _ => panic!("entangled_probs requires an entangled head kind"),
        }
    }

    /// Probability vector used for scoring at inference, per head kind and
    /// label space of the current W_cls. Always length n_classes + 1 with
    /// background last.
    pub fn scores(&self, f_cls: &ArrayView1<S>, f_obj: &ArrayView1<S>) -> Result<Vec<S>> {
        match self.kind {
            HeadKind::Uofs | HeadKind::Ofs => Ok(self.joint_pbbs(f_cls, f_obj)?.p),
            HeadKind::Cosine | HeadKind::Euclidean => Ok(self.entangled_probs(f_cls)),
        }
    }

    /// Cross-entropy against the joint/entangled probability for `target`,
    /// with gradients accumulated into the head parameters. Returns
    /// (loss, dL/df_cls, dL/df_obj). `scale` multiplies both the loss and
    /// every gradient.
    pub fn cls_loss_backward(
        &mut self,
        f_cls: &ArrayView1<S>,
        f_obj: &ArrayView1<S>,
        target: ClsTarget,
        phase: LossPhase,
        scale: S,
    ) -> Result<(S, Array1<S>, Array1<S>)> {
        match self.kind {
            HeadKind::Cosine => self.entangled_loss_backward(f_cls, target, scale, true),
            HeadKind::Euclidean => self.entangled_loss_backward(f_cls, target, scale, false),
            HeadKind::Uofs | HeadKind::Ofs => {
                let use_unknown = matches!(phase, LossPhase::Base) && self.kind == HeadKind::Uofs;
                self.decoupled_loss_backward(f_cls, f_obj, target, use_unknown, scale)
            }
        }
    }

    fn decoupled_loss_backward(
        &mut self,
        f_cls: &ArrayView1<S>,
        f_obj: &ArrayView1<S>,
        target: ClsTarget,
        use_unknown: bool,
        scale: S,
    ) -> Result<(S, Array1<S>, Array1<S>)> {
        let d = self.feat_dim();
        let nc = self.n_classes;
        let norm = vec_norm(f_cls);
        let norm_obj = vec_norm(f_obj);
        if !norm.is_finite() || !norm_obj.is_finite() {
            return Err(Error::Degenerate("non-finite feature vector".into()));
        }
        let tiny = S::of(1e-12);
        let mut df = Array1::<S>::zeros(d);
        let mut df_obj = Array1::<S>::zeros(d);

        // Objectness branch.
        let z = self.obj_raw(norm_obj);
        let p_obj = clamp(z, self.eps, S::one() - self.eps);

        // Angular branch: cosine softmax over class columns, plus the
        // matched unknown column during base training.
        let m = if use_unknown {
            self.match_unknown(f_cls)
        } else {
            0
        };
        let (mut cos, _) = self.cosines(f_cls, &self.w_cls);
        if use_unknown {
            let (unk_cos, _) = self.cosines(f_cls, &self.w_unk);
            cos.push(unk_cos[m]);
        }
        let degenerate = norm < tiny;
        let q = if degenerate {
            vec![S::one() / S::of(cos.len() as f64); cos.len()]
        } else {
            let logits: Vec<S> = cos.iter().map(|&c| self.tau * c).collect();
            softmax(&logits)
        };

        // Loss value and the two upstream derivatives dL/dq-logits and
        // dL/dp_obj, by case. The cross-entropy term is evaluated in
        // log-sum-exp form so value and gradient stay consistent even when
        // the softmax saturates.
        let floor = S::of(1e-12);
        let mut dlogit = vec![S::zero(); q.len()];
        let (loss, d_pobj) = match target {
            ClsTarget::Class(c) => {
                if c >= nc {
                    return Err(Error::Shape(format!(
                        "class target {c} out of range for {nc} classes"
                    )));
                }
                // L = −ln q_c − ln p_obj
                for (i, &qi) in q.iter().enumerate() {
                    dlogit[i] = qi - if i == c { S::one() } else { S::zero() };
                }
                let nll = if degenerate {
                    -(q[c].max(floor)).ln()
                } else {
                    neg_log_softmax(&cos, self.tau, c)
                };
                (nll - p_obj.ln(), -S::one() / p_obj)
            }
            ClsTarget::Background => {
                if use_unknown {
                    // L = −ln(1 − p_obj + q_unk·p_obj)
                    let u = S::one() - p_obj + q[nc] * p_obj;
                    let du_dqunk = p_obj;
                    let dl_du = -S::one() / u.max(floor);
                    for (i, &qi) in q.iter().enumerate() {
                        let jac = q[nc] * (if i == nc { S::one() } else { S::zero() } - qi);
                        dlogit[i] = dl_du * du_dqunk * jac;
                    }
                    ((-u.max(floor).ln()), dl_du * (q[nc] - S::one()))
                } else {
                    // L = −ln(1 − p_obj): no angular constraint on negatives.
                    let u = S::one() - p_obj;
                    ((-u.max(floor).ln()), S::one() / u.max(floor))
                }
            }
        };

        // Clamp subgradient, one-sided at the bounds: a term pulling p_obj
        // back toward the interior keeps its gradient, one pushing further
        // out is zeroed. Zeroing both directions leaves a fully saturated
        // head permanently dead, since early magnitude drift can push every
        // proposal past a bound at once and no objectness gradient would
        // ever flow again.
        let interior = z > self.eps && z < S::one() - self.eps;
        let recovering = (z <= self.eps && d_pobj < S::zero())
            || (z >= S::one() - self.eps && d_pobj > S::zero());
        let dz_gate = if interior || recovering {
            S::one()
        } else {
            S::zero()
        };

        // Backprop the objectness branch: z = ±|w|·‖f_obj‖ + b.
        let orient = self.orient();
        let gz = d_pobj * dz_gate * scale;
        self.grad_b[0] += gz;
        let sgn_w = if self.w_obj[0] >= S::zero() {
            S::one()
        } else {
            -S::one()
        };
        self.grad_w_obj[0] += gz * orient * sgn_w * norm_obj;
        if norm_obj > tiny {
            let coef = gz * orient * self.w_obj[0].abs() / norm_obj;
            for (gi, &fi) in df_obj.iter_mut().zip(f_obj.iter()) {
                *gi += coef * fi;
            }
        }

        // Backprop the angular branch through the cosine softmax.
        if !degenerate {
            for (i, &gl) in dlogit.iter().enumerate() {
                if gl == S::zero() {
                    continue;
                }
                let g_cos = gl * self.tau * scale;
                let col = if i < nc {
                    self.w_cls.column(i).to_owned()
                } else {
                    self.w_unk.column(m).to_owned()
                };
                let wn = vec_norm(&col.view());
                if wn < tiny {
                    continue;
                }
                let c_i = cos[i];
                // dcos/df = w/(‖f‖‖w‖) − cos·f/‖f‖²
                for k in 0..d {
                    df[k] += g_cos * (col[k] / (norm * wn) - c_i * f_cls[k] / (norm * norm));
                }
                // dcos/dw = f/(‖f‖‖w‖) − cos·w/‖w‖²
                for k in 0..d {
                    let gk = g_cos * (f_cls[k] / (norm * wn) - c_i * col[k] / (wn * wn));
                    if i < nc {
                        self.grad_w_cls[[k, i]] += gk;
                    } else {
                        self.grad_w_unk[[k, m]] += gk;
                    }
                }
            }
        }

        Ok((loss * scale, df, df_obj))
    }

    fn entangled_loss_backward(
        &mut self,
        f: &ArrayView1<S>,
        target: ClsTarget,
        scale: S,
        cosine: bool,
    ) -> Result<(S, Array1<S>, Array1<S>)> {
        let d = self.feat_dim();
        let n_cols = self.w_cls.dim().1;
        let t = match target {
            ClsTarget::Class(c) => {
                if c >= self.n_classes {
                    return Err(Error::Shape(format!(
                        "class target {c} out of range for {} classes",
                        self.n_classes
                    )));
                }
                c
            }
            ClsTarget::Background => n_cols - 1,
        };
        let norm = vec_norm(f);
        if !norm.is_finite() {
            return Err(Error::Degenerate("non-finite feature vector".into()));
        }
        let tiny = S::of(1e-12);
        let mut df = Array1::<S>::zeros(d);

        if cosine {
            let (cos, _) = self.cosines(f, &self.w_cls);
            if norm < tiny {
                let loss = -(S::one() / S::of(n_cols as f64)).ln();
                return Ok((loss * scale, df, Array1::zeros(d)));
            }
            let logits: Vec<S> = cos.iter().map(|&c| self.tau * c).collect();
            let q = softmax(&logits);
            let loss = neg_log_softmax(&cos, self.tau, t);
            for i in 0..n_cols {
                let gl = q[i] - if i == t { S::one() } else { S::zero() };
                let g_cos = gl * self.tau * scale;
                let col = self.w_cls.column(i).to_owned();
                let wn = vec_norm(&col.view());
                if wn < tiny {
                    continue;
                }
                for k in 0..d {
                    df[k] += g_cos * (col[k] / (norm * wn) - cos[i] * f[k] / (norm * norm));
                    self.grad_w_cls[[k, i]] +=
                        g_cos * (f[k] / (norm * wn) - cos[i] * col[k] / (wn * wn));
                }
            }
            Ok((loss * scale, df, Array1::zeros(d)))
        } else {
            let logits: Vec<S> = self
                .w_cls
                .columns()
                .into_iter()
                .map(|col| dot(f, &col))
                .collect();
            let q = softmax(&logits);
            let loss = neg_log_softmax(&logits, S::one(), t);
            for i in 0..n_cols {
                let gl = (q[i] - if i == t { S::one() } else { S::zero() }) * scale;
                for k in 0..d {
                    df[k] += gl * self.w_cls[[k, i]];
                    self.grad_w_cls[[k, i]] += gl * f[k];
                }
            }
            Ok((loss * scale, df, Array1::zeros(d)))
        }
    }

    /// Grow W_cls with one imprinted column per novel class (the normalized
    /// mean of the support features), in the given class order. Entangled
    /// kinds keep their background prototype as the last column, so novel
    /// columns are inserted just before it.
    pub fn expand_classes(&mut self, novel_prototypes: &[Array1<S>]) -> Result<()> {
        let d = self.feat_dim();
        let old = self.w_cls.dim().1;
        let insert_at = if self.kind.is_decoupled() {
            old
        } else {
            old - 1
        };
        let mut w = Array2::zeros((d, old + novel_prototypes.len()));
        w.slice_mut(ndarray::s![.., ..insert_at])
            .assign(&self.w_cls.slice(ndarray::s![.., ..insert_at]));
        w.slice_mut(ndarray::s![.., insert_at + novel_prototypes.len()..])
            .assign(&self.w_cls.slice(ndarray::s![.., insert_at..]));
        for (j, proto) in novel_prototypes.iter().enumerate() {
            if proto.len() != d {
                return Err(Error::Shape(format!(
                    "prototype dim {} does not match feat_dim {d}",
                    proto.len()
                )));
            }
            let norm = vec_norm(&proto.view());
            if norm < S::of(1e-8) {
                return Err(Error::Degenerate(
                    "novel prototype has near-zero norm".into(),
                ));
            }
            for k in 0..d {
                w[[k, insert_at + j]] = proto[k] / norm;
            }
        }
        self.w_cls = w;
        self.grad_w_cls = Array2::zeros((d, old + novel_prototypes.len()));
        self.n_classes += novel_prototypes.len();
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let n_cls = self.w_cls.len();
        let n_unk = self.w_unk.len();
        vec![
            ParamSlot {
                name: "head.w_cls".into(),
                value: self
                    .w_cls
                    .view_mut()
                    .into_shape_with_order(n_cls)
                    .expect("flatten"),
                grad: self
                    .grad_w_cls
                    .view_mut()
                    .into_shape_with_order(n_cls)
                    .expect("flatten"),
                frozen: self.frozen_cls,
            },
            ParamSlot {
                name: "head.w_unk".into(),
                value: self
                    .w_unk
                    .view_mut()
                    .into_shape_with_order(n_unk)
                    .expect("flatten"),
                grad: self
                    .grad_w_unk
                    .view_mut()
                    .into_shape_with_order(n_unk)
                    .expect("flatten"),
                frozen: self.frozen_unk,
            },
            ParamSlot {
                name: "head.w_obj".into(),
                value: self.w_obj.view_mut(),
                grad: self.grad_w_obj.view_mut(),
                frozen: self.frozen_obj,
            },
            ParamSlot {
                name: "head.b".into(),
                value: self.b.view_mut(),
                grad: self.grad_b.view_mut(),
                frozen: self.frozen_obj,
            },
        ]
    }
}

/// −ln p[target] with the background entry last; saturated probabilities are
/// clipped at 1e-12 and flagged.
pub fn classification_loss<S: Scalar>(p: &[S], target: ClsTarget) -> (S, bool) {
    let idx = match target {
        ClsTarget::Class(c) => c,
        ClsTarget::Background => p.len() - 1,
    };
    let floor = S::of(1e-12);
    let saturated = p[idx] < floor;
    (-(p[idx].max(floor)).ln(), saturated)
}

fn clamp<S: Scalar>(v: S, lo: S, hi: S) -> S {
    v.max(lo).min(hi)
}

/// −ln softmax(scale·raw)[t] in log-sum-exp form, exact even when the
/// softmax saturates.
fn neg_log_softmax<S: Scalar>(raw: &[S], scale: S, t: usize) -> S {
    let logits: Vec<S> = raw.iter().map(|&v| scale * v).collect();
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<S>().ln() + m;
    lse - logits[t]
}

fn vec_norm<S: Scalar>(v: &ArrayView1<S>) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn dot<S: Scalar>(a: &ArrayView1<S>, b: &ArrayView1<S>) -> S {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradient;
    use ndarray::array;
    use rand::Rng;

    fn head(kind: HeadKind, d: usize, nc: usize, nu: usize) -> HeadParams<f64> {
        HeadParams::new(kind, d, nc, nu, 20.0, Orientation::Outer, 7).unwrap()
    }

    fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Array1<f64> {
        Array1::from_vec((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn objectness_affine_at_zero_norm() {
        let mut h = head(HeadKind::Uofs, 4, 3, 2);
        h.b[0] = 0.9;
        let f = Array1::zeros(4);
        assert_eq!(h.objectness(&f.view()).unwrap(), 0.9);
    }

    #[test]
    fn objectness_clamps_at_floor_for_huge_norms() {
        let h = head(HeadKind::Uofs, 4, 3, 2);
        let f = Array1::from_elem(4, 1e6);
        assert_eq!(h.objectness(&f.view()).unwrap(), 1e-4);
    }

    #[test]
    fn objectness_scalar_oracle() {
        // w=0.1, b=0.8, ‖f‖=3 -> clamp(-0.3+0.8) = 0.5
        let mut h = head(HeadKind::Uofs, 1, 2, 1);
        h.w_obj[0] = 0.1;
        h.b[0] = 0.8;
        let f = array![3.0];
        assert!((h.objectness(&f.view()).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orientation_flip_negates_norm_slope() {
        let mk = |o| {
            let mut h =
                HeadParams::<f64>::new(HeadKind::Uofs, 3, 2, 1, 20.0, o, 3).unwrap();
            h.w_obj[0] = 0.2;
            h.b[0] = 0.5;
            h
        };
        let outer = mk(Orientation::Outer);
        let inner = mk(Orientation::Inner);
        let f1 = array![1.0, 0.0, 0.0];
        let f2 = array![1.5, 0.0, 0.0];
        let d_outer =
            outer.objectness(&f2.view()).unwrap() - outer.objectness(&f1.view()).unwrap();
        let d_inner =
            inner.objectness(&f2.view()).unwrap() - inner.objectness(&f1.view()).unwrap();
        assert!((d_outer + d_inner).abs() < 1e-12);
        assert!(d_outer < 0.0 && d_inner > 0.0);
    }

    #[test]
    fn equiangular_feature_gives_uniform_class_probs() {
        let mut h = head(HeadKind::Uofs, 3, 3, 1);
        h.w_cls = Array2::eye(3);
        let f = array![1.0, 1.0, 1.0];
        let (p, degenerate) = h.class_probs(&f.view());
        assert!(!degenerate);
        for &pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_probs_scale_invariant() {
        let h = head(HeadKind::Uofs, 8, 4, 2);
        let mut rng = crate::nn::seeded_rng(1, 1);
        let f = rand_vec(&mut rng, 8);
        let (p1, _) = h.class_probs(&f.view());
        let scaled = f.mapv(|v| v * 37.5);
        let (p2, _) = h.class_probs(&scaled.view());
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_probs_two_class_softmax_oracle() {
        // cosines (1, 0), tau=20: softmax(20, 0).
        let mut h = head(HeadKind::Uofs, 2, 2, 1);
        h.w_cls = array![[1.0, 0.0], [0.0, 1.0]];
        let f = array![2.0, 0.0];
        let (p, _) = h.class_probs(&f.view());
        let expect = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[1] - (1.0 - expect)).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_returns_uniform_with_flag() {
        let h = head(HeadKind::Uofs, 4, 5, 1);
        let f = Array1::zeros(4);
        let (p, degenerate) = h.class_probs(&f.view());
        assert!(degenerate);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn joint_pbbs_background_is_complement() {
        let mut h = head(HeadKind::Uofs, 4, 3, 2);
        h.b[0] = 5.0; // saturate p_obj at 1 - eps
        let mut rng = crate::nn::seeded_rng(2, 2);
        let f = rand_vec(&mut rng, 4).mapv(|v| v * 1e-3);
        let j = h.joint_pbbs(&f.view(), &f.view()).unwrap();
        assert!((j.p_obj - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((j.p[3] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn joint_pbbs_arithmetic_assembly() {
        // Engineer cosines so p_cls = (0.7, 0.3), then check the assembly
        // p = [0.35, 0.15, 0.5] at p_obj = 0.5.
        let mut h = head(HeadKind::Uofs, 2, 2, 1);
        let delta = (0.7f64 / 0.3).ln() / 20.0; // cosine gap giving 0.7/0.3
        let c1: f64 = 0.8;
        let c2 = c1 - delta;
        h.w_cls = array![
            [c1, c2],
            [(1.0 - c1 * c1).sqrt(), (1.0 - c2 * c2).sqrt()]
        ];
        let f = array![1.0, 0.0];
        h.w_obj[0] = 0.5;
        h.b[0] = 1.0; // z = -0.5*1 + 1 = 0.5
        let j = h.joint_pbbs(&f.view(), &f.view()).unwrap();
        assert!((j.p_obj - 0.5).abs() < 1e-12);
        assert!((j.p_cls[0] - 0.7).abs() < 1e-9);
        assert!((j.p[0] - 0.35).abs() < 1e-9);
        assert!((j.p[1] - 0.15).abs() < 1e-9);
        assert!((j.p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn joint_sums_to_one_on_random_draws() {
        let mut rng = crate::nn::seeded_rng(3, 9);
        for i in 0..500 {
            let mut h = HeadParams::<f64>::new(
                HeadKind::Uofs,
                6,
                4,
                3,
                20.0,
                if i % 2 == 0 {
                    Orientation::Outer
                } else {
                    Orientation::Inner
                },
                i,
            )
            .unwrap();
            h.w_obj[0] = rng.gen_range(-1.0..1.0);
            h.b[0] = rng.gen_range(-0.5..1.5);
            let f = rand_vec(&mut rng, 6).mapv(|v| v * rng.gen_range(0.01..10.0));
            let a = h.joint_pbbs(&f.view(), &f.view()).unwrap();
            let b = h.joint_base(&f.view(), &f.view()).unwrap();
            assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((b.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(a.p.iter().all(|&v| v >= 0.0));
            assert!(b.p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn match_unknown_singleton_and_self_match() {
        let h = head(HeadKind::Uofs, 6, 2, 1);
        let mut rng = crate::nn::seeded_rng(4, 4);
        let f = rand_vec(&mut rng, 6);
        assert_eq!(h.match_unknown(&f.view()), 0);

        let h5 = head(HeadKind::Uofs, 6, 2, 5);
        let f3 = h5.w_unk.column(3).to_owned();
        assert_eq!(h5.match_unknown(&f3.view()), 3);
    }

    #[test]
    fn match_unknown_brute_force_oracle() {
        let h = head(HeadKind::Uofs, 8, 2, 5);
        let mut rng = crate::nn::seeded_rng(5, 5);
        for _ in 0..200 {
            let f = rand_vec(&mut rng, 8);
            let fr = f.view();
            let norm: f64 = fr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for u in 0..5 {
                let col = h.w_unk.column(u);
                let wn: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = fr
                    .iter()
                    .zip(col.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (norm * wn);
                if cos > best_cos {
                    best_cos = cos;
                    best = u;
                }
            }
            assert_eq!(h.match_unknown(&fr), best);
        }
    }

    #[test]
    fn joint_base_obj_floor_limit() {
        let mut h = head(HeadKind::Uofs, 4, 3, 2);
        h.b[0] = -5.0; // p_obj clamps at eps
        let mut rng = crate::nn::seeded_rng(6, 1);
        let f = rand_vec(&mut rng, 4);
        let j = h.joint_base(&f.view(), &f.view()).unwrap();
        assert!((j.p_obj - 1e-4).abs() < 1e-15);
        assert!(j.p[3] > 0.999);
        for i in 0..3 {
            assert!(j.p[i] <= 1e-4);
        }
    }

    #[test]
    fn joint_base_scalar_pipeline_oracle() {
        // cosines to (cls1, cls2, unk_m) = (0.9, 0.1, 0.5), tau=20,
        // p_obj=0.6: assemble by scalar softmax and compare to 1e-9.
        let mut h = head(HeadKind::Uofs, 3, 2, 1);
        h.w_cls = array![
            [0.9, 0.1],
            [(1.0 - 0.81f64).sqrt(), (1.0 - 0.01f64).sqrt()],
            [0.0, 0.0]
        ];
        h.w_unk = array![[0.5], [0.0], [(1.0 - 0.25f64).sqrt()]];
        let f = array![1.0, 0.0, 0.0];
        h.w_obj[0] = 0.4;
        h.b[0] = 1.0; // z = -0.4 + 1.0 = 0.6
        let j = h.joint_base(&f.view(), &f.view()).unwrap();

        let logits = [18.0, 2.0, 10.0];
        let m = 18.0f64;
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let q: Vec<f64> = e.iter().map(|v| v / s).collect();
        let expect = [q[0] * 0.6, q[1] * 0.6, 0.4 + q[2] * 0.6];
        for (a, b) in j.p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn entangled_cosine_self_similarity_picks_background() {
        let h = head(HeadKind::Cosine, 6, 3, 1);
        let bg = h.w_cls.column(3).to_owned();
        let p = h.entangled_probs(&bg.view());
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
    }

    #[test]
    fn euclidean_scaling_sharpens_but_preserves_argmax() {
        let h = head(HeadKind::Euclidean, 6, 3, 1);
        let mut rng = crate::nn::seeded_rng(8, 8);
        for _ in 0..50 {
            let f = rand_vec(&mut rng, 6);
            let p1 = h.entangled_probs(&f.view());
            let f2 = f.mapv(|v| v * 2.0);
            let p2 = h.entangled_probs(&f2.view());
            let am = |p: &[f64]| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(&p1), am(&p2));
            assert!(p2[am(&p2)] >= p1[am(&p1)] - 1e-12);
        }
    }

    #[test]
    fn entangled_three_prototype_oracle() {
        let mut h = head(HeadKind::Cosine, 2, 2, 1);
        h.w_cls = array![[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        let f = array![1.0, 0.0];
        let p = h.entangled_probs(&f.view());
        let expect = softmax(&[20.0f64, 0.0, -20.0]);
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_loss_values() {
        let (l, sat) = classification_loss(&[1.0f64, 0.0, 0.0], ClsTarget::Class(0));
        assert_eq!(l, 0.0);
        assert!(!sat);
        let third = 1.0 / 3.0;
        let (l, _) = classification_loss(&[third, third, third], ClsTarget::Class(1));
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
        let (_, sat) = classification_loss(&[1.0f64, 0.0], ClsTarget::Background);
        assert!(sat);
    }

    #[test]
    fn batch_loss_matches_elementwise_mean() {
        let batch = [
            (vec![0.5f64, 0.2, 0.3], ClsTarget::Class(0)),
            (vec![0.1, 0.6, 0.3], ClsTarget::Class(1)),
            (vec![0.2, 0.2, 0.6], ClsTarget::Background),
            (vec![0.25, 0.25, 0.5], ClsTarget::Background),
        ];
        let mean: f64 = batch
            .iter()
            .map(|(p, t)| classification_loss(p, *t).0)
            .sum::<f64>()
            / 4.0;
        let by_hand =
            (-(0.5f64).ln() - (0.6f64).ln() - (0.6f64).ln() - (0.5f64).ln()) / 4.0;
        assert!((mean - by_hand).abs() < 1e-12);
    }

    /// Finite-difference check of every gradient of the loss for one
    /// (kind, phase, target) combination, with independent class and
    /// objectness feature vectors.
    fn grad_check_case(kind: HeadKind, phase: LossPhase, target: ClsTarget, seed: u64) {
        let d = 5;
        let (nc, nu) = (3, 2);
        let mut rng = crate::nn::seeded_rng(seed, 17);
        let fc = rand_vec(&mut rng, d);
        let fo = rand_vec(&mut rng, d);
        let scale = 0.7;

        let build = |seed: u64| -> HeadParams<f64> {
            let mut h =
                HeadParams::new(kind, d, nc, nu, 20.0, Orientation::Outer, seed).unwrap();
            h.w_obj[0] = 0.4;
            h.b[0] = 0.9;
            h
        };
        let mut h = build(seed);
        let (_, df_cls, df_obj) = h
            .cls_loss_backward(&fc.view(), &fo.view(), target, phase, scale)
            .unwrap();

        // d/df_cls and d/df_obj jointly, as one stacked input.
        let x0: Vec<f64> = fc.iter().chain(fo.iter()).copied().collect();
        let ga: Vec<f64> = df_cls.iter().chain(df_obj.iter()).copied().collect();
        let mut lf = |xv: &[f64]| {
            let mut hh = build(seed);
            let fa = Array1::from_vec(xv[..d].to_vec());
            let fb = Array1::from_vec(xv[d..].to_vec());
            hh.cls_loss_backward(&fa.view(), &fb.view(), target, phase, scale)
                .unwrap()
                .0
        };
        check_gradient(&mut lf, &x0, &ga, 1e-5, 1e-4).unwrap();

        // d/dW_cls
        let w0: Vec<f64> = h.w_cls.iter().copied().collect();
        let gw: Vec<f64> = h.grad_w_cls.iter().copied().collect();
        let mut lw = |wv: &[f64]| {
            let mut hh = build(seed);
            hh.w_cls = Array2::from_shape_vec(hh.w_cls.dim(), wv.to_vec()).unwrap();
            hh.cls_loss_backward(&fc.view(), &fo.view(), target, phase, scale)
                .unwrap()
                .0
        };
        check_gradient(&mut lw, &w0, &gw, 1e-5, 1e-4).unwrap();

        // d/dW_unk (meaningful only for UOFS base phase; still must be
        // correct, i.e. zero, elsewhere). The argmax match is piecewise
        // constant; small steps keep it stable away from ties.
        let u0: Vec<f64> = h.w_unk.iter().copied().collect();
        let gu: Vec<f64> = h.grad_w_unk.iter().copied().collect();
        let mut lu = |uv: &[f64]| {
            let mut hh = build(seed);
            hh.w_unk = Array2::from_shape_vec(hh.w_unk.dim(), uv.to_vec()).unwrap();
            hh.cls_loss_backward(&fc.view(), &fo.view(), target, phase, scale)
                .unwrap()
                .0
        };
        check_gradient(&mut lu, &u0, &gu, 1e-6, 1e-3).unwrap();

        // d/dw_obj and d/db
        let s0 = [h.w_obj[0], h.b[0]];
        let gs = [h.grad_w_obj[0], h.grad_b[0]];
        let mut ls = |sv: &[f64]| {
            let mut hh = build(seed);
            hh.w_obj[0] = sv[0];
            hh.b[0] = sv[1];
            hh.cls_loss_backward(&fc.view(), &fo.view(), target, phase, scale)
                .unwrap()
                .0
        };
        check_gradient(&mut ls, &s0, &gs, 1e-5, 1e-4).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences_across_kinds_and_phases() {
        for seed in [1u64, 2, 3] {
            grad_check_case(HeadKind::Uofs, LossPhase::Base, ClsTarget::Class(1), seed);
            grad_check_case(HeadKind::Uofs, LossPhase::Base, ClsTarget::Background, seed);
            grad_check_case(HeadKind::Uofs, LossPhase::Pbbs, ClsTarget::Class(0), seed);
            grad_check_case(HeadKind::Uofs, LossPhase::Pbbs, ClsTarget::Background, seed);
            grad_check_case(HeadKind::Ofs, LossPhase::Base, ClsTarget::Class(2), seed);
            grad_check_case(HeadKind::Ofs, LossPhase::Base, ClsTarget::Background, seed);
            grad_check_case(HeadKind::Cosine, LossPhase::Base, ClsTarget::Class(0), seed);
            grad_check_case(
                HeadKind::Cosine,
                LossPhase::Base,
                ClsTarget::Background,
                seed,
            );
            grad_check_case(
                HeadKind::Euclidean,
                LossPhase::Base,
                ClsTarget::Class(1),
                seed,
            );
            grad_check_case(
                HeadKind::Euclidean,
                LossPhase::Base,
                ClsTarget::Background,
                seed,
            );
        }
    }

    #[test]
    fn loss_value_matches_probability_pipeline() {
        // The backward entry point must report the same loss as -ln p[t]
        // computed from the forward-only probability assembly.
        let mut rng = crate::nn::seeded_rng(11, 3);
        for seed in 0..20u64 {
            let mut h = head(HeadKind::Uofs, 6, 4, 3);
            h.w_obj[0] = 0.3;
            h.b[0] = 0.8;
            let f = rand_vec(&mut rng, 6);
            let j = h.joint_base(&f.view(), &f.view()).unwrap();
            let (l, _) = classification_loss(&j.p, ClsTarget::Background);
            let (l2, _, _) = h
                .cls_loss_backward(
                    &f.view(),
                    &f.view(),
                    ClsTarget::Background,
                    LossPhase::Base,
                    1.0,
                )
                .unwrap();
            assert!((l - l2).abs() < 1e-10, "seed {seed}: {l} vs {l2}");

            let c = ClsTarget::Class(2);
            let (lc, _) = classification_loss(&j.p, c);
            let mut h2 = head(HeadKind::Uofs, 6, 4, 3);
            h2.w_obj[0] = 0.3;
            h2.b[0] = 0.8;
            let (lc2, _, _) = h2
                .cls_loss_backward(&f.view(), &f.view(), c, LossPhase::Base, 1.0)
                .unwrap();
            assert!((lc - lc2).abs() < 1e-10);
        }
    }

    #[test]
    fn expand_classes_imprints_normalized_prototypes() {
        let mut h = head(HeadKind::Uofs, 4, 2, 1);
        let proto = array![2.0, 0.0, 0.0, 0.0];
        h.expand_classes(&[proto]).unwrap();
        assert_eq!(h.n_classes, 3);
        assert_eq!(h.w_cls.dim(), (4, 3));
        assert!((h.w_cls[[0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expand_classes_keeps_entangled_background_last() {
        let mut h = head(HeadKind::Cosine, 4, 2, 1);
        let bg: Vec<f64> = h.w_cls.column(2).to_vec();
        let proto = array![0.0, 3.0, 0.0, 0.0];
        h.expand_classes(&[proto]).unwrap();
        assert_eq!(h.n_classes, 3);
        assert_eq!(h.w_cls.dim(), (4, 4));
        assert!((h.w_cls[[1, 2]] - 1.0).abs() < 1e-12);
        assert_eq!(h.w_cls.column(3).to_vec(), bg);
        // Self-similarity still lands on the background entry.
        let f: Array1<f64> = h.w_cls.column(3).to_owned();
        let p = h.entangled_probs(&f.view());
        assert_eq!(p.len(), 4);
        let arg = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg, 3);
    }
}
