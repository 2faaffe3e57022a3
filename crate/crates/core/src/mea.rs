//! Modal extraction alignment: global-context and focal feature imitation losses
//! between one teacher modality and the student's fused feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{channel_attention, channel_map, spatial_attention, spatial_map};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 4;

/// Parameters of one global-context block.
///
/// `conv1` scores pixels for context pooling, `conv2`/`conv3` form the
/// bottleneck transform producing the channel-wise additive weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GcParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub reduction: usize,
}

pub const GC_PARAM_NAMES: [&str; 6] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
];

/// Bottleneck width `C/r`, never below one channel.
pub fn bottleneck(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl GcParams {
    /// Training initialization: small uniform context and bottleneck weights,
    /// zero output projection so the block starts as the identity.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let mid = bottleneck(channels, reduction);
        Self {
            conv1_w: Tensor::uniform(&[1, channels], 0.1, rng),
            conv1_b: Tensor::zeros(&[1]),
            conv2_w: Tensor::uniform(&[mid, channels], 0.1, rng),
            conv2_b: Tensor::zeros(&[mid]),
            conv3_w: Tensor::zeros(&[channels, mid]),
            conv3_b: Tensor::zeros(&[channels]),
            reduction,
        }
    }

    /// Every entry drawn uniformly from `[-scale, scale)`.
    pub fn random(channels: usize, reduction: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mid = bottleneck(channels, reduction);
        Self {
            conv1_w: Tensor::uniform(&[1, channels], scale, rng),
            conv1_b: Tensor::uniform(&[1], scale, rng),
            conv2_w: Tensor::uniform(&[mid, channels], scale, rng),
            conv2_b: Tensor::uniform(&[mid], scale, rng),
            conv3_w: Tensor::uniform(&[channels, mid], scale, rng),
            conv3_b: Tensor::uniform(&[channels], scale, rng),
            reduction,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv3_b.len()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    /// Registers the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> GcVars {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape, trainable: bool) -> GcVars {
        let [a, b, c, d, e, f] = self.tensors().map(|t| tape.leaf(t.clone(), trainable));
        GcVars {
            conv1_w: a,
            conv1_b: b,
            conv2_w: c,
            conv2_b: d,
            conv3_w: e,
            conv3_b: f,
        }
    }
}

/// [`GcParams`] as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GcVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
}

impl GcVars {
    pub fn vars(&self) -> [Var; 6] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.conv3_w,
            self.conv3_b,
        ]
    }
}

/// Channel-wise weight `C×1×1`: softmax-pooled context through the bottleneck.
pub fn gc_weight(tape: &mut Tape, x: Var, p: &GcVars) -> Result<Var> {
    let scores = tape.channel_mix(x, p.conv1_w, p.conv1_b)?;
    let pooling = tape.softmax(scores)?;
    let context = tape.pixel_weighted_sum(x, pooling)?;
    let hidden = tape.channel_mix(context, p.conv2_w, p.conv2_b)?;
    let hidden = tape.layer_norm_relu(hidden)?;
    Ok(tape.channel_mix(hidden, p.conv3_w, p.conv3_b)?)
}

/// `x ⊕ W(x)`: the feature map with the channel-wise weight broadcast onto it.
pub fn gc_apply(tape: &mut Tape, x: Var, p: &GcVars) -> Result<Var> {
    let w = gc_weight(tape, x, p)?;
    tape.broadcast_add(x, w)
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `λ · Σ (G(teacher) − G(student))²` with one shared block `G`.
pub fn global_loss(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    p: &GcVars,
    lambda: f64,
) -> Result<Var> {
    same_shape(tape, teacher, student)?;
    let gt = gc_apply(tape, teacher, p)?;
    let gs = gc_apply(tape, student, p)?;
    let d = tape.sub(gt, gs)?;
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, lambda))
}

/// Per-cell foreground weight at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalMask {
    pub grid: Tensor,
    pub stride: f64,
}

/// Box extents in cells at `stride`: `floor(min/stride)`, `ceil(max/stride)`,
/// clipped to the level. `None` when nothing of the box remains.
pub fn box_cells(b: &BBox, level: (usize, usize), stride: f64) -> Option<[usize; 4]> {
    let (h, w) = level;
    let clip = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let c0 = clip((b.x1 / stride).floor(), w);
    let c1 = clip((b.x2 / stride).ceil(), w);
    let r0 = clip((b.y1 / stride).floor(), h);
    let r1 = clip((b.y2 / stride).ceil(), h);
    (c1 > c0 && r1 > r0).then_some([r0, r1, c0, c1])
}

/// Foreground mask: each covered cell gets `1/(h_b·w_b)` of the largest covering
/// box, measured in level cells; uncovered cells are zero.
pub fn build_mask(boxes: &[BBox], level: (usize, usize), stride: f64) -> FocalMask {
    assert!(stride > 0.0, "stride must be positive");
    let (h, w) = level;
    let mut largest = vec![0usize; h * w];
    for b in boxes {
        let Some([r0, r1, c0, c1]) = box_cells(b, level, stride) else {
            continue;
        };
        let area = (r1 - r0) * (c1 - c0);
        for i in r0..r1 {
            for j in c0..c1 {
                let cell = &mut largest[i * w + j];
                *cell = (*cell).max(area);
            }
        }
    }
    let data = largest
        .into_iter()
        .map(|a| if a == 0 { 0.0 } else { 1.0 / a as f64 })
        .collect();
    FocalMask {
        grid: Tensor::from_parts(vec![h, w], data),
        stride,
    }
}

/// `α · Σ M · A^S · A^C · (teacher − student)²` with teacher attention held fixed.
pub fn target_loss(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    mask: &FocalMask,
    alpha: f64,
) -> Result<Var> {
    same_shape(tape, teacher, student)?;
    let (c, h, w) = tape.value(teacher).chw()?;
    if mask.grid.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} for level {h}×{w}",
            mask.grid.shape()
        )));
    }
    let sa = spatial_map(tape.value(teacher))?;
    let ca = channel_map(tape.value(teacher))?;
    let hw = h * w;
    let mut weight = Vec::with_capacity(c * hw);
    for k in 0..c {
        let ak = ca.weights.data()[k];
        for p in 0..hw {
            weight.push(mask.grid.data()[p] * sa.map.data()[p] * ak);
        }
    }
    let weight = tape.constant(Tensor::from_parts(vec![c, h, w], weight));
    let d = tape.sub(teacher, student)?;
    let sq = tape.square(d);
    let weighted = tape.mul(sq, weight)?;
    let s = tape.sum_all(weighted);
    Ok(tape.scale(s, alpha))
}

/// `γ · (Σ|A^S_teacher − A^S_student| + Σ|A^C_teacher − A^C_student|)`.
/// Only the student's attention carries gradient.
pub fn attention_loss(tape: &mut Tape, teacher: Var, student: Var, gamma: f64) -> Result<Var> {
    same_shape(tape, teacher, student)?;
    let ts = spatial_map(tape.value(teacher))?.map;
    let tc = channel_map(tape.value(teacher))?.weights;
    let ts = tape.constant(ts);
    let tc = tape.constant(tc);
    let ss = spatial_attention(tape, student)?;
    let sc = channel_attention(tape, student)?;
    let ds = tape.sub(ts, ss)?;
    let ds = tape.abs(ds);
    let ds = tape.sum_all(ds);
    let dc = tape.sub(tc, sc)?;
    let dc = tape.abs(dc);
    let dc = tape.sum_all(dc);
    let l1 = tape.add(ds, dc)?;
    Ok(tape.scale(l1, gamma))
}

/// Loss weights for one MEA instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeaWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl MeaWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            gamma: 0.0,
            lambda: 0.0,
        }
    }
}

/// Balancing weights for both MEA instances. Index 1 of α/γ pairs with RGB,
/// index 2 with TIR; λ₁ pairs with TIR and λ₂ with RGB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeaConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub reduction: usize,
}

impl Default for MeaConfig {
    fn default() -> Self {
        Self::two_stage()
    }
}

impl MeaConfig {
    /// Weights used with a two-stage (region proposal) detector.
    pub fn two_stage() -> Self {
        Self {
            alpha1: 5e-5,
            alpha2: 5e-5,
            gamma1: 5e-5,
            gamma2: 5e-5,
            lambda1: 5e-7,
            lambda2: 5e-7,
            reduction: DEFAULT_REDUCTION,
        }
    }

    /// Weights used with a one-stage dense detector.
    pub fn one_stage() -> Self {
        Self {
            alpha1: 1e-3,
            alpha2: 1e-3,
            gamma1: 1e-3,
            gamma2: 1e-3,
            lambda1: 5e-6,
            lambda2: 5e-6,
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn rgb(&self) -> MeaWeights {
        MeaWeights {
            alpha: self.alpha1,
            gamma: self.gamma1,
            lambda: self.lambda2,
        }
    }

    pub fn tir(&self) -> MeaWeights {
        MeaWeights {
            alpha: self.alpha2,
            gamma: self.gamma2,
            lambda: self.lambda1,
        }
    }

    /// Every weight multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha1: self.alpha1 * k,
            alpha2: self.alpha2 * k,
            gamma1: self.gamma1 * k,
            gamma2: self.gamma2 * k,
            lambda1: self.lambda1 * k,
            lambda2: self.lambda2 * k,
            reduction: self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.alpha1,
            self.alpha2,
            self.gamma1,
            self.gamma2,
            self.lambda1,
            self.lambda2,
        ];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadSpec("MEA weights must be finite and ≥ 0".into()));
        }
        if self.reduction == 0 {
            return Err(Error::BadSpec("GC reduction ratio must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Tape handles for one MEA instance, summed over pyramid levels.
#[derive(Debug, Clone, Copy)]
pub struct MeaTerms {
    pub global: Var,
    pub target: Var,
    pub att: Var,
    pub focal: Var,
    pub total: Var,
}

/// Scalar values of one MEA instance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeaValues {
    pub global: f64,
    pub target: f64,
    pub att: f64,
    pub focal: f64,
    pub total: f64,
}

impl MeaTerms {
    pub fn values(&self, tape: &Tape) -> MeaValues {
        MeaValues {
            global: tape.value(self.global).item(),
            target: tape.value(self.target).item(),
            att: tape.value(self.att).item(),
            focal: tape.value(self.focal).item(),
            total: tape.value(self.total).item(),
        }
    }
}

fn check_pyramids(tape: &Tape, teacher: &[Var], student: &[Var], strides: &[f64]) -> Result<()> {
    if teacher.is_empty() || teacher.len() != student.len() || teacher.len() != strides.len() {
        return Err(Error::PyramidMismatch(format!(
            "{} teacher levels, {} student levels, {} strides",
            teacher.len(),
            student.len(),
            strides.len()
        )));
    }
    for (l, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        if tape.shape(t) != tape.shape(s) {
            return Err(Error::PyramidMismatch(format!(
                "level {l}: teacher {:?} vs student {:?}",
                tape.shape(t),
                tape.shape(s)
            )));
        }
    }
    Ok(())
}

/// Global + target + attention losses over every level of a pyramid.
///
/// Components are summed across levels first; `focal = target + att` and
/// `total = global + focal` are then formed from those sums.
pub fn mea_loss(
    tape: &mut Tape,
    teacher: &[Var],
    student: &[Var],
    strides: &[f64],
    boxes: &[BBox],
    p: &GcVars,
    w: MeaWeights,
) -> Result<MeaTerms> {
    check_pyramids(tape, teacher, student, strides)?;
    let mut global = Vec::new();
    let mut target = Vec::new();
    let mut att = Vec::new();
    for ((&t, &s), &stride) in teacher.iter().zip(student).zip(strides) {
        let (_, h, wd) = tape.value(t).chw()?;
        let mask = build_mask(boxes, (h, wd), stride);
        global.push(global_loss(tape, t, s, p, w.lambda)?);
        target.push(target_loss(tape, t, s, &mask, w.alpha)?);
        att.push(attention_loss(tape, t, s, w.gamma)?);
    }
    let global = sum_vars(tape, &global)?;
    let target = sum_vars(tape, &target)?;
    let att = sum_vars(tape, &att)?;
    let focal = tape.add(target, att)?;
    let total = tape.add(global, focal)?;
    Ok(MeaTerms {
        global,
        target,
        att,
        focal,
        total,
    })
}

/// Scaled sum of several MEA instances (for example one per batch image),
/// with `focal` and `total` re-formed from the combined components.
pub fn combine_terms(tape: &mut Tape, parts: &[MeaTerms], scale: f64) -> Result<MeaTerms> {
    let mut pick = |f: fn(&MeaTerms) -> Var| -> Result<Var> {
        let vars: Vec<Var> = parts.iter().map(f).collect();
        let s = sum_vars(tape, &vars)?;
        Ok(tape.scale(s, scale))
    };
    let global = pick(|t| t.global)?;
    let target = pick(|t| t.target)?;
    let att = pick(|t| t.att)?;
    let focal = tape.add(target, att)?;
    let total = tape.add(global, focal)?;
    Ok(MeaTerms {
        global,
        target,
        att,
        focal,
        total,
    })
}

pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or(Error::EmptyInput("sum_vars"))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// Every named loss term of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global_rgb: f64,
    pub global_tir: f64,
    pub target_rgb: f64,
    pub target_tir: f64,
    pub att_rgb: f64,
    pub att_tir: f64,
    pub focal_rgb: f64,
    pub focal_tir: f64,
    pub mea_rgb: f64,
    pub mea_tir: f64,
    pub mea_total: f64,
    pub original: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 13] = [
        "global_rgb",
        "global_tir",
        "target_rgb",
        "target_tir",
        "att_rgb",
        "att_tir",
        "focal_rgb",
        "focal_tir",
        "mea_rgb",
        "mea_tir",
        "mea_total",
        "original",
        "total",
    ];

    /// Values in [`Self::FIELDS`] order.
    pub fn values(&self) -> [f64; 13] {
        [
            self.global_rgb,
            self.global_tir,
            self.target_rgb,
            self.target_tir,
            self.att_rgb,
            self.att_tir,
            self.focal_rgb,
            self.focal_tir,
            self.mea_rgb,
            self.mea_tir,
            self.mea_total,
            self.original,
            self.total,
        ]
    }

    pub fn from_halves(rgb: MeaValues, tir: MeaValues, mea_total: f64) -> Self {
        Self {
            global_rgb: rgb.global,
            global_tir: tir.global,
            target_rgb: rgb.target,
            target_tir: tir.target,
            att_rgb: rgb.att,
            att_tir: tir.att,
            focal_rgb: rgb.focal,
            focal_tir: tir.focal,
            mea_rgb: rgb.total,
            mea_tir: tir.total,
            mea_total,
            original: 0.0,
            total: mea_total,
        }
    }

    /// Checks the decomposition identities exactly (bitwise float equality).
    pub fn identity_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |name: &str, lhs: f64, rhs: f64| {
            if lhs != rhs {
                bad.push(format!("{name}: {lhs} != {rhs}"));
            }
        };
        check("focal_rgb", self.focal_rgb, self.target_rgb + self.att_rgb);
        check("focal_tir", self.focal_tir, self.target_tir + self.att_tir);
        check("mea_rgb", self.mea_rgb, self.global_rgb + self.focal_rgb);
        check("mea_tir", self.mea_tir, self.global_tir + self.focal_tir);
        check("mea_total", self.mea_total, self.mea_rgb + self.mea_tir);
        check("total", self.total, self.original + self.mea_total);
        if self.values().iter().any(|v| !(*v >= 0.0)) {
            bad.push("negative or non-finite component".into());
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Straight-line GC weight with explicit softmax and matrix products.
    fn gc_weight_oracle(x: &Tensor, p: &GcParams) -> Vec<f64> {
        let (c, h, w) = x.chw().unwrap();
        let n = h * w;
        let score: Vec<f64> = (0..n)
            .map(|j| {
                p.conv1_b.data()[0]
                    + (0..c)
                        .map(|k| p.conv1_w.data()[k] * x.data()[k * n + j])
                        .sum::<f64>()
            })
            .collect();
        let m = score.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = score.iter().map(|s| (s - m).exp()).sum();
        let ctx: Vec<f64> = (0..c)
            .map(|k| {
                (0..n)
                    .map(|j| (score[j] - m).exp() / denom * x.data()[k * n + j])
                    .sum()
            })
            .collect();
        let mid = p.conv2_b.len();
        let hid: Vec<f64> = (0..mid)
            .map(|o| {
                p.conv2_b.data()[o]
                    + (0..c)
                        .map(|k| p.conv2_w.data()[o * c + k] * ctx[k])
                        .sum::<f64>()
            })
            .collect();
        let mean = hid.iter().sum::<f64>() / mid as f64;
        let var = hid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mid as f64;
        let lr: Vec<f64> = hid
            .iter()
            .map(|v| ((v - mean) / (var + 1e-5).sqrt()).max(0.0))
            .collect();
        (0..c)
            .map(|o| {
                p.conv3_b.data()[o]
                    + (0..mid)
                        .map(|k| p.conv3_w.data()[o * mid + k] * lr[k])
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn gc_weight_zero_conv3_gives_bias() {
        let mut r = rng(1);
        let mut p = GcParams::random(4, 2, 0.5, &mut r);
        p.conv3_w = Tensor::zeros(p.conv3_w.shape());
        let x0 = Tensor::normal(&[4, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(x0.clone());
        let w = gc_weight(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.value(w).data(), p.conv3_b.data());
        // with the training initialization both are zero and G(x) = x
        let p = GcParams::init(4, 2, &mut r);
        let vars = p.bind(&mut tape);
        let g = gc_apply(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.value(g), &x0);
    }

    #[test]
    fn gc_weight_single_pixel_uses_slice() {
        let mut r = rng(2);
        let p = GcParams::random(4, 2, 0.5, &mut r);
        let x0 = Tensor::normal(&[4, 1, 1], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(x0.clone());
        let w = gc_weight(&mut tape, x, &vars).unwrap();
        let expected = gc_weight_oracle(&x0, &p);
        for (a, b) in tape.value(w).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gc_weight_matches_oracle() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let p = GcParams::random(4, 2, 0.8, &mut r);
            let x0 = Tensor::normal(&[4, 2, 2], 1.0, &mut r);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let x = tape.constant(x0.clone());
            let w = gc_weight(&mut tape, x, &vars).unwrap();
            assert_eq!(tape.shape(w), &[4, 1, 1]);
            for (a, b) in tape.value(w).data().iter().zip(gc_weight_oracle(&x0, &p)) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gc_apply_is_broadcast_of_weight() {
        let mut r = rng(3);
        let p = GcParams::random(3, 1, 0.5, &mut r);
        let x0 = Tensor::normal(&[3, 4, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(x0.clone());
        let g = gc_apply(&mut tape, x, &vars).unwrap();
        let w = gc_weight(&mut tape, x, &vars).unwrap();
        let composed = tape.broadcast_add(x, w).unwrap();
        assert_eq!(tape.value(g), tape.value(composed));
        // constant offset per channel
        let d: Vec<f64> = tape
            .value(g)
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| a - b)
            .collect();
        for k in 0..3 {
            let plane = &d[k * 8..(k + 1) * 8];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn gc_shape_mismatch() {
        let mut r = rng(4);
        let p = GcParams::random(3, 1, 0.5, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4, 2, 2]));
        assert!(matches!(
            gc_weight(&mut tape, x, &vars),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn global_loss_zero_cases() {
        let mut r = rng(5);
        let p = GcParams::random(2, 1, 0.5, &mut r);
        let a = Tensor::normal(&[2, 3, 3], 1.0, &mut r);
        let b = Tensor::normal(&[2, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let ta = tape.constant(a.clone());
        let sa = tape.param(a);
        let l = global_loss(&mut tape, ta, sa, &vars, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let tb = tape.param(b);
        let l = global_loss(&mut tape, ta, tb, &vars, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = global_loss(&mut tape, ta, tb, &vars, 1.0).unwrap();
        assert!(tape.value(l).item() > 0.0);
    }

    #[test]
    fn paper_defaults() {
        let c = MeaConfig::two_stage();
        assert_eq!((c.lambda1, c.lambda2), (5e-7, 5e-7));
        assert_eq!((c.alpha1, c.alpha2), (5e-5, 5e-5));
        assert_eq!((c.gamma1, c.gamma2), (5e-5, 5e-5));
        let o = MeaConfig::one_stage();
        assert_eq!((o.alpha1, o.gamma1, o.lambda1), (1e-3, 1e-3, 5e-6));
        assert_eq!(c.reduction, 4);
    }

    #[test]
    fn weight_slices_follow_equation_order() {
        let c = MeaConfig {
            alpha1: 1.0,
            alpha2: 2.0,
            gamma1: 3.0,
            gamma2: 4.0,
            lambda1: 5.0,
            lambda2: 6.0,
            reduction: 4,
        };
        assert_eq!(
            c.rgb(),
            MeaWeights {
                alpha: 1.0,
                gamma: 3.0,
                lambda: 6.0
            }
        );
        assert_eq!(
            c.tir(),
            MeaWeights {
                alpha: 2.0,
                gamma: 4.0,
                lambda: 5.0
            }
        );
        assert!(MeaConfig { alpha1: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn mask_single_box() {
        // 2 rows × 3 cols at stride 4
        let m = build_mask(&[bx(4.0, 8.0, 16.0, 16.0)], (6, 6), 4.0);
        let nz: Vec<f64> = m.grid.data().iter().copied().filter(|v| *v > 0.0).collect();
        assert_eq!(nz.len(), 6);
        assert!(nz.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!((m.grid.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mask_empty_and_outside() {
        assert_eq!(build_mask(&[], (4, 4), 2.0).grid, Tensor::zeros(&[4, 4]));
        let m = build_mask(&[bx(100.0, 100.0, 120.0, 130.0)], (4, 4), 2.0);
        assert_eq!(m.grid.sum(), 0.0);
    }

    #[test]
    fn mask_rounds_outward_and_clips() {
        // x 3.5..8.5 → cols 1..3 at stride 3; y −5..2 → row 0 after clipping
        let m = build_mask(&[bx(3.5, -5.0, 8.5, 2.0)], (4, 4), 3.0);
        let covered: Vec<usize> = (0..16).filter(|&i| m.grid.data()[i] > 0.0).collect();
        assert_eq!(covered, vec![1, 2]);
        assert!((m.grid.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_overlap_takes_largest_box() {
        // cell areas 6 (2×3) and 12 (3×4), overlapping in a corner
        let small = bx(0.0, 0.0, 3.0, 2.0);
        let large = bx(2.0, 1.0, 6.0, 4.0);
        let m = build_mask(&[small, large], (8, 8), 1.0);
        assert!((m.grid.get(&[1, 2]) - 1.0 / 12.0).abs() < 1e-15);
        assert!((m.grid.get(&[0, 0]) - 1.0 / 6.0).abs() < 1e-15);
        assert!((m.grid.get(&[3, 5]) - 1.0 / 12.0).abs() < 1e-15);
        // order of boxes is irrelevant
        assert_eq!(build_mask(&[large, small], (8, 8), 1.0), m);
    }

    #[test]
    fn target_and_attention_zero_cases() {
        let mut r = rng(6);
        let t0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let s0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let mask = build_mask(&[bx(0.0, 0.0, 8.0, 8.0)], (4, 4), 4.0);
        let empty = build_mask(&[], (4, 4), 4.0);
        let mut tape = Tape::new();
        let t = tape.constant(t0.clone());
        let same = tape.param(t0);
        let s = tape.param(s0);
        let z = target_loss(&mut tape, t, same, &mask, 1.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let z = target_loss(&mut tape, t, s, &empty, 1.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let nz = target_loss(&mut tape, t, s, &mask, 1.0).unwrap();
        assert!(tape.value(nz).item() > 0.0);
        let z = attention_loss(&mut tape, t, same, 1.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let z = attention_loss(&mut tape, t, s, 0.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let bad = build_mask(&[], (3, 4), 4.0);
        assert!(target_loss(&mut tape, t, s, &bad, 1.0).is_err());
    }

    #[test]
    fn target_loss_closed_form_single_cell() {
        // C = 1, H = W = 1: all attention weights are 1 and M = 1
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(&[1, 1, 1], vec![3.0]).unwrap());
        let s = tape.param(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let mask = build_mask(&[bx(0.0, 0.0, 1.0, 1.0)], (1, 1), 1.0);
        let l = target_loss(&mut tape, t, s, &mask, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn teacher_never_receives_gradient() {
        let mut r = rng(7);
        let p = GcParams::random(2, 1, 0.5, &mut r);
        let t0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let s0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let t = tape.constant(t0);
        let s = tape.param(s0);
        let terms = mea_loss(
            &mut tape,
            &[t],
            &[s],
            &[4.0],
            &[bx(0.0, 0.0, 8.0, 12.0)],
            &vars,
            MeaWeights {
                alpha: 1.0,
                gamma: 1.0,
                lambda: 1.0,
            },
        )
        .unwrap();
        let g = tape.backward(terms.total).unwrap();
        assert!(g.get(t).is_none());
        assert!(g.get(s).is_some());
    }

    #[test]
    fn mea_single_level_is_sum_of_components() {
        let mut r = rng(8);
        let p = GcParams::random(2, 1, 0.5, &mut r);
        let t0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let s0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let boxes = [bx(2.0, 2.0, 9.0, 14.0)];
        let w = MeaWeights {
            alpha: 0.3,
            gamma: 0.2,
            lambda: 0.1,
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let t = tape.constant(t0);
        let s = tape.param(s0);
        let terms = mea_loss(&mut tape, &[t], &[s], &[4.0], &boxes, &vars, w).unwrap();
        let v = terms.values(&tape);
        let mask = build_mask(&boxes, (4, 4), 4.0);
        let g = global_loss(&mut tape, t, s, &vars, w.lambda).unwrap();
        let tl = target_loss(&mut tape, t, s, &mask, w.alpha).unwrap();
        let a = attention_loss(&mut tape, t, s, w.gamma).unwrap();
        assert_eq!(v.global, tape.value(g).item());
        assert_eq!(v.target, tape.value(tl).item());
        assert_eq!(v.att, tape.value(a).item());
        assert_eq!(v.focal, v.target + v.att);
        assert_eq!(v.total, v.global + v.focal);
    }

    #[test]
    fn mea_two_levels_additive() {
        let mut r = rng(9);
        let p = GcParams::random(2, 1, 0.5, &mut r);
        let t0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let s0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let t1 = Tensor::normal(&[2, 2, 2], 1.0, &mut r);
        let s1 = Tensor::normal(&[2, 2, 2], 1.0, &mut r);
        let boxes = [bx(1.0, 1.0, 7.0, 15.0), bx(4.0, 0.0, 16.0, 9.0)];
        let w = MeaWeights {
            alpha: 1.0,
            gamma: 0.5,
            lambda: 0.25,
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let [t0, s0, t1, s1] = [t0, s0, t1, s1].map(|x| tape.constant(x));
        let both = mea_loss(
            &mut tape,
            &[t0, t1],
            &[s0, s1],
            &[4.0, 8.0],
            &boxes,
            &vars,
            w,
        )
        .unwrap();
        let a = mea_loss(&mut tape, &[t0], &[s0], &[4.0], &boxes, &vars, w).unwrap();
        let b = mea_loss(&mut tape, &[t1], &[s1], &[8.0], &boxes, &vars, w).unwrap();
        let (vb, va, vbb) = (both.values(&tape), a.values(&tape), b.values(&tape));
        assert!((vb.total - (va.total + vbb.total)).abs() < 1e-12 * vb.total.max(1.0));
        assert_eq!(vb.global, va.global + vbb.global);
    }

    #[test]
    fn mea_pyramid_mismatch() {
        let mut tape = Tape::new();
        let p = GcParams::init(2, 1, &mut rng(0)).bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let w = MeaWeights::zero();
        assert!(matches!(
            mea_loss(&mut tape, &[a], &[b], &[4.0], &[], &p, w),
            Err(Error::PyramidMismatch(_))
        ));
        assert!(matches!(
            mea_loss(&mut tape, &[a, a], &[a], &[4.0, 8.0], &[], &p, w),
            Err(Error::PyramidMismatch(_))
        ));
    }

    #[test]
    fn mea_gradients_match_finite_differences() {
        let mut r = rng(10);
        let p = GcParams::random(2, 1, 0.7, &mut r);
        let t0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let s0 = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let boxes = [bx(0.0, 0.0, 9.0, 6.0), bx(5.0, 3.0, 16.0, 16.0)];
        let w = MeaWeights {
            alpha: 1.0,
            gamma: 1.0,
            lambda: 1.0,
        };
        let eval = |s: &Tensor, p: &GcParams| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let t = tape.constant(t0.clone());
            let s = tape.constant(s.clone());
            let m = mea_loss(&mut tape, &[t], &[s], &[4.0], &boxes, &vars, w).unwrap();
            tape.value(m.total).item()
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let t = tape.constant(t0.clone());
        let s = tape.param(s0.clone());
        let m = mea_loss(&mut tape, &[t], &[s], &[4.0], &boxes, &vars, w).unwrap();
        let g = tape.backward(m.total).unwrap();
        assert!(gradient_error(|x| eval(x, &p), &s0, &g.wrt(s), 1e-5) < 1e-4);
        for (i, var) in vars.vars().into_iter().enumerate() {
            let e = gradient_error(
                |x| {
                    let mut q = p.clone();
                    *q.tensors_mut()[i] = x.clone();
                    eval(&s0, &q)
                },
                p.tensors()[i],
                &g.wrt(var),
                1e-5,
            );
            assert!(e < 1e-4, "{}: {e}", GC_PARAM_NAMES[i]);
        }
    }

    #[test]
    fn breakdown_identity_check() {
        let rgb = MeaValues {
            global: 0.1,
            target: 0.2,
            att: 0.3,
            focal: 0.2 + 0.3,
            total: 0.1 + (0.2 + 0.3),
        };
        let tir = MeaValues::default();
        let b = LossBreakdown::from_halves(rgb, tir, rgb.total + tir.total);
        assert!(b.identity_violations().is_empty());
        let broken = LossBreakdown { total: 1.0, ..b };
        assert_eq!(broken.identity_violations().len(), 1);
    }
}
