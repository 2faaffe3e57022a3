//! Distillation wiring: the fusion architecture (student fused feature against
//! both teacher modal features), the traditional baseline (against the teacher's
//! fused feature), the total objective, and the student's image-level fusion
//! front end.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::mea::{combine_terms, mea_loss, GcParams, GcVars, LossBreakdown, MeaConfig, MeaTerms};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// Two MEA losses, one per teacher modality.
    #[serde(rename = "amfd")]
    Fusion,
    /// One MEA loss against the teacher's fused feature.
    Traditional,
    None,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Fusion => "amfd",
            DistillMode::Traditional => "traditional",
            DistillMode::None => "none",
        }
    }

    /// Number of global-context blocks the mode owns.
    pub fn gc_count(self) -> usize {
        match self {
            DistillMode::Fusion => 2,
            DistillMode::Traditional => 1,
            DistillMode::None => 0,
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "amfd" | "fusion" => Ok(DistillMode::Fusion),
            "traditional" => Ok(DistillMode::Traditional),
            "none" => Ok(DistillMode::None),
            other => Err(format!(
                "unknown plan {other:?} (expected amfd, traditional or none)"
            )),
        }
    }
}

/// Distillation mode with its loss weights and trainable context blocks.
///
/// In fusion mode `gc[0]` is the TIR block and `gc[1]` the RGB block.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    pub mode: DistillMode,
    pub config: MeaConfig,
    pub gc: Vec<GcParams>,
}

pub const TIR_GC: usize = 0;
pub const RGB_GC: usize = 1;

impl DistillPlan {
    pub fn new(mode: DistillMode, config: MeaConfig, channels: usize, rng: &mut impl Rng) -> Self {
        let gc = (0..mode.gc_count())
            .map(|_| GcParams::init(channels, config.reduction, rng))
            .collect();
        Self { mode, config, gc }
    }

    pub fn with_params(mode: DistillMode, config: MeaConfig, gc: Vec<GcParams>) -> Result<Self> {
        if gc.len() != mode.gc_count() {
            return Err(Error::BadSpec(format!(
                "{mode} plan needs {} context blocks, got {}",
                mode.gc_count(),
                gc.len()
            )));
        }
        config.validate()?;
        Ok(Self { mode, config, gc })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<GcVars> {
        self.gc.iter().map(|p| p.bind(tape)).collect()
    }

    fn expect(&self, mode: DistillMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::WrongMode {
                expected: mode.name(),
                actual: self.mode.name(),
            });
        }
        Ok(())
    }
}

/// Tape handles of the distillation part of one objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistillTerms {
    pub rgb: Option<MeaTerms>,
    pub tir: Option<MeaTerms>,
    pub mea_total: Option<Var>,
}

impl DistillTerms {
    /// Breakdown with `original = 0`; see [`total_loss`].
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let rgb = self.rgb.map(|t| t.values(tape)).unwrap_or_default();
        let tir = self.tir.map(|t| t.values(tape)).unwrap_or_default();
        let mea_total = self.mea_total.map(|v| tape.value(v).item()).unwrap_or(0.0);
        LossBreakdown::from_halves(rgb, tir, mea_total)
    }
}

impl DistillTerms {
    /// Scaled sum over several images; each half is combined separately and
    /// `mea_total` re-formed from the combined halves.
    pub fn combine(tape: &mut Tape, parts: &[DistillTerms], scale: f64) -> Result<DistillTerms> {
        let half = |tape: &mut Tape, f: fn(&DistillTerms) -> Option<MeaTerms>| {
            let terms: Option<Vec<MeaTerms>> = parts.iter().map(f).collect();
            match terms {
                Some(t) if !t.is_empty() => combine_terms(tape, &t, scale).map(Some),
                _ => Ok(None),
            }
        };
        let rgb = half(tape, |d| d.rgb)?;
        let tir = half(tape, |d| d.tir)?;
        let mea_total = match (rgb, tir) {
            (Some(r), Some(t)) => Some(tape.add(r.total, t.total)?),
            (Some(r), None) => Some(r.total),
            (None, Some(t)) => Some(t.total),
            (None, None) => None,
        };
        Ok(DistillTerms {
            rgb,
            tir,
            mea_total,
        })
    }
}

/// Both MEA losses: RGB teacher with the RGB block and weights, then TIR.
#[allow(clippy::too_many_arguments)]
pub fn fusion_distill_loss(
    tape: &mut Tape,
    rgb: &[Var],
    tir: &[Var],
    student: &[Var],
    strides: &[f64],
    boxes: &[BBox],
    plan: &DistillPlan,
    gc: &[GcVars],
) -> Result<DistillTerms> {
    plan.expect(DistillMode::Fusion)?;
    let (rgb_gc, tir_gc) = match gc {
        [t, r] => (r, t),
        _ => return Err(Error::BadSpec("fusion plan needs two bound blocks".into())),
    };
    let r = mea_loss(
        tape,
        rgb,
        student,
        strides,
        boxes,
        rgb_gc,
        plan.config.rgb(),
    )?;
    let t = mea_loss(
        tape,
        tir,
        student,
        strides,
        boxes,
        tir_gc,
        plan.config.tir(),
    )?;
    let total = tape.add(r.total, t.total)?;
    Ok(DistillTerms {
        rgb: Some(r),
        tir: Some(t),
        mea_total: Some(total),
    })
}

/// Single MEA loss against the teacher's fused feature, using the RGB weight
/// slice. The result is reported in the RGB half of the breakdown.
pub fn traditional_distill_loss(
    tape: &mut Tape,
    teacher_fused: &[Var],
    student: &[Var],
    strides: &[f64],
    boxes: &[BBox],
    plan: &DistillPlan,
    gc: &[GcVars],
) -> Result<DistillTerms> {
    plan.expect(DistillMode::Traditional)?;
    let [p] = gc else {
        return Err(Error::BadSpec(
            "traditional plan needs one bound block".into(),
        ));
    };
    let r = mea_loss(
        tape,
        teacher_fused,
        student,
        strides,
        boxes,
        p,
        plan.config.rgb(),
    )?;
    Ok(DistillTerms {
        rgb: Some(r),
        tir: None,
        mea_total: Some(r.total),
    })
}

/// Teacher pyramids as recorded on a tape.
#[derive(Debug, Clone)]
pub struct TeacherVars {
    pub rgb: Vec<Var>,
    pub tir: Vec<Var>,
    pub fused: Vec<Var>,
}

/// Dispatches on the plan's mode; `None` contributes nothing.
pub fn distill_loss(
    tape: &mut Tape,
    teacher: &TeacherVars,
    student: &[Var],
    strides: &[f64],
    boxes: &[BBox],
    plan: &DistillPlan,
    gc: &[GcVars],
) -> Result<DistillTerms> {
    match plan.mode {
        DistillMode::Fusion => fusion_distill_loss(
            tape,
            &teacher.rgb,
            &teacher.tir,
            student,
            strides,
            boxes,
            plan,
            gc,
        ),
        DistillMode::Traditional => {
            traditional_distill_loss(tape, &teacher.fused, student, strides, boxes, plan, gc)
        }
        DistillMode::None => Ok(DistillTerms::default()),
    }
}

/// Fills `original` and `total = original + mea_total` into the breakdown.
pub fn total_loss(original: f64, breakdown: &mut LossBreakdown) -> Result<f64> {
    if !original.is_finite() || !breakdown.mea_total.is_finite() {
        return Err(Error::NonFiniteValue("total loss".into()));
    }
    breakdown.original = original;
    breakdown.total = original + breakdown.mea_total;
    Ok(breakdown.total)
}

/// Two-layer residual transform `x + W₂·relu(W₁·x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ResidualBlock {
    pub fn init(channels: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            w1: Tensor::uniform(&[channels, channels], scale, rng),
            b1: Tensor::zeros(&[channels]),
            w2: Tensor::uniform(&[channels, channels], scale, rng),
            b2: Tensor::zeros(&[channels]),
        }
    }

    pub fn zero(channels: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[channels, channels]),
            b1: Tensor::zeros(&[channels]),
            w2: Tensor::zeros(&[channels, channels]),
            b2: Tensor::zeros(&[channels]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Student front end: a residual block per modality, channel concatenation,
/// and a projection to the backbone's input width.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFusionParams {
    pub rgb: ResidualBlock,
    pub tir: ResidualBlock,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl ImageFusionParams {
    pub fn init(image_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let cat = 2 * image_channels;
        let bound = (1.0 / cat as f64).sqrt();
        Self {
            rgb: ResidualBlock::init(image_channels, 0.3, rng),
            tir: ResidualBlock::init(image_channels, 0.3, rng),
            proj_w: Tensor::uniform(&[out_channels, cat], bound, rng),
            proj_b: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn image_channels(&self) -> usize {
        self.rgb.b1.len()
    }

    pub fn out_channels(&self) -> usize {
        self.proj_b.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, block) in [("rgb", &self.rgb), ("tir", &self.tir)] {
            for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(block.tensors()) {
                out.push((format!("fuse.{prefix}.{name}"), t));
            }
        }
        out.push(("fuse.proj_w".into(), &self.proj_w));
        out.push(("fuse.proj_b".into(), &self.proj_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.rgb.tensors_mut());
        out.extend(self.tir.tensors_mut());
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ImageFusionVars {
        let block = |tape: &mut Tape, b: &ResidualBlock| b.tensors().map(|t| tape.param(t.clone()));
        ImageFusionVars {
            rgb: block(tape, &self.rgb),
            tir: block(tape, &self.tir),
            proj_w: tape.param(self.proj_w.clone()),
            proj_b: tape.param(self.proj_b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageFusionVars {
    pub rgb: [Var; 4],
    pub tir: [Var; 4],
    pub proj_w: Var,
    pub proj_b: Var,
}

impl ImageFusionVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.rgb.to_vec();
        v.extend(self.tir);
        v.push(self.proj_w);
        v.push(self.proj_b);
        v
    }
}

fn residual(tape: &mut Tape, x: Var, b: &[Var; 4]) -> Result<Var> {
    let h = tape.channel_mix(x, b[0], b[1])?;
    let h = tape.relu(h);
    let h = tape.channel_mix(h, b[2], b[3])?;
    tape.add(x, h)
}

/// Residual per modality, concatenate channels (RGB first), project.
pub fn image_level_fuse(tape: &mut Tape, rgb: Var, tir: Var, p: &ImageFusionVars) -> Result<Var> {
    let (_, h, w) = tape.value(rgb).chw()?;
    let (_, th, tw) = tape.value(tir).chw()?;
    if (h, w) != (th, tw) {
        return Err(Error::ShapeMismatch(format!(
            "rgb {h}×{w} vs tir {th}×{tw}"
        )));
    }
    let r = residual(tape, rgb, &p.rgb)?;
    let t = residual(tape, tir, &p.tir)?;
    let cat = tape.concat_channels(&[r, t])?;
    tape.channel_mix(cat, p.proj_w, p.proj_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mea::MeaValues;
    use crate::tensor::gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_config() -> MeaConfig {
        MeaConfig {
            alpha1: 1.0,
            alpha2: 0.7,
            gamma1: 0.5,
            gamma2: 0.3,
            lambda1: 0.2,
            lambda2: 0.1,
            reduction: 1,
        }
    }

    fn random_plan(mode: DistillMode, seed: u64) -> DistillPlan {
        let mut r = rng(seed);
        let gc = (0..mode.gc_count())
            .map(|_| GcParams::random(2, 1, 0.5, &mut r))
            .collect();
        DistillPlan::with_params(mode, unit_config(), gc).unwrap()
    }

    fn boxes() -> Vec<BBox> {
        vec![
            BBox::new(0.0, 0.0, 6.0, 10.0).unwrap(),
            BBox::new(4.0, 4.0, 15.0, 12.0).unwrap(),
        ]
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("amfd".parse::<DistillMode>().unwrap(), DistillMode::Fusion);
        assert_eq!("none".parse::<DistillMode>().unwrap(), DistillMode::None);
        assert!("both".parse::<DistillMode>().is_err());
    }

    #[test]
    fn plan_block_counts() {
        let mut r = rng(0);
        for mode in [
            DistillMode::Fusion,
            DistillMode::Traditional,
            DistillMode::None,
        ] {
            let plan = DistillPlan::new(mode, MeaConfig::default(), 8, &mut r);
            assert_eq!(plan.gc.len(), mode.gc_count());
        }
        assert!(
            DistillPlan::with_params(DistillMode::Fusion, MeaConfig::default(), vec![]).is_err()
        );
    }

    #[test]
    fn fusion_identity_is_zero() {
        let plan = random_plan(DistillMode::Fusion, 1);
        let x = Tensor::normal(&[2, 4, 4], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let gc = plan.bind(&mut tape);
        let xr = tape.constant(x.clone());
        let xt = tape.constant(x.clone());
        let s = tape.param(x);
        let terms =
            fusion_distill_loss(&mut tape, &[xr], &[xt], &[s], &[4.0], &boxes(), &plan, &gc)
                .unwrap();
        let b = terms.breakdown(&tape);
        assert!(b.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut plan = random_plan(DistillMode::Fusion, 3);
        plan.config = plan.config.scaled(0.0);
        let mut r = rng(4);
        let mut tape = Tape::new();
        let gc = plan.bind(&mut tape);
        let [xr, xt, s] = [0, 1, 2].map(|_| tape.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut r)));
        let terms =
            fusion_distill_loss(&mut tape, &[xr], &[xt], &[s], &[4.0], &boxes(), &plan, &gc)
                .unwrap();
        assert_eq!(terms.breakdown(&tape).mea_total, 0.0);
    }

    #[test]
    fn fusion_equals_independent_halves() {
        let plan = random_plan(DistillMode::Fusion, 5);
        let mut r = rng(6);
        let mut tape = Tape::new();
        let gc = plan.bind(&mut tape);
        let [xr, xt, s] = [0, 1, 2].map(|_| tape.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut r)));
        let terms =
            fusion_distill_loss(&mut tape, &[xr], &[xt], &[s], &[4.0], &boxes(), &plan, &gc)
                .unwrap();
        let b = terms.breakdown(&tape);
        let r_half = mea_loss(
            &mut tape,
            &[xr],
            &[s],
            &[4.0],
            &boxes(),
            &gc[RGB_GC],
            plan.config.rgb(),
        )
        .unwrap()
        .values(&tape);
        let t_half = mea_loss(
            &mut tape,
            &[xt],
            &[s],
            &[4.0],
            &boxes(),
            &gc[TIR_GC],
            plan.config.tir(),
        )
        .unwrap()
        .values(&tape);
        assert_eq!(b.mea_rgb, r_half.total);
        assert_eq!(b.mea_tir, t_half.total);
        assert_eq!(b.mea_total, r_half.total + t_half.total);
        assert!(b.identity_violations().is_empty());
    }

    #[test]
    fn swapping_modalities_with_weights_preserves_total() {
        let plan = random_plan(DistillMode::Fusion, 7);
        let c = plan.config;
        let swapped = DistillPlan::with_params(
            DistillMode::Fusion,
            MeaConfig {
                alpha1: c.alpha2,
                alpha2: c.alpha1,
                gamma1: c.gamma2,
                gamma2: c.gamma1,
                lambda1: c.lambda2,
                lambda2: c.lambda1,
                reduction: c.reduction,
            },
            vec![plan.gc[RGB_GC].clone(), plan.gc[TIR_GC].clone()],
        )
        .unwrap();
        let mut r = rng(8);
        let [a, b, s] = [0, 1, 2].map(|_| Tensor::normal(&[2, 4, 4], 1.0, &mut r));
        let run = |plan: &DistillPlan, rgb: &Tensor, tir: &Tensor| {
            let mut tape = Tape::new();
            let gc = plan.bind(&mut tape);
            let xr = tape.constant(rgb.clone());
            let xt = tape.constant(tir.clone());
            let st = tape.constant(s.clone());
            fusion_distill_loss(&mut tape, &[xr], &[xt], &[st], &[4.0], &boxes(), plan, &gc)
                .unwrap()
                .breakdown(&tape)
                .mea_total
        };
        assert_eq!(run(&plan, &a, &b), run(&swapped, &b, &a));
    }

    #[test]
    fn traditional_matches_rgb_half_under_substitution() {
        let fusion = random_plan(DistillMode::Fusion, 9);
        let trad = DistillPlan::with_params(
            DistillMode::Traditional,
            fusion.config,
            vec![fusion.gc[RGB_GC].clone()],
        )
        .unwrap();
        let mut r = rng(10);
        let [xr0, xt0, s0] = [0, 1, 2].map(|_| Tensor::normal(&[2, 4, 4], 1.0, &mut r));
        let mut tape = Tape::new();
        let gcf = fusion.bind(&mut tape);
        let gct = trad.bind(&mut tape);
        let [xr, xt, s] = [xr0, xt0, s0].map(|t| tape.constant(t));
        let f = fusion_distill_loss(
            &mut tape,
            &[xr],
            &[xt],
            &[s],
            &[4.0],
            &boxes(),
            &fusion,
            &gcf,
        )
        .unwrap()
        .breakdown(&tape);
        let t = traditional_distill_loss(&mut tape, &[xr], &[s], &[4.0], &boxes(), &trad, &gct)
            .unwrap()
            .breakdown(&tape);
        assert_eq!(t.mea_total, f.mea_rgb);
        assert_eq!(t.global_rgb, f.global_rgb);
        assert_eq!(t.mea_tir, 0.0);
        // same features → zero
        let z = traditional_distill_loss(&mut tape, &[s], &[s], &[4.0], &boxes(), &trad, &gct)
            .unwrap()
            .breakdown(&tape);
        assert_eq!(z.mea_total, 0.0);
    }

    #[test]
    fn wrong_mode_is_reported() {
        let plan = random_plan(DistillMode::Traditional, 11);
        let mut tape = Tape::new();
        let gc = plan.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let err =
            fusion_distill_loss(&mut tape, &[x], &[x], &[x], &[4.0], &[], &plan, &gc).unwrap_err();
        assert_eq!(
            err,
            Error::WrongMode {
                expected: "amfd",
                actual: "traditional"
            }
        );
    }

    #[test]
    fn none_mode_is_all_zero() {
        let plan = random_plan(DistillMode::None, 12);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng(1)));
        let teacher = TeacherVars {
            rgb: vec![x],
            tir: vec![x],
            fused: vec![x],
        };
        let y = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let mut b = distill_loss(&mut tape, &teacher, &[y], &[4.0], &boxes(), &plan, &[])
            .unwrap()
            .breakdown(&tape);
        total_loss(0.8, &mut b).unwrap();
        assert_eq!(b.total, 0.8);
        assert_eq!(&b.values()[..11], &[0.0; 11]);
    }

    #[test]
    fn total_loss_examples() {
        let mut b = LossBreakdown::default();
        assert_eq!(total_loss(1.5, &mut b).unwrap(), 1.5);
        let rgb = MeaValues {
            global: 0.25,
            total: 0.25,
            ..Default::default()
        };
        let mut b = LossBreakdown::from_halves(rgb, MeaValues::default(), 0.25);
        assert_eq!(total_loss(0.0, &mut b).unwrap(), 0.25);
        assert_eq!(total_loss(1.5, &mut b).unwrap(), 1.75);
        assert!(total_loss(f64::NAN, &mut b).is_err());
    }

    #[test]
    fn image_fuse_zero_blocks_identity_projection_is_concat() {
        let mut r = rng(13);
        let rgb0 = Tensor::normal(&[2, 3, 5], 1.0, &mut r);
        let tir0 = Tensor::normal(&[2, 3, 5], 1.0, &mut r);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let p = ImageFusionParams {
            rgb: ResidualBlock::zero(2),
            tir: ResidualBlock::zero(2),
            proj_w: Tensor::new(&[4, 4], eye).unwrap(),
            proj_b: Tensor::zeros(&[4]),
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let a = tape.constant(rgb0.clone());
        let b = tape.constant(tir0.clone());
        let out = image_level_fuse(&mut tape, a, b, &vars).unwrap();
        let mut expected = rgb0.into_data();
        expected.extend(tir0.into_data());
        assert_eq!(tape.value(out).data(), expected.as_slice());
        assert_eq!(tape.shape(out), &[4, 3, 5]);
    }

    #[test]
    fn image_fuse_rejects_mismatched_extents() {
        let p = ImageFusionParams::init(1, 2, &mut rng(0));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 5]));
        assert!(image_level_fuse(&mut tape, a, b, &vars).is_err());
    }

    /// Straight-line fusion: per-pixel loops, no tape.
    fn fuse_oracle(rgb: &Tensor, tir: &Tensor, p: &ImageFusionParams) -> Vec<f64> {
        let (c, h, w) = rgb.chw().unwrap();
        let n = h * w;
        let block = |x: &Tensor, b: &ResidualBlock, px: usize| -> Vec<f64> {
            let xi: Vec<f64> = (0..c).map(|k| x.data()[k * n + px]).collect();
            let hid: Vec<f64> = (0..c)
                .map(|o| {
                    (b.b1.data()[o] + (0..c).map(|k| b.w1.data()[o * c + k] * xi[k]).sum::<f64>())
                        .max(0.0)
                })
                .collect();
            (0..c)
                .map(|o| {
                    xi[o]
                        + b.b2.data()[o]
                        + (0..c).map(|k| b.w2.data()[o * c + k] * hid[k]).sum::<f64>()
                })
                .collect()
        };
        let out_c = p.out_channels();
        let mut out = vec![0.0; out_c * n];
        for px in 0..n {
            let mut cat = block(rgb, &p.rgb, px);
            cat.extend(block(tir, &p.tir, px));
            for o in 0..out_c {
                out[o * n + px] = p.proj_b.data()[o]
                    + (0..2 * c)
                        .map(|k| p.proj_w.data()[o * 2 * c + k] * cat[k])
                        .sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn image_fuse_matches_oracle() {
        let mut r = rng(14);
        let mut p = ImageFusionParams::init(1, 3, &mut r);
        for t in p.tensors_mut() {
            *t = Tensor::normal(t.shape(), 0.8, &mut r);
        }
        let rgb = Tensor::normal(&[1, 4, 4], 1.0, &mut r);
        let tir = Tensor::normal(&[1, 4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let a = tape.constant(rgb.clone());
        let b = tape.constant(tir.clone());
        let out = image_level_fuse(&mut tape, a, b, &vars).unwrap();
        for (x, y) in tape
            .value(out)
            .data()
            .iter()
            .zip(fuse_oracle(&rgb, &tir, &p))
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_fuse_gradient() {
        let mut r = rng(15);
        let mut p = ImageFusionParams::init(2, 3, &mut r);
        for t in p.tensors_mut() {
            *t = Tensor::normal(t.shape(), 0.8, &mut r);
        }
        let rgb = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let tir = Tensor::normal(&[2, 4, 4], 1.0, &mut r);
        let probe = Tensor::normal(&[3, 4, 4], 1.0, &mut r);
        let build = |tape: &mut Tape, p: &ImageFusionParams, rgb: &Tensor, track: bool| {
            let vars = p.bind(tape);
            let a = tape.leaf(rgb.clone(), track);
            let b = tape.constant(tir.clone());
            let out = image_level_fuse(tape, a, b, &vars).unwrap();
            let pr = tape.constant(probe.clone());
            let m = tape.mul(out, pr).unwrap();
            (tape.sum_all(m), a, vars)
        };
        let value = |p: &ImageFusionParams, rgb: &Tensor| {
            let mut tape = Tape::new();
            let (s, _, _) = build(&mut tape, p, rgb, false);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let (s, a, vars) = build(&mut tape, &p, &rgb, true);
        let g = tape.backward(s).unwrap();
        let e = gradient_error(|x| value(&p, x), &rgb, &g.wrt(a), 1e-5);
        assert!(e < 1e-4, "input grad {e}");
        let originals: Vec<Tensor> = p.tensors_mut().into_iter().map(|t| t.clone()).collect();
        for (i, var) in vars.vars().into_iter().enumerate() {
            let e = gradient_error(
                |x| {
                    let mut q = p.clone();
                    *q.tensors_mut()[i] = x.clone();
                    value(&q, &rgb)
                },
                &originals[i],
                &g.wrt(var),
                1e-5,
            );
            assert!(e < 1e-4, "param {i}: {e}");
        }
    }
}
