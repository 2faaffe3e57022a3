use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::detect::{decode, detection_loss, nms, NMS_IOU};
use super::scene::{
    derive_seed, generate_split, DatasetSpec, Lighting, Scene, TEST_STREAM, TRAIN_STREAM,
};
use super::student::{StudentModel, StudentSpec};
use super::teacher::{Teacher, TeacherFeatures};
use crate::error::{Error, Result};
use crate::fusion::{distill_loss, DistillMode, DistillPlan, DistillTerms, TeacherVars};
use crate::mea::{GcParams, LossBreakdown, MeaConfig, GC_PARAM_NAMES};
use crate::metrics::{evaluate, log_average_miss_rate, Detection, EvalReport, MR_IOU};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};

const MODEL_STREAM: u64 = 10;
const GC_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub plan: DistillMode,
    pub mea: MeaConfig,
    /// Evaluate on the test split every this many steps; 0 disables.
    pub eval_every: u64,
    pub student: StudentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            plan: DistillMode::Fusion,
            mea: MeaConfig::default(),
            eval_every: 0,
            student: StudentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::BadSpec("batch_size must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::BadSpec(format!("{name} must be finite and ≥ 0")));
            }
        }
        if self.student.fuse_channels == 0 || self.student.width == 0 {
            return Err(Error::BadSpec("student widths must be positive".into()));
        }
        self.mea.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Generated train/test scenes plus cached teacher features for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        check_extents(spec)?;
        Ok(Self {
            spec: spec.clone(),
            train: generate_split(spec, TRAIN_STREAM, spec.train_scenes)?,
            test: generate_split(spec, TEST_STREAM, spec.test_scenes)?,
        })
    }

    /// Scenes loaded from elsewhere; every image must match the spec's extents.
    pub fn from_parts(spec: DatasetSpec, train: Vec<Scene>, test: Vec<Scene>) -> Result<Self> {
        check_extents(&spec)?;
        let want = [spec.image_channels, spec.height, spec.width];
        for s in train.iter().chain(&test) {
            if s.rgb.shape() != want || s.tir.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "scene {} has images {:?}/{:?}, spec wants {want:?}",
                    s.seed,
                    s.rgb.shape(),
                    s.tir.shape()
                )));
            }
        }
        Ok(Self { spec, train, test })
    }
}

fn check_extents(spec: &DatasetSpec) -> Result<()> {
    spec.validate()?;
    if spec.width % 8 != 0 || spec.height % 8 != 0 {
        return Err(Error::BadSpec(
            "image extents must be multiples of 8".into(),
        ));
    }
    Ok(())
}

pub fn teacher_pyramids(teacher: &Teacher, scenes: &[Scene]) -> Result<Vec<TeacherFeatures>> {
    scenes.iter().map(|s| teacher.features(s)).collect()
}

/// Training state: student, distillation plan and optimizer.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    scenes: &'a [Scene],
    teacher: &'a [TeacherFeatures],
    pub model: StudentModel,
    pub plan: DistillPlan,
    opt: AdamW,
}

/// Graph of one objective evaluation.
struct Objective {
    total: Var,
    breakdown: LossBreakdown,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        scenes: &'a [Scene],
        teacher: &'a [TeacherFeatures],
    ) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() || scenes.len() != teacher.len() {
            return Err(Error::BadSpec(format!(
                "{} training scenes with {} teacher pyramids",
                scenes.len(),
                teacher.len()
            )));
        }
        let image_channels = scenes[0].rgb.shape()[0];
        let channels = teacher[0].rgb[0].shape()[0];
        if channels != cfg.student.width {
            return Err(Error::ShapeMismatch(format!(
                "student width {} vs teacher channels {channels}",
                cfg.student.width
            )));
        }
        let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MODEL_STREAM, 0));
        let model = StudentModel::init(cfg.student.clone(), image_channels, &mut model_rng);
        let mut gc_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, GC_STREAM, 0));
        let plan = DistillPlan::new(cfg.plan, cfg.mea, channels, &mut gc_rng);
        Ok(Self {
            opt: AdamW::new(cfg.optimizer()),
            cfg,
            scenes,
            teacher,
            model,
            plan,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// Scene indices of step `step`: a seeded draw without replacement.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, BATCH_STREAM, step));
        let n = self.scenes.len();
        rand::seq::index::sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec()
    }

    /// Records the batch-mean objective `ℒ_original + ℒ_MEA` on `tape`.
    fn objective(&self, tape: &mut Tape, batch: &[usize]) -> Result<(Objective, Vec<Var>)> {
        let student = self.model.bind(tape);
        let gc = self.plan.bind(tape);
        let strides = self.model.strides();
        let mut originals = Vec::with_capacity(batch.len());
        let mut distill = Vec::with_capacity(batch.len());
        for &i in batch {
            let scene = &self.scenes[i];
            let feats = &self.teacher[i];
            let out = self.model.forward(tape, &student, &scene.rgb, &scene.tir)?;
            let boxes = scene.boxes();
            originals.push(detection_loss(tape, &out.predictions, &boxes, &strides)?);
            if self.plan.mode != DistillMode::None {
                let mut constants =
                    |pyr: &[Tensor]| pyr.iter().map(|t| tape.constant(t.clone())).collect();
                let teacher = TeacherVars {
                    rgb: constants(&feats.rgb),
                    tir: constants(&feats.tir),
                    fused: constants(&feats.fused),
                };
                distill.push(distill_loss(
                    tape,
                    &teacher,
                    &out.pyramid,
                    &strides,
                    &boxes,
                    &self.plan,
                    &gc,
                )?);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let summed = crate::mea::sum_vars(tape, &originals)?;
        let original = tape.scale(summed, scale);
        let terms = DistillTerms::combine(tape, &distill, scale)?;
        let total = match terms.mea_total {
            Some(m) => tape.add(original, m)?,
            None => original,
        };
        let mut breakdown = terms.breakdown(tape);
        breakdown.original = tape.value(original).item();
        breakdown.total = tape.value(total).item();
        let mut params = student.all().to_vec();
        params.extend(gc.iter().flat_map(|g| g.vars()));
        Ok((Objective { total, breakdown }, params))
    }

    /// Loss breakdown on `batch` without updating anything.
    pub fn losses(&self, batch: &[usize]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        Ok(self.objective(&mut tape, batch)?.0.breakdown)
    }

    /// Forward, backward and one AdamW update on the step's batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.opt.step_count();
        let batch = self.batch(step);
        let mut tape = Tape::new().with_finite_checks(false);
        let (obj, params) = self.objective(&mut tape, &batch)?;
        if !obj.breakdown.total.is_finite() || tape.first_non_finite().is_some() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total loss {}", obj.breakdown.total),
            });
        }
        let grads = tape.backward(obj.total).map_err(|e| Error::NonFiniteLoss {
            step,
            detail: e.to_string(),
        })?;
        let grads: Vec<Tensor> = params.iter().map(|&v| grads.wrt(v)).collect();
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient of parameter {k}"),
            });
        }
        let mut targets = self.model.tensors_mut();
        for g in &mut self.plan.gc {
            targets.extend(g.tensors_mut());
        }
        self.opt.update(&mut targets, &grads)?;
        Ok(obj.breakdown)
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for g in 0..self.plan.gc.len() {
            names.extend(GC_PARAM_NAMES.iter().map(|n| format!("gc{g}.{n}")));
        }
        names
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        for g in &self.plan.gc {
            out.extend(g.tensors().map(Tensor::clone));
        }
        out
    }

    /// Parameters plus optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.parameter_names();
        let mut tensors: Vec<(String, Tensor)> =
            names.iter().cloned().zip(self.parameters()).collect();
        let (m, v) = self.opt.moments();
        for (prefix, grids) in [("adam.m", m), ("adam.v", v)] {
            for (n, t) in names.iter().zip(grids) {
                tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        Checkpoint {
            step: self.opt.step_count(),
            tensors,
        }
    }

    /// Continues training from `ckpt`; the result matches an uninterrupted run.
    pub fn resume(
        cfg: TrainConfig,
        scenes: &'a [Scene],
        teacher: &'a [TeacherFeatures],
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(cfg, scenes, teacher)?;
        let names = t.parameter_names();
        load_named(&mut t.model, &mut t.plan.gc, ckpt)?;
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            if ckpt.step == 0 {
                return Ok(Vec::new());
            }
            names
                .iter()
                .map(|n| {
                    ckpt.get(&format!("{prefix}.{n}"))
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{n}")))
                })
                .collect()
        };
        t.opt = AdamW::restore(
            t.cfg.optimizer(),
            ckpt.step,
            moments("adam.m")?,
            moments("adam.v")?,
        )?;
        Ok(t)
    }
}

fn copy_into(dst: &mut Tensor, name: &str, ckpt: &Checkpoint) -> Result<()> {
    let src = ckpt
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if src.shape() != dst.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{name}: checkpoint {:?} vs model {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    *dst = src.clone();
    Ok(())
}

fn load_named(model: &mut StudentModel, gc: &mut [GcParams], ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, dst) in names.iter().zip(model.tensors_mut()) {
        copy_into(dst, name, ckpt)?;
    }
    for (g, params) in gc.iter_mut().enumerate() {
        for (n, dst) in GC_PARAM_NAMES.iter().zip(params.tensors_mut()) {
            copy_into(dst, &format!("gc{g}.{n}"), ckpt)?;
        }
    }
    Ok(())
}

/// Student weights from a checkpoint; distillation blocks are ignored.
pub fn load_student(
    spec: StudentSpec,
    image_channels: usize,
    ckpt: &Checkpoint,
) -> Result<StudentModel> {
    let mut model = StudentModel::init(spec, image_channels, &mut ChaCha8Rng::seed_from_u64(0));
    load_named(&mut model, &mut [], ckpt)?;
    Ok(model)
}

/// Post-NMS detections for one scene.
pub fn detect(model: &StudentModel, scene: &Scene, image: usize) -> Result<Vec<Detection>> {
    let mut tape = Tape::new().with_finite_checks(false);
    let vars = model.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &scene.rgb, &scene.tir)?;
    let preds: Vec<Tensor> = out
        .predictions
        .iter()
        .map(|&p| tape.value(p).clone())
        .collect();
    let dets = decode(&preds, &model.strides(), image, scene.extent())?;
    Ok(nms(dets, NMS_IOU))
}

/// Evaluation of one split with day and night miss rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub all: EvalReport,
    pub mr2_day: Option<f64>,
    pub mr2_night: Option<f64>,
    pub scenes: usize,
    pub day_scenes: usize,
    pub night_scenes: usize,
}

/// Detections and ground truth of a subset, re-indexed from 0.
fn subset(
    dets: &[Vec<Detection>],
    scenes: &[Scene],
    keep: impl Fn(&Scene) -> bool,
) -> (Vec<Detection>, Vec<Vec<crate::boxes::GtBox>>) {
    let mut d = Vec::new();
    let mut g = Vec::new();
    for (s, sd) in scenes.iter().zip(dets) {
        if keep(s) {
            let image = g.len();
            d.extend(sd.iter().map(|x| Detection { image, ..*x }));
            g.push(s.annotations.clone());
        }
    }
    (d, g)
}

pub fn evaluate_detections(dets: &[Vec<Detection>], scenes: &[Scene]) -> Result<SplitReport> {
    let (all_d, all_g) = subset(dets, scenes, |_| true);
    let all = evaluate(&all_d, &all_g)?;
    let split_mr = |lighting: Lighting| -> Result<Option<f64>> {
        let (d, g) = subset(dets, scenes, |s| s.lighting == lighting);
        match log_average_miss_rate(&d, &g, MR_IOU) {
            Ok(c) => Ok(Some(c.mr2)),
            Err(Error::NoGroundTruth) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let night_scenes = scenes
        .iter()
        .filter(|s| s.lighting == Lighting::Night)
        .count();
    Ok(SplitReport {
        all,
        mr2_day: split_mr(Lighting::Day)?,
        mr2_night: split_mr(Lighting::Night)?,
        scenes: scenes.len(),
        day_scenes: scenes.len() - night_scenes,
        night_scenes,
    })
}

pub fn evaluate_split(model: &StudentModel, scenes: &[Scene]) -> Result<SplitReport> {
    if scenes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let dets = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| detect(model, s, i))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(&dets, scenes)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: StudentModel,
    pub plan: DistillPlan,
    pub history: Vec<LossBreakdown>,
    /// `(step, report)` for periodic evaluations.
    pub evals: Vec<(u64, SplitReport)>,
    pub report: Option<SplitReport>,
    pub checkpoint: Checkpoint,
}

/// Full training run followed by evaluation on the test split.
pub fn run_distillation(cfg: &TrainConfig, data: &Dataset, teacher: &Teacher) -> Result<RunResult> {
    let feats = teacher_pyramids(teacher, &data.train)?;
    let mut trainer = Trainer::new(cfg.clone(), &data.train, &feats)?;
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    let mut evals = Vec::new();
    while trainer.step_count() < cfg.iterations {
        history.push(trainer.step()?);
        let done = trainer.step_count();
        if cfg.eval_every > 0
            && done % cfg.eval_every == 0
            && done < cfg.iterations
            && !data.test.is_empty()
        {
            evals.push((done, evaluate_split(&trainer.model, &data.test)?));
        }
    }
    let report = if cfg.iterations > 0 && !data.test.is_empty() {
        Some(evaluate_split(&trainer.model, &data.test)?)
    } else {
        None
    };
    Ok(RunResult {
        checkpoint: trainer.checkpoint(),
        model: trainer.model,
        plan: trainer.plan,
        history,
        evals,
        report,
    })
}
