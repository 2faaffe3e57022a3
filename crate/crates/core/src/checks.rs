//! Seeded verification suites for the losses, attention maps, focal masks,
//! training-step bookkeeping and detection metrics.
//!
//! Every suite is deterministic and returns a [`CheckReport`]. Test targets
//! assert on `passed`; the acceptance harness prints the reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{channel_map, spatial_map};
use crate::boxes::{BBox, GtBox, Occlusion};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_distill_loss, image_level_fuse, traditional_distill_loss, DistillMode, DistillPlan,
    ImageFusionParams, ImageFusionVars, ResidualBlock,
};
use crate::mea::{
    attention_loss, build_mask, global_loss, mea_loss, target_loss, GcParams, GcVars, LossBreakdown,
    MeaConfig, MeaWeights,
};
use crate::metrics::{
    coco_map, coco_thresholds, is_reasonable, log_average_miss_rate, Detection, MR_FLOOR, MR_IOU,
};
use crate::tensor::{finite_diff_grad, Tape, Tensor, Var, GRAD_ATOL};
use crate::toynet::detect::detection_loss;
use crate::toynet::{Dataset, DatasetSpec, Teacher, TeacherSpec, TrainConfig, Trainer};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;
const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest error seen, in the suite's own measure.
    pub worst: f64,
    /// First failure, or a short summary.
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: true,
            cases: 0,
            worst: 0.0,
            detail: String::new(),
        }
    }

    fn record(&mut self, err: f64, limit: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        let bad = !(err <= limit);
        if bad || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err.max(self.worst) };
        }
        if bad && self.passed {
            self.passed = false;
            self.detail = format!("{} (error {err:e})", what());
        }
    }

    fn fail(&mut self, what: String) {
        self.cases += 1;
        if self.passed {
            self.passed = false;
            self.detail = what;
        }
    }

    fn finish(mut self) -> Self {
        if self.passed {
            self.detail = format!("{} cases, worst {:.3e}", self.cases, self.worst);
        }
        self
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative error between autodiff and central differences of the
/// scalar built by `build`, over every input tensor.
///
/// Each entry is compared at every step in [`FD_STEPS`] and keeps its best
/// agreement: large steps lose accuracy across ReLU/abs kinks, small steps to
/// cancellation, while a wrong derivative disagrees at all of them.
fn gradient_case(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        build(&mut t, &vs)
            .map(|o| t.value(o).item())
            .unwrap_or(f64::NAN)
    };
    let floor = GRAD_ATOL.max(1e-6 * base.abs());
    let mut worst: f64 = 0.0;
    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(v);
        let mut best = vec![f64::INFINITY; x.len()];
        for eps in FD_STEPS {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut xs = inputs.to_vec();
                    xs[i] = probe.clone();
                    eval(&xs)
                },
                x,
                eps,
            );
            if !numeric.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "finite differences of input {i}"
                )));
            }
            for ((b, a), n) in best.iter_mut().zip(analytic.data()).zip(numeric.data()) {
                *b = b.min((a - n).abs() / a.abs().max(n.abs()).max(floor));
            }
        }
        worst = best.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

fn gc_vars(v: &[Var]) -> GcVars {
    GcVars {
        conv1_w: v[0],
        conv1_b: v[1],
        conv2_w: v[2],
        conv2_b: v[3],
        conv3_w: v[4],
        conv3_b: v[5],
    }
}

fn fuse_vars(v: &[Var]) -> ImageFusionVars {
    ImageFusionVars {
        rgb: [v[0], v[1], v[2], v[3]],
        tir: [v[4], v[5], v[6], v[7]],
        proj_w: v[8],
        proj_b: v[9],
    }
}

fn fuse_tensors(p: &ImageFusionParams) -> Vec<Tensor> {
    p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Random box inside an `extent × extent` grid of unit cells, at least one
/// cell on each side.
fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let w = rng.random_range(1.0..extent);
    let h = rng.random_range(1.0..extent);
    let x1 = rng.random_range(0.0..extent - w);
    let y1 = rng.random_range(0.0..extent - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

fn random_weights(rng: &mut impl Rng) -> MeaWeights {
    MeaWeights {
        alpha: rng.random_range(0.5..2.0),
        gamma: rng.random_range(0.5..2.0),
        lambda: rng.random_range(0.5..2.0),
    }
}

fn random_config(rng: &mut impl Rng) -> MeaConfig {
    let mut w = || rng.random_range(0.5..2.0);
    MeaConfig {
        alpha1: w(),
        alpha2: w(),
        gamma1: w(),
        gamma2: w(),
        lambda1: w(),
        lambda2: w(),
        reduction: 1,
    }
}

/// Autodiff against central differences for every distillation loss, the
/// image-level fusion front end and the composed detection + distillation
/// objective, on 2-channel 4×4 inputs. Bottleneck reduction is 1 so the
/// context transform keeps two hidden units and a non-degenerate layer norm.
pub fn gradient_suite(seeds: u64) -> CheckReport {
    let mut report = CheckReport::new("gradient suite");
    let (c, h, w) = (2, 4, 4);
    for seed in 0..seeds {
        let mut r = rng(seed);
        let teacher = Tensor::normal(&[c, h, w], 1.0, &mut r);
        let student = Tensor::normal(&[c, h, w], 1.0, &mut r);
        let gc = GcParams::random(c, 1, 0.5, &mut r);
        let n_boxes = r.random_range(0..3);
        let boxes: Vec<BBox> = (0..n_boxes).map(|_| random_box(&mut r, 4.0)).collect();
        let weights = random_weights(&mut r);
        let mut gc_inputs = vec![student.clone()];
        gc_inputs.extend(gc.tensors().map(|t| t.clone()));

        let cases: Vec<(&str, Result<f64>)> = vec![
            (
                "global",
                gradient_case(&gc_inputs, |tape, v| {
                    let t = tape.constant(teacher.clone());
                    global_loss(tape, t, v[0], &gc_vars(&v[1..]), weights.lambda)
                }),
            ),
            (
                "target",
                gradient_case(std::slice::from_ref(&student), |tape, v| {
                    let t = tape.constant(teacher.clone());
                    let mask = build_mask(&boxes, (h, w), 1.0);
                    target_loss(tape, t, v[0], &mask, weights.alpha)
                }),
            ),
            (
                "attention",
                gradient_case(std::slice::from_ref(&student), |tape, v| {
                    let t = tape.constant(teacher.clone());
                    attention_loss(tape, t, v[0], weights.gamma)
                }),
            ),
            (
                "mea",
                gradient_case(&gc_inputs, |tape, v| {
                    let t = tape.constant(teacher.clone());
                    let terms =
                        mea_loss(tape, &[t], &[v[0]], &[1.0], &boxes, &gc_vars(&v[1..]), weights)?;
                    Ok(terms.total)
                }),
            ),
            ("image_level_fuse", fuse_case(&mut r, c, h, w)),
            ("objective", objective_case(&mut r, c, h, w, &boxes)),
        ];
        for (name, result) in cases {
            match result {
                Ok(err) => report.record(err, GRADIENT_TOLERANCE, || {
                    format!("{name} gradient, seed {seed}")
                }),
                Err(e) => report.fail(format!("{name} gradient, seed {seed}: {e}")),
            }
        }
    }
    report.finish()
}

fn fusion_params(rng: &mut impl Rng, c: usize) -> ImageFusionParams {
    let mut p = ImageFusionParams::init(c, c, rng);
    p.rgb = ResidualBlock::init(c, 0.8, rng);
    p.tir = ResidualBlock::init(c, 0.8, rng);
    for b in [&mut p.rgb.b1, &mut p.rgb.b2, &mut p.tir.b1, &mut p.tir.b2, &mut p.proj_b] {
        *b = Tensor::uniform(b.shape(), 0.3, rng);
    }
    p
}

fn fuse_case(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<f64> {
    let mut inputs = vec![
        Tensor::normal(&[c, h, w], 1.0, r),
        Tensor::normal(&[c, h, w], 1.0, r),
    ];
    inputs.extend(fuse_tensors(&fusion_params(r, c)));
    let readout = Tensor::normal(&[c, h, w], 1.0, r);
    gradient_case(&inputs, |tape, v| {
        let fused = image_level_fuse(tape, v[0], v[1], &fuse_vars(&v[2..]))?;
        let k = tape.constant(readout.clone());
        let lin = tape.mul(fused, k)?;
        let sq = tape.square(fused);
        let both = tape.add(lin, sq)?;
        Ok(tape.sum_all(both))
    })
}

/// `detection loss + both MEA losses` through image fusion and a linear head.
fn objective_case(
    r: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    boxes: &[BBox],
) -> Result<f64> {
    let rgb = Tensor::normal(&[c, h, w], 1.0, r);
    let tir = Tensor::normal(&[c, h, w], 1.0, r);
    let teacher_rgb = Tensor::normal(&[c, h, w], 1.0, r);
    let teacher_tir = Tensor::normal(&[c, h, w], 1.0, r);
    let config = random_config(r);
    let mut inputs = fuse_tensors(&fusion_params(r, c));
    inputs.push(Tensor::normal(&[5, c], 0.5, r));
    inputs.push(Tensor::normal(&[5], 0.5, r));
    for _ in 0..2 {
        inputs.extend(GcParams::random(c, 1, 0.5, r).tensors().map(|t| t.clone()));
    }
    let plan_gc = vec![GcParams::init(c, 1, r), GcParams::init(c, 1, r)];
    let plan = DistillPlan::with_params(DistillMode::Fusion, config, plan_gc)?;
    gradient_case(&inputs, |tape, v| {
        let rgb = tape.constant(rgb.clone());
        let tir = tape.constant(tir.clone());
        let fused = image_level_fuse(tape, rgb, tir, &fuse_vars(&v[..10]))?;
        let preds = tape.channel_mix(fused, v[10], v[11])?;
        let original = detection_loss(tape, &[preds], boxes, &[1.0])?;
        let tr = tape.constant(teacher_rgb.clone());
        let tt = tape.constant(teacher_tir.clone());
        let gc = [gc_vars(&v[12..18]), gc_vars(&v[18..24])];
        let terms = fusion_distill_loss(tape, &[tr], &[tt], &[fused], &[1.0], boxes, &plan, &gc)?;
        let mea = terms.mea_total.ok_or(Error::EmptyInput("fusion terms"))?;
        tape.add(original, mea)
    })
}

/// Boxes for the identity and mask suites on a `size × size` image: empty,
/// one box, a pair with a forced overlap, or a random handful.
fn scenario_boxes(rng: &mut impl Rng, case: u64, size: f64) -> Vec<BBox> {
    match case % 4 {
        0 => Vec::new(),
        1 => vec![random_box(rng, size)],
        2 => {
            let a = random_box(rng, size * 0.75);
            let dx = rng.random_range(0.0..a.width() * 0.5);
            let dy = rng.random_range(0.0..a.height() * 0.5);
            let b = BBox::new(a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy).expect("shifted box");
            vec![a, b]
        }
        _ => {
            let n = rng.random_range(1..5);
            (0..n).map(|_| random_box(rng, size)).collect()
        }
    }
}

/// Every distillation component is zero when the student pyramid equals the
/// distilled teacher pyramid: both modal halves for the fusion plan, the
/// fused stub for the traditional plan, with random context blocks.
pub fn identity_zero_suite(seeds: u64) -> CheckReport {
    let mut report = CheckReport::new("identity-zero suite");
    let levels = [(8usize, 8usize, 4.0), (4, 4, 8.0)];
    let strides: Vec<f64> = levels.iter().map(|l| l.2).collect();
    for seed in 0..seeds {
        let mut r = rng(1_000 + seed);
        let c = 8;
        let pyramid: Vec<Tensor> = levels
            .iter()
            .map(|&(h, w, _)| Tensor::normal(&[c, h, w], r.random_range(0.1..3.0), &mut r))
            .collect();
        let boxes = scenario_boxes(&mut r, seed, 32.0);
        let reduction = [1, 2, 4][seed as usize % 3];
        let config = MeaConfig {
            reduction,
            ..random_config(&mut r)
        };
        let gc = vec![
            GcParams::random(c, reduction, 0.5, &mut r),
            GcParams::random(c, reduction, 0.5, &mut r),
        ];
        let result = (|| -> Result<[LossBreakdown; 2]> {
            let mut tape = Tape::new();
            let feats: Vec<Var> = pyramid.iter().map(|t| tape.constant(t.clone())).collect();
            let student: Vec<Var> = pyramid.iter().map(|t| tape.param(t.clone())).collect();
            let fusion = DistillPlan::with_params(DistillMode::Fusion, config, gc.clone())?;
            let bound = fusion.bind(&mut tape);
            let f = fusion_distill_loss(
                &mut tape, &feats, &feats, &student, &strides, &boxes, &fusion, &bound,
            )?;
            let single = DistillPlan::with_params(DistillMode::Traditional, config, gc[..1].to_vec())?;
            let bound = single.bind(&mut tape);
            let t = traditional_distill_loss(
                &mut tape, &feats, &student, &strides, &boxes, &single, &bound,
            )?;
            Ok([f.breakdown(&tape), t.breakdown(&tape)])
        })();
        match result {
            Ok(parts) => {
                for (mode, b) in ["fusion", "traditional"].iter().zip(parts) {
                    let worst = b.values().iter().fold(0.0, |m: f64, v| m.max(v.abs()));
                    report.record(worst, IDENTITY_TOLERANCE, || {
                        format!("{mode} plan, seed {seed}, {} boxes", boxes.len())
                    });
                }
            }
            Err(e) => report.fail(format!("seed {seed}: {e}")),
        }
        // Each modal half on its own against distinct teacher features.
        let other: Vec<Tensor> = pyramid
            .iter()
            .map(|t| Tensor::normal(t.shape(), 1.0, &mut r))
            .collect();
        for (half, (feat, w)) in [(&pyramid, config.rgb()), (&other, config.tir())]
            .into_iter()
            .enumerate()
        {
            let mut tape = Tape::new();
            let t: Vec<Var> = feat.iter().map(|x| tape.constant(x.clone())).collect();
            let s: Vec<Var> = feat.iter().map(|x| tape.param(x.clone())).collect();
            let vars = gc[half].bind(&mut tape);
            match mea_loss(&mut tape, &t, &s, &strides, &boxes, &vars, w) {
                Ok(terms) => {
                    let v = terms.values(&tape);
                    let worst = [v.global, v.target, v.att, v.focal, v.total]
                        .iter()
                        .fold(0.0, |m: f64, x| m.max(x.abs()));
                    report.record(worst, IDENTITY_TOLERANCE, || {
                        format!("single half {half}, seed {seed}")
                    });
                }
                Err(e) => report.fail(format!("single half {half}, seed {seed}: {e}")),
            }
        }
    }
    report.finish()
}

/// Cells of an `h × w` grid at `stride` whose open extent meets the box.
fn covered_cells(b: &BBox, (h, w): (usize, usize), stride: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (x0, y0) = (j as f64 * stride, i as f64 * stride);
            if x0 < b.x2 && x0 + stride > b.x1 && y0 < b.y2 && y0 + stride > b.y1 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Attention maps sum to `H·W` and `C`; an isolated box's mask sums to one;
/// cells shared by overlapping boxes carry the weight of the largest box.
pub fn normalization_suite(shapes: u64, overlaps: u64) -> CheckReport {
    let mut report = CheckReport::new("normalization suite");
    for seed in 0..shapes {
        let mut r = rng(2_000 + seed);
        let c = r.random_range(1..=16);
        let h = r.random_range(1..=16);
        let w = r.random_range(1..=16);
        let scale = [1e-3, 1.0, 30.0][seed as usize % 3];
        let x = Tensor::normal(&[c, h, w], scale, &mut r);
        match (spatial_map(&x), channel_map(&x)) {
            (Ok(s), Ok(ch)) => {
                let es = (s.map.sum() - (h * w) as f64).abs() / (h * w) as f64;
                let ec = (ch.weights.sum() - c as f64).abs() / c as f64;
                report.record(es, NORMALIZATION_TOLERANCE, || {
                    format!("spatial sum for {c}×{h}×{w}")
                });
                report.record(ec, NORMALIZATION_TOLERANCE, || {
                    format!("channel sum for {c}×{h}×{w}")
                });
            }
            (Err(e), _) | (_, Err(e)) => report.fail(format!("{c}×{h}×{w}: {e}")),
        }
        let stride = [1.0, 2.0, 4.0, 8.0][seed as usize % 4];
        let extent = (h.max(2), w.max(2));
        let size = extent.0.min(extent.1) as f64 * stride;
        let b = random_box(&mut r, size);
        let mask = build_mask(&[b], extent, stride);
        report.record((mask.grid.sum() - 1.0).abs(), NORMALIZATION_TOLERANCE, || {
            format!("isolated mask sum, box {b:?} at stride {stride}")
        });
    }
    for case in 0..overlaps {
        let mut r = rng(3_000 + case);
        let stride = [1.0, 4.0, 8.0][case as usize % 3];
        let extent = (12usize, 12usize);
        let size = 12.0 * stride;
        // a large box with one or two smaller boxes straddling its border
        let big = BBox::new(
            2.0 * stride,
            2.0 * stride,
            r.random_range(7.0..10.0) * stride,
            r.random_range(7.0..10.0) * stride,
        )
        .expect("large box");
        let mut boxes = vec![big];
        for _ in 0..r.random_range(1..3) {
            let bw = r.random_range(1.5..4.0) * stride;
            let bh = r.random_range(1.5..4.0) * stride;
            let x1 = r.random_range(big.x2 - bw * 0.8..big.x2 - bw * 0.2);
            let y1 = r.random_range(big.y1..big.y2 - bh * 0.2);
            let small = BBox::new(x1, y1, (x1 + bw).min(size), (y1 + bh).min(size))
                .expect("small box");
            boxes.push(small);
        }
        if case % 2 == 1 {
            boxes.reverse();
        }
        let cover: Vec<Vec<(usize, usize)>> =
            boxes.iter().map(|b| covered_cells(b, extent, stride)).collect();
        let mask = build_mask(&boxes, extent, stride);
        let mut worst: f64 = 0.0;
        let mut shared = 0;
        for i in 0..extent.0 {
            for j in 0..extent.1 {
                let areas: Vec<usize> = cover
                    .iter()
                    .filter(|c| c.contains(&(i, j)))
                    .map(Vec::len)
                    .collect();
                shared += usize::from(areas.len() > 1);
                let want = areas.iter().max().map_or(0.0, |&a| 1.0 / a as f64);
                worst = worst.max((mask.grid.get(&[i, j]) - want).abs());
            }
        }
        if shared == 0 {
            report.fail(format!("overlap case {case} has no shared cell"));
        }
        report.record(worst, NORMALIZATION_TOLERANCE, || {
            format!("overlap case {case}, boxes {boxes:?}")
        });
    }
    report.finish()
}

/// Trains on the standard synthetic spec for `steps` steps and checks every
/// recorded breakdown satisfies the decomposition identities exactly.
pub fn loss_algebra_suite(steps: u64, mode: DistillMode) -> CheckReport {
    let mut report = CheckReport::new("loss-algebra suite");
    let result = (|| -> Result<()> {
        let spec = DatasetSpec {
            test_scenes: 1,
            ..DatasetSpec::default()
        };
        let data = Dataset::generate(&spec)?;
        let teacher = Teacher::new(TeacherSpec::default(), spec.image_channels)?;
        let feats = crate::toynet::train::teacher_pyramids(&teacher, &data.train)?;
        let cfg = TrainConfig {
            plan: mode,
            mea: MeaConfig::default().scaled(100.0),
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, &data.train, &feats)?;
        for step in 0..steps {
            let b = trainer.step()?;
            match b.identity_violations().first() {
                Some(v) => report.fail(format!("step {step}: {v}")),
                None => report.record(0.0, 0.0, String::new),
            }
            if mode == DistillMode::Fusion && b.mea_total == 0.0 {
                report.fail(format!("step {step}: fusion distillation contributed nothing"));
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        report.fail(format!("training failed: {e}"));
    }
    report.finish()
}

/// Independent matcher: visit detections by descending score (stable), take
/// the first evaluated box of maximal IoU not yet taken, else note whether any
/// ignored box overlaps. Returns `Some(true)` for a match, `Some(false)` for a
/// false positive and `None` for a detection absorbed by an ignored box.
fn oracle_match(dets: &[(BBox, f64)], gts: &[GtBox], ignored: &[bool], thr: f64) -> Vec<Option<bool>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).expect("finite scores"));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![Some(false); dets.len()];
    for i in order {
        let ious: Vec<f64> = gts.iter().map(|g| dets[i].0.iou(&g.bbox)).collect();
        let candidates: Vec<usize> = (0..gts.len())
            .filter(|&j| !ignored[j] && !taken[j] && ious[j] >= thr)
            .collect();
        let best = candidates
            .iter()
            .map(|&j| ious[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if let Some(&j) = candidates.iter().find(|&&j| ious[j] == best) {
            taken[j] = true;
            out[i] = Some(true);
        } else if (0..gts.len()).any(|j| ignored[j] && ious[j] >= thr) {
            out[i] = None;
        }
    }
    out
}

/// Detections with score at least `t`, grouped by image.
fn above(dets: &[Detection], n: usize, t: f64) -> Vec<Vec<(BBox, f64)>> {
    let mut out = vec![Vec::new(); n];
    for d in dets.iter().filter(|d| d.score >= t) {
        out[d.image].push((d.bbox, d.score));
    }
    out
}

/// Miss rate by enumerating every score threshold and re-matching from scratch.
fn oracle_mr(dets: &[Detection], gts: &[Vec<GtBox>]) -> Option<f64> {
    let n = gts.len();
    let ignored: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| g.iter().map(|b| !is_reasonable(b)).collect())
        .collect();
    let n_gt: usize = ignored.iter().flatten().filter(|&&i| !i).count();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (img, kept) in above(dets, n, t).iter().enumerate() {
                for label in oracle_match(kept, &gts[img], &ignored[img], MR_IOU) {
                    match label {
                        Some(true) => tp += 1,
                        Some(false) => fp += 1,
                        None => {}
                    }
                }
            }
            (fp as f64 / n as f64, 1.0 - tp as f64 / n_gt as f64)
        })
        .collect();
    let logs: f64 = (0..9)
        .map(|k| {
            let reference = 10f64.powf(-2.0 + k as f64 / 4.0);
            let mr = points
                .iter()
                .filter(|p| p.0 <= reference)
                .map(|p| p.1)
                .fold(1.0, f64::min);
            mr.max(MR_FLOOR).ln()
        })
        .sum();
    Some((logs / 9.0).exp())
}

/// COCO AP by enumerating ranked prefixes and re-matching each prefix.
fn oracle_map(dets: &[Detection], gts: &[Vec<GtBox>]) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    ranked.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(dets[a].image.cmp(&dets[b].image))
    });
    let mut total = 0.0;
    for thr in coco_thresholds() {
        let mut pr = Vec::new();
        for k in 1..=ranked.len() {
            let mut per_image = vec![Vec::new(); gts.len()];
            for &i in &ranked[..k] {
                per_image[dets[i].image].push((dets[i].bbox, dets[i].score));
            }
            let tp: usize = per_image
                .iter()
                .zip(gts)
                .map(|(d, g)| {
                    oracle_match(d, g, &vec![false; g.len()], thr)
                        .into_iter()
                        .filter(|l| *l == Some(true))
                        .count()
                })
                .sum();
            pr.push((tp as f64 / k as f64, tp as f64 / n_gt as f64));
        }
        let ap: f64 = (0..=100)
            .map(|i| {
                let r = i as f64 / 100.0;
                pr.iter()
                    .filter(|p| p.1 >= r)
                    .map(|p| p.0)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0;
        total += ap;
    }
    Some(total / coco_thresholds().len() as f64)
}

/// Random instance: up to 5 images, 6 ground-truth boxes and 10 detections in
/// total, with coarse scores so ties occur.
fn random_instance(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<Vec<GtBox>>) {
    let n_images = r.random_range(1..=5);
    let n_gt = r.random_range(0..=6);
    let n_det = r.random_range(0..=10);
    let mut gts = vec![Vec::new(); n_images];
    let mut all = Vec::new();
    for _ in 0..n_gt {
        let img = r.random_range(0..n_images);
        let h = r.random_range(30.0..90.0);
        let w = h * r.random_range(0.3..0.6);
        let x = r.random_range(0.0..100.0);
        let y = r.random_range(0.0..40.0);
        let occ = if r.random_bool(0.7) {
            Occlusion::None
        } else {
            Occlusion::ALL[r.random_range(1..4)]
        };
        let b = BBox::new(x, y, x + w, y + h).expect("gt box");
        gts[img].push(GtBox::pedestrian(b, occ));
        all.push((img, b));
    }
    let dets = (0..n_det)
        .map(|_| {
            let score = (r.random_range(0..6) as f64 + 1.0) / 6.0;
            if !all.is_empty() && r.random_bool(0.7) {
                let (img, g) = all[r.random_range(0..all.len())];
                let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.2..0.2) * s;
                let (dx, dy, dw) = (j(r, g.width()), j(r, g.height()), j(r, g.width()));
                let b = BBox::new(g.x1 + dx, g.y1 + dy, g.x2 + dx + dw, g.y2 + dy)
                    .unwrap_or(g);
                Detection { image: img, bbox: b, score }
            } else {
                let x = r.random_range(0.0..100.0);
                let h = r.random_range(20.0..90.0);
                let b = BBox::new(x, 0.0, x + 0.4 * h, h).expect("det box");
                Detection {
                    image: r.random_range(0..n_images),
                    bbox: b,
                    score,
                }
            }
        })
        .collect();
    (dets, gts)
}

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Greedy matching, MR⁻² and COCO AP against enumeration oracles on random
/// small instances, plus the reasonable-filter boundary, score-scale
/// invariance and monotonicity under an added perfect detection.
pub fn metric_oracle_suite(instances: u64) -> CheckReport {
    let mut report = CheckReport::new("metric oracle suite");
    for seed in 0..instances {
        let mut r = rng(4_000 + seed);
        let (dets, gts) = random_instance(&mut r);
        // matcher, per image
        for (img, g) in gts.iter().enumerate() {
            let mine: Vec<(BBox, f64)> = dets
                .iter()
                .filter(|d| d.image == img)
                .map(|d| (d.bbox, d.score))
                .collect();
            let boxes: Vec<BBox> = g.iter().map(|b| b.bbox).collect();
            let ignore: Vec<bool> = g.iter().map(|b| !is_reasonable(b)).collect();
            let got = crate::metrics::match_detections(&mine, &boxes, &ignore, MR_IOU);
            let want = oracle_match(&mine, g, &ignore, MR_IOU);
            let agree = got.labels.iter().zip(&want).all(|(l, w)| match (l, w) {
                (crate::metrics::MatchLabel::TruePositive(_), Some(true)) => true,
                (crate::metrics::MatchLabel::FalsePositive, Some(false)) => true,
                (crate::metrics::MatchLabel::Ignored, None) => true,
                _ => false,
            });
            if agree {
                report.record(0.0, 0.0, String::new);
            } else {
                report.fail(format!("matcher disagrees, instance {seed} image {img}"));
            }
        }
        let mr = log_average_miss_rate(&dets, &gts, MR_IOU).map(|c| c.mr2).ok();
        match (mr, oracle_mr(&dets, &gts)) {
            (Some(a), Some(b)) => report.record(close(a, b), 1e-12, || {
                format!("MR⁻² {a} vs oracle {b}, instance {seed}")
            }),
            (None, None) => {}
            (a, b) => report.fail(format!("MR⁻² availability {a:?} vs {b:?}, instance {seed}")),
        }
        let ap = coco_map(&dets, &gts).map(|c| c.map).ok();
        match (ap, oracle_map(&dets, &gts)) {
            (Some(a), Some(b)) => report.record((a - b).abs(), 1e-12, || {
                format!("mAP {a} vs oracle {b}, instance {seed}")
            }),
            (None, None) => {}
            (a, b) => report.fail(format!("mAP availability {a:?} vs {b:?}, instance {seed}")),
        }
        // scaling every score by a power of two changes no ordering
        let scaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: d.score * 0.25,
                ..*d
            })
            .collect();
        let mr_s = log_average_miss_rate(&scaled, &gts, MR_IOU).map(|c| c.mr2).ok();
        let ap_s = coco_map(&scaled, &gts).map(|c| c.map).ok();
        if mr_s != mr || ap_s != ap {
            report.fail(format!("score scaling changed metrics, instance {seed}"));
        }
        // a perfect detection on a reasonable box that no detection reaches never hurts
        if let Some(mr) = mr {
            let extra = gts.iter().enumerate().find_map(|(img, g)| {
                g.iter()
                    .find(|b| {
                        is_reasonable(b)
                            && !dets
                                .iter()
                                .any(|d| d.image == img && d.bbox.iou(&b.bbox) >= MR_IOU)
                    })
                    .map(|b| Detection {
                        image: img,
                        bbox: b.bbox,
                        score: r.random_range(0.0..2.0),
                    })
            });
            if let Some(extra) = extra {
                let mut more = dets.clone();
                more.push(extra);
                if let Ok(c) = log_average_miss_rate(&more, &gts, MR_IOU) {
                    if c.mr2 > mr * (1.0 + 1e-12) {
                        report.fail(format!("perfect detection raised MR⁻², instance {seed}"));
                    }
                }
            }
        }
    }
    // reasonable filter boundary
    for (h, occ, want) in [
        (55.0, Occlusion::None, true),
        (54.999_999, Occlusion::None, false),
        (200.0, Occlusion::None, true),
        (80.0, Occlusion::Light, false),
        (80.0, Occlusion::Moderate, false),
        (80.0, Occlusion::Heavy, false),
    ] {
        let g = GtBox::pedestrian(BBox::new(0.0, 10.0, 20.0, 10.0 + h).expect("box"), occ);
        if is_reasonable(&g) == want {
            report.record(0.0, 0.0, String::new);
        } else {
            report.fail(format!("reasonable filter wrong for height {h}, {occ}"));
        }
    }
    report.finish()
}

