//! The five batch commands.
//!
//! Output layout under the configured output root:
//!
//! ```text
//! data/                     gen-data (see `dataset`)
//! train/manifest.json       train
//! train/checkpoint.bin
//! train/losses.csv          step, then every LossBreakdown field
//! train/eval_<split>.json   eval
//! train/attention/*.csv     export-attention
//! ablate/<arm>/...          ablate, one train layout per arm
//! ablate/ablation.csv
//! ablate/ablation.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use amfd_core::attention::spatial_map;
use amfd_core::fusion::DistillMode;
use amfd_core::mea::LossBreakdown;
use amfd_core::metrics::EvalReport;
use amfd_core::tensor::{Tape, Tensor};
use amfd_core::toynet::{
    evaluate_split, load_student, teacher_pyramids, Checkpoint, Dataset, Scene, SplitReport,
    StudentModel, Teacher, TeacherFeatures, Trainer,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Split};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{CliError, CliResult};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSSES: &str = "losses.csv";
pub const ABLATION_ARMS: [DistillMode; 3] =
    [DistillMode::None, DistillMode::Traditional, DistillMode::Fusion];
pub const ABLATION_HEADER: [&str; 7] =
    ["arm", "map", "ap50", "ap75", "mr2_all", "mr2_day", "mr2_night"];
pub const ATTENTION_SOURCES: [&str; 4] =
    ["teacher_rgb", "teacher_tir", "teacher_fused", "student"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: u64,
    pub report: SplitReport,
}

/// Everything needed to audit or reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub steps_completed: u64,
    pub teacher_state_sha256: String,
    /// One entry per completed step.
    pub log: Vec<LossBreakdown>,
    pub evals: Vec<StepEval>,
    /// Test-split report, present once every iteration has run.
    pub report: Option<SplitReport>,
    /// Summed over every invocation that contributed steps.
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// JSON with the wall clock zeroed, for run-to-run comparison.
    pub fn deterministic_json(&self) -> String {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
        .to_json()
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Report written by `eval`: the [`EvalReport`] fields plus per-lighting
/// miss rates and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    #[serde(flatten)]
    pub all: EvalReport,
    pub mr2_day: Option<f64>,
    pub mr2_night: Option<f64>,
    pub scenes: usize,
    pub day_scenes: usize,
    pub night_scenes: usize,
}

impl From<SplitReport> for EvalFile {
    fn from(r: SplitReport) -> Self {
        Self {
            all: r.all,
            mr2_day: r.mr2_day,
            mr2_night: r.mr2_night,
            scenes: r.scenes,
            day_scenes: r.day_scenes,
            night_scenes: r.night_scenes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: DistillMode,
    pub report: SplitReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the run directory's checkpoint and manifest.
    pub resume: bool,
    /// Stop once this many steps are complete, leaving a resumable run.
    pub stop_after: Option<u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn train_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join("train")
}

pub fn ablate_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join("ablate")
}

pub fn gen_data(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let data = Dataset::generate(&cfg.dataset)?;
    let dir = cfg.data_dir();
    write_dataset(&dir, &data)?;
    Ok(dir)
}

/// Reads the generated dataset and checks it was built from this config.
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join("dataset.json").exists() {
        return Err(CliError::Data(format!(
            "no dataset in {}; run gen-data first",
            dir.display()
        )));
    }
    let data = read_dataset(&dir)?;
    if data.spec != cfg.dataset {
        return Err(CliError::Data(format!(
            "dataset in {} was generated from a different spec; rerun gen-data",
            dir.display()
        )));
    }
    Ok(data)
}

pub fn build_teacher(cfg: &ExperimentConfig) -> CliResult<Teacher> {
    Ok(Teacher::new(cfg.teacher.clone(), cfg.dataset.image_channels)?)
}

/// Dataset, frozen teacher and its cached training features.
pub struct Workspace {
    pub data: Dataset,
    pub teacher: Teacher,
    pub features: Vec<TeacherFeatures>,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig) -> CliResult<Self> {
        let data = load_data(cfg)?;
        let teacher = build_teacher(cfg)?;
        let features = teacher_pyramids(&teacher, &data.train)?;
        Ok(Self {
            data,
            teacher,
            features,
        })
    }
}

pub fn losses_csv(log: &[LossBreakdown]) -> String {
    let mut out = String::from("step");
    for f in LossBreakdown::FIELDS {
        out.push(',');
        out.push_str(f);
    }
    out.push('\n');
    for (i, b) in log.iter().enumerate() {
        write!(out, "{}", i + 1).expect("writing to a string");
        for v in b.values() {
            write!(out, ",{v}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn train(cfg: &ExperimentConfig, opts: TrainOptions) -> CliResult<RunManifest> {
    let ws = Workspace::load(cfg)?;
    train_in(cfg, &train_dir(cfg), &ws, opts)
}

/// Trains into `dir`, writing checkpoint, loss CSV and manifest.
pub fn train_in(
    cfg: &ExperimentConfig,
    dir: &Path,
    ws: &Workspace,
    opts: TrainOptions,
) -> CliResult<RunManifest> {
    let started = Instant::now();
    let tcfg = cfg.train_config();
    let teacher_before = sha256_hex(&ws.teacher.state_bytes());
    let config_hash = cfg.hash();
    create_dir(dir)?;

    let (mut trainer, mut log, mut evals, previous_seconds) = if opts.resume {
        let manifest = RunManifest::read(&dir.join(MANIFEST))?;
        if manifest.config_hash != config_hash {
            return Err(CliError::Usage(format!(
                "{} was trained with a different config",
                dir.display()
            )));
        }
        let path = dir.join(CHECKPOINT);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        if ckpt.step != manifest.steps_completed {
            return Err(CliError::Data(format!(
                "checkpoint at step {} but manifest at {}",
                ckpt.step, manifest.steps_completed
            )));
        }
        let trainer = Trainer::resume(tcfg.clone(), &ws.data.train, &ws.features, &ckpt)?;
        (trainer, manifest.log, manifest.evals, manifest.wall_clock_seconds)
    } else {
        let trainer = Trainer::new(tcfg.clone(), &ws.data.train, &ws.features)?;
        (trainer, Vec::new(), Vec::new(), 0.0)
    };

    let target = opts
        .stop_after
        .map_or(tcfg.iterations, |s| s.min(tcfg.iterations));
    while trainer.step_count() < target {
        log.push(trainer.step()?);
        let done = trainer.step_count();
        if tcfg.eval_every > 0
            && done % tcfg.eval_every == 0
            && done < tcfg.iterations
            && !ws.data.test.is_empty()
        {
            evals.push(StepEval {
                step: done,
                report: evaluate_split(&trainer.model, &ws.data.test)?,
            });
        }
    }
    let steps_completed = trainer.step_count();
    let report = if steps_completed == tcfg.iterations
        && tcfg.iterations > 0
        && !ws.data.test.is_empty()
    {
        Some(evaluate_split(&trainer.model, &ws.data.test)?)
    } else {
        None
    };

    if sha256_hex(&ws.teacher.state_bytes()) != teacher_before {
        return Err(CliError::Numeric("teacher state changed during training".into()));
    }

    write_atomic(&dir.join(CHECKPOINT), &trainer.checkpoint().to_bytes())?;
    write_atomic(&dir.join(LOSSES), losses_csv(&log).as_bytes())?;
    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash,
        seed: cfg.train.seed,
        code_version: CODE_VERSION.to_string(),
        steps_completed,
        teacher_state_sha256: teacher_before,
        log,
        evals,
        report,
        wall_clock_seconds: previous_seconds + started.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join(MANIFEST), manifest.to_json().as_bytes())?;

    if cfg.export.attention && manifest.report.is_some() {
        let model = load_model(cfg, &dir.join(CHECKPOINT))?;
        export_attention_with(cfg, &model, &ws.data, &ws.teacher, &dir.join("attention"))?;
    }
    Ok(manifest)
}

pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<StudentModel> {
    let bytes = fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    Ok(load_student(
        cfg.student.clone(),
        cfg.dataset.image_channels,
        &ckpt,
    )?)
}

fn split_scenes(data: &Dataset, split: Split) -> &[Scene] {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

/// Evaluates a checkpoint and writes `eval_<split>.json` beside it.
pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: Split,
) -> CliResult<(PathBuf, EvalFile)> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let report: EvalFile = evaluate_split(&model, split_scenes(&data, split))
        .map_err(|e| CliError::Data(format!("{} split: {e}", split.name())))?
        .into();
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(format!("eval_{}.json", split.name()));
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&path, json.as_bytes())?;
    Ok((path, report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = ABLATION_HEADER.join(",") + "\n";
    for r in rows {
        let a = &r.report.all;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.arm,
            a.map_coco,
            a.ap50,
            a.ap75,
            a.mr2,
            fmt_opt(r.report.mr2_day),
            fmt_opt(r.report.mr2_night)
        )
        .expect("writing to a string");
    }
    out
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12}", ABLATION_HEADER[0]);
    for h in &ABLATION_HEADER[1..] {
        write!(out, " {h:>10}").expect("writing to a string");
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        let a = &r.report.all;
        write!(out, "{:<12}", r.arm.name()).expect("writing to a string");
        for v in [
            Some(a.map_coco),
            Some(a.ap50),
            Some(a.ap75),
            Some(a.mr2),
            r.report.mr2_day,
            r.report.mr2_night,
        ] {
            write!(out, " {:>10}", cell(v)).expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

/// Runs the three arms with shared data, teacher and seed.
pub fn ablate(cfg: &ExperimentConfig) -> CliResult<Vec<AblationRow>> {
    if cfg.train.iterations == 0 {
        return Err(CliError::Usage("ablate needs train.iterations > 0".into()));
    }
    let ws = Workspace::load(cfg)?;
    if ws.data.test.is_empty() {
        return Err(CliError::Data("ablate needs a non-empty test split".into()));
    }
    let root = ablate_dir(cfg);
    let mut rows = Vec::with_capacity(ABLATION_ARMS.len());
    for arm in ABLATION_ARMS {
        let mut arm_cfg = cfg.clone();
        arm_cfg.train.plan = arm;
        let m = train_in(&arm_cfg, &root.join(arm.name()), &ws, TrainOptions::default())?;
        rows.push(AblationRow {
            arm,
            report: m.report.expect("complete run has a report"),
        });
    }
    write_atomic(&root.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    write_atomic(&root.join("ablation.txt"), ablation_text(&rows).as_bytes())?;
    Ok(rows)
}

pub fn attention_csv(map: &Tensor) -> String {
    let w = *map.shape().last().expect("attention grid has a shape");
    let mut out = String::from("y,x,weight\n");
    for (i, v) in map.data().iter().enumerate() {
        writeln!(out, "{},{},{v}", i / w, i % w).expect("writing to a string");
    }
    out
}

/// Spatial attention per level for the three teacher pyramids and the
/// student pyramid of one scene; returns the written files.
pub fn export_attention_with(
    cfg: &ExperimentConfig,
    model: &StudentModel,
    data: &Dataset,
    teacher: &Teacher,
    out_dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    let scenes = split_scenes(data, cfg.export.split);
    let scene = scenes.get(cfg.export.scene).ok_or_else(|| {
        CliError::Data(format!(
            "scene {} does not exist in the {} split ({} scenes)",
            cfg.export.scene,
            cfg.export.split.name(),
            scenes.len()
        ))
    })?;
    let feats = teacher.features(scene)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &scene.rgb, &scene.tir)?;
    let student: Vec<Tensor> = out.pyramid.iter().map(|&v| tape.value(v).clone()).collect();

    create_dir(out_dir)?;
    let mut written = Vec::new();
    for (source, pyramid) in ATTENTION_SOURCES
        .iter()
        .zip([&feats.rgb, &feats.tir, &feats.fused, &student])
    {
        for (level, x) in pyramid.iter().enumerate() {
            let path = out_dir.join(format!("{source}_l{level}.csv"));
            let map = spatial_map(x)?.map;
            write_atomic(&path, attention_csv(&map).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn export_attention(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    let teacher = build_teacher(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let dir = checkpoint.parent().unwrap_or(Path::new(".")).join("attention");
    export_attention_with(cfg, &model, &data, &teacher, &dir)
}
