//! Desk-scale teacher/student detection harness: synthetic day/night RGB–TIR
//! scenes, a frozen filter-bank teacher, a small fused-input student and the
//! distillation training loop.

pub mod checkpoint;
pub mod detect;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod train;

pub use checkpoint::Checkpoint;
pub use scene::{generate_scene, generate_split, DatasetSpec, Lighting, Scene};
pub use student::{StudentModel, StudentSpec};
pub use teacher::{Teacher, TeacherFeatures, TeacherSpec};
pub use train::{
    evaluate_detections, evaluate_split, load_student, run_distillation, teacher_pyramids, Dataset,
    RunResult, SplitReport, TrainConfig, Trainer,
};
