//! Two-stage training, the ablation runner and trace reporting.

mod ablation;
mod optim;
mod trace;
mod train;

pub use ablation::{
    evaluate_network, median, median_by_mode, read_results_csv, run_ablation, write_results_csv, AblationSpec,
    DataSource, Mode, NetSizes, ResultRow, RunOutcome, RunSeeds,
};
pub use optim::{OptimConfig, Sgd};
pub use trace::{emit_trace_summary, gated_noisy_fraction, summarize_trace, EpochSummary};
pub use train::{
    distill_student, predict_samples, teacher_logits, train_student_ce, train_teacher, Aug, InputKind,
    OracleTeacher, Teacher, TrainConfig, TrainLog, DESK_LEARNING_RATE, DESK_TEACHER_LEARNING_RATE,
};
