//! Optimizer, training loop, Arg-I/Arg-C scoring and the ablation harness.

mod ablation;
mod metrics;
mod optim;
mod trainer;

pub use ablation::{
    ablation_suite, mean_std, param_count, prefix_length_sweep, run_arm, sweep_csv, sweep_svg, AblationRow,
    AblationTable, ArmResult, Experiment, SweepPoint,
};
pub use metrics::{evaluate_f1, EvalReport, Prf, SubsetReport};
pub use optim::{clip_global_norm, global_grad_norm, AdamW, AdamWConfig, LinearSchedule};
pub use trainer::{dev_split, smooth, train, write_loss_curve, LossPoint, LossReduction, TrainConfig, TrainOutcome};
