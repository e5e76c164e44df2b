//! Dual-pass extraction model: marked context, template pass, span
//! selectors, decoding and loss.

mod context;
mod decode;
mod forward;
mod gradcheck;
mod model;

pub use context::{prepare_context, MarkedArgument, PreparedContext};
pub use decode::{assign_gold_targets, candidate_spans, decode_logits, decode_spans, SlotSpan, EMPTY_SPAN};
pub use forward::{
    build_span_selectors, compute_loss, encode, forward_full, instance_loss, predict_all, predict_instance,
    read_predictions, run_context_pass, run_template_pass, span_logits, write_predictions, EaeTask, Encoded,
    ForwardOutput, InstancePrediction, Mode, PredictedArgument, SpanPrediction,
};
pub use gradcheck::{grad_check, grad_check_fixture, param_family, FamilyStats, GradCheckConfig, GradCheckFixture, GradCheckReport};
pub use model::{Checkpoint, DegapModel, Network, SpanHead, StoredParam};

#[cfg(test)]
mod tests;
