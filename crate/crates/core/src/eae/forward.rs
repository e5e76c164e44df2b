use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::context::{prepare_context, PreparedContext};
use super::decode::{assign_gold_targets, decode_logits, SlotSpan};
use super::model::{Network, SpanHead};
use crate::data::{EventInstance, EventOntology, TemplateBook, TemplateSpec, TemplateVariant, Vocab};
use crate::error::{DegapError, Result};
use crate::numerics::{kernels, ParamStore, Tape, Tensor, Var};
use crate::prefixes::Family;
use crate::transformer::ForwardCtx;

/// Ontology-derived inputs shared by every forward pass.
#[derive(Debug, Clone)]
pub struct EaeTask {
    pub ontology: EventOntology,
    pub vocab: Vocab,
    pub templates: TemplateBook,
}

impl EaeTask {
    pub fn new(ontology: EventOntology, variant: TemplateVariant) -> Result<Self> {
        ontology.validate()?;
        let vocab = ontology.vocab();
        let templates = TemplateBook::build(&ontology, &vocab, variant)?;
        Ok(Self {
            ontology,
            vocab,
            templates,
        })
    }
}

/// Context encoder/decoder with instance prefixes guided by the trigger.
/// Returns `(H_X^enc, H_X)`.
pub fn run_context_pass(ctx: &mut ForwardCtx<'_>, net: &Network, prepared: &PreparedContext, event_type: &str) -> Result<(Var, Var)> {
    let guide = prepared.trigger_positions();
    let view = net.bank.view(Family::Ins, event_type, &guide);
    let h_enc = net.backbone.encoder_forward(ctx, &prepared.ids, &view)?;
    let h_x = net.backbone.decoder_forward(ctx, h_enc, h_enc, &view)?;
    Ok((h_enc, h_x))
}

/// Template encoder/decoder with template prefixes guided by the type
/// tokens; the decoder cross-attends to the context encoding.
pub fn run_template_pass(ctx: &mut ForwardCtx<'_>, net: &Network, template: &TemplateSpec, h_x_enc: Var) -> Result<Var> {
    let view = net.bank.view(Family::Tem, &template.event_type, &template.type_positions);
    let h_enc = net.backbone.encoder_forward(ctx, &template.tokens, &view)?;
    net.backbone.decoder_forward(ctx, h_enc, h_x_enc, &view)
}

/// `φ_k = mean(H_T[slot k]) ⊙ w`, returned as `[K×m]` start and end stacks.
pub fn build_span_selectors(ctx: &mut ForwardCtx<'_>, head: &SpanHead, h_t: Var, template: &TemplateSpec) -> Result<(Var, Var)> {
    let groups = template.slots.iter().map(|s| s.positions.clone().collect()).collect();
    let pooled = ctx.tape.pool_rows(h_t, groups)?;
    let (ws, we) = (ctx.param(head.w_start), ctx.param(head.w_end));
    Ok((ctx.tape.mul_row(pooled, ws)?, ctx.tape.mul_row(pooled, we)?))
}

/// Start/end logits `φ · H_Xᵀ`, each `[K×n]`.
pub fn span_logits(ctx: &mut ForwardCtx<'_>, phi_start: Var, phi_end: Var, h_x: Var) -> Result<(Var, Var)> {
    Ok((ctx.tape.matmul_t(phi_start, h_x)?, ctx.tape.matmul_t(phi_end, h_x)?))
}

/// `-Σ_k [log P_k^start(s_k) + log P_k^end(e_k)]`.
pub fn compute_loss(tape: &mut Tape, start_logits: Var, end_logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let (k, n) = (tape.rows(start_logits), tape.cols(start_logits));
    if targets.len() != k {
        return Err(DegapError::contract(format!("{} targets for {k} slots", targets.len())));
    }
    if let Some(&(s, e)) = targets.iter().find(|&&(s, e)| s >= n || e >= n) {
        return Err(DegapError::contract(format!("target ({s}, {e}) outside {n} positions")));
    }
    let ls = tape.log_softmax_rows(start_logits);
    let le = tape.log_softmax_rows(end_logits);
    let si: Vec<usize> = targets.iter().enumerate().map(|(i, t)| i * n + t.0).collect();
    let ei: Vec<usize> = targets.iter().enumerate().map(|(i, t)| i * n + t.1).collect();
    let gs = tape.gather(ls, &si)?;
    let ge = tape.gather(le, &ei)?;
    let total = tape.add(gs, ge)?;
    let total = tape.sum(total);
    Ok(tape.scale(total, -1.0))
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    out.data.chunks_mut(c).for_each(kernels::log_softmax_in_place);
    out
}

/// Tape handles of one instance's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h_x_enc: Var,
    pub h_x: Var,
    pub h_t: Var,
    pub phi_start: Var,
    pub phi_end: Var,
    pub start_logits: Var,
    pub end_logits: Var,
}

pub fn encode(ctx: &mut ForwardCtx<'_>, net: &Network, template: &TemplateSpec, prepared: &PreparedContext) -> Result<Encoded> {
    let (h_x_enc, h_x) = run_context_pass(ctx, net, prepared, &template.event_type)?;
    let h_t = run_template_pass(ctx, net, template, h_x_enc)?;
    let (phi_start, phi_end) = build_span_selectors(ctx, &net.head, h_t, template)?;
    let (start_logits, end_logits) = span_logits(ctx, phi_start, phi_end, h_x)?;
    Ok(Encoded {
        h_x_enc,
        h_x,
        h_t,
        phi_start,
        phi_end,
        start_logits,
        end_logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Predict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedArgument {
    pub start: usize,
    pub end: usize,
    pub role: String,
    pub score: f64,
}

/// Per-slot choices (marked-context coordinates) and the deduplicated
/// argument set in original token coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub slots: Vec<(String, SlotSpan)>,
    pub arguments: Vec<PredictedArgument>,
}

fn collect_prediction(template: &TemplateSpec, prepared: &PreparedContext, slots: Vec<SlotSpan>) -> SpanPrediction {
    let mut best: BTreeMap<(usize, usize, String), f64> = BTreeMap::new();
    for (slot, span) in template.slots.iter().zip(&slots) {
        if span.is_empty() {
            continue;
        }
        if let Some((s, e)) = prepared.to_original_span(span.start, span.end) {
            let score = best.entry((s, e, slot.role.clone())).or_insert(f64::NEG_INFINITY);
            *score = score.max(span.score);
        }
    }
    SpanPrediction {
        slots: template.slots.iter().map(|s| s.role.clone()).zip(slots).collect(),
        arguments: best
            .into_iter()
            .map(|((start, end, role), score)| PredictedArgument { start, end, role, score })
            .collect(),
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Present in training mode.
    pub loss: Option<Var>,
    pub targets: Vec<(usize, usize)>,
    pub prediction: SpanPrediction,
}

/// One event per forward. `targets` overrides gold assignment (used to
/// keep the assignment fixed while perturbing parameters).
pub fn forward_full(
    ctx: &mut ForwardCtx<'_>,
    net: &Network,
    task: &EaeTask,
    instance: &EventInstance,
    mode: Mode,
    targets: Option<&[(usize, usize)]>,
) -> Result<ForwardOutput> {
    let template = task.templates.get(&instance.event_type)?;
    let prepared = prepare_context(instance, &task.vocab)?;
    let enc = encode(ctx, net, template, &prepared)?;
    let start = ctx.tape.tensor(enc.start_logits);
    let end = ctx.tape.tensor(enc.end_logits);
    let prediction = collect_prediction(template, &prepared, decode_logits(&start, &end, net.max_span_len));
    if mode == Mode::Predict {
        return Ok(ForwardOutput {
            loss: None,
            targets: Vec::new(),
            prediction,
        });
    }
    let targets = match targets {
        Some(t) => t.to_vec(),
        None => assign_gold_targets(template, &prepared.arguments, &log_softmax_rows(&start), &log_softmax_rows(&end))?,
    };
    let loss = compute_loss(ctx.tape, enc.start_logits, enc.end_logits, &targets)?;
    Ok(ForwardOutput {
        loss: Some(loss),
        targets,
        prediction,
    })
}

/// Loss value without keeping the tape.
pub fn instance_loss(store: &ParamStore, net: &Network, task: &EaeTask, instance: &EventInstance, targets: Option<&[(usize, usize)]>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, store);
    let out = forward_full(&mut ctx, net, task, instance, Mode::Train, targets)?;
    Ok(ctx.tape.value(out.loss.expect("training mode yields a loss"))[0])
}

/// Prediction dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancePrediction {
    pub doc_id: String,
    pub event_type: String,
    pub trigger: (usize, usize),
    pub predictions: Vec<PredictedArgument>,
}

pub fn predict_instance(store: &ParamStore, net: &Network, task: &EaeTask, instance: &EventInstance) -> Result<InstancePrediction> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, store);
    let out = forward_full(&mut ctx, net, task, instance, Mode::Predict, None)?;
    Ok(InstancePrediction {
        doc_id: instance.doc_id.clone(),
        event_type: instance.event_type.clone(),
        trigger: instance.trigger,
        predictions: out.prediction.arguments,
    })
}

pub fn predict_all(store: &ParamStore, net: &Network, task: &EaeTask, instances: &[EventInstance]) -> Result<Vec<InstancePrediction>> {
    instances.iter().map(|i| predict_instance(store, net, task, i)).collect()
}

pub fn write_predictions(path: &Path, preds: &[InstancePrediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DegapError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| DegapError::io(path, e))?;
    }
    out.flush().map_err(|e| DegapError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<InstancePrediction>> {
    let file = std::fs::File::open(path).map_err(|e| DegapError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DegapError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DegapError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
