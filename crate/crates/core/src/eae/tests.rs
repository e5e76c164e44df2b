use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::data::{generate_dataset, generate_ontology, vocab, Argument, CorpusConfig, EventInstance, OntologyConfig, TemplateVariant};
use crate::error::DegapError;
use crate::numerics::{Tape, Tensor};
use crate::oracle::{self, OraclePrefix};
use crate::prefixes::Variant;
use crate::rng::Rng;
use crate::transformer::{ForwardCtx, ModelConfig, NoPrefix};

fn small_ontology(seed: u64) -> crate::data::EventOntology {
    let cfg = OntologyConfig {
        n_types: 3,
        n_roles: 4,
        roles_per_type: 2,
        slot_multiplicity_prob: 0.5,
        triggers_per_type: 2,
        n_entities: 10,
        n_distractors: 6,
    };
    generate_ontology(&cfg, seed).unwrap()
}

fn small_corpus(task: &EaeTask, seed: u64) -> Vec<EventInstance> {
    let cfg = CorpusConfig {
        n_contexts: 6,
        context_len: 24,
        max_entity_len: 2,
        max_span_len: 4,
        ..CorpusConfig::default()
    };
    generate_dataset(&task.ontology, &cfg, seed).unwrap()
}

fn tiny_model(task: &EaeTask, variant: Variant, m: usize, heads: usize, std: f64) -> DegapModel {
    let cfg = ModelConfig {
        d_model: m,
        n_heads: heads,
        n_enc_layers: 2,
        n_dec_layers: 1,
        ffn_dim: 2 * m,
        vocab_size: task.vocab.len(),
        max_seq_len: 40,
        max_span_len: 4,
        len_ins: 4,
        len_tem: 4,
        init_std: std,
        variant,
        ..ModelConfig::default()
    };
    DegapModel::new(cfg, task.ontology.type_names(), 11).unwrap()
}

fn task() -> EaeTask {
    EaeTask::new(small_ontology(2), TemplateVariant::TypePart).unwrap()
}

fn instance(tokens: &[&str], trigger: (usize, usize), args: &[(usize, usize, &str)]) -> EventInstance {
    EventInstance {
        doc_id: "d".into(),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        trigger,
        event_type: "T".into(),
        arguments: args
            .iter()
            .map(|&(start, end, role)| Argument {
                start,
                end,
                role: role.into(),
            })
            .collect(),
    }
}

// ---- context preparation ----

#[test]
fn whole_context_trigger_puts_markers_at_the_edges() {
    let v = crate::data::Vocab::from_words(["a", "b"]);
    let p = prepare_context(&instance(&["a", "b"], (0, 2), &[]), &v).unwrap();
    let n = p.len();
    assert_eq!(n, 6);
    assert_eq!(p.ids[0], vocab::BOS);
    assert_eq!(p.ids[1], vocab::TRIGGER_OPEN);
    assert_eq!(p.ids[n - 2], vocab::TRIGGER_CLOSE);
    assert_eq!(p.ids[n - 1], vocab::EOS);
    assert_eq!(p.trigger, 2..4);
}

#[test]
fn spans_shift_by_the_tokens_inserted_before_them() {
    let v = crate::data::Vocab::from_words(["a", "b", "c", "d", "e"]);
    let inst = instance(&["a", "b", "c", "d", "e"], (2, 3), &[(0, 2, "X"), (3, 5, "Y")]);
    let p = prepare_context(&inst, &v).unwrap();
    // Before the trigger only <s> precedes the span; after it, <s> <t> </t>.
    assert_eq!((p.arguments[0].start, p.arguments[0].end), (1, 3));
    assert_eq!((p.arguments[1].start, p.arguments[1].end), (6, 8));
    assert_eq!(p.trigger, 4..5);
    assert_eq!(p.to_original_span(6, 8), Some((3, 5)));
    // Markers and delimiters at span edges are trimmed away.
    assert_eq!(p.to_original_span(3, 6), Some((2, 3)));
    assert_eq!(p.to_original_span(0, 1), None);
}

#[test]
fn out_of_bounds_trigger_is_a_validation_error() {
    let v = crate::data::Vocab::from_words(["a"]);
    let err = prepare_context(&instance(&["a"], (0, 3), &[]), &v).unwrap_err();
    assert!(matches!(err, DegapError::Validation { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn marked_spans_keep_their_surface_form(seed in 0u64..1000) {
        let t = task();
        for inst in small_corpus(&t, seed) {
            let p = prepare_context(&inst, &t.vocab).unwrap();
            for (a, m) in inst.arguments.iter().zip(&p.arguments) {
                let marked = t.vocab.decode(&p.ids[m.start..m.end]);
                prop_assert_eq!(marked, inst.surface(a.start, a.end).iter().map(String::as_str).collect::<Vec<_>>());
                prop_assert_eq!(p.to_original_span(m.start, m.end), Some((a.start, a.end)));
            }
            let trig = t.vocab.decode(&p.ids[p.trigger.clone()]);
            prop_assert_eq!(trig, inst.surface(inst.trigger.0, inst.trigger.1).iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}

// ---- decoding ----

/// Exhaustive search over every `(l, r)` pair plus the empty span, with the
/// documented tie order applied as a sort key.
fn brute_force(start: &[f64], end: &[f64], msl: usize) -> (usize, usize, f64) {
    let n = start.len();
    let mut cands = vec![(0usize, 0usize)];
    for l in 0..n {
        for r in 0..n {
            if r > l && r - l < msl {
                cands.push((l, r));
            }
        }
    }
    let best = cands.iter().map(|&(l, r)| start[l] + end[r]).fold(f64::NEG_INFINITY, f64::max);
    let winner = cands
        .iter()
        .filter(|&&(l, r)| start[l] + end[r] == best)
        .min_by_key(|&&(l, r)| ((l, r) != (0, 0), l, r))
        .unwrap();
    (winner.0, winner.1, best)
}

#[test]
fn candidate_enumeration_small_case() {
    let mut c = candidate_spans(3, 2);
    c.sort();
    assert_eq!(c, vec![(0, 0), (0, 1), (1, 2)]);
    let c = candidate_spans(5, 10);
    assert!(c.iter().skip(1).all(|&(l, r)| r > l && r < 5));
    assert_eq!(c.len(), 1 + 10);
}

#[test]
fn all_zero_logits_abstain() {
    let z = Tensor::zeros(&[3, 6]);
    for s in decode_logits(&z, &z, 4) {
        assert!(s.is_empty());
        assert_eq!(s.score, 0.0);
    }
}

#[test]
fn decode_matches_brute_force_including_ties() {
    let mut rng = Rng::seed_from_u64(4);
    for case in 0..100 {
        let msl = [2, 5, 10][case % 3];
        let (k, n) = (rng.random_range(1..4), rng.random_range(1..14));
        let mut logits = Tensor::randn(&[2 * k, n], 1.0, &mut rng);
        // Coarse integer logits make exact ties frequent.
        if case % 2 == 0 {
            logits.data.iter_mut().for_each(|v| *v = (*v * 1.5).round());
        }
        let start = Tensor::new(vec![k, n], logits.data[..k * n].to_vec()).unwrap();
        let end = Tensor::new(vec![k, n], logits.data[k * n..].to_vec()).unwrap();
        let got = decode_logits(&start, &end, msl);
        for slot in 0..k {
            let (l, r, score) = brute_force(start.row(slot), end.row(slot), msl);
            assert_eq!((got[slot].start, got[slot].end, got[slot].score), (l, r, score), "case {case} slot {slot}");
            assert!(got[slot].is_empty() || (got[slot].end - got[slot].start) < msl);
        }
    }
}

#[test]
fn decode_from_selectors_uses_dot_product_logits() {
    let mut rng = Rng::seed_from_u64(5);
    for case in 0..30 {
        let (k, n, m) = (rng.random_range(1..4), rng.random_range(1..12), 3);
        // Integer-valued inputs keep every dot product exact.
        let mut draw = |shape: &[usize]| {
            let mut t = Tensor::randn(shape, 1.0, &mut rng);
            t.data.iter_mut().for_each(|v| *v = v.round());
            t
        };
        let (ps, pe, hx) = (draw(&[k, m]), draw(&[k, m]), draw(&[n, m]));
        let got = decode_spans(&ps, &pe, &hx, 4).unwrap();
        for slot in 0..k {
            let logits = |phi: &Tensor| (0..n).map(|j| oracle::dot(phi.row(slot), hx.row(j))).collect::<Vec<_>>();
            let (l, r, score) = brute_force(&logits(&ps), &logits(&pe), 4);
            assert_eq!((got[slot].start, got[slot].end, got[slot].score), (l, r, score), "case {case}");
        }
    }
}

#[test]
fn decode_on_empty_context_is_an_error() {
    let phi = Tensor::zeros(&[1, 2]);
    assert!(decode_spans(&phi, &phi, &Tensor::zeros(&[0, 2]), 3).is_err());
}

// ---- selectors ----

#[test]
fn span_selectors_pool_slot_rows_and_mask() {
    let t = task();
    let mut model = tiny_model(&t, Variant::Full, 4, 2, 0.3);
    let template = t.templates.iter().next().unwrap().clone();
    let h_t = Tensor::randn(&[template.len(), 4], 1.0, &mut Rng::seed_from_u64(1));
    let set = |model: &mut DegapModel, v: f64| {
        for id in [model.net.head.w_start, model.net.head.w_end] {
            model.store.get_mut(id).data.iter_mut().for_each(|x| *x = v);
        }
    };
    set(&mut model, 1.0);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let h = ctx.tape.constant(&h_t);
    let (ps, _) = build_span_selectors(&mut ctx, &model.net.head, h, &template).unwrap();
    let phi = ctx.tape.tensor(ps);
    for (k, slot) in template.slots.iter().enumerate() {
        // Single-token slots: the pooled vector is the row itself.
        assert_eq!(slot.positions.len(), 1);
        assert_eq!(phi.row(k), h_t.row(slot.positions.start));
    }

    set(&mut model, 0.0);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let h = ctx.tape.constant(&h_t);
    let (ps, pe) = build_span_selectors(&mut ctx, &model.net.head, h, &template).unwrap();
    let hx = ctx.tape.constant(&Tensor::randn(&[7, 4], 1.0, &mut Rng::seed_from_u64(2)));
    let (ls, le) = span_logits(&mut ctx, ps, pe, hx).unwrap();
    assert!(ctx.tape.value(ls).iter().chain(ctx.tape.value(le)).all(|&v| v == 0.0));
}

// ---- gold assignment ----

fn two_slot_template() -> crate::data::TemplateSpec {
    let t = task();
    let found = t
        .templates
        .iter()
        .find(|tpl| {
            let roles: Vec<_> = tpl.slots.iter().map(|s| &s.role).collect();
            roles.iter().any(|r| tpl.slots_for(r).len() == 2)
        })
        .cloned();
    found.expect("fixture ontology has a repeated role")
}

fn marked(start: usize, end: usize, role: &str) -> MarkedArgument {
    MarkedArgument {
        start,
        end,
        role: role.into(),
    }
}

#[test]
fn assignment_cases() {
    let tpl = two_slot_template();
    let k = tpl.slots.len();
    let rep = tpl.slots.iter().find(|s| tpl.slots_for(&s.role).len() == 2).unwrap().role.clone();
    let single = tpl.slots.iter().find(|s| tpl.slots_for(&s.role).len() == 1).map(|s| s.role.clone());
    let mut rng = Rng::seed_from_u64(9);
    let ls = Tensor::randn(&[k, 8], 1.0, &mut rng);
    let le = Tensor::randn(&[k, 8], 1.0, &mut rng);

    // Nothing to assign: all empty.
    assert_eq!(assign_gold_targets(&tpl, &[], &ls, &le).unwrap(), vec![EMPTY_SPAN; k]);

    // One slot, one gold.
    if let Some(role) = &single {
        let idx = tpl.slots_for(role)[0];
        let t = assign_gold_targets(&tpl, &[marked(2, 4, role)], &ls, &le).unwrap();
        assert_eq!(t[idx], (2, 4));
    }

    // Two slots, one gold: compare both explicit assignments.
    let [a, b] = tpl.slots_for(&rep)[..] else { panic!() };
    let nll = |k: usize, (s, e): (usize, usize)| -(ls.get(k, s) + le.get(k, e));
    let cost_a = nll(a, (3, 5)) + nll(b, (0, 0));
    let cost_b = nll(b, (3, 5)) + nll(a, (0, 0));
    let t = assign_gold_targets(&tpl, &[marked(3, 5, &rep)], &ls, &le).unwrap();
    let expect = if cost_a <= cost_b { a } else { b };
    assert_eq!(t[expect], (3, 5));
    assert_eq!(t[if expect == a { b } else { a }], EMPTY_SPAN);

    // Too many golds for the slots.
    let err = assign_gold_targets(&tpl, &[marked(1, 2, &rep), marked(3, 4, &rep), marked(5, 6, &rep)], &ls, &le);
    assert!(matches!(err, Err(DegapError::Validation { .. })));
}

// ---- loss ----

fn loss_of(start: &Tensor, end: &Tensor, targets: &[(usize, usize)]) -> f64 {
    let mut tape = Tape::new();
    let (s, e) = (tape.constant(start), tape.constant(end));
    let l = compute_loss(&mut tape, s, e, targets).unwrap();
    tape.value(l)[0]
}

#[test]
fn uniform_logits_cost_two_log_n_per_slot() {
    let z = Tensor::zeros(&[3, 7]);
    let l = loss_of(&z, &z, &[(0, 0), (1, 2), (6, 6)]);
    assert!((l - 3.0 * 2.0 * 7f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_vanishes_as_margin_grows() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let mut s = Tensor::zeros(&[1, 4]);
        s.data[2] = margin;
        let l = loss_of(&s, &s, &[(2, 2)]);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-20);
}

#[test]
fn loss_matches_direct_formula() {
    let mut rng = Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (k, n) = (rng.random_range(1..5), rng.random_range(2..10));
        let s = Tensor::randn(&[k, n], 2.0, &mut rng);
        let e = Tensor::randn(&[k, n], 2.0, &mut rng);
        let targets: Vec<_> = (0..k).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let direct: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| -(oracle::log_softmax(s.row(i))[a] + oracle::log_softmax(e.row(i))[b]))
            .sum();
        assert!((loss_of(&s, &e, &targets) - direct).abs() < 1e-10);
    }
}

#[test]
fn out_of_range_target_is_a_contract_violation() {
    let z = Tensor::zeros(&[1, 3]);
    let mut tape = Tape::new();
    let (s, e) = (tape.constant(&z), tape.constant(&z));
    assert!(matches!(compute_loss(&mut tape, s, e, &[(0, 3)]), Err(DegapError::Contract(_))));
}

// ---- passes ----

#[test]
fn no_prefix_variant_is_the_plain_backbone() {
    let t = task();
    let model = tiny_model(&t, Variant::NoPrefix, 4, 2, 0.3);
    let inst = &small_corpus(&t, 1)[0];
    let p = prepare_context(inst, &t.vocab).unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let (enc, hx) = run_context_pass(&mut ctx, &model.net, &p, &inst.event_type).unwrap();
    let plain_enc = model.net.backbone.encoder_forward(&mut ctx, &p.ids, &NoPrefix).unwrap();
    let plain = model.net.backbone.decoder_forward(&mut ctx, plain_enc, plain_enc, &NoPrefix).unwrap();
    assert_eq!(ctx.tape.shape(hx), &[p.len(), 4]);
    assert_eq!(ctx.tape.value(enc), ctx.tape.value(plain_enc));
    assert_eq!(ctx.tape.value(hx), ctx.tape.value(plain));
}

#[test]
fn both_passes_match_straight_line_oracle() {
    let t = task();
    let model = tiny_model(&t, Variant::Full, 4, 1, 0.4);
    let inst = small_corpus(&t, 3).into_iter().next().unwrap();
    let template = t.templates.get(&inst.event_type).unwrap();
    let p = prepare_context(&inst, &t.vocab).unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let enc = encode(&mut ctx, &model.net, template, &p).unwrap();

    let c = &model.config;
    let st = &model.store;
    let ins = OraclePrefix {
        scope: Some("ins".into()),
        gate: Some("ins"),
        guide: p.trigger_positions(),
    };
    let x_enc = oracle::encoder(st, 1, c.n_enc_layers, c.layer_norm_eps, &p.ids, &ins);
    let x = oracle::decoder(st, 1, c.n_dec_layers, c.layer_norm_eps, &x_enc, &x_enc, &ins);
    let tem = OraclePrefix {
        scope: Some("tem".into()),
        gate: Some("tem"),
        guide: template.type_positions.clone(),
    };
    let t_enc = oracle::encoder(st, 1, c.n_enc_layers, c.layer_norm_eps, &template.tokens, &tem);
    let h_t = oracle::decoder(st, 1, c.n_dec_layers, c.layer_norm_eps, &t_enc, &x_enc, &tem);

    let close = |v: crate::numerics::Var, want: &oracle::M| ctx.tape.tensor(v).max_abs_diff(&Tensor::from_rows(want).unwrap()) < 1e-12;
    assert!(close(enc.h_x_enc, &x_enc));
    assert!(close(enc.h_x, &x));
    assert!(close(enc.h_t, &h_t));
    assert_eq!(ctx.tape.shape(enc.h_t), &[template.len(), 4]);

    let ws = oracle::pv(st, "head.w_start");
    for (k, slot) in template.slots.iter().enumerate() {
        let hs = oracle::mean_rows(&h_t, &slot.positions.clone().collect::<Vec<_>>());
        let phi: Vec<f64> = hs.iter().zip(&ws).map(|(a, b)| a * b).collect();
        for (j, row) in x.iter().enumerate() {
            let got = ctx.tape.value(enc.start_logits)[k * p.len() + j];
            assert!((got - oracle::dot(&phi, row)).abs() < 1e-12);
        }
    }
}

#[test]
fn only_iop_template_pass_has_no_prefix() {
    let t = task();
    let model = tiny_model(&t, Variant::OnlyIop, 4, 2, 0.3);
    let template = t.templates.iter().next().unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let src = ctx.tape.constant(&Tensor::randn(&[5, 4], 1.0, &mut Rng::seed_from_u64(1)));
    let h_t = run_template_pass(&mut ctx, &model.net, template, src).unwrap();
    let e = model.net.backbone.encoder_forward(&mut ctx, &template.tokens, &NoPrefix).unwrap();
    let d = model.net.backbone.decoder_forward(&mut ctx, e, src, &NoPrefix).unwrap();
    assert_eq!(ctx.tape.value(h_t), ctx.tape.value(d));
}

#[test]
fn empty_event_predicts_without_error_and_loss_is_positive() {
    let t = task();
    let model = tiny_model(&t, Variant::Full, 8, 2, 0.02);
    let mut inst = small_corpus(&t, 5).remove(0);
    inst.arguments.clear();
    let pred = predict_instance(&model.store, &model.net, &t, &inst).unwrap();
    assert!(pred.predictions.iter().all(|a| a.end > a.start && a.end <= inst.tokens.len()));
    let l = instance_loss(&model.store, &model.net, &t, &inst, None).unwrap();
    assert!(l.is_finite() && l > 0.0);
}

#[test]
fn predictions_are_deduplicated_and_within_bounds() {
    let t = task();
    let model = tiny_model(&t, Variant::Full, 8, 2, 0.5);
    for inst in small_corpus(&t, 8) {
        let p = predict_instance(&model.store, &model.net, &t, &inst).unwrap();
        let mut keys: Vec<_> = p.predictions.iter().map(|a| (a.start, a.end, a.role.clone())).collect();
        let before = keys.len();
        keys.dedup();
        assert_eq!(keys.len(), before);
        for a in &p.predictions {
            assert!(a.start < a.end && a.end <= inst.tokens.len());
            assert!(a.end - a.start < model.config.max_span_len);
        }
    }
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let t = task();
    for variant in [Variant::Full, Variant::Tst, Variant::NoPrefix] {
        let model = tiny_model(&t, variant, 4, 2, 0.3);
        let a = model.to_json().unwrap();
        let back = DegapModel::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        let inst = &small_corpus(&t, 2)[0];
        assert_eq!(
            predict_instance(&model.store, &model.net, &t, inst).unwrap(),
            predict_instance(&back.store, &back.net, &t, inst).unwrap()
        );
    }
}

#[test]
fn checkpoint_with_foreign_parameters_is_rejected() {
    let t = task();
    let mut ckpt = tiny_model(&t, Variant::Full, 4, 2, 0.3).to_checkpoint();
    ckpt.config.variant = Variant::NoPrefix;
    assert!(matches!(DegapModel::from_checkpoint(ckpt), Err(DegapError::Config(_))));
}

#[test]
fn vocab_mismatch_is_reported() {
    let t = task();
    let model = tiny_model(&t, Variant::Full, 4, 2, 0.3);
    let other = crate::data::Vocab::from_words(["x"]);
    let err = model.check_vocab(&other).unwrap_err();
    assert!(err.to_string().contains("mismatch"));
}

// ---- gradients ----

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let t = task();
    for (variant, samples) in [
        (Variant::Full, 120),
        (Variant::Tst, 40),
        (Variant::SharedPrefix, 30),
        (Variant::NoGating, 30),
        (Variant::SentenceGuided, 30),
    ] {
        let mut model = tiny_model(&t, variant, 8, 2, 0.3);
        let data: Vec<_> = small_corpus(&t, 4).into_iter().take(3).collect();
        let cfg = GradCheckConfig {
            samples,
            ..GradCheckConfig::default()
        };
        let r = grad_check(&mut model, &t, &data, &cfg).unwrap();
        assert!(r.passed(1e-4), "{variant}: {r:?}");
        if variant == Variant::Full {
            for fam in ["embedding", "attention", "ffn", "layer-norm", "prefix", "gate-W", "gate-lambda", "span-head"] {
                assert!(r.families.contains_key(fam), "{fam} not sampled");
            }
        }
    }
}

#[test]
fn per_type_template_gradients_stay_with_their_type() {
    let t = task();
    let mut model = tiny_model(&t, Variant::Tst, 4, 2, 0.3);
    let inst = small_corpus(&t, 6).remove(0);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.store);
    let net = model.net.clone();
    let out = forward_full(&mut ctx, &net, &t, &inst, Mode::Train, None).unwrap();
    tape.backward(out.loss.unwrap(), &mut model.store).unwrap();
    let mut own = 0;
    for (_, name, p) in model.store.iter().filter(|(_, n, _)| n.starts_with("prefix.") && n.contains(".tem.")) {
        let norm: f64 = p.grad.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
        if name.contains(&format!(".type.{}.", inst.event_type)) {
            own += usize::from(norm > 0.0);
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    assert!(own > 0);
}
