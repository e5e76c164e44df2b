use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{overlapping_events, EventInstance};
use crate::eae::InstancePrediction;
use crate::error::{DegapError, Result};

/// Micro-averaged precision/recall/F1 with the supporting counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(tp, predicted), ratio(tp, gold));
        Self {
            precision: p,
            recall: r,
            f1: if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 },
            tp,
            predicted,
            gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetReport {
    pub events: usize,
    pub arg_i: Prf,
    pub arg_c: Prf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub events: usize,
    pub arg_i: Prf,
    pub arg_c: Prf,
    /// `single`, `multi`, `overlapping`, `non-overlapping`.
    pub breakdown: BTreeMap<String, SubsetReport>,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    events: usize,
    i: (usize, usize, usize),
    c: (usize, usize, usize),
}

impl Counts {
    fn add(&mut self, other: &Counts) {
        self.events += other.events;
        for (a, b) in [(&mut self.i, other.i), (&mut self.c, other.c)] {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }

    fn report(&self) -> SubsetReport {
        SubsetReport {
            events: self.events,
            arg_i: Prf::from_counts(self.i.0, self.i.1, self.i.2),
            arg_c: Prf::from_counts(self.c.0, self.c.1, self.c.2),
        }
    }
}

fn event_counts(pred: &InstancePrediction, gold: &EventInstance) -> Counts {
    let p_span: BTreeSet<_> = pred.predictions.iter().map(|a| (a.start, a.end)).collect();
    let g_span: BTreeSet<_> = gold.arguments.iter().map(|a| (a.start, a.end)).collect();
    let p_role: BTreeSet<_> = pred.predictions.iter().map(|a| (a.start, a.end, a.role.as_str())).collect();
    let g_role: BTreeSet<_> = gold.arguments.iter().map(|a| (a.start, a.end, a.role.as_str())).collect();
    Counts {
        events: 1,
        i: (p_span.intersection(&g_span).count(), p_span.len(), g_span.len()),
        c: (p_role.intersection(&g_role).count(), p_role.len(), g_role.len()),
    }
}

/// Arg-I matches spans, Arg-C matches span and role; both micro-averaged
/// over events. Predictions align with golds by position and must carry
/// the same doc id, event type and trigger.
pub fn evaluate_f1(predictions: &[InstancePrediction], golds: &[EventInstance]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(DegapError::validation(format!(
            "{} predictions for {} gold events",
            predictions.len(),
            golds.len()
        )));
    }
    let mut per_event = Vec::with_capacity(golds.len());
    for (i, (p, g)) in predictions.iter().zip(golds).enumerate() {
        if p.doc_id != g.doc_id || p.event_type != g.event_type || p.trigger != g.trigger {
            return Err(DegapError::validation(format!(
                "prediction {i} ({} {} {:?}) does not match gold event ({} {} {:?})",
                p.doc_id, p.event_type, p.trigger, g.doc_id, g.event_type, g.trigger
            )));
        }
        per_event.push(event_counts(p, g));
    }

    // Group events by context for the breakdowns.
    let mut contexts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in golds.iter().enumerate() {
        contexts.entry(&g.doc_id).or_default().push(i);
    }
    let mut total = Counts::default();
    let mut subsets: BTreeMap<&str, Counts> = ["single", "multi", "overlapping", "non-overlapping"]
        .into_iter()
        .map(|k| (k, Counts::default()))
        .collect();
    for idx in contexts.values() {
        let events: Vec<&EventInstance> = idx.iter().map(|&i| &golds[i]).collect();
        let overlap = overlapping_events(&events);
        for (&i, shared) in idx.iter().zip(overlap) {
            let c = &per_event[i];
            total.add(c);
            subsets.get_mut(if idx.len() == 1 { "single" } else { "multi" }).unwrap().add(c);
            subsets.get_mut(if shared { "overlapping" } else { "non-overlapping" }).unwrap().add(c);
        }
    }
    let all = total.report();
    Ok(EvalReport {
        events: all.events,
        arg_i: all.arg_i,
        arg_c: all.arg_c,
        breakdown: subsets.into_iter().map(|(k, c)| (k.to_owned(), c.report())).collect(),
    })
}
