use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::context::MarkedArgument;
use crate::data::TemplateSpec;
use crate::error::{DegapError, Result};
use crate::numerics::{matmul, Tensor};

/// The abstain span.
pub const EMPTY_SPAN: (usize, usize) = (0, 0);

/// Chosen span of one slot, in marked-context coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl SlotSpan {
    pub fn is_empty(&self) -> bool {
        (self.start, self.end) == EMPTY_SPAN
    }
}

/// `(0,0)` followed by every `(l, r)` with `0 < r - l < msl` whose end logit
/// exists (`r < n`), in the tie-break order: ascending `l`, then `r`.
pub fn candidate_spans(n: usize, msl: usize) -> Vec<(usize, usize)> {
    let mut out = vec![EMPTY_SPAN];
    for l in 0..n {
        for r in l + 1..(l + msl).min(n) {
            out.push((l, r));
        }
    }
    out
}

/// Per-slot argmax of `start[l] + end[r]` over the candidate set. Ties keep
/// the earlier candidate, so `(0,0)` wins at equal score.
pub fn decode_logits(start: &Tensor, end: &Tensor, msl: usize) -> Vec<SlotSpan> {
    let (k, n) = (start.rows(), start.cols());
    debug_assert_eq!(end.shape, start.shape);
    (0..k)
        .map(|slot| {
            let (s, e) = (start.row(slot), end.row(slot));
            let mut best = SlotSpan {
                start: 0,
                end: 0,
                score: s[0] + e[0],
            };
            for l in 0..n {
                for r in l + 1..(l + msl).min(n) {
                    let score = s[l] + e[r];
                    if score > best.score {
                        best = SlotSpan { start: l, end: r, score };
                    }
                }
            }
            best
        })
        .collect()
}

/// Decodes from selectors `φ^start, φ^end: [K×m]` and context states `[n×m]`.
pub fn decode_spans(phi_start: &Tensor, phi_end: &Tensor, h_x: &Tensor, msl: usize) -> Result<Vec<SlotSpan>> {
    if h_x.rows() == 0 {
        return Err(DegapError::contract("decoding over an empty context"));
    }
    let ht = transpose(h_x);
    Ok(decode_logits(&matmul(phi_start, &ht)?, &matmul(phi_end, &ht)?, msl))
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let data = (0..c).flat_map(|j| (0..r).map(move |i| x.data[i * c + j])).collect();
    Tensor::new(vec![c, r], data).expect("transpose keeps size")
}

/// Assigns gold spans to slots. Within each role, golds go to that role's
/// slots by the injective assignment with the lowest total negative log
/// likelihood under `start_logp`/`end_logp` (`[K×n]` log-probabilities);
/// leftover slots get `(0,0)`. Ties go to the lexicographically first
/// assignment.
pub fn assign_gold_targets(
    template: &TemplateSpec,
    gold: &[MarkedArgument],
    start_logp: &Tensor,
    end_logp: &Tensor,
) -> Result<Vec<(usize, usize)>> {
    let mut targets = vec![EMPTY_SPAN; template.slots.len()];
    let mut by_role: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for a in gold {
        by_role.entry(&a.role).or_default().push((a.start, a.end));
    }
    let n = start_logp.cols();
    let nll = |k: usize, (s, e): (usize, usize)| -(start_logp.get(k, s) + end_logp.get(k, e));
    for (role, spans) in by_role {
        let slots = template.slots_for(role);
        if spans.len() > slots.len() {
            return Err(DegapError::validation(format!(
                "{} gold arguments with role {role} but template {} has {} such slots",
                spans.len(),
                template.event_type,
                slots.len()
            )));
        }
        if let Some(&(s, e)) = spans.iter().find(|&&(s, e)| s >= n || e >= n) {
            return Err(DegapError::contract(format!("gold span ({s}, {e}) outside {n} positions")));
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for chosen in slots.iter().copied().permutations(spans.len()) {
            let mut cost: f64 = slots.iter().filter(|k| !chosen.contains(k)).map(|&k| nll(k, EMPTY_SPAN)).sum();
            cost += chosen.iter().zip(&spans).map(|(&k, &span)| nll(k, span)).sum::<f64>();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, chosen));
            }
        }
        if let Some((_, chosen)) = best {
            for (k, span) in chosen.into_iter().zip(spans) {
                targets[k] = span;
            }
        }
    }
    Ok(targets)
}
