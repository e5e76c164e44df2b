use std::ops::Range;

use crate::data::vocab::{self, Vocab};
use crate::data::EventInstance;
use crate::error::Result;

/// A gold argument re-indexed into the marked context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedArgument {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

/// `<s> tokens[..t] <t> trigger </t> tokens[t..] </s>` with re-indexed spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedContext {
    pub ids: Vec<usize>,
    /// Trigger tokens, markers excluded.
    pub trigger: Range<usize>,
    pub arguments: Vec<MarkedArgument>,
    /// Original token index of each marked position; `None` for delimiters
    /// and markers.
    pub original: Vec<Option<usize>>,
}

impl PreparedContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn trigger_positions(&self) -> Vec<usize> {
        self.trigger.clone().collect()
    }

    /// Maps a marked-context span back to original token indices, trimming
    /// delimiters or markers at its edges. `None` if nothing remains.
    pub fn to_original_span(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let inner = self.original.get(start..end)?;
        let first = inner.iter().flatten().next()?;
        let last = inner.iter().rev().flatten().next()?;
        Some((*first, last + 1))
    }
}

/// Position of original token `i` in the marked context.
fn shift(i: usize, trigger: (usize, usize)) -> usize {
    if i < trigger.0 {
        i + 1
    } else if i < trigger.1 {
        i + 2
    } else {
        i + 3
    }
}

pub fn prepare_context(instance: &EventInstance, vocab: &Vocab) -> Result<PreparedContext> {
    instance.validate_bounds()?;
    let (ts, te) = instance.trigger;
    let toks = &instance.tokens;
    let mut ids = Vec::with_capacity(toks.len() + 4);
    let mut original = Vec::with_capacity(toks.len() + 4);
    let mut push = |id: usize, orig: Option<usize>| {
        ids.push(id);
        original.push(orig);
    };
    push(vocab::BOS, None);
    for (i, tok) in toks.iter().enumerate() {
        if i == ts {
            push(vocab::TRIGGER_OPEN, None);
        }
        push(vocab.id(tok), Some(i));
        if i + 1 == te {
            push(vocab::TRIGGER_CLOSE, None);
        }
    }
    push(vocab::EOS, None);
    let arguments = instance
        .arguments
        .iter()
        .map(|a| MarkedArgument {
            start: shift(a.start, instance.trigger),
            end: shift(a.end - 1, instance.trigger) + 1,
            role: a.role.clone(),
        })
        .collect();
    Ok(PreparedContext {
        ids,
        trigger: ts + 2..te + 2,
        arguments,
        original,
    })
}
