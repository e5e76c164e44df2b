//! Synthetic corpus generation.
//!
//! A context is a sequence of event clauses. Each clause realizes the
//! event's roles in the same order as its template schema:
//!
//! ```text
//! [subject entity] trigger conn_1 [entity] conn_2 [entity] ...
//! ```
//!
//! Clauses are joined by `.`; an overlapping pair shares its subject
//! entity and is joined by `and`, so both events annotate the same span.
//! Distractor words are sprinkled between units afterwards.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::instance::{Argument, EventInstance};
use super::ontology::{EventOntology, EventTypeDef};
use crate::error::{DegapError, Result};
use crate::rng::{rng_for, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_contexts: usize,
    /// `events_per_context_dist[i]` is the probability of `i + 1` events.
    pub events_per_context_dist: Vec<f64>,
    /// Probability that a multi-event context has two events sharing an argument.
    pub overlap_prob: f64,
    /// Probability of a distractor word in front of each unit.
    pub distractor_rate: f64,
    /// Maximum context length in tokens.
    pub context_len: usize,
    pub max_entity_len: usize,
    /// Probability that a non-subject role is realized.
    pub role_fill_prob: f64,
    /// Probability that the subject role is realized.
    pub subject_fill_prob: f64,
    /// Probability that a role with two slots gets two entities.
    pub second_filler_prob: f64,
    /// Upper bound on span length is `max_span_len - 1` tokens.
    pub max_span_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_contexts: 1000,
            events_per_context_dist: vec![0.6, 0.4],
            overlap_prob: 0.3,
            distractor_rate: 0.15,
            context_len: 64,
            max_entity_len: 3,
            role_fill_prob: 0.75,
            subject_fill_prob: 0.9,
            second_filler_prob: 0.5,
            max_span_len: 10,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let probs = [
            ("overlap_prob", self.overlap_prob),
            ("distractor_rate", self.distractor_rate),
            ("role_fill_prob", self.role_fill_prob),
            ("subject_fill_prob", self.subject_fill_prob),
            ("second_filler_prob", self.second_filler_prob),
        ];
        if let Some((name, _)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(DegapError::config(format!("{name} must lie in [0, 1]")));
        }
        if self.events_per_context_dist.is_empty()
            || self.events_per_context_dist.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || self.events_per_context_dist.iter().sum::<f64>() <= 0.0
        {
            return Err(DegapError::config("events_per_context_dist must be non-negative with positive mass"));
        }
        if self.max_entity_len == 0 || self.max_entity_len + 1 > self.max_span_len {
            return Err(DegapError::config(format!(
                "max_entity_len must be in 1..={}",
                self.max_span_len.saturating_sub(1)
            )));
        }
        Ok(())
    }

    fn max_events(&self) -> usize {
        self.events_per_context_dist
            .iter()
            .rposition(|&p| p > 0.0)
            .map_or(0, |i| i + 1)
    }
}

/// Longest clause (in tokens) an event type can produce.
fn max_clause_len(def: &EventTypeDef, max_entity_len: usize) -> usize {
    let args: usize = def
        .slot_counts
        .iter()
        .enumerate()
        .map(|(i, &c)| usize::from(i > 0) + c * max_entity_len + (c - 1))
        .sum();
    args + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Trigger(usize),
    Arg(usize, usize),
}

struct Unit {
    words: Vec<String>,
    tags: Vec<Tag>,
}

impl Unit {
    fn plain(word: &str) -> Self {
        Self {
            words: vec![word.to_owned()],
            tags: Vec::new(),
        }
    }
}

struct ClausePlan<'a> {
    def: &'a EventTypeDef,
    /// Entities per role index; empty when the role is not realized.
    fillers: Vec<Vec<Vec<String>>>,
    trigger: String,
}

fn sample_entity(rng: &mut Rng, ontology: &EventOntology, max_len: usize) -> Vec<String> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| ontology.lexicon.entities.choose(rng).expect("non-empty entity lexicon").clone())
        .collect()
}

fn plan_clause<'a>(
    rng: &mut Rng,
    ontology: &'a EventOntology,
    def: &'a EventTypeDef,
    config: &CorpusConfig,
    force_single_subject: bool,
) -> ClausePlan<'a> {
    let mut fillers = Vec::with_capacity(def.roles.len());
    for (i, &slots) in def.slot_counts.iter().enumerate() {
        let present = if i == 0 {
            force_single_subject || rng.random_bool(config.subject_fill_prob)
        } else {
            rng.random_bool(config.role_fill_prob)
        };
        let count = match present {
            false => 0,
            true if i == 0 && force_single_subject => 1,
            true if slots >= 2 && rng.random_bool(config.second_filler_prob) => 2,
            true => 1,
        };
        fillers.push(
            (0..count)
                .map(|_| sample_entity(rng, ontology, config.max_entity_len))
                .collect(),
        );
    }
    let trigger = def.triggers.choose(rng).cloned().unwrap_or_else(|| def.name.clone());
    ClausePlan { def, fillers, trigger }
}

/// Connective preceding role `i` in the schema of `def`.
fn connective(def: &EventTypeDef, role_index: usize) -> String {
    // The schema is `{R0} .. trigger conn_1 {R1} .. conn_2 {R2} ..`: the word
    // right before the first slot of role i is its connective.
    let words: Vec<&str> = def.schema_text.split_whitespace().collect();
    let target = format!("{{{}}}", def.roles[role_index]);
    let pos = words.iter().position(|w| *w == target).expect("schema mentions every role");
    words[pos - 1].to_owned()
}

fn emit_role(units: &mut Vec<Unit>, fillers: &[Vec<String>], event: usize, role: usize) {
    for (j, ent) in fillers.iter().enumerate() {
        if j > 0 {
            units.push(Unit::plain("and"));
        }
        units.push(Unit {
            words: ent.clone(),
            tags: vec![Tag::Arg(event, role)],
        });
    }
}

fn emit_clause(units: &mut Vec<Unit>, plan: &ClausePlan<'_>, event: usize, skip_subject: bool) {
    if !skip_subject {
        emit_role(units, &plan.fillers[0], event, 0);
    }
    units.push(Unit {
        words: vec![plan.trigger.clone()],
        tags: vec![Tag::Trigger(event)],
    });
    for role in 1..plan.def.roles.len() {
        if plan.fillers[role].is_empty() {
            continue;
        }
        units.push(Unit::plain(&connective(plan.def, role)));
        emit_role(units, &plan.fillers[role], event, role);
    }
}

/// Generates `config.n_contexts` contexts and returns one instance per event.
/// Instances of the same context share `doc_id` and appear consecutively.
pub fn generate_dataset(ontology: &EventOntology, config: &CorpusConfig, seed: u64) -> Result<Vec<EventInstance>> {
    config.validate()?;
    ontology.validate()?;
    if ontology.event_types.is_empty() {
        return Err(DegapError::Generation("ontology has no event types".into()));
    }
    let max_events = config.max_events();
    let worst_clause = ontology
        .event_types
        .iter()
        .map(|d| max_clause_len(d, config.max_entity_len))
        .max()
        .unwrap_or(0);
    let worst = max_events * worst_clause + max_events.saturating_sub(1);
    if worst > config.context_len {
        return Err(DegapError::Generation(format!(
            "context_len {} cannot fit {max_events} events (worst case needs {worst} tokens)",
            config.context_len
        )));
    }

    let mut rng = rng_for(seed, Stream::Corpus);
    let counts = WeightedIndex::new(&config.events_per_context_dist)
        .map_err(|e| DegapError::config(format!("events_per_context_dist: {e}")))?;
    let width = config.n_contexts.max(1).to_string().len().max(5);

    let mut out = Vec::new();
    for doc in 0..config.n_contexts {
        let k = counts.sample(&mut rng) + 1;
        let shared = k >= 2 && rng.random_bool(config.overlap_prob);
        let plans: Vec<ClausePlan<'_>> = (0..k)
            .map(|e| {
                let def = ontology.event_types.choose(&mut rng).expect("non-empty");
                plan_clause(&mut rng, ontology, def, config, shared && e < 2)
            })
            .collect();

        let mut units = Vec::new();
        for (e, plan) in plans.iter().enumerate() {
            match (e, shared) {
                (0, _) => {}
                (1, true) => units.push(Unit::plain("and")),
                _ => units.push(Unit::plain(".")),
            }
            emit_clause(&mut units, plan, e, shared && e == 1);
        }
        if shared {
            // The shared subject is annotated for both events.
            let subject = units
                .iter_mut()
                .find(|u| u.tags.contains(&Tag::Arg(0, 0)))
                .expect("shared subject is realized");
            subject.tags.push(Tag::Arg(1, 0));
        }

        let doc_id = format!("doc{doc:0width$}");
        out.extend(realize(&mut rng, ontology, config, &doc_id, &plans, &units));
    }
    Ok(out)
}

fn realize(
    rng: &mut Rng,
    ontology: &EventOntology,
    config: &CorpusConfig,
    doc_id: &str,
    plans: &[ClausePlan<'_>],
    units: &[Unit],
) -> Vec<EventInstance> {
    let mut remaining: usize = units.iter().map(|u| u.words.len()).sum();
    let mut tokens: Vec<String> = Vec::with_capacity(config.context_len);
    let mut triggers = vec![(0, 0); plans.len()];
    let mut args: Vec<Vec<Argument>> = vec![Vec::new(); plans.len()];

    for unit in units {
        let room = tokens.len() + 1 + remaining <= config.context_len;
        if rng.random_bool(config.distractor_rate) && room && !ontology.lexicon.distractors.is_empty() {
            tokens.push(ontology.lexicon.distractors.choose(rng).expect("non-empty").clone());
        }
        let start = tokens.len();
        tokens.extend(unit.words.iter().cloned());
        remaining -= unit.words.len();
        let span = (start, tokens.len());
        for tag in &unit.tags {
            match *tag {
                Tag::Trigger(e) => triggers[e] = span,
                Tag::Arg(e, role) => args[e].push(Argument {
                    start: span.0,
                    end: span.1,
                    role: plans[e].def.roles[role].clone(),
                }),
            }
        }
    }

    plans
        .iter()
        .enumerate()
        .map(|(e, plan)| {
            let mut arguments = std::mem::take(&mut args[e]);
            arguments.sort();
            EventInstance {
                doc_id: doc_id.to_owned(),
                tokens: tokens.clone(),
                trigger: triggers[e],
                event_type: plan.def.name.clone(),
                arguments,
            }
        })
        .collect()
}

/// Splits instances into the first `n_first` contexts and the rest.
pub fn split_by_context(instances: Vec<EventInstance>, n_first: usize) -> (Vec<EventInstance>, Vec<EventInstance>) {
    let mut seen: Vec<String> = Vec::new();
    let mut first = Vec::new();
    let mut rest = Vec::new();
    for inst in instances {
        if seen.last() != Some(&inst.doc_id) && !seen.contains(&inst.doc_id) {
            seen.push(inst.doc_id.clone());
        }
        let idx = seen.iter().position(|d| *d == inst.doc_id).expect("recorded above");
        if idx < n_first {
            first.push(inst);
        } else {
            rest.push(inst);
        }
    }
    (first, rest)
}

/// Context-level statistics of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub contexts: usize,
    pub events: usize,
    /// `events_per_context[i]` counts contexts with `i + 1` events.
    pub events_per_context: Vec<usize>,
    pub multi_event_contexts: usize,
    /// Multi-event contexts where two events share a gold span.
    pub overlapping_contexts: usize,
}

impl CorpusStats {
    pub fn event_count_fraction(&self, events: usize) -> f64 {
        let n = self.events_per_context.get(events - 1).copied().unwrap_or(0);
        n as f64 / self.contexts.max(1) as f64
    }

    pub fn overlap_fraction(&self) -> f64 {
        self.overlapping_contexts as f64 / self.multi_event_contexts.max(1) as f64
    }
}

pub fn corpus_stats(instances: &[EventInstance]) -> CorpusStats {
    let mut docs: BTreeMap<&str, Vec<&EventInstance>> = BTreeMap::new();
    for inst in instances {
        docs.entry(&inst.doc_id).or_default().push(inst);
    }
    let mut events_per_context = Vec::new();
    let mut multi = 0;
    let mut overlapping = 0;
    for events in docs.values() {
        let k = events.len();
        if events_per_context.len() < k {
            events_per_context.resize(k, 0);
        }
        events_per_context[k - 1] += 1;
        if k >= 2 {
            multi += 1;
            if overlapping_events(events).iter().any(|&o| o) {
                overlapping += 1;
            }
        }
    }
    CorpusStats {
        contexts: docs.len(),
        events: instances.len(),
        events_per_context,
        multi_event_contexts: multi,
        overlapping_contexts: overlapping,
    }
}

/// For each event of one context, whether one of its gold spans equals a
/// gold span of another event in that context.
pub fn overlapping_events(events: &[&EventInstance]) -> Vec<bool> {
    let spans: Vec<BTreeSet<(usize, usize)>> = events
        .iter()
        .map(|e| e.arguments.iter().map(|a| (a.start, a.end)).collect())
        .collect();
    (0..events.len())
        .map(|i| {
            (0..events.len())
                .filter(|&j| j != i)
                .any(|j| !spans[i].is_disjoint(&spans[j]))
        })
        .collect()
}
