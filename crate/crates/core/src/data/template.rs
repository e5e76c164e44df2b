use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ontology::{slot_role, EventOntology};
use super::vocab::{self, Vocab};
use crate::error::{DegapError, Result};

/// How the event type is announced inside its template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateVariant {
    /// `<s> Event type is <name> </s> <s> schema </s>`
    #[default]
    TypePart,
    /// `<s> <type> schema </type> </s>`
    TypeMarkers,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSlot {
    pub role: String,
    /// Token range of the slot's role-name word(s).
    pub positions: Range<usize>,
}

/// A rendered event template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    pub event_type: String,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    /// Slot `k` of the template, in schema order.
    pub slots: Vec<TemplateSlot>,
    /// Positions pooled into the event-type guide vector.
    pub type_positions: Vec<usize>,
    pub variant: TemplateVariant,
}

impl TemplateSpec {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices of the slots that belong to `role`, in schema order.
    pub fn slots_for(&self, role: &str) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == role)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Renders the template for `event_type`. Pure in its inputs.
pub fn build_template(
    ontology: &EventOntology,
    vocab: &Vocab,
    event_type: &str,
    variant: TemplateVariant,
) -> Result<TemplateSpec> {
    let def = ontology.event_type(event_type)?;
    let mut words: Vec<String> = Vec::new();
    let mut type_positions = Vec::new();
    let bos = vocab::RESERVED[vocab::BOS].to_owned();
    let eos = vocab::RESERVED[vocab::EOS].to_owned();

    match variant {
        TemplateVariant::TypePart => {
            words.push(bos.clone());
            words.extend(["Event", "type", "is"].map(String::from));
            type_positions.push(words.len());
            words.push(def.name.clone());
            words.push(eos.clone());
            words.push(bos);
        }
        TemplateVariant::TypeMarkers => {
            words.push(bos);
            type_positions.push(words.len());
            words.push(vocab::RESERVED[vocab::TYPE_OPEN].to_owned());
        }
    }

    let mut slots = Vec::new();
    for token in def.schema_text.split_whitespace() {
        match slot_role(token) {
            Some(role) => {
                slots.push(TemplateSlot {
                    role: role.to_owned(),
                    positions: words.len()..words.len() + 1,
                });
                words.push(role.to_owned());
            }
            None => words.push(token.to_owned()),
        }
    }

    if variant == TemplateVariant::TypeMarkers {
        type_positions.push(words.len());
        words.push(vocab::RESERVED[vocab::TYPE_CLOSE].to_owned());
    }
    words.push(eos);

    if slots.len() != def.total_slots() {
        return Err(DegapError::validation(format!(
            "template for {event_type} has {} slots, expected {}",
            slots.len(),
            def.total_slots()
        )));
    }
    let tokens = vocab.encode(&words);
    Ok(TemplateSpec {
        event_type: event_type.to_owned(),
        words,
        tokens,
        slots,
        type_positions,
        variant,
    })
}

/// Templates for every event type of an ontology.
#[derive(Debug, Clone, Default)]
pub struct TemplateBook {
    templates: BTreeMap<String, TemplateSpec>,
}

impl TemplateBook {
    pub fn build(ontology: &EventOntology, vocab: &Vocab, variant: TemplateVariant) -> Result<Self> {
        let templates = ontology
            .event_types
            .iter()
            .map(|d| Ok((d.name.clone(), build_template(ontology, vocab, &d.name, variant)?)))
            .collect::<Result<_>>()?;
        Ok(Self { templates })
    }

    pub fn get(&self, event_type: &str) -> Result<&TemplateSpec> {
        self.templates
            .get(event_type)
            .ok_or_else(|| DegapError::Lookup(format!("no template for event type {event_type:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &TemplateSpec> {
        self.templates.values()
    }
}
