use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{DegapError, Result};
use crate::rng::{rng_for, Stream};

/// One event type: its roles, how many slots each role gets in the
/// template, and the schema sentence the template is rendered from.
///
/// `schema_text` is whitespace-separated; `{Role}` marks a slot named after
/// `Role`. Repeated slots use the `( and {Role} )` convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTypeDef {
    pub name: String,
    pub roles: Vec<String>,
    pub slot_counts: Vec<usize>,
    pub schema_text: String,
    /// Surface words that evoke this event type in generated contexts.
    #[serde(default)]
    pub triggers: Vec<String>,
}

impl EventTypeDef {
    pub fn slot_count(&self, role: &str) -> usize {
        self.roles
            .iter()
            .position(|r| r == role)
            .map_or(0, |i| self.slot_counts[i])
    }

    pub fn total_slots(&self) -> usize {
        self.slot_counts.iter().sum()
    }

    /// Role name for each `{Role}` marker in schema order.
    pub fn schema_slots(&self) -> Vec<&str> {
        self.schema_text
            .split_whitespace()
            .filter_map(slot_role)
            .collect()
    }

    fn validate(&self, pool: &BTreeSet<&str>) -> Result<()> {
        let bad = |msg: String| Err(DegapError::validation(format!("event type {}: {msg}", self.name)));
        if self.roles.is_empty() {
            return bad("no roles".into());
        }
        if self.roles.len() != self.slot_counts.len() {
            return bad("slot_counts length differs from roles".into());
        }
        let distinct: BTreeSet<&str> = self.roles.iter().map(String::as_str).collect();
        if distinct.len() != self.roles.len() {
            return bad("duplicate role".into());
        }
        let slots = self.schema_slots();
        for (role, &count) in self.roles.iter().zip(&self.slot_counts) {
            if !pool.contains(role.as_str()) {
                return bad(format!("role {role} not in the role pool"));
            }
            if count == 0 {
                return bad(format!("role {role} has zero slots"));
            }
            let seen = slots.iter().filter(|s| **s == role).count();
            if seen != count {
                return bad(format!("schema mentions {role} {seen} times, expected {count}"));
            }
        }
        if let Some(extra) = slots.iter().find(|s| !distinct.contains(*s)) {
            return bad(format!("schema slot {extra} is not a role of this type"));
        }
        Ok(())
    }
}

pub(crate) fn slot_role(token: &str) -> Option<&str> {
    token.strip_prefix('{').and_then(|t| t.strip_suffix('}'))
}

/// Word lists used by the corpus generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub entities: Vec<String>,
    pub distractors: Vec<String>,
    pub connectives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventOntology {
    pub event_types: Vec<EventTypeDef>,
    pub roles: Vec<String>,
    #[serde(default)]
    pub lexicon: Lexicon,
}

/// Literal words every template and generated context may use.
pub const FIXED_WORDS: [&str; 7] = ["Event", "type", "is", "and", "(", ")", "."];

impl EventOntology {
    pub fn validate(&self) -> Result<()> {
        let pool: BTreeSet<&str> = self.roles.iter().map(String::as_str).collect();
        let mut names = BTreeSet::new();
        for def in &self.event_types {
            if !names.insert(def.name.as_str()) {
                return Err(DegapError::validation(format!("duplicate event type {}", def.name)));
            }
            def.validate(&pool)?;
        }
        Ok(())
    }

    pub fn event_type(&self, name: &str) -> Result<&EventTypeDef> {
        self.event_types
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| DegapError::Lookup(format!("unknown event type {name:?}")))
    }

    pub fn type_names(&self) -> Vec<String> {
        self.event_types.iter().map(|d| d.name.clone()).collect()
    }

    /// Deterministic vocabulary over every word the ontology can produce.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<&str> = FIXED_WORDS.to_vec();
        words.extend(self.event_types.iter().map(|d| d.name.as_str()));
        words.extend(self.roles.iter().map(String::as_str));
        for d in &self.event_types {
            words.extend(d.triggers.iter().map(String::as_str));
            words.extend(d.schema_text.split_whitespace().filter(|t| slot_role(t).is_none()));
        }
        words.extend(self.lexicon.connectives.iter().map(String::as_str));
        words.extend(self.lexicon.entities.iter().map(String::as_str));
        words.extend(self.lexicon.distractors.iter().map(String::as_str));
        Vocab::from_words(words)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ontology: Self = serde_json::from_str(text)?;
        ontology.validate()?;
        Ok(ontology)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| DegapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DegapError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OntologyConfig {
    pub n_types: usize,
    pub n_roles: usize,
    pub roles_per_type: usize,
    /// Probability that a role gets a second `( and {Role} )` slot.
    pub slot_multiplicity_prob: f64,
    pub triggers_per_type: usize,
    pub n_entities: usize,
    pub n_distractors: usize,
}

impl Default for OntologyConfig {
    fn default() -> Self {
        Self {
            n_types: 10,
            n_roles: 6,
            roles_per_type: 3,
            slot_multiplicity_prob: 0.2,
            triggers_per_type: 2,
            n_entities: 60,
            n_distractors: 40,
        }
    }
}

const TYPE_NAMES: [&str; 12] = [
    "Conflict.Attack",
    "Life.Die",
    "Movement.Transport",
    "Transaction.Transfer",
    "Contact.Meet",
    "Justice.Arrest",
    "Life.Injure",
    "Business.Merge",
    "Personnel.Elect",
    "Contact.Phone",
    "Justice.Sue",
    "Life.Marry",
];

const ROLE_NAMES: [&str; 16] = [
    "Attacker",
    "Target",
    "Instrument",
    "Place",
    "Victim",
    "Agent",
    "Giver",
    "Recipient",
    "Artifact",
    "Origin",
    "Destination",
    "Person",
    "Entity",
    "Beneficiary",
    "Defendant",
    "Prosecutor",
];

const CONNECTIVES: [&str; 12] = [
    "at", "with", "against", "from", "to", "near", "for", "by", "into", "over", "after", "before",
];

fn pooled_name(pool: &[&str], i: usize, fallback: &str) -> String {
    pool.get(i).map_or_else(|| format!("{fallback}{i}"), |s| (*s).to_owned())
}

/// Samples a synthetic ontology. Role overlap between types is forced once
/// `n_types * roles_per_type > n_roles`.
pub fn generate_ontology(config: &OntologyConfig, seed: u64) -> Result<EventOntology> {
    let c = config;
    if c.n_types == 0 || c.roles_per_type == 0 || c.n_roles < c.roles_per_type {
        return Err(DegapError::config(format!(
            "need n_types >= 1 and n_roles >= roles_per_type >= 1 (got {} / {} / {})",
            c.n_types, c.n_roles, c.roles_per_type
        )));
    }
    if !(0.0..=1.0).contains(&c.slot_multiplicity_prob) {
        return Err(DegapError::config("slot_multiplicity_prob must lie in [0, 1]"));
    }
    if c.triggers_per_type == 0 || c.n_entities == 0 {
        return Err(DegapError::config("triggers_per_type and n_entities must be positive"));
    }
    let mut rng = rng_for(seed, Stream::Ontology);

    let roles: Vec<String> = (0..c.n_roles).map(|i| pooled_name(&ROLE_NAMES, i, "Role")).collect();
    let connectives: Vec<String> = (0..CONNECTIVES.len().max(c.roles_per_type))
        .map(|i| pooled_name(&CONNECTIVES, i, "via"))
        .collect();

    let mut event_types = Vec::with_capacity(c.n_types);
    for t in 0..c.n_types {
        let name = pooled_name(&TYPE_NAMES, t, "Synthetic.Type");
        let stem = name.rsplit('.').next().unwrap_or(&name).to_lowercase();
        let triggers: Vec<String> = (0..c.triggers_per_type).map(|j| format!("{stem}_{j}")).collect();

        let chosen: Vec<String> = roles.choose_multiple(&mut rng, c.roles_per_type).cloned().collect();
        let slot_counts: Vec<usize> = chosen
            .iter()
            .map(|_| if rng.random_bool(c.slot_multiplicity_prob) { 2 } else { 1 })
            .collect();
        let mut links: Vec<&String> = connectives.iter().collect();
        links.shuffle(&mut rng);

        let mut schema: Vec<String> = Vec::new();
        for (i, (role, &count)) in chosen.iter().zip(&slot_counts).enumerate() {
            match i {
                0 => {}
                1 => {
                    schema.push(triggers[0].clone());
                    schema.push(links[i - 1].clone());
                }
                _ => schema.push(links[i - 1].clone()),
            }
            schema.push(format!("{{{role}}}"));
            for _ in 1..count {
                schema.extend(["(".into(), "and".into(), format!("{{{role}}}"), ")".into()]);
            }
        }
        if chosen.len() == 1 {
            schema.push(triggers[0].clone());
        }
        event_types.push(EventTypeDef {
            name,
            roles: chosen,
            slot_counts,
            schema_text: schema.join(" "),
            triggers,
        });
    }

    let ontology = EventOntology {
        event_types,
        roles,
        lexicon: Lexicon {
            entities: (0..c.n_entities).map(|i| format!("ent{i}")).collect(),
            distractors: (0..c.n_distractors).map(|i| format!("w{i}")).collect(),
            connectives,
        },
    };
    ontology.validate()?;
    Ok(ontology)
}
