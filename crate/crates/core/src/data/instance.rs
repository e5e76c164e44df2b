use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ontology::EventOntology;
use crate::error::{DegapError, Result};

/// Token span `[start, end)` with a role label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Argument {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

/// One event mention: a context, its trigger, and gold arguments.
///
/// Serialized as one JSONL line:
/// `{"doc_id", "tokens", "trigger": [start, end], "event_type", "arguments": [{"start", "end", "role"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventInstance {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub trigger: (usize, usize),
    pub event_type: String,
    pub arguments: Vec<Argument>,
}

impl EventInstance {
    /// Index checks that need no ontology.
    pub fn validate_bounds(&self) -> Result<()> {
        let n = self.tokens.len();
        let (ts, te) = self.trigger;
        if ts >= te || te > n {
            return Err(DegapError::validation(format!(
                "{}: trigger [{ts}, {te}) outside context of {n} tokens",
                self.doc_id
            )));
        }
        for a in &self.arguments {
            if a.start >= a.end || a.end > n {
                return Err(DegapError::validation(format!(
                    "{}: argument [{}, {}) ({}) outside context of {n} tokens",
                    self.doc_id, a.start, a.end, a.role
                )));
            }
        }
        Ok(())
    }

    /// Full invariant check against the ontology and maximum span length.
    pub fn validate(&self, ontology: &EventOntology, max_span_len: usize) -> Result<()> {
        self.validate_bounds()?;
        let def = ontology.event_type(&self.event_type)?;
        let mut per_role: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &self.arguments {
            let len = a.end - a.start;
            if len + 1 > max_span_len {
                return Err(DegapError::validation(format!(
                    "{}: argument span of {len} tokens exceeds max span length {max_span_len}",
                    self.doc_id
                )));
            }
            *per_role.entry(&a.role).or_default() += 1;
        }
        for (role, count) in per_role {
            let slots = def.slot_count(role);
            if count > slots {
                return Err(DegapError::validation(format!(
                    "{}: {count} arguments with role {role} but {} has {slots} slots",
                    self.doc_id, def.name
                )));
            }
        }
        Ok(())
    }

    pub fn surface(&self, start: usize, end: usize) -> &[String] {
        &self.tokens[start..end]
    }
}

pub fn write_jsonl(path: &Path, instances: &[EventInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DegapError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_jsonl_to(&mut out, instances).map_err(|e| DegapError::io(path, e))?;
    out.flush().map_err(|e| DegapError::io(path, e))
}

pub fn write_jsonl_to(out: &mut impl Write, instances: &[EventInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut *out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EventInstance>> {
    let file = std::fs::File::open(path).map_err(|e| DegapError::io(path, e))?;
    read_jsonl_from(BufReader::new(file))
}

/// Parses JSONL, reporting 1-based line numbers on malformed or
/// out-of-bounds records. Blank lines are skipped.
pub fn read_jsonl_from(reader: impl BufRead) -> Result<Vec<EventInstance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DegapError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EventInstance = serde_json::from_str(&line).map_err(|e| DegapError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        inst.validate_bounds().map_err(|e| DegapError::Validation {
            line: Some(lineno),
            msg: match e {
                DegapError::Validation { msg, .. } => msg,
                other => other.to_string(),
            },
        })?;
        out.push(inst);
    }
    Ok(out)
}
