//! Ontologies, templates, synthetic corpora and JSONL persistence.

mod generate;
mod instance;
mod ontology;
mod template;
pub mod vocab;

pub use generate::{
    corpus_stats, generate_dataset, overlapping_events, split_by_context, CorpusConfig, CorpusStats,
};
pub use instance::{read_jsonl, read_jsonl_from, write_jsonl, write_jsonl_to, Argument, EventInstance};
pub use ontology::{generate_ontology, EventOntology, EventTypeDef, Lexicon, OntologyConfig};
pub use template::{build_template, TemplateBook, TemplateSlot, TemplateSpec, TemplateVariant};
pub use vocab::{encode_tokens, Vocab};
