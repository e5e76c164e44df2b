use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{DegapError, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::prefixes::PrefixBank;
use crate::rng::{rng_for, Stream};
use crate::transformer::{ModelConfig, Transformer};

const CHECKPOINT_FORMAT: &str = "degap-checkpoint-v1";

/// Span-selector masks shared by all slots.
#[derive(Debug, Clone)]
pub struct SpanHead {
    pub w_start: ParamId,
    pub w_end: ParamId,
}

/// Parameter handles and wiring; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Transformer,
    pub bank: PrefixBank,
    pub head: SpanHead,
    pub max_span_len: usize,
}

#[derive(Debug, Clone)]
pub struct DegapModel {
    pub config: ModelConfig,
    /// Types that own a template prefix under the per-type variant.
    pub event_types: Vec<String>,
    pub store: ParamStore,
    pub net: Network,
}

impl DegapModel {
    /// Backbone and head draw from the backbone stream, prefixes and gates
    /// from the prefix stream, so variants built with one seed share all
    /// non-prefix weights.
    pub fn new(config: ModelConfig, event_types: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, Stream::Backbone);
        let backbone = Transformer::init(&config, &mut store, &mut rng)?;
        let m = config.d_model;
        let mask = |rng: &mut _| {
            let mut t = Tensor::randn(&[m], config.init_std, rng);
            t.data.iter_mut().for_each(|v| *v += 1.0);
            t
        };
        let head = SpanHead {
            w_start: store.add("head.w_start", mask(&mut rng))?,
            w_end: store.add("head.w_end", mask(&mut rng))?,
        };
        let bank = PrefixBank::init(&config, &event_types, &mut store, &mut rng_for(seed, Stream::Prefix))?;
        let net = Network {
            backbone,
            bank,
            head,
            max_span_len: config.max_span_len,
        };
        Ok(Self {
            config,
            event_types,
            store,
            net,
        })
    }

    /// Trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(DegapError::config(format!(
                "vocabulary size mismatch: checkpoint expects {} tokens, ontology provides {}",
                self.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            config: self.config.clone(),
            event_types: self.event_types.clone(),
            params: self
                .store
                .iter()
                .map(|(_, name, t)| {
                    (
                        name.to_owned(),
                        StoredParam {
                            shape: t.shape.clone(),
                            data: t.data.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(DegapError::config(format!("unsupported checkpoint format {:?}", ckpt.format)));
        }
        let mut model = Self::new(ckpt.config, ckpt.event_types, 0)?;
        let mut params = ckpt.params;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_owned();
            let stored = params
                .remove(&name)
                .ok_or_else(|| DegapError::config(format!("checkpoint lacks parameter {name}")))?;
            let t = model.store.get_mut(id);
            if stored.shape != t.shape || stored.data.len() != t.data.len() {
                return Err(DegapError::config(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    stored.shape, t.shape
                )));
            }
            t.data = stored.data;
        }
        if let Some(extra) = params.keys().next() {
            return Err(DegapError::config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DegapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DegapError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model: config plus every parameter by name (sorted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub event_types: Vec<String>,
    pub params: BTreeMap<String, StoredParam>,
}
