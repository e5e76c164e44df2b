use std::collections::BTreeMap;

use rand::Rng as _;
use serde::Serialize;

use super::forward::{forward_full, instance_loss, EaeTask, Mode};
use super::model::DegapModel;
use crate::data::{generate_dataset, generate_ontology, CorpusConfig, EventInstance, OntologyConfig, TemplateVariant};
use crate::error::{DegapError, Result};
use crate::numerics::{finite_diff_gradient, relative_error, ParamId, Tape};
use crate::rng::{rng_for, Stream};
use crate::prefixes::Variant;
use crate::transformer::{ForwardCtx, ModelConfig};

/// Coarse grouping of parameters by role, used to spread samples.
pub fn param_family(name: &str) -> &'static str {
    if name.starts_with("embed.") {
        "embedding"
    } else if name.starts_with("prefix.") {
        "prefix"
    } else if name.starts_with("gate.") {
        if name.ends_with(".lambda") {
            "gate-lambda"
        } else {
            "gate-W"
        }
    } else if name.starts_with("head.") {
        "span-head"
    } else if name.contains(".norm.") {
        "layer-norm"
    } else if name.contains("_attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else {
        "other"
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero in exact arithmetic are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            eps: 1e-4,
            tolerance: 1e-4,
            floor: 1e-7,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilyStats {
    pub checked: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_relative_error: f64,
    pub worst_param: String,
    /// Backprop and finite-difference values at the worst sample.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub families: BTreeMap<String, FamilyStats>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures == 0 && self.worst_relative_error < tolerance
    }
}

/// Compares backprop against central differences of the summed loss over
/// `instances`, sampling scalars round-robin across parameter families.
/// Gold assignments are computed once and held fixed.
pub fn grad_check(model: &mut DegapModel, task: &EaeTask, instances: &[EventInstance], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if instances.is_empty() {
        return Err(DegapError::contract("gradient check needs at least one instance"));
    }
    let net = model.net.clone();
    model.store.zero_grad();
    let mut targets = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &model.store);
        let out = forward_full(&mut ctx, &net, task, inst, Mode::Train, None)?;
        targets.push(out.targets);
        let loss = out.loss.expect("training mode yields a loss");
        tape.backward(loss, &mut model.store)?;
    }

    let mut by_family: BTreeMap<&'static str, Vec<ParamId>> = BTreeMap::new();
    for (id, name, t) in model.store.iter() {
        if t.requires_grad && t.numel() > 0 {
            by_family.entry(param_family(name)).or_default().push(id);
        }
    }
    let families: Vec<_> = by_family.into_iter().collect();
    let mut rng = rng_for(cfg.seed, Stream::GradCheck);
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        worst_relative_error: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        families: BTreeMap::new(),
    };
    for i in 0..cfg.samples {
        let (family, ids) = &families[i % families.len()];
        let id = ids[rng.random_range(0..ids.len())];
        let elem = rng.random_range(0..model.store.get(id).numel());
        let analytic = model.store.get(id).grad.as_ref().map_or(0.0, |g| g[elem]);
        let numeric = finite_diff_gradient(&mut model.store, id, elem, cfg.eps, |store| {
            instances
                .iter()
                .zip(&targets)
                .map(|(inst, t)| instance_loss(store, &net, task, inst, Some(t)).expect("forward succeeded at base point"))
                .sum()
        });
        let err = relative_error(analytic, numeric, cfg.floor);
        let stats = report.families.entry((*family).to_owned()).or_insert(FamilyStats { checked: 0, worst: 0.0 });
        stats.checked += 1;
        stats.worst = stats.worst.max(err);
        report.checked += 1;
        if err >= cfg.tolerance {
            report.failures += 1;
        }
        if err >= report.worst_relative_error {
            report.worst_relative_error = err;
            report.worst_param = format!("{}[{elem}]", model.store.name(id));
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Small ontology, model and a few instances for gradient checking:
/// 2 heads, 2 encoder + 1 decoder layers, prefix lengths 4/4. Weights are
/// drawn with std `init_std`; at the training default (0.02) many deep
/// gradients sit near 1e-8, below what central differences can resolve
/// to 1e-4 relative accuracy.
pub struct GradCheckFixture {
    pub task: EaeTask,
    pub model: DegapModel,
    pub instances: Vec<EventInstance>,
}

pub fn grad_check_fixture(d_model: usize, variant: Variant, init_std: f64, seed: u64) -> Result<GradCheckFixture> {
    let onto = OntologyConfig {
        n_types: 3,
        n_roles: 4,
        roles_per_type: 2,
        slot_multiplicity_prob: 0.5,
        triggers_per_type: 2,
        n_entities: 10,
        n_distractors: 6,
    };
    let task = EaeTask::new(generate_ontology(&onto, seed)?, TemplateVariant::TypePart)?;
    let corpus = CorpusConfig {
        n_contexts: 3,
        context_len: 30,
        max_entity_len: 2,
        max_span_len: 4,
        ..CorpusConfig::default()
    };
    let instances: Vec<_> = generate_dataset(&task.ontology, &corpus, seed)?.into_iter().take(3).collect();
    let cfg = ModelConfig {
        d_model,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 1,
        ffn_dim: 2 * d_model,
        vocab_size: task.vocab.len(),
        max_seq_len: 48,
        max_span_len: 4,
        len_ins: 4,
        len_tem: 4,
        init_std,
        variant,
        ..ModelConfig::default()
    };
    let model = DegapModel::new(cfg, task.ontology.type_names(), seed)?;
    Ok(GradCheckFixture { task, model, instances })
}
