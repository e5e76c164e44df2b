use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_f1, EvalReport};
use super::trainer::{train, LossPoint, TrainConfig};
use super::trainer::dev_split;
use crate::data::{generate_dataset, generate_ontology, split_by_context, CorpusConfig, EventInstance, OntologyConfig, TemplateVariant};
use crate::eae::{predict_all, DegapModel, EaeTask};
use crate::error::{DegapError, Result};
use crate::prefixes::{make_variant, Family, Variant};
use crate::transformer::ModelConfig;

/// Task plus fixed train/dev/test splits shared by every arm.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: EaeTask,
    pub train: Vec<EventInstance>,
    pub dev: Vec<EventInstance>,
    pub test: Vec<EventInstance>,
}

impl Experiment {
    /// Generates ontology and corpus from `seed`, keeps the first
    /// `train_contexts` contexts for training (minus a `dev_fraction` dev
    /// split) and the rest for test.
    pub fn generate(
        ontology: &OntologyConfig,
        corpus: &CorpusConfig,
        seed: u64,
        train_contexts: usize,
        dev_fraction: f64,
        template_variant: TemplateVariant,
    ) -> Result<Self> {
        let onto = generate_ontology(ontology, seed)?;
        let data = generate_dataset(&onto, corpus, seed)?;
        let (train_all, test) = split_by_context(data, train_contexts);
        let (train, dev) = dev_split(&train_all, dev_fraction, seed);
        Ok(Self {
            task: EaeTask::new(onto, template_variant)?,
            train,
            dev,
            test,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub test: EvalReport,
    pub curve: Vec<LossPoint>,
}

/// Trains one configuration with `seed` driving both initialization and
/// data order, then scores the best-dev model on the test split.
pub fn run_arm(exp: &Experiment, model_cfg: &ModelConfig, train_cfg: &TrainConfig, seed: u64) -> Result<ArmResult> {
    let mut model = DegapModel::new(model_cfg.clone(), exp.task.ontology.type_names(), seed)?;
    let tc = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let outcome = train(&mut model, &exp.task, &exp.train, &exp.dev, &tc)?;
    let preds = predict_all(&model.store, &model.net, &exp.task, &exp.test)?;
    Ok(ArmResult {
        variant: model_cfg.variant,
        seed,
        params: model.num_params(),
        test: evaluate_f1(&preds, &exp.test)?,
        curve: outcome.curve,
    })
}

/// Trainable parameter count of a freshly built model.
pub fn param_count(model_cfg: &ModelConfig, event_types: &[String], variant: Variant) -> Result<usize> {
    Ok(DegapModel::new(make_variant(model_cfg, variant), event_types.to_vec(), 0)?.num_params())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub params: usize,
    pub seeds: Vec<u64>,
    pub arg_i: Vec<f64>,
    pub arg_c: Vec<f64>,
}

impl AblationRow {
    pub fn arg_i_stats(&self) -> (f64, f64) {
        mean_std(&self.arg_i)
    }

    pub fn arg_c_stats(&self) -> (f64, f64) {
        mean_std(&self.arg_c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Rows in the dual-prefix table order, then the gating table order.
    pub fn to_markdown(&self) -> String {
        let dual = [
            Variant::Full,
            Variant::SharedPrefix,
            Variant::OnlyIop,
            Variant::OnlyTop,
            Variant::NoPrefix,
            Variant::Tst,
        ];
        let gating = [Variant::Full, Variant::NoGating, Variant::SentenceGuided];
        let mut out = String::new();
        for (title, order) in [("Dual prefixes", &dual[..]), ("Event-guided gating", &gating[..])] {
            let rows: Vec<_> = order.iter().filter_map(|v| self.row(*v)).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "### {title}\n");
            let _ = writeln!(out, "| # | Model | Arg-I | Arg-C | Params |");
            let _ = writeln!(out, "|---|---|---|---|---|");
            for (i, r) in rows.iter().enumerate() {
                let (im, is) = r.arg_i_stats();
                let (cm, cs) = r.arg_c_stats();
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.1} ± {:.1} | {:.1} ± {:.1} | {} |",
                    i + 1,
                    r.label,
                    100.0 * im,
                    100.0 * is,
                    100.0 * cm,
                    100.0 * cs,
                    r.params
                );
            }
            out.push('\n');
        }
        out
    }

    /// One line per (variant, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,label,seed,params,arg_i_f1,arg_c_f1\n");
        for r in &self.rows {
            for ((seed, i), c) in r.seeds.iter().zip(&r.arg_i).zip(&r.arg_c) {
                let _ = writeln!(out, "{},{},{seed},{},{i},{c}", r.variant, r.label, r.params);
            }
        }
        out
    }
}

/// Trains and scores every variant under each seed on identical data.
pub fn ablation_suite(exp: &Experiment, base: &ModelConfig, train_cfg: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(DegapError::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = make_variant(base, variant);
        let mut row = AblationRow {
            variant,
            label: variant.label().to_owned(),
            params: 0,
            seeds: seeds.to_vec(),
            arg_i: Vec::new(),
            arg_c: Vec::new(),
        };
        for &seed in seeds {
            let arm = run_arm(exp, &cfg, train_cfg, seed)?;
            row.params = arm.params;
            row.arg_i.push(arm.test.arg_i.f1);
            row.arg_c.push(arm.test.arg_c.f1);
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub family: Family,
    pub length: usize,
    pub seed: u64,
    pub arg_i: f64,
    pub arg_c: f64,
}

/// Varies one prefix family's length at a time with the other family held
/// at its configured length.
pub fn prefix_length_sweep(exp: &Experiment, base: &ModelConfig, train_cfg: &TrainConfig, lengths: &[usize], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    if lengths.is_empty() || seeds.is_empty() {
        return Err(DegapError::config("sweep needs at least one length and one seed"));
    }
    let mut out = Vec::new();
    for family in [Family::Ins, Family::Tem] {
        for &length in lengths {
            let mut cfg = base.clone();
            match family {
                Family::Ins => cfg.len_ins = length,
                Family::Tem => cfg.len_tem = length,
            }
            for &seed in seeds {
                let arm = run_arm(exp, &cfg, train_cfg, seed)?;
                out.push(SweepPoint {
                    family,
                    length,
                    seed,
                    arg_i: arm.test.arg_i.f1,
                    arg_c: arm.test.arg_c.f1,
                });
            }
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("family,length,seed,arg_i_f1,arg_c_f1\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{}", p.family.tag(), p.length, p.seed, p.arg_i, p.arg_c);
    }
    out
}

/// Line plot of mean Arg-C F1 against prefix length, one line per family.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let mut lengths: Vec<usize> = points.iter().map(|p| p.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let max_len = *lengths.last().unwrap_or(&1) as f64;
    let x = |len: usize| pad + (w - 2.0 * pad) * if max_len > 0.0 { len as f64 / max_len } else { 0.0 };
    let y = |f1: f64| h - pad - (h - 2.0 * pad) * f1;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2}\" y=\"{3}\" font-size=\"12\" text-anchor=\"middle\">prefix length</text>\n\
         <text x=\"12\" y=\"{4}\" font-size=\"12\" transform=\"rotate(-90 12 {4})\" text-anchor=\"middle\">Arg-C F1</text>\n",
        h - pad,
        w - pad,
        w / 2.0,
        h - 8.0,
        h / 2.0
    );
    for &len in &lengths {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{len}</text>", x(len), h - pad + 14.0);
    }
    for (family, colour) in [(Family::Ins, "#1f77b4"), (Family::Tem, "#d62728")] {
        let pts: Vec<String> = lengths
            .iter()
            .filter_map(|&len| {
                let vals: Vec<f64> = points.iter().filter(|p| p.family == family && p.length == len).map(|p| p.arg_c).collect();
                (!vals.is_empty()).then(|| format!("{:.1},{:.1}", x(len), y(mean_std(&vals).0)))
            })
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let label_y = if family == Family::Ins { pad } else { pad + 14.0 };
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{label_y}\" font-size=\"11\" fill=\"{colour}\">len_{}</text>", w - pad - 50.0, family.tag());
    }
    svg.push_str("</svg>\n");
    svg
}
