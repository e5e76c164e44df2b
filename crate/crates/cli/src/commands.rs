use std::fs;
use std::path::Path;

use degap::data::{read_jsonl, write_jsonl, EventOntology};
use degap::eae::{grad_check, grad_check_fixture, predict_all, write_predictions, DegapModel, EaeTask, GradCheckConfig};
use degap::prefixes::Variant;
use degap::train_eval::{
    ablation_suite, evaluate_f1, prefix_length_sweep, sweep_csv, sweep_svg, train as train_model, write_loss_curve,
    EvalReport, Experiment,
};
use degap::DegapError;

use crate::config::{DataSection, RunConfig};
use crate::CliError;

const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| DegapError::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| DegapError::io(path, e).into())
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

/// Run directory holding the resolved config, seed and version.
fn open_run_dir(cfg: &RunConfig, root: &Path) -> Result<std::path::PathBuf, CliError> {
    let dir = cfg.run_dir(root);
    create_dir(&dir)?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    write(&dir.join("seed"), format!("{}\n", cfg.seed))?;
    write(&dir.join("version"), format!("{VERSION}\n"))?;
    Ok(dir)
}

/// Reads the splits from `data.dir` when set, otherwise generates them.
/// A data directory's own `data.toml` replaces the data settings so the
/// resolved config describes the data actually used.
fn load_experiment(cfg: &mut RunConfig) -> Result<Experiment, CliError> {
    let tv = cfg.model.template_variant;
    if cfg.data.dir.is_empty() {
        let d = &cfg.data;
        return Ok(Experiment::generate(&d.ontology, &d.corpus, d.seed, d.train_contexts, d.dev_fraction, tv)?);
    }
    let dir = std::path::PathBuf::from(&cfg.data.dir);
    let meta = dir.join("data.toml");
    let text = fs::read_to_string(&meta).map_err(|e| DegapError::io(&meta, e))?;
    let mut data: DataSection = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", meta.display())))?;
    data.dir.clone_from(&cfg.data.dir);
    cfg.data = data;
    Ok(Experiment {
        task: EaeTask::new(EventOntology::load(&dir.join("ontology.json"))?, tv)?,
        train: read_jsonl(&dir.join("train.jsonl"))?,
        dev: read_jsonl(&dir.join("dev.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    })
}

/// Model config with the vocabulary size taken from the task.
fn resolve_model(cfg: &mut RunConfig, exp: &Experiment) {
    cfg.model.vocab_size = exp.task.vocab.len();
}

fn summary(label: &str, r: &EvalReport) {
    println!(
        "{label}: events={} Arg-I P/R/F1 = {:.4}/{:.4}/{:.4}  Arg-C P/R/F1 = {:.4}/{:.4}/{:.4}",
        r.events, r.arg_i.precision, r.arg_i.recall, r.arg_i.f1, r.arg_c.precision, r.arg_c.recall, r.arg_c.f1
    );
}

pub fn gen_data(
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    n_contexts: Option<usize>,
    train_contexts: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(n) = n_contexts {
        cfg.data.corpus.n_contexts = n;
    }
    if let Some(n) = train_contexts {
        cfg.data.train_contexts = n;
    }
    if cfg.data.train_contexts >= cfg.data.corpus.n_contexts {
        return Err(CliError::Usage(format!(
            "train_contexts ({}) must be below n_contexts ({}) to leave a test split",
            cfg.data.train_contexts, cfg.data.corpus.n_contexts
        )));
    }
    cfg.data.dir.clear();
    let exp = load_experiment(&mut cfg)?;
    create_dir(out)?;
    exp.task.ontology.save(&out.join("ontology.json"))?;
    write_jsonl(&out.join("train.jsonl"), &exp.train)?;
    write_jsonl(&out.join("dev.jsonl"), &exp.dev)?;
    write_jsonl(&out.join("test.jsonl"), &exp.test)?;
    write(&out.join("data.toml"), toml::to_string(&cfg.data).expect("data config serializes"))?;
    println!(
        "wrote {} train / {} dev / {} test events, vocabulary {} -> {}",
        exp.train.len(),
        exp.dev.len(),
        exp.test.len(),
        exp.task.vocab.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, root: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let exp = load_experiment(&mut cfg)?;
    resolve_model(&mut cfg, &exp);
    let dir = open_run_dir(&cfg, root)?;
    let mut model = DegapModel::new(cfg.model.clone(), exp.task.ontology.type_names(), cfg.seed)?;
    println!("{} trainable parameters, {} training events", model.num_params(), exp.train.len());
    let outcome = train_model(&mut model, &exp.task, &exp.train, &exp.dev, &cfg.train)?;
    write_loss_curve(&dir.join("loss_curve.csv"), &outcome.curve)?;
    model.save(&dir.join("checkpoint.json"))?;
    write(&dir.join("dev_evals.json"), to_json(&outcome.evals))?;
    let preds = predict_all(&model.store, &model.net, &exp.task, &exp.test)?;
    write_predictions(&dir.join("test_predictions.jsonl"), &preds)?;
    let report = evaluate_f1(&preds, &exp.test)?;
    write(&dir.join("test_report.json"), to_json(&report))?;
    println!("best dev step {}", outcome.best_step);
    summary("test", &report);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn load_for_inference(checkpoint: &Path, ontology: &Path) -> Result<(DegapModel, EaeTask), CliError> {
    let model = DegapModel::load(checkpoint)?;
    let task = EaeTask::new(EventOntology::load(ontology)?, model.config.template_variant)?;
    model.check_vocab(&task.vocab)?;
    Ok((model, task))
}

pub fn eval(checkpoint: &Path, ontology: &Path, data: &Path, report_path: Option<&Path>) -> Result<(), CliError> {
    let (model, task) = load_for_inference(checkpoint, ontology)?;
    let golds = read_jsonl(data)?;
    let report = evaluate_f1(&predict_all(&model.store, &model.net, &task, &golds)?, &golds)?;
    summary("eval", &report);
    for (name, sub) in &report.breakdown {
        println!("  {name:>15}: events={:<5} Arg-I F1 {:.4}  Arg-C F1 {:.4}", sub.events, sub.arg_i.f1, sub.arg_c.f1);
    }
    if let Some(p) = report_path {
        write(p, to_json(&report))?;
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, ontology: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let (model, task) = load_for_inference(checkpoint, ontology)?;
    let instances = read_jsonl(data)?;
    let preds = predict_all(&model.store, &model.net, &task, &instances)?;
    write_predictions(out, &preds)?;
    println!("wrote {} predictions -> {}", preds.len(), out.display());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, root: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let exp = load_experiment(&mut cfg)?;
    resolve_model(&mut cfg, &exp);
    let dir = open_run_dir(&cfg, root)?;
    let e = &cfg.experiment;
    let table = ablation_suite(&exp, &cfg.model, &cfg.train, &e.variants, &e.seeds)?;
    let md = table.to_markdown();
    write(&dir.join("ablation.md"), &md)?;
    write(&dir.join("ablation.csv"), table.to_csv())?;
    write(&dir.join("ablation.json"), to_json(&table))?;
    print!("{md}");
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig, root: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let exp = load_experiment(&mut cfg)?;
    resolve_model(&mut cfg, &exp);
    let dir = open_run_dir(&cfg, root)?;
    let e = &cfg.experiment;
    let points = prefix_length_sweep(&exp, &cfg.model, &cfg.train, &e.sweep_lengths, &e.seeds)?;
    let csv = sweep_csv(&points);
    write(&dir.join("sweep.csv"), &csv)?;
    write(&dir.join("sweep.svg"), sweep_svg(&points))?;
    print!("{csv}");
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn grad_check_cmd(seed: u64, d_model: usize, samples: usize, variant: Variant, init_std: f64) -> Result<(), CliError> {
    let mut fx = grad_check_fixture(d_model, variant, init_std, seed)?;
    let cfg = GradCheckConfig {
        samples,
        seed,
        ..GradCheckConfig::default()
    };
    let r = grad_check(&mut fx.model, &fx.task, &fx.instances, &cfg)?;
    for (family, s) in &r.families {
        println!("{family:>12}: {:>4} checked, worst relative error {:.3e}", s.checked, s.worst);
    }
    println!(
        "checked {} scalars ({} params, vocabulary {}): worst relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        r.checked,
        fx.model.num_params(),
        fx.task.vocab.len(),
        r.worst_relative_error,
        r.worst_param,
        r.worst_analytic,
        r.worst_numeric
    );
    if r.passed(cfg.tolerance) {
        println!("PASS (tolerance {:e})", cfg.tolerance);
        Ok(())
    } else {
        println!("FAIL: {} of {} above tolerance {:e}", r.failures, r.checked, cfg.tolerance);
        Err(DegapError::contract("gradient check failed").into())
    }
}
