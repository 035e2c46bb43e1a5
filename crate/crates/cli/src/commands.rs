//! Subcommand implementations, shared between direct invocation and the
//! pipeline. Everything here returns the library error type; stage
//! annotation happens in the pipeline wrapper.
//!
//! Long stages run examples strictly in id order, one at a time — the
//! target is a single-core box, so there is no worker pool to make
//! ordering interesting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use graphmask_core::attribution::{AttributionFile, AttributionResult};
use graphmask_core::baselines::erasure::erasure_attribution;
use graphmask_core::baselines::gnn_explainer::gnn_explainer;
use graphmask_core::baselines::information_bottleneck::train_ib;
use graphmask_core::baselines::integrated_gradients::integrated_gradients;
use graphmask_core::baselines::threshold::select_threshold_over;
use graphmask_core::baselines::{masked_attribution, SoftAttribution};
use graphmask_core::error::{Error, Result};
use graphmask_core::eval::{
    degradation_curve, faithfulness_report, gold_gates, layer_attribution_mass, reports_to_csv,
    DegradationPoint, FaithfulnessReport,
};
use graphmask_core::gnn::{accuracy, train_toy_model, RgcnModel, ToyTrainReport};
use graphmask_core::graphmask::{
    explain, explain_nonamortized, train_graphmask, GateClassifier, GraphMaskTrainReport,
};
use graphmask_core::graphs::{
    generate_dataset, load_jsonl, save_jsonl, DatasetSplits, StarGraphExample,
};

use crate::config::{provenance, Method, RunConfig, Split};
use crate::render::render_svg;

pub type Model = RgcnModel<f64>;
pub type Classifier = GateClassifier<f64>;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Write a pretty-printed JSON report into the reports directory and
/// return its path.
pub fn write_report(cfg: &RunConfig, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// generate

pub fn generate(cfg: &RunConfig) -> Result<DatasetSplits> {
    let splits = generate_dataset(&cfg.dataset_config())?;
    let dir = cfg.path(&cfg.data_dir);
    std::fs::create_dir_all(&dir)?;
    save_jsonl(&cfg.split_path(Split::Train), &splits.train)?;
    save_jsonl(&cfg.split_path(Split::Validation), &splits.validation)?;
    save_jsonl(&cfg.split_path(Split::Test), &splits.test)?;
    let meta = serde_json::json!({
        "provenance": provenance(cfg, &[], &[cfg.seed])?,
        "counts": {
            "train": splits.train.len(),
            "validation": splits.validation.len(),
            "test": splits.test.len(),
        },
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(dir.join("dataset.json"), text)?;
    println!(
        "wrote {} train / {} validation / {} test examples to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        dir.display(),
    );
    Ok(splits)
}

// ---------------------------------------------------------------------------
// loading helpers

pub fn load_splits(cfg: &RunConfig) -> Result<DatasetSplits> {
    let load = |split: Split| -> Result<Vec<StarGraphExample>> {
        let path = cfg.split_path(split);
        if !path.exists() {
            return Err(Error::Config(format!(
                "dataset split '{split}' not found at {}; run `graphmask generate` first",
                path.display()
            )));
        }
        load_jsonl(&path)
    };
    Ok(DatasetSplits {
        train: load(Split::Train)?,
        validation: load(Split::Validation)?,
        test: load(Split::Test)?,
    })
}

pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.model_ckpt();
    if !path.exists() {
        return Err(Error::Config(format!(
            "model checkpoint not found at {}; run `graphmask train-model` first",
            path.display()
        )));
    }
    RgcnModel::load_checkpoint(&path)
}

pub fn load_classifier(cfg: &RunConfig) -> Result<Classifier> {
    let path = cfg.classifier_ckpt();
    if !path.exists() {
        return Err(Error::Config(format!(
            "gate-classifier checkpoint not found at {}; run `graphmask train-graphmask` first",
            path.display()
        )));
    }
    GateClassifier::load_checkpoint(&path)
}

// ---------------------------------------------------------------------------
// train-model

pub struct TrainedModel {
    pub model: Model,
    pub report: ToyTrainReport,
    pub test_accuracy: f64,
}

pub fn train_model(cfg: &RunConfig, splits: &DatasetSplits) -> Result<TrainedModel> {
    let (model, report) = train_toy_model::<f64>(
        cfg.rgcn_config(),
        &splits.train,
        &splits.validation,
        &cfg.toy_train_config(),
    )?;
    let test_accuracy = accuracy(&model, &splits.test)?;
    let path = cfg.model_ckpt();
    ensure_parent(&path)?;
    model.save_checkpoint(&path)?;
    let report_path = write_report(
        cfg,
        "train-model.json",
        &serde_json::json!({
            "provenance": provenance(cfg, &[("model".into(), path.clone())], &[cfg.seed])?,
            "training": report,
            "test_accuracy": test_accuracy,
        }),
    )?;
    println!(
        "model reached {:.2}% validation accuracy in {} epochs ({:.2}% test); \
         checkpoint {}, report {}",
        100.0 * report.best_val_accuracy,
        report.epochs_run,
        100.0 * test_accuracy,
        path.display(),
        report_path.display(),
    );
    Ok(TrainedModel { model, report, test_accuracy })
}

// ---------------------------------------------------------------------------
// train-graphmask

/// Train one gate classifier and checkpoint it at `ckpt`.
pub fn train_gates(
    cfg: &RunConfig,
    model: &Model,
    splits: &DatasetSplits,
    seed: u64,
    ckpt: &Path,
) -> Result<(Classifier, GraphMaskTrainReport)> {
    let (cls, report) =
        train_graphmask(model, &splits.train, &splits.validation, &cfg.graphmask_config(seed))?;
    ensure_parent(ckpt)?;
    cls.save_checkpoint(ckpt)?;
    Ok((cls, report))
}

/// One-line summary of a finished gate-training run.
pub fn gate_summary(report: &GraphMaskTrainReport) -> serde_json::Value {
    let chosen = &report.epochs[report.chosen_epoch];
    serde_json::json!({
        "epochs_total": report.epochs.len(),
        "chosen_epoch": report.chosen_epoch,
        "validation_divergence": chosen.mean_divergence,
        "retained_fraction": chosen.retained_fraction,
        "masked_accuracy": chosen.masked_accuracy,
        "lambda": chosen.lambda,
    })
}

pub fn train_graphmask_cmd(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let model = load_model(cfg)?;
    let ckpt = cfg.classifier_ckpt();
    let (_, report) = train_gates(cfg, &model, &splits, cfg.seed, &ckpt)?;
    let report_path = write_report(
        cfg,
        "train-graphmask.json",
        &serde_json::json!({
            "provenance": provenance(
                cfg,
                &[
                    ("model".into(), cfg.model_ckpt()),
                    ("classifier".into(), ckpt.clone()),
                ],
                &[cfg.seed],
            )?,
            "summary": gate_summary(&report),
            "epochs": report.epochs,
        }),
    )?;
    let chosen = &report.epochs[report.chosen_epoch];
    println!(
        "gate classifier converged at epoch {}: validation divergence {:.4}, \
         retained fraction {:.3}, masked accuracy {:.2}%; checkpoint {}, report {}",
        report.chosen_epoch,
        chosen.mean_divergence,
        chosen.retained_fraction,
        100.0 * chosen.masked_accuracy,
        ckpt.display(),
        report_path.display(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// attribution methods

pub struct MethodRun {
    pub file: AttributionFile,
    pub notices: Vec<String>,
    /// Checkpoints the attributions depend on (already hashed into the
    /// file's metadata; the pipeline reuses the list for its own report).
    pub checkpoints: Vec<(String, PathBuf)>,
}

/// Select the binarization threshold on the validation split.
fn pick_threshold(
    cfg: &RunConfig,
    validation: &[StarGraphExample],
    soft_of: &mut dyn FnMut(&StarGraphExample) -> Result<SoftAttribution>,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::InvalidArg(
            "threshold selection needs a non-empty validation split".into(),
        ));
    }
    let scores: Vec<SoftAttribution> =
        validation.iter().map(|ex| soft_of(ex)).collect::<Result<_>>()?;
    let num_layers = scores[0].scores.len();
    let golds: Vec<Vec<bool>> =
        validation.iter().map(|ex| gold_gates(ex, num_layers)).collect();
    select_threshold_over(&cfg.thresholds, &scores, &golds)
}

fn method_hyperparameters(cfg: &RunConfig, method: Method) -> Result<serde_json::Value> {
    Ok(match method {
        Method::GraphMask => serde_json::to_value(cfg.graphmask_config(cfg.seed))?,
        Method::NonAmortized => serde_json::to_value(cfg.nonamortized_config())?,
        Method::Erasure => serde_json::json!({ "replacement": "zero message" }),
        Method::GnnExplainer => serde_json::to_value(cfg.gnnexplainer_config())?,
        Method::Ig => serde_json::json!({ "steps": cfg.ig_steps }),
        Method::Ib => serde_json::to_value(cfg.ib_config())?,
    })
}

/// Compute one method's attributions over `target`, selecting thresholds
/// on the validation split where the method needs one. For `GraphMask` the
/// caller supplies the trained classifier and its checkpoint path.
pub fn run_method(
    cfg: &RunConfig,
    method: Method,
    model: &Model,
    cls: Option<(&Classifier, &Path)>,
    splits: &DatasetSplits,
    target: Split,
) -> Result<MethodRun> {
    let examples = target.of(splits);
    if examples.is_empty() {
        return Err(Error::InvalidArg(format!("split '{target}' is empty")));
    }
    let mut notices = Vec::new();
    let mut checkpoints: Vec<(String, PathBuf)> = vec![("model".into(), cfg.model_ckpt())];
    let mut threshold = None;

    let results: Vec<AttributionResult> = match method {
        Method::GraphMask => {
            let (cls, ckpt) = cls.ok_or_else(|| {
                Error::Config("graphmask attributions need a trained gate classifier".into())
            })?;
            checkpoints.push(("classifier".into(), ckpt.to_path_buf()));
            examples.iter().map(|ex| explain(model, cls, ex)).collect::<Result<_>>()?
        }
        Method::NonAmortized => {
            let na = cfg.nonamortized_config();
            examples
                .iter()
                .map(|ex| explain_nonamortized(model, ex, &na))
                .collect::<Result<_>>()?
        }
        Method::Erasure => examples
            .iter()
            .map(|ex| erasure_attribution(model, ex))
            .collect::<Result<_>>()?,
        Method::GnnExplainer => {
            let gx = cfg.gnnexplainer_config();
            let t = pick_threshold(cfg, &splits.validation, &mut |ex| {
                gnn_explainer(model, ex, &gx)
            })?;
            threshold = Some(t);
            examples
                .iter()
                .map(|ex| {
                    let soft = gnn_explainer(model, ex, &gx)?;
                    let keep = soft.binarize(t);
                    masked_attribution(model, ex, &soft.scores, &keep, None)
                })
                .collect::<Result<_>>()?
        }
        Method::Ig => {
            let t = pick_threshold(cfg, &splits.validation, &mut |ex| {
                integrated_gradients(model, ex, cfg.ig_steps)
            })?;
            threshold = Some(t);
            examples
                .iter()
                .map(|ex| {
                    let soft = integrated_gradients(model, ex, cfg.ig_steps)?;
                    let keep = soft.binarize(t);
                    masked_attribution(model, ex, &soft.scores, &keep, None)
                })
                .collect::<Result<_>>()?
        }
        Method::Ib => {
            let (explainer, report) = train_ib(model, &splits.train, &cfg.ib_config())?;
            let path = cfg.ib_ckpt();
            ensure_parent(&path)?;
            explainer.save_checkpoint(&path)?;
            checkpoints.push(("ib_readout".into(), path));
            if report.floored_dims > 0 {
                let notice = format!(
                    "information bottleneck: {} message dimension(s) had near-zero \
                     variance and were floored to 1e-6; their KL contribution is unreliable",
                    report.floored_dims
                );
                eprintln!("warning: {notice}");
                notices.push(notice);
            }
            let t = pick_threshold(cfg, &splits.validation, &mut |ex| {
                explainer.scores(model, ex)
            })?;
            threshold = Some(t);
            examples
                .iter()
                .map(|ex| explainer.attribution(model, ex, t))
                .collect::<Result<_>>()?
        }
    };

    let mut file = AttributionFile::new(method.as_str(), results);
    file.threshold = threshold;
    file.metadata = serde_json::json!({
        "provenance": provenance(cfg, &checkpoints, &[cfg.seed])?,
        "split": target.as_str(),
        "hyperparameters": method_hyperparameters(cfg, method)?,
    });
    Ok(MethodRun { file, notices, checkpoints })
}

/// Save a method's attribution file at its canonical location (or `out`).
pub fn save_attributions(
    cfg: &RunConfig,
    run: &MethodRun,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let method: Method = run.file.method.parse().map_err(Error::InvalidArg)?;
            cfg.attribution_path(method)
        }
    };
    ensure_parent(&path)?;
    run.file.save(&path)?;
    Ok(path)
}

pub fn explain_cmd(cfg: &RunConfig, method: Method, split: Split, out: Option<&Path>) -> Result<()> {
    if !method.is_explain() {
        return Err(Error::Config(format!(
            "'{method}' is a baseline; use `graphmask baseline --method {method}`"
        )));
    }
    let splits = load_splits(cfg)?;
    let model = load_model(cfg)?;
    let run = if method == Method::GraphMask {
        let cls = load_classifier(cfg)?;
        let ckpt = cfg.classifier_ckpt();
        run_method(cfg, method, &model, Some((&cls, &ckpt)), &splits, split)?
    } else {
        run_method(cfg, method, &model, None, &splits, split)?
    };
    let path = save_attributions(cfg, &run, out)?;
    println!(
        "wrote {} attributions for {} '{split}' examples to {}",
        method,
        run.file.examples.len(),
        path.display(),
    );
    Ok(())
}

pub fn baseline_cmd(cfg: &RunConfig, method: Method, split: Split, out: Option<&Path>) -> Result<()> {
    if method.is_explain() {
        return Err(Error::Config(format!(
            "'{method}' is not a baseline; use `graphmask explain --method {method}`"
        )));
    }
    let splits = load_splits(cfg)?;
    let model = load_model(cfg)?;
    let run = run_method(cfg, method, &model, None, &splits, split)?;
    let path = save_attributions(cfg, &run, out)?;
    match run.file.threshold {
        Some(t) => println!(
            "wrote {} attributions (threshold {t}) for {} '{split}' examples to {}",
            method,
            run.file.examples.len(),
            path.display(),
        ),
        None => println!(
            "wrote {} attributions for {} '{split}' examples to {}",
            method,
            run.file.examples.len(),
            path.display(),
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub struct Evaluation {
    pub reports: Vec<FaithfulnessReport>,
    pub layer_mass: BTreeMap<String, Vec<f64>>,
    pub degradation: Option<Vec<DegradationPoint>>,
}

/// Check an attribution file against the split it claims to cover.
fn check_split(file: &AttributionFile, method: &str, expected: Split) -> Result<()> {
    if let Some(claimed) = file.metadata.get("split").and_then(|v| v.as_str()) {
        if claimed != expected.as_str() {
            return Err(Error::Config(format!(
                "attributions for '{method}' were computed on split '{claimed}' \
                 but evaluation targets '{expected}'"
            )));
        }
    }
    Ok(())
}

/// Score saved attribution files. Degradation curves are computed when the
/// amortized method is among them and its classifier checkpoint exists.
pub fn evaluate_files(
    cfg: &RunConfig,
    methods: &[Method],
    splits: &DatasetSplits,
    split: Split,
) -> Result<Evaluation> {
    let examples = split.of(splits);
    let mut reports = Vec::new();
    let mut layer_mass = BTreeMap::new();
    let mut files = BTreeMap::new();
    for &m in methods {
        let path = cfg.attribution_path(m);
        if !path.exists() {
            let fix = if m.is_explain() { "explain" } else { "baseline" };
            return Err(Error::Config(format!(
                "no attributions for '{m}' at {}; run `graphmask {fix} --method {m}` first",
                path.display()
            )));
        }
        let file = AttributionFile::load(&path)?;
        check_split(&file, m.as_str(), split)?;
        reports.push(faithfulness_report(&file, examples)?);
        layer_mass.insert(m.to_string(), layer_attribution_mass(&file.examples)?);
        files.insert(m.to_string(), file);
    }

    let degradation = if files.contains_key(Method::GraphMask.as_str())
        && cfg.classifier_ckpt().exists()
        && cfg.model_ckpt().exists()
    {
        let model = load_model(cfg)?;
        let cls = load_classifier(cfg)?;
        let attrs = &files[Method::GraphMask.as_str()].examples;
        Some(degradation_curve(
            &model,
            &cls,
            examples,
            attrs,
            &cfg.degradation_fractions,
            cfg.degradation_resamples,
            cfg.seed,
        )?)
    } else {
        None
    };

    Ok(Evaluation { reports, layer_mass, degradation })
}

pub fn degradation_csv(points: &[DegradationPoint]) -> String {
    let mut out = String::from("fraction,mean_accuracy,stdev_accuracy\n");
    for p in points {
        out.push_str(&format!(
            "{:.4},{:.4},{:.4}\n",
            p.fraction, p.mean_accuracy, p.stdev_accuracy
        ));
    }
    out
}

pub(crate) fn print_report_table(reports: &[FaithfulnessReport]) {
    println!(
        "{:<14} {:>9} {:>10} {:>8} {:>8} {:>11} {:>11}",
        "method", "threshold", "precision", "recall", "f1", "masked-acc", "divergence"
    );
    for r in reports {
        let t = r.threshold.map_or("-".to_string(), |t| format!("{t:.1}"));
        println!(
            "{:<14} {:>9} {:>10.2} {:>8.2} {:>8.2} {:>11.2} {:>11.4}",
            r.method, t, r.precision, r.recall, r.f1, r.masked_accuracy, r.mean_divergence
        );
    }
}

/// Write table CSV + JSON report for already-computed evaluations; shared
/// by `evaluate` and the pipeline. Returns (csv path, report path).
pub fn write_evaluation(
    cfg: &RunConfig,
    evaluation: &Evaluation,
    split: Split,
    checkpoints: &[(String, PathBuf)],
    seeds: &[u64],
) -> Result<(PathBuf, PathBuf)> {
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("table1.csv");
    std::fs::write(&csv_path, reports_to_csv(&evaluation.reports))?;
    if let Some(points) = &evaluation.degradation {
        std::fs::write(dir.join("degradation.csv"), degradation_csv(points))?;
    }
    let report_path = write_report(
        cfg,
        "evaluate.json",
        &serde_json::json!({
            "provenance": provenance(cfg, checkpoints, seeds)?,
            "split": split.as_str(),
            "faithfulness": evaluation.reports,
            "layer_attribution_mass": evaluation.layer_mass,
            "degradation": evaluation.degradation,
        }),
    )?;
    Ok((csv_path, report_path))
}

pub fn evaluate_cmd(cfg: &RunConfig, methods: &[Method], split: Split) -> Result<()> {
    let splits = load_splits(cfg)?;
    let evaluation = evaluate_files(cfg, methods, &splits, split)?;
    // Hash whatever checkpoints exist; an attribution-only evaluation has
    // nothing else to pin.
    let mut checkpoints = Vec::new();
    for (name, path) in [
        ("model".to_string(), cfg.model_ckpt()),
        ("classifier".to_string(), cfg.classifier_ckpt()),
        ("ib_readout".to_string(), cfg.ib_ckpt()),
    ] {
        if path.exists() {
            checkpoints.push((name, path));
        }
    }
    let (csv_path, report_path) =
        write_evaluation(cfg, &evaluation, split, &checkpoints, &[cfg.seed])?;
    print_report_table(&evaluation.reports);
    println!("table {}, report {}", csv_path.display(), report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

pub fn compare_cmd(cfg: &RunConfig, files: &[PathBuf], split: Split) -> Result<()> {
    if files.len() < 2 {
        return Err(Error::InvalidArg(
            "compare needs at least two attribution files".into(),
        ));
    }
    let splits = load_splits(cfg)?;
    let examples = split.of(&splits);
    let mut names = Vec::new();
    let mut reports = Vec::new();
    let mut decisions: Vec<Vec<bool>> = Vec::new();
    for path in files {
        let file = AttributionFile::load(path)?;
        check_split(&file, &file.method, split)?;
        reports.push(faithfulness_report(&file, examples)?);
        decisions.push(file.examples.iter().flat_map(|a| a.hard_flat()).collect());
        names.push(file.method.clone());
    }
    let gates = decisions[0].len();
    if decisions.iter().any(|d| d.len() != gates) {
        return Err(Error::InvalidArg(
            "attribution files cover different gate counts and cannot be compared".into(),
        ));
    }

    // Pairwise fraction of gates on which two methods agree.
    let n = decisions.len();
    let mut agreement = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let same = decisions[i]
                .iter()
                .zip(&decisions[j])
                .filter(|(a, b)| a == b)
                .count();
            agreement[i][j] = same as f64 / gates as f64;
        }
    }

    print_report_table(&reports);
    println!("\npairwise decision agreement (fraction of {gates} gates):");
    print!("{:<14}", "");
    for name in &names {
        print!(" {name:>12}");
    }
    println!();
    for (i, name) in names.iter().enumerate() {
        print!("{name:<14}");
        for j in 0..n {
            print!(" {:>12.4}", agreement[i][j]);
        }
        println!();
    }

    let report_path = write_report(
        cfg,
        "compare.json",
        &serde_json::json!({
            "provenance": provenance(cfg, &[], &[cfg.seed])?,
            "split": split.as_str(),
            "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "methods": names,
            "faithfulness": reports,
            "agreement": agreement,
        }),
    )?;
    println!("\nreport {}", report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// render

/// Render chosen examples of an attribution file to SVG; returns the paths.
pub fn render_examples(
    file: &AttributionFile,
    examples: &[StarGraphExample],
    ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if file.examples.len() != examples.len() {
        return Err(Error::Config(format!(
            "attribution file covers {} examples but the split has {}; \
             render against the split it was computed on",
            file.examples.len(),
            examples.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= examples.len() {
            return Err(Error::InvalidArg(format!(
                "unknown example id {id}; available ids: 0..={}",
                examples.len() - 1
            )));
        }
        let title = format!("{} — example {id}", file.method);
        let svg = render_svg(&examples[id], &file.examples[id], &title)?;
        let path = out_dir.join(format!("{}-ex{id:04}.svg", file.method));
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

pub fn render_cmd(
    cfg: &RunConfig,
    attributions: Option<&Path>,
    ids: &[usize],
    split: Split,
    out_dir: Option<&Path>,
) -> Result<()> {
    let default_path = cfg.attribution_path(Method::GraphMask);
    let path = attributions.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::Config(format!(
            "attribution file not found at {}; run `graphmask explain` or pass --attributions",
            path.display()
        )));
    }
    let file = AttributionFile::load(path)?;
    check_split(&file, &file.method, split)?;
    let splits = load_splits(cfg)?;
    let examples = split.of(&splits);
    let default_dir = cfg.renders_dir();
    let out_dir = out_dir.unwrap_or(&default_dir);
    let written = render_examples(&file, examples, ids, out_dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
