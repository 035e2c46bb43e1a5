//! The end-to-end run: generate, train the model, train gate classifiers
//! (one per stability seed), compute every selected method's attributions,
//! evaluate, and render samples. Stages run sequentially; each is timed,
//! and a failure anywhere aborts with the stage's name and the underlying
//! cause, keeping the library error's exit code.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use graphmask_core::attribution::AttributionFile;
use graphmask_core::error::Result;
use graphmask_core::eval::stability_report;
use graphmask_core::graphmask::explain;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commands::{self, Classifier};
use crate::config::{provenance, Method, RunConfig, Split};
use crate::error::{CliError, CliResult};

fn stage<T>(
    name: &'static str,
    timings: &mut BTreeMap<String, f64>,
    f: impl FnOnce() -> Result<T>,
) -> CliResult<T> {
    println!("[{name}]");
    let t0 = Instant::now();
    let out = f().map_err(|e| CliError::Stage { stage: name, source: e })?;
    let secs = t0.elapsed().as_secs_f64();
    timings.insert(name.to_string(), (secs * 100.0).round() / 100.0);
    println!("[{name}] done in {secs:.1}s");
    Ok(out)
}

pub fn pipeline_cmd(cfg: &RunConfig) -> CliResult<()> {
    let t_total = Instant::now();
    let mut timings = BTreeMap::new();
    let mut notices: Vec<String> = Vec::new();

    let splits = stage("generate", &mut timings, || commands::generate(cfg))?;
    let trained = stage("train-model", &mut timings, || commands::train_model(cfg, &splits))?;

    // Gate classifiers: one per stability seed, plus the primary seed if it
    // is not already among them. Only needed when graphmask is selected.
    let use_gates = cfg.methods.contains(&Method::GraphMask);
    let mut classifiers: BTreeMap<u64, (Classifier, PathBuf)> = BTreeMap::new();
    let mut gate_summaries: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    if use_gates {
        let mut seeds = cfg.seeds.clone();
        if !seeds.contains(&cfg.seed) {
            seeds.insert(0, cfg.seed);
        }
        stage("train-graphmask", &mut timings, || {
            for &seed in &seeds {
                println!("  gate classifier, seed {seed}");
                let ckpt = if seed == cfg.seed {
                    cfg.classifier_ckpt()
                } else {
                    cfg.classifier_ckpt_for_seed(seed)
                };
                let (cls, report) =
                    commands::train_gates(cfg, &trained.model, &splits, seed, &ckpt)?;
                let summary = commands::gate_summary(&report);
                println!(
                    "    chose epoch {} (divergence {:.4}, retained {:.3})",
                    report.chosen_epoch,
                    summary["validation_divergence"].as_f64().unwrap_or(f64::NAN),
                    summary["retained_fraction"].as_f64().unwrap_or(f64::NAN),
                );
                if seed == cfg.seed {
                    commands::write_report(
                        cfg,
                        "train-graphmask.json",
                        &serde_json::json!({
                            "provenance": provenance(
                                cfg,
                                &[
                                    ("model".into(), cfg.model_ckpt()),
                                    ("classifier".into(), ckpt.clone()),
                                ],
                                &[seed],
                            )?,
                            "summary": summary,
                            "epochs": report.epochs,
                        }),
                    )?;
                }
                gate_summaries.insert(seed.to_string(), summary);
                classifiers.insert(seed, (cls, ckpt));
            }
            Ok(())
        })?;
    }

    // Every checkpoint this run produced, for the report's provenance block.
    let mut all_ckpts: Vec<(String, PathBuf)> = vec![("model".into(), cfg.model_ckpt())];
    for (seed, (_, ckpt)) in &classifiers {
        all_ckpts.push((format!("classifier-s{seed}"), ckpt.clone()));
    }

    let mut attr_files: BTreeMap<String, AttributionFile> = BTreeMap::new();
    stage("attributions", &mut timings, || {
        for &m in &cfg.methods {
            println!("  method {m} over {} test examples", splits.test.len());
            let run = if m == Method::GraphMask {
                let (cls, ckpt) = &classifiers[&cfg.seed];
                commands::run_method(cfg, m, &trained.model, Some((cls, ckpt)), &splits, Split::Test)?
            } else {
                commands::run_method(cfg, m, &trained.model, None, &splits, Split::Test)?
            };
            let path = commands::save_attributions(cfg, &run, None)?;
            if let Some(t) = run.file.threshold {
                println!("    threshold {t} -> {}", path.display());
            } else {
                println!("    -> {}", path.display());
            }
            notices.extend(run.notices);
            for (name, p) in run.checkpoints {
                if name != "model" && name != "classifier" {
                    all_ckpts.push((name, p));
                }
            }
            attr_files.insert(m.as_str().to_string(), run.file);
        }
        Ok(())
    })?;

    let evaluation = stage("evaluate", &mut timings, || {
        let evaluation = commands::evaluate_files(cfg, &cfg.methods, &splits, Split::Test)?;
        commands::write_evaluation(cfg, &evaluation, Split::Test, &all_ckpts, &cfg.seeds)?;
        Ok(evaluation)
    })?;

    // Cross-seed stability of the amortized gates' hard decisions.
    let stability = if use_gates && cfg.seeds.len() >= 2 {
        let report = stage("stability", &mut timings, || {
            let mut decisions = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let (cls, _) = &classifiers[&seed];
                let mut flat = Vec::new();
                for ex in &splits.test {
                    flat.extend(explain(&trained.model, cls, ex)?.hard_flat());
                }
                decisions.push(flat);
            }
            let report = stability_report(&cfg.seeds, decisions)?;
            println!(
                "  Fleiss kappa {:.4} over seeds {:?} ({} gates)",
                report.kappa, cfg.seeds, report.num_gates
            );
            commands::write_report(
                cfg,
                "stability.json",
                &serde_json::json!({
                    "provenance": provenance(cfg, &all_ckpts, &cfg.seeds)?,
                    "report": report,
                }),
            )?;
            Ok(report)
        })?;
        Some(report)
    } else {
        let notice = if !use_gates {
            "stability section omitted: graphmask is not among the selected methods".to_string()
        } else {
            format!(
                "stability section omitted: single seed {} (pass --seeds 0..4 for the \
                 five-seed study)",
                cfg.seeds[0]
            )
        };
        println!("note: {notice}");
        notices.push(notice);
        None
    };

    let rendered = stage("render", &mut timings, || {
        let n = cfg.render_count.min(splits.test.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5245_4e44);
        let mut ids = rand::seq::index::sample(&mut rng, splits.test.len(), n).into_vec();
        ids.sort_unstable();
        let dir = cfg.renders_dir();
        let mut written = Vec::new();
        for m in &cfg.methods {
            let file = &attr_files[m.as_str()];
            written.extend(commands::render_examples(file, &splits.test, &ids, &dir)?);
        }
        println!("  {} SVG files in {}", written.len(), dir.display());
        Ok(written)
    })?;

    let total = t_total.elapsed().as_secs_f64();
    let report = serde_json::json!({
        "provenance": provenance(cfg, &all_ckpts, &cfg.seeds)?,
        "dataset": {
            "train": splits.train.len(),
            "validation": splits.validation.len(),
            "test": splits.test.len(),
        },
        "model": {
            "epochs_run": trained.report.epochs_run,
            "best_val_accuracy": trained.report.best_val_accuracy,
            "test_accuracy": trained.test_accuracy,
        },
        "graphmask": if use_gates {
            serde_json::to_value(&gate_summaries).map_err(graphmask_core::error::Error::from)?
        } else {
            serde_json::Value::Null
        },
        "faithfulness": evaluation.reports,
        "layer_attribution_mass": evaluation.layer_mass,
        "stability": stability.as_ref().map(|r| serde_json::json!({
            "seeds": r.seeds,
            "kappa": r.kappa,
            "degenerate": r.degenerate,
            "num_gates": r.num_gates,
        })),
        "degradation": evaluation.degradation,
        "notices": notices,
        "stage_seconds": timings,
        "total_seconds": (total * 100.0).round() / 100.0,
        "rendered": rendered.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let report_path = commands::write_report(cfg, "report.json", &report)?;

    println!();
    commands::print_report_table(&evaluation.reports);
    println!();
    println!("pipeline complete in {total:.1}s");
    println!("  table        {}", cfg.reports_dir().join("table1.csv").display());
    println!("  report       {}", report_path.display());
    println!("  attributions {}", cfg.attributions_dir().display());
    println!("  renders      {}", cfg.renders_dir().display());
    Ok(())
}
