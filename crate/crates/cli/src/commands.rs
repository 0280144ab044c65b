//! Command implementations behind the CLI surface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rgpr_core::checkpoint;
use rgpr_core::error::{Error, Result};
use rgpr_core::eval::{
    annotations_from_samples, average_precision, evaluate_on_samples, parse_annotations,
    parse_predictions, predict_poses, predictions_to_json, ApResult, OksConfig,
};
use rgpr_core::gpr::HeadKind;
use rgpr_core::gradcheck;
use rgpr_core::posenet::{build, Model};
use rgpr_core::synth::generate_dataset;
use rgpr_core::train::train_loop;

use crate::config::RunConfig;

pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p)?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Train on a synthetic dataset; writes checkpoint.rgpr, metrics.log,
/// config.txt, and optionally attention.txt into the output directory.
pub fn cmd_train(cfg: &RunConfig, dump_attention: bool) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_kv())?;

    let mut model: Model<f32> = build(&cfg.network, cfg.seed)?;
    let dataset = generate_dataset(
        cfg.dataset_size,
        cfg.network.num_keypoints,
        cfg.network.input_h,
        cfg.network.input_w,
        cfg.dataset_seed,
    );

    let mut metrics = fs::File::create(cfg.out_dir.join("metrics.log"))?;
    let mut attention = if dump_attention {
        Some(fs::File::create(cfg.out_dir.join("attention.txt"))?)
    } else {
        None
    };
    let mut io_err: Option<std::io::Error> = None;
    train_loop(&mut model, &dataset, &cfg.train, cfg.seed, |log, reports| {
        if io_err.is_some() {
            return;
        }
        let mut write_all = || -> std::io::Result<()> {
            writeln!(metrics, "{}", log.to_line())?;
            if let Some(f) = attention.as_mut() {
                writeln!(f, "# epoch={}", log.epoch)?;
                for report in reports {
                    for line in report.dump_lines() {
                        writeln!(f, "{line}")?;
                    }
                }
            }
            Ok(())
        };
        if let Err(e) = write_all() {
            io_err = Some(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    checkpoint::save(&model, cfg.out_dir.join("checkpoint.rgpr"))?;
    println!("trained {} epochs -> {}", cfg.train.epochs, cfg.out_dir.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub synthetic_seed: Option<u64>,
    pub samples: usize,
    pub no_flip: bool,
    pub oks_k: f64,
    pub write_predictions: Option<PathBuf>,
    pub write_annotations: Option<PathBuf>,
}

fn print_ap_table(result: &ApResult) {
    println!("threshold\tAP");
    for (thr, ap) in &result.per_threshold {
        println!("{thr:.2}\t{ap:.6}");
    }
    println!("mean\t{:.6}", result.mean);
}

/// Evaluate either a prediction document against an annotation document,
/// or a checkpoint on a regenerated synthetic set.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match (&args.predictions, &args.checkpoint) {
        (Some(pred_path), None) => {
            let ann_path = args.annotations.as_ref().ok_or_else(|| {
                Error::precondition("eval", "--predictions requires --annotations")
            })?;
            let anns = parse_annotations(&fs::read_to_string(ann_path)?)?;
            let preds = parse_predictions(&fs::read_to_string(pred_path)?)?;
            let k = anns
                .annotations
                .first()
                .map(|a| a.keypoints.len())
                .unwrap_or(0);
            for p in &preds {
                if p.keypoints.len() != k {
                    return Err(Error::Annotation(format!(
                        "prediction for image {} has {} keypoints, annotations have {k}",
                        p.image_id,
                        p.keypoints.len()
                    )));
                }
            }
            let cfg = OksConfig::uniform(k, args.oks_k);
            print_ap_table(&average_precision(&preds, &anns, &cfg)?);
            Ok(())
        }
        (None, Some(ckpt_path)) => {
            let model = checkpoint::load(ckpt_path)?;
            let seed = args.synthetic_seed.ok_or_else(|| {
                Error::precondition("eval", "--checkpoint requires --synthetic-seed")
            })?;
            let k = model.config.num_keypoints;
            let samples = generate_dataset(
                args.samples,
                k,
                model.config.input_h,
                model.config.input_w,
                seed,
            );
            // ground truth comes from the regenerated samples unless an
            // annotation document overrides it
            let anns = match &args.annotations {
                Some(path) => {
                    let anns = parse_annotations(&fs::read_to_string(path)?)?;
                    if let Some(bad) = anns.annotations.iter().find(|a| a.keypoints.len() != k) {
                        return Err(Error::Annotation(format!(
                            "annotation for image {} has {} keypoints, checkpoint expects {k}",
                            bad.image_id,
                            bad.keypoints.len()
                        )));
                    }
                    anns
                }
                None => annotations_from_samples(&samples),
            };
            let cfg = OksConfig::uniform(k, args.oks_k);
            let preds = predict_poses(&model, &samples, !args.no_flip, &[])?;
            if let Some(p) = &args.write_predictions {
                fs::write(p, predictions_to_json(&preds))?;
            }
            if let Some(p) = &args.write_annotations {
                fs::write(p, annotations_to_json(&anns))?;
            }
            print_ap_table(&average_precision(&preds, &anns, &cfg)?);
            Ok(())
        }
        _ => Err(Error::precondition(
            "eval",
            "pass either --predictions with --annotations, or --checkpoint with --synthetic-seed",
        )),
    }
}

fn annotations_to_json(anns: &rgpr_core::eval::AnnotationSet) -> String {
    let entries: Vec<serde_json::Value> = anns
        .annotations
        .iter()
        .map(|a| {
            let triples: Vec<f64> = a
                .keypoints
                .iter()
                .flat_map(|k| [k.x, k.y, k.visibility as f64])
                .collect();
            serde_json::json!({
                "image_id": a.image_id,
                "keypoints": triples,
                "area": a.area,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "annotations": entries }))
        .expect("json encode")
}

/// Exit code 0 when every finite-difference group passes, 2 otherwise.
pub fn cmd_gradcheck(scope: &str) -> Result<i32> {
    let reports = match scope {
        "ops" => gradcheck::check_ops(&gradcheck::DEFAULT_SEEDS),
        "ram" => gradcheck::check_ram(&gradcheck::DEFAULT_SEEDS),
        "gpr" => gradcheck::check_gpr(&gradcheck::DEFAULT_SEEDS),
        "full" => gradcheck::check_full(&gradcheck::FULL_SEEDS),
        other => {
            return Err(Error::precondition(
                "gradcheck",
                format!("unknown scope `{other}` (expected ops|ram|gpr|full)"),
            ))
        }
    };
    let mut failed = Vec::new();
    println!("group\tmax_rel_err\ttol\tstatus");
    for r in &reports {
        println!(
            "{}\t{:.3e}\t{:.0e}\t{}",
            r.group,
            r.max_rel_err,
            r.tol,
            if r.passed() { "pass" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.group.clone());
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradcheck failures: {}", failed.join(", "));
        Ok(2)
    }
}

/// Train and evaluate the 2x2x2 {attention} x {head} x {cutout} grid;
/// prints a TSV table with parameter counts and train-set AP.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    println!("attention\thead\tcutout\tparams\tfinal_loss\tmean_ap");
    for attention in [true, false] {
        for head in [HeadKind::Gpr, HeadKind::RescaleSum] {
            for cutout in [true, false] {
                let mut run = cfg.clone();
                run.network.attention_enabled = attention;
                run.network.head = head;
                run.train.cutout = cutout;
                let mut model: Model<f32> = build(&run.network, run.seed)?;
                let dataset = generate_dataset(
                    run.dataset_size,
                    run.network.num_keypoints,
                    run.network.input_h,
                    run.network.input_w,
                    run.dataset_seed,
                );
                let logs = train_loop(&mut model, &dataset, &run.train, run.seed, |_, _| {})?;
                let final_loss = logs.last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
                let ap = evaluate_on_samples(
                    &model,
                    &dataset,
                    &OksConfig::uniform(run.network.num_keypoints, run.oks_k),
                    true,
                    &[],
                )?;
                println!(
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.4}",
                    if attention { "on" } else { "off" },
                    match head {
                        HeadKind::Gpr => "gpr",
                        HeadKind::RescaleSum => "rescale_sum",
                    },
                    if cutout { "on" } else { "off" },
                    model.count_params(),
                    final_loss,
                    ap.mean
                );
            }
        }
    }
    Ok(())
}
