//! One function per subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use apdr::dataset::{generate_attrgrid, load_manifest, Dataset, Split, MANIFEST_FILE};
use apdr::evaluation::{dump_masks, emit_report, evaluate, mask_iou, uniform_mask_iou, EvalOptions};
use apdr::model::{end_to_end_grad_check, END_TO_END_TOLERANCE};
use apdr::numerics::gradcheck::{check_op, OP_TOLERANCE, REGISTERED_OPS};
use apdr::training::{load_checkpoint, open_log, save_checkpoint, SchemaVariant, Stage, TrainConfig, Trainer};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::Exit;

pub const LOG_FILE: &str = "log.csv";
const END_TO_END: &str = "end_to_end";

pub fn checkpoint_name(stage: Stage, epoch: usize) -> String {
    format!("ckpt_stage{}_e{epoch}.bin", stage.number())
}

/// Newest checkpoint in `dir`: the latest stage, then the highest epoch.
fn newest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let rest = name.strip_prefix("ckpt_stage")?.strip_suffix(".bin")?;
            let (stage, epoch) = rest.split_once("_e")?;
            Some(((stage.parse::<u8>().ok()?, epoch.parse::<usize>().ok()?), name))
        })
        .max()
        .map(|(_, name)| dir.join(name))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Exit> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Exit::usage(format!("{} needs --dataset", cfg.command)))?;
    let mut dataset = load_manifest(path)?;
    dataset.preload()?;
    Ok(dataset)
}

fn checkpoint_arg(cfg: &RunConfig) -> Result<&Path, Exit> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Exit::usage(format!("{} needs --checkpoint", cfg.command)))
}

pub fn generate(cfg: &RunConfig, force: bool) -> Result<(), Exit> {
    let out = &cfg.out;
    let occupied = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if occupied {
        if !force {
            return Err(Exit::usage(format!(
                "{} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        for dir in ["images", "masks"] {
            let p = out.join(dir);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            }
        }
        for file in [MANIFEST_FILE, CONFIG_FILE] {
            let p = out.join(file);
            if p.is_file() {
                fs::remove_file(&p)?;
            }
        }
    }
    let dataset = generate_attrgrid(&cfg.generator, cfg.seed)?;
    fs::create_dir_all(out)?;
    dataset.write_to(out)?;
    cfg.write()?;
    let m = &dataset.manifest;
    let count = |s| m.indices_of(s).len();
    println!(
        "wrote {} samples to {} ({} train, {} query, {} gallery; {} train identities)",
        m.samples.len(),
        out.display(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        dataset.num_train_ids()
    );
    Ok(())
}

/// Trainer to start from: a resumed checkpoint, the stage-1 checkpoint for a
/// stage-2-only run, or fresh parameters.
fn initial_trainer(cfg: &RunConfig, model: &apdr::model::ModelConfig, train: TrainConfig, first: Stage, resume: bool) -> Result<Trainer, Exit> {
    let from = if resume {
        newest_checkpoint(&cfg.out)
    } else {
        None
    };
    let from = match (from, first) {
        (Some(p), _) => Some(p),
        (None, Stage::One) => None,
        (None, Stage::Two) => {
            let p = match &cfg.checkpoint {
                Some(p) => p.clone(),
                None => cfg.out.join(checkpoint_name(Stage::One, train.stage1_epochs)),
            };
            if !p.is_file() {
                return Err(Exit::usage(format!(
                    "stage 2 needs a finished stage-1 checkpoint, {} does not exist (run `apdr train --stage 1` first)",
                    p.display()
                )));
            }
            Some(p)
        }
    };
    let Some(path) = from else {
        return Ok(Trainer::new(model, train)?);
    };
    log::info!("starting from {}", path.display());
    let ckpt = load_checkpoint(&path)?;
    if ckpt.params.config != *model {
        return Err(Exit::usage(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    trainer.config = train;
    Ok(trainer)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), Exit> {
    let dataset = load_dataset(cfg)?;
    let (variant, loss, run_stage2) = match cfg.preset {
        Some(p) => {
            let spec = p.spec(&cfg.train.loss);
            (spec.schema, spec.loss, spec.run_stage2)
        }
        None => (SchemaVariant::Grouped, cfg.train.loss, true),
    };
    let stages = match cfg.stage {
        None if run_stage2 => vec![Stage::One, Stage::Two],
        None | Some(1) => vec![Stage::One],
        Some(_) if !run_stage2 => {
            return Err(Exit::usage(format!(
                "preset {} trains stage 1 only",
                cfg.preset.map(|p| p.name()).unwrap_or_default()
            )))
        }
        Some(_) => vec![Stage::Two],
    };
    let train_cfg = TrainConfig { loss, ..cfg.train.clone() };
    let model = cfg.model.build(&dataset, variant.apply(dataset.schema()));
    let mut trainer = initial_trainer(cfg, &model, train_cfg, stages[0], resume)?;
    cfg.write()?;
    let mut log = open_log(&cfg.out.join(LOG_FILE))?;
    for stage in stages {
        if stage < trainer.stage {
            continue;
        }
        if stage == Stage::Two {
            trainer.begin_stage2()?;
        }
        let total = trainer.config.epochs(stage);
        trainer.train_stage(&dataset, |t, entry| {
            log.append(entry)?;
            if t.epoch % cfg.checkpoint_every == 0 || t.epoch == total {
                save_checkpoint(&cfg.out.join(checkpoint_name(stage, t.epoch)), &t.checkpoint())?;
            }
            Ok(())
        })?;
        println!(
            "stage {} done: {} epochs, final checkpoint {}",
            stage.number(),
            total,
            cfg.out.join(checkpoint_name(stage, total)).display()
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), Exit> {
    let dataset = load_dataset(cfg)?;
    let path = checkpoint_arg(cfg)?;
    let ckpt = load_checkpoint(path)?;
    let branch = match cfg.preset {
        Some(p) if !cfg.is_set("eval.branch") => p.spec(&cfg.train.loss).branch,
        _ => cfg.eval.branch,
    };
    let opts = EvalOptions {
        branch,
        normalize: cfg.eval.normalize,
        rerank: cfg.eval.rerank.then_some(cfg.eval.rerank_params),
        mask_threshold: cfg.eval.mask_threshold,
        checkpoint: path.display().to_string(),
        seed: cfg.seed,
    };
    let report = evaluate(&ckpt.params, &dataset, &opts)?;
    cfg.write()?;
    emit_report(&report, &cfg.out)?;
    println!(
        "{branch}: rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  mAP {:.4}  ({} queries)",
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.map,
        report.num_queries
    );
    if let Some(r) = &report.rerank {
        println!(
            "re-ranked: rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  mAP {:.4}",
            r.rank(1),
            r.rank(5),
            r.rank(10),
            r.map
        );
    }
    if !report.mask_iou.is_empty() {
        let mean = report.mask_iou.iter().sum::<f64>() / report.mask_iou.len() as f64;
        println!("mean mask IoU {mean:.4}");
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), Exit> {
    let (ops, end_to_end): (Vec<&str>, bool) = match cfg.op.as_deref() {
        None => (REGISTERED_OPS.to_vec(), true),
        Some(END_TO_END) => (Vec::new(), true),
        Some(op) if REGISTERED_OPS.contains(&op) => (vec![op], false),
        Some(op) => {
            return Err(Exit::usage(format!(
                "unknown op '{op}' (expected {END_TO_END} or one of {})",
                REGISTERED_OPS.join(", ")
            )))
        }
    };
    let seeds: Vec<u64> = if cfg.is_set("seed") {
        vec![cfg.seed]
    } else {
        (0..cfg.gradcheck_seeds as u64).collect()
    };
    cfg.write()?;
    let mut rows = Vec::new();
    for &op in &ops {
        for &seed in &seeds {
            rows.push((check_op(op, seed)?, OP_TOLERANCE));
        }
    }
    if end_to_end {
        for &seed in &seeds {
            rows.push((end_to_end_grad_check(seed)?, END_TO_END_TOLERANCE));
        }
    }

    let path = cfg.out.join("gradcheck.csv");
    let mut csv = fs::File::create(&path)?;
    writeln!(csv, "op,seed,max_rel_error,elements,tolerance,passed")?;
    println!("{:<24} {:>5} {:>12} {:>9}  result", "op", "seed", "rel error", "elements");
    let mut failed = 0;
    for (r, tol) in &rows {
        let ok = r.passed(*tol);
        failed += usize::from(!ok);
        writeln!(csv, "{},{},{:e},{},{:e},{ok}", r.op, r.seed, r.max_rel_error, r.elements, tol)?;
        println!(
            "{:<24} {:>5} {:>12.3e} {:>9}  {}",
            r.op,
            r.seed,
            r.max_rel_error,
            r.elements,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    if failed > 0 {
        return Err(Exit {
            code: 1,
            message: format!("{failed} gradient checks exceeded their tolerance"),
        });
    }
    Ok(())
}

pub fn inspect_masks(cfg: &RunConfig) -> Result<(), Exit> {
    let dataset = load_dataset(cfg)?;
    let ckpt = load_checkpoint(checkpoint_arg(cfg)?)?;
    let params = &ckpt.params;
    let query = dataset.manifest.indices_of(Split::Query);
    if query.is_empty() || cfg.probes == 0 {
        return Err(Exit::usage("need at least one query sample and one probe"));
    }
    let n = cfg.probes.min(query.len());
    let probes: Vec<usize> = (0..n).map(|i| query[i * query.len() / n]).collect();
    cfg.write()?;
    let dir = cfg.out.join("masks");
    let files = dump_masks(params, &dataset, &probes, &dir)?;
    println!(
        "wrote {} mask maps ({} per probe) to {}",
        files.len(),
        params.config.num_masks,
        dir.display()
    );
    if !dataset.has_gt_masks() {
        log::warn!("dataset has no ground-truth masks, IoU skipped");
        return Ok(());
    }
    if params.config.schema != *dataset.schema() {
        log::warn!("checkpoint groups masks differently from the dataset's ground truth, IoU skipped");
        return Ok(());
    }
    let iou = mask_iou(params, &dataset, cfg.eval.mask_threshold)?;
    let uniform = uniform_mask_iou(&dataset)?;
    let path = cfg.out.join("mask_iou.csv");
    let mut csv = fs::File::create(&path)?;
    writeln!(csv, "mask,name,iou,uniform_iou")?;
    println!("{:<4} {:<14} {:>8} {:>8} {:>6}", "mask", "name", "IoU", "uniform", "ratio");
    for (k, (a, u)) in iou.iter().zip(&uniform).enumerate() {
        let name = dataset.schema().mask_name(k);
        writeln!(csv, "{k},{name},{a},{u}")?;
        println!("{k:<4} {name:<14} {a:>8.4} {u:>8.4} {:>6.2}", a / u);
    }
    Ok(())
}
