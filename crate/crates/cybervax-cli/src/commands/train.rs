//! The four training commands: immune system, validator, inpainting
//! baseline, and the toy face-swap attacker.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cybervax_core::attacks::train_faceswap;
use cybervax_core::data::{load_image, synthetic_frames};
use cybervax_core::imaging::ImageTensor;
use cybervax_core::models::{ImmuneSystem, ValidatorConfig};
use cybervax_core::training::{
    train_immune_system, train_inpainting_baseline, train_validator, TrainLog,
};
use cybervax_core::{Error, Result};

use super::{build_datasets, load_immune, Ctx};
use crate::config::RunConfig;
use crate::io::collect_inputs;
use crate::{ArchChoice, TrainArgs, TrainBaselineArgs, TrainFaceswapArgs, TrainValidatorArgs};
use crate::EXIT_OK;

fn loss_metrics(log: &TrainLog) -> BTreeMap<String, f64> {
    let mut metrics = BTreeMap::new();
    if let Some(last) = log.entries.last() {
        metrics.insert("loss_total".to_string(), last.loss_total);
        metrics.insert("loss_imp".to_string(), last.loss_imp);
        metrics.insert("loss_rev".to_string(), last.loss_rev);
        metrics.insert("loss_val".to_string(), last.loss_val);
    }
    metrics
}

pub fn cmd_train(cfg: &mut RunConfig, ctx: &Ctx, args: TrainArgs) -> Result<i32> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }

    // Resuming adopts the checkpoint's architecture; a fresh system is
    // built from the merged model section.
    let mut sys = match &args.resume {
        Some(path) => {
            let (sys, _) = load_immune(path)?;
            ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
            cfg.model = sys.config().clone();
            eprintln!("resuming from step {}", sys.step());
            sys
        }
        None => ImmuneSystem::new(cfg.model.clone(), cfg.seed)?,
    };
    cfg.model.validate()?;

    let bundle = build_datasets(&args.data, cfg.resolution, cfg.seed)?;
    cfg.write_effective(&ctx.out)?;

    let log = train_immune_system(
        &mut sys,
        &bundle.train,
        &cfg.train,
        Some(&ctx.out),
        bundle.val.as_ref(),
    )?;

    let ckpt = ctx.out.join("immune.ckpt");
    sys.save(&ckpt, &loss_metrics(&log))?;
    log.save(&ctx.out, "trainlog")?;
    println!(
        "trained on {} faces to step {}; checkpoint {}",
        bundle.train.len(),
        sys.step(),
        ckpt.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train_validator(cfg: &mut RunConfig, ctx: &Ctx, args: TrainValidatorArgs) -> Result<i32> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let (sys, _) = load_immune(&args.checkpoint)?;
    ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
    cfg.model = sys.config().clone();
    match args.arch {
        Some(ArchChoice::Mlp) => cfg.validator = ValidatorConfig::mlp(cfg.resolution),
        Some(ArchChoice::SmallCnn) => cfg.validator = ValidatorConfig::small_cnn(cfg.resolution),
        None => cfg.validator.resolution = cfg.resolution,
    }
    cfg.validator.validate()?;

    let bundle = build_datasets(&args.data, cfg.resolution, cfg.seed)?;
    cfg.write_effective(&ctx.out)?;

    let (validator, log) = train_validator(&sys, &bundle.train, &cfg.validator, &cfg.train)?;
    let ckpt = ctx.out.join("validator.ckpt");
    validator.save(&ckpt, &loss_metrics(&log))?;
    log.save(&ctx.out, "trainlog-validator")?;
    println!(
        "trained {:?} validator to step {}; checkpoint {}",
        cfg.validator.architecture,
        validator.step(),
        ckpt.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train_baseline(cfg: &mut RunConfig, ctx: &Ctx, args: TrainBaselineArgs) -> Result<i32> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.baseline.resolution = cfg.resolution;
    cfg.baseline.validate()?;

    let bundle = build_datasets(&args.data, cfg.resolution, cfg.seed)?;
    cfg.write_effective(&ctx.out)?;

    let (baseline, log) = train_inpainting_baseline(&bundle.train, &cfg.baseline, &cfg.train)?;
    let ckpt = ctx.out.join("baseline.ckpt");
    baseline.save(&ckpt, &loss_metrics(&log))?;
    log.save(&ctx.out, "trainlog-baseline")?;
    println!(
        "trained inpainting baseline to step {}; checkpoint {}",
        baseline.step(),
        ckpt.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train_faceswap(cfg: &mut RunConfig, ctx: &Ctx, args: TrainFaceswapArgs) -> Result<i32> {
    let res = cfg.resolution;
    let load_frames = |dir: &Path| -> Result<Vec<ImageTensor>> {
        collect_inputs(dir)?
            .iter()
            .map(|p| load_image(p, Some(res)))
            .collect()
    };

    let (frames_a, frames_b, id_a, id_b) = match (&args.synthetic, &args.data) {
        (Some(n), None) => (
            synthetic_frames(0, *n, res, cfg.seed)?,
            synthetic_frames(1, *n, res, cfg.seed)?,
            "A".to_string(),
            "B".to_string(),
        ),
        (None, Some(root)) => {
            let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            subdirs.sort();
            if subdirs.len() < 2 {
                return Err(Error::Data(format!(
                    "face-swap training needs two identity subdirectories under {}",
                    root.display()
                )));
            }
            let name = |p: &Path| {
                p.file_name()
                    .and_then(|s| s.to_str())
                    .unwrap_or("identity")
                    .to_string()
            };
            (
                load_frames(&subdirs[0])?,
                load_frames(&subdirs[1])?,
                name(&subdirs[0]),
                name(&subdirs[1]),
            )
        }
        (None, None) => {
            return Err(Error::Parameter(
                "no frames given: pass --synthetic N or --data DIR".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::Parameter(
                "--synthetic and --data are mutually exclusive".into(),
            ))
        }
    };

    cfg.faceswap.identity_a = id_a;
    cfg.faceswap.identity_b = id_b;
    if let Some(steps) = args.steps {
        cfg.faceswap.steps = steps;
    }
    cfg.faceswap.validate()?;
    cfg.write_effective(&ctx.out)?;

    let (model, losses) = train_faceswap(&frames_a, &frames_b, cfg.faceswap.clone(), cfg.seed)?;

    let mut metrics = BTreeMap::new();
    for (idx, label) in ["a", "b"].iter().enumerate() {
        metrics.insert(format!("identity_{label}_initial_mae"), losses[idx].0);
        metrics.insert(format!("identity_{label}_final_mae"), losses[idx].1);
    }
    let ckpt = ctx.out.join("faceswap.ckpt");
    model.save(&ckpt, &metrics)?;

    let mut json = serde_json::to_vec_pretty(&metrics)?;
    json.push(b'\n');
    cybervax_core::util::atomic_write(&ctx.out.join("faceswap-losses.json"), &json)
        .map_err(|e| Error::Data(format!("cannot write faceswap losses: {e}")))?;

    println!(
        "trained face swapper {} ↔ {} to step {}; checkpoint {}",
        model.config().identity_a,
        model.config().identity_b,
        model.step(),
        ckpt.display()
    );
    Ok(EXIT_OK)
}
