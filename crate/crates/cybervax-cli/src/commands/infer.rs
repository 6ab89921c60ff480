//! Batch inference: vaccinate, neutralise, validate, and the attack
//! demo. All four share the per-file discipline — failures are logged
//! and recorded, the batch keeps going, and a partially failed batch
//! exits with [`crate::EXIT_PARTIAL`].

use std::path::{Path, PathBuf};

use cybervax_core::attacks::{faceswap_attack, mask_attack, FaceSwapModel};
use cybervax_core::data::{load_image, save_png, write_report, ReportFormat};
use cybervax_core::eval::image_strip;
use cybervax_core::masks::LandmarkSet;
use cybervax_core::models::{ImmuneSystem, Validator};
use cybervax_core::pipeline::{
    neutralise, process_sequence, validate_with_threshold, PipelineMode, PortraitRecord,
    VerdictRecord,
};
use cybervax_core::{Error, Result};

use super::{load_faceswap, load_immune, load_validator, Ctx};
use crate::config::RunConfig;
use crate::io::{collect_inputs, output_names, resolve_landmarks, BatchRow, Sidecar};
use crate::{AttackArgs, AttackMode, NeutraliseArgs, VaccinateArgs, ValidateArgs};
use crate::{EXIT_OK, EXIT_PARTIAL};

fn sidecar_name(output_name: &str) -> String {
    let stem = output_name.strip_suffix(".png").unwrap_or(output_name);
    format!("{stem}.json")
}

fn check_validator_resolution(v: &Validator, resolution: usize) -> Result<()> {
    if v.config().resolution != resolution {
        return Err(Error::Parameter(format!(
            "validator expects {0}×{0} inputs but the run resolution is {1}",
            v.config().resolution,
            resolution
        )));
    }
    Ok(())
}

/// Shared driver for vaccinate/neutralise.
fn run_pipeline_batch(
    cfg: &RunConfig,
    ctx: &Ctx,
    sys: &ImmuneSystem,
    validator: Option<&Validator>,
    inputs: &[PathBuf],
    landmarks: &[Option<LandmarkSet>],
    mode: PipelineMode,
    command: &str,
) -> Result<i32> {
    let outcomes = process_sequence(
        sys,
        validator,
        inputs.iter().map(|p| load_image(p, None)),
        landmarks,
        mode,
        cfg.resolution,
    );
    let names = output_names(inputs);

    let mut rows = Vec::with_capacity(inputs.len());
    let mut failures = 0usize;
    for ((outcome, input), name) in outcomes.iter().zip(inputs).zip(&names) {
        let mut error = outcome.error.clone();
        let mut output_path = None;
        if let Some(img) = &outcome.output {
            let path = ctx.out.join(name);
            match save_png(img, &path) {
                Ok(()) => output_path = Some(path.display().to_string()),
                Err(e) => {
                    error.get_or_insert_with(|| format!("cannot write {}: {e}", path.display()));
                }
            }
        }
        if let Some(msg) = &error {
            failures += 1;
            eprintln!("error: {}: {msg}", input.display());
        }
        let mut verdict = outcome.verdict.clone();
        if let Some(v) = verdict.as_mut() {
            v.frame_index = outcome.frame_index;
            v.output = output_path.clone();
        }
        let sidecar = Sidecar {
            command: command.to_string(),
            frame_index: outcome.frame_index,
            input: input.display().to_string(),
            output: output_path,
            resolution: cfg.resolution,
            verdict,
            error,
        };
        sidecar.write(&ctx.out.join(sidecar_name(name)))?;
        rows.push(BatchRow::from_sidecar(&sidecar));
    }

    write_report(&rows, &ctx.out.join("report.csv"), ReportFormat::Csv)?;
    write_report(&rows, &ctx.out.join("report.json"), ReportFormat::Json)?;
    println!(
        "{command}: {} of {} frames processed into {}",
        inputs.len() - failures,
        inputs.len(),
        ctx.out.display()
    );
    Ok(if failures > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

pub fn cmd_vaccinate(cfg: &mut RunConfig, ctx: &Ctx, args: VaccinateArgs) -> Result<i32> {
    let (sys, _) = load_immune(&args.checkpoint)?;
    ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
    cfg.model = sys.config().clone();
    let inputs = collect_inputs(&args.input)?;
    let landmarks = resolve_landmarks(&inputs, args.landmarks.as_deref())?;
    cfg.write_effective(&ctx.out)?;
    run_pipeline_batch(
        cfg,
        ctx,
        &sys,
        None,
        &inputs,
        &landmarks,
        PipelineMode::Vaccinate,
        "vaccinate",
    )
}

pub fn cmd_neutralise(cfg: &mut RunConfig, ctx: &Ctx, args: NeutraliseArgs) -> Result<i32> {
    let (sys, _) = load_immune(&args.common.checkpoint)?;
    ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
    cfg.model = sys.config().clone();
    let validator = match &args.validator {
        Some(path) => {
            let (v, _) = load_validator(path)?;
            check_validator_resolution(&v, cfg.resolution)?;
            cfg.validator = v.config().clone();
            Some(v)
        }
        None => None,
    };
    let inputs = collect_inputs(&args.common.input)?;
    let landmarks = resolve_landmarks(&inputs, args.common.landmarks.as_deref())?;
    cfg.write_effective(&ctx.out)?;
    // With a validator on board each frame also gets a verdict.
    let mode = if validator.is_some() {
        PipelineMode::Full
    } else {
        PipelineMode::Neutralise
    };
    run_pipeline_batch(
        cfg,
        ctx,
        &sys,
        validator.as_ref(),
        &inputs,
        &landmarks,
        mode,
        "neutralise",
    )
}

pub fn cmd_validate(cfg: &mut RunConfig, ctx: &Ctx, args: ValidateArgs) -> Result<i32> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    let (validator, _) = load_validator(&args.validator)?;
    ctx.adopt_resolution(cfg, validator.config().resolution, "validator")?;
    cfg.validator = validator.config().clone();
    let inputs = collect_inputs(&args.input)?;
    cfg.write_effective(&ctx.out)?;

    let names = output_names(&inputs);
    let mut rows: Vec<VerdictRecord> = Vec::new();
    let mut failures = 0usize;
    for (i, (input, name)) in inputs.iter().zip(&names).enumerate() {
        let verdict = load_image(input, Some(cfg.resolution))
            .and_then(|img| validate_with_threshold(&validator, &img, args.threshold));
        let (verdict, error) = match verdict {
            Ok(mut v) => {
                v.frame_index = i as u32;
                v.output = Some(input.display().to_string());
                (Some(v), None)
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", input.display());
                (None, Some(e.to_string()))
            }
        };
        let sidecar = Sidecar {
            command: "validate".to_string(),
            frame_index: i as u32,
            input: input.display().to_string(),
            output: None,
            resolution: cfg.resolution,
            verdict: verdict.clone(),
            error,
        };
        sidecar.write(&ctx.out.join(sidecar_name(name)))?;
        if let Some(v) = verdict {
            rows.push(v);
        }
    }

    write_report(&rows, &ctx.out.join("verdicts.csv"), ReportFormat::Csv)?;
    write_report(&rows, &ctx.out.join("verdicts.json"), ReportFormat::Json)?;
    let positive = rows.iter().filter(|v| v.vaccinated).count();
    println!(
        "validate: {positive} of {} frames judged vaccinated (threshold {})",
        inputs.len(),
        args.threshold
    );
    Ok(if failures > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

struct AttackOutcome {
    triptych: PathBuf,
    verdict: Option<VerdictRecord>,
}

fn attack_one(
    cfg: &RunConfig,
    ctx: &Ctx,
    sys: &ImmuneSystem,
    swap: Option<&FaceSwapModel>,
    target: &str,
    validator: Option<&Validator>,
    input: &Path,
    landmarks: Option<&LandmarkSet>,
    index: u32,
    name: &str,
) -> Result<AttackOutcome> {
    let frame = load_image(input, None)?;
    let record = PortraitRecord::prepare(
        &frame,
        landmarks,
        cfg.resolution,
        index,
        Some(input.to_path_buf()),
    )?;
    let before = record.image.clone();
    let (infected, neutralised) = match swap {
        // The mask attack leaves an exact black region, so neutralise by
        // detection — the same path a defender without metadata takes.
        None => {
            let infected = mask_attack(&before, &record.mask)?;
            let neutralised = neutralise(sys, &infected, None)?;
            (infected, neutralised)
        }
        Some(model) => {
            let infected = faceswap_attack(model, &before, &record.mask, target)?;
            let neutralised = neutralise(sys, &infected, Some(&record.mask))?;
            (infected, neutralised)
        }
    };
    let verdict = match validator {
        Some(v) => {
            let mut verdict = validate_with_threshold(v, &neutralised, 0.5)?;
            verdict.frame_index = index;
            Some(verdict)
        }
        None => None,
    };
    let strip = image_strip(&[&before, &infected, &neutralised])?;
    let triptych = ctx.out.join(format!("triptych-{name}"));
    save_png(&strip, &triptych)?;
    Ok(AttackOutcome { triptych, verdict })
}

pub fn cmd_attack(cfg: &mut RunConfig, ctx: &Ctx, args: AttackArgs) -> Result<i32> {
    let (sys, _) = load_immune(&args.checkpoint)?;
    ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
    cfg.model = sys.config().clone();

    let swap = match args.mode {
        AttackMode::Mask => None,
        AttackMode::Faceswap => {
            let path = args.faceswap.as_ref().ok_or_else(|| {
                Error::Parameter("--mode faceswap needs a --faceswap checkpoint".into())
            })?;
            let (model, _) = load_faceswap(path)?;
            if model.config().resolution != cfg.resolution {
                return Err(Error::Parameter(format!(
                    "face-swap model resolution {} does not match the run resolution {}",
                    model.config().resolution,
                    cfg.resolution
                )));
            }
            cfg.faceswap = model.config().clone();
            Some(model)
        }
    };
    let target = match (&args.target, &swap) {
        (Some(t), _) => t.clone(),
        (None, Some(model)) => model.config().identity_b.clone(),
        (None, None) => String::new(),
    };
    let validator = match &args.validator {
        Some(path) => {
            let (v, _) = load_validator(path)?;
            check_validator_resolution(&v, cfg.resolution)?;
            cfg.validator = v.config().clone();
            Some(v)
        }
        None => None,
    };

    let inputs = collect_inputs(&args.input)?;
    let landmarks = resolve_landmarks(&inputs, args.landmarks.as_deref())?;
    cfg.write_effective(&ctx.out)?;

    let names = output_names(&inputs);
    let mut rows = Vec::with_capacity(inputs.len());
    let mut failures = 0usize;
    for (i, (input, name)) in inputs.iter().zip(&names).enumerate() {
        let result = attack_one(
            cfg,
            ctx,
            &sys,
            swap.as_ref(),
            &target,
            validator.as_ref(),
            input,
            landmarks.get(i).and_then(|l| l.as_ref()),
            i as u32,
            name,
        );
        let (output, verdict, error) = match result {
            Ok(outcome) => (
                Some(outcome.triptych.display().to_string()),
                outcome.verdict,
                None,
            ),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", input.display());
                (None, None, Some(e.to_string()))
            }
        };
        let sidecar = Sidecar {
            command: format!("attack-{}", args.mode),
            frame_index: i as u32,
            input: input.display().to_string(),
            output,
            resolution: cfg.resolution,
            verdict,
            error,
        };
        sidecar.write(&ctx.out.join(sidecar_name(name)))?;
        rows.push(BatchRow::from_sidecar(&sidecar));
    }

    write_report(&rows, &ctx.out.join("report.csv"), ReportFormat::Csv)?;
    write_report(&rows, &ctx.out.join("report.json"), ReportFormat::Json)?;
    println!(
        "attack ({}): {} of {} triptychs written to {}",
        args.mode,
        inputs.len() - failures,
        inputs.len(),
        ctx.out.display()
    );
    Ok(if failures > 0 { EXIT_PARTIAL } else { EXIT_OK })
}
