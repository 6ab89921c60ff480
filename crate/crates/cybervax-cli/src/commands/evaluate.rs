//! The evaluation harness: metric matrix over conditions and arms,
//! degradation sweeps, validator scoring, baseline ablation, optional
//! face-swap demo, and the plot set. Everything written here is a pure
//! function of (config, seed, checkpoints), so reruns are byte-identical.

use cybervax_core::attacks::DegradationKind;
use cybervax_core::data::{write_report, ReportFormat};
use cybervax_core::eval::{
    ablation_comparison, condition_matrix, evaluate_matrix, evaluate_validator, faceswap_demo,
    matrix_classification, summarise_matrix, sweep_curves, ConditionSummary,
};
use cybervax_core::masks::ellipse_mask;
use cybervax_core::metrics::RandomProjectionEmbedder;
use cybervax_core::plot::{bar_chart, grouped_bar_chart, line_chart, Series};
use cybervax_core::{Error, Result};

use super::{build_datasets, cap_dataset, load_baseline, load_faceswap, load_immune, load_validator, Ctx};
use crate::config::RunConfig;
use crate::{EvaluateArgs, EXIT_OK};

const SWEEP_KINDS: [DegradationKind; 4] = [
    DegradationKind::Blur,
    DegradationKind::Brightness,
    DegradationKind::Contrast,
    DegradationKind::Hue,
];

fn write_json<T: serde::Serialize>(ctx: &Ctx, name: &str, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    cybervax_core::util::atomic_write(&ctx.out.join(name), &json)
        .map_err(|e| Error::Data(format!("cannot write {name}: {e}")))
}

/// Per-condition means for one arm, in the matrix's condition order.
fn arm_means(
    summaries: &[ConditionSummary],
    order: &[String],
    vaccinated: bool,
    pick: impl Fn(&ConditionSummary) -> f64,
) -> Vec<f64> {
    order
        .iter()
        .map(|cond| {
            summaries
                .iter()
                .find(|s| s.vaccinated == vaccinated && &s.condition == cond)
                .map(&pick)
                .unwrap_or(f64::NAN)
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &mut RunConfig, ctx: &Ctx, args: EvaluateArgs) -> Result<i32> {
    if let Some(points) = args.sweep_points {
        cfg.eval.sweep_points = points;
    }

    let (sys, _) = load_immune(&args.checkpoint)?;
    ctx.adopt_resolution(cfg, sys.config().vaccinator.resolution, "immune-system")?;
    cfg.model = sys.config().clone();

    let validator = match &args.validator {
        Some(path) => {
            let (v, _) = load_validator(path)?;
            if v.config().resolution != cfg.resolution {
                return Err(Error::Parameter(format!(
                    "validator resolution {} does not match the run resolution {}",
                    v.config().resolution,
                    cfg.resolution
                )));
            }
            cfg.validator = v.config().clone();
            Some(v)
        }
        None => None,
    };
    let baseline = match &args.baseline {
        Some(path) => {
            let (b, _) = load_baseline(path)?;
            if b.config().resolution != cfg.resolution {
                return Err(Error::Parameter(format!(
                    "baseline resolution {} does not match the run resolution {}",
                    b.config().resolution,
                    cfg.resolution
                )));
            }
            cfg.baseline = b.config().clone();
            Some(b)
        }
        None => None,
    };
    let swap = match &args.faceswap {
        Some(path) => {
            let (m, _) = load_faceswap(path)?;
            if m.config().resolution != cfg.resolution {
                return Err(Error::Parameter(format!(
                    "face-swap resolution {} does not match the run resolution {}",
                    m.config().resolution,
                    cfg.resolution
                )));
            }
            cfg.faceswap = m.config().clone();
            Some(m)
        }
        None => None,
    };

    // Prefer genuinely held-out data; a flat directory evaluates on
    // whatever it has.
    let bundle = build_datasets(&args.data, cfg.resolution, cfg.seed)?;
    let full = bundle.test.or(bundle.val).unwrap_or(bundle.train);
    let ds = cap_dataset(&full, cfg.eval.samples);
    cfg.write_effective(&ctx.out)?;

    // A fixed central face weighting keeps identity embeddings
    // comparable across samples.
    let res = cfg.resolution;
    let (cy, cx, ry, rx) = cybervax_core::data::fallback_ellipse(res);
    let face = ellipse_mask(res, res, cy, cx, ry, rx)?;
    let embedder =
        RandomProjectionEmbedder::new(res, cfg.eval.embedding_dim, Some(face), cfg.seed)?;

    // Condition matrix over both arms.
    let conditions = condition_matrix(cfg.seed);
    let order: Vec<String> = conditions.iter().map(|(name, _)| name.clone()).collect();
    let rows = evaluate_matrix(&sys, validator.as_ref(), &ds, &conditions, Some(&embedder))?;
    write_report(&rows, &ctx.out.join("matrix.csv"), ReportFormat::Csv)?;
    write_report(&rows, &ctx.out.join("matrix.json"), ReportFormat::Json)?;
    let summaries = summarise_matrix(&rows);
    write_report(&summaries, &ctx.out.join("summary.csv"), ReportFormat::Csv)?;
    write_report(&summaries, &ctx.out.join("summary.json"), ReportFormat::Json)?;

    for (metric, label, file) in [
        (
            &(|s: &ConditionSummary| s.mean_ssim) as &dyn Fn(&ConditionSummary) -> f64,
            "mean face SSIM",
            "ssim-distribution.png",
        ),
        (
            &(|s: &ConditionSummary| s.mean_psnr) as &dyn Fn(&ConditionSummary) -> f64,
            "mean face PSNR (dB)",
            "psnr-distribution.png",
        ),
    ] {
        let series = vec![
            (
                "vaccinated".to_string(),
                arm_means(&summaries, &order, true, metric),
            ),
            (
                "unvaccinated".to_string(),
                arm_means(&summaries, &order, false, metric),
            ),
        ];
        grouped_bar_chart(
            "neutralisation after mask attack, by degradation",
            label,
            &order,
            &series,
            &ctx.out.join(file),
        )?;
    }

    // Degradation sweeps across each kind's full legal range.
    let sweep_ds = cap_dataset(&full, cfg.eval.sweep_samples);
    let sweeps = sweep_curves(&sys, &sweep_ds, &SWEEP_KINDS, cfg.eval.sweep_points, cfg.seed)?;
    write_report(&sweeps, &ctx.out.join("sweeps.csv"), ReportFormat::Csv)?;
    write_report(&sweeps, &ctx.out.join("sweeps.json"), ReportFormat::Json)?;
    for kind in SWEEP_KINDS {
        let name = kind.to_string();
        let points: Vec<(f64, f64)> = sweeps
            .iter()
            .filter(|p| p.kind == name)
            .map(|p| (p.magnitude, p.mean_ssim_face))
            .collect();
        line_chart(
            &format!("neutralised face SSIM vs {name}"),
            &format!("{name} magnitude"),
            "mean face SSIM",
            &[Series::new("vaccinated", points)],
            &ctx.out.join(format!("sweep-{name}.png")),
        )?;
    }

    if let Some(v) = &validator {
        let eval = evaluate_validator(&sys, v, &ds)?;
        write_json(ctx, "validator-eval.json", &eval)?;
        if let Some(report) = matrix_classification(&rows) {
            write_json(ctx, "classification.json", &report)?;
        }
        let bars = vec![
            ("accuracy".to_string(), eval.report.accuracy.unwrap_or(0.0)),
            ("tpr".to_string(), eval.report.tpr.unwrap_or(0.0)),
            ("tnr".to_string(), eval.report.tnr.unwrap_or(0.0)),
        ];
        bar_chart(
            "validator on held-out neutralised images",
            "rate",
            &bars,
            &ctx.out.join("validator-bars.png"),
        )?;
    }

    if let Some(b) = &baseline {
        let ablation = ablation_comparison(&sys, b, &ds, &embedder)?;
        write_json(ctx, "ablation.json", &ablation)?;
    }

    if let Some(m) = &swap {
        let target = m.config().identity_b.clone();
        let demo = faceswap_demo(&sys, m, &ds, &target, validator.as_ref())?;
        write_report(&demo, &ctx.out.join("swap-demo.csv"), ReportFormat::Csv)?;
        write_report(&demo, &ctx.out.join("swap-demo.json"), ReportFormat::Json)?;
    }

    let mean = |cond: &str, vacc: bool| {
        summaries
            .iter()
            .find(|s| s.vaccinated == vacc && s.condition == cond)
            .map(|s| s.mean_ssim)
            .unwrap_or(f64::NAN)
    };
    println!(
        "evaluate: {} samples × {} conditions; vaccinated face SSIM none {:.3} / hybrid {:.3}; reports in {}",
        ds.len(),
        conditions.len(),
        mean("none", true),
        mean("hybrid", true),
        ctx.out.display()
    );
    Ok(EXIT_OK)
}
