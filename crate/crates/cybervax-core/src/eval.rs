//! Evaluation protocols: the degradation condition matrix, magnitude
//! sweeps, the ablation against the inpainting baseline, validator
//! scoring, and the face-swap demonstration.
//!
//! Everything here measures one question from a different angle: after an
//! adversary destroys the face region, how much of the original face does
//! neutralisation bring back, and does vaccination make the difference?

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    apply_degradation, faceswap_attack, mask_attack, DegradationKind, DegradationSpec,
    FaceSwapModel,
};
use crate::data::{FaceDataset, ReportRow};
use crate::error::{Error, Result};
use crate::imaging::{FaceMask, ImageTensor};
use crate::metrics::{
    classification_report, identity_similarity, mae, psnr_region, ssim_region,
    ClassificationReport, FaceEmbedder,
};
use crate::models::{ImmuneSystem, Validator};
use crate::pipeline::{neutralise, vaccinate_crop};
use crate::training::InpaintingBaseline;
use crate::util::linspace;

/// Severity of the `hybrid` condition in the matrix. At 0.5 every
/// component lands beyond its training range, so hybrid sits at the harsh
/// end of the conditions by construction.
pub const HYBRID_SEVERITY: f64 = 0.5;

/// The evaluation conditions: no degradation, each photometric kind at
/// its training-range extreme, and the combined hybrid.
pub fn condition_matrix(seed: u64) -> Vec<(String, DegradationSpec)> {
    let spec = |kind, magnitude| {
        DegradationSpec::new(kind, magnitude, seed).expect("matrix magnitudes are legal")
    };
    vec![
        ("none".to_string(), DegradationSpec::none()),
        ("blur".to_string(), spec(DegradationKind::Blur, 1.0)),
        ("brightness".to_string(), spec(DegradationKind::Brightness, 1.2)),
        ("contrast".to_string(), spec(DegradationKind::Contrast, 1.2)),
        ("hue".to_string(), spec(DegradationKind::Hue, 0.05)),
        ("hybrid".to_string(), spec(DegradationKind::Hybrid, HYBRID_SEVERITY)),
    ]
}

/// One (sample, condition, arm) measurement. Face-region metrics compare
/// the neutralised output against the original portrait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    pub condition: String,
    pub vaccinated: bool,
    pub psnr_face: f64,
    pub ssim_face: f64,
    pub mae_face: f64,
    pub identity_sim: Option<f64>,
    pub verdict_prob: Option<f64>,
    pub verdict: Option<bool>,
}

impl ReportRow for EvalRow {
    fn csv_header() -> &'static [&'static str] {
        &[
            "sample",
            "condition",
            "vaccinated",
            "psnr_face",
            "ssim_face",
            "mae_face",
            "identity_sim",
            "verdict_prob",
            "verdict",
        ]
    }
}

/// Mean intensity of the face region (binarised at 0.5).
pub fn face_mean_intensity(image: &ImageTensor, mask: &FaceMask) -> Result<f64> {
    let bin = mask.binarise(0.5);
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((y, x, _), &v) in image.data().indexed_iter() {
        if bin.data()[[y, x]] == 1.0 {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Mask("empty face region".into()));
    }
    Ok(sum / n as f64)
}

/// Run the full condition matrix over a dataset: each sample is taken
/// through vaccinate → degrade → mask attack → neutralise for both the
/// vaccinated and the unvaccinated arm of every condition.
pub fn evaluate_matrix(
    sys: &ImmuneSystem,
    validator: Option<&Validator>,
    dataset: &FaceDataset,
    conditions: &[(String, DegradationSpec)],
    embedder: Option<&dyn FaceEmbedder>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(dataset.len() * conditions.len() * 2);
    for i in 0..dataset.len() {
        let (x0, mask) = dataset.sample(i)?;
        let id = dataset.record(i).id.clone();
        let xv = vaccinate_crop(sys, &x0, &mask)?;
        for (name, spec) in conditions {
            for (vaccinated, x) in [(true, &xv), (false, &x0)] {
                let degraded = apply_degradation(x, spec)?;
                let attacked = mask_attack(&degraded, &mask)?;
                let y = neutralise(sys, &attacked, Some(&mask))?;
                let identity_sim = match embedder {
                    Some(e) => Some(identity_similarity(&y, &x0, e)?),
                    None => None,
                };
                let (verdict_prob, verdict) = match validator {
                    Some(v) => {
                        let p = v.forward(&y)? as f64;
                        (Some(p), Some(p >= 0.5))
                    }
                    None => (None, None),
                };
                rows.push(EvalRow {
                    sample: id.clone(),
                    condition: name.clone(),
                    vaccinated,
                    psnr_face: psnr_region(&y, &x0, Some(&mask))?,
                    ssim_face: ssim_region(&y, &x0, &mask, false)?,
                    mae_face: mae(&y, &x0, Some(&mask))?,
                    identity_sim,
                    verdict_prob,
                    verdict,
                });
            }
        }
    }
    Ok(rows)
}

/// Per-(condition, arm) aggregate of the matrix rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub vaccinated: bool,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_mae: f64,
    pub mean_identity_sim: Option<f64>,
    pub samples: usize,
}

impl ReportRow for ConditionSummary {
    fn csv_header() -> &'static [&'static str] {
        &[
            "condition",
            "vaccinated",
            "mean_psnr",
            "mean_ssim",
            "mean_mae",
            "mean_identity_sim",
            "samples",
        ]
    }
}

pub fn summarise_matrix(rows: &[EvalRow]) -> Vec<ConditionSummary> {
    #[derive(Default)]
    struct Acc {
        psnr: f64,
        ssim: f64,
        mae: f64,
        ident: f64,
        ident_n: usize,
        n: usize,
    }
    let mut acc: BTreeMap<(String, bool), Acc> = BTreeMap::new();
    for r in rows {
        let a = acc.entry((r.condition.clone(), r.vaccinated)).or_default();
        a.psnr += r.psnr_face;
        a.ssim += r.ssim_face;
        a.mae += r.mae_face;
        if let Some(s) = r.identity_sim {
            a.ident += s;
            a.ident_n += 1;
        }
        a.n += 1;
    }
    acc.into_iter()
        .map(|((condition, vaccinated), a)| ConditionSummary {
            condition,
            vaccinated,
            mean_psnr: a.psnr / a.n as f64,
            mean_ssim: a.ssim / a.n as f64,
            mean_mae: a.mae / a.n as f64,
            mean_identity_sim: (a.ident_n > 0).then(|| a.ident / a.ident_n as f64),
            samples: a.n,
        })
        .collect()
}

/// Validator performance over matrix rows that carry a verdict, labelled
/// by their arm.
pub fn matrix_classification(rows: &[EvalRow]) -> Option<ClassificationReport> {
    let scored: Vec<(f64, bool)> = rows
        .iter()
        .filter_map(|r| r.verdict_prob.map(|p| (p, r.vaccinated)))
        .collect();
    (!scored.is_empty()).then(|| classification_report(&scored))
}

// ---------------------------------------------------------------------------
// Magnitude sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: String,
    pub magnitude: f64,
    pub mean_ssim_face: f64,
    pub mean_psnr_face: f64,
}

impl ReportRow for SweepPoint {
    fn csv_header() -> &'static [&'static str] {
        &["kind", "magnitude", "mean_ssim_face", "mean_psnr_face"]
    }
}

/// Neutralisation quality of the vaccinated arm as a degradation ramps
/// across its whole legal range.
pub fn sweep_curves(
    sys: &ImmuneSystem,
    dataset: &FaceDataset,
    kinds: &[DegradationKind],
    points: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if points < 2 {
        return Err(Error::Parameter("a sweep needs at least 2 points".into()));
    }
    let samples: Vec<(ImageTensor, FaceMask, ImageTensor)> = (0..dataset.len())
        .map(|i| {
            let (x0, mask) = dataset.sample(i)?;
            let xv = vaccinate_crop(sys, &x0, &mask)?;
            Ok((x0, mask, xv))
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Data("cannot sweep an empty dataset".into()));
    }

    let mut out = Vec::new();
    for &kind in kinds {
        let (lo, hi) = kind.legal_range();
        for magnitude in linspace(lo as f32, hi as f32, points) {
            let magnitude = magnitude as f64;
            let spec = DegradationSpec::new(kind, magnitude, seed)?;
            let mut ssim_sum = 0.0;
            let mut psnr_sum = 0.0;
            for (x0, mask, xv) in &samples {
                let degraded = apply_degradation(xv, &spec)?;
                let attacked = mask_attack(&degraded, mask)?;
                let y = neutralise(sys, &attacked, Some(mask))?;
                ssim_sum += ssim_region(&y, x0, mask, false)?;
                psnr_sum += psnr_region(&y, x0, Some(mask))?;
            }
            out.push(SweepPoint {
                kind: kind.to_string(),
                magnitude,
                mean_ssim_face: ssim_sum / samples.len() as f64,
                mean_psnr_face: psnr_sum / samples.len() as f64,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation: vaccinated recovery vs blind inpainting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub system_ssim: f64,
    pub baseline_ssim: f64,
    pub system_identity: f64,
    pub baseline_identity: f64,
    pub samples: usize,
}

impl AblationSummary {
    pub fn ssim_gap(&self) -> f64 {
        self.system_ssim - self.baseline_ssim
    }
}

/// Face recovery after a mask attack: the immune system on vaccinated
/// inputs vs the inpainting baseline on clean inputs.
pub fn ablation_comparison(
    sys: &ImmuneSystem,
    baseline: &InpaintingBaseline,
    dataset: &FaceDataset,
    embedder: &dyn FaceEmbedder,
) -> Result<AblationSummary> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compare on an empty dataset".into()));
    }
    let mut sum = AblationSummary {
        system_ssim: 0.0,
        baseline_ssim: 0.0,
        system_identity: 0.0,
        baseline_identity: 0.0,
        samples: dataset.len(),
    };
    for i in 0..dataset.len() {
        let (x0, mask) = dataset.sample(i)?;
        let xv = vaccinate_crop(sys, &x0, &mask)?;
        let y_sys = neutralise(sys, &mask_attack(&xv, &mask)?, Some(&mask))?;
        let y_base = baseline.neutralise(&mask_attack(&x0, &mask)?, &mask)?;
        sum.system_ssim += ssim_region(&y_sys, &x0, &mask, false)?;
        sum.baseline_ssim += ssim_region(&y_base, &x0, &mask, false)?;
        sum.system_identity += identity_similarity(&y_sys, &x0, embedder)?;
        sum.baseline_identity += identity_similarity(&y_base, &x0, embedder)?;
    }
    let n = sum.samples as f64;
    sum.system_ssim /= n;
    sum.baseline_ssim /= n;
    sum.system_identity /= n;
    sum.baseline_identity /= n;
    Ok(sum)
}

// ---------------------------------------------------------------------------
// Validator evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorEval {
    pub report: ClassificationReport,
    /// Mean face intensity of neutralised *unvaccinated* inputs; a
    /// trained system leaves these dark.
    pub unvaccinated_face_intensity: f64,
}

/// Score a validator on balanced neutralised pairs from held-out data.
pub fn evaluate_validator(
    sys: &ImmuneSystem,
    validator: &Validator,
    dataset: &FaceDataset,
) -> Result<ValidatorEval> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut scored = Vec::with_capacity(dataset.len() * 2);
    let mut intensity = 0.0;
    for i in 0..dataset.len() {
        let (x0, mask) = dataset.sample(i)?;
        let xv = vaccinate_crop(sys, &x0, &mask)?;
        let pos = neutralise(sys, &mask_attack(&xv, &mask)?, Some(&mask))?;
        let neg = neutralise(sys, &mask_attack(&x0, &mask)?, Some(&mask))?;
        scored.push((validator.forward(&pos)? as f64, true));
        scored.push((validator.forward(&neg)? as f64, false));
        intensity += face_mean_intensity(&neg, &mask)?;
    }
    Ok(ValidatorEval {
        report: classification_report(&scored),
        unvaccinated_face_intensity: intensity / dataset.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Face-swap demonstration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapDemoRow {
    pub sample: String,
    pub infected_ssim: f64,
    pub neutralised_ssim: f64,
    pub improved: bool,
    pub verdict_prob: Option<f64>,
}

impl ReportRow for SwapDemoRow {
    fn csv_header() -> &'static [&'static str] {
        &["sample", "infected_ssim", "neutralised_ssim", "improved", "verdict_prob"]
    }
}

/// Swap each vaccinated face to `target`, neutralise, and measure how
/// much face fidelity the cure restores.
pub fn faceswap_demo(
    sys: &ImmuneSystem,
    model: &FaceSwapModel,
    dataset: &FaceDataset,
    target: &str,
    validator: Option<&Validator>,
) -> Result<Vec<SwapDemoRow>> {
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let (x0, mask) = dataset.sample(i)?;
        let id = dataset.record(i).id.clone();
        let xv = vaccinate_crop(sys, &x0, &mask)?;
        let infected = faceswap_attack(model, &xv, &mask, target)?;
        let y = neutralise(sys, &infected, Some(&mask))?;
        let infected_ssim = ssim_region(&infected, &x0, &mask, false)?;
        let neutralised_ssim = ssim_region(&y, &x0, &mask, false)?;
        let verdict_prob = match validator {
            Some(v) => Some(v.forward(&y)? as f64),
            None => None,
        };
        rows.push(SwapDemoRow {
            sample: id,
            infected_ssim,
            neutralised_ssim,
            improved: neutralised_ssim > infected_ssim,
            verdict_prob,
        });
    }
    Ok(rows)
}

/// Side-by-side strip (original | infected | neutralised …) with thin
/// separators, for the demo outputs.
pub fn image_strip(images: &[&ImageTensor]) -> Result<ImageTensor> {
    if images.is_empty() {
        return Err(Error::Parameter("empty image strip".into()));
    }
    let (h, c) = (images[0].height(), images[0].channels());
    for img in images {
        if img.height() != h || img.channels() != c {
            return Err(Error::dimension(
                "image strip",
                format!("height {h}, {c} channels"),
                format!("height {}, {} channels", img.height(), img.channels()),
            ));
        }
    }
    let sep = 2usize;
    let total_w: usize =
        images.iter().map(|i| i.width()).sum::<usize>() + sep * (images.len() - 1);
    let mut out = ndarray::Array3::<f32>::ones((h, total_w, c));
    let mut x0 = 0usize;
    for img in images {
        out.slice_mut(ndarray::s![.., x0..x0 + img.width(), ..])
            .assign(img.data());
        x0 += img.width() + sep;
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_faces;
    use crate::metrics::RandomProjectionEmbedder;
    use crate::models::{ImmuneConfig, ValidatorConfig};

    fn toy_setup() -> (ImmuneSystem, FaceDataset) {
        let sys = ImmuneSystem::new(ImmuneConfig::toy(), 8).unwrap();
        let ds = generate_synthetic_faces(2, 16, 31).unwrap();
        (sys, ds)
    }

    #[test]
    fn matrix_has_one_row_per_sample_condition_arm() {
        let (sys, ds) = toy_setup();
        let conditions = condition_matrix(1);
        assert_eq!(conditions.len(), 6);
        let v = Validator::new(ValidatorConfig::mlp(16), 9).unwrap();
        let rows = evaluate_matrix(&sys, Some(&v), &ds, &conditions, None).unwrap();
        assert_eq!(rows.len(), 2 * 6 * 2);
        for r in &rows {
            assert!(r.ssim_face.is_finite() && r.psnr_face.is_finite());
            let p = r.verdict_prob.unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(r.verdict.unwrap(), p >= 0.5);
        }
        // Every (sample, condition, arm) key appears exactly once.
        let mut keys: Vec<_> = rows
            .iter()
            .map(|r| (r.sample.clone(), r.condition.clone(), r.vaccinated))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), rows.len());

        let summary = summarise_matrix(&rows);
        assert_eq!(summary.len(), 6 * 2);
        assert!(summary.iter().all(|s| s.samples == 2));
        assert!(matrix_classification(&rows).is_some());
    }

    #[test]
    fn sweep_covers_the_legal_range() {
        let (sys, ds) = toy_setup();
        let points = sweep_curves(&sys, &ds, &[DegradationKind::Blur], 3, 5).unwrap();
        assert_eq!(points.len(), 3);
        assert_eq!(points[0].magnitude, 0.0);
        assert_eq!(points[2].magnitude, DegradationKind::Blur.legal_range().1);
        assert!(points.iter().all(|p| p.mean_ssim_face.is_finite()));
        assert!(sweep_curves(&sys, &ds, &[DegradationKind::Blur], 1, 5).is_err());
    }

    #[test]
    fn ablation_runs_on_untrained_nets() {
        let (sys, ds) = toy_setup();
        let baseline =
            InpaintingBaseline::new(crate::models::UNetConfig::toy(), 3).unwrap();
        let embedder = RandomProjectionEmbedder::new(16, 32, None, 7).unwrap();
        let summary = ablation_comparison(&sys, &baseline, &ds, &embedder).unwrap();
        assert_eq!(summary.samples, 2);
        for v in [
            summary.system_ssim,
            summary.baseline_ssim,
            summary.system_identity,
            summary.baseline_identity,
        ] {
            assert!(v.is_finite());
        }
        assert!(summary.ssim_gap().is_finite());
    }

    #[test]
    fn validator_eval_balances_classes() {
        let (sys, ds) = toy_setup();
        let v = Validator::new(ValidatorConfig::small_cnn(16), 10).unwrap();
        let eval = evaluate_validator(&sys, &v, &ds).unwrap();
        assert_eq!(eval.report.support_pos, 2);
        assert_eq!(eval.report.support_neg, 2);
        assert!((0.0..=1.0).contains(&eval.unvaccinated_face_intensity));
    }

    #[test]
    fn face_intensity_of_black_region_is_zero() {
        let ds = generate_synthetic_faces(1, 16, 32).unwrap();
        let (x, mask) = ds.sample(0).unwrap();
        let attacked = mask_attack(&x, &mask).unwrap();
        assert_eq!(face_mean_intensity(&attacked, &mask).unwrap(), 0.0);
        assert!(face_mean_intensity(&x, &mask).unwrap() > 0.0);
    }

    #[test]
    fn strip_concatenates_and_separates() {
        let ds = generate_synthetic_faces(1, 16, 33).unwrap();
        let (x, _) = ds.sample(0).unwrap();
        let strip = image_strip(&[&x, &x, &x]).unwrap();
        assert_eq!(strip.height(), 16);
        assert_eq!(strip.width(), 16 * 3 + 2 * 2);
        // Separator columns are white.
        assert_eq!(strip.data()[[8, 16, 0]], 1.0);
        assert_eq!(strip.data()[[8, 17, 1]], 1.0);
        assert!(image_strip(&[]).is_err());
    }
}
