//! End-to-end training: the vaccinator/neutraliser pair against the
//! masking adversary, the validator classifier, and the inpainting
//! baseline used for comparison.
//!
//! Every random draw is derived from the run seed plus a purpose tag and
//! the step index, so a run is a pure function of `(config, data order)`
//! and can be resumed from any checkpoint bit-exactly: the Adam moments
//! live in the parameter archive and the step counter in the sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{degradation_node, sample_training_transform, DegradationSpec};
use crate::data::{write_report, FaceDataset, ReportFormat, ReportRow};
use crate::error::{Error, Result};
use crate::imaging::{FaceMask, ImageTensor};
use crate::masks::{apply_affine_to_mask, sample_affine, AffineRanges};
use crate::metrics::{
    composite_loss_node, metric_record, LossBreakdown, LossWeights, MetricRecord, Region,
};
use crate::models::{
    images_to_nchw, masks_to_nchw, read_checkpoint, write_checkpoint, CheckpointMeta,
    ImmuneSystem, UNet, UNetConfig, Validator, ValidatorConfig, CHECKPOINT_FORMAT_VERSION,
};
use crate::nn::{Adam, AdamConfig, Graph, GraphParams, NodeId, ParamStore};
use crate::util::{derive_seed, derive_seed_indexed};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Hyperparameters for one training run. Serialises to the JSON config
/// file format; missing fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimiser: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint (and validation-metric) cadence, in steps.
    pub checkpoint_every: u64,
    /// Randomise masks and degrade the vaccinated image during training.
    pub augment: bool,
    /// Feed the neutraliser the full degraded image rather than the
    /// masked one. Off by default: training inputs then match what the
    /// neutraliser sees at inference time, where the face is blacked out.
    pub literal_neutraliser_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            optimiser: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 50,
            augment: true,
            literal_neutraliser_input: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Parameter("checkpoint_every must be positive".into()));
        }
        let o = &self.optimiser;
        if !(o.lr > 0.0) || !(o.eps > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate and eps must be positive (lr={}, eps={})",
                o.lr, o.eps
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Parameter(format!(
                "adam betas must lie in [0, 1) (beta1={}, beta2={})",
                o.beta1, o.beta2
            )));
        }
        let w = &self.weights;
        if w.imp < 0.0 || w.rev < 0.0 || w.val < 0.0 || !(w.imp + w.rev + w.val).is_finite() {
            return Err(Error::Parameter(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        Ok(())
    }

    /// Read a config from a JSON file (absent fields take defaults).
    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::util::atomic_write(path, &json)
            .map_err(|e| Error::Data(format!("cannot write config {}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Logs
// ---------------------------------------------------------------------------

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One optimiser step, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss_imp: f64,
    pub loss_rev: f64,
    pub loss_val: f64,
    pub loss_total: f64,
    pub w_imp: f64,
    pub w_rev: f64,
    pub w_val: f64,
    pub grad_norm: f64,
    pub transform_kind: String,
    pub transform_magnitude: f64,
    /// Wall clock; excluded from canonical comparison.
    pub timestamp_ms: u64,
}

impl TrainLogEntry {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            imp: self.loss_imp,
            rev: self.loss_rev,
            val: self.loss_val,
            weights: LossWeights { imp: self.w_imp, rev: self.w_rev, val: self.w_val },
            total: self.loss_total,
        }
    }

    fn canon(&self) -> TrainLogEntry {
        TrainLogEntry { timestamp_ms: 0, ..self.clone() }
    }
}

impl ReportRow for TrainLogEntry {
    fn csv_header() -> &'static [&'static str] {
        &[
            "step",
            "loss_imp",
            "loss_rev",
            "loss_val",
            "loss_total",
            "w_imp",
            "w_rev",
            "w_val",
            "grad_norm",
            "transform_kind",
            "transform_magnitude",
            "timestamp_ms",
        ]
    }
}

/// A periodic held-out measurement taken at a checkpoint boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub region: Region,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub identity_sim: Option<f64>,
}

impl ValidationRecord {
    pub fn from_metric(step: u64, r: &MetricRecord) -> ValidationRecord {
        ValidationRecord {
            step,
            region: r.region,
            psnr: r.psnr,
            ssim: r.ssim,
            mae: r.mae,
            identity_sim: r.identity_sim,
        }
    }
}

impl ReportRow for ValidationRecord {
    fn csv_header() -> &'static [&'static str] {
        &["step", "region", "psnr", "ssim", "mae", "identity_sim"]
    }
}

/// The full record of a run: per-step losses plus periodic validation
/// metrics. Steps are strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainLog {
    pub fn push(&mut self, entry: TrainLogEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.step <= last.step {
                return Err(Error::Train(format!(
                    "log steps must strictly increase ({} after {})",
                    entry.step, last.step
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Equality up to wall-clock timestamps.
    pub fn canonical_eq(&self, other: &TrainLog) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.canon() == b.canon())
            && self.validation == other.validation
    }

    /// Persist as `{stem}.json` (everything), `{stem}.csv` (per-step
    /// entries) and `{stem}-validation.csv` (when any validation records
    /// exist). Returns the written paths.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
        let mut written = Vec::new();
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_vec_pretty(self)?;
        crate::util::atomic_write(&json_path, &json)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", json_path.display())))?;
        written.push(json_path);
        written.push(write_report(
            &self.entries,
            &dir.join(format!("{stem}.csv")),
            ReportFormat::Csv,
        )?);
        if !self.validation.is_empty() {
            written.push(write_report(
                &self.validation,
                &dir.join(format!("{stem}-validation.csv")),
                ReportFormat::Csv,
            )?);
        }
        Ok(written)
    }

    pub fn load(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Shared step machinery
// ---------------------------------------------------------------------------

/// Deterministic batch for a given step: distinct indices when the set is
/// large enough, sampled with replacement otherwise.
fn batch_indices(seed: u64, tag: &str, step: u64, len: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed_indexed(seed, tag, step));
    if k <= len {
        rand::seq::index::sample(&mut rng, len, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..len)).collect()
    }
}

fn blend_node<S: crate::nn::Scalar>(
    g: &mut Graph<S>,
    face: NodeId,
    other: NodeId,
    m: NodeId,
    mbar: NodeId,
) -> Result<NodeId> {
    let a = g.mul(face, m)?;
    let b = g.mul(other, mbar)?;
    g.add(a, b)
}

fn ensure_finite(step: u64, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail: Vec<String> = values.iter().map(|(n, v)| format!("{n}={v}")).collect();
    Err(Error::Train(format!(
        "non-finite {what} at step {}: {}",
        step + 1,
        detail.join(", ")
    )))
}

/// What one optimiser step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub transform: DegradationSpec,
}

/// One joint update of vaccinator and neutraliser on a batch, following
/// the adversarial recipe: vaccinate, keep the original face, degrade,
/// neutralise both the vaccinated and the clean image, and descend the
/// weighted sum of imperceptibility, recovery, and validation losses.
pub fn immune_step(
    sys: &mut ImmuneSystem,
    adam: &mut Adam,
    batch: &[(ImageTensor, FaceMask)],
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let images: Vec<&ImageTensor> = batch.iter().map(|(i, _)| i).collect();
    let masks: Vec<&FaceMask> = batch.iter().map(|(_, m)| m).collect();

    // Randomised masks m_rnd: one affine jitter per sample per step.
    let ranges = AffineRanges::default();
    let m_rnd: Vec<FaceMask> = if config.augment {
        batch
            .iter()
            .enumerate()
            .map(|(i, (_, m))| {
                let s = derive_seed_indexed(
                    config.seed,
                    "affine",
                    step * config.batch_size as u64 + i as u64,
                );
                let mut rng = ChaCha12Rng::seed_from_u64(s);
                apply_affine_to_mask(m, &sample_affine(&mut rng, &ranges))
            })
            .collect::<Result<_>>()?
    } else {
        masks.iter().map(|&m| m.clone()).collect()
    };
    let transform = if config.augment {
        sample_training_transform(derive_seed_indexed(config.seed, "aug", step))
    } else {
        DegradationSpec::none()
    };

    let x0_arr = images_to_nchw(&images)?;
    let m_arr = masks_to_nchw(&masks)?;
    let mrnd_refs: Vec<&FaceMask> = m_rnd.iter().collect();
    let mrnd_arr = masks_to_nchw(&mrnd_refs)?;

    let mut g = Graph::<f32>::new();
    let mut gp = GraphParams::new();
    let x0 = g.input(x0_arr, false);
    let m = g.input(m_arr.clone(), false);
    let mbar = g.input(m_arr.mapv(|v| 1.0 - v), false);
    let m_rnd_n = g.input(mrnd_arr.clone(), false);
    let mbar_rnd = g.input(mrnd_arr.mapv(|v| 1.0 - v), false);

    // x• carries the untouched face and the payload in the background.
    let vac_in = g.concat_c(x0, m)?;
    let xv_raw = sys.vaccinator().forward(&mut g, &mut gp, sys.params(), vac_in)?;
    let xv = blend_node(&mut g, x0, xv_raw, m, mbar)?;

    // The adversary's view: degraded, face blacked out under m_rnd.
    let xv_deg = degradation_node(&mut g, xv, &transform)?;
    let neut_in_img = if config.literal_neutraliser_input {
        xv_deg
    } else {
        g.mul(xv_deg, mbar_rnd)?
    };
    let neut_in = g.concat_c(neut_in_img, m_rnd_n)?;
    let yv_raw = sys.neutraliser().forward(&mut g, &mut gp, sys.params(), neut_in)?;
    // Recovery target blends over the *undegraded* vaccinated image.
    let yv = blend_node(&mut g, yv_raw, xv, m_rnd_n, mbar_rnd)?;

    // Same treatment for the clean image: the neutraliser must leave an
    // unvaccinated face empty.
    let x0_masked = g.mul(x0, mbar_rnd)?;
    let neut0_in_img = if config.literal_neutraliser_input { x0 } else { x0_masked };
    let neut0_in = g.concat_c(neut0_in_img, m_rnd_n)?;
    let y0_raw = sys.neutraliser().forward(&mut g, &mut gp, sys.params(), neut0_in)?;
    let y0 = blend_node(&mut g, y0_raw, x0, m_rnd_n, mbar_rnd)?;

    let nodes = composite_loss_node(&mut g, x0, xv, yv, y0, mbar_rnd, config.weights)?;
    let (imp, rev, val) = (
        g.scalar(nodes.imp) as f64,
        g.scalar(nodes.rev) as f64,
        g.scalar(nodes.val) as f64,
    );
    let breakdown = LossBreakdown::new(imp, rev, val, config.weights);
    ensure_finite(
        step,
        "loss",
        &[("imp", imp), ("rev", rev), ("val", val), ("total", breakdown.total)],
    )?;

    g.backward(nodes.total)?;
    sys.params_mut().zero_grads();
    gp.harvest(&g, sys.params_mut())?;
    let grad_norm = sys.params().grad_norm();
    ensure_finite(step, "gradient", &[("grad_norm", grad_norm)])?;
    adam.step(sys.params_mut());
    sys.set_step(step + 1)?;

    Ok(StepOutcome { breakdown, grad_norm, transform })
}

fn entry_from_outcome(step: u64, o: &StepOutcome) -> TrainLogEntry {
    TrainLogEntry {
        step,
        loss_imp: o.breakdown.imp,
        loss_rev: o.breakdown.rev,
        loss_val: o.breakdown.val,
        loss_total: o.breakdown.total,
        w_imp: o.breakdown.weights.imp,
        w_rev: o.breakdown.weights.rev,
        w_val: o.breakdown.weights.val,
        grad_norm: o.grad_norm,
        transform_kind: o.transform.kind.to_string(),
        transform_magnitude: o.transform.magnitude,
        timestamp_ms: now_ms(),
    }
}

// ---------------------------------------------------------------------------
// Immune-system training
// ---------------------------------------------------------------------------

fn materialise(dataset: &FaceDataset) -> Result<Vec<(ImageTensor, FaceMask)>> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    (0..dataset.len()).map(|i| dataset.sample(i)).collect()
}

/// Round-trip measurements on held-out samples: how invisible the vaccine
/// is (full frame) and how well the face survives a masking attack.
pub fn validation_records(
    sys: &ImmuneSystem,
    samples: &[(ImageTensor, FaceMask)],
) -> Result<Vec<MetricRecord>> {
    let mut acc: BTreeMap<Region, (f64, f64, f64, usize)> = BTreeMap::new();
    for (x, mask) in samples {
        let xv = crate::pipeline::vaccinate_crop(sys, x, mask)?;
        let attacked = crate::attacks::mask_attack(&xv, mask)?;
        let y = crate::pipeline::neutralise(sys, &attacked, Some(mask))?;
        for (region, a, b) in [(Region::Full, &xv, x), (Region::Face, &y, x)] {
            let r = metric_record(a, b, Some(mask), region, None)?;
            let e = acc.entry(region).or_insert((0.0, 0.0, 0.0, 0));
            e.0 += r.psnr;
            e.1 += r.ssim;
            e.2 += r.mae;
            e.3 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(region, (psnr, ssim, mae, n))| MetricRecord {
            region,
            psnr: psnr / n as f64,
            ssim: ssim / n as f64,
            mae: mae / n as f64,
            identity_sim: None,
        })
        .collect())
}

/// Train the vaccinator/neutraliser pair in place. Picks up at
/// `sys.step()`, so a system loaded from a checkpoint resumes exactly;
/// the returned log covers only the steps run here. With `out_dir` set,
/// checkpoints are written at the configured cadence (`step-NNNNNN.ckpt`)
/// and a crash checkpoint on a non-finite loss.
pub fn train_immune_system(
    sys: &mut ImmuneSystem,
    dataset: &FaceDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    holdout: Option<&FaceDataset>,
) -> Result<TrainLog> {
    config.validate()?;
    let res = sys.config().vaccinator.resolution;
    if dataset.resolution() != res {
        return Err(Error::dimension(
            "training dataset resolution",
            res.to_string(),
            dataset.resolution().to_string(),
        ));
    }
    let samples = materialise(dataset)?;
    let holdout_samples = match holdout {
        Some(d) => {
            let all = materialise(d)?;
            all.into_iter().take(4).collect()
        }
        None => Vec::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    }

    let mut adam = Adam::new(config.optimiser);
    adam.t = sys.step();
    let mut log = TrainLog::default();
    let start = sys.step();
    for step in start..config.steps {
        let idx = batch_indices(config.seed, "batch", step, samples.len(), config.batch_size);
        let batch: Vec<(ImageTensor, FaceMask)> =
            idx.into_iter().map(|i| samples[i].clone()).collect();
        let outcome = match immune_step(sys, &mut adam, &batch, config, step) {
            Ok(o) => o,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let crash = dir.join(format!("crash-step-{:06}.ckpt", step + 1));
                    let mut metrics = BTreeMap::new();
                    metrics.insert("crash_step".to_string(), (step + 1) as f64);
                    // Best effort: the snapshot is for diagnosis.
                    if sys.save(&crash, &metrics).is_ok() {
                        let _ = log.save(dir, "trainlog-crash");
                        return Err(Error::Train(format!(
                            "{e}; diagnostic snapshot at {}",
                            crash.display()
                        )));
                    }
                }
                return Err(e);
            }
        };
        log.push(entry_from_outcome(step + 1, &outcome))?;

        let boundary = (step + 1) % config.checkpoint_every == 0 || step + 1 == config.steps;
        if boundary {
            if !holdout_samples.is_empty() {
                for r in validation_records(sys, &holdout_samples)? {
                    log.validation.push(ValidationRecord::from_metric(step + 1, &r));
                }
            }
            if let Some(dir) = out_dir {
                let mut metrics = BTreeMap::new();
                metrics.insert("loss_total".to_string(), outcome.breakdown.total);
                metrics.insert("loss_imp".to_string(), outcome.breakdown.imp);
                metrics.insert("loss_rev".to_string(), outcome.breakdown.rev);
                metrics.insert("loss_val".to_string(), outcome.breakdown.val);
                sys.save(&dir.join(format!("step-{:06}.ckpt", step + 1)), &metrics)?;
            }
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Validator training
// ---------------------------------------------------------------------------

/// Build the validator's labelled set from an immune system: neutralised
/// vaccinated images are positives, neutralised clean images negatives.
pub fn validator_training_samples(
    sys: &ImmuneSystem,
    dataset: &FaceDataset,
) -> Result<Vec<(ImageTensor, bool)>> {
    let samples = materialise(dataset)?;
    let mut out = Vec::with_capacity(samples.len() * 2);
    for (x, mask) in &samples {
        let xv = crate::pipeline::vaccinate_crop(sys, x, mask)?;
        out.push((crate::pipeline::neutralise(sys, &xv, Some(mask))?, true));
        out.push((crate::pipeline::neutralise(sys, x, Some(mask))?, false));
    }
    Ok(out)
}

/// Fit a validator on labelled images with binary cross-entropy. Refuses
/// sets more imbalanced than 10:1.
pub fn train_validator_on_samples(
    samples: &[(ImageTensor, bool)],
    arch: &ValidatorConfig,
    config: &TrainConfig,
) -> Result<(Validator, TrainLog)> {
    config.validate()?;
    let pos = samples.iter().filter(|(_, l)| *l).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 || pos > 10 * neg || neg > 10 * pos {
        return Err(Error::Data(format!(
            "validator training set too imbalanced: {pos} positive vs {neg} negative"
        )));
    }
    let mut v = Validator::new(arch.clone(), derive_seed(config.seed, "validator"))?;
    let mut adam = Adam::new(config.optimiser);
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        let idx = batch_indices(config.seed, "validator.batch", step, samples.len(), config.batch_size);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &samples[i].0).collect();
        let labels: Vec<f32> = idx.iter().map(|&i| samples[i].1 as u8 as f32).collect();
        let input_arr = images_to_nchw(&imgs)?;
        let target_arr =
            ndarray::Array4::from_shape_vec((labels.len(), 1, 1, 1), labels).expect("shape");

        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let input = g.input(input_arr, false);
        let targets = g.input(target_arr, false);
        let logits = v.forward_graph(&mut g, &mut gp, v.params(), input)?;
        let loss = g.bce_with_logits(logits, targets)?;
        let bce = g.scalar(loss) as f64;
        ensure_finite(step, "validator loss", &[("bce", bce)])?;
        g.backward(loss)?;
        v.params_mut().zero_grads();
        gp.harvest(&g, v.params_mut())?;
        let grad_norm = v.params().grad_norm();
        ensure_finite(step, "validator gradient", &[("grad_norm", grad_norm)])?;
        adam.step(v.params_mut());
        v.set_step(step + 1);

        log.push(TrainLogEntry {
            step: step + 1,
            loss_imp: 0.0,
            loss_rev: 0.0,
            loss_val: 0.0,
            loss_total: bce,
            w_imp: 0.0,
            w_rev: 0.0,
            w_val: 0.0,
            grad_norm,
            transform_kind: "none".to_string(),
            transform_magnitude: 0.0,
            timestamp_ms: now_ms(),
        })?;
    }
    Ok((v, log))
}

/// End-to-end validator training against a trained immune system.
pub fn train_validator(
    sys: &ImmuneSystem,
    dataset: &FaceDataset,
    arch: &ValidatorConfig,
    config: &TrainConfig,
) -> Result<(Validator, TrainLog)> {
    let samples = validator_training_samples(sys, dataset)?;
    train_validator_on_samples(&samples, arch, config)
}

// ---------------------------------------------------------------------------
// Inpainting baseline
// ---------------------------------------------------------------------------

/// A plain inpainter: the neutraliser architecture trained only to fill
/// blacked-out faces of unvaccinated images. Recovery beyond this level
/// is what vaccination buys.
#[derive(Debug, Clone)]
pub struct InpaintingBaseline {
    config: UNetConfig,
    params: ParamStore<f32>,
    net: UNet,
    step: u64,
}

impl InpaintingBaseline {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "init.baseline"));
        let net = UNet::init(&mut params, &mut rng, "baseline", config.clone())?;
        Ok(InpaintingBaseline { config, params, net, step: 0 })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Fill the masked face region; non-face pixels pass through.
    pub fn neutralise(&self, image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
        let masked = crate::pipeline::mul_mask(image, &mask.complement())?;
        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let x = g.input(crate::models::image_to_nchw(&masked), false);
        let m = g.input(crate::models::mask_to_nchw(mask), false);
        let input = g.concat_c(x, m)?;
        let raw = self.net.forward(&mut g, &mut gp, &self.params, input)?;
        let out = crate::models::nchw_to_images(g.value(raw)).remove(0);
        crate::imaging::blend(&out, image, mask)
    }

    pub fn save(&self, path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "inpainting_baseline".to_string(),
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            metrics: metrics.clone(),
        };
        write_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (params, meta) = read_checkpoint(path, "inpainting_baseline")?;
        let config: UNetConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad baseline config in sidecar: {e}")))?;
        config.validate()?;
        let net = UNet::attach(&params, "baseline", config.clone())?;
        Ok((InpaintingBaseline { config, params, net, step: meta.step }, meta))
    }
}

/// Train the baseline with the recovery loss alone: blacked-out clean
/// faces in, original images as the target.
pub fn train_inpainting_baseline(
    dataset: &FaceDataset,
    arch: &UNetConfig,
    config: &TrainConfig,
) -> Result<(InpaintingBaseline, TrainLog)> {
    config.validate()?;
    if dataset.resolution() != arch.resolution {
        return Err(Error::dimension(
            "baseline dataset resolution",
            arch.resolution.to_string(),
            dataset.resolution().to_string(),
        ));
    }
    let samples = materialise(dataset)?;
    let mut baseline = InpaintingBaseline::new(arch.clone(), derive_seed(config.seed, "baseline"))?;
    let mut adam = Adam::new(config.optimiser);
    let mut log = TrainLog::default();
    let weights = LossWeights { imp: 0.0, rev: 1.0, val: 0.0 };

    for step in 0..config.steps {
        let idx = batch_indices(config.seed, "baseline.batch", step, samples.len(), config.batch_size);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &samples[i].0).collect();
        let masks: Vec<&FaceMask> = idx.iter().map(|&i| &samples[i].1).collect();
        let x_arr = images_to_nchw(&imgs)?;
        let m_arr = masks_to_nchw(&masks)?;

        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let x0 = g.input(x_arr, false);
        let m = g.input(m_arr.clone(), false);
        let mbar = g.input(m_arr.mapv(|v| 1.0 - v), false);
        let masked = g.mul(x0, mbar)?;
        let input = g.concat_c(masked, m)?;
        let raw = baseline.net.forward(&mut g, &mut gp, &baseline.params, input)?;
        let y = blend_node(&mut g, raw, x0, m, mbar)?;
        let rev = crate::metrics::distance_node(&mut g, y, x0)?;
        let rev_val = g.scalar(rev) as f64;
        ensure_finite(step, "baseline loss", &[("rev", rev_val)])?;
        g.backward(rev)?;
        baseline.params.zero_grads();
        gp.harvest(&g, &mut baseline.params)?;
        let grad_norm = baseline.params.grad_norm();
        ensure_finite(step, "baseline gradient", &[("grad_norm", grad_norm)])?;
        adam.step(&mut baseline.params);
        baseline.step = step + 1;

        let breakdown = LossBreakdown::new(0.0, rev_val, 0.0, weights);
        log.push(TrainLogEntry {
            step: step + 1,
            loss_imp: breakdown.imp,
            loss_rev: breakdown.rev,
            loss_val: breakdown.val,
            loss_total: breakdown.total,
            w_imp: weights.imp,
            w_rev: weights.rev,
            w_val: weights.val,
            grad_norm,
            transform_kind: "none".to_string(),
            transform_magnitude: 0.0,
            timestamp_ms: now_ms(),
        })?;
    }
    Ok((baseline, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_faces;
    use crate::models::ImmuneConfig;
    use rand::Rng;

    fn toy_dataset(n: usize, seed: u64) -> FaceDataset {
        generate_synthetic_faces(n, 16, seed).unwrap()
    }

    fn toy_config(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            optimiser: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            checkpoint_every: 1000,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { checkpoint_every: 0, ..TrainConfig::default() }
            .validate()
            .is_err());
        assert!(TrainConfig {
            optimiser: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weights: LossWeights { imp: -1.0, rev: 1.0, val: 1.0 },
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_roundtrip_covers_every_field() {
        let cfg = TrainConfig {
            steps: 77,
            batch_size: 3,
            optimiser: AdamConfig { lr: 5e-4, beta1: 0.8, beta2: 0.99, eps: 1e-7 },
            weights: LossWeights { imp: 2.0, rev: 0.5, val: 0.25 },
            seed: 42,
            checkpoint_every: 11,
            augment: false,
            literal_neutraliser_input: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        cfg.to_json_file(&path).unwrap();
        let back = TrainConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg, back);

        // Partial files take defaults for missing fields.
        std::fs::write(&path, r#"{"steps": 5}"#).unwrap();
        let partial = TrainConfig::from_json_file(&path).unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn first_step_losses_finite_and_consistent() {
        let ds = toy_dataset(2, 21);
        let mut sys = ImmuneSystem::new(ImmuneConfig::toy(), 1).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let batch: Vec<_> = (0..2).map(|i| ds.sample(i).unwrap()).collect();
        let out = immune_step(&mut sys, &mut adam, &batch, &toy_config(1), 0).unwrap();
        let b = &out.breakdown;
        for v in [b.imp, b.rev, b.val, b.total] {
            assert!(v.is_finite() && v >= 0.0, "loss {v}");
        }
        assert!(b.total_consistent(1e-9));
        assert!(out.grad_norm.is_finite() && out.grad_norm > 0.0);
        assert_eq!(sys.step(), 1);
    }

    #[test]
    fn zero_recovery_weights_leave_neutraliser_still() {
        let ds = toy_dataset(2, 22);
        let mut sys = ImmuneSystem::new(ImmuneConfig::toy(), 2).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let config = TrainConfig {
            weights: LossWeights { imp: 1.0, rev: 0.0, val: 0.0 },
            ..toy_config(1)
        };
        let batch: Vec<_> = (0..2).map(|i| ds.sample(i).unwrap()).collect();
        immune_step(&mut sys, &mut adam, &batch, &config, 0).unwrap();
        let mut neut = 0.0f64;
        let mut vacc = 0.0f64;
        for (name, e) in sys.params().iter() {
            let sq: f64 = e.grad.iter().map(|&g| (g as f64) * (g as f64)).sum();
            if name.starts_with("neutraliser.") {
                neut += sq;
            } else {
                vacc += sq;
            }
        }
        assert!(neut.sqrt() < 1e-9, "neutraliser grad norm {}", neut.sqrt());
        assert!(vacc.sqrt() > 0.0);
    }

    #[test]
    fn toy_overfit_halves_the_loss() {
        let ds = toy_dataset(8, 23);
        let mut sys = ImmuneSystem::new(ImmuneConfig::toy(), 3).unwrap();
        let config = TrainConfig { batch_size: 4, ..toy_config(200) };
        let log = train_immune_system(&mut sys, &ds, &config, None, None).unwrap();
        assert_eq!(log.entries.len(), 200);
        let first = log.entries[0].loss_total;
        let last = log.entries.last().unwrap().loss_total;
        assert!(
            last < 0.5 * first,
            "loss {first:.4} → {last:.4} did not halve in 200 steps"
        );
        for e in &log.entries {
            assert!(e.breakdown().total_consistent(1e-9));
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let ds = toy_dataset(4, 24);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { checkpoint_every: 3, ..toy_config(6) };

        let mut sys_a = ImmuneSystem::new(ImmuneConfig::toy(), 4).unwrap();
        let log_a = train_immune_system(&mut sys_a, &ds, &config, Some(dir.path()), None).unwrap();
        assert_eq!(log_a.entries.len(), 6);

        // Identical rerun (same seed, augmentation on) → identical log.
        let mut sys_b = ImmuneSystem::new(ImmuneConfig::toy(), 4).unwrap();
        let log_b = train_immune_system(&mut sys_b, &ds, &config, None, None).unwrap();
        assert!(log_a.canonical_eq(&log_b));

        // Resume from the mid-run checkpoint: the remaining steps replay
        // exactly, including the very next loss.
        let (mut resumed, meta) =
            ImmuneSystem::load(&dir.path().join("step-000003.ckpt")).unwrap();
        assert_eq!(meta.step, 3);
        let log_c = train_immune_system(&mut resumed, &ds, &config, None, None).unwrap();
        assert_eq!(log_c.entries.len(), 3);
        for (a, b) in log_a.entries[3..].iter().zip(&log_c.entries) {
            assert_eq!(a.canon(), b.canon());
        }
        // And the resumed weights match the straight-through run's.
        for (name, e) in sys_a.params().iter() {
            assert_eq!(
                e.value,
                resumed.params().value(name).unwrap().clone(),
                "weight {name} diverged after resume"
            );
        }
    }

    #[test]
    fn log_rejects_non_increasing_steps() {
        let mut log = TrainLog::default();
        let entry = |step| TrainLogEntry {
            step,
            loss_imp: 0.0,
            loss_rev: 0.0,
            loss_val: 0.0,
            loss_total: 0.0,
            w_imp: 1.0,
            w_rev: 1.0,
            w_val: 1.0,
            grad_norm: 0.0,
            transform_kind: "none".into(),
            transform_magnitude: 0.0,
            timestamp_ms: 1,
        };
        log.push(entry(5)).unwrap();
        assert!(log.push(entry(5)).is_err());
        assert!(log.push(entry(3)).is_err());
        assert!(log.push(entry(6)).is_ok());
    }

    #[test]
    fn log_persists_to_json_and_csv() {
        let ds = toy_dataset(2, 25);
        let mut sys = ImmuneSystem::new(ImmuneConfig::toy(), 5).unwrap();
        let config = TrainConfig { checkpoint_every: 2, ..toy_config(4) };
        let log = train_immune_system(&mut sys, &ds, &config, None, Some(&ds)).unwrap();
        assert!(!log.validation.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let written = log.save(dir.path(), "trainlog").unwrap();
        assert_eq!(written.len(), 3);
        let back = TrainLog::load(&dir.path().join("trainlog.json")).unwrap();
        assert_eq!(log, back);
        let rows: Vec<TrainLogEntry> =
            crate::data::read_csv_report(&dir.path().join("trainlog.csv")).unwrap();
        assert_eq!(rows.len(), log.entries.len());
        assert_eq!(rows[0], log.entries[0]);
    }

    #[test]
    fn validator_fits_a_balanced_toy_set() {
        // Labelled by a visible watermark rather than a trained immune
        // system: positives carry a bright corner patch.
        let ds = toy_dataset(8, 26);
        let mut samples = Vec::new();
        for i in 0..8 {
            let (img, _) = ds.sample(i).unwrap();
            let mut marked = img.data().clone();
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..3 {
                        marked[[y, x, c]] = 1.0;
                    }
                }
            }
            samples.push((ImageTensor::new(marked).unwrap(), true));
            samples.push((img, false));
        }
        let arch = ValidatorConfig::mlp(16);
        let config = TrainConfig {
            batch_size: 4,
            optimiser: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            ..toy_config(150)
        };
        let (v, log) = train_validator_on_samples(&samples, &arch, &config).unwrap();
        assert_eq!(log.entries.len(), 150);
        let first = log.entries[0].loss_total;
        let tail: f64 = log.entries[145..].iter().map(|e| e.loss_total).sum::<f64>() / 5.0;
        assert!(tail < first, "BCE {first:.4} → {tail:.4} did not decrease");

        let preds: Vec<(f64, bool)> = samples
            .iter()
            .map(|(img, label)| (v.forward(img).unwrap() as f64, *label))
            .collect();
        let report = crate::metrics::classification_report(&preds);
        assert!(report.accuracy.unwrap() > 0.5, "accuracy {:?}", report.accuracy);
    }

    #[test]
    fn validator_rejects_imbalance_beyond_ten_to_one() {
        let ds = toy_dataset(12, 27);
        let mut samples: Vec<(ImageTensor, bool)> = (0..12)
            .map(|i| (ds.sample(i).unwrap().0, true))
            .collect();
        samples.push((ds.sample(0).unwrap().0, false));
        let err = train_validator_on_samples(&samples, &ValidatorConfig::mlp(16), &toy_config(1))
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");

        // All one class is rejected too.
        samples.pop();
        assert!(
            train_validator_on_samples(&samples, &ValidatorConfig::mlp(16), &toy_config(1))
                .is_err()
        );
    }

    #[test]
    fn validator_samples_are_balanced_by_construction() {
        let ds = toy_dataset(3, 28);
        let sys = ImmuneSystem::new(ImmuneConfig::toy(), 6).unwrap();
        let samples = validator_training_samples(&sys, &ds).unwrap();
        assert_eq!(samples.len(), 6);
        assert_eq!(samples.iter().filter(|(_, l)| *l).count(), 3);
    }

    #[test]
    fn baseline_untouched_nonface_and_learns_a_face() {
        let ds = toy_dataset(4, 29);
        let arch = crate::models::UNetConfig::toy();
        let (x, mask) = ds.sample(0).unwrap();

        // Zero training: the blend still pins the non-face region.
        let fresh = InpaintingBaseline::new(arch.clone(), 7).unwrap();
        let out = fresh.neutralise(&x, &mask).unwrap();
        for ((y, xx, c), &v) in out.data().indexed_iter() {
            if mask.data()[[y, xx]] == 0.0 {
                assert_eq!(v, x.data()[[y, xx, c]]);
            }
        }

        let config = TrainConfig { batch_size: 2, ..toy_config(60) };
        let (trained, log) = train_inpainting_baseline(&ds, &arch, &config).unwrap();
        assert!(log.entries.last().unwrap().loss_total < log.entries[0].loss_total);

        // The trained inpainter paints something non-constant in the face.
        let masked = crate::attacks::mask_attack(&x, &mask).unwrap();
        let filled = trained.neutralise(&masked, &mask).unwrap();
        let bin = mask.binarise(0.5);
        let face: Vec<f64> = filled
            .data()
            .indexed_iter()
            .filter(|((y, xx, _), _)| bin.data()[[*y, *xx]] == 1.0)
            .map(|(_, &v)| v as f64)
            .collect();
        let mean = face.iter().sum::<f64>() / face.len() as f64;
        let var = face.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / face.len() as f64;
        assert!(var.sqrt() > 1e-3, "face output is constant (std {})", var.sqrt());

        // Checkpoint round trip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.ckpt");
        trained.save(&path, &BTreeMap::new()).unwrap();
        let (loaded, meta) = InpaintingBaseline::load(&path).unwrap();
        assert_eq!(meta.step, 60);
        let a = trained.neutralise(&masked, &mask).unwrap();
        let b = loaded.neutralise(&masked, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batch_indices_are_deterministic_and_in_range() {
        let a = batch_indices(9, "batch", 3, 10, 4);
        let b = batch_indices(9, "batch", 3, 10, 4);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|&i| i < 10));
        // Distinct when possible.
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        // Oversampling falls back to replacement.
        let c = batch_indices(9, "batch", 3, 2, 5);
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|&i| i < 2));
        // RNG helper still exercised directly for coverage of the
        // replacement branch's distribution bounds.
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed_indexed(9, "batch", 4));
        let v: usize = rng.random_range(0..2);
        assert!(v < 2);
    }
}
