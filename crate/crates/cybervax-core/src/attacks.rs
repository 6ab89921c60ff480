//! The adversary side: face masking, photometric degradations, and a toy
//! autoencoder face swapper.
//!
//! Degradations are graph programs, so training can backpropagate through
//! the same transform the evaluator applies. Both attack entry points
//! binarise the mask at 0.5 before touching pixels: the attacker deals in
//! a hard face region, which also makes masking idempotent and keeps the
//! non-face region bit-identical.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{blend, FaceMask, ImageTensor};
use crate::metrics::mae_node;
use crate::models::{image_to_nchw, images_to_nchw, nchw_to_images};
use crate::nn::params::{he_normal, zeros_c};
use crate::nn::{Adam, AdamConfig, Graph, GraphParams, NodeId, PadMode, ParamStore, Scalar};
use crate::util::{derive_seed, derive_seed_indexed};

// ---------------------------------------------------------------------------
// Face masking
// ---------------------------------------------------------------------------

/// Black out the face region: `image · (1 − bin(mask))`.
pub fn mask_attack(image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
    let bin = mask.binarise(0.5);
    let black = ImageTensor::constant(image.height(), image.width(), image.channels(), 0.0)?;
    blend(&black, image, &bin)
}

// ---------------------------------------------------------------------------
// Photometric degradations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    None,
    Blur,
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Hybrid,
}

impl std::fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DegradationKind::None => "none",
            DegradationKind::Blur => "blur",
            DegradationKind::Brightness => "brightness",
            DegradationKind::Contrast => "contrast",
            DegradationKind::Saturation => "saturation",
            DegradationKind::Hue => "hue",
            DegradationKind::Hybrid => "hybrid",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DegradationKind::None),
            "blur" => Ok(DegradationKind::Blur),
            "brightness" => Ok(DegradationKind::Brightness),
            "contrast" => Ok(DegradationKind::Contrast),
            "saturation" => Ok(DegradationKind::Saturation),
            "hue" => Ok(DegradationKind::Hue),
            "hybrid" => Ok(DegradationKind::Hybrid),
            other => Err(Error::Parameter(format!("unknown degradation kind {other:?}"))),
        }
    }
}

impl DegradationKind {
    /// Hard bounds accepted by [`DegradationSpec::validate`]. Wider than
    /// the evaluation sweep so closed-form corner cases (e.g. contrast 0)
    /// stay expressible.
    pub fn legal_range(self) -> (f64, f64) {
        match self {
            DegradationKind::None => (0.0, 0.0),
            DegradationKind::Blur => (0.0, 4.0),
            DegradationKind::Brightness
            | DegradationKind::Contrast
            | DegradationKind::Saturation => (0.0, 2.0),
            DegradationKind::Hue => (-0.5, 0.5),
            DegradationKind::Hybrid => (0.0, 1.0),
        }
    }

    /// The "limited range" sampled during training.
    pub fn training_range(self) -> (f64, f64) {
        match self {
            DegradationKind::None => (0.0, 0.0),
            DegradationKind::Blur => (0.0, 1.0),
            DegradationKind::Brightness
            | DegradationKind::Contrast
            | DegradationKind::Saturation => (0.8, 1.2),
            DegradationKind::Hue => (-0.05, 0.05),
            DegradationKind::Hybrid => (0.0, 1.0),
        }
    }

    /// The magnitude at which the transform is the identity.
    pub fn neutral(self) -> f64 {
        match self {
            DegradationKind::None | DegradationKind::Blur | DegradationKind::Hue | DegradationKind::Hybrid => 0.0,
            DegradationKind::Brightness | DegradationKind::Contrast | DegradationKind::Saturation => 1.0,
        }
    }
}

/// One concrete photometric transform. For `hybrid`, `magnitude ∈ [0, 1]`
/// is a severity: each component's magnitude is drawn (from `seed`)
/// uniformly between its neutral point and `severity` of the way to its
/// legal extreme, and the components are applied blur → brightness →
/// contrast → saturation → hue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn none() -> Self {
        DegradationSpec { kind: DegradationKind::None, magnitude: 0.0, seed: 0 }
    }

    pub fn new(kind: DegradationKind, magnitude: f64, seed: u64) -> Result<Self> {
        let spec = DegradationSpec { kind, magnitude, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.legal_range();
        if !self.magnitude.is_finite() || self.magnitude < lo || self.magnitude > hi {
            return Err(Error::Parameter(format!(
                "{} magnitude {} outside legal range [{lo}, {hi}]",
                self.kind, self.magnitude
            )));
        }
        Ok(())
    }

    /// The component transforms a hybrid spec expands into.
    fn hybrid_components(&self) -> Vec<(DegradationKind, f64)> {
        let severity = self.magnitude;
        [
            DegradationKind::Blur,
            DegradationKind::Brightness,
            DegradationKind::Contrast,
            DegradationKind::Saturation,
            DegradationKind::Hue,
        ]
        .into_iter()
        .map(|kind| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                self.seed,
                &format!("hybrid.{kind}"),
            ));
            let neutral = kind.neutral();
            let (lo, hi) = kind.legal_range();
            // Interval from neutral stretched `severity` of the way to the
            // legal bounds; hue stretches both ways.
            let a = neutral + severity * (lo - neutral);
            let b = neutral + severity * (hi - neutral);
            let m = if a == b { a } else { rng.random_range(a.min(b)..=a.max(b)) };
            (kind, m)
        })
        .collect()
    }
}

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// RGB→YIQ followed by an I/Q rotation and the inverse, collapsed into a
/// single 3×3 matrix (computed in f64).
fn hue_matrix(fraction: f64) -> [[f64; 3]; 3] {
    let a = [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ];
    // Inverse by adjugate.
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let mut inv = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let sub: Vec<f64> = (0..3)
                .filter(|&r| r != j)
                .flat_map(|r| (0..3).filter(|&c| c != i).map(move |c| a[r][c]))
                .collect();
            let minor = sub[0] * sub[3] - sub[1] * sub[2];
            inv[i][j] = if (i + j) % 2 == 0 { minor } else { -minor } / det;
        }
    }
    let th = fraction * std::f64::consts::TAU;
    let (sin, cos) = th.sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]];
    // t = inv · rot · a
    let mut ra = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ra[i][j] = (0..3).map(|k| rot[i][k] * a[k][j]).sum();
        }
    }
    let mut t = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = (0..3).map(|k| inv[i][k] * ra[k][j]).sum();
        }
    }
    t
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

fn apply_component<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    kind: DegradationKind,
    magnitude: f64,
) -> Result<NodeId> {
    let shape = g.shape(x);
    let c = shape[1];
    match kind {
        DegradationKind::None | DegradationKind::Hybrid => Ok(x),
        DegradationKind::Blur => {
            if magnitude <= 0.0 {
                return Ok(x);
            }
            let taps = gaussian_taps(magnitude);
            let k = taps.len();
            let radius = k / 2;
            let vert = Array4::from_shape_fn((c, 1, k, 1), |(_, _, i, _)| S::of_f64(taps[i]));
            let horz = Array4::from_shape_fn((c, 1, 1, k), |(_, _, _, j)| S::of_f64(taps[j]));
            let vert = g.input(vert, false);
            let horz = g.input(horz, false);
            let padded = g.pad2d(x, radius, PadMode::Replicate);
            let v = g.conv2d(padded, vert, 1, 0, c)?;
            g.conv2d(v, horz, 1, 0, c)
        }
        DegradationKind::Brightness => Ok(g.scale(x, S::of_f64(magnitude))),
        DegradationKind::Contrast => {
            let mean = g.spatial_mean(x);
            let centred = g.sub(x, mean)?;
            let scaled = g.scale(centred, S::of_f64(magnitude));
            g.add(scaled, mean)
        }
        DegradationKind::Saturation => {
            if c != 3 {
                return Err(Error::Parameter("saturation needs a 3-channel image".into()));
            }
            let w = Array4::from_shape_fn((1, 3, 1, 1), |(_, ch, _, _)| S::of_f64(LUMA[ch]));
            let w = g.input(w, false);
            let gray = g.conv2d(x, w, 1, 0, 1)?;
            let centred = g.sub(x, gray)?;
            let scaled = g.scale(centred, S::of_f64(magnitude));
            g.add(scaled, gray)
        }
        DegradationKind::Hue => {
            if c != 3 {
                return Err(Error::Parameter("hue rotation needs a 3-channel image".into()));
            }
            let t = hue_matrix(magnitude);
            let w = Array4::from_shape_fn((3, 3, 1, 1), |(o, i, _, _)| S::of_f64(t[o][i]));
            let w = g.input(w, false);
            g.conv2d(x, w, 1, 0, 1)
        }
    }
}

/// The degradation as a graph program: deterministic given the spec, and
/// differentiable with respect to `x`. The result is clamped to `[0, 1]`.
pub fn degradation_node<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    spec: &DegradationSpec,
) -> Result<NodeId> {
    spec.validate()?;
    let mut h = x;
    match spec.kind {
        DegradationKind::Hybrid => {
            for (kind, magnitude) in spec.hybrid_components() {
                h = apply_component(g, h, kind, magnitude)?;
            }
        }
        kind => {
            h = apply_component(g, h, kind, spec.magnitude)?;
        }
    }
    if spec.kind == DegradationKind::None {
        // Strict identity.
        return Ok(h);
    }
    Ok(g.clamp01(h))
}

/// Apply a degradation to a concrete image.
pub fn apply_degradation(image: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    let mut g = Graph::<f32>::new();
    let x = g.input(image_to_nchw(image), false);
    let y = degradation_node(&mut g, x, spec)?;
    Ok(nchw_to_images(g.value(y)).remove(0))
}

/// Kinds eligible for training augmentation (no hybrid: one transform per
/// step).
pub const TRAINING_KINDS: [DegradationKind; 6] = [
    DegradationKind::None,
    DegradationKind::Blur,
    DegradationKind::Brightness,
    DegradationKind::Contrast,
    DegradationKind::Saturation,
    DegradationKind::Hue,
];

/// Draw the per-step training transform: kind uniform over
/// [`TRAINING_KINDS`], magnitude uniform in the kind's training range.
pub fn sample_training_transform(seed: u64) -> DegradationSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "training-transform"));
    let kind = TRAINING_KINDS[rng.random_range(0..TRAINING_KINDS.len())];
    let (lo, hi) = kind.training_range();
    let magnitude = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    DegradationSpec { kind, magnitude, seed }
}

// ---------------------------------------------------------------------------
// Toy face swapper: shared encoder, one decoder per identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceSwapConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub steps: u64,
    pub batch_size: usize,
    /// Minimum frames required per identity.
    pub min_frames: usize,
    pub identity_a: String,
    pub identity_b: String,
}

impl Default for FaceSwapConfig {
    fn default() -> Self {
        FaceSwapConfig {
            resolution: 64,
            base_width: 16,
            steps: 400,
            batch_size: 4,
            min_frames: 4,
            identity_a: "A".to_string(),
            identity_b: "B".to_string(),
        }
    }
}

impl FaceSwapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return Err(Error::Parameter(format!(
                "face-swap resolution must be a multiple of 8 and ≥ 16, got {}",
                self.resolution
            )));
        }
        if self.base_width < 2 {
            return Err(Error::Parameter("face-swap base_width must be ≥ 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("face-swap batch_size must be ≥ 1".into()));
        }
        if self.identity_a == self.identity_b {
            return Err(Error::Parameter("face-swap identities must differ".into()));
        }
        Ok(())
    }
}

/// Shared-encoder/twin-decoder autoencoder. Encoding downsamples three
/// times, so the latent sits at `resolution/8` (8×8 at desk scale).
#[derive(Debug, Clone)]
pub struct FaceSwapModel {
    config: FaceSwapConfig,
    params: ParamStore<f32>,
    step: u64,
}

impl FaceSwapModel {
    pub fn new(config: FaceSwapConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "init.faceswap"));
        let w = config.base_width;
        let widths = [w, 2 * w, 4 * w];
        let mut prev = 3;
        for (i, &ch) in widths.iter().enumerate() {
            params.declare(&format!("encoder.conv{i}.weight"), he_normal(&mut rng, (ch, prev, 3, 3)))?;
            params.declare(&format!("encoder.conv{i}.bias"), zeros_c(ch))?;
            prev = ch;
        }
        for dec in ["decoder_a", "decoder_b"] {
            let mut prev = 4 * w;
            for (i, &ch) in [2 * w, w, w].iter().enumerate() {
                params.declare(&format!("{dec}.conv{i}.weight"), he_normal(&mut rng, (ch, prev, 3, 3)))?;
                params.declare(&format!("{dec}.conv{i}.bias"), zeros_c(ch))?;
                prev = ch;
            }
            params.declare(&format!("{dec}.head.weight"), he_normal(&mut rng, (3, prev, 3, 3)))?;
            params.declare(&format!("{dec}.head.bias"), zeros_c(3))?;
        }
        Ok(FaceSwapModel { config, params, step: 0 })
    }

    pub fn config(&self) -> &FaceSwapConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `(channels, height, width)` of the shared latent.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let r = self.config.resolution / 8;
        (4 * self.config.base_width, r, r)
    }

    pub fn save(
        &self,
        path: &std::path::Path,
        metrics: &std::collections::BTreeMap<String, f64>,
    ) -> Result<()> {
        let meta = crate::models::CheckpointMeta {
            format_version: crate::models::CHECKPOINT_FORMAT_VERSION,
            kind: "faceswap".to_string(),
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            metrics: metrics.clone(),
        };
        crate::models::write_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, crate::models::CheckpointMeta)> {
        let (params, meta) = crate::models::read_checkpoint(path, "faceswap")?;
        let config: FaceSwapConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad face-swap config in sidecar: {e}")))?;
        config.validate()?;
        // The archive must carry exactly the parameter set this config
        // declares, shape for shape.
        let probe = FaceSwapModel::new(config.clone(), 0)?;
        let mut expect = probe.params.names();
        let mut got = params.names();
        expect.sort_unstable();
        got.sort_unstable();
        if expect != got {
            return Err(Error::Checkpoint(
                "face-swap archive parameter names do not match its config".into(),
            ));
        }
        for name in &expect {
            if probe.params.value(name)?.shape() != params.value(name)?.shape() {
                return Err(Error::Checkpoint(format!(
                    "face-swap parameter {name} has an unexpected shape"
                )));
            }
        }
        Ok((FaceSwapModel { config, params, step: meta.step }, meta))
    }

    fn decoder_for(&self, identity: &str) -> Result<&'static str> {
        if identity == self.config.identity_a {
            Ok("decoder_a")
        } else if identity == self.config.identity_b {
            Ok("decoder_b")
        } else {
            Err(Error::Parameter(format!(
                "unknown face-swap identity {identity:?} (have {:?}, {:?})",
                self.config.identity_a, self.config.identity_b
            )))
        }
    }

    fn conv(
        g: &mut Graph<f32>,
        gp: &mut GraphParams,
        store: &ParamStore<f32>,
        name: &str,
        x: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let w = gp.bind(g, store, &format!("{name}.weight"))?;
        let b = gp.bind(g, store, &format!("{name}.bias"))?;
        let y = g.conv2d(x, w, stride, 1, 1)?;
        g.add(y, b)
    }

    fn encode(
        &self,
        g: &mut Graph<f32>,
        gp: &mut GraphParams,
        store: &ParamStore<f32>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for i in 0..3 {
            h = Self::conv(g, gp, store, &format!("encoder.conv{i}"), h, 2)?;
            h = g.silu(h);
        }
        Ok(h)
    }

    fn decode(
        &self,
        g: &mut Graph<f32>,
        gp: &mut GraphParams,
        store: &ParamStore<f32>,
        dec: &str,
        z: NodeId,
    ) -> Result<NodeId> {
        let mut h = z;
        for i in 0..3 {
            h = g.upsample2(h);
            h = Self::conv(g, gp, store, &format!("{dec}.conv{i}"), h, 1)?;
            h = g.silu(h);
        }
        let h = Self::conv(g, gp, store, &format!("{dec}.head"), h, 1)?;
        Ok(g.sigmoid(h))
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let r = self.config.resolution;
        if image.height() != r || image.width() != r || image.channels() != 3 {
            return Err(Error::dimension(
                "face-swap input",
                format!("{r}x{r}x3"),
                format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            ));
        }
        Ok(())
    }

    /// Run `decoder_identity(encoder(image))` — the raw synthetic frame.
    pub fn reconstruct(&self, image: &ImageTensor, identity: &str) -> Result<ImageTensor> {
        self.check_image(image)?;
        let dec = self.decoder_for(identity)?;
        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let x = g.input(image_to_nchw(image), false);
        let z = self.encode(&mut g, &mut gp, &self.params, x)?;
        let y = self.decode(&mut g, &mut gp, &self.params, dec, z)?;
        Ok(nchw_to_images(g.value(y)).remove(0))
    }

    /// Latent activation for shape checks and diagnostics.
    pub fn encode_image(&self, image: &ImageTensor) -> Result<Array4<f32>> {
        self.check_image(image)?;
        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let x = g.input(image_to_nchw(image), false);
        let z = self.encode(&mut g, &mut gp, &self.params, x)?;
        Ok(g.value(z).clone())
    }
}

/// One training step over a batch pair; returns (loss_a, loss_b).
fn faceswap_step(
    model: &mut FaceSwapModel,
    opt: &mut Adam,
    batch_a: &Array4<f32>,
    batch_b: &Array4<f32>,
) -> Result<(f64, f64)> {
    let mut g = Graph::<f32>::new();
    let mut gp = GraphParams::new();
    let xa = g.input(batch_a.clone(), false);
    let xb = g.input(batch_b.clone(), false);
    let za = model.encode(&mut g, &mut gp, &model.params, xa)?;
    let zb = model.encode(&mut g, &mut gp, &model.params, xb)?;
    let ya = model.decode(&mut g, &mut gp, &model.params, "decoder_a", za)?;
    let yb = model.decode(&mut g, &mut gp, &model.params, "decoder_b", zb)?;
    let la = mae_node(&mut g, ya, xa)?;
    let lb = mae_node(&mut g, yb, xb)?;
    let loss = g.add(la, lb)?;
    g.backward(loss)?;
    model.params.zero_grads();
    gp.harvest(&g, &mut model.params)?;
    opt.step(&mut model.params);
    Ok((g.scalar(la) as f64, g.scalar(lb) as f64))
}

fn sample_batch(
    frames: &[ImageTensor],
    batch: usize,
    seed: u64,
    tag: &str,
    step: u64,
) -> Result<Array4<f32>> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed_indexed(seed, tag, step));
    let refs: Vec<&ImageTensor> = (0..batch)
        .map(|_| &frames[rng.random_range(0..frames.len())])
        .collect();
    images_to_nchw(&refs)
}

/// Train the twin-decoder autoencoder on two identity frame sets.
/// Returns the model and the per-identity (initial, final) MAE pairs.
pub fn train_faceswap(
    frames_a: &[ImageTensor],
    frames_b: &[ImageTensor],
    config: FaceSwapConfig,
    seed: u64,
) -> Result<(FaceSwapModel, [(f64, f64); 2])> {
    config.validate()?;
    for (label, frames) in [(&config.identity_a, frames_a), (&config.identity_b, frames_b)] {
        if frames.len() < config.min_frames {
            return Err(Error::Data(format!(
                "identity {label:?} has {} frames; face-swap training needs at least {}",
                frames.len(),
                config.min_frames
            )));
        }
    }
    let mut model = FaceSwapModel::new(config.clone(), seed)?;
    for f in frames_a.iter().chain(frames_b) {
        model.check_image(f)?;
    }
    let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    let mut first: Option<(f64, f64)> = None;
    let mut last = (f64::NAN, f64::NAN);
    for step in 0..config.steps {
        let ba = sample_batch(frames_a, config.batch_size, seed, "faceswap.batch_a", step)?;
        let bb = sample_batch(frames_b, config.batch_size, seed, "faceswap.batch_b", step)?;
        let (la, lb) = faceswap_step(&mut model, &mut opt, &ba, &bb)?;
        if first.is_none() {
            first = Some((la, lb));
        }
        last = (la, lb);
        model.step = step + 1;
    }
    let first = first.unwrap_or((f64::NAN, f64::NAN));
    Ok((model, [(first.0, last.0), (first.1, last.1)]))
}

/// Swap the face: synthesise with the target identity's decoder and blend
/// it into the binarised face region. Pixels outside that region are
/// untouched.
pub fn faceswap_attack(
    model: &FaceSwapModel,
    image: &ImageTensor,
    mask: &FaceMask,
    target: &str,
) -> Result<ImageTensor> {
    let synthetic = model.reconstruct(image, target)?;
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::dimension(
            "face-swap mask",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    blend(&synthetic, image, &mask.binarise(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::RngCore;

    fn img_random(res: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((res, res, 3), |_| {
            0.1 + 0.8 * ((rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32)
        }))
        .unwrap()
    }

    fn ellipse(res: usize) -> FaceMask {
        crate::masks::ellipse_mask(res, res, res as f32 / 2.0, res as f32 / 2.0, res as f32 / 3.0, res as f32 / 4.0)
            .unwrap()
    }

    #[test]
    fn mask_attack_contracts() {
        let img = img_random(16, 1);
        let zero = FaceMask::new(Array2::zeros((16, 16)), crate::imaging::MaskProvenance::External).unwrap();
        let out = mask_attack(&img, &zero).unwrap();
        assert_eq!(out.data(), img.data());

        let one = FaceMask::new(Array2::ones((16, 16)), crate::imaging::MaskProvenance::External).unwrap();
        let out = mask_attack(&img, &one).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let m = ellipse(16);
        let out = mask_attack(&img, &m).unwrap();
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if m.data()[[y, x]] >= 0.5 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, img.data()[[y, x, c]]);
            }
        }
    }

    proptest! {
        #[test]
        fn mask_attack_idempotent(seed in 0u64..30) {
            let img = img_random(12, seed);
            // A soft mask: softened ellipse has fractional border values.
            let m = crate::imaging::soften_mask(&ellipse(12), 2, 1.0).unwrap();
            let once = mask_attack(&img, &m).unwrap();
            let twice = mask_attack(&once, &m).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }
    }

    #[test]
    fn neutral_magnitudes_are_identity() {
        let img = img_random(16, 2);
        let cases = [
            DegradationSpec::none(),
            DegradationSpec::new(DegradationKind::Blur, 0.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Brightness, 1.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Contrast, 1.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Saturation, 1.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Hue, 0.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Hybrid, 0.0, 1).unwrap(),
        ];
        for spec in cases {
            let out = apply_degradation(&img, &spec).unwrap();
            let max_diff = out
                .data()
                .iter()
                .zip(img.data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-6, "{:?}: max diff {max_diff}", spec.kind);
        }
    }

    #[test]
    fn contrast_zero_collapses_to_channel_means() {
        let img = img_random(16, 3);
        let spec = DegradationSpec::new(DegradationKind::Contrast, 0.0, 1).unwrap();
        let out = apply_degradation(&img, &spec).unwrap();
        for c in 0..3 {
            let mean: f32 = (0..16)
                .flat_map(|y| (0..16).map(move |x| (y, x)))
                .map(|(y, x)| img.data()[[y, x, c]])
                .sum::<f32>()
                / 256.0;
            for y in 0..16 {
                for x in 0..16 {
                    assert_abs_diff_eq!(out.data()[[y, x, c]], mean, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constants_and_smooths() {
        let flat = ImageTensor::constant(16, 16, 3, 0.42).unwrap();
        let spec = DegradationSpec::new(DegradationKind::Blur, 1.5, 1).unwrap();
        let out = apply_degradation(&flat, &spec).unwrap();
        for &v in out.data().iter() {
            assert_abs_diff_eq!(v, 0.42, epsilon = 1e-5);
        }

        let img = img_random(16, 4);
        let blurred = apply_degradation(&img, &spec).unwrap();
        let var = |t: &ImageTensor| {
            let mean: f32 = t.data().iter().sum::<f32>() / t.data().len() as f32;
            t.data().iter().map(|&v| (v - mean).powi(2)).sum::<f32>() / t.data().len() as f32
        };
        assert!(var(&blurred) < var(&img));
    }

    #[test]
    fn degradation_deterministic_and_validated() {
        let img = img_random(16, 5);
        let spec = DegradationSpec::new(DegradationKind::Hybrid, 0.6, 99).unwrap();
        let a = apply_degradation(&img, &spec).unwrap();
        let b = apply_degradation(&img, &spec).unwrap();
        assert_eq!(a.data(), b.data());

        assert!(DegradationSpec::new(DegradationKind::Blur, 5.0, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Hue, 0.7, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Brightness, -0.1, 1).is_err());
    }

    #[test]
    fn hue_full_turn_is_identity() {
        // ±0.5 are both half-turns; composing them returns to start.
        let img = img_random(16, 6);
        let fwd = apply_degradation(&img, &DegradationSpec::new(DegradationKind::Hue, 0.5, 1).unwrap()).unwrap();
        let back = apply_degradation(&fwd, &DegradationSpec::new(DegradationKind::Hue, -0.5, 1).unwrap()).unwrap();
        let max_diff = back
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        // Clamping of out-of-gamut intermediates breaks exact inversion in
        // saturated spots; interior values agree closely.
        assert!(max_diff < 0.35, "max diff {max_diff}");
        let mean_diff: f32 = back
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.data().len() as f32;
        assert!(mean_diff < 0.02, "mean diff {mean_diff}");
    }

    #[test]
    fn sampling_covers_kinds_within_ranges() {
        let a = sample_training_transform(7);
        let b = sample_training_transform(7);
        assert_eq!(a, b);

        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..10_000u64 {
            let s = sample_training_transform(seed);
            let (lo, hi) = s.kind.training_range();
            assert!(s.magnitude >= lo && s.magnitude <= hi, "{s:?}");
            seen.insert(format!("{}", s.kind));
        }
        assert_eq!(seen.len(), TRAINING_KINDS.len());
    }

    #[test]
    fn degradation_gradients_match_finite_differences() {
        let base = Array4::from_shape_fn((1, 3, 12, 12), |(_, c, y, x)| {
            0.2 + 0.05 * c as f64 + 0.4 * ((y * 12 + x) as f64 / 144.0)
        });
        let specs = [
            DegradationSpec::new(DegradationKind::Blur, 1.0, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Brightness, 1.1, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Contrast, 0.9, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Saturation, 1.2, 1).unwrap(),
            DegradationSpec::new(DegradationKind::Hue, 0.03, 1).unwrap(),
        ];
        for spec in &specs {
            let mut g = Graph::<f64>::new();
            let x = g.input(base.clone(), true);
            let y = degradation_node(&mut g, x, spec).unwrap();
            let l = g.mean(y);
            g.backward(l).unwrap();
            let grad = g.grad(x).unwrap().clone();

            let eval = |arr: &Array4<f64>| {
                let mut g = Graph::<f64>::new();
                let x = g.input(arr.clone(), false);
                let y = degradation_node(&mut g, x, spec).unwrap();
                let l = g.mean(y);
                g.scalar(l)
            };
            let eps = 1e-6;
            for &idx in &[(0, 0, 0, 0), (0, 1, 6, 6), (0, 2, 11, 11)] {
                let mut p = base.clone();
                p[idx] += eps;
                let mut m = base.clone();
                m[idx] -= eps;
                let fd = (eval(&p) - eval(&m)) / (2.0 * eps);
                assert!(
                    (grad[idx] - fd).abs() / fd.abs().max(1e-4) < 1e-3,
                    "{:?} at {idx:?}: {} vs {fd}",
                    spec.kind,
                    grad[idx]
                );
            }
        }
    }

    fn identity_frames(res: usize, kind: u8, count: usize) -> Vec<ImageTensor> {
        // Two visually distinct identities: a bright square upper-left vs a
        // dark square lower-right, with per-frame jitter.
        (0..count)
            .map(|i| {
                let shift = i % 3;
                ImageTensor::new(Array3::from_shape_fn((res, res, 3), |(y, x, c)| {
                    let inside = if kind == 0 {
                        y < res / 2 && x >= shift && x < res / 2 + shift
                    } else {
                        y >= res / 2 && x >= res / 2 - shift && x < res - shift
                    };
                    let base = if kind == 0 { 0.85 } else { 0.2 };
                    if inside {
                        base - 0.03 * c as f32
                    } else {
                        0.5
                    }
                }))
                .unwrap()
            })
            .collect()
    }

    fn tiny_config() -> FaceSwapConfig {
        FaceSwapConfig {
            resolution: 16,
            base_width: 6,
            steps: 80,
            batch_size: 2,
            min_frames: 4,
            ..FaceSwapConfig::default()
        }
    }

    #[test]
    fn faceswap_latent_shape_and_zero_steps() {
        let cfg = FaceSwapConfig { steps: 0, ..tiny_config() };
        let frames_a = identity_frames(16, 0, 5);
        let frames_b = identity_frames(16, 1, 5);
        let (model, _) = train_faceswap(&frames_a, &frames_b, cfg.clone(), 3).unwrap();
        assert_eq!(model.latent_shape(), (24, 2, 2));
        let z = model.encode_image(&frames_a[0]).unwrap();
        assert_eq!(z.shape(), &[1, 24, 2, 2]);

        // Zero steps leaves the parameters at initialisation.
        let fresh = FaceSwapModel::new(cfg, 3).unwrap();
        for name in fresh.params().names() {
            assert_eq!(
                fresh.params().value(name).unwrap(),
                model.params().value(name).unwrap()
            );
        }
    }

    #[test]
    fn faceswap_training_reduces_reconstruction_error() {
        let frames_a = identity_frames(16, 0, 6);
        let frames_b = identity_frames(16, 1, 6);
        let (model, losses) = train_faceswap(&frames_a, &frames_b, tiny_config(), 11).unwrap();
        for (initial, final_) in losses {
            assert!(
                final_ < initial,
                "reconstruction MAE should fall: {initial} -> {final_}"
            );
        }

        // Attack contracts.
        let mask = ellipse(16);
        let victim = &frames_a[0];
        let out = faceswap_attack(&model, victim, &mask, "B").unwrap();
        let bin = mask.binarise(0.5);
        let mut changed = false;
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if bin.data()[[y, x]] == 0.0 {
                assert_eq!(v, victim.data()[[y, x, c]]);
            } else if (v - victim.data()[[y, x, c]]).abs() > 1e-3 {
                changed = true;
            }
        }
        assert!(changed, "face region should be altered by the swap");

        assert!(matches!(
            faceswap_attack(&model, victim, &mask, "C"),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn faceswap_checkpoint_round_trip() {
        let frames_a = identity_frames(16, 0, 5);
        let frames_b = identity_frames(16, 1, 5);
        let cfg = FaceSwapConfig { steps: 3, ..tiny_config() };
        let (model, _) = train_faceswap(&frames_a, &frames_b, cfg, 7).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("swap.ckpt");
        model.save(&path, &std::collections::BTreeMap::new()).unwrap();
        let (restored, meta) = FaceSwapModel::load(&path).unwrap();
        assert_eq!(meta.kind, "faceswap");
        assert_eq!(restored.step(), model.step());
        assert_eq!(restored.config(), model.config());

        let mask = ellipse(16);
        let a = faceswap_attack(&model, &frames_a[0], &mask, "B").unwrap();
        let b = faceswap_attack(&restored, &frames_a[0], &mask, "B").unwrap();
        assert_eq!(a.data(), b.data());

        // Wrong-kind archives are refused.
        assert!(matches!(
            crate::models::ImmuneSystem::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn faceswap_rejects_small_datasets() {
        let frames_a = identity_frames(16, 0, 2);
        let frames_b = identity_frames(16, 1, 6);
        assert!(matches!(
            train_faceswap(&frames_a, &frames_b, tiny_config(), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn degradation_spec_serialises_for_reports() {
        let spec = DegradationSpec::new(DegradationKind::Blur, 2.5, 42).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"blur\""));
        let back: DegradationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
