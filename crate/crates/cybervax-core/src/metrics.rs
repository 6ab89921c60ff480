//! Distances, the composite training loss, and evaluation metrics.
//!
//! SSIM is computed once, as a differentiable graph program (depthwise
//! Gaussian convolution over valid windows); the scalar evaluation API
//! wraps that same program in `f64`, so the loss the networks train
//! against and the number in the reports cannot drift apart.
//!
//! Evaluation metrics restricted to a region binarise the mask at 0.5;
//! training losses keep the soft mask values.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FaceMask, ImageTensor};
use crate::nn::{Graph, NodeId, Scalar};
use crate::util::derive_seed;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian σ of the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Luminance stabiliser (0.01)² on unit dynamic range.
pub const SSIM_C1: f64 = 1e-4;
/// Contrast stabiliser (0.03)².
pub const SSIM_C2: f64 = 9e-4;
/// PSNR reported for zero MSE.
pub const PSNR_CAP_DB: f64 = 100.0;

// ---------------------------------------------------------------------------
// Graph-level building blocks (used directly by training)
// ---------------------------------------------------------------------------

/// Normalised 11×11 Gaussian window replicated as a depthwise kernel.
fn gaussian_window<S: Scalar>(channels: usize) -> Array4<S> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w2 = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w2[[i, j]] = g1[i] * g1[j];
        }
    }
    let total: f64 = w2.sum();
    Array4::from_shape_fn((channels, 1, SSIM_WINDOW, SSIM_WINDOW), |(_, _, i, j)| {
        S::of_f64(w2[[i, j]] / total)
    })
}

/// Mean absolute difference of two equal-shaped nodes, as a scalar node.
pub fn mae_node<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Per-window SSIM map (`N×C×(H−10)×(W−10)`) of two equal-shaped nodes.
pub fn ssim_map_node<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let sa = g.shape(a);
    let sb = g.shape(b);
    if sa != sb {
        return Err(Error::dimension("ssim inputs", format!("{sa:?}"), format!("{sb:?}")));
    }
    if sa[2] < SSIM_WINDOW || sa[3] < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            sa[2], sa[3], SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let c = sa[1];
    let win = g.input(gaussian_window::<S>(c), false);
    let conv = |g: &mut Graph<S>, x: NodeId, win: NodeId| g.conv2d(x, win, 1, 0, c);

    let mu_a = conv(g, a, win)?;
    let mu_b = conv(g, b, win)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = conv(g, aa, win)?;
    let e_bb = conv(g, bb, win)?;
    let e_ab = conv(g, ab, win)?;

    let mu_a2 = g.mul(mu_a, mu_a)?;
    let mu_b2 = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let c1 = S::of_f64(SSIM_C1);
    let c2 = S::of_f64(SSIM_C2);
    let two = S::of_f64(2.0);

    let l_num = {
        let t = g.scale(mu_ab, two);
        g.add_scalar(t, c1)
    };
    let cs_num = {
        let t = g.scale(cov, two);
        g.add_scalar(t, c2)
    };
    let l_den = {
        let t = g.add(mu_a2, mu_b2)?;
        g.add_scalar(t, c1)
    };
    let cs_den = {
        let t = g.add(var_a, var_b)?;
        g.add_scalar(t, c2)
    };
    let num = g.mul(l_num, cs_num)?;
    let den = g.mul(l_den, cs_den)?;
    g.div(num, den)
}

/// Mean SSIM as a scalar node.
pub fn ssim_mean_node<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let map = ssim_map_node(g, a, b)?;
    Ok(g.mean(map))
}

/// `distance(a, b) = mae(a, b) + (1 − ssim(a, b))` as a scalar node.
pub fn distance_node<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let m = mae_node(g, a, b)?;
    let s = ssim_mean_node(g, a, b)?;
    let neg_s = g.scale(s, S::of_f64(-1.0));
    let one_minus = g.add_scalar(neg_s, S::of_f64(1.0));
    g.add(m, one_minus)
}

/// Loss term weights; the displayed composite is the plain sum, so the
/// default is `(1, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub imp: f64,
    pub rev: f64,
    pub val: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { imp: 1.0, rev: 1.0, val: 1.0 }
    }
}

/// Node handles for the three loss terms and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct CompositeNodes {
    pub imp: NodeId,
    pub rev: NodeId,
    pub val: NodeId,
    pub total: NodeId,
}

/// Build the composite loss on the graph:
/// `imp = distance(x•, x∘)`, `rev = distance(y•, x∘)`,
/// `val = distance(y∘, x∘·m̄)` where `mbar` is an `N×1×H×W` inverse-mask
/// node, and `total` the weighted sum.
pub fn composite_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    x_orig: NodeId,
    x_vacc: NodeId,
    y_vacc: NodeId,
    y_orig: NodeId,
    mbar: NodeId,
    weights: LossWeights,
) -> Result<CompositeNodes> {
    let imp = distance_node(g, x_vacc, x_orig)?;
    let rev = distance_node(g, y_vacc, x_orig)?;
    let masked_ref = g.mul(x_orig, mbar)?;
    let val = distance_node(g, y_orig, masked_ref)?;
    let wi = g.scale(imp, S::of_f64(weights.imp));
    let wr = g.scale(rev, S::of_f64(weights.rev));
    let wv = g.scale(val, S::of_f64(weights.val));
    let t = g.add(wi, wr)?;
    let total = g.add(t, wv)?;
    Ok(CompositeNodes { imp, rev, val, total })
}

// ---------------------------------------------------------------------------
// Loss breakdown record
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub imp: f64,
    pub rev: f64,
    pub val: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(imp: f64, rev: f64, val: f64, weights: LossWeights) -> Self {
        let total = weights.imp * imp + weights.rev * rev + weights.val * val;
        LossBreakdown { imp, rev, val, weights, total }
    }

    /// Does `total` equal the weighted sum of the components?
    pub fn total_consistent(&self, tol: f64) -> bool {
        let expect = self.weights.imp * self.imp + self.weights.rev * self.rev + self.weights.val * self.val;
        (self.total - expect).abs() <= tol
    }
}

// ---------------------------------------------------------------------------
// Scalar evaluation API
// ---------------------------------------------------------------------------

fn image_to_nchw_f64(img: &ImageTensor) -> Array4<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| img.data()[[y, x, ch]] as f64)
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::dimension(
            "metric input pair",
            format!("{}x{}x{}", a.height(), a.width(), a.channels()),
            format!("{}x{}x{}", b.height(), b.width(), b.channels()),
        ));
    }
    Ok(())
}

fn check_mask(a: &ImageTensor, mask: &FaceMask) -> Result<()> {
    if mask.height() != a.height() || mask.width() != a.width() {
        return Err(Error::dimension(
            "metric mask",
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// Mean absolute error, optionally restricted to the pixels selected by
/// `region_mask` (binarised at 0.5 and used as the weighting).
pub fn mae(a: &ImageTensor, b: &ImageTensor, region_mask: Option<&FaceMask>) -> Result<f64> {
    check_pair(a, b)?;
    let c = a.channels() as f64;
    match region_mask {
        None => {
            let n = (a.data().len()) as f64;
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum();
            Ok(sum / n)
        }
        Some(mask) => {
            check_mask(a, mask)?;
            let bin = mask.binarise(0.5);
            let weight: f64 = bin.data().iter().map(|&v| v as f64).sum();
            if weight == 0.0 {
                return Err(Error::Metric("region mask selects no pixels".into()));
            }
            let mut sum = 0.0f64;
            for ((y, x, ch), &va) in a.data().indexed_iter() {
                let _ = ch;
                let w = bin.data()[[y, x]] as f64;
                if w > 0.0 {
                    sum += w * (va as f64 - b.data()[[y, x, ch]] as f64).abs();
                }
            }
            Ok(sum / (weight * c))
        }
    }
}

/// Mean squared error with the same region convention as [`mae`].
pub fn mse(a: &ImageTensor, b: &ImageTensor, region_mask: Option<&FaceMask>) -> Result<f64> {
    check_pair(a, b)?;
    let c = a.channels() as f64;
    match region_mask {
        None => {
            let n = a.data().len() as f64;
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            Ok(sum / n)
        }
        Some(mask) => {
            check_mask(a, mask)?;
            let bin = mask.binarise(0.5);
            let weight: f64 = bin.data().iter().map(|&v| v as f64).sum();
            if weight == 0.0 {
                return Err(Error::Metric("region mask selects no pixels".into()));
            }
            let mut sum = 0.0f64;
            for ((y, x, ch), &va) in a.data().indexed_iter() {
                let w = bin.data()[[y, x]] as f64;
                if w > 0.0 {
                    let d = va as f64 - b.data()[[y, x, ch]] as f64;
                    sum += w * d * d;
                }
            }
            Ok(sum / (weight * c))
        }
    }
}

/// The full per-window SSIM map in `f64` (shared by [`ssim`] and the
/// region-restricted variant).
fn ssim_map(a: &ImageTensor, b: &ImageTensor) -> Result<Array4<f64>> {
    check_pair(a, b)?;
    let mut g = Graph::<f64>::new();
    let na = g.input(image_to_nchw_f64(a), false);
    let nb = g.input(image_to_nchw_f64(b), false);
    let map = ssim_map_node(&mut g, na, nb)?;
    Ok(g.value(map).clone())
}

/// Mean SSIM over valid 11×11 windows, averaged across channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.mean().expect("non-empty map"))
}

/// SSIM restricted to windows whose centre pixel lies in the region.
pub fn ssim_region(a: &ImageTensor, b: &ImageTensor, mask: &FaceMask, invert: bool) -> Result<f64> {
    check_mask(a, mask)?;
    let map = ssim_map(a, b)?;
    let bin = mask.binarise(0.5);
    let off = SSIM_WINDOW / 2;
    let (hh, ww) = (map.shape()[2], map.shape()[3]);
    let mut weight = 0.0f64;
    let mut sum = 0.0f64;
    let channels = map.shape()[1];
    for y in 0..hh {
        for x in 0..ww {
            let mut w = bin.data()[[y + off, x + off]] as f64;
            if invert {
                w = 1.0 - w;
            }
            if w > 0.0 {
                weight += w;
                for ch in 0..channels {
                    sum += w * map[[0, ch, y, x]];
                }
            }
        }
    }
    if weight == 0.0 {
        return Err(Error::Metric("no SSIM window centres inside the region".into()));
    }
    Ok(sum / (weight * channels as f64))
}

/// `10·log10(1/MSE)` in dB, capped at 100 for exact matches.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_region(a, b, None)
}

pub fn psnr_region(a: &ImageTensor, b: &ImageTensor, region_mask: Option<&FaceMask>) -> Result<f64> {
    let e = mse(a, b, region_mask)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

/// `mae + (1 − ssim)`: the distance used by every loss term.
pub fn distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(mae(a, b, None)? + (1.0 - ssim(a, b)?))
}

/// Evaluate the composite loss on concrete images.
/// `mbar_rnd` is the inverse mask multiplying the reference for the
/// validation term.
pub fn composite_loss(
    x_orig: &ImageTensor,
    x_vacc: &ImageTensor,
    y_vacc: &ImageTensor,
    y_orig: &ImageTensor,
    mbar_rnd: &FaceMask,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    check_pair(x_orig, x_vacc)?;
    check_pair(x_orig, y_vacc)?;
    check_pair(x_orig, y_orig)?;
    check_mask(x_orig, mbar_rnd)?;
    let mut g = Graph::<f64>::new();
    let x0 = g.input(image_to_nchw_f64(x_orig), false);
    let xv = g.input(image_to_nchw_f64(x_vacc), false);
    let yv = g.input(image_to_nchw_f64(y_vacc), false);
    let y0 = g.input(image_to_nchw_f64(y_orig), false);
    let (h, w) = (mbar_rnd.height(), mbar_rnd.width());
    let mb = Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| mbar_rnd.data()[[y, x]] as f64);
    let mb = g.input(mb, false);
    let nodes = composite_loss_node(&mut g, x0, xv, yv, y0, mb, weights)?;
    Ok(LossBreakdown::new(
        g.scalar(nodes.imp),
        g.scalar(nodes.rev),
        g.scalar(nodes.val),
        weights,
    ))
}

// ---------------------------------------------------------------------------
// Identity similarity
// ---------------------------------------------------------------------------

/// Anything that turns an image into a fixed-length identity vector.
pub trait FaceEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Desk-scale embedder: a fixed-seed random linear projection of the
/// (optionally face-masked) pixels. Valid for relative comparisons; a
/// pretrained face network can be slotted in through the trait.
pub struct RandomProjectionEmbedder {
    resolution: usize,
    mask: Option<FaceMask>,
    weights: Array2<f64>,
}

impl RandomProjectionEmbedder {
    pub const DEFAULT_DIM: usize = 128;

    pub fn new(resolution: usize, dim: usize, mask: Option<FaceMask>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dim must be positive".into()));
        }
        if let Some(m) = &mask {
            if m.height() != resolution || m.width() != resolution {
                return Err(Error::dimension(
                    "embedder mask",
                    format!("{resolution}x{resolution}"),
                    format!("{}x{}", m.height(), m.width()),
                ));
            }
        }
        let n_in = 3 * resolution * resolution;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "identity-embedder"));
        let normal = Normal::new(0.0f64, 1.0 / (n_in as f64).sqrt()).expect("finite std");
        let weights = Array2::from_shape_fn((dim, n_in), |_| normal.sample(&mut rng));
        Ok(RandomProjectionEmbedder { resolution, mask, weights })
    }
}

impl FaceEmbedder for RandomProjectionEmbedder {
    fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let r = self.resolution;
        if image.height() != r || image.width() != r || image.channels() != 3 {
            return Err(Error::dimension(
                "embedder input",
                format!("{r}x{r}x3"),
                format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            ));
        }
        let n_in = 3 * r * r;
        let mut flat = Vec::with_capacity(n_in);
        for ((y, x, _), &v) in image.data().indexed_iter() {
            let w = match &self.mask {
                Some(m) => m.data()[[y, x]] as f64,
                None => 1.0,
            };
            flat.push(v as f64 * w);
        }
        let v = ndarray::Array1::from_vec(flat);
        Ok(self.weights.dot(&v).to_vec())
    }
}

/// Cosine similarity of the two images' embeddings, in `[−1, 1]`.
pub fn identity_similarity(
    a: &ImageTensor,
    b: &ImageTensor,
    embedder: &dyn FaceEmbedder,
) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    if ea.len() != eb.len() {
        return Err(Error::Metric("embedding lengths differ".into()));
    }
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na: f64 = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Classification statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// None when there are no samples at all.
    pub accuracy: Option<f64>,
    /// True positive rate; None when no positive samples exist.
    pub tpr: Option<f64>,
    /// True negative rate; None when no negative samples exist.
    pub tnr: Option<f64>,
    pub support_pos: usize,
    pub support_neg: usize,
}

/// Count accuracy/TPR/TNR at threshold 0.5 (a probability of exactly 0.5
/// counts as a positive prediction). `true` labels the vaccinated class.
pub fn classification_report(scores: &[(f64, bool)]) -> ClassificationReport {
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut pos = 0usize;
    let mut neg = 0usize;
    for &(p, label) in scores {
        let pred = p >= 0.5;
        if label {
            pos += 1;
            if pred {
                tp += 1;
            }
        } else {
            neg += 1;
            if !pred {
                tn += 1;
            }
        }
    }
    let frac = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    ClassificationReport {
        accuracy: frac(tp + tn, pos + neg),
        tpr: frac(tp, pos),
        tnr: frac(tn, neg),
        support_pos: pos,
        support_neg: neg,
    }
}

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Face,
    NonFace,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Full => write!(f, "full"),
            Region::Face => write!(f, "face"),
            Region::NonFace => write!(f, "nonface"),
        }
    }
}

/// One row of quality numbers for a reconstructed/compared image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub region: Region,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub identity_sim: Option<f64>,
}

/// Compute all metrics for a pair over one region. A mask is required for
/// the face and non-face regions.
pub fn metric_record(
    a: &ImageTensor,
    b: &ImageTensor,
    mask: Option<&FaceMask>,
    region: Region,
    embedder: Option<&dyn FaceEmbedder>,
) -> Result<MetricRecord> {
    let identity_sim = match embedder {
        Some(e) => Some(identity_similarity(a, b, e)?),
        None => None,
    };
    let rec = match region {
        Region::Full => MetricRecord {
            region,
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
            mae: mae(a, b, None)?,
            identity_sim,
        },
        Region::Face | Region::NonFace => {
            let m = mask.ok_or_else(|| {
                Error::Parameter(format!("region {region} requires a mask"))
            })?;
            let selector = if region == Region::Face { m.binarise(0.5) } else { m.binarise(0.5).complement() };
            MetricRecord {
                region,
                psnr: psnr_region(a, b, Some(&selector))?,
                ssim: ssim_region(a, b, m, region == Region::NonFace)?,
                mae: mae(a, b, Some(&selector))?,
                identity_sim,
            }
        }
    };
    Ok(rec)
}
