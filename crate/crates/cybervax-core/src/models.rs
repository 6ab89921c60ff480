//! Network definitions: the U-Net backbone shared by vaccinator and
//! neutraliser, the paired [`ImmuneSystem`], and the small validator
//! classifiers.
//!
//! Channel widths follow `base_width · 2^(level/2)` (so a depth-4 network
//! at base 32 runs 32, 32, 64, 64 with a 128-wide bottleneck); width was
//! left open by the reference description and this progression keeps the
//! desk-scale network trainable on a single CPU core.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{clamp_unit, FaceMask, ImageTensor};
use crate::nn::params::{he_normal, zeros, zeros_c};
use crate::nn::{Graph, GraphParams, NodeId, ParamStore, Scalar};
use crate::util::derive_seed;

/// Current checkpoint sidecar format.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// U-Net configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub res_blocks_per_level: usize,
    pub attention_resolutions: BTreeSet<usize>,
    pub depth: usize,
}

impl Default for UNetConfig {
    /// Desk-scale profile: 64×64, RGB + mask in, RGB out, width 32,
    /// depth 4 (feature maps 64→8 plus a 4×4 bottleneck), 3 residual
    /// blocks per level, attention at 4, 8 and 16.
    fn default() -> Self {
        UNetConfig {
            resolution: 64,
            in_channels: 4,
            out_channels: 3,
            base_width: 32,
            res_blocks_per_level: 3,
            attention_resolutions: [4, 8, 16].into_iter().collect(),
            depth: 4,
        }
    }
}

impl UNetConfig {
    /// Small config for gradient-check tests: 16×16, width 8, depth 2.
    pub fn toy() -> Self {
        UNetConfig {
            resolution: 16,
            in_channels: 4,
            out_channels: 3,
            base_width: 8,
            res_blocks_per_level: 1,
            attention_resolutions: [4, 8].into_iter().collect(),
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Parameter(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.resolution % (1 << self.depth) != 0 {
            return Err(Error::Parameter(format!(
                "resolution {} not divisible by 2^depth = {}",
                self.resolution,
                1 << self.depth
            )));
        }
        if self.resolution >> self.depth < 2 {
            return Err(Error::Parameter(format!(
                "bottleneck would be {}×{0}; resolution too small for depth {}",
                self.resolution >> self.depth,
                self.depth
            )));
        }
        if self.base_width < 4 {
            return Err(Error::Parameter(format!("base_width must be ≥ 4, got {}", self.base_width)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Parameter("channel counts must be non-zero".into()));
        }
        if self.res_blocks_per_level == 0 {
            return Err(Error::Parameter("res_blocks_per_level must be ≥ 1".into()));
        }
        let sizes = self.feature_sizes();
        for &r in &self.attention_resolutions {
            if !sizes.contains(&r) {
                return Err(Error::Parameter(format!(
                    "attention resolution {r} not among feature-map sizes {sizes:?}"
                )));
            }
        }
        Ok(())
    }

    /// Channel width at encoder/decoder level `i` (0 = full resolution).
    pub fn level_width(&self, i: usize) -> usize {
        self.base_width << (i / 2)
    }

    pub fn bottleneck_width(&self) -> usize {
        2 * self.level_width(self.depth - 1)
    }

    /// Feature-map size at level `i`.
    pub fn level_resolution(&self, i: usize) -> usize {
        self.resolution >> i
    }

    pub fn bottleneck_resolution(&self) -> usize {
        self.resolution >> self.depth
    }

    /// Every feature-map size occurring in the network (levels plus
    /// bottleneck).
    pub fn feature_sizes(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = (0..self.depth).map(|i| self.level_resolution(i)).collect();
        s.insert(self.bottleneck_resolution());
        s
    }

    fn has_attention(&self, resolution: usize) -> bool {
        self.attention_resolutions.contains(&resolution)
    }
}

/// Largest divisor of `width` not exceeding 32 — the group count used by
/// every normalisation layer.
fn norm_groups(width: usize) -> usize {
    let mut g = width.min(32);
    while width % g != 0 {
        g -= 1;
    }
    g
}

/// Attention head width: 32 where it divides the channel count, otherwise
/// a single full-width head (toy configs).
fn attn_head_dim(width: usize) -> usize {
    if width % 32 == 0 {
        32
    } else {
        width
    }
}

// ---------------------------------------------------------------------------
// U-Net structure description (introspection)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDesc {
    pub resolution: usize,
    pub width: usize,
    pub res_blocks: usize,
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetStructure {
    pub levels: Vec<LevelDesc>,
    pub bottleneck: LevelDesc,
}

impl UNetStructure {
    /// Feature-map sizes at which attention appears.
    pub fn attention_sites(&self) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self
            .levels
            .iter()
            .filter(|l| l.attention)
            .map(|l| l.resolution)
            .collect();
        if self.bottleneck.attention {
            out.insert(self.bottleneck.resolution);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

/// A U-Net bound to a parameter namespace inside some [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    prefix: String,
}

impl UNet {
    /// Declare all parameters under `prefix` and return the handle.
    /// Second res-block convolutions, attention projections and the output
    /// head start at zero so the network begins as a smooth near-constant
    /// map.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        config: UNetConfig,
    ) -> Result<UNet> {
        config.validate()?;
        let net = UNet { config, prefix: prefix.to_string() };
        net.declare_params(store, rng)?;
        Ok(net)
    }

    /// Re-attach to parameters that already exist in a store (checkpoint
    /// load). Verifies every expected name is present.
    pub fn attach<S: Scalar>(
        store: &ParamStore<S>,
        prefix: &str,
        config: UNetConfig,
    ) -> Result<UNet> {
        config.validate()?;
        let net = UNet { config, prefix: prefix.to_string() };
        let mut probe = ParamStore::<S>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        net.declare_params(&mut probe, &mut rng)?;
        for name in probe.names() {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "store is missing parameter {name:?} for network {prefix:?}"
                )));
            }
            if store.value(name)?.shape() != probe.value(name)?.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    store.value(name)?.shape(),
                    probe.value(name)?.shape()
                )));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Static architecture description for structural tests and reports.
    pub fn structure(&self) -> UNetStructure {
        let c = &self.config;
        let levels = (0..c.depth)
            .map(|i| LevelDesc {
                resolution: c.level_resolution(i),
                width: c.level_width(i),
                res_blocks: c.res_blocks_per_level,
                attention: c.has_attention(c.level_resolution(i)),
            })
            .collect();
        UNetStructure {
            levels,
            bottleneck: LevelDesc {
                resolution: c.bottleneck_resolution(),
                width: c.bottleneck_width(),
                res_blocks: 2,
                attention: c.has_attention(c.bottleneck_resolution()),
            },
        }
    }

    /// Number of scalar parameters under this network's prefix.
    pub fn param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        let dot_prefix = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(name, _)| name.starts_with(&dot_prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    fn declare_conv<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        shape: (usize, usize, usize, usize),
        zero_init: bool,
    ) -> Result<()> {
        let w = if zero_init { zeros(shape) } else { he_normal(rng, shape) };
        store.declare(&self.name(&format!("{name}.weight")), w)?;
        store.declare(&self.name(&format!("{name}.bias")), zeros_c(shape.0))?;
        Ok(())
    }

    fn declare_norm<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
    ) -> Result<()> {
        store.declare(&self.name(&format!("{name}.gamma")), crate::nn::params::ones_c(c))?;
        store.declare(&self.name(&format!("{name}.beta")), zeros_c(c))?;
        Ok(())
    }

    fn declare_res_block<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        w: usize,
    ) -> Result<()> {
        self.declare_norm(store, &format!("{name}.norm1"), w)?;
        self.declare_conv(store, rng, &format!("{name}.conv1"), (w, w, 3, 3), false)?;
        self.declare_norm(store, &format!("{name}.norm2"), w)?;
        self.declare_conv(store, rng, &format!("{name}.conv2"), (w, w, 3, 3), true)?;
        Ok(())
    }

    fn declare_attn<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        w: usize,
    ) -> Result<()> {
        self.declare_norm(store, &format!("{name}.norm"), w)?;
        for p in ["q", "k", "v"] {
            self.declare_conv(store, rng, &format!("{name}.{p}"), (w, w, 1, 1), false)?;
        }
        self.declare_conv(store, rng, &format!("{name}.proj"), (w, w, 1, 1), true)?;
        Ok(())
    }

    fn declare_params<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        let c = &self.config;
        self.declare_conv(store, rng, "stem", (c.level_width(0), c.in_channels, 3, 3), false)?;
        for i in 0..c.depth {
            let w = c.level_width(i);
            let res = c.level_resolution(i);
            for b in 0..c.res_blocks_per_level {
                self.declare_res_block(store, rng, &format!("enc{i}.block{b}"), w)?;
                if c.has_attention(res) {
                    self.declare_attn(store, rng, &format!("enc{i}.attn{b}"), w)?;
                }
            }
            let next_w = if i + 1 < c.depth { c.level_width(i + 1) } else { c.bottleneck_width() };
            self.declare_conv(store, rng, &format!("down{i}"), (next_w, w, 3, 3), false)?;
        }
        let bw = c.bottleneck_width();
        self.declare_res_block(store, rng, "mid.block0", bw)?;
        if c.has_attention(c.bottleneck_resolution()) {
            self.declare_attn(store, rng, "mid.attn", bw)?;
        }
        self.declare_res_block(store, rng, "mid.block1", bw)?;
        for i in (0..c.depth).rev() {
            let w = c.level_width(i);
            let res = c.level_resolution(i);
            let src_w = if i + 1 < c.depth { c.level_width(i + 1) } else { c.bottleneck_width() };
            self.declare_conv(store, rng, &format!("up{i}"), (w, src_w, 3, 3), false)?;
            self.declare_conv(store, rng, &format!("fuse{i}"), (w, 2 * w, 3, 3), false)?;
            for b in 0..c.res_blocks_per_level {
                self.declare_res_block(store, rng, &format!("dec{i}.block{b}"), w)?;
                if c.has_attention(res) {
                    self.declare_attn(store, rng, &format!("dec{i}.attn{b}"), w)?;
                }
            }
        }
        self.declare_norm(store, "head.norm", c.level_width(0))?;
        self.declare_conv(store, rng, "head.conv", (c.out_channels, c.level_width(0), 3, 3), true)?;
        Ok(())
    }

    fn conv<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        gp: &mut GraphParams,
        store: &ParamStore<S>,
        name: &str,
        x: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let w = gp.bind(g, store, &self.name(&format!("{name}.weight")))?;
        let b = gp.bind(g, store, &self.name(&format!("{name}.bias")))?;
        let pad = if g.shape(w)[2] == 1 { 0 } else { 1 };
        let y = g.conv2d(x, w, stride, pad, 1)?;
        g.add(y, b)
    }

    fn norm<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        gp: &mut GraphParams,
        store: &ParamStore<S>,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let width = g.shape(x)[1];
        let gamma = gp.bind(g, store, &self.name(&format!("{name}.gamma")))?;
        let beta = gp.bind(g, store, &self.name(&format!("{name}.beta")))?;
        g.group_norm(x, gamma, beta, norm_groups(width))
    }

    fn res_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        gp: &mut GraphParams,
        store: &ParamStore<S>,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.norm(g, gp, store, &format!("{name}.norm1"), x)?;
        let h = g.silu(h);
        let h = self.conv(g, gp, store, &format!("{name}.conv1"), h, 1)?;
        let h = self.norm(g, gp, store, &format!("{name}.norm2"), h)?;
        let h = g.silu(h);
        let h = self.conv(g, gp, store, &format!("{name}.conv2"), h, 1)?;
        g.add(x, h)
    }

    fn attn_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        gp: &mut GraphParams,
        store: &ParamStore<S>,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let width = g.shape(x)[1];
        let n = self.norm(g, gp, store, &format!("{name}.norm"), x)?;
        let q = self.conv(g, gp, store, &format!("{name}.q"), n, 1)?;
        let k = self.conv(g, gp, store, &format!("{name}.k"), n, 1)?;
        let v = self.conv(g, gp, store, &format!("{name}.v"), n, 1)?;
        let a = g.attention(q, k, v, attn_head_dim(width))?;
        let p = self.conv(g, gp, store, &format!("{name}.proj"), a, 1)?;
        g.add(x, p)
    }

    /// Forward pass. `input` must be `N × in_channels × R × R`; the result
    /// is `N × out_channels × R × R` in `(0, 1)` (sigmoid head).
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        gp: &mut GraphParams,
        store: &ParamStore<S>,
        input: NodeId,
    ) -> Result<NodeId> {
        let c = &self.config;
        let shape = g.shape(input);
        if shape[1] != c.in_channels || shape[2] != c.resolution || shape[3] != c.resolution {
            return Err(Error::dimension(
                "unet forward input",
                format!("[N, {}, {}, {}]", c.in_channels, c.resolution, c.resolution),
                format!("{shape:?}"),
            ));
        }
        let mut h = self.conv(g, gp, store, "stem", input, 1)?;
        let mut skips: Vec<NodeId> = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let res = c.level_resolution(i);
            for b in 0..c.res_blocks_per_level {
                h = self.res_block(g, gp, store, &format!("enc{i}.block{b}"), h)?;
                if c.has_attention(res) {
                    h = self.attn_block(g, gp, store, &format!("enc{i}.attn{b}"), h)?;
                }
            }
            skips.push(h);
            h = self.conv(g, gp, store, &format!("down{i}"), h, 2)?;
        }
        h = self.res_block(g, gp, store, "mid.block0", h)?;
        if c.has_attention(c.bottleneck_resolution()) {
            h = self.attn_block(g, gp, store, "mid.attn", h)?;
        }
        h = self.res_block(g, gp, store, "mid.block1", h)?;
        for i in (0..c.depth).rev() {
            let res = c.level_resolution(i);
            h = g.upsample2(h);
            h = self.conv(g, gp, store, &format!("up{i}"), h, 1)?;
            let cat = g.concat_c(h, skips[i])?;
            h = self.conv(g, gp, store, &format!("fuse{i}"), cat, 1)?;
            for b in 0..c.res_blocks_per_level {
                h = self.res_block(g, gp, store, &format!("dec{i}.block{b}"), h)?;
                if c.has_attention(res) {
                    h = self.attn_block(g, gp, store, &format!("dec{i}.attn{b}"), h)?;
                }
            }
        }
        let out = self.norm(g, gp, store, "head.norm", h)?;
        let out = g.silu(out);
        let out = self.conv(g, gp, store, "head.conv", out, 1)?;
        Ok(g.sigmoid(out))
    }
}

// ---------------------------------------------------------------------------
// Image <-> NCHW conversion
// ---------------------------------------------------------------------------

/// Stack images (all the same shape) into an `N×C×H×W` batch.
pub fn images_to_nchw(images: &[&ImageTensor]) -> Result<Array4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("empty image batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::dimension(
                "images_to_nchw",
                format!("{h}x{w}x{c}"),
                format!("{}x{}x{}", img.height(), img.width(), img.channels()),
            ));
        }
        for ((y, x, ch), &v) in img.data().indexed_iter() {
            out[[n, ch, y, x]] = v;
        }
    }
    Ok(out)
}

pub fn image_to_nchw(image: &ImageTensor) -> Array4<f32> {
    images_to_nchw(&[image]).expect("single image")
}

/// Masks as an `N×1×H×W` batch.
pub fn masks_to_nchw(masks: &[&FaceMask]) -> Result<Array4<f32>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Parameter("empty mask batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Array4::<f32>::zeros((masks.len(), 1, h, w));
    for (n, m) in masks.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(Error::dimension(
                "masks_to_nchw",
                format!("{h}x{w}"),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
        for ((y, x), &v) in m.data().indexed_iter() {
            out[[n, 0, y, x]] = v;
        }
    }
    Ok(out)
}

pub fn mask_to_nchw(mask: &FaceMask) -> Array4<f32> {
    masks_to_nchw(&[mask]).expect("single mask")
}

/// Split a batch back into clamped images.
pub fn nchw_to_images(batch: &Array4<f32>) -> Vec<ImageTensor> {
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    (0..n)
        .map(|ni| {
            let mut img = ndarray::Array3::<f32>::zeros((h, w, c));
            for ((ch, y, x), &v) in batch.slice(s![ni, .., .., ..]).indexed_iter() {
                img[[y, x, ch]] = v;
            }
            clamp_unit(img)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ImmuneSystem: vaccinator + neutraliser pair
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImmuneConfig {
    pub vaccinator: UNetConfig,
    pub neutraliser: UNetConfig,
}

impl Default for ImmuneConfig {
    fn default() -> Self {
        ImmuneConfig {
            vaccinator: UNetConfig::default(),
            neutraliser: UNetConfig::default(),
        }
    }
}

impl ImmuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.vaccinator.validate()?;
        self.neutraliser.validate()?;
        if self.vaccinator.resolution != self.neutraliser.resolution {
            return Err(Error::Parameter(format!(
                "vaccinator and neutraliser must share a resolution ({} vs {})",
                self.vaccinator.resolution, self.neutraliser.resolution
            )));
        }
        Ok(())
    }

    /// Both networks shrunk to the toy profile.
    pub fn toy() -> Self {
        ImmuneConfig {
            vaccinator: UNetConfig::toy(),
            neutraliser: UNetConfig::toy(),
        }
    }
}

/// Sidecar metadata stored next to every parameter archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

fn sidecar_path(archive: &Path) -> PathBuf {
    let mut os = archive.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

pub(crate) fn write_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    params.save_archive(path)?;
    let json = serde_json::to_vec_pretty(meta)?;
    crate::util::atomic_write(&sidecar_path(path), &json)
        .map_err(|e| Error::Checkpoint(format!("cannot write sidecar for {}: {e}", path.display())))
}

pub(crate) fn read_checkpoint(path: &Path, expect_kind: &str) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    let params = ParamStore::<f32>::load_archive(path)?;
    let sidecar = sidecar_path(path);
    let bytes = std::fs::read(&sidecar).map_err(|e| {
        Error::Checkpoint(format!("cannot read sidecar {}: {e}", sidecar.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("bad sidecar {}: {e}", sidecar.display())))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }
    if meta.kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {:?} where {:?} was expected",
            meta.kind, expect_kind
        )));
    }
    Ok((params, meta))
}

/// The trained artefact: vaccinator and neutraliser with shared parameter
/// storage and a training step counter.
#[derive(Debug, Clone)]
pub struct ImmuneSystem {
    config: ImmuneConfig,
    params: ParamStore<f32>,
    vaccinator: UNet,
    neutraliser: UNet,
    step: u64,
}

impl ImmuneSystem {
    /// Fresh random initialisation; sub-seeds are derived per network so
    /// the two nets differ even though they share one root seed.
    pub fn new(config: ImmuneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::<f32>::new();
        let mut rng_v = ChaCha12Rng::seed_from_u64(derive_seed(seed, "init.vaccinator"));
        let vaccinator = UNet::init(&mut params, &mut rng_v, "vaccinator", config.vaccinator.clone())?;
        let mut rng_n = ChaCha12Rng::seed_from_u64(derive_seed(seed, "init.neutraliser"));
        let neutraliser = UNet::init(&mut params, &mut rng_n, "neutraliser", config.neutraliser.clone())?;
        Ok(ImmuneSystem { config, params, vaccinator, neutraliser, step: 0 })
    }

    pub fn config(&self) -> &ImmuneConfig {
        &self.config
    }

    pub fn vaccinator(&self) -> &UNet {
        &self.vaccinator
    }

    pub fn neutraliser(&self) -> &UNet {
        &self.neutraliser
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advance the step counter (monotone).
    pub fn set_step(&mut self, step: u64) -> Result<()> {
        if step < self.step {
            return Err(Error::Train(format!(
                "step counter may not decrease ({} -> {step})",
                self.step
            )));
        }
        self.step = step;
        Ok(())
    }

    fn check_io(&self, cfg: &UNetConfig, image: &ImageTensor, mask: &FaceMask) -> Result<()> {
        let r = cfg.resolution;
        if image.height() != r || image.width() != r || image.channels() != 3 {
            return Err(Error::dimension(
                "network input image",
                format!("{r}x{r}x3"),
                format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            ));
        }
        if mask.height() != r || mask.width() != r {
            return Err(Error::dimension(
                "network input mask",
                format!("{r}x{r}"),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(())
    }

    fn forward_net(&self, net: &UNet, image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
        self.check_io(net.config(), image, mask)?;
        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let img = g.input(image_to_nchw(image), false);
        let msk = g.input(mask_to_nchw(mask), false);
        let cat = g.concat_c(img, msk)?;
        let out = net.forward(&mut g, &mut gp, &self.params, cat)?;
        let batch = g.value(out).clone();
        Ok(nchw_to_images(&batch).remove(0))
    }

    /// Raw vaccinator output for `(image, mask)` — the full-frame network
    /// image before any blending.
    pub fn forward_vaccinator(&self, image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
        self.forward_net(&self.vaccinator, image, mask)
    }

    /// Raw neutraliser output for `(image, mask)`.
    pub fn forward_neutraliser(&self, image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
        self.forward_net(&self.neutraliser, image, mask)
    }

    /// Write the parameter archive plus sidecar metadata.
    pub fn save(&self, path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "immune_system".to_string(),
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            metrics: metrics.clone(),
        };
        write_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (params, meta) = read_checkpoint(path, "immune_system")?;
        let config: ImmuneConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad ImmuneSystem config in sidecar: {e}")))?;
        config.validate()?;
        let vaccinator = UNet::attach(&params, "vaccinator", config.vaccinator.clone())?;
        let neutraliser = UNet::attach(&params, "neutraliser", config.neutraliser.clone())?;
        let sys = ImmuneSystem {
            config,
            params,
            vaccinator,
            neutraliser,
            step: meta.step,
        };
        Ok((sys, meta))
    }
}

// ---------------------------------------------------------------------------
// Validators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidatorArch {
    Mlp,
    SmallCnn,
}

impl std::fmt::Display for ValidatorArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidatorArch::Mlp => write!(f, "mlp"),
            ValidatorArch::SmallCnn => write!(f, "small_cnn"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidatorConfig {
    pub architecture: ValidatorArch,
    pub resolution: usize,
    /// Hidden layer sizes (MLP) or conv channel progression (CNN).
    pub hidden: Vec<usize>,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig::mlp(64)
    }
}

impl ValidatorConfig {
    pub fn mlp(resolution: usize) -> Self {
        ValidatorConfig {
            architecture: ValidatorArch::Mlp,
            resolution,
            hidden: vec![256, 64],
        }
    }

    pub fn small_cnn(resolution: usize) -> Self {
        ValidatorConfig {
            architecture: ValidatorArch::SmallCnn,
            resolution,
            hidden: vec![16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Parameter(format!(
                "validator resolution must be ≥ 8, got {}",
                self.resolution
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Parameter("validator hidden sizes must be non-empty and positive".into()));
        }
        if self.architecture == ValidatorArch::SmallCnn
            && self.resolution % (1 << self.hidden.len()) != 0
        {
            return Err(Error::Parameter(format!(
                "cnn validator needs resolution divisible by 2^{} for its strided convs",
                self.hidden.len()
            )));
        }
        Ok(())
    }
}

/// Binary classifier over full images: one logit, sigmoid at the API edge.
#[derive(Debug, Clone)]
pub struct Validator {
    config: ValidatorConfig,
    params: ParamStore<f32>,
    step: u64,
}

impl Validator {
    pub fn new(config: ValidatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "init.validator"));
        Self::declare(&config, &mut params, &mut rng)?;
        Ok(Validator { config, params, step: 0 })
    }

    fn declare(
        config: &ValidatorConfig,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        match config.architecture {
            ValidatorArch::Mlp => {
                let mut prev = 3 * config.resolution * config.resolution;
                for (i, &h) in config.hidden.iter().enumerate() {
                    store.declare(&format!("validator.fc{i}.weight"), he_normal(rng, (h, prev, 1, 1)))?;
                    store.declare(&format!("validator.fc{i}.bias"), zeros_c(h))?;
                    prev = h;
                }
                store.declare("validator.out.weight", he_normal(rng, (1, prev, 1, 1)))?;
                store.declare("validator.out.bias", zeros_c(1))?;
            }
            ValidatorArch::SmallCnn => {
                let mut prev = 3;
                for (i, &ch) in config.hidden.iter().enumerate() {
                    store.declare(&format!("validator.conv{i}.weight"), he_normal(rng, (ch, prev, 3, 3)))?;
                    store.declare(&format!("validator.conv{i}.bias"), zeros_c(ch))?;
                    prev = ch;
                }
                store.declare("validator.out.weight", he_normal(rng, (1, prev, 1, 1)))?;
                store.declare("validator.out.bias", zeros_c(1))?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ValidatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step.max(self.step);
    }

    /// Graph forward producing one logit per sample (`N×1×1×1`).
    pub fn forward_graph(
        &self,
        g: &mut Graph<f32>,
        gp: &mut GraphParams,
        store: &ParamStore<f32>,
        input: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(input);
        let r = self.config.resolution;
        if shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::dimension(
                "validator input",
                format!("[N, 3, {r}, {r}]"),
                format!("{shape:?}"),
            ));
        }
        let n = shape[0];
        match self.config.architecture {
            ValidatorArch::Mlp => {
                let mut h = g.reshape(input, [n, 3 * r * r, 1, 1])?;
                for i in 0..self.config.hidden.len() {
                    let w = gp.bind(g, store, &format!("validator.fc{i}.weight"))?;
                    let b = gp.bind(g, store, &format!("validator.fc{i}.bias"))?;
                    let y = g.conv2d(h, w, 1, 0, 1)?;
                    let y = g.add(y, b)?;
                    h = g.silu(y);
                }
                let w = gp.bind(g, store, "validator.out.weight")?;
                let b = gp.bind(g, store, "validator.out.bias")?;
                let y = g.conv2d(h, w, 1, 0, 1)?;
                g.add(y, b)
            }
            ValidatorArch::SmallCnn => {
                let mut h = input;
                for i in 0..self.config.hidden.len() {
                    let w = gp.bind(g, store, &format!("validator.conv{i}.weight"))?;
                    let b = gp.bind(g, store, &format!("validator.conv{i}.bias"))?;
                    let y = g.conv2d(h, w, 2, 1, 1)?;
                    let y = g.add(y, b)?;
                    h = g.silu(y);
                }
                let pooled = g.spatial_mean(h);
                let w = gp.bind(g, store, "validator.out.weight")?;
                let b = gp.bind(g, store, "validator.out.bias")?;
                let y = g.conv2d(pooled, w, 1, 0, 1)?;
                g.add(y, b)
            }
        }
    }

    /// Probability that `image` is a vaccinated-derived input.
    pub fn forward(&self, image: &ImageTensor) -> Result<f32> {
        let r = self.config.resolution;
        if image.height() != r || image.width() != r || image.channels() != 3 {
            return Err(Error::dimension(
                "validator input image",
                format!("{r}x{r}x3"),
                format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            ));
        }
        let mut g = Graph::<f32>::new();
        let mut gp = GraphParams::new();
        let x = g.input(image_to_nchw(image), false);
        let logit = self.forward_graph(&mut g, &mut gp, &self.params, x)?;
        let prob = g.sigmoid(logit);
        Ok(g.scalar(prob))
    }

    pub fn save(&self, path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "validator".to_string(),
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            metrics: metrics.clone(),
        };
        write_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (params, meta) = read_checkpoint(path, "validator")?;
        let config: ValidatorConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad validator config in sidecar: {e}")))?;
        config.validate()?;
        // Verify the archive holds exactly the expected parameters.
        let mut probe = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        Self::declare(&config, &mut probe, &mut rng)?;
        for name in probe.names() {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "validator checkpoint is missing parameter {name:?}"
                )));
            }
        }
        Ok((
            Validator {
                config,
                params,
                step: meta.step,
            },
            meta,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy_system(seed: u64) -> ImmuneSystem {
        ImmuneSystem::new(ImmuneConfig::toy(), seed).unwrap()
    }

    fn random_image(res: usize, seed: u64) -> ImageTensor {
        let mut s = seed;
        ImageTensor::new(Array3::from_shape_fn((res, res, 3), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32) / (1u64 << 24) as f32
        }))
        .unwrap()
    }

    fn toy_mask(res: usize) -> FaceMask {
        crate::masks::ellipse_mask(res, res, res as f32 / 2.0, res as f32 / 2.0, res as f32 / 4.0, res as f32 / 5.0)
            .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        assert!(UNetConfig::toy().validate().is_ok());
        let mut bad = UNetConfig::default();
        bad.resolution = 60;
        assert!(bad.validate().is_err());
        let mut bad = UNetConfig::default();
        bad.attention_resolutions.insert(7);
        assert!(bad.validate().is_err());
        let mut bad = UNetConfig::default();
        bad.depth = 5; // bottleneck would be 2: allowed; depth 6 → 1, too deep
        assert!(bad.validate().is_ok());
        bad.depth = 6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_widths_and_sizes() {
        let c = UNetConfig::default();
        assert_eq!((0..4).map(|i| c.level_width(i)).collect::<Vec<_>>(), vec![32, 32, 64, 64]);
        assert_eq!(c.bottleneck_width(), 128);
        assert_eq!(c.feature_sizes(), [4, 8, 16, 32, 64].into_iter().collect());
    }

    #[test]
    fn attention_exactly_at_configured_sizes() {
        let sys = ImmuneSystem::new(ImmuneConfig::default(), 1).unwrap();
        let st = sys.vaccinator().structure();
        assert_eq!(st.attention_sites(), [4, 8, 16].into_iter().collect());
        // Levels at 64 and 32 have no attention.
        assert!(!st.levels[0].attention);
        assert!(!st.levels[1].attention);
    }

    #[test]
    fn param_count_stable_across_seeds() {
        let a = ImmuneSystem::new(ImmuneConfig::toy(), 1).unwrap();
        let b = ImmuneSystem::new(ImmuneConfig::toy(), 999).unwrap();
        let ca = a.vaccinator().param_count(a.params());
        let cb = b.vaccinator().param_count(b.params());
        assert_eq!(ca, cb);
        assert!(ca > 0);
        // Vaccinator and neutraliser have identical architecture here.
        assert_eq!(ca, a.neutraliser().param_count(a.params()));
        // And together they account for every parameter.
        assert_eq!(2 * ca, a.params().total_params());
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let sys = toy_system(7);
        let img = random_image(16, 3);
        let mask = toy_mask(16);
        let out1 = sys.forward_vaccinator(&img, &mask).unwrap();
        let out2 = sys.forward_vaccinator(&img, &mask).unwrap();
        assert_eq!(out1.height(), 16);
        assert_eq!(out1.channels(), 3);
        for &v in out1.data().iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(out1.data(), out2.data(), "eval-mode forward must be deterministic");

        let n1 = sys.forward_neutraliser(&img, &mask).unwrap();
        assert_eq!(n1.height(), 16);

        // Non-identity at init: the zero-initialised head yields a
        // near-constant 0.5 map, not the input.
        let max_diff = out1
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
            .max(0.0);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn forward_rejects_wrong_resolution() {
        let sys = toy_system(7);
        let img = random_image(32, 3);
        let mask = toy_mask(32);
        assert!(matches!(
            sys.forward_vaccinator(&img, &mask),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn save_load_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("immune.ckpt");
        let mut sys = toy_system(11);
        sys.set_step(42).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("loss_total".to_string(), 0.123);
        sys.save(&path, &metrics).unwrap();

        let (loaded, meta) = ImmuneSystem::load(&path).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(loaded.step(), 42);
        assert_eq!(meta.metrics["loss_total"], 0.123);

        let img = random_image(16, 5);
        let mask = toy_mask(16);
        let a = sys.forward_vaccinator(&img, &mask).unwrap();
        let b = loaded.forward_vaccinator(&img, &mask).unwrap();
        assert_eq!(a.data(), b.data());
        let an = sys.forward_neutraliser(&img, &mask).unwrap();
        let bn = loaded.forward_neutraliser(&img, &mask).unwrap();
        assert_eq!(an.data(), bn.data());
    }

    #[test]
    fn step_counter_monotone() {
        let mut sys = toy_system(1);
        sys.set_step(5).unwrap();
        assert!(sys.set_step(3).is_err());
        assert!(sys.set_step(5).is_ok());
    }

    #[test]
    fn load_missing_checkpoint_is_error() {
        let err = ImmuneSystem::load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn validator_output_in_unit_interval_and_deterministic() {
        for config in [ValidatorConfig::mlp(16), ValidatorConfig::small_cnn(16)] {
            let v = Validator::new(config, 3).unwrap();
            let img = random_image(16, 9);
            let p1 = v.forward(&img).unwrap();
            let p2 = v.forward(&img).unwrap();
            assert!((0.0..=1.0).contains(&p1));
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn validator_rejects_wrong_resolution() {
        let v = Validator::new(ValidatorConfig::mlp(16), 3).unwrap();
        assert!(v.forward(&random_image(32, 1)).is_err());
    }

    #[test]
    fn validator_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("validator.ckpt");
        let v = Validator::new(ValidatorConfig::small_cnn(16), 3).unwrap();
        v.save(&path, &BTreeMap::new()).unwrap();
        let (loaded, _) = Validator::load(&path).unwrap();
        let img = random_image(16, 2);
        assert_eq!(v.forward(&img).unwrap(), loaded.forward(&img).unwrap());
        // Kind mismatch: an immune-system loader must refuse this file.
        assert!(ImmuneSystem::load(&path).is_err());
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        // The full network in f64, loss = mean(output); a sample of
        // parameters is checked against central differences at 1e-3
        // relative tolerance.
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = UNet::init(&mut store, &mut rng, "toy", UNetConfig::toy()).unwrap();
        let mut input_seed = 77u64;
        let input = Array4::from_shape_fn((1, 4, 16, 16), |_| {
            input_seed = input_seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((input_seed >> 33) as f64 / (1u64 << 31) as f64) * 0.8 + 0.1
        });

        let mut g = Graph::<f64>::new();
        let mut gp = GraphParams::new();
        let x = g.input(input.clone(), false);
        let y = net.forward(&mut g, &mut gp, &store, x).unwrap();
        let loss = g.mean(y);
        g.backward(loss).unwrap();
        store.zero_grads();
        gp.harvest(&g, &mut store).unwrap();

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let mut gp = GraphParams::new();
            let x = g.input(input.clone(), false);
            let y = net.forward(&mut g, &mut gp, &store, x).unwrap();
            let l = g.mean(y);
            g.scalar(l)
        };

        // Representative parameters: stem, deep conv, norm affine, attention
        // projection input, head.
        let picks = [
            "toy.stem.weight",
            "toy.enc0.block0.conv1.weight",
            "toy.mid.block0.norm1.gamma",
            "toy.mid.attn.q.weight",
            "toy.dec0.block0.conv1.bias",
            "toy.head.conv.weight",
        ];
        let eps = 1e-5;
        for name in picks {
            let analytic = store.entry(name).unwrap().grad[[0, 0, 0, 0]];
            let base = store.value(name).unwrap()[[0, 0, 0, 0]];
            let mut plus = store.clone();
            plus.entry_mut(name).unwrap().value[[0, 0, 0, 0]] = base + eps;
            let mut minus = store.clone();
            minus.entry_mut(name).unwrap().value[[0, 0, 0, 0]] = base - eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let denom = fd.abs().max(1e-4);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
