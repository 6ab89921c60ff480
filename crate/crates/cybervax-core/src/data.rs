//! Datasets: image/landmark ingestion, the procedural portrait generator
//! used for dependency-free runs, and report persistence.
//!
//! The synthetic generator exists so every training and acceptance path
//! can run without external data: each portrait is fully determined by
//! its parameter record, and its ground-truth mask is the same ellipse
//! the renderer painted, so mask and face agree exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{clamp_unit, resize_bilinear, FaceMask, ImageTensor};
use crate::masks::{ellipse_mask, mask_from_landmarks, parse_landmark_file, LandmarkSet};
use crate::util::{atomic_write, derive_seed, derive_seed_indexed};

// ---------------------------------------------------------------------------
// Image file I/O (8-bit at the boundary)
// ---------------------------------------------------------------------------

/// Write an image as 8-bit RGB PNG (values rounded to the 1/255 grid).
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Data(format!(
            "PNG export expects 3 channels, got {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for ((y, x, c), &v) in image.data().indexed_iter() {
        buf.get_pixel_mut(x as u32, y as u32).0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    let mut bytes: Vec<u8> = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Decode an image file to RGB in `[0,1]`, optionally resizing to a
/// square `resolution`.
pub fn load_image(path: &Path, resolution: Option<usize>) -> Result<ImageTensor> {
    let decoded = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let arr = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        decoded.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    });
    let img = clamp_unit(arr);
    Ok(match resolution {
        Some(r) if r != h || r != w => resize_bilinear(&img, r, r),
        _ => img,
    })
}

// ---------------------------------------------------------------------------
// Synthetic portraits
// ---------------------------------------------------------------------------

/// Background texture: a base colour plus two sinusoidal gratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub base: [f32; 3],
    pub freq: (f32, f32),
    pub angle: (f32, f32),
    pub amp: (f32, f32),
}

/// Everything needed to redraw one synthetic identity. Geometry is stored
/// as frame fractions, so the same identity renders consistently at any
/// resolution. Frame jitter (for multi-frame "video" use) derives from
/// the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceParams {
    pub seed: u64,
    pub skin_tone: [f32; 3],
    /// Face ellipse centre as (y, x) frame fractions.
    pub face_center: (f32, f32),
    /// Face ellipse radii as frame fractions (ry, rx).
    pub face_axes: (f32, f32),
    /// Eye centre offset from the face centre, as fractions of the face
    /// radii (dy of ry — negative is up — and ±dx of rx).
    pub eye_offset: (f32, f32),
    /// Eye radius as a fraction of rx.
    pub eye_radius: f32,
    pub eye_color: [f32; 3],
    /// Mouth centre offset below face centre as a fraction of ry.
    pub mouth_offset: f32,
    /// Mouth half-axes as fractions of (ry, rx).
    pub mouth_size: (f32, f32),
    pub mouth_color: [f32; 3],
    pub background: BackgroundParams,
}

impl SyntheticFaceParams {
    /// Draw an identity from its seed. All sampling ranges keep the face
    /// (with jitter headroom) inside the frame.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "synthetic-face"));
        let r = rng.random_range(0.55..0.92f32);
        let g = r * rng.random_range(0.72..0.9f32);
        let b = g * rng.random_range(0.65..0.92f32);
        SyntheticFaceParams {
            seed,
            skin_tone: [r, g, b],
            face_center: (rng.random_range(0.44..0.56), rng.random_range(0.44..0.56)),
            face_axes: (rng.random_range(0.24..0.31), rng.random_range(0.17..0.23)),
            eye_offset: (rng.random_range(-0.42..-0.22), rng.random_range(0.35..0.52)),
            eye_radius: rng.random_range(0.11..0.18),
            eye_color: [
                rng.random_range(0.03..0.25),
                rng.random_range(0.03..0.3),
                rng.random_range(0.05..0.45),
            ],
            mouth_offset: rng.random_range(0.34..0.55),
            mouth_size: (rng.random_range(0.08..0.16), rng.random_range(0.28..0.45)),
            mouth_color: [
                rng.random_range(0.45..0.72),
                rng.random_range(0.12..0.3),
                rng.random_range(0.12..0.3),
            ],
            background: BackgroundParams {
                base: [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                ],
                freq: (rng.random_range(1.5..4.5), rng.random_range(1.5..4.5)),
                angle: (
                    rng.random_range(0.0..std::f32::consts::PI),
                    rng.random_range(0.0..std::f32::consts::PI),
                ),
                amp: (rng.random_range(0.03..0.12), rng.random_range(0.02..0.08)),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (cy, cx) = self.face_center;
        let (ry, rx) = self.face_axes;
        let fits = cy - ry > 0.02 && cy + ry < 0.98 && cx - rx > 0.02 && cx + rx < 0.98;
        if !(ry > 0.0 && rx > 0.0 && fits) {
            return Err(Error::Parameter(format!(
                "face ellipse out of frame: centre ({cy}, {cx}), radii ({ry}, {rx})"
            )));
        }
        Ok(())
    }

    /// Small deterministic pose/lighting change for frame `n` of this
    /// identity (frame 0 is untouched).
    fn jitter(&self, frame: u32) -> (f32, f32, f32) {
        if frame == 0 {
            return (0.0, 0.0, 0.0);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed_indexed(
            self.seed,
            "synthetic-frame",
            frame as u64,
        ));
        (
            rng.random_range(-0.012..0.012f32),
            rng.random_range(-0.012..0.012f32),
            rng.random_range(-0.05..0.05f32),
        )
    }

    /// Face ellipse in pixel coordinates at `resolution`, for frame `n`.
    pub fn face_ellipse_px(&self, resolution: usize, frame: u32) -> (f32, f32, f32, f32) {
        let (jy, jx, _) = self.jitter(frame);
        let r = resolution as f32;
        (
            (self.face_center.0 + jy) * r,
            (self.face_center.1 + jx) * r,
            self.face_axes.0 * r,
            self.face_axes.1 * r,
        )
    }

    /// The exact ground-truth mask: the same ellipse the renderer fills.
    pub fn ground_truth_mask(&self, resolution: usize, frame: u32) -> Result<FaceMask> {
        let (cy, cx, ry, rx) = self.face_ellipse_px(resolution, frame);
        ellipse_mask(resolution, resolution, cy, cx, ry, rx)
    }

    /// Render frame `n` of this identity.
    pub fn render(&self, resolution: usize, frame: u32) -> Result<ImageTensor> {
        self.validate()?;
        let r = resolution as f32;
        let (cy, cx, ry, rx) = self.face_ellipse_px(resolution, frame);
        let (_, _, light) = self.jitter(frame);
        let bg = &self.background;
        let (sin_a0, cos_a0) = bg.angle.0.sin_cos();
        let (sin_a1, cos_a1) = bg.angle.1.sin_cos();

        let eye_dy = self.eye_offset.0 * ry;
        let eye_dx = self.eye_offset.1 * rx;
        let eye_r = self.eye_radius * rx;
        let mouth_cy = cy + self.mouth_offset * ry;
        let (mouth_ry, mouth_rx) = (self.mouth_size.0 * ry, self.mouth_size.1 * rx);

        let mut data = Array3::<f32>::zeros((resolution, resolution, 3));
        for y in 0..resolution {
            for x in 0..resolution {
                let (yf, xf) = (y as f32, x as f32);
                let dy = (yf - cy) / ry;
                let dx = (xf - cx) / rx;
                let d2 = dy * dy + dx * dx;
                let px: [f32; 3] = if d2 <= 1.0 {
                    // Eyes and mouth, painted over shaded skin.
                    let shade = 1.0 - 0.28 * d2 + light;
                    let in_eye = {
                        let l = ((yf - (cy + eye_dy)).powi(2) + (xf - (cx - eye_dx)).powi(2)).sqrt();
                        let rgt = ((yf - (cy + eye_dy)).powi(2) + (xf - (cx + eye_dx)).powi(2)).sqrt();
                        l <= eye_r || rgt <= eye_r
                    };
                    let in_mouth = {
                        let my = (yf - mouth_cy) / mouth_ry;
                        let mx = (xf - cx) / mouth_rx;
                        my * my + mx * mx <= 1.0
                    };
                    if in_eye {
                        self.eye_color
                    } else if in_mouth {
                        self.mouth_color
                    } else {
                        [
                            self.skin_tone[0] * shade,
                            self.skin_tone[1] * shade,
                            self.skin_tone[2] * shade,
                        ]
                    }
                } else {
                    let u = xf / r;
                    let v = yf / r;
                    let t0 = (std::f32::consts::TAU * bg.freq.0 * (u * cos_a0 + v * sin_a0)).sin();
                    let t1 = (std::f32::consts::TAU * bg.freq.1 * (u * cos_a1 + v * sin_a1)).sin();
                    let tex = bg.amp.0 * t0 + bg.amp.1 * t1 + light * 0.5;
                    [bg.base[0] + tex, bg.base[1] + tex, bg.base[2] + tex]
                };
                for c in 0..3 {
                    data[[y, x, c]] = px[c];
                }
            }
        }
        Ok(clamp_unit(data))
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// How a record's face mask is obtained.
#[derive(Debug, Clone)]
pub enum MaskSpec {
    /// Landmarks in original-image coordinates (scaled at mask build).
    Landmarks { set: LandmarkSet, orig_size: (usize, usize) },
    /// Ellipse in resolution-space pixel coordinates.
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    /// No information: centred largest-ellipse heuristic.
    Fallback,
}

#[derive(Debug, Clone)]
pub enum RecordSource {
    File(PathBuf),
    Synthetic { params: SyntheticFaceParams, frame: u32 },
}

#[derive(Debug, Clone)]
pub struct FaceRecord {
    /// Identity label (file stem, or synthetic id).
    pub id: String,
    pub source: RecordSource,
    pub mask: MaskSpec,
}

/// Border softening applied to landmark-derived masks (radius, σ).
pub const LANDMARK_SOFTEN: (usize, f32) = (2, 1.0);

/// The centred heuristic used when no landmarks are available.
pub fn fallback_ellipse(resolution: usize) -> (f32, f32, f32, f32) {
    let r = resolution as f32;
    (0.5 * r, 0.5 * r, 0.33 * r, 0.26 * r)
}

#[derive(Debug, Clone)]
pub struct FaceDataset {
    resolution: usize,
    split: Split,
    records: Vec<FaceRecord>,
}

impl FaceDataset {
    pub fn new(resolution: usize, split: Split, records: Vec<FaceRecord>) -> Self {
        FaceDataset { resolution, split, records }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, i: usize) -> &FaceRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[FaceRecord] {
        &self.records
    }

    /// Distinct identity labels, sorted.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Decode/render record `i` at the dataset resolution.
    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        let rec = &self.records[i];
        match &rec.source {
            RecordSource::File(path) => load_image(path, Some(self.resolution)),
            RecordSource::Synthetic { params, frame } => params.render(self.resolution, *frame),
        }
    }

    /// Face mask for record `i` at the dataset resolution.
    pub fn mask(&self, i: usize) -> Result<FaceMask> {
        let rec = &self.records[i];
        let r = self.resolution;
        match &rec.mask {
            MaskSpec::Ellipse { cy, cx, ry, rx } => ellipse_mask(r, r, *cy, *cx, *ry, *rx),
            MaskSpec::Fallback => {
                let (cy, cx, ry, rx) = fallback_ellipse(r);
                ellipse_mask(r, r, cy, cx, ry, rx)
            }
            MaskSpec::Landmarks { set, orig_size } => {
                let (h0, w0) = *orig_size;
                let (sy, sx) = (r as f32 / h0 as f32, r as f32 / w0 as f32);
                let scaled: Vec<(f32, f32)> =
                    set.points().iter().map(|&(x, y)| (x * sx, y * sy)).collect();
                let set = LandmarkSet::new(scaled)?;
                mask_from_landmarks(&set, r, r, LANDMARK_SOFTEN.0, LANDMARK_SOFTEN.1)
            }
        }
    }

    /// Convenience: image and mask together.
    pub fn sample(&self, i: usize) -> Result<(ImageTensor, FaceMask)> {
        Ok((self.image(i)?, self.mask(i)?))
    }
}

/// A dataset load along with any per-file diagnostics (skipped images,
/// landmark fallbacks).
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: FaceDataset,
    pub diagnostics: Vec<String>,
}

/// Load every decodable image in `dir` (sorted by filename). Corrupt
/// files are skipped with a diagnostic; images without a landmark entry
/// fall back to the centred-ellipse heuristic with a logged warning.
pub fn load_dataset(
    dir: &Path,
    landmarks: Option<&Path>,
    resolution: usize,
    split: Split,
) -> Result<LoadOutcome> {
    let landmark_map: BTreeMap<String, LandmarkSet> = match landmarks {
        Some(p) => parse_landmark_file(p)?,
        None => BTreeMap::new(),
    };
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if ["png", "jpg", "jpeg"].contains(&e.as_str())
                )
        })
        .collect();
    names.sort();

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for path in names {
        let file_name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let dims = match image::image_dimensions(&path) {
            Ok((w, h)) => (h as usize, w as usize),
            Err(e) => {
                let msg = format!("skipping {}: {e}", path.display());
                log::warn!("{msg}");
                diagnostics.push(msg);
                continue;
            }
        };
        let mask = match landmark_map.get(&file_name) {
            Some(set) => MaskSpec::Landmarks { set: set.clone(), orig_size: dims },
            None => {
                if !landmark_map.is_empty() {
                    let msg = format!(
                        "{file_name}: no landmark entry, using centred-ellipse heuristic"
                    );
                    log::warn!("{msg}");
                    diagnostics.push(msg);
                }
                MaskSpec::Fallback
            }
        };
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&file_name)
            .to_string();
        records.push(FaceRecord { id, source: RecordSource::File(path), mask });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no usable images found in {}",
            dir.display()
        )));
    }
    Ok(LoadOutcome {
        dataset: FaceDataset::new(resolution, split, records),
        diagnostics,
    })
}

/// Load the `root/{train,val,test}` layout; `root/landmarks.txt` is used
/// for every split when present.
pub fn load_dataset_tree(root: &Path, resolution: usize) -> Result<(LoadOutcome, LoadOutcome, LoadOutcome)> {
    let lm = root.join("landmarks.txt");
    let lm = lm.exists().then_some(lm);
    Ok((
        load_dataset(&root.join("train"), lm.as_deref(), resolution, Split::Train)?,
        load_dataset(&root.join("val"), lm.as_deref(), resolution, Split::Val)?,
        load_dataset(&root.join("test"), lm.as_deref(), resolution, Split::Test)?,
    ))
}

fn synthetic_record(root_seed: u64, identity_index: u64, frame: u32, resolution: usize) -> Result<FaceRecord> {
    let params = SyntheticFaceParams::sample(derive_seed_indexed(root_seed, "identity", identity_index));
    params.validate()?;
    let (cy, cx, ry, rx) = params.face_ellipse_px(resolution, frame);
    Ok(FaceRecord {
        id: format!("id{identity_index:05}"),
        source: RecordSource::Synthetic { params, frame },
        mask: MaskSpec::Ellipse { cy, cx, ry, rx },
    })
}

/// `n` synthetic portraits, one identity each, frame 0.
pub fn generate_synthetic_faces(n: usize, resolution: usize, seed: u64) -> Result<FaceDataset> {
    if n == 0 {
        return Err(Error::Parameter("synthetic dataset needs n ≥ 1".into()));
    }
    let records: Result<Vec<_>> = (0..n as u64)
        .map(|i| synthetic_record(seed, i, 0, resolution))
        .collect();
    Ok(FaceDataset::new(resolution, Split::Train, records?))
}

/// `count` jittered frames of a single synthetic identity.
pub fn synthetic_frames(
    identity_index: u64,
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let params = SyntheticFaceParams::sample(derive_seed_indexed(seed, "identity", identity_index));
    (0..count as u32).map(|f| params.render(resolution, f)).collect()
}

/// Disjoint 80/10/10 splits by identity: identity `i` goes to val when
/// `i ≡ 8 (mod 10)`, test when `i ≡ 9`, train otherwise.
pub fn generate_synthetic_splits(
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<(FaceDataset, FaceDataset, FaceDataset)> {
    if n == 0 {
        return Err(Error::Parameter("synthetic dataset needs n ≥ 1".into()));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for i in 0..n as u64 {
        let rec = synthetic_record(seed, i, 0, resolution)?;
        match i % 10 {
            8 => val.push(rec),
            9 => test.push(rec),
            _ => train.push(rec),
        }
    }
    Ok((
        FaceDataset::new(resolution, Split::Train, train),
        FaceDataset::new(resolution, Split::Val, val),
        FaceDataset::new(resolution, Split::Test, test),
    ))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// A serialisable report row that knows its CSV header (needed so an
/// empty report still documents its columns).
pub trait ReportRow: Serialize {
    fn csv_header() -> &'static [&'static str];
}

impl ReportRow for crate::metrics::MetricRecord {
    fn csv_header() -> &'static [&'static str] {
        &["region", "psnr", "ssim", "mae", "identity_sim"]
    }
}

/// Write records atomically as CSV (header always present) or a JSON
/// array. Returns the path written.
pub fn write_report<T: ReportRow>(records: &[T], path: &Path, format: ReportFormat) -> Result<PathBuf> {
    let bytes = match format {
        ReportFormat::Csv => {
            let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            wtr.write_record(T::csv_header())
                .map_err(|e| Error::Data(format!("csv header: {e}")))?;
            for r in records {
                wtr.serialize(r).map_err(|e| Error::Data(format!("csv row: {e}")))?;
            }
            wtr.into_inner().map_err(|e| Error::Data(format!("csv flush: {e}")))?
        }
        ReportFormat::Json => serde_json::to_vec_pretty(records)?,
    };
    atomic_write(path, &bytes)?;
    Ok(path.to_path_buf())
}

/// Read back a CSV report written by [`write_report`].
pub fn read_csv_report<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("csv parse: {e}"))))
        .collect()
}

/// Group scalar values by key and average them (aggregation used for
/// per-identity / per-condition summary columns).
pub fn mean_by_key(pairs: impl IntoIterator<Item = (String, f64)>) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, v) in pairs {
        let e = sums.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
