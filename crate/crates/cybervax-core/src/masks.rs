//! Face-region geometry: landmark sets, convex-hull mask rasterisation,
//! ellipse masks for synthetic data, and the random affine jitter applied
//! to masks during training.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{soften_mask, FaceMask, MaskProvenance};

/// Facial landmark points in pixel coordinates (x right, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f32, f32)>,
}

impl LandmarkSet {
    /// At least three finite points are required.
    pub fn new(points: Vec<(f32, f32)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Mask(format!(
                "landmark set needs at least 3 points, got {}",
                points.len()
            )));
        }
        for &(x, y) in &points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Mask(format!("non-finite landmark ({x}, {y})")));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f32, f32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Andrew's monotone-chain convex hull, counter-clockwise in image
/// coordinates. Returns fewer than 3 points for degenerate inputs.
fn convex_hull(points: &[(f32, f32)]) -> Vec<(f32, f32)> {
    let mut pts: Vec<(f32, f32)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f32, f32), a: (f32, f32), b: (f32, f32)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f32, f32)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f32, f32)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Scanline-fill a convex polygon into a binary `h×w` map. A pixel is set
/// when its integer-coordinate center lies inside or on the hull.
fn fill_convex(hull: &[(f32, f32)], h: usize, w: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((h, w));
    if hull.len() < 3 {
        return out;
    }
    let y_min = hull.iter().map(|p| p.1).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let y_max = hull.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max).ceil().min((h - 1) as f32) as usize;
    for y in y_min..=y_max {
        let yf = y as f32;
        let mut x_lo = f32::INFINITY;
        let mut x_hi = f32::NEG_INFINITY;
        let n = hull.len();
        for i in 0..n {
            let (x0, y0) = hull[i];
            let (x1, y1) = hull[(i + 1) % n];
            if (y0 - yf) * (y1 - yf) > 0.0 {
                continue; // edge does not cross this scanline
            }
            if (y1 - y0).abs() < f32::EPSILON {
                if (y0 - yf).abs() < f32::EPSILON {
                    x_lo = x_lo.min(x0.min(x1));
                    x_hi = x_hi.max(x0.max(x1));
                }
                continue;
            }
            let t = (yf - y0) / (y1 - y0);
            if (0.0..=1.0).contains(&t) {
                let x = x0 + t * (x1 - x0);
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
        if x_lo <= x_hi {
            let a = x_lo.ceil().max(0.0) as usize;
            let b = x_hi.floor().min((w - 1) as f32);
            if b >= 0.0 {
                for x in a..=b as usize {
                    out[[y, x]] = 1.0;
                }
            }
        }
    }
    out
}

/// Rasterise the convex hull of the landmarks and soften its edge.
///
/// Landmarks may extend past the image; the filled region is clipped. A
/// degenerate (collinear) landmark set is an error, as is a hull that
/// covers no pixel at all.
pub fn mask_from_landmarks(
    landmarks: &LandmarkSet,
    height: usize,
    width: usize,
    soften_radius: usize,
    sigma: f32,
) -> Result<FaceMask> {
    if height == 0 || width == 0 {
        return Err(Error::dimension("mask_from_landmarks", "non-zero H and W", format!("{height}x{width}")));
    }
    let hull = convex_hull(landmarks.points());
    if hull.len() < 3 {
        return Err(Error::Mask(
            "landmark set is degenerate (collinear points form no area)".into(),
        ));
    }
    let filled = fill_convex(&hull, height, width);
    if filled.iter().all(|&v| v == 0.0) {
        return Err(Error::Mask("landmark hull covers no pixels inside the image".into()));
    }
    let binary = FaceMask::new(filled, MaskProvenance::Landmark)?;
    soften_mask(&binary, soften_radius, sigma)
}

/// Axis-aligned filled ellipse; pixel centers at integer coordinates.
/// Used both by the synthetic face generator and as its ground-truth mask,
/// so the two agree by construction.
pub fn ellipse_mask(
    height: usize,
    width: usize,
    center_y: f32,
    center_x: f32,
    radius_y: f32,
    radius_x: f32,
) -> Result<FaceMask> {
    if radius_y <= 0.0 || radius_x <= 0.0 {
        return Err(Error::Mask(format!("ellipse radii must be positive, got ({radius_y}, {radius_x})")));
    }
    let mut data = Array2::<f32>::zeros((height, width));
    for ((y, x), v) in data.indexed_iter_mut() {
        let dy = (y as f32 - center_y) / radius_y;
        let dx = (x as f32 - center_x) / radius_x;
        if dy * dy + dx * dx <= 1.0 {
            *v = 1.0;
        }
    }
    FaceMask::new(data, MaskProvenance::Ellipse)
}

/// Rigid-plus-scale jitter applied to a mask: rotation about the image
/// center, fractional translation, isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotate_deg: f32,
    /// (dy, dx) as fractions of image height and width.
    pub translate_frac: (f32, f32),
    pub scale: f32,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotate_deg: 0.0,
        translate_frac: (0.0, 0.0),
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::Parameter(format!("affine scale must be > 0, got {}", self.scale)));
        }
        if !self.rotate_deg.is_finite()
            || !self.translate_frac.0.is_finite()
            || !self.translate_frac.1.is_finite()
        {
            return Err(Error::Parameter("affine parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Sampling ranges for [`sample_affine`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub rotate_deg: (f32, f32),
    pub translate_frac: (f32, f32),
    pub scale: (f32, f32),
}

impl Default for AffineRanges {
    /// Training-time jitter: rotation up to 5 degrees, translation up to 3%
    /// of the frame, scale within 3%.
    fn default() -> Self {
        AffineRanges {
            rotate_deg: (-5.0, 5.0),
            translate_frac: (-0.03, 0.03),
            scale: (0.97, 1.03),
        }
    }
}

/// Draw affine parameters uniformly from the given ranges.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, ranges: &AffineRanges) -> AffineParams {
    let uniform = |rng: &mut R, (lo, hi): (f32, f32)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    AffineParams {
        rotate_deg: uniform(rng, ranges.rotate_deg),
        translate_frac: (uniform(rng, ranges.translate_frac), uniform(rng, ranges.translate_frac)),
        scale: uniform(rng, ranges.scale),
    }
}

/// Warp a mask by the affine transform (inverse-mapped bilinear sampling,
/// zero outside the frame). The identity transform returns the input
/// bit-exactly.
pub fn apply_affine_to_mask(mask: &FaceMask, params: &AffineParams) -> Result<FaceMask> {
    params.validate()?;
    if *params == AffineParams::IDENTITY {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.height(), mask.width());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let ty = params.translate_frac.0 * h as f32;
    let tx = params.translate_frac.1 * w as f32;
    let theta = params.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / params.scale;
    let src = mask.data();
    let mut out = Array2::<f32>::zeros((h, w));
    for ((y, x), v) in out.indexed_iter_mut() {
        // Forward: q = R·s·(p − c) + c + t.  Inverse: p = R⁻¹·(q − c − t)/s + c.
        let qy = y as f32 - cy - ty;
        let qx = x as f32 - cx - tx;
        let py = (-sin * qx + cos * qy) * inv_scale + cy;
        let px = (cos * qx + sin * qy) * inv_scale + cx;
        *v = bilinear_zero(src, py, px);
    }
    FaceMask::new(out, mask.provenance())
}

/// Bilinear sample with zero padding outside the array.
fn bilinear_zero(src: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = (src.shape()[0] as isize, src.shape()[1] as isize);
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let wy = y - y0 as f32;
    let wx = x - x0 as f32;
    let at = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            src[[yy as usize, xx as usize]]
        }
    };
    let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
    let bot = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
    (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0)
}

/// One line of a landmark annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRecord {
    pub filename: String,
    pub landmarks: LandmarkSet,
}

/// Parse landmark annotations, one image per line:
///
/// ```text
/// face_0001.png 21.5,30 42,29.5 31,45
/// ```
///
/// Blank lines are skipped. Returns records keyed by filename in sorted
/// order; duplicate filenames and malformed lines are errors that name the
/// offending line number.
pub fn parse_landmark_text(text: &str) -> Result<BTreeMap<String, LandmarkSet>> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let filename = tokens.next().unwrap().to_string();
        let mut points = Vec::new();
        for tok in tokens {
            let (xs, ys) = tok.split_once(',').ok_or_else(|| {
                Error::Data(format!("landmarks line {lineno}: expected x,y pair, got {tok:?}"))
            })?;
            let x: f32 = xs.parse().map_err(|_| {
                Error::Data(format!("landmarks line {lineno}: bad x coordinate {xs:?}"))
            })?;
            let y: f32 = ys.parse().map_err(|_| {
                Error::Data(format!("landmarks line {lineno}: bad y coordinate {ys:?}"))
            })?;
            points.push((x, y));
        }
        let set = LandmarkSet::new(points)
            .map_err(|e| Error::Data(format!("landmarks line {lineno}: {e}")))?;
        if out.insert(filename.clone(), set).is_some() {
            return Err(Error::Data(format!(
                "landmarks line {lineno}: duplicate entry for {filename:?}"
            )));
        }
    }
    Ok(out)
}

/// [`parse_landmark_text`] applied to a file on disk.
pub fn parse_landmark_file(path: &Path) -> Result<BTreeMap<String, LandmarkSet>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read landmark file {}: {e}", path.display())))?;
    parse_landmark_text(&text)
}
