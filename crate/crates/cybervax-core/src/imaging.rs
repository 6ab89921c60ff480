//! Image and mask value types plus the blending arithmetic every stage of
//! the pipeline is built on.
//!
//! Images are `H×W×C` f32 arrays with values in `[0, 1]`; 8-bit integers
//! exist only at file I/O boundaries. Face masks are `H×W` maps in `[0, 1]`,
//! `1` inside the face contour, with soft edges for seamless blending.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantisation grid for mask values. On the dyadic grid `k/65536` the
/// operation `1 - x` is exact in f32, which makes `complement` an exact
/// involution and `mask + complement == 1` hold bitwise.
const MASK_GRID: f32 = 65536.0;

/// An `H×W×C` image with channel values in `[0, 1]`. `C` is 3 for RGB
/// content and 1 for single-channel maps routed through image code.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wrap an array whose values are already within `[0, 1]`.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let c = data.shape()[2];
        if c != 1 && c != 3 {
            return Err(Error::dimension("ImageTensor channels", "1 or 3", c.to_string()));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!(
                    "image value {v} outside [0,1]; use clamp_unit for raw network output"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn constant(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Snap every value to the 8-bit grid `round(v·255)/255`. This is what a
    /// PNG round trip does to the pixel values; evaluation of deployed
    /// outputs measures after this step.
    pub fn quantise_8bit(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| (v * 255.0).round() / 255.0),
        }
    }

    fn check_same_shape(&self, other: &ImageTensor, context: &str) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::dimension(
                context,
                format!("{:?}", self.data.shape()),
                format!("{:?}", other.data.shape()),
            ));
        }
        Ok(())
    }
}

/// Clamp a raw real-valued array into `[0, 1]` and wrap it as an image.
/// Total on all inputs: NaN maps to 0, `+inf` to 1, `-inf` to 0.
pub fn clamp_unit(data: Array3<f32>) -> ImageTensor {
    ImageTensor {
        data: data.mapv(|v| {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        }),
    }
}

/// Per-pixel convex blend: `out = mask·raw + (1−mask)·base`, broadcast over
/// channels. `mask ≡ 1` returns `raw` bit-exactly and `mask ≡ 0` returns
/// `base` bit-exactly.
pub fn blend(raw: &ImageTensor, base: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
    raw.check_same_shape(base, "blend raw/base")?;
    if mask.height() != raw.height() || mask.width() != raw.width() {
        return Err(Error::dimension(
            "blend mask",
            format!("{}x{}", raw.height(), raw.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let mut out = raw.data.clone();
    for c in 0..raw.channels() {
        let mut plane = out.index_axis_mut(ndarray::Axis(2), c);
        Zip::from(&mut plane)
            .and(base.data.index_axis(ndarray::Axis(2), c))
            .and(mask.data())
            .for_each(|o, &b, &m| {
                *o = (m * *o + (1.0 - m) * b).clamp(0.0, 1.0);
            });
    }
    Ok(ImageTensor { data: out })
}

/// Where the mask came from; downstream code treats all provenances alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskProvenance {
    Landmark,
    Ellipse,
    External,
}

/// `H×W` face-region map in `[0, 1]`; `1` inside the face contour. Values
/// are quantised to a dyadic grid so complement arithmetic is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    data: Array2<f32>,
    provenance: MaskProvenance,
}

impl FaceMask {
    pub fn new(data: Array2<f32>, provenance: MaskProvenance) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Mask(format!("mask value {v} outside [0,1]")));
            }
        }
        // v·65536 and the final division are exact (power-of-two scaling),
        // so the only rounding is the round() itself.
        let data = data.mapv(|v| (v * MASK_GRID).round() / MASK_GRID);
        Ok(Self { data, provenance })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    /// `1 − data`. Exact on the quantisation grid: applying it twice gives
    /// back the original bitwise, and `mask + complement == 1` everywhere.
    pub fn complement(&self) -> FaceMask {
        FaceMask {
            data: self.data.mapv(|v| 1.0 - v),
            provenance: self.provenance,
        }
    }

    /// Binary mask: 1 where `data >= threshold`, else 0.
    pub fn binarise(&self, threshold: f32) -> FaceMask {
        FaceMask {
            data: self.data.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            provenance: self.provenance,
        }
    }

    /// True if the mask is all zeros.
    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// True if some pixel holds an exact 1.0 (the interior plateau).
    pub fn has_unit_plateau(&self) -> bool {
        self.data.iter().any(|&v| v == 1.0)
    }

    /// Number of pixels at or above `threshold`.
    pub fn area(&self, threshold: f32) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of pixels at or above
    /// `threshold`, or `None` for an empty mask.
    pub fn bounding_box(&self, threshold: f32) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &v) in self.data.indexed_iter() {
            if v >= threshold {
                bb = Some(match bb {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        bb
    }

    /// Intersection-over-union of the binarised masks at threshold 0.5.
    pub fn iou(&self, other: &FaceMask) -> f32 {
        let mut inter = 0usize;
        let mut union = 0usize;
        Zip::from(&self.data).and(&other.data).for_each(|&a, &b| {
            let a = a >= 0.5;
            let b = b >= 0.5;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        });
        if union == 0 {
            1.0
        } else {
            inter as f32 / union as f32
        }
    }
}

/// Gaussian-soften a binary mask for smooth blending.
///
/// Separable blur with replicate edges; each 1-D pass renormalises by the
/// kernel sum so that an all-ones window yields exactly 1.0. Interior points
/// farther than `kernel_radius` (Chebyshev) from the zero set therefore stay
/// exactly 1, and constant masks pass through unchanged.
pub fn soften_mask(binary: &FaceMask, kernel_radius: usize, sigma: f32) -> Result<FaceMask> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!("soften_mask sigma must be > 0, got {sigma}")));
    }
    for &v in binary.data.iter() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Mask(format!("soften_mask expects a binary mask, found value {v}")));
        }
    }
    let taps: Vec<f32> = (-(kernel_radius as isize)..=kernel_radius as isize)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = taps.iter().sum();

    let (h, w) = (binary.height(), binary.width());
    let src = binary.data();
    let mut pass1 = Array2::<f32>::zeros((h, w));
    let r = kernel_radius as isize;
    // Vertical pass.
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &t) in taps.iter().enumerate() {
                let yy = (y + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += t * src[[yy, x]];
            }
            pass1[[y as usize, x]] = acc / norm;
        }
    }
    // Horizontal pass.
    let mut pass2 = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for (k, &t) in taps.iter().enumerate() {
                let xx = (x + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * pass1[[y, xx]];
            }
            pass2[[y, x as usize]] = (acc / norm).clamp(0.0, 1.0);
        }
    }
    FaceMask::new(pass2, binary.provenance)
}

/// Bilinear resize (half-pixel centers). Equal sizes return a copy so the
/// common crop-equals-frame path stays bit-exact.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if out_h == h && out_w == w {
        return img.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let v00 = img.data[[y0, x0, ch]];
                let v01 = img.data[[y0, x1, ch]];
                let v10 = img.data[[y1, x0, ch]];
                let v11 = img.data[[y1, x1, ch]];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[[oy, ox, ch]] = (top + (bot - top) * wy).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor { data: out }
}
