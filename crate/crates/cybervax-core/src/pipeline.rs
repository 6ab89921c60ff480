//! Inference: vaccinating portraits, neutralising (possibly attacked)
//! portraits, validating the result, and running whole frame sequences.
//!
//! Full frames go through a square crop centred on the face (landmark
//! bounding box grown by 40%), are processed at network resolution, and
//! are pasted back with a feathered seam; pixels outside the crop box are
//! never touched. A frame that is already at network resolution skips the
//! resize entirely, so the blend guarantees stay bit-exact.

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{blend, resize_bilinear, FaceMask, ImageTensor, MaskProvenance};
use crate::masks::{mask_from_landmarks, LandmarkSet};
use crate::models::{ImmuneSystem, Validator};

/// Pixels at or below this intensity (all channels) count as "blacked
/// out" when recovering an attack mask from the image itself.
pub const BLACK_LEVEL: f32 = 0.02;

/// Plausible face-region area bounds for a detected black region, as
/// fractions of the frame.
const DETECT_AREA: (f32, f32) = (0.005, 0.6);

// ---------------------------------------------------------------------------
// Mask handling
// ---------------------------------------------------------------------------

/// Pointwise `image · mask` (exact where the mask is exactly 0 or 1).
pub fn mul_mask(image: &ImageTensor, mask: &FaceMask) -> Result<ImageTensor> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::dimension(
            "mul_mask",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let data = Array3::from_shape_fn(
        (image.height(), image.width(), image.channels()),
        |(y, x, c)| {
            let m = mask.data()[[y, x]];
            if m == 0.0 {
                0.0
            } else if m == 1.0 {
                image.data()[[y, x, c]]
            } else {
                image.data()[[y, x, c]] * m
            }
        },
    );
    ImageTensor::new(data)
}

/// Find the face region of a possibly attacked image. A contiguous-enough
/// blacked-out region of plausible size is taken verbatim (this is what a
/// masking attack leaves behind); otherwise the centred-ellipse heuristic
/// applies.
pub fn detect_mask(image: &ImageTensor) -> Result<FaceMask> {
    let (h, w) = (image.height(), image.width());
    let mut black = ndarray::Array2::<f32>::zeros((h, w));
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let dark = (0..image.channels()).all(|c| image.data()[[y, x, c]] <= BLACK_LEVEL);
            if dark {
                black[[y, x]] = 1.0;
                count += 1;
            }
        }
    }
    let frac = count as f32 / (h * w) as f32;
    if frac >= DETECT_AREA.0 && frac <= DETECT_AREA.1 {
        return FaceMask::new(black, MaskProvenance::External);
    }
    let (cy, cx, ry, rx) = crate::data::fallback_ellipse(h.min(w));
    crate::masks::ellipse_mask(h, w, cy, cx, ry, rx)
}

// ---------------------------------------------------------------------------
// Portrait records (crop → resize → mask)
// ---------------------------------------------------------------------------

/// Square crop window in original-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> CropBox {
        let side = h.min(w);
        CropBox { y0: (h - side) / 2, x0: (w - side) / 2, side }
    }

    pub fn contains_frame(&self, h: usize, w: usize) -> bool {
        self.y0 == 0 && self.x0 == 0 && self.side == h && self.side == w
    }
}

/// A face crop ready for the networks, with enough context to paste the
/// processed crop back into its source frame.
#[derive(Debug, Clone)]
pub struct PortraitRecord {
    pub source: Option<PathBuf>,
    pub frame_index: u32,
    /// The untouched source frame.
    pub original: ImageTensor,
    pub crop: CropBox,
    /// The crop resized to network resolution.
    pub image: ImageTensor,
    /// Face mask in resized-crop coordinates.
    pub mask: FaceMask,
    pub landmarks: Option<LandmarkSet>,
}

impl PortraitRecord {
    /// Build a record from a frame. With landmarks, the crop is the
    /// landmark bounding box expanded by 40% (clamped to the frame);
    /// without, the centred square with the ellipse heuristic.
    pub fn prepare(
        frame: &ImageTensor,
        landmarks: Option<&LandmarkSet>,
        resolution: usize,
        frame_index: u32,
        source: Option<PathBuf>,
    ) -> Result<PortraitRecord> {
        let (h, w) = (frame.height(), frame.width());
        if h < 8 || w < 8 {
            return Err(Error::Data(format!("frame {w}x{h} too small to process")));
        }
        let crop = match landmarks {
            Some(lm) => {
                let xs = lm.points().iter().map(|p| p.0);
                let ys = lm.points().iter().map(|p| p.1);
                let (min_x, max_x) = (xs.clone().fold(f32::MAX, f32::min), xs.fold(f32::MIN, f32::max));
                let (min_y, max_y) = (ys.clone().fold(f32::MAX, f32::min), ys.fold(f32::MIN, f32::max));
                let side = 1.4 * (max_x - min_x).max(max_y - min_y);
                let side = (side.round() as usize).clamp(8, h.min(w));
                let cy = (min_y + max_y) / 2.0;
                let cx = (min_x + max_x) / 2.0;
                let y0 = ((cy - side as f32 / 2.0).round() as isize).clamp(0, (h - side) as isize) as usize;
                let x0 = ((cx - side as f32 / 2.0).round() as isize).clamp(0, (w - side) as isize) as usize;
                CropBox { y0, x0, side }
            }
            None => CropBox::full(h, w),
        };

        let cropped = if crop.contains_frame(h, w) {
            frame.clone()
        } else {
            let data = Array3::from_shape_fn((crop.side, crop.side, frame.channels()), |(y, x, c)| {
                frame.data()[[crop.y0 + y, crop.x0 + x, c]]
            });
            ImageTensor::new(data)?
        };
        let image = resize_bilinear(&cropped, resolution, resolution);

        let mask = match landmarks {
            Some(lm) => {
                let s = resolution as f32 / crop.side as f32;
                let pts: Vec<(f32, f32)> = lm
                    .points()
                    .iter()
                    .map(|&(x, y)| ((x - crop.x0 as f32) * s, (y - crop.y0 as f32) * s))
                    .collect();
                let set = LandmarkSet::new(pts)?;
                mask_from_landmarks(
                    &set,
                    resolution,
                    resolution,
                    crate::data::LANDMARK_SOFTEN.0,
                    crate::data::LANDMARK_SOFTEN.1,
                )?
            }
            None => {
                let (cy, cx, ry, rx) = crate::data::fallback_ellipse(resolution);
                crate::masks::ellipse_mask(resolution, resolution, cy, cx, ry, rx)?
            }
        };

        Ok(PortraitRecord {
            source,
            frame_index,
            original: frame.clone(),
            crop,
            image,
            mask,
            landmarks: landmarks.cloned(),
        })
    }

    /// True when no resize/paste is involved (frame already at network
    /// resolution), so blend guarantees hold bitwise end to end.
    pub fn is_identity_crop(&self) -> bool {
        self.crop.contains_frame(self.original.height(), self.original.width())
            && self.crop.side == self.image.height()
    }
}

/// Paste a processed resolution-space crop back into the source frame
/// with a feathered seam. Pixels outside the crop box are untouched.
fn paste_back(record: &PortraitRecord, patch: &ImageTensor) -> Result<ImageTensor> {
    if record.is_identity_crop() {
        return Ok(patch.clone());
    }
    let side = record.crop.side;
    let up = resize_bilinear(patch, side, side);
    let feather = (side / 16).max(2) as f32;
    let ramp = |i: usize| (((i.min(side - 1 - i)) as f32 + 1.0) / (feather + 1.0)).min(1.0);
    let channels = record.original.channels();
    let mut out = record.original.data().clone();
    for y in 0..side {
        for x in 0..side {
            let f = ramp(y) * ramp(x);
            for ch in 0..channels {
                let oy = record.crop.y0 + y;
                let ox = record.crop.x0 + x;
                let base = out[[oy, ox, ch]];
                out[[oy, ox, ch]] = f * up.data()[[y, x, ch]] + (1.0 - f) * base;
            }
        }
    }
    ImageTensor::new(out)
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// Vaccinate at network resolution: original face kept, recovery payload
/// written into the non-face region.
pub fn vaccinate_crop(
    sys: &ImmuneSystem,
    image: &ImageTensor,
    mask: &FaceMask,
) -> Result<ImageTensor> {
    let raw = sys.forward_vaccinator(image, mask)?;
    // x• = x∘·m + raw·m̄
    blend(image, &raw, mask)
}

/// Vaccinate a full frame and paste the crop back into it.
pub fn vaccinate(sys: &ImmuneSystem, record: &PortraitRecord) -> Result<ImageTensor> {
    let crop = vaccinate_crop(sys, &record.image, &record.mask)?;
    paste_back(record, &crop)
}

/// Neutralise a resolution-space portrait. The face mask is detected from
/// the image itself when not supplied. The non-face region passes through
/// untouched.
pub fn neutralise(
    sys: &ImmuneSystem,
    image: &ImageTensor,
    mask: Option<&FaceMask>,
) -> Result<ImageTensor> {
    let detected;
    let mask = match mask {
        Some(m) => m,
        None => {
            detected = detect_mask(image)?;
            &detected
        }
    };
    let masked = mul_mask(image, &mask.complement())?;
    let raw = sys.forward_neutraliser(&masked, mask)?;
    // y = raw·m + x·m̄
    blend(&raw, image, mask)
}

/// Neutralise a full frame through its portrait record.
pub fn neutralise_record(sys: &ImmuneSystem, record: &PortraitRecord) -> Result<ImageTensor> {
    // Recover the attack mask from the crop when possible; fall back to
    // the record's own mask if detection finds nothing plausible.
    let detected = detect_mask(&record.image)?;
    let mask = if detected.provenance() == MaskProvenance::External {
        detected
    } else {
        record.mask.clone()
    };
    let crop = neutralise(sys, &record.image, Some(&mask))?;
    paste_back(record, &crop)
}

/// One validated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub frame_index: u32,
    pub vaccinated: bool,
    pub probability: f64,
    /// Where the neutralised frame was written, if anywhere.
    pub output: Option<String>,
}

impl crate::data::ReportRow for VerdictRecord {
    fn csv_header() -> &'static [&'static str] {
        &["frame_index", "vaccinated", "probability", "output"]
    }
}

/// Classify a neutralised portrait. The verdict is the probability
/// thresholded at `threshold` (0.5 by default elsewhere).
pub fn validate_with_threshold(
    validator: &Validator,
    neutralised: &ImageTensor,
    threshold: f64,
) -> Result<VerdictRecord> {
    let probability = validator.forward(neutralised)? as f64;
    Ok(VerdictRecord {
        frame_index: 0,
        vaccinated: probability >= threshold,
        probability,
        output: None,
    })
}

pub fn validate(validator: &Validator, neutralised: &ImageTensor) -> Result<VerdictRecord> {
    validate_with_threshold(validator, neutralised, 0.5)
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Vaccinate,
    Neutralise,
    /// Neutralise, then validate each frame.
    Full,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vaccinate" => Ok(PipelineMode::Vaccinate),
            "neutralise" => Ok(PipelineMode::Neutralise),
            "full" => Ok(PipelineMode::Full),
            other => Err(Error::Parameter(format!("unknown pipeline mode {other:?}"))),
        }
    }
}

/// Outcome for one frame of a sequence. `error` is set when the frame was
/// skipped or passed through unmodified.
#[derive(Debug)]
pub struct FrameOutcome {
    pub frame_index: u32,
    pub output: Option<ImageTensor>,
    pub verdict: Option<VerdictRecord>,
    pub error: Option<String>,
}

/// Apply the pipeline to an ordered frame stream. Frame failures are
/// flagged per frame; the stream never aborts. Output order equals input
/// order.
pub fn process_sequence<I>(
    sys: &ImmuneSystem,
    validator: Option<&Validator>,
    frames: I,
    landmarks: &[Option<LandmarkSet>],
    mode: PipelineMode,
    resolution: usize,
) -> Vec<FrameOutcome>
where
    I: IntoIterator<Item = Result<ImageTensor>>,
{
    let mut outcomes = Vec::new();
    for (i, frame) in frames.into_iter().enumerate() {
        let idx = i as u32;
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                let msg = format!("frame {idx}: {e}");
                log::warn!("{msg}");
                outcomes.push(FrameOutcome {
                    frame_index: idx,
                    output: None,
                    verdict: None,
                    error: Some(msg),
                });
                continue;
            }
        };
        let lm = landmarks.get(i).and_then(|l| l.as_ref());
        let outcome = process_frame(sys, validator, &frame, lm, mode, resolution, idx);
        outcomes.push(match outcome {
            Ok(o) => o,
            Err(e) => {
                let msg = format!("frame {idx}: {e}");
                log::warn!("{msg}");
                FrameOutcome {
                    frame_index: idx,
                    // Pass the frame through unmodified, flagged.
                    output: Some(frame),
                    verdict: None,
                    error: Some(msg),
                }
            }
        });
    }
    outcomes
}

fn process_frame(
    sys: &ImmuneSystem,
    validator: Option<&Validator>,
    frame: &ImageTensor,
    landmarks: Option<&LandmarkSet>,
    mode: PipelineMode,
    resolution: usize,
    frame_index: u32,
) -> Result<FrameOutcome> {
    let record = PortraitRecord::prepare(frame, landmarks, resolution, frame_index, None)?;
    match mode {
        PipelineMode::Vaccinate => Ok(FrameOutcome {
            frame_index,
            output: Some(vaccinate(sys, &record)?),
            verdict: None,
            error: None,
        }),
        PipelineMode::Neutralise => Ok(FrameOutcome {
            frame_index,
            output: Some(neutralise_record(sys, &record)?),
            verdict: None,
            error: None,
        }),
        PipelineMode::Full => {
            let detected = detect_mask(&record.image)?;
            let mask = if detected.provenance() == MaskProvenance::External {
                detected
            } else {
                record.mask.clone()
            };
            let crop = neutralise(sys, &record.image, Some(&mask))?;
            let verdict = match validator {
                Some(v) => {
                    let mut verdict = validate(v, &crop)?;
                    verdict.frame_index = frame_index;
                    Some(verdict)
                }
                None => None,
            };
            let record2 = record.clone();
            Ok(FrameOutcome {
                frame_index,
                output: Some(paste_back(&record2, &crop)?),
                verdict,
                error: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_faces;
    use crate::models::{ImmuneConfig, ValidatorConfig};
    use ndarray::Array3;

    fn toy_system() -> ImmuneSystem {
        ImmuneSystem::new(ImmuneConfig::toy(), 5).unwrap()
    }

    fn toy_face(seed: u64) -> (ImageTensor, FaceMask) {
        let ds = generate_synthetic_faces(1, 16, seed).unwrap();
        ds.sample(0).unwrap()
    }

    #[test]
    fn mul_mask_exact_at_binary_values() {
        let (img, mask) = toy_face(1);
        let bin = mask.binarise(0.5);
        let out = mul_mask(&img, &bin).unwrap();
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if bin.data()[[y, x]] == 1.0 {
                assert_eq!(v, img.data()[[y, x, c]]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn detect_mask_recovers_attacked_region() {
        let (img, mask) = toy_face(2);
        let attacked = crate::attacks::mask_attack(&img, &mask).unwrap();
        let found = detect_mask(&attacked).unwrap();
        assert_eq!(found.provenance(), MaskProvenance::External);
        // The black region is at least the attacked face (synthetic
        // portraits keep other pixels above the black level).
        let bin = mask.binarise(0.5);
        for ((y, x), &m) in bin.data().indexed_iter() {
            if m == 1.0 {
                assert_eq!(found.data()[[y, x]], 1.0);
            }
        }

        // No plausible black region → heuristic ellipse.
        let fallback = detect_mask(&img).unwrap();
        assert_eq!(fallback.provenance(), MaskProvenance::Ellipse);
    }

    #[test]
    fn vaccinate_preserves_face_interior_bitwise() {
        let sys = toy_system();
        let (img, mask) = toy_face(3);
        let record = PortraitRecord {
            source: None,
            frame_index: 0,
            original: img.clone(),
            crop: CropBox::full(16, 16),
            image: img.clone(),
            mask: mask.clone(),
            landmarks: None,
        };
        assert!(record.is_identity_crop());
        let out = vaccinate(&sys, &record).unwrap();
        assert_eq!(out.height(), 16);
        let mut interior = 0;
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if mask.data()[[y, x]] == 1.0 {
                assert_eq!(v, img.data()[[y, x, c]]);
                interior += 1;
            }
        }
        assert!(interior > 0);
        // Deterministic.
        let again = vaccinate(&sys, &record).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn neutralise_leaves_nonface_untouched() {
        let sys = toy_system();
        let (img, mask) = toy_face(4);
        let out = neutralise(&sys, &img, Some(&mask)).unwrap();
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if mask.data()[[y, x]] == 0.0 {
                assert_eq!(v, img.data()[[y, x, c]]);
            }
        }
    }

    #[test]
    fn crop_and_paste_back_with_landmarks() {
        // A 48×40 frame with a face by landmarks; crop must stay in
        // bounds, and paste-back must leave pixels outside the crop
        // bit-identical.
        let frame = ImageTensor::new(Array3::from_shape_fn((48, 40, 3), |(y, x, c)| {
            0.15 + 0.6 * ((y * 40 + x) as f32 / 1920.0) + 0.05 * c as f32
        }))
        .unwrap();
        let lm = LandmarkSet::new(vec![(14.0, 18.0), (26.0, 18.0), (20.0, 30.0), (15.0, 26.0), (25.0, 26.0)])
            .unwrap();
        let record = PortraitRecord::prepare(&frame, Some(&lm), 16, 0, None).unwrap();
        assert!(record.crop.y0 + record.crop.side <= 48);
        assert!(record.crop.x0 + record.crop.side <= 40);
        assert!(!record.is_identity_crop());
        assert_eq!(record.image.height(), 16);
        assert!(record.mask.has_unit_plateau());

        let sys = toy_system();
        let out = vaccinate(&sys, &record).unwrap();
        assert_eq!(out.height(), 48);
        assert_eq!(out.width(), 40);
        let inside = |y: usize, x: usize| {
            y >= record.crop.y0
                && y < record.crop.y0 + record.crop.side
                && x >= record.crop.x0
                && x < record.crop.x0 + record.crop.side
        };
        for ((y, x, c), &v) in out.data().indexed_iter() {
            if !inside(y, x) {
                assert_eq!(v, frame.data()[[y, x, c]], "pixel ({y},{x},{c}) outside crop changed");
            }
        }
    }

    #[test]
    fn verdict_matches_threshold() {
        let v = Validator::new(ValidatorConfig::small_cnn(16), 2).unwrap();
        let (img, _) = toy_face(6);
        let verdict = validate(&v, &img).unwrap();
        assert!((0.0..=1.0).contains(&verdict.probability));
        assert_eq!(verdict.vaccinated, verdict.probability >= 0.5);
    }

    #[test]
    fn process_sequence_flags_failures_and_keeps_order() {
        let sys = toy_system();
        let frames: Vec<Result<ImageTensor>> = vec![
            Ok(toy_face(7).0),
            Err(Error::Data("decode failed".into())),
            Ok(toy_face(8).0),
        ];
        let out = process_sequence(&sys, None, frames, &[], PipelineMode::Vaccinate, 16);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].frame_index, 0);
        assert!(out[0].output.is_some() && out[0].error.is_none());
        assert!(out[1].output.is_none() && out[1].error.is_some());
        assert!(out[2].output.is_some());

        let empty = process_sequence(
            &sys,
            None,
            Vec::<Result<ImageTensor>>::new(),
            &[],
            PipelineMode::Full,
            16,
        );
        assert!(empty.is_empty());
    }

    #[test]
    fn full_mode_attaches_verdicts() {
        let sys = toy_system();
        let v = Validator::new(ValidatorConfig::mlp(16), 3).unwrap();
        let frames: Vec<Result<ImageTensor>> = vec![Ok(toy_face(9).0), Ok(toy_face(10).0)];
        let out = process_sequence(&sys, Some(&v), frames, &[], PipelineMode::Full, 16);
        assert_eq!(out.len(), 2);
        for (i, o) in out.iter().enumerate() {
            assert_eq!(o.frame_index, i as u32);
            let verdict = o.verdict.as_ref().expect("verdict in full mode");
            assert_eq!(verdict.frame_index, i as u32);
            assert!((0.0..=1.0).contains(&verdict.probability));
        }
    }
}
