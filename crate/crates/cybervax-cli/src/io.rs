//! Batch input plumbing shared by the inference commands: input
//! discovery, landmark lookup, output naming, and sidecar records.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cybervax_core::data::ReportRow;
use cybervax_core::masks::{parse_landmark_file, LandmarkSet};
use cybervax_core::pipeline::VerdictRecord;
use cybervax_core::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// A single file, or every image in a directory sorted by file name.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Data(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no images found under {}", input.display())));
    }
    Ok(files)
}

/// Landmarks for each input, in input order. `spec` is either one
/// landmark file (shared by a single input) or a directory searched for
/// `<stem>.txt` per input; inputs without an entry fall back to `None`.
pub fn resolve_landmarks(
    inputs: &[PathBuf],
    spec: Option<&Path>,
) -> Result<Vec<Option<LandmarkSet>>> {
    let Some(spec) = spec else {
        return Ok(vec![None; inputs.len()]);
    };
    if spec.is_file() {
        let table = parse_landmark_file(spec)?;
        return Ok(inputs
            .iter()
            .map(|p| {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                // A single-entry file applies to a single input
                // regardless of naming.
                if table.len() == 1 && inputs.len() == 1 {
                    table.values().next().cloned()
                } else {
                    table.get(stem).cloned()
                }
            })
            .collect());
    }
    if !spec.is_dir() {
        return Err(Error::Data(format!("landmark path {} does not exist", spec.display())));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for p in inputs {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let candidate = spec.join(format!("{stem}.txt"));
        if candidate.is_file() {
            let table = parse_landmark_file(&candidate)?;
            out.push(table.get(stem).cloned().or_else(|| table.values().next().cloned()));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// Deterministic, collision-free output names: the input file name with
/// a `.png` extension, disambiguated with a numeric suffix if two
/// inputs share a stem.
pub fn output_names(inputs: &[PathBuf]) -> Vec<String> {
    let mut taken: BTreeSet<String> = BTreeSet::new();
    inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("frame-{i:04}"));
            let mut name = format!("{stem}.png");
            if taken.contains(&name) {
                name = format!("{stem}-{i:04}.png");
            }
            taken.insert(name.clone());
            name
        })
        .collect()
}

/// Per-input record written next to each output image and aggregated
/// into the batch report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub frame_index: u32,
    pub input: String,
    pub output: Option<String>,
    pub resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Sidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        cybervax_core::util::atomic_write(path, &json)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// One report row per processed input, in input order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRow {
    pub frame_index: u32,
    pub input: String,
    pub output: Option<String>,
    pub ok: bool,
    pub verdict_prob: Option<f64>,
    pub vaccinated: Option<bool>,
    pub error: Option<String>,
}

impl ReportRow for BatchRow {
    fn csv_header() -> &'static [&'static str] {
        &["frame_index", "input", "output", "ok", "verdict_prob", "vaccinated", "error"]
    }
}

impl BatchRow {
    pub fn from_sidecar(s: &Sidecar) -> BatchRow {
        BatchRow {
            frame_index: s.frame_index,
            input: s.input.clone(),
            output: s.output.clone(),
            ok: s.error.is_none(),
            verdict_prob: s.verdict.as_ref().map(|v| v.probability),
            vaccinated: s.verdict.as_ref().map(|v| v.vaccinated),
            error: s.error.clone(),
        }
    }
}
