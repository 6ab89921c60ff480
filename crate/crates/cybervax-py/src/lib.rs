//! Python bindings for the cybervax immune system.
//!
//! Exposes the deployment surface — vaccinate, neutralise, validate,
//! mask attacks, the image metrics, synthetic data, and the full CLI via
//! `run()` — over numpy `float32` arrays. Images are `(H, W, 3)` in
//! `[0, 1]`; face masks are `(H, W)` with 1 on the face.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cybervax_core::error::Error as CoreError;
use cybervax_core::imaging::{FaceMask, ImageTensor, MaskProvenance};
use cybervax_core::{attacks, data, metrics, pipeline};

fn to_py(err: CoreError) -> PyErr {
    match &err {
        CoreError::Parameter(_)
        | CoreError::Dimension { .. }
        | CoreError::Mask(_)
        | CoreError::Metric(_) => PyValueError::new_err(err.to_string()),
        CoreError::Data(_) | CoreError::Checkpoint(_) | CoreError::Io(_) | CoreError::Image(_) => {
            PyIOError::new_err(err.to_string())
        }
        CoreError::Train(_) | CoreError::Serde(_) => PyRuntimeError::new_err(err.to_string()),
    }
}

fn image_from(array: &PyReadonlyArray3<'_, f32>) -> PyResult<ImageTensor> {
    ImageTensor::new(array.as_array().to_owned()).map_err(to_py)
}

fn mask_from(array: &PyReadonlyArray2<'_, f32>) -> PyResult<FaceMask> {
    FaceMask::new(array.as_array().to_owned(), MaskProvenance::External).map_err(to_py)
}

fn prepare(frame: &ImageTensor, resolution: usize) -> PyResult<pipeline::PortraitRecord> {
    pipeline::PortraitRecord::prepare(frame, None, resolution, 0, None).map_err(to_py)
}

/// The vaccinator/neutraliser pair behind `vaccinate(1)`, `neutralise(1)`,
/// and their crop-level variants. Loaded from an `immune.ckpt` archive
/// written by training.
#[pyclass(module = "cybervax")]
struct ImmuneSystem {
    inner: cybervax_core::models::ImmuneSystem,
}

#[pymethods]
impl ImmuneSystem {
    /// Load a trained system from a checkpoint archive.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _meta) = cybervax_core::models::ImmuneSystem::load(&path).map_err(to_py)?;
        Ok(ImmuneSystem { inner })
    }

    /// Training step the checkpoint was saved at.
    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    /// Portrait crop resolution the networks operate at.
    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config().vaccinator.resolution
    }

    /// Vaccinate a full frame: crop the face region, embed the recovery
    /// payload outside the face, and paste the crop back. Returns a frame
    /// of the same shape as the input.
    fn vaccinate<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let frame = image_from(&image)?;
        let record = prepare(&frame, self.resolution())?;
        let out = pipeline::vaccinate(&self.inner, &record).map_err(to_py)?;
        Ok(out.into_data().into_pyarray(py))
    }

    /// Neutralise a full frame: detect the attacked face region, recover
    /// the face from the payload, and paste the crop back.
    fn neutralise<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let frame = image_from(&image)?;
        let record = prepare(&frame, self.resolution())?;
        let out = pipeline::neutralise_record(&self.inner, &record).map_err(to_py)?;
        Ok(out.into_data().into_pyarray(py))
    }

    /// Vaccinate a resolution-sized crop against an explicit face mask.
    fn vaccinate_crop<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
        mask: PyReadonlyArray2<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let crop = image_from(&image)?;
        let mask = mask_from(&mask)?;
        let out = pipeline::vaccinate_crop(&self.inner, &crop, &mask).map_err(to_py)?;
        Ok(out.into_data().into_pyarray(py))
    }

    /// Neutralise a resolution-sized crop. Without a mask the attacked
    /// region is detected from the image itself.
    #[pyo3(signature = (image, mask = None))]
    fn neutralise_crop<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
        mask: Option<PyReadonlyArray2<'py, f32>>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let crop = image_from(&image)?;
        let mask = match &mask {
            Some(m) => Some(mask_from(m)?),
            None => None,
        };
        let out = pipeline::neutralise(&self.inner, &crop, mask.as_ref()).map_err(to_py)?;
        Ok(out.into_data().into_pyarray(py))
    }

    fn __repr__(&self) -> String {
        format!(
            "ImmuneSystem(resolution={}, step={})",
            self.resolution(),
            self.step()
        )
    }
}

/// Vaccination classifier: scores a neutralised crop with the probability
/// that the source portrait was vaccinated.
#[pyclass(module = "cybervax")]
struct Validator {
    inner: cybervax_core::models::Validator,
}

#[pymethods]
impl Validator {
    /// Load a trained validator from a checkpoint archive.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _meta) = cybervax_core::models::Validator::load(&path).map_err(to_py)?;
        Ok(Validator { inner })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config().resolution
    }

    /// Probability in [0, 1] that the crop came from a vaccinated portrait.
    fn probability(&self, image: PyReadonlyArray3<'_, f32>) -> PyResult<f32> {
        let crop = image_from(&image)?;
        self.inner.forward(&crop).map_err(to_py)
    }

    /// Threshold `probability` into a verdict.
    #[pyo3(signature = (image, threshold = 0.5))]
    fn is_vaccinated(&self, image: PyReadonlyArray3<'_, f32>, threshold: f64) -> PyResult<bool> {
        let crop = image_from(&image)?;
        let verdict =
            pipeline::validate_with_threshold(&self.inner, &crop, threshold).map_err(to_py)?;
        Ok(verdict.vaccinated)
    }

    fn __repr__(&self) -> String {
        format!(
            "Validator(architecture={:?}, resolution={})",
            self.inner.config().architecture,
            self.resolution()
        )
    }
}

/// Run the `cybervax` command line in-process. Takes the arguments after
/// the program name (e.g. `["train", "--synthetic", "200"]`) and returns
/// the exit code.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    let argv = std::iter::once("cybervax".to_string()).chain(args);
    cybervax_cli::run(argv)
}

/// Black out the face region: the mask-attack adversary the system is
/// trained against.
#[pyfunction]
fn mask_attack<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, f32>,
    mask: PyReadonlyArray2<'py, f32>,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let crop = image_from(&image)?;
    let mask = mask_from(&mask)?;
    let out = attacks::mask_attack(&crop, &mask).map_err(to_py)?;
    Ok(out.into_data().into_pyarray(py))
}

/// Detect the attacked (near-black) face region of a crop. Returns an
/// `(H, W)` mask with 1 on the detected region.
#[pyfunction]
fn detect_mask<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, f32>,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let crop = image_from(&image)?;
    let mask = pipeline::detect_mask(&crop).map_err(to_py)?;
    Ok(mask.data().to_owned().into_pyarray(py))
}

/// Peak signal-to-noise ratio between two images, in dB.
#[pyfunction]
fn psnr(a: PyReadonlyArray3<'_, f32>, b: PyReadonlyArray3<'_, f32>) -> PyResult<f64> {
    metrics::psnr(&image_from(&a)?, &image_from(&b)?).map_err(to_py)
}

/// Structural similarity between two images.
#[pyfunction]
fn ssim(a: PyReadonlyArray3<'_, f32>, b: PyReadonlyArray3<'_, f32>) -> PyResult<f64> {
    metrics::ssim(&image_from(&a)?, &image_from(&b)?).map_err(to_py)
}

/// Structural similarity restricted to a masked region; `invert` scores
/// the complement instead.
#[pyfunction]
#[pyo3(signature = (a, b, mask, invert = false))]
fn ssim_region(
    a: PyReadonlyArray3<'_, f32>,
    b: PyReadonlyArray3<'_, f32>,
    mask: PyReadonlyArray2<'_, f32>,
    invert: bool,
) -> PyResult<f64> {
    metrics::ssim_region(&image_from(&a)?, &image_from(&b)?, &mask_from(&mask)?, invert)
        .map_err(to_py)
}

/// Generate the synthetic portrait corpus used for smoke runs: `n`
/// procedural faces at the given resolution. Returns
/// `(images, masks)` with shapes `(n, r, r, 3)` and `(n, r, r)`.
#[pyfunction]
fn synthetic_faces<'py>(
    py: Python<'py>,
    n: usize,
    resolution: usize,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray4<f32>>, Bound<'py, PyArray3<f32>>)> {
    use numpy::ndarray::{Array3, Array4, Axis};
    let dataset = data::generate_synthetic_faces(n, resolution, seed).map_err(to_py)?;
    let mut images = Array4::<f32>::zeros((n, resolution, resolution, 3));
    let mut masks = Array3::<f32>::zeros((n, resolution, resolution));
    for i in 0..n {
        images
            .index_axis_mut(Axis(0), i)
            .assign(dataset.image(i).map_err(to_py)?.data());
        masks
            .index_axis_mut(Axis(0), i)
            .assign(dataset.mask(i).map_err(to_py)?.data());
    }
    Ok((images.into_pyarray(py), masks.into_pyarray(py)))
}

#[pymodule]
fn cybervax(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ImmuneSystem>()?;
    m.add_class::<Validator>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(mask_attack, m)?)?;
    m.add_function(wrap_pyfunction!(detect_mask, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_region, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_faces, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
