//! Python bindings. Images cross the boundary as flat row-major lists of
//! `height * width * 3` floats in `[0, 1]`, together with their width and
//! height; depth maps as flat lists of `height * width` floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tnet::checkpoint::Checkpoint;
use tnet::haze::{self, DepthKind, DepthMap, SynthConfig};
use tnet::image::{Domain, ImageBuffer};
use tnet::stack::StackTNet;
use tnet::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Format { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f64>, width: usize, height: usize) -> Result<ImageBuffer, Error> {
    let img = ImageBuffer::new(width, height, data, Domain::Unit)?;
    img.check_range()?;
    Ok(img)
}

fn depth(data: Vec<f64>, width: usize, height: usize) -> Result<DepthMap, Error> {
    DepthMap::new(width, height, data)
}

/// PSNR in dB of two images; identical images give the 99 dB cap.
#[pyfunction]
fn psnr(pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    let (p, g) = (image(pred, width, height).map_err(to_py)?, image(gt, width, height).map_err(to_py)?);
    tnet::metrics::psnr(&p, &g).map_err(to_py)
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
#[pyfunction]
fn ssim(pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    let (p, g) = (image(pred, width, height).map_err(to_py)?, image(gt, width, height).map_err(to_py)?);
    tnet::metrics::ssim(&p, &g).map_err(to_py)
}

#[pyfunction]
fn smooth_l1(e: f64) -> PyResult<f64> {
    tnet::losses::smooth_l1_pointwise(e).map_err(to_py)
}

/// Normalised depth map of the given kind (`ramp`, `radial`, `smooth-noise`).
#[pyfunction]
fn make_depth(kind: &str, width: usize, height: usize, seed: u64) -> PyResult<Vec<f64>> {
    let kind: DepthKind = kind.parse().map_err(to_py)?;
    Ok(haze::make_depth(kind, height, width, seed).map_err(to_py)?.data().to_vec())
}

/// Hazy image `J t + A (1 - t)` with `t = exp(-beta * depth)`.
#[pyfunction]
fn apply_haze(
    clean: Vec<f64>,
    depth_map: Vec<f64>,
    width: usize,
    height: usize,
    beta: f64,
    airlight: f64,
) -> PyResult<Vec<f64>> {
    let clean = image(clean, width, height).map_err(to_py)?;
    let d = depth(depth_map, width, height).map_err(to_py)?;
    let sample = haze::apply_haze(&clean, &d, beta, airlight).map_err(to_py)?;
    Ok(sample.hazy.data().to_vec())
}

/// Recover the clean image; returns `(clean, flagged)` where `flagged`
/// marks pixels whose transmission is below `t_min`.
#[pyfunction]
#[pyo3(signature = (hazy, depth_map, width, height, beta, airlight, t_min = haze::DEFAULT_T_MIN))]
fn invert_haze(
    hazy: Vec<f64>,
    depth_map: Vec<f64>,
    width: usize,
    height: usize,
    beta: f64,
    airlight: f64,
    t_min: f64,
) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let hazy = image(hazy, width, height).map_err(to_py)?;
    let d = depth(depth_map, width, height).map_err(to_py)?;
    let inv = haze::invert_haze(&hazy, &d, beta, airlight, t_min).map_err(to_py)?;
    Ok((inv.clean.data().to_vec(), inv.flagged))
}

/// Write `count` procedural clean scenes; returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, count, size = 96, seed = 0))]
fn write_scenes(out_dir: PathBuf, count: usize, size: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
    haze::write_scenes(&out_dir, count, size, seed).map_err(to_py)
}

/// Synthesize hazy/clean pairs with a manifest; returns the pair count.
#[pyfunction]
#[pyo3(signature = (clean_dir, out_dir, count = 200, seed = 0, crop = Some(64)))]
fn synthesize(clean_dir: PathBuf, out_dir: PathBuf, count: usize, seed: u64, crop: Option<usize>) -> PyResult<usize> {
    let cfg = SynthConfig {
        count,
        seed,
        crop,
        ..SynthConfig::default()
    };
    Ok(haze::build_dataset(&clean_dir, &out_dir, &cfg).map_err(to_py)?.len())
}

/// A trained Stack T-Net loaded from a checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: StackTNet<f32>,
    epoch: usize,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let epoch = ck.epoch;
        Ok(Self {
            inner: ck.model().map_err(to_py)?,
            epoch,
        })
    }

    #[getter]
    fn stages(&self) -> usize {
        self.inner.stack_config().stages
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    /// Dehaze an image of any size; returns one image per stage, the last
    /// being the final output.
    #[pyo3(signature = (hazy, width, height, stages = None))]
    fn dehaze(
        &self,
        py: Python<'_>,
        hazy: Vec<f64>,
        width: usize,
        height: usize,
        stages: Option<usize>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let img = image(hazy, width, height).map_err(to_py)?;
        let k = stages.unwrap_or(self.stages());
        let outs = py.detach(|| self.inner.dehaze(&img, k)).map_err(to_py)?;
        Ok(outs.into_iter().map(|o| o.data().to_vec()).collect())
    }
}

#[pymodule]
fn tnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(make_depth, m)?)?;
    m.add_function(wrap_pyfunction!(apply_haze, m)?)?;
    m.add_function(wrap_pyfunction!(invert_haze, m)?)?;
    m.add_function(wrap_pyfunction!(write_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<Model>()?;
    m.add("PSNR_CAP_DB", tnet::metrics::PSNR_CAP_DB)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_images_are_checked() {
        assert!(image(vec![0.5; 12], 2, 2).is_ok());
        assert!(matches!(image(vec![0.5; 11], 2, 2), Err(Error::Shape(_) | Error::Config(_))));
        assert!(matches!(image(vec![1.5; 12], 2, 2), Err(Error::Domain(_))));
        assert!(depth(vec![0.0; 4], 2, 2).is_ok());
    }
}
