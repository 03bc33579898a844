//! Python bindings: masks, synthetic data, shuffling, training,
//! prediction and metrics. Arrays cross the boundary as flat `list[float]`
//! row-major buffers plus shape tuples, so no Python-side dependencies
//! beyond the standard library are needed.

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use avtopo::config::parse_config;
use avtopo::evaluate::{av_metrics, connectivity_report, MetricMode};
use avtopo::infer::{binarize, make_grid, predict_image};
use avtopo::mask::{AvMask, MaskKind};
use avtopo::shuffle::{shuffle_mask, ShuffleConfig};
use avtopo::train::TrainState;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn channels_to_flat(ch: &Array3<f64>) -> (Vec<f64>, (usize, usize, usize)) {
    (ch.iter().copied().collect(), ch.dim())
}

/// A binary or probability artery/vein mask with channels
/// (artery, vein, vessel).
#[pyclass(name = "Mask", skip_from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: AvMask,
}

#[pymethods]
impl PyMask {
    /// Builds a mask from a flat row-major (3, h, w) channel buffer.
    #[staticmethod]
    #[pyo3(signature = (data, h, w, binary=true))]
    fn from_channels(data: Vec<f64>, h: usize, w: usize, binary: bool) -> PyResult<Self> {
        let ch = Array3::from_shape_vec((3, h, w), data).map_err(err)?;
        let kind = if binary {
            MaskKind::Binary
        } else {
            MaskKind::Probability
        };
        let inner = AvMask::from_channels(&ch, kind).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Flat channel buffer plus its (3, h, w) shape.
    fn to_channels(&self) -> (Vec<f64>, (usize, usize, usize)) {
        channels_to_flat(&self.inner.to_channels())
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn vessel_pixels(&self) -> usize {
        self.inner.vessel_pixel_count()
    }

    /// Component statistics per class as
    /// {class: (pixels, components, largest_component_ratio)}.
    #[pyo3(signature = (min_size=10))]
    fn connectivity(&self, min_size: usize) -> std::collections::HashMap<String, (usize, usize, f64)> {
        let rep = connectivity_report(&self.inner, min_size);
        [
            ("artery", rep.artery),
            ("vein", rep.vein),
            ("vessel", rep.vessel),
        ]
        .into_iter()
        .map(|(k, c)| {
            (
                k.to_string(),
                (c.pixels, c.components, c.largest_component_ratio),
            )
        })
        .collect()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.shape();
        format!("Mask({h}x{w}, {} vessel px)", self.inner.vessel_pixel_count())
    }
}

/// One synthetic fundus-style sample: image plus ground-truth mask.
#[pyclass(name = "Sample")]
struct PySample {
    #[pyo3(get)]
    id: String,
    image: Array3<f64>,
    #[pyo3(get)]
    mask: PyMask,
}

#[pymethods]
impl PySample {
    /// Flat RGB image buffer plus its (3, h, w) shape.
    fn image_channels(&self) -> (Vec<f64>, (usize, usize, usize)) {
        channels_to_flat(&self.image)
    }
}

/// Generates a deterministic synthetic sample.
#[pyfunction]
#[pyo3(signature = (seed, h=128, w=128))]
fn synth_sample(seed: u64, h: usize, w: usize) -> PyResult<PySample> {
    let s = avtopo::dataset::synth_sample(seed, (h, w)).map_err(err)?;
    Ok(PySample {
        id: s.id,
        image: s.image,
        mask: PyMask { inner: s.mask },
    })
}

/// Applies the connectivity-degrading mask perturbation. Returns the
/// perturbed mask and the achieved change fraction.
#[pyfunction]
#[pyo3(signature = (mask, seed=0))]
fn shuffle(mask: &PyMask, seed: u64) -> PyResult<(PyMask, f64)> {
    let cfg = ShuffleConfig {
        seed,
        ..Default::default()
    };
    let (m, report) = shuffle_mask(&mask.inner, &cfg).map_err(err)?;
    Ok((PyMask { inner: m }, report.final_fraction))
}

/// Patch origins covering one dimension.
#[pyfunction]
fn grid(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    make_grid(len, patch, stride)
}

/// Artery/vein metrics as {sensitivity, specificity, accuracy, n_artery,
/// n_vein}; `mode` is "gt" or "seg".
#[pyfunction]
#[pyo3(signature = (pred, gt, mode="gt"))]
fn metrics(
    pred: &PyMask,
    gt: &PyMask,
    mode: &str,
) -> PyResult<std::collections::HashMap<String, f64>> {
    let mode: MetricMode = mode.parse().map_err(err)?;
    let m = av_metrics(&pred.inner, &gt.inner, mode).map_err(err)?;
    Ok([
        ("sensitivity".to_string(), m.sensitivity),
        ("specificity".to_string(), m.specificity),
        ("accuracy".to_string(), m.accuracy),
        ("n_artery".to_string(), m.n_artery as f64),
        ("n_vein".to_string(), m.n_vein as f64),
    ]
    .into_iter()
    .collect())
}

/// A training run driven from Python.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    state: TrainState,
    data: Vec<avtopo::mask::FundusSample>,
}

#[pymethods]
impl PyTrainer {
    /// Builds a run from a configuration document (same format as the
    /// CLI) trained on `n_synth` synthetic samples of side `synth_size`.
    #[new]
    #[pyo3(signature = (config_text, n_synth=8, synth_size=64))]
    fn new(config_text: &str, n_synth: usize, synth_size: usize) -> PyResult<Self> {
        let cfg = parse_config(config_text).map_err(err)?;
        let data = (0..n_synth)
            .map(|i| {
                avtopo::dataset::synth_sample(
                    cfg.seed.wrapping_add(1000 + i as u64),
                    (synth_size, synth_size),
                )
            })
            .collect::<avtopo::Result<Vec<_>>>()
            .map_err(err)?;
        let state = TrainState::new(&cfg).map_err(err)?;
        Ok(Self { state, data })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = TrainState::load(&path).map_err(err)?;
        Ok(Self {
            state,
            data: Vec::new(),
        })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Runs `iters` training iterations and returns the loss history rows
    /// as (iteration, l_bce, l_adv_d, l_adv_g, l_triplet, lr).
    fn train(&mut self, iters: usize) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64)>> {
        if self.data.is_empty() {
            return Err(PyValueError::new_err(
                "trainer has no data; construct it from a config",
            ));
        }
        let before = self.state.history.len();
        self.state.run(&self.data, iters, None).map_err(err)?;
        Ok(self.state.history[before..]
            .iter()
            .map(|r| (r.iteration, r.l_bce, r.l_adv_d, r.l_adv_g, r.l_triplet, r.lr))
            .collect())
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(err)
    }

    /// Stitched probability prediction for a flat (3, h, w) image buffer.
    #[pyo3(signature = (image, h, w, patch=64, stride=32))]
    fn predict(
        &mut self,
        image: Vec<f64>,
        h: usize,
        w: usize,
        patch: usize,
        stride: usize,
    ) -> PyResult<PyMask> {
        let img = Array3::from_shape_vec((3, h, w), image).map_err(err)?;
        let prob = predict_image(&mut self.state.gen, &img, patch, stride).map_err(err)?;
        Ok(PyMask { inner: prob })
    }

    /// Hard labels from a probability mask.
    #[staticmethod]
    fn binarize(prob: &PyMask) -> PyMask {
        PyMask {
            inner: binarize(&prob.inner),
        }
    }

    /// Mean per-bit discriminator score map for (image, mask), shape
    /// (head_bits,). Errors for ablations without a discriminator.
    fn score(&mut self, image: Vec<f64>, mask: &PyMask) -> PyResult<Vec<f64>> {
        use avtopo::discriminator::Discriminator;
        use avtopo::nn::Layer;
        let disc = self
            .state
            .disc
            .as_mut()
            .ok_or_else(|| PyValueError::new_err("this ablation has no discriminator"))?;
        let (h, w) = mask.inner.shape();
        let img = Array3::from_shape_vec((3, h, w), image).map_err(err)?;
        let mut x = Array4::zeros((1, 3, h, w));
        x.index_axis_mut(Axis(0), 0).assign(&img);
        let m = avtopo::mask::masks_to_batch(&[&mask.inner]);
        let input = Discriminator::concat_input(&x, &m).map_err(err)?;
        let out = disc.forward(&input, false);
        let bits = out.dim().1;
        Ok((0..bits)
            .map(|b| {
                let plane = out.index_axis(Axis(1), b);
                plane.iter().sum::<f64>() / plane.len() as f64
            })
            .collect())
    }
}

#[pymodule]
fn avtopo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(shuffle, m)?)?;
    m.add_function(wrap_pyfunction!(grid, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
