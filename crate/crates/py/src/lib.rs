//! Python bindings over the core pipeline: body model, end-to-end model,
//! dataset generation, training, and checkpoint evaluation. Arrays cross
//! the boundary as plain nested lists; callers can wrap them in numpy.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mlt_core::body::{build_default_body, forward, BodyParams, BodyPreset, RestBody};
use mlt_core::config::TrainConfig;
use mlt_core::model;
use mlt_core::synth;
use mlt_core::trainer;
use ndarray::{Array2, Array3};

fn err(e: mlt_core::Error) -> PyErr {
    match &e {
        mlt_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_preset(name: &str) -> PyResult<BodyPreset> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown preset {name:?}")))
}

/// Procedural parametric body: theta in R^82 to vertices and joints.
#[pyclass]
struct Body {
    inner: RestBody,
}

#[pymethods]
impl Body {
    #[new]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(Body {
            inner: build_default_body(parse_preset(preset)?),
        })
    }

    fn vertex_count(&self) -> usize {
        self.inner.template_vertices.nrows()
    }

    fn joint_count(&self) -> usize {
        self.inner.rest_joints.nrows()
    }

    fn template_vertices(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.template_vertices)
    }

    /// pose: 72 axis-angle values (24 joints x 3), shape: 10 coefficients.
    /// Returns (vertices, joints).
    fn forward(&self, pose: Vec<f64>, shape: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut flat = pose;
        flat.extend_from_slice(&shape);
        let params = BodyParams::from_flat(&flat).map_err(err)?;
        let (vertices, joints) = forward(&self.inner, &params).map_err(err)?;
        Ok((rows(&vertices), rows(&joints)))
    }
}

/// Full image-to-mesh model behind a JSON train config.
#[pyclass]
struct Model {
    inner: model::Model,
}

#[pymethods]
impl Model {
    #[new]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig::from_json(config_json).map_err(err)?;
        Ok(Model {
            inner: model::Model::new(cfg.model, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _adam, _meta) = trainer::load_checkpoint(path.as_ref()).map_err(err)?;
        Ok(Model { inner })
    }

    fn parameter_count(&self) -> usize {
        self.inner.store.scalar_count()
    }

    fn token_count(&self) -> usize {
        self.inner.config.token_count()
    }

    /// image: resolution*resolution grayscale values in row-major order.
    fn infer<'py>(&self, py: Python<'py>, image: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.config.resolution;
        if image.len() != r * r {
            return Err(PyValueError::new_err(format!(
                "expected {r}x{r} = {} pixels, got {}",
                r * r,
                image.len()
            )));
        }
        let arr = Array3::from_shape_vec((1, r, r), image)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let out = self.inner.forward_eval(&arr).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("theta", out.template.theta.to_flat())?;
        d.set_item("template_coarse", rows(&out.template.template_coarse))?;
        d.set_item("template_joints", rows(&out.template.template_joints))?;
        d.set_item("joints3d", rows(&out.prediction.joints3d))?;
        d.set_item("joints2d", rows(&out.prediction.joints2d))?;
        d.set_item("coarse_vertices", rows(&out.prediction.coarse_vertices))?;
        d.set_item("fine_vertices", rows(&out.prediction.fine_vertices))?;
        d.set_item("camera", out.camera.to_vec())?;
        Ok(d)
    }
}

/// The training schedule: base_lr * cos(7 pi s / (16 S)).
#[pyfunction]
fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> PyResult<f64> {
    trainer::lr_at(step, total_steps, base_lr).map_err(err)
}

#[pyfunction]
fn desk_config_json() -> PyResult<String> {
    TrainConfig::desk().to_json().map_err(err)
}

/// Generate a synthetic dataset under `out_dir`. Returns the records hash.
#[pyfunction]
fn generate_dataset(
    out_dir: &str,
    config_json: &str,
    count: usize,
    tier: &str,
    seed: u64,
) -> PyResult<String> {
    let cfg = TrainConfig::from_json(config_json).map_err(err)?;
    let spec = synth::SynthSpec {
        preset: cfg.model.preset,
        coarse_count: cfg.model.coarse_count,
        resolution: cfg.model.resolution,
        count,
        tier: synth::Tier::parse(tier).map_err(err)?,
        global_seed: seed,
    };
    let ds = synth::generate(&spec).map_err(err)?;
    std::fs::create_dir_all(out_dir).map_err(|e| err(e.into()))?;
    synth::save_dataset(&ds, out_dir.as_ref()).map_err(err)?;
    let manifest = std::fs::read_to_string(std::path::Path::new(out_dir).join(synth::MANIFEST_FILE))
        .map_err(|e| err(e.into()))?;
    let value: serde_json::Value =
        serde_json::from_str(&manifest).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(value["records_sha256"].as_str().unwrap_or_default().to_string())
}

/// Train on a generated dataset; writes checkpoints under `checkpoint_dir`.
/// Returns {steps, first_loss, final_loss, checkpoint}.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    config_json: &str,
    data_dir: &str,
    checkpoint_dir: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_json(config_json).map_err(err)?;
    let dataset = synth::load_dataset(data_dir.as_ref()).map_err(err)?;
    let mut m = model::Model::new(cfg.model.clone(), cfg.optim.seed).map_err(err)?;
    let report = trainer::train(&mut m, &dataset, &cfg, Some(checkpoint_dir.as_ref())).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("steps", report.step_losses.len())?;
    d.set_item("first_loss", report.step_losses.first().copied())?;
    d.set_item("final_loss", report.step_losses.last().copied())?;
    d.set_item(
        "checkpoint",
        std::path::Path::new(checkpoint_dir)
            .join("final.mltc")
            .to_string_lossy()
            .into_owned(),
    )?;
    Ok(d)
}

/// Mean metrics of a checkpoint over a dataset split.
#[pyfunction]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: &str,
    data_dir: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let (m, _adam, _meta) = trainer::load_checkpoint(checkpoint.as_ref()).map_err(err)?;
    let dataset = synth::load_dataset(data_dir.as_ref()).map_err(err)?;
    let stats = trainer::evaluate(&m, &dataset).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mpve", stats.mpve)?;
    d.set_item("mpjpe", stats.mpjpe)?;
    d.set_item("pa_mpjpe", stats.pa_mpjpe)?;
    Ok(d)
}

#[pymodule]
fn mlt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Body>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config_json, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}
