//! Python bindings: the tensor core, model assembly, parameter accounting,
//! the synthetic task generator, and a small training entry point.
//!
//! Build with `cargo build -p multistream-py --release`; the resulting
//! `libmultistream_py.so` imports as `multistream_py` (see
//! `python/smoke_test.py`, which handles the rename).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use multistream::data::{generate_synthetic, TaskSpec};
use multistream::model::{param_count, Model, ModelConfig};
use multistream::tensor::gradcheck::{finite_diff_check, GradCheckOptions};
use multistream::tensor::{Mode, Padding, Tensor};
use multistream::train::{evaluate, TrainConfig, Trainer};

fn err(e: multistream::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense f64 tensor with reverse-mode autodiff.
#[pyclass(name = "Tensor", unsendable, from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, values, requires_grad = false))]
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = Tensor::new(shape, values).map_err(err)?;
        let t = if requires_grad { t.requires_grad() } else { t };
        Ok(PyTensor { inner: t })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor { inner: Tensor::zeros(shape) }
    }

    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor { inner: self.inner.matmul(&other.inner).map_err(err)? })
    }

    fn add(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor { inner: self.inner.add(&other.inner).map_err(err)? })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor { inner: self.inner.mul(&other.inner).map_err(err)? })
    }

    fn scale(&self, c: f64) -> Self {
        PyTensor { inner: self.inner.scale(c) }
    }

    fn relu(&self) -> Self {
        PyTensor { inner: self.inner.relu() }
    }

    fn softmax_rows(&self) -> PyResult<Self> {
        Ok(PyTensor { inner: self.inner.softmax_rows().map_err(err)? })
    }

    /// Dilated 1-D convolution with "same" (zero-padded) or "valid" padding.
    #[pyo3(signature = (kernel, rate, padding = "same"))]
    fn conv1d_dilated(&self, kernel: &PyTensor, rate: usize, padding: &str) -> PyResult<Self> {
        let padding = match padding {
            "same" => Padding::SameZero,
            "valid" => Padding::Valid,
            other => return Err(PyValueError::new_err(format!("unknown padding {other:?}"))),
        };
        Ok(PyTensor {
            inner: self.inner.conv1d_dilated(&kernel.inner, rate, padding).map_err(err)?,
        })
    }

    #[pyo3(signature = (key, value, stride = 1, left = 15, right = 15))]
    fn time_restricted_attention(
        &self,
        key: &PyTensor,
        value: &PyTensor,
        stride: usize,
        left: usize,
        right: usize,
    ) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self
                .inner
                .time_restricted_attention(&key.inner, &value.inner, stride, left, right)
                .map_err(err)?,
        })
    }

    fn sum(&self) -> Self {
        PyTensor { inner: self.inner.sum() }
    }

    /// Reverse-mode sweep from a scalar loss.
    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }
}

/// The multi-stream self-attention encoder.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Build from the model configuration as TOML text (the contents of the
    /// CLI config's `[model]` section).
    #[staticmethod]
    fn from_toml(config: &str) -> PyResult<Self> {
        let cfg: ModelConfig =
            toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel { inner: Model::build(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let model = multistream::checkpoint::load(path.as_ref()).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        multistream::checkpoint::save(&self.inner, path.as_ref()).map_err(err)
    }

    /// Per-frame class logits for a [T x input_dim] feature matrix.
    #[pyo3(signature = (features, train = false))]
    fn forward(&self, features: &PyTensor, train: bool) -> PyResult<PyTensor> {
        let mode = if train { Mode::Train } else { Mode::Infer };
        Ok(PyTensor { inner: self.inner.forward(&features.inner, mode).map_err(err)? })
    }

    /// Final embedding (after the last block) for a feature matrix.
    #[pyo3(signature = (features, train = false))]
    fn embed(&self, features: &PyTensor, train: bool) -> PyResult<PyTensor> {
        let mode = if train { Mode::Train } else { Mode::Infer };
        Ok(PyTensor { inner: self.inner.embed(&features.inner, mode).map_err(err)? })
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameters().iter().map(|p| p.name().to_string()).collect()
    }

    /// (closed-form total, per-component breakdown); the closed form is
    /// cross-checked against enumeration of the instantiated tensors.
    fn param_count(&self) -> PyResult<(u64, Vec<(String, u64)>)> {
        let counted = param_count(self.inner.config()).map_err(err)?;
        if counted.total != self.inner.enumerate_params() {
            return Err(PyRuntimeError::new_err(
                "closed-form parameter count disagrees with enumeration",
            ));
        }
        Ok((counted.total, counted.components))
    }

    /// Central finite differences against analytic gradients on a random
    /// probe batch; returns (pass, worst relative error).
    #[pyo3(signature = (frames = 7, tolerance = 1e-4, max_coords = 8, seed = 0))]
    fn grad_check(
        &self,
        frames: usize,
        tolerance: f64,
        max_coords: usize,
        seed: u64,
    ) -> PyResult<(bool, f64)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = self.inner.config();
        let features = Tensor::new(
            vec![frames, cfg.input_dim],
            (0..frames * cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .map_err(err)?;
        let labels: Vec<usize> =
            (0..frames).map(|_| rng.random_range(0..cfg.num_classes)).collect();
        let opts = GradCheckOptions {
            tolerance,
            max_coords_per_param: Some(max_coords),
            sample_seed: seed,
            ..Default::default()
        };
        let report = finite_diff_check(self.inner.parameters(), &opts, || {
            self.inner.reseed_dropout(seed);
            let logits = self.inner.forward(&features, Mode::Train)?;
            Ok(logits.cross_entropy_sum(&labels)?.scale(1.0 / frames as f64))
        })
        .map_err(err)?;
        let worst = report.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
        Ok((report.pass(), worst))
    }
}

/// Generate the synthetic multi-resolution dataset described by a TaskSpec in
/// TOML text. Returns (features, labels) per sequence; features are row-major
/// [T x input_dim].
#[pyfunction]
fn generate_task(task_toml: &str) -> PyResult<Vec<(Vec<f32>, Vec<i32>)>> {
    let spec: TaskSpec =
        toml::from_str(task_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let batches = generate_synthetic(&spec).map_err(err)?;
    Ok(batches
        .into_iter()
        .map(|b| {
            let labels = b.labels.clone().unwrap_or_default();
            (b.features, labels)
        })
        .collect())
}

/// Train a model on the synthetic task; returns per-epoch
/// (loss, train accuracy, eval accuracy) triples.
#[pyfunction]
#[pyo3(signature = (model_toml, task_toml, epochs = 5, batch_size = 4))]
fn train_on_task(
    model_toml: &str,
    task_toml: &str,
    epochs: usize,
    batch_size: usize,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let model_cfg: ModelConfig =
        toml::from_str(model_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let spec: TaskSpec =
        toml::from_str(task_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let train_data = generate_synthetic(&spec).map_err(err)?;
    let eval_spec = TaskSpec {
        seed: spec.seed + 1,
        num_sequences: spec.num_eval_sequences,
        ..spec
    };
    let eval_data = generate_synthetic(&eval_spec).map_err(err)?;

    let model = Model::build(model_cfg).map_err(err)?;
    let tc = TrainConfig { epochs, batch_size, ..Default::default() };
    let steps = Trainer::steps_per_epoch(train_data.len(), batch_size);
    let mut trainer = Trainer::new(&model, tc, steps);
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let metrics = trainer.train_epoch(epoch, &train_data).map_err(err)?;
        let (_, eval_acc) = evaluate(&model, &eval_data).map_err(err)?;
        out.push((metrics.loss, metrics.accuracy, eval_acc));
    }
    Ok(out)
}

/// Semi-orthogonality penalty Trace((UU^T - I)(UU^T - I)^T) of a 2-D tensor.
#[pyfunction]
fn semi_ortho_penalty(u: &PyTensor) -> PyResult<f64> {
    Ok(multistream::constraint::semi_ortho_penalty(&u.inner).map_err(err)?.values()[0])
}

#[pymodule]
fn multistream_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(train_on_task, m)?)?;
    m.add_function(wrap_pyfunction!(semi_ortho_penalty, m)?)?;
    Ok(())
}
