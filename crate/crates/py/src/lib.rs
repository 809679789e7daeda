//! Python bindings: the main value-level operations (softmax, losses,
//! masks/metrics, sanitizer, partitioning) plus a one-call experiment
//! runner driving the same pipeline as the CLI.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fediod::data;
use fediod::distill;
use fediod::metrics::{self, BinaryMask, InstanceMap};
use fediod::privacy;
use fediod::tensor;

fn err(e: fediod::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mask_from_grid(grid: Vec<Vec<i64>>) -> PyResult<BinaryMask> {
    let h = grid.len();
    let w = grid.first().map(Vec::len).unwrap_or(0);
    if h == 0 || w == 0 || grid.iter().any(|row| row.len() != w) {
        return Err(PyValueError::new_err("mask grid must be rectangular and nonempty"));
    }
    let bits = grid.into_iter().flatten().map(|v| v != 0).collect();
    BinaryMask::new(h, w, bits).map_err(err)
}

fn instances_from_grid(grid: Vec<Vec<i64>>) -> PyResult<InstanceMap> {
    let h = grid.len();
    let w = grid.first().map(Vec::len).unwrap_or(0);
    if h == 0 || w == 0 || grid.iter().any(|row| row.len() != w) {
        return Err(PyValueError::new_err("instance grid must be rectangular and nonempty"));
    }
    let mut distinct: Vec<i64> = grid.iter().flatten().copied().filter(|&v| v > 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let ids = grid
        .into_iter()
        .flatten()
        .map(|v| {
            if v <= 0 {
                0
            } else {
                distinct.binary_search(&v).expect("present") as u32 + 1
            }
        })
        .collect();
    InstanceMap::new(h, w, ids).map_err(err)
}

/// Temperature softmax with max-subtraction.
#[pyfunction]
fn softmax_tau(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    tensor::softmax_tau(&logits, tau).map_err(err)
}

/// Shannon entropy of a probability vector (natural log).
#[pyfunction]
fn shannon_entropy(q: Vec<f64>) -> PyResult<f64> {
    distill::shannon_entropy(&q).map_err(err)
}

/// Weighted Jensen-Shannon divergence across probability rows.
#[pyfunction]
fn jsd(rows: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<f64> {
    distill::jsd(&rows, &weights).map_err(err)
}

/// Overlap Dice between two binary grids (nonzero = foreground).
#[pyfunction]
fn dice(y: Vec<Vec<i64>>, yhat: Vec<Vec<i64>>) -> PyResult<f64> {
    metrics::dice(&mask_from_grid(y)?, &mask_from_grid(yhat)?).map_err(err)
}

/// (sensitivity, specificity) between two binary grids.
#[pyfunction]
fn sens_spec(y: Vec<Vec<i64>>, yhat: Vec<Vec<i64>>) -> PyResult<(f64, f64)> {
    metrics::sens_spec(&mask_from_grid(y)?, &mask_from_grid(yhat)?).map_err(err)
}

/// Symmetric 95th-percentile boundary distance in pixels.
#[pyfunction]
fn hd95(y: Vec<Vec<i64>>, yhat: Vec<Vec<i64>>) -> PyResult<f64> {
    metrics::hd95(&mask_from_grid(y)?, &mask_from_grid(yhat)?).map_err(err)
}

/// Aggregated Jaccard Index between two instance-id grids.
#[pyfunction]
fn aji(y: Vec<Vec<i64>>, yhat: Vec<Vec<i64>>) -> PyResult<f64> {
    metrics::aji(&instances_from_grid(y)?, &instances_from_grid(yhat)?).map_err(err)
}

/// Object-level Dice between two instance-id grids.
#[pyfunction]
fn object_dice(y: Vec<Vec<i64>>, yhat: Vec<Vec<i64>>) -> PyResult<f64> {
    metrics::object_dice(&instances_from_grid(y)?, &instances_from_grid(yhat)?).map_err(err)
}

/// Clip to an L2 bound and add Gaussian noise (the release sanitizer).
#[pyfunction]
#[pyo3(signature = (v, clip_norm, noise_multiplier=0.0, seed=0))]
fn sanitize(v: Vec<f64>, clip_norm: f64, noise_multiplier: f64, seed: u64) -> PyResult<Vec<f64>> {
    let mut cfg = privacy::DpConfig::new(clip_norm, noise_multiplier, true, seed).map_err(err)?;
    privacy::sanitize(&v, &mut cfg).map_err(err)
}

/// L2 norm of the clipped vector; never exceeds the bound.
#[pyfunction]
fn clipped_norm_bound(v: Vec<f64>, clip_norm: f64) -> f64 {
    privacy::clipped_norm_bound(&v, clip_norm)
}

/// A labeled dataset with inputs in [-1, 1].
#[pyclass]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner
            .inputs
            .values()
            .chunks(self.inner.dim())
            .map(|row| row.to_vec())
            .collect()
    }

    /// Stratified (train, test) split holding out `test_fraction` per class.
    fn split_test(&self, test_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (train, test) = self.inner.split_test(test_fraction, seed).map_err(err)?;
        Ok((Dataset { inner: train }, Dataset { inner: test }))
    }
}

/// Gaussian class clusters on a circle, clipped to [-1, 1].
#[pyfunction]
#[pyo3(signature = (classes, per_class, dim=2, spread=0.12, seed=0))]
fn make_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> PyResult<Dataset> {
    Ok(Dataset { inner: data::make_blobs(classes, per_class, dim, spread, seed).map_err(err)? })
}

/// Load an IDX image/label pair, rescaled and area-downsampled.
#[pyfunction]
fn load_idx(images_path: String, labels_path: String, downsample_to: usize) -> PyResult<Dataset> {
    let ds = data::load_idx(
        std::path::Path::new(&images_path),
        std::path::Path::new(&labels_path),
        downsample_to,
    )
    .map_err(err)?;
    Ok(Dataset { inner: ds })
}

/// Per-node sample assignment produced by the per-class Dirichlet split.
#[pyclass]
struct Partition {
    inner: data::PartitionSpec,
}

#[pymethods]
impl Partition {
    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes()
    }

    fn node_indices(&self) -> Vec<Vec<usize>> {
        self.inner.node_indices.clone()
    }

    fn label_histogram(&self) -> Vec<Vec<usize>> {
        self.inner.label_histogram.clone()
    }

    fn local_weight(&self, k: usize) -> f64 {
        data::local_weight(&self.inner, k)
    }

    fn class_prior_ratio(&self, k: usize, c: usize) -> PyResult<f64> {
        data::class_prior_ratio(&self.inner, k, c).map_err(err)
    }

    /// Total-variation distance between node k's label distribution and the
    /// global one.
    fn tv_distance(&self, k: usize) -> f64 {
        data::label_tv_distance(&self.inner, k)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

/// Split a dataset across nodes with per-class Dirichlet(alpha) draws.
#[pyfunction]
fn dirichlet_partition(ds: &Dataset, nodes: usize, alpha: f64, seed: u64) -> PyResult<Partition> {
    Ok(Partition { inner: data::dirichlet_partition(&ds.inner, nodes, alpha, seed).map_err(err)? })
}

/// Run an experiment config end to end (same pipeline as the CLI `run`
/// subcommand) and return the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_path, output_dir=None, seed_override=None))]
fn run_experiment(config_path: String, output_dir: Option<String>, seed_override: Option<u64>) -> PyResult<String> {
    let report = fediod::runner::run_from_path(
        std::path::Path::new(&config_path),
        output_dir.as_deref().map(std::path::Path::new),
        seed_override,
    )
    .map_err(err)?;
    report.to_json().map_err(err)
}

#[pymodule]
fn fediod_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax_tau, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(sens_spec, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(aji, m)?)?;
    m.add_function(wrap_pyfunction!(object_dice, m)?)?;
    m.add_function(wrap_pyfunction!(sanitize, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_norm_bound, m)?)?;
    m.add_function(wrap_pyfunction!(make_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Partition>()?;
    Ok(())
}
