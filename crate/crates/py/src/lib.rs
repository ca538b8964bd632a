//! Python bindings. Tensors cross the boundary as flat lists of floats plus
//! lengths; no array library is required on the Python side.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use jagrec_core::{balance, bench, data, hsp, jagged, negsample, semi_async};

fn err(e: jagrec_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Variable-length rows of `dim`-wide float items.
#[pyclass(name = "JaggedTensor", module = "jagrec", skip_from_py_object)]
#[derive(Clone)]
struct PyJagged {
    inner: jagged::JaggedTensor<f64>,
}

#[pymethods]
impl PyJagged {
    #[new]
    fn new(values: Vec<f64>, lengths: Vec<usize>, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: jagged::JaggedTensor::from_lengths(values, &lengths, dim).map_err(err)? })
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn offsets(&self) -> Vec<usize> {
        self.inner.offsets().to_vec()
    }

    #[getter]
    fn lengths(&self) -> Vec<usize> {
        self.inner.lengths()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.num_rows()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.num_rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row(i).to_vec())
    }

    /// `[B][max_len][dim]` nested lists, padded with `pad`.
    #[pyo3(signature = (max_len, pad = 0.0))]
    fn to_dense(&self, max_len: usize, pad: f64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let dense = jagged::jagged_to_dense(&self.inner, max_len, pad).map_err(err)?;
        Ok(dense.outer_iter().map(|b| b.outer_iter().map(|t| t.to_vec()).collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!("JaggedTensor(rows={}, dim={}, tokens={})", self.inner.num_rows(), self.inner.dim(), self.inner.total_len())
    }
}

/// Returns `(output, score_elements, padded_score_elements)`. The bias is
/// built from `timestamps` (one int per token) when both tables are given.
#[pyfunction]
#[pyo3(signature = (q, k, v, num_heads, head_dim, causal = true, timestamps = None, time_table = None, position_table = None))]
#[allow(clippy::too_many_arguments)]
fn jagged_attention(
    q: &PyJagged,
    k: &PyJagged,
    v: &PyJagged,
    num_heads: usize,
    head_dim: usize,
    causal: bool,
    timestamps: Option<Vec<i64>>,
    time_table: Option<Vec<f64>>,
    position_table: Option<Vec<f64>>,
) -> PyResult<(PyJagged, usize, usize)> {
    let rab = match (timestamps, time_table, position_table) {
        (Some(ts), Some(tt), Some(pt)) => {
            let ts = jagged::JaggedTensor::from_lengths(ts, &q.inner.lengths(), 1).map_err(err)?;
            let spec = jagged::RabSpec::new(tt, pt).map_err(err)?;
            Some(jagged::compute_rab(&ts, &spec).map_err(err)?)
        }
        (None, None, None) => None,
        _ => return Err(PyValueError::new_err("timestamps, time_table and position_table go together")),
    };
    let cfg = jagged::AttentionConfig { num_heads, head_dim, causal };
    let (out, stats) = jagged::jagged_attention(&q.inner, &k.inner, &v.inner, rab.as_ref(), &cfg).map_err(err)?;
    Ok((PyJagged { inner: out }, stats.score_elements, stats.padded_score_elements))
}

/// Returns `(full_bytes, offloaded_peak_bytes)`.
#[pyfunction]
fn neg_memory_model(b: u64, l: u64, d: u64, r: u64, bytes_per_elem: u64, segment_size: u64) -> PyResult<(u64, u64)> {
    let m = negsample::neg_memory_model(b, l, d, r, bytes_per_elem, segment_size).map_err(err)?;
    Ok((m.full_bytes, m.offloaded_peak_bytes))
}

#[pyfunction]
fn monolithic_logits(output: Vec<f64>, neg: Vec<f64>, r: usize, d: usize) -> PyResult<Vec<f64>> {
    negsample::monolithic_logits(&output, &neg, r, d).map_err(err)
}

/// Returns `(logits, high_water_bytes, num_transfers)`.
#[pyfunction]
fn segmented_logits(output: Vec<f64>, neg: Vec<f64>, r: usize, d: usize, segment_size: usize) -> PyResult<(Vec<f64>, u64, usize)> {
    let (l, s) = negsample::segmented_logits(&output, &neg, r, d, segment_size).map_err(err)?;
    Ok((l, s.high_water_bytes, s.transfers.len()))
}

/// `(loss, d_pos, d_neg, d_aux)` of the sampled softmax with auxiliary logits.
#[pyfunction]
#[pyo3(signature = (pos, neg, aux, tau))]
fn sampled_softmax_loss(pos: f64, neg: Vec<f64>, aux: Vec<f64>, tau: f64) -> PyResult<(f64, f64, Vec<f64>, Vec<f64>)> {
    let o = negsample::sampled_softmax_loss(pos, &neg, &aux, tau).map_err(err)?;
    Ok((o.loss, o.d_pos, o.d_neg, o.d_aux))
}

fn assignment(a: balance::WorkerAssignment) -> (Vec<Vec<u64>>, Vec<u64>) {
    (a.samples, a.loads)
}

/// Returns `(sample_ids_per_worker, loads)`; sample ids index `token_counts`.
#[pyfunction]
fn global_token_reallocate(token_counts: Vec<u64>, num_workers: usize) -> PyResult<(Vec<Vec<u64>>, Vec<u64>)> {
    let s = balance::samples_from_counts(&token_counts).map_err(err)?;
    Ok(assignment(balance::global_token_reallocate(&s, num_workers)))
}

#[pyfunction]
fn fixed_count_assign(token_counts: Vec<u64>, num_workers: usize) -> PyResult<(Vec<Vec<u64>>, Vec<u64>)> {
    let s = balance::samples_from_counts(&token_counts).map_err(err)?;
    Ok(assignment(balance::fixed_count_assign(&s, num_workers)))
}

#[pyfunction]
fn weighted_grad_aggregate(grads: Vec<Vec<f64>>, counts: Vec<usize>) -> PyResult<Vec<f64>> {
    balance::weighted_grad_aggregate(&grads, &counts).map_err(err)
}

#[pyfunction]
fn hr_at_k(ranked: Vec<Vec<u64>>, truth: Vec<u64>, k: usize) -> PyResult<f64> {
    data::hr_at_k(&ranked, &truth, k).map_err(err)
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<Vec<u64>>, truth: Vec<u64>, k: usize) -> PyResult<f64> {
    data::ndcg_at_k(&ranked, &truth, k).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (l, sigma, t, alpha, tau, c1 = 1.0, c2 = 1.0, c3 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn eval_bound(l: f64, sigma: f64, t: f64, alpha: f64, tau: f64, c1: f64, c2: f64, c3: f64) -> PyResult<f64> {
    semi_async::eval_bound(&semi_async::BoundParams { l, sigma, t, alpha, tau, c1, c2, c3 }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (steps, window = 1))]
fn estimate_alpha(steps: Vec<Vec<u64>>, window: usize) -> PyResult<f64> {
    Ok(semi_async::estimate_alpha(&steps, window).map_err(err)?.alpha)
}

/// Trains on the default synthetic ID workload and returns
/// `(per_step_fingerprints, all_to_all_bytes, cross_group_messages)`.
#[pyfunction]
#[pyo3(signature = (steps, num_devices, num_groups, seed = 0))]
fn hsp_run(steps: usize, num_devices: usize, num_groups: usize, seed: u64) -> PyResult<(Vec<u64>, u64, usize)> {
    let topo = hsp::ClusterTopology::new(num_devices, num_groups).map_err(err)?;
    let workload = hsp::IdWorkload { seed, ..Default::default() };
    let cfg = hsp::HspConfig { seed, ..Default::default() };
    let run = hsp::hsp_train(steps, &workload, &topo, &cfg).map_err(err)?;
    Ok((run.fingerprints, run.log.all_to_all_bytes(), run.log.cross_group_all_to_all(&topo)))
}

#[pyclass(name = "ExperimentConfig", module = "jagrec", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: bench::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: bench::ExperimentConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: bench::ExperimentConfig::from_toml_str(text).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }
}

#[pyclass(name = "ExperimentReport", module = "jagrec")]
struct PyReport {
    inner: bench::ExperimentReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.clone()
    }

    #[getter]
    fn passed(&self) -> bool {
        self.inner.passed()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.table.columns.clone()
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<String>> {
        self.inner.table.rows.clone()
    }

    /// `(name, passed, detail)` per check.
    #[getter]
    fn checks(&self) -> Vec<(String, bool, String)> {
        self.inner.checks.iter().map(|c| (c.name.clone(), c.passed, c.detail.clone())).collect()
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().map_err(err)
    }

    fn to_markdown(&self) -> String {
        self.inner.to_markdown()
    }
}

#[pyfunction]
fn run_experiment(config: &PyConfig, kind: &str) -> PyResult<PyReport> {
    let kind: bench::ExperimentKind = kind.parse().map_err(err)?;
    Ok(PyReport { inner: bench::run_experiment(&config.inner, kind).map_err(err)? })
}

#[pymodule]
fn jagrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyJagged>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(jagged_attention, m)?)?;
    m.add_function(wrap_pyfunction!(neg_memory_model, m)?)?;
    m.add_function(wrap_pyfunction!(monolithic_logits, m)?)?;
    m.add_function(wrap_pyfunction!(segmented_logits, m)?)?;
    m.add_function(wrap_pyfunction!(sampled_softmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(global_token_reallocate, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_count_assign, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_grad_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(hr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(eval_bound, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(hsp_run, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
