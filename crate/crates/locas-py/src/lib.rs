//! Python bindings: the backbone, both memory variants, compression, and
//! the streaming harness, for quick experiments from Python.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use locas_core::backbone::{
    forward_with_trace, train_tiny_backbone, Attachment, Backbone, FfnKind, ModelConfig,
};
use locas_core::error::LocasError;
use locas_core::harness::{self, corpus, Method, RunConfig};
use locas_core::memory::{
    init_glu_memory, memory_grad_step, InitStrategy, LocasGluMemory, LocasMlpMemory,
    MemoryRefMut,
};
use locas_core::nlsvd;
use locas_core::tensor::Matrix;

fn err(e: LocasError) -> PyErr {
    PyValueError::new_err(format!("{e}"))
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse_kind(s: &str) -> PyResult<FfnKind> {
    match s {
        "mlp" => Ok(FfnKind::Mlp),
        "glu" => Ok(FfnKind::Glu),
        other => Err(PyValueError::new_err(format!("unknown ffn kind '{other}'"))),
    }
}

fn build_cfg(
    ffn_kind: &str,
    layers: usize,
    d_model: usize,
    d_ff: Option<usize>,
    heads: usize,
    max_seq: usize,
) -> PyResult<ModelConfig> {
    let kind = parse_kind(ffn_kind)?;
    Ok(ModelConfig {
        layers,
        d_model,
        d_ff: d_ff.unwrap_or(match kind {
            FfnKind::Mlp => 4 * d_model,
            FfnKind::Glu => 3 * d_model,
        }),
        heads,
        vocab: locas_core::backbone::DEFAULT_VOCAB,
        ffn_kind: kind,
        max_seq,
    })
}

/// A trained (or randomly initialized) decoder-only backbone.
#[pyclass(name = "Backbone")]
struct PyBackbone {
    inner: Backbone,
}

#[pymethods]
impl PyBackbone {
    /// Train a fresh backbone on a list of byte documents. Returns the
    /// model together with its training-loss curve.
    #[staticmethod]
    #[pyo3(signature = (docs, ffn_kind="glu", steps=200, lr=3e-3, seed=0, layers=2, d_model=64, d_ff=None, heads=4, max_seq=512))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        docs: Vec<Vec<u8>>,
        ffn_kind: &str,
        steps: usize,
        lr: f64,
        seed: u64,
        layers: usize,
        d_model: usize,
        d_ff: Option<usize>,
        heads: usize,
        max_seq: usize,
    ) -> PyResult<(Self, Vec<f64>)> {
        let cfg = build_cfg(ffn_kind, layers, d_model, d_ff, heads, max_seq)?;
        let out = train_tiny_backbone(&docs, cfg, steps, lr, seed).map_err(err)?;
        Ok((PyBackbone { inner: out.backbone }, out.loss_curve))
    }

    /// Randomly initialized backbone (no training).
    #[staticmethod]
    #[pyo3(signature = (ffn_kind="glu", seed=0, layers=2, d_model=64, d_ff=None, heads=4, max_seq=512))]
    fn init(
        ffn_kind: &str,
        seed: u64,
        layers: usize,
        d_model: usize,
        d_ff: Option<usize>,
        heads: usize,
        max_seq: usize,
    ) -> PyResult<Self> {
        let cfg = build_cfg(ffn_kind, layers, d_model, d_ff, heads, max_seq)?;
        Ok(PyBackbone { inner: Backbone::init(cfg, seed).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        locas_core::ckpt::save_backbone(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyBackbone {
            inner: locas_core::ckpt::load_backbone(std::path::Path::new(path)).map_err(err)?,
        })
    }

    /// Per-position logits for a token sequence.
    fn logits(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let (logits, _) = forward_with_trace(&self.inner, &tokens).map_err(err)?;
        Ok(logits)
    }

    /// Mean next-token NLL (nats) of a byte document prefix.
    fn nll(&self, doc: &[u8]) -> PyResult<f64> {
        let mut tokens = vec![locas_core::backbone::BOS_TOKEN];
        tokens.extend(doc.iter().map(|&b| b as usize));
        let (logits, _) = forward_with_trace(&self.inner, &tokens).map_err(err)?;
        let scored: Vec<Vec<f64>> = logits[..logits.len() - 1].to_vec();
        let targets: Vec<usize> = tokens[1..].to_vec();
        Ok(locas_core::backbone::lm_loss(&scored, &targets))
    }

    fn config(&self) -> std::collections::HashMap<String, String> {
        let c = &self.inner.cfg;
        let mut m = std::collections::HashMap::new();
        m.insert("layers".into(), c.layers.to_string());
        m.insert("d_model".into(), c.d_model.to_string());
        m.insert("d_ff".into(), c.d_ff.to_string());
        m.insert("heads".into(), c.heads.to_string());
        m.insert("vocab".into(), c.vocab.to_string());
        m.insert(
            "ffn_kind".into(),
            if c.ffn_kind == FfnKind::Glu { "glu".into() } else { "mlp".into() },
        );
        m.insert("max_seq".into(), c.max_seq.to_string());
        m
    }
}

/// Sideway GLU memory attached to a backbone.
#[pyclass(name = "GluMemory")]
struct PyGluMemory {
    inner: LocasGluMemory,
}

#[pymethods]
impl PyGluMemory {
    /// Initialize from the backbone's activation pattern on a chunk.
    #[staticmethod]
    #[pyo3(signature = (backbone, chunk, r=16, strategy="topk", seed=0, epsilon=1e-2))]
    fn init_from_chunk(
        backbone: &PyBackbone,
        chunk: Vec<usize>,
        r: usize,
        strategy: &str,
        seed: u64,
        epsilon: f64,
    ) -> PyResult<Self> {
        let strategy = InitStrategy::parse(strategy).map_err(err)?;
        let bb = &backbone.inner;
        let inner = if strategy == InitStrategy::NormalizedActivation {
            let (grads, acts) =
                locas_core::backbone::hidden_gradient_trace(bb, &Attachment::None, &chunk)
                    .map_err(err)?;
            init_glu_memory(bb, &acts, Some(&grads), r, strategy, seed, epsilon).map_err(err)?
        } else {
            let (_, trace) = forward_with_trace(bb, &chunk).map_err(err)?;
            init_glu_memory(bb, &trace, None, r, strategy, seed, epsilon).map_err(err)?
        };
        Ok(PyGluMemory { inner })
    }

    /// Combined-model logits (backbone + memory).
    fn logits(&self, backbone: &PyBackbone, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let (logits, _) = locas_core::memory::combined_forward(
            &backbone.inner,
            &Attachment::Glu(&self.inner),
            &tokens,
        )
        .map_err(err)?;
        Ok(logits)
    }

    /// Plain-SGD memory updates on a chunk; returns the loss history.
    fn grad_step(
        &mut self,
        backbone: &PyBackbone,
        tokens: Vec<usize>,
        lr: f64,
        steps: usize,
    ) -> PyResult<Vec<f64>> {
        memory_grad_step(
            &backbone.inner,
            &mut MemoryRefMut::Glu(&mut self.inner),
            &tokens,
            lr,
            steps,
        )
        .map_err(err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn selection(&self, layer: usize) -> Vec<usize> {
        self.inner.layers[layer].selection.clone()
    }

    fn tau(&self, layer: usize) -> f64 {
        self.inner.layers[layer].tau
    }
}

/// Growable MLP memory driven by the expansion-compression cycle.
#[pyclass(name = "MlpMemory")]
struct PyMlpMemory {
    inner: LocasMlpMemory,
}

#[pymethods]
impl PyMlpMemory {
    #[new]
    #[pyo3(signature = (layers, d_model, epsilon=1e-2))]
    fn new(layers: usize, d_model: usize, epsilon: f64) -> Self {
        PyMlpMemory { inner: LocasMlpMemory::empty(layers, d_model, epsilon) }
    }

    /// Per-token slot appends with periodic compression; returns
    /// (token_index, layer, r_before, r_after) events.
    #[pyo3(signature = (backbone, tokens, n_capacity=64, n_target=32, per_token=false))]
    fn run_cycle(
        &mut self,
        backbone: &PyBackbone,
        tokens: Vec<usize>,
        n_capacity: usize,
        n_target: usize,
        per_token: bool,
    ) -> PyResult<Vec<(usize, usize, usize, usize)>> {
        let policy = nlsvd::CyclePolicy {
            n_capacity,
            n_target,
            cadence: if per_token { nlsvd::Cadence::PerToken } else { nlsvd::Cadence::PerSpan },
        };
        let events = nlsvd::run_expansion_compression_cycle(
            &backbone.inner,
            &mut self.inner,
            &tokens,
            &policy,
        )
        .map_err(err)?;
        Ok(events
            .into_iter()
            .map(|e| (e.token_index, e.layer, e.r_before, e.r_after))
            .collect())
    }

    fn ranks(&self) -> Vec<usize> {
        self.inner.layers.iter().map(|l| l.rank()).collect()
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn logits(&self, backbone: &PyBackbone, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let (logits, _) = locas_core::memory::combined_forward(
            &backbone.inner,
            &Attachment::Mlp(&self.inner),
            &tokens,
        )
        .map_err(err)?;
        Ok(logits)
    }
}

/// Non-linear SVD compression of a two-layer ReLU memory.
/// `keys` is d×m (slot keys in columns), `values` is m×d (slot values in
/// rows). Returns (reduced_keys, reduced_values, report_json).
#[pyfunction]
#[pyo3(signature = (keys, values, n, drop_threshold=1e-8))]
fn nl_svd_compress(
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    n: usize,
    drop_threshold: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, String)> {
    let k = matrix_from_rows(keys)?;
    let v = matrix_from_rows(values)?;
    let (rk, rv, report) = nlsvd::nl_svd_compress(&k, &v, n, drop_threshold).map_err(err)?;
    Ok((matrix_to_rows(&rk), matrix_to_rows(&rv), report.to_json_line()))
}

/// Extra parameters introduced by a method.
#[pyfunction]
fn param_count(method: &str, layers: usize, d: usize, m: usize, r: usize) -> PyResult<usize> {
    let method = Method::parse(method).map_err(err)?;
    Ok(harness::param_count_raw(method, layers, d, m, r))
}

/// Synthetic corpus: a list of byte documents.
#[pyfunction]
#[pyo3(signature = (seed=0, n_docs=8, doc_len=16384, vocab_skew=1.0))]
fn make_corpus<'py>(
    py: Python<'py>,
    seed: u64,
    n_docs: usize,
    doc_len: usize,
    vocab_skew: f64,
) -> Vec<Bound<'py, PyBytes>> {
    corpus::make_synthetic_corpus(seed, n_docs, doc_len, vocab_skew)
        .into_iter()
        .map(|d| PyBytes::new(py, &d))
        .collect()
}

/// Streaming evaluation of one document. Returns
/// (records, final_quarter_nll) where each record is
/// (method, doc_id, position, context_len, nll, ppl).
#[pyfunction]
#[pyo3(signature = (backbone, doc, method="trunc", strategy="topk", r=16, lr=None, chunk_size=256, window=256, steps_per_chunk=1, seed=0, checkpoint_every=1024))]
#[allow(clippy::too_many_arguments)]
fn stream_eval(
    backbone: &PyBackbone,
    doc: &[u8],
    method: &str,
    strategy: &str,
    r: usize,
    lr: Option<f64>,
    chunk_size: usize,
    window: usize,
    steps_per_chunk: usize,
    seed: u64,
    checkpoint_every: usize,
) -> PyResult<(Vec<(String, usize, usize, usize, f64, f64)>, f64)> {
    let method = Method::parse(method).map_err(err)?;
    let mut run = RunConfig::desk_default(method, seed);
    run.strategy = InitStrategy::parse(strategy).map_err(err)?;
    run.r = r;
    if let Some(lr) = lr {
        run.lr = lr;
    }
    run.chunk_size = chunk_size;
    run.window = window;
    run.steps_per_chunk = steps_per_chunk;
    run.checkpoint_every = checkpoint_every;
    let result = harness::stream_eval(&backbone.inner, &run, doc, 0).map_err(err)?;
    let records = result
        .records
        .into_iter()
        .map(|r| (r.method, r.doc_id, r.position, r.context_len, r.nll, r.ppl))
        .collect();
    Ok((records, result.final_quarter_nll))
}

#[pymodule]
fn locas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyGluMemory>()?;
    m.add_class::<PyMlpMemory>()?;
    m.add_function(wrap_pyfunction!(nl_svd_compress, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(make_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(stream_eval, m)?)?;
    Ok(())
}
