//! Python bindings: feature extraction, a model wrapper for embeddings and
//! the verification and diarization metrics.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use titanet::diarize::{compute_der, nme_sc_cluster_seeded, AffinityMatrix, DerConfig, Segment};
use titanet::encoder::EncoderConfig;
use titanet::features::{AudioSignal, FrameConfig, MelFrontend};
use titanet::io::{load_checkpoint, save_checkpoint, Checkpoint};
use titanet::pooldec::SpeakerEmbedding;
use titanet::train::utterance_features;
use titanet::verify::{compute_eer, compute_min_dcf, cosine_score, DcfConfig, ScoredTrials};
use titanet::{Error, ModelConfig, TitaNet};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::Eigen(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn frontend() -> PyResult<MelFrontend> {
    MelFrontend::new(FrameConfig::default()).map_err(to_py)
}

/// Log-mel features of a mono signal as a list of frames (80 values each).
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000, normalize = true))]
fn log_mel(samples: Vec<f64>, sample_rate: u32, normalize: bool) -> PyResult<Vec<Vec<f64>>> {
    let signal = AudioSignal::new(samples, sample_rate).map_err(to_py)?;
    let fe = frontend()?;
    let mel = if normalize {
        utterance_features(&fe, &signal)
    } else {
        fe.compute(&signal)
    }
    .map_err(to_py)?;
    Ok((0..mel.num_frames()).map(|t| mel.frame(t).to_vec()).collect())
}

fn scored(scores: Vec<f64>, targets: Vec<bool>) -> PyResult<ScoredTrials> {
    ScoredTrials::new(scores, targets).map_err(to_py)
}

/// Equal error rate and the threshold where it occurs.
#[pyfunction]
fn eer(scores: Vec<f64>, targets: Vec<bool>) -> PyResult<(f64, f64)> {
    compute_eer(&scored(scores, targets)?).map_err(to_py)
}

/// Normalized minimum detection cost and its threshold.
#[pyfunction]
#[pyo3(signature = (scores, targets, p_target = 0.01, c_fa = 1.0, c_miss = 1.0))]
fn min_dcf(scores: Vec<f64>, targets: Vec<bool>, p_target: f64, c_fa: f64, c_miss: f64) -> PyResult<(f64, f64)> {
    let cfg = DcfConfig { p_target, c_fa, c_miss };
    compute_min_dcf(&scored(scores, targets)?, &cfg).map_err(to_py)
}

fn segments(rows: Vec<(f64, f64, String)>) -> Vec<Segment> {
    rows.into_iter().map(|(a, b, s)| Segment::new(a, b, s)).collect()
}

/// Diarization error rate between `(start, end, speaker)` lists.
///
/// Returns `(der, missed, false_alarm, confusion, scored)`; the last four
/// are in seconds.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, collar = 0.25, ignore_overlap = true))]
fn der(
    reference: Vec<(f64, f64, String)>,
    hypothesis: Vec<(f64, f64, String)>,
    collar: f64,
    ignore_overlap: bool,
) -> PyResult<(f64, f64, f64, f64, f64)> {
    let cfg = DerConfig { collar, ignore_overlap };
    let r = compute_der(&segments(reference), &segments(hypothesis), &cfg).map_err(to_py)?;
    Ok((r.der, r.missed, r.false_alarm, r.confusion, r.scored))
}

/// Spectral clustering of a square affinity matrix. Returns `(labels, k)`.
#[pyfunction]
#[pyo3(signature = (affinity, max_speakers = 8, num_speakers = None, seed = 0))]
fn cluster(
    affinity: Vec<Vec<f64>>,
    max_speakers: usize,
    num_speakers: Option<usize>,
    seed: u64,
) -> PyResult<(Vec<usize>, usize)> {
    let n = affinity.len();
    if affinity.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("affinity matrix must be square"));
    }
    let a = AffinityMatrix::from_values(n, affinity.concat()).map_err(to_py)?;
    let r = nme_sc_cluster_seeded(&a, max_speakers, num_speakers, seed).map_err(to_py)?;
    Ok((r.labels, r.estimated_k))
}

/// Cosine similarity of two embeddings.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = SpeakerEmbedding::new(a).map_err(to_py)?;
    let b = SpeakerEmbedding::new(b).map_err(to_py)?;
    cosine_score(&a, &b).map_err(to_py)
}

/// Parameter count of a preset with a `classes`-way classification head.
#[pyfunction]
#[pyo3(signature = (preset, classes = 0))]
fn parameter_count(preset: &str, classes: usize) -> PyResult<usize> {
    let encoder = EncoderConfig::preset(preset).map_err(to_py)?;
    Ok(ModelConfig::new(encoder, classes).breakdown().total())
}

#[pyclass(name = "Model", module = "titanet_py")]
struct Model {
    inner: TitaNet,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset = "toy", classes = 0, seed = 0))]
    fn new(preset: &str, classes: usize, seed: u64) -> PyResult<Self> {
        let encoder = EncoderConfig::preset(preset).map_err(to_py)?;
        let inner = TitaNet::new(ModelConfig::new(encoder, classes), seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (_, inner) = load_checkpoint(path.as_ref()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&Checkpoint::from_model(&self.inner), path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.n_classes
    }

    /// Unit-length 192-dim embedding of a mono recording.
    #[pyo3(signature = (samples, sample_rate = 16000))]
    fn embed(&self, py: Python<'_>, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
        let signal = AudioSignal::new(samples, sample_rate).map_err(to_py)?;
        let fe = frontend()?;
        let model = &self.inner;
        py.detach(|| {
            let mel = utterance_features(&fe, &signal)?;
            model.extract_embedding(&mel)
        })
        .map(SpeakerEmbedding::into_vec)
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} parameters)", self.inner.config.encoder, self.inner.num_parameters())
    }
}

/// Module initializer; public so embedding applications and tests can
/// register it without importing a built extension.
#[pymodule]
pub fn titanet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(der, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_class::<Model>()?;
    m.add("EMBEDDING_DIM", titanet::pooldec::EMBEDDING_DIM)?;
    Ok(())
}
