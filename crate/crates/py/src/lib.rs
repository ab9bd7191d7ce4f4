//! Python bindings: box geometry, clustering scores, the alignment schedule,
//! a checkpoint-backed detector and an in-process entry to the `moc` CLI.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moc_core::cli::{self, Cli};
use moc_core::detector::{self, Checkpoint, DetectorParams};
use moc_core::eval::cluster::{self, AmiNormalizer};
use moc_core::eval::report::{self, EvalConfig};
use moc_core::geometry::{self as geo, BoundingBox, ZWhere};
use moc_core::schedule::{self, ScheduleParams};
use moc_core::synthgen::{load_dataset, Dataset};
use moc_core::MocError;

fn to_py(err: MocError) -> PyErr {
    match err {
        MocError::Io { .. } => PyOSError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn norm_of(name: &str) -> PyResult<AmiNormalizer> {
    match name {
        "max" => Ok(AmiNormalizer::Max),
        "mean" => Ok(AmiNormalizer::Mean),
        other => Err(PyValueError::new_err(format!("unknown normalizer {other:?}, expected \"max\" or \"mean\""))),
    }
}

type Quad = (f64, f64, f64, f64);

fn bbox((x0, y0, x1, y1): Quad) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1)
}

fn quad(b: BoundingBox) -> Quad {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

/// (width, height, center_x, center_y) to (x_min, y_min, x_max, y_max).
#[pyfunction]
fn zwhere_to_box(z: Quad) -> Quad {
    quad(geo::zwhere_to_box(&ZWhere::new(z.0, z.1, z.2, z.3)))
}

#[pyfunction]
fn box_to_zwhere(b: Quad) -> Quad {
    let z = geo::box_to_zwhere(&bbox(b));
    (z.width, z.height, z.center_x, z.center_y)
}

#[pyfunction]
fn iou(a: Quad, b: Quad) -> f64 {
    geo::iou(&bbox(a), &bbox(b))
}

#[pyfunction]
fn center_divergence(pred: Quad, gt: Quad) -> PyResult<f64> {
    geo::center_divergence(&bbox(pred), &bbox(gt)).map_err(to_py)
}

#[pyfunction]
fn mutual_information(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    cluster::mutual_information(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, normalizer = "max"))]
fn adjusted_mutual_information(a: Vec<usize>, b: Vec<usize>, normalizer: &str) -> PyResult<f64> {
    cluster::adjusted_mutual_information(&a, &b, norm_of(normalizer)?).map_err(to_py)
}

/// Bounding-box matching score of predicted boxes against motion boxes.
#[pyfunction]
fn bbms(pred: Vec<Quad>, motion: Vec<Quad>) -> f64 {
    let p: Vec<BoundingBox> = pred.into_iter().map(bbox).collect();
    let m: Vec<BoundingBox> = motion.into_iter().map(bbox).collect();
    schedule::bbms(&p, &m)
}

/// Alignment level from the mean bbms and mean box counts.
#[pyfunction]
#[pyo3(signature = (bbms, count, motion_count, bbms_slack = 0.1, count_slack = 1.25))]
fn delta_align(bbms: f64, count: f64, motion_count: f64, bbms_slack: f64, count_slack: f64) -> PyResult<f64> {
    let params = ScheduleParams { bbms_slack, count_slack };
    params.validate().map_err(to_py)?;
    Ok(schedule::delta_align(bbms, count, motion_count, &params))
}

#[pyfunction]
fn lambda_align(delta: f64) -> f64 {
    schedule::lambda_align(delta)
}

/// Trained detector loaded from a checkpoint.
#[pyclass(module = "moc")]
struct Detector {
    checkpoint: Checkpoint,
    params: DetectorParams,
}

fn open_dataset(path: PathBuf, params: &DetectorParams) -> PyResult<(Dataset, moc_core::geometry::Frame)> {
    let data = load_dataset(&path).map_err(to_py)?;
    let (h, w) = (params.config.frame_height, params.config.frame_width);
    if (data.config.height, data.config.width) != (h, w) {
        return Err(PyValueError::new_err(format!(
            "dataset frames are {}x{} but the checkpoint expects {h}x{w}",
            data.config.height, data.config.width
        )));
    }
    let bg = cli::evaluation_background(&data).map_err(to_py)?;
    Ok((data, bg))
}

#[pymethods]
impl Detector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&path).map_err(to_py)?;
        let params = checkpoint.params().map_err(to_py)?;
        Ok(Self { checkpoint, params })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.checkpoint.mode.as_str()
    }

    #[getter]
    fn step(&self) -> usize {
        self.checkpoint.step
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Detections on one test-split frame as dicts with `cell`, `box`,
    /// `pres` and `enc`.
    fn detect<'py>(
        &self,
        py: Python<'py>,
        dataset: PathBuf,
        sequence: usize,
        frame: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (data, bg) = open_dataset(dataset, &self.params)?;
        let img = data
            .test
            .get(sequence)
            .and_then(|s| s.sequence.frames().get(frame))
            .ok_or_else(|| PyValueError::new_err(format!("no test frame {frame} in sequence {sequence}")))?;
        let dets = detector::detect(&self.params, img, &bg).map_err(to_py)?;
        dets.into_iter()
            .map(|d| {
                let dict = PyDict::new(py);
                dict.set_item("cell", d.cell)?;
                dict.set_item("box", quad(d.bbox))?;
                dict.set_item("pres", d.pres)?;
                dict.set_item("enc", d.enc)?;
                Ok(dict)
            })
            .collect()
    }

    /// Test-split metrics as a dict, matching `moc evaluate --json`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let (data, bg) = open_dataset(dataset, &self.params)?;
        let r = report::evaluate(&self.params, &data.test, &bg, &EvalConfig::default()).map_err(to_py)?;
        let dict = PyDict::new(py);
        for (k, v) in [
            ("f_score", r.f_score),
            ("precision", r.precision),
            ("recall", r.recall),
            ("ap", r.ap),
            ("ami", r.ami),
            ("few_shot_n1", r.few_shot.n1),
            ("few_shot_n4", r.few_shot.n4),
            ("few_shot_n16", r.few_shot.n16),
            ("few_shot_n64", r.few_shot.n64),
        ] {
            dict.set_item(k, v)?;
        }
        Ok(dict)
    }

    fn __repr__(&self) -> String {
        format!("Detector(mode={:?}, step={}, params={})", self.mode(), self.step(), self.num_params())
    }
}

/// Runs the CLI in-process on `args` (without the program name) and returns
/// `(exit_code, stdout)`. Errors go to the returned code, not exceptions.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (u8, String) {
    let argv = std::iter::once("moc".to_string()).chain(args);
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => return (if e.use_stderr() { 2 } else { 0 }, e.to_string()),
    };
    py.detach(|| {
        let mut out = Vec::new();
        let code = match cli::run(parsed, &mut out) {
            Ok(()) => 0,
            Err(e) => {
                out.extend_from_slice(format!("error: {e}\n").as_bytes());
                cli::exit_code(&e)
            }
        };
        (code, String::from_utf8_lossy(&out).into_owned())
    })
}

#[pymodule]
fn moc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(zwhere_to_box, m)?)?;
    m.add_function(wrap_pyfunction!(box_to_zwhere, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(center_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(bbms, m)?)?;
    m.add_function(wrap_pyfunction!(delta_align, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_align, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Detector>()?;
    Ok(())
}
