//! Python module `voxresnet_py`: volume files, phantoms, network summaries,
//! tiled prediction, metrics and the command line, over flat lists.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use voxresnet::infer::{argmax_labels, plan_tiles, predict, VoxResNetModel};
use voxresnet::metrics::{avd, dice, evaluate_case, hd95};
use voxresnet::netspec::build_voxresnet;
use voxresnet::phantom::write_phantom_dataset;
use voxresnet::train::Checkpoint;
use voxresnet::volio::{read_labels, read_volume, write_volume};
use voxresnet::{Error, Volume};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Layer counts and identity of a network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSummary {
    pub convs: usize,
    pub deconvs: usize,
    pub strided_convs: usize,
    pub params: usize,
    pub schedule_hash: String,
}

pub fn network_summary(modalities: usize, classes: usize, width_scale: f64) -> voxresnet::Result<NetworkSummary> {
    let net = build_voxresnet(modalities, classes, width_scale)?;
    Ok(NetworkSummary {
        convs: net.conv_count(),
        deconvs: net.deconv_count(),
        strided_convs: net.strided_conv_count(),
        params: net.param_count(),
        schedule_hash: net.schedule_hash(),
    })
}

/// Tiled prediction of a `.vvol` input; writes probabilities and labels.
pub fn predict_files(
    checkpoint: &Path,
    input: &Path,
    out_prob: &Path,
    tile: usize,
    stride: usize,
) -> voxresnet::Result<Volume> {
    let model = VoxResNetModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let x = read_volume(input)?;
    let probs = predict(&model, &x, &plan_tiles(x.extents(), tile, stride)?)?;
    write_volume(&probs, out_prob)?;
    Ok(probs)
}

/// Per-class `(name, dc_percent, hd95_mm, avd_percent)` for two label files.
pub fn evaluate_files(pred: &Path, truth: &Path) -> voxresnet::Result<Vec<(String, f64, Option<f64>, Option<f64>)>> {
    let (p, t) = (read_labels(pred)?, read_labels(truth)?);
    let report = evaluate_case(&p, &t, t.spacing())?;
    Ok(report
        .classes
        .into_iter()
        .map(|c| (c.name, c.dc_percent, c.hd95_mm, c.avd_percent))
        .collect())
}

#[pyfunction]
#[pyo3(name = "network_summary")]
fn py_network_summary(modalities: usize, classes: usize, width_scale: f64) -> PyResult<(usize, usize, usize, usize, String)> {
    let s = network_summary(modalities, classes, width_scale).map_err(to_py)?;
    Ok((s.convs, s.deconvs, s.strided_convs, s.params, s.schedule_hash))
}

/// Returns `(extents, spacing, channel_names, data)` with `data` in C, D, H, W order.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn load_volume(path: PathBuf) -> PyResult<([usize; 3], [f64; 3], Vec<String>, Vec<f32>)> {
    let v = read_volume(&path).map_err(to_py)?;
    Ok((v.extents(), v.spacing(), v.channel_names().to_vec(), v.into_data()))
}

#[pyfunction]
fn save_volume(path: PathBuf, extents: [usize; 3], spacing: [f64; 3], channel_names: Vec<String>, data: Vec<f32>) -> PyResult<()> {
    let v = Volume::new(extents, spacing, channel_names, data).map_err(to_py)?;
    write_volume(&v, &path).map_err(to_py)
}

/// Returns `(extents, spacing, num_classes, labels)`.
#[pyfunction]
fn load_labels(path: PathBuf) -> PyResult<([usize; 3], [f64; 3], usize, Vec<u8>)> {
    let l = read_labels(&path).map_err(to_py)?;
    Ok((l.extents(), l.spacing(), l.num_classes(), l.data().to_vec()))
}

/// Writes a phantom dataset; returns the case ids.
#[pyfunction]
fn write_phantoms(dir: PathBuf, cases: usize, seed: u64, size: usize) -> PyResult<Vec<String>> {
    let m = write_phantom_dataset(&dir, cases, seed, [size; 3]).map_err(to_py)?;
    Ok(m.cases.into_iter().map(|c| c.id).collect())
}

/// Probability file written to `out_prob`; returns the argmax labels.
#[pyfunction]
#[pyo3(name = "predict", signature = (checkpoint, input, out_prob, tile = 80, stride = None))]
fn py_predict(checkpoint: PathBuf, input: PathBuf, out_prob: PathBuf, tile: usize, stride: Option<usize>) -> PyResult<Vec<u8>> {
    let stride = stride.unwrap_or((tile / 2).max(1));
    let probs = predict_files(&checkpoint, &input, &out_prob, tile, stride).map_err(to_py)?;
    Ok(argmax_labels(&probs).map_err(to_py)?.data().to_vec())
}

#[pyfunction]
#[pyo3(name = "evaluate")]
#[allow(clippy::type_complexity)]
fn py_evaluate(pred: PathBuf, truth: PathBuf) -> PyResult<Vec<(String, f64, Option<f64>, Option<f64>)>> {
    evaluate_files(&pred, &truth).map_err(to_py)
}

#[pyfunction]
#[pyo3(name = "dice")]
fn py_dice(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    dice(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(name = "avd")]
fn py_avd(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    avd(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(name = "hd95")]
fn py_hd95(a: Vec<bool>, b: Vec<bool>, extents: [usize; 3], spacing: [f64; 3]) -> PyResult<f64> {
    hd95(&a, &b, extents, spacing).map_err(to_py)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    voxresnet::cli::run(std::iter::once("voxresnet".to_string()).chain(args))
}

#[pymodule]
fn voxresnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(py_network_summary, m)?)?;
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_function(wrap_pyfunction!(save_volume, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    m.add_function(wrap_pyfunction!(write_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(py_predict, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(py_dice, m)?)?;
    m.add_function(wrap_pyfunction!(py_avd, m)?)?;
    m.add_function(wrap_pyfunction!(py_hd95, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
