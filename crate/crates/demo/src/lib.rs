//! Browser demo. Three operations, each a plain Rust function with a thin
//! `wasm_bindgen` wrapper: render a synthetic epoch, inspect the electrode
//! graph, and score a contrastive batch.

use gcvase::autograd::{Graph, Tensor};
use gcvase::graph::{symmetric_eigenvalues, ElectrodeGraph, GraphConfig};
use gcvase::losses::{clip_loss, Denominator, LossConfig, Noise, TauMode};
use gcvase::rng;
use gcvase::synthdata::{ground_truth, synth_epoch, SynthSpec};
use wasm_bindgen::prelude::*;

/// Preprocessed synthetic epoch, channel-major `channels x samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochView {
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
    pub alpha_hz: f64,
}

pub fn render_epoch(subject: usize, task: usize, snr: f64, index: usize, seed: u64) -> Result<EpochView, String> {
    let spec = SynthSpec {
        n_subjects: subject + 1,
        n_tasks: task + 1,
        epochs_per_cell: index + 1,
        snr,
        seed,
        ..SynthSpec::default()
    };
    let truth = ground_truth(&spec).map_err(|e| e.to_string())?;
    let e = synth_epoch(&spec, &truth, subject, task, index).map_err(|e| e.to_string())?;
    Ok(EpochView {
        channels: e.channels,
        samples: e.samples,
        data: e.data.iter().map(|&v| v as f32).collect(),
        alpha_hz: truth.alpha_hz[subject],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphView {
    /// Azimuthal projection of the electrodes onto the unit disc, `[x0, y0, x1, ...]`.
    pub positions: Vec<f64>,
    /// Retained edges as `[i, j, weight]` triples.
    pub edges: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub mean_degree: f64,
}

pub fn inspect_graph(sigma: f64, threshold: f64) -> Result<GraphView, String> {
    let cfg = GraphConfig {
        sigma,
        threshold,
        adjacency_file: None,
    };
    let g = ElectrodeGraph::build(30, &cfg).map_err(|e| e.to_string())?;
    let n = g.coords.len();
    let positions = g
        .coords
        .iter()
        .flat_map(|c| {
            let incl = c[2].clamp(-1.0, 1.0).acos() / std::f64::consts::FRAC_PI_2;
            let az = c[1].atan2(c[0]);
            [incl * az.cos(), incl * az.sin()]
        })
        .collect();
    let a = g.adjacency.data();
    let mut edges = Vec::new();
    let mut degree = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && a[i * n + j] > 0.0 {
                degree += 1;
                if i < j {
                    edges.extend([i as f64, j as f64, a[i * n + j]]);
                }
            }
        }
    }
    let ev = symmetric_eigenvalues(&g.normalized);
    Ok(GraphView {
        positions,
        edges,
        min_eigenvalue: ev.iter().cloned().fold(f64::INFINITY, f64::min),
        max_eigenvalue: ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_degree: degree as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastView {
    pub include_positive: f64,
    pub literal: f64,
    /// `ln K`, the include-positive loss of an uninformative encoder.
    pub chance: f64,
}

/// CLIP loss of K random unit-ish latents paired with noisy copies of
/// themselves; `noise` sets how far each positive drifts from its anchor.
pub fn score_contrast(k: usize, dim: usize, noise: f64, tau: f64, seed: u64) -> Result<ContrastView, String> {
    if k < 2 || dim == 0 {
        return Err(format!("need K >= 2 and dim >= 1, got K = {k}, dim = {dim}"));
    }
    let draws = Noise::sample(k, dim, &mut rng::stream(seed, "demo-contrast"));
    let a = draws.s.data().to_vec();
    let b: Vec<f64> = a.iter().zip(draws.t.data()).map(|(x, e)| x + noise * e).collect();
    let run = |denominator| -> Result<f64, String> {
        let cfg = LossConfig {
            denominator,
            tau_mode: TauMode::LogitScale,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let za = g.constant(Tensor::new(vec![k, dim], a.clone()).map_err(|e| e.to_string())?);
        let zb = g.constant(Tensor::new(vec![k, dim], b.clone()).map_err(|e| e.to_string())?);
        let t = g.constant(Tensor::vector(vec![tau]));
        let l = clip_loss(&mut g, za, zb, t, &cfg).map_err(|e| e.to_string())?;
        Ok(g.value(l).item() / 2.0)
    };
    Ok(ContrastView {
        include_positive: run(Denominator::IncludePositive)?,
        literal: run(Denominator::LiteralEq1)?,
        chance: (k as f64).ln(),
    })
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Returns `[alpha_hz, channels, samples, ...data]`.
#[wasm_bindgen(js_name = renderEpoch)]
pub fn render_epoch_js(subject: u32, task: u32, snr: f64, index: u32, seed: u32) -> Result<Vec<f32>, JsValue> {
    let v = render_epoch(subject as usize, task as usize, snr, index as usize, seed as u64).map_err(js)?;
    let mut out = vec![v.alpha_hz as f32, v.channels as f32, v.samples as f32];
    out.extend(v.data);
    Ok(out)
}

/// Returns `[min_ev, max_ev, mean_degree, n, x0, y0, ..., i, j, w, ...]`.
#[wasm_bindgen(js_name = inspectGraph)]
pub fn inspect_graph_js(sigma: f64, threshold: f64) -> Result<Vec<f64>, JsValue> {
    let v = inspect_graph(sigma, threshold).map_err(js)?;
    let mut out = vec![v.min_eigenvalue, v.max_eigenvalue, v.mean_degree, (v.positions.len() / 2) as f64];
    out.extend(v.positions);
    out.extend(v.edges);
    Ok(out)
}

/// Returns `[include_positive, literal, ln K]` per direction.
#[wasm_bindgen(js_name = scoreContrast)]
pub fn score_contrast_js(k: u32, dim: u32, noise: f64, tau: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    let v = score_contrast(k as usize, dim as usize, noise, tau, seed as u64).map_err(js)?;
    Ok(vec![v.include_positive, v.literal, v.chance])
}
