//! Electrode graph: scalp montage, Gaussian-kernel adjacency and the
//! symmetrically normalized propagation operator used by the GCN layers.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// 30-channel subset of 10-20/10-10 positions as (name, inclination from the
/// vertex, azimuth) in degrees. Azimuth 0 points to the right ear, 90 to the
/// nasion.
const MONTAGE_30: [(&str, f64, f64); 30] = [
    ("Fp1", 72.0, 108.0),
    ("F3", 50.0, 129.0),
    ("F7", 72.0, 144.0),
    ("FC3", 38.0, 147.0),
    ("C3", 36.0, 180.0),
    ("C5", 54.0, 180.0),
    ("P3", 50.0, 231.0),
    ("P7", 72.0, 216.0),
    ("P9", 90.0, 220.0),
    ("PO7", 81.0, 234.0),
    ("PO3", 58.0, 247.0),
    ("O1", 72.0, 252.0),
    ("Oz", 72.0, 270.0),
    ("Pz", 36.0, 270.0),
    ("CPz", 18.0, 270.0),
    ("Fp2", 72.0, 72.0),
    ("Fz", 36.0, 90.0),
    ("F4", 50.0, 51.0),
    ("F8", 72.0, 36.0),
    ("FC4", 38.0, 33.0),
    ("FCz", 18.0, 90.0),
    ("Cz", 0.0, 0.0),
    ("C4", 36.0, 0.0),
    ("C6", 54.0, 0.0),
    ("P4", 50.0, 309.0),
    ("P8", 72.0, 324.0),
    ("P10", 90.0, 320.0),
    ("PO8", 81.0, 306.0),
    ("PO4", 58.0, 293.0),
    ("O2", 72.0, 288.0),
];

pub fn montage_30_names() -> [&'static str; 30] {
    MONTAGE_30.map(|(n, _, _)| n)
}

/// Unit-sphere electrode coordinates. 30 channels use the static 10-20 table;
/// other counts use a golden-angle spiral over the upper hemisphere starting
/// at the vertex.
pub fn build_montage(n_channels: usize) -> Result<Vec<[f64; 3]>> {
    if !(1..=64).contains(&n_channels) {
        return Err(Error::invalid(format!(
            "montage supports 1..=64 channels, got {n_channels}"
        )));
    }
    if n_channels == 30 {
        return Ok(MONTAGE_30
            .iter()
            .map(|&(_, incl, az)| {
                let (t, a) = (incl.to_radians(), az.to_radians());
                [t.sin() * a.cos(), t.sin() * a.sin(), t.cos()]
            })
            .collect());
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    Ok((0..n_channels)
        .map(|i| {
            let z = 1.0 - i as f64 / n_channels as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            [r * a.cos(), r * a.sin(), z]
        })
        .collect())
}

/// Gaussian-kernel adjacency `exp(-d^2 / 2 sigma^2)` with weights at or
/// below `threshold` dropped and no self-loops.
pub fn build_adjacency(coords: &[[f64; 3]], sigma: f64, threshold: f64) -> Result<Tensor> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must be in [0, 1), got {threshold}")));
    }
    let n = coords.len();
    if n == 0 {
        return Err(Error::invalid("no electrodes"));
    }
    let mut a = Tensor::zeros(&[n, n]);
    let mut connected = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = (0..3).map(|k| (coords[i][k] - coords[j][k]).powi(2)).sum();
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            if w > threshold {
                a.data_mut()[i * n + j] = w;
            }
        }
        if (0..n).any(|j| a.data()[i * n + j] > 0.0) {
            connected += 1;
        }
    }
    if threshold > 0.0 && connected < 2 && n > 1 {
        log::warn!("adjacency threshold {threshold} leaves {connected} connected nodes");
    }
    Ok(a)
}

/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        s => {
            return Err(Error::Shape {
                op: "normalize_adjacency",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let v = a.data();
    for i in 0..n {
        if v[i * n + i] != 0.0 {
            return Err(Error::invalid(format!("adjacency has self-loop at node {i}")));
        }
        for j in 0..n {
            let w = v[i * n + j];
            if w < 0.0 || !w.is_finite() {
                return Err(Error::invalid(format!("adjacency weight ({i},{j}) = {w}")));
            }
            if w != v[j * n + i] {
                return Err(Error::invalid(format!("adjacency is not symmetric at ({i},{j})")));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + v[i * n..(i + 1) * n].iter().sum::<f64>()).sqrt())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let w = v[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out.data_mut()[i * n + j] = inv_sqrt_deg[i] * w * inv_sqrt_deg[j];
        }
    }
    Ok(out)
}

/// Parse an `n x n` whitespace-separated adjacency matrix.
pub fn parse_adjacency(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::Format(format!("adjacency row {}: bad number {tok:?}", i + 1))
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format("adjacency file must hold a square matrix".into()));
    }
    let a = Tensor::new(vec![n, n], rows.concat())?;
    // validates symmetry and sign
    normalize_adjacency(&a)?;
    Ok(a)
}

pub fn read_adjacency(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjacency(&text)
}

/// Parameters of the default distance-kernel graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub sigma: f64,
    pub threshold: f64,
    pub adjacency_file: Option<std::path::PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            threshold: 0.3,
            adjacency_file: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElectrodeGraph {
    pub coords: Vec<[f64; 3]>,
    pub adjacency: Tensor,
    pub normalized: Tensor,
}

impl ElectrodeGraph {
    pub fn build(n_channels: usize, cfg: &GraphConfig) -> Result<Self> {
        let coords = build_montage(n_channels)?;
        let adjacency = match &cfg.adjacency_file {
            Some(p) => {
                let a = read_adjacency(p)?;
                if a.shape()[0] != n_channels {
                    return Err(Error::invalid(format!(
                        "adjacency file has {} nodes, model expects {n_channels}",
                        a.shape()[0]
                    )));
                }
                a
            }
            None => build_adjacency(&coords, cfg.sigma, cfg.threshold)?,
        };
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(Self {
            coords,
            adjacency,
            normalized,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Ascending eigenvalues of the normalized operator.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.normalized)
    }
}

pub fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
    let n = m.shape()[0];
    let mat = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    let mut ev: Vec<f64> = mat.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}
