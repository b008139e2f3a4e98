//! Synthetic EEG with known subject and task structure.
//!
//! Each epoch is a subject-specific, spatially smooth mixing of four sources (an alpha
//! rhythm at the subject's peak frequency plus task ERP bumps), with 1/f
//! background noise at a target SNR. Subject identity therefore lives in the
//! spatial pattern and the alpha peak, task identity in the ERP time course.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{standardize, Epoch, PreprocessConfig, RawRecording};

pub const N_SOURCES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_tasks: usize,
    pub epochs_per_cell: usize,
    /// Signal-to-noise power ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub seed: u64,
    /// Rate the raw signal is generated at, before decimation.
    pub sample_rate: f64,
    pub n_channels: usize,
    /// Optional per-task multiplier on `snr`.
    pub task_snr_scale: Vec<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_tasks: 4,
            epochs_per_cell: 50,
            snr: 4.0,
            seed: 0,
            sample_rate: 1024.0,
            n_channels: 30,
            task_snr_scale: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_tasks == 0 || self.epochs_per_cell == 0 || self.n_channels == 0 {
            return Err(Error::invalid("synthetic counts must all be >= 1"));
        }
        if self.n_subjects > u16::MAX as usize || self.n_tasks > u16::MAX as usize {
            return Err(Error::invalid("too many subjects or tasks for 16-bit labels"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid(format!("snr must be > 0, got {}", self.snr)));
        }
        if !self.task_snr_scale.is_empty() && self.task_snr_scale.len() != self.n_tasks {
            return Err(Error::invalid(format!(
                "task_snr_scale has {} entries for {} tasks",
                self.task_snr_scale.len(),
                self.n_tasks
            )));
        }
        if self.task_snr_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("task_snr_scale entries must be > 0"));
        }
        Ok(())
    }

    fn task_snr(&self, task: usize) -> f64 {
        self.snr * self.task_snr_scale.get(task).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErpComponent {
    /// Seconds after epoch onset.
    pub latency: f64,
    /// Gaussian standard deviation in seconds.
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per subject, `n_channels x N_SOURCES` row-major.
    pub mixing: Vec<Vec<f64>>,
    pub alpha_hz: Vec<f64>,
    /// Per task, one component per source.
    pub templates: Vec<[ErpComponent; N_SOURCES]>,
    /// Noise amplitude relative to signal RMS at the base SNR.
    pub noise_level: f64,
}

/// Smooth scalp topographies: each source projects as a Gaussian blob
/// around a random scalp location, so neighbouring electrodes see similar
/// weights (volume conduction) while the sensor noise stays independent.
fn subject_truth(spec: &SynthSpec, subject: usize) -> Result<(Vec<f64>, f64)> {
    let coords = crate::graph::build_montage(spec.n_channels)?;
    let mut r = rng::stream_indexed(spec.seed, "synth-subject", subject as u64);
    let mut mixing = vec![0.0; spec.n_channels * N_SOURCES];
    for j in 0..N_SOURCES {
        let c = loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut r));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-6 {
                break [v[0] / n, v[1] / n, v[2].abs() / n];
            }
        };
        let width: f64 = r.random_range(0.4..0.8);
        let gain = if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(1.0..2.0);
        for (ch, x) in coords.iter().enumerate() {
            let d2: f64 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum();
            mixing[ch * N_SOURCES + j] = gain * (-d2 / (2.0 * width * width)).exp();
        }
    }
    let alpha = r.random_range(8.0..13.0);
    Ok((mixing, alpha))
}

fn task_template(spec: &SynthSpec, task: usize) -> [ErpComponent; N_SOURCES] {
    let mut r = rng::stream_indexed(spec.seed, "synth-task", task as u64);
    std::array::from_fn(|_| {
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        ErpComponent {
            latency: r.random_range(0.15..0.8),
            width: r.random_range(0.03..0.1),
            amplitude: sign * r.random_range(1.5..3.0),
        }
    })
}

pub fn ground_truth(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (mixing, alpha_hz) = (0..spec.n_subjects)
        .map(|s| subject_truth(spec, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(GroundTruth {
        mixing,
        alpha_hz,
        templates: (0..spec.n_tasks).map(|t| task_template(spec, t)).collect(),
        noise_level: 1.0 / spec.snr.sqrt(),
    })
}

/// White noise shaped to a 1/f power spectrum, unit variance.
fn pink_noise(n: usize, r: &mut impl Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(&mut *r), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, b) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *b /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| v / sd.max(1e-300)).collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// One raw epoch at the generation rate, before any filtering.
pub fn raw_epoch(
    spec: &SynthSpec,
    truth: &GroundTruth,
    subject: usize,
    task: usize,
    index: usize,
) -> Result<RawRecording> {
    let n = spec.sample_rate.round() as usize;
    let cell = (subject * spec.n_tasks + task) as u64;
    let mut r = rng::stream_indexed(spec.seed, "synth-cell", cell);
    // skip ahead deterministically: one phase draw and one noise seed per epoch
    let mut phase = 0.0;
    let mut noise_seed = 0u64;
    for _ in 0..=index {
        phase = r.random_range(0.0..2.0 * PI);
        noise_seed = r.random();
    }

    let fs = spec.sample_rate;
    let template = &truth.templates[task];
    let sources: Vec<Vec<f64>> = (0..N_SOURCES)
        .map(|j| {
            let c = template[j];
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let erp = c.amplitude * (-0.5 * ((t - c.latency) / c.width).powi(2)).exp();
                    let alpha = if j == 0 {
                        (2.0 * PI * truth.alpha_hz[subject] * t + phase).sin()
                    } else {
                        0.0
                    };
                    erp + alpha
                })
                .collect()
        })
        .collect();

    let m = &truth.mixing[subject];
    let mut samples = vec![0.0; spec.n_channels * n];
    for ch in 0..spec.n_channels {
        let row = &mut samples[ch * n..(ch + 1) * n];
        for (j, s) in sources.iter().enumerate() {
            let w = m[ch * N_SOURCES + j];
            for (o, v) in row.iter_mut().zip(s) {
                *o += w * v;
            }
        }
    }

    let snr = spec.task_snr(task);
    if snr.is_finite() {
        let signal_power = power(&samples);
        let scale = (signal_power / snr).sqrt();
        let mut nr = rng::stream_indexed(noise_seed, "synth-noise", 0);
        let mut planner = FftPlanner::new();
        for ch in 0..spec.n_channels {
            let noise = pink_noise(n, &mut nr, &mut planner);
            for (o, v) in samples[ch * n..(ch + 1) * n].iter_mut().zip(noise) {
                *o += scale * v;
            }
        }
    }
    RawRecording::new(fs, spec.n_channels, samples, subject as u16, task as u16, task as u16)
}

/// Run the acquisition chain on one raw epoch and standardize it.
pub fn preprocess_epoch(pre: &PreprocessConfig, taps: &[f64], raw: &RawRecording) -> Result<Epoch> {
    let mut data = Vec::new();
    for c in 0..raw.channels {
        data.extend(pre.apply_channel(taps, raw.channel(c))?);
    }
    let samples = data.len() / raw.channels;
    Ok(standardize(&Epoch {
        channels: raw.channels,
        samples,
        data,
        subject: raw.subject,
        task: raw.task,
        paradigm: raw.paradigm,
    }))
}

/// A single preprocessed epoch, identical to the one `generate` emits for
/// the same cell and index.
pub fn synth_epoch(spec: &SynthSpec, truth: &GroundTruth, subject: usize, task: usize, index: usize) -> Result<Epoch> {
    if subject >= spec.n_subjects || task >= spec.n_tasks {
        return Err(Error::invalid(format!(
            "cell (subject {subject}, task {task}) outside {}x{}",
            spec.n_subjects, spec.n_tasks
        )));
    }
    let pre = PreprocessConfig {
        acquisition_rate: spec.sample_rate,
        ..PreprocessConfig::default()
    };
    let raw = raw_epoch(spec, truth, subject, task, index)?;
    preprocess_epoch(&pre, &pre.lowpass_taps()?, &raw)
}

/// Full synthetic dataset, ordered subject-major then task then epoch.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    let truth = ground_truth(spec)?;
    let pre = PreprocessConfig {
        acquisition_rate: spec.sample_rate,
        ..PreprocessConfig::default()
    };
    let taps = pre.lowpass_taps()?;
    let mut epochs = Vec::with_capacity(spec.n_subjects * spec.n_tasks * spec.epochs_per_cell);
    for s in 0..spec.n_subjects {
        for t in 0..spec.n_tasks {
            for e in 0..spec.epochs_per_cell {
                let raw = raw_epoch(spec, &truth, s, t, e)?;
                epochs.push(preprocess_epoch(&pre, &taps, &raw)?);
            }
        }
    }
    Ok((Dataset::from_epochs(epochs)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(snr: f64) -> SynthSpec {
        SynthSpec {
            n_subjects: 2,
            n_tasks: 2,
            epochs_per_cell: 3,
            snr,
            n_channels: 6,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn single_epoch_matches_dataset() {
        let spec = tiny(4.0);
        let (ds, truth) = generate(&spec).unwrap();
        let e = synth_epoch(&spec, &truth, 1, 0, 2).unwrap();
        assert_eq!(e, ds.epochs[2 * 3 + 2]);
        assert!(synth_epoch(&spec, &truth, 2, 0, 0).is_err());
    }

    #[test]
    fn shapes_and_labels() {
        let (ds, truth) = generate(&tiny(4.0)).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!((ds.channels, ds.samples), (6, 256));
        assert_eq!(truth.mixing.len(), 2);
        let e = &ds.epochs[4];
        assert_eq!((e.subject, e.task, e.paradigm), (0, 1, 1));
        assert!(truth.alpha_hz.iter().all(|f| (8.0..13.0).contains(f)));
    }

    #[test]
    fn deterministic() {
        let a = generate(&tiny(4.0)).unwrap().0;
        let b = generate(&tiny(4.0)).unwrap().0;
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn subjects_have_distinct_mixing() {
        let t = ground_truth(&tiny(4.0)).unwrap();
        assert_ne!(t.mixing[0], t.mixing[1]);
        assert_ne!(t.templates[0], t.templates[1]);
    }

    #[test]
    fn noiseless_epochs_differ_only_by_phase() {
        let spec = tiny(f64::INFINITY);
        let truth = ground_truth(&spec).unwrap();
        let a = raw_epoch(&spec, &truth, 1, 0, 0).unwrap();
        let b = raw_epoch(&spec, &truth, 1, 0, 1).unwrap();
        assert_ne!(a.samples, b.samples);
        // removing the alpha source leaves identical signals
        let mut no_alpha = truth.clone();
        for m in &mut no_alpha.mixing {
            for ch in 0..spec.n_channels {
                m[ch * N_SOURCES] = 0.0;
            }
        }
        let a = raw_epoch(&spec, &no_alpha, 1, 0, 0).unwrap();
        let b = raw_epoch(&spec, &no_alpha, 1, 0, 1).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn snr_is_respected() {
        let spec = tiny(4.0);
        let truth = ground_truth(&spec).unwrap();
        let clean_spec = SynthSpec {
            snr: f64::INFINITY,
            ..spec.clone()
        };
        let noisy = raw_epoch(&spec, &truth, 0, 1, 2).unwrap();
        let clean = raw_epoch(&clean_spec, &truth, 0, 1, 2).unwrap();
        let noise: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        let ratio = power(&clean.samples) / power(&noise);
        assert!((ratio - 4.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&SynthSpec { snr: 0.0, ..tiny(1.0) }).is_err());
        assert!(generate(&SynthSpec { n_tasks: 0, ..tiny(1.0) }).is_err());
        assert!(generate(&SynthSpec { task_snr_scale: vec![1.0], ..tiny(1.0) }).is_err());
    }
}
