//! EEG preprocessing: windowed-sinc low-pass, zero-phase Butterworth
//! high-pass, decimation, epoching, STFT alignment and standardization.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Continuous multichannel recording, channel-major (`channels x samples`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub sample_rate: f64,
    pub channels: usize,
    pub samples: Vec<f64>,
    pub subject: u16,
    pub task: u16,
    pub paradigm: u16,
}

impl RawRecording {
    pub fn new(
        sample_rate: f64,
        channels: usize,
        samples: Vec<f64>,
        subject: u16,
        task: u16,
        paradigm: u16,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::invalid(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form {channels} non-empty channels",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("recording holds non-finite samples"));
        }
        Ok(Self {
            sample_rate,
            channels,
            samples,
            subject,
            task,
            paradigm,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.samples[c * t..(c + 1) * t]
    }
}

/// One fixed-length multichannel segment with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub channels: usize,
    pub samples: usize,
    /// Channel-major values, `channels * samples` long.
    pub data: Vec<f64>,
    pub subject: u16,
    pub task: u16,
    pub paradigm: u16,
}

impl Epoch {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn label(&self, axis: crate::batch::ClassAxis) -> u16 {
        match axis {
            crate::batch::ClassAxis::Subject => self.subject,
            crate::batch::ClassAxis::Task => self.task,
        }
    }
}

/// Number of taps for a sinc truncated after `lobes` zero crossings on each
/// side of the main lobe, rounded up to odd.
pub fn sinc_taps(cutoff_hz: f64, sample_rate_hz: f64, lobes: usize) -> usize {
    let n = (2.0 * lobes as f64 * sample_rate_hz / cutoff_hz).ceil() as usize;
    n | 1
}

/// Hamming-windowed sinc low-pass, normalized to unity DC gain.
pub fn design_sinc_lowpass(cutoff_hz: f64, sample_rate_hz: f64, n_taps: usize) -> Result<Vec<f64>> {
    let nyquist = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::invalid(format!(
            "low-pass cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if n_taps % 2 == 0 || n_taps < 3 {
        return Err(Error::invalid(format!("tap count must be odd and >= 3, got {n_taps}")));
    }
    let fc = cutoff_hz / sample_rate_hz;
    let m = (n_taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - m;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n_taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    for v in &mut h {
        *v /= s;
    }
    Ok(h)
}

fn mirror(i: isize, n: usize) -> usize {
    // whole-sample symmetric reflection, period 2(n-1)
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered (zero-delay) convolution of an odd-length linear-phase FIR with
/// mirrored edges.
pub fn fir_zero_phase(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let m = (taps.len() / 2) as isize;
    let n = x.len();
    (0..n as isize)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(k, h)| h * x[mirror(i + m - k as isize, n)])
                .sum()
        })
        .collect()
}

pub fn decimate(x: &[f64], factor: usize) -> Vec<f64> {
    x.iter().step_by(factor.max(1)).copied().collect()
}

/// First-order Butterworth high-pass (bilinear transform, prewarped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ButterworthHighpass {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
}

/// Edge padding used by the forward-backward pass: three times the filter's
/// coefficient count, as in the usual `filtfilt` convention.
pub const FILTFILT_PAD: usize = 6;

impl ButterworthHighpass {
    pub fn design(cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        let nyquist = sample_rate_hz / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(Error::invalid(format!(
                "high-pass cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
            )));
        }
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        let b0 = 1.0 / (1.0 + k);
        Ok(Self {
            b0,
            b1: -b0,
            a1: (k - 1.0) / (k + 1.0),
        })
    }

    /// Single causal pass with initial state `state`.
    fn run(&self, x: &[f64], mut state: f64) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + state;
                state = self.b1 * v - self.a1 * y;
                y
            })
            .collect()
    }

    /// Steady-state initial condition for a unit step.
    fn zi(&self) -> f64 {
        (self.b1 - self.a1 * self.b0) / (1.0 + self.a1)
    }

    /// Zero-phase forward-backward filtering with odd edge extension.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        if n <= FILTFILT_PAD {
            return Err(Error::invalid(format!(
                "signal of {n} samples is too short for filtfilt; need at least {}",
                FILTFILT_PAD + 1
            )));
        }
        let p = FILTFILT_PAD;
        let mut ext = Vec::with_capacity(n + 2 * p);
        ext.extend((1..=p).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=p).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.zi();
        let fwd = self.run(&ext, zi * ext[0]);
        let rev: Vec<f64> = fwd.into_iter().rev().collect();
        let bwd = self.run(&rev, zi * rev[0]);
        Ok(bwd.into_iter().rev().skip(p).take(n).collect())
    }
}

pub fn butter_highpass_filtfilt(x: &[f64], cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<f64>> {
    ButterworthHighpass::design(cutoff_hz, sample_rate_hz)?.filtfilt(x)
}

/// Slice a recording into windows. Windows longer than the recording yield
/// no epochs (with a warning).
pub fn epoch_signal(rec: &RawRecording, window: usize, stride: usize) -> Result<Vec<Epoch>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    let t = rec.len();
    if window > t {
        log::warn!("epoch window {window} exceeds recording length {t}; no epochs produced");
        return Ok(Vec::new());
    }
    let count = (t - window) / stride + 1;
    Ok((0..count)
        .map(|e| {
            let start = e * stride;
            let mut data = Vec::with_capacity(rec.channels * window);
            for c in 0..rec.channels {
                data.extend_from_slice(&rec.channel(c)[start..start + window]);
            }
            Epoch {
                channels: rec.channels,
                samples: window,
                data,
                subject: rec.subject,
                task: rec.task,
                paradigm: rec.paradigm,
            }
        })
        .collect())
}

pub const STFT_BINS: usize = 30;
pub const STFT_FRAMES: usize = 256;

/// Turn one 30-second single-channel window into a `30 x 256` log-magnitude
/// spectrogram: 2 s Hann frames, bins 1..=30, linear time interpolation.
/// Row-major output, one row per frequency bin.
pub fn stft_align(signal: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>> {
    let needed = (30.0 * sample_rate_hz).round() as usize;
    if signal.len() < needed {
        return Err(Error::invalid(format!(
            "stft_align needs a 30 s window ({needed} samples), got {}",
            signal.len()
        )));
    }
    let win = (2.0 * sample_rate_hz).round() as usize;
    if win / 2 < STFT_BINS {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate_hz} Hz gives only {} frequency bins",
            win / 2
        )));
    }
    let n = signal.len();
    // 75% overlap, tightened when needed so that at least 256 frames exist
    let hop = (win / 4).min((n - win) / (STFT_FRAMES - 1)).max(1);
    let frames = (n - win) / hop + 1;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut spec = vec![0.0; STFT_BINS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(signal[f * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..STFT_BINS {
            spec[k * frames + f] = buf[k + 1].norm().ln_1p();
        }
    }
    let mut out = vec![0.0; STFT_BINS * STFT_FRAMES];
    for k in 0..STFT_BINS {
        let row = &spec[k * frames..(k + 1) * frames];
        for j in 0..STFT_FRAMES {
            let pos = j as f64 * (frames - 1) as f64 / (STFT_FRAMES - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(frames - 1);
            let w = pos - lo as f64;
            out[k * STFT_FRAMES + j] = row[lo] * (1.0 - w) + row[hi] * w;
        }
    }
    Ok(out)
}

pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-channel zero mean, unit variance.
pub fn standardize(e: &Epoch) -> Epoch {
    let mut out = e.clone();
    for c in 0..e.channels {
        let ch = &mut out.data[c * e.samples..(c + 1) * e.samples];
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
        for v in ch.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Acquisition-side settings: low-pass at a simulated high rate, decimate,
/// then high-pass at the working rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub acquisition_rate: f64,
    pub decimation: usize,
    pub lowpass_hz: f64,
    pub lowpass_lobes: usize,
    pub highpass_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            acquisition_rate: 1024.0,
            decimation: 4,
            lowpass_hz: 204.8,
            lowpass_lobes: 5,
            highpass_hz: 0.1,
        }
    }
}

impl PreprocessConfig {
    pub fn output_rate(&self) -> f64 {
        self.acquisition_rate / self.decimation as f64
    }

    pub fn lowpass_taps(&self) -> Result<Vec<f64>> {
        let n = sinc_taps(self.lowpass_hz, self.acquisition_rate, self.lowpass_lobes);
        design_sinc_lowpass(self.lowpass_hz, self.acquisition_rate, n)
    }

    /// Full chain on one channel sampled at the acquisition rate.
    pub fn apply_channel(&self, taps: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let low = fir_zero_phase(x, taps);
        let dec = decimate(&low, self.decimation);
        butter_highpass_filtfilt(&dec, self.highpass_hz, self.output_rate())
    }

    /// Filter and decimate every channel of a recording.
    pub fn apply(&self, rec: &RawRecording) -> Result<RawRecording> {
        if (rec.sample_rate - self.acquisition_rate).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "recording is sampled at {} Hz, pipeline expects {} Hz",
                rec.sample_rate, self.acquisition_rate
            )));
        }
        let taps = self.lowpass_taps()?;
        let mut samples = Vec::new();
        for c in 0..rec.channels {
            samples.extend(self.apply_channel(&taps, rec.channel(c))?);
        }
        RawRecording::new(
            self.output_rate(),
            rec.channels,
            samples,
            rec.subject,
            rec.task,
            rec.paradigm,
        )
    }
}
