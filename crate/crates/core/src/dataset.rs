//! Epoch datasets and the `GCVZ` container.
//!
//! Layout (little-endian): magic `GCVZ`, version `u16`, then six `u32`
//! counts (epochs, channels, samples, subjects, tasks, paradigms), then per
//! epoch the subject/task/paradigm labels as `u16` followed by
//! `channels * samples` `f32` values in channel-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Epoch;

pub const MAGIC: &[u8; 4] = b"GCVZ";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 6 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub samples: usize,
    pub n_subjects: usize,
    pub n_tasks: usize,
    pub n_paradigms: usize,
    pub epochs: Vec<Epoch>,
}

impl Dataset {
    /// Build from epochs, inferring label counts as `max + 1`.
    pub fn from_epochs(epochs: Vec<Epoch>) -> Result<Self> {
        let first = epochs.first().ok_or_else(|| Error::invalid("dataset has no epochs"))?;
        let (channels, samples) = (first.channels, first.samples);
        if let Some(bad) = epochs
            .iter()
            .position(|e| e.channels != channels || e.samples != samples || e.data.len() != channels * samples)
        {
            return Err(Error::invalid(format!(
                "epoch {bad} does not match the {channels}x{samples} shape of epoch 0"
            )));
        }
        let count = |f: fn(&Epoch) -> u16| epochs.iter().map(|e| f(e) as usize + 1).max().unwrap_or(0);
        Ok(Self {
            channels,
            samples,
            n_subjects: count(|e| e.subject),
            n_tasks: count(|e| e.task),
            n_paradigms: count(|e| e.paradigm),
            epochs,
        })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn subjects(&self) -> Vec<u16> {
        self.epochs.iter().map(|e| e.subject).collect()
    }

    pub fn tasks(&self) -> Vec<u16> {
        self.epochs.iter().map(|e| e.task).collect()
    }

    pub fn paradigms(&self) -> Vec<u16> {
        self.epochs.iter().map(|e| e.paradigm).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            epochs: idx.iter().map(|&i| self.epochs[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            samples: self.samples,
            n_subjects: self.n_subjects,
            n_tasks: self.n_tasks,
            n_paradigms: self.n_paradigms,
            epochs: Vec::new(),
        }
    }

    /// Stable 64-bit digest of the stored (32-bit) contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.epochs {
            eat(&e.subject.to_le_bytes());
            eat(&e.task.to_le_bytes());
            eat(&e.paradigm.to_le_bytes());
            for v in &e.data {
                eat(&(*v as f32).to_le_bytes());
            }
        }
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per_epoch = 6 + 4 * self.channels * self.samples;
        let mut out = Vec::with_capacity(HEADER_LEN + per_epoch * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for c in [
            self.len(),
            self.channels,
            self.samples,
            self.n_subjects,
            self.n_tasks,
            self.n_paradigms,
        ] {
            let c = u32::try_from(c).map_err(|_| Error::invalid(format!("count {c} overflows u32")))?;
            out.extend_from_slice(&c.to_le_bytes());
        }
        for e in &self.epochs {
            if e.data.len() != self.channels * self.samples {
                return Err(Error::invalid("epoch shape differs from dataset header"));
            }
            out.extend_from_slice(&e.subject.to_le_bytes());
            out.extend_from_slice(&e.task.to_le_bytes());
            out.extend_from_slice(&e.paradigm.to_le_bytes());
            for v in &e.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (n, channels, samples) = (count(0), count(1), count(2));
        let (n_subjects, n_tasks, n_paradigms) = (count(3), count(4), count(5));
        if channels == 0 || samples == 0 {
            return Err(Error::Format("zero channels or samples in header".into()));
        }
        let per_epoch = 6 + 4 * channels * samples;
        let expected = HEADER_LEN + n * per_epoch;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let mut epochs = Vec::with_capacity(n);
        for e in 0..n {
            let rec = &bytes[HEADER_LEN + e * per_epoch..HEADER_LEN + (e + 1) * per_epoch];
            let label = |i: usize| u16::from_le_bytes([rec[2 * i], rec[2 * i + 1]]);
            let (subject, task, paradigm) = (label(0), label(1), label(2));
            if subject as usize >= n_subjects || task as usize >= n_tasks || paradigm as usize >= n_paradigms {
                return Err(Error::Format(format!(
                    "epoch {e}: labels ({subject}, {task}, {paradigm}) exceed header counts"
                )));
            }
            let data = rec[6..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            epochs.push(Epoch {
                channels,
                samples,
                data,
                subject,
                task,
                paradigm,
            });
        }
        Ok(Self {
            channels,
            samples,
            n_subjects,
            n_tasks,
            n_paradigms,
            epochs,
        })
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Ingest plain-CSV epochs: a manifest with header `file,subject,task,paradigm`
/// whose `file` column names per-epoch CSVs (one row per channel), resolved
/// relative to the manifest's directory.
pub fn read_csv_epochs(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| csv_err(manifest, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(manifest, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("manifest lacks a `{name}` column")))
    };
    let (cf, cs, ct, cp) = (col("file")?, col("subject")?, col("task")?, col("paradigm")?);
    let mut epochs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(manifest, e))?;
        let label = |c: usize| -> Result<u16> {
            rec.get(c)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("manifest row {}: bad label", row + 1)))
        };
        let path = base.join(rec.get(cf).unwrap_or_default().trim());
        let mut er = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        let mut data = Vec::new();
        let mut channels = 0;
        let mut samples = None;
        for line in er.records() {
            let line = line.map_err(|e| csv_err(&path, e))?;
            let vals: Vec<f64> = line
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("{}: non-numeric value", path.display())))?;
            if *samples.get_or_insert(vals.len()) != vals.len() {
                return Err(Error::Format(format!("{}: ragged rows", path.display())));
            }
            data.extend(vals);
            channels += 1;
        }
        epochs.push(Epoch {
            channels,
            samples: samples.unwrap_or(0),
            data,
            subject: label(cs)?,
            task: label(ct)?,
            paradigm: label(cp)?,
        });
    }
    Dataset::from_epochs(epochs)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}
