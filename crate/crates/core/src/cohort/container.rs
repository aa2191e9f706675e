//! Binary per-subject container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | field | encoding |
//! |---|---|
//! | magic | `ROSAC1` |
//! | version | u32 |
//! | f0, bandwidth, chirp duration, frame rate, c | f64 × 5 |
//! | samples per chirp | u32 |
//! | chirp count | u64 |
//! | beat samples | f32 (re, im) pairs, chirp after chirp |
//! | SpO₂ length, samples | u64, u8 × len |
//! | label block length, label block | u64, UTF-8 JSON |
//! | CRC-32 of everything above | u32 |

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::radar::{BeatSignalCube, RadarConfig};
use super::SubjectRecord;
use crate::error::{Error, Result};
use crate::types::{AnnotatedEvent, Hypnogram, SleepStage, SpO2Trace};

pub const MAGIC: &[u8; 6] = b"ROSAC1";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "rosa";

/// Human-readable labels stored in the container and in the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBlock {
    pub id: String,
    pub epoch_len: f64,
    pub events: Vec<AnnotatedEvent>,
    pub hypnogram: Vec<SleepStage>,
}

impl LabelBlock {
    pub fn of(record: &SubjectRecord) -> Self {
        Self {
            id: record.id.clone(),
            epoch_len: record.truth_hypnogram.epoch_len,
            events: record.truth_events.clone(),
            hypnogram: record.truth_hypnogram.epochs.clone(),
        }
    }
}

pub fn encode_record(record: &SubjectRecord) -> Result<Vec<u8>> {
    let cfg = &record.config;
    let beat = &record.beat;
    let labels = serde_json::to_vec(&LabelBlock::of(record))?;
    let mut out = Vec::with_capacity(64 + beat.data.len() * 8 + record.spo2.len() + labels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.f0, cfg.bandwidth, cfg.chirp_duration, cfg.frame_rate, cfg.c] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.samples_per_chirp.to_le_bytes());
    out.extend_from_slice(&(beat.chirps as u64).to_le_bytes());
    for z in &beat.data {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out.extend_from_slice(&(record.spo2.len() as u64).to_le_bytes());
    out.extend_from_slice(&record.spo2.samples);
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    out.extend_from_slice(&labels);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Truncated(what))
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<SubjectRecord> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let config = RadarConfig {
        f0: r.f64("radar config")?,
        bandwidth: r.f64("radar config")?,
        chirp_duration: r.f64("radar config")?,
        frame_rate: r.f64("radar config")?,
        c: r.f64("radar config")?,
        samples_per_chirp: r.u32("radar config")?,
    };
    let chirps = r.len("chirp count")?;
    let n = config.samples_per_chirp as usize;
    let count = chirps.checked_mul(n).ok_or(Error::Truncated("beat samples"))?;
    let raw = r.take(count.checked_mul(8).ok_or(Error::Truncated("beat samples"))?, "beat samples")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| {
            Complex::new(
                f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            )
        })
        .collect();
    let spo2_len = r.len("SpO2 length")?;
    let spo2 = r.take(spo2_len, "SpO2 samples")?.to_vec();
    let label_len = r.len("label block length")?;
    let label_bytes = r.take(label_len, "label block")?;
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let labels: LabelBlock = serde_json::from_slice(label_bytes)?;
    Ok(SubjectRecord {
        id: labels.id,
        config,
        beat: BeatSignalCube {
            samples_per_chirp: n,
            chirps,
            data,
        },
        spo2: SpO2Trace::from_raw(spo2),
        truth_events: labels.events,
        truth_hypnogram: Hypnogram::new(labels.hypnogram, labels.epoch_len)?,
    })
}

pub fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{EXTENSION}"))
}

/// Writes the container and its JSON sidecar.
pub fn save_record(dir: &Path, record: &SubjectRecord) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = record_path(dir, &record.id);
    fs::write(&path, encode_record(record)?)?;
    let mut sidecar = serde_json::to_string_pretty(&LabelBlock::of(record))?;
    sidecar.push('\n');
    fs::write(dir.join(format!("{}.json", record.id)), sidecar)?;
    Ok(path)
}

pub fn load_record(path: &Path) -> Result<SubjectRecord> {
    decode_record(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CohortIndex {
    subjects: Vec<String>,
}

/// Saves every record plus an index that fixes subject order.
pub fn save_cohort(dir: &Path, records: &[SubjectRecord]) -> Result<()> {
    for r in records {
        save_record(dir, r)?;
    }
    let index = CohortIndex {
        subjects: records.iter().map(|r| r.id.clone()).collect(),
    };
    let mut s = serde_json::to_string_pretty(&index)?;
    s.push('\n');
    fs::write(dir.join("cohort.json"), s)?;
    Ok(())
}

pub fn load_cohort(dir: &Path) -> Result<Vec<SubjectRecord>> {
    let index: CohortIndex = serde_json::from_str(&fs::read_to_string(dir.join("cohort.json"))?)?;
    index
        .subjects
        .iter()
        .map(|id| load_record(&record_path(dir, id)))
        .collect()
}
