//! Binary dataset container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "QRT1"                      4 bytes
//! version                     u32 (= 1)
//! header length               u32
//! header                      UTF-8 JSON (device, states, shot count, splits, rng, seed)
//! per shot:
//!     I samples               N × f32
//!     Q samples               N × f32
//!     truth length            u32
//!     truth                   UTF-8 JSON {"prep_label": [...], "qubits": [...]}
//! crc32                       u32, IEEE CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, TraceDataset};
use crate::error::{Error, Result};
use crate::rng::GENERATOR_NAME;
use crate::sim::{DeviceConfig, GroundTruth, Level, QubitTruth, RawShot};

pub const MAGIC: [u8; 4] = *b"QRT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    device: DeviceConfig,
    states: Vec<Vec<Level>>,
    shots_per_state: usize,
    n_shots: usize,
    n_samples: usize,
    split: Vec<Split>,
    rng: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    prep_label: Vec<Level>,
    qubits: Vec<QubitTruth>,
}

pub fn encode_dataset(ds: &TraceDataset) -> Result<Vec<u8>> {
    let n = ds.n_samples();
    let header = Header {
        device: ds.device.clone(),
        states: ds.states.clone(),
        shots_per_state: ds.shots_per_state,
        n_shots: ds.len(),
        n_samples: n,
        split: ds.split.clone(),
        rng: GENERATOR_NAME.to_string(),
        seed: ds.device.seed,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + ds.len() * (8 * n + 256));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_block(&mut out, &header);
    for shot in &ds.shots {
        if shot.i_samples.len() != n || shot.q_samples.len() != n {
            return Err(Error::Data(format!("shot has {} samples, expected {n}", shot.i_samples.len())));
        }
        for x in shot.i_samples.iter().chain(&shot.q_samples) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let rec = TruthRecord { prep_label: shot.prep_label.clone(), qubits: shot.truth.qubits.clone() };
        put_block(&mut out, &serde_json::to_vec(&rec)?);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_dataset(ds: &TraceDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TraceDataset> {
    decode_dataset(&fs::read(path)?)
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TraceDataset> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let stored_crc = || -> Option<u32> {
        let tail = bytes.len().checked_sub(4)?;
        Some(u32::from_le_bytes(bytes[tail..].try_into().ok()?))
    };
    let verify_crc = || -> Result<()> {
        let tail = bytes.len().saturating_sub(4);
        let computed = crc32fast::hash(&bytes[..tail]);
        match stored_crc() {
            Some(stored) if stored == computed => Ok(()),
            Some(stored) => Err(Error::Checksum { stored, computed }),
            None => Err(Error::Truncated("missing checksum".into())),
        }
    };

    let header_len = cur.u32("header length")? as usize;
    let header_bytes = cur.take(header_len, "header")?;
    let header: Header = match serde_json::from_slice(header_bytes) {
        Ok(h) => h,
        Err(e) => {
            verify_crc()?;
            return Err(Error::Format(format!("header: {e}")));
        }
    };

    let n = header.n_samples;
    let mut raw = Vec::with_capacity(header.n_shots);
    for s in 0..header.n_shots {
        let samples = cur.take(8 * n, &format!("samples of shot {s}"))?;
        let len = cur.u32("truth length")? as usize;
        let truth = cur.take(len, &format!("truth of shot {s}"))?;
        raw.push((samples, truth));
    }
    match bytes.len() - cur.pos {
        4 => {}
        r if r < 4 => return Err(Error::Truncated("missing checksum".into())),
        r => {
            verify_crc()?;
            return Err(Error::Format(format!("{} trailing bytes", r - 4)));
        }
    }
    verify_crc()?;

    if header.split.len() != header.n_shots
        || header.n_shots != header.states.len() * header.shots_per_state
        || header.device.n_samples() != n
    {
        return Err(Error::Format("header counts are inconsistent".into()));
    }
    if header.rng != GENERATOR_NAME {
        return Err(Error::Format(format!("unknown generator {:?}", header.rng)));
    }

    let shots = raw
        .into_iter()
        .map(|(samples, truth)| {
            let floats: Vec<f32> = samples
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (i, q) = floats.split_at(n);
            let rec: TruthRecord = serde_json::from_slice(truth)?;
            Ok(RawShot {
                i_samples: i.to_vec(),
                q_samples: q.to_vec(),
                truth: GroundTruth { qubits: rec.qubits },
                prep_label: rec.prep_label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TraceDataset {
        device: header.device,
        states: header.states,
        shots_per_state: header.shots_per_state,
        shots,
        split: header.split,
    })
}
