//! The `.spkt` trial container.
//!
//! Byte layout, all integers little-endian:
//!
//! | field            | type                     |
//! |------------------|--------------------------|
//! | magic            | `b"SPKT"`                |
//! | version          | u16, always 1            |
//! | t_raw            | u32                      |
//! | c_raw            | u32                      |
//! | sample rate (Hz) | f64                      |
//! | metadata length  | u32 (bytes)              |
//! | metadata         | UTF-8 JSON object        |
//! | counts           | `t_raw·c_raw` × u32, time-major |
//! | label payload    | only for sequence labels: u32 element count, then that many f64 |
//!
//! The JSON object carries `species, dataset, subject, region, task,
//! session, label`, where `label` is `null`, `{"class": k}` or
//! `{"sequence": {"dims": k}}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::record::{Label, MetadataRecord, SpikeRecording};

pub const MAGIC: &[u8; 4] = b"SPKT";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    species: String,
    dataset: String,
    subject: String,
    region: String,
    task: String,
    session: String,
    label: Option<LabelHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LabelHeader {
    Class(u32),
    Sequence { dims: usize },
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} exceeds u32")))
}

pub fn encode(rec: &SpikeRecording) -> Result<Vec<u8>> {
    rec.validate()?;
    let m = &rec.meta;
    let header = Header {
        species: m.species.clone(),
        dataset: m.dataset.clone(),
        subject: m.subject.clone(),
        region: m.region.clone(),
        task: m.task.clone(),
        session: m.session.clone(),
        label: rec.label.as_ref().map(|l| match l {
            Label::Class(k) => LabelHeader::Class(*k),
            Label::Sequence { dims, .. } => LabelHeader::Sequence { dims: *dims },
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(26 + json.len() + rec.counts.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(rec.t_raw, "t_raw")?.to_le_bytes());
    out.extend_from_slice(&to_u32(rec.c_raw, "c_raw")?.to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&to_u32(json.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&json);
    for c in &rec.counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    if let Some(Label::Sequence { values, .. }) = &rec.label {
        out.extend_from_slice(&to_u32(values.len(), "label length")?.to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Length { expected: usize::MAX, found: self.buf.len() })?;
        if end > self.buf.len() {
            return Err(Error::Length { expected: end, found: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<SpikeRecording> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file shorter than the magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let t_raw = r.u32()? as usize;
    let c_raw = r.u32()? as usize;
    let sample_rate_hz = r.f64()?;
    let meta_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata block: {e}")))?;
    let n = t_raw
        .checked_mul(c_raw)
        .ok_or_else(|| Error::Format(format!("count matrix {t_raw}x{c_raw} overflows")))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("count payload overflows".into()))?)?;
    let counts = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let label = match header.label {
        None => None,
        Some(LabelHeader::Class(k)) => Some(Label::Class(k)),
        Some(LabelHeader::Sequence { dims }) => {
            let len = r.u32()? as usize;
            let bytes = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("label payload overflows".into()))?)?;
            let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            Some(Label::Sequence { dims, values })
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let meta = MetadataRecord {
        species: header.species,
        dataset: header.dataset,
        subject: header.subject,
        region: header.region,
        task: header.task,
        session: header.session,
    };
    let rec = SpikeRecording { t_raw, c_raw, counts, sample_rate_hz, meta, label };
    rec.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(rec)
}

pub fn write_container(rec: &SpikeRecording, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(rec)?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<SpikeRecording> {
    decode(&fs::read(path)?)
}
