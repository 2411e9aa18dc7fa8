//! Checkpoint container: magic "SWNC", version u16, a 64-bit fingerprint of
//! the canonical config text, then named f32 tensor records until EOF. Holds
//! parameters (`param.*`), optimizer moments (`adam.m.*` / `adam.v.*`), and
//! scalar run state (`state.*`).

use std::path::Path;

use crate::bytes::{push_f32s, push_u16, push_u32, push_u64, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

pub const MAGIC: [u8; 4] = *b"SWNC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub fingerprint: u64,
    pub records: Vec<Record>,
}

impl Snapshot {
    pub fn new(fingerprint: u64) -> Self {
        Snapshot { fingerprint, records: Vec::new() }
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.records.push(Record { name: name.to_string(), dims: dims.to_vec(), data });
    }

    pub fn push_scalar(&mut self, name: &str, v: f64) {
        self.push(name, &[1], vec![v as f32]);
    }

    /// Adds every parameter of `store` under `prefix` (e.g. "param.").
    pub fn push_store<E: Scalar>(&mut self, prefix: &str, store: &ParamStore<E>) {
        for name in store.names() {
            let t = store.get(&name).unwrap();
            let data = t.to_f64_vec().iter().map(|&v| v as f32).collect();
            self.push(&format!("{prefix}{name}"), t.shape(), data);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint has no {name:?} record")))?;
        if r.data.len() != 1 {
            return Err(Error::format(format!("{name:?} is not a scalar record")));
        }
        Ok(r.data[0] as f64)
    }

    /// Writes the `prefix`-named records back into matching store
    /// parameters; each parameter must be present with its exact shape.
    pub fn restore_store<E: Scalar>(&self, prefix: &str, store: &ParamStore<E>) -> Result<()> {
        for name in store.names() {
            let full = format!("{prefix}{name}");
            let rec = self.get(&full).ok_or_else(|| {
                Error::format(format!("checkpoint is missing parameter record {full:?}"))
            })?;
            let t = store.get(&name).unwrap();
            if rec.dims != t.shape() {
                return Err(Error::shape(format!(
                    "checkpoint record {full:?} has dims {:?}, parameter wants {:?}",
                    rec.dims,
                    t.shape()
                )));
            }
            let cast: Vec<E> = rec.data.iter().map(|&v| E::from_f64(v as f64)).collect();
            t.set_data(&cast)?;
        }
        Ok(())
    }
}

pub fn encode(snap: &Snapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u16(&mut out, VERSION);
    push_u64(&mut out, snap.fingerprint);
    for r in &snap.records {
        push_u16(&mut out, r.name.len() as u16);
        out.extend_from_slice(r.name.as_bytes());
        push_u32(&mut out, r.dims.len() as u32);
        for &d in &r.dims {
            push_u32(&mut out, d as u32);
        }
        push_f32s(&mut out, &r.data);
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Snapshot> {
    let mut r = ByteReader::new(buf);
    r.magic(&MAGIC, "checkpoint")?;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported, this build reads {VERSION}"
        )));
    }
    let mut snap = Snapshot::new(r.u64("config fingerprint")?);
    while r.remaining() > 0 {
        let name_len = r.u16("record name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
            .map_err(|e| Error::format(format!("record name is not utf-8: {e}")))?;
        let ndim = r.u32(&format!("ndim of {name:?}"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            dims.push(r.u32(&format!("dim {i} of {name:?}"))? as usize);
        }
        let n: usize = dims.iter().product();
        let data = r.f32_payload(n, &format!("record {name:?}"))?;
        snap.records.push(Record { name, dims, data });
    }
    Ok(snap)
}

pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    Ok(std::fs::write(path, encode(snap))?)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    decode(&std::fs::read(path)?)
}

/// Loads and insists the stored fingerprint equals `expected`; the error
/// shows both so a config mixup is obvious.
pub fn read_matching(path: &Path, expected: u64) -> Result<Snapshot> {
    let snap = read_snapshot(path)?;
    if snap.fingerprint != expected {
        return Err(Error::config(format!(
            "checkpoint fingerprint {:016x} does not match this config's {:016x}; \
             it was saved under different settings",
            snap.fingerprint, expected
        )));
    }
    Ok(snap)
}
