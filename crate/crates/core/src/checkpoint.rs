//! Binary checkpoint format for parameter banks and single models.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "DCA1"                      4 bytes
//! version u32                        currently 1
//! granularity tag u8                 0=neuron .. 4=model
//! n u16                              instances per component
//! component_count u32
//! per component:
//!   slot_count u64
//!   n arrays of slot_count f64
//! crc32 u32                          of every byte after the magic
//! ```
//!
//! A single model is stored as a modelwise checkpoint with n = 1 and one
//! component. Readers reject bad magic and CRC mismatches.

use crate::bank::DcaParameterBank;
use crate::error::{DcaError, Result};
use crate::model::{Granularity, ModelSpec};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DCA1";
pub const FORMAT_VERSION: u32 = 1;

/// Raw checkpoint contents, decoupled from any model spec.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub version: u32,
    pub granularity: Granularity,
    pub n: usize,
    /// `components[c][i]` = instance i of component c.
    pub components: Vec<Vec<Vec<f64>>>,
}

impl CheckpointData {
    pub fn from_bank(bank: &DcaParameterBank) -> Self {
        CheckpointData {
            version: FORMAT_VERSION,
            granularity: bank.granularity(),
            n: bank.n,
            components: bank.instances.clone(),
        }
    }

    /// Wrap one flat parameter vector as a single-model checkpoint.
    pub fn from_single_model(params: Vec<f64>) -> Self {
        CheckpointData {
            version: FORMAT_VERSION,
            granularity: Granularity::Modelwise,
            n: 1,
            components: vec![vec![params]],
        }
    }

    /// Wrap n independently trained flat parameter vectors (a deep ensemble)
    /// as a modelwise checkpoint.
    pub fn from_ensemble(members: Vec<Vec<f64>>) -> Result<Self> {
        if members.is_empty() {
            return Err(DcaError::Data("ensemble checkpoint needs members".into()));
        }
        let len = members[0].len();
        if members.iter().any(|m| m.len() != len) {
            return Err(DcaError::Dimension("ensemble members differ in length".into()));
        }
        Ok(CheckpointData {
            version: FORMAT_VERSION,
            granularity: Granularity::Modelwise,
            n: members.len(),
            components: vec![members],
        })
    }

    pub fn is_single_model(&self) -> bool {
        self.n == 1 && self.components.len() == 1
    }

    /// Extract the single flat parameter vector, if this is one.
    pub fn single_model(&self) -> Result<Vec<f64>> {
        if !self.is_single_model() {
            return Err(DcaError::Format(format!(
                "checkpoint holds {} instances x {} components, not a single model",
                self.n,
                self.components.len()
            )));
        }
        Ok(self.components[0][0].clone())
    }

    /// Rebuild a bank, validating component sizes against the model spec's
    /// partition at the stored granularity.
    pub fn into_bank(self, spec: &ModelSpec, seed: u64) -> Result<DcaParameterBank> {
        DcaParameterBank::from_instances(spec, self.granularity, self.components, seed)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.version.to_le_bytes());
        body.push(self.granularity.tag());
        body.extend_from_slice(&(self.n as u16).to_le_bytes());
        body.extend_from_slice(&(self.components.len() as u32).to_le_bytes());
        for comp in &self.components {
            let slots = comp.first().map(|a| a.len()).unwrap_or(0) as u64;
            body.extend_from_slice(&slots.to_le_bytes());
            for inst in comp {
                for v in inst {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(4 + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = inspect(bytes)?;
        if !header.crc_ok {
            return Err(DcaError::Format(format!(
                "checkpoint CRC mismatch: stored {:#010x}, computed {:#010x}",
                header.stored_crc, header.computed_crc
            )));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(DcaError::Format(format!(
                "unsupported checkpoint version {}",
                version
            )));
        }
        let granularity = Granularity::from_tag(cur.u8()?)?;
        let n = cur.u16()? as usize;
        if n == 0 {
            return Err(DcaError::Format("checkpoint declares n = 0 instances".into()));
        }
        let comp_count = cur.u32()? as usize;
        let mut components = Vec::with_capacity(comp_count);
        for _ in 0..comp_count {
            let slots = cur.u64()? as usize;
            let mut comp = Vec::with_capacity(n);
            for _ in 0..n {
                let mut arr = Vec::with_capacity(slots);
                for _ in 0..slots {
                    arr.push(cur.f64()?);
                }
                comp.push(arr);
            }
            components.push(comp);
        }
        if cur.pos != bytes.len() - 4 {
            return Err(DcaError::Format(format!(
                "checkpoint has {} trailing bytes at offset {}",
                bytes.len() - 4 - cur.pos,
                cur.pos
            )));
        }
        Ok(CheckpointData { version, granularity, n, components })
    }
}

/// Header fields and CRC status, for `inspect-checkpoint`. Does not decode
/// the parameter payload.
#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    pub version: u32,
    pub granularity: Granularity,
    pub n: usize,
    pub component_count: usize,
    pub component_slots: Vec<usize>,
    pub stored_crc: u32,
    pub computed_crc: u32,
    pub crc_ok: bool,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(DcaError::Format(format!(
                "checkpoint truncated: wanted {} bytes at offset {}, file has {}",
                len,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse header fields and verify the CRC without decoding parameters.
pub fn inspect(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DcaError::Format(format!(
            "bad checkpoint magic at offset 0: expected {:?}, got {:?}",
            MAGIC,
            &bytes[..bytes.len().min(4)]
        )));
    }
    if bytes.len() < 4 + 4 + 1 + 2 + 4 + 4 {
        return Err(DcaError::Format(format!(
            "checkpoint truncated: {} bytes is below the minimum header size",
            bytes.len()
        )));
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed_crc = crc32fast::hash(body);

    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    let granularity = Granularity::from_tag(cur.u8()?)?;
    let n = cur.u16()? as usize;
    let component_count = cur.u32()? as usize;
    let mut component_slots = Vec::with_capacity(component_count);
    for _ in 0..component_count {
        let slots = cur.u64()? as usize;
        component_slots.push(slots);
        let skip = slots
            .checked_mul(n)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| DcaError::Format("component size overflows".into()))?;
        cur.take(skip)?;
    }
    Ok(CheckpointHeader {
        version,
        granularity,
        n,
        component_count,
        component_slots,
        stored_crc,
        computed_crc,
        crc_ok: stored_crc == computed_crc,
    })
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    fs::write(path, data.encode())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    CheckpointData::decode(&bytes)
}
