//! `GAFW` checkpoint files.
//!
//! Layout (little-endian): magic `GAFW`, u32 version, u32 length + UTF-8
//! config block of `key=value` lines, then per array: u32 length + UTF-8 path,
//! u32 dim count, u32 dims, values. Version 1 stores `f32` values; version 2
//! stores `f64` and is used when training state must resume exactly.

use std::collections::BTreeMap;

use super::model::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GAFW";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub params: Params,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self, version: u32) -> Result<Vec<u8>> {
        if version != VERSION_F32 && version != VERSION_F64 {
            return Err(Error::Format(format!("unknown checkpoint version {version}")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, version);
        let block: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &block);
        for (path, t) in &self.params.arrays {
            put_str(&mut out, path);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                if version == VERSION_F32 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing GAFW magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION_F32 && version != VERSION_F64 {
            return Err(Error::Format(format!("unknown checkpoint version {version}")));
        }
        let mut config = BTreeMap::new();
        for line in r.string()?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without `=`: {line}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let mut arrays = BTreeMap::new();
        while r.pos < bytes.len() {
            let path = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = if version == VERSION_F32 {
                r.take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            } else {
                r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            };
            arrays.insert(path, Tensor { shape, data });
        }
        Ok(Checkpoint { config, params: Params { arrays } })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
