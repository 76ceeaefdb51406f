//! `.mslc` checkpoint container: `"MSLC"`, u32 version, u32 tensor count,
//! then per tensor a u16 name length, UTF-8 name, u32 ndim, u32 dims and
//! little-endian f32 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use msl_tensor::{ParamStore, Tensor};

use super::config::ModelConfig;
use super::net::MslModel;
use crate::error::{MslError, Result};

pub const MSLC_MAGIC: &[u8; 4] = b"MSLC";
pub const MSLC_VERSION: u32 = 1;
/// Entry holding the model config as TOML text, one byte per element.
pub const CONFIG_ENTRY: &str = "meta.config";

pub fn encode_mslc(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MSLC_MAGIC);
    out.extend_from_slice(&MSLC_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| MslError::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| MslError::Format("truncated checkpoint".into()))?;
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
}

pub fn decode_mslc(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MSLC_MAGIC {
        return Err(MslError::Format("not an MSLC checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MSLC_VERSION {
        return Err(MslError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| MslError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| MslError::Format(format!("tensor `{name}` too large")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| MslError::Format("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(MslError::Format("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

pub fn write_mslc(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_mslc(entries)?;
    let tmp = path.with_extension("mslc.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_mslc(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_mslc(&fs::read(path)?)
}

pub fn text_entry(name: &str, text: &str) -> (String, Tensor<f32>) {
    let data: Vec<f32> = text.bytes().map(f32::from).collect();
    (name.to_string(), Tensor::new(vec![data.len()], data).expect("1-D"))
}

pub fn entry_text(t: &Tensor<f32>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(MslError::Format("metadata entry holds a non-byte value".into()))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| MslError::Format("metadata entry is not UTF-8".into()))
}

impl MslModel {
    /// Config entry followed by every parameter in store order.
    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut entries = vec![text_entry(CONFIG_ENTRY, &self.config.to_toml())];
        entries.extend(self.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        entries
    }

    /// Rebuilds a model from checkpoint entries. Entries outside the model
    /// namespace (`meta.*`, `adam.*`, `train.*`) are ignored.
    pub fn from_entries(entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let cfg = entries
            .iter()
            .find(|(n, _)| n == CONFIG_ENTRY)
            .ok_or_else(|| MslError::Format(format!("checkpoint lacks `{CONFIG_ENTRY}`")))?;
        let config = ModelConfig::from_toml(&entry_text(&cfg.1)?)?;
        let mut model = MslModel::new(config, 0)?;
        let mut store = ParamStore::new();
        for (n, t) in entries {
            if !is_meta(n) {
                store.insert(n.clone(), t.clone());
            }
        }
        model.params.load_from(&store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_mslc(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&read_mslc(path)?)
    }
}

pub fn is_meta(name: &str) -> bool {
    name.starts_with("meta.") || name.starts_with("adam.") || name.starts_with("train.")
}
