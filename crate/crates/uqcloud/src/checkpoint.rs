//! Single-file network checkpoints.
//!
//! Layout: the 8-byte magic `UQCPNT1\0`; a little-endian `u64` metadata
//! length; UTF-8 `key = value` metadata (`classes` plus the run
//! settings); then every parameter in name order as a `u32` name length,
//! the name, a `u32` rank, `u64` extents and little-endian `f32` data.

use std::path::Path;

use uqcloud_core::arch::SegNet;
use uqcloud_core::{RngStream, Tensor};

use crate::settings::{format_pairs, parse_pairs, Settings};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UQCPNT1\0";

#[derive(Debug)]
pub struct Checkpoint {
    pub settings: Settings,
    pub net: SegNet<f32>,
}

pub fn encode(settings: &Settings, net: &SegNet<f32>) -> Vec<u8> {
    let mut pairs = vec![("classes".to_string(), net.classes().to_string())];
    pairs.extend(settings.to_pairs());
    let meta = format_pairs(&pairs);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let mut params: Vec<_> = net.params().iter().map(|(_, p)| p).collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, settings: &Settings, net: &SegNet<f32>) -> Result<()> {
    crate::cloud_io::write_file(path, &encode(settings, net))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(Error::io(path))?, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated checkpoint at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.path, "length overflows usize"))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let meta_len = r.u64()?;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    let mut pairs = parse_pairs(meta, path)?;
    let classes = match pairs.iter().position(|(k, _)| k == "classes") {
        Some(i) => pairs
            .remove(i)
            .1
            .parse()
            .map_err(|_| Error::format(path, "bad class count"))?,
        None => return Err(Error::format(path, "metadata lacks `classes`")),
    };
    let settings = Settings::from_pairs(&pairs, None)?;
    settings.validate()?;
    let mut net = SegNet::new(settings.train.net_config(classes), &mut RngStream::new(0))?;
    let mut seen = Vec::new();
    while !r.done() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, format!("tensor `{name}` is too large")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(path, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        net.set_param(&name, Tensor::new(&shape, data)?)
            .map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))?;
        seen.push(name);
    }
    seen.sort();
    seen.dedup();
    if seen.len() != net.params().len() {
        let missing = net
            .params()
            .iter()
            .map(|(_, p)| &p.name)
            .find(|n| seen.binary_search(n).is_err());
        return Err(Error::format(
            path,
            format!("checkpoint lacks parameter `{}`", missing.map_or("?", |s| s)),
        ));
    }
    Ok(Checkpoint { settings, net })
}
