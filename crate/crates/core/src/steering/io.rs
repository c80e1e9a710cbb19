//! Binary steering-vector files.
//!
//! All integers little-endian.
//!
//! ```text
//! magic            4 bytes  "STVS"
//! format_version   u16      1
//! d_model          u32
//! n_sites          u32
//! source_period    i64
//! target_period    i64
//! n_source         u64
//! n_target         u64
//! model_hash       u64
//! method           u16 length + UTF-8
//! pooling          u16 length + UTF-8
//! hook_position    u16 length + UTF-8
//! sites            n_sites × (layer u32, sublayer u8: 0 attention_out, 1 ffn_out)
//! payload          n_sites × d_model × f32, in site order
//! checksum         32 bytes, SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{SteeringVectorSet, POOLING};
use crate::error::{Error, Result};
use crate::model::{HookSite, Model, Sublayer};
use crate::numerics::Vector;

pub const MAGIC: &[u8; 4] = b"STVS";
pub const FORMAT_VERSION: u16 = 1;
const CHECKSUM_LEN: usize = 32;

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::arg(format!("string too long: {s}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn encode(set: &SteeringVectorSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let d = u32::try_from(set.d_model).map_err(|_| Error::arg("d_model too large"))?;
    let n_sites = u32::try_from(set.vectors.len()).map_err(|_| Error::arg("too many sites"))?;
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&n_sites.to_le_bytes());
    buf.extend_from_slice(&set.source_period.to_le_bytes());
    buf.extend_from_slice(&set.target_period.to_le_bytes());
    buf.extend_from_slice(&(set.n_source as u64).to_le_bytes());
    buf.extend_from_slice(&(set.n_target as u64).to_le_bytes());
    buf.extend_from_slice(&set.model_hash.to_le_bytes());
    put_str(&mut buf, &set.method.to_string())?;
    put_str(&mut buf, &set.pooling)?;
    put_str(&mut buf, &set.hook_position)?;
    for site in set.vectors.keys() {
        let layer = u32::try_from(site.layer).map_err(|_| Error::arg("layer index too large"))?;
        buf.extend_from_slice(&layer.to_le_bytes());
        buf.push(match site.sublayer {
            Sublayer::AttentionOut => 0,
            Sublayer::FfnOut => 1,
        });
    }
    for v in set.vectors.values() {
        for x in v.as_slice() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.origin,
                format!("truncated file: needed {} bytes at offset {}", n, self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(self.origin, "header string is not UTF-8"))
    }
}

pub(crate) fn decode(data: &[u8], origin: &str) -> Result<SteeringVectorSet> {
    let body_len = data.len().saturating_sub(CHECKSUM_LEN);
    let mut r = Reader {
        data: &data[..body_len],
        pos: 0,
        origin,
    };
    if data.len() < MAGIC.len() + 2 + CHECKSUM_LEN {
        return Err(Error::format(origin, "truncated file: shorter than the fixed header"));
    }
    if r.take(4)? != MAGIC {
        return Err(Error::format(origin, "not a steering-vector file (bad magic)"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            origin,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let d_model = r.u32()? as usize;
    let n_sites = r.u32()? as usize;
    let source_period = r.i64()?;
    let target_period = r.i64()?;
    let n_source = r.u64()? as usize;
    let n_target = r.u64()? as usize;
    let model_hash = r.u64()?;
    let method_text = r.string()?;
    let pooling = r.string()?;
    let hook_position = r.string()?;
    let mut sites = Vec::with_capacity(n_sites.min(1 << 16));
    for _ in 0..n_sites {
        let layer = r.u32()? as usize;
        let sublayer = match r.take(1)?[0] {
            0 => Sublayer::AttentionOut,
            1 => Sublayer::FfnOut,
            b => return Err(Error::format(origin, format!("unknown sublayer code {b}"))),
        };
        sites.push(HookSite { layer, sublayer });
    }
    let payload_len = n_sites
        .checked_mul(d_model)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(origin, "payload size overflows"))?;
    let remaining = body_len - r.pos;
    if remaining < payload_len {
        return Err(Error::format(
            origin,
            format!("truncated file: payload needs {payload_len} bytes, {remaining} present"),
        ));
    }
    if remaining > payload_len {
        return Err(Error::format(origin, "unexpected trailing bytes before the checksum"));
    }
    let digest = Sha256::digest(&data[..body_len]);
    if digest.as_slice() != &data[body_len..] {
        return Err(Error::format(origin, "checksum mismatch: file is corrupted"));
    }
    let mut vectors = BTreeMap::new();
    for site in sites {
        let raw = r.take(d_model * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let v = Vector::new(values).map_err(|e| Error::format(origin, e.to_string()))?;
        if vectors.insert(site, v).is_some() {
            return Err(Error::format(origin, format!("site {site} appears twice")));
        }
    }
    let method = method_text
        .parse()
        .map_err(|e: Error| Error::format(origin, e.to_string()))?;
    let mut set = SteeringVectorSet::from_vectors(
        vectors,
        source_period,
        target_period,
        n_source,
        n_target,
        method,
        model_hash,
    )
    .map_err(|e| Error::format(origin, e.to_string()))?;
    set.pooling = if pooling.is_empty() { POOLING.into() } else { pooling };
    set.hook_position = hook_position;
    Ok(set)
}

pub fn save(set: &SteeringVectorSet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(set)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SteeringVectorSet> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data, &path.display().to_string())
}

/// [`load`], then require the set's `d_model` and sites to fit `model`.
pub fn load_for_model(path: &Path, model: &Model) -> Result<SteeringVectorSet> {
    let set = load(path)?;
    if set.d_model != model.config().d_model {
        return Err(Error::Mismatch(format!(
            "{} holds {}-dimensional vectors, model d_model is {}",
            path.display(),
            set.d_model,
            model.config().d_model
        )));
    }
    for s in set.vectors.keys() {
        s.validate(model.config())
            .map_err(|e| Error::Mismatch(e.to_string()))?;
    }
    Ok(set)
}
