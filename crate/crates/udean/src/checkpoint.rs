//! Versioned checkpoint container: the network configuration plus every
//! parameter array, keyed by `component/layer.kind` path. Parameters are
//! stored as little-endian f32, so a save/load round trip reproduces
//! single-precision forward passes bit for bit. Readers within the same
//! major version ignore unknown parameter names.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array5;

use crate::network::{ComponentSet, NetworkConfig, COMPONENT_KINDS};
use crate::tensor::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"UDCKPT";
const MAJOR_VERSION: u16 = 1;
const MINOR_VERSION: u16 = 0;

fn write_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

/// Serialize every component's parameters with the configuration.
pub fn save_checkpoint<T: Scalar>(net: &ComponentSet<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u16(&mut out, MAJOR_VERSION);
    write_u16(&mut out, MINOR_VERSION);
    let config = toml::to_string(&net.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    write_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());

    let n_params: usize = COMPONENT_KINDS.iter().map(|&k| net.store(k).entries().len()).sum();
    write_u32(&mut out, n_params as u32);
    for kind in COMPONENT_KINDS {
        let store = net.store(kind);
        for entry in store.entries() {
            let name = format!("{}/{}", kind.as_str(), entry.name);
            write_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            let dims = entry.value.dim();
            for d in [dims.0, dims.1, dims.2, dims.3, dims.4] {
                write_u64(&mut out, d as u64);
            }
            for &v in entry.value.iter() {
                out.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
            }
        }
    }

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// The configuration stored in a checkpoint, without loading parameters.
pub fn peek_config(path: &Path) -> Result<NetworkConfig> {
    let (config, _) = read_header(path, &std::fs::read(path).map_err(|e| Error::io(path, e))?)?;
    Ok(config)
}

fn read_header(path: &Path, buf: &[u8]) -> Result<(NetworkConfig, usize)> {
    if buf.len() < 10 || &buf[..6] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mut r = Reader { buf, pos: 6, path };
    let major = r.u16()?;
    if major != MAJOR_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint major version {major} not supported (expected {MAJOR_VERSION})"),
        ));
    }
    let _minor = r.u16()?;
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
    let config: NetworkConfig = toml::from_str(config_text)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    Ok((config, r.pos))
}

/// Build a fresh component set from the stored configuration and load
/// every parameter into it. Unknown stored names are skipped; missing
/// required parameters are an error.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ComponentSet<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let (config, pos) = read_header(path, &buf)?;
    let mut net = ComponentSet::<T>::new(config, 0)?;

    let mut r = Reader { buf: &buf, pos, path };
    let n_params = r.u32()? as usize;
    let mut loaded: std::collections::BTreeMap<String, Array5<f32>> = Default::default();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "non-UTF8 parameter name"))?
            .to_string();
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let mut arr = Array5::zeros((dims[0], dims[1], dims[2], dims[3], dims[4]));
        for (i, v) in arr.iter_mut().enumerate() {
            let off = i * 4;
            *v = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
        }
        loaded.insert(name, arr);
    }

    for kind in COMPONENT_KINDS {
        let store = net.store_mut(kind);
        for entry in store.entries_mut() {
            let name = format!("{}/{}", kind.as_str(), entry.name);
            let Some(arr) = loaded.get(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            };
            if arr.dim() != entry.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    entry.value.dim()
                )));
            }
            entry.value.zip_mut_with(arr, |dst, &src| *dst = T::from_f64(src as f64));
        }
    }
    Ok(net)
}
