//! Checkpoint serialization.
//!
//! Binary layout (little-endian):
//! `magic "UGDSEG\0\0"` (8 bytes), `version u32`, config echo as
//! length-prefixed TOML, parameter count, then per parameter: name
//! (length-prefixed UTF-8), trainable flag (u8), rank, dims, and row-major
//! `f32` values. Saving a loaded checkpoint reproduces identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UGDSEG\0\0";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, v: &[u8]) {
    put_u32(out, v.len() as u32);
    out.extend_from_slice(v);
}

pub fn serialize(store: &ParamStore, config: &NetworkConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config_toml = toml::to_string(config).map_err(|e| Error::config(format!("config echo failed: {e}")))?;
    put_bytes(&mut out, config_toml.as_bytes());
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.push(p.trainable as u8);
        put_u32(&mut out, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(&mut out, d as u32);
        }
        for &v in &p.value {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(store: &ParamStore, config: &NetworkConfig, path: &Path) -> Result<()> {
    let bytes = serialize(store, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

pub fn load(path: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let config_toml = String::from_utf8(r.bytes()?).map_err(|_| Error::Load("config echo is not UTF-8".into()))?;
    let config: NetworkConfig =
        toml::from_str(&config_toml).map_err(|e| Error::Load(format!("bad config echo: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?).map_err(|_| Error::Load("parameter name is not UTF-8".into()))?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut value = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(4)?;
            value.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        store
            .add(&name, shape, value, trainable)
            .map_err(|e| Error::Load(format!("duplicate or malformed parameter: {e}")))?;
    }
    if r.pos != r.buf.len() {
        return Err(Error::Load("trailing bytes after last parameter".into()));
    }
    Ok((config, store))
}

/// Rebuild a network from a checkpoint, verifying that the stored parameter
/// set matches the architecture rebuilt from the config echo.
pub fn load_network(path: &Path) -> Result<Network> {
    let (config, store) = load(path)?;
    let mut net = Network::new(config, 0)?;
    let mut mismatches = Vec::new();
    for p in net.store.iter() {
        match store.get(&p.name) {
            Ok(q) if q.shape == p.shape => {}
            Ok(q) => mismatches.push(format!("{} shape {:?} != expected {:?}", p.name, q.shape, p.shape)),
            Err(_) => mismatches.push(format!("{} missing", p.name)),
        }
    }
    for q in store.iter() {
        if !net.store.contains(&q.name) {
            mismatches.push(format!("{} unexpected", q.name));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Load(format!(
            "checkpoint does not match architecture: {}",
            mismatches.join("; ")
        )));
    }
    for p in net.store.iter_mut() {
        p.value.copy_from_slice(&store.get(&p.name)?.value);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn tiny() -> Network {
        let cfg = NetworkConfig {
            stage_channels: [2, 4, 8, 16],
            input_height: 16,
            input_width: 16,
            heads: [1, 1, 1, 1],
            ..Default::default()
        };
        Network::new(cfg, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&net.store, &net.config, &p1).unwrap();
        let loaded = load_network(&p1).unwrap();
        save(&loaded.store, &loaded.config, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_architecture_lists_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny();
        let path = dir.path().join("a.ckpt");
        // Tamper: store claims a different architecture than its config echo.
        let mut store = ParamStore::new();
        for p in net.store.iter().skip(1) {
            store.add(&p.name, p.shape.clone(), p.value.clone(), p.trainable).unwrap();
        }
        save(&store, &net.config, &path).unwrap();
        let err = load_network(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stem.w"), "{msg}");
    }

    #[test]
    fn garbage_file_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Load(_))));
    }
}
