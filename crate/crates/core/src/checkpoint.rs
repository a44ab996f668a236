//! Model checkpoints.
//!
//! A checkpoint is a directory with two files:
//!
//! * `manifest.txt`: one `key = value` pair per line, keys sorted, `#`
//!   starts a comment line. Holds architecture config, seeds, step count,
//!   loss weights and generator state.
//! * `weights.bin`: named tensors in a flat little-endian layout:
//!
//! ```text
//! magic   b"RDWB"
//! version u32 (= 1)
//! count   u32
//! count x {
//!     name_len u32, name [u8; name_len] (UTF-8),
//!     rank u32, dims [u64; rank],
//!     data [f32; prod(dims)] row-major
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::rng::{Generator, GeneratorState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAGIC: &[u8; 4] = b"RDWB";
const VERSION: u32 = 1;

/// Ordered string key-value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest(BTreeMap<String, String>);

impl Manifest {
    pub fn new() -> Self {
        Manifest(BTreeMap::new())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Config(format!("manifest `{key}` = {raw:?} is malformed")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Manifest) {
        for (k, v) in other.iter() {
            self.set(format!("{prefix}{k}"), v);
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Manifest {
        Manifest(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected `key = value`", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest(map))
    }

    /// FNV-1a hash over the sorted entries, used to compare architectures.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelCheckpoint {
    pub fn new(manifest: Manifest) -> Self {
        ModelCheckpoint { manifest, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.tensors.push((name.into(), tensor.cast()));
    }

    pub fn extend<T: Scalar>(&mut self, named: &[(String, Tensor<T>)]) {
        for (n, t) in named {
            self.push(n.clone(), t);
        }
    }

    /// Tensors whose name starts with `prefix`, prefix stripped, converted to `T`.
    pub fn tensors_with_prefix<T: Scalar>(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.cast())))
            .collect()
    }

    /// Stores architecture fields under `arch.` plus their fingerprint.
    pub fn set_architecture(&mut self, kind: &str, arch: &Manifest) {
        self.manifest.set("model.kind", kind);
        self.manifest.merge_prefixed("arch.", arch);
        self.manifest.set("model.arch_fingerprint", arch.fingerprint());
    }

    /// Fails with a config error naming the differing fields unless the
    /// stored architecture equals `arch`.
    pub fn check_architecture(&self, kind: &str, arch: &Manifest) -> Result<()> {
        let stored_kind = self.manifest.require("model.kind")?;
        if stored_kind != kind {
            return Err(Error::Config(format!("checkpoint holds a {stored_kind} model, expected {kind}")));
        }
        let stored = self.manifest.section("arch.");
        if stored.fingerprint() == arch.fingerprint() {
            return Ok(());
        }
        let mut diffs: Vec<String> = Vec::new();
        for (k, v) in arch.iter() {
            match stored.get(k) {
                Some(s) if s == v => {}
                s => diffs.push(format!("{k}: checkpoint {}, expected {v}", s.unwrap_or("<missing>"))),
            }
        }
        for (k, v) in stored.iter() {
            if arch.get(k).is_none() {
                diffs.push(format!("{k}: checkpoint {v}, not expected"));
            }
        }
        Err(Error::Config(format!("incompatible checkpoint architecture ({})", diffs.join("; "))))
    }

    pub fn add_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("param.{name}"), t);
        }
    }

    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load_named(&self.tensors_with_prefix("param."))
    }

    pub fn add_optimizer<T: Scalar>(&mut self, store: &ParamStore<T>, adam: &Adam<T>) {
        self.manifest.set("optim.step", adam.step);
        self.extend(&adam.named_state(store));
    }

    pub fn load_optimizer<T: Scalar>(&self, store: &ParamStore<T>, adam: &mut Adam<T>) -> Result<()> {
        let step = self.manifest.parse("optim.step")?;
        let blobs: Vec<(String, Tensor<T>)> =
            self.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).map(|(n, t)| (n.clone(), t.cast())).collect();
        adam.load_named_state(store, &blobs, step)
    }

    pub fn set_generator(&mut self, key: &str, rng: &Generator) {
        self.manifest.set(key, GeneratorState::capture(rng).encode());
    }

    pub fn generator(&self, key: &str) -> Result<Generator> {
        Ok(GeneratorState::decode(self.manifest.require(key)?)?.restore())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, self.manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
        let wpath = dir.join(WEIGHTS_FILE);
        let file = fs::File::create(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&wpath, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = Manifest::from_text(&text)?;
        let wpath = dir.join(WEIGHTS_FILE);
        let mut bytes = Vec::new();
        fs::File::open(&wpath)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&wpath, e))?;
        let tensors = decode_weights(&bytes).map_err(|m| Error::format(&wpath, m))?;
        Ok(ModelCheckpoint { manifest, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated weights file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_weights(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push((name.clone(), Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}
