//! Parameter checkpoints: a text manifest plus a flat little-endian `f64` blob.
//!
//! Manifest layout, one parameter per line after the header:
//!
//! ```text
//! # sdmoe-checkpoint v1
//! <name>\t<d0>x<d1>x...\t<byte offset>
//! ```
//!
//! Offsets index into the blob, which is the concatenation of every
//! parameter's values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

const HEADER: &str = "# sdmoe-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, keep: impl Fn(&Parameter) -> bool) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| keep(p))
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        Self { entries }
    }

    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut manifest = String::from(HEADER);
        manifest.push('\n');
        let mut blob = Vec::new();
        for (name, t) in &self.entries {
            if name.is_empty() || name.contains(['\t', '\n', '\r']) {
                return Err(Error::Format(format!("unencodable parameter name {name:?}")));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok((manifest, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("missing checkpoint header".into()));
        }
        let mut entries = Vec::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(Error::Format(format!("line {}: expected 3 fields", lineno + 2)));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: bad shape: {e}", lineno + 2)))?;
            let offset: usize = offset
                .parse()
                .map_err(|e| Error::Format(format!("line {}: bad offset: {e}", lineno + 2)))?;
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "line {}: offset {offset}, expected {expected_offset}",
                    lineno + 2
                )));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("blob too short for `{name}`")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name.to_string(), Tensor::new(shape, data)?));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::Format(format!(
                "blob has {} trailing bytes",
                blob.len() - expected_offset
            )));
        }
        Ok(Self { entries })
    }

    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}.manifest")), dir.join(format!("{stem}.bin")))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        let (m, b) = Self::paths(dir, stem);
        fs::write(m, manifest)?;
        fs::write(b, blob)?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (m, b) = Self::paths(dir, stem);
        Self::decode(&fs::read_to_string(m)?, &fs::read(b)?)
    }
}
