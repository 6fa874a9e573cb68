//! Named-parameter container files.
//!
//! Layout: a `DCN1` magic line, then for each parameter an ASCII header line
//! `name dim0 dim1 ...` immediately followed by its values as little-endian
//! IEEE-754 doubles. Entries keep declaration order.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "DCN1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidArgument(format!("parameter name {name:?} must be non-empty without whitespace")));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = |pos: &mut usize| -> Option<String> {
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|&b| b == b'\n')?;
            *pos += end + 1;
            line_no += 1;
            Some(String::from_utf8_lossy(&rest[..end]).into_owned())
        };
        match next_line(&mut pos) {
            Some(m) if m == CHECKPOINT_MAGIC => {}
            _ => {
                return Err(Error::Format {
                    path: path.into(),
                    message: format!("missing {CHECKPOINT_MAGIC} magic line"),
                })
            }
        }
        let mut ck = Checkpoint::new();
        while pos < bytes.len() {
            let header_at = pos;
            let header = next_line(&mut pos).ok_or_else(|| Error::Format {
                path: path.into(),
                message: format!("truncated header at byte {header_at}"),
            })?;
            let mut fields = header.split_whitespace();
            let name = fields.next().ok_or_else(|| Error::Format {
                path: path.into(),
                message: format!("empty parameter header at byte {header_at}"),
            })?;
            let shape = fields
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format {
                    path: path.into(),
                    message: format!("parameter {name}: bad extent ({e})"),
                })?;
            let n: usize = shape.iter().product();
            let need = n * 8;
            if shape.is_empty() || bytes.len() - pos < need {
                return Err(Error::Format {
                    path: path.into(),
                    message: format!("parameter {name}: expected {need} value bytes"),
                });
            }
            let values = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += need;
            let t = Tensor::new(shape, values).map_err(|e| Error::Format {
                path: path.into(),
                message: format!("parameter {name}: {e}"),
            })?;
            ck.push(name, t)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
