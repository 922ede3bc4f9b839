//! Named-tensor archives: a `key=value` text header followed by tensor
//! records in a fixed order.
//!
//! ```text
//! PMMCKPT\n
//! key=value\n ...
//! end\n
//! u32 count, then per record: u32 name length, name bytes, PMM1 tensor
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

const ARCHIVE_MAGIC: &str = "PMMCKPT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| Error::Data(format!("checkpoint header lacks `{key}`")))?;
        raw.parse().map_err(|_| Error::Data(format!("checkpoint header `{key}={raw}` is malformed")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{ARCHIVE_MAGIC}")?;
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("header entry `{k}` cannot be stored")));
            }
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "end")?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != ARCHIVE_MAGIC {
            return Err(Error::Data("not a checkpoint archive".into()));
        }
        let mut header = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Data("checkpoint header is truncated".into()));
            }
            let entry = line.trim_end_matches('\n');
            if entry == "end" {
                break;
            }
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed header line `{entry}`")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(Error::Data(format!("implausible tensor name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            tensors.push((name, Tensor::read_from(r)?));
        }
        Ok(Archive { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Hex sha256 of `key=value` lines, used to pin a checkpoint to its config.
pub fn config_hash(entries: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let mut a = Archive::new();
        a.set("kind", "vq");
        a.set("k", 64);
        a.push("w", Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        a.push("b", Tensor::scalar(3.0));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let back = Archive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.require::<usize>("k").unwrap(), 64);
        assert!(back.tensor("missing").is_err());
    }

    #[test]
    fn hash_depends_on_values() {
        let a = vec![("d".to_string(), "64".to_string())];
        let b = vec![("d".to_string(), "65".to_string())];
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
