//! Named parameter collection and the binary checkpoint format.
//!
//! A checkpoint is a plain-text header — one `name dim0 dim1 ...` line per
//! tensor in a fixed order — followed by a `data` marker line and the
//! concatenated little-endian f64 buffers in header order. Round-trips are
//! bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "lst-checkpoint v1";

#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid parameter name {name:?}")));
        }
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.detach());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let shape = self.tensors[i].shape().to_vec();
        if data.len() != self.tensors[i].numel() {
            return Err(Error::shape(format!(
                "set_data {name}: {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        self.tensors[i] = Tensor::from_vec(data, &shape);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterates in insertion order — the fixed checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        load_checkpoint(path)
    }
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors {}", params.len())?;
    for (name, t) in params.iter() {
        write!(w, "{name}")?;
        for d in t.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "data")?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // read the text header byte-wise up to and including the `data` line
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                break;
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0] as char);
        }
        Ok(line.clone())
    };

    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic line {magic:?}")));
    }
    let count_line = read_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad tensor count line {count_line:?}")))?;
    for _ in 0..count {
        let l = read_line(&mut r)?;
        let mut parts = l.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("empty header line".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad extent {p:?} for {name}")))
            })
            .collect::<Result<_>>()?;
        header.push((name, shape));
    }
    let marker = read_line(&mut r)?;
    if marker != "data" {
        return Err(Error::Checkpoint(format!("expected data marker, got {marker:?}")));
    }

    let mut store = ParamStore::new();
    for (name, shape) in header {
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated data for {name}: {e}")))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::from_vec(data, &shape))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(store)
}
