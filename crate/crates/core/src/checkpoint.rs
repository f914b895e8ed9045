//! The EVA1 container: the single on-disk format for model checkpoints and
//! datasets.
//!
//! Layout: magic bytes `"EVA1"`, format version `u32` LE, then repeated
//! records of
//! `(name_len u32 LE, UTF-8 name, dtype u8, rank u8, dims u64 LE each,
//! little-endian payload)`.
//!
//! Records keep insertion order, so writes are byte-deterministic.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EvaError, Result};
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 4] = b"EVA1";
const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_I64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F64 { shape, .. } | Entry::I64 { shape, .. } => shape,
        }
    }
}

/// An ordered name -> tensor map with a lookup index.
#[derive(Debug, Default, Clone)]
pub struct Container {
    records: Vec<(String, Entry)>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, entry: Entry) {
        if let Some(&i) = self.index.get(name) {
            self.records[i].1 = entry;
        } else {
            self.index.insert(name.to_string(), self.records.len());
            self.records.push((name.to_string(), entry));
        }
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.insert(
            name,
            Entry::F64 {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn put_f64s(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.insert(
            name,
            Entry::F64 {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn put_i64s(&mut self, name: &str, data: Vec<i64>) {
        self.insert(
            name,
            Entry::I64 {
                shape: vec![data.len()],
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.records[i].1)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.get(name) {
            Some(Entry::F64 { shape, data }) => Tensor::new(shape.clone(), data.clone()),
            Some(Entry::I64 { .. }) => Err(EvaError::Checkpoint(format!(
                "record '{name}' holds integers, expected reals"
            ))),
            None => Err(EvaError::Checkpoint(format!("missing record '{name}'"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Entry::F64 { data, .. }) => Ok(data),
            Some(Entry::I64 { .. }) => Err(EvaError::Checkpoint(format!(
                "record '{name}' holds integers, expected reals"
            ))),
            None => Err(EvaError::Checkpoint(format!("missing record '{name}'"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match self.get(name) {
            Some(Entry::I64 { data, .. }) => Ok(data),
            Some(Entry::F64 { .. }) => Err(EvaError::Checkpoint(format!(
                "record '{name}' holds reals, expected integers"
            ))),
            None => Err(EvaError::Checkpoint(format!("missing record '{name}'"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, entry) in &self.records {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            match entry {
                Entry::F64 { shape, data } => {
                    w.write_all(&[DTYPE_F64, shape.len() as u8])?;
                    for &d in shape {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Entry::I64 { shape, data } => {
                    w.write_all(&[DTYPE_I64, shape.len() as u8])?;
                    for &d in shape {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EvaError::Checkpoint(format!(
                "bad magic bytes in {}",
                path.display()
            )));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            return Err(EvaError::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let mut out = Container::new();
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| EvaError::Checkpoint("record name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            let (dtype, rank) = (head[0], head[1] as usize);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d8 = [0u8; 8];
                r.read_exact(&mut d8)?;
                shape.push(u64::from_le_bytes(d8) as usize);
            }
            let n = numel(&shape);
            match dtype {
                DTYPE_F64 => {
                    let mut data = Vec::with_capacity(n);
                    let mut v8 = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut v8)?;
                        data.push(f64::from_le_bytes(v8));
                    }
                    out.insert(&name, Entry::F64 { shape, data });
                }
                DTYPE_I64 => {
                    let mut data = Vec::with_capacity(n);
                    let mut v8 = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut v8)?;
                        data.push(i64::from_le_bytes(v8));
                    }
                    out.insert(&name, Entry::I64 { shape, data });
                }
                other => {
                    return Err(EvaError::Checkpoint(format!(
                        "unknown dtype tag {other} for record '{name}'"
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_records_and_order() {
        let dir = std::env::temp_dir().join("eva-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.eva1");

        let mut c = Container::new();
        c.put_f64s("gen/w1", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]);
        c.put_i64s("meta/counts", vec![7, 16]);
        c.put_f64s("gen/b1", &[3], vec![0.5, 0.25, -0.75]);
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["gen/w1", "meta/counts", "gen/b1"]
        );
        assert_eq!(back.f64s("gen/w1").unwrap(), c.f64s("gen/w1").unwrap());
        assert_eq!(back.i64s("meta/counts").unwrap(), &[7, 16]);
        assert_eq!(back.get("gen/b1"), c.get("gen/b1"));
    }

    #[test]
    fn identical_content_writes_identical_bytes() {
        let dir = std::env::temp_dir().join("eva-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.eva1"), dir.join("b.eva1"));

        let mut c = Container::new();
        c.put_f64s("x", &[4], vec![1.0, 2.0, 3.0, 4.0]);
        c.save(&p1).unwrap();
        c.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("eva-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.eva1");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(Container::load(&path).is_err());
    }

    #[test]
    fn insert_overwrites_in_place() {
        let mut c = Container::new();
        c.put_f64s("a", &[1], vec![1.0]);
        c.put_f64s("b", &[1], vec![2.0]);
        c.put_f64s("a", &[1], vec![9.0]);
        assert_eq!(c.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(c.f64s("a").unwrap(), &[9.0]);
    }
}
