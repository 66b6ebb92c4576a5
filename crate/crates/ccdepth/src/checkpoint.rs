//! Versioned binary checkpoint container: a config JSON blob, the named model
//! tensors, and optional optimizer state for exact training resume.
//!
//! Layout (little-endian):
//!   magic "CCDPCKPT" | version u32
//!   | config JSON (u64 len + bytes)
//!   | state JSON  (u64 len + bytes)
//!   | model tensor table | optimizer tensor table
//! where each table is a u64 count followed by entries
//!   name (u64 len + bytes) | ndim u32 | dims u64... | f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{CcError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"CCDPCKPT";
const VERSION: u32 = 1;

#[derive(Default)]
pub struct Checkpoint {
    pub config_json: String,
    /// Trainer bookkeeping (epoch, step, RNG position); empty outside training.
    pub state_json: String,
    pub tensors: Vec<(String, ArrayD<f64>)>,
    pub opt_tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_json: &str) -> Self {
        Checkpoint {
            config_json: config_json.to_string(),
            state_json: String::new(),
            tensors: store
                .iter()
                .map(|(_, name, v)| (name.to_string(), v.clone()))
                .collect(),
            opt_tensors: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_blob(&mut w, self.config_json.as_bytes())?;
        write_blob(&mut w, self.state_json.as_bytes())?;
        write_table(&mut w, &self.tensors)?;
        write_table(&mut w, &self.opt_tensors)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CcError::Checkpoint(format!(
                "bad magic in {}: not a checkpoint file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CcError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_json = String::from_utf8(read_blob(&mut r)?)
            .map_err(|e| CcError::Checkpoint(format!("config JSON not UTF-8: {e}")))?;
        let state_json = String::from_utf8(read_blob(&mut r)?)
            .map_err(|e| CcError::Checkpoint(format!("state JSON not UTF-8: {e}")))?;
        let tensors = read_table(&mut r)?;
        let opt_tensors = read_table(&mut r)?;
        Ok(Checkpoint {
            config_json,
            state_json,
            tensors,
            opt_tensors,
        })
    }

    /// Copy model tensors into a built store, verifying that names and shapes
    /// agree exactly; fails naming the first mismatching tensor.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(CcError::Checkpoint(format!(
                "tensor count mismatch: checkpoint has {}, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, data) in &self.tensors {
            let id = store.id(name).ok_or_else(|| {
                CcError::Checkpoint(format!("checkpoint tensor {name} not present in model"))
            })?;
            let dst = store.value_mut(id);
            if dst.shape() != data.shape() {
                return Err(CcError::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    data.shape(),
                    dst.shape()
                )));
            }
            dst.assign(data);
        }
        Ok(())
    }
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_table<W: Write>(w: &mut W, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    w.write_u64::<LittleEndian>(tensors.len() as u64)?;
    for (name, v) in tensors {
        write_blob(w, name.as_bytes())?;
        w.write_u32::<LittleEndian>(v.ndim() as u32)?;
        for &d in v.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in v.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_table<R: Read>(r: &mut R) -> Result<Vec<(String, ArrayD<f64>)>> {
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_blob(r)?)
            .map_err(|e| CcError::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| CcError::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.define("a.weight", Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.5).into_dyn())
            .unwrap();
        s.define("a.bias", Array1::linspace(-1.0, 1.0, 3).into_dyn())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::from_store(&store, "{\"k\":1}");
        ck.state_json = "{\"step\":7}".to_string();
        ck.opt_tensors
            .push(("m.a.weight".into(), Array2::<f64>::ones((3, 4)).into_dyn()));
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_json, "{\"k\":1}");
        assert_eq!(back.state_json, "{\"step\":7}");
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.opt_tensors.len(), 1);
        let mut store2 = sample_store();
        store2.value_mut(store2.id("a.weight").unwrap()).fill(0.0);
        back.load_into(&mut store2).unwrap();
        for (id, _, v) in store.iter() {
            assert_eq!(v, store2.value(id));
        }
    }

    #[test]
    fn shape_mismatch_names_first_offender() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_store(&store, "{}").save(&path).unwrap();

        let mut other = ParamStore::new();
        other
            .define("a.weight", Array2::<f64>::zeros((4, 4)).into_dyn())
            .unwrap();
        other
            .define("a.bias", Array1::<f64>::zeros(3).into_dyn())
            .unwrap();
        let err = Checkpoint::load(&path)
            .unwrap()
            .load_into(&mut other)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.weight"), "{msg}");
        assert!(msg.contains("mismatch"), "{msg}");
    }

    #[test]
    fn missing_name_and_bad_magic_rejected() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_store(&store, "{}").save(&path).unwrap();

        let mut other = ParamStore::new();
        other
            .define("b.weight", Array2::<f64>::zeros((3, 4)).into_dyn())
            .unwrap();
        other
            .define("a.bias", Array1::<f64>::zeros(3).into_dyn())
            .unwrap();
        let err = Checkpoint::load(&path)
            .unwrap()
            .load_into(&mut other)
            .unwrap_err();
        assert!(err.to_string().contains("a.weight"));

        let bogus = dir.path().join("bogus.ckpt");
        std::fs::write(&bogus, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Checkpoint::load(&bogus),
            Err(CcError::Checkpoint(_))
        ));
    }
}
