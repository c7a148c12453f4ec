//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `STRM`, u32 version, u32 config length, config text, u64 iteration,
//! u64 seed, u32 array count, then per array: u32 name length, name,
//! u64 element count, f64 values. Arrays are the parameters by name,
//! `<bn>.running_mean` / `<bn>.running_var` for every batch norm and
//! `momentum.<param>` for the optimizer state. Values are stored bit for
//! bit, so save and load round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::Trainer;

const MAGIC: &[u8; 4] = b"STRM";
const VERSION: u32 = 1;

/// Serializes the full training state.
pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = trainer.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&trainer.iteration.to_le_bytes());
    out.extend_from_slice(&trainer.config.train.seed.to_le_bytes());

    let mut arrays: Vec<(String, &[f64])> = Vec::new();
    for p in trainer.store.params() {
        arrays.push((p.name.clone(), p.value.data()));
    }
    for (name, stats) in trainer.store.buffers() {
        arrays.push((format!("{name}.running_mean"), &stats.mean));
        arrays.push((format!("{name}.running_var"), &stats.var));
    }
    for (p, m) in trainer.store.params().iter().zip(&trainer.momentum) {
        arrays.push((format!("momentum.{}", p.name), m.data()));
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

/// Parsed checkpoint contents.
struct Raw {
    config: Config,
    iteration: u64,
    arrays: BTreeMap<String, Vec<f64>>,
}

fn parse(bytes: &[u8]) -> std::result::Result<Raw, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config = Config::parse(&r.string()?).map_err(|e| format!("embedded config: {e}"))?;
    let iteration = r.u64()?;
    let _seed = r.u64()?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or("array too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if arrays.insert(name.clone(), data).is_some() {
            return Err(format!("duplicate array `{name}`"));
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(Raw {
        config,
        iteration,
        arrays,
    })
}

fn fill(arrays: &mut BTreeMap<String, Vec<f64>>, name: &str, dst: &mut [f64]) -> std::result::Result<(), String> {
    let src = arrays.remove(name).ok_or_else(|| format!("missing array `{name}`"))?;
    if src.len() != dst.len() {
        return Err(format!("array `{name}` has {} values, expected {}", src.len(), dst.len()));
    }
    dst.copy_from_slice(&src);
    Ok(())
}

/// Rebuilds the model and optimizer state from serialized bytes.
fn restore(raw: Raw) -> std::result::Result<(Config, Model, ParamStore, Vec<Tensor>, u64), String> {
    let Raw {
        config,
        iteration,
        mut arrays,
    } = raw;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config.model.clone(), config.train.seed).map_err(|e| e.to_string())?;
    for p in store.params_mut() {
        fill(&mut arrays, &p.name.clone(), p.value.data_mut())?;
    }
    for (name, stats) in store.buffers_mut() {
        fill(&mut arrays, &format!("{name}.running_mean"), &mut stats.mean)?;
        fill(&mut arrays, &format!("{name}.running_var"), &mut stats.var)?;
    }
    let mut momentum = Vec::new();
    for p in store.params() {
        let mut m = Tensor::zeros(p.value.shape().to_vec());
        fill(&mut arrays, &format!("momentum.{}", p.name), m.data_mut())?;
        momentum.push(m);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(format!("unexpected array `{extra}`"));
    }
    Ok((config, model, store, momentum, iteration))
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    fs::write(path, to_bytes(trainer)).map_err(|e| Error::file(path, e))
}

/// Loads a checkpoint and reopens its data source.
pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let (config, model, store, momentum, iteration) =
        parse(&bytes).and_then(restore).map_err(|m| Error::file(path, m))?;
    Trainer::from_parts(config, model, store, momentum, iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_config;

    #[test]
    fn round_trip_is_bitwise() {
        let mut tr = Trainer::new(tiny_config()).unwrap();
        let b = tr.batch(0).unwrap();
        tr.step(&b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &tr).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.iteration, 1);
        assert_eq!(back.config, tr.config);
        assert_eq!(to_bytes(&back), to_bytes(&tr));
        for (a, b) in back.store.buffers().iter().zip(tr.store.buffers()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let mut a = Trainer::new(tiny_config()).unwrap();
        a.fit(|_| {}, |_, _| {}).unwrap();

        let mut cfg = tiny_config();
        cfg.train.iterations = 1;
        let mut b = Trainer::new(cfg).unwrap();
        b.fit(|_| {}, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save(&path, &b).unwrap();
        let mut b = load(&path).unwrap();
        b.config.train.iterations = 3;
        b.fit(|_| {}, |_, _| {}).unwrap();
        for (x, y) in a.store.params().iter().zip(b.store.params()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
    }

    #[test]
    fn corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE0000").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("bad.ckpt") && err.contains("magic"), "{err}");

        let tr = Trainer::new(tiny_config()).unwrap();
        let bytes = to_bytes(&tr);
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("truncated"));
    }
}
