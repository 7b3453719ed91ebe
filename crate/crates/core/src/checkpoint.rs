//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MVFICKPT"  u32 version  u64 header_len  header (JSON)
//! u64 entry_count
//! entry: u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 values[prod(dims)]
//! ```
//!
//! The header records the seed and the full model configuration. Entries hold
//! every parameter by name, followed by optimiser moments (`adam.m/<name>`,
//! `adam.v/<name>`) and `train.scalars` when training state is saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{AdamState, PlateauState, TrainState};

pub const MAGIC: &[u8; 8] = b"MVFICKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "metavfi-checkpoint";
const SCALARS: &str = "train.scalars";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    seed: u64,
    model: ModelConfig,
    train: Option<TrainCounters>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCounters {
    epoch: usize,
    step: u64,
    adam_step: u64,
    plateau_bad_epochs: usize,
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model, train: Option<&TrainState>) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        seed: model.seed(),
        model: model.config().clone(),
        train: train.map(|t| TrainCounters {
            epoch: t.epoch,
            step: t.step,
            adam_step: t.adam.step,
            plateau_bad_epochs: t.plateau.bad_epochs,
        }),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    let n_params = model.params.len();
    let count = if train.is_some() { 3 * n_params + 1 } else { n_params };
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, p) in model.params.iter() {
        put_entry(&mut out, &p.name, &p.shape, &p.values);
    }
    if let Some(t) = train {
        for (tag, moments) in [("adam.m", &t.adam.m), ("adam.v", &t.adam.v)] {
            for (id, p) in model.params.iter() {
                put_entry(&mut out, &format!("{tag}/{}", p.name), &p.shape, &moments[id.index()]);
            }
        }
        put_entry(&mut out, SCALARS, &[2], &[t.lr, t.plateau.best]);
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
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows".to_string())
    }

    fn entry(&mut self) -> std::result::Result<(String, Vec<usize>, Vec<f64>), String> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| "entry name is not UTF-8".to_string())?
            .to_string();
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("entry {name}: size overflows"))?;
        let raw = self.take(n.checked_mul(8).ok_or("entry size overflows")?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, values))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, Option<TrainState>)> {
    decode_inner(bytes).map_err(|m| Error::format(path, m))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<(Model, Option<TrainState>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let header_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("bad header: {e}"))?;
    if header.format != FORMAT {
        return Err(format!("unexpected format tag {:?}", header.format));
    }
    let mut model = Model::new(header.model, header.seed).map_err(|e| e.to_string())?;
    let count = r.len()?;
    let mut entries = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, shape, values) = r.entry()?;
        if entries.insert(name.clone(), (shape, values)).is_some() {
            return Err(format!("duplicate entry {name}"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }

    let mut take = |name: &str, shape: &[usize]| -> std::result::Result<Vec<f64>, String> {
        let (s, v) = entries.remove(name).ok_or_else(|| format!("missing entry {name}"))?;
        if s != shape {
            return Err(format!("entry {name}: shape {s:?}, expected {shape:?}"));
        }
        Ok(v)
    };
    let layout: Vec<_> = model
        .params
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.shape.clone()))
        .collect();
    for (id, name, shape) in &layout {
        let v = take(name, shape)?;
        model.params.values_mut(*id).copy_from_slice(&v);
    }
    let train = match header.train {
        None => None,
        Some(c) => {
            let mut adam = AdamState::new(&model.params);
            for (id, name, shape) in &layout {
                adam.m[id.index()] = take(&format!("adam.m/{name}"), shape)?;
                adam.v[id.index()] = take(&format!("adam.v/{name}"), shape)?;
            }
            adam.step = c.adam_step;
            let s = take(SCALARS, &[2])?;
            Some(TrainState {
                epoch: c.epoch,
                step: c.step,
                lr: s[0],
                adam,
                plateau: PlateauState {
                    best: s[1],
                    bad_epochs: c.plateau_bad_epochs,
                },
            })
        }
    };
    if let Some(name) = entries.keys().next() {
        return Err(format!("unexpected entry {name}"));
    }
    Ok((model, train))
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model, train: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model, train)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<TrainState>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::train::TrainConfig;

    fn trained_state(model: &Model) -> TrainState {
        let mut st = TrainState::new(model, &TrainConfig::default());
        st.epoch = 3;
        st.step = 17;
        st.lr = 2.5e-4;
        st.adam.step = 17;
        st.adam.m[1][0] = 0.125;
        st.adam.v[2][1] = 3e-9;
        st.plateau = PlateauState { best: 0.0421, bad_epochs: 1 };
        st
    }

    #[test]
    fn roundtrip_is_exact() {
        for variant in Variant::ALL {
            let cfg = ModelConfig { variant, ..ModelConfig::toy() };
            let mut m = Model::new(cfg, 11).unwrap();
            let first = m.params.iter().next().unwrap().0;
            m.params.values_mut(first)[0] = -1.0 / 3.0;
            let st = trained_state(&m);
            let bytes = encode_checkpoint(&m, Some(&st));
            let (m2, st2) = decode_checkpoint(&bytes, Path::new("x")).unwrap();
            assert_eq!(m2.params.flatten(), m.params.flatten());
            assert_eq!(m2.config(), m.config());
            assert_eq!(m2.seed(), 11);
            assert_eq!(st2.as_ref(), Some(&st));
            assert_eq!(encode_checkpoint(&m2, st2.as_ref()), bytes);

            let (_, none) = decode_checkpoint(&encode_checkpoint(&m, None), Path::new("x")).unwrap();
            assert!(none.is_none());
        }
    }

    #[test]
    fn header_starts_with_magic() {
        let m = Model::new(ModelConfig::toy(), 0).unwrap();
        let bytes = encode_checkpoint(&m, None);
        assert_eq!(&bytes[..8], b"MVFICKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = Model::new(ModelConfig::toy(), 0).unwrap();
        let bytes = encode_checkpoint(&m, None);
        let p = Path::new("c.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Format { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        // a checkpoint of a different architecture misses entries
        let other = Model::new(ModelConfig { variant: Variant::MinBase, ..ModelConfig::toy() }, 0).unwrap();
        let mut swapped = encode_checkpoint(&other, None);
        let full_header_len = 20 + u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let other_header_len = 20 + u64::from_le_bytes(swapped[12..20].try_into().unwrap()) as usize;
        swapped.splice(..other_header_len, bytes[..full_header_len].iter().copied());
        let err = decode_checkpoint(&swapped, p).unwrap_err().to_string();
        assert!(err.contains("missing entry") || err.contains("truncated"), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let m = Model::new(ModelConfig::toy(), 5).unwrap();
        write_checkpoint(&path, &m, None).unwrap();
        let (m2, _) = read_checkpoint(&path).unwrap();
        assert_eq!(m2.params.flatten(), m.params.flatten());
        assert!(matches!(read_checkpoint(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
