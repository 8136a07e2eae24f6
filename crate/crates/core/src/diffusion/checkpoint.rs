//! `TSR1` checkpoints: magic, length-prefixed JSON header, then named tensor records.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ScheduleConfig, TextSrModel};
use crate::nn::{Adam, AdamConfig, DType, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSR1";
pub const SCHEMA_VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Optimizer steps taken.
    pub step: u64,
    pub dtype: DType,
    pub tensors: usize,
    /// Hash of the run configuration that produced the weights, if any.
    pub config_hash: Option<String>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub header: CheckpointHeader,
    pub model: TextSrModel<F>,
    pub optimizer: Option<Adam<F>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn write_tensor<F: Scalar, W: Write>(w: &mut W, name: &str, t: &Tensor<F>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[F::DTYPE.tag(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        match F::DTYPE {
            DType::F32 => w.write_all(&(v.f64() as f32).to_le_bytes())?,
            DType::F64 => w.write_all(&v.f64().to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

fn read_tensor<F: Scalar, R: Read>(r: &mut R) -> Result<(String, Tensor<F>)> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(bad(format!("tensor name of {n} bytes")));
    }
    let name = String::from_utf8(read_exact(r, n)?).map_err(|_| bad("tensor name is not UTF-8"))?;
    let tr = read_exact(r, 2)?;
    let dtype = DType::from_tag(tr[0]).ok_or_else(|| bad(format!("{name}: unknown dtype tag {}", tr[0])))?;
    let rank = tr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| bad(format!("{name}: dimension {d}")))?);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: size overflow")))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    if numel > (1 << 31) {
        return Err(bad(format!("{name}: {numel} elements")));
    }
    let raw = read_exact(r, numel * width)?;
    let data: Vec<F> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|b| F::of(f32::from_le_bytes(b.try_into().expect("4")) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|b| F::of(f64::from_le_bytes(b.try_into().expect("8")))).collect(),
    };
    Ok((name, Tensor::new(&shape, data)))
}

/// Writes `model` (and optionally its optimizer) atomically: a temporary
/// file in the same directory is renamed over `path` once complete.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &TextSrModel<F>,
    optimizer: Option<&Adam<F>>,
    config_hash: Option<&str>,
) -> Result<()> {
    let store = &model.store;
    let n_opt = optimizer.map_or(0, |_| 2 * store.len());
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        config: model.config.clone(),
        schedule: model.config.schedule,
        step: model.step,
        dtype: F::DTYPE,
        tensors: store.len() + n_opt,
        config_hash: config_hash.map(str::to_string),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        let json = serde_json::to_vec(&header).expect("header serializes");
        let io = |e| Error::io(tmp.path(), e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for id in store.ids() {
            write_tensor(&mut w, store.name(id), store.get(id)).map_err(io)?;
        }
        if let Some(o) = optimizer {
            for id in store.ids() {
                write_tensor(&mut w, &format!("{M_PREFIX}{}", store.name(id)), &o.m[id.index()]).map_err(io)?;
                write_tensor(&mut w, &format!("{V_PREFIX}{}", store.name(id)), &o.v[id.index()]).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads only the header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(f))
}

fn read_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    if &read_exact(r, 4)?[..] != MAGIC {
        return Err(bad("missing TSR1 magic"));
    }
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(bad(format!("header of {n} bytes")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&read_exact(r, n)?).map_err(|e| bad(format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint schema {} (this build reads {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    if header.schedule != header.config.schedule {
        return Err(bad("schedule parameters disagree with the model config"));
    }
    Ok(header)
}

/// Loads a checkpoint, checking every tensor's name and shape against the
/// configuration in its header.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header(&mut r)?;
    let expected = TextSrModel::<F>::new(header.config.clone(), 0)?;
    let mut store = ParamStore::<F>::new();
    let mut moments = Vec::new();
    for _ in 0..header.tensors {
        let (name, t) = read_tensor::<F, _>(&mut r)?;
        let base = name.strip_prefix(M_PREFIX).or_else(|| name.strip_prefix(V_PREFIX)).unwrap_or(&name);
        let want = expected
            .store
            .find(base)
            .ok_or_else(|| Error::ArtifactMismatch(format!("tensor {name} is not part of the configured model")))?;
        let want_shape = expected.store.get(want).shape();
        if t.shape() != want_shape {
            return Err(Error::ArtifactMismatch(format!("{name}: shape {:?}, config expects {want_shape:?}", t.shape())));
        }
        if base.len() == name.len() {
            if store.find(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            store.insert(name, t);
        } else {
            moments.push((name, t));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    if store.len() != expected.store.len() {
        let missing: Vec<&str> = expected.store.ids().map(|id| expected.store.name(id)).filter(|n| store.find(n).is_none()).collect();
        return Err(Error::ArtifactMismatch(format!("missing tensors {missing:?}")));
    }
    let model = TextSrModel::from_store(header.config.clone(), store, header.step)?;
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut adam = Adam::new(oh.config, &model.store);
            adam.step = oh.step;
            let mut seen = 0;
            for (name, t) in moments {
                let (slot, base) = match name.strip_prefix(M_PREFIX) {
                    Some(b) => (&mut adam.m, b),
                    None => (&mut adam.v, name.strip_prefix(V_PREFIX).expect("prefixed")),
                };
                let id = model.store.find(base).expect("checked against config");
                slot[id.index()] = t;
                seen += 1;
            }
            if seen != 2 * model.store.len() {
                return Err(bad(format!("optimizer state has {seen} of {} moment tensors", 2 * model.store.len())));
            }
            Some(adam)
        }
    };
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

impl<F: Scalar> Checkpoint<F> {
    /// `ArtifactMismatch` unless the stored model config equals `config`.
    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.header.config != config {
            return Err(Error::ArtifactMismatch("checkpoint model config differs from the run config".into()));
        }
        Ok(())
    }
}
