//! Binary checkpoint: a text header echoing the config, step and metrics,
//! then one record per named tensor.
//!
//! ```text
//! "SVTRCKPT"  u32 version  u32 header_len  header (UTF-8 key=value lines)  u32 crc32(header)
//! u32 record_count
//! per record:
//!   u8 kind (0 param, 1 buffer)  u16 name_len  name
//!   u8 dtype (0 f32, 1 f64)  u8 rank  u32 dims[rank]
//!   u64 payload_len  payload (little-endian)  u32 crc32(payload)
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Result, SvtrError};
use crate::model::params::param_specs;
use crate::model::{EntryKind, ParamStore, SvtrConfig, SvtrModel};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"SVTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub config: SvtrConfig,
    pub store: ParamStore<T>,
    pub step: u64,
    pub metrics: Vec<(String, f64)>,
}

fn dtype_code<T: Element>() -> u8 {
    match T::DTYPE {
        "f32" => 0,
        _ => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            SvtrError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn from_model(model: &SvtrModel<T>, step: u64, metrics: Vec<(String, f64)>) -> Self {
        Self {
            config: model.config().clone(),
            store: model.store().clone(),
            step,
            metrics,
        }
    }

    pub fn into_model(self) -> Result<SvtrModel<T>> {
        SvtrModel::from_store(self.config, self.store)
    }

    fn header(&self) -> String {
        let mut h = String::new();
        for line in self.config.to_text().lines() {
            let (k, v) = line.split_once(" = ").expect("config lines are key = value");
            h.push_str(&format!("config.{k}={v}\n"));
        }
        h.push_str(&format!("step={}\n", self.step));
        for (k, v) in &self.metrics {
            h.push_str(&format!("metric.{k}={v:?}\n"));
        }
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&crc32fast::hash(header.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, entry) in self.store.iter() {
            out.push(match entry.kind {
                EntryKind::Param => 0,
                EntryKind::Buffer => 1,
            });
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code::<T>());
            let shape = entry.tensor.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let mut payload = Vec::with_capacity(entry.tensor.numel() * 8);
            for &v in entry.tensor.data() {
                match dtype_code::<T>() {
                    0 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    _ => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(SvtrError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(SvtrError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header = r.take(header_len, "header")?;
        if r.u32("header checksum")? != crc32fast::hash(header) {
            return Err(SvtrError::Checksum("header".into()));
        }
        let header = std::str::from_utf8(header).map_err(|_| SvtrError::Checkpoint("header is not UTF-8".into()))?;
        let mut config_text = String::new();
        let mut step = 0;
        let mut metrics = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SvtrError::Checkpoint(format!("bad header line {line:?}")))?;
            if let Some(key) = k.strip_prefix("config.") {
                config_text.push_str(&format!("{key} = {v}\n"));
            } else if let Some(key) = k.strip_prefix("metric.") {
                let val = v.parse().map_err(|_| SvtrError::Checkpoint(format!("bad metric {line:?}")))?;
                metrics.push((key.to_string(), val));
            } else if k == "step" {
                step = v.parse().map_err(|_| SvtrError::Checkpoint(format!("bad step {v:?}")))?;
            }
        }
        let config = SvtrConfig::parse(&config_text)?;
        let specs = param_specs(&config);

        let count = r.u32("record count")? as usize;
        if count != specs.len() {
            return Err(SvtrError::Compatibility(vec![format!(
                "checkpoint holds {count} tensors, config needs {}",
                specs.len()
            )]));
        }
        let mut store = ParamStore::default();
        for spec in &specs {
            let kind = match r.u8("record kind")? {
                0 => EntryKind::Param,
                1 => EntryKind::Buffer,
                k => return Err(SvtrError::Checkpoint(format!("unknown record kind {k}"))),
            };
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| SvtrError::Checkpoint("record name is not UTF-8".into()))?;
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let payload_len = r.u64("payload length")? as usize;
            let payload = r.take(payload_len, &name)?;
            if r.u32("payload checksum")? != crc32fast::hash(payload) {
                return Err(SvtrError::Checksum(name));
            }
            if name != spec.name || shape != spec.shape || kind != spec.kind {
                return Err(SvtrError::Compatibility(vec![format!(
                    "record {name} {shape:?} does not match expected {} {:?}",
                    spec.name, spec.shape
                )]));
            }
            let data: Vec<T> = match dtype {
                0 => payload
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
                1 => payload
                    .chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                d => return Err(SvtrError::Checkpoint(format!("unknown dtype {d} in {name}"))),
            };
            let tensor = Tensor::new(&shape, data).map_err(|e| SvtrError::Checkpoint(format!("{name}: {e}")))?;
            store.insert(name, tensor, kind, spec.decay);
        }
        if r.pos != bytes.len() {
            return Err(SvtrError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            store,
            step,
            metrics,
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| SvtrError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| SvtrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SvtrError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Loads a model, requiring its config to equal `expected`.
    pub fn load_model(path: &Path, expected: &SvtrConfig) -> Result<(SvtrModel<T>, u64, Vec<(String, f64)>)> {
        let ck = Self::load(path)?;
        let diff = expected.diff(&ck.config);
        if !diff.is_empty() {
            return Err(SvtrError::Compatibility(diff));
        }
        let (step, metrics) = (ck.step, ck.metrics.clone());
        Ok((ck.into_model()?, step, metrics))
    }
}
