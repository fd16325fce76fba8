//! Model checkpoints: a text header followed by raw little-endian `f32`s.
//!
//! ```text
//! VTPCKPT 1
//! config <key> = <value>          (one line per run config entry)
//! meta <key> = <value>
//! tensor <name> <kind> <d0,d1,..> <offset> <count>
//! END_HEADER
//! <payload>
//! ```
//!
//! `kind` is `param`, `buffer` or `state`; offsets and counts are in
//! elements from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::nn::{ParamStore, Tensor};
use crate::training::Optimizer;

pub const MAGIC: &str = "VTPCKPT 1";
const END: &str = "END_HEADER";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
    /// Optimizer moments.
    State,
}

impl TensorKind {
    fn name(self) -> &'static str {
        match self {
            TensorKind::Param => "param",
            TensorKind::Buffer => "buffer",
            TensorKind::State => "state",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "param" => Some(TensorKind::Param),
            "buffer" => Some(TensorKind::Buffer),
            "state" => Some(TensorKind::State),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshot of a store and, optionally, the optimizer moments.
    pub fn capture(config: &RunConfig, store: &ParamStore<f32>, optimizer: Option<&Optimizer<f32>>) -> Self {
        let mut entries: Vec<Entry> = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                kind: if p.trainable { TensorKind::Param } else { TensorKind::Buffer },
                tensor: p.value.clone(),
            })
            .collect();
        let mut meta = BTreeMap::new();
        if let Some(opt) = optimizer {
            meta.insert("optimizer_step".to_string(), opt.step.to_string());
            entries.extend(opt.state_tensors(store).into_iter().map(|(name, tensor)| Entry {
                name,
                kind: TensorKind::State,
                tensor,
            }));
        }
        Self {
            config: config.clone(),
            meta,
            entries,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy parameters and buffers into a store built from the same
    /// configuration. Every store entry must be present with its shape.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let e = self
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {}", p.name)))?;
            if e.tensor.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint_restore",
                    expected: format!("{} with shape {:?}", p.name, p.value.shape()),
                    got: format!("{:?}", e.tensor.shape()),
                });
            }
            p.value = e.tensor.clone();
        }
        Ok(())
    }

    /// Restore optimizer moments saved by `capture`.
    pub fn restore_optimizer(&self, store: &ParamStore<f32>, optimizer: &mut Optimizer<f32>) -> Result<()> {
        let step = self
            .meta
            .get("optimizer_step")
            .ok_or_else(|| Error::Config("checkpoint holds no optimizer state".into()))?
            .parse()
            .map_err(|_| Error::Config("bad optimizer_step".into()))?;
        optimizer.load_state(
            store,
            |name| self.get(name).filter(|e| e.kind == TensorKind::State).map(|e| e.tensor.clone()),
            step,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for line in self.config.serialize().lines() {
            header.push_str("config ");
            header.push_str(line);
            header.push('\n');
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.tensor.shape().iter().map(ToString::to_string).collect();
            header.push_str(&format!(
                "tensor {} {} {} {} {}\n",
                e.name,
                e.kind.name(),
                dims.join(","),
                offset,
                e.tensor.len()
            ));
            offset += e.tensor.len();
        }
        header.push_str(END);
        header.push('\n');
        let mut bytes = header.into_bytes();
        bytes.reserve(offset * 4);
        for e in &self.entries {
            for v in e.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
            return Err(bad(format!("missing checkpoint magic {MAGIC:?}")));
        }
        let marker = format!("\n{END}\n");
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("header is not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[end + marker.len()..];
        if payload.len() % 4 != 0 {
            return Err(bad(format!("payload length {} is not a multiple of 4", payload.len())));
        }
        let floats = payload.len() / 4;
        let mut config_text = String::new();
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        let mut covered = vec![false; floats];
        for line in header.lines().skip(1) {
            if let Some(rest) = line.strip_prefix("config ") {
                config_text.push_str(rest);
                config_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(bad(format!("bad tensor line {line:?}")));
                }
                let kind = TensorKind::parse(f[1]).ok_or_else(|| bad(format!("unknown tensor kind {:?}", f[1])))?;
                let shape = if f[2].is_empty() {
                    Vec::new()
                } else {
                    f[2].split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in {line:?}")))?
                };
                let offset: usize = f[3].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                let count: usize = f[4].parse().map_err(|_| bad(format!("bad count in {line:?}")))?;
                if shape.iter().product::<usize>() != count {
                    return Err(bad(format!("shape and count disagree for {}", f[0])));
                }
                let stop = offset.checked_add(count).filter(|&s| s <= floats);
                let Some(stop) = stop else {
                    return Err(bad(format!("tensor {} runs past the payload", f[0])));
                };
                if covered[offset..stop].iter().any(|&c| c) {
                    return Err(bad(format!("tensor {} overlaps another tensor", f[0])));
                }
                covered[offset..stop].iter_mut().for_each(|c| *c = true);
                let data = payload[offset * 4..stop * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.push(Entry {
                    name: f[0].to_string(),
                    kind,
                    tensor: Tensor::new(shape, data)?,
                });
            } else {
                return Err(bad(format!("unexpected header line {line:?}")));
            }
        }
        let config = RunConfig::parse(&config_text).map_err(|e| bad(format!("embedded config: {e}")))?;
        Ok(Self { config, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
