//! UORP checkpoints.
//!
//! ```text
//! "UORP" | version u32 | blob_len u32 | blob (key=value lines, sorted)
//! repeated to EOF: name_len u16 | name | rank u8 | extents u32[rank] | f32 LE data
//! ```
//!
//! Optimizer moments travel as extra tensors named `opt.m.<param>` and
//! `opt.v.<param>`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Autoencoder, ModelConfig, ProbeClassifier};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const UORP_MAGIC: [u8; 4] = *b"UORP";
pub const UORP_VERSION: u32 = 1;
pub const OPT_M_PREFIX: &str = "opt.m.";
pub const OPT_V_PREFIX: &str = "opt.v.";

pub const KIND_AUTOENCODER: &str = "autoencoder";
pub const KIND_PROBE: &str = "probe";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Every model parameter must be present with its shape, and nothing else.
    Strict,
    /// Missing and unknown names are tolerated; shapes of shared names must still match.
    AllowMissing,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Canonical key=value metadata (model config and training state).
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn get_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("checkpoint has no {key:?} entry")))?
            .parse()
            .map_err(|_| Error::config(format!("checkpoint entry {key:?} is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::config(format!("tensor {name} cannot be stored")));
        }
        if self.tensor(&name).is_some() {
            return Err(Error::config(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.meta)
    }

    pub fn kind(&self) -> &str {
        self.get("kind").unwrap_or(KIND_AUTOENCODER)
    }

    /// Whether optimizer moments are stored.
    pub fn has_optimizer(&self) -> bool {
        self.get("optimizer") == Some("1")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = UORP_MAGIC.to_vec();
        out.extend_from_slice(&UORP_VERSION.to_le_bytes());
        let blob: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != UORP_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected \"UORP\"".into(),
            });
        }
        let version = r.u32("version")?;
        if version != UORP_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let blob_len = r.u32("config length")? as usize;
        let blob_at = r.pos;
        let blob = std::str::from_utf8(r.take(blob_len, "config blob")?).map_err(|_| Error::Format {
            offset: blob_at as u64,
            message: "config blob is not UTF-8".into(),
        })?;
        let mut ck = Checkpoint::new();
        for line in blob.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                offset: blob_at as u64,
                message: format!("config line {line:?} has no '='"),
            })?;
            ck.meta.insert(k.to_string(), v.to_string());
        }
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                message: format!("tensor {name}: {e}"),
            })?;
            ck.push(name, t).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint holding every parameter of `store` plus the model config.
    pub fn from_params(config: &ModelConfig, kind: &str, store: &ParamStore<f32>) -> Result<Self> {
        let mut ck = Checkpoint::new();
        for (k, v) in config.to_kv() {
            ck.set(k, v);
        }
        ck.set("kind", kind);
        ck.set("optimizer", 0);
        for (name, t) in store.iter() {
            ck.push(name, t.clone())?;
        }
        Ok(ck)
    }

    /// Copies stored tensors into `store`, reporting every problem at once.
    /// Returns the parameter names that were restored.
    pub fn restore_into(&self, store: &mut ParamStore<f32>, mode: LoadMode) -> Result<HashSet<String>> {
        let mut problems = vec![];
        let mut restored = HashSet::new();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            match self.tensor(&name) {
                Some(t) if t.shape() == store.get(id).shape() => {
                    *store.get_mut(id) = t.clone();
                    restored.insert(name);
                }
                Some(t) => problems.push(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.get(id).shape()
                )),
                None if mode == LoadMode::Strict => problems.push(format!("{name}: missing from checkpoint")),
                None => {}
            }
        }
        if mode == LoadMode::Strict {
            for (name, _) in &self.tensors {
                if !name.starts_with(OPT_M_PREFIX) && !name.starts_with(OPT_V_PREFIX) && store.id(name).is_none() {
                    problems.push(format!("{name}: not a model parameter"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Mismatch(problems));
        }
        Ok(restored)
    }

    /// Rebuilds an autoencoder. A config that differs from `expected`
    /// (when given) is reported before any tensor is touched.
    pub fn load_autoencoder(&self, expected: Option<&ModelConfig>, mode: LoadMode) -> Result<Autoencoder<f32>> {
        let config = self.model_config()?;
        if let Some(want) = expected {
            check_config(&config, want)?;
        }
        let mut model = Autoencoder::new(config, 0)?;
        self.restore_into(model.params_mut(), mode)?;
        Ok(model)
    }

    /// Rebuilds a probe. Strict mode needs a probe checkpoint with matching
    /// classes. `AllowMissing` also accepts an autoencoder checkpoint: the
    /// encoder must be complete, decoders are dropped and a missing head is
    /// freshly initialized from `seed`.
    pub fn load_probe(&self, classes: usize, seed: u64, mode: LoadMode) -> Result<ProbeClassifier<f32>> {
        let config = self.model_config()?;
        let mut probe = ProbeClassifier::new(config, classes, seed)?;
        if self.kind() == KIND_PROBE {
            let stored: usize = self.get_parsed("classes")?;
            if stored != classes {
                return Err(Error::Mismatch(vec![format!(
                    "probe checkpoint has {stored} classes, task needs {classes}"
                )]));
            }
        } else if mode == LoadMode::Strict {
            return Err(Error::Mismatch(vec![format!(
                "{:?} checkpoint is not a probe; loading only its encoder needs permissive mode",
                self.kind()
            )]));
        }
        let restored = self.restore_into(probe.params_mut(), mode)?;
        let missing: Vec<String> = probe
            .params()
            .iter()
            .filter(|(n, _)| crate::model::is_encoder_param(n) && !restored.contains(*n))
            .map(|(n, _)| format!("{n}: missing from checkpoint"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Mismatch(missing));
        }
        probe.set_encoder_loaded();
        Ok(probe)
    }
}

/// Lists every differing model key.
pub fn check_config(found: &ModelConfig, want: &ModelConfig) -> Result<()> {
    let problems: Vec<String> = found
        .to_kv()
        .into_iter()
        .zip(want.to_kv())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((k, a), (_, b))| format!("{k}: {a} in checkpoint, {b} configured"))
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(problems))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
