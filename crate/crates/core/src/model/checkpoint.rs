use std::path::Path;

use crate::data::{write_atomic, StreamState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &str = "MOELAB-CHECKPOINT 1";

/// Named tensor payload of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Text header followed by little-endian `f64` blobs.
///
/// ```text
/// MOELAB-CHECKPOINT 1
/// schema_hash=…
/// step=…
/// stream_seed=…
/// stream_word_pos=…
/// blobs=…
/// config.<key>=<value>      (one line per config key)
/// end
/// <blob>*  name_len:u32 name ndim:u32 dims:u64* values:f64*
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the configuration as `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    pub schema_hash: String,
    pub step: u64,
    pub stream: StreamState,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{CHECKPOINT_MAGIC}\nschema_hash={}\nstep={}\nstream_seed={}\nstream_word_pos={}\nblobs={}\n",
            self.schema_hash,
            self.step,
            self.stream.seed,
            self.stream.word_pos,
            self.blobs.len()
        );
        for (k, v) in &self.config {
            head.push_str(&format!("config.{k}={v}\n"));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: String| Error::data(format!("checkpoint: {what}"));
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8".into()))?;
            pos += end + 1;
            Ok(s.to_string())
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut ck = Checkpoint {
            config: Vec::new(),
            schema_hash: String::new(),
            step: 0,
            stream: StreamState { seed: 0, word_pos: 0 },
            blobs: Vec::new(),
        };
        let mut count = 0usize;
        loop {
            let l = line()?;
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("malformed header line `{l}`")))?;
            let num = |v: &str| v.parse::<u128>().map_err(|_| bad(format!("bad number in `{l}`")));
            match k {
                "schema_hash" => ck.schema_hash = v.to_string(),
                "step" => ck.step = num(v)? as u64,
                "stream_seed" => ck.stream.seed = num(v)? as u64,
                "stream_word_pos" => ck.stream.word_pos = num(v)?,
                "blobs" => count = num(v)? as usize,
                _ => match k.strip_prefix("config.") {
                    Some(key) => ck.config.push((key.to_string(), v.to_string())),
                    None => return Err(bad(format!("unknown header key `{k}`"))),
                },
            }
        }
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated payload".into()))?;
            *pos += n;
            Ok(s)
        };
        for _ in 0..count {
            let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, n)?.to_vec()).map_err(|_| bad("blob name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(&mut pos, len * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ck.blobs.push(Blob { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after the last blob".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl Model {
    /// Every parameter as a blob, in registration order.
    pub fn param_blobs(&self) -> Vec<Blob> {
        self.store
            .iter()
            .map(|(_, p)| Blob {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites parameters from checkpoint blobs; every parameter must be
    /// present with its exact shape.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.schema_hash != self.schema_hash {
            return Err(Error::Compat(format!(
                "checkpoint schema {} does not match {}",
                ck.schema_hash, self.schema_hash
            )));
        }
        let mut updates = Vec::new();
        for (id, p) in self.store.iter() {
            let b = ck
                .blob(&p.name)
                .ok_or_else(|| Error::Compat(format!("parameter `{}` missing from checkpoint", p.name)))?;
            if b.shape != p.value.shape() {
                return Err(Error::Compat(format!(
                    "parameter `{}` has shape {:?} in the checkpoint, {:?} in the model",
                    p.name,
                    b.shape,
                    p.value.shape()
                )));
            }
            updates.push((id, Tensor::new(b.shape.clone(), b.data.clone())?));
        }
        for (id, t) in updates {
            self.store.get_mut(id).value = t;
        }
        Ok(())
    }
}
