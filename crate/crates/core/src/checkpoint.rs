//! Single-file checkpoints: a magic line, the header length, a JSON header
//! (format version, model config, training metadata, tensor table) and the
//! raw little-endian f32 arrays.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::DehazeModel;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DEHAZE-CHECKPOINT";

/// Progress recorded alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub config_hash: Option<String>,
}

/// Adam moments, keyed like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DehazeModel,
    pub meta: TrainMeta,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: TrainMeta,
    optimizer_step: Option<u64>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

const OPT_M: &str = "optimizer.m.";
const OPT_V: &str = "optimizer.v.";

impl Checkpoint {
    pub fn new(model: DehazeModel) -> Checkpoint {
        Checkpoint {
            model,
            meta: TrainMeta::default(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut stores: Vec<(&str, &ParamStore)> = vec![("", &self.model.params)];
        if let Some(opt) = &self.optimizer {
            stores.push((OPT_M, &opt.m));
            stores.push((OPT_V, &opt.v));
        }
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (prefix, store) in &stores {
            for (name, p) in store.iter() {
                tensors.push(Entry {
                    name: format!("{prefix}{name}"),
                    dtype: "f32".into(),
                    shape: p.shape.clone(),
                    offset,
                });
                offset += p.values.len() * 4;
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n{json}", json.len()).into_bytes();
        out.reserve(offset);
        for (_, store) in &stores {
            for (_, p) in store.iter() {
                for v in &p.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let parse = |m: &str| Error::CheckpointParse(m.to_string());
        let (magic_line, rest) = split_line(bytes).ok_or_else(|| parse("missing magic line"))?;
        let magic_line = std::str::from_utf8(magic_line).map_err(|_| parse("magic line is not text"))?;
        let version = magic_line
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| parse("not a checkpoint file"))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (len_line, rest) = split_line(rest).ok_or_else(|| parse("missing header length"))?;
        let header_len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse("bad header length"))?;
        if rest.len() < header_len {
            return Err(parse("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::CheckpointParse(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        header.config.check()?;
        let data = &rest[header_len..];

        let mut params = DehazeModel::init_params(&header.config, 0);
        let mut m = params.clone();
        let mut v = params.clone();
        let mut seen = std::collections::BTreeSet::new();
        let mut problems = Vec::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::CheckpointParse(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let (store, key) = if let Some(k) = e.name.strip_prefix(OPT_M) {
                (&mut m, k)
            } else if let Some(k) = e.name.strip_prefix(OPT_V) {
                (&mut v, k)
            } else {
                (&mut params, e.name.as_str())
            };
            let Some(p) = store.get_mut(key) else {
                problems.push(format!("{} (unexpected)", e.name));
                continue;
            };
            if p.shape != e.shape {
                problems.push(format!("{} (stored {:?}, expected {:?})", e.name, e.shape, p.shape));
                continue;
            }
            let len = p.values.len() * 4;
            let raw = data
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::CheckpointParse(format!("{}: data truncated", e.name)))?;
            for (dst, chunk) in p.values.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            seen.insert(e.name.clone());
        }
        for name in params.names() {
            if !seen.contains(name) {
                problems.push(format!("{name} (missing)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointShape(problems));
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerState { step, m, v });
        if let Some(opt) = &optimizer {
            let missing: Vec<String> = opt
                .m
                .names()
                .map(|n| format!("{OPT_M}{n}"))
                .chain(opt.v.names().map(|n| format!("{OPT_V}{n}")))
                .filter(|n| !seen.contains(n))
                .collect();
            if !missing.is_empty() {
                return Err(Error::CheckpointShape(missing.into_iter().map(|n| format!("{n} (missing)")).collect()));
            }
        }
        Ok(Checkpoint {
            model: DehazeModel {
                config: header.config,
                params,
            },
            meta: header.meta,
            optimizer,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn save_checkpoint(model: &DehazeModel, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DehazeModel> {
    Checkpoint::load(path).map(|c| c.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DehazeModel {
        DehazeModel::new(ModelConfig::micro(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new(model());
        ck.meta.epoch = 4;
        ck.meta.best_loss = Some(0.125);
        let mut m = ck.model.params.clone();
        m.iter_mut().for_each(|(_, p)| p.values.iter_mut().for_each(|v| *v = 0.5));
        ck.optimizer = Some(OptimizerState {
            step: 17,
            m: m.clone(),
            v: m,
        });
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = Checkpoint::new(model()).to_bytes();
        for cut in [5, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointParse(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = Checkpoint::new(model()).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..20]).replace(&format!(" {FORMAT_VERSION}\n"), " 9\n");
        let mut tampered = text.into_bytes();
        tampered.extend_from_slice(&bytes[20..]);
        match Checkpoint::from_bytes(&tampered) {
            Err(Error::CheckpointVersion { found: 9, expected }) => assert_eq!(expected, FORMAT_VERSION),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_tamper_lists_offending_keys() {
        let bytes = Checkpoint::new(model()).to_bytes();
        let (_, rest) = split_line(&bytes).unwrap();
        let (len_line, rest) = split_line(rest).unwrap();
        let n: usize = std::str::from_utf8(len_line).unwrap().parse().unwrap();
        let header = std::str::from_utf8(&rest[..n]).unwrap();
        let changed = header.replace("\"head_channels\":2", "\"head_channels\":4");
        assert_ne!(changed, header);
        let mut tampered = format!("{MAGIC} {FORMAT_VERSION}\n{}\n{changed}", changed.len()).into_bytes();
        tampered.extend_from_slice(&rest[n..]);
        match Checkpoint::from_bytes(&tampered) {
            Err(Error::CheckpointShape(keys)) => {
                assert!(keys.iter().any(|k| k.starts_with("dec.head.weight")), "{keys:?}");
                assert!(keys.iter().all(|k| k.starts_with("dec.")), "{keys:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
