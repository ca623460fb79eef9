//! Binary trajectory and checkpoint files, plus run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{Action, Event, FrameTensor, Trajectory, FRAME_CHANNELS, FRAME_SIDE};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::optim::AdamW;
use crate::train::Checkpoint;

pub const TRAJECTORY_MAGIC: &[u8; 5] = b"MTRJ1";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCKP1";
pub const FORMAT_VERSION: u32 = 1;
/// Label length marking an absent skill label.
const NO_LABEL: u32 = u32::MAX;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Invalid("size overflow".into()))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset: start,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn magic(&mut self, want: &[u8; 5]) -> Result<()> {
        if self.take(5, "magic")? != want {
            self.pos = 0;
            return self.fail(format!("bad magic, expected {}", String::from_utf8_lossy(want)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail("trailing bytes");
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes trajectories in the `MTRJ1` layout.
pub fn encode_trajectories(trajs: &[Trajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(trajs.len() as u32).to_le_bytes());
    for t in trajs {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for dim in [FRAME_SIDE, FRAME_SIDE, FRAME_CHANNELS] {
            out.extend_from_slice(&(dim as u16).to_le_bytes());
        }
        out.push(t.actions.is_some() as u8);
        out.push(t.pseudo_labeled as u8);
        out.extend_from_slice(&t.seed.to_le_bytes());
        match &t.skill_label {
            Some(label) => put_str(&mut out, label),
            None => out.extend_from_slice(&NO_LABEL.to_le_bytes()),
        }
        for f in &t.frames {
            for v in &f.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(actions) = &t.actions {
            for a in actions {
                out.push(a.move_index() as u8);
                out.push(a.turn_index() as u8);
            }
        }
        out.extend_from_slice(&(t.events.len() as u32).to_le_bytes());
        for e in &t.events {
            out.extend_from_slice(&e.tick.to_le_bytes());
            put_str(&mut out, &e.tag);
        }
    }
    out
}

pub fn decode_trajectories(buf: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = Reader::new(buf);
    r.magic(TRAJECTORY_MAGIC)?;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported format version {version}"));
    }
    let n = r.u32("trajectory count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32("episode length")? as usize;
        let dims = [r.u16("height")?, r.u16("width")?, r.u16("channels")?];
        if dims.map(usize::from) != [FRAME_SIDE, FRAME_SIDE, FRAME_CHANNELS] {
            r.pos -= 6;
            return r.fail(format!("unsupported frame shape {dims:?}"));
        }
        let has_actions = r.u8("action flag")?;
        let pseudo = r.u8("pseudo-label flag")?;
        if has_actions > 1 || pseudo > 1 {
            r.pos -= 2;
            return r.fail("flag bytes must be 0 or 1");
        }
        let seed = r.u64("seed")?;
        let label_len = r.u32("label length")?;
        let skill_label = if label_len == NO_LABEL {
            None
        } else {
            Some(r.string(label_len as usize, "label")?)
        };
        let mut frames = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            frames.push(FrameTensor {
                values: r.f32s(FrameTensor::LEN, "frame")?,
            });
        }
        let actions = if has_actions == 1 {
            let mut acts = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                let at = r.pos;
                let (m, t) = (r.u8("action")?, r.u8("action")?);
                acts.push(Action::from_indices(m as usize, t as usize).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })?);
            }
            Some(acts)
        } else {
            None
        };
        let n_events = r.u32("event count")?;
        let mut events = Vec::new();
        for _ in 0..n_events {
            let tick = r.u32("event tick")?;
            let tag_len = r.u32("event tag length")? as usize;
            events.push(Event {
                tick,
                tag: r.string(tag_len, "event tag")?,
            });
        }
        out.push(Trajectory {
            frames,
            actions,
            events,
            skill_label,
            seed,
            pseudo_labeled: pseudo == 1,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    Ok(std::fs::write(path, encode_trajectories(trajs))?)
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    decode_trajectories(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<TensorEntry>,
    pub second_moment: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerManifest>,
}

struct Blob {
    bytes: Vec<u8>,
}

impl Blob {
    fn push(&mut self, name: &str, t: &Tensor<f32>) -> TensorEntry {
        let entry = TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: self.bytes.len() as u64,
        };
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        entry
    }
}

/// Serializes a checkpoint: magic, manifest length (u64), JSON manifest,
/// then every tensor as little-endian `f32` in index order.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob = Blob { bytes: Vec::new() };
    let params = (0..ck.params.len())
        .map(|i| blob.push(ck.params.name(i), ck.params.value(i)))
        .collect();
    let optimizer = ck.optimizer.as_ref().map(|opt| {
        let mut moments = |ts: &[Tensor<f32>], tag: &str| {
            ts.iter()
                .enumerate()
                .map(|(i, t)| blob.push(&format!("{tag}/{}", ck.params.name(i)), t))
                .collect::<Vec<_>>()
        };
        let first_moment = moments(&opt.m, "m");
        let second_moment = moments(&opt.v, "v");
        OptimizerManifest {
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            step: opt.step,
            first_moment,
            second_moment,
        }
    });
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        step: ck.step,
        params,
        optimizer,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(13 + json.len() + blob.bytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

fn read_tensor(blob: &[u8], base: usize, e: &TensorEntry, expected_offset: u64) -> Result<Tensor<f32>> {
    let at = base + e.offset as usize;
    if e.dtype != "f32" {
        return Err(Error::Format {
            offset: base,
            msg: format!("tensor {} has unsupported dtype {}", e.name, e.dtype),
        });
    }
    if e.offset != expected_offset {
        return Err(Error::Format {
            offset: base,
            msg: format!("tensor {} offset {} breaks the contiguous layout", e.name, e.offset),
        });
    }
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    if blob.len() < start + 4 * n {
        return Err(Error::Format {
            offset: base + blob.len(),
            msg: format!("truncated in tensor {} (starts at byte {at})", e.name),
        });
    }
    let data = blob[start..start + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&e.shape, data)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let len = r.u64("manifest length")? as usize;
    let start = r.pos;
    let json = r.take(len, "manifest")?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: start,
        msg: format!("manifest: {e}"),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: start,
            msg: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let base = r.pos;
    let blob = &buf[base..];
    let mut cursor = 0u64;
    let mut next = |e: &TensorEntry| -> Result<Tensor<f32>> {
        let t = read_tensor(blob, base, e, cursor)?;
        cursor += 4 * t.len() as u64;
        Ok(t)
    };
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let t = next(e)?;
        params.insert(e.name.clone(), t)?;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            if o.first_moment.len() != params.len() || o.second_moment.len() != params.len() {
                return Err(Error::Format {
                    offset: start,
                    msg: "optimizer state does not match the parameters".into(),
                });
            }
            let m = o.first_moment.iter().map(&mut next).collect::<Result<Vec<_>>>()?;
            let v = o.second_moment.iter().map(&mut next).collect::<Result<Vec<_>>>()?;
            Some(AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
                m,
                v,
            })
        }
    };
    if cursor as usize != blob.len() {
        return Err(Error::Format {
            offset: base + cursor as usize,
            msg: "trailing bytes after the tensor blob".into(),
        });
    }
    manifest.config.validate()?;
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
        optimizer,
    })
}

/// The parsed manifest alone, for inspection.
pub fn checkpoint_manifest(buf: &[u8]) -> Result<CheckpointManifest> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let len = r.u64("manifest length")? as usize;
    let start = r.pos;
    serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Format {
        offset: start,
        msg: format!("manifest: {e}"),
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(ck)?)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("manifest.json");
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, strip_actions, EnvConfig, Skill};

    fn sample() -> Vec<Trajectory> {
        let cfg = EnvConfig::default();
        let mut d = generate_dataset(&[Skill::ChopTrees, Skill::HuntAnimal], 1, 12, 3, &cfg).unwrap();
        let mut stripped = strip_actions(&d[..1]);
        stripped[0].skill_label = None;
        d[1].pseudo_labeled = true;
        d.extend(stripped);
        d
    }

    #[test]
    fn trajectories_round_trip_bytes() {
        let d = sample();
        let bytes = encode_trajectories(&d);
        let back = decode_trajectories(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_trajectories(&back), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_trajectories(&sample());
        // Header is 13 bytes, then 4 + 6 + 2 + 8 + 4 + label; cut inside the first frame.
        let cut = 13 + 24 + "chop_trees".len() + 100;
        match decode_trajectories(&bytes[..cut]) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset <= cut, "{offset}");
                assert!(msg.contains("frame"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let mut wrong = bytes.clone();
        wrong[5] = 9;
        assert!(matches!(decode_trajectories(&wrong), Err(Error::Format { offset: 5, .. })));
        wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_trajectories(&wrong), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trips_and_offsets_are_monotone() {
        let mut cfg = RunConfig::default();
        cfg.encoder.hidden = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.pool_heads = 2;
        cfg.train.chunk_len = 4;
        let mut ck = Checkpoint::untrained(&cfg).unwrap();
        let mut opt = AdamW::new(&ck.params, 0.01);
        opt.step = 3;
        opt.m[0].data_mut()[0] = 0.25;
        ck.optimizer = Some(opt);
        ck.step = 17;
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.config, ck.config);
        assert!(back.params.same_values(&ck.params, ""));
        let m = checkpoint_manifest(&bytes).unwrap();
        let mut end = 0;
        for e in &m.params {
            assert_eq!(e.offset, end);
            end = e.offset + 4 * e.shape.iter().product::<usize>() as u64;
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
