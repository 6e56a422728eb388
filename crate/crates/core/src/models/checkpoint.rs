use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureExtractorConfig, ModelBundle, ModelError, Task};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: FeatureExtractorConfig,
    task: Task,
    #[serde(default)]
    summary: serde_json::Value,
}

/// Layout: `TCKP`, u32 version, u64 JSON length, JSON, u32 tensor count,
/// then per tensor u32 name length, name, u32 rank, u64 dims, f32 values.
/// All integers little-endian.
pub fn write_checkpoint<W: Write>(bundle: &ModelBundle<f32>, summary: &serde_json::Value, mut w: W) -> Result<(), ModelError> {
    let meta = serde_json::to_vec(&Meta { config: bundle.config.clone(), task: bundle.task, summary: summary.clone() })
        .map_err(|e| ModelError::Metadata(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    let tensors: Vec<_> = bundle.extractor.iter().chain(bundle.head.iter()).collect();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let avail = self.buf.len() - self.pos;
        if n > avail {
            return Err(ModelError::Truncated { offset: self.buf.len(), needed: n - avail, what: what.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelBundle<f32>, serde_json::Value), ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = &bytes[..bytes.len().min(4)];
    if magic != MAGIC {
        return Err(ModelError::BadMagic { found: magic.to_vec() });
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| ModelError::Metadata(e.to_string()))?;
    let count = r.u32("tensor count")?;
    let mut extractor = ParamSet::new();
    let mut head = ParamSet::new();
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = r.u32(&what)? as usize;
        let name =
            std::str::from_utf8(r.take(name_len, &what)?).map_err(|e| ModelError::Metadata(format!("tensor {i} name: {e}")))?.to_string();
        let rank = r.u32(&name)? as usize;
        let shape = (0..rank).map(|_| r.u64(&name).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let raw = r.take(n.saturating_mul(4), &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data)?;
        if name.starts_with("head.") || name.starts_with("dec.") {
            head.insert(name, t);
        } else {
            extractor.insert(name, t);
        }
    }
    let bundle = ModelBundle { config: meta.config, task: meta.task, extractor, head };
    bundle.validate()?;
    Ok((bundle, meta.summary))
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, summary: &serde_json::Value, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(bundle, summary, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, serde_json::Value), ModelError> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(task: Task) -> ModelBundle<f32> {
        let cfg = FeatureExtractorConfig { channels: 2, window_samples: 64, conv_kernel: 5, pool_size: 4, embed_dim: 6, dropout_rate: 0.5 };
        ModelBundle::init(cfg, task, 9).unwrap()
    }

    fn bytes(b: &ModelBundle<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(b, &serde_json::json!({"epochs": 3}), &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for task in [Task::Rp, Task::Ts, Task::Ae, Task::Supervised] {
            let b = bundle(task);
            let (back, summary) = read_checkpoint(&bytes(&b)).unwrap();
            assert_eq!(summary["epochs"], 3);
            assert_eq!(back.task, task);
            for (set, other) in [(&b.extractor, &back.extractor), (&b.head, &back.head)] {
                assert_eq!(set.len(), other.len());
                for ((n1, t1), (n2, t2)) in set.iter().zip(other.iter()) {
                    assert_eq!(n1, n2);
                    assert_eq!(t1.shape(), t2.shape());
                    let a: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
                    let c: Vec<u32> = t2.data().iter().map(|x| x.to_bits()).collect();
                    assert_eq!(a, c);
                }
            }
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let good = bytes(&bundle(Task::Rp));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(ModelError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(read_checkpoint(&bad), Err(ModelError::VersionMismatch { found: 2, .. })));
        for cut in [6, 20, good.len() - 1] {
            assert!(matches!(read_checkpoint(&good[..cut]), Err(ModelError::Truncated { .. })), "cut {cut}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tckp");
        let b = bundle(Task::Ts);
        save_checkpoint(&b, &serde_json::Value::Null, &path).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back, b);
    }
}
