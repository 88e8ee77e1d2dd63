//! Binary split cache.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "OSRKDSPL"
//! version    u32       currently 1
//! n_points   u32       points per cloud (N0)
//! k          u32       number of known classes
//! counts     4 × u64   closed_train, closed_test, open_test, pseudo_open_train
//! names      k × (u32 byte length, UTF-8 bytes)
//! records    per partition, in the order above:
//!            label u32, provenance u8, id (u32 length, UTF-8), N0 × 3 f32
//! ```

use std::fs;
use std::path::Path;

use super::{DatasetSplit, LabeledSample, PointCloud, Provenance};
use crate::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"OSRKDSPL";
pub const CACHE_VERSION: u32 = 1;

pub fn write_cache(split: &DatasetSplit, path: &Path) -> Result<()> {
    split.validate()?;
    fs::write(path, encode(split))?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<DatasetSplit> {
    decode(&fs::read(path)?)
}

pub fn encode(split: &DatasetSplit) -> Vec<u8> {
    let n_points = split.n_points().unwrap_or(0);
    let parts = [
        &split.closed_train,
        &split.closed_test,
        &split.open_test,
        &split.pseudo_open_train,
    ];
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(64 + n * (16 + n_points * 12));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_points as u32).to_le_bytes());
    out.extend_from_slice(&(split.class_names.len() as u32).to_le_bytes());
    for p in parts {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    }
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for name in &split.class_names {
        put_str(&mut out, name);
    }
    for s in parts.into_iter().flatten() {
        out.extend_from_slice(&s.label.to_le_bytes());
        out.push(s.provenance.to_byte());
        put_str(&mut out, &s.id);
        for c in s.cloud.flat() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CacheTruncated {
                offset: self.pos,
                needed: n,
                len: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CacheCorrupt(format!("invalid UTF-8 at offset {}", self.pos - n)))
    }
}

pub fn decode(buf: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(Error::CacheCorrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::CacheVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let n_points = r.u32()? as usize;
    let k = r.u32()?;
    let mut counts = [0u64; 4];
    for c in &mut counts {
        *c = r.u64()?;
    }
    let class_names = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;

    let mut parts: [Vec<LabeledSample>; 4] = Default::default();
    for (part, &count) in parts.iter_mut().zip(&counts) {
        for _ in 0..count {
            let label = r.u32()?;
            let prov_byte = r.take(1)?[0];
            let provenance = Provenance::from_byte(prov_byte)
                .ok_or_else(|| Error::CacheCorrupt(format!("unknown provenance {prov_byte}")))?;
            let id = r.string()?;
            let raw = r.take(n_points * 12)?;
            let points = raw
                .chunks_exact(12)
                .map(|c| {
                    [0, 4, 8].map(|o| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()))
                })
                .collect();
            let cloud = PointCloud::new(points)
                .map_err(|e| Error::CacheCorrupt(format!("sample {id}: {e}")))?;
            part.push(LabeledSample {
                id,
                cloud,
                label,
                provenance,
            });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::CacheCorrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let [closed_train, closed_test, open_test, pseudo_open_train] = parts;
    let split = DatasetSplit {
        closed_train,
        closed_test,
        open_test,
        pseudo_open_train,
        class_names,
    };
    split
        .validate()
        .map_err(|e| Error::CacheCorrupt(e.to_string()))?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: u32, prov: Provenance, x: f32) -> LabeledSample {
        LabeledSample {
            id: id.into(),
            cloud: PointCloud::new(vec![[x, -x, 0.5], [1e-7, f32::MIN_POSITIVE, -0.0]]).unwrap(),
            label,
            provenance: prov,
        }
    }

    fn three() -> DatasetSplit {
        DatasetSplit {
            closed_train: vec![sample("a/train/1", 0, Provenance::Real, 0.1)],
            closed_test: vec![sample("b/test/1", 1, Provenance::Real, 0.3)],
            open_test: vec![],
            pseudo_open_train: vec![sample("pseudo/n2/0", 2, Provenance::PseudoOpen, 0.7)],
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = three();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
        assert!(back.open_test.is_empty());
        let bits = |s: &DatasetSplit| -> Vec<u32> {
            s.all_samples().flat_map(|x| x.cloud.flat().map(f32::to_bits).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&three());
        for cut in [3, 20, bytes.len() - 5] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CacheTruncated { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = encode(&three());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::CacheVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.osrc");
        write_cache(&three(), &p).unwrap();
        assert_eq!(read_cache(&p).unwrap(), three());
    }
}
