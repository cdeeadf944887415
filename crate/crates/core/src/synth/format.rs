//! Binary dataset file.
//!
//! ```text
//! "TRC1" | record count: u64
//! per record:
//!   T: u32 | C_in: u32 | N: u32 | seed: u64 | period class: u8
//!   N × (midpoint: f64, duration: f64)
//!   T·C_in × f32 features, row-major
//!   CRC-32 of the record bytes above: u32
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{PeriodClass, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::Interval;

const MAGIC: &[u8; 4] = b"TRC1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1;

pub fn encode_dataset(samples: &[SequenceSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let start = out.len();
        out.extend_from_slice(&(s.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&(s.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(s.cycles.len() as u32).to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.push(s.period_class.code());
        for c in &s.cycles {
            out.extend_from_slice(&c.mid().to_le_bytes());
            out.extend_from_slice(&c.dur().to_le_bytes());
        }
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated dataset while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SequenceSample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected TRC1".into()));
    }
    let count = r.u64("record count")?;
    let mut samples = Vec::new();
    for record in 0..count as usize {
        let start = r.pos;
        let t = r.u32("header")? as usize;
        let c = r.u32("header")? as usize;
        let n = r.u32("header")? as usize;
        let seed = r.u64("header")?;
        let class_code = r.take(1, "header")?[0];

        let ann = r.take(16 * n, "annotations")?;
        let feature_bytes = t
            .checked_mul(c)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record {record}: feature size overflows")))?;
        let feats = r.take(feature_bytes, "features")?;
        let computed = crc32fast::hash(&bytes[start..r.pos]);
        let stored = r.u32("checksum")?;
        if stored != computed {
            return Err(Error::Checksum {
                record,
                stored,
                computed,
            });
        }

        let period_class = PeriodClass::from_code(class_code)
            .ok_or_else(|| Error::Format(format!("record {record}: unknown period class {class_code}")))?;
        let cycles = ann
            .chunks_exact(16)
            .map(|b| {
                let m = f64::from_le_bytes(b[..8].try_into().unwrap());
                let d = f64::from_le_bytes(b[8..].try_into().unwrap());
                Interval::new(m, d).map_err(|e| Error::Format(format!("record {record}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = feats
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(SequenceSample {
            seq_len: t,
            input_dim: c,
            features,
            cycles,
            period_class,
            seed,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - r.pos
        )));
    }
    const { assert!(HEADER_LEN == 21) };
    Ok(samples)
}

pub fn write_dataset(samples: &[SequenceSample], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequenceSample>> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, GeneratorConfig};
    use proptest::prelude::*;

    fn samples(n: usize, seed: u64) -> Vec<SequenceSample> {
        let cfg = GeneratorConfig {
            seq_len: 48,
            input_dim: 3,
            count_range: [0, 3],
            period_range: [4, 12],
            master_seed: seed,
            ..GeneratorConfig::default()
        };
        generate_split(&cfg, n, 0, 0).unwrap().train
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_dataset(&[]);
        assert_eq!(bytes.len(), 12);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let s = samples(2, 1);
        let mut bytes = encode_dataset(&s);
        let n = bytes.len();
        bytes[n - 40] ^= 0x01;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Checksum { record: 1, .. })));
    }

    #[test]
    fn truncation_and_bad_magic() {
        let bytes = encode_dataset(&samples(1, 2));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"TRC2");
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout() {
        let s = samples(1, 3);
        let bytes = encode_dataset(&s);
        let n = s[0].true_count();
        assert_eq!(bytes.len(), 12 + HEADER_LEN + 16 * n + 4 * 48 * 3 + 4);
        assert_eq!(&bytes[..4], b"TRC1");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 48);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip(n in 0usize..5, seed in any::<u64>()) {
            let s = samples(n, seed);
            let bytes = encode_dataset(&s);
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_dataset(&back), bytes);
        }
    }
}
