//! Historical access counters and their compact on-disk form.

use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::pmh::AccessRecord;

const MAGIC: &[u8] = b"PAMTLOG";
const VERSION: u8 = 1;

/// Per-row count of past sequences that read the row, and the number of
/// past queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessLog {
    hist: Vec<u64>,
    total_queries: u64,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or_else(|| Error::Format {
            what: "access log",
            detail: "truncated varint".into(),
        })?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format {
        what: "access log",
        detail: "varint too long".into(),
    })
}

impl AccessLog {
    pub fn new(rows: usize) -> Self {
        Self {
            hist: vec![0; rows],
            total_queries: 0,
        }
    }

    pub fn hist(&self) -> &[u64] {
        &self.hist
    }

    pub fn total_queries(&self) -> u64 {
        self.total_queries
    }

    pub fn rows(&self) -> usize {
        self.hist.len()
    }

    /// Add one count per row per record that read it, and one query per record.
    pub fn update(&mut self, records: &[AccessRecord]) -> Result<()> {
        for r in records {
            if let Some(&bad) = r.union.iter().find(|&&n| n >= self.hist.len()) {
                return Err(contract(format!("access to row {bad} beyond {} rows", self.hist.len())));
            }
        }
        for r in records {
            for &n in &r.union {
                self.hist[n] += 1;
            }
        }
        self.total_queries += records.len() as u64;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        put_varint(&mut out, self.hist.len() as u64);
        put_varint(&mut out, self.total_queries);
        for &c in &self.hist {
            put_varint(&mut out, c);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) || bytes.get(MAGIC.len()) != Some(&VERSION) {
            return Err(Error::Format {
                what: "access log",
                detail: "bad header or version".into(),
            });
        }
        let mut pos = MAGIC.len() + 1;
        let rows = get_varint(bytes, &mut pos)? as usize;
        let total_queries = get_varint(bytes, &mut pos)?;
        let hist = (0..rows)
            .map(|_| get_varint(bytes, &mut pos))
            .collect::<Result<Vec<_>>>()?;
        if pos != bytes.len() {
            return Err(Error::Format {
                what: "access log",
                detail: "trailing bytes".into(),
            });
        }
        Ok(Self {
            hist,
            total_queries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmh::record_access;

    #[test]
    fn update_counts_sequences_not_steps() {
        let mut log = AccessLog::new(8);
        log.update(&[]).unwrap();
        assert_eq!(log, AccessLog::new(8));
        log.update(&[record_access(0, vec![[5].into(), [5].into()])]).unwrap();
        assert_eq!(log.hist()[5], 1);
        let three: Vec<_> = (0..3).map(|q| record_access(q, vec![[5].into()])).collect();
        log.update(&three).unwrap();
        assert_eq!(log.hist()[5], 4);
        assert_eq!(log.total_queries(), 4);
        assert!(log.update(&[record_access(0, vec![[8].into()])]).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let mut log = AccessLog::new(300);
        log.update(&[record_access(0, vec![[0, 299].into()])]).unwrap();
        for _ in 0..200 {
            log.update(&[record_access(0, vec![[7].into()])]).unwrap();
        }
        let bytes = log.to_bytes();
        assert_eq!(AccessLog::from_bytes(&bytes).unwrap(), log);
        assert!(AccessLog::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
