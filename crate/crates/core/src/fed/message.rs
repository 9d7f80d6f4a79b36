//! Binary parameter messages, also used as the checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDSP" | version u16 | round u32 | sender u32 | count u32
//! count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f32 payload )
//! FNV-1a 64 of every preceding byte
//! ```

use std::path::Path;

use crate::checksum::fnv1a;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"FDSP";
pub const VERSION: u16 = 1;

/// Named tensors uploaded by one sender for one round. Entries are kept sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMessage {
    pub sender: u32,
    pub round: u32,
    entries: Vec<(String, Tensor)>,
}

impl ParamMessage {
    pub fn new(sender: u32, round: u32, mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Protocol(format!("duplicate entry {}", pair[0].0)));
            }
        }
        for (name, _) in &entries {
            if name.len() > usize::from(u16::MAX) {
                return Err(Error::Protocol("entry name longer than 65535 bytes".into()));
            }
        }
        Ok(ParamMessage {
            sender,
            round,
            entries,
        })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|(n, t)| n.len() + 11 + 4 * t.len())
            .sum();
        let mut out = Vec::with_capacity(26 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 26 {
            return Err(Error::Malformed(format!(
                "message of {} bytes is too short",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let expected = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        let found = fnv1a(body);
        if expected != found {
            return Err(Error::Checksum { expected, found });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: u32::from(VERSION),
                found: u32::from(version),
            });
        }
        let round = r.u32()?;
        let sender = r.u32()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Malformed("entry name is not utf-8".into()))?
                .to_string();
            let rank = r.u8()?;
            let (rows, cols) = match rank {
                0 => (1, 1),
                1 => (1, r.u32()? as usize),
                2 => (r.u32()? as usize, r.u32()? as usize),
                _ => return Err(Error::Malformed(format!("rank {rank} for {name}"))),
            };
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Malformed(format!("oversized entry {name}")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        let msg = ParamMessage::new(sender, round, entries)?;
        Ok(msg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed("message truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
