//! The `FBNK` bank file: magic, then little-endian u32 version, count, width,
//! height, then per filter a u32 family code and `width * height` f64 values.

use std::fs;
use std::path::Path;

use super::{check_odd, Family, Filter, FilterBank};
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"FBNK";
pub const BANK_VERSION: u32 = 1;

pub fn encode_bank(bank: &FilterBank) -> Vec<u8> {
    let per_filter = 4 + 8 * bank.width() * bank.height();
    let mut out = Vec::with_capacity(20 + bank.len() * per_filter);
    out.extend_from_slice(BANK_MAGIC);
    for v in [BANK_VERSION, bank.len() as u32, bank.width() as u32, bank.height() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in bank.filters() {
        out.extend_from_slice(&f.family().code().to_le_bytes());
        for c in f.coefficients() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("bank file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_bank(bytes: &[u8]) -> Result<FilterBank> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BANK_MAGIC {
        return Err(Error::Format("bad magic, expected FBNK".into()));
    }
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let count = r.u32()? as usize;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    if count == 0 || width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "empty bank header: {count} filters of {width}x{height}"
        )));
    }
    check_odd(width, height).map_err(|e| Error::Format(e.to_string()))?;
    let expected = (4 + 8 * width * height)
        .checked_mul(count)
        .and_then(|n| n.checked_add(20))
        .ok_or_else(|| Error::Format("bank header sizes overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "bank file truncated: {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after bank payload",
            bytes.len() - expected
        )));
    }
    let mut filters = Vec::with_capacity(count);
    for i in 0..count {
        let code = r.u32()?;
        let family =
            Family::from_code(code).ok_or_else(|| Error::Format(format!("filter {i}: unknown family code {code}")))?;
        let coefficients = (0..width * height).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format(format!("filter {i}: non-finite coefficient")));
        }
        filters.push(Filter::new(width, height, coefficients, family)?);
    }
    FilterBank::new(filters)
}

pub fn save_bank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bank(bank))?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    decode_bank(&fs::read(path)?)
}
