//! Little-endian binary plumbing shared by the checkpoint and embedding-dump
//! formats. Floats are stored as their IEEE-754 bit patterns, so a
//! write/read round trip is bitwise exact.

use ndarray::Array2;

use crate::error::{Error, Result};

pub(crate) fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn push_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    let (rows, cols) = m.dim();
    push_u64(out, rows as u64);
    push_u64(out, cols as u64);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over an in-memory file image. `err` wraps every decode failure in
/// the error variant appropriate for the format being parsed, so a corrupt
/// checkpoint and a corrupt embedding dump each complain in their own
/// vocabulary.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    err: fn(String) -> Error,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], err: fn(String) -> Error) -> Self {
        Reader { bytes, pos: 0, err }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| (self.err)("file truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| (self.err)("invalid UTF-8 in string field".into()))
    }

    pub(crate) fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| (self.err)("matrix size overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| (self.err)(format!("bad matrix shape: {e}")))
    }

    /// Error unless the cursor consumed the file exactly.
    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err((self.err)("trailing bytes".into()));
        }
        Ok(())
    }
}
