//! Little-endian primitives shared by the repository and checkpoint containers.

use std::io::Write;

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} exceeds u32")))?;
        self.u32(v)
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn usizes(&mut self, v: &[usize]) -> Result<()> {
        self.len(v.len())?;
        for &x in v {
            self.len(x)?;
        }
        Ok(())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> W {
        self.inner
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], context: &str) -> Self {
        Self {
            data,
            pos: 0,
            context: context.to_string(),
        }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            context: format!("{} at byte {}", self.context, self.pos),
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Length prefix for a sequence of `elem` byte records, checked against the remaining input.
    fn seq_len(&mut self, elem: usize) -> Result<usize> {
        let n = self.len()?;
        if n.saturating_mul(elem) > self.data.len() - self.pos {
            return Err(self.error(format!("declared length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.seq_len(8)?;
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.seq_len(4)?;
        (0..n).map(|_| self.len()).collect()
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.seq_len(1)?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error("invalid UTF-8 string"))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let mut w = Writer::new(Vec::new());
        w.u32(7).unwrap();
        w.f64s(&[1.5, -0.0, f64::MIN_POSITIVE]).unwrap();
        w.usizes(&[3, 0, 9]).unwrap();
        w.string("ok").unwrap();
        let buf = w.finish();
        let mut r = Reader::new(&buf, "t");
        assert_eq!(r.u32().unwrap(), 7);
        let f = r.f64s().unwrap();
        assert_eq!(f[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.usizes().unwrap(), vec![3, 0, 9]);
        assert_eq!(r.string().unwrap(), "ok");
        r.expect_end().unwrap();
        let mut r = Reader::new(&buf[..10], "t");
        r.u32().unwrap();
        assert!(matches!(r.f64s(), Err(Error::Format { .. })));
    }
}
