//! Little-endian read cursor shared by the bag and checkpoint file parsers.
//! Every read failure reports the byte offset where data ran out, so format
//! errors point at the corruption site.

/// Not enough bytes at `offset` to read `needed` more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct OutOfData {
    pub offset: usize,
    pub needed: usize,
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], OutOfData> {
        if self.remaining() < n {
            return Err(OutOfData { offset: self.pos, needed: n });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, OutOfData> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, OutOfData> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32, OutOfData> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, OutOfData> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_report_the_failing_offset() {
        let buf = 7u32.to_le_bytes();
        let mut c = Cursor::new(&buf);
        assert_eq!(c.u32().unwrap(), 7);
        assert_eq!(c.u32(), Err(OutOfData { offset: 4, needed: 4 }));
    }
}
