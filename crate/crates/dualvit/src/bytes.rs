//! Bounds-checked little-endian reading shared by the binary formats.

/// Malformed binary input. Offsets are byte positions from the start of the
/// file.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("offset 0: bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("offset {offset}: unsupported version {found} (this build reads {expected})")]
    Version { offset: usize, found: u32, expected: u32 },
    #[error("offset {offset}: truncated {what}: expected {expected} bytes, got {actual}")]
    Truncated { offset: usize, what: &'static str, expected: usize, actual: usize },
    #[error("offset {offset}: {msg}")]
    Invalid { offset: usize, msg: String },
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated { offset: self.pos, what, expected: n, actual: self.remaining() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.u32("version")?;
        if found != expected {
            return Err(FormatError::Version { offset, found, expected });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn invalid(&self, offset: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Invalid { offset, msg: msg.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_little_endian() {
        let mut r = Reader::new(&[1, 0, 2, 0, 0, 0, 7]);
        assert_eq!(r.u16("a").unwrap(), 1);
        assert_eq!(r.u32("b").unwrap(), 2);
        assert_eq!(r.u8("c").unwrap(), 7);
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn short_reads_report_offset_and_lengths() {
        let mut r = Reader::new(&[0; 5]);
        r.take(3, "head").unwrap();
        let err = r.u32("count").unwrap_err();
        assert_eq!(err, FormatError::Truncated { offset: 3, what: "count", expected: 4, actual: 2 });
        // a failed read consumes nothing
        assert_eq!(r.offset(), 3);
    }

    #[test]
    fn magic_and_version() {
        let mut r = Reader::new(b"DVDX\x01\0\0\0");
        assert!(matches!(r.magic(b"DVDS"), Err(FormatError::BadMagic { .. })));
        let mut r = Reader::new(b"DVDS\x02\0\0\0");
        r.magic(b"DVDS").unwrap();
        assert_eq!(r.version(1).unwrap_err(), FormatError::Version { offset: 4, found: 2, expected: 1 });
    }
}
