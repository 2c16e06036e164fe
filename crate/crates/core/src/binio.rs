//! Little-endian cursor shared by the binary file formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, have {}", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let m = self.take(4, "magic")?;
        if m != expect {
            return Err(Error::Parse {
                offset: at,
                msg: "bad magic".into(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expect: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != expect {
            return Err(Error::Parse {
                offset: at,
                msg: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}
