//! Bitstream container: magic "NLVC", version byte, extents, frame count,
//! then length-prefixed per-frame payloads. Only latent payloads travel in
//! the stream; the entropy model is decoder-computed from contexts.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NLVC";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Inter,
}

impl FrameKind {
    fn to_byte(self) -> u8 {
        match self {
            FrameKind::Intra => 0,
            FrameKind::Inter => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameKind::Intra),
            1 => Ok(FrameKind::Inter),
            other => Err(Error::codec(format!("unknown frame kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePayload {
    pub kind: FrameKind,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub height: u16,
    pub width: u16,
    pub payloads: Vec<FramePayload>,
}

impl Container {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(self.payloads.len() as u32).to_le_bytes());
        for p in &self.payloads {
            out.push(p.kind.to_byte());
            out.extend_from_slice(&(p.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Container> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::codec("truncated container"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::codec("bad container magic"));
        }
        let version = take(&mut pos, 1)?[0];
        if version != VERSION {
            return Err(Error::codec(format!("unsupported container version {version}")));
        }
        let height = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let width = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut payloads = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let kind = FrameKind::from_byte(take(&mut pos, 1)?[0])?;
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            payloads.push(FramePayload { kind, data: take(&mut pos, len)?.to_vec() });
        }
        if pos != bytes.len() {
            return Err(Error::codec("trailing bytes after container"));
        }
        Ok(Container { height, width, payloads })
    }
}
