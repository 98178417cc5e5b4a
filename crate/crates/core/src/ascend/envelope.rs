use std::io::{Read, Write};

use super::AscendError;

/// Bytes before the payload: len u32, verb u8, layer u16, worker u32, seq u64.
pub const HEADER_LEN: usize = 19;

/// Largest payload a reader will accept.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Verb {
    Call = 1,
    Return = 2,
    Error = 3,
    Heartbeat = 4,
}

impl Verb {
    pub fn from_byte(b: u8) -> Option<Verb> {
        match b {
            1 => Some(Verb::Call),
            2 => Some(Verb::Return),
            3 => Some(Verb::Error),
            4 => Some(Verb::Heartbeat),
            _ => None,
        }
    }
}

/// One framed message. All integers little-endian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub verb: Verb,
    /// Layer of the node that receives the call.
    pub layer: u16,
    pub worker: u32,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h[4] = self.verb as u8;
        h[5..7].copy_from_slice(&self.layer.to_le_bytes());
        h[7..11].copy_from_slice(&self.worker.to_le_bytes());
        h[11..19].copy_from_slice(&self.seq.to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one complete frame; trailing or missing bytes are errors.
    pub fn decode(bytes: &[u8]) -> Result<Envelope, AscendError> {
        if bytes.len() < HEADER_LEN {
            return Err(AscendError::Frame(format!("{} bytes is shorter than a header", bytes.len())));
        }
        let (len, mut env) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
        if bytes.len() - HEADER_LEN != len {
            return Err(AscendError::Frame(format!(
                "length field {len} but {} payload bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        env.payload = bytes[HEADER_LEN..].to_vec();
        Ok(env)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), AscendError> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. A clean end of stream before the header is
    /// reported as `Disconnected`.
    pub fn read_from(r: &mut impl Read) -> Result<Envelope, AscendError> {
        let mut h = [0u8; HEADER_LEN];
        if let Err(e) = r.read_exact(&mut h) {
            return Err(match e.kind() {
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset => AscendError::Disconnected,
                _ => e.into(),
            });
        }
        let (len, mut env) = parse_header(&h)?;
        env.payload = vec![0; len];
        r.read_exact(&mut env.payload)?;
        Ok(env)
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, Envelope), AscendError> {
    let len = u32::from_le_bytes(h[0..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(AscendError::Frame(format!("payload of {len} bytes exceeds limit")));
    }
    let verb = Verb::from_byte(h[4]).ok_or_else(|| AscendError::Frame(format!("unknown verb {}", h[4])))?;
    Ok((
        len,
        Envelope {
            verb,
            layer: u16::from_le_bytes(h[5..7].try_into().unwrap()),
            worker: u32::from_le_bytes(h[7..11].try_into().unwrap()),
            seq: u64::from_le_bytes(h[11..19].try_into().unwrap()),
            payload: Vec::new(),
        },
    ))
}
