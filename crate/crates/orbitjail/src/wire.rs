//! Bit-exact middleware wire format.
//!
//! A frame is: 4-byte big-endian length (of everything after the length
//! field), 1-byte type, 2-byte big-endian name length, the UTF-8 channel or
//! service name, a 4-byte big-endian correlation id (0 for publish/subscribe
//! traffic), and the payload.

use std::io::{Read, Write};

/// Frame type tags on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Sub = 0x01,
    Pub = 0x02,
    Req = 0x03,
    Resp = 0x04,
    RegSvc = 0x05,
    Err = 0x06,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Option<FrameType> {
        match b {
            0x01 => Some(FrameType::Sub),
            0x02 => Some(FrameType::Pub),
            0x03 => Some(FrameType::Req),
            0x04 => Some(FrameType::Resp),
            0x05 => Some(FrameType::RegSvc),
            0x06 => Some(FrameType::Err),
            _ => None,
        }
    }
}

/// One middleware wire unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    /// Channel or service name, at most 255 bytes.
    pub name: String,
    pub corr_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, name: &str, corr_id: u32, payload: &[u8]) -> Frame {
        Frame {
            frame_type,
            name: name.to_string(),
            corr_id,
            payload: payload.to_vec(),
        }
    }
}

/// Sanity cap for socket reads; a peer announcing more than this is treated
/// as hostile rather than buffered.
pub const MAX_FRAME_LEN: u32 = 1 << 20;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("unknown frame type {0:#04x}")]
    BadType(u8),
    #[error("name exceeds 255 bytes")]
    NameTooLong,
    #[error("name is not valid UTF-8")]
    BadName,
    #[error("declared length {0} exceeds the frame cap")]
    Oversize(u32),
}

/// Encode a frame to its wire bytes.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let name = frame.name.as_bytes();
    if name.len() > 255 {
        return Err(WireError::NameTooLong);
    }
    let body_len = 1 + 2 + name.len() + 4 + frame.payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&(name.len() as u16).to_be_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&frame.corr_id.to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Decode one frame from the front of `bytes`.
///
/// Returns the frame and the number of bytes consumed, which is exactly the
/// declared length plus the length field: trailing bytes are left untouched
/// and truncated input errs without consuming anything.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let declared = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if declared > MAX_FRAME_LEN {
        return Err(WireError::Oversize(declared));
    }
    let declared = declared as usize;
    if declared < 7 {
        // type + name_len + corr_id at minimum
        return Err(WireError::Truncated);
    }
    if bytes.len() < 4 + declared {
        return Err(WireError::Truncated);
    }
    let body = &bytes[4..4 + declared];
    let frame_type = FrameType::from_byte(body[0]).ok_or(WireError::BadType(body[0]))?;
    let name_len = u16::from_be_bytes(body[1..3].try_into().unwrap()) as usize;
    if name_len > 255 {
        return Err(WireError::NameTooLong);
    }
    if body.len() < 3 + name_len + 4 {
        return Err(WireError::Truncated);
    }
    let name = std::str::from_utf8(&body[3..3 + name_len])
        .map_err(|_| WireError::BadName)?
        .to_string();
    let corr_id = u32::from_be_bytes(body[3 + name_len..7 + name_len].try_into().unwrap());
    let payload = body[7 + name_len..].to_vec();
    Ok((
        Frame {
            frame_type,
            name,
            corr_id,
            payload,
        },
        4 + declared,
    ))
}

/// Read exactly one frame from a stream. Returns `Ok(None)` on clean EOF at a
/// frame boundary.
pub fn read_frame<R: Read>(reader: &mut R) -> std::io::Result<Option<Frame>> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut len_buf[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "eof inside frame header",
                ))
            }
            n => filled += n,
        }
    }
    let declared = u32::from_be_bytes(len_buf);
    if declared > MAX_FRAME_LEN {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            WireError::Oversize(declared).to_string(),
        ));
    }
    let mut body = vec![0u8; declared as usize];
    reader.read_exact(&mut body)?;
    let mut whole = Vec::with_capacity(4 + body.len());
    whole.extend_from_slice(&len_buf);
    whole.extend_from_slice(&body);
    let (frame, _) = decode_frame(&whole)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    Ok(Some(frame))
}

/// Write one frame to a stream as a single buffer.
pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> std::io::Result<()> {
    let bytes = encode_frame(frame)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    writer.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pub_frame_layout_hand_computed() {
        // PUB on channel "A" with payload "hi": the body is type (1) +
        // name_len (2) + name (1) + corr_id (4) + payload (2) = 10 bytes.
        let frame = Frame::new(FrameType::Pub, "A", 0, b"hi");
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(
            bytes,
            vec![0x00, 0x00, 0x00, 0x0A, 0x02, 0x00, 0x01, 0x41, 0x00, 0x00, 0x00, 0x00, 0x68, 0x69]
        );
        let (decoded, consumed) = decode_frame(&bytes).unwrap();
        assert_eq!(decoded, frame);
        assert_eq!(consumed, bytes.len());
    }

    #[test]
    fn round_trip_all_types() {
        for ty in [
            FrameType::Sub,
            FrameType::Pub,
            FrameType::Req,
            FrameType::Resp,
            FrameType::RegSvc,
            FrameType::Err,
        ] {
            let frame = Frame::new(ty, "telemetry/эхо", 0xDEAD_BEEF, &[0, 1, 2, 255]);
            let bytes = encode_frame(&frame).unwrap();
            let (decoded, consumed) = decode_frame(&bytes).unwrap();
            assert_eq!(decoded, frame);
            assert_eq!(consumed, bytes.len());
        }
    }

    #[test]
    fn bad_type_rejected() {
        let frame = Frame::new(FrameType::Pub, "A", 0, b"hi");
        let mut bytes = encode_frame(&frame).unwrap();
        bytes[4] = 0x07;
        assert_eq!(decode_frame(&bytes).unwrap_err(), WireError::BadType(0x07));
        bytes[4] = 0x00;
        assert_eq!(decode_frame(&bytes).unwrap_err(), WireError::BadType(0x00));
    }

    #[test]
    fn truncation_rejected_without_overconsuming() {
        let frame = Frame::new(FrameType::Req, "svc", 7, b"payload");
        let bytes = encode_frame(&frame).unwrap();
        for cut in 1..bytes.len() {
            let err = decode_frame(&bytes[..bytes.len() - cut]).unwrap_err();
            assert_eq!(err, WireError::Truncated, "cut {cut}");
        }
    }

    #[test]
    fn trailing_bytes_not_consumed() {
        let a = Frame::new(FrameType::Pub, "A", 0, b"one");
        let b = Frame::new(FrameType::Pub, "B", 0, b"two");
        let mut bytes = encode_frame(&a).unwrap();
        bytes.extend_from_slice(&encode_frame(&b).unwrap());
        let (first, consumed) = decode_frame(&bytes).unwrap();
        assert_eq!(first, a);
        let (second, _) = decode_frame(&bytes[consumed..]).unwrap();
        assert_eq!(second, b);
    }

    #[test]
    fn name_too_long_rejected() {
        let frame = Frame::new(FrameType::Sub, &"x".repeat(256), 0, b"");
        assert_eq!(encode_frame(&frame).unwrap_err(), WireError::NameTooLong);
        let ok = Frame::new(FrameType::Sub, &"x".repeat(255), 0, b"");
        assert!(encode_frame(&ok).is_ok());
    }

    #[test]
    fn stream_read_write() {
        let frames = vec![
            Frame::new(FrameType::Sub, "chan", 0, b""),
            Frame::new(FrameType::Pub, "chan", 0, b"data"),
        ];
        let mut buf = Vec::new();
        for f in &frames {
            write_frame(&mut buf, f).unwrap();
        }
        let mut cursor = std::io::Cursor::new(buf);
        for f in &frames {
            assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), *f);
        }
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }
}
