//! Length-prefixed binary frames.
//!
//! ```text
//! magic "DPIR" | version u8 | msg_type u8 | payload_len u32 LE | payload
//! ```

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const FRAME_MAGIC: [u8; 4] = *b"DPIR";
pub const WIRE_VERSION: u8 = 1;
pub const FRAME_HEADER_BYTES: usize = 10;
/// request_id u64, table_id u32, bin_id u32.
pub const QUERY_PREFIX_BYTES: usize = 16;
pub const MAX_PAYLOAD_BYTES: u32 = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(u32),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Query = 0,
    Response = 1,
    Error = 2,
    TableInfo = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => MsgType::Query,
            1 => MsgType::Response,
            2 => MsgType::Error,
            3 => MsgType::TableInfo,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(WIRE_VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

fn parse_header(h: &[u8; FRAME_HEADER_BYTES]) -> Result<(MsgType, u32), WireError> {
    if h[..4] != FRAME_MAGIC {
        return Err(WireError::BadMagic);
    }
    if h[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(h[4]));
    }
    let msg_type = MsgType::from_u8(h[5])?;
    let len = u32::from_le_bytes(h[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD_BYTES {
        return Err(WireError::TooLarge(len));
    }
    Ok((msg_type, len))
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut header = [0u8; FRAME_HEADER_BYTES];
    match r.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let (msg_type, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).await?;
    Ok(Some(Frame { msg_type, payload }))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&frame.encode()).await?;
    Ok(())
}

/// Decode a complete frame held in memory.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let header: &[u8; FRAME_HEADER_BYTES] = bytes
        .get(..FRAME_HEADER_BYTES)
        .and_then(|h| h.try_into().ok())
        .ok_or(WireError::Malformed("frame"))?;
    let (msg_type, len) = parse_header(header)?;
    let payload = &bytes[FRAME_HEADER_BYTES..];
    if payload.len() != len as usize {
        return Err(WireError::Malformed("frame"));
    }
    Ok(Frame::new(msg_type, payload.to_vec()))
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryPayload {
    pub request_id: u64,
    pub table_id: u32,
    pub bin_id: u32,
    pub key: Vec<u8>,
}

impl QueryPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUERY_PREFIX_BYTES + self.key.len());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.table_id.to_le_bytes());
        out.extend_from_slice(&self.bin_id.to_le_bytes());
        out.extend_from_slice(&self.key);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < QUERY_PREFIX_BYTES {
            return Err(WireError::Malformed("query"));
        }
        Ok(QueryPayload {
            request_id: u64_at(b, 0),
            table_id: u32_at(b, 8),
            bin_id: u32_at(b, 12),
            key: b[QUERY_PREFIX_BYTES..].to_vec(),
        })
    }

    pub fn into_frame(self) -> Frame {
        Frame::new(MsgType::Query, self.encode())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponsePayload {
    pub request_id: u64,
    pub share: Vec<u8>,
}

impl ResponsePayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.share.len());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.share);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < 8 {
            return Err(WireError::Malformed("response"));
        }
        Ok(ResponsePayload {
            request_id: u64_at(b, 0),
            share: b[8..].to_vec(),
        })
    }

    pub fn into_frame(self) -> Frame {
        Frame::new(MsgType::Response, self.encode())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownTable = 1,
    BadKey = 2,
    BinOutOfRange = 3,
    Internal = 4,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => ErrorCode::UnknownTable,
            2 => ErrorCode::BadKey,
            3 => ErrorCode::BinOutOfRange,
            _ => ErrorCode::Internal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorPayload {
    pub request_id: u64,
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.message.len());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.push(self.code as u8);
        out.extend_from_slice(self.message.as_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < 9 {
            return Err(WireError::Malformed("error"));
        }
        Ok(ErrorPayload {
            request_id: u64_at(b, 0),
            code: ErrorCode::from_u8(b[8]),
            message: String::from_utf8_lossy(&b[9..]).into_owned(),
        })
    }

    pub fn into_frame(self) -> Frame {
        Frame::new(MsgType::Error, self.encode())
    }
}

/// One hosted table as reported by a `TableInfo` reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableInfo {
    pub table_id: u32,
    pub num_entries: u64,
    pub logical_entries: u64,
    pub entry_bytes: u32,
}

const TABLE_INFO_BYTES: usize = 24;

pub fn encode_table_info(tables: &[TableInfo]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + tables.len() * TABLE_INFO_BYTES);
    out.extend_from_slice(&(tables.len() as u32).to_le_bytes());
    for t in tables {
        out.extend_from_slice(&t.table_id.to_le_bytes());
        out.extend_from_slice(&t.num_entries.to_le_bytes());
        out.extend_from_slice(&t.logical_entries.to_le_bytes());
        out.extend_from_slice(&t.entry_bytes.to_le_bytes());
    }
    out
}

pub fn decode_table_info(b: &[u8]) -> Result<Vec<TableInfo>, WireError> {
    if b.len() < 4 {
        return Err(WireError::Malformed("table info"));
    }
    let n = u32_at(b, 0) as usize;
    if b.len() != 4 + n * TABLE_INFO_BYTES {
        return Err(WireError::Malformed("table info"));
    }
    Ok(b[4..]
        .chunks_exact(TABLE_INFO_BYTES)
        .map(|c| TableInfo {
            table_id: u32_at(c, 0),
            num_entries: u64_at(c, 4),
            logical_entries: u64_at(c, 12),
            entry_bytes: u32_at(c, 20),
        })
        .collect())
}
