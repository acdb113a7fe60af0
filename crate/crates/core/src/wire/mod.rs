//! Packet framing: the fixed 116-byte header, CRC-32, and the
//! build/validate pipeline.
//!
//! Header layout (all integers big-endian):
//!
//! | offset | size | field            |
//! |-------:|-----:|------------------|
//! | 0      | 2    | magic `0x5449`   |
//! | 2      | 1    | version `0x01`   |
//! | 3      | 1    | packet type      |
//! | 4      | 16   | transaction id   |
//! | 20     | 4    | payload length   |
//! | 24     | 4    | capability hash  |
//! | 28     | 4    | sequence number  |
//! | 32     | 4    | flags            |
//! | 36     | 8    | timestamp (µs)   |
//! | 44     | 4    | ttl (ms)         |
//! | 48     | 4    | checksum         |
//! | 52     | 64   | Ed25519 signature|
//!
//! Construction order: the signature covers bytes 0..52 with the checksum
//! field zeroed, followed by the payload. The checksum then covers bytes
//! 0..48, bytes 52..116 and the payload.

mod crc;
pub mod payload;

use std::fmt;

use ed25519_dalek::SigningKey;
use thiserror::Error;

use crate::crypto::{self, ReplayCache, ReplayVerdict};

pub use crc::crc32;
pub use payload::{
    decode_payload, encode_payload, encode_payload_with_sender, peek_sender, Announce,
    ContractMessage, DataRequest, DataResponse, IntentProposal, IntentRequest, PayloadError,
    PayloadMessage, ProviderRecord, Query,
};

pub const MAGIC: u16 = 0x5449;
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 116;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024;

pub const OFF_MAGIC: usize = 0;
pub const OFF_VERSION: usize = 2;
pub const OFF_TYPE: usize = 3;
pub const OFF_TXID: usize = 4;
pub const OFF_PAYLOAD_LEN: usize = 20;
pub const OFF_CAP_HASH: usize = 24;
pub const OFF_SEQUENCE: usize = 28;
pub const OFF_FLAGS: usize = 32;
pub const OFF_TIMESTAMP: usize = 36;
pub const OFF_TTL: usize = 44;
pub const OFF_CHECKSUM: usize = 48;
pub const OFF_SIGNATURE: usize = 52;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer shorter than the 116-byte header ({0} bytes)")]
    TooShort(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown packet type {0:#04x}")]
    UnknownPacketType(u8),
    #[error("payload length field says {declared} but {actual} bytes follow the header")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("bad signature")]
    BadSignature,
    #[error("replayed or stale packet")]
    ReplayDetected,
    #[error("packet expired")]
    Expired,
    #[error("payload of {0} bytes exceeds the limit of {1}")]
    PayloadTooLarge(usize, usize),
    #[error("capability id is empty")]
    EmptyCapability,
    #[error("compressed payloads are not supported")]
    CompressionUnsupported,
}

impl WireError {
    /// Stable numeric code shared with the edge client.
    pub fn code(&self) -> u8 {
        match self {
            Self::TooShort(_) => 1,
            Self::BadMagic(_) => 2,
            Self::UnsupportedVersion(_) => 3,
            Self::UnknownPacketType(_) => 4,
            Self::LengthMismatch { .. } => 5,
            Self::ChecksumMismatch => 6,
            Self::BadSignature => 7,
            Self::ReplayDetected => 8,
            Self::Expired => 9,
            Self::PayloadTooLarge(..) => 10,
            Self::EmptyCapability => 11,
            Self::CompressionUnsupported => 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketType {
    DiscoveryAnnounce = 0x00,
    DiscoveryQuery = 0x01,
    IntentRequest = 0x02,
    IntentProposal = 0x03,
    ContractAccept = 0x04,
    ContractSigned = 0x06,
    DataRequest = 0x07,
    DataResponse = 0x08,
}

impl PacketType {
    pub const ALL: [PacketType; 8] = [
        Self::DiscoveryAnnounce,
        Self::DiscoveryQuery,
        Self::IntentRequest,
        Self::IntentProposal,
        Self::ContractAccept,
        Self::ContractSigned,
        Self::DataRequest,
        Self::DataResponse,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DiscoveryAnnounce => "DISCOVERY_ANNOUNCE",
            Self::DiscoveryQuery => "DISCOVERY_QUERY",
            Self::IntentRequest => "INTENT_REQUEST",
            Self::IntentProposal => "INTENT_PROPOSAL",
            Self::ContractAccept => "CONTRACT_ACCEPT",
            Self::ContractSigned => "CONTRACT_SIGNED",
            Self::DataRequest => "DATA_REQUEST",
            Self::DataResponse => "DATA_RESPONSE",
        }
    }
}

impl TryFrom<u8> for PacketType {
    type Error = WireError;

    /// 0x05 is reserved and rejected like any other unknown code.
    fn try_from(code: u8) -> Result<Self, WireError> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or(WireError::UnknownPacketType(code))
    }
}

impl fmt::Display for PacketType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Header flag bits. Unknown bits are carried through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(pub u32);

impl Flags {
    pub const REQUIRES_ACK: u32 = 0x01;
    pub const IS_COMPRESSED: u32 = 0x02;
    pub const IS_ENCRYPTED: u32 = 0x04;
    pub const HAS_ADAPTER: u32 = 0x08;
    pub const IS_STREAMING: u32 = 0x40;
    pub const KNOWN: u32 = Self::REQUIRES_ACK
        | Self::IS_COMPRESSED
        | Self::IS_ENCRYPTED
        | Self::HAS_ADAPTER
        | Self::IS_STREAMING;

    pub const fn empty() -> Self {
        Self(0)
    }

    pub const fn with(self, bit: u32) -> Self {
        Self(self.0 | bit)
    }

    pub const fn contains(self, bit: u32) -> bool {
        self.0 & bit == bit
    }

    pub const fn bits(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketHeader {
    pub magic: u16,
    pub version: u8,
    pub packet_type: PacketType,
    pub transaction_id: [u8; 16],
    pub payload_length: u32,
    pub capability_hash: u32,
    pub sequence_number: u32,
    pub flags: Flags,
    pub timestamp: u64,
    pub ttl: u32,
    pub checksum: u32,
    pub signature: [u8; 64],
}

pub fn encode_header(h: &PacketHeader) -> [u8; HEADER_LEN] {
    let mut b = [0u8; HEADER_LEN];
    b[OFF_MAGIC..OFF_MAGIC + 2].copy_from_slice(&h.magic.to_be_bytes());
    b[OFF_VERSION] = h.version;
    b[OFF_TYPE] = h.packet_type.code();
    b[OFF_TXID..OFF_TXID + 16].copy_from_slice(&h.transaction_id);
    b[OFF_PAYLOAD_LEN..OFF_PAYLOAD_LEN + 4].copy_from_slice(&h.payload_length.to_be_bytes());
    b[OFF_CAP_HASH..OFF_CAP_HASH + 4].copy_from_slice(&h.capability_hash.to_be_bytes());
    b[OFF_SEQUENCE..OFF_SEQUENCE + 4].copy_from_slice(&h.sequence_number.to_be_bytes());
    b[OFF_FLAGS..OFF_FLAGS + 4].copy_from_slice(&h.flags.0.to_be_bytes());
    b[OFF_TIMESTAMP..OFF_TIMESTAMP + 8].copy_from_slice(&h.timestamp.to_be_bytes());
    b[OFF_TTL..OFF_TTL + 4].copy_from_slice(&h.ttl.to_be_bytes());
    b[OFF_CHECKSUM..OFF_CHECKSUM + 4].copy_from_slice(&h.checksum.to_be_bytes());
    b[OFF_SIGNATURE..].copy_from_slice(&h.signature);
    b
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn decode_header(b: &[u8]) -> Result<PacketHeader, WireError> {
    if b.len() < HEADER_LEN {
        return Err(WireError::TooShort(b.len()));
    }
    let magic = u16::from_be_bytes([b[0], b[1]]);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if b[OFF_VERSION] != VERSION {
        return Err(WireError::UnsupportedVersion(b[OFF_VERSION]));
    }
    let packet_type = PacketType::try_from(b[OFF_TYPE])?;
    Ok(PacketHeader {
        magic,
        version: b[OFF_VERSION],
        packet_type,
        transaction_id: b[OFF_TXID..OFF_TXID + 16].try_into().unwrap(),
        payload_length: be_u32(b, OFF_PAYLOAD_LEN),
        capability_hash: be_u32(b, OFF_CAP_HASH),
        sequence_number: be_u32(b, OFF_SEQUENCE),
        flags: Flags(be_u32(b, OFF_FLAGS)),
        timestamp: u64::from_be_bytes(b[OFF_TIMESTAMP..OFF_TIMESTAMP + 8].try_into().unwrap()),
        ttl: be_u32(b, OFF_TTL),
        checksum: be_u32(b, OFF_CHECKSUM),
        signature: b[OFF_SIGNATURE..HEADER_LEN].try_into().unwrap(),
    })
}

pub fn capability_hash(capability_id: &str) -> Result<u32, WireError> {
    if capability_id.is_empty() {
        return Err(WireError::EmptyCapability);
    }
    Ok(crc32(capability_id.as_bytes()))
}

/// Caller-chosen header fields; the rest are derived by [`build_packet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderFields {
    pub packet_type: PacketType,
    pub transaction_id: [u8; 16],
    pub capability_hash: u32,
    pub sequence_number: u32,
    pub flags: Flags,
    pub timestamp: u64,
    pub ttl: u32,
}

impl HeaderFields {
    /// Header as it will appear on the wire before checksum and signature
    /// are filled in.
    pub fn unsigned_header(&self, payload_length: u32) -> PacketHeader {
        PacketHeader {
            magic: MAGIC,
            version: VERSION,
            packet_type: self.packet_type,
            transaction_id: self.transaction_id,
            payload_length,
            capability_hash: self.capability_hash,
            sequence_number: self.sequence_number,
            flags: self.flags,
            timestamp: self.timestamp,
            ttl: self.ttl,
            checksum: 0,
            signature: [0; 64],
        }
    }
}

/// Associated data binding an encrypted payload to its header: the encoded
/// header with checksum and signature zeroed.
pub fn header_aad(h: &PacketHeader) -> [u8; HEADER_LEN] {
    let mut b = encode_header(h);
    b[OFF_CHECKSUM..].fill(0);
    b
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TipPacket {
    pub header: PacketHeader,
    pub payload: Vec<u8>,
}

impl TipPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&encode_header(&self.header));
        out.extend_from_slice(&self.payload);
        out
    }
}

fn signed_region(header_bytes: &[u8; HEADER_LEN], payload: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(OFF_SIGNATURE + payload.len());
    m.extend_from_slice(&header_bytes[..OFF_SIGNATURE]);
    m[OFF_CHECKSUM..OFF_SIGNATURE].fill(0);
    m.extend_from_slice(payload);
    m
}

fn checksum_over(header_bytes: &[u8], payload: &[u8]) -> u32 {
    let mut crc = crc::Crc32::new();
    crc.update(&header_bytes[..OFF_CHECKSUM]);
    crc.update(&header_bytes[OFF_SIGNATURE..HEADER_LEN]);
    crc.update(payload);
    crc.finish()
}

pub fn build_packet(
    fields: &HeaderFields,
    payload: Vec<u8>,
    signing_key: &SigningKey,
) -> Result<TipPacket, WireError> {
    build_packet_limited(fields, payload, signing_key, DEFAULT_MAX_PAYLOAD)
}

pub fn build_packet_limited(
    fields: &HeaderFields,
    payload: Vec<u8>,
    signing_key: &SigningKey,
    max_payload: usize,
) -> Result<TipPacket, WireError> {
    if payload.len() > max_payload {
        return Err(WireError::PayloadTooLarge(payload.len(), max_payload));
    }
    if fields.flags.contains(Flags::IS_COMPRESSED) {
        return Err(WireError::CompressionUnsupported);
    }
    let mut header = fields.unsigned_header(payload.len() as u32);
    let bytes = encode_header(&header);
    header.signature = crypto::sign(signing_key, &signed_region(&bytes, &payload));
    let bytes = encode_header(&header);
    header.checksum = checksum_over(&bytes, &payload);
    Ok(TipPacket { header, payload })
}

/// Step 1–2 of validation: header extraction, magic, version, type and
/// length consistency. Returns the header and the payload slice.
pub fn extract(raw: &[u8]) -> Result<(PacketHeader, &[u8]), WireError> {
    let header = decode_header(raw)?;
    let payload = &raw[HEADER_LEN..];
    if payload.len() != header.payload_length as usize {
        return Err(WireError::LengthMismatch {
            declared: header.payload_length,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn verify_checksum(raw: &[u8]) -> Result<(), WireError> {
    let stored = be_u32(raw, OFF_CHECKSUM);
    if checksum_over(&raw[..HEADER_LEN], &raw[HEADER_LEN..]) != stored {
        return Err(WireError::ChecksumMismatch);
    }
    Ok(())
}

pub fn verify_signature(raw: &[u8], sender_public: &[u8; 32]) -> Result<(), WireError> {
    let header_bytes: &[u8; HEADER_LEN] = raw[..HEADER_LEN].try_into().unwrap();
    let sig: [u8; 64] = raw[OFF_SIGNATURE..HEADER_LEN].try_into().unwrap();
    if !crypto::verify(sender_public, &signed_region(header_bytes, &raw[HEADER_LEN..]), &sig) {
        return Err(WireError::BadSignature);
    }
    Ok(())
}

/// Stateless part of validation: everything except replay and expiry.
pub fn verify_packet(raw: &[u8], sender_public: &[u8; 32]) -> Result<TipPacket, WireError> {
    let (header, payload) = extract(raw)?;
    verify_checksum(raw)?;
    verify_signature(raw, sender_public)?;
    Ok(TipPacket {
        header,
        payload: payload.to_vec(),
    })
}

/// Replay and TTL checks against the receiver's clock.
pub fn check_freshness(header: &PacketHeader, now: u64, replay_cache: &mut ReplayCache) -> Result<(), WireError> {
    if crypto::check_replay(replay_cache, header.timestamp, header.sequence_number, now)
        != ReplayVerdict::Accept
    {
        return Err(WireError::ReplayDetected);
    }
    let expiry = header.timestamp.saturating_add(header.ttl as u64 * 1000);
    if now > expiry {
        return Err(WireError::Expired);
    }
    Ok(())
}

/// Full receive pipeline: extraction, magic, checksum, signature, replay,
/// then TTL expiry. The first failing stage determines the error.
pub fn validate_packet(
    raw: &[u8],
    sender_public: &[u8; 32],
    now: u64,
    replay_cache: &mut ReplayCache,
) -> Result<TipPacket, WireError> {
    let packet = verify_packet(raw, sender_public)?;
    check_freshness(&packet.header, now, replay_cache)?;
    if packet.header.flags.contains(Flags::IS_COMPRESSED) {
        return Err(WireError::CompressionUnsupported);
    }
    Ok(packet)
}
