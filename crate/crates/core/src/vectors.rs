//! Golden packets for cross-implementation checks: one per packet type,
//! encrypted and flagged variants, and frames that must be rejected. Every
//! byte is derived from fixed seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ciborium::value::Value;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{Handshake, NodeIdentity, Role, SessionKeys};
use crate::discovery::ServiceInstance;
use crate::model::{Capability, DataSchema, NodeRecord};
use crate::negotiation::{Intent, Weights};
use crate::orchestrator::ContractBody;
use crate::transport::coap::coap_wrap_with;
use crate::wire::{
    self, build_packet, capability_hash, decode_header, encode_payload, encode_payload_with_sender, header_aad,
    Announce, ContractMessage, DataRequest, DataResponse, Flags, HeaderFields, IntentProposal, PacketHeader,
    PayloadMessage, Query, WireError, HEADER_LEN, OFF_MAGIC, OFF_TYPE, OFF_VERSION,
};

pub const SIGNER_SEED: [u8; 32] = [0x11; 32];
pub const PEER_SEED: [u8; 32] = [0x22; 32];
pub const OTHER_SEED: [u8; 32] = [0x33; 32];
pub const TIMESTAMP: u64 = 1_760_000_000_000_000;
pub const TTL_MS: u32 = 5000;
pub const MANIFEST: &str = "manifest.toml";
const CAPABILITY: &str = "machine:fluid:fill";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenVector {
    pub name: String,
    pub description: String,
    /// Complete TIP frame: header then payload.
    pub frame: Vec<u8>,
    /// The frame as a CoAP POST /tip.
    pub coap: Vec<u8>,
    /// Key the frame is checked against.
    pub sender_public: [u8; 32],
    /// Outcome of header extraction, checksum and signature checks.
    pub expect: Result<(), WireError>,
}

impl GoldenVector {
    pub fn header(&self) -> Option<PacketHeader> {
        decode_header(&self.frame).ok()
    }

    pub fn file_name(&self) -> String {
        format!("{}.bin", self.name)
    }

    pub fn coap_file_name(&self) -> String {
        format!("{}.coap", self.name)
    }
}

fn tx(n: u8) -> [u8; 16] {
    let mut t = [0u8; 16];
    for (i, b) in t.iter_mut().enumerate() {
        *b = n.wrapping_mul(16).wrapping_add(i as u8);
    }
    t
}

fn fields(msg: &PayloadMessage, n: u8, flags: Flags) -> HeaderFields {
    HeaderFields {
        packet_type: msg.packet_type(),
        transaction_id: tx(n),
        capability_hash: capability_hash(CAPABILITY).expect("non-empty"),
        sequence_number: n as u32,
        flags,
        timestamp: TIMESTAMP + n as u64 * 1000,
        ttl: TTL_MS,
    }
}

fn plain_frame(id: &NodeIdentity, msg: &PayloadMessage, n: u8, flags: Flags) -> Vec<u8> {
    let payload = match msg {
        PayloadMessage::Ack => Vec::new(),
        m => encode_payload_with_sender(m, &id.public()),
    };
    build_packet(&fields(msg, n, flags), payload, id.signing_key())
        .expect("fixed vectors build")
        .to_bytes()
}

fn sealed_frame(id: &NodeIdentity, keys: &mut SessionKeys, msg: &PayloadMessage, n: u8, flags: Flags) -> Vec<u8> {
    let f = fields(msg, n, flags.with(Flags::IS_ENCRYPTED));
    let plain = encode_payload(msg);
    let aad = header_aad(&f.unsigned_header(SessionKeys::sealed_len(plain.len()) as u32));
    let sealed = keys.seal(&plain, &aad);
    build_packet(&f, sealed, id.signing_key())
        .expect("fixed vectors build")
        .to_bytes()
}

fn fill_capability() -> Capability {
    Capability::new(CAPABILITY, DataSchema::U32).with_precision(0.995)
}

fn record(id: &NodeIdentity) -> NodeRecord {
    let mut r = NodeRecord::new(id.public(), vec!["udp://192.0.2.10:5683".into()]);
    r.capabilities = vec![fill_capability()];
    r.last_seen = TIMESTAMP;
    r
}

fn messages(signer: &NodeIdentity, peer: &NodeIdentity) -> Vec<(&'static str, &'static str, PayloadMessage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let provider_hs = Handshake::start(signer, tx(4), Role::Responder, &mut rng);
    let requester_hs = Handshake::start(peer, tx(5), Role::Initiator, &mut rng);
    let intent = Intent::new(CAPABILITY, DataSchema::F32)
        .with_param("liquid", "water")
        .with_param("volume_ml", 500)
        .with_constraint("max_latency_ms", 100.0)
        .with_constraint("min_precision", 0.99)
        .with_weights(Weights {
            func: 0.4,
            cost: 0.3,
            trust: 0.2,
            avail: 0.1,
        });
    let body = ContractBody {
        contract_id: tx(5),
        requester_id: peer.node_id(),
        provider_id: signer.node_id(),
        capability: fill_capability(),
        agreed_schema: DataSchema::F32,
        adapter_id: Some("pulse_to_ml".into()),
        qos: BTreeMap::from([("max_latency_ms".to_string(), 100.0)]),
        expiry: TIMESTAMP + 600_000_000,
    }
    .encode();
    let mut params = BTreeMap::new();
    params.insert("volume_ml".to_string(), Value::Integer(500.into()));
    vec![
        (
            "01_discovery_query",
            "capability browse for machine:fluid:fill",
            PayloadMessage::Query(Query::Capability(CAPABILITY.into())),
        ),
        (
            "02_discovery_announce",
            "announcement with one capability and its service instance",
            PayloadMessage::Announce(Announce {
                node_id: signer.node_id(),
                capabilities: vec![fill_capability()],
                addresses: vec!["udp://192.0.2.10:5683".into()],
                services: vec![ServiceInstance::for_capability(&record(signer), &fill_capability())],
                availability: Some(0.99),
                ..Announce::default()
            }),
        ),
        (
            "03_intent_request",
            "fill intent: 500 ml water, 100 ms, precision 0.99",
            PayloadMessage::IntentRequest(intent.to_request()),
        ),
        (
            "04_intent_proposal",
            "proposal with signed ephemeral key",
            PayloadMessage::IntentProposal(IntentProposal {
                capability: fill_capability(),
                measured_rtt_ms: 1.0,
                availability: 0.99,
                adapter_required: true,
                ephemeral: Some(provider_hs.offer()),
            }),
        ),
        (
            "05_contract_accept",
            "requester-signed contract terms",
            PayloadMessage::ContractAccept(ContractMessage {
                signature: peer.sign(&body),
                body: body.clone(),
                ephemeral: Some(requester_hs.offer()),
            }),
        ),
        (
            "06_contract_signed",
            "provider countersignature",
            PayloadMessage::ContractSigned(ContractMessage {
                signature: signer.sign(&body),
                body,
                ephemeral: None,
            }),
        ),
        (
            "07_data_request",
            "plaintext data request",
            PayloadMessage::DataRequest(DataRequest {
                contract_id: tx(5),
                params,
            }),
        ),
        (
            "08_data_response",
            "plaintext data response, u32 2500",
            PayloadMessage::DataResponse(DataResponse {
                contract_id: tx(5),
                value: crate::cbor::encode(&Value::Integer(2500.into())),
            }),
        ),
    ]
}

fn session_keys(signer: &NodeIdentity, peer: &NodeIdentity) -> SessionKeys {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Handshake::start(signer, tx(5), Role::Responder, &mut rng);
    let b = Handshake::start(peer, tx(5), Role::Initiator, &mut rng);
    a.finish(&b.offer(), &peer.public()).expect("fixed handshake")
}

fn vector(name: &str, description: &str, frame: Vec<u8>, sender_public: [u8; 32], n: u16) -> GoldenVector {
    let expect = wire::verify_packet(&frame, &sender_public).map(|_| ());
    let token = [0xC0, 0xA9, (n >> 8) as u8, n as u8];
    GoldenVector {
        name: name.into(),
        description: description.into(),
        coap: coap_wrap_with(&frame, 0x1000 + n, token),
        frame,
        sender_public,
        expect,
    }
}

/// The full set, in a fixed order.
pub fn golden_vectors() -> Vec<GoldenVector> {
    let signer = NodeIdentity::from_seed(SIGNER_SEED);
    let peer = NodeIdentity::from_seed(PEER_SEED);
    let other = NodeIdentity::from_seed(OTHER_SEED);
    let pk = signer.public();
    let mut out = Vec::new();
    let mut n = 0u16;
    let mut push = |out: &mut Vec<GoldenVector>, name: &str, desc: &str, frame: Vec<u8>, key: [u8; 32]| {
        n += 1;
        out.push(vector(name, desc, frame, key, n));
    };

    let msgs = messages(&signer, &peer);
    for (i, (name, desc, msg)) in msgs.iter().enumerate() {
        let flags = match msg {
            PayloadMessage::ContractAccept(_) | PayloadMessage::ContractSigned(_) => Flags(Flags::REQUIRES_ACK),
            _ => Flags::empty(),
        };
        push(&mut out, name, desc, plain_frame(&signer, msg, i as u8 + 1, flags), pk);
    }
    push(
        &mut out,
        "09_ack",
        "empty data response acknowledging a contract",
        plain_frame(&signer, &PayloadMessage::Ack, 9, Flags::empty()),
        pk,
    );

    let mut keys = session_keys(&signer, &peer);
    let request = msgs[6].2.clone();
    let response = msgs[7].2.clone();
    push(
        &mut out,
        "10_data_request_encrypted",
        "sealed data request",
        sealed_frame(&signer, &mut keys, &request, 10, Flags::empty()),
        pk,
    );
    push(
        &mut out,
        "11_data_response_adapter",
        "sealed data response needing translation",
        sealed_frame(&signer, &mut keys, &response, 11, Flags(Flags::HAS_ADAPTER)),
        pk,
    );
    push(
        &mut out,
        "12_data_response_stream",
        "sealed streaming update",
        sealed_frame(&signer, &mut keys, &response, 12, Flags(Flags::IS_STREAMING)),
        pk,
    );

    let good = plain_frame(&signer, &msgs[6].2, 13, Flags::empty());
    let mut bad = good.clone();
    *bad.last_mut().expect("payload present") ^= 0x01;
    push(&mut out, "13_bad_checksum", "one payload bit flipped", bad, pk);
    push(
        &mut out,
        "14_bad_signature",
        "well-formed frame signed by another key",
        plain_frame(&other, &msgs[6].2, 14, Flags::empty()),
        pk,
    );
    let mut bad = good.clone();
    bad[OFF_MAGIC] = 0x54;
    bad[OFF_MAGIC + 1] = 0x50;
    push(&mut out, "15_bad_magic", "magic 0x5450", bad, pk);
    let mut bad = good.clone();
    bad[OFF_VERSION] = 0x02;
    push(&mut out, "16_bad_version", "version 2", bad, pk);
    let mut bad = good.clone();
    bad[OFF_TYPE] = 0x09;
    push(&mut out, "17_unknown_type", "packet type 0x09", bad, pk);
    push(&mut out, "18_truncated", "header cut at 100 bytes", good[..100].to_vec(), pk);
    let mut bad = good.clone();
    bad.push(0);
    push(&mut out, "19_length_mismatch", "one byte more than declared", bad, pk);
    out
}

fn expect_name(e: &Result<(), WireError>) -> &'static str {
    match e {
        Ok(()) => "ok",
        Err(WireError::TooShort(_)) => "TooShort",
        Err(WireError::BadMagic(_)) => "BadMagic",
        Err(WireError::UnsupportedVersion(_)) => "UnsupportedVersion",
        Err(WireError::UnknownPacketType(_)) => "UnknownPacketType",
        Err(WireError::LengthMismatch { .. }) => "LengthMismatch",
        Err(WireError::ChecksumMismatch) => "ChecksumMismatch",
        Err(WireError::BadSignature) => "BadSignature",
        Err(WireError::ReplayDetected) => "ReplayDetected",
        Err(WireError::Expired) => "Expired",
        Err(WireError::PayloadTooLarge(..)) => "PayloadTooLarge",
        Err(WireError::EmptyCapability) => "EmptyCapability",
        Err(WireError::CompressionUnsupported) => "CompressionUnsupported",
    }
}

/// Field values of every vector, as TOML. Numbers are hex strings except
/// the code and lengths.
pub fn manifest(vectors: &[GoldenVector]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format = 1");
    let _ = writeln!(s, "magic = \"{:04x}\"", wire::MAGIC);
    let _ = writeln!(s, "header_len = {HEADER_LEN}");
    for v in vectors {
        let _ = writeln!(s, "\n[[vector]]");
        let _ = writeln!(s, "name = \"{}\"", v.name);
        let _ = writeln!(s, "description = \"{}\"", v.description);
        let _ = writeln!(s, "file = \"{}\"", v.file_name());
        let _ = writeln!(s, "coap_file = \"{}\"", v.coap_file_name());
        let _ = writeln!(s, "frame_len = {}", v.frame.len());
        let _ = writeln!(s, "sender_pubkey = \"{}\"", hex::encode(v.sender_public));
        let _ = writeln!(s, "expect = \"{}\"", expect_name(&v.expect));
        let _ = writeln!(s, "expect_code = {}", v.expect.as_ref().err().map_or(0, WireError::code));
        let raw = |a: usize, b: usize| hex::encode(&v.frame[a..b.min(v.frame.len())]);
        if v.frame.len() >= HEADER_LEN {
            let _ = writeln!(s, "magic_field = \"{}\"", raw(0, 2));
            let _ = writeln!(s, "version = \"{}\"", raw(2, 3));
            let _ = writeln!(s, "packet_type = \"{}\"", raw(3, 4));
            let _ = writeln!(s, "transaction_id = \"{}\"", raw(4, 20));
            let _ = writeln!(s, "payload_length = \"{}\"", raw(20, 24));
            let _ = writeln!(s, "capability_hash = \"{}\"", raw(24, 28));
            let _ = writeln!(s, "sequence_number = \"{}\"", raw(28, 32));
            let _ = writeln!(s, "flags = \"{}\"", raw(32, 36));
            let _ = writeln!(s, "timestamp = \"{}\"", raw(36, 44));
            let _ = writeln!(s, "ttl = \"{}\"", raw(44, 48));
            let _ = writeln!(s, "checksum = \"{}\"", raw(48, 52));
            let _ = writeln!(s, "signature = \"{}\"", raw(52, 116));
        }
    }
    s
}

/// Writes every vector, its CoAP form and the manifest into `dir`.
pub fn write_vectors(dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let vectors = golden_vectors();
    let mut written = Vec::new();
    for v in &vectors {
        for (name, bytes) in [(v.file_name(), &v.frame), (v.coap_file_name(), &v.coap)] {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            written.push(p);
        }
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest(&vectors))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::coap::coap_unwrap;

    #[test]
    fn deterministic_and_self_consistent() {
        let a = golden_vectors();
        assert_eq!(a, golden_vectors());
        assert_eq!(a.len(), 19);
        for v in &a {
            assert_eq!(coap_unwrap(&v.coap).unwrap(), v.frame, "{}", v.name);
        }
        let ok = a.iter().filter(|v| v.expect.is_ok()).count();
        assert_eq!(ok, 12);
        let m = manifest(&a);
        let t: toml::Table = toml::from_str(&m).unwrap();
        assert_eq!(t["magic"].as_str(), Some("5449"));
    }
}
