//! Node identity, Ed25519 signatures, X25519 session establishment,
//! ChaCha20-Poly1305 payload sealing and the anti-replay cache.

mod replay;

use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use crate::model::NodeId;

pub use replay::{
    check_replay, nonce_digest, ReplayCache, ReplayVerdict, DEFAULT_LRU_CAPACITY, DEFAULT_SKEW_WINDOW_US,
};

/// HKDF info string for session key derivation.
pub const SESSION_INFO: &[u8] = b"tip-session-v1";
const EPHEMERAL_CONTEXT: &[u8] = b"tip-eph-v1";
/// Length of the explicit nonce counter prepended to sealed payloads.
pub const SEAL_COUNTER_LEN: usize = 8;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("ECDH produced a low-order (all-zero) shared secret")]
    LowOrderPoint,
    #[error("AEAD authentication failed")]
    AuthFailure,
    #[error("signature verification failed")]
    BadSignature,
    #[error("handshake peer did not answer")]
    Timeout,
    #[error("key file: {0}")]
    KeyFile(String),
}

/// A node's long-term Ed25519 identity.
#[derive(Clone)]
pub struct NodeIdentity {
    signing: SigningKey,
    node_id: NodeId,
}

impl std::fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeIdentity")
            .field("node_id", &self.node_id)
            .finish_non_exhaustive()
    }
}

impl NodeIdentity {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&seed);
        let node_id = NodeId::from_public(signing.verifying_key().as_bytes());
        Self { signing, node_id }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    /// Loads a hex-encoded 32-byte seed.
    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CryptoError::KeyFile(format!("{}: {e}", path.display())))?;
        let raw = hex::decode(text.trim()).map_err(|e| CryptoError::KeyFile(e.to_string()))?;
        let seed: [u8; 32] = raw
            .try_into()
            .map_err(|_| CryptoError::KeyFile("seed must be 32 bytes".into()))?;
        Ok(Self::from_seed(seed))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, hex::encode(self.signing.to_bytes()) + "\n")
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn public(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        sign(&self.signing, msg)
    }
}

pub fn sign(key: &SigningKey, msg: &[u8]) -> [u8; 64] {
    key.sign(msg).to_bytes()
}

/// Standard Ed25519 verification. Malformed keys verify as false.
pub fn verify(public: &[u8; 32], msg: &[u8], sig: &[u8; 64]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public) else {
        return false;
    };
    key.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

/// X25519 keypair used for one session.
pub struct EphemeralKeypair {
    secret: StaticSecret,
    public: [u8; 32],
}

impl EphemeralKeypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = XPublic::from(&secret).to_bytes();
        Self { secret, public }
    }

    pub fn public(&self) -> [u8; 32] {
        self.public
    }

    pub fn secret(&self) -> &StaticSecret {
        &self.secret
    }
}

/// X25519 Diffie-Hellman; non-contributory results are rejected.
pub fn derive_shared(local: &StaticSecret, remote_public: &[u8; 32]) -> Result<[u8; 32], CryptoError> {
    let shared = local.diffie_hellman(&XPublic::from(*remote_public));
    if !shared.was_contributory() {
        return Err(CryptoError::LowOrderPoint);
    }
    Ok(shared.to_bytes())
}

/// Which end of the exchange a party is; picks the send/receive key halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

/// Expands the ECDH secret into two directional AEAD keys.
///
/// Output block 0..32 protects initiator→responder traffic, 32..64 the
/// reverse. Both directions share the counter nonce layout, so a single key
/// would reuse nonces.
pub fn derive_session_key_pair(shared: &[u8; 32], transaction_id: &[u8; 16]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(transaction_id), shared);
    let mut okm = [0u8; 64];
    hk.expand(SESSION_INFO, &mut okm)
        .expect("64 bytes is a valid HKDF-SHA256 length");
    let mut a = [0u8; 32];
    let mut b = [0u8; 32];
    a.copy_from_slice(&okm[..32]);
    b.copy_from_slice(&okm[32..]);
    (a, b)
}

/// Symmetric state for one established session.
#[derive(Clone)]
pub struct SessionKeys {
    pub local_ephemeral_public: [u8; 32],
    pub shared_secret: [u8; 32],
    pub send_nonce_counter: u64,
    role: Role,
    send_key: [u8; 32],
    recv_key: [u8; 32],
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionKeys")
            .field("role", &self.role)
            .field("send_nonce_counter", &self.send_nonce_counter)
            .finish_non_exhaustive()
    }
}

impl SessionKeys {
    pub fn establish(
        local: &EphemeralKeypair,
        remote_public: &[u8; 32],
        transaction_id: &[u8; 16],
        role: Role,
    ) -> Result<Self, CryptoError> {
        let shared_secret = derive_shared(local.secret(), remote_public)?;
        let (i2r, r2i) = derive_session_key_pair(&shared_secret, transaction_id);
        let (send_key, recv_key) = match role {
            Role::Initiator => (i2r, r2i),
            Role::Responder => (r2i, i2r),
        };
        Ok(Self {
            local_ephemeral_public: local.public(),
            shared_secret,
            send_nonce_counter: 0,
            role,
            send_key,
            recv_key,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Encrypts `plaintext`, returning `counter (8 bytes BE) ∥ ciphertext ∥ tag`.
    pub fn seal(&mut self, plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
        let counter = self.send_nonce_counter;
        self.send_nonce_counter += 1;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.send_key));
        let ct = cipher
            .encrypt(&nonce_for(counter), Payload { msg: plaintext, aad })
            .expect("ChaCha20-Poly1305 encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(SEAL_COUNTER_LEN + ct.len());
        out.extend_from_slice(&counter.to_be_bytes());
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(&self, sealed: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < SEAL_COUNTER_LEN + TAG_LEN {
            return Err(CryptoError::AuthFailure);
        }
        let (counter, ct) = sealed.split_at(SEAL_COUNTER_LEN);
        let counter = u64::from_be_bytes(counter.try_into().unwrap());
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.recv_key));
        cipher
            .decrypt(&nonce_for(counter), Payload { msg: ct, aad })
            .map_err(|_| CryptoError::AuthFailure)
    }

    /// Size of the sealed form of a plaintext of `len` bytes.
    pub fn sealed_len(len: usize) -> usize {
        SEAL_COUNTER_LEN + len + TAG_LEN
    }
}

/// 4 zero bytes ∥ 64-bit big-endian counter.
fn nonce_for(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    *Nonce::from_slice(&n)
}

/// An ephemeral X25519 public key signed by the sender's static Ed25519 key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedEphemeral {
    pub public: [u8; 32],
    pub signature: [u8; 64],
}

fn ephemeral_message(transaction_id: &[u8; 16], public: &[u8; 32]) -> Vec<u8> {
    let mut m = Vec::with_capacity(EPHEMERAL_CONTEXT.len() + 48);
    m.extend_from_slice(EPHEMERAL_CONTEXT);
    m.extend_from_slice(transaction_id);
    m.extend_from_slice(public);
    m
}

impl SignedEphemeral {
    pub fn create(identity: &NodeIdentity, keypair: &EphemeralKeypair, transaction_id: &[u8; 16]) -> Self {
        let public = keypair.public();
        Self {
            public,
            signature: identity.sign(&ephemeral_message(transaction_id, &public)),
        }
    }

    pub fn verify(&self, static_public: &[u8; 32], transaction_id: &[u8; 16]) -> bool {
        verify(
            static_public,
            &ephemeral_message(transaction_id, &self.public),
            &self.signature,
        )
    }
}

/// One side of the two-message signed-ephemeral exchange.
pub struct Handshake {
    keypair: EphemeralKeypair,
    offer: SignedEphemeral,
    transaction_id: [u8; 16],
    role: Role,
}

impl Handshake {
    pub fn start<R: RngCore + CryptoRng>(
        identity: &NodeIdentity,
        transaction_id: [u8; 16],
        role: Role,
        rng: &mut R,
    ) -> Self {
        let keypair = EphemeralKeypair::generate(rng);
        let offer = SignedEphemeral::create(identity, &keypair, &transaction_id);
        Self {
            keypair,
            offer,
            transaction_id,
            role,
        }
    }

    pub fn offer(&self) -> SignedEphemeral {
        self.offer
    }

    /// Checks the peer's signed ephemeral against its static key and derives
    /// the session.
    pub fn finish(self, remote: &SignedEphemeral, remote_static: &[u8; 32]) -> Result<SessionKeys, CryptoError> {
        if !remote.verify(remote_static, &self.transaction_id) {
            return Err(CryptoError::BadSignature);
        }
        SessionKeys::establish(&self.keypair, &remote.public, &self.transaction_id, self.role)
    }
}

/// Carries handshake messages between the two parties. `None` means the
/// message (or its answer) never arrived.
pub trait HandshakeChannel {
    fn to_responder(&mut self, msg: SignedEphemeral) -> Option<SignedEphemeral>;
    fn to_initiator(&mut self, msg: SignedEphemeral) -> Option<SignedEphemeral>;
}

/// Runs a complete exchange over `channel`, returning the initiator's and
/// the responder's session state.
pub fn handshake<R: RngCore + CryptoRng>(
    initiator: &NodeIdentity,
    responder: &NodeIdentity,
    transaction_id: [u8; 16],
    channel: &mut dyn HandshakeChannel,
    rng: &mut R,
) -> Result<(SessionKeys, SessionKeys), CryptoError> {
    let init = Handshake::start(initiator, transaction_id, Role::Initiator, rng);
    let resp = Handshake::start(responder, transaction_id, Role::Responder, rng);

    let at_responder = channel.to_responder(init.offer()).ok_or(CryptoError::Timeout)?;
    let responder_offer = resp.offer();
    let responder_keys = resp.finish(&at_responder, &initiator.public())?;
    let at_initiator = channel
        .to_initiator(responder_offer)
        .ok_or(CryptoError::Timeout)?;
    let initiator_keys = init.finish(&at_initiator, &responder.public())?;
    Ok((initiator_keys, responder_keys))
}

/// Channel that delivers every message untouched.
pub struct DirectChannel;

impl HandshakeChannel for DirectChannel {
    fn to_responder(&mut self, msg: SignedEphemeral) -> Option<SignedEphemeral> {
        Some(msg)
    }
    fn to_initiator(&mut self, msg: SignedEphemeral) -> Option<SignedEphemeral> {
        Some(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sign_verify_roundtrip_and_wrong_key() {
        let mut r = rng();
        let a = NodeIdentity::generate(&mut r);
        let b = NodeIdentity::generate(&mut r);
        let sig = a.sign(b"hello");
        assert!(verify(&a.public(), b"hello", &sig));
        assert!(!verify(&b.public(), b"hello", &sig));
        assert!(!verify(&a.public(), b"hellp", &sig));
    }

    #[test]
    fn node_id_is_hash_of_public_key() {
        let id = NodeIdentity::from_seed([1; 32]);
        assert_eq!(id.node_id(), NodeId::from_public(&id.public()));
    }

    #[test]
    fn all_zero_remote_is_low_order() {
        let kp = EphemeralKeypair::from_bytes([9; 32]);
        assert_eq!(derive_shared(kp.secret(), &[0; 32]), Err(CryptoError::LowOrderPoint));
    }

    #[test]
    fn seal_open_and_tamper() {
        let mut r = rng();
        let tx = [3u8; 16];
        let a = EphemeralKeypair::generate(&mut r);
        let b = EphemeralKeypair::generate(&mut r);
        let mut sa = SessionKeys::establish(&a, &b.public(), &tx, Role::Initiator).unwrap();
        let mut sb = SessionKeys::establish(&b, &a.public(), &tx, Role::Responder).unwrap();
        assert_eq!(sa.shared_secret, sb.shared_secret);

        let sealed = sa.seal(b"fill 500", b"header");
        assert_eq!(sealed.len(), SessionKeys::sealed_len(8));
        assert_eq!(sb.open(&sealed, b"header").unwrap(), b"fill 500");
        assert_eq!(sb.open(&sealed, b"headex"), Err(CryptoError::AuthFailure));
        let mut bad = sealed.clone();
        bad[10] ^= 1;
        assert_eq!(sb.open(&bad, b"header"), Err(CryptoError::AuthFailure));
        // Counter is part of the nonce: changing it breaks authentication.
        let mut bad = sealed.clone();
        bad[7] ^= 1;
        assert_eq!(sb.open(&bad, b"header"), Err(CryptoError::AuthFailure));

        // Reverse direction uses the other key.
        let back = sb.seal(b"ok", b"");
        assert_eq!(sa.open(&back, b"").unwrap(), b"ok");
        assert!(sb.open(&back, b"").is_err());
        assert_eq!(sa.send_nonce_counter, 1);
    }

    struct Mitm(EphemeralKeypair);

    impl HandshakeChannel for Mitm {
        fn to_responder(&mut self, mut msg: SignedEphemeral) -> Option<SignedEphemeral> {
            msg.public = self.0.public();
            Some(msg)
        }
        fn to_initiator(&mut self, msg: SignedEphemeral) -> Option<SignedEphemeral> {
            Some(msg)
        }
    }

    struct Silent;

    impl HandshakeChannel for Silent {
        fn to_responder(&mut self, _: SignedEphemeral) -> Option<SignedEphemeral> {
            None
        }
        fn to_initiator(&mut self, _: SignedEphemeral) -> Option<SignedEphemeral> {
            None
        }
    }

    #[test]
    fn handshake_outcomes() {
        let mut r = rng();
        let a = NodeIdentity::generate(&mut r);
        let b = NodeIdentity::generate(&mut r);
        let (ka, kb) = handshake(&a, &b, [1; 16], &mut DirectChannel, &mut r).unwrap();
        assert_eq!(ka.shared_secret, kb.shared_secret);

        let attacker = EphemeralKeypair::generate(&mut r);
        let err = handshake(&a, &b, [1; 16], &mut Mitm(attacker), &mut r).unwrap_err();
        assert_eq!(err, CryptoError::BadSignature);

        let err = handshake(&a, &b, [1; 16], &mut Silent, &mut r).unwrap_err();
        assert_eq!(err, CryptoError::Timeout);
    }

    #[test]
    fn key_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("tip-key-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("node.key");
        let id = NodeIdentity::from_seed([5; 32]);
        id.save(&path).unwrap();
        assert_eq!(NodeIdentity::load(&path).unwrap().public(), id.public());
        assert!(NodeIdentity::load(&dir.join("missing.key")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
