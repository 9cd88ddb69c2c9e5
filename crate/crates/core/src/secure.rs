//! Pre-shared-key channel: a three-message mutual challenge-response
//! handshake followed by an authenticated-encryption record layer.
//!
//! ```text
//! initiator -> responder : nonce_i                        (32 bytes)
//! responder -> initiator : nonce_r || mac(R, nonce_i, nonce_r)
//! initiator -> responder : mac(I, nonce_i, nonce_r)
//! ```
//!
//! `mac(label, ..)` is HMAC-SHA256 keyed by the deployment secret over the
//! role label and both nonces. Direction keys come from HKDF-SHA256 with the
//! secret as input key material, `nonce_i || nonce_r` as salt and the info
//! strings [`INFO_I2R`] / [`INFO_R2I`]. Records are
//! `counter (8, BE) || ChaCha20-Poly1305(plaintext)` with the counter as
//! associated data and as the low 8 bytes of the AEAD nonce.

use alloc::vec::Vec;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

pub const SECRET_LEN: usize = 32;
pub const NONCE_LEN: usize = 32;
pub const MAC_LEN: usize = 32;
pub const COUNTER_LEN: usize = 8;
pub const TAG_LEN: usize = 16;

pub const LABEL_INITIATOR: &[u8] = b"fog-channel v1 initiator";
pub const LABEL_RESPONDER: &[u8] = b"fog-channel v1 responder";
pub const INFO_I2R: &[u8] = b"fog-channel v1 key i2r";
pub const INFO_R2I: &[u8] = b"fog-channel v1 key r2i";

type HmacSha256 = Hmac<Sha256>;

/// The 32-byte secret shared by both ends of one deployment.
#[derive(Clone, PartialEq, Eq)]
pub struct DeploymentSecret(pub [u8; SECRET_LEN]);

impl core::fmt::Debug for DeploymentSecret {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "DeploymentSecret(id={:02x?})", &self.id()[..4])
    }
}

impl DeploymentSecret {
    /// Public identifier of the secret (first 8 bytes of its SHA-256).
    pub fn id(&self) -> [u8; 8] {
        key_id(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HandshakeError {
    #[error("peer failed to prove knowledge of the deployment secret")]
    AuthMismatch,
    #[error("malformed handshake message")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("record counter {got} does not advance past {expected}")]
    ReplayDetected { expected: u64, got: u64 },
    #[error("record failed authentication")]
    AuthFailed,
    #[error("record too short")]
    Malformed,
    #[error("send counter exhausted")]
    CounterExhausted,
}

fn mac(secret: &DeploymentSecret, label: &[u8], ni: &[u8; NONCE_LEN], nr: &[u8; NONCE_LEN]) -> HmacSha256 {
    let mut m = <HmacSha256 as Mac>::new_from_slice(&secret.0).expect("hmac accepts any key length");
    m.update(label);
    m.update(ni);
    m.update(nr);
    m
}

/// Derives the (initiator-to-responder, responder-to-initiator) keys.
pub fn derive_keys(
    secret: &DeploymentSecret,
    nonce_i: &[u8; NONCE_LEN],
    nonce_r: &[u8; NONCE_LEN],
) -> ([u8; 32], [u8; 32]) {
    let mut salt = [0u8; 2 * NONCE_LEN];
    salt[..NONCE_LEN].copy_from_slice(nonce_i);
    salt[NONCE_LEN..].copy_from_slice(nonce_r);
    let hk = Hkdf::<Sha256>::new(Some(&salt), &secret.0);
    let mut i2r = [0u8; 32];
    let mut r2i = [0u8; 32];
    hk.expand(INFO_I2R, &mut i2r).expect("32 bytes is a valid length");
    hk.expand(INFO_R2I, &mut r2i).expect("32 bytes is a valid length");
    (i2r, r2i)
}

/// First 8 bytes of SHA-256 of a key; safe to log or compare.
pub fn key_id(key: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(key);
    let mut out = [0u8; 8];
    out.copy_from_slice(&d[..8]);
    out
}

/// Initiator waiting for the responder's reply.
pub struct Initiator {
    secret: DeploymentSecret,
    nonce_i: [u8; NONCE_LEN],
}

impl Initiator {
    /// Returns the state and the first message (the initiator nonce).
    pub fn start(secret: DeploymentSecret, nonce_i: [u8; NONCE_LEN]) -> (Self, [u8; NONCE_LEN]) {
        (Initiator { secret, nonce_i }, nonce_i)
    }

    /// Checks the responder's proof and returns the confirmation message and
    /// the established session.
    pub fn finish(self, msg2: &[u8]) -> Result<(Vec<u8>, Session), HandshakeError> {
        if msg2.len() != NONCE_LEN + MAC_LEN {
            return Err(HandshakeError::Malformed);
        }
        let mut nonce_r = [0u8; NONCE_LEN];
        nonce_r.copy_from_slice(&msg2[..NONCE_LEN]);
        mac(&self.secret, LABEL_RESPONDER, &self.nonce_i, &nonce_r)
            .verify_slice(&msg2[NONCE_LEN..])
            .map_err(|_| HandshakeError::AuthMismatch)?;
        let confirm = mac(&self.secret, LABEL_INITIATOR, &self.nonce_i, &nonce_r)
            .finalize()
            .into_bytes()
            .to_vec();
        let (i2r, r2i) = derive_keys(&self.secret, &self.nonce_i, &nonce_r);
        Ok((confirm, Session::new(i2r, r2i)))
    }
}

/// Responder waiting for the initiator's confirmation.
pub struct Responder {
    secret: DeploymentSecret,
    nonce_i: [u8; NONCE_LEN],
    nonce_r: [u8; NONCE_LEN],
}

impl Responder {
    /// Handles the first message and returns the state plus the reply.
    pub fn respond(
        secret: DeploymentSecret,
        msg1: &[u8],
        nonce_r: [u8; NONCE_LEN],
    ) -> Result<(Self, Vec<u8>), HandshakeError> {
        let nonce_i: [u8; NONCE_LEN] = msg1.try_into().map_err(|_| HandshakeError::Malformed)?;
        let proof = mac(&secret, LABEL_RESPONDER, &nonce_i, &nonce_r).finalize().into_bytes();
        let mut msg2 = Vec::with_capacity(NONCE_LEN + MAC_LEN);
        msg2.extend_from_slice(&nonce_r);
        msg2.extend_from_slice(&proof);
        Ok((
            Responder {
                secret,
                nonce_i,
                nonce_r,
            },
            msg2,
        ))
    }

    pub fn finish(self, msg3: &[u8]) -> Result<Session, HandshakeError> {
        if msg3.len() != MAC_LEN {
            return Err(HandshakeError::Malformed);
        }
        mac(&self.secret, LABEL_INITIATOR, &self.nonce_i, &self.nonce_r)
            .verify_slice(msg3)
            .map_err(|_| HandshakeError::AuthMismatch)?;
        let (i2r, r2i) = derive_keys(&self.secret, &self.nonce_i, &self.nonce_r);
        // The responder sends with r2i and receives with i2r.
        Ok(Session::new(r2i, i2r))
    }
}

fn aead_nonce(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    Nonce::from(n)
}

pub struct Sealer {
    cipher: ChaCha20Poly1305,
    counter: u64,
}

impl Sealer {
    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, RecordError> {
        let counter = self.counter;
        self.counter = counter.checked_add(1).ok_or(RecordError::CounterExhausted)?;
        let aad = counter.to_be_bytes();
        let ct = self
            .cipher
            .encrypt(&aead_nonce(counter), Payload { msg: plaintext, aad: &aad })
            .map_err(|_| RecordError::AuthFailed)?;
        let mut out = Vec::with_capacity(COUNTER_LEN + ct.len());
        out.extend_from_slice(&aad);
        out.extend_from_slice(&ct);
        Ok(out)
    }

    /// Counter the next record will carry.
    pub fn next_counter(&self) -> u64 {
        self.counter
    }
}

pub struct Opener {
    cipher: ChaCha20Poly1305,
    next: u64,
}

impl Opener {
    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, RecordError> {
        if record.len() < COUNTER_LEN + TAG_LEN {
            return Err(RecordError::Malformed);
        }
        let mut c = [0u8; COUNTER_LEN];
        c.copy_from_slice(&record[..COUNTER_LEN]);
        let counter = u64::from_be_bytes(c);
        if counter < self.next {
            return Err(RecordError::ReplayDetected {
                expected: self.next,
                got: counter,
            });
        }
        let pt = self
            .cipher
            .decrypt(
                &aead_nonce(counter),
                Payload {
                    msg: &record[COUNTER_LEN..],
                    aad: &c,
                },
            )
            .map_err(|_| RecordError::AuthFailed)?;
        self.next = counter.saturating_add(1);
        Ok(pt)
    }
}

/// An established channel session: one sealing and one opening direction.
pub struct Session {
    pub sealer: Sealer,
    pub opener: Opener,
    pub send_key_id: [u8; 8],
    pub recv_key_id: [u8; 8],
}

impl Session {
    fn new(send_key: [u8; 32], recv_key: [u8; 32]) -> Self {
        Session {
            sealer: Sealer {
                cipher: ChaCha20Poly1305::new(Key::from_slice(&send_key)),
                counter: 0,
            },
            opener: Opener {
                cipher: ChaCha20Poly1305::new(Key::from_slice(&recv_key)),
                next: 0,
            },
            send_key_id: key_id(&send_key),
            recv_key_id: key_id(&recv_key),
        }
    }

    pub fn split(self) -> (Sealer, Opener) {
        (self.sealer, self.opener)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(si: [u8; 32], sr: [u8; 32]) -> Result<(Session, Session), HandshakeError> {
        let (init, m1) = Initiator::start(DeploymentSecret(si), [1; 32]);
        let (resp, m2) = Responder::respond(DeploymentSecret(sr), &m1, [2; 32])?;
        let (m3, s_i) = init.finish(&m2)?;
        let s_r = resp.finish(&m3)?;
        Ok((s_i, s_r))
    }

    #[test]
    fn matching_secrets_agree_on_keys() {
        let (a, b) = pair([7; 32], [7; 32]).unwrap();
        assert_eq!(a.send_key_id, b.recv_key_id);
        assert_eq!(a.recv_key_id, b.send_key_id);
        assert_ne!(a.send_key_id, a.recv_key_id);
    }

    #[test]
    fn mismatched_secrets_fail_at_initiator() {
        assert_eq!(pair([7; 32], [8; 32]).err(), Some(HandshakeError::AuthMismatch));
    }

    #[test]
    fn forged_confirmation_fails_at_responder() {
        let (_, m1) = Initiator::start(DeploymentSecret([7; 32]), [1; 32]);
        let (resp, _) = Responder::respond(DeploymentSecret([7; 32]), &m1, [2; 32]).unwrap();
        assert_eq!(resp.finish(&[0; 32]).err(), Some(HandshakeError::AuthMismatch));
    }

    #[test]
    fn records_round_trip_and_replays_are_caught() {
        let (a, b) = pair([3; 32], [3; 32]).unwrap();
        let (mut tx, _) = a.split();
        let (_, mut rx) = b.split();
        let r0 = tx.seal(b"hello").unwrap();
        let r1 = tx.seal(b"").unwrap();
        assert_eq!(rx.open(&r0).unwrap(), b"hello");
        assert_eq!(rx.open(&r1).unwrap(), b"");
        assert_eq!(
            rx.open(&r0),
            Err(RecordError::ReplayDetected { expected: 2, got: 0 })
        );
    }

    #[test]
    fn tampering_is_detected() {
        let (a, b) = pair([3; 32], [3; 32]).unwrap();
        let (mut tx, _) = a.split();
        let (_, mut rx) = b.split();
        let mut r = tx.seal(b"payload").unwrap();
        let last = r.len() - 1;
        r[last] ^= 1;
        assert_eq!(rx.open(&r), Err(RecordError::AuthFailed));
        // bumping the counter breaks the associated data check
        let mut r = tx.seal(b"payload").unwrap();
        r[7] ^= 0x10;
        assert_eq!(rx.open(&r), Err(RecordError::AuthFailed));
        assert_eq!(rx.open(&[0; 5]), Err(RecordError::Malformed));
    }
}
