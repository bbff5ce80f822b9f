//! Key generation, bearer tokens and client registration.
//!
//! Tokens are compact JWTs signed with Ed25519:
//!
//! ```text
//! base64url(header) "." base64url(claims) "." base64url(signature)
//! ```
//!
//! Header and claims are JSON with sorted keys and no whitespace, and the
//! signature covers the first two segments joined by a dot. Each identity
//! self-signs with its own key; verifiers check against the public key held
//! in the [`UserPool`]. All times are simulated seconds.

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};

use crate::ledger::canonical::sorted_json;
use crate::ledger::{ChainState, LedgerError, TxId, TxKind};
use crate::seed;

pub const DEFAULT_TTL_S: f64 = 3600.0;
const TOKEN_ALG: &str = "EdDSA";
const TOKEN_TYP: &str = "JWT";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IdentityError {
    #[error("token ttl must be positive, got {0}")]
    InvalidTTL(f64),
    #[error("malformed token: {0}")]
    MalformedToken(String),
    #[error("identity must be a non-empty string")]
    InvalidIdentity,
    #[error("malformed register record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Client,
    Agent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Client => "Client",
            Role::Agent => "Agent",
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub p_k: [u8; 32],
    pub s_k: [u8; 32],
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("p_k", &hex::encode(self.p_k))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn from_secret(s_k: [u8; 32]) -> KeyPair {
        let sk = SigningKey::from_bytes(&s_k);
        KeyPair {
            p_k: sk.verifying_key().to_bytes(),
            s_k,
        }
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        SigningKey::from_bytes(&self.s_k).sign(msg).to_bytes()
    }
}

/// Deterministic Ed25519 pair: the secret is SHA-256 of the seed under a fixed label.
pub fn key_generator(rng_seed: u64) -> KeyPair {
    KeyPair::from_secret(seed::derive_bytes("fedunlearn/keygen", &[rng_seed]))
}

pub fn verify_signature(p_k: &[u8; 32], msg: &[u8], sig: &[u8; 64]) -> bool {
    match VerifyingKey::from_bytes(p_k) {
        Ok(vk) => vk.verify(msg, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHeader {
    pub alg: String,
    pub typ: String,
}

impl Default for TokenHeader {
    fn default() -> Self {
        TokenHeader {
            alg: TOKEN_ALG.to_owned(),
            typ: TOKEN_TYP.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claims {
    pub sub: String,
    /// Issued-at, simulated seconds.
    pub iat: f64,
    /// Expires-at, simulated seconds (exclusive).
    pub exp: f64,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuthToken {
    pub header: TokenHeader,
    pub claims: Claims,
    pub signature: [u8; 64],
}

impl AuthToken {
    fn signing_input(header: &TokenHeader, claims: &Claims) -> String {
        format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(sorted_json(header)),
            URL_SAFE_NO_PAD.encode(sorted_json(claims))
        )
    }

    pub fn encode(&self) -> String {
        format!(
            "{}.{}",
            Self::signing_input(&self.header, &self.claims),
            URL_SAFE_NO_PAD.encode(self.signature)
        )
    }

    pub fn decode(s: &str) -> Result<AuthToken, IdentityError> {
        let bad = |m: &str| IdentityError::MalformedToken(m.to_owned());
        let parts: Vec<&str> = s.split('.').collect();
        let [h, c, sig] = parts.as_slice() else {
            return Err(bad("expected three segments"));
        };
        let h = URL_SAFE_NO_PAD.decode(h).map_err(|_| bad("header is not base64url"))?;
        let c = URL_SAFE_NO_PAD.decode(c).map_err(|_| bad("claims are not base64url"))?;
        let sig = URL_SAFE_NO_PAD.decode(sig).map_err(|_| bad("signature is not base64url"))?;
        Ok(AuthToken {
            header: serde_json::from_slice(&h).map_err(|e| bad(&e.to_string()))?,
            claims: serde_json::from_slice(&c).map_err(|e| bad(&e.to_string()))?,
            signature: sig.try_into().map_err(|_| bad("signature must be 64 bytes"))?,
        })
    }

    pub fn signed_message(&self) -> String {
        Self::signing_input(&self.header, &self.claims)
    }
}

pub fn generate_token(
    pair: &KeyPair,
    subject: &str,
    role: Role,
    issued_at_s: f64,
    ttl_s: f64,
) -> Result<AuthToken, IdentityError> {
    if !(ttl_s > 0.0) || !ttl_s.is_finite() {
        return Err(IdentityError::InvalidTTL(ttl_s));
    }
    let header = TokenHeader::default();
    let claims = Claims {
        sub: subject.to_owned(),
        iat: issued_at_s,
        exp: issued_at_s + ttl_s,
        role,
    };
    let signature = pair.sign(AuthToken::signing_input(&header, &claims).as_bytes());
    Ok(AuthToken {
        header,
        claims,
        signature,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenVerdict {
    Ok { subject: String, role: Role },
    Expired,
    BadSignature,
    UnknownSubject,
    /// Signature is fine but the claimed role differs from the registered one.
    RoleMismatch,
}

impl TokenVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, TokenVerdict::Ok { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    #[serde(with = "hex_key")]
    pub p_k: [u8; 32],
    pub role: Role,
    pub registration: TxId,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| serde::de::Error::custom("expected 32-byte hex key"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegisterPayload {
    c_id: String,
    #[serde(with = "hex_key")]
    p_k: [u8; 32],
    role: Role,
}

/// Registered identities. Secrets never enter the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPool {
    key_seed: u64,
    ttl_s: f64,
    entries: BTreeMap<String, PoolEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegisterOutcome {
    /// The issued token plus the key pair, handed back to the registrant only.
    RegisterSuccess { token: AuthToken, keys: KeyPair },
    AlreadyExists,
}

impl UserPool {
    pub fn new(key_seed: u64) -> Self {
        Self::with_ttl(key_seed, DEFAULT_TTL_S)
    }

    pub fn with_ttl(key_seed: u64, ttl_s: f64) -> Self {
        UserPool {
            key_seed,
            ttl_s,
            entries: BTreeMap::new(),
        }
    }

    pub fn ttl_s(&self) -> f64 {
        self.ttl_s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PoolEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &PoolEntry)> {
        self.entries.iter()
    }

    /// Key-generation seed for an identity; stable across runs.
    pub fn key_seed_for(&self, id: &str) -> u64 {
        seed::derive(&format!("identity/{id}"), &[self.key_seed])
    }

    pub fn verify_token(&self, token: &AuthToken, now_s: f64) -> TokenVerdict {
        verify_token(self, token, now_s)
    }

    /// Rebuilds the pool from the Register transactions of a chain.
    pub fn replay(chain: &ChainState, key_seed: u64, ttl_s: f64) -> Result<UserPool, IdentityError> {
        let mut pool = UserPool::with_ttl(key_seed, ttl_s);
        for tx in chain.transactions().filter(|t| t.kind == TxKind::Register) {
            let p: RegisterPayload = serde_json::from_slice(&tx.payload)
                .map_err(|e| IdentityError::MalformedRecord(e.to_string()))?;
            if pool.entries.contains_key(&p.c_id) {
                return Err(IdentityError::MalformedRecord(format!("{} registered twice", p.c_id)));
            }
            pool.entries.insert(
                p.c_id,
                PoolEntry {
                    p_k: p.p_k,
                    role: p.role,
                    registration: tx.t_id,
                },
            );
        }
        Ok(pool)
    }
}

pub fn verify_token(pool: &UserPool, token: &AuthToken, now_s: f64) -> TokenVerdict {
    let Some(entry) = pool.entries.get(&token.claims.sub) else {
        return TokenVerdict::UnknownSubject;
    };
    if token.header != TokenHeader::default()
        || !verify_signature(&entry.p_k, token.signed_message().as_bytes(), &token.signature)
    {
        return TokenVerdict::BadSignature;
    }
    if token.claims.role != entry.role {
        return TokenVerdict::RoleMismatch;
    }
    let c = &token.claims;
    if !(c.exp > c.iat) || !(c.iat <= now_s && now_s < c.exp) {
        return TokenVerdict::Expired;
    }
    TokenVerdict::Ok {
        subject: c.sub.clone(),
        role: c.role,
    }
}

/// Registers `c_id`: key pair, token, a sealed Register transaction, pool entry.
///
/// The pool is only modified once the ledger write succeeded.
pub fn register_client(
    pool: &mut UserPool,
    chain: &mut ChainState,
    c_id: &str,
    role: Role,
    now_s: f64,
) -> Result<RegisterOutcome, IdentityError> {
    if c_id.is_empty() {
        return Err(IdentityError::InvalidIdentity);
    }
    if pool.entries.contains_key(c_id) {
        return Ok(RegisterOutcome::AlreadyExists);
    }
    let keys = key_generator(pool.key_seed_for(c_id));
    let token = generate_token(&keys, c_id, role, now_s, pool.ttl_s)?;
    let payload = sorted_json(&RegisterPayload {
        c_id: c_id.to_owned(),
        p_k: keys.p_k,
        role,
    });
    let t_id = chain.submit_transaction(TxKind::Register, c_id, payload, now_s)?;
    chain.seal_block()?;
    pool.entries.insert(
        c_id.to_owned(),
        PoolEntry {
            p_k: keys.p_k,
            role,
            registration: t_id,
        },
    );
    Ok(RegisterOutcome::RegisterSuccess { token, keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registered(id: &str, role: Role) -> (UserPool, ChainState, AuthToken, KeyPair) {
        let mut pool = UserPool::new(7);
        let mut chain = ChainState::new();
        match register_client(&mut pool, &mut chain, id, role, 0.0).unwrap() {
            RegisterOutcome::RegisterSuccess { token, keys } => (pool, chain, token, keys),
            RegisterOutcome::AlreadyExists => unreachable!(),
        }
    }

    #[test]
    fn keygen_is_seeded() {
        assert_eq!(key_generator(42), key_generator(42));
        assert_ne!(key_generator(1).p_k, key_generator(2).p_k);
        let kp = key_generator(42);
        let msg = [0xabu8; 16];
        assert!(verify_signature(&kp.p_k, &msg, &kp.sign(&msg)));
    }

    #[test]
    fn zero_ttl_rejected() {
        let kp = key_generator(1);
        assert_eq!(
            generate_token(&kp, "c1", Role::Client, 0.0, 0.0),
            Err(IdentityError::InvalidTTL(0.0))
        );
        assert!(generate_token(&kp, "c1", Role::Client, 0.0, -5.0).is_err());
    }

    #[test]
    fn token_window_is_half_open() {
        let (pool, _, token, _) = registered("c1", Role::Client);
        assert!(pool.verify_token(&token, 10.0).is_ok());
        assert!(pool.verify_token(&token, 0.0).is_ok());
        assert_eq!(pool.verify_token(&token, DEFAULT_TTL_S), TokenVerdict::Expired);
        assert_eq!(pool.verify_token(&token, -1.0), TokenVerdict::Expired);
    }

    #[test]
    fn flipped_signature_byte_is_rejected() {
        let (pool, _, mut token, _) = registered("c1", Role::Client);
        token.signature[5] ^= 0x01;
        assert_eq!(pool.verify_token(&token, 1.0), TokenVerdict::BadSignature);
    }

    #[test]
    fn role_escalation_is_rejected() {
        let (pool, _, _, keys) = registered("c1", Role::Client);
        let forged = generate_token(&keys, "c1", Role::Agent, 0.0, 100.0).unwrap();
        assert_eq!(pool.verify_token(&forged, 1.0), TokenVerdict::RoleMismatch);
    }

    #[test]
    fn unknown_subject() {
        let (pool, _, _, _) = registered("c1", Role::Client);
        let other = generate_token(&key_generator(9), "c9", Role::Client, 0.0, 10.0).unwrap();
        assert_eq!(pool.verify_token(&other, 1.0), TokenVerdict::UnknownSubject);
    }

    #[test]
    fn duplicate_registration() {
        let (mut pool, mut chain, token, _) = registered("c1", Role::Client);
        assert_eq!(pool.len(), 1);
        assert_eq!(chain.count_kind(TxKind::Register), 1);
        assert!(pool.verify_token(&token, 0.0).is_ok());
        let again = register_client(&mut pool, &mut chain, "c1", Role::Client, 5.0).unwrap();
        assert_eq!(again, RegisterOutcome::AlreadyExists);
        assert_eq!(chain.count_kind(TxKind::Register), 1);
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn failed_ledger_write_leaves_pool_untouched() {
        let (mut pool, mut chain, _, _) = registered("c1", Role::Client);
        chain.submit_transaction(TxKind::Register, "x", vec![1], 50.0).unwrap();
        chain.seal_block().unwrap();
        let err = register_client(&mut pool, &mut chain, "c2", Role::Client, 10.0);
        assert!(matches!(err, Err(IdentityError::Ledger(LedgerError::NonMonotonicTime { .. }))));
        assert!(!pool.contains("c2"));
    }

    #[test]
    fn wire_form_round_trips() {
        let (pool, _, token, _) = registered("c1", Role::Client);
        let s = token.encode();
        assert_eq!(s.split('.').count(), 3);
        assert!(!s.contains('='));
        let back = AuthToken::decode(&s).unwrap();
        assert_eq!(back, token);
        assert!(pool.verify_token(&back, 1.0).is_ok());
        assert!(AuthToken::decode("a.b").is_err());
        assert!(AuthToken::decode("!!.a.b").is_err());
    }

    #[test]
    fn replay_rebuilds_pool() {
        let mut pool = UserPool::new(3);
        let mut chain = ChainState::new();
        for (i, id) in ["agent", "c1", "c2"].iter().enumerate() {
            let role = if i == 0 { Role::Agent } else { Role::Client };
            register_client(&mut pool, &mut chain, id, role, i as f64).unwrap();
        }
        assert_eq!(UserPool::replay(&chain, 3, DEFAULT_TTL_S).unwrap(), pool);
    }
}
