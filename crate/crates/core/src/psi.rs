//! Semi-honest two-party PSI by commutative exponentiation.
//!
//! The receiver blinds its hashed items with a secret `r` and sends them;
//! the sender raises those to its secret `s` (keeping the order) and also
//! sends its own hashed items raised to `s`, shuffled. The receiver raises
//! the sender's list to `r`, and an item is in the intersection exactly when
//! `H(y)^(rs)` appears among the `H(x)^(sr)`. The sender learns nothing; the
//! receiver learns which of its items are shared.
//!
//! Elements live in the Ristretto255 prime-order group and travel as 32-byte
//! compressed encodings.

use std::collections::HashSet;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha512};

use crate::corpus::Digest;

pub const ELEMENT_LEN: usize = 32;
const HASH_DOMAIN: &[u8] = b"fedreweight-psi-v1/ristretto255/hash-to-group";

pub type Element = [u8; ELEMENT_LEN];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PsiError {
    #[error("{op} is not valid for a {role:?} session in phase {phase:?}")]
    State { op: &'static str, role: Role, phase: Phase },
    #[error("malformed group element at index {index} of {list}")]
    Decode { list: &'static str, index: usize },
    #[error("answer list has {got} elements, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed PSI payload: {0}")]
    Payload(&'static str),
}

/// Description of the group the protocol runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupParams {
    pub name: &'static str,
    pub element_len: usize,
}

impl GroupParams {
    pub const RISTRETTO255: GroupParams = GroupParams {
        name: "ristretto255",
        element_len: ELEMENT_LEN,
    };

    pub fn generator(&self) -> RistrettoPoint {
        RISTRETTO_BASEPOINT_POINT
    }

    pub fn encode(&self, p: &RistrettoPoint) -> Element {
        p.compress().to_bytes()
    }

    pub fn decode(&self, bytes: &Element) -> Option<RistrettoPoint> {
        CompressedRistretto(*bytes).decompress()
    }

    pub fn is_valid(&self, bytes: &Element) -> bool {
        self.decode(bytes).is_some()
    }
}

impl Default for GroupParams {
    fn default() -> Self {
        Self::RISTRETTO255
    }
}

/// Maps a digest into the group through SHA-512 and the Elligator-based
/// Ristretto map, so no discrete-log relation between outputs is known.
pub fn hash_to_group(d: &Digest) -> RistrettoPoint {
    let mut h = Sha512::new();
    h.update(HASH_DOMAIN);
    h.update(d.as_bytes());
    let wide: [u8; 64] = h.finalize().into();
    RistrettoPoint::from_uniform_bytes(&wide)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    /// Receiver has sent its blinded items.
    Sent1,
    /// Sender has answered.
    Responded,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiMsg1 {
    pub elements: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiMsg2 {
    /// Receiver's elements re-blinded by the sender, in msg1 order.
    pub answers: Vec<Element>,
    /// Sender's own blinded items, shuffled.
    pub sender_items: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionResult {
    /// One flag per receiver item, in the receiver's input order.
    pub member_flags: Vec<bool>,
    pub intersection: Vec<Digest>,
}

fn put_list(out: &mut Vec<u8>, list: &[Element]) {
    out.extend_from_slice(&(list.len() as u32).to_be_bytes());
    for e in list {
        out.extend_from_slice(e);
    }
}

fn take_list(bytes: &[u8]) -> Result<(Vec<Element>, &[u8]), PsiError> {
    let (len, rest) = bytes
        .split_first_chunk::<4>()
        .ok_or(PsiError::Payload("missing list length"))?;
    let k = u32::from_be_bytes(*len) as usize;
    let body = k
        .checked_mul(ELEMENT_LEN)
        .filter(|&b| b <= rest.len())
        .ok_or(PsiError::Payload("list shorter than its length field"))?;
    let list = rest[..body]
        .chunks_exact(ELEMENT_LEN)
        .map(|c| c.try_into().expect("exact chunk"))
        .collect();
    Ok((list, &rest[body..]))
}

impl PsiMsg1 {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.elements.len() * ELEMENT_LEN);
        put_list(&mut out, &self.elements);
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, PsiError> {
        let (elements, rest) = take_list(bytes)?;
        if !rest.is_empty() {
            return Err(PsiError::Payload("trailing bytes"));
        }
        Ok(PsiMsg1 { elements })
    }
}

impl PsiMsg2 {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + (self.answers.len() + self.sender_items.len()) * ELEMENT_LEN);
        put_list(&mut out, &self.answers);
        put_list(&mut out, &self.sender_items);
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, PsiError> {
        let (answers, rest) = take_list(bytes)?;
        let (sender_items, rest) = take_list(rest)?;
        if !rest.is_empty() {
            return Err(PsiError::Payload("trailing bytes"));
        }
        Ok(PsiMsg2 { answers, sender_items })
    }
}

fn random_nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
    loop {
        let s = Scalar::random(rng);
        if s != Scalar::ZERO {
            return s;
        }
    }
}

/// One party's side of a single PSI execution. Not reusable.
pub struct PsiSession {
    role: Role,
    phase: Phase,
    secret: Scalar,
    rng: ChaCha20Rng,
    items: Vec<Digest>,
    group: GroupParams,
    hashed: Option<(Vec<Digest>, Vec<RistrettoPoint>)>,
}

impl std::fmt::Debug for PsiSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PsiSession")
            .field("role", &self.role)
            .field("phase", &self.phase)
            .field("items", &self.items.len())
            .finish_non_exhaustive()
    }
}

impl PsiSession {
    pub fn new<R: RngCore + CryptoRng>(role: Role, rng: &mut R) -> Self {
        let secret = random_nonzero_scalar(rng);
        let rng = ChaCha20Rng::from_rng(rng).expect("seeding from a CSPRNG");
        PsiSession {
            role,
            phase: Phase::Init,
            secret,
            rng,
            items: Vec::new(),
            group: GroupParams::RISTRETTO255,
            hashed: None,
        }
    }

    pub fn from_entropy(role: Role) -> Self {
        Self::new(role, &mut rand::rngs::OsRng)
    }

    /// Fixed secret and shuffle seed, for reproducing runs in tests.
    #[doc(hidden)]
    pub fn with_secret(role: Role, secret: Scalar, shuffle_seed: u64) -> Self {
        assert_ne!(secret, Scalar::ZERO, "secret must be non-zero");
        PsiSession {
            role,
            phase: Phase::Init,
            secret,
            rng: ChaCha20Rng::seed_from_u64(shuffle_seed),
            items: Vec::new(),
            group: GroupParams::RISTRETTO255,
            hashed: None,
        }
    }

    #[doc(hidden)]
    pub fn secret_scalar(&self) -> Scalar {
        self.secret
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn expect(&self, op: &'static str, role: Role, phase: Phase) -> Result<(), PsiError> {
        if self.role == role && self.phase == phase {
            Ok(())
        } else {
            Err(PsiError::State {
                op,
                role: self.role,
                phase: self.phase,
            })
        }
    }

    /// Hashes `items` into the group ahead of the message exchange.
    /// Used later only if the same items are passed again.
    pub fn precompute(&mut self, items: &[Digest]) {
        let points = items.iter().map(hash_to_group).collect();
        self.hashed = Some((items.to_vec(), points));
    }

    fn blind(&mut self, items: &[Digest]) -> Vec<Element> {
        match self.hashed.take() {
            Some((cached, points)) if cached == items => {
                points.iter().map(|p| self.group.encode(&(p * self.secret))).collect()
            }
            _ => items
                .iter()
                .map(|d| self.group.encode(&(hash_to_group(d) * self.secret)))
                .collect(),
        }
    }

    pub fn receiver_msg1(&mut self, items: &[Digest]) -> Result<PsiMsg1, PsiError> {
        self.expect("receiver_msg1", Role::Receiver, Phase::Init)?;
        let elements = self.blind(items);
        self.items = items.to_vec();
        self.phase = Phase::Sent1;
        Ok(PsiMsg1 { elements })
    }

    pub fn sender_respond(&mut self, items: &[Digest], msg1: &PsiMsg1) -> Result<PsiMsg2, PsiError> {
        self.expect("sender_respond", Role::Sender, Phase::Init)?;
        let mut answers = Vec::with_capacity(msg1.elements.len());
        for (index, e) in msg1.elements.iter().enumerate() {
            let p = self.group.decode(e).ok_or(PsiError::Decode { list: "msg1", index })?;
            answers.push(self.group.encode(&(p * self.secret)));
        }
        let mut sender_items = self.blind(items);
        sender_items.shuffle(&mut self.rng);
        self.phase = Phase::Responded;
        Ok(PsiMsg2 { answers, sender_items })
    }

    /// Marks a sender session finished; it accepts nothing afterwards.
    pub fn sender_close(&mut self) -> Result<(), PsiError> {
        self.expect("sender_close", Role::Sender, Phase::Responded)?;
        self.phase = Phase::Done;
        Ok(())
    }

    pub fn receiver_finish(&mut self, msg2: &PsiMsg2) -> Result<IntersectionResult, PsiError> {
        self.expect("receiver_finish", Role::Receiver, Phase::Sent1)?;
        if msg2.answers.len() != self.items.len() {
            return Err(PsiError::LengthMismatch {
                expected: self.items.len(),
                got: msg2.answers.len(),
            });
        }
        let mut theirs = HashSet::with_capacity(msg2.sender_items.len());
        for (index, e) in msg2.sender_items.iter().enumerate() {
            let p = self.group.decode(e).ok_or(PsiError::Decode {
                list: "sender_items",
                index,
            })?;
            theirs.insert(self.group.encode(&(p * self.secret)));
        }
        let member_flags: Vec<bool> = msg2.answers.iter().map(|a| theirs.contains(a)).collect();
        let intersection = self
            .items
            .iter()
            .zip(&member_flags)
            .filter_map(|(d, &hit)| hit.then_some(*d))
            .collect();
        self.phase = Phase::Done;
        Ok(IntersectionResult {
            member_flags,
            intersection,
        })
    }
}
