//! Masked, sealed fragment dispatch with decoy verification.
//!
//! Each fragment gets a fresh `⌈λ/2⌉`-bit key. Its payload is XOR-masked
//! with a keystream expanded from that key (the classical stand-in for the
//! phase mask, so masking is an involution). The routing header is padded
//! to a fixed size and sealed with AES-256-GCM-SIV. A batch mixes
//! `⌊η N⌋` decoys with known expected results into the shuffled envelopes;
//! the batch is aborted when fewer than `1 - ε_ver` of them come back intact.
//!
//! Keystream construction, for key `k` of `a` bits packed little-endian into
//! `⌈a/8⌉` bytes (unused high bits zero):
//!
//! ```text
//! block_j = SHA-256("maestrocut/phasepad/mask/v1" || a as u32 LE || k || j as u64 LE)
//! keystream = block_0 || block_1 || ...   (truncated to the payload length)
//! ```
//!
//! Sealed header layout (always [`ENVELOPE_SIZE`] bytes):
//! `nonce (12) || AEAD(len as u32 LE || header || zero padding to 256) || tag (16)`,
//! with nonce `batch_id as u32 LE || position as u64 LE`.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use aes_gcm_siv::aead::{Aead, KeyInit};
use aes_gcm_siv::{Aes256GcmSiv, Nonce};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Largest header plaintext that fits an envelope.
pub const HEADER_CAP: usize = 256;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const ENVELOPE_SIZE: usize = NONCE_LEN + 4 + HEADER_CAP + TAG_LEN;

const MASK_DOMAIN: &[u8] = b"maestrocut/phasepad/mask/v1";
const TOKEN_LEN: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhasePadError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("envelope rejected: authentication failed")]
    Rejected,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("audit log error: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub lambda: u32,
    /// Decoy rate in [0, 1).
    pub eta: f64,
    /// Verification slack in (0, 1).
    pub eps_ver: f64,
}

impl Default for SecurityParams {
    fn default() -> Self {
        Self {
            lambda: 128,
            eta: 0.02,
            eps_ver: 0.1,
        }
    }
}

impl SecurityParams {
    pub fn new(lambda: u32, eta: f64, eps_ver: f64) -> Result<Self, PhasePadError> {
        if lambda == 0 || !(0.0..1.0).contains(&eta) || !(eps_ver > 0.0 && eps_ver < 1.0) {
            return Err(PhasePadError::Domain(format!(
                "need lambda >= 1, 0 <= eta < 1, 0 < eps_ver < 1 (got {lambda}, {eta}, {eps_ver})"
            )));
        }
        Ok(Self { lambda, eta, eps_ver })
    }

    /// `a = ⌈λ/2⌉`.
    pub fn key_bits(&self) -> u32 {
        self.lambda.div_ceil(2)
    }

    pub fn envelope_size(&self) -> usize {
        ENVELOPE_SIZE
    }

    /// `⌊η N⌋`.
    pub fn decoy_count(&self, n: usize) -> usize {
        (self.eta * n as f64 + 1e-9).floor() as usize
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct FragmentKey {
    bits: u32,
    bytes: Vec<u8>,
}

impl std::fmt::Debug for FragmentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FragmentKey({} bits)", self.bits)
    }
}

impl FragmentKey {
    /// Build from packed bytes; bits above `bits` must be zero.
    pub fn from_bytes(bits: u32, bytes: Vec<u8>) -> Result<Self, PhasePadError> {
        if bits == 0 {
            return Err(PhasePadError::Domain("empty key".into()));
        }
        if bytes.len() != bits.div_ceil(8) as usize {
            return Err(PhasePadError::Domain(format!("{bits}-bit key needs {} bytes", bits.div_ceil(8))));
        }
        let spare = bytes.len() as u32 * 8 - bits;
        if spare > 0 && bytes[bytes.len() - 1] >> (8 - spare) != 0 {
            return Err(PhasePadError::Domain("key has bits set above its length".into()));
        }
        Ok(Self { bits, bytes })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

pub fn keygen<R: Rng + ?Sized>(params: &SecurityParams, rng: &mut R) -> FragmentKey {
    let bits = params.key_bits();
    let mut bytes = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill_bytes(&mut bytes);
    let spare = bytes.len() as u32 * 8 - bits;
    if spare > 0 {
        let last = bytes.len() - 1;
        bytes[last] &= 0xff >> spare;
    }
    FragmentKey { bits, bytes }
}

/// XOR the key's keystream into `buf`.
pub fn apply_keystream(buf: &mut [u8], key: &FragmentKey) {
    let mut prefix = Sha256::new();
    prefix.update(MASK_DOMAIN);
    prefix.update(key.bits.to_le_bytes());
    prefix.update(&key.bytes);
    for (j, chunk) in buf.chunks_mut(32).enumerate() {
        let mut h = prefix.clone();
        h.update((j as u64).to_le_bytes());
        let block = h.finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

/// Involutive keyed mask: `mask_payload(mask_payload(p, k), k) == p`.
pub fn mask_payload(payload: &[u8], key: &FragmentKey) -> Result<Vec<u8>, PhasePadError> {
    if key.bits == 0 || key.bytes.is_empty() {
        return Err(PhasePadError::Domain("empty key".into()));
    }
    let mut out = payload.to_vec();
    apply_keystream(&mut out, key);
    Ok(out)
}

/// Per-batch AEAD key for headers.
#[derive(Clone)]
pub struct HeaderKey {
    cipher: Aes256GcmSiv,
}

impl std::fmt::Debug for HeaderKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HeaderKey(..)")
    }
}

impl HeaderKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let cipher = Aes256GcmSiv::new_from_slice(bytes).expect("32-byte key");
        Self { cipher }
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self::from_bytes(&k)
    }
}

pub fn envelope_nonce(batch_id: u32, position: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&batch_id.to_le_bytes());
    n[4..].copy_from_slice(&position.to_le_bytes());
    n
}

/// Pad `header` to the fixed plaintext size and seal it.
pub fn seal_header(header: &[u8], key: &HeaderKey, nonce: [u8; NONCE_LEN]) -> Result<Vec<u8>, PhasePadError> {
    if header.len() > HEADER_CAP {
        return Err(PhasePadError::Domain(format!(
            "header of {} bytes exceeds the {HEADER_CAP}-byte cap",
            header.len()
        )));
    }
    let mut plain = Vec::with_capacity(4 + HEADER_CAP);
    plain.extend_from_slice(&(header.len() as u32).to_le_bytes());
    plain.extend_from_slice(header);
    plain.resize(4 + HEADER_CAP, 0);
    let ct = key
        .cipher
        .encrypt(&Nonce::from(nonce), plain.as_slice())
        .map_err(|_| PhasePadError::Domain("AEAD encryption failed".into()))?;
    let mut out = Vec::with_capacity(ENVELOPE_SIZE);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    debug_assert_eq!(out.len(), ENVELOPE_SIZE);
    Ok(out)
}

/// Authenticate and unpad a sealed header.
pub fn open_header(sealed: &[u8], key: &HeaderKey) -> Result<Vec<u8>, PhasePadError> {
    if sealed.len() != ENVELOPE_SIZE {
        return Err(PhasePadError::Rejected);
    }
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&sealed[..NONCE_LEN]);
    let plain = key
        .cipher
        .decrypt(&Nonce::from(nonce), &sealed[NONCE_LEN..])
        .map_err(|_| PhasePadError::Rejected)?;
    let len = u32::from_le_bytes([plain[0], plain[1], plain[2], plain[3]]) as usize;
    if len > HEADER_CAP || plain[4 + len..].iter().any(|&b| b != 0) {
        return Err(PhasePadError::Rejected);
    }
    Ok(plain[4..4 + len].to_vec())
}

/// A fragment to dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentJob {
    pub fragment_id: u64,
    pub shots: u64,
    pub payload: Vec<u8>,
}

/// What the backend sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sealed_header: Vec<u8>,
    pub masked_payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_id: u32,
    pub envelopes: Vec<Envelope>,
    /// Shot counts in envelope order, decoys included.
    pub shot_vector: Vec<u64>,
}

/// Client-side memory of one dispatched envelope.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    /// `None` for decoys.
    pub fragment_id: Option<u64>,
    pub key: FragmentKey,
    pub expected: Option<Vec<u8>>,
}

impl ClientRecord {
    pub fn is_decoy(&self) -> bool {
        self.fragment_id.is_none()
    }
}

/// Everything the client keeps until the batch comes back.
#[derive(Debug, Clone)]
pub struct PendingBatch {
    pub batch_id: u32,
    header_key: HeaderKey,
    records: HashMap<[u8; TOKEN_LEN], ClientRecord>,
    pub decoys: usize,
    pub real: usize,
}

/// A backend response: the envelope's sealed header echoed with a result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendResult {
    pub sealed_header: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Honest backend: the result of a masked fragment is its masked payload.
pub fn honest_backend(batch: &Batch) -> Vec<BackendResult> {
    batch
        .envelopes
        .iter()
        .map(|e| BackendResult {
            sealed_header: e.sealed_header.clone(),
            payload: e.masked_payload.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub timestamp_ms: u64,
    pub batch_id: u32,
    pub cause: String,
    pub eps_ver: f64,
    pub pass_threshold: f64,
    pub decoy_pass_rate: f64,
    pub key_epoch: u64,
    pub seed: u64,
    /// SHA-256 over the event's other fields, serialized as JSON.
    pub content_hash: String,
}

/// Append-only audit trail, optionally mirrored to a JSON-lines file.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    events: Vec<AuditEvent>,
    sink: Option<PathBuf>,
}

impl AuditLog {
    pub fn with_sink(path: PathBuf) -> Self {
        Self {
            events: Vec::new(),
            sink: Some(path),
        }
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    fn append(&mut self, mut event: AuditEvent) -> Result<(), PhasePadError> {
        event.content_hash.clear();
        let body = serde_json::to_vec(&event).map_err(|e| PhasePadError::Audit(e.to_string()))?;
        event.content_hash = hex::encode(Sha256::digest(&body));
        if let Some(path) = &self.sink {
            let line = serde_json::to_string(&event).map_err(|e| PhasePadError::Audit(e.to_string()))?;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| PhasePadError::Audit(format!("{}: {e}", path.display())))?;
            writeln!(f, "{line}").map_err(|e| PhasePadError::Audit(e.to_string()))?;
        }
        self.events.push(event);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub batch_id: u32,
    pub decoys_dispatched: usize,
    pub decoys_passed: usize,
    pub decoy_pass_rate: f64,
    pub envelopes_rejected: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verified {
    pub report: VerificationReport,
    /// Unmasked real results as `(fragment_id, payload)`; empty on abort.
    pub recovered: Vec<(u64, Vec<u8>)>,
}

/// Client-side protocol state: parameters, key epoch, audit trail.
#[derive(Debug, Clone)]
pub struct PhasePad {
    params: SecurityParams,
    seed: u64,
    key_epoch: u64,
    next_batch: u32,
    audit: AuditLog,
}

impl PhasePad {
    pub fn new(params: SecurityParams, seed: u64) -> Self {
        Self {
            params,
            seed,
            key_epoch: 0,
            next_batch: 0,
            audit: AuditLog::default(),
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn params(&self) -> &SecurityParams {
        &self.params
    }

    pub fn key_epoch(&self) -> u64 {
        self.key_epoch
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Mask, seal, add `⌊η N⌋` decoys and shuffle.
    pub fn dispatch<R: Rng + ?Sized>(
        &mut self,
        fragments: &[FragmentJob],
        rng: &mut R,
    ) -> Result<(Batch, PendingBatch), PhasePadError> {
        let h = self.params.decoy_count(fragments.len());
        self.dispatch_with_decoys(fragments, h, rng)
    }

    pub fn dispatch_with_decoys<R: Rng + ?Sized>(
        &mut self,
        fragments: &[FragmentJob],
        decoys: usize,
        rng: &mut R,
    ) -> Result<(Batch, PendingBatch), PhasePadError> {
        if fragments.is_empty() {
            return Err(PhasePadError::Domain("empty batch".into()));
        }
        let batch_id = self.next_batch;
        self.next_batch = self.next_batch.wrapping_add(1);
        let header_key = HeaderKey::generate(rng);

        // (token, shots, masked payload, record)
        let mut items = Vec::with_capacity(fragments.len() + decoys);
        for f in fragments {
            let key = keygen(&self.params, rng);
            let mut masked = f.payload.clone();
            apply_keystream(&mut masked, &key);
            let record = ClientRecord {
                fragment_id: Some(f.fragment_id),
                key,
                expected: None,
            };
            items.push((f.shots, masked, record));
        }
        for _ in 0..decoys {
            // decoys mimic a random real fragment's size and shot count
            let like = &fragments[rng.random_range(0..fragments.len())];
            let key = keygen(&self.params, rng);
            let mut payload = vec![0u8; like.payload.len()];
            rng.fill_bytes(&mut payload);
            apply_keystream(&mut payload, &key);
            let record = ClientRecord {
                fragment_id: None,
                key,
                expected: Some(payload.clone()),
            };
            items.push((like.shots, payload, record));
        }
        items.shuffle(rng);

        let mut records = HashMap::with_capacity(items.len());
        let mut envelopes = Vec::with_capacity(items.len());
        let mut shot_vector = Vec::with_capacity(items.len());
        for (pos, (shots, masked, record)) in items.into_iter().enumerate() {
            let mut token = [0u8; TOKEN_LEN];
            loop {
                rng.fill_bytes(&mut token);
                if !records.contains_key(&token) {
                    break;
                }
            }
            let mut header = Vec::with_capacity(TOKEN_LEN + 12);
            header.extend_from_slice(&token);
            header.extend_from_slice(&shots.to_le_bytes());
            header.extend_from_slice(&(masked.len() as u32).to_le_bytes());
            let sealed_header = seal_header(&header, &header_key, envelope_nonce(batch_id, pos as u64))?;
            envelopes.push(Envelope {
                sealed_header,
                masked_payload: masked,
            });
            shot_vector.push(shots);
            records.insert(token, record);
        }
        let batch = Batch {
            batch_id,
            envelopes,
            shot_vector,
        };
        let pending = PendingBatch {
            batch_id,
            header_key,
            records,
            decoys,
            real: fragments.len(),
        };
        Ok((batch, pending))
    }

    /// Open every result, score decoys, unmask real results. Aborts (rotating
    /// keys and appending an audit event) when the decoy pass rate falls
    /// below `1 - ε_ver`. Missing or rejected decoys count as failures.
    pub fn verify_and_recover(
        &mut self,
        pending: &PendingBatch,
        results: &[BackendResult],
    ) -> Result<Verified, PhasePadError> {
        let mut seen: HashMap<[u8; TOKEN_LEN], ()> = HashMap::with_capacity(results.len());
        let mut rejected = 0;
        let mut passed = 0;
        let mut recovered = Vec::with_capacity(pending.real);
        for r in results {
            let Ok(header) = open_header(&r.sealed_header, &pending.header_key) else {
                rejected += 1;
                continue;
            };
            if header.len() < TOKEN_LEN {
                rejected += 1;
                continue;
            }
            let mut token = [0u8; TOKEN_LEN];
            token.copy_from_slice(&header[..TOKEN_LEN]);
            let Some(record) = pending.records.get(&token) else {
                return Err(PhasePadError::Protocol(format!(
                    "authenticated header carries unknown fragment token {}",
                    hex::encode(token)
                )));
            };
            if seen.insert(token, ()).is_some() {
                rejected += 1;
                continue;
            }
            match (&record.expected, record.fragment_id) {
                (Some(expected), _) => {
                    if *expected == r.payload {
                        passed += 1;
                    }
                }
                (None, Some(id)) => {
                    let mut plain = r.payload.clone();
                    apply_keystream(&mut plain, &record.key);
                    recovered.push((id, plain));
                }
                (None, None) => unreachable!("decoys always carry an expected result"),
            }
        }
        let pass_rate = if pending.decoys == 0 {
            1.0
        } else {
            passed as f64 / pending.decoys as f64
        };
        let threshold = 1.0 - self.params.eps_ver;
        let decision = if pass_rate < threshold {
            Decision::Abort
        } else {
            Decision::Accept
        };
        if decision == Decision::Abort {
            self.key_epoch += 1;
            recovered.clear();
            let timestamp_ms = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
            self.audit.append(AuditEvent {
                timestamp_ms,
                batch_id: pending.batch_id,
                cause: format!("decoy pass rate {pass_rate:.4} below {threshold:.4}; keys rotated"),
                eps_ver: self.params.eps_ver,
                pass_threshold: threshold,
                decoy_pass_rate: pass_rate,
                key_epoch: self.key_epoch,
                seed: self.seed,
                content_hash: String::new(),
            })?;
        }
        recovered.sort_by_key(|(id, _)| *id);
        Ok(Verified {
            report: VerificationReport {
                batch_id: pending.batch_id,
                decoys_dispatched: pending.decoys,
                decoys_passed: passed,
                decoy_pass_rate: pass_rate,
                envelopes_rejected: rejected,
                decision,
            },
            recovered,
        })
    }
}

/// `1 - (1 - h/N)^k`: chance that `k` altered envelopes hit at least one of
/// `h` decoys among `N`, when sampled with replacement (a lower bound for
/// sampling without replacement).
pub fn detection_lower_bound(n: usize, h: usize, k: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.0 - (1.0 - h as f64 / n as f64).powi(k as i32)
}

/// Hoeffding bound `exp(-2 h ε²)` on accepting a batch whose decoys fail at
/// rate at least `2ε`.
pub fn accept_incorrect_bound(h: usize, eps_ver: f64) -> f64 {
    (-2.0 * h as f64 * eps_ver * eps_ver).exp()
}

/// Pearson chi-square statistic of byte values against uniform over 256 bins.
pub fn byte_chi_square(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper 1% point of chi-square with 255 degrees of freedom.
pub const CHI2_255_CRITICAL_1PCT: f64 = 310.4574;
