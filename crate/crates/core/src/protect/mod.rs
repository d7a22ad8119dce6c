//! Key-conditioned spectral diffusion template protection.
//!
//! An embedding `Z` is pushed through `T` forward diffusion steps
//!
//! `Z_t = sqrt(1 - beta_t) Z_{t-1} + sqrt(beta_t) eps_t + (1 - beta_t) phi(Z_{t-1}, k)`
//!
//! where `eps_t` is a Gaussian noise vector derived deterministically from
//! the user key and the step index, and `phi` is a small key-conditioned MLP.
//! Determinism per key is what makes enrolled and query templates of the
//! same subject land close together; changing the key changes both the noise
//! stream and the learned drift, which is what renewability and
//! unlinkability rest on. The output `Z_T` is intentionally not
//! re-normalized: cosine matching is scale-invariant and the raw vector
//! keeps maximal information for the entropy analysis.
//!
//! `phi` is trained (GCN frozen) with a composite objective: a
//! discriminability term that preserves genuine-pair similarity structure
//! and suppresses same-key impostor similarity, a protected-domain
//! contrastive term, and unlinkability / key-diversity regularizers over
//! same-subject cross-key pairs.

mod train;

pub use train::{train_protect, ProtectTrainConfig};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Mat;
use crate::neural::autodiff::{Tape, Var};
use crate::rng::SplitMix64;

/// Width of the key embedding fed to `phi` alongside the feature vector.
pub const KEY_EMBED_DIM: usize = 32;

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProtectError {
    #[error("invalid key hex: {0}")]
    BadKeyHex(String),
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite value at diffusion step {step}")]
    NonFinite { step: usize },
    #[error("protection training needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("template serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// 128-bit user secret. The raw bytes never leave this type: there is no
/// serializer for it, `Debug` prints only the public digest, and templates
/// carry just `key_id`.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    key: [u8; 16],
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyMaterial(id={})", self.key_id_hex())
    }
}

impl KeyMaterial {
    pub fn from_bytes(key: [u8; 16]) -> Self {
        Self { key }
    }

    /// Expand a 64-bit seed into key bytes (demo / test convenience).
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let a = rng.next_u64().to_le_bytes();
        let b = rng.next_u64().to_le_bytes();
        let mut key = [0u8; 16];
        key[..8].copy_from_slice(&a);
        key[8..].copy_from_slice(&b);
        Self { key }
    }

    pub fn from_hex(hex: &str) -> Result<Self, ProtectError> {
        let hex = hex.trim();
        if hex.len() != 32 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(ProtectError::BadKeyHex(format!(
                "expected 32 hex chars, got {:?} ({} chars)",
                hex,
                hex.len()
            )));
        }
        let mut key = [0u8; 16];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|e| ProtectError::BadKeyHex(e.to_string()))?;
        }
        Ok(Self { key })
    }

    /// Public 64-bit digest: the first 8 bytes (big-endian) of
    /// `SHA-256("specface-key-id" || key)`.
    pub fn key_id(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"specface-key-id");
        h.update(self.key);
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }

    pub fn key_id_hex(&self) -> String {
        format!("{:016x}", self.key_id())
    }

    fn stream_seed(&self, parts: &[&[u8]]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.key);
        for p in parts {
            h.update(p);
        }
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }
}

/// Deterministic key embedding: a SplitMix64 stream seeded from
/// `SHA-256(key || "embed")`, mapped to uniform `[-1, 1]` entries.
pub fn key_embed(key: &KeyMaterial) -> Vec<f64> {
    let mut rng = SplitMix64::new(key.stream_seed(&[b"embed"]));
    (0..KEY_EMBED_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Deterministic standard-normal noise for diffusion step `t` (1-based):
/// a Box-Muller stream seeded from `SHA-256(key || t_le || "eps")`. The same
/// `(key, t, d)` always yields the same vector.
pub fn keyed_noise(key: &KeyMaterial, t: usize, d: usize) -> Vec<f64> {
    let t_bytes = (t as u64).to_le_bytes();
    let mut rng = SplitMix64::new(key.stream_seed(&[&t_bytes, b"eps"]));
    rng.normal_vec(d)
}

/// Diffusion noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Strictly increasing linear ramp from `beta_start` to `beta_end`,
    /// every value in (0, 1). A single-step schedule is just `beta_start`.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self, ProtectError> {
        if t == 0 {
            return Err(ProtectError::InvalidSchedule("T must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(ProtectError::InvalidSchedule(format!(
                "endpoints must lie in (0, 1): {beta_start}, {beta_end}"
            )));
        }
        if t > 1 && beta_start >= beta_end {
            return Err(ProtectError::InvalidSchedule(format!(
                "ramp must be strictly increasing: {beta_start} >= {beta_end}"
            )));
        }
        let betas = if t == 1 {
            vec![beta_start]
        } else {
            (0..t)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                .collect()
        };
        Ok(Self { betas })
    }

    /// Default endpoints `1e-4 .. 0.02`.
    pub fn default_linear(t: usize) -> Result<Self, ProtectError> {
        Self::linear(t, 1e-4, 0.02)
    }

    /// Explicit beta sequence. Relaxed validation (each value in `[0, 1)`,
    /// monotonicity not required) so limit cases like an all-zero schedule
    /// can be expressed in tests and analyses.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, ProtectError> {
        if betas.is_empty() {
            return Err(ProtectError::InvalidSchedule("empty schedule".into()));
        }
        for &b in &betas {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(ProtectError::InvalidSchedule(format!("beta {b} outside [0, 1)")));
            }
        }
        Ok(Self { betas })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Beta for 1-based step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }
}

/// Key-conditioned drift network: `[z ; key_embed] -> tanh -> tanh -> linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiNetwork {
    pub d: usize,
    pub key_dim: usize,
    pub hidden: usize,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub w3: Mat,
    pub b3: Mat,
}

impl PhiNetwork {
    /// Xavier-uniform weights, zero biases, seeded.
    pub fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let key_dim = KEY_EMBED_DIM;
        let mut rng = SplitMix64::new(seed);
        let xavier = |rows: usize, cols: usize, rng: &mut SplitMix64| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.uniform(-limit, limit))
        };
        Self {
            d,
            key_dim,
            hidden,
            w1: xavier(hidden, d + key_dim, &mut rng),
            b1: Mat::zeros(hidden, 1),
            w2: xavier(hidden, hidden, &mut rng),
            b2: Mat::zeros(hidden, 1),
            w3: xavier(d, hidden, &mut rng),
            b3: Mat::zeros(d, 1),
        }
    }

    /// The zero function; useful for the identity limit of the diffusion.
    pub fn zero(d: usize, hidden: usize) -> Self {
        let key_dim = KEY_EMBED_DIM;
        Self {
            d,
            key_dim,
            hidden,
            w1: Mat::zeros(hidden, d + key_dim),
            b1: Mat::zeros(hidden, 1),
            w2: Mat::zeros(hidden, hidden),
            b2: Mat::zeros(hidden, 1),
            w3: Mat::zeros(d, hidden),
            b3: Mat::zeros(d, 1),
        }
    }

    /// A constant function `phi(z, k) = c` (zero weights, output bias c).
    pub fn constant(d: usize, hidden: usize, c: &[f64]) -> Self {
        let mut phi = Self::zero(d, hidden);
        phi.b3 = Mat::col_vec(c.to_vec());
        phi
    }

    pub fn forward(&self, z: &[f64], kemb: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.d);
        debug_assert_eq!(kemb.len(), self.key_dim);
        let mut x = Vec::with_capacity(self.d + self.key_dim);
        x.extend_from_slice(z);
        x.extend_from_slice(kemb);
        let x = Mat::col_vec(x);
        let h1 = self.w1.matmul(&x).add(&self.b1).map(f64::tanh);
        let h2 = self.w2.matmul(&h1).add(&self.b2).map(f64::tanh);
        let out = self.w3.matmul(&h2).add(&self.b3);
        out.data().to_vec()
    }

    pub fn vars(&self, tape: &mut Tape) -> PhiWeightVars {
        PhiWeightVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w3: tape.leaf(self.w3.clone()),
            b3: tape.leaf(self.b3.clone()),
        }
    }

    /// Frozen weights: constants on the tape, so backward never computes
    /// weight gradients. Used when differentiating with respect to the
    /// input (the pre-image attack).
    pub fn const_vars(&self, tape: &mut Tape) -> PhiWeightVars {
        PhiWeightVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
            w3: tape.constant(self.w3.clone()),
            b3: tape.constant(self.b3.clone()),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &PhiWeightVars, z: Var, kemb: Var) -> Var {
        let x = tape.concat_rows(z, kemb);
        let a1 = tape.matmul(vars.w1, x);
        let a1b = tape.add(a1, vars.b1);
        let h1 = tape.tanh(a1b);
        let a2 = tape.matmul(vars.w2, h1);
        let a2b = tape.add(a2, vars.b2);
        let h2 = tape.tanh(a2b);
        let a3 = tape.matmul(vars.w3, h2);
        tape.add(a3, vars.b3)
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![
            self.w1.shape(),
            self.b1.shape(),
            self.w2.shape(),
            self.b2.shape(),
            self.w3.shape(),
            self.b3.shape(),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

/// Parameter leaves for one tape pass.
pub struct PhiWeightVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl PhiWeightVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Stored/transmitted protected template plus its parameter header. This is
/// the only biometric artifact that ever leaves the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedTemplate {
    pub version: u32,
    /// Spectral truncation of the producing pipeline.
    pub k: usize,
    /// Diffusion step count.
    pub t: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Hex digest of the key used; never the key itself.
    pub key_id: String,
    pub z_t: Vec<f64>,
}

impl ProtectedTemplate {
    pub fn to_json(&self) -> Result<String, ProtectError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProtectError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), ProtectError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, ProtectError> {
        let mut s = String::new();
        std::fs::File::open(path)?.read_to_string(&mut s)?;
        Self::from_json(&s)
    }
}

/// Run the forward diffusion. Exactly `schedule.len()` iterations; output is
/// the raw (un-normalized) `Z_T`. Deterministic in `(z, key, schedule, phi)`.
pub fn diffuse(
    z: &[f64],
    key: &KeyMaterial,
    schedule: &NoiseSchedule,
    phi: &PhiNetwork,
) -> Result<Vec<f64>, ProtectError> {
    if z.len() != phi.d {
        return Err(ProtectError::ShapeMismatch {
            expected: format!("{}-dim embedding", phi.d),
            got: format!("{}", z.len()),
        });
    }
    let kemb = key_embed(key);
    let mut cur = z.to_vec();
    for t in 1..=schedule.len() {
        let beta = schedule.beta(t);
        let keep = (1.0 - beta).sqrt();
        let noise = beta.sqrt();
        let eps = keyed_noise(key, t, cur.len());
        let drift = phi.forward(&cur, &kemb);
        for ((c, e), p) in cur.iter_mut().zip(&eps).zip(&drift) {
            *c = keep * *c + noise * e + (1.0 - beta) * p;
        }
        if cur.iter().any(|x| !x.is_finite()) {
            return Err(ProtectError::NonFinite { step: t });
        }
    }
    Ok(cur)
}

/// Convenience wrapper that stamps the parameter header.
pub fn protect_embedding(
    z: &[f64],
    key: &KeyMaterial,
    schedule: &NoiseSchedule,
    phi: &PhiNetwork,
    k: usize,
) -> Result<ProtectedTemplate, ProtectError> {
    Ok(ProtectedTemplate {
        version: TEMPLATE_VERSION,
        k,
        t: schedule.len(),
        d: z.len(),
        key_id: key.key_id_hex(),
        z_t: diffuse(z, key, schedule, phi)?,
    })
}

/// Differentiable diffusion: `start` may be a parameter leaf (pre-image
/// attack) or a constant (training, where gradients flow into `phi` only).
pub fn diffuse_tape(
    tape: &mut Tape,
    phi: &PhiNetwork,
    vars: &PhiWeightVars,
    start: Var,
    key: &KeyMaterial,
    schedule: &NoiseSchedule,
) -> Var {
    let d = tape.value(start).len();
    let kemb = tape.constant(Mat::col_vec(key_embed(key)));
    let mut cur = start;
    for t in 1..=schedule.len() {
        let beta = schedule.beta(t);
        let eps = tape.constant(Mat::col_vec(keyed_noise(key, t, d)));
        let drift = phi.forward_tape(tape, vars, cur, kemb);
        let kept = tape.scale(cur, (1.0 - beta).sqrt());
        let noised = tape.scale(eps, beta.sqrt());
        let drifted = tape.scale(drift, 1.0 - beta);
        let partial = tape.add(kept, noised);
        cur = tape.add(partial, drifted);
    }
    cur
}

/// Pair class by (same subject?, same key?). The four classes partition all
/// ordered pairs of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskClass {
    /// Same subject, same key.
    Genuine,
    /// Different subject, same key.
    Impostor,
    /// Same subject, different key.
    CrossKey,
    /// Different subject, different key.
    Mismatch,
}

pub fn mask_class(subject_a: usize, key_a: u64, subject_b: usize, key_b: u64) -> MaskClass {
    match (subject_a == subject_b, key_a == key_b) {
        (true, true) => MaskClass::Genuine,
        (false, true) => MaskClass::Impostor,
        (true, false) => MaskClass::CrossKey,
        (false, false) => MaskClass::Mismatch,
    }
}

/// Loss weighting; defaults favor impostor separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_imp: f64,
    pub lambda_diff: f64,
    pub beta_imp: f64,
    pub beta_other: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_imp: 1.0,
            lambda_diff: 0.5,
            beta_imp: 1.0,
            beta_other: 0.5,
            lambda_u: 0.5,
            lambda_d: 0.25,
            margin: 0.5,
        }
    }
}

/// One protected item in a scored batch.
#[derive(Debug, Clone)]
pub struct ProtectedItem {
    pub subject: usize,
    pub key_id: u64,
    pub z: Vec<f64>,
    pub z_t: Vec<f64>,
}

fn mask_means(
    items: &[ProtectedItem],
    mut term: impl FnMut(&ProtectedItem, &ProtectedItem) -> f64,
) -> [(f64, usize); 4] {
    let mut sums = [(0.0, 0usize); 4];
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let class = mask_class(
                items[i].subject,
                items[i].key_id,
                items[j].subject,
                items[j].key_id,
            ) as usize;
            sums[class].0 += term(&items[i], &items[j]);
            sums[class].1 += 1;
        }
    }
    sums
}

fn mean_of(sum_count: (f64, usize)) -> f64 {
    if sum_count.1 == 0 {
        0.0
    } else {
        sum_count.0 / sum_count.1 as f64
    }
}

/// Discriminability loss: preserve genuine similarity structure, suppress
/// same-key impostor and cross-key similarity. Empty mask classes
/// contribute 0.
pub fn loss_discriminability(items: &[ProtectedItem], w: &LossWeights) -> f64 {
    let gen = mask_means(items, |a, b| {
        let d = crate::linalg::cosine(&a.z, &b.z) - crate::linalg::cosine(&a.z_t, &b.z_t);
        d * d
    });
    let sq_prot = |a: &ProtectedItem, b: &ProtectedItem| {
        let s = crate::linalg::cosine(&a.z_t, &b.z_t);
        s * s
    };
    let all = mask_means(items, sq_prot);
    mean_of(gen[MaskClass::Genuine as usize])
        + w.lambda_imp * mean_of(all[MaskClass::Impostor as usize])
        + w.lambda_diff * mean_of(all[MaskClass::CrossKey as usize])
}

/// Protected-domain contrastive loss: pull genuine pairs together, hinge
/// everything else below the margin.
pub fn loss_contrastive_protected(items: &[ProtectedItem], w: &LossWeights) -> f64 {
    let mut gen = (0.0, 0usize);
    let mut imp = (0.0, 0usize);
    let mut other = (0.0, 0usize);
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let s = crate::linalg::cosine(&items[i].z_t, &items[j].z_t);
            match mask_class(
                items[i].subject,
                items[i].key_id,
                items[j].subject,
                items[j].key_id,
            ) {
                MaskClass::Genuine => {
                    gen.0 += 1.0 - s;
                    gen.1 += 1;
                }
                MaskClass::Impostor => {
                    imp.0 += (s - w.margin).max(0.0);
                    imp.1 += 1;
                }
                MaskClass::CrossKey | MaskClass::Mismatch => {
                    other.0 += (s - w.margin).max(0.0);
                    other.1 += 1;
                }
            }
        }
    }
    mean_of(gen) + w.beta_imp * mean_of(imp) + w.beta_other * mean_of(other)
}

/// Unlinkability of one same-subject cross-key template pair: `|cos|`.
pub fn loss_unlinkability(z_t_k1: &[f64], z_t_k2: &[f64]) -> f64 {
    crate::linalg::cosine(z_t_k1, z_t_k2).abs()
}

/// Key-diversity term: zero for identical keys, `|cos|` otherwise.
pub fn loss_key_diversity(
    z_t_k1: &[f64],
    z_t_k2: &[f64],
    k1: &KeyMaterial,
    k2: &KeyMaterial,
) -> f64 {
    if k1 == k2 {
        0.0
    } else {
        crate::linalg::cosine(z_t_k1, z_t_k2).abs()
    }
}

/// Composite objective over a scored batch (plain evaluation; the training
/// path builds the same expression on a tape).
pub fn loss_total(items: &[ProtectedItem], w: &LossWeights) -> f64 {
    let disc = loss_discriminability(items, w);
    let contr = loss_contrastive_protected(items, w);
    let unlink = mask_means(items, |a, b| loss_unlinkability(&a.z_t, &b.z_t));
    let unlink_mean = mean_of(unlink[MaskClass::CrossKey as usize]);
    // Diversity averages the per-pair case expression over all same-subject
    // pairs, so same-key pairs contribute structural zeros.
    let mut div_sum = 0.0;
    let mut div_count = 0usize;
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j || items[i].subject != items[j].subject {
                continue;
            }
            if items[i].key_id != items[j].key_id {
                div_sum += crate::linalg::cosine(&items[i].z_t, &items[j].z_t).abs();
            }
            div_count += 1;
        }
    }
    let diverse_mean = if div_count == 0 { 0.0 } else { div_sum / div_count as f64 };
    disc + contr + w.lambda_u * unlink_mean + w.lambda_d * diverse_mean
}

const PHI_MAGIC: &[u8; 4] = b"SFPH";
const PHI_VERSION: u32 = 1;

/// Checkpoint layout mirrors the GCN one: magic, version, d, key_dim, hidden
/// (u32 LE), then w1, b1, w2, b2, w3, b3 row-major little-endian f64.
pub fn save_phi(phi: &PhiNetwork, path: &Path) -> Result<(), ProtectError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PHI_MAGIC);
    for v in [PHI_VERSION, phi.d as u32, phi.key_dim as u32, phi.hidden as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for w in [&phi.w1, &phi.b1, &phi.w2, &phi.b2, &phi.w3, &phi.b3] {
        for x in w.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_phi(path: &Path) -> Result<PhiNetwork, ProtectError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != PHI_MAGIC {
        return Err(ProtectError::BadCheckpoint("bad magic".into()));
    }
    let mut off = 4;
    let mut read_u32 = || {
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        v
    };
    let version = read_u32();
    if version != PHI_VERSION {
        return Err(ProtectError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let d = read_u32() as usize;
    let key_dim = read_u32() as usize;
    let hidden = read_u32() as usize;
    if key_dim != KEY_EMBED_DIM {
        return Err(ProtectError::BadCheckpoint(format!(
            "key embedding width {key_dim} unsupported"
        )));
    }
    let shapes = [
        (hidden, d + key_dim),
        (hidden, 1),
        (hidden, hidden),
        (hidden, 1),
        (d, hidden),
        (d, 1),
    ];
    let expected = 20 + 8 * shapes.iter().map(|&(r, c)| r * c).sum::<usize>();
    if bytes.len() != expected {
        return Err(ProtectError::BadCheckpoint(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut blocks = Vec::new();
    for (r, c) in shapes {
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        blocks.push(Mat::from_vec(r, c, data));
    }
    let b3 = blocks.pop().unwrap();
    let w3 = blocks.pop().unwrap();
    let b2 = blocks.pop().unwrap();
    let w2 = blocks.pop().unwrap();
    let b1 = blocks.pop().unwrap();
    let w1 = blocks.pop().unwrap();
    Ok(PhiNetwork { d, key_dim, hidden, w1, b1, w2, b2, w3, b3 })
}

#[cfg(test)]
mod tests;
