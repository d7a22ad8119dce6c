//! GCN embedding of truncated spectral features and its contrastive
//! training.
//!
//! The network convolves the `K x 10` coefficient matrix over a path graph
//! on the frequency axis (ascending frequencies are neighbors, plus self
//! loops, renormalization-style symmetric scaling):
//!
//! `H^(l+1) = ReLU(A_hat H^(l) W^(l))`, `Z = normalize(mean_rows(H^(L)) W_out)`
//!
//! Training minimizes the siamese contrastive loss
//! `y (1 - S) + (1 - y) max(0, m - (1 - S))` with `S` the cosine similarity
//! of the pair's embeddings. After training the weights are frozen; the
//! protection stage never updates them.

pub mod autodiff;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::mesh::Pair;
use crate::rng::{derive_seed, SplitMix64};
use autodiff::{Tape, Var};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture and training hyperparameters. All constants live here so a
/// run's provenance is one serialized record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub k: usize,
    pub n_features: usize,
    pub layers: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_features: 10,
            layers: 2,
            hidden: 32,
            out_dim: 64,
            margin: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 150,
            init_seed: 0xb10_face,
            shuffle_seed: 0x5475,
        }
    }
}

/// Unit-norm embedding of one scan.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub z: Vec<f64>,
    pub subject_id: String,
    pub scan_id: String,
}

/// Two-layer GCN over the frequency path graph plus an output projection.
#[derive(Debug, Clone)]
pub struct GcnModel {
    pub cfg: GcnConfig,
    /// Fixed `K x K` propagation matrix.
    pub a_hat: Mat,
    /// Layer weights: `n_features x hidden`, then `hidden x hidden` ...
    pub layer_weights: Vec<Mat>,
    /// `hidden x out_dim` output projection.
    pub w_out: Mat,
}

/// Renormalized propagation matrix of the path graph over frequency indices:
/// `D^{-1/2} (A + I) D^{-1/2}`.
pub fn frequency_path_propagation(k: usize) -> Mat {
    let mut adj = Mat::zeros(k, k);
    for i in 0..k {
        adj.set(i, i, 1.0);
        if i + 1 < k {
            adj.set(i, i + 1, 1.0);
            adj.set(i + 1, i, 1.0);
        }
    }
    let degrees: Vec<f64> = (0..k).map(|i| (0..k).map(|j| adj.get(i, j)).sum()).collect();
    Mat::from_fn(k, k, |i, j| adj.get(i, j) / (degrees[i] * degrees[j]).sqrt())
}

fn xavier_uniform(rows: usize, cols: usize, rng: &mut SplitMix64) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-limit, limit))
}

impl GcnModel {
    /// Xavier-uniform initialization from the config seed.
    pub fn new(cfg: GcnConfig) -> Self {
        let mut rng = SplitMix64::new(derive_seed(cfg.init_seed, "gcn-init", &[]));
        let mut layer_weights = Vec::with_capacity(cfg.layers);
        let mut in_dim = cfg.n_features;
        for _ in 0..cfg.layers {
            layer_weights.push(xavier_uniform(in_dim, cfg.hidden, &mut rng));
            in_dim = cfg.hidden;
        }
        let w_out = xavier_uniform(cfg.hidden, cfg.out_dim, &mut rng);
        let a_hat = frequency_path_propagation(cfg.k);
        Self { cfg, a_hat, layer_weights, w_out }
    }

    fn check_input(&self, f_low: &Mat) -> Result<(), NeuralError> {
        if f_low.shape() != (self.cfg.k, self.cfg.n_features) {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{}x{}", self.cfg.k, self.cfg.n_features),
                got: format!("{}x{}", f_low.rows(), f_low.cols()),
            });
        }
        Ok(())
    }

    /// Plain (non-differentiable) forward pass to a unit-norm embedding.
    pub fn forward(&self, f_low: &Mat) -> Result<Vec<f64>, NeuralError> {
        self.check_input(f_low)?;
        let mut h = f_low.clone();
        for w in &self.layer_weights {
            h = self.a_hat.matmul(&h).matmul(w).map(|x| x.max(0.0));
        }
        let z = h.mean_rows().matmul(&self.w_out);
        let norm = crate::linalg::norm(z.data());
        if norm < 1e-300 {
            log::warn!("GCN produced a zero embedding; returning e1 fallback");
            let mut e = vec![0.0; self.cfg.out_dim];
            e[0] = 1.0;
            return Ok(e);
        }
        Ok(z.data().iter().map(|x| x / norm).collect())
    }

    pub fn embed(&self, f_low: &Mat, subject_id: &str, scan_id: &str) -> Result<Embedding, NeuralError> {
        Ok(Embedding {
            z: self.forward(f_low)?,
            subject_id: subject_id.to_string(),
            scan_id: scan_id.to_string(),
        })
    }

    /// Tape forward pass given already-created weight vars, so batches share
    /// one set of parameter leaves.
    pub fn forward_tape(&self, tape: &mut Tape, weights: &GcnWeightVars, f_low: &Mat) -> Var {
        let input = tape.constant(f_low.clone());
        let a_hat = tape.constant(self.a_hat.clone());
        let mut h = input;
        for &w in &weights.layers {
            let propagated = tape.matmul(a_hat, h);
            let mixed = tape.matmul(propagated, w);
            h = tape.relu(mixed);
        }
        let pooled = tape.mean_rows(h);
        let projected = tape.matmul(pooled, weights.out);
        tape.normalize(projected)
    }

    pub fn weights_as_vars(&self, tape: &mut Tape) -> GcnWeightVars {
        GcnWeightVars {
            layers: self.layer_weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            out: tape.leaf(self.w_out.clone()),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self.layer_weights.iter_mut().collect();
        v.push(&mut self.w_out);
        v
    }
}

/// Parameter leaves of one tape forward pass.
pub struct GcnWeightVars {
    pub layers: Vec<Var>,
    pub out: Var,
}

impl GcnWeightVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.layers.clone();
        v.push(self.out);
        v
    }
}

/// Contrastive pair loss on cosine similarity (plain version):
/// `y (1 - S) + (1 - y) max(0, m - (1 - S))`.
pub fn contrastive_pair_loss(s: f64, genuine: bool, margin: f64) -> f64 {
    if genuine {
        1.0 - s
    } else {
        (margin - (1.0 - s)).max(0.0)
    }
}

/// Mean contrastive loss over a batch of scored pairs.
pub fn contrastive_loss(
    scores: &[(f64, bool)],
    margin: f64,
) -> Result<f64, NeuralError> {
    if scores.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    Ok(scores.iter().map(|&(s, y)| contrastive_pair_loss(s, y, margin)).sum::<f64>()
        / scores.len() as f64)
}

fn pair_loss_tape(tape: &mut Tape, s: Var, genuine: bool, margin: f64) -> Var {
    if genuine {
        // 1 - S
        let neg = tape.scale(s, -1.0);
        tape.add_scalar(neg, 1.0)
    } else {
        // max(0, m - (1 - S)) = relu(S - (1 - m))
        let shifted = tape.add_scalar(s, margin - 1.0);
        tape.relu(shifted)
    }
}

/// Adam optimizer state over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Train the GCN with the siamese contrastive loss. `features[i]` is the
/// `K x n` coefficient matrix of scan `i`; `pairs` index into it. Returns the
/// per-epoch mean loss history. Deterministic for fixed seeds.
pub fn train_gcn(
    model: &mut GcnModel,
    features: &[Mat],
    pairs: &[Pair],
    on_epoch: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<Vec<f64>, NeuralError> {
    if pairs.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    for f in features {
        model.check_input(f)?;
    }
    let cfg = model.cfg.clone();
    let mut shapes: Vec<(usize, usize)> =
        model.layer_weights.iter().map(Mat::shape).collect();
    shapes.push(model.w_out.shape());
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut callback = on_epoch;

    for epoch in 0..cfg.epochs {
        let mut rng =
            SplitMix64::new(derive_seed(cfg.shuffle_seed, "gcn-epoch", &[epoch as u64]));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let weights = model.weights_as_vars(&mut tape);
            // Scans repeat across pairs; embed each at most once per batch.
            let mut embedded: std::collections::BTreeMap<usize, Var> =
                std::collections::BTreeMap::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pair = pairs[pi];
                let za = *embedded.entry(pair.a).or_insert_with(|| {
                    model.forward_tape(&mut tape, &weights, &features[pair.a])
                });
                let zb = *embedded.entry(pair.b).or_insert_with(|| {
                    model.forward_tape(&mut tape, &weights, &features[pair.b])
                });
                let s = tape.dot(za, zb); // embeddings are already unit norm
                losses.push(pair_loss_tape(&mut tape, s, pair.genuine, cfg.margin));
            }
            let loss = tape.mean_scalars(&losses).expect("non-empty batch");
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(NeuralError::Diverged { epoch, loss: loss_val });
            }
            epoch_loss += loss_val * chunk.len() as f64;
            seen += chunk.len();

            let grads = tape.backward(loss);
            let grad_mats: Vec<Mat> = weights
                .all()
                .iter()
                .map(|&v| {
                    Tape::grad_of(&grads, v)
                        .cloned()
                        .unwrap_or_else(|| Mat::zeros(tape.value(v).rows(), tape.value(v).cols()))
                })
                .collect();
            let mut params = model.params_mut();
            opt.step(&mut params, &grad_mats);
        }

        let mean_loss = epoch_loss / seen as f64;
        history.push(mean_loss);
        if let Some(cb) = callback.as_deref_mut() {
            cb(epoch, mean_loss);
        }
    }
    Ok(history)
}

const GCN_MAGIC: &[u8; 4] = b"SFGC";
const GCN_VERSION: u32 = 1;

/// Checkpoint layout: magic, version, K, n, L, hidden, d (u32 LE), then each
/// weight block row-major as little-endian f64 in declaration order.
pub fn save_gcn(model: &GcnModel, path: &Path) -> Result<(), NeuralError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GCN_MAGIC);
    for v in [
        GCN_VERSION,
        model.cfg.k as u32,
        model.cfg.n_features as u32,
        model.cfg.layers as u32,
        model.cfg.hidden as u32,
        model.cfg.out_dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for w in model.layer_weights.iter().chain(std::iter::once(&model.w_out)) {
        for x in w.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint; `cfg` supplies the non-architectural hyperparameters
/// and must agree with the stored dimensions.
pub fn load_gcn(path: &Path, cfg: GcnConfig) -> Result<GcnModel, NeuralError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[..4] != GCN_MAGIC {
        return Err(NeuralError::BadCheckpoint("bad magic".into()));
    }
    let mut off = 4;
    let mut read_u32 = || {
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        v
    };
    let version = read_u32();
    if version != GCN_VERSION {
        return Err(NeuralError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let (k, n, layers, hidden, d) =
        (read_u32() as usize, read_u32() as usize, read_u32() as usize, read_u32() as usize, read_u32() as usize);
    if (k, n, layers, hidden, d)
        != (cfg.k, cfg.n_features, cfg.layers, cfg.hidden, cfg.out_dim)
    {
        return Err(NeuralError::BadCheckpoint(format!(
            "dimension mismatch: checkpoint ({k},{n},{layers},{hidden},{d}) vs config \
             ({},{},{},{},{})",
            cfg.k, cfg.n_features, cfg.layers, cfg.hidden, cfg.out_dim
        )));
    }
    let mut shapes = Vec::new();
    let mut in_dim = n;
    for _ in 0..layers {
        shapes.push((in_dim, hidden));
        in_dim = hidden;
    }
    shapes.push((hidden, d));
    let expected = 28 + 8 * shapes.iter().map(|&(r, c)| r * c).sum::<usize>();
    if bytes.len() != expected {
        return Err(NeuralError::BadCheckpoint(format!(
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
    let w_out = blocks.pop().unwrap();
    Ok(GcnModel { a_hat: frequency_path_propagation(cfg.k), cfg, layer_weights: blocks, w_out })
}

#[cfg(test)]
mod tests;
